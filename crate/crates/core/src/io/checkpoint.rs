//! `GBCK` model checkpoints.
//!
//! ```text
//! "GBCK" | version u32 | model-config JSON (u32 length + bytes)
//! parameters u32 | per parameter: name (u32 length + UTF-8) | rank u32 | dims u64[rank] | values f64[]
//! CRC32 of everything above, u32
//! ```

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{FormatError, Result};
use crate::model::{ModelConfig, PolicyModel};

use super::binary::{len32, open, Writer};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn malformed(msg: impl Into<String>) -> crate::Error {
    FormatError::Malformed(msg.into()).into()
}

pub fn encode_checkpoint(model: &PolicyModel) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.blob(serde_json::to_string(&model.config)?.as_bytes())?;
    w.u32(len32(model.parameters().len())?);
    for (name, t) in model.named_parameters() {
        w.blob(name.as_bytes())?;
        w.u32(len32(t.rank())?);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
    Ok(w.finish())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<PolicyModel> {
    let mut r = open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let config: ModelConfig =
        serde_json::from_slice(r.blob("config")?).map_err(|e| malformed(format!("model config: {e}")))?;
    let count = r.u32("parameter count")? as usize;
    let mut named = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name = String::from_utf8(r.blob("parameter name")?.to_vec())
            .map_err(|_| malformed("parameter name is not UTF-8"))?;
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(malformed(format!("parameter {name:?} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(n) = n.filter(|&n| n.saturating_mul(8) <= r.remaining()) else {
            return Err(FormatError::Truncated(format!("parameter {name:?} runs past the end of the file")).into());
        };
        let data = (0..n).map(|_| r.f64("value")).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| malformed(format!("parameter {name:?}: {e}")))?;
        named.push((name, t));
    }
    r.end()?;
    PolicyModel::from_named(config, named).map_err(|e| malformed(e.to_string()))
}

pub fn save_checkpoint(model: &PolicyModel, path: &Path) -> Result<()> {
    super::write_file(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyModel> {
    decode_checkpoint(&super::read_file(path)?)
}
