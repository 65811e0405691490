//! `GBRL` demonstration datasets.
//!
//! ```text
//! "GBRL" | version u32 | env-config JSON (u32 length + bytes)
//! episodes u32 | channels u32 | height u32 | width u32 | action arity u32
//! per episode: seed u64 | frames u32 |
//!     per frame: observation f32[c·h·w] | action u8 | gaze valid u8 | gaze x f32 | gaze y f32
//! CRC32 of everything above, u32
//! ```

use std::path::Path;

use crate::autodiff::Tensor;
use crate::envsim::{EnvConfig, EpisodeRecord, ACTIONS, HEIGHT, WIDTH};
use crate::error::{contract, FormatError, Result};
use crate::gaze::GazeSample;

use super::binary::{len32, open, Writer};

pub const DATASET_MAGIC: [u8; 4] = *b"GBRL";
pub const DATASET_VERSION: u32 = 1;

/// Episodes sharing one environment configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: EnvConfig,
    pub episodes: Vec<EpisodeRecord>,
}

impl Dataset {
    /// Wraps collected records; they must all carry the same configuration.
    pub fn from_records(config: EnvConfig, episodes: Vec<EpisodeRecord>) -> Result<Self> {
        if let Some(e) = episodes.iter().position(|r| r.config != config) {
            return contract(format!("episode {e} was collected under a different configuration"));
        }
        Ok(Dataset { config, episodes })
    }

    pub fn frames(&self) -> usize {
        self.episodes.iter().map(EpisodeRecord::len).sum()
    }
}

fn malformed(msg: impl Into<String>) -> crate::Error {
    FormatError::Malformed(msg.into()).into()
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let dims: Vec<usize> = match ds.episodes.iter().find_map(|e| e.observations.first()) {
        Some(o) => o.shape().to_vec(),
        None => vec![1, HEIGHT, WIDTH],
    };
    if dims.len() != 3 {
        return contract(format!("observations must be [c,h,w], got {dims:?}"));
    }
    let mut w = Writer::default();
    w.bytes(&DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.blob(serde_json::to_string(&ds.config)?.as_bytes())?;
    w.u32(len32(ds.episodes.len())?);
    for &d in &dims {
        w.u32(len32(d)?);
    }
    w.u32(ACTIONS as u32);
    for (e, rec) in ds.episodes.iter().enumerate() {
        if rec.observations.len() != rec.len() || rec.gaze.len() != rec.len() {
            return contract(format!("episode {e} has streams of unequal length"));
        }
        if rec.config != ds.config {
            return contract(format!("episode {e} was collected under a different configuration"));
        }
        w.u64(rec.seed);
        w.u32(len32(rec.len())?);
        for ((obs, &a), g) in rec.observations.iter().zip(&rec.actions).zip(&rec.gaze) {
            if obs.shape() != dims.as_slice() {
                return contract(format!(
                    "episode {e}: observation shape {:?}, expected {dims:?}",
                    obs.shape()
                ));
            }
            if a >= ACTIONS {
                return contract(format!("episode {e}: action {a} outside 0..{ACTIONS}"));
            }
            for &v in obs.data() {
                w.f32(v as f32);
            }
            w.u8(a as u8);
            w.u8(u8::from(g.valid));
            w.f32(g.x as f32);
            w.f32(g.y as f32);
        }
    }
    Ok(w.finish())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = open(bytes, DATASET_MAGIC, DATASET_VERSION)?;
    let config: EnvConfig =
        serde_json::from_slice(r.blob("config")?).map_err(|e| malformed(format!("environment config: {e}")))?;
    config
        .validate()
        .map_err(|e| malformed(format!("environment config: {e}")))?;
    let episodes = r.u32("episode count")? as usize;
    let dims = [
        r.u32("channels")? as usize,
        r.u32("height")? as usize,
        r.u32("width")? as usize,
    ];
    let arity = r.u32("action arity")? as usize;
    if dims.contains(&0) {
        return Err(malformed(format!("frame dims {dims:?}")));
    }
    if arity != ACTIONS {
        return Err(malformed(format!("action arity {arity}, expected {ACTIONS}")));
    }
    let pixels = dims.iter().product::<usize>();
    let frame_bytes = pixels * 4 + 2 + 8;
    let mut out = Vec::with_capacity(episodes.min(r.remaining() / 12));
    for e in 0..episodes {
        let seed = r.u64("episode seed")?;
        let n = r.u32("frame count")? as usize;
        if n.saturating_mul(frame_bytes) > r.remaining() {
            return Err(
                FormatError::Truncated(format!("episode {e} declares {n} frames past the end of the file")).into(),
            );
        }
        let mut rec = EpisodeRecord {
            seed,
            config,
            observations: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            gaze: Vec::with_capacity(n),
        };
        for i in 0..n {
            let raw = r.take(pixels * 4, "observation")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let obs = Tensor::new(dims.to_vec(), data)
                .map_err(|_| malformed(format!("episode {e} frame {i}: non-finite observation")))?;
            let a = r.u8("action")? as usize;
            if a >= arity {
                return Err(malformed(format!(
                    "episode {e} frame {i}: action {a} outside 0..{arity}"
                )));
            }
            let valid = match r.u8("gaze flag")? {
                0 => false,
                1 => true,
                v => return Err(malformed(format!("episode {e} frame {i}: gaze flag {v}"))),
            };
            let (x, y) = (r.f32("gaze x")? as f64, r.f32("gaze y")? as f64);
            if !(x.is_finite() && y.is_finite()) {
                return Err(malformed(format!("episode {e} frame {i}: non-finite gaze")));
            }
            rec.observations.push(obs);
            rec.actions.push(a);
            rec.gaze.push(GazeSample { frame: i, x, y, valid });
        }
        out.push(rec);
    }
    r.end()?;
    Ok(Dataset { config, episodes: out })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    super::write_file(path, &encode_dataset(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&super::read_file(path)?)
}
