//! 8-bit binary greyscale images (`P5`).

use std::path::Path;

use crate::error::{contract, Result};

/// `round(255·v)` with halves rounded up, so 0.5 maps to 128.
pub fn to_byte(v: f64) -> u8 {
    (255.0 * v + 0.5).floor() as u8
}

/// Encodes an `h × w` field with values in `[0,1]`, rows top to bottom.
pub fn encode_pgm(field: &[f64], dims: (usize, usize)) -> Result<Vec<u8>> {
    let (h, w) = dims;
    if field.len() != h * w || h == 0 || w == 0 {
        return contract(format!("field of {} values is not {h}x{w}", field.len()));
    }
    if let Some(v) = field.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return contract(format!("pixel value {v} outside [0,1]"));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(field.iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn export_pgm(field: &[f64], dims: (usize, usize), path: &Path) -> Result<()> {
    super::write_file(path, &encode_pgm(field, dims)?)
}
