//! Gaze coordinate streams to multimodal attention masks.
//!
//! The raw field of frame `i` is a temporally weighted sum of isotropic
//! Gaussians centred on the gaze samples of frames `i-k ..= i+k`:
//!
//! ```text
//! raw_i(p) = Σ_{j=-k..k, valid} α^|j| · N(p; (x_{i+j}, y_{i+j}), γ² β^{-2|j|} I)
//! ```
//!
//! evaluated at integer pixel coordinates (pixel `(r, c)` sits at `x = c`,
//! `y = r`), then divided by its maximum. Neighbouring frames are attenuated
//! by `α^|j|` and spread wider by `β^{-|j|}`, so fixations that persist over
//! several frames accumulate while one-frame saccades fade.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{config, contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub frame: usize,
    /// Column coordinate in pixels, `[0, width)`.
    pub x: f64,
    /// Row coordinate in pixels, `[0, height)`.
    pub y: f64,
    /// False when the tracker dropped this frame.
    pub valid: bool,
}

impl GazeSample {
    pub fn new(frame: usize, x: f64, y: f64) -> Self {
        GazeSample {
            frame,
            x,
            y,
            valid: true,
        }
    }

    pub fn dropout(frame: usize) -> Self {
        GazeSample {
            frame,
            x: 0.0,
            y: 0.0,
            valid: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    /// Temporal attenuation per frame of distance, in (0, 1).
    pub alpha: f64,
    /// Radius expansion per frame of distance, in (0, 1).
    pub beta: f64,
    /// Standard deviation of the present-frame Gaussian, in pixels.
    pub gamma: f64,
    /// Window radius `k` in frames.
    pub window: usize,
}

impl MaskParams {
    /// Values used for the 84×84 Atari recordings.
    pub const ATARI: MaskParams = MaskParams {
        alpha: 0.7,
        beta: 0.99,
        gamma: 15.0,
        window: 7,
    };

    /// Values used for the 320×180 driving recordings.
    pub const DRIVING: MaskParams = MaskParams {
        alpha: 0.8,
        beta: 0.99,
        gamma: 30.0,
        window: 7,
    };

    /// Atari decay values with γ sized to the 5×5 beacon glyph.
    pub const TRIGGER_WORLD: MaskParams = MaskParams {
        alpha: 0.7,
        beta: 0.99,
        gamma: 2.0,
        window: 7,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return config(format!("alpha must lie in (0,1), got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return config(format!("beta must lie in (0,1), got {}", self.beta));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return config(format!("gamma must be positive, got {}", self.gamma));
        }
        Ok(())
    }

    /// Weight `α^|j|` of the term at temporal offset `j`.
    pub fn weight(&self, offset: i64) -> f64 {
        self.alpha.powi(offset.unsigned_abs() as i32)
    }

    /// Per-axis variance `γ² β^{-2|j|}` of the term at temporal offset `j`.
    pub fn variance(&self, offset: i64) -> f64 {
        self.gamma * self.gamma * self.beta.powi(-2 * offset.unsigned_abs() as i32)
    }
}

impl Default for MaskParams {
    fn default() -> Self {
        Self::ATARI
    }
}

/// Unnormalised non-negative `height × width` field.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(height: usize, width: usize) -> Self {
        Field {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Max-normalised gaze mask in `[0, 1]`. All-zero marks a frame without gaze.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl GazeMask {
    /// The no-gaze sentinel.
    pub fn empty(height: usize, width: usize) -> Self {
        GazeMask {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn has_gaze(&self) -> bool {
        self.values.iter().any(|&v| v > 0.0)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.height, self.width], self.values.clone()).expect("mask values are finite")
    }

    /// Same mask rescaled to unit sum (used by the target-normalisation ablation).
    pub fn sum_normalized(&self) -> GazeMask {
        let total: f64 = self.values.iter().sum();
        let values = if total > 0.0 {
            self.values.iter().map(|v| v / total).collect()
        } else {
            self.values.clone()
        };
        GazeMask { values, ..*self }
    }
}

/// Raw field for frame `index` of `stream`. Windows are truncated at the
/// stream boundaries. Returns `None` when no sample in the window is valid.
pub fn raw_mask(
    stream: &[GazeSample],
    index: usize,
    params: &MaskParams,
    dims: (usize, usize),
) -> Result<Option<Field>> {
    params.validate()?;
    if index >= stream.len() {
        return contract(format!("frame {index} outside a stream of {}", stream.len()));
    }
    let (height, width) = dims;
    let k = params.window as i64;
    let mut field = Field::zeros(height, width);
    let mut any = false;
    let mut row_factor = vec![0.0; height];
    let mut col_factor = vec![0.0; width];
    for j in -k..=k {
        let pos = index as i64 + j;
        if pos < 0 || pos >= stream.len() as i64 {
            continue;
        }
        let s = &stream[pos as usize];
        if !s.valid {
            continue;
        }
        if !(s.x >= 0.0 && s.x < width as f64 && s.y >= 0.0 && s.y < height as f64) {
            return contract(format!(
                "gaze sample ({}, {}) of frame {} lies outside the {width}x{height} image",
                s.x, s.y, s.frame
            ));
        }
        any = true;
        let var = params.variance(j);
        let peak = params.weight(j) / (2.0 * std::f64::consts::PI * var);
        for (r, f) in row_factor.iter_mut().enumerate() {
            let d = r as f64 - s.y;
            *f = (-d * d / (2.0 * var)).exp();
        }
        for (c, f) in col_factor.iter_mut().enumerate() {
            let d = c as f64 - s.x;
            *f = (-d * d / (2.0 * var)).exp();
        }
        for (r, row) in field.values.chunks_mut(width).enumerate() {
            let ry = peak * row_factor[r];
            for (v, cx) in row.iter_mut().zip(&col_factor) {
                *v += ry * cx;
            }
        }
    }
    Ok(any.then_some(field))
}

/// Divides a non-negative field by its maximum. An all-zero field maps to
/// the all-zero mask.
pub fn normalize(raw: &Field) -> Result<GazeMask> {
    if let Some(v) = raw.values.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return contract(format!("gaze field must be finite and non-negative, found {v}"));
    }
    let max = raw.values.iter().cloned().fold(0.0, f64::max);
    let values = if max > 0.0 {
        raw.values.iter().map(|v| v / max).collect()
    } else {
        raw.values.clone()
    };
    Ok(GazeMask {
        height: raw.height,
        width: raw.width,
        values,
    })
}

/// One mask per frame of the stream; frames whose window has no valid
/// sample get the no-gaze sentinel.
pub fn mask_sequence(stream: &[GazeSample], params: &MaskParams, dims: (usize, usize)) -> Result<Vec<GazeMask>> {
    (0..stream.len())
        .map(|i| match raw_mask(stream, i, params, dims)? {
            Some(field) => normalize(&field),
            None => Ok(GazeMask::empty(dims.0, dims.1)),
        })
        .collect()
}
