//! The gaze-regularised policy `π(o) = f(ψ(o))`.
//!
//! * encoder ψ: conv 5×5/2 → ReLU → conv 3×3/2 → ReLU, giving the latent map `z`
//! * action head f: flatten → dense → ReLU → dense → logits
//! * gaze head φ (parameter-free): `|z|` → channel mean → spatial softmax →
//!   bilinear upsample to the input resolution
//!
//! The action head and the gaze head both read the same `z` node, so one
//! encoder pass serves both losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, upsample_map, Graph, Tensor, Var};
use crate::error::{config, contract, Result};

/// λ used for the Atari experiments.
pub const ATARI_LAMBDA: f64 = 10.0;
/// λ used for the driving experiments.
pub const DRIVING_LAMBDA: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    fn out(&self, n: usize) -> Option<usize> {
        (n + 2 * self.padding)
            .checked_sub(self.kernel)
            .map(|d| d / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub hidden: usize,
    pub actions: usize,
    /// Softmax temperature of the gaze head.
    pub temperature: f64,
}

impl Default for ModelConfig {
    /// 1×40×40 input → z of shape 32×9×9 → 2592 → 128 → 4.
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            input_height: 40,
            input_width: 40,
            conv1: ConvSpec {
                channels: 16,
                kernel: 5,
                stride: 2,
                padding: 1,
            },
            conv2: ConvSpec {
                channels: 32,
                kernel: 3,
                stride: 2,
                padding: 0,
            },
            hidden: 128,
            actions: 4,
            temperature: 1.0,
        }
    }
}

impl ModelConfig {
    /// Shape `(c', h', w')` of the latent map.
    pub fn latent_shape(&self) -> Result<(usize, usize, usize)> {
        let h1 = self.conv1.out(self.input_height);
        let w1 = self.conv1.out(self.input_width);
        let h2 = h1.and_then(|h| self.conv2.out(h));
        let w2 = w1.and_then(|w| self.conv2.out(w));
        match (h2, w2) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok((self.conv2.channels, h, w)),
            _ => config(format!(
                "encoder kernels do not fit a {}x{} input",
                self.input_height, self.input_width
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("conv1.channels", self.conv1.channels),
            ("conv1.stride", self.conv1.stride),
            ("conv2.channels", self.conv2.channels),
            ("conv2.stride", self.conv2.stride),
            ("hidden", self.hidden),
            ("actions", self.actions),
        ] {
            if v == 0 {
                return config(format!("{name} must be positive"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return config(format!("gaze temperature must be positive, got {}", self.temperature));
        }
        self.latent_shape().map(|_| ())
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.input_height, self.input_width)
    }
}

/// Parameter names in their canonical order.
pub const PARAM_NAMES: [&str; 8] = [
    "encoder.conv1.weight",
    "encoder.conv1.bias",
    "encoder.conv2.weight",
    "encoder.conv2.bias",
    "head.fc1.weight",
    "head.fc1.bias",
    "head.fc2.weight",
    "head.fc2.bias",
];

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    pub config: ModelConfig,
    params: Vec<Tensor>,
}

/// Parameter handles of a model bound onto a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct BoundParams {
    vars: [Var; 8],
    conv1: (usize, usize),
    conv2: (usize, usize),
}

impl BoundParams {
    pub fn vars(&self) -> &[Var; 8] {
        &self.vars
    }
}

impl PolicyModel {
    fn param_shapes(cfg: &ModelConfig) -> Result<Vec<Vec<usize>>> {
        let (c, h, w) = cfg.latent_shape()?;
        Ok(vec![
            vec![cfg.conv1.channels, cfg.in_channels, cfg.conv1.kernel, cfg.conv1.kernel],
            vec![cfg.conv1.channels],
            vec![
                cfg.conv2.channels,
                cfg.conv1.channels,
                cfg.conv2.kernel,
                cfg.conv2.kernel,
            ],
            vec![cfg.conv2.channels],
            vec![cfg.hidden, c * h * w],
            vec![cfg.hidden],
            vec![cfg.actions, cfg.hidden],
            vec![cfg.actions],
        ])
    }

    /// He-uniform weights, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self::param_shapes(&config)?
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Ok(Tensor::zeros(shape));
                }
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
            })
            .collect::<Result<_>>()?;
        Ok(PolicyModel { config, params })
    }

    /// Rebuilds a model from named tensors; every name must appear exactly once.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::param_shapes(&config)?;
        let mut slots: Vec<Option<Tensor>> = vec![None; PARAM_NAMES.len()];
        for (name, t) in named {
            let Some(i) = PARAM_NAMES.iter().position(|n| *n == name) else {
                return contract(format!("unknown parameter {name:?}"));
            };
            if slots[i].is_some() {
                return contract(format!("parameter {name:?} given twice"));
            }
            if t.shape() != shapes[i].as_slice() {
                return contract(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    shapes[i]
                ));
            }
            slots[i] = Some(t);
        }
        let params = slots
            .into_iter()
            .zip(PARAM_NAMES)
            .map(|(s, n)| s.ok_or_else(|| crate::Error::Contract(format!("missing parameter {n:?}"))))
            .collect::<Result<_>>()?;
        Ok(PolicyModel { config, params })
    }

    pub fn named_parameters(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.into_iter().zip(&self.params)
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records the parameters as differentiable leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        self.bind_with(g, true)
    }

    fn bind_with(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = std::array::from_fn(|i| {
            let t = self.params[i].clone();
            if trainable {
                g.param(t)
            } else {
                g.constant(t)
            }
        });
        let c = &self.config;
        BoundParams {
            vars,
            conv1: (c.conv1.stride, c.conv1.padding),
            conv2: (c.conv2.stride, c.conv2.padding),
        }
    }

    /// Stacks `[c,h,w]` observations into one `[n,c,h,w]` tensor after
    /// checking their shape.
    pub fn stack_inputs(&self, images: &[&Tensor]) -> Result<Tensor> {
        let want = [
            self.config.in_channels,
            self.config.input_height,
            self.config.input_width,
        ];
        let mut data = Vec::with_capacity(images.len() * want.iter().product::<usize>());
        for img in images {
            if img.shape() != want {
                return contract(format!("observation shape {:?}, expected {want:?}", img.shape()));
            }
            data.extend_from_slice(img.data());
        }
        if images.is_empty() {
            return contract("empty observation batch");
        }
        Tensor::new([images.len(), want[0], want[1], want[2]], data)
    }

    /// Latent maps `z` for a batch of observations (not recorded for backward).
    pub fn latent(&self, images: &[&Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind_with(&mut g, false);
        let x = g.constant(self.stack_inputs(images)?);
        let z = encode(&mut g, &p, x)?;
        Ok(g.value(z).clone())
    }

    /// Action distributions `softmax(f(ψ(o)))` for a batch of observations.
    pub fn action_probs(&self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = self.bind_with(&mut g, false);
        let x = g.constant(self.stack_inputs(images)?);
        let z = encode(&mut g, &p, x)?;
        let logits = act(&mut g, &p, z)?;
        Ok(g.value(logits)
            .data()
            .chunks(self.config.actions)
            .map(|row| {
                let mut r = row.to_vec();
                softmax_in_place(&mut r, 1.0);
                r
            })
            .collect())
    }

    /// Gaze prediction for one observation.
    pub fn predict_gaze(&self, image: &Tensor) -> Result<PredictedGaze> {
        let mut g = Graph::new();
        let p = self.bind_with(&mut g, false);
        let x = g.constant(self.stack_inputs(&[image])?);
        let z = encode(&mut g, &p, x)?;
        let head = predict_gaze(&mut g, z, self.config.temperature, self.config.input_dims())?;
        PredictedGaze::new(
            g.value(head.pre_upsample).data().to_vec(),
            &g.value(head.pre_upsample).shape()[1..],
            g.value(head.field).data().to_vec(),
            self.config.input_dims(),
        )
    }
}

/// ψ: `[n,c,h,w]` (or `[c,h,w]`) observations to latent maps `z`.
pub fn encode(g: &mut Graph, p: &BoundParams, images: Var) -> Result<Var> {
    let v = &p.vars;
    let h = g.conv2d(images, v[0], Some(v[1]), p.conv1.0, p.conv1.1)?;
    let h = g.relu(h)?;
    let z = g.conv2d(h, v[2], Some(v[3]), p.conv2.0, p.conv2.1)?;
    g.relu(z)
}

/// f: latent maps to action logits.
pub fn act(g: &mut Graph, p: &BoundParams, z: Var) -> Result<Var> {
    let v = &p.vars;
    let shape = g.value(z).shape().to_vec();
    let flat = match shape.as_slice() {
        [n, c, h, w] => g.reshape(z, [*n, c * h * w])?,
        [c, h, w] => g.reshape(z, [c * h * w])?,
        s => return contract(format!("latent map must be rank 3 or 4, got {s:?}")),
    };
    let h = g.linear(flat, v[4], Some(v[5]))?;
    let h = g.relu(h)?;
    g.linear(h, v[6], Some(v[7]))
}

/// Graph nodes of the gaze head.
#[derive(Clone, Copy, Debug)]
pub struct GazeHead {
    /// Unit-sum spatial map at latent resolution.
    pub pre_upsample: Var,
    /// Predicted field at input resolution.
    pub field: Var,
}

/// φ: `|z|` → channel mean → spatial softmax → bilinear upsample.
pub fn predict_gaze(g: &mut Graph, z: Var, temperature: f64, target: (usize, usize)) -> Result<GazeHead> {
    let a = g.abs(z)?;
    let m = g.channel_mean(a)?;
    let pre_upsample = g.spatial_softmax(m, temperature)?;
    let field = g.bilinear_upsample(pre_upsample, target)?;
    Ok(GazeHead { pre_upsample, field })
}

/// Mean cross-entropy of the expert actions.
pub fn loss_bc(g: &mut Graph, logits: Var, actions: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, actions)
}

/// Squared Frobenius distance per map, divided by the map size, averaged over
/// the frames that carry gaze.
pub fn loss_gp(g: &mut Graph, predicted: Var, targets: &Tensor, has_gaze: &[bool]) -> Result<Var> {
    g.masked_squared_error(predicted, targets, has_gaze)
}

/// One training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[n, c, h, w]`
    pub images: Tensor,
    pub actions: Vec<usize>,
    /// `[n, h, w]` gaze targets; rows without gaze are ignored.
    pub masks: Tensor,
    pub has_gaze: Vec<bool>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub bc: Var,
    /// Absent on the plain behaviour-cloning path.
    pub gp: Option<Var>,
    pub latent: Var,
}

/// `L_BC + λ·L_GP` from a single encoder pass.
pub fn total_loss(
    g: &mut Graph,
    model: &PolicyModel,
    p: &BoundParams,
    batch: &Batch,
    lambda: f64,
) -> Result<LossNodes> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return config(format!("lambda must be >= 0, got {lambda}"));
    }
    let x = g.constant(batch.images.clone());
    let z = encode(g, p, x)?;
    let logits = act(g, p, z)?;
    let bc = loss_bc(g, logits, &batch.actions)?;
    let head = predict_gaze(g, z, model.config.temperature, model.config.input_dims())?;
    let gp = loss_gp(g, head.field, &batch.masks, &batch.has_gaze)?;
    let weighted = g.scale(gp, lambda)?;
    let total = g.add(bc, weighted)?;
    Ok(LossNodes {
        total,
        bc,
        gp: Some(gp),
        latent: z,
    })
}

/// Plain behaviour cloning; the gaze head is never built.
pub fn bc_loss(g: &mut Graph, p: &BoundParams, batch: &Batch) -> Result<LossNodes> {
    let x = g.constant(batch.images.clone());
    let z = encode(g, p, x)?;
    let logits = act(g, p, z)?;
    let bc = loss_bc(g, logits, &batch.actions)?;
    Ok(LossNodes {
        total: bc,
        bc,
        gp: None,
        latent: z,
    })
}

/// Gaze-head output outside of training.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedGaze {
    pub latent_dims: (usize, usize),
    pub pre_upsample: Vec<f64>,
    pub dims: (usize, usize),
    pub field: Vec<f64>,
}

impl PredictedGaze {
    fn new(pre: Vec<f64>, latent: &[usize], field: Vec<f64>, dims: (usize, usize)) -> Result<Self> {
        let total: f64 = pre.iter().sum();
        if (total - 1.0).abs() > 1e-9 || pre.iter().any(|&v| v < 0.0) {
            return contract(format!("gaze head pre-upsample map sums to {total}"));
        }
        Ok(PredictedGaze {
            latent_dims: (latent[0], latent[1]),
            pre_upsample: pre,
            dims,
            field,
        })
    }
}

/// Visualisation of where the encoder is active: `|z|` channel mean,
/// upsampled to `dims`, Gaussian-blurred, and max-normalised to `[0,1]`.
/// `z` is a single `[c, h', w']` latent map.
pub fn attention_map(z: &Tensor, smoothing_sigma: f64, dims: (usize, usize)) -> Result<Vec<f64>> {
    let &[c, h, w] = z.shape() else {
        return contract(format!("attention_map expects a [c,h,w] latent, got {:?}", z.shape()));
    };
    if !(smoothing_sigma >= 0.0 && smoothing_sigma.is_finite()) {
        return config(format!("smoothing sigma must be >= 0, got {smoothing_sigma}"));
    }
    if dims.0 < h || dims.1 < w {
        return contract("attention_map target smaller than the latent map");
    }
    let mut mean = vec![0.0; h * w];
    for ch in z.data().chunks(h * w) {
        for (m, v) in mean.iter_mut().zip(ch) {
            *m += v.abs() / c as f64;
        }
    }
    let up = upsample_map(&mean, (h, w), dims);
    let mut blurred = gaussian_blur(&up, dims, smoothing_sigma);
    let max = blurred.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        blurred.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    }
    Ok(blurred)
}

/// Separable Gaussian blur with edge replication. `sigma == 0` is the identity.
pub fn gaussian_blur(src: &[f64], dims: (usize, usize), sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return src.to_vec();
    }
    let (h, w) = dims;
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * src[r * w + clamp(c as i64 + i as i64 - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[clamp(r as i64 + i as i64 - radius, h) * w + c])
                .sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaze_of(z: Tensor, temperature: f64, dims: (usize, usize)) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let zv = g.constant(z);
        let h = predict_gaze(&mut g, zv, temperature, dims).unwrap();
        (
            g.value(h.pre_upsample).data().to_vec(),
            g.value(h.field).data().to_vec(),
        )
    }

    fn argmax(v: &[f64]) -> usize {
        v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
    }

    #[test]
    fn default_latent_shape_is_32x9x9() {
        assert_eq!(ModelConfig::default().latent_shape().unwrap(), (32, 9, 9));
        let m = PolicyModel::init(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.parameters()[4].shape(), &[128, 2592]);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_latent() {
        let m = PolicyModel::init(ModelConfig::default(), 1).unwrap();
        let img = Tensor::zeros([1, 40, 40]);
        let z = m.latent(&[&img]).unwrap();
        assert_eq!(z.shape(), &[1, 32, 9, 9]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_bit_deterministic() {
        let m = PolicyModel::init(ModelConfig::default(), 2).unwrap();
        let img = Tensor::from_fn([1, 40, 40], |i| ((i * 7919) % 101) as f64 / 100.0).unwrap();
        assert_eq!(m.latent(&[&img]).unwrap(), m.latent(&[&img]).unwrap());
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let m = PolicyModel::init(ModelConfig::default(), 2).unwrap();
        let img = Tensor::zeros([1, 32, 40]);
        assert!(matches!(m.latent(&[&img]), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn gaze_head_constant_latent_gives_constant_field() {
        let (pre, field) = gaze_of(Tensor::full([4, 5, 5], 0.3), 1.0, (20, 20));
        assert!(pre.iter().all(|v| (v - 1.0 / 25.0).abs() < 1e-15));
        assert!(field.iter().all(|v| (v - 1.0 / 25.0).abs() < 1e-15));
    }

    #[test]
    fn gaze_head_ignores_sign() {
        let z = Tensor::from_fn([3, 6, 6], |i| ((i as f64) * 0.77).sin()).unwrap();
        let neg = Tensor::new([3, 6, 6], z.data().iter().map(|v| -v).collect()).unwrap();
        assert_eq!(gaze_of(z, 1.0, (18, 18)), gaze_of(neg, 1.0, (18, 18)));
    }

    #[test]
    fn gaze_head_peaks_at_dominant_position() {
        // position (row 2, col 6) of a 9×9 latent dominates in every channel
        let mut data = vec![0.1; 4 * 81];
        for c in 0..4 {
            data[c * 81 + 2 * 9 + 6] = if c % 2 == 0 { 5.0 } else { -5.0 };
        }
        let (pre, field) = gaze_of(Tensor::new([4, 9, 9], data).unwrap(), 1.0, (41, 41));
        assert_eq!(argmax(&pre), 2 * 9 + 6);
        // align-corners 9→41 maps latent index i to pixel 5·i exactly
        assert_eq!(argmax(&field), 10 * 41 + 30);
        assert!((pre.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn act_with_zero_weights_returns_bias() {
        let cfg = ModelConfig::default();
        let mut m = PolicyModel::init(cfg, 0).unwrap();
        for p in m.parameters_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m.parameters_mut()[7]
            .data_mut()
            .copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let z = g.constant(Tensor::zeros([32, 9, 9]));
        let logits = act(&mut g, &p, z).unwrap();
        assert_eq!(g.value(logits).data(), &[0.5, -1.0, 2.0, 0.25]);
    }

    #[test]
    fn action_probs_sum_to_one_and_argmax_shift_invariant() {
        let m = PolicyModel::init(ModelConfig::default(), 4).unwrap();
        let img = Tensor::from_fn([1, 40, 40], |i| (i % 13) as f64 / 13.0).unwrap();
        let probs = m.action_probs(&[&img, &img]).unwrap();
        assert_eq!(probs.len(), 2);
        for p in &probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut logits = vec![0.3, -0.2, 1.7, 0.9];
        let a = argmax(&logits);
        logits.iter_mut().for_each(|v| *v += 100.0);
        assert_eq!(argmax(&logits), a);
    }

    #[test]
    fn bc_loss_values() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros([1, 4]));
        let l = loss_bc(&mut g, uniform, &[3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);

        let sure = g.constant(Tensor::new([4], vec![0.0, 800.0, 0.0, 0.0]).unwrap());
        let l = loss_bc(&mut g, sure, &[1]).unwrap();
        assert!(g.value(l).item() < 1e-300);

        let rows = [vec![0.2, -1.0, 0.4, 0.0], vec![1.5, 0.1, -0.3, 2.0]];
        let both = g.constant(Tensor::new([2, 4], rows.concat()).unwrap());
        let lb = loss_bc(&mut g, both, &[2, 0]).unwrap();
        let a = g.constant(Tensor::new([4], rows[0].clone()).unwrap());
        let b = g.constant(Tensor::new([4], rows[1].clone()).unwrap());
        let la = loss_bc(&mut g, a, &[2]).unwrap();
        let lb1 = loss_bc(&mut g, b, &[0]).unwrap();
        let mean = (g.value(la).item() + g.value(lb1).item()) / 2.0;
        assert!((g.value(lb).item() - mean).abs() < 1e-15);
        assert!(loss_bc(&mut g, a, &[4]).is_err());
    }

    #[test]
    fn gp_loss_values() {
        use crate::gaze::{mask_sequence, GazeSample, MaskParams};
        let params = MaskParams {
            gamma: 3.0,
            window: 0,
            ..MaskParams::ATARI
        };
        let mask = mask_sequence(&[GazeSample::new(0, 10.0, 14.0)], &params, (20, 20)).unwrap()[0].to_tensor();
        let mut g = Graph::new();
        let same = g.constant(mask.clone());
        let l = loss_gp(&mut g, same, &mask, &[true]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let zero = g.constant(Tensor::zeros([20, 20]));
        let l = loss_gp(&mut g, zero, &mask, &[true]).unwrap();
        let mut direct = 0.0;
        for v in mask.data() {
            direct += v * v;
        }
        assert!((g.value(l).item() - direct / 400.0).abs() < 1e-15);

        let half = g.constant(Tensor::new([20, 20], mask.data().iter().map(|v| v * 0.5).collect()).unwrap());
        let r1 = loss_gp(&mut g, half, &mask, &[true]).unwrap();
        let zero2 = g.constant(Tensor::zeros([20, 20]));
        let r2 = loss_gp(&mut g, zero2, &mask, &[true]).unwrap();
        // residual doubles from mask/2 to mask
        assert!((g.value(r2).item() - 4.0 * g.value(r1).item()).abs() < 1e-15);

        let wrong = g.constant(Tensor::zeros([20, 19]));
        assert!(loss_gp(&mut g, wrong, &mask, &[true]).is_err());
    }

    fn tiny_batch(cfg: &ModelConfig, n: usize) -> Batch {
        let (h, w) = cfg.input_dims();
        Batch {
            images: Tensor::from_fn([n, 1, h, w], |i| ((i * 31) % 17) as f64 / 17.0).unwrap(),
            actions: (0..n).map(|i| i % 4).collect(),
            masks: Tensor::from_fn([n, h, w], |i| ((i * 7) % 11) as f64 / 11.0).unwrap(),
            has_gaze: (0..n).map(|i| i % 3 != 0).collect(),
        }
    }

    #[test]
    fn zero_lambda_total_equals_bc_bitwise() {
        let cfg = ModelConfig::default();
        let m = PolicyModel::init(cfg, 5).unwrap();
        let batch = tiny_batch(&cfg, 3);
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let nodes = total_loss(&mut g, &m, &p, &batch, 0.0).unwrap();
        let mut g2 = Graph::new();
        let p2 = m.bind(&mut g2);
        let plain = bc_loss(&mut g2, &p2, &batch).unwrap();
        assert_eq!(
            g.value(nodes.total).item().to_bits(),
            g2.value(plain.total).item().to_bits()
        );
        assert!(total_loss(&mut g, &m, &p, &batch, -1.0).is_err());
    }

    #[test]
    fn single_encoder_pass_per_batch() {
        let cfg = ModelConfig::default();
        let m = PolicyModel::init(cfg, 5).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let nodes = total_loss(&mut g, &m, &p, &tiny_batch(&cfg, 2), 10.0).unwrap();
        assert_eq!(g.count_op("conv2d"), 2);
        // φ's abs and f's reshape both consume the same latent node
        let consumers: Vec<_> = g
            .entries()
            .into_iter()
            .filter(|e| e.inputs.contains(&nodes.latent))
            .map(|e| e.op)
            .collect();
        assert_eq!(consumers, vec!["reshape", "abs"]);
    }

    #[test]
    fn losses_are_finite_and_non_negative() {
        let cfg = ModelConfig::default();
        let m = PolicyModel::init(cfg, 6).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let n = total_loss(&mut g, &m, &p, &tiny_batch(&cfg, 4), 10.0).unwrap();
        for v in [n.total, n.bc, n.gp.unwrap()] {
            let x = g.value(v).item();
            assert!(x.is_finite() && x >= 0.0);
        }
    }

    #[test]
    fn predicted_gaze_is_unit_sum_before_upsampling() {
        let m = PolicyModel::init(ModelConfig::default(), 8).unwrap();
        let img = Tensor::from_fn([1, 40, 40], |i| (i % 9) as f64 / 9.0).unwrap();
        let pg = m.predict_gaze(&img).unwrap();
        assert_eq!(pg.latent_dims, (9, 9));
        assert!((pg.pre_upsample.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(pg.field.len(), 1600);
    }

    #[test]
    fn attention_map_constant_and_zero_latent() {
        let a = attention_map(&Tensor::full([3, 9, 9], 0.7), 1.5, (40, 40)).unwrap();
        assert!(a.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let z = attention_map(&Tensor::zeros([3, 9, 9]), 1.5, (40, 40)).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_map_in_unit_range_and_keeps_peak() {
        let mut data = vec![0.0; 2 * 81];
        data[4 * 9 + 3] = 3.0;
        data[81 + 4 * 9 + 3] = -2.0;
        let z = Tensor::new([2, 9, 9], data).unwrap();
        for sigma in [0.0, 0.5, 1.0, 2.0] {
            let a = attention_map(&z, sigma, (41, 41)).unwrap();
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(argmax(&a), 20 * 41 + 15);
        }
    }

    #[test]
    fn named_parameter_round_trip_and_errors() {
        let cfg = ModelConfig::default();
        let m = PolicyModel::init(cfg, 3).unwrap();
        let named: Vec<_> = m.named_parameters().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert_eq!(PolicyModel::from_named(cfg, named.clone()).unwrap(), m);
        let mut dup = named.clone();
        dup.push(named[0].clone());
        assert!(PolicyModel::from_named(cfg, dup).is_err());
        assert!(PolicyModel::from_named(cfg, named[1..].to_vec()).is_err());
    }
}
