//! Recording computation graph with reverse-mode differentiation.
//!
//! Every op appends one node; node ids are assigned in creation order, so
//! the node list is already a topological order of the computation and a
//! single reverse sweep visits each node exactly once during backward.

use super::linalg::{gemm, Mat};
use super::tensor::Tensor;
use crate::error::{config, contract, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    height: usize,
    width: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn ncols(&self) -> usize {
        self.batch * self.oh * self.ow
    }
}

/// Per-axis interpolation plan for align-corners bilinear resampling.
#[derive(Clone, Debug)]
struct AxisPlan {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisPlan {
    fn new(src: usize, dst: usize) -> Self {
        let mut plan = AxisPlan {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            frac: Vec::with_capacity(dst),
        };
        for i in 0..dst {
            let pos = if dst > 1 {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            } else {
                0.0
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            plan.lo.push(lo);
            plan.hi.push(hi);
            plan.frac.push(pos - lo as f64);
        }
        plan
    }
}

#[derive(Clone, Debug)]
struct UpsamplePlan {
    src: (usize, usize),
    dst: (usize, usize),
    rows: AxisPlan,
    cols: AxisPlan,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        batch: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Relu(Var),
    Abs(Var),
    ChannelMean {
        input: Var,
        channels: usize,
        plane: usize,
    },
    SpatialSoftmax {
        input: Var,
        temperature: f64,
        plane: usize,
    },
    Upsample {
        input: Var,
        plan: UpsamplePlan,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MaskedSquaredError {
        pred: Var,
        target: Vec<f64>,
        valid: Vec<bool>,
        count: usize,
        plane: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::ChannelMean { .. } => "channel_mean",
            Op::SpatialSoftmax { .. } => "spatial_softmax",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MaskedSquaredError { .. } => "masked_squared_error",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => [Some(*input), Some(*kernel), *bias].into_iter().flatten().collect(),
            Op::Linear {
                input, weight, bias, ..
            } => [Some(*input), Some(*weight), *bias].into_iter().flatten().collect(),
            Op::Relu(x) | Op::Abs(x) | Op::Scale(x, _) | Op::Sum(x) | Op::Reshape(x) => vec![*x],
            Op::ChannelMean { input, .. } | Op::SpatialSoftmax { input, .. } | Op::Upsample { input, .. } => {
                vec![*input]
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::MaskedSquaredError { pred, .. } => vec![*pred],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One recorded operation, as exposed for inspection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapeEntry {
    pub output: Var,
    pub inputs: Vec<Var>,
    pub op: &'static str,
}

/// The computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every differentiable leaf.
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a parameter leaf. Leaves not reachable from the loss get zeros.
    /// Returns `None` for non-leaf nodes and constants.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn entries(&self) -> Vec<TapeEntry> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| TapeEntry {
                output: Var(i),
                inputs: n.op.inputs(),
                op: n.op.name(),
            })
            .collect()
    }

    pub fn count_op(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (an input).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// 2-D cross-correlation. `input` is `[cin, h, w]` or `[n, cin, h, w]`,
    /// `kernel` is `[cout, cin, kh, kw]`, `bias` (optional) is `[cout]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let k_shape = self.shape(kernel).to_vec();
        let (batch, batched) = match in_shape.len() {
            3 => (1, false),
            4 => (in_shape[0], true),
            r => return config(format!("conv2d input must be rank 3 or 4, got rank {r}")),
        };
        let [cin, height, width] = in_shape[in_shape.len() - 3..] else {
            unreachable!()
        };
        let &[cout, kcin, kh, kw] = k_shape.as_slice() else {
            return config(format!("conv2d kernel must be [cout,cin,kh,kw], got {k_shape:?}"));
        };
        if kcin != cin {
            return config(format!(
                "conv2d channel mismatch: input has {cin} channels, kernel expects {kcin}"
            ));
        }
        if stride == 0 {
            return config("conv2d stride must be >= 1");
        }
        if kh > height + 2 * padding || kw > width + 2 * padding {
            return config(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                height + 2 * padding,
                width + 2 * padding
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return config(format!(
                    "conv2d bias shape {:?} does not match {cout} output channels",
                    self.shape(b)
                ));
            }
        }
        let geom = ConvGeom {
            batch,
            cin,
            height,
            width,
            cout,
            kh,
            kw,
            stride,
            padding,
            oh: (height + 2 * padding - kh) / stride + 1,
            ow: (width + 2 * padding - kw) / stride + 1,
        };
        let cols = im2col(self.data(input), &geom);
        let ncols = geom.ncols();
        let mut out_mat = vec![0.0; cout * ncols];
        gemm(
            Mat::new(self.data(kernel), cout, geom.patch_len()),
            Mat::new(&cols, geom.patch_len(), ncols),
            &mut out_mat,
            0.0,
        );
        let plane = geom.oh * geom.ow;
        let mut out = vec![0.0; batch * cout * plane];
        let bias_vals = bias.map(|b| self.data(b).to_vec());
        for b in 0..batch {
            for co in 0..cout {
                let shift = bias_vals.as_ref().map_or(0.0, |bv| bv[co]);
                let src = &out_mat[co * ncols + b * plane..co * ncols + (b + 1) * plane];
                let dst = &mut out[(b * cout + co) * plane..(b * cout + co + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + shift;
                }
            }
        }
        let shape = if batched {
            vec![batch, cout, geom.oh, geom.ow]
        } else {
            vec![cout, geom.oh, geom.ow]
        };
        self.push(
            shape,
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
        )
    }

    /// Affine map `x·Wᵀ + b`. `input` is `[in]` or `[n, in]`, `weight` is `[out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let w_shape = self.shape(weight).to_vec();
        let (batch, fan_in_x) = match in_shape.as_slice() {
            &[f] => (1, f),
            &[n, f] => (n, f),
            s => return config(format!("linear input must be rank 1 or 2, got {s:?}")),
        };
        let &[fan_out, fan_in] = w_shape.as_slice() else {
            return config(format!("linear weight must be [out,in], got {w_shape:?}"));
        };
        if fan_in != fan_in_x {
            return config(format!(
                "linear input has {fan_in_x} features but weight expects {fan_in}"
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [fan_out] {
                return config(format!("linear bias shape {:?} != [{fan_out}]", self.shape(b)));
            }
        }
        let mut out = vec![0.0; batch * fan_out];
        if let Some(b) = bias {
            let bv = self.data(b);
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            Mat::new(self.data(input), batch, fan_in),
            Mat::new(self.data(weight), fan_out, fan_in).t(),
            &mut out,
            if bias.is_some() { 1.0 } else { 0.0 },
        );
        let shape = if in_shape.len() == 1 {
            vec![fan_out]
        } else {
            vec![batch, fan_out]
        };
        self.push(
            shape,
            out,
            Op::Linear {
                input,
                weight,
                bias,
                batch,
                fan_in,
                fan_out,
            },
        )
    }

    /// Rectified linear unit; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x))
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v.abs()).collect();
        self.push(self.shape(x).to_vec(), out, Op::Abs(x))
    }

    /// Mean over the channel axis: `[c,h,w] -> [h,w]`, `[n,c,h,w] -> [n,h,w]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, channels, out_shape) = match shape.as_slice() {
            &[c, h, w] => (1, c, vec![h, w]),
            &[n, c, h, w] => (n, c, vec![n, h, w]),
            s => return config(format!("channel_mean expects rank 3 or 4, got {s:?}")),
        };
        let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
        let src = self.data(x);
        let mut out = vec![0.0; batch * plane];
        let inv = 1.0 / channels as f64;
        for b in 0..batch {
            let dst = &mut out[b * plane..(b + 1) * plane];
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                for (d, s) in dst.iter_mut().zip(&src[off..off + plane]) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        self.push(
            out_shape,
            out,
            Op::ChannelMean {
                input: x,
                channels,
                plane,
            },
        )
    }

    /// Softmax over the last two axes (each spatial map sums to 1), after
    /// dividing by `temperature`.
    pub fn spatial_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return config(format!("softmax temperature must be positive, got {temperature}"));
        }
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return config(format!("spatial_softmax expects rank >= 2, got {shape:?}"));
        }
        let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
        let mut out = self.data(x).to_vec();
        for map in out.chunks_mut(plane) {
            softmax_in_place(map, temperature);
        }
        self.push(
            shape,
            out,
            Op::SpatialSoftmax {
                input: x,
                temperature,
                plane,
            },
        )
    }

    /// Align-corners bilinear resampling of the last two axes to `target`.
    pub fn bilinear_upsample(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return config(format!("bilinear_upsample expects rank >= 2, got {shape:?}"));
        }
        let src = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if target.0 < src.0 || target.1 < src.1 {
            return contract(format!(
                "bilinear_upsample cannot downscale {}x{} to {}x{}",
                src.0, src.1, target.0, target.1
            ));
        }
        let plan = UpsamplePlan {
            src,
            dst: target,
            rows: AxisPlan::new(src.0, target.0),
            cols: AxisPlan::new(src.1, target.1),
        };
        let out = upsample_forward(self.data(x), &plan);
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([target.0, target.1]);
        self.push(out_shape, out, Op::Upsample { input: x, plan })
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (batch, classes) = match shape.as_slice() {
            &[k] => (1, k),
            &[n, k] => (n, k),
            s => return config(format!("cross_entropy logits must be rank 1 or 2, got {s:?}")),
        };
        if labels.len() != batch {
            return contract(format!("{} labels for a batch of {batch}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return contract(format!("label {bad} out of range for {classes} classes"));
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0;
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
            softmax_in_place(row, 1.0);
        }
        self.push(
            vec![1],
            vec![total / batch as f64],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// `(1/N') Σ_valid ‖pred_i − target_i‖²_F / M` over the rows flagged valid,
    /// where `M` is the size of one spatial map. Zero when no row is valid.
    pub fn masked_squared_error(&mut self, pred: Var, target: &Tensor, valid: &[bool]) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        if shape != target.shape() {
            return contract(format!(
                "prediction shape {shape:?} does not match target shape {:?}",
                target.shape()
            ));
        }
        let (batch, plane) = match shape.as_slice() {
            &[h, w] => (1, h * w),
            &[n, h, w] => (n, h * w),
            s => return config(format!("masked_squared_error expects rank 2 or 3, got {s:?}")),
        };
        if valid.len() != batch {
            return contract(format!("{} validity flags for a batch of {batch}", valid.len()));
        }
        let count = valid.iter().filter(|&&v| v).count();
        let p = self.data(pred);
        let mut total = 0.0;
        for (b, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
            let r = b * plane..(b + 1) * plane;
            let sq: f64 = p[r.clone()]
                .iter()
                .zip(&target.data()[r])
                .map(|(a, g)| (a - g) * (a - g))
                .sum();
            total += sq / plane as f64;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            vec![1],
            vec![loss],
            Op::MaskedSquaredError {
                pred,
                target: target.data().to_vec(),
                valid: valid.to_vec(),
                count,
                plane,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return contract(format!(
                "{} operands differ in shape: {:?} vs {:?}",
                op.name(),
                self.shape(a),
                self.shape(b)
            ));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(self.shape(a).to_vec(), out, op)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.contains(&0) || shape.iter().product::<usize>() != self.value(x).numel() {
            return contract(format!("cannot reshape {:?} into {shape:?}", self.shape(x)));
        }
        let out = self.data(x).to_vec();
        self.push(shape, out, Op::Reshape(x))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        let leaves = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match n.op {
                Op::Leaf if n.requires_grad => Some(Tensor::from_parts(
                    n.value.shape().to_vec(),
                    g.unwrap_or_else(|| vec![0.0; n.value.numel()]),
                )),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let ncols = geom.ncols();
                let plane = geom.oh * geom.ow;
                let mut dmat = vec![0.0; geom.cout * ncols];
                for b in 0..geom.batch {
                    for co in 0..geom.cout {
                        let src = &g[(b * geom.cout + co) * plane..][..plane];
                        dmat[co * ncols + b * plane..][..plane].copy_from_slice(src);
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for (co, d) in db.iter_mut().enumerate() {
                        *d += dmat[co * ncols..(co + 1) * ncols].iter().sum::<f64>();
                    }
                }
                if let Some(dk) = self.slot(grads, Some(*kernel)) {
                    gemm(
                        Mat::new(&dmat, geom.cout, ncols),
                        Mat::new(cols, geom.patch_len(), ncols).t(),
                        dk,
                        1.0,
                    );
                }
                if self.nodes[input.0].requires_grad {
                    let mut dcols = vec![0.0; geom.patch_len() * ncols];
                    gemm(
                        Mat::new(self.data(*kernel), geom.cout, geom.patch_len()).t(),
                        Mat::new(&dmat, geom.cout, ncols),
                        &mut dcols,
                        0.0,
                    );
                    let dx = self.slot(grads, Some(*input)).expect("requires grad");
                    col2im_add(&dcols, geom, dx);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
                batch,
                fan_in,
                fan_out,
            } => {
                if let Some(db) = self.slot(grads, *bias) {
                    for row in g.chunks(*fan_out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                if let Some(dw) = self.slot(grads, Some(*weight)) {
                    gemm(
                        Mat::new(g, *batch, *fan_out).t(),
                        Mat::new(self.data(*input), *batch, *fan_in),
                        dw,
                        1.0,
                    );
                }
                if let Some(dx) = self.slot(grads, Some(*input)) {
                    gemm(
                        Mat::new(g, *batch, *fan_out),
                        Mat::new(self.data(*weight), *fan_out, *fan_in),
                        dx,
                        1.0,
                    );
                }
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                if let Some(dx) = self.slot(grads, Some(*x)) {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Abs(x) => {
                let xv = self.data(*x);
                if let Some(dx) = self.slot(grads, Some(*x)) {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += gv;
                        } else if v < 0.0 {
                            *d -= gv;
                        }
                    }
                }
            }
            Op::ChannelMean { input, channels, plane } => {
                let inv = 1.0 / *channels as f64;
                if let Some(dx) = self.slot(grads, Some(*input)) {
                    for (b, gmap) in g.chunks(*plane).enumerate() {
                        for c in 0..*channels {
                            let off = (b * channels + c) * plane;
                            for (d, gv) in dx[off..off + plane].iter_mut().zip(gmap) {
                                *d += gv * inv;
                            }
                        }
                    }
                }
            }
            Op::SpatialSoftmax {
                input,
                temperature,
                plane,
            } => {
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, Some(*input)) {
                    for ((dmap, gmap), ymap) in dx.chunks_mut(*plane).zip(g.chunks(*plane)).zip(y.chunks(*plane)) {
                        let dot: f64 = gmap.iter().zip(ymap).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dmap.iter_mut().zip(gmap).zip(ymap) {
                            *d += yv * (gv - dot) / temperature;
                        }
                    }
                }
            }
            Op::Upsample { input, plan } => {
                if let Some(dx) = self.slot(grads, Some(*input)) {
                    upsample_backward_add(g, plan, dx);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / batch as f64;
                if let Some(dx) = self.slot(grads, Some(*logits)) {
                    for (b, &label) in labels.iter().enumerate() {
                        for k in 0..classes {
                            let onehot = if k == label { 1.0 } else { 0.0 };
                            dx[b * classes + k] += scale * (probs[b * classes + k] - onehot);
                        }
                    }
                }
            }
            Op::MaskedSquaredError {
                pred,
                target,
                valid,
                count,
                plane,
            } => {
                if *count == 0 {
                    return;
                }
                let p = self.data(*pred);
                let scale = g[0] * 2.0 / (*plane as f64 * *count as f64);
                if let Some(dx) = self.slot(grads, Some(*pred)) {
                    for (b, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
                        for i in b * plane..(b + 1) * plane {
                            dx[i] += scale * (p[i] - target[i]);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, Some(v)) {
                        d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let ov = self.data(other);
                    if let Some(d) = self.slot(grads, Some(v)) {
                        for ((d, gv), o) in d.iter_mut().zip(g).zip(ov) {
                            *d += gv * o;
                        }
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(d) = self.slot(grads, Some(*x)) {
                    d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * factor);
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.slot(grads, Some(*x)) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.slot(grads, Some(*x)) {
                    d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Option<Var>) -> Option<&'g mut [f64]> {
        let v = v?;
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; node.value.numel()])
                .as_mut_slice(),
        )
    }
}

pub(crate) fn softmax_in_place(map: &mut [f64], temperature: f64) {
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in map.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    map.iter_mut().for_each(|v| *v /= total);
}

fn im2col(input: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let ncols = geom.ncols();
    let plane = geom.oh * geom.ow;
    let mut cols = vec![0.0; geom.patch_len() * ncols];
    for ci in 0..geom.cin {
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let r = (ci * geom.kh + ki) * geom.kw + kj;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for b in 0..geom.batch {
                    let src = &input[(b * geom.cin + ci) * geom.height * geom.width..];
                    for oy in 0..geom.oh {
                        let iy = (oy * geom.stride + ki) as isize - geom.padding as isize;
                        if iy < 0 || iy >= geom.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * geom.width..][..geom.width];
                        let dst = &mut row[b * plane + oy * geom.ow..][..geom.ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * geom.stride + kj) as isize - geom.padding as isize;
                            if ix >= 0 && ix < geom.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    let ncols = geom.ncols();
    let plane = geom.oh * geom.ow;
    for ci in 0..geom.cin {
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let r = (ci * geom.kh + ki) * geom.kw + kj;
                let row = &dcols[r * ncols..(r + 1) * ncols];
                for b in 0..geom.batch {
                    let base = (b * geom.cin + ci) * geom.height * geom.width;
                    for oy in 0..geom.oh {
                        let iy = (oy * geom.stride + ki) as isize - geom.padding as isize;
                        if iy < 0 || iy >= geom.height as isize {
                            continue;
                        }
                        let src = &row[b * plane + oy * geom.ow..][..geom.ow];
                        for (ox, v) in src.iter().enumerate() {
                            let ix = (ox * geom.stride + kj) as isize - geom.padding as isize;
                            if ix >= 0 && ix < geom.width as isize {
                                dx[base + iy as usize * geom.width + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn upsample_forward(src: &[f64], plan: &UpsamplePlan) -> Vec<f64> {
    let (sh, sw) = plan.src;
    let (dh, dw) = plan.dst;
    let maps = src.len() / (sh * sw);
    let mut out = vec![0.0; maps * dh * dw];
    for m in 0..maps {
        let s = &src[m * sh * sw..(m + 1) * sh * sw];
        let d = &mut out[m * dh * dw..(m + 1) * dh * dw];
        for i in 0..dh {
            let (r0, r1, fy) = (plan.rows.lo[i], plan.rows.hi[i], plan.rows.frac[i]);
            for j in 0..dw {
                let (c0, c1, fx) = (plan.cols.lo[j], plan.cols.hi[j], plan.cols.frac[j]);
                let top = (1.0 - fx) * s[r0 * sw + c0] + fx * s[r0 * sw + c1];
                let bottom = (1.0 - fx) * s[r1 * sw + c0] + fx * s[r1 * sw + c1];
                d[i * dw + j] = (1.0 - fy) * top + fy * bottom;
            }
        }
    }
    out
}

fn upsample_backward_add(g: &[f64], plan: &UpsamplePlan, dx: &mut [f64]) {
    let (sh, sw) = plan.src;
    let (dh, dw) = plan.dst;
    for (gm, dm) in g.chunks(dh * dw).zip(dx.chunks_mut(sh * sw)) {
        for i in 0..dh {
            let (r0, r1, fy) = (plan.rows.lo[i], plan.rows.hi[i], plan.rows.frac[i]);
            for j in 0..dw {
                let (c0, c1, fx) = (plan.cols.lo[j], plan.cols.hi[j], plan.cols.frac[j]);
                let gv = gm[i * dw + j];
                dm[r0 * sw + c0] += gv * (1.0 - fy) * (1.0 - fx);
                dm[r0 * sw + c1] += gv * (1.0 - fy) * fx;
                dm[r1 * sw + c0] += gv * fy * (1.0 - fx);
                dm[r1 * sw + c1] += gv * fy * fx;
            }
        }
    }
}

/// Non-recording align-corners bilinear resampling of a single `h×w` map.
pub fn upsample_map(src: &[f64], src_dims: (usize, usize), dst_dims: (usize, usize)) -> Vec<f64> {
    let plan = UpsamplePlan {
        src: src_dims,
        dst: dst_dims,
        rows: AxisPlan::new(src_dims.0, dst_dims.0),
        cols: AxisPlan::new(src_dims.1, dst_dims.1),
    };
    upsample_forward(src, &plan)
}
