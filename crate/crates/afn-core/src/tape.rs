//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every operation appends one record holding its output value, its input
//! ids and whatever the backward rule needs (max-pool argmax indices, batch
//! statistics, ...). Records are in topological order by construction: an
//! input id always precedes the record that consumes it. `backward` walks
//! the tape once in reverse and accumulates gradients for every
//! `requires_grad` leaf.
//!
//! Summation order inside every operator is fixed row-major, so forward and
//! backward are bitwise reproducible for identical inputs.

use crate::error::{AfnError, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Element-wise nonlinearities. ELU uses alpha = 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Elu,
    Sigmoid,
    Tanh,
}

pub const ELU_ALPHA: f64 = 1.0;

/// Axis for slice-wise softmax on an (N, C, F, T) tensor: `Frequency`
/// normalizes each (n, c, ·, t) column, `Time` each (n, c, f, ·) row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxAxis {
    Frequency,
    Time,
}

/// Batch-normalization epsilon; floors zero-variance channels.
pub const BN_EPS: f64 = 1e-5;
/// Momentum for the running-statistics update in train mode.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running mean and (biased) variance for batch normalization.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn fresh(channels: usize) -> Self {
        BnStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    /// running <- (1 - momentum) * running + momentum * batch
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

enum Op {
    Leaf,
    Conv2d { input: TensorId, kernel: TensorId, dilation: usize, padding: usize, stride: usize },
    BiasAdd { input: TensorId, bias: TensorId },
    MaxPool2d { input: TensorId, argmax: Vec<usize> },
    AvgPool2d { input: TensorId, window: usize, stride: usize },
    BilinearUpsample { input: TensorId },
    Activation { input: TensorId, kind: Activation },
    AxisSoftmax { input: TensorId, axis: SoftmaxAxis },
    BatchNorm { input: TensorId, gamma: TensorId, beta: TensorId, train: bool, inv_std: Vec<f64>, xhat: Vec<f64> },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    ConcatChannels { a: TensorId, b: TensorId },
    GlobalMeanPool { input: TensorId },
    Linear { input: TensorId, weight: TensorId, bias: TensorId },
    BceWithLogits { logits: TensorId, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by tensor id.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// The operation tape. Single-owner while a graph is being built.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.nodes[id.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> TensorId {
        debug_assert!(value.data.iter().all(|v| v.is_finite()), "non-finite op output");
        self.nodes.push(Node { value, op, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Registers a tensor as a graph input. Its `requires_grad` flag decides
    /// whether `backward` reports a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    /// 2-d convolution per the dilated-convolution sum: each output element
    /// is sum_{i,u,v} input[n, i, y*s - p + d*u, x*s - p + d*v] * kernel[o, i, u, v]
    /// with zeros outside the input bounds. Kernel layout is
    /// (C_out, C_in, k, k).
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        dilation: usize,
        padding: usize,
        stride: usize,
    ) -> Result<TensorId> {
        if dilation == 0 || stride == 0 {
            return Err(AfnError::InvalidArgument("conv2d: dilation and stride must be positive".into()));
        }
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[kernel.0].value;
        if w.shape.f != w.shape.t {
            return Err(AfnError::ShapeMismatch(format!("conv2d: kernel must be square, got {}", w.shape)));
        }
        if x.shape.c != w.shape.c {
            return Err(AfnError::ShapeMismatch(format!(
                "conv2d: input channels {} != kernel input channels {}",
                x.shape.c, w.shape.c
            )));
        }
        let k = w.shape.f;
        let of = conv_out_len(x.shape.f, k, dilation, padding, stride)?;
        let ot = conv_out_len(x.shape.t, k, dilation, padding, stride)?;
        let out_shape = Shape::new(x.shape.n, w.shape.n, of, ot);
        let mut out = vec![0.0; out_shape.numel()];
        conv2d_forward(x, w, dilation, padding, stride, of, ot, &mut out);
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            Tensor { shape: out_shape, data: out, requires_grad: false },
            Op::Conv2d { input, kernel, dilation, padding, stride },
            needs,
        ))
    }

    /// Adds a per-channel bias shaped (1, C, 1, 1), broadcast over batch and
    /// both spatial axes.
    pub fn bias_add(&mut self, input: TensorId, bias: TensorId) -> Result<TensorId> {
        let x = &self.nodes[input.0].value;
        let b = &self.nodes[bias.0].value;
        if b.shape.n != 1 || b.shape.f != 1 || b.shape.t != 1 || b.shape.c != x.shape.c {
            return Err(AfnError::ShapeMismatch(format!(
                "bias_add: bias {} incompatible with input {}",
                b.shape, x.shape
            )));
        }
        let sh = x.shape;
        let hw = sh.f * sh.t;
        let mut out = Vec::with_capacity(sh.numel());
        for n in 0..sh.n {
            for c in 0..sh.c {
                let base = (n * sh.c + c) * hw;
                let bv = b.data[c];
                out.extend(x.data[base..base + hw].iter().map(|v| v + bv));
            }
        }
        let needs = self.needs(input) || self.needs(bias);
        Ok(self.push(Tensor { shape: sh, data: out, requires_grad: false }, Op::BiasAdd { input, bias }, needs))
    }

    /// Max pooling. Backward routes each output gradient to the first
    /// maximum of its window in row-major scan order.
    pub fn maxpool2d(&mut self, input: TensorId, window: usize, stride: usize) -> Result<TensorId> {
        let x = &self.nodes[input.0].value;
        let sh = x.shape;
        if window == 0 || stride == 0 {
            return Err(AfnError::InvalidArgument("maxpool2d: window and stride must be positive".into()));
        }
        if sh.f < window || sh.t < window {
            return Err(AfnError::InvalidArgument(format!(
                "maxpool2d: window {} larger than input {}x{}",
                window, sh.f, sh.t
            )));
        }
        let of = (sh.f - window) / stride + 1;
        let ot = (sh.t - window) / stride + 1;
        let out_shape = Shape::new(sh.n, sh.c, of, ot);
        let mut out = Vec::with_capacity(out_shape.numel());
        let mut argmax = Vec::with_capacity(out_shape.numel());
        for n in 0..sh.n {
            for c in 0..sh.c {
                for oy in 0..of {
                    for ox in 0..ot {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for wy in 0..window {
                            let fy = oy * stride + wy;
                            let row = sh.idx(n, c, fy, 0);
                            for wx in 0..window {
                                let idx = row + ox * stride + wx;
                                let v = x.data[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            Tensor { shape: out_shape, data: out, requires_grad: false },
            Op::MaxPool2d { input, argmax },
            needs,
        ))
    }

    /// Average pooling. Used by the receptive-field probe, where max-pool's
    /// single-element subgradient would under-report connectivity.
    pub fn avgpool2d(&mut self, input: TensorId, window: usize, stride: usize) -> Result<TensorId> {
        let x = &self.nodes[input.0].value;
        let sh = x.shape;
        if window == 0 || stride == 0 {
            return Err(AfnError::InvalidArgument("avgpool2d: window and stride must be positive".into()));
        }
        if sh.f < window || sh.t < window {
            return Err(AfnError::InvalidArgument(format!(
                "avgpool2d: window {} larger than input {}x{}",
                window, sh.f, sh.t
            )));
        }
        let of = (sh.f - window) / stride + 1;
        let ot = (sh.t - window) / stride + 1;
        let out_shape = Shape::new(sh.n, sh.c, of, ot);
        let inv = 1.0 / (window * window) as f64;
        let mut out = Vec::with_capacity(out_shape.numel());
        for n in 0..sh.n {
            for c in 0..sh.c {
                for oy in 0..of {
                    for ox in 0..ot {
                        let mut acc = 0.0;
                        for wy in 0..window {
                            let row = sh.idx(n, c, oy * stride + wy, 0);
                            for wx in 0..window {
                                acc += x.data[row + ox * stride + wx];
                            }
                        }
                        out.push(acc * inv);
                    }
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            Tensor { shape: out_shape, data: out, requires_grad: false },
            Op::AvgPool2d { input, window, stride },
            needs,
        ))
    }

    /// Align-corners bilinear upsampling: corner pixels are preserved
    /// exactly. Output dims must be >= input dims.
    pub fn bilinear_upsample(&mut self, input: TensorId, out_f: usize, out_t: usize) -> Result<TensorId> {
        let x = &self.nodes[input.0].value;
        let sh = x.shape;
        if out_f < sh.f || out_t < sh.t {
            return Err(AfnError::InvalidArgument(format!(
                "bilinear_upsample: downsampling {}x{} -> {}x{} not supported",
                sh.f, sh.t, out_f, out_t
            )));
        }
        let out_shape = Shape::new(sh.n, sh.c, out_f, out_t);
        let mut out = Vec::with_capacity(out_shape.numel());
        for n in 0..sh.n {
            for c in 0..sh.c {
                for oy in 0..out_f {
                    let (y0, y1, wy) = interp_coord(oy, out_f, sh.f);
                    for ox in 0..out_t {
                        let (x0, x1, wx) = interp_coord(ox, out_t, sh.t);
                        let a = x.data[sh.idx(n, c, y0, x0)];
                        let b = x.data[sh.idx(n, c, y0, x1)];
                        let d = x.data[sh.idx(n, c, y1, x0)];
                        let e = x.data[sh.idx(n, c, y1, x1)];
                        let top = a + wx * (b - a);
                        let bot = d + wx * (e - d);
                        out.push(top + wy * (bot - top));
                    }
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            Tensor { shape: out_shape, data: out, requires_grad: false },
            Op::BilinearUpsample { input },
            needs,
        ))
    }

    /// Element-wise nonlinearity.
    pub fn activation(&mut self, input: TensorId, kind: Activation) -> TensorId {
        let x = &self.nodes[input.0].value;
        let data: Vec<f64> = x.data.iter().map(|&v| apply_activation(v, kind)).collect();
        let sh = x.shape;
        let needs = self.needs(input);
        self.push(Tensor { shape: sh, data, requires_grad: false }, Op::Activation { input, kind }, needs)
    }

    /// Softmax along the frequency or time axis, with max subtraction for
    /// stability. Every slice along the chosen axis sums to 1.
    pub fn axis_softmax(&mut self, input: TensorId, axis: SoftmaxAxis) -> TensorId {
        let x = &self.nodes[input.0].value;
        let sh = x.shape;
        let mut out = vec![0.0; sh.numel()];
        for_each_axis_slice(sh, axis, |slice_idx| {
            let mut max = f64::NEG_INFINITY;
            for &i in slice_idx.iter() {
                max = max.max(x.data[i]);
            }
            let mut sum = 0.0;
            for &i in slice_idx.iter() {
                let e = (x.data[i] - max).exp();
                out[i] = e;
                sum += e;
            }
            for &i in slice_idx.iter() {
                out[i] /= sum;
            }
        });
        let needs = self.needs(input);
        self.push(Tensor { shape: sh, data: out, requires_grad: false }, Op::AxisSoftmax { input, axis }, needs)
    }

    /// Batch normalization dispatching on mode; train mode also updates the
    /// running statistics with momentum [`BN_MOMENTUM`].
    pub fn batchnorm2d(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: &mut BnStats,
        mode: BnMode,
    ) -> Result<TensorId> {
        match mode {
            BnMode::Train => {
                let (id, mean, var) = self.batchnorm2d_train(input, gamma, beta)?;
                stats.update(&mean, &var);
                Ok(id)
            }
            BnMode::Eval => self.batchnorm2d_eval(input, gamma, beta, &stats.mean, &stats.var),
        }
    }

    /// Train-mode batch norm: normalizes with per-channel batch statistics
    /// (biased variance) and returns them so the caller can fold them into
    /// its running buffers.
    pub fn batchnorm2d_train(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<(TensorId, Vec<f64>, Vec<f64>)> {
        let sh = self.nodes[input.0].value.shape;
        self.check_bn_params(sh, gamma, beta)?;
        let x = &self.nodes[input.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let m = (sh.n * sh.f * sh.t) as f64;
        let hw = sh.f * sh.t;
        let mut mean = vec![0.0; sh.c];
        let mut var = vec![0.0; sh.c];
        for c in 0..sh.c {
            let mut acc = 0.0;
            for n in 0..sh.n {
                let base = (n * sh.c + c) * hw;
                for v in &x.data[base..base + hw] {
                    acc += v;
                }
            }
            mean[c] = acc / m;
            let mut vacc = 0.0;
            for n in 0..sh.n {
                let base = (n * sh.c + c) * hw;
                for v in &x.data[base..base + hw] {
                    let d = v - mean[c];
                    vacc += d * d;
                }
            }
            var[c] = vacc / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; sh.numel()];
        let mut out = vec![0.0; sh.numel()];
        for n in 0..sh.n {
            for c in 0..sh.c {
                let base = (n * sh.c + c) * hw;
                for i in base..base + hw {
                    let h = (x.data[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g.data[c] * h + b.data[c];
                }
            }
        }
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            Tensor { shape: sh, data: out, requires_grad: false },
            Op::BatchNorm { input, gamma, beta, train: true, inv_std, xhat },
            needs,
        );
        Ok((id, mean, var))
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        run_mean: &[f64],
        run_var: &[f64],
    ) -> Result<TensorId> {
        let sh = self.nodes[input.0].value.shape;
        self.check_bn_params(sh, gamma, beta)?;
        if run_mean.len() != sh.c || run_var.len() != sh.c {
            return Err(AfnError::ShapeMismatch(format!(
                "batchnorm2d: running stats length {}/{} != channels {}",
                run_mean.len(),
                run_var.len(),
                sh.c
            )));
        }
        let x = &self.nodes[input.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let hw = sh.f * sh.t;
        let inv_std: Vec<f64> = run_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; sh.numel()];
        let mut out = vec![0.0; sh.numel()];
        for n in 0..sh.n {
            for c in 0..sh.c {
                let base = (n * sh.c + c) * hw;
                for i in base..base + hw {
                    let h = (x.data[i] - run_mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g.data[c] * h + b.data[c];
                }
            }
        }
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor { shape: sh, data: out, requires_grad: false },
            Op::BatchNorm { input, gamma, beta, train: false, inv_std, xhat },
            needs,
        ))
    }

    fn check_bn_params(&self, sh: Shape, gamma: TensorId, beta: TensorId) -> Result<()> {
        for id in [gamma, beta] {
            let p = self.nodes[id.0].value.shape;
            if p.n != 1 || p.f != 1 || p.t != 1 || p.c != sh.c {
                return Err(AfnError::ShapeMismatch(format!(
                    "batchnorm2d: parameter shape {} incompatible with input {}",
                    p, sh
                )));
            }
        }
        Ok(())
    }

    /// Element-wise addition of same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AfnError::ShapeMismatch(format!("add: {} vs {}", sa, sb)));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape: sa, data, requires_grad: false }, Op::Add { a, b }, needs))
    }

    /// Element-wise multiplication of same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AfnError::ShapeMismatch(format!("mul: {} vs {}", sa, sb)));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape: sa, data, requires_grad: false }, Op::Mul { a, b }, needs))
    }

    /// Concatenates along the channel axis; batch and spatial dims must match.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.f != sb.f || sa.t != sb.t {
            return Err(AfnError::ShapeMismatch(format!("concat_channels: {} vs {}", sa, sb)));
        }
        let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.f, sa.t);
        let hw = sa.f * sa.t;
        let mut out = Vec::with_capacity(out_shape.numel());
        for n in 0..sa.n {
            let abase = n * sa.c * hw;
            out.extend_from_slice(&self.nodes[a.0].value.data[abase..abase + sa.c * hw]);
            let bbase = n * sb.c * hw;
            out.extend_from_slice(&self.nodes[b.0].value.data[bbase..bbase + sb.c * hw]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor { shape: out_shape, data: out, requires_grad: false },
            Op::ConcatChannels { a, b },
            needs,
        ))
    }

    /// Mean over both spatial axes: (N, C, F, T) -> (N, C, 1, 1).
    pub fn global_mean_pool(&mut self, input: TensorId) -> TensorId {
        let x = &self.nodes[input.0].value;
        let sh = x.shape;
        let hw = sh.f * sh.t;
        let inv = 1.0 / hw as f64;
        let mut out = Vec::with_capacity(sh.n * sh.c);
        for n in 0..sh.n {
            for c in 0..sh.c {
                let base = (n * sh.c + c) * hw;
                let mut acc = 0.0;
                for v in &x.data[base..base + hw] {
                    acc += v;
                }
                out.push(acc * inv);
            }
        }
        let needs = self.needs(input);
        self.push(
            Tensor { shape: Shape::new(sh.n, sh.c, 1, 1), data: out, requires_grad: false },
            Op::GlobalMeanPool { input },
            needs,
        )
    }

    /// Fully-connected layer over the flattened non-batch dims. Weight is
    /// (OUT, IN, 1, 1) with IN = C*F*T of the input, bias is (1, OUT, 1, 1);
    /// output is (N, OUT, 1, 1).
    pub fn linear(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        let in_dim = x.shape.c * x.shape.f * x.shape.t;
        if w.shape.f != 1 || w.shape.t != 1 || w.shape.c != in_dim {
            return Err(AfnError::ShapeMismatch(format!(
                "linear: weight {} incompatible with flattened input dim {}",
                w.shape, in_dim
            )));
        }
        let out_dim = w.shape.n;
        if b.shape != Shape::new(1, out_dim, 1, 1) {
            return Err(AfnError::ShapeMismatch(format!("linear: bias {} != (1,{},1,1)", b.shape, out_dim)));
        }
        let mut out = Vec::with_capacity(x.shape.n * out_dim);
        for n in 0..x.shape.n {
            let xrow = &x.data[n * in_dim..(n + 1) * in_dim];
            for o in 0..out_dim {
                let wrow = &w.data[o * in_dim..(o + 1) * in_dim];
                let mut acc = b.data[o];
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc += xv * wv;
                }
                out.push(acc);
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Tensor { shape: Shape::new(x.shape.n, out_dim, 1, 1), data: out, requires_grad: false },
            Op::Linear { input, weight, bias },
            needs,
        ))
    }

    /// Mean binary cross-entropy over logits, computed in the stable form
    /// max(z, 0) - z*y + ln(1 + exp(-|z|)). Targets must be 0 (spoof) or
    /// 1 (genuine). Output is scalar.
    pub fn bce_with_logits(&mut self, logits: TensorId, targets: &[f64]) -> Result<TensorId> {
        let z = &self.nodes[logits.0].value;
        if targets.len() != z.numel() {
            return Err(AfnError::ShapeMismatch(format!(
                "bce_with_logits: {} targets for {} logits",
                targets.len(),
                z.numel()
            )));
        }
        if !targets.iter().all(|&y| y == 0.0 || y == 1.0) {
            return Err(AfnError::InvalidArgument("bce_with_logits: labels must be 0 or 1".into()));
        }
        let n = targets.len() as f64;
        let mut acc = 0.0;
        for (&zv, &y) in z.data.iter().zip(targets) {
            acc += zv.max(0.0) - zv * y + (-zv.abs()).exp().ln_1p();
        }
        let loss = acc / n;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor { shape: Shape::new(1, 1, 1, 1), data: vec![loss], requires_grad: false },
            Op::BceWithLogits { logits, targets: targets.to_vec() },
            needs,
        ))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// `requires_grad` leaf (zero-filled if the leaf does not influence the
    /// loss). Deterministic: fixed accumulation order.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(AfnError::InvalidArgument("backward: empty tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(AfnError::InvalidArgument(format!(
                "backward: loss must be scalar, got {}",
                self.nodes[loss.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
            for i in (0..=loss.0).rev() {
                let Some(g) = grads[i].take() else { continue };
                if matches!(self.nodes[i].op, Op::Leaf) {
                    grads[i] = Some(g);
                    continue;
                }
                self.backward_step(i, &g, &mut grads);
            }
        }
        // Leaves the loss never touched still get a (zero) gradient.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let buf = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]);
        f(buf);
    }

    fn backward_step(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out_shape = self.nodes[i].value.shape;
        match &self.nodes[i].op {
            Op::Leaf => unreachable!("handled by caller"),
            Op::Conv2d { input, kernel, dilation, padding, stride } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[kernel.0].value;
                self.accumulate(grads, *input, |gi| {
                    conv2d_backward_input(w, g, out_shape, *dilation, *padding, *stride, x.shape, gi);
                });
                self.accumulate(grads, *kernel, |gw| {
                    conv2d_backward_kernel(x, g, out_shape, *dilation, *padding, *stride, w.shape, gw);
                });
            }
            Op::BiasAdd { input, bias } => {
                self.accumulate(grads, *input, |gi| {
                    for (a, b) in gi.iter_mut().zip(g) {
                        *a += b;
                    }
                });
                let sh = self.nodes[input.0].value.shape;
                let hw = sh.f * sh.t;
                self.accumulate(grads, *bias, |gb| {
                    for n in 0..sh.n {
                        for c in 0..sh.c {
                            let base = (n * sh.c + c) * hw;
                            let mut acc = 0.0;
                            for v in &g[base..base + hw] {
                                acc += v;
                            }
                            gb[c] += acc;
                        }
                    }
                });
            }
            Op::MaxPool2d { input, argmax } => {
                self.accumulate(grads, *input, |gi| {
                    for (j, &src) in argmax.iter().enumerate() {
                        gi[src] += g[j];
                    }
                });
            }
            Op::AvgPool2d { input, window, stride } => {
                let sh = self.nodes[input.0].value.shape;
                let inv = 1.0 / (window * window) as f64;
                self.accumulate(grads, *input, |gi| {
                    let mut j = 0;
                    for n in 0..sh.n {
                        for c in 0..sh.c {
                            for oy in 0..out_shape.f {
                                for ox in 0..out_shape.t {
                                    let gv = g[j] * inv;
                                    j += 1;
                                    for wy in 0..*window {
                                        let row = sh.idx(n, c, oy * stride + wy, 0);
                                        for wx in 0..*window {
                                            gi[row + ox * stride + wx] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::BilinearUpsample { input } => {
                let sh = self.nodes[input.0].value.shape;
                self.accumulate(grads, *input, |gi| {
                    let mut j = 0;
                    for n in 0..sh.n {
                        for c in 0..sh.c {
                            for oy in 0..out_shape.f {
                                let (y0, y1, wy) = interp_coord(oy, out_shape.f, sh.f);
                                for ox in 0..out_shape.t {
                                    let (x0, x1, wx) = interp_coord(ox, out_shape.t, sh.t);
                                    let gv = g[j];
                                    j += 1;
                                    gi[sh.idx(n, c, y0, x0)] += gv * (1.0 - wy) * (1.0 - wx);
                                    gi[sh.idx(n, c, y0, x1)] += gv * (1.0 - wy) * wx;
                                    gi[sh.idx(n, c, y1, x0)] += gv * wy * (1.0 - wx);
                                    gi[sh.idx(n, c, y1, x1)] += gv * wy * wx;
                                }
                            }
                        }
                    }
                });
            }
            Op::Activation { input, kind } => {
                let x = &self.nodes[input.0].value;
                let y = &self.nodes[i].value;
                let kind = *kind;
                self.accumulate(grads, *input, |gi| {
                    for j in 0..gi.len() {
                        gi[j] += g[j] * activation_grad(x.data[j], y.data[j], kind);
                    }
                });
            }
            Op::AxisSoftmax { input, axis } => {
                let y = &self.nodes[i].value;
                let axis = *axis;
                self.accumulate(grads, *input, |gi| {
                    for_each_axis_slice(out_shape, axis, |slice_idx| {
                        let mut dot = 0.0;
                        for &j in slice_idx.iter() {
                            dot += g[j] * y.data[j];
                        }
                        for &j in slice_idx.iter() {
                            gi[j] += y.data[j] * (g[j] - dot);
                        }
                    });
                });
            }
            Op::BatchNorm { input, gamma, beta, train, inv_std, xhat } => {
                let sh = self.nodes[input.0].value.shape;
                let gam = &self.nodes[gamma.0].value;
                let hw = sh.f * sh.t;
                let m = (sh.n * hw) as f64;
                // Per-channel reductions of g and g*xhat are shared by all
                // three gradients; compute them once.
                let mut sum_g = vec![0.0; sh.c];
                let mut sum_gx = vec![0.0; sh.c];
                for n in 0..sh.n {
                    for c in 0..sh.c {
                        let base = (n * sh.c + c) * hw;
                        for j in base..base + hw {
                            sum_g[c] += g[j];
                            sum_gx[c] += g[j] * xhat[j];
                        }
                    }
                }
                self.accumulate(grads, *gamma, |gg| {
                    for c in 0..sh.c {
                        gg[c] += sum_gx[c];
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for c in 0..sh.c {
                        gb[c] += sum_g[c];
                    }
                });
                let train = *train;
                self.accumulate(grads, *input, |gi| {
                    for n in 0..sh.n {
                        for c in 0..sh.c {
                            let base = (n * sh.c + c) * hw;
                            let scale = gam.data[c] * inv_std[c];
                            if train {
                                let mg = sum_g[c] / m;
                                let mgx = sum_gx[c] / m;
                                for j in base..base + hw {
                                    gi[j] += scale * (g[j] - mg - xhat[j] * mgx);
                                }
                            } else {
                                for j in base..base + hw {
                                    gi[j] += scale * g[j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                self.accumulate(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * bv.data[j];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * av.data[j];
                    }
                });
            }
            Op::ConcatChannels { a, b } => {
                let sa = self.nodes[a.0].value.shape;
                let sb = self.nodes[b.0].value.shape;
                let hw = sa.f * sa.t;
                self.accumulate(grads, *a, |ga| {
                    for n in 0..sa.n {
                        let src = n * out_shape.c * hw;
                        let dst = n * sa.c * hw;
                        for j in 0..sa.c * hw {
                            ga[dst + j] += g[src + j];
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for n in 0..sb.n {
                        let src = n * out_shape.c * hw + sa.c * hw;
                        let dst = n * sb.c * hw;
                        for j in 0..sb.c * hw {
                            gb[dst + j] += g[src + j];
                        }
                    }
                });
            }
            Op::GlobalMeanPool { input } => {
                let sh = self.nodes[input.0].value.shape;
                let hw = sh.f * sh.t;
                let inv = 1.0 / hw as f64;
                self.accumulate(grads, *input, |gi| {
                    for n in 0..sh.n {
                        for c in 0..sh.c {
                            let gv = g[n * sh.c + c] * inv;
                            let base = (n * sh.c + c) * hw;
                            for x in &mut gi[base..base + hw] {
                                *x += gv;
                            }
                        }
                    }
                });
            }
            Op::Linear { input, weight, bias } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let in_dim = x.shape.c * x.shape.f * x.shape.t;
                let out_dim = w.shape.n;
                self.accumulate(grads, *input, |gi| {
                    for n in 0..x.shape.n {
                        for o in 0..out_dim {
                            let gv = g[n * out_dim + o];
                            let wrow = &w.data[o * in_dim..(o + 1) * in_dim];
                            let girow = &mut gi[n * in_dim..(n + 1) * in_dim];
                            for (gx, wv) in girow.iter_mut().zip(wrow) {
                                *gx += gv * wv;
                            }
                        }
                    }
                });
                self.accumulate(grads, *weight, |gw| {
                    for n in 0..x.shape.n {
                        let xrow = &x.data[n * in_dim..(n + 1) * in_dim];
                        for o in 0..out_dim {
                            let gv = g[n * out_dim + o];
                            let gwrow = &mut gw[o * in_dim..(o + 1) * in_dim];
                            for (gx, xv) in gwrow.iter_mut().zip(xrow) {
                                *gx += gv * xv;
                            }
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for n in 0..x.shape.n {
                        for o in 0..out_dim {
                            gb[o] += g[n * out_dim + o];
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let z = &self.nodes[logits.0].value;
                let inv_n = 1.0 / targets.len() as f64;
                self.accumulate(grads, *logits, |gz| {
                    for j in 0..gz.len() {
                        let sig = 1.0 / (1.0 + (-z.data[j]).exp());
                        gz[j] += g[0] * (sig - targets[j]) * inv_n;
                    }
                });
            }
        }
    }
}

fn apply_activation(v: f64, kind: Activation) -> f64 {
    match kind {
        Activation::Relu => v.max(0.0),
        Activation::Elu => {
            if v > 0.0 {
                v
            } else {
                ELU_ALPHA * v.exp_m1()
            }
        }
        Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        Activation::Tanh => v.tanh(),
    }
}

fn activation_grad(x: f64, y: f64, kind: Activation) -> f64 {
    match kind {
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Elu => {
            if x > 0.0 {
                1.0
            } else {
                // d/dx alpha*(e^x - 1) = alpha*e^x = y + alpha
                y + ELU_ALPHA
            }
        }
        Activation::Sigmoid => y * (1.0 - y),
        Activation::Tanh => 1.0 - y * y,
    }
}

/// Output length of a 1-d convolution axis; effective kernel extent is
/// d*(k-1) + 1.
pub fn conv_out_len(in_len: usize, k: usize, dilation: usize, padding: usize, stride: usize) -> Result<usize> {
    let extent = dilation * (k - 1) + 1;
    let padded = in_len + 2 * padding;
    if padded < extent {
        return Err(AfnError::InvalidArgument(format!(
            "conv2d: non-positive output size (input {}, kernel extent {}, padding {})",
            in_len, extent, padding
        )));
    }
    Ok((padded - extent) / stride + 1)
}

/// Output rows `y` for which input coordinate y*stride + dilation*tap - padding
/// is in bounds; returned as a half-open range.
#[inline]
fn tap_range(out_len: usize, in_len: usize, stride: usize, dilation: usize, padding: usize, tap: usize) -> (usize, usize) {
    let off = dilation as isize * tap as isize - padding as isize;
    let lo = if off >= 0 { 0 } else { ((-off) as usize + stride - 1) / stride };
    let hi_num = in_len as isize - 1 - off;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(x: &Tensor, w: &Tensor, d: usize, p: usize, s: usize, of: usize, ot: usize, out: &mut [f64]) {
    let (nn, ci, fi, ti) = (x.shape.n, x.shape.c, x.shape.f, x.shape.t);
    let co = w.shape.n;
    let k = w.shape.f;
    for n in 0..nn {
        for o in 0..co {
            let ob = (n * co + o) * of * ot;
            for i in 0..ci {
                let ib = (n * ci + i) * fi * ti;
                for u in 0..k {
                    let (ylo, yhi) = tap_range(of, fi, s, d, p, u);
                    for v in 0..k {
                        let wv = w.data[((o * ci + i) * k + u) * k + v];
                        let (xlo, xhi) = tap_range(ot, ti, s, d, p, v);
                        if xlo >= xhi {
                            continue;
                        }
                        for y in ylo..yhi {
                            let fy = y * s + d * u - p;
                            let irow = ib + fy * ti;
                            let orow = ob + y * ot;
                            if s == 1 {
                                let ioff = (irow + xlo + d * v) - p;
                                let src = &x.data[ioff..ioff + (xhi - xlo)];
                                let dst = &mut out[orow + xlo..orow + xhi];
                                for (dv, sv) in dst.iter_mut().zip(src) {
                                    *dv += wv * sv;
                                }
                            } else {
                                for xx in xlo..xhi {
                                    out[orow + xx] += wv * x.data[irow + xx * s + d * v - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    w: &Tensor,
    g: &[f64],
    out_shape: Shape,
    d: usize,
    p: usize,
    s: usize,
    in_shape: Shape,
    gi: &mut [f64],
) {
    let (nn, ci, fi, ti) = (in_shape.n, in_shape.c, in_shape.f, in_shape.t);
    let (co, of, ot) = (out_shape.c, out_shape.f, out_shape.t);
    let k = w.shape.f;
    for n in 0..nn {
        for o in 0..co {
            let ob = (n * co + o) * of * ot;
            for i in 0..ci {
                let ib = (n * ci + i) * fi * ti;
                for u in 0..k {
                    let (ylo, yhi) = tap_range(of, fi, s, d, p, u);
                    for v in 0..k {
                        let wv = w.data[((o * ci + i) * k + u) * k + v];
                        let (xlo, xhi) = tap_range(ot, ti, s, d, p, v);
                        for y in ylo..yhi {
                            let fy = y * s + d * u - p;
                            let irow = ib + fy * ti;
                            let orow = ob + y * ot;
                            for xx in xlo..xhi {
                                gi[irow + xx * s + d * v - p] += wv * g[orow + xx];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_kernel(
    x: &Tensor,
    g: &[f64],
    out_shape: Shape,
    d: usize,
    p: usize,
    s: usize,
    w_shape: Shape,
    gw: &mut [f64],
) {
    let (nn, ci, fi, ti) = (x.shape.n, x.shape.c, x.shape.f, x.shape.t);
    let (co, of, ot) = (out_shape.c, out_shape.f, out_shape.t);
    let k = w_shape.f;
    for n in 0..nn {
        for o in 0..co {
            let ob = (n * co + o) * of * ot;
            for i in 0..ci {
                let ib = (n * ci + i) * fi * ti;
                for u in 0..k {
                    let (ylo, yhi) = tap_range(of, fi, s, d, p, u);
                    for v in 0..k {
                        let (xlo, xhi) = tap_range(ot, ti, s, d, p, v);
                        let mut acc = 0.0;
                        for y in ylo..yhi {
                            let fy = y * s + d * u - p;
                            let irow = ib + fy * ti;
                            let orow = ob + y * ot;
                            if s == 1 {
                                let ioff = (irow + xlo + d * v) - p;
                                let src = &x.data[ioff..ioff + xhi.saturating_sub(xlo)];
                                let gr = &g[orow + xlo..orow + xhi];
                                for (gv, xv) in gr.iter().zip(src) {
                                    acc += gv * xv;
                                }
                            } else {
                                for xx in xlo..xhi {
                                    acc += g[orow + xx] * x.data[irow + xx * s + d * v - p];
                                }
                            }
                        }
                        gw[((o * ci + i) * k + u) * k + v] += acc;
                    }
                }
            }
        }
    }
}

/// Align-corners source coordinate for output index `o`: returns the two
/// neighbouring input indices and the interpolation weight toward the upper
/// one.
#[inline]
fn interp_coord(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    if out_len <= 1 || in_len <= 1 {
        return (0, 0, 0.0);
    }
    let src = o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let lo = src.floor() as usize;
    let lo = lo.min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Invokes `f` with the flat indices of every slice along `axis`.
fn for_each_axis_slice(sh: Shape, axis: SoftmaxAxis, mut f: impl FnMut(&[usize])) {
    match axis {
        SoftmaxAxis::Time => {
            let mut idx = Vec::with_capacity(sh.t);
            for n in 0..sh.n {
                for c in 0..sh.c {
                    for fr in 0..sh.f {
                        idx.clear();
                        let base = sh.idx(n, c, fr, 0);
                        idx.extend(base..base + sh.t);
                        f(&idx);
                    }
                }
            }
        }
        SoftmaxAxis::Frequency => {
            let mut idx = Vec::with_capacity(sh.f);
            for n in 0..sh.n {
                for c in 0..sh.c {
                    for t in 0..sh.t {
                        idx.clear();
                        for fr in 0..sh.f {
                            idx.push(sh.idx(n, c, fr, t));
                        }
                        f(&idx);
                    }
                }
            }
        }
    }
}
