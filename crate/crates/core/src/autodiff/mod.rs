//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the tape is
//! already topologically sorted: `backward` walks it once from the loss
//! towards the leaves. A graph supports exactly one backward pass; build a
//! fresh graph per step.

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, InputCheck, REL_ERR_FLOOR};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{numel, Element, Tensor};
use kernels::ConvGeom;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;
/// Allowed deviation of a target row sum from 1.
pub const TARGET_SUM_TOL: f64 = 1e-6;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// Deliberate corruptions of backward rules, used to prove that gradient
/// checks detect broken derivatives.
#[cfg(feature = "fault-injection")]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// `mul` sends each operand its own value instead of the other operand's.
    MulRule,
    /// `conv2d_same` negates the input gradient.
    ConvInputSign,
}

/// Running statistics of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Option<Vec<T>>,
    pub running_var: Option<Vec<T>>,
    pub momentum: f64,
    pub eps: f64,
}

/// Batch statistics produced by a train-mode batch-norm forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Element> BnState<T> {
    /// Running mean 0 and variance 1, the usual starting point.
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Some(vec![T::zero(); channels]),
            running_var: Some(vec![T::one(); channels]),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn uninitialized() -> Self {
        Self {
            running_mean: None,
            running_var: None,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Exponential moving average update. The running variance tracks the
    /// unbiased estimate `var·n/(n-1)`.
    pub fn update(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64_lossy(self.momentum);
        let keep = T::one() - m;
        let n = stats.count as f64;
        let unbias = T::from_f64_lossy(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        let rm = self
            .running_mean
            .get_or_insert_with(|| vec![T::zero(); stats.mean.len()]);
        for (r, &b) in rm.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        let rv = self
            .running_var
            .get_or_insert_with(|| vec![T::one(); stats.var.len()]);
        for (r, &b) in rv.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Gelu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// A recorded computation and, after [`Graph::backward`], its leaf gradients.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    #[cfg(feature = "fault-injection")]
    fault: Option<BackwardFault>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis size, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            #[cfg(feature = "fault-injection")]
            fault: None,
        }
    }

    #[cfg(feature = "fault-injection")]
    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient of the loss with respect to a leaf. `None` when the leaf
    /// does not require a gradient or received no contribution.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    // ---------------------------------------------------------------- ops

    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (numel(sa), numel(sb));
        if sa != sb && na != 1 && nb != 1 {
            return shape_err(format!(
                "elementwise {kind:?}: shapes {sa:?} and {sb:?} differ"
            ));
        }
        let out_shape = if na >= nb { sa.to_vec() } else { sb.to_vec() };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = numel(&out_shape);
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Mul => x * y,
        };
        let data: Vec<T> = (0..n)
            .map(|i| {
                f(
                    av[if na == 1 { 0 } else { i }],
                    bv[if nb == 1 { 0 } else { i }],
                )
            })
            .collect();
        let op = match kind {
            BinaryKind::Add => Op::Add(a, b),
            BinaryKind::Mul => Op::Mul(a, b),
        };
        Ok(self.push(Tensor::from_parts(out_shape, data), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul: cannot multiply {sa:?} by {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            m,
            k,
            n,
            false,
        );
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            &[a, b],
        ))
    }

    /// `x·w + bias` with `x: batch×in`, `w: in×out`, `bias: out`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return shape_err(format!(
                "linear: input {sx:?}, weight {sw:?}, bias {sb:?} do not agree"
            ));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let bv = self.value(bias).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv);
        }
        kernels::matmul(
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            m,
            k,
            n,
            true,
        );
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::Linear { x, w, b: bias },
            &[x, w, bias],
        ))
    }

    /// Stride-1 cross-correlation with zero padding that preserves `H×W`.
    pub fn conv2d_same(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (sx, sk, sb) = (self.shape(x), self.shape(kernel), self.shape(bias));
        if sk.len() != 4 {
            return shape_err(format!("conv2d: kernel must be rank 4, got {sk:?}"));
        }
        if sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d: same padding needs odd kernel sizes, got {}x{}",
                sk[2], sk[3]
            )));
        }
        if sx.len() != 4 || sx[1] != sk[1] || sb != [sk[0]] {
            return shape_err(format!(
                "conv2d: input {sx:?}, kernel {sk:?}, bias {sb:?} do not agree"
            ));
        }
        let geom = ConvGeom {
            n: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sk[0],
            kh: sk[2],
            kw: sk[3],
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
        );
        Ok(self.push(
            Tensor::from_parts(vec![geom.n, geom.c_out, geom.h, geom.w], out),
            Op::Conv2d {
                x,
                k: kernel,
                b: bias,
                geom,
            },
            &[x, kernel, bias],
        ))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return shape_err(format!("batchnorm2d: input must be N×C×H×W, got {sx:?}"));
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!(
                "batchnorm2d: {c} channels but gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        Ok((sx[0], c, sx[2] * sx[3]))
    }

    fn affine_channels(
        &self,
        xhat: &[T],
        gamma: Var,
        beta: Var,
        n: usize,
        c: usize,
        p: usize,
    ) -> Vec<T> {
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xhat.len()];
        for (i, (dst, src)) in out
            .chunks_exact_mut(p)
            .zip(xhat.chunks_exact(p))
            .enumerate()
        {
            let (gc, bc) = (g[i % c], b[i % c]);
            for (d, &h) in dst.iter_mut().zip(src) {
                *d = gc * h + bc;
            }
        }
        debug_assert_eq!(out.len(), n * c * p);
        out
    }

    /// Train-mode batch normalization; returns the batch statistics so the
    /// caller decides where running averages live.
    pub fn batchnorm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, p) = self.check_bn(x, gamma, beta)?;
        if n * p < 2 {
            return shape_err("batchnorm2d: train mode needs at least 2 values per channel");
        }
        let (xhat, inv_std, mean, var) =
            kernels::batch_stats(self.value(x).data(), n, c, p, T::from_f64_lossy(BN_EPS));
        let out = self.affine_channels(&xhat, gamma, beta, n, c, p);
        let shape = self.shape(x).to_vec();
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            &[x, gamma, beta],
        );
        Ok((
            v,
            BatchStats {
                mean,
                var,
                count: n * p,
            },
        ))
    }

    pub fn batchnorm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BnState<T>,
    ) -> Result<Var> {
        let (n, c, p) = self.check_bn(x, gamma, beta)?;
        let (Some(rm), Some(rv)) = (&state.running_mean, &state.running_var) else {
            return Err(Error::State(
                "batchnorm2d: eval mode before running statistics exist".into(),
            ));
        };
        if rm.len() != c || rv.len() != c {
            return shape_err(format!(
                "batchnorm2d: running stats have {} channels, input has {c}",
                rm.len()
            ));
        }
        let eps = T::from_f64_lossy(state.eps);
        let inv_std: Vec<T> = rv.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let mut xhat = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * p;
                for i in off..off + p {
                    xhat[i] = (xv[i] - rm[ch]) * inv_std[ch];
                }
            }
        }
        let out = self.affine_channels(&xhat, gamma, beta, n, c, p);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            &[x, gamma, beta],
        ))
    }

    /// Batch normalization over (N, H, W) per channel. Train mode folds the
    /// batch statistics into `state` with momentum 0.1.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState<T>,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (v, stats) = self.batchnorm2d_train(x, gamma, beta)?;
                state.update(&stats);
                Ok(v)
            }
            Mode::Eval => self.batchnorm2d_eval(x, gamma, beta, state),
        }
    }

    /// Normalization over the last axis with a learned per-feature affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(format!(
                "layer_norm: feature size {d} but gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let eps = T::from_f64_lossy(LN_EPS);
        let dn = T::from_usize(d).unwrap();
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for i in 0..d {
                let h = (row[i] - mean) * inv;
                xhat[r * d + i] = h;
                out[r * d + i] = g[i] * h + b[i];
            }
        }
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => {
                // NaN passes through
                let out = self
                    .value(x)
                    .map(|v| if v < T::zero() { T::zero() } else { v });
                self.push(out, Op::Relu(x), &[x])
            }
            Activation::Gelu => {
                let out = self.value(x).map(kernels::gelu);
                self.push(out, Op::Gelu(x), &[x])
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    /// Non-overlapping max pooling; trailing rows/columns that do not fill a
    /// window are dropped.
    pub fn maxpool2d(&mut self, x: Var, window: (usize, usize)) -> Result<Var> {
        let sx = self.shape(x);
        let (ph, pw) = window;
        if sx.len() != 4 {
            return shape_err(format!("maxpool2d: input must be N×C×H×W, got {sx:?}"));
        }
        if ph == 0 || pw == 0 || sx[2] < ph || sx[3] < pw {
            return shape_err(format!(
                "maxpool2d: window {ph}x{pw} does not fit input {sx:?}"
            ));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), n * c, h, w, ph, pw);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h / ph, w / pw], out),
            Op::MaxPool { x, argmax },
            &[x],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err("concat: no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat: axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err(format!(
                    "concat: {s:?} incompatible with {base:?} on axis {axis}"
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return shape_err(format!(
                "slice: range {start}..{} invalid on axis {axis} of {sx:?}",
                start + len
            ));
        }
        let (outer, size, inner) = axis_split(&sx, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Slice { x, axis, start },
            &[x],
        ))
    }

    /// Two equal halves along `axis`, lower indices first.
    pub fn split_half(&mut self, x: Var, axis: usize) -> Result<(Var, Var)> {
        let sx = self.shape(x);
        if axis >= sx.len() || sx[axis] % 2 != 0 {
            return shape_err(format!("split_half: axis {axis} of {sx:?} is not even"));
        }
        let half = sx[axis] / 2;
        Ok((
            self.slice(x, axis, 0, half)?,
            self.slice(x, axis, half, half)?,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Mean over the batch of `-Σ target·log softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || target.shape() != sl {
            return shape_err(format!(
                "softmax_cross_entropy: logits {sl:?} vs target {:?}",
                target.shape()
            ));
        }
        let (b, k) = (sl[0], sl[1]);
        let tv = target.data();
        for (r, row) in tv.chunks_exact(k).enumerate() {
            let total: f64 = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum();
            if row.iter().any(|&v| v < T::zero() || !v.is_finite())
                || (total - 1.0).abs() > TARGET_SUM_TOL
            {
                return Err(Error::Validation(format!(
                    "target row {r} is not a probability vector (sum {total})"
                )));
            }
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &lv[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for j in 0..k {
                probs[r * k + j] = (row[j] - m).exp() / z;
                let t = tv[r * k + j];
                if t > T::zero() {
                    loss = loss + t * (lse - row[j]);
                }
            }
        }
        loss = loss / T::from_usize(b).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                target: tv.to_vec(),
            },
            &[logits],
        ))
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of `loss` with respect to every leaf that
    /// requires one. Callable once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.requires_grad(loss) {
            return Err(Error::State(
                "loss does not depend on any tracked tensor".into(),
            ));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        self.grads = leaf_grads;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Zeroed (or existing) gradient buffer for `v`.
    fn buf<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> &'a mut Vec<T> {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        match &mut grads[v.0] {
            Some(existing) => add_into(existing, &contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn broadcast_back(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if self.value(v).numel() == 1 && g.len() != 1 {
            let s = g.into_iter().sum();
            self.accumulate(grads, v, vec![s]);
        } else {
            self.accumulate(grads, v, g);
        }
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        self.broadcast_back(grads, v, g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                let fault = self.has_fault_mul();
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !self.wants(v) {
                        continue;
                    }
                    let src = if fault { v } else { other };
                    let ov = self.value(src).data();
                    let no = ov.len();
                    let contrib: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gj)| gj * ov[if no == 1 { 0 } else { j }])
                        .collect();
                    self.broadcast_back(grads, v, contrib);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    self.accumulate(grads, *x, vec![g[0]; n]);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let dst = self.buf(grads, *a);
                    kernels::matmul(g, false, bv, true, dst, m, n, k, true);
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let dst = self.buf(grads, *b);
                    kernels::matmul(av, true, g, false, dst, k, m, n, true);
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (m, k, n) = (sx[0], sx[1], sw[1]);
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    let dst = self.buf(grads, *x);
                    kernels::matmul(g, false, wv, true, dst, m, n, k, true);
                }
                if self.wants(*w) {
                    let xv = self.value(*x).data();
                    let dst = self.buf(grads, *w);
                    kernels::matmul(xv, true, g, false, dst, k, m, n, true);
                }
                if self.wants(*b) {
                    let dst = self.buf(grads, *b);
                    for row in g.chunks_exact(n) {
                        add_into(dst, row);
                    }
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                let cg = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g,
                    geom,
                    [self.wants(*x), self.wants(*k), self.wants(*b)],
                );
                if let Some(mut dx) = cg.dx {
                    if self.has_fault_conv() {
                        dx.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dk) = cg.dk {
                    self.accumulate(grads, *k, dk);
                }
                if let Some(db) = cg.db {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.shape(*x);
                let (n, c, p) = (s[0], s[1], s[2] * s[3]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, (gp, hp)) in g.chunks_exact(p).zip(xhat.chunks_exact(p)).enumerate() {
                    dgamma[i % c] = dgamma[i % c] + kernels::lane_dot(gp, hp);
                    dbeta[i % c] = dbeta[i % c] + kernels::lane_sum(gp);
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let count = T::from_usize(n * p).unwrap();
                    // sums of dxhat and dxhat·xhat are gamma·dbeta and gamma·dgamma
                    let coef: Vec<(T, T, T)> = (0..c)
                        .map(|ch| {
                            let scale = gam[ch] * inv_std[ch];
                            if *train {
                                (scale, dbeta[ch] / count, dgamma[ch] / count)
                            } else {
                                (scale, T::zero(), T::zero())
                            }
                        })
                        .collect();
                    for (i, ((dp, gp), hp)) in dx
                        .chunks_exact_mut(p)
                        .zip(g.chunks_exact(p))
                        .zip(xhat.chunks_exact(p))
                        .enumerate()
                    {
                        let (scale, mean_d, mean_dx) = coef[i % c];
                        for ((d, &gi), &hi) in dp.iter_mut().zip(gp).zip(hp) {
                            *d = scale * (gi - mean_d - hi * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, dbeta);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *self.shape(*x).last().unwrap();
                let gam = self.value(*gamma).data();
                let dn = T::from_usize(d).unwrap();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let want_x = self.wants(*x);
                let mut dx = if want_x {
                    vec![T::zero(); g.len()]
                } else {
                    Vec::new()
                };
                for (r, &inv) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_d = T::zero();
                    let mut sum_dh = T::zero();
                    for i in 0..d {
                        dgamma[i] = dgamma[i] + gr[i] * hr[i];
                        dbeta[i] = dbeta[i] + gr[i];
                        let dh = gr[i] * gam[i];
                        sum_d = sum_d + dh;
                        sum_dh = sum_dh + dh * hr[i];
                    }
                    if want_x {
                        for i in 0..d {
                            let dh = gr[i] * gam[i];
                            dx[r * d + i] = inv * (dh - sum_d / dn - hr[i] * sum_dh / dn);
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, dbeta);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let contrib = g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect();
                    self.accumulate(grads, *x, contrib);
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let contrib = g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| gi * kernels::gelu_grad(xi))
                        .collect();
                    self.accumulate(grads, *x, contrib);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x) {
                    let dst = self.buf(grads, *x);
                    for (&gi, &idx) in g.iter().zip(argmax) {
                        dst[idx] = dst[idx] + gi;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = self.shape(Var(i));
                let (outer, _, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                let row = shape[*axis] * inner;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let mut contrib = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * row + offset;
                            contrib.extend_from_slice(&g[base..base + chunk]);
                        }
                        self.accumulate(grads, v, contrib);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let sx = self.shape(*x).to_vec();
                    let len = self.shape(Var(i))[*axis];
                    let (outer, size, inner) = axis_split(&sx, *axis);
                    let dst = self.buf(grads, *x);
                    for o in 0..outer {
                        let base = (o * size + start) * inner;
                        add_into(
                            &mut dst[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.to_vec());
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                target,
            } => {
                if self.wants(*logits) {
                    let b = self.shape(*logits)[0];
                    let scale = g[0] / T::from_usize(b).unwrap();
                    let contrib = probs
                        .iter()
                        .zip(target)
                        .map(|(&p, &t)| (p - t) * scale)
                        .collect();
                    self.accumulate(grads, *logits, contrib);
                }
            }
        }
    }

    #[cfg(feature = "fault-injection")]
    fn has_fault_mul(&self) -> bool {
        self.fault == Some(BackwardFault::MulRule)
    }

    #[cfg(feature = "fault-injection")]
    fn has_fault_conv(&self) -> bool {
        self.fault == Some(BackwardFault::ConvInputSign)
    }

    #[cfg(not(feature = "fault-injection"))]
    fn has_fault_mul(&self) -> bool {
        false
    }

    #[cfg(not(feature = "fault-injection"))]
    fn has_fault_conv(&self) -> bool {
        false
    }
}
