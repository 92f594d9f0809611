//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The engine is a flat tape: every forward operation appends a node holding
//! its output value and enough context to run its backward rule. Ops accept
//! exactly the shapes the model needs; there is no implicit broadcasting.
//! Tapes are single-threaded; values are immutable once written.

pub mod adam;

use crate::error::{Error, Result};
use std::fmt::{Debug, Display};

/// Floating-point element type of the engine.
///
/// Training runs in `f32`; gradient checks run in `f64` so central finite
/// differences have enough precision to resolve a 1e-4 relative tolerance.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. `shape` may be empty for scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); numel],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.shape.is_empty()
    }

    /// Scalar payload; panics if the tensor is not 1-element.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossless-enough dtype conversion (f32 <-> f64 via f64).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| G::from_f64(Scalar::to_f64(v)))
                .collect(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Train/eval phase selector for stateful ops (batch norm).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<F: Scalar> {
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub momentum: F,
    pub eps: F,
}

impl<F: Scalar> BnState<F> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            momentum: F::from_f64(0.1),
            eps: F::from_f64(1e-5),
        }
    }
}

/// GRU parameter handles on a tape: update (z), reset (r), candidate (n) gates.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wn: Var,
    pub un: Var,
    pub bn: Var,
}

#[derive(Debug, Clone)]
struct BnCtx<F: Scalar> {
    x_hat: Vec<F>,
    inv_std: Vec<F>,
    train: bool,
}

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    Conv1d {
        input: Var,
        kernels: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool1d {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        ctx: BnCtx<F>,
    },
    LeakyRelu {
        input: Var,
        slope: F,
    },
    Sigmoid {
        input: Var,
    },
    Tanh {
        input: Var,
    },
    MeanOverTime {
        input: Var,
    },
    /// y = W x + b
    Linear {
        weight: Var,
        input: Var,
        bias: Var,
    },
    /// y = W x + U h + b (one GRU gate pre-activation)
    Affine2 {
        w: Var,
        x: Var,
        u: Var,
        h: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    /// y[c,t] = x[c,t] * s[c] + s[c]
    ChannelGate {
        input: Var,
        scale: Var,
    },
    Column {
        input: Var,
        index: usize,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: F,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<F>,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    op: Op<F>,
    trainable: bool,
}

/// Computation tape. One forward pass per tape; `backward` may run once.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input value. `trainable` marks it as a parameter whose
    /// gradient should be retained by `backward`.
    pub fn leaf(&mut self, value: Tensor<F>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Gradient of a node after `backward`. Untouched nodes report zeros.
    pub fn grad(&self, v: Var) -> Tensor<F> {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor {
                shape: node.value.shape.clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(node.value.shape.clone()),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn out(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.push(value, op, false)
    }

    /// Valid (unpadded) 1-d convolution: input [C_in, T], kernels
    /// [C_out, C_in, K] -> [C_out, (T-K)/stride + 1].
    pub fn conv1d(&mut self, input: Var, kernels: Var, stride: usize) -> Result<Var> {
        self.conv1d_padded(input, kernels, stride, 0)
    }

    /// 1-d convolution with symmetric zero padding `pad` on the time axis.
    pub fn conv1d_padded(
        &mut self,
        input: Var,
        kernels: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidArg("conv1d stride must be positive".into()));
        }
        let (xs, ws) = (&self.value(input).shape, &self.value(kernels).shape);
        if xs.len() != 2 || ws.len() != 3 {
            return Err(Error::Shape(format!(
                "conv1d expects input [C,T] and kernels [C_out,C_in,K], got {xs:?} and {ws:?}"
            )));
        }
        let (c_in, t) = (xs[0], xs[1]);
        let (c_out, kc_in, k) = (ws[0], ws[1], ws[2]);
        if kc_in != c_in {
            return Err(Error::Shape(format!(
                "conv1d input has {c_in} channels but kernels expect {kc_in}"
            )));
        }
        if t + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv1d input length {t} (+2*{pad} pad) shorter than kernel {k}"
            )));
        }
        let t_out = (t + 2 * pad - k) / stride + 1;
        let x = &self.value(input).data;
        let w = &self.value(kernels).data;
        let mut y = vec![F::zero(); c_out * t_out];
        for o in 0..c_out {
            for ci in 0..c_in {
                let wrow = &w[(o * c_in + ci) * k..(o * c_in + ci + 1) * k];
                let xrow = &x[ci * t..(ci + 1) * t];
                let yrow = &mut y[o * t_out..(o + 1) * t_out];
                if pad == 0 {
                    for (j, yj) in yrow.iter_mut().enumerate() {
                        let seg = &xrow[j * stride..j * stride + k];
                        let mut acc = F::zero();
                        for (a, b) in seg.iter().zip(wrow) {
                            acc += *a * *b;
                        }
                        *yj += acc;
                    }
                } else {
                    for (j, yj) in yrow.iter_mut().enumerate() {
                        let start = (j * stride) as isize - pad as isize;
                        let mut acc = F::zero();
                        for (kk, wv) in wrow.iter().enumerate() {
                            let ti = start + kk as isize;
                            if ti >= 0 && (ti as usize) < t {
                                acc += xrow[ti as usize] * *wv;
                            }
                        }
                        *yj += acc;
                    }
                }
            }
        }
        let value = Tensor::new(vec![c_out, t_out], y)?;
        Ok(self.out(
            value,
            Op::Conv1d {
                input,
                kernels,
                stride,
                pad,
            },
        ))
    }

    /// Non-overlapping max pooling; trailing remainder is discarded.
    pub fn maxpool1d(&mut self, input: Var, window: usize) -> Result<Var> {
        if window == 0 {
            return Err(Error::InvalidArg("maxpool window must be positive".into()));
        }
        let xs = &self.value(input).shape;
        if xs.len() != 2 {
            return Err(Error::Shape(format!("maxpool1d expects [C,T], got {xs:?}")));
        }
        let (c, t) = (xs[0], xs[1]);
        if t < window {
            return Err(Error::Shape(format!(
                "maxpool1d input length {t} shorter than window {window}"
            )));
        }
        let t_out = t / window;
        let x = &self.value(input).data;
        let mut y = vec![F::zero(); c * t_out];
        let mut argmax = vec![0usize; c * t_out];
        for ci in 0..c {
            for j in 0..t_out {
                let base = ci * t + j * window;
                let mut best = x[base];
                let mut best_i = base;
                // strict > keeps the first occurrence on ties
                for off in 1..window {
                    if x[base + off] > best {
                        best = x[base + off];
                        best_i = base + off;
                    }
                }
                y[ci * t_out + j] = best;
                argmax[ci * t_out + j] = best_i;
            }
        }
        let value = Tensor::new(vec![c, t_out], y)?;
        Ok(self.out(value, Op::MaxPool1d { input, argmax }))
    }

    /// Per-channel batch normalization over the time axis of a [C, T] map.
    ///
    /// Train mode normalizes by batch statistics and updates `state`'s running
    /// averages (unbiased variance, momentum 0.1). Eval mode normalizes by the
    /// running statistics and leaves `state` untouched.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState<F>,
        mode: Mode,
    ) -> Result<Var> {
        let xs = &self.value(input).shape;
        if xs.len() != 2 {
            return Err(Error::Shape(format!(
                "batch_norm expects [C,T], got {xs:?}"
            )));
        }
        let (c, t) = (xs[0], xs[1]);
        if self.value(gamma).shape != [c] || self.value(beta).shape != [c] {
            return Err(Error::Shape(format!(
                "batch_norm gamma/beta must be [{c}], got {:?}/{:?}",
                self.value(gamma).shape,
                self.value(beta).shape
            )));
        }
        if state.running_mean.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm state holds {} channels, input has {c}",
                state.running_mean.len()
            )));
        }
        let x = &self.value(input).data;
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let tn = F::from_f64(t as f64);
        let mut y = vec![F::zero(); c * t];
        let mut x_hat = vec![F::zero(); c * t];
        let mut inv_std = vec![F::zero(); c];
        for ci in 0..c {
            let row = &x[ci * t..(ci + 1) * t];
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut m = F::zero();
                    for v in row {
                        m += *v;
                    }
                    m = m / tn;
                    let mut va = F::zero();
                    for v in row {
                        let d = *v - m;
                        va += d * d;
                    }
                    va = va / tn;
                    (m, va)
                }
                Mode::Eval => (state.running_mean[ci], state.running_var[ci]),
            };
            let istd = F::one() / (var + state.eps).sqrt();
            inv_std[ci] = istd;
            for (j, v) in row.iter().enumerate() {
                let xh = (*v - mean) * istd;
                x_hat[ci * t + j] = xh;
                y[ci * t + j] = g[ci] * xh + b[ci];
            }
            if matches!(mode, Mode::Train) {
                let unbiased = if t > 1 {
                    var * tn / F::from_f64((t - 1) as f64)
                } else {
                    var
                };
                let mom = state.momentum;
                state.running_mean[ci] = (F::one() - mom) * state.running_mean[ci] + mom * mean;
                state.running_var[ci] = (F::one() - mom) * state.running_var[ci] + mom * unbiased;
            }
        }
        let ctx = BnCtx {
            x_hat,
            inv_std,
            train: matches!(mode, Mode::Train),
        };
        let value = Tensor::new(vec![c, t], y)?;
        Ok(self.out(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                ctx,
            },
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: F) -> Var {
        let x = self.value(input);
        let data = x
            .data
            .iter()
            .map(|&v| if v >= F::zero() { v } else { slope * v })
            .collect();
        let value = Tensor {
            shape: x.shape.clone(),
            data,
        };
        self.out(value, Op::LeakyRelu { input, slope })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data.iter().map(|&v| sigmoid_scalar(v)).collect();
        let value = Tensor {
            shape: x.shape.clone(),
            data,
        };
        self.out(value, Op::Sigmoid { input })
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data.iter().map(|&v| v.tanh()).collect();
        let value = Tensor {
            shape: x.shape.clone(),
            data,
        };
        self.out(value, Op::Tanh { input })
    }

    /// [C, T] -> [C], mean over the time axis.
    pub fn mean_over_time(&mut self, input: Var) -> Result<Var> {
        let xs = &self.value(input).shape;
        if xs.len() != 2 {
            return Err(Error::Shape(format!(
                "mean_over_time expects [C,T], got {xs:?}"
            )));
        }
        let (c, t) = (xs[0], xs[1]);
        let x = &self.value(input).data;
        let tn = F::from_f64(t as f64);
        let mut y = vec![F::zero(); c];
        for ci in 0..c {
            let mut acc = F::zero();
            for v in &x[ci * t..(ci + 1) * t] {
                acc += *v;
            }
            y[ci] = acc / tn;
        }
        let value = Tensor::new(vec![c], y)?;
        Ok(self.out(value, Op::MeanOverTime { input }))
    }

    /// y = W x + b with W [M,N], x [N], b [M].
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let ws = &self.value(weight).shape;
        let xs = &self.value(input).shape;
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(Error::Shape(format!(
                "linear expects W [M,N] and x [N], got {ws:?} and {xs:?}"
            )));
        }
        let (m, n) = (ws[0], ws[1]);
        if self.value(bias).shape != [m] {
            return Err(Error::Shape(format!(
                "linear bias must be [{m}], got {:?}",
                self.value(bias).shape
            )));
        }
        let w = &self.value(weight).data;
        let x = &self.value(input).data;
        let b = &self.value(bias).data;
        let mut y = vec![F::zero(); m];
        for i in 0..m {
            let mut acc = b[i];
            for (wv, xv) in w[i * n..(i + 1) * n].iter().zip(x) {
                acc += *wv * *xv;
            }
            y[i] = acc;
        }
        let value = Tensor::new(vec![m], y)?;
        Ok(self.out(
            value,
            Op::Linear {
                weight,
                input,
                bias,
            },
        ))
    }

    /// y = W x + U h + b; the pre-activation of one recurrent gate.
    pub fn affine2(&mut self, w: Var, x: Var, u: Var, h: Var, bias: Var) -> Result<Var> {
        let (ws, xs, us, hs) = (
            &self.value(w).shape,
            &self.value(x).shape,
            &self.value(u).shape,
            &self.value(h).shape,
        );
        if ws.len() != 2 || us.len() != 2 || xs.len() != 1 || hs.len() != 1 {
            return Err(Error::Shape(format!(
                "affine2 expects W [M,N1], x [N1], U [M,N2], h [N2]; got {ws:?},{xs:?},{us:?},{hs:?}"
            )));
        }
        let m = ws[0];
        if ws[1] != xs[0] || us[1] != hs[0] || us[0] != m || self.value(bias).shape != [m] {
            return Err(Error::Shape("affine2 dimension mismatch".into()));
        }
        let (n1, n2) = (ws[1], us[1]);
        let wd = &self.value(w).data;
        let xd = &self.value(x).data;
        let ud = &self.value(u).data;
        let hd = &self.value(h).data;
        let bd = &self.value(bias).data;
        let mut y = vec![F::zero(); m];
        for i in 0..m {
            let mut acc = bd[i];
            for (wv, xv) in wd[i * n1..(i + 1) * n1].iter().zip(xd) {
                acc += *wv * *xv;
            }
            for (uv, hv) in ud[i * n2..(i + 1) * n2].iter().zip(hd) {
                acc += *uv * *hv;
            }
            y[i] = acc;
        }
        let value = Tensor::new(vec![m], y)?;
        Ok(self.out(value, Op::Affine2 { w, x, u, h, bias }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, |x, y| x + y, "add", |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, |x, y| x - y, "sub", |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, |x, y| x * y, "mul", |a, b| Op::Mul { a, b })
    }

    fn zip_elementwise(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        name: &str,
        op: impl Fn(Var, Var) -> Op<F>,
    ) -> Result<Var> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::Shape(format!(
                "{name} expects equal shapes, got {:?} and {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        Ok(self.out(value, op(a, b)))
    }

    /// FMS application: y[c,t] = x[c,t]*s[c] + s[c].
    pub fn channel_gate(&mut self, input: Var, scale: Var) -> Result<Var> {
        let xs = &self.value(input).shape;
        let ss = &self.value(scale).shape;
        if xs.len() != 2 || ss.len() != 1 || ss[0] != xs[0] {
            return Err(Error::Shape(format!(
                "channel_gate expects x [C,T] and s [C], got {xs:?} and {ss:?}"
            )));
        }
        let (c, t) = (xs[0], xs[1]);
        let x = &self.value(input).data;
        let s = &self.value(scale).data;
        let mut y = vec![F::zero(); c * t];
        for ci in 0..c {
            for j in 0..t {
                y[ci * t + j] = x[ci * t + j] * s[ci] + s[ci];
            }
        }
        let value = Tensor::new(vec![c, t], y)?;
        Ok(self.out(value, Op::ChannelGate { input, scale }))
    }

    /// Extract column `index` of a [C, T] map as a [C] vector.
    pub fn column(&mut self, input: Var, index: usize) -> Result<Var> {
        let xs = &self.value(input).shape;
        if xs.len() != 2 || index >= xs[1] {
            return Err(Error::Shape(format!(
                "column {index} out of range for shape {xs:?}"
            )));
        }
        let (c, t) = (xs[0], xs[1]);
        let x = &self.value(input).data;
        let y: Vec<F> = (0..c).map(|ci| x[ci * t + index]).collect();
        let value = Tensor::new(vec![c], y)?;
        Ok(self.out(value, Op::Column { input, index }))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: Var) -> Var {
        let mut acc = F::zero();
        for v in &self.value(input).data {
            acc += *v;
        }
        self.out(Tensor::scalar(acc), Op::Sum { input })
    }

    pub fn scale(&mut self, input: Var, factor: F) -> Var {
        let x = self.value(input);
        let data = x.data.iter().map(|&v| v * factor).collect();
        let value = Tensor {
            shape: x.shape.clone(),
            data,
        };
        self.out(value, Op::Scale { input, factor })
    }

    /// Cross-entropy of softmax(logits) against `label`, as a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let l = self.value(logits);
        if l.shape.len() != 1 || label >= l.shape[0] {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: logits {:?}, label {label}",
                l.shape
            )));
        }
        let probs = softmax(&l.data);
        // loss = logsumexp(logits) - logits[label]
        let max = l.data.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for &v in &l.data {
            sum += (v - max).exp();
        }
        let loss = max + sum.ln() - l.data[label];
        Ok(self.out(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    /// Standard GRU over the columns of a [D, T] map; returns the final
    /// hidden state [H].
    ///
    /// Gates: z = sigma(Wz x + Uz h + bz), r = sigma(Wr x + Ur h + br),
    /// n = tanh(Wn x + r.(Un h) + bn), h' = (1-z).n + z.h, with h0 = 0.
    pub fn gru_sequence(&mut self, input: Var, p: &GruVars) -> Result<Var> {
        let xs = &self.value(input).shape;
        if xs.len() != 2 {
            return Err(Error::Shape(format!(
                "gru_sequence expects [D,T], got {xs:?}"
            )));
        }
        let t_steps = xs[1];
        if t_steps == 0 {
            return Err(Error::InvalidArg("gru_sequence: empty sequence".into()));
        }
        let hidden = self.value(p.bz).shape[0];
        let mut h = self.leaf(Tensor::zeros(vec![hidden]), false);
        for t in 0..t_steps {
            let x = self.column(input, t)?;
            let z_pre = self.affine2(p.wz, x, p.uz, h, p.bz)?;
            let z = self.sigmoid(z_pre);
            let r_pre = self.affine2(p.wr, x, p.ur, h, p.br)?;
            let r = self.sigmoid(r_pre);
            // r gates the recurrent term inside the candidate
            let zero_bias = self.leaf(Tensor::zeros(vec![hidden]), false);
            let uh = self.linear(h, p.un, zero_bias)?;
            let ruh = self.mul(r, uh)?;
            let wx = self.linear(x, p.wn, p.bn)?;
            let n_pre = self.add(wx, ruh)?;
            let n = self.tanh(n_pre);
            // h' = n + z*(h - n)
            let hmn = self.sub(h, n)?;
            let zhmn = self.mul(z, hmn)?;
            h = self.add(n, zhmn)?;
        }
        Ok(h)
    }

    /// Reverse accumulation from a scalar loss. Each tape supports exactly
    /// one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autograd(
                "backward already ran on this tape".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Autograd(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g;
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, gy: &[F], grads: &mut [Option<Vec<F>>]) {
        fn buf<'a, F: Scalar>(
            grads: &'a mut [Option<Vec<F>>],
            v: Var,
            len: usize,
        ) -> &'a mut Vec<F> {
            grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
        }
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                kernels,
                stride,
                pad,
            } => {
                let xs = &val(*input).shape;
                let ws = &val(*kernels).shape;
                let (c_in, t) = (xs[0], xs[1]);
                let (c_out, _, k) = (ws[0], ws[1], ws[2]);
                let t_out = (t + 2 * pad - k) / stride + 1;
                let x = &val(*input).data;
                let w = &val(*kernels).data;
                let mut dx = vec![F::zero(); c_in * t];
                let mut dw = vec![F::zero(); c_out * c_in * k];
                for o in 0..c_out {
                    for j in 0..t_out {
                        let g = gy[o * t_out + j];
                        if g == F::zero() {
                            continue;
                        }
                        let start = (j * stride) as isize - *pad as isize;
                        for ci in 0..c_in {
                            let wbase = (o * c_in + ci) * k;
                            let xbase = ci * t;
                            for kk in 0..k {
                                let ti = start + kk as isize;
                                if ti >= 0 && (ti as usize) < t {
                                    let ti = ti as usize;
                                    dx[xbase + ti] += g * w[wbase + kk];
                                    dw[wbase + kk] += g * x[xbase + ti];
                                }
                            }
                        }
                    }
                }
                let bx = buf(grads, *input, c_in * t);
                for (a, b) in bx.iter_mut().zip(&dx) {
                    *a += *b;
                }
                let bw = buf(grads, *kernels, c_out * c_in * k);
                for (a, b) in bw.iter_mut().zip(&dw) {
                    *a += *b;
                }
            }
            Op::MaxPool1d { input, argmax } => {
                let n = val(*input).numel();
                let b = buf(grads, *input, n);
                for (j, &src) in argmax.iter().enumerate() {
                    b[src] += gy[j];
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                ctx,
            } => {
                let xs = &val(*input).shape;
                let (c, t) = (xs[0], xs[1]);
                let g = &val(*gamma).data;
                let tn = F::from_f64(t as f64);
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                let mut dx = vec![F::zero(); c * t];
                for ci in 0..c {
                    let istd = ctx.inv_std[ci];
                    let mut sum_dxh = F::zero();
                    let mut sum_dxh_xh = F::zero();
                    for j in 0..t {
                        let idx = ci * t + j;
                        let dyv = gy[idx];
                        dgamma[ci] += dyv * ctx.x_hat[idx];
                        dbeta[ci] += dyv;
                        let dxh = dyv * g[ci];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * ctx.x_hat[idx];
                    }
                    for j in 0..t {
                        let idx = ci * t + j;
                        let dxh = gy[idx] * g[ci];
                        dx[idx] = if ctx.train {
                            istd * (dxh - sum_dxh / tn - ctx.x_hat[idx] * sum_dxh_xh / tn)
                        } else {
                            dxh * istd
                        };
                    }
                }
                let bx = buf(grads, *input, c * t);
                for (a, b) in bx.iter_mut().zip(&dx) {
                    *a += *b;
                }
                let bg = buf(grads, *gamma, c);
                for (a, b) in bg.iter_mut().zip(&dgamma) {
                    *a += *b;
                }
                let bb = buf(grads, *beta, c);
                for (a, b) in bb.iter_mut().zip(&dbeta) {
                    *a += *b;
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = &val(*input).data;
                let b = buf(grads, *input, x.len());
                for (j, (&xv, &g)) in x.iter().zip(gy).enumerate() {
                    b[j] += if xv >= F::zero() { g } else { *slope * g };
                }
            }
            Op::Sigmoid { input } => {
                let y = &self.nodes[i].value.data;
                let b = buf(grads, *input, y.len());
                for (j, (&yv, &g)) in y.iter().zip(gy).enumerate() {
                    b[j] += g * yv * (F::one() - yv);
                }
            }
            Op::Tanh { input } => {
                let y = &self.nodes[i].value.data;
                let b = buf(grads, *input, y.len());
                for (j, (&yv, &g)) in y.iter().zip(gy).enumerate() {
                    b[j] += g * (F::one() - yv * yv);
                }
            }
            Op::MeanOverTime { input } => {
                let xs = &val(*input).shape;
                let (c, t) = (xs[0], xs[1]);
                let tn = F::from_f64(t as f64);
                let b = buf(grads, *input, c * t);
                for ci in 0..c {
                    let g = gy[ci] / tn;
                    for j in 0..t {
                        b[ci * t + j] += g;
                    }
                }
            }
            Op::Linear {
                weight,
                input,
                bias,
            } => {
                let ws = &val(*weight).shape;
                let (m, n) = (ws[0], ws[1]);
                let w = &val(*weight).data;
                let x = &val(*input).data;
                let mut dx = vec![F::zero(); n];
                let mut dw = vec![F::zero(); m * n];
                for mi in 0..m {
                    let g = gy[mi];
                    for ni in 0..n {
                        dw[mi * n + ni] += g * x[ni];
                        dx[ni] += g * w[mi * n + ni];
                    }
                }
                let bx = buf(grads, *input, n);
                for (a, b) in bx.iter_mut().zip(&dx) {
                    *a += *b;
                }
                let bw = buf(grads, *weight, m * n);
                for (a, b) in bw.iter_mut().zip(&dw) {
                    *a += *b;
                }
                let bb = buf(grads, *bias, m);
                for (a, &g) in bb.iter_mut().zip(gy) {
                    *a += g;
                }
            }
            Op::Affine2 { w, x, u, h, bias } => {
                let (m, n1) = (val(*w).shape[0], val(*w).shape[1]);
                let n2 = val(*u).shape[1];
                let wd = &val(*w).data;
                let ud = &val(*u).data;
                let xd = &val(*x).data;
                let hd = &val(*h).data;
                let mut dx = vec![F::zero(); n1];
                let mut dh = vec![F::zero(); n2];
                let mut dw = vec![F::zero(); m * n1];
                let mut du = vec![F::zero(); m * n2];
                for mi in 0..m {
                    let g = gy[mi];
                    for ni in 0..n1 {
                        dw[mi * n1 + ni] += g * xd[ni];
                        dx[ni] += g * wd[mi * n1 + ni];
                    }
                    for ni in 0..n2 {
                        du[mi * n2 + ni] += g * hd[ni];
                        dh[ni] += g * ud[mi * n2 + ni];
                    }
                }
                for (a, b) in buf(grads, *x, n1).iter_mut().zip(&dx) {
                    *a += *b;
                }
                for (a, b) in buf(grads, *h, n2).iter_mut().zip(&dh) {
                    *a += *b;
                }
                for (a, b) in buf(grads, *w, m * n1).iter_mut().zip(&dw) {
                    *a += *b;
                }
                for (a, b) in buf(grads, *u, m * n2).iter_mut().zip(&du) {
                    *a += *b;
                }
                for (a, &g) in buf(grads, *bias, m).iter_mut().zip(gy) {
                    *a += g;
                }
            }
            Op::Add { a, b } => {
                let n = gy.len();
                for (dst, &g) in buf(grads, *a, n).iter_mut().zip(gy) {
                    *dst += g;
                }
                for (dst, &g) in buf(grads, *b, n).iter_mut().zip(gy) {
                    *dst += g;
                }
            }
            Op::Sub { a, b } => {
                let n = gy.len();
                for (dst, &g) in buf(grads, *a, n).iter_mut().zip(gy) {
                    *dst += g;
                }
                for (dst, &g) in buf(grads, *b, n).iter_mut().zip(gy) {
                    *dst -= g;
                }
            }
            Op::Mul { a, b } => {
                let ad = val(*a).data.clone();
                let bd = val(*b).data.clone();
                for ((dst, &g), &bv) in buf(grads, *a, ad.len()).iter_mut().zip(gy).zip(&bd) {
                    *dst += g * bv;
                }
                for ((dst, &g), &av) in buf(grads, *b, bd.len()).iter_mut().zip(gy).zip(&ad) {
                    *dst += g * av;
                }
            }
            Op::ChannelGate { input, scale } => {
                let xs = &val(*input).shape;
                let (c, t) = (xs[0], xs[1]);
                let x = &val(*input).data;
                let s = &val(*scale).data;
                let mut ds = vec![F::zero(); c];
                let mut dx = vec![F::zero(); c * t];
                for ci in 0..c {
                    for j in 0..t {
                        let idx = ci * t + j;
                        dx[idx] = gy[idx] * s[ci];
                        ds[ci] += gy[idx] * (x[idx] + F::one());
                    }
                }
                for (a, b) in buf(grads, *input, c * t).iter_mut().zip(&dx) {
                    *a += *b;
                }
                for (a, b) in buf(grads, *scale, c).iter_mut().zip(&ds) {
                    *a += *b;
                }
            }
            Op::Column { input, index } => {
                let xs = &val(*input).shape;
                let (c, t) = (xs[0], xs[1]);
                let b = buf(grads, *input, c * t);
                for (ci, &g) in gy.iter().enumerate() {
                    b[ci * t + index] += g;
                }
            }
            Op::Sum { input } => {
                let n = val(*input).numel();
                let g = gy[0];
                for dst in buf(grads, *input, n).iter_mut() {
                    *dst += g;
                }
            }
            Op::Scale { input, factor } => {
                let n = val(*input).numel();
                let f = *factor;
                for (dst, &g) in buf(grads, *input, n).iter_mut().zip(gy) {
                    *dst += f * g;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                let g = gy[0];
                let b = buf(grads, *logits, probs.len());
                for (j, (dst, &p)) in b.iter_mut().zip(probs).enumerate() {
                    let onehot = if j == *label { F::one() } else { F::zero() };
                    *dst += g * (p - onehot);
                }
            }
        }
    }

    /// Leaf vars marked trainable, in registration order.
    pub fn trainable_leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable && matches!(n.op, Op::Leaf))
            .map(|(i, _)| Var(i))
            .collect()
    }
}

/// Numerically stable softmax; outputs sum to 1 up to rounding.
pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&v| (v - max).exp()).collect();
    let mut sum = F::zero();
    for e in &exps {
        sum += *e;
    }
    exps.into_iter().map(|e| e / sum).collect()
}

/// Log-softmax via the logsumexp identity.
pub fn log_softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for &v in logits {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    logits.iter().map(|&v| v - lse).collect()
}

fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
