//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] simply walks it in reverse.
//!
//! Operations with a discrete choice (ReLU masks, max-pool and temporal-max
//! argmaxes) log that choice. A tape created with [`Tape::replaying`] reuses
//! a logged set of choices instead of recomputing them, which evaluates the
//! smooth piece of the function the original point lives on. Gradient checks
//! use this to keep finite differences from straddling a kink.

use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{self, ConvGeometry};
use super::params::{ParamId, Params};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

/// Discrete choices made during one forward pass, in tape order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecisionLog(Vec<Vec<u32>>);

impl DecisionLog {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

enum Op<T> {
    Leaf,
    Param,
    Conv2d { input: Var, kernel: Var, bias: Var, geometry: ConvGeometry, batch: usize },
    MaxPool2d { input: Var, argmax: Vec<u32> },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Relu { input: Var, mask: Vec<bool> },
    Sigmoid { input: Var },
    Tanh { input: Var },
    LogSoftmaxNll { logits: Var, label: usize, probs: Vec<T> },
    Concat { a: Var, b: Var },
    TemporalMax { input: Var, argmax: Vec<u32> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { input: Var },
    Scale { input: Var, factor: T },
    MeanRows { input: Var },
    Select { input: Var, index: usize },
    Stack { inputs: Vec<Var> },
    Slice { input: Var, start: usize },
    Reshape { input: Var },
    TemporalShift { input: Var, c_fwd: usize, c_bwd: usize },
}

struct Node<'a, T: Scalar> {
    op: Op<T>,
    value: Cow<'a, Tensor<T>>,
    requires_grad: bool,
}

/// One differentiation graph. Tensors borrowed into the tape (parameters,
/// cached inputs) must outlive it.
pub struct Tape<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
    param_vars: HashMap<ParamId, Var>,
    recorded: Vec<Vec<u32>>,
    replay: Option<(DecisionLog, usize)>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            recorded: Vec::new(),
            replay: None,
        }
    }

    /// A tape whose ReLU/max decisions are taken from `log` rather than
    /// from the values it sees.
    pub fn replaying(log: DecisionLog) -> Self {
        Self {
            replay: Some((log, 0)),
            ..Self::new()
        }
    }

    /// Decisions recorded so far.
    pub fn decisions(&self) -> DecisionLog {
        DecisionLog(self.recorded.clone())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, Cow::Owned(value), rg)
    }

    fn decide(&mut self, computed: Vec<u32>) -> Result<Vec<u32>> {
        let chosen = match &mut self.replay {
            None => computed,
            Some((log, cursor)) => {
                let entry = log
                    .0
                    .get(*cursor)
                    .cloned()
                    .ok_or_else(|| Error::invalid("decision replay log exhausted"))?;
                if entry.len() != computed.len() {
                    return Err(Error::invalid("decision replay log does not match graph structure"));
                }
                *cursor += 1;
                entry
            }
        };
        self.recorded.push(chosen.clone());
        Ok(chosen)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, Cow::Owned(t), false)
    }

    /// Constant input borrowed from the caller.
    pub fn input_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Op::Leaf, Cow::Borrowed(t), false)
    }

    /// Leaf whose gradient is wanted.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, Cow::Owned(t), true)
    }

    /// Learnable parameter; repeated calls with the same id share one node.
    pub fn param(&mut self, id: ParamId, t: &'a Tensor<T>) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(Op::Param, Cow::Borrowed(t), true);
        self.param_vars.insert(id, v);
        v
    }

    /// Stride-1 cross-correlation. `input` is `[C_in,H,W]` or a batch
    /// `[N,C_in,H,W]`; `kernel` is `[C_out,C_in,kH,kW]`; `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let bs = self.shape(bias).to_vec();
        let (batch, c_in, h, w) = match xs.as_slice() {
            [c, h, w] => (None, *c, *h, *w),
            [n, c, h, w] => (Some(*n), *c, *h, *w),
            _ => return Err(Error::shape("conv2d", "input rank", format!("expected [C,H,W] or [N,C,H,W], got {xs:?}"))),
        };
        let [c_out, kc, kh, kw] = ks[..] else {
            return Err(Error::shape("conv2d", "kernel rank", format!("expected [C_out,C_in,kH,kW], got {ks:?}")));
        };
        if kc != c_in {
            return Err(Error::shape("conv2d", "input channels", format!("input has {c_in}, kernel expects {kc}")));
        }
        if bs != [c_out] {
            return Err(Error::shape("conv2d", "bias length", format!("expected [{c_out}], got {bs:?}")));
        }
        let g = ConvGeometry { c_in, h, w, c_out, kh, kw, padding };
        g.validate()?;
        let n = batch.unwrap_or(1);
        let in_len = c_in * h * w;
        let mut out = Vec::with_capacity(n * c_out * g.out_h() * g.out_w());
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            let b = self.value(bias).data();
            for i in 0..n {
                out.extend(kernels::conv2d_image(&g, &x[i * in_len..(i + 1) * in_len], k, b));
            }
        }
        let mut shape = vec![c_out, g.out_h(), g.out_w()];
        if let Some(n) = batch {
            shape.insert(0, n);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push_owned(Op::Conv2d { input, kernel, bias, geometry: g, batch: n }, value, &[input, kernel, bias]))
    }

    /// 2×2 max pooling over the last two axes of `[C,H,W]` or `[N,C,H,W]`.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 3 || xs.len() > 4 {
            return Err(Error::shape("maxpool2d", "input rank", format!("expected [C,H,W] or [N,C,H,W], got {xs:?}")));
        }
        let r = xs.len();
        let (h, w) = (xs[r - 2], xs[r - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2d", "spatial size", format!("H and W must be even, got {h}x{w}")));
        }
        let planes: usize = xs[..r - 2].iter().product();
        let (vals, arg) = kernels::maxpool2x2_image(planes, h, w, self.value(input).data());
        let arg = self.decide(arg)?;
        let vals = if self.replay.is_some() {
            let x = self.value(input).data();
            arg.iter().map(|&i| x[i as usize]).collect()
        } else {
            vals
        };
        let mut shape = xs.clone();
        shape[r - 2] = h / 2;
        shape[r - 1] = w / 2;
        let value = Tensor::new(shape, vals)?;
        Ok(self.push_owned(Op::MaxPool2d { input, argmax: arg }, value, &[input]))
    }

    /// `weight · input + bias` for `input` of shape `[N_in]` or `[B,N_in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let [n_out, n_in] = ws[..] else {
            return Err(Error::shape("linear", "weight rank", format!("expected [N_out,N_in], got {ws:?}")));
        };
        let (rows, feat) = match xs.as_slice() {
            [f] => (None, *f),
            [b, f] => (Some(*b), *f),
            _ => return Err(Error::shape("linear", "input rank", format!("expected [N] or [B,N], got {xs:?}"))),
        };
        if feat != n_in {
            return Err(Error::shape("linear", "input features", format!("input has {feat}, weight expects {n_in}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [n_out] {
                return Err(Error::shape("linear", "bias length", format!("expected [{n_out}], got {:?}", self.shape(b))));
            }
        }
        let n = rows.unwrap_or(1);
        let mut out = vec![T::zero(); n * n_out];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let bv = bias.map(|b| self.value(b).data());
            for r in 0..n {
                kernels::matvec(wt, n_out, n_in, &x[r * n_in..(r + 1) * n_in], bv, &mut out[r * n_out..(r + 1) * n_out]);
            }
        }
        let shape = match rows {
            Some(b) => vec![b, n_out],
            None => vec![n_out],
        };
        let value = Tensor::new(shape, out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.push_owned(Op::Linear { input, weight, bias }, value, &deps))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(input),
            Activation::Sigmoid => Ok(self.sigmoid(input)),
            Activation::Tanh => Ok(self.tanh(input)),
        }
    }

    /// Elementwise ReLU; the gradient passes only where the input is > 0.
    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let computed: Vec<u32> = self.value(input).data().iter().map(|&v| u32::from(v > T::zero())).collect();
        let mask: Vec<bool> = self.decide(computed)?.into_iter().map(|m| m != 0).collect();
        let x = self.value(input);
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| if m { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push_owned(Op::Relu { input, mask }, value, &[input]))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push_owned(Op::Sigmoid { input }, value, &[input])
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let value = self.value(input).map(T::tanh);
        self.push_owned(Op::Tanh { input }, value, &[input])
    }

    /// Negative log-likelihood of `label` under `softmax(logits)`, computed
    /// through a max-shifted log-sum-exp.
    pub fn log_softmax_nll(&mut self, logits: Var, label: usize) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 1 {
            return Err(Error::shape("log_softmax_nll", "logits rank", format!("expected [K], got {:?}", x.shape())));
        }
        if label >= x.len() {
            return Err(Error::invalid(format!("label {label} out of range for {} classes", x.len())));
        }
        let (lse, probs) = log_sum_exp(x.data());
        let loss = lse - x.data()[label];
        Ok(self.push_owned(Op::LogSoftmaxNll { logits, label, probs }, Tensor::scalar(loss), &[logits]))
    }

    /// `[a; b]` for rank-1 tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || tb.rank() != 1 {
            return Err(Error::shape("concat", "rank", format!("expected rank-1 inputs, got {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let value = Tensor::new(vec![data.len()], data)?;
        Ok(self.push_owned(Op::Concat { a, b }, value, &[a, b]))
    }

    /// Elementwise max over the leading (time) axis of `[T,N]`; ties go to
    /// the earliest step.
    pub fn temporal_max(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [steps, n] = x.shape()[..] else {
            return Err(Error::shape("temporal_max", "rank", format!("expected [T,N], got {:?}", x.shape())));
        };
        if steps == 0 {
            return Err(Error::shape("temporal_max", "time steps", "T must be at least 1"));
        }
        let d = x.data();
        let arg: Vec<u32> = (0..n)
            .map(|j| {
                let mut best = 0;
                for t in 1..steps {
                    if d[t * n + j] > d[best * n + j] {
                        best = t;
                    }
                }
                best as u32
            })
            .collect();
        let arg = self.decide(arg)?;
        let d = self.value(input).data();
        let vals = arg.iter().enumerate().map(|(j, &t)| d[t as usize * n + j]).collect();
        let value = Tensor::new(vec![n], vals)?;
        Ok(self.push_owned(Op::TemporalMax { input, argmax: arg }, value, &[input]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, "operands", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_owned(Op::Add { a, b }, value, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_owned(Op::Mul { a, b }, value, &[a, b]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(input).data() {
            s += v;
        }
        self.push_owned(Op::Sum { input }, Tensor::scalar(s), &[input])
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|v| v * factor);
        self.push_owned(Op::Scale { input, factor }, value, &[input])
    }

    /// Mean over the leading axis of `[T,N]`, invariant to row order.
    pub fn mean_rows(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [steps, n] = x.shape()[..] else {
            return Err(Error::shape("mean_rows", "rank", format!("expected [T,N], got {:?}", x.shape())));
        };
        if steps == 0 {
            return Err(Error::shape("mean_rows", "time steps", "T must be at least 1"));
        }
        let count = T::from_usize(steps).expect("small integer");
        let d = x.data();
        // summing each column in sorted order makes the result independent
        // of the row order, bit for bit
        let mut col = Vec::with_capacity(steps);
        let vals = (0..n)
            .map(|j| {
                col.clear();
                col.extend((0..steps).map(|t| d[t * n + j]));
                col.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                let mut s = T::zero();
                for &v in &col {
                    s += v;
                }
                s / count
            })
            .collect();
        let value = Tensor::new(vec![n], vals)?;
        Ok(self.push_owned(Op::MeanRows { input }, value, &[input]))
    }

    /// Slice `index` of the leading axis.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.value(input);
        if x.rank() == 0 || index >= x.shape()[0] {
            return Err(Error::shape("select", "index", format!("index {index} out of range for {:?}", x.shape())));
        }
        let inner: usize = x.shape()[1..].iter().product();
        let data = x.data()[index * inner..(index + 1) * inner].to_vec();
        let value = Tensor::new(x.shape()[1..].to_vec(), data)?;
        Ok(self.push_owned(Op::Select { input, index }, value, &[input]))
    }

    /// Stacks equal-shape tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::shape("stack", "inputs", "nothing to stack"))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(inputs.len() * self.value(*first).len());
        for &v in inputs {
            if self.shape(v) != inner.as_slice() {
                return Err(Error::shape("stack", "element shape", format!("{:?} vs {inner:?}", self.shape(v))));
            }
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![inputs.len()];
        shape.extend(inner);
        let value = Tensor::new(shape, data)?;
        Ok(self.push_owned(Op::Stack { inputs: inputs.to_vec() }, value, inputs))
    }

    /// Contiguous `[start, start+len)` of a rank-1 tensor.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 1 || start + len > x.len() {
            return Err(Error::shape("slice", "range", format!("[{start}, {}) of {:?}", start + len, x.shape())));
        }
        let value = Tensor::new(vec![len], x.data()[start..start + len].to_vec())?;
        Ok(self.push_owned(Op::Slice { input, start }, value, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshaped(shape.to_vec())?;
        Ok(self.push_owned(Op::Reshape { input }, value, &[input]))
    }

    /// Differentiable [`kernels::temporal_shift`].
    pub fn temporal_shift(&mut self, input: Var, fraction: f64) -> Result<Var> {
        let value = kernels::temporal_shift(self.value(input), fraction)?;
        let (c_fwd, c_bwd) = kernels::shift_channels(self.shape(input)[1], fraction);
        Ok(self.push_owned(Op::TemporalShift { input, c_fwd, c_bwd }, value, &[input]))
    }

    /// Propagates d(loss)/d(node) for every node that depends on a
    /// gradient-requiring leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::shape("backward", "loss", format!("loss must be scalar, got {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape().to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backward_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `buffers`.
    pub fn backward_into(&self, loss: Var, buffers: &mut Params<T>) -> Result<()> {
        self.backward(loss)?.accumulate_into(buffers);
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { input, kernel, bias, geometry, batch } => {
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                let in_len = geometry.c_in * geometry.h * geometry.w;
                let out_len = geometry.c_out * geometry.out_h() * geometry.out_w();
                let mut gi = self.wants(*input).then(|| vec![T::zero(); x.len()]);
                let mut gk = self.wants(*kernel).then(|| vec![T::zero(); k.len()]);
                let mut gb = self.wants(*bias).then(|| vec![T::zero(); geometry.c_out]);
                for i in 0..*batch {
                    kernels::conv2d_image_backward(
                        geometry,
                        &x[i * in_len..(i + 1) * in_len],
                        k,
                        &gd[i * out_len..(i + 1) * out_len],
                        gi.as_mut().map(|v| &mut v[i * in_len..(i + 1) * in_len]),
                        gk.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                }
                if let Some(v) = gi {
                    add_grad(grads, *input, self.value(*input).shape(), v);
                }
                if let Some(v) = gk {
                    add_grad(grads, *kernel, self.value(*kernel).shape(), v);
                }
                if let Some(v) = gb {
                    add_grad(grads, *bias, self.value(*bias).shape(), v);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gi = vec![T::zero(); self.value(*input).len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    gi[src as usize] += gv;
                }
                add_grad(grads, *input, self.value(*input).shape(), gi);
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let ws = self.value(*weight).shape();
                let (n_out, n_in) = (ws[0], ws[1]);
                let rows = x.len() / n_in;
                if self.wants(*input) {
                    let mut gi = vec![T::zero(); x.len()];
                    for r in 0..rows {
                        let gr = &gd[r * n_out..(r + 1) * n_out];
                        let xi = &mut gi[r * n_in..(r + 1) * n_in];
                        for (o, &go) in gr.iter().enumerate() {
                            let row = &w[o * n_in..(o + 1) * n_in];
                            for (dst, &wv) in xi.iter_mut().zip(row) {
                                *dst += wv * go;
                            }
                        }
                    }
                    add_grad(grads, *input, self.value(*input).shape(), gi);
                }
                if self.wants(*weight) {
                    let mut gw = vec![T::zero(); w.len()];
                    for r in 0..rows {
                        let xr = &x[r * n_in..(r + 1) * n_in];
                        for (o, &go) in gd[r * n_out..(r + 1) * n_out].iter().enumerate() {
                            let row = &mut gw[o * n_in..(o + 1) * n_in];
                            for (dst, &xv) in row.iter_mut().zip(xr) {
                                *dst += go * xv;
                            }
                        }
                    }
                    add_grad(grads, *weight, ws, gw);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let mut gb = vec![T::zero(); n_out];
                    for r in 0..rows {
                        for (dst, &go) in gb.iter_mut().zip(&gd[r * n_out..(r + 1) * n_out]) {
                            *dst += go;
                        }
                    }
                    add_grad(grads, b, &[n_out], gb);
                }
            }
            Op::Relu { input, mask } => {
                let gi = gd.iter().zip(mask).map(|(&gv, &m)| if m { gv } else { T::zero() }).collect();
                add_grad(grads, *input, self.value(*input).shape(), gi);
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                let gi = gd.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                add_grad(grads, *input, self.value(*input).shape(), gi);
            }
            Op::Tanh { input } => {
                let y = node.value.data();
                let gi = gd.iter().zip(y).map(|(&gv, &t)| gv * (T::one() - t * t)).collect();
                add_grad(grads, *input, self.value(*input).shape(), gi);
            }
            Op::LogSoftmaxNll { logits, label, probs } => {
                let g0 = gd[0];
                let gi = probs
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| g0 * if k == *label { p - T::one() } else { p })
                    .collect();
                add_grad(grads, *logits, self.value(*logits).shape(), gi);
            }
            Op::Concat { a, b } => {
                let na = self.value(*a).len();
                if self.wants(*a) {
                    add_grad(grads, *a, self.value(*a).shape(), gd[..na].to_vec());
                }
                if self.wants(*b) {
                    add_grad(grads, *b, self.value(*b).shape(), gd[na..].to_vec());
                }
            }
            Op::TemporalMax { input, argmax } => {
                let n = argmax.len();
                let mut gi = vec![T::zero(); self.value(*input).len()];
                for (j, (&t, &gv)) in argmax.iter().zip(gd).enumerate() {
                    gi[t as usize * n + j] += gv;
                }
                add_grad(grads, *input, self.value(*input).shape(), gi);
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_grad(grads, v, g.shape(), gd.to_vec());
                    }
                }
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    add_grad(grads, *a, g.shape(), gd.iter().zip(db).map(|(&x, &y)| x * y).collect());
                }
                if self.wants(*b) {
                    add_grad(grads, *b, g.shape(), gd.iter().zip(da).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Sum { input } => {
                let s = self.value(*input).shape();
                add_grad(grads, *input, s, vec![gd[0]; self.value(*input).len()]);
            }
            Op::Scale { input, factor } => {
                add_grad(grads, *input, g.shape(), gd.iter().map(|&v| v * *factor).collect());
            }
            Op::MeanRows { input } => {
                let s = self.value(*input).shape();
                let count = T::from_usize(s[0]).expect("small integer");
                let mut gi = Vec::with_capacity(s[0] * s[1]);
                for _ in 0..s[0] {
                    gi.extend(gd.iter().map(|&v| v / count));
                }
                add_grad(grads, *input, s, gi);
            }
            Op::Select { input, index } => {
                let s = self.value(*input).shape();
                let inner = gd.len();
                let mut gi = vec![T::zero(); self.value(*input).len()];
                gi[index * inner..(index + 1) * inner].copy_from_slice(gd);
                add_grad(grads, *input, s, gi);
            }
            Op::Stack { inputs } => {
                let inner = gd.len() / inputs.len();
                for (i, &v) in inputs.iter().enumerate() {
                    if self.wants(v) {
                        add_grad(grads, v, self.value(v).shape(), gd[i * inner..(i + 1) * inner].to_vec());
                    }
                }
            }
            Op::Slice { input, start } => {
                let mut gi = vec![T::zero(); self.value(*input).len()];
                gi[*start..*start + gd.len()].copy_from_slice(gd);
                add_grad(grads, *input, self.value(*input).shape(), gi);
            }
            Op::Reshape { input } => {
                add_grad(grads, *input, self.value(*input).shape(), gd.to_vec());
            }
            Op::TemporalShift { input, c_fwd, c_bwd } => {
                let s = g.shape();
                let (steps, c, plane) = (s[0], s[1], s[2] * s[3]);
                let mut gi = vec![T::zero(); gd.len()];
                for t in 0..steps {
                    for ch in 0..c {
                        if let Some(ts) = kernels::shift_source(t, ch, steps, *c_fwd, *c_bwd) {
                            let d = (t * c + ch) * plane;
                            let o = (ts * c + ch) * plane;
                            for k in 0..plane {
                                gi[o + k] += gd[d + k];
                            }
                        }
                    }
                }
                add_grad(grads, *input, s, gi);
            }
        }
    }
}

fn add_grad<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    let incoming = Tensor::new(shape.to_vec(), data).expect("gradient matches value shape");
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&incoming),
        slot @ None => *slot = Some(incoming),
    }
}

/// Returns `(log Σ exp x, softmax x)`.
pub(crate) fn log_sum_exp<T: Scalar>(x: &[T]) -> (T, Vec<T>) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for &v in x {
        s += (v - m).exp();
    }
    let lse = m + s.ln();
    (lse, x.iter().map(|&v| (v - lse).exp()).collect())
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`, if `v` influenced the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter gradient into the same-layout buffer set.
    pub fn accumulate_into(&self, buffers: &mut Params<T>) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                buffers.get_mut(id).add_assign(g);
            }
        }
    }
}
