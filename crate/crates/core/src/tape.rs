//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] consumes the tape, replays it once in
//! reverse, and writes `d loss / d param` into the [`ParamStore`].
//! One training step owns one tape; tapes are not shared across threads.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::param::{ParamId, ParamStore};
use crate::tensor::{
    conv2d, conv2d_backward, sigmoid, Broadcast, ElementwiseOp, Result, Tensor, TensorError,
};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Relu,
    Square,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Relu => "relu",
            UnaryOp::Square => "square",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            UnaryOp::Neg => -v,
            UnaryOp::Exp => v.exp(),
            UnaryOp::Log => v.ln(),
            UnaryOp::Sqrt => v.sqrt(),
            UnaryOp::Sigmoid => sigmoid(v),
            UnaryOp::Relu => v.max(0.0),
            UnaryOp::Square => v * v,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Elementwise { kind: ElementwiseOp, a: usize, b: usize, bc: Broadcast },
    AddScalar(usize),
    MulScalar(usize, f64),
    Unary(UnaryOp, usize),
    Sum { a: usize, axes: Vec<usize> },
    Mean { a: usize, axes: Vec<usize>, count: usize },
    Var { a: usize, axes: Vec<usize>, count: usize },
    Expand(usize),
    Reshape(usize),
    Narrow { a: usize, axis: usize, start: usize },
    Conv2d { input: usize, kernel: usize, stride: usize, pad: usize },
    Matmul(usize, usize),
    LogSoftmaxRows(usize),
    Pick { a: usize, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    tracing: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records operations for [`Tape::backward`].
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), tracing: true }
    }

    /// A tape that only evaluates: nothing is traced and backward is refused.
    pub fn inference() -> Self {
        Tape { tracing: false, ..Self::new() }
    }

    pub fn is_tracing(&self) -> bool {
        self.tracing
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::Usage("variable belongs to a different tape".into()));
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.idx].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        v.tape == self.id && self.nodes[v.idx].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize], name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let needs_grad = self.tracing && inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var { idx: self.nodes.len() - 1, tape: self.id })
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, &[], "constant")
    }

    /// A parameter leaf; its gradient is written back by `backward`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let value = store.get(id).value.clone();
        if !value.all_finite() {
            return Err(TensorError::NonFinite("param"));
        }
        self.nodes.push(Node { value, op: Op::Param(id), needs_grad: self.tracing });
        Ok(Var { idx: self.nodes.len() - 1, tape: self.id })
    }

    fn elementwise_impl(
        &mut self,
        kind: ElementwiseOp,
        a: Var,
        b: Var,
        along: Option<usize>,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let bc = va.broadcast_kind(vb, along)?;
        let out = va.elementwise(kind, vb, bc);
        self.push(out, Op::Elementwise { kind, a: ia, b: ib, bc }, &[ia, ib], "elementwise")
    }

    /// Elementwise op with `b` of equal shape or a single value.
    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        self.elementwise_impl(kind, a, b, None)
    }

    /// Elementwise op with the vector `b` laid along `axis` of `a`.
    pub fn elementwise_along(
        &mut self,
        kind: ElementwiseOp,
        a: Var,
        b: Var,
        axis: usize,
    ) -> Result<Var> {
        self.elementwise_impl(kind, a, b, Some(axis))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| v + c);
        self.push(out, Op::AddScalar(ia), &[ia], "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| v * c);
        self.push(out, Op::MulScalar(ia, c), &[ia], "mul_scalar")
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| op.apply(v));
        self.push(out, Op::Unary(op, ia), &[ia], op.name())
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, a)
    }

    pub fn reduce_sum(&mut self, a: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.reduce_sum(axes, keep_dims)?;
        self.push(out, Op::Sum { a: ia, axes: axes.to_vec() }, &[ia], "reduce_sum")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce_sum(a, &axes, false)
    }

    pub fn reduce_mean(&mut self, a: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let count = v.reduction_count(axes)?;
        let out = v.reduce_mean(axes, keep_dims)?;
        self.push(out, Op::Mean { a: ia, axes: axes.to_vec(), count }, &[ia], "reduce_mean")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce_mean(a, &axes, false)
    }

    /// Population variance over `axes`.
    pub fn reduce_var(&mut self, a: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let count = v.reduction_count(axes)?;
        let out = v.reduce_var(axes, keep_dims)?;
        self.push(out, Op::Var { a: ia, axes: axes.to_vec(), count }, &[ia], "reduce_var")
    }

    /// Stretch size-1 dimensions of `a` to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.expand(shape)?;
        self.push(out, Op::Expand(ia), &[ia], "expand")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.reshape(shape)?;
        self.push(out, Op::Reshape(ia), &[ia], "reshape")
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.narrow(axis, start, len)?;
        self.push(out, Op::Narrow { a: ia, axis, start }, &[ia], "narrow")
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ii, ik) = (self.idx(input)?, self.idx(kernel)?);
        let out = conv2d(&self.nodes[ii].value, &self.nodes[ik].value, stride, pad)?;
        self.push(out, Op::Conv2d { input: ii, kernel: ik, stride, pad }, &[ii, ik], "conv2d")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        self.push(out, Op::Matmul(ia, ib), &[ia, ib], "matmul")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.log_softmax_rows()?;
        self.push(out, Op::LogSoftmaxRows(ia), &[ia], "log_softmax")
    }

    /// `out[i] = a[i, labels[i]]` for a `(n, s)` matrix.
    pub fn pick(&mut self, a: Var, labels: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        if v.rank() != 2 || v.shape()[0] != labels.len() {
            return Err(TensorError::Shape(format!(
                "pick of {} labels from {:?}",
                labels.len(),
                v.shape()
            )));
        }
        let s = v.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= s) {
            return Err(TensorError::Domain(format!("label {bad} out of range for {s} classes")));
        }
        let out = Tensor::vector(labels.iter().enumerate().map(|(i, &l)| v.data()[i * s + l]).collect());
        self.push(out, Op::Pick { a: ia, labels: labels.to_vec() }, &[ia], "pick")
    }

    /// Reverse sweep from the scalar `loss`. Every parameter gradient in
    /// `store` is reset, then the parameters reachable from `loss` receive
    /// `d loss / d param`. The tape is consumed.
    pub fn backward(self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let li = self.idx(loss)?;
        if !self.tracing || !self.nodes[li].needs_grad {
            return Err(TensorError::Usage("backward on a value that was not traced".into()));
        }
        if self.nodes[li].value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; li + 1];
        grads[li] = Some(Tensor::full(self.nodes[li].value.shape(), 1.0));
        let mut param_grads: Vec<(ParamId, Tensor)> = Vec::new();

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let send = |j: usize, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[j].needs_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => param_grads.push((*id, g)),
                Op::Elementwise { kind, a, b, bc } => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    let (ga, gb) = match kind {
                        ElementwiseOp::Add => (g.clone(), g.reduce_to_broadcast(*bc, vb.shape())),
                        ElementwiseOp::Sub => {
                            (g.clone(), g.map(|v| -v).reduce_to_broadcast(*bc, vb.shape()))
                        }
                        ElementwiseOp::Mul => {
                            let ga = g.elementwise(ElementwiseOp::Mul, vb, *bc);
                            let gb = g.zip_map(va, |x, y| x * y)?.reduce_to_broadcast(*bc, vb.shape());
                            (ga, gb)
                        }
                        ElementwiseOp::Div => {
                            let ga = g.elementwise(ElementwiseOp::Div, vb, *bc);
                            let gb = g
                                .zip_map(va, |x, y| -x * y)?
                                .elementwise(ElementwiseOp::Div, vb, *bc)
                                .elementwise(ElementwiseOp::Div, vb, *bc)
                                .reduce_to_broadcast(*bc, vb.shape());
                            (ga, gb)
                        }
                    };
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::AddScalar(a) => send(*a, g, &mut grads),
                Op::MulScalar(a, c) => send(*a, g.map(|v| v * c), &mut grads),
                Op::Unary(op, a) => {
                    let x = &self.nodes[*a].value;
                    let y = &node.value;
                    let ga = match op {
                        UnaryOp::Neg => g.map(|v| -v),
                        UnaryOp::Exp => g.zip_map(y, |gv, yv| gv * yv)?,
                        UnaryOp::Log => g.zip_map(x, |gv, xv| gv / xv)?,
                        UnaryOp::Sqrt => g.zip_map(y, |gv, yv| 0.5 * gv / yv)?,
                        UnaryOp::Sigmoid => g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))?,
                        UnaryOp::Relu => g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })?,
                        UnaryOp::Square => g.zip_map(x, |gv, xv| 2.0 * gv * xv)?,
                    };
                    send(*a, ga, &mut grads);
                }
                Op::Sum { a, axes } => {
                    let x = &self.nodes[*a].value;
                    let ga = g.reshape(&x.reduced_shape(axes, true)?)?.expand(x.shape())?;
                    send(*a, ga, &mut grads);
                }
                Op::Mean { a, axes, count } => {
                    let x = &self.nodes[*a].value;
                    let inv = 1.0 / *count as f64;
                    let ga = g
                        .reshape(&x.reduced_shape(axes, true)?)?
                        .expand(x.shape())?
                        .map(|v| v * inv);
                    send(*a, ga, &mut grads);
                }
                Op::Var { a, axes, count } => {
                    let x = &self.nodes[*a].value;
                    let keep = x.reduced_shape(axes, true)?;
                    let mean = x.reduce_mean(axes, true)?.expand(x.shape())?;
                    let gx = g.reshape(&keep)?.expand(x.shape())?;
                    let scale = 2.0 / *count as f64;
                    let mut ga = gx;
                    ga.data_mut()
                        .iter_mut()
                        .zip(x.data().iter().zip(mean.data()))
                        .for_each(|(gv, (xv, mv))| *gv *= scale * (xv - mv));
                    send(*a, ga, &mut grads);
                }
                Op::Expand(a) => {
                    let ga = g.sum_to(self.nodes[*a].value.shape())?;
                    send(*a, ga, &mut grads);
                }
                Op::Reshape(a) => {
                    let ga = g.reshape(self.nodes[*a].value.shape())?;
                    send(*a, ga, &mut grads);
                }
                Op::Narrow { a, axis, start } => {
                    let ga = g.unnarrow(self.nodes[*a].value.shape(), *axis, *start);
                    send(*a, ga, &mut grads);
                }
                Op::Conv2d { input, kernel, stride, pad } => {
                    let (gi, gk) = conv2d_backward(
                        &self.nodes[*input].value,
                        &self.nodes[*kernel].value,
                        &g,
                        *stride,
                        *pad,
                    )?;
                    send(*input, gi, &mut grads);
                    send(*kernel, gk, &mut grads);
                }
                Op::Matmul(a, b) => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    let ga = g.matmul(&vb.transpose2()?)?;
                    let gb = va.transpose2()?.matmul(&g)?;
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let s = y.shape()[1];
                    let mut ga = g.clone();
                    for (grow, yrow) in ga.data_mut().chunks_mut(s).zip(y.data().chunks(s)) {
                        let total: f64 = grow.iter().sum();
                        grow.iter_mut()
                            .zip(yrow)
                            .for_each(|(gv, yv)| *gv -= yv.exp() * total);
                    }
                    send(*a, ga, &mut grads);
                }
                Op::Pick { a, labels } => {
                    let shape = self.nodes[*a].value.shape();
                    let s = shape[1];
                    let mut ga = Tensor::zeros(shape);
                    for (i, &l) in labels.iter().enumerate() {
                        ga.data_mut()[i * s + l] = g.data()[i];
                    }
                    send(*a, ga, &mut grads);
                }
            }
        }

        store.zero_grad();
        for (id, g) in param_grads {
            if !g.all_finite() {
                return Err(TensorError::NonFinite("backward"));
            }
            let p = store.get_mut(id);
            p.grad.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamKind;

    fn store_with(values: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("x", Tensor::vector(values), ParamKind::Weight).unwrap();
        (s, id)
    }

    #[test]
    fn sum_of_squares_gradient() {
        let (mut s, id) = store_with(vec![1.0, -2.0, 0.5]);
        let mut t = Tape::new();
        let x = t.param(&s, id).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq).unwrap();
        t.backward(loss, &mut s).unwrap();
        assert_eq!(s.get(id).grad.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let (mut s, id) = store_with(vec![3.0, 1.0, 4.0, 1.0]);
        let mut t = Tape::new();
        let x = t.param(&s, id).unwrap();
        let loss = t.mean_all(x).unwrap();
        t.backward(loss, &mut s).unwrap();
        assert_eq!(s.get(id).grad.data(), &[0.25; 4]);
    }

    #[test]
    fn backward_on_constant_is_usage_error() {
        let (mut s, _) = store_with(vec![1.0]);
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(2.0)).unwrap();
        let loss = t.mul_scalar(c, 3.0).unwrap();
        assert!(matches!(t.backward(loss, &mut s), Err(TensorError::Usage(_))));
    }

    #[test]
    fn backward_on_inference_tape_is_usage_error() {
        let (mut s, id) = store_with(vec![1.0]);
        let mut t = Tape::inference();
        let x = t.param(&s, id).unwrap();
        let loss = t.sum_all(x).unwrap();
        assert!(matches!(t.backward(loss, &mut s), Err(TensorError::Usage(_))));
    }

    #[test]
    fn foreign_var_rejected() {
        let (s, id) = store_with(vec![1.0]);
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.param(&s, id).unwrap();
        assert!(matches!(t2.relu(x), Err(TensorError::Usage(_))));
    }

    #[test]
    fn non_finite_is_error() {
        let (s, id) = store_with(vec![0.0]);
        let mut t = Tape::new();
        let x = t.param(&s, id).unwrap();
        assert!(matches!(t.log(x), Err(TensorError::NonFinite("log"))));
    }

    #[test]
    fn shared_node_accumulates_all_consumers() {
        // loss = sum(3x) + sum(x*x)
        let (mut s, id) = store_with(vec![1.0, 2.0]);
        let mut t = Tape::new();
        let x = t.param(&s, id).unwrap();
        let a = t.mul_scalar(x, 3.0).unwrap();
        let b = t.mul(x, x).unwrap();
        let c = t.add(a, b).unwrap();
        let loss = t.sum_all(c).unwrap();
        t.backward(loss, &mut s).unwrap();
        assert_eq!(s.get(id).grad.data(), &[5.0, 7.0]);
    }

    #[test]
    fn pick_rejects_out_of_range_label() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(t.pick(x, &[0, 3]), Err(TensorError::Domain(_))));
    }
}
