//! Reverse-mode differentiation tape.
//!
//! The forward pass appends one node per op, in topological order (inputs
//! exist before the ops that use them), so the backward pass is a single
//! reverse sweep visiting each node exactly once. Gradients accumulate with
//! `+` over fan-out. The loss is scalar and parameters are many, which is
//! exactly the shape reverse mode is for.

use super::tensor::{self, real, Scalar, Tensor};
use crate::error::{PtmaError, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Operation kinds. `Scale`/`AddScalar` carry their constant; `Concat` and
/// `Slice` operate on rows (axis 0) of 2-D tensors.
#[derive(Debug, Clone, Copy)]
pub enum Op<T> {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    /// Inputs: logits, additive mask (same shape). Softmax per row.
    SoftmaxMasked,
    LogSoftmax,
    Concat,
    Slice {
        start: usize,
        len: usize,
    },
    Sum,
    Mean,
    Transpose,
    Scale(T),
    AddScalar(T),
}

struct TapeNode<T> {
    op: Op<T>,
    inputs: Vec<usize>,
    value: Tensor<T>,
    requires_grad: bool,
    /// Parameter name when this leaf is a trainable parameter.
    param: Option<&'static str>,
}

/// Gradients for the parameters registered on a tape, in registration order.
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    entries: Vec<(&'static str, Tensor<T>)>,
}

impl<T: Scalar> ParamGrads<T> {
    /// Wraps an explicit gradient list (optimizer tests and hand-built
    /// updates); order must match the parameter registration order.
    pub fn from_entries(entries: Vec<(&'static str, Tensor<T>)>) -> Self {
        ParamGrads { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Tensor<T>)> {
        self.entries.iter().map(|(n, g)| (*n, g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Elementwise `self += other`. Entry lists must line up (same forward
    /// structure on both tapes).
    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        assert_eq!(self.entries.len(), other.entries.len());
        for ((na, ga), (nb, gb)) in self.entries.iter_mut().zip(&other.entries) {
            assert_eq!(*na, *nb, "parameter order differs between tapes");
            let summed = tensor::add(ga, gb).expect("matching gradient shapes");
            *ga = summed;
        }
    }

    /// Elementwise `self *= c`.
    pub fn scale(&mut self, c: T) {
        for (_, g) in self.entries.iter_mut() {
            *g = tensor::scale(g, c);
        }
    }
}

pub struct Tape<T> {
    nodes: Vec<TapeNode<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op: Op<T>,
        inputs: Vec<usize>,
        value: Tensor<T>,
        requires_grad: bool,
        param: Option<&'static str>,
    ) -> VarId {
        let id = self.nodes.len();
        self.nodes.push(TapeNode {
            op,
            inputs,
            value,
            requires_grad,
            param,
        });
        VarId(id)
    }

    /// Constant input: no gradient tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> VarId {
        self.push(Op::Leaf, vec![], value, false, None)
    }

    /// Trainable parameter leaf; `backward` reports its gradient by name.
    pub fn param(&mut self, name: &'static str, value: Tensor<T>) -> VarId {
        self.push(Op::Leaf, vec![], value, true, Some(name))
    }

    pub fn value(&self, v: VarId) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: VarId) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Applies one catalog op, recording it for the backward pass when any
    /// input requires a gradient.
    pub fn apply(&mut self, op: Op<T>, inputs: &[VarId]) -> Result<VarId> {
        let arity_ok = match op {
            Op::Leaf => false,
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::SoftmaxMasked => inputs.len() == 2,
            Op::Concat => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(PtmaError::Shape {
                op: "apply",
                shapes: format!("{:?} with {} inputs", op, inputs.len()),
            });
        }
        let val = |v: &VarId| &self.nodes[v.0].value;
        let value = match op {
            Op::Leaf => unreachable!(),
            Op::MatMul => tensor::matmul(val(&inputs[0]), val(&inputs[1]))?,
            Op::Add => tensor::add(val(&inputs[0]), val(&inputs[1]))?,
            Op::Sub => tensor::sub(val(&inputs[0]), val(&inputs[1]))?,
            Op::Mul => tensor::mul(val(&inputs[0]), val(&inputs[1]))?,
            Op::Sigmoid => tensor::sigmoid(val(&inputs[0])),
            Op::Tanh => tensor::tanh(val(&inputs[0])),
            Op::Relu => tensor::relu(val(&inputs[0])),
            Op::Exp => tensor::exp(val(&inputs[0])),
            Op::Log => tensor::log(val(&inputs[0])),
            Op::SoftmaxMasked => tensor::softmax_masked(val(&inputs[0]), val(&inputs[1]))?,
            Op::LogSoftmax => tensor::log_softmax(val(&inputs[0]))?,
            Op::Concat => {
                let parts: Vec<&Tensor<T>> = inputs.iter().map(val).collect();
                tensor::concat_rows(&parts)?
            }
            Op::Slice { start, len } => tensor::slice_rows(val(&inputs[0]), start, len)?,
            Op::Sum => tensor::sum_all(val(&inputs[0])),
            Op::Mean => tensor::mean_all(val(&inputs[0])),
            Op::Transpose => tensor::transpose(val(&inputs[0]))?,
            Op::Scale(c) => tensor::scale(val(&inputs[0]), c),
            Op::AddScalar(c) => tensor::add_scalar(val(&inputs[0]), c),
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(
            op,
            inputs.iter().map(|v| v.0).collect(),
            value,
            requires_grad,
            None,
        ))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        self.apply(Op::Relu, &[a])
    }
    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        self.apply(Op::Log, &[a])
    }
    pub fn softmax_masked(&mut self, x: VarId, mask: VarId) -> Result<VarId> {
        self.apply(Op::SoftmaxMasked, &[x, mask])
    }
    pub fn log_softmax(&mut self, x: VarId) -> Result<VarId> {
        self.apply(Op::LogSoftmax, &[x])
    }
    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        self.apply(Op::Concat, parts)
    }
    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        self.apply(Op::Slice { start, len }, &[a])
    }
    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        self.apply(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: VarId) -> Result<VarId> {
        self.apply(Op::Mean, &[a])
    }
    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn scale(&mut self, a: VarId, c: T) -> Result<VarId> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: VarId, c: T) -> Result<VarId> {
        self.apply(Op::AddScalar(c), &[a])
    }

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients for
    /// every registered parameter come back in registration order.
    pub fn backward(self, loss: VarId) -> Result<ParamGrads<T>> {
        if self.nodes.is_empty() {
            return Err(PtmaError::numeric("backward on an empty tape"));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(PtmaError::numeric(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                grads[idx] = Some(g); // keep for parameter collection
                continue;
            }
            let input_grads = self.input_grads(idx, &g)?;
            for (&input_idx, ig) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[input_idx].requires_grad {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[input_idx] {
                    Some(acc) => *acc = tensor::add(acc, &ig)?,
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        let mut entries = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(name) = node.param {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                entries.push((name, g));
            }
        }
        Ok(ParamGrads { entries })
    }

    /// Gradient of the node's output w.r.t. each input, given the output
    /// gradient `g`. `None` for inputs that never receive gradient (masks).
    fn input_grads(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let node = &self.nodes[idx];
        let input = |k: usize| &self.nodes[node.inputs[k]].value;
        let out = &node.value;
        let gs = match node.op {
            Op::Leaf => vec![],
            Op::MatMul => {
                let a = input(0);
                let b = input(1);
                let da = tensor::matmul(g, &tensor::transpose(b)?)?;
                let db = tensor::matmul(&tensor::transpose(a)?, g)?;
                vec![Some(da), Some(db)]
            }
            Op::Add => {
                let da = reduce_to_shape(g, input(0).shape())?;
                let db = reduce_to_shape(g, input(1).shape())?;
                vec![Some(da), Some(db)]
            }
            Op::Sub => {
                let da = reduce_to_shape(g, input(0).shape())?;
                let db = reduce_to_shape(&tensor::scale(g, -T::one()), input(1).shape())?;
                vec![Some(da), Some(db)]
            }
            Op::Mul => {
                let a = input(0);
                let b = input(1);
                // broadcast forward first so shapes line up, then reduce back
                let ga = tensor::mul(g, b)?;
                let gb = tensor::mul(g, a)?;
                vec![
                    Some(reduce_to_shape(&ga, a.shape())?),
                    Some(reduce_to_shape(&gb, b.shape())?),
                ]
            }
            Op::Sigmoid => {
                let dx = out.map(|y| y * (T::one() - y));
                vec![Some(tensor::mul(g, &dx)?)]
            }
            Op::Tanh => {
                let dx = out.map(|y| T::one() - y * y);
                vec![Some(tensor::mul(g, &dx)?)]
            }
            Op::Relu => {
                let x = input(0);
                let dx = x.map(|v| if v > T::zero() { T::one() } else { T::zero() });
                vec![Some(tensor::mul(g, &dx)?)]
            }
            Op::Exp => vec![Some(tensor::mul(g, out)?)],
            Op::Log => {
                let x = input(0);
                let inv = x.map(|v| T::one() / v);
                vec![Some(tensor::mul(g, &inv)?)]
            }
            Op::SoftmaxMasked => {
                // dL/dx_ij = s_ij * (g_ij - sum_k g_ik s_ik); masked entries
                // have s = 0 and so get exactly zero gradient. The additive
                // mask input is always a constant, so it gets none.
                let s = out;
                let (m, n) = (s.shape()[0], s.shape()[1]);
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    let srow = s.row(i);
                    let grow = g.row(i);
                    let dot = srow
                        .iter()
                        .zip(grow)
                        .fold(T::zero(), |acc, (&sv, &gv)| acc + sv * gv);
                    for j in 0..n {
                        dx[i * n + j] = srow[j] * (grow[j] - dot);
                    }
                }
                vec![Some(Tensor::new(vec![m, n], dx)?), None]
            }
            Op::LogSoftmax => {
                // dL/dx_ij = g_ij - softmax(x)_ij * sum_k g_ik
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    let grow = g.row(i);
                    let rowsum = grow.iter().fold(T::zero(), |acc, &v| acc + v);
                    for j in 0..n {
                        let s = out.at(i, j).exp();
                        dx[i * n + j] = grow[j] - s * rowsum;
                    }
                }
                vec![Some(Tensor::new(vec![m, n], dx)?)]
            }
            Op::Concat => {
                let mut start = 0;
                let mut parts = Vec::with_capacity(node.inputs.len());
                for k in 0..node.inputs.len() {
                    let rows = input(k).shape()[0];
                    parts.push(Some(tensor::slice_rows(g, start, rows)?));
                    start += rows;
                }
                parts
            }
            Op::Slice { start, len } => {
                let x = input(0);
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let mut dx = vec![T::zero(); m * n];
                dx[start * n..(start + len) * n].copy_from_slice(g.data());
                vec![Some(Tensor::new(vec![m, n], dx)?)]
            }
            Op::Sum => {
                let x = input(0);
                vec![Some(Tensor::filled(x.shape(), g.item()))]
            }
            Op::Mean => {
                let x = input(0);
                let c = g.item() / real::<T>(x.numel() as f64);
                vec![Some(Tensor::filled(x.shape(), c))]
            }
            Op::Transpose => vec![Some(tensor::transpose(g)?)],
            Op::Scale(c) => vec![Some(tensor::scale(g, c))],
            Op::AddScalar(_) => vec![Some(g.clone())],
        };
        Ok(gs)
    }
}

/// Sums a gradient back down to a broadcast input's shape (row broadcast
/// only, mirroring the forward rule).
fn reduce_to_shape<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    // forward broadcast [1, n] -> [m, n]; reduce by summing rows
    let n = shape[1];
    let mut acc = vec![T::zero(); n];
    for row in g.data().chunks(n) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    Tensor::new(shape.to_vec(), acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::NEG_MASK;

    #[test]
    fn linear_map_gradient_is_input() {
        // loss = sum(W x) with x fixed: dL/dW_ij = x_j in every row.
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let x = tape.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gw = grads.get("w").unwrap();
        assert_eq!(gw.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn mean_of_square_single_element() {
        // loss = mean(z^2) with one element z = 3: dL/dz = 2 * 3 = 6.
        let mut tape = Tape::<f64>::new();
        let z = tape.param("z", Tensor::scalar(3.0));
        let sq = tape.mul(z, z).unwrap();
        let loss = tape.mean(sq).unwrap();
        assert_eq!(tape.value(loss).item(), 9.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("z").unwrap().item(), 6.0);
    }

    #[test]
    fn fanout_accumulates() {
        // loss = z + z -> dL/dz = 2
        let mut tape = Tape::<f64>::new();
        let z = tape.param("z", Tensor::scalar(1.5));
        let s = tape.add(z, z).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("z").unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let z = tape.param("z", Tensor::zeros(&[2, 2]));
        let y = tape.sigmoid(z).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn empty_tape_rejected() {
        let tape = Tape::<f64>::new();
        assert!(tape.backward(VarId(0)).is_err());
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let used = tape.param("used", Tensor::scalar(2.0));
        let unused = tape.param("unused", Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let loss = tape.sum(used).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("used").unwrap().item(), 1.0);
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0, 0.0]);
        let _ = unused;
    }

    #[test]
    fn masked_entries_get_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::new(vec![1, 3], vec![0.2, -0.1, 0.4]).unwrap());
        let m = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, NEG_MASK]).unwrap());
        let s = tape.softmax_masked(x, m).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get("x").unwrap();
        // softmax rows sum to 1 regardless of x, so all gradients vanish;
        // more importantly the masked slot is exactly zero.
        assert_eq!(gx.data()[2], 0.0);
    }

    #[test]
    fn zero_function_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let zero = tape.constant(Tensor::zeros(&[2, 2]));
        let y = tape.mul(w, zero).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get("w").unwrap().data().iter().all(|&g| g == 0.0));
    }
}
