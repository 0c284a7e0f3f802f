//! Reverse-mode differentiation over an append-only tape.
//!
//! Every primitive records a node holding its output value. Gradients are
//! themselves built out of recorded primitives, so [`Tape::grad`] returns
//! variables that can be differentiated again. The gradient penalty relies on
//! this to push a loss on input-gradient norms back into the parameters.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::tensor::{gemm, Result, Tensor, TensorError};

/// Position of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Param,
    Constant,
    MatMul { trans_a: bool, trans_b: bool },
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    Scale(f64),
    AddScalar(f64),
    Square,
    Sqrt,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Softplus,
    Sum,
    Mean,
    SumRows,
    SumCols,
    BroadcastRows(usize),
    BroadcastCols(usize),
    Expand(Vec<usize>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    inputs: [usize; 2],
    arity: usize,
}

/// Append-only record of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value())
    }
}

/// `dLoss/dParam` for every parameter leaf of a tape.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_node: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_node.get(&var.node_id())
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.by_node.iter()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that [`Tape::backward`] reports a gradient for.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Param, &[])
    }

    /// Leaf treated as data; differentiable through [`Tape::grad`] only when
    /// explicitly requested.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Constant, &[])
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Rc<Tensor>, op: Op, inputs: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let mut ins = [usize::MAX; 2];
        ins[..inputs.len()].copy_from_slice(inputs);
        nodes.push(Node {
            value,
            op,
            inputs: ins,
            arity: inputs.len(),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn record(&self, op: Op, inputs: &[usize], value: Tensor) -> Result<Var<'_>> {
        if let Some((index, v)) = value.first_non_finite() {
            return Err(TensorError::NonFinite {
                op: op_name(&op),
                index,
                value: v,
            });
        }
        Ok(self.push(Rc::new(value), op, inputs))
    }

    /// Gradient of `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let params: Vec<Var<'_>> = {
            let nodes = self.nodes.borrow();
            (0..=loss.id)
                .filter(|&i| nodes[i].op == Op::Param)
                .map(|id| Var { tape: self, id })
                .collect()
        };
        let grads = self.grad(loss, &params)?;
        Ok(Gradients {
            by_node: params
                .iter()
                .zip(grads)
                .map(|(p, g)| (p.node_id(), (*g.value()).clone()))
                .collect(),
        })
    }

    /// Gradients of `loss` with respect to `wrt`, recorded on this tape so
    /// they can be differentiated again. Unreachable inputs get zeros.
    pub fn grad<'t>(&'t self, loss: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        self.check_same(loss);
        let loss_shape = loss.value().shape().to_vec();
        if loss.value().len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let end = loss.id + 1;
        let mut needed = vec![false; end];
        for w in wrt {
            self.check_same(*w);
            if w.id < end {
                needed[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..end {
                let n = &nodes[i];
                if n.inputs[..n.arity].iter().any(|&j| needed[j]) {
                    needed[i] = true;
                }
            }
        }

        let mut grads: Vec<Option<Var<'t>>> = vec![None; end];
        if needed[loss.id] {
            grads[loss.id] = Some(self.constant(Tensor::full(&loss_shape, 1.0)));
        }
        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            if !needed[i] {
                continue;
            }
            let (op, inputs, arity) = {
                let n = &self.nodes.borrow()[i];
                (n.op.clone(), n.inputs, n.arity)
            };
            if arity == 0 {
                continue;
            }
            let out = Var { tape: self, id: i };
            let x = Var {
                tape: self,
                id: inputs[0],
            };
            let y = Var {
                tape: self,
                id: inputs[1.min(arity - 1)],
            };
            let want_x = needed[inputs[0]];
            let want_y = arity == 2 && needed[inputs[1]];
            let (gx, gy) = self.local_grads(&op, g, x, y, out, want_x, want_y)?;
            for (input, contrib) in [(inputs[0], gx), (inputs[1], gy)] {
                if let Some(c) = contrib {
                    grads[input] = Some(match grads[input] {
                        Some(acc) => acc.add(c)?,
                        None => c,
                    });
                }
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => Ok(g),
                None => Ok(self.constant(Tensor::zeros(w.value().shape()))),
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn local_grads<'t>(
        &'t self,
        op: &Op,
        g: Var<'t>,
        x: Var<'t>,
        y: Var<'t>,
        out: Var<'t>,
        want_x: bool,
        want_y: bool,
    ) -> Result<(Option<Var<'t>>, Option<Var<'t>>)> {
        let mut gx = None;
        let mut gy = None;
        match *op {
            Op::Param | Op::Constant => {}
            Op::MatMul { trans_a, trans_b } => {
                if want_x {
                    gx = Some(if trans_a {
                        y.matmul_t(g, trans_b, true)?
                    } else {
                        g.matmul_t(y, false, !trans_b)?
                    });
                }
                if want_y {
                    gy = Some(if trans_b {
                        g.matmul_t(x, true, trans_a)?
                    } else {
                        x.matmul_t(g, !trans_a, false)?
                    });
                }
            }
            Op::Add => {
                gx = want_x.then_some(g);
                gy = want_y.then_some(g);
            }
            Op::Sub => {
                gx = want_x.then_some(g);
                if want_y {
                    gy = Some(g.scale(-1.0)?);
                }
            }
            Op::Mul => {
                if want_x {
                    gx = Some(g.mul(y)?);
                }
                if want_y {
                    gy = Some(g.mul(x)?);
                }
            }
            Op::Div => {
                if want_x {
                    gx = Some(g.div(y)?);
                }
                if want_y {
                    gy = Some(g.mul(out)?.div(y)?.scale(-1.0)?);
                }
            }
            Op::AddRow => {
                gx = want_x.then_some(g);
                if want_y {
                    gy = Some(g.sum_rows()?);
                }
            }
            Op::Scale(k) => gx = Some(g.scale(k)?),
            Op::AddScalar(_) => gx = Some(g),
            Op::Square => gx = Some(g.mul(x)?.scale(2.0)?),
            Op::Sqrt => gx = Some(g.div(out)?.scale(0.5)?),
            Op::Exp => gx = Some(g.mul(out)?),
            Op::Log => gx = Some(g.div(x)?),
            Op::Sigmoid => {
                let slope = out.mul(out.scale(-1.0)?.add_scalar(1.0)?)?;
                gx = Some(g.mul(slope)?);
            }
            Op::Tanh => {
                let slope = out.square()?.scale(-1.0)?.add_scalar(1.0)?;
                gx = Some(g.mul(slope)?);
            }
            Op::Relu => {
                let mask = self.constant(x.value().map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                gx = Some(g.mul(mask)?);
            }
            Op::LeakyRelu(slope) => {
                let mask = self.constant(x.value().map(|v| if v > 0.0 { 1.0 } else { slope }));
                gx = Some(g.mul(mask)?);
            }
            Op::Softplus => gx = Some(g.mul(x.sigmoid()?)?),
            Op::Sum => gx = Some(g.expand(x.value().shape())?),
            Op::Mean => {
                let n = x.value().len() as f64;
                gx = Some(g.expand(x.value().shape())?.scale(1.0 / n)?);
            }
            Op::SumRows => gx = Some(g.broadcast_rows(x.value().rows())?),
            Op::SumCols => gx = Some(g.broadcast_cols(x.value().cols())?),
            Op::BroadcastRows(_) => gx = Some(g.sum_rows()?),
            Op::BroadcastCols(_) => gx = Some(g.sum_cols()?),
            Op::Expand(_) => gx = Some(g.sum()?),
        }
        Ok((gx, gy))
    }

    fn check_same(&self, v: Var<'_>) {
        assert!(
            std::ptr::eq(self, v.tape),
            "variable recorded on a different tape"
        );
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Param => "param",
        Op::Constant => "constant",
        Op::MatMul { .. } => "matmul",
        Op::Add => "add",
        Op::Sub => "sub",
        Op::Mul => "mul",
        Op::Div => "div",
        Op::AddRow => "add_row",
        Op::Scale(_) => "scale",
        Op::AddScalar(_) => "add_scalar",
        Op::Square => "square",
        Op::Sqrt => "sqrt",
        Op::Exp => "exp",
        Op::Log => "log",
        Op::Sigmoid => "sigmoid",
        Op::Tanh => "tanh",
        Op::Relu => "relu",
        Op::LeakyRelu(_) => "leaky_relu",
        Op::Softplus => "softplus",
        Op::Sum => "sum",
        Op::Mean => "mean",
        Op::SumRows => "sum_rows",
        Op::SumCols => "sum_cols",
        Op::BroadcastRows(_) => "broadcast_rows",
        Op::BroadcastCols(_) => "broadcast_cols",
        Op::Expand(_) => "expand",
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn node_id(&self) -> NodeId {
        NodeId(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let v = self.value().map(f);
        self.tape.record(op, &[self.id], v)
    }

    fn binary(self, rhs: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.tape.check_same(rhs);
        let v = self.value().zip_map(&rhs.value(), op_name(&op), f)?;
        self.tape.record(op, &[self.id, rhs.id], v)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_t(rhs, false, false)
    }

    /// `op(self) · op(rhs)` with optional transposes.
    pub fn matmul_t(self, rhs: Var<'t>, trans_a: bool, trans_b: bool) -> Result<Var<'t>> {
        self.tape.check_same(rhs);
        let v = gemm(&self.value(), trans_a, &rhs.value(), trans_b)?;
        self.tape
            .record(Op::MatMul { trans_a, trans_b }, &[self.id, rhs.id], v)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Add, |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Mul, |a, b| a * b)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Div, |a, b| a / b)
    }

    /// Adds a `[N]` row vector to every row of a `[B, N]` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_same(row);
        let m = self.value();
        let r = row.value();
        let (_, n) = m.dims2("add_row")?;
        if r.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: m.shape().to_vec(),
                rhs: r.shape().to_vec(),
            });
        }
        let data = m
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r.data()).map(|(a, b)| a + b))
            .collect();
        let v = Tensor::new(m.shape(), data)?;
        self.tape.record(Op::AddRow, &[self.id, row.id], v)
    }

    pub fn scale(self, k: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(k), |x| x * k)
    }

    pub fn add_scalar(self, k: f64) -> Result<Var<'t>> {
        self.unary(Op::AddScalar(k), |x| x + k)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(Op::Square, |x| x * x)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some((index, &value)) = v.data().iter().enumerate().find(|(_, &x)| x < 0.0) {
            return Err(TensorError::SqrtDomain { index, value });
        }
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some((index, &value)) = v.data().iter().enumerate().find(|(_, &x)| x <= 0.0) {
            return Err(TensorError::LogDomain { index, value });
        }
        self.unary(Op::Log, f64::ln)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t>> {
        self.unary(Op::LeakyRelu(slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(Op::Softplus, softplus)
    }

    /// Sum of all entries, as a zero-dimensional tensor.
    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().sum();
        self.tape.record(Op::Sum, &[self.id], Tensor::scalar(s))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let s = self.value().mean();
        self.tape.record(Op::Mean, &[self.id], Tensor::scalar(s))
    }

    /// `[B, N] -> [N]`, summing over the batch axis.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let m = self.value();
        let (_, n) = m.dims2("sum_rows")?;
        let mut out = vec![0.0; n];
        for chunk in m.data().chunks(n) {
            for (o, x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        self.tape.record(Op::SumRows, &[self.id], Tensor::vector(out))
    }

    /// `[B, N] -> [B]`, summing each row.
    pub fn sum_cols(self) -> Result<Var<'t>> {
        let m = self.value();
        let (_, n) = m.dims2("sum_cols")?;
        let out = if n == 0 {
            vec![0.0; m.rows()]
        } else {
            m.data().chunks(n).map(|c| c.iter().sum()).collect()
        };
        self.tape.record(Op::SumCols, &[self.id], Tensor::vector(out))
    }

    /// `[N] -> [rows, N]`.
    pub fn broadcast_rows(self, rows: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape().len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![rows],
            });
        }
        let n = v.len();
        let data = v.data().repeat(rows);
        self.tape
            .record(Op::BroadcastRows(rows), &[self.id], Tensor::new(&[rows, n], data)?)
    }

    /// `[B] -> [B, cols]`.
    pub fn broadcast_cols(self, cols: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape().len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_cols",
                lhs: v.shape().to_vec(),
                rhs: vec![cols],
            });
        }
        let b = v.len();
        let data = v
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, cols))
            .collect();
        self.tape
            .record(Op::BroadcastCols(cols), &[self.id], Tensor::new(&[b, cols], data)?)
    }

    /// Repeats a zero-dimensional value over `shape`.
    pub fn expand(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if !v.shape().is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "expand",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor::full(shape, v.item());
        self.tape.record(Op::Expand(shape.to_vec()), &[self.id], t)
    }
}

/// Largest relative discrepancy between tape gradients and central
/// differences, `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|p| tape.param(p.clone())).collect();
        let v = f(&tape, &vars)?.item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                op: "objective",
                index: 0,
                value: v,
            });
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("gradient for every parameter");
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            probe[pi].data_mut()[e] = orig + step;
            let plus = eval(&probe).map_err(|err| TensorError::NonFiniteProbe {
                param: pi,
                entry: e,
                side: "+step",
                source: Box::new(err),
            })?;
            probe[pi].data_mut()[e] = orig - step;
            let minus = eval(&probe).map_err(|err| TensorError::NonFiniteProbe {
                param: pi,
                entry: e,
                side: "-step",
                source: Box::new(err),
            })?;
            probe[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = x.sigmoid().unwrap();
        assert_eq!(y.item(), 0.5);
        let g = tape.backward(y).unwrap();
        assert!((g.get(x).unwrap().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let i = tape.constant(Tensor::identity(2));
        assert_eq!(a.matmul(i).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn leaky_relu_negative_branch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-2.0));
        assert!((x.leaky_relu(0.2).unwrap().item() + 0.4).abs() < 1e-15);
    }

    #[test]
    fn square_derivative() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let loss = x.square().unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.param(Tensor::zeros(&[2, 3]));
        let loss = x.square().unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[2, 3]));
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn log_domain_and_nan_are_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(
            x.log(),
            Err(TensorError::LogDomain { index: 1, .. })
        ));
        let big = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(big.exp(), Err(TensorError::NonFinite { op: "exp", .. })));
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        match a.add(b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn second_derivative_of_cube() {
        // d²/dx² x³ = 6x
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let y = x.square().unwrap().mul(x).unwrap();
        let dy = tape.grad(y, &[x]).unwrap()[0];
        assert!((dy.item() - 3.0 * 1.5 * 1.5).abs() < 1e-12);
        let d2y = tape.grad(dy, &[x]).unwrap()[0];
        assert!((d2y.item() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn grad_check_on_quadratic_and_constant() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = grad_check(|_, p| p[0].mul(p[0])?.sum(), &[x.clone()], 1e-5).unwrap();
        assert!(err < 1e-8);
        let err = grad_check(|t, _| Ok(t.scalar(4.0)), &[x], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_reports_probe_location() {
        // log(x) at x = 1e-6 with step 1e-5 probes a non-positive value.
        let x = Tensor::vector(vec![1.0, 1e-6]);
        let err = grad_check(|_, p| p[0].log()?.sum(), &[x], 1e-5).unwrap_err();
        assert!(matches!(
            err,
            TensorError::NonFiniteProbe { param: 0, entry: 1, side: "-step", .. }
        ));
    }
}
