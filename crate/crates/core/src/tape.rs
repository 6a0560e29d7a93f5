//! Reverse-mode differentiation over a per-step operation tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order. [`Tape::backward`] replays the record in reverse from a scalar root
//! and returns one gradient per recorded node. Tapes are rebuilt for every
//! forward pass.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Arguments to `log` are floored here before the logarithm is taken.
pub const LOG_FLOOR: f64 = 1e-12;

/// Sigmoid outputs are kept this far away from 0 and 1.
pub const SIGMOID_MARGIN: f64 = 1e-15;

/// Deliberate backward-pass defects, used to check that the gradient suite
/// detects broken derivatives.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SigmoidGradSign,
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, usize),
    MulConst(usize, f64),
    AddConst(usize),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    Slice(usize, usize),
    Reshape(usize),
    Softmax(usize),
    Max2(usize, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<Fault>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value())
            .finish()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&self, fault: Option<Fault>) {
        self.fault.set(fault);
    }

    /// Distance of the recorded forward pass from the nearest branch switch
    /// of a piecewise op: ReLU and `abs` inputs at zero, ties in `max`.
    #[doc(hidden)]
    pub fn kink_margin(&self) -> f64 {
        let nodes = self.nodes.borrow();
        let mut margin = f64::INFINITY;
        for node in nodes.iter() {
            match node.op {
                Op::Relu(x) | Op::Abs(x) => {
                    for v in nodes[x].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::Max2(a, b) => {
                    margin = margin.min((nodes[a].value.item() - nodes[b].value.item()).abs());
                }
                _ => {}
            }
        }
        margin
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Parameters and constants are both leaves; the caller
    /// decides which gradients it reads back.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(root.tape, self), "root recorded on another tape");
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let fault = self.fault.get();
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &nodes[id];
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&val(b).transpose())?;
                    let gb = val(a).transpose().matmul(&g)?;
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::AddRow(x, b) => {
                    let (rows, cols) = g.dims2();
                    let mut gb = vec![0.0; cols];
                    for r in 0..rows {
                        for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    let gb = Tensor::new(val(b).shape().to_vec(), gb)?;
                    accumulate(&mut grads, x, g);
                    accumulate(&mut grads, b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, b, g.scaled(-1.0));
                    accumulate(&mut grads, a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(val(b), |g, y| g * y);
                    let gb = g.zip_map(val(a), |g, x| g * x);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Scale(x, s) => {
                    let sv = val(s).item();
                    let gs = g
                        .data()
                        .iter()
                        .zip(val(x).data())
                        .map(|(g, x)| g * x)
                        .sum::<f64>();
                    accumulate(&mut grads, x, g.scaled(sv));
                    accumulate(&mut grads, s, Tensor::new(val(s).shape().to_vec(), vec![gs])?);
                }
                Op::MulConst(x, c) => accumulate(&mut grads, x, g.scaled(c)),
                Op::AddConst(x) => accumulate(&mut grads, x, g),
                Op::Relu(x) => {
                    let gx = g.zip_map(val(x), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, x, gx);
                }
                Op::Sigmoid(x) => {
                    let sign = if fault == Some(Fault::SigmoidGradSign) { -1.0 } else { 1.0 };
                    let gx = g.zip_map(&node.value, |g, s| sign * g * s * (1.0 - s));
                    accumulate(&mut grads, x, gx);
                }
                Op::Log(x) => {
                    let gx = g.zip_map(val(x), |g, x| if x > LOG_FLOOR { g / x } else { 0.0 });
                    accumulate(&mut grads, x, gx);
                }
                Op::Abs(x) => {
                    let gx = g.zip_map(val(x), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, x, gx);
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(val(x).shape(), g.item());
                    accumulate(&mut grads, x, gx);
                }
                Op::Mean(x) => {
                    let n = val(x).len() as f64;
                    let gx = Tensor::full(val(x).shape(), g.item() / n);
                    accumulate(&mut grads, x, gx);
                }
                Op::Slice(x, start) => {
                    let mut gx = Tensor::zeros(val(x).shape());
                    gx.data_mut()[start..start + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, x, gx);
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(val(x).shape())?;
                    accumulate(&mut grads, x, gx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let dot: f64 = g.data().iter().zip(y.data()).map(|(g, y)| g * y).sum();
                    let gx = g.zip_map(y, |g, y| y * (g - dot));
                    accumulate(&mut grads, x, gx);
                }
                Op::Max2(a, b) => {
                    if val(a).item() >= val(b).item() {
                        accumulate(&mut grads, a, g);
                    } else {
                        accumulate(&mut grads, b, g);
                    }
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of a backward pass, one per recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zero when `var` does not influence the root.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(&self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let v = f(&self.value());
        self.tape.push(v, op)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id)))
    }

    /// Adds a bias vector of length `n` to every row of an `m×n` matrix.
    pub fn add_row(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        let (rows, cols) = x.dims2();
        if b.len() != cols {
            return Err(Error::Dimension {
                op: "add_row",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut out = x.as_ref().clone();
        for r in 0..rows {
            for (o, bv) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.tape.push(out, Op::AddRow(self.id, bias.id)))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        Ok(self.tape.push(a.zip_map(&b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        Ok(self.tape.push(a.zip_map(&b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        Ok(self.tape.push(a.zip_map(&b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    /// Multiplies every entry by a recorded scalar.
    pub fn scale(&self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        if sv.len() != 1 {
            return Err(Error::Dimension {
                op: "scale",
                left: self.shape(),
                right: sv.shape().to_vec(),
            });
        }
        let c = sv.item();
        Ok(self.tape.push(self.value().scaled(c), Op::Scale(self.id, s.id)))
    }

    pub fn mul_const(&self, c: f64) -> Var<'t> {
        self.unary(Op::MulConst(self.id, c), |x| x.scaled(c))
    }

    pub fn add_const(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddConst(self.id), |x| x.map(|v| v + c))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.map(crate::tensor::relu))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |x| x.map(sigmoid))
    }

    /// Natural log with the argument floored at [`LOG_FLOOR`].
    pub fn log(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), |x| x.map(|v| v.max(LOG_FLOOR).ln()))
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs(self.id), |x| x.map(f64::abs))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |x| Tensor::scalar(x.sum()))
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |x| Tensor::scalar(x.sum() / x.len() as f64))
    }

    /// Contiguous flat range `[start, start + len)` reshaped to `shape`.
    pub fn slice(&self, start: usize, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let len: usize = shape.iter().product();
        if start + len > x.len() {
            return Err(Error::Dimension {
                op: "slice",
                left: x.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let v = Tensor::new(shape.to_vec(), x.data()[start..start + len].to_vec())?;
        Ok(self.tape.push(v, Op::Slice(self.id, start)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.id)))
    }

    /// Softmax over all entries.
    pub fn softmax(&self) -> Var<'t> {
        self.unary(Op::Softmax(self.id), |x| {
            let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e = x.map(|v| (v - max).exp());
            let z = e.sum();
            e.map(|v| v / z)
        })
    }

    /// Larger of two scalars; on a tie the gradient goes to `self`.
    pub fn max(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.len() != 1 || b.len() != 1 {
            return Err(Error::Dimension {
                op: "max",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let v = Tensor::new(a.shape().to_vec(), vec![a.item().max(b.item())])?;
        Ok(self.tape.push(v, Op::Max2(self.id, other.id)))
    }
}
