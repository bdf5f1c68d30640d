//! Define-by-run reverse-mode differentiation.
//!
//! Every backward rule is written with the same differentiable operations as
//! the forward pass, so a gradient obtained with `create_graph = true` can be
//! differentiated again (needed for the gradient penalty).

use std::cell::RefCell;
use std::sync::Arc;

use super::conv;
use super::tensor::{self, real, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Powf(usize, f64),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Abs(usize),
    SumTo(usize),
    Expand(usize),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Narrow { x: usize, dim: usize, start: usize },
    Embed { x: usize, dim: usize, start: usize },
    Conv { x: usize, w: usize, stride: usize, pad: usize },
    ConvInputGrad { g: usize, w: usize, stride: usize, pad: usize },
    ConvWeightGrad { x: usize, g: usize, stride: usize, pad: usize },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Powf(a, _)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Abs(a)
            | Op::SumTo(a)
            | Op::Expand(a)
            | Op::Reshape(a)
            | Op::Narrow { x: a, .. }
            | Op::Embed { x: a, .. } => vec![a],
            Op::Concat(ref parts, _) => parts.clone(),
            Op::Conv { x, w, .. } => vec![x, w],
            Op::ConvInputGrad { g, w, .. } => vec![g, w],
            Op::ConvWeightGrad { x, g, .. } => vec![x, g],
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. One graph per forward/backward evaluation.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded in a [`Graph`].
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op) -> Var<'_, T> {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Input leaf; `requires_grad` marks it as a differentiation target.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_arc(Arc::new(value), requires_grad)
    }

    pub fn leaf_arc(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(real(v)))
    }

    fn var(&self, id: usize) -> Var<'_, T> {
        Var { graph: self, id }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Concatenation along `dim`.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], dim: usize) -> Result<Var<'g, T>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = tensor::concat(&refs, dim)?;
        Ok(self.push(out, Op::Concat(parts.iter().map(|p| p.id).collect(), dim)))
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// Targets that do not influence `loss` receive zeros. With
    /// `create_graph` the returned gradients are themselves recorded and can
    /// be differentiated; otherwise they are detached constants.
    pub fn grad<'g>(
        &'g self,
        loss: Var<'g, T>,
        wrt: &[Var<'g, T>],
        create_graph: bool,
    ) -> Result<Vec<Var<'g, T>>> {
        let loss_value = loss.value();
        if !loss_value.shape().is_empty() {
            return Err(Error::invalid(format!(
                "grad: loss must be a scalar of shape [], got {:?}",
                loss_value.shape()
            )));
        }
        let top = loss.id;
        let mut needed = vec![false; top + 1];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id <= top {
                    needed[w.id] = nodes[w.id].requires_grad;
                }
            }
            for i in 0..=top {
                if !needed[i] && nodes[i].requires_grad {
                    needed[i] = nodes[i].op.inputs().iter().any(|&j| needed[j]);
                }
            }
        }

        let mut grads: Vec<Option<Var<'g, T>>> = vec![None; top + 1];
        if needed[top] {
            grads[top] = Some(self.constant(Tensor::ones(loss_value.shape())));
        }
        for i in (0..=top).rev() {
            let Some(gv) = grads[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            for (j, gj) in self.backward_rule(i, &op, gv, &needed, create_graph)? {
                grads[j] = Some(match grads[j] {
                    Some(prev) => prev.add(gj)?,
                    None => gj,
                });
            }
        }

        wrt.iter()
            .map(|w| {
                let g = if w.id <= top { grads[w.id] } else { None };
                Ok(match g {
                    Some(g) if create_graph => g,
                    Some(g) => self.leaf_arc(g.value(), false),
                    None => self.constant(Tensor::zeros(w.value().shape())),
                })
            })
            .collect()
    }

    fn backward_rule<'g>(
        &'g self,
        id: usize,
        op: &Op,
        g: Var<'g, T>,
        needed: &[bool],
        create_graph: bool,
    ) -> Result<Vec<(usize, Var<'g, T>)>> {
        // Forward values seen by the rule: live nodes when recording
        // higher-order graphs, detached copies otherwise.
        let inp = |j: usize| -> Var<'g, T> {
            if create_graph {
                self.var(j)
            } else {
                self.leaf_arc(self.value_of(j), false)
            }
        };
        let shape_of = |j: usize| self.value_of(j).shape().to_vec();
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needed[a] {
                    out.push((a, g.sum_to(&shape_of(a))?));
                }
                if needed[b] {
                    out.push((b, g.sum_to(&shape_of(b))?));
                }
            }
            Op::Sub(a, b) => {
                if needed[a] {
                    out.push((a, g.sum_to(&shape_of(a))?));
                }
                if needed[b] {
                    out.push((b, g.sum_to(&shape_of(b))?.neg()));
                }
            }
            Op::Mul(a, b) => {
                if needed[a] {
                    out.push((a, g.mul(inp(b))?.sum_to(&shape_of(a))?));
                }
                if needed[b] {
                    out.push((b, g.mul(inp(a))?.sum_to(&shape_of(b))?));
                }
            }
            Op::Scale(a, c) => out.push((a, g.scale(c))),
            Op::AddScalar(a) => out.push((a, g)),
            Op::Powf(a, p) => {
                let d = inp(a).powf(p - 1.0).scale(p);
                out.push((a, g.mul(d)?));
            }
            Op::LeakyRelu(a, slope) => {
                let s = real::<T>(slope);
                let mask = self.value_of(a).map(|v| if v > T::zero() { T::one() } else { s });
                out.push((a, g.mul(self.constant(mask))?));
            }
            Op::Sigmoid(a) => {
                let y = inp(id);
                let d = y.mul(y.neg().add_scalar(1.0))?;
                out.push((a, g.mul(d)?));
            }
            Op::Tanh(a) => {
                let y = inp(id);
                let d = y.mul(y)?.neg().add_scalar(1.0);
                out.push((a, g.mul(d)?));
            }
            Op::Abs(a) => {
                let sign = self.value_of(a).map(|v| {
                    if v > T::zero() {
                        T::one()
                    } else if v < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
                out.push((a, g.mul(self.constant(sign))?));
            }
            Op::SumTo(a) => out.push((a, g.expand(&shape_of(a))?)),
            Op::Expand(a) => out.push((a, g.sum_to(&shape_of(a))?)),
            Op::Reshape(a) => out.push((a, g.reshape(&shape_of(a))?)),
            Op::Concat(ref parts, dim) => {
                let mut offset = 0;
                for &p in parts {
                    let len = shape_of(p)[dim];
                    if needed[p] {
                        out.push((p, g.narrow(dim, offset, len)?));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, dim, start } => {
                let full = shape_of(x)[dim];
                out.push((x, g.embed(dim, start, full)?));
            }
            Op::Embed { x, dim, start } => {
                let len = shape_of(x)[dim];
                out.push((x, g.narrow(dim, start, len)?));
            }
            Op::Conv { x, w, stride, pad } => {
                if needed[x] {
                    let xs = shape_of(x);
                    out.push((x, g.conv_input_grad(inp(w), stride, pad, (xs[2], xs[3]))?));
                }
                if needed[w] {
                    let ws = shape_of(w);
                    out.push((w, inp(x).conv_weight_grad(g, stride, pad, (ws[2], ws[3]))?));
                }
            }
            Op::ConvInputGrad { g: gy, w, stride, pad } => {
                if needed[gy] {
                    out.push((gy, g.conv2d(inp(w), stride, pad)?));
                }
                if needed[w] {
                    let ws = shape_of(w);
                    out.push((w, g.conv_weight_grad(inp(gy), stride, pad, (ws[2], ws[3]))?));
                }
            }
            Op::ConvWeightGrad { x, g: gy, stride, pad } => {
                if needed[x] {
                    let xs = shape_of(x);
                    out.push((x, inp(gy).conv_input_grad(g, stride, pad, (xs[2], xs[3]))?));
                }
                if needed[gy] {
                    out.push((gy, inp(x).conv2d(g, stride, pad)?));
                }
            }
        }
        Ok(out)
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the recorded history.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.leaf_arc(self.value(), false)
    }

    fn same_graph(&self, other: &Var<'g, T>) {
        assert!(std::ptr::eq(self.graph, other.graph), "operands from different graphs");
    }

    fn unary(&self, value: Tensor<T>, op: Op) -> Var<'g, T> {
        self.graph.push(value, op)
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let v = tensor::broadcast_binary("add", &self.value(), &other.value(), |a, b| a + b)?;
        Ok(self.graph.push(v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let v = tensor::broadcast_binary("sub", &self.value(), &other.value(), |a, b| a - b)?;
        Ok(self.graph.push(v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let v = tensor::broadcast_binary("mul", &self.value(), &other.value(), |a, b| a * b)?;
        Ok(self.graph.push(v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'g, T> {
        let s = real::<T>(c);
        self.unary(self.value().map(|v| v * s), Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'g, T> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g, T> {
        let s = real::<T>(c);
        self.unary(self.value().map(|v| v + s), Op::AddScalar(self.id))
    }

    pub fn powf(&self, p: f64) -> Var<'g, T> {
        let e = real::<T>(p);
        self.unary(self.value().map(|v| v.powf(e)), Op::Powf(self.id, p))
    }

    pub fn square(&self) -> Var<'g, T> {
        self.mul(*self).expect("same shape")
    }

    pub fn sqrt(&self) -> Var<'g, T> {
        self.powf(0.5)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g, T> {
        let s = real::<T>(slope);
        self.unary(
            self.value().map(|v| if v > T::zero() { v } else { v * s }),
            Op::LeakyRelu(self.id, slope),
        )
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.leaky_relu(0.0)
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(
            self.value().map(|v| T::one() / (T::one() + (-v).exp())),
            Op::Sigmoid(self.id),
        )
    }

    pub fn tanh(&self) -> Var<'g, T> {
        self.unary(self.value().map(|v| v.tanh()), Op::Tanh(self.id))
    }

    pub fn abs(&self) -> Var<'g, T> {
        self.unary(self.value().map(|v| v.abs()), Op::Abs(self.id))
    }

    /// Reduces broadcast axes so the result has `shape` (same rank, each axis
    /// equal or 1).
    pub fn sum_to(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        if self.value().shape() == shape {
            return Ok(*self);
        }
        let v = tensor::sum_to(&self.value(), shape)?;
        Ok(self.unary(v, Op::SumTo(self.id)))
    }

    /// Mean over the axes that `shape` collapses to 1.
    pub fn mean_to(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let n_in = self.value().numel();
        let n_out: usize = shape.iter().product();
        Ok(self.sum_to(shape)?.scale(n_out as f64 / n_in as f64))
    }

    pub fn expand(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        if self.value().shape() == shape {
            return Ok(*self);
        }
        let v = tensor::expand(&self.value(), shape)?;
        Ok(self.unary(v, Op::Expand(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Sum of all entries, shape `[]`.
    pub fn sum(&self) -> Var<'g, T> {
        let ones = vec![1; self.value().rank()];
        self.sum_to(&ones)
            .and_then(|s| s.reshape(&[]))
            .expect("full reduction is always valid")
    }

    pub fn mean(&self) -> Var<'g, T> {
        let n = self.value().numel();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let v = tensor::narrow(&self.value(), dim, start, len)?;
        Ok(self.unary(v, Op::Narrow { x: self.id, dim, start }))
    }

    pub fn embed(&self, dim: usize, start: usize, full: usize) -> Result<Var<'g, T>> {
        let v = tensor::embed(&self.value(), dim, start, full)?;
        Ok(self.unary(v, Op::Embed { x: self.id, dim, start }))
    }

    /// Cross-correlation of `self` (`[N,C,H,W]`) with `w` (`[O,C,kh,kw]`).
    pub fn conv2d(&self, w: Var<'g, T>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        self.same_graph(&w);
        let v = conv::conv2d(&self.value(), &w.value(), stride, pad)?;
        Ok(self.graph.push(
            v,
            Op::Conv {
                x: self.id,
                w: w.id,
                stride,
                pad,
            },
        ))
    }

    /// Transposed convolution: `self` is `[N,O,h,w]`, `w` is `[O,C,kh,kw]`,
    /// output `[N,C,out_hw]`.
    pub fn conv_transpose2d(
        &self,
        w: Var<'g, T>,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Result<Var<'g, T>> {
        self.conv_input_grad(w, stride, pad, out_hw)
    }

    fn conv_input_grad(&self, w: Var<'g, T>, stride: usize, pad: usize, in_hw: (usize, usize)) -> Result<Var<'g, T>> {
        self.same_graph(&w);
        let v = conv::conv2d_input_grad(&self.value(), &w.value(), stride, pad, in_hw)?;
        Ok(self.graph.push(
            v,
            Op::ConvInputGrad {
                g: self.id,
                w: w.id,
                stride,
                pad,
            },
        ))
    }

    fn conv_weight_grad(&self, gy: Var<'g, T>, stride: usize, pad: usize, k: (usize, usize)) -> Result<Var<'g, T>> {
        self.same_graph(&gy);
        let v = conv::conv2d_weight_grad(&self.value(), &gy.value(), stride, pad, k)?;
        Ok(self.graph.push(
            v,
            Op::ConvWeightGrad {
                x: self.id,
                g: gy.id,
                stride,
                pad,
            },
        ))
    }
}
