//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation on a [`Var`] appends a node holding its value and the ids
//! of its inputs. Because inputs always precede a node, append order is a
//! topological order. [`Graph::grad`] walks the tape backwards and expresses
//! each vector-Jacobian product with the same recorded operations, so with
//! `create_graph = true` the returned gradients are ordinary nodes that can be
//! differentiated again (double backprop).
//!
//! ```
//! use dseb_core::{Graph, Tensor};
//!
//! let g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::from_slice(&[2], &[1.0, 2.0]).unwrap());
//! let cube = x.mul(x).unwrap().mul(x).unwrap().sum_all().unwrap();
//! let dx = g.grad(cube, &[x], true).unwrap()[0];
//! let ddx = g.grad(dx.sum_all().unwrap(), &[x], false).unwrap()[0];
//! assert_eq!(ddx.value().data(), &[6.0, 12.0]);
//! ```
//!
//! A graph is single-threaded. Independent graphs may live on different
//! threads; detached [`Tensor`]s move freely between them.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, S),
    Relu(usize),
    /// 0/1 indicator of `x > 0`; treated as a constant under differentiation.
    Step,
    SumAll(usize),
    /// Single-element input repeated over the node's shape.
    Broadcast(usize),
    Reshape(usize),
    Conv {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    ConvInputGrad {
        g: usize,
        w: usize,
        geom: ConvGeom,
    },
    ConvWeightGrad {
        x: usize,
        g: usize,
        geom: ConvGeom,
    },
    AvgDown(usize, usize),
    UpSpread(usize, usize),
    MatVec(usize, usize),
    MatVecT(usize, usize),
    Outer(usize, usize),
    ChannelSum(usize),
    BroadcastChannel(usize),
}

impl<S> Op<S> {
    /// Inputs through which gradients flow.
    fn diff_inputs(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf | Step => [None, None],
            Neg(a) | Scale(a, _) | Relu(a) | SumAll(a) | Broadcast(a) | Reshape(a)
            | AvgDown(a, _) | UpSpread(a, _) | ChannelSum(a) | BroadcastChannel(a) => {
                [Some(a), None]
            }
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatVec(a, b) | MatVecT(a, b) | Outer(a, b) => {
                [Some(a), Some(b)]
            }
            Conv { x, w, .. } => [Some(x), Some(w)],
            ConvInputGrad { g, w, .. } => [Some(g), Some(w)],
            ConvWeightGrad { x, g, .. } => [Some(x), Some(g)],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Neg(..) => "neg",
            Scale(..) => "scale",
            Relu(..) => "relu",
            Step => "relu_step",
            SumAll(..) => "sum_all",
            Broadcast(..) => "broadcast",
            Reshape(..) => "reshape",
            Conv { .. } => "conv2d",
            ConvInputGrad { .. } => "conv2d_input_grad",
            ConvWeightGrad { .. } => "conv2d_weight_grad",
            AvgDown(..) => "avg_downsample",
            UpSpread(..) => "upsample_spread",
            MatVec(..) => "matvec",
            MatVecT(..) => "matvec_t",
            Outer(..) => "outer",
            ChannelSum(..) => "channel_sum",
            BroadcastChannel(..) => "broadcast_channel",
        }
    }
}

struct Node<S> {
    value: Rc<Tensor<S>>,
    op: Op<S>,
}

pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> fmt::Debug for Graph<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, S: Scalar> {
    graph: &'g Graph<S>,
    id: usize,
}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

impl<S: Scalar> Graph<S> {
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

    /// Records an input tensor with no provenance.
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Drops every node recorded at or after `mark` (a previous [`len`]).
    /// Vars pointing past the mark become invalid.
    ///
    /// [`len`]: Graph::len
    pub fn truncate(&self, mark: usize) {
        self.nodes.borrow_mut().truncate(mark);
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_, S> {
        Var { graph: self, id }
    }

    fn push(&self, op: Op<S>, value: Tensor<S>) -> Result<Var<'_, S>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    /// Smallest `|pre-activation|` over every recorded ReLU input, or `None`
    /// when no ReLU has been recorded. Used to keep finite-difference checks
    /// away from kinks.
    pub fn relu_margin(&self) -> Option<S> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(
                    nodes[a]
                        .value
                        .data()
                        .iter()
                        .fold(S::infinity(), |m, v| m.min(v.abs())),
                ),
                _ => None,
            })
            .reduce(|a, b| a.min(b))
    }

    /// Sign of every recorded ReLU input, in tape order. Two evaluations with
    /// equal patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for n in nodes.iter() {
            if let Op::Relu(a) = n.op {
                out.extend(nodes[a].value.data().iter().map(|&v| v > S::zero()));
            }
        }
        out
    }

    /// Reverse-mode gradients of a single-element `output` with respect to
    /// each of `wrt`. Tensors that do not influence `output` get zeros.
    ///
    /// With `create_graph` the backward computation stays on the tape and
    /// the results can be differentiated further. Otherwise the backward
    /// nodes are discarded and the results are fresh leaves.
    pub fn grad<'g>(
        &'g self,
        output: Var<'g, S>,
        wrt: &[Var<'g, S>],
        create_graph: bool,
    ) -> Result<Vec<Var<'g, S>>> {
        let out = output.id;
        let out_value = self.value_of(out);
        if !out_value.is_scalar() {
            return Err(Error::NotScalar {
                shape: out_value.shape().to_vec(),
            });
        }
        let mark = self.len();

        let mut needed = vec![false; out + 1];
        for w in wrt {
            if w.id <= out {
                needed[w.id] = true;
            }
        }
        let ops: Vec<Op<S>> = self.nodes.borrow()[..=out]
            .iter()
            .map(|n| n.op.clone())
            .collect();
        for (i, op) in ops.iter().enumerate() {
            if !needed[i] {
                needed[i] = op.diff_inputs().iter().flatten().any(|&j| needed[j]);
            }
        }

        let mut adjoint: Vec<Option<usize>> = vec![None; out + 1];
        if needed[out] {
            adjoint[out] = Some(self.leaf(Tensor::ones(out_value.shape())).id);
        }
        for i in (0..=out).rev() {
            let Some(g) = adjoint[i] else { continue };
            if matches!(ops[i], Op::Leaf) {
                continue;
            }
            let contributions = self.vjp(i, &ops[i], self.var(g), &needed)?;
            for (j, c) in contributions {
                adjoint[j] = Some(match adjoint[j] {
                    Some(prev) => self.var(prev).add(c)?.id,
                    None => c.id,
                });
            }
        }

        let grads: Vec<Var<'g, S>> = wrt
            .iter()
            .map(|w| match adjoint.get(w.id).copied().flatten() {
                Some(id) => self.var(id),
                None => self.leaf(Tensor::zeros(w.value().shape())),
            })
            .collect();
        if create_graph {
            return Ok(grads);
        }
        let values: Vec<Tensor<S>> = grads.iter().map(|g| (*g.value()).clone()).collect();
        self.truncate(mark);
        Ok(values.into_iter().map(|v| self.leaf(v)).collect())
    }

    /// Vector-Jacobian products of node `i` for every needed input.
    fn vjp<'g>(
        &'g self,
        i: usize,
        op: &Op<S>,
        gy: Var<'g, S>,
        needed: &[bool],
    ) -> Result<Vec<(usize, Var<'g, S>)>> {
        let v = |id: usize| self.var(id);
        let shape_of = |id: usize| self.value_of(id).shape().to_vec();
        let hw_of = |id: usize| {
            let t = self.value_of(id);
            let s = t.shape();
            (s[s.len() - 2], s[s.len() - 1])
        };
        let mut out = Vec::with_capacity(2);
        let mut emit = |j: usize, f: &dyn Fn() -> Result<Var<'g, S>>| -> Result<()> {
            if needed[j] {
                out.push((j, f()?));
            }
            Ok(())
        };
        match *op {
            Op::Leaf | Op::Step => {}
            Op::Add(a, b) => {
                emit(a, &|| Ok(gy))?;
                emit(b, &|| Ok(gy))?;
            }
            Op::Sub(a, b) => {
                emit(a, &|| Ok(gy))?;
                emit(b, &|| gy.neg())?;
            }
            Op::Mul(a, b) => {
                emit(a, &|| gy.mul(v(b)))?;
                emit(b, &|| gy.mul(v(a)))?;
            }
            Op::Neg(a) => emit(a, &|| gy.neg())?,
            Op::Scale(a, c) => emit(a, &|| gy.scale(c))?,
            Op::Relu(a) => emit(a, &|| gy.mul(v(a).step()?))?,
            Op::SumAll(a) => emit(a, &|| gy.broadcast_to(&shape_of(a)))?,
            Op::Broadcast(a) => emit(a, &|| gy.sum_all()?.reshape(&shape_of(a)))?,
            Op::Reshape(a) => emit(a, &|| gy.reshape(&shape_of(a)))?,
            Op::Conv { x, w, geom } => {
                emit(x, &|| gy.conv2d_input_grad(v(w), geom, hw_of(x)))?;
                emit(w, &|| v(x).conv2d_weight_grad(gy, geom, hw_of(w)))?;
            }
            Op::ConvInputGrad { g, w, geom } => {
                emit(g, &|| gy.conv2d(v(w), geom))?;
                emit(w, &|| gy.conv2d_weight_grad(v(g), geom, hw_of(w)))?;
            }
            Op::ConvWeightGrad { x, g, geom } => {
                emit(x, &|| v(g).conv2d_input_grad(gy, geom, hw_of(x)))?;
                emit(g, &|| v(x).conv2d(gy, geom))?;
            }
            Op::AvgDown(a, f) => emit(a, &|| gy.upsample_spread(f))?,
            Op::UpSpread(a, f) => emit(a, &|| gy.avg_downsample(f))?,
            Op::MatVec(w, x) => {
                emit(w, &|| gy.outer(v(x)))?;
                emit(x, &|| v(w).matvec_t(gy)?.reshape(&shape_of(x)))?;
            }
            Op::MatVecT(w, g) => {
                emit(w, &|| v(g).outer(gy))?;
                emit(g, &|| v(w).matvec(gy)?.reshape(&shape_of(g)))?;
            }
            Op::Outer(a, b) => {
                emit(a, &|| gy.matvec(v(b))?.reshape(&shape_of(a)))?;
                emit(b, &|| gy.matvec_t(v(a))?.reshape(&shape_of(b)))?;
            }
            Op::ChannelSum(a) => emit(a, &|| gy.broadcast_channel(&shape_of(a)))?,
            Op::BroadcastChannel(b) => emit(b, &|| gy.channel_sum()?.reshape(&shape_of(b)))?,
        }
        debug_assert!(i < needed.len());
        Ok(out)
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The value of a single-element node.
    pub fn item(&self) -> Option<S> {
        self.value().item()
    }

    fn same_graph(&self, other: &Var<'g, S>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }

    fn binary(
        self,
        other: Var<'g, S>,
        op: Op<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<Var<'g, S>> {
        self.same_graph(&other);
        let value = self.value().zip_map(&other.value(), op.name(), f)?;
        self.graph.push(op, value)
    }

    pub fn add(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn neg(self) -> Result<Var<'g, S>> {
        let value = self.value().map(|a| -a);
        self.graph.push(Op::Neg(self.id), value)
    }

    pub fn scale(self, c: S) -> Result<Var<'g, S>> {
        let value = self.value().map(|a| a * c);
        self.graph.push(Op::Scale(self.id, c), value)
    }

    /// `max(0, x)`. The subgradient at 0 is 0, and the second derivative is
    /// taken to be 0 everywhere.
    pub fn relu(self) -> Result<Var<'g, S>> {
        let value = self.value().map(|a| if a > S::zero() { a } else { S::zero() });
        self.graph.push(Op::Relu(self.id), value)
    }

    fn step(self) -> Result<Var<'g, S>> {
        let value = self
            .value()
            .map(|a| if a > S::zero() { S::one() } else { S::zero() });
        self.graph.push(Op::Step, value)
    }

    pub fn sum_all(self) -> Result<Var<'g, S>> {
        let value = Tensor::scalar(self.value().sum());
        self.graph.push(Op::SumAll(self.id), value)
    }

    /// Repeats a single-element node over `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g, S>> {
        let v = self.value();
        let Some(item) = v.item() else {
            return Err(Error::shape(
                "broadcast",
                format!("source {:?} is not single-element", v.shape()),
            ));
        };
        self.graph
            .push(Op::Broadcast(self.id), Tensor::full(shape, item))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, S>> {
        let v = self.value();
        if v.shape() == shape {
            return Ok(self);
        }
        let value = v.reshape(shape)?;
        self.graph.push(Op::Reshape(self.id), value)
    }

    /// Cross-correlation without bias.
    pub fn conv2d(self, weight: Var<'g, S>, geom: ConvGeom) -> Result<Var<'g, S>> {
        self.same_graph(&weight);
        let value = kernels::conv2d(&self.value(), &weight.value(), geom)?;
        self.graph.push(
            Op::Conv {
                x: self.id,
                w: weight.id,
                geom,
            },
            value,
        )
    }

    /// Convolution with per-output-channel bias, zero padding.
    pub fn conv2d_bias(
        self,
        weight: Var<'g, S>,
        bias: Var<'g, S>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g, S>> {
        let out = self.conv2d(weight, ConvGeom::new(stride, padding)?)?;
        out.add_channel_bias(bias)
    }

    fn conv2d_input_grad(
        self,
        weight: Var<'g, S>,
        geom: ConvGeom,
        input_hw: (usize, usize),
    ) -> Result<Var<'g, S>> {
        let value = kernels::conv2d_input_grad(&self.value(), &weight.value(), geom, input_hw)?;
        self.graph.push(
            Op::ConvInputGrad {
                g: self.id,
                w: weight.id,
                geom,
            },
            value,
        )
    }

    fn conv2d_weight_grad(
        self,
        g: Var<'g, S>,
        geom: ConvGeom,
        kernel_hw: (usize, usize),
    ) -> Result<Var<'g, S>> {
        let value = kernels::conv2d_weight_grad(&self.value(), &g.value(), geom, kernel_hw)?;
        self.graph.push(
            Op::ConvWeightGrad {
                x: self.id,
                g: g.id,
                geom,
            },
            value,
        )
    }

    pub fn avg_downsample(self, factor: usize) -> Result<Var<'g, S>> {
        let value = kernels::avg_downsample(&self.value(), factor)?;
        if factor == 1 {
            return Ok(self);
        }
        self.graph.push(Op::AvgDown(self.id, factor), value)
    }

    fn upsample_spread(self, factor: usize) -> Result<Var<'g, S>> {
        if factor == 1 {
            return Ok(self);
        }
        let value = kernels::upsample_spread(&self.value(), factor)?;
        self.graph.push(Op::UpSpread(self.id, factor), value)
    }

    /// `self · x` for a matrix `self`; `x` is read flattened.
    pub fn matvec(self, x: Var<'g, S>) -> Result<Var<'g, S>> {
        self.same_graph(&x);
        let value = kernels::matvec(&self.value(), &x.value())?;
        self.graph.push(Op::MatVec(self.id, x.id), value)
    }

    fn matvec_t(self, g: Var<'g, S>) -> Result<Var<'g, S>> {
        let value = kernels::matvec_t(&self.value(), &g.value())?;
        self.graph.push(Op::MatVecT(self.id, g.id), value)
    }

    fn outer(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        let value = kernels::outer(&self.value(), &other.value());
        self.graph.push(Op::Outer(self.id, other.id), value)
    }

    /// `weight · flatten(self) + bias`.
    pub fn fully_connected(self, weight: Var<'g, S>, bias: Var<'g, S>) -> Result<Var<'g, S>> {
        weight.matvec(self)?.add(bias)
    }

    fn channel_sum(self) -> Result<Var<'g, S>> {
        let value = kernels::channel_sum(&self.value())?;
        self.graph.push(Op::ChannelSum(self.id), value)
    }

    fn broadcast_channel(self, shape: &[usize]) -> Result<Var<'g, S>> {
        let value = kernels::broadcast_channel(&self.value(), shape)?;
        self.graph.push(Op::BroadcastChannel(self.id), value)
    }

    /// Adds `bias[c]` to every element of channel `c` of an `N×C×H×W` node.
    pub fn add_channel_bias(self, bias: Var<'g, S>) -> Result<Var<'g, S>> {
        self.same_graph(&bias);
        let shape = self.shape();
        self.add(bias.broadcast_channel(&shape)?)
    }
}
