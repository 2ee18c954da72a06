//! Reverse-mode differentiation over a small closed set of primitives.
//!
//! Loss pipelines are composed by hand into a `Graph`: values are computed
//! eagerly at build time, `backward` then walks the arena in reverse and
//! accumulates per-leaf gradients. There is no dynamic control flow and no
//! higher-order differentiation.
//!
//! Scalar-valued nodes additionally carry an f64 shadow of their value.
//! Reductions already accumulate in f64; keeping the scalar tail of a loss
//! in f64 is what makes central finite differences usable as an oracle at
//! step 1e-3 (an f32-rounded loss would drown small gradient components in
//! cancellation noise).

use crate::error::{Error, Result};

use super::kernels as kn;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// The closed primitive set, as a buildable surface. Loss pipelines are
/// written once against this trait and evaluate either on [`Graph`] (f32
/// storage, differentiable) or on the f64 oracle engine
/// [`Graph64`](super::graph64::Graph64).
pub trait GraphOps {
    type Id: Copy;

    fn leaf(&mut self, value: Tensor) -> Self::Id;
    fn constant(&mut self, value: Tensor) -> Self::Id;
    fn scalar_const(&mut self, value: f64) -> Self::Id;
    fn dims(&self, id: Self::Id) -> &[usize];
    fn scalar_value(&self, id: Self::Id) -> f64;

    fn conv2d(&mut self, x: Self::Id, k: Self::Id, b: Self::Id, stride: usize) -> Result<Self::Id>;
    fn upsample2(&mut self, x: Self::Id) -> Result<Self::Id>;
    fn downsample_avg2(&mut self, x: Self::Id) -> Result<Self::Id>;
    fn gaussian_blur(&mut self, x: Self::Id, taps: &[f32], valid: bool) -> Result<Self::Id>;
    fn hflip(&mut self, x: Self::Id) -> Result<Self::Id>;
    fn add(&mut self, a: Self::Id, b: Self::Id) -> Result<Self::Id>;
    fn sub(&mut self, a: Self::Id, b: Self::Id) -> Result<Self::Id>;
    fn mul(&mut self, a: Self::Id, b: Self::Id) -> Result<Self::Id>;
    fn div(&mut self, a: Self::Id, b: Self::Id) -> Result<Self::Id>;
    fn scalar_mul(&mut self, x: Self::Id, c: f32) -> Self::Id;
    fn scalar_add(&mut self, x: Self::Id, c: f32) -> Self::Id;
    fn tanh(&mut self, x: Self::Id) -> Self::Id;
    fn sigmoid(&mut self, x: Self::Id) -> Self::Id;
    fn abs(&mut self, x: Self::Id) -> Self::Id;
    fn square(&mut self, x: Self::Id) -> Self::Id;
    fn sqrt_eps(&mut self, x: Self::Id) -> Self::Id;
    fn clamp01(&mut self, x: Self::Id) -> Self::Id;
    fn pow_weight(&mut self, x: Self::Id, w: f32) -> Self::Id;
    fn mean_reduce(&mut self, x: Self::Id) -> Self::Id;
    fn sum_reduce(&mut self, x: Self::Id) -> Self::Id;
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Constant,
    Conv2d { stride: usize },
    Upsample2,
    DownsampleAvg2,
    GaussianBlur { taps: Vec<f32>, valid: bool },
    HFlip,
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul(f32),
    ScalarAdd(f32),
    Tanh,
    Sigmoid,
    Abs,
    Square,
    SqrtEps,
    Clamp01,
    PowWeight(f32),
    MeanReduce,
    SumReduce,
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
    value64: Option<f64>,
    needs_grad: bool,
}

/// Per-leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. the node, if the node participates.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar node value in f64 (shadow value when available).
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let n = &self.nodes[id.0];
        n.value64.unwrap_or_else(|| n.value.data()[0] as f64)
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor, value64: Option<f64>) -> NodeId {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        let value64 = match value64 {
            Some(v) => Some(v),
            None if value.is_scalar() => Some(value.data()[0] as f64),
            None => None,
        };
        self.nodes.push(Node { op, parents, value, value64, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value, None)
    }

    /// Non-differentiable input; backward never descends into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, vec![], value, None)
    }

    pub fn scalar_const(&mut self, value: f64) -> NodeId {
        self.push(Op::Constant, vec![], Tensor::scalar(value as f32), Some(value))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let v = kn::conv2d(self.value(x), self.value(k), self.value(b), stride)?;
        Ok(self.push(Op::Conv2d { stride }, vec![x, k, b], v, None))
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = kn::upsample2(self.value(x))?;
        Ok(self.push(Op::Upsample2, vec![x], v, None))
    }

    pub fn downsample_avg2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = kn::downsample_avg2(self.value(x))?;
        Ok(self.push(Op::DownsampleAvg2, vec![x], v, None))
    }

    pub fn gaussian_blur(&mut self, x: NodeId, taps: &[f32], valid: bool) -> Result<NodeId> {
        let v = kn::gaussian_blur(self.value(x), taps, valid)?;
        Ok(self.push(Op::GaussianBlur { taps: taps.to_vec(), valid }, vec![x], v, None))
    }

    pub fn hflip(&mut self, x: NodeId) -> Result<NodeId> {
        let v = kn::hflip(self.value(x))?;
        Ok(self.push(Op::HFlip, vec![x], v, None))
    }

    fn binary(&mut self, op: Op, name: &'static str, a: NodeId, b: NodeId, f: impl Fn(f32, f32) -> f32, f64_: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        kn::binary_check(name, self.value(a), self.value(b))?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if let (Some(va), Some(vb)) = (na.value64, nb.value64) {
            let v = f64_(va, vb);
            return Ok(self.push(op, vec![a, b], Tensor::scalar(v as f32), Some(v)));
        }
        let v = kn::zip(self.value(a), self.value(b), f);
        Ok(self.push(op, vec![a, b], v, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, "div", a, b, |x, y| x / y, |x, y| x / y)
    }

    fn unary(&mut self, op: Op, x: NodeId, f: impl Fn(f32) -> f32, f64_: impl Fn(f64) -> f64) -> NodeId {
        if let Some(vx) = self.nodes[x.0].value64 {
            let v = f64_(vx);
            return self.push(op, vec![x], Tensor::scalar(v as f32), Some(v));
        }
        let v = self.value(x).map(f);
        self.push(op, vec![x], v, None)
    }

    pub fn scalar_mul(&mut self, x: NodeId, c: f32) -> NodeId {
        self.unary(Op::ScalarMul(c), x, |v| c * v, |v| c as f64 * v)
    }

    pub fn scalar_add(&mut self, x: NodeId, c: f32) -> NodeId {
        self.unary(Op::ScalarAdd(c), x, |v| c + v, |v| c as f64 + v)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Tanh, x, |v| v.tanh(), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, x, |v| 1.0 / (1.0 + (-v).exp()), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Abs, x, |v| v.abs(), |v| v.abs())
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Square, x, |v| v * v, |v| v * v)
    }

    /// sqrt(x + 1e-12): keeps L2-norm gradients finite at zero distance.
    pub fn sqrt_eps(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::SqrtEps, x, |v| (v + kn::SQRT_EPS).sqrt(), |v| (v + kn::SQRT_EPS as f64).sqrt())
    }

    pub fn clamp01(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Clamp01, x, |v| v.clamp(0.0, 1.0), |v| v.clamp(0.0, 1.0))
    }

    /// max(x, 0)^w; gradient fixed to 0 for x <= 0.
    pub fn pow_weight(&mut self, x: NodeId, w: f32) -> NodeId {
        self.unary(
            Op::PowWeight(w),
            x,
            |v| if v > 0.0 { v.powf(w) } else { 0.0 },
            |v| if v > 0.0 { v.powf(w as f64) } else { 0.0 },
        )
    }

    pub fn mean_reduce(&mut self, x: NodeId) -> NodeId {
        let v = match self.nodes[x.0].value64 {
            Some(v) => v,
            None => kn::mean_reduce64(self.value(x)),
        };
        self.push(Op::MeanReduce, vec![x], Tensor::scalar(v as f32), Some(v))
    }

    pub fn sum_reduce(&mut self, x: NodeId) -> NodeId {
        let v = match self.nodes[x.0].value64 {
            Some(v) => v,
            None => kn::sum_reduce64(self.value(x)),
        };
        self.push(Op::SumReduce, vec![x], Tensor::scalar(v as f32), Some(v))
    }

    /// Gradient of a scalar-valued root w.r.t. every participating node.
    /// Fan-out accumulates additively.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_node = &self.nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar-valued, got dims {:?}",
                root_node.value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root_node.needs_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(root_node.value.dims(), 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, contrib: Tensor) {
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *e += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |p: &NodeId| self.nodes[p.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Conv2d { stride } => {
                let (x, k, b) = (node.parents[0], node.parents[1], node.parents[2]);
                let need = (needs(&x), needs(&k), needs(&b));
                if need == (false, false, false) {
                    return;
                }
                let (gx, gk, gb) = kn::conv2d_vjp(self.value(x), self.value(k), *stride, g, need);
                if let Some(t) = gx {
                    self.accumulate(grads, x, t);
                }
                if let Some(t) = gk {
                    self.accumulate(grads, k, t);
                }
                if let Some(t) = gb {
                    self.accumulate(grads, b, t);
                }
            }
            Op::Upsample2 => self.unary_back(node, grads, kn::upsample2_vjp(g)),
            Op::DownsampleAvg2 => self.unary_back(node, grads, kn::downsample_avg2_vjp(g)),
            Op::GaussianBlur { taps, valid } => {
                let x = node.parents[0];
                if !needs(&x) {
                    return;
                }
                let t = kn::gaussian_blur_vjp(g, taps, *valid, self.value(x).dims());
                self.accumulate(grads, x, t);
            }
            Op::HFlip => self.unary_back(node, grads, kn::hflip(g).expect("vjp dims")),
            Op::Add => {
                let (a, b) = (node.parents[0], node.parents[1]);
                if needs(&a) {
                    self.accumulate(grads, a, g.clone());
                }
                if needs(&b) {
                    self.accumulate(grads, b, g.clone());
                }
            }
            Op::Sub => {
                let (a, b) = (node.parents[0], node.parents[1]);
                if needs(&a) {
                    self.accumulate(grads, a, g.clone());
                }
                if needs(&b) {
                    self.accumulate(grads, b, g.map(|v| -v));
                }
            }
            Op::Mul => {
                let (a, b) = (node.parents[0], node.parents[1]);
                if needs(&a) {
                    self.accumulate(grads, a, kn::zip(g, self.value(b), |gv, bv| gv * bv));
                }
                if needs(&b) {
                    self.accumulate(grads, b, kn::zip(g, self.value(a), |gv, av| gv * av));
                }
            }
            Op::Div => {
                let (a, b) = (node.parents[0], node.parents[1]);
                if needs(&a) {
                    self.accumulate(grads, a, kn::zip(g, self.value(b), |gv, bv| gv / bv));
                }
                if needs(&b) {
                    // d(a/b)/db = -a/b^2 = -value/b
                    let quot = kn::zip(&node.value, self.value(b), |q, bv| -q / bv);
                    self.accumulate(grads, b, kn::zip(g, &quot, |gv, qv| gv * qv));
                }
            }
            Op::ScalarMul(c) => self.unary_back(node, grads, g.map(|v| c * v)),
            Op::ScalarAdd(_) => self.unary_back(node, grads, g.clone()),
            Op::Tanh => {
                let t = kn::zip(g, &node.value, |gv, y| gv * (1.0 - y * y));
                self.unary_back(node, grads, t);
            }
            Op::Sigmoid => {
                let t = kn::zip(g, &node.value, |gv, y| gv * y * (1.0 - y));
                self.unary_back(node, grads, t);
            }
            Op::Abs => {
                let x = self.value(node.parents[0]);
                let t = kn::zip(g, x, |gv, xv| gv * sign0(xv));
                self.unary_back(node, grads, t);
            }
            Op::Square => {
                let x = self.value(node.parents[0]);
                let t = kn::zip(g, x, |gv, xv| gv * 2.0 * xv);
                self.unary_back(node, grads, t);
            }
            Op::SqrtEps => {
                let t = kn::zip(g, &node.value, |gv, y| gv * 0.5 / y);
                self.unary_back(node, grads, t);
            }
            Op::Clamp01 => {
                // Subgradient fixed: identity strictly inside (0,1), zero outside.
                let x = self.value(node.parents[0]);
                let t = kn::zip(g, x, |gv, xv| if xv > 0.0 && xv < 1.0 { gv } else { 0.0 });
                self.unary_back(node, grads, t);
            }
            Op::PowWeight(w) => {
                let w = *w;
                let x = self.value(node.parents[0]);
                let t = kn::zip(g, x, |gv, xv| if xv > 0.0 { gv * w * xv.powf(w - 1.0) } else { 0.0 });
                self.unary_back(node, grads, t);
            }
            Op::MeanReduce => {
                let x = node.parents[0];
                if !needs(&x) {
                    return;
                }
                let n = self.value(x).numel() as f32;
                let gv = g.data()[0] / n;
                self.accumulate(grads, x, Tensor::full(self.value(x).dims(), gv));
            }
            Op::SumReduce => {
                let x = node.parents[0];
                if !needs(&x) {
                    return;
                }
                let gv = g.data()[0];
                self.accumulate(grads, x, Tensor::full(self.value(x).dims(), gv));
            }
        }
    }

    fn unary_back(&self, node: &Node, grads: &mut [Option<Tensor>], contrib: Tensor) {
        let x = node.parents[0];
        if self.nodes[x.0].needs_grad {
            self.accumulate(grads, x, contrib);
        }
    }
}

impl GraphOps for Graph {
    type Id = NodeId;

    fn leaf(&mut self, value: Tensor) -> NodeId {
        Graph::leaf(self, value)
    }
    fn constant(&mut self, value: Tensor) -> NodeId {
        Graph::constant(self, value)
    }
    fn scalar_const(&mut self, value: f64) -> NodeId {
        Graph::scalar_const(self, value)
    }
    fn dims(&self, id: NodeId) -> &[usize] {
        self.value(id).dims()
    }
    fn scalar_value(&self, id: NodeId) -> f64 {
        Graph::scalar_value(self, id)
    }
    fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        Graph::conv2d(self, x, k, b, stride)
    }
    fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        Graph::upsample2(self, x)
    }
    fn downsample_avg2(&mut self, x: NodeId) -> Result<NodeId> {
        Graph::downsample_avg2(self, x)
    }
    fn gaussian_blur(&mut self, x: NodeId, taps: &[f32], valid: bool) -> Result<NodeId> {
        Graph::gaussian_blur(self, x, taps, valid)
    }
    fn hflip(&mut self, x: NodeId) -> Result<NodeId> {
        Graph::hflip(self, x)
    }
    fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        Graph::add(self, a, b)
    }
    fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        Graph::sub(self, a, b)
    }
    fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        Graph::mul(self, a, b)
    }
    fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        Graph::div(self, a, b)
    }
    fn scalar_mul(&mut self, x: NodeId, c: f32) -> NodeId {
        Graph::scalar_mul(self, x, c)
    }
    fn scalar_add(&mut self, x: NodeId, c: f32) -> NodeId {
        Graph::scalar_add(self, x, c)
    }
    fn tanh(&mut self, x: NodeId) -> NodeId {
        Graph::tanh(self, x)
    }
    fn sigmoid(&mut self, x: NodeId) -> NodeId {
        Graph::sigmoid(self, x)
    }
    fn abs(&mut self, x: NodeId) -> NodeId {
        Graph::abs(self, x)
    }
    fn square(&mut self, x: NodeId) -> NodeId {
        Graph::square(self, x)
    }
    fn sqrt_eps(&mut self, x: NodeId) -> NodeId {
        Graph::sqrt_eps(self, x)
    }
    fn clamp01(&mut self, x: NodeId) -> NodeId {
        Graph::clamp01(self, x)
    }
    fn pow_weight(&mut self, x: NodeId, w: f32) -> NodeId {
        Graph::pow_weight(self, x, w)
    }
    fn mean_reduce(&mut self, x: NodeId) -> NodeId {
        Graph::mean_reduce(self, x)
    }
    fn sum_reduce(&mut self, x: NodeId) -> NodeId {
        Graph::sum_reduce(self, x)
    }
}

fn sign0(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
