//! Define-by-run computation graph over [`Tensor`] values with reverse-mode
//! differentiation.
//!
//! Nodes are appended to an arena in evaluation order, so the arena index
//! order is already topological. A backward pass walks the prefix ending at
//! the root in reverse. In recording mode the pass expresses every chain-rule
//! step as new graph nodes, which makes gradients themselves differentiable
//! (double backprop); the per-op rules are written once and shared by both
//! modes, so the two paths cannot drift apart.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::kernels;
use super::tensor::Tensor;

/// Handle to a node in a [`Graph`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    Const,
    MatVec { w: NodeId, x: NodeId },
    Transpose { a: NodeId },
    Outer { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    ElemMul { a: NodeId, b: NodeId },
    ElemDiv { a: NodeId, b: NodeId },
    Scale { a: NodeId, k: f64 },
    ScalarMul { s: NodeId, a: NodeId },
    Broadcast { s: NodeId },
    Tanh { a: NodeId },
    Log { a: NodeId },
    Sum { a: NodeId },
    NormSq { a: NodeId },
    Pick { a: NodeId, index: usize },
    Softmax { z: NodeId },
    Kl { p: NodeId, q: NodeId },
    CrossEntropy { p: NodeId, class: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Gradient nodes produced by a recording backward pass, keyed by the node
/// they differentiate with respect to.
pub struct RecordedGrads {
    map: HashMap<usize, NodeId>,
}

impl RecordedGrads {
    pub fn get(&self, id: NodeId) -> Option<NodeId> {
        self.map.get(&id.0).copied()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    forward_passes: u64,
    backward_passes: u64,
    has_recorded_backward: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient slot populated by the most recent backward pass; `None` for
    /// nodes the pass did not reach.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient of the last backward root w.r.t. `id`; unreachable nodes
    /// have zero gradient.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        match self.nodes[id.0].grad.as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape())
                .expect("node shapes are valid by construction"),
        }
    }

    /// Forward passes noted by model evaluation (see the vat cost contract).
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes
    }

    pub fn backward_passes(&self) -> u64 {
        self.backward_passes
    }

    pub fn note_forward_pass(&mut self) {
        self.forward_passes += 1;
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value, true)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Param, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value, false)
    }

    /// Constant copy of a node's current value; gradients do not flow into it.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    // ── ops ─────────────────────────────────────────────────────────────

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (wt, xt) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        if wt.shape().len() != 2 || xt.shape().len() != 1 || wt.cols() != xt.len() {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                detail: format!("W {:?} · x {:?}", wt.shape(), xt.shape()),
            });
        }
        let y = kernels::matvec(wt.rows(), wt.cols(), wt.values(), xt.values());
        let value = Tensor::vector(y)?;
        Ok(self.push_derived(Op::MatVec { w, x }, value, &[w, x]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let at = &self.nodes[a.0].value;
        if at.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                detail: format!("expected matrix, got {:?}", at.shape()),
            });
        }
        let (r, c) = (at.rows(), at.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = at.values()[i * c + j];
            }
        }
        let value = Tensor::matrix(c, r, out)?;
        Ok(self.push_derived(Op::Transpose { a }, value, &[a]))
    }

    pub fn outer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if at.shape().len() != 1 || bt.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "outer",
                detail: format!("{:?} ⊗ {:?}", at.shape(), bt.shape()),
            });
        }
        let (m, n) = (at.len(), bt.len());
        let mut out = Vec::with_capacity(m * n);
        for &ai in at.values() {
            for &bj in bt.values() {
                out.push(ai * bj);
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push_derived(Op::Outer { a, b }, value, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push_derived(Op::Add { a, b }, value, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push_derived(Op::Sub { a, b }, value, &[a, b]))
    }

    pub fn elem_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise("elem_mul", a, b, |x, y| x * y)?;
        Ok(self.push_derived(Op::ElemMul { a, b }, value, &[a, b]))
    }

    pub fn elem_div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise("elem_div", a, b, |x, y| x / y)?;
        Ok(self.push_derived(Op::ElemDiv { a, b }, value, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let at = &self.nodes[a.0].value;
        let value = Tensor::new(
            at.shape().to_vec(),
            at.values().iter().map(|&v| v * k).collect(),
        )?;
        Ok(self.push_derived(Op::Scale { a, k }, value, &[a]))
    }

    /// Scalar node times tensor node, elementwise.
    pub fn scalar_mul(&mut self, s: NodeId, a: NodeId) -> Result<NodeId> {
        let st = &self.nodes[s.0].value;
        if !st.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "scalar_mul",
                detail: format!("expected scalar, got {:?}", st.shape()),
            });
        }
        let k = st.values()[0];
        let at = &self.nodes[a.0].value;
        let value = Tensor::new(
            at.shape().to_vec(),
            at.values().iter().map(|&v| v * k).collect(),
        )?;
        Ok(self.push_derived(Op::ScalarMul { s, a }, value, &[s, a]))
    }

    /// Fill a tensor of the given shape with a scalar node's value.
    pub fn broadcast(&mut self, s: NodeId, shape: &[usize]) -> Result<NodeId> {
        let st = &self.nodes[s.0].value;
        if !st.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                detail: format!("expected scalar, got {:?}", st.shape()),
            });
        }
        let v = st.values()[0];
        let n: usize = shape.iter().product();
        let value = Tensor::new(shape.to_vec(), vec![v; n])?;
        Ok(self.push_derived(Op::Broadcast { s }, value, &[s]))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let at = &self.nodes[a.0].value;
        let value = Tensor::new(at.shape().to_vec(), kernels::tanh_vec(at.values()))?;
        Ok(self.push_derived(Op::Tanh { a }, value, &[a]))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let at = &self.nodes[a.0].value;
        let value = Tensor::new(
            at.shape().to_vec(),
            at.values().iter().map(|&v| v.ln()).collect(),
        )
        .map_err(|_| Error::NonFinite {
            context: "log of non-positive value".into(),
        })?;
        Ok(self.push_derived(Op::Log { a }, value, &[a]))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(kernels::sum(self.nodes[a.0].value.values()))?;
        Ok(self.push_derived(Op::Sum { a }, value, &[a]))
    }

    pub fn norm_sq(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(kernels::norm_sq(self.nodes[a.0].value.values()))?;
        Ok(self.push_derived(Op::NormSq { a }, value, &[a]))
    }

    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let at = &self.nodes[a.0].value;
        if index >= at.len() {
            return Err(Error::ShapeMismatch {
                op: "pick",
                detail: format!("index {index} out of range for {} entries", at.len()),
            });
        }
        let value = Tensor::scalar(at.values()[index])?;
        Ok(self.push_derived(Op::Pick { a, index }, value, &[a]))
    }

    pub fn softmax(&mut self, z: NodeId) -> Result<NodeId> {
        let zt = &self.nodes[z.0].value;
        if zt.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                detail: format!("expected vector, got {:?}", zt.shape()),
            });
        }
        let value = Tensor::vector(kernels::softmax(zt.values())?)?;
        Ok(self.push_derived(Op::Softmax { z }, value, &[z]))
    }

    pub fn kl(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let (pt, qt) = (&self.nodes[p.0].value, &self.nodes[q.0].value);
        let value = Tensor::scalar(kernels::kl_divergence(pt.values(), qt.values())?)?;
        Ok(self.push_derived(Op::Kl { p, q }, value, &[p, q]))
    }

    pub fn cross_entropy(&mut self, p: NodeId, class: usize) -> Result<NodeId> {
        let pt = &self.nodes[p.0].value;
        let value = Tensor::scalar(kernels::cross_entropy(pt.values(), class)?)?;
        Ok(self.push_derived(Op::CrossEntropy { p, class }, value, &[p]))
    }

    /// Dot product helper: sum(a ⊙ b).
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let m = self.elem_mul(a, b)?;
        self.sum(m)
    }

    // ── differentiation ─────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Populates gradient slots for every
    /// node the chain rule reaches; other slots are cleared (zero gradient).
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.check_scalar_root(root)?;
        let mut builder = ValueBuilder { graph: self };
        let seed = Tensor::scalar(1.0)?;
        let grads = backward_sweep(&mut builder, root.0, seed)?;
        for node in &mut self.nodes {
            node.grad = None;
        }
        for (i, g) in grads {
            self.nodes[i].grad = Some(g);
        }
        self.backward_passes += 1;
        Ok(())
    }

    /// Backward pass whose chain-rule steps are themselves graph nodes, so a
    /// scalar built from the returned gradients can be differentiated again.
    pub fn backward_recorded(&mut self, root: NodeId) -> Result<RecordedGrads> {
        self.check_scalar_root(root)?;
        let seed = {
            let one = Tensor::scalar(1.0)?;
            self.constant(one)
        };
        let mut builder = NodeBuilder { graph: self };
        let grads = backward_sweep(&mut builder, root.0, seed)?;
        for node in &mut self.nodes {
            node.grad = None;
        }
        for (&i, &gid) in &grads {
            let t = self.nodes[gid.0].value.clone();
            self.nodes[i].grad = Some(t);
        }
        self.backward_passes += 1;
        self.has_recorded_backward = true;
        Ok(RecordedGrads { map: grads })
    }

    /// Second-order pass: differentiate a scalar assembled from recorded
    /// first-order gradients. Errors if no recording backward has run.
    pub fn double_backward(&mut self, scalar_of_gradients: NodeId) -> Result<()> {
        if !self.has_recorded_backward {
            return Err(Error::BackwardNotRecorded);
        }
        self.backward(scalar_of_gradients)
    }

    // ── internals ───────────────────────────────────────────────────────

    fn check_scalar_root(&self, root: NodeId) -> Result<()> {
        let v = &self.nodes[root.0].value;
        if !v.is_scalar() {
            return Err(Error::RootNotScalar {
                shape: v.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn elementwise(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if at.shape() != bt.shape() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", at.shape(), bt.shape()),
            });
        }
        let values = at
            .values()
            .iter()
            .zip(bt.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(at.shape().to_vec(), values)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, op: Op, value: Tensor, parents: &[NodeId]) -> NodeId {
        let requires = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(op, value, requires)
    }
}

/// The chain-rule arithmetic shared by both backward modes. `G` is a plain
/// tensor in value mode and a freshly built node in recording mode.
trait GradBuilder {
    type G: Clone;

    fn op_of(&self, i: usize) -> Op;
    fn requires_grad(&self, i: usize) -> bool;
    fn shape_of(&self, i: usize) -> Vec<usize>;
    fn value_of(&mut self, i: usize) -> Self::G;
    fn constant(&mut self, t: Tensor) -> Result<Self::G>;

    fn add(&mut self, a: &Self::G, b: &Self::G) -> Result<Self::G>;
    fn sub(&mut self, a: &Self::G, b: &Self::G) -> Result<Self::G>;
    fn elem_mul(&mut self, a: &Self::G, b: &Self::G) -> Result<Self::G>;
    fn elem_div(&mut self, a: &Self::G, b: &Self::G) -> Result<Self::G>;
    fn scale(&mut self, a: &Self::G, k: f64) -> Result<Self::G>;
    fn scalar_mul(&mut self, s: &Self::G, a: &Self::G) -> Result<Self::G>;
    fn broadcast(&mut self, s: &Self::G, shape: &[usize]) -> Result<Self::G>;
    fn sum(&mut self, a: &Self::G) -> Result<Self::G>;
    fn matvec(&mut self, w: &Self::G, x: &Self::G) -> Result<Self::G>;
    fn matvec_t(&mut self, w: &Self::G, v: &Self::G) -> Result<Self::G>;
    fn outer(&mut self, a: &Self::G, b: &Self::G) -> Result<Self::G>;
    fn transpose(&mut self, a: &Self::G) -> Result<Self::G>;
    fn log(&mut self, a: &Self::G) -> Result<Self::G>;
    fn pick(&mut self, a: &Self::G, index: usize) -> Result<Self::G>;
}

/// Per-op chain rule: contributions of the upstream gradient `u` at node `i`
/// to each parent that can carry gradient.
fn vjp<B: GradBuilder>(b: &mut B, i: usize, u: &B::G) -> Result<Vec<(usize, B::G)>> {
    let op = b.op_of(i);
    let mut out = Vec::new();
    match op {
        Op::Input | Op::Param | Op::Const => {}
        Op::MatVec { w, x } => {
            if b.requires_grad(w.0) {
                let xv = b.value_of(x.0);
                let g = b.outer(u, &xv)?;
                out.push((w.0, g));
            }
            if b.requires_grad(x.0) {
                let wv = b.value_of(w.0);
                let g = b.matvec_t(&wv, u)?;
                out.push((x.0, g));
            }
        }
        Op::Transpose { a } => {
            if b.requires_grad(a.0) {
                let g = b.transpose(u)?;
                out.push((a.0, g));
            }
        }
        Op::Outer { a, b: rhs } => {
            if b.requires_grad(a.0) {
                let bv = b.value_of(rhs.0);
                let g = b.matvec(u, &bv)?;
                out.push((a.0, g));
            }
            if b.requires_grad(rhs.0) {
                let av = b.value_of(a.0);
                let g = b.matvec_t(u, &av)?;
                out.push((rhs.0, g));
            }
        }
        Op::Add { a, b: rhs } => {
            if b.requires_grad(a.0) {
                out.push((a.0, u.clone()));
            }
            if b.requires_grad(rhs.0) {
                out.push((rhs.0, u.clone()));
            }
        }
        Op::Sub { a, b: rhs } => {
            if b.requires_grad(a.0) {
                out.push((a.0, u.clone()));
            }
            if b.requires_grad(rhs.0) {
                let g = b.scale(u, -1.0)?;
                out.push((rhs.0, g));
            }
        }
        Op::ElemMul { a, b: rhs } => {
            if b.requires_grad(a.0) {
                let bv = b.value_of(rhs.0);
                let g = b.elem_mul(u, &bv)?;
                out.push((a.0, g));
            }
            if b.requires_grad(rhs.0) {
                let av = b.value_of(a.0);
                let g = b.elem_mul(u, &av)?;
                out.push((rhs.0, g));
            }
        }
        Op::ElemDiv { a, b: rhs } => {
            let bv = b.value_of(rhs.0);
            if b.requires_grad(a.0) {
                let g = b.elem_div(u, &bv)?;
                out.push((a.0, g));
            }
            if b.requires_grad(rhs.0) {
                // d/db (a/b) = -(a/b)/b
                let selfv = b.value_of(i);
                let q = b.elem_div(&selfv, &bv)?;
                let t = b.elem_mul(u, &q)?;
                let g = b.scale(&t, -1.0)?;
                out.push((rhs.0, g));
            }
        }
        Op::Scale { a, k } => {
            if b.requires_grad(a.0) {
                let g = b.scale(u, k)?;
                out.push((a.0, g));
            }
        }
        Op::ScalarMul { s, a } => {
            if b.requires_grad(s.0) {
                let av = b.value_of(a.0);
                let t = b.elem_mul(u, &av)?;
                let g = b.sum(&t)?;
                out.push((s.0, g));
            }
            if b.requires_grad(a.0) {
                let sv = b.value_of(s.0);
                let g = b.scalar_mul(&sv, u)?;
                out.push((a.0, g));
            }
        }
        Op::Broadcast { s } => {
            if b.requires_grad(s.0) {
                let g = b.sum(u)?;
                out.push((s.0, g));
            }
        }
        Op::Tanh { a } => {
            if b.requires_grad(a.0) {
                let y = b.value_of(i);
                let y2 = b.elem_mul(&y, &y)?;
                let ones = ones_like(b, i)?;
                let d = b.sub(&ones, &y2)?;
                let g = b.elem_mul(u, &d)?;
                out.push((a.0, g));
            }
        }
        Op::Log { a } => {
            if b.requires_grad(a.0) {
                let av = b.value_of(a.0);
                let g = b.elem_div(u, &av)?;
                out.push((a.0, g));
            }
        }
        Op::Sum { a } => {
            if b.requires_grad(a.0) {
                let shape = b.shape_of(a.0);
                let g = b.broadcast(u, &shape)?;
                out.push((a.0, g));
            }
        }
        Op::NormSq { a } => {
            if b.requires_grad(a.0) {
                let av = b.value_of(a.0);
                let two_a = b.scale(&av, 2.0)?;
                let g = b.scalar_mul(u, &two_a)?;
                out.push((a.0, g));
            }
        }
        Op::Pick { a, index } => {
            if b.requires_grad(a.0) {
                let shape = b.shape_of(a.0);
                let n: usize = shape.iter().product();
                let mut hot = vec![0.0; n];
                hot[index] = 1.0;
                let onehot = b.constant(Tensor::new(shape, hot)?)?;
                let g = b.scalar_mul(u, &onehot)?;
                out.push((a.0, g));
            }
        }
        Op::Softmax { z } => {
            if b.requires_grad(z.0) {
                // J_softmaxᵀ u = p ⊙ (u − 1·(uᵀp))
                let p = b.value_of(i);
                let t = b.elem_mul(u, &p)?;
                let s = b.sum(&t)?;
                let shape = b.shape_of(i);
                let sb = b.broadcast(&s, &shape)?;
                let d = b.sub(u, &sb)?;
                let g = b.elem_mul(&p, &d)?;
                out.push((z.0, g));
            }
        }
        Op::Kl { p, q } => {
            // KL(P‖Q): ∂/∂P = ln(P/Q) + 1, ∂/∂Q = −P/Q.
            // Requires strictly positive P when differentiated (the 0·ln 0
            // forward convention has an unbounded derivative at 0).
            if b.requires_grad(p.0) {
                let pv = b.value_of(p.0);
                let qv = b.value_of(q.0);
                let lp = b.log(&pv)?;
                let lq = b.log(&qv)?;
                let lr = b.sub(&lp, &lq)?;
                let ones = ones_like(b, p.0)?;
                let term = b.add(&lr, &ones)?;
                let g = b.scalar_mul(u, &term)?;
                out.push((p.0, g));
            }
            if b.requires_grad(q.0) {
                let pv = b.value_of(p.0);
                let qv = b.value_of(q.0);
                let ratio = b.elem_div(&pv, &qv)?;
                let neg = b.scale(&ratio, -1.0)?;
                let g = b.scalar_mul(u, &neg)?;
                out.push((q.0, g));
            }
        }
        Op::CrossEntropy { p, class } => {
            if b.requires_grad(p.0) {
                // ∂(−ln p_y)/∂p = −1/p_y at y, zero elsewhere.
                let pv = b.value_of(p.0);
                let py = b.pick(&pv, class)?;
                let ratio = b.elem_div(u, &py)?;
                let coef = b.scale(&ratio, -1.0)?;
                let shape = b.shape_of(p.0);
                let n: usize = shape.iter().product();
                let mut hot = vec![0.0; n];
                hot[class] = 1.0;
                let onehot = b.constant(Tensor::new(shape, hot)?)?;
                let g = b.scalar_mul(&coef, &onehot)?;
                out.push((p.0, g));
            }
        }
    }
    Ok(out)
}

fn ones_like<B: GradBuilder>(b: &mut B, i: usize) -> Result<B::G> {
    let shape = b.shape_of(i);
    let n: usize = shape.iter().product();
    b.constant(Tensor::new(shape, vec![1.0; n])?)
}

/// Reverse sweep over the arena prefix `[0, root]`. Nodes appended during the
/// sweep (recording mode) carry higher indices and are not revisited.
fn backward_sweep<B: GradBuilder>(
    b: &mut B,
    root: usize,
    seed: B::G,
) -> Result<HashMap<usize, B::G>> {
    let mut grads: HashMap<usize, B::G> = HashMap::new();
    if !b.requires_grad(root) {
        return Ok(grads);
    }
    grads.insert(root, seed);
    for i in (0..=root).rev() {
        let Some(u) = grads.get(&i).cloned() else {
            continue;
        };
        for (parent, contribution) in vjp(b, i, &u)? {
            match grads.remove(&parent) {
                Some(existing) => {
                    let merged = b.add(&existing, &contribution)?;
                    grads.insert(parent, merged);
                }
                None => {
                    grads.insert(parent, contribution);
                }
            }
        }
    }
    Ok(grads)
}

struct ValueBuilder<'g> {
    graph: &'g Graph,
}

impl GradBuilder for ValueBuilder<'_> {
    type G = Tensor;

    fn op_of(&self, i: usize) -> Op {
        self.graph.nodes[i].op.clone()
    }

    fn requires_grad(&self, i: usize) -> bool {
        self.graph.nodes[i].requires_grad
    }

    fn shape_of(&self, i: usize) -> Vec<usize> {
        self.graph.nodes[i].value.shape().to_vec()
    }

    fn value_of(&mut self, i: usize) -> Tensor {
        self.graph.nodes[i].value.clone()
    }

    fn constant(&mut self, t: Tensor) -> Result<Tensor> {
        Ok(t)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        zip_tensors("add", a, b, |x, y| x + y)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        zip_tensors("sub", a, b, |x, y| x - y)
    }

    fn elem_mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        zip_tensors("elem_mul", a, b, |x, y| x * y)
    }

    fn elem_div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        zip_tensors("elem_div", a, b, |x, y| x / y)
    }

    fn scale(&mut self, a: &Tensor, k: f64) -> Result<Tensor> {
        Tensor::new(
            a.shape().to_vec(),
            a.values().iter().map(|&v| v * k).collect(),
        )
    }

    fn scalar_mul(&mut self, s: &Tensor, a: &Tensor) -> Result<Tensor> {
        let k = s.values()[0];
        Tensor::new(
            a.shape().to_vec(),
            a.values().iter().map(|&v| v * k).collect(),
        )
    }

    fn broadcast(&mut self, s: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let v = s.values()[0];
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![v; n])
    }

    fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        Tensor::scalar(kernels::sum(a.values()))
    }

    fn matvec(&mut self, w: &Tensor, x: &Tensor) -> Result<Tensor> {
        Tensor::vector(kernels::matvec(w.rows(), w.cols(), w.values(), x.values()))
    }

    fn matvec_t(&mut self, w: &Tensor, v: &Tensor) -> Result<Tensor> {
        Tensor::vector(kernels::matvec_transposed(
            w.rows(),
            w.cols(),
            w.values(),
            v.values(),
        ))
    }

    fn outer(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, n) = (a.len(), b.len());
        let mut out = Vec::with_capacity(m * n);
        for &ai in a.values() {
            for &bj in b.values() {
                out.push(ai * bj);
            }
        }
        Tensor::matrix(m, n, out)
    }

    fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = (a.rows(), a.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.values()[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        Tensor::new(
            a.shape().to_vec(),
            a.values().iter().map(|&v| v.ln()).collect(),
        )
        .map_err(|_| Error::NonFinite {
            context: "log of non-positive value".into(),
        })
    }

    fn pick(&mut self, a: &Tensor, index: usize) -> Result<Tensor> {
        Tensor::scalar(a.values()[index])
    }
}

fn zip_tensors(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), values)
}

struct NodeBuilder<'g> {
    graph: &'g mut Graph,
}

impl GradBuilder for NodeBuilder<'_> {
    type G = NodeId;

    fn op_of(&self, i: usize) -> Op {
        self.graph.nodes[i].op.clone()
    }

    fn requires_grad(&self, i: usize) -> bool {
        self.graph.nodes[i].requires_grad
    }

    fn shape_of(&self, i: usize) -> Vec<usize> {
        self.graph.nodes[i].value.shape().to_vec()
    }

    fn value_of(&mut self, i: usize) -> NodeId {
        NodeId(i)
    }

    fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        Ok(self.graph.constant(t))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.graph.add(*a, *b)
    }

    fn sub(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.graph.sub(*a, *b)
    }

    fn elem_mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.graph.elem_mul(*a, *b)
    }

    fn elem_div(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.graph.elem_div(*a, *b)
    }

    fn scale(&mut self, a: &NodeId, k: f64) -> Result<NodeId> {
        self.graph.scale(*a, k)
    }

    fn scalar_mul(&mut self, s: &NodeId, a: &NodeId) -> Result<NodeId> {
        self.graph.scalar_mul(*s, *a)
    }

    fn broadcast(&mut self, s: &NodeId, shape: &[usize]) -> Result<NodeId> {
        self.graph.broadcast(*s, shape)
    }

    fn sum(&mut self, a: &NodeId) -> Result<NodeId> {
        self.graph.sum(*a)
    }

    fn matvec(&mut self, w: &NodeId, x: &NodeId) -> Result<NodeId> {
        self.graph.matvec(*w, *x)
    }

    fn matvec_t(&mut self, w: &NodeId, v: &NodeId) -> Result<NodeId> {
        let wt = self.graph.transpose(*w)?;
        self.graph.matvec(wt, *v)
    }

    fn outer(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.graph.outer(*a, *b)
    }

    fn transpose(&mut self, a: &NodeId) -> Result<NodeId> {
        self.graph.transpose(*a)
    }

    fn log(&mut self, a: &NodeId) -> Result<NodeId> {
        self.graph.log(*a)
    }

    fn pick(&mut self, a: &NodeId, index: usize) -> Result<NodeId> {
        self.graph.pick(*a, index)
    }
}
