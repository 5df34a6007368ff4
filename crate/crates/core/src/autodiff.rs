//! Tape-based reverse-mode differentiation.
//!
//! Every op executed through a [`Tape`] appends one node holding its value,
//! its operand handles and an adjoint rule. [`Tape::backward`] replays the
//! rules in reverse execution order, accumulating gradients additively on
//! fan-out. A tape lives on one thread; build one per graph.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{
    self, broadcast_rule, ensure_finite, gemm_acc, transpose_raw, BinaryKind, Broadcast, Real,
    Tensor, UnaryKind,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What an adjoint rule sees when it runs.
pub struct AdjointCtx<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<T>,
    pub output: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    needs: Vec<bool>,
}

impl<T> AdjointCtx<'_, T> {
    /// Whether operand `i` needs a gradient at all.
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

/// Maps the output gradient to one optional gradient per operand.
pub type AdjointFn<T> = Box<dyn Fn(&AdjointCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<Var>,
    adjoint: Option<AdjointFn<T>>,
    requires_grad: bool,
    leaf: bool,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    by_leaf: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_leaf.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.by_leaf.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            adjoint: None,
            requires_grad,
            leaf: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op result. The value must be finite; the adjoint is only
    /// kept when some operand requires a gradient.
    pub fn record(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        adjoint: AdjointFn<T>,
    ) -> Result<Var> {
        ensure_finite(op, &value)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            parents: parents.to_vec(),
            adjoint: requires_grad.then_some(adjoint),
            requires_grad,
            leaf: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a scalar `loss`. Leaves that require a gradient
    /// but are not reached get zeros. The adjoint rules are released, so a
    /// tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::RecordConsumed);
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(loss_value.shape().to_vec(), vec![T::one()]));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(adjoint) = node.adjoint.as_ref() else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let ctx = AdjointCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                needs: node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect(),
            };
            let parent_grads = adjoint(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "adjoint arity of {}", node.op);
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape(), "grad shape in {}", node.op);
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }

        let mut by_leaf = HashMap::new();
        for (i, node) in self.nodes.iter_mut().enumerate() {
            node.adjoint = None;
            if node.leaf && node.requires_grad {
                let g = grads[i].take().unwrap_or_else(|| node.value.zeros_like());
                by_leaf.insert(Var(i), g);
            }
        }
        Ok(Gradients { by_leaf })
    }

    // ---- elementwise ----

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let out = tensor::elementwise_unary(kind, self.value(x))?;
        self.record(
            "elementwise_unary",
            out,
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let y = ctx.output.data();
                let xv = ctx.inputs[0].data();
                let d: Vec<T> = match kind {
                    UnaryKind::Relu => g
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                    UnaryKind::Sigmoid => {
                        g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect()
                    }
                    UnaryKind::Exp => g.iter().zip(y).map(|(&g, &y)| g * y).collect(),
                    UnaryKind::Neg => g.iter().map(|&g| -g).collect(),
                };
                vec![Some(Tensor::from_parts(ctx.grad.shape().to_vec(), d))]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let rule = broadcast_rule(self.shape(a), self.shape(b))?;
        let out = tensor::elementwise_binary(kind, self.value(a), self.value(b))?;
        self.record(
            "elementwise_binary",
            out,
            &[a, b],
            Box::new(move |ctx| {
                let g = ctx.grad;
                let (av, bv) = (ctx.inputs[0], ctx.inputs[1]);
                let ga = ctx.needs(0).then(|| match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.clone(),
                    BinaryKind::Mul => {
                        tensor::elementwise_binary(BinaryKind::Mul, g, bv).expect("validated shapes")
                    }
                });
                let gb = ctx.needs(1).then(|| {
                    let full = match kind {
                        BinaryKind::Add => g.clone(),
                        BinaryKind::Sub => g.map(|v| -v),
                        BinaryKind::Mul => {
                            let d = g.data().iter().zip(av.data()).map(|(&g, &a)| g * a).collect();
                            Tensor::from_parts(g.shape().to_vec(), d)
                        }
                    };
                    reduce_to(rule, &full, bv.shape())
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// `x · s` for a constant `s`.
    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let k = T::of(s);
        let out = self.value(x).map(|v| v * k);
        self.record("scale", out, &[x], Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * k))]))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        self.record(
            "matmul",
            out,
            &[a, b],
            Box::new(|ctx| {
                let (av, bv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let ga = ctx.needs(0).then(|| {
                    // dA = G · Bᵀ
                    let bt = transpose_raw(k, n, bv.data());
                    let mut d = vec![T::zero(); m * k];
                    gemm_acc(m, n, k, g.data(), &bt, &mut d);
                    Tensor::from_parts(vec![m, k], d)
                });
                let gb = ctx.needs(1).then(|| {
                    // dB = Aᵀ · G
                    let at = transpose_raw(m, k, av.data());
                    let mut d = vec![T::zero(); k * n];
                    gemm_acc(k, m, n, &at, g.data(), &mut d);
                    Tensor::from_parts(vec![k, n], d)
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        self.record(
            "transpose",
            out,
            &[a],
            Box::new(|ctx| vec![Some(tensor::transpose(ctx.grad).expect("matrix"))]),
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(x))?;
        self.record(
            "softmax_rows",
            out,
            &[x],
            Box::new(|ctx| {
                let (m, n) = (ctx.output.shape()[0], ctx.output.shape()[1]);
                let (y, g) = (ctx.output.data(), ctx.grad.data());
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    let row = r * n..(r + 1) * n;
                    let mut dot = T::zero();
                    for (&gv, &yv) in g[row.clone()].iter().zip(&y[row.clone()]) {
                        dot += gv * yv;
                    }
                    for j in row {
                        d[j] = y[j] * (g[j] - dot);
                    }
                }
                vec![Some(Tensor::from_parts(vec![m, n], d))]
            }),
        )
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = tensor::concat_channels(&values)?;
        let channels: Vec<usize> = values.iter().map(|t| t.shape()[1]).collect();
        self.record(
            "concat_channels",
            out,
            xs,
            Box::new(move |ctx| {
                let (n, total, h, w) = (
                    ctx.grad.shape()[0],
                    ctx.grad.shape()[1],
                    ctx.grad.shape()[2],
                    ctx.grad.shape()[3],
                );
                let hw = h * w;
                let g = ctx.grad.data();
                let mut offset = 0;
                let mut out = Vec::with_capacity(channels.len());
                for (i, &c) in channels.iter().enumerate() {
                    if ctx.needs(i) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let start = (b * total + offset) * hw;
                            d.extend_from_slice(&g[start..start + c * hw]);
                        }
                        out.push(Some(Tensor::from_parts(vec![n, c, h, w], d)));
                    } else {
                        out.push(None);
                    }
                    offset += c;
                }
                out
            }),
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(
            "sum",
            out,
            &[x],
            Box::new(|ctx| {
                let g = ctx.grad.item();
                vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), vec![g; ctx.inputs[0].len()]))]
            }),
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }
}

/// Sums a full-shape gradient back onto a broadcast operand.
fn reduce_to<T: Real>(rule: Broadcast, full: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    match rule {
        Broadcast::Same => full.clone(),
        Broadcast::PerChannel => {
            let [n, c, h, w] = full.shape()[..] else { unreachable!() };
            let hw = h * w;
            let mut d = vec![T::zero(); c];
            for b in 0..n {
                for (ch, acc) in d.iter_mut().enumerate() {
                    let start = (b * c + ch) * hw;
                    for &v in &full.data()[start..start + hw] {
                        *acc += v;
                    }
                }
            }
            Tensor::from_parts(target.to_vec(), d)
        }
        Broadcast::Spatial => {
            let [n, c, h, w] = full.shape()[..] else { unreachable!() };
            let hw = h * w;
            let mut d = vec![T::zero(); n * hw];
            for b in 0..n {
                let dst = &mut d[b * hw..(b + 1) * hw];
                for ch in 0..c {
                    let start = (b * c + ch) * hw;
                    for (acc, &v) in dst.iter_mut().zip(&full.data()[start..start + hw]) {
                        *acc += v;
                    }
                }
            }
            Tensor::from_parts(target.to_vec(), d)
        }
    }
}
