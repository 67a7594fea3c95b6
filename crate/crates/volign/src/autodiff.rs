//! Minimal reverse-mode tape for scalar f64 computations.
//!
//! Every arithmetic op pushes one node holding up to two `(parent, local
//! partial)` pairs; a single reverse sweep over the tape yields adjoints for
//! every node. Forward-only evaluation uses plain `f64` through the same
//! generic code via the [`Scalar`] trait.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// A node's parents live in a shared side buffer; the node stores the range.
#[derive(Clone, Copy)]
struct Node {
    start: usize,
    len: u32,
}

/// Arena of computation nodes. Interior mutability lets `Var` stay `Copy`.
/// Fused ops (dot products, sums, squared distances) record one node with
/// many parents instead of a chain of binary nodes, which keeps tapes for
/// matrix-heavy forward passes short.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    parents: RefCell<Vec<(usize, f64)>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            parents: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Create a leaf variable (an input whose adjoint we may read later).
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(&[]);
        Var {
            tape: self,
            idx,
            val: value,
        }
    }

    fn push(&self, node_parents: &[(usize, f64)]) -> usize {
        let mut parents = self.parents.borrow_mut();
        let start = parents.len();
        parents.extend_from_slice(node_parents);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            start,
            len: node_parents.len() as u32,
        });
        nodes.len() - 1
    }

    /// Reverse sweep from `output`; returns one adjoint per tape node.
    pub fn gradients(&self, output: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let parents = self.parents.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[output.idx] = 1.0;
        for i in (0..=output.idx).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let n = nodes[i];
            for &(p, d) in &parents[n.start..n.start + n.len as usize] {
                adj[p] += d * a;
            }
        }
        adj
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// One scalar value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
    val: f64,
}

impl<'t> Var<'t> {
    pub fn index(self) -> usize {
        self.idx
    }

    fn unary(self, val: f64, partial: f64) -> Var<'t> {
        let idx = self.tape.push(&[(self.idx, partial)]);
        Var {
            tape: self.tape,
            idx,
            val,
        }
    }

    fn binary(self, rhs: Var<'t>, val: f64, da: f64, db: f64) -> Var<'t> {
        let idx = self.tape.push(&[(self.idx, da), (rhs.idx, db)]);
        Var {
            tape: self.tape,
            idx,
            val,
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(
            rhs,
            self.val / rhs.val,
            1.0 / rhs.val,
            -self.val / (rhs.val * rhs.val),
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.val, -1.0)
    }
}

/// The scalar abstraction shared by plain-f64 evaluation and tape recording.
///
/// Generic forward passes written against this trait evaluate losses directly
/// with `f64` and produce gradients when instantiated with [`Var`].
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn value(self) -> f64;
    /// A constant in the same computational context as `self`.
    fn constant(self, v: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    /// Clamp to zero when the forward value is negative. The clamped branch
    /// carries zero gradient; callers skip degenerate configurations before
    /// differentiating through this.
    fn clamp_nonneg(self) -> Self {
        if self.value() < 0.0 {
            self.constant(0.0)
        } else {
            self
        }
    }

    fn sigmoid(self) -> Self {
        let one = self.constant(1.0);
        one / (one + (-self).exp())
    }

    fn powi(self, n: u32) -> Self {
        let mut acc = self.constant(1.0);
        for _ in 0..n {
            acc = acc * self;
        }
        acc
    }

    /// Fused Σ xᵢyᵢ over non-empty equal-length slices.
    fn dot(xs: &[Self], ys: &[Self]) -> Self {
        debug_assert_eq!(xs.len(), ys.len());
        let mut acc = xs[0].constant(0.0);
        for (&x, &y) in xs.iter().zip(ys) {
            acc = acc + x * y;
        }
        acc
    }

    /// Fused Σ xᵢ; `zero` supplies the context for empty input.
    fn sum_all(zero: Self, xs: &[Self]) -> Self {
        let mut acc = zero.constant(0.0);
        for &x in xs {
            acc = acc + x;
        }
        acc
    }

    /// Fused Σ (xᵢ − yᵢ)² over non-empty equal-length slices.
    fn sq_dist(xs: &[Self], ys: &[Self]) -> Self {
        debug_assert_eq!(xs.len(), ys.len());
        let mut acc = xs[0].constant(0.0);
        for (&x, &y) in xs.iter().zip(ys) {
            let d = x - y;
            acc = acc + d * d;
        }
        acc
    }
}

impl Scalar for f64 {
    fn value(self) -> f64 {
        self
    }
    fn constant(self, v: f64) -> f64 {
        v
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(self) -> f64 {
        self.val
    }
    fn constant(self, v: f64) -> Var<'t> {
        self.tape.var(v)
    }
    fn exp(self) -> Var<'t> {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Var<'t> {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn sqrt(self) -> Var<'t> {
        let r = self.val.sqrt();
        self.unary(r, 0.5 / r)
    }

    fn dot(xs: &[Var<'t>], ys: &[Var<'t>]) -> Var<'t> {
        debug_assert_eq!(xs.len(), ys.len());
        let tape = xs[0].tape;
        let mut val = 0.0;
        let mut parents = Vec::with_capacity(2 * xs.len());
        for (&x, &y) in xs.iter().zip(ys) {
            val += x.val * y.val;
            parents.push((x.idx, y.val));
            parents.push((y.idx, x.val));
        }
        let idx = tape.push(&parents);
        Var { tape, idx, val }
    }

    fn sum_all(zero: Var<'t>, xs: &[Var<'t>]) -> Var<'t> {
        let tape = zero.tape;
        let mut val = 0.0;
        let mut parents = Vec::with_capacity(xs.len());
        for &x in xs {
            val += x.val;
            parents.push((x.idx, 1.0));
        }
        let idx = tape.push(&parents);
        Var { tape, idx, val }
    }

    fn sq_dist(xs: &[Var<'t>], ys: &[Var<'t>]) -> Var<'t> {
        debug_assert_eq!(xs.len(), ys.len());
        let tape = xs[0].tape;
        let mut val = 0.0;
        let mut parents = Vec::with_capacity(2 * xs.len());
        for (&x, &y) in xs.iter().zip(ys) {
            let d = x.val - y.val;
            val += d * d;
            parents.push((x.idx, 2.0 * d));
            parents.push((y.idx, -2.0 * d));
        }
        let idx = tape.push(&parents);
        Var { tape, idx, val }
    }
}

/// Sum of a slice of scalars; `zero` supplies the context for empty input.
pub fn sum<S: Scalar>(zero: S, xs: &[S]) -> S {
    S::sum_all(zero, xs)
}

/// Numerically stable log(Σ exp(xᵢ)). The subtracted max is detached, which
/// leaves gradients of softmax-style expressions unchanged.
pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let m = xs
        .iter()
        .map(|x| x.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<S> = xs.iter().map(|&x| (x - x.constant(m)).exp()).collect();
    sum(xs[0], &shifted).ln() + xs[0].constant(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let t = Tape::new();
        let x = t.var(3.0);
        let y = t.var(5.0);
        let z = x * y + x;
        assert_eq!(z.value(), 18.0);
        let g = t.gradients(z);
        assert_eq!(g[x.index()], 6.0);
        assert_eq!(g[y.index()], 3.0);
    }

    #[test]
    fn chain_through_exp_ln_sqrt() {
        let t = Tape::new();
        let x = t.var(2.0);
        let z = (x.exp().ln() * x).sqrt(); // sqrt(x^2) = x
        let g = t.gradients(z);
        assert!((z.value() - 2.0).abs() < 1e-12);
        assert!((g[x.index()] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_matches_closed_form() {
        let t = Tape::new();
        let x = t.var(0.7);
        let s = x.sigmoid();
        let expected = 1.0 / (1.0 + (-0.7f64).exp());
        assert!((s.value() - expected).abs() < 1e-15);
        let g = t.gradients(s);
        assert!((g[x.index()] - expected * (1.0 - expected)).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_is_stable_and_correct() {
        let t = Tape::new();
        let xs: Vec<Var> = [1000.0, 1000.0].iter().map(|&v| t.var(v)).collect();
        let l = log_sum_exp(&xs);
        assert!((l.value() - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
        let g = t.gradients(l);
        assert!((g[xs[0].index()] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn f64_path_matches_var_path() {
        fn f<S: Scalar>(x: S, y: S) -> S {
            (x * y).sigmoid() + (x - y).powi(3).clamp_nonneg()
        }
        let plain = f(1.2f64, 0.4);
        let t = Tape::new();
        let v = f(t.var(1.2), t.var(0.4));
        assert!((plain - v.value()).abs() < 1e-15);
    }
}
