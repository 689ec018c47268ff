//! Reverse-mode differentiation over a linear op tape.
//!
//! Every primitive appends one node holding its output value and enough
//! saved state for the vector-Jacobian product. Tape order is a topological
//! order by construction, so the backward sweep is a single reverse pass
//! that visits each node exactly once.

use std::cell::RefCell;

use crate::tensor::{ops, CausalMask, Element, Tensor};
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

enum Op {
    /// Input value. Gradients accumulate only when `trainable`.
    Leaf { trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Sum(Var),
    Silu(Var),
    RmsNorm { x: Var, gain: Var },
    SoftmaxRows { x: Var, mask: CausalMask },
    CrossEntropyRows { logits: Var, targets: Vec<usize> },
    GatherRows { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    Reshape(Var),
    CosineDistanceRows(Var, Var),
    /// Identity forward, zero backward. The operand is kept for tape-dump
    /// tooling even though backward never follows it.
    Detach(#[allow(dead_code)] Var),
}

struct Node<E> {
    value: Tensor<E>,
    op: Op,
}

/// Gradient tape. Single-threaded; one forward pass per tape.
pub struct Tape<E> {
    nodes: RefCell<Vec<Node<E>>>,
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients<E> {
    by_id: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the backward root with respect to `v`, if `v` was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.by_id.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, zeros when the leaf was never reached.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<E> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<E>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            id: nodes.len() - 1,
        }
    }

    fn push_checked(&self, value: Tensor<E>, op: Op, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        Ok(self.push(value, op))
    }

    /// Trainable input: gradients will be reported for it.
    pub fn leaf(&self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf { trainable: true })
    }

    /// Non-trainable input.
    pub fn constant(&self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf { trainable: false })
    }

    pub fn value(&self, v: Var) -> Tensor<E> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<E>) -> R) -> R {
        f(&self.nodes.borrow()[v.id].value)
    }

    fn with_values<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor<E>, &Tensor<E>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.id].value, &nodes[b.id].value)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_values(a, b, |x, y| ops::add(x, y))?;
        self.push_checked(v, Op::Add(a, b), "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_values(a, b, |x, y| ops::sub(x, y))?;
        self.push_checked(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_values(a, b, |x, y| ops::mul(x, y))?;
        self.push_checked(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let v = self.with_value(a, |x| ops::scale(x, E::from_f64(c)));
        self.push_checked(v, Op::Scale(a, c), "scale")
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// A · Bᵀ
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    /// Aᵀ · B
    pub fn matmul_tn(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, true, false)
    }

    fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let v = self.with_values(a, b, |x, y| ops::matmul(x, y, ta, tb))?;
        self.push_checked(v, Op::Matmul { a, b, ta, tb }, "matmul")
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let v = self.with_value(a, ops::sum);
        self.push_checked(v, Op::Sum(a), "sum")
    }

    pub fn silu(&self, a: Var) -> Result<Var> {
        let v = self.with_value(a, ops::silu);
        self.push_checked(v, Op::Silu(a), "silu")
    }

    pub fn rmsnorm(&self, x: Var, gain: Var) -> Result<Var> {
        let v = self.with_values(x, gain, |a, g| ops::rmsnorm(a, g, crate::RMSNORM_EPS))?;
        self.push_checked(v, Op::RmsNorm { x, gain }, "rmsnorm")
    }

    pub fn softmax_rows(&self, x: Var, mask: CausalMask) -> Result<Var> {
        let v = self.with_value(x, |a| ops::softmax_rows(a, mask))?;
        self.push_checked(v, Op::SoftmaxRows { x, mask }, "softmax_rows")
    }

    pub fn cross_entropy_rows(&self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let v = self.with_value(logits, |a| ops::cross_entropy_rows(a, &targets))?;
        self.push_checked(v, Op::CrossEntropyRows { logits, targets }, "cross_entropy")
    }

    pub fn gather_rows(&self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let v = self.with_value(table, |t| ops::gather_rows(t, &ids))?;
        self.push_checked(v, Op::GatherRows { table, ids }, "gather_rows")
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<&Tensor<E>> = parts.iter().map(|p| &nodes[p.id].value).collect();
            ops::concat_rows(&tensors)?
        };
        self.push_checked(v, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.with_value(x, |a| ops::slice_rows(a, start, len))?;
        self.push_checked(v, Op::SliceRows { x, start, len }, "slice_rows")
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<&Tensor<E>> = parts.iter().map(|p| &nodes[p.id].value).collect();
            ops::concat_cols(&tensors)?
        };
        self.push_checked(v, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.with_value(x, |a| ops::slice_cols(a, start, len))?;
        self.push_checked(v, Op::SliceCols { x, start, len }, "slice_cols")
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.with_value(x, |a| a.reshape(shape))?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn cosine_distance_rows(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_values(a, b, |x, y| ops::cosine_distance_rows(x, y))?;
        self.push_checked(v, Op::CosineDistanceRows(a, b), "cosine_distance")
    }

    /// Forward identity whose backward contributes nothing: used for loss
    /// targets that must not receive gradient.
    pub fn detach(&self, x: Var) -> Var {
        let v = self.value(x);
        self.push(v, Op::Detach(x))
    }

    /// Reverse sweep from a scalar output. Returns gradient accumulators for
    /// every node reached on the path; parameters read theirs by leaf handle.
    pub fn backward(&self, out: Var) -> Result<Gradients<E>> {
        let nodes = self.nodes.borrow();
        if nodes[out.id].value.numel() != 1 {
            return Err(Error::NonScalarBackward {
                shape: nodes[out.id].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; nodes.len()];
        grads[out.id] = Some(Tensor::scalar(E::one()));

        for id in (0..=out.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf { trainable } => {
                    if *trainable {
                        grads[id] = Some(g);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g)?;
                    accumulate(&mut grads, *b, &g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g)?;
                    let neg = ops::scale(&g, -E::one());
                    accumulate(&mut grads, *b, &neg)?;
                }
                Op::Mul(a, b) => {
                    let da = ops::mul(&g, &nodes[b.id].value)?;
                    let db = ops::mul(&g, &nodes[a.id].value)?;
                    accumulate(&mut grads, *a, &da)?;
                    accumulate(&mut grads, *b, &db)?;
                }
                Op::Scale(a, c) => {
                    let da = ops::scale(&g, E::from_f64(*c));
                    accumulate(&mut grads, *a, &da)?;
                }
                Op::Matmul { a, b, ta, tb } => {
                    let av = &nodes[a.id].value;
                    let bv = &nodes[b.id].value;
                    let (da, db) = match (ta, tb) {
                        (false, false) => (
                            ops::matmul(&g, bv, false, true)?,
                            ops::matmul(av, &g, true, false)?,
                        ),
                        (false, true) => (
                            ops::matmul(&g, bv, false, false)?,
                            ops::matmul(&g, av, true, false)?,
                        ),
                        (true, false) => (
                            ops::matmul(bv, &g, false, true)?,
                            ops::matmul(av, &g, false, false)?,
                        ),
                        (true, true) => unreachable!("tt matmul is rejected at record time"),
                    };
                    accumulate(&mut grads, *a, &da)?;
                    accumulate(&mut grads, *b, &db)?;
                }
                Op::Sum(a) => {
                    let da = Tensor::full(nodes[a.id].value.shape().to_vec(), g.item());
                    accumulate(&mut grads, *a, &da)?;
                }
                Op::Silu(a) => {
                    let x = &nodes[a.id].value;
                    let mut da = Tensor::zeros(x.shape().to_vec());
                    for (i, out) in da.data_mut().iter_mut().enumerate() {
                        let xv = x.data()[i];
                        let s = (E::one() + (-xv).exp()).recip();
                        *out = g.data()[i] * (s + xv * s * (E::one() - s));
                    }
                    accumulate(&mut grads, *a, &da)?;
                }
                Op::RmsNorm { x, gain } => {
                    let (dx, dg) = rmsnorm_vjp(&nodes[x.id].value, &nodes[gain.id].value, &g);
                    accumulate(&mut grads, *x, &dx)?;
                    accumulate(&mut grads, *gain, &dg)?;
                }
                Op::SoftmaxRows { x, mask } => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.shape().to_vec());
                    let n = y.cols();
                    for i in 0..y.rows() {
                        let vis = mask.visible(i, n);
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let mut dotv = E::zero();
                        for j in 0..vis {
                            dotv = dotv + yr[j] * gr[j];
                        }
                        let dr = dx.row_mut(i);
                        for j in 0..vis {
                            dr[j] = yr[j] * (gr[j] - dotv);
                        }
                    }
                    accumulate(&mut grads, *x, &dx)?;
                }
                Op::CrossEntropyRows { logits, targets } => {
                    let lv = &nodes[logits.id].value;
                    let probs = ops::softmax_rows(lv, CausalMask::with_prefix(lv.cols()))?;
                    let mut dl = probs;
                    for (i, &t) in targets.iter().enumerate() {
                        let gi = g.data()[i];
                        let row = dl.row_mut(i);
                        for (j, v) in row.iter_mut().enumerate() {
                            let delta = if j == t { E::one() } else { E::zero() };
                            *v = (*v - delta) * gi;
                        }
                    }
                    accumulate(&mut grads, *logits, &dl)?;
                }
                Op::GatherRows { table, ids } => {
                    let tv = &nodes[table.id].value;
                    let mut dt = Tensor::zeros(tv.shape().to_vec());
                    let d = tv.cols();
                    for (i, &id2) in ids.iter().enumerate() {
                        let src = g.row(i);
                        let dst = dt.row_mut(id2);
                        for j in 0..d {
                            dst[j] = dst[j] + src[j];
                        }
                    }
                    accumulate(&mut grads, *table, &dt)?;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let r = nodes[p.id].value.rows();
                        let dp = ops::slice_rows(&g, offset, r)?
                            .reshape(nodes[p.id].value.shape().to_vec())?;
                        accumulate(&mut grads, *p, &dp)?;
                        offset += r;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let xv = &nodes[x.id].value;
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    let c = xv.cols();
                    let gd = g.data();
                    dx.data_mut()[start * c..(start + len) * c].copy_from_slice(gd);
                    accumulate(&mut grads, *x, &dx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let c = nodes[p.id].value.cols();
                        let dp = ops::slice_cols(&g, offset, c)?
                            .reshape(nodes[p.id].value.shape().to_vec())?;
                        accumulate(&mut grads, *p, &dp)?;
                        offset += c;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let xv = &nodes[x.id].value;
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    for i in 0..xv.rows() {
                        let src = g.row(i);
                        let dst = &mut dx.row_mut(i)[*start..start + len];
                        dst.copy_from_slice(src);
                    }
                    accumulate(&mut grads, *x, &dx)?;
                }
                Op::Reshape(x) => {
                    let dp = g.reshape(nodes[x.id].value.shape().to_vec())?;
                    accumulate(&mut grads, *x, &dp)?;
                }
                Op::CosineDistanceRows(a, b) => {
                    let av = &nodes[a.id].value;
                    let bv = &nodes[b.id].value;
                    let mut da = Tensor::zeros(av.shape().to_vec());
                    let mut db = Tensor::zeros(bv.shape().to_vec());
                    let rows = av.rows();
                    let d = av.cols();
                    for i in 0..rows {
                        let (ar, br) = (av.row(i), bv.row(i));
                        let gi = g.data()[i];
                        let mut s = E::zero();
                        let mut na2 = E::zero();
                        let mut nb2 = E::zero();
                        for j in 0..d {
                            s = s + ar[j] * br[j];
                            na2 = na2 + ar[j] * ar[j];
                            nb2 = nb2 + br[j] * br[j];
                        }
                        let na = na2.sqrt();
                        let nb = nb2.sqrt();
                        let denom = (na * nb).max(E::from_f64(1e-30));
                        let cosv = s / denom;
                        let dar = da.row_mut(i);
                        for j in 0..d {
                            // d(1−cos)/da_j = −(b_j/(na·nb) − cos·a_j/na²)
                            dar[j] = dar[j]
                                - gi * (br[j] / denom - cosv * ar[j] / na2.max(E::from_f64(1e-30)));
                        }
                        let dbr = db.row_mut(i);
                        for j in 0..d {
                            dbr[j] = dbr[j]
                                - gi * (ar[j] / denom - cosv * br[j] / nb2.max(E::from_f64(1e-30)));
                        }
                    }
                    accumulate(&mut grads, *a, &da)?;
                    accumulate(&mut grads, *b, &db)?;
                }
                Op::Detach(_) => {}
            }
        }
        // Grads kept above for trainable leaves; clear intermediates.
        for (id, slot) in grads.iter_mut().enumerate() {
            if !matches!(nodes[id].op, Op::Leaf { trainable: true }) {
                *slot = None;
            }
        }
        Ok(Gradients { by_id: grads })
    }
}

fn accumulate<E: Element>(
    grads: &mut [Option<Tensor<E>>],
    v: Var,
    g: &Tensor<E>,
) -> Result<()> {
    match &mut grads[v.id] {
        Some(acc) => {
            *acc = ops::add(acc, g)?;
        }
        None => grads[v.id] = Some(g.clone()),
    }
    Ok(())
}

fn rmsnorm_vjp<E: Element>(
    x: &Tensor<E>,
    gain: &Tensor<E>,
    g: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let d = x.cols();
    let dn = E::from_f64(d as f64);
    let eps = E::from_f64(crate::RMSNORM_EPS);
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dg = Tensor::zeros(gain.shape().to_vec());
    for i in 0..x.rows() {
        let xr = x.row(i);
        let gr = g.row(i);
        let mut ms = E::zero();
        for &v in xr {
            ms = ms + v * v;
        }
        let r2 = ms / dn + eps;
        let r = r2.sqrt();
        let inv = r.recip();
        // s = Σ_t g_t · gain_t · x_t
        let mut s = E::zero();
        for t in 0..d {
            s = s + gr[t] * gain.data()[t] * xr[t];
        }
        let inv3 = inv / r2;
        let dr = dx.row_mut(i);
        for j in 0..d {
            dr[j] = gain.data()[j] * inv * gr[j] - xr[j] * s * inv3 / dn;
        }
        for j in 0..d {
            dg.data_mut()[j] = dg.data_mut()[j] + gr[j] * xr[j] * inv;
        }
    }
    (dx, dg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use crate::test_rng;

    #[test]
    fn square_gradient() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![2, 2]));
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarBackward { .. })
        ));
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let grads = tape.backward(y).unwrap();
        // y = x · const(2): dy/dx = 2, not 4.
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    /// Finite-difference check harness for a single-input op.
    fn check_unary(
        shape: Vec<usize>,
        seed: u64,
        f: impl Fn(&Tape<f64>, Var) -> Var,
    ) {
        let mut rng = test_rng(seed);
        let x0 = Tensor::<f64>::rand_uniform(shape.clone(), -2.0, 2.0, &mut rng);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(&tape, x);
        let out = tape.sum(y).unwrap();
        let grads = tape.backward(out).unwrap();
        let analytic = grads.get(x).unwrap().clone();

        let numeric = central_diff(&x0, 1e-5, |t| {
            let tape = Tape::new();
            let x = tape.leaf(t.clone());
            let y = f(&tape, x);
            tape.value(tape.sum(y).unwrap()).item()
        });
        let err = max_rel_err(analytic.data(), numeric.data());
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = test_rng(42);
        let a0 = Tensor::<f64>::rand_uniform(vec![4, 5], -2.0, 2.0, &mut rng);
        let b0 = Tensor::<f64>::rand_uniform(vec![5, 2], -2.0, 2.0, &mut rng);

        let run = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let tape = Tape::new();
            let av = tape.leaf(a.clone());
            let bv = tape.leaf(b.clone());
            let c = tape.matmul(av, bv).unwrap();
            let s = tape.sum(c).unwrap();
            (tape.value(s).item(), tape, av, bv, s)
        };
        let (_, tape, av, bv, s) = run(&a0, &b0);
        let grads = tape.backward(s).unwrap();

        let num_a = central_diff(&a0, 1e-5, |t| run(t, &b0).0);
        let num_b = central_diff(&b0, 1e-5, |t| run(&a0, t).0);
        assert!(max_rel_err(grads.get(av).unwrap().data(), num_a.data()) < 1e-6);
        assert!(max_rel_err(grads.get(bv).unwrap().data(), num_b.data()) < 1e-6);
    }

    #[test]
    fn rmsnorm_gradient_matches_finite_differences() {
        let mut rng = test_rng(7);
        let gain = Tensor::<f64>::rand_uniform(vec![6], 0.5, 1.5, &mut rng);
        check_unary(vec![3, 6], 8, |tape, x| {
            let g = tape.constant(gain.clone());
            tape.rmsnorm(x, g).unwrap()
        });
        // And through the gain itself.
        let x0 = Tensor::<f64>::rand_uniform(vec![3, 6], -2.0, 2.0, &mut rng);
        let g0 = gain;
        let tape = Tape::new();
        let x = tape.constant(x0.clone());
        let g = tape.leaf(g0.clone());
        let y = tape.rmsnorm(x, g).unwrap();
        let out = tape.sum(y).unwrap();
        let grads = tape.backward(out).unwrap();
        let numeric = central_diff(&g0, 1e-5, |t| {
            let tape = Tape::new();
            let x = tape.constant(x0.clone());
            let g = tape.leaf(t.clone());
            let y = tape.rmsnorm(x, g).unwrap();
            tape.value(tape.sum(y).unwrap()).item()
        });
        assert!(max_rel_err(grads.get(g).unwrap().data(), numeric.data()) < 1e-6);
    }

    #[test]
    fn silu_gradient_matches_finite_differences() {
        check_unary(vec![2, 9], 9, |tape, x| tape.silu(x).unwrap());
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = test_rng(10);
        let w = Tensor::<f64>::rand_uniform(vec![3, 5], -1.0, 1.0, &mut rng);
        check_unary(vec![3, 5], 11, |tape, x| {
            let y = tape.softmax_rows(x, CausalMask::with_prefix(2)).unwrap();
            let wv = tape.constant(w.clone());
            tape.mul(y, wv).unwrap()
        });
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        check_unary(vec![4, 7], 12, |tape, x| {
            tape.cross_entropy_rows(x, vec![3, 0, 6, 2]).unwrap()
        });
    }

    #[test]
    fn gather_concat_slice_gradients() {
        check_unary(vec![5, 3], 13, |tape, x| {
            let g = tape.gather_rows(x, vec![0, 2, 2, 4]).unwrap();
            let s = tape.slice_rows(g, 1, 3).unwrap();
            let c = tape.concat_cols(&[s, s]).unwrap();
            tape.slice_cols(c, 2, 3).unwrap()
        });
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        // sum(rmsnorm(x)·W + silu(x)·x)
        let mut rng = test_rng(20);
        let w = Tensor::<f64>::rand_uniform(vec![6, 4], -1.0, 1.0, &mut rng);
        let gain = Tensor::<f64>::ones(vec![6]);
        check_unary(vec![3, 6], 21, |tape, x| {
            let g = tape.constant(gain.clone());
            let n = tape.rmsnorm(x, g).unwrap();
            let wv = tape.constant(w.clone());
            let a = tape.matmul(n, wv).unwrap();
            let b = tape.mul(tape.silu(x).unwrap(), x).unwrap();
            let bsum = tape.sum(b).unwrap();
            let asum = tape.sum(a).unwrap();
            tape.add(asum, bsum).unwrap()
        });
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = test_rng(33);
            let x0 = Tensor::<f64>::randn(vec![4, 4], 1.0, &mut rng);
            let tape = Tape::new();
            let x = tape.leaf(x0);
            let g = tape.constant(Tensor::ones(vec![4]));
            let y = tape.rmsnorm(x, g).unwrap();
            let sm = tape.softmax_rows(y, CausalMask::with_prefix(3)).unwrap();
            tape.value(sm)
        };
        let a = run();
        let b = run();
        assert_eq!(a.data(), b.data());
    }
}
