//! Dense row-major tensors and the value-level kernels shared by the tape
//! (training) and cached (inference) execution paths.
//!
//! Both paths must produce bit-identical results for the same math, so every
//! reduction here fixes one summation order and the kernels are reused rather
//! than re-derived elsewhere.

use rand::Rng;

use crate::{Error, Result};

/// Scalar precision of a tensor buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Scalar element of a tensor. f64 is the default precision; f32 is the
/// speed option selected by configuration.
pub trait Element:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + num_traits::Float
    + 'static
{
    const DTYPE: DType;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Causal visibility predicate over (query, key) index pairs.
///
/// Query `q` may attend key `k` iff `k <= q + prefix_len`. `prefix_len`
/// counts positions that precede the queries in the same timeline: cached
/// history for incremental steps, or conditioning rows that every query of a
/// local decoder may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalMask {
    pub prefix_len: usize,
}

impl CausalMask {
    /// Plain causal mask: query i sees keys 0..=i.
    pub fn dense() -> Self {
        CausalMask { prefix_len: 0 }
    }

    /// Queries appended after `prefix_len` existing positions.
    pub fn with_prefix(prefix_len: usize) -> Self {
        CausalMask { prefix_len }
    }

    #[inline]
    pub fn allows(&self, query: usize, key: usize) -> bool {
        key <= query + self.prefix_len
    }

    /// Number of visible keys for `query` in a row of `n_keys`.
    #[inline]
    pub fn visible(&self, query: usize, n_keys: usize) -> usize {
        n_keys.min(query + self.prefix_len + 1)
    }
}

/// Dense multi-dimensional array. Row-major, contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeData {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, E::one())
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = E::one();
        }
        t
    }

    /// Gaussian init (Box-Muller over the given RNG), scaled by `std`.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(E::from_f64(r * theta.cos() * std));
            if data.len() < numel {
                data.push(E::from_f64(r * theta.sin() * std));
            }
        }
        Tensor { shape, data }
    }

    /// Uniform init over [lo, hi).
    pub fn rand_uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| E::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all leading axes (the tensor viewed as a matrix of rows).
    pub fn rows(&self) -> usize {
        if self.data.is_empty() && self.cols() == 0 {
            return self.shape.iter().rev().skip(1).product();
        }
        self.numel() / self.cols().max(1)
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[E] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [E] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Reshape {
                from: self.shape.clone(),
                to: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Result<Tensor<E>> {
        Tensor::new(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }
}

#[inline]
pub(crate) fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = E::zero();
    for i in 0..a.len() {
        acc = acc + a[i] * b[i];
    }
    acc
}

/// Value-level kernels. The tape records these same computations; the
/// inference engine calls them directly.
pub mod ops {
    use super::*;

    fn same_shape<E: Element>(a: &Tensor<E>, b: &Tensor<E>, op: &'static str) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::DimMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(a, b, "add")?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn sub<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(a, b, "sub")?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x - y)
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn mul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(a, b, "mul")?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn scale<E: Element>(a: &Tensor<E>, c: E) -> Tensor<E> {
        a.map(|v| v * c)
    }

    pub fn sum<E: Element>(a: &Tensor<E>) -> Tensor<E> {
        let mut acc = E::zero();
        for &v in a.data() {
            acc = acc + v;
        }
        Tensor::scalar(acc)
    }

    fn matmul_dims<E: Element>(
        a: &Tensor<E>,
        b: &Tensor<E>,
        ta: bool,
        tb: bool,
    ) -> Result<(usize, usize, usize)> {
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(Error::DimMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, ka) = if ta {
            (a.shape()[1], a.shape()[0])
        } else {
            (a.shape()[0], a.shape()[1])
        };
        let (kb, n) = if tb {
            (b.shape()[1], b.shape()[0])
        } else {
            (b.shape()[0], b.shape()[1])
        };
        if ka != kb {
            return Err(Error::DimMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok((m, ka, n))
    }

    /// C = op(A) · op(B) with optional transposes, 2-D only.
    ///
    /// Accumulation order is fixed per variant so that batched and
    /// incremental paths sum in the same order.
    pub fn matmul<E: Element>(
        a: &Tensor<E>,
        b: &Tensor<E>,
        ta: bool,
        tb: bool,
    ) -> Result<Tensor<E>> {
        let (m, k, n) = matmul_dims(a, b, ta, tb)?;
        let mut out = vec![E::zero(); m * n];
        match (ta, tb) {
            (false, false) => {
                // Row-accumulating i-k-j order: each output row is built by
                // adding scaled rows of B in ascending k.
                let ad = a.data();
                let bd = b.data();
                for i in 0..m {
                    let orow = &mut out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        let brow = &bd[p * n..(p + 1) * n];
                        for j in 0..n {
                            orow[j] = orow[j] + av * brow[j];
                        }
                    }
                }
            }
            (false, true) => {
                // Dot-product form: out[i][j] = <a_i, b_j>.
                for i in 0..m {
                    let arow = a.row(i);
                    for j in 0..n {
                        out[i * n + j] = dot(arow, b.row(j));
                    }
                }
            }
            (true, false) => {
                // A is [k×m]: out[i][j] = sum_p a[p][i] * b[p][j].
                let ad = a.data();
                let bd = b.data();
                for p in 0..k {
                    let brow = &bd[p * n..(p + 1) * n];
                    for i in 0..m {
                        let av = ad[p * m + i];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] = orow[j] + av * brow[j];
                        }
                    }
                }
            }
            (true, true) => {
                return Err(Error::DimMismatch {
                    op: "matmul(tt unsupported)",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Root-mean-square normalization over the last axis with learned gain.
    pub fn rmsnorm<E: Element>(x: &Tensor<E>, gain: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        let d = x.cols();
        if gain.numel() != d {
            return Err(Error::DimMismatch {
                op: "rmsnorm",
                lhs: x.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let eps = E::from_f64(eps);
        let mut out = Tensor::zeros(x.shape().to_vec());
        let g = gain.data();
        for i in 0..x.rows() {
            let row = x.row(i);
            let mut ms = E::zero();
            for &v in row {
                ms = ms + v * v;
            }
            ms = ms / E::from_f64(d as f64);
            let inv = (ms + eps).sqrt().recip();
            let orow = out.row_mut(i);
            for j in 0..d {
                orow[j] = row[j] * inv * g[j];
            }
        }
        Ok(out)
    }

    /// Row-wise softmax under a causal mask. Masked keys get probability
    /// exactly zero; each visible segment is stabilized by its own max.
    pub fn softmax_rows<E: Element>(x: &Tensor<E>, mask: CausalMask) -> Result<Tensor<E>> {
        let n = x.cols();
        let mut out = Tensor::zeros(x.shape().to_vec());
        for i in 0..x.rows() {
            let vis = mask.visible(i, n);
            if vis == 0 {
                return Err(Error::EmptyAttentionRow { row: i });
            }
            let row = x.row(i);
            let mut mx = row[0];
            for &v in &row[..vis] {
                if v > mx {
                    mx = v;
                }
            }
            let mut z = E::zero();
            let orow = out.row_mut(i);
            for j in 0..vis {
                let e = (row[j] - mx).exp();
                orow[j] = e;
                z = z + e;
            }
            let inv = z.recip();
            for v in orow[..vis].iter_mut() {
                *v = *v * inv;
            }
        }
        Ok(out)
    }

    /// Per-row negative log-likelihood of the target class, computed via a
    /// numerically stable log-sum-exp.
    pub fn cross_entropy_rows<E: Element>(
        logits: &Tensor<E>,
        targets: &[usize],
    ) -> Result<Tensor<E>> {
        let rows = logits.rows();
        let v = logits.cols();
        if targets.len() != rows {
            return Err(Error::DimMismatch {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut out = Vec::with_capacity(rows);
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t, vocab: v });
            }
            let row = logits.row(i);
            let mut mx = row[0];
            for &x in row {
                if x > mx {
                    mx = x;
                }
            }
            let mut z = E::zero();
            for &x in row {
                z = z + (x - mx).exp();
            }
            out.push(z.ln() + mx - row[t]);
        }
        Tensor::new(vec![rows], out)
    }

    /// Gather rows of `table` by id.
    pub fn gather_rows<E: Element>(table: &Tensor<E>, ids: &[usize]) -> Result<Tensor<E>> {
        let v = table.rows();
        let d = table.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            data.extend_from_slice(table.row(id));
        }
        Tensor::new(vec![ids.len(), d], data)
    }

    /// Stack 2-D pieces along the row axis. All pieces share the column count.
    pub fn concat_rows<E: Element>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
        let cols = parts
            .first()
            .ok_or(Error::EmptyConcat)?
            .cols();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::DimMismatch {
                    op: "concat_rows",
                    lhs: vec![cols],
                    rhs: p.shape().to_vec(),
                });
            }
            rows += p.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Tensor::new(vec![rows, cols], data)
    }

    pub fn slice_rows<E: Element>(x: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
        let cols = x.cols();
        if start + len > x.rows() {
            return Err(Error::SliceRange {
                start,
                len,
                extent: x.rows(),
            });
        }
        let data = x.data()[start * cols..(start + len) * cols].to_vec();
        Tensor::new(vec![len, cols], data)
    }

    /// Concatenate 2-D pieces along the last axis. All pieces share rows.
    pub fn concat_cols<E: Element>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
        let rows = parts
            .first()
            .ok_or(Error::EmptyConcat)?
            .rows();
        let mut cols = 0;
        for p in parts {
            if p.rows() != rows {
                return Err(Error::DimMismatch {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: p.shape().to_vec(),
                });
            }
            cols += p.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Tensor::new(vec![rows, cols], data)
    }

    pub fn slice_cols<E: Element>(x: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
        let cols = x.cols();
        if start + len > cols {
            return Err(Error::SliceRange {
                start,
                len,
                extent: cols,
            });
        }
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        Tensor::new(vec![rows, len], data)
    }

    pub fn silu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
        x.map(|v| {
            let s = (E::one() + (-v).exp()).recip();
            v * s
        })
    }

    /// Per-row cosine distance 1 − cos(a_i, b_i). Norms are floored to keep
    /// zero rows finite (they score distance 1).
    pub fn cosine_distance_rows<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(a, b, "cosine_distance")?;
        let rows = a.rows();
        let mut out = Vec::with_capacity(rows);
        for i in 0..rows {
            let (ar, br) = (a.row(i), b.row(i));
            let s = dot(ar, br);
            let na = dot(ar, ar).sqrt();
            let nb = dot(br, br).sqrt();
            let denom = (na * nb).max(E::from_f64(1e-30));
            out.push(E::one() - s / denom);
        }
        Tensor::new(vec![rows], out)
    }
}
