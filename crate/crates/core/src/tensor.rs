//! Dense row-major `f64` tensors, seeded sampling, norms and summary statistics.
//!
//! Everything here is deliberately small: 2-D matrix products, elementwise
//! maps and a handful of reductions. Every reduction walks the data in index
//! order so results are bit-reproducible regardless of how callers schedule
//! work across threads.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` equals the product of `shape`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} must be non-empty with positive extents"),
            ));
        }
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows; all rows must share a length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::shape(
                    "Tensor::from_rows",
                    format!("row {i} has {} entries, expected {cols}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a 2-D tensor (length of a 1-D tensor).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Euclidean norm of the flattened data.
    pub fn l2_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.l2_norm()
    }

    /// Largest L2 norm over the rows of a matrix.
    pub fn max_row_norm(&self) -> f64 {
        (0..self.rows())
            .map(|r| dot(self.row(r), self.row(r)).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// `a · b` for `a: [r×k]`, `b: [k×c]`.
///
/// Each output entry accumulates its `k` products in increasing index order,
/// starting from zero.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, k) = a.as_matrix("matmul")?;
    let (k2, c) = b.as_matrix("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{r}x{k}] x [{k2}x{c}]")));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let b_row = &b.data[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Tensor::matrix(r, c, out)
}

/// `a · bᵀ` for `a: [r×k]`, `b: [c×k]`; same accumulation order as [`matmul`].
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, k) = a.as_matrix("matmul_bt")?;
    let (c, k2) = b.as_matrix("matmul_bt")?;
    if k != k2 {
        return Err(Error::shape("matmul_bt", format!("[{r}x{k}] x [{c}x{k2}]ᵀ")));
    }
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..c {
            out.push(dot(a_row, &b.data[j * k..(j + 1) * k]));
        }
    }
    Tensor::matrix(r, c, out)
}

/// `aᵀ · b` for `a: [n×r]`, `b: [n×c]`; accumulates over `n` in increasing order.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, r) = a.as_matrix("matmul_at")?;
    let (n2, c) = b.as_matrix("matmul_at")?;
    if n != n2 {
        return Err(Error::shape("matmul_at", format!("[{n}x{r}]ᵀ x [{n2}x{c}]")));
    }
    let mut out = vec![0.0; r * c];
    for s in 0..n {
        let a_row = &a.data[s * r..(s + 1) * r];
        let b_row = &b.data[s * c..(s + 1) * c];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * c..(i + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(r, c, out)
}

/// `y = A x` for a matrix and a flat vector.
pub fn matvec(a: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (r, c) = a.as_matrix("matvec")?;
    if x.len() != c {
        return Err(Error::shape("matvec", format!("[{r}x{c}] x [{}]", x.len())));
    }
    Ok((0..r).map(|i| dot(a.row(i), x)).collect())
}

/// `y = Aᵀ x`.
pub fn matvec_t(a: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (r, c) = a.as_matrix("matvec_t")?;
    if x.len() != r {
        return Err(Error::shape("matvec_t", format!("[{r}x{c}]ᵀ x [{}]", x.len())));
    }
    let mut out = vec![0.0; c];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &av) in out.iter_mut().zip(a.row(i)) {
            *o += xi * av;
        }
    }
    Ok(out)
}

/// Arithmetic mean that does not depend on the order of `values`.
///
/// Sorts in place, then averages the offsets from the smallest value, so a
/// run of identical values returns that value exactly.
pub fn order_free_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let base = values[0];
    let offsets = values.iter().fold(0.0, |acc, v| acc + (v - base));
    base + offsets / values.len() as f64
}

/// Population mean, population variance and entrywise max norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrixStats {
    pub mean: f64,
    pub variance: f64,
    pub max_abs: f64,
}

pub fn stats(t: &Tensor) -> Result<MatrixStats> {
    stats_of(t.data())
}

pub fn stats_of(values: &[f64]) -> Result<MatrixStats> {
    if values.is_empty() {
        return Err(Error::domain("stats of an empty tensor"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    // two-pass: the centred sum keeps c²-scaling exact up to rounding
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let max_abs = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    Ok(MatrixStats {
        mean,
        variance,
        max_abs,
    })
}

/// Largest singular value by power iteration on `AᵀA`.
///
/// Starts from the normalised all-ones vector. The estimate `‖A v_k‖` is
/// nondecreasing in `k`; iteration stops once an update improves it by no
/// more than `tol` (relative) or after `iters` rounds. If the start vector
/// happens to lie in the null space of `A` the iteration restarts from the
/// basis vector of the column with the largest norm.
pub fn spectral_norm(t: &Tensor, iters: usize, tol: f64) -> Result<f64> {
    if iters == 0 {
        return Err(Error::domain("spectral_norm needs at least one iteration"));
    }
    let (_, c) = t.as_matrix("spectral_norm")?;
    if t.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let start = vec![1.0 / (c as f64).sqrt(); c];
    let est = power_iterate(t, start, iters, tol)?;
    if est > 0.0 {
        return Ok(est);
    }
    let best_col = (0..c)
        .map(|j| (j, (0..t.rows()).map(|i| t.get(i, j).powi(2)).sum::<f64>()))
        .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
        .0;
    let mut start = vec![0.0; c];
    start[best_col] = 1.0;
    power_iterate(t, start, iters, tol)
}

fn power_iterate(a: &Tensor, mut v: Vec<f64>, iters: usize, tol: f64) -> Result<f64> {
    let mut best = 0.0_f64;
    for _ in 0..iters {
        let u = matvec(a, &v)?;
        let sigma = dot(&u, &u).sqrt();
        if sigma == 0.0 {
            return Ok(best);
        }
        let improved = sigma - best;
        best = best.max(sigma);
        if improved <= tol * sigma {
            break;
        }
        let w = matvec_t(a, &u)?;
        let wn = dot(&w, &w).sqrt();
        if wn == 0.0 {
            break;
        }
        v = w.into_iter().map(|x| x / wn).collect();
    }
    Ok(best)
}

/// Every power-iteration estimate `‖A v_k‖` for `k = 0..iters`, without early exit.
pub fn power_iteration_history(t: &Tensor, iters: usize) -> Result<Vec<f64>> {
    let (_, c) = t.as_matrix("power_iteration_history")?;
    let mut v = vec![1.0 / (c as f64).sqrt(); c];
    let mut history = Vec::with_capacity(iters);
    for _ in 0..iters {
        let u = matvec(t, &v)?;
        history.push(dot(&u, &u).sqrt());
        let w = matvec_t(t, &u)?;
        let wn = dot(&w, &w).sqrt();
        if wn == 0.0 {
            break;
        }
        v = w.into_iter().map(|x| x / wn).collect();
    }
    Ok(history)
}

/// Seeded random stream: ChaCha8 keyed by `seed`, with `stream_id` selecting
/// an independent ChaCha stream. Equal `(seed, stream_id)` pairs always yield
/// equal draw sequences.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

/// I.i.d. `N(mean, std²)` entries drawn in row-major order.
pub fn sample_gaussian(rng: &mut RngStream, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
    if std.is_nan() || std < 0.0 || !std.is_finite() || !mean.is_finite() {
        return Err(Error::domain(format!(
            "gaussian needs finite mean and std >= 0, got mean={mean}, std={std}"
        )));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| mean + std * rng.standard_normal()).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Unit-norm vector drawn uniformly from the sphere.
pub fn sample_unit_vector(rng: &mut RngStream, dim: usize) -> Result<Vec<f64>> {
    loop {
        let v = sample_gaussian(rng, &[dim], 0.0, 1.0)?.into_data();
        let norm = dot(&v, &v).sqrt();
        if norm > 0.0 {
            return Ok(v.into_iter().map(|x| x / norm).collect());
        }
    }
}
