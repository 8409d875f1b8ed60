//! Dense double-precision vectors and matrices, a reproducible random
//! number generator, and central finite differences.
//!
//! Everything here is deliberately naive: matrices are row-major `Vec<f64>`
//! and products are plain loops, so results are bit-reproducible across
//! platforms and thread counts.

use std::fmt;
use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default step for [`finite_diff_grad`].
pub const DEFAULT_FD_EPS: f64 = 1e-6;

/// Magnitude below which [`relative_error`] switches to absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_with_floor(a, b, REL_ERR_FLOOR)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error_with_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// A non-empty vector of finite `f64` values.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Builds a vector, rejecting empty input and non-finite entries.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidConfig("vector length must be positive".into()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("vector entry {i}")));
        }
        Ok(Vector(data))
    }

    /// Panics if `len == 0`.
    pub fn zeros(len: usize) -> Self {
        Self::filled(len, 0.0)
    }

    /// Panics if `len == 0`.
    pub fn ones(len: usize) -> Self {
        Self::filled(len, 1.0)
    }

    pub fn filled(len: usize, value: f64) -> Self {
        assert!(len > 0, "vector length must be positive");
        assert!(value.is_finite());
        Vector(vec![value; len])
    }

    /// Unit vector `e_index` of the given length.
    pub fn basis(len: usize, index: usize) -> Self {
        let mut v = Self::zeros(len);
        v.0[index] = 1.0;
        v
    }

    /// Every entry drawn from `N(0, std²)`.
    pub fn gaussian(len: usize, std: f64, rng: &mut Rng) -> Self {
        assert!(len > 0, "vector length must be positive");
        Vector((0..len).map(|_| std * rng.normal()).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false; kept for API symmetry with slices.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Mutable access to the raw entries. Callers are responsible for
    /// keeping entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        self.check_same_len("dot", other)?;
        Ok(dot_slices(&self.0, &other.0))
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Vector) -> Result<Vector> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Vector {
        Vector(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector(self.0.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Vector) -> Result<f64> {
        self.check_same_len("max_abs_diff", other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn add_assign(&mut self, other: &Vector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    fn zip_with(&self, op: &'static str, other: &Vector, f: impl Fn(f64, f64) -> f64) -> Result<Vector> {
        self.check_same_len(op, other)?;
        Ok(Vector(self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect()))
    }

    fn check_same_len(&self, op: &'static str, other: &Vector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::dims(op, format!("len {}", self.len()), format!("len {}", other.len())));
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        Vector::from_vec(data)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

impl Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.0).finish()
    }
}

/// Row-major dense matrix of finite `f64` values.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;

    fn try_from(r: MatrixRepr) -> Result<Self> {
        Matrix::from_row_major(r.rows, r.cols, r.data)
    }
}

impl From<Matrix> for MatrixRepr {
    fn from(m: Matrix) -> Self {
        MatrixRepr {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl Matrix {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidConfig(format!("matrix shape {rows}x{cols} must be positive")));
        }
        if data.len() != rows * cols {
            return Err(Error::dims(
                "matrix construction",
                format!("{rows}x{cols}"),
                format!("{} entries", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidConfig("ragged matrix rows".into()));
        }
        Self::from_row_major(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix shape must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Every entry drawn from `N(0, std²)`, row-major draw order.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let mut m = Self::zeros(rows, cols);
        for v in &mut m.data {
            *v = std * rng.normal();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw row-major entries. Callers are responsible
    /// for keeping entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `selfᵀ · v`.
    pub fn matvec_transposed(&self, v: &Vector) -> Result<Vector> {
        if self.rows != v.len() {
            return Err(Error::dims(
                "matvec_transposed",
                format!("matrix {}x{}", self.rows, self.cols),
                format!("vector len {}", v.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * vr;
            }
        }
        finite_vector("matvec_transposed", out)
    }

    /// Outer product `u · vᵀ`.
    pub fn outer(u: &Vector, v: &Vector) -> Matrix {
        let mut data = Vec::with_capacity(u.len() * v.len());
        for &a in u.iter() {
            data.extend(v.iter().map(|&b| a * b));
        }
        Matrix {
            rows: u.len(),
            cols: v.len(),
            data,
        }
    }

    /// `diag(d) · self`: row `i` multiplied by `d[i]`.
    pub fn scale_rows(&self, d: &Vector) -> Result<Matrix> {
        if d.len() != self.rows {
            return Err(Error::dims("scale_rows", format!("{}x{}", self.rows, self.cols), format!("len {}", d.len())));
        }
        let mut out = self.clone();
        for (r, &s) in d.iter().enumerate() {
            for w in &mut out.data[r * self.cols..(r + 1) * self.cols] {
                *w *= s;
            }
        }
        Ok(out)
    }

    /// `self · diag(d)`: column `j` multiplied by `d[j]`.
    pub fn scale_cols(&self, d: &Vector) -> Result<Matrix> {
        if d.len() != self.cols {
            return Err(Error::dims("scale_cols", format!("{}x{}", self.rows, self.cols), format!("len {}", d.len())));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols) {
            for (w, &s) in row.iter_mut().zip(d.iter()) {
                *w *= s;
            }
        }
        Ok(out)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols)).finish()
    }
}

fn finite_vector(op: &str, data: Vec<f64>) -> Result<Vector> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(Vector(data))
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

/// Dot product with four interleaved partial sums, so the additions
/// pipeline instead of forming one serial chain. Deterministic for a given
/// length.
fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let (a4, a_rest) = a.split_at(a.len() / 4 * 4);
    let (b4, b_rest) = b.split_at(a4.len());
    for (x, y) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a_rest.iter().zip(b_rest) {
        sum += x * y;
    }
    sum
}

/// `m · v`.
pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    if m.cols != v.len() {
        return Err(Error::dims(
            "matvec",
            format!("matrix {}x{}", m.rows, m.cols),
            format!("vector len {}", v.len()),
        ));
    }
    let out = (0..m.rows)
        .map(|r| dot_slices(m.row(r), v.as_slice()))
        .collect();
    finite_vector("matvec", out)
}

/// Logistic function of a scalar, evaluated without overflow for any sign.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic function.
pub fn sigmoid(v: &Vector) -> Vector {
    v.map(sigmoid_scalar)
}

/// Central finite-difference gradient of `f` at `x`.
///
/// Fails with the offending coordinate if `f` returns a non-finite value at
/// any perturbed point.
pub fn finite_diff_grad<F>(mut f: F, x: &Vector, eps: f64) -> Result<Vector>
where
    F: FnMut(&Vector) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(format!("finite-difference eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        probe.0[i] = orig + eps;
        let plus = f(&probe);
        probe.0[i] = orig - eps;
        let minus = f(&probe);
        probe.0[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at perturbed coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(Vector(grad))
}

/// SplitMix64 generator.
///
/// Update rule, with wrapping 64-bit arithmetic:
///
/// ```text
/// state += 0x9E3779B97F4A7C15
/// z = state
/// z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
/// z = (z ^ (z >> 27)) * 0x94D049BB133111EB
/// return z ^ (z >> 31)
/// ```
///
/// Uniforms are `(next >> 11) * 2^-53` in `[0, 1)`. Normals use the cosine
/// branch of Box–Muller on two consecutive uniforms `u1, u2`:
/// `sqrt(-2 ln(1 - u1)) * cos(2π u2)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Independent stream keyed by `(seed, stream)`; the seed is
    /// `mix64(seed ^ mix64(stream + 0x9E3779B97F4A7C15))`.
    pub fn derived(seed: u64, stream: u64) -> Self {
        Rng::new(mix64(seed ^ mix64(stream.wrapping_add(GOLDEN_GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)` by multiply-shift on the top 32 bits
    /// (bias below 2^-32 for the sizes used here).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (((self.next_u64() >> 32) * n as u64) >> 32) as usize
    }

    /// Fisher–Yates shuffle, iterating from the last index down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
