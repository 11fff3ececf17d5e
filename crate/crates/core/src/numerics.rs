//! Dense row-major f64 tensors and the handful of differentiable operations
//! the encoder needs. Every forward op has a matching `*_backward` that maps
//! an upstream gradient to input gradients; `grad_check` validates them
//! against central finite differences.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite value encountered: {0}")]
    NonFiniteValue(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(NumericsError::ShapeMismatch(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::ShapeMismatch("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    /// 2-D tensor that may have zero rows; used for empty result sets.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Tensor { shape: vec![rows, cols], data }
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

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all but the last dimension.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.cols().max(1)
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        let mut flat = 0;
        for (i, (&x, &d)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(x < d, "index {x} out of bounds for dim {i} of size {d}");
            flat = flat * d + x;
        }
        self.data[flat]
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(NumericsError::NonFiniteValue(what.to_string()))
        }
    }
}

fn check_2d(t: &Tensor, name: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(NumericsError::ShapeMismatch(format!("{name} must be 2-D, got {s:?}"))),
    }
}

// Raw kernels over row-major slices. Summation order is fixed: k ascending.

/// c[m,n] += a[m,k] · b[k,n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = check_2d(a, "lhs")?;
    let (k2, n) = check_2d(b, "rhs")?;
    if k != k2 {
        return Err(NumericsError::ShapeMismatch(format!("matmul inner dims {k} vs {k2}")));
    }
    let mut c = vec![0.0; m * n];
    gemm_nn(&a.data, &b.data, &mut c, m, k, n);
    Ok(Tensor::matrix(m, n, c))
}

/// Returns (dA, dB) = (dC·Bᵀ, Aᵀ·dC).
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = check_2d(a, "lhs")?;
    let (_, n) = check_2d(b, "rhs")?;
    if dc.shape() != [m, n] {
        return Err(NumericsError::ShapeMismatch(format!("upstream gradient {:?} vs [{m}, {n}]", dc.shape())));
    }
    let mut da = vec![0.0; m * k];
    gemm_nt(&dc.data, &b.data, &mut da, m, n, k);
    let mut db = vec![0.0; k * n];
    gemm_tn(&a.data, &dc.data, &mut db, m, k, n);
    Ok((Tensor::matrix(m, k, da), Tensor::matrix(k, n, db)))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Softmax over the last axis with max subtraction.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    let c = y.cols();
    for row in y.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    y
}

/// dx = y ⊙ (dy − ⟨dy, y⟩) per row.
pub(crate) fn softmax_backward_row(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((d, &yv), &g) in dx.iter_mut().zip(y).zip(dy) {
        *d = yv * (g - dot);
    }
}

pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(NumericsError::ShapeMismatch("softmax backward".into()));
    }
    let mut dx = y.zeros_like();
    let c = y.cols();
    for ((yr, dyr), dxr) in y.data.chunks(c).zip(dy.data.chunks(c)).zip(dx.data.chunks_mut(c)) {
        softmax_backward_row(yr, dyr, dxr);
    }
    Ok(dx)
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Per-row statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, LayerNormCache)> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return Err(NumericsError::ShapeMismatch(format!(
            "layer norm affine params ({}, {}) vs last dim {c}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut y = x.zeros_like();
    let mut xhat = x.zeros_like();
    let mut inv_std = Vec::with_capacity(x.rows());
    for ((xr, yr), hr) in x.data.chunks(c).zip(y.data.chunks_mut(c)).zip(xhat.data.chunks_mut(c)) {
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            hr[j] = (xr[j] - mean) * is;
            yr[j] = hr[j] * gamma.data[j] + beta.data[j];
        }
        inv_std.push(is);
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_backward(cache: &LayerNormCache, gamma: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c = dy.cols();
    let mut dx = dy.zeros_like();
    let mut dgamma = gamma.zeros_like();
    let mut dbeta = gamma.zeros_like();
    let mut dxhat = vec![0.0; c];
    for (r, (dyr, dxr)) in dy.data.chunks(c).zip(dx.data.chunks_mut(c)).enumerate() {
        let hr = cache.xhat.row(r);
        for j in 0..c {
            dgamma.data[j] += dyr[j] * hr[j];
            dbeta.data[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma.data[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        let is = cache.inv_std[r];
        for j in 0..c {
            dxr[j] = is * (dxhat[j] - mean_d - hr[j] * mean_dh);
        }
    }
    (dx, dgamma, dbeta)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu_scalar(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// x·Φ(x) with the exact Gaussian CDF.
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| gelu_scalar(v)).collect() }
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().zip(&dy.data).map(|(&v, &g)| g * gelu_grad_scalar(v)).collect(),
    }
}

/// Mean negative log-likelihood over rows, with its gradient
/// (softmax − one-hot) / rows.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k) = check_2d(logits, "logits")?;
    if targets.len() != b {
        return Err(NumericsError::ShapeMismatch(format!("{} targets for {b} rows", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(NumericsError::IndexOutOfRange { index: bad, len: k });
    }
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        // log-sum-exp form stays finite where ln(softmax) would underflow
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        grad.row_mut(i)[t] -= 1.0;
    }
    grad.scale(1.0 / b as f64);
    Ok((loss / b as f64, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub n_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares the analytic gradient of `f` at `x` with central finite
/// differences (step 1e-5). `f` returns the scalar value and its gradient.
pub fn grad_check<F>(f: F, x: &[f64], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    grad_check_indices(f, x, tolerance, 0..x.len())
}

/// Like [`grad_check`], restricted to the coordinates yielded by `indices`.
pub fn grad_check_indices<F, I>(f: F, x: &[f64], tolerance: f64, indices: I) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
    I: IntoIterator<Item = usize>,
{
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFiniteValue("grad_check input".into()));
    }
    let (value, analytic) = f(x)?;
    if !value.is_finite() || analytic.iter().any(|g| !g.is_finite()) {
        return Err(NumericsError::NonFiniteValue("grad_check analytic evaluation".into()));
    }
    if analytic.len() != x.len() {
        return Err(NumericsError::ShapeMismatch("gradient length differs from input".into()));
    }
    let mut probe = x.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: None, n_checked: 0, tolerance };
    for i in indices {
        let orig = probe[i];
        probe[i] = orig + GRAD_CHECK_STEP;
        let plus = f(&probe)?.0;
        probe[i] = orig - GRAD_CHECK_STEP;
        let minus = f(&probe)?.0;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::NonFiniteValue(format!("finite difference at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        let ga = analytic[i];
        let err = (ga - numeric).abs() / ga.abs().max(numeric.abs()).max(1e-8);
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
        report.n_checked += 1;
    }
    Ok(report)
}
