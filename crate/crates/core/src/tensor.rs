//! Dense row-major f64 tensors.
//!
//! Everything in the model — embeddings, hidden states, mixture parameters —
//! is carried by this one type. 64-bit floats throughout so that the
//! finite-difference suite can run at tight tolerances.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extract the single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Rows/cols view of the last axis: a `[r, c]` matrix yields `(r, c)`,
    /// a `[c]` vector yields `(1, c)`.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let c = *self.shape.last().unwrap();
                (self.len() / c.max(1), c)
            }
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.rows_cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn ensure_finite(t: &Tensor, op: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numerics(op.to_string()))
    }
}

// ── Kernels ──────────────────────────────────────────────────────────
// Shared by the graph ops and by graph-free inference paths, so both
// routes produce bitwise-identical values.

/// C[m,n] = A[m,k] · B[k,n], or A[m,k] · B[n,k]ᵀ when `transpose_b`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, transpose_b: bool) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if transpose_b {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for p in 0..k {
                    acc += ar[p] * br[p];
                }
                out[i * n + j] = acc;
            }
        }
    } else {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            let or = &mut out[i * n..(i + 1) * n];
            for (p, &av) in ar.iter().enumerate() {
                let br = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    or[j] += av * br[j];
                }
            }
        }
    }
    out
}

/// Row-wise softmax under a 0/1 mask. Masked positions are exactly zero;
/// equivalent to adding a large negative constant before a stable softmax.
/// Errors if some row has no unmasked position.
pub fn masked_softmax_rows(logits: &[f64], mask: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let base = r * cols;
        let mut max = f64::NEG_INFINITY;
        for c in 0..cols {
            if mask[base + c] != 0.0 {
                max = max.max(logits[base + c]);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::Shape(format!("masked-softmax row {} fully masked", r)));
        }
        let mut sum = 0.0;
        for c in 0..cols {
            if mask[base + c] != 0.0 {
                let e = (logits[base + c] - max).exp();
                out[base + c] = e;
                sum += e;
            }
        }
        for c in 0..cols {
            out[base + c] /= sum;
        }
    }
    Ok(out)
}

/// Row-wise layer normalization with learned scale/shift.
pub fn layer_norm_rows(x: &[f64], gamma: &[f64], beta: &[f64], rows: usize, cols: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let or = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            or[c] = gamma[c] * ((xr[c] - mean) * inv) + beta[c];
        }
    }
    out
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise log-sum-exp, shifted by the row maximum so logits up to
/// magnitude ~1e300 stay finite.
pub fn logsumexp_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = xr.iter().map(|v| (v - max).exp()).sum();
        out[r] = max + sum.ln();
    }
    out
}

pub const LOG_TWO_PI: f64 = 1.8378770664093453;

/// log N(x; mu_k, sigma_k^2 I) for each of K spherical components.
pub fn gaussian_log_density(x: &[f64], means: &[f64], scales: &[f64], k: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; k];
    for i in 0..k {
        let mu = &means[i * d..(i + 1) * d];
        let sigma = scales[i];
        let mut sq = 0.0;
        for j in 0..d {
            let diff = x[j] - mu[j];
            sq += diff * diff;
        }
        out[i] = -0.5 * d as f64 * LOG_TWO_PI - d as f64 * sigma.ln() - sq / (2.0 * sigma * sigma);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(matmul(&a, &eye, 2, 2, 2, false), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_transpose_b_agrees_with_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 3.0]; // 2x3, used as Bᵀ
        let bt = [1.0, 2.0, 0.5, 0.0, -1.0, 3.0]; // 3x2
        assert_eq!(
            matmul(&a, &b, 2, 3, 2, true),
            matmul(&a, &bt, 2, 3, 2, false)
        );
    }

    #[test]
    fn masked_softmax_two_way_split() {
        let out = masked_softmax_rows(&[0.0, 0.0, 0.0], &[1.0, 1.0, 0.0], 1, 3).unwrap();
        assert_eq!(out, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn masked_softmax_fully_masked_row_errors() {
        assert!(masked_softmax_rows(&[0.0, 0.0], &[0.0, 0.0], 1, 2).is_err());
    }

    #[test]
    fn logsumexp_overflow_safe() {
        let out = logsumexp_rows(&[1e3, 1e3, 1e3], 1, 3);
        assert!(out[0].is_finite());
        assert!((out[0] - (1e3 + 3f64.ln())).abs() < 1e-9);
        let neg = logsumexp_rows(&[-1e3, -1e3], 1, 2);
        assert!(neg[0].is_finite());
    }

    #[test]
    fn gaussian_log_density_standard_normal_at_mean() {
        // d=2, sigma=1, x=mu: -log(2*pi)
        let out = gaussian_log_density(&[0.0, 0.0], &[0.0, 0.0], &[1.0], 1, 2);
        assert!((out[0] - (-LOG_TWO_PI)).abs() < 1e-12);
        assert!((out[0] - (-1.837877)).abs() < 1e-6);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn masked_softmax_normalizes_over_unmasked(
                logits in prop::collection::vec(-1e3..1e3f64, 1..40),
                mask_bits in prop::collection::vec(any::<bool>(), 1..40),
            ) {
                let n = logits.len().min(mask_bits.len());
                let logits = &logits[..n];
                let mut mask: Vec<f64> = mask_bits[..n].iter().map(|&b| f64::from(b)).collect();
                mask[0] = 1.0; // at least one unmasked position
                let out = masked_softmax_rows(logits, &mask, 1, n).unwrap();
                let mut sum = 0.0;
                for i in 0..n {
                    if mask[i] == 0.0 {
                        prop_assert_eq!(out[i], 0.0);
                    } else {
                        sum += out[i];
                    }
                }
                prop_assert!((sum - 1.0).abs() <= 1e-12, "sum {}", sum);
            }
        }
    }
}
