//! Vector geometry behind every standardization: mean vector, centering
//! projection onto the hyperplane orthogonal to `e_n = (1, ..., 1)`, variance,
//! the standardization `N(v)` and the orthogonal decomposition
//! `v = gamma * N(v) + beta * e_n`.
//!
//! `N(v)` lies on the sphere of radius `sqrt(n)` inside `e_n`'s orthogonal
//! complement. It is unchanged by `v -> alpha * v + t * e_n` for `alpha > 0`
//! and flips sign for `alpha < 0`.

use crate::error::{Error, Result};
use crate::tensor::{norm2, DenseTensor};

/// Spread below this fraction of `||v||` is treated as zero: the centered
/// vector is then rounding noise and has no meaningful direction.
pub const DEGENERATE_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// Per-vector standard deviation `sigma_v`.
    pub gamma: f64,
    /// Mean `(1/n) e_n^T v`.
    pub beta: f64,
    /// `N(v)`, on the sphere of radius `sqrt(n)`.
    pub direction: DenseTensor,
    pub n: usize,
}

impl Decomposition {
    /// `gamma * N(v) + beta * e_n`
    pub fn reconstruct(&self) -> DenseTensor {
        self.direction.map(|d| self.gamma * d + self.beta)
    }
}

pub(crate) fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub(crate) fn centered(v: &[f64]) -> Vec<f64> {
    if let [a, b] = *v {
        let d = (a - b) / 2.0;
        return vec![d, -d];
    }
    let m = mean_of(v);
    v.iter().map(|x| x - m).collect()
}

/// True when the centered part of `v` is indistinguishable from zero.
pub(crate) fn is_degenerate(v: &[f64], centered_norm: f64) -> bool {
    centered_norm == 0.0 || centered_norm <= DEGENERATE_RTOL * norm2(v)
}

pub fn mean_vector(v: &DenseTensor) -> Result<(f64, DenseTensor)> {
    let n = v.expect_1d("mean_vector")?;
    let m = mean_of(v.data());
    Ok((m, DenseTensor::from_parts(vec![n], vec![m; n])))
}

/// `P_e v = v - mean(v) e_n`, orthogonal to `e_n`.
pub fn center(v: &DenseTensor) -> Result<DenseTensor> {
    let n = v.expect_1d("center")?;
    Ok(DenseTensor::from_parts(vec![n], centered(v.data())))
}

/// The explicit projector `I_n - (1/n) e_n e_n^T`.
pub fn centering_projector(n: usize) -> DenseTensor {
    let mut p = DenseTensor::identity(n);
    p.data_mut().iter_mut().for_each(|x| *x -= 1.0 / n as f64);
    p
}

/// Population variance `(1/n) ||v - mean(v)||^2`.
pub fn variance(v: &DenseTensor) -> Result<f64> {
    let n = v.expect_1d("variance")?;
    let c = centered(v.data());
    Ok(c.iter().map(|x| x * x).sum::<f64>() / n as f64)
}

/// `N(v) = (v - mean) / sqrt(var + eps)`. At `eps = 0` this is exactly
/// `sqrt(n) (v - mean) / ||v - mean||`, with norm `sqrt(n)`.
pub fn standardize(v: &DenseTensor, eps: f64) -> Result<DenseTensor> {
    let n = v.expect_1d("standardize")?;
    if n < 2 {
        return Err(Error::Dimension("standardize needs n >= 2; the centered vector of a scalar is always zero".into()));
    }
    if eps < 0.0 {
        return Err(Error::Config(format!("eps must be >= 0, got {eps}")));
    }
    let out = standardize_slice(v.data(), eps).map_err(|_| Error::Degenerate {
        context: "zero variance at eps = 0: the standardization sphere is undefined".into(),
    })?;
    Ok(DenseTensor::from_parts(vec![n], out))
}

/// Slice kernel shared with the tensor-level operator. Returns the inverse
/// scale alongside the output so callers can run the backward pass.
pub(crate) fn standardize_with_scale(v: &[f64], eps: f64) -> std::result::Result<(Vec<f64>, f64), ()> {
    let n = v.len() as f64;
    let c = centered(v);
    let sq: f64 = c.iter().map(|x| x * x).sum();
    if eps == 0.0 {
        let norm = sq.sqrt();
        if is_degenerate(v, norm) {
            return Err(());
        }
        // Dividing by the rms rather than multiplying by its reciprocal keeps
        // the two-sample case at exactly +-1.
        let rms = (sq / n).sqrt();
        Ok((c.iter().map(|x| x / rms).collect(), 1.0 / rms))
    } else {
        let k = 1.0 / (sq / n + eps).sqrt();
        Ok((c.iter().map(|x| k * x).collect(), k))
    }
}

pub(crate) fn standardize_slice(v: &[f64], eps: f64) -> std::result::Result<Vec<f64>, ()> {
    standardize_with_scale(v, eps).map(|(out, _)| out)
}

/// `v = gamma * N(v) + beta * e_n` with `gamma = sigma_v`, `beta = mean(v)`.
pub fn decompose(v: &DenseTensor) -> Result<Decomposition> {
    let n = v.expect_1d("decompose")?;
    let direction = standardize(v, 0.0)?;
    let gamma = variance(v)?.sqrt();
    let beta = mean_of(v.data());
    Ok(Decomposition { gamma, beta, direction, n })
}
