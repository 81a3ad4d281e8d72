use super::{matmul, norm2, DenseTensor, SeededRng};
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix, eigenvalues sorted descending and
/// eigenvectors stored as the orthonormal columns of `eigenvectors`.
#[derive(Debug, Clone)]
pub struct EigenResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DenseTensor,
}

impl EigenResult {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.eigenvectors.col(k)
    }

    /// `Q diag(lambda) Q^T`
    pub fn reconstruct(&self) -> DenseTensor {
        let n = self.eigenvalues.len();
        let q = &self.eigenvectors;
        let mut out = DenseTensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..n).map(|k| q.get(i, k) * self.eigenvalues[k] * q.get(j, k)).sum();
                out.set(i, j, s);
            }
        }
        out
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eigen(a: &DenseTensor) -> Result<EigenResult> {
    let (n, c) = a.expect_2d("sym_eigen")?;
    if n != c {
        return Err(Error::Validation(format!("sym_eigen needs a square matrix, got {n}x{c}")));
    }
    let scale = a.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
    if !a.is_symmetric(SYMMETRY_TOL * scale) {
        return Err(Error::Validation("sym_eigen input is not symmetric".into()));
    }

    let mut m = a.clone();
    let mut v = DenseTensor::identity(n);
    let fro = a.frobenius_norm();

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * fro || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                rotate(&mut m, &mut v, p, q, cs, sn);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)));
    let eigenvalues = order.iter().map(|&k| m.get(k, k)).collect();
    let eigenvectors = v.select_cols(&order);
    Ok(EigenResult { eigenvalues, eigenvectors })
}

// Applies A <- J^T A J and V <- V J for the (p, q) plane rotation.
fn rotate(m: &mut DenseTensor, v: &mut DenseTensor, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows();
    for k in 0..n {
        let mkp = m.get(k, p);
        let mkq = m.get(k, q);
        m.set(k, p, c * mkp - s * mkq);
        m.set(k, q, s * mkp + c * mkq);
    }
    for k in 0..n {
        let mpk = m.get(p, k);
        let mqk = m.get(q, k);
        m.set(p, k, c * mpk - s * mqk);
        m.set(q, k, s * mpk + c * mqk);
    }
    m.set(p, q, 0.0);
    m.set(q, p, 0.0);
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub sigma: f64,
    /// Set when the matrix (or the iterate) is zero and no direction exists.
    pub degenerate: bool,
}

/// Largest singular value of `w` by power iteration on `W^T W` from a seeded
/// random start.
pub fn power_iteration(w: &DenseTensor, iters: usize, seed: u64) -> Result<SpectralEstimate> {
    let (_, cols) = w.expect_2d("power_iteration")?;
    if iters == 0 {
        return Err(Error::Config("power_iteration needs at least one iteration".into()));
    }
    if w.data().iter().all(|&x| x == 0.0) {
        return Ok(SpectralEstimate { sigma: 0.0, degenerate: true });
    }
    let wt = w.transpose();
    let mut rng = SeededRng::new(seed);
    let mut v = DenseTensor::from_parts(vec![cols, 1], rng.normal_vec(cols, 1.0));
    normalize(&mut v);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let u = matmul(w, &v)?;
        sigma = norm2(u.data());
        if sigma == 0.0 {
            return Ok(SpectralEstimate { sigma: 0.0, degenerate: true });
        }
        v = matmul(&wt, &u)?;
        normalize(&mut v);
    }
    let final_sigma = norm2(matmul(w, &v)?.data());
    Ok(SpectralEstimate { sigma: final_sigma.max(sigma), degenerate: false })
}

fn normalize(v: &mut DenseTensor) {
    let n = norm2(v.data());
    if n > 0.0 {
        v.data_mut().iter_mut().for_each(|x| *x /= n);
    }
}
