use crate::error::{Error, Result};
use crate::tensor::{dot, matmul, sym_eigen, DenseTensor};

/// Eigenvalues above `RANK_THRESHOLD * lambda_max` count toward the rank.
pub const RANK_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct KernelReport {
    pub rank: usize,
    pub kernel_dim: usize,
    /// Orthonormal basis of the numerical kernel, one vector per entry.
    pub kernel_basis: Vec<Vec<f64>>,
    pub eigen_threshold: f64,
    pub eigenvalues: Vec<f64>,
}

/// BN folded into an affine map of the raw input: `BN(W_i X) = w_prime X + b_prime`.
#[derive(Debug, Clone)]
pub struct EffectiveWeight {
    pub w_prime: DenseTensor,
    /// Length `B`; every entry equal.
    pub b_prime: DenseTensor,
}

fn row_means(x: &DenseTensor) -> Vec<f64> {
    (0..x.rows()).map(|i| x.row(i).iter().sum::<f64>() / x.cols() as f64).collect()
}

/// `Sigma_X = (1/B) (X - X_bar)(X - X_bar)^T` for samples stored as columns.
pub fn covariance(x: &DenseTensor) -> Result<DenseTensor> {
    let (n, b) = x.expect_2d("covariance")?;
    let means = row_means(x);
    let centered: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().map(|v| v - means[i]).collect()).collect();
    let mut sigma = DenseTensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let s = dot(&centered[i], &centered[j]) / b as f64;
            sigma.set(i, j, s);
            sigma.set(j, i, s);
        }
    }
    Ok(sigma)
}

/// Centers the rows of `x` and applies `Sigma_X^{-1/2}`, so the result has
/// zero-mean rows and identity covariance. Needs a full-rank covariance.
pub fn whiten(x: &DenseTensor) -> Result<DenseTensor> {
    let (n, b) = x.expect_2d("whiten")?;
    let eig = sym_eigen(&covariance(x)?)?;
    let lambda_max = eig.eigenvalues[0];
    if eig.eigenvalues.iter().any(|&l| l <= RANK_THRESHOLD * lambda_max) {
        return Err(Error::Degenerate { context: "covariance is rank deficient; cannot whiten".into() });
    }
    let mut inv_sqrt = DenseTensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let s: f64 = (0..n)
                .map(|k| eig.eigenvectors.get(i, k) * eig.eigenvectors.get(j, k) / eig.eigenvalues[k].sqrt())
                .sum();
            inv_sqrt.set(i, j, s);
        }
    }
    let means = row_means(x);
    let mut centered = x.clone();
    for i in 0..n {
        centered.row_mut(i).iter_mut().for_each(|v| *v -= means[i]);
    }
    debug_assert_eq!(centered.cols(), b);
    matmul(&inv_sqrt, &centered)
}

/// Rank and kernel of a symmetric PSD matrix; eigenvalues at or below
/// `threshold * lambda_max` are treated as zero.
pub fn kernel_analysis(sigma: &DenseTensor, threshold: f64) -> Result<KernelReport> {
    let eig = sym_eigen(sigma)?;
    let n = eig.eigenvalues.len();
    let lambda_max = eig.eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    if let Some(&lowest) = eig.eigenvalues.last() {
        if lowest < -1e-8 * lambda_max.max(f64::MIN_POSITIVE) && lowest < -1e-300 {
            return Err(Error::Validation(format!("matrix is not positive semi-definite (eigenvalue {lowest})")));
        }
    }
    let cut = threshold * lambda_max;
    let rank = if lambda_max > 0.0 { eig.eigenvalues.iter().filter(|&&l| l > cut).count() } else { 0 };
    let kernel_basis = (rank..n).map(|k| eig.vector(k)).collect();
    Ok(KernelReport { rank, kernel_dim: n - rank, kernel_basis, eigen_threshold: cut, eigenvalues: eig.eigenvalues })
}

/// Effective weight of batch normalization for one unit:
/// `w' = gamma W_i / sqrt(W_i Sigma W_i^T)`,
/// `b' = beta e_B - gamma (W_i x_bar) e_B / sqrt(W_i Sigma W_i^T)`.
///
/// A row in the numerical kernel of `Sigma_X` yields
/// [`Error::KernelCollapse`]: BN then outputs `beta e_B`.
pub fn effective_weight(w: &DenseTensor, x: &DenseTensor, gamma: f64, beta: f64) -> Result<EffectiveWeight> {
    let n = w.expect_1d("effective_weight row")?;
    let (xn, b) = x.expect_2d("effective_weight input")?;
    if n != xn {
        return Err(Error::Dimension(format!("weight row has {n} entries, input has {xn} features")));
    }
    let sigma = covariance(x)?;
    let wv = w.data();
    let sw: Vec<f64> = (0..n).map(|i| dot(sigma.row(i), wv)).collect();
    let q = dot(wv, &sw);
    let lambda_max = sym_eigen(&sigma)?.eigenvalues[0].max(0.0);
    if q <= RANK_THRESHOLD * lambda_max * dot(wv, wv) || q <= 0.0 {
        return Err(Error::KernelCollapse { beta });
    }
    let scale = gamma / q.sqrt();
    let w_prime = w.scale(scale);
    let means = row_means(x);
    let offset = beta - scale * dot(wv, &means);
    Ok(EffectiveWeight { w_prime, b_prime: DenseTensor::from_parts(vec![b], vec![offset; b]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalizers::{batch_norm, weight_norm, Method, NormalizerSpec};
    use crate::tensor::{norm2, SeededRng};

    fn whitened(rng: &mut SeededRng, n: usize, b: usize) -> DenseTensor {
        whiten(&rng.normal_tensor(&[n, b], 1.0)).unwrap()
    }

    #[test]
    fn covariance_of_repeated_column_is_zero() {
        let x = DenseTensor::from_rows(&[vec![2.0; 4], vec![-1.0; 4], vec![0.5; 4]]).unwrap();
        assert!(covariance(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn covariance_of_whitened_is_identity() {
        let mut rng = SeededRng::new(40);
        let x = whitened(&mut rng, 5, 20);
        assert!(covariance(&x).unwrap().max_abs_diff(&DenseTensor::identity(5)) < 1e-10);
    }

    #[test]
    fn rank_bounded_by_batch() {
        let mut rng = SeededRng::new(41);
        let x = rng.normal_tensor(&[16, 4], 1.0);
        let r = kernel_analysis(&covariance(&x).unwrap(), RANK_THRESHOLD).unwrap();
        assert!(r.rank <= 4);
        assert_eq!(r.rank + r.kernel_dim, 16);
    }

    #[test]
    fn identity_has_full_rank() {
        let r = kernel_analysis(&DenseTensor::identity(6), RANK_THRESHOLD).unwrap();
        assert_eq!((r.rank, r.kernel_dim), (6, 0));
    }

    #[test]
    fn kernel_dimension_bound_and_basis() {
        let mut rng = SeededRng::new(42);
        let x = rng.normal_tensor(&[8, 3], 1.0);
        let sigma = covariance(&x).unwrap();
        let r = kernel_analysis(&sigma, RANK_THRESHOLD).unwrap();
        assert!(r.kernel_dim >= 5);
        for _ in 0..10 {
            let mut w = vec![0.0; 8];
            for basis in &r.kernel_basis {
                let c = rng.normal();
                w.iter_mut().zip(basis).for_each(|(a, b)| *a += c * b);
            }
            let ws: Vec<f64> = (0..8).map(|j| dot(&w, &sigma.col(j))).collect();
            assert!(norm2(&ws) <= 1e-8);
        }
    }

    #[test]
    fn asymmetric_rejected() {
        let a = DenseTensor::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(kernel_analysis(&a, RANK_THRESHOLD), Err(Error::Validation(_))));
    }

    #[test]
    fn effective_weight_reproduces_bn() {
        let mut rng = SeededRng::new(43);
        for _ in 0..20 {
            let (n, b) = (6, 9);
            let x = rng.normal_tensor(&[n, b], 1.0).map(|v| v + 0.5);
            let w = rng.normal_tensor(&[n], 1.0);
            let (gamma, beta) = (rng.uniform_range(0.2, 3.0), rng.uniform_range(-2.0, 2.0));
            let ew = effective_weight(&w, &x, gamma, beta).unwrap();
            let y = matmul(&w.reshape(&[1, n]).unwrap(), &x).unwrap();
            let mut spec = NormalizerSpec::plain(Method::BatchNorm, 0.0).with_affine(vec![gamma], vec![beta]);
            let bn = batch_norm(&y, &mut spec).unwrap();
            let folded = matmul(&ew.w_prime.reshape(&[1, n]).unwrap(), &x).unwrap();
            for k in 0..b {
                assert!((folded.data()[k] + ew.b_prime.data()[k] - bn.data()[k]).abs() < 1e-9);
            }
            let sigma = covariance(&x).unwrap();
            let sw: Vec<f64> = (0..n).map(|i| dot(sigma.row(i), ew.w_prime.data())).collect();
            let q = dot(ew.w_prime.data(), &sw);
            assert!((q - gamma * gamma).abs() <= 1e-8 * gamma * gamma);
        }
    }

    #[test]
    fn whitened_input_degenerates_to_weight_norm() {
        let mut rng = SeededRng::new(44);
        let x = whitened(&mut rng, 4, 12);
        let w = rng.normal_tensor(&[4], 1.0);
        let ew = effective_weight(&w, &x, 1.0, 0.0).unwrap();
        let wn = weight_norm(&w, 1.0).unwrap();
        let cos = dot(ew.w_prime.data(), wn.data()) / norm2(ew.w_prime.data());
        assert!(cos >= 1.0 - 1e-8);
    }

    #[test]
    fn kernel_row_collapses() {
        let mut rng = SeededRng::new(45);
        let x = rng.normal_tensor(&[16, 4], 1.0);
        let r = kernel_analysis(&covariance(&x).unwrap(), RANK_THRESHOLD).unwrap();
        let w = DenseTensor::vector(r.kernel_basis[0].clone()).unwrap();
        assert!(matches!(effective_weight(&w, &x, 1.3, 0.25), Err(Error::KernelCollapse { beta }) if beta == 0.25));
        let y = matmul(&w.reshape(&[1, 16]).unwrap(), &x).unwrap();
        let mut spec = NormalizerSpec::plain(Method::BatchNorm, 1e-5).with_affine(vec![1.3], vec![0.25]);
        let out = batch_norm(&y, &mut spec).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.25).abs() < 1e-8));
    }
}
