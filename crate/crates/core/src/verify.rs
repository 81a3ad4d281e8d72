//! Property suites over the standardization geometry, the normalizers, the
//! analytic gradients and the SGD norm dynamics. Every check reports its
//! worst observed value next to the bound it must respect.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, mean_of};
use crate::gradients::{
    backward, check_bn_preactivation_orthogonality, check_grad_orthogonality, check_scaling_invariance, compare_gradients,
    finite_diff_detailed, forward, row_cosines, Activation, MlpConfig, MlpModel, GRAD_REL_FLOOR,
};
use crate::normalizers::{
    batch_norm, covariance, effective_weight, kernel_analysis, spectral_normalize, weight_norm, weight_standardize, whiten,
    Method, NormalizerSpec, WsVariant, RANK_THRESHOLD,
};
use crate::tensor::{dot, matmul, norm2, sym_eigen, DenseTensor, SeededRng};
use crate::trainer::{train, TrainConfig};

pub const SUITES: [&str; 9] = [
    "lemma1",
    "scaling",
    "gradients",
    "orthogonality",
    "bn-identity",
    "recurrence",
    "collapse",
    "effective-weight",
    "weight-norms",
];

const GEOMETRY_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-5;
const ORTHO_TOL: f64 = 1e-8;
const CONTROL_COSINE: f64 = 1e-3;
const CONTROL_FRACTION: f64 = 0.95;
const RECURRENCE_TOL: f64 = 1e-9;
const RECURRENCE_STEPS: usize = 2000;

const METHODS: [Method; 8] = [
    Method::BatchNorm,
    Method::LayerNorm,
    Method::GroupNorm(2),
    Method::WeightNorm,
    Method::CenteredWeightNorm,
    Method::WeightStandardization,
    Method::SpectralNorm,
    Method::None,
];

/// Replaceable building blocks, so a harness can inject a faulty primitive
/// and confirm the suites notice.
#[derive(Debug, Clone, Copy)]
pub struct Probes {
    pub center: fn(&DenseTensor) -> Result<DenseTensor>,
}

impl Default for Probes {
    fn default() -> Self {
        Self { center: geometry::center }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost(f64),
    AtLeast(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
    pub passed: bool,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, bound: Bound) -> Self {
        let passed = match bound {
            Bound::AtMost(b) => value <= b,
            Bound::AtLeast(b) => value >= b,
        };
        Self { name: name.into(), value, bound, passed }
    }

    fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value, Bound::AtMost(bound))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    /// Wall time; left out of the JSON so reruns stay byte-identical.
    #[serde(skip)]
    pub seconds: f64,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn run_suite(name: &str, seed: u64, probes: &Probes) -> Result<SuiteReport> {
    let start = Instant::now();
    let checks = match name {
        "lemma1" => lemma1(seed, probes)?,
        "scaling" => scaling(seed, probes)?,
        "gradients" => gradients(seed)?,
        "orthogonality" => orthogonality(seed)?,
        "bn-identity" => bn_identity(seed)?,
        "recurrence" => recurrence(seed)?,
        "collapse" => collapse(seed)?,
        "effective-weight" => effective_weights(seed)?,
        "weight-norms" => weight_norms(seed)?,
        _ => return Err(Error::Config(format!("unknown suite {name:?}; available: {}", SUITES.join(", ")))),
    };
    let passed = checks.iter().all(|c| c.passed);
    Ok(SuiteReport { suite: name.into(), passed, seconds: start.elapsed().as_secs_f64(), checks })
}

pub fn run_suites(names: &[&str], seed: u64, probes: &Probes) -> Result<Vec<SuiteReport>> {
    if let Some(bad) = names.iter().find(|n| !SUITES.contains(n)) {
        return Err(Error::Config(format!("unknown suite {bad:?}; available: {}", SUITES.join(", "))));
    }
    names.iter().map(|n| run_suite(n, seed, probes)).collect()
}

/// Fixed-width PASS/FAIL table, one line per check.
pub fn render_table(reports: &[SuiteReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<18} {:<44} {:>12} {:>14}  result", "suite", "check", "value", "bound");
    for r in reports {
        for c in &r.checks {
            let bound = match c.bound {
                Bound::AtMost(b) => format!("<= {b:.1e}"),
                Bound::AtLeast(b) => format!(">= {b:.1e}"),
            };
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{:<18} {:<44} {:>12.3e} {:>14}  {verdict}", r.suite, c.name, c.value, bound);
        }
    }
    out
}

/// `N(v)`, `gamma` and `beta` assembled from the probe's centering.
fn sphere(v: &DenseTensor, probes: &Probes) -> Result<(Vec<f64>, f64, f64)> {
    let c = (probes.center)(v)?;
    let n = v.len() as f64;
    let gamma = norm2(c.data()) / n.sqrt();
    if gamma == 0.0 {
        return Err(Error::Degenerate { context: "probe centering returned zero".into() });
    }
    Ok((c.data().iter().map(|x| x / gamma).collect(), gamma, mean_of(v.data())))
}

fn random_vector(rng: &mut SeededRng) -> DenseTensor {
    let n = 2 + rng.below(63);
    let scale = rng.uniform_range(0.1, 10.0);
    let offset = rng.uniform_range(-10.0, 10.0);
    DenseTensor::from_parts(vec![n], rng.normal_vec(n, scale).into_iter().map(|x| x + offset).collect())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn lemma1(seed: u64, probes: &Probes) -> Result<Vec<Check>> {
    let mut rng = SeededRng::new(seed ^ 0x1e);
    let (mut norm, mut orth, mut recon, mut energy, mut agree) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let v = random_vector(&mut rng);
        let n = v.len() as f64;
        let (dir, gamma, beta) = sphere(&v, probes)?;
        norm = norm.max((norm2(&dir) - n.sqrt()).abs() / n.sqrt());
        orth = orth.max(dir.iter().sum::<f64>().abs() / n);
        let rebuilt: Vec<f64> = dir.iter().map(|d| gamma * d + beta).collect();
        let vn = norm2(v.data());
        recon = recon.max(norm2(&rebuilt.iter().zip(v.data()).map(|(a, b)| a - b).collect::<Vec<_>>()) / vn);
        energy = energy.max((vn * vn - n * (gamma * gamma + beta * beta)).abs() / (vn * vn));
        agree = agree.max(max_abs_diff(&dir, geometry::standardize(&v, 0.0)?.data()));
    }
    Ok(vec![
        Check::at_most("norm equals sqrt(n)", norm, GEOMETRY_TOL),
        Check::at_most("orthogonal to ones", orth, GEOMETRY_TOL),
        Check::at_most("reconstruction gamma N(v) + beta e", recon, GEOMETRY_TOL),
        Check::at_most("energy ||v||^2 = n (gamma^2 + beta^2)", energy, GEOMETRY_TOL),
        Check::at_most("agrees with standardize", agree, GEOMETRY_TOL),
    ])
}

fn scaling(seed: u64, probes: &Probes) -> Result<Vec<Check>> {
    let mut rng = SeededRng::new(seed ^ 0x5ca1e);
    let (mut pos, mut neg) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let v = random_vector(&mut rng);
        let (base, _, _) = sphere(&v, probes)?;
        let alpha = 10.0 * (1.0 - rng.uniform());
        let t = rng.uniform_range(-10.0, 10.0);
        let (moved, _, _) = sphere(&v.map(|x| alpha * x + t), probes)?;
        pos = pos.max(max_abs_diff(&moved, &base));
        let alpha = -10.0 * (1.0 - rng.uniform());
        let (flipped, _, _) = sphere(&v.scale(alpha), probes)?;
        neg = neg.max(flipped.iter().zip(&base).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max));
    }
    let mut loss_dev = 0.0f64;
    for method in METHODS.into_iter().filter(|m| m.is_scaling_invariant()) {
        for s in 0..5 {
            let (model, x, y) = instance(method, Activation::Tanh, 0.0, seed.wrapping_add(s));
            loss_dev = loss_dev.max(check_scaling_invariance(&model, 0, &[0.1, 0.5, 2.0, 10.0], &x, &y)?);
        }
    }
    Ok(vec![
        Check::at_most("N(alpha v + t e) = N(v), alpha > 0", pos, GEOMETRY_TOL),
        Check::at_most("N(alpha v) = -N(v), alpha < 0", neg, GEOMETRY_TOL),
        Check::at_most("loss invariant to row scaling", loss_dev, GEOMETRY_TOL),
    ])
}

/// Two-hidden-layer model with randomized affine parameters and biases, plus
/// one batch of inputs and labels.
fn instance(method: Method, activation: Activation, eps: f64, seed: u64) -> (MlpModel, DenseTensor, Vec<usize>) {
    let cfg = MlpConfig { input_dim: 4, hidden: vec![6, 6], classes: 3, method, eps, activation, seed, ..Default::default() };
    let mut model = MlpModel::from_config(&cfg).expect("fixed valid config");
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    for l in &mut model.layers {
        if let Some(a) = l.norm.affine.as_mut() {
            a.gamma.iter_mut().for_each(|g| *g = rng.uniform_range(0.5, 1.5));
            a.beta.iter_mut().for_each(|b| *b = rng.uniform_range(-0.5, 0.5));
        }
        if let Some(b) = l.bias.as_mut() {
            b.iter_mut().for_each(|v| *v = rng.uniform_range(-0.5, 0.5));
        }
    }
    let x = rng.normal_tensor(&[4, 6], 1.0);
    let y = (0..6).map(|_| rng.below(3)).collect();
    (model, x, y)
}

fn gradients(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for method in METHODS {
        let mut worst = 0.0f64;
        for (activation, eps) in [(Activation::Tanh, 0.0), (Activation::Relu, 1e-3)] {
            for s in 0..20 {
                let (model, x, y) = instance(method, activation, eps, seed.wrapping_add(s));
                let analytic = backward(&model, &forward(&model, &x, &y)?)?;
                let fd = finite_diff_detailed(&model, &x, &y, 1e-5)?;
                worst = worst.max(compare_gradients(&model, &analytic, &fd.grads, &fd.kinked, GRAD_REL_FLOOR)?.max_rel_err);
            }
        }
        checks.push(Check::at_most(format!("finite differences, {method}"), worst, GRAD_TOL));
    }
    Ok(checks)
}

fn orthogonality(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for method in METHODS.into_iter().filter(|m| m.is_scaling_invariant()) {
        let mut worst = 0.0f64;
        for s in 0..20 {
            let (model, x, y) = instance(method, Activation::Relu, 0.0, seed.wrapping_add(s));
            for r in check_grad_orthogonality(&model, &x, &y)? {
                worst = worst.max(r.cosine.abs());
            }
        }
        checks.push(Check::at_most(format!("|cos(W, grad W)|, {method}"), worst, ORTHO_TOL));
    }
    let instances = 100;
    let mut above = 0usize;
    for s in 0..instances {
        let (model, x, y) = instance(Method::None, Activation::Relu, 0.0, seed.wrapping_add(s));
        let grads = backward(&model, &forward(&model, &x, &y)?)?;
        let worst = (0..model.layers.len())
            .flat_map(|l| row_cosines(&model, &grads, l))
            .map(|r| r.cosine.abs())
            .fold(0.0, f64::max);
        above += usize::from(worst > CONTROL_COSINE);
    }
    checks.push(Check::new(
        "unnormalized instances with max |cos| > 1e-3",
        above as f64 / instances as f64,
        Bound::AtLeast(CONTROL_FRACTION),
    ));
    Ok(checks)
}

fn bn_identity(seed: u64) -> Result<Vec<Check>> {
    let (mut yhat, mut ones) = (0.0f64, 0.0f64);
    for s in 0..20 {
        for activation in [Activation::Relu, Activation::Tanh] {
            let (model, x, y) = instance(Method::BatchNorm, activation, 0.0, seed.wrapping_add(s));
            for c in check_bn_preactivation_orthogonality(&model, &x, &y)? {
                yhat = yhat.max(c.along_yhat);
                ones = ones.max(c.along_ones);
            }
        }
    }
    Ok(vec![
        Check::at_most("<grad_y L, y_hat> (normalized)", yhat, ORTHO_TOL),
        Check::at_most("<grad_y L, e> (normalized)", ones, ORTHO_TOL),
    ])
}

fn recurrence(seed: u64) -> Result<Vec<Check>> {
    let cfg = TrainConfig {
        seed,
        epochs: 1000,
        max_steps: Some(RECURRENCE_STEPS),
        method: Method::BatchNorm,
        eps_norm: 0.0,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let s = train(&cfg)?.record.summary;
    Ok(vec![
        Check::new("steps completed", s.steps as f64, Bound::AtLeast(RECURRENCE_STEPS as f64)),
        Check::at_most("norm recurrence residual / ||W_i||^2", s.max_recurrence_resid.unwrap_or(f64::INFINITY), RECURRENCE_TOL),
        Check::at_most("steps with a shrinking row norm", s.monotone_violations as f64, 0.0),
    ])
}

fn collapse(seed: u64) -> Result<Vec<Check>> {
    let mut rng = SeededRng::new(seed ^ 0xb2);
    let mut off_sign = 0usize;
    for _ in 0..40 {
        let scale = rng.uniform_range(0.01, 100.0);
        let y = rng.normal_tensor(&[5, 2], scale).map(|v| v + 3.0);
        let out = batch_norm(&y, &mut NormalizerSpec::plain(Method::BatchNorm, 0.0))?;
        for i in 0..5 {
            let r = out.row(i);
            off_sign += usize::from(!(r == [1.0, -1.0] || r == [-1.0, 1.0]));
        }
    }
    let (n, b) = (16, 4);
    let mut short_kernels = 0usize;
    let (mut spread, mut signalled) = (0.0f64, 0usize);
    for _ in 0..100 {
        let x = rng.normal_tensor(&[n, b], 1.0);
        let report = kernel_analysis(&covariance(&x)?, RANK_THRESHOLD)?;
        short_kernels += usize::from(report.kernel_dim < n - b);
        let row = DenseTensor::from_parts(vec![n], report.kernel_basis[0].clone());
        let (gamma, beta) = (rng.uniform_range(0.5, 2.0), rng.uniform_range(-1.0, 1.0));
        let y = matmul(&row.reshape(&[1, n])?, &x)?;
        let mut spec = NormalizerSpec::plain(Method::BatchNorm, 1e-5).with_affine(vec![gamma], vec![beta]);
        let out = batch_norm(&y, &mut spec)?;
        spread = spread.max(out.data().iter().map(|v| (v - beta).abs()).fold(0.0, f64::max));
        signalled += usize::from(matches!(effective_weight(&row, &x, gamma, beta), Err(Error::KernelCollapse { .. })));
    }
    Ok(vec![
        Check::at_most("B = 2 rows not exactly (+-1, -+1)", off_sign as f64, 0.0),
        Check::at_most("batches with kernel_dim < n - B", short_kernels as f64, 0.0),
        Check::at_most("kernel row: |BN output - beta|", spread, 1e-8),
        Check::new("kernel rows flagged as collapse", signalled as f64, Bound::AtLeast(100.0)),
    ])
}

fn effective_weights(seed: u64) -> Result<Vec<Check>> {
    let mut rng = SeededRng::new(seed ^ 0xeff);
    let (mut white_cov, mut wn_gap) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let n = 3 + rng.below(6);
        let x = whiten(&rng.normal_tensor(&[n, 4 * n], 1.0))?;
        white_cov = white_cov.max(covariance(&x)?.max_abs_diff(&DenseTensor::identity(n)));
        let w = rng.normal_tensor(&[n], 1.0);
        let ew = effective_weight(&w, &x, rng.uniform_range(0.5, 2.0), 0.0)?;
        let wn = weight_norm(&w, 1.0)?;
        wn_gap = wn_gap.max(1.0 - dot(ew.w_prime.data(), wn.data()) / norm2(ew.w_prime.data()));
    }
    let (mut ellipsoid, mut folding) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = 2 + rng.below(10);
        let b = n + 2 + rng.below(10);
        let scale = rng.uniform_range(0.2, 3.0);
        let x = rng.normal_tensor(&[n, b], scale).map(|v| v + 0.5);
        let w = rng.normal_tensor(&[n], 1.0);
        let (gamma, beta) = (rng.uniform_range(0.2, 3.0), rng.uniform_range(-2.0, 2.0));
        let ew = effective_weight(&w, &x, gamma, beta)?;
        let sigma = covariance(&x)?;
        let sw: Vec<f64> = (0..n).map(|i| dot(sigma.row(i), ew.w_prime.data())).collect();
        ellipsoid = ellipsoid.max((dot(ew.w_prime.data(), &sw) - gamma * gamma).abs() / (gamma * gamma));
        let y = matmul(&w.reshape(&[1, n])?, &x)?;
        let bn = batch_norm(&y, &mut NormalizerSpec::plain(Method::BatchNorm, 0.0).with_affine(vec![gamma], vec![beta]))?;
        let folded = matmul(&ew.w_prime.reshape(&[1, n])?, &x)?;
        for k in 0..b {
            folding = folding.max((folded.data()[k] + ew.b_prime.data()[k] - bn.data()[k]).abs());
        }
    }
    Ok(vec![
        Check::at_most("whitened covariance - I", white_cov, 1e-10),
        Check::at_most("1 - cos(BN effective weight, WN)", wn_gap, 1e-8),
        Check::at_most("W' Sigma W'^T = gamma^2 (relative)", ellipsoid, 1e-8),
        Check::at_most("folded weight reproduces BN", folding, GEOMETRY_TOL),
    ])
}

fn weight_norms(seed: u64) -> Result<Vec<Check>> {
    let mut rng = SeededRng::new(seed ^ 0x3e16);
    let (mut ws_gap, mut wn_gap, mut sn_gap) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = 2 + rng.below(63);
        let scale = rng.uniform_range(0.1, 5.0);
        let w = DenseTensor::from_parts(vec![n], rng.normal_vec(n, scale));
        let ws = weight_standardize(&w, WsVariant::Ws)?;
        let cwn = weight_standardize(&w, WsVariant::Cwn)?;
        let r = (n as f64).sqrt();
        ws_gap = ws_gap.max(ws.data().iter().zip(cwn.data()).map(|(a, c)| (a - r * c).abs()).fold(0.0, f64::max));
        let g = rng.uniform_range(-3.0, 3.0);
        let wn = weight_norm(&w, g)?;
        wn_gap = wn_gap.max((norm2(wn.data()) - g.abs()).abs() / g.abs());
    }
    for k in 0..50 {
        let (m, n) = (2 + rng.below(10), 2 + rng.below(10));
        let scale = rng.uniform_range(0.1, 5.0);
        let w = rng.normal_tensor(&[m, n], scale);
        let sn = spectral_normalize(&w, 500, seed.wrapping_add(k))?;
        let gram = matmul(&sn.transpose(), &sn)?;
        let sigma = sym_eigen(&gram)?.eigenvalues[0].max(0.0).sqrt();
        sn_gap = sn_gap.max((sigma - 1.0).abs());
    }
    Ok(vec![
        Check::at_most("WS - sqrt(n) CWN", ws_gap, 0.0),
        Check::at_most("| ||WN(v, g)|| - |g| | / |g|", wn_gap, 1e-12),
        Check::at_most("|sigma(SN(W)) - 1| (eigen oracle)", sn_gap, 1e-5),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped_center(v: &DenseTensor) -> Result<DenseTensor> {
        Ok(geometry::center(v)?.scale(-1.0))
    }

    #[test]
    fn geometry_suites_pass() {
        for name in ["lemma1", "scaling", "collapse", "effective-weight", "weight-norms"] {
            let r = run_suite(name, 0, &Probes::default()).unwrap();
            assert!(r.passed, "{}", render_table(&[r]));
        }
    }

    #[test]
    fn sign_bug_in_center_is_caught() {
        let r = run_suite("lemma1", 0, &Probes { center: flipped_center }).unwrap();
        assert!(!r.passed);
        let failed: Vec<&str> = r.failed_checks().map(|c| c.name.as_str()).collect();
        assert!(failed.contains(&"reconstruction gamma N(v) + beta e"), "{failed:?}");
    }

    #[test]
    fn unknown_suite_lists_available() {
        let err = run_suites(&["lemma1", "nope"], 0, &Probes::default()).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("weight-norms")));
    }

    #[test]
    fn table_has_one_line_per_check() {
        let r = run_suite("weight-norms", 0, &Probes::default()).unwrap();
        let table = render_table(std::slice::from_ref(&r));
        assert_eq!(table.lines().count(), 1 + r.checks.len());
        assert!(table.contains("PASS"));
    }
}
