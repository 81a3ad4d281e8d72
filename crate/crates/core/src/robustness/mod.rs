//! Accuracy under additive Gaussian noise and under the basic iterative
//! method (BIM), an iterated signed-gradient attack inside an l-infinity ball.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{backward, forward, logits, MlpModel};
use crate::tensor::{DenseTensor, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Gaussian,
    Bim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// l-infinity budget in standardized-feature units.
    pub epsilon: f64,
    pub steps: usize,
    pub alpha: f64,
    pub noise_std: f64,
    /// Independent noise draws averaged by [`gaussian_eval`].
    pub noise_draws: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { epsilon: 0.1, steps: 10, alpha: 0.02, noise_std: 0.1, noise_draws: 100, seed: 0 }
    }
}

impl AttackConfig {
    /// BIM settings with `alpha = epsilon / 5` and Gaussian noise of standard
    /// deviation `epsilon`.
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon, alpha: epsilon / 5.0, noise_std: epsilon, ..Self::default() }
    }

    pub fn validate(&self, kind: AttackKind) -> Result<()> {
        match kind {
            AttackKind::Gaussian => {
                if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
                    return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
                }
                if self.noise_draws == 0 {
                    return Err(Error::Config("noise_draws must be at least 1".into()));
                }
            }
            AttackKind::Bim => {
                if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
                    return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
                }
                if self.steps == 0 {
                    return Err(Error::Config("BIM needs at least one step".into()));
                }
                if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
                    return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
                }
                if self.alpha * (self.steps as f64) < self.epsilon {
                    return Err(Error::Config(format!(
                        "alpha * steps = {} cannot reach epsilon = {}",
                        self.alpha * self.steps as f64,
                        self.epsilon
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Argmax per column; ties go to the lowest class index.
pub fn predictions(model: &MlpModel, x: &DenseTensor) -> Result<Vec<usize>> {
    let out = logits(model, x)?;
    Ok((0..out.cols())
        .map(|k| {
            let mut best = 0;
            for i in 1..out.rows() {
                if out.get(i, k) > out.get(best, k) {
                    best = i;
                }
            }
            best
        })
        .collect())
}

fn require_eval(model: &MlpModel) -> Result<()> {
    if model.has_train_batch_norm() {
        return Err(Error::Config("evaluation needs batch normalization in eval mode".into()));
    }
    Ok(())
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(model: &MlpModel, x: &DenseTensor, labels: &[usize]) -> Result<f64> {
    require_eval(model)?;
    if labels.is_empty() {
        return Err(Error::Validation("accuracy of an empty dataset".into()));
    }
    if x.cols() != labels.len() {
        return Err(Error::Dimension(format!("{} labels for {} samples", labels.len(), x.cols())));
    }
    let pred = predictions(model, x)?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Mean accuracy over `noise_draws` seeded perturbations `X + noise_std * N(0, I)`.
pub fn gaussian_eval(model: &MlpModel, x: &DenseTensor, labels: &[usize], cfg: &AttackConfig) -> Result<f64> {
    cfg.validate(AttackKind::Gaussian)?;
    if cfg.noise_std == 0.0 {
        return accuracy(model, x, labels);
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut total = 0.0;
    for _ in 0..cfg.noise_draws {
        let noise = rng.normal_tensor(x.shape(), cfg.noise_std);
        total += accuracy(model, &x.add(&noise)?, labels)?;
    }
    Ok(total / cfg.noise_draws as f64)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamps `v` into `[x - eps, x + eps]`, then steps toward `x` one ulp at a
/// time until `|v - x| <= eps` holds in floating point.
fn clip_to_ball(v: f64, x: f64, eps: f64) -> f64 {
    let mut c = v.clamp(x - eps, x + eps);
    while (c - x).abs() > eps {
        c = if c > x { c.next_down() } else { c.next_up() };
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct BimResult {
    pub adversarial: DenseTensor,
    pub accuracy: f64,
    /// The input gradient vanished everywhere at the first step, so the
    /// attack left the input unchanged.
    pub degenerate: bool,
}

/// `x_{t+1} = clip_{x, eps}(x_t + alpha * sign(grad_x L(x_t)))` for `steps`
/// iterations, starting at `x_0 = X`.
pub fn bim_attack(model: &MlpModel, x: &DenseTensor, labels: &[usize], cfg: &AttackConfig) -> Result<BimResult> {
    cfg.validate(AttackKind::Bim)?;
    require_eval(model)?;
    let mut adv = x.clone();
    let mut degenerate = false;
    if cfg.epsilon > 0.0 {
        for step in 0..cfg.steps {
            let grad = backward(model, &forward(model, &adv, labels)?)?.input;
            if step == 0 && grad.data().iter().all(|&g| g == 0.0) {
                degenerate = true;
                break;
            }
            for ((a, &g), &x0) in adv.data_mut().iter_mut().zip(grad.data()).zip(x.data()) {
                *a = clip_to_ball(*a + cfg.alpha * sign(g), x0, cfg.epsilon);
            }
        }
    }
    let accuracy = accuracy(model, &adv, labels)?;
    Ok(BimResult { adversarial: adv, accuracy, degenerate })
}

/// Largest per-coordinate deviation between two batches.
pub fn linf_distance(a: &DenseTensor, b: &DenseTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean_acc: f64,
    pub noise_acc: f64,
    pub bim_acc: f64,
    pub acc_diff1: f64,
    pub acc_diff2: f64,
    pub bim_degenerate: bool,
    pub config: AttackConfig,
}

pub fn robustness_report(model: &MlpModel, x: &DenseTensor, labels: &[usize], cfg: &AttackConfig) -> Result<RobustnessReport> {
    let clean_acc = accuracy(model, x, labels)?;
    let noise_acc = gaussian_eval(model, x, labels, cfg)?;
    let bim = bim_attack(model, x, labels, cfg)?;
    Ok(RobustnessReport {
        clean_acc,
        noise_acc,
        bim_acc: bim.accuracy,
        acc_diff1: clean_acc - noise_acc,
        acc_diff2: clean_acc - bim.accuracy,
        bim_degenerate: bim.degenerate,
        config: cfg.clone(),
    })
}

/// One line of the robustness CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub wd: f64,
    pub clean: f64,
    pub gauss: f64,
    pub bim: f64,
    pub accdiff1: f64,
    pub accdiff2: f64,
    pub eps: f64,
    pub steps: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl ReportRow {
    pub fn new(method: &str, wd: f64, seed: u64, r: &RobustnessReport) -> Self {
        Self {
            method: method.to_string(),
            wd,
            clean: r.clean_acc,
            gauss: r.noise_acc,
            bim: r.bim_acc,
            accdiff1: r.acc_diff1,
            accdiff2: r.acc_diff2,
            eps: r.config.epsilon,
            steps: r.config.steps,
            alpha: r.config.alpha,
            seed,
        }
    }
}

pub const REPORT_HEADER: &str = "method,wd,clean,gauss,bim,accdiff1,accdiff2,eps,steps,alpha,seed";

/// Writes `rows` to `path` with a header line, replacing any existing file.
pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    if rows.is_empty() {
        w.write_record(REPORT_HEADER.split(',')).map_err(|e| Error::Io(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Parse {
                location: format!("{}:{}", path.display(), e.position().map_or(0, |p| p.line())),
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradients::MlpConfig;
    use crate::normalizers::Mode;

    fn linear(w: &[&[f64]]) -> MlpModel {
        let rows: Vec<Vec<f64>> = w.iter().map(|r| r.to_vec()).collect();
        MlpModel::linear(DenseTensor::from_rows(&rows).unwrap(), vec![0.0; rows.len()]).unwrap()
    }

    /// Single-step signed-gradient attack, written without the BIM loop.
    fn fgsm(model: &MlpModel, x: &DenseTensor, labels: &[usize], eps: f64) -> DenseTensor {
        let g = backward(model, &forward(model, x, labels).unwrap()).unwrap().input;
        let mut out = x.clone();
        for (o, &gi) in out.data_mut().iter_mut().zip(g.data()) {
            let x0 = *o;
            let mut v = if gi > 0.0 { x0 + eps } else if gi < 0.0 { x0 - eps } else { x0 };
            while (v - x0).abs() > eps {
                v = if v > x0 { v.next_down() } else { v.next_up() };
            }
            *o = v;
        }
        out
    }

    #[test]
    fn separable_fixture_is_perfect() {
        let model = linear(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let x = DenseTensor::from_rows(&[vec![2.0, -1.0, 0.5], vec![0.0, 1.0, -3.0]]).unwrap();
        assert_eq!(accuracy(&model, &x, &[0, 1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let model = linear(&[&[1.0], &[1.0], &[1.0]]);
        let x = DenseTensor::matrix(1, 2, vec![0.5, -2.0]).unwrap();
        assert_eq!(predictions(&model, &x).unwrap(), vec![0, 0]);
    }

    #[test]
    fn empty_and_train_mode_rejected() {
        let model = linear(&[&[1.0], &[0.0]]);
        assert!(accuracy(&model, &DenseTensor::zeros(&[1, 1]), &[]).is_err());
        let bn = MlpModel::from_config(&MlpConfig::default()).unwrap();
        assert!(matches!(accuracy(&bn, &DenseTensor::zeros(&[16, 4]), &[0; 4]), Err(Error::Config(_))));
    }

    #[test]
    fn permuted_labels_near_chance() {
        let mut rng = SeededRng::new(70);
        let model = linear(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0], &[0.0, -1.0]]);
        let x = rng.normal_tensor(&[2, 4000], 1.0);
        let mut labels: Vec<usize> = (0..4000).map(|k| k % 4).collect();
        rng.shuffle(&mut labels);
        let acc = accuracy(&model, &x, &labels).unwrap();
        assert!((acc - 0.25).abs() < 0.05, "{acc}");
        assert_eq!(acc, accuracy(&model, &x, &labels).unwrap());
    }

    #[test]
    fn zero_noise_is_clean() {
        let mut rng = SeededRng::new(71);
        let model = linear(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        let x = rng.normal_tensor(&[2, 100], 1.0);
        let y: Vec<usize> = (0..100).map(|k| usize::from(x.get(0, k) < x.get(1, k))).collect();
        let cfg = AttackConfig { noise_std: 0.0, ..Default::default() };
        assert_eq!(gaussian_eval(&model, &x, &y, &cfg).unwrap(), accuracy(&model, &x, &y).unwrap());
    }

    #[test]
    fn huge_noise_reaches_chance() {
        let mut rng = SeededRng::new(72);
        let model = linear(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        let x = rng.normal_tensor(&[2, 2000], 1.0);
        let y: Vec<usize> = (0..2000).map(|k| usize::from(x.get(0, k) < x.get(1, k))).collect();
        let cfg = AttackConfig { noise_std: 50.0, noise_draws: 3, seed: 4, ..Default::default() };
        let acc = gaussian_eval(&model, &x, &y, &cfg).unwrap();
        assert!((acc - 0.5).abs() < 0.05, "{acc}");
        assert_eq!(acc, gaussian_eval(&model, &x, &y, &cfg).unwrap());
    }

    #[test]
    fn zero_budget_is_identity() {
        let mut rng = SeededRng::new(73);
        let model = linear(&[&[1.0, 2.0], &[-1.0, 0.5]]);
        let x = rng.normal_tensor(&[2, 20], 1.0);
        let y: Vec<usize> = (0..20).map(|k| k % 2).collect();
        let r = bim_attack(&model, &x, &y, &AttackConfig::with_epsilon(0.0)).unwrap();
        assert_eq!(r.adversarial, x);
        assert_eq!(r.accuracy, accuracy(&model, &x, &y).unwrap());
    }

    #[test]
    fn one_step_equals_fgsm() {
        let mut rng = SeededRng::new(74);
        let cfg = MlpConfig { input_dim: 5, hidden: vec![7], classes: 3, method: crate::normalizers::Method::LayerNorm, seed: 5, ..Default::default() };
        let model = MlpModel::from_config(&cfg).unwrap();
        let x = rng.normal_tensor(&[5, 30], 1.0);
        let y: Vec<usize> = (0..30).map(|k| k % 3).collect();
        let attack = AttackConfig { epsilon: 0.3, steps: 1, alpha: 0.3, ..Default::default() };
        assert_eq!(bim_attack(&model, &x, &y, &attack).unwrap().adversarial, fgsm(&model, &x, &y, 0.3));
    }

    #[test]
    fn linear_step_closed_form() {
        let w = [[0.5, -1.0, 2.0], [-0.25, 1.5, 0.0]];
        let model = linear(&[&w[0], &w[1]]);
        let x = DenseTensor::from_rows(&[vec![0.1, -0.2], vec![0.3, 0.0], vec![-0.5, 1.0]]).unwrap();
        let y = [0, 1];
        let alpha = 0.05;
        let r = bim_attack(&model, &x, &y, &AttackConfig { epsilon: alpha, steps: 1, alpha, ..Default::default() }).unwrap();
        for (k, &c) in y.iter().enumerate() {
            for j in 0..3 {
                // Increasing the loss moves toward the other class's row. The
                // clip may pull the sum back by an ulp to stay inside the ball.
                let s = sign(w[1 - c][j] - w[c][j]);
                let moved = r.adversarial.get(j, k) - x.get(j, k);
                assert_eq!(sign(moved), s);
                assert!((moved - alpha * s).abs() <= 4.0 * f64::EPSILON);
                assert!(moved.abs() <= alpha);
            }
        }
    }

    #[test]
    fn budget_never_exceeded() {
        let mut rng = SeededRng::new(75);
        let mut model = MlpModel::from_config(&MlpConfig { input_dim: 4, hidden: vec![8], classes: 3, seed: 6, ..Default::default() }).unwrap();
        model.set_mode(Mode::Eval);
        let x = rng.normal_tensor(&[4, 50], 1.0).map(|v| v * 1e3);
        let y: Vec<usize> = (0..50).map(|k| k % 3).collect();
        for eps in [1e-3, 0.1, 0.7] {
            let r = bim_attack(&model, &x, &y, &AttackConfig { epsilon: eps, steps: 7, alpha: eps / 3.0, ..Default::default() }).unwrap();
            assert!(linf_distance(&r.adversarial, &x) <= eps);
        }
    }

    #[test]
    fn zero_gradient_flagged() {
        let model = linear(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let x = DenseTensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let r = bim_attack(&model, &x, &[0], &AttackConfig::default()).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.adversarial, x);
    }

    #[test]
    fn unreachable_budget_rejected() {
        let cfg = AttackConfig { epsilon: 1.0, steps: 2, alpha: 0.1, ..Default::default() };
        assert!(matches!(cfg.validate(AttackKind::Bim), Err(Error::Config(_))));
    }

    #[test]
    fn report_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let report = RobustnessReport {
            clean_acc: 0.9,
            noise_acc: 0.85,
            bim_acc: 0.4,
            acc_diff1: 0.05,
            acc_diff2: 0.5,
            bim_degenerate: false,
            config: AttackConfig::default(),
        };
        let row = ReportRow::new("bn", 5e-4, 3, &report);
        write_report_csv(&path, std::slice::from_ref(&row)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), REPORT_HEADER);
        assert_eq!(read_report_csv(&path).unwrap(), vec![row]);
    }
}
