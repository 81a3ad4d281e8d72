//! SGD with decoupled weight decay on the MLP of [`crate::gradients`],
//! recording per-row weight norms, the norm recurrence residual, the gap
//! between BN's affine parameters and the batch statistics, and the kernel
//! dimension of each layer's input covariance.

mod batch;
mod data;
mod persist;
mod sgd;

pub use batch::{batch_iter, EpochPlan};
pub use data::{make_dataset, read_csv, read_idx, Dataset, DatasetSpec};
pub use persist::{load_model, save_model, MODEL_BIN, MODEL_JSON};
pub use sgd::{sgd_step, GroupStep, RowStep, SgdReport};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{backward, forward, update_running_stats, Activation, GradientBundle, MlpConfig, MlpModel};
use crate::normalizers::{covariance, kernel_analysis, Method, Mode, DEFAULT_EPS, RANK_THRESHOLD};
use crate::robustness::accuracy;

pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Stops after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Heavy-ball momentum; 0 disables it. The norm recurrence is only
    /// exact without momentum.
    pub momentum: f64,
    pub method: Method,
    pub eps_norm: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init_scale: f64,
    pub dataset: DatasetSpec,
    pub standardize: bool,
    pub test_fraction: f64,
    /// Metric rows are written every this many steps (and on the last step).
    pub metric_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 40,
            max_steps: None,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            momentum: 0.0,
            method: Method::BatchNorm,
            eps_norm: DEFAULT_EPS,
            hidden: vec![32, 32],
            activation: Activation::Relu,
            init_scale: 1.0,
            dataset: DatasetSpec::default(),
            standardize: true,
            test_fraction: 0.25,
            metric_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.method == Method::BatchNorm && self.batch_size < 2 {
            return Err(Error::Config("batch normalization needs batch size >= 2".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.metric_every == 0 {
            return Err(Error::Config("batch size, epochs and metric cadence must be positive".into()));
        }
        if !(self.eps_norm >= 0.0 && self.eps_norm.is_finite()) {
            return Err(Error::Config(format!("eps must be >= 0, got {}", self.eps_norm)));
        }
        Ok(())
    }

    /// `<method>_wd<wd>_seed<seed>`
    pub fn run_name(&self) -> String {
        format!("{}_wd{}_seed{}", self.method.short_name(), self.weight_decay, self.seed)
    }

    /// The dataset after standardization, split into train and test sets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let ds = make_dataset(&self.dataset, self.seed, self.standardize)?;
        ds.split(self.test_fraction, self.seed.wrapping_add(0x51))
    }

    fn model_config(&self, input_dim: usize, classes: usize) -> MlpConfig {
        MlpConfig {
            input_dim,
            hidden: self.hidden.clone(),
            classes,
            method: self.method,
            eps: self.eps_norm,
            activation: self.activation,
            init_scale: self.init_scale,
            seed: self.seed,
        }
    }
}

/// One row of the metrics CSV: a weight row of one layer at one step.
/// Quantities that do not apply to the row are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub acc: f64,
    pub layer: usize,
    pub row: usize,
    pub w_norm: f64,
    pub gamma_gap: Option<f64>,
    pub beta_gap: Option<f64>,
    /// Recurrence residual of the invariance group containing this row.
    pub recurrence_resid: Option<f64>,
    pub kernel_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: TrainConfig,
    pub steps: usize,
    pub epochs_completed: usize,
    /// Samples skipped per epoch by dropping the final short batch.
    pub dropped_per_epoch: usize,
    pub final_loss: f64,
    pub final_batch_acc: f64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    /// `sqrt(sum_l ||W_l||_F^2)` over all layers after the last step.
    pub weight_norm: f64,
    pub layer_weight_norms: Vec<f64>,
    /// Largest recurrence residual over all steps, relative to the group's
    /// squared norm before the step. `None` without scaling-invariant layers.
    pub max_recurrence_resid: Option<f64>,
    /// Steps at which some invariance group's norm strictly decreased.
    pub monotone_violations: usize,
    /// Per-step median over all BN units of `|gamma^2 - sigma_batch^2|` and
    /// `|beta - mu_batch|`, then the median over the first and last 10% of
    /// steps.
    pub gamma_gap_first: Option<f64>,
    pub gamma_gap_last: Option<f64>,
    pub beta_gap_first: Option<f64>,
    pub beta_gap_last: Option<f64>,
    pub failure: Option<Failure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<MetricRow>,
    pub summary: RunSummary,
}

impl RunRecord {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
        }
        if self.rows.is_empty() {
            w.write_record(["step", "loss", "acc", "layer", "row", "w_norm", "gamma_gap", "beta_gap", "recurrence_resid", "kernel_dim"])
                .map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse { location: path.display().to_string(), message: e.to_string() }))
        .collect()
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub record: RunRecord,
    /// The trained model, switched to eval mode.
    pub model: MlpModel,
    pub train: Dataset,
    pub test: Dataset,
}

impl TrainOutput {
    /// Writes the metrics CSV, the JSON summary and the model into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        self.record.write_csv(&dir.join(METRICS_CSV))?;
        std::fs::write(dir.join(SUMMARY_JSON), serde_json::to_string_pretty(&self.record.summary)? + "\n")?;
        save_model(&self.model, dir)?;
        Ok(dir.to_path_buf())
    }
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn window_medians(series: &[f64]) -> (Option<f64>, Option<f64>) {
    if series.is_empty() {
        return (None, None);
    }
    let k = series.len().div_ceil(10);
    (median(&mut series[..k].to_vec()), median(&mut series[series.len() - k..].to_vec()))
}

fn batch_accuracy(logits: &crate::DenseTensor, labels: &[usize]) -> f64 {
    let mut correct = 0;
    for (k, &y) in labels.iter().enumerate() {
        let mut best = 0;
        for i in 1..logits.rows() {
            if logits.get(i, k) > logits.get(best, k) {
                best = i;
            }
        }
        correct += usize::from(best == y);
    }
    correct as f64 / labels.len() as f64
}

fn add_momentum(velocity: &mut Option<GradientBundle>, grads: GradientBundle, mu: f64) -> GradientBundle {
    match velocity {
        Some(v) if mu > 0.0 => {
            for (vl, gl) in v.layers.iter_mut().zip(&grads.layers) {
                let mix = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x = mu * *x + y);
                mix(vl.weight.data_mut(), gl.weight.data());
                for (a, b) in [(&mut vl.bias, &gl.bias), (&mut vl.gamma, &gl.gamma), (&mut vl.beta, &gl.beta)] {
                    if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                        mix(a, b);
                    }
                }
            }
            v.clone()
        }
        _ => {
            if mu > 0.0 {
                *velocity = Some(grads.clone());
            }
            grads
        }
    }
}

/// Runs the configured training. A mid-run failure (non-finite loss or
/// gradient, degenerate normalization) stops the loop and is recorded in
/// `summary.failure`; the rows collected so far are kept.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let (train_set, test_set) = cfg.datasets()?;
    let mut model = MlpModel::from_config(&cfg.model_config(train_set.features(), train_set.classes))?;
    let drop_last = cfg.method == Method::BatchNorm;
    let n_layers = model.layers.len();

    let mut rows = Vec::new();
    let mut gamma_series = Vec::new();
    let mut beta_series = Vec::new();
    let mut max_resid: Option<f64> = None;
    let mut violations = 0;
    let mut step = 0;
    let mut epochs_completed = 0;
    let mut dropped_per_epoch = 0;
    let mut final_loss = f64::NAN;
    let mut final_acc = 0.0;
    let mut failure = None;
    let mut velocity = None;
    let step_limit = cfg.max_steps.unwrap_or(usize::MAX);
    let total_steps = {
        let per_epoch = if drop_last { train_set.len() / cfg.batch_size } else { train_set.len().div_ceil(cfg.batch_size) };
        (per_epoch * cfg.epochs).min(step_limit)
    };

    'epochs: for epoch in 0..cfg.epochs {
        let plan = batch_iter(train_set.len(), cfg.batch_size, cfg.seed, epoch, drop_last)?;
        dropped_per_epoch = plan.dropped;
        for idx in &plan.batches {
            if step >= step_limit {
                break 'epochs;
            }
            let batch = train_set.subset(idx);
            let outcome = (|| -> Result<(f64, f64, SgdReport, Vec<MetricRow>, Option<(f64, f64)>)> {
                let pass = forward(&model, &batch.x, &batch.labels)?;
                if !pass.loss.is_finite() {
                    return Err(Error::Divergence { step, reason: format!("loss is {}", pass.loss) });
                }
                let grads = backward(&model, &pass)?;
                let acc = batch_accuracy(&pass.logits, &batch.labels);
                let record = step % cfg.metric_every == 0 || step + 1 == total_steps;

                let mut gaps: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n_layers];
                for (l, layer) in model.layers.iter().enumerate() {
                    if let (Some((mean, var)), Some(a)) = (pass.batch_stats(l), layer.norm.affine.as_ref()) {
                        gaps[l] = (0..mean.len())
                            .map(|i| ((a.gamma[i] * a.gamma[i] - var[i]).abs(), (a.beta[i] - mean[i]).abs()))
                            .collect();
                    }
                }
                let kernel_dims: Vec<Option<usize>> = if record {
                    (0..n_layers)
                        .map(|l| {
                            let sigma = covariance(pass.layer_input(l))?;
                            Ok(Some(kernel_analysis(&sigma, RANK_THRESHOLD)?.kernel_dim))
                        })
                        .collect::<Result<_>>()?
                } else {
                    vec![None; n_layers]
                };

                update_running_stats(&mut model, &pass);
                let direction = add_momentum(&mut velocity, grads, cfg.momentum);
                let report = sgd_step(&mut model, &direction, cfg.learning_rate, cfg.weight_decay)?;

                let mut step_rows = Vec::new();
                if record {
                    for r in &report.rows {
                        let group = report.groups.iter().find(|g| g.layer == r.layer && g.rows.contains(&r.row));
                        let gap = gaps[r.layer].get(r.row);
                        step_rows.push(MetricRow {
                            step,
                            loss: pass.loss,
                            acc,
                            layer: r.layer,
                            row: r.row,
                            w_norm: r.norm_after,
                            gamma_gap: gap.map(|g| g.0),
                            beta_gap: gap.map(|g| g.1),
                            recurrence_resid: group.map(|g| g.residual),
                            kernel_dim: kernel_dims[r.layer],
                        });
                    }
                }
                let mut all_gamma: Vec<f64> = gaps.iter().flatten().map(|g| g.0).collect();
                let mut all_beta: Vec<f64> = gaps.iter().flatten().map(|g| g.1).collect();
                let medians = median(&mut all_gamma).zip(median(&mut all_beta));
                Ok((pass.loss, acc, report, step_rows, medians))
            })();
            match outcome {
                Ok((loss, acc, report, step_rows, medians)) => {
                    final_loss = loss;
                    final_acc = acc;
                    if !report.groups.is_empty() {
                        max_resid = Some(max_resid.unwrap_or(0.0).max(report.max_relative_residual()));
                    }
                    violations += usize::from(report.norm_decreases() > 0);
                    rows.extend(step_rows);
                    if let Some((g, b)) = medians {
                        gamma_series.push(g);
                        beta_series.push(b);
                    }
                    step += 1;
                }
                Err(e) => {
                    failure = Some(Failure { step, message: e.to_string() });
                    break 'epochs;
                }
            }
        }
        epochs_completed = epoch + 1;
    }

    model.set_mode(Mode::Eval);
    let (train_acc, test_acc) = if failure.is_none() {
        let eval = |d: &Dataset| if d.is_empty() { Ok(None) } else { accuracy(&model, &d.x, &d.labels).map(Some) };
        (eval(&train_set)?, eval(&test_set)?)
    } else {
        (None, None)
    };
    let layer_weight_norms: Vec<f64> = model.layers.iter().map(|l| l.weight.frobenius_norm()).collect();
    let weight_norm = layer_weight_norms.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (gamma_gap_first, gamma_gap_last) = window_medians(&gamma_series);
    let (beta_gap_first, beta_gap_last) = window_medians(&beta_series);
    let summary = RunSummary {
        config: cfg.clone(),
        steps: step,
        epochs_completed,
        dropped_per_epoch,
        final_loss,
        final_batch_acc: final_acc,
        train_acc,
        test_acc,
        weight_norm,
        layer_weight_norms,
        max_recurrence_resid: max_resid,
        monotone_violations: violations,
        gamma_gap_first,
        gamma_gap_last,
        beta_gap_first,
        beta_gap_last,
        failure,
    };
    Ok(TrainOutput { record: RunRecord { rows, summary }, model, train: train_set, test: test_set })
}
