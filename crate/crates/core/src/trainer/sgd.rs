use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{GradientBundle, MlpModel, ParamKind};
use crate::tensor::dot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowStep {
    pub layer: usize,
    pub row: usize,
    pub norm_after: f64,
    /// `| ||W_i'||^2 - ||(1 - eta lambda) W_i||^2 - eta^2 ||grad_i||^2 |`
    pub residual: f64,
}

/// The same bookkeeping summed over one invariance group of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStep {
    pub layer: usize,
    pub rows: Range<usize>,
    pub norm_sq_before: f64,
    pub norm_sq_after: f64,
    pub residual: f64,
}

impl GroupStep {
    /// Residual relative to `||W_g||^2` before the step.
    pub fn relative_residual(&self) -> f64 {
        if self.norm_sq_before > 0.0 {
            self.residual / self.norm_sq_before
        } else {
            self.residual
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SgdReport {
    pub rows: Vec<RowStep>,
    /// Groups of scaling-invariant layers only; the recurrence is exact there.
    pub groups: Vec<GroupStep>,
}

impl SgdReport {
    pub fn max_relative_residual(&self) -> f64 {
        self.groups.iter().map(GroupStep::relative_residual).fold(0.0, f64::max)
    }

    /// Groups whose squared norm strictly decreased.
    pub fn norm_decreases(&self) -> usize {
        self.groups.iter().filter(|g| g.norm_sq_after < g.norm_sq_before).count()
    }
}

/// `W <- (1 - eta lambda) W - eta grad` on every weight matrix, plain
/// `theta <- theta - eta grad` on biases and affine parameters. Nothing is
/// changed if any gradient is non-finite.
pub fn sgd_step(model: &mut MlpModel, grads: &GradientBundle, eta: f64, lambda: f64) -> Result<SgdReport> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {eta}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("weight decay must be >= 0, got {lambda}")));
    }
    let ids = model.param_ids();
    for &(l, kind) in &ids {
        let p = model.param(l, kind).expect("listed parameter");
        let g = grads
            .get(l, kind)
            .ok_or_else(|| Error::Dimension(format!("gradient bundle lacks {kind:?} of layer {l}")))?;
        if g.len() != p.len() {
            return Err(Error::Dimension(format!("{kind:?} gradient of layer {l} has {} entries, expected {}", g.len(), p.len())));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{kind:?} gradient of layer {l}, entry {i} = {}", g[i])));
        }
    }

    let shrink = 1.0 - eta * lambda;
    let mut report = SgdReport::default();
    for (l, layer) in model.layers.iter_mut().enumerate() {
        let g = &grads.layers[l].weight;
        let w = &mut layer.weight;
        let (m, _) = (w.rows(), w.cols());
        let mut before = Vec::with_capacity(m);
        let mut grad_sq = Vec::with_capacity(m);
        let mut after = Vec::with_capacity(m);
        for i in 0..m {
            let gi = g.row(i);
            before.push(dot(w.row(i), w.row(i)));
            grad_sq.push(dot(gi, gi));
            let row = w.row_mut(i);
            row.iter_mut().zip(gi).for_each(|(v, d)| *v = shrink * *v - eta * d);
            after.push(dot(row, row));
        }
        let expected = |i: usize| shrink * shrink * before[i] + eta * eta * grad_sq[i];
        for i in 0..m {
            report.rows.push(RowStep { layer: l, row: i, norm_after: after[i].sqrt(), residual: (after[i] - expected(i)).abs() });
        }
        if let Some(groups) = layer.norm.method.invariance_groups(m) {
            for rows in groups {
                let sum = |v: &[f64]| v[rows.clone()].iter().sum::<f64>();
                let exp: f64 = rows.clone().map(expected).sum();
                let norm_sq_after = sum(&after);
                report.groups.push(GroupStep {
                    layer: l,
                    rows: rows.clone(),
                    norm_sq_before: sum(&before),
                    norm_sq_after,
                    residual: (norm_sq_after - exp).abs(),
                });
            }
        }
    }
    for &(l, kind) in ids.iter().filter(|(_, k)| *k != ParamKind::Weight) {
        let g = grads.get(l, kind).expect("checked above");
        let p = model.param_mut(l, kind).expect("listed parameter");
        p.iter_mut().zip(g).for_each(|(v, d)| *v -= eta * d);
    }
    Ok(report)
}
