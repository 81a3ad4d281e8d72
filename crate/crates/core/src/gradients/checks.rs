use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::model::MlpModel;
use super::pass::{backward, forward, GradientBundle};
use crate::error::{Error, Result};
use crate::normalizers::{Method, Mode};
use crate::tensor::{dot, DenseTensor};

/// Cosine between a weight row set and its gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityRow {
    pub layer: usize,
    pub rows: Range<usize>,
    pub cosine: f64,
    /// The gradient vanished; reported as exactly orthogonal.
    pub zero_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreactivationCheck {
    pub layer: usize,
    pub unit: usize,
    /// `|<grad_y, y_hat>| / (||grad_y|| ||y_hat||)`
    pub along_yhat: f64,
    /// `|<grad_y, e>| / (||grad_y|| sqrt(B))`
    pub along_ones: f64,
}

fn invariance_groups(model: &MlpModel, layer: usize) -> Result<Vec<Range<usize>>> {
    let l = model
        .layers
        .get(layer)
        .ok_or_else(|| Error::Dimension(format!("layer {layer} out of range ({} layers)", model.layers.len())))?;
    if l.norm.method == Method::BatchNorm && l.norm.mode == Mode::Eval {
        return Err(Error::NotApplicable("eval-mode batch normalization is an affine map, not scaling invariant".into()));
    }
    l.norm.method.invariance_groups(l.out_dim()).ok_or_else(|| {
        Error::NotApplicable(format!("layer {layer} uses {}, which is not scaling invariant", l.norm.method))
    })
}

fn scale_rows(model: &mut MlpModel, layer: usize, rows: Range<usize>, alpha: f64) {
    let w = &mut model.layers[layer].weight;
    for i in rows {
        w.row_mut(i).iter_mut().for_each(|v| *v *= alpha);
    }
}

/// Largest loss change when the rows of `layer` are rescaled by each positive
/// `alpha`, one invariance group at a time and all groups together. Exact
/// invariance holds at eps = 0.
pub fn check_scaling_invariance(
    model: &MlpModel,
    layer: usize,
    alphas: &[f64],
    x: &DenseTensor,
    labels: &[usize],
) -> Result<f64> {
    let groups = invariance_groups(model, layer)?;
    if let Some(&bad) = alphas.iter().find(|&&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::Config(format!("scaling factors must be positive, got {bad}")));
    }
    let base = forward(model, x, labels)?.loss;
    let m = model.layers[layer].out_dim();
    let mut worst: f64 = 0.0;
    for &alpha in alphas {
        for g in &groups {
            let mut probe = model.clone();
            scale_rows(&mut probe, layer, g.clone(), alpha);
            worst = worst.max((forward(&probe, x, labels)?.loss - base).abs());
        }
        // Distinct factor per group, cycling through the list.
        let mut probe = model.clone();
        for (k, g) in groups.iter().enumerate() {
            let a = alphas[(alphas.iter().position(|&v| v == alpha).unwrap_or(0) + k) % alphas.len()];
            scale_rows(&mut probe, layer, g.clone(), a);
        }
        debug_assert_eq!(probe.layers[layer].out_dim(), m);
        worst = worst.max((forward(&probe, x, labels)?.loss - base).abs());
    }
    Ok(worst)
}

fn group_cosine(w: &DenseTensor, g: &DenseTensor, rows: &Range<usize>) -> (f64, bool) {
    let (mut wg, mut ww, mut gg) = (0.0, 0.0, 0.0);
    for i in rows.clone() {
        wg += dot(w.row(i), g.row(i));
        ww += dot(w.row(i), w.row(i));
        gg += dot(g.row(i), g.row(i));
    }
    if gg == 0.0 || ww == 0.0 {
        return (0.0, true);
    }
    (wg / (ww.sqrt() * gg.sqrt()), false)
}

/// Cosine between each weight row and its gradient for any layer, whatever
/// the normalizer.
pub fn row_cosines(model: &MlpModel, grads: &GradientBundle, layer: usize) -> Vec<OrthogonalityRow> {
    let w = &model.layers[layer].weight;
    let g = &grads.layers[layer].weight;
    (0..w.rows())
        .map(|i| {
            let rows = i..i + 1;
            let (cosine, zero_grad) = group_cosine(w, g, &rows);
            OrthogonalityRow { layer, rows, cosine, zero_grad }
        })
        .collect()
}

/// `<W_g, grad W_g>` cosine for every invariance group of every
/// scaling-invariant layer. Rows of BN/WN/CWN/WS layers are their own group;
/// LN couples the whole layer and GN each group of rows.
pub fn check_grad_orthogonality(model: &MlpModel, x: &DenseTensor, labels: &[usize]) -> Result<Vec<OrthogonalityRow>> {
    let grads = backward(model, &forward(model, x, labels)?)?;
    let mut out = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let Ok(groups) = invariance_groups(model, l) else { continue };
        for rows in groups {
            let (cosine, zero_grad) = group_cosine(&layer.weight, &grads.layers[l].weight, &rows);
            out.push(OrthogonalityRow { layer: l, rows, cosine, zero_grad });
        }
    }
    if out.is_empty() {
        return Err(Error::NotApplicable("model has no scaling-invariant layer".into()));
    }
    Ok(out)
}

/// For every unit of every layer, the normalized inner products of the
/// pre-normalization gradient with the standardized pre-activation and with
/// the ones vector. Both vanish under train-mode BN.
pub fn check_bn_preactivation_orthogonality(
    model: &MlpModel,
    x: &DenseTensor,
    labels: &[usize],
) -> Result<Vec<PreactivationCheck>> {
    let pass = forward(model, x, labels)?;
    let grads = backward(model, &pass)?;
    let mut out = Vec::new();
    for l in 0..model.layers.len() - 1 {
        let y = pass.preactivation(l);
        let gy = &grads.preactivation[l];
        let b = y.cols() as f64;
        for unit in 0..y.rows() {
            let row = y.row(unit);
            let mean = row.iter().sum::<f64>() / b;
            let yhat: Vec<f64> = row.iter().map(|v| v - mean).collect();
            let g = gy.row(unit);
            let gn = dot(g, g).sqrt();
            let yn = dot(&yhat, &yhat).sqrt();
            let (along_yhat, along_ones) = if gn == 0.0 {
                (0.0, 0.0)
            } else {
                let ay = if yn == 0.0 { 0.0 } else { dot(g, &yhat).abs() / (gn * yn) };
                (ay, g.iter().sum::<f64>().abs() / (gn * b.sqrt()))
            };
            out.push(PreactivationCheck { layer: l, unit, along_yhat, along_ones });
        }
    }
    Ok(out)
}
