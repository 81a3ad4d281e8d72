use serde::{Deserialize, Serialize};

use super::model::{MlpModel, ParamKind};
use super::pass::{forward, GradientBundle};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// ReLU inputs closer than this to zero make a finite-difference coordinate
/// unreliable if the perturbation moves them.
pub const KINK_MARGIN: f64 = 1e-4;

/// Denominator floor for relative gradient errors. Central differences with
/// h = 1e-5 carry absolute errors near 1e-10, so entries much smaller than
/// this are compared in absolute terms.
pub const GRAD_REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    Param(usize, ParamKind),
    Input,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coordinate {
    pub target: Target,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct FiniteDiff {
    pub grads: GradientBundle,
    /// Coordinates whose perturbation crossed or touched a ReLU kink.
    pub kinked: Vec<Coordinate>,
}

fn near_kink(base: &[f64], moved: &[f64]) -> bool {
    base.iter().zip(moved).any(|(&a, &b)| (a > 0.0) != (b > 0.0) || (a.abs() < KINK_MARGIN && a != b))
}

/// Central differences `(L(theta + h) - L(theta - h)) / 2h` for every
/// parameter and input coordinate.
pub fn finite_diff(model: &MlpModel, x: &DenseTensor, labels: &[usize], h: f64) -> Result<GradientBundle> {
    finite_diff_detailed(model, x, labels, h).map(|f| f.grads)
}

/// [`finite_diff`] that also reports coordinates near ReLU kinks.
pub fn finite_diff_detailed(model: &MlpModel, x: &DenseTensor, labels: &[usize], h: f64) -> Result<FiniteDiff> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let base = forward(model, x, labels)?;
    let base_relu = base.relu_inputs(model);
    let mut grads = GradientBundle::zeros_like(model, x.cols());
    grads.loss = base.loss;
    let mut kinked = Vec::new();

    let mut probe = model.clone();
    for (l, kind) in model.param_ids() {
        let len = model.param(l, kind).map_or(0, <[f64]>::len);
        for i in 0..len {
            let orig = model.param(l, kind).expect("listed parameter")[i];
            let mut eval = |value: f64| -> Result<(f64, Vec<f64>)> {
                probe.param_mut(l, kind).expect("listed parameter")[i] = value;
                let p = forward(&probe, x, labels)?;
                Ok((p.loss, p.relu_inputs(&probe)))
            };
            let (lp, rp) = eval(orig + h)?;
            let (lm, rm) = eval(orig - h)?;
            eval(orig)?;
            grads.get_mut(l, kind).expect("listed parameter")[i] = (lp - lm) / (2.0 * h);
            if near_kink(&base_relu, &rp) || near_kink(&base_relu, &rm) {
                kinked.push(Coordinate { target: Target::Param(l, kind), index: i });
            }
        }
    }

    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        xp.data_mut()[i] = orig + h;
        let plus = forward(model, &xp, labels)?;
        xp.data_mut()[i] = orig - h;
        let minus = forward(model, &xp, labels)?;
        xp.data_mut()[i] = orig;
        grads.input.data_mut()[i] = (plus.loss - minus.loss) / (2.0 * h);
        if near_kink(&base_relu, &plus.relu_inputs(model)) || near_kink(&base_relu, &minus.relu_inputs(model)) {
            kinked.push(Coordinate { target: Target::Input, index: i });
        }
    }
    Ok(FiniteDiff { grads, kinked })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub worst: Option<Coordinate>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Elementwise comparison of two gradient bundles over every parameter and
/// the input, skipping `skip` coordinates.
pub fn compare_gradients(
    model: &MlpModel,
    analytic: &GradientBundle,
    numeric: &GradientBundle,
    skip: &[Coordinate],
    floor: f64,
) -> Result<GradCheck> {
    let mut out = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0, skipped: 0, worst: None };
    let mut visit = |target: Target, a: &[f64], n: &[f64]| -> Result<()> {
        if a.len() != n.len() {
            return Err(Error::Dimension(format!("gradient lengths differ for {target:?}")));
        }
        for (index, (&ai, &ni)) in a.iter().zip(n).enumerate() {
            let c = Coordinate { target, index };
            if skip.contains(&c) {
                out.skipped += 1;
                continue;
            }
            out.checked += 1;
            let rel = relative_error(ai, ni, floor);
            if rel > out.max_rel_err || !rel.is_finite() {
                out.max_rel_err = rel;
                out.worst = Some(c);
            }
            out.max_abs_err = out.max_abs_err.max((ai - ni).abs());
        }
        Ok(())
    };
    for (l, kind) in model.param_ids() {
        let a = analytic.get(l, kind).ok_or_else(|| Error::Dimension(format!("analytic gradient lacks {kind:?} of layer {l}")))?;
        let n = numeric.get(l, kind).ok_or_else(|| Error::Dimension(format!("numeric gradient lacks {kind:?} of layer {l}")))?;
        visit(Target::Param(l, kind), a, n)?;
    }
    visit(Target::Input, analytic.input.data(), numeric.input.data())?;
    Ok(out)
}

/// Central difference of a scalar function of a vector.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let fp = f(&p);
            p[i] = x[i] - h;
            let fm = f(&p);
            p[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradients::{backward, Activation, MlpConfig};
    use crate::normalizers::Method;
    use crate::tensor::SeededRng;

    #[test]
    fn quadratic_probe() {
        let g = central_difference(|w| w[0] * w[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn second_order_convergence() {
        // exp has nonzero third derivative, so the error scales as h^2.
        let exact = 1f64.exp();
        let err = |h: f64| (central_difference(|w| w[0].exp(), &[1.0], h)[0] - exact).abs();
        for h in [1e-1, 5e-2, 2.5e-2] {
            let ratio = err(h) / err(h / 2.0);
            assert!((ratio - 4.0).abs() < 0.05, "h={h}: ratio {ratio}");
        }
    }

    #[test]
    fn nonpositive_step_rejected() {
        let model = MlpModel::linear(DenseTensor::identity(2), vec![0.0; 2]).unwrap();
        let x = DenseTensor::identity(2);
        assert!(matches!(finite_diff(&model, &x, &[0, 1], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn small_model_matches_backward() {
        let mut rng = SeededRng::new(60);
        let cfg = MlpConfig { input_dim: 3, hidden: vec![4], classes: 2, method: Method::BatchNorm, eps: 0.0, activation: Activation::Tanh, seed: 1, ..Default::default() };
        let model = MlpModel::from_config(&cfg).unwrap();
        let x = rng.normal_tensor(&[3, 5], 1.0);
        let y = [0, 1, 1, 0, 1];
        let analytic = backward(&model, &forward(&model, &x, &y).unwrap()).unwrap();
        let fd = finite_diff_detailed(&model, &x, &y, 1e-5).unwrap();
        assert!(fd.kinked.is_empty());
        let check = compare_gradients(&model, &analytic, &fd.grads, &[], 1e-6).unwrap();
        assert!(check.max_rel_err < 1e-5, "{check:?}");
        assert_eq!(check.checked, model.num_params() + 15);
    }
}
