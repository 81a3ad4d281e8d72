use super::standardize::{standardize_along_backward, standardize_along_cached};
use super::{Method, Mode, NormalizerSpec};
use crate::error::{Error, Result};
use crate::tensor::{matmul, DenseTensor};

/// Forward state of a data-based normalizer applied to an `m x B`
/// pre-activation matrix.
#[derive(Debug, Clone)]
pub(crate) struct DataForward {
    /// `gamma * xhat + beta`, shape `m x B`.
    pub output: DenseTensor,
    /// Standardized pre-activation, shape `m x B`.
    pub xhat: DenseTensor,
    /// Per-slice inverse scale (train path) or per-unit scale (BN eval).
    pub inv_scale: Vec<f64>,
    /// Per-unit batch mean and variance of the rows (BN train only).
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    view: Vec<usize>,
    axes: Vec<usize>,
    eval_linear: bool,
}

fn view_for(method: Method, m: usize, b: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    match method {
        Method::BatchNorm => Ok((vec![m, b], vec![1])),
        Method::LayerNorm => Ok((vec![m, b], vec![0])),
        Method::GroupNorm(g) => {
            if g == 0 || m % g != 0 {
                return Err(Error::Config(format!("group count {g} does not divide {m} features")));
            }
            Ok((vec![g, m / g, b], vec![1]))
        }
        Method::InstanceNorm => Err(Error::Config(
            "instance normalization needs a C x L x B tensor; on m x B activations each slice has one element".into(),
        )),
        other => Err(Error::NotApplicable(format!("{other} is not a data-based normalizer"))),
    }
}

fn apply_affine(xhat: &DenseTensor, spec: &NormalizerSpec) -> DenseTensor {
    let mut out = xhat.clone();
    if let Some(a) = &spec.affine {
        for i in 0..out.rows() {
            let (g, b) = (a.gamma[i], a.beta[i]);
            out.row_mut(i).iter_mut().for_each(|x| *x = g * *x + b);
        }
    }
    out
}

pub(crate) fn data_forward(y: &DenseTensor, spec: &NormalizerSpec) -> Result<DataForward> {
    let (m, b) = y.expect_2d("data normalizer input")?;
    spec.validate(m)?;
    if spec.method == Method::BatchNorm && spec.mode == Mode::Eval {
        let running = spec
            .running
            .as_ref()
            .ok_or_else(|| Error::Config("eval-mode batch normalization needs running statistics".into()))?;
        let mut xhat = y.clone();
        let mut scale = Vec::with_capacity(m);
        for i in 0..m {
            let k = 1.0 / (running.var[i] + spec.eps).sqrt();
            if !k.is_finite() {
                return Err(Error::Degenerate { context: format!("running variance of unit {i} is zero at eps = 0") });
            }
            let mu = running.mean[i];
            xhat.row_mut(i).iter_mut().for_each(|x| *x = (*x - mu) * k);
            scale.push(k);
        }
        return Ok(DataForward {
            output: apply_affine(&xhat, spec),
            xhat,
            inv_scale: scale,
            batch_mean: Vec::new(),
            batch_var: Vec::new(),
            view: vec![m, b],
            axes: vec![1],
            eval_linear: true,
        });
    }
    if spec.method == Method::BatchNorm && b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let (view, axes) = view_for(spec.method, m, b)?;
    let st = standardize_along_cached(&y.reshape(&view)?, &axes, spec.eps)?;
    let xhat = st.output.reshape(&[m, b])?;
    let (batch_mean, batch_var) = if spec.method == Method::BatchNorm { (st.mean, st.var) } else { (Vec::new(), Vec::new()) };
    Ok(DataForward {
        output: apply_affine(&xhat, spec),
        xhat,
        inv_scale: st.inv_scale,
        batch_mean,
        batch_var,
        view,
        axes,
        eval_linear: false,
    })
}

/// Returns `(dL/dy, dL/dgamma, dL/dbeta)` given `dL/d output`.
pub(crate) fn data_backward(
    fwd: &DataForward,
    spec: &NormalizerSpec,
    grad_out: &DenseTensor,
) -> Result<(DenseTensor, Vec<f64>, Vec<f64>)> {
    let (m, b) = (fwd.xhat.rows(), fwd.xhat.cols());
    let mut dgamma = vec![0.0; m];
    let mut dbeta = vec![0.0; m];
    let mut dxhat = grad_out.clone();
    for i in 0..m {
        let g = grad_out.row(i);
        dgamma[i] = g.iter().zip(fwd.xhat.row(i)).map(|(a, z)| a * z).sum();
        dbeta[i] = g.iter().sum();
        let gi = spec.gamma(i);
        dxhat.row_mut(i).iter_mut().for_each(|x| *x *= gi);
    }
    let dy = if fwd.eval_linear {
        let mut d = dxhat;
        for i in 0..m {
            let k = fwd.inv_scale[i];
            d.row_mut(i).iter_mut().for_each(|x| *x *= k);
        }
        d
    } else {
        standardize_along_backward(&fwd.xhat.reshape(&fwd.view)?, &fwd.inv_scale, &dxhat.reshape(&fwd.view)?, &fwd.axes)?
            .reshape(&[m, b])?
    };
    Ok((dy, dgamma, dbeta))
}

/// Batch normalization of an `m x B` pre-activation: each row is standardized
/// over the batch and mapped onto the sphere of radius `gamma_i sqrt(B)`
/// centered at `beta_i e_B`. Train mode uses batch statistics and updates the
/// running statistics; eval mode uses the running statistics.
pub fn batch_norm(y: &DenseTensor, spec: &mut NormalizerSpec) -> Result<DenseTensor> {
    if spec.method != Method::BatchNorm {
        return Err(Error::Config(format!("batch_norm called with a {} spec", spec.method)));
    }
    let fwd = data_forward(y, spec)?;
    if spec.mode == Mode::Train {
        if let Some(r) = spec.running.as_mut() {
            r.update(&fwd.batch_mean, &fwd.batch_var);
        }
    }
    Ok(fwd.output)
}

/// Layer normalization of an `m x B` pre-activation: each column (one
/// sample's layer output) is standardized over the `m` features.
pub fn layer_norm(y: &DenseTensor, spec: &NormalizerSpec) -> Result<DenseTensor> {
    let spec = NormalizerSpec { method: Method::LayerNorm, ..spec.clone() };
    data_forward(y, &spec).map(|f| f.output)
}

/// Layer normalization computed without centering `Y`: the rows of `W` are
/// centered by their mean row, `(W - W_bar) X`, and each column is then scaled
/// onto the sphere. Agrees with `layer_norm(W X)`.
pub fn layer_norm_weight_path(w: &DenseTensor, x: &DenseTensor, spec: &NormalizerSpec) -> Result<DenseTensor> {
    let (m, n) = w.expect_2d("layer_norm_weight_path weight")?;
    spec.validate(m)?;
    if m < 2 {
        return Err(Error::Dimension("layer normalization needs m >= 2".into()));
    }
    let mut mean_row = vec![0.0; n];
    for i in 0..m {
        for (acc, v) in mean_row.iter_mut().zip(w.row(i)) {
            *acc += v / m as f64;
        }
    }
    let mut wc = w.clone();
    for i in 0..m {
        wc.row_mut(i).iter_mut().zip(&mean_row).for_each(|(v, mu)| *v -= mu);
    }
    let c = matmul(&wc, x)?;
    let b = c.cols();
    let mut out = DenseTensor::zeros(&[m, b]);
    for k in 0..b {
        let col = c.col(k);
        let sq: f64 = col.iter().map(|v| v * v).sum();
        let scale = if spec.eps == 0.0 {
            let norm = sq.sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate { context: format!("column {k} has zero variance at eps = 0") });
            }
            (m as f64).sqrt() / norm
        } else {
            1.0 / (sq / m as f64 + spec.eps).sqrt()
        };
        for (i, v) in col.iter().enumerate() {
            out.set(i, k, spec.gamma(i) * scale * v + spec.beta(i));
        }
    }
    Ok(out)
}

/// Group normalization of a `C x L x B` tensor: channels are split into `g`
/// contiguous groups and each (group, sample) slice of `C/g * L` values is
/// standardized. Affine parameters are per channel.
pub fn group_norm(t: &DenseTensor, g: usize, spec: &NormalizerSpec) -> Result<DenseTensor> {
    if t.ndim() != 3 {
        return Err(Error::Dimension(format!("group_norm expects C x L x B, got {:?}", t.shape())));
    }
    let (c, l, b) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if g == 0 || c % g != 0 {
        return Err(Error::Config(format!("group count {g} does not divide {c} channels")));
    }
    NormalizerSpec { method: Method::GroupNorm(g), ..spec.clone() }.validate(c)?;
    let z = standardize_along_cached(&t.reshape(&[g, c / g, l, b])?, &[1, 2], spec.eps)?.output;
    let mut out = z.into_data();
    if let Some(a) = &spec.affine {
        for (flat, v) in out.iter_mut().enumerate() {
            let ch = flat / (l * b);
            *v = a.gamma[ch] * *v + a.beta[ch];
        }
    }
    Ok(DenseTensor::from_parts(vec![c, l, b], out))
}

/// Instance normalization: group normalization with one channel per group.
pub fn instance_norm(t: &DenseTensor, spec: &NormalizerSpec) -> Result<DenseTensor> {
    if t.ndim() != 3 {
        return Err(Error::Dimension(format!("instance_norm expects C x L x B, got {:?}", t.shape())));
    }
    if t.shape()[1] < 2 {
        return Err(Error::Degenerate { context: "instance normalization needs L >= 2 positions per channel".into() });
    }
    group_norm(t, t.shape()[0], spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalizers::{standardize_along, RunningStats};
    use crate::tensor::{norm2, SeededRng};

    fn bn_spec(m: usize) -> NormalizerSpec {
        NormalizerSpec::plain(Method::BatchNorm, 0.0).with_affine(vec![1.0; m], vec![0.0; m])
    }

    #[test]
    fn two_sample_batch_collapses_to_signs() {
        let y = DenseTensor::matrix(1, 2, vec![3.0, 7.0]).unwrap();
        let out = batch_norm(&y, &mut bn_spec(1)).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn standardized_row_is_fixed_point() {
        // (-sqrt(1.5), 0, sqrt(1.5)) has mean 0 and population variance 1.
        let s = 1.5f64.sqrt();
        let y = DenseTensor::matrix(1, 3, vec![-s, 0.0, s]).unwrap();
        let out = batch_norm(&y, &mut bn_spec(1)).unwrap();
        assert!(out.max_abs_diff(&y) < 1e-15);
    }

    #[test]
    fn batch_permutation_equivariance() {
        let mut rng = SeededRng::new(10);
        let y = rng.normal_tensor(&[4, 6], 1.0);
        let perm = [3, 0, 5, 1, 4, 2];
        let mut spec = bn_spec(4).with_affine(vec![0.5, 2.0, 1.0, 3.0], vec![0.1, -1.0, 0.0, 2.0]);
        let out = batch_norm(&y, &mut spec).unwrap();
        let out_p = batch_norm(&y.select_cols(&perm), &mut spec).unwrap();
        assert!(out_p.max_abs_diff(&out.select_cols(&perm)) < 1e-14);
    }

    #[test]
    fn classical_form_equals_sphere_form() {
        // gamma * sqrt(B) (y - ybar) / ||y - ybar|| + beta  vs  gamma (y - mu) / sigma + beta
        let mut rng = SeededRng::new(12);
        let b = 7;
        let y = rng.normal_tensor(&[3, b], 2.0);
        let gamma = vec![0.7, 1.3, 2.0];
        let beta = vec![-0.5, 0.0, 1.0];
        let out = batch_norm(&y, &mut bn_spec(3).with_affine(gamma.clone(), beta.clone())).unwrap();
        for i in 0..3 {
            let row = y.row(i);
            let mu = row.iter().sum::<f64>() / b as f64;
            let sigma = (row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / b as f64).sqrt();
            let centered: Vec<f64> = row.iter().map(|x| x - mu).collect();
            let cn = norm2(&centered);
            for k in 0..b {
                let sphere = gamma[i] * (b as f64).sqrt() * centered[k] / cn + beta[i];
                let classical = gamma[i] * (row[k] - mu) / sigma + beta[i];
                assert!((sphere - classical).abs() < 1e-13);
                assert!((out.get(i, k) - sphere).abs() < 1e-13);
            }
            let radius = norm2(&out.row(i).iter().map(|x| x - beta[i]).collect::<Vec<_>>());
            assert!((radius - gamma[i] * (b as f64).sqrt()).abs() < 1e-12);
            let total = norm2(out.row(i));
            assert!((total - (b as f64 * (gamma[i].powi(2) + beta[i].powi(2))).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_too_small_in_train_mode() {
        let y = DenseTensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        assert!(matches!(batch_norm(&y, &mut bn_spec(2)), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let y = DenseTensor::matrix(1, 2, vec![3.0, 5.0]).unwrap();
        let mut spec = NormalizerSpec::new(Method::BatchNorm, 1, 0.0).with_mode(Mode::Eval);
        spec.running = Some(RunningStats { mean: vec![1.0], var: vec![4.0], momentum: 0.1 });
        let out = batch_norm(&y, &mut spec).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
        // eval mode also works on a single sample and leaves the stats alone
        let one = DenseTensor::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(batch_norm(&one, &mut spec).unwrap().data(), &[1.0]);
        assert_eq!(spec.running.as_ref().unwrap().mean, vec![1.0]);
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let y = DenseTensor::matrix(1, 2, vec![1.0, 3.0]).unwrap();
        let mut spec = NormalizerSpec::new(Method::BatchNorm, 1, 0.0);
        batch_norm(&y, &mut spec).unwrap();
        let r = spec.running.unwrap();
        assert!((r.mean[0] - 0.2).abs() < 1e-15);
        assert!((r.var[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unified_operator_consistency() {
        let mut rng = SeededRng::new(13);
        let y = rng.normal_tensor(&[5, 8], 1.0);
        let gamma: Vec<f64> = (0..5).map(|i| 0.5 + i as f64).collect();
        let beta: Vec<f64> = (0..5).map(|i| i as f64 - 2.0).collect();
        let spec = bn_spec(5).with_affine(gamma.clone(), beta.clone());
        let affine = |z: DenseTensor| {
            let mut z = z;
            for i in 0..5 {
                z.row_mut(i).iter_mut().for_each(|x| *x = gamma[i] * *x + beta[i]);
            }
            z
        };
        let bn = batch_norm(&y, &mut spec.clone()).unwrap();
        assert!(bn.max_abs_diff(&affine(standardize_along(&y, &[1], 0.0).unwrap())) <= 1e-12);
        let ln = layer_norm(&y, &spec).unwrap();
        assert!(ln.max_abs_diff(&affine(standardize_along(&y, &[0], 0.0).unwrap())) <= 1e-12);
    }

    #[test]
    fn layer_norm_dual_path() {
        let mut rng = SeededRng::new(14);
        for eps in [0.0, 1e-5] {
            let w = rng.normal_tensor(&[6, 4], 1.0);
            let x = rng.normal_tensor(&[4, 5], 1.0);
            let spec = NormalizerSpec::plain(Method::LayerNorm, eps)
                .with_affine((0..6).map(|i| 1.0 + 0.1 * i as f64).collect(), vec![0.3; 6]);
            let direct = layer_norm(&matmul(&w, &x).unwrap(), &spec).unwrap();
            let weight_path = layer_norm_weight_path(&w, &x, &spec).unwrap();
            assert!(direct.max_abs_diff(&weight_path) <= 1e-10);
        }
    }

    #[test]
    fn layer_norm_scaling_and_row_shift_invariance() {
        let mut rng = SeededRng::new(15);
        let w = rng.normal_tensor(&[5, 3], 1.0);
        let x = rng.normal_tensor(&[3, 4], 1.0);
        let spec = NormalizerSpec::plain(Method::LayerNorm, 0.0);
        let base = layer_norm(&matmul(&w, &x).unwrap(), &spec).unwrap();
        let scaled = layer_norm(&matmul(&w.scale(3.5), &x).unwrap(), &spec).unwrap();
        assert!(scaled.max_abs_diff(&base) < 1e-12);
        // W -> W + e_m c^T adds the same value to every feature of a column
        let c = [0.7, -2.0, 1.1];
        let mut shifted = w.clone();
        for i in 0..5 {
            shifted.row_mut(i).iter_mut().zip(&c).for_each(|(v, ci)| *v += ci);
        }
        let moved = layer_norm(&matmul(&shifted, &x).unwrap(), &spec).unwrap();
        assert!(moved.max_abs_diff(&base) < 1e-12);
    }

    #[test]
    fn group_norm_boundaries() {
        let mut rng = SeededRng::new(16);
        let (c, l, b) = (4, 3, 5);
        let t = rng.normal_tensor(&[c, l, b], 1.0);
        let spec = NormalizerSpec::plain(Method::GroupNorm(1), 0.0);
        // g = 1: layer norm over the flattened C*L features of each sample
        let g1 = group_norm(&t, 1, &spec).unwrap();
        let ln = layer_norm(&t.reshape(&[c * l, b]).unwrap(), &spec).unwrap();
        assert!(g1.reshape(&[c * l, b]).unwrap().max_abs_diff(&ln) < 1e-14);
        // g = C: instance norm
        let gc = group_norm(&t, c, &spec).unwrap();
        assert_eq!(gc, instance_norm(&t, &spec).unwrap());
        assert!(matches!(group_norm(&t, 3, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn group_norm_slices_standardized() {
        let mut rng = SeededRng::new(17);
        let t = rng.normal_tensor(&[6, 2, 3], 2.0);
        let z = group_norm(&t, 3, &NormalizerSpec::plain(Method::GroupNorm(3), 0.0)).unwrap();
        for grp in 0..3 {
            for s in 0..3 {
                let vals: Vec<f64> = (grp * 2..grp * 2 + 2)
                    .flat_map(|ch| (0..2).map(move |l| (ch, l)))
                    .map(|(ch, l)| z.data()[ch * 6 + l * 3 + s])
                    .collect();
                let mu = vals.iter().sum::<f64>() / 4.0;
                let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
                assert!(mu.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn instance_norm_edge_cases() {
        let spec = NormalizerSpec::plain(Method::InstanceNorm, 0.0);
        let mut t = DenseTensor::zeros(&[2, 3, 2]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = if i < 6 { i as f64 } else { 4.0 };
        }
        assert!(matches!(instance_norm(&t, &spec), Err(Error::Degenerate { .. })));
        assert!(matches!(instance_norm(&DenseTensor::zeros(&[2, 1, 3]), &spec), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn instance_norm_channel_affine_invariance() {
        let mut rng = SeededRng::new(18);
        let (c, l, b) = (3, 5, 2);
        let t = rng.normal_tensor(&[c, l, b], 1.0);
        let spec = NormalizerSpec::plain(Method::InstanceNorm, 0.0);
        let base = instance_norm(&t, &spec).unwrap();
        let mut moved = t.clone();
        for ch in 0..c {
            for s in 0..b {
                let (alpha, shift) = (0.5 + rng.uniform() * 4.0, rng.uniform_range(-3.0, 3.0));
                for pos in 0..l {
                    let idx = ch * l * b + pos * b + s;
                    moved.data_mut()[idx] = alpha * t.data()[idx] + shift;
                }
            }
        }
        assert!(instance_norm(&moved, &spec).unwrap().max_abs_diff(&base) < 1e-12);
    }

    #[test]
    fn scaling_invariance_of_data_methods() {
        let mut rng = SeededRng::new(19);
        let y = rng.normal_tensor(&[4, 6], 1.0);
        for method in [Method::BatchNorm, Method::LayerNorm, Method::GroupNorm(2)] {
            let spec = NormalizerSpec::new(method, 4, 0.0);
            let a = data_forward(&y, &spec).unwrap().output;
            let b = data_forward(&y.scale(7.25), &spec).unwrap().output;
            assert!(a.max_abs_diff(&b) < 1e-12, "{method}");
        }
    }

    #[test]
    fn instance_norm_rejected_on_matrices() {
        let y = DenseTensor::zeros(&[4, 4]);
        let spec = NormalizerSpec::plain(Method::InstanceNorm, 0.0);
        assert!(matches!(data_forward(&y, &spec), Err(Error::Config(_))));
    }
}
