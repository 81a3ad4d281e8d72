use serde::{Deserialize, Serialize};

use super::model::{Head, Layer, MlpModel, ParamKind};
use crate::error::{Error, Result};
use crate::normalizers::{data_backward, data_forward, DataForward, Method, Mode};
use crate::tensor::{dot, matmul, norm2, sym_eigen, DenseTensor};

#[derive(Debug, Clone)]
enum WeightCache {
    Plain,
    /// Rows divided by their norm.
    Wn { units: DenseTensor, norms: Vec<f64> },
    /// Centered rows divided by their norm; `factor` is 1 (CWN) or sqrt(n) (WS).
    Centered { units: DenseTensor, norms: Vec<f64>, factor: f64 },
    Spectral { sigma: f64, u: Vec<f64>, v: Vec<f64> },
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: DenseTensor,
    w_eff: DenseTensor,
    weight: WeightCache,
    pre: DenseTensor,
    data: Option<DataForward>,
    z: DenseTensor,
    out: DenseTensor,
}

/// Everything the backward pass needs, plus the loss and output.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub loss: f64,
    pub logits: DenseTensor,
    /// Softmax probabilities (cross-entropy head) or the logits themselves.
    pub probs: DenseTensor,
    labels: Vec<usize>,
    caches: Vec<LayerCache>,
}

impl ForwardPass {
    /// Input to layer `l` (the previous layer's activation), `n x B`.
    pub fn layer_input(&self, l: usize) -> &DenseTensor {
        &self.caches[l].input
    }

    /// Pre-normalization activation `W_eff A + b` of layer `l`.
    pub fn preactivation(&self, l: usize) -> &DenseTensor {
        &self.caches[l].pre
    }

    /// Effective weight used by layer `l` after any weight transform.
    pub fn effective_weight(&self, l: usize) -> &DenseTensor {
        &self.caches[l].w_eff
    }

    /// Per-unit batch mean and variance of a train-mode BN layer.
    pub fn batch_stats(&self, l: usize) -> Option<(&[f64], &[f64])> {
        let d = self.caches.get(l)?.data.as_ref()?;
        (!d.batch_mean.is_empty()).then(|| (d.batch_mean.as_slice(), d.batch_var.as_slice()))
    }

    /// Every ReLU input in the network, layer by layer.
    pub(crate) fn relu_inputs(&self, model: &MlpModel) -> Vec<f64> {
        let mut out = Vec::new();
        for (c, layer) in self.caches.iter().zip(&model.layers) {
            if layer.activation == super::Activation::Relu {
                out.extend_from_slice(c.z.data());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrads {
    pub weight: DenseTensor,
    pub bias: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle {
    pub loss: f64,
    pub layers: Vec<LayerGrads>,
    /// Gradient with respect to the input batch.
    pub input: DenseTensor,
    /// Gradient with respect to each layer's pre-normalization activation.
    /// Empty when produced by finite differences.
    pub preactivation: Vec<DenseTensor>,
}

impl GradientBundle {
    pub fn get(&self, layer: usize, kind: ParamKind) -> Option<&[f64]> {
        let l = self.layers.get(layer)?;
        match kind {
            ParamKind::Weight => Some(l.weight.data()),
            ParamKind::Bias => l.bias.as_deref(),
            ParamKind::Gamma => l.gamma.as_deref(),
            ParamKind::Beta => l.beta.as_deref(),
        }
    }

    pub(crate) fn get_mut(&mut self, layer: usize, kind: ParamKind) -> Option<&mut [f64]> {
        let l = self.layers.get_mut(layer)?;
        match kind {
            ParamKind::Weight => Some(l.weight.data_mut()),
            ParamKind::Bias => l.bias.as_deref_mut(),
            ParamKind::Gamma => l.gamma.as_deref_mut(),
            ParamKind::Beta => l.beta.as_deref_mut(),
        }
    }

    /// Zero gradients shaped like the model's parameters.
    pub(crate) fn zeros_like(model: &MlpModel, batch: usize) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| {
                let z = |p: Option<&Vec<f64>>| p.map(|v| vec![0.0; v.len()]);
                let affine = l.norm.affine.as_ref();
                LayerGrads {
                    weight: DenseTensor::zeros(l.weight.shape()),
                    bias: z(l.bias.as_ref()),
                    gamma: z(affine.map(|a| &a.gamma)),
                    beta: z(affine.map(|a| &a.beta)),
                }
            })
            .collect();
        Self { loss: 0.0, layers, input: DenseTensor::zeros(&[model.input_dim(), batch]), preactivation: Vec::new() }
    }
}

/// Exact largest singular value of `w` with its singular vectors.
fn exact_spectral(w: &DenseTensor) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (m, n) = (w.rows(), w.cols());
    let wt = w.transpose();
    let (sigma, u, v) = if n <= m {
        let eig = sym_eigen(&matmul(&wt, w)?)?;
        let sigma = eig.eigenvalues[0].max(0.0).sqrt();
        let v = eig.vector(0);
        let u: Vec<f64> = (0..m).map(|i| dot(w.row(i), &v) / sigma).collect();
        (sigma, u, v)
    } else {
        let eig = sym_eigen(&matmul(w, &wt)?)?;
        let sigma = eig.eigenvalues[0].max(0.0).sqrt();
        let u = eig.vector(0);
        let v: Vec<f64> = (0..n).map(|j| dot(wt.row(j), &u) / sigma).collect();
        (sigma, u, v)
    };
    if sigma == 0.0 || !sigma.is_finite() {
        return Err(Error::Degenerate { context: "spectral normalization of a zero matrix".into() });
    }
    Ok((sigma, u, v))
}

fn effective_weight(layer: &Layer, index: usize) -> Result<(DenseTensor, WeightCache)> {
    let w = &layer.weight;
    let (m, n) = (w.rows(), w.cols());
    let spec = &layer.norm;
    match spec.method {
        Method::WeightNorm => {
            let mut units = w.clone();
            let mut norms = Vec::with_capacity(m);
            for i in 0..m {
                let r = norm2(w.row(i));
                if r == 0.0 {
                    return Err(Error::Degenerate { context: format!("layer {index} row {i} is zero under weight normalization") });
                }
                units.row_mut(i).iter_mut().for_each(|x| *x /= r);
                norms.push(r);
            }
            let mut w_eff = units.clone();
            for i in 0..m {
                let g = spec.gamma(i);
                w_eff.row_mut(i).iter_mut().for_each(|x| *x *= g);
            }
            Ok((w_eff, WeightCache::Wn { units, norms }))
        }
        Method::CenteredWeightNorm | Method::WeightStandardization => {
            if n < 2 {
                return Err(Error::Dimension(format!("layer {index}: centered weight transforms need fan-in >= 2")));
            }
            let factor = if spec.method == Method::WeightStandardization { (n as f64).sqrt() } else { 1.0 };
            let mut units = w.clone();
            let mut norms = Vec::with_capacity(m);
            for i in 0..m {
                let (c, r) = crate::normalizers::cwn_slice(w.row(i)).ok_or_else(|| Error::Degenerate {
                    context: format!("layer {index} row {i} is constant under weight centering"),
                })?;
                units.row_mut(i).copy_from_slice(&c);
                norms.push(r);
            }
            let mut w_eff = units.clone();
            for i in 0..m {
                let g = spec.gamma(i) * factor;
                w_eff.row_mut(i).iter_mut().for_each(|x| *x *= g);
            }
            Ok((w_eff, WeightCache::Centered { units, norms, factor }))
        }
        Method::SpectralNorm => {
            let (sigma, u, v) = exact_spectral(w)?;
            Ok((w.scale(1.0 / sigma), WeightCache::Spectral { sigma, u, v }))
        }
        _ => Ok((w.clone(), WeightCache::Plain)),
    }
}

/// Bias added before normalization (none for data-based methods).
fn layer_bias(layer: &Layer) -> Option<&[f64]> {
    match layer.norm.method {
        Method::WeightNorm | Method::CenteredWeightNorm | Method::WeightStandardization => {
            layer.norm.affine.as_ref().map(|a| a.beta.as_slice())
        }
        m if m.is_data_based() => None,
        _ => layer.bias.as_deref(),
    }
}

fn check_input(model: &MlpModel, x: &DenseTensor) -> Result<()> {
    let (n, b) = x.expect_2d("model input")?;
    if n != model.input_dim() {
        return Err(Error::Dimension(format!("input has {n} features, model expects {}", model.input_dim())));
    }
    if b == 0 {
        return Err(Error::Dimension("empty batch".into()));
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model input".into()));
    }
    Ok(())
}

fn run_layers(model: &MlpModel, x: &DenseTensor) -> Result<Vec<LayerCache>> {
    check_input(model, x)?;
    let mut caches: Vec<LayerCache> = Vec::with_capacity(model.layers.len());
    for (index, layer) in model.layers.iter().enumerate() {
        let input = caches.last().map_or_else(|| x.clone(), |c| c.out.clone());
        let (w_eff, weight) = effective_weight(layer, index)?;
        let mut pre = matmul(&w_eff, &input)?;
        if let Some(b) = layer_bias(layer) {
            for (i, &bi) in b.iter().enumerate() {
                pre.row_mut(i).iter_mut().for_each(|v| *v += bi);
            }
        }
        let data = if layer.norm.method.is_data_based() { Some(data_forward(&pre, &layer.norm)?) } else { None };
        let z = data.as_ref().map_or_else(|| pre.clone(), |d| d.output.clone());
        let out = z.map(|v| layer.activation.apply(v));
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("layer {index} output")));
        }
        caches.push(LayerCache { input, w_eff, weight, pre, data, z, out });
    }
    Ok(caches)
}

/// Network output for a `n x B` batch (samples as columns).
pub fn logits(model: &MlpModel, x: &DenseTensor) -> Result<DenseTensor> {
    Ok(run_layers(model, x)?.pop().expect("model has layers").out)
}

fn softmax_columns(logits: &DenseTensor) -> DenseTensor {
    let (c, b) = (logits.rows(), logits.cols());
    let mut p = logits.clone();
    for k in 0..b {
        let col = logits.col(k);
        let mx = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = col.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        for i in 0..c {
            p.set(i, k, e[i] / s);
        }
    }
    p
}

/// Runs the model and evaluates the mean loss over the batch. Pure: batch
/// normalization running statistics are not touched (see
/// [`update_running_stats`]).
pub fn forward(model: &MlpModel, x: &DenseTensor, labels: &[usize]) -> Result<ForwardPass> {
    let caches = run_layers(model, x)?;
    let logits = caches.last().expect("model has layers").out.clone();
    let (c, b) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(Error::Dimension(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Validation(format!("label {bad} out of range for {c} classes")));
    }
    let (loss, probs) = match model.head {
        Head::SoftmaxCrossEntropy => {
            let mut total = 0.0;
            for (k, &y) in labels.iter().enumerate() {
                let col = logits.col(k);
                let mx = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + col.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                total += lse - col[y];
            }
            (total / b as f64, softmax_columns(&logits))
        }
        Head::SquaredError => {
            let mut total = 0.0;
            for (k, &y) in labels.iter().enumerate() {
                for i in 0..c {
                    let t = if i == y { 1.0 } else { 0.0 };
                    total += 0.5 * (logits.get(i, k) - t).powi(2);
                }
            }
            (total / b as f64, logits.clone())
        }
    };
    Ok(ForwardPass { loss, logits, probs, labels: labels.to_vec(), caches })
}

/// Folds the batch statistics of a train-mode forward pass into the running
/// averages of every BN layer.
pub fn update_running_stats(model: &mut MlpModel, pass: &ForwardPass) {
    for (l, layer) in model.layers.iter_mut().enumerate() {
        if layer.norm.method != Method::BatchNorm || layer.norm.mode != Mode::Train {
            continue;
        }
        if let (Some(r), Some((mean, var))) = (layer.norm.running.as_mut(), pass.batch_stats(l)) {
            r.update(mean, var);
        }
    }
}

fn weight_backward(cache: &WeightCache, layer: &Layer, g: &DenseTensor) -> (DenseTensor, Option<Vec<f64>>) {
    let m = g.rows();
    match cache {
        WeightCache::Plain => (g.clone(), None),
        WeightCache::Wn { units, norms } => {
            let mut dv = g.clone();
            let mut dgain = vec![0.0; m];
            for i in 0..m {
                let u = units.row(i);
                let proj = dot(g.row(i), u);
                dgain[i] = proj;
                let k = layer.norm.gamma(i) / norms[i];
                dv.row_mut(i).iter_mut().zip(u).for_each(|(d, &ui)| *d = k * (*d - proj * ui));
            }
            (dv, Some(dgain))
        }
        WeightCache::Centered { units, norms, factor } => {
            let mut dv = g.clone();
            let mut dgain = vec![0.0; m];
            for i in 0..m {
                let u = units.row(i);
                let proj = dot(g.row(i), u);
                dgain[i] = factor * proj;
                let k = layer.norm.gamma(i) * factor / norms[i];
                let row = dv.row_mut(i);
                row.iter_mut().zip(u).for_each(|(d, &ui)| *d = k * (*d - proj * ui));
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                row.iter_mut().for_each(|d| *d -= mean);
            }
            (dv, Some(dgain))
        }
        WeightCache::Spectral { sigma, u, v } => {
            let w = &layer.weight;
            let inner = dot(g.data(), w.data());
            let k = inner / (sigma * sigma);
            let mut dv = g.scale(1.0 / sigma);
            for (i, &ui) in u.iter().enumerate() {
                dv.row_mut(i).iter_mut().zip(v).for_each(|(d, &vj)| *d -= k * ui * vj);
            }
            (dv, None)
        }
    }
}

/// Exact gradients of the mean loss of `pass` with respect to every
/// parameter, the input, and each layer's pre-normalization activation.
pub fn backward(model: &MlpModel, pass: &ForwardPass) -> Result<GradientBundle> {
    let (c, b) = (pass.logits.rows(), pass.logits.cols());
    let mut grad = pass.probs.clone();
    for (k, &y) in pass.labels.iter().enumerate() {
        grad.set(y, k, grad.get(y, k) - 1.0);
    }
    let inv_b = 1.0 / b as f64;
    grad.data_mut().iter_mut().for_each(|v| *v *= inv_b);
    debug_assert_eq!(grad.rows(), c);

    let n_layers = model.layers.len();
    let mut layers = Vec::with_capacity(n_layers);
    let mut preactivation = Vec::with_capacity(n_layers);
    for (layer, cache) in model.layers.iter().zip(&pass.caches).rev() {
        let mut dz = grad;
        for ((d, &z), &o) in dz.data_mut().iter_mut().zip(cache.z.data()).zip(cache.out.data()) {
            *d *= layer.activation.derivative(z, o);
        }
        let (dy, mut gamma, mut beta, mut bias) = if let Some(fwd) = &cache.data {
            let (dy, dg, db) = data_backward(fwd, &layer.norm, &dz)?;
            let has_affine = layer.norm.affine.is_some();
            (dy, has_affine.then_some(dg), has_affine.then_some(db), None)
        } else {
            let sums: Vec<f64> = (0..dz.rows()).map(|i| dz.row(i).iter().sum()).collect();
            (dz, None, None, Some(sums))
        };
        let dw_eff = matmul(&dy, &cache.input.transpose())?;
        grad = matmul(&cache.w_eff.transpose(), &dy)?;
        let (dweight, dgain) = weight_backward(&cache.weight, layer, &dw_eff);
        if matches!(cache.weight, WeightCache::Wn { .. } | WeightCache::Centered { .. }) {
            gamma = layer.norm.affine.is_some().then(|| dgain.unwrap_or_default());
            beta = if layer.norm.affine.is_some() { bias.take() } else { None };
        }
        if layer.bias.is_none() {
            bias = None;
        }
        layers.push(LayerGrads { weight: dweight, bias, gamma, beta });
        preactivation.push(dy);
    }
    layers.reverse();
    preactivation.reverse();
    Ok(GradientBundle { loss: pass.loss, layers, input: grad, preactivation })
}

/// Forward and backward in one call.
pub fn loss_and_grad(model: &MlpModel, x: &DenseTensor, labels: &[usize]) -> Result<GradientBundle> {
    backward(model, &forward(model, x, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradients::{Activation, MlpConfig};
    use crate::normalizers::NormalizerSpec;
    use crate::tensor::SeededRng;

    fn batch(rng: &mut SeededRng, n: usize, b: usize, classes: usize) -> (DenseTensor, Vec<usize>) {
        (rng.normal_tensor(&[n, b], 1.0), (0..b).map(|_| rng.below(classes)).collect())
    }

    #[test]
    fn linear_gradient_closed_form() {
        let mut rng = SeededRng::new(50);
        let (x, y) = batch(&mut rng, 5, 7, 3);
        let w = rng.normal_tensor(&[3, 5], 1.0);
        let model = MlpModel::linear(w, vec![0.1, -0.2, 0.3]).unwrap();
        let pass = forward(&model, &x, &y).unwrap();
        let g = backward(&model, &pass).unwrap();
        let mut delta = pass.probs.clone();
        for (k, &t) in y.iter().enumerate() {
            delta.set(t, k, delta.get(t, k) - 1.0);
        }
        let expected = matmul(&delta, &x.transpose()).unwrap().scale(1.0 / 7.0);
        assert!(g.layers[0].weight.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn loss_matches_per_sample_oracle() {
        // Plain tanh network evaluated one sample at a time.
        let mut rng = SeededRng::new(51);
        let cfg = MlpConfig { input_dim: 4, hidden: vec![6, 5], classes: 3, method: Method::None, activation: Activation::Tanh, seed: 3, ..Default::default() };
        let mut model = MlpModel::from_config(&cfg).unwrap();
        for l in &mut model.layers {
            l.bias = Some(rng.normal_vec(l.out_dim(), 0.3));
        }
        let (x, y) = batch(&mut rng, 4, 9, 3);
        let loss = forward(&model, &x, &y).unwrap().loss;
        let mut oracle = 0.0;
        for k in 0..9 {
            let mut a = x.col(k);
            for (li, l) in model.layers.iter().enumerate() {
                let b = l.bias.as_ref().unwrap();
                let mut next = Vec::new();
                for i in 0..l.out_dim() {
                    let s: f64 = (0..l.in_dim()).map(|j| l.weight.get(i, j) * a[j]).sum::<f64>() + b[i];
                    next.push(if li + 1 < model.layers.len() { s.tanh() } else { s });
                }
                a = next;
            }
            let z: f64 = a.iter().map(|v| v.exp()).sum();
            oracle += -(a[y[k]].exp() / z).ln();
        }
        assert!((loss - oracle / 9.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        let x = DenseTensor::identity(3);
        let mut model = MlpModel::linear(DenseTensor::identity(3), vec![0.0; 3]).unwrap();
        model.head = Head::SquaredError;
        let g = loss_and_grad(&model, &x, &[0, 1, 2]).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.layers[0].weight.data().iter().all(|&v| v == 0.0));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_pure_and_running_stats_update_separately() {
        let cfg = MlpConfig { input_dim: 3, hidden: vec![4], classes: 2, ..Default::default() };
        let mut model = MlpModel::from_config(&cfg).unwrap();
        let mut rng = SeededRng::new(52);
        let (x, y) = batch(&mut rng, 3, 8, 2);
        let before = model.clone();
        let pass = forward(&model, &x, &y).unwrap();
        assert_eq!(model, before);
        update_running_stats(&mut model, &pass);
        let r = model.layers[0].norm.running.as_ref().unwrap();
        let (mean, _) = pass.batch_stats(0).unwrap();
        assert!((r.mean[0] - 0.1 * mean[0]).abs() < 1e-15);
    }

    #[test]
    fn bad_labels_and_shapes_rejected() {
        let model = MlpModel::linear(DenseTensor::identity(2), vec![0.0; 2]).unwrap();
        let x = DenseTensor::identity(2);
        assert!(matches!(forward(&model, &x, &[0, 2]), Err(Error::Validation(_))));
        assert!(matches!(forward(&model, &x, &[0]), Err(Error::Dimension(_))));
        assert!(matches!(forward(&model, &DenseTensor::zeros(&[3, 2]), &[0, 1]), Err(Error::Dimension(_))));
    }

    #[test]
    fn bn_batch_of_one_rejected_in_train_mode() {
        let cfg = MlpConfig { input_dim: 3, hidden: vec![4], classes: 2, ..Default::default() };
        let model = MlpModel::from_config(&cfg).unwrap();
        let x = DenseTensor::zeros(&[3, 1]);
        assert!(matches!(forward(&model, &x, &[0]), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn spectral_layer_has_unit_norm() {
        let mut rng = SeededRng::new(53);
        let layer = Layer {
            weight: rng.normal_tensor(&[5, 3], 1.0),
            bias: Some(vec![0.0; 5]),
            norm: NormalizerSpec::plain(Method::SpectralNorm, 0.0),
            activation: Activation::Identity,
        };
        let (w_eff, _) = effective_weight(&layer, 0).unwrap();
        let s = sym_eigen(&matmul(&w_eff.transpose(), &w_eff).unwrap()).unwrap().eigenvalues[0].sqrt();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weight_standardized_rows_have_radius_sqrt_n() {
        let cfg = MlpConfig { input_dim: 6, hidden: vec![4], classes: 2, method: Method::WeightStandardization, ..Default::default() };
        let model = MlpModel::from_config(&cfg).unwrap();
        let (w_eff, _) = effective_weight(&model.layers[0], 0).unwrap();
        for i in 0..4 {
            assert!((norm2(w_eff.row(i)) - 6f64.sqrt()).abs() < 1e-12);
            assert!(w_eff.row(i).iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
