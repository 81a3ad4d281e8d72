use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalizers::{Method, Mode, NormalizerSpec};
use crate::tensor::{DenseTensor, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative in terms of the input `x` and output `y`. ReLU uses 0 at 0.
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            _ => Err(Error::Config(format!("unknown activation {s:?}"))),
        }
    }
}

/// Loss attached to the final layer's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    SoftmaxCrossEntropy,
    /// `0.5 * mean_k ||logits_k - onehot_k||^2`, no softmax.
    SquaredError,
}

/// One dense layer: `act(norm(W_eff X + b))`.
///
/// `weight` is the raw trainable matrix. For WN/CWN/WS it is the direction
/// parameter `V` and the effective weight is a per-row transform of it scaled
/// by the affine gain; for SN it is divided by its spectral norm. Data-based
/// normalizers carry no bias (the affine `beta` plays that role); weight-based
/// ones use the affine `beta` as bias; `None` and SN use `bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: DenseTensor,
    pub bias: Option<Vec<f64>>,
    pub norm: NormalizerSpec,
    pub activation: Activation,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    fn validate(&self) -> Result<()> {
        let m = self.out_dim();
        self.norm.validate(m)?;
        if let Some(b) = &self.bias {
            if b.len() != m {
                return Err(Error::Dimension(format!("bias has {} entries, layer has {m} units", b.len())));
            }
        }
        if self.weight.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("layer weight".into()));
        }
        if self.bias.is_some() && !matches!(self.norm.method, Method::None | Method::SpectralNorm) {
            return Err(Error::Config(format!(
                "{} layers take their shift from the affine beta, not a separate bias",
                self.norm.method
            )));
        }
        if self.norm.method == Method::InstanceNorm {
            return Err(Error::Config(
                "instance normalization is undefined on dense-layer activations (one element per slice)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    pub head: Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub method: Method,
    pub eps: f64,
    pub activation: Activation,
    /// Weights start as N(0, (init_scale^2) / fan_in).
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden: vec![32, 32],
            classes: 4,
            method: Method::BatchNorm,
            eps: crate::normalizers::DEFAULT_EPS,
            activation: Activation::Relu,
            init_scale: 1.0,
            seed: 0,
        }
    }
}

/// Identifies one trainable tensor of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl MlpModel {
    pub fn new(layers: Vec<Layer>, head: Head) -> Result<Self> {
        let model = Self { layers, head };
        model.validate()?;
        Ok(model)
    }

    /// Hidden layers carry the configured normalizer; the output layer is a
    /// plain affine map feeding softmax cross-entropy.
    pub fn from_config(cfg: &MlpConfig) -> Result<Self> {
        if cfg.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut rng = SeededRng::new(cfg.seed);
        let mut layers = Vec::new();
        let mut fan_in = cfg.input_dim;
        for &width in &cfg.hidden {
            let weight = rng.normal_tensor(&[width, fan_in], cfg.init_scale / (fan_in as f64).sqrt());
            let norm = NormalizerSpec::new(cfg.method, width, cfg.eps);
            let bias = matches!(cfg.method, Method::None | Method::SpectralNorm).then(|| vec![0.0; width]);
            layers.push(Layer { weight, bias, norm, activation: cfg.activation });
            fan_in = width;
        }
        let weight = rng.normal_tensor(&[cfg.classes, fan_in], 1.0 / (fan_in as f64).sqrt());
        layers.push(Layer {
            weight,
            bias: Some(vec![0.0; cfg.classes]),
            norm: NormalizerSpec::plain(Method::None, 0.0),
            activation: Activation::Identity,
        });
        Self::new(layers, Head::SoftmaxCrossEntropy)
    }

    /// Single affine layer `W x + b` with a softmax head.
    pub fn linear(weight: DenseTensor, bias: Vec<f64>) -> Result<Self> {
        let layer = Layer {
            weight,
            bias: Some(bias),
            norm: NormalizerSpec::plain(Method::None, 0.0),
            activation: Activation::Identity,
        };
        Self::new(vec![layer], Head::SoftmaxCrossEntropy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension(format!(
                    "layer {i} outputs {} features but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        self.layers.iter().try_for_each(Layer::validate)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_dim)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for layer in &mut self.layers {
            layer.norm.mode = mode;
        }
    }

    pub fn has_train_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.norm.method == Method::BatchNorm && l.norm.mode == Mode::Train)
    }

    pub fn param(&self, layer: usize, kind: ParamKind) -> Option<&[f64]> {
        let l = self.layers.get(layer)?;
        match kind {
            ParamKind::Weight => Some(l.weight.data()),
            ParamKind::Bias => l.bias.as_deref(),
            ParamKind::Gamma => l.norm.affine.as_ref().map(|a| a.gamma.as_slice()),
            ParamKind::Beta => l.norm.affine.as_ref().map(|a| a.beta.as_slice()),
        }
    }

    pub fn param_mut(&mut self, layer: usize, kind: ParamKind) -> Option<&mut [f64]> {
        let l = self.layers.get_mut(layer)?;
        match kind {
            ParamKind::Weight => Some(l.weight.data_mut()),
            ParamKind::Bias => l.bias.as_deref_mut(),
            ParamKind::Gamma => l.norm.affine.as_mut().map(|a| a.gamma.as_mut_slice()),
            ParamKind::Beta => l.norm.affine.as_mut().map(|a| a.beta.as_mut_slice()),
        }
    }

    /// Every trainable tensor as `(layer, kind)`, in a fixed order.
    pub fn param_ids(&self) -> Vec<(usize, ParamKind)> {
        let kinds = [ParamKind::Weight, ParamKind::Bias, ParamKind::Gamma, ParamKind::Beta];
        (0..self.layers.len())
            .flat_map(|l| kinds.iter().map(move |&k| (l, k)))
            .filter(|&(l, k)| self.param(l, k).is_some())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_ids().iter().map(|&(l, k)| self.param(l, k).map_or(0, <[f64]>::len)).sum()
    }
}
