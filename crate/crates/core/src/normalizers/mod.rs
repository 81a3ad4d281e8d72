//! Normalization methods as configurations of one standardization operator.
//!
//! Data-based methods (BN, LN, IN, GN) are [`standardize_along`] with a choice
//! of reduced axes followed by a per-unit affine map. Weight-based methods
//! (WN, CWN, WS, SN) transform the weight rows directly.

mod data;
mod kernel;
mod standardize;
mod weight;

pub use data::{batch_norm, group_norm, instance_norm, layer_norm, layer_norm_weight_path};
pub use kernel::{covariance, effective_weight, kernel_analysis, whiten, EffectiveWeight, KernelReport, RANK_THRESHOLD};
pub use standardize::{standardize_along, standardize_along_backward, Standardized};
pub use weight::{spectral_normalize, weight_norm, weight_standardize, WsVariant};

pub(crate) use data::{data_backward, data_forward, DataForward};
pub(crate) use weight::cwn_slice;

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    BatchNorm,
    LayerNorm,
    InstanceNorm,
    /// Group count.
    GroupNorm(usize),
    WeightNorm,
    CenteredWeightNorm,
    WeightStandardization,
    SpectralNorm,
    None,
}

impl Method {
    pub fn is_data_based(self) -> bool {
        matches!(self, Method::BatchNorm | Method::LayerNorm | Method::InstanceNorm | Method::GroupNorm(_))
    }

    pub fn is_weight_based(self) -> bool {
        matches!(self, Method::WeightNorm | Method::CenteredWeightNorm | Method::WeightStandardization | Method::SpectralNorm)
    }

    /// Whether the loss is invariant to positive rescaling of the weight rows
    /// feeding this normalizer (at eps = 0).
    pub fn is_scaling_invariant(self) -> bool {
        !matches!(self, Method::None | Method::SpectralNorm)
    }

    /// Row sets of an `m`-row weight matrix that the loss is jointly invariant
    /// to rescaling. BN and the per-row weight transforms are invariant row by
    /// row; LN only to a common scale of the whole layer; GN to a common scale
    /// within each group.
    pub fn invariance_groups(self, m: usize) -> Option<Vec<std::ops::Range<usize>>> {
        match self {
            Method::BatchNorm | Method::WeightNorm | Method::CenteredWeightNorm | Method::WeightStandardization => {
                Some((0..m).map(|i| i..i + 1).collect())
            }
            Method::LayerNorm => Some(vec![0..m]),
            Method::GroupNorm(g) if g > 0 && m % g == 0 => {
                let size = m / g;
                Some((0..g).map(|k| k * size..(k + 1) * size).collect())
            }
            _ => None,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Method::BatchNorm => "bn",
            Method::LayerNorm => "ln",
            Method::InstanceNorm => "in",
            Method::GroupNorm(_) => "gn",
            Method::WeightNorm => "wn",
            Method::CenteredWeightNorm => "cwn",
            Method::WeightStandardization => "ws",
            Method::SpectralNorm => "sn",
            Method::None => "none",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Parses the short names used on the command line. `gn` takes an optional
/// group count suffix (`gn:8`); the bare form uses 4 groups.
impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (name, arg) = match lower.split_once(':') {
            Some((n, a)) => (n.to_string(), Some(a.to_string())),
            None => (lower, None),
        };
        let method = match name.as_str() {
            "bn" => Method::BatchNorm,
            "ln" => Method::LayerNorm,
            "in" => Method::InstanceNorm,
            "gn" => {
                let g = match arg.as_deref() {
                    Some(a) => a.parse().map_err(|_| Error::Config(format!("bad group count in {s:?}")))?,
                    None => 4,
                };
                Method::GroupNorm(g)
            }
            "wn" => Method::WeightNorm,
            "cwn" => Method::CenteredWeightNorm,
            "ws" => Method::WeightStandardization,
            "sn" => Method::SpectralNorm,
            "none" => Method::None,
            _ => return Err(Error::Config(format!("unknown normalization method {s:?}"))),
        };
        Ok(method)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Learned per-unit scale and shift. For data-based methods these are the
/// `gamma`, `beta` applied after standardization; for weight-based methods
/// they are the row gain and the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Affine {
    pub fn identity(units: usize) -> Self {
        Self { gamma: vec![1.0; units], beta: vec![0.0; units] }
    }

    pub fn units(&self) -> usize {
        self.gamma.len()
    }
}

/// Exponential moving averages of per-unit batch mean and (population)
/// variance, used by batch normalization in eval mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(units: usize, momentum: f64) -> Self {
        Self { mean: vec![0.0; units], var: vec![1.0; units], momentum }
    }

    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerSpec {
    pub method: Method,
    pub eps: f64,
    pub affine: Option<Affine>,
    pub mode: Mode,
    pub running: Option<RunningStats>,
}

impl NormalizerSpec {
    /// Train-mode spec with identity affine parameters for `units` units and,
    /// for batch normalization, fresh running statistics.
    pub fn new(method: Method, units: usize, eps: f64) -> Self {
        let affine = (method != Method::None && method != Method::SpectralNorm).then(|| Affine::identity(units));
        let running = (method == Method::BatchNorm).then(|| RunningStats::new(units, DEFAULT_MOMENTUM));
        Self { method, eps, affine, mode: Mode::Train, running }
    }

    /// Spec without affine parameters (gamma = 1, beta = 0).
    pub fn plain(method: Method, eps: f64) -> Self {
        Self { method, eps, affine: None, mode: Mode::Train, running: None }
    }

    pub fn with_affine(mut self, gamma: Vec<f64>, beta: Vec<f64>) -> Self {
        self.affine = Some(Affine { gamma, beta });
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn gamma(&self, unit: usize) -> f64 {
        self.affine.as_ref().map_or(1.0, |a| a.gamma[unit])
    }

    pub fn beta(&self, unit: usize) -> f64 {
        self.affine.as_ref().map_or(0.0, |a| a.beta[unit])
    }

    /// Checks the group-count and affine-length invariants against `units`
    /// normalized units (channels for GN/IN).
    pub fn validate(&self, units: usize) -> Result<()> {
        if self.eps < 0.0 || !self.eps.is_finite() {
            return Err(Error::Config(format!("eps must be finite and >= 0, got {}", self.eps)));
        }
        if let Method::GroupNorm(g) = self.method {
            if g == 0 || units % g != 0 {
                return Err(Error::Config(format!("group count {g} does not divide {units} channels")));
            }
        }
        if let Some(a) = &self.affine {
            if a.gamma.len() != units || a.beta.len() != units {
                return Err(Error::Config(format!(
                    "affine parameters have {}/{} entries, expected {units}",
                    a.gamma.len(),
                    a.beta.len()
                )));
            }
        }
        if let Some(r) = &self.running {
            if r.mean.len() != units || r.var.len() != units {
                return Err(Error::Config(format!("running statistics sized for {} units, expected {units}", r.mean.len())));
            }
        }
        Ok(())
    }
}
