use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{Activation, Head, Layer, MlpModel};
use crate::normalizers::{Affine, Method, Mode, NormalizerSpec, RunningStats};
use crate::tensor::DenseTensor;

pub const MODEL_BIN: &str = "model.bin";
pub const MODEL_JSON: &str = "model.json";
const FORMAT: &str = "normsphere-f64le-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerMeta {
    rows: usize,
    cols: usize,
    activation: Activation,
    method: Method,
    eps: f64,
    mode: Mode,
    bias: bool,
    affine: bool,
    running_momentum: Option<f64>,
}

/// Describes the layout of `model.bin`: for each layer in order, the weight
/// (row-major), then bias, gamma, beta, running mean and running variance
/// when present. Every value is a little-endian f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelSidecar {
    format: String,
    head: Head,
    layers: Vec<LayerMeta>,
}

fn values(model: &MlpModel) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &model.layers {
        out.extend_from_slice(l.weight.data());
        if let Some(b) = &l.bias {
            out.extend_from_slice(b);
        }
        if let Some(a) = &l.norm.affine {
            out.extend_from_slice(&a.gamma);
            out.extend_from_slice(&a.beta);
        }
        if let Some(r) = &l.norm.running {
            out.extend_from_slice(&r.mean);
            out.extend_from_slice(&r.var);
        }
    }
    out
}

pub fn save_model(model: &MlpModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let sidecar = ModelSidecar {
        format: FORMAT.into(),
        head: model.head,
        layers: model
            .layers
            .iter()
            .map(|l| LayerMeta {
                rows: l.weight.rows(),
                cols: l.weight.cols(),
                activation: l.activation,
                method: l.norm.method,
                eps: l.norm.eps,
                mode: l.norm.mode,
                bias: l.bias.is_some(),
                affine: l.norm.affine.is_some(),
                running_momentum: l.norm.running.as_ref().map(|r| r.momentum),
            })
            .collect(),
    };
    let bytes: Vec<u8> = values(model).iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(dir.join(MODEL_BIN), bytes)?;
    std::fs::write(dir.join(MODEL_JSON), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<MlpModel> {
    let read = |name: &str| std::fs::read(dir.join(name)).map_err(|e| Error::Io(format!("{}: {e}", dir.join(name).display())));
    let sidecar: ModelSidecar = serde_json::from_slice(&read(MODEL_JSON)?)?;
    if sidecar.format != FORMAT {
        return Err(Error::Parse { location: MODEL_JSON.into(), message: format!("unsupported format {:?}", sidecar.format) });
    }
    let bytes = read(MODEL_BIN)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse { location: MODEL_BIN.into(), message: format!("length {} is not a multiple of 8", bytes.len()) });
    }
    let flat: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut pos = 0;
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let end = pos + n;
        let slice = flat.get(pos..end).ok_or_else(|| Error::Parse {
            location: format!("{MODEL_BIN} value {pos}"),
            message: "file shorter than the sidecar layout".into(),
        })?;
        pos = end;
        Ok(slice.to_vec())
    };
    let mut layers = Vec::with_capacity(sidecar.layers.len());
    for meta in &sidecar.layers {
        let weight = DenseTensor::new(vec![meta.rows, meta.cols], take(meta.rows * meta.cols)?)?;
        let bias = if meta.bias { Some(take(meta.rows)?) } else { None };
        let affine = if meta.affine { Some(Affine { gamma: take(meta.rows)?, beta: take(meta.rows)? }) } else { None };
        let running = match meta.running_momentum {
            Some(momentum) => Some(RunningStats { mean: take(meta.rows)?, var: take(meta.rows)?, momentum }),
            None => None,
        };
        let norm = NormalizerSpec { method: meta.method, eps: meta.eps, affine, mode: meta.mode, running };
        layers.push(Layer { weight, bias, norm, activation: meta.activation });
    }
    if pos != flat.len() {
        return Err(Error::Parse { location: MODEL_BIN.into(), message: format!("{} trailing values", flat.len() - pos) });
    }
    MlpModel::new(layers, sidecar.head)
}
