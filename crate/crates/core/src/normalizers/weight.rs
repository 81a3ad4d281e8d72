use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centered, is_degenerate};
use crate::tensor::{norm2, power_iteration, DenseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WsVariant {
    /// Weight standardization, radius `sqrt(n)`.
    Ws,
    /// Centered weight normalization, unit radius.
    Cwn,
}

/// `g * V / ||V||`
pub fn weight_norm(v: &DenseTensor, g: f64) -> Result<DenseTensor> {
    let n = v.expect_1d("weight_norm")?;
    let norm = norm2(v.data());
    if norm == 0.0 {
        return Err(Error::Degenerate { context: "weight_norm of a zero vector".into() });
    }
    Ok(DenseTensor::from_parts(vec![n], v.data().iter().map(|x| g * (x / norm)).collect()))
}

pub(crate) fn cwn_slice(w: &[f64]) -> Option<(Vec<f64>, f64)> {
    let c = centered(w);
    let norm = norm2(&c);
    if is_degenerate(w, norm) {
        return None;
    }
    Some((c.iter().map(|x| x / norm).collect(), norm))
}

/// CWN: `(W - mean) / ||W - mean||`; WS: `sqrt(n) * CWN(W)`.
pub fn weight_standardize(w: &DenseTensor, variant: WsVariant) -> Result<DenseTensor> {
    let n = w.expect_1d("weight_standardize")?;
    if n < 2 {
        return Err(Error::Dimension("weight standardization needs n >= 2".into()));
    }
    let (cwn, _) = cwn_slice(w.data()).ok_or_else(|| Error::Degenerate {
        context: "constant weight row has no centered direction".into(),
    })?;
    let out = match variant {
        WsVariant::Cwn => cwn,
        WsVariant::Ws => {
            let r = (n as f64).sqrt();
            cwn.into_iter().map(|x| r * x).collect()
        }
    };
    Ok(DenseTensor::from_parts(vec![n], out))
}

/// `W / sigma(W)` with `sigma` estimated by power iteration.
pub fn spectral_normalize(w: &DenseTensor, iters: usize, seed: u64) -> Result<DenseTensor> {
    w.expect_2d("spectral_normalize")?;
    let est = power_iteration(w, iters, seed)?;
    if est.degenerate || est.sigma == 0.0 {
        return Err(Error::Degenerate { context: "spectral normalization of a zero matrix".into() });
    }
    Ok(w.scale(1.0 / est.sigma))
}
