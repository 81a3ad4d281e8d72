use crate::error::{Error, Result};
use crate::geometry::standardize_with_scale;
use crate::tensor::DenseTensor;

/// Output of the axis-parameterized standardization with what the backward
/// pass needs.
#[derive(Debug, Clone)]
pub struct Standardized {
    pub output: DenseTensor,
    /// Per-slice inverse scale `1 / sqrt(var + eps)` (at eps = 0,
    /// `sqrt(len) / ||centered||`), indexed by the kept-axis flat index.
    pub inv_scale: Vec<f64>,
    /// Per-slice mean.
    pub mean: Vec<f64>,
    /// Per-slice population variance.
    pub var: Vec<f64>,
}

/// Flat indices of each slice, slices ordered by the row-major flat index
/// over the kept axes.
fn slices(shape: &[usize], reduce_axes: &[usize]) -> Result<Vec<Vec<usize>>> {
    let nd = shape.len();
    if reduce_axes.is_empty() {
        return Err(Error::Config("no axes to reduce".into()));
    }
    let mut reduce = vec![false; nd];
    for &a in reduce_axes {
        if a >= nd {
            return Err(Error::Dimension(format!("axis {a} out of range for shape {shape:?}")));
        }
        if reduce[a] {
            return Err(Error::Config(format!("axis {a} listed twice")));
        }
        reduce[a] = true;
    }
    let slice_len: usize = (0..nd).filter(|&a| reduce[a]).map(|a| shape[a]).product();
    if slice_len < 2 {
        return Err(Error::Dimension(format!(
            "reduced extent is {slice_len}; standardization needs at least 2 elements per slice"
        )));
    }
    let kept_count: usize = (0..nd).filter(|&a| !reduce[a]).map(|a| shape[a]).product();
    let total: usize = shape.iter().product();
    let mut out = vec![Vec::with_capacity(slice_len); kept_count];
    let mut idx = vec![0usize; nd];
    for flat in 0..total {
        let mut key = 0;
        for a in 0..nd {
            if !reduce[a] {
                key = key * shape[a] + idx[a];
            }
        }
        out[key].push(flat);
        for a in (0..nd).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Ok(out)
}

pub(crate) fn standardize_along_cached(t: &DenseTensor, reduce_axes: &[usize], eps: f64) -> Result<Standardized> {
    if eps < 0.0 {
        return Err(Error::Config(format!("eps must be >= 0, got {eps}")));
    }
    let groups = slices(t.shape(), reduce_axes)?;
    let data = t.data();
    let mut out = vec![0.0; data.len()];
    let mut inv_scale = Vec::with_capacity(groups.len());
    let mut mean = Vec::with_capacity(groups.len());
    let mut var = Vec::with_capacity(groups.len());
    let mut buf = Vec::new();
    for (k, members) in groups.iter().enumerate() {
        buf.clear();
        buf.extend(members.iter().map(|&i| data[i]));
        let (z, s) = standardize_with_scale(&buf, eps).map_err(|_| Error::Degenerate {
            context: format!("slice {k} has zero variance at eps = 0"),
        })?;
        for (&i, v) in members.iter().zip(z) {
            out[i] = v;
        }
        let mu = buf.iter().sum::<f64>() / buf.len() as f64;
        mean.push(mu);
        var.push(buf.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / buf.len() as f64);
        inv_scale.push(s);
    }
    Ok(Standardized { output: DenseTensor::from_parts(t.shape().to_vec(), out), inv_scale, mean, var })
}

/// Standardizes every slice spanned by `reduce_axes` independently: each slice
/// ends up with mean 0 and (at eps = 0) variance 1, i.e. on the sphere of
/// radius `sqrt(slice_len)`.
pub fn standardize_along(t: &DenseTensor, reduce_axes: &[usize], eps: f64) -> Result<DenseTensor> {
    standardize_along_cached(t, reduce_axes, eps).map(|s| s.output)
}

/// Gradient of a loss with respect to the input of [`standardize_along`],
/// given the standardized output `xhat`, the per-slice inverse scales and the
/// gradient with respect to `xhat`:
///
/// `dx = k * (g - mean(g) - xhat * mean(g * xhat))` per slice.
pub fn standardize_along_backward(
    xhat: &DenseTensor,
    inv_scale: &[f64],
    grad_out: &DenseTensor,
    reduce_axes: &[usize],
) -> Result<DenseTensor> {
    if xhat.shape() != grad_out.shape() {
        return Err(Error::Dimension("gradient shape does not match standardized output".into()));
    }
    let groups = slices(xhat.shape(), reduce_axes)?;
    if groups.len() != inv_scale.len() {
        return Err(Error::Dimension("one inverse scale per slice expected".into()));
    }
    let (z, g) = (xhat.data(), grad_out.data());
    let mut dx = vec![0.0; z.len()];
    for (members, &k) in groups.iter().zip(inv_scale) {
        let n = members.len() as f64;
        let g_mean = members.iter().map(|&i| g[i]).sum::<f64>() / n;
        let gz_mean = members.iter().map(|&i| g[i] * z[i]).sum::<f64>() / n;
        for &i in members {
            dx[i] = k * (g[i] - g_mean - z[i] * gz_mean);
        }
    }
    Ok(DenseTensor::from_parts(xhat.shape().to_vec(), dx))
}
