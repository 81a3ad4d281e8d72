use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, SeededRng};

/// Samples stored as columns of an `n x N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DenseTensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Unit-variance isotropic Gaussians; the class centers are
    /// `separation / sqrt(2) * e_k`, so any two are `separation` apart.
    GaussianBlobs { classes: usize, dim: usize, samples: usize, separation: f64 },
    /// Two interleaved spirals in the plane, padded with `extra_dims` noise
    /// features.
    TwoSpirals { samples: usize, noise: f64, turns: f64, extra_dims: usize },
    /// Headerless numeric CSV, one sample per line, integer label last.
    Csv { path: PathBuf },
    /// IDX image and label files.
    Idx { images: PathBuf, labels: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::GaussianBlobs { classes: 4, dim: 16, samples: 2048, separation: 3.0 }
    }
}

impl Dataset {
    pub fn new(x: DenseTensor, labels: Vec<usize>) -> Result<Self> {
        let (_, n) = x.expect_2d("dataset")?;
        if labels.len() != n {
            return Err(Error::Dimension(format!("{} labels for {n} samples", labels.len())));
        }
        if n == 0 {
            return Err(Error::Validation("empty dataset".into()));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
        Ok(Self { x, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.rows()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self { x: self.x.select_cols(idx), labels: idx.iter().map(|&i| self.labels[i]).collect(), classes: self.classes }
    }

    /// Seeded shuffle, then the first `test_fraction` of samples form the test
    /// set.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test fraction must be in [0, 1), got {test_fraction}")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        SeededRng::new(seed).shuffle(&mut idx);
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        if n_test >= self.len() {
            return Err(Error::Config("test split leaves no training samples".into()));
        }
        Ok((self.subset(&idx[n_test..]), self.subset(&idx[..n_test])))
    }

    /// Shifts and scales every feature to zero mean and unit variance.
    /// Constant features are only centered.
    pub fn standardize_features(&mut self) {
        let n = self.len() as f64;
        for i in 0..self.x.rows() {
            let row = self.x.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
            row.iter_mut().for_each(|v| *v = (*v - mean) * scale);
        }
    }

    /// Writes one sample per line, label last, no header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
        for k in 0..self.len() {
            let mut rec: Vec<String> = self.x.col(k).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.labels[k].to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    let location = e.position().map_or_else(|| "csv".to_string(), |p| format!("line {}", p.line()));
    Error::Parse { location, message: e.to_string() }
}

pub fn make_dataset(spec: &DatasetSpec, seed: u64, standardize: bool) -> Result<Dataset> {
    let mut ds = match spec {
        DatasetSpec::GaussianBlobs { classes, dim, samples, separation } => {
            gaussian_blobs(*classes, *dim, *samples, *separation, seed)?
        }
        DatasetSpec::TwoSpirals { samples, noise, turns, extra_dims } => {
            two_spirals(*samples, *noise, *turns, *extra_dims, seed)?
        }
        DatasetSpec::Csv { path } => read_csv(path)?,
        DatasetSpec::Idx { images, labels } => read_idx(images, labels)?,
    };
    if standardize {
        ds.standardize_features();
    }
    Ok(ds)
}

fn gaussian_blobs(classes: usize, dim: usize, samples: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim < classes || samples < classes || !(separation >= 0.0) {
        return Err(Error::Config(format!(
            "gaussian_blobs needs 2 <= classes <= dim, samples >= classes, separation >= 0 \
             (got classes={classes}, dim={dim}, samples={samples}, separation={separation})"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let offset = separation / 2f64.sqrt();
    let mut x = DenseTensor::zeros(&[dim, samples]);
    let mut labels = Vec::with_capacity(samples);
    for k in 0..samples {
        let c = k % classes;
        for i in 0..dim {
            let center = if i == c { offset } else { 0.0 };
            x.set(i, k, center + rng.normal());
        }
        labels.push(c);
    }
    Dataset::new(x, labels)
}

fn two_spirals(samples: usize, noise: f64, turns: f64, extra_dims: usize, seed: u64) -> Result<Dataset> {
    if samples < 2 || !(noise >= 0.0) || !(turns > 0.0) {
        return Err(Error::Config("two_spirals needs samples >= 2, noise >= 0, turns > 0".into()));
    }
    let mut rng = SeededRng::new(seed);
    let dim = 2 + extra_dims;
    let mut x = DenseTensor::zeros(&[dim, samples]);
    let mut labels = Vec::with_capacity(samples);
    for k in 0..samples {
        let c = k % 2;
        let t = rng.uniform_range(0.05, 1.0);
        let angle = 2.0 * std::f64::consts::PI * turns * t + c as f64 * std::f64::consts::PI;
        x.set(0, k, t * angle.cos() + noise * rng.normal());
        x.set(1, k, t * angle.sin() + noise * rng.normal());
        for i in 2..dim {
            x.set(i, k, noise * rng.normal());
        }
        labels.push(c);
    }
    Dataset::new(x, labels)
}

pub fn read_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let loc = |col: usize| format!("{}:{line}:{}", path.display(), col + 1);
        if rec.len() < 2 {
            return Err(Error::Parse { location: loc(0), message: "need at least one feature and a label".into() });
        }
        if *width.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Parse {
                location: loc(0),
                message: format!("expected {} fields, found {}", width.unwrap_or(0), rec.len()),
            });
        }
        let mut feats = Vec::with_capacity(rec.len() - 1);
        for (j, field) in rec.iter().take(rec.len() - 1).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parse { location: loc(j), message: format!("not a number: {field:?}") })?;
            if !v.is_finite() {
                return Err(Error::Parse { location: loc(j), message: format!("non-finite value {field:?}") });
            }
            feats.push(v);
        }
        let last = rec.len() - 1;
        let label: usize = rec[last]
            .parse()
            .map_err(|_| Error::Parse { location: loc(last), message: format!("label must be a non-negative integer, got {:?}", &rec[last]) })?;
        columns.push(feats);
        labels.push(label);
    }
    if columns.is_empty() {
        return Err(Error::Parse { location: path.display().to_string(), message: "no samples".into() });
    }
    let n = columns[0].len();
    let mut x = DenseTensor::zeros(&[n, columns.len()]);
    for (k, c) in columns.iter().enumerate() {
        x.set_col(k, c);
    }
    Dataset::new(x, labels)
}

struct IdxArray {
    dims: Vec<usize>,
    values: Vec<f64>,
}

fn parse_idx(bytes: &[u8], what: &str) -> Result<IdxArray> {
    let err = |offset: usize, message: String| Error::Parse { location: format!("{what} byte {offset}"), message };
    if bytes.len() < 4 {
        return Err(err(0, "truncated magic number".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, "magic number must start with two zero bytes".into()));
    }
    let (code, ndim) = (bytes[2], bytes[3] as usize);
    let width = match code {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        other => return Err(err(2, format!("unknown data type code 0x{other:02x}"))),
    };
    let header = 4 + 4 * ndim;
    if ndim == 0 || bytes.len() < header {
        return Err(err(4, "truncated dimension list".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let expected = header + count * width;
    if bytes.len() != expected {
        return Err(err(header, format!("expected {} data bytes, found {}", count * width, bytes.len() - header)));
    }
    let data = &bytes[header..];
    let values = (0..count)
        .map(|k| {
            let b = &data[k * width..(k + 1) * width];
            match code {
                0x08 => b[0] as f64,
                0x09 => b[0] as i8 as f64,
                0x0B => i16::from_be_bytes([b[0], b[1]]) as f64,
                0x0C => i32::from_be_bytes(b.try_into().expect("4 bytes")) as f64,
                0x0D => f32::from_be_bytes(b.try_into().expect("4 bytes")) as f64,
                _ => f64::from_be_bytes(b.try_into().expect("8 bytes")),
            }
        })
        .collect();
    Ok(IdxArray { dims, values })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(buf)
}

/// Reads an IDX image file (`N x d1 x ... `) and a one-dimensional label file.
/// Each image is flattened into one column.
pub fn read_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = parse_idx(&read_file(images)?, &images.display().to_string())?;
    let lab = parse_idx(&read_file(labels)?, &labels.display().to_string())?;
    if lab.dims.len() != 1 {
        return Err(Error::Parse { location: labels.display().to_string(), message: "label file must be one-dimensional".into() });
    }
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(Error::Dimension(format!("{n} images but {} labels", lab.dims[0])));
    }
    let features = img.dims[1..].iter().product::<usize>().max(1);
    let mut x = DenseTensor::zeros(&[features, n]);
    for k in 0..n {
        x.set_col(k, &img.values[k * features..(k + 1) * features]);
    }
    let labels = lab
        .values
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Parse { location: labels.display().to_string(), message: format!("invalid label {v}") })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(x, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let spec = DatasetSpec::default();
        let a = make_dataset(&spec, 3, true).unwrap();
        assert_eq!(a, make_dataset(&spec, 3, true).unwrap());
        assert_ne!(a.x, make_dataset(&spec, 4, true).unwrap().x);
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 512);
        }
    }

    #[test]
    fn standardized_features_have_unit_variance() {
        let ds = make_dataset(&DatasetSpec::default(), 1, true).unwrap();
        for i in 0..ds.features() {
            let row = ds.x.row(i);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_partitions_samples() {
        let ds = make_dataset(&DatasetSpec::default(), 1, false).unwrap();
        let (train, test) = ds.split(0.25, 9).unwrap();
        assert_eq!(train.len() + test.len(), ds.len());
        assert_eq!(test.len(), 512);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = make_dataset(&DatasetSpec::TwoSpirals { samples: 40, noise: 0.1, turns: 1.5, extra_dims: 1 }, 2, false).unwrap();
        ds.write_csv(&path).unwrap();
        assert_eq!(read_csv(&path).unwrap(), ds);
    }

    #[test]
    fn csv_errors_carry_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "1.0,2.0,0\n3.0,abc,1\n").unwrap();
        match read_csv(&path) {
            Err(Error::Parse { location, .. }) => assert!(location.ends_with(":2:2"), "{location}"),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "1.0,2.0,0\n3.0,1\n").unwrap();
        assert!(matches!(read_csv(&path), Err(Error::Parse { .. })));
        std::fs::write(&path, "1.0,2.0,-1\n").unwrap();
        assert!(matches!(read_csv(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_csv(Path::new("/nonexistent/x.csv")), Err(Error::Io(_))));
    }

    fn idx_bytes(code: u8, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, code, dims.len() as u8];
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn idx_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        let pixels: Vec<u8> = (0..16).map(|k| (k * 10) as u8).collect();
        std::fs::write(&img, idx_bytes(0x08, &[4, 2, 2], &pixels)).unwrap();
        std::fs::write(&lab, idx_bytes(0x08, &[4], &[3, 1, 0, 2])).unwrap();
        let ds = read_idx(&img, &lab).unwrap();
        assert_eq!(ds.x.shape(), &[4, 4]);
        assert_eq!(ds.x.col(2), vec![80.0, 90.0, 100.0, 110.0]);
        assert_eq!(ds.labels, vec![3, 1, 0, 2]);
        assert_eq!(ds.classes, 4);
    }

    #[test]
    fn idx_rejects_malformed() {
        assert!(matches!(parse_idx(&[0, 0, 0x08], "t"), Err(Error::Parse { .. })));
        assert!(matches!(parse_idx(&idx_bytes(0x07, &[1], &[0]), "t"), Err(Error::Parse { .. })));
        assert!(matches!(parse_idx(&idx_bytes(0x08, &[3], &[0, 1]), "t"), Err(Error::Parse { .. })));
        let f = parse_idx(&idx_bytes(0x0D, &[1], &1.5f32.to_be_bytes()), "t").unwrap();
        assert_eq!(f.values, vec![1.5]);
    }
}
