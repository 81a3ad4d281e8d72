//! Normalization layers as standardization onto spheres.
//!
//! One axis-parameterized standardization operator ([`normalizers::standardize_along`])
//! yields batch, layer, instance and group normalization; weight, centered-weight,
//! standardized-weight and spectral normalization transform weight rows directly.
//! Around it sit the vector geometry ([`geometry`]), a small MLP with exact
//! reverse-mode gradients ([`gradients`]), an SGD harness tracking weight-norm
//! dynamics ([`trainer`]) and noise/BIM robustness evaluation ([`robustness`]).

pub mod error;
pub mod geometry;
pub mod gradients;
pub mod normalizers;
pub mod robustness;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::DenseTensor;
