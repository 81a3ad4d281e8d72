//! A small multilayer perceptron with hand-derived reverse-mode gradients,
//! a finite-difference oracle, and the scaling-invariance checks.
//!
//! Activations are stored with features as rows and samples as columns, so a
//! batch is an `n x B` matrix and a layer computes `Y = W X`.

mod checks;
mod finite_diff;
mod model;
mod pass;

pub use checks::{
    check_bn_preactivation_orthogonality, check_grad_orthogonality, check_scaling_invariance, row_cosines,
    OrthogonalityRow, PreactivationCheck,
};
pub use finite_diff::{
    central_difference, compare_gradients, finite_diff, finite_diff_detailed, relative_error, Coordinate, FiniteDiff,
    GradCheck, Target, GRAD_REL_FLOOR, KINK_MARGIN,
};
pub use model::{Activation, Head, Layer, MlpConfig, MlpModel, ParamKind};
pub use pass::{backward, forward, logits, loss_and_grad, update_running_stats, ForwardPass, GradientBundle, LayerGrads};
