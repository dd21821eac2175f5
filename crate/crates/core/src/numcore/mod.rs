//! Dense matrices, reverse-mode differentiation, small MLPs and the Adam
//! optimizer.

mod adam;
pub mod gradcheck;
mod matrix;
mod mlp;
pub mod persist;
mod scalar;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use matrix::Matrix;
pub use mlp::{Activation, Dense, MlpGrads, MlpParams, MlpVars};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
