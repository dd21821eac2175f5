pub mod diffusion;
pub mod embed;
pub mod error;
pub mod evalmetrics;
pub mod experiments;
pub mod flowmatch;
pub mod numcore;
pub mod odesolve;
pub mod rng;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};

pub type Matrix64 = numcore::Matrix<f64>;
pub type Matrix32 = numcore::Matrix<f32>;
pub type Trajectory64 = odesolve::Trajectory<f64>;
pub type ScoreModel64 = diffusion::ScoreModel<f64>;
pub type ScoreModel32 = diffusion::ScoreModel<f32>;
pub type VelocityField64 = flowmatch::VelocityField<f64>;
pub type VelocityField32 = flowmatch::VelocityField<f32>;
pub type CouplingEncoder64 = flowmatch::CouplingEncoder<f64>;
pub type CouplingEncoder32 = flowmatch::CouplingEncoder<f32>;
