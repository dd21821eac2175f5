//! Pieces shared by the diffusion and flow-matching trainers.

use std::fmt;

use crate::error::Error;
use crate::numcore::{MlpParams, Scalar};

/// Failure of a training run.
#[derive(Debug)]
pub enum TrainError<M> {
    /// Bad configuration or inputs; nothing was trained.
    Invalid(Error),
    /// Loss or gradients became non-finite; `last_good` holds the parameters
    /// from before the failing iteration.
    Diverged {
        iteration: usize,
        reason: String,
        last_good: Box<M>,
    },
}

impl<M> TrainError<M> {
    pub fn iteration(&self) -> Option<usize> {
        match self {
            TrainError::Diverged { iteration, .. } => Some(*iteration),
            TrainError::Invalid(_) => None,
        }
    }
}

impl<M> fmt::Display for TrainError<M> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Invalid(e) => write!(f, "{e}"),
            TrainError::Diverged {
                iteration, reason, ..
            } => write!(f, "training diverged at iteration {iteration}: {reason}"),
        }
    }
}

impl<M: fmt::Debug> std::error::Error for TrainError<M> {}

impl<M> From<Error> for TrainError<M> {
    fn from(e: Error) -> Self {
        TrainError::Invalid(e)
    }
}

/// Exponential moving average of network parameters.
#[derive(Clone, Debug)]
pub struct Ema<T> {
    decay: f64,
    shadow: MlpParams<T>,
}

impl<T: Scalar> Ema<T> {
    pub fn new(params: &MlpParams<T>, decay: f64) -> Self {
        Self {
            decay,
            shadow: params.clone(),
        }
    }

    pub fn update(&mut self, params: &MlpParams<T>) {
        let d = T::lit(self.decay);
        let one_minus = T::one() - d;
        self.shadow.zip_update(params, |s, p| d * s + one_minus * p);
    }

    pub fn params(&self) -> &MlpParams<T> {
        &self.shadow
    }

    pub fn into_params(self) -> MlpParams<T> {
        self.shadow
    }
}
