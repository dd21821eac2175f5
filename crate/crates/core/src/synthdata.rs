//! 2D target distributions and the Gaussian prior.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Scalar};
pub use crate::rng::Rng;

/// Named toy distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    EightGaussians,
    Checkerboard,
    Spiral,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::TwoMoons,
        DatasetKind::EightGaussians,
        DatasetKind::Checkerboard,
        DatasetKind::Spiral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::EightGaussians => "eight_gaussians",
            DatasetKind::Checkerboard => "checkerboard",
            DatasetKind::Spiral => "spiral",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown dataset '{s}' (expected two_moons | eight_gaussians | checkerboard | spiral)"
                ))
            })
    }
}

/// A target distribution: kind, spatial scale and additive noise level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub scale: f64,
    pub noise_std: f64,
}

impl DatasetSpec {
    /// Conventional defaults: scale 2 and a per-kind noise level.
    pub fn new(kind: DatasetKind) -> Self {
        Self::scaled(kind, 2.0)
    }

    /// Default noise level for `kind`, proportional to `scale`.
    pub fn scaled(kind: DatasetKind, scale: f64) -> Self {
        let noise_std = match kind {
            DatasetKind::EightGaussians => 0.02 * scale,
            DatasetKind::TwoMoons => 0.05 * scale,
            DatasetKind::Checkerboard => 0.0,
            DatasetKind::Spiral => 0.02 * scale,
        };
        Self {
            kind,
            scale,
            noise_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("scale must be positive, got {}", self.scale)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!(
                "noise_std must be nonnegative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    /// Half-width of a box guaranteed to contain every sample with
    /// overwhelming probability.
    pub fn bound(&self) -> f64 {
        4.0 * self.scale + 6.0 * self.noise_std
    }

    /// Centers of the eight Gaussian components.
    pub fn eight_centers(&self) -> [[f64; 2]; 8] {
        std::array::from_fn(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
            [self.scale * a.cos(), self.scale * a.sin()]
        })
    }

    /// Whether the checkerboard cell containing `p` is an allowed one
    /// (cells of side `scale / 2` over `[-scale, scale]²`).
    pub fn checker_allowed(&self, p: [f64; 2]) -> bool {
        let cell = self.scale / 2.0;
        let i = ((p[0] + self.scale) / cell).floor() as i64;
        let j = ((p[1] + self.scale) / cell).floor() as i64;
        (0..4).contains(&i) && (0..4).contains(&j) && (i + j) % 2 == 0
    }
}

/// `n x d` standard normal samples.
pub fn sample_prior<T: Scalar>(rng: &mut Rng, n: usize, d: usize) -> Result<Matrix<T>> {
    if n == 0 || d == 0 {
        return Err(Error::invalid(format!("prior batch needs n, d >= 1 (got n={n}, d={d})")));
    }
    Ok(rng.normal_matrix(n, d))
}

/// `n x 2` samples from the target distribution.
pub fn sample_data<T: Scalar>(rng: &mut Rng, spec: &DatasetSpec, n: usize) -> Result<Matrix<T>> {
    if n == 0 {
        return Err(Error::invalid("data batch needs n >= 1"));
    }
    spec.validate()?;
    let s = spec.scale;
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let p = match spec.kind {
            DatasetKind::EightGaussians => spec.eight_centers()[rng.below(8)],
            DatasetKind::TwoMoons => {
                let theta = std::f64::consts::PI * rng.uniform();
                let (x, y) = if rng.uniform() < 0.5 {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                [s * (x - 0.5), s * (y - 0.25)]
            }
            DatasetKind::Checkerboard => {
                // 8 allowed cells of the 4x4 board; pick one, then uniform inside
                let k = rng.below(8);
                let i = k / 2;
                let j = 2 * (k % 2) + (i % 2);
                let cell = s / 2.0;
                [
                    -s + cell * (j as f64 + rng.uniform()),
                    -s + cell * (i as f64 + rng.uniform()),
                ]
            }
            DatasetKind::Spiral => {
                let theta = 3.0 * std::f64::consts::PI * rng.uniform();
                let r = theta / (3.0 * std::f64::consts::PI);
                let arm = if rng.uniform() < 0.5 { 0.0 } else { std::f64::consts::PI };
                [s * r * (theta + arm).cos(), s * r * (theta + arm).sin()]
            }
        };
        let (nx, ny) = if spec.noise_std > 0.0 {
            (spec.noise_std * rng.normal(), spec.noise_std * rng.normal())
        } else {
            (0.0, 0.0)
        };
        data.push(T::lit(p[0] + nx));
        data.push(T::lit(p[1] + ny));
    }
    Matrix::from_vec(n, 2, data)
}
