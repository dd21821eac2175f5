use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{objective_on_tape, CouplingBatch, CouplingEncoder, Direction, ForwInput, VelocityField};
use crate::diffusion::{generate_coupling_iii, generate_coupling_revs, NoiseSchedule, ScoreModel};
use crate::error::{Error, Result};
use crate::numcore::{Activation, AdamConfig, AdamState, Matrix, Scalar, Tape};
use crate::rng::Rng;
use crate::synthdata::{sample_data, sample_prior, DatasetSpec};
use crate::training::{Ema, TrainError};

/// Coupling strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Independent `(x0, x1)` pairs.
    #[serde(rename = "baseline")]
    Baseline,
    /// Diffusion-guided couplings only.
    I,
    /// Diffusion-guided plus encoder couplings with a KL penalty.
    II,
    /// Diffusion-guided plus closed-form forward-process couplings.
    III,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::I => "I",
            Variant::II => "II",
            Variant::III => "III",
        }
    }

    pub fn needs_guide(self) -> bool {
        !matches!(self, Variant::Baseline)
    }

    pub fn default_lambda(self) -> f64 {
        match self {
            Variant::II => 10.0,
            _ => 0.0,
        }
    }

    pub fn default_mix(self) -> f64 {
        match self {
            Variant::II | Variant::III => 0.5,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "I" | "i" => Ok(Variant::I),
            "II" | "ii" => Ok(Variant::II),
            "III" | "iii" => Ok(Variant::III),
            _ => Err(Error::invalid(format!(
                "unknown variant '{s}' (expected baseline | I | II | III)"
            ))),
        }
    }
}

/// How diffusion-guided couplings are produced during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CouplingMode {
    /// Pre-generate `size` pairs once and sample them with replacement.
    Cached { size: usize },
    /// Integrate the guide for every batch.
    OnTheFly,
}

/// Flow-matching hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// KL weight; defaults to the variant's conventional value.
    pub lambda: Option<f64>,
    pub lr: f64,
    pub batch: usize,
    pub iterations: usize,
    /// Fraction of each batch built from forward-direction couplings.
    pub mix_ratio: Option<f64>,
    pub ema_decay: Option<f64>,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub coupling: CouplingMode,
    /// Heun steps used to integrate the guide's probability-flow ODE.
    pub guide_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::II,
            lambda: None,
            lr: 1e-3,
            batch: 256,
            iterations: 20_000,
            mix_ratio: None,
            ema_decay: Some(0.999),
            seed: 0,
            hidden: vec![64, 64, 64],
            encoder_hidden: vec![32, 32],
            activation: Activation::Silu,
            coupling: CouplingMode::Cached { size: 65_536 },
            guide_steps: 50,
        }
    }
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or_else(|| self.variant.default_lambda())
    }

    pub fn mix(&self) -> f64 {
        self.mix_ratio.unwrap_or_else(|| self.variant.default_mix())
    }

    /// `(revs rows, forw rows)` per batch.
    pub fn split(&self) -> (usize, usize) {
        match self.variant {
            Variant::Baseline => (0, self.batch),
            Variant::I => (self.batch, 0),
            Variant::II | Variant::III => {
                let revs = ((1.0 - self.mix()) * self.batch as f64).ceil() as usize;
                let revs = revs.min(self.batch);
                (revs, self.batch - revs)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 {
            return Err(Error::invalid("iterations and batch must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        let lambda = self.lambda();
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        let mix = self.mix();
        if !(0.0..=1.0).contains(&mix) {
            return Err(Error::invalid(format!("mix_ratio must lie in [0, 1], got {mix}")));
        }
        if matches!(self.variant, Variant::I | Variant::Baseline) && mix != 0.0 {
            return Err(Error::invalid(format!(
                "variant {} uses no forward couplings; mix_ratio must be 0",
                self.variant
            )));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::invalid("ema_decay must lie in [0, 1)"));
            }
        }
        if self.guide_steps == 0 {
            return Err(Error::invalid("guide_steps must be >= 1"));
        }
        if let CouplingMode::Cached { size: 0 } = self.coupling {
            return Err(Error::invalid("coupling cache size must be >= 1"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub total: f64,
    pub revs: f64,
    pub forw: f64,
    pub kl: f64,
}

/// Output of [`train_straightfm`].
#[derive(Clone, Debug)]
pub struct TrainedFlow<T> {
    pub velocity: VelocityField<T>,
    pub encoder: CouplingEncoder<T>,
    /// Number of optimizer steps applied to each network.
    pub velocity_steps: u64,
    pub encoder_steps: u64,
    pub log: Vec<LossRecord>,
}

/// Pre-generated diffusion-guided pairs.
#[derive(Clone, Debug)]
pub struct CouplingCache<T> {
    pub noise: Matrix<T>,
    pub data: Matrix<T>,
}

impl<T: Scalar> CouplingCache<T> {
    /// Integrates the guide from `size` fresh noise rows, in chunks whose
    /// outputs are concatenated in index order.
    pub fn generate(
        guide: &ScoreModel<T>,
        schedule: &NoiseSchedule,
        size: usize,
        steps: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        const CHUNK: usize = 4096;
        let noise: Matrix<T> = sample_prior(rng, size, guide.dim())?;
        let mut data = Matrix::zeros(0, guide.dim());
        let mut start = 0;
        while start < size {
            let end = (start + CHUNK).min(size);
            let part = generate_coupling_revs(guide, schedule, &noise.slice_rows(start, end), steps)?;
            data = data.vcat(&part)?;
            start = end;
        }
        Ok(Self { noise, data })
    }

    pub fn len(&self) -> usize {
        self.noise.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `n` pairs drawn with replacement.
    pub fn sample(&self, rng: &mut Rng, n: usize) -> Result<CouplingBatch<T>> {
        let idx: Vec<usize> = (0..n).map(|_| rng.below(self.len())).collect();
        CouplingBatch::new(
            self.noise.select_rows(&idx),
            self.data.select_rows(&idx),
            Direction::Revs,
        )
    }
}

/// Trains the velocity field (and, for variant II, the coupling encoder).
///
/// Each iteration draws noise, data and per-row times, builds the
/// diffusion-guided couplings from `guide`, builds the forward couplings for
/// the variant, evaluates the combined objective and takes one Adam step on
/// every network that received gradient.
pub fn train_straightfm<T: Scalar>(
    guide: Option<&ScoreModel<T>>,
    schedule: &NoiseSchedule,
    spec: &DatasetSpec,
    config: &TrainConfig,
) -> Result<TrainedFlow<T>, TrainError<TrainedFlow<T>>> {
    train_with_cache(guide, None, schedule, spec, config)
}

/// As [`train_straightfm`], optionally reusing an existing coupling cache.
pub fn train_with_cache<T: Scalar>(
    guide: Option<&ScoreModel<T>>,
    cache: Option<&CouplingCache<T>>,
    schedule: &NoiseSchedule,
    spec: &DatasetSpec,
    config: &TrainConfig,
) -> Result<TrainedFlow<T>, TrainError<TrainedFlow<T>>> {
    config.validate()?;
    schedule.validate()?;
    spec.validate()?;
    let variant = config.variant;
    if variant.needs_guide() && guide.is_none() {
        return Err(Error::invalid(format!("variant {variant} requires a trained guide")).into());
    }
    let dim = 2;
    let mut root = Rng::new(config.seed);
    let mut init_rng = root.fork(1);
    let mut data_rng = root.fork(2);
    let mut noise_rng = root.fork(3);
    let mut time_rng = root.fork(4);
    let mut cache_rng = root.fork(5);

    let mut velocity = VelocityField::new(dim, &config.hidden, config.activation, &mut init_rng)?;
    let mut encoder = CouplingEncoder::new(dim, &config.encoder_hidden, config.activation, &mut init_rng)?;
    let mut u_adam = AdamState::new(&velocity.net, AdamConfig::with_lr(config.lr));
    let mut q_adam = AdamState::new(&encoder.net, AdamConfig::with_lr(config.lr));
    let mut u_ema = config.ema_decay.map(|d| Ema::new(&velocity.net, d));
    let mut q_ema = config.ema_decay.map(|d| Ema::new(&encoder.net, d));

    let (n_revs, n_forw) = config.split();
    let owned_cache;
    let cache = match (guide, config.coupling, n_revs) {
        (Some(g), CouplingMode::Cached { size }, r) if r > 0 => match cache {
            Some(c) => Some(c),
            None => {
                owned_cache = CouplingCache::generate(g, schedule, size, config.guide_steps, &mut cache_rng)?;
                Some(&owned_cache)
            }
        },
        _ => None,
    };
    let lambda = config.lambda();
    let mut log = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let (baseline_batch, revs_batch) = match variant {
            Variant::Baseline => {
                let x0 = sample_prior::<T>(&mut noise_rng, n_forw, dim)?;
                let x1 = sample_data::<T>(&mut data_rng, spec, n_forw)?;
                (Some(CouplingBatch::new(x0, x1, Direction::Forw)?), None)
            }
            _ if n_revs > 0 => {
                let batch = match cache {
                    Some(c) => c.sample(&mut noise_rng, n_revs)?,
                    None => {
                        let g = guide.expect("guide checked above");
                        let x0 = sample_prior::<T>(&mut noise_rng, n_revs, dim)?;
                        let x1 = generate_coupling_revs(g, schedule, &x0, config.guide_steps)?;
                        CouplingBatch::new(x0, x1, Direction::Revs)?
                    }
                };
                (None, Some(batch))
            }
            _ => (None, None),
        };
        let t_revs: Vec<T> = time_rng.uniform_vec(n_revs);
        let t_forw: Vec<T> = time_rng.uniform_vec(n_forw);

        let x1_forw = if n_forw > 0 && variant != Variant::Baseline {
            Some(sample_data::<T>(&mut data_rng, spec, n_forw)?)
        } else {
            None
        };
        let eps = x1_forw.as_ref().map(|x| noise_rng.normal_matrix::<T>(x.rows(), dim));
        let fixed_forw = match (variant, &x1_forw) {
            (Variant::III, Some(x1)) => {
                let x0 = generate_coupling_iii(schedule, x1, &mut noise_rng)?;
                Some(CouplingBatch::new(x0, x1.clone(), Direction::Forw)?)
            }
            _ => None,
        };

        let mut tape = Tape::new();
        let uvars = velocity.net.register(&mut tape);
        let qvars = if variant == Variant::II {
            encoder.net.register(&mut tape)
        } else {
            encoder.net.register_frozen(&mut tape)
        };
        let forw: Option<(ForwInput<'_, T>, &[T])> = match variant {
            Variant::Baseline => baseline_batch.as_ref().map(|b| (ForwInput::Fixed(b), &t_forw[..])),
            Variant::II => x1_forw.as_ref().map(|x1| {
                (
                    ForwInput::Learned {
                        encoder: &encoder,
                        vars: &qvars,
                        x1,
                        eps: eps.as_ref().expect("noise drawn with x1"),
                    },
                    &t_forw[..],
                )
            }),
            Variant::III => fixed_forw.as_ref().map(|b| (ForwInput::Fixed(b), &t_forw[..])),
            Variant::I => None,
        };
        let revs = revs_batch.as_ref().map(|b| (b, &t_revs[..]));
        let obj = objective_on_tape(&mut tape, &velocity, &uvars, revs, forw, lambda)?;
        let parts = obj.components(&tape);
        let record = LossRecord {
            iter: it,
            total: parts.total.to_f64_lossy(),
            revs: parts.revs.to_f64_lossy(),
            forw: parts.forw.to_f64_lossy(),
            kl: parts.kl.to_f64_lossy(),
        };
        if !record.total.is_finite() {
            return Err(TrainError::Diverged {
                iteration: it,
                reason: format!("loss is {}", record.total),
                last_good: Box::new(TrainedFlow {
                    velocity: velocity.clone(),
                    encoder: encoder.clone(),
                    velocity_steps: u_adam.step_count(),
                    encoder_steps: q_adam.step_count(),
                    log: log.clone(),
                }),
            });
        }

        let grads = tape.backward(obj.total)?;
        let ug = velocity.net.collect_grads(&grads, &uvars);
        let qg = (variant == Variant::II).then(|| encoder.net.collect_grads(&grads, &qvars));
        let finite = ug.iter().chain(qg.iter().flatten()).all(Matrix::is_finite);
        if !finite {
            return Err(TrainError::Diverged {
                iteration: it,
                reason: "non-finite gradient".into(),
                last_good: Box::new(TrainedFlow {
                    velocity: velocity.clone(),
                    encoder: encoder.clone(),
                    velocity_steps: u_adam.step_count(),
                    encoder_steps: q_adam.step_count(),
                    log: log.clone(),
                }),
            });
        }
        u_adam.step(&mut velocity.net, &ug)?;
        if let Some(ema) = u_ema.as_mut() {
            ema.update(&velocity.net);
        }
        if let Some(qg) = qg {
            q_adam.step(&mut encoder.net, &qg)?;
            if let Some(ema) = q_ema.as_mut() {
                ema.update(&encoder.net);
            }
        }
        log.push(record);
    }

    let velocity_steps = u_adam.step_count();
    let encoder_steps = q_adam.step_count();
    if let Some(ema) = u_ema {
        velocity.net = ema.into_params();
    }
    if let (Some(ema), true) = (q_ema, encoder_steps > 0) {
        encoder.net = ema.into_params();
    }
    Ok(TrainedFlow {
        velocity,
        encoder,
        velocity_steps,
        encoder_steps,
        log,
    })
}
