//! Variance-preserving diffusion: noise schedule, ε-prediction score model,
//! denoising score matching and the probability-flow ODE.

use serde::{Deserialize, Serialize};

use crate::embed::{with_time, TIME_FEATURES};
use crate::error::{Error, Result};
use crate::numcore::{Activation, AdamConfig, AdamState, Matrix, MlpParams, MlpVars, Scalar, Tape, Var};
use crate::odesolve::{integrate_fixed, FixedStep};
use crate::rng::Rng;
use crate::synthdata::{sample_data, DatasetSpec};
use crate::training::{Ema, TrainError};

/// Lower end of the probability-flow integration interval.
pub const T_MIN: f64 = 1e-3;

/// Linear-β VP schedule on `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_max >= self.beta_min && self.beta_max.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < beta_min <= beta_max, got ({}, {})",
                self.beta_min, self.beta_max
            )));
        }
        Ok(())
    }

    /// `β(t) = β_min + t (β_max − β_min)`
    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `ᾱ(t) = exp(−β_min t − ½ (β_max − β_min) t²)`
    pub fn alpha_bar(&self, t: f64) -> f64 {
        (-self.beta_min * t - 0.5 * (self.beta_max - self.beta_min) * t * t).exp()
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("diffusion time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Anything that predicts the injected noise `ε(x, t)` for per-row times.
pub trait EpsPredictor<T> {
    fn predict_eps(&self, x: &Matrix<T>, t: &[T]) -> Result<Matrix<T>>;
}

impl<T, F> EpsPredictor<T> for F
where
    F: Fn(&Matrix<T>, &[T]) -> Result<Matrix<T>>,
{
    fn predict_eps(&self, x: &Matrix<T>, t: &[T]) -> Result<Matrix<T>> {
        self(x, t)
    }
}

/// ε-prediction network over `[x | time features]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModel<T> {
    pub net: MlpParams<T>,
}

impl<T: Scalar> ScoreModel<T> {
    pub fn new(dim: usize, hidden: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut widths = vec![dim + TIME_FEATURES];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        Ok(Self {
            net: MlpParams::glorot(&widths, activation, rng)?,
        })
    }

    pub fn from_net(net: MlpParams<T>) -> Result<Self> {
        let dim = net.output_width();
        if net.input_width() != dim + TIME_FEATURES {
            return Err(Error::shape(
                "ScoreModel::from_net",
                format!("input width {}", dim + TIME_FEATURES),
                net.input_width(),
            ));
        }
        Ok(Self { net })
    }

    pub fn dim(&self) -> usize {
        self.net.output_width()
    }

    /// Records `ε_ψ(x, t)` on a tape.
    pub fn eps_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &MlpVars,
        x: &Matrix<T>,
        t: &[T],
        dropout: Option<(f64, &mut Rng)>,
    ) -> Result<Var> {
        let input = tape.constant(with_time(x, t));
        self.net.forward_tape(tape, vars, input, dropout)
    }
}

impl<T: Scalar> EpsPredictor<T> for ScoreModel<T> {
    fn predict_eps(&self, x: &Matrix<T>, t: &[T]) -> Result<Matrix<T>> {
        if x.cols() != self.dim() {
            return Err(Error::shape("ScoreModel::predict_eps", self.dim(), x.cols()));
        }
        self.net.forward(&with_time(x, t))
    }
}

/// `x_t = sqrt(ᾱ_t) x1 + sqrt(1 − ᾱ_t) ε` with the given noise.
pub fn perturb_with<T: Scalar>(
    schedule: &NoiseSchedule,
    x1: &Matrix<T>,
    t: &[T],
    eps: &Matrix<T>,
) -> Result<Matrix<T>> {
    x1.check_same_shape(eps, "perturb")?;
    if t.len() != x1.rows() {
        return Err(Error::shape("perturb", x1.rows(), t.len()));
    }
    let mut out = x1.clone();
    for (r, &tr) in t.iter().enumerate() {
        let tr = tr.to_f64_lossy();
        check_time(tr)?;
        let ab = schedule.alpha_bar(tr);
        let (a, s) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        for (o, &e) in out.row_mut(r).iter_mut().zip(eps.row(r)) {
            *o = a * *o + s * e;
        }
    }
    Ok(out)
}

/// Samples the closed-form forward marginal at a single time `t`; returns
/// `(x_t, ε)`.
pub fn forward_perturb<T: Scalar>(
    schedule: &NoiseSchedule,
    x1: &Matrix<T>,
    t: f64,
    rng: &mut Rng,
) -> Result<(Matrix<T>, Matrix<T>)> {
    check_time(t)?;
    let eps = rng.normal_matrix(x1.rows(), x1.cols());
    let xt = perturb_with(schedule, x1, &vec![T::lit(t); x1.rows()], &eps)?;
    Ok((xt, eps))
}

/// `mean_rows ‖ε̂(x_t, t) − ε‖²` for explicit `t` and `ε`, evaluated with
/// any predictor.
pub fn dsm_loss_value<T: Scalar>(
    model: &impl EpsPredictor<T>,
    schedule: &NoiseSchedule,
    x1: &Matrix<T>,
    t: &[T],
    eps: &Matrix<T>,
) -> Result<T> {
    let xt = perturb_with(schedule, x1, t, eps)?;
    let pred = model.predict_eps(&xt, t)?;
    pred.check_same_shape(eps, "dsm_loss")?;
    let n = T::from_usize_lossy(x1.rows().max(1));
    Ok(pred.sub(eps).row_sq_norms().into_iter().sum::<T>() / n)
}

/// Records the DSM objective for explicit `t` and `ε` on a tape.
pub fn dsm_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ScoreModel<T>,
    vars: &MlpVars,
    schedule: &NoiseSchedule,
    x1: &Matrix<T>,
    t: &[T],
    eps: &Matrix<T>,
    dropout: Option<(f64, &mut Rng)>,
) -> Result<Var> {
    let xt = perturb_with(schedule, x1, t, eps)?;
    let pred = model.eps_on_tape(tape, vars, &xt, t, dropout)?;
    let target = tape.constant(eps.clone());
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean_rows_sum(sq))
}

/// Draws `t ~ U[t_min, 1]` per row and `ε ~ N(0, I)`.
pub fn sample_dsm_noise<T: Scalar>(rng: &mut Rng, n: usize, d: usize) -> (Vec<T>, Matrix<T>) {
    let t = (0..n).map(|_| T::lit(rng.uniform_range(T_MIN, 1.0))).collect();
    (t, rng.normal_matrix(n, d))
}

/// Denoising score-matching loss with freshly sampled `t` and `ε`.
pub fn dsm_loss<T: Scalar>(
    model: &impl EpsPredictor<T>,
    schedule: &NoiseSchedule,
    x1: &Matrix<T>,
    rng: &mut Rng,
) -> Result<T> {
    let (t, eps) = sample_dsm_noise(rng, x1.rows(), x1.cols());
    dsm_loss_value(model, schedule, x1, &t, &eps)
}

/// Probability-flow drift `−½β(t)x + ½β(t) ε̂(x,t) / sqrt(1 − ᾱ(t))`.
///
/// `t` is clamped to `[T_MIN, 1]`.
pub fn pf_ode_drift<T: Scalar>(
    model: &impl EpsPredictor<T>,
    schedule: &NoiseSchedule,
    x: &Matrix<T>,
    t: T,
) -> Result<Matrix<T>> {
    let tf = t.to_f64_lossy();
    if !(tf <= 1.0) {
        return Err(Error::invalid(format!("PF-ODE time {tf} above 1")));
    }
    let tc = tf.max(T_MIN);
    let beta = schedule.beta(tc);
    let sigma = (1.0 - schedule.alpha_bar(tc)).sqrt();
    let eps = model.predict_eps(x, &vec![T::lit(tc); x.rows()])?;
    x.check_same_shape(&eps, "pf_ode_drift")?;
    let (a, b) = (T::lit(-0.5 * beta), T::lit(0.5 * beta / sigma));
    Ok(x.zip_map(&eps, |xi, ei| a * xi + b * ei))
}

/// Integrates the PF-ODE from noise (`t = 1`) to `T_MIN` with Heun steps;
/// row `i` of the result is paired with row `i` of `x0`.
pub fn generate_coupling_revs<T: Scalar>(
    model: &impl EpsPredictor<T>,
    schedule: &NoiseSchedule,
    x0: &Matrix<T>,
    steps: usize,
) -> Result<Matrix<T>> {
    if steps == 0 {
        return Err(Error::invalid("coupling generation needs steps >= 1"));
    }
    let field = |x: &Matrix<T>, t: T| pf_ode_drift(model, schedule, x, t);
    let traj = integrate_fixed(
        FixedStep::Heun,
        &field,
        x0,
        (T::one(), T::lit(T_MIN)),
        steps,
        false,
    )
    .map_err(|e| match e {
        Error::NonFiniteState { step, time } => Error::NumericFault(format!(
            "PF-ODE state became non-finite at step {step} (t = {time})"
        )),
        other => other,
    })?;
    Ok(traj.into_terminal())
}

/// Noise for data via the closed-form forward process at `t = 1`.
pub fn generate_coupling_iii<T: Scalar>(
    schedule: &NoiseSchedule,
    x1: &Matrix<T>,
    rng: &mut Rng,
) -> Result<Matrix<T>> {
    let eps = rng.normal_matrix(x1.rows(), x1.cols());
    generate_coupling_iii_with(schedule, x1, &eps)
}

pub fn generate_coupling_iii_with<T: Scalar>(
    schedule: &NoiseSchedule,
    x1: &Matrix<T>,
    eps: &Matrix<T>,
) -> Result<Matrix<T>> {
    perturb_with(schedule, x1, &vec![T::one(); x1.rows()], eps)
}

/// Hyperparameters for [`train_diffusion`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub ema_decay: Option<f64>,
    pub dropout: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch: 256,
            lr: 1e-3,
            seed: 0,
            hidden: vec![64, 64, 64],
            activation: Activation::Silu,
            ema_decay: Some(0.999),
            dropout: 0.0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::invalid("ema_decay must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Result of [`train_diffusion`]: the model and its per-iteration loss.
#[derive(Clone, Debug)]
pub struct TrainedScore<T> {
    pub model: ScoreModel<T>,
    pub losses: Vec<f64>,
}

/// Trains an ε-predictor on `spec` by denoising score matching.
pub fn train_diffusion<T: Scalar>(
    spec: &DatasetSpec,
    schedule: &NoiseSchedule,
    config: &DiffusionConfig,
) -> Result<TrainedScore<T>, TrainError<ScoreModel<T>>> {
    config.validate()?;
    schedule.validate()?;
    spec.validate()?;
    let mut root = Rng::new(config.seed);
    let mut init_rng = root.fork(1);
    let mut data_rng = root.fork(2);
    let mut noise_rng = root.fork(3);
    let mut drop_rng = root.fork(4);

    let mut model = ScoreModel::new(2, &config.hidden, config.activation, &mut init_rng)?;
    let mut adam = AdamState::new(&model.net, AdamConfig::with_lr(config.lr));
    let mut ema = config.ema_decay.map(|d| Ema::new(&model.net, d));
    let mut losses = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let x1 = sample_data::<T>(&mut data_rng, spec, config.batch)?;
        let (t, eps) = sample_dsm_noise::<T>(&mut noise_rng, config.batch, 2);
        let mut tape = Tape::new();
        let vars = model.net.register(&mut tape);
        let dropout = (config.dropout > 0.0).then_some((config.dropout, &mut drop_rng));
        let loss = dsm_loss_on_tape(&mut tape, &model, &vars, schedule, &x1, &t, &eps, dropout)?;
        let value = tape.scalar(loss);
        let diverged = |reason: String, model: &ScoreModel<T>| TrainError::Diverged {
            iteration: it,
            reason,
            last_good: Box::new(model.clone()),
        };
        if !value.is_finite() {
            return Err(diverged(format!("loss is {value}"), &model));
        }
        let grads = tape.backward(loss)?;
        let g = model.net.collect_grads(&grads, &vars);
        if let Err(e) = adam.step(&mut model.net, &g) {
            return Err(diverged(e.to_string(), &model));
        }
        if let Some(ema) = ema.as_mut() {
            ema.update(&model.net);
        }
        losses.push(value.to_f64_lossy());
    }
    let model = match ema {
        Some(ema) => ScoreModel {
            net: ema.into_params(),
        },
        None => model,
    };
    Ok(TrainedScore { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    fn zero_predictor(x: &Matrix<f64>, _t: &[f64]) -> Result<Matrix<f64>> {
        Ok(Matrix::zeros(x.rows(), x.cols()))
    }

    #[test]
    fn alpha_bar_monotone_and_anchored() {
        let s = schedule();
        assert_eq!(s.alpha_bar(0.0), 1.0);
        let grid: Vec<f64> = (0..1000).map(|i| s.alpha_bar(i as f64 / 999.0)).collect();
        assert!(grid.windows(2).all(|w| w[0] > w[1]));
        assert!((s.alpha_bar(1.0) - (-10.05f64).exp()).abs() < 1e-15);
        for i in 1..=100 {
            assert!(s.beta(i as f64 / 100.0) > 0.0);
        }
    }

    #[test]
    fn perturb_at_zero_is_identity() {
        let mut rng = Rng::new(0);
        let x1: Matrix<f64> = rng.normal_matrix(16, 2);
        let (xt, _) = forward_perturb(&schedule(), &x1, 0.0, &mut rng).unwrap();
        assert_eq!(xt, x1);
    }

    #[test]
    fn perturb_with_zero_noise_scales() {
        let x1 = Matrix::from_rows(&[[1.0, -2.0]]).unwrap();
        let s = schedule();
        let xt = perturb_with(&s, &x1, &[0.3], &Matrix::zeros(1, 2)).unwrap();
        let a = s.alpha_bar(0.3).sqrt();
        assert_eq!(xt.as_slice(), &[a, -2.0 * a]);
    }

    #[test]
    fn perturb_rejects_time_outside_unit_interval() {
        let x1 = Matrix::<f64>::zeros(1, 2);
        let mut rng = Rng::new(0);
        assert!(forward_perturb(&schedule(), &x1, 1.5, &mut rng).is_err());
        assert!(forward_perturb(&schedule(), &x1, -0.1, &mut rng).is_err());
    }

    #[test]
    fn terminal_marginal_is_standard_normal() {
        let mut rng = Rng::new(1);
        let spec = DatasetSpec::new(crate::synthdata::DatasetKind::EightGaussians);
        let x1: Matrix<f64> = sample_data(&mut rng, &spec, 100_000).unwrap();
        let (xt, _) = forward_perturb::<f64>(&schedule(), &x1, 1.0, &mut rng).unwrap();
        for (m, v) in xt.column_means().iter().zip(xt.column_variances()) {
            assert!(m.abs() < 0.02, "{m}");
            assert!((v - 1.0).abs() < 0.02, "{v}");
        }
    }

    #[test]
    fn forward_marginal_matches_closed_form() {
        let s = schedule();
        let mut rng = Rng::new(2);
        let t = 0.3;
        let x1 = Matrix::from_fn(100_000, 2, |_, c| [1.5, -0.5][c]);
        let (xt, _) = forward_perturb::<f64>(&s, &x1, t, &mut rng).unwrap();
        let ab = s.alpha_bar(t);
        for (c, (m, v)) in xt.column_means().iter().zip(xt.column_variances()).enumerate() {
            assert!((m - ab.sqrt() * [1.5, -0.5][c]).abs() < 0.02);
            assert!((v - (1.0 - ab)).abs() < 0.02);
        }
    }

    #[test]
    fn dsm_loss_oracle_and_zero_predictor() {
        let s = schedule();
        let mut rng = Rng::new(3);
        let x1: Matrix<f64> = rng.normal_matrix(50_000, 2);
        let (t, eps) = sample_dsm_noise::<f64>(&mut rng, 50_000, 2);
        let eps_c = eps.clone();
        let oracle = move |_x: &Matrix<f64>, _t: &[f64]| Ok(eps_c.clone());
        assert_eq!(dsm_loss_value(&oracle, &s, &x1, &t, &eps).unwrap(), 0.0);
        let zero = dsm_loss_value(&zero_predictor, &s, &x1, &t, &eps).unwrap();
        assert!((zero - 2.0).abs() < 0.05, "{zero}");
    }

    #[test]
    fn dsm_loss_single_row() {
        let s = schedule();
        let x1 = Matrix::from_rows(&[[0.3, 0.1]]).unwrap();
        let eps = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let l = dsm_loss_value(&zero_predictor, &s, &x1, &[0.5], &eps).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn standard_normal_score_is_stationary() {
        let s = schedule();
        let oracle = |x: &Matrix<f64>, t: &[f64]| {
            let sig = (1.0 - NoiseSchedule::default().alpha_bar(t[0])).sqrt();
            Ok(x.scale(sig))
        };
        let mut rng = Rng::new(4);
        let x: Matrix<f64> = rng.normal_matrix(64, 2);
        for &t in &[T_MIN, 0.1, 0.5, 1.0] {
            let d = pf_ode_drift(&oracle, &s, &x, t).unwrap();
            assert!(d.max_abs() < 1e-12, "t={t}: {}", d.max_abs());
        }
        let y = generate_coupling_revs(&oracle, &s, &x, 7).unwrap();
        for (a, b) in y.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn drift_plug_in_values() {
        let x = Matrix::from_rows(&[[2.0, 0.0]]).unwrap();
        let flat = NoiseSchedule {
            beta_min: 1.0,
            beta_max: 1.0,
        };
        let d = pf_ode_drift(&zero_predictor, &flat, &x, 0.5).unwrap();
        assert_eq!(d.as_slice(), &[-1.0, 0.0]);
        let origin = Matrix::<f64>::zeros(1, 2);
        let d = pf_ode_drift(&zero_predictor, &schedule(), &origin, 0.7).unwrap();
        assert_eq!(d.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn drift_clamps_small_times() {
        let x = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let at_zero = pf_ode_drift(&zero_predictor, &schedule(), &x, 0.0).unwrap();
        let at_min = pf_ode_drift(&zero_predictor, &schedule(), &x, T_MIN).unwrap();
        assert_eq!(at_zero, at_min);
        assert!(at_zero.is_finite());
    }

    #[test]
    fn coupling_iii_closed_form() {
        let s = schedule();
        let x1 = Matrix::from_rows(&[[1.0, -3.0]]).unwrap();
        let y = generate_coupling_iii_with(&s, &x1, &Matrix::zeros(1, 2)).unwrap();
        let a = s.alpha_bar(1.0).sqrt();
        assert!((a - 6.57e-3).abs() < 1e-4);
        assert_eq!(y.as_slice(), &[a, -3.0 * a]);

        let mut rng = Rng::new(5);
        let a1 = generate_coupling_iii(&s, &x1, &mut rng).unwrap();
        let a2 = generate_coupling_iii(&s, &x1, &mut rng).unwrap();
        assert_ne!(a1, a2);
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = DiffusionConfig {
            iterations: 0,
            ..Default::default()
        };
        let spec = DatasetSpec::new(crate::synthdata::DatasetKind::EightGaussians);
        let r = train_diffusion::<f64>(&spec, &schedule(), &cfg);
        assert!(matches!(r, Err(TrainError::Invalid(_))));
    }

    #[test]
    fn short_training_is_deterministic() {
        let cfg = DiffusionConfig {
            iterations: 20,
            batch: 32,
            hidden: vec![16, 16],
            ..Default::default()
        };
        let spec = DatasetSpec::new(crate::synthdata::DatasetKind::EightGaussians);
        let a = train_diffusion::<f64>(&spec, &schedule(), &cfg).unwrap();
        let b = train_diffusion::<f64>(&spec, &schedule(), &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn divergence_returns_last_good_model() {
        let cfg = DiffusionConfig {
            iterations: 50,
            batch: 8,
            lr: 1e300,
            hidden: vec![8],
            ema_decay: None,
            ..Default::default()
        };
        let spec = DatasetSpec::new(crate::synthdata::DatasetKind::EightGaussians);
        match train_diffusion::<f64>(&spec, &schedule(), &cfg) {
            Err(TrainError::Diverged { last_good, .. }) => {
                assert!(last_good.net.tensors().all(|t| t.is_finite()));
            }
            other => panic!("expected divergence, got {:?}", other.map(|t| t.losses.len())),
        }
    }
}
