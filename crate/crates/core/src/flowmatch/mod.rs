//! Flow-matching objectives over paired couplings.
//!
//! A coupling is a batch of `(x_from, x_to)` rows, noise side first. The
//! regression target for every pair is the straight-line displacement
//! `x_to − x_from`, evaluated at the linear interpolant
//! `x_t = t·x_to + (1 − t)·x_from`. Couplings differ only in provenance:
//! diffusion-guided (`Revs`), encoder- or forward-process-generated (`Forw`),
//! or independent draws (baseline).

mod train;

pub use train::{
    train_straightfm, train_with_cache, CouplingCache, CouplingMode, LossRecord, TrainConfig, TrainedFlow, Variant,
};

use crate::embed::{with_time, TIME_FEATURES};
use crate::error::{Error, Result};
use crate::numcore::{Activation, Matrix, MlpParams, MlpVars, Scalar, Tape, Var};
use crate::odesolve::VectorField;
use crate::rng::Rng;

/// Bounds applied to the encoder's log-variance before exponentiation.
pub const LOG_VAR_CLAMP: (f64, f64) = (-10.0, 10.0);

/// Anything that predicts a velocity for a batch with per-row times.
pub trait VelocityModel<T> {
    fn predict(&self, x: &Matrix<T>, t: &[T]) -> Result<Matrix<T>>;
}

impl<T, F> VelocityModel<T> for F
where
    F: Fn(&Matrix<T>, &[T]) -> Result<Matrix<T>>,
{
    fn predict(&self, x: &Matrix<T>, t: &[T]) -> Result<Matrix<T>> {
        self(x, t)
    }
}

/// Velocity network `u_θ(x, t)` over `[x | time features]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField<T> {
    pub net: MlpParams<T>,
}

impl<T: Scalar> VelocityField<T> {
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
                "VelocityField::from_net",
                format!("input width {}", dim + TIME_FEATURES),
                net.input_width(),
            ));
        }
        Ok(Self { net })
    }

    pub fn dim(&self) -> usize {
        self.net.output_width()
    }

    /// Records `u_θ(x, t)` for a tape-resident `x`.
    pub fn on_tape(&self, tape: &mut Tape<T>, vars: &MlpVars, x: Var, t: &[T]) -> Result<Var> {
        let feats = tape.constant(crate::embed::time_features(t));
        let input = tape.hcat(x, feats)?;
        self.net.forward_tape(tape, vars, input, None)
    }

    /// One-step generation `x0 + u(x0, 0)`.
    pub fn one_step(&self, x0: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = x0.clone();
        out.add_assign(&self.predict(x0, &vec![T::zero(); x0.rows()])?);
        Ok(out)
    }
}

impl<T: Scalar> VelocityModel<T> for VelocityField<T> {
    fn predict(&self, x: &Matrix<T>, t: &[T]) -> Result<Matrix<T>> {
        if x.cols() != self.dim() {
            return Err(Error::shape("VelocityField::predict", self.dim(), x.cols()));
        }
        self.net.forward(&with_time(x, t))
    }
}

impl<T: Scalar> VectorField<T> for VelocityField<T> {
    fn velocity(&self, x: &Matrix<T>, t: T) -> Result<Matrix<T>> {
        self.predict(x, &vec![t; x.rows()])
    }
}

/// Diagonal-Gaussian encoder `q_φ(x̃0 | x1) = N(μ(x1), diag(exp(logσ²(x1))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingEncoder<T> {
    pub net: MlpParams<T>,
}

impl<T: Scalar> CouplingEncoder<T> {
    pub fn new(dim: usize, hidden: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(2 * dim);
        Ok(Self {
            net: MlpParams::glorot(&widths, activation, rng)?,
        })
    }

    pub fn from_net(net: MlpParams<T>) -> Result<Self> {
        if net.output_width() != 2 * net.input_width() {
            return Err(Error::shape(
                "CouplingEncoder::from_net",
                format!("output width {}", 2 * net.input_width()),
                net.output_width(),
            ));
        }
        Ok(Self { net })
    }

    pub fn dim(&self) -> usize {
        self.net.input_width()
    }

    /// `(μ, clamped logσ²)` for each row of `x1`.
    pub fn encode(&self, x1: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        let out = self.net.forward(x1)?;
        let d = self.dim();
        let (lo, hi) = (T::lit(LOG_VAR_CLAMP.0), T::lit(LOG_VAR_CLAMP.1));
        Ok((out.slice_cols(0, d), out.slice_cols(d, 2 * d).map(|v| v.max(lo).min(hi))))
    }

    /// Records `(x̃0, μ, logσ²)` with `x̃0 = μ + exp(½ logσ²) ⊙ ε`.
    pub fn sample_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &MlpVars,
        x1: &Matrix<T>,
        eps: &Matrix<T>,
    ) -> Result<(Var, Var, Var)> {
        let input = tape.constant(x1.clone());
        let out = self.net.forward_tape(tape, vars, input, None)?;
        let d = self.dim();
        let mu = tape.slice_cols(out, 0, d)?;
        let raw = tape.slice_cols(out, d, 2 * d)?;
        let log_var = tape.clamp(raw, T::lit(LOG_VAR_CLAMP.0), T::lit(LOG_VAR_CLAMP.1));
        let half = tape.scale(log_var, T::lit(0.5));
        let std = tape.exp(half);
        let noise = tape.mul_const(std, eps.clone())?;
        let x0 = tape.add(mu, noise)?;
        Ok((x0, mu, log_var))
    }
}

/// Which way a coupling was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Noise pushed to data by the diffusion model's probability-flow ODE.
    Revs,
    /// Data pulled back to noise by the encoder or the forward process.
    Forw,
}

/// Row-paired noise and data samples.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBatch<T> {
    pub x_from: Matrix<T>,
    pub x_to: Matrix<T>,
    pub direction: Direction,
}

impl<T: Scalar> CouplingBatch<T> {
    pub fn new(x_from: Matrix<T>, x_to: Matrix<T>, direction: Direction) -> Result<Self> {
        x_from.check_same_shape(&x_to, "CouplingBatch::new")?;
        Ok(Self {
            x_from,
            x_to,
            direction,
        })
    }

    pub fn len(&self) -> usize {
        self.x_from.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_times<T: Scalar>(t: &[T], rows: usize, op: &'static str) -> Result<()> {
    if t.len() != rows {
        return Err(Error::shape(op, format!("{rows} times"), t.len()));
    }
    if let Some(bad) = t.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::invalid(format!("{op}: time {bad} outside [0, 1]")));
    }
    Ok(())
}

/// `x_t = t·x_to + (1 − t)·x_from`, row by row.
pub fn interpolate<T: Scalar>(x_from: &Matrix<T>, x_to: &Matrix<T>, t: &[T]) -> Result<Matrix<T>> {
    x_from.check_same_shape(x_to, "interpolate")?;
    check_times(t, x_from.rows(), "interpolate")?;
    let mut out = x_from.clone();
    for (r, &tr) in t.iter().enumerate() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(x_to.row(r)) {
            *o = tr * b + (T::one() - tr) * *o;
        }
    }
    Ok(out)
}

/// `mean_rows ‖u(x_t, t) − (x_to − x_from)‖²`; the shared form of every
/// flow-matching loss.
pub fn fm_loss_value<T: Scalar>(
    u: &impl VelocityModel<T>,
    x_from: &Matrix<T>,
    x_to: &Matrix<T>,
    t: &[T],
) -> Result<T> {
    let xt = interpolate(x_from, x_to, t)?;
    let pred = u.predict(&xt, t)?;
    let target = x_to.sub(x_from);
    pred.check_same_shape(&target, "fm_loss")?;
    let n = T::from_usize_lossy(x_from.rows().max(1));
    Ok(pred.sub(&target).row_sq_norms().into_iter().sum::<T>() / n)
}

/// Records the flow-matching loss for tape-resident endpoints.
pub fn fm_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    u: &VelocityField<T>,
    vars: &MlpVars,
    x_from: Var,
    x_to: Var,
    t: &[T],
) -> Result<Var> {
    let rows = tape.value(x_from).rows();
    check_times(t, rows, "fm_loss")?;
    let a = tape.scale_rows(x_from, t.iter().map(|&v| T::one() - v).collect())?;
    let b = tape.scale_rows(x_to, t.to_vec())?;
    let xt = tape.add(a, b)?;
    let pred = u.on_tape(tape, vars, xt, t)?;
    let target = tape.sub(x_to, x_from)?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean_rows_sum(sq))
}

fn expect_direction<T>(c: &CouplingBatch<T>, want: Direction, op: &str) -> Result<()> {
    if c.direction != want {
        return Err(Error::invalid(format!(
            "{op} expects a {want:?} coupling, got {:?}",
            c.direction
        )));
    }
    Ok(())
}

/// Loss over diffusion-guided couplings `(x0, x̃1)`.
pub fn revs_loss<T: Scalar>(
    u: &impl VelocityModel<T>,
    coupling: &CouplingBatch<T>,
    t: &[T],
) -> Result<T> {
    expect_direction(coupling, Direction::Revs, "revs_loss")?;
    fm_loss_value(u, &coupling.x_from, &coupling.x_to, t)
}

/// Loss over data-to-noise couplings `(x̃0, x1)`.
pub fn forw_loss<T: Scalar>(
    u: &impl VelocityModel<T>,
    coupling: &CouplingBatch<T>,
    t: &[T],
) -> Result<T> {
    expect_direction(coupling, Direction::Forw, "forw_loss")?;
    fm_loss_value(u, &coupling.x_from, &coupling.x_to, t)
}

/// Conditional flow matching over independently drawn `(x0, x1)`.
pub fn baseline_cfm_loss<T: Scalar>(
    u: &impl VelocityModel<T>,
    x0: &Matrix<T>,
    x1: &Matrix<T>,
    t: &[T],
) -> Result<T> {
    fm_loss_value(u, x0, x1, t)
}

/// `KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σᵢ (μᵢ² + σᵢ² − log σᵢ² − 1)`.
///
/// `log_var` is clamped to [`LOG_VAR_CLAMP`] first.
pub fn kl_gaussian<T: Scalar>(mu: &[T], log_var: &[T]) -> Result<T> {
    if mu.len() != log_var.len() {
        return Err(Error::shape("kl_gaussian", mu.len(), log_var.len()));
    }
    let (lo, hi) = (T::lit(LOG_VAR_CLAMP.0), T::lit(LOG_VAR_CLAMP.1));
    let half = T::lit(0.5);
    Ok(mu
        .iter()
        .zip(log_var)
        .map(|(&m, &lv)| {
            let lv = lv.max(lo).min(hi);
            // exp_m1(lv) - lv keeps precision when lv is near zero
            m * m + lv.exp_m1() - lv
        })
        .sum::<T>()
        * half)
}

/// Mean over rows of the per-row Gaussian KL, on a tape.
pub fn kl_on_tape<T: Scalar>(tape: &mut Tape<T>, mu: Var, log_var: Var) -> Result<Var> {
    let mu2 = tape.square(mu);
    let var = tape.exp(log_var);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, log_var)?;
    let (r, c) = tape.value(b).shape();
    let shifted = tape.add_const(b, &Matrix::filled(r, c, -T::one()))?;
    let per = tape.scale(shifted, T::lit(0.5));
    Ok(tape.mean_rows_sum(per))
}

/// Samples `x̃0 ~ q_φ(· | x1)` by reparameterization; returns `(x̃0, μ, logσ²)`.
pub fn encode_coupling_forw<T: Scalar>(
    q: &CouplingEncoder<T>,
    x1: &Matrix<T>,
    rng: &mut Rng,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let eps = rng.normal_matrix(x1.rows(), x1.cols());
    encode_coupling_forw_with(q, x1, &eps)
}

pub fn encode_coupling_forw_with<T: Scalar>(
    q: &CouplingEncoder<T>,
    x1: &Matrix<T>,
    eps: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let (mu, log_var) = q.encode(x1)?;
    mu.check_same_shape(eps, "encode_coupling_forw")?;
    let half = T::lit(0.5);
    let std = log_var.map(|v| (half * v).exp());
    let x0 = mu.add(&std.hadamard(eps));
    Ok((x0, mu, log_var))
}

/// Per-component values of the combined objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents<T> {
    pub total: T,
    pub revs: T,
    pub forw: T,
    pub kl: T,
}

/// Data side of the combined objective.
pub enum ForwInput<'a, T> {
    /// Sample `x̃0` from the encoder for data `x1` using noise `eps`.
    Learned {
        encoder: &'a CouplingEncoder<T>,
        vars: &'a MlpVars,
        x1: &'a Matrix<T>,
        eps: &'a Matrix<T>,
    },
    /// A precomputed forward coupling (closed-form forward process).
    Fixed(&'a CouplingBatch<T>),
}

/// Tape handles of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub revs: Option<Var>,
    pub forw: Option<Var>,
    pub kl: Option<Var>,
}

impl ObjectiveVars {
    pub fn components<T: Scalar>(&self, tape: &Tape<T>) -> LossComponents<T> {
        let get = |v: Option<Var>| v.map_or(T::zero(), |v| tape.scalar(v));
        LossComponents {
            total: tape.scalar(self.total),
            revs: get(self.revs),
            forw: get(self.forw),
            kl: get(self.kl),
        }
    }
}

/// Records `L_revs + λ·KL + L_forw`. Either side may be absent (or empty);
/// the KL term exists only for a learned forward side.
pub fn objective_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    u: &VelocityField<T>,
    uvars: &MlpVars,
    revs: Option<(&CouplingBatch<T>, &[T])>,
    forw: Option<(ForwInput<'_, T>, &[T])>,
    lambda: f64,
) -> Result<ObjectiveVars> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let revs = revs.filter(|(c, _)| !c.is_empty());
    let forw = forw.filter(|(f, _)| match f {
        ForwInput::Learned { x1, .. } => x1.rows() > 0,
        ForwInput::Fixed(c) => !c.is_empty(),
    });
    if revs.is_none() && forw.is_none() {
        return Err(Error::invalid("combined objective needs at least one non-empty coupling batch"));
    }

    let mut terms = Vec::with_capacity(3);
    let revs_var = match revs {
        Some((c, t)) => {
            expect_direction(c, Direction::Revs, "objective revs side")?;
            let a = tape.constant(c.x_from.clone());
            let b = tape.constant(c.x_to.clone());
            let l = fm_loss_on_tape(tape, u, uvars, a, b, t)?;
            terms.push(l);
            Some(l)
        }
        None => None,
    };
    let (forw_var, kl_var) = match forw {
        Some((ForwInput::Learned { encoder, vars, x1, eps }, t)) => {
            let (x0, mu, log_var) = encoder.sample_on_tape(tape, vars, x1, eps)?;
            let x1v = tape.constant(x1.clone());
            let l = fm_loss_on_tape(tape, u, uvars, x0, x1v, t)?;
            let kl = kl_on_tape(tape, mu, log_var)?;
            terms.push(l);
            if lambda > 0.0 {
                let weighted = tape.scale(kl, T::lit(lambda));
                terms.push(weighted);
            }
            (Some(l), Some(kl))
        }
        Some((ForwInput::Fixed(c), t)) => {
            expect_direction(c, Direction::Forw, "objective forw side")?;
            let a = tape.constant(c.x_from.clone());
            let b = tape.constant(c.x_to.clone());
            let l = fm_loss_on_tape(tape, u, uvars, a, b, t)?;
            terms.push(l);
            (Some(l), None)
        }
        None => (None, None),
    };
    let mut total = terms[0];
    for &term in &terms[1..] {
        total = tape.add(total, term)?;
    }
    Ok(ObjectiveVars {
        total,
        revs: revs_var,
        forw: forw_var,
        kl: kl_var,
    })
}

/// Evaluates `L_revs + λ·KL + L_forw` with freshly sampled times and
/// reparameterization noise. `forw_x1` holds the data rows sent through the
/// encoder; pass an empty batch to drop the forward side.
pub fn straightfm_loss<T: Scalar>(
    u: &VelocityField<T>,
    q: &CouplingEncoder<T>,
    revs: &CouplingBatch<T>,
    forw_x1: &Matrix<T>,
    lambda: f64,
    rng: &mut Rng,
) -> Result<LossComponents<T>> {
    let t_r: Vec<T> = rng.uniform_vec(revs.len());
    let t_f: Vec<T> = rng.uniform_vec(forw_x1.rows());
    let eps = rng.normal_matrix(forw_x1.rows(), q.dim());
    let mut tape = Tape::new();
    let uvars = u.net.register_frozen(&mut tape);
    let qvars = q.net.register_frozen(&mut tape);
    let forw = ForwInput::Learned {
        encoder: q,
        vars: &qvars,
        x1: forw_x1,
        eps: &eps,
    };
    let obj = objective_on_tape(
        &mut tape,
        u,
        &uvars,
        Some((revs, &t_r)),
        Some((forw, &t_f)),
        lambda,
    )?;
    Ok(obj.components(&tape))
}

/// Combines logged components into the total for a given `λ`.
pub fn combine<T: Scalar>(revs: T, kl: T, forw: T, lambda: T) -> T {
    revs + lambda * kl + forw
}

#[cfg(test)]
mod tests;
