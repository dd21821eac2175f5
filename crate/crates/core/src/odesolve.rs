//! Integrators for batched ODEs `dx/dt = u(x, t)`.
//!
//! Every solver accepts spans in either direction: `(0, 1)` for flow
//! sampling, `(1, t_min)` for the probability-flow ODE.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Scalar};

/// A time-dependent vector field evaluated on a batch of states.
pub trait VectorField<T> {
    fn velocity(&self, x: &Matrix<T>, t: T) -> Result<Matrix<T>>;
}

impl<T, F> VectorField<T> for F
where
    F: Fn(&Matrix<T>, T) -> Result<Matrix<T>>,
{
    fn velocity(&self, x: &Matrix<T>, t: T) -> Result<Matrix<T>> {
        self(x, t)
    }
}

/// Recorded solver output.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<Matrix<T>>,
    /// Accepted steps.
    pub steps: usize,
    /// Rejected steps (adaptive solvers only).
    pub rejected: usize,
    /// Vector-field evaluations.
    pub evaluations: usize,
}

impl<T: Scalar> Trajectory<T> {
    fn start(t0: T, x0: &Matrix<T>) -> Self {
        Self {
            times: vec![t0],
            states: vec![x0.clone()],
            steps: 0,
            rejected: 0,
            evaluations: 0,
        }
    }

    fn push(&mut self, t: T, x: Matrix<T>, record: bool) {
        if record || self.states.len() < 2 {
            self.times.push(t);
            self.states.push(x);
        } else {
            *self.times.last_mut().expect("non-empty") = t;
            *self.states.last_mut().expect("non-empty") = x;
        }
    }

    pub fn initial(&self) -> &Matrix<T> {
        &self.states[0]
    }

    pub fn terminal(&self) -> &Matrix<T> {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn into_terminal(mut self) -> Matrix<T> {
        self.states.pop().expect("trajectory has at least one state")
    }

    /// Number of batch rows per state.
    pub fn batch_size(&self) -> usize {
        self.states[0].rows()
    }
}

/// Fixed-step method selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixedStep {
    Euler,
    Heun,
}

fn check_finite<T: Scalar>(x: &Matrix<T>, step: usize, t: T) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteState {
            step,
            time: t.to_f64_lossy(),
        })
    }
}

fn check_span<T: Scalar>(span: (T, T)) -> Result<()> {
    if !(span.0.is_finite() && span.1.is_finite()) {
        return Err(Error::invalid("integration span must be finite"));
    }
    Ok(())
}

/// Fixed-step integration over `span` with `n` uniform steps.
///
/// With `record = false` only the initial and terminal states are kept.
pub fn integrate_fixed<T: Scalar>(
    method: FixedStep,
    field: &impl VectorField<T>,
    x_init: &Matrix<T>,
    span: (T, T),
    n: usize,
    record: bool,
) -> Result<Trajectory<T>> {
    if n == 0 {
        return Err(Error::invalid("fixed-step solvers need N >= 1"));
    }
    check_span(span)?;
    let (ta, tb) = span;
    let nf = T::from_usize_lossy(n);
    let h = (tb - ta) / nf;
    let half = T::lit(0.5);
    let mut traj = Trajectory::start(ta, x_init);
    let mut x = x_init.clone();
    for i in 0..n {
        let t = ta + T::from_usize_lossy(i) * (tb - ta) / nf;
        let t_next = if i + 1 == n {
            tb
        } else {
            ta + T::from_usize_lossy(i + 1) * (tb - ta) / nf
        };
        let k1 = field.velocity(&x, t)?;
        traj.evaluations += 1;
        x = match method {
            FixedStep::Euler => {
                let mut y = x;
                y.axpy(h, &k1);
                y
            }
            FixedStep::Heun => {
                let mut pred = x.clone();
                pred.axpy(h, &k1);
                let k2 = field.velocity(&pred, t_next)?;
                traj.evaluations += 1;
                let mut y = x;
                y.axpy(h * half, &k1);
                y.axpy(h * half, &k2);
                y
            }
        };
        check_finite(&x, i + 1, t_next)?;
        traj.steps += 1;
        traj.push(t_next, x.clone(), record);
    }
    Ok(traj)
}

/// N-step forward Euler; one field evaluation per step.
pub fn euler<T: Scalar>(
    field: &impl VectorField<T>,
    x_init: &Matrix<T>,
    span: (T, T),
    n: usize,
) -> Result<Trajectory<T>> {
    integrate_fixed(FixedStep::Euler, field, x_init, span, n, true)
}

/// N-step Heun (explicit trapezoid); two field evaluations per step.
pub fn heun<T: Scalar>(
    field: &impl VectorField<T>,
    x_init: &Matrix<T>,
    span: (T, T),
    n: usize,
) -> Result<Trajectory<T>> {
    integrate_fixed(FixedStep::Heun, field, x_init, span, n, true)
}

/// Tolerances for [`rk45`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            rtol: 1e-5,
            atol: 1e-5,
        }
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// 5th-order weights equal the last row of A (FSAL); error weights are b5 - b4.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Adaptive Dormand–Prince 5(4) integration.
///
/// A step is accepted when `max_i |err_i| / (atol + rtol·max(|y_i|, |y_new_i|)) ≤ 1`.
/// The next step is scaled by `0.9·err^(-1/5)` clipped to `[0.2, 5]`. The
/// initial step is `span / 100`; the last step is shortened to land on `t_b`.
pub fn rk45<T: Scalar>(
    field: &impl VectorField<T>,
    x_init: &Matrix<T>,
    span: (T, T),
    tol: Tolerance,
) -> Result<Trajectory<T>> {
    rk45_with(field, x_init, span, tol, true)
}

pub fn rk45_with<T: Scalar>(
    field: &impl VectorField<T>,
    x_init: &Matrix<T>,
    span: (T, T),
    tol: Tolerance,
    record: bool,
) -> Result<Trajectory<T>> {
    if !(tol.rtol > 0.0 && tol.atol > 0.0) {
        return Err(Error::invalid("rk45 tolerances must be positive"));
    }
    check_span(span)?;
    let (ta, tb) = span;
    let mut traj = Trajectory::start(ta, x_init);
    let length = (tb - ta).to_f64_lossy();
    if length == 0.0 {
        return Ok(traj);
    }
    let dir = length.signum();
    let min_step = 1e-12 * length.abs();
    let (rtol, atol) = (tol.rtol, tol.atol);

    let mut t = ta.to_f64_lossy();
    let t_end = tb.to_f64_lossy();
    let mut h = length / 100.0;
    let mut x = x_init.clone();
    let mut k1 = field.velocity(&x, ta)?;
    traj.evaluations += 1;
    let mut k: Vec<Matrix<T>> = Vec::with_capacity(7);

    while (t_end - t) * dir > 0.0 {
        let last = (t + h - t_end) * dir >= 0.0;
        if last {
            h = t_end - t;
        }
        if h.abs() < min_step {
            return Err(Error::StepUnderflow { time: t, step: h });
        }
        k.clear();
        k.push(k1.clone());
        let mut x_new = x.clone();
        for s in 1..7 {
            let mut xs = x.clone();
            for (j, &a) in A[s].iter().enumerate() {
                if a != 0.0 {
                    xs.axpy(T::lit(h * a), &k[j]);
                }
            }
            let ts = if s == 6 && last { t_end } else { t + C[s] * h };
            k.push(field.velocity(&xs, T::lit(ts))?);
            traj.evaluations += 1;
            if s == 6 {
                // FSAL: the last stage is evaluated at the 5th-order solution
                x_new = xs;
            }
        }

        let mut err = 0.0f64;
        let xs = x.as_slice();
        let ys = x_new.as_slice();
        for i in 0..xs.len() {
            let mut e = 0.0;
            for (s, &w) in E.iter().enumerate() {
                if w != 0.0 {
                    e += w * k[s].as_slice()[i].to_f64_lossy();
                }
            }
            e *= h;
            let scale =
                atol + rtol * xs[i].to_f64_lossy().abs().max(ys[i].to_f64_lossy().abs());
            err = err.max(e.abs() / scale);
        }
        if !err.is_finite() || !x_new.is_finite() {
            if x_new.is_finite() {
                h *= 0.2;
                traj.rejected += 1;
                continue;
            }
            return Err(Error::NonFiniteState {
                step: traj.steps + 1,
                time: t + h,
            });
        }

        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        if err <= 1.0 {
            t = if last { t_end } else { t + h };
            x = x_new;
            k1 = k[6].clone();
            traj.steps += 1;
            traj.push(T::lit(t), x.clone(), record);
            h *= factor;
        } else {
            traj.rejected += 1;
            h *= factor.min(1.0);
        }
    }
    if let Some(tl) = traj.times.last_mut() {
        *tl = tb;
    }
    Ok(traj)
}

/// Solver choice exposed on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Heun,
    Rk45,
}

impl Solver {
    pub const ALL: [Solver; 3] = [Solver::Euler, Solver::Heun, Solver::Rk45];

    pub fn name(self) -> &'static str {
        match self {
            Solver::Euler => "euler",
            Solver::Heun => "heun",
            Solver::Rk45 => "rk45",
        }
    }

    /// Integrates with this solver. `steps` is ignored by `rk45`.
    pub fn solve<T: Scalar>(
        self,
        field: &impl VectorField<T>,
        x_init: &Matrix<T>,
        span: (T, T),
        steps: usize,
        record: bool,
    ) -> Result<Trajectory<T>> {
        match self {
            Solver::Euler => integrate_fixed(FixedStep::Euler, field, x_init, span, steps, record),
            Solver::Heun => integrate_fixed(FixedStep::Heun, field, x_init, span, steps, record),
            Solver::Rk45 => rk45_with(field, x_init, span, Tolerance::default(), record),
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown solver '{s}'; valid solvers: euler, heun, rk45")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Matrix<f64> {
        Matrix::filled(1, 1, v)
    }

    fn linear(x: &Matrix<f64>, _t: f64) -> Result<Matrix<f64>> {
        Ok(x.clone())
    }

    #[test]
    fn euler_exact_for_constant_field() {
        let c = Matrix::from_rows(&[[0.5, -2.0]]).unwrap();
        let field = |_x: &Matrix<f64>, _t: f64| Ok(c.clone());
        let x0 = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        // dyadic step sizes are exact in binary floating point
        for n in [1, 2, 4, 8] {
            let tr = euler(&field, &x0, (0.0, 1.0), n).unwrap();
            assert_eq!(tr.terminal().as_slice(), &[1.5, -1.0]);
            assert_eq!(tr.states.len(), n + 1);
            assert_eq!(tr.evaluations, n);
        }
        let tr = euler(&field, &x0, (0.0, 1.0), 3).unwrap();
        assert!((tr.terminal().as_slice()[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn euler_on_growth_matches_recurrence() {
        let t1 = euler(&linear, &scalar(1.0), (0.0, 1.0), 1).unwrap();
        assert_eq!(t1.terminal().as_slice(), &[2.0]);
        let t100 = euler(&linear, &scalar(1.0), (0.0, 1.0), 100).unwrap();
        let want = 1.01f64.powi(100);
        assert!((t100.terminal().as_slice()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn one_step_formula() {
        let field = |x: &Matrix<f64>, t: f64| Ok(x.map(|v| v * v + t));
        let tr = euler(&field, &scalar(2.0), (0.25, 0.75), 1).unwrap();
        assert_eq!(tr.terminal().as_slice(), &[2.0 + (4.0 + 0.25) * 0.5]);
    }

    #[test]
    fn fixed_step_time_stamps() {
        let tr = heun(&linear, &scalar(1.0), (0.2, 1.0), 8).unwrap();
        for (i, &t) in tr.times.iter().enumerate() {
            assert_eq!(t, 0.2 + i as f64 * 0.8 / 8.0);
        }
        assert_eq!(tr.evaluations, 16);
    }

    #[test]
    fn heun_exact_for_linear_in_time() {
        let field = |x: &Matrix<f64>, t: f64| Ok(Matrix::filled(x.rows(), x.cols(), 2.0 * t));
        for n in [1, 2, 7] {
            let tr = heun(&field, &scalar(3.0), (0.0, 1.0), n).unwrap();
            assert!((tr.terminal().as_slice()[0] - 4.0).abs() < 1e-14);
        }
    }

    #[test]
    fn heun_beats_euler_on_growth() {
        let e = std::f64::consts::E;
        let h = heun(&linear, &scalar(1.0), (0.0, 1.0), 100).unwrap();
        let u = euler(&linear, &scalar(1.0), (0.0, 1.0), 100).unwrap();
        assert!((h.terminal().as_slice()[0] - e).abs() < (u.terminal().as_slice()[0] - e).abs());
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(euler(&linear, &scalar(1.0), (0.0, 1.0), 0).is_err());
    }

    #[test]
    fn non_finite_state_reports_step() {
        let field = |x: &Matrix<f64>, _t: f64| Ok(x.map(|v| v * 1e300));
        let err = euler(&field, &scalar(1e10), (0.0, 1.0), 4).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { step: 1, .. }), "{err}");
    }

    #[test]
    fn rk45_reaches_e() {
        let tr = rk45(&linear, &scalar(1.0), (0.0, 1.0), Tolerance::default()).unwrap();
        assert!((tr.terminal().as_slice()[0] - std::f64::consts::E).abs() < 1e-4);
        assert_eq!(*tr.times.last().unwrap(), 1.0);
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rk45_zero_field_keeps_state() {
        let field = |x: &Matrix<f64>, _t: f64| Ok(Matrix::zeros(x.rows(), x.cols()));
        let x0 = Matrix::from_rows(&[[1.5, -0.5]]).unwrap();
        let tr = rk45(&field, &x0, (0.0, 1.0), Tolerance::default()).unwrap();
        assert_eq!(tr.terminal(), &x0);
        assert_eq!(tr.rejected, 0);
    }

    #[test]
    fn tighter_tolerance_takes_more_steps() {
        let loose = rk45(&linear, &scalar(1.0), (0.0, 1.0), Tolerance::default()).unwrap();
        let tight = rk45(
            &linear,
            &scalar(1.0),
            (0.0, 1.0),
            Tolerance {
                rtol: 1e-8,
                atol: 1e-8,
            },
        )
        .unwrap();
        assert!(tight.steps > loose.steps, "{} vs {}", tight.steps, loose.steps);
    }

    #[test]
    fn rk45_backward_span() {
        // dx/dt = x from t=1 down to 0 divides by e
        let tr = rk45(&linear, &scalar(1.0), (1.0, 0.0), Tolerance::default()).unwrap();
        assert!((tr.terminal().as_slice()[0] - (-1f64).exp()).abs() < 1e-4);
        assert_eq!(*tr.times.last().unwrap(), 0.0);
    }

    #[test]
    fn rk45_rejects_bad_tolerance() {
        let tol = Tolerance {
            rtol: 0.0,
            atol: 1e-5,
        };
        assert!(rk45(&linear, &scalar(1.0), (0.0, 1.0), tol).is_err());
    }

    #[test]
    fn unrecorded_run_keeps_endpoints() {
        let tr = integrate_fixed(FixedStep::Heun, &linear, &scalar(1.0), (0.0, 1.0), 50, false)
            .unwrap();
        assert_eq!(tr.states.len(), 2);
        assert_eq!(tr.times, vec![0.0, 1.0]);
        let full = heun(&linear, &scalar(1.0), (0.0, 1.0), 50).unwrap();
        assert_eq!(tr.terminal(), full.terminal());
    }

    #[test]
    fn solver_names_and_dispatch() {
        for s in Solver::ALL {
            assert_eq!(s.name().parse::<Solver>().unwrap(), s);
        }
        assert!("rk4".parse::<Solver>().is_err());
        let e = Solver::Euler.solve(&linear, &scalar(1.0), (0.0, 1.0), 8, true).unwrap();
        assert_eq!(e, euler(&linear, &scalar(1.0), (0.0, 1.0), 8).unwrap());
        let r = Solver::Rk45.solve(&linear, &scalar(1.0), (0.0, 1.0), 0, true).unwrap();
        assert!(r.steps > 0);
        assert!(Solver::Heun.solve(&linear, &scalar(1.0), (0.0, 1.0), 0, true).is_err());
    }

    fn observed_order(method: FixedStep) -> f64 {
        let ns = [10usize, 20, 40, 80, 160];
        let pts: Vec<(f64, f64)> = ns
            .iter()
            .map(|&n| {
                let tr = integrate_fixed(method, &linear, &scalar(1.0), (0.0, 1.0), n, false).unwrap();
                let err = (tr.terminal().as_slice()[0] - std::f64::consts::E).abs();
                ((n as f64).ln(), err.ln())
            })
            .collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / 5.0;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / 5.0;
        let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        -num / den
    }

    #[test]
    fn convergence_orders() {
        assert!((observed_order(FixedStep::Euler) - 1.0).abs() < 0.1);
        assert!((observed_order(FixedStep::Heun) - 2.0).abs() < 0.1);
    }
}
