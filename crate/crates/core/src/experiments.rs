//! Scripted end-to-end experiments: the gradient, solver and metric checks,
//! and the diffusion → baseline / StraightFM-II training pipeline with its
//! evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    dsm_loss_on_tape, dsm_loss_value, generate_coupling_iii, generate_coupling_revs, train_diffusion,
    DiffusionConfig, NoiseSchedule, ScoreModel,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{
    compare_outputs, straightness, transport_cost, wasserstein2, wasserstein2_blocked, Similarity,
};
use crate::flowmatch::{
    fm_loss_on_tape, forw_loss, kl_gaussian, kl_on_tape, objective_on_tape, revs_loss, straightfm_loss, train_straightfm,
    train_with_cache, CouplingBatch, CouplingCache, CouplingEncoder, CouplingMode, Direction, ForwInput,
    TrainConfig, TrainedFlow, Variant, VelocityField,
};
use crate::numcore::gradcheck::{check_matrix, check_params, GradCheck};
use crate::numcore::{Activation, Matrix, MlpParams, Tape};
use crate::odesolve::{euler, integrate_fixed, rk45, FixedStep, Tolerance};
use crate::rng::Rng;
use crate::synthdata::{sample_data, sample_prior, DatasetKind, DatasetSpec};
use crate::training::TrainError;

/// Experiments runnable by name, in criterion order.
pub const EXPERIMENTS: [&str; 9] = [
    "gradient-fidelity",
    "closed-forms",
    "solver-orders",
    "w2-oracle",
    "straightness-ordering",
    "few-step-quality",
    "coupling-similarity",
    "transport-cost",
    "variant-contracts",
];

/// Experiments that need the trained pipeline.
pub fn needs_pipeline(name: &str) -> bool {
    matches!(
        name,
        "straightness-ordering" | "few-step-quality" | "coupling-similarity" | "transport-cost"
    )
}

pub fn check_name(name: &str) -> Result<()> {
    if EXPERIMENTS.contains(&name) || name == "all" {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "unknown experiment '{name}'; valid names: {}, all",
            EXPERIMENTS.join(", ")
        )))
    }
}

/// Outcome of one criterion.
#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Self { name, pass, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn train_err<M>(e: TrainError<M>) -> Error {
    match e {
        TrainError::Invalid(e) => e,
        TrainError::Diverged { iteration, reason, .. } => {
            Error::NumericFault(format!("training diverged at iteration {iteration}: {reason}"))
        }
    }
}

/// Gradient checks of every loss on `instances` random small problems.
pub fn gradient_fidelity(instances: usize, seed: u64) -> Result<Verdict> {
    let start = Instant::now();
    let sched = NoiseSchedule::default();
    let mut worst = GradCheck::default();
    let mut rng = Rng::new(seed);
    for _ in 0..instances {
        let act = if rng.below(2) == 0 { Activation::Silu } else { Activation::Gelu };
        let n = 2 + rng.below(4);

        let score = ScoreModel::<f64>::new(2, &[5, 4], act, &mut rng)?;
        let x1: Matrix<f64> = rng.normal_matrix(n, 2);
        let t: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.01, 1.0)).collect();
        let eps: Matrix<f64> = rng.normal_matrix(n, 2);
        let mut tape = Tape::new();
        let vars = score.net.register(&mut tape);
        let l = dsm_loss_on_tape(&mut tape, &score, &vars, &sched, &x1, &t, &eps, None)?;
        let g = score.net.collect_grads(&tape.backward(l)?, &vars);
        worst = worst.merge(check_params(&score.net, &g, |p| {
            let m = ScoreModel { net: p.clone() };
            dsm_loss_value(&m, &sched, &x1, &t, &eps).unwrap_or(f64::NAN)
        }));

        let u = VelocityField::<f64>::new(2, &[5, 4], act, &mut rng)?;
        let q = CouplingEncoder::<f64>::new(2, &[4], act, &mut rng)?;
        let revs = CouplingBatch::new(rng.normal_matrix(n, 2), rng.normal_matrix(n, 2), Direction::Revs)?;
        let forw = CouplingBatch::new(rng.normal_matrix(n, 2), rng.normal_matrix(n, 2), Direction::Forw)?;
        let tr: Vec<f64> = rng.uniform_vec(n);
        let tf: Vec<f64> = rng.uniform_vec(n);
        for (batch, times) in [(&revs, &tr), (&forw, &tf)] {
            let mut tape = Tape::new();
            let uv = u.net.register(&mut tape);
            let (a, b) = (tape.constant(batch.x_from.clone()), tape.constant(batch.x_to.clone()));
            let l = fm_loss_on_tape(&mut tape, &u, &uv, a, b, times)?;
            let g = u.net.collect_grads(&tape.backward(l)?, &uv);
            worst = worst.merge(check_params(&u.net, &g, |p| {
                let v = VelocityField { net: p.clone() };
                match batch.direction {
                    Direction::Revs => revs_loss(&v, batch, times),
                    Direction::Forw => forw_loss(&v, batch, times),
                }
                .unwrap_or(f64::NAN)
            }));
        }

        let mu: Matrix<f64> = rng.normal_matrix(n, 2);
        let lv: Matrix<f64> = rng.normal_matrix(n, 2);
        let mut tape = Tape::new();
        let (mv, lvv) = (tape.param(mu.clone()), tape.param(lv.clone()));
        let kl = kl_on_tape(&mut tape, mv, lvv)?;
        let g = tape.backward(kl)?;
        let kl_mean = |mu: &Matrix<f64>, lv: &Matrix<f64>| {
            (0..n).map(|r| kl_gaussian(mu.row(r), lv.row(r)).unwrap_or(f64::NAN)).sum::<f64>() / n as f64
        };
        worst = worst.merge(check_matrix(&mu, &g.wrt(mv), |x| kl_mean(x, &lv)));
        worst = worst.merge(check_matrix(&lv, &g.wrt(lvv), |x| kl_mean(&mu, x)));

        let x1f: Matrix<f64> = rng.normal_matrix(n, 2);
        let epsf: Matrix<f64> = rng.normal_matrix(n, 2);
        let combined = |u: &MlpParams<f64>, q: &MlpParams<f64>, register: bool| -> Result<(f64, Vec<Matrix<f64>>, Vec<Matrix<f64>>)> {
            let (u, q) = (VelocityField { net: u.clone() }, CouplingEncoder { net: q.clone() });
            let mut tape = Tape::new();
            let (uv, qv) = if register {
                (u.net.register(&mut tape), q.net.register(&mut tape))
            } else {
                (u.net.register_frozen(&mut tape), q.net.register_frozen(&mut tape))
            };
            let forw = ForwInput::Learned { encoder: &q, vars: &qv, x1: &x1f, eps: &epsf };
            let obj = objective_on_tape(&mut tape, &u, &uv, Some((&revs, &tr)), Some((forw, &tf)), 10.0)?;
            let value = tape.scalar(obj.total);
            if !register {
                return Ok((value, vec![], vec![]));
            }
            let g = tape.backward(obj.total)?;
            Ok((value, u.net.collect_grads(&g, &uv), q.net.collect_grads(&g, &qv)))
        };
        let (_, gu, gq) = combined(&u.net, &q.net, true)?;
        let value = |a: &MlpParams<f64>, b: &MlpParams<f64>| combined(a, b, false).map(|r| r.0).unwrap_or(f64::NAN);
        worst = worst.merge(check_params(&u.net, &gu, |p| value(p, &q.net)));
        worst = worst.merge(check_params(&q.net, &gq, |p| value(&u.net, p)));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Verdict::new(
        "gradient-fidelity",
        worst.passes(1e-3) && secs < 10.0,
        format!(
            "max relative error {:.3e} over {} coordinates on {instances} instances (< 1e-3), {secs:.2}s (< 10s)",
            worst.max_rel_error, worst.coordinates
        ),
    ))
}

/// KL closed forms, Euler on `u = x`, and RK45 against `e`.
pub fn closed_forms() -> Result<Verdict> {
    let e = std::f64::consts::E;
    let kl = [
        kl_gaussian(&[0.0, 0.0], &[0.0, 0.0])?,
        kl_gaussian(&[1.0f64, 0.0], &[0.0, 0.0])? - 0.5,
        kl_gaussian(&[0.0f64], &[1.0])? - 0.5 * (e - 2.0),
    ];
    let linear = |x: &Matrix<f64>, _t: f64| Ok(x.clone());
    let one = Matrix::filled(1, 1, 1.0);
    let eu = euler(&linear, &one, (0.0, 1.0), 100)?.terminal().as_slice()[0] - 1.01f64.powi(100);
    let rk = rk45(&linear, &one, (0.0, 1.0), Tolerance::default())?.terminal().as_slice()[0] - e;
    let kl_max = kl.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(Verdict::new(
        "closed-forms",
        kl_max <= 1e-12 && eu.abs() <= 1e-12 && rk.abs() <= 1e-4,
        format!("kl max error {kl_max:.2e}; euler error {:.2e}; rk45 error {:.2e}", eu.abs(), rk.abs()),
    ))
}

/// Least-squares slope of `log err` against `log N`, negated.
pub fn observed_order(method: FixedStep) -> Result<f64> {
    let linear = |x: &Matrix<f64>, _t: f64| Ok(x.clone());
    let one = Matrix::filled(1, 1, 1.0);
    let mut pts = Vec::new();
    for n in [10usize, 20, 40, 80, 160] {
        let tr = integrate_fixed(method, &linear, &one, (0.0, 1.0), n, false)?;
        let err = (tr.terminal().as_slice()[0] - std::f64::consts::E).abs();
        pts.push(((n as f64).ln(), err.ln()));
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(-num / den)
}

pub fn solver_orders() -> Result<Verdict> {
    let e = observed_order(FixedStep::Euler)?;
    let h = observed_order(FixedStep::Heun)?;
    Ok(Verdict::new(
        "solver-orders",
        (e - 1.0).abs() <= 0.1 && (h - 2.0).abs() <= 0.1,
        format!("euler slope {e:.4} (1.0 ± 0.1), heun slope {h:.4} (2.0 ± 0.1)"),
    ))
}

fn brute_force_w2(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    fn go(k: usize, perm: &mut [usize], a: &Matrix<f64>, b: &Matrix<f64>, best: &mut f64) {
        if k == perm.len() {
            let c: f64 = perm
                .iter()
                .enumerate()
                .map(|(i, &j)| a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .sum();
            *best = best.min(c);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            go(k + 1, perm, a, b, best);
            perm.swap(k, i);
        }
    }
    let mut perm: Vec<usize> = (0..a.rows()).collect();
    let mut best = f64::INFINITY;
    go(0, &mut perm, a, b, &mut best);
    (best / a.rows() as f64).sqrt()
}

/// Hungarian W2 against exhaustive permutation search.
pub fn w2_oracle(instances: usize, seed: u64) -> Result<Verdict> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = 1 + rng.below(7);
        let a: Matrix<f64> = rng.normal_matrix(n, 2);
        let b: Matrix<f64> = rng.normal_matrix(n, 2);
        worst = worst.max((wasserstein2(&a, &b)? - brute_force_w2(&a, &b)).abs());
    }
    Ok(Verdict::new(
        "w2-oracle",
        worst <= 1e-9,
        format!("max |hungarian − brute force| {worst:.2e} on {instances} instances, n ≤ 7"),
    ))
}

/// Variant I ignores the encoder bit for bit; variant III noise is N(0, I).
pub fn variant_contracts(seed: u64) -> Result<Verdict> {
    let mut rng = Rng::new(seed);
    let u = VelocityField::<f64>::new(2, &[16, 16], Activation::Silu, &mut rng)?;
    let q = CouplingEncoder::<f64>::new(2, &[8], Activation::Silu, &mut rng)?;
    let revs = CouplingBatch::new(rng.normal_matrix(32, 2), rng.normal_matrix(32, 2), Direction::Revs)?;
    let none = Matrix::zeros(0, 2);
    let base = straightfm_loss(&u, &q, &revs, &none, 0.0, &mut Rng::new(seed))?.total;
    let mut invariant = true;
    for k in 0..8 {
        let mut p = q.clone();
        for t in p.net.tensors_mut() {
            for v in t.as_mut_slice() {
                *v += rng.normal() * (k + 1) as f64;
            }
        }
        let l = straightfm_loss(&u, &p, &revs, &none, 0.0, &mut Rng::new(seed))?.total;
        invariant &= l.to_bits() == base.to_bits();
    }
    let spec = DatasetSpec::new(DatasetKind::EightGaussians);
    let x1: Matrix<f64> = sample_data(&mut rng, &spec, 100_000)?;
    let x0 = generate_coupling_iii(&NoiseSchedule::default(), &x1, &mut rng)?;
    let means = x0.column_means();
    let vars = x0.column_variances();
    let mut cov = 0.0;
    for r in 0..x0.rows() {
        cov += (x0.row(r)[0] - means[0]) * (x0.row(r)[1] - means[1]);
    }
    cov /= (x0.rows() - 1) as f64;
    let moments_ok =
        means.iter().all(|m| m.abs() <= 0.02) && vars.iter().all(|v| (v - 1.0).abs() <= 0.02) && cov.abs() <= 0.02;
    Ok(Verdict::new(
        "variant-contracts",
        invariant && moments_ok,
        format!(
            "variant I bit-invariant: {invariant}; variant III mean ({:.4}, {:.4}) var ({:.4}, {:.4}) cov {cov:.4}",
            means[0], means[1], vars[0], vars[1]
        ),
    ))
}

/// Sample counts and seed for the pipeline evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    /// Rows integrated for straightness.
    pub trajectories: usize,
    /// Held-out data rows for W2.
    pub heldout: usize,
    /// Shared noise rows for coupling similarity.
    pub similarity: usize,
    /// Rows for the transport-cost comparison.
    pub cost: usize,
    /// Euler step counts for W2.
    pub steps: Vec<usize>,
    /// Euler steps for straightness trajectories and the reference map.
    pub fine_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            trajectories: 1000,
            heldout: 2048,
            similarity: 2560,
            cost: 10_000,
            steps: vec![1, 3, 100],
            fine_steps: 100,
        }
    }
}

/// Everything the training pipeline needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub dataset: DatasetSpec,
    pub schedule: NoiseSchedule,
    pub diffusion: DiffusionConfig,
    pub baseline: TrainConfig,
    pub straight: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::new(DatasetKind::EightGaussians),
            schedule: NoiseSchedule::default(),
            diffusion: DiffusionConfig { seed: 1, ..DiffusionConfig::default() },
            baseline: TrainConfig { seed: 2, ..TrainConfig::for_variant(Variant::Baseline) },
            straight: TrainConfig { seed: 3, ..TrainConfig::for_variant(Variant::II) },
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// A few hundred iterations and small evaluation sets; exercises the
    /// whole pipeline in seconds without meaningful results.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.diffusion.iterations = 200;
        c.diffusion.hidden = vec![16, 16];
        for t in [&mut c.baseline, &mut c.straight] {
            t.iterations = 100;
            t.batch = 64;
            t.hidden = vec![16, 16];
            t.encoder_hidden = vec![8];
            t.coupling = CouplingMode::Cached { size: 512 };
            t.guide_steps = 10;
        }
        c.eval = EvalConfig { trajectories: 64, heldout: 128, similarity: 128, cost: 256, ..EvalConfig::default() };
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.schedule.validate()?;
        self.diffusion.validate()?;
        self.baseline.validate()?;
        self.straight.validate()?;
        if self.baseline.variant != Variant::Baseline {
            return Err(Error::invalid("pipeline baseline must use the baseline variant"));
        }
        let e = &self.eval;
        if e.trajectories == 0 || e.heldout == 0 || e.similarity == 0 || e.cost == 0 || e.fine_steps == 0 {
            return Err(Error::invalid("evaluation sample counts and steps must be positive"));
        }
        if e.steps.is_empty() || e.steps.contains(&0) {
            return Err(Error::invalid("evaluation step list must be non-empty and positive"));
        }
        Ok(())
    }
}

/// Trained models produced by [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub guide: ScoreModel<f64>,
    pub baseline: TrainedFlow<f64>,
    pub straight: TrainedFlow<f64>,
    pub seconds: f64,
}

/// Trains the diffusion guide, the baseline and the StraightFM model.
/// `progress` receives one line per stage.
pub fn run_pipeline(config: &PipelineConfig, progress: &mut dyn FnMut(&str)) -> Result<Pipeline> {
    config.validate()?;
    let start = Instant::now();
    progress(&format!("training diffusion guide ({} iterations)", config.diffusion.iterations));
    let guide = train_diffusion::<f64>(&config.dataset, &config.schedule, &config.diffusion)
        .map_err(train_err)?
        .model;
    progress(&format!("training baseline ({} iterations)", config.baseline.iterations));
    let baseline = train_straightfm::<f64>(None, &config.schedule, &config.dataset, &config.baseline).map_err(train_err)?;
    let s = &config.straight;
    let cache = match (s.variant.needs_guide(), s.coupling) {
        (true, CouplingMode::Cached { size }) => {
            progress(&format!("generating {size} diffusion couplings"));
            let mut rng = Rng::new(s.seed).fork(5);
            Some(CouplingCache::generate(&guide, &config.schedule, size, s.guide_steps, &mut rng)?)
        }
        _ => None,
    };
    progress(&format!("training StraightFM-{} ({} iterations)", s.variant, s.iterations));
    let straight = train_with_cache(Some(&guide), cache.as_ref(), &config.schedule, &config.dataset, s).map_err(train_err)?;
    Ok(Pipeline { guide, baseline, straight, seconds: start.elapsed().as_secs_f64() })
}

/// Euler samples from `velocity` starting at `x0`.
pub fn generate(velocity: &VelocityField<f64>, x0: &Matrix<f64>, steps: usize) -> Result<Matrix<f64>> {
    Ok(integrate_fixed(FixedStep::Euler, velocity, x0, (0.0, 1.0), steps, false)?.into_terminal())
}

/// Metrics of one flow model.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowEval {
    pub straightness: f64,
    /// `(steps, W2 to held-out data)`.
    pub w2: Vec<(usize, f64)>,
    /// Cost of the one-step map `z → z + u(z, 0)`.
    pub one_step_cost: f64,
    /// Cost of re-pairing the same outputs with the noise at random.
    pub independent_cost: f64,
}

impl FlowEval {
    pub fn w2_at(&self, steps: usize) -> Option<f64> {
        self.w2.iter().find(|(s, _)| *s == steps).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub baseline: FlowEval,
    pub straight: FlowEval,
    /// Diffusion PF-ODE map against the StraightFM map on shared noise.
    pub similarity: Similarity<f64>,
}

pub fn evaluate_flow(velocity: &VelocityField<f64>, spec: &DatasetSpec, eval: &EvalConfig) -> Result<FlowEval> {
    let mut root = Rng::new(eval.seed);
    let (mut traj_rng, mut data_rng, mut gen_rng, mut cost_rng, mut perm_rng) =
        (root.fork(1), root.fork(2), root.fork(3), root.fork(4), root.fork(5));

    let z: Matrix<f64> = sample_prior(&mut traj_rng, eval.trajectories, 2)?;
    let traj = euler(velocity, &z, (0.0, 1.0), eval.fine_steps)?;
    let s = straightness(&traj)?;

    let heldout: Matrix<f64> = sample_data(&mut data_rng, spec, eval.heldout)?;
    let z: Matrix<f64> = sample_prior(&mut gen_rng, eval.heldout, 2)?;
    let mut w2 = Vec::new();
    for &n in &eval.steps {
        w2.push((n, wasserstein2_blocked(&generate(velocity, &z, n)?, &heldout)?));
    }

    let z: Matrix<f64> = sample_prior(&mut cost_rng, eval.cost, 2)?;
    let y = velocity.one_step(&z)?;
    let one_step_cost = transport_cost(&z, &y)?;
    let independent_cost = transport_cost(&z, &y.select_rows(&perm_rng.permutation(y.rows())))?;
    Ok(FlowEval { straightness: s, w2, one_step_cost, independent_cost })
}

pub fn evaluate(pipeline: &Pipeline, config: &PipelineConfig) -> Result<Evaluation> {
    let eval = &config.eval;
    let baseline = evaluate_flow(&pipeline.baseline.velocity, &config.dataset, eval)?;
    let straight = evaluate_flow(&pipeline.straight.velocity, &config.dataset, eval)?;
    let mut root = Rng::new(eval.seed);
    let mut noise_rng = root.fork(6);
    let mut perm_rng = root.fork(7);
    let z: Matrix<f64> = sample_prior(&mut noise_rng, eval.similarity, 2)?;
    let pf = generate_coupling_revs(&pipeline.guide, &config.schedule, &z, config.straight.guide_steps)?;
    let fm = generate(&pipeline.straight.velocity, &z, eval.fine_steps)?;
    let similarity = compare_outputs(&pf, &fm, &mut perm_rng)?;
    Ok(Evaluation { baseline, straight, similarity })
}

/// Verdicts for the four pipeline criteria.
pub fn pipeline_verdicts(ev: &Evaluation, pipeline: &Pipeline) -> Vec<Verdict> {
    let (b, s) = (&ev.baseline, &ev.straight);
    let ratio = s.straightness / b.straightness;
    let straight_v = Verdict::new(
        "straightness-ordering",
        ratio <= 0.7,
        format!(
            "S baseline {:.5}, S StraightFM-II {:.5}, ratio {ratio:.3} (≤ 0.70); pipeline {:.0}s",
            b.straightness, s.straightness, pipeline.seconds
        ),
    );

    let get = |f: &FlowEval, n| f.w2_at(n).unwrap_or(f64::NAN);
    let (b1, b3, s1, s3, s100) = (get(b, 1), get(b, 3), get(s, 1), get(s, 3), get(s, 100));
    let few = Verdict::new(
        "few-step-quality",
        s1 < b1 && s3 < b3 && s3 <= 1.2 * s100,
        format!(
            "W2 N=1 {s1:.4} vs baseline {b1:.4}; N=3 {s3:.4} vs baseline {b3:.4}; StraightFM N=3/N=100 {:.3} (≤ 1.20)",
            s3 / s100
        ),
    );

    let sim = &ev.similarity;
    let similarity = Verdict::new(
        "coupling-similarity",
        sim.mse < 0.5 * sim.baseline_mse,
        format!(
            "mse {:.4}, permuted baseline {:.4}, ratio {:.3} (< 0.5)",
            sim.mse,
            sim.baseline_mse,
            sim.mse / sim.baseline_mse
        ),
    );

    let cost = Verdict::new(
        "transport-cost",
        s.one_step_cost <= 1.01 * s.independent_cost,
        format!(
            "one-step cost {:.4}, independent pairing {:.4}, ratio {:.3} (≤ 1.01)",
            s.one_step_cost,
            s.independent_cost,
            s.one_step_cost / s.independent_cost
        ),
    );
    vec![straight_v, few, similarity, cost]
}

/// Runs one named light experiment.
pub fn run_light(name: &str, seed: u64) -> Result<Verdict> {
    match name {
        "gradient-fidelity" => gradient_fidelity(20, seed),
        "closed-forms" => closed_forms(),
        "solver-orders" => solver_orders(),
        "w2-oracle" => w2_oracle(50, seed),
        "variant-contracts" => variant_contracts(seed),
        other => Err(Error::invalid(format!("'{other}' is not a light experiment"))),
    }
}
