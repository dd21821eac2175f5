use std::fmt;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use straightfm::diffusion::{generate_coupling_revs, train_diffusion, ScoreModel};
use straightfm::evalmetrics::{straightness, transport_cost, wasserstein2_blocked, MetricKind, MetricReport};
use straightfm::experiments::{
    check_name, evaluate, needs_pipeline, pipeline_verdicts, run_light, run_pipeline, PipelineConfig, EXPERIMENTS,
};
use straightfm::flowmatch::{train_straightfm, CouplingMode, Variant, VelocityField};
use straightfm::numcore::{persist, Activation};
use straightfm::odesolve::{euler, Solver};
use straightfm::rng::Rng;
use straightfm::synthdata::{sample_data, sample_prior, DatasetKind, DatasetSpec};
use straightfm::training::TrainError;

use crate::config::{DatasetSection, RunConfig};
use crate::io;
use crate::{Command, Common, EvalArgs, ReproArgs, SampleArgs, TrainDiffusionArgs, TrainFmArgs};

/// Invalid invocation; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse<T: FromStr>(s: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    s.parse::<T>().map_err(|e| usage(e.to_string()))
}

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::TrainDiffusion(a) => train_diffusion_cmd(a),
        Command::TrainFm(a) => train_fm_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Repro(a) => repro_cmd(a),
    }
    .map(|()| ExitCode::SUCCESS)
    .or_else(|e| match e.downcast::<ReproFailed>() {
        Ok(_) => Ok(ExitCode::FAILURE),
        Err(e) => Err(e),
    })
}

/// Loads the config file and settles the seed: flag, then file, then
/// `$SFM_SEED`, then 0.
fn load(common: &Common) -> Result<(RunConfig, u64)> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    let seed = match (common.seed, cfg.seed) {
        (Some(s), _) | (None, Some(s)) => s,
        (None, None) => match std::env::var("SFM_SEED") {
            Ok(v) => v.trim().parse().map_err(|_| usage(format!("SFM_SEED is not an integer: '{v}'")))?,
            Err(_) => 0,
        },
    };
    cfg.seed = Some(seed);
    Ok((cfg, seed))
}

fn dataset(cfg: &mut RunConfig, flag: Option<&str>, required: bool) -> Result<Option<DatasetSpec>> {
    if let Some(name) = flag {
        cfg.dataset.name = Some(parse::<DatasetKind>(name)?);
    }
    let spec = cfg.dataset.resolve();
    match spec {
        Some(spec) => {
            spec.validate().map_err(|e| usage(e.to_string()))?;
            cfg.dataset = DatasetSection::from_spec(&spec);
            Ok(Some(spec))
        }
        None if required => Err(usage(format!(
            "missing --dataset (one of: {})",
            DatasetKind::ALL.map(DatasetKind::name).join(", ")
        ))),
        None => Ok(None),
    }
}

fn train_err<M>(e: TrainError<M>) -> anyhow::Error {
    match e {
        TrainError::Invalid(e) => usage(e.to_string()),
        other => anyhow::anyhow!("{other}"),
    }
}

fn save_net<T: straightfm::numcore::Scalar>(net: &straightfm::numcore::MlpParams<T>, path: &Path) -> Result<()> {
    io::ensure_parent(path)?;
    persist::save(net, path).with_context(|| format!("writing {}", path.display()))
}

/// Activation recorded in the resolved config written next to `model`.
fn model_activation(model: &Path, fallback: Activation, section: fn(&RunConfig) -> Activation) -> Activation {
    let path = io::sibling(model, "config.toml");
    fs::read_to_string(path)
        .ok()
        .and_then(|t| toml::from_str::<RunConfig>(&t).ok())
        .map_or(fallback, |c| section(&c))
}

fn train_diffusion_cmd(a: TrainDiffusionArgs) -> Result<()> {
    let (mut cfg, seed) = load(&a.common)?;
    let spec = dataset(&mut cfg, a.dataset.as_deref(), true)?.expect("required");
    let d = &mut cfg.diffusion;
    d.seed = seed;
    if let Some(v) = a.iterations {
        d.iterations = v;
    }
    if let Some(v) = a.batch {
        d.batch = v;
    }
    if let Some(v) = a.lr {
        d.lr = v;
    }
    d.validate().map_err(|e| usage(e.to_string()))?;
    io::ensure_parent(&a.out)?;
    cfg.write(&io::sibling(&a.out, "config.toml"))?;

    let trained = train_diffusion::<f64>(&spec, &cfg.schedule, &cfg.diffusion).map_err(train_err)?;
    save_net(&trained.model.net, &a.out)?;
    io::write_diffusion_log(&io::sibling(&a.out, "log.csv"), &trained.losses)?;
    if let Some(n) = a.couplings.filter(|&n| n > 0) {
        let z: straightfm::Matrix64 = sample_prior(&mut Rng::new(seed).fork(9), n, 2)?;
        let x1 = generate_coupling_revs(&trained.model, &cfg.schedule, &z, cfg.train.guide_steps)?;
        io::write_couplings(&io::sibling(&a.out, "couplings.csv"), &z, &x1)?;
    }
    eprintln!(
        "trained diffusion on {} for {} iterations; final loss {:.4}; wrote {}",
        spec.kind,
        trained.losses.len(),
        trained.losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn train_fm_cmd(a: TrainFmArgs) -> Result<()> {
    let (mut cfg, seed) = load(&a.common)?;
    let spec = dataset(&mut cfg, a.dataset.as_deref(), true)?.expect("required");
    let t = &mut cfg.train;
    t.seed = seed;
    if let Some(v) = &a.variant {
        t.variant = parse::<Variant>(v)?;
    }
    if let Some(v) = a.iterations {
        t.iterations = v;
    }
    if let Some(v) = a.batch {
        t.batch = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if a.lambda.is_some() {
        t.lambda = a.lambda;
    }
    if a.mix.is_some() {
        t.mix_ratio = a.mix;
    }
    match a.cache_size {
        Some(0) => t.coupling = CouplingMode::OnTheFly,
        Some(size) => t.coupling = CouplingMode::Cached { size },
        None => {}
    }
    t.validate().map_err(|e| usage(e.to_string()))?;
    let variant = t.variant;

    let guide = match (&a.guide, variant.needs_guide()) {
        (Some(path), true) => {
            let act = model_activation(path, cfg.diffusion.activation, |c| c.diffusion.activation);
            let net = persist::load::<f64>(path, act).with_context(|| format!("loading guide {}", path.display()))?;
            Some(ScoreModel::from_net(net)?)
        }
        (None, true) => return Err(usage(format!("variant {variant} requires --guide <diffusion weights>"))),
        (_, false) => None,
    };
    io::ensure_parent(&a.out)?;
    cfg.write(&io::sibling(&a.out, "config.toml"))?;

    let trained = train_straightfm(guide.as_ref(), &cfg.schedule, &spec, &cfg.train).map_err(train_err)?;
    save_net(&trained.velocity.net, &a.out)?;
    if variant == Variant::II {
        save_net(&trained.encoder.net, &io::sibling(&a.out, "encoder.sfmw"))?;
    }
    io::write_train_log(&io::sibling(&a.out, "log.csv"), &trained.log)?;
    eprintln!(
        "trained {variant} on {} for {} iterations; wrote {}",
        spec.kind,
        trained.log.len(),
        a.out.display()
    );
    Ok(())
}

fn load_velocity(model: &Path, cfg: &RunConfig) -> Result<VelocityField<f64>> {
    let act = model_activation(model, cfg.train.activation, |c| c.train.activation);
    let net = persist::load::<f64>(model, act).with_context(|| format!("loading model {}", model.display()))?;
    Ok(VelocityField::from_net(net)?)
}

#[derive(Serialize)]
struct SampleMeta {
    solver: Solver,
    /// Accepted steps actually taken.
    steps: usize,
    rejected: usize,
    evaluations: usize,
    n: usize,
    seed: u64,
}

/// Viewport half-width of sample plots; holds every default dataset.
const PLOT_BOUND: f64 = 10.0;

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let (mut cfg, seed) = load(&a.common)?;
    let s = &mut cfg.sample;
    if let Some(v) = &a.solver {
        s.solver = parse::<Solver>(v)?;
    }
    if let Some(v) = a.steps {
        s.steps = v;
    }
    if let Some(v) = a.n {
        s.n = v;
    }
    if s.solver != Solver::Rk45 && s.steps < 1 {
        return Err(usage(format!("--steps must be at least 1 for {}", s.solver)));
    }
    if s.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let (solver, steps, n) = (s.solver, s.steps, s.n);
    let velocity = load_velocity(&a.model, &cfg)?;

    let z: straightfm::Matrix64 = sample_prior(&mut Rng::new(seed).fork(1), n, velocity.dim())?;
    let traj = solver.solve(&velocity, &z, (0.0, 1.0), steps, a.trajectories)?;
    io::ensure_parent(&a.out)?;
    cfg.write(&io::sibling(&a.out, "config.toml"))?;
    io::write_samples(&a.out, traj.terminal())?;
    if a.trajectories {
        io::write_trajectories(&io::sibling(&a.out, "traj.csv"), &traj)?;
    }
    io::write_svg(
        &io::sibling(&a.out, "svg"),
        traj.terminal(),
        a.trajectories.then_some(&traj),
        PLOT_BOUND,
    )?;
    let meta = SampleMeta {
        solver,
        steps: traj.steps,
        rejected: traj.rejected,
        evaluations: traj.evaluations,
        n,
        seed,
    };
    fs::write(io::sibling(&a.out, "meta.toml"), toml::to_string(&meta)?)?;
    eprintln!("wrote {n} samples ({solver}, {} steps) to {}", traj.steps, a.out.display());
    Ok(())
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (mut cfg, seed) = load(&a.common)?;
    if let Some(m) = &a.metrics {
        cfg.eval.metrics = split_list(m).map(String::from).collect();
    }
    if let Some(s) = &a.steps_list {
        cfg.eval.steps_list = split_list(s).map(parse::<usize>).collect::<Result<_>>()?;
    }
    if let Some(n) = a.n {
        cfg.eval.n = n;
    }
    let metrics: Vec<MetricKind> = cfg.eval.metrics.iter().map(|m| parse::<MetricKind>(m)).collect::<Result<_>>()?;
    if metrics.is_empty() {
        return Err(usage("--metrics must name at least one metric (straightness, w2, cost)"));
    }
    let steps = cfg.eval.steps_list.clone();
    if steps.is_empty() || steps.contains(&0) {
        return Err(usage("--steps-list must contain positive step counts"));
    }
    let n = cfg.eval.n;
    if n == 0 {
        return Err(usage("--n must be positive"));
    }
    let spec = dataset(&mut cfg, a.dataset.as_deref(), metrics.contains(&MetricKind::W2))?;
    let velocity = load_velocity(&a.model, &cfg)?;

    let mut root = Rng::new(seed);
    let z: straightfm::Matrix64 = sample_prior(&mut root.fork(1), n, velocity.dim())?;
    let heldout = match spec {
        Some(spec) => Some(sample_data::<f64>(&mut root.fork(2), &spec, n)?),
        None => None,
    };
    let mut values = Vec::new();
    for &k in &steps {
        let traj = euler(&velocity, &z, (0.0, 1.0), k)?;
        for &m in &metrics {
            let v = match m {
                MetricKind::Straightness => straightness(&traj)?,
                MetricKind::W2 => wasserstein2_blocked(traj.terminal(), heldout.as_ref().expect("dataset resolved"))?,
                MetricKind::Cost => transport_cost(&z, traj.terminal())?,
            };
            values.push((m, k, v));
        }
    }
    let mut report = MetricReport::default();
    for &m in &metrics {
        for &(_, k, v) in values.iter().filter(|(mm, _, _)| *mm == m) {
            report.push(m.name(), Some(k), v, n, seed)?;
        }
    }
    io::ensure_parent(&a.out)?;
    cfg.write(&io::sibling(&a.out, "config.toml"))?;
    io::write_report(&a.out, &report)?;
    for r in &report.rows {
        eprintln!("{} steps={} value={:.6}", r.metric, r.steps.unwrap_or(0), r.value);
    }
    Ok(())
}

/// Raised when an experiment ran but a criterion failed.
#[derive(Debug)]
struct ReproFailed;

impl fmt::Display for ReproFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("one or more criteria failed")
    }
}

impl std::error::Error for ReproFailed {}

fn repro_cmd(a: ReproArgs) -> Result<()> {
    check_name(&a.name).map_err(|e| usage(e.to_string()))?;
    let names: Vec<&str> = if a.name == "all" { EXPERIMENTS.to_vec() } else { vec![a.name.as_str()] };
    let seed = a.seed.unwrap_or(0);
    let mut verdicts = Vec::new();
    for name in names.iter().filter(|n| !needs_pipeline(n)) {
        let v = run_light(name, seed)?;
        println!("{}", v.line());
        verdicts.push(v);
    }
    if names.iter().any(|n| needs_pipeline(n)) {
        let mut cfg = match (&a.config, a.smoke) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str::<PipelineConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            (None, true) => PipelineConfig::smoke(),
            (None, false) => PipelineConfig::default(),
        };
        if let Some(s) = a.seed {
            cfg.eval.seed = s;
        }
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        let pipeline = run_pipeline(&cfg, &mut |msg| eprintln!("{msg}"))?;
        let ev = evaluate(&pipeline, &cfg)?;
        for v in pipeline_verdicts(&ev, &pipeline) {
            if names.contains(&v.name) {
                println!("{}", v.line());
                verdicts.push(v);
            }
        }
    }
    if verdicts.iter().all(|v| v.pass) {
        Ok(())
    } else {
        bail!(ReproFailed)
    }
}
