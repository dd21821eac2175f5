use super::*;
use crate::diffusion::{NoiseSchedule, ScoreModel};
use crate::numcore::Dense;
use crate::synthdata::{DatasetKind, DatasetSpec};
use crate::numcore::gradcheck::{check_matrix, check_params};
use crate::training::TrainError;
use proptest::prelude::{prop_assert, proptest};

fn m(rows: &[&[f64]]) -> Matrix<f64> {
    Matrix::from_rows(rows).unwrap()
}

fn zero_u(x: &Matrix<f64>, _t: &[f64]) -> Result<Matrix<f64>> {
    Ok(Matrix::zeros(x.rows(), x.cols()))
}

fn small_velocity(seed: u64) -> VelocityField<f64> {
    VelocityField::new(2, &[6, 5], Activation::Silu, &mut Rng::new(seed)).unwrap()
}

fn small_encoder(seed: u64) -> CouplingEncoder<f64> {
    CouplingEncoder::new(2, &[5], Activation::Silu, &mut Rng::new(seed)).unwrap()
}

/// Encoder whose output is identically `μ = 0`, `logσ² = 0`.
fn standard_encoder() -> CouplingEncoder<f64> {
    let layer = Dense::new(Matrix::zeros(4, 2), Matrix::zeros(1, 4)).unwrap();
    CouplingEncoder::from_net(MlpParams::from_layers(vec![layer], Activation::Silu).unwrap()).unwrap()
}

#[test]
fn interpolate_endpoints_and_midpoint() {
    let a = m(&[&[0.0, 0.0]]);
    let b = m(&[&[2.0, 4.0]]);
    assert_eq!(interpolate(&a, &b, &[0.0]).unwrap(), a);
    assert_eq!(interpolate(&a, &b, &[1.0]).unwrap(), b);
    assert_eq!(interpolate(&a, &b, &[0.5]).unwrap(), m(&[&[1.0, 2.0]]));
    assert!(interpolate(&a, &b, &[1.5]).is_err());
    assert!(interpolate(&a, &b, &[-0.1]).is_err());
    assert!(interpolate(&a, &m(&[&[1.0]]), &[0.5]).is_err());
}

#[test]
fn revs_loss_examples() {
    let c = CouplingBatch::new(m(&[&[0.0, 0.0]]), m(&[&[1.0, 1.0]]), Direction::Revs).unwrap();
    assert_eq!(revs_loss(&zero_u, &c, &[0.3]).unwrap(), 2.0);

    let c = CouplingBatch::new(
        m(&[&[0.0, 0.0], &[1.0, 1.0]]),
        m(&[&[1.0, 0.0], &[1.0, 3.0]]),
        Direction::Revs,
    )
    .unwrap();
    assert_eq!(revs_loss(&zero_u, &c, &[0.2, 0.9]).unwrap(), 2.5);

    let disp = c.x_to.sub(&c.x_from);
    let oracle = move |_x: &Matrix<f64>, _t: &[f64]| Ok(disp.clone());
    assert_eq!(revs_loss(&oracle, &c, &[0.1, 0.7]).unwrap(), 0.0);
}

#[test]
fn forw_loss_examples() {
    let same = CouplingBatch::new(m(&[&[1.0, 1.0]]), m(&[&[1.0, 1.0]]), Direction::Forw).unwrap();
    assert_eq!(forw_loss(&zero_u, &same, &[0.4]).unwrap(), 0.0);
    let c = CouplingBatch::new(m(&[&[0.0, 0.0]]), m(&[&[3.0, 4.0]]), Direction::Forw).unwrap();
    assert_eq!(forw_loss(&zero_u, &c, &[0.4]).unwrap(), 25.0);
    let oracle = |x: &Matrix<f64>, _t: &[f64]| Ok(Matrix::from_fn(x.rows(), 2, |_, c| [3.0, 4.0][c]));
    assert_eq!(forw_loss(&oracle, &c, &[0.9]).unwrap(), 0.0);
}

#[test]
fn direction_tags_are_enforced() {
    let c = CouplingBatch::new(m(&[&[0.0, 0.0]]), m(&[&[1.0, 1.0]]), Direction::Forw).unwrap();
    assert!(revs_loss(&zero_u, &c, &[0.5]).is_err());
    let c = CouplingBatch { direction: Direction::Revs, ..c };
    assert!(forw_loss(&zero_u, &c, &[0.5]).is_err());
    assert!(CouplingBatch::new(m(&[&[0.0, 0.0]]), m(&[&[1.0]]), Direction::Revs).is_err());
}

#[test]
fn baseline_shares_the_formula() {
    let mut rng = Rng::new(3);
    let u = small_velocity(1);
    let x0: Matrix<f64> = rng.normal_matrix(16, 2);
    let x1: Matrix<f64> = rng.normal_matrix(16, 2);
    let t: Vec<f64> = rng.uniform_vec(16);
    let base = baseline_cfm_loss(&u, &x0, &x1, &t).unwrap();
    let r = revs_loss(&u, &CouplingBatch::new(x0.clone(), x1.clone(), Direction::Revs).unwrap(), &t).unwrap();
    let f = forw_loss(&u, &CouplingBatch::new(x0, x1, Direction::Forw).unwrap(), &t).unwrap();
    assert_eq!(base.to_bits(), r.to_bits());
    assert_eq!(base.to_bits(), f.to_bits());
    assert_eq!(baseline_cfm_loss(&zero_u, &m(&[&[0.0, 0.0]]), &m(&[&[1.0, 0.0]]), &[0.5]).unwrap(), 1.0);
}

#[test]
fn tape_and_value_losses_agree() {
    let mut rng = Rng::new(4);
    let u = small_velocity(2);
    let x0: Matrix<f64> = rng.normal_matrix(9, 2);
    let x1: Matrix<f64> = rng.normal_matrix(9, 2);
    let t: Vec<f64> = rng.uniform_vec(9);
    let mut tape = Tape::new();
    let vars = u.net.register(&mut tape);
    let a = tape.constant(x0.clone());
    let b = tape.constant(x1.clone());
    let l = fm_loss_on_tape(&mut tape, &u, &vars, a, b, &t).unwrap();
    let v = fm_loss_value(&u, &x0, &x1, &t).unwrap();
    assert!((tape.scalar(l) - v).abs() < 1e-13);
}

#[test]
fn kl_closed_forms() {
    assert_eq!(kl_gaussian(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
    assert!((kl_gaussian::<f64>(&[1.0, 0.0], &[0.0, 0.0]).unwrap() - 0.5).abs() < 1e-12);
    let want = 0.5 * (std::f64::consts::E - 2.0);
    assert!((kl_gaussian::<f64>(&[0.0], &[1.0]).unwrap() - want).abs() < 1e-12);
    assert!(kl_gaussian(&[0.0], &[1.0, 2.0]).is_err());
}

proptest! {
    #[test]
    fn kl_is_nonnegative_with_unique_zero(
        mu in proptest::collection::vec(-3.0f64..3.0, 1..5),
        lv_seed in proptest::collection::vec(-4.0f64..4.0, 5),
    ) {
        let lv = &lv_seed[..mu.len()];
        let kl = kl_gaussian(&mu, lv).unwrap();
        prop_assert!(kl >= 0.0);
        let at_origin = mu.iter().chain(lv).all(|v| *v == 0.0);
        if !at_origin {
            prop_assert!(kl > 0.0);
        }
    }
}

#[test]
fn reparameterization_mean_and_moments() {
    let mut rng = Rng::new(5);
    let q = small_encoder(3);
    let x1: Matrix<f64> = rng.normal_matrix(7, 2);
    let (x0, mu, _) = encode_coupling_forw_with(&q, &x1, &Matrix::zeros(7, 2)).unwrap();
    assert_eq!(x0, mu);

    let std = standard_encoder();
    let x1: Matrix<f64> = rng.normal_matrix(100_000, 2);
    let (x0, _, _) = encode_coupling_forw(&std, &x1, &mut rng).unwrap();
    for (mean, var) in x0.column_means().iter().zip(x0.column_variances()) {
        assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.02, "{mean} {var}");
    }
}

#[test]
fn reparameterization_passes_gradient_to_encoder() {
    // f(φ) = mean ‖x̃0‖² with x̃0 = μ_φ(x1) + σ_φ(x1) ε
    let mut rng = Rng::new(6);
    let q = small_encoder(4);
    let x1: Matrix<f64> = rng.normal_matrix(5, 2);
    let eps: Matrix<f64> = rng.normal_matrix(5, 2);
    let mut tape = Tape::new();
    let vars = q.net.register(&mut tape);
    let (x0, _, _) = q.sample_on_tape(&mut tape, &vars, &x1, &eps).unwrap();
    let sq = tape.square(x0);
    let l = tape.mean_rows_sum(sq);
    let g = tape.backward(l).unwrap();
    let grads = q.net.collect_grads(&g, &vars);
    assert!(grads.iter().any(|t| t.max_abs() > 0.0));
    let check = check_params(&q.net, &grads, |p| {
        let q = CouplingEncoder { net: p.clone() };
        let (x0, _, _) = encode_coupling_forw_with(&q, &x1, &eps).unwrap();
        x0.row_sq_norms().iter().sum::<f64>() / 5.0
    });
    assert!(check.passes(1e-3), "{check:?}");
}

#[test]
fn kl_tape_gradient_matches_finite_differences() {
    let mut rng = Rng::new(7);
    let mu: Matrix<f64> = rng.normal_matrix(4, 3);
    let lv: Matrix<f64> = rng.normal_matrix(4, 3);
    let mut tape = Tape::new();
    let mv = tape.param(mu.clone());
    let lvv = tape.param(lv.clone());
    let kl = kl_on_tape(&mut tape, mv, lvv).unwrap();
    let per_row = |mu: &Matrix<f64>, lv: &Matrix<f64>| {
        (0..4).map(|r| kl_gaussian(mu.row(r), lv.row(r)).unwrap()).sum::<f64>() / 4.0
    };
    assert!((tape.scalar(kl) - per_row(&mu, &lv)).abs() < 1e-12);
    let g = tape.backward(kl).unwrap();
    assert!(check_matrix(&mu, &g.wrt(mv), |x| per_row(x, &lv)).passes(1e-3));
    assert!(check_matrix(&lv, &g.wrt(lvv), |x| per_row(&mu, x)).passes(1e-3));
}

struct Instance {
    u: VelocityField<f64>,
    q: CouplingEncoder<f64>,
    revs: CouplingBatch<f64>,
    t_r: Vec<f64>,
    x1: Matrix<f64>,
    eps: Matrix<f64>,
    t_f: Vec<f64>,
}

fn instance(seed: u64) -> Instance {
    let mut rng = Rng::new(seed);
    let revs = CouplingBatch::new(rng.normal_matrix(4, 2), rng.normal_matrix(4, 2), Direction::Revs).unwrap();
    Instance {
        u: small_velocity(seed + 100),
        q: small_encoder(seed + 200),
        t_r: rng.uniform_vec(4),
        x1: rng.normal_matrix(3, 2),
        eps: rng.normal_matrix(3, 2),
        t_f: rng.uniform_vec(3),
        revs,
    }
}

fn objective_value(inst: &Instance, u: &MlpParams<f64>, q: &MlpParams<f64>, lambda: f64) -> f64 {
    let u = VelocityField { net: u.clone() };
    let q = CouplingEncoder { net: q.clone() };
    let mut tape = Tape::new();
    let uv = u.net.register_frozen(&mut tape);
    let qv = q.net.register_frozen(&mut tape);
    let forw = ForwInput::Learned { encoder: &q, vars: &qv, x1: &inst.x1, eps: &inst.eps };
    let obj = objective_on_tape(&mut tape, &u, &uv, Some((&inst.revs, &inst.t_r)), Some((forw, &inst.t_f)), lambda)
        .unwrap();
    tape.scalar(obj.total)
}

#[test]
fn combined_objective_gradients_match_finite_differences() {
    for seed in 0..5 {
        let inst = instance(seed);
        let mut tape = Tape::new();
        let uv = inst.u.net.register(&mut tape);
        let qv = inst.q.net.register(&mut tape);
        let forw = ForwInput::Learned { encoder: &inst.q, vars: &qv, x1: &inst.x1, eps: &inst.eps };
        let obj = objective_on_tape(&mut tape, &inst.u, &uv, Some((&inst.revs, &inst.t_r)), Some((forw, &inst.t_f)), 10.0)
            .unwrap();
        let g = tape.backward(obj.total).unwrap();
        let gu = inst.u.net.collect_grads(&g, &uv);
        let gq = inst.q.net.collect_grads(&g, &qv);
        assert!(check_params(&inst.u.net, &gu, |p| objective_value(&inst, p, &inst.q.net, 10.0)).passes(1e-3));
        assert!(check_params(&inst.q.net, &gq, |p| objective_value(&inst, &inst.u.net, p, 10.0)).passes(1e-3));
    }
}

#[test]
fn components_sum_to_total() {
    let inst = instance(9);
    let mut tape = Tape::new();
    let uv = inst.u.net.register(&mut tape);
    let qv = inst.q.net.register(&mut tape);
    let forw = ForwInput::Learned { encoder: &inst.q, vars: &qv, x1: &inst.x1, eps: &inst.eps };
    let obj = objective_on_tape(&mut tape, &inst.u, &uv, Some((&inst.revs, &inst.t_r)), Some((forw, &inst.t_f)), 10.0)
        .unwrap();
    let c = obj.components(&tape);
    assert!((c.total - combine(c.revs, c.kl, c.forw, 10.0)).abs() < 1e-12);
    assert_eq!(combine(2.5, 0.5, 1.0, 10.0), 8.5);
}

#[test]
fn lambda_zero_without_forward_side_reduces_to_revs() {
    let inst = instance(10);
    let mut tape = Tape::new();
    let uv = inst.u.net.register(&mut tape);
    let obj = objective_on_tape(&mut tape, &inst.u, &uv, Some((&inst.revs, &inst.t_r)), None, 0.0).unwrap();
    let r = revs_loss(&inst.u, &inst.revs, &inst.t_r).unwrap();
    assert!((tape.scalar(obj.total) - r).abs() < 1e-13);

    let empty = Matrix::<f64>::zeros(0, 2);
    let c = straightfm_loss(&inst.u, &inst.q, &inst.revs, &empty, 0.0, &mut Rng::new(1)).unwrap();
    assert_eq!(c.total, c.revs);
    assert_eq!(c.kl, 0.0);
}

#[test]
fn oracle_parts_give_zero_total() {
    // u reproduces each coupling's displacement and q is exactly N(0, I)
    let mut rng = Rng::new(11);
    let q = standard_encoder();
    let x1: Matrix<f64> = rng.normal_matrix(6, 2);
    let (x0, mu, lv) = encode_coupling_forw(&q, &x1, &mut rng).unwrap();
    let disp = x1.sub(&x0);
    let oracle = move |_x: &Matrix<f64>, _t: &[f64]| Ok(disp.clone());
    let t: Vec<f64> = rng.uniform_vec(6);
    let forw = forw_loss(&oracle, &CouplingBatch::new(x0, x1, Direction::Forw).unwrap(), &t).unwrap();
    let kl: f64 = (0..6).map(|r| kl_gaussian(mu.row(r), lv.row(r)).unwrap()).sum();
    let revs = CouplingBatch::new(m(&[&[0.0, 0.0]]), m(&[&[1.0, 2.0]]), Direction::Revs).unwrap();
    let oracle_r = |_x: &Matrix<f64>, _t: &[f64]| Ok(m(&[&[1.0, 2.0]]));
    let r = revs_loss(&oracle_r, &revs, &[0.3]).unwrap();
    assert_eq!(combine(r, kl, forw, 10.0), 0.0);
}

#[test]
fn both_sides_empty_rejected() {
    let inst = instance(12);
    let empty = CouplingBatch::new(Matrix::zeros(0, 2), Matrix::zeros(0, 2), Direction::Revs).unwrap();
    let mut tape = Tape::new();
    let uv = inst.u.net.register(&mut tape);
    assert!(objective_on_tape(&mut tape, &inst.u, &uv, Some((&empty, &[])), None, 0.0).is_err());
    assert!(objective_on_tape(&mut tape, &inst.u, &uv, Some((&inst.revs, &inst.t_r)), None, -1.0).is_err());
}

#[test]
fn variant_one_loss_ignores_encoder() {
    let inst = instance(13);
    let eval = |q: &CouplingEncoder<f64>| {
        let empty = Matrix::<f64>::zeros(0, 2);
        straightfm_loss(&inst.u, q, &inst.revs, &empty, 0.0, &mut Rng::new(2)).unwrap().total
    };
    let base = eval(&inst.q);
    let mut perturbed = inst.q.clone();
    for t in perturbed.net.tensors_mut() {
        for v in t.as_mut_slice() {
            *v += 0.37;
        }
    }
    assert_eq!(base.to_bits(), eval(&perturbed).to_bits());
}

fn tiny_config(variant: Variant, iterations: usize) -> TrainConfig {
    TrainConfig {
        variant,
        iterations,
        batch: 16,
        hidden: vec![8, 8],
        encoder_hidden: vec![8],
        coupling: CouplingMode::Cached { size: 64 },
        guide_steps: 4,
        ..TrainConfig::default()
    }
}

fn tiny_guide() -> ScoreModel<f64> {
    ScoreModel::new(2, &[8], Activation::Silu, &mut Rng::new(77)).unwrap()
}

#[test]
fn one_iteration_takes_one_step() {
    let spec = DatasetSpec::new(DatasetKind::EightGaussians);
    let sched = NoiseSchedule::default();
    let g = tiny_guide();
    for variant in [Variant::Baseline, Variant::I, Variant::II, Variant::III] {
        let out = train_straightfm(Some(&g), &sched, &spec, &tiny_config(variant, 1)).unwrap();
        assert_eq!(out.velocity_steps, 1, "{variant}");
        assert_eq!(out.encoder_steps, u64::from(variant == Variant::II), "{variant}");
        assert_eq!(out.log.len(), 1);
    }
}

#[test]
fn variant_one_never_updates_encoder() {
    let spec = DatasetSpec::new(DatasetKind::EightGaussians);
    let sched = NoiseSchedule::default();
    let g = tiny_guide();
    let cfg = tiny_config(Variant::I, 5);
    let out = train_straightfm(Some(&g), &sched, &spec, &cfg).unwrap();
    let mut init = Rng::new(cfg.seed).fork(1);
    let _ = VelocityField::<f64>::new(2, &cfg.hidden, cfg.activation, &mut init).unwrap();
    let q0 = CouplingEncoder::<f64>::new(2, &cfg.encoder_hidden, cfg.activation, &mut init).unwrap();
    assert_eq!(out.encoder, q0);
    assert!(out.log.iter().all(|r| r.forw == 0.0 && r.kl == 0.0));
}

#[test]
fn guide_required_for_guided_variants() {
    let spec = DatasetSpec::new(DatasetKind::EightGaussians);
    let sched = NoiseSchedule::default();
    for variant in [Variant::I, Variant::II, Variant::III] {
        let r = train_straightfm::<f64>(None, &sched, &spec, &tiny_config(variant, 1));
        assert!(matches!(r, Err(TrainError::Invalid(_))), "{variant}");
    }
    assert!(train_straightfm::<f64>(None, &sched, &spec, &tiny_config(Variant::Baseline, 2)).is_ok());
}

#[test]
fn config_validation() {
    let mut c = tiny_config(Variant::I, 1);
    c.mix_ratio = Some(0.5);
    assert!(c.validate().is_err());
    let mut c = tiny_config(Variant::II, 1);
    c.lambda = Some(-1.0);
    assert!(c.validate().is_err());
    let c = tiny_config(Variant::II, 1);
    assert_eq!(c.lambda(), 10.0);
    assert_eq!(c.split(), (8, 8));
    let c = TrainConfig { batch: 255, ..tiny_config(Variant::II, 1) };
    assert_eq!(c.split(), (128, 127));
    assert_eq!(tiny_config(Variant::I, 1).lambda(), 0.0);
}

#[test]
fn training_is_deterministic_and_on_the_fly_mode_runs() {
    let spec = DatasetSpec::new(DatasetKind::TwoMoons);
    let sched = NoiseSchedule::default();
    let g = tiny_guide();
    let cfg = tiny_config(Variant::II, 4);
    let a = train_straightfm(Some(&g), &sched, &spec, &cfg).unwrap();
    let b = train_straightfm(Some(&g), &sched, &spec, &cfg).unwrap();
    assert_eq!(a.velocity, b.velocity);
    assert_eq!(a.encoder, b.encoder);
    assert_eq!(a.log, b.log);

    let cfg = TrainConfig { coupling: CouplingMode::OnTheFly, ..cfg };
    let c = train_straightfm(Some(&g), &sched, &spec, &cfg).unwrap();
    assert_eq!(c.log.len(), 4);
}

#[test]
fn variant_three_forward_side_has_no_kl() {
    let spec = DatasetSpec::new(DatasetKind::EightGaussians);
    let out = train_straightfm(Some(&tiny_guide()), &NoiseSchedule::default(), &spec, &tiny_config(Variant::III, 3))
        .unwrap();
    for r in &out.log {
        assert_eq!(r.kl, 0.0);
        assert!(r.forw > 0.0 && r.revs > 0.0);
        assert!((r.total - (r.revs + r.forw)).abs() < 1e-12);
    }
}
