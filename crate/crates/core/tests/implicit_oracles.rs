use causal_align::autodiff::{Activation, Head, MlpSpec, OptimizerKind, ParamVector, Target};
use causal_align::counterfactual::{generate_counterfactual, CfObjective, Domain, SolverSettings};
use causal_align::implicit_align::{
    alignment_loss, epoch_csv, flat_counterfactual, implicit_grad, implicit_grad_at, total_objective_flat, train_epochs,
    AlignItem, CfHyper, FlatConfig, ImplicitConfig, InitKind,
};
use causal_align::linsolve::FdConfig;
use causal_align::synthdata::Sample;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::logistic::{cosine, max_coord_rel_err, LogisticCf};

fn exact() -> ImplicitConfig {
    ImplicitConfig { fd: FdConfig { damping: 0.0, ..FdConfig::default() }, cg_tol: 1e-5, cg_max_iter: None }
}

#[test]
fn logistic_implicit_gradient_matches_resolve_fd() {
    // 14 inputs → 30 parameters.
    for seed in 0..5 {
        let p = LogisticCf::random(14, seed);
        assert_eq!(p.theta.len(), 30);
        let x_star = p.solve(&p.theta, 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let c: Vec<f64> = (0..p.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let outer = |x: &[f64]| x.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let want = p.resolve_fd(&outer, 1e-4, 1e-12);

        let obj = CfObjective::new(&p.spec, &p.theta, &p.x0, Target::Class(p.target), p.alpha, p.delta).unwrap();
        let got = implicit_grad_at(&obj, &x_star, &c, &exact()).unwrap();
        assert!(got.valid(), "{:?} {:?}", got.invalid, got.solve.as_ref().map(|s| (s.iterations, s.residual_norm)));
        let cos = cosine(&got.gradient, &want);
        let rel = max_coord_rel_err(&got.gradient, &want, 1e-6);
        assert!(cos >= 0.99 && rel <= 5e-2, "seed {seed}: cosine {cos}, coordinate error {rel}");
    }
}

#[test]
fn library_solver_reaches_the_newton_point() {
    let p = LogisticCf::random(14, 3);
    let want = p.solve(&p.theta, 1e-12);
    let obj = CfObjective::new(&p.spec, &p.theta, &p.x0, Target::Class(p.target), p.alpha, p.delta).unwrap();
    // Value-monotone descent cannot resolve gradients much below √(ε·L) ≈ 1e-7.
    let settings = SolverSettings { max_steps: 200_000, lr: 0.1, tol: 2e-7, tau: 1e-3, domain: Domain::Unbounded };
    let cf = generate_counterfactual(&obj, &settings).unwrap();
    assert!(cf.stationary, "gradient norm {} after {} steps, trace tail {:?}", cf.grad_norm, cf.steps, &cf.loss_trace[cf.loss_trace.len().saturating_sub(4)..]);
    let err = cf.point.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-5, "{err}");

    // Through the public wrapper, with the alignment loss as the outer objective.
    let mask = vec![false; p.dim()];
    let loss = alignment_loss(&[AlignItem { point: &cf.point, origin: &p.x0, allowed: &mask }]).unwrap();
    let g = implicit_grad(&obj, &cf, &loss.outer_grads[0], &exact()).unwrap();
    let signs: Vec<f64> = loss.outer_grads[0].clone();
    let outer = |x: &[f64]| x.iter().zip(&signs).zip(&p.x0).map(|((a, s), o)| s * (a - o)).sum::<f64>();
    let want = p.resolve_fd(&outer, 1e-4, 1e-12);
    assert!(cosine(&g.gradient, &want) >= 0.99);
    assert!(max_coord_rel_err(&g.gradient, &want, 1e-6) <= 5e-2);
}

fn tiny_samples(d: usize, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
            let y = usize::from(x[1] + x[2] > 1.0);
            let mask = (0..d).map(|j| j == 1 || j == 2).collect();
            Sample { x, y, mask, attributes: vec![] }
        })
        .collect()
}

fn small_model(d: usize, seed: u64) -> (MlpSpec, Vec<f64>) {
    let spec = MlpSpec::new(vec![d, 3, 2], Activation::Tanh, Head::Softmax2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = ParamVector::init_random(&spec, &mut rng).into_values().iter().map(|v| 2.0 * v).collect();
    (spec, theta)
}

#[test]
fn lambda_zero_is_plain_cross_entropy() {
    let (spec, theta) = small_model(4, 1);
    let data = tiny_samples(4, 6, 2);
    let batch: Vec<&Sample> = data.iter().collect();
    let cf = CfHyper::default();
    let plain = total_objective_flat(&spec, &theta, &batch, 0.0, &cf, &ImplicitConfig::default(), None).unwrap();
    assert_eq!(plain.value, plain.ce);
    assert_eq!(plain.stats.aligned, 0);

    // Mean CE by central differences.
    let ce = |t: &[f64]| total_objective_flat(&spec, t, &batch, 0.0, &cf, &ImplicitConfig::default(), None).unwrap().ce;
    for k in 0..theta.len() {
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[k] += 1e-6;
        dn[k] -= 1e-6;
        let fd = (ce(&up) - ce(&dn)) / 2e-6;
        assert!((fd - plain.grad[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", plain.grad[k]);
    }
}

#[test]
fn full_masks_leave_only_cross_entropy() {
    let (spec, theta) = small_model(4, 5);
    let mut data = tiny_samples(4, 5, 6);
    data.iter_mut().for_each(|s| s.mask = vec![true; 4]);
    let batch: Vec<&Sample> = data.iter().collect();
    let cf = CfHyper::default();
    let cfg = ImplicitConfig::default();
    let plain = total_objective_flat(&spec, &theta, &batch, 0.0, &cf, &cfg, None).unwrap();
    let aligned = total_objective_flat(&spec, &theta, &batch, 1.0, &cf, &cfg, None).unwrap();
    assert_eq!(aligned.align, 0.0);
    assert_eq!(aligned.grad, plain.grad);
    assert_eq!(aligned.value, plain.value);
}

#[test]
fn total_gradient_matches_pipeline_fd() {
    let (spec, theta) = small_model(3, 11);
    let data = tiny_samples(3, 3, 12);
    let batch: Vec<&Sample> = data.iter().collect();
    let cf = CfHyper { alpha: 0.5, steps: 100_000, tol: 2e-7, ..CfHyper::default() };
    let cfg = exact();
    let lambda = 1.0;
    let full = total_objective_flat(&spec, &theta, &batch, lambda, &cf, &cfg, None).unwrap();
    assert_eq!(full.stats.skipped, 0, "{:?}", full.stats);
    let value = |t: &[f64]| total_objective_flat(&spec, t, &batch, lambda, &cf, &cfg, None).unwrap().value;
    let h = 1e-3;
    let fd: Vec<f64> = (0..theta.len())
        .map(|k| {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[k] += h;
            dn[k] -= h;
            (value(&up) - value(&dn)) / (2.0 * h)
        })
        .collect();
    let num: f64 = fd.iter().zip(&full.grad).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(num / den <= 5e-2, "relative error {}", num / den);
}

fn hand_step_config() -> FlatConfig {
    FlatConfig {
        hidden: vec![],
        init: InitKind::Random,
        lambda: 0.0,
        optimizer: OptimizerKind::Gd,
        lr: 0.5,
        batch_size: 4,
        epochs: 1,
        ..FlatConfig::default()
    }
}

#[test]
fn one_gd_epoch_is_one_hand_computed_step() {
    // Logistic 2→2 model from zero weights: p = (½, ½), so the CE gradient
    // of sample (x, y) is (p − e_y) ⊗ x for weights and p − e_y for biases.
    let cfg = hand_step_config();
    let spec = cfg.spec(2).unwrap();
    let data = vec![
        Sample { x: vec![1.0, 0.0], y: 1, mask: vec![true, false], attributes: vec![] },
        Sample { x: vec![0.0, 2.0], y: 0, mask: vec![true, false], attributes: vec![] },
        Sample { x: vec![1.0, 1.0], y: 1, mask: vec![true, false], attributes: vec![] },
    ];
    let (theta, log) = train_epochs(&cfg, &spec, &data, ParamVector::zeros(&spec)).unwrap();
    let mut grad = [0.0; 6];
    for s in &data {
        for c in 0..2 {
            let r = 0.5 - if c == s.y { 1.0 } else { 0.0 };
            grad[c * 2] += r * s.x[0] / 3.0;
            grad[c * 2 + 1] += r * s.x[1] / 3.0;
            grad[4 + c] += r / 3.0;
        }
    }
    for k in 0..6 {
        assert!((theta.values()[k] + cfg.lr * grad[k]).abs() < 1e-15, "{k}");
    }
    assert!((log[0].ce_loss - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn empty_training_set_is_rejected() {
    let cfg = hand_step_config();
    let spec = cfg.spec(2).unwrap();
    assert!(train_epochs(&cfg, &spec, &[], ParamVector::zeros(&spec)).is_err());
}

#[test]
fn training_is_deterministic() {
    let cfg = FlatConfig {
        hidden: vec![3],
        init: InitKind::Random,
        lambda: 1.0,
        batch_size: 4,
        epochs: 2,
        align_per_batch: Some(2),
        cf: CfHyper { steps: 50, ..CfHyper::default() },
        seed: 9,
        ..FlatConfig::default()
    };
    let data = tiny_samples(4, 10, 3);
    let run = || {
        let (spec, theta0) = causal_align::implicit_align::init_flat(&cfg, 4).unwrap();
        let (theta, log) = train_epochs(&cfg, &spec, &data, theta0).unwrap();
        (theta.into_values(), epoch_csv(&log, false).render("x"))
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(la, lb);
}

#[test]
fn flat_counterfactual_flips_toward_other_class() {
    let (spec, theta) = small_model(4, 21);
    let s = &tiny_samples(4, 1, 22)[0];
    let cf = flat_counterfactual(&spec, &theta, s, &CfHyper::default()).unwrap();
    assert_eq!(cf.origin, s.x);
}

fn instance(rng: &mut ChaCha8Rng, d: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let x: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
    let m: Vec<bool> = (0..d).map(|_| rng.gen_bool(0.4)).collect();
    let x_star = x.iter().zip(&m).map(|(v, &on)| if on { v + rng.gen_range(-1.0..1.0) } else { *v }).collect();
    (x_star, x, m)
}

proptest! {
    #[test]
    fn confined_modifications_cost_nothing(seed in any::<u64>(), n in 1usize..6, d in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<_> = (0..n).map(|_| instance(&mut rng, d)).collect();
        let items: Vec<AlignItem> = data.iter().map(|(p, o, m)| AlignItem { point: p, origin: o, allowed: m }).collect();
        let l = alignment_loss(&items).unwrap();
        prop_assert_eq!(l.value, 0.0);
        prop_assert!(l.outer_grads.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn off_mask_modification_is_charged(seed in any::<u64>(), d in 1usize..20, bump in 1e-9f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut p, o, mut m) = instance(&mut rng, d);
        let j = rng.gen_range(0..d);
        m[j] = false;
        p[j] = o[j] - bump;
        let l = alignment_loss(&[AlignItem { point: &p, origin: &o, allowed: &m }]).unwrap();
        prop_assert!(l.value > 0.0);
        prop_assert_eq!(l.outer_grads[0][j], -1.0);
    }

    #[test]
    fn matches_straight_line_evaluation(seed in any::<u64>(), n in 1usize..5, d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<(Vec<f64>, Vec<f64>, Vec<bool>)> = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let p = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let m = (0..d).map(|_| rng.gen_bool(0.5)).collect();
                (p, x, m)
            })
            .collect();
        let items: Vec<AlignItem> = data.iter().map(|(p, o, m)| AlignItem { point: p, origin: o, allowed: m }).collect();
        let mut total = 0.0;
        for (p, o, m) in &data {
            for j in 0..d {
                total += (p[j] - o[j]).abs() * if m[j] { 0.0 } else { 1.0 };
            }
        }
        let l = alignment_loss(&items).unwrap();
        prop_assert!((l.value - total / n as f64).abs() <= 1e-12);
        prop_assert!(l.value >= 0.0);
    }
}
