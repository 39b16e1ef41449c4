//! Alignment penalty on counterfactual edits and its parameter gradient.
//!
//! The penalty `L = (1/n) Σᵢ ‖(x*ᵢ − xᵢ) ⊙ (1 − mᵢ)‖₁` depends on θ only
//! through the counterfactual `x*(θ) = argmin_x T(x, θ)`. At a stationary
//! point the implicit function theorem gives, in adjoint form,
//!
//! ```text
//! (H + γI) u = ∂L/∂x*,      ∇θL = −(∂x ∇θT)ᵀ u
//! ```
//!
//! with `H = ∂x∇xT`. Both products are finite differences of first-order
//! gradients; the solve is conjugate gradient.

use std::time::Instant;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    build_mlp, cross_entropy, Activation, Head, MlpSpec, Optimizer, OptimizerKind, ParamVector, Tape, Target, Weights,
};
use crate::counterfactual::{
    generate_counterfactual, CfObjective, CounterfactualResult, Domain, InnerObjective, SolverSettings, DEFAULT_DELTA,
    DEFAULT_STEPS, DEFAULT_TAU, DEFAULT_TOL,
};
use crate::error::{Error, Result};
use crate::linsolve::{conjugate_gradient, mixed_vp_fd, FdConfig, FdHessian, LinearSolveResult};
use crate::report::{fmt_f, Csv};
use crate::synthdata::Sample;

/// One term of the alignment penalty: a counterfactual, its origin, and
/// the coordinates it may change freely (mask or annotation vector).
#[derive(Clone, Copy, Debug)]
pub struct AlignItem<'a> {
    pub point: &'a [f64],
    pub origin: &'a [f64],
    pub allowed: &'a [bool],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentLoss {
    pub value: f64,
    pub contributions: Vec<f64>,
    /// ∂L/∂x*ᵢ per item, including the 1/n factor.
    pub outer_grads: Vec<Vec<f64>>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn alignment_loss(items: &[AlignItem<'_>]) -> Result<AlignmentLoss> {
    let n = items.len();
    let mut contributions = Vec::with_capacity(n);
    let mut outer_grads = Vec::with_capacity(n);
    for (i, it) in items.iter().enumerate() {
        if it.point.len() != it.origin.len() || it.allowed.len() != it.origin.len() {
            return Err(Error::Shape(format!(
                "alignment item {i}: point {}, origin {}, mask {}",
                it.point.len(),
                it.origin.len(),
                it.allowed.len()
            )));
        }
        let mut c = 0.0;
        let mut g = vec![0.0; it.point.len()];
        for j in 0..it.point.len() {
            if it.allowed[j] {
                continue;
            }
            let d = it.point[j] - it.origin[j];
            c += d.abs();
            g[j] = sign(d) / n as f64;
        }
        contributions.push(c);
        outer_grads.push(g);
    }
    let value = if n == 0 { 0.0 } else { contributions.iter().sum::<f64>() / n as f64 };
    Ok(AlignmentLoss { value, contributions, outer_grads })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImplicitConfig {
    pub fd: FdConfig,
    pub cg_tol: f64,
    /// Defaults to the search dimension.
    pub cg_max_iter: Option<usize>,
}

impl Default for ImplicitConfig {
    fn default() -> Self {
        ImplicitConfig { fd: FdConfig::default(), cg_tol: 1e-5, cg_max_iter: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Invalid {
    NonStationary,
    NotConverged,
    Indefinite,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitGradResult {
    pub gradient: Vec<f64>,
    pub adjoint: Vec<f64>,
    pub solve: Option<LinearSolveResult>,
    pub invalid: Option<Invalid>,
}

impl ImplicitGradResult {
    pub fn valid(&self) -> bool {
        self.invalid.is_none()
    }

    fn rejected(dim_x: usize, dim_theta: usize, why: Invalid, solve: Option<LinearSolveResult>) -> Self {
        ImplicitGradResult { gradient: vec![0.0; dim_theta], adjoint: vec![0.0; dim_x], solve, invalid: Some(why) }
    }
}

/// Implicit gradient at a stationary point `s_star` of `obj`, for an outer
/// loss with gradient `outer` in search coordinates.
pub fn implicit_grad_at(
    obj: &dyn InnerObjective,
    s_star: &[f64],
    outer: &[f64],
    cfg: &ImplicitConfig,
) -> Result<ImplicitGradResult> {
    let n = obj.dim();
    if s_star.len() != n || outer.len() != n {
        return Err(Error::Shape(format!("point {} / outer gradient {} for dimension {n}", s_star.len(), outer.len())));
    }
    let m = obj.theta().len();
    if outer.iter().all(|&v| v == 0.0) {
        return Ok(ImplicitGradResult { gradient: vec![0.0; m], adjoint: vec![0.0; n], solve: None, invalid: None });
    }
    let grad_fn = |s: &[f64]| obj.grad(s);
    let hessian = FdHessian::new(&grad_fn, s_star, cfg.fd)?;
    let solve = match conjugate_gradient(&hessian, outer, cfg.cg_tol, cfg.cg_max_iter.unwrap_or(n)) {
        Ok(r) => r,
        Err(Error::Indefinite { curvature, iteration }) => {
            debug!("implicit gradient skipped: curvature {curvature:e} at CG iteration {iteration}");
            return Ok(ImplicitGradResult::rejected(n, m, Invalid::Indefinite, None));
        }
        Err(e) => return Err(e),
    };
    let grad_theta = |s: &[f64], t: &[f64]| obj.grad_theta(s, t);
    let mixed = mixed_vp_fd(&grad_theta, s_star, obj.theta(), &solve.solution, &cfg.fd)?;
    let gradient: Vec<f64> = mixed.iter().map(|v| -v).collect();
    let invalid = (!solve.converged).then_some(Invalid::NotConverged);
    Ok(ImplicitGradResult { gradient, adjoint: solve.solution.clone(), solve: Some(solve), invalid })
}

/// Implicit gradient for a counterfactual of `obj`, with the outer gradient
/// given in input coordinates.
pub fn implicit_grad(
    obj: &CfObjective<'_>,
    cf: &CounterfactualResult,
    outer_x: &[f64],
    cfg: &ImplicitConfig,
) -> Result<ImplicitGradResult> {
    if !cf.stationary {
        return Ok(ImplicitGradResult::rejected(obj.dim(), obj.theta().len(), Invalid::NonStationary, None));
    }
    let jac = obj.reparam().jacobian_diag(&cf.search_point);
    let outer: Vec<f64> = outer_x.iter().zip(&jac).map(|(g, j)| g * j).collect();
    if cf.active.is_empty() {
        return implicit_grad_at(obj, &cf.search_point, &outer, cfg);
    }
    // Coordinates pinned on the box do not move with θ; differentiate the
    // problem restricted to the free ones.
    let n = obj.dim();
    let free: Vec<usize> = (0..n).filter(|j| !cf.active.contains(j)).collect();
    let restricted = Restricted { inner: obj, base: &cf.search_point, free: &free };
    let s_free: Vec<f64> = free.iter().map(|&j| cf.search_point[j]).collect();
    let outer_free: Vec<f64> = free.iter().map(|&j| outer[j]).collect();
    let mut r = implicit_grad_at(&restricted, &s_free, &outer_free, cfg)?;
    let mut adjoint = vec![0.0; n];
    for (k, &j) in free.iter().enumerate() {
        adjoint[j] = r.adjoint[k];
    }
    r.adjoint = adjoint;
    Ok(r)
}

/// `obj` as a function of the coordinates in `free`, the others held at `base`.
struct Restricted<'a> {
    inner: &'a dyn InnerObjective,
    base: &'a [f64],
    free: &'a [usize],
}

impl Restricted<'_> {
    fn embed(&self, s: &[f64]) -> Vec<f64> {
        let mut full = self.base.to_vec();
        for (k, &j) in self.free.iter().enumerate() {
            full[j] = s[k];
        }
        full
    }
}

impl InnerObjective for Restricted<'_> {
    fn dim(&self) -> usize {
        self.free.len()
    }

    fn theta(&self) -> &[f64] {
        self.inner.theta()
    }

    fn value(&self, s: &[f64]) -> Result<f64> {
        self.inner.value(&self.embed(s))
    }

    fn value_grad(&self, s: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.inner.value_grad(&self.embed(s))?;
        Ok((v, self.free.iter().map(|&j| g[j]).collect()))
    }

    fn grad_theta(&self, s: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.inner.grad_theta(&self.embed(s), theta)
    }
}

/// Counterfactual-search hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CfHyper {
    pub alpha: f64,
    pub delta: f64,
    pub steps: usize,
    pub lr: f64,
    pub tol: f64,
    pub tau: f64,
}

impl Default for CfHyper {
    fn default() -> Self {
        CfHyper { alpha: 0.2, delta: DEFAULT_DELTA, steps: DEFAULT_STEPS, lr: 0.1, tol: DEFAULT_TOL, tau: DEFAULT_TAU }
    }
}

impl CfHyper {
    pub fn settings(&self) -> SolverSettings {
        SolverSettings { max_steps: self.steps, lr: self.lr, tol: self.tol, tau: self.tau, domain: Domain::Unbounded }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitKind {
    Random,
    /// One hidden detector per input coordinate (see [`ParamVector::init_pixelwise`]).
    Pixelwise { gain: f64, threshold: f64, jitter: f64 },
}

impl InitKind {
    pub fn init(&self, spec: &MlpSpec, rng: &mut ChaCha8Rng) -> Result<ParamVector> {
        match *self {
            InitKind::Random => Ok(ParamVector::init_random(spec, rng)),
            InitKind::Pixelwise { gain, threshold, jitter } => {
                ParamVector::init_pixelwise(spec, gain, threshold, jitter, rng)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatConfig {
    pub hidden: Vec<usize>,
    pub init: InitKind,
    pub lambda: f64,
    pub cf: CfHyper,
    pub implicit: ImplicitConfig,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Alignment is evaluated on at most this many samples of each batch.
    pub align_per_batch: Option<usize>,
    pub seed: u64,
}

impl Default for FlatConfig {
    fn default() -> Self {
        FlatConfig {
            hidden: vec![256],
            init: InitKind::Pixelwise { gain: 5.0, threshold: 0.9, jitter: 0.01 },
            lambda: 1.0,
            cf: CfHyper::default(),
            implicit: ImplicitConfig::default(),
            optimizer: OptimizerKind::Adam,
            lr: 0.003,
            batch_size: 64,
            epochs: 10,
            align_per_batch: Some(16),
            seed: 0,
        }
    }
}

impl FlatConfig {
    pub fn spec(&self, input_dim: usize) -> Result<MlpSpec> {
        let mut widths = vec![input_dim];
        widths.extend(&self.hidden);
        widths.push(2);
        MlpSpec::new(widths, Activation::Tanh, Head::Softmax2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.implicit.fd.validate()
    }
}

/// Label cross-entropy of one sample and its gradient over θ.
pub fn ce_value_grad(spec: &MlpSpec, theta: &[f64], x: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::with_capacity(theta.len() + 4 * x.len());
    let tv = tape.leaves(theta);
    let xv = tape.constants(x);
    let nodes = build_mlp(&mut tape, spec, Weights::Vars(tv), xv)?;
    let ce = cross_entropy(&mut tape, nodes.outputs, &Target::Class(y))?;
    Ok((tape.value(ce), tape.backward(ce)?))
}

/// Counterfactual of a flat classifier toward the flipped label.
pub fn flat_counterfactual(
    spec: &MlpSpec,
    theta: &[f64],
    sample: &Sample,
    cf: &CfHyper,
) -> Result<CounterfactualResult> {
    let obj = CfObjective::new(spec, theta, &sample.x, Target::Class(1 - sample.y), cf.alpha, cf.delta)?;
    generate_counterfactual(&obj, &cf.settings())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub aligned: usize,
    pub skipped: usize,
    pub cg_iterations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatObjective {
    pub value: f64,
    pub ce: f64,
    pub align: f64,
    pub grad: Vec<f64>,
    pub stats: BatchStats,
}

/// `CE + λ·L_align` over a batch with its gradient. The alignment term uses
/// the first `align_limit` samples (all when `None`); samples whose implicit
/// gradient is invalid add to the value but not to the gradient.
pub fn total_objective_flat(
    spec: &MlpSpec,
    theta: &[f64],
    batch: &[&Sample],
    lambda: f64,
    cf: &CfHyper,
    implicit: &ImplicitConfig,
    align_limit: Option<usize>,
) -> Result<FlatObjective> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; theta.len()];
    let mut ce = 0.0;
    for s in batch {
        let (v, g) = ce_value_grad(spec, theta, &s.x, s.y)?;
        ce += v / n;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b / n);
    }
    let mut stats = BatchStats::default();
    let mut align = 0.0;
    if lambda > 0.0 {
        let take = align_limit.unwrap_or(batch.len()).min(batch.len());
        let chosen = &batch[..take];
        let cfs = chosen.iter().map(|s| flat_counterfactual(spec, theta, s, cf)).collect::<Result<Vec<_>>>()?;
        let items: Vec<AlignItem<'_>> = chosen
            .iter()
            .zip(&cfs)
            .map(|(s, c)| AlignItem { point: &c.point, origin: &s.x, allowed: &s.mask })
            .collect();
        let loss = alignment_loss(&items)?;
        align = loss.value;
        stats.aligned = take;
        for ((s, c), outer) in chosen.iter().zip(&cfs).zip(&loss.outer_grads) {
            let obj = CfObjective::new(spec, theta, &s.x, Target::Class(1 - s.y), cf.alpha, cf.delta)?;
            let ig = implicit_grad(&obj, c, outer, implicit)?;
            if let Some(solve) = &ig.solve {
                stats.cg_iterations.push(solve.iterations);
            }
            if let Some(why) = ig.invalid {
                debug!("alignment gradient skipped for one sample: {why:?}");
                stats.skipped += 1;
                continue;
            }
            grad.iter_mut().zip(&ig.gradient).for_each(|(a, b)| *a += lambda * b);
        }
    }
    Ok(FlatObjective { value: ce + lambda * align, ce, align, grad, stats })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce_loss: f64,
    pub align_loss: f64,
    pub skipped: usize,
    pub cg_iters_mean: f64,
    pub seconds: f64,
}

pub const EPOCH_HEADER: &str = "epoch,ce_loss,align_loss,skipped_samples,cg_iters_mean,seconds";

/// Metric log rows; with `timing = false` the wall-clock column is `NA`
/// so that repeated runs produce identical files.
pub fn epoch_csv(records: &[EpochRecord], timing: bool) -> Csv {
    let mut csv = Csv::new(EPOCH_HEADER);
    for r in records {
        csv.push(format!(
            "{},{},{},{},{},{}",
            r.epoch,
            fmt_f(r.ce_loss),
            fmt_f(r.align_loss),
            r.skipped,
            fmt_f(r.cg_iters_mean),
            if timing { format!("{:.3}", r.seconds) } else { "NA".into() }
        ));
    }
    csv
}

pub fn mean_usize(v: &[usize]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<usize>() as f64 / v.len() as f64
    }
}

pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn init_flat(cfg: &FlatConfig, input_dim: usize) -> Result<(MlpSpec, ParamVector)> {
    let spec = cfg.spec(input_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = cfg.init.init(&spec, &mut rng)?;
    Ok((spec, params))
}

/// Mini-batch training of a flat classifier with the alignment term.
pub fn train_epochs(
    cfg: &FlatConfig,
    spec: &MlpSpec,
    train: &[Sample],
    theta0: ParamVector,
) -> Result<(ParamVector, Vec<EpochRecord>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let mut theta = theta0;
    let mut opt = Optimizer::new(cfg.optimizer, theta.len());
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let (mut ce_sum, mut align_sum, mut aligned) = (0.0, 0.0, 0usize);
        let mut skipped = 0;
        let mut cg = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let obj = total_objective_flat(
                spec,
                theta.values(),
                &batch,
                cfg.lambda,
                &cfg.cf,
                &cfg.implicit,
                cfg.align_per_batch,
            )?;
            ce_sum += obj.ce * batch.len() as f64;
            align_sum += obj.align * obj.stats.aligned as f64;
            aligned += obj.stats.aligned;
            skipped += obj.stats.skipped;
            cg.extend(obj.stats.cg_iterations);
            opt.step(theta.values_mut(), &obj.grad, cfg.lr)?;
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            ce_loss: ce_sum / train.len() as f64,
            align_loss: if aligned == 0 { 0.0 } else { align_sum / aligned as f64 },
            skipped,
            cg_iters_mean: mean_usize(&cg),
            seconds: start.elapsed().as_secs_f64(),
        };
        debug!("epoch {} ce {:.4} align {:.4} skipped {}", rec.epoch, rec.ce_loss, rec.align_loss, rec.skipped);
        log.push(rec);
    }
    Ok((theta, log))
}
