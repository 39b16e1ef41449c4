//! Counterfactual search: the smallest input change that moves a fixed
//! network toward a target.
//!
//! The inner objective is `T(s; θ) = CE(f_θ(x(s)), target) + α·d(x(s), x₀)`
//! where `s` are search coordinates: `x = s` for image-like inputs, or
//! `x = sigmoid(s)` for attribute vectors living in the probability cube.
//! Every consumer of the inner argmin (the solver here, the implicit
//! gradient, the oracles) works in search coordinates.

use crate::autodiff::{
    build_mlp, cross_entropy, pseudo_huber, pseudo_huber_distance, sigmoid, MlpSpec, Tape, Target, VarRange,
    Weights, PROB_CLAMP,
};
use crate::error::{Error, Result};

pub const DEFAULT_DELTA: f64 = 0.05;
pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-5;
pub const DEFAULT_TAU: f64 = 1e-3;
pub const MAX_HALVINGS: usize = 20;
/// Distance of the attribute search box from 0 and 1, in probability.
pub const ATTRIBUTE_MARGIN: f64 = 1e-3;
/// Cap on step growth between iterations, as a multiple of the initial step.
const MAX_STEP_GROWTH: f64 = 1e6;
const ARMIJO: f64 = 1e-4;

/// A smooth objective over search coordinates, parameterized by θ.
pub trait InnerObjective {
    fn dim(&self) -> usize;
    fn theta(&self) -> &[f64];
    fn value(&self, s: &[f64]) -> Result<f64>;
    fn value_grad(&self, s: &[f64]) -> Result<(f64, Vec<f64>)>;
    /// ∇θT at `s` for an arbitrary θ of the objective's shape.
    fn grad_theta(&self, s: &[f64], theta: &[f64]) -> Result<Vec<f64>>;

    fn grad(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_grad(s)?.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reparam {
    /// `x = s`.
    Identity,
    /// `x = sigmoid(s)`, keeping points inside the open probability cube.
    Logit,
}

impl Reparam {
    pub fn to_input(self, s: &[f64]) -> Vec<f64> {
        match self {
            Reparam::Identity => s.to_vec(),
            Reparam::Logit => s.iter().map(|&v| sigmoid(v)).collect(),
        }
    }

    pub fn to_search(self, x: &[f64]) -> Vec<f64> {
        match self {
            Reparam::Identity => x.to_vec(),
            Reparam::Logit => x.iter().map(|&p| logit(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))).collect(),
        }
    }

    /// Derivative of the input coordinate with respect to the search coordinate.
    pub fn jacobian_diag(self, s: &[f64]) -> Vec<f64> {
        match self {
            Reparam::Identity => vec![1.0; s.len()],
            Reparam::Logit => s.iter().map(|&v| {
                let p = sigmoid(v);
                p * (1.0 - p)
            }).collect(),
        }
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Feasible region in search coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum Domain {
    Unbounded,
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl Domain {
    pub fn uniform_box(dim: usize, lo: f64, hi: f64) -> Domain {
        Domain::Box { lo: vec![lo; dim], hi: vec![hi; dim] }
    }

    /// Search-space box matching the probability clamp under [`Reparam::Logit`].
    pub fn logit_cube(dim: usize) -> Domain {
        Self::uniform_box(dim, logit(PROB_CLAMP), logit(1.0 - PROB_CLAMP))
    }

    /// Logit box for attribute searches: probabilities in
    /// `[ATTRIBUTE_MARGIN, 1 − ATTRIBUTE_MARGIN]`, widened per coordinate to
    /// contain the origin `a_hat`.
    pub fn attribute_box(a_hat: &[f64]) -> Domain {
        let z: Vec<f64> = Reparam::Logit.to_search(a_hat);
        let (edge_lo, edge_hi) = (logit(ATTRIBUTE_MARGIN), logit(1.0 - ATTRIBUTE_MARGIN));
        Domain::Box { lo: z.iter().map(|&v| v.min(edge_lo)).collect(), hi: z.iter().map(|&v| v.max(edge_hi)).collect() }
    }

    /// Coordinates of `s` sitting on a face of the box.
    pub fn active(&self, s: &[f64]) -> Vec<usize> {
        match self {
            Domain::Unbounded => Vec::new(),
            Domain::Box { lo, hi } => (0..s.len()).filter(|&j| s[j] <= lo[j] || s[j] >= hi[j]).collect(),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if let Domain::Box { lo, hi } = self {
            if lo.len() != dim || hi.len() != dim {
                return Err(Error::Shape(format!("box of dimension {} for a {dim}-dimensional search", lo.len())));
            }
            if let Some(j) = (0..dim).find(|&j| !(lo[j] <= hi[j])) {
                return Err(Error::InvalidArgument(format!("empty box on coordinate {j}: [{}, {}]", lo[j], hi[j])));
            }
        }
        Ok(())
    }

    fn project(&self, s: &mut [f64]) {
        if let Domain::Box { lo, hi } = self {
            for j in 0..s.len() {
                s[j] = s[j].clamp(lo[j], hi[j]);
            }
        }
    }

    /// Norm of the projected-gradient step `s − P(s − g)`; equals ‖g‖ in the interior.
    fn stationarity(&self, s: &[f64], g: &[f64]) -> f64 {
        match self {
            Domain::Unbounded => g.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Domain::Box { lo, hi } => (0..s.len())
                .map(|j| {
                    let moved = (s[j] - g[j]).clamp(lo[j], hi[j]);
                    (s[j] - moved).powi(2)
                })
                .sum::<f64>()
                .sqrt(),
        }
    }
}

/// Cross-entropy toward `target` plus the α-weighted pseudo-Huber distance
/// from `origin`, for an MLP with parameters `theta`.
#[derive(Clone, Debug)]
pub struct CfObjective<'a> {
    spec: &'a MlpSpec,
    theta: &'a [f64],
    origin: Vec<f64>,
    target: Target,
    alpha: f64,
    delta: f64,
    reparam: Reparam,
    input_mask: Option<Vec<f64>>,
}

impl<'a> CfObjective<'a> {
    pub fn new(
        spec: &'a MlpSpec,
        theta: &'a [f64],
        origin: &[f64],
        target: Target,
        alpha: f64,
        delta: f64,
    ) -> Result<Self> {
        if theta.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for `{spec}` which needs {}",
                theta.len(),
                spec.param_count()
            )));
        }
        if origin.len() != spec.input_dim() {
            return Err(Error::Shape(format!("origin has length {}, network takes {}", origin.len(), spec.input_dim())));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        if !(delta > 0.0) {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
        }
        Ok(CfObjective {
            spec,
            theta,
            origin: origin.to_vec(),
            target,
            alpha,
            delta,
            reparam: Reparam::Identity,
            input_mask: None,
        })
    }

    pub fn with_reparam(mut self, reparam: Reparam) -> Self {
        self.reparam = reparam;
        self
    }

    /// Multiplies inputs elementwise by `mask` before the network sees them.
    pub fn with_input_mask(mut self, mask: Vec<f64>) -> Result<Self> {
        if mask.len() != self.origin.len() {
            return Err(Error::Shape(format!("input mask has length {}, expected {}", mask.len(), self.origin.len())));
        }
        self.input_mask = Some(mask);
        Ok(self)
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn reparam(&self) -> Reparam {
        self.reparam
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn target(&self) -> &Target {
        &self.target
    }

    /// `(CE, d)` at search point `s`.
    pub fn parts(&self, s: &[f64]) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let (ce, d) = self.record(&mut tape, s, false, Weights::Fixed(self.theta))?;
        Ok((tape.value(ce), tape.value(d)))
    }

    fn record<'t>(
        &self,
        tape: &mut Tape<'t>,
        s: &[f64],
        s_is_leaf: bool,
        weights: Weights<'t>,
    ) -> Result<(crate::autodiff::Var, crate::autodiff::Var)> {
        if s.len() != self.origin.len() {
            return Err(Error::Shape(format!("search point has length {}, expected {}", s.len(), self.origin.len())));
        }
        let sv = if s_is_leaf { tape.leaves(s) } else { tape.constants(s) };
        let x = match self.reparam {
            Reparam::Identity => sv,
            Reparam::Logit => {
                let nodes: Vec<_> = sv.iter().map(|v| tape.sigmoid(v)).collect();
                contiguous(&nodes)
            }
        };
        let input = match &self.input_mask {
            None => x,
            Some(m) => {
                let nodes: Vec<_> = x.iter().zip(m).map(|(v, &mj)| tape.scale(v, mj)).collect();
                contiguous(&nodes)
            }
        };
        let nodes = build_mlp(tape, self.spec, weights, input)?;
        let ce = cross_entropy(tape, nodes.outputs, &self.target)?;
        let d = pseudo_huber_distance(tape, x, &self.origin, self.delta)?;
        Ok((ce, d))
    }

    fn total(&self, tape: &mut Tape<'_>, ce: crate::autodiff::Var, d: crate::autodiff::Var) -> crate::autodiff::Var {
        let ad = tape.scale(d, self.alpha);
        tape.add(ce, ad)
    }
}

fn contiguous(nodes: &[crate::autodiff::Var]) -> VarRange {
    match nodes.first() {
        None => VarRange::new(0, 0),
        Some(first) => {
            debug_assert!(nodes.windows(2).all(|w| w[1].index() == w[0].index() + 1));
            VarRange::new(first.index(), nodes.len())
        }
    }
}

impl InnerObjective for CfObjective<'_> {
    fn dim(&self) -> usize {
        self.origin.len()
    }

    fn theta(&self) -> &[f64] {
        self.theta
    }

    fn value(&self, s: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let (ce, d) = self.record(&mut tape, s, false, Weights::Fixed(self.theta))?;
        let t = self.total(&mut tape, ce, d);
        Ok(tape.value(t))
    }

    fn value_grad(&self, s: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let (ce, d) = self.record(&mut tape, s, true, Weights::Fixed(self.theta))?;
        let t = self.total(&mut tape, ce, d);
        Ok((tape.value(t), tape.backward(t)?))
    }

    fn grad_theta(&self, s: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.theta.len() {
            return Err(Error::Shape(format!("θ has length {}, expected {}", theta.len(), self.theta.len())));
        }
        let mut tape = Tape::new();
        let tv = tape.leaves(theta);
        let (ce, d) = self.record(&mut tape, s, false, Weights::Vars(tv))?;
        let t = self.total(&mut tape, ce, d);
        tape.backward(t)
    }
}

/// Settings of the descent loop.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverSettings {
    pub max_steps: usize,
    pub lr: f64,
    pub tol: f64,
    pub tau: f64,
    pub domain: Domain,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { max_steps: DEFAULT_STEPS, lr: 0.1, tol: DEFAULT_TOL, tau: DEFAULT_TAU, domain: Domain::Unbounded }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("counterfactual search needs at least one step".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("inner learning rate must be positive, got {}", self.lr)));
        }
        if !(self.tol >= 0.0) || !(self.tau >= 0.0) {
            return Err(Error::InvalidArgument("tolerances must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualResult {
    /// x* in input coordinates.
    pub point: Vec<f64>,
    /// x* in search coordinates (where stationarity holds).
    pub search_point: Vec<f64>,
    pub origin: Vec<f64>,
    pub distance: f64,
    pub support: Vec<usize>,
    pub tau: f64,
    pub loss_trace: Vec<f64>,
    pub grad_norm: f64,
    pub stationary: bool,
    pub steps: usize,
    /// Search coordinates pinned on a face of the domain box; they are held
    /// fixed when differentiating through the solution.
    pub active: Vec<usize>,
}

impl CounterfactualResult {
    pub fn delta(&self) -> Vec<f64> {
        self.point.iter().zip(&self.origin).map(|(a, b)| a - b).collect()
    }
}

/// Projected gradient descent with backtracking from `start` (search
/// coordinates). Returns the final iterate with its loss trace; the trace
/// is non-increasing because only decreasing steps are accepted.
pub fn minimize(obj: &dyn InnerObjective, start: &[f64], settings: &SolverSettings) -> Result<Descent> {
    settings.validate()?;
    settings.domain.validate(obj.dim())?;
    let mut s = start.to_vec();
    settings.domain.project(&mut s);
    let (f0, mut g) = obj.value_grad(&s)?;
    check_finite(f0, &g, 0)?;
    // Acceptance and the trace use `value` throughout: the gradient path can
    // round differently, which matters once decreases reach the last ulp.
    let mut f = obj.value(&s)?;
    let mut trace = vec![f];
    let mut step = settings.lr;
    let mut grad_norm = settings.domain.stationarity(&s, &g);
    let mut steps = 0;

    while steps < settings.max_steps && grad_norm > settings.tol {
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let mut cand: Vec<f64> = s.iter().zip(&g).map(|(si, gi)| si - step * gi).collect();
            settings.domain.project(&mut cand);
            let moved: f64 = cand.iter().zip(&s).map(|(c, si)| (c - si).powi(2)).sum();
            let fc = obj.value(&cand)?;
            // Once the predicted decrease is below rounding, an unchanged
            // value is accepted so the iterate can still approach stationarity.
            let decrease = ARMIJO / step * moved;
            let stalled = decrease <= 4.0 * f64::EPSILON * f.abs().max(1.0);
            let ok = if stalled { fc <= f && moved > 0.0 } else { fc <= f - decrease && fc < f };
            if fc.is_finite() && ok {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc)) = accepted else { break };
        s = cand;
        let (f_new, g_new) = obj.value_grad(&s)?;
        check_finite(f_new, &g_new, steps + 1)?;
        debug_assert!((f_new - fc).abs() <= 1e-12 * f_new.abs().max(1.0));
        f = fc;
        g = g_new;
        trace.push(f);
        steps += 1;
        grad_norm = settings.domain.stationarity(&s, &g);
        step = (step * 2.0).min(settings.lr * MAX_STEP_GROWTH);
    }

    Ok(Descent { point: s, value: f, trace, grad_norm, stationary: grad_norm <= settings.tol, steps })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Descent {
    pub point: Vec<f64>,
    pub value: f64,
    pub trace: Vec<f64>,
    pub grad_norm: f64,
    pub stationary: bool,
    pub steps: usize,
}

fn check_finite(f: f64, g: &[f64], step: usize) -> Result<()> {
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("counterfactual iterate at step {step} (objective {f})")));
    }
    Ok(())
}

/// Counterfactual for `obj`, starting the search at the origin.
pub fn generate_counterfactual(obj: &CfObjective<'_>, settings: &SolverSettings) -> Result<CounterfactualResult> {
    let start = obj.reparam.to_search(obj.origin());
    let run = minimize(obj, &start, settings)?;
    Ok(finish(obj, run, settings))
}

/// Attribute-space counterfactual: searches logits inside
/// [`Domain::attribute_box`], starting from the predicted attributes `a_hat`.
pub fn generate_counterfactual_attributes(
    spec: &MlpSpec,
    theta: &[f64],
    a_hat: &[f64],
    target: Target,
    alpha: f64,
    delta: f64,
    settings: &SolverSettings,
) -> Result<CounterfactualResult> {
    if let Some(j) = a_hat.iter().position(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::InvalidArgument(format!("predicted attribute {j} is {} (outside (0,1))", a_hat[j])));
    }
    let obj = CfObjective::new(spec, theta, a_hat, target, alpha, delta)?.with_reparam(Reparam::Logit);
    let settings = SolverSettings { domain: Domain::attribute_box(a_hat), ..settings.clone() };
    generate_counterfactual(&obj, &settings)
}

fn finish(obj: &CfObjective<'_>, run: Descent, settings: &SolverSettings) -> CounterfactualResult {
    let tau = settings.tau;
    let point = obj.reparam.to_input(&run.point);
    let origin = obj.origin().to_vec();
    let delta: Vec<f64> = point.iter().zip(&origin).map(|(a, b)| a - b).collect();
    CounterfactualResult {
        distance: pseudo_huber(&point, &origin, obj.delta),
        support: support_of(&delta, tau),
        tau,
        point,
        origin,
        loss_trace: run.trace,
        grad_norm: run.grad_norm,
        stationary: run.stationary,
        steps: run.steps,
        active: settings.domain.active(&run.point),
        search_point: run.point,
    }
}

/// Indices whose absolute change exceeds `tau`.
pub fn support_of(delta: &[f64], tau: f64) -> Vec<usize> {
    delta.iter().enumerate().filter(|(_, d)| d.abs() > tau).map(|(j, _)| j).collect()
}

/// Exhaustive grid search for `argmin CE` subject to `d(x, x₀) ≤ budget`,
/// over a uniform grid with `resolution` points per coordinate of `domain`.
///
/// Grid coordinates that land within rounding distance of the origin are
/// snapped onto it, so a zero budget always has the origin as a feasible point
/// when the grid passes through it.
pub fn constrained_cf_oracle(
    obj: &CfObjective<'_>,
    budget: f64,
    domain: &Domain,
    resolution: usize,
) -> Result<Vec<f64>> {
    let dim = obj.dim();
    if dim == 0 || dim > 3 {
        return Err(Error::InvalidArgument(format!("grid oracle supports 1 to 3 dimensions, got {dim}")));
    }
    if resolution < 2 {
        return Err(Error::InvalidArgument("grid resolution must be at least 2".into()));
    }
    let (lo, hi) = match domain {
        Domain::Box { lo, hi } => (lo, hi),
        Domain::Unbounded => return Err(Error::InvalidArgument("grid oracle needs a bounded domain".into())),
    };
    domain.validate(dim)?;
    let axes: Vec<Vec<f64>> = (0..dim)
        .map(|j| {
            let origin = obj.reparam.to_search(&obj.origin()[j..=j])[0];
            (0..resolution)
                .map(|i| {
                    let v = lo[j] + (hi[j] - lo[j]) * i as f64 / (resolution - 1) as f64;
                    if (v - origin).abs() <= 1e-12 * (hi[j] - lo[j]) { origin } else { v }
                })
                .collect()
        })
        .collect();

    let total = resolution.pow(dim as u32);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut s = vec![0.0; dim];
    for flat in 0..total {
        let mut rest = flat;
        for j in 0..dim {
            s[j] = axes[j][rest % resolution];
            rest /= resolution;
        }
        let (ce, d) = obj.parts(&s)?;
        if d > budget {
            continue;
        }
        if best.as_ref().map_or(true, |(b, _)| ce < *b) {
            best = Some((ce, s.clone()));
        }
    }
    best.map(|(_, s)| s).ok_or_else(|| {
        Error::InvalidArgument(format!("no grid point within distance budget {budget}"))
    })
}
