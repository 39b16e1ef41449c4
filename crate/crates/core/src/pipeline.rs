//! Two-stage model `x → attributes → label`, its training objective with
//! alignment terms on both stages, and the training configuration file.
//!
//! The label head is aligned in attribute space: its counterfactual `a*`
//! may only move the attributes selected by the annotation vector `r`. The
//! attribute network is aligned in image space: the image counterfactual
//! explaining the change `â → a*` may only move pixels inside the mask.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    build_mlp, cross_entropy, Activation, Head, Mlp, MlpSpec, Optimizer, OptimizerKind, ParamVector, Tape, Target,
    Weights,
};
use crate::causal_attrib::{select_causal_subset, CondProbModel};
use crate::counterfactual::{
    generate_counterfactual, generate_counterfactual_attributes, CfObjective, CounterfactualResult, Reparam,
    DEFAULT_DELTA, DEFAULT_STEPS, DEFAULT_TAU, DEFAULT_TOL,
};
use crate::error::{Error, Result};
use crate::implicit_align::{
    alignment_loss, epoch_order, implicit_grad, mean_usize, AlignItem, CfHyper, FlatConfig, ImplicitConfig, InitKind,
};
use crate::linsolve::FdScheme;
use crate::report::{fmt_f, Csv};
use crate::synthdata::{parse_kv, Sample};

#[derive(Clone, Debug, PartialEq)]
pub struct HierHyper {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Distance weight of the image counterfactual (attribute network).
    pub alpha1: f64,
    /// Distance weight of the attribute counterfactual (label head).
    pub alpha2: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Total epochs of the attribute network; the first
    /// `epochs_attr − epochs_label` are an attribute-only warm-up.
    pub epochs_attr: usize,
    /// Epochs of joint training (the label head's epoch count).
    pub epochs_label: usize,
    pub delta: f64,
    pub cf_steps: usize,
    pub cf_lr: f64,
    pub cf_tol: f64,
    pub tau: f64,
    pub implicit: ImplicitConfig,
    pub align_per_batch: Option<usize>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for HierHyper {
    fn default() -> Self {
        HierHyper {
            lambda1: 1.0,
            lambda2: 1.0,
            alpha1: 0.01,
            alpha2: 0.0005,
            lr: 0.001,
            batch_size: 128,
            epochs_attr: 100,
            epochs_label: 30,
            delta: DEFAULT_DELTA,
            cf_steps: DEFAULT_STEPS,
            cf_lr: 0.1,
            cf_tol: DEFAULT_TOL,
            tau: DEFAULT_TAU,
            implicit: ImplicitConfig::default(),
            align_per_batch: Some(16),
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl HierHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidArgument("lambda1 and lambda2 must be nonnegative".into()));
        }
        if !(self.alpha1 > 0.0 && self.alpha2 > 0.0) {
            return Err(Error::InvalidArgument("alpha1 and alpha2 must be positive".into()));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidArgument("learning rate and batch size must be positive".into()));
        }
        if self.epochs_attr == 0 && self.epochs_label == 0 {
            return Err(Error::InvalidArgument("at least one training epoch is required".into()));
        }
        self.implicit.fd.validate()
    }

    pub fn attribute_cf(&self) -> CfHyper {
        CfHyper {
            alpha: self.alpha2,
            delta: self.delta,
            steps: self.cf_steps,
            lr: self.cf_lr,
            tol: self.cf_tol,
            tau: self.tau,
        }
    }

    pub fn image_cf(&self) -> CfHyper {
        CfHyper { alpha: self.alpha1, ..self.attribute_cf() }
    }

    pub fn warmup_epochs(&self) -> usize {
        self.epochs_attr.saturating_sub(self.epochs_label)
    }
}

/// Hidden widths and initialization of the two networks.
#[derive(Clone, Debug, PartialEq)]
pub struct HierArch {
    pub hidden_attr: Vec<usize>,
    pub hidden_label: Vec<usize>,
    pub init: InitKind,
}

impl Default for HierArch {
    fn default() -> Self {
        HierArch {
            hidden_attr: vec![256],
            hidden_label: vec![8],
            init: InitKind::Pixelwise { gain: 5.0, threshold: 0.9, jitter: 0.01 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierModel {
    /// f_θ1: image → attribute probabilities (sigmoid head).
    pub attr: Mlp,
    /// f_θ2: attributes → label probabilities (softmax head).
    pub label: Mlp,
}

impl HierModel {
    pub fn new(attr: Mlp, label: Mlp) -> Result<Self> {
        if attr.spec.head() != Head::Sigmoid || label.spec.head() != Head::Softmax2 {
            return Err(Error::InvalidArgument("hierarchical model needs a sigmoid attribute head and a softmax label head".into()));
        }
        if attr.spec.output_dim() != label.spec.input_dim() {
            return Err(Error::Shape(format!(
                "attribute network emits {} values, label head reads {}",
                attr.spec.output_dim(),
                label.spec.input_dim()
            )));
        }
        Ok(HierModel { attr, label })
    }

    /// The label head is always randomly initialized; `arch.init` applies
    /// to the attribute network.
    pub fn init(input_dim: usize, attributes: usize, arch: &HierArch, seed: u64) -> Result<Self> {
        let widths = |input: usize, hidden: &[usize], out: usize| {
            let mut w = vec![input];
            w.extend(hidden);
            w.push(out);
            w
        };
        let s1 = MlpSpec::new(widths(input_dim, &arch.hidden_attr, attributes), Activation::Tanh, Head::Sigmoid)?;
        let s2 = MlpSpec::new(widths(attributes, &arch.hidden_label, 2), Activation::Tanh, Head::Softmax2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p1 = arch.init.init(&s1, &mut rng)?;
        let p2 = ParamVector::init_random(&s2, &mut rng);
        HierModel::new(Mlp::new(s1, p1)?, Mlp::new(s2, p2)?)
    }

    pub fn attributes(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.attr.predict(x)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.label.predict(&self.attr.predict(x)?)
    }
}

/// Label and attribute cross-entropy of one sample with gradients over θ1
/// and θ2. With `with_label = false` only the attribute term is taped.
pub fn hier_ce_value_grad(model: &HierModel, sample: &Sample, with_label: bool) -> Result<HierCe> {
    let (s1, s2) = (&model.attr.spec, &model.label.spec);
    let (t1, t2) = (model.attr.params.values(), model.label.params.values());
    let mut tape = Tape::with_capacity(t1.len() + t2.len() + 4 * sample.x.len());
    let v1 = tape.leaves(t1);
    let v2 = tape.leaves(t2);
    let xv = tape.constants(&sample.x);
    let attrs = build_mlp(&mut tape, s1, Weights::Vars(v1), xv)?;
    let a: Vec<f64> = sample.attributes.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    if a.len() != s1.output_dim() {
        return Err(Error::Shape(format!("sample has {} attributes, model predicts {}", a.len(), s1.output_dim())));
    }
    let ce_attr = cross_entropy(&mut tape, attrs.outputs, &Target::Soft(a))?;
    let (total, ce_label) = if with_label {
        let labels = build_mlp(&mut tape, s2, Weights::Vars(v2), attrs.outputs)?;
        let ce_label = cross_entropy(&mut tape, labels.outputs, &Target::Class(sample.y))?;
        (tape.add(ce_label, ce_attr), tape.value(ce_label))
    } else {
        (ce_attr, 0.0)
    };
    let mut g = tape.backward(total)?;
    let g2 = g.split_off(t1.len());
    Ok(HierCe { ce_label, ce_attr: tape.value(ce_attr), grad_attr: g, grad_label: g2 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierCe {
    pub ce_label: f64,
    pub ce_attr: f64,
    pub grad_attr: Vec<f64>,
    pub grad_label: Vec<f64>,
}

/// `a*` against the flipped label through the label head, then `x*`
/// explaining the change `â → a*` through the attribute network.
pub fn hier_counterfactual_chain(
    model: &HierModel,
    sample: &Sample,
    hyper: &HierHyper,
) -> Result<(CounterfactualResult, CounterfactualResult)> {
    let a_hat = model.attributes(&sample.x)?;
    let ac = hyper.attribute_cf();
    let a_cf = generate_counterfactual_attributes(
        &model.label.spec,
        model.label.params.values(),
        &a_hat,
        Target::Class(1 - sample.y),
        ac.alpha,
        ac.delta,
        &ac.settings(),
    )?;
    let ic = hyper.image_cf();
    let obj = CfObjective::new(
        &model.attr.spec,
        model.attr.params.values(),
        &sample.x,
        Target::Soft(a_cf.point.clone()),
        ic.alpha,
        ic.delta,
    )?;
    let x_cf = generate_counterfactual(&obj, &ic.settings())?;
    Ok((a_cf, x_cf))
}

/// Annotation vectors `r` from the ground-truth conditional of the data.
pub fn annotations(model: &dyn CondProbModel, samples: &[Sample], max_size: usize) -> Result<Vec<Vec<bool>>> {
    samples.iter().map(|s| Ok(select_causal_subset(model, &s.attributes, s.y, max_size)?.annotation)).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HierStats {
    pub aligned: usize,
    pub skipped_attr: usize,
    pub skipped_image: usize,
    pub cg_iterations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierObjective {
    pub value: f64,
    pub ce_label: f64,
    pub ce_attr: f64,
    /// L_align(θ2), attribute space.
    pub align_attr: f64,
    /// L_align(θ1), image space.
    pub align_image: f64,
    pub grad_attr: Vec<f64>,
    pub grad_label: Vec<f64>,
    pub stats: HierStats,
}

/// `CE(f₂(f₁(x)), y) + CE(f₁(x), a) + λ₂ L_align(θ₂) + λ₁ L_align(θ₁)` over a
/// batch. Alignment uses the first `align_per_batch` samples; `r[i]` is the
/// annotation of `batch[i]`.
pub fn hier_objective(
    model: &HierModel,
    batch: &[&Sample],
    r: &[&[bool]],
    hyper: &HierHyper,
) -> Result<HierObjective> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if r.len() != batch.len() {
        return Err(Error::Shape(format!("{} annotations for {} samples", r.len(), batch.len())));
    }
    let n = batch.len() as f64;
    let mut out = HierObjective {
        value: 0.0,
        ce_label: 0.0,
        ce_attr: 0.0,
        align_attr: 0.0,
        align_image: 0.0,
        grad_attr: vec![0.0; model.attr.params.len()],
        grad_label: vec![0.0; model.label.params.len()],
        stats: HierStats::default(),
    };
    for s in batch {
        let ce = hier_ce_value_grad(model, s, true)?;
        out.ce_label += ce.ce_label / n;
        out.ce_attr += ce.ce_attr / n;
        out.grad_attr.iter_mut().zip(&ce.grad_attr).for_each(|(a, b)| *a += b / n);
        out.grad_label.iter_mut().zip(&ce.grad_label).for_each(|(a, b)| *a += b / n);
    }
    if hyper.lambda1 > 0.0 || hyper.lambda2 > 0.0 {
        align_terms(model, batch, r, hyper, &mut out)?;
    }
    out.value = out.ce_label + out.ce_attr + hyper.lambda2 * out.align_attr + hyper.lambda1 * out.align_image;
    Ok(out)
}

fn align_terms(
    model: &HierModel,
    batch: &[&Sample],
    r: &[&[bool]],
    hyper: &HierHyper,
    out: &mut HierObjective,
) -> Result<()> {
    let take = hyper.align_per_batch.unwrap_or(batch.len()).min(batch.len());
    let mut a_hats = Vec::with_capacity(take);
    let mut chains = Vec::with_capacity(take);
    for s in &batch[..take] {
        a_hats.push(model.attributes(&s.x)?);
        chains.push(hier_counterfactual_chain(model, s, hyper)?);
    }
    for (i, ann) in r[..take].iter().enumerate() {
        if ann.len() != a_hats[i].len() {
            return Err(Error::Shape(format!("annotation of length {} for {} attributes", ann.len(), a_hats[i].len())));
        }
    }
    let attr_items: Vec<AlignItem<'_>> = (0..take)
        .map(|i| AlignItem { point: &chains[i].0.point, origin: &a_hats[i], allowed: r[i] })
        .collect();
    let image_items: Vec<AlignItem<'_>> = (0..take)
        .map(|i| AlignItem { point: &chains[i].1.point, origin: &batch[i].x, allowed: &batch[i].mask })
        .collect();
    let la = alignment_loss(&attr_items)?;
    let li = alignment_loss(&image_items)?;
    out.align_attr = la.value;
    out.align_image = li.value;
    out.stats.aligned = take;

    let (ac, ic) = (hyper.attribute_cf(), hyper.image_cf());
    for i in 0..take {
        let (a_cf, x_cf) = &chains[i];
        let s = batch[i];
        if hyper.lambda2 > 0.0 {
            let obj = CfObjective::new(
                &model.label.spec,
                model.label.params.values(),
                &a_hats[i],
                Target::Class(1 - s.y),
                ac.alpha,
                ac.delta,
            )?
            .with_reparam(Reparam::Logit);
            let ig = implicit_grad(&obj, a_cf, &la.outer_grads[i], &hyper.implicit)?;
            if let Some(solve) = &ig.solve {
                out.stats.cg_iterations.push(solve.iterations);
            }
            if ig.valid() {
                out.grad_label.iter_mut().zip(&ig.gradient).for_each(|(a, b)| *a += hyper.lambda2 * b);
            } else {
                debug!("attribute alignment gradient skipped: {:?}", ig.invalid);
                out.stats.skipped_attr += 1;
            }
        }
        if hyper.lambda1 > 0.0 {
            let obj = CfObjective::new(
                &model.attr.spec,
                model.attr.params.values(),
                &s.x,
                Target::Soft(a_cf.point.clone()),
                ic.alpha,
                ic.delta,
            )?;
            let ig = implicit_grad(&obj, x_cf, &li.outer_grads[i], &hyper.implicit)?;
            if let Some(solve) = &ig.solve {
                out.stats.cg_iterations.push(solve.iterations);
            }
            if ig.valid() {
                out.grad_attr.iter_mut().zip(&ig.gradient).for_each(|(a, b)| *a += hyper.lambda1 * b);
            } else {
                debug!("image alignment gradient skipped: {:?}", ig.invalid);
                out.stats.skipped_image += 1;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierEpochRecord {
    pub epoch: usize,
    pub joint: bool,
    pub ce_label: f64,
    pub ce_attr: f64,
    pub align_attr: f64,
    pub align_image: f64,
    pub skipped: usize,
    pub cg_iters_mean: f64,
    pub seconds: f64,
}

pub const HIER_EPOCH_HEADER: &str =
    "epoch,phase,ce_label,ce_attr,align_attr,align_image,skipped_samples,cg_iters_mean,seconds";

pub fn hier_epoch_csv(records: &[HierEpochRecord], timing: bool) -> Csv {
    let mut csv = Csv::new(HIER_EPOCH_HEADER);
    for r in records {
        csv.push(format!(
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            if r.joint { "joint" } else { "warmup" },
            if r.joint { fmt_f(r.ce_label) } else { "NA".into() },
            fmt_f(r.ce_attr),
            fmt_f(r.align_attr),
            fmt_f(r.align_image),
            r.skipped,
            fmt_f(r.cg_iters_mean),
            if timing { format!("{:.3}", r.seconds) } else { "NA".into() }
        ));
    }
    csv
}

/// Attribute-only warm-up of θ1, then joint training of both networks.
pub fn train_hier(
    hyper: &HierHyper,
    mut model: HierModel,
    train: &[Sample],
    r: &[Vec<bool>],
) -> Result<(HierModel, Vec<HierEpochRecord>)> {
    hyper.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if r.len() != train.len() {
        return Err(Error::Shape(format!("{} annotations for {} training samples", r.len(), train.len())));
    }
    let mut opt1 = Optimizer::new(hyper.optimizer, model.attr.params.len());
    let mut opt2 = Optimizer::new(hyper.optimizer, model.label.params.len());
    let warmup = hyper.warmup_epochs();
    let mut log = Vec::new();
    for epoch in 0..warmup + hyper.epochs_label {
        let start = Instant::now();
        let joint = epoch >= warmup;
        let order = epoch_order(train.len(), hyper.seed, epoch);
        let mut rec = HierEpochRecord {
            epoch: epoch + 1,
            joint,
            ce_label: 0.0,
            ce_attr: 0.0,
            align_attr: 0.0,
            align_image: 0.0,
            skipped: 0,
            cg_iters_mean: f64::NAN,
            seconds: 0.0,
        };
        let mut aligned = 0;
        let mut cg = Vec::new();
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let bn = batch.len() as f64;
            if joint {
                let ann: Vec<&[bool]> = chunk.iter().map(|&i| r[i].as_slice()).collect();
                let obj = hier_objective(&model, &batch, &ann, hyper)?;
                rec.ce_label += obj.ce_label * bn;
                rec.ce_attr += obj.ce_attr * bn;
                rec.align_attr += obj.align_attr * obj.stats.aligned as f64;
                rec.align_image += obj.align_image * obj.stats.aligned as f64;
                aligned += obj.stats.aligned;
                rec.skipped += obj.stats.skipped_attr + obj.stats.skipped_image;
                cg.extend(obj.stats.cg_iterations);
                opt1.step(model.attr.params.values_mut(), &obj.grad_attr, hyper.lr)?;
                opt2.step(model.label.params.values_mut(), &obj.grad_label, hyper.lr)?;
            } else {
                let mut grad = vec![0.0; model.attr.params.len()];
                for s in &batch {
                    let ce = hier_ce_value_grad(&model, s, false)?;
                    rec.ce_attr += ce.ce_attr;
                    grad.iter_mut().zip(&ce.grad_attr).for_each(|(a, b)| *a += b / bn);
                }
                opt1.step(model.attr.params.values_mut(), &grad, hyper.lr)?;
            }
        }
        let n = train.len() as f64;
        rec.ce_label /= n;
        rec.ce_attr /= n;
        if aligned > 0 {
            rec.align_attr /= aligned as f64;
            rec.align_image /= aligned as f64;
        }
        rec.cg_iters_mean = mean_usize(&cg);
        rec.seconds = start.elapsed().as_secs_f64();
        debug!(
            "epoch {} ({}) ce_y {:.4} ce_a {:.4} align {:.4}/{:.4}",
            rec.epoch,
            if joint { "joint" } else { "warmup" },
            rec.ce_label,
            rec.ce_attr,
            rec.align_attr,
            rec.align_image
        );
        log.push(rec);
    }
    Ok((model, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Flat,
    Hier,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "flat" => Ok(Mode::Flat),
            "hier" => Ok(Mode::Hier),
            _ => Err(Error::InvalidArgument(format!("unknown mode `{s}` (expected flat or hier)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Flat => "flat",
            Mode::Hier => "hier",
        }
    }
}

/// Contents of a training configuration file. Keys shared by both modes
/// (`lr`, `batch_size`, the counterfactual and solver settings) default per
/// mode when absent.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub flat: FlatConfig,
    pub hier: HierHyper,
    pub arch: HierArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Flat,
            data: None,
            out: None,
            flat: FlatConfig::default(),
            hier: HierHyper::default(),
            arch: HierArch::default(),
        }
    }
}

fn parse_widths(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.trim().is_empty() || v.trim() == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|w| w.trim().parse::<usize>().map_err(|_| format!("bad width `{w}`"))).collect()
}

fn fmt_widths(w: &[usize]) -> String {
    if w.is_empty() {
        "none".into()
    } else {
        w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn fmt_opt(v: Option<usize>) -> String {
    v.map_or("all".into(), |n| n.to_string())
}

impl TrainConfig {
    pub fn seed(&self) -> u64 {
        match self.mode {
            Mode::Flat => self.flat.seed,
            Mode::Hier => self.hier.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.flat.seed = seed;
        self.hier.seed = seed;
    }

    pub fn parse(text: &str, origin: &Path) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        let mut init = (None, None, None, None);
        for (line, key, value) in parse_kv(text, origin)? {
            let bad = |what: &str| Error::parse(origin, line, format!("`{key}` expects {what}, got `{value}`"));
            let num = || value.parse::<f64>().map_err(|_| bad("a number"));
            let int = || value.parse::<usize>().map_err(|_| bad("a nonnegative integer"));
            match key.as_str() {
                "mode" => cfg.mode = Mode::parse(&value).map_err(|_| bad("flat or hier"))?,
                "seed" => cfg.set_seed(value.parse::<u64>().map_err(|_| bad("an integer"))?),
                "data" => cfg.data = Some(PathBuf::from(&value)),
                "out" => cfg.out = Some(PathBuf::from(&value)),
                "lambda" => cfg.flat.lambda = num()?,
                "alpha" => cfg.flat.cf.alpha = num()?,
                "epochs" => cfg.flat.epochs = int()?,
                "lambda1" => cfg.hier.lambda1 = num()?,
                "lambda2" => cfg.hier.lambda2 = num()?,
                "alpha1" => cfg.hier.alpha1 = num()?,
                "alpha2" => cfg.hier.alpha2 = num()?,
                "epochs_attr" => cfg.hier.epochs_attr = int()?,
                "epochs_label" => cfg.hier.epochs_label = int()?,
                "hidden_label" => cfg.arch.hidden_label = parse_widths(&value).map_err(|_| bad("comma-separated widths"))?,
                "lr" => {
                    cfg.flat.lr = num()?;
                    cfg.hier.lr = cfg.flat.lr;
                }
                "batch_size" => {
                    cfg.flat.batch_size = int()?;
                    cfg.hier.batch_size = cfg.flat.batch_size;
                }
                "optimizer" => {
                    cfg.flat.optimizer = OptimizerKind::parse(&value).map_err(|_| bad("gd or adam"))?;
                    cfg.hier.optimizer = cfg.flat.optimizer;
                }
                "delta" => {
                    cfg.flat.cf.delta = num()?;
                    cfg.hier.delta = cfg.flat.cf.delta;
                }
                "cf_steps" => {
                    cfg.flat.cf.steps = int()?;
                    cfg.hier.cf_steps = cfg.flat.cf.steps;
                }
                "cf_lr" => {
                    cfg.flat.cf.lr = num()?;
                    cfg.hier.cf_lr = cfg.flat.cf.lr;
                }
                "cf_tol" => {
                    cfg.flat.cf.tol = num()?;
                    cfg.hier.cf_tol = cfg.flat.cf.tol;
                }
                "tau" => {
                    cfg.flat.cf.tau = num()?;
                    cfg.hier.tau = cfg.flat.cf.tau;
                }
                "align_per_batch" => {
                    let v = if value == "all" { None } else { Some(int()?) };
                    cfg.flat.align_per_batch = v;
                    cfg.hier.align_per_batch = v;
                }
                "cg_tol" => {
                    cfg.flat.implicit.cg_tol = num()?;
                    cfg.hier.implicit.cg_tol = cfg.flat.implicit.cg_tol;
                }
                "cg_max_iter" => {
                    let v = if value == "dim" { None } else { Some(int()?) };
                    cfg.flat.implicit.cg_max_iter = v;
                    cfg.hier.implicit.cg_max_iter = v;
                }
                "fd_eps" => {
                    cfg.flat.implicit.fd.eps0 = num()?;
                    cfg.hier.implicit.fd.eps0 = cfg.flat.implicit.fd.eps0;
                }
                "fd_scheme" => {
                    let s = match value.as_str() {
                        "central" => FdScheme::Central,
                        "forward" => FdScheme::Forward,
                        _ => return Err(bad("central or forward")),
                    };
                    cfg.flat.implicit.fd.scheme = s;
                    cfg.hier.implicit.fd.scheme = s;
                }
                "damping" => {
                    cfg.flat.implicit.fd.damping = num()?;
                    cfg.hier.implicit.fd.damping = cfg.flat.implicit.fd.damping;
                }
                "hidden" => {
                    cfg.flat.hidden = parse_widths(&value).map_err(|_| bad("comma-separated widths"))?;
                    cfg.arch.hidden_attr = cfg.flat.hidden.clone();
                }
                "init" => init.0 = Some(value.clone()),
                "init_gain" => init.1 = Some(num()?),
                "init_threshold" => init.2 = Some(num()?),
                "init_jitter" => init.3 = Some(num()?),
                _ => return Err(Error::parse(origin, line, format!("unknown key `{key}`"))),
            }
        }
        let kind = match (init.0.as_deref(), cfg.flat.init) {
            (Some("random"), _) => InitKind::Random,
            (Some("pixelwise") | None, InitKind::Pixelwise { gain, threshold, jitter }) => InitKind::Pixelwise {
                gain: init.1.unwrap_or(gain),
                threshold: init.2.unwrap_or(threshold),
                jitter: init.3.unwrap_or(jitter),
            },
            (Some(other), _) => {
                return Err(Error::parse(origin, 0, format!("`init` expects random or pixelwise, got `{other}`")))
            }
            (None, k) => k,
        };
        cfg.flat.init = kind;
        cfg.arch.init = kind;
        cfg.flat.validate()?;
        cfg.hier.validate()?;
        Ok(cfg)
    }

    /// Canonical `key=value` rendering of the settings that matter for the
    /// selected mode; parsing it back gives the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
        kv("mode", self.mode.name().into());
        kv("seed", self.seed().to_string());
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        if let Some(o) = &self.out {
            kv("out", o.display().to_string());
        }
        let (lr, batch, opt, implicit, align) = match self.mode {
            Mode::Flat => {
                let f = &self.flat;
                kv("lambda", f.lambda.to_string());
                kv("alpha", f.cf.alpha.to_string());
                kv("epochs", f.epochs.to_string());
                kv("delta", f.cf.delta.to_string());
                kv("cf_steps", f.cf.steps.to_string());
                kv("cf_lr", f.cf.lr.to_string());
                kv("cf_tol", f.cf.tol.to_string());
                kv("tau", f.cf.tau.to_string());
                kv("hidden", fmt_widths(&f.hidden));
                (f.lr, f.batch_size, f.optimizer, f.implicit, f.align_per_batch)
            }
            Mode::Hier => {
                let h = &self.hier;
                kv("lambda1", h.lambda1.to_string());
                kv("lambda2", h.lambda2.to_string());
                kv("alpha1", h.alpha1.to_string());
                kv("alpha2", h.alpha2.to_string());
                kv("epochs_attr", h.epochs_attr.to_string());
                kv("epochs_label", h.epochs_label.to_string());
                kv("delta", h.delta.to_string());
                kv("cf_steps", h.cf_steps.to_string());
                kv("cf_lr", h.cf_lr.to_string());
                kv("cf_tol", h.cf_tol.to_string());
                kv("tau", h.tau.to_string());
                kv("hidden", fmt_widths(&self.arch.hidden_attr));
                kv("hidden_label", fmt_widths(&self.arch.hidden_label));
                (h.lr, h.batch_size, h.optimizer, h.implicit, h.align_per_batch)
            }
        };
        kv("lr", lr.to_string());
        kv("batch_size", batch.to_string());
        kv("optimizer", opt.name().into());
        kv("align_per_batch", fmt_opt(align));
        kv("cg_tol", implicit.cg_tol.to_string());
        kv("cg_max_iter", implicit.cg_max_iter.map_or("dim".into(), |n| n.to_string()));
        kv("fd_eps", implicit.fd.eps0.to_string());
        kv("fd_scheme", match implicit.fd.scheme {
            FdScheme::Central => "central".into(),
            FdScheme::Forward => "forward".into(),
        });
        kv("damping", implicit.fd.damping.to_string());
        let init = match self.mode {
            Mode::Flat => self.flat.init,
            Mode::Hier => self.arch.init,
        };
        match init {
            InitKind::Random => kv("init", "random".into()),
            InitKind::Pixelwise { gain, threshold, jitter } => {
                kv("init", "pixelwise".into());
                kv("init_gain", gain.to_string());
                kv("init_threshold", threshold.to_string());
                kv("init_jitter", jitter.to_string());
            }
        }
        s
    }
}

/// A trained classifier of either mode.
#[derive(Clone, Debug, PartialEq)]
pub enum Trained {
    Flat(Mlp),
    Hier(HierModel),
}

impl Trained {
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Trained::Flat(m) => m.predict(x),
            Trained::Hier(h) => h.predict(x),
        }
    }

    pub fn networks(&self) -> Vec<&Mlp> {
        match self {
            Trained::Flat(m) => vec![m],
            Trained::Hier(h) => vec![&h.attr, &h.label],
        }
    }

    pub fn from_networks(mut nets: Vec<Mlp>) -> Result<Trained> {
        match nets.len() {
            1 => Ok(Trained::Flat(nets.remove(0))),
            2 => {
                let label = nets.pop().expect("two networks");
                let attr = nets.pop().expect("two networks");
                Ok(Trained::Hier(HierModel::new(attr, label)?))
            }
            n => Err(Error::InvalidArgument(format!("checkpoint holds {n} networks (expected 1 or 2)"))),
        }
    }
}

/// Flat-mode training of a `d → hidden → 2` classifier.
pub fn flat_mode(cfg: &FlatConfig, train: &[Sample]) -> Result<(Mlp, Csv, Vec<crate::implicit_align::EpochRecord>)> {
    let d = train.first().map(|s| s.x.len()).ok_or_else(|| Error::InvalidArgument("training split is empty".into()))?;
    let (spec, theta0) = crate::implicit_align::init_flat(cfg, d)?;
    let (theta, log) = crate::implicit_align::train_epochs(cfg, &spec, train, theta0)?;
    let csv = crate::implicit_align::epoch_csv(&log, false);
    Ok((Mlp::new(spec, theta)?, csv, log))
}

/// Runs the configured mode. `r` is required for hierarchical training.
/// The returned log has its timing column blanked (see [`Csv`]).
pub fn run_training(cfg: &TrainConfig, train: &[Sample], r: Option<&[Vec<bool>]>) -> Result<(Trained, Csv)> {
    match cfg.mode {
        Mode::Flat => {
            let (m, csv, _) = flat_mode(&cfg.flat, train)?;
            Ok((Trained::Flat(m), csv))
        }
        Mode::Hier => {
            let r = r.ok_or_else(|| Error::InvalidArgument("hierarchical training needs annotation vectors".into()))?;
            let d = train.first().map(|s| s.x.len()).ok_or_else(|| Error::InvalidArgument("training split is empty".into()))?;
            let p = train[0].attributes.len();
            let model = HierModel::init(d, p, &cfg.arch, cfg.hier.seed)?;
            let (model, log) = train_hier(&cfg.hier, model, train, r)?;
            Ok((Trained::Hier(model), hier_epoch_csv(&log, false)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(seed: u64) -> HierModel {
        let arch = HierArch { hidden_attr: vec![3], hidden_label: vec![2], init: InitKind::Random };
        HierModel::init(4, 2, &arch, seed).unwrap()
    }

    #[test]
    fn composed_prediction_is_a_distribution() {
        let m = small_model(1);
        for x in [[0.0; 4], [1.0; 4], [0.2, -3.0, 9.0, 0.5]] {
            let p = m.predict(&x).unwrap();
            assert!((p[0] + p[1] - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn mismatched_networks_are_rejected() {
        let s1 = MlpSpec::new(vec![4, 3], Activation::Tanh, Head::Sigmoid).unwrap();
        let s2 = MlpSpec::new(vec![2, 2], Activation::Tanh, Head::Softmax2).unwrap();
        let m1 = Mlp::new(s1.clone(), ParamVector::zeros(&s1)).unwrap();
        let m2 = Mlp::new(s2.clone(), ParamVector::zeros(&s2)).unwrap();
        assert!(matches!(HierModel::new(m1, m2), Err(Error::Shape(_))));
    }

    #[test]
    fn warmup_is_the_epoch_difference() {
        let h = HierHyper::default();
        assert_eq!(h.warmup_epochs(), 70);
        assert_eq!(HierHyper { epochs_attr: 10, epochs_label: 30, ..h }.warmup_epochs(), 0);
    }

    #[test]
    fn defaults_match_the_published_settings() {
        let h = HierHyper::default();
        assert_eq!((h.lambda1, h.lambda2, h.alpha1, h.alpha2), (1.0, 1.0, 0.01, 0.0005));
        assert_eq!((h.lr, h.batch_size, h.epochs_attr, h.epochs_label), (0.001, 128, 100, 30));
    }

    #[test]
    fn config_round_trips_through_text() {
        let text = "mode=hier\nseed=4\nlambda1=0.5\nalpha2=0.01\nhidden=8\nhidden_label=3,2\nepochs_attr=3\nepochs_label=2\ninit=random\n";
        let cfg = TrainConfig::parse(text, Path::new("t.cfg")).unwrap();
        assert_eq!(cfg.mode, Mode::Hier);
        assert_eq!(cfg.hier.lambda1, 0.5);
        assert_eq!(cfg.arch.hidden_label, vec![3, 2]);
        assert_eq!(cfg.arch.init, InitKind::Random);
        let again = TrainConfig::parse(&cfg.to_text(), Path::new("t.cfg")).unwrap();
        assert_eq!(again.to_text(), cfg.to_text());
        assert_eq!(again.hier, cfg.hier);
    }

    #[test]
    fn flat_config_round_trips() {
        let cfg = TrainConfig::parse("lambda=0\nepochs=2\nalign_per_batch=all\n", Path::new("f")).unwrap();
        assert_eq!(cfg.flat.align_per_batch, None);
        let again = TrainConfig::parse(&cfg.to_text(), Path::new("f")).unwrap();
        assert_eq!(again.flat, cfg.flat);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(TrainConfig::parse("colour=red\n", Path::new("c")), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(TrainConfig::parse("mode=deep\n", Path::new("c")), Err(Error::Parse { .. })));
        assert!(TrainConfig::parse("lambda=-1\n", Path::new("c")).is_err());
    }

    #[test]
    fn checkpoint_network_count_selects_the_mode() {
        let m = small_model(2);
        let t = Trained::from_networks(vec![m.attr.clone(), m.label.clone()]).unwrap();
        assert_eq!(t, Trained::Hier(m.clone()));
        assert!(matches!(Trained::from_networks(vec![m.label.clone()]).unwrap(), Trained::Flat(_)));
        assert!(Trained::from_networks(vec![]).is_err());
    }
}
