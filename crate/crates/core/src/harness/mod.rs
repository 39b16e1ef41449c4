//! Evaluation: accuracy and saliency precision against the ground-truth
//! masks, for counterfactual supports and input-gradient saliency.

pub mod suite;

use crate::autodiff::{build_mlp, cross_entropy, Mlp, Tape, Target, Weights};
use crate::counterfactual::{generate_counterfactual, support_of, CfObjective, CounterfactualResult};
use crate::error::{Error, Result};
use crate::implicit_align::CfHyper;
use crate::pipeline::{hier_counterfactual_chain, HierHyper, HierModel, Trained};
use crate::report::{fmt_f, Csv};
use crate::synthdata::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaliencyKind {
    CfSupport,
    InputGradient,
}

impl SaliencyKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cf-support" => Ok(SaliencyKind::CfSupport),
            "input-gradient" => Ok(SaliencyKind::InputGradient),
            _ => Err(Error::InvalidArgument(format!("unknown saliency kind `{s}` (expected cf-support or input-gradient)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SaliencyKind::CfSupport => "cf-support",
            SaliencyKind::InputGradient => "input-gradient",
        }
    }
}

/// Fraction of `support` inside the mask; `None` for an empty support.
pub fn precision(support: &[usize], mask: &[bool]) -> Option<f64> {
    if support.is_empty() {
        return None;
    }
    let hits = support.iter().filter(|&&j| mask.get(j).copied().unwrap_or(false)).count();
    Some(hits as f64 / support.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionReport {
    /// Per-sample precision; `None` where the saliency support was empty.
    pub per_sample: Vec<Option<f64>>,
    pub mean: f64,
    pub std: f64,
    pub empty: usize,
    pub tau: f64,
    pub kind: SaliencyKind,
}

impl PrecisionReport {
    pub fn new(per_sample: Vec<Option<f64>>, tau: f64, kind: SaliencyKind) -> Self {
        let vals: Vec<f64> = per_sample.iter().flatten().copied().collect();
        let (mean, std) = mean_std(&vals);
        let empty = per_sample.len() - vals.len();
        PrecisionReport { per_sample, mean, std, empty, tau, kind }
    }
}

/// Mean and population standard deviation; NaN for an empty slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// A model under evaluation.
#[derive(Clone, Debug, PartialEq)]
pub enum Classifier {
    Flat(Mlp),
    Hier(HierModel),
    /// A flat network that only sees the masked region: inputs outside the
    /// sample's mask are zeroed before the network.
    Masked(Mlp),
}

impl From<Trained> for Classifier {
    fn from(t: Trained) -> Self {
        match t {
            Trained::Flat(m) => Classifier::Flat(m),
            Trained::Hier(h) => Classifier::Hier(h),
        }
    }
}

fn mask_values(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

impl Classifier {
    pub fn predict(&self, s: &Sample) -> Result<Vec<f64>> {
        match self {
            Classifier::Flat(m) => m.predict(&s.x),
            Classifier::Hier(h) => h.predict(&s.x),
            Classifier::Masked(m) => {
                let x: Vec<f64> = s.x.iter().zip(&s.mask).map(|(v, &on)| if on { *v } else { 0.0 }).collect();
                m.predict(&x)
            }
        }
    }

    /// Counterfactual of `s` toward the flipped label. For the hierarchical
    /// model this is the image end of the attribute → image chain.
    pub fn counterfactual(&self, s: &Sample, settings: &EvalSettings) -> Result<CounterfactualResult> {
        let cf = &settings.cf;
        let target = Target::Class(1 - s.y);
        match self {
            Classifier::Flat(m) => {
                let obj = CfObjective::new(&m.spec, m.params.values(), &s.x, target, cf.alpha, cf.delta)?;
                generate_counterfactual(&obj, &cf.settings())
            }
            Classifier::Masked(m) => {
                let obj = CfObjective::new(&m.spec, m.params.values(), &s.x, target, cf.alpha, cf.delta)?
                    .with_input_mask(mask_values(&s.mask))?;
                generate_counterfactual(&obj, &cf.settings())
            }
            Classifier::Hier(h) => Ok(hier_counterfactual_chain(h, s, &settings.hier)?.1),
        }
    }

    /// `∇x CE(f(x), y)`.
    pub fn input_gradient(&self, s: &Sample) -> Result<Vec<f64>> {
        let target = Target::Class(s.y);
        let mut tape = Tape::new();
        let xv = tape.leaves(&s.x);
        let probs = match self {
            Classifier::Flat(m) => build_mlp(&mut tape, &m.spec, Weights::Fixed(m.params.values()), xv)?.outputs,
            Classifier::Masked(m) => {
                let masked: Vec<_> = xv.iter().zip(&s.mask).map(|(v, &on)| tape.scale(v, if on { 1.0 } else { 0.0 })).collect();
                let xm = tape.gather(&masked);
                build_mlp(&mut tape, &m.spec, Weights::Fixed(m.params.values()), xm)?.outputs
            }
            Classifier::Hier(h) => {
                let a = build_mlp(&mut tape, &h.attr.spec, Weights::Fixed(h.attr.params.values()), xv)?;
                build_mlp(&mut tape, &h.label.spec, Weights::Fixed(h.label.params.values()), a.outputs)?.outputs
            }
        };
        let ce = cross_entropy(&mut tape, probs, &target)?;
        let g = tape.backward(ce)?;
        Ok(g[..s.x.len()].to_vec())
    }
}

/// Indices of the `q` largest values, ties broken toward lower indices.
pub fn top_q(values: &[f64], q: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(q);
    idx.sort_unstable();
    idx
}

/// Counterfactual settings used at evaluation time.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub kind: SaliencyKind,
    /// Flat and masked models.
    pub cf: CfHyper,
    /// Hierarchical models (support threshold taken from `cf.tau`).
    pub hier: HierHyper,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { kind: SaliencyKind::CfSupport, cf: CfHyper::default(), hier: HierHyper::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleEval {
    pub correct: bool,
    pub support: Vec<usize>,
    pub precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: PrecisionReport,
    pub samples: Vec<SampleEval>,
}

pub fn accuracy(model: &Classifier, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let mut correct = 0;
    for s in samples {
        let p = model.predict(s)?;
        correct += usize::from(usize::from(p[1] > p[0]) == s.y);
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Saliency support of one sample.
pub fn saliency_support(model: &Classifier, s: &Sample, settings: &EvalSettings) -> Result<Vec<usize>> {
    match settings.kind {
        SaliencyKind::CfSupport => {
            let cf = model.counterfactual(s, settings)?;
            Ok(support_of(&cf.delta(), settings.cf.tau))
        }
        SaliencyKind::InputGradient => {
            let g: Vec<f64> = model.input_gradient(s)?.iter().map(|v| v.abs()).collect();
            let q = s.mask.iter().filter(|&&m| m).count();
            Ok(top_q(&g, q))
        }
    }
}

pub fn evaluate(model: &Classifier, samples: &[Sample], settings: &EvalSettings) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let p = model.predict(s)?;
        let correct = usize::from(p[1] > p[0]) == s.y;
        let support = saliency_support(model, s, settings)?;
        let precision = precision(&support, &s.mask);
        out.push(SampleEval { correct, support, precision });
    }
    let accuracy = out.iter().filter(|e| e.correct).count() as f64 / out.len() as f64;
    let report = PrecisionReport::new(out.iter().map(|e| e.precision).collect(), settings.cf.tau, settings.kind);
    Ok(EvalReport { accuracy, precision: report, samples: out })
}

pub const EVAL_HEADER: &str = "sample_id,correct,support_size,precision";

pub fn eval_csv(report: &EvalReport) -> Csv {
    let mut csv = Csv::new(EVAL_HEADER);
    for (i, e) in report.samples.iter().enumerate() {
        csv.push(format!("{i},{},{},{}", e.correct as u8, e.support.len(), e.precision.map_or("NA".into(), fmt_f)));
    }
    csv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precision_examples() {
        let mask = [false, false, true, true, true];
        assert_eq!(precision(&[2, 3], &mask), Some(1.0));
        assert_eq!(precision(&[0, 1], &mask), Some(0.0));
        assert_eq!(precision(&[0, 1, 2, 3], &mask), Some(0.5));
        assert_eq!(precision(&[], &mask), None);
    }

    #[test]
    fn report_excludes_empty_supports() {
        let r = PrecisionReport::new(vec![Some(1.0), None, Some(0.0)], 1e-3, SaliencyKind::CfSupport);
        assert_eq!(r.mean, 0.5);
        assert_eq!(r.std, 0.5);
        assert_eq!(r.empty, 1);
    }

    #[test]
    fn top_q_breaks_ties_by_index() {
        assert_eq!(top_q(&[0.5, 2.0, 0.5, 3.0], 3), vec![0, 1, 3]);
        assert_eq!(top_q(&[1.0, 1.0], 5), vec![0, 1]);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [SaliencyKind::CfSupport, SaliencyKind::InputGradient] {
            assert_eq!(SaliencyKind::parse(k.name()).unwrap(), k);
        }
        assert!(SaliencyKind::parse("cam").is_err());
    }
}
