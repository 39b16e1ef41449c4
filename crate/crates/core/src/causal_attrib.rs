//! Which binary attributes caused a label.
//!
//! The conditional counterfactual causal effect of a subset `S` is
//! `E[Y_{A_S=1} − Y_{A_S=0} | A=a, Y=y]`. Under exogenous attributes and a
//! label monotone in them it is identified from `P(Y | A)` alone:
//!
//! ```text
//! CCCE(S) = 1 − P(Y=y | A_S = 1−y, A_−S = a_−S) / P(Y=y | A=a)
//! ```
//!
//! For `y = 0` the forced value is 1, for `y = 1` it is 0 — the factual
//! outcome is already pinned on the other side by monotonicity.

use rand::Rng;

use crate::autodiff::{Mlp, MlpSpec, ParamVector};
use crate::error::{Error, Result};

pub const MAX_EXHAUSTIVE_ARITY: usize = 8;
const PROB_SUM_TOL: f64 = 1e-12;

/// `P(Y = y | A = a)` over binary attributes.
pub trait CondProbModel {
    fn arity(&self) -> usize;
    fn query(&self, y: usize, a: &[bool]) -> Result<f64>;
}

fn bits(a: &[bool]) -> usize {
    a.iter().enumerate().fold(0, |acc, (j, &on)| acc | ((on as usize) << j))
}

fn assignment(p: usize, code: usize) -> Vec<bool> {
    (0..p).map(|j| code >> j & 1 == 1).collect()
}

fn check_query(p: usize, y: usize, a: &[bool]) -> Result<()> {
    if a.len() != p {
        return Err(Error::Shape(format!("assignment of length {} for a {p}-attribute model", a.len())));
    }
    if y > 1 {
        return Err(Error::InvalidArgument(format!("binary label expected, got {y}")));
    }
    Ok(())
}

/// Explicit table of `P(Y=1 | a)` indexed by the assignment's bit pattern
/// (attribute `j` is bit `j`).
#[derive(Clone, Debug, PartialEq)]
pub struct TableModel {
    p: usize,
    p1: Vec<f64>,
}

impl TableModel {
    pub fn new(p: usize, p1: Vec<f64>) -> Result<Self> {
        if p > MAX_EXHAUSTIVE_ARITY {
            return Err(Error::InvalidArgument(format!("at most {MAX_EXHAUSTIVE_ARITY} attributes, got {p}")));
        }
        if p1.len() != 1 << p {
            return Err(Error::Shape(format!("{} table entries for {p} attributes", p1.len())));
        }
        if let Some(i) = p1.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!("table entry {i} is {} (outside [0,1])", p1[i])));
        }
        Ok(TableModel { p, p1 })
    }

    pub fn from_model(model: &dyn CondProbModel) -> Result<Self> {
        let p = model.arity();
        let p1 = (0..1usize << p).map(|c| model.query(1, &assignment(p, c))).collect::<Result<_>>()?;
        Self::new(p, p1)
    }
}

impl CondProbModel for TableModel {
    fn arity(&self) -> usize {
        self.p
    }

    fn query(&self, y: usize, a: &[bool]) -> Result<f64> {
        check_query(self.p, y, a)?;
        let q = self.p1[bits(a)];
        Ok(if y == 1 { q } else { 1.0 - q })
    }
}

/// Conditional probabilities read from a label network over attributes.
pub struct MlpCondProb {
    mlp: Mlp,
}

impl MlpCondProb {
    pub fn new(spec: MlpSpec, params: ParamVector) -> Result<Self> {
        if spec.output_dim() != 2 {
            return Err(Error::InvalidArgument(format!("label network must have 2 outputs, `{spec}` has {}", spec.output_dim())));
        }
        Ok(MlpCondProb { mlp: Mlp::new(spec, params)? })
    }
}

impl CondProbModel for MlpCondProb {
    fn arity(&self) -> usize {
        self.mlp.spec.input_dim()
    }

    fn query(&self, y: usize, a: &[bool]) -> Result<f64> {
        check_query(self.arity(), y, a)?;
        let input: Vec<f64> = a.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(self.mlp.predict(&input)?[y])
    }
}

/// Structural model `Y = f(U, A)` with a finite noise space and `A`
/// exogenous. Each noise atom carries the full truth table of `f(u, ·)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MonotoneScm {
    p: usize,
    probs: Vec<f64>,
    tables: Vec<Vec<bool>>,
}

impl MonotoneScm {
    /// Validates that the probabilities form a distribution and that every
    /// `f(u, ·)` is monotone non-decreasing.
    pub fn new(p: usize, probs: Vec<f64>, tables: Vec<Vec<bool>>) -> Result<Self> {
        if p > MAX_EXHAUSTIVE_ARITY {
            return Err(Error::InvalidArgument(format!("at most {MAX_EXHAUSTIVE_ARITY} attributes, got {p}")));
        }
        if probs.is_empty() || probs.len() != tables.len() {
            return Err(Error::Shape(format!("{} noise probabilities for {} tables", probs.len(), tables.len())));
        }
        if probs.iter().any(|&q| !(q >= 0.0 && q.is_finite())) {
            return Err(Error::InvalidArgument("noise probabilities must be nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidArgument(format!("noise probabilities sum to {total}")));
        }
        for (u, t) in tables.iter().enumerate() {
            if t.len() != 1 << p {
                return Err(Error::Shape(format!("noise atom {u} has a table of {} entries, expected {}", t.len(), 1 << p)));
            }
            for code in 0..1usize << p {
                for j in 0..p {
                    let up = code | 1 << j;
                    if t[code] && !t[up] {
                        return Err(Error::NotMonotone(format!(
                            "noise atom {u}: raising attribute {j} from {:?} lowers the label",
                            assignment(p, code)
                        )));
                    }
                }
            }
        }
        Ok(MonotoneScm { p, probs, tables })
    }

    pub fn from_fn(p: usize, probs: Vec<f64>, f: impl Fn(usize, &[bool]) -> bool) -> Result<Self> {
        let tables = (0..probs.len())
            .map(|u| (0..1usize << p).map(|c| f(u, &assignment(p, c))).collect())
            .collect();
        Self::new(p, probs, tables)
    }

    /// Random monotone SCM: each atom's table is the up-closure of a random
    /// sparse seed set, so monotonicity holds by construction.
    pub fn random<R: Rng + ?Sized>(p: usize, atoms: usize, rng: &mut R) -> Result<Self> {
        if atoms == 0 {
            return Err(Error::InvalidArgument("need at least one noise atom".into()));
        }
        let weights: Vec<f64> = (0..atoms).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let head: f64 = probs[..atoms - 1].iter().sum();
        probs[atoms - 1] = 1.0 - head;
        let n = 1usize << p;
        let tables = (0..atoms)
            .map(|_| {
                let density = rng.gen_range(0.0..0.5);
                let seeds: Vec<usize> = (0..n).filter(|_| rng.gen_bool(density)).collect();
                (0..n).map(|c| seeds.iter().any(|&s| s & c == s)).collect()
            })
            .collect();
        Self::new(p, probs, tables)
    }

    pub fn arity(&self) -> usize {
        self.p
    }

    pub fn atoms(&self) -> usize {
        self.probs.len()
    }

    pub fn noise_probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn outcome(&self, u: usize, a: &[bool]) -> bool {
        self.tables[u][bits(a)]
    }
}

impl CondProbModel for MonotoneScm {
    fn arity(&self) -> usize {
        self.p
    }

    fn query(&self, y: usize, a: &[bool]) -> Result<f64> {
        check_query(self.p, y, a)?;
        let code = bits(a);
        Ok(self.probs.iter().zip(&self.tables).filter(|(_, t)| t[code] == (y == 1)).map(|(q, _)| q).sum())
    }
}

fn check_subset(p: usize, s: &[usize]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::InvalidArgument("attribute subset must be non-empty".into()));
    }
    if let Some(&j) = s.iter().find(|&&j| j >= p) {
        return Err(Error::InvalidArgument(format!("attribute {j} out of range for {p} attributes")));
    }
    Ok(())
}

fn forced(a: &[bool], s: &[usize], value: bool) -> Vec<bool> {
    let mut out = a.to_vec();
    for &j in s {
        out[j] = value;
    }
    out
}

/// Identification-formula CCCE of subset `s` (0-based attribute indices).
pub fn ccce(model: &dyn CondProbModel, s: &[usize], a: &[bool], y: usize) -> Result<f64> {
    let p = model.arity();
    check_query(p, y, a)?;
    check_subset(p, s)?;
    let denom = model.query(y, a)?;
    if denom <= 0.0 {
        return Err(Error::ZeroProbability(format!("P(Y={y} | A={}) = 0", fmt_assignment(a))));
    }
    let numer = model.query(y, &forced(a, s, y == 0))?;
    Ok(1.0 - numer / denom)
}

/// `E[Y_{A_S=1} − Y_{A_S=0} | A=a, Y=y]` by enumerating the noise space.
pub fn scm_ccce_oracle(scm: &MonotoneScm, s: &[usize], a: &[bool], y: usize) -> Result<f64> {
    check_query(scm.p, y, a)?;
    check_subset(scm.p, s)?;
    let (on, off) = (forced(a, s, true), forced(a, s, false));
    let mut mass = 0.0;
    let mut effect = 0.0;
    for (u, &q) in scm.probs.iter().enumerate() {
        if scm.outcome(u, a) != (y == 1) || q == 0.0 {
            continue;
        }
        mass += q;
        effect += q * (scm.outcome(u, &on) as u8 as f64 - scm.outcome(u, &off) as u8 as f64);
    }
    if mass <= 0.0 {
        return Err(Error::ZeroProbability(format!("evidence A={}, Y={y} is impossible", fmt_assignment(a))));
    }
    Ok(effect / mass)
}

/// Exhaustive monotonicity check over all single-attribute raises.
pub fn validate_monotone(model: &dyn CondProbModel) -> Result<()> {
    let p = model.arity();
    if p > MAX_EXHAUSTIVE_ARITY {
        return Err(Error::InvalidArgument(format!("exhaustive check supports at most {MAX_EXHAUSTIVE_ARITY} attributes")));
    }
    for code in 0..1usize << p {
        let a = assignment(p, code);
        let base = model.query(1, &a)?;
        for j in (0..p).filter(|&j| !a[j]) {
            let raised = model.query(1, &forced(&a, &[j], true))?;
            if raised < base {
                return Err(Error::NotMonotone(format!(
                    "P(Y=1) drops from {base} to {raised} when attribute {j} of {} is raised",
                    fmt_assignment(&a)
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CcceReport {
    /// Every scored subset in evaluation order (cardinality, then lexicographic).
    pub scores: Vec<(Vec<usize>, f64)>,
    /// Subsets whose score was undefined (impossible evidence).
    pub skipped: Vec<Vec<usize>>,
    pub selected: Option<Vec<usize>>,
    pub annotation: Vec<bool>,
    pub fallback: bool,
}

/// All non-empty subsets of `0..p` with at most `max_size` elements,
/// ordered by cardinality and then lexicographically.
pub fn subsets_up_to(p: usize, max_size: usize) -> Vec<Vec<usize>> {
    fn extend(start: usize, p: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for j in start..p {
            cur.push(j);
            extend(j + 1, p, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for k in 1..=max_size.min(p) {
        extend(0, p, k, &mut Vec::new(), &mut out);
    }
    out
}

/// Picks the subset with the highest CCCE; ties go to the earlier subset in
/// [`subsets_up_to`] order. A non-positive best score yields the all-ones
/// annotation with `fallback` set.
pub fn select_causal_subset(model: &dyn CondProbModel, a: &[bool], y: usize, max_size: usize) -> Result<CcceReport> {
    let p = model.arity();
    if p == 0 {
        return Err(Error::InvalidArgument("model has no attributes".into()));
    }
    check_query(p, y, a)?;
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for s in subsets_up_to(p, max_size) {
        match ccce(model, &s, a, y) {
            Ok(v) => {
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((scores.len(), v));
                }
                scores.push((s, v));
            }
            Err(Error::ZeroProbability(_)) => skipped.push(s),
            Err(e) => return Err(e),
        }
    }
    let (selected, annotation, fallback) = match best {
        Some((i, v)) if v > 0.0 => {
            let s = scores[i].0.clone();
            let r = (0..p).map(|j| s.contains(&j)).collect();
            (Some(s), r, false)
        }
        _ => (None, vec![true; p], true),
    };
    Ok(CcceReport { scores, skipped, selected, annotation, fallback })
}

/// Both sides of the probability-of-causation identity for a deterministic
/// generator: `lhs` is the classifier's probability of `target` at the
/// generated point, `rhs` is `P(Y=target | x*) · P(x* | x₀, y₀)` where the
/// second factor is 1 exactly when a second generator run reproduces x*.
pub fn prob_of_causation_check(
    classifier: &Mlp,
    generator: &dyn Fn() -> Result<Vec<f64>>,
    target: usize,
) -> Result<(f64, f64)> {
    let x_star = generator()?;
    let lhs = classifier.predict(&x_star)?[target];
    let replay = generator()?;
    let indicator = if replay == x_star { 1.0 } else { 0.0 };
    let rhs = classifier.predict(&replay)?[target] * indicator;
    Ok((lhs, rhs))
}

fn fmt_assignment(a: &[bool]) -> String {
    a.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// CSV rows `sample_id,subset,score,selected,fallback` for one report.
pub fn report_rows(sample_id: usize, report: &CcceReport) -> Vec<String> {
    report
        .scores
        .iter()
        .map(|(s, v)| {
            let chosen = report.selected.as_ref() == Some(s);
            format!(
                "{sample_id},{},{v:.12},{},{}",
                s.iter().map(|j| j.to_string()).collect::<Vec<_>>().join(";"),
                chosen as u8,
                report.fallback as u8
            )
        })
        .collect()
}

pub const REPORT_HEADER: &str = "sample_id,subset,score,selected,fallback";

#[cfg(test)]
mod tests {
    use super::*;

    /// Deterministic Y = A₁ over two attributes.
    fn y_is_a1() -> MonotoneScm {
        MonotoneScm::from_fn(2, vec![1.0], |_, a| a[0]).unwrap()
    }

    #[test]
    fn already_forced_subset_scores_zero() {
        let scm = y_is_a1();
        assert_eq!(ccce(&scm, &[1], &[false, true], 0).unwrap(), 0.0);
    }

    #[test]
    fn deterministic_cause_scores_one() {
        let scm = y_is_a1();
        assert_eq!(ccce(&scm, &[0], &[false, true], 0).unwrap(), 1.0);
        assert_eq!(scm_ccce_oracle(&scm, &[0], &[false, true], 0).unwrap(), 1.0);
    }

    #[test]
    fn positive_label_forces_subset_off() {
        let scm = y_is_a1();
        assert_eq!(ccce(&scm, &[0], &[true, false], 1).unwrap(), 1.0);
        assert_eq!(ccce(&scm, &[1], &[true, false], 1).unwrap(), 0.0);
        assert_eq!(scm_ccce_oracle(&scm, &[0], &[true, false], 1).unwrap(), 1.0);
    }

    #[test]
    fn label_ignoring_attributes_has_no_effect() {
        let scm = MonotoneScm::from_fn(3, vec![0.3, 0.7], |u, _| u == 0).unwrap();
        for s in subsets_up_to(3, 3) {
            assert_eq!(scm_ccce_oracle(&scm, &s, &[true, false, true], 1).unwrap(), 0.0);
            assert_eq!(ccce(&scm, &s, &[true, false, true], 1).unwrap(), 0.0);
        }
    }

    #[test]
    fn impossible_evidence_is_rejected() {
        let scm = y_is_a1();
        assert!(matches!(ccce(&scm, &[0], &[true, false], 0), Err(Error::ZeroProbability(_))));
        assert!(matches!(scm_ccce_oracle(&scm, &[0], &[true, false], 0), Err(Error::ZeroProbability(_))));
    }

    #[test]
    fn selection_prefers_smaller_subsets_on_ties() {
        let report = select_causal_subset(&y_is_a1(), &[false, true], 0, 3).unwrap();
        let scores: Vec<f64> = report.scores.iter().map(|(_, v)| *v).collect();
        assert_eq!(scores, vec![1.0, 0.0, 1.0]);
        assert_eq!(report.selected, Some(vec![0]));
        assert_eq!(report.annotation, vec![true, false]);
        assert!(!report.fallback);
    }

    #[test]
    fn all_ones_evidence_falls_back() {
        let report = select_causal_subset(&y_is_a1(), &[true, true], 0, 3);
        // P(Y=0 | (1,1)) = 0: every subset is skipped.
        let report = report.unwrap();
        assert!(report.fallback && report.selected.is_none());
        assert_eq!(report.skipped.len(), 3);

        let noisy = TableModel::new(2, vec![0.1, 0.5, 0.5, 0.9]).unwrap();
        let report = select_causal_subset(&noisy, &[true, true], 0, 3).unwrap();
        assert!(report.scores.iter().all(|(_, v)| *v == 0.0));
        assert!(report.fallback);
        assert_eq!(report.annotation, vec![true, true]);
    }

    #[test]
    fn subsets_are_enumerated_in_tie_break_order() {
        assert_eq!(
            subsets_up_to(3, 2),
            vec![vec![0], vec![1], vec![2], vec![0, 1], vec![0, 2], vec![1, 2]]
        );
        assert_eq!(subsets_up_to(4, 3).len(), 4 + 6 + 4);
    }

    #[test]
    fn non_monotone_structures_are_rejected() {
        let err = MonotoneScm::from_fn(1, vec![1.0], |_, a| !a[0]).unwrap_err();
        assert!(matches!(err, Error::NotMonotone(_)));
        let table = TableModel::new(1, vec![0.8, 0.2]).unwrap();
        assert!(matches!(validate_monotone(&table), Err(Error::NotMonotone(_))));
        assert!(validate_monotone(&y_is_a1()).is_ok());
    }

    #[test]
    fn bad_distributions_are_rejected() {
        assert!(MonotoneScm::from_fn(1, vec![0.5, 0.4], |_, a| a[0]).is_err());
        assert!(MonotoneScm::from_fn(1, vec![1.5, -0.5], |_, a| a[0]).is_err());
        assert!(TableModel::new(2, vec![0.1; 3]).is_err());
        assert!(TableModel::new(1, vec![0.1, 1.1]).is_err());
    }

    #[test]
    fn random_scms_are_valid_distributions() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let scm = MonotoneScm::random(4, 64, &mut rng).unwrap();
            assert!((scm.noise_probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            validate_monotone(&scm).unwrap();
        }
    }

    #[test]
    fn report_rows_mark_selection() {
        let report = select_causal_subset(&y_is_a1(), &[false, true], 0, 2).unwrap();
        let rows = report_rows(7, &report);
        assert_eq!(rows[0], "7,0,1.000000000000,1,0");
        assert_eq!(rows[2], "7,0;1,1.000000000000,0,0");
    }
}
