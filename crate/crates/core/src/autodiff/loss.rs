//! Loss terms recorded on a tape.

use super::mlp::PROB_CLAMP;
use super::tape::{Tape, Var, VarRange};
use crate::error::{Error, Result};

/// Supervision for [`cross_entropy`].
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Categorical target over a probability vector.
    Class(usize),
    /// Per-coordinate Bernoulli targets in `[0, 1]`, one per output.
    Soft(Vec<f64>),
}

impl Target {
    pub fn class(&self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(*c),
            Target::Soft(_) => None,
        }
    }
}

/// Cross-entropy of `probs` against `target`.
///
/// `Class(c)` gives `-ln p_c`. `Soft(t)` gives the summed binary cross-entropy
/// `Σ_j -t_j ln p_j - (1 - t_j) ln(1 - p_j)`. Probabilities are clamped into
/// `[1e-7, 1 - 1e-7]` first.
pub fn cross_entropy(tape: &mut Tape<'_>, probs: VarRange, target: &Target) -> Result<Var> {
    match target {
        Target::Class(c) => {
            if *c >= probs.len() {
                return Err(Error::Shape(format!(
                    "class {c} out of range for {} probabilities",
                    probs.len()
                )));
            }
            let p = tape.clamp(probs.get(*c), PROB_CLAMP, 1.0 - PROB_CLAMP);
            let l = tape.ln(p);
            Ok(tape.neg(l))
        }
        Target::Soft(t) => {
            if t.len() != probs.len() {
                return Err(Error::Shape(format!(
                    "{} soft targets for {} probabilities",
                    t.len(),
                    probs.len()
                )));
            }
            if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidArgument(format!("soft target {bad} outside [0, 1]")));
            }
            let mut terms = Vec::with_capacity(2 * t.len());
            for (j, &tj) in t.iter().enumerate() {
                let p = tape.clamp(probs.get(j), PROB_CLAMP, 1.0 - PROB_CLAMP);
                if tj > 0.0 {
                    let lp = tape.ln(p);
                    terms.push(tape.scale(lp, -tj));
                }
                if tj < 1.0 {
                    let neg = tape.scale(p, -1.0);
                    let q = tape.offset(neg, 1.0);
                    let lq = tape.ln(q);
                    terms.push(tape.scale(lq, -(1.0 - tj)));
                }
            }
            Ok(tape.sum(&terms))
        }
    }
}

/// `Σ_j sqrt(δ² + (x'_j - x_j)²) - δ`: smooth, sign-symmetric, and
/// asymptotically `|t| - δ` per coordinate.
pub fn pseudo_huber_distance(
    tape: &mut Tape<'_>,
    x_prime: VarRange,
    x: &[f64],
    delta: f64,
) -> Result<Var> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("pseudo-Huber delta must be positive, got {delta}")));
    }
    if x_prime.len() != x.len() {
        return Err(Error::Shape(format!(
            "distance between vectors of length {} and {}",
            x_prime.len(),
            x.len()
        )));
    }
    let d2 = delta * delta;
    let terms: Vec<Var> = x_prime
        .iter()
        .zip(x)
        .map(|(v, &x0)| {
            let t = tape.offset(v, -x0);
            let sq = tape.square(t);
            let inner = tape.offset(sq, d2);
            let root = tape.sqrt(inner);
            tape.offset(root, -delta)
        })
        .collect();
    Ok(tape.sum(&terms))
}

/// Plain-value pseudo-Huber distance, matching [`pseudo_huber_distance`].
pub fn pseudo_huber(x_prime: &[f64], x: &[f64], delta: f64) -> f64 {
    x_prime
        .iter()
        .zip(x)
        .map(|(a, b)| {
            let t = a - b;
            (delta * delta + t * t).sqrt() - delta
        })
        .sum()
}
