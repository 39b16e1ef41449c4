//! First-order parameter updates.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Gd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(OptimizerKind::Gd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Gd => "gd",
            OptimizerKind::Adam => "adam",
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer together with its running state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Gd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (vec![0.0; n_params], vec![0.0; n_params]),
        };
        Optimizer { kind, m, v, t: 0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update in place. A gradient with a non-finite entry is
    /// rejected and leaves both parameters and state untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != params.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for {} parameters",
                grad.len(),
                params.len()
            )));
        }
        if let Some((i, g)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i} is {g}")));
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Gd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    return Err(Error::Shape(format!(
                        "optimizer state sized for {} parameters, got {}",
                        self.m.len(),
                        params.len()
                    )));
                }
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
        Ok(())
    }
}
