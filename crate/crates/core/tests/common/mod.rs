//! Oracles shared by the integration tests.
#![allow(dead_code)]

pub mod logistic;

use causal_align::autodiff::{
    build_mlp, cross_entropy, pseudo_huber_distance, Activation, Head, MlpSpec, ParamVector, Tape, Target, Weights,
};
use causal_align::linsolve::{dot, norm};
use causal_align::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Gaussian elimination with partial pivoting.
pub fn dense_solve(n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| {
        let mut row = a[i * n..(i + 1) * n].to_vec();
        row.push(b[i]);
        row
    }).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..=n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| m[i][j] * x[j]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    x
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let a = gaussian(rng, n * n);
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] = (0..n).map(|k| a[k * n + i] * a[k * n + j]).sum::<f64>() + if i == j { 1.0 } else { 0.0 };
        }
    }
    h
}

/// Q diag(λ) Qᵀ with Q from Gram-Schmidt and λ log-spaced in [1, cond].
pub fn spd_with_condition(rng: &mut ChaCha8Rng, n: usize, cond: f64) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < n {
        let mut v = gaussian(rng, n);
        for u in &q {
            let c = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(vi, ui)| *vi -= c * ui);
        }
        let l = norm(&v);
        if l > 1e-6 {
            q.push(v.iter().map(|x| x / l).collect());
        }
    }
    let lambda: Vec<f64> = (0..n).map(|k| cond.powf(k as f64 / (n - 1) as f64)).collect();
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] = (0..n).map(|k| lambda[k] * q[k][i] * q[k][j]).sum();
        }
    }
    h
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(1e-12)
}

/// Inner objective CE(f_θ(x), y*) + α·d(x, x₀) for a small softmax MLP.
pub struct Inner {
    pub spec: MlpSpec,
    pub theta: Vec<f64>,
    pub x0: Vec<f64>,
    pub alpha: f64,
}

impl Inner {
    pub fn new(widths: Vec<usize>, seed: u64) -> Inner {
        let spec = MlpSpec::new(widths, Activation::Tanh, Head::Softmax2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = ParamVector::init_random(&spec, &mut rng).into_values();
        theta.iter_mut().for_each(|t| *t *= 1.5);
        let x0 = (0..spec.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Inner { spec, theta, x0, alpha: 0.3 }
    }

    pub fn grads(&self, x: &[f64], theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let xv = tape.leaves(x);
        let tv = tape.leaves(theta);
        let nodes = build_mlp(&mut tape, &self.spec, Weights::Vars(tv), xv)?;
        let ce = cross_entropy(&mut tape, nodes.outputs, &Target::Class(1))?;
        let d = pseudo_huber_distance(&mut tape, xv, &self.x0, 0.05)?;
        let ad = tape.scale(d, self.alpha);
        let t = tape.add(ce, ad);
        let g = tape.backward(t)?;
        Ok((g[..x.len()].to_vec(), g[x.len()..].to_vec()))
    }

    pub fn grad_x(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.grads(x, &self.theta)?.0)
    }

    pub fn grad_theta(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.grads(x, theta)?.1)
    }

    pub fn point(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.x0.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect()
    }
}
