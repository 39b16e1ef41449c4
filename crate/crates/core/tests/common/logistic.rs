//! Convex counterfactual problems on a linear softmax classifier, solved by
//! a closed-form Newton iteration that shares no code with the library.
//!
//! T(x, θ) = softplus(−z) + α Σⱼ (√(δ² + (xⱼ − x₀ⱼ)²) − δ),
//! z = (w_t − w_o)·x + (b_t − b_o), t the target class and o the other.

use causal_align::autodiff::{Activation, Head, MlpSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::dense_solve;

pub struct LogisticCf {
    pub spec: MlpSpec,
    pub theta: Vec<f64>,
    pub x0: Vec<f64>,
    pub target: usize,
    pub alpha: f64,
    pub delta: f64,
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl LogisticCf {
    /// `d` inputs, `2d + 2` parameters. The target is the class the origin
    /// is not assigned to, so the counterfactual has to move.
    pub fn random(d: usize, seed: u64) -> LogisticCf {
        let spec = MlpSpec::new(vec![d, 2], Activation::Tanh, Head::Softmax2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.5 / (d as f64).sqrt();
        let theta: Vec<f64> = (0..spec.param_count()).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let x0: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut p = LogisticCf { spec, theta, x0, target: 1, alpha: rng.gen_range(0.2..1.0), delta: 0.05 };
        if p.margin(&p.x0, &p.theta) > 0.0 {
            p.target = 0;
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    fn direction(&self, theta: &[f64]) -> (Vec<f64>, f64) {
        let d = self.dim();
        let (t, o) = (self.target, 1 - self.target);
        let v = (0..d).map(|j| theta[t * d + j] - theta[o * d + j]).collect();
        (v, theta[2 * d + t] - theta[2 * d + o])
    }

    fn margin(&self, x: &[f64], theta: &[f64]) -> f64 {
        let (v, c) = self.direction(theta);
        v.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + c
    }

    pub fn value(&self, x: &[f64], theta: &[f64]) -> f64 {
        let d2 = self.delta * self.delta;
        let dist: f64 = x.iter().zip(&self.x0).map(|(a, b)| (d2 + (a - b).powi(2)).sqrt() - self.delta).sum();
        softplus(-self.margin(x, theta)) + self.alpha * dist
    }

    /// Gradient and Hessian in x.
    pub fn grad_hess(&self, x: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim();
        let (v, _) = self.direction(theta);
        let z = self.margin(x, theta);
        let s = sigmoid(-z);
        let mut g = vec![0.0; n];
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            let t = x[i] - self.x0[i];
            let q = self.delta * self.delta + t * t;
            g[i] = -s * v[i] + self.alpha * t / q.sqrt();
            for j in 0..n {
                h[i * n + j] = s * (1.0 - s) * v[i] * v[j];
            }
            h[i * n + i] += self.alpha * self.delta * self.delta / q.powf(1.5);
        }
        (g, h)
    }

    /// Damped Newton to gradient norm `tol`.
    pub fn solve(&self, theta: &[f64], tol: f64) -> Vec<f64> {
        let n = self.dim();
        let mut x = self.x0.clone();
        for _ in 0..500 {
            let (g, h) = self.grad_hess(&x, theta);
            if g.iter().map(|v| v * v).sum::<f64>().sqrt() <= tol {
                return x;
            }
            let step = dense_solve(n, &h, &g);
            let f0 = self.value(&x, theta);
            let slope: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
            let mut t = 1.0;
            loop {
                let cand: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a - t * b).collect();
                if self.value(&cand, theta) <= f0 - 1e-4 * t * slope || slope < 1e-13 * f0.abs().max(1.0) || t < 1e-12 {
                    x = cand;
                    break;
                }
                t *= 0.5;
            }
        }
        panic!("Newton did not reach tolerance {tol}");
    }

    /// Central differences of `outer(x*(θ))` over every parameter, with the
    /// inner problem re-solved at each perturbed θ.
    pub fn resolve_fd(&self, outer: &dyn Fn(&[f64]) -> f64, h: f64, tol: f64) -> Vec<f64> {
        (0..self.theta.len())
            .map(|k| {
                let mut up = self.theta.clone();
                let mut dn = self.theta.clone();
                up[k] += h;
                dn[k] -= h;
                (outer(&self.solve(&up, tol)) - outer(&self.solve(&dn, tol))) / (2.0 * h)
            })
            .collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

/// Largest per-coordinate relative error, with coordinates below `floor`
/// compared absolutely.
pub fn max_coord_rel_err(got: &[f64], want: &[f64], floor: f64) -> f64 {
    got.iter().zip(want).map(|(g, w)| (g - w).abs() / w.abs().max(floor)).fold(0.0, f64::max)
}
