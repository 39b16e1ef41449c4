//! Matrix-free symmetric solves.
//!
//! Curvature never exists as a matrix here: a Hessian is an operator whose
//! application is a finite difference of first-order gradients, and the
//! conjugate-gradient solver only ever asks for `H·v`.

use crate::error::{Error, Result};

pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

/// Operator backed by a closure.
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F> FnOperator<F>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnOperator { dim, f }
    }
}

impl<F> LinearOperator for FnOperator<F>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let out = (self.f)(v)?;
        if out.len() != self.dim {
            return Err(Error::Shape(format!(
                "operator returned {} entries, expected {}",
                out.len(),
                self.dim
            )));
        }
        Ok(out)
    }
}

/// Square row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!("{} entries for a {n}x{n} matrix", data.len())));
        }
        Ok(DenseMatrix { n, data })
    }

    pub fn diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut data = vec![0.0; n * n];
        for (i, &v) in d.iter().enumerate() {
            data[i * n + i] = v;
        }
        DenseMatrix { n, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::diag(&vec![1.0; n])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn rows(&self) -> &[f64] {
        &self.data
    }
}

impl LinearOperator for DenseMatrix {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(v, self.n, "operand")?;
        Ok(self.data.chunks_exact(self.n).map(|row| dot(row, v)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSolveResult {
    pub solution: Vec<f64>,
    /// ‖b − A z‖ evaluated with a fresh operator application.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Conjugate gradient for symmetric positive-definite operators.
///
/// Stops once ‖b − A z‖ ≤ `tol`·max(1, ‖b‖). Each new residual is
/// reorthogonalized against all previous ones; plain CG loses orthogonality
/// in floating point and, on spectra spread over a few decades, can miss
/// tight tolerances after `n` steps by several orders of magnitude.
///
/// When the recursive residual reaches the threshold the true residual is
/// recomputed; if it disagrees (possible with noisy finite-difference
/// operators) the iteration restarts from the true residual instead of
/// reporting a false convergence.
pub fn conjugate_gradient(
    op: &dyn LinearOperator,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<LinearSolveResult> {
    let n = op.dim();
    check_len(b, n, "right-hand side")?;
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    if let Some(i) = b.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("right-hand side entry {i}")));
    }

    let threshold = tol * norm(b).max(1.0);
    let mut z = vec![0.0; n];
    let mut r = b.to_vec();
    let mut rr = dot(&r, &r);
    if rr.sqrt() <= threshold {
        return Ok(LinearSolveResult { solution: z, residual_norm: rr.sqrt(), iterations: 0, converged: true });
    }
    let mut p = r.clone();
    let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / rr.sqrt()).collect()];
    let mut iterations = 0;
    let mut residual_norm = rr.sqrt();

    while iterations < max_iter {
        let ap = op.apply(&p)?;
        check_len(&ap, n, "operator output")?;
        let curvature = dot(&p, &ap);
        if !curvature.is_finite() {
            return Err(Error::NonFinite(format!("curvature pᵀAp at CG iteration {iterations}")));
        }
        if curvature <= 0.0 {
            return Err(Error::Indefinite { curvature, iteration: iterations });
        }
        let step = rr / curvature;
        for i in 0..n {
            z[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        iterations += 1;
        let rr_raw = dot(&r, &r);
        if !rr_raw.is_finite() {
            return Err(Error::NonFinite(format!("residual at CG iteration {iterations}")));
        }

        if rr_raw.sqrt() <= threshold {
            let true_r = residual(op, b, &z)?;
            residual_norm = norm(&true_r);
            if residual_norm <= threshold {
                return Ok(LinearSolveResult { solution: z, residual_norm, iterations, converged: true });
            }
            r = true_r;
            rr = dot(&r, &r);
            p.copy_from_slice(&r);
            basis.clear();
            basis.push(r.iter().map(|v| v / rr.sqrt()).collect());
            continue;
        }

        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &r);
                r.iter_mut().zip(q).for_each(|(ri, qi)| *ri -= c * qi);
            }
        }
        let rr_next = dot(&r, &r);
        if rr_next > 0.0 && basis.len() < n {
            basis.push(r.iter().map(|v| v / rr_next.sqrt()).collect());
        }
        let beta = rr_next / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_next;
        residual_norm = rr.sqrt();
    }

    if iterations > 0 {
        residual_norm = norm(&residual(op, b, &z)?);
    }
    let converged = residual_norm <= threshold;
    Ok(LinearSolveResult { solution: z, residual_norm, iterations, converged })
}

fn residual(op: &dyn LinearOperator, b: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let az = op.apply(z)?;
    Ok(b.iter().zip(&az).map(|(bi, ai)| bi - ai).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdScheme {
    Forward,
    Central,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdConfig {
    /// Perturbation length along the probe direction; the raw step is
    /// `eps0 / ‖v‖`.
    pub eps0: f64,
    pub scheme: FdScheme,
    /// Multiple of the identity added to every Hessian-vector product.
    pub damping: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { eps0: 1e-4, scheme: FdScheme::Central, damping: 1e-3 }
    }
}

impl FdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return Err(Error::InvalidArgument(format!("fd step must be positive, got {}", self.eps0)));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::InvalidArgument(format!("damping must be nonnegative, got {}", self.damping)));
        }
        Ok(())
    }
}

/// Directional derivative of `f` at `x` along `v`, by finite differences.
/// `base` is `f(x)`, needed only by the forward scheme.
fn directional_fd(
    f: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    v: &[f64],
    base: Option<&[f64]>,
    cfg: &FdConfig,
) -> Result<Option<Vec<f64>>> {
    check_len(v, x.len(), "direction")?;
    let vn = norm(v);
    if !vn.is_finite() {
        return Err(Error::NonFinite("finite-difference direction".into()));
    }
    if vn == 0.0 {
        return Ok(None);
    }
    let eps = cfg.eps0 / vn.max(1e-12);
    let shifted = |s: f64| -> Vec<f64> { x.iter().zip(v).map(|(xi, vi)| xi + s * vi).collect() };
    let out: Vec<f64> = match cfg.scheme {
        FdScheme::Central => {
            let up = f(&shifted(eps))?;
            let dn = f(&shifted(-eps))?;
            check_len(&dn, up.len(), "gradient")?;
            up.iter().zip(&dn).map(|(u, d)| (u - d) / (2.0 * eps)).collect()
        }
        FdScheme::Forward => {
            let owned;
            let g0 = match base {
                Some(g) => g,
                None => {
                    owned = f(x)?;
                    &owned
                }
            };
            let up = f(&shifted(eps))?;
            check_len(&up, g0.len(), "gradient")?;
            up.iter().zip(g0).map(|(u, g)| (u - g) / eps).collect()
        }
    };
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("finite-difference product entry {i}")));
    }
    Ok(Some(out))
}

/// `(H + γI)·v` where `H` is the Jacobian of `grad_fn` at `x`.
pub fn hvp_fd(
    grad_fn: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    v: &[f64],
    cfg: &FdConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    hvp_with_base(grad_fn, x, v, None, cfg)
}

fn hvp_with_base(
    grad_fn: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    v: &[f64],
    base: Option<&[f64]>,
    cfg: &FdConfig,
) -> Result<Vec<f64>> {
    let Some(mut hv) = directional_fd(grad_fn, x, v, base, cfg)? else {
        return Ok(vec![0.0; x.len()]);
    };
    check_len(&hv, x.len(), "gradient")?;
    if cfg.damping > 0.0 {
        for (h, vi) in hv.iter_mut().zip(v) {
            *h += cfg.damping * vi;
        }
    }
    Ok(hv)
}

/// `uᵀ ∂x∇θT` at `(x, θ)`: the change of `∇θT` when `x` moves along `u`.
pub fn mixed_vp_fd(
    grad_theta_fn: &dyn Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    theta: &[f64],
    u: &[f64],
    cfg: &FdConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let along_x = |xp: &[f64]| grad_theta_fn(xp, theta);
    match directional_fd(&along_x, x, u, None, cfg)? {
        Some(out) => Ok(out),
        None => Ok(vec![0.0; theta.len()]),
    }
}

/// Damped finite-difference Hessian of `grad_fn` at a fixed point.
pub struct FdHessian<'a> {
    grad_fn: &'a dyn Fn(&[f64]) -> Result<Vec<f64>>,
    x: Vec<f64>,
    base: Option<Vec<f64>>,
    cfg: FdConfig,
}

impl<'a> FdHessian<'a> {
    pub fn new(grad_fn: &'a dyn Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], cfg: FdConfig) -> Result<Self> {
        cfg.validate()?;
        let base = match cfg.scheme {
            FdScheme::Forward => Some(grad_fn(x)?),
            FdScheme::Central => None,
        };
        Ok(FdHessian { grad_fn, x: x.to_vec(), base, cfg })
    }
}

impl LinearOperator for FdHessian<'_> {
    fn dim(&self) -> usize {
        self.x.len()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        hvp_with_base(self.grad_fn, &self.x, v, self.base.as_deref(), &self.cfg)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_len(v: &[f64], n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::Shape(format!("{what} has length {}, expected {n}", v.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact() -> FdConfig {
        FdConfig { damping: 0.0, ..FdConfig::default() }
    }

    #[test]
    fn identity_solves_in_one_iteration() {
        let res = conjugate_gradient(&DenseMatrix::identity(3), &[1.0, 2.0, 3.0], 1e-10, 3).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        assert_eq!(res.solution, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn diagonal_system() {
        let res = conjugate_gradient(&DenseMatrix::diag(&[2.0, 4.0]), &[2.0, 8.0], 1e-12, 2).unwrap();
        assert!(res.converged);
        for (z, e) in res.solution.iter().zip([1.0, 2.0]) {
            assert!((z - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rhs_needs_no_iterations() {
        let res = conjugate_gradient(&DenseMatrix::identity(4), &[0.0; 4], 1e-6, 4).unwrap();
        assert_eq!(res.iterations, 0);
        assert_eq!(res.solution, vec![0.0; 4]);
    }

    #[test]
    fn indefinite_operator_is_reported() {
        let err = conjugate_gradient(&DenseMatrix::diag(&[1.0, -1.0]), &[0.0, 1.0], 1e-8, 2).unwrap_err();
        assert!(matches!(err, Error::Indefinite { iteration: 0, .. }), "{err}");
    }

    #[test]
    fn non_finite_inputs_abort() {
        let err = conjugate_gradient(&DenseMatrix::identity(2), &[f64::NAN, 1.0], 1e-8, 2).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        let bad = FnOperator::new(2, |_v: &[f64]| Ok(vec![f64::INFINITY, 0.0]));
        assert!(matches!(conjugate_gradient(&bad, &[1.0, 1.0], 1e-8, 2), Err(Error::NonFinite(_))));
    }

    #[test]
    fn operator_shape_is_checked() {
        let bad = FnOperator::new(2, |_v: &[f64]| Ok(vec![1.0]));
        assert!(matches!(conjugate_gradient(&bad, &[1.0, 1.0], 1e-8, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn hvp_of_zero_direction_is_zero() {
        let g = |x: &[f64]| Ok(x.iter().map(|v| v.powi(3)).collect());
        assert_eq!(hvp_fd(&g, &[1.0, 2.0], &[0.0, 0.0], &FdConfig::default()).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn hvp_is_exact_on_quadratics() {
        let g = |x: &[f64]| Ok(vec![2.0 * x[0], 4.0 * x[1]]);
        let hv = hvp_fd(&g, &[0.3, -0.7], &[1.0, 1.0], &exact()).unwrap();
        assert!((hv[0] - 2.0).abs() < 1e-8 && (hv[1] - 4.0).abs() < 1e-8, "{hv:?}");
    }

    #[test]
    fn damping_adds_scaled_direction() {
        let g = |x: &[f64]| Ok(vec![2.0 * x[0], 4.0 * x[1]]);
        let cfg = FdConfig { damping: 0.5, ..FdConfig::default() };
        let hv = hvp_fd(&g, &[0.0, 0.0], &[1.0, 2.0], &cfg).unwrap();
        assert!((hv[0] - 2.5).abs() < 1e-8 && (hv[1] - 9.0).abs() < 1e-8, "{hv:?}");
    }

    #[test]
    fn forward_scheme_matches_on_quadratics() {
        let g = |x: &[f64]| Ok(vec![2.0 * x[0] + x[1], x[0] + 4.0 * x[1]]);
        let cfg = FdConfig { scheme: FdScheme::Forward, ..exact() };
        let hv = hvp_fd(&g, &[1.0, 1.0], &[1.0, 0.0], &cfg).unwrap();
        assert!((hv[0] - 2.0).abs() < 1e-8 && (hv[1] - 1.0).abs() < 1e-8, "{hv:?}");
    }

    #[test]
    fn mixed_product_of_bilinear_form() {
        // T = θ·x: ∇θT = x, so the mixed product along u is u.
        let gt = |x: &[f64], _t: &[f64]| Ok(vec![x[0]]);
        let out = mixed_vp_fd(&gt, &[0.4], &[1.7], &[2.5], &exact()).unwrap();
        assert!((out[0] - 2.5).abs() < 1e-9, "{out:?}");
    }

    #[test]
    fn mixed_product_vanishes_without_theta_dependence() {
        let gt = |_x: &[f64], t: &[f64]| Ok(vec![0.0; t.len()]);
        assert_eq!(mixed_vp_fd(&gt, &[0.1, 0.2], &[1.0, 2.0, 3.0], &[1.0, -1.0], &exact()).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn mixed_product_rejects_non_finite_output() {
        let gt = |x: &[f64], _t: &[f64]| Ok(vec![if x[0] > 0.0 { f64::NAN } else { 0.0 }]);
        assert!(matches!(mixed_vp_fd(&gt, &[0.0], &[1.0], &[1.0], &exact()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn bad_fd_config_is_rejected() {
        let g = |x: &[f64]| Ok(x.to_vec());
        let cfg = FdConfig { eps0: 0.0, ..FdConfig::default() };
        assert!(hvp_fd(&g, &[1.0], &[1.0], &cfg).is_err());
        let cfg = FdConfig { damping: -1.0, ..FdConfig::default() };
        assert!(hvp_fd(&g, &[1.0], &[1.0], &cfg).is_err());
    }

    #[test]
    fn fd_hessian_solves_quadratic_system() {
        let g = |x: &[f64]| Ok(vec![3.0 * x[0] + x[1], x[0] + 2.0 * x[1]]);
        let h = FdHessian::new(&g, &[0.5, 0.5], exact()).unwrap();
        let res = conjugate_gradient(&h, &[1.0, 2.0], 1e-10, 10).unwrap();
        assert!(res.converged);
        assert!((res.solution[0]).abs() < 1e-7 && (res.solution[1] - 1.0).abs() < 1e-7, "{:?}", res.solution);
    }
}
