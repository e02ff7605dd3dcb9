//! The ρ-discounted Newton system.
//!
//! With `c(P) = c`, the Newton direction for the dual reduces to one n×n
//! symmetric positive-definite system in `d_u`,
//!
//! ```text
//! F(ρ) d_u = −∇_u g,    F(ρ) = D(r(P)) (I − ρ P_rc),
//! P_rc = D(r(P))⁻¹ P D(c(P))⁻¹ Pᵀ,
//! ```
//!
//! i.e. a Bellman equation with transition matrix `P_rc` and discount `ρ`.
//! `d_v = −P_c d_u` with `P_c = D(c(P))⁻¹ Pᵀ` then costs one product.
//! `newton_solve` anneals `1 − ρ` by factors of 4 until the undiscounted
//! residual meets the forcing tolerance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dual::DualState;
use crate::error::{OtError, Result};
use crate::tensor::{self, DenseMatrix};

/// Discount factors at or above this are treated as stagnation.
pub const RHO_CAP: f64 = 1.0 - 1e-12;
/// The true residual replaces the recurrence residual this often.
pub const RESIDUAL_REFRESH: usize = 50;
/// Largest system accepted by [`DiscountedSystem::lambda2`].
pub const LAMBDA2_MAX_N: usize = 2048;

#[derive(Debug, Clone)]
pub struct DiscountedSystem {
    plan: DenseMatrix,
    r_p: Vec<f64>,
    c_p: Vec<f64>,
    mu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub d: Vec<f64>,
    pub iters: usize,
    pub residual_l1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonResult {
    pub d_u: Vec<f64>,
    /// Discount of the last CG solve, or the initial discount if none ran.
    pub rho_final: f64,
    pub cg_iters: usize,
    /// Number of discount levels that needed a CG solve.
    pub cg_solves: usize,
    /// `‖F(1) d_u + ∇_u g‖₁` at exit.
    pub undiscounted_residual_l1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NewtonOptions {
    /// Start every CG solve from zero instead of the previous direction.
    pub cg_zero_init: bool,
    /// Per-solve CG iteration cap; `None` means `10 n`.
    pub max_cg_iters: Option<usize>,
}

impl DiscountedSystem {
    /// `r_p`, `c_p` must be the row and column sums of `plan`, strictly positive.
    pub fn new(plan: DenseMatrix, r_p: Vec<f64>, c_p: Vec<f64>) -> Result<Self> {
        if plan.rows() != r_p.len() || plan.cols() != c_p.len() || plan.rows() != plan.cols() {
            return Err(OtError::Dimension(format!(
                "{}x{} plan with sums of lengths {} and {}",
                plan.rows(),
                plan.cols(),
                r_p.len(),
                c_p.len()
            )));
        }
        if let Some(x) = r_p.iter().chain(&c_p).find(|x| !(**x > 0.0) || !x.is_finite()) {
            return Err(OtError::Domain(format!("plan marginal entry {x} is not strictly positive")));
        }
        let mu = tensor::map_rows(&plan, |i, row| {
            row.iter().zip(&c_p).map(|(p, c)| p * p / c).sum::<f64>() / r_p[i]
        });
        crate::ops::tick();
        Ok(Self { plan, r_p, c_p, mu })
    }

    /// Materializes the plan of `state`, taking both marginals from its
    /// log-domain caches.
    pub fn from_state(state: &DualState<'_>) -> Result<Self> {
        let plan = state.materialize_plan()?;
        Self::new(plan, state.row_sums()?, state.col_sums()?)
    }

    pub fn n(&self) -> usize {
        self.r_p.len()
    }

    pub fn plan(&self) -> &DenseMatrix {
        &self.plan
    }

    pub fn row_sums(&self) -> &[f64] {
        &self.r_p
    }

    pub fn col_sums(&self) -> &[f64] {
        &self.c_p
    }

    /// `P_c d = D(c(P))⁻¹ Pᵀ d`.
    pub fn apply_pc(&self, d: &[f64]) -> Vec<f64> {
        let mut w = self.plan.matvec_t(d);
        for (w, c) in w.iter_mut().zip(&self.c_p) {
            *w /= c;
        }
        w
    }

    /// `P_rc d`, as two matrix-vector products.
    pub fn apply_prc(&self, d: &[f64]) -> Vec<f64> {
        let w = self.apply_pc(d);
        let mut y = self.plan.matvec(&w);
        for (y, r) in y.iter_mut().zip(&self.r_p) {
            *y /= r;
        }
        y
    }

    /// `F(ρ) d = r(P) ∘ d − ρ P D(c(P))⁻¹ Pᵀ d`.
    pub fn apply_f(&self, rho: f64, d: &[f64]) -> Vec<f64> {
        if rho == 0.0 {
            return d.iter().zip(&self.r_p).map(|(d, r)| r * d).collect();
        }
        let w = self.apply_pc(d);
        let pw = self.plan.matvec(&w);
        d.iter()
            .zip(&self.r_p)
            .zip(&pw)
            .map(|((d, r), p)| r * d - rho * p)
            .collect()
    }

    /// `μ = diag(P_rc)`, `μ_i = Σ_j P_ij² / (r(P)_i c(P)_j)`.
    pub fn diag_prc(&self) -> &[f64] {
        &self.mu
    }

    /// Jacobi preconditioner `diag(F(ρ)) = r(P) ∘ (1 − ρ μ)`.
    pub fn preconditioner(&self, rho: f64) -> Result<Vec<f64>> {
        let m: Vec<f64> = self.r_p.iter().zip(&self.mu).map(|(r, mu)| r * (1.0 - rho * mu)).collect();
        if let Some((i, x)) = m.iter().enumerate().find(|(_, x)| !(**x > 0.0)) {
            return Err(OtError::Conditioning(format!(
                "preconditioner entry {i} is {x:e} at rho = {rho}"
            )));
        }
        Ok(m)
    }

    /// Diagonally preconditioned CG for `F(ρ) d = b`, stopping once the
    /// residual has l1 norm at most `tol_l1`.
    pub fn pcg_solve(&self, rho: f64, b: &[f64], tol_l1: f64, d0: &[f64], max_iters: usize) -> Result<CgOutcome> {
        if !(0.0..1.0).contains(&rho) {
            return Err(OtError::Domain(format!("discount {rho} outside [0, 1)")));
        }
        if !(tol_l1 > 0.0) {
            return Err(OtError::Domain(format!("CG tolerance {tol_l1} must be positive")));
        }
        let m = self.preconditioner(rho)?;
        let mut x = d0.to_vec();
        let true_residual = |x: &[f64]| -> Vec<f64> {
            let fx = self.apply_f(rho, x);
            b.iter().zip(&fx).map(|(b, f)| b - f).collect()
        };
        let mut res = true_residual(&x);
        let mut res_l1 = tensor::norm_l1(&res);
        if res_l1 <= tol_l1 {
            return Ok(CgOutcome {
                d: x,
                iters: 0,
                residual_l1: res_l1,
            });
        }
        let mut z: Vec<f64> = res.iter().zip(&m).map(|(r, m)| r / m).collect();
        let mut p = z.clone();
        let mut rz = tensor::dot(&res, &z);
        let (mut best, mut best_l1) = (x.clone(), res_l1);
        let mut iters = 0;
        for k in 1..=max_iters {
            iters = k;
            let q = self.apply_f(rho, &p);
            let pq = tensor::dot(&p, &q);
            if !(pq > 0.0) {
                return Err(OtError::Conditioning(format!(
                    "CG curvature p'Fp = {pq:e} at iteration {k} (rho = {rho})"
                )));
            }
            let alpha = rz / pq;
            if !alpha.is_finite() {
                // Curvature underflow at the precision floor: no further progress.
                break;
            }
            for ((x, r), (p, q)) in x.iter_mut().zip(res.iter_mut()).zip(p.iter().zip(&q)) {
                *x += alpha * p;
                *r -= alpha * q;
            }
            let refreshed = k % RESIDUAL_REFRESH == 0;
            if refreshed {
                res = true_residual(&x);
            }
            res_l1 = tensor::norm_l1(&res);
            let mut restart = false;
            if res_l1 <= tol_l1 && !refreshed {
                // The recursive residual drifts from the true one on badly
                // conditioned systems; only the true residual may stop CG.
                res = true_residual(&x);
                res_l1 = tensor::norm_l1(&res);
                restart = true;
            }
            if (refreshed || restart) && res_l1 < best_l1 {
                best_l1 = res_l1;
                best.copy_from_slice(&x);
            }
            if res_l1 <= tol_l1 {
                return Ok(CgOutcome {
                    d: x,
                    iters: k,
                    residual_l1: res_l1,
                });
            }
            for ((z, r), m) in z.iter_mut().zip(&res).zip(&m) {
                *z = r / m;
            }
            let rz_new = tensor::dot(&res, &z);
            // A replaced residual no longer pairs with the old direction.
            let beta = if restart { 0.0 } else { rz_new / rz };
            rz = rz_new;
            for (p, z) in p.iter_mut().zip(&z) {
                *p = z + beta * *p;
            }
        }
        let last_l1 = tensor::norm_l1(&true_residual(&x));
        if last_l1 < best_l1 {
            best_l1 = last_l1;
            best.copy_from_slice(&x);
        }
        Err(OtError::CgNonConvergence {
            iters,
            residual_l1: best_l1,
            best,
        })
    }

    /// Undiscounted residual `F(1) d_u + ∇_u g`.
    pub fn newton_residual(&self, grad_u: &[f64], d_u: &[f64]) -> Vec<f64> {
        let f = self.apply_f(1.0, d_u);
        f.iter().zip(grad_u).map(|(f, g)| f + g).collect()
    }

    /// Truncated Newton direction by discount annealing: starting from the
    /// Jacobi guess `−∇_u g / r(P)` and `ρ = ρ₀`, solve `F(ρ) d_u = −∇_u g`
    /// to `(η/4)‖∇_u g‖₁` and move `ρ ← 1 − (1 − ρ)/4` until
    /// `‖F(1) d_u + ∇_u g‖₁ ≤ η ‖∇_u g‖₁`.
    pub fn newton_solve(&self, grad_u: &[f64], eta: f64, rho0: f64, opts: NewtonOptions) -> Result<NewtonResult> {
        if !(eta > 0.0) {
            return Err(OtError::Domain(format!("forcing tolerance {eta} must be positive")));
        }
        if !(0.0..1.0).contains(&rho0) {
            return Err(OtError::Domain(format!("initial discount {rho0} outside [0, 1)")));
        }
        let n = self.n();
        let grad_l1 = tensor::norm_l1(grad_u);
        if grad_l1 == 0.0 {
            return Ok(NewtonResult {
                d_u: vec![0.0; n],
                rho_final: rho0,
                cg_iters: 0,
                cg_solves: 0,
                undiscounted_residual_l1: 0.0,
            });
        }
        let target = eta * grad_l1;
        let cg_tol = 0.25 * eta * grad_l1;
        let max_iters = opts.max_cg_iters.unwrap_or(10 * n);
        let b: Vec<f64> = grad_u.iter().map(|g| -g).collect();

        let mut d: Vec<f64> = b.iter().zip(&self.r_p).map(|(b, r)| b / r).collect();
        let mut rho = rho0;
        let mut rho_final = rho0;
        let mut cg_iters = 0;
        let mut cg_solves = 0;
        loop {
            let residual = tensor::norm_l1(&self.newton_residual(grad_u, &d));
            if residual <= target {
                return Ok(NewtonResult {
                    d_u: d,
                    rho_final,
                    cg_iters,
                    cg_solves,
                    undiscounted_residual_l1: residual,
                });
            }
            if rho >= RHO_CAP {
                return Err(OtError::Stagnation {
                    rho: rho_final,
                    residual_l1: residual,
                    target,
                    best: d,
                    cg_iters,
                });
            }
            let start = if opts.cg_zero_init { vec![0.0; n] } else { d };
            let out = self.pcg_solve(rho, &b, cg_tol, &start, max_iters)?;
            d = out.d;
            cg_iters += out.iters;
            cg_solves += 1;
            rho_final = rho;
            rho = 1.0 - (1.0 - rho) / 4.0;
        }
    }

    /// Dense `P_rc`. O(n³); for diagnostics and tests.
    pub fn dense_prc(&self) -> DenseMatrix {
        let n = self.n();
        let p = &self.plan;
        DenseMatrix::from_fn(n, n, |i, k| {
            (0..n).map(|j| p.get(i, j) * p.get(k, j) / self.c_p[j]).sum::<f64>() / self.r_p[i]
        })
    }

    /// Dense `F(ρ)`. O(n³); for diagnostics and tests.
    pub fn dense_f(&self, rho: f64) -> DenseMatrix {
        let prc = self.dense_prc();
        let n = self.n();
        DenseMatrix::from_fn(n, n, |i, k| {
            let id = if i == k { 1.0 } else { 0.0 };
            self.r_p[i] * (id - rho * prc.get(i, k))
        })
    }

    /// Second largest eigenvalue of `P_rc`, via the symmetric matrix
    /// `D(r(P))^{1/2} P_rc D(r(P))^{-1/2}`.
    pub fn lambda2(&self) -> Result<f64> {
        let n = self.n();
        if n > LAMBDA2_MAX_N {
            return Err(OtError::Refused(format!(
                "dense eigensolve for n = {n} exceeds the limit of {LAMBDA2_MAX_N}"
            )));
        }
        if n < 2 {
            return Err(OtError::Dimension("lambda2 needs n >= 2".into()));
        }
        let p = &self.plan;
        // B = D(r)^{-1/2} P D(c)^{-1/2}; S = B Bᵀ.
        let b = DMatrix::from_fn(n, n, |i, j| p.get(i, j) / (self.r_p[i] * self.c_p[j]).sqrt());
        let s = &b * b.transpose();
        let mut eig: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        if (eig[0] - 1.0).abs() > 1e-8 {
            return Err(OtError::Domain(format!(
                "leading eigenvalue of P_rc is {} (expected 1); plan sums are inconsistent",
                eig[0]
            )));
        }
        Ok(eig[1])
    }
}

/// Initial discount for the next Newton solve: one annealing step below the
/// previous final discount, `max(0, 1 − 4(1 − ρ_old))`.
pub fn next_rho0(rho_old: f64) -> f64 {
    (1.0 - (1.0 - rho_old) * 4.0).max(0.0)
}
