//! Bregman projection by truncated Newton steps on the dual.
//!
//! Each step first restores `χ²(r | r(P)) ≤ ε^{2/5}` with row/column Sinkhorn
//! sweeps, then solves the discounted Newton system for `d_u`, sets
//! `d_v = −P_c d_u`, and backtracks on the Armijo condition written in terms
//! of the plan mass (valid because `c(P) = c` holds between steps).

use serde::{Deserialize, Serialize};

use crate::bellman::{next_rho0, DiscountedSystem, NewtonOptions, NewtonResult};
use crate::dual::DualState;
use crate::error::{OtError, Result};
use crate::ops::{self, Category};
use crate::tensor::{self, DenseMatrix};

pub const ARMIJO_C1: f64 = 0.01;
pub const ETA_MAX: f64 = 0.99;

/// Largest `α max|d_u|` for which trial column sums are evaluated from the
/// materialized plan; beyond it the log-domain reduction is used.
const PLAN_TRIAL_LIMIT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectorOptions {
    /// Start each Newton solve one annealing level below the previous final discount.
    pub adaptive_rho0: bool,
    pub newton: NewtonOptions,
    pub max_newton_steps: usize,
    pub max_sinkhorn_steps: usize,
    pub min_alpha: f64,
}

impl Default for ProjectorOptions {
    fn default() -> Self {
        Self {
            adaptive_rho0: true,
            newton: NewtonOptions::default(),
            max_newton_steps: 200,
            max_sinkhorn_steps: 1_000_000,
            min_alpha: (2.0f64).powi(-30),
        }
    }
}

/// Telemetry for one Newton step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonStep {
    pub grad_before: f64,
    pub grad_after: f64,
    pub eta: f64,
    pub alpha: f64,
    pub backtracks: usize,
    pub cg_iters: usize,
    pub rho: f64,
    pub delta: f64,
    /// η came from the over-solve branch and the projection finished right after this step.
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProjStats {
    pub newton_steps: usize,
    pub cg_iters: usize,
    pub sinkhorn_steps: usize,
    pub backtracks: usize,
    /// Smallest actual/predicted reduction ratio over non-terminal steps; `+inf` if none.
    pub delta_min: f64,
    /// Same, including terminal over-solve steps.
    pub delta_min_all: f64,
    /// `‖r − r(P)‖₁` before the closing row scaling; bounds `‖∇g‖₁` after it.
    pub grad_norm_final: f64,
    pub rho_final: f64,
    /// Sinkhorn sweeps taken in place of a non-descent Newton direction.
    pub fallback_sweeps: usize,
    /// Newton steps that used a direction failing the forcing test.
    pub truncated_directions: usize,
    pub steps: Vec<NewtonStep>,
}

/// Forcing term `max(‖∇g‖₁, 0.8 ε / ‖∇g‖₁)`, capped at 0.99.
pub fn eta_rule(grad_norm_l1: f64, eps_d: f64) -> f64 {
    grad_norm_l1.max(0.8 * eps_d / grad_norm_l1).min(ETA_MAX)
}

/// Ratio of actual to predicted reduction of the gradient norm.
pub fn delta_ratio(grad_k: f64, grad_k1: f64, eta_k: f64) -> f64 {
    (grad_k - grad_k1) / ((1.0 - eta_k) * grad_k)
}

/// Armijo test `Σ c(P_α) − 1 ≤ (1 − c₁) α ⟨−∇_u g, d_u⟩`, with `c₁ = 0.01`.
pub fn armijo_accept(alpha: f64, mass_at_alpha: f64, grad_u: &[f64], d_u: &[f64]) -> Result<bool> {
    let slope = -tensor::dot(grad_u, d_u);
    if slope < 0.0 || (slope == 0.0 && d_u.iter().any(|&d| d != 0.0)) {
        return Err(OtError::NotDescent { slope });
    }
    Ok(accept_excess(alpha, mass_at_alpha - 1.0, slope))
}

fn accept_excess(alpha: f64, mass_excess: f64, slope: f64) -> bool {
    mass_excess <= (1.0 - ARMIJO_C1) * alpha * slope
}

fn logs(p: &[f64]) -> Vec<f64> {
    p.iter().map(|x| x.ln()).collect()
}

fn chi_sq_from_logs(log_r: &[f64], log_rp: &[f64]) -> f64 {
    log_r.iter().zip(log_rp).map(|(lr, lp)| (2.0 * lr - lp).exp()).sum::<f64>() - 1.0
}

/// One full Sinkhorn sweep: row scaling, column rebalancing, row-sum refresh.
fn sweep(state: &mut DualState<'_>, log_r: &[f64], log_c: &[f64]) -> Result<()> {
    let log_rp = state
        .log_row_sums()
        .ok_or_else(|| OtError::Domain("row sums are stale".into()))?
        .to_vec();
    for ((u, lr), lp) in state.u_mut().iter_mut().zip(log_r).zip(&log_rp) {
        *u += lr - lp;
    }
    state.balance_cols(log_c)?;
    state.refresh_row_sums()?;
    Ok(())
}

/// Sinkhorn sweeps until `χ²(r | r(P)) ≤ eps_chi`, keeping `c(P) = c`.
/// Expects fresh row sums and `c(P) = c` on entry.
pub fn chi_sinkhorn(state: &mut DualState<'_>, r: &[f64], c: &[f64], eps_chi: f64, max_steps: usize) -> Result<usize> {
    let log_r = logs(r);
    let log_c = logs(c);
    chi_sinkhorn_logs(state, &log_r, &log_c, eps_chi, max_steps)
}

fn chi_sinkhorn_logs(
    state: &mut DualState<'_>,
    log_r: &[f64],
    log_c: &[f64],
    eps_chi: f64,
    max_steps: usize,
) -> Result<usize> {
    let mut steps = 0;
    loop {
        let log_rp = state
            .log_row_sums()
            .ok_or_else(|| OtError::Domain("row sums are stale".into()))?;
        let chi = chi_sq_from_logs(log_r, log_rp);
        if chi <= eps_chi {
            return Ok(steps);
        }
        if steps == max_steps {
            return Err(OtError::NonConvergence {
                what: "ChiSinkhorn",
                budget: max_steps,
                grad_norm_l1: chi,
                target: eps_chi,
            });
        }
        sweep(state, log_r, log_c)?;
        steps += 1;
    }
}

/// `log c(P_α)_j − log c_j` at the trial point `(u + α d_u, v + α d_v)`.
fn trial_col_log_ratio(
    state: &DualState<'_>,
    sys: &DiscountedSystem,
    log_c: &[f64],
    d_u: &[f64],
    d_v: &[f64],
    alpha: f64,
) -> Vec<f64> {
    let reach = alpha * tensor::norm_inf(d_u);
    if reach <= PLAN_TRIAL_LIMIT {
        // c(P_α)_j / c_j = exp(α d_v_j) (1 + Σ_i P_ij (exp(α d_u_i) − 1) / c_j),
        // which stays accurate when the step is tiny.
        let w: Vec<f64> = d_u.iter().map(|d| (alpha * d).exp_m1()).collect();
        let s = sys.plan().matvec_t(&w);
        s.iter()
            .zip(sys.col_sums())
            .zip(d_v)
            .map(|((s, c), dv)| alpha * dv + (s / c).ln_1p())
            .collect()
    } else {
        let shifted: Vec<f64> = state.u().iter().zip(d_u).map(|(u, d)| u + alpha * d).collect();
        let lse = tensor::lse_cols_affine(state.cost(), state.gamma(), &shifted);
        lse.iter()
            .zip(state.v())
            .zip(d_v)
            .zip(log_c)
            .map(|(((l, v), dv), lc)| v + alpha * dv + l - lc)
            .collect()
    }
}

fn mass_excess(c: &[f64], log_ratio: &[f64]) -> f64 {
    c.iter().zip(log_ratio).map(|(c, l)| c * l.exp_m1()).sum()
}

/// Minimizes the dual at fixed `γ` until `‖∇g‖₁ ≤ eps_d`.
///
/// `rho0` carries the initial discount across calls; it is updated after
/// every Newton solve when `opts.adaptive_rho0` is set. On return the row
/// marginal is matched exactly and `‖c(P) − c‖₁ ≤ eps_d`; the caches of
/// `state` are stale.
pub fn project(
    state: &mut DualState<'_>,
    r: &[f64],
    c: &[f64],
    eps_d: f64,
    rho0: &mut f64,
    opts: &ProjectorOptions,
) -> Result<ProjStats> {
    if !(eps_d > 0.0) {
        return Err(OtError::Domain(format!("projection tolerance {eps_d} must be positive")));
    }
    if let Some(x) = r.iter().chain(c).find(|x| !(**x > 0.0)) {
        return Err(OtError::Domain(format!("marginal entry {x} is not strictly positive")));
    }
    let log_r = logs(r);
    let log_c = logs(c);
    let eps_chi = eps_d.powf(0.4);
    let mut stats = ProjStats {
        delta_min: f64::INFINITY,
        delta_min_all: f64::INFINITY,
        rho_final: *rho0,
        ..Default::default()
    };

    let _md = ops::scope(Category::MirrorDescent);
    state.balance_cols(&log_c)?;
    state.refresh_row_sums()?;
    let grad_norm = |state: &DualState<'_>| -> f64 {
        let log_rp = state.log_row_sums().expect("row sums refreshed");
        log_rp.iter().zip(r).map(|(l, r)| (l.exp() - r).abs()).sum()
    };

    let mut g = grad_norm(state);
    while g > eps_d {
        if stats.newton_steps == opts.max_newton_steps {
            return Err(OtError::NonConvergence {
                what: "TruncatedNewtonProject",
                budget: opts.max_newton_steps,
                grad_norm_l1: g,
                target: eps_d,
            });
        }
        {
            let _s = ops::scope(Category::ChiSinkhorn);
            stats.sinkhorn_steps += chi_sinkhorn_logs(state, &log_r, &log_c, eps_chi, opts.max_sinkhorn_steps)?;
        }
        g = grad_norm(state);
        if g <= eps_d {
            break;
        }
        let eta = eta_rule(g, eps_d);
        let over_solve = 0.8 * eps_d / g > g;

        let _n = ops::scope(Category::NewtonSolve);
        let sys = DiscountedSystem::from_state(state)?;
        let grad_u: Vec<f64> = sys.row_sums().iter().zip(r).map(|(p, r)| p - r).collect();
        let newton = match sys.newton_solve(&grad_u, eta, *rho0, opts.newton) {
            Ok(newton) => {
                if opts.adaptive_rho0 {
                    *rho0 = next_rho0(newton.rho_final);
                }
                newton
            }
            // Discounting ran into its cap (or CG into its budget) before the
            // forcing test passed, typically on a near-reducible P_rc. The last
            // iterate solves a positive-definite system, so it is still a
            // descent direction; take it with line search and keep ρ₀ as is.
            Err(OtError::Stagnation {
                rho,
                residual_l1,
                best,
                cg_iters,
                ..
            }) => {
                stats.truncated_directions += 1;
                NewtonResult {
                    d_u: best,
                    rho_final: rho,
                    cg_iters,
                    cg_solves: 0,
                    undiscounted_residual_l1: residual_l1,
                }
            }
            Err(OtError::CgNonConvergence {
                iters, residual_l1, best, ..
            }) => {
                stats.truncated_directions += 1;
                NewtonResult {
                    d_u: best,
                    rho_final: *rho0,
                    cg_iters: iters,
                    cg_solves: 0,
                    undiscounted_residual_l1: residual_l1,
                }
            }
            Err(e) => return Err(e),
        };
        stats.rho_final = newton.rho_final;
        stats.cg_iters += newton.cg_iters;
        let d_u = newton.d_u;
        let slope = -tensor::dot(&grad_u, &d_u);
        if !(slope > 0.0) {
            let _s = ops::scope(Category::ChiSinkhorn);
            sweep(state, &log_r, &log_c)?;
            stats.sinkhorn_steps += 1;
            stats.fallback_sweeps += 1;
            stats.newton_steps += 1;
            g = grad_norm(state);
            continue;
        }
        let d_v: Vec<f64> = sys.apply_pc(&d_u).iter().map(|x| -x).collect();

        let mut alpha = 1.0;
        let mut backtracks = 0;
        let mut ratio = trial_col_log_ratio(state, &sys, &log_c, &d_u, &d_v, alpha);
        while !accept_excess(alpha, mass_excess(sys.col_sums(), &ratio), slope) {
            alpha *= 0.5;
            backtracks += 1;
            if alpha < opts.min_alpha {
                return Err(OtError::LineSearch {
                    min_alpha: opts.min_alpha,
                    grad_norm_l1: g,
                });
            }
            let _l = ops::scope(Category::LineSearch);
            ratio = trial_col_log_ratio(state, &sys, &log_c, &d_u, &d_v, alpha);
        }

        // u += α d_u, then v += α d_v + log c − log c(P_α) restores c(P) = c.
        for (u, d) in state.u_mut().iter_mut().zip(&d_u) {
            *u += alpha * d;
        }
        for ((v, dv), l) in state.v_mut().iter_mut().zip(&d_v).zip(&ratio) {
            *v += alpha * dv - l;
        }
        state.assume_col_sums(log_c.clone());
        state.refresh_row_sums()?;

        let g_next = grad_norm(state);
        let delta = delta_ratio(g, g_next, eta);
        let terminal = over_solve && g_next <= eps_d;
        stats.newton_steps += 1;
        stats.backtracks += backtracks;
        stats.delta_min_all = stats.delta_min_all.min(delta);
        if !terminal {
            stats.delta_min = stats.delta_min.min(delta);
        }
        stats.steps.push(NewtonStep {
            grad_before: g,
            grad_after: g_next,
            eta,
            alpha,
            backtracks,
            cg_iters: newton.cg_iters,
            rho: newton.rho_final,
            delta,
            terminal,
        });
        g = g_next;
    }
    stats.grad_norm_final = g;

    let log_rp = state.log_row_sums().expect("row sums refreshed").to_vec();
    for ((u, lr), lp) in state.u_mut().iter_mut().zip(&log_r).zip(&log_rp) {
        *u += lr - lp;
    }
    Ok(stats)
}

/// Dense plan of a state at its current potentials; convenience for callers
/// that only hold potentials.
pub fn plan_of(cost: &DenseMatrix, u: &[f64], v: &[f64], gamma: f64) -> Result<DenseMatrix> {
    DualState::new(cost, u.to_vec(), v.to_vec(), gamma)?.materialize_plan()
}
