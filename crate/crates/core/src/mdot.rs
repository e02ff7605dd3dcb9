//! Mirror-descent annealing over the inverse temperature.
//!
//! Each outer iteration smooths the marginals, projects the current
//! potentials at the current `γ` to a tolerance that tightens as `γ^p`, and
//! warm-starts the next temperature by linear extrapolation in `γ`. The final
//! plan is rounded onto the feasible set of the original marginals.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dual::DualState;
use crate::error::{OtError, Result};
use crate::ops::{self, Category};
use crate::oracles::sinkhorn_project;
use crate::problem::Problem;
use crate::projector::{project, ProjStats, ProjectorOptions};
use crate::report::{RunReport, TraceRow};
use crate::tensor::{self, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverKind {
    #[serde(rename = "mdot-tn")]
    TruncatedNewton,
    #[serde(rename = "mdot-sinkhorn")]
    Sinkhorn,
}

impl std::str::FromStr for SolverKind {
    type Err = OtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mdot-tn" => Ok(SolverKind::TruncatedNewton),
            "mdot-sinkhorn" => Ok(SolverKind::Sinkhorn),
            _ => Err(OtError::Domain(format!(
                "unknown solver '{s}' (expected mdot-tn or mdot-sinkhorn)"
            ))),
        }
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolverKind::TruncatedNewton => "mdot-tn",
            SolverKind::Sinkhorn => "mdot-sinkhorn",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdotOptions {
    pub solver: SolverKind,
    /// Adjust the temperature ratio from each projection's δ_min.
    pub adaptive_q: bool,
    /// Row share of the smoothing budget; the column share is `1/2 − w_r`.
    pub w_r: f64,
    pub projector: ProjectorOptions,
    /// Sweep budget per projection for the Sinkhorn projector.
    pub max_sinkhorn_steps: usize,
}

impl Default for MdotOptions {
    fn default() -> Self {
        Self {
            solver: SolverKind::TruncatedNewton,
            adaptive_q: true,
            w_r: 0.45,
            projector: ProjectorOptions::default(),
            max_sinkhorn_steps: 1_000_000,
        }
    }
}

/// Projection telemetry for one outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub t: usize,
    pub gamma: f64,
    pub eps_d: f64,
    pub stats: ProjStats,
}

#[derive(Debug, Clone)]
pub struct Solution {
    /// Rounded plan, feasible for the original marginals.
    pub plan: DenseMatrix,
    pub primal_cost: f64,
    pub error_bound: f64,
    pub report: RunReport,
    pub trace: Vec<TraceRow>,
    pub outer: Vec<OuterRecord>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Projection tolerance `min(H(r), H(c)) / γ^p`.
pub fn eps_rule(gamma: f64, p: f64, r: &[f64], c: &[f64]) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(OtError::Domain(format!("inverse temperature {gamma} must be positive")));
    }
    Ok(min_entropy(r, c)? / gamma.powf(p))
}

fn min_entropy(r: &[f64], c: &[f64]) -> Result<f64> {
    Ok(tensor::shannon_entropy(r)?.min(tensor::shannon_entropy(c)?))
}

fn mix_uniform(p: &[f64], weight: f64) -> Vec<f64> {
    let n = p.len() as f64;
    p.iter().map(|x| (1.0 - weight) * x + weight / n).collect()
}

/// Mixes each marginal with the uniform distribution, spending `w_r · eps_d`
/// on the rows and `w_c · eps_d` on the columns.
pub fn smooth_marginals(r: &[f64], c: &[f64], eps_d: f64, w_r: f64, w_c: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(eps_d > 0.0 && eps_d < 1.0) {
        return Err(OtError::Domain(format!("smoothing budget {eps_d} outside (0, 1)")));
    }
    if !(w_r > w_c && w_c > 0.0 && (w_r + w_c - 0.5).abs() < 1e-12) {
        return Err(OtError::Domain(format!(
            "smoothing weights ({w_r}, {w_c}) must satisfy w_r > w_c > 0 and w_r + w_c = 1/2"
        )));
    }
    Ok((mix_uniform(r, w_r * eps_d), mix_uniform(c, w_c * eps_d)))
}

/// Next temperature ratio from the worst Newton step of the last projection.
pub fn adjust_schedule(q: f64, delta_min: f64) -> f64 {
    if delta_min > 0.95 {
        (q * q).min(2.0)
    } else if delta_min < 0.8 {
        q.sqrt()
    } else {
        q
    }
}

/// First-order warm start `z_t + (γ_next − γ_t)/(γ_t − γ_{t−1}) (z_t − z_{t−1})`.
pub fn extrapolate(z_t: &[f64], z_tm1: &[f64], gamma_next: f64, gamma_t: f64, gamma_tm1: f64) -> Result<Vec<f64>> {
    if !(gamma_t > gamma_tm1) {
        return Err(OtError::Domain(format!(
            "temperatures must increase (got {gamma_tm1} then {gamma_t})"
        )));
    }
    let s = (gamma_next - gamma_t) / (gamma_t - gamma_tm1);
    Ok(z_t.iter().zip(z_tm1).map(|(a, b)| a + s * (a - b)).collect())
}

/// Guaranteed suboptimality `2 min(H(r), H(c)) / γ_f` of the rounded plan.
pub fn error_bound(gamma_f: f64, r: &[f64], c: &[f64]) -> Result<f64> {
    if !(gamma_f > 0.0) {
        return Err(OtError::Domain(format!("inverse temperature {gamma_f} must be positive")));
    }
    Ok(2.0 * min_entropy(r, c)? / gamma_f)
}

/// Rounds a nonnegative plan onto the transportation polytope: shrink rows
/// that overshoot, shrink columns that overshoot, then distribute the missing
/// mass with a rank-one correction.
pub fn round_plan(plan: &DenseMatrix, r: &[f64], c: &[f64]) -> Result<DenseMatrix> {
    let (m, n) = (plan.rows(), plan.cols());
    if r.len() != m || c.len() != n {
        return Err(OtError::Dimension(format!(
            "plan is {m}x{n}, marginals have {} and {} entries",
            r.len(),
            c.len()
        )));
    }
    if plan.data().iter().any(|x| !(*x >= 0.0)) {
        return Err(OtError::Domain("plan has negative or NaN entries".into()));
    }
    let rp = plan.row_sums();
    if !(rp.iter().sum::<f64>() > 0.0) {
        return Err(OtError::Degenerate("plan has zero total mass".into()));
    }
    let x: Vec<f64> = r.iter().zip(&rp).map(|(r, p)| if *p > *r { r / p } else { 1.0 }).collect();
    let mut out = plan.clone();
    ops::tick();
    for (row, s) in out.data_mut().chunks_mut(n.max(1)).zip(&x) {
        row.iter_mut().for_each(|e| *e *= s);
    }
    let cp = out.col_sums();
    let y: Vec<f64> = c.iter().zip(&cp).map(|(c, p)| if *p > *c { c / p } else { 1.0 }).collect();
    ops::tick();
    for row in out.data_mut().chunks_mut(n.max(1)) {
        row.iter_mut().zip(&y).for_each(|(e, s)| *e *= s);
    }
    let err_r: Vec<f64> = r.iter().zip(out.row_sums()).map(|(r, p)| (r - p).max(0.0)).collect();
    let err_c: Vec<f64> = c.iter().zip(out.col_sums()).map(|(c, p)| (c - p).max(0.0)).collect();
    let total = tensor::norm_l1(&err_r);
    if total > 0.0 {
        ops::tick();
        for (row, er) in out.data_mut().chunks_mut(n.max(1)).zip(&err_r) {
            let s = er / total;
            row.iter_mut().zip(&err_c).for_each(|(e, ec)| *e += s * ec);
        }
    }
    Ok(out)
}

fn validate(gamma_i: f64, gamma_f: f64, p: f64, q_init: f64, opts: &MdotOptions) -> Result<()> {
    if !(gamma_i > 0.0 && gamma_i.is_finite() && gamma_f > 0.0 && gamma_f.is_finite()) {
        return Err(OtError::Domain(format!(
            "temperatures must be positive and finite (gamma_i = {gamma_i}, gamma_f = {gamma_f})"
        )));
    }
    if !(p >= 1.0) {
        return Err(OtError::Domain(format!("tolerance exponent p = {p} must be at least 1")));
    }
    if !(q_init > 1.0) {
        return Err(OtError::Domain(format!("temperature ratio q = {q_init} must exceed 1")));
    }
    if !(opts.w_r > 0.25 && opts.w_r < 0.5) {
        return Err(OtError::Domain(format!("row smoothing weight {} outside (1/4, 1/2)", opts.w_r)));
    }
    Ok(())
}

fn project_once(
    state: &mut DualState<'_>,
    r: &[f64],
    c: &[f64],
    eps: f64,
    rho0: &mut f64,
    opts: &MdotOptions,
) -> Result<ProjStats> {
    match opts.solver {
        SolverKind::TruncatedNewton => project(state, r, c, eps, rho0, &opts.projector),
        SolverKind::Sinkhorn => {
            let steps = sinkhorn_project(state, r, c, eps, opts.max_sinkhorn_steps)?;
            let log_rp = state.log_row_sums().expect("sinkhorn leaves fresh row sums");
            Ok(ProjStats {
                sinkhorn_steps: steps,
                delta_min: f64::INFINITY,
                delta_min_all: f64::INFINITY,
                grad_norm_final: log_rp.iter().zip(r).map(|(l, r)| (l.exp() - r).abs()).sum(),
                rho_final: 0.0,
                ..Default::default()
            })
        }
    }
}

/// Solves the entropic OT problem along an increasing temperature schedule
/// from `γ_i` to `γ_f` and returns the rounded plan.
///
/// `γ_f ≤ γ_i` runs a single projection at `γ_f`. A marginal with zero
/// entropy has the product plan as its only feasible point, which is returned
/// directly.
pub fn mdot(problem: &Problem, gamma_i: f64, gamma_f: f64, p: f64, q_init: f64, opts: &MdotOptions) -> Result<Solution> {
    validate(gamma_i, gamma_f, p, q_init, opts)?;
    let start = Instant::now();
    let ops_start = ops::snapshot();
    let _md = ops::scope(Category::MirrorDescent);
    let (cost, r, c) = (&problem.cost, &problem.r[..], &problem.c[..]);
    let n = problem.n();
    let w_c = 0.5 - opts.w_r;
    let bound = error_bound(gamma_f, r, c)?;

    let mut trace = Vec::new();
    let mut outer = Vec::new();
    let mut gamma = gamma_i.min(gamma_f);
    let mut gamma_prev = 0.0;
    let mut q = q_init;
    let mut rho0 = 0.0;
    let mut z: Vec<f64> = Vec::new();
    let mut z_prev: Vec<f64> = Vec::new();

    let h = min_entropy(r, c)?;
    if h > 0.0 {
        for t in 1.. {
            let iter_ops = ops::snapshot();
            let done = gamma == gamma_f;
            let eps_d = eps_rule(gamma, p, r, c)?;
            // The smoothing formula needs its budget below 1; that only binds
            // at very small γ where the projection tolerance is loose anyway.
            let (rt, ct) = smooth_marginals(r, c, (eps_d / 2.0).min(0.5), opts.w_r, w_c)?;
            if t == 1 {
                z = rt.iter().chain(&ct).map(|x| x.ln()).collect();
                z_prev = z.clone();
            }
            let mut state = DualState::new(cost, z[..n].to_vec(), z[n..].to_vec(), gamma)?;
            let stats = project_once(&mut state, &rt, &ct, eps_d / 2.0, &mut rho0, opts).map_err(|e| {
                OtError::Outer {
                    t,
                    gamma,
                    source: Box::new(e),
                }
            })?;
            let (u, v) = state.into_potentials();
            let projected: Vec<f64> = u.into_iter().chain(v).collect();
            if opts.adaptive_q {
                q = adjust_schedule(q, stats.delta_min);
            }
            trace.push(TraceRow {
                t,
                gamma,
                eps_d,
                newton_steps: stats.newton_steps,
                cg_iters: stats.cg_iters,
                sinkhorn_steps: stats.sinkhorn_steps,
                linesearch_backtracks: stats.backtracks,
                grad_norm_l1: stats.grad_norm_final,
                rho_final: stats.rho_final,
                delta_min: stats.delta_min,
                q,
                ops_n2: ops::snapshot().since(&iter_ops).total(),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            outer.push(OuterRecord { t, gamma, eps_d, stats });
            if done {
                z = projected;
                break;
            }
            // Snap to the target when rounding alone keeps us short of it.
            let gamma_next = if q * gamma >= gamma_f * (1.0 - 1e-12) { gamma_f } else { q * gamma };
            z = extrapolate(&projected, &z_prev, gamma_next, gamma, gamma_prev)?;
            z_prev = projected;
            gamma_prev = gamma;
            gamma = gamma_next;
        }
    } else {
        z = vec![0.0; 2 * n];
    }

    let (plan, dual_value, grad_norm, u, v) = if h > 0.0 {
        let mut state = DualState::new(cost, z[..n].to_vec(), z[n..].to_vec(), gamma_f)?;
        state.refresh()?;
        let grad_norm = state.grad_norm_l1(r, c)?;
        let dual_value = state.dual_value(r, c)?;
        let plan = round_plan(&state.materialize_plan()?, r, c)?;
        let (u, v) = state.into_potentials();
        (plan, dual_value, grad_norm, u, v)
    } else {
        ops::tick();
        let plan = DenseMatrix::from_fn(n, n, |i, j| r[i] * c[j]);
        (plan, f64::NAN, 0.0, z[..n].to_vec(), z[n..].to_vec())
    };
    let primal_cost = plan.inner(cost);
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let ops_used = ops::snapshot().since(&ops_start);

    let report = RunReport {
        label: problem.label.clone(),
        n,
        solver: opts.solver,
        gamma_i,
        gamma_f,
        p,
        q_init,
        adaptive_q: opts.adaptive_q,
        adaptive_rho0: opts.projector.adaptive_rho0,
        w_r: opts.w_r,
        primal_cost_rounded: primal_cost,
        dual_value_final: dual_value,
        grad_norm_final: grad_norm,
        error_bound: bound,
        ops: ops_used,
        ops_total: ops_used.total(),
        wall_ms,
        outer_iterations: trace.len(),
        newton_steps: trace.iter().map(|t| t.newton_steps).sum(),
        cg_iters: trace.iter().map(|t| t.cg_iters).sum(),
        sinkhorn_steps: trace.iter().map(|t| t.sinkhorn_steps).sum(),
        parallel: tensor::parallel(),
    };
    Ok(Solution {
        plan,
        primal_cost,
        error_bound: bound,
        report,
        trace,
        outer,
        u,
        v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eps_examples() {
        let u2 = [0.5, 0.5];
        let e = eps_rule(4.0, 1.5, &u2, &u2).unwrap();
        assert!((e - 2f64.ln() / 8.0).abs() < 1e-15);
        assert!((e - 0.0866434).abs() < 1e-7);
        let r = [0.2, 0.8];
        let c = [0.5, 0.5];
        assert_eq!(eps_rule(1.0, 1.0, &r, &c).unwrap(), tensor::shannon_entropy(&r).unwrap());
        let u = vec![1.0 / 4096.0; 4096];
        assert!((eps_rule(32.0, 1.5, &u, &u).unwrap() - 0.045949).abs() < 1e-6);
        assert!(eps_rule(0.0, 1.5, &u2, &u2).is_err());
    }

    #[test]
    fn smoothing_examples() {
        let (rt, _) = smooth_marginals(&[1.0, 0.0], &[0.5, 0.5], 0.1, 0.45, 0.05).unwrap();
        assert!((rt[0] - 0.9775).abs() < 1e-15 && (rt[1] - 0.0225).abs() < 1e-15);
        let (rt, ct) = smooth_marginals(&[0.3, 0.7], &[0.6, 0.4], 1e-300, 0.45, 0.05).unwrap();
        assert_eq!((rt, ct), (vec![0.3, 0.7], vec![0.6, 0.4]));
        assert!(smooth_marginals(&[0.5, 0.5], &[0.5, 0.5], 0.1, 0.25, 0.25).is_err());
        assert!(smooth_marginals(&[0.5, 0.5], &[0.5, 0.5], 1.0, 0.45, 0.05).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(adjust_schedule(2.0, 0.97), 2.0);
        assert!((adjust_schedule(2.0, 0.5) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(adjust_schedule(1.3, 0.85), 1.3);
        assert_eq!(adjust_schedule(1.3, f64::INFINITY), 1.3 * 1.3);
    }

    #[test]
    fn extrapolate_examples() {
        assert_eq!(extrapolate(&[1.0, 2.0], &[0.0, 5.0], 4.0, 4.0, 2.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(extrapolate(&[1.0], &[0.0], 8.0, 4.0, 2.0).unwrap(), vec![3.0]);
        assert_eq!(extrapolate(&[1.5], &[1.5], 100.0, 4.0, 0.0).unwrap(), vec![1.5]);
        assert!(extrapolate(&[1.0], &[0.0], 8.0, 4.0, 4.0).is_err());
    }

    #[test]
    fn bound_examples() {
        let u = vec![1.0 / 4096.0; 4096];
        assert!((error_bound(2f64.powi(18), &u, &u).unwrap() - 6.3459e-5).abs() < 1e-9);
        assert_eq!(error_bound(4.0, &[1.0, 0.0], &[0.5, 0.5]).unwrap(), 0.0);
        assert!((error_bound(2.0, &[0.5, 0.5], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn rounding_examples() {
        let p = DenseMatrix::new(2, 2, vec![0.1, 0.4, 0.3, 0.2]).unwrap();
        let out = round_plan(&p, &[0.5, 0.5], &[0.4, 0.6]).unwrap();
        assert!(out.data().iter().zip(p.data()).all(|(a, b)| (a - b).abs() < 1e-15));

        let p = DenseMatrix::new(2, 2, vec![0.3, 0.3, 0.2, 0.2]).unwrap();
        let out = round_plan(&p, &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        for x in out.data() {
            assert!((x - 0.25).abs() < 1e-15);
        }
        assert!(matches!(
            round_plan(&DenseMatrix::zeros(2, 2), &[0.5, 0.5], &[0.5, 0.5]),
            Err(OtError::Degenerate(_))
        ));
    }

    fn swap_problem() -> Problem {
        let cost = DenseMatrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        Problem::new(cost, vec![0.5, 0.5], vec![0.5, 0.5], "swap").unwrap()
    }

    #[test]
    fn two_point_solve_meets_bound() {
        let sol = mdot(&swap_problem(), 32.0, 2f64.powi(14), 1.5, 2.0, &MdotOptions::default()).unwrap();
        assert!(sol.primal_cost <= sol.error_bound);
        assert!((sol.error_bound - 2.0 * 2f64.ln() / 16384.0).abs() < 1e-15);
        let gammas: Vec<f64> = sol.trace.iter().map(|t| t.gamma).collect();
        assert!(gammas.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*gammas.last().unwrap(), 2f64.powi(14));
        assert!(sol.trace.iter().all(|t| t.q > 1.0 && t.q <= 2.0));
    }

    #[test]
    fn single_temperature_mode() {
        for (gi, gf) in [(8.0, 8.0), (64.0, 8.0)] {
            for solver in [SolverKind::TruncatedNewton, SolverKind::Sinkhorn] {
                let opts = MdotOptions { solver, ..Default::default() };
                let sol = mdot(&swap_problem(), gi, gf, 1.5, 2.0, &opts).unwrap();
                assert_eq!(sol.report.outer_iterations, 1);
                assert_eq!(sol.trace[0].gamma, 8.0);
            }
        }
    }

    #[test]
    fn zero_entropy_marginal() {
        let cost = DenseMatrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let problem = Problem::new(cost, vec![1.0, 0.0], vec![0.5, 0.5], "point").unwrap();
        let sol = mdot(&problem, 32.0, 1024.0, 1.5, 2.0, &MdotOptions::default()).unwrap();
        assert_eq!(sol.error_bound, 0.0);
        assert_eq!(sol.primal_cost, 0.5);
        assert_eq!(sol.report.outer_iterations, 0);
    }

    #[test]
    fn rejects_bad_parameters() {
        let o = MdotOptions::default();
        assert!(mdot(&swap_problem(), 0.0, 8.0, 1.5, 2.0, &o).is_err());
        assert!(mdot(&swap_problem(), 4.0, 8.0, 0.5, 2.0, &o).is_err());
        assert!(mdot(&swap_problem(), 4.0, 8.0, 1.5, 1.0, &o).is_err());
        let bad = MdotOptions { w_r: 0.2, ..o };
        assert!(mdot(&swap_problem(), 4.0, 8.0, 1.5, 2.0, &bad).is_err());
    }
}
