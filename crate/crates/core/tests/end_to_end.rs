use otn_core::dual::DualState;
use otn_core::oracles::exact_ot_small;
use otn_core::problem::{format_problem, grid_problem, parse_problem, MarginalKind, Metric};
use otn_core::projector::{project, ProjectorOptions};
use otn_core::tensor::DenseMatrix;
use otn_core::{mdot, MdotOptions, OtError, Problem, SolverKind};

fn marginal_errors(plan: &DenseMatrix, r: &[f64], c: &[f64]) -> (f64, f64) {
    let n = r.len();
    let mut row_err: f64 = 0.0;
    let mut col_err: f64 = 0.0;
    for i in 0..n {
        let s: f64 = plan.row(i).iter().sum();
        row_err = row_err.max((s - r[i]).abs());
    }
    for j in 0..n {
        let s: f64 = (0..n).map(|i| plan.get(i, j)).sum();
        col_err = col_err.max((s - c[j]).abs());
    }
    (row_err, col_err)
}

#[test]
fn both_solvers_land_within_the_error_bound_of_the_exact_optimum() {
    let prob = grid_problem(2, Metric::L2sq, MarginalKind::SmoothRandom, 11).unwrap();
    let exact = exact_ot_small(&prob.cost, &prob.r, &prob.c).unwrap();
    for solver in [SolverKind::TruncatedNewton, SolverKind::Sinkhorn] {
        let opts = MdotOptions {
            solver,
            ..MdotOptions::default()
        };
        let sol = mdot(&prob, 32.0, 4096.0, 1.5, 2.0, &opts).unwrap();
        let gap = sol.primal_cost - exact.cost;
        assert!(gap >= -1e-12 && gap <= sol.error_bound + 1e-10, "{solver}: gap {gap:e}");
    }
}

#[test]
fn rounded_plan_is_feasible_and_schedule_ends_exactly_at_target() {
    let prob = grid_problem(8, Metric::L1, MarginalKind::SpikyRandom, 3).unwrap();
    let sol = mdot(&prob, 32.0, 1e4, 1.5, 2.0, &MdotOptions::default()).unwrap();
    let (row_err, col_err) = marginal_errors(&sol.plan, &prob.r, &prob.c);
    assert!(row_err <= 1e-12 && col_err <= 1e-12, "{row_err:e} {col_err:e}");
    assert!(sol.plan.data().iter().all(|&x| x >= 0.0));

    let gammas: Vec<f64> = sol.trace.iter().map(|t| t.gamma).collect();
    assert!(gammas.windows(2).all(|w| w[1] > w[0]), "{gammas:?}");
    assert_eq!(*gammas.last().unwrap(), 1e4);
    // Rounding and the final evaluation are counted outside the outer iterations.
    let per_iter: u64 = sol.trace.iter().map(|t| t.ops_n2).sum();
    assert!(per_iter < sol.report.ops_total && sol.report.ops_total - per_iter < 20);
}

#[test]
fn repeated_solves_count_identical_operations() {
    let prob = grid_problem(6, Metric::L2sq, MarginalKind::SmoothRandom, 5).unwrap();
    let a = mdot(&prob, 32.0, 8192.0, 1.5, 2.0, &MdotOptions::default()).unwrap();
    let b = mdot(&prob, 32.0, 8192.0, 1.5, 2.0, &MdotOptions::default()).unwrap();
    assert_eq!(a.report.ops, b.report.ops);
    assert_eq!(a.report.cg_iters, b.report.cg_iters);
    assert_eq!(a.primal_cost.to_bits(), b.primal_cost.to_bits());
}

#[test]
fn dual_value_is_invariant_along_the_gauge_direction() {
    let prob = grid_problem(3, Metric::L1, MarginalKind::SmoothRandom, 2).unwrap();
    let u: Vec<f64> = (0..9).map(|i| 0.1 * i as f64).collect();
    let v: Vec<f64> = (0..9).map(|i| -0.05 * i as f64).collect();
    let mut base = DualState::new(&prob.cost, u.clone(), v.clone(), 8.0).unwrap();
    base.refresh().unwrap();
    let g0 = base.dual_value(&prob.r, &prob.c).unwrap();
    for s in [-1.0, -0.3, 0.7, 1.0] {
        let mut shifted = DualState::new(
            &prob.cost,
            u.iter().map(|x| x + s).collect(),
            v.iter().map(|x| x - s).collect(),
            8.0,
        )
        .unwrap();
        shifted.refresh().unwrap();
        assert!((shifted.dual_value(&prob.r, &prob.c).unwrap() - g0).abs() <= 1e-12);
    }
}

#[test]
fn projection_reaches_its_tolerance_from_zero_potentials() {
    let prob = grid_problem(5, Metric::L2sq, MarginalKind::SmoothRandom, 9).unwrap();
    let mut state = DualState::new(&prob.cost, vec![0.0; 25], vec![0.0; 25], 64.0).unwrap();
    let mut rho0 = 0.0;
    let stats = project(&mut state, &prob.r, &prob.c, 1e-9, &mut rho0, &ProjectorOptions::default()).unwrap();
    state.refresh().unwrap();
    assert!(state.grad_norm_l1(&prob.r, &prob.c).unwrap() <= 1e-9);
    assert!(!stats.steps.is_empty());
}

#[test]
fn problem_text_format_round_trips_bit_exactly() {
    let prob = grid_problem(4, Metric::L2sq, MarginalKind::SpikyRandom, 8).unwrap();
    let back = parse_problem(&format_problem(&prob), "mem.otp".as_ref()).unwrap();
    assert_eq!(back.cost.data(), prob.cost.data());
    assert_eq!(back.r, prob.r);
    assert_eq!(back.c, prob.c);
}

#[test]
fn mismatched_sizes_and_bad_marginals_are_rejected() {
    let cost = DenseMatrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    assert!(matches!(
        Problem::new(cost.clone(), vec![1.0], vec![0.5, 0.5], "x"),
        Err(OtError::Dimension(_))
    ));
    assert!(Problem::new(cost.clone(), vec![0.7, 0.7], vec![0.5, 0.5], "x").is_err());
    assert!(Problem::new(cost, vec![1.5, -0.5], vec![0.5, 0.5], "x").is_err());
}
