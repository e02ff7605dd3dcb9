//! Independent reference computations used to validate the solver.
//!
//! None of these share code paths with the Newton machinery: exact OT is a
//! brute-force enumeration of transportation-polytope vertices, linear solves
//! go through a dense Cholesky factorization, and the Sinkhorn baseline only
//! alternates closed-form scalings.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::dual::DualState;
use crate::error::{OtError, Result};
use crate::ops::{self, Category};
use crate::tensor::{self, DenseMatrix};

pub const EXACT_MAX_N: usize = 6;

const FEASIBLE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ExactSolution {
    pub plan: DenseMatrix,
    pub cost: f64,
    /// Support cells of the optimal basis (a spanning tree of `K_{n,n}`).
    pub basis: Vec<(usize, usize)>,
}

/// Exact optimal transport for `n ≤ 6` by enumerating every spanning tree of
/// the complete bipartite graph, solving its basic system and keeping the
/// cheapest nonnegative one. Ties keep the first tree in lexicographic order
/// of cells.
pub fn exact_ot_small(cost: &DenseMatrix, r: &[f64], c: &[f64]) -> Result<ExactSolution> {
    let n = r.len();
    if cost.rows() != n || cost.cols() != c.len() || c.len() != n {
        return Err(OtError::Dimension(format!(
            "cost is {}x{}, marginals have {} and {} entries",
            cost.rows(),
            cost.cols(),
            n,
            c.len()
        )));
    }
    if n > EXACT_MAX_N {
        return Err(OtError::Refused(format!("exact enumeration supports n <= {EXACT_MAX_N}, got {n}")));
    }
    if n == 0 {
        return Err(OtError::Dimension("empty problem".into()));
    }
    let (sr, sc) = (r.iter().sum::<f64>(), c.iter().sum::<f64>());
    if (sr - sc).abs() > 1e-12 || r.iter().chain(c).any(|x| *x < 0.0) {
        return Err(OtError::Domain(format!(
            "marginals are not a feasible pair (sums {sr} and {sc})"
        )));
    }

    let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let mut search = TreeSearch {
        n,
        edges: &edges,
        cost,
        r,
        c,
        chosen: Vec::with_capacity(2 * n - 1),
        best: None,
    };
    let mut dsu = Dsu::new(2 * n);
    search.recurse(0, &mut dsu);
    let (cost_value, basis, flows) = search
        .best
        .ok_or_else(|| OtError::Degenerate("no feasible basis found".into()))?;
    let mut plan = DenseMatrix::zeros(n, n);
    for (&(i, j), &x) in basis.iter().zip(&flows) {
        plan.set(i, j, x);
    }
    Ok(ExactSolution {
        plan,
        cost: cost_value,
        basis,
    })
}

/// Union-find with an undo log, so edges can be removed in LIFO order.
struct Dsu {
    parent: Vec<usize>,
    size: Vec<usize>,
    log: Vec<Option<(usize, usize)>>,
    components: usize,
}

impl Dsu {
    fn new(k: usize) -> Self {
        Self {
            parent: (0..k).collect(),
            size: vec![1; k],
            log: Vec::new(),
            components: k,
        }
    }

    fn find(&self, mut x: usize) -> usize {
        while self.parent[x] != x {
            x = self.parent[x];
        }
        x
    }

    /// Returns false (and records nothing) if `a` and `b` are already joined.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return false;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
        self.components -= 1;
        self.log.push(Some((a, b)));
        true
    }

    fn undo(&mut self) {
        if let Some(Some((a, b))) = self.log.pop() {
            self.parent[b] = b;
            self.size[a] -= self.size[b];
            self.components += 1;
        }
    }
}

type Best = (f64, Vec<(usize, usize)>, Vec<f64>);

struct TreeSearch<'a> {
    n: usize,
    edges: &'a [(usize, usize)],
    cost: &'a DenseMatrix,
    r: &'a [f64],
    c: &'a [f64],
    chosen: Vec<(usize, usize)>,
    best: Option<Best>,
}

impl TreeSearch<'_> {
    fn recurse(&mut self, next: usize, dsu: &mut Dsu) {
        let need = 2 * self.n - 1 - self.chosen.len();
        if need == 0 {
            self.evaluate();
            return;
        }
        if self.edges.len() - next < need || !self.completable(next, dsu) {
            return;
        }
        let (i, j) = self.edges[next];
        if dsu.union(i, self.n + j) {
            self.chosen.push((i, j));
            self.recurse(next + 1, dsu);
            self.chosen.pop();
            dsu.undo();
        }
        self.recurse(next + 1, dsu);
    }

    /// Whether chosen plus undecided edges still connect every vertex.
    fn completable(&self, next: usize, dsu: &Dsu) -> bool {
        let mut probe = Dsu {
            parent: dsu.parent.clone(),
            size: dsu.size.clone(),
            log: Vec::new(),
            components: dsu.components,
        };
        for &(i, j) in &self.edges[next..] {
            probe.union(i, self.n + j);
            if probe.components == 1 {
                return true;
            }
        }
        probe.components == 1
    }

    /// Solves the basic system by peeling leaves, then keeps it if it is
    /// nonnegative and strictly cheaper than the incumbent.
    fn evaluate(&mut self) {
        let n = self.n;
        let mut rem: Vec<f64> = self.r.iter().chain(self.c).copied().collect();
        let mut degree = vec![0usize; 2 * n];
        for &(i, j) in &self.chosen {
            degree[i] += 1;
            degree[n + j] += 1;
        }
        let mut alive = vec![true; self.chosen.len()];
        let mut flows = vec![0.0; self.chosen.len()];
        for _ in 0..self.chosen.len() {
            // Any remaining edge with a leaf endpoint; the tree always has one.
            let Some((k, leaf, other)) = self.chosen.iter().enumerate().filter(|(k, _)| alive[*k]).find_map(|(k, &(i, j))| {
                if degree[i] == 1 {
                    Some((k, i, n + j))
                } else if degree[n + j] == 1 {
                    Some((k, n + j, i))
                } else {
                    None
                }
            }) else {
                return;
            };
            let x = rem[leaf];
            if x < -FEASIBLE_SLACK {
                return;
            }
            flows[k] = x.max(0.0);
            rem[leaf] = 0.0;
            rem[other] -= x;
            degree[leaf] -= 1;
            degree[other] -= 1;
            alive[k] = false;
        }
        let total: f64 = self
            .chosen
            .iter()
            .zip(&flows)
            .map(|(&(i, j), x)| x * self.cost.get(i, j))
            .sum();
        if self.best.as_ref().is_none_or(|b| total < b.0) {
            self.best = Some((total, self.chosen.clone(), flows));
        }
    }
}

/// Solves `A x = b` for symmetric positive-definite `A` by Cholesky
/// factorization with one step of iterative refinement.
pub fn dense_spd_solve(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(OtError::Dimension(format!(
            "matrix is {}x{}, right-hand side has {} entries",
            a.rows(),
            a.cols(),
            b.len()
        )));
    }
    let scale = a.data().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    if !a.is_symmetric(1e-10 * scale) {
        return Err(OtError::Domain("matrix is not symmetric".into()));
    }
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) {
            return Err(OtError::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    let solve = |rhs: &[f64]| -> Vec<f64> {
        let mut y = rhs.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= l[i * n + k] * y[k];
            }
            y[i] /= l[i * n + i];
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                y[i] -= l[k * n + i] * y[k];
            }
            y[i] /= l[i * n + i];
        }
        y
    };
    let mut x = solve(b);
    let ax = a.matvec(&x);
    let resid: Vec<f64> = b.iter().zip(&ax).map(|(b, ax)| b - ax).collect();
    for (x, dx) in x.iter_mut().zip(solve(&resid)) {
        *x += dx;
    }
    Ok(x)
}

/// Ascending eigenvalues of a symmetric matrix.
pub fn sym_eigenvalues(a: &DenseMatrix) -> Result<Vec<f64>> {
    if a.rows() != a.cols() {
        return Err(OtError::Dimension(format!("matrix is {}x{}", a.rows(), a.cols())));
    }
    let m = DMatrix::from_row_slice(a.rows(), a.cols(), a.data());
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Log-domain Sinkhorn at fixed `γ`: column rebalancing followed by row
/// scaling until `‖∇g‖₁ ≤ eps_d`. Returns the number of row scalings.
///
/// Each sweep costs two O(n²) reductions, charged to `Sinkhorn`. On return
/// `c(P) = c` exactly and both caches of `state` are fresh.
pub fn sinkhorn_project(
    state: &mut DualState<'_>,
    r: &[f64],
    c: &[f64],
    eps_d: f64,
    max_steps: usize,
) -> Result<usize> {
    if let Some(x) = r.iter().chain(c).find(|x| !(**x > 0.0)) {
        return Err(OtError::Domain(format!("marginal entry {x} is not strictly positive")));
    }
    let _s = ops::scope(Category::Sinkhorn);
    let log_r: Vec<f64> = r.iter().map(|x| x.ln()).collect();
    let log_c: Vec<f64> = c.iter().map(|x| x.ln()).collect();
    let mut steps = 0;
    loop {
        state.balance_cols(&log_c)?;
        let log_rp = state.refresh_row_sums()?.to_vec();
        let g: f64 = log_rp.iter().zip(r).map(|(l, r)| (l.exp() - r).abs()).sum();
        if g <= eps_d {
            return Ok(steps);
        }
        if steps == max_steps {
            return Err(OtError::NonConvergence {
                what: "Sinkhorn",
                budget: max_steps,
                grad_norm_l1: g,
                target: eps_d,
            });
        }
        for ((u, lr), lp) in state.u_mut().iter_mut().zip(&log_r).zip(&log_rp) {
            *u += lr - lp;
        }
        steps += 1;
    }
}

fn dual_value_at(cost: &DenseMatrix, u: &[f64], v: &[f64], gamma: f64, r: &[f64], c: &[f64]) -> f64 {
    let lse = tensor::lse_rows_affine(cost, gamma, v);
    let mass: f64 = lse.iter().zip(u).map(|(l, u)| (l + u).exp()).sum();
    mass - 1.0 - tensor::dot(u, r) - tensor::dot(v, c)
}

/// Central finite differences of the dual objective in every coordinate.
pub fn finite_diff_grad(state: &DualState<'_>, r: &[f64], c: &[f64], h: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(1e-8..=1e-4).contains(&h) {
        return Err(OtError::Domain(format!("finite-difference step {h} outside [1e-8, 1e-4]")));
    }
    let (cost, gamma) = (state.cost(), state.gamma());
    let mut u = state.u().to_vec();
    let mut v = state.v().to_vec();
    let mut gu = vec![0.0; u.len()];
    let mut gv = vec![0.0; v.len()];
    for k in 0..u.len() {
        let x = u[k];
        u[k] = x + h;
        let plus = dual_value_at(cost, &u, &v, gamma, r, c);
        u[k] = x - h;
        let minus = dual_value_at(cost, &u, &v, gamma, r, c);
        u[k] = x;
        gu[k] = (plus - minus) / (2.0 * h);
    }
    for k in 0..v.len() {
        let x = v[k];
        v[k] = x + h;
        let plus = dual_value_at(cost, &u, &v, gamma, r, c);
        v[k] = x - h;
        let minus = dual_value_at(cost, &u, &v, gamma, r, c);
        v[k] = x;
        gv[k] = (plus - minus) / (2.0 * h);
    }
    Ok((gu, gv))
}
