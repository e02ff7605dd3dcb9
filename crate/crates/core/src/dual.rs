//! Entropic OT dual: potentials `(u, v)` at inverse temperature `γ`, the
//! implied plan `P = exp(u1ᵀ + 1vᵀ − γC)`, its gradient and objective.
//!
//! Row and column sums of `P` are always obtained from log-domain reductions,
//! never from the linear-domain plan, whose smallest entries may underflow.

use crate::error::{OtError, Result};
use crate::tensor::{self, DenseMatrix};

/// Largest log plan entry accepted by [`DualState::materialize_plan`].
pub const MAX_LOG_ENTRY: f64 = 700.0;

#[derive(Debug, Clone)]
pub struct DualState<'a> {
    cost: &'a DenseMatrix,
    u: Vec<f64>,
    v: Vec<f64>,
    gamma: f64,
    log_rp: Option<Vec<f64>>,
    log_cp: Option<Vec<f64>>,
}

impl<'a> DualState<'a> {
    pub fn new(cost: &'a DenseMatrix, u: Vec<f64>, v: Vec<f64>, gamma: f64) -> Result<Self> {
        if u.len() != cost.rows() || v.len() != cost.cols() {
            return Err(OtError::Dimension(format!(
                "potentials of lengths {} and {} for a {}x{} cost",
                u.len(),
                v.len(),
                cost.rows(),
                cost.cols()
            )));
        }
        Ok(Self {
            cost,
            u,
            v,
            gamma,
            log_rp: None,
            log_cp: None,
        })
    }

    pub fn cost(&self) -> &'a DenseMatrix {
        self.cost
    }

    pub fn n(&self) -> usize {
        self.u.len()
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn invalidate(&mut self) {
        self.log_rp = None;
        self.log_cp = None;
    }

    /// Mutable access to `u`; clears both caches.
    pub fn u_mut(&mut self) -> &mut [f64] {
        self.invalidate();
        &mut self.u
    }

    /// Mutable access to `v`; clears both caches.
    pub fn v_mut(&mut self) -> &mut [f64] {
        self.invalidate();
        &mut self.v
    }

    pub fn set_gamma(&mut self, gamma: f64) {
        self.invalidate();
        self.gamma = gamma;
    }

    pub fn set_potentials(&mut self, u: Vec<f64>, v: Vec<f64>) {
        assert_eq!((u.len(), v.len()), (self.u.len(), self.v.len()));
        self.invalidate();
        self.u = u;
        self.v = v;
    }

    pub fn into_potentials(self) -> (Vec<f64>, Vec<f64>) {
        (self.u, self.v)
    }

    fn check_gamma(&self) -> Result<()> {
        if !self.gamma.is_finite() {
            return Err(OtError::Domain(format!("inverse temperature {} is not finite", self.gamma)));
        }
        Ok(())
    }

    /// `log r(P)_i = u_i + LSE_j(v_j − γC_ij)`; caches and returns it.
    pub fn refresh_row_sums(&mut self) -> Result<&[f64]> {
        self.check_gamma()?;
        let mut out = tensor::lse_rows_affine(self.cost, self.gamma, &self.v);
        for (o, u) in out.iter_mut().zip(&self.u) {
            *o += u;
        }
        Ok(self.log_rp.insert(out))
    }

    /// `log c(P)_j = v_j + LSE_i(u_i − γC_ij)`; caches and returns it.
    pub fn refresh_col_sums(&mut self) -> Result<&[f64]> {
        self.check_gamma()?;
        let mut out = tensor::lse_cols_affine(self.cost, self.gamma, &self.u);
        for (o, v) in out.iter_mut().zip(&self.v) {
            *o += v;
        }
        Ok(self.log_cp.insert(out))
    }

    pub fn refresh(&mut self) -> Result<()> {
        self.refresh_row_sums()?;
        self.refresh_col_sums()?;
        Ok(())
    }

    pub fn log_row_sums(&self) -> Option<&[f64]> {
        self.log_rp.as_deref()
    }

    pub fn log_col_sums(&self) -> Option<&[f64]> {
        self.log_cp.as_deref()
    }

    fn rows_cached(&self) -> Result<&[f64]> {
        self.log_rp
            .as_deref()
            .ok_or_else(|| OtError::Domain("row sums are stale; refresh first".into()))
    }

    fn cols_cached(&self) -> Result<&[f64]> {
        self.log_cp
            .as_deref()
            .ok_or_else(|| OtError::Domain("column sums are stale; refresh first".into()))
    }

    /// Installs column log sums known by construction (after a column
    /// rebalancing they equal `log c`), saving one reduction.
    pub(crate) fn assume_col_sums(&mut self, log_cp: Vec<f64>) {
        debug_assert_eq!(log_cp.len(), self.v.len());
        self.log_cp = Some(log_cp);
    }

    /// Rebalances columns so that `c(P) = c`: `v ← log c − LSE_i(u_i − γC_ij)`.
    pub fn balance_cols(&mut self, log_c: &[f64]) -> Result<()> {
        self.check_gamma()?;
        let lse = tensor::lse_cols_affine(self.cost, self.gamma, &self.u);
        self.invalidate();
        for ((v, l), lc) in self.v.iter_mut().zip(&lse).zip(log_c) {
            *v = lc - l;
        }
        self.log_cp = Some(log_c.to_vec());
        Ok(())
    }

    /// Total plan mass, from the cached row sums.
    pub fn mass(&self) -> Result<f64> {
        Ok(self.rows_cached()?.iter().map(|l| l.exp()).sum())
    }

    pub fn row_sums(&self) -> Result<Vec<f64>> {
        Ok(self.rows_cached()?.iter().map(|l| l.exp()).collect())
    }

    pub fn col_sums(&self) -> Result<Vec<f64>> {
        Ok(self.cols_cached()?.iter().map(|l| l.exp()).collect())
    }

    /// `(∇_u g, ∇_v g) = (r(P) − r, c(P) − c)`.
    pub fn gradient(&self, r: &[f64], c: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let gu = self.rows_cached()?.iter().zip(r).map(|(l, r)| l.exp() - r).collect();
        let gv = self.cols_cached()?.iter().zip(c).map(|(l, c)| l.exp() - c).collect();
        Ok((gu, gv))
    }

    /// `‖∇_u g‖₁ + ‖∇_v g‖₁`.
    pub fn grad_norm_l1(&self, r: &[f64], c: &[f64]) -> Result<f64> {
        let (gu, gv) = self.gradient(r, c)?;
        Ok(tensor::norm_l1(&gu) + tensor::norm_l1(&gv))
    }

    /// `g(u, v) = Σ_ij P_ij − 1 − ⟨u, r⟩ − ⟨v, c⟩`.
    pub fn dual_value(&self, r: &[f64], c: &[f64]) -> Result<f64> {
        Ok(self.mass()? - 1.0 - tensor::dot(&self.u, r) - tensor::dot(&self.v, c))
    }

    /// Linear-domain plan; entries below the `f64` underflow threshold become 0.
    pub fn materialize_plan(&self) -> Result<DenseMatrix> {
        self.check_gamma()?;
        let n = self.cost.cols();
        let mut data = vec![0.0; self.cost.data().len()];
        crate::ops::tick();
        let mut worst = (0usize, f64::NEG_INFINITY);
        for (i, (out, crow)) in data.chunks_mut(n.max(1)).zip(self.cost.data().chunks(n.max(1))).enumerate() {
            let top = tensor::exp_affine_row(out, crow, self.u[i], &self.v, self.gamma);
            if top > worst.1 {
                worst = (i, top);
            }
        }
        if worst.1 > MAX_LOG_ENTRY {
            let (row, log_value) = worst;
            let col = (0..n)
                .find(|&j| self.u[row] - self.gamma * self.cost.get(row, j) + self.v[j] == log_value)
                .unwrap_or(0);
            return Err(OtError::Overflow { row, col, log_value });
        }
        Ok(DenseMatrix::from_raw(self.cost.rows(), n, data))
    }
}
