//! Dense storage, numerically stable reductions and divergences.
//!
//! Row-wise kernels evaluate each row sequentially. Column-wise kernels fold
//! fixed blocks of rows into partial accumulators and combine the partials in
//! block order, so results are bit-identical whether or not the blocks run in
//! parallel.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{OtError, Result};
use crate::ops;

const ROW_BLOCK: usize = 32;

static PARALLEL: AtomicBool = AtomicBool::new(false);

fn deterministic_env() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| std::env::var("OTN_DETERMINISTIC").is_ok_and(|v| v == "1"))
}

/// Enables kernel-internal parallelism. Ignored when `OTN_DETERMINISTIC=1`.
pub fn set_parallel(on: bool) {
    PARALLEL.store(on, Ordering::Relaxed);
}

pub fn parallel() -> bool {
    PARALLEL.load(Ordering::Relaxed) && !deterministic_env()
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(OtError::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(x) = data.iter().find(|x| !x.is_finite()) {
            return Err(OtError::Domain(format!("non-finite matrix entry {x}")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Log-domain matrix: `-inf` entries are allowed, `+inf` and NaN are not.
    pub fn new_log(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(OtError::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(x) = data.iter().find(|x| x.is_nan() || **x == f64::INFINITY) {
            return Err(OtError::Domain(format!("invalid log-domain entry {x}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from data the caller has already validated.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, x: f64) {
        self.data[i * self.cols + j] = x;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn max_entry(&self) -> Option<f64> {
        self.data.iter().copied().reduce(f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        ops::tick();
        map_rows(self, |_, row| row.iter().sum())
    }

    pub fn col_sums(&self) -> Vec<f64> {
        ops::tick();
        fold_cols(self, |_, row, acc| {
            for (a, x) in acc.iter_mut().zip(row) {
                *a += x;
            }
        })
    }

    /// `A x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        ops::tick();
        map_rows(self, |_, row| dot(row, x))
    }

    /// `Aᵀ x`, evaluated by a row-major sweep.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        ops::tick();
        fold_cols(self, |i, row, acc| {
            let xi = x[i];
            for (a, p) in acc.iter_mut().zip(row) {
                *a += xi * p;
            }
        })
    }

    /// Frobenius inner product `⟨A, B⟩`.
    pub fn inner(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        ops::tick();
        dot(&self.data, &other.data)
    }
}

/// Evaluates `f(i, row_i)` for every row.
pub(crate) fn map_rows<F>(m: &DenseMatrix, f: F) -> Vec<f64>
where
    F: Fn(usize, &[f64]) -> f64 + Sync,
{
    if m.cols == 0 {
        return (0..m.rows).map(|i| f(i, &[])).collect();
    }
    if parallel() {
        m.data
            .par_chunks(m.cols)
            .enumerate()
            .map(|(i, row)| f(i, row))
            .collect()
    } else {
        m.data.chunks(m.cols).enumerate().map(|(i, row)| f(i, row)).collect()
    }
}

/// Accumulates `f(i, row_i, acc)` into per-column partial sums over fixed row
/// blocks, then adds the partials in block order.
pub(crate) fn fold_cols<F>(m: &DenseMatrix, f: F) -> Vec<f64>
where
    F: Fn(usize, &[f64], &mut [f64]) + Sync,
{
    let cols = m.cols;
    if cols == 0 {
        return Vec::new();
    }
    let block = |(b, chunk): (usize, &[f64])| {
        let mut acc = vec![0.0; cols];
        for (k, row) in chunk.chunks(cols).enumerate() {
            f(b * ROW_BLOCK + k, row, &mut acc);
        }
        acc
    };
    let combine = |mut total: Vec<f64>, part: Vec<f64>| {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
        total
    };
    let chunks = m.data.chunks(ROW_BLOCK * cols).enumerate();
    if parallel() {
        let parts: Vec<Vec<f64>> = m.data.par_chunks(ROW_BLOCK * cols).enumerate().map(block).collect();
        parts.into_iter().fold(vec![0.0; cols], combine)
    } else {
        chunks.map(block).fold(vec![0.0; cols], combine)
    }
}

/// Per-column maxima: `f(i, row_i, acc)` raises `acc` for every row; max is
/// order independent.
pub(crate) fn max_cols<F>(m: &DenseMatrix, f: F) -> Vec<f64>
where
    F: Fn(usize, &[f64], &mut [f64]) + Sync,
{
    let cols = m.cols;
    if cols == 0 {
        return Vec::new();
    }
    let block = |(b, chunk): (usize, &[f64])| {
        let mut acc = vec![f64::NEG_INFINITY; cols];
        for (k, row) in chunk.chunks(cols).enumerate() {
            f(b * ROW_BLOCK + k, row, &mut acc);
        }
        acc
    };
    let combine = |mut total: Vec<f64>, part: Vec<f64>| {
        for (t, p) in total.iter_mut().zip(part) {
            *t = t.max(p);
        }
        total
    };
    if parallel() {
        let parts: Vec<Vec<f64>> = m.data.par_chunks(ROW_BLOCK * cols).enumerate().map(block).collect();
        parts.into_iter().fold(vec![f64::NEG_INFINITY; cols], combine)
    } else {
        m.data
            .chunks(ROW_BLOCK * cols)
            .enumerate()
            .map(block)
            .fold(vec![f64::NEG_INFINITY; cols], combine)
    }
}

/// Defines a row kernel that runs with AVX2 code generation when the CPU has
/// it. Rust never contracts `a * b + c` into a fused multiply-add, so both
/// versions round identically and results do not depend on the machine.
macro_rules! row_kernel {
    ($(#[$meta:meta])* $vis:vis fn $name:ident($($arg:ident: $ty:ty),* $(,)?) -> $ret:ty $body:block) => {
        $(#[$meta])*
        $vis fn $name($($arg: $ty),*) -> $ret {
            #[inline(always)]
            fn generic($($arg: $ty),*) -> $ret $body
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide($($arg: $ty),*) -> $ret {
                    generic($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the CPU supports the enabled feature.
                    return unsafe { wide($($arg),*) };
                }
            }
            generic($($arg),*)
        }
    };
}

row_kernel! {
    /// `⟨a, b⟩` with four interleaved partial sums.
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
        let (ta, tb) = (ca.remainder(), cb.remainder());
        let mut acc = [0.0f64; 4];
        for (x, y) in ca.zip(cb) {
            for l in 0..4 {
                acc[l] += x[l] * y[l];
            }
        }
        ta.iter().zip(tb).fold((acc[0] + acc[1]) + (acc[2] + acc[3]), |s, (x, y)| s + x * y)
    }
}

pub fn norm_l1(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `‖a − b‖₁`.
pub fn dist_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

const EXP_SHIFTER: f64 = 6755399441055744.0; // 1.5 · 2^52
const EXP_LOWEST: f64 = -708.0;

/// `exp(x)` for the dense kernels, within a few ulp of `f64::exp`.
///
/// Branch-free so that loops over matrix rows vectorize: round `x / ln 2` to
/// an integer `k` with the 1.5·2⁵² trick, evaluate a degree-12 Taylor
/// polynomial on the reduced argument (|r| ≤ ln2/2, truncation < 2e-16
/// relative) and scale by `2^k` through the exponent bits. Inputs below −708
/// flush to 0, inputs above 709 saturate; `-inf` gives 0 and NaN stays NaN.
#[inline(always)]
pub fn exp_dense(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let xc = x.clamp(EXP_LOWEST, 709.0);
    let t = xc * LOG2E + EXP_SHIFTER;
    let k = t - EXP_SHIFTER;
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let bits = t.to_bits().wrapping_sub(EXP_SHIFTER.to_bits()).wrapping_add(1023) << 52;
    let y = p * f64::from_bits(bits);
    if x < EXP_LOWEST {
        0.0
    } else {
        y
    }
}

row_kernel! {
    /// `LSE_j(shift_j − γ c_j)` over one cost row, using `buf` as scratch.
    /// Each pass is a plain elementwise loop, and the max and the sum use four
    /// interleaved lanes, so everything vectorizes.
    fn lse_affine_row(row: &[f64], shift: &[f64], gamma: f64, buf: &mut [f64]) -> f64 {
        for ((b, c), s) in buf.iter_mut().zip(row).zip(shift) {
            *b = s - gamma * c;
        }
        let mut mx = [f64::NEG_INFINITY; 4];
        let chunks = buf.chunks_exact(4);
        let tail = chunks.remainder();
        for x in chunks {
            for l in 0..4 {
                mx[l] = mx[l].max(x[l]);
            }
        }
        let m = tail.iter().fold(mx[0].max(mx[1]).max(mx[2].max(mx[3])), |a, &x| a.max(x));
        if m == f64::NEG_INFINITY {
            return m;
        }
        for b in buf.iter_mut() {
            *b = exp_dense(*b - m);
        }
        let mut acc = [0.0f64; 4];
        let chunks = buf.chunks_exact(4);
        let tail = chunks.remainder();
        for x in chunks {
            for l in 0..4 {
                acc[l] += x[l];
            }
        }
        let total = tail.iter().fold((acc[0] + acc[1]) + (acc[2] + acc[3]), |a, x| a + x);
        m + total.ln()
    }
}

row_kernel! {
    /// `acc_j ← max(acc_j, s − γ c_j)`.
    fn max_affine_acc(acc: &mut [f64], row: &[f64], s: f64, gamma: f64) -> () {
        for (a, c) in acc.iter_mut().zip(row) {
            *a = a.max(s - gamma * c);
        }
    }
}

row_kernel! {
    /// `acc_j += exp(s − γ c_j − m_j)`.
    fn exp_affine_acc(acc: &mut [f64], row: &[f64], s: f64, gamma: f64, maxes: &[f64]) -> () {
        for ((a, c), m) in acc.iter_mut().zip(row).zip(maxes) {
            *a += exp_dense(s - gamma * c - m);
        }
    }
}

row_kernel! {
    /// `out_j = exp(u − γ c_j + v_j)`; returns the largest exponent.
    pub(crate) fn exp_affine_row(out: &mut [f64], row: &[f64], u: f64, v: &[f64], gamma: f64) -> f64 {
        let mut top = f64::NEG_INFINITY;
        for ((o, c), vj) in out.iter_mut().zip(row).zip(v) {
            let l = u - gamma * c + vj;
            top = top.max(l);
            *o = exp_dense(l);
        }
        top
    }
}

/// Stable `log Σ exp(x)`; all `-inf` gives `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_nonempty(x: &DenseMatrix) -> Result<()> {
    if x.rows == 0 || x.cols == 0 {
        return Err(OtError::Dimension(format!("empty {}x{} matrix", x.rows, x.cols)));
    }
    Ok(())
}

/// `out_i = log Σ_j exp(X_ij)`.
pub fn lse_rows(x: &DenseMatrix) -> Result<Vec<f64>> {
    check_nonempty(x)?;
    ops::tick();
    Ok(map_rows(x, |_, row| logsumexp(row)))
}

/// `out_j = log Σ_i exp(X_ij)`.
pub fn lse_cols(x: &DenseMatrix) -> Result<Vec<f64>> {
    check_nonempty(x)?;
    ops::tick();
    let maxes = max_cols(x, |_, row, acc| {
        for (a, v) in acc.iter_mut().zip(row) {
            *a = a.max(*v);
        }
    });
    let sums = fold_cols(x, |_, row, acc| {
        for ((a, &v), &m) in acc.iter_mut().zip(row).zip(&maxes) {
            if m != f64::NEG_INFINITY {
                *a += exp_dense(v - m);
            }
        }
    });
    Ok(maxes
        .iter()
        .zip(sums)
        .map(|(&m, s)| if m == f64::NEG_INFINITY { m } else { m + s.ln() })
        .collect())
}

/// `out_i = LSE_j(shift_j − γ C_ij)` without materializing the argument.
pub fn lse_rows_affine(cost: &DenseMatrix, gamma: f64, shift: &[f64]) -> Vec<f64> {
    assert_eq!(shift.len(), cost.cols);
    ops::tick();
    map_rows(cost, |_, row| {
        thread_local! {
            static BUF: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
        }
        BUF.with(|b| {
            let mut b = b.borrow_mut();
            b.resize(row.len(), 0.0);
            lse_affine_row(row, shift, gamma, &mut b)
        })
    })
}

/// `out_j = LSE_i(shift_i − γ C_ij)` without materializing the argument.
pub fn lse_cols_affine(cost: &DenseMatrix, gamma: f64, shift: &[f64]) -> Vec<f64> {
    assert_eq!(shift.len(), cost.rows);
    ops::tick();
    let maxes = max_cols(cost, |i, row, acc| max_affine_acc(acc, row, shift[i], gamma));
    let sums = fold_cols(cost, |i, row, acc| {
        if shift[i] != f64::NEG_INFINITY {
            exp_affine_acc(acc, row, shift[i], gamma, &maxes);
        }
    });
    maxes
        .iter()
        .zip(sums)
        .map(|(&m, s)| if m == f64::NEG_INFINITY { m } else { m + s.ln() })
        .collect()
}

/// `χ²(y | x) = Σ y_i²/x_i − 1`.
pub fn chi_sq_div(y: &[f64], x: &[f64]) -> Result<f64> {
    if y.len() != x.len() {
        return Err(OtError::Dimension(format!("lengths {} and {}", y.len(), x.len())));
    }
    if let Some(xi) = x.iter().find(|&&xi| !(xi > 0.0)) {
        return Err(OtError::Domain(format!("chi-square reference entry {xi} is not positive")));
    }
    if let Some(yi) = y.iter().find(|&&yi| !(yi >= 0.0)) {
        return Err(OtError::Domain(format!("chi-square argument entry {yi} is negative")));
    }
    Ok(y.iter().zip(x).map(|(y, x)| y * y / x).sum::<f64>() - 1.0)
}

/// Generalized KL divergence `Σ x log(x/y) + Σ y − Σ x`.
pub fn kl_div(x: &[f64], y: &[f64]) -> Result<f64> {
    if y.len() != x.len() {
        return Err(OtError::Dimension(format!("lengths {} and {}", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|&v| !(v > 0.0)) {
        return Err(OtError::Domain("KL divergence needs strictly positive entries".into()));
    }
    Ok(x.iter().zip(y).map(|(x, y)| x * (x / y).ln() + y - x).sum())
}

/// Shannon entropy with `0 log 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    if let Some(pi) = p.iter().find(|&&pi| !(pi >= 0.0)) {
        return Err(OtError::Domain(format!("negative probability {pi}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(OtError::Domain(format!("probabilities sum to {total}")));
    }
    Ok(-p.iter().filter(|&&pi| pi > 0.0).map(|pi| pi * pi.ln()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    #[test]
    fn exp_dense_tracks_std_exp() {
        let mut worst: f64 = 0.0;
        let mut x = -708.0;
        while x < 709.0 {
            worst = worst.max(((exp_dense(x) - x.exp()) / x.exp()).abs());
            x += 0.0137;
        }
        assert!(worst < 1e-15, "relative error {worst:e}");
        assert_eq!(exp_dense(0.0), 1.0);
        assert_eq!(exp_dense(-800.0), 0.0);
        assert_eq!(exp_dense(f64::NEG_INFINITY), 0.0);
        assert!(exp_dense(f64::NAN).is_nan());
    }

    fn m(rows: usize, cols: usize, data: &[f64]) -> DenseMatrix {
        DenseMatrix::new_log(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn lse_rows_examples() {
        let out = lse_rows(&m(2, 2, &[0.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(out, vec![LN_2, LN_2]);
        let out = lse_rows(&m(1, 2, &[1000.0, 1000.0])).unwrap();
        assert!((out[0] - (1000.0 + LN_2)).abs() < 1e-12);
        let out = lse_rows(&m(1, 2, &[0.0, 3f64.ln()])).unwrap();
        assert!((out[0] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn lse_cols_examples() {
        assert_eq!(lse_cols(&m(2, 1, &[0.0, 0.0])).unwrap(), vec![LN_2]);
        let out = lse_cols(&m(2, 1, &[LN_2, LN_2])).unwrap();
        assert!((out[0] - 4f64.ln()).abs() < 1e-15);
        let x = DenseMatrix::from_fn(3, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.3 * j as f64);
        let a = lse_cols(&x).unwrap();
        let b = lse_rows(&x.transpose()).unwrap();
        for (a, b) in a.iter().zip(&b) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn lse_handles_neg_infinity() {
        let x = m(2, 2, &[f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0]);
        assert_eq!(lse_rows(&x).unwrap(), vec![f64::NEG_INFINITY, 0.0]);
        assert_eq!(lse_cols(&x).unwrap(), vec![f64::NEG_INFINITY, 0.0]);
    }

    #[test]
    fn lse_rejects_empty() {
        let x = DenseMatrix::zeros(0, 0);
        assert!(matches!(lse_rows(&x), Err(OtError::Dimension(_))));
        assert!(matches!(lse_cols(&x), Err(OtError::Dimension(_))));
    }

    #[test]
    fn log_domain_validation() {
        assert!(DenseMatrix::new_log(1, 1, vec![f64::INFINITY]).is_err());
        assert!(DenseMatrix::new_log(1, 1, vec![f64::NAN]).is_err());
        assert!(DenseMatrix::new(1, 1, vec![f64::NEG_INFINITY]).is_err());
        assert!(DenseMatrix::new(2, 1, vec![0.0]).is_err());
    }

    #[test]
    fn affine_kernels_match_materialized() {
        let cost = DenseMatrix::from_fn(5, 4, |i, j| ((i + 2 * j) % 3) as f64 / 2.0);
        let u = [0.1, -0.4, 2.0, -3.0, 0.5];
        let v = [1.0, -1.0, 0.25, 0.0];
        let gamma = 7.5;
        let x = DenseMatrix::from_fn(5, 4, |i, j| u[i] + v[j] - gamma * cost.get(i, j));
        let rows = lse_rows_affine(&cost, gamma, &v);
        for (i, r) in lse_rows(&x).unwrap().iter().enumerate() {
            assert!((rows[i] + u[i] - r).abs() < 1e-13);
        }
        let cols = lse_cols_affine(&cost, gamma, &u);
        for (j, c) in lse_cols(&x).unwrap().iter().enumerate() {
            assert!((cols[j] + v[j] - c).abs() < 1e-13);
        }
    }

    #[test]
    fn parallel_kernels_are_bit_identical() {
        let cost = DenseMatrix::from_fn(77, 70, |i, j| ((i * 13 + j * 7) % 17) as f64 / 16.0);
        let u: Vec<f64> = (0..77).map(|i| (i as f64 * 0.37).sin()).collect();
        let seq = (lse_cols_affine(&cost, 9.0, &u), cost.matvec_t(&u));
        set_parallel(true);
        let par = (lse_cols_affine(&cost, 9.0, &u), cost.matvec_t(&u));
        set_parallel(false);
        assert_eq!(seq, par);
    }

    #[test]
    fn chi_sq_examples() {
        let x = [0.5, 0.5];
        assert_eq!(chi_sq_div(&x, &x).unwrap(), 0.0);
        assert!((chi_sq_div(&[0.25, 0.75], &x).unwrap() - 0.25).abs() < 1e-15);
        assert!(chi_sq_div(&[0.5, 0.5], &[1.0, 0.0]).is_err());
        assert!(chi_sq_div(&[0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_div(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((kl_div(&[1.0, 1.0], &[e, 1.0]).unwrap() - (e - 2.0)).abs() < 1e-15);
        assert!(kl_div(&[0.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(shannon_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((shannon_entropy(&[0.5, 0.5]).unwrap() - LN_2).abs() < 1e-15);
        let n = 4096;
        let h = shannon_entropy(&vec![1.0 / n as f64; n]).unwrap();
        assert!((h - 8.317766166719343).abs() < 1e-9);
        assert!(shannon_entropy(&[-0.1, 1.1]).is_err());
    }

    fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, len).prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn lse_rows_shift_equivariant(data in prop::collection::vec(-50.0f64..50.0, 12), s in -100.0f64..100.0) {
            let x = DenseMatrix::new(3, 4, data.clone()).unwrap();
            let y = DenseMatrix::new(3, 4, data.iter().map(|v| v + s).collect()).unwrap();
            let a = lse_rows(&x).unwrap();
            let b = lse_rows(&y).unwrap();
            for (a, b) in a.iter().zip(&b) {
                prop_assert!((a + s - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn chi_sq_dominates_l1_squared((y, x) in (2usize..20).prop_flat_map(|n| (simplex(n), simplex(n)))) {
            let chi = chi_sq_div(&y, &x).unwrap();
            let l1 = dist_l1(&y, &x);
            prop_assert!(chi >= l1 * l1 - 1e-12);
        }

        #[test]
        fn kl_is_nonnegative(pairs in prop::collection::vec((0.001f64..10.0, 0.001f64..10.0), 1..30)) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(kl_div(&x, &y).unwrap() >= -1e-12);
        }

        #[test]
        fn lse_reproduces_row_sums(data in prop::collection::vec(-690.0f64..0.0, 20)) {
            let p: Vec<f64> = data.iter().map(|l| l.exp()).collect();
            let logp = DenseMatrix::new(4, 5, data).unwrap();
            let out = lse_rows(&logp).unwrap();
            for (i, row) in p.chunks(5).enumerate() {
                let s: f64 = row.iter().sum();
                prop_assert!((out[i].exp() - s).abs() <= 1e-12 * s);
            }
        }

        #[test]
        fn entropy_bounded(p in (1usize..50).prop_flat_map(simplex)) {
            let total: f64 = p.iter().sum();
            let p: Vec<f64> = p.iter().map(|x| x / total).collect();
            if (p.iter().sum::<f64>() - 1.0).abs() <= 1e-12 {
                let h = shannon_entropy(&p).unwrap();
                prop_assert!(h >= 0.0 && h <= (p.len() as f64).ln() + 1e-12);
            }
        }
    }
}
