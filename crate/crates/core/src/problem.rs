//! OT problem instances: grid costs, synthetic marginals, and the plain-text
//! problem file format.
//!
//! Random marginals are drawn from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded
//! with `seed_from_u64`, which produces the same stream on every platform.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{OtError, Result};
use crate::tensor::DenseMatrix;

/// Marginals are accepted as probability vectors within this distance of the simplex.
pub const SIMPLEX_TOL: f64 = 1e-12;
/// Parsed marginals within this distance of sum 1 are renormalized; beyond it they are rejected.
pub const PARSE_SIMPLEX_TOL: f64 = 1e-9;

/// The log-intensity random walk behind `SmoothRandom` has step sd `SMOOTH_WALK_SPREAD / √n`,
/// so its end-to-end spread does not grow with n.
const SMOOTH_WALK_SPREAD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub cost: DenseMatrix,
    pub r: Vec<f64>,
    pub c: Vec<f64>,
    pub label: String,
}

impl Problem {
    pub fn new(cost: DenseMatrix, r: Vec<f64>, c: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        let n = r.len();
        if cost.rows() != n || cost.cols() != c.len() {
            return Err(OtError::Dimension(format!(
                "cost is {}x{} but marginals have lengths {} and {}",
                cost.rows(),
                cost.cols(),
                n,
                c.len()
            )));
        }
        if n == 0 {
            return Err(OtError::Dimension("empty problem".into()));
        }
        if let Some(x) = cost.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(OtError::Domain(format!("cost entry {x} outside [0, 1]")));
        }
        check_simplex(&r, "r", SIMPLEX_TOL)?;
        check_simplex(&c, "c", SIMPLEX_TOL)?;
        Ok(Self {
            cost,
            r,
            c,
            label: label.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.r.len()
    }
}

fn check_simplex(p: &[f64], name: &str, tol: f64) -> Result<()> {
    if let Some(x) = p.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(OtError::Domain(format!("marginal {name} has invalid entry {x}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(OtError::Domain(format!("marginal {name} sums to {s}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L1,
    L2sq,
}

impl FromStr for Metric {
    type Err = OtError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Metric::L1),
            "l2sq" | "l2^2" | "sqeuclidean" => Ok(Metric::L2sq),
            _ => Err(OtError::Domain(format!("unknown metric '{s}' (expected l1 or l2sq)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginalKind {
    Uniform,
    SmoothRandom,
    SpikyRandom,
}

impl FromStr for MarginalKind {
    type Err = OtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(MarginalKind::Uniform),
            "smooth-random" | "smooth" => Ok(MarginalKind::SmoothRandom),
            "spiky-random" | "spiky" => Ok(MarginalKind::SpikyRandom),
            _ => Err(OtError::Domain(format!(
                "unknown marginal kind '{s}' (expected uniform, smooth-random or spiky-random)"
            ))),
        }
    }
}

/// Pairwise distances between the points of a `side × side` pixel grid
/// (row-major), scaled so the largest entry is 1.
pub fn gen_grid_cost(side: usize, metric: Metric) -> Result<DenseMatrix> {
    if side == 0 {
        return Err(OtError::Dimension("grid side must be at least 1".into()));
    }
    let n = side * side;
    let coords: Vec<(f64, f64)> = (0..n).map(|k| ((k / side) as f64, (k % side) as f64)).collect();
    let raw = |a: (f64, f64), b: (f64, f64)| {
        let (dx, dy) = ((a.0 - b.0).abs(), (a.1 - b.1).abs());
        match metric {
            Metric::L1 => dx + dy,
            Metric::L2sq => dx * dx + dy * dy,
        }
    };
    let max = if side > 1 {
        raw((0.0, 0.0), ((side - 1) as f64, (side - 1) as f64))
    } else {
        1.0
    };
    Ok(DenseMatrix::from_fn(n, n, |i, j| raw(coords[i], coords[j]) / max))
}

/// Synthetic probability vector. Identical arguments give identical output.
///
/// `SmoothRandom` exponentiates a Gaussian random walk (step sd 2/√n) over the
/// index order; `SpikyRandom` normalizes i.i.d. unit exponentials. Both are
/// strictly positive.
pub fn gen_marginal(n: usize, kind: MarginalKind, seed: u64) -> Vec<f64> {
    let raw: Vec<f64> = match kind {
        MarginalKind::Uniform => vec![1.0; n],
        MarginalKind::SmoothRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let step_sd = SMOOTH_WALK_SPREAD / (n as f64).sqrt();
            let mut level = 0.0f64;
            let mut walk = Vec::with_capacity(n);
            for _ in 0..n {
                walk.push(level);
                let step: f64 = StandardNormal.sample(&mut rng);
                level += step_sd * step;
            }
            let top = walk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            walk.iter().map(|w| (w - top).exp()).collect()
        }
        MarginalKind::SpikyRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| {
                    let x: f64 = Exp1.sample(&mut rng);
                    // Exp1 can return exactly 0.0 with negligible probability.
                    x.max(f64::MIN_POSITIVE)
                })
                .collect()
        }
    };
    normalize(raw)
}

fn normalize(mut p: Vec<f64>) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Grid problem with independent marginals for rows and columns.
pub fn grid_problem(side: usize, metric: Metric, marginal: MarginalKind, seed: u64) -> Result<Problem> {
    let n = side * side;
    let cost = gen_grid_cost(side, metric)?;
    let r = gen_marginal(n, marginal, seed.wrapping_mul(2));
    let c = gen_marginal(n, marginal, seed.wrapping_mul(2).wrapping_add(1));
    let metric_name = match metric {
        Metric::L1 => "l1",
        Metric::L2sq => "l2sq",
    };
    let label = format!("grid{side}-{metric_name}-{marginal:?}-s{seed}").to_lowercase();
    Problem::new(cost, r, c, label)
}

fn fmt17(out: &mut String, xs: &[f64]) {
    for (k, x) in xs.iter().enumerate() {
        if k > 0 {
            out.push(' ');
        }
        write!(out, "{x:.16e}").unwrap();
    }
    out.push('\n');
}

/// Renders a problem in the `OTP n` text format.
pub fn format_problem(problem: &Problem) -> String {
    let n = problem.n();
    let mut out = String::with_capacity(24 * (n + 2) * n.max(1));
    writeln!(out, "OTP {n}").unwrap();
    fmt17(&mut out, &problem.r);
    fmt17(&mut out, &problem.c);
    for i in 0..n {
        fmt17(&mut out, problem.cost.row(i));
    }
    out
}

pub fn save_problem(problem: &Problem, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_problem(problem))?;
    Ok(())
}

pub fn load_problem(path: impl AsRef<Path>) -> Result<Problem> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut problem = parse_problem(&text, path)?;
    problem.label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(problem)
}

/// Parses the `OTP n` format. `path` is only used in error messages.
pub fn parse_problem(text: &str, path: &Path) -> Result<Problem> {
    let err = |line: usize, msg: String| OtError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l));
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let mut head = header.split_whitespace();
    if head.next() != Some("OTP") {
        return Err(err(1, format!("expected header 'OTP n', found '{header}'")));
    }
    let n: usize = head
        .next()
        .and_then(|t| t.parse().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| err(1, format!("bad problem size in header '{header}'")))?;
    if let Some(extra) = head.next() {
        return Err(err(1, format!("unexpected token '{extra}' in header")));
    }

    let mut read_row = |what: &str| -> Result<(usize, Vec<f64>)> {
        let (no, line) = lines
            .by_ref()
            .find(|(_, l)| !l.trim().is_empty())
            .ok_or_else(|| err(0, format!("missing {what}")))?;
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| err(no, format!("bad number '{t}': {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != n {
            return Err(err(no, format!("{what} has {} values, expected {n}", vals.len())));
        }
        if let Some(x) = vals.iter().find(|x| !x.is_finite()) {
            return Err(err(no, format!("non-finite value {x} in {what}")));
        }
        Ok((no, vals))
    };

    let (r_line, r) = read_row("row marginal")?;
    let (c_line, c) = read_row("column marginal")?;
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        let (no, row) = read_row(&format!("cost row {i}"))?;
        if let Some(x) = row.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(err(no, format!("cost entry {x} outside [0, 1]")));
        }
        data.extend(row);
    }
    if let Some((no, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(err(no, format!("trailing data after {n} cost rows")));
    }

    let r = parse_marginal(r, "row marginal").map_err(|m| err(r_line, m))?;
    let c = parse_marginal(c, "column marginal").map_err(|m| err(c_line, m))?;
    Problem::new(DenseMatrix::new(n, n, data)?, r, c, "")
}

fn parse_marginal(p: Vec<f64>, what: &str) -> std::result::Result<Vec<f64>, String> {
    if let Some(x) = p.iter().find(|x| **x < 0.0) {
        return Err(format!("{what} has negative entry {x}"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PARSE_SIMPLEX_TOL {
        return Err(format!("{what} sums to {s}, not 1"));
    }
    // Values already on the simplex are kept verbatim so round trips are exact.
    if (s - 1.0).abs() > SIMPLEX_TOL {
        Ok(normalize(p))
    } else {
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_cost_examples() {
        assert_eq!(gen_grid_cost(1, Metric::L1).unwrap().data(), &[0.0]);
        let c = gen_grid_cost(2, Metric::L1).unwrap();
        assert_eq!(c.get(0, 3), 1.0);
        assert_eq!(c.get(0, 1), 0.5);
        let mut vals: Vec<f64> = c.data().to_vec();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        assert_eq!(vals, vec![0.0, 0.5, 1.0]);
        let c = gen_grid_cost(2, Metric::L2sq).unwrap();
        assert_eq!(c.get(0, 3), 1.0);
        assert_eq!(c.get(0, 1), 0.5);
        assert!(matches!(gen_grid_cost(0, Metric::L1), Err(OtError::Dimension(_))));
    }

    #[test]
    fn grid_cost_structure() {
        for metric in [Metric::L1, Metric::L2sq] {
            for side in 2..6 {
                let c = gen_grid_cost(side, metric).unwrap();
                assert!(c.is_symmetric(0.0));
                assert!((0..c.rows()).all(|i| c.get(i, i) == 0.0));
                assert_eq!(c.max_entry(), Some(1.0));
            }
        }
    }

    #[test]
    fn marginal_examples() {
        assert_eq!(gen_marginal(4, MarginalKind::Uniform, 99), vec![0.25; 4]);
        for kind in [MarginalKind::SmoothRandom, MarginalKind::SpikyRandom] {
            assert_eq!(gen_marginal(50, kind, 3), gen_marginal(50, kind, 3));
            assert_ne!(gen_marginal(50, kind, 3), gen_marginal(50, kind, 4));
        }
        let p = gen_marginal(100, MarginalKind::SpikyRandom, 7);
        assert!(p.iter().all(|&x| x > 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn header_dimension_mismatch() {
        let text = "OTP 3\n0.5 0.5\n0.5 0.5\n0 1\n1 0\n";
        let e = parse_problem(text, Path::new("x.otp")).unwrap_err();
        assert!(matches!(e, OtError::Parse { line: 2, .. }), "{e}");
    }

    #[test]
    fn rejects_bad_marginal() {
        let text = "OTP 2\n0.45 0.45\n0.5 0.5\n0 1\n1 0\n";
        let e = parse_problem(text, Path::new("x.otp")).unwrap_err();
        assert!(matches!(e, OtError::Parse { line: 2, .. }), "{e}");
        assert!(e.to_string().contains("sums to"));
    }

    #[test]
    fn renormalizes_small_drift() {
        let text = "OTP 2\n0.5000000001 0.5\n0.5 0.5\n0 1\n1 0\n";
        let p = parse_problem(text, Path::new("x.otp")).unwrap();
        assert!((p.r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_malformed_header_and_cost() {
        for text in ["OTX 2\n", "OTP\n", "OTP -1\n", "OTP 1 2\n"] {
            assert!(matches!(
                parse_problem(text, Path::new("h")),
                Err(OtError::Parse { line: 1, .. })
            ));
        }
        let text = "OTP 1\n1\n1\n1.5\n";
        assert!(matches!(parse_problem(text, Path::new("h")), Err(OtError::Parse { line: 4, .. })));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.otp");
        let p = grid_problem(3, Metric::L2sq, MarginalKind::SmoothRandom, 11).unwrap();
        save_problem(&p, &path).unwrap();
        let q = load_problem(&path).unwrap();
        assert_eq!(p.cost, q.cost);
        assert_eq!(p.r, q.r);
        assert_eq!(p.c, q.c);
        assert_eq!(q.label, "p");
    }

    proptest! {
        #[test]
        fn text_round_trip_is_exact(seed in any::<u64>(), side in 1usize..4, spiky in any::<bool>()) {
            let kind = if spiky { MarginalKind::SpikyRandom } else { MarginalKind::SmoothRandom };
            let p = grid_problem(side, Metric::L1, kind, seed).unwrap();
            let q = parse_problem(&format_problem(&p), Path::new("mem")).unwrap();
            prop_assert_eq!(p.cost, q.cost);
            prop_assert_eq!(p.r, q.r);
            prop_assert_eq!(p.c, q.c);
        }
    }
}
