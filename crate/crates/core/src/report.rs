//! Per-run summaries and per-outer-iteration telemetry.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mdot::SolverKind;
use crate::ops::OpCounts;

pub const TRACE_HEADER: &str =
    "t,gamma,eps_d,newton_steps,cg_iters,sinkhorn_steps,linesearch_backtracks,grad_norm_l1,rho_final,delta_min,q,ops_n2,wall_ms";

/// One outer iteration. `q` is the ratio used to pick the next temperature
/// (after adjustment), `ops_n2` counts this iteration only and `wall_ms` is
/// cumulative since the solve started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub gamma: f64,
    pub eps_d: f64,
    pub newton_steps: usize,
    pub cg_iters: usize,
    pub sinkhorn_steps: usize,
    pub linesearch_backtracks: usize,
    pub grad_norm_l1: f64,
    pub rho_final: f64,
    pub delta_min: f64,
    pub q: f64,
    pub ops_n2: u64,
    pub wall_ms: f64,
}

pub fn write_trace(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(TRACE_HEADER.split(','))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    let rows = rd.deserialize().collect::<std::result::Result<Vec<TraceRow>, _>>()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub n: usize,
    pub solver: SolverKind,
    pub gamma_i: f64,
    pub gamma_f: f64,
    pub p: f64,
    pub q_init: f64,
    pub adaptive_q: bool,
    pub adaptive_rho0: bool,
    pub w_r: f64,
    pub primal_cost_rounded: f64,
    pub dual_value_final: f64,
    /// `‖∇g‖₁` at the final potentials against the original marginals.
    pub grad_norm_final: f64,
    pub error_bound: f64,
    pub ops: OpCounts,
    pub ops_total: u64,
    pub wall_ms: f64,
    pub outer_iterations: usize,
    pub newton_steps: usize,
    pub cg_iters: usize,
    pub sinkhorn_steps: usize,
    /// Kernels ran multi-threaded; wall times are not comparable to serial runs.
    pub parallel: bool,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: usize) -> TraceRow {
        TraceRow {
            t,
            gamma: 32.0 * 2f64.powi(t as i32),
            eps_d: 1.0 / 3.0,
            newton_steps: 4,
            cg_iters: 57,
            sinkhorn_steps: 3,
            linesearch_backtracks: 0,
            grad_norm_l1: 1.234_567_890_123_456_7e-9,
            rho_final: 0.999_023_437_5,
            delta_min: if t == 2 { f64::INFINITY } else { 0.973 },
            q: std::f64::consts::SQRT_2,
            ops_n2: 120,
            wall_ms: 0.1 + t as f64,
        }
    }

    #[test]
    fn trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim_end(), TRACE_HEADER);
        assert!(read_trace(&path).unwrap().is_empty());

        let rows: Vec<TraceRow> = (1..=3).map(row).collect();
        write_trace(&rows, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 4);
        assert_eq!(read_trace(&path).unwrap(), rows);
    }
}
