//! Benchmark sweeps: every problem under every setting, per-run outputs and
//! an aggregated summary.

use std::fs;
use std::path::{Path, PathBuf};

use otn_core::oracles::{exact_ot_small, EXACT_MAX_N};
use otn_core::report::{write_trace, RunReport};
use otn_core::{mdot, tensor, MdotOptions, OtError, Problem, Result, Solution};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{BenchConfig, Setting};
use crate::diagnostics::diagnostic;
use crate::stats::spread;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUNS_FILE: &str = "runs.csv";

/// How the optimality gap of a problem was measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GapKind {
    /// Against the exact optimum from the spanning-tree oracle.
    Exact,
    /// Against a rounded solve at a higher inverse temperature.
    Reference,
    /// No reference was available (the reference solve failed).
    None,
}

#[derive(Debug, Clone)]
struct Reference {
    cost: Option<f64>,
    kind: GapKind,
}

/// One line of `runs.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub setting: String,
    pub problem: String,
    pub n: usize,
    pub repeat: usize,
    pub ok: bool,
    pub error: Option<String>,
    pub wall_ms: Option<f64>,
    pub ops_total: Option<u64>,
    pub newton_solve: Option<u64>,
    pub line_search: Option<u64>,
    pub chi_sinkhorn: Option<u64>,
    pub mirror_descent: Option<u64>,
    pub sinkhorn: Option<u64>,
    pub cg_iters: Option<usize>,
    pub outer_iterations: Option<usize>,
    pub primal_cost: Option<f64>,
    pub gap: Option<f64>,
    pub gap_kind: GapKind,
}

/// Per-setting aggregate: order statistics over successful runs.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub setting: Setting,
    pub runs: usize,
    pub failures: usize,
    pub gap_kind: String,
    /// `(metric, median, p10, p90)`; NaN when no run succeeded.
    pub metrics: Vec<(&'static str, f64, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
    pub output_dir: PathBuf,
}

impl BenchOutcome {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| !r.ok).count()
    }
}

pub fn mdot_options(config: &BenchConfig, setting: &Setting) -> MdotOptions {
    let mut opts = MdotOptions {
        solver: setting.solver,
        adaptive_q: setting.adaptive_q,
        w_r: config.w_r,
        ..MdotOptions::default()
    };
    opts.projector.adaptive_rho0 = setting.adaptive_rho0;
    opts
}

fn reference_for(problem: &Problem, config: &BenchConfig) -> Reference {
    if problem.n() <= EXACT_MAX_N {
        if let Ok(exact) = exact_ot_small(&problem.cost, &problem.r, &problem.c) {
            return Reference {
                cost: Some(exact.cost),
                kind: GapKind::Exact,
            };
        }
    }
    match mdot(problem, config.gamma_i, config.reference_gamma(), config.p, 2.0, &MdotOptions::default()) {
        Ok(sol) => Reference {
            cost: Some(sol.primal_cost),
            kind: GapKind::Reference,
        },
        Err(_) => Reference {
            cost: None,
            kind: GapKind::None,
        },
    }
}

/// Output paths of one run, without extension.
pub fn run_stem(output_dir: &Path, setting: &str, problem: &str, repeat: usize) -> PathBuf {
    output_dir.join("runs").join(setting).join(format!("{problem}-r{repeat}"))
}

fn write_run(stem: &Path, outcome: &std::result::Result<Solution, OtError>) -> Result<()> {
    match outcome {
        Ok(sol) => {
            sol.report.save(stem.with_extension("report.json"))?;
            write_trace(&sol.trace, stem.with_extension("trace.csv"))?;
        }
        Err(e) => {
            let text = serde_json::to_string_pretty(&diagnostic(e))?;
            fs::write(stem.with_extension("error.json"), text + "\n")?;
        }
    }
    Ok(())
}

fn record(setting: &Setting, problem: &Problem, repeat: usize, outcome: &std::result::Result<Solution, OtError>, reference: &Reference) -> RunRecord {
    let report: Option<&RunReport> = outcome.as_ref().ok().map(|s| &s.report);
    let get = |f: fn(&RunReport) -> u64| report.map(f);
    RunRecord {
        setting: setting.label.clone(),
        problem: problem.label.clone(),
        n: problem.n(),
        repeat,
        ok: outcome.is_ok(),
        error: outcome.as_ref().err().map(|e| e.to_string()),
        wall_ms: report.map(|r| r.wall_ms),
        ops_total: get(|r| r.ops_total),
        newton_solve: get(|r| r.ops.newton_solve),
        line_search: get(|r| r.ops.line_search),
        chi_sinkhorn: get(|r| r.ops.chi_sinkhorn),
        mirror_descent: get(|r| r.ops.mirror_descent),
        sinkhorn: get(|r| r.ops.sinkhorn),
        cg_iters: report.map(|r| r.cg_iters),
        outer_iterations: report.map(|r| r.outer_iterations),
        primal_cost: report.map(|r| r.primal_cost_rounded),
        gap: report.and_then(|r| reference.cost.map(|c| r.primal_cost_rounded - c)),
        gap_kind: reference.kind,
    }
}

const METRICS: [&str; 11] = [
    "wall_ms",
    "ops_total",
    "newton_solve",
    "line_search",
    "chi_sinkhorn",
    "mirror_descent",
    "sinkhorn",
    "cg_iters",
    "outer_iterations",
    "primal_cost",
    "gap",
];

fn metric(r: &RunRecord, name: &str) -> Option<f64> {
    match name {
        "wall_ms" => r.wall_ms,
        "ops_total" => r.ops_total.map(|x| x as f64),
        "newton_solve" => r.newton_solve.map(|x| x as f64),
        "line_search" => r.line_search.map(|x| x as f64),
        "chi_sinkhorn" => r.chi_sinkhorn.map(|x| x as f64),
        "mirror_descent" => r.mirror_descent.map(|x| x as f64),
        "sinkhorn" => r.sinkhorn.map(|x| x as f64),
        "cg_iters" => r.cg_iters.map(|x| x as f64),
        "outer_iterations" => r.outer_iterations.map(|x| x as f64),
        "primal_cost" => r.primal_cost,
        "gap" => r.gap,
        _ => None,
    }
}

/// Aggregates run records per setting.
pub fn summarize(settings: &[Setting], records: &[RunRecord]) -> Vec<SummaryRow> {
    settings
        .iter()
        .map(|s| {
            let mine: Vec<&RunRecord> = records.iter().filter(|r| r.setting == s.label).collect();
            let mut kinds: Vec<&str> = mine
                .iter()
                .map(|r| match r.gap_kind {
                    GapKind::Exact => "exact",
                    GapKind::Reference => "reference",
                    GapKind::None => "none",
                })
                .collect();
            kinds.sort_unstable();
            kinds.dedup();
            let gap_kind = match kinds.as_slice() {
                [one] => one.to_string(),
                [] => "none".to_string(),
                _ => "mixed".to_string(),
            };
            let metrics = METRICS
                .iter()
                .map(|&name| {
                    let values: Vec<f64> = mine.iter().filter(|r| r.ok).filter_map(|r| metric(r, name)).collect();
                    match spread(&values) {
                        Some(sp) => (name, sp.median, sp.p10, sp.p90),
                        None => (name, f64::NAN, f64::NAN, f64::NAN),
                    }
                })
                .collect();
            SummaryRow {
                setting: s.clone(),
                runs: mine.len(),
                failures: mine.iter().filter(|r| !r.ok).count(),
                gap_kind,
                metrics,
            }
        })
        .collect()
}

pub fn write_summary(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["setting", "solver", "q_init", "adaptive_q", "adaptive_rho0", "runs", "failures", "gap_kind"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for m in METRICS {
        header.extend([format!("{m}_median"), format!("{m}_p10"), format!("{m}_p90")]);
    }
    w.write_record(&header)?;
    for row in rows {
        let s = &row.setting;
        let mut rec = vec![
            s.label.clone(),
            s.solver.to_string(),
            s.q_init.to_string(),
            s.adaptive_q.to_string(),
            s.adaptive_rho0.to_string(),
            row.runs.to_string(),
            row.failures.to_string(),
            row.gap_kind.clone(),
        ];
        for (_, med, p10, p90) in &row.metrics {
            rec.extend([med, p10, p90].map(|x| if x.is_nan() { String::new() } else { x.to_string() }));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the full cross product of problems, settings and repeats.
///
/// Individual solver failures are recorded (with an `.error.json` next to
/// where the report would have gone) and do not stop the sweep; I/O errors do.
pub fn run_bench(config: &BenchConfig) -> Result<BenchOutcome> {
    config.validate()?;
    let problems = config.instantiate_problems()?;
    let settings = config.resolved_settings();
    let out = config.output_dir.clone();
    for s in &settings {
        fs::create_dir_all(out.join("runs").join(&s.label))?;
    }
    fs::write(out.join("config.json"), config.to_json() + "\n")?;
    tensor::set_parallel(config.parallel);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| OtError::Refused(format!("cannot start worker pool: {e}")))?;

    let references: Vec<Reference> = pool.install(|| problems.par_iter().map(|p| reference_for(p, config)).collect());

    let tasks: Vec<(usize, usize, usize)> = (0..settings.len())
        .flat_map(|s| (0..problems.len()).flat_map(move |p| (0..config.repeats).map(move |k| (s, p, k))))
        .collect();
    let records: Vec<Result<RunRecord>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(s, p, k)| {
                let (setting, problem) = (&settings[s], &problems[p]);
                let opts = mdot_options(config, setting);
                let outcome = mdot(problem, config.gamma_i, config.gamma_f, config.p, setting.q_init, &opts);
                write_run(&run_stem(&out, &setting.label, &problem.label, k), &outcome)?;
                Ok(record(setting, problem, k, &outcome, &references[p]))
            })
            .collect()
    });
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;

    let mut w = csv::Writer::from_path(out.join(RUNS_FILE))?;
    for r in &records {
        w.serialize(r)?;
    }
    w.flush()?;
    let summary = summarize(&settings, &records);
    write_summary(&summary, out.join(SUMMARY_FILE))?;
    Ok(BenchOutcome {
        records,
        summary,
        output_dir: out,
    })
}
