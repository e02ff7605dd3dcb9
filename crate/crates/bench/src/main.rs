// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use otn_core::problem::{grid_problem, load_problem, save_problem, MarginalKind, Metric};
use otn_core::report::write_trace;
use otn_core::{mdot, tensor, OtError, SolverKind};
use otn_bench::config::{BenchConfig, Setting};
use otn_bench::diagnostics::{diagnostic, exit_code, EXIT_OK, EXIT_PARTIAL};
use otn_bench::sweep::{mdot_options, run_bench, SUMMARY_FILE};

#[derive(Parser)]
#[command(name = "otn", version, about = "Entropic optimal transport by annealed truncated Newton projections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Grid,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic problem file.
    Gen {
        #[arg(long, value_enum, default_value = "grid")]
        kind: Kind,
        #[arg(long, default_value = "l1")]
        metric: Metric,
        #[arg(long)]
        side: usize,
        #[arg(long, default_value = "smooth-random")]
        marginal: MarginalKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve one problem file; writes report.json and trace.csv.
    Solve {
        problem: PathBuf,
        #[arg(long, default_value = "mdot-tn")]
        solver: SolverKind,
        #[arg(long, default_value_t = 32.0)]
        gamma_init: f64,
        #[arg(long, default_value_t = 262_144.0)]
        gamma_final: f64,
        #[arg(long, default_value_t = 1.5)]
        p: f64,
        #[arg(long, default_value_t = 2.0)]
        q_init: f64,
        #[arg(long, default_value_t = true, action = ArgAction::Set)]
        adaptive_q: bool,
        #[arg(long, default_value_t = true, action = ArgAction::Set)]
        adaptive_rho0: bool,
        #[arg(long, default_value_t = 0.45)]
        w_r: f64,
        /// Run the O(n²) kernels multi-threaded.
        #[arg(long)]
        parallel: bool,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run a benchmark sweep from a JSON config; flags override config fields.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        solver: Option<SolverKind>,
        #[arg(long)]
        gamma_init: Option<f64>,
        #[arg(long)]
        gamma_final: Option<f64>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        q_init: Option<f64>,
        #[arg(long)]
        adaptive_q: Option<bool>,
        #[arg(long)]
        adaptive_rho0: Option<bool>,
        #[arg(long)]
        w_r: Option<f64>,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        parallel: bool,
    },
}

fn fail(err: &OtError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_code(err) as u8)
}

fn cmd_gen(metric: Metric, side: usize, marginal: MarginalKind, seed: u64, out: &Path) -> Result<(), OtError> {
    let problem = grid_problem(side, metric, marginal, seed)?;
    save_problem(&problem, out)?;
    println!("wrote {} (n = {}, label {})", out.display(), problem.n(), problem.label);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen {
            kind: Kind::Grid,
            metric,
            side,
            marginal,
            seed,
            out,
        } => match cmd_gen(metric, side, marginal, seed, &out) {
            Ok(()) => ExitCode::from(EXIT_OK as u8),
            Err(e) => fail(&e),
        },
        Command::Solve {
            problem,
            solver,
            gamma_init,
            gamma_final,
            p,
            q_init,
            adaptive_q,
            adaptive_rho0,
            w_r,
            parallel,
            out_dir,
        } => {
            let config = BenchConfig {
                solver,
                gamma_i: gamma_init,
                gamma_f: gamma_final,
                p,
                q_init,
                adaptive_q,
                adaptive_rho0,
                w_r,
                ..BenchConfig::default()
            };
            let setting = Setting {
                label: String::new(),
                solver,
                q_init,
                adaptive_q,
                adaptive_rho0,
            };
            let prob = match load_problem(&problem) {
                Ok(p) => p,
                Err(e) => return fail(&e),
            };
            tensor::set_parallel(parallel);
            let outcome = mdot(&prob, gamma_init, gamma_final, p, q_init, &mdot_options(&config, &setting));
            let written = std::fs::create_dir_all(&out_dir).map_err(OtError::from).and_then(|()| match &outcome {
                Ok(sol) => {
                    sol.report.save(out_dir.join("report.json"))?;
                    write_trace(&sol.trace, out_dir.join("trace.csv"))
                }
                Err(e) => {
                    let text = serde_json::to_string_pretty(&diagnostic(e))?;
                    println!("{text}");
                    std::fs::write(out_dir.join("error.json"), text + "\n").map_err(OtError::from)
                }
            });
            if let Err(e) = written {
                return fail(&e);
            }
            match outcome {
                Ok(sol) => {
                    let r = &sol.report;
                    println!(
                        "{}: cost {:.10} (bound {:.3e}), {} outer iterations, {} O(n^2) ops, {:.1} ms",
                        r.label, r.primal_cost_rounded, r.error_bound, r.outer_iterations, r.ops_total, r.wall_ms
                    );
                    ExitCode::from(EXIT_OK as u8)
                }
                Err(e) => fail(&e),
            }
        }
        Command::Bench {
            config,
            solver,
            gamma_init,
            gamma_final,
            p,
            q_init,
            adaptive_q,
            adaptive_rho0,
            w_r,
            seeds,
            repeats,
            output_dir,
            jobs,
            parallel,
        } => {
            let mut cfg = match config {
                Some(path) => match BenchConfig::load(&path) {
                    Ok(c) => c,
                    Err(e) => return fail(&e),
                },
                None => BenchConfig::default(),
            };
            if let Some(x) = solver {
                cfg.solver = x;
            }
            if let Some(x) = gamma_init {
                cfg.gamma_i = x;
            }
            if let Some(x) = gamma_final {
                cfg.gamma_f = x;
            }
            if let Some(x) = p {
                cfg.p = x;
            }
            if let Some(x) = q_init {
                cfg.q_init = x;
            }
            if let Some(x) = adaptive_q {
                cfg.adaptive_q = x;
            }
            if let Some(x) = adaptive_rho0 {
                cfg.adaptive_rho0 = x;
            }
            if let Some(x) = w_r {
                cfg.w_r = x;
            }
            if let Some(x) = seeds {
                cfg.seeds = x;
            }
            if let Some(x) = repeats {
                cfg.repeats = x;
            }
            if let Some(x) = output_dir {
                cfg.output_dir = x;
            }
            if let Some(x) = jobs {
                cfg.jobs = x;
            }
            cfg.parallel |= parallel;
            match run_bench(&cfg) {
                Ok(outcome) => {
                    let failures = outcome.failures();
                    println!(
                        "{} runs, {failures} failed; summary in {}",
                        outcome.records.len(),
                        outcome.output_dir.join(SUMMARY_FILE).display()
                    );
                    ExitCode::from(if failures == 0 { EXIT_OK } else { EXIT_PARTIAL } as u8)
                }
                Err(e) => fail(&e),
            }
        }
    }
}
