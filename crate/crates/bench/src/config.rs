//! Benchmark configuration: a JSON document whose fields can each be
//! overridden from the command line.

use std::path::{Path, PathBuf};

use otn_core::problem::{grid_problem, load_problem, MarginalKind, Metric};
use otn_core::{OtError, Problem, Result, SolverKind};
use serde::{Deserialize, Serialize};

/// Where a benchmark problem comes from. Generated problems are instantiated
/// once per seed; files are loaded once and ignore the seed list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProblemSpec {
    Grid {
        side: usize,
        metric: Metric,
        marginal: MarginalKind,
    },
    File {
        path: PathBuf,
    },
}

/// One solver configuration in a sweep. Unset fields inherit the top-level
/// values of the config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SettingSpec {
    pub label: Option<String>,
    pub solver: Option<SolverKind>,
    pub q_init: Option<f64>,
    pub adaptive_q: Option<bool>,
    pub adaptive_rho0: Option<bool>,
}

/// A fully resolved solver configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub label: String,
    pub solver: SolverKind,
    pub q_init: f64,
    pub adaptive_q: bool,
    pub adaptive_rho0: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub problems: Vec<ProblemSpec>,
    pub solver: SolverKind,
    pub gamma_i: f64,
    pub gamma_f: f64,
    pub p: f64,
    pub q_init: f64,
    pub adaptive_q: bool,
    pub adaptive_rho0: bool,
    pub w_r: f64,
    pub seeds: Vec<u64>,
    pub repeats: usize,
    pub output_dir: PathBuf,
    /// Solves run concurrently on this many threads.
    pub jobs: usize,
    /// Kernel-internal parallelism inside each solve.
    pub parallel: bool,
    /// Sweep settings; empty means a single setting from the top-level fields.
    pub settings: Vec<SettingSpec>,
    /// Temperature of the reference solve used for the optimality gap when
    /// `n` is too large for the exact oracle. Defaults to `16 γ_f`.
    pub reference_gamma_f: Option<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            problems: Vec::new(),
            solver: SolverKind::TruncatedNewton,
            gamma_i: 32.0,
            gamma_f: 262_144.0,
            p: 1.5,
            q_init: 2.0,
            adaptive_q: true,
            adaptive_rho0: true,
            w_r: 0.45,
            seeds: vec![0],
            repeats: 1,
            output_dir: PathBuf::from("bench-out"),
            jobs: 1,
            parallel: false,
            settings: Vec::new(),
            reference_gamma_f: None,
        }
    }
}

fn bad(msg: String) -> OtError {
    OtError::Domain(msg)
}

fn check_q(q: f64, what: &str) -> Result<()> {
    if !(q > 1.0 && q.is_finite()) {
        return Err(bad(format!("{what} {q} must be finite and greater than 1")));
    }
    Ok(())
}

impl BenchConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text)?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.problems.is_empty() {
            return Err(bad("config lists no problems".into()));
        }
        for spec in &self.problems {
            if let ProblemSpec::Grid { side: 0, .. } = spec {
                return Err(bad("grid side must be at least 1".into()));
            }
        }
        for (name, g) in [("gamma_i", self.gamma_i), ("gamma_f", self.gamma_f)] {
            if !(g > 0.0 && g.is_finite()) {
                return Err(bad(format!("{name} = {g} must be positive and finite")));
            }
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(bad(format!("p = {} must be at least 1", self.p)));
        }
        check_q(self.q_init, "q_init")?;
        if !(0.0..=0.5).contains(&self.w_r) {
            return Err(bad(format!("w_r = {} outside [0, 0.5]", self.w_r)));
        }
        if self.seeds.is_empty() {
            return Err(bad("seed list is empty".into()));
        }
        if self.repeats == 0 || self.jobs == 0 {
            return Err(bad("repeats and jobs must be at least 1".into()));
        }
        if let Some(g) = self.reference_gamma_f {
            if !(g > self.gamma_f && g.is_finite()) {
                return Err(bad(format!("reference_gamma_f = {g} must exceed gamma_f = {}", self.gamma_f)));
            }
        }
        for s in &self.settings {
            if let Some(q) = s.q_init {
                check_q(q, "setting q_init")?;
            }
        }
        let settings = self.resolved_settings();
        let mut labels: Vec<&str> = settings.iter().map(|s| s.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(bad("setting labels must be unique".into()));
        }
        Ok(())
    }

    pub fn resolved_settings(&self) -> Vec<Setting> {
        let specs = if self.settings.is_empty() {
            vec![SettingSpec::default()]
        } else {
            self.settings.clone()
        };
        specs
            .into_iter()
            .map(|s| {
                let solver = s.solver.unwrap_or(self.solver);
                let q_init = s.q_init.unwrap_or(self.q_init);
                let adaptive_q = s.adaptive_q.unwrap_or(self.adaptive_q);
                let adaptive_rho0 = s.adaptive_rho0.unwrap_or(self.adaptive_rho0);
                let label = s.label.unwrap_or_else(|| {
                    let schedule = if adaptive_q { "adaptive" } else { "fixed" };
                    let rho = if adaptive_rho0 { "" } else { "-rho0zero" };
                    format!("{solver}-q{q_init:.4}-{schedule}{rho}")
                });
                Setting {
                    label: sanitize(&label),
                    solver,
                    q_init,
                    adaptive_q,
                    adaptive_rho0,
                }
            })
            .collect()
    }

    pub fn reference_gamma(&self) -> f64 {
        self.reference_gamma_f.unwrap_or(16.0 * self.gamma_f)
    }

    /// Instantiates every problem, generated ones once per seed.
    pub fn instantiate_problems(&self) -> Result<Vec<Problem>> {
        let mut out = Vec::new();
        for spec in &self.problems {
            match spec {
                ProblemSpec::Grid { side, metric, marginal } => {
                    for &seed in &self.seeds {
                        out.push(grid_problem(*side, *metric, *marginal, seed)?);
                    }
                }
                ProblemSpec::File { path } => {
                    let mut prob = load_problem(path)?;
                    if prob.label.is_empty() {
                        prob.label = sanitize(&path.display().to_string());
                    }
                    out.push(prob);
                }
            }
        }
        let mut labels: Vec<&str> = out.iter().map(|p| p.label.as_str()).collect();
        labels.sort_unstable();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(bad(format!("problem label '{}' appears twice", w[0])));
        }
        Ok(out)
    }
}

/// Keeps a label usable as a file name.
pub fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_lossless() {
        let config = BenchConfig {
            problems: vec![
                ProblemSpec::Grid {
                    side: 8,
                    metric: Metric::L2sq,
                    marginal: MarginalKind::SmoothRandom,
                },
                ProblemSpec::File { path: "p.otp".into() },
            ],
            q_init: 2f64.powf(0.25),
            w_r: 0.1 + 0.2,
            seeds: vec![3, 1, 4],
            settings: vec![SettingSpec {
                q_init: Some(std::f64::consts::SQRT_2),
                adaptive_q: Some(false),
                ..Default::default()
            }],
            reference_gamma_f: Some(1e6 / 3.0),
            ..Default::default()
        };
        let back: BenchConfig = serde_json::from_str(&config.to_json()).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn defaults_fill_missing_fields() {
        let config: BenchConfig =
            serde_json::from_str(r#"{"problems": [{"kind": "grid", "side": 4, "metric": "l1", "marginal": "uniform"}]}"#)
                .unwrap();
        config.validate().unwrap();
        assert_eq!(config.gamma_i, 32.0);
        assert_eq!(config.resolved_settings().len(), 1);
    }

    #[test]
    fn unknown_fields_and_bad_ranges_are_rejected() {
        assert!(serde_json::from_str::<BenchConfig>(r#"{"gamma": 3}"#).is_err());
        let mut config = BenchConfig {
            problems: vec![ProblemSpec::File { path: "x".into() }],
            ..Default::default()
        };
        config.validate().unwrap();
        config.q_init = 1.0;
        assert!(config.validate().is_err());
        config.q_init = 2.0;
        config.w_r = 0.6;
        assert!(config.validate().is_err());
        config.w_r = 0.45;
        config.settings = vec![SettingSpec::default(), SettingSpec::default()];
        assert!(config.validate().is_err(), "duplicate labels");
    }

    #[test]
    fn generated_problems_follow_the_seed_list() {
        let config = BenchConfig {
            problems: vec![ProblemSpec::Grid {
                side: 2,
                metric: Metric::L1,
                marginal: MarginalKind::SpikyRandom,
            }],
            seeds: vec![5, 6],
            ..Default::default()
        };
        let probs = config.instantiate_problems().unwrap();
        assert_eq!(probs.len(), 2);
        assert_ne!(probs[0].r, probs[1].r);
    }
}
