//! Process exit codes and machine-readable error reports.

use otn_core::OtError;
use serde_json::{json, Value};

pub const EXIT_OK: i32 = 0;
/// Some benchmark runs failed; the summary covers the successful ones.
pub const EXIT_PARTIAL: i32 = 1;
/// Invalid arguments or configuration.
pub const EXIT_USAGE: i32 = 2;
/// Missing or unreadable files, malformed problem or config files.
pub const EXIT_IO: i32 = 3;
/// A solver exhausted its budget (steps, CG iterations, discounting, line search).
pub const EXIT_NONCONVERGENCE: i32 = 4;
/// A numerical breakdown such as overflow or loss of positive definiteness.
pub const EXIT_NUMERICAL: i32 = 5;

pub fn exit_code(err: &OtError) -> i32 {
    match err.root() {
        OtError::Io(_) | OtError::Parse { .. } | OtError::Csv(_) | OtError::Json(_) => EXIT_IO,
        OtError::NonConvergence { .. }
        | OtError::CgNonConvergence { .. }
        | OtError::Stagnation { .. }
        | OtError::LineSearch { .. } => EXIT_NONCONVERGENCE,
        OtError::Overflow { .. }
        | OtError::Conditioning(_)
        | OtError::NotDescent { .. }
        | OtError::NotPositiveDefinite { .. } => EXIT_NUMERICAL,
        OtError::Dimension(_) | OtError::Domain(_) | OtError::Degenerate(_) | OtError::Refused(_) => EXIT_USAGE,
        OtError::Outer { .. } => unreachable!("root strips outer context"),
    }
}

fn kind(err: &OtError) -> &'static str {
    match err {
        OtError::Dimension(_) => "dimension",
        OtError::Domain(_) => "domain",
        OtError::Overflow { .. } => "overflow",
        OtError::Conditioning(_) => "conditioning",
        OtError::CgNonConvergence { .. } => "cg-nonconvergence",
        OtError::Stagnation { .. } => "stagnation",
        OtError::NonConvergence { .. } => "nonconvergence",
        OtError::LineSearch { .. } => "line-search",
        OtError::NotDescent { .. } => "not-descent",
        OtError::Degenerate(_) => "degenerate",
        OtError::Refused(_) => "refused",
        OtError::NotPositiveDefinite { .. } => "not-positive-definite",
        OtError::Parse { .. } => "parse",
        OtError::Outer { .. } => "outer",
        OtError::Io(_) => "io",
        OtError::Csv(_) => "csv",
        OtError::Json(_) => "json",
    }
}

/// JSON description of a failure, with the outer-iteration context (if any)
/// and the numeric fields of the root cause.
pub fn diagnostic(err: &OtError) -> Value {
    let root = err.root();
    let mut out = json!({
        "error": kind(root),
        "message": err.to_string(),
        "exit_code": exit_code(err),
    });
    if let OtError::Outer { t, gamma, .. } = err {
        out["outer_iteration"] = json!(t);
        out["gamma"] = json!(gamma);
    }
    let details = match root {
        OtError::NonConvergence {
            what,
            budget,
            grad_norm_l1,
            target,
        } => json!({"what": what, "budget": budget, "grad_norm_l1": grad_norm_l1, "target": target}),
        OtError::CgNonConvergence { iters, residual_l1, .. } => json!({"iters": iters, "residual_l1": residual_l1}),
        OtError::Stagnation {
            rho,
            residual_l1,
            target,
            cg_iters,
            ..
        } => json!({"rho": rho, "residual_l1": residual_l1, "target": target, "cg_iters": cg_iters}),
        OtError::LineSearch { min_alpha, grad_norm_l1 } => {
            json!({"min_alpha": min_alpha, "grad_norm_l1": grad_norm_l1})
        }
        OtError::Overflow { row, col, log_value } => json!({"row": row, "col": col, "log_value": log_value}),
        OtError::NotDescent { slope } => json!({"slope": slope}),
        OtError::NotPositiveDefinite { pivot, value } => json!({"pivot": pivot, "value": value}),
        OtError::Parse { path, line, .. } => json!({"path": path, "line": line}),
        _ => Value::Null,
    };
    if !details.is_null() {
        out["details"] = details;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outer_context_is_kept_and_root_decides_the_code() {
        let err = OtError::Outer {
            t: 3,
            gamma: 128.0,
            source: Box::new(OtError::LineSearch {
                min_alpha: 1e-9,
                grad_norm_l1: 0.5,
            }),
        };
        assert_eq!(exit_code(&err), EXIT_NONCONVERGENCE);
        let d = diagnostic(&err);
        assert_eq!(d["error"], "line-search");
        assert_eq!(d["outer_iteration"], 3);
        assert_eq!(d["details"]["grad_norm_l1"], 0.5);
    }

    #[test]
    fn io_errors_map_to_the_io_code() {
        let err = OtError::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        assert_eq!(exit_code(&err), EXIT_IO);
        assert_eq!(diagnostic(&err)["error"], "io");
    }
}
