use clap::Args;

use rht_core::selfcheck;

use super::{emit_json, CliError};

#[derive(Args)]
pub struct SelfcheckArgs {}

pub fn run(cli: &crate::Cli, _args: &SelfcheckArgs) -> Result<(), CliError> {
    let start = std::time::Instant::now();
    let results = selfcheck::run_all(cli.seed);
    let mut failures = 0;
    for check in &results {
        if cli.json {
            emit_json(serde_json::json!({
                "event": "selfcheck",
                "check": check.name,
                "pass": check.passed,
                "detail": check.detail,
            }));
        } else {
            let status = if check.passed { "PASS" } else { "FAIL" };
            println!("{status} {} — {}", check.name, check.detail);
        }
        if !check.passed {
            failures += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    if cli.json {
        emit_json(serde_json::json!({
            "event": "selfcheck_summary",
            "checks": results.len(),
            "failures": failures,
            "seconds": elapsed,
        }));
    } else {
        println!("{}/{} checks passed in {elapsed:.1}s", results.len() - failures, results.len());
    }
    if failures > 0 {
        return Err(CliError::Internal(format!("{failures} self-checks failed")));
    }
    Ok(())
}
