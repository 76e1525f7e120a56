//! `verify-theory`.

use std::path::PathBuf;

use brrl_core::theory::{run_check, CheckOptions, SuiteConfig, TheoryReport, CHECK_NAMES};
use clap::Args;
use rayon::prelude::*;

use crate::error::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Run every check (the default when no --check is given).
    #[arg(long)]
    pub all: bool,
    /// A single check; repeatable.
    #[arg(long = "check")]
    pub checks: Vec<String>,
    /// Random instances per check.
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flip the sign of the predicted improvement in the identity checks.
    #[arg(long, hide = true)]
    pub inject_bug: bool,
}

pub fn selected_checks(args: &VerifyArgs) -> CliResult<Vec<String>> {
    if args.all || args.checks.is_empty() {
        return Ok(CHECK_NAMES.iter().map(|s| s.to_string()).collect());
    }
    for c in &args.checks {
        if !CHECK_NAMES.contains(&c.as_str()) {
            return Err(CliError::Input(format!("unknown check {c:?}; expected one of {}", CHECK_NAMES.join(", "))));
        }
    }
    Ok(args.checks.clone())
}

pub fn cmd_verify(args: &VerifyArgs) -> CliResult<()> {
    if args.seeds == 0 {
        return Err(CliError::Input("--seeds must be at least 1".into()));
    }
    let names = selected_checks(args)?;
    let cfg = SuiteConfig { seeds: args.seeds, opts: CheckOptions { inject_fault: args.inject_bug }, ..SuiteConfig::default() };
    let results: Vec<_> = names
        .par_iter()
        .map(|n| run_check(n, &cfg).expect("name validated"))
        .collect::<Result<_, _>>()?;
    let report = TheoryReport::new(results);
    for c in &report.checks {
        println!(
            "{} {:<22} instances {:>4} max_violation {:>11.3e} residual {:.3e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.instances_run,
            c.max_violation,
            c.residual
        );
    }
    if let Some(path) = &args.out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Failure(e.to_string()))?;
        std::fs::write(path, json + "\n")?;
    }
    if let Some(bad) = report.checks.iter().find(|c| !c.passed) {
        return Err(CliError::Failure(format!("check {} failed; replay: {}", bad.name, bad.worst_instance)));
    }
    Ok(())
}
