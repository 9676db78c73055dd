//! The `lsp` command-line tool as a library, so tests can drive commands
//! in-process and compare them with direct library calls.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;

use std::path::Path;

use serde::de::DeserializeOwned;

use args::{Cli, Command};
use commands::{exec_attack, exec_certify, exec_gen, exec_pretext, exec_train, Outcome};
use error::{format, CliError, CliResult};
use manifest::{sha256_file, RunManifest};
use report::{exec_report, ReportJob};

pub fn run(cli: Cli) -> CliResult<Outcome> {
    match cli.command {
        Command::Gen(a) => exec_gen(&config::resolve_gen(&a)?, &a.common.out),
        Command::Pretext(a) => exec_pretext(&config::resolve_pretext(&a)?, &a.common.out),
        Command::Train(a) => exec_train(&config::resolve_train(&a)?, &a.common.out),
        Command::TrainAdv(a) => exec_train(&config::resolve_train_adv(&a)?, &a.common.out),
        Command::Attack(a) => exec_attack(&config::resolve_attack(&a)?, &a.common.out),
        Command::Certify(a) => exec_certify(&config::resolve_certify(&a)?, &a.common.out),
        Command::Report(a) => exec_report(&ReportJob { runs: a.runs }, &a.out),
        Command::Replay(a) => replay(&a.manifest, &a.out),
    }
}

fn job<T: DeserializeOwned>(m: &RunManifest) -> CliResult<T> {
    serde_json::from_value(m.config.clone())
        .map_err(|e| format(format!("manifest config for {}: {e}", m.command)))
}

/// Re-executes the run a manifest describes into `out` and checks that every
/// recorded output comes back with the same content hash.
pub fn replay(manifest_path: &Path, out: &Path) -> CliResult<Outcome> {
    let original = RunManifest::load(manifest_path)?;
    for input in &original.inputs {
        if sha256_file(&input.path)? != input.sha256 {
            return Err(format(format!(
                "input {} changed since the recorded run",
                input.path.display()
            )));
        }
    }
    let outcome = match original.command.as_str() {
        "gen" => exec_gen(&job(&original)?, out)?,
        "pretext" => exec_pretext(&job(&original)?, out)?,
        "train" | "train-adv" => exec_train(&job(&original)?, out)?,
        "attack" => exec_attack(&job(&original)?, out)?,
        "certify" => exec_certify(&job(&original)?, out)?,
        "report" => exec_report(&job(&original)?, out)?,
        other => return Err(format(format!("cannot replay command {other:?}"))),
    };
    let mismatched: Vec<String> = original
        .outputs
        .iter()
        .filter(|o| {
            outcome
                .manifest
                .output(&o.role)
                .is_none_or(|n| n.sha256 != o.sha256)
        })
        .map(|o| o.role.clone())
        .collect();
    if mismatched.is_empty() {
        Ok(outcome)
    } else {
        Err(CliError::Mismatch(format!("outputs differ: {}", mismatched.join(", "))))
    }
}
