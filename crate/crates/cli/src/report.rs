//! Comparison tables and curve exports over finished run directories.
//!
//! Only artifacts recorded in a manifest with a matching content hash are
//! read; anything else is an orphan and the report refuses it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lsp_core::attack::AttackKind;
use lsp_core::certify::CertificateReport;
use lsp_core::train::TrainLog;
use serde::{Deserialize, Serialize};

use crate::commands::{
    attack_manifest_name, read_robustness, Outcome, RobustnessRow, CERTIFICATES_FILE,
    CERTIFY_MANIFEST, ROBUSTNESS_FILE, TRAIN_LOG_FILE,
};
use crate::error::{config, format, CliResult};
use crate::manifest::{now, sha256_file, FileRef, RunManifest, MANIFEST_FILE};

pub const REPORT_FILE: &str = "report.md";
pub const CURVES_FILE: &str = "curves.csv";
pub const REPORT_MANIFEST: &str = "report.manifest.json";

/// Column order of the robustness table.
pub const ATTACK_COLUMNS: [AttackKind; 3] = [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Cw];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportJob {
    pub runs: Vec<PathBuf>,
}

/// Everything the report reads from one run directory.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub name: String,
    pub manifest: RunManifest,
    pub log: TrainLog,
    pub robustness: Vec<RobustnessRow>,
    pub certificates: Vec<CertificateReport>,
}

impl RunSummary {
    /// Latest row for `kind`.
    pub fn attack(&self, kind: AttackKind) -> Option<&RobustnessRow> {
        self.robustness.iter().rev().find(|r| r.attack == kind)
    }

    /// Clean accuracy from the latest attack row, else from the last epoch.
    pub fn clean_accuracy(&self) -> Option<f64> {
        self.robustness
            .last()
            .map(|r| r.clean_acc)
            .or_else(|| self.log.last().map(|r| r.clean_acc))
    }
}

fn check_hash(run: &str, file: &FileRef, dir: &Path) -> CliResult<()> {
    let actual = sha256_file(&dir.join(&file.path))?;
    if actual != file.sha256 {
        return Err(format(format!(
            "run {run}: {} does not match its manifest",
            file.path.display()
        )));
    }
    Ok(())
}

pub fn load_run(dir: &Path) -> CliResult<RunSummary> {
    let name = dir
        .file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    let manifest_path = dir.join(MANIFEST_FILE);
    let log_path = dir.join(TRAIN_LOG_FILE);
    if !log_path.is_file() {
        return Err(format(format!("run {name}: missing {TRAIN_LOG_FILE}")));
    }
    if !manifest_path.is_file() {
        return Err(format(format!("run {name}: {TRAIN_LOG_FILE} has no manifest")));
    }
    let manifest = RunManifest::load(&manifest_path)?;
    let log_ref = manifest
        .output("train_log")
        .filter(|f| f.path == Path::new(TRAIN_LOG_FILE))
        .ok_or_else(|| format(format!("run {name}: manifest does not record {TRAIN_LOG_FILE}")))?;
    check_hash(&name, log_ref, dir)?;
    let log = TrainLog::load_csv(&log_path)?;

    let robustness_path = dir.join(ROBUSTNESS_FILE);
    let robustness = if robustness_path.is_file() {
        let rows = read_robustness(&robustness_path)?;
        for (i, row) in rows.iter().enumerate() {
            let attack_manifest = dir.join(attack_manifest_name(i));
            let claimed = RunManifest::load(&attack_manifest)
                .ok()
                .and_then(|m| m.output("robustness").cloned())
                .filter(|f| f.row == Some(i));
            let line = row.csv_line()?;
            if claimed.is_none_or(|f| f.sha256 != crate::manifest::sha256_bytes(&line)) {
                return Err(format(format!("run {name}: robustness row {i} has no manifest")));
            }
        }
        rows
    } else {
        Vec::new()
    };

    let certificates_path = dir.join(CERTIFICATES_FILE);
    let certificates = if certificates_path.is_file() {
        let m = RunManifest::load(&dir.join(CERTIFY_MANIFEST))
            .map_err(|_| format(format!("run {name}: {CERTIFICATES_FILE} has no manifest")))?;
        let file = m
            .output("certificates")
            .ok_or_else(|| format(format!("run {name}: {CERTIFICATES_FILE} has no manifest")))?;
        check_hash(&name, file, dir)?;
        let mut r = csv::Reader::from_path(&certificates_path).map_err(|e| format(e.to_string()))?;
        r.deserialize()
            .map(|c| c.map_err(|e| format(format!("run {name}: {e}"))))
            .collect::<CliResult<Vec<_>>>()?
    } else {
        Vec::new()
    };

    Ok(RunSummary {
        name,
        manifest,
        log,
        robustness,
        certificates,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Markdown comparison of the given runs.
pub fn render(runs: &[RunSummary]) -> String {
    let mut md = String::from("# Robustness report\n\n## Accuracy (%)\n\n");
    md.push_str("| Method | Clean | FGSM | PGD | CW |\n|---|---|---|---|---|\n");
    for run in runs {
        let _ = write!(md, "| {} | {}", run.name, cell(run.clean_accuracy()));
        for kind in ATTACK_COLUMNS {
            let _ = write!(md, " | {}", cell(run.attack(kind).map(|r| r.robust_acc)));
        }
        md.push_str(" |\n");
    }

    md.push_str("\n## Attack settings\n\n| Method | Attack | Norm | Epsilon | Steps | Step size |\n|---|---|---|---|---|---|\n");
    for run in runs {
        for kind in ATTACK_COLUMNS {
            if let Some(r) = run.attack(kind) {
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {} | {} | {} |",
                    run.name, kind, r.norm, r.epsilon, r.steps, r.step_size
                );
            }
        }
    }

    md.push_str("\n## Training\n\n| Method | Epochs | Final CE | First LSP | Final LSP | First purity | Final purity |\n|---|---|---|---|---|---|---|\n");
    for run in runs {
        let (first, last) = (run.log.first(), run.log.last());
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} |",
            run.name,
            run.log.records.len(),
            f(last.map(|r| r.ce)),
            f(first.map(|r| r.lsp)),
            f(last.map(|r| r.lsp)),
            f(first.map(|r| r.purity)),
            f(last.map(|r| r.purity)),
        );
    }

    if runs.iter().any(|r| !r.certificates.is_empty()) {
        md.push_str("\n## Certified radius (L2)\n\n| Method | Samples | Mean radius | Median radius | Falsified |\n|---|---|---|---|---|\n");
        for run in runs.iter().filter(|r| !r.certificates.is_empty()) {
            let mut radii: Vec<f64> = run
                .certificates
                .iter()
                .map(|c| c.certified_radius)
                .filter(|r| r.is_finite())
                .collect();
            radii.sort_by(f64::total_cmp);
            let (mean, med) = if radii.is_empty() {
                ("-".to_string(), "-".to_string())
            } else {
                let mean = radii.iter().sum::<f64>() / radii.len() as f64;
                (format!("{mean:.6}"), format!("{:.6}", median(&radii)))
            };
            let falsified = run.certificates.iter().filter(|c| c.falsified).count();
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                run.name,
                run.certificates.len(),
                mean,
                med,
                falsified
            );
        }
    }
    md
}

pub fn exec_report(job: &ReportJob, out: &Path) -> CliResult<Outcome> {
    if job.runs.is_empty() {
        return Err(config("report needs at least one run directory"));
    }
    let runs = job.runs.iter().map(|d| load_run(d)).collect::<CliResult<Vec<_>>>()?;
    for (i, run) in runs.iter().enumerate() {
        if runs[..i].iter().any(|r| r.name == run.name) {
            return Err(config(format!("two runs are named {}", run.name)));
        }
    }
    std::fs::create_dir_all(out)
        .map_err(|e| config(format!("cannot create output directory {}: {e}", out.display())))?;
    let started_at = now();
    let mut inputs = Vec::new();
    for (dir, run) in job.runs.iter().zip(&runs) {
        let path = dir.join(MANIFEST_FILE);
        inputs.push(FileRef {
            role: format!("manifest:{}", run.name),
            sha256: sha256_file(&path)?,
            path,
            row: None,
        });
    }
    let mut outputs = Vec::new();
    std::fs::write(out.join(REPORT_FILE), render(&runs)).map_err(lsp_core::Error::from)?;
    outputs.push(FileRef {
        role: "report".into(),
        path: REPORT_FILE.into(),
        sha256: sha256_file(&out.join(REPORT_FILE))?,
        row: None,
    });
    for run in &runs {
        let rel = Path::new(&run.name).join(CURVES_FILE);
        std::fs::create_dir_all(out.join(&run.name)).map_err(lsp_core::Error::from)?;
        run.log.save_csv(out.join(&rel))?;
        outputs.push(FileRef {
            role: format!("curves:{}", run.name),
            sha256: sha256_file(&out.join(&rel))?,
            path: rel,
            row: None,
        });
    }
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: "report".into(),
        seed: 0,
        config: serde_json::to_value(job).map_err(|e| format(e.to_string()))?,
        dataset_sha256: None,
        inputs,
        outputs,
        started_at,
        finished_at: now(),
    };
    let manifest_path = out.join(REPORT_MANIFEST);
    manifest.save(&manifest_path)?;
    Ok(Outcome {
        manifest_path,
        manifest,
    })
}
