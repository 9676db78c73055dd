//! Command executors. Each one consumes a fully resolved job, writes its
//! artifacts into an output directory and records them in a manifest.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use lsp_core::attack::{evaluate_robust_accuracy, AttackKind, AttackLoss, Norm};
use lsp_core::certify::certify_batch;
use lsp_core::data::{gen_gaussian_blobs, gen_two_moons, Dataset};
use lsp_core::model::MlpModel;
use lsp_core::numerics::Tensor;
use lsp_core::structure::Extractor;
use lsp_core::train::{train, train_pretext};
use lsp_core::Error;
use serde::{Deserialize, Serialize};

use crate::args::GenKind;
use crate::config::{check_adversarial, AttackJob, CertifyJob, GenJob, PretextJob, TrainJob};
use crate::error::{config, format, CliError, CliResult};
use crate::manifest::{now, sha256_bytes, sha256_file, FileRef, RunManifest, MANIFEST_FILE};

pub const DATA_FILE: &str = "data.csv";
pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const PRETEXT_LOG_FILE: &str = "pretext_log.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const NAT_BANK_FILE: &str = "nat_bank.bin";
pub const ADV_BANK_FILE: &str = "adv_bank.bin";
pub const ROBUSTNESS_FILE: &str = "robustness.csv";
pub const CERTIFICATES_FILE: &str = "certificates.csv";
pub const CERTIFY_MANIFEST: &str = "certify.manifest.json";

/// What a command wrote.
#[derive(Debug)]
pub struct Outcome {
    pub manifest_path: PathBuf,
    pub manifest: RunManifest,
}

/// Collects inputs and outputs of one invocation, then writes its manifest.
struct Recorder {
    command: &'static str,
    dir: PathBuf,
    started_at: String,
    dataset_sha256: Option<String>,
    inputs: Vec<FileRef>,
    outputs: Vec<FileRef>,
}

impl Recorder {
    fn start(command: &'static str, dir: &Path) -> CliResult<Recorder> {
        std::fs::create_dir_all(dir)
            .map_err(|e| config(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(Recorder {
            command,
            dir: dir.to_path_buf(),
            started_at: now(),
            dataset_sha256: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, role: &str, path: &Path) -> CliResult<()> {
        let sha256 = sha256_file(path)?;
        if role == "data" {
            self.dataset_sha256 = Some(sha256.clone());
        }
        self.inputs.push(FileRef {
            role: role.into(),
            path: path.to_path_buf(),
            sha256,
            row: None,
        });
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn output(&mut self, role: &str, name: &str) -> CliResult<()> {
        let sha256 = sha256_file(&self.path(name))?;
        self.outputs.push(FileRef {
            role: role.into(),
            path: name.into(),
            sha256,
            row: None,
        });
        Ok(())
    }

    fn row_output(&mut self, role: &str, name: &str, row: usize, content: &[u8]) {
        self.outputs.push(FileRef {
            role: role.into(),
            path: name.into(),
            sha256: sha256_bytes(content),
            row: Some(row),
        });
    }

    fn finish(self, config: &impl Serialize, seed: u64, manifest_name: &str) -> CliResult<Outcome> {
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.into(),
            seed,
            config: serde_json::to_value(config).map_err(|e| format(e.to_string()))?,
            dataset_sha256: self.dataset_sha256,
            inputs: self.inputs,
            outputs: self.outputs,
            started_at: self.started_at,
            finished_at: now(),
        };
        let manifest_path = self.dir.join(manifest_name);
        manifest.save(&manifest_path)?;
        Ok(Outcome {
            manifest_path,
            manifest,
        })
    }
}

fn require_file(path: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    let path = path.clone().ok_or_else(|| config(format!("missing {what} path")))?;
    if !path.is_file() {
        return Err(config(format!("{what} path {} does not exist", path.display())));
    }
    Ok(path)
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    Ok(Dataset::load_csv(path)?)
}

fn model_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims
}

/// `k` centers evenly spaced on a circle of radius 0.3 around the middle of
/// the unit square.
pub fn blob_centers(k: usize) -> CliResult<Tensor> {
    let data = (0..k)
        .flat_map(|i| {
            let t = std::f64::consts::TAU * i as f64 / k as f64;
            [0.5 + 0.3 * t.cos(), 0.5 + 0.3 * t.sin()]
        })
        .collect();
    Ok(Tensor::matrix(k, 2, data)?)
}

pub fn exec_gen(job: &GenJob, out: &Path) -> CliResult<Outcome> {
    let mut rec = Recorder::start("gen", out)?;
    let data = match job.kind {
        GenKind::Moons => gen_two_moons(job.n, job.noise, job.seed)?,
        GenKind::Blobs => {
            if job.centers < 2 {
                return Err(config("blobs need at least 2 centers"));
            }
            gen_gaussian_blobs(job.n, &blob_centers(job.centers)?, job.sigma, job.seed)?
        }
    };
    data.save_csv(rec.path(DATA_FILE))?;
    rec.output("data", DATA_FILE)?;
    rec.finish(job, job.seed, MANIFEST_FILE)
}

#[derive(Serialize)]
struct PretextRow {
    epoch: usize,
    loss: f64,
    purity: f64,
}

pub fn exec_pretext(job: &PretextJob, out: &Path) -> CliResult<Outcome> {
    let data_path = require_file(&job.data, "dataset")?;
    job.train.validate()?;
    let mut rec = Recorder::start("pretext", out)?;
    rec.input("data", &data_path)?;
    let data = load_data(&data_path)?;
    let encoder = MlpModel::init(&model_dims(data.dim(), &job.hidden, job.out_dim), job.train.seed)?;
    let (encoder, log) = train_pretext(encoder, &data, &job.train)?;
    encoder.save(rec.path(ENCODER_FILE))?;
    rec.output("encoder", ENCODER_FILE)?;
    let rows = log
        .loss
        .iter()
        .zip(&log.purity)
        .enumerate()
        .map(|(epoch, (&loss, &purity))| PretextRow { epoch, loss, purity });
    write_csv(&rec.path(PRETEXT_LOG_FILE), rows)?;
    rec.output("pretext_log", PRETEXT_LOG_FILE)?;
    rec.finish(job, job.train.seed, MANIFEST_FILE)
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> CliError {
    format(e.to_string())
}

/// Runs `train` or `train-adv` depending on `job.train.adversarial`.
pub fn exec_train(job: &TrainJob, out: &Path) -> CliResult<Outcome> {
    let command = if job.train.adversarial { "train-adv" } else { "train" };
    if job.train.adversarial {
        check_adversarial(job)?;
    }
    let data_path = require_file(&job.data, "dataset")?;
    job.train.validate()?;
    let mut rec = Recorder::start(command, out)?;
    rec.input("data", &data_path)?;
    let extractor = match &job.encoder {
        Some(_) => {
            let path = require_file(&job.encoder, "encoder")?;
            rec.input("encoder", &path)?;
            Extractor::Encoder(MlpModel::load(&path)?)
        }
        None => Extractor::Identity,
    };
    let data = load_data(&data_path)?;
    let dims = model_dims(data.dim(), &job.hidden, data.num_classes());
    let model = MlpModel::init(&dims, job.train.seed)?;
    let trained = train(model, &extractor, &data, &job.train)?;
    trained.model.save(rec.path(MODEL_FILE))?;
    rec.output("model", MODEL_FILE)?;
    trained.log.save_csv(rec.path(TRAIN_LOG_FILE))?;
    rec.output("train_log", TRAIN_LOG_FILE)?;
    if let Some((nat, adv)) = &trained.banks {
        nat.save(rec.path(NAT_BANK_FILE))?;
        rec.output("nat_bank", NAT_BANK_FILE)?;
        adv.save(rec.path(ADV_BANK_FILE))?;
        rec.output("adv_bank", ADV_BANK_FILE)?;
    }
    rec.finish(job, job.train.seed, MANIFEST_FILE)
}

/// One line of `robustness.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub model: String,
    pub model_sha256: String,
    pub dataset_sha256: String,
    pub attack: AttackKind,
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub loss: AttackLoss,
    pub random_init: bool,
    pub seed: u64,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub samples: usize,
}

impl RobustnessRow {
    /// The row as it appears in the CSV body, without a header.
    pub fn csv_line(&self) -> CliResult<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.serialize(self).map_err(csv_err)?;
        w.into_inner().map_err(|e| format(e.to_string()))
    }
}

pub fn read_robustness(path: &Path) -> CliResult<Vec<RobustnessRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize()
        .map(|row| row.map_err(|e| format(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn attack_manifest_name(row: usize) -> String {
    format!("attack-{row}.manifest.json")
}

pub fn exec_attack(job: &AttackJob, out: &Path) -> CliResult<Outcome> {
    let model_path = require_file(&job.model, "model")?;
    let data_path = require_file(&job.data, "dataset")?;
    job.attack.validate()?;
    let mut rec = Recorder::start("attack", out)?;
    rec.input("model", &model_path)?;
    rec.input("data", &data_path)?;
    let model = MlpModel::load(&model_path)?;
    let data = load_data(&data_path)?;
    let eval = evaluate_robust_accuracy(&model, &data, job.kind, &job.attack)?;
    let loss = match job.kind {
        AttackKind::Cw => AttackLoss::CwMargin,
        _ => job.attack.loss,
    };
    let row = RobustnessRow {
        model: model_path.display().to_string(),
        model_sha256: rec.inputs[0].sha256.clone(),
        dataset_sha256: rec.inputs[1].sha256.clone(),
        attack: job.kind,
        norm: job.attack.norm,
        epsilon: job.attack.epsilon,
        steps: job.attack.steps,
        step_size: job.attack.step_size,
        loss,
        random_init: job.attack.random_init,
        seed: job.attack.seed,
        clean_acc: eval.clean_accuracy,
        robust_acc: eval.robust_accuracy,
        samples: eval.samples,
    };
    let path = rec.path(ROBUSTNESS_FILE);
    let index = if path.is_file() { read_robustness(&path)?.len() } else { 0 };
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(Error::from)?;
    let mut w = csv::WriterBuilder::new().has_headers(index == 0).from_writer(file);
    w.serialize(&row).map_err(csv_err)?;
    w.flush().map_err(Error::from)?;
    rec.row_output("robustness", ROBUSTNESS_FILE, index, &row.csv_line()?);
    rec.finish(job, job.attack.seed, &attack_manifest_name(index))
}

pub fn exec_certify(job: &CertifyJob, out: &Path) -> CliResult<Outcome> {
    let model_path = require_file(&job.model, "model")?;
    let data_path = require_file(&job.data, "dataset")?;
    job.certify.validate()?;
    let mut rec = Recorder::start("certify", out)?;
    rec.input("model", &model_path)?;
    rec.input("data", &data_path)?;
    let model = MlpModel::load(&model_path)?;
    let data = load_data(&data_path)?;
    let n = job.limit.map_or(data.len(), |l| l.min(data.len()));
    let ids: Vec<usize> = (0..n).collect();
    let x = data.features().select_rows(&ids)?;
    let reports = certify_batch(&model, &x, &ids, &job.certify)?;
    write_csv(&rec.path(CERTIFICATES_FILE), &reports)?;
    rec.output("certificates", CERTIFICATES_FILE)?;
    rec.finish(job, job.certify.seed, CERTIFY_MANIFEST)
}
