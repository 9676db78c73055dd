//! Resolved settings of each command. Resolution order: built-in defaults,
//! then the JSON `--config` file, then command-line flags.

use std::path::{Path, PathBuf};

use lsp_core::attack::{AttackConfig, AttackKind};
use lsp_core::certify::CertifyConfig;
use lsp_core::train::{LrSchedule, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::args::{
    AttackArgs, AttackFlags, CertifyArgs, Common, GenArgs, GenKind, OptimFlags, PretextArgs,
    StructureFlags, TrainAdvArgs, TrainArgs,
};
use crate::error::{config, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenJob {
    pub kind: GenKind,
    pub n: usize,
    pub noise: f64,
    pub sigma: f64,
    pub centers: usize,
    pub seed: u64,
}

impl Default for GenJob {
    fn default() -> Self {
        GenJob {
            kind: GenKind::Moons,
            n: 500,
            noise: 0.1,
            sigma: 0.05,
            centers: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretextJob {
    pub data: Option<PathBuf>,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub train: TrainConfig,
}

impl Default for PretextJob {
    fn default() -> Self {
        PretextJob {
            data: None,
            hidden: vec![64],
            out_dim: 16,
            train: TrainConfig::default(),
        }
    }
}

/// Settings of `train` and `train-adv`; `train.adversarial` tells them apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainJob {
    pub data: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for TrainJob {
    fn default() -> Self {
        TrainJob {
            data: None,
            encoder: None,
            hidden: vec![32, 32],
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackJob {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub kind: AttackKind,
    pub attack: AttackConfig,
}

impl Default for AttackJob {
    fn default() -> Self {
        AttackJob {
            model: None,
            data: None,
            kind: AttackKind::Pgd,
            attack: AttackConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyJob {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub limit: Option<usize>,
    pub certify: CertifyConfig,
}

fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config(format!("config {}: {e}", path.display())))
}

fn set<T: Clone>(target: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *target = v.clone();
    }
}

fn parse_drops(items: &[String]) -> CliResult<Vec<(usize, f64)>> {
    items
        .iter()
        .map(|item| {
            let (e, d) = item
                .split_once(':')
                .ok_or_else(|| config(format!("learning-rate drop {item:?} is not epoch:divisor")))?;
            let e = e.trim().parse().map_err(|_| config(format!("bad drop epoch in {item:?}")))?;
            let d = d.trim().parse().map_err(|_| config(format!("bad drop divisor in {item:?}")))?;
            Ok((e, d))
        })
        .collect()
}

fn apply_optim(
    flags: &OptimFlags,
    data: &mut Option<PathBuf>,
    hidden: &mut Vec<usize>,
    cfg: &mut TrainConfig,
) -> CliResult<()> {
    if flags.data.is_some() {
        *data = flags.data.clone();
    }
    set(hidden, &flags.hidden);
    set(&mut cfg.epochs, &flags.epochs);
    set(&mut cfg.batch_size, &flags.batch_size);
    set(&mut cfg.lr.initial, &flags.lr);
    if let Some(drops) = &flags.lr_drops {
        cfg.lr = LrSchedule {
            initial: cfg.lr.initial,
            drops: parse_drops(drops)?,
        };
    }
    set(&mut cfg.momentum, &flags.momentum);
    Ok(())
}

fn apply_structure(flags: &StructureFlags, cfg: &mut TrainConfig) {
    set(&mut cfg.lambda, &flags.lambda);
    set(&mut cfg.m, &flags.m);
    set(&mut cfg.lsp_kind, &flags.lsp_kind);
    set(&mut cfg.structure, &flags.structure);
    set(&mut cfg.early_stopping, &flags.early_stopping);
    set(&mut cfg.val_fraction, &flags.val_fraction);
}

fn apply_attack(flags: &AttackFlags, cfg: &mut AttackConfig) {
    set(&mut cfg.norm, &flags.norm);
    set(&mut cfg.epsilon, &flags.epsilon);
    set(&mut cfg.steps, &flags.steps);
    set(&mut cfg.step_size, &flags.step_size);
    set(&mut cfg.loss, &flags.attack_loss);
    set(&mut cfg.random_init, &flags.random_init);
}

fn config_path(common: &Common) -> Option<&Path> {
    common.config.as_deref()
}

pub fn resolve_gen(args: &GenArgs) -> CliResult<GenJob> {
    let mut job: GenJob = load(config_path(&args.common))?;
    set(&mut job.kind, &args.kind);
    set(&mut job.n, &args.n);
    set(&mut job.noise, &args.noise);
    set(&mut job.sigma, &args.sigma);
    set(&mut job.centers, &args.centers);
    set(&mut job.seed, &args.common.seed);
    Ok(job)
}

pub fn resolve_pretext(args: &PretextArgs) -> CliResult<PretextJob> {
    let mut job: PretextJob = load(config_path(&args.common))?;
    apply_optim(&args.optim, &mut job.data, &mut job.hidden, &mut job.train)?;
    set(&mut job.out_dim, &args.out_dim);
    set(&mut job.train.tau, &args.tau);
    set(&mut job.train.bank_momentum, &args.bank_momentum);
    set(&mut job.train.seed, &args.common.seed);
    Ok(job)
}

pub fn resolve_train(args: &TrainArgs) -> CliResult<TrainJob> {
    let mut job: TrainJob = load(config_path(&args.common))?;
    apply_optim(&args.optim, &mut job.data, &mut job.hidden, &mut job.train)?;
    apply_structure(&args.structure, &mut job.train);
    apply_attack(&args.attack, &mut job.train.attack);
    if args.encoder.is_some() {
        job.encoder = args.encoder.clone();
    }
    if args.mixup_alpha.is_some() {
        job.train.mixup_alpha = args.mixup_alpha;
    }
    set(&mut job.train.seed, &args.common.seed);
    if job.train.adversarial {
        return Err(config("`train` runs standard training; use `train-adv` for adversarial training"));
    }
    Ok(job)
}

pub fn resolve_train_adv(args: &TrainAdvArgs) -> CliResult<TrainJob> {
    let mut job: TrainJob = load(config_path(&args.common))?;
    job.train.adversarial = true;
    apply_optim(&args.optim, &mut job.data, &mut job.hidden, &mut job.train)?;
    apply_structure(&args.structure, &mut job.train);
    apply_attack(&args.attack, &mut job.train.attack);
    set(&mut job.train.bank_momentum, &args.bank_momentum);
    set(&mut job.train.seed, &args.common.seed);
    check_adversarial(&job)?;
    Ok(job)
}

/// Settings that only make sense for standard training.
pub fn check_adversarial(job: &TrainJob) -> CliResult<()> {
    if job.train.mixup_alpha.is_some() {
        return Err(config("Mixup is a standard-training baseline; drop mixup_alpha for `train-adv`"));
    }
    if job.encoder.is_some() {
        return Err(config("adversarial training mines neighbors from its memory banks; drop the encoder"));
    }
    Ok(())
}

pub fn resolve_attack(args: &AttackArgs) -> CliResult<AttackJob> {
    let mut job: AttackJob = load(config_path(&args.common))?;
    if args.model.is_some() {
        job.model = args.model.clone();
    }
    if args.data.is_some() {
        job.data = args.data.clone();
    }
    set(&mut job.kind, &args.kind);
    apply_attack(&args.attack, &mut job.attack);
    set(&mut job.attack.seed, &args.common.seed);
    Ok(job)
}

pub fn resolve_certify(args: &CertifyArgs) -> CliResult<CertifyJob> {
    let mut job: CertifyJob = load(config_path(&args.common))?;
    if args.model.is_some() {
        job.model = args.model.clone();
    }
    if args.data.is_some() {
        job.data = args.data.clone();
    }
    if args.limit.is_some() {
        job.limit = args.limit;
    }
    set(&mut job.certify.mode, &args.mode);
    set(&mut job.certify.radius_probes, &args.radius_probes);
    set(&mut job.certify.probe_radius, &args.probe_radius);
    set(&mut job.certify.falsify_probes, &args.falsify_probes);
    set(&mut job.certify.seed, &args.common.seed);
    Ok(job)
}
