//! Training loops: standard training with the structure term, adversarial
//! training with representation memory banks, the instance-discrimination
//! pretext task for the extractor, and the Mixup baseline.
//!
//! Every random choice draws from a stream keyed by [`derive_seed`], so a run
//! is a pure function of its config, data and seed.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::attack::{evaluate_robust_accuracy, pgd, AttackConfig, AttackKind};
use crate::data::Dataset;
use crate::error::{config_err, numeric_err, shape_err, Error, Result};
use crate::model::{check_labels, cross_entropy, soft_cross_entropy, MlpModel};
use crate::numerics::{Tape, Tensor, Var};
use crate::structure::{
    lsp_loss_adversarial, mine_bank_neighbors, neighbor_purity, normalize_rows, random_others,
    Discrepancy, Extractor, MemoryBank, NeighborIndex, StandardBatch, StructureMode,
    StructureTable,
};

/// Independent random streams of a run.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const ATTACK: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const NAT_BANK: u64 = 5;
    pub const ADV_BANK: u64 = 6;
    pub const GLOBAL: u64 = 7;
    pub const MIXUP: u64 = 8;
    pub const PRETEXT_BANK: u64 = 9;
}

/// Seed for item `index` of stream `stream` of a run seeded with `base`
/// (splitmix64 finalizer over the three words).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let golden = 0x9e37_79b9_7f4a_7c15u64;
    mix(mix(mix(base.wrapping_add(golden)) ^ stream.wrapping_mul(golden)) ^ index)
}

/// Initial learning rate with multiplicative drops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    /// `(epoch, divisor)` pairs; from epoch index `epoch` on (0-based) the
    /// rate is divided by `divisor`, on top of earlier drops.
    pub drops: Vec<(usize, f64)>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 0.1,
            drops: vec![(75, 10.0), (90, 10.0)],
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            drops: Vec::new(),
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        self.drops
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.initial, |lr, (_, d)| lr / d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial.is_finite() && self.initial >= 0.0) {
            return Err(config_err!("learning rate must be finite and >= 0, got {}", self.initial));
        }
        for w in self.drops.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(config_err!("schedule epochs must be strictly increasing"));
            }
        }
        if let Some((e, d)) = self.drops.iter().find(|(_, d)| !(d.is_finite() && *d > 0.0)) {
            return Err(config_err!("divisor at epoch {} must be positive, got {}", e, d));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub lambda: f64,
    pub m: usize,
    pub lsp_kind: Discrepancy,
    pub structure: StructureMode,
    pub adversarial: bool,
    /// Inner maximization for adversarial training and the per-epoch PGD evaluation.
    pub attack: AttackConfig,
    pub early_stopping: bool,
    pub val_fraction: f64,
    pub bank_momentum: f64,
    /// Instance-discrimination temperature.
    pub tau: f64,
    /// Enables the Mixup baseline with `Beta(alpha, alpha)` weights.
    pub mixup_alpha: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            lr: LrSchedule::default(),
            momentum: 0.9,
            lambda: 1.0,
            m: 8,
            lsp_kind: Discrepancy::L2,
            structure: StructureMode::Local,
            adversarial: false,
            attack: AttackConfig::default(),
            early_stopping: false,
            val_fraction: 0.1,
            bank_momentum: 0.5,
            tau: 0.07,
            mixup_alpha: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch size must be positive"));
        }
        self.lr.validate()?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(config_err!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.m < 2 {
            return Err(config_err!("m must be at least 2, got {}", self.m));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config_err!("validation fraction must lie in [0, 1)"));
        }
        if !(self.bank_momentum > 0.0 && self.bank_momentum <= 1.0) {
            return Err(config_err!("bank momentum must lie in (0, 1]"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(config_err!("tau must be positive, got {}", self.tau));
        }
        if let Some(a) = self.mixup_alpha {
            if !(a.is_finite() && a > 0.0) {
                return Err(config_err!("mixup alpha must be positive, got {}", a));
            }
        }
        self.attack.validate()
    }

    fn uses_structure(&self) -> bool {
        self.lambda > 0.0 && self.structure != StructureMode::Off
    }
}

/// SGD with heavy-ball momentum: `v <- mu v + g`, `p <- p - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(model: &MlpModel, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Checks every gradient before touching any parameter.
    pub fn step(&mut self, model: &mut MlpModel, grads: &[Tensor], lr: f64) -> Result<()> {
        let names = model.param_names();
        if grads.len() != self.velocity.len() {
            return Err(shape_err!("{} gradients for {} parameters", grads.len(), self.velocity.len()));
        }
        for ((g, v), name) in grads.iter().zip(&self.velocity).zip(&names) {
            if g.shape() != v.shape() {
                return Err(shape_err!("gradient for {} has shape {:?}", name, g.shape()));
            }
            if !g.is_finite() {
                return Err(numeric_err!("non-finite gradient for {}", name));
            }
        }
        for ((p, v), g) in model.params_mut().into_iter().zip(&mut self.velocity).zip(grads) {
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// One completed epoch (0-based). Loss columns are means over the epoch's
/// batches; accuracies and purity are measured once the epoch ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub lsp: f64,
    pub total: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub purity: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Anchors left out of the structure term because their neighbors all
    /// coincided with them, summed over every training batch.
    pub skipped_anchors: usize,
    /// Epoch whose model was returned under early stopping.
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn first(&self) -> Option<&EpochRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        if self.records.is_empty() {
            w.write_record(["epoch", "ce", "lsp", "total", "clean_acc", "robust_acc", "purity", "lr"])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<TrainLog> {
        let mut rd = csv::Reader::from_reader(r);
        let records = rd
            .deserialize()
            .map(|rec| {
                rec.map_err(|e: csv::Error| Error::Parse {
                    line: e.position().map_or(0, |p| p.line()),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<EpochRecord>>>()?;
        Ok(TrainLog {
            records,
            ..TrainLog::default()
        })
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<TrainLog> {
        TrainLog::read_csv(std::fs::File::open(path)?)
    }
}

/// The trained model with its log, plus the memory banks after adversarial training.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: MlpModel,
    pub log: TrainLog,
    pub banks: Option<(MemoryBank, MemoryBank)>,
}

/// Training and held-out halves of a dataset under the run's split stream.
pub fn split_for_run(data: &Dataset, cfg: &TrainConfig) -> Result<(Dataset, Option<Dataset>)> {
    data.stratified_split(cfg.val_fraction, derive_seed(cfg.seed, stream::SPLIT, 0))
}

/// Batches of training indices for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::SHUFFLE, epoch as u64)));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Attack settings for training batch `step`.
pub fn batch_attack(cfg: &TrainConfig, step: u64) -> AttackConfig {
    AttackConfig {
        seed: derive_seed(cfg.seed, stream::ATTACK, step),
        ..cfg.attack.clone()
    }
}

fn eval_attack(cfg: &TrainConfig, epoch: usize) -> AttackConfig {
    AttackConfig {
        seed: derive_seed(cfg.seed, stream::EVAL, epoch as u64),
        ..cfg.attack.clone()
    }
}

fn check_model(model: &MlpModel, data: &Dataset) -> Result<()> {
    if model.input_dim() != data.dim() || model.output_dim() != data.num_classes() {
        return Err(config_err!(
            "model maps {} -> {} but data has {} features and {} classes",
            model.input_dim(),
            model.output_dim(),
            data.dim(),
            data.num_classes()
        ));
    }
    Ok(())
}

/// `lambda * a + (1 - lambda) * b` for inputs and one-hot labels.
pub fn mixup_batch(
    x_i: &Tensor,
    y_i: &[usize],
    x_j: &Tensor,
    y_j: &[usize],
    num_classes: usize,
    weight: f64,
) -> Result<(Tensor, Tensor)> {
    if x_i.shape() != x_j.shape() || x_i.ndim() != 2 {
        return Err(shape_err!("mixup of {:?} and {:?}", x_i.shape(), x_j.shape()));
    }
    check_labels(y_i, x_i.rows(), num_classes)?;
    check_labels(y_j, x_j.rows(), num_classes)?;
    if !(0.0..=1.0).contains(&weight) {
        return Err(config_err!("mixup weight must lie in [0, 1], got {}", weight));
    }
    let mixed = x_i
        .data()
        .iter()
        .zip(x_j.data())
        .map(|(a, b)| weight * a + (1.0 - weight) * b)
        .collect();
    let mut soft = vec![0.0; y_i.len() * num_classes];
    for (row, (&a, &b)) in y_i.iter().zip(y_j).enumerate() {
        soft[row * num_classes + a] += weight;
        soft[row * num_classes + b] += 1.0 - weight;
    }
    Ok((
        Tensor::new(x_i.shape().to_vec(), mixed)?,
        Tensor::matrix(y_i.len(), num_classes, soft)?,
    ))
}

/// One `Beta(alpha, alpha)` draw.
pub fn mixup_weight(alpha: f64, seed: u64) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| config_err!("mixup alpha {}: {}", alpha, e))?;
    Ok(beta.sample(&mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Running means of the per-batch loss terms within one epoch.
#[derive(Default)]
struct EpochLosses {
    ce: f64,
    lsp: f64,
    total: f64,
    batches: usize,
}

impl EpochLosses {
    fn add(&mut self, ce: f64, lsp: f64, total: f64) {
        self.ce += ce;
        self.lsp += lsp;
        self.total += total;
        self.batches += 1;
    }

    fn record(&self, epoch: usize, lr: f64, metrics: EpochMetrics) -> EpochRecord {
        let n = self.batches.max(1) as f64;
        EpochRecord {
            epoch,
            ce: self.ce / n,
            lsp: self.lsp / n,
            total: self.total / n,
            clean_acc: metrics.clean_acc,
            robust_acc: metrics.robust_acc,
            purity: metrics.purity,
            lr,
        }
    }
}

struct EpochMetrics {
    clean_acc: f64,
    robust_acc: f64,
    purity: f64,
}

/// Held-out split if there is one, else the training split.
fn eval_set<'a>(train: &'a Dataset, val: Option<&'a Dataset>) -> &'a Dataset {
    val.unwrap_or(train)
}

fn end_of_epoch(
    model: &MlpModel,
    train: &Dataset,
    val: Option<&Dataset>,
    purity_features: &Tensor,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    let robust = evaluate_robust_accuracy(
        model,
        eval_set(train, val),
        AttackKind::Pgd,
        &eval_attack(cfg, epoch),
    )?;
    Ok(EpochMetrics {
        clean_acc: robust.clean_accuracy,
        robust_acc: robust.robust_accuracy,
        purity: neighbor_purity(purity_features, train.labels(), cfg.m)?,
    })
}

/// Standard training: CE plus `lambda` times the structure term against a
/// neighbor table built once from `extractor` features of the training split.
///
/// The structure term is evaluated on every batch even when it carries no
/// weight, so vanilla runs still log how much structure they destroy.
pub fn train_standard(
    model: MlpModel,
    extractor: &Extractor,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    check_model(&model, data)?;
    let (train, val) = split_for_run(data, cfg)?;
    let index = NeighborIndex::build(extractor, train.features())?;
    let table_for = |epoch: usize| match cfg.structure {
        StructureMode::Global => StructureTable::global(
            &index,
            cfg.m,
            derive_seed(cfg.seed, stream::GLOBAL, epoch as u64),
        ),
        _ => StructureTable::local(&index, cfg.m),
    };
    let mut table = table_for(0)?;
    let mut model = model;
    let mut opt = Sgd::new(&model, cfg.momentum);
    let mut log = TrainLog::default();
    let mut best = None;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        if cfg.structure == StructureMode::Global && epoch > 0 {
            table = table_for(epoch)?;
        }
        let lr = cfg.lr.at(epoch);
        let mut losses = EpochLosses::default();
        for ids in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            let labels: Vec<usize> = ids.iter().map(|&i| train.labels()[i]).collect();
            let batch = StandardBatch::assemble(train.features(), &ids, &table)?;
            let tape = Tape::new();
            let bound = model.bind(&tape, true)?;
            let (loss, ce, lsp) = if cfg.uses_structure() {
                let logits = bound.forward(tape.constant(batch.inputs().clone())?)?;
                let ce = match cfg.mixup_alpha {
                    Some(alpha) => mixup_loss(&bound, &tape, &train, &ids, alpha, cfg.seed, step)?,
                    None => cross_entropy(batch.anchor_logits(logits)?, &labels)?,
                };
                let term = batch.lsp(logits, cfg.lsp_kind)?;
                log.skipped_anchors += term.skipped;
                (ce.add(term.loss.scale(cfg.lambda))?, ce.item(), term.loss.item())
            } else {
                let ce = match cfg.mixup_alpha {
                    Some(alpha) => mixup_loss(&bound, &tape, &train, &ids, alpha, cfg.seed, step)?,
                    None => {
                        let x = tape.constant(train.features().select_rows(&ids)?)?;
                        cross_entropy(bound.forward(x)?, &labels)?
                    }
                };
                (ce, ce.item(), monitor_standard(&model, &batch, cfg.lsp_kind)?)
            };
            losses.add(ce, lsp, ce + cfg.lambda * lsp);
            let grads = bound.grads(&tape.backward(loss)?);
            opt.step(&mut model, &grads, lr)?;
            step += 1;
        }
        let reps = normalize_rows(&model.logits(train.features())?);
        let metrics = end_of_epoch(&model, &train, val.as_ref(), &reps, cfg, epoch)?;
        let record = losses.record(epoch, lr, metrics);
        track_best(&mut best, &record, &model);
        log.records.push(record);
    }
    finish(model, log, best, cfg, None)
}

/// Structure-term value for a batch, outside the gradient path.
fn monitor_standard(model: &MlpModel, batch: &StandardBatch, kind: Discrepancy) -> Result<f64> {
    let tape = Tape::new();
    let logits = tape.constant(model.logits(batch.inputs())?)?;
    Ok(batch.lsp(logits, kind)?.loss.item())
}

fn mixup_loss<'t>(
    bound: &crate::model::BoundMlp<'t>,
    tape: &'t Tape,
    train: &Dataset,
    ids: &[usize],
    alpha: f64,
    seed: u64,
    step: u64,
) -> Result<Var<'t>> {
    let stream_seed = derive_seed(seed, stream::MIXUP, step);
    let mut partners = ids.to_vec();
    partners.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed));
    let weight = mixup_weight(alpha, stream_seed.wrapping_add(1))?;
    let labels = |s: &[usize]| s.iter().map(|&i| train.labels()[i]).collect::<Vec<_>>();
    let (x, soft) = mixup_batch(
        &train.features().select_rows(ids)?,
        &labels(ids),
        &train.features().select_rows(&partners)?,
        &labels(&partners),
        train.num_classes(),
        weight,
    )?;
    soft_cross_entropy(bound.forward(tape.constant(x)?)?, &soft)
}

/// Keeps the earliest epoch with the highest validation robust accuracy.
fn track_best(best: &mut Option<(f64, usize, MlpModel)>, record: &EpochRecord, model: &MlpModel) {
    if best.as_ref().is_none_or(|(acc, _, _)| record.robust_acc > *acc) {
        *best = Some((record.robust_acc, record.epoch, model.clone()));
    }
}

fn finish(
    model: MlpModel,
    mut log: TrainLog,
    best: Option<(f64, usize, MlpModel)>,
    cfg: &TrainConfig,
    banks: Option<(MemoryBank, MemoryBank)>,
) -> Result<Trained> {
    let model = match (cfg.early_stopping, best) {
        (true, Some((_, epoch, best_model))) => {
            log.best_epoch = Some(epoch);
            best_model
        }
        _ => model,
    };
    Ok(Trained { model, log, banks })
}

/// Adversarial training: CE on PGD examples plus `lambda` times the structure
/// term measured against natural and adversarial memory banks.
///
/// Per batch: attack the current model, record the natural representations,
/// take one SGD step, then write both representations (computed before the
/// step) into the banks.
pub fn train_adversarial(model: MlpModel, data: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    check_model(&model, data)?;
    let (train, val) = split_for_run(data, cfg)?;
    let n = train.len();
    if cfg.m >= n {
        return Err(config_err!("m = {} needs more than {} training samples", cfg.m, n));
    }
    let classes = model.output_dim();
    let mut nat_bank = MemoryBank::new(
        n,
        classes,
        cfg.bank_momentum,
        derive_seed(cfg.seed, stream::NAT_BANK, 0),
    )?;
    let mut adv_bank = MemoryBank::new(
        n,
        classes,
        cfg.bank_momentum,
        derive_seed(cfg.seed, stream::ADV_BANK, 0),
    )?;
    let mut model = model;
    let mut opt = Sgd::new(&model, cfg.momentum);
    let mut log = TrainLog::default();
    let mut best = None;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch);
        let mut losses = EpochLosses::default();
        for ids in epoch_batches(n, cfg.batch_size, cfg.seed, epoch) {
            let labels: Vec<usize> = ids.iter().map(|&i| train.labels()[i]).collect();
            let x = train.features().select_rows(&ids)?;
            let x_adv = pgd(&model, &x, &labels, &batch_attack(cfg, step))?;
            let nat_reps = model.logits(&x)?;
            let neighbors = batch_neighbors(&nat_reps, &ids, &nat_bank, cfg, step)?;

            let tape = Tape::new();
            let bound = model.bind(&tape, true)?;
            let adv_logits = bound.forward(tape.constant(x_adv)?)?;
            let ce = cross_entropy(adv_logits, &labels)?;
            let (loss, lsp) = if cfg.uses_structure() {
                let term = lsp_loss_adversarial(
                    adv_logits, &nat_reps, &ids, &neighbors, &nat_bank, &adv_bank, cfg.lsp_kind,
                )?;
                log.skipped_anchors += term.skipped;
                (ce.add(term.loss.scale(cfg.lambda))?, term.loss.item())
            } else {
                let detached = tape.constant(adv_logits.value())?;
                let term = lsp_loss_adversarial(
                    detached, &nat_reps, &ids, &neighbors, &nat_bank, &adv_bank, cfg.lsp_kind,
                )?;
                (ce, term.loss.item())
            };
            losses.add(ce.item(), lsp, ce.item() + cfg.lambda * lsp);
            let grads = bound.grads(&tape.backward(loss)?);
            let adv_reps = adv_logits.value();
            opt.step(&mut model, &grads, lr)?;
            nat_bank.update(&ids, &nat_reps)?;
            adv_bank.update(&ids, &adv_reps)?;
            step += 1;
        }
        let metrics = end_of_epoch(&model, &train, val.as_ref(), nat_bank.vectors(), cfg, epoch)?;
        let record = losses.record(epoch, lr, metrics);
        track_best(&mut best, &record, &model);
        log.records.push(record);
    }
    finish(model, log, best, cfg, Some((nat_bank, adv_bank)))
}

fn batch_neighbors(
    nat_reps: &Tensor,
    ids: &[usize],
    nat_bank: &MemoryBank,
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<Vec<usize>>> {
    match cfg.structure {
        StructureMode::Global => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::GLOBAL, step));
            Ok(ids
                .iter()
                .map(|&a| random_others(&mut rng, nat_bank.len(), a, cfg.m))
                .collect())
        }
        _ => mine_bank_neighbors(nat_reps, ids, nat_bank, cfg.m),
    }
}

/// Dispatches on `cfg.adversarial`.
pub fn train(model: MlpModel, extractor: &Extractor, data: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    if cfg.adversarial {
        train_adversarial(model, data, cfg)
    } else {
        train_standard(model, extractor, data, cfg)
    }
}

/// `-ln softmax(v bank^T / tau)[id]` averaged over the batch; `v` rows are
/// expected to be unit norm.
pub fn instance_discrimination_loss<'t>(v: Var<'t>, bank: &Tensor, ids: &[usize], tau: f64) -> Result<Var<'t>> {
    let shape = v.shape();
    if shape.len() != 2 || shape[1] != bank.cols() {
        return Err(shape_err!("embeddings {:?} against bank {:?}", shape, bank.shape()));
    }
    let (n, k) = (bank.rows(), bank.cols());
    let bank_t = Tensor::matrix(k, n, crate::numerics::transpose_raw(bank.data(), n, k))?;
    let sims = v.matmul(v.tape().constant(bank_t)?)?.scale(1.0 / tau);
    cross_entropy(sims, ids)
}

/// Loss and feature purity per pretext epoch; index 0 is before training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretextLog {
    pub loss: Vec<f64>,
    pub purity: Vec<f64>,
}

/// Trains an encoder by instance discrimination against a unit-norm memory
/// bank. Labels are used only to report feature purity.
pub fn train_pretext(encoder: MlpModel, data: &Dataset, cfg: &TrainConfig) -> Result<(MlpModel, PretextLog)> {
    cfg.validate()?;
    if encoder.input_dim() != data.dim() {
        return Err(config_err!(
            "encoder expects {} features, data has {}",
            encoder.input_dim(),
            data.dim()
        ));
    }
    let n = data.len();
    let x = data.features();
    let mut bank = MemoryBank::from_rows(
        normalize_rows(&encoder.logits(x)?),
        cfg.bank_momentum,
    )
    .or_else(|_| {
        MemoryBank::new(
            n,
            encoder.output_dim(),
            cfg.bank_momentum,
            derive_seed(cfg.seed, stream::PRETEXT_BANK, 0),
        )
    })?;
    let mut encoder = encoder;
    let mut opt = Sgd::new(&encoder, cfg.momentum);
    let mut log = PretextLog::default();
    let measure = |enc: &MlpModel, bank: &MemoryBank| -> Result<(f64, f64)> {
        let tape = Tape::new();
        let v = enc.bind(&tape, false)?.forward(tape.constant(x.clone())?)?.normalize_rows(1e-12)?;
        let all: Vec<usize> = (0..n).collect();
        let loss = instance_discrimination_loss(v, bank.vectors(), &all, cfg.tau)?.item();
        let purity = neighbor_purity(&normalize_rows(&enc.logits(x)?), data.labels(), cfg.m.min(n - 1))?;
        Ok((loss, purity))
    };
    let (l0, p0) = measure(&encoder, &bank)?;
    log.loss.push(l0);
    log.purity.push(p0);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch);
        for ids in epoch_batches(n, cfg.batch_size, cfg.seed, epoch) {
            let tape = Tape::new();
            let bound = encoder.bind(&tape, true)?;
            let v = bound
                .forward(tape.constant(x.select_rows(&ids)?)?)?
                .normalize_rows(1e-12)?;
            let loss = instance_discrimination_loss(v, bank.vectors(), &ids, cfg.tau)?;
            let grads = bound.grads(&tape.backward(loss)?);
            let reps = v.value();
            opt.step(&mut encoder, &grads, lr)?;
            if reps.iter_rows().all(|r| r.iter().any(|&c| c != 0.0)) {
                bank.update(&ids, &reps)?;
            }
        }
        let (l, p) = measure(&encoder, &bank)?;
        log.loss.push(l);
        log.purity.push(p);
    }
    Ok((encoder, log))
}
