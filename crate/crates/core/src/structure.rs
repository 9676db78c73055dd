//! Local proximity structure: neighbor search, structure vectors, the
//! discrepancy losses that compare them, and the representation memory banks
//! used during adversarial training.
//!
//! For an anchor `x` with neighbors `n_1..n_m`, a structure vector is the
//! anchor-to-neighbor distance list normalized to sum to one:
//!
//! ```text
//! p_i = d(x, n_i) / sum_j d(x, n_j)
//! ```
//!
//! `P` measures distances with an input-space metric (raw inputs or a
//! pretrained extractor `g`), `Q` with the classifier's logits. The
//! regularizer penalizes `D(P, Q)` with `P` held constant.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Reader, Writer};
use crate::error::{config_err, numeric_err, shape_err, Error, Result};
use crate::model::{BoundMlp, MlpModel};
use crate::numerics::{euclidean, l2_norm, Tape, Tensor, Var};

/// Denominator floor for KL terms and for normalizing near-zero vectors.
pub const KL_FLOOR: f64 = 1e-12;

const BANK_MAGIC: &[u8; 4] = b"LSPB";

/// Maps inputs to the space whose Euclidean metric stands in for the input metric.
#[derive(Clone, Debug, PartialEq)]
pub enum Extractor {
    /// Raw input coordinates.
    Identity,
    /// A pretrained encoder; its outputs are L2-normalized, matching the
    /// unit-sphere geometry it was trained on.
    Encoder(MlpModel),
}

impl Extractor {
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Extractor::Identity => {
                if x.ndim() != 2 {
                    return Err(shape_err!("expected [N, d] inputs, got {:?}", x.shape()));
                }
                Ok(x.clone())
            }
            Extractor::Encoder(model) => Ok(normalize_rows(&model.logits(x)?)),
        }
    }
}

/// `||g(x_i) - g(x_j)||` for the chosen extractor.
pub fn input_metric(extractor: &Extractor, x_i: &[f64], x_j: &[f64]) -> Result<f64> {
    if x_i.len() != x_j.len() {
        return Err(shape_err!(
            "metric between points of length {} and {}",
            x_i.len(),
            x_j.len()
        ));
    }
    let pair = Tensor::from_rows(&[x_i, x_j])?;
    let f = extractor.features(&pair)?;
    Ok(euclidean(f.row(0), f.row(1)))
}

/// Rows scaled to unit norm; rows below the floor are left as they are.
pub fn normalize_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(c) {
        let n = l2_norm(row);
        if n > KL_FLOOR {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Tensor::new(t.shape().to_vec(), data).expect("shape unchanged")
}

/// The `m` nearest rows of `rows` to `point`, skipping `exclude`.
/// Ordered by ascending distance, ties by ascending id.
fn nearest<'a>(
    rows: impl Iterator<Item = &'a [f64]>,
    point: &[f64],
    exclude: Option<usize>,
    m: usize,
) -> Vec<(usize, f64)> {
    let mut cands: Vec<(usize, f64)> = rows
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, r)| (i, euclidean(r, point)))
        .collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    if m < cands.len() {
        cands.select_nth_unstable_by(m, cmp);
        cands.truncate(m);
    }
    cands.sort_unstable_by(cmp);
    cands
}

/// Exhaustive Euclidean nearest-neighbor search over a fixed feature matrix.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    features: Tensor,
}

impl NeighborIndex {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.ndim() != 2 {
            return Err(shape_err!("index needs [N, k] features, got {:?}", features.shape()));
        }
        features.ensure_finite("index features")?;
        Ok(NeighborIndex { features })
    }

    /// Index over `extractor(x)`.
    pub fn build(extractor: &Extractor, x: &Tensor) -> Result<Self> {
        NeighborIndex::new(extractor.features(x)?)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// The `m` nearest other samples to `anchor`.
    pub fn query(&self, anchor: usize, m: usize) -> Result<Vec<usize>> {
        let n = self.len();
        if anchor >= n {
            return Err(config_err!("anchor {} out of range for {} samples", anchor, n));
        }
        if m >= n {
            return Err(config_err!("m = {} needs more than {} samples", m, n));
        }
        if m == 0 {
            return Err(config_err!("m must be positive"));
        }
        Ok(nearest(self.features.iter_rows(), self.features.row(anchor), Some(anchor), m)
            .into_iter()
            .map(|(i, _)| i)
            .collect())
    }

    pub fn distances(&self, anchor: usize, ids: &[usize]) -> Vec<f64> {
        let a = self.features.row(anchor);
        ids.iter().map(|&i| euclidean(a, self.features.row(i))).collect()
    }
}

/// Normalizes non-negative distances onto the simplex.
pub fn structure_vector(distances: &[f64]) -> Result<Vec<f64>> {
    if distances.len() < 2 {
        return Err(config_err!(
            "a structure vector needs at least 2 neighbors, got {}",
            distances.len()
        ));
    }
    if let Some(bad) = distances.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(numeric_err!("invalid neighbor distance {}", bad));
    }
    let total: f64 = distances.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateNeighborhood(
            "every neighbor coincides with the anchor".into(),
        ));
    }
    Ok(distances.iter().map(|d| d / total).collect())
}

/// Normalized anchor-to-neighbor distances for one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureVector {
    pub values: Vec<f64>,
    pub anchor_id: usize,
    pub neighbor_ids: Vec<usize>,
}

impl StructureVector {
    pub fn new(anchor_id: usize, neighbor_ids: Vec<usize>, distances: &[f64]) -> Result<Self> {
        if neighbor_ids.len() != distances.len() {
            return Err(shape_err!(
                "{} neighbors but {} distances",
                neighbor_ids.len(),
                distances.len()
            ));
        }
        Ok(StructureVector {
            values: structure_vector(distances)?,
            anchor_id,
            neighbor_ids,
        })
    }
}

/// How two structure vectors are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discrepancy {
    /// `sum p ln(p / q)`
    Kl,
    /// `1 - cos(P, Q)`
    Cosine,
    /// `mean |p - q|`
    L1,
    /// `mean (p - q)^2`
    L2,
}

impl Discrepancy {
    pub const ALL: [Discrepancy; 4] = [
        Discrepancy::Kl,
        Discrepancy::Cosine,
        Discrepancy::L1,
        Discrepancy::L2,
    ];
}

impl fmt::Display for Discrepancy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Discrepancy::Kl => "kl",
            Discrepancy::Cosine => "cosine",
            Discrepancy::L1 => "l1",
            Discrepancy::L2 => "l2",
        })
    }
}

impl FromStr for Discrepancy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(Discrepancy::Kl),
            "cosine" => Ok(Discrepancy::Cosine),
            "l1" => Ok(Discrepancy::L1),
            "l2" | "mse" => Ok(Discrepancy::L2),
            other => Err(config_err!("unknown discrepancy {:?}", other)),
        }
    }
}

/// Row-wise discrepancy between constant `p` and live `q`, both `[B, m]`.
/// Returns a `[B]` vector.
pub fn discrepancy_rows<'t>(p: &Tensor, q: Var<'t>, kind: Discrepancy) -> Result<Var<'t>> {
    if p.shape() != q.shape().as_slice() || p.ndim() != 2 {
        return Err(shape_err!(
            "structure matrices differ: {:?} vs {:?}",
            p.shape(),
            q.shape()
        ));
    }
    let tape = q.tape();
    let m = p.cols();
    let pv = tape.constant(p.clone())?;
    match kind {
        Discrepancy::Kl => {
            // sum p ln p is constant; zero entries of p contribute nothing.
            let entropy_term: Vec<f64> = p
                .iter_rows()
                .map(|r| r.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum())
                .collect();
            let neg_entropy = tape.constant(Tensor::vector(entropy_term)?)?;
            let cross = pv.mul(q.clamp(KL_FLOOR, f64::MAX).ln()?)?.sum_rows();
            neg_entropy.sub(cross)
        }
        Discrepancy::Cosine => {
            let p_norms: Vec<f64> = p.iter_rows().map(l2_norm).collect();
            let p_norms = tape.constant(Tensor::vector(p_norms)?)?;
            let dot = pv.mul(q)?.sum_rows();
            let denom = p_norms.mul(q.norm_rows().clamp(KL_FLOOR, f64::MAX))?;
            Ok(dot.div(denom)?.neg().offset(1.0))
        }
        Discrepancy::L1 => Ok(pv.sub(q)?.abs().sum_rows().scale(1.0 / m as f64)),
        Discrepancy::L2 => Ok(pv.sub(q)?.square().sum_rows().scale(1.0 / m as f64)),
    }
}

/// Scalar discrepancy between two structure vectors.
pub fn lsp_discrepancy(p: &[f64], q: &[f64], kind: Discrepancy) -> Result<f64> {
    if p.len() != q.len() {
        return Err(shape_err!("structure vectors of length {} and {}", p.len(), q.len()));
    }
    let tape = Tape::new();
    let pm = Tensor::matrix(1, p.len(), p.to_vec())?;
    let qv = tape.constant(Tensor::matrix(1, q.len(), q.to_vec())?)?;
    Ok(discrepancy_rows(&pm, qv, kind)?.item())
}

/// `[B, m]` distances to row-normalized structure vectors.
pub fn structure_rows<'t>(distances: Var<'t>) -> Result<Var<'t>> {
    let m = *distances
        .shape()
        .last()
        .ok_or_else(|| shape_err!("distances must be a matrix"))?;
    let totals = distances.sum_rows().clamp(KL_FLOOR, f64::MAX);
    distances.div(totals.broadcast_cols(m)?)
}

/// One anchor's neighbor list with its input-space structure vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    pub neighbors: Vec<usize>,
    pub p: Vec<f64>,
}

/// Precomputed neighborhoods for every training sample.
#[derive(Clone, Debug)]
pub struct StructureTable {
    m: usize,
    entries: Vec<Option<Neighborhood>>,
}

impl StructureTable {
    /// Nearest neighbors under the index metric.
    pub fn local(index: &NeighborIndex, m: usize) -> Result<Self> {
        check_m(m, index.len())?;
        let entries = (0..index.len())
            .map(|a| {
                let ids = index.query(a, m)?;
                let d = index.distances(a, &ids);
                Ok(neighborhood(ids, &d))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StructureTable { m, entries })
    }

    /// `m` uniformly drawn non-anchor samples per anchor, for the global
    /// structure ablation.
    pub fn global(index: &NeighborIndex, m: usize, seed: u64) -> Result<Self> {
        let n = index.len();
        check_m(m, n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..n)
            .map(|a| {
                let ids = random_others(&mut rng, n, a, m);
                neighborhood(ids.clone(), &index.distances(a, &ids))
            })
            .collect();
        Ok(StructureTable { m, entries })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `None` when the anchor's neighborhood is degenerate.
    pub fn get(&self, anchor: usize) -> Option<&Neighborhood> {
        self.entries.get(anchor).and_then(Option::as_ref)
    }

    pub fn degenerate_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_none()).count()
    }

    pub fn structure_vector(&self, anchor: usize) -> Option<StructureVector> {
        self.get(anchor).map(|nb| StructureVector {
            values: nb.p.clone(),
            anchor_id: anchor,
            neighbor_ids: nb.neighbors.clone(),
        })
    }
}

fn check_m(m: usize, n: usize) -> Result<()> {
    if m < 2 {
        return Err(config_err!("m must be at least 2, got {}", m));
    }
    if m >= n {
        return Err(config_err!("m = {} needs more than {} samples", m, n));
    }
    Ok(())
}

fn neighborhood(neighbors: Vec<usize>, distances: &[f64]) -> Option<Neighborhood> {
    structure_vector(distances)
        .ok()
        .map(|p| Neighborhood { neighbors, p })
}

/// `m` distinct ids from `0..n` other than `anchor`.
pub(crate) fn random_others<R: Rng>(rng: &mut R, n: usize, anchor: usize, m: usize) -> Vec<usize> {
    sample(rng, n - 1, m)
        .into_iter()
        .map(|i| if i >= anchor { i + 1 } else { i })
        .collect()
}

/// The LSP term for one batch, with bookkeeping about skipped anchors.
#[derive(Debug)]
pub struct LspTerm<'t> {
    pub loss: Var<'t>,
    pub anchors_used: usize,
    pub skipped: usize,
}

/// Anchors plus their neighbors stacked into one input matrix, so a single
/// forward pass yields every logit row the structure term needs.
///
/// Rows `0..anchor_count()` are the anchors in batch order; neighbor rows follow.
#[derive(Clone, Debug)]
pub struct StandardBatch {
    inputs: Tensor,
    anchor_count: usize,
    anchor_rows: Vec<usize>,
    neighbor_rows: Vec<usize>,
    p: Option<Tensor>,
    used: usize,
    skipped: usize,
}

impl StandardBatch {
    pub fn assemble(train_x: &Tensor, anchors: &[usize], table: &StructureTable) -> Result<Self> {
        if anchors.is_empty() {
            return Err(config_err!("empty batch"));
        }
        let m = table.m();
        let mut row_ids: Vec<usize> = anchors.to_vec();
        let mut anchor_rows = Vec::new();
        let mut neighbor_rows = Vec::new();
        let mut p = Vec::new();
        let mut skipped = 0;
        for (b, &a) in anchors.iter().enumerate() {
            let Some(nb) = table.get(a) else {
                skipped += 1;
                continue;
            };
            for &n in &nb.neighbors {
                neighbor_rows.push(row_ids.len());
                row_ids.push(n);
                anchor_rows.push(b);
            }
            p.extend_from_slice(&nb.p);
        }
        let used = anchors.len() - skipped;
        Ok(StandardBatch {
            inputs: train_x.select_rows(&row_ids)?,
            anchor_count: anchors.len(),
            anchor_rows,
            neighbor_rows,
            p: if used > 0 {
                Some(Tensor::matrix(used, m, p)?)
            } else {
                None
            },
            used,
            skipped,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn anchor_count(&self) -> usize {
        self.anchor_count
    }

    /// Logit rows of the anchors alone.
    pub fn anchor_logits<'t>(&self, logits: Var<'t>) -> Result<Var<'t>> {
        logits.gather_rows(&(0..self.anchor_count).collect::<Vec<_>>())
    }

    /// Mean discrepancy over non-degenerate anchors, given the logits of
    /// [`StandardBatch::inputs`].
    pub fn lsp<'t>(&self, logits: Var<'t>, kind: Discrepancy) -> Result<LspTerm<'t>> {
        let tape = logits.tape();
        let Some(p) = &self.p else {
            return Ok(LspTerm {
                loss: tape.scalar(0.0)?,
                anchors_used: 0,
                skipped: self.skipped,
            });
        };
        let m = p.cols();
        let diffs = logits
            .gather_rows(&self.neighbor_rows)?
            .sub(logits.gather_rows(&self.anchor_rows)?)?;
        let distances = diffs.norm_rows().reshape(vec![self.used, m])?;
        let q = structure_rows(distances)?;
        let loss = discrepancy_rows(p, q, kind)?.mean();
        Ok(LspTerm {
            loss,
            anchors_used: self.used,
            skipped: self.skipped,
        })
    }
}

/// LSP term for standard training: `P` from the precomputed table, `Q` from
/// live logits of each anchor and its neighbors.
pub fn lsp_loss_standard<'t>(
    model: &BoundMlp<'t>,
    tape: &'t Tape,
    train_x: &Tensor,
    anchors: &[usize],
    table: &StructureTable,
    kind: Discrepancy,
) -> Result<LspTerm<'t>> {
    let batch = StandardBatch::assemble(train_x, anchors, table)?;
    let logits = model.forward(tape.constant(batch.inputs().clone())?)?;
    batch.lsp(logits, kind)
}

/// Per-sample store of unit-norm representations, updated with momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    vectors: Tensor,
    momentum: f64,
}

impl MemoryBank {
    /// Gaussian random rows, normalized.
    pub fn new(n: usize, dim: usize, momentum: f64, seed: u64) -> Result<Self> {
        check_momentum(momentum)?;
        if n == 0 || dim == 0 {
            return Err(config_err!("bank needs positive size, got {}x{}", n, dim));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::randn(&[n, dim], 1.0, &mut rng);
        Ok(MemoryBank {
            vectors: normalize_rows(&raw),
            momentum,
        })
    }

    /// A bank holding the given rows (normalized).
    pub fn from_rows(vectors: Tensor, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        if vectors.ndim() != 2 {
            return Err(shape_err!("bank needs [N, k] rows, got {:?}", vectors.shape()));
        }
        vectors.ensure_finite("bank rows")?;
        if vectors.iter_rows().any(|r| l2_norm(r) <= KL_FLOOR) {
            return Err(numeric_err!("bank rows must be nonzero"));
        }
        Ok(MemoryBank {
            vectors: normalize_rows(&vectors),
            momentum,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    /// `v <- normalize((1 - mu) v + mu normalize(rep))` for each listed row.
    ///
    /// All reps are validated before any row changes. If the blend cancels to
    /// zero (antipodal rep with `mu = 0.5`), the row takes `normalize(rep)`.
    pub fn update(&mut self, ids: &[usize], reps: &Tensor) -> Result<()> {
        if reps.ndim() != 2 || reps.rows() != ids.len() || reps.cols() != self.dim() {
            return Err(shape_err!(
                "{} ids with reps {:?} for a bank of dim {}",
                ids.len(),
                reps.shape(),
                self.dim()
            ));
        }
        reps.ensure_finite("bank update")?;
        let n = self.len();
        for (&id, rep) in ids.iter().zip(reps.iter_rows()) {
            if id >= n {
                return Err(config_err!("bank id {} out of range for {} rows", id, n));
            }
            if l2_norm(rep) <= KL_FLOOR {
                return Err(numeric_err!("zero-norm representation for sample {}", id));
            }
        }
        let dim = self.dim();
        let mu = self.momentum;
        let data = self.vectors.data_mut();
        for (&id, rep) in ids.iter().zip(reps.iter_rows()) {
            let rep_norm = l2_norm(rep);
            let row = &mut data[id * dim..(id + 1) * dim];
            let mut blended: Vec<f64> = row
                .iter()
                .zip(rep)
                .map(|(v, r)| (1.0 - mu) * v + mu * (r / rep_norm))
                .collect();
            let norm = l2_norm(&blended);
            if norm > KL_FLOOR {
                blended.iter_mut().for_each(|v| *v /= norm);
            } else {
                blended = rep.iter().map(|r| r / rep_norm).collect();
            }
            row.copy_from_slice(&blended);
        }
        Ok(())
    }

    /// The `m` rows nearest to `point`, skipping `exclude`.
    pub fn nearest_to(&self, point: &[f64], exclude: Option<usize>, m: usize) -> Result<Vec<usize>> {
        let available = self.len() - usize::from(exclude.is_some_and(|e| e < self.len()));
        if m == 0 || m > available {
            return Err(config_err!("cannot take {} neighbors from {} rows", m, available));
        }
        if point.len() != self.dim() {
            return Err(shape_err!("query of length {} for bank dim {}", point.len(), self.dim()));
        }
        Ok(nearest(self.vectors.iter_rows(), point, exclude, m)
            .into_iter()
            .map(|(i, _)| i)
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(BANK_MAGIC);
        w.u64(self.len() as u64);
        w.u64(self.dim() as u64);
        w.f64s(&[self.momentum]);
        w.f64s(self.vectors.data());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, BANK_MAGIC, "memory bank")?;
        let n = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let momentum = r.f64s(1)?[0];
        let vectors = Tensor::matrix(n, dim, r.f64s(n * dim)?)
            .map_err(|e| Error::Format(format!("memory bank: {e}")))?;
        r.finish()?;
        check_momentum(momentum).map_err(|e| Error::Format(format!("memory bank: {e}")))?;
        Ok(MemoryBank { vectors, momentum })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        MemoryBank::from_bytes(&std::fs::read(path)?)
    }
}

fn check_momentum(mu: f64) -> Result<()> {
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(config_err!("bank momentum must lie in (0, 1], got {}", mu));
    }
    Ok(())
}

/// How neighbors are chosen for each anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureMode {
    /// Nearest neighbors.
    Local,
    /// Uniformly random non-anchor samples (ablation).
    Global,
    /// No structure term at all.
    Off,
}

impl fmt::Display for StructureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StructureMode::Local => "local",
            StructureMode::Global => "global",
            StructureMode::Off => "off",
        })
    }
}

impl FromStr for StructureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(StructureMode::Local),
            "global" => Ok(StructureMode::Global),
            "off" => Ok(StructureMode::Off),
            other => Err(config_err!("unknown structure mode {:?}", other)),
        }
    }
}

/// Neighbor lists for a batch of anchors, mined from the natural bank with
/// each anchor's current (normalized) natural representation as the query.
pub fn mine_bank_neighbors(
    nat_reps: &Tensor,
    ids: &[usize],
    nat_bank: &MemoryBank,
    m: usize,
) -> Result<Vec<Vec<usize>>> {
    check_m(m, nat_bank.len())?;
    let queries = normalize_rows(nat_reps);
    ids.iter()
        .enumerate()
        .map(|(b, &id)| nat_bank.nearest_to(queries.row(b), Some(id), m))
        .collect()
}

/// LSP term for adversarial training.
///
/// `P~` uses distances from each anchor's normalized natural representation
/// to its neighbors' natural-bank rows (constants). `Q~` uses distances from
/// the normalized live adversarial logits to the neighbors' adversarial-bank
/// rows; only the anchor side carries a gradient.
#[allow(clippy::too_many_arguments)]
pub fn lsp_loss_adversarial<'t>(
    adv_logits: Var<'t>,
    nat_reps: &Tensor,
    ids: &[usize],
    neighbors: &[Vec<usize>],
    nat_bank: &MemoryBank,
    adv_bank: &MemoryBank,
    kind: Discrepancy,
) -> Result<LspTerm<'t>> {
    let tape = adv_logits.tape();
    let shape = adv_logits.shape();
    let b = ids.len();
    if shape.len() != 2 || shape[0] != b || nat_reps.shape() != shape.as_slice() {
        return Err(shape_err!(
            "adversarial logits {:?}, natural reps {:?}, {} ids",
            shape,
            nat_reps.shape(),
            b
        ));
    }
    if neighbors.len() != b {
        return Err(shape_err!("{} neighbor lists for {} anchors", neighbors.len(), b));
    }
    if nat_bank.dim() != shape[1] || adv_bank.dim() != shape[1] || nat_bank.len() != adv_bank.len() {
        return Err(shape_err!("bank shapes do not match the representation size"));
    }
    let m = neighbors.first().map_or(0, Vec::len);
    if m < 2 || neighbors.iter().any(|n| n.len() != m) {
        return Err(config_err!("every anchor needs the same m >= 2 neighbors"));
    }

    let nat = normalize_rows(nat_reps);
    let mut used_rows = Vec::new();
    let mut adv_neighbor_rows = Vec::new();
    let mut p = Vec::new();
    let mut skipped = 0;
    for (row, nbrs) in neighbors.iter().enumerate() {
        let d: Vec<f64> = nbrs
            .iter()
            .map(|&n| euclidean(nat.row(row), nat_bank.row(n)))
            .collect();
        match structure_vector(&d) {
            Ok(pv) => {
                p.extend(pv);
                for &n in nbrs {
                    used_rows.push(row);
                    adv_neighbor_rows.extend_from_slice(adv_bank.row(n));
                }
            }
            Err(Error::DegenerateNeighborhood(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let used = b - skipped;
    if used == 0 {
        return Ok(LspTerm {
            loss: tape.scalar(0.0)?,
            anchors_used: 0,
            skipped,
        });
    }
    let dim = shape[1];
    let live = adv_logits.normalize_rows(KL_FLOOR)?.gather_rows(&used_rows)?;
    let bank_rows = tape.constant(Tensor::matrix(used * m, dim, adv_neighbor_rows)?)?;
    let distances = live.sub(bank_rows)?.norm_rows().reshape(vec![used, m])?;
    let q = structure_rows(distances)?;
    let p = Tensor::matrix(used, m, p)?;
    let loss = discrepancy_rows(&p, q, kind)?.mean();
    Ok(LspTerm {
        loss,
        anchors_used: used,
        skipped,
    })
}

/// Mean fraction of each sample's `m` nearest neighbors (in `features`)
/// sharing its label.
pub fn neighbor_purity(features: &Tensor, labels: &[usize], m: usize) -> Result<f64> {
    let index = NeighborIndex::new(features.clone())?;
    if labels.len() != index.len() {
        return Err(shape_err!("{} labels for {} samples", labels.len(), index.len()));
    }
    let mut total = 0.0;
    for a in 0..index.len() {
        let same = index
            .query(a, m)?
            .into_iter()
            .filter(|&n| labels[n] == labels[a])
            .count();
        total += same as f64 / m as f64;
    }
    Ok(total / index.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;
    use crate::numerics::gradcheck::{central_diff, max_rel_error};
    use proptest::prelude::*;
    use rand::Rng;

    fn points(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn random_matrix(n: usize, k: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[n, k], 1.0, &mut rng)
    }

    fn random_simplex<R: Rng>(rng: &mut R, m: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    /// Full sort of every candidate, the slow way.
    fn brute_force_knn(features: &Tensor, anchor: usize, m: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = (0..features.rows())
            .filter(|&i| i != anchor)
            .map(|i| {
                let d: f64 = features
                    .row(i)
                    .iter()
                    .zip(features.row(anchor))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                (d, i)
            })
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(m).map(|(_, i)| i).collect()
    }

    #[test]
    fn input_metric_examples() {
        let e = Extractor::Identity;
        assert_eq!(input_metric(&e, &[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(input_metric(&e, &[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(matches!(input_metric(&e, &[0.0], &[1.0, 2.0]), Err(Error::Shape(_))));

        let g = Extractor::Encoder(MlpModel::init(&[3, 8, 4], 2).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a: Vec<f64> = (0..3).map(|_| rng.random()).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.random()).collect();
            assert_eq!(input_metric(&g, &a, &b).unwrap(), input_metric(&g, &b, &a).unwrap());
            assert_eq!(input_metric(&e, &a, &b).unwrap(), input_metric(&e, &b, &a).unwrap());
        }
    }

    #[test]
    fn knn_examples() {
        let index = NeighborIndex::new(points(&[&[0.0], &[1.0], &[2.0], &[10.0]])).unwrap();
        assert_eq!(index.query(0, 2).unwrap(), vec![1, 2]);
        assert_eq!(index.query(0, 3).unwrap(), vec![1, 2, 3]);
        assert!(matches!(index.query(0, 4), Err(Error::Config(_))));
        assert!(matches!(index.query(9, 1), Err(Error::Config(_))));
    }

    #[test]
    fn knn_ties_break_by_id() {
        let index =
            NeighborIndex::new(points(&[&[0.0], &[1.0], &[-1.0], &[1.0], &[-1.0]])).unwrap();
        assert_eq!(index.query(0, 3).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn knn_matches_brute_force_on_random_matrix() {
        let f = random_matrix(50, 8, 17);
        let index = NeighborIndex::new(f.clone()).unwrap();
        for anchor in 0..50 {
            assert_eq!(index.query(anchor, 8).unwrap(), brute_force_knn(&f, anchor, 8));
        }
    }

    #[test]
    fn structure_vector_examples() {
        assert_eq!(structure_vector(&[1., 1., 1., 1.]).unwrap(), vec![0.25; 4]);
        assert_eq!(structure_vector(&[1., 3.]).unwrap(), vec![0.25, 0.75]);
        assert!(matches!(
            structure_vector(&[0., 0.]),
            Err(Error::DegenerateNeighborhood(_))
        ));
        assert!(matches!(structure_vector(&[1.]), Err(Error::Config(_))));
    }

    #[test]
    fn discrepancy_examples() {
        let p = [0.25, 0.75];
        for kind in Discrepancy::ALL {
            assert!(lsp_discrepancy(&p, &p, kind).unwrap().abs() < 1e-15, "{kind}");
        }
        let l2 = lsp_discrepancy(&[0.25, 0.75], &[0.5, 0.5], Discrepancy::L2).unwrap();
        assert!((l2 - 0.0625).abs() < 1e-15);
        let kl = lsp_discrepancy(&[0.5, 0.5], &[0.25, 0.75], Discrepancy::Kl).unwrap();
        assert!((kl - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((kl - 0.143841).abs() < 1e-6);
        let l1 = lsp_discrepancy(&[0.25, 0.75], &[0.5, 0.5], Discrepancy::L1).unwrap();
        assert!((l1 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn kl_clamps_zero_q() {
        let v = lsp_discrepancy(&[0.5, 0.5], &[0.0, 1.0], Discrepancy::Kl).unwrap();
        let expected = 0.5 * (0.5 / KL_FLOOR).ln() + 0.5 * 0.5f64.ln();
        assert!((v - expected).abs() < 1e-9);
    }

    #[test]
    fn discrepancy_parse_round_trip() {
        for kind in Discrepancy::ALL {
            assert_eq!(kind.to_string().parse::<Discrepancy>().unwrap(), kind);
        }
        assert!("hinge".parse::<Discrepancy>().is_err());
    }

    #[test]
    fn discrepancy_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for kind in Discrepancy::ALL {
            for _ in 0..20 {
                let m = rng.random_range(2..9);
                let p: Vec<f64> = random_simplex(&mut rng, m);
                let q = Tensor::matrix(1, m, random_simplex(&mut rng, m)).unwrap();
                let pm = Tensor::matrix(1, m, p.clone()).unwrap();
                let tape = Tape::new();
                let qv = tape.var(q.clone()).unwrap();
                let g = tape
                    .backward(discrepancy_rows(&pm, qv, kind).unwrap().sum())
                    .unwrap()
                    .wrt(qv);
                let fd = central_diff(|qq| lsp_discrepancy(&p, qq.data(), kind).unwrap(), &q);
                assert!(max_rel_error(&g, &fd) < 1e-4, "{kind}");
            }
        }
    }

    fn identity_model() -> MlpModel {
        let w = Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap();
        MlpModel::from_layers(vec![Layer::new(w, Tensor::zeros(&[2])).unwrap()]).unwrap()
    }

    fn standard_value(
        model: &MlpModel,
        x: &Tensor,
        anchors: &[usize],
        table: &StructureTable,
        kind: Discrepancy,
    ) -> f64 {
        let tape = Tape::new();
        let bound = model.bind(&tape, false).unwrap();
        lsp_loss_standard(&bound, &tape, x, anchors, table, kind)
            .unwrap()
            .loss
            .item()
    }

    #[test]
    fn identity_classifier_preserves_structure() {
        let x = random_matrix(30, 2, 4);
        let index = NeighborIndex::build(&Extractor::Identity, &x).unwrap();
        let table = StructureTable::local(&index, 5).unwrap();
        let anchors: Vec<usize> = (0..30).collect();
        for kind in Discrepancy::ALL {
            let v = standard_value(&identity_model(), &x, &anchors, &table, kind);
            assert!(v.abs() < 1e-12, "{kind}: {v}");
        }
    }

    #[test]
    fn standard_loss_matches_hand_composition() {
        // Anchor at the origin with neighbors at distance 1 and 2.
        let x = points(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0], &[5.0, 5.0]]);
        let index = NeighborIndex::build(&Extractor::Identity, &x).unwrap();
        let table = StructureTable::local(&index, 2).unwrap();
        assert_eq!(table.get(0).unwrap().neighbors, vec![1, 2]);
        let p = [1.0f64 / 3.0, 2.0 / 3.0];

        // Linear classifier: f(x) = x W, so f(n1) = W row 0, f(n2) = 2 W row 1.
        let w = Tensor::matrix(2, 2, vec![3.0, 4.0, 1.0, 0.0]).unwrap();
        let model =
            MlpModel::from_layers(vec![Layer::new(w, Tensor::zeros(&[2])).unwrap()]).unwrap();
        let (d1, d2) = (5.0f64, 2.0f64);
        let q = [d1 / (d1 + d2), d2 / (d1 + d2)];
        let expected = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)) / 2.0;
        let got = standard_value(&model, &x, &[0], &table, Discrepancy::L2);
        assert!((got - expected).abs() < 1e-15);
        let kl = standard_value(&model, &x, &[0], &table, Discrepancy::Kl);
        let expected_kl = p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
        assert!((kl - expected_kl).abs() < 1e-14);
    }

    #[test]
    fn standard_loss_parameter_gradients() {
        for seed in 0..20 {
            let x = random_matrix(24, 3, 500 + seed);
            let index = NeighborIndex::build(&Extractor::Identity, &x).unwrap();
            let table = StructureTable::local(&index, 4).unwrap();
            let kind = Discrepancy::ALL[seed as usize % 4];
            let model = MlpModel::init(&[3, 6, 3], seed).unwrap();
            let anchors = [0, 5, 7, 11, 23];

            let tape = Tape::new();
            let bound = model.bind(&tape, true).unwrap();
            let term = lsp_loss_standard(&bound, &tape, &x, &anchors, &table, kind).unwrap();
            let grads = tape.backward(term.loss).unwrap();
            for (pi, g) in bound.grads(&grads).iter().enumerate() {
                let fd = central_diff(
                    |pt| {
                        let mut probe = model.clone();
                        probe.set_param(pi, pt.clone()).unwrap();
                        standard_value(&probe, &x, &anchors, &table, kind)
                    },
                    model.params()[pi],
                );
                assert!(max_rel_error(g, &fd) < 1e-4, "seed {seed} param {pi} {kind}");
            }
        }
    }

    #[test]
    fn degenerate_anchors_are_skipped() {
        // Samples 0, 1, 2 coincide; with m = 2 sample 0's neighbors are 1 and 2.
        let x = points(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5], &[0.9, 0.1], &[0.1, 0.2]]);
        let index = NeighborIndex::build(&Extractor::Identity, &x).unwrap();
        let table = StructureTable::local(&index, 2).unwrap();
        assert_eq!(table.degenerate_count(), 3);
        let tape = Tape::new();
        let bound = MlpModel::init(&[2, 4, 2], 0).unwrap().bind(&tape, true).unwrap();
        let term = lsp_loss_standard(&bound, &tape, &x, &[0, 1, 3], &table, Discrepancy::L2)
            .unwrap();
        assert_eq!((term.anchors_used, term.skipped), (1, 2));
        let only_degenerate =
            lsp_loss_standard(&bound, &tape, &x, &[0, 2], &table, Discrepancy::L2).unwrap();
        assert_eq!(only_degenerate.loss.item(), 0.0);
    }

    #[test]
    fn global_table_draws_distinct_non_anchor_ids() {
        let x = random_matrix(20, 2, 1);
        let index = NeighborIndex::build(&Extractor::Identity, &x).unwrap();
        let table = StructureTable::global(&index, 6, 3).unwrap();
        for a in 0..20 {
            let nb = table.get(a).unwrap();
            let mut ids = nb.neighbors.clone();
            assert!(!ids.contains(&a));
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 6);
            assert!((nb.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let again = StructureTable::global(&index, 6, 3).unwrap();
        assert_eq!(table.get(7), again.get(7));
    }

    #[test]
    fn bank_update_examples() {
        let mut bank = MemoryBank::new(3, 2, 1.0, 0).unwrap();
        let rep = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let before = bank.row(0).to_vec();
        bank.update(&[1], &rep).unwrap();
        assert_eq!(bank.row(1), &[0.6, 0.8]);
        assert_eq!(bank.row(0), before.as_slice());

        let mut bank = MemoryBank::from_rows(points(&[&[1.0, 0.0], &[0.0, 1.0]]), 0.5).unwrap();
        let same = Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap();
        bank.update(&[0], &same).unwrap();
        assert_eq!(bank.row(0), &[1.0, 0.0]);

        bank.update(&[0], &Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap())
            .unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((bank.row(0)[0] - h).abs() < 1e-15 && (bank.row(0)[1] - h).abs() < 1e-15);

        let zero = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(bank.update(&[0], &zero), Err(Error::Numeric(_))));
        assert!(matches!(MemoryBank::new(2, 2, 0.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn bank_checkpoint_round_trip() {
        let bank = MemoryBank::new(7, 3, 0.5, 11).unwrap();
        assert_eq!(MemoryBank::from_bytes(&bank.to_bytes()).unwrap(), bank);
        assert!(matches!(
            MemoryBank::from_bytes(&MlpModel::init(&[2, 2], 0).unwrap().to_bytes()),
            Err(Error::Format(_))
        ));
    }

    #[allow(clippy::too_many_arguments)]
    fn adversarial_value(
        adv_x: &Tensor,
        model: &MlpModel,
        nat_reps: &Tensor,
        ids: &[usize],
        neighbors: &[Vec<usize>],
        nat: &MemoryBank,
        adv: &MemoryBank,
        kind: Discrepancy,
    ) -> f64 {
        let tape = Tape::new();
        let logits = model
            .bind(&tape, false)
            .unwrap()
            .forward(tape.constant(adv_x.clone()).unwrap())
            .unwrap();
        lsp_loss_adversarial(logits, nat_reps, ids, neighbors, nat, adv, kind)
            .unwrap()
            .loss
            .item()
    }

    #[test]
    fn adversarial_loss_vanishes_when_spaces_agree() {
        let model = MlpModel::init(&[2, 8, 3], 1).unwrap();
        let x = random_matrix(12, 2, 8);
        let reps = model.logits(&x).unwrap();
        let nat = MemoryBank::from_rows(reps.clone(), 0.5).unwrap();
        let adv = nat.clone();
        let ids: Vec<usize> = (0..12).collect();
        let nbrs = mine_bank_neighbors(&reps, &ids, &nat, 4).unwrap();
        for kind in Discrepancy::ALL {
            let v = adversarial_value(&x, &model, &reps, &ids, &nbrs, &nat, &adv, kind);
            assert!(v.abs() < 1e-12, "{kind}: {v}");
        }
    }

    #[test]
    fn adversarial_loss_matches_hand_composition() {
        // Three-sample banks in 2-D; anchor 0 with neighbors 1 and 2.
        let nat = MemoryBank::from_rows(points(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]), 0.5)
            .unwrap();
        let adv = MemoryBank::from_rows(points(&[&[1.0, 0.0], &[0.6, 0.8], &[0.0, -1.0]]), 0.5)
            .unwrap();
        // Identity classifier, so logits are the inputs themselves.
        let model = identity_model();
        let nat_reps = points(&[&[2.0, 0.0]]);
        let adv_x = points(&[&[1.0, 1.0]]);
        let nbrs = vec![vec![1, 2]];

        let pd = [2f64.sqrt(), 2.0];
        let p = [pd[0] / (pd[0] + pd[1]), pd[1] / (pd[0] + pd[1])];
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let qd = [
            ((h - 0.6).powi(2) + (h - 0.8).powi(2)).sqrt(),
            (h * h + (h + 1.0).powi(2)).sqrt(),
        ];
        let q = [qd[0] / (qd[0] + qd[1]), qd[1] / (qd[0] + qd[1])];
        let expected = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)) / 2.0;
        let got = adversarial_value(&adv_x, &model, &nat_reps, &[0], &nbrs, &nat, &adv, Discrepancy::L2);
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn adversarial_loss_anchor_gradients() {
        for seed in 0..20 {
            // Nonzero biases keep every representation away from the origin,
            // where normalization is not differentiable.
            let mut model = MlpModel::init(&[2, 6, 3], seed).unwrap();
            for (i, b) in [1usize, 3].into_iter().enumerate() {
                let n = model.params()[b].numel();
                let bias = random_matrix(1, n, seed * 10 + i as u64).reshape(vec![n]).unwrap();
                model.set_param(b, bias).unwrap();
            }
            let x = random_matrix(16, 2, 40 + seed);
            let nat = MemoryBank::new(16, 3, 0.5, seed).unwrap();
            let adv = MemoryBank::new(16, 3, 0.5, seed + 100).unwrap();
            let ids = [2, 9, 14];
            let batch = x.select_rows(&ids).unwrap();
            let nat_reps = model.logits(&batch).unwrap();
            let adv_x = batch.map(|v| v + 0.05);
            let nbrs = mine_bank_neighbors(&nat_reps, &ids, &nat, 4).unwrap();
            let kind = Discrepancy::ALL[seed as usize % 4];

            let tape = Tape::new();
            let bound = model.bind(&tape, true).unwrap();
            let xv = tape.var(adv_x.clone()).unwrap();
            let logits = bound.forward(xv).unwrap();
            let term =
                lsp_loss_adversarial(logits, &nat_reps, &ids, &nbrs, &nat, &adv, kind).unwrap();
            let grads = tape.backward(term.loss).unwrap();

            let fd_x = central_diff(
                |xp| adversarial_value(xp, &model, &nat_reps, &ids, &nbrs, &nat, &adv, kind),
                &adv_x,
            );
            assert!(max_rel_error(&grads.wrt(xv), &fd_x) < 1e-4, "seed {seed} input");
            for (pi, g) in bound.grads(&grads).iter().enumerate() {
                let fd = central_diff(
                    |pt| {
                        let mut probe = model.clone();
                        probe.set_param(pi, pt.clone()).unwrap();
                        adversarial_value(&adv_x, &probe, &nat_reps, &ids, &nbrs, &nat, &adv, kind)
                    },
                    model.params()[pi],
                );
                assert!(max_rel_error(g, &fd) < 1e-4, "seed {seed} param {pi}");
            }
        }
    }

    #[test]
    fn purity_examples() {
        let clustered = points(&[
            &[0.0, 0.0],
            &[0.01, 0.0],
            &[0.0, 0.01],
            &[5.0, 5.0],
            &[5.01, 5.0],
            &[5.0, 5.01],
        ]);
        let labels = [0, 0, 0, 1, 1, 1];
        assert_eq!(neighbor_purity(&clustered, &labels, 2).unwrap(), 1.0);
        let f = random_matrix(30, 3, 0);
        assert_eq!(neighbor_purity(&f, &[4; 30], 5).unwrap(), 1.0);
    }

    #[test]
    fn random_bank_purity_is_near_half() {
        let n = 400;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let mut values = Vec::new();
        for seed in 0..5 {
            let bank = MemoryBank::new(n, 8, 0.5, seed).unwrap();
            values.push(neighbor_purity(bank.vectors(), &labels, 8).unwrap());
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "{values:?}");
    }

    proptest! {
        #[test]
        fn structure_vector_is_on_simplex_and_scale_invariant(
            d in proptest::collection::vec(0.001f64..100.0, 2..40),
            c in 0.001f64..1000.0,
        ) {
            let p = structure_vector(&d).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let scaled: Vec<f64> = d.iter().map(|v| v * c).collect();
            let ps = structure_vector(&scaled).unwrap();
            for (a, b) in p.iter().zip(&ps) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn discrepancy_nonnegative_zero_iff_equal(seed in any::<u64>(), m in 2usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_simplex(&mut rng, m);
            let q = random_simplex(&mut rng, m);
            for kind in Discrepancy::ALL {
                prop_assert!(lsp_discrepancy(&p, &p, kind).unwrap().abs() < 1e-12);
                let v = lsp_discrepancy(&p, &q, kind).unwrap();
                prop_assert!(v > 0.0, "{} gave {}", kind, v);
            }
        }

        #[test]
        fn bank_rows_stay_unit_norm(seed in any::<u64>(), mu in 0.01f64..=1.0, steps in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bank = MemoryBank::new(10, 4, mu, seed).unwrap();
            for _ in 0..steps {
                let ids: Vec<usize> = (0..3).map(|_| rng.random_range(0..10)).collect();
                let reps = Tensor::randn(&[3, 4], 5.0, &mut rng);
                bank.update(&ids, &reps).unwrap();
                for row in bank.vectors().iter_rows() {
                    prop_assert!((l2_norm(row) - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn knn_agrees_with_brute_force(seed in any::<u64>(), n in 3usize..200, k in 1usize..5) {
            let f = random_matrix(n, k, seed);
            let index = NeighborIndex::new(f.clone()).unwrap();
            let m = 1 + (seed as usize % (n - 1));
            let anchor = (seed as usize / 7) % n;
            prop_assert_eq!(index.query(anchor, m).unwrap(), brute_force_knn(&f, anchor, m));
        }
    }
}
