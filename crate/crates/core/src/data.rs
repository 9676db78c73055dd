//! Labelled datasets, synthetic generators and the CSV fixture format.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::numerics::Tensor;

/// Bounds every feature is kept within.
pub const FEATURE_RANGE: (f64, f64) = (0.0, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Full,
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Full => "full",
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    feature_range: (f64, f64),
    split: Split,
}

impl Dataset {
    /// Checks row/label agreement, label range and feature bounds.
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        feature_range: (f64, f64),
    ) -> Result<Self> {
        if features.ndim() != 2 {
            return Err(shape_err!("features must be [N, d], got {:?}", features.shape()));
        }
        if features.rows() != labels.len() {
            return Err(shape_err!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            ));
        }
        if num_classes < 2 {
            return Err(config_err!("need at least 2 classes, got {}", num_classes));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(config_err!("label {} outside 0..{}", bad, num_classes));
        }
        let (lo, hi) = feature_range;
        if let Some(v) = features.data().iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(config_err!("feature {} outside [{}, {}]", v, lo, hi));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            feature_range,
            split: Split::Full,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_range(&self) -> (f64, f64) {
        self.feature_range
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows `ids` as a new dataset with the same metadata.
    pub fn subset(&self, ids: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            features: self.features.select_rows(ids)?,
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            feature_range: self.feature_range,
            split: self.split,
        })
    }

    /// Splits off `fraction` of each class as validation data; `None` when
    /// nothing is held out.
    ///
    /// Each class contributes `round(fraction * count)` samples, chosen by a
    /// seeded shuffle. Both halves keep ascending original order.
    pub fn stratified_split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(config_err!("split fraction must lie in [0, 1), got {}", fraction));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut held = vec![false; self.len()];
        for class in 0..self.num_classes {
            let mut ids: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            ids.shuffle(&mut rng);
            let take = (fraction * ids.len() as f64).round() as usize;
            for &i in &ids[..take] {
                held[i] = true;
            }
        }
        let train: Vec<usize> = (0..self.len()).filter(|&i| !held[i]).collect();
        let val: Vec<usize> = (0..self.len()).filter(|&i| held[i]).collect();
        if train.is_empty() {
            return Err(config_err!("split leaves no training data"));
        }
        let train = self.subset(&train)?.with_split(Split::Train);
        let val = if val.is_empty() {
            None
        } else {
            Some(self.subset(&val)?.with_split(Split::Validation))
        };
        Ok((train, val))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        self.write_csv(&mut w)
    }

    /// The CSV text of [`Dataset::save_csv`].
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        self.write_csv(&mut w)?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    fn write_csv<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim()).map(|j| format!("f{j}")));
        w.write_record(&header).map_err(csv_io)?;
        for (row, label) in self.features.iter_rows().zip(&self.labels) {
            let mut rec = vec![label.to_string()];
            // `{:?}` prints the shortest string that parses back to the same f64.
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a `label,f0,f1,...` file. The class count is one past the
    /// largest label (at least 2); the feature range is [`FEATURE_RANGE`].
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Dataset::read_csv(file)
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Dataset> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
        let mut records = r.records();
        let header = match records.next() {
            None => return Err(parse_err(1, "empty file")),
            Some(h) => h.map_err(csv_parse)?,
        };
        let width = header.len();
        if width < 2 || &header[0] != "label" {
            return Err(parse_err(1, "header must be label,f0,f1,..."));
        }
        for (j, name) in header.iter().skip(1).enumerate() {
            if name != format!("f{j}") {
                return Err(parse_err(1, &format!("column {} should be f{j}, found {name:?}", j + 1)));
            }
        }
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for rec in records {
            let rec = rec.map_err(csv_parse)?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != width {
                return Err(parse_err(
                    line,
                    &format!("expected {} fields, found {}", width, rec.len()),
                ));
            }
            let label = rec[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| parse_err(line, &format!("label {:?}: {e}", &rec[0])))?;
            labels.push(label);
            for field in rec.iter().skip(1) {
                let v = field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(line, &format!("value {field:?}: {e}")))?;
                if !v.is_finite() {
                    return Err(parse_err(line, &format!("non-finite value {field:?}")));
                }
                data.push(v);
            }
        }
        if labels.is_empty() {
            return Err(parse_err(2, "no data rows"));
        }
        let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
        let features = Tensor::matrix(labels.len(), width - 1, data)?;
        Dataset::new(features, labels, classes, FEATURE_RANGE)
            .map_err(|e| Error::Format(format!("dataset contents: {e}")))
    }
}

fn parse_err(line: u64, message: &str) -> Error {
    Error::Parse {
        line,
        message: message.to_string(),
    }
}

fn csv_parse(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(line, &e.to_string())
}

fn csv_io(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(e.to_string())
    }
}

fn gaussian(sigma: f64) -> Result<Normal<f64>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(config_err!("noise sigma must be finite and >= 0, got {}", sigma));
    }
    Normal::new(0.0, sigma).map_err(|e| config_err!("noise sigma {}: {}", sigma, e))
}

/// Unscaled moons: class 0 on the upper unit half-circle centered at the
/// origin, class 1 on the lower one centered at (1, 0.5).
pub fn two_moons_raw(n: usize, noise_sigma: f64, seed: u64) -> Result<(Vec<[f64; 2]>, Vec<usize>)> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(config_err!("two moons needs a positive even n, got {}", n));
    }
    let noise = gaussian(noise_sigma)?;
    let half = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = |i: usize| {
        if half == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (half - 1) as f64
        }
    };
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..half {
        let t = angle(i);
        points.push([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..half {
        let t = angle(i);
        points.push([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise_sigma > 0.0 {
        for p in &mut points {
            p[0] += noise.sample(&mut rng);
            p[1] += noise.sample(&mut rng);
        }
    }
    Ok((points, labels))
}

/// Two interleaved half-circles, min-max scaled per axis into [0, 1].
pub fn gen_two_moons(n: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    let (points, labels) = two_moons_raw(n, noise_sigma, seed)?;
    let mut data = Vec::with_capacity(2 * n);
    let bounds: Vec<(f64, f64)> = (0..2)
        .map(|axis| {
            points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p[axis]), hi.max(p[axis]))
            })
        })
        .collect();
    for p in &points {
        for (axis, &(lo, hi)) in bounds.iter().enumerate() {
            let span = hi - lo;
            let v = if span > 0.0 { (p[axis] - lo) / span } else { 0.5 };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Dataset::new(Tensor::matrix(n, 2, data)?, labels, 2, FEATURE_RANGE)
}

/// `n / k` isotropic Gaussian samples around each of the `k` center rows,
/// clamped into [0, 1]. Sample `i` belongs to cluster `i / (n / k)`.
pub fn gen_gaussian_blobs(n: usize, centers: &Tensor, sigma: f64, seed: u64) -> Result<Dataset> {
    if centers.ndim() != 2 {
        return Err(shape_err!("centers must be [k, d], got {:?}", centers.shape()));
    }
    let k = centers.rows();
    if k < 2 {
        return Err(config_err!("need at least 2 centers, got {}", k));
    }
    if n == 0 || !n.is_multiple_of(k) {
        return Err(config_err!("n = {} must be a positive multiple of {} centers", n, k));
    }
    let noise = gaussian(sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = n / k;
    let d = centers.cols();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter_rows().enumerate() {
        for _ in 0..per {
            for &mu in center {
                let v = if sigma > 0.0 { mu + noise.sample(&mut rng) } else { mu };
                data.push(v.clamp(FEATURE_RANGE.0, FEATURE_RANGE.1));
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::matrix(n, d, data)?, labels, k, FEATURE_RANGE)
}
