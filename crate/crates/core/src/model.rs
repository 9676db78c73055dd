//! Fully connected ReLU classifiers and the softmax cross-entropy loss.
//!
//! The same [`MlpModel`] type serves as classifier and as feature extractor.
//! The classifier's "output embedding" for structure losses is its pre-softmax
//! logits.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Reader, Writer};
use crate::error::{config_err, shape_err, Error, Result};
use crate::numerics::{matmul_raw, softmax_rows, Gradients, Tape, Tensor, Var};

const MODEL_MAGIC: &[u8; 4] = b"LSPM";

/// Floor applied to probabilities before taking their log.
pub const PROB_FLOOR: f64 = 1e-300;

/// One affine layer: `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    weight: Tensor,
    bias: Tensor,
}

impl Layer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.ndim() != 2 || bias.ndim() != 1 || weight.shape()[1] != bias.numel() {
            return Err(shape_err!(
                "layer weight {:?} and bias {:?} do not agree",
                weight.shape(),
                bias.shape()
            ));
        }
        Ok(Layer { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// ReLU multilayer perceptron with an identity output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    layers: Vec<Layer>,
}

/// Output of [`MlpModel::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub predicted_label: Vec<usize>,
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(config_err!(
            "a model needs at least input and output dims, got {:?}",
            dims
        ));
    }
    if dims.contains(&0) {
        return Err(config_err!("layer dims must be positive, got {:?}", dims));
    }
    Ok(())
}

impl MlpModel {
    /// Gaussian weights with standard deviation `1/sqrt(fan_in)`, zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let std = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    weight: Tensor::randn(&[w[0], w[1]], std, &mut rng),
                    bias: Tensor::zeros(&[w[1]]),
                }
            })
            .collect();
        Ok(MlpModel {
            dims: dims.to_vec(),
            layers,
        })
    }

    /// All-zero parameters; every input maps to uniform probabilities.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Ok(MlpModel {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| config_err!("a model needs at least one layer"))?;
        let mut dims = vec![first.in_dim()];
        for layer in &layers {
            if layer.in_dim() != *dims.last().unwrap() {
                return Err(shape_err!(
                    "layer input {} does not match previous output {}",
                    layer.in_dim(),
                    dims.last().unwrap()
                ));
            }
            dims.push(layer.out_dim());
        }
        Ok(MlpModel { dims, layers })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Parameters in storage order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Names matching [`MlpModel::params`], e.g. `layer0.weight`.
    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }

    /// Replaces one parameter, keeping its shape.
    pub fn set_param(&mut self, index: usize, value: Tensor) -> Result<()> {
        let mut params = self.params_mut();
        let slot = params
            .get_mut(index)
            .ok_or_else(|| config_err!("parameter index {} out of range", index))?;
        if slot.shape() != value.shape() {
            return Err(shape_err!(
                "parameter {} has shape {:?}, got {:?}",
                index,
                slot.shape(),
                value.shape()
            ));
        }
        **slot = value;
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != 2 || x.shape()[1] != self.input_dim() {
            return Err(shape_err!(
                "model expects [batch, {}] inputs, got {:?}",
                self.input_dim(),
                x.shape()
            ));
        }
        Ok(())
    }

    /// Pre-softmax outputs, computed without a tape.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let n = x.rows();
        let mut h = x.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (k, m) = (layer.in_dim(), layer.out_dim());
            h = matmul_raw(&h, layer.weight.data(), n, k, m);
            for row in h.chunks_mut(m) {
                for (v, b) in row.iter_mut().zip(layer.bias.data()) {
                    *v += b;
                }
            }
            if i < last {
                for v in &mut h {
                    *v = v.max(0.0);
                }
            }
        }
        let out = Tensor::matrix(n, self.output_dim(), h)?;
        out.ensure_finite("logits")?;
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Prediction> {
        let logits = self.logits(x)?;
        let probabilities = softmax_rows(&logits);
        let predicted_label = probabilities.iter_rows().map(argmax).collect();
        Ok(Prediction {
            logits,
            probabilities,
            predicted_label,
        })
    }

    /// Class decisions only.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.iter_rows().map(argmax).collect())
    }

    /// Records the parameters on `tape`, as differentiable leaves when
    /// `trainable`, else as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<BoundMlp<'t>> {
        let mut params = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (w, b) = if trainable {
                (tape.var(layer.weight.clone())?, tape.var(layer.bias.clone())?)
            } else {
                (
                    tape.constant(layer.weight.clone())?,
                    tape.constant(layer.bias.clone())?,
                )
            };
            params.push((w, b));
        }
        Ok(BoundMlp {
            params,
            input_dim: self.input_dim(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MODEL_MAGIC);
        w.u32(self.layers.len() as u32);
        for &d in &self.dims {
            w.u64(d as u64);
        }
        for layer in &self.layers {
            w.f64s(layer.weight.data());
            w.f64s(layer.bias.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MODEL_MAGIC, "model checkpoint")?;
        let n_layers = r.u32()? as usize;
        let dims = (0..=n_layers)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        validate_dims(&dims).map_err(|e| Error::Format(format!("model checkpoint: {e}")))?;
        let mut layers = Vec::with_capacity(n_layers);
        for w in dims.windows(2) {
            let weight = Tensor::matrix(w[0], w[1], r.f64s(w[0] * w[1])?)?;
            let bias = Tensor::vector(r.f64s(w[1])?)?;
            layers.push(Layer { weight, bias });
        }
        r.finish()?;
        Ok(MlpModel { dims, layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        MlpModel::from_bytes(&std::fs::read(path)?)
    }
}

/// A model whose parameters live on a tape.
pub struct BoundMlp<'t> {
    params: Vec<(Var<'t>, Var<'t>)>,
    input_dim: usize,
}

impl<'t> BoundMlp<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(shape_err!(
                "model expects [batch, {}] inputs, got {:?}",
                self.input_dim,
                shape
            ));
        }
        let mut h = x;
        let last = self.params.len() - 1;
        for (i, (w, b)) in self.params.iter().enumerate() {
            h = h.matmul(*w)?.add(*b)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Parameter handles in storage order.
    pub fn params(&self) -> Vec<Var<'t>> {
        self.params.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }

    /// Gradients in the same order as [`MlpModel::params`].
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params().into_iter().map(|p| grads.wrt(p)).collect()
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0
}

pub(crate) fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(shape_err!("{} labels for {} rows", labels.len(), rows));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(config_err!("label {} out of range for {} classes", bad, classes));
    }
    Ok(())
}

/// Mean softmax cross-entropy of `[batch, C]` logits against hard labels.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(shape_err!("cross_entropy needs [batch, C] logits, got {:?}", shape));
    }
    check_labels(labels, shape[0], shape[1])?;
    Ok(logits.log_softmax().pick(labels)?.mean().neg())
}

/// Mean cross-entropy against soft targets (rows on the simplex).
pub fn soft_cross_entropy<'t>(logits: Var<'t>, targets: &Tensor) -> Result<Var<'t>> {
    if logits.shape() != targets.shape() {
        return Err(shape_err!(
            "soft targets {:?} do not match logits {:?}",
            targets.shape(),
            logits.shape()
        ));
    }
    let t = logits.tape().constant(targets.clone())?;
    let per_row = logits.log_softmax().mul(t)?.sum_rows();
    Ok(per_row.mean().neg())
}

impl Prediction {
    /// Mean `-ln p(true class)`, with probabilities floored at [`PROB_FLOOR`].
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<f64> {
        let (n, c) = (self.probabilities.rows(), self.probabilities.cols());
        check_labels(labels, n, c)?;
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -self.probabilities.row(i)[y].max(PROB_FLOOR).ln())
            .sum();
        Ok(total / n as f64)
    }

    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        accuracy(&self.predicted_label, labels)
    }
}

/// Fraction of positions where `predicted` equals `labels`.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{central_diff, max_rel_error};
    use rand::Rng;

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = MlpModel::init(&[2, 8, 2], 0).unwrap();
        let b = MlpModel::init(&[2, 8, 2], 0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, MlpModel::init(&[2, 8, 2], 1).unwrap());
    }

    #[test]
    fn degenerate_dims_rejected() {
        assert!(matches!(MlpModel::init(&[2], 0), Err(Error::Config(_))));
        assert!(matches!(MlpModel::init(&[2, 0, 3], 0), Err(Error::Config(_))));
    }

    #[test]
    fn weight_shapes_follow_dims() {
        let m = MlpModel::init(&[4, 16, 3], 7).unwrap();
        assert_eq!(m.layers().len(), 2);
        assert_eq!(m.layers()[0].weight().shape(), &[4, 16]);
        assert_eq!(m.layers()[1].weight().shape(), &[16, 3]);
        assert_eq!(m.layers()[1].bias().shape(), &[3]);
        assert!(m.layers().iter().all(|l| l.bias().data().iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = MlpModel::zeros(&[3, 5, 4]).unwrap();
        let p = m.forward(&random_input(6, 3, 1)).unwrap();
        for row in p.probabilities.iter_rows() {
            for &v in row {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let m = MlpModel::init(&[3, 7, 7, 4], 3).unwrap();
        let x = random_input(5, 3, 2);
        let full = m.logits(&x).unwrap();
        for i in 0..5 {
            let single = m.logits(&x.select_rows(&[i]).unwrap()).unwrap();
            assert_eq!(single.row(0), full.row(i));
        }
    }

    /// Per-neuron loop written without the matrix helpers.
    fn naive_logits(m: &MlpModel, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = m.layers().len() - 1;
        for (l, layer) in m.layers().iter().enumerate() {
            let (k, out) = (layer.in_dim(), layer.out_dim());
            let mut next = vec![0.0; out];
            for (j, nj) in next.iter_mut().enumerate() {
                let mut acc = layer.bias().data()[j];
                for (i, hi) in h.iter().enumerate().take(k) {
                    acc += hi * layer.weight().data()[i * out + j];
                }
                *nj = if l < last { acc.max(0.0) } else { acc };
            }
            h = next;
        }
        h
    }

    #[test]
    fn logits_match_naive_loop() {
        for seed in 0..5 {
            let m = MlpModel::init(&[4, 9, 6, 3], seed).unwrap();
            let x = random_input(8, 4, 100 + seed);
            let logits = m.logits(&x).unwrap();
            for i in 0..8 {
                let expected = naive_logits(&m, x.row(i));
                for (a, b) in logits.row(i).iter().zip(&expected) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn taped_forward_matches_plain() {
        let m = MlpModel::init(&[3, 5, 2], 4).unwrap();
        let x = random_input(4, 3, 9);
        let tape = Tape::new();
        let bound = m.bind(&tape, true).unwrap();
        let out = bound.forward(tape.constant(x.clone()).unwrap()).unwrap();
        assert_eq!(out.value(), m.logits(&x).unwrap());
        assert!(matches!(
            bound.forward(tape.constant(random_input(2, 4, 0)).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    fn prediction_from_probs(rows: &[Vec<f64>]) -> Prediction {
        let probabilities = Tensor::from_rows(rows).unwrap();
        Prediction {
            logits: probabilities.map(|p| p.max(PROB_FLOOR).ln()),
            predicted_label: probabilities.iter_rows().map(argmax).collect(),
            probabilities,
        }
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn cross_entropy_examples() {
        let uniform = prediction_from_probs(&[vec![0.1; 10]]);
        assert!((uniform.cross_entropy(&[3]).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((10f64.ln() - 2.302585).abs() < 1e-6);

        let onehot = prediction_from_probs(&[vec![0.0, 1.0, 0.0]]);
        assert_eq!(onehot.cross_entropy(&[1]).unwrap(), 0.0);

        let p = prediction_from_probs(&[vec![0.7, 0.3]]);
        let ce = p.cross_entropy(&[0]).unwrap();
        assert!((ce - 0.356675).abs() < 1e-6);
        assert!((ce + 0.7f64.ln()).abs() < 1e-15);

        assert!(matches!(p.cross_entropy(&[2]), Err(Error::Config(_))));
    }

    #[test]
    fn taped_cross_entropy_rejects_bad_label() {
        let tape = Tape::new();
        let z = tape.var(random_input(2, 3, 0)).unwrap();
        assert!(matches!(cross_entropy(z, &[0, 3]), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_shift_invariance() {
        let m = MlpModel::init(&[2, 6, 3], 11).unwrap();
        let x = random_input(4, 2, 12);
        let logits = m.logits(&x).unwrap();
        let shifted = logits.map(|v| v + 123.456);
        let (a, b) = (softmax_rows(&logits), softmax_rows(&shifted));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_logit_gradient_closed_form() {
        let z = random_input(5, 4, 21).map(|v| 3.0 * v);
        let labels = [0, 3, 1, 1, 2];
        let tape = Tape::new();
        let zv = tape.var(z.clone()).unwrap();
        let g = tape.backward(cross_entropy(zv, &labels).unwrap()).unwrap();
        let probs = softmax_rows(&z);
        let expected: Vec<f64> = probs
            .data()
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let (i, j) = (k / 4, k % 4);
                (p - if labels[i] == j { 1.0 } else { 0.0 }) / 5.0
            })
            .collect();
        for (a, b) in g.wrt(zv).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
        let fd = central_diff(
            |z| {
                let t = Tape::new();
                cross_entropy(t.constant(z.clone()).unwrap(), &labels)
                    .unwrap()
                    .item()
            },
            &z,
        );
        assert!(max_rel_error(&g.wrt(zv), &fd) < 1e-4);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for seed in 0..20 {
            let m = MlpModel::init(&[3, 6, 4], seed).unwrap();
            let x = random_input(5, 3, 1000 + seed);
            let labels = [0, 1, 2, 3, 1];
            let tape = Tape::new();
            let bound = m.bind(&tape, true).unwrap();
            let xv = tape.var(x.clone()).unwrap();
            let loss = cross_entropy(bound.forward(xv).unwrap(), &labels).unwrap();
            let grads = tape.backward(loss).unwrap();
            let analytic = bound.grads(&grads);

            for (pi, g) in analytic.iter().enumerate() {
                let fd = central_diff(
                    |p| {
                        let mut probe = m.clone();
                        probe.set_param(pi, p.clone()).unwrap();
                        probe.forward(&x).unwrap().cross_entropy(&labels).unwrap()
                    },
                    m.params()[pi],
                );
                assert!(max_rel_error(g, &fd) < 1e-4, "seed {seed} param {pi}");
            }
            let fd_x = central_diff(
                |xp| m.forward(xp).unwrap().cross_entropy(&labels).unwrap(),
                &x,
            );
            assert!(max_rel_error(&grads.wrt(xv), &fd_x) < 1e-4, "seed {seed} input");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_version_check() {
        let m = MlpModel::init(&[2, 8, 8, 2], 5).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(MlpModel::from_bytes(&bytes).unwrap(), m);

        let mut bumped = bytes.clone();
        bumped[4] = 9;
        assert!(matches!(MlpModel::from_bytes(&bumped), Err(Error::Format(_))));
        assert!(matches!(
            MlpModel::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        assert!(matches!(MlpModel::from_bytes(b"nope"), Err(Error::Format(_))));
    }

    #[test]
    fn probabilities_rows_sum_to_one_and_argmax_attains_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let m = MlpModel::init(&[2, 16, 5], 8).unwrap();
        let x = random_input(20, 2, rng.random());
        let p = m.forward(&x).unwrap();
        for (row, &label) in p.probabilities.iter_rows().zip(&p.predicted_label) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v <= row[label]));
        }
    }
}
