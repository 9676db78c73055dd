//! Lipschitz-margin certificates on the probability output.
//!
//! If `||p(x) - p(x')||_2 <= L ||x - x'||_2` on a ball around `x`, every class
//! probability moves by at most `L ||x - x'||`, so the top class `a` cannot be
//! overtaken before `||x - x'||` reaches `(p_a - p_b) / (2 L)`.
//!
//! Two estimates of `L` are offered. The analytic bound multiplies layer
//! spectral norms by the softmax Jacobian bound `1/2` and is sound everywhere.
//! The empirical estimate probes a ball and is only a lower bound, so the
//! radius it yields is a heuristic.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{project_row, random_ball_point, Norm};
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{argmax, MlpModel};
use crate::numerics::{euclidean, l2_norm, softmax_rows, Tape, Tensor};

/// Spectral norm of `diag(p) - p p^T` never exceeds this (Gershgorin: each
/// row's disc is centered at `p_i(1 - p_i)` with the same radius).
pub const SOFTMAX_JACOBIAN_BOUND: f64 = 0.5;

/// Relative slack added to the analytic bound to absorb SVD rounding.
const SVD_SLACK: f64 = 1e-9;

const ASCENT_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LipschitzMode {
    /// Probe-based lower bound.
    Empirical,
    /// Layer-norm product upper bound.
    Analytic,
}

impl fmt::Display for LipschitzMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LipschitzMode::Empirical => "empirical",
            LipschitzMode::Analytic => "analytic",
        })
    }
}

impl FromStr for LipschitzMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(LipschitzMode::Empirical),
            "analytic" => Ok(LipschitzMode::Analytic),
            other => Err(config_err!("unknown Lipschitz mode {:?}", other)),
        }
    }
}

/// `(p_a - p_b) / (2 L)`.
pub fn certified_radius(p_a: f64, p_b: f64, lipschitz: f64) -> Result<f64> {
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(config_err!("Lipschitz constant must be positive, got {}", lipschitz));
    }
    if !(0.0 <= p_b && p_b <= p_a && p_a <= 1.0) {
        return Err(config_err!("need 0 <= p_b <= p_a <= 1, got p_a={} p_b={}", p_a, p_b));
    }
    Ok((p_a - p_b) / (2.0 * lipschitz))
}

/// Largest singular value of a dense matrix.
pub fn spectral_norm(m: &Tensor) -> Result<f64> {
    if m.ndim() != 2 {
        return Err(shape_err!("spectral norm needs a matrix, got {:?}", m.shape()));
    }
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    Ok(dm.singular_values().max())
}

/// Global upper bound on the L2 Lipschitz constant of `x -> softmax(f(x))`.
pub fn analytic_lipschitz(model: &MlpModel) -> Result<f64> {
    let mut product = SOFTMAX_JACOBIAN_BOUND;
    for layer in model.layers() {
        product *= spectral_norm(layer.weight())?;
    }
    Ok(product * (1.0 + SVD_SLACK))
}

fn probabilities(model: &MlpModel, x: &Tensor) -> Result<Tensor> {
    Ok(softmax_rows(&model.logits(x)?))
}

fn check_point(model: &MlpModel, x: &[f64]) -> Result<()> {
    if x.len() != model.input_dim() {
        return Err(shape_err!(
            "point of length {} for input dim {}",
            x.len(),
            model.input_dim()
        ));
    }
    Ok(())
}

/// Probe-based lower bound on the local Lipschitz constant at `x`.
///
/// Takes the largest ratio `||p(x) - p(x')|| / ||x - x'||` over `n_probes`
/// uniform points of the radius ball plus a gradient-ascent refinement of the
/// first probe. The probe sequence is prefix-stable in `n_probes`, so the
/// estimate never decreases as probes are added.
pub fn estimate_local_lipschitz(
    model: &MlpModel,
    x: &[f64],
    radius: f64,
    n_probes: usize,
    seed: u64,
) -> Result<f64> {
    check_point(model, x)?;
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(config_err!("probe radius must be positive, got {}", radius));
    }
    if n_probes == 0 {
        return Err(config_err!("need at least one probe"));
    }
    let d = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(n_probes * d);
    for _ in 0..n_probes {
        let offset = random_ball_point(&mut rng, d, radius, Norm::L2);
        probes.extend(x.iter().zip(offset).map(|(a, o)| a + o));
    }
    let probes = Tensor::matrix(n_probes, d, probes)?;
    let center = probabilities(model, &Tensor::matrix(1, d, x.to_vec())?)?;
    let p_x = center.row(0);
    let outputs = probabilities(model, &probes)?;
    let mut best = 0.0f64;
    for (probe, out) in probes.iter_rows().zip(outputs.iter_rows()) {
        best = best.max(ratio(x, probe, p_x, out));
    }
    let refined = ascend_ratio(model, x, p_x, probes.row(0), radius)?;
    Ok(best.max(refined))
}

fn ratio(x: &[f64], probe: &[f64], p_x: &[f64], p_probe: &[f64]) -> f64 {
    let dx = euclidean(x, probe);
    if dx == 0.0 {
        0.0
    } else {
        euclidean(p_x, p_probe) / dx
    }
}

/// Normalized-gradient ascent on the probe ratio inside the ball; returns
/// the best ratio seen along the path.
fn ascend_ratio(model: &MlpModel, x: &[f64], p_x: &[f64], start: &[f64], radius: f64) -> Result<f64> {
    let d = x.len();
    let step = 0.1 * radius;
    let min_dist = 1e-6 * radius;
    let mut point = start.to_vec();
    let mut best = 0.0f64;
    for _ in 0..=ASCENT_STEPS {
        if euclidean(&point, x) < min_dist {
            break;
        }
        let tape = Tape::new();
        let bound = model.bind(&tape, false)?;
        let pv = tape.var(Tensor::matrix(1, d, point.clone())?)?;
        let out = bound.forward(pv)?.softmax();
        let num = out
            .sub(tape.constant(Tensor::matrix(1, p_x.len(), p_x.to_vec())?)?)?
            .l2_norm();
        let den = pv
            .sub(tape.constant(Tensor::matrix(1, d, x.to_vec())?)?)?
            .l2_norm();
        let r = num.div(den)?;
        best = best.max(r.item());
        let g = tape.backward(r)?.wrt(pv);
        let gn = l2_norm(g.data());
        if gn == 0.0 {
            break;
        }
        for (p, gv) in point.iter_mut().zip(g.data()) {
            *p += step * gv / gn;
        }
        project_row(&mut point, x, radius, Norm::L2);
    }
    Ok(best)
}

/// Searches the `delta` ball for a point whose predicted class differs from
/// that of `x`. Half the probes are uniform in the ball, half on its sphere.
pub fn falsify_certificate(
    model: &MlpModel,
    x: &[f64],
    delta: f64,
    n_probes: usize,
    seed: u64,
) -> Result<bool> {
    check_point(model, x)?;
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(config_err!("radius must be finite and >= 0, got {}", delta));
    }
    if delta == 0.0 || n_probes == 0 {
        return Ok(false);
    }
    let d = x.len();
    let base = argmax(model.logits(&Tensor::matrix(1, d, x.to_vec())?)?.row(0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const CHUNK: usize = 4096;
    let mut remaining = n_probes;
    let mut index = 0;
    while remaining > 0 {
        let n = remaining.min(CHUNK);
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let mut offset = random_ball_point(&mut rng, d, delta, Norm::L2);
            if index % 2 == 1 {
                let norm = l2_norm(&offset);
                if norm > 0.0 {
                    offset.iter_mut().for_each(|o| *o *= delta / norm);
                }
            }
            index += 1;
            data.extend(x.iter().zip(offset).map(|(a, o)| a + o));
        }
        let preds = model.predict(&Tensor::matrix(n, d, data)?)?;
        if preds.iter().any(|&p| p != base) {
            return Ok(true);
        }
        remaining -= n;
    }
    Ok(false)
}

/// Settings for certifying a batch of points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyConfig {
    pub mode: LipschitzMode,
    /// Probes for the empirical Lipschitz estimate.
    pub radius_probes: usize,
    /// Ball radius for the empirical Lipschitz estimate.
    pub probe_radius: f64,
    /// Probes spent trying to break each certificate.
    pub falsify_probes: usize,
    pub seed: u64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            mode: LipschitzMode::Analytic,
            radius_probes: 256,
            probe_radius: 0.05,
            falsify_probes: 1000,
            seed: 0,
        }
    }
}

impl CertifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius_probes == 0 {
            return Err(config_err!("radius probes must be positive"));
        }
        if !(self.probe_radius.is_finite() && self.probe_radius > 0.0) {
            return Err(config_err!("probe radius must be positive, got {}", self.probe_radius));
        }
        Ok(())
    }
}

/// One certified point. `certified_radius` is sound only in analytic mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub sample_id: usize,
    pub predicted: usize,
    pub p_a: f64,
    pub p_b: f64,
    pub lipschitz_estimate: f64,
    pub certified_radius: f64,
    pub falsified: bool,
    pub falsification_budget: usize,
    pub mode: LipschitzMode,
    pub norm: String,
}

/// Top two entries of a probability row as `(index of top, p_a, p_b)`.
pub fn top_two(p: &[f64]) -> (usize, f64, f64) {
    let a = argmax(p);
    let p_b = p
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != a)
        .map(|(_, &v)| v)
        .fold(0.0, f64::max);
    (a, p[a], p_b)
}

/// Certificates for every row of `x`; `ids` label the rows in the report.
pub fn certify_batch(
    model: &MlpModel,
    x: &Tensor,
    ids: &[usize],
    cfg: &CertifyConfig,
) -> Result<Vec<CertificateReport>> {
    cfg.validate()?;
    if x.ndim() != 2 || x.rows() != ids.len() {
        return Err(shape_err!("{} ids for inputs {:?}", ids.len(), x.shape()));
    }
    let probs = probabilities(model, x)?;
    let global = match cfg.mode {
        LipschitzMode::Analytic => Some(analytic_lipschitz(model)?),
        LipschitzMode::Empirical => None,
    };
    let mut reports = Vec::with_capacity(ids.len());
    for (row, &id) in ids.iter().enumerate() {
        let point = x.row(row);
        let (predicted, p_a, p_b) = top_two(probs.row(row));
        let seed = cfg.seed.wrapping_add(id as u64);
        let lipschitz = match global {
            Some(l) => l,
            None => estimate_local_lipschitz(model, point, cfg.probe_radius, cfg.radius_probes, seed)?,
        };
        let radius = if lipschitz > 0.0 {
            certified_radius(p_a, p_b, lipschitz)?
        } else {
            f64::INFINITY
        };
        let probe_radius = if radius.is_finite() { radius } else { cfg.probe_radius };
        let falsified = falsify_certificate(model, point, probe_radius, cfg.falsify_probes, seed ^ 0x5eed)?;
        reports.push(CertificateReport {
            sample_id: id,
            predicted,
            p_a,
            p_b,
            lipschitz_estimate: lipschitz,
            certified_radius: radius,
            falsified,
            falsification_budget: cfg.falsify_probes,
            mode: cfg.mode,
            norm: "l2".into(),
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;
    use proptest::prelude::*;
    use rand::Rng;

    fn linear(w: &[f64], b: &[f64], d: usize, c: usize) -> MlpModel {
        let layer = Layer::new(
            Tensor::matrix(d, c, w.to_vec()).unwrap(),
            Tensor::vector(b.to_vec()).unwrap(),
        )
        .unwrap();
        MlpModel::from_layers(vec![layer]).unwrap()
    }

    #[test]
    fn radius_examples() {
        assert!((certified_radius(0.9, 0.05, 2.0).unwrap() - 0.2125).abs() < 1e-15);
        assert_eq!(certified_radius(0.4, 0.4, 3.0).unwrap(), 0.0);
        assert_eq!(certified_radius(1.0, 0.0, 0.5).unwrap(), 1.0);
        assert!(matches!(certified_radius(0.9, 0.1, 0.0), Err(Error::Config(_))));
        assert!(matches!(certified_radius(0.9, 0.1, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn spectral_norm_of_known_matrices() {
        let diag = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, -5.0]).unwrap();
        assert!((spectral_norm(&diag).unwrap() - 5.0).abs() < 1e-12);
        // Rank one: u v^T has norm |u| |v|.
        let outer = Tensor::matrix(2, 3, vec![1., 2., 2., 2., 4., 4.]).unwrap();
        assert!((spectral_norm(&outer).unwrap() - 5f64.sqrt() * 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_model_has_zero_estimate() {
        let model = MlpModel::zeros(&[2, 4, 3]).unwrap();
        assert_eq!(estimate_local_lipschitz(&model, &[0.3, 0.6], 0.1, 50, 0).unwrap(), 0.0);
    }

    /// Jacobian of `softmax(x W + b)` at `x` is `(diag p - p p^T) W^T`.
    fn jacobian_norm(w: &[f64], b: &[f64], x: &[f64]) -> f64 {
        let z = [
            x[0] * w[0] + x[1] * w[2] + b[0],
            x[0] * w[1] + x[1] * w[3] + b[1],
        ];
        let m = z[0].max(z[1]);
        let e = [(z[0] - m).exp(), (z[1] - m).exp()];
        let p = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        let s = DMatrix::from_row_slice(2, 2, &[p[0] - p[0] * p[0], -p[0] * p[1], -p[1] * p[0], p[1] - p[1] * p[1]]);
        let wt = DMatrix::from_row_slice(2, 2, &[w[0], w[2], w[1], w[3]]);
        (s * wt).singular_values().max()
    }

    #[test]
    fn empirical_estimate_approaches_jacobian_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let w: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            let model = linear(&w, &b, 2, 2);
            let exact = jacobian_norm(&w, &b, &x);
            let coarse = estimate_local_lipschitz(&model, &x, 1e-2, 200, 1).unwrap();
            let fine = estimate_local_lipschitz(&model, &x, 1e-5, 200, 1).unwrap();
            assert!((fine - exact).abs() <= 1e-3 * exact.max(1e-6), "{fine} vs {exact}");
            assert!((fine - exact).abs() <= (coarse - exact).abs() + 1e-9);
            assert!(fine <= analytic_lipschitz(&model).unwrap());
        }
    }

    #[test]
    fn estimate_grows_with_nested_probe_sets() {
        let model = MlpModel::init(&[2, 16, 3], 5).unwrap();
        let x = [0.4, 0.7];
        let mut last = 0.0;
        for n in [1, 2, 5, 20, 100, 400] {
            let l = estimate_local_lipschitz(&model, &x, 0.2, n, 9).unwrap();
            assert!(l >= last);
            last = l;
        }
    }

    #[test]
    fn zero_radius_is_never_falsified() {
        let model = MlpModel::init(&[2, 8, 2], 0).unwrap();
        assert!(!falsify_certificate(&model, &[0.5, 0.5], 0.0, 100, 0).unwrap());
    }

    #[test]
    fn halved_lipschitz_is_caught() {
        // Steep linear model: boundary at x0 = 0.5 with a huge slope.
        let model = linear(&[40.0, -40.0, 0.0, 0.0], &[-20.0, 20.0], 2, 2);
        let l = analytic_lipschitz(&model).unwrap();
        let mut caught = 0;
        for i in 0..50 {
            let x = [0.5 + 0.001 * (i as f64 + 1.0), 0.5];
            let p = softmax_rows(&model.logits(&Tensor::matrix(1, 2, x.to_vec()).unwrap()).unwrap());
            let (_, pa, pb) = top_two(p.row(0));
            let sound = certified_radius(pa, pb, l).unwrap();
            assert!(!falsify_certificate(&model, &x, sound, 2000, i).unwrap());
            let unsound = certified_radius(pa, pb, l / 2.0).unwrap();
            caught += usize::from(falsify_certificate(&model, &x, unsound * 1.5, 2000, i).unwrap());
        }
        assert!(caught > 0);
    }

    #[test]
    fn batch_reports_are_consistent() {
        let model = MlpModel::init(&[2, 8, 3], 1).unwrap();
        let x = Tensor::matrix(3, 2, vec![0.1, 0.2, 0.5, 0.5, 0.9, 0.3]).unwrap();
        for mode in [LipschitzMode::Analytic, LipschitzMode::Empirical] {
            let cfg = CertifyConfig {
                mode,
                radius_probes: 32,
                falsify_probes: 200,
                ..Default::default()
            };
            let reports = certify_batch(&model, &x, &[7, 8, 9], &cfg).unwrap();
            assert_eq!(reports.len(), 3);
            for r in &reports {
                assert!(r.p_a >= r.p_b && r.p_b >= 0.0 && r.certified_radius >= 0.0);
                assert_eq!(r.mode, mode);
                assert_eq!(r.norm, "l2");
                if mode == LipschitzMode::Analytic {
                    assert!(!r.falsified);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn radius_monotone(pa in 0.0f64..=1.0, frac in 0.0f64..=1.0, l in 0.01f64..100.0, k in 1.0f64..10.0) {
            let pb = pa * frac;
            let r = certified_radius(pa, pb, l).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert!(certified_radius(pa, pb, l * k).unwrap() <= r);
            let wider = certified_radius(pa, pb * 0.5, l).unwrap();
            prop_assert!(wider >= r);
        }

        #[test]
        fn analytic_bounds_empirical(seed in any::<u64>()) {
            let model = MlpModel::init(&[2, 8, 8, 3], seed).unwrap();
            let x = [0.3, 0.6];
            let e = estimate_local_lipschitz(&model, &x, 0.5, 64, seed).unwrap();
            prop_assert!(e <= analytic_lipschitz(&model).unwrap());
        }
    }
}
