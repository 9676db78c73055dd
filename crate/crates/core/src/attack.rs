//! White-box gradient attacks: FGSM, PGD and PGD on the CW margin loss.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{accuracy, check_labels, cross_entropy, MlpModel};
use crate::numerics::{l2_norm, Tape, Tensor, Var};

/// Floor on the gradient norm in L2 steps.
pub const L2_STEP_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    Ce,
    CwMargin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Cw,
}

macro_rules! text_enum {
    ($t:ty, $what:literal, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(config_err!("unknown {} {:?}", $what, other)),
                }
            }
        }
    };
}

text_enum!(Norm, "norm", Norm::Linf => "linf", Norm::L2 => "l2");
text_enum!(AttackLoss, "attack loss", AttackLoss::Ce => "ce", AttackLoss::CwMargin => "cw_margin");
text_enum!(AttackKind, "attack", AttackKind::Fgsm => "fgsm", AttackKind::Pgd => "pgd", AttackKind::Cw => "cw");

/// Budget and schedule of a gradient attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub loss: AttackLoss,
    pub random_init: bool,
    pub data_min: f64,
    pub data_max: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            norm: Norm::Linf,
            epsilon: 8.0 / 255.0,
            steps: 10,
            step_size: 2.0 / 255.0,
            loss: AttackLoss::Ce,
            random_init: true,
            data_min: 0.0,
            data_max: 1.0,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(config_err!("epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        // A zero step is only meaningful for the empty ball.
        let zero_ok = self.epsilon == 0.0 && self.step_size == 0.0;
        if !(self.step_size.is_finite() && self.step_size > 0.0 || zero_ok) {
            return Err(config_err!("step size must be positive, got {}", self.step_size));
        }
        if self.steps == 0 {
            return Err(config_err!("steps must be at least 1"));
        }
        // Negated so NaN bounds fail too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.data_min < self.data_max) {
            return Err(config_err!(
                "data bounds must satisfy min < max, got [{}, {}]",
                self.data_min,
                self.data_max
            ));
        }
        Ok(())
    }
}

/// Mean over the batch of `z_y - max_{l != y} z_l`.
pub fn cw_margin_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(shape_err!("margin loss needs [batch, C >= 2] logits, got {:?}", shape));
    }
    check_labels(labels, shape[0], shape[1])?;
    Ok(logits.pick(labels)?.sub(logits.max_excluding(labels)?)?.mean())
}

/// Gradient of the summed per-sample attack objective with respect to `x`.
/// The objective is CE, or the negated margin, so ascent hurts the model.
pub fn input_gradient(model: &MlpModel, x: &Tensor, labels: &[usize], loss: AttackLoss) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false)?;
    let xv = tape.var(x.clone())?;
    let logits = bound.forward(xv)?;
    let batch = x.rows() as f64;
    let objective = match loss {
        AttackLoss::Ce => cross_entropy(logits, labels)?.scale(batch),
        AttackLoss::CwMargin => cw_margin_loss(logits, labels)?.scale(-batch),
    };
    Ok(tape.backward(objective)?.wrt(xv))
}

fn check_batch(model: &MlpModel, x: &Tensor, labels: &[usize]) -> Result<()> {
    if x.ndim() != 2 || x.cols() != model.input_dim() {
        return Err(shape_err!(
            "attack input {:?} does not fit a model with input dim {}",
            x.shape(),
            model.input_dim()
        ));
    }
    check_labels(labels, x.rows(), model.output_dim())
}

/// `x + eps sign(grad CE)`, clamped to the data bounds.
pub fn fgsm(model: &MlpModel, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.norm != Norm::Linf {
        return Err(config_err!("FGSM is defined for the linf norm only"));
    }
    check_batch(model, x, labels)?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let g = input_gradient(model, x, labels, AttackLoss::Ce)?;
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| (v + cfg.epsilon * sign(gv)).clamp(cfg.data_min, cfg.data_max))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projected gradient ascent on `cfg.loss` inside the `cfg.norm` ball of
/// radius `cfg.epsilon` around `x`, staying within the data bounds.
pub fn pgd(model: &MlpModel, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_batch(model, x, labels)?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let d = x.cols();
    let mut adv = x.clone();
    if cfg.random_init {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let start: Vec<f64> = x
            .iter_rows()
            .flat_map(|row| {
                let offset = random_ball_point(&mut rng, d, cfg.epsilon, cfg.norm);
                row.iter().zip(offset).map(|(v, o)| v + o).collect::<Vec<_>>()
            })
            .collect();
        adv = Tensor::new(x.shape().to_vec(), start)?;
        project(&mut adv, x, cfg);
    }
    for _ in 0..cfg.steps {
        let g = input_gradient(model, &adv, labels, cfg.loss)?;
        let mut next = adv.data().to_vec();
        for (row, grow) in next.chunks_mut(d).zip(g.data().chunks(d)) {
            match cfg.norm {
                Norm::Linf => {
                    for (v, &gv) in row.iter_mut().zip(grow) {
                        *v += cfg.step_size * sign(gv);
                    }
                }
                Norm::L2 => {
                    let scale = cfg.step_size / l2_norm(grow).max(L2_STEP_FLOOR);
                    for (v, &gv) in row.iter_mut().zip(grow) {
                        *v += scale * gv;
                    }
                }
            }
        }
        adv = Tensor::new(x.shape().to_vec(), next)?;
        project(&mut adv, x, cfg);
    }
    Ok(adv)
}

/// Uniform sample from the radius-`eps` ball of the given norm in `d` dimensions.
pub fn random_ball_point<R: Rng + ?Sized>(rng: &mut R, d: usize, eps: f64, norm: Norm) -> Vec<f64> {
    match norm {
        Norm::Linf => (0..d).map(|_| rng.random_range(-eps..=eps)).collect(),
        Norm::L2 => {
            let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = l2_norm(&dir).max(L2_STEP_FLOOR);
            let r = eps * rng.random::<f64>().powf(1.0 / d as f64);
            dir.into_iter().map(|v| v * r / n).collect()
        }
    }
}

/// Data-bound clamp, then projection onto the ball around `origin`.
fn project(adv: &mut Tensor, origin: &Tensor, cfg: &AttackConfig) {
    let d = origin.cols();
    let data = adv.data_mut();
    for v in data.iter_mut() {
        *v = v.clamp(cfg.data_min, cfg.data_max);
    }
    for (row, o) in data.chunks_mut(d).zip(origin.data().chunks(d)) {
        project_row(row, o, cfg.epsilon, cfg.norm);
    }
    // Rounding in the L2 rescale can step past a bound; clamping moves each
    // coordinate toward the in-bounds origin, so the ball still holds.
    for v in data.iter_mut() {
        *v = v.clamp(cfg.data_min, cfg.data_max);
    }
}

/// Moves `point` onto the closed `norm` ball of radius `eps` around `center`.
/// Points already inside are unchanged.
pub fn project_row(point: &mut [f64], center: &[f64], eps: f64, norm: Norm) {
    match norm {
        Norm::Linf => {
            for (p, &c) in point.iter_mut().zip(center) {
                *p = p.clamp(c - eps, c + eps);
            }
        }
        Norm::L2 => {
            let dist = point
                .iter()
                .zip(center)
                .map(|(p, c)| (p - c) * (p - c))
                .sum::<f64>()
                .sqrt();
            if dist > eps {
                let s = eps / dist;
                for (p, &c) in point.iter_mut().zip(center) {
                    *p = c + (*p - c) * s;
                }
            }
        }
    }
}

/// Runs the named attack. `Cw` is PGD on the margin loss.
pub fn run_attack(
    kind: AttackKind,
    model: &MlpModel,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    match kind {
        AttackKind::Fgsm => fgsm(model, x, labels, cfg),
        AttackKind::Pgd => pgd(model, x, labels, cfg),
        AttackKind::Cw => pgd(
            model,
            x,
            labels,
            &AttackConfig {
                loss: AttackLoss::CwMargin,
                ..cfg.clone()
            },
        ),
    }
}

/// Clean and attacked accuracy over a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustEval {
    pub clean_accuracy: f64,
    /// Fraction correct both before and after the attack.
    pub robust_accuracy: f64,
    pub samples: usize,
}

impl RobustEval {
    /// Fraction of samples the attack turned from correct to wrong.
    pub fn success_rate(&self) -> f64 {
        self.clean_accuracy - self.robust_accuracy
    }
}

pub fn evaluate_robust_accuracy(
    model: &MlpModel,
    data: &Dataset,
    kind: AttackKind,
    cfg: &AttackConfig,
) -> Result<RobustEval> {
    if data.is_empty() {
        return Err(config_err!("cannot evaluate on an empty dataset"));
    }
    let x = data.features();
    let y = data.labels();
    let clean = model.predict(x)?;
    let adv = run_attack(kind, model, x, y, cfg)?;
    let attacked = model.predict(&adv)?;
    let robust = (0..y.len())
        .filter(|&i| clean[i] == y[i] && attacked[i] == y[i])
        .count();
    Ok(RobustEval {
        clean_accuracy: accuracy(&clean, y),
        robust_accuracy: robust as f64 / y.len() as f64,
        samples: y.len(),
    })
}
