//! Gradient-based adversarial attacks: FGSM, BIM, MIM, DeepFool and
//! Carlini-Wagner L2.

mod cw;
mod deepfool;
mod iterative;

pub use cw::{cw_l2, cw_l2_traced};
pub use deepfool::{deepfool, deepfool_step, DeepFoolStep};
pub use iterative::{bim, fgsm, mim};

use crate::error::{Error, Result};
use crate::nn::{marker, Model};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Anything that maps a batch of images to pre-softmax logits on a tape.
pub trait Classifier<T: Scalar> {
    fn logits<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>>;

    fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let tape = Tape::new();
        Ok(self.logits(&tape, tape.constant(x.clone()))?.value().argmax_rows())
    }
}

impl<T: Scalar> Classifier<T> for Model<T> {
    fn logits<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward(tape, x, Some(marker::PRE_SOFTMAX))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Bim,
    Mim,
    DeepFool,
    Cw,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Mim => "mim",
            AttackKind::DeepFool => "deepfool",
            AttackKind::Cw => "cw",
        }
    }
}

/// Per-attack hyperparameters. Magnitudes are in pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Per-step magnitude for FGSM/BIM/MIM.
    pub epsilon: f64,
    pub iterations: usize,
    pub mu: f64,
    /// Optional L-infinity radius around the original for BIM/MIM (off by default).
    pub ball: Option<f64>,
    pub cw_c: f64,
    pub kappa: f64,
    pub target_class: Option<usize>,
    pub cw_steps: usize,
    pub cw_lr: f64,
    /// Binary-search rounds over `c` (0 = single fixed `c`).
    pub cw_search_steps: usize,
    pub overshoot: f64,
    pub max_iter_deepfool: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 0.1,
            iterations: 5,
            mu: 1.0,
            ball: None,
            cw_c: 1.0,
            kappa: 0.0,
            target_class: None,
            cw_steps: 100,
            cw_lr: 0.01,
            cw_search_steps: 0,
            overshoot: 0.02,
            max_iter_deepfool: 50,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("epsilon", self.epsilon),
            ("mu", self.mu),
            ("kappa", self.kappa),
            ("cw_lr", self.cw_lr),
            ("overshoot", self.overshoot),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("attack `{name}` must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.cw_c > 0.0) {
            return Err(Error::Config(format!("attack `cw_c` must be > 0, got {}", self.cw_c)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("attack `iterations` must be >= 1".into()));
        }
        if matches!(self.target_class, Some(t) if t > 9) {
            return Err(Error::Config("attack `target_class` must be in 0..=9".into()));
        }
        if matches!(self.ball, Some(r) if !(r >= 0.0)) {
            return Err(Error::Config("attack `ball` must be >= 0".into()));
        }
        Ok(())
    }
}

/// Originals, their adversarial versions and which attacks succeeded.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch<T: Scalar = f32> {
    pub originals: Tensor<T>,
    pub adversarials: Tensor<T>,
    pub labels: Vec<usize>,
    /// Model predictions on the adversarials.
    pub predictions: Vec<usize>,
    /// `prediction != label`.
    pub success_mask: Vec<bool>,
}

impl<T: Scalar> AdversarialBatch<T> {
    pub(crate) fn finish<M: Classifier<T>>(
        model: &M,
        originals: &Tensor<T>,
        adversarials: Tensor<T>,
        labels: &[usize],
    ) -> Result<Self> {
        let predictions = model.predict(&adversarials)?;
        let success_mask = predictions.iter().zip(labels).map(|(p, y)| p != y).collect();
        Ok(AdversarialBatch {
            originals: originals.clone(),
            adversarials,
            labels: labels.to_vec(),
            predictions,
            success_mask,
        })
    }

    /// Fraction of adversarials still classified correctly.
    pub fn accuracy(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.success_mask.iter().filter(|s| !**s).count() as f64 / self.labels.len() as f64
    }
}

/// Runs `kind` with `cfg` on one batch.
pub fn run_attack<T: Scalar, M: Classifier<T>>(
    model: &M,
    x: &Tensor<T>,
    y: &[usize],
    kind: AttackKind,
    cfg: &AttackConfig,
) -> Result<AdversarialBatch<T>> {
    cfg.validate()?;
    let eps = T::lit(cfg.epsilon);
    match kind {
        AttackKind::Fgsm => fgsm(model, x, y, eps),
        AttackKind::Bim => iterative::bim_with_ball(model, x, y, eps, cfg.iterations, cfg.ball.map(T::lit)),
        AttackKind::Mim => {
            iterative::mim_with_ball(model, x, y, eps, cfg.iterations, T::lit(cfg.mu), cfg.ball.map(T::lit))
        }
        AttackKind::DeepFool => deepfool(model, x, Some(y), cfg.max_iter_deepfool, T::lit(cfg.overshoot)),
        AttackKind::Cw => cw_l2(model, x, y, cfg),
    }
}

/// `grad_x sum_i CE(model(x_i), y_i)`: per-sample loss gradients.
pub(crate) fn loss_gradient<T: Scalar, M: Classifier<T>>(model: &M, x: &Tensor<T>, y: &[usize]) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let z = model.logits(&tape, xv)?;
    let loss = z.cross_entropy(y)?.scale(T::lit(y.len().max(1) as f64));
    tape.backward(loss)?;
    Ok(xv.grad().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
}

pub(crate) fn check_batch<T: Scalar>(x: &Tensor<T>, y: &[usize]) -> Result<()> {
    if x.shape().is_empty() || x.batch() != y.len() {
        return Err(Error::shape("attack", format!("{} labels for input {:?}", y.len(), x.shape())));
    }
    Ok(())
}
