//! Optimizer, training loops and checkpoints.

mod adam;
pub mod checkpoint;

pub use adam::Adam;

use crate::data::{add_noise, shuffled_batches, LabeledDataset, NoiseSpec};
use crate::error::{Error, Result};
use crate::nn::{marker, ArchitectureSpec, Model};
use crate::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub lr: f32,
    #[serde(default)]
    pub seed: u64,
    /// Print one line per epoch to stderr.
    #[serde(default)]
    pub verbose: bool,
}

fn default_batch() -> usize {
    128
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f32, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: default_batch(),
            lr,
            seed,
            verbose: false,
        }
    }
}

/// One epoch of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    /// Mean per-image L2 reconstruction error (autoencoders).
    pub e_r: Option<f64>,
    /// Mean cross-entropy (classifiers).
    pub e_c: Option<f64>,
    /// Accuracy on the training batches as they were seen (classifiers).
    pub clean_accuracy: Option<f64>,
    /// Mean optimization loss.
    pub loss: f64,
}

fn check_finite(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, batch, loss })
    }
}

fn check_input(model: &Model, data: &LabeledDataset) -> Result<()> {
    if model.spec().input_shape != data.image_shape() && !data.is_empty() {
        return Err(Error::Config(format!(
            "`{}` expects {:?} inputs, dataset has {:?}",
            model.spec().name,
            model.spec().input_shape,
            data.image_shape()
        )));
    }
    Ok(())
}

/// Minimizes cross-entropy of the pre-softmax logits over shuffled batches.
pub fn train_classifier(model: &mut Model, data: &LabeledDataset, cfg: &TrainConfig) -> Result<Vec<LossReport>> {
    check_input(model, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let logits_at = model.spec().boundary(marker::PRE_SOFTMAX)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, idx) in shuffled_batches(data.len(), cfg.batch_size, &mut rng).iter().enumerate() {
            let (x, y) = data.batch(idx);
            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let logits = model.forward_range(&bound, tape.constant(x), 0..logits_at)?;
            let loss = logits.cross_entropy(&y)?;
            let l = f64::from(loss.value().data()[0]);
            check_finite(l, epoch, b)?;
            loss_sum += l * idx.len() as f64;
            correct += logits.value().argmax_rows().iter().zip(&y).filter(|(p, t)| p == t).count();
            tape.backward(loss)?;
            let grads: Vec<Option<Tensor>> = bound.vars().iter().map(|v| v.grad()).collect();
            adam.step(model.params_mut(), &grads)?;
        }
        let n = data.len().max(1) as f64;
        let report = LossReport {
            epoch,
            e_r: None,
            e_c: Some(loss_sum / n),
            clean_accuracy: Some(correct as f64 / n),
            loss: loss_sum / n,
        };
        if cfg.verbose {
            eprintln!(
                "[{}] epoch {epoch}: loss {:.4} acc {:.4}",
                model.spec().name,
                report.loss,
                report.clean_accuracy.unwrap_or(0.0)
            );
        }
        history.push(report);
    }
    Ok(history)
}

/// Mean over images of `||a_i - b_i||_2`.
pub fn mean_l2_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mean_l2_distance", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.batch();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..n)
        .map(|i| {
            a.sample(i)
                .iter()
                .zip(b.sample(i))
                .map(|(x, y)| f64::from(x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

fn reconstruction_end(model: &Model) -> Result<usize> {
    let spec = model.spec();
    let end = spec.boundary(marker::DECODER_OUT).unwrap_or(spec.layers.len());
    let out = spec.shapes()?[end];
    if out.dims() != spec.input_shape {
        return Err(Error::shape(
            "train_dae",
            format!("autoencoder output {out} differs from input {:?}", spec.input_shape),
        ));
    }
    Ok(end)
}

/// Reconstructions `zeta(phi(x))`.
pub fn reconstruct(dae: &Model, x: &Tensor) -> Result<Tensor> {
    reconstruction_end(dae)?;
    let upto = dae.spec().boundary(marker::DECODER_OUT).ok().map(|_| marker::DECODER_OUT);
    dae.predict(x, upto, 256)
}

/// Held-out reconstruction error `E_R` of `dae` on noisy copies of `clean`.
pub fn reconstruction_error(dae: &Model, clean: &Tensor, noise: NoiseSpec, seed: u64) -> Result<f64> {
    let noisy = add_noise(clean, noise, seed);
    mean_l2_distance(&reconstruct(dae, &noisy)?, clean)
}

/// Trains an autoencoder so that `zeta(phi(x + noise))` matches clean `x`
/// (MSE objective; `E_R` reported as mean per-image L2 error).
pub fn train_dae(
    model: &mut Model,
    data: &LabeledDataset,
    noise: NoiseSpec,
    cfg: &TrainConfig,
) -> Result<Vec<LossReport>> {
    check_input(model, data)?;
    let end = reconstruction_end(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut er_sum) = (0.0f64, 0.0f64);
        for (b, idx) in shuffled_batches(data.len(), cfg.batch_size, &mut rng).iter().enumerate() {
            let (clean, _) = data.batch(idx);
            let noise_seed = cfg.seed ^ ((epoch as u64) << 32 | b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let noisy = add_noise(&clean, noise, noise_seed);
            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let out = model.forward_range(&bound, tape.constant(noisy), 0..end)?;
            let target = tape.constant(clean.clone());
            let diff = out.sub(target)?;
            let loss = diff.mul(diff)?.mean();
            let l = f64::from(loss.value().data()[0]);
            check_finite(l, epoch, b)?;
            loss_sum += l * idx.len() as f64;
            er_sum += mean_l2_distance(&out.value(), &clean)? * idx.len() as f64;
            tape.backward(loss)?;
            let grads: Vec<Option<Tensor>> = bound.vars().iter().map(|v| v.grad()).collect();
            adam.step(model.params_mut(), &grads)?;
        }
        let n = data.len().max(1) as f64;
        let report = LossReport {
            epoch,
            e_r: Some(er_sum / n),
            e_c: None,
            clean_accuracy: None,
            loss: loss_sum / n,
        };
        if cfg.verbose {
            eprintln!("[{}] epoch {epoch}: mse {:.5} E_R {:.4}", model.spec().name, report.loss, er_sum / n);
        }
        history.push(report);
    }
    Ok(history)
}

/// Serial CBC training: copies the trained encoder out of `dae`, freezes it,
/// and trains the rest of `cbc_spec` on clean samples.
///
/// `cbc_spec` must mark `encoder_out`; every layer before it must exist in
/// `dae` under the same name.
pub fn train_cbc(
    dae: &Model,
    cbc_spec: &ArchitectureSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<LossReport>)> {
    let mut model = Model::build(cbc_spec, cfg.seed)?;
    let enc_end = cbc_spec.boundary(marker::ENCODER_OUT)?;
    let encoder = Model::from_params(
        &cbc_spec.prefix("encoder", enc_end),
        dae.params()
            .iter()
            .filter(|p| cbc_spec.layers[..enc_end].iter().any(|l| p.name.starts_with(&format!("{}.", l.name))))
            .cloned()
            .collect(),
    )
    .map_err(|e| Error::Config(format!("encoder of `{}` not found in `{}`: {e}", cbc_spec.name, dae.spec().name)))?;
    model.copy_params_from(&encoder)?;
    model.set_frozen_before(enc_end, true);
    let before: Vec<Tensor> = frozen_values(&model);
    let digest = model.checksum(true);

    let history = train_classifier(&mut model, data, cfg)?;

    let after = frozen_values(&model);
    let names = model.params().iter().filter(|p| p.frozen).map(|p| &p.name);
    for ((b, a), name) in before.iter().zip(&after).zip(names) {
        let same = b.data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Err(Error::FreezeViolation(name.clone()));
        }
    }
    if model.checksum(true) != digest {
        return Err(Error::FreezeViolation("encoder checksum".into()));
    }
    Ok((model, history))
}

fn frozen_values(model: &Model) -> Vec<Tensor> {
    model.params().iter().filter(|p| p.frozen).map(|p| p.value.clone()).collect()
}

/// DAE-CNN: the autoencoder followed by the classifier, as one model.
pub fn compose_dae_cnn(dae: &Model, classifier: &Model) -> Result<Model> {
    let spec = dae.spec().then(&format!("{}+{}", dae.spec().name, classifier.spec().name), classifier.spec())?;
    let mut model = Model::build(&spec, 0)?;
    let copied = model.copy_params_from(dae)? + model.copy_params_from(classifier)?;
    debug_assert_eq!(copied, model.params().len());
    Ok(model)
}

/// Retrained DAE-CNN: continues training `classifier` on the DAE's
/// reconstructions of the clean training images.
pub fn retrain_on_reconstructions(
    dae: &Model,
    classifier: &mut Model,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Vec<LossReport>> {
    let refined = LabeledDataset {
        images: reconstruct(dae, &data.images)?,
        labels: data.labels.clone(),
        split: data.split,
    };
    train_classifier(classifier, &refined, cfg)
}

/// Fraction of `data` classified correctly.
pub fn accuracy(model: &Model, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = model.classify(&data.images, 256)?;
    Ok(pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count() as f64 / data.len() as f64)
}
