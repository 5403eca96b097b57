//! l-infinity bounded adversarial example generation: PGD with cross-entropy
//! loss and a ball-constrained margin (CW-style) variant. Gradients are taken
//! with respect to pixels only; encoder parameters stay fixed.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{build_forward, build_logits, ImageBatch, TextEmbeddings, VitEncoder};
use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    CwMargin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// l-infinity radius in pixel units, e.g. 1/255.
    pub epsilon: f64,
    /// Step size in pixel units; the training recipe uses step = epsilon.
    pub step_size: f64,
    pub iterations: usize,
    pub random_init: bool,
    pub loss_kind: LossKind,
    /// Margin for the CW loss.
    pub kappa: f64,
    /// Seed for the random start (only used when random_init is set).
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0 / 255.0,
            step_size: 1.0 / 255.0,
            iterations: 2,
            random_init: false,
            loss_kind: LossKind::CrossEntropy,
            kappa: 0.0,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 || self.step_size <= 0.0 {
            return Err(Error::InvalidConfig("epsilon and step_size must be > 0".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.kappa < 0.0 {
            return Err(Error::InvalidConfig("kappa must be >= 0".into()));
        }
        Ok(())
    }
}

/// sign with sign(0) = 0, unlike f64::signum.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn attack_one(
    encoder: &VitEncoder,
    x0: &Array3<f64>,
    label: usize,
    text: &TextEmbeddings,
    temperature: f64,
    cfg: &AttackConfig,
    sample_seed: u64,
) -> Array3<f64> {
    let mut x = x0.clone();
    if cfg.random_init {
        let mut rng = ChaCha20Rng::seed_from_u64(sample_seed);
        x.mapv_inplace(|v| v); // keep layout
        for (v, &orig) in x.iter_mut().zip(x0.iter()) {
            let delta = rng.gen_range(-cfg.epsilon..=cfg.epsilon);
            *v = (orig + delta).clamp(0.0, 1.0);
        }
    }
    for _ in 0..cfg.iterations {
        let mut g = Graph::new();
        let h = build_forward(&mut g, encoder, x.view());
        let logits = build_logits(&mut g, h.pooled, text, temperature);
        let loss = match cfg.loss_kind {
            LossKind::CrossEntropy => g.ce_loss(logits, label),
            LossKind::CwMargin => g.cw_margin(logits, label, cfg.kappa),
        };
        let grads = g.backward(loss);
        if let Some(gx) = &grads[h.pixels.0] {
            let gx: Array3<f64> = gx.clone().into_dimensionality().unwrap();
            step_and_project(&mut x, x0, &gx, cfg.step_size, cfg.epsilon);
        }
    }
    x
}

/// One ascent step x += step * sign(grad), then projection onto the
/// epsilon ball around `x0` intersected with [0,1].
fn step_and_project(x: &mut Array3<f64>, x0: &Array3<f64>, grad: &Array3<f64>, step: f64, eps: f64) {
    for ((v, &orig), &gv) in x.iter_mut().zip(x0.iter()).zip(grad.iter()) {
        *v = (*v + step * sign(gv))
            .clamp(orig - eps, orig + eps)
            .clamp(0.0, 1.0);
    }
}

/// Attack dispatching on `cfg.loss_kind`; per-sample iterates run in
/// parallel and reassemble in input order.
pub fn run_attack(
    encoder: &VitEncoder,
    batch: &ImageBatch,
    text: &TextEmbeddings,
    temperature: f64,
    cfg: &AttackConfig,
) -> Result<ImageBatch> {
    cfg.validate()?;
    let shape = batch.pixels.shape();
    encoder.check_input(shape[2], shape[3])?;
    for &l in &batch.labels {
        if l >= text.num_classes() {
            return Err(Error::LabelOutOfRange { label: l, num_classes: text.num_classes() });
        }
    }
    let adv: Vec<Array3<f64>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            attack_one(
                encoder,
                &batch.pixels.index_axis(Axis(0), i).to_owned(),
                batch.labels[i],
                text,
                temperature,
                cfg,
                cfg.seed.wrapping_add(i as u64),
            )
        })
        .collect();
    let mut pixels = batch.pixels.clone();
    for (i, a) in adv.into_iter().enumerate() {
        pixels.index_axis_mut(Axis(0), i).assign(&a);
    }
    Ok(ImageBatch { pixels, labels: batch.labels.clone() })
}

/// PGD-k with cross-entropy loss: x <- clamp(x + step * sign(grad)) projected
/// onto the epsilon ball around the input and [0,1].
pub fn pgd_attack(
    encoder: &VitEncoder,
    batch: &ImageBatch,
    text: &TextEmbeddings,
    temperature: f64,
    cfg: &AttackConfig,
) -> Result<ImageBatch> {
    if cfg.loss_kind != LossKind::CrossEntropy {
        return Err(Error::InvalidConfig("pgd_attack requires loss_kind = cross_entropy".into()));
    }
    run_attack(encoder, batch, text, temperature, cfg)
}

/// Ball-constrained CW variant: PGD iterations maximizing
/// max(max_{k != y} z_k - z_y, -kappa) under the same projection.
pub fn cw_attack(
    encoder: &VitEncoder,
    batch: &ImageBatch,
    text: &TextEmbeddings,
    temperature: f64,
    cfg: &AttackConfig,
) -> Result<ImageBatch> {
    if cfg.loss_kind != LossKind::CwMargin {
        return Err(Error::InvalidConfig("cw_attack requires loss_kind = cw_margin".into()));
    }
    run_attack(encoder, batch, text, temperature, cfg)
}

/// Per-sample l-infinity perturbation magnitudes.
pub fn linf_distances(clean: &ImageBatch, adv: &ImageBatch) -> Vec<f64> {
    clean
        .pixels
        .outer_iter()
        .zip(adv.pixels.outer_iter())
        .map(|(c, a)| {
            c.iter()
                .zip(a.iter())
                .map(|(&x, &y)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .collect()
}
