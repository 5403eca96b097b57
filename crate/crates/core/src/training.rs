//! Adversarial fine-tuning: per step, generate PGD adversaries against the
//! current target encoder, run three forward passes (target on adversarial,
//! target on clean, frozen original on clean), combine cross-entropy with the
//! two attention-alignment losses, and update the target encoder only.

use crate::attacks::{pgd_attack, AttackConfig};
use crate::attention::{build_attention_map, text_guided_attention, AttentionMap};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{
    build_forward, build_logits, DualModelState, ImageBatch, TextEmbeddings, VitEncoder, VitParams,
};
use ndarray::{Array2, ArrayD, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    L2,
    L1,
    Cosine,
}

/// Weights for the combined loss: ce + alpha * refinement + beta * constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub distance: DistanceMetric,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.08, beta: 0.05, distance: DistanceMetric::L2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub attack: AttackConfig,
    /// Also add a clean-sample cross-entropy term (off by default; the
    /// cross-entropy term is evaluated on adversarial examples only).
    pub include_clean_ce: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 5,
            seed: 0,
            attack: AttackConfig::default(),
            include_clean_ce: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        self.attack.validate()
    }
}

/// Mean over samples of -log softmax(logits)[label].
pub fn contrastive_ce_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let (n, k) = logits.dim();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} logit rows, {} labels", labels.len())));
    }
    let mut total = 0.0;
    for (row, &l) in logits.outer_iter().zip(labels) {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, num_classes: k });
        }
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.mapv(|v| (v - m).exp()).sum().ln();
        total += lse - row[l];
    }
    Ok(total / n as f64)
}

/// Per-sample distance between two attention map stacks.
pub fn map_distance(a: &AttentionMap, b: &AttentionMap, metric: DistanceMetric) -> Result<Vec<f64>> {
    if a.values.dim() != b.values.dim() {
        return Err(Error::ShapeMismatch(format!(
            "attention maps {:?} vs {:?}",
            a.values.dim(),
            b.values.dim()
        )));
    }
    Ok(a.values
        .outer_iter()
        .zip(b.values.outer_iter())
        .map(|(x, y)| match metric {
            DistanceMetric::L2 => x
                .iter()
                .zip(y.iter())
                .map(|(&u, &v)| (u - v) * (u - v))
                .sum::<f64>()
                .sqrt(),
            DistanceMetric::L1 => x.iter().zip(y.iter()).map(|(&u, &v)| (u - v).abs()).sum(),
            DistanceMetric::Cosine => {
                let nu = x.iter().map(|&v| v * v).sum::<f64>().sqrt();
                let nv = y.iter().map(|&v| v * v).sum::<f64>().sqrt();
                let tiny = 1e-12;
                if nu < tiny && nv < tiny {
                    0.0
                } else if nu < tiny || nv < tiny {
                    1.0
                } else {
                    let dot: f64 = x.iter().zip(y.iter()).map(|(&u, &v)| u * v).sum();
                    1.0 - dot / (nu * nv)
                }
            }
        })
        .collect())
}

/// L_total = ce + alpha * l_ar + beta * l_amc.
pub fn total_loss(ce: f64, l_ar: f64, l_amc: f64, w: &LossWeights) -> f64 {
    ce + w.alpha * l_ar + w.beta * l_amc
}

fn original_maps(state: &DualModelState, batch: &ImageBatch, out_hw: (usize, usize)) -> Result<AttentionMap> {
    let enc = crate::model::encode_image(&state.original, batch)?;
    let text_vecs = crate::attention::ground_truth_text_vectors(batch, &state.text)?;
    text_guided_attention(&enc.patches, &text_vecs, out_hw)
}

/// Attention refinement loss: mean distance between the target model's map on
/// adversarial inputs and the frozen original model's map on clean inputs.
pub fn attention_refinement_loss(
    state: &DualModelState,
    x_adv: &ImageBatch,
    x_clean: &ImageBatch,
    metric: DistanceMetric,
) -> Result<f64> {
    let out_hw = image_hw(x_clean);
    let tar = crate::model::encode_image(&state.target, x_adv)?;
    let text_vecs = crate::attention::ground_truth_text_vectors(x_adv, &state.text)?;
    let a_tar = text_guided_attention(&tar.patches, &text_vecs, out_hw)?;
    let a_ori = original_maps(state, x_clean, out_hw)?;
    let d = map_distance(&a_tar, &a_ori, metric)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Attention-based model constraint loss: same as the refinement loss but
/// with both maps computed on clean inputs.
pub fn model_constraint_loss(
    state: &DualModelState,
    x_clean: &ImageBatch,
    metric: DistanceMetric,
) -> Result<f64> {
    let out_hw = image_hw(x_clean);
    let tar = crate::model::encode_image(&state.target, x_clean)?;
    let text_vecs = crate::attention::ground_truth_text_vectors(x_clean, &state.text)?;
    let a_tar = text_guided_attention(&tar.patches, &text_vecs, out_hw)?;
    let a_ori = original_maps(state, x_clean, out_hw)?;
    let d = map_distance(&a_tar, &a_ori, metric)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

fn image_hw(batch: &ImageBatch) -> (usize, usize) {
    let s = batch.pixels.shape();
    (s[2], s[3])
}

/// Per-step loss values.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepMetrics {
    pub l_ce: f64,
    pub l_ar: f64,
    pub l_amc: f64,
    pub l_total: f64,
}

/// L_total over a batch with a fixed adversarial batch, plus the gradient on
/// every target-encoder parameter (visit order). The original encoder and
/// text embeddings enter only as constants.
pub fn total_loss_and_param_grads(
    state: &DualModelState,
    x_adv: &ImageBatch,
    x_clean: &ImageBatch,
    weights: &LossWeights,
    include_clean_ce: bool,
    want_grads: bool,
) -> Result<(StepMetrics, Vec<ArrayD<f64>>)> {
    let n = x_clean.len();
    if x_adv.len() != n {
        return Err(Error::ShapeMismatch("adversarial/clean batch size mismatch".into()));
    }
    let out_hw = image_hw(x_clean);
    let a_ori = original_maps(state, x_clean, out_hw)?;
    let text_vecs = crate::attention::ground_truth_text_vectors(x_clean, &state.text)?;
    let k = state.text.num_classes();
    for &l in &x_clean.labels {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, num_classes: k });
        }
    }

    struct SampleOut {
        ce: f64,
        ar: f64,
        amc: f64,
        grads: Option<Vec<ArrayD<f64>>>,
    }

    let per: Vec<SampleOut> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::new();
            let label = x_clean.labels[i];
            let tvec = text_vecs.row(i).to_owned();

            let h_adv = build_forward(&mut g, &state.target, x_adv.pixels.index_axis(Axis(0), i));
            let logits_adv = build_logits(&mut g, h_adv.pooled, &state.text, state.temperature);
            let mut ce = g.ce_loss(logits_adv, label);

            let h_clean = build_forward(&mut g, &state.target, x_clean.pixels.index_axis(Axis(0), i));
            if include_clean_ce {
                let logits_clean = build_logits(&mut g, h_clean.pooled, &state.text, state.temperature);
                let ce_clean = g.ce_loss(logits_clean, label);
                ce = g.weighted_sum(vec![(ce, 1.0), (ce_clean, 1.0)]);
            }

            let a_adv = build_attention_map(&mut g, h_adv.patches, &tvec, out_hw).unwrap();
            let a_cln = build_attention_map(&mut g, h_clean.patches, &tvec, out_hw).unwrap();
            let ori_leaf = g.leaf(a_ori.values.index_axis(Axis(0), i).to_owned().into_dyn());
            let (ar, amc) = match weights.distance {
                DistanceMetric::L2 => (g.l2_dist(a_adv, ori_leaf), g.l2_dist(a_cln, ori_leaf)),
                DistanceMetric::L1 => (g.l1_dist(a_adv, ori_leaf), g.l1_dist(a_cln, ori_leaf)),
                DistanceMetric::Cosine => (g.cos_dist(a_adv, ori_leaf), g.cos_dist(a_cln, ori_leaf)),
            };
            let total = g.weighted_sum(vec![(ce, 1.0), (ar, weights.alpha), (amc, weights.beta)]);

            let grads = if want_grads {
                let gr = g.backward(total);
                let mut out: Vec<ArrayD<f64>> = Vec::with_capacity(h_adv.param_ids.len());
                for (pa, pc) in h_adv.param_ids.iter().zip(h_clean.param_ids.iter()) {
                    let shape = g.value(*pa).raw_dim();
                    let mut acc = ArrayD::zeros(shape);
                    if let Some(ga) = &gr[pa.0] {
                        acc += ga;
                    }
                    if let Some(gc) = &gr[pc.0] {
                        acc += gc;
                    }
                    out.push(acc);
                }
                Some(out)
            } else {
                None
            };
            SampleOut { ce: g.scalar(ce), ar: g.scalar(ar), amc: g.scalar(amc), grads }
        })
        .collect();

    let nf = n as f64;
    let l_ce = per.iter().map(|s| s.ce).sum::<f64>() / nf;
    let l_ar = per.iter().map(|s| s.ar).sum::<f64>() / nf;
    let l_amc = per.iter().map(|s| s.amc).sum::<f64>() / nf;
    let metrics = StepMetrics { l_ce, l_ar, l_amc, l_total: total_loss(l_ce, l_ar, l_amc, weights) };

    let mut grads: Vec<ArrayD<f64>> = Vec::new();
    if want_grads {
        for s in &per {
            let sg = s.grads.as_ref().unwrap();
            if grads.is_empty() {
                grads = sg.iter().map(|g| g / nf).collect();
            } else {
                for (acc, g) in grads.iter_mut().zip(sg.iter()) {
                    *acc += &(g / nf);
                }
            }
        }
    }
    Ok((metrics, grads))
}

/// SGD with momentum and optional weight decay over the target parameters.
pub struct SgdOptimizer {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl SgdOptimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut VitParams, grads: &[ArrayD<f64>]) {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
        }
        let mut idx = 0;
        let (mu, lr, wd) = (self.momentum, self.learning_rate, self.weight_decay);
        let velocity = &mut self.velocity;
        params.visit_mut(|_, p| {
            let g = if wd != 0.0 { &grads[idx] + &(&*p * wd) } else { grads[idx].clone() };
            let v = &mut velocity[idx];
            *v *= mu;
            *v += &g;
            *p -= &(&*v * lr);
            idx += 1;
        });
    }
}

/// One fine-tuning step: regenerate adversaries against the current target,
/// compute the combined loss, and update target parameters only.
pub fn finetune_step(
    state: &mut DualModelState,
    batch: &ImageBatch,
    cfg: &TrainConfig,
    weights: &LossWeights,
    opt: &mut SgdOptimizer,
    step: usize,
) -> Result<StepMetrics> {
    cfg.validate()?;
    let x_adv = pgd_attack(&state.target, batch, &state.text, state.temperature, &cfg.attack)?;
    let (metrics, grads) =
        total_loss_and_param_grads(state, &x_adv, batch, weights, cfg.include_clean_ce, true)?;
    if !metrics.l_total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            ce: metrics.l_ce,
            l_ar: metrics.l_ar,
            l_amc: metrics.l_amc,
        });
    }
    opt.step(&mut state.target.params, &grads);
    Ok(metrics)
}

/// Per-epoch log entry, one JSON object per line in training_log.jsonl.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_ar: f64,
    pub l_amc: f64,
    pub l_total: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e).unwrap());
            s.push('\n');
        }
        s
    }
}

/// Full fine-tuning loop: deterministic under the seed, per-epoch metrics,
/// and an optional per-epoch checkpoint of the target encoder.
pub fn finetune(
    state: &mut DualModelState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    weights: &LossWeights,
    ckpt_dir: Option<&std::path::Path>,
) -> Result<TrainingLog> {
    cfg.validate()?;
    let mut opt = SgdOptimizer::new(cfg);
    let mut log = TrainingLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut count = 0usize;
        for batch in batches(dataset, cfg.batch_size, cfg.seed.wrapping_add(epoch as u64), true)? {
            let m = finetune_step(state, &batch, cfg, weights, &mut opt, step)?;
            sums.0 += m.l_ce;
            sums.1 += m.l_ar;
            sums.2 += m.l_amc;
            sums.3 += m.l_total;
            count += 1;
            step += 1;
        }
        let nf = count as f64;
        let clean_acc = crate::evaluation::zero_shot_accuracy(
            &state.target,
            dataset,
            &state.text,
            state.temperature,
        )?;
        let robust_acc = crate::evaluation::robust_accuracy(
            &state.target,
            dataset,
            &state.text,
            state.temperature,
            &cfg.attack,
        )?;
        log.epochs.push(EpochLog {
            epoch,
            l_ce: sums.0 / nf,
            l_ar: sums.1 / nf,
            l_amc: sums.2 / nf,
            l_total: sums.3 / nf,
            clean_acc,
            robust_acc,
        });
        if let Some(dir) = ckpt_dir {
            state.target.save(&dir.join(format!("epoch{epoch:04}")))?;
        }
    }
    Ok(log)
}

/// Plain supervised training on clean images, used to produce the
/// "original" encoder that fine-tuning starts from and is anchored to.
pub fn train_clean(
    encoder: &mut VitEncoder,
    text: &TextEmbeddings,
    temperature: f64,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut opt = SgdOptimizer::new(cfg);
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in batches(dataset, cfg.batch_size, cfg.seed.wrapping_add(epoch as u64), true)? {
            let n = batch.len();
            let per: Vec<(f64, Vec<ArrayD<f64>>)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut g = Graph::new();
                    let h = build_forward(&mut g, encoder, batch.pixels.index_axis(Axis(0), i));
                    let logits = build_logits(&mut g, h.pooled, text, temperature);
                    let ce = g.ce_loss(logits, batch.labels[i]);
                    let gr = g.backward(ce);
                    let grads = h
                        .param_ids
                        .iter()
                        .map(|p| {
                            gr[p.0]
                                .clone()
                                .unwrap_or_else(|| ArrayD::zeros(g.value(*p).raw_dim()))
                        })
                        .collect();
                    (g.scalar(ce), grads)
                })
                .collect();
            let nf = n as f64;
            let loss = per.iter().map(|(l, _)| l).sum::<f64>() / nf;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: epoch, ce: loss, l_ar: 0.0, l_amc: 0.0 });
            }
            let mut grads: Vec<ArrayD<f64>> = per[0].1.iter().map(|g| g / nf).collect();
            for (_, sg) in per.iter().skip(1) {
                for (acc, g) in grads.iter_mut().zip(sg.iter()) {
                    *acc += &(g / nf);
                }
            }
            opt.step(&mut encoder.params, &grads);
            sum += loss;
            count += 1;
        }
        losses.push(sum / count as f64);
    }
    Ok(losses)
}
