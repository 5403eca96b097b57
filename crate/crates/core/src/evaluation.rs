//! Zero-shot clean/robust accuracy, attack-strength sweeps, attention-shift
//! quantification, and trade-off report data.

use crate::attacks::{pgd_attack, run_attack, AttackConfig};
use crate::attention::text_guided_attention;
use crate::data::{batches, Dataset};
use crate::error::Result;
use crate::model::{classification_logits, encode_image, TextEmbeddings, VitEncoder};
use crate::training::{map_distance, DistanceMetric};
use serde::{Deserialize, Serialize};

const EVAL_BATCH: usize = 64;

/// Row argmax with ties broken toward the lowest class index.
pub fn argmax_row(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Fraction of samples whose argmax logit equals the label.
pub fn zero_shot_accuracy(
    encoder: &VitEncoder,
    dataset: &Dataset,
    text: &TextEmbeddings,
    temperature: f64,
) -> Result<f64> {
    let mut correct = 0usize;
    for batch in batches(dataset, EVAL_BATCH, 0, false)? {
        let enc = encode_image(encoder, &batch)?;
        let logits = classification_logits(&enc.pooled, text, temperature)?;
        for (row, &label) in logits.outer_iter().zip(&batch.labels) {
            if argmax_row(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Accuracy on white-box attacked images; attacks are generated against the
/// evaluated encoder itself unless a separate attack source is supplied.
pub fn robust_accuracy(
    encoder: &VitEncoder,
    dataset: &Dataset,
    text: &TextEmbeddings,
    temperature: f64,
    attack_cfg: &AttackConfig,
) -> Result<f64> {
    robust_accuracy_from(encoder, encoder, dataset, text, temperature, attack_cfg)
}

/// Transfer variant: adversaries crafted against `attack_source`, accuracy
/// measured on `encoder`.
pub fn robust_accuracy_from(
    attack_source: &VitEncoder,
    encoder: &VitEncoder,
    dataset: &Dataset,
    text: &TextEmbeddings,
    temperature: f64,
    attack_cfg: &AttackConfig,
) -> Result<f64> {
    attack_cfg.validate()?;
    let mut correct = 0usize;
    for batch in batches(dataset, EVAL_BATCH, 0, false)? {
        let adv = run_attack(attack_source, &batch, text, temperature, attack_cfg)?;
        let enc = encode_image(encoder, &adv)?;
        let logits = classification_logits(&enc.pooled, text, temperature)?;
        for (row, &label) in logits.outer_iter().zip(&adv.labels) {
            if argmax_row(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub dataset_id: String,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub attack: AttackConfig,
}

/// Per-dataset accuracies plus their arithmetic means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: Vec<DatasetEntry>,
    pub average_clean: f64,
    pub average_robust: f64,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_entries(entries: Vec<DatasetEntry>, config_hash: String, seed: u64) -> Self {
        let n = entries.len().max(1) as f64;
        let average_clean = entries.iter().map(|e| e.clean_acc).sum::<f64>() / n;
        let average_robust = entries.iter().map(|e| e.robust_acc).sum::<f64>() / n;
        Self { entries, average_clean, average_robust, config_hash, seed }
    }
}

/// Evaluate one encoder over several named datasets.
pub fn evaluate_datasets(
    encoder: &VitEncoder,
    datasets: &[(String, Dataset)],
    text: &TextEmbeddings,
    temperature: f64,
    attack_cfg: &AttackConfig,
    config_hash: String,
    seed: u64,
) -> Result<EvalReport> {
    let mut entries = Vec::new();
    for (id, ds) in datasets {
        entries.push(DatasetEntry {
            dataset_id: id.clone(),
            clean_acc: zero_shot_accuracy(encoder, ds, text, temperature)?,
            robust_acc: robust_accuracy(encoder, ds, text, temperature, attack_cfg)?,
            attack: *attack_cfg,
        });
    }
    Ok(EvalReport::from_entries(entries, config_hash, seed))
}

/// Robust accuracy across a list of attack strengths on one dataset.
pub fn strength_sweep(
    encoder: &VitEncoder,
    dataset_id: &str,
    dataset: &Dataset,
    text: &TextEmbeddings,
    temperature: f64,
    base: &AttackConfig,
    eps_list: &[f64],
    config_hash: String,
    seed: u64,
) -> Result<EvalReport> {
    let clean = zero_shot_accuracy(encoder, dataset, text, temperature)?;
    let mut entries = Vec::new();
    for &eps in eps_list {
        let cfg = AttackConfig { epsilon: eps, ..*base };
        entries.push(DatasetEntry {
            dataset_id: format!("{dataset_id}:eps={eps:.6}"),
            clean_acc: clean,
            robust_acc: robust_accuracy(encoder, dataset, text, temperature, &cfg)?,
            attack: cfg,
        });
    }
    Ok(EvalReport::from_entries(entries, config_hash, seed))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftSample {
    pub d_adv: f64,
    pub d_noise: f64,
}

/// Per-sample attention displacement under attack vs matched-magnitude
/// random sign noise, with their means. Reporting only; asserts nothing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftReport {
    pub samples: Vec<ShiftSample>,
    pub mean_d_adv: f64,
    pub mean_d_noise: f64,
}

pub fn attention_shift_report(
    encoder: &VitEncoder,
    dataset: &Dataset,
    text: &TextEmbeddings,
    temperature: f64,
    attack_cfg: &AttackConfig,
    n: usize,
    noise_seed: u64,
) -> Result<ShiftReport> {
    use rand::{Rng, SeedableRng};
    let n = n.min(dataset.len());
    let batch = dataset.head_batch(n)?;
    let out_hw = dataset.image_hw();
    let text_vecs = crate::attention::ground_truth_text_vectors(&batch, text)?;

    let clean_maps = {
        let enc = encode_image(encoder, &batch)?;
        text_guided_attention(&enc.patches, &text_vecs, out_hw)?
    };
    let adv = pgd_attack(encoder, &batch, text, temperature, attack_cfg)?;
    let adv_maps = {
        let enc = encode_image(encoder, &adv)?;
        text_guided_attention(&enc.patches, &text_vecs, out_hw)?
    };
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(noise_seed);
    let mut noisy = batch.clone();
    for v in noisy.pixels.iter_mut() {
        let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        *v = (*v + s * attack_cfg.epsilon).clamp(0.0, 1.0);
    }
    let noise_maps = {
        let enc = encode_image(encoder, &noisy)?;
        text_guided_attention(&enc.patches, &text_vecs, out_hw)?
    };
    let d_adv = map_distance(&clean_maps, &adv_maps, DistanceMetric::L2)?;
    let d_noise = map_distance(&clean_maps, &noise_maps, DistanceMetric::L2)?;
    let samples: Vec<ShiftSample> = d_adv
        .iter()
        .zip(d_noise.iter())
        .map(|(&a, &b)| ShiftSample { d_adv: a, d_noise: b })
        .collect();
    let nf = samples.len() as f64;
    Ok(ShiftReport {
        mean_d_adv: d_adv.iter().sum::<f64>() / nf,
        mean_d_noise: d_noise.iter().sum::<f64>() / nf,
        samples,
    })
}

/// (method, clean, robust, mean) rows rendered as CSV.
pub fn tradeoff_table(rows: &[(String, f64, f64)]) -> String {
    let mut s = String::from("method,clean_acc,robust_acc,mean\n");
    for (m, clean, robust) in rows {
        s.push_str(&format!("{m},{clean:.6},{robust:.6},{:.6}\n", (clean + robust) / 2.0));
    }
    s
}
