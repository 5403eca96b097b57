//! Text-guided attention maps (patch features dotted with the ground-truth
//! class embedding, reshaped, bilinearly resized, min-max normalized) and a
//! gradient-based (Grad-CAM style) alternative used in ablations.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{build_forward, build_logits, ImageBatch, TextEmbeddings, VitEncoder};
use ndarray::{Array1, Array2, Array3, Axis};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionSource {
    TextGuided,
    GradientBased,
}

/// Per-sample H x W attention maps, values in [0,1].
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub values: Array3<f64>,
    pub source: AttentionSource,
}

fn check_out_hw(out_hw: (usize, usize)) -> Result<()> {
    if out_hw.0 == 0 || out_hw.1 == 0 {
        return Err(Error::InvalidConfig("attention output size must be >= 1".into()));
    }
    Ok(())
}

fn square_side(p: usize) -> Result<usize> {
    let s = (p as f64).sqrt().round() as usize;
    if s * s != p {
        return Err(Error::ShapeMismatch(format!("patch count {p} is not a perfect square")));
    }
    Ok(s)
}

/// Append one sample's attention pipeline to a graph: dot with the class
/// embedding, reshape to the square grid, resize, min-max normalize.
/// Differentiable with respect to `patches` end to end.
pub fn build_attention_map(
    g: &mut Graph,
    patches: NodeId,
    text_vec: &Array1<f64>,
    out_hw: (usize, usize),
) -> Result<NodeId> {
    check_out_hw(out_hw)?;
    let p = g.value(patches).shape()[0];
    let side = square_side(p)?;
    let t = g.leaf(text_vec.clone().into_dyn());
    let raw = g.dot_rows_vec(patches, t);
    let grid = g.reshape(raw, &[side, side]);
    let resized = g.bilinear_resize(grid, out_hw.0, out_hw.1);
    Ok(g.minmax_norm(resized))
}

/// Text-guided attention for a batch; `text_vec_per_sample` row i is the
/// embedding of sample i's ground-truth class.
pub fn text_guided_attention(
    patches: &Array3<f64>,
    text_vec_per_sample: &Array2<f64>,
    out_hw: (usize, usize),
) -> Result<AttentionMap> {
    check_out_hw(out_hw)?;
    let (n, p, d) = patches.dim();
    square_side(p)?;
    if text_vec_per_sample.dim() != (n, d) {
        return Err(Error::ShapeMismatch(format!(
            "text vectors {:?} vs patches {:?}",
            text_vec_per_sample.dim(),
            patches.dim()
        )));
    }
    let maps: Result<Vec<Array2<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::new();
            let pn = g.leaf(patches.index_axis(Axis(0), i).to_owned().into_dyn());
            let m = build_attention_map(&mut g, pn, &text_vec_per_sample.row(i).to_owned(), out_hw)?;
            Ok(g.value(m).clone().into_dimensionality().unwrap())
        })
        .collect();
    let maps = maps?;
    let mut values = Array3::zeros((n, out_hw.0, out_hw.1));
    for (i, m) in maps.into_iter().enumerate() {
        values.index_axis_mut(Axis(0), i).assign(&m);
    }
    Ok(AttentionMap { values, source: AttentionSource::TextGuided })
}

/// Convenience: per-sample ground-truth class embeddings for a batch.
pub fn ground_truth_text_vectors(batch: &ImageBatch, text: &TextEmbeddings) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((batch.len(), text.dim()));
    for (i, &l) in batch.labels.iter().enumerate() {
        if l >= text.num_classes() {
            return Err(Error::LabelOutOfRange { label: l, num_classes: text.num_classes() });
        }
        out.row_mut(i).assign(&text.vectors.row(l));
    }
    Ok(out)
}

/// Grad-CAM over patch tokens: channel weights are the patch-mean of the
/// ground-truth logit's gradient on the final patch activations; the map is
/// the positive part of the weighted activation sum, then reshaped, resized,
/// and normalized exactly like the text-guided map.
pub fn gradient_attention(
    encoder: &VitEncoder,
    batch: &ImageBatch,
    text: &TextEmbeddings,
    temperature: f64,
    out_hw: (usize, usize),
) -> Result<AttentionMap> {
    check_out_hw(out_hw)?;
    let shape = batch.pixels.shape();
    encoder.check_input(shape[2], shape[3])?;
    let k = text.num_classes();
    for &l in &batch.labels {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, num_classes: k });
        }
    }
    let n = batch.len();
    let maps: Vec<Array2<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::new();
            let h = build_forward(&mut g, encoder, batch.pixels.index_axis(Axis(0), i));
            let logits = build_logits(&mut g, h.pooled, text, temperature);
            let mut onehot = Array1::zeros(k);
            onehot[batch.labels[i]] = 1.0;
            let row = g.reshape(logits, &[1, k]);
            let oh = g.leaf(onehot.into_dyn());
            let sel = g.dot_rows_vec(row, oh);
            let gt_logit = g.sum_all(sel);
            let grads = g.backward(gt_logit);
            let act: Array2<f64> = g.value(h.patches).clone().into_dimensionality().unwrap();
            let grad: Array2<f64> = grads[h.patches.0]
                .clone()
                .map(|a| a.into_dimensionality().unwrap())
                .unwrap_or_else(|| Array2::zeros(act.dim()));
            let weights = grad.mean_axis(Axis(0)).unwrap();
            let cam: Array1<f64> = act.dot(&weights).mapv(|v| v.max(0.0));
            let side = square_side(cam.len()).expect("square patch grid");
            let grid = cam.into_shape((side, side)).unwrap();
            let resized = crate::graph::bilinear_resize(&grid, out_hw.0, out_hw.1);
            minmax_norm(&resized)
        })
        .collect();
    let mut values = Array3::zeros((n, out_hw.0, out_hw.1));
    for (i, m) in maps.into_iter().enumerate() {
        values.index_axis_mut(Axis(0), i).assign(&m);
    }
    Ok(AttentionMap { values, source: AttentionSource::GradientBased })
}

/// Min-max normalization matching the graph op: constant maps go to zeros.
pub fn minmax_norm(a: &Array2<f64>) -> Array2<f64> {
    let lo = a.fold(f64::INFINITY, |acc, &v| acc.min(v));
    let hi = a.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
    if hi - lo < 1e-12 {
        Array2::zeros(a.dim())
    } else {
        a.mapv(|v| (v - lo) / (hi - lo))
    }
}
