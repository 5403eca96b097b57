//! Dual-encoder model: a miniature ViT image encoder (pooled + patch-level
//! outputs), frozen text embeddings, and temperature-scaled cosine-similarity
//! classification.

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView3, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const UNIT_NORM_TOL: f64 = 1e-6;

/// N images in [0,1] with integer class labels.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Array4<f64>,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f64>, labels: Vec<usize>) -> Result<Self> {
        let n = pixels.shape()[0];
        if n == 0 {
            return Err(Error::EmptyDataset("batch with zero images".into()));
        }
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} images but {} labels",
                n,
                labels.len()
            )));
        }
        if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidConfig("pixel values outside [0,1]".into()));
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// K frozen unit-norm class-prompt embeddings.
#[derive(Debug, Clone)]
pub struct TextEmbeddings {
    pub vectors: Array2<f64>,
    pub class_names: Vec<String>,
    pub template: String,
}

fn l2_normalize_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.outer_iter_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    m
}

impl TextEmbeddings {
    /// Deterministic synthetic embeddings: seeded Gaussian rows, l2-normalized.
    pub fn synthetic(class_names: &[String], template: &str, dim: usize, seed: u64) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let m = Array2::from_shape_fn((class_names.len(), dim), |_| normal.sample(&mut rng));
        Ok(Self {
            vectors: l2_normalize_rows(m),
            class_names: class_names.to_vec(),
            template: template.to_string(),
        })
    }

    /// Load precomputed prompt embeddings from a tensor archive; tensors are
    /// keyed `text/<class_name>`.
    pub fn from_archive(archive: &TensorArchive, class_names: &[String], template: &str) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        let mut rows: Vec<Array1<f64>> = Vec::with_capacity(class_names.len());
        for name in class_names {
            let key = format!("text/{name}");
            let t = archive
                .get(&key)
                .ok_or_else(|| Error::MissingClass(name.clone()))?;
            rows.push(
                t.clone()
                    .into_dimensionality()
                    .map_err(|_| Error::ShapeMismatch(format!("text embedding {name} not rank-1")))?,
            );
        }
        let dim = rows[0].len();
        let mut m = Array2::zeros((rows.len(), dim));
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::ShapeMismatch("ragged text embeddings".into()));
            }
            m.row_mut(i).assign(r);
        }
        Ok(Self {
            vectors: l2_normalize_rows(m),
            class_names: class_names.to_vec(),
            template: template.to_string(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }
}

/// Pooled embedding f(x) plus pre-pooling patch feature grid f_g(x).
#[derive(Debug, Clone)]
pub struct ImageEncoding {
    /// N x d, rows unit-normalized.
    pub pooled: Array2<f64>,
    /// N x P x d patch tokens, class token excluded.
    pub patches: Array3<f64>,
}

/// Miniature ViT hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Output embedding dimension (shared with the text side).
    pub embed_dim: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self { image_size: 32, patch: 4, dim: 64, depth: 2, heads: 4, mlp_ratio: 4, embed_dim: 64 }
    }
}

impl VitConfig {
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: ArrayD<f64>,
    pub ln1_b: ArrayD<f64>,
    pub wq: ArrayD<f64>,
    pub bq: ArrayD<f64>,
    pub wk: ArrayD<f64>,
    pub bk: ArrayD<f64>,
    pub wv: ArrayD<f64>,
    pub bv: ArrayD<f64>,
    pub wo: ArrayD<f64>,
    pub bo: ArrayD<f64>,
    pub ln2_g: ArrayD<f64>,
    pub ln2_b: ArrayD<f64>,
    pub w1: ArrayD<f64>,
    pub b1: ArrayD<f64>,
    pub w2: ArrayD<f64>,
    pub b2: ArrayD<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitParams {
    pub patch_w: ArrayD<f64>,
    pub patch_b: ArrayD<f64>,
    pub pos: ArrayD<f64>,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: ArrayD<f64>,
    pub lnf_b: ArrayD<f64>,
    pub proj_w: ArrayD<f64>,
    pub proj_b: ArrayD<f64>,
}

impl VitParams {
    /// Visit every parameter in a fixed order shared by the optimizer,
    /// checkpointing, and finite-difference probes.
    pub fn visit(&self, mut f: impl FnMut(String, &ArrayD<f64>)) {
        f("patch_w".into(), &self.patch_w);
        f("patch_b".into(), &self.patch_b);
        f("pos".into(), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("wq", &b.wq),
                ("bq", &b.bq),
                ("wk", &b.wk),
                ("bk", &b.bk),
                ("wv", &b.wv),
                ("bv", &b.bv),
                ("wo", &b.wo),
                ("bo", &b.bo),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
            ] {
                f(format!("block{i}.{suffix}"), t);
            }
        }
        f("lnf_g".into(), &self.lnf_g);
        f("lnf_b".into(), &self.lnf_b);
        f("proj_w".into(), &self.proj_w);
        f("proj_b".into(), &self.proj_b);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut ArrayD<f64>)) {
        f("patch_w".into(), &mut self.patch_w);
        f("patch_b".into(), &mut self.patch_b);
        f("pos".into(), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (suffix, t) in [
                ("ln1_g", &mut b.ln1_g),
                ("ln1_b", &mut b.ln1_b),
                ("wq", &mut b.wq),
                ("bq", &mut b.bq),
                ("wk", &mut b.wk),
                ("bk", &mut b.bk),
                ("wv", &mut b.wv),
                ("bv", &mut b.bv),
                ("wo", &mut b.wo),
                ("bo", &mut b.bo),
                ("ln2_g", &mut b.ln2_g),
                ("ln2_b", &mut b.ln2_b),
                ("w1", &mut b.w1),
                ("b1", &mut b.b1),
                ("w2", &mut b.w2),
                ("b2", &mut b.b2),
            ] {
                f(format!("block{i}.{suffix}"), t);
            }
        }
        f("lnf_g".into(), &mut self.lnf_g);
        f("lnf_b".into(), &mut self.lnf_b);
        f("proj_w".into(), &mut self.proj_w);
        f("proj_b".into(), &mut self.proj_b);
    }

    pub fn flat_clone(&self) -> Vec<ArrayD<f64>> {
        let mut out = Vec::new();
        self.visit(|_, t| out.push(t.clone()));
        out
    }
}

/// Image encoder: patch embedding + positional embedding + `depth`
/// pre-norm transformer blocks + final layer norm; pooled output is the
/// mean over patch tokens, linearly projected and l2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct VitEncoder {
    pub cfg: VitConfig,
    pub params: VitParams,
}

fn randn(rng: &mut ChaCha20Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let normal = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(rng))
}

impl VitEncoder {
    pub fn init(cfg: VitConfig, seed: u64) -> Self {
        assert!(cfg.image_size % cfg.patch == 0);
        assert!(cfg.dim % cfg.heads == 0);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = cfg.dim;
        let pdim = 3 * cfg.patch * cfg.patch;
        let hidden = d * cfg.mlp_ratio;
        let std = 0.02;
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                ln1_g: ArrayD::ones(IxDyn(&[d])),
                ln1_b: ArrayD::zeros(IxDyn(&[d])),
                wq: randn(&mut rng, &[d, d], std),
                bq: ArrayD::zeros(IxDyn(&[d])),
                wk: randn(&mut rng, &[d, d], std),
                bk: ArrayD::zeros(IxDyn(&[d])),
                wv: randn(&mut rng, &[d, d], std),
                bv: ArrayD::zeros(IxDyn(&[d])),
                wo: randn(&mut rng, &[d, d], std),
                bo: ArrayD::zeros(IxDyn(&[d])),
                ln2_g: ArrayD::ones(IxDyn(&[d])),
                ln2_b: ArrayD::zeros(IxDyn(&[d])),
                w1: randn(&mut rng, &[d, hidden], std),
                b1: ArrayD::zeros(IxDyn(&[hidden])),
                w2: randn(&mut rng, &[hidden, d], std),
                b2: ArrayD::zeros(IxDyn(&[d])),
            })
            .collect();
        let params = VitParams {
            patch_w: randn(&mut rng, &[pdim, d], std),
            patch_b: ArrayD::zeros(IxDyn(&[d])),
            pos: randn(&mut rng, &[cfg.num_patches(), d], std),
            blocks,
            lnf_g: ArrayD::ones(IxDyn(&[d])),
            lnf_b: ArrayD::zeros(IxDyn(&[d])),
            proj_w: randn(&mut rng, &[d, cfg.embed_dim], std),
            proj_b: ArrayD::zeros(IxDyn(&[cfg.embed_dim])),
        };
        Self { cfg, params }
    }

    /// Checkpoint to a tensor archive directory (f32 on disk).
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        let mut ar = TensorArchive::new();
        self.params.visit(|name, t| ar.insert(&name, t.clone()));
        ar.set_meta("vit_config", serde_json::to_value(self.cfg).unwrap());
        ar.save(dir)
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let ar = TensorArchive::load(dir)?;
        let cfg: VitConfig = serde_json::from_value(
            ar.meta("vit_config")
                .ok_or_else(|| Error::Archive("checkpoint missing vit_config meta".into()))?
                .clone(),
        )?;
        let mut enc = Self::init(cfg, 0);
        let mut missing = None;
        enc.params.visit_mut(|name, t| {
            match ar.get(&name) {
                Some(v) if v.shape() == t.shape() => *t = v.clone(),
                _ => missing = Some(name),
            }
        });
        if let Some(name) = missing {
            return Err(Error::MissingTensor(name));
        }
        Ok(enc)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h % self.cfg.patch != 0 || w % self.cfg.patch != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image {h}x{w} not divisible by patch size {}",
                self.cfg.patch
            )));
        }
        if h != self.cfg.image_size || w != self.cfg.image_size {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {0}x{0} images, got {h}x{w}",
                self.cfg.image_size
            )));
        }
        Ok(())
    }
}

/// Node handles produced by a single-sample forward pass.
pub struct ForwardHandles {
    pub pixels: NodeId,
    /// P x d pre-pooling patch tokens (f_g).
    pub patches: NodeId,
    /// Unit-norm pooled embedding, length embed_dim.
    pub pooled: NodeId,
    /// Parameter leaf nodes in `VitParams::visit` order.
    pub param_ids: Vec<NodeId>,
}

/// Build the encoder forward pass for one sample on the given graph.
pub fn build_forward(g: &mut Graph, enc: &VitEncoder, pixels: ArrayView3<'_, f64>) -> ForwardHandles {
    let cfg = &enc.cfg;
    let mut param_ids = Vec::new();
    enc.params.visit(|_, t| {
        param_ids.push(g.leaf(t.clone()));
    });
    // param_ids layout mirrors visit order.
    let mut it = param_ids.iter().copied();
    let patch_w = it.next().unwrap();
    let patch_b = it.next().unwrap();
    let pos = it.next().unwrap();
    let block_ids: Vec<Vec<NodeId>> = (0..cfg.depth)
        .map(|_| (0..16).map(|_| it.next().unwrap()).collect())
        .collect();
    let lnf_g = it.next().unwrap();
    let lnf_b = it.next().unwrap();
    let proj_w = it.next().unwrap();
    let proj_b = it.next().unwrap();

    let px = g.leaf(pixels.to_owned().into_dyn());
    let tokens = g.im2patches(px, cfg.patch);
    let emb = g.matmul(tokens, patch_w);
    let emb = g.add_row(emb, patch_b);
    let mut h = g.add(emb, pos);

    let dh = cfg.dim / cfg.heads;
    let ln_eps = 1e-6;
    for ids in &block_ids {
        let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2]: [NodeId; 16] =
            ids.as_slice().try_into().unwrap();
        let a = g.layer_norm(h, ln1_g, ln1_b, ln_eps);
        let q = g.matmul(a, wq);
        let q = g.add_row(q, bq);
        let k = g.matmul(a, wk);
        let k = g.add_row(k, bk);
        let v = g.matmul(a, wv);
        let v = g.add_row(v, bv);
        let mut head_outs = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let qh = g.slice_cols(q, hd * dh, dh);
            let kh = g.slice_cols(k, hd * dh, dh);
            let vh = g.slice_cols(v, hd * dh, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax_rows(scores);
            head_outs.push(g.matmul(attn, vh));
        }
        let merged = g.concat_cols(head_outs);
        let o = g.matmul(merged, wo);
        let o = g.add_row(o, bo);
        h = g.add(h, o);
        let m = g.layer_norm(h, ln2_g, ln2_b, ln_eps);
        let m = g.matmul(m, w1);
        let m = g.add_row(m, b1);
        let m = g.gelu(m);
        let m = g.matmul(m, w2);
        let m = g.add_row(m, b2);
        h = g.add(h, m);
    }

    let patches = g.layer_norm(h, lnf_g, lnf_b, ln_eps);
    let mean = g.mean_rows(patches);
    let mean_row = g.reshape(mean, &[1, cfg.dim]);
    let proj = g.matmul(mean_row, proj_w);
    let proj = g.add_row(proj, proj_b);
    let flat = g.reshape(proj, &[cfg.embed_dim]);
    let pooled = g.l2_normalize_vec(flat);

    ForwardHandles { pixels: px, patches, pooled, param_ids }
}

/// Append τ-scaled cosine-similarity logits for one sample to the graph.
/// `pooled` must already be unit-norm, so cos = text · pooled.
pub fn build_logits(g: &mut Graph, pooled: NodeId, text: &TextEmbeddings, temperature: f64) -> NodeId {
    assert!(temperature > 0.0);
    let t = g.leaf(text.vectors.clone().into_dyn());
    let col = g.reshape(pooled, &[text.dim(), 1]);
    let z = g.matmul(t, col);
    let z = g.scale(z, 1.0 / temperature);
    g.reshape(z, &[text.num_classes()])
}

/// Encode a batch: pooled N x d (unit rows) and patch grid N x P x d.
pub fn encode_image(enc: &VitEncoder, batch: &ImageBatch) -> Result<ImageEncoding> {
    let shape = batch.pixels.shape();
    enc.check_input(shape[2], shape[3])?;
    let n = batch.len();
    let per: Vec<(Array1<f64>, Array2<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::new();
            let h = build_forward(&mut g, enc, batch.pixels.index_axis(Axis(0), i));
            let pooled = g.value(h.pooled).clone().into_dimensionality().unwrap();
            let patches = g.value(h.patches).clone().into_dimensionality().unwrap();
            (pooled, patches)
        })
        .collect();
    let mut pooled = Array2::zeros((n, enc.cfg.embed_dim));
    let mut patches = Array3::zeros((n, enc.cfg.num_patches(), enc.cfg.dim));
    for (i, (p, t)) in per.into_iter().enumerate() {
        pooled.row_mut(i).assign(&p);
        patches.index_axis_mut(Axis(0), i).assign(&t);
    }
    Ok(ImageEncoding { pooled, patches })
}

/// Temperature-scaled cosine-similarity logits, entry (i,k) = cos(pooled_i, text_k)/τ.
pub fn classification_logits(pooled: &Array2<f64>, text: &TextEmbeddings, temperature: f64) -> Result<Array2<f64>> {
    if pooled.shape()[1] != text.dim() {
        return Err(Error::ShapeMismatch(format!(
            "pooled dim {} vs text dim {}",
            pooled.shape()[1],
            text.dim()
        )));
    }
    assert!(temperature > 0.0, "temperature must be positive");
    Ok(pooled.dot(&text.vectors.t()) / temperature)
}

/// Frozen original encoder + trainable target encoder sharing frozen text
/// embeddings and temperature τ.
#[derive(Debug, Clone)]
pub struct DualModelState {
    pub original: VitEncoder,
    pub target: VitEncoder,
    pub text: TextEmbeddings,
    pub temperature: f64,
}

impl DualModelState {
    /// Target starts as an exact copy of the original.
    pub fn new(original: VitEncoder, text: TextEmbeddings, temperature: f64) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        if text.dim() != original.cfg.embed_dim {
            return Err(Error::ShapeMismatch(format!(
                "text dim {} vs encoder embed dim {}",
                text.dim(),
                original.cfg.embed_dim
            )));
        }
        Ok(Self { target: original.clone(), original, text, temperature })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;

    fn random_batch(n: usize, size: usize, k: usize, seed: u64) -> ImageBatch {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let pixels = Array4::from_shape_fn((n, 3, size, size), |_| rng.gen_range(0.0..=1.0));
        let labels = (0..n).map(|i| i % k).collect();
        ImageBatch::new(pixels, labels).unwrap()
    }

    #[test]
    fn mini_vit_shapes() {
        let enc = VitEncoder::init(VitConfig::default(), 0);
        let batch = random_batch(2, 32, 2, 1);
        let out = encode_image(&enc, &batch).unwrap();
        assert_eq!(out.pooled.dim(), (2, 64));
        assert_eq!(out.patches.dim(), (2, 64, 64));
        let p = (out.patches.dim().1 as f64).sqrt();
        assert_eq!(p, p.round());
    }

    #[test]
    fn pooled_rows_unit_norm() {
        let enc = VitEncoder::init(VitConfig::default(), 3);
        let batch = random_batch(3, 32, 2, 4);
        let out = encode_image(&enc, &batch).unwrap();
        for row in out.pooled.outer_iter() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < UNIT_NORM_TOL);
        }
    }

    #[test]
    fn encode_rejects_bad_size() {
        let enc = VitEncoder::init(VitConfig::default(), 0);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let pixels = Array4::from_shape_fn((1, 3, 30, 30), |_| rng.gen_range(0.0..=1.0));
        let batch = ImageBatch::new(pixels, vec![0]).unwrap();
        assert!(matches!(encode_image(&enc, &batch), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn logits_identity_and_orthogonal() {
        let names = vec!["a".to_string(), "b".to_string()];
        let mut text = TextEmbeddings::synthetic(&names, "a photo of a {}", 4, 0).unwrap();
        text.vectors = ndarray::arr2(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]);
        let pooled = ndarray::arr2(&[[1.0, 0.0, 0.0, 0.0]]);
        let tau = 0.07;
        let z = classification_logits(&pooled, &text, tau).unwrap();
        assert!((z[[0, 0]] - 1.0 / tau).abs() < 1e-12);
        assert!(z[[0, 1]].abs() < 1e-12);
    }

    #[test]
    fn logits_tau_scaling_arithmetic() {
        // cos = 0.35, tau = 0.07 -> logit 5.0
        let names = vec!["a".to_string(), "b".to_string()];
        let mut text = TextEmbeddings::synthetic(&names, "t {}", 2, 0).unwrap();
        text.vectors = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let c = 0.35_f64;
        let pooled = ndarray::arr2(&[[c, (1.0 - c * c).sqrt()]]);
        let z = classification_logits(&pooled, &text, 0.07).unwrap();
        assert!((z[[0, 0]] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn logits_scale_covariance_and_argmax_invariance() {
        let names: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
        let text = TextEmbeddings::synthetic(&names, "t {}", 8, 1).unwrap();
        let enc = VitEncoder::init(VitConfig { embed_dim: 8, ..VitConfig::default() }, 2);
        let batch = random_batch(3, 32, 5, 9);
        let pooled = encode_image(&enc, &batch).unwrap().pooled;
        let tau = 0.07;
        let c = 3.0;
        let z1 = classification_logits(&pooled, &text, tau).unwrap();
        let z2 = classification_logits(&pooled, &text, tau / c).unwrap();
        for (a, b) in z1.iter().zip(z2.iter()) {
            assert!((a * c - b).abs() < 1e-9);
        }
    }

    #[test]
    fn synthetic_text_deterministic_and_unit_norm() {
        let names = vec!["a".to_string(), "b".to_string()];
        let t1 = TextEmbeddings::synthetic(&names, "t {}", 16, 0).unwrap();
        let t2 = TextEmbeddings::synthetic(&names, "t {}", 16, 0).unwrap();
        assert_eq!(t1.vectors, t2.vectors);
        for row in t1.vectors.outer_iter() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < UNIT_NORM_TOL);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let enc = VitEncoder::init(VitConfig::default(), 5);
        let names: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
        let text = TextEmbeddings::synthetic(&names, "t {}", 64, 3).unwrap();
        let batch = random_batch(2, 32, 4, 11);
        let pooled = encode_image(&enc, &batch).unwrap().pooled;
        let z = classification_logits(&pooled, &text, 0.07).unwrap();
        for row in z.outer_iter() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let s: f64 = row.mapv(|v| (v - m).exp()).sum();
            let total: f64 = row.mapv(|v| (v - m).exp() / s).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pixel_gradient_matches_finite_differences() {
        // sum(pooled) probe wrt pixels on a tiny encoder, double precision.
        let cfg = VitConfig { image_size: 8, patch: 4, dim: 8, depth: 1, heads: 2, mlp_ratio: 2, embed_dim: 8 };
        let enc = VitEncoder::init(cfg, 7);
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let pixels = Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(0.2..0.8));

        let eval = |px: &Array3<f64>, want: bool| {
            let mut g = Graph::new();
            let h = build_forward(&mut g, &enc, px.view());
            let s = g.sum_all(h.pooled);
            let grad = if want {
                g.backward(s)[h.pixels.0].clone()
            } else {
                None
            };
            (g.scalar(s), grad)
        };
        let (_, grad) = eval(&pixels, true);
        let grad = grad.unwrap();
        let h = 1e-5;
        let mut worst = 0.0_f64;
        let mut rng2 = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..12 {
            let idx = (
                rng2.gen_range(0..3usize),
                rng2.gen_range(0..8usize),
                rng2.gen_range(0..8usize),
            );
            let mut hi = pixels.clone();
            let mut lo = pixels.clone();
            hi[idx] += h;
            lo[idx] -= h;
            let fd = (eval(&hi, false).0 - eval(&lo, false).0) / (2.0 * h);
            let an = grad[[idx.0, idx.1, idx.2]];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
        }
        assert!(worst < 1e-4, "pixel gradient rel err {worst}");
    }

    #[test]
    fn bias_only_encoder_emits_bias_everywhere() {
        // Zero image, all weights zero, final layer-norm bias set to b and an
        // identity output projection: every patch token equals b, pooled = b/|b|.
        let cfg = VitConfig { image_size: 8, patch: 4, dim: 4, depth: 1, heads: 2, mlp_ratio: 2, embed_dim: 4 };
        let mut enc = VitEncoder::init(cfg, 0);
        enc.params.visit_mut(|_, t| t.fill(0.0));
        let b = ndarray::arr1(&[0.5, -1.0, 2.0, 0.25]);
        enc.params.lnf_b = b.clone().into_dyn();
        let mut eye = Array2::zeros((4, 4));
        for i in 0..4 {
            eye[[i, i]] = 1.0;
        }
        enc.params.proj_w = eye.into_dyn();
        let batch = ImageBatch::new(Array4::zeros((1, 3, 8, 8)), vec![0]).unwrap();
        let out = encode_image(&enc, &batch).unwrap();
        for row in out.patches.index_axis(Axis(0), 0).outer_iter() {
            for (v, e) in row.iter().zip(b.iter()) {
                assert!((v - e).abs() < 1e-12);
            }
        }
        let norm = b.dot(&b).sqrt();
        for (v, e) in out.pooled.row(0).iter().zip(b.iter()) {
            assert!((v - e / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = VitConfig { image_size: 8, patch: 4, dim: 8, depth: 1, heads: 2, mlp_ratio: 2, embed_dim: 8 };
        let enc = VitEncoder::init(cfg, 42);
        let dir = tempfile::tempdir().unwrap();
        enc.save(dir.path()).unwrap();
        let back = VitEncoder::load(dir.path()).unwrap();
        assert_eq!(back.cfg, enc.cfg);
        // f32 round trip: values agree to f32 precision
        let a = enc.params.flat_clone();
        let b = back.params.flat_clone();
        for (x, y) in a.iter().zip(b.iter()) {
            for (u, v) in x.iter().zip(y.iter()) {
                assert!((u - v).abs() <= (*u as f32).abs() as f64 * 1e-7 + 1e-12);
            }
        }
    }

    #[test]
    fn missing_class_in_archive_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut ar = TensorArchive::new();
        ar.insert("text/a", ndarray::arr1(&[3.0, 4.0]).into_dyn());
        ar.save(dir.path()).unwrap();
        let ar = TensorArchive::load(dir.path()).unwrap();
        let names = vec!["a".to_string(), "c".to_string()];
        match TextEmbeddings::from_archive(&ar, &names, "t {}") {
            Err(Error::MissingClass(c)) => assert_eq!(c, "c"),
            other => panic!("expected missing-class error, got {other:?}"),
        }
    }

    #[test]
    fn archive_vectors_are_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let mut ar = TensorArchive::new();
        ar.insert("text/a", ndarray::arr1(&[3.0, 4.0]).into_dyn());
        ar.insert("text/b", ndarray::arr1(&[0.0, 2.0]).into_dyn());
        ar.save(dir.path()).unwrap();
        let ar = TensorArchive::load(dir.path()).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let t = TextEmbeddings::from_archive(&ar, &names, "t {}").unwrap();
        assert!((t.vectors[[0, 0]] - 0.6).abs() < 1e-6);
        assert!((t.vectors[[0, 1]] - 0.8).abs() < 1e-6);
    }
}
