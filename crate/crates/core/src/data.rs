//! Dataset ingestion: JSON image-folder manifests, a procedural synthetic
//! shapes dataset for desk-scale runs, and deterministic seeded batching.
//! Pixels are kept in [0,1] with no standardization so that attack budgets
//! stay in pixel units.

use crate::error::{Error, Result};
use crate::model::ImageBatch;
use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// In-memory dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pixels: Array4<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_hw(&self) -> (usize, usize) {
        let s = self.pixels.shape();
        (s[2], s[3])
    }

    /// The first `n` samples as one batch (entire dataset if n >= len).
    pub fn head_batch(&self, n: usize) -> Result<ImageBatch> {
        let n = n.min(self.len());
        ImageBatch::new(
            self.pixels.slice(ndarray::s![..n, .., .., ..]).to_owned(),
            self.labels[..n].to_vec(),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
struct ManifestFile {
    classes: Vec<String>,
    image_size: [usize; 2],
    entries: Vec<(String, usize)>,
}

/// Manifest of (image path, label) entries rooted at a directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<(PathBuf, usize)>,
    pub class_names: Vec<String>,
    pub image_size: (usize, usize),
}

/// Load and validate a JSON manifest; referenced files must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MalformedManifest(format!("{}: {e}", path.display())))?;
    let mf: ManifestFile =
        serde_json::from_str(&text).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    if mf.entries.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut entries = Vec::with_capacity(mf.entries.len());
    for (rel, label) in &mf.entries {
        if *label >= mf.classes.len() {
            return Err(Error::LabelOutOfRange { label: *label, num_classes: mf.classes.len() });
        }
        let p = root.join(rel);
        if !p.exists() {
            return Err(Error::MalformedManifest(format!("missing image file {}", p.display())));
        }
        entries.push((p, *label));
    }
    Ok(DatasetManifest {
        root,
        entries,
        class_names: mf.classes,
        image_size: (mf.image_size[0], mf.image_size[1]),
    })
}

/// Canonical manifest serialization (paths relative to the manifest root).
pub fn write_manifest(m: &DatasetManifest) -> String {
    let mf = ManifestFile {
        classes: m.class_names.clone(),
        image_size: [m.image_size.0, m.image_size.1],
        entries: m
            .entries
            .iter()
            .map(|(p, l)| {
                let rel = p.strip_prefix(&m.root).unwrap_or(p);
                (rel.to_string_lossy().into_owned(), *l)
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&mf).unwrap();
    s.push('\n');
    s
}

/// Read every image of a manifest into memory as [0,1] RGB.
pub fn load_dataset(m: &DatasetManifest) -> Result<Dataset> {
    let (h, w) = m.image_size;
    let mut pixels = Array4::zeros((m.entries.len(), 3, h, w));
    let mut labels = Vec::with_capacity(m.entries.len());
    for (i, (path, label)) in m.entries.iter().enumerate() {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        if (img.height() as usize, img.width() as usize) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "{}: expected {h}x{w}, got {}x{}",
                path.display(),
                img.height(),
                img.width()
            )));
        }
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    pixels[[i, c, y, x]] = px.0[c] as f64 / 255.0;
                }
            }
        }
        labels.push(*label);
    }
    Ok(Dataset { pixels, labels, class_names: m.class_names.clone() })
}

/// Save one [0,1] RGB image (C x H x W) as an 8-bit PNG.
pub fn save_png(pixels: ndarray::ArrayView3<'_, f64>, path: &Path) -> Result<()> {
    let (_, h, w) = pixels.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let to8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to8(pixels[[0, y, x]]),
                    to8(pixels[[1, y, x]]),
                    to8(pixels[[2, y, x]]),
                ]),
            );
        }
    }
    img.save(path).map_err(|e| Error::Image(e.to_string()))
}

pub const SHAPES_CLASS_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];

/// Procedurally drawn 32x32 shapes: one distinct geometry per class with
/// randomized position and color, linearly separable enough to train the
/// miniature encoder to high clean accuracy. Deterministic under the seed.
pub fn synthetic_dataset(kind: &str, n: usize, seed: u64) -> Result<Dataset> {
    if kind != "shapes" {
        return Err(Error::InvalidConfig(format!("unknown synthetic dataset kind: {kind}")));
    }
    if n == 0 {
        return Err(Error::EmptyDataset("synthetic dataset with n = 0".into()));
    }
    let size = 32usize;
    let k = SHAPES_CLASS_NAMES.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pixels = Array4::zeros((n, 3, size, size));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        let img = draw_shape(label, size, &mut rng);
        pixels.index_axis_mut(Axis(0), i).assign(&img);
        labels.push(label);
    }
    Ok(Dataset {
        pixels,
        labels,
        class_names: SHAPES_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    })
}

fn draw_shape(label: usize, size: usize, rng: &mut ChaCha20Rng) -> Array3<f64> {
    let mut img = Array3::from_shape_fn((3, size, size), |_| rng.gen_range(0.0..0.08));
    // each class has a characteristic hue (with jitter) in addition to its
    // geometry, so the task carries both a local and a global cue
    let base: [f64; 3] = match label {
        0 => [0.9, 0.25, 0.25],
        1 => [0.25, 0.9, 0.25],
        2 => [0.25, 0.25, 0.9],
        _ => [0.9, 0.9, 0.25],
    };
    let color = [
        (base[0] + rng.gen_range(-0.15..0.1)).clamp(0.05, 1.0),
        (base[1] + rng.gen_range(-0.15..0.1)).clamp(0.05, 1.0),
        (base[2] + rng.gen_range(-0.15..0.1)).clamp(0.05, 1.0),
    ];
    let r = 6.0;
    let cx = rng.gen_range(r + 2.0..size as f64 - r - 2.0);
    let cy = rng.gen_range(r + 2.0..size as f64 - r - 2.0);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let inside = match label {
                // filled circle
                0 => dx * dx + dy * dy <= r * r,
                // filled square
                1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
                // filled triangle pointing up
                2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0 * 0.9,
                // plus / cross
                _ => (dx.abs() <= r * 0.35 && dy.abs() <= r) || (dy.abs() <= r * 0.35 && dx.abs() <= r),
            };
            if inside {
                for c in 0..3 {
                    img[[c, y, x]] = color[c];
                }
            }
        }
    }
    img
}

/// Deterministic batching; the final partial batch is included.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<ImageBatch>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
    }
    let (_, c, h, w) = ds.pixels.dim();
    let mut out = Vec::new();
    for chunk in idx.chunks(batch_size) {
        let mut pixels = Array4::zeros((chunk.len(), c, h, w));
        let mut labels = Vec::with_capacity(chunk.len());
        for (j, &i) in chunk.iter().enumerate() {
            pixels.index_axis_mut(Axis(0), j).assign(&ds.pixels.index_axis(Axis(0), i));
            labels.push(ds.labels[i]);
        }
        out.push(ImageBatch::new(pixels, labels)?);
    }
    Ok(out)
}
