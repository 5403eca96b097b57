//! PNG emission for attention heatmaps and trade-off scatter plots.

use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use ndarray::Axis;
use std::path::Path;

fn gray_image(map: ndarray::ArrayView2<'_, f64>) -> image::GrayImage {
    let (h, w) = map.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([(map[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8]));
        }
    }
    img
}

/// Write one grayscale heatmap per sample as `{index}_{tag}.png`.
pub fn save_heatmaps(maps: &AttentionMap, dir: &Path, tag: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, m) in maps.values.outer_iter().enumerate() {
        gray_image(m)
            .save(dir.join(format!("{i}_{tag}.png")))
            .map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(())
}

/// Side-by-side clean/adversarial panels as `{index}_panel.png`.
pub fn save_panels(clean: &AttentionMap, adv: &AttentionMap, dir: &Path) -> Result<()> {
    if clean.values.dim() != adv.values.dim() {
        return Err(Error::ShapeMismatch("panel maps differ in shape".into()));
    }
    std::fs::create_dir_all(dir)?;
    let (_, h, w) = clean.values.dim();
    for i in 0..clean.values.len_of(Axis(0)) {
        let mut img = image::GrayImage::new((2 * w + 1) as u32, h as u32);
        let c = gray_image(clean.values.index_axis(Axis(0), i));
        let a = gray_image(adv.values.index_axis(Axis(0), i));
        for y in 0..h as u32 {
            for x in 0..w as u32 {
                img.put_pixel(x, y, *c.get_pixel(x, y));
                img.put_pixel(x + w as u32 + 1, y, *a.get_pixel(x, y));
            }
            img.put_pixel(w as u32, y, image::Luma([128]));
        }
        img.save(dir.join(format!("{i}_panel.png")))
            .map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(())
}

/// Scatter plot of (clean, robust) accuracy pairs on a fixed [0,1]^2 canvas.
pub fn save_tradeoff_scatter(points: &[(String, f64, f64)], path: &Path) -> Result<()> {
    let size = 256u32;
    let mut img = image::RgbImage::from_pixel(size, size, image::Rgb([255, 255, 255]));
    // axes
    for i in 0..size {
        img.put_pixel(i, size - 1, image::Rgb([0, 0, 0]));
        img.put_pixel(0, i, image::Rgb([0, 0, 0]));
    }
    for (idx, (_, clean, robust)) in points.iter().enumerate() {
        let x = (clean.clamp(0.0, 1.0) * (size - 1) as f64) as i64;
        let y = (size - 1) as i64 - (robust.clamp(0.0, 1.0) * (size - 1) as f64) as i64;
        let color = image::Rgb([
            (50 + (idx * 73) % 200) as u8,
            (30 + (idx * 131) % 200) as u8,
            (80 + (idx * 57) % 160) as u8,
        ]);
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                let (px, py) = (x + dx, y + dy);
                if (0..size as i64).contains(&px) && (0..size as i64).contains(&py) {
                    img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Image(e.to_string()))
}
