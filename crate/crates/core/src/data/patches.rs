use std::path::Path;

use image::{Rgb, RgbImage};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{AsrError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub window: u32,
    pub stride: u32,
    pub occupancy_min: f64,
    /// A pixel is tissue iff its smallest channel is below this level.
    pub tissue_threshold: f64,
    /// Integer box-filter downsampling factor.
    pub downscale: u32,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            window: 1024,
            stride: 635,
            occupancy_min: 0.8,
            tissue_threshold: 0.88,
            downscale: 4,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 || self.downscale == 0 || self.window % self.downscale != 0 {
            return Err(AsrError::Config(format!(
                "window {} must be a positive multiple of downscale {} and stride positive",
                self.window, self.downscale
            )));
        }
        if !(0.0..=1.0).contains(&self.occupancy_min) {
            return Err(AsrError::Config("occupancy_min must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A downscaled window and its top-left corner in the source image.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: (u32, u32),
    pub pixels: RgbImage,
}

fn is_tissue(p: &Rgb<u8>, threshold: f64) -> bool {
    let min = p.0.iter().copied().min().unwrap_or(255);
    (min as f64 / 255.0) < threshold
}

/// Fraction of pixels of `img` inside the window that count as tissue.
pub fn tissue_occupancy(img: &RgbImage, x0: u32, y0: u32, w: u32, h: u32, threshold: f64) -> f64 {
    let mut hits = 0u64;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            hits += u64::from(is_tissue(img.get_pixel(x, y), threshold));
        }
    }
    hits as f64 / (u64::from(w) * u64::from(h)).max(1) as f64
}

/// Area-average downsampling by an integer factor.
pub fn box_downsample(img: &RgbImage, x0: u32, y0: u32, side: u32, factor: u32) -> RgbImage {
    let out = side / factor;
    let area = f64::from(factor * factor);
    RgbImage::from_fn(out, out, |ox, oy| {
        let mut acc = [0u32; 3];
        for dy in 0..factor {
            for dx in 0..factor {
                let p = img.get_pixel(x0 + ox * factor + dx, y0 + oy * factor + dy);
                for c in 0..3 {
                    acc[c] += u32::from(p.0[c]);
                }
            }
        }
        Rgb(acc.map(|v| (f64::from(v) / area).round() as u8))
    })
}

/// Window origins along one axis of length `len`.
pub fn window_positions(len: u32, window: u32, stride: u32) -> Vec<u32> {
    if len < window {
        return Vec::new();
    }
    (0..=(len - window) / stride).map(|i| i * stride).collect()
}

/// Systematic scan keeping windows with enough tissue, downscaled.
pub fn extract_patches(img: &RgbImage, cfg: &PatchConfig) -> Result<Vec<Patch>> {
    cfg.validate()?;
    let (w, h) = img.dimensions();
    if w < cfg.window || h < cfg.window {
        warn!("image {w}x{h} is smaller than the {0}x{0} window; no patches", cfg.window);
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for &y in &window_positions(h, cfg.window, cfg.stride) {
        for &x in &window_positions(w, cfg.window, cfg.stride) {
            if tissue_occupancy(img, x, y, cfg.window, cfg.window, cfg.tissue_threshold) >= cfg.occupancy_min {
                out.push(Patch {
                    origin: (x, y),
                    pixels: box_downsample(img, x, y, cfg.window, cfg.downscale),
                });
            }
        }
    }
    Ok(out)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|source| AsrError::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| AsrError::io(dir, e))?;
    }
    img.save(path).map_err(|source| AsrError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// `[3, H, W]` tensor with values in `[0, 1]`.
pub fn image_to_tensor<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        T::lit(f64::from(img.get_pixel(x as u32, y as u32).0[c]) / 255.0)
    })
}

/// Inverse of [`image_to_tensor`], clamping and rounding to 8 bits.
pub fn tensor_to_image<T: Real>(t: &Tensor<T>) -> Result<RgbImage> {
    let (h, w) = match t.shape() {
        &[3, h, w] => (h, w),
        s => return Err(AsrError::shape("tensor_to_image", format!("expected [3, H, W], got {s:?}"))),
    };
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| {
            let v = d[c * h * w + y as usize * w + x as usize].as_f64();
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([at(0), at(1), at(2)])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(w: u32, h: u32, c: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb(c))
    }

    #[test]
    fn occupancy_cases() {
        assert_eq!(tissue_occupancy(&filled(8, 8, [255; 3]), 0, 0, 8, 8, 0.88), 0.0);
        let stained = filled(8, 8, [128, 77, 153]);
        assert_eq!(tissue_occupancy(&stained, 0, 0, 8, 8, 0.88), 1.0);
        let half = RgbImage::from_fn(10, 10, |x, _| if x < 5 { Rgb([255; 3]) } else { Rgb([128, 77, 153]) });
        assert!((tissue_occupancy(&half, 0, 0, 10, 10, 0.88) - 0.5).abs() <= 0.01);
    }

    #[test]
    fn extraction_counts() {
        let cfg = PatchConfig::default();
        assert!(extract_patches(&filled(1024, 1024, [255; 3]), &cfg).unwrap().is_empty());
        let one = extract_patches(&filled(1024, 1024, [150, 90, 160]), &cfg).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].pixels.dimensions(), (256, 256));
        // (2294 - 1024) / 635 is exactly 2, so the last window ends on the edge
        let wide = extract_patches(&filled(2294, 1024, [150, 90, 160]), &cfg).unwrap();
        assert_eq!(wide.iter().map(|p| p.origin.0).collect::<Vec<_>>(), vec![0, 635, 1270]);
        let two = extract_patches(&filled(2293, 1024, [150, 90, 160]), &cfg).unwrap();
        assert_eq!(two.iter().map(|p| p.origin).collect::<Vec<_>>(), vec![(0, 0), (635, 0)]);
        assert!(extract_patches(&filled(512, 2000, [150, 90, 160]), &cfg).unwrap().is_empty());
    }

    #[test]
    fn box_filter_averages() {
        let img = RgbImage::from_fn(4, 4, |x, y| Rgb([((x + y) % 2 * 255) as u8, 0, 200]));
        let d = box_downsample(&img, 0, 0, 4, 2);
        assert_eq!(d.dimensions(), (2, 2));
        assert_eq!(d.get_pixel(0, 0).0, [128, 0, 200]);
    }

    #[test]
    fn tensor_round_trip() {
        let img = RgbImage::from_fn(5, 3, |x, y| Rgb([x as u8 * 40, y as u8 * 60, 7]));
        let t = image_to_tensor::<f32>(&img);
        assert_eq!(t.shape(), &[3, 3, 5]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(tensor_to_image(&t).unwrap(), img);
    }
}
