//! Synthetic tissue-like scenes of stained ellipses.
//!
//! Every image composites anti-aliased ellipses by absorption: a pixel's
//! transmission is the background colour times `prod(1 - a * coverage)`,
//! matching the renderer's image model. Three classes differ in ellipse
//! count, size and stain:
//!
//! | class            | ellipses | semi-axes (x side) | stain                 |
//! |------------------|----------|--------------------|-----------------------|
//! | `dense`          | 20-30    | 0.04-0.08          | pink/purple mix       |
//! | `sparse`         | 3-6      | 0.12-0.25          | pink/purple mix       |
//! | `dark-infiltrate`| 20-30    | 0.04-0.08          | dark blue-purple      |
//!
//! Each case draws its own stain intensity and background tint, so mean
//! colour alone separates the classes only partly.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{split_dataset, write_manifest, ManifestRow};
use super::patches::{image_to_tensor, save_rgb};
use crate::autodiff::{Real, Tensor};
use crate::error::{AsrError, Result};

/// Ground-truth ellipse in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtEllipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub rx: f64,
    pub ry: f64,
    pub theta: f64,
    pub absorption: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub background: [f64; 3],
    pub ellipses: Vec<GtEllipse>,
}

/// Sampling ranges of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProfile {
    pub name: &'static str,
    pub count: (usize, usize),
    /// Semi-axis range as a fraction of the image side.
    pub semi_axis: (f64, f64),
    /// Base absorptions; each ellipse picks one.
    pub palette: Vec<[f64; 3]>,
}

pub fn class_profiles() -> Vec<ClassProfile> {
    let mixed = vec![[0.55, 0.65, 0.25], [0.12, 0.5, 0.28], [0.35, 0.55, 0.2]];
    vec![
        ClassProfile {
            name: "dense",
            count: (20, 30),
            semi_axis: (0.04, 0.08),
            palette: mixed.clone(),
        },
        ClassProfile {
            name: "sparse",
            count: (3, 6),
            semi_axis: (0.12, 0.25),
            palette: mixed,
        },
        ClassProfile {
            name: "dark-infiltrate",
            count: (20, 30),
            semi_axis: (0.04, 0.08),
            palette: vec![[0.8, 0.85, 0.45], [0.7, 0.8, 0.35]],
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_side: usize,
    pub classes: usize,
    pub cases_per_class: usize,
    pub patches_per_case: usize,
    pub split_ratios: [usize; 3],
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            classes: 3,
            cases_per_class: 12,
            patches_per_case: 64,
            split_ratios: [5, 2, 3],
            noise: 0.01,
            seed: 0,
        }
    }
}

/// Per-case stain style.
#[derive(Clone, Copy, Debug)]
struct CaseStyle {
    intensity: f64,
    background: [f64; 3],
}

fn sample_style<R: Rng>(rng: &mut R) -> CaseStyle {
    let base = rng.gen_range(0.88..0.97);
    CaseStyle {
        intensity: rng.gen_range(0.7..1.15),
        background: [0, 1, 2].map(|_| (base + rng.gen_range(-0.03..0.03f64)).min(1.0)),
    }
}

fn sample_scene<R: Rng>(profile: &ClassProfile, style: CaseStyle, side: f64, rng: &mut R) -> Scene {
    let n = rng.gen_range(profile.count.0..=profile.count.1);
    let ellipses = (0..n)
        .map(|_| {
            let base = profile.palette[rng.gen_range(0..profile.palette.len())];
            GtEllipse {
                cx: rng.gen_range(0.0..side),
                cy: rng.gen_range(0.0..side),
                rx: rng.gen_range(profile.semi_axis.0..profile.semi_axis.1) * side,
                ry: rng.gen_range(profile.semi_axis.0..profile.semi_axis.1) * side,
                theta: rng.gen_range(0.0..PI),
                absorption: base.map(|a| (a * style.intensity * rng.gen_range(0.9..1.1)).clamp(0.0, 1.0)),
            }
        })
        .collect();
    Scene {
        background: style.background,
        ellipses,
    }
}

const SUPERSAMPLE: usize = 4;

/// Absorption compositing with `SUPERSAMPLE^2` coverage samples per pixel;
/// returns `[3, side, side]` in `[0, 1]`.
pub fn rasterize(scene: &Scene, side: usize) -> Tensor<f64> {
    let mut trans = vec![1.0f64; 3 * side * side];
    let plane = side * side;
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for e in &scene.ellipses {
        let (s, c) = e.theta.sin_cos();
        let reach = e.rx.max(e.ry);
        let lo = |v: f64| (v - reach).floor().max(0.0) as usize;
        let hi = |v: f64| ((v + reach).ceil().max(0.0) as usize).min(side);
        for y in lo(e.cy)..hi(e.cy) {
            for x in lo(e.cx)..hi(e.cx) {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5 - e.cx;
                        let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5 - e.cy;
                        let u = (px * c + py * s) / e.rx;
                        let v = (-px * s + py * c) / e.ry;
                        hits += usize::from(u * u + v * v <= 1.0);
                    }
                }
                if hits > 0 {
                    let cov = hits as f64 * inv;
                    for ch in 0..3 {
                        trans[ch * plane + y * side + x] *= 1.0 - e.absorption[ch] * cov;
                    }
                }
            }
        }
    }
    for (i, t) in trans.iter_mut().enumerate() {
        *t *= scene.background[i / plane];
    }
    Tensor::new(vec![3, side, side], trans).expect("sized")
}

fn add_noise<R: Rng>(t: &mut Tensor<f64>, sigma: f64, rng: &mut R) {
    if sigma <= 0.0 {
        return;
    }
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    for v in t.data_mut() {
        *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
    }
}

fn to_image(t: &Tensor<f64>) -> RgbImage {
    let side = t.shape()[1];
    let d = t.data();
    RgbImage::from_fn(side as u32, side as u32, |x, y| {
        let at = |c: usize| (d[c * side * side + y as usize * side + x as usize] * 255.0).round() as u8;
        Rgb([at(0), at(1), at(2)])
    })
}

/// Ground truth of one generated patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub case_id: String,
    pub class: String,
    pub patch: String,
    pub scene: Scene,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub patches: usize,
}

/// Writes `<out>/<case_id>/<x>_<y>.png` patches, `<out>/manifest.csv` (with
/// the stratified split filled in) and `<out>/ground_truth.jsonl`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    let profiles = class_profiles();
    if cfg.classes < 2 || cfg.classes > profiles.len() {
        return Err(AsrError::Config(format!("classes must be between 2 and {}", profiles.len())));
    }
    if cfg.cases_per_class == 0 || cfg.patches_per_case == 0 || cfg.image_side < 8 {
        return Err(AsrError::Config("cases_per_class, patches_per_case and image_side must be positive".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| AsrError::io(out, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    let gt_path = out.join("ground_truth.jsonl");
    let mut gt = std::io::BufWriter::new(std::fs::File::create(&gt_path).map_err(|e| AsrError::io(&gt_path, e))?);
    let side = cfg.image_side;
    for profile in &profiles[..cfg.classes] {
        for k in 0..cfg.cases_per_class {
            let case_id = format!("{}-{k:02}", profile.name);
            let style = sample_style(&mut rng);
            for p in 0..cfg.patches_per_case {
                let scene = sample_scene(profile, style, side as f64, &mut rng);
                let mut img = rasterize(&scene, side);
                add_noise(&mut img, cfg.noise, &mut rng);
                let name = format!("{}_{}", p * side, 0);
                save_rgb(&to_image(&img), &out.join(&case_id).join(format!("{name}.png")))?;
                let rec = GroundTruthRecord {
                    case_id: case_id.clone(),
                    class: profile.name.to_string(),
                    patch: name,
                    scene,
                };
                serde_json::to_writer(&mut gt, &rec)?;
                gt.write_all(b"\n").map_err(|e| AsrError::io(&gt_path, e))?;
            }
            rows.push(ManifestRow {
                case_id: case_id.clone(),
                class: profile.name.to_string(),
                sex: "NA".into(),
                age: "NA".into(),
                subset: None,
                image_path: PathBuf::from(&case_id),
            });
        }
    }
    gt.flush().map_err(|e| AsrError::io(&gt_path, e))?;
    let split = split_dataset(&rows, cfg.split_ratios, cfg.seed)?;
    for r in &mut rows {
        r.subset = split.get(&r.case_id).copied();
    }
    let manifest = out.join("manifest.csv");
    write_manifest(&rows, &manifest)?;
    Ok(SynthSummary {
        manifest,
        patches: rows.len() * cfg.patches_per_case,
        rows,
    })
}

/// Reads `ground_truth.jsonl`, keyed by `(case_id, patch)`.
pub fn read_ground_truth(path: &Path) -> Result<BTreeMap<(String, String), GroundTruthRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| AsrError::io(path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: GroundTruthRecord = serde_json::from_str(line)?;
        out.insert((r.case_id.clone(), r.patch.clone()), r);
    }
    Ok(out)
}

/// Scenes holding one dark ellipse each, centred on a cell centre of a
/// `grid x grid` layout, with semi-axes drawn from `semi_axis` pixels and
/// a white background.
pub fn single_ellipse_scenes<T: Real>(n: usize, side: usize, grid: usize, semi_axis: (f64, f64), seed: u64) -> Vec<(Tensor<T>, GtEllipse)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spacing = side / grid;
    (0..n)
        .map(|_| {
            let cell = rng.gen_range(0..grid * grid);
            let e = GtEllipse {
                cx: ((cell % grid) * spacing + spacing / 2) as f64,
                cy: ((cell / grid) * spacing + spacing / 2) as f64,
                rx: rng.gen_range(semi_axis.0..semi_axis.1),
                ry: rng.gen_range(semi_axis.0..semi_axis.1),
                theta: rng.gen_range(0.0..PI),
                absorption: [0, 1, 2].map(|_| rng.gen_range(0.6..0.95)),
            };
            let scene = Scene {
                background: [1.0; 3],
                ellipses: vec![e],
            };
            let img = rasterize(&scene, side);
            (img.cast(), e)
        })
        .collect()
}

/// Loads every patch of a case directory as `[3, H, W]` tensors, ordered
/// by origin `(y, x)`.
pub fn load_case_patches<T: Real>(dir: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| AsrError::io(dir, e))? {
        let path = entry.map_err(|e| AsrError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let key = stem
            .split_once('_')
            .and_then(|(x, y)| Some((y.parse::<u64>().ok()?, x.parse::<u64>().ok()?)))
            .ok_or_else(|| AsrError::Config(format!("patch file name `{stem}` is not `<x>_<y>`")))?;
        names.push((key, stem, path));
    }
    names.sort();
    names
        .into_iter()
        .map(|(_, stem, path)| Ok((stem, image_to_tensor(&super::patches::load_rgb(&path)?))))
        .collect()
}
