//! Differentiable absorption renderer for grids of elliptical blobs.
//!
//! Each grid cell owns one primitive. A primitive starts as a soft disc of
//! radius `r` (the grid spacing) on a `(2r + 1)^2` raster, is warped by the
//! inverse of its scale/rotation transform through bilinear sampling, and
//! is tinted by its RGB absorption. Rasters of one scale are fused by
//! multiplying transmissions `1 - R`; scale canvases and the uniform
//! background are then multiplied together.
//!
//! The renderer owns no trainable state.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CanvasLayout, Graph, Real, Tensor, Var};
use crate::error::{AsrError, Result};

/// Grid geometry of one rendering scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Cell pitch in pixels; also the unscaled blob radius.
    pub spacing: usize,
}

impl ScaleConfig {
    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn raster_side(&self) -> usize {
        2 * self.spacing + 1
    }

    pub fn layout(&self, batch: usize, image_side: usize) -> CanvasLayout {
        CanvasLayout {
            batch,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            spacing: self.spacing,
            height: image_side,
            width: image_side,
        }
    }

    pub fn validate(&self, image_side: usize) -> Result<()> {
        if self.spacing == 0 {
            return Err(AsrError::Config("grid spacing must be at least 1 pixel".into()));
        }
        if self.grid_h * self.spacing != image_side || self.grid_w * self.spacing != image_side {
            return Err(AsrError::Config(format!(
                "grid {}x{} at spacing {} does not tile a {image_side}-pixel image",
                self.grid_h, self.grid_w, self.spacing
            )));
        }
        Ok(())
    }
}

/// The three default scales: 8x8, 4x4 and 2x2 cells tiling the image.
pub fn default_scales(image_side: usize) -> [ScaleConfig; 3] {
    [8, 4, 2].map(|cells| ScaleConfig {
        grid_h: cells,
        grid_w: cells,
        spacing: image_side / cells,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Steepness of the blob edge sigmoid.
    pub sharpness: f64,
    pub image_side: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            sharpness: 1.0,
            image_side: 256,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return Err(AsrError::Config(format!("sharpness must be positive, got {}", self.sharpness)));
        }
        if self.image_side == 0 {
            return Err(AsrError::Config("image side must be positive".into()));
        }
        Ok(())
    }
}

pub const MIN_SCALE: f64 = 0.1;
pub const MAX_SCALE: f64 = 2.0;

/// Parameters of one primitive in renderer units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    pub w: f64,
    pub h: f64,
    /// Rotation in radians.
    pub d: f64,
    /// RGB absorption.
    pub a: [f64; 3],
}

impl EllipseParams {
    /// Smallest admissible primitive; renders nothing.
    pub const INVISIBLE: EllipseParams = EllipseParams {
        w: MIN_SCALE,
        h: MIN_SCALE,
        d: 0.0,
        a: [0.0; 3],
    };

    pub fn validate(&self) -> Result<()> {
        let scale_ok = |v: f64| (MIN_SCALE - 1e-9..=MAX_SCALE + 1e-9).contains(&v);
        if !scale_ok(self.w) || !scale_ok(self.h) {
            return Err(AsrError::Contract(format!(
                "ellipse scale ({}, {}) outside [{MIN_SCALE}, {MAX_SCALE}]",
                self.w, self.h
            )));
        }
        if !(0.0..=std::f64::consts::TAU + 1e-9).contains(&self.d) {
            return Err(AsrError::Contract(format!("rotation {} outside [0, 2pi]", self.d)));
        }
        if self.a.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(AsrError::Contract(format!("absorption {:?} outside [0, 1]", self.a)));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.w, self.h, self.d, self.a[0], self.a[1], self.a[2]]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            w: v[0],
            h: v[1],
            d: v[2],
            a: [v[3], v[4], v[5]],
        }
    }
}

/// Soft disc `sigmoid(sharpness * (r - dist))` on a `[1, 2r + 1, 2r + 1]`
/// raster, `dist` measured from the central pixel.
pub fn render_blob<T: Real>(sharpness: f64, radius: usize) -> Tensor<T> {
    let side = 2 * radius + 1;
    let c = radius as f64;
    Tensor::from_fn(&[1, side, side], |i| {
        let (y, x) = ((i / side) as f64, (i % side) as f64);
        let dist = ((x - c).powi(2) + (y - c).powi(2)).sqrt();
        T::lit(1.0 / (1.0 + (-(sharpness * (c - dist))).exp()))
    })
}

/// Warps a shared blob `[1, 1, s, s]` once per row of `shape_rows`
/// (`[B, >=3]` holding `w, h, d`), giving `[B, 1, s, s]`.
pub fn transform_blobs<T: Real>(g: &mut Graph<T>, blob: Var, shape_rows: Var) -> Result<Var> {
    let side = match g.shape(blob) {
        &[1, 1, s, s2] if s == s2 && s % 2 == 1 => s,
        s => return Err(AsrError::shape("transform_blobs", format!("expected [1, 1, s, s] odd blob, got {s:?}"))),
    };
    let theta = g.ellipse_affine(shape_rows)?;
    let grid = g.affine_grid(theta, side)?;
    g.grid_sample(blob, grid)
}

/// Tints single-channel rasters `[B, 1, s, s]` with absorptions `[B, 3]`.
pub fn colorize<T: Real>(g: &mut Graph<T>, blobs: Var, absorption: Var) -> Result<Var> {
    g.channel_scale(blobs, absorption)
}

/// Canvas of one scale from mapped per-cell parameters `[N, 6, gh, gw]`.
pub fn render_scale<T: Real>(g: &mut Graph<T>, cfg: &RenderConfig, scale: &ScaleConfig, params: Var) -> Result<Var> {
    let [n, c, gh, gw] = g.value(params).dims4("render_scale")?;
    if c != 6 {
        return Err(AsrError::dim("render_scale", "parameter channels", 6, c));
    }
    if (gh, gw) != (scale.grid_h, scale.grid_w) {
        return Err(AsrError::Config(format!(
            "parameter grid {gh}x{gw} does not match scale grid {}x{}",
            scale.grid_h, scale.grid_w
        )));
    }
    let side = scale.raster_side();
    let blob = g.constant(render_blob::<T>(cfg.sharpness, scale.spacing).reshape(&[1, 1, side, side])?);
    let rows = g.gather_cells(params, 0, 6)?;
    let shaped = transform_blobs(g, blob, rows)?;
    let colors = g.gather_cells(params, 3, 6)?;
    let colored = colorize(g, shaped, colors)?;
    g.fuse_canvas(colored, scale.layout(n, cfg.image_side))
}

/// Final image `[N, 3, H, W]`: product of all scale canvases times the
/// background colour `[N, 3]`.
pub fn render_scene<T: Real>(
    g: &mut Graph<T>,
    cfg: &RenderConfig,
    scales: &[ScaleConfig],
    params: &[Var],
    background: Var,
) -> Result<Var> {
    if scales.len() != params.len() || scales.is_empty() {
        return Err(AsrError::Config(format!(
            "{} scale configs for {} parameter maps",
            scales.len(),
            params.len()
        )));
    }
    let mut image: Option<Var> = None;
    for (scale, &p) in scales.iter().zip(params) {
        let canvas = render_scale(g, cfg, scale, p)?;
        image = Some(match image {
            None => canvas,
            Some(acc) => g.mul(acc, canvas)?,
        });
    }
    g.channel_scale(image.expect("at least one scale"), background)
}

/// Packs a row-major grid of primitives into a `[1, 6, gh, gw]` tensor.
pub fn params_tensor<T: Real>(cells: &[EllipseParams], grid_h: usize, grid_w: usize) -> Result<Tensor<T>> {
    if cells.len() != grid_h * grid_w {
        return Err(AsrError::dim("params_tensor", "cells", grid_h * grid_w, cells.len()));
    }
    let n = cells.len();
    Ok(Tensor::from_fn(&[1, 6, grid_h, grid_w], |i| {
        let (ch, cell) = (i / n, i % n);
        T::lit(cells[cell].to_array()[ch])
    }))
}

/// Renders concrete primitives without recording gradients.
pub fn render_primitives<T: Real>(
    cfg: &RenderConfig,
    scales: &[ScaleConfig],
    cells: &[Vec<EllipseParams>],
    background: [f64; 3],
) -> Result<Tensor<T>> {
    let mut g = Graph::<T>::new();
    let mut vars = Vec::with_capacity(scales.len());
    for (s, grid) in scales.iter().zip(cells) {
        for p in grid {
            p.validate()?;
        }
        vars.push(g.constant(params_tensor(grid, s.grid_h, s.grid_w)?));
    }
    let bg = g.constant(Tensor::new(vec![1, 3], background.iter().map(|&v| T::lit(v)).collect())?);
    let img = render_scene(&mut g, cfg, scales, &vars, bg)?;
    g.value(img).clone().reshape(&[3, cfg.image_side, cfg.image_side])
}

/// Applies one primitive's shape transform to a `[1, s, s]` blob.
pub fn transform_blob(blob: &Tensor<f64>, p: &EllipseParams) -> Result<Tensor<f64>> {
    let side = blob.shape().last().copied().unwrap_or(0);
    let mut g = Graph::<f64>::new();
    let b = g.constant(blob.clone().reshape(&[1, 1, side, side])?);
    let rows = g.constant(Tensor::new(vec![1, 3], vec![p.w, p.h, p.d])?);
    let out = transform_blobs(&mut g, b, rows)?;
    g.value(out).clone().reshape(blob.shape())
}
