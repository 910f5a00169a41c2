use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{AsrError, Result};
use crate::renderer::{EllipseParams, ScaleConfig};

/// Interpretable latent of one image: a grid of primitives per scale plus
/// the background colour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredLatent {
    /// Row-major cells per scale.
    pub scales: Vec<Vec<EllipseParams>>,
    pub background: [f64; 3],
}

impl StructuredLatent {
    /// Extracts sample `index` from mapped parameter maps `[N, 6, gh, gw]`
    /// and a background `[N, 3]`.
    pub fn from_maps<T: Real>(maps: &[&Tensor<T>], background: &Tensor<T>, index: usize) -> Result<Self> {
        let mut scales = Vec::with_capacity(maps.len());
        for m in maps {
            let [n, c, gh, gw] = m.dims4("latent")?;
            if c != 6 || index >= n {
                return Err(AsrError::shape("latent", format!("map {:?} for sample {index}", m.shape())));
            }
            let cells = gh * gw;
            let d = &m.data()[index * 6 * cells..(index + 1) * 6 * cells];
            scales.push(
                (0..cells)
                    .map(|cell| {
                        let v: Vec<f64> = (0..6).map(|ch| d[ch * cells + cell].as_f64()).collect();
                        EllipseParams::from_slice(&v)
                    })
                    .collect(),
            );
        }
        let b = background.data();
        if background.shape().len() != 2 || background.shape()[1] != 3 || index >= background.shape()[0] {
            return Err(AsrError::shape("latent", format!("background {:?}", background.shape())));
        }
        Ok(Self {
            scales,
            background: [0, 1, 2].map(|c| b[index * 3 + c].as_f64()),
        })
    }

    pub fn ellipse_count(&self) -> usize {
        self.scales.iter().map(Vec::len).sum()
    }

    /// Shape variables flattened scale-major, cell-major, `(w, h, d, r, g, b)`
    /// per cell; 504 values for the default grids.
    pub fn to_flat(&self) -> Vec<f64> {
        self.scales.iter().flatten().flat_map(|p| p.to_array()).collect()
    }

    /// Inverse of [`to_flat`](Self::to_flat).
    pub fn from_flat(flat: &[f64], grids: &[ScaleConfig], background: [f64; 3]) -> Result<Self> {
        let cells: usize = grids.iter().map(ScaleConfig::cells).sum();
        if flat.len() != 6 * cells {
            return Err(AsrError::dim("latent", "flat length", 6 * cells, flat.len()));
        }
        let mut it = flat.chunks_exact(6);
        let scales = grids
            .iter()
            .map(|g| (0..g.cells()).map(|_| EllipseParams::from_slice(it.next().expect("length checked"))).collect())
            .collect();
        Ok(Self { scales, background })
    }

    pub fn validate(&self, grids: &[ScaleConfig]) -> Result<()> {
        if self.scales.len() != grids.len() {
            return Err(AsrError::dim("latent", "scales", grids.len(), self.scales.len()));
        }
        for (s, g) in self.scales.iter().zip(grids) {
            if s.len() != g.cells() {
                return Err(AsrError::dim("latent", "cells", g.cells(), s.len()));
            }
            for p in s {
                p.validate()?;
            }
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(AsrError::Contract(format!("background {:?} outside [0, 1]", self.background)));
        }
        Ok(())
    }
}
