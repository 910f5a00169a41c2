use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{AsrError, Result};

/// Denominator of the appearance regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArvNormalizer {
    /// Number of grid locations over all scales (84 by default).
    Locations,
    /// Number of shape variables over all scales (6 per location).
    Variables,
}

/// How the exponent is applied to an RGB absorption vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelReduction {
    /// `sum_c a_c^alpha`
    ElementwisePower,
    /// `|a|_2^alpha`
    NormPower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Border width, in pixels, excluded from the reconstruction error.
    pub margin: usize,
    pub lambda_a: f64,
    pub alpha: f64,
    pub scale_weights: Vec<f64>,
    pub normalizer: ArvNormalizer,
    pub reduction: ChannelReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 16,
            lambda_a: 0.009,
            alpha: 0.75,
            scale_weights: vec![0.6, 0.9, 1.2],
            normalizer: ArvNormalizer::Locations,
            reduction: ChannelReduction::ElementwisePower,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, image_side: usize) -> Result<()> {
        if 2 * self.margin >= image_side {
            return Err(AsrError::Config(format!(
                "margin {} leaves no interior in a {image_side}-pixel image",
                self.margin
            )));
        }
        if !(self.alpha > 0.5 && self.alpha < 1.0) {
            return Err(AsrError::Config(format!("alpha must lie in (0.5, 1), got {}", self.alpha)));
        }
        if self.lambda_a < 0.0 || self.scale_weights.iter().any(|w| *w < 0.0) {
            return Err(AsrError::Config("regularizer weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean squared error over the interior left after dropping a
/// `margin`-pixel border, averaged over batch, channels and pixels.
pub fn mmse<T: Real>(g: &mut Graph<T>, target: Var, recon: Var, margin: usize) -> Result<Var> {
    if g.shape(target) != g.shape(recon) {
        return Err(AsrError::shape(
            "mmse",
            format!("{:?} vs {:?}", g.shape(target), g.shape(recon)),
        ));
    }
    let diff = g.sub(recon, target)?;
    let inner = if margin == 0 { diff } else { g.crop(diff, margin)? };
    let sq = g.mul(inner, inner)?;
    Ok(g.mean(sq))
}

/// Plain-value counterpart of [`mmse`] for `[C, H, W]` or `[N, C, H, W]`
/// images.
pub fn mmse_value<T: Real>(target: &Tensor<T>, recon: &Tensor<T>, margin: usize) -> Result<f64> {
    if target.shape() != recon.shape() {
        return Err(AsrError::shape("mmse", format!("{:?} vs {:?}", target.shape(), recon.shape())));
    }
    let s = target.shape();
    if s.len() < 2 {
        return Err(AsrError::shape("mmse", "expected an image"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if 2 * margin >= h || 2 * margin >= w {
        return Err(AsrError::Config(format!("margin {margin} leaves no interior in a {h}x{w} image")));
    }
    let planes = target.len() / (h * w);
    let (t, r) = (target.data(), recon.data());
    let mut acc = 0.0;
    for p in 0..planes {
        for y in margin..h - margin {
            for x in margin..w - margin {
                let i = p * h * w + y * w + x;
                let d = r[i].as_f64() - t[i].as_f64();
                acc += d * d;
            }
        }
    }
    Ok(acc / (planes * (h - 2 * margin) * (w - 2 * margin)) as f64)
}

/// Appearance regularization value averaged over the batch.
///
/// `params` holds one mapped parameter map `[N, 6, gh, gw]` per scale; the
/// absorption lives in channels 3..6.
pub fn arv<T: Real>(g: &mut Graph<T>, params: &[Var], cfg: &LossConfig) -> Result<Var> {
    if params.len() != cfg.scale_weights.len() {
        return Err(AsrError::Config(format!(
            "{} scale weights for {} scales",
            cfg.scale_weights.len(),
            params.len()
        )));
    }
    let mut locations = 0usize;
    let mut batch = None;
    let mut total: Option<Var> = None;
    for (&p, &w) in params.iter().zip(&cfg.scale_weights) {
        let [n, _, gh, gw] = g.value(p).dims4("arv")?;
        if *batch.get_or_insert(n) != n {
            return Err(AsrError::dim("arv", "batch", batch.unwrap_or(0), n));
        }
        locations += gh * gw;
        let a = g.gather_cells(p, 3, 6)?;
        if g.value(a).data().iter().any(|v| *v < T::zero() || *v > T::one()) {
            return Err(AsrError::Contract("absorption outside [0, 1]".into()));
        }
        let per_cell = match cfg.reduction {
            ChannelReduction::ElementwisePower => g.pow(a, T::lit(cfg.alpha)),
            ChannelReduction::NormPower => {
                let sq = g.mul(a, a)?;
                let ones = g.constant(Tensor::ones(&[1, 3]));
                let zero = g.constant(Tensor::zeros(&[1]));
                let norm2 = g.dense(sq, ones, zero)?;
                g.pow(norm2, T::lit(cfg.alpha / 2.0))
            }
        };
        let s = g.sum(per_cell);
        let weighted = g.scale(s, T::lit(w));
        total = Some(match total {
            None => weighted,
            Some(t) => g.add(t, weighted)?,
        });
    }
    let total = total.ok_or_else(|| AsrError::Config("no scales".into()))?;
    let denom = match cfg.normalizer {
        ArvNormalizer::Locations => locations,
        ArvNormalizer::Variables => 6 * locations,
    } * batch.unwrap_or(1);
    Ok(g.scale(total, T::one() / T::lit(denom as f64)))
}

/// Loss terms of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub mmse: Var,
    pub arv: Var,
}

/// `MMSE + lambda_a * ARV` when the regularizer is active, else MMSE alone.
/// The ARV node is always recorded so it can be logged.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    target: Var,
    recon: Var,
    params: &[Var],
    cfg: &LossConfig,
    reg_active: bool,
) -> Result<LossParts> {
    let m = mmse(g, target, recon, cfg.margin)?;
    let a = arv(g, params, cfg)?;
    let total = if reg_active {
        let r = g.scale(a, T::lit(cfg.lambda_a));
        g.add(m, r)?
    } else {
        m
    };
    Ok(LossParts { total, mmse: m, arv: a })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(g: &mut Graph<f64>, fill: impl Fn(usize, usize) -> [f64; 3]) -> Vec<Var> {
        [8usize, 4, 2]
            .iter()
            .enumerate()
            .map(|(j, &side)| {
                let cells = side * side;
                let t = Tensor::from_fn(&[1, 6, side, side], |i| {
                    let (ch, cell) = (i / cells, i % cells);
                    if ch < 3 {
                        0.5
                    } else {
                        fill(j, cell)[ch - 3]
                    }
                });
                g.param(t)
            })
            .collect()
    }

    #[test]
    fn mmse_identity_and_constant_offset() {
        let mut g = Graph::<f64>::new();
        let y = g.constant(Tensor::from_fn(&[1, 3, 40, 40], |i| (i % 7) as f64 / 7.0));
        let z = mmse(&mut g, y, y, 16).unwrap();
        assert_eq!(g.value(z).item(), 0.0);
        let shifted = g.add_scalar(y, 0.1);
        let z = mmse(&mut g, y, shifted, 16).unwrap();
        assert!((g.value(z).item() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn mmse_ignores_margin() {
        let side = 40;
        let base = Tensor::<f64>::from_fn(&[1, 3, side, side], |i| (i % 11) as f64 / 11.0);
        let mut other = base.clone();
        for (i, v) in other.data_mut().iter_mut().enumerate() {
            let (y, x) = ((i / side) % side, i % side);
            if y < 16 || x < 16 || y >= side - 16 || x >= side - 16 {
                *v = 1.0 - *v;
            }
        }
        let mut g = Graph::new();
        let (a, b) = (g.constant(base.clone()), g.constant(other.clone()));
        let z = mmse(&mut g, a, b, 16).unwrap();
        assert_eq!(g.value(z).item(), 0.0);
        assert_eq!(mmse_value(&base, &other, 16).unwrap(), 0.0);
    }

    #[test]
    fn mmse_rejects_oversized_margin() {
        let mut g = Graph::<f32>::new();
        let y = g.constant(Tensor::zeros(&[1, 3, 32, 32]));
        assert!(matches!(mmse(&mut g, y, y, 16), Err(AsrError::Config(_))));
    }

    #[test]
    fn arv_single_saturated_location() {
        let mut g = Graph::<f64>::new();
        let p = maps(&mut g, |j, cell| if j == 0 && cell == 5 { [1.0; 3] } else { [0.0; 3] });
        let v = arv(&mut g, &p, &LossConfig::default()).unwrap();
        let expected = 0.6 * 3.0 / 84.0;
        assert!((g.value(v).item() - expected).abs() < 1e-12);
        assert!((expected - 0.02143).abs() < 1e-5);
    }

    #[test]
    fn arv_zero_and_monotone() {
        let mut g = Graph::<f64>::new();
        let p = maps(&mut g, |_, _| [0.0; 3]);
        let v = arv(&mut g, &p, &LossConfig::default()).unwrap();
        assert_eq!(g.value(v).item(), 0.0);
        let lo = maps(&mut g, |_, c| [0.2, 0.3, (c % 3) as f64 * 0.1]);
        let hi = maps(&mut g, |_, c| [0.2, 0.31, (c % 3) as f64 * 0.1]);
        let (vl, vh) = (arv(&mut g, &lo, &LossConfig::default()).unwrap(), arv(&mut g, &hi, &LossConfig::default()).unwrap());
        assert!(g.value(vh).item() > g.value(vl).item());
    }

    #[test]
    fn arv_rejects_out_of_range_absorption() {
        let mut g = Graph::<f64>::new();
        let p = maps(&mut g, |_, _| [1.5, 0.0, 0.0]);
        assert!(matches!(arv(&mut g, &p, &LossConfig::default()), Err(AsrError::Contract(_))));
    }

    #[test]
    fn total_loss_composition() {
        let mut g = Graph::<f64>::new();
        let p = maps(&mut g, |j, cell| if j == 0 && cell == 0 { [1.0; 3] } else { [0.0; 3] });
        let y = g.constant(Tensor::zeros(&[1, 3, 40, 40]));
        let cfg = LossConfig::default();
        let off = total_loss(&mut g, y, y, &p, &cfg, false).unwrap();
        assert_eq!(g.value(off.total).item(), g.value(off.mmse).item());
        let on = total_loss(&mut g, y, y, &p, &cfg, true).unwrap();
        assert!(g.value(on.total).item() > 0.0);
        assert!((g.value(on.total).item() - 0.009 * 0.6 * 3.0 / 84.0).abs() < 1e-15);
        // arithmetic: 0.03 + 0.009 * 0.02143
        assert!((0.03 + 0.009 * 0.02143 - 0.0301929_f64).abs() < 5e-8);
    }

    #[test]
    fn regularizer_pushes_absorption_down() {
        let mut g = Graph::<f64>::new();
        let p = maps(&mut g, |_, c| [0.1 + (c % 4) as f64 * 0.2, 0.3, 0.7]);
        let cfg = LossConfig::default();
        let a = arv(&mut g, &p, &cfg).unwrap();
        g.backward(a).unwrap();
        for v in &p {
            let gr = g.grad(*v).unwrap();
            let cells = gr.len() / 6;
            assert!(gr.data()[3 * cells..].iter().all(|&d| d > 0.0));
        }
    }
}
