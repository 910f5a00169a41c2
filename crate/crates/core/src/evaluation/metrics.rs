use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{AsrError, Result};
use crate::training::mmse_value;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub mae: f64,
    pub mse: f64,
    pub mmse: f64,
    pub ssim: f64,
}

impl ReconMetrics {
    /// Component-wise mean.
    pub fn mean(items: &[ReconMetrics]) -> ReconMetrics {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&ReconMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        ReconMetrics {
            mae: sum(|m| m.mae),
            mse: sum(|m| m.mse),
            mmse: sum(|m| m.mmse),
            ssim: sum(|m| m.ssim),
        }
    }
}

/// Normalised 1-d Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable filtering keeping only fully covered positions.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one channel plane with dynamic range 1.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mx = filter_valid(x, h, w, &k);
    let my = filter_valid(y, h, w, &k);
    let sxx = filter_valid(&prod(x, x), h, w, &k);
    let syy = filter_valid(&prod(y, y), h, w, &k);
    let sxy = filter_valid(&prod(x, y), h, w, &k);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (a, b) = (mx[i], my[i]);
        let vx = sxx[i] - a * a;
        let vy = syy[i] - b * b;
        let cxy = sxy[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cxy + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    total / n as f64
}

/// MAE and MSE over every value, MMSE with `margin`, and SSIM averaged over
/// channels. Accepts `[C, H, W]` images; a leading batch axis averages the
/// per-image metrics.
pub fn compute_metrics<T: Real>(y: &Tensor<T>, yhat: &Tensor<T>, margin: usize) -> Result<ReconMetrics> {
    if y.shape() != yhat.shape() {
        return Err(AsrError::shape("compute_metrics", format!("{:?} vs {:?}", y.shape(), yhat.shape())));
    }
    match y.shape() {
        &[n, _, _, _] => {
            let per = (0..n)
                .map(|i| compute_metrics(&y.index_first(i)?, &yhat.index_first(i)?, margin))
                .collect::<Result<Vec<_>>>()?;
            Ok(ReconMetrics::mean(&per))
        }
        &[c, h, w] => {
            if h < SSIM_WINDOW || w < SSIM_WINDOW {
                return Err(AsrError::shape("compute_metrics", format!("{h}x{w} is smaller than the SSIM window")));
            }
            let a: Vec<f64> = y.data().iter().map(|v| v.as_f64()).collect();
            let b: Vec<f64> = yhat.data().iter().map(|v| v.as_f64()).collect();
            let len = a.len() as f64;
            let mae = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / len;
            let mse = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / len;
            let hw = h * w;
            let ssim = (0..c)
                .map(|ch| ssim_plane(&a[ch * hw..(ch + 1) * hw], &b[ch * hw..(ch + 1) * hw], h, w))
                .sum::<f64>()
                / c as f64;
            Ok(ReconMetrics {
                mae,
                mse,
                mmse: mmse_value(y, yhat, margin)?,
                ssim,
            })
        }
        s => Err(AsrError::shape("compute_metrics", format!("expected [C, H, W] or [N, C, H, W], got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(f: impl FnMut(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[3, 24, 24], f)
    }

    #[test]
    fn identity_and_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = img(|_| rng.gen_range(0.0..1.0));
        let m = compute_metrics(&y, &y, 4).unwrap();
        assert_eq!((m.mae, m.mse, m.mmse), (0.0, 0.0, 0.0));
        assert!((m.ssim - 1.0).abs() < 1e-12);
        let m = compute_metrics(&img(|_| 0.0), &img(|_| 1.0), 4).unwrap();
        assert_eq!((m.mae, m.mse), (1.0, 1.0));
    }

    #[test]
    fn constant_offset() {
        let m = compute_metrics(&img(|_| 0.5), &img(|_| 0.6), 4).unwrap();
        assert!((m.mae - 0.1).abs() < 1e-12);
        assert!((m.mse - 0.01).abs() < 1e-12);
        // flat fields: luminance term only
        let c1 = 1e-4;
        let expect = (2.0 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1);
        assert!((m.ssim - expect).abs() < 1e-9, "{}", m.ssim);
        assert!(m.ssim < 1.0);
    }

    #[test]
    fn matches_direct_window_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w) = (14, 13);
        let x: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        // direct 2-d weights from the unnormalised Gaussian
        let c = 5.0;
        let mut wts = vec![0.0; 121];
        for i in 0..11 {
            for j in 0..11 {
                wts[i * 11 + j] = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / 4.5).exp();
            }
        }
        let z: f64 = wts.iter().sum();
        let mut acc = 0.0;
        let mut n = 0.0;
        for oy in 0..=h - 11 {
            for ox in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = wts[i * 11 + j] / z;
                        let (a, b) = (x[(oy + i) * w + ox + j], y[(oy + i) * w + ox + j]);
                        mx += k * a;
                        my += k * b;
                        sxx += k * a * a;
                        syy += k * b * b;
                        sxy += k * a * b;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + 1e-4) * (2.0 * cxy + 9e-4)) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
                n += 1.0;
            }
        }
        assert!((ssim_plane(&x, &y, h, w) - acc / n).abs() < 1e-12);
    }

    #[test]
    fn batch_is_mean_of_images() {
        let a = img(|i| (i % 7) as f64 / 7.0);
        let b = img(|i| (i % 5) as f64 / 5.0);
        let ya = Tensor::stack(&[&a, &b]).unwrap();
        let yb = Tensor::stack(&[&b, &b]).unwrap();
        let m = compute_metrics(&ya, &yb, 2).unwrap();
        let single = compute_metrics(&a, &b, 2).unwrap();
        assert!((m.mse - single.mse / 2.0).abs() < 1e-12);
        assert!((m.ssim - (single.ssim + 1.0) / 2.0).abs() < 1e-12);
        assert!(compute_metrics(&a, &ya, 2).is_err());
    }
}
