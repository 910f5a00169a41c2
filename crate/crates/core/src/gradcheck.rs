//! Finite-difference audit of every differentiable operation.
//!
//! Each check draws random 64-bit instances, reduces the op output to a
//! scalar with a fixed random projection and compares tape gradients with
//! central differences for every input.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::fd::{self, FdConfig};
use crate::autodiff::{BatchNormMode, CanvasLayout, Graph, ParamSet, Tensor, Var};
use crate::error::{AsrError, Result};
use crate::model::layers::Ctx;
use crate::model::{AsrConfig, AsrModel, ConvSpec};
use crate::renderer::{render_scene, RenderConfig, ScaleConfig};
use crate::training::{total_loss, LossConfig};

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for composed renderer and model pipelines.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Check {
    Conv2d,
    GridSample,
    AffineGrid,
    EllipseAffine,
    BatchNormTrain,
    BatchNormEval,
    Dense,
    Relu,
    Elu,
    Sigmoid,
    MaxPool,
    Upsample,
    AddSubMul,
    Pow,
    Reductions,
    ChannelScale,
    ChannelAffine,
    Crop,
    GatherCells,
    FuseCanvas,
    Mmse,
    Arv,
    Renderer,
    AsrModel,
}

impl Check {
    pub const ALL: [Check; 24] = [
        Check::Conv2d,
        Check::GridSample,
        Check::AffineGrid,
        Check::EllipseAffine,
        Check::BatchNormTrain,
        Check::BatchNormEval,
        Check::Dense,
        Check::Relu,
        Check::Elu,
        Check::Sigmoid,
        Check::MaxPool,
        Check::Upsample,
        Check::AddSubMul,
        Check::Pow,
        Check::Reductions,
        Check::ChannelScale,
        Check::ChannelAffine,
        Check::Crop,
        Check::GatherCells,
        Check::FuseCanvas,
        Check::Mmse,
        Check::Arv,
        Check::Renderer,
        Check::AsrModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Conv2d => "conv2d",
            Check::GridSample => "grid_sample",
            Check::AffineGrid => "affine_grid",
            Check::EllipseAffine => "ellipse_affine",
            Check::BatchNormTrain => "batchnorm_train",
            Check::BatchNormEval => "batchnorm_eval",
            Check::Dense => "dense",
            Check::Relu => "relu",
            Check::Elu => "elu",
            Check::Sigmoid => "sigmoid",
            Check::MaxPool => "maxpool",
            Check::Upsample => "upsample",
            Check::AddSubMul => "add_sub_mul",
            Check::Pow => "pow",
            Check::Reductions => "sum_mean",
            Check::ChannelScale => "channel_scale",
            Check::ChannelAffine => "channel_affine",
            Check::Crop => "crop",
            Check::GatherCells => "gather_cells",
            Check::FuseCanvas => "fuse_canvas",
            Check::Mmse => "mmse",
            Check::Arv => "arv",
            Check::Renderer => "renderer_loss",
            Check::AsrModel => "asr_model_loss",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn is_end_to_end(self) -> bool {
        matches!(self, Check::Renderer | Check::AsrModel)
    }

    pub fn tolerance(self) -> f64 {
        if self.is_end_to_end() {
            END_TO_END_TOLERANCE
        } else {
            OP_TOLERANCE
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Worst relative error of one check over all its instances.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub op: String,
    pub instances: usize,
    pub probes: usize,
    /// Probes redrawn because the difference stencil crossed a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1]` and random sign, away from kinks at 0.
fn signed_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced at least 0.01 apart, shuffled.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 + rng.gen_range(0.0..0.02)).collect();
    rand::seq::SliceRandom::shuffle(v.as_mut_slice(), rng);
    Tensor::new(shape.to_vec(), v).expect("shape matches")
}

/// Grid of sampling coordinates whose pixel positions keep a distance of at
/// least 0.05 px from integer sample locations.
fn off_lattice_grid(b: usize, oh: usize, ow: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[b, oh, ow, 2], |i| {
        let extent = if i % 2 == 0 { w } else { h };
        // range slightly beyond the raster so zero padding is exercised
        let cell = rng.gen_range(-1..extent as i64) as f64;
        let px = cell + rng.gen_range(0.05..0.95);
        px / (extent - 1) as f64 * 2.0 - 1.0
    })
}

/// Runs the finite-difference comparison of `f(inputs)` reduced by a
/// random projection.
fn compare(
    inputs: Vec<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
    cfg: FdConfig,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<fd::FdReport> {
    let shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.shape(out).to_vec()
    };
    let weights = uniform(&shape, -1.0, 1.0, rng);
    fd::check(&inputs, cfg, rng, |g, v| {
        let y = f(g, v)?;
        fd::project(g, y, &weights)
    })
}

fn small_asr() -> AsrConfig {
    let c = |channels| vec![ConvSpec { channels, kernel: 3, stride: 2 }];
    AsrConfig {
        image_side: 32,
        blocks: vec![c(6), c(8), c(8)],
        background_hidden: 8,
        grids: vec![8, 4, 2],
        sharpness: 1.0,
        bn_momentum: 0.1,
    }
}

fn scene_scales() -> Vec<ScaleConfig> {
    [8usize, 4, 2]
        .iter()
        .map(|&g| ScaleConfig { grid_h: g, grid_w: g, spacing: 32 / g })
        .collect()
}

/// Mapped primitive parameters `[n, 6, g, g]` inside the admissible ranges
/// and away from their bounds.
fn primitive_map(n: usize, g: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let cells = g * g;
    Tensor::from_fn(&[n, 6, g, g], |i| match (i / cells) % 6 {
        0 | 1 => rng.gen_range(0.4..1.8),
        2 => rng.gen_range(0.2..6.0),
        _ => rng.gen_range(0.1..0.9),
    })
}

/// Gradient of the full model loss w.r.t. `probes` random trainable
/// scalars, compared with central differences of the same loss.
fn model_instance(rng: &mut ChaCha8Rng, probes: usize, step: f64, floor: f64) -> Result<fd::FdReport> {
    let cfg = small_asr();
    let model = AsrModel::<f64>::new(cfg.clone(), rng.gen())?;
    let image = uniform(&[2, 3, 32, 32], 0.05, 0.95, rng);
    let gates: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..1.0)).collect();
    let loss_cfg = LossConfig {
        margin: 4,
        ..LossConfig::default()
    };
    type Eval = (f64, u64, Vec<Option<Tensor<f64>>>);
    let eval = |params: &ParamSet<f64>, backward: bool| -> Result<Eval> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, params, true);
        let x = g.constant(image.clone());
        let out = model.forward(&mut g, &mut ctx, x, &gates)?;
        let parts = total_loss(&mut g, x, out.recon, &out.maps, &loss_cfg, true)?;
        let value = g.value(parts.total).item();
        let sig = g.piece_signature();
        if !backward {
            return Ok((value, sig, Vec::new()));
        }
        g.backward(parts.total)?;
        let (binding, _) = ctx.into_stats();
        Ok((value, sig, binding.grads(&g, params)))
    };
    let (_, base, grads) = eval(&model.params, true)?;
    let trainable: Vec<(usize, usize)> = model
        .params
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable)
        .flat_map(|(k, e)| (0..e.value.len()).map(move |i| (k, i)))
        .collect();
    let mut report = fd::FdReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        probes: 0,
        skipped: 0,
    };
    let mut work = model.params.clone();
    let mut attempts = 0;
    while report.probes < probes && attempts < 5 * probes {
        attempts += 1;
        let (k, i) = trainable[rng.gen_range(0..trainable.len())];
        let orig = work.entries()[k].value.data()[i];
        work.entries_mut()[k].value.data_mut()[i] = orig + step;
        let (plus, sig_plus, _) = eval(&work, false)?;
        work.entries_mut()[k].value.data_mut()[i] = orig - step;
        let (minus, sig_minus, _) = eval(&work, false)?;
        work.entries_mut()[k].value.data_mut()[i] = orig;
        if sig_plus != base || sig_minus != base {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads[k].as_ref().map_or(0.0, |t| t.data()[i]);
        let err = fd::relative_error(analytic, numeric, floor);
        report.probes += 1;
        if !(err <= report.max_rel_err) {
            report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_input = k;
            report.worst_index = i;
        }
    }
    Ok(report)
}

fn instance(check: Check, rng: &mut ChaCha8Rng, cfg: FdConfig) -> Result<fd::FdReport> {
    match check {
        Check::Conv2d => {
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=2);
            let inputs = vec![
                uniform(&[2, 3, 8, 8], -1.0, 1.0, rng),
                uniform(&[4, 3, 3, 3], -1.0, 1.0, rng),
                uniform(&[4], -1.0, 1.0, rng),
            ];
            compare(inputs, rng, cfg, |g, v| g.conv2d(v[0], v[1], v[2], stride, pad))
        }
        Check::GridSample => {
            let shared = rng.gen_bool(0.5);
            let inputs = vec![
                uniform(&[if shared { 1 } else { 2 }, 2, 6, 6], -1.0, 1.0, rng),
                off_lattice_grid(2, 5, 5, 6, 6, rng),
            ];
            compare(inputs, rng, cfg, |g, v| g.grid_sample(v[0], v[1]))
        }
        Check::AffineGrid => {
            let side = rng.gen_range(3..8);
            compare(vec![uniform(&[3, 2, 3], -1.5, 1.5, rng)], rng, cfg, move |g, v| g.affine_grid(v[0], side))
        }
        Check::EllipseAffine => {
            let rows = Tensor::from_fn(&[5, 6], |i| match i % 6 {
                0 | 1 => rng.gen_range(0.1..2.0),
                2 => rng.gen_range(0.0..std::f64::consts::TAU),
                _ => rng.gen_range(0.0..1.0),
            });
            compare(vec![rows], rng, cfg, |g, v| g.ellipse_affine(v[0]))
        }
        Check::BatchNormTrain | Check::BatchNormEval => {
            let train = check == Check::BatchNormTrain;
            let inputs = vec![
                uniform(&[3, 2, 3, 3], -1.0, 2.0, rng),
                uniform(&[2], 0.5, 1.5, rng),
                uniform(&[2], -0.5, 0.5, rng),
            ];
            let mean: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..2).map(|_| rng.gen_range(0.5..2.0)).collect();
            compare(inputs, rng, cfg, move |g, v| {
                let mode = if train {
                    BatchNormMode::Train { eps: 1e-5 }
                } else {
                    BatchNormMode::Eval {
                        mean: &mean,
                        var: &var,
                        eps: 1e-5,
                    }
                };
                Ok(g.batch_norm2d(v[0], v[1], v[2], mode)?.0)
            })
        }
        Check::Dense => {
            let inputs = vec![
                uniform(&[3, 5], -1.0, 1.0, rng),
                uniform(&[4, 5], -1.0, 1.0, rng),
                uniform(&[4], -1.0, 1.0, rng),
            ];
            compare(inputs, rng, cfg, |g, v| g.dense(v[0], v[1], v[2]))
        }
        Check::Relu => compare(vec![signed_away_from_zero(&[2, 3, 4], rng)], rng, cfg, |g, v| Ok(g.relu(v[0]))),
        Check::Elu => {
            let alpha = rng.gen_range(0.5..1.5);
            compare(vec![signed_away_from_zero(&[2, 3, 4], rng)], rng, cfg, move |g, v| Ok(g.elu(v[0], alpha)))
        }
        Check::Sigmoid => compare(vec![uniform(&[2, 3, 4], -4.0, 4.0, rng)], rng, cfg, |g, v| Ok(g.sigmoid(v[0]))),
        Check::MaxPool => compare(vec![distinct(&[2, 2, 4, 5], rng)], rng, cfg, |g, v| g.max_pool2d(v[0])),
        Check::Upsample => compare(vec![uniform(&[2, 2, 3, 3], -1.0, 1.0, rng)], rng, cfg, |g, v| {
            g.upsample_nearest2x(v[0])
        }),
        Check::AddSubMul => {
            let inputs = vec![uniform(&[2, 3, 4], -1.0, 1.0, rng), uniform(&[2, 3, 4], -1.0, 1.0, rng)];
            let (s, c) = (rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0));
            compare(inputs, rng, cfg, move |g, v| {
                let a = g.add(v[0], v[1])?;
                let m = g.mul(a, v[1])?;
                let d = g.sub(m, v[0])?;
                let sc = g.scale(d, s);
                Ok(g.add_scalar(sc, c))
            })
        }
        Check::Pow => {
            let p = rng.gen_range(0.5..3.0);
            compare(vec![uniform(&[2, 3, 4], 0.1, 1.5, rng)], rng, cfg, move |g, v| Ok(g.pow(v[0], p)))
        }
        Check::Reductions => {
            compare(vec![uniform(&[2, 3, 4], -1.0, 1.0, rng)], rng, cfg, |g, v| {
                let s = g.sum(v[0]);
                let sq = g.mul(v[0], v[0])?;
                let m = g.mean(sq);
                let r = g.reshape(m, &[1])?;
                let s = g.reshape(s, &[1])?;
                g.mul(r, s)
            })
        }
        Check::ChannelScale => {
            let ci = if rng.gen_bool(0.5) { 1 } else { 3 };
            let inputs = vec![uniform(&[2, ci, 4, 4], 0.0, 1.0, rng), uniform(&[2, 3], 0.0, 1.0, rng)];
            compare(inputs, rng, cfg, |g, v| g.channel_scale(v[0], v[1]))
        }
        Check::ChannelAffine => {
            let scale: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let offset: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            compare(vec![uniform(&[2, 3, 2, 2], -1.0, 1.0, rng)], rng, cfg, move |g, v| {
                g.channel_affine(v[0], &scale, &offset)
            })
        }
        Check::Crop => {
            let m = rng.gen_range(1..=2);
            compare(vec![uniform(&[2, 2, 6, 6], -1.0, 1.0, rng)], rng, cfg, move |g, v| g.crop(v[0], m))
        }
        Check::GatherCells => {
            let start = rng.gen_range(0..4);
            let end = rng.gen_range(start + 1..=6);
            compare(vec![uniform(&[2, 6, 3, 3], -1.0, 1.0, rng)], rng, cfg, move |g, v| {
                g.gather_cells(v[0], start, end)
            })
        }
        Check::FuseCanvas => {
            let grid = rng.gen_range(1..=3);
            let spacing = rng.gen_range(1..=3);
            let layout = CanvasLayout {
                batch: 2,
                grid_h: grid,
                grid_w: grid,
                spacing,
                height: grid * spacing,
                width: grid * spacing,
            };
            let side = 2 * spacing + 1;
            let rasters = uniform(&[2 * grid * grid, 3, side, side], 0.0, 0.95, rng);
            compare(vec![rasters], rng, cfg, move |g, v| g.fuse_canvas(v[0], layout))
        }
        Check::Mmse => {
            let margin = rng.gen_range(0..=2);
            let inputs = vec![uniform(&[2, 3, 8, 8], 0.0, 1.0, rng), uniform(&[2, 3, 8, 8], 0.0, 1.0, rng)];
            compare(inputs, rng, cfg, move |g, v| crate::training::mmse(g, v[0], v[1], margin))
        }
        Check::Arv => {
            let loss = LossConfig {
                alpha: rng.gen_range(0.55..0.95),
                ..LossConfig::default()
            };
            let inputs = vec![primitive_map(2, 4, rng), primitive_map(2, 2, rng), primitive_map(2, 1, rng)];
            compare(inputs, rng, cfg, move |g, v| crate::training::arv(g, v, &loss))
        }
        Check::Renderer => {
            let render = RenderConfig {
                sharpness: rng.gen_range(0.5..2.0),
                image_side: 32,
            };
            let loss = LossConfig {
                margin: 4,
                alpha: rng.gen_range(0.55..0.95),
                ..LossConfig::default()
            };
            let inputs = vec![
                primitive_map(1, 8, rng),
                primitive_map(1, 4, rng),
                primitive_map(1, 2, rng),
                uniform(&[1, 3], 0.5, 1.0, rng),
                uniform(&[1, 3, 32, 32], 0.0, 1.0, rng),
            ];
            let scales = scene_scales();
            fd::check(&inputs, cfg, rng, move |g, v| {
                let recon = render_scene(g, &render, &scales, &v[..3], v[3])?;
                Ok(total_loss(g, v[4], recon, &v[..3], &loss, true)?.total)
            })
        }
        Check::AsrModel => model_instance(rng, 10, cfg.step, cfg.floor),
    }
}

/// Runs `instances` random instances of `check`.
pub fn run_check(check: Check, instances: usize, seed: u64) -> Result<CheckResult> {
    if instances == 0 {
        return Err(AsrError::Config("at least one instance is required".into()));
    }
    let cfg = FdConfig::default();
    let mut result = CheckResult {
        op: check.name().to_string(),
        instances,
        probes: 0,
        skipped: 0,
        max_rel_err: 0.0,
        tolerance: check.tolerance(),
        passed: false,
    };
    let salt = Check::ALL.iter().position(|c| *c == check).unwrap_or(0) as u64;
    for k in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(salt * 10_007 + k as u64));
        let rep = instance(check, &mut rng, cfg)?;
        result.probes += rep.probes;
        result.skipped += rep.skipped;
        if !(rep.max_rel_err <= result.max_rel_err) {
            result.max_rel_err = rep.max_rel_err;
        }
    }
    result.passed = result.max_rel_err <= result.tolerance;
    Ok(result)
}

pub fn run_suite(checks: &[Check], instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    checks.iter().map(|&c| run_check(c, instances, seed)).collect()
}
