#![allow(dead_code)]

pub mod cart;
pub mod criteria;

use std::time::Instant;

use asr::autodiff::Tensor;
use asr::data::{single_ellipse_scenes, GtEllipse};
use asr::evaluation::compute_metrics;
use asr::model::{AsrConfig, AsrModel};
use asr::training::{train, LossConfig, RunSpec, Variant};

pub const RECOVERY_SCENES: usize = 200;
pub const RECOVERY_HELD_OUT: usize = 50;
pub const RECOVERY_GATES: [f64; 3] = [0.0, 0.0, 1.0];
pub const RECOVERY_MARGIN: usize = 4;

#[derive(Debug)]
pub struct Recovery {
    pub epochs: usize,
    pub test_mmse: f64,
    /// Held-out scenes whose recovered semi-axes are within 20%.
    pub matched: usize,
    pub held_out: usize,
    pub seconds: f64,
}

/// Semi-axes (major, minor) of the most visible primitive of the active
/// scale, in pixels.
pub fn dominant_axes(cells: &[asr::renderer::EllipseParams], spacing: f64) -> (f64, f64) {
    let best = cells
        .iter()
        .max_by(|a, b| {
            let mass = |p: &asr::renderer::EllipseParams| p.w * p.h * p.a.iter().sum::<f64>();
            mass(a).total_cmp(&mass(b))
        })
        .expect("non-empty grid");
    let (a, b) = (best.w * spacing, best.h * spacing);
    (a.max(b), a.min(b))
}

pub fn axes_match(gt: &GtEllipse, got: (f64, f64), tol: f64) -> bool {
    let want = (gt.rx.max(gt.ry), gt.rx.min(gt.ry));
    (got.0 - want.0).abs() <= tol * want.0 && (got.1 - want.1).abs() <= tol * want.1
}

/// Trains the 64-pixel ASR with only the coarsest scale open on
/// single-ellipse scenes and scores the held-out set.
pub fn ellipse_recovery(seed: u64, max_epochs: usize) -> Recovery {
    let start = Instant::now();
    let cfg = AsrConfig::small();
    let side = cfg.image_side;
    let grid = cfg.grids[2];
    let axes = (6.0, 14.0);
    let data: Vec<(Tensor<f32>, GtEllipse)> = single_ellipse_scenes(RECOVERY_SCENES + RECOVERY_HELD_OUT + 40, side, grid, axes, seed);
    let images: Vec<Tensor<f32>> = data.iter().map(|(t, _)| t.clone()).collect();
    let (train_set, rest) = images.split_at(RECOVERY_SCENES);
    let (val_set, test_set) = rest.split_at(40);
    let spec = RunSpec {
        variant: Variant::Base,
        seed,
        max_epochs: Some(max_epochs),
        batches_per_epoch: RECOVERY_SCENES.div_ceil(32),
        fixed_gates: Some(RECOVERY_GATES.to_vec()),
        loss: LossConfig {
            margin: RECOVERY_MARGIN,
            ..LossConfig::default()
        },
        ..RunSpec::default()
    };
    let mut model = AsrModel::<f32>::new(cfg.clone(), seed).unwrap();
    let report = train(&mut model, &spec, train_set, val_set).unwrap();
    let batch = Tensor::stack(&test_set.iter().collect::<Vec<_>>()).unwrap();
    let (recon, latents) = model.infer(&batch, &RECOVERY_GATES, 32).unwrap();
    let test_mmse = compute_metrics(&batch, &recon, RECOVERY_MARGIN).unwrap().mmse;
    let spacing = (side / grid) as f64;
    let matched = latents
        .iter()
        .zip(&data[RECOVERY_SCENES + 40..])
        .filter(|(l, (_, gt))| axes_match(gt, dominant_axes(&l.scales[2], spacing), 0.2))
        .count();
    Recovery {
        epochs: report.log.len(),
        test_mmse,
        matched,
        held_out: test_set.len(),
        seconds: start.elapsed().as_secs_f64(),
    }
}
