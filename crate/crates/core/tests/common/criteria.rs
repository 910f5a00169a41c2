//! Acceptance checks. Each returns an `Outcome` instead of panicking so a
//! runner can report all of them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use asr::autodiff::{CanvasLayout, Graph, Tensor};
use asr::classify::{asr_feature_names, class_metrics, GridSpec};
use asr::data::{generate_synthetic_dataset, SynthConfig};
use asr::evaluation::{run_experiment, DatasetConfig, ExperimentConfig};
use asr::gradcheck::{run_suite, Check};
use asr::model::{AsrConfig, AsrModel};
use asr::renderer::{default_scales, render_blob, render_primitives, transform_blob, EllipseParams, RenderConfig, MAX_SCALE, MIN_SCALE};
use asr::training::{arv, mmse, mmse_value, plan_epoch, schedule_step, LossConfig, ScheduleConfig, Variant};

use super::cart;

#[derive(Debug)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(name: &'static str, failures: Vec<String>, summary: String) -> Self {
        let passed = failures.is_empty();
        let detail = if passed { summary } else { format!("{summary}; {}", failures.join("; ")) };
        Self { name, passed, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub const GRADIENT_INSTANCES: usize = 100;
pub const GRADIENT_BUDGET_S: f64 = 300.0;

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let results = match run_suite(&Check::ALL, GRADIENT_INSTANCES, 0) {
        Ok(r) => r,
        Err(e) => return Outcome::new("gradient suite", vec![e.to_string()], String::new()),
    };
    for r in &results {
        if r.instances != GRADIENT_INSTANCES {
            failures.push(format!("{} ran {} instances", r.op, r.instances));
        }
        let tol = if Check::parse(&r.op).is_some_and(Check::is_end_to_end) { 1e-3 } else { 1e-4 };
        if !(r.max_rel_err <= tol) {
            failures.push(format!("{} rel err {:.2e} > {tol:.0e}", r.op, r.max_rel_err));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= GRADIENT_BUDGET_S {
        failures.push(format!("took {secs:.0} s"));
    }
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Outcome::new(
        "gradient suite",
        failures,
        format!("{} ops x {GRADIENT_INSTANCES} instances, worst rel err {worst:.1e}, {secs:.0} s", results.len()),
    )
}

fn random_params(rng: &mut ChaCha8Rng) -> EllipseParams {
    EllipseParams {
        w: rng.gen_range(MIN_SCALE..MAX_SCALE),
        h: rng.gen_range(MIN_SCALE..MAX_SCALE),
        d: rng.gen_range(0.0..std::f64::consts::TAU),
        a: [0, 1, 2].map(|_| rng.gen_range(0.0..1.0)),
    }
}

fn fuse(rasters: Tensor<f64>, layout: CanvasLayout) -> Tensor<f64> {
    let mut g = Graph::new();
    let r = g.constant(rasters);
    let c = g.fuse_canvas(r, layout).expect("fuse");
    g.value(c).clone()
}

pub const ABSORPTION_DRAWS: usize = 1000;

pub fn renderer_invariants() -> Outcome {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let side = 32;
    let cfg = RenderConfig { sharpness: 1.0, image_side: side };
    let scales = default_scales(side);
    let scene = |rng: &mut ChaCha8Rng| -> Vec<Vec<EllipseParams>> {
        scales.iter().map(|s| (0..s.cells()).map(|_| random_params(rng)).collect()).collect()
    };

    // range
    for _ in 0..50 {
        let bg = [0, 1, 2].map(|_| rng.gen_range(0.0..=1.0));
        let img = render_primitives::<f64>(&cfg, &scales, &scene(&mut rng), bg).expect("render");
        if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            failures.push("pixel outside [0, 1]".into());
            break;
        }
    }

    // blob edge sits at sigmoid(0)
    for (sharpness, r) in [(1.0, 8usize), (3.0, 16), (0.5, 32)] {
        let b = render_blob::<f64>(sharpness, r);
        let s = 2 * r + 1;
        for v in [b.data()[r * s + 2 * r], b.data()[r], b.data()[r * s]] {
            if v != 0.5 {
                failures.push(format!("edge value {v} at sharpness {sharpness}"));
            }
        }
    }

    // fusion: 2x2 grid, spacing 2, 5x5 rasters, 4x4 canvas; centres at 1 and 3
    let layout = CanvasLayout { batch: 1, grid_h: 2, grid_w: 2, spacing: 2, height: 4, width: 4 };
    let values = [0.1, 0.2, 0.3, 0.4];
    let rasters = Tensor::from_fn(&[4, 1, 5, 5], |i| values[i / 25]);
    let canvas = fuse(rasters, layout);
    for ((y, x), want) in [((2, 2), 0.9 * 0.8 * 0.7 * 0.6), ((0, 2), 0.9 * 0.8), ((0, 0), 0.9)] {
        let got = canvas.data()[y * 4 + x];
        if (got - want).abs() > 1e-15 {
            failures.push(format!("fusion at ({y}, {x}): {got} vs {want}"));
        }
    }

    let identity = EllipseParams { w: 1.0, h: 1.0, d: 0.0, a: [1.0; 3] };
    for r in [4usize, 16] {
        let b = render_blob::<f64>(1.0, r);
        let out = transform_blob(&b, &identity).expect("transform");
        let diff = out.max_abs_diff(&b);
        if diff > 1e-6 {
            failures.push(format!("identity affine differs by {diff:.1e} at radius {r}"));
        }
    }

    // raising one absorption never brightens its channel and leaves the others alone
    let mut violations = 0;
    for _ in 0..ABSORPTION_DRAWS {
        let cells = scene(&mut rng);
        let (s, c, ch) = {
            let s = rng.gen_range(0..scales.len());
            (s, rng.gen_range(0..scales[s].cells()), rng.gen_range(0..3))
        };
        let mut more = cells.clone();
        let a = &mut more[s][c].a[ch];
        *a = rng.gen_range(*a..=1.0);
        let bg = [0.9, 0.85, 0.95];
        let lo = render_primitives::<f64>(&cfg, &scales, &cells, bg).expect("render");
        let hi = render_primitives::<f64>(&cfg, &scales, &more, bg).expect("render");
        let plane = side * side;
        let ok = (0..3 * plane).all(|i| {
            let (l, h) = (lo.data()[i], hi.data()[i]);
            if i / plane == ch {
                h <= l
            } else {
                h == l
            }
        });
        if !ok {
            violations += 1;
        }
    }
    if violations > 0 {
        failures.push(format!("{violations}/{ABSORPTION_DRAWS} absorption draws not monotone"));
    }
    Outcome::new(
        "renderer invariants",
        failures,
        format!("range, edge value, 3 fusion overlaps, identity affine, {ABSORPTION_DRAWS} absorption draws"),
    )
}

/// Gate table written out by hand: beta_0 is always 1, beta_1 sits at 0.01
/// through epoch 8 and climbs by 0.1 per epoch, beta_2 likewise from 20.
pub fn gate_table() -> Vec<[f64; 3]> {
    let ramp = |start: usize, e: usize| -> f64 {
        const STEPS: [f64; 10] = [0.01, 0.11, 0.21, 0.31, 0.41, 0.51, 0.61, 0.71, 0.81, 0.91];
        let k = e.saturating_sub(start);
        if k < STEPS.len() {
            STEPS[k]
        } else {
            1.0
        }
    };
    (1..=55).map(|e| [1.0, ramp(8, e), ramp(20, e)]).collect()
}

pub fn schedule_and_loss() -> Outcome {
    let mut failures = Vec::new();
    let cfg = ScheduleConfig::default();
    for (i, want) in gate_table().iter().enumerate() {
        let e = i + 1;
        let plan = schedule_step(e, &cfg);
        if plan.gates.iter().zip(want).any(|(g, w)| (g - w).abs() > 1e-12) {
            failures.push(format!("epoch {e}: gates {:?} vs {want:?}", plan.gates));
        }
        if plan.reg_active != (e >= 35) {
            failures.push(format!("epoch {e}: regularizer {}", plan.reg_active));
        }
        let inc = plan_epoch(Variant::Incremental, e, &cfg);
        if inc != plan {
            failures.push(format!("epoch {e}: incremental plan differs"));
        }
        let base = plan_epoch(Variant::Base, e, &cfg);
        if base.gates != vec![1.0; 3] || base.reg_active {
            failures.push(format!("epoch {e}: base plan {base:?}"));
        }
        if !plan_epoch(Variant::Regularized, e, &cfg).reg_active {
            failures.push(format!("epoch {e}: regularized plan without regularizer"));
        }
    }

    // margin perturbations leave MMSE bit-identical
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (side, m) = (64usize, 16usize);
    for trial in 0..20 {
        let y = Tensor::<f64>::from_fn(&[2, 3, side, side], |_| rng.gen_range(0.0..1.0));
        let r = Tensor::<f64>::from_fn(&[2, 3, side, side], |_| rng.gen_range(0.0..1.0));
        let mut p = r.clone();
        for (i, v) in p.data_mut().iter_mut().enumerate() {
            let (yy, xx) = ((i / side) % side, i % side);
            if yy < m || xx < m || yy >= side - m || xx >= side - m {
                *v = rng.gen_range(-5.0..5.0);
            }
        }
        let plain = mmse_value(&y, &r, m).expect("mmse");
        let perturbed = mmse_value(&y, &p, m).expect("mmse");
        let mut g = Graph::new();
        let (vy, vr, vp) = (g.constant(y.clone()), g.constant(r), g.constant(p));
        let a = mmse(&mut g, vy, vr, m).expect("mmse");
        let b = mmse(&mut g, vy, vp, m).expect("mmse");
        if plain != perturbed || g.value(a).item() != g.value(b).item() {
            failures.push(format!("trial {trial}: margin changed MMSE"));
        }
    }

    // ARV examples: one saturated location at scale 0, and every absorption 0.5
    let loss = LossConfig::default();
    let examples: [(fn(usize, usize) -> [f64; 3], f64); 2] = [
        (|j, cell| if j == 0 && cell == 5 { [1.0; 3] } else { [0.0; 3] }, 0.6 * 3.0 / 84.0),
        (|_, _| [0.5; 3], (0.6 * 64.0 + 0.9 * 16.0 + 1.2 * 4.0) * 3.0 * 0.5f64.powf(0.75) / 84.0),
    ];
    for (k, (fill, want)) in examples.iter().enumerate() {
        let mut g = Graph::<f64>::new();
        let maps: Vec<_> = [8usize, 4, 2]
            .iter()
            .enumerate()
            .map(|(j, &n)| {
                let cells = n * n;
                g.constant(Tensor::from_fn(&[1, 6, n, n], |i| {
                    let (ch, cell) = (i / cells, i % cells);
                    if ch < 3 {
                        0.5
                    } else {
                        fill(j, cell)[ch - 3]
                    }
                }))
            })
            .collect();
        let v = arv(&mut g, &maps, &loss).expect("arv");
        let got = g.value(v).item();
        if (got - want).abs() > 1e-12 {
            failures.push(format!("ARV example {k}: {got} vs {want}"));
        }
    }
    Outcome::new(
        "schedule and loss exactness",
        failures,
        "gate table epochs 1-55, 20 margin perturbations, 2 ARV examples".into(),
    )
}

pub const RECOVERY_MAX_EPOCHS: usize = 50;
pub const RECOVERY_BUDGET_S: f64 = 600.0;

pub fn ellipse_recovery() -> Outcome {
    let r = super::ellipse_recovery(0, RECOVERY_MAX_EPOCHS);
    let mut failures = Vec::new();
    if !(r.test_mmse <= 0.01) {
        failures.push(format!("test MMSE {:.4} > 0.01", r.test_mmse));
    }
    if (r.matched as f64) < 0.8 * r.held_out as f64 {
        failures.push(format!("only {}/{} within 20%", r.matched, r.held_out));
    }
    if r.epochs > RECOVERY_MAX_EPOCHS {
        failures.push(format!("{} epochs", r.epochs));
    }
    if r.seconds >= RECOVERY_BUDGET_S {
        failures.push(format!("took {:.0} s", r.seconds));
    }
    Outcome::new(
        "ellipse recovery",
        failures,
        format!(
            "test MMSE {:.4}, {}/{} axes within 20%, {} epochs, {:.0} s",
            r.test_mmse, r.matched, r.held_out, r.epochs, r.seconds
        ),
    )
}

pub const CLAIM_SEEDS: [u64; 3] = [0, 1, 2];
pub const CLAIM_EPOCHS: usize = 18;
pub const CLAIM_MARGIN: f64 = 0.10;
pub const CLAIM_MAX_LEAVES: f64 = 15.0;
pub const CLAIM_BUDGET_S: f64 = 1800.0;

/// Base ASR against the Baseline on the default synthetic dataset with
/// equal training budgets.
pub fn claim_config(data: &Path, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: DatasetConfig { root: data.to_path_buf(), ..DatasetConfig::default() },
        variants: vec![Variant::Base, Variant::Baseline],
        seeds: CLAIM_SEEDS.to_vec(),
        out: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.training.max_epochs = Some(CLAIM_EPOCHS);
    cfg
}

pub fn asr_over_baseline(work: &Path) -> Outcome {
    let start = Instant::now();
    let data = work.join("data");
    let name = "ASR over Baseline";
    if let Err(e) = generate_synthetic_dataset(&SynthConfig::default(), &data) {
        return Outcome::new(name, vec![e.to_string()], String::new());
    }
    let report = match run_experiment(&claim_config(&data, &work.join("runs")), 1) {
        Ok(r) => r,
        Err(e) => return Outcome::new(name, vec![e.to_string()], String::new()),
    };
    let secs = start.elapsed().as_secs_f64();
    let asr = report.mean_accuracy(Variant::Base).unwrap_or(f64::NAN);
    let base = report.mean_accuracy(Variant::Baseline).unwrap_or(f64::NAN);
    let mut failures = Vec::new();
    if !(asr >= base + CLAIM_MARGIN) {
        failures.push(format!("ASR leads by {:.3} < {CLAIM_MARGIN}", asr - base));
    }
    let leaves: Vec<f64> = report
        .stage2
        .iter()
        .filter(|r| r.variant == Variant::Base.short_name())
        .map(|r| r.leaves)
        .collect();
    if leaves.len() != CLAIM_SEEDS.len() || leaves.iter().any(|&l| l > CLAIM_MAX_LEAVES) {
        failures.push(format!("ASR tree leaves {leaves:?}"));
    }
    if secs >= CLAIM_BUDGET_S {
        failures.push(format!("took {secs:.0} s"));
    }
    Outcome::new(
        name,
        failures,
        format!("mean test accuracy ASR {asr:.3} vs Baseline {base:.3}, ASR leaves {leaves:?}, {secs:.0} s"),
    )
}

pub fn cart_oracle() -> Outcome {
    let s = cart::run_oracle(0..50);
    let mut failures: Vec<String> = s.errors.iter().take(5).cloned().collect();
    if s.errors.len() > 5 {
        failures.push(format!("{} more", s.errors.len() - 5));
    }
    for (truth, pred, k, p, r, f) in cart::metric_fixtures() {
        let m = class_metrics(&truth, &pred, k);
        if (m.precision - p).abs() > 1e-9 || (m.recall - r).abs() > 1e-9 || (m.f1 - f).abs() > 1e-9 {
            failures.push(format!("metrics for {truth:?} / {pred:?}: {} {} {}", m.precision, m.recall, m.f1));
        }
    }
    Outcome::new(
        "CART oracle equivalence",
        failures,
        format!("{} datasets, {} nodes, {} metric fixtures", s.datasets, s.nodes_checked, cart::metric_fixtures().len()),
    )
}

/// Small end-to-end configuration for reproducibility checks.
pub fn tiny_experiment(work: &Path) -> asr::Result<ExperimentConfig> {
    let data = work.join("data");
    let synth = SynthConfig { cases_per_class: 4, patches_per_case: 12, split_ratios: [2, 1, 1], seed: 3, ..SynthConfig::default() };
    generate_synthetic_dataset(&synth, &data)?;
    let mut cfg = ExperimentConfig {
        dataset: DatasetConfig { root: data, bag_size: 4, bags_per_case: 2, bag_seed: 0 },
        variants: vec![Variant::Base, Variant::Baseline],
        seeds: vec![0],
        recon_images: 2,
        out: work.join("runs"),
        ..ExperimentConfig::default()
    };
    cfg.training.batch_size = 4;
    cfg.training.batches_per_epoch = 2;
    cfg.training.max_epochs = Some(2);
    Ok(cfg)
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("read_dir") {
            let p = entry.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).expect("read"));
            }
        }
    }
    out
}

pub fn determinism(work: &Path) -> Outcome {
    let name = "determinism";
    let cfg = match tiny_experiment(work) {
        Ok(c) => c,
        Err(e) => return Outcome::new(name, vec![e.to_string()], String::new()),
    };
    let mut runs = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&cfg.out);
        if let Err(e) = run_experiment(&cfg, 1) {
            return Outcome::new(name, vec![e.to_string()], String::new());
        }
        runs.push(snapshot(&cfg.out));
    }
    let (a, b) = (&runs[0], &runs[1]);
    let mut failures = Vec::new();
    if a.keys().ne(b.keys()) {
        failures.push("file sets differ".into());
    }
    let differing: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    if !differing.is_empty() {
        failures.push(format!("differs: {}", differing.join(", ")));
    }
    let count = |suffix: &str| a.keys().filter(|k| k.to_string_lossy().ends_with(suffix)).count();
    let (logs, feats, reports) = (count("train_log.csv"), count("features.csv"), count(".json"));
    if logs == 0 || feats == 0 || !a.contains_key(Path::new("report.json")) {
        failures.push("expected outputs missing".into());
    }
    Outcome::new(
        name,
        failures,
        format!("{} files identical across two runs ({logs} train logs, {feats} feature tables, {reports} JSON files)", a.len()),
    )
}

pub fn structural_constants() -> Outcome {
    let mut counts = vec![
        ("primitives (default)", AsrConfig::default().ellipse_count(), 84),
        ("primitives (small)", AsrConfig::small().ellipse_count(), 84),
        ("ASR features", asr_feature_names(3).len(), 36),
        ("grid combinations", GridSpec::default().combinations().len(), 30),
    ];
    let mut failures = Vec::new();
    match AsrModel::<f32>::new(AsrConfig::small(), 0).and_then(|m| {
        let side = m.config.image_side;
        m.infer(&Tensor::full(&[1, 3, side, side], 0.8), &[1.0; 3], 1)
    }) {
        Ok((_, latents)) => {
            counts.push(("latent primitives", latents[0].ellipse_count(), 84));
            counts.push(("latent width", latents[0].to_flat().len(), 504));
        }
        Err(e) => failures.push(e.to_string()),
    }
    failures.extend(counts.iter().filter(|c| c.1 != c.2).map(|(what, got, want)| format!("{what}: {got} != {want}")));
    Outcome::new(
        "structural constants",
        failures,
        "84 primitives, 504-dim latent, 36 features, 30 grid combinations".into(),
    )
}
