use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use asr::classify::{FeatureTable, GridSpec};
use asr::data::{generate_synthetic_dataset, ingest, save_rgb, PatchConfig, Subset, SynthConfig};
use asr::evaluation::{
    assemble_report, build_bags, classify_table, extract_features, recon_grid, recon_metrics, run_experiment, train_run, write_json,
    ExperimentConfig, ExperimentReport, PatchStore, TrainedModel,
};
use asr::gradcheck::{run_check, Check};
use asr::training::Variant;
use asr::AsrError;
use clap::{Parser, Subcommand};

/// Structural autoencoder pipeline: data preparation, training,
/// reconstruction, bag features, decision trees and gradient checks.
#[derive(Parser)]
#[command(name = "asr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut tissue patches from the rasters listed in a manifest.
    Ingest {
        /// CSV with case_id, class, sex, age, subset, image_path.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1024)]
        window: u32,
        #[arg(long, default_value_t = 635)]
        stride: u32,
        #[arg(long, default_value_t = 0.8)]
        occupancy: f64,
        #[arg(long, default_value_t = 0.88)]
        tissue_threshold: f64,
        #[arg(long, default_value_t = 4)]
        downscale: u32,
        /// Train:val:test ratios used when the manifest has no split.
        #[arg(long, default_value = "15,6,9", value_parser = parse_ratios)]
        split: [usize; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate the synthetic ellipse-scene dataset.
    Synth {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Cases per class.
        #[arg(long, default_value_t = 12)]
        cases: usize,
        /// Patches per case.
        #[arg(long, default_value_t = 64)]
        patches: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        #[arg(long, default_value = "5,2,3", value_parser = parse_ratios)]
        split: [usize; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its run directory.
    Train {
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Experiment configuration (TOML); built-in defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory, overriding the configuration.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct patches with a trained run and write an input/output grid.
    Reconstruct {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_subset)]
        subset: Subset,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract bag features with a trained run.
    Features {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Select, prune and evaluate a decision tree on a feature table.
    Tree {
        #[arg(long)]
        features: PathBuf,
        /// Use the built-in 30-combination grid (the default without --config).
        #[arg(long, conflicts_with = "config")]
        grid_default: bool,
        /// Take the grid from this experiment configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run both stages for every configured variant and seed.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Concurrent (variant, seed) runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Rebuild the summary tables of an evaluation output directory.
    Report {
        /// Directory holding config.toml and the stage1/stage2 trees.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// `all` or a comma-separated list of check names.
        #[arg(long, default_value = "all")]
        ops: String,
        #[arg(long, default_value = "f64")]
        precision: String,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the results as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn parse_ratios(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected three comma-separated integers".to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::ALL
        .into_iter()
        .find(|v| v.short_name() == s)
        .ok_or_else(|| format!("expected one of base, reg, incr, baseline; got `{s}`"))
}

fn parse_subset(s: &str) -> Result<Subset, String> {
    match s {
        "train" => Ok(Subset::Train),
        "val" => Ok(Subset::Val),
        "test" => Ok(Subset::Test),
        _ => Err(format!("expected train, val or test; got `{s}`")),
    }
}

fn load_config(path: Option<&Path>, data: Option<PathBuf>, out: Option<PathBuf>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = data {
        cfg.dataset.root = d;
    }
    if let Some(o) = out {
        cfg.out = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Configuration echoed into a run directory by `train`.
fn run_config(run: &Path, data: Option<PathBuf>) -> anyhow::Result<ExperimentConfig> {
    let path = run.join("config.toml");
    let mut cfg = ExperimentConfig::load(&path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(d) = data {
        cfg.dataset.root = d;
    }
    Ok(cfg)
}

fn print_report(r: &ExperimentReport) {
    println!("config {}", r.config_hash);
    println!("{:<9} {:>5} {:>9} {:>9} {:>9} {:>7}", "variant", "seed", "mae", "mse", "mmse", "ssim");
    for row in r.stage1.iter().chain(&r.stage1_means) {
        println!(
            "{:<9} {:>5} {:>9.5} {:>9.5} {:>9.5} {:>7.4}",
            row.variant, row.seed, row.mae, row.mse, row.mmse, row.ssim
        );
    }
    println!("{:<9} {:>5} {:>8} {:>9} {:>7} {:>7} {:>6}", "variant", "seed", "accuracy", "precision", "recall", "f1", "leaves");
    for row in r.stage2.iter().chain(&r.stage2_means) {
        println!(
            "{:<9} {:>5} {:>8.4} {:>9.4} {:>7.4} {:>7.4} {:>6.1}",
            row.variant, row.seed, row.accuracy, row.precision, row.recall, row.f1, row.leaves
        );
    }
}

fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Ingest {
            manifest,
            out,
            window,
            stride,
            occupancy,
            tissue_threshold,
            downscale,
            split,
            seed,
        } => {
            let cfg = PatchConfig {
                window,
                stride,
                occupancy_min: occupancy,
                tissue_threshold,
                downscale,
            };
            let rows = ingest(&manifest, &out, &cfg, split, seed)?;
            println!("{} cases written to {}", rows.len(), out.display());
        }
        Command::Synth {
            classes,
            cases,
            patches,
            side,
            noise,
            split,
            seed,
            out,
        } => {
            let cfg = SynthConfig {
                image_side: side,
                classes,
                cases_per_class: cases,
                patches_per_case: patches,
                split_ratios: split,
                noise,
                seed,
            };
            let s = generate_synthetic_dataset(&cfg, &out)?;
            let text = toml::to_string_pretty(&cfg)?;
            std::fs::write(out.join("synth.toml"), text).with_context(|| format!("writing {}", out.display()))?;
            println!("{} cases, {} patches written to {}", s.rows.len(), s.patches, out.display());
        }
        Command::Train {
            variant,
            seed,
            config,
            data,
            out,
        } => {
            let cfg = load_config(config.as_deref(), data, None)?;
            let store = PatchStore::load(&cfg.dataset.root)?;
            cfg.write(&out)?;
            let (_, summary) = train_run(&cfg, &store, variant, seed, &out)?;
            println!(
                "{variant} seed {seed}: {} epochs, best epoch {} (val loss {:.6}), written to {}",
                summary.epochs_run,
                summary.best_epoch,
                summary.best_val_loss,
                out.display()
            );
        }
        Command::Reconstruct {
            run,
            data,
            subset,
            count,
            out,
        } => {
            let cfg = run_config(&run, data)?;
            let (model, _) = TrainedModel::load(&run)?;
            let store = PatchStore::load(&cfg.dataset.root)?;
            let images = store.images(subset);
            let (m, recons) = recon_metrics(&model, &images, cfg.training.loss.margin, cfg.training.eval_chunk)?;
            let k = count.min(images.len());
            save_rgb(&recon_grid(&images[..k], &recons[..k])?, &out)?;
            println!(
                "{} images: mae {:.5} mse {:.5} mmse {:.5} ssim {:.4}",
                images.len(),
                m.mae,
                m.mse,
                m.mmse,
                m.ssim
            );
        }
        Command::Features { run, data, out } => {
            let cfg = run_config(&run, data)?;
            let (model, _) = TrainedModel::load(&run)?;
            let store = PatchStore::load(&cfg.dataset.root)?;
            let bags = build_bags(&store, &cfg.dataset)?;
            let table = extract_features(&model, &store, &bags, cfg.training.eval_chunk)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            table.write_csv(&out)?;
            println!("{} bags x {} features written to {}", table.rows.len(), table.names.len(), out.display());
        }
        Command::Tree {
            features,
            grid_default: _,
            config,
            out,
        } => {
            let grid = match config {
                Some(p) => ExperimentConfig::load(&p)?.grid,
                None => GridSpec::default(),
            };
            let table = FeatureTable::read_csv(&features)?;
            let r = classify_table(&table, &grid, &out)?;
            println!(
                "best {:?} depth {:?} min leaf {}; alpha {:.6}; {} leaves; test accuracy {:.4} f1 {:.4}",
                r.impurity, r.max_depth, r.min_samples_leaf, r.ccp_alpha, r.leaves, r.test.accuracy, r.test.f1
            );
        }
        Command::Evaluate { config, data, out, jobs } => {
            let cfg = load_config(config.as_deref(), data, out)?;
            let report = run_experiment(&cfg, jobs)?;
            print_report(&report);
        }
        Command::Report { out } => {
            let mut cfg = ExperimentConfig::load(&out.join("config.toml"))?;
            cfg.out = out;
            print_report(&assemble_report(&cfg)?);
        }
        Command::Gradcheck {
            ops,
            precision,
            instances,
            seed,
            json,
        } => {
            if precision != "f64" {
                return Err(AsrError::Config(format!("precision `{precision}` is not supported; the checks run in f64")).into());
            }
            let checks: Vec<Check> = if ops == "all" {
                Check::ALL.to_vec()
            } else {
                ops.split(',')
                    .map(|s| Check::parse(s.trim()).ok_or_else(|| AsrError::Config(format!("unknown check `{s}`"))))
                    .collect::<Result<_, _>>()?
            };
            let mut results = Vec::new();
            println!("{:<22} {:>9} {:>8} {:>8} {:>12} {:>9}", "op", "instances", "probes", "skipped", "max_rel_err", "tolerance");
            for c in checks {
                let r = run_check(c, instances, seed)?;
                println!(
                    "{:<22} {:>9} {:>8} {:>8} {:>12.3e} {:>9.0e} {}",
                    r.op,
                    r.instances,
                    r.probes,
                    r.skipped,
                    r.max_rel_err,
                    r.tolerance,
                    if r.passed { "PASS" } else { "FAIL" }
                );
                results.push(r);
            }
            if let Some(p) = json {
                write_json(&results, &p)?;
            }
            if results.iter().any(|r| !r.passed) {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ASR_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    msg = if msg.is_empty() { text } else { format!("{msg}: {text}") };
                }
            }
            eprintln!("error: {msg}");
            let validation = e.downcast_ref::<AsrError>().is_some_and(AsrError::is_validation);
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
