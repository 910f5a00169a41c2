use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use image::RgbImage;
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{compute_metrics, ReconMetrics};
use crate::autodiff::Tensor;
use crate::classify::{
    asr_feature_names, asr_features, baseline_feature_names, baseline_features, select_and_evaluate, ClassMetrics, FeatureRow,
    FeatureTable, GridScore, GridSpec, Impurity, Samples, Selection,
};
use crate::data::{load_case_patches, make_bags, read_manifest, save_rgb, tensor_to_image, Bag, Subset};
use crate::error::{AsrError, Result};
use crate::model::{AsrConfig, AsrModel, BaselineConfig, BaselineModel, StructuredLatent};
use crate::training::{train, write_run_spec, LossConfig, RunSpec, ScheduleConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Directory holding `manifest.csv`; relative image paths resolve here.
    pub root: PathBuf,
    pub bag_size: usize,
    pub bags_per_case: usize,
    pub bag_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            bag_size: 16,
            bags_per_case: 8,
            bag_seed: 0,
        }
    }
}

/// Training hyperparameters shared by every (variant, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    /// Per-variant default when absent.
    pub max_epochs: Option<usize>,
    pub patience: usize,
    pub eval_chunk: usize,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub fixed_gates: Option<Vec<f64>>,
}

impl Default for TrainingConfig {
    /// Paper hyperparameters with the margin scaled to 64-pixel patches.
    fn default() -> Self {
        let spec = RunSpec::default();
        Self {
            lr: spec.lr,
            batch_size: spec.batch_size,
            batches_per_epoch: spec.batches_per_epoch,
            max_epochs: None,
            patience: spec.patience,
            eval_chunk: spec.eval_chunk,
            loss: LossConfig {
                margin: 4,
                ..LossConfig::default()
            },
            schedule: ScheduleConfig::default(),
            fixed_gates: None,
        }
    }
}

impl TrainingConfig {
    pub fn run_spec(&self, variant: Variant, seed: u64, out_dir: Option<PathBuf>) -> RunSpec {
        RunSpec {
            variant,
            seed,
            lr: self.lr,
            batch_size: self.batch_size,
            batches_per_epoch: self.batches_per_epoch,
            max_epochs: self.max_epochs,
            patience: self.patience,
            eval_chunk: self.eval_chunk,
            loss: self.loss.clone(),
            schedule: self.schedule.clone(),
            fixed_gates: self.fixed_gates.clone(),
            out_dir,
        }
    }
}

/// Everything a full two-stage experiment needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub asr: AsrConfig,
    pub baseline: BaselineConfig,
    pub training: TrainingConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub grid: GridSpec,
    /// Test patches shown in each reconstruction grid.
    pub recon_images: usize,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    /// Desk-scale setup for 64-pixel patches.
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            asr: AsrConfig::small(),
            baseline: BaselineConfig::small(),
            training: TrainingConfig::default(),
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
            grid: GridSpec::default(),
            recon_images: 8,
            out: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| AsrError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| AsrError::io(path, e))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| AsrError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.asr.validate()?;
        if self.baseline.image_side != self.asr.image_side {
            return Err(AsrError::Config(format!(
                "asr.image_side {} differs from baseline.image_side {}",
                self.asr.image_side, self.baseline.image_side
            )));
        }
        self.training
            .run_spec(Variant::Base, 0, None)
            .validate(self.asr.image_side, self.asr.grids.len())?;
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(AsrError::Config("at least one variant and one seed are required".into()));
        }
        if self.dataset.bag_size == 0 || self.dataset.bags_per_case == 0 {
            return Err(AsrError::Config("bag_size and bags_per_case must be positive".into()));
        }
        if self.grid.combinations().is_empty() || self.grid.folds < 2 {
            return Err(AsrError::Config("the tree grid must be non-empty with at least 2 folds".into()));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| AsrError::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| AsrError::io(&path, e))
    }
}

/// Patches of one examination.
#[derive(Clone, Debug)]
pub struct CaseData {
    pub case_id: String,
    pub label: String,
    pub subset: Subset,
    pub names: Vec<String>,
    pub patches: Vec<Tensor<f32>>,
}

/// Decoded patch set described by a manifest.
#[derive(Clone, Debug)]
pub struct PatchStore {
    pub side: usize,
    pub cases: Vec<CaseData>,
}

impl PatchStore {
    pub fn load(root: &Path) -> Result<Self> {
        let rows = read_manifest(&root.join("manifest.csv"))?;
        let mut cases = Vec::with_capacity(rows.len());
        let mut side = None;
        for r in rows {
            let subset = r
                .subset
                .ok_or_else(|| AsrError::Config(format!("case {} has no subset in the manifest", r.case_id)))?;
            let dir = if r.image_path.is_absolute() { r.image_path.clone() } else { root.join(&r.image_path) };
            let (names, patches): (Vec<String>, Vec<Tensor<f32>>) = load_case_patches::<f32>(&dir)?.into_iter().unzip();
            for p in &patches {
                let s = p.shape()[2];
                if p.shape() != [3, s, s] || *side.get_or_insert(s) != s {
                    return Err(AsrError::shape("dataset", format!("patch of shape {:?} in {}", p.shape(), dir.display())));
                }
            }
            cases.push(CaseData {
                case_id: r.case_id,
                label: r.class,
                subset,
                names,
                patches,
            });
        }
        let side = side.ok_or_else(|| AsrError::Config(format!("no patches found under {}", root.display())))?;
        Ok(Self { side, cases })
    }

    pub fn images(&self, subset: Subset) -> Vec<Tensor<f32>> {
        self.cases
            .iter()
            .filter(|c| c.subset == subset)
            .flat_map(|c| c.patches.iter().cloned())
            .collect()
    }

    pub fn case(&self, id: &str) -> Option<&CaseData> {
        self.cases.iter().find(|c| c.case_id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    asr: Option<AsrConfig>,
    baseline: Option<BaselineConfig>,
}

/// Outcome of one training run, stored as `run_summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Gates of the best epoch, used for inference.
    pub gates: Vec<f64>,
}

/// Per-patch latent codes of either architecture.
pub enum Latents {
    Asr(Vec<StructuredLatent>),
    Baseline(Vec<Vec<f64>>),
}

pub enum TrainedModel {
    Asr { model: AsrModel<f32>, gates: Vec<f64> },
    Baseline(BaselineModel<f32>),
}

impl TrainedModel {
    /// Reconstructions and latents of `images` in evaluation mode.
    pub fn infer(&self, images: &[Tensor<f32>], chunk: usize) -> Result<(Vec<Tensor<f32>>, Latents)> {
        if images.is_empty() {
            let empty = match self {
                TrainedModel::Asr { .. } => Latents::Asr(Vec::new()),
                TrainedModel::Baseline(_) => Latents::Baseline(Vec::new()),
            };
            return Ok((Vec::new(), empty));
        }
        let batch = Tensor::stack(&images.iter().collect::<Vec<_>>())?;
        let (recon, latents) = match self {
            TrainedModel::Asr { model, gates } => {
                let (r, l) = model.infer(&batch, gates, chunk)?;
                (r, Latents::Asr(l))
            }
            TrainedModel::Baseline(m) => {
                let (r, l) = m.infer(&batch, chunk)?;
                (r, Latents::Baseline(l))
            }
        };
        let recons = (0..images.len()).map(|i| recon.index_first(i)).collect::<Result<Vec<_>>>()?;
        Ok((recons, latents))
    }

    /// Loads a run directory written by [`train_run`].
    pub fn load(dir: &Path) -> Result<(Self, RunSummary)> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| AsrError::io(&p, e))
        };
        let summary: RunSummary = serde_json::from_str(&read("run_summary.json")?)?;
        let files: ModelFile = toml::from_str(&read("model.toml")?).map_err(|e| AsrError::Config(e.to_string()))?;
        let ckpt = dir.join("best.ckpt");
        let model = match (files.asr, files.baseline) {
            (Some(cfg), None) => TrainedModel::Asr {
                model: AsrModel::load(cfg, &ckpt)?,
                gates: summary.gates.clone(),
            },
            (None, Some(cfg)) => TrainedModel::Baseline(BaselineModel::load(cfg, &ckpt)?),
            _ => return Err(AsrError::Config(format!("{} must describe exactly one model", dir.join("model.toml").display()))),
        };
        Ok((model, summary))
    }
}

/// Trains one (variant, seed) pair on the train/val subsets and writes the
/// run directory: `run.toml`, `model.toml`, `train_log.csv`, `best.ckpt`
/// and `run_summary.json`.
pub fn train_run(cfg: &ExperimentConfig, store: &PatchStore, variant: Variant, seed: u64, dir: &Path) -> Result<(TrainedModel, RunSummary)> {
    if store.side != cfg.asr.image_side {
        return Err(AsrError::Config(format!(
            "dataset patches are {} pixels but the model expects {}",
            store.side, cfg.asr.image_side
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| AsrError::io(dir, e))?;
    let spec = cfg.training.run_spec(variant, seed, Some(dir.to_path_buf()));
    write_run_spec(&spec, dir)?;
    let train_set = store.images(Subset::Train);
    let val_set = store.images(Subset::Val);
    info!("{variant} seed {seed}: {} training and {} validation patches", train_set.len(), val_set.len());
    let (model, report, files) = if variant == Variant::Baseline {
        let mut m = BaselineModel::<f32>::new(cfg.baseline.clone(), seed)?;
        let report = train(&mut m, &spec, &train_set, &val_set)?;
        let files = ModelFile {
            asr: None,
            baseline: Some(cfg.baseline.clone()),
        };
        (TrainedModel::Baseline(m), report, files)
    } else {
        let mut m = AsrModel::<f32>::new(cfg.asr.clone(), seed)?;
        let report = train(&mut m, &spec, &train_set, &val_set)?;
        let gates = spec.plan(report.best_epoch.max(1)).gates;
        let files = ModelFile {
            asr: Some(cfg.asr.clone()),
            baseline: None,
        };
        (TrainedModel::Asr { model: m, gates }, report, files)
    };
    let gates = match &model {
        TrainedModel::Asr { gates, .. } => gates.clone(),
        TrainedModel::Baseline(_) => Vec::new(),
    };
    let summary = RunSummary {
        variant,
        seed,
        epochs_run: report.log.len(),
        best_epoch: report.best_epoch,
        best_val_loss: report.best_val_loss,
        stopped_early: report.stopped_early,
        gates,
    };
    model_save(&model, &dir.join("best.ckpt"))?;
    let text = toml::to_string_pretty(&files).map_err(|e| AsrError::Config(e.to_string()))?;
    std::fs::write(dir.join("model.toml"), text).map_err(|e| AsrError::io(dir, e))?;
    write_json(&summary, &dir.join("run_summary.json"))?;
    Ok((model, summary))
}

fn model_save(model: &TrainedModel, path: &Path) -> Result<()> {
    match model {
        TrainedModel::Asr { model, .. } => model.save(path),
        TrainedModel::Baseline(m) => m.save(path),
    }
}

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| AsrError::io(d, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| AsrError::io(path, e))
}

fn write_csv<S: Serialize>(rows: &[S], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| AsrError::io(path, e))
}

/// Mean reconstruction metrics over `images`.
pub fn recon_metrics(model: &TrainedModel, images: &[Tensor<f32>], margin: usize, chunk: usize) -> Result<(ReconMetrics, Vec<Tensor<f32>>)> {
    let (recons, _) = model.infer(images, chunk)?;
    let per = images
        .iter()
        .zip(&recons)
        .map(|(y, r)| compute_metrics(y, r, margin))
        .collect::<Result<Vec<_>>>()?;
    Ok((ReconMetrics::mean(&per), recons))
}

/// Inputs on the top row, reconstructions below.
pub fn recon_grid(inputs: &[Tensor<f32>], recons: &[Tensor<f32>]) -> Result<RgbImage> {
    let n = inputs.len().min(recons.len());
    let side = inputs.first().map_or(0, |t| t.shape()[2]) as u32;
    let mut canvas = RgbImage::from_pixel(side * n.max(1) as u32, side * 2, image::Rgb([255, 255, 255]));
    for (row, set) in [inputs, recons].iter().enumerate() {
        for (i, t) in set.iter().take(n).enumerate() {
            let img = tensor_to_image(t)?;
            image::imageops::replace(&mut canvas, &img, i as i64 * side as i64, row as i64 * side as i64);
        }
    }
    Ok(canvas)
}

/// Bags of every case with their subsets, in case order.
pub fn build_bags(store: &PatchStore, cfg: &DatasetConfig) -> Result<Vec<(Bag, Subset)>> {
    let cases: BTreeMap<String, (String, usize)> = store
        .cases
        .iter()
        .map(|c| (c.case_id.clone(), (c.label.clone(), c.patches.len())))
        .collect();
    let bags = make_bags(&cases, cfg.bag_size, cfg.bags_per_case, cfg.bag_seed)?;
    bags.into_iter()
        .map(|b| {
            let subset = store.case(&b.case_id).map(|c| c.subset).expect("bag of a known case");
            Ok((b, subset))
        })
        .collect()
}

/// Bag feature table: 36 structural statistics for ASR models, latent
/// means for the Baseline.
pub fn extract_features(model: &TrainedModel, store: &PatchStore, bags: &[(Bag, Subset)], chunk: usize) -> Result<FeatureTable> {
    let names = match model {
        TrainedModel::Asr { model, .. } => asr_feature_names(model.config.grids.len()),
        TrainedModel::Baseline(m) => baseline_feature_names(m.config.latent_dim),
    };
    let mut cache: BTreeMap<String, Latents> = BTreeMap::new();
    let mut rows = Vec::with_capacity(bags.len());
    for (bag, subset) in bags {
        if !cache.contains_key(&bag.case_id) {
            let case = store
                .case(&bag.case_id)
                .ok_or_else(|| AsrError::Config(format!("unknown case {}", bag.case_id)))?;
            let (_, latents) = model.infer(&case.patches, chunk)?;
            cache.insert(bag.case_id.clone(), latents);
        }
        let values = match &cache[&bag.case_id] {
            Latents::Asr(l) => asr_features(&bag.members.iter().map(|&i| l[i].clone()).collect::<Vec<_>>())?,
            Latents::Baseline(l) => baseline_features(&bag.members.iter().map(|&i| l[i].clone()).collect::<Vec<_>>())?,
        };
        rows.push(FeatureRow {
            bag_id: bag.bag_id.clone(),
            case_id: bag.case_id.clone(),
            label: bag.label.clone(),
            subset: *subset,
            values,
        });
    }
    Ok(FeatureTable { names, rows })
}

/// Train/val/test samples of a feature table, grouped by case; classes are
/// the sorted labels.
pub fn table_samples(table: &FeatureTable) -> Result<(Vec<String>, [Samples; 3])> {
    let classes = table.classes();
    let part = |s: Subset| -> Result<Samples> {
        let rows: Vec<&FeatureRow> = table.rows.iter().filter(|r| r.subset == s).collect();
        let cases: Vec<&str> = rows.iter().map(|r| r.case_id.as_str()).collect();
        let mut ids: Vec<&str> = cases.clone();
        ids.sort_unstable();
        ids.dedup();
        Samples::new(
            rows.iter().map(|r| r.values.clone()).collect(),
            rows.iter()
                .map(|r| classes.iter().position(|c| *c == r.label).expect("label listed"))
                .collect(),
            classes.len(),
        )?
        .with_groups(cases.iter().map(|c| ids.binary_search(c).expect("listed")).collect())
    };
    Ok((classes.clone(), [part(Subset::Train)?, part(Subset::Val)?, part(Subset::Test)?]))
}

/// Serializable summary of a tree selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub classes: Vec<String>,
    pub impurity: Impurity,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub folds_used: usize,
    pub ccp_alpha: f64,
    pub val_accuracy: f64,
    pub leaves: usize,
    pub depth: usize,
    pub test: ClassMetrics,
    pub importances: BTreeMap<String, f64>,
    pub importance_order: Vec<String>,
    pub grid: Vec<GridScore>,
}

pub fn selection_report(sel: &Selection, names: &[String], classes: &[String]) -> SelectionReport {
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by(|&a, &b| sel.importances[b].total_cmp(&sel.importances[a]).then(a.cmp(&b)));
    SelectionReport {
        classes: classes.to_vec(),
        impurity: sel.best.impurity,
        max_depth: sel.best.max_depth,
        min_samples_leaf: sel.best.min_samples_leaf,
        folds_used: sel.folds_used,
        ccp_alpha: sel.ccp_alpha,
        val_accuracy: sel.val_accuracy,
        leaves: sel.tree.n_leaves(),
        depth: sel.tree.depth(),
        test: sel.test.clone(),
        importances: names.iter().cloned().zip(sel.importances.iter().copied()).collect(),
        importance_order: order.into_iter().map(|i| names[i].clone()).collect(),
        grid: sel.grid.clone(),
    }
}

/// Grid search, pruning and test evaluation of a feature table; writes
/// `tree.txt`, `tree.dot` and `selection.json` into `dir`.
pub fn classify_table(table: &FeatureTable, grid: &GridSpec, dir: &Path) -> Result<SelectionReport> {
    let (classes, [train_s, val_s, test_s]) = table_samples(table)?;
    let sel = select_and_evaluate(&train_s, &val_s, &test_s, grid)?;
    std::fs::create_dir_all(dir).map_err(|e| AsrError::io(dir, e))?;
    let tree_txt = dir.join("tree.txt");
    std::fs::write(&tree_txt, sel.tree.to_text(&table.names, &classes)).map_err(|e| AsrError::io(&tree_txt, e))?;
    let tree_dot = dir.join("tree.dot");
    std::fs::write(&tree_dot, sel.tree.to_dot(&table.names, &classes)).map_err(|e| AsrError::io(&tree_dot, e))?;
    let report = selection_report(&sel, &table.names, &classes);
    write_json(&report, &dir.join("selection.json"))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Row {
    pub variant: String,
    pub seed: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub mae: f64,
    pub mse: f64,
    pub ssim: f64,
    pub mmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Row {
    pub variant: String,
    pub seed: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub leaves: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunImportances {
    pub variant: String,
    pub seed: u64,
    pub importances: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub stage1: Vec<Stage1Row>,
    pub stage1_means: Vec<Stage1Row>,
    pub stage2: Vec<Stage2Row>,
    pub stage2_means: Vec<Stage2Row>,
    pub importances: Vec<RunImportances>,
}

impl ExperimentReport {
    /// Mean test accuracy of one variant over its seeds.
    pub fn mean_accuracy(&self, variant: Variant) -> Option<f64> {
        self.stage2_means
            .iter()
            .find(|r| r.variant == variant.short_name())
            .map(|r| r.accuracy)
    }
}

fn mean_rows<R: Clone>(rows: &[R], variants: &[Variant], key: impl Fn(&R) -> &str, avg: impl Fn(&[&R], &str) -> R) -> Vec<R> {
    variants
        .iter()
        .filter_map(|v| {
            let group: Vec<&R> = rows.iter().filter(|r| key(r) == v.short_name()).collect();
            (!group.is_empty()).then(|| avg(&group, v.short_name()))
        })
        .collect()
}

/// Stage-1 and stage-2 directories of one (variant, seed) pair.
pub fn run_dirs(out: &Path, variant: Variant, seed: u64) -> (PathBuf, PathBuf) {
    let name = format!("seed{seed}");
    (
        out.join("stage1").join(variant.short_name()).join(&name),
        out.join("stage2").join(variant.short_name()).join(name),
    )
}

/// Trains one pair, then writes its test metrics, reconstruction grid,
/// feature table and tree selection.
pub fn run_pair(cfg: &ExperimentConfig, store: &PatchStore, bags: &[(Bag, Subset)], variant: Variant, seed: u64) -> Result<()> {
    let (s1, s2) = run_dirs(&cfg.out, variant, seed);
    let (model, _) = train_run(cfg, store, variant, seed, &s1)?;
    cfg.write(&s1)?;
    let test = store.images(Subset::Test);
    let chunk = cfg.training.eval_chunk;
    let (m, recons) = recon_metrics(&model, &test, cfg.training.loss.margin, chunk)?;
    write_json(&m, &s1.join("test_metrics.json"))?;
    let k = cfg.recon_images.min(test.len());
    if k > 0 {
        save_rgb(&recon_grid(&test[..k], &recons[..k])?, &s1.join("reconstructions.png"))?;
    }
    let table = extract_features(&model, store, bags, chunk)?;
    cfg.write(&s2)?;
    table.write_csv(&s2.join("features.csv"))?;
    let sel = classify_table(&table, &cfg.grid, &s2)?;
    info!(
        "{variant} seed {seed}: test mmse {:.5}, ssim {:.4}, accuracy {:.4}, {} leaves",
        m.mmse, m.ssim, sel.test.accuracy, sel.leaves
    );
    Ok(())
}

fn read_json<D: DeserializeOwned>(path: &Path) -> Result<Option<D>> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(AsrError::io(path, e)),
    }
}

/// Builds the summary tables from the per-run files under `cfg.out` and
/// writes `stage1/summary.{csv,json}`, `stage2/summary.{csv,json}` and
/// `report.json`. Pairs without complete outputs are left out with a
/// warning.
pub fn assemble_report(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut stage1 = Vec::new();
    let mut stage2 = Vec::new();
    let mut importances = Vec::new();
    for &variant in &cfg.variants {
        for &seed in &cfg.seeds {
            let (s1, s2) = run_dirs(&cfg.out, variant, seed);
            let summary: Option<RunSummary> = read_json(&s1.join("run_summary.json"))?;
            let metrics: Option<ReconMetrics> = read_json(&s1.join("test_metrics.json"))?;
            let sel: Option<SelectionReport> = read_json(&s2.join("selection.json"))?;
            let (Some(summary), Some(m), Some(sel)) = (summary, metrics, sel) else {
                warn!("{variant} seed {seed} has no complete outputs under {}", cfg.out.display());
                continue;
            };
            stage1.push(Stage1Row {
                variant: variant.short_name().into(),
                seed: seed.to_string(),
                best_epoch: summary.best_epoch,
                epochs_run: summary.epochs_run,
                mae: m.mae,
                mse: m.mse,
                ssim: m.ssim,
                mmse: m.mmse,
            });
            stage2.push(Stage2Row {
                variant: variant.short_name().into(),
                seed: seed.to_string(),
                accuracy: sel.test.accuracy,
                precision: sel.test.precision,
                recall: sel.test.recall,
                f1: sel.test.f1,
                leaves: sel.leaves as f64,
            });
            importances.push(RunImportances {
                variant: variant.short_name().into(),
                seed,
                importances: sel.importances,
            });
        }
    }
    let stage1_means = mean_rows(&stage1, &cfg.variants, |r| &r.variant, |g, v| {
        let n = g.len() as f64;
        let avg = |f: fn(&Stage1Row) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
        Stage1Row {
            variant: v.into(),
            seed: "mean".into(),
            best_epoch: 0,
            epochs_run: 0,
            mae: avg(|r| r.mae),
            mse: avg(|r| r.mse),
            ssim: avg(|r| r.ssim),
            mmse: avg(|r| r.mmse),
        }
    });
    let stage2_means = mean_rows(&stage2, &cfg.variants, |r| &r.variant, |g, v| {
        let n = g.len() as f64;
        let avg = |f: fn(&Stage2Row) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
        Stage2Row {
            variant: v.into(),
            seed: "mean".into(),
            accuracy: avg(|r| r.accuracy),
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            f1: avg(|r| r.f1),
            leaves: avg(|r| r.leaves),
        }
    });
    let report = ExperimentReport {
        config_hash: cfg.hash()?,
        stage1,
        stage1_means,
        stage2,
        stage2_means,
        importances,
    };
    let s1 = cfg.out.join("stage1");
    let s2 = cfg.out.join("stage2");
    for d in [&s1, &s2] {
        std::fs::create_dir_all(d).map_err(|e| AsrError::io(d, e))?;
    }
    write_csv(&[report.stage1.clone(), report.stage1_means.clone()].concat(), &s1.join("summary.csv"))?;
    write_json(&(&report.config_hash, &report.stage1, &report.stage1_means), &s1.join("summary.json"))?;
    write_csv(&[report.stage2.clone(), report.stage2_means.clone()].concat(), &s2.join("summary.csv"))?;
    write_json(&(&report.config_hash, &report.stage2, &report.stage2_means), &s2.join("summary.json"))?;
    write_json(&report, &cfg.out.join("report.json"))?;
    Ok(report)
}

/// Stage 1 (training and reconstruction metrics) and stage 2 (bag features
/// and decision trees) for every (variant, seed) pair, followed by
/// [`assemble_report`].
///
/// Pairs are spread over `jobs` threads. Every pair depends only on its own
/// seed, so the outputs do not depend on `jobs`. After a failure no new
/// pairs start; the report is still assembled from the finished ones
/// before the first error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    cfg.write(&cfg.out)?;
    let store = PatchStore::load(&cfg.dataset.root)?;
    let bags = build_bags(&store, &cfg.dataset)?;
    let work: Vec<(Variant, u64)> = cfg
        .variants
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let errors: Mutex<Vec<(usize, AsrError)>> = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, work.len()) {
            scope.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(v, s)) = work.get(i) else { break };
                if let Err(e) = run_pair(cfg, &store, &bags, v, s) {
                    failed.store(true, Ordering::SeqCst);
                    errors.lock().expect("no poisoned lock").push((i, e));
                }
            });
        }
    });
    let mut errors = errors.into_inner().expect("no poisoned lock");
    let report = assemble_report(cfg);
    if !errors.is_empty() {
        errors.sort_by_key(|(i, _)| *i);
        return Err(errors.swap_remove(0).1);
    }
    report
}
