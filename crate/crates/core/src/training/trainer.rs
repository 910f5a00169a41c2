use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{total_loss, LossConfig, LossParts};
use super::schedule::{plan_epoch, EpochPlan, ScheduleConfig, Variant};
use crate::autodiff::{checkpoint, AdamConfig, AdamState, Graph, ParamSet, Real, Tensor, Var};
use crate::error::{AsrError, Result};
use crate::model::layers::{update_running_stats, Ctx};
use crate::model::{AsrModel, BaselineModel};

/// A model the trainer can optimise.
pub trait Trainable<T: Real> {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
    fn bn_momentum(&self) -> f64;
    /// Records the loss of one batch `[N, 3, H, W]`.
    fn batch_loss(&self, g: &mut Graph<T>, ctx: &mut Ctx<'_, T>, batch: Var, plan: &EpochPlan, loss: &LossConfig) -> Result<LossParts>;
}

impl<T: Real> Trainable<T> for AsrModel<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn bn_momentum(&self) -> f64 {
        self.config.bn_momentum
    }

    fn batch_loss(&self, g: &mut Graph<T>, ctx: &mut Ctx<'_, T>, batch: Var, plan: &EpochPlan, loss: &LossConfig) -> Result<LossParts> {
        let out = self.forward(g, ctx, batch, &plan.gates)?;
        total_loss(g, batch, out.recon, &out.maps, loss, plan.reg_active)
    }
}

impl<T: Real> Trainable<T> for BaselineModel<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn bn_momentum(&self) -> f64 {
        self.config.bn_momentum
    }

    fn batch_loss(&self, g: &mut Graph<T>, ctx: &mut Ctx<'_, T>, batch: Var, _plan: &EpochPlan, loss: &LossConfig) -> Result<LossParts> {
        let (recon, _) = self.forward(g, ctx, batch)?;
        let m = super::loss::mmse(g, batch, recon, loss.margin)?;
        let zero = g.constant(Tensor::scalar(T::zero()));
        Ok(LossParts { total: m, mmse: m, arv: zero })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub variant: Variant,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    /// Defaults to 50, or 55 for the incremental regime.
    pub max_epochs: Option<usize>,
    pub patience: usize,
    /// Images per evaluation-mode chunk during validation.
    pub eval_chunk: usize,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    /// Holds every scale gate at these values instead of the schedule.
    pub fixed_gates: Option<Vec<f64>>,
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            variant: Variant::Base,
            seed: 0,
            lr: 1e-3,
            batch_size: 32,
            batches_per_epoch: 32,
            max_epochs: None,
            patience: 20,
            eval_chunk: 32,
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
            fixed_gates: None,
            out_dir: None,
        }
    }
}

impl RunSpec {
    pub fn max_epochs(&self) -> usize {
        self.max_epochs.unwrap_or_else(|| self.variant.default_max_epochs())
    }

    /// Images seen per epoch.
    pub fn epoch_size(&self) -> usize {
        self.batch_size * self.batches_per_epoch
    }

    pub fn validate(&self, image_side: usize, scales: usize) -> Result<()> {
        if self.batch_size < 2 {
            return Err(AsrError::Config("batch_size must be at least 2 for batch normalisation".into()));
        }
        if self.batches_per_epoch == 0 || self.max_epochs() == 0 || self.eval_chunk == 0 {
            return Err(AsrError::Config("batches_per_epoch, max_epochs and eval_chunk must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(AsrError::Config(format!("learning rate {} is invalid", self.lr)));
        }
        if let Some(g) = &self.fixed_gates {
            if g.len() != scales || g.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(AsrError::Config(format!("fixed_gates {g:?} must hold {scales} values in [0, 1]")));
            }
        }
        self.loss.validate(image_side)?;
        self.schedule.validate(scales)
    }

    pub fn plan(&self, epoch: usize) -> EpochPlan {
        let mut plan = plan_epoch(self.variant, epoch, &self.schedule);
        if let Some(g) = &self.fixed_gates {
            plan.gates = g.clone();
        }
        plan
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mmse: f64,
    pub train_arv: f64,
    pub val_loss: f64,
    pub val_mmse: f64,
    pub val_arv: f64,
    pub gate_0: f64,
    pub gate_1: f64,
    pub gate_2: f64,
    pub reg_active: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Loss averages over a set of batches.
#[derive(Clone, Copy, Debug, Default)]
struct Running {
    total: f64,
    mmse: f64,
    arv: f64,
    weight: f64,
}

impl Running {
    fn add<T: Real>(&mut self, g: &Graph<T>, parts: &LossParts, weight: f64) {
        self.total += g.value(parts.total).item().as_f64() * weight;
        self.mmse += g.value(parts.mmse).item().as_f64() * weight;
        self.arv += g.value(parts.arv).item().as_f64() * weight;
        self.weight += weight;
    }

    fn mean(&self) -> (f64, f64, f64) {
        let w = self.weight.max(f64::MIN_POSITIVE);
        (self.total / w, self.mmse / w, self.arv / w)
    }
}

fn gather<T: Real>(images: &[Tensor<T>], idx: &[usize]) -> Result<Tensor<T>> {
    let items: Vec<&Tensor<T>> = idx.iter().map(|&i| &images[i]).collect();
    Tensor::stack(&items)
}

/// Epoch index order: concatenated fresh permutations, truncated to
/// `count`, so every image appears once before any repeats.
fn epoch_indices(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        out.extend(perm.into_iter().take(count - out.len()));
    }
    out
}

/// Mean evaluation-mode loss over `images`.
pub fn evaluate_loss<T: Real, M: Trainable<T>>(
    model: &M,
    images: &[Tensor<T>],
    plan: &EpochPlan,
    loss: &LossConfig,
    chunk: usize,
) -> Result<(f64, f64, f64)> {
    let mut acc = Running::default();
    let idx: Vec<usize> = (0..images.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, model.params(), false);
        let x = g.constant(gather(images, part)?);
        let parts = model.batch_loss(&mut g, &mut ctx, x, plan, loss)?;
        acc.add(&g, &parts, part.len() as f64);
    }
    Ok(acc.mean())
}

/// Trains `model` in place and leaves it at the best-validation weights.
///
/// Each epoch draws `batch_size * batches_per_epoch` training images
/// without replacement (reshuffling when the set is exhausted), then scores
/// the validation set in evaluation mode with the same loss formula.
/// Training stops when the validation loss has not improved for
/// `patience` epochs or after `max_epochs`.
pub fn train<T: Real, M: Trainable<T>>(
    model: &mut M,
    spec: &RunSpec,
    train_set: &[Tensor<T>],
    val_set: &[Tensor<T>],
) -> Result<TrainReport> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(AsrError::Config("training and validation sets must be non-empty".into()));
    }
    let side = train_set[0].shape().last().copied().unwrap_or(0);
    spec.validate(side, spec.schedule.gate_init.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut opt = AdamState::new(
        model.params(),
        AdamConfig {
            lr: spec.lr,
            ..AdamConfig::default()
        },
    );
    let mut log_file = match &spec.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| AsrError::io(dir, e))?;
            Some(csv::Writer::from_path(dir.join("train_log.csv"))?)
        }
        None => None,
    };
    let mut report = TrainReport {
        log: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
    };
    let mut best_params = model.params().clone();
    let mut stale = 0usize;
    for epoch in 1..=spec.max_epochs() {
        let plan = spec.plan(epoch);
        let order = epoch_indices(train_set.len(), spec.epoch_size(), &mut rng);
        let mut acc = Running::default();
        for (b, idx) in order.chunks(spec.batch_size).enumerate() {
            let mut g = Graph::new();
            let params = model.params();
            let mut ctx = Ctx::new(&mut g, params, true);
            let x = g.constant(gather(train_set, idx)?);
            let parts = model.batch_loss(&mut g, &mut ctx, x, &plan, &spec.loss)?;
            let value = g.value(parts.total).item().as_f64();
            if !value.is_finite() {
                return Err(AsrError::NonFinite(format!(
                    "training loss is {value} at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            acc.add(&g, &parts, 1.0);
            g.backward(parts.total)?;
            let (binding, stats) = ctx.into_stats();
            let grads = binding.grads(&g, params);
            drop(g);
            opt.step(model.params_mut(), &grads)?;
            let momentum = model.bn_momentum();
            update_running_stats(model.params_mut(), &stats, momentum);
        }
        let (train_loss, train_mmse, train_arv) = acc.mean();
        let (val_loss, val_mmse, val_arv) = evaluate_loss(model, val_set, &plan, &spec.loss, spec.eval_chunk)?;
        if !val_loss.is_finite() {
            return Err(AsrError::NonFinite(format!("validation loss is {val_loss} at epoch {epoch}")));
        }
        let gate = |j: usize| plan.gates.get(j).copied().unwrap_or(1.0);
        let rec = EpochRecord {
            epoch,
            train_loss,
            train_mmse,
            train_arv,
            val_loss,
            val_mmse,
            val_arv,
            gate_0: gate(0),
            gate_1: gate(1),
            gate_2: gate(2),
            reg_active: plan.reg_active,
        };
        info!(
            "{} epoch {epoch}: train {train_loss:.6} val {val_loss:.6} gates {:?} reg {}",
            spec.variant, plan.gates, plan.reg_active
        );
        if let Some(w) = log_file.as_mut() {
            w.serialize(&rec)?;
            w.flush().map_err(|e| AsrError::io(Path::new("train_log.csv"), e))?;
        }
        report.log.push(rec);
        if val_loss < report.best_val_loss {
            report.best_val_loss = val_loss;
            report.best_epoch = epoch;
            best_params = model.params().clone();
            stale = 0;
            if let Some(dir) = &spec.out_dir {
                checkpoint::save(&best_params, &dir.join("best.ckpt"))?;
            }
        } else {
            stale += 1;
            if stale >= spec.patience {
                warn!("early stop at epoch {epoch}; best epoch {}", report.best_epoch);
                report.stopped_early = true;
                break;
            }
        }
    }
    model.params_mut().assign(&best_params)?;
    Ok(report)
}

/// Writes `spec` as TOML next to the run outputs.
pub fn write_run_spec(spec: &RunSpec, dir: &Path) -> Result<()> {
    let text = toml::to_string_pretty(spec).map_err(|e| AsrError::Config(e.to_string()))?;
    let path = dir.join("run.toml");
    std::fs::File::create(&path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| AsrError::io(&path, e))
}
