//! Two-stage training: heads only with the backbone frozen, then full
//! fine-tuning under a warmup + cosine schedule. Both stages use AdamW and
//! early stopping on the validation total loss.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::{make_batches, Batch, BatchTarget, LabeledSample};
use crate::error::{Error, Result};
use crate::graph::ParamGroup;
use crate::model::{ModelConfig, ModelState};
use crate::objectives::{
    argmax_rows, ccc_loss, combine_mtl, compute_sample_weights, mae_loss_with_grad,
    mse_loss_with_grad, uar, weighted_cross_entropy, MetricsReport, ObjectiveContext,
    SampleWeighting,
};
use crate::tasks::{LossKind, TaskId, TaskSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    HeadsOnly,
    FineTune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// `lr_max` at every step.
    Constant,
    /// Linear warmup to `lr_max`, then cosine decay to 0.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub lr_max: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub shuffle_seed: u64,
}

impl StageConfig {
    pub fn heads_only() -> Self {
        StageConfig {
            stage: Stage::HeadsOnly,
            max_epochs: 30,
            patience: 2,
            batch_size: 32,
            schedule: Schedule::Constant,
            lr_max: 1e-3,
            warmup_epochs: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.0,
            shuffle_seed: 0,
        }
    }

    pub fn fine_tune() -> Self {
        StageConfig {
            stage: Stage::FineTune,
            schedule: Schedule::Cosine,
            lr_max: 4e-5,
            warmup_epochs: 1,
            ..Self::heads_only()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.patience == 0 || self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must lie in [1, max_epochs={})",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::Config("lr_max must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if [self.eps, self.weight_decay, self.grad_clip]
            .iter()
            .any(|v| v.is_nan())
            || self.eps <= 0.0
            || self.weight_decay < 0.0
            || self.grad_clip < 0.0
        {
            return Err(Error::Config(
                "eps must be positive; weight_decay and grad_clip non-negative".into(),
            ));
        }
        if self.schedule == Schedule::Cosine && self.warmup_epochs >= self.max_epochs {
            return Err(Error::Config(
                "warmup_epochs must be smaller than max_epochs".into(),
            ));
        }
        Ok(())
    }

    /// `(warmup_steps, total_steps)` for a training split of `n_train` samples.
    pub fn step_budget(&self, n_train: usize) -> (usize, usize) {
        let per_epoch = n_train.div_ceil(self.batch_size).max(1);
        (self.warmup_epochs * per_epoch, self.max_epochs * per_epoch)
    }
}

/// Warmup + cosine learning rate at `step`.
pub fn lr_schedule(
    step: usize,
    warmup_steps: usize,
    total_steps: usize,
    lr_max: f64,
) -> Result<f64> {
    if warmup_steps == 0 || warmup_steps >= total_steps || step > total_steps {
        return Err(Error::Config(format!(
            "invalid schedule position: step {step}, warmup {warmup_steps}, total {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(lr_max * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

fn stage_lr(cfg: &StageConfig, step: usize, warmup: usize, total: usize) -> Result<f64> {
    match cfg.schedule {
        Schedule::Constant => Ok(cfg.lr_max),
        Schedule::Cosine if warmup == 0 => {
            let progress = step as f64 / total as f64;
            Ok(cfg.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
        }
        Schedule::Cosine => lr_schedule(step.min(total), warmup, total, cfg.lr_max),
    }
}

/// Adam with decoupled weight decay. The decay term is multiplied by the
/// learning rate, so a step at `lr = 0` leaves every parameter unchanged.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(state: &ModelState, cfg: &StageConfig) -> Self {
        let zeros: Vec<Array2<f64>> = state
            .params()
            .iter()
            .map(|p| Array2::zeros(p.value.raw_dim()))
            .collect();
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates every parameter for which `trainable` returns true.
    pub fn step(
        &mut self,
        state: &mut ModelState,
        grads: &[Array2<f64>],
        lr: f64,
        trainable: impl Fn(ParamGroup) -> bool,
    ) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in state.params_mut().iter_mut().enumerate() {
            if !trainable(p.group) {
                continue;
            }
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            ndarray::Zip::from(&mut p.value)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads[i])
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps) + wd * *w;
                    *w -= lr * update;
                });
        }
    }
}

/// Patience-based stopping on a loss that should decrease. Only strict
/// improvements reset the counter.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records `loss` for `epoch`; returns true if it is the new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        match self.best {
            Some((_, best)) if loss >= best => {
                self.bad_epochs += 1;
                false
            }
            _ => {
                self.best = Some((epoch, loss));
                self.bad_epochs = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.map(|(_, l)| l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    /// Mean per-batch training losses; empty for epoch 0.
    pub train_losses: BTreeMap<TaskId, f64>,
    pub train_total: Option<f64>,
    pub val: MetricsReport,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    /// `exp(-s_i)` at the end of the epoch.
    pub task_weights: BTreeMap<TaskId, f64>,
    pub is_best: bool,
    pub early_stop: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub stage: Stage,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        self.records
            .iter()
            .find(|r| r.epoch == self.best_epoch)
            .expect("best epoch is recorded")
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<EpochRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::Format(format!("history record: {e}")))
            })
            .collect()
    }

    /// The same history with wall times zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> TrainHistory {
        let mut h = self.clone();
        for r in &mut h.records {
            r.wall_time_s = 0.0;
        }
        h
    }
}

/// Training and validation samples.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [LabeledSample],
    pub val: &'a [LabeledSample],
}

/// Fills `batch.sample_weights` according to the weighting mode.
pub fn apply_sample_weights(batch: &mut Batch, mode: SampleWeighting) -> Result<()> {
    if mode == SampleWeighting::None {
        batch.sample_weights.fill(1.0);
        return Ok(());
    }
    let countries = batch
        .countries
        .iter()
        .zip(&batch.ids)
        .map(|(c, id)| {
            c.ok_or_else(|| {
                Error::Labels(format!("sample `{id}` has no country for sample weighting"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    batch.sample_weights = compute_sample_weights(&countries, mode).into();
    Ok(())
}

/// Model outputs and stacked targets for a whole split, in sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPredictions {
    pub ids: Vec<String>,
    pub outputs: BTreeMap<TaskId, Array2<f64>>,
    pub targets: BTreeMap<TaskId, BatchTarget>,
}

pub fn predict_split(
    state: &ModelState,
    samples: &[LabeledSample],
    batch_size: usize,
) -> Result<SplitPredictions> {
    let batches = make_batches(samples, batch_size, None)?;
    let mut ids = Vec::new();
    let mut outputs: BTreeMap<TaskId, Vec<Array2<f64>>> = BTreeMap::new();
    let mut targets: BTreeMap<TaskId, Vec<BatchTarget>> = BTreeMap::new();
    for batch in &batches {
        ids.extend(batch.ids.iter().cloned());
        for (task, out) in state.forward(batch)? {
            outputs.entry(task).or_default().push(out);
        }
        for task in state.task_set().ids() {
            if let Some(t) = batch.targets.get(&task) {
                targets.entry(task).or_default().push(t.clone());
            }
        }
    }
    let stack = |parts: &[Array2<f64>]| {
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        concatenate(Axis(0), &views).expect("batches share widths")
    };
    let outputs = outputs
        .into_iter()
        .map(|(t, parts)| (t, stack(&parts)))
        .collect();
    let targets = targets
        .into_iter()
        .filter(|(_, parts)| parts.len() == batches.len())
        .map(|(task, parts)| {
            let merged = match &parts[0] {
                BatchTarget::Class(_) => BatchTarget::Class(
                    parts
                        .iter()
                        .flat_map(|p| match p {
                            BatchTarget::Class(c) => c.clone(),
                            BatchTarget::Regression { .. } => {
                                unreachable!("kind is fixed per task")
                            }
                        })
                        .collect(),
                ),
                BatchTarget::Regression { .. } => {
                    let (values, masks): (Vec<_>, Vec<_>) = parts
                        .iter()
                        .map(|p| match p {
                            BatchTarget::Regression { values, dim_mask } => {
                                (values.clone(), dim_mask.clone())
                            }
                            BatchTarget::Class(_) => unreachable!("kind is fixed per task"),
                        })
                        .unzip();
                    BatchTarget::Regression {
                        values: stack(&values),
                        dim_mask: stack(&masks),
                    }
                }
            };
            (task, merged)
        })
        .collect();
    Ok(SplitPredictions {
        ids,
        outputs,
        targets,
    })
}

/// Long-format CSV `id,task,dim_index,value`, one line per output value.
/// Classification rows hold class probabilities.
pub fn predictions_to_csv(preds: &SplitPredictions) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "task", "dim_index", "value"])
        .expect("in-memory write");
    for (i, id) in preds.ids.iter().enumerate() {
        for (task, out) in &preds.outputs {
            for (k, v) in out.row(i).iter().enumerate() {
                w.write_record([id.as_str(), task.name(), &k.to_string(), &format!("{v:?}")])
                    .expect("in-memory write");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Split-level metrics: CCC of the concatenated predictions per regression
/// task (mean over dimensions), UAR per classification task, per-task losses
/// on the whole split and their uncertainty-weighted total.
pub fn metrics_from_predictions(
    state: &ModelState,
    preds: &SplitPredictions,
) -> Result<MetricsReport> {
    let mut metrics = BTreeMap::new();
    let mut task_losses = BTreeMap::new();
    for spec in state.task_set().tasks() {
        let out = &preds.outputs[&spec.id];
        let target = preds
            .targets
            .get(&spec.id)
            .ok_or_else(|| Error::Labels(format!("split has no {} targets", spec.id)))?;
        let (metric, loss) = match target {
            BatchTarget::Regression { values, dim_mask } => {
                let metric = match ccc_loss(out.view(), values.view(), Some(dim_mask.view())) {
                    Ok(l) => 1.0 - l,
                    Err(Error::InsufficientData(_)) => 0.0,
                    Err(e) => return Err(e),
                };
                let loss = match spec.loss {
                    LossKind::Ccc => 1.0 - metric,
                    LossKind::Mse => {
                        mse_loss_with_grad(out.view(), values.view(), dim_mask.view())?.0
                    }
                    LossKind::Mae => {
                        mae_loss_with_grad(out.view(), values.view(), dim_mask.view())?.0
                    }
                    LossKind::WeightedCe => unreachable!("regression task with cross-entropy loss"),
                };
                (metric, loss)
            }
            BatchTarget::Class(classes) => {
                let predicted = argmax_rows(out.view());
                let metric = uar(&predicted, classes, spec.dim)?;
                let cw = state.objective().class_weights_for(spec.id, spec.dim);
                let loss =
                    weighted_cross_entropy(out.view(), classes, &cw, &vec![1.0; classes.len()])?;
                (metric, loss)
            }
        };
        metrics.insert(spec.id, metric);
        task_losses.insert(spec.id, loss);
    }
    let uncertainty = state.uncertainty();
    let pairs: Vec<(TaskId, f64)> = task_losses.iter().map(|(&t, &l)| (t, l)).collect();
    let total_loss = combine_mtl(&pairs, &uncertainty, state.objective().uncertainty_form)?.total;
    Ok(MetricsReport {
        metrics,
        task_losses,
        total_loss,
        task_weights: uncertainty.task_weights(),
    })
}

pub fn evaluate(
    state: &ModelState,
    samples: &[LabeledSample],
    batch_size: usize,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("cannot evaluate an empty split".into()));
    }
    metrics_from_predictions(state, &predict_split(state, samples, batch_size)?)
}

fn grad_norm(
    grads: &[Array2<f64>],
    state: &ModelState,
    trainable: &impl Fn(ParamGroup) -> bool,
) -> f64 {
    state
        .params()
        .iter()
        .zip(grads)
        .filter(|(p, _)| trainable(p.group))
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Runs one stage in place on `state` and leaves it at the best epoch's
/// parameters. On divergence the best parameters seen so far are restored
/// before the error is returned.
pub fn train_stage(
    state: &mut ModelState,
    data: TrainData<'_>,
    cfg: &StageConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptySplit("training split is empty".into()));
    }
    if data.val.is_empty() {
        return Err(Error::EmptySplit("validation split is empty".into()));
    }
    let train_backbone = cfg.stage == Stage::FineTune;
    let trainable = move |g: ParamGroup| train_backbone || g != ParamGroup::Backbone;
    let (warmup, total_steps) = cfg.step_budget(data.train.len());
    let mut opt = AdamW::new(state, cfg);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let start = Instant::now();

    let initial = evaluate(state, data.val, cfg.batch_size)?;
    if !initial.total_loss.is_finite() {
        return Err(Error::Diverged {
            task: "total (initial evaluation)".into(),
        });
    }
    stopper.observe(0, initial.total_loss);
    let mut best_params = state.params().clone();
    let mut records = vec![EpochRecord {
        stage: cfg.stage,
        epoch: 0,
        train_losses: BTreeMap::new(),
        train_total: None,
        task_weights: initial.task_weights.clone(),
        val: initial,
        lr: stage_lr(cfg, 0, warmup, total_steps)?,
        is_best: true,
        early_stop: false,
        wall_time_s: start.elapsed().as_secs_f64(),
    }];

    let mut step = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let seed = cfg
            .shuffle_seed
            .wrapping_mul(1_000_003)
            .wrapping_add(epoch as u64);
        let batches = make_batches(data.train, cfg.batch_size, Some(seed))?;
        let mut sums: BTreeMap<TaskId, (f64, usize)> = BTreeMap::new();
        let mut total_sum = 0.0;
        let mut used_batches = 0usize;
        let mut lr = 0.0;
        for mut batch in batches {
            apply_sample_weights(&mut batch, state.objective().sample_weighting)?;
            lr = stage_lr(cfg, step, warmup, total_steps)?;
            step += 1;
            let (losses, mut grads) = match state.loss_and_grads(&batch, train_backbone) {
                Ok(r) => r,
                Err(Error::Degenerate(m)) => {
                    log::debug!("skipping batch: {m}");
                    continue;
                }
                Err(e @ Error::Diverged { .. }) => {
                    *state.params_mut() = best_params;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if !losses.total.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                *state.params_mut() = best_params;
                let task = losses
                    .task_losses
                    .iter()
                    .find(|(_, l)| !l.is_finite())
                    .map_or("total".to_string(), |(t, _)| t.name().to_string());
                return Err(Error::Diverged { task });
            }
            if cfg.grad_clip > 0.0 {
                let norm = grad_norm(&grads, state, &trainable);
                if norm > cfg.grad_clip {
                    let scale = cfg.grad_clip / norm;
                    grads.iter_mut().for_each(|g| *g *= scale);
                }
            }
            opt.step(state, &grads, lr, trainable);
            for (&t, &l) in &losses.task_losses {
                let e = sums.entry(t).or_insert((0.0, 0));
                e.0 += l;
                e.1 += 1;
            }
            total_sum += losses.total;
            used_batches += 1;
        }

        let val = match evaluate(state, data.val, cfg.batch_size) {
            Ok(v) if v.total_loss.is_finite() => v,
            Ok(_) => {
                *state.params_mut() = best_params;
                return Err(Error::Diverged {
                    task: "total (validation)".into(),
                });
            }
            Err(e @ Error::Diverged { .. }) => {
                *state.params_mut() = best_params;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let is_best = stopper.observe(epoch, val.total_loss);
        if is_best {
            best_params = state.params().clone();
        }
        let stop = stopper.should_stop() || epoch == cfg.max_epochs;
        records.push(EpochRecord {
            stage: cfg.stage,
            epoch,
            train_losses: sums.iter().map(|(&t, &(s, n))| (t, s / n as f64)).collect(),
            train_total: (used_batches > 0).then(|| total_sum / used_batches as f64),
            task_weights: val.task_weights.clone(),
            val,
            lr,
            is_best,
            early_stop: stopper.should_stop(),
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        log::info!(
            "{:?} epoch {epoch}: val total {:.5}{}",
            cfg.stage,
            records.last().unwrap().val.total_loss,
            if is_best { " (best)" } else { "" }
        );
        if stop {
            break;
        }
    }
    *state.params_mut() = best_params;
    Ok(TrainHistory {
        stage: cfg.stage,
        records,
        best_epoch: stopper.best_epoch().unwrap_or(0),
    })
}

/// Stage 1 (heads only) followed by stage 2 (fine-tune) from the stage-1
/// best parameters with fresh optimizer moments.
pub fn fit_two_stage(
    state: &mut ModelState,
    data: TrainData<'_>,
    stage1: &StageConfig,
    stage2: &StageConfig,
) -> Result<(TrainHistory, TrainHistory)> {
    let first = train_stage(state, data, stage1)?;
    let second = train_stage(state, data, stage2)?;
    Ok((first, second))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"VBCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    fingerprint: String,
    config: ModelConfig,
    task_set: TaskSet,
    objective: ObjectiveContext,
    params: Vec<(String, [usize; 2])>,
}

/// Binary container: magic, version, a JSON header with configuration and
/// parameter shapes, then every parameter as little-endian f64.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        fingerprint: state.fingerprint().to_string(),
        config: state.config().clone(),
        task_set: state.task_set().clone(),
        objective: state.objective().clone(),
        params: state
            .params()
            .iter()
            .map(|p| (p.name.clone(), [p.value.nrows(), p.value.ncols()]))
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + state.params().numel() * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for p in state.params().iter() {
        for v in p.value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| corrupt(&format!("header: {e}")))?;
    let mut state = ModelState::new(header.config, header.task_set, header.objective)?;
    if state.fingerprint() != header.fingerprint {
        return Err(Error::Fingerprint {
            expected: state.fingerprint().to_string(),
            found: header.fingerprint,
        });
    }
    if header.params.len() != state.params().len() {
        return Err(corrupt("parameter count mismatch"));
    }
    let mut offset = header_end;
    for (p, (name, shape)) in state.params_mut().iter_mut().zip(&header.params) {
        if &p.name != name || [p.value.nrows(), p.value.ncols()] != *shape {
            return Err(corrupt(&format!(
                "parameter `{name}` does not match the model layout"
            )));
        }
        let n = shape[0] * shape[1] * 8;
        let chunk = bytes
            .get(offset..offset + n)
            .ok_or_else(|| corrupt("truncated parameters"))?;
        for (dst, src) in p.value.iter_mut().zip(chunk.chunks_exact(8)) {
            *dst = f64::from_le_bytes(src.try_into().unwrap());
        }
        offset += n;
    }
    if offset != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(state)
}

/// Loads a checkpoint and rejects it unless it was built for `task_set`
/// and `config`.
pub fn load_checkpoint_for(
    path: &Path,
    task_set: &TaskSet,
    config: &ModelConfig,
) -> Result<ModelState> {
    let state = load_checkpoint(path)?;
    state.check_compatible(task_set, config)?;
    Ok(state)
}

/// Writes a history as JSON lines.
pub fn write_history(history: &[&TrainHistory], path: &Path) -> Result<()> {
    let text: String = history.iter().map(|h| h.to_jsonl()).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, Split, SynthSpec};
    use crate::model::BackboneKind;
    use crate::tasks::build_task_set;

    fn data(n: usize, seed: u64) -> (Vec<LabeledSample>, Vec<LabeledSample>) {
        let samples = generate_synthetic(&SynthSpec {
            n_samples: n,
            dim: 6,
            min_frames: 2,
            max_frames: 5,
            seed,
            noise_level: 0.0,
            train_ratio: 0.8,
        })
        .unwrap();
        samples.into_iter().partition(|s| s.split == Split::Train)
    }

    fn small_state(preset: &str) -> ModelState {
        let cfg = ModelConfig {
            backbone: BackboneKind::Tiny,
            input_dim: 6,
            encoder_dim: 8,
            encoder_blocks: 1,
            hidden_dim: 16,
            detach_intermediate: false,
            init_seed: 2,
        };
        ModelState::new(
            cfg,
            build_task_set(preset, &[] as &[&str]).unwrap(),
            ObjectiveContext::default(),
        )
        .unwrap()
    }

    fn quick(stage: Stage) -> StageConfig {
        let base = match stage {
            Stage::HeadsOnly => StageConfig::heads_only(),
            Stage::FineTune => StageConfig::fine_tune(),
        };
        StageConfig {
            max_epochs: 4,
            batch_size: 8,
            ..base
        }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(5, 5, 150, 4e-5).unwrap(), 4e-5);
        assert_eq!(lr_schedule(0, 5, 150, 4e-5).unwrap(), 0.0);
        assert_eq!(lr_schedule(150, 5, 150, 4e-5).unwrap(), 0.0);
        assert!((lr_schedule(2, 4, 10, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(lr_schedule(151, 5, 150, 4e-5).is_err());
        assert!(lr_schedule(0, 150, 150, 4e-5).is_err());
        assert!(lr_schedule(0, 0, 150, 4e-5).is_err());
    }

    #[test]
    fn step_budget_rounds_up() {
        let cfg = StageConfig::fine_tune();
        assert_eq!(cfg.step_budget(160), (5, 150));
        assert_eq!(cfg.step_budget(161), (6, 180));
    }

    #[test]
    fn early_stopping_example() {
        let mut es = EarlyStopping::new(2);
        let mut stopped_at = None;
        for (i, loss) in [1.0, 0.9, 0.95, 0.92, 0.5].into_iter().enumerate() {
            es.observe(i + 1, loss);
            if es.should_stop() {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(4));
        assert_eq!(es.best_epoch(), Some(2));
    }

    #[test]
    fn equal_loss_is_not_an_improvement() {
        let mut es = EarlyStopping::new(1);
        assert!(es.observe(1, 0.5));
        assert!(!es.observe(2, 0.5));
        assert!(es.should_stop());
    }

    #[test]
    fn stage_config_validation() {
        assert!(StageConfig::heads_only().validate().is_ok());
        assert!(StageConfig::fine_tune().validate().is_ok());
        let bad = StageConfig {
            patience: 30,
            ..StageConfig::heads_only()
        };
        assert!(bad.validate().is_err());
        let bad = StageConfig {
            lr_max: 0.0,
            ..StageConfig::heads_only()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_lr_step_is_a_no_op() {
        let (train, _) = data(20, 1);
        let mut state = small_state("ZeroFive");
        let before = state.params().clone();
        let batch = make_batches(&train, 8, None).unwrap().remove(0);
        let (_, grads) = state.loss_and_grads(&batch, true).unwrap();
        let mut opt = AdamW::new(&state, &StageConfig::fine_tune());
        opt.step(&mut state, &grads, 0.0, |_| true);
        assert_eq!(&before, state.params());
    }

    #[test]
    fn heads_only_keeps_backbone_and_reduces_loss() {
        let (train, val) = data(40, 3);
        let mut state = small_state("ZeroFive");
        let checksum = state.backbone_checksum();
        let history = train_stage(
            &mut state,
            TrainData {
                train: &train,
                val: &val,
            },
            &quick(Stage::HeadsOnly),
        )
        .unwrap();
        assert_eq!(state.backbone_checksum(), checksum);
        assert_eq!(history.records[0].epoch, 0);
        let epochs: Vec<usize> = history.records.iter().map(|r| r.epoch).collect();
        assert!(epochs.windows(2).all(|w| w[1] == w[0] + 1));
        let best = history.best();
        assert!(history
            .records
            .iter()
            .all(|r| r.val.total_loss >= best.val.total_loss));
    }

    #[test]
    fn two_stage_handoff_and_determinism() {
        let (train, val) = data(40, 4);
        let d = TrainData {
            train: &train,
            val: &val,
        };
        let run = || {
            let mut state = small_state("OneFour");
            let (h1, h2) = fit_two_stage(
                &mut state,
                d,
                &quick(Stage::HeadsOnly),
                &quick(Stage::FineTune),
            )
            .unwrap();
            (state, h1, h2)
        };
        let (s_a, h1a, h2a) = run();
        let (s_b, h1b, h2b) = run();
        assert_eq!(s_a.params(), s_b.params());
        assert_eq!(h1a.without_timing(), h1b.without_timing());
        assert_eq!(h2a.without_timing(), h2b.without_timing());
        assert!(h2a.records[0].val.total_loss <= h1a.best().val.total_loss + 1e-6);
        assert_eq!(h1a.stage, Stage::HeadsOnly);
        assert_eq!(h2a.stage, Stage::FineTune);
    }

    #[test]
    fn history_jsonl_round_trip() {
        let (train, val) = data(30, 5);
        let mut state = small_state("ZeroFive");
        let h = train_stage(
            &mut state,
            TrainData {
                train: &train,
                val: &val,
            },
            &quick(Stage::HeadsOnly),
        )
        .unwrap();
        let text = h.to_jsonl();
        assert_eq!(text.lines().count(), h.records.len());
        assert_eq!(TrainHistory::from_jsonl(&text).unwrap(), h.records);
    }

    #[test]
    fn exact_predictions_give_perfect_ccc() {
        let (train, _) = data(20, 6);
        let state = small_state("ZeroFive");
        let mut preds = predict_split(&state, &train, 7).unwrap();
        for (task, target) in &preds.targets {
            if let BatchTarget::Regression { values, .. } = target {
                preds.outputs.insert(*task, values.clone());
            }
        }
        let report = metrics_from_predictions(&state, &preds).unwrap();
        for task in [TaskId::High, TaskId::Culture, TaskId::Two] {
            assert!((report.metrics[&task] - 1.0).abs() < 1e-12, "{task}");
        }
    }

    #[test]
    fn predictions_csv_layout() {
        let (train, _) = data(6, 8);
        let state = small_state("ZeroFive");
        let preds = predict_split(&state, &train, 4).unwrap();
        let text = predictions_to_csv(&preds);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,task,dim_index,value");
        assert_eq!(lines.len(), 1 + train.len() * (10 + 40 + 2 + 8 + 4));
        assert!(lines[1].starts_with(&format!("{},High,0,", preds.ids[0])));
    }

    #[test]
    fn report_lists_only_active_tasks() {
        let (train, _) = data(20, 6);
        let cfg = small_state("ZeroFive").config().clone();
        let ts = build_task_set("ZeroFive", &["-Two"]).unwrap();
        let state = ModelState::new(cfg, ts, ObjectiveContext::default()).unwrap();
        let report = evaluate(&state, &train, 8).unwrap();
        assert!(!report.metrics.contains_key(&TaskId::Two));
        assert_eq!(report.metrics.len(), 4);
        assert!(evaluate(&state, &[], 8).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_rejection() {
        let (train, _) = data(12, 7);
        let mut state = small_state("TwoThree");
        state.set_uncertainty(&[0.1, -0.2, 0.3, 0.0, 0.5]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let batch = make_batches(&train, 12, None).unwrap().remove(0);
        assert_eq!(
            state.forward(&batch).unwrap(),
            loaded.forward(&batch).unwrap()
        );
        assert_eq!(state.params(), loaded.params());

        let other = build_task_set("TwoThree", &["-Two"]).unwrap();
        assert!(matches!(
            load_checkpoint_for(&path, &other, state.config()),
            Err(Error::Fingerprint { .. })
        ));
        assert!(load_checkpoint_for(&path, state.task_set(), state.config()).is_ok());

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
