//! Experiment configuration, the ten ablation presets, grid runs and the
//! results table.
//!
//! Configs are TOML documents with dotted sections (`[model]`,
//! `[trainer.stage2]`, ...). Omitted keys take their defaults, unknown keys
//! are rejected with their full dotted path, and `key=value` overrides are
//! applied after the file is read.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::{generate_synthetic, read_manifest, LabeledSample, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{BackboneKind, ModelConfig, ModelState};
use crate::objectives::{
    metric_name, MetricsReport, ObjectiveContext, SampleWeighting, UncertaintyForm,
};
use crate::tasks::{
    build_task_set, compute_class_weights, validate_labels, TargetValue, TaskId, TaskKind, TaskSet,
};
use crate::trainer::{
    evaluate, fit_two_stage, save_checkpoint, write_history, Schedule, Stage, StageConfig,
    TrainData, TrainHistory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// Manifest CSV, required when `source = "manifest"`. Relative paths are
    /// resolved against the config file's directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub n_samples: usize,
    pub dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub noise_level: f64,
    pub train_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthSpec::default();
        DataConfig {
            source: DataSource::Synth,
            manifest: None,
            n_samples: s.n_samples,
            dim: s.dim,
            min_frames: s.min_frames,
            max_frames: s.max_frames,
            noise_level: s.noise_level,
            train_ratio: s.train_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TasksConfig {
    /// Routing preset label: "2/3", "1/4" or "0/5".
    pub preset: String,
    /// Variant flags: "-Two", "-Country", "MSE", "MAE", "-SM".
    pub variants: Vec<String>,
    /// Inverse-frequency class weights in the cross-entropy losses.
    pub class_weights: bool,
    pub sample_weighting: SampleWeighting,
}

impl Default for TasksConfig {
    fn default() -> Self {
        TasksConfig {
            preset: "0/5".into(),
            variants: Vec::new(),
            class_weights: true,
            sample_weighting: SampleWeighting::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub backbone: BackboneKind,
    pub encoder_dim: usize,
    pub encoder_blocks: usize,
    pub hidden_dim: usize,
    pub detach_intermediate: bool,
    pub uncertainty: UncertaintyForm,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            backbone: m.backbone,
            encoder_dim: m.encoder_dim,
            encoder_blocks: m.encoder_blocks,
            hidden_dim: m.hidden_dim,
            detach_intermediate: m.detach_intermediate,
            uncertainty: UncertaintyForm::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSection {
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
    pub grad_clip: f64,
}

impl StageSection {
    fn from_stage(c: &StageConfig) -> Self {
        StageSection {
            max_epochs: c.max_epochs,
            patience: c.patience,
            batch_size: c.batch_size,
            schedule: c.schedule,
            lr_max: c.lr_max,
            warmup_epochs: c.warmup_epochs,
            weight_decay: c.weight_decay,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            grad_clip: c.grad_clip,
        }
    }

    fn to_stage(&self, stage: Stage, shuffle_seed: u64) -> StageConfig {
        StageConfig {
            stage,
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            schedule: self.schedule,
            lr_max: self.lr_max,
            warmup_epochs: self.warmup_epochs,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            grad_clip: self.grad_clip,
            shuffle_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub stage1: StageSection,
    pub stage2: StageSection,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            stage1: StageSection::from_stage(&StageConfig::heads_only()),
            stage2: StageSection::from_stage(&StageConfig::fine_tune()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub tasks: TasksConfig,
    pub model: ModelSection,
    pub trainer: TrainerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            tasks: TasksConfig::default(),
            model: ModelSection::default(),
            trainer: TrainerConfig::default(),
        }
    }
}

/// Keys that are valid but absent from the serialized defaults.
const OPTIONAL_KEYS: &[&str] = &["data.manifest"];

fn flatten_keys(table: &toml::Table, prefix: &str, out: &mut BTreeSet<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten_keys(t, &key, out),
            _ => {
                out.insert(key);
            }
        }
    }
}

fn known_keys() -> BTreeSet<String> {
    let mut keys = BTreeSet::new();
    flatten_keys(&default_table(), "", &mut keys);
    keys.extend(OPTIONAL_KEYS.iter().map(|k| k.to_string()));
    keys
}

fn default_table() -> toml::Table {
    toml::Table::try_from(ExperimentConfig::default()).expect("default config serializes")
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string (`tasks.preset=0/5`).
fn parse_override_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        };
    }
    node.insert(
        parts[parts.len() - 1].to_string(),
        parse_override_value(raw),
    );
    Ok(())
}

/// Resolves a config document: defaults, then `text`, then `overrides`.
/// Relative paths inside the document are resolved against `base_dir`.
pub fn parse_config_str(
    text: &str,
    base_dir: Option<&Path>,
    overrides: &[String],
) -> Result<ExperimentConfig> {
    let mut user: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("config syntax: {}", e.message())))?;
    for o in overrides {
        apply_override(&mut user, o)?;
    }
    let known = known_keys();
    let mut given = BTreeSet::new();
    flatten_keys(&user, "", &mut given);
    if let Some(unknown) = given.iter().find(|k| !known.contains(*k)) {
        return Err(Error::Config(format!("unknown key `{unknown}`")));
    }
    if !user.contains_key("seed") {
        return Err(Error::Config("missing mandatory field `seed`".into()));
    }
    let mut table = default_table();
    merge(&mut table, user);
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
        .map_err(|e| {
            Error::Config(format!(
                "invalid value for `{}`: {}",
                e.path(),
                e.inner().message()
            ))
        })?;
    if let (Some(base), Some(m)) = (base_dir, cfg.data.manifest.as_mut()) {
        if m.is_relative() {
            *m = base.join(&*m);
        }
        // absolute, so a saved copy of this config loads from anywhere
        if let Ok(abs) = fs::canonicalize(&*m) {
            *m = abs;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, path.parent(), overrides)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.task_set()?;
        self.synth_spec().validate()?;
        let (s1, s2) = self.stage_configs();
        s1.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("trainer.stage1: {m}")),
            other => other,
        })?;
        s2.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("trainer.stage2: {m}")),
            other => other,
        })?;
        if self.data.source == DataSource::Manifest {
            let m = self.data.manifest.as_ref().ok_or_else(|| {
                Error::Config("`data.manifest` is required when data.source = \"manifest\"".into())
            })?;
            if !m.is_file() {
                return Err(Error::Config(format!(
                    "`data.manifest` file {} does not exist",
                    m.display()
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The same config with `overrides` applied through the parser.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<ExperimentConfig> {
        parse_config_str(&self.to_toml(), None, overrides)
    }

    pub fn task_set(&self) -> Result<TaskSet> {
        build_task_set(&self.tasks.preset, &self.tasks.variants)
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_samples: self.data.n_samples,
            dim: self.data.dim,
            min_frames: self.data.min_frames,
            max_frames: self.data.max_frames,
            seed: self.seed,
            noise_level: self.data.noise_level,
            train_ratio: self.data.train_ratio,
        }
    }

    pub fn stage_configs(&self) -> (StageConfig, StageConfig) {
        (
            self.trainer.stage1.to_stage(Stage::HeadsOnly, self.seed),
            self.trainer
                .stage2
                .to_stage(Stage::FineTune, self.seed.wrapping_add(1)),
        )
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.model.backbone,
            input_dim,
            encoder_dim: self.model.encoder_dim,
            encoder_blocks: self.model.encoder_blocks,
            hidden_dim: self.model.hidden_dim,
            detach_intermediate: self.model.detach_intermediate,
            init_seed: self.seed,
        }
    }

    pub fn load_samples(&self) -> Result<Vec<LabeledSample>> {
        match self.data.source {
            DataSource::Synth => generate_synthetic(&self.synth_spec()),
            DataSource::Manifest => {
                let path = self
                    .data
                    .manifest
                    .as_ref()
                    .ok_or_else(|| Error::Config("`data.manifest` is required".into()))?;
                read_manifest(path)
            }
        }
    }

    /// Class weights from the training split (when enabled), sample
    /// weighting and uncertainty form.
    pub fn objective_context(
        &self,
        task_set: &TaskSet,
        train: &[LabeledSample],
    ) -> Result<ObjectiveContext> {
        let mut class_weights = BTreeMap::new();
        if self.tasks.class_weights {
            for spec in task_set
                .tasks()
                .iter()
                .filter(|t| t.kind == TaskKind::Classification)
            {
                let mut counts = vec![0u64; spec.dim];
                for s in train {
                    if let Some(TargetValue::Class(c)) = s.targets.get(&spec.id) {
                        if let Some(n) = counts.get_mut(*c) {
                            *n += 1;
                        }
                    }
                }
                class_weights.insert(spec.id, compute_class_weights(&counts)?);
            }
        }
        Ok(ObjectiveContext {
            class_weights,
            sample_weighting: self.tasks.sample_weighting,
            uncertainty_form: self.model.uncertainty,
        })
    }
}

/// Samples of one split.
pub fn split_samples(samples: &[LabeledSample], split: Split) -> Vec<LabeledSample> {
    samples
        .iter()
        .filter(|s| s.split == split)
        .cloned()
        .collect()
}

fn check_labels(samples: &[LabeledSample], task_set: &TaskSet) -> Result<()> {
    for s in samples {
        if let Err(violations) = validate_labels(&s.targets, task_set) {
            let listed: Vec<String> = violations.iter().take(3).map(ToString::to_string).collect();
            return Err(Error::Labels(format!(
                "sample `{}`: {}",
                s.id,
                listed.join("; ")
            )));
        }
    }
    Ok(())
}

/// What `metrics.json` holds for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: Option<String>,
    pub fingerprint: String,
    pub stage1_best_epoch: usize,
    pub stage2_best_epoch: usize,
    pub val: MetricsReport,
    pub train: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: ModelState,
    pub stage1: TrainHistory,
    pub stage2: TrainHistory,
    pub summary: RunSummary,
}

/// Loads data, trains both stages and evaluates on train and val. With an
/// output directory, writes `config.toml`, `history.jsonl`, `metrics.json`
/// and `model.ckpt` there.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    label: Option<&str>,
    out_dir: Option<&Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let task_set = cfg.task_set()?;
    let samples = cfg.load_samples()?;
    let train = split_samples(&samples, Split::Train);
    let val = split_samples(&samples, Split::Val);
    if train.is_empty() {
        return Err(Error::EmptySplit("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation split is empty".into()));
    }
    check_labels(&train, &task_set)?;
    check_labels(&val, &task_set)?;

    let objective = cfg.objective_context(&task_set, &train)?;
    let input_dim = train[0].features.dim();
    let mut state = ModelState::new(cfg.model_config(input_dim), task_set, objective)?;
    let (s1, s2) = cfg.stage_configs();
    let (h1, h2) = fit_two_stage(
        &mut state,
        TrainData {
            train: &train,
            val: &val,
        },
        &s1,
        &s2,
    )?;
    let summary = RunSummary {
        label: label.map(str::to_string),
        fingerprint: state.fingerprint().to_string(),
        stage1_best_epoch: h1.best_epoch,
        stage2_best_epoch: h2.best_epoch,
        val: evaluate(&state, &val, s1.batch_size)?,
        train: evaluate(&state, &train, s1.batch_size)?,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        write("config.toml", cfg.to_toml())?;
        write_history(&[&h1, &h2], &dir.join("history.jsonl"))?;
        write(
            "metrics.json",
            serde_json::to_string_pretty(&summary).expect("summary serializes"),
        )?;
        save_checkpoint(&state, &dir.join("model.ckpt"))?;
    }
    Ok(RunOutcome {
        state,
        stage1: h1,
        stage2: h2,
        summary,
    })
}

/// The ten rows of the ablation grid, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PresetName {
    TwoThree,
    OneFour,
    ZeroFive,
    Mse,
    Mae,
    MinusTwo,
    MinusCw,
    PlusSw,
    MinusSm,
    MinusCountry,
}

impl PresetName {
    pub const ALL: [PresetName; 10] = [
        PresetName::TwoThree,
        PresetName::OneFour,
        PresetName::ZeroFive,
        PresetName::Mse,
        PresetName::Mae,
        PresetName::MinusTwo,
        PresetName::MinusCw,
        PresetName::PlusSw,
        PresetName::MinusSm,
        PresetName::MinusCountry,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PresetName::TwoThree => "2/3",
            PresetName::OneFour => "1/4",
            PresetName::ZeroFive => "0/5",
            PresetName::Mse => "MSE",
            PresetName::Mae => "MAE",
            PresetName::MinusTwo => "-Two",
            PresetName::MinusCw => "-CW",
            PresetName::PlusSw => "+SW",
            PresetName::MinusSm => "-SM",
            PresetName::MinusCountry => "-Country",
        }
    }

    /// Directory-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            PresetName::TwoThree => "2-3",
            PresetName::OneFour => "1-4",
            PresetName::ZeroFive => "0-5",
            PresetName::Mse => "mse",
            PresetName::Mae => "mae",
            PresetName::MinusTwo => "minus-two",
            PresetName::MinusCw => "minus-cw",
            PresetName::PlusSw => "plus-sw",
            PresetName::MinusSm => "minus-sm",
            PresetName::MinusCountry => "minus-country",
        }
    }

    /// The `tasks.*` overrides this preset stands for. Without chaining every
    /// preset other than the routing rows starts from 0/5. With chaining,
    /// the weighting rows start from 0/5 without Two, and -Country also keeps
    /// the -SM heads.
    pub fn overrides(self, chain: bool) -> Vec<String> {
        let (preset, cw, sw) = match self {
            PresetName::TwoThree => ("2/3", true, SampleWeighting::None),
            PresetName::OneFour => ("1/4", true, SampleWeighting::None),
            PresetName::MinusCw => ("0/5", false, SampleWeighting::None),
            PresetName::PlusSw => ("0/5", true, SampleWeighting::InverseCountryIntraBatch),
            _ => ("0/5", true, SampleWeighting::None),
        };
        let mut variants: Vec<&str> = match self {
            PresetName::Mse => vec!["MSE"],
            PresetName::Mae => vec!["MAE"],
            PresetName::MinusTwo => vec!["-Two"],
            PresetName::MinusSm => vec!["-SM"],
            PresetName::MinusCountry => vec!["-Country"],
            _ => vec![],
        };
        if chain {
            match self {
                PresetName::MinusCw | PresetName::PlusSw | PresetName::MinusSm => {
                    variants.insert(0, "-Two")
                }
                PresetName::MinusCountry => variants.splice(0..0, ["-Two", "-SM"]).for_each(drop),
                _ => {}
            }
        }
        let quoted: Vec<String> = variants.iter().map(|v| format!("\"{v}\"")).collect();
        let sw = match sw {
            SampleWeighting::None => "none",
            SampleWeighting::InverseCountryIntraBatch => "inverse-country-intra-batch",
        };
        vec![
            format!("tasks.preset=\"{preset}\""),
            format!("tasks.variants=[{}]", quoted.join(", ")),
            format!("tasks.class_weights={cw}"),
            format!("tasks.sample_weighting=\"{sw}\""),
        ]
    }

    pub fn apply(self, base: &ExperimentConfig, chain: bool) -> Result<ExperimentConfig> {
        base.with_overrides(&self.overrides(chain))
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        PresetName::ALL
            .into_iter()
            .find(|p| {
                p.label().eq_ignore_ascii_case(s)
                    || p.slug() == s
                    || format!("{p:?}").eq_ignore_ascii_case(s)
            })
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

/// Parses a comma-separated preset list; `all` selects every preset.
pub fn parse_preset_list(text: &str) -> Result<Vec<PresetName>> {
    if text.trim().eq_ignore_ascii_case("all") {
        return Ok(PresetName::ALL.to_vec());
    }
    let presets = text
        .split(',')
        .map(str::parse)
        .collect::<Result<Vec<_>>>()?;
    if presets.is_empty() {
        return Err(Error::Config("preset list is empty".into()));
    }
    Ok(presets)
}

/// Applies `preset` to `base` and runs it.
pub fn run_preset(
    preset: PresetName,
    base: &ExperimentConfig,
    chain: bool,
    out_dir: Option<&Path>,
) -> Result<RunOutcome> {
    let cfg = preset.apply(base, chain)?;
    run_experiment(&cfg, Some(preset.label()), out_dir)
}

/// One table row: metrics per active task, or the error that stopped it.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub label: String,
    pub result: std::result::Result<BTreeMap<TaskId, f64>, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
}

/// `0.6504` → `.650`, `-0.1` → `-.100`.
pub fn format_metric(v: f64) -> String {
    let s = format!("{v:.3}");
    if let Some(rest) = s.strip_prefix("0.") {
        format!(".{rest}")
    } else if let Some(rest) = s.strip_prefix("-0.") {
        format!("-.{rest}")
    } else {
        s
    }
}

pub fn column_header(task: TaskId) -> String {
    format!("{} {}", task.name(), metric_name(task).to_uppercase())
}

impl GridReport {
    fn cells(row: &GridRow) -> Vec<String> {
        TaskId::ALL
            .iter()
            .map(|t| match &row.result {
                Ok(m) => m
                    .get(t)
                    .map_or_else(|| "--".to_string(), |v| format_metric(*v)),
                Err(_) => "ERR".to_string(),
            })
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut header = vec!["Preset".to_string()];
        header.extend(TaskId::ALL.iter().map(|&t| column_header(t)));
        let mut out = format!("| {} |\n", header.join(" | "));
        out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
        for row in &self.rows {
            out.push_str(&format!(
                "| {} | {} |\n",
                row.label,
                Self::cells(row).join(" | ")
            ));
        }
        let failures: Vec<&GridRow> = self.rows.iter().filter(|r| r.result.is_err()).collect();
        if !failures.is_empty() {
            out.push('\n');
            for r in failures {
                out.push_str(&format!(
                    "- {}: {}\n",
                    r.label,
                    r.result.as_ref().unwrap_err()
                ));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["preset".to_string()];
        header.extend(TaskId::ALL.iter().map(|&t| column_header(t)));
        header.push("error".into());
        w.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut rec = vec![row.label.clone()];
            rec.extend(Self::cells(row));
            rec.push(row.result.as_ref().err().cloned().unwrap_or_default());
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Writes `results.md` and `results.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            ("results.md", self.to_markdown()),
            ("results.csv", self.to_csv()),
        ] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

/// Runs every preset with the base seed. A failing preset is recorded in
/// its row and the grid continues.
pub fn run_grid(
    presets: &[PresetName],
    base: &ExperimentConfig,
    chain: bool,
    out_dir: Option<&Path>,
) -> Result<GridReport> {
    if presets.is_empty() {
        return Err(Error::Config("preset list is empty".into()));
    }
    let rows = presets
        .iter()
        .map(|&p| {
            let dir = out_dir.map(|d| d.join(p.slug()));
            let result = run_preset(p, base, chain, dir.as_deref())
                .map(|o| o.summary.val.metrics)
                .map_err(|e| {
                    log::warn!("preset {p} failed: {e}");
                    e.to_string()
                });
            GridRow {
                label: p.label().to_string(),
                result,
            }
        })
        .collect();
    let report = GridReport { rows };
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

/// Rebuilds a table from run directories below `dir` that hold a
/// `metrics.json`. Rows follow preset order; unlabeled runs come last.
pub fn collect_report(dir: &Path) -> Result<GridReport> {
    let mut found = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry
            .map_err(|e| Error::io(dir, e))?
            .path()
            .join("metrics.json");
        if !path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let summary: RunSummary = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let label = summary.label.clone().unwrap_or_else(|| {
            path.parent()
                .and_then(Path::file_name)
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
        });
        let order = label
            .parse::<PresetName>()
            .map_or(usize::MAX, |p| p as usize);
        found.push((order, label, summary.val.metrics));
    }
    if found.is_empty() {
        return Err(Error::EmptySplit(format!(
            "no run directories with metrics.json under {}",
            dir.display()
        )));
    }
    found.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    Ok(GridReport {
        rows: found
            .into_iter()
            .map(|(_, label, m)| GridRow {
                label,
                result: Ok(m),
            })
            .collect(),
    })
}
