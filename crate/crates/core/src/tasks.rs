//! Task schema: the five prediction tasks, routing presets, variant flags,
//! inverse-frequency class weights and label validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity of one of the five supported tasks.
///
/// The declaration order is the report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskId {
    High,
    Culture,
    Two,
    Type,
    Country,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [
        TaskId::High,
        TaskId::Culture,
        TaskId::Two,
        TaskId::Type,
        TaskId::Country,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::High => "High",
            TaskId::Culture => "Culture",
            TaskId::Two => "Two",
            TaskId::Type => "Type",
            TaskId::Country => "Country",
        }
    }

    /// Lower-case key used in flat reports and CSV files.
    pub fn key(self) -> &'static str {
        match self {
            TaskId::High => "high",
            TaskId::Culture => "culture",
            TaskId::Two => "two",
            TaskId::Type => "type",
            TaskId::Country => "country",
        }
    }

    pub fn default_dim(self) -> usize {
        match self {
            TaskId::High => 10,
            TaskId::Culture => 40,
            TaskId::Two => 2,
            TaskId::Type => 8,
            TaskId::Country => 4,
        }
    }

    pub fn kind(self) -> TaskKind {
        match self {
            TaskId::High | TaskId::Culture | TaskId::Two => TaskKind::Regression,
            TaskId::Type | TaskId::Country => TaskKind::Classification,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

/// Number of emotion intensities per rater country in the Culture task.
pub const CULTURE_EMOTIONS: usize = 10;
/// Number of countries of origin.
pub const COUNTRIES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Ccc,
    Mse,
    Mae,
    WeightedCe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Sigmoid,
    Softmax,
    LinearClamp01,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoutingStage {
    Intermediate,
    Final,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub kind: TaskKind,
    pub dim: usize,
    pub loss: LossKind,
    pub output_activation: OutputActivation,
    pub routing_stage: RoutingStage,
}

impl TaskSpec {
    /// The default spec for a task: CCC + sigmoid for regression, weighted
    /// cross-entropy + softmax for classification, routed as a final task.
    pub fn default_for(id: TaskId) -> Self {
        let (loss, output_activation) = match id.kind() {
            TaskKind::Regression => (LossKind::Ccc, OutputActivation::Sigmoid),
            TaskKind::Classification => (LossKind::WeightedCe, OutputActivation::Softmax),
        };
        TaskSpec {
            id,
            kind: id.kind(),
            dim: id.default_dim(),
            loss,
            output_activation,
            routing_stage: RoutingStage::Final,
        }
    }

    pub fn name(&self) -> &'static str {
        self.id.name()
    }
}

/// Which tasks are predicted first and fed into the remaining heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoutingPreset {
    /// Country and Type are intermediate.
    TwoThree,
    /// Only Country is intermediate.
    OneFour,
    /// All tasks are predicted at once.
    ZeroFive,
}

impl RoutingPreset {
    pub fn label(self) -> &'static str {
        match self {
            RoutingPreset::TwoThree => "2/3",
            RoutingPreset::OneFour => "1/4",
            RoutingPreset::ZeroFive => "0/5",
        }
    }

    pub fn intermediate_tasks(self) -> &'static [TaskId] {
        match self {
            RoutingPreset::TwoThree => &[TaskId::Country, TaskId::Type],
            RoutingPreset::OneFour => &[TaskId::Country],
            RoutingPreset::ZeroFive => &[],
        }
    }
}

impl FromStr for RoutingPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "TwoThree" | "2/3" => Ok(RoutingPreset::TwoThree),
            "OneFour" | "1/4" => Ok(RoutingPreset::OneFour),
            "ZeroFive" | "0/5" => Ok(RoutingPreset::ZeroFive),
            other => Err(Error::Config(format!("unknown routing preset `{other}`"))),
        }
    }
}

/// Variant flags that rewrite or remove tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VariantFlag {
    MinusTwo,
    MinusCountry,
    Mse,
    Mae,
    MinusSigmoid,
}

impl VariantFlag {
    pub fn token(self) -> &'static str {
        match self {
            VariantFlag::MinusTwo => "-Two",
            VariantFlag::MinusCountry => "-Country",
            VariantFlag::Mse => "MSE",
            VariantFlag::Mae => "MAE",
            VariantFlag::MinusSigmoid => "-SM",
        }
    }
}

impl FromStr for VariantFlag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "-Two" => Ok(VariantFlag::MinusTwo),
            "-Country" => Ok(VariantFlag::MinusCountry),
            "MSE" => Ok(VariantFlag::Mse),
            "MAE" => Ok(VariantFlag::Mae),
            "-SM" => Ok(VariantFlag::MinusSigmoid),
            other => Err(Error::Config(format!("unknown variant flag `{other}`"))),
        }
    }
}

impl fmt::Display for VariantFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSet {
    tasks: Vec<TaskSpec>,
    routing_preset: RoutingPreset,
}

impl TaskSet {
    /// Assembles a task set from explicit specs. Names must be unique and the
    /// routing stages must agree with the preset.
    pub fn new(tasks: Vec<TaskSpec>, routing_preset: RoutingPreset) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in &tasks {
            if !seen.insert(t.id) {
                return Err(Error::Config(format!("duplicate task `{}`", t.id)));
            }
            if t.dim == 0 {
                return Err(Error::Config(format!("task `{}` has zero dimension", t.id)));
            }
            let activation_ok = match t.kind {
                TaskKind::Classification => t.output_activation == OutputActivation::Softmax,
                TaskKind::Regression => t.output_activation != OutputActivation::Softmax,
            };
            if !activation_ok {
                return Err(Error::Config(format!(
                    "task `{}` has activation {:?} incompatible with {:?}",
                    t.id, t.output_activation, t.kind
                )));
            }
            let intermediate = routing_preset.intermediate_tasks().contains(&t.id);
            let expected = if intermediate {
                RoutingStage::Intermediate
            } else {
                RoutingStage::Final
            };
            if t.routing_stage != expected {
                return Err(Error::Config(format!(
                    "task `{}` routing stage {:?} disagrees with preset {}",
                    t.id,
                    t.routing_stage,
                    routing_preset.label()
                )));
            }
        }
        Ok(TaskSet {
            tasks,
            routing_preset,
        })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn routing_preset(&self) -> RoutingPreset {
        self.routing_preset
    }

    pub fn get(&self, id: TaskId) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn contains(&self, id: TaskId) -> bool {
        self.get(id).is_some()
    }

    pub fn ids(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.tasks.iter().map(|t| t.id)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Returns a copy with the tasks in a different declaration order.
    pub fn reordered(&self, order: &[TaskId]) -> Result<Self> {
        let mut tasks = Vec::with_capacity(self.tasks.len());
        for id in order {
            let spec = self
                .get(*id)
                .ok_or_else(|| Error::Config(format!("task `{id}` not in task set")))?;
            tasks.push(spec.clone());
        }
        if tasks.len() != self.tasks.len() {
            return Err(Error::Config("reordering must list every task once".into()));
        }
        TaskSet::new(tasks, self.routing_preset)
    }
}

/// Builds the task set for a routing preset and a set of variant flags.
///
/// Flags are given as tokens (`-Two`, `-Country`, `MSE`, `MAE`, `-SM`).
pub fn build_task_set<S: AsRef<str>>(preset_name: &str, variant_flags: &[S]) -> Result<TaskSet> {
    let preset: RoutingPreset = preset_name.parse()?;
    let mut flags = BTreeSet::new();
    for f in variant_flags {
        flags.insert(f.as_ref().parse::<VariantFlag>()?);
    }
    build_task_set_from(preset, &flags)
}

pub fn build_task_set_from(
    preset: RoutingPreset,
    flags: &BTreeSet<VariantFlag>,
) -> Result<TaskSet> {
    if flags.contains(&VariantFlag::Mse) && flags.contains(&VariantFlag::Mae) {
        return Err(Error::Config(
            "variant flags `MSE` and `MAE` are mutually exclusive".into(),
        ));
    }
    if flags.contains(&VariantFlag::MinusCountry) && preset != RoutingPreset::ZeroFive {
        return Err(Error::Config(format!(
            "variant flag `-Country` removes an intermediate task of preset {}",
            preset.label()
        )));
    }
    let regression_loss = if flags.contains(&VariantFlag::Mse) {
        LossKind::Mse
    } else if flags.contains(&VariantFlag::Mae) {
        LossKind::Mae
    } else {
        LossKind::Ccc
    };

    let mut tasks = Vec::new();
    for id in TaskId::ALL {
        if id == TaskId::Two && flags.contains(&VariantFlag::MinusTwo) {
            continue;
        }
        if id == TaskId::Country && flags.contains(&VariantFlag::MinusCountry) {
            continue;
        }
        let mut spec = TaskSpec::default_for(id);
        if spec.kind == TaskKind::Regression {
            spec.loss = regression_loss;
        }
        if matches!(id, TaskId::High | TaskId::Culture)
            && flags.contains(&VariantFlag::MinusSigmoid)
        {
            spec.output_activation = OutputActivation::LinearClamp01;
        }
        if preset.intermediate_tasks().contains(&id) {
            spec.routing_stage = RoutingStage::Intermediate;
        }
        tasks.push(spec);
    }
    TaskSet::new(tasks, preset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub task: TaskId,
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(task: TaskId, classes: usize) -> Self {
        ClassWeights {
            task,
            weights: vec![1.0; classes],
        }
    }
}

/// Inverse-frequency weights `N / (K * n_c)` where `K` counts only the
/// classes that occur. Empty classes get weight 0.
pub fn compute_class_weights(class_counts: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = class_counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptySplit("all class counts are zero".into()));
    }
    let present = class_counts.iter().filter(|&&c| c > 0).count() as f64;
    let total = total as f64;
    Ok(class_counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            if n == 0 {
                log::warn!("class {c} has no training samples; its weight is 0");
                0.0
            } else {
                total / (present * n as f64)
            }
        })
        .collect())
}

/// One label value: a regression vector or a class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TargetValue {
    Regression(Vec<f64>),
    Class(usize),
}

pub type Targets = BTreeMap<TaskId, TargetValue>;

#[derive(Debug, Clone, PartialEq)]
pub enum LabelViolation {
    Missing {
        task: TaskId,
    },
    Shape {
        task: TaskId,
        expected: String,
        found: String,
    },
    OutOfRange {
        task: TaskId,
        index: usize,
        value: f64,
    },
    ClassIndex {
        task: TaskId,
        classes: usize,
        found: usize,
    },
}

impl fmt::Display for LabelViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelViolation::Missing { task } => write!(f, "{task}: missing target"),
            LabelViolation::Shape {
                task,
                expected,
                found,
            } => write!(f, "{task}: expected {expected}, found {found}"),
            LabelViolation::OutOfRange { task, index, value } => {
                write!(f, "{task}: value {value} at index {index} outside [0, 1]")
            }
            LabelViolation::ClassIndex {
                task,
                classes,
                found,
            } => write!(
                f,
                "{task}: class index {found} out of range for {classes} classes"
            ),
        }
    }
}

/// Checks every active task's target; returns all violations found.
pub fn validate_labels(
    labels: &Targets,
    task_set: &TaskSet,
) -> std::result::Result<(), Vec<LabelViolation>> {
    let mut violations = Vec::new();
    for spec in task_set.tasks() {
        match (spec.kind, labels.get(&spec.id)) {
            (_, None) => violations.push(LabelViolation::Missing { task: spec.id }),
            (TaskKind::Regression, Some(TargetValue::Regression(v))) => {
                if v.len() != spec.dim {
                    violations.push(LabelViolation::Shape {
                        task: spec.id,
                        expected: format!("vector of length {}", spec.dim),
                        found: format!("vector of length {}", v.len()),
                    });
                }
                for (i, &x) in v.iter().enumerate() {
                    if !(0.0..=1.0).contains(&x) {
                        violations.push(LabelViolation::OutOfRange {
                            task: spec.id,
                            index: i,
                            value: x,
                        });
                    }
                }
            }
            (TaskKind::Classification, Some(TargetValue::Class(c))) => {
                if *c >= spec.dim {
                    violations.push(LabelViolation::ClassIndex {
                        task: spec.id,
                        classes: spec.dim,
                        found: *c,
                    });
                }
            }
            (TaskKind::Regression, Some(TargetValue::Class(c))) => {
                violations.push(LabelViolation::Shape {
                    task: spec.id,
                    expected: format!("vector of length {}", spec.dim),
                    found: format!("class index {c}"),
                })
            }
            (TaskKind::Classification, Some(TargetValue::Regression(v))) => {
                violations.push(LabelViolation::Shape {
                    task: spec.id,
                    expected: "class index".into(),
                    found: format!("vector of length {}", v.len()),
                })
            }
        }
    }
    if task_set.contains(TaskId::Culture)
        && !matches!(labels.get(&TaskId::Country), Some(TargetValue::Class(c)) if *c < COUNTRIES)
    {
        // the Culture loss mask is selected by the sample's country
        violations.push(LabelViolation::Missing {
            task: TaskId::Country,
        });
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Row mask over the 40 Culture dimensions: only the block belonging to the
/// sample's country (`country * 10 .. country * 10 + 10`) carries ground truth.
pub fn culture_dim_mask(country: usize) -> [bool; CULTURE_EMOTIONS * COUNTRIES] {
    let mut mask = [false; CULTURE_EMOTIONS * COUNTRIES];
    let start = country * CULTURE_EMOTIONS;
    for m in mask.iter_mut().skip(start).take(CULTURE_EMOTIONS) {
        *m = true;
    }
    mask
}
