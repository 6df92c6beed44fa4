//! The forward graph: backbone, masked mean pooling, per-task projection
//! heads and intermediate-task routing.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{Batch, BatchTarget};
use crate::error::{Error, Result};
use crate::graph::{self, Graph, NodeId, ParamGroup, ParamStore, SeqLayout};
use crate::objectives::{ObjectiveContext, UncertaintyParams};
use crate::tasks::{OutputActivation, RoutingStage, TaskId, TaskKind, TaskSet};

pub use crate::graph::{clamp01, gelu};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// Passes frames through unchanged; no parameters.
    Identity,
    /// Input projection followed by residual temporal-convolution blocks.
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub input_dim: usize,
    pub encoder_dim: usize,
    pub encoder_blocks: usize,
    pub hidden_dim: usize,
    pub detach_intermediate: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::Tiny,
            input_dim: 768,
            encoder_dim: 64,
            encoder_blocks: 2,
            hidden_dim: 256,
            detach_intermediate: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn pooled_dim(&self) -> usize {
        match self.backbone {
            BackboneKind::Identity => self.input_dim,
            BackboneKind::Tiny => self.encoder_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.backbone == BackboneKind::Tiny && self.encoder_dim == 0 {
            return Err(Error::Config("model.encoder_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Which heads run first and how wide the final heads' input is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingPlan {
    pub intermediate: Vec<TaskId>,
    pub finals: Vec<TaskId>,
    pub pooled_dim: usize,
    pub final_in_dim: usize,
}

impl RoutingPlan {
    pub fn new(task_set: &TaskSet, pooled_dim: usize) -> Self {
        let mut intermediate = Vec::new();
        let mut finals = Vec::new();
        let mut extra = 0;
        for t in task_set.tasks() {
            match t.routing_stage {
                RoutingStage::Intermediate => {
                    intermediate.push(t.id);
                    extra += t.dim;
                }
                RoutingStage::Final => finals.push(t.id),
            }
        }
        RoutingPlan {
            intermediate,
            finals,
            pooled_dim,
            final_in_dim: pooled_dim + extra,
        }
    }

    pub fn in_dim(&self, task: TaskId) -> usize {
        if self.intermediate.contains(&task) {
            self.pooled_dim
        } else {
            self.final_in_dim
        }
    }
}

/// Hash of the task set and the shape-determining model settings.
pub fn fingerprint(task_set: &TaskSet, config: &ModelConfig) -> String {
    #[derive(Serialize)]
    struct Shape<'a> {
        task_set: &'a TaskSet,
        backbone: BackboneKind,
        input_dim: usize,
        encoder_dim: usize,
        encoder_blocks: usize,
        hidden_dim: usize,
        detach_intermediate: bool,
    }
    let shape = Shape {
        task_set,
        backbone: config.backbone,
        input_dim: config.input_dim,
        encoder_dim: config.encoder_dim,
        encoder_blocks: config.encoder_blocks,
        hidden_dim: config.hidden_dim,
        detach_intermediate: config.detach_intermediate,
    };
    let json = serde_json::to_vec(&shape).expect("fingerprint fields serialize");
    hex::encode(&Sha256::digest(&json)[..16])
}

/// Slot indices of one projection head's parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
struct HeadSlots {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderSlots {
    in_w: usize,
    in_b: usize,
    blocks: Vec<(usize, usize)>,
}

/// A standalone copy of one task head: affine → GELU → affine → activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub task: TaskId,
    pub activation: OutputActivation,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl ProjectionHead {
    pub fn in_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn forward(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        if input.ncols() != self.in_dim() {
            return Err(Error::Dimension(format!(
                "{} head expects width {}, got {}",
                self.task,
                self.in_dim(),
                input.ncols()
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let w1 = g.constant(self.w1.clone());
        let b1 = g.constant(self.b1.clone());
        let w2 = g.constant(self.w2.clone());
        let b2 = g.constant(self.b2.clone());
        let out = head_graph(&mut g, x, w1, b1, w2, b2, self.activation)?;
        Ok(g.value(out).clone())
    }
}

fn head_graph(
    g: &mut Graph,
    x: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
    activation: OutputActivation,
) -> Result<NodeId> {
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.gelu(h);
    let o = g.matmul(h, w2)?;
    let o = g.add_bias(o, b2)?;
    Ok(match activation {
        OutputActivation::Sigmoid => g.sigmoid(o),
        OutputActivation::Softmax => g.softmax(o),
        OutputActivation::LinearClamp01 => g.clamp01(o),
    })
}

/// Masked mean over time: `out[b] = Σ_t mask[b,t] frames[b,t] / Σ_t mask[b,t]`.
pub fn masked_mean_pool(frames: &Array3<f64>, mask: &Array2<f64>) -> Result<Array2<f64>> {
    let (b, t, d) = frames.dim();
    if mask.dim() != (b, t) {
        return Err(Error::Dimension(format!(
            "mask {:?} for frames {:?}",
            mask.dim(),
            (b, t, d)
        )));
    }
    let flat = frames
        .to_shape((b * t, d))
        .map_err(|e| Error::Dimension(e.to_string()))?
        .to_owned();
    let layout = SeqLayout {
        batch: b,
        t_max: t,
        mask: mask.iter().copied().collect(),
    };
    graph::pool_rows(&flat, &layout)
}

/// Scalar losses from one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub task_losses: BTreeMap<TaskId, f64>,
    /// Tasks whose loss was undefined on this batch (for example fewer than two
    /// labelled rows for CCC) and were left out of the total.
    pub skipped: Vec<TaskId>,
}

/// All learnable state plus the configuration it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    task_set: TaskSet,
    plan: RoutingPlan,
    objective: ObjectiveContext,
    params: ParamStore,
    encoder: Option<EncoderSlots>,
    heads: BTreeMap<TaskId, HeadSlots>,
    log_vars: usize,
    fingerprint: String,
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(name.as_bytes());
    let salt = u64::from_le_bytes(digest[..8].try_into().unwrap());
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}

/// Uniform in ±1/√fan_in, seeded by the parameter name so initial values do
/// not depend on construction order.
fn init_weight(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let mut rng = param_rng(seed, name);
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound))
}

impl ModelState {
    pub fn new(
        config: ModelConfig,
        task_set: TaskSet,
        objective: ObjectiveContext,
    ) -> Result<Self> {
        config.validate()?;
        if task_set.is_empty() {
            return Err(Error::Config("task set is empty".into()));
        }
        let plan = RoutingPlan::new(&task_set, config.pooled_dim());
        let mut params = ParamStore::default();
        let seed = config.init_seed;

        let encoder = match config.backbone {
            BackboneKind::Identity => None,
            BackboneKind::Tiny => {
                let h = config.encoder_dim;
                let in_w = params.push(
                    "backbone.in.w",
                    ParamGroup::Backbone,
                    init_weight(seed, "backbone.in.w", config.input_dim, h),
                );
                let in_b =
                    params.push("backbone.in.b", ParamGroup::Backbone, Array2::zeros((1, h)));
                let blocks = (0..config.encoder_blocks)
                    .map(|i| {
                        let wn = format!("backbone.block{i}.w");
                        let w = params.push(
                            &wn,
                            ParamGroup::Backbone,
                            init_weight(seed, &wn, 3 * h, h),
                        );
                        let b = params.push(
                            format!("backbone.block{i}.b"),
                            ParamGroup::Backbone,
                            Array2::zeros((1, h)),
                        );
                        (w, b)
                    })
                    .collect();
                Some(EncoderSlots { in_w, in_b, blocks })
            }
        };

        let mut heads = BTreeMap::new();
        for spec in task_set.tasks() {
            let in_dim = plan.in_dim(spec.id);
            let key = spec.id.key();
            let group = ParamGroup::Head(spec.id);
            let n = |p: &str| format!("head.{key}.{p}");
            let w1 = params.push(
                n("w1"),
                group,
                init_weight(seed, &n("w1"), in_dim, config.hidden_dim),
            );
            let b1 = params.push(n("b1"), group, Array2::zeros((1, config.hidden_dim)));
            let w2 = params.push(
                n("w2"),
                group,
                init_weight(seed, &n("w2"), config.hidden_dim, spec.dim),
            );
            let b2 = params.push(n("b2"), group, Array2::zeros((1, spec.dim)));
            heads.insert(spec.id, HeadSlots { w1, b1, w2, b2 });
        }
        let log_vars = params.push(
            "uncertainty.log_var",
            ParamGroup::Uncertainty,
            Array2::zeros((1, task_set.len())),
        );
        let fingerprint = fingerprint(&task_set, &config);
        Ok(ModelState {
            config,
            task_set,
            plan,
            objective,
            params,
            encoder,
            heads,
            log_vars,
            fingerprint,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn task_set(&self) -> &TaskSet {
        &self.task_set
    }

    pub fn plan(&self) -> &RoutingPlan {
        &self.plan
    }

    pub fn objective(&self) -> &ObjectiveContext {
        &self.objective
    }

    pub fn set_objective(&mut self, objective: ObjectiveContext) {
        self.objective = objective;
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn uncertainty(&self) -> UncertaintyParams {
        UncertaintyParams {
            tasks: self.task_set.ids().collect(),
            log_vars: self.params.get(self.log_vars).value.row(0).to_vec(),
        }
    }

    pub fn set_uncertainty(&mut self, log_vars: &[f64]) -> Result<()> {
        let slot = &mut self.params.get_mut(self.log_vars).value;
        if log_vars.len() != slot.ncols() {
            return Err(Error::Dimension(format!(
                "{} log-variances for {} tasks",
                log_vars.len(),
                slot.ncols()
            )));
        }
        for (dst, &src) in slot.iter_mut().zip(log_vars) {
            *dst = src;
        }
        Ok(())
    }

    pub fn head(&self, task: TaskId) -> Option<ProjectionHead> {
        let slots = self.heads.get(&task)?;
        let spec = self.task_set.get(task)?;
        Some(ProjectionHead {
            task,
            activation: spec.output_activation,
            w1: self.params.get(slots.w1).value.clone(),
            b1: self.params.get(slots.b1).value.clone(),
            w2: self.params.get(slots.w2).value.clone(),
            b2: self.params.get(slots.b2).value.clone(),
        })
    }

    /// SHA-256 over the raw bytes of every backbone parameter.
    pub fn backbone_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self
            .params
            .iter()
            .filter(|p| p.group == ParamGroup::Backbone)
        {
            hasher.update(p.name.as_bytes());
            for v in p.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Rejects a task set or configuration that differs from this model's.
    pub fn check_compatible(&self, task_set: &TaskSet, config: &ModelConfig) -> Result<()> {
        let expected = fingerprint(task_set, config);
        if expected != self.fingerprint {
            return Err(Error::Fingerprint {
                expected,
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    fn leaf(&self, g: &mut Graph, slot: usize, trainable: bool) -> NodeId {
        if trainable {
            g.param(&self.params, slot)
        } else {
            g.constant(self.params.get(slot).value.clone())
        }
    }

    fn head_node(&self, g: &mut Graph, task: TaskId, input: NodeId) -> Result<NodeId> {
        let slots = self.heads[&task];
        let activation = self
            .task_set
            .get(task)
            .expect("head for active task")
            .output_activation;
        let w1 = g.param(&self.params, slots.w1);
        let b1 = g.param(&self.params, slots.b1);
        let w2 = g.param(&self.params, slots.w2);
        let b2 = g.param(&self.params, slots.b2);
        head_graph(g, input, w1, b1, w2, b2, activation)
    }

    /// Builds the forward pass into `g` and returns the pooled features and
    /// one output node per active task. Backbone parameters are leaves that
    /// receive gradients only when `train_backbone` is set.
    pub fn build_forward(
        &self,
        g: &mut Graph,
        batch: &Batch,
        train_backbone: bool,
    ) -> Result<(NodeId, BTreeMap<TaskId, NodeId>)> {
        let (b, t, d) = batch.features.dim();
        if d != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "batch has D={d}, model expects {}",
                self.config.input_dim
            )));
        }
        let layout = Rc::new(SeqLayout {
            batch: b,
            t_max: t,
            mask: batch.mask.iter().copied().collect(),
        });
        let flat = batch
            .features
            .to_shape((b * t, d))
            .map_err(|e| Error::Dimension(e.to_string()))?
            .to_owned();
        let mut h = g.constant(flat);

        if let Some(enc) = &self.encoder {
            let w = self.leaf(g, enc.in_w, train_backbone);
            let bias = self.leaf(g, enc.in_b, train_backbone);
            h = g.matmul(h, w)?;
            h = g.add_bias(h, bias)?;
            for &(ws, bs) in &enc.blocks {
                let prev = g.masked_shift(h, layout.clone(), 1)?;
                let next = g.masked_shift(h, layout.clone(), -1)?;
                let window = g.concat(&[prev, h, next])?;
                let w = self.leaf(g, ws, train_backbone);
                let bias = self.leaf(g, bs, train_backbone);
                let c = g.matmul(window, w)?;
                let c = g.add_bias(c, bias)?;
                let c = g.gelu(c);
                h = g.add(h, c)?;
            }
        }
        let pooled = g.masked_mean_pool(h, layout)?;

        let mut outputs = BTreeMap::new();
        let mut routed = vec![pooled];
        for &task in &self.plan.intermediate {
            let out = self.head_node(g, task, pooled)?;
            outputs.insert(task, out);
            routed.push(if self.config.detach_intermediate {
                g.detach(out)
            } else {
                out
            });
        }
        let final_input = if routed.len() > 1 {
            g.concat(&routed)?
        } else {
            pooled
        };
        for &task in &self.plan.finals {
            let out = self.head_node(g, task, final_input)?;
            outputs.insert(task, out);
        }
        Ok((pooled, outputs))
    }

    /// Per-task outputs after the output activation.
    pub fn forward(&self, batch: &Batch) -> Result<BTreeMap<TaskId, Array2<f64>>> {
        let mut g = Graph::new();
        let (_, outputs) = self.build_forward(&mut g, batch, false)?;
        Ok(outputs
            .into_iter()
            .map(|(t, n)| (t, g.value(n).clone()))
            .collect())
    }

    /// Adds every task loss and the uncertainty-weighted total to `g`.
    /// Returns `(total, per-task loss nodes, skipped tasks)`.
    pub fn build_loss(
        &self,
        g: &mut Graph,
        outputs: &BTreeMap<TaskId, NodeId>,
        batch: &Batch,
    ) -> Result<(NodeId, BTreeMap<TaskId, NodeId>, Vec<TaskId>)> {
        let u: Vec<f64> = batch.sample_weights.to_vec();
        let mut losses = BTreeMap::new();
        let mut skipped = Vec::new();
        for spec in self.task_set.tasks() {
            let out = outputs[&spec.id];
            let target = batch
                .targets
                .get(&spec.id)
                .ok_or_else(|| Error::Labels(format!("batch has no {} targets", spec.id)))?;
            let node = match (spec.kind, target) {
                (TaskKind::Regression, BatchTarget::Regression { values, dim_mask }) => {
                    let mut weights = dim_mask.clone();
                    for (mut row, &ub) in weights.rows_mut().into_iter().zip(&u) {
                        row *= ub;
                    }
                    g.regression_loss(out, values, &weights, spec.loss)
                }
                (TaskKind::Classification, BatchTarget::Class(classes)) => {
                    let cw = self.objective.class_weights_for(spec.id, spec.dim);
                    g.cross_entropy(out, classes, &cw, &u)
                }
                _ => {
                    return Err(Error::Labels(format!(
                        "{} targets have the wrong kind",
                        spec.id
                    )))
                }
            };
            match node {
                Ok(n) => {
                    losses.insert(spec.id, n);
                }
                Err(Error::Degenerate(m)) | Err(Error::InsufficientData(m)) => {
                    log::debug!("skipping {} loss on this batch: {m}", spec.id);
                    skipped.push(spec.id);
                }
                Err(e) => return Err(e),
            }
        }
        if losses.is_empty() {
            return Err(Error::Degenerate(
                "no task loss is defined on this batch".into(),
            ));
        }
        for (&task, &node) in &losses {
            if !g.scalar(node).is_finite() {
                return Err(Error::Diverged {
                    task: task.name().into(),
                });
            }
        }
        let form = self.objective.uncertainty_form;
        let order: Vec<TaskId> = self.task_set.ids().collect();
        let mut nodes = Vec::new();
        let mut columns = Vec::new();
        let mut loss_factors = Vec::new();
        let mut penalty_factors = Vec::new();
        for (&task, &node) in &losses {
            let (c, p) = form.factors(task.kind());
            nodes.push(node);
            columns.push(order.iter().position(|&t| t == task).unwrap());
            loss_factors.push(c);
            penalty_factors.push(p);
        }
        let lv = g.param(&self.params, self.log_vars);
        let total = g.combine(&nodes, lv, &columns, &loss_factors, &penalty_factors);
        Ok((total, losses, skipped))
    }

    pub fn loss(&self, batch: &Batch) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let (_, outputs) = self.build_forward(&mut g, batch, false)?;
        let (total, losses, skipped) = self.build_loss(&mut g, &outputs, batch)?;
        Ok(breakdown(&g, total, &losses, skipped))
    }

    /// Loss plus gradients for every parameter slot (zeros for slots that did
    /// not participate, including the backbone when it is frozen).
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        train_backbone: bool,
    ) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
        let mut g = Graph::new();
        let (_, outputs) = self.build_forward(&mut g, batch, train_backbone)?;
        let (total, losses, skipped) = self.build_loss(&mut g, &outputs, batch)?;
        let grads = g.backward(total, &self.params);
        Ok((breakdown(&g, total, &losses, skipped), grads))
    }
}

fn breakdown(
    g: &Graph,
    total: NodeId,
    losses: &BTreeMap<TaskId, NodeId>,
    skipped: Vec<TaskId>,
) -> LossBreakdown {
    LossBreakdown {
        total: g.scalar(total),
        task_losses: losses.iter().map(|(&t, &n)| (t, g.scalar(n))).collect(),
        skipped,
    }
}
