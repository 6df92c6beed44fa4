//! Define-by-run reverse-mode differentiation over dense f64 matrices.
//!
//! A [`Graph`] is rebuilt for every forward pass. Parameters enter as leaves
//! bound to a slot in a [`ParamStore`]; [`Graph::backward`] returns one
//! gradient per store slot. Loss nodes compute their local gradient eagerly
//! through the `*_with_grad` functions in [`crate::objectives`].

use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{
    ccc_loss_with_grad, mae_loss_with_grad, mse_loss_with_grad, weighted_cross_entropy_with_grad,
};
use crate::tasks::{LossKind, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Head(TaskId),
    Uncertainty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn push(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Array2<f64>,
    ) -> usize {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Row layout of a flattened B×T sequence batch: row `b * t_max + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqLayout {
    pub batch: usize,
    pub t_max: usize,
    pub mask: Vec<f64>,
}

impl SeqLayout {
    fn counts(&self) -> Vec<f64> {
        self.mask
            .chunks(self.t_max)
            .map(|c| c.iter().sum())
            .collect()
    }
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Clamp01(NodeId),
    Softmax(NodeId),
    Concat(Vec<NodeId>),
    /// out[b, t] = mask[b, t - offset] * in[b, t - offset] within each sample.
    Shift {
        input: NodeId,
        layout: Rc<SeqLayout>,
        offset: isize,
    },
    Pool {
        input: NodeId,
        layout: Rc<SeqLayout>,
    },
    /// Scalar loss with its gradient relative to `input` precomputed.
    Loss {
        input: NodeId,
        local_grad: Array2<f64>,
    },
    Combine {
        losses: Vec<NodeId>,
        log_vars: NodeId,
        columns: Vec<usize>,
        loss_factors: Vec<f64>,
        penalty_factors: Vec<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    std_normal_cdf(x) + x * pdf
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// (leaf node, param slot)
    param_leaves: Vec<(NodeId, usize)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A leaf tracking gradients into `store` slot `idx`. Repeated calls for
    /// the same slot return the same node.
    pub fn param(&mut self, store: &ParamStore, idx: usize) -> NodeId {
        if let Some(&(node, _)) = self.param_leaves.iter().find(|(_, i)| *i == idx) {
            return node;
        }
        let node = self.push(store.get(idx).value.clone(), Op::Leaf);
        self.param_leaves.push((node, idx));
        node
    }

    /// A copy of `id`'s value that blocks gradient flow.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::Dimension(format!(
                "matmul {:?} x {:?}",
                av.dim(),
                bv.dim()
            )));
        }
        let v = av.dot(bv);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.nrows() != 1 || bv.ncols() != av.ncols() {
            return Err(Error::Dimension(format!(
                "bias {:?} for input {:?}",
                bv.dim(),
                av.dim()
            )));
        }
        let v = av + bv;
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(Error::Dimension(format!(
                "add {:?} + {:?}",
                av.dim(),
                bv.dim()
            )));
        }
        let v = av + bv;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn clamp01(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(clamp01);
        self.push(v, Op::Clamp01(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v =
            concatenate(Axis(1), &views).map_err(|e| Error::Dimension(format!("concat: {e}")))?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// Shifts rows by `offset` time steps inside each sample, reading only
    /// valid frames (padding reads as zero).
    pub fn masked_shift(
        &mut self,
        input: NodeId,
        layout: Rc<SeqLayout>,
        offset: isize,
    ) -> Result<NodeId> {
        let x = self.value(input);
        if x.nrows() != layout.batch * layout.t_max {
            return Err(Error::Dimension(format!(
                "shift: {} rows for layout {}x{}",
                x.nrows(),
                layout.batch,
                layout.t_max
            )));
        }
        let mut out = Array2::zeros(x.dim());
        for b in 0..layout.batch {
            for t in 0..layout.t_max {
                let src = t as isize - offset;
                if src < 0 || src >= layout.t_max as isize {
                    continue;
                }
                let src_row = b * layout.t_max + src as usize;
                let m = layout.mask[src_row];
                if m != 0.0 {
                    let row = x.row(src_row).mapv(|v| v * m);
                    out.row_mut(b * layout.t_max + t).assign(&row);
                }
            }
        }
        Ok(self.push(
            out,
            Op::Shift {
                input,
                layout,
                offset,
            },
        ))
    }

    /// Masked mean over time: (B*T)×D → B×D.
    pub fn masked_mean_pool(&mut self, input: NodeId, layout: Rc<SeqLayout>) -> Result<NodeId> {
        let x = self.value(input);
        let pooled = pool_rows(x, &layout)?;
        Ok(self.push(pooled, Op::Pool { input, layout }))
    }

    /// Regression loss (CCC, MSE or MAE) against constant targets with a B×K
    /// element-weight matrix.
    pub fn regression_loss(
        &mut self,
        pred: NodeId,
        target: &Array2<f64>,
        weights: &Array2<f64>,
        kind: LossKind,
    ) -> Result<NodeId> {
        let p = self.value(pred).view();
        let (loss, grad) = match kind {
            LossKind::Ccc => ccc_loss_with_grad(p, target.view(), weights.view())?,
            LossKind::Mse => mse_loss_with_grad(p, target.view(), weights.view())?,
            LossKind::Mae => mae_loss_with_grad(p, target.view(), weights.view())?,
            LossKind::WeightedCe => {
                return Err(Error::Config(
                    "cross-entropy is not a regression loss".into(),
                ));
            }
        };
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::Loss {
                input: pred,
                local_grad: grad,
            },
        ))
    }

    pub fn cross_entropy(
        &mut self,
        probs: NodeId,
        targets: &[usize],
        class_weights: &[f64],
        sample_weights: &[f64],
    ) -> Result<NodeId> {
        let (loss, grad) = weighted_cross_entropy_with_grad(
            self.value(probs).view(),
            targets,
            class_weights,
            sample_weights,
        )?;
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::Loss {
                input: probs,
                local_grad: grad,
            },
        ))
    }

    /// `Σ_i c_i exp(-s_i) L_i + p_i s_i` where `s_i = log_vars[0, columns[i]]`.
    pub fn combine(
        &mut self,
        losses: &[NodeId],
        log_vars: NodeId,
        columns: &[usize],
        loss_factors: &[f64],
        penalty_factors: &[f64],
    ) -> NodeId {
        let s = self.value(log_vars);
        let mut total = 0.0;
        for (i, &l) in losses.iter().enumerate() {
            let si = s[[0, columns[i]]];
            total += loss_factors[i] * (-si).exp() * self.scalar(l) + penalty_factors[i] * si;
        }
        self.push(
            Array2::from_elem((1, 1), total),
            Op::Combine {
                losses: losses.to_vec(),
                log_vars,
                columns: columns.to_vec(),
                loss_factors: loss_factors.to_vec(),
                penalty_factors: penalty_factors.to_vec(),
            },
        )
    }

    /// Gradients of the scalar `root` with respect to every slot of `store`.
    /// Slots the graph never touched get zeros.
    pub fn backward(&self, root: NodeId, store: &ParamStore) -> Vec<Array2<f64>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.value(root).dim()));

        fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
            match &mut grads[id.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(a, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| *gv *= gelu_grad(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gv, &y| *gv *= y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp01(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        if !(x > 0.0 && x < 1.0) {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.dim());
                    for ((mut out, gy), yr) in ga.rows_mut().into_iter().zip(g.rows()).zip(y.rows())
                    {
                        let dot = gy.dot(&yr);
                        for j in 0..yr.len() {
                            out[j] = yr[j] * (gy[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        accumulate(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::Shift {
                    input,
                    layout,
                    offset,
                } => {
                    let mut gi = Array2::zeros(self.value(*input).dim());
                    for b in 0..layout.batch {
                        for t in 0..layout.t_max {
                            let src = t as isize - offset;
                            if src < 0 || src >= layout.t_max as isize {
                                continue;
                            }
                            let src_row = b * layout.t_max + src as usize;
                            let m = layout.mask[src_row];
                            if m != 0.0 {
                                let add = g.row(b * layout.t_max + t).mapv(|v| v * m);
                                let mut row = gi.row_mut(src_row);
                                row += &add;
                            }
                        }
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::Pool { input, layout } => {
                    let counts = layout.counts();
                    let mut gi = Array2::zeros(self.value(*input).dim());
                    for (b, &count) in counts.iter().enumerate() {
                        for t in 0..layout.t_max {
                            let r = b * layout.t_max + t;
                            let m = layout.mask[r];
                            if m != 0.0 {
                                let add = g.row(b).mapv(|v| v * m / count);
                                gi.row_mut(r).assign(&add);
                            }
                        }
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::Loss { input, local_grad } => {
                    let upstream = g[[0, 0]];
                    accumulate(&mut grads, *input, local_grad * upstream);
                }
                Op::Combine {
                    losses,
                    log_vars,
                    columns,
                    loss_factors,
                    penalty_factors,
                } => {
                    let upstream = g[[0, 0]];
                    let s = self.value(*log_vars);
                    let mut gs = Array2::zeros(s.dim());
                    for (i, &l) in losses.iter().enumerate() {
                        let si = s[[0, columns[i]]];
                        let w = loss_factors[i] * (-si).exp();
                        accumulate(&mut grads, l, Array2::from_elem((1, 1), upstream * w));
                        gs[[0, columns[i]]] +=
                            upstream * (-w * self.scalar(l) + penalty_factors[i]);
                    }
                    accumulate(&mut grads, *log_vars, gs);
                }
            }
        }

        let mut out: Vec<Array2<f64>> = (0..store.len())
            .map(|i| Array2::zeros(store.get(i).value.dim()))
            .collect();
        for &(node, slot) in &self.param_leaves {
            if let Some(g) = &grads[node.0] {
                out[slot] += g;
            }
        }
        out
    }
}

pub(crate) fn pool_rows(x: &Array2<f64>, layout: &SeqLayout) -> Result<Array2<f64>> {
    if x.nrows() != layout.batch * layout.t_max {
        return Err(Error::Dimension(format!(
            "pool: {} rows for layout {}x{}",
            x.nrows(),
            layout.batch,
            layout.t_max
        )));
    }
    let counts = layout.counts();
    if let Some(b) = counts.iter().position(|&c| c <= 0.0) {
        return Err(Error::Degenerate(format!(
            "sample {b} has an all-zero mask"
        )));
    }
    let mut pooled = Array2::zeros((layout.batch, x.ncols()));
    for (b, &count) in counts.iter().enumerate() {
        let mut acc = pooled.row_mut(b);
        for t in 0..layout.t_max {
            let r = b * layout.t_max + t;
            let m = layout.mask[r];
            if m != 0.0 {
                acc.scaled_add(m, &x.row(r));
            }
        }
        acc /= count;
    }
    Ok(pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Graph, &ParamStore) -> NodeId, store: &ParamStore) {
        let mut g = Graph::new();
        let root = build(&mut g, store);
        let grads = g.backward(root, store);
        let h = 1e-5;
        for (slot, grad) in grads.iter().enumerate() {
            for idx in 0..store.get(slot).value.len() {
                let shape = store.get(slot).value.dim();
                let ij = (idx / shape.1, idx % shape.1);
                let mut up = store.clone();
                up.get_mut(slot).value[ij] += h;
                let mut down = store.clone();
                down.get_mut(slot).value[ij] -= h;
                let f = |s: &ParamStore| {
                    let mut g = Graph::new();
                    let r = build(&mut g, s);
                    g.scalar(r)
                };
                let fd = (f(&up) - f(&down)) / (2.0 * h);
                let a = grad[ij];
                assert!(
                    (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "slot {slot} {ij:?}: fd {fd} vs {a}"
                );
            }
        }
    }

    #[test]
    fn dense_ops_gradients() {
        let mut store = ParamStore::default();
        store.push(
            "x",
            ParamGroup::Backbone,
            array![[0.3, -0.8, 1.2], [0.1, 0.5, -0.4]],
        );
        store.push(
            "w",
            ParamGroup::Backbone,
            array![[0.2, -0.1], [0.7, 0.3], [-0.5, 0.9]],
        );
        store.push("b", ParamGroup::Backbone, array![[0.05, -0.2]]);
        store.push("s", ParamGroup::Uncertainty, array![[0.2, -0.3]]);
        let target = array![[0.2, 0.7], [0.6, 0.1]];
        let weights = Array2::ones((2, 2));
        fd_check(
            |g, s| {
                let x = g.param(s, 0);
                let w = g.param(s, 1);
                let b = g.param(s, 2);
                let h = g.matmul(x, w).unwrap();
                let h = g.add_bias(h, b).unwrap();
                let a = g.gelu(h);
                let sig = g.sigmoid(a);
                let sm = g.softmax(h);
                let l1 = g
                    .regression_loss(sig, &target, &weights, LossKind::Mse)
                    .unwrap();
                let l2 = g
                    .cross_entropy(sm, &[1, 0], &[1.0, 2.0], &[1.0, 0.5])
                    .unwrap();
                let lv = g.param(s, 3);
                g.combine(&[l1, l2], lv, &[0, 1], &[1.0, 1.0], &[1.0, 1.0])
            },
            &store,
        );
    }

    #[test]
    fn sequence_ops_gradients() {
        let layout = Rc::new(SeqLayout {
            batch: 2,
            t_max: 3,
            mask: vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0],
        });
        let mut store = ParamStore::default();
        store.push(
            "x",
            ParamGroup::Backbone,
            Array2::from_shape_fn((6, 2), |(i, j)| (i as f64 * 0.3 - j as f64 * 0.7).sin()),
        );
        store.push(
            "w",
            ParamGroup::Backbone,
            array![
                [0.4, -0.3],
                [0.2, 0.8],
                [-0.6, 0.1],
                [0.3, 0.3],
                [0.5, -0.2],
                [0.1, 0.9]
            ],
        );
        let target = array![[0.1, 0.4], [0.8, 0.3]];
        let weights = Array2::ones((2, 2));
        fd_check(
            |g, s| {
                let x = g.param(s, 0);
                let prev = g.masked_shift(x, layout.clone(), 1).unwrap();
                let next = g.masked_shift(x, layout.clone(), -1).unwrap();
                let cat = g.concat(&[prev, x, next]).unwrap();
                let w = g.param(s, 1);
                let h = g.matmul(cat, w).unwrap();
                let h = g.clamp01(h);
                let h = g.add(h, x).unwrap();
                let p = g.masked_mean_pool(h, layout.clone()).unwrap();
                g.regression_loss(p, &target, &weights, LossKind::Ccc)
                    .unwrap()
            },
            &store,
        );
    }

    #[test]
    fn shift_reads_only_valid_frames() {
        let layout = Rc::new(SeqLayout {
            batch: 1,
            t_max: 3,
            mask: vec![1.0, 1.0, 0.0],
        });
        let mut g = Graph::new();
        let x = g.constant(array![[1.0], [2.0], [9.0]]);
        let next = g.masked_shift(x, layout.clone(), -1).unwrap();
        assert_eq!(g.value(next), &array![[2.0], [0.0], [0.0]]);
        let prev = g.masked_shift(x, layout, 1).unwrap();
        assert_eq!(g.value(prev), &array![[0.0], [1.0], [2.0]]);
    }

    #[test]
    fn activation_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() / 10.0 < 1e-6);
        // Φ(1) = 0.841344746...
        assert!((gelu(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
        assert_eq!(clamp01(0.5), 0.5);
        assert_eq!(clamp01(-0.3), 0.0);
        assert_eq!(clamp01(1.7), 1.0);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        let sm = softmax_rows(&Array2::zeros((2, 8)));
        assert!(sm.iter().all(|&v| (v - 0.125).abs() < 1e-15));
    }
}
