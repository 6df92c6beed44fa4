//! Metrics and losses: CCC, UAR, MSE/MAE, weighted cross-entropy and the
//! learned-uncertainty multitask combination.
//!
//! Every loss has a `*_with_grad` form returning the gradient with respect to
//! the predictions; the autodiff graph calls those.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{TaskId, TaskKind};

/// Denominator threshold below which CCC is reported as 0.
pub const CCC_EPS: f64 = 1e-12;
/// Floor applied to probabilities inside the log of cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Concordance correlation coefficient with population moments.
pub fn ccc(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Dimension(format!(
            "ccc: prediction length {} vs target length {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "ccc needs at least 2 values, got {}",
            pred.len()
        )));
    }
    let w = vec![1.0; pred.len()];
    Ok(weighted_ccc(pred, target, &w).0)
}

/// Weighted CCC and its gradient with respect to `x`. Weights need not be
/// normalized; rows with weight 0 do not participate.
fn weighted_ccc(x: &[f64], y: &[f64], w: &[f64]) -> (f64, Vec<f64>) {
    let total: f64 = w.iter().sum();
    let p: Vec<f64> = w.iter().map(|wi| wi / total).collect();
    let mean = |v: &[f64]| v.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += p[i] * dx * dy;
        sxx += p[i] * dx * dx;
        syy += p[i] * dy * dy;
    }
    let num = 2.0 * sxy;
    let den = sxx + syy + (mx - my) * (mx - my);
    if den < CCC_EPS {
        return (0.0, vec![0.0; x.len()]);
    }
    let grad = (0..x.len())
        .map(|i| {
            let d_num = 2.0 * p[i] * (y[i] - my);
            let d_den = 2.0 * p[i] * (x[i] - mx) + 2.0 * (mx - my) * p[i];
            (d_num * den - num * d_den) / (den * den)
        })
        .collect();
    (num / den, grad)
}

fn check_same_shape(pred: &ArrayView2<f64>, target: &ArrayView2<f64>, what: &str) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::Dimension(format!(
            "{what}: prediction shape {:?} vs target shape {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    Ok(())
}

/// Combines an optional 0/1 dimension mask with optional per-row sample
/// weights into a B×K weight matrix.
pub fn element_weights(
    shape: (usize, usize),
    dim_mask: Option<ArrayView2<f64>>,
    sample_weights: Option<&[f64]>,
) -> Result<Array2<f64>> {
    let mut w = match dim_mask {
        Some(m) if m.dim() != shape => {
            return Err(Error::Dimension(format!(
                "mask shape {:?} vs {:?}",
                m.dim(),
                shape
            )));
        }
        Some(m) => m.to_owned(),
        None => Array2::ones(shape),
    };
    if let Some(u) = sample_weights {
        if u.len() != shape.0 {
            return Err(Error::Dimension(format!(
                "{} sample weights for {} rows",
                u.len(),
                shape.0
            )));
        }
        for (mut row, &ub) in w.rows_mut().into_iter().zip(u) {
            row *= ub;
        }
    }
    Ok(w)
}

/// `1 - mean_k CCC_k` over the batch, one CCC per output dimension.
pub fn ccc_loss(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    dim_mask: Option<ArrayView2<f64>>,
) -> Result<f64> {
    let w = element_weights(pred.dim(), dim_mask, None)?;
    Ok(ccc_loss_with_grad(pred, target, w.view())?.0)
}

/// Weighted CCC loss and its gradient. Dimensions with fewer than two rows
/// of positive weight are skipped.
pub fn ccc_loss_with_grad(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    weights: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    check_same_shape(&pred, &target, "ccc_loss")?;
    check_same_shape(&pred, &weights, "ccc_loss weights")?;
    let (b, k) = pred.dim();
    if b < 2 {
        return Err(Error::InsufficientData(format!(
            "ccc_loss needs a batch of at least 2, got {b}"
        )));
    }
    let mut grad = Array2::zeros((b, k));
    let mut sum = 0.0;
    let mut used = Vec::new();
    for j in 0..k {
        let rows: Vec<usize> = (0..b).filter(|&i| weights[[i, j]] > 0.0).collect();
        if rows.len() < 2 {
            continue;
        }
        let x: Vec<f64> = rows.iter().map(|&i| pred[[i, j]]).collect();
        let y: Vec<f64> = rows.iter().map(|&i| target[[i, j]]).collect();
        let w: Vec<f64> = rows.iter().map(|&i| weights[[i, j]]).collect();
        let (c, g) = weighted_ccc(&x, &y, &w);
        sum += c;
        for (&i, gi) in rows.iter().zip(g) {
            grad[[i, j]] = gi;
        }
        used.push(j);
    }
    if used.is_empty() {
        return Err(Error::Degenerate(
            "every output dimension has fewer than 2 labelled rows".into(),
        ));
    }
    let n = used.len() as f64;
    grad.mapv_inplace(|g| -g / n);
    Ok((1.0 - sum / n, grad))
}

#[derive(Clone, Copy)]
enum Distance {
    Squared,
    Absolute,
}

fn distance_loss_with_grad(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    distance: Distance,
) -> Result<(f64, Array2<f64>)> {
    let what = match distance {
        Distance::Squared => "mse_loss",
        Distance::Absolute => "mae_loss",
    };
    check_same_shape(&pred, &target, what)?;
    check_same_shape(&pred, &weights, what)?;
    let total: f64 = weights.sum();
    if total <= 0.0 {
        return Err(Error::Degenerate(format!("{what}: total weight is zero")));
    }
    let mut grad = Array2::zeros(pred.dim());
    let mut acc = 0.0;
    for ((idx, &p), &t) in pred.indexed_iter().zip(target.iter()) {
        let w = weights[idx];
        if w == 0.0 {
            continue;
        }
        let d = p - t;
        match distance {
            Distance::Squared => {
                acc += w * d * d;
                grad[idx] = 2.0 * w * d / total;
            }
            Distance::Absolute => {
                acc += w * d.abs();
                if d != 0.0 {
                    grad[idx] = w * d.signum() / total;
                }
            }
        }
    }
    Ok((acc / total, grad))
}

pub fn mse_loss(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    dim_mask: Option<ArrayView2<f64>>,
) -> Result<f64> {
    let w = element_weights(pred.dim(), dim_mask, None)?;
    Ok(mse_loss_with_grad(pred, target, w.view())?.0)
}

pub fn mae_loss(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    dim_mask: Option<ArrayView2<f64>>,
) -> Result<f64> {
    let w = element_weights(pred.dim(), dim_mask, None)?;
    Ok(mae_loss_with_grad(pred, target, w.view())?.0)
}

pub fn mse_loss_with_grad(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    weights: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    distance_loss_with_grad(pred, target, weights, Distance::Squared)
}

pub fn mae_loss_with_grad(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    weights: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    distance_loss_with_grad(pred, target, weights, Distance::Absolute)
}

/// Unweighted average recall over the classes that occur in `target`.
pub fn uar(pred: &[usize], target: &[usize], classes: usize) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::InsufficientData("uar of an empty input".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::Dimension(format!(
            "uar: {} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mut support = vec![0usize; classes];
    let mut hits = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(target) {
        if t >= classes || p >= classes {
            return Err(Error::Dimension(format!(
                "uar: class index out of range 0..{classes}"
            )));
        }
        support[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    let recalls: Vec<f64> = support
        .iter()
        .zip(&hits)
        .filter(|(&n, _)| n > 0)
        .map(|(&n, &h)| h as f64 / n as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(probs: ArrayView2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn weighted_cross_entropy(
    probs: ArrayView2<f64>,
    targets: &[usize],
    class_weights: &[f64],
    sample_weights: &[f64],
) -> Result<f64> {
    Ok(weighted_cross_entropy_with_grad(probs, targets, class_weights, sample_weights)?.0)
}

/// `sum_b u_b w_{y_b} (-ln p_b[y_b]) / sum_b u_b w_{y_b}` and its gradient with
/// respect to the probabilities.
pub fn weighted_cross_entropy_with_grad(
    probs: ArrayView2<f64>,
    targets: &[usize],
    class_weights: &[f64],
    sample_weights: &[f64],
) -> Result<(f64, Array2<f64>)> {
    let (b, k) = probs.dim();
    if targets.len() != b || sample_weights.len() != b {
        return Err(Error::Dimension(format!(
            "cross-entropy: {b} rows, {} targets, {} sample weights",
            targets.len(),
            sample_weights.len()
        )));
    }
    if class_weights.len() != k {
        return Err(Error::Dimension(format!(
            "cross-entropy: {} class weights for {k} classes",
            class_weights.len()
        )));
    }
    if class_weights
        .iter()
        .chain(sample_weights)
        .any(|w| w.is_nan() || *w < 0.0)
    {
        return Err(Error::Config(
            "cross-entropy weights must be non-negative".into(),
        ));
    }
    for (i, row) in probs.rows().into_iter().enumerate() {
        let s = row.sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Dimension(format!(
                "cross-entropy: row {i} sums to {s}, not 1"
            )));
        }
    }
    let mut total_weight = 0.0;
    let mut acc = 0.0;
    let mut row_weights = Vec::with_capacity(b);
    for (i, &y) in targets.iter().enumerate() {
        if y >= k {
            return Err(Error::Dimension(format!(
                "cross-entropy: class {y} out of range 0..{k}"
            )));
        }
        let a = sample_weights[i] * class_weights[y];
        total_weight += a;
        acc += a * -probs[[i, y]].max(PROB_FLOOR).ln();
        row_weights.push(a);
    }
    if total_weight <= 0.0 {
        return Err(Error::Degenerate(
            "cross-entropy: total weight is zero".into(),
        ));
    }
    let mut grad = Array2::zeros((b, k));
    for (i, &y) in targets.iter().enumerate() {
        let p = probs[[i, y]];
        if p > PROB_FLOOR {
            grad[[i, y]] = -row_weights[i] / (total_weight * p);
        }
    }
    Ok((acc / total_weight, grad))
}

/// How the per-task log-variances enter the combined objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyForm {
    /// `exp(-s) L + s` for every task.
    #[default]
    Simplified,
    /// `½ exp(-s) L + ½ s` for regression, `exp(-s) L + ½ s` for classification.
    Kendall,
}

impl UncertaintyForm {
    /// (loss factor, penalty factor) for a task kind.
    pub fn factors(self, kind: TaskKind) -> (f64, f64) {
        match (self, kind) {
            (UncertaintyForm::Simplified, _) => (1.0, 1.0),
            (UncertaintyForm::Kendall, TaskKind::Regression) => (0.5, 0.5),
            (UncertaintyForm::Kendall, TaskKind::Classification) => (1.0, 0.5),
        }
    }
}

/// One learnable log-variance per active task, starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyParams {
    pub tasks: Vec<TaskId>,
    pub log_vars: Vec<f64>,
}

impl UncertaintyParams {
    pub fn zeros(tasks: impl IntoIterator<Item = TaskId>) -> Self {
        let tasks: Vec<TaskId> = tasks.into_iter().collect();
        let log_vars = vec![0.0; tasks.len()];
        UncertaintyParams { tasks, log_vars }
    }

    pub fn index_of(&self, task: TaskId) -> Option<usize> {
        self.tasks.iter().position(|&t| t == task)
    }

    /// Effective task weights `exp(-s_i)`.
    pub fn task_weights(&self) -> BTreeMap<TaskId, f64> {
        self.tasks
            .iter()
            .zip(&self.log_vars)
            .map(|(&t, &s)| (t, (-s).exp()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlCombination {
    pub total: f64,
    /// ∂total/∂L_i, aligned with the input losses.
    pub d_losses: Vec<f64>,
    /// ∂total/∂s_i, aligned with the input losses.
    pub d_log_vars: Vec<f64>,
}

/// `Σ_i c_i exp(-s_i) L_i + p_i s_i` over the given task losses.
pub fn combine_mtl(
    task_losses: &[(TaskId, f64)],
    params: &UncertaintyParams,
    form: UncertaintyForm,
) -> Result<MtlCombination> {
    let mut total = 0.0;
    let mut d_losses = Vec::with_capacity(task_losses.len());
    let mut d_log_vars = Vec::with_capacity(task_losses.len());
    for &(task, loss) in task_losses {
        if !loss.is_finite() {
            return Err(Error::Diverged {
                task: task.name().into(),
            });
        }
        let idx = params
            .index_of(task)
            .ok_or_else(|| Error::Config(format!("no uncertainty parameter for task {task}")))?;
        let s = params.log_vars[idx];
        let (c, p) = form.factors(task.kind());
        let w = c * (-s).exp();
        total += w * loss + p * s;
        d_losses.push(w);
        d_log_vars.push(-w * loss + p);
    }
    Ok(MtlCombination {
        total,
        d_losses,
        d_log_vars,
    })
}

/// Per-sample weighting applied on top of class weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleWeighting {
    #[default]
    None,
    /// `u_b = B / (G * n_{c_b})` with `G` distinct countries in the batch and
    /// `n_c` the batch count of country `c`; the batch mean is 1.
    InverseCountryIntraBatch,
}

pub fn compute_sample_weights(batch_countries: &[usize], mode: SampleWeighting) -> Vec<f64> {
    match mode {
        SampleWeighting::None => vec![1.0; batch_countries.len()],
        SampleWeighting::InverseCountryIntraBatch => {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for &c in batch_countries {
                *counts.entry(c).or_insert(0) += 1;
            }
            let b = batch_countries.len() as f64;
            let groups = counts.len() as f64;
            batch_countries
                .iter()
                .map(|c| b / (groups * counts[c] as f64))
                .collect()
        }
    }
}

/// Everything besides the model parameters that defines the training
/// objective.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveContext {
    /// Cross-entropy class weights per classification task; tasks without an
    /// entry use unit weights.
    pub class_weights: BTreeMap<TaskId, Vec<f64>>,
    pub sample_weighting: SampleWeighting,
    pub uncertainty_form: UncertaintyForm,
}

impl ObjectiveContext {
    pub fn class_weights_for(&self, task: TaskId, classes: usize) -> Vec<f64> {
        self.class_weights
            .get(&task)
            .cloned()
            .unwrap_or_else(|| vec![1.0; classes])
    }
}

/// Validation metrics in the results-table layout: CCC for regression tasks,
/// UAR for classification tasks, plus the loss breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: BTreeMap<TaskId, f64>,
    pub task_losses: BTreeMap<TaskId, f64>,
    pub total_loss: f64,
    pub task_weights: BTreeMap<TaskId, f64>,
}

pub fn metric_name(task: TaskId) -> &'static str {
    match task.kind() {
        TaskKind::Regression => "ccc",
        TaskKind::Classification => "uar",
    }
}

impl MetricsReport {
    /// `key=value` lines, e.g. `high.ccc=0.6500`.
    pub fn to_flat_text(&self) -> String {
        let mut out = String::new();
        for (task, v) in &self.metrics {
            let _ = writeln!(out, "{}.{}={v}", task.key(), metric_name(*task));
        }
        for (task, v) in &self.task_losses {
            let _ = writeln!(out, "{}.loss={v}", task.key());
        }
        for (task, v) in &self.task_weights {
            let _ = writeln!(out, "{}.weight={v}", task.key());
        }
        let _ = writeln!(out, "total.loss={}", self.total_loss);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Direct transcription of the CCC formula, kept separate from the
    /// weighted implementation above.
    fn ccc_oracle(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let vx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
        let vy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
        let cov = x
            .iter()
            .zip(y)
            .map(|(a, b)| (a - mx) * (b - my))
            .sum::<f64>()
            / n;
        2.0 * cov / (vx + vy + (mx - my).powi(2))
    }

    #[test]
    fn ccc_examples() {
        let x = [0.2, 0.4, 0.9];
        assert!((ccc(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(ccc(&[0.5, 0.5, 0.5], &[0.1, 0.5, 0.9]).unwrap(), 0.0);
        let expected = ccc_oracle(&[0.1, 0.5, 0.9], &[0.0, 0.5, 1.0]);
        assert!((expected - 0.975_609_756).abs() < 1e-8);
        assert!((ccc(&[0.1, 0.5, 0.9], &[0.0, 0.5, 1.0]).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(
            ccc(&[1.0], &[1.0]),
            Err(Error::InsufficientData(_))
        ));
        // both constant: denominator zero
        assert_eq!(ccc(&[0.3, 0.3], &[0.3, 0.3]).unwrap(), 0.0);
    }

    #[test]
    fn ccc_loss_examples() {
        let t = Array2::from_shape_fn((6, 10), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 10.0);
        assert!(ccc_loss(t.view(), t.view(), None).unwrap().abs() < 1e-12);

        let constant = Array2::from_elem((6, 10), 0.4);
        assert!((ccc_loss(t.view(), constant.view(), None).unwrap() - 1.0).abs() < 1e-12);

        let pred = array![[0.0, 0.0], [1.0, 0.5]];
        let target = array![[0.0, 0.0], [1.0, 1.0]];
        let c1 = ccc_oracle(&[0.0, 0.5], &[0.0, 1.0]);
        let loss = ccc_loss(pred.view(), target.view(), None).unwrap();
        assert!((loss - (1.0 - (1.0 + c1) / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn ccc_loss_two_dims_quarter() {
        // Per-dim CCC {1.0, 0.5}: second dimension scaled so that
        // 2·σxy/(σx²+σy²) = 0.5 with equal means: pred = a·t with 2a/(1+a²)=0.5.
        let a = 2.0 - 3f64.sqrt();
        let t = [0.1, 0.3, 0.8, 0.6];
        let mean = t.iter().sum::<f64>() / 4.0;
        let pred = Array2::from_shape_fn((4, 2), |(i, j)| {
            if j == 0 {
                t[i]
            } else {
                mean + a * (t[i] - mean)
            }
        });
        let target = Array2::from_shape_fn((4, 2), |(i, _)| t[i]);
        let loss = ccc_loss(pred.view(), target.view(), None).unwrap();
        assert!((loss - 0.25).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn ccc_loss_mask_and_degenerate() {
        let pred = array![[0.1, 0.9], [0.5, 0.2], [0.7, 0.3]];
        let target = array![[0.2, 0.8], [0.4, 0.1], [0.9, 0.6]];
        let mask = array![[1.0, 1.0], [1.0, 0.0], [1.0, 0.0]];
        let masked = ccc_loss(pred.view(), target.view(), Some(mask.view())).unwrap();
        let c0 = ccc_oracle(&[0.1, 0.5, 0.7], &[0.2, 0.4, 0.9]);
        assert!((masked - (1.0 - c0)).abs() < 1e-12);

        let none = Array2::zeros((3, 2));
        assert!(matches!(
            ccc_loss(pred.view(), target.view(), Some(none.view())),
            Err(Error::Degenerate(_))
        ));
        let one_row = array![[0.1, 0.2]];
        assert!(matches!(
            ccc_loss(one_row.view(), one_row.view(), None),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn ccc_loss_gradient_matches_finite_differences() {
        let pred = array![
            [0.1, 0.9, 0.3],
            [0.5, 0.2, 0.4],
            [0.7, 0.35, 0.8],
            [0.2, 0.6, 0.1]
        ];
        let target = array![
            [0.2, 0.8, 0.5],
            [0.4, 0.1, 0.5],
            [0.9, 0.6, 0.2],
            [0.3, 0.3, 0.3]
        ];
        let w = array![
            [1.0, 2.0, 1.0],
            [1.0, 0.0, 0.5],
            [1.0, 1.0, 1.0],
            [1.0, 1.0, 2.0]
        ];
        let (_, g) = ccc_loss_with_grad(pred.view(), target.view(), w.view()).unwrap();
        let h = 1e-6;
        for idx in [(0, 0), (1, 1), (2, 2), (3, 0), (2, 1)] {
            let mut p = pred.clone();
            p[idx] += h;
            let up = ccc_loss_with_grad(p.view(), target.view(), w.view())
                .unwrap()
                .0;
            p[idx] -= 2.0 * h;
            let down = ccc_loss_with_grad(p.view(), target.view(), w.view())
                .unwrap()
                .0;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-7, "{idx:?}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn uar_examples() {
        let t: Vec<usize> = (0..16).map(|i| i % 8).collect();
        assert_eq!(uar(&t, &t, 8).unwrap(), 1.0);

        let mut target = vec![0usize; 90];
        target.extend(vec![1usize; 10]);
        assert_eq!(uar(&vec![0; 100], &target, 2).unwrap(), 0.5);

        // confusion matrix rows: class0 2/2, class1 1/2, class2 0/2
        let target = [0, 0, 1, 1, 2, 2];
        let pred = [0, 0, 1, 0, 1, 0];
        assert!((uar(&pred, &target, 3).unwrap() - 0.5).abs() < 1e-15);
        assert!(uar(&[], &[], 3).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let onehot = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(
            weighted_cross_entropy(onehot.view(), &[0, 2], &[0.3, 2.0, 5.0], &[1.0, 4.0]).unwrap(),
            0.0
        );

        let uniform = Array2::from_elem((3, 4), 0.25);
        let loss =
            weighted_cross_entropy(uniform.view(), &[0, 1, 3], &[1.0; 4], &[1.0; 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);

        // every sample in class 1: doubling w_1 leaves the normalized loss unchanged
        let probs = array![[0.2, 0.8], [0.6, 0.4]];
        let a = weighted_cross_entropy(probs.view(), &[1, 1], &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        let b = weighted_cross_entropy(probs.view(), &[1, 1], &[1.0, 2.0], &[1.0, 1.0]).unwrap();
        assert!((a - b).abs() < 1e-15);

        assert!(matches!(
            weighted_cross_entropy(probs.view(), &[1, 1], &[1.0, 0.0], &[1.0, 1.0]),
            Err(Error::Degenerate(_))
        ));
        let bad = array![[0.2, 0.7]];
        assert!(weighted_cross_entropy(bad.view(), &[0], &[1.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn mse_mae_examples() {
        let a = array![[0.2, 0.4], [0.9, 0.1]];
        assert_eq!(mse_loss(a.view(), a.view(), None).unwrap(), 0.0);
        let b = a.mapv(|v| v + 0.5);
        assert!((mse_loss(b.view(), a.view(), None).unwrap() - 0.25).abs() < 1e-12);
        assert!((mae_loss(b.view(), a.view(), None).unwrap() - 0.5).abs() < 1e-12);
        let p = array![[0.0, 1.0]];
        let t = array![[1.0, 0.0]];
        assert_eq!(mse_loss(p.view(), t.view(), None).unwrap(), 1.0);
        assert_eq!(mae_loss(p.view(), t.view(), None).unwrap(), 1.0);
        let c = array![[0.0, 1.0, 2.0]];
        assert!(matches!(
            mse_loss(p.view(), c.view(), None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn combine_examples() {
        let losses = [(TaskId::High, 0.7), (TaskId::Type, 1.9)];
        let zero = UncertaintyParams::zeros([TaskId::High, TaskId::Type]);
        let c = combine_mtl(&losses, &zero, UncertaintyForm::Simplified).unwrap();
        assert!((c.total - 2.6).abs() < 1e-15);

        let mut p = UncertaintyParams::zeros([TaskId::High]);
        p.log_vars[0] = 2f64.ln();
        let c = combine_mtl(&[(TaskId::High, 2.0)], &p, UncertaintyForm::Simplified).unwrap();
        assert!((c.total - (1.0 + 2f64.ln())).abs() < 1e-12);
        // stationary point s = ln L
        assert!(c.d_log_vars[0].abs() < 1e-12);

        let err = combine_mtl(
            &[(TaskId::Type, f64::NAN)],
            &zero,
            UncertaintyForm::Simplified,
        )
        .unwrap_err();
        assert!(err.to_string().contains("Type"));
    }

    #[test]
    fn combine_gradient_matches_finite_differences() {
        let mut p = UncertaintyParams::zeros([TaskId::High, TaskId::Country]);
        p.log_vars = vec![0.3, -0.4];
        let losses = [(TaskId::High, 0.8), (TaskId::Country, 1.3)];
        for form in [UncertaintyForm::Simplified, UncertaintyForm::Kendall] {
            let c = combine_mtl(&losses, &p, form).unwrap();
            let h = 1e-3;
            for i in 0..2 {
                let mut up = p.clone();
                up.log_vars[i] += h;
                let mut down = p.clone();
                down.log_vars[i] -= h;
                let fd = (combine_mtl(&losses, &up, form).unwrap().total
                    - combine_mtl(&losses, &down, form).unwrap().total)
                    / (2.0 * h);
                assert!((fd - c.d_log_vars[i]).abs() / c.d_log_vars[i].abs() <= 1e-4);

                let mut lu = losses;
                lu[i].1 += h;
                let mut ld = losses;
                ld[i].1 -= h;
                let fd = (combine_mtl(&lu, &p, form).unwrap().total
                    - combine_mtl(&ld, &p, form).unwrap().total)
                    / (2.0 * h);
                assert!((fd - c.d_losses[i]).abs() / c.d_losses[i].abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn combine_is_minimized_at_log_loss() {
        for loss in [0.05, 0.5, 1.0, 3.7] {
            let grid: Vec<f64> = (-4000..=4000).map(|i| i as f64 * 1e-3).collect();
            let value = |s: f64| {
                let p = UncertaintyParams {
                    tasks: vec![TaskId::High],
                    log_vars: vec![s],
                };
                combine_mtl(&[(TaskId::High, loss)], &p, UncertaintyForm::Simplified)
                    .unwrap()
                    .total
            };
            let best = grid
                .iter()
                .copied()
                .min_by(|a, b| value(*a).partial_cmp(&value(*b)).unwrap())
                .unwrap();
            assert!(
                (best - f64::ln(loss)).abs() <= 1e-3,
                "L={loss}: argmin {best}"
            );
            // convexity on the grid: second differences non-negative
            for w in grid.windows(3).step_by(97) {
                assert!(value(w[0]) + value(w[2]) - 2.0 * value(w[1]) >= -1e-12);
            }
        }
    }

    #[test]
    fn flat_report() {
        let report = MetricsReport {
            metrics: BTreeMap::from([(TaskId::High, 0.5), (TaskId::Type, 0.25)]),
            task_losses: BTreeMap::from([(TaskId::High, 0.5)]),
            total_loss: 1.5,
            task_weights: BTreeMap::new(),
        };
        let text = report.to_flat_text();
        assert!(text.contains("high.ccc=0.5\n"));
        assert!(text.contains("type.uar=0.25\n"));
        assert!(text.ends_with("total.loss=1.5\n"));
    }

    #[test]
    fn sample_weight_examples() {
        assert_eq!(
            compute_sample_weights(&[3, 1, 0, 2], SampleWeighting::None),
            vec![1.0; 4]
        );
        assert_eq!(
            compute_sample_weights(&[0, 0, 1, 1], SampleWeighting::InverseCountryIntraBatch),
            vec![1.0; 4]
        );
        let w = compute_sample_weights(&[0, 0, 0, 1], SampleWeighting::InverseCountryIntraBatch);
        let expected = [2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 2.0];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-5.0..5.0f64, n),
                prop::collection::vec(-5.0..5.0f64, n),
            )
        })
    }

    proptest! {
        #[test]
        fn ccc_symmetry_and_invariances((x, y) in vec_pair(), shift in -3.0..3.0f64, scale in 0.1..10.0f64) {
            let base = ccc(&x, &y).unwrap();
            prop_assert!((base - ccc(&y, &x).unwrap()).abs() < 1e-10);
            let xs: Vec<f64> = x.iter().map(|v| v + shift).collect();
            let ys: Vec<f64> = y.iter().map(|v| v + shift).collect();
            prop_assert!((base - ccc(&xs, &ys).unwrap()).abs() < 1e-9);
            let xc: Vec<f64> = x.iter().map(|v| v * scale).collect();
            let yc: Vec<f64> = y.iter().map(|v| v * scale).collect();
            prop_assert!((base - ccc(&xc, &yc).unwrap()).abs() < 1e-9);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
        }

        #[test]
        fn inverse_country_weights_have_unit_mean(countries in prop::collection::vec(0usize..4, 1..64)) {
            let w = compute_sample_weights(&countries, SampleWeighting::InverseCountryIntraBatch);
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn ccc_self_is_one((x, _) in vec_pair()) {
            let spread = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-6);
            prop_assert!((ccc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn uar_relabel_invariant(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..60), perm_seed in 0usize..120) {
            // the perm_seed-th permutation of 0..5
            let mut pool: Vec<usize> = (0..5).collect();
            let mut perm = Vec::new();
            let mut k = perm_seed;
            for m in (1..=5).rev() {
                perm.push(pool.remove(k % m));
                k /= m;
            }
            let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let target: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let pp: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
            let tp: Vec<usize> = target.iter().map(|&c| perm[c]).collect();
            prop_assert!((uar(&pred, &target, 5).unwrap() - uar(&pp, &tp, 5).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn uniform_weights_match_plain_cross_entropy(rows in prop::collection::vec(prop::collection::vec(0.01..1.0f64, 4), 1..20), seed in 0usize..1000) {
            let b = rows.len();
            let mut probs = Array2::zeros((b, 4));
            for (i, r) in rows.iter().enumerate() {
                let s: f64 = r.iter().sum();
                for j in 0..4 { probs[[i, j]] = r[j] / s; }
            }
            let targets: Vec<usize> = (0..b).map(|i| (i * 7 + seed) % 4).collect();
            let plain = targets.iter().enumerate().map(|(i, &y)| -probs[[i, y]].ln()).sum::<f64>() / b as f64;
            let weighted = weighted_cross_entropy(probs.view(), &targets, &[1.0; 4], &vec![1.0; b]).unwrap();
            prop_assert!((plain - weighted).abs() <= 1e-12);
        }
    }
}
