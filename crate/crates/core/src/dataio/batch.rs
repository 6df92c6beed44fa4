//! Padded, masked mini-batches.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::LabeledSample;
use crate::error::{Error, Result};
use crate::tasks::{culture_dim_mask, TargetValue, TaskId};

/// Stacked per-task targets for a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchTarget {
    /// `values` is B×K; `dim_mask` is B×K with 1 where ground truth exists.
    Regression {
        values: Array2<f64>,
        dim_mask: Array2<f64>,
    },
    Class(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// B×T_max×D, zero beyond each sample's length.
    pub features: Array3<f64>,
    /// B×T_max, 1 for valid frames.
    pub mask: Array2<f64>,
    pub lengths: Vec<usize>,
    pub targets: BTreeMap<TaskId, BatchTarget>,
    pub countries: Vec<Option<usize>>,
    pub sample_weights: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.features.dim().1
    }

    pub fn dim(&self) -> usize {
        self.features.dim().2
    }

    /// Builds a batch from samples, padding to the longest one. Tasks are
    /// stacked only when every sample carries that target.
    pub fn from_samples(samples: &[&LabeledSample]) -> Result<Batch> {
        Self::padded_to(samples, 0)
    }

    /// Like [`Batch::from_samples`] but pads to at least `min_len` frames.
    pub fn padded_to(samples: &[&LabeledSample], min_len: usize) -> Result<Batch> {
        let first = samples
            .first()
            .ok_or_else(|| Error::EmptySplit("cannot batch zero samples".into()))?;
        let d = first.features.dim();
        if let Some(bad) = samples.iter().find(|s| s.features.dim() != d) {
            return Err(Error::Dimension(format!(
                "sample `{}` has D={}, batch has D={d}",
                bad.id,
                bad.features.dim()
            )));
        }
        let b = samples.len();
        let t_max = samples
            .iter()
            .map(|s| s.features.len())
            .max()
            .unwrap()
            .max(min_len);
        let mut features = Array3::zeros((b, t_max, d));
        let mut mask = Array2::zeros((b, t_max));
        let mut lengths = Vec::with_capacity(b);
        for (i, s) in samples.iter().enumerate() {
            let t = s.features.len();
            features
                .slice_mut(s![i, ..t, ..])
                .assign(&s.features.frames().mapv(f64::from));
            mask.slice_mut(s![i, ..t]).fill(1.0);
            lengths.push(t);
        }

        let mut targets = BTreeMap::new();
        for task in TaskId::ALL {
            if !samples.iter().all(|s| s.targets.contains_key(&task)) {
                continue;
            }
            let target = match &first.targets[&task] {
                TargetValue::Class(_) => {
                    let classes = samples
                        .iter()
                        .map(|s| match &s.targets[&task] {
                            TargetValue::Class(c) => Ok(*c),
                            TargetValue::Regression(_) => Err(Error::Labels(format!(
                                "sample `{}`: {task} target is not a class index",
                                s.id
                            ))),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    BatchTarget::Class(classes)
                }
                TargetValue::Regression(v0) => {
                    let k = v0.len();
                    let mut values = Array2::zeros((b, k));
                    let mut dim_mask = Array2::ones((b, k));
                    for (i, s) in samples.iter().enumerate() {
                        let TargetValue::Regression(v) = &s.targets[&task] else {
                            return Err(Error::Labels(format!(
                                "sample `{}`: {task} target is not a vector",
                                s.id
                            )));
                        };
                        if v.len() != k {
                            return Err(Error::Labels(format!(
                                "sample `{}`: {task} target has length {}, expected {k}",
                                s.id,
                                v.len()
                            )));
                        }
                        values.row_mut(i).assign(&Array1::from(v.clone()));
                        if task == TaskId::Culture {
                            let country = s.country().ok_or_else(|| {
                                Error::Labels(format!(
                                    "sample `{}`: Culture target needs a country label",
                                    s.id
                                ))
                            })?;
                            for (kk, m) in culture_dim_mask(country).iter().enumerate().take(k) {
                                dim_mask[[i, kk]] = if *m { 1.0 } else { 0.0 };
                            }
                        }
                    }
                    BatchTarget::Regression { values, dim_mask }
                }
            };
            targets.insert(task, target);
        }

        Ok(Batch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            features,
            mask,
            lengths,
            targets,
            countries: samples.iter().map(|s| s.country()).collect(),
            sample_weights: Array1::ones(b),
        })
    }
}

/// Splits samples into batches of at most `batch_size`, padded per batch.
/// With a seed the sample order is shuffled deterministically first.
pub fn make_batches(
    samples: &[LabeledSample],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("no samples to batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let d = samples[0].features.dim();
    if let Some(bad) = samples.iter().find(|s| s.features.dim() != d) {
        return Err(Error::Dimension(format!(
            "sample `{}` has D={}, dataset has D={d}",
            bad.id,
            bad.features.dim()
        )));
    }
    let mut order: Vec<&LabeledSample> = samples.iter().collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(Batch::from_samples).collect()
}
