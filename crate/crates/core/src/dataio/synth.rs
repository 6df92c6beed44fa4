//! Deterministic synthetic datasets.
//!
//! Each sample draws a latent `z ~ N(0, I_16)`. Every frame is `W_f z` plus
//! independent Gaussian noise scaled by `noise_level`, so the mean-pooled
//! features are a linear image of `z` when the noise is zero. Regression
//! targets are `sigmoid(A z)` and class targets are `argmax(C z)`, with all
//! maps drawn once from the seed. Regression maps are drawn at half the scale
//! of the others so that `A z` has a standard deviation near 0.5, where the
//! sigmoid is close to linear and a linear probe on pooled features stays
//! accurate.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::FeatureSequence;
use super::manifest::{LabeledSample, Split};
use crate::error::{Error, Result};
use crate::tasks::{TargetValue, Targets, TaskId, TaskKind, COUNTRIES};

pub const LATENT_DIM: usize = 16;
const REGRESSION_SCALE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub seed: u64,
    pub noise_level: f64,
    pub train_ratio: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_samples: 200,
            dim: 32,
            min_frames: 4,
            max_frames: 12,
            seed: 0,
            noise_level: 0.0,
            train_ratio: 0.8,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("synth n_samples must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("synth dim must be positive".into()));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::Config(format!(
                "synth frame range ({}, {}) is invalid",
                self.min_frames, self.max_frames
            )));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::Config(
                "synth noise_level must be a non-negative number".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.train_ratio) {
            return Err(Error::Config("synth train_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let g: f64 = StandardNormal.sample(rng);
        g * scale
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// The fixed maps from latent space to features and targets.
struct LatentMaps {
    features: Array2<f64>,
    tasks: Vec<(TaskId, Array2<f64>)>,
}

impl LatentMaps {
    fn draw(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let scale = 1.0 / (LATENT_DIM as f64).sqrt();
        let features = gaussian_matrix(rng, dim, LATENT_DIM, scale);
        let tasks = TaskId::ALL
            .into_iter()
            .map(|t| {
                let s = match t.kind() {
                    TaskKind::Regression => REGRESSION_SCALE * scale,
                    TaskKind::Classification => scale,
                };
                (t, gaussian_matrix(rng, t.default_dim(), LATENT_DIM, s))
            })
            .collect();
        LatentMaps { features, tasks }
    }
}

/// Generates `spec.n_samples` samples; identical specs give identical data.
///
/// The first `floor(train_ratio * n)` samples (allocated across countries by
/// largest remainder) are assigned to train, the rest to val.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let maps = LatentMaps::draw(&mut rng, spec.dim);

    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let z = Array1::from_shape_fn(LATENT_DIM, |_| StandardNormal.sample(&mut rng));
        let t = rng.gen_range(spec.min_frames..=spec.max_frames);
        let clean = maps.features.dot(&z);
        let frames = Array2::from_shape_fn((t, spec.dim), |(_, j)| {
            let noise: f64 = if spec.noise_level > 0.0 {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * spec.noise_level
            } else {
                0.0
            };
            (clean[j] + noise) as f32
        });

        let mut targets = Targets::new();
        for (task, map) in &maps.tasks {
            let logits = map.dot(&z);
            let value = match task.kind() {
                TaskKind::Regression => {
                    TargetValue::Regression(logits.iter().map(|&u| sigmoid(u)).collect())
                }
                TaskKind::Classification => TargetValue::Class(argmax(&logits)),
            };
            targets.insert(*task, value);
        }
        samples.push(LabeledSample {
            id: format!("syn{i:05}"),
            split: Split::Val,
            features: FeatureSequence::new(frames)?,
            targets,
        });
    }

    assign_stratified_split(&mut samples, spec.train_ratio);
    Ok(samples)
}

/// Marks `floor(ratio * n)` samples as train, stratified by country.
fn assign_stratified_split(samples: &mut [LabeledSample], ratio: f64) {
    let n_train = (ratio * samples.len() as f64 + 1e-9).floor() as usize;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); COUNTRIES];
    for (i, s) in samples.iter().enumerate() {
        groups[s.country().unwrap_or(0)].push(i);
    }
    let exact: Vec<f64> = groups.iter().map(|g| ratio * g.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let mut remaining = n_train.saturating_sub(quota.iter().sum());
    let mut by_remainder: Vec<usize> = (0..COUNTRIES).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = exact[a] - quota[a] as f64;
        let rb = exact[b] - quota[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &g in by_remainder.iter().cycle().take(COUNTRIES * 2) {
        if remaining == 0 {
            break;
        }
        if quota[g] < groups[g].len() {
            quota[g] += 1;
            remaining -= 1;
        }
    }
    for (g, members) in groups.iter().enumerate() {
        for (k, &i) in members.iter().enumerate() {
            samples[i].split = if k < quota[g] {
                Split::Train
            } else {
                Split::Val
            };
        }
    }
}
