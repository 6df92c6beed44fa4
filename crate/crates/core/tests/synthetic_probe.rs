//! Noise-free synthetic data must be recoverable from mean-pooled features
//! by simple linear probes that know nothing about the generator.

use nalgebra::{DMatrix, DVector};

use burstmtl::dataio::{generate_synthetic, LabeledSample, SynthSpec};
use burstmtl::objectives::ccc;
use burstmtl::tasks::{TargetValue, TaskId};

fn samples() -> Vec<LabeledSample> {
    generate_synthetic(&SynthSpec {
        n_samples: 400,
        dim: 32,
        seed: 17,
        ..Default::default()
    })
    .unwrap()
}

/// Mean over frames plus a constant column.
fn design(samples: &[LabeledSample]) -> DMatrix<f64> {
    let d = samples[0].features.dim();
    DMatrix::from_fn(samples.len(), d + 1, |i, j| {
        if j == d {
            1.0
        } else {
            let f = samples[i].features.frames();
            f.column(j).iter().map(|&v| v as f64).sum::<f64>() / f.nrows() as f64
        }
    })
}

#[test]
fn least_squares_probe_recovers_regression_targets() {
    let samples = samples();
    let x = design(&samples);
    let svd = x.clone().svd(true, true);
    for task in [TaskId::High, TaskId::Two, TaskId::Culture] {
        for k in 0..task.default_dim() {
            let y = DVector::from_iterator(
                samples.len(),
                samples.iter().map(|s| match &s.targets[&task] {
                    TargetValue::Regression(v) => v[k],
                    TargetValue::Class(_) => unreachable!(),
                }),
            );
            let beta = svd.solve(&y, 1e-10).unwrap();
            let fit = &x * beta;
            let c = ccc(fit.as_slice(), y.as_slice()).unwrap();
            assert!(c >= 0.99, "{task} dim {k}: probe CCC {c}");
        }
    }
}

/// Multiclass perceptron; the classes are an argmax of a linear map of the
/// latent, so they are linearly separable in pooled-feature space.
#[test]
fn perceptron_probe_recovers_classes() {
    let samples = samples();
    let x = design(&samples);
    for task in [TaskId::Type, TaskId::Country] {
        let classes = task.default_dim();
        let labels: Vec<usize> = samples
            .iter()
            .map(|s| match s.targets[&task] {
                TargetValue::Class(c) => c,
                TargetValue::Regression(_) => unreachable!(),
            })
            .collect();
        let mut w = DMatrix::<f64>::zeros(classes, x.ncols());
        let predict = |w: &DMatrix<f64>, i: usize| {
            let scores = w * x.row(i).transpose();
            scores.argmax().0
        };
        for _ in 0..2000 {
            let mut mistakes = 0;
            for (i, &y) in labels.iter().enumerate() {
                let p = predict(&w, i);
                if p != y {
                    mistakes += 1;
                    let row = x.row(i).into_owned();
                    let mut wy = w.row_mut(y);
                    wy += &row;
                    let mut wp = w.row_mut(p);
                    wp -= &row;
                }
            }
            if mistakes == 0 {
                break;
            }
        }
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(i, &y)| predict(&w, *i) == y)
            .count();
        let acc = correct as f64 / labels.len() as f64;
        assert!(acc >= 0.95, "{task}: probe accuracy {acc}");
    }
}
