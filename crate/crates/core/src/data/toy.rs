//! Synthetic zero-shot task with a closed-form reference classifier.

use nalgebra::DMatrix;
use rand::seq::index;

use crate::autodiff::{sigmoid, Array};
use crate::error::{Error, Result};
use crate::rng::{standard_normal, stream, stream_rng};

use super::{Dataset, Mode};

/// Parameters of [`make_toy_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub seen: usize,
    pub unseen: usize,
    pub attr_dim: usize,
    pub feat_dim: usize,
    pub per_class: usize,
    pub noise: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            seen: 10,
            unseen: 5,
            attr_dim: 16,
            feat_dim: 32,
            per_class: 50,
            noise: 0.05,
            mode: Mode::Zsl,
            seed: 7,
        }
    }
}

/// Fraction of each seen class placed in the training split in gzsl mode.
const GZSL_TRAIN_FRACTION: f64 = 0.8;

/// Classes `0..seen` are seen and `seen..seen + unseen` unseen. Attribute
/// rows are uniform on the unit sphere, a Gaussian map `W*` sends them to
/// class means `sigmoid(a W*)`, and samples add `N(0, noise²)` noise before
/// clamping into `[0, 1]`.
pub fn make_toy_dataset(spec: &ToySpec) -> Result<Dataset> {
    if spec.per_class < 4 {
        return Err(Error::invalid(format!("per-class count {} is below the minimum of 4", spec.per_class)));
    }
    if spec.feat_dim < spec.attr_dim || spec.attr_dim == 0 {
        return Err(Error::invalid("feature width must be at least the attribute width, which must be positive"));
    }
    if spec.seen < 2 || spec.unseen < 2 {
        return Err(Error::invalid("the toy task needs at least two seen and two unseen classes"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::invalid("noise must be a non-negative number"));
    }
    let mut rng = stream_rng(spec.seed, stream::TOY);
    let classes = spec.seen + spec.unseen;

    let mut attributes = standard_normal(&mut rng, &[classes, spec.attr_dim]);
    for r in 0..classes {
        let norm = attributes.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..spec.attr_dim {
            attributes.set(r, c, attributes.get(r, c) / norm);
        }
    }
    let w = standard_normal(&mut rng, &[spec.attr_dim, spec.feat_dim]);
    let means = attributes.matmul(&w)?.map(sigmoid);

    let n = classes * spec.per_class;
    let mut rows = Vec::with_capacity(n * spec.feat_dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for _ in 0..spec.per_class {
            let eps = standard_normal(&mut rng, &[spec.feat_dim]);
            rows.extend(
                means
                    .row(c)
                    .iter()
                    .zip(eps.data())
                    .map(|(m, e)| (m + spec.noise * e).clamp(0.0, 1.0)),
            );
            labels.push(c as u32);
        }
    }
    let features = Array::from_vec(vec![n, spec.feat_dim], rows)?;

    let mut train = vec![false; n];
    for c in 0..spec.seen {
        let base = c * spec.per_class;
        match spec.mode {
            Mode::Zsl => train[base..base + spec.per_class].fill(true),
            Mode::Gzsl => {
                let k = (GZSL_TRAIN_FRACTION * spec.per_class as f64).floor() as usize;
                for i in index::sample(&mut rng, spec.per_class, k) {
                    train[base + i] = true;
                }
            }
        }
    }
    let unseen = (0..classes).map(|c| c >= spec.seen).collect();
    let name = format!("toy-{}", spec.mode);
    Dataset::new(name, features, labels, attributes, train, unseen, spec.mode)
}

/// Fits the minimum-norm least-squares affine map from attributes to the
/// empirical seen-class training means, predicts the unseen class means,
/// and classifies every unseen test sample by the nearest predicted mean.
/// Returns the average per-class accuracy over unseen classes.
pub fn oracle_accuracy(ds: &Dataset) -> Result<f64> {
    let d = ds.feat_dim();
    let seen: Vec<usize> = ds
        .seen_classes()
        .into_iter()
        .filter(|&c| ds.train_indices().iter().any(|&i| ds.labels[i] as usize == c))
        .collect();
    let unseen = ds.unseen_classes();
    let mut sums = vec![vec![0.0; d]; ds.num_classes()];
    let mut counts = vec![0usize; ds.num_classes()];
    for i in ds.train_indices() {
        let y = ds.labels[i] as usize;
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(ds.features.row(i)) {
            *s += v;
        }
    }
    let d_a = ds.attr_dim();
    // trailing constant column for the intercept
    let design = |cls: &[usize]| DMatrix::from_fn(cls.len(), d_a + 1, |r, c| if c < d_a { ds.attributes.get(cls[r], c) } else { 1.0 });
    let a_seen = design(&seen);
    let x_seen = DMatrix::from_fn(seen.len(), d, |r, c| sums[seen[r]][c] / counts[seen[r]] as f64);
    let pinv = a_seen
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::invalid(format!("least-squares fit failed: {e}")))?;
    let map = pinv * x_seen;
    let a_unseen = design(&unseen);
    let predicted = a_unseen * map;

    let mut correct = vec![0usize; unseen.len()];
    let mut total = vec![0usize; unseen.len()];
    for i in ds.test_indices() {
        let y = ds.labels[i] as usize;
        let Some(slot) = unseen.iter().position(|&u| u == y) else { continue };
        let x = ds.features.row(i);
        let mut best = (f64::INFINITY, 0);
        for k in 0..unseen.len() {
            let dist: f64 = (0..d).map(|j| (x[j] - predicted[(k, j)]).powi(2)).sum();
            if dist < best.0 {
                best = (dist, k);
            }
        }
        total[slot] += 1;
        if best.1 == slot {
            correct[slot] += 1;
        }
    }
    let accs: Vec<f64> = correct
        .iter()
        .zip(&total)
        .filter(|(_, &t)| t > 0)
        .map(|(&c, &t)| c as f64 / t as f64)
        .collect();
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_invariants() {
        for mode in [Mode::Zsl, Mode::Gzsl] {
            let spec = ToySpec { mode, ..ToySpec::default() };
            let ds = make_toy_dataset(&spec).unwrap();
            assert_eq!(ds.num_classes(), 15);
            assert_eq!(ds.num_samples(), 750);
            for c in 0..15 {
                assert_eq!(ds.labels.iter().filter(|&&y| y as usize == c).count(), 50);
            }
            ds.check_preprocessed().unwrap();
            if mode == Mode::Gzsl {
                assert_eq!(ds.train_indices().len(), 400);
            }
        }
    }

    #[test]
    fn noiseless_classes_are_constant() {
        let ds = make_toy_dataset(&ToySpec {
            noise: 0.0,
            ..ToySpec::default()
        })
        .unwrap();
        for c in 0..15 {
            let first = ds.features.row(c * 50).to_vec();
            for i in 0..50 {
                assert_eq!(ds.features.row(c * 50 + i), &first[..]);
            }
        }
    }

    #[test]
    fn rejects_small_classes() {
        let spec = ToySpec {
            per_class: 2,
            ..ToySpec::default()
        };
        assert!(matches!(make_toy_dataset(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn noiseless_recoverable_oracle_is_perfect() {
        let ds = make_toy_dataset(&ToySpec {
            seen: 40,
            unseen: 5,
            attr_dim: 4,
            feat_dim: 8,
            per_class: 4,
            noise: 0.0,
            mode: Mode::Zsl,
            seed: 3,
        })
        .unwrap();
        assert_eq!(oracle_accuracy(&ds).unwrap(), 1.0);
    }

    #[test]
    fn oracle_is_deterministic_and_above_chance() {
        for seed in 0..3 {
            let ds = make_toy_dataset(&ToySpec {
                seed,
                ..ToySpec::default()
            })
            .unwrap();
            let a = oracle_accuracy(&ds).unwrap();
            assert_eq!(a, oracle_accuracy(&ds).unwrap());
            assert!(a >= 1.0 / 5.0, "oracle {a}");
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = make_toy_dataset(&ToySpec::default()).unwrap();
        let b = make_toy_dataset(&ToySpec::default()).unwrap();
        assert_eq!(a, b);
    }
}
