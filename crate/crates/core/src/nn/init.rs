use rand_distr::{Distribution, Normal};

use crate::autodiff::Array;
use crate::error::Result;
use crate::rng::{uniform, Rng};

use super::ffnn::{Activation, Ffnn, Layer};

/// Standard deviation of the off-diagonal entries of a near-identity weight
/// matrix (variance 0.01).
pub const NEAR_IDENTITY_STD: f64 = 0.1;

/// Linear layer with weights uniform in `±1/sqrt(fan_in)` and zero bias.
/// `shape` is `[fan_in, fan_out]`.
pub fn init_default(shape: &[usize; 2], rng: &mut Rng) -> Layer {
    let [fan_in, fan_out] = *shape;
    assert!(fan_in >= 1, "fan-in must be at least 1");
    let bound = 1.0 / (fan_in as f64).sqrt();
    Layer {
        weight: uniform(rng, &[fan_in, fan_out], -bound, bound),
        bias: Array::zeros(&[fan_out]),
        activation: Activation::Linear,
    }
}

/// Builds a network through the given widths. Hidden layers use `hidden`,
/// the last layer uses `output`.
pub fn ffnn_default(widths: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Result<Ffnn> {
    let n = widths.len() - 1;
    let layers = (0..n)
        .map(|i| {
            let mut l = init_default(&[widths[i], widths[i + 1]], rng);
            l.activation = if i + 1 == n { output } else { hidden };
            l
        })
        .collect();
    Ffnn::new(layers)
}

/// Square `width`-wide network with `hidden_layers` ReLU hidden layers and a
/// linear output. Every weight matrix has an exact unit diagonal and
/// off-diagonal entries drawn from N(0, 0.01); biases are zero.
pub fn init_near_identity(width: usize, hidden_layers: usize, rng: &mut Rng) -> Ffnn {
    near_identity_with_std(width, hidden_layers, NEAR_IDENTITY_STD, rng)
}

pub(crate) fn near_identity_with_std(width: usize, hidden_layers: usize, std: f64, rng: &mut Rng) -> Ffnn {
    assert!(width >= 1, "width must be at least 1");
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    let layers = (0..=hidden_layers)
        .map(|i| {
            let mut w = Array::zeros(&[width, width]);
            for r in 0..width {
                for c in 0..width {
                    let v = if r == c { 1.0 } else { normal.sample(rng) };
                    w.set(r, c, v);
                }
            }
            Layer {
                weight: w,
                bias: Array::zeros(&[width]),
                activation: if i == hidden_layers {
                    Activation::Linear
                } else {
                    Activation::Relu
                },
            }
        })
        .collect();
    Ffnn::new(layers).expect("square layers conform")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn near_identity_diagonal_is_exactly_one() {
        let mut rng = stream_rng(1, 0);
        let net = init_near_identity(16, 2, &mut rng);
        assert_eq!(net.layers().len(), 3);
        for l in net.layers() {
            for i in 0..16 {
                assert_eq!(l.weight.get(i, i), 1.0);
            }
            assert!(l.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn noiseless_near_identity_is_identity_on_non_negative_inputs() {
        let mut rng = stream_rng(2, 0);
        let net = near_identity_with_std(5, 3, 0.0, &mut rng);
        let x = Array::from_rows(&[[0.0, 0.3, 1.0, 7.5, 0.01], [2.0, 0.0, 0.0, 0.0, 1e-9]]).unwrap();
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn off_diagonal_variance() {
        let mut rng = stream_rng(3, 0);
        let net = init_near_identity(512, 0, &mut rng);
        let w = &net.layers()[0].weight;
        let mut vals = Vec::with_capacity(512 * 511);
        for r in 0..512 {
            for c in 0..512 {
                if r != c {
                    vals.push(w.get(r, c));
                }
            }
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.008..=0.012).contains(&var), "variance {var}");
    }

    #[test]
    fn default_init_within_bounds() {
        let mut rng = stream_rng(4, 0);
        let l = init_default(&[9, 30], &mut rng);
        assert!(l.weight.data().iter().all(|w| w.abs() <= 1.0 / 3.0));
        assert!(l.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn default_init_mean_is_zero() {
        let mut rng = stream_rng(5, 0);
        let l = init_default(&[4, 250_000], &mut rng);
        let n = l.weight.len() as f64;
        let mean = l.weight.sum() / n;
        // uniform on ±1/2 has standard deviation 1/(2 sqrt 3)
        let se = (0.5 / 3f64.sqrt()) / n.sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn default_init_is_deterministic() {
        let a = init_default(&[6, 6], &mut stream_rng(8, 1));
        let b = init_default(&[6, 6], &mut stream_rng(8, 1));
        assert_eq!(a, b);
    }
}
