//! Dense affine layers and weight initializers shared by the decoder and
//! rendering networks.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// One affine map `y = x W + b` with `W: (in, out)`, `b: (1, out)`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Affine {
            w: Array2::zeros((input, output)),
            b: Array2::zeros((1, output)),
        }
    }

    /// Gaussian `N(0, std^2)` weights, zero bias.
    pub fn gaussian(input: usize, output: usize, std: f64, rng: &mut impl Rng) -> Self {
        Affine {
            w: gaussian_matrix(input, output, 0.0, std, rng),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        debug_assert_eq!(x.ncols(), self.in_dim());
        x.dot(&self.w) + &self.b
    }
}

/// `(rows, cols)` matrix with i.i.d. `N(mean, std^2)` entries.
pub fn gaussian_matrix(
    rows: usize,
    cols: usize,
    mean: f64,
    std: f64,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let dist = Normal::new(mean, std).expect("std must be finite and positive");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Standard deviation for hidden layers feeding a (near-)ReLU nonlinearity,
/// scaled by fan-out as in sign-agnostic geometric initialization.
pub fn hidden_std(fan_out: usize) -> f64 {
    (2.0 / fan_out as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forward_applies_weights_then_bias() {
        let layer = Affine {
            w: array![[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]],
            b: array![[10.0, -10.0]],
        };
        let x = array![[1.0, 2.0, 3.0]];
        let y = layer.forward(&x);
        assert_eq!(y, array![[14.0, -3.0]]);
    }

    #[test]
    fn gaussian_layers_have_expected_scale() {
        let mut rng = crate::rng::SeedSpring::new(3).rng();
        let layer = Affine::gaussian(256, 512, hidden_std(512), &mut rng);
        let mean = layer.w.mean().unwrap();
        let var = layer.w.mapv(|v| v * v).mean().unwrap() - mean * mean;
        assert!(mean.abs() < 5e-3, "mean {mean}");
        let want = 2.0 / 512.0;
        assert!((var / want - 1.0).abs() < 0.1, "var {var} want {want}");
        assert!(layer.b.iter().all(|&v| v == 0.0));
    }
}
