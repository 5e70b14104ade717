//! Sinusoidal positional encodings with progressive band masking.
//!
//! An encoder with `L` bands maps `x` to `[x, sin(f_0 x), cos(f_0 x), ...,
//! sin(f_{L-1} x), cos(f_{L-1} x)]` per coordinate, with log-linear
//! frequencies `f_k = 2^k * pi`. The raw coordinates are always passed
//! through unmasked, so a freshly initialized model is a function of plain
//! `x` even when every band is masked off.
//!
//! Masking is coarse-to-fine: band `k` has weight 0 until the progress
//! parameter `alpha` (measured in bands, `0..=L`) passes `k`, ramps with a
//! raised cosine over one band, then saturates at 1. Trainers ramp `alpha`
//! linearly over the first half of training.

use ndarray::Array2;

use crate::tape::{Tape, Var};
use crate::V3;

/// Positional encoder for 3-D points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PosEnc {
    num_freqs: usize,
}

impl PosEnc {
    pub fn new(num_freqs: usize) -> Self {
        PosEnc { num_freqs }
    }

    pub fn num_freqs(&self) -> usize {
        self.num_freqs
    }

    /// Output width: raw xyz plus sin/cos per band per coordinate.
    pub fn width(&self) -> usize {
        3 + 6 * self.num_freqs
    }

    /// Frequency of band `k`.
    pub fn freq(&self, k: usize) -> f64 {
        (1u64 << k) as f64 * std::f64::consts::PI
    }

    /// Progressive weight of band `k` at progress `alpha`.
    pub fn band_weight(alpha: f64, k: usize) -> f64 {
        let a = alpha - k as f64;
        if a <= 0.0 {
            0.0
        } else if a >= 1.0 {
            1.0
        } else {
            0.5 * (1.0 - (a * std::f64::consts::PI).cos())
        }
    }

    /// Fully-on progress value.
    pub fn full_alpha(&self) -> f64 {
        self.num_freqs as f64
    }

    /// `(1, width)` mask row at progress `alpha` (raw slots are 1).
    pub fn mask_row(&self, alpha: f64) -> Array2<f64> {
        let mut m = Array2::ones((1, self.width()));
        for k in 0..self.num_freqs {
            let w = Self::band_weight(alpha, k);
            for c in 0..6 {
                m[[0, 3 + 6 * k + c]] = w;
            }
        }
        m
    }

    /// Encode a batch of positions at progress `alpha`.
    pub fn encode(&self, xs: &[V3], alpha: f64) -> Array2<f64> {
        let mut out = Array2::zeros((xs.len(), self.width()));
        for (i, p) in xs.iter().enumerate() {
            out[[i, 0]] = p.x;
            out[[i, 1]] = p.y;
            out[[i, 2]] = p.z;
            for k in 0..self.num_freqs {
                let w = Self::band_weight(alpha, k);
                let f = self.freq(k);
                let base = 3 + 6 * k;
                for a in 0..3 {
                    out[[i, base + a]] = w * (f * p[a]).sin();
                    out[[i, base + 3 + a]] = w * (f * p[a]).cos();
                }
            }
        }
        out
    }

    /// Per-axis derivative of [`PosEnc::encode`] with respect to the query
    /// position: three `(n, width)` arrays, one per spatial axis. Used as
    /// constant tangent seeds when differentiating the field spatially.
    pub fn encode_tangent(&self, xs: &[V3], alpha: f64) -> [Array2<f64>; 3] {
        let mut out = [
            Array2::zeros((xs.len(), self.width())),
            Array2::zeros((xs.len(), self.width())),
            Array2::zeros((xs.len(), self.width())),
        ];
        for (i, p) in xs.iter().enumerate() {
            for a in 0..3 {
                out[a][[i, a]] = 1.0;
            }
            for k in 0..self.num_freqs {
                let w = Self::band_weight(alpha, k);
                let f = self.freq(k);
                let base = 3 + 6 * k;
                for a in 0..3 {
                    out[a][[i, base + a]] = w * f * (f * p[a]).cos();
                    out[a][[i, base + 3 + a]] = -w * f * (f * p[a]).sin();
                }
            }
        }
        out
    }

    /// Encode a live `(n, 3)` tape node (used where the query position
    /// itself carries gradients, e.g. differentiable surface points).
    pub fn encode_on_tape<'a>(&self, t: &mut Tape<'a>, x: Var, alpha: f64) -> Var {
        let mut parts = vec![x];
        for k in 0..self.num_freqs {
            let f = self.freq(k);
            parts.push(t.sin_scaled(x, f));
            parts.push(t.cos_scaled(x, f));
        }
        let cat = t.concat_cols(&parts);
        let mask = self.mask_row(alpha);
        if mask.iter().all(|&v| v == 1.0) {
            return cat;
        }
        let m = t.constant(mask);
        t.mul_row(cat, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn widths_match_band_counts() {
        assert_eq!(PosEnc::new(6).width(), 39);
        assert_eq!(PosEnc::new(4).width(), 27);
    }

    #[test]
    fn known_values_at_full_alpha() {
        let pe = PosEnc::new(2);
        let out = pe.encode(&[V3::new(0.5, 0.0, -1.0)], pe.full_alpha());
        // Raw passthrough.
        assert_eq!(out[[0, 0]], 0.5);
        assert_eq!(out[[0, 2]], -1.0);
        // Band 0: sin(pi * 0.5) = 1, cos(pi * 0.5) = 0.
        assert_relative_eq!(out[[0, 3]], 1.0, epsilon = 1e-12);
        assert_relative_eq!(out[[0, 6]], 0.0, epsilon = 1e-12);
        // Band 1: sin(2pi * -1) = 0, cos(2pi * -1) = 1.
        assert_relative_eq!(out[[0, 9 + 2]], 0.0, epsilon = 1e-12);
        assert_relative_eq!(out[[0, 9 + 5]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mask_endpoints_and_midpoint() {
        assert_eq!(PosEnc::band_weight(0.0, 0), 0.0);
        assert_eq!(PosEnc::band_weight(1.0, 0), 1.0);
        assert_relative_eq!(PosEnc::band_weight(0.5, 0), 0.5);
        assert_eq!(PosEnc::band_weight(3.0, 4), 0.0);
        // Raw slots never masked.
        let pe = PosEnc::new(3);
        let m = pe.mask_row(0.0);
        assert_eq!(m[[0, 0]], 1.0);
        assert!(m.slice(ndarray::s![0, 3..]).iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn band_weights_monotone_in_alpha(
            a1 in 0.0f64..6.0, a2 in 0.0f64..6.0, k in 0usize..6
        ) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            prop_assert!(PosEnc::band_weight(lo, k) <= PosEnc::band_weight(hi, k) + 1e-15);
        }
    }

    #[test]
    fn tangents_match_finite_differences() {
        let pe = PosEnc::new(4);
        let p = V3::new(0.31, -0.62, 0.08);
        let alpha = 2.6;
        let tan = pe.encode_tangent(&[p], alpha);
        let h = 1e-6;
        for axis in 0..3 {
            let mut hi = p;
            let mut lo = p;
            hi[axis] += h;
            lo[axis] -= h;
            let fhi = pe.encode(&[hi], alpha);
            let flo = pe.encode(&[lo], alpha);
            for c in 0..pe.width() {
                let fd = (fhi[[0, c]] - flo[[0, c]]) / (2.0 * h);
                assert_relative_eq!(tan[axis][[0, c]], fd, epsilon = 1e-4, max_relative = 1e-4);
            }
        }
    }

    #[test]
    fn tape_encoding_matches_plain_encoding() {
        let pe = PosEnc::new(5);
        let ps = [V3::new(0.2, 0.4, -0.9), V3::new(-0.5, 0.0, 1.0)];
        for alpha in [0.0, 1.7, pe.full_alpha()] {
            let plain = pe.encode(&ps, alpha);
            let mut t = Tape::new();
            let x = t.constant(Array2::from_shape_fn((2, 3), |(i, a)| ps[i][a]));
            let enc = pe.encode_on_tape(&mut t, x, alpha);
            let diff = (t.value(enc) - &plain).mapv(f64::abs).sum();
            assert!(diff < 1e-14, "alpha {alpha}: diff {diff}");
        }
    }
}
