//! Differentiable surface rendering: geometry-feature and radiance
//! networks, the surface-point reparameterization, and the photometric /
//! silhouette / normal losses.
//!
//! Rendering follows the implicit-differentiation recipe: the root finder
//! produces a hit `x0` off-tape; training then reattaches the hit through
//!
//! ```text
//! x_diff = x0 - v * d(x0) / <grad d(x0), v>
//! ```
//!
//! where `d(x0)` is a live tape evaluation while `x0`, `grad d(x0)` and the
//! ray direction `v` are constants. Numerically `x_diff == x0`, but its
//! derivative w.r.t. the field parameters matches how the true intersection
//! point moves when the surface moves. Rays with `|<grad d, v>|` below a
//! threshold (grazing) are dropped and counted rather than amplified.
//!
//! Color comes from two networks: `Q` maps an encoded surface point to a
//! feature vector (skip connection re-injects the encoding mid-stack), and
//! `R` maps `[enc(x), normal, feature, view]` to RGB in `[-1, 1]` via tanh.
//! The normal fed to `R` is detached; normal supervision instead flows
//! through the dedicated normal loss, which differentiates the spatial
//! gradient itself (second order in the field parameters).

use ndarray::Array2;
use rand::Rng;

use crate::encoding::PosEnc;
use crate::field::{SceneSdf, TapeField};
use crate::mlp::{gaussian_matrix, Affine};
use crate::optim::{Group, LiveSet, ParamBag, ParamId};
use crate::tape::{PTensor, Tape, Var};
use crate::V3;

/// Architecture of the rendering networks (defaults = reference setup).
#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    /// Q: hidden width, hidden depth, skip position, output feature length.
    pub q_hidden: usize,
    pub q_depth: usize,
    /// The encoded input is concatenated onto the output of this hidden
    /// layer (1-based; 4 means after the 4th activation).
    pub q_skip_after: usize,
    pub feature_len: usize,
    pub q_pe_freqs: usize,
    /// R: hidden width and depth.
    pub r_hidden: usize,
    pub r_depth: usize,
    pub r_pe_freqs: usize,
    /// Softplus sharpness for Q's activations.
    pub softplus_beta: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            q_hidden: 512,
            q_depth: 8,
            q_skip_after: 4,
            feature_len: 256,
            q_pe_freqs: 6,
            r_hidden: 512,
            r_depth: 4,
            r_pe_freqs: 4,
            softplus_beta: 100.0,
        }
    }
}

/// Geometry-feature network `Q` and radiance network `R`.
#[derive(Debug, Clone)]
pub struct RenderNets {
    pub config: RenderConfig,
    pub pe_q: PosEnc,
    pub pe_r: PosEnc,
    /// `q_depth` hidden layers plus the linear feature head.
    pub q_layers: Vec<Affine>,
    /// `r_depth` hidden layers plus the linear RGB head.
    pub r_layers: Vec<Affine>,
}

impl RenderNets {
    pub fn init(config: RenderConfig, rng: &mut impl Rng) -> Self {
        let pe_q = PosEnc::new(config.q_pe_freqs);
        let pe_r = PosEnc::new(config.r_pe_freqs);
        assert!(
            (1..config.q_depth).contains(&config.q_skip_after),
            "skip must land between hidden layers"
        );

        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let mut q_layers = Vec::new();
        let mut in_dim = pe_q.width();
        for i in 0..config.q_depth {
            q_layers.push(Affine {
                w: gaussian_matrix(in_dim, config.q_hidden, 0.0, he(in_dim), rng),
                b: Array2::zeros((1, config.q_hidden)),
            });
            in_dim = config.q_hidden;
            if i + 1 == config.q_skip_after {
                in_dim += pe_q.width();
            }
        }
        q_layers.push(Affine {
            w: gaussian_matrix(in_dim, config.feature_len, 0.0, (1.0 / in_dim as f64).sqrt(), rng),
            b: Array2::zeros((1, config.feature_len)),
        });

        // R input: [enc(x), normal, feature, view].
        let r_in = pe_r.width() + 3 + config.feature_len + 3;
        let mut r_layers = Vec::new();
        let mut in_dim = r_in;
        for _ in 0..config.r_depth {
            r_layers.push(Affine {
                w: gaussian_matrix(in_dim, config.r_hidden, 0.0, he(in_dim), rng),
                b: Array2::zeros((1, config.r_hidden)),
            });
            in_dim = config.r_hidden;
        }
        r_layers.push(Affine {
            w: gaussian_matrix(in_dim, 3, 0.0, (1.0 / in_dim as f64).sqrt(), rng),
            b: Array2::zeros((1, 3)),
        });

        RenderNets { config, pe_q, pe_r, q_layers, r_layers }
    }

    /// Plain forward of Q on pre-encoded input.
    pub fn q_forward(&self, enc: &Array2<f64>) -> Array2<f64> {
        let beta = self.config.softplus_beta;
        let mut h = enc.clone();
        for (i, layer) in self.q_layers.iter().enumerate() {
            h = layer.forward(&h);
            if i < self.config.q_depth {
                h.mapv_inplace(|v| crate::field::softplus_beta(v, beta));
                if i + 1 == self.config.q_skip_after {
                    h = hconcat(&[&h, enc]);
                }
            }
        }
        h
    }

    /// Plain forward of R: inputs are `[enc_r | normal | feature | view]`.
    pub fn r_forward(&self, cat: &Array2<f64>) -> Array2<f64> {
        let mut h = cat.clone();
        let last = self.r_layers.len() - 1;
        for (i, layer) in self.r_layers.iter().enumerate() {
            h = layer.forward(&h);
            if i < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        h.mapv(f64::tanh)
    }

    /// Radiance for surface points with normals and view directions,
    /// without a tape. Output is RGB in `[-1, 1]`.
    pub fn radiance(&self, xs: &[V3], normals: &[V3], views: &[V3]) -> Array2<f64> {
        let enc_q = self.pe_q.encode(xs, self.pe_q.full_alpha());
        let feats = self.q_forward(&enc_q);
        let enc_r = self.pe_r.encode(xs, self.pe_r.full_alpha());
        let n = v3s_to_array(normals);
        let v = v3s_to_array(views);
        let cat = hconcat(&[&enc_r, &n, &feats, &v]);
        self.r_forward(&cat)
    }
}

pub(crate) fn v3s_to_array(ps: &[V3]) -> Array2<f64> {
    Array2::from_shape_fn((ps.len(), 3), |(i, a)| ps[i][a])
}

fn hconcat(parts: &[&Array2<f64>]) -> Array2<f64> {
    let rows = parts[0].nrows();
    let width = parts.iter().map(|p| p.ncols()).sum();
    let mut out = Array2::zeros((rows, width));
    let mut c = 0;
    for p in parts {
        out.slice_mut(ndarray::s![.., c..c + p.ncols()]).assign(p);
        c += p.ncols();
    }
    out
}

impl ParamBag for RenderNets {
    fn visit(&self, f: &mut dyn FnMut(ParamId, &Array2<f64>)) {
        for (i, l) in self.q_layers.iter().enumerate() {
            f(ParamId::new(Group::RenderQ, (2 * i) as u8), &l.w);
            f(ParamId::new(Group::RenderQ, (2 * i + 1) as u8), &l.b);
        }
        for (i, l) in self.r_layers.iter().enumerate() {
            f(ParamId::new(Group::RenderR, (2 * i) as u8), &l.w);
            f(ParamId::new(Group::RenderR, (2 * i + 1) as u8), &l.b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamId, &mut Array2<f64>)) {
        for (i, l) in self.q_layers.iter_mut().enumerate() {
            f(ParamId::new(Group::RenderQ, (2 * i) as u8), &mut l.w);
            f(ParamId::new(Group::RenderQ, (2 * i + 1) as u8), &mut l.b);
        }
        for (i, l) in self.r_layers.iter_mut().enumerate() {
            f(ParamId::new(Group::RenderR, (2 * i) as u8), &mut l.w);
            f(ParamId::new(Group::RenderR, (2 * i + 1) as u8), &mut l.b);
        }
    }
}

/// Tape-building view of the rendering networks.
#[derive(Clone, Copy)]
pub struct RenderTape<'a> {
    pub nets: &'a RenderNets,
    pub live: &'a LiveSet,
}

impl<'a> RenderTape<'a> {
    fn q_p(&self, slot: u8, vals: &'a Array2<f64>) -> PTensor<'a> {
        PTensor::new(vals, ParamId::new(Group::RenderQ, slot), self.live.contains(&Group::RenderQ))
    }

    fn r_p(&self, slot: u8, vals: &'a Array2<f64>) -> PTensor<'a> {
        PTensor::new(vals, ParamId::new(Group::RenderR, slot), self.live.contains(&Group::RenderR))
    }

    /// RGB (`(n, 3)`, tanh range) for live surface points `x`, detached
    /// normals, and constant view directions.
    pub fn radiance(
        &self,
        t: &mut Tape<'a>,
        x: Var,
        normals: &Array2<f64>,
        views: &Array2<f64>,
    ) -> Var {
        let nets = self.nets;
        let beta = nets.config.softplus_beta;
        let enc_q = nets.pe_q.encode_on_tape(t, x, nets.pe_q.full_alpha());
        let mut h = enc_q;
        for (i, layer) in nets.q_layers.iter().enumerate() {
            let w = self.q_p((2 * i) as u8, &layer.w);
            let b = self.q_p((2 * i + 1) as u8, &layer.b);
            let hw = t.matmul(h, w);
            h = t.add_row(hw, b);
            if i < nets.config.q_depth {
                h = t.softplus(h, beta);
                if i + 1 == nets.config.q_skip_after {
                    h = t.concat_cols(&[h, enc_q]);
                }
            }
        }
        let feats = h;

        let enc_r = nets.pe_r.encode_on_tape(t, x, nets.pe_r.full_alpha());
        let n = t.constant(normals.clone());
        let v = t.constant(views.clone());
        let mut h = t.concat_cols(&[enc_r, n, feats, v]);
        let last = nets.r_layers.len() - 1;
        for (i, layer) in nets.r_layers.iter().enumerate() {
            let w = self.r_p((2 * i) as u8, &layer.w);
            let b = self.r_p((2 * i + 1) as u8, &layer.b);
            let hw = t.matmul(h, w);
            h = t.add_row(hw, b);
            if i < last {
                h = t.relu(h);
            }
        }
        t.tanh(h)
    }
}

/// Hit points reattached to the tape, with grazing rays filtered out.
pub struct DiffHits {
    /// Live `(n, 3)` surface points.
    pub x: Var,
    /// Indices into the original ray list that survived the grazing filter.
    pub kept: Vec<usize>,
    /// Number of rays dropped because `|<grad d, v>|` was below threshold.
    pub grazing_dropped: usize,
    /// Detached unit normals at the kept hits (`(n, 3)`).
    pub normals: Array2<f64>,
    /// Live spatial gradients at the kept hits (`(n, 3)`), for the normal
    /// loss (second-order path).
    pub grad_live: Var,
}

/// Threshold below which a ray counts as grazing.
pub const GRAZING_EPS: f64 = 1e-4;

/// Builds differentiable surface points for a set of hits.
///
/// `scene` must be the plain view of the same field/latent that `tf`
/// records on tape.
pub fn differentiable_hits<'a>(
    t: &mut Tape<'a>,
    tf: &TapeField<'a>,
    scene: &SceneSdf<'_>,
    hit_points: &[V3],
    ray_dirs: &[V3],
) -> DiffHits {
    assert_eq!(hit_points.len(), ray_dirs.len());
    let (_, grads) = scene.eval_with_grad_many(hit_points);
    let mut kept = Vec::new();
    let mut dropped = 0;
    for (i, g) in grads.iter().enumerate() {
        if g.dot(&ray_dirs[i]).abs() < GRAZING_EPS {
            dropped += 1;
        } else {
            kept.push(i);
        }
    }
    let xs: Vec<V3> = kept.iter().map(|&i| hit_points[i]).collect();
    let vs: Vec<V3> = kept.iter().map(|&i| ray_dirs[i]).collect();
    let n = xs.len();

    // Live d(x0) and grad d(x0); x0 constant.
    let (d_live, grad_live) = tf.sdf_with_spatial_grad(t, &xs);

    let mut inv_denom = Array2::zeros((n, 1));
    let mut normals = Array2::zeros((n, 3));
    for (row, &i) in kept.iter().enumerate() {
        let g = grads[i];
        inv_denom[[row, 0]] = 1.0 / g.dot(&ray_dirs[i]);
        let un = g.try_normalize(1e-12).unwrap_or_else(V3::zeros);
        for a in 0..3 {
            normals[[row, a]] = un[a];
        }
    }

    let x0 = t.constant(v3s_to_array(&xs));
    let v = t.constant(v3s_to_array(&vs));
    let inv = t.constant(inv_denom);
    let scaled = t.mul(d_live, inv); // (n, 1)
    let step = t.mul_col(v, scaled); // (n, 3)
    let x = t.sub(x0, step);

    DiffHits { x, kept, grazing_dropped: dropped, normals, grad_live }
}

/// Mean L1 over rays and channels between predicted and target colors
/// (both in the tanh range `[-1, 1]`).
pub fn rgb_loss<'a>(t: &mut Tape<'a>, pred: Var, target: &Array2<f64>) -> Var {
    let tgt = t.constant(target.clone());
    let diff = t.sub(pred, tgt);
    let l1 = t.abs(diff);
    t.mean_all(l1)
}

/// Silhouette (mask) loss: binary cross-entropy of `sigmoid(-alpha * d)`
/// against in-mask labels, computed per ray at its closest-approach point.
///
/// `d_min` is the live `(n, 1)` field value at each ray's minimum point;
/// `labels` holds 1.0 for rays inside the reference mask, 0.0 outside.
/// For a positive distance `d` on an in-mask ray, the per-ray value is
/// `softplus(alpha * d)` — e.g. `alpha * d = 5` gives ~5.0067.
pub fn mask_loss<'a>(t: &mut Tape<'a>, d_min: Var, labels: &Array2<f64>, alpha: f64) -> Var {
    let s = t.scale(d_min, -alpha);
    let neg_s = t.neg(s);
    let sp_neg = t.softplus(neg_s, 1.0); // softplus(alpha * d) = -ln sigmoid(s)
    let sp_pos = t.softplus(s, 1.0); // -ln (1 - sigmoid(s))
    let y = t.constant(labels.clone());
    let one_minus_y = t.constant(labels.mapv(|v| 1.0 - v));
    let a = t.mul(y, sp_neg);
    let b = t.mul(one_minus_y, sp_pos);
    let per_ray = t.add(a, b);
    t.mean_all(per_ray)
}

/// Normal supervision: mean of `1 - <normalize(grad d), n_ref>`.
///
/// With `normalize` (the default) the loss depends only on direction —
/// aligned gradients give 0, opposed give 2, a 60 degree error gives 0.5.
/// `raw` skips the normalization and dots the gradient directly.
pub fn normal_loss<'a>(
    t: &mut Tape<'a>,
    grad: Var,
    reference: &Array2<f64>,
    raw: bool,
) -> Var {
    let g = if raw { grad } else { t.normalize_rows(grad, 1e-12) };
    let r = t.constant(reference.clone());
    let dots = t.dot_rows(g, r);
    let neg = t.neg(dots);
    let one_minus = t.add_scalar(neg, 1.0);
    t.mean_all(one_minus)
}

/// Loss weighting for reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rgb: f64,
    pub mask: f64,
    pub normal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rgb: 1.0, mask: 100.0, normal: 1.0 }
    }
}

/// Sharpness of the mask sigmoid.
pub const MASK_ALPHA: f64 = 50.0;
