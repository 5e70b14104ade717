//! Shape-space prior training: the staged coarse-to-fine schedule, the
//! progressive encoding ramp, and the surface / embedding / eikonal
//! objective optimized over a corpus of scenes.

use ndarray::Array1;

use crate::field::{HybridField, LatentBank, Sdf, TapeField};
use crate::logs::{JsonlWriter, PriorEpochRecord};
use crate::optim::{Adam, Bags, Group, LiveSet, LrSchedule};
use crate::rng::SeedSpring;
use crate::samples::SurfaceSampleSet;
use crate::tape::{Gradients, Tape};
use crate::{Error, Result, V3};

/// Coarse-to-fine stage of the prior run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorStage {
    L4,
    L5,
    L6,
}

impl PriorStage {
    pub fn name(self) -> &'static str {
        match self {
            PriorStage::L4 => "l4",
            PriorStage::L5 => "l5",
            PriorStage::L6 => "l6",
        }
    }
}

/// Stage table: the first level trains jointly with the decoder and the
/// latents for `n` epochs, the second level alone for the next `2n`, the
/// third alone for the final `4n`. The encoding mask ramps linearly from
/// zero bands at epoch 0 to all bands at epoch `n/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSchedule {
    pub n: usize,
}

impl Default for PriorSchedule {
    fn default() -> Self {
        PriorSchedule { n: 100 }
    }
}

impl PriorSchedule {
    pub fn total_epochs(&self) -> usize {
        7 * self.n
    }

    pub fn stage(&self, epoch: usize) -> PriorStage {
        if epoch < self.n {
            PriorStage::L4
        } else if epoch < 3 * self.n {
            PriorStage::L5
        } else {
            PriorStage::L6
        }
    }

    pub fn live_groups(&self, epoch: usize) -> LiveSet {
        match self.stage(epoch) {
            PriorStage::L4 => [Group::GridL4, Group::Decoder, Group::Latent]
                .into_iter()
                .collect(),
            PriorStage::L5 => [Group::GridL5].into_iter().collect(),
            PriorStage::L6 => [Group::GridL6].into_iter().collect(),
        }
    }

    /// Grid levels participating in the forward pass (cumulative).
    pub fn active_levels(&self, epoch: usize, available: usize) -> usize {
        let by_stage = match self.stage(epoch) {
            PriorStage::L4 => 1,
            PriorStage::L5 => 2,
            PriorStage::L6 => 3,
        };
        by_stage.min(available)
    }

    /// Encoding progress: 0 bands at epoch 0, all bands from epoch `n/2` on.
    pub fn mask_alpha(&self, epoch: usize, full_alpha: f64) -> f64 {
        let ramp_end = (self.n / 2).max(1);
        if epoch >= ramp_end {
            full_alpha
        } else {
            full_alpha * epoch as f64 / ramp_end as f64
        }
    }
}

/// Objective weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorLossConfig {
    /// Embedding (latent + grid feature norm) weight.
    pub lambda0: f64,
    /// Eikonal weight.
    pub lambda1: f64,
    /// Spherical covariance of the latent prior.
    pub sigma_sq: f64,
    /// Optional normal supervision at surface points (0 disables; requires
    /// sample normals when nonzero).
    pub lambda_normal: f64,
}

impl Default for PriorLossConfig {
    fn default() -> Self {
        PriorLossConfig { lambda0: 0.1, lambda1: 0.1, sigma_sq: 1.0, lambda_normal: 0.0 }
    }
}

/// Epoch composition: `batches_per_scene` point batches per scene, each
/// with `surface_batch` on-surface and `off_batch` free-space points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorBatchConfig {
    pub batches_per_scene: usize,
    pub surface_batch: usize,
    pub off_batch: usize,
}

impl Default for PriorBatchConfig {
    fn default() -> Self {
        PriorBatchConfig { batches_per_scene: 16, surface_batch: 512, off_batch: 512 }
    }
}

// ---------------------------------------------------------------------------
// Plain (tape-free) objective terms, usable with any field.
// ---------------------------------------------------------------------------

/// Mean absolute signed distance over points meant to lie on the surface.
pub fn surface_loss_value(field: &dyn Sdf, pts: &[V3]) -> f64 {
    assert!(!pts.is_empty(), "surface loss needs points");
    field.eval_batch(pts).iter().map(|d| d.abs()).sum::<f64>() / pts.len() as f64
}

/// Mean squared deviation of the gradient norm from one.
pub fn eikonal_loss_value(field: &dyn Sdf, pts: &[V3]) -> f64 {
    assert!(!pts.is_empty(), "eikonal loss needs points");
    pts.iter()
        .map(|&p| {
            let r = field.grad(p).norm() - 1.0;
            r * r
        })
        .sum::<f64>()
        / pts.len() as f64
}

/// Per-point |gradient norm − 1| residuals (reporting helper).
pub fn eikonal_residuals(field: &dyn Sdf, pts: &[V3]) -> Vec<f64> {
    pts.iter().map(|&p| (field.grad(p).norm() - 1.0).abs()).collect()
}

/// Embedding regularizer: `(mean ‖z(x)‖ + ‖g‖) / σ²` with unsquared norms.
pub fn embedding_loss_value(
    field: &HybridField,
    g: Option<&Array1<f64>>,
    pts: &[V3],
    active_levels: usize,
    sigma_sq: f64,
) -> f64 {
    assert!(!pts.is_empty(), "embedding loss needs points");
    let z = field.features_plain(pts, active_levels);
    let mean_z = z
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / pts.len() as f64;
    let g_norm = g.map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>().sqrt());
    (mean_z + g_norm) / sigma_sq
}

/// Splits eikonal probes into interior points and a count of skipped ones.
/// A probe is skipped when any coordinate of any active grid level lands
/// exactly on a cell boundary (where the interpolant's derivative is
/// one-sided), including the domain faces.
pub fn split_off_boundary(
    field: &HybridField,
    pts: &[V3],
    active_levels: usize,
) -> (Vec<V3>, usize) {
    let mut interior = Vec::with_capacity(pts.len());
    let mut skipped = 0usize;
    let eps = 1e-9;
    'points: for &p in pts {
        for grid in field.grids.iter().take(active_levels) {
            let res = grid.resolution() as f64;
            for a in 0..3 {
                let u = (p[a] + 1.0) * 0.5 * res;
                if (u - u.round()).abs() < eps {
                    skipped += 1;
                    continue 'points;
                }
            }
        }
        interior.push(p);
    }
    (interior, skipped)
}

/// Per-level feature RMS (coarse-to-fine energy report).
pub fn level_feature_rms(field: &HybridField) -> Vec<f64> {
    field
        .grids
        .iter()
        .map(|g| (g.values.mapv(|v| v * v).mean().unwrap_or(0.0)).sqrt())
        .collect()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Trains the shared field and one latent per scene. Returns the per-epoch
/// records (also streamed to `log` when given). The field must be
/// geometric-initialized and the bank sized to the corpus.
#[allow(clippy::too_many_arguments)]
pub fn train_prior(
    field: &mut HybridField,
    bank: &mut LatentBank,
    corpus: &[SurfaceSampleSet],
    loss_cfg: &PriorLossConfig,
    batch_cfg: &PriorBatchConfig,
    schedule: &PriorSchedule,
    lr: &LrSchedule,
    spring: &SeedSpring,
    mut log: Option<&mut JsonlWriter>,
) -> Result<Vec<PriorEpochRecord>> {
    if corpus.is_empty() {
        return Err(Error::Config("prior training needs a nonempty corpus".into()));
    }
    if bank.scene_count() != corpus.len() {
        return Err(Error::Config(format!(
            "latent bank holds {} scenes, corpus has {}",
            bank.scene_count(),
            corpus.len()
        )));
    }
    for s in corpus {
        s.validate()?;
        if loss_cfg.lambda_normal != 0.0 && s.normals.is_none() {
            return Err(Error::Config(format!(
                "normal supervision requested but scene '{}' has no normals",
                s.scene_id
            )));
        }
    }

    let mut adam = Adam::new();
    let mut records = Vec::with_capacity(schedule.total_epochs());
    let full_alpha = field.pe.full_alpha();
    let scenes = corpus.len();

    for epoch in 0..schedule.total_epochs() {
        let stage = schedule.stage(epoch);
        let live = schedule.live_groups(epoch);
        let alpha = schedule.mask_alpha(epoch, full_alpha);
        let active = schedule.active_levels(epoch, field.level_count());
        let lr_now = lr.lr(epoch as u32);

        let mut sums = [0.0f64; 4]; // total, surface, embedding, eikonal
        let mut boundary_skipped = 0usize;

        for b in 0..batch_cfg.batches_per_scene {
            let mut merged = Gradients::default();
            for (i, scene) in corpus.iter().enumerate() {
                let mut rng = spring
                    .child("prior-batch", ((epoch * batch_cfg.batches_per_scene + b) * scenes + i) as u64)
                    .rng();
                let surf = draw(&scene.points, batch_cfg.surface_batch, &mut rng);
                let (surf, surf_normals) = match &scene.normals {
                    Some(ns) if loss_cfg.lambda_normal != 0.0 => {
                        let idx = draw_indices(scene.points.len(), batch_cfg.surface_batch, &mut rng);
                        (
                            idx.iter().map(|&k| scene.points[k]).collect::<Vec<_>>(),
                            Some(idx.iter().map(|&k| ns[k]).collect::<Vec<_>>()),
                        )
                    }
                    _ => (surf, None),
                };
                let off_raw = draw(&scene.off_surface, batch_cfg.off_batch, &mut rng);
                let (off, skipped) = split_off_boundary(field, &off_raw, active);
                boundary_skipped += skipped;
                if off.is_empty() {
                    return Err(Error::Numeric(format!(
                        "epoch {epoch} scene '{}': every eikonal probe sat on a grid plane",
                        scene.scene_id
                    )));
                }

                let (values, grads) = scene_batch_gradients(
                    field, bank, i, &live, alpha, active, &surf, surf_normals.as_deref(), &off,
                    loss_cfg,
                )?;
                if !values.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch} scene '{}' (terms {values:?})",
                        scene.scene_id
                    )));
                }
                for (s, v) in sums.iter_mut().zip(values) {
                    *s += v;
                }
                merged.accumulate(grads);
            }
            merged.scale(1.0 / scenes as f64);
            let mut bags = Bags::new(vec![&mut *field, &mut *bank]);
            adam.step(&mut bags, &merged, &live, lr_now);
        }

        let denom = (batch_cfg.batches_per_scene * scenes) as f64;
        let record = PriorEpochRecord {
            epoch,
            stage: stage.name().to_string(),
            live_groups: live.iter().map(|g| g.name().to_string()).collect(),
            loss_total: sums[0] / denom,
            loss_surface: sums[1] / denom,
            loss_embedding: sums[2] / denom,
            loss_eikonal: sums[3] / denom,
            lr: lr_now,
            mask_alpha: alpha,
            boundary_skipped,
        };
        if let Some(w) = log.as_deref_mut() {
            w.append(&record)?;
        }
        records.push(record);
    }
    Ok(records)
}

fn draw(pool: &[V3], n: usize, rng: &mut impl rand::Rng) -> Vec<V3> {
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

fn draw_indices(len: usize, n: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..len)).collect()
}

/// One scene-batch: builds the tape, returns `[total, surface, embedding,
/// eikonal]` values and the parameter gradients of the weighted total.
#[allow(clippy::too_many_arguments)]
fn scene_batch_gradients(
    field: &HybridField,
    bank: &LatentBank,
    scene_index: usize,
    live: &LiveSet,
    alpha: f64,
    active: usize,
    surf: &[V3],
    surf_normals: Option<&[V3]>,
    off: &[V3],
    cfg: &PriorLossConfig,
) -> Result<([f64; 4], Gradients)> {
    let mut t = Tape::new();
    let tf = TapeField::new(field, live)
        .with_latent(bank, scene_index)
        .with_progress(alpha, active);

    // Surface term (optionally with live gradients for normal supervision).
    let (l_surf, l_normal) = if let Some(ns) = surf_normals {
        let (d, grad) = tf.sdf_with_spatial_grad(&mut t, surf);
        let a = t.abs(d);
        let l_surf = t.mean_all(a);
        let refs = crate::render::v3s_to_array(ns);
        let l_n = crate::render::normal_loss(&mut t, grad, &refs, false);
        (l_surf, Some(l_n))
    } else {
        let d = tf.sdf(&mut t, surf);
        let a = t.abs(d);
        (t.mean_all(a), None)
    };

    // Embedding term at the surface points.
    let z = tf.grid_features(&mut t, surf);
    let zn = t.row_norm(z);
    let mean_z = t.mean_all(zn);
    let l_emb = match tf.latent_row(&mut t) {
        Some(g) => {
            let gn = t.row_norm(g);
            let gs = t.mean_all(gn);
            let sum = t.add(mean_z, gs);
            t.scale(sum, 1.0 / cfg.sigma_sq)
        }
        None => t.scale(mean_z, 1.0 / cfg.sigma_sq),
    };

    // Eikonal term at interior free-space points.
    let (_, grad_off) = tf.sdf_with_spatial_grad(&mut t, off);
    let gn = t.row_norm(grad_off);
    let r = t.add_scalar(gn, -1.0);
    let r2 = t.mul(r, r);
    let l_eik = t.mean_all(r2);

    let w_emb = t.scale(l_emb, cfg.lambda0);
    let w_eik = t.scale(l_eik, cfg.lambda1);
    let partial = t.add(l_surf, w_emb);
    let mut total = t.add(partial, w_eik);
    if let Some(l_n) = l_normal {
        let w_n = t.scale(l_n, cfg.lambda_normal);
        total = t.add(total, w_n);
    }

    let values = [
        t.scalar(total),
        t.scalar(l_surf),
        t.scalar(l_emb),
        t.scalar(l_eik),
    ];
    let grads = t.backward(total);
    Ok((values, grads))
}
