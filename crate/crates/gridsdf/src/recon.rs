//! Posed-image reconstruction: optimizes a fresh scene latent (and then
//! the whole field) against rendered RGB / mask / normal supervision, with
//! every surface interaction routed through the differentiable-hit
//! reparameterization. No eikonal term runs here; the log stream records
//! that invariant explicitly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::chamfer::ChamferReport;
use crate::field::{HybridField, LatentBank, SceneSdf, TapeField};
use crate::intersect::{intersect_batch, Intersector, TraceConfig};
use crate::logs::{JsonlWriter, ReconEpochRecord};
use crate::optim::{Adam, Bags, Group, LiveSet};
use crate::render::{
    differentiable_hits, mask_loss, normal_loss, rgb_loss, LossWeights, RenderNets, RenderTape,
    MASK_ALPHA,
};
use crate::rng::SeedSpring;
use crate::synth::SceneBundle;
use crate::tape::Tape;
use crate::{Error, Result, V3};

/// Reconstruction hyperparameters. Stage 1 (`stage1_epochs`) keeps the
/// decoder frozen while the latent, grids, and rendering networks adapt;
/// stage 2 unfreezes everything until `total_epochs`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    pub stage1_epochs: usize,
    pub total_epochs: usize,
    /// Rays drawn per view per epoch (from the dilated mask region).
    pub rays_per_view: usize,
    /// Constant learning rate; reconstruction runs too few epochs for a
    /// decay step to engage.
    pub lr: f64,
    /// Chebyshev radius (pixels) of the mask dilation that defines the
    /// ray-sampling region.
    pub mask_dilate: u32,
    pub weights: LossWeights,
    /// Use the bundle's normal maps as supervision when present.
    pub use_normals: bool,
    pub intersector: Intersector,
    pub tol: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            stage1_epochs: 30,
            total_epochs: 100,
            rays_per_view: 2048,
            lr: 1e-4,
            mask_dilate: 8,
            weights: LossWeights::default(),
            use_normals: true,
            intersector: Intersector::Sampled { n_coarse: 64, n_fine: 32 },
            tol: 1e-4,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "stage 1 ({}) cannot exceed the total epoch count ({})",
                self.stage1_epochs, self.total_epochs
            )));
        }
        if self.rays_per_view == 0 || self.total_epochs == 0 {
            return Err(Error::Config("ray and epoch budgets must be positive".into()));
        }
        Ok(())
    }

    pub fn stage(&self, epoch: usize) -> u8 {
        if epoch < self.stage1_epochs {
            1
        } else {
            2
        }
    }

    pub fn live_groups(&self, epoch: usize) -> LiveSet {
        let mut live: LiveSet = [
            Group::GridL4,
            Group::GridL5,
            Group::GridL6,
            Group::Latent,
            Group::RenderQ,
            Group::RenderR,
        ]
        .into_iter()
        .collect();
        if self.stage(epoch) == 2 {
            live.insert(Group::Decoder);
        }
        live
    }
}

/// Binary dilation by a Chebyshev ball: a pixel is set when any set pixel
/// of `mask` lies within `radius` along both axes. Separable two-pass
/// implementation (rows, then columns).
pub fn dilate_mask(mask: &[bool], width: u32, height: u32, radius: u32) -> Vec<bool> {
    let (w, h, r) = (width as usize, height as usize, radius as usize);
    assert_eq!(mask.len(), w * h, "mask length does not match the image");
    let mut pass = vec![false; mask.len()];
    for y in 0..h {
        let row = &mask[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            pass[y * w + x] = row[lo..=hi].iter().any(|&m| m);
        }
    }
    let mut out = vec![false; mask.len()];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).any(|yy| pass[yy * w + x]);
        }
    }
    out
}

/// The optimized state handed back by a reconstruction run.
#[derive(Debug, Clone)]
pub struct ReconResult {
    /// The scene latent after optimization.
    pub latent: Array1<f64>,
    pub records: Vec<ReconEpochRecord>,
}

struct RayBatch {
    rays: Vec<crate::camera::Ray>,
    /// Targets in the radiance range [-1, 1], one row per ray.
    targets: Array2<f64>,
    in_mask: Vec<bool>,
    /// World-space reference normals for in-mask pixels.
    normals: Vec<Option<V3>>,
}

fn sample_view_batch(
    bundle: &SceneBundle,
    view: usize,
    candidates: &[usize],
    n: usize,
    rng: &mut impl rand::Rng,
) -> RayBatch {
    let data = &bundle.views[view];
    let w = bundle.manifest.width;
    let rot = data.camera.rotation_matrix();
    let mut rays = Vec::with_capacity(n);
    let mut targets = Array2::zeros((n, 3));
    let mut in_mask = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for k in 0..n {
        let pix = candidates[rng.gen_range(0..candidates.len())];
        let (u, v) = (pix as u32 % w, pix as u32 / w);
        rays.push(data.camera.ray(u, v));
        for c in 0..3 {
            targets[[k, c]] = 2.0 * data.rgb[pix][c] - 1.0;
        }
        in_mask.push(data.mask[pix]);
        normals.push(data.normal_cam[pix].map(|nc| rot * nc));
    }
    RayBatch { rays, targets, in_mask, normals }
}

/// Optimizes `field` + a fresh zero latent + `render` against the bundle.
/// The field should come from a trained prior checkpoint; `render` is
/// typically freshly initialized. Returns the scene latent and the
/// per-epoch records (streamed to `log` when given).
pub fn reconstruct(
    field: &mut HybridField,
    render: &mut RenderNets,
    bundle: &SceneBundle,
    cfg: &ReconConfig,
    spring: &SeedSpring,
    mut log: Option<&mut JsonlWriter>,
) -> Result<ReconResult> {
    cfg.validate()?;
    if bundle.views.is_empty() {
        return Err(Error::Config("the scene bundle holds no views".into()));
    }
    let (w, h) = (bundle.manifest.width, bundle.manifest.height);
    let mut candidates: Vec<Vec<usize>> = Vec::with_capacity(bundle.views.len());
    for (i, view) in bundle.views.iter().enumerate() {
        let region = dilate_mask(&view.mask, w, h, cfg.mask_dilate);
        let c: Vec<usize> = region
            .iter()
            .enumerate()
            .filter_map(|(p, &m)| m.then_some(p))
            .collect();
        if c.is_empty() {
            return Err(Error::Config(format!("view {i} has an empty mask")));
        }
        candidates.push(c);
    }
    let has_normals = cfg.use_normals
        && bundle
            .views
            .iter()
            .all(|v| v.normal_cam.iter().any(|n| n.is_some()));

    let mut bank = LatentBank::zeros(1, field.config.latent_dim);
    let mut adam = Adam::new();
    let mut records = Vec::with_capacity(cfg.total_epochs);
    let n_views = bundle.views.len();
    let full_alpha = field.pe.full_alpha();
    let all_levels = field.level_count();
    let trace = TraceConfig { intersector: cfg.intersector, tol: cfg.tol, near: 0.0 };

    for epoch in 0..cfg.total_epochs {
        let live = cfg.live_groups(epoch);
        let mut loss_sums = [0.0f64; 4]; // total, rgb, mask, normal
        let mut epoch_hits = 0usize;
        let mut epoch_grazing = 0usize;

        for v in 0..n_views {
            let mut rng = spring.child("recon-rays", (epoch * n_views + v) as u64).rng();
            let batch =
                sample_view_batch(bundle, v, &candidates[v], cfg.rays_per_view, &mut rng);

            // Everything that borrows the field lives in this block; the
            // gradients it returns are owned.
            let (values, grads, n_hits, n_grazing) = {
                let view_sdf = SceneSdf::full(field, Some(bank.row(0)));
                let outcomes = intersect_batch(&view_sdf, &batch.rays, &trace);

                // Surface rays (hit and labeled inside) carry RGB and
                // normal supervision; every other ray contributes to the
                // mask term at its point of closest approach.
                let mut surf_idx = Vec::new();
                let mut mask_pts = Vec::new();
                let mut mask_labels = Vec::new();
                for (i, out) in outcomes.iter().enumerate() {
                    match (&out.hit, batch.in_mask[i]) {
                        (Some(_), true) => surf_idx.push(i),
                        _ => {
                            mask_pts.push(batch.rays[i].at(out.t_at_min));
                            mask_labels.push(if batch.in_mask[i] { 1.0 } else { 0.0 });
                        }
                    }
                }

                let mut t = Tape::new();
                let tf = TapeField::new(field, &live)
                    .with_latent(&bank, 0)
                    .with_progress(full_alpha, all_levels);

                let mut terms: Vec<(crate::tape::Var, f64)> = Vec::new();
                let mut vals = [0.0f64; 3]; // rgb, mask, normal
                let mut n_hits = 0usize;
                let mut n_grazing = 0usize;

                if !surf_idx.is_empty() {
                    let x0: Vec<V3> = surf_idx
                        .iter()
                        .map(|&i| outcomes[i].hit.as_ref().unwrap().x)
                        .collect();
                    let dirs: Vec<V3> = surf_idx.iter().map(|&i| batch.rays[i].dir).collect();
                    let dh = differentiable_hits(&mut t, &tf, &view_sdf, &x0, &dirs);
                    n_grazing = dh.grazing_dropped;
                    n_hits = dh.kept.len();
                    if !dh.kept.is_empty() {
                        let rows: Vec<usize> = dh.kept.iter().map(|&k| surf_idx[k]).collect();
                        let mut targets = Array2::zeros((rows.len(), 3));
                        let mut views_arr = Array2::zeros((rows.len(), 3));
                        for (r, &i) in rows.iter().enumerate() {
                            for c in 0..3 {
                                targets[[r, c]] = batch.targets[[i, c]];
                                views_arr[[r, c]] = batch.rays[i].dir[c];
                            }
                        }
                        let rt = RenderTape { nets: render, live: &live };
                        let pred = rt.radiance(&mut t, dh.x, &dh.normals, &views_arr);
                        let l_rgb = rgb_loss(&mut t, pred, &targets);
                        vals[0] = t.scalar(l_rgb);
                        terms.push((l_rgb, cfg.weights.rgb));

                        if has_normals {
                            let mut refs = Array2::zeros((rows.len(), 3));
                            for (r, &i) in rows.iter().enumerate() {
                                let n = batch.normals[i].ok_or_else(|| {
                                    Error::Config(format!(
                                        "view {v} lacks a normal on an in-mask pixel"
                                    ))
                                })?;
                                for c in 0..3 {
                                    refs[[r, c]] = n[c];
                                }
                            }
                            let l_n = normal_loss(&mut t, dh.grad_live, &refs, false);
                            vals[2] = t.scalar(l_n);
                            terms.push((l_n, cfg.weights.normal));
                        }
                    }
                }

                if !mask_pts.is_empty() {
                    let d_min = tf.sdf(&mut t, &mask_pts);
                    let labels =
                        Array2::from_shape_vec((mask_labels.len(), 1), mask_labels.clone())
                            .expect("label shape");
                    let l_mask = mask_loss(&mut t, d_min, &labels, MASK_ALPHA);
                    vals[1] = t.scalar(l_mask);
                    terms.push((l_mask, cfg.weights.mask));
                }

                if terms.is_empty() {
                    (None, None, n_hits, n_grazing)
                } else {
                    let mut total = {
                        let (var, weight) = terms[0];
                        t.scale(var, weight)
                    };
                    for &(var, weight) in &terms[1..] {
                        let wv = t.scale(var, weight);
                        total = t.add(total, wv);
                    }
                    let total_val = t.scalar(total);
                    if !total_val.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite loss at epoch {epoch} view {v} (terms {vals:?})"
                        )));
                    }
                    (Some([total_val, vals[0], vals[1], vals[2]]), Some(t.backward(total)), n_hits, n_grazing)
                }
            };

            epoch_hits += n_hits;
            epoch_grazing += n_grazing;
            if let (Some(vals), Some(grads)) = (values, grads) {
                for (s, v) in loss_sums.iter_mut().zip(vals) {
                    *s += v;
                }
                let mut bags = Bags::new(vec![&mut *field, &mut bank, &mut *render]);
                adam.step(&mut bags, &grads, &live, cfg.lr);
            }
        }

        if epoch_hits == 0 {
            return Err(Error::Numeric(format!(
                "epoch {epoch}: no usable surface hits across {n_views} views x {} rays; \
                 the field's surface does not reach the supervised region",
                cfg.rays_per_view
            )));
        }

        let record = ReconEpochRecord {
            epoch,
            stage: cfg.stage(epoch),
            live_groups: live.iter().map(|g| g.name().to_string()).collect(),
            loss_total: loss_sums[0] / n_views as f64,
            loss_rgb: loss_sums[1] / n_views as f64,
            loss_mask: loss_sums[2] / n_views as f64,
            loss_normal: loss_sums[3] / n_views as f64,
            eikonal_grad_norm: 0.0,
            hit_rays: epoch_hits,
            grazing_dropped: epoch_grazing,
            lr: cfg.lr,
        };
        if let Some(w) = log.as_deref_mut() {
            w.append(&record)?;
        }
        records.push(record);
    }

    Ok(ReconResult { latent: bank.row(0), records })
}

// ---------------------------------------------------------------------------
// Run reports
// ---------------------------------------------------------------------------

/// Deterministic summary of a reconstruction or evaluation run. Everything
/// in here must be reproducible bit-for-bit under a fixed seed; wall-clock
/// measurements belong in [`Timings`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub scene: String,
    pub views_used: usize,
    pub epochs: usize,
    pub final_loss_total: f64,
    pub final_loss_rgb: f64,
    pub final_loss_mask: f64,
    pub final_loss_normal: f64,
    pub mesh_vertices: usize,
    pub mesh_faces: usize,
    pub chamfer: Option<ChamferReport>,
}

/// Wall-clock measurements, kept out of the deterministic report so that
/// `report.json` can be compared byte-for-byte across reruns.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct Timings {
    pub seconds: BTreeMap<String, f64>,
}

impl Timings {
    pub fn record(&mut self, label: &str, seconds: f64) {
        self.seconds.insert(label.to_string(), seconds);
    }
}

/// Writes `report.json` (deterministic) and `timings.json` (wall clock)
/// into `dir`.
pub fn write_reports(dir: &Path, report: &RunReport, timings: &Timings) -> Result<()> {
    fs::create_dir_all(dir)?;
    let rj = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Io(format!("encoding report: {e}")))?;
    fs::write(dir.join("report.json"), rj)?;
    let tj = serde_json::to_string_pretty(timings)
        .map_err(|e| Error::Io(format!("encoding timings: {e}")))?;
    fs::write(dir.join("timings.json"), tj)?;
    Ok(())
}
