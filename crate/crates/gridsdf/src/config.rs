//! Run configuration: one flat key set covering every tunable, loadable
//! from a TOML file, overridable from command-line flags, with defaults
//! for everything. Precedence is fixed: a key set in the config file wins
//! over a flag, which wins over the built-in default — and the winning
//! source of every key is recorded so runs can log exactly what they used.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::field::FieldConfig;
use crate::intersect::Intersector;
use crate::mesh::MeshOptions;
use crate::optim::LrSchedule;
use crate::prior::{PriorBatchConfig, PriorLossConfig, PriorSchedule};
use crate::recon::ReconConfig;
use crate::render::{LossWeights, RenderConfig};
use crate::{Error, Result};

/// Where a key's effective value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    Flag,
    File,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::Flag => "flag",
            Source::File => "config",
        })
    }
}

macro_rules! run_config {
    ($($name:ident : $ty:ty = $default:expr),+ $(,)?) => {
        /// Every tunable of the crate, flattened. See the README for the
        /// meaning of each key.
        #[derive(Debug, Clone, PartialEq, Serialize)]
        pub struct RunConfig {
            $(pub $name: $ty,)+
        }

        /// A sparse overlay: only the keys present in the file or on the
        /// command line. Unknown keys are rejected at parse time.
        #[derive(Debug, Clone, Default, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct ConfigPatch {
            $(#[serde(default)] pub $name: Option<$ty>,)+
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($name: $default,)+ }
            }
        }

        impl RunConfig {
            /// Applies every key present in `patch`, recording `source` as
            /// its winner.
            pub fn apply(&mut self, patch: &ConfigPatch, source: Source, prov: &mut BTreeMap<String, Source>) {
                $(
                    if let Some(v) = &patch.$name {
                        self.$name = v.clone();
                        prov.insert(stringify!($name).to_string(), source);
                    }
                )+
            }

            /// One `key = value (source)` line per key, in declaration
            /// order.
            pub fn provenance_lines(&self, prov: &BTreeMap<String, Source>) -> Vec<String> {
                let mut out = Vec::new();
                $(
                    let value = serde_json::to_string(&self.$name)
                        .unwrap_or_else(|_| "?".to_string());
                    let source = prov
                        .get(stringify!($name))
                        .copied()
                        .unwrap_or(Source::Default);
                    out.push(format!("{} = {} ({})", stringify!($name), value, source));
                )+
                out
            }
        }
    };
}

run_config! {
    // Field geometry and decoder.
    levels: Vec<u32> = vec![4, 5, 6],
    feature_dim: usize = 8,
    pe_freqs: usize = 6,
    hidden: usize = 512,
    latent_dim: usize = 256,
    softplus_beta: f64 = 100.0,
    init_radius: f64 = 0.5,

    // Prior training.
    prior_epochs_per_stage: usize = 100,
    batches_per_scene: usize = 16,
    surface_batch: usize = 512,
    off_batch: usize = 512,
    lambda_embedding: f64 = 0.1,
    lambda_eikonal: f64 = 0.1,
    sigma_sq: f64 = 1.0,
    lambda_normal: f64 = 0.0,
    prior_lr: f64 = 1e-4,
    prior_lr_decay: f64 = 0.5,
    prior_lr_every: u32 = 50,

    // Reconstruction.
    recon_stage1_epochs: usize = 30,
    recon_total_epochs: usize = 100,
    rays_per_view: usize = 2048,
    recon_lr: f64 = 1e-4,
    mask_dilate: u32 = 8,
    weight_rgb: f64 = 1.0,
    weight_mask: f64 = 100.0,
    weight_normal: f64 = 1.0,
    use_normals: bool = true,

    // Ray intersection.
    intersector: String = "sampled".to_string(),
    coarse_samples: usize = 64,
    fine_steps: usize = 32,
    sphere_trace_steps: usize = 128,
    hit_tolerance: f64 = 1e-4,

    // Rendering networks.
    q_hidden: usize = 512,
    q_depth: usize = 8,
    q_skip_after: usize = 4,
    feature_len: usize = 256,
    q_pe_freqs: usize = 6,
    r_hidden: usize = 512,
    r_depth: usize = 4,
    r_pe_freqs: usize = 4,

    // Meshing and evaluation.
    mesh_resolution: usize = 256,
    mesh_prune: bool = true,
    mesh_coarse_factor: usize = 4,
    mesh_margin_scale: f64 = 2.0,
    chamfer_oversample: usize = 1_000_000,
    chamfer_min_spacing: f64 = 0.002,

    // Reproducibility.
    seed: u64 = 7,
}

/// Builds the effective configuration: defaults, then `cli` flags, then —
/// overriding both — the keys of `file` when given. Returns the config and
/// the per-key winning source.
pub fn resolve(
    file: Option<&Path>,
    cli: &ConfigPatch,
) -> Result<(RunConfig, BTreeMap<String, Source>)> {
    let mut cfg = RunConfig::default();
    let mut prov = BTreeMap::new();
    cfg.apply(cli, Source::Flag, &mut prov);
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
        let patch: ConfigPatch = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("parsing {}: {e}", path.display())))?;
        cfg.apply(&patch, Source::File, &mut prov);
    }
    cfg.validate()?;
    Ok((cfg, prov))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.intersector.as_str(), "sampled" | "sphere-trace") {
            return Err(Error::Config(format!(
                "intersector must be \"sampled\" or \"sphere-trace\" (got {:?})",
                self.intersector
            )));
        }
        if self.recon_stage1_epochs > self.recon_total_epochs {
            return Err(Error::Config(format!(
                "recon_stage1_epochs ({}) exceeds recon_total_epochs ({})",
                self.recon_stage1_epochs, self.recon_total_epochs
            )));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("levels must not be empty".into()));
        }
        Ok(())
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            levels: self.levels.clone(),
            feature_dim: self.feature_dim,
            pe_freqs: self.pe_freqs,
            hidden: self.hidden,
            latent_dim: self.latent_dim,
            softplus_beta: self.softplus_beta,
            init_radius: self.init_radius,
        }
    }

    pub fn prior_schedule(&self) -> PriorSchedule {
        PriorSchedule { n: self.prior_epochs_per_stage }
    }

    pub fn prior_loss(&self) -> PriorLossConfig {
        PriorLossConfig {
            lambda0: self.lambda_embedding,
            lambda1: self.lambda_eikonal,
            sigma_sq: self.sigma_sq,
            lambda_normal: self.lambda_normal,
        }
    }

    pub fn prior_batches(&self) -> PriorBatchConfig {
        PriorBatchConfig {
            batches_per_scene: self.batches_per_scene,
            surface_batch: self.surface_batch,
            off_batch: self.off_batch,
        }
    }

    pub fn prior_lr_schedule(&self) -> LrSchedule {
        LrSchedule::StepDecay {
            base: self.prior_lr,
            factor: self.prior_lr_decay,
            every: self.prior_lr_every,
        }
    }

    pub fn chosen_intersector(&self) -> Intersector {
        match self.intersector.as_str() {
            "sampled" => Intersector::Sampled {
                n_coarse: self.coarse_samples,
                n_fine: self.fine_steps,
            },
            _ => Intersector::SphereTrace { max_steps: self.sphere_trace_steps },
        }
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            stage1_epochs: self.recon_stage1_epochs,
            total_epochs: self.recon_total_epochs,
            rays_per_view: self.rays_per_view,
            lr: self.recon_lr,
            mask_dilate: self.mask_dilate,
            weights: LossWeights {
                rgb: self.weight_rgb,
                mask: self.weight_mask,
                normal: self.weight_normal,
            },
            use_normals: self.use_normals,
            intersector: self.chosen_intersector(),
            tol: self.hit_tolerance,
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            q_hidden: self.q_hidden,
            q_depth: self.q_depth,
            q_skip_after: self.q_skip_after,
            feature_len: self.feature_len,
            q_pe_freqs: self.q_pe_freqs,
            r_hidden: self.r_hidden,
            r_depth: self.r_depth,
            r_pe_freqs: self.r_pe_freqs,
            softplus_beta: self.softplus_beta,
        }
    }

    pub fn mesh_options(&self) -> MeshOptions {
        MeshOptions {
            resolution: self.mesh_resolution,
            prune: self.mesh_prune,
            coarse_factor: self.mesh_coarse_factor,
            margin_scale: self.mesh_margin_scale,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_agree_with_module_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.field_config(), FieldConfig::default());
        assert_eq!(cfg.render_config(), RenderConfig::default());
        assert_eq!(cfg.recon_config(), ReconConfig::default());
        assert_eq!(cfg.mesh_options(), MeshOptions::default());
        assert_eq!(cfg.prior_schedule(), PriorSchedule::default());
        assert_eq!(cfg.prior_loss(), PriorLossConfig::default());
        assert_eq!(cfg.prior_batches(), PriorBatchConfig::default());
        assert_eq!(
            cfg.chosen_intersector(),
            Intersector::Sampled { n_coarse: 64, n_fine: 32 }
        );
    }

    #[test]
    fn file_beats_flag_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "hidden = 128\nseed = 99\n").unwrap();

        let cli = ConfigPatch {
            hidden: Some(64),
            rays_per_view: Some(512),
            ..ConfigPatch::default()
        };
        let (cfg, prov) = resolve(Some(&path), &cli).unwrap();
        assert_eq!(cfg.hidden, 128, "file must override the flag");
        assert_eq!(cfg.rays_per_view, 512, "flag must override the default");
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.latent_dim, 256, "untouched keys keep defaults");

        assert_eq!(prov.get("hidden"), Some(&Source::File));
        assert_eq!(prov.get("rays_per_view"), Some(&Source::Flag));
        assert_eq!(prov.get("seed"), Some(&Source::File));
        assert_eq!(prov.get("latent_dim"), None);

        let lines = cfg.provenance_lines(&prov);
        assert!(lines.iter().any(|l| l == "hidden = 128 (config)"), "{lines:?}");
        assert!(lines.iter().any(|l| l == "rays_per_view = 512 (flag)"));
        assert!(lines.iter().any(|l| l == "latent_dim = 256 (default)"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "hiddenn = 128\n").unwrap();
        match resolve(Some(&path), &ConfigPatch::default()) {
            Err(Error::Config(msg)) => assert!(msg.contains("hiddenn"), "{msg}"),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.intersector = "asdf".into();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.recon_stage1_epochs = 500;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.levels.clear();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.intersector = "sphere-trace".into();
        cfg.sphere_trace_steps = 99;
        assert_eq!(cfg.chosen_intersector(), Intersector::SphereTrace { max_steps: 99 });
    }

    #[test]
    fn full_dump_round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.hidden = 96;
        cfg.intersector = "sphere-trace".into();
        let text = toml::to_string(&cfg).unwrap();
        let patch: ConfigPatch = toml::from_str(&text).unwrap();
        let mut rebuilt = RunConfig::default();
        let mut prov = BTreeMap::new();
        rebuilt.apply(&patch, Source::File, &mut prov);
        assert_eq!(rebuilt, cfg);
        // Every key should be present in a full dump.
        assert_eq!(prov.len(), cfg.provenance_lines(&prov).len());
    }
}
