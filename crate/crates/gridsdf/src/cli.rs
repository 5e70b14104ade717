//! Command-line drivers: prior training, scene synthesis, reconstruction,
//! mesh evaluation, intersector benchmarking, and gradient verification.
//!
//! Every training command accepts `--config FILE` plus a curated set of
//! flags; keys from the file override flags, which override defaults, and
//! the winning source of every key is echoed at startup.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{resolve, ConfigPatch, RunConfig};
use crate::field::{HybridField, LatentBank, SceneSdf};
use crate::intersect::{bench_intersector, compare_outcomes, Intersector, TraceConfig};
use crate::logs::JsonlWriter;
use crate::mesh::{extract_mesh, TriMesh};
use crate::prior::train_prior;
use crate::recon::{reconstruct, write_reports, RunReport, Timings};
use crate::render::RenderNets;
use crate::rng::SeedSpring;
use crate::samples::{load_corpus_dir, sample_analytic_surface};
use crate::synth::{bench_scenes, synthesize, SceneBundle, SceneManifest, SynthSpec};
use crate::{Error, Result};

/// Ground-truth surface samples drawn when a reconstruction is scored
/// against the analytic scene recorded in its bundle manifest.
const GT_SAMPLES: usize = 20_000;

#[derive(Debug, Parser)]
#[command(
    name = "gridsdf",
    version,
    about = "Hybrid voxel-grid + MLP signed distance fields: priors, rendering, reconstruction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the shared shape prior over a corpus of surface sample sets.
    TrainPrior(TrainPriorArgs),
    /// Reconstruct a scene bundle into a mesh, warm-started from a prior.
    Reconstruct(ReconstructArgs),
    /// Render a synthetic scene bundle: images, masks, normals, manifest.
    SynthScene(SynthSceneArgs),
    /// Score a mesh against an analytic ground-truth scene manifest.
    Eval(EvalArgs),
    /// Benchmark both ray intersectors over the stock analytic scenes.
    BenchIntersect(BenchIntersectArgs),
    /// Verify every gradient path against finite differences.
    Gradcheck(GradcheckArgs),
}

/// Configuration inputs shared by the heavier subcommands.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// TOML run-configuration file; its keys override the flags below.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic stage.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Decoder hidden width.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Per-scene latent length.
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Grid levels (cells per axis = 2^level), e.g. `--levels 4,5,6`.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<u32>>,
    /// Prior epochs per schedule unit; the full run is 7x this.
    #[arg(long)]
    pub epochs_per_stage: Option<usize>,
    /// Batches drawn per scene per prior epoch.
    #[arg(long)]
    pub batches_per_scene: Option<usize>,
    /// On-surface samples per prior batch.
    #[arg(long)]
    pub surface_batch: Option<usize>,
    /// Free-space samples per prior batch.
    #[arg(long)]
    pub off_batch: Option<usize>,
    /// Rays sampled per view per reconstruction epoch.
    #[arg(long)]
    pub rays_per_view: Option<usize>,
    /// Reconstruction epochs with the decoder frozen.
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    /// Total reconstruction epochs.
    #[arg(long)]
    pub recon_epochs: Option<usize>,
    /// Root finder: "sampled" or "sphere-trace".
    #[arg(long)]
    pub intersector: Option<String>,
    /// Iso-surface lattice resolution.
    #[arg(long)]
    pub mesh_resolution: Option<usize>,
    /// Supervise rendered normals during reconstruction.
    #[arg(long)]
    pub use_normals: Option<bool>,
}

impl ConfigArgs {
    fn patch(&self) -> ConfigPatch {
        ConfigPatch {
            seed: self.seed,
            hidden: self.hidden,
            latent_dim: self.latent_dim,
            levels: self.levels.clone(),
            prior_epochs_per_stage: self.epochs_per_stage,
            batches_per_scene: self.batches_per_scene,
            surface_batch: self.surface_batch,
            off_batch: self.off_batch,
            rays_per_view: self.rays_per_view,
            recon_stage1_epochs: self.stage1_epochs,
            recon_total_epochs: self.recon_epochs,
            intersector: self.intersector.clone(),
            mesh_resolution: self.mesh_resolution,
            use_normals: self.use_normals,
            ..ConfigPatch::default()
        }
    }

    fn resolve(&self) -> Result<RunConfig> {
        let (cfg, prov) = resolve(self.config.as_deref(), &self.patch())?;
        println!("configuration:");
        for line in cfg.provenance_lines(&prov) {
            println!("  {line}");
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainPriorArgs {
    /// Directory of per-scene sample-set JSON files.
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    /// Output checkpoint path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Per-epoch JSONL log (defaults to `<out>.jsonl`).
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Scene bundle directory produced by `synth-scene`.
    #[arg(long, value_name = "DIR")]
    pub scene: PathBuf,
    /// Prior checkpoint from `train-prior`; omit to fit from scratch.
    #[arg(long, value_name = "FILE")]
    pub prior: Option<PathBuf>,
    /// Number of views to use (1, 3, or 6; the first N in rig order).
    #[arg(long, default_value_t = 6)]
    pub views: usize,
    /// Output directory for the mesh, reports, logs, and checkpoint.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Per-epoch JSONL log (defaults to `<out>/recon.jsonl`).
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SynthSceneArgs {
    /// Scene specification JSON; omit for the stock two-lobe scene.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Output bundle directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Override the view count of the spec (1, 3, or 6).
    #[arg(long)]
    pub views: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth scene manifest (`scene.json` from `synth-scene`).
    #[arg(long, value_name = "FILE")]
    pub gt: PathBuf,
    /// Mesh to score, as OBJ.
    #[arg(long, value_name = "FILE")]
    pub mesh: PathBuf,
    /// Where to write `eval.json`; omit to only print the result.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Ground-truth surface samples to draw.
    #[arg(long, default_value_t = GT_SAMPLES)]
    pub gt_samples: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct BenchIntersectArgs {
    /// Rays per scene.
    #[arg(long, default_value_t = 10_000)]
    pub rays: usize,
    /// CSV output path; omit to print the rows.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Randomized trials per check.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// Parses `std::env::args` and runs the requested subcommand.
pub fn run() -> Result<()> {
    dispatch(Cli::parse())
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainPrior(a) => run_train_prior(&a),
        Command::Reconstruct(a) => run_reconstruct(&a),
        Command::SynthScene(a) => run_synth_scene(&a),
        Command::Eval(a) => run_eval(&a),
        Command::BenchIntersect(a) => run_bench_intersect(&a),
        Command::Gradcheck(a) => run_gradcheck(&a),
    }
}

fn run_train_prior(args: &TrainPriorArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let corpus = load_corpus_dir(&args.corpus)?;
    println!("corpus: {} scenes from {}", corpus.len(), args.corpus.display());

    let spring = SeedSpring::new(cfg.seed);
    let mut field =
        HybridField::geometric_init(cfg.field_config(), &mut spring.child("field-init", 0).rng());
    let mut bank = LatentBank::zeros(corpus.len(), cfg.latent_dim);

    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("jsonl"));
    let mut log = JsonlWriter::create(&log_path)?;
    let records = train_prior(
        &mut field,
        &mut bank,
        &corpus,
        &cfg.prior_loss(),
        &cfg.prior_batches(),
        &cfg.prior_schedule(),
        &cfg.prior_lr_schedule(),
        &spring,
        Some(&mut log),
    )?;

    let latents = corpus
        .iter()
        .enumerate()
        .map(|(i, set)| (set.scene_id.clone(), bank.z.row(i).to_vec()))
        .collect();
    let ckpt = Checkpoint { field, latents, render: None };
    ckpt.save(&args.out)?;

    let last = records.last().expect("training produced no epochs");
    println!(
        "trained {} epochs; final loss {:.6} (surface {:.6}, eikonal {:.6})",
        records.len(),
        last.loss_total,
        last.loss_surface,
        last.loss_eikonal
    );
    println!("checkpoint: {}", args.out.display());
    println!("log: {}", log_path.display());
    Ok(())
}

fn run_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let mut bundle = SceneBundle::load(&args.scene)?;
    if !matches!(args.views, 1 | 3 | 6) {
        return Err(Error::Config(format!("--views must be 1, 3, or 6 (got {})", args.views)));
    }
    if args.views > bundle.views.len() {
        return Err(Error::Config(format!(
            "bundle holds {} views but --views {} was requested",
            bundle.views.len(),
            args.views
        )));
    }
    bundle.views.truncate(args.views);

    let spring = SeedSpring::new(cfg.seed);
    let mut field = match &args.prior {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            println!(
                "prior: {} ({} scene latents)",
                path.display(),
                ckpt.latents.len()
            );
            ckpt.field
        }
        None => {
            println!("prior: none (fitting from scratch)");
            HybridField::geometric_init(
                cfg.field_config(),
                &mut spring.child("field-init", 0).rng(),
            )
        }
    };
    let mut render =
        RenderNets::init(cfg.render_config(), &mut spring.child("render-init", 0).rng());

    std::fs::create_dir_all(&args.out)?;
    let log_path = args.log.clone().unwrap_or_else(|| args.out.join("recon.jsonl"));
    let mut log = JsonlWriter::create(&log_path)?;

    let mut timings = Timings::default();
    let t0 = std::time::Instant::now();
    let result = reconstruct(
        &mut field,
        &mut render,
        &bundle,
        &cfg.recon_config(),
        &spring,
        Some(&mut log),
    )?;
    timings.record("reconstruct", t0.elapsed().as_secs_f64());

    let t0 = std::time::Instant::now();
    let sdf = SceneSdf::full(&field, Some(result.latent.clone()));
    let mesh = extract_mesh(&sdf, &cfg.mesh_options())?;
    timings.record("mesh", t0.elapsed().as_secs_f64());
    let mesh_path = args.out.join("mesh.obj");
    mesh.save_obj(&mesh_path)?;

    let t0 = std::time::Instant::now();
    let gt_scene = bundle.manifest.scene();
    let mut rng = spring.child("eval-gt", 0).rng();
    let gt = sample_analytic_surface(&gt_scene, GT_SAMPLES, &mut rng).0;
    let chamfer = crate::chamfer::chamfer_to_mesh(
        &gt,
        &mesh,
        cfg.chamfer_oversample,
        cfg.chamfer_min_spacing,
        &mut rng,
    )?;
    timings.record("chamfer", t0.elapsed().as_secs_f64());

    let last = result.records.last().expect("reconstruction produced no epochs");
    let scene_name = args
        .scene
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| args.scene.display().to_string());
    let report = RunReport {
        scene: scene_name,
        views_used: args.views,
        epochs: result.records.len(),
        final_loss_total: last.loss_total,
        final_loss_rgb: last.loss_rgb,
        final_loss_mask: last.loss_mask,
        final_loss_normal: last.loss_normal,
        mesh_vertices: mesh.vertices.len(),
        mesh_faces: mesh.faces.len(),
        chamfer: Some(chamfer),
    };
    write_reports(&args.out, &report, &timings)?;

    let ckpt = Checkpoint {
        field,
        latents: vec![(report.scene.clone(), result.latent.to_vec())],
        render: Some(render),
    };
    ckpt.save(&args.out.join("recon.ckpt"))?;

    println!(
        "reconstructed from {} views in {} epochs; final loss {:.6}",
        args.views,
        report.epochs,
        report.final_loss_total
    );
    println!(
        "mesh: {} ({} vertices, {} faces); chamfer {:.6}",
        mesh_path.display(),
        report.mesh_vertices,
        report.mesh_faces,
        chamfer.value
    );
    println!("reports: {}", args.out.display());
    Ok(())
}

fn run_synth_scene(args: &SynthSceneArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => load_synth_spec(path)?,
        None => SynthSpec::default(),
    };
    if let Some(v) = args.views {
        spec.views = v;
    }
    spec.validate()?;
    let manifest = synthesize(&spec, &args.out)?;
    println!(
        "wrote {} views ({}x{}) to {}",
        manifest.cameras.len(),
        manifest.width,
        manifest.height,
        args.out.display()
    );
    Ok(())
}

fn load_synth_spec(path: &Path) -> Result<SynthSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("parsing {}: {e}", path.display())))
}

/// What `eval` writes: the distance result plus enough bookkeeping to
/// interpret it.
#[derive(Debug, Serialize)]
struct EvalReport {
    chamfer: crate::chamfer::ChamferReport,
    gt_samples: usize,
    mesh_vertices: usize,
    mesh_faces: usize,
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let text = std::fs::read_to_string(&args.gt)
        .map_err(|e| Error::Io(format!("reading {}: {e}", args.gt.display())))?;
    let manifest: SceneManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("parsing {}: {e}", args.gt.display())))?;
    let mesh = TriMesh::load_obj(&args.mesh)?;

    let mut rng = SeedSpring::new(cfg.seed).child("eval-gt", 0).rng();
    let gt = sample_analytic_surface(&manifest.scene(), args.gt_samples, &mut rng).0;
    let chamfer = crate::chamfer::chamfer_to_mesh(
        &gt,
        &mesh,
        cfg.chamfer_oversample,
        cfg.chamfer_min_spacing,
        &mut rng,
    )?;

    let report = EvalReport {
        chamfer,
        gt_samples: args.gt_samples,
        mesh_vertices: mesh.vertices.len(),
        mesh_faces: mesh.faces.len(),
    };
    println!(
        "chamfer {:.6} ({} gt samples vs {} mesh samples)",
        report.chamfer.value, report.gt_samples, report.chamfer.recon_samples
    );
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("eval.json");
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Io(format!("encoding eval report: {e}")))?;
        std::fs::write(&path, json)?;
        println!("report: {}", path.display());
    }
    Ok(())
}

fn run_bench_intersect(args: &BenchIntersectArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    if args.rays == 0 {
        return Err(Error::Config("--rays must be positive".into()));
    }
    let rays = rig_rays(args.rays)?;

    let sampled = TraceConfig {
        intersector: Intersector::Sampled {
            n_coarse: cfg.coarse_samples,
            n_fine: cfg.fine_steps,
        },
        tol: cfg.hit_tolerance,
        near: 0.0,
    };
    let traced = TraceConfig {
        intersector: Intersector::SphereTrace { max_steps: cfg.sphere_trace_steps },
        tol: cfg.hit_tolerance,
        near: 0.0,
    };

    let mut csv = String::from(crate::intersect::BenchRow::CSV_HEADER);
    csv.push('\n');
    for (name, scene) in bench_scenes() {
        let (row_s, out_s) =
            bench_intersector(&scene, &rays, &sampled, &format!("{name}/sampled"));
        let (row_t, out_t) =
            bench_intersector(&scene, &rays, &traced, &format!("{name}/sphere-trace"));
        let agree = compare_outcomes(&out_s, &out_t);
        println!(
            "{name}: agreement {:.4}% over {} rays, max |dt| {:.2e}, speed ratio {:.2}x",
            100.0 * agree.agreement_rate(),
            agree.rays,
            agree.max_dt,
            row_s.rays_per_sec / row_t.rays_per_sec.max(1e-12)
        );
        csv.push_str(&row_s.to_csv());
        csv.push('\n');
        csv.push_str(&row_t.to_csv());
        csv.push('\n');
    }

    match &args.out {
        Some(path) => {
            std::fs::write(path, csv)?;
            println!("rows: {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// Pixel rays from the stock six-camera rig, densely enough sampled to
/// yield at least `n` rays, truncated to exactly `n`.
fn rig_rays(n: usize) -> Result<Vec<crate::camera::Ray>> {
    let per_view = n.div_ceil(6).max(1);
    let side = (per_view as f64).sqrt().ceil() as u32;
    let cams = crate::synth::view_rig(6, 2.2, 40.0, side, side)?;
    let mut rays = Vec::with_capacity((side as usize * side as usize) * 6);
    for cam in &cams {
        for v in 0..side {
            for u in 0..side {
                rays.push(cam.ray(u, v));
            }
        }
    }
    rays.truncate(n);
    Ok(rays)
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    if args.trials == 0 {
        return Err(Error::Config("--trials must be positive".into()));
    }
    let rows = crate::gradcheck::run_full_suite(args.trials, cfg.seed);
    print!("{}", crate::gradcheck::format_table(&rows));
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient checks failed")));
    }
    println!("all {} checks passed at {} trials", rows.len(), args.trials);
    Ok(())
}
