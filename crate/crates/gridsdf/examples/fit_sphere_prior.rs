//! Trains a small shape prior over an analytic sphere corpus and reports
//! how well the shared field fits each training shape afterwards. Uses a
//! reduced field and short schedule so the run finishes in seconds; the
//! `train-prior` subcommand drives the same code at full size.

use gridsdf::field::{FieldConfig, HybridField, LatentBank, Sdf, SceneSdf};
use gridsdf::optim::LrSchedule;
use gridsdf::prior::{train_prior, PriorBatchConfig, PriorLossConfig, PriorSchedule};
use gridsdf::rng::SeedSpring;
use gridsdf::samples::sphere_corpus;

fn main() {
    let spring = SeedSpring::new(11);
    let radii = [0.35, 0.45, 0.55];
    let corpus = sphere_corpus(&radii, 256, 256, &spring);

    let cfg = FieldConfig {
        levels: vec![3, 4],
        feature_dim: 4,
        pe_freqs: 4,
        hidden: 64,
        latent_dim: 16,
        ..FieldConfig::default()
    };
    let mut field =
        HybridField::geometric_init(cfg.clone(), &mut spring.child("field-init", 0).rng());
    let mut bank = LatentBank::zeros(corpus.len(), cfg.latent_dim);

    let schedule = PriorSchedule { n: 6 };
    let records = train_prior(
        &mut field,
        &mut bank,
        &corpus,
        &PriorLossConfig::default(),
        &PriorBatchConfig { batches_per_scene: 2, surface_batch: 96, off_batch: 96 },
        &schedule,
        &LrSchedule::Constant { base: 2e-3 },
        &spring,
        None,
    )
    .expect("training failed");

    println!("epoch  stage  loss_total  loss_surface  loss_eikonal");
    for r in records.iter().step_by(6) {
        println!(
            "{:>5}  {:>5}  {:>10.5}  {:>12.5}  {:>12.5}",
            r.epoch, r.stage, r.loss_total, r.loss_surface, r.loss_eikonal
        );
    }
    let last = records.last().unwrap();
    println!(
        "final: loss {:.5} after {} epochs ({} per stage unit)",
        last.loss_total,
        records.len(),
        schedule.n
    );

    // Residual |d| on held-out surface points of each shape, through the
    // scene's own latent.
    println!("\nper-scene surface residuals:");
    for (i, (r, set)) in radii.iter().zip(&corpus).enumerate() {
        let sdf = SceneSdf::full(&field, Some(bank.z.row(i).to_owned()));
        let probes: Vec<_> = set.points.iter().take(128).copied().collect();
        let ds = sdf.eval_batch(&probes);
        let mean_abs = ds.iter().map(|d| d.abs()).sum::<f64>() / ds.len() as f64;
        println!("  {}  (radius {r:.2}): mean |d| = {mean_abs:.4}", set.scene_id);
    }
}
