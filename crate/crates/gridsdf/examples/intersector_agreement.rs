//! Cross-checks the two ray/surface root finders on random rays over the
//! stock analytic scenes, at several coarse sampling densities. The sampled
//! finder declares a miss when no coarse interval changes sign, so its
//! agreement with sphere tracing improves as the coarse cell shrinks; this
//! prints the measured trade-off alongside the speed ratio.

use gridsdf::camera::Ray;
use gridsdf::intersect::{bench_intersector, compare_outcomes, Intersector, TraceConfig};
use gridsdf::rng::SeedSpring;
use gridsdf::synth::bench_scenes;
use gridsdf::V3;
use rand::Rng;

/// Rays from a viewing shell toward the scene: origins on the sphere of
/// radius 2, aimed at uniform targets in [-0.7, 0.7]^3.
fn random_rays(n: usize, seed: u64) -> Vec<Ray> {
    let mut rng = SeedSpring::new(seed).child("rays", 0).rng();
    (0..n)
        .map(|_| {
            let dir = loop {
                let v = V3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                if v.norm_squared() <= 1.0 && v.norm_squared() > 1e-6 {
                    break v.normalize();
                }
            };
            let origin = dir * 2.0;
            let target = V3::new(
                rng.gen_range(-0.7..0.7),
                rng.gen_range(-0.7..0.7),
                rng.gen_range(-0.7..0.7),
            );
            Ray { origin, dir: (target - origin).normalize() }
        })
        .collect()
}

fn main() {
    let rays = random_rays(10_000, 20260816);
    let trace = TraceConfig {
        intersector: Intersector::SphereTrace { max_steps: 128 },
        tol: 1e-4,
        near: 0.0,
    };

    for (name, scene) in bench_scenes() {
        println!("{name}:");
        let (row_t, out_t) = bench_intersector(&scene, &rays, &trace, "sphere-trace");
        for n_coarse in [32usize, 64, 128, 256] {
            let cfg = TraceConfig {
                intersector: Intersector::Sampled { n_coarse, n_fine: 32 },
                tol: 1e-4,
                near: 0.0,
            };
            let (row_s, out_s) = bench_intersector(&scene, &rays, &cfg, "sampled");
            let a = compare_outcomes(&out_s, &out_t);
            println!(
                "  N_p={n_coarse:>3}: agreement {:>8.4}%  max|dt| {:>8.2e}  speed x{:.2}",
                100.0 * a.agreement_rate(),
                a.max_dt,
                row_s.rays_per_sec / row_t.rays_per_sec.max(1e-12),
            );
        }
    }
}
