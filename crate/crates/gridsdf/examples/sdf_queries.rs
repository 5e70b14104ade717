//! Evaluates signed distances and spatial gradients, both for closed-form
//! scenes and for a freshly initialized hybrid field. Shows the crate's
//! conventions: the domain is [-1, 1]^3, distances are negative inside,
//! and a new field starts out approximating a sphere.

use gridsdf::analytic::{AnalyticScene, Shape};
use gridsdf::field::{FieldConfig, HybridField, Sdf, SceneSdf};
use gridsdf::rng::SeedSpring;
use gridsdf::V3;

fn main() {
    // A closed-form scene: union of a sphere and a box.
    let scene = AnalyticScene::new(vec![
        Shape::Sphere { center: [0.3, 0.0, 0.0], radius: 0.4 },
        Shape::Box { center: [-0.4, 0.0, 0.0], half: [0.2, 0.3, 0.2] },
    ]);

    println!("analytic union (sphere + box):");
    for p in [
        V3::new(0.3, 0.0, 0.0),  // sphere center: inside
        V3::new(0.3, 0.4, 0.0),  // on the sphere
        V3::new(-0.4, 0.0, 0.0), // box center: inside
        V3::new(0.9, 0.9, 0.9),  // far corner: outside
    ] {
        let d = scene.eval(p);
        let g = scene.grad(p);
        println!(
            "  d({:+.2}, {:+.2}, {:+.2}) = {:+.4}   |grad| = {:.4}",
            p.x,
            p.y,
            p.z,
            d,
            g.norm()
        );
    }

    // A hybrid field fresh out of geometric initialization approximates a
    // sphere of the configured radius; grids contribute nothing yet.
    let cfg = FieldConfig::default();
    let radius = cfg.init_radius;
    let field = HybridField::geometric_init(cfg, &mut SeedSpring::new(7).rng());
    let sdf = SceneSdf::full(&field, None);

    println!("\nfresh hybrid field (geometric initialization, radius {radius}):");
    let probes = [
        V3::new(0.0, 0.0, 0.0),
        V3::new(radius, 0.0, 0.0),
        V3::new(0.0, 0.9, 0.0),
    ];
    let ds = sdf.eval_batch(&probes);
    for (p, d) in probes.iter().zip(&ds) {
        let reference = p.norm() - radius;
        println!(
            "  d({:+.2}, {:+.2}, {:+.2}) = {:+.4}   sphere reference {:+.4}",
            p.x, p.y, p.z, d, reference
        );
    }

    // Spatial gradients of the field are exact (computed analytically,
    // not by finite differences) and nearly unit-norm after initialization.
    let (_, grads) = sdf.eval_with_grad_many(&probes);
    for (p, g) in probes.iter().zip(&grads) {
        println!(
            "  |grad d({:+.2}, {:+.2}, {:+.2})| = {:.4}",
            p.x,
            p.y,
            p.z,
            g.norm()
        );
    }
}
