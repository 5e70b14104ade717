//! Extracts the zero level set of an analytic scene as a triangle mesh,
//! saves it as OBJ, and scores the extraction with the unidirectional
//! point-to-surface distance used throughout the crate.

use gridsdf::analytic::{AnalyticScene, Shape};
use gridsdf::chamfer::chamfer_to_mesh;
use gridsdf::mesh::{extract_mesh, MeshOptions};
use gridsdf::rng::SeedSpring;
use gridsdf::samples::sample_analytic_surface;

fn main() {
    let scene = AnalyticScene::new(vec![
        Shape::Torus { center: [0.0, 0.0, 0.0], major: 0.45, minor: 0.18 },
        Shape::Sphere { center: [0.0, 0.35, 0.0], radius: 0.22 },
    ]);

    let opts = MeshOptions { resolution: 96, ..MeshOptions::default() };
    let t0 = std::time::Instant::now();
    let mesh = extract_mesh(&scene, &opts).expect("extraction failed");
    println!(
        "extracted {} vertices / {} faces at resolution {} in {:.0} ms",
        mesh.vertices.len(),
        mesh.faces.len(),
        opts.resolution,
        t0.elapsed().as_secs_f64() * 1e3
    );
    println!(
        "closed manifold: {}, Euler characteristic: {}, area: {:.4}",
        mesh.is_closed_manifold(),
        mesh.euler_characteristic(),
        mesh.area()
    );

    let path = std::env::temp_dir().join("gridsdf-torus-sphere.obj");
    mesh.save_obj(&path).expect("OBJ write failed");
    println!("saved {}", path.display());

    // Distance from true surface samples to the extracted mesh; bounded by
    // the lattice cell size.
    let spring = SeedSpring::new(3);
    let mut rng = spring.child("gt", 0).rng();
    let gt = sample_analytic_surface(&scene, 4_000, &mut rng).0;
    let report =
        chamfer_to_mesh(&gt, &mesh, 100_000, 0.002, &mut rng).expect("evaluation failed");
    println!(
        "surface distance: {:.5} model units over {} mesh samples (cell size {:.5})",
        report.value,
        report.recon_samples,
        2.0 / opts.resolution as f64
    );
}
