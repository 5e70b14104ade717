//! Training-point sampling: per-scene surface sample sets, analytic-surface
//! and mesh-surface samplers, and the off-surface point mix used by the
//! eikonal term.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};

use crate::analytic::AnalyticScene;
use crate::field::Sdf;
use crate::mesh::{TriMesh, UnitCubeTransform};
use crate::rng::SeedSpring;
use crate::{Error, Result, V3};

/// One scene's worth of training points.
#[derive(Debug, Clone)]
pub struct SurfaceSampleSet {
    pub scene_id: String,
    /// Points on the target surface, inside `[-1, 1]^3`.
    pub points: Vec<V3>,
    /// Optional unit normals aligned with `points`.
    pub normals: Option<Vec<V3>>,
    /// Free-space probes for the eikonal term.
    pub off_surface: Vec<V3>,
    /// Transform that carried the source geometry into the unit cube,
    /// when the scene was normalized on ingestion.
    pub normalization: Option<UnitCubeTransform>,
}

impl SurfaceSampleSet {
    /// Domain containment and normal sanity.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Config(format!(
                "scene '{}' has no surface points",
                self.scene_id
            )));
        }
        let inside = |p: &V3| p.iter().all(|&v| (-1.0..=1.0).contains(&v));
        if let Some(p) = self.points.iter().chain(&self.off_surface).find(|p| !inside(p)) {
            return Err(Error::Config(format!(
                "scene '{}' has a sample outside the domain: {:?}",
                self.scene_id, p
            )));
        }
        if let Some(ns) = &self.normals {
            if ns.len() != self.points.len() {
                return Err(Error::Config(format!(
                    "scene '{}': {} normals for {} points",
                    self.scene_id,
                    ns.len(),
                    self.points.len()
                )));
            }
            if let Some(n) = ns.iter().find(|n| (n.norm() - 1.0).abs() > 1e-6) {
                return Err(Error::Config(format!(
                    "scene '{}' has a non-unit normal {:?}",
                    self.scene_id, n
                )));
            }
        }
        Ok(())
    }
}

/// Uniform points on a sphere surface.
pub fn sample_sphere_surface(
    center: V3,
    radius: f64,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<V3> {
    (0..n)
        .map(|_| {
            let dir: [f64; 3] = UnitSphere.sample(rng);
            center + V3::new(dir[0], dir[1], dir[2]) * radius
        })
        .collect()
}

/// Free-space probe mix: half uniform over the cube, half surface points
/// jittered by isotropic Gaussian noise, everything clamped to the domain.
pub fn off_surface_mix(
    surface: &[V3],
    n: usize,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Vec<V3> {
    let clamp = |p: V3| V3::new(p.x.clamp(-1.0, 1.0), p.y.clamp(-1.0, 1.0), p.z.clamp(-1.0, 1.0));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i % 2 == 0 || surface.is_empty() {
            out.push(V3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
        } else {
            let base = surface[rng.gen_range(0..surface.len())];
            let jitter = V3::new(
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ) * noise_std;
            out.push(clamp(base + jitter));
        }
    }
    out
}

/// Newton projection of a point onto the zero set of an analytic scene.
/// Exact distance fields converge in one step; a few iterations cover
/// near-exact ones (ellipsoids).
pub fn project_to_surface(scene: &AnalyticScene, mut p: V3, iters: usize) -> V3 {
    for _ in 0..iters {
        let (d, g) = (scene.eval(p), scene.grad(p));
        if d.abs() < 1e-12 {
            break;
        }
        let gn = g.norm_squared().max(1e-12);
        p -= g * (d / gn);
    }
    p
}

/// Surface samples (with outward normals) of an analytic scene, produced by
/// projecting random cube points onto the zero set. Density follows the
/// basin geometry rather than area; thin out with a spacing filter when a
/// uniform blanket is needed.
pub fn sample_analytic_surface(
    scene: &AnalyticScene,
    n: usize,
    rng: &mut impl Rng,
) -> (Vec<V3>, Vec<V3>) {
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut guard = 0usize;
    while points.len() < n {
        guard += 1;
        assert!(guard < 100 * n + 1000, "projection sampler failed to converge");
        let p0 = V3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let p = project_to_surface(scene, p0, 12);
        if scene.eval(p).abs() > 1e-9 {
            continue;
        }
        if !p.iter().all(|&v| (-1.0..=1.0).contains(&v)) {
            continue;
        }
        let g = scene.grad(p);
        let n_unit = match g.try_normalize(1e-9) {
            Some(u) => u,
            None => continue,
        };
        points.push(p);
        normals.push(n_unit);
    }
    (points, normals)
}

/// Builds the analytic-sphere corpus used by the prior's desk-scale runs:
/// one scene per radius, each with surface points and an off-surface mix.
pub fn sphere_corpus(
    radii: &[f64],
    surface_per_scene: usize,
    off_per_scene: usize,
    spring: &SeedSpring,
) -> Vec<SurfaceSampleSet> {
    radii
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let mut rng = spring.child("sphere-corpus", i as u64).rng();
            let points = sample_sphere_surface(V3::zeros(), r, surface_per_scene, &mut rng);
            let normals = points.iter().map(|p| p.normalize()).collect();
            let off_surface = off_surface_mix(&points, off_per_scene, 0.05, &mut rng);
            SurfaceSampleSet {
                scene_id: format!("sphere-{i:02}-r{r:.3}"),
                points,
                normals: Some(normals),
                off_surface,
                normalization: None,
            }
        })
        .collect()
}

/// Ingests one triangle mesh as a training scene: normalizes it into the
/// unit cube (margin 0.9), draws area-weighted surface samples with face
/// normals, and mixes off-surface probes. Rejects empty meshes; degenerate
/// faces are skipped and counted in the return.
pub fn ingest_mesh(
    mesh: &TriMesh,
    scene_id: &str,
    surface_n: usize,
    off_n: usize,
    rng: &mut impl Rng,
) -> Result<(SurfaceSampleSet, usize)> {
    if mesh.faces.is_empty() || mesh.vertices.is_empty() {
        return Err(Error::Config(format!("scene '{scene_id}': empty mesh")));
    }
    let mut normalized = mesh.clone();
    let transform = normalized.normalize_to_unit_cube(0.9);
    let (points, normals, skipped) = normalized.sample_surface(surface_n, rng)?;
    let off_surface = off_surface_mix(&points, off_n, 0.05, rng);
    let set = SurfaceSampleSet {
        scene_id: scene_id.to_string(),
        points,
        normals: Some(normals),
        off_surface,
        normalization: Some(transform),
    };
    set.validate()?;
    Ok((set, skipped))
}

// ---------------------------------------------------------------------------
// On-disk corpus format: one JSON file per scene, coordinates as plain
// [x, y, z] arrays.
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct SampleSetFile {
    scene_id: String,
    points: Vec<[f64; 3]>,
    normals: Option<Vec<[f64; 3]>>,
    off_surface: Vec<[f64; 3]>,
    normalization: Option<UnitCubeTransform>,
}

fn to_arrays(ps: &[V3]) -> Vec<[f64; 3]> {
    ps.iter().map(|p| [p.x, p.y, p.z]).collect()
}

fn from_arrays(ps: Vec<[f64; 3]>) -> Vec<V3> {
    ps.into_iter().map(|a| V3::new(a[0], a[1], a[2])).collect()
}

/// Writes one sample set as JSON.
pub fn save_sample_set(set: &SurfaceSampleSet, path: &Path) -> Result<()> {
    let file = SampleSetFile {
        scene_id: set.scene_id.clone(),
        points: to_arrays(&set.points),
        normals: set.normals.as_deref().map(to_arrays),
        off_surface: to_arrays(&set.off_surface),
        normalization: set.normalization,
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::Io(format!("encoding '{}': {e}", set.scene_id)))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Reads one sample set and validates it.
pub fn load_sample_set(path: &Path) -> Result<SurfaceSampleSet> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
    let file: SampleSetFile = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("parsing {}: {e}", path.display())))?;
    let set = SurfaceSampleSet {
        scene_id: file.scene_id,
        points: from_arrays(file.points),
        normals: file.normals.map(from_arrays),
        off_surface: from_arrays(file.off_surface),
        normalization: file.normalization,
    };
    set.validate()?;
    Ok(set)
}

/// Loads every `*.json` sample set in a directory, in file-name order (the
/// order defines latent-bank row assignment, so it must be stable).
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<SurfaceSampleSet>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io(format!("reading {}: {e}", dir.display())))?
        .filter_map(|entry| {
            let p = entry.ok()?.path();
            (p.extension().and_then(|e| e.to_str()) == Some("json")).then_some(p)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no .json sample sets found in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| load_sample_set(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::Shape;
    use crate::mesh::icosphere;
    use approx::assert_relative_eq;

    #[test]
    fn sphere_samples_sit_on_the_sphere() {
        let mut rng = SeedSpring::new(1).rng();
        let pts = sample_sphere_surface(V3::new(0.1, 0.0, -0.1), 0.45, 500, &mut rng);
        for p in &pts {
            assert_relative_eq!((p - V3::new(0.1, 0.0, -0.1)).norm(), 0.45, epsilon = 1e-12);
        }
        // Directional balance.
        let mean: V3 = pts.iter().fold(V3::zeros(), |a, p| a + p) / 500.0;
        assert!((mean - V3::new(0.1, 0.0, -0.1)).norm() < 0.06);
    }

    #[test]
    fn off_surface_mix_stays_in_domain_and_splits_halves() {
        let mut rng = SeedSpring::new(2).rng();
        let surf = sample_sphere_surface(V3::zeros(), 0.5, 100, &mut rng);
        let off = off_surface_mix(&surf, 1000, 0.05, &mut rng);
        assert_eq!(off.len(), 1000);
        assert!(off.iter().all(|p| p.iter().all(|&v| (-1.0..=1.0).contains(&v))));
        // Jittered half hugs the surface; uniform half does not.
        let near = off.iter().filter(|p| (p.norm() - 0.5).abs() < 0.2).count();
        assert!(near > 400, "near-surface count {near}");
        assert!(near < 700, "near-surface count {near}");
    }

    #[test]
    fn analytic_surface_sampler_lands_on_zero_set_with_unit_normals() {
        let scene = AnalyticScene {
            shapes: vec![
                Shape::Sphere { center: [0.0, 0.06, 0.0], radius: 0.38 },
                Shape::Ellipsoid {
                    center: [0.0, -0.06, 0.0],
                    semi_axes: [0.30, 0.36, 0.30],
                },
            ],
        };
        let mut rng = SeedSpring::new(3).rng();
        let (pts, ns) = sample_analytic_surface(&scene, 400, &mut rng);
        for (p, n) in pts.iter().zip(&ns) {
            assert!(scene.eval(*p).abs() <= 1e-9);
            assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-9);
        }
        // Both lobes get hit.
        let upper = pts.iter().filter(|p| p.y > 0.2).count();
        let lower = pts.iter().filter(|p| p.y < -0.2).count();
        assert!(upper > 10 && lower > 10, "upper {upper} lower {lower}");
    }

    #[test]
    fn sphere_corpus_is_reproducible_and_valid() {
        let spring = SeedSpring::new(9);
        let radii = [0.3, 0.4, 0.5];
        let a = sphere_corpus(&radii, 64, 64, &spring);
        let b = sphere_corpus(&radii, 64, 64, &spring);
        assert_eq!(a.len(), 3);
        for (sa, sb) in a.iter().zip(&b) {
            sa.validate().unwrap();
            assert_eq!(sa.scene_id, sb.scene_id);
            for (pa, pb) in sa.points.iter().zip(&sb.points) {
                assert_eq!(pa, pb);
            }
        }
        assert_ne!(a[0].points[0], a[1].points[0], "scenes draw distinct streams");
    }

    #[test]
    fn mesh_ingestion_normalizes_and_samples_the_surface() {
        // Big off-center icosphere: ingestion must bring it into the cube.
        let mesh = icosphere(V3::new(10.0, -4.0, 2.0), 7.0, 3);
        let mut rng = SeedSpring::new(4).rng();
        let (set, skipped) = ingest_mesh(&mesh, "head-00", 600, 600, &mut rng).unwrap();
        assert_eq!(skipped, 0);
        set.validate().unwrap();
        assert_eq!(set.points.len(), 600);
        let t = set.normalization.unwrap();
        // The sphere center maps to the origin and the radius to 0.9.
        let c = t.apply(V3::new(10.0, -4.0, 2.0));
        assert!(c.norm() < 1e-9);
        for p in &set.points {
            assert!(p.norm() <= 0.9 + 1e-9);
            assert!(p.norm() >= 0.88, "far inside the normalized sphere: {}", p.norm());
        }
    }

    #[test]
    fn unit_cube_mesh_samples_match_the_analytic_box() {
        // Axis-aligned cube with half-extent 0.5 (12 triangles).
        let mut mesh = TriMesh::default();
        let h = 0.5;
        for z in [-h, h] {
            for y in [-h, h] {
                for x in [-h, h] {
                    mesh.vertices.push(V3::new(x, y, z));
                }
            }
        }
        let quads: [[u32; 4]; 6] = [
            [0, 2, 6, 4], // x = -h
            [1, 5, 7, 3], // x = +h
            [0, 4, 5, 1], // y = -h
            [2, 3, 7, 6], // y = +h
            [0, 1, 3, 2], // z = -h
            [4, 6, 7, 5], // z = +h
        ];
        for q in quads {
            mesh.faces.push([q[0], q[1], q[2]]);
            mesh.faces.push([q[0], q[2], q[3]]);
        }
        let cube = AnalyticScene {
            shapes: vec![Shape::Box { center: [0.0, 0.0, 0.0], half: [h, h, h] }],
        };
        let mut rng = SeedSpring::new(5).rng();
        let (pts, _, skipped) = mesh.sample_surface(2000, &mut rng).unwrap();
        assert_eq!(skipped, 0);
        for p in pts {
            assert!(cube.eval(p).abs() <= 1e-9);
        }
    }

    #[test]
    fn ingestion_rejects_empty_meshes_and_bad_sets() {
        let mut rng = SeedSpring::new(6).rng();
        match ingest_mesh(&TriMesh::default(), "none", 10, 10, &mut rng) {
            Err(Error::Config(msg)) => assert!(msg.contains("empty"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        let bad = SurfaceSampleSet {
            scene_id: "out".into(),
            points: vec![V3::new(1.5, 0.0, 0.0)],
            normals: None,
            off_surface: vec![],
            normalization: None,
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn corpus_files_round_trip_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = sphere_corpus(&[0.3, 0.5, 0.4], 40, 40, &SeedSpring::new(7));
        // Write deliberately out of order; the loader must sort by name.
        for (i, set) in corpus.iter().enumerate().rev() {
            save_sample_set(set, &dir.path().join(format!("scene_{i}.json"))).unwrap();
        }
        let back = load_corpus_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in corpus.iter().zip(&back) {
            assert_eq!(a.scene_id, b.scene_id);
            assert_eq!(a.points, b.points);
            assert_eq!(a.normals, b.normals);
            assert_eq!(a.off_surface, b.off_surface);
        }
        // Empty directory is a configuration error.
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_corpus_dir(empty.path()), Err(Error::Config(_))));
    }
}
