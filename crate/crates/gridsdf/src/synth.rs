//! Synthetic scene generation: renders analytic shape unions into
//! posed RGB / mask / camera-space normal images with a fixed Lambertian
//! light, writes them as a reloadable on-disk bundle, and provides the
//! stock scenes the evaluation suites use.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::analytic::{AnalyticScene, Shape};
use crate::camera::Camera;
use crate::field::Sdf;
use crate::intersect::{intersect_batch, Intersector, TraceConfig};
use crate::{Error, Result, V3};

/// Fixed directional light plus an ambient floor; shading is
/// `albedo * (ambient + (1 - ambient) * max(0, n.l))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    pub dir: [f64; 3],
    pub ambient: f64,
}

impl Default for Lighting {
    fn default() -> Self {
        Lighting { dir: [0.4, 0.7, 0.6], ambient: 0.25 }
    }
}

impl Lighting {
    pub fn dir_v(&self) -> V3 {
        V3::new(self.dir[0], self.dir[1], self.dir[2]).normalize()
    }
}

/// Everything needed to render one scene bundle. Serializable so a scene
/// description file can drive the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub shapes: Vec<Shape>,
    /// One RGB albedo in [0,1] per shape.
    pub albedos: Vec<[f64; 3]>,
    #[serde(default)]
    pub light: Lighting,
    /// Number of views: 1 (frontal), 3 (adds +-45 degree yaw), or
    /// 6 (adds +-90 degree yaw and a lowered frontal view).
    pub views: usize,
    pub width: u32,
    pub height: u32,
    pub fov_y_deg: f64,
    /// Camera distance from the origin.
    pub distance: f64,
    /// Sphere-tracing step cap for the ground-truth renders.
    pub max_steps: usize,
    /// Surface tolerance for the ground-truth renders.
    pub tol: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            shapes: blob_head().shapes,
            albedos: vec![[0.80, 0.55, 0.45], [0.45, 0.60, 0.80]],
            light: Lighting::default(),
            views: 6,
            width: 256,
            height: 256,
            fov_y_deg: 40.0,
            distance: 2.2,
            max_steps: 256,
            tol: 1e-6,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::Config("scene has no shapes".into()));
        }
        if self.albedos.len() != self.shapes.len() {
            return Err(Error::Config(format!(
                "{} shapes but {} albedos",
                self.shapes.len(),
                self.albedos.len()
            )));
        }
        if !matches!(self.views, 1 | 3 | 6) {
            return Err(Error::Config(format!(
                "view count must be 1, 3, or 6 (got {})",
                self.views
            )));
        }
        if self
            .albedos
            .iter()
            .flatten()
            .any(|&a| !(0.0..=1.0).contains(&a))
        {
            return Err(Error::Config("albedo components must lie in [0,1]".into()));
        }
        if self.width == 0 || self.height == 0 || self.distance <= 1.0 {
            return Err(Error::Config(
                "image must be nonempty and the camera outside the unit domain".into(),
            ));
        }
        Ok(())
    }

    pub fn scene(&self) -> AnalyticScene {
        AnalyticScene::new(self.shapes.clone())
    }
}

/// Two overlapping lobes (a sphere over an ellipsoid) forming a non-convex
/// head-and-jaw blob; the stock target for reconstruction quality checks.
pub fn blob_head() -> AnalyticScene {
    AnalyticScene::new(vec![
        Shape::Sphere { center: [0.0, 0.06, 0.0], radius: 0.38 },
        Shape::Ellipsoid { center: [0.0, -0.06, 0.0], semi_axes: [0.30, 0.36, 0.30] },
    ])
}

/// The four stock analytic scenes used by the intersection benchmark.
pub fn bench_scenes() -> Vec<(String, AnalyticScene)> {
    vec![
        (
            "sphere".to_string(),
            AnalyticScene::new(vec![Shape::Sphere { center: [0.0; 3], radius: 0.5 }]),
        ),
        (
            "box".to_string(),
            AnalyticScene::new(vec![Shape::Box {
                center: [0.0; 3],
                half: [0.42, 0.30, 0.35],
            }]),
        ),
        (
            "torus".to_string(),
            AnalyticScene::new(vec![Shape::Torus {
                center: [0.0; 3],
                major: 0.40,
                minor: 0.16,
            }]),
        ),
        ("blob-head".to_string(), blob_head()),
    ]
}

/// Camera ring: view 0 is frontal (+z looking at the origin), views 1-2
/// yaw +-45 degrees, views 3-4 yaw +-90 degrees, view 5 is a lowered
/// frontal camera pitched up at the origin. All sit `distance` away.
pub fn view_rig(
    views: usize,
    distance: f64,
    fov_y_deg: f64,
    width: u32,
    height: u32,
) -> Result<Vec<Camera>> {
    if !matches!(views, 1 | 3 | 6) {
        return Err(Error::Config(format!(
            "view count must be 1, 3, or 6 (got {views})"
        )));
    }
    let mut yaw_pitch = vec![(0.0f64, 0.0f64)];
    if views >= 3 {
        yaw_pitch.push((45.0, 0.0));
        yaw_pitch.push((-45.0, 0.0));
    }
    if views == 6 {
        yaw_pitch.push((90.0, 0.0));
        yaw_pitch.push((-90.0, 0.0));
        yaw_pitch.push((0.0, -25.0));
    }
    yaw_pitch
        .into_iter()
        .map(|(yaw, pitch)| {
            let (yr, pr) = (yaw.to_radians(), pitch.to_radians());
            let pos = V3::new(
                yr.sin() * pr.cos(),
                pr.sin(),
                yr.cos() * pr.cos(),
            ) * distance;
            Camera::look_at(width, height, fov_y_deg, pos, V3::zeros(), V3::new(0.0, 1.0, 0.0))
        })
        .collect()
}

/// One rendered view, row-major from the top-left pixel. `normal_cam`
/// holds camera-space unit normals at hits and zeros elsewhere.
#[derive(Debug, Clone)]
pub struct ViewImages {
    pub rgb: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
    pub normal_cam: Vec<V3>,
}

/// Renders one posed view of an analytic scene by sphere tracing every
/// pixel-center ray.
pub fn render_view(
    scene: &AnalyticScene,
    albedos: &[[f64; 3]],
    light: &Lighting,
    camera: &Camera,
    max_steps: usize,
    tol: f64,
) -> ViewImages {
    let l = light.dir_v();
    let mut rays = Vec::with_capacity(camera.pixel_count());
    for v in 0..camera.height {
        for u in 0..camera.width {
            rays.push(camera.ray(u, v));
        }
    }
    let cfg = TraceConfig {
        intersector: Intersector::SphereTrace { max_steps },
        tol,
        near: 0.0,
    };
    let outcomes = intersect_batch(scene, &rays, &cfg);

    let n_px = rays.len();
    let mut rgb = vec![[0.0; 3]; n_px];
    let mut mask = vec![false; n_px];
    let mut normal_cam = vec![V3::zeros(); n_px];
    for (i, out) in outcomes.iter().enumerate() {
        let Some(hit) = &out.hit else { continue };
        mask[i] = true;
        let n = scene.grad(hit.x).normalize();
        let shade = light.ambient + (1.0 - light.ambient) * n.dot(&l).max(0.0);
        let albedo = albedos[scene.nearest(hit.x).0];
        rgb[i] = [albedo[0] * shade, albedo[1] * shade, albedo[2] * shade];
        normal_cam[i] = camera.world_dir_to_cam(n);
    }
    ViewImages { rgb, mask, normal_cam }
}

/// On-disk description of a rendered bundle (`scene.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub shapes: Vec<Shape>,
    pub albedos: Vec<[f64; 3]>,
    pub light: Lighting,
    pub width: u32,
    pub height: u32,
    pub fov_y_deg: f64,
    pub distance: f64,
    pub cameras: Vec<Camera>,
}

impl SceneManifest {
    pub fn scene(&self) -> AnalyticScene {
        AnalyticScene::new(self.shapes.clone())
    }
}

fn view_paths(dir: &Path, i: usize) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("rgb_{i:02}.png")),
        dir.join(format!("mask_{i:02}.png")),
        dir.join(format!("normal_{i:02}.png")),
    )
}

/// Renders every view of `spec` into `out_dir`: per view an 8-bit RGB
/// image, an 8-bit mask, and a 16-bit camera-space normal map encoded as
/// `(n + 1) / 2`, plus a `scene.json` manifest.
pub fn synthesize(spec: &SynthSpec, out_dir: &Path) -> Result<SceneManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let scene = spec.scene();
    let cameras = view_rig(spec.views, spec.distance, spec.fov_y_deg, spec.width, spec.height)?;

    for (i, cam) in cameras.iter().enumerate() {
        let view = render_view(&scene, &spec.albedos, &spec.light, cam, spec.max_steps, spec.tol);
        let (rgb_path, mask_path, normal_path) = view_paths(out_dir, i);

        let rgb_img = ImageBuffer::from_fn(spec.width, spec.height, |x, y| {
            let c = view.rgb[(y * spec.width + x) as usize];
            Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])])
        });
        rgb_img
            .save(&rgb_path)
            .map_err(|e| Error::Io(format!("writing {}: {e}", rgb_path.display())))?;

        let mask_img = ImageBuffer::from_fn(spec.width, spec.height, |x, y| {
            Luma([if view.mask[(y * spec.width + x) as usize] { 255u8 } else { 0 }])
        });
        mask_img
            .save(&mask_path)
            .map_err(|e| Error::Io(format!("writing {}: {e}", mask_path.display())))?;

        let normal_img: ImageBuffer<Rgb<u16>, Vec<u16>> =
            ImageBuffer::from_fn(spec.width, spec.height, |x, y| {
                let n = view.normal_cam[(y * spec.width + x) as usize];
                Rgb([to_u16_snorm(n.x), to_u16_snorm(n.y), to_u16_snorm(n.z)])
            });
        normal_img
            .save(&normal_path)
            .map_err(|e| Error::Io(format!("writing {}: {e}", normal_path.display())))?;
    }

    let manifest = SceneManifest {
        shapes: spec.shapes.clone(),
        albedos: spec.albedos.clone(),
        light: spec.light,
        width: spec.width,
        height: spec.height,
        fov_y_deg: spec.fov_y_deg,
        distance: spec.distance,
        cameras,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Io(format!("encoding manifest: {e}")))?;
    fs::write(out_dir.join("scene.json"), json)?;
    Ok(manifest)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_u16_snorm(v: f64) -> u16 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 65535.0).round() as u16
}

fn from_u16_snorm(v: u16) -> f64 {
    v as f64 / 65535.0 * 2.0 - 1.0
}

/// One loaded view: RGB in [0,1], the hit mask, and — where the mask is
/// set — decoded unit camera-space normals.
#[derive(Debug, Clone)]
pub struct ViewData {
    pub camera: Camera,
    pub rgb: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
    pub normal_cam: Vec<Option<V3>>,
}

/// A rendered scene read back from disk.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub manifest: SceneManifest,
    pub views: Vec<ViewData>,
}

impl SceneBundle {
    pub fn load(dir: &Path) -> Result<SceneBundle> {
        let manifest_path = dir.join("scene.json");
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Io(format!("reading {}: {e}", manifest_path.display())))?;
        let manifest: SceneManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("parsing {}: {e}", manifest_path.display())))?;

        let mut views = Vec::with_capacity(manifest.cameras.len());
        for (i, camera) in manifest.cameras.iter().enumerate() {
            let (rgb_path, mask_path, normal_path) = view_paths(dir, i);
            let rgb_img = image::open(&rgb_path)
                .map_err(|e| Error::Io(format!("reading {}: {e}", rgb_path.display())))?
                .into_rgb8();
            let mask_img = image::open(&mask_path)
                .map_err(|e| Error::Io(format!("reading {}: {e}", mask_path.display())))?
                .into_luma8();
            let normal_img = image::open(&normal_path)
                .map_err(|e| Error::Io(format!("reading {}: {e}", normal_path.display())))?
                .into_rgb16();
            for (name, (w, h)) in [
                ("rgb", rgb_img.dimensions()),
                ("mask", mask_img.dimensions()),
                ("normal", normal_img.dimensions()),
            ] {
                if (w, h) != (manifest.width, manifest.height) {
                    return Err(Error::Config(format!(
                        "view {i} {name} image is {w}x{h}, manifest says {}x{}",
                        manifest.width, manifest.height
                    )));
                }
            }

            let n_px = (manifest.width * manifest.height) as usize;
            let mut rgb = Vec::with_capacity(n_px);
            let mut mask = Vec::with_capacity(n_px);
            let mut normal_cam = Vec::with_capacity(n_px);
            for y in 0..manifest.height {
                for x in 0..manifest.width {
                    let p = rgb_img.get_pixel(x, y).0;
                    rgb.push([
                        p[0] as f64 / 255.0,
                        p[1] as f64 / 255.0,
                        p[2] as f64 / 255.0,
                    ]);
                    let inside = mask_img.get_pixel(x, y).0[0] > 127;
                    mask.push(inside);
                    if inside {
                        let q = normal_img.get_pixel(x, y).0;
                        let n = V3::new(
                            from_u16_snorm(q[0]),
                            from_u16_snorm(q[1]),
                            from_u16_snorm(q[2]),
                        );
                        let len = n.norm();
                        if len == 0.0 {
                            return Err(Error::Config(format!(
                                "view {i} has a zero normal inside the mask at ({x},{y})"
                            )));
                        }
                        normal_cam.push(Some(n / len));
                    } else {
                        normal_cam.push(None);
                    }
                }
            }
            views.push(ViewData { camera: camera.clone(), rgb, mask, normal_cam });
        }
        Ok(SceneBundle { manifest, views })
    }

    pub fn scene(&self) -> AnalyticScene {
        self.manifest.scene()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn sphere_spec(views: usize, res: u32) -> SynthSpec {
        SynthSpec {
            shapes: vec![Shape::Sphere { center: [0.0; 3], radius: 0.5 }],
            albedos: vec![[0.8, 0.7, 0.6]],
            views,
            width: res,
            height: res,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn rig_places_cameras_on_the_ring() {
        for views in [1usize, 3, 6] {
            let rig = view_rig(views, 2.2, 40.0, 64, 64).unwrap();
            assert_eq!(rig.len(), views);
            for cam in &rig {
                assert_relative_eq!(cam.center_v().norm(), 2.2, epsilon = 1e-12);
                // The central ray must point back at the origin.
                let r = cam.ray_at(32.0, 32.0);
                let to_origin = (-cam.center_v()).normalize();
                assert!(r.dir.dot(&to_origin) > 1.0 - 1e-9);
            }
        }
        // Frontal camera sits on +z; the lowered view is below the equator.
        let rig = view_rig(6, 2.2, 40.0, 64, 64).unwrap();
        assert!(rig[0].center_v().z > 2.19);
        assert!(rig[5].center_v().y < -0.5);
        assert!(view_rig(4, 2.2, 40.0, 64, 64).is_err());
    }

    #[test]
    fn sphere_mask_matches_the_closed_form_silhouette() {
        let spec = sphere_spec(1, 256);
        let cam = &view_rig(1, spec.distance, spec.fov_y_deg, 256, 256).unwrap()[0];
        let view = render_view(
            &spec.scene(),
            &spec.albedos,
            &spec.light,
            cam,
            spec.max_steps,
            spec.tol,
        );
        let rendered = view.mask.iter().filter(|&&m| m).count();

        // Independent count: solve the ray/sphere quadratic per pixel.
        let mut exact = 0usize;
        for v in 0..256u32 {
            for u in 0..256u32 {
                let r = cam.ray(u, v);
                let oc = r.origin;
                let b = oc.dot(&r.dir);
                let c = oc.dot(&oc) - 0.25;
                if b * b - c >= 0.0 && -b - (b * b - c).sqrt() > 0.0 {
                    exact += 1;
                }
            }
        }
        let diff = (rendered as f64 - exact as f64).abs() / exact as f64;
        assert!(diff <= 0.005, "mask {rendered} vs analytic {exact} ({diff:.4})");

        // Projected-disk area formula as a coarser cross-check.
        let fy = 128.0 / (20.0f64).to_radians().tan();
        let px_radius = fy * 0.5 / (2.2f64.powi(2) - 0.25).sqrt();
        let area = PI * px_radius * px_radius;
        assert!(
            (rendered as f64 - area).abs() / area < 0.01,
            "mask {rendered} vs disk area {area:.1}"
        );
    }

    #[test]
    fn center_pixel_shading_and_normal_are_exact() {
        let spec = sphere_spec(1, 255); // odd size: center pixel ray is axial
        let cam = &view_rig(1, spec.distance, spec.fov_y_deg, 255, 255).unwrap()[0];
        let view = render_view(
            &spec.scene(),
            &spec.albedos,
            &spec.light,
            cam,
            spec.max_steps,
            spec.tol,
        );
        let idx = (127 * 255 + 127) as usize;
        assert!(view.mask[idx]);

        // The frontal sphere point faces the camera: +z in camera space.
        let n = view.normal_cam[idx];
        assert!((n - V3::new(0.0, 0.0, 1.0)).norm() < 1e-6, "normal {n:?}");

        // Hand-computed Lambertian value: n.l with n = +z world.
        let l_len = (0.4f64 * 0.4 + 0.7 * 0.7 + 0.6 * 0.6).sqrt();
        let shade = 0.25 + 0.75 * (0.6 / l_len);
        for (ch, albedo) in view.rgb[idx].iter().zip([0.8, 0.7, 0.6]) {
            assert_relative_eq!(*ch, albedo * shade, epsilon = 1e-6);
        }
    }

    #[test]
    fn bundles_round_trip_and_rerenders_are_bit_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let spec = SynthSpec { views: 3, width: 48, height: 48, ..SynthSpec::default() };
        let manifest = synthesize(&spec, dir_a.path()).unwrap();
        synthesize(&spec, dir_b.path()).unwrap();

        // Bit-identical outputs from identical specs.
        let mut names: Vec<String> = vec!["scene.json".into()];
        for i in 0..3 {
            names.push(format!("rgb_{i:02}.png"));
            names.push(format!("mask_{i:02}.png"));
            names.push(format!("normal_{i:02}.png"));
        }
        for name in &names {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }

        // Loader returns what the renderer produced.
        let bundle = SceneBundle::load(dir_a.path()).unwrap();
        assert_eq!(bundle.manifest, manifest);
        assert_eq!(bundle.views.len(), 3);
        for (i, view) in bundle.views.iter().enumerate() {
            assert_eq!(view.camera, manifest.cameras[i]);
            let fresh = render_view(
                &manifest.scene(),
                &manifest.albedos,
                &manifest.light,
                &view.camera,
                spec.max_steps,
                spec.tol,
            );
            assert_eq!(view.mask, fresh.mask);
            let inside = view.mask.iter().filter(|&&m| m).count();
            assert!(inside > 0, "view {i} saw nothing");
            for p in 0..view.mask.len() {
                for c in 0..3 {
                    assert!((view.rgb[p][c] - fresh.rgb[p][c]).abs() <= 0.5 / 255.0 + 1e-12);
                }
                match (view.mask[p], view.normal_cam[p]) {
                    (true, Some(n)) => {
                        assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-3);
                        let angle_err = 1.0 - n.dot(&fresh.normal_cam[p]);
                        assert!(angle_err < 1e-7, "normal quantization too coarse: {angle_err}");
                    }
                    (false, None) => {}
                    other => panic!("mask/normal mismatch at {p}: {other:?}"),
                }
            }
        }
    }

    #[test]
    fn stock_scenes_are_inside_the_domain_and_two_lobed() {
        for (name, scene) in bench_scenes() {
            // Strictly positive distance at the domain corners: every shape
            // fits with margin.
            for corner in [
                V3::new(1.0, 1.0, 1.0),
                V3::new(-1.0, 1.0, -1.0),
                V3::new(1.0, -1.0, 1.0),
                V3::new(-1.0, -1.0, -1.0),
            ] {
                assert!(scene.eval(corner) > 0.1, "{name} touches the domain edge");
            }
            // Each scene has a genuinely interior point (the torus is
            // probed on its ring — its center is the hole).
            let probe = if name == "torus" { V3::new(0.40, 0.0, 0.0) } else { V3::zeros() };
            assert!(scene.eval(probe) < -0.1, "{name} has no interior at {probe:?}");
        }

        let blob = blob_head();
        // Top of the upper lobe and bottom of the lower lobe are surface
        // points; the waist between the lobe centers is interior.
        assert_relative_eq!(blob.eval(V3::new(0.0, 0.44, 0.0)), 0.0, epsilon = 1e-12);
        assert!(blob.eval(V3::new(0.0, -0.42, 0.0)).abs() < 1e-9);
        assert!(blob.eval(V3::new(0.0, 0.0, 0.0)) < -0.3);
        // The sphere owns the top, the ellipsoid the bottom.
        assert_eq!(blob.nearest(V3::new(0.0, 0.5, 0.0)).0, 0);
        assert_eq!(blob.nearest(V3::new(0.0, -0.5, 0.0)).0, 1);
    }

    #[test]
    fn spec_validation_rejects_bad_inputs() {
        let good = SynthSpec::default();
        assert!(good.validate().is_ok());
        let mut bad = good.clone();
        bad.views = 4;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.albedos.pop();
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.albedos[0][1] = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = good;
        bad.distance = 0.8;
        assert!(bad.validate().is_err());
    }
}
