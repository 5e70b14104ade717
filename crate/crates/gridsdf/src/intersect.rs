//! Ray / SDF surface intersection.
//!
//! Two interchangeable root finders over the segment of a ray inside the
//! `[-1, 1]^3` domain:
//!
//! - [`Intersector::Sampled`]: evaluate the field at `n_coarse` uniform
//!   samples, take the first sign-change interval, refine it with `n_fine`
//!   uniform samples, then interpolate the zero linearly. If the linear
//!   estimate is not within `tol` of the surface, bisect the bracket until
//!   it is.
//! - [`Intersector::SphereTrace`]: classic sphere tracing (`t += d`), with
//!   bisection refinement once a step overshoots into the interior.
//!
//! Both report, per ray, an optional hit (position, `t`, sign-change
//! bracket) plus the minimum sampled distance and its `t` — the mask loss
//! needs the closest-approach information for rays that miss.
//!
//! Evaluation is batched across rays: learned fields answer large batches
//! through matrix products, so the drivers gather *all* pending sample
//! positions into one query per phase rather than walking rays one by one.

use crate::camera::Ray;
use crate::field::Sdf;
use crate::V3;

/// Entry/exit parameters of a ray against the axis-aligned cube
/// `[-1, 1]^3`, clipped to start no earlier than `near`.
pub fn clip_to_domain(ray: &Ray, near: f64) -> Option<(f64, f64)> {
    let mut t0 = near;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.dir[a];
        if d.abs() < 1e-15 {
            if !(-1.0..=1.0).contains(&o) {
                return None;
            }
            continue;
        }
        let (mut lo, mut hi) = ((-1.0 - o) / d, (1.0 - o) / d);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t0 < t1).then_some((t0, t1))
}

/// A surface hit.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub t: f64,
    pub x: V3,
    /// Sign-change bracket `(t_outside, t_inside)` that contained the root.
    /// For rays that start inside the surface both ends equal the entry `t`.
    pub bracket: (f64, f64),
    /// The ray entered the domain already inside the surface.
    pub started_inside: bool,
}

/// Per-ray intersection outcome.
#[derive(Debug, Clone, Copy)]
pub struct RayOutcome {
    pub hit: Option<Hit>,
    /// Minimum field value seen along the segment, and where.
    pub min_d: f64,
    pub t_at_min: f64,
}

impl RayOutcome {
    fn missed_domain() -> Self {
        RayOutcome { hit: None, min_d: f64::INFINITY, t_at_min: 0.0 }
    }
}

/// Root-finding strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Intersector {
    Sampled { n_coarse: usize, n_fine: usize },
    SphereTrace { max_steps: usize },
}

impl Default for Intersector {
    fn default() -> Self {
        Intersector::Sampled { n_coarse: 64, n_fine: 32 }
    }
}

/// Shared intersection settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceConfig {
    pub intersector: Intersector,
    /// Accept a root once `|d| <= tol`.
    pub tol: f64,
    /// Rays start no earlier than this parameter.
    pub near: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig { intersector: Intersector::default(), tol: 1e-4, near: 0.0 }
    }
}

/// Intersect a batch of rays. Field evaluations are batched across rays.
pub fn intersect_batch(field: &dyn Sdf, rays: &[Ray], cfg: &TraceConfig) -> Vec<RayOutcome> {
    match cfg.intersector {
        Intersector::Sampled { n_coarse, n_fine } => {
            sampled_batch(field, rays, cfg, n_coarse, n_fine)
        }
        Intersector::SphereTrace { max_steps } => sphere_trace_batch(field, rays, cfg, max_steps),
    }
}

fn sampled_batch(
    field: &dyn Sdf,
    rays: &[Ray],
    cfg: &TraceConfig,
    n_coarse: usize,
    n_fine: usize,
) -> Vec<RayOutcome> {
    assert!(n_coarse >= 2 && n_fine >= 2);
    let spans: Vec<Option<(f64, f64)>> =
        rays.iter().map(|r| clip_to_domain(r, cfg.near)).collect();

    // Phase 1: coarse samples for every ray inside the domain.
    let mut pts = Vec::new();
    let mut owners = Vec::new();
    for (i, (ray, span)) in rays.iter().zip(&spans).enumerate() {
        if let Some((t0, t1)) = span {
            let step = (t1 - t0) / (n_coarse - 1) as f64;
            for k in 0..n_coarse {
                pts.push(ray.at(t0 + step * k as f64));
                owners.push(i);
            }
        }
    }
    let ds = field.eval_batch(&pts);

    let mut out = vec![RayOutcome::missed_domain(); rays.len()];
    let mut brackets: Vec<(usize, f64, f64, f64, f64)> = Vec::new(); // ray, ta, tb, da, db
    let mut cursor = 0;
    for (i, (ray, span)) in rays.iter().zip(&spans).enumerate() {
        let Some((t0, t1)) = *span else { continue };
        let step = (t1 - t0) / (n_coarse - 1) as f64;
        let d = &ds[cursor..cursor + n_coarse];
        cursor += n_coarse;
        let _ = ray;
        let mut min_d = f64::INFINITY;
        let mut t_at_min = t0;
        for (k, &dk) in d.iter().enumerate() {
            let tk = t0 + step * k as f64;
            if dk < min_d {
                min_d = dk;
                t_at_min = tk;
            }
        }
        out[i] = RayOutcome { hit: None, min_d, t_at_min };
        if d[0] <= 0.0 {
            out[i].hit = Some(Hit {
                t: t0,
                x: rays[i].at(t0),
                bracket: (t0, t0),
                started_inside: true,
            });
            continue;
        }
        if let Some(k) = (0..n_coarse - 1).find(|&k| d[k] > 0.0 && d[k + 1] <= 0.0) {
            let (ta, tb) = (t0 + step * k as f64, t0 + step * (k + 1) as f64);
            brackets.push((i, ta, tb, d[k], d[k + 1]));
        }
    }

    // Phase 2: refine each bracket with uniform fine samples.
    let mut pts = Vec::with_capacity(brackets.len() * n_fine);
    for &(i, ta, tb, _, _) in &brackets {
        let step = (tb - ta) / (n_fine + 1) as f64;
        for k in 1..=n_fine {
            pts.push(rays[i].at(ta + step * k as f64));
        }
    }
    let ds = field.eval_batch(&pts);
    let mut roots: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
    for (bi, &(i, ta, tb, da, db)) in brackets.iter().enumerate() {
        let step = (tb - ta) / (n_fine + 1) as f64;
        let d = &ds[bi * n_fine..(bi + 1) * n_fine];
        let mut lo = (ta, da);
        let mut hi = (tb, db);
        for (k, &dk) in d.iter().enumerate() {
            let tk = ta + step * (k + 1) as f64;
            if dk > 0.0 {
                lo = (tk, dk);
            } else {
                hi = (tk, dk);
                break;
            }
        }
        roots.push((i, lo.0, hi.0, lo.1, hi.1));
    }

    // Phase 3: linear interpolation, verified; bisect when the field is too
    // nonlinear inside the final interval.
    let mut active: Vec<(usize, f64, f64, f64, f64)> = roots;
    for _round in 0..64 {
        if active.is_empty() {
            break;
        }
        let pts: Vec<V3> = active
            .iter()
            .map(|&(i, ta, tb, da, db)| {
                let t = interp_zero(ta, tb, da, db);
                rays[i].at(t)
            })
            .collect();
        let ds = field.eval_batch(&pts);
        let mut next = Vec::new();
        for (&(i, ta, tb, da, db), &dm) in active.iter().zip(&ds) {
            let tm = interp_zero(ta, tb, da, db);
            if dm.abs() <= cfg.tol || (tb - ta) < 1e-14 {
                out[i].hit = Some(Hit {
                    t: tm,
                    x: rays[i].at(tm),
                    bracket: (ta, tb),
                    started_inside: false,
                });
                if dm < out[i].min_d {
                    out[i].min_d = dm;
                    out[i].t_at_min = tm;
                }
            } else if dm > 0.0 {
                next.push((i, tm, tb, dm, db));
            } else {
                next.push((i, ta, tm, da, dm));
            }
        }
        active = next;
    }
    // Anything still active converged in t but not in |d|; accept midpoint.
    for (i, ta, tb, da, db) in active {
        let tm = interp_zero(ta, tb, da, db);
        out[i].hit = Some(Hit {
            t: tm,
            x: rays[i].at(tm),
            bracket: (ta, tb),
            started_inside: false,
        });
    }
    out
}

/// Zero of the secant through `(ta, da)` and `(tb, db)`, clamped inside.
fn interp_zero(ta: f64, tb: f64, da: f64, db: f64) -> f64 {
    if (da - db).abs() < 1e-300 {
        return 0.5 * (ta + tb);
    }
    let t = ta + da * (tb - ta) / (da - db);
    t.clamp(ta.min(tb), ta.max(tb))
}

fn sphere_trace_batch(
    field: &dyn Sdf,
    rays: &[Ray],
    cfg: &TraceConfig,
    max_steps: usize,
) -> Vec<RayOutcome> {
    let spans: Vec<Option<(f64, f64)>> =
        rays.iter().map(|r| clip_to_domain(r, cfg.near)).collect();
    let mut out = vec![RayOutcome::missed_domain(); rays.len()];

    // March state per active ray: (ray index, current t, previous (t, d)).
    struct March {
        ray: usize,
        t: f64,
        t1: f64,
        prev: Option<(f64, f64)>,
    }
    let mut walking: Vec<March> = Vec::new();
    for (i, span) in spans.iter().enumerate() {
        if let Some((t0, t1)) = *span {
            out[i] = RayOutcome { hit: None, min_d: f64::INFINITY, t_at_min: t0 };
            walking.push(March { ray: i, t: t0, t1, prev: None });
        }
    }

    // (ray, lo, hi, d_lo, d_hi) brackets found by overshooting.
    let mut brackets: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
    for _step in 0..max_steps {
        if walking.is_empty() {
            break;
        }
        let pts: Vec<V3> = walking.iter().map(|m| rays[m.ray].at(m.t)).collect();
        let ds = field.eval_batch(&pts);
        let mut next = Vec::new();
        for (mut m, &d) in walking.into_iter().zip(&ds) {
            let o = &mut out[m.ray];
            if d < o.min_d {
                o.min_d = d;
                o.t_at_min = m.t;
            }
            if d.abs() <= cfg.tol {
                let started_inside = m.prev.is_none() && d < 0.0;
                o.hit = Some(Hit {
                    t: m.t,
                    x: rays[m.ray].at(m.t),
                    bracket: m.prev.map_or((m.t, m.t), |(tp, _)| (tp, m.t)),
                    started_inside,
                });
                continue;
            }
            if d < 0.0 {
                match m.prev {
                    // Entered the domain inside the surface.
                    None => {
                        o.hit = Some(Hit {
                            t: m.t,
                            x: rays[m.ray].at(m.t),
                            bracket: (m.t, m.t),
                            started_inside: true,
                        });
                    }
                    // Overshot: refine the sign change by bisection.
                    Some((tp, dp)) => brackets.push((m.ray, tp, m.t, dp, d)),
                }
                continue;
            }
            let t_next = m.t + d;
            if t_next > m.t1 {
                continue; // left the domain: miss
            }
            m.prev = Some((m.t, d));
            m.t = t_next;
            next.push(m);
        }
        walking = next;
    }
    // Rays that exhausted max_steps without concluding count as misses with
    // whatever min_d they saw (grazing rays land here).

    // Bisection rounds, batched across pending brackets.
    let mut active = brackets;
    for _round in 0..64 {
        if active.is_empty() {
            break;
        }
        let pts: Vec<V3> = active
            .iter()
            .map(|&(i, lo, hi, _, _)| rays[i].at(0.5 * (lo + hi)))
            .collect();
        let ds = field.eval_batch(&pts);
        let mut next = Vec::new();
        for (&(i, lo, hi, dlo, dhi), &dm) in active.iter().zip(&ds) {
            let tm = 0.5 * (lo + hi);
            let o = &mut out[i];
            if dm < o.min_d {
                o.min_d = dm;
                o.t_at_min = tm;
            }
            if dm.abs() <= cfg.tol || (hi - lo) < 1e-14 {
                o.hit = Some(Hit {
                    t: tm,
                    x: rays[i].at(tm),
                    bracket: (lo, hi),
                    started_inside: false,
                });
            } else if dm > 0.0 {
                next.push((i, tm, hi, dm, dhi));
            } else {
                next.push((i, lo, tm, dlo, dm));
            }
        }
        active = next;
    }
    out
}

/// Agreement statistics between two intersectors over the same rays.
#[derive(Debug, Clone)]
pub struct Agreement {
    pub rays: usize,
    pub both_hit: usize,
    pub both_miss: usize,
    pub disagree: usize,
    /// Max and mean |t_a - t_b| over rays both methods hit.
    pub max_dt: f64,
    pub mean_dt: f64,
}

impl Agreement {
    pub fn agreement_rate(&self) -> f64 {
        (self.both_hit + self.both_miss) as f64 / self.rays.max(1) as f64
    }
}

pub fn compare_outcomes(a: &[RayOutcome], b: &[RayOutcome]) -> Agreement {
    assert_eq!(a.len(), b.len());
    let mut s = Agreement {
        rays: a.len(),
        both_hit: 0,
        both_miss: 0,
        disagree: 0,
        max_dt: 0.0,
        mean_dt: 0.0,
    };
    let mut dt_sum = 0.0;
    for (oa, ob) in a.iter().zip(b) {
        match (&oa.hit, &ob.hit) {
            (Some(ha), Some(hb)) => {
                s.both_hit += 1;
                let dt = (ha.t - hb.t).abs();
                s.max_dt = s.max_dt.max(dt);
                dt_sum += dt;
            }
            (None, None) => s.both_miss += 1,
            _ => s.disagree += 1,
        }
    }
    if s.both_hit > 0 {
        s.mean_dt = dt_sum / s.both_hit as f64;
    }
    s
}

/// One row of the intersection benchmark report.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub method: String,
    pub rays_per_sec: f64,
    pub hit_rate: f64,
    /// Mean |d| at reported hit points (residual surface error).
    pub mean_abs_d_at_hits: f64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "method,rays_per_sec,hit_rate,mean_abs_d_at_hits";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.3},{:.6},{:.3e}",
            self.method, self.rays_per_sec, self.hit_rate, self.mean_abs_d_at_hits
        )
    }
}

/// Time one intersector over `rays` and summarize as a benchmark row.
pub fn bench_intersector(
    field: &dyn Sdf,
    rays: &[Ray],
    cfg: &TraceConfig,
    method: &str,
) -> (BenchRow, Vec<RayOutcome>) {
    let t0 = std::time::Instant::now();
    let outcomes = intersect_batch(field, rays, cfg);
    let dt = t0.elapsed().as_secs_f64();
    let hits: Vec<&Hit> = outcomes.iter().filter_map(|o| o.hit.as_ref()).collect();
    let mean_abs_d = if hits.is_empty() {
        0.0
    } else {
        let ds = field.eval_batch(&hits.iter().map(|h| h.x).collect::<Vec<_>>());
        ds.iter().map(|d| d.abs()).sum::<f64>() / ds.len() as f64
    };
    let row = BenchRow {
        method: method.to_string(),
        rays_per_sec: rays.len() as f64 / dt.max(1e-12),
        hit_rate: hits.len() as f64 / rays.len().max(1) as f64,
        mean_abs_d_at_hits: mean_abs_d,
    };
    (row, outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{AnalyticScene, Shape};
    use crate::camera::Ray;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn sphere_scene() -> AnalyticScene {
        AnalyticScene::new(vec![Shape::Sphere { center: [0.0; 3], radius: 0.5 }])
    }

    fn axis_ray() -> Ray {
        Ray { origin: V3::new(0.0, 0.0, 2.2), dir: V3::new(0.0, 0.0, -1.0) }
    }

    #[test]
    fn clipping_finds_cube_entry_and_exit() {
        let (t0, t1) = clip_to_domain(&axis_ray(), 0.0).unwrap();
        assert_relative_eq!(t0, 1.2, epsilon = 1e-12);
        assert_relative_eq!(t1, 3.2, epsilon = 1e-12);
        // A ray that misses the cube.
        let miss = Ray { origin: V3::new(0.0, 5.0, 2.2), dir: V3::new(0.0, 0.0, -1.0) };
        assert!(clip_to_domain(&miss, 0.0).is_none());
        // Starting inside clips at `near`.
        let inside = Ray { origin: V3::zeros(), dir: V3::new(1.0, 0.0, 0.0) };
        let (t0, t1) = clip_to_domain(&inside, 0.0).unwrap();
        assert_relative_eq!(t0, 0.0);
        assert_relative_eq!(t1, 1.0);
    }

    #[test]
    fn both_methods_hit_a_sphere_where_geometry_says() {
        let scene = sphere_scene();
        let ray = axis_ray();
        for intersector in [
            Intersector::Sampled { n_coarse: 64, n_fine: 32 },
            Intersector::SphereTrace { max_steps: 256 },
        ] {
            let cfg = TraceConfig { intersector, ..Default::default() };
            let out = intersect_batch(&scene, &[ray], &cfg);
            let hit = out[0].hit.expect("must hit");
            assert_relative_eq!(hit.t, 1.7, epsilon = 2e-4);
            assert!(scene.eval(hit.x).abs() <= 1e-4 + 1e-12);
            assert!(!hit.started_inside);
        }
    }

    #[test]
    fn sampled_hits_carry_valid_brackets() {
        let scene = sphere_scene();
        let mut rng = crate::rng::SeedSpring::new(31).rng();
        let rays: Vec<Ray> = (0..200)
            .map(|_| {
                let o = V3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), 2.2);
                let target = V3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 0.0);
                Ray { origin: o, dir: (target - o).normalize() }
            })
            .collect();
        let out = intersect_batch(&scene, &rays, &TraceConfig::default());
        for o in &out {
            if let Some(h) = o.hit {
                if h.started_inside {
                    continue;
                }
                assert!(scene.eval(rays[0].at(h.bracket.0)).is_finite());
                assert!(h.bracket.0 <= h.t && h.t <= h.bracket.1);
            }
        }
        let hits = out.iter().filter(|o| o.hit.is_some()).count();
        assert!(hits > 150, "most central rays should hit, got {hits}");
    }

    #[test]
    fn misses_report_closest_approach() {
        let scene = sphere_scene();
        // Passes 0.6 from the center: min distance 0.1.
        let ray = Ray { origin: V3::new(0.6, 0.0, 2.2), dir: V3::new(0.0, 0.0, -1.0) };
        for intersector in [
            Intersector::Sampled { n_coarse: 96, n_fine: 16 },
            Intersector::SphereTrace { max_steps: 256 },
        ] {
            let cfg = TraceConfig { intersector, ..Default::default() };
            let o = intersect_batch(&scene, &[ray], &cfg)[0];
            assert!(o.hit.is_none());
            assert_relative_eq!(o.min_d, 0.1, epsilon = 5e-3);
            assert_relative_eq!(o.t_at_min, 2.2, epsilon = 0.1);
        }
    }

    #[test]
    fn rays_starting_inside_are_flagged() {
        let scene = sphere_scene();
        let ray = Ray { origin: V3::new(0.1, 0.0, 0.0), dir: V3::new(1.0, 0.0, 0.0) };
        for intersector in [
            Intersector::Sampled { n_coarse: 32, n_fine: 8 },
            Intersector::SphereTrace { max_steps: 64 },
        ] {
            let cfg = TraceConfig { intersector, ..Default::default() };
            let o = intersect_batch(&scene, &[ray], &cfg)[0];
            let h = o.hit.expect("inside counts as an immediate hit");
            assert!(h.started_inside);
            assert_relative_eq!(h.t, 0.0);
        }
    }

    #[test]
    fn methods_agree_on_mixed_scenes() {
        let scene = AnalyticScene::new(vec![
            Shape::Box { center: [-0.3, 0.0, 0.0], half: [0.25, 0.3, 0.25] },
            Shape::Torus { center: [0.4, 0.0, 0.0], major: 0.25, minor: 0.1 },
        ]);
        let mut rng = crate::rng::SeedSpring::new(32).rng();
        let rays: Vec<Ray> = (0..500)
            .map(|_| {
                let dir = V3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    -1.0,
                )
                .normalize();
                Ray { origin: V3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 2.0), dir }
            })
            .collect();
        let a = intersect_batch(&scene, &rays, &TraceConfig::default());
        let b = intersect_batch(
            &scene,
            &rays,
            &TraceConfig {
                intersector: Intersector::SphereTrace { max_steps: 256 },
                ..Default::default()
            },
        );
        let agreement = compare_outcomes(&a, &b);
        assert!(
            agreement.agreement_rate() >= 0.99,
            "agreement {:.4}",
            agreement.agreement_rate()
        );
        assert!(agreement.max_dt <= 5e-3, "max dt {}", agreement.max_dt);
    }

    #[test]
    fn bench_rows_format_as_csv() {
        let row = BenchRow {
            method: "sampled".into(),
            rays_per_sec: 123456.789,
            hit_rate: 0.7312,
            mean_abs_d_at_hits: 3.2e-5,
        };
        assert_eq!(BenchRow::CSV_HEADER.split(',').count(), 4);
        assert!(row.to_csv().starts_with("sampled,123456.789,0.731200,"));
    }
}
