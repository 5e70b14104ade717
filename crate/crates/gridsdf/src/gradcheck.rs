//! Randomized finite-difference verification of every differentiable
//! building block: elementwise and structural tape operations, parameter
//! paths, the full field forward pass per parameter group, the rendering
//! networks, and the second-order spatial-gradient path.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::field::{FieldConfig, HybridField, LatentBank, TapeField};
use crate::grid::GridLevel;
use crate::optim::{Group, LiveSet, ParamBag, ParamId};
use crate::render::{RenderConfig, RenderNets, RenderTape};
use crate::rng::SeedSpring;
use crate::tape::{PTensor, Tape, Var};
use crate::V3;

/// First-order finite-difference step and acceptance threshold.
pub const FD_STEP: f64 = 1e-5;
pub const FIRST_ORDER_TOL: f64 = 1e-4;
/// Second-order paths (gradients of gradients) tolerate more noise.
pub const SECOND_ORDER_TOL: f64 = 1e-3;

/// Outcome of one operation's check: the worst relative error seen over
/// all trials, against its tolerance.
#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: String,
    pub trials: usize,
    pub max_rel: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckRow {
    fn new(name: &str, trials: usize, max_rel: f64, tolerance: f64) -> Self {
        GradCheckRow {
            name: name.to_string(),
            trials,
            max_rel,
            passed: max_rel <= tolerance,
            tolerance,
        }
    }
}

fn rel_l2(got: &Array2<f64>, want: &Array2<f64>) -> f64 {
    let num = (got - want).mapv(|v| v * v).sum().sqrt();
    let den = want.mapv(|v| v * v).sum().sqrt().max(1e-12);
    num / den
}

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
}

/// Keeps entries away from zero (for kinked or singular operations).
fn rand_mat_offset(rng: &mut ChaCha8Rng, rows: usize, cols: usize, min_abs: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        sign * rng.gen_range(min_abs..1.0)
    })
}

/// Full finite-difference check of the gradient with respect to a single
/// input matrix: `build` maps the input node to a scalar root.
fn check_input(
    name: &str,
    trials: usize,
    rng: &mut ChaCha8Rng,
    make: impl Fn(&mut ChaCha8Rng) -> Array2<f64>,
    build: impl Fn(&mut Tape<'_>, Var) -> Var,
) -> GradCheckRow {
    let eval = |x: &Array2<f64>| -> f64 {
        let mut t = Tape::new();
        let v = t.input(x.clone());
        let root = build(&mut t, v);
        t.scalar(root)
    };
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = make(rng);
        let mut t = Tape::new();
        let v = t.input(x.clone());
        let root = build(&mut t, v);
        let grads = t.backward(root);
        let got = grads.input_grad(v).expect("input gradient must exist").clone();

        let mut fd = Array2::zeros(x.raw_dim());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut hi = x.clone();
                hi[[i, j]] += FD_STEP;
                let mut lo = x.clone();
                lo[[i, j]] -= FD_STEP;
                fd[[i, j]] = (eval(&hi) - eval(&lo)) / (2.0 * FD_STEP);
            }
        }
        worst = worst.max(rel_l2(&got, &fd));
    }
    GradCheckRow::new(name, trials, worst, FIRST_ORDER_TOL)
}

/// Full finite-difference check of the gradient with respect to one
/// parameter tensor routed through `PTensor`.
fn check_param(
    name: &str,
    trials: usize,
    rng: &mut ChaCha8Rng,
    shape: (usize, usize),
    build: impl for<'a> Fn(&mut Tape<'a>, PTensor<'a>) -> Var,
) -> GradCheckRow {
    let id = ParamId::new(Group::Decoder, 0);
    let eval = |w: &Array2<f64>| -> f64 {
        let mut t = Tape::new();
        let root = build(&mut t, PTensor::new(w, id, true));
        t.scalar(root)
    };
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let w = rand_mat(rng, shape.0, shape.1, -1.0, 1.0);
        let got = {
            let mut t = Tape::new();
            let root = build(&mut t, PTensor::new(&w, id, true));
            let grads = t.backward(root);
            grads.params.get(&id).expect("parameter gradient must exist").clone()
        };
        let mut fd = Array2::zeros(w.raw_dim());
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let mut hi = w.clone();
                hi[[i, j]] += FD_STEP;
                let mut lo = w.clone();
                lo[[i, j]] -= FD_STEP;
                fd[[i, j]] = (eval(&hi) - eval(&lo)) / (2.0 * FD_STEP);
            }
        }
        worst = worst.max(rel_l2(&got, &fd));
    }
    GradCheckRow::new(name, trials, worst, FIRST_ORDER_TOL)
}

fn elementwise_rows(trials: usize, rng: &mut ChaCha8Rng) -> Vec<GradCheckRow> {
    let any = |rng: &mut ChaCha8Rng| rand_mat(rng, 3, 4, -0.9, 0.9);
    let off = |rng: &mut ChaCha8Rng| rand_mat_offset(rng, 3, 4, 0.05);
    let far = |rng: &mut ChaCha8Rng| rand_mat_offset(rng, 3, 4, 0.3);
    vec![
        check_input("softplus(beta=100)", trials, rng, any, |t, v| {
            let y = t.softplus(v, 100.0);
            t.sum_all(y)
        }),
        check_input("softplus(beta=1)", trials, rng, any, |t, v| {
            let y = t.softplus(v, 1.0);
            t.sum_all(y)
        }),
        check_input("sigmoid", trials, rng, any, |t, v| {
            let y = t.sigmoid(v, 1.0);
            t.sum_all(y)
        }),
        check_input("tanh", trials, rng, any, |t, v| {
            let y = t.tanh(v);
            t.sum_all(y)
        }),
        check_input("relu", trials, rng, off, |t, v| {
            let y = t.relu(v);
            t.sum_all(y)
        }),
        check_input("abs", trials, rng, off, |t, v| {
            let y = t.abs(v);
            t.sum_all(y)
        }),
        check_input("sin_scaled", trials, rng, any, |t, v| {
            let y = t.sin_scaled(v, 3.0);
            t.sum_all(y)
        }),
        check_input("cos_scaled", trials, rng, any, |t, v| {
            let y = t.cos_scaled(v, 3.0);
            t.sum_all(y)
        }),
        check_input("recip", trials, rng, far, |t, v| {
            let y = t.recip(v);
            t.sum_all(y)
        }),
        check_input("scale+add_scalar", trials, rng, any, |t, v| {
            let y = t.scale(v, -2.5);
            let z = t.add_scalar(y, 0.7);
            t.sum_all(z)
        }),
        check_input("mul(self)", trials, rng, any, |t, v| {
            let y = t.mul(v, v);
            t.sum_all(y)
        }),
        check_input("row_norm", trials, rng, far, |t, v| {
            let y = t.row_norm(v);
            t.sum_all(y)
        }),
        check_input("normalize_rows+dot_rows", trials, rng, far, |t, v| {
            let n = t.normalize_rows(v, 1e-12);
            let d = t.dot_rows(n, v);
            t.sum_all(d)
        }),
        check_input("mean_all", trials, rng, any, |t, v| t.mean_all(v)),
    ]
}

fn structural_rows(trials: usize, rng: &mut ChaCha8Rng) -> Vec<GradCheckRow> {
    let any = |rng: &mut ChaCha8Rng| rand_mat(rng, 3, 4, -0.9, 0.9);
    let col = |rng: &mut ChaCha8Rng| rand_mat(rng, 3, 1, -0.9, 0.9);
    let mut rows = vec![
        check_input("add/sub/neg mix", trials, rng, any, |t, v| {
            let a = t.neg(v);
            let b = t.sub(v, a);
            let c = t.add(b, v);
            t.sum_all(c)
        }),
        check_input("mul_col", trials, rng, col, |t, v| {
            let x = t.constant(Array2::from_shape_fn((3, 4), |(i, j)| {
                0.3 + 0.1 * i as f64 - 0.2 * j as f64
            }));
            let y = t.mul_col(x, v);
            t.sum_all(y)
        }),
        check_input("mul_row", trials, rng, any, |t, v| {
            let m = t.constant(Array2::from_shape_fn((1, 4), |(_, j)| 0.5 - 0.3 * j as f64));
            let y = t.mul_row(v, m);
            t.sum_all(y)
        }),
        check_input("concat_cols", trials, rng, any, |t, v| {
            let other = t.constant(Array2::from_elem((3, 2), 0.25));
            let y = t.concat_cols(&[v, other, v]);
            let z = t.mul(y, y);
            t.sum_all(z)
        }),
        check_input("matmul (input side)", trials, rng, any, |t, v| {
            let w = t.constant(Array2::from_shape_fn((4, 3), |(i, j)| {
                0.2 * i as f64 - 0.3 * j as f64 + 0.1
            }));
            let y = t.matmul(v, w);
            let z = t.tanh(y);
            t.sum_all(z)
        }),
    ];
    fn build_matmul_param<'a>(t: &mut Tape<'a>, p: PTensor<'a>) -> Var {
        let x = t.constant(Array2::from_shape_fn((3, 4), |(i, j)| {
            0.15 * i as f64 + 0.25 * j as f64 - 0.5
        }));
        let y = t.matmul(x, p);
        let z = t.sigmoid(y, 1.0);
        t.sum_all(z)
    }
    fn build_add_row<'a>(t: &mut Tape<'a>, p: PTensor<'a>) -> Var {
        let x = t.constant(Array2::from_shape_fn((3, 4), |(i, j)| {
            0.1 * (i * 4 + j) as f64 - 0.4
        }));
        let y = t.add_row(x, p);
        let z = t.tanh(y);
        t.sum_all(z)
    }
    fn build_read_row<'a>(t: &mut Tape<'a>, p: PTensor<'a>) -> Var {
        let r = t.read_row(p, 2);
        let y = t.mul(r, r);
        t.sum_all(y)
    }
    rows.push(check_param("matmul (parameter side)", trials, rng, (4, 3), build_matmul_param));
    rows.push(check_param("add_row bias", trials, rng, (1, 4), build_add_row));
    rows.push(check_param("read_row", trials, rng, (5, 4), build_read_row));
    rows
}

/// Trilinear gather: gradient with respect to the grid corner features.
fn gather_row(trials: usize, rng: &mut ChaCha8Rng) -> GradCheckRow {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut grid = GridLevel::new(1, 3); // 3^3 corners, 3 features
        for v in grid.values.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let pts: Vec<V3> = (0..4)
            .map(|_| {
                V3::new(
                    rng.gen_range(-0.85..0.85),
                    rng.gen_range(-0.85..0.85),
                    rng.gen_range(-0.85..0.85),
                )
            })
            .collect();
        let id = ParamId::new(Group::GridL4, 0);
        let eval = |g: &GridLevel| -> f64 {
            let plan = g.plan(&pts, false);
            let mut t = Tape::new();
            let v = t.gather(PTensor::new(&g.values, id, true), plan.idx.clone(), plan.w.clone());
            let y = t.mul(v, v);
            let root = t.sum_all(y);
            t.scalar(root)
        };
        let got = {
            let plan = grid.plan(&pts, false);
            let mut t = Tape::new();
            let v = t.gather(PTensor::new(&grid.values, id, true), plan.idx, plan.w);
            let y = t.mul(v, v);
            let root = t.sum_all(y);
            t.backward(root).params.get(&id).expect("grid gradient").clone()
        };
        let mut fd = Array2::zeros(grid.values.raw_dim());
        for i in 0..grid.values.nrows() {
            for j in 0..grid.values.ncols() {
                let orig = grid.values[[i, j]];
                grid.values[[i, j]] = orig + FD_STEP;
                let hi = eval(&grid);
                grid.values[[i, j]] = orig - FD_STEP;
                let lo = eval(&grid);
                grid.values[[i, j]] = orig;
                fd[[i, j]] = (hi - lo) / (2.0 * FD_STEP);
            }
        }
        worst = worst.max(rel_l2(&got, &fd));
    }
    GradCheckRow::new("grid gather", trials, worst, FIRST_ORDER_TOL)
}

fn small_field(rng: &mut ChaCha8Rng) -> (HybridField, LatentBank) {
    let cfg = FieldConfig {
        levels: vec![2, 3],
        feature_dim: 2,
        pe_freqs: 3,
        hidden: 24,
        latent_dim: 5,
        softplus_beta: 100.0,
        init_radius: 0.5,
    };
    let field = HybridField::geometric_init(cfg, rng);
    let mut bank = LatentBank::zeros(1, 5);
    for v in bank.z.iter_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    (field, bank)
}

fn probe_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<V3> {
    (0..n)
        .map(|_| {
            V3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
            )
        })
        .collect()
}

/// Directional probe: compares `<grad, U>` against a central difference
/// along a random unit direction `U` in one parameter tensor. Used for the
/// composite networks, where full per-entry FD would be quadratic.
fn directional_check<B: ParamBag>(
    name: &str,
    trials: usize,
    rng: &mut ChaCha8Rng,
    bag: &mut B,
    target: ParamId,
    mut eval: impl FnMut(&B) -> f64,
    grad_of: impl Fn(&B) -> Array2<f64>,
) -> GradCheckRow {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let g = grad_of(bag);
        let mut dir = Array2::zeros(g.raw_dim());
        for v in dir.iter_mut() {
            *v = rng.gen_range(-1.0f64..1.0);
        }
        let norm = dir.mapv(|v| v * v).sum().sqrt();
        dir.mapv_inplace(|v| v / norm);
        let analytic: f64 = (&g * &dir).sum();

        let apply = |bag: &mut B, sign: f64| {
            bag.visit_mut(&mut |id, w| {
                if id == target {
                    *w += &(sign * FD_STEP * &dir);
                }
            });
        };
        apply(bag, 1.0);
        let hi = eval(bag);
        apply(bag, -2.0);
        let lo = eval(bag);
        apply(bag, 1.0);
        let fd = (hi - lo) / (2.0 * FD_STEP);
        let rel = (analytic - fd).abs() / fd.abs().max(1e-12);
        worst = worst.max(rel);
    }
    GradCheckRow::new(name, trials, worst, FIRST_ORDER_TOL)
}

fn field_rows(trials: usize, rng: &mut ChaCha8Rng) -> Vec<GradCheckRow> {
    let (mut field, bank) = small_field(rng);
    let live: LiveSet = [Group::GridL4, Group::GridL5, Group::Decoder, Group::Latent]
        .into_iter()
        .collect();
    let pts = probe_points(rng, 4);

    // Scalar readout: sum of distances over the shared probe points.
    let eval_field = |f: &HybridField| -> f64 {
        let mut t = Tape::new();
        let tf = TapeField::new(f, &live).with_latent(&bank, 0);
        let d = tf.sdf(&mut t, &pts);
        let root = t.sum_all(d);
        t.scalar(root)
    };
    let grad_for = |f: &HybridField, id: ParamId| -> Array2<f64> {
        let mut t = Tape::new();
        let tf = TapeField::new(f, &live).with_latent(&bank, 0);
        let d = tf.sdf(&mut t, &pts);
        let root = t.sum_all(d);
        t.backward(root)
            .params
            .get(&id)
            .expect("composite gradient must exist")
            .clone()
    };

    let targets = [
        ("field d wrt grid level 0", ParamId::new(Group::GridL4, 0)),
        ("field d wrt grid level 1", ParamId::new(Group::GridL5, 0)),
        ("field d wrt first layer", ParamId::new(Group::Decoder, crate::field::SLOT_W_AUX)),
        ("field d wrt latent rows", ParamId::new(Group::Decoder, crate::field::SLOT_W_LAT)),
        ("field d wrt output layer", ParamId::new(Group::Decoder, crate::field::SLOT_W_OUT)),
    ];
    let mut rows = Vec::new();
    for (name, id) in targets {
        rows.push(directional_check(
            name,
            trials,
            rng,
            &mut field,
            id,
            &eval_field,
            |f| grad_for(f, id),
        ));
    }
    rows
}

/// The latent path: gradient with respect to the latent bank row.
fn latent_row_check(trials: usize, rng: &mut ChaCha8Rng) -> GradCheckRow {
    let (field, mut bank) = small_field(rng);
    let live: LiveSet = [Group::Latent].into_iter().collect();
    let pts = probe_points(rng, 4);
    let id = ParamId::new(Group::Latent, 0);
    let eval = |b: &LatentBank| -> f64 {
        let mut t = Tape::new();
        let tf = TapeField::new(&field, &live).with_latent(b, 0);
        let d = tf.sdf(&mut t, &pts);
        let root = t.sum_all(d);
        t.scalar(root)
    };
    let grad_of = |b: &LatentBank| -> Array2<f64> {
        let mut t = Tape::new();
        let tf = TapeField::new(&field, &live).with_latent(b, 0);
        let d = tf.sdf(&mut t, &pts);
        let root = t.sum_all(d);
        t.backward(root).params.get(&id).expect("latent gradient").clone()
    };
    directional_check("field d wrt latent", trials, rng, &mut bank, id, eval, grad_of)
}

fn render_rows(trials: usize, rng: &mut ChaCha8Rng) -> Vec<GradCheckRow> {
    let cfg = RenderConfig {
        q_hidden: 16,
        q_depth: 3,
        q_skip_after: 1,
        feature_len: 6,
        q_pe_freqs: 2,
        r_hidden: 16,
        r_depth: 2,
        r_pe_freqs: 2,
        softplus_beta: 100.0,
    };
    let mut nets = RenderNets::init(cfg, rng);
    let live: LiveSet = [Group::RenderQ, Group::RenderR].into_iter().collect();
    let pts = probe_points(rng, 3);
    let normals = Array2::from_shape_fn((3, 3), |(i, j)| if j == i % 3 { 1.0 } else { 0.0 });
    let views = Array2::from_shape_fn((3, 3), |(_, j)| if j == 2 { -1.0 } else { 0.0 });

    let eval = {
        let pts = pts.clone();
        let normals = normals.clone();
        let views = views.clone();
        let live = live.clone();
        move |n: &RenderNets| -> f64 {
            let mut t = Tape::new();
            let x = t.input(Array2::from_shape_fn((pts.len(), 3), |(i, a)| pts[i][a]));
            let rt = RenderTape { nets: n, live: &live };
            let c = rt.radiance(&mut t, x, &normals, &views);
            let root = t.sum_all(c);
            t.scalar(root)
        }
    };
    let grad_for = |n: &RenderNets, id: ParamId| -> Array2<f64> {
        let mut t = Tape::new();
        let x = t.input(Array2::from_shape_fn((pts.len(), 3), |(i, a)| pts[i][a]));
        let rt = RenderTape { nets: n, live: &live };
        let c = rt.radiance(&mut t, x, &normals, &views);
        let root = t.sum_all(c);
        t.backward(root).params.get(&id).expect("render gradient").clone()
    };

    let mut rows = Vec::new();
    for (name, id) in [
        ("radiance wrt feature net", ParamId::new(Group::RenderQ, 0)),
        ("radiance wrt feature head", ParamId::new(Group::RenderQ, 6)),
        ("radiance wrt color net", ParamId::new(Group::RenderR, 0)),
        ("radiance wrt color head", ParamId::new(Group::RenderR, 4)),
    ] {
        rows.push(directional_check(
            name,
            trials,
            rng,
            &mut nets,
            id,
            eval.clone(),
            |n| grad_for(n, id),
        ));
    }
    rows
}

/// Second-order path: the spatial gradient's dependence on parameters.
/// Readout is `sum(grad d . u)` for a fixed direction `u`; its parameter
/// gradient exercises the tangent-channel machinery end to end.
fn second_order_row(trials: usize, rng: &mut ChaCha8Rng) -> GradCheckRow {
    let (mut field, bank) = small_field(rng);
    let live: LiveSet = [Group::Decoder, Group::GridL4, Group::GridL5].into_iter().collect();
    let pts = probe_points(rng, 3);
    let u = Array2::from_shape_fn((3, 3), |(_, j)| [0.6, -0.64, 0.48][j]);
    let id = ParamId::new(Group::Decoder, crate::field::SLOT_W2);

    let eval = {
        let pts = pts.clone();
        let u = u.clone();
        let live = live.clone();
        let bank = bank.clone();
        move |f: &HybridField| -> f64 {
            let mut t = Tape::new();
            let tf = TapeField::new(f, &live).with_latent(&bank, 0);
            let (_, g) = tf.sdf_with_spatial_grad(&mut t, &pts);
            let uc = t.constant(u.clone());
            let dots = t.dot_rows(g, uc);
            let root = t.sum_all(dots);
            t.scalar(root)
        }
    };
    let grad_of = move |f: &HybridField| -> Array2<f64> {
        let mut t = Tape::new();
        let tf = TapeField::new(f, &live).with_latent(&bank, 0);
        let (_, g) = tf.sdf_with_spatial_grad(&mut t, &pts);
        let uc = t.constant(u.clone());
        let dots = t.dot_rows(g, uc);
        let root = t.sum_all(dots);
        t.backward(root).params.get(&id).expect("second-order gradient").clone()
    };

    let mut row = directional_check(
        "spatial-grad wrt layer 2 (second order)",
        trials,
        rng,
        &mut field,
        id,
        eval,
        grad_of,
    );
    row.tolerance = SECOND_ORDER_TOL;
    row.passed = row.max_rel <= SECOND_ORDER_TOL;
    row
}

/// Runs the whole suite. Every row must pass for the differentiation core
/// to be considered sound.
pub fn run_full_suite(trials: usize, seed: u64) -> Vec<GradCheckRow> {
    let mut rng = SeedSpring::new(seed).child("gradcheck", 0).rng();
    let mut rows = Vec::new();
    rows.extend(elementwise_rows(trials, &mut rng));
    rows.extend(structural_rows(trials, &mut rng));
    rows.push(gather_row(trials, &mut rng));
    rows.extend(field_rows(trials, &mut rng));
    rows.push(latent_row_check(trials, &mut rng));
    rows.extend(render_rows(trials, &mut rng));
    rows.push(second_order_row(trials, &mut rng));
    rows
}

/// Formats rows as an aligned text table.
pub fn format_table(rows: &[GradCheckRow]) -> String {
    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!(
        "{:<name_w$}  {:>7}  {:>12}  {:>9}  result\n",
        "op", "trials", "max rel err", "tolerance"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<name_w$}  {:>7}  {:>12.3e}  {:>9.0e}  {}\n",
            r.name,
            r.trials,
            r.max_rel,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes_everywhere() {
        let rows = run_full_suite(5, 1234);
        assert!(rows.len() >= 25, "suite shrank to {} rows", rows.len());
        for r in &rows {
            assert!(
                r.passed,
                "{} failed: max rel {} > {}",
                r.name, r.max_rel, r.tolerance
            );
        }
        let table = format_table(&rows);
        assert!(table.contains("pass"));
    }

    #[test]
    fn suite_is_deterministic() {
        let a = run_full_suite(3, 7);
        let b = run_full_suite(3, 7);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.max_rel, y.max_rel);
        }
    }
}
