//! Dense voxel feature grids over the domain `[-1, 1]^3`.
//!
//! A level-`l` grid has `2^l` cells per axis and `(2^l + 1)^3` corners, each
//! holding a learned feature vector. Features are stored as one `(corners,
//! feature_dim)` tensor whose row index is z-major: `((z * c) + y) * c + x`
//! with `x` fastest, `c = 2^l + 1`.
//!
//! Queries are trilinear. Positions outside the domain clamp to the nearest
//! face, so the field is constant (gradient zero) beyond the cube. A query
//! exactly on a corner reproduces the stored feature bit-for-bit: its weight
//! is exactly 1.0 and zero-weight corners are skipped rather than
//! accumulated.

use ndarray::Array2;

use crate::V3;

/// One resolution level of the feature pyramid.
#[derive(Debug, Clone)]
pub struct GridLevel {
    level: u32,
    res: usize,
    fdim: usize,
    /// `(corners, fdim)` feature table; this is the trainable tensor.
    pub values: Array2<f64>,
}

/// Corner indices, interpolation weights and (optionally) weight gradients
/// for a batch of query positions, in the flattened layout the tape's
/// gather op consumes.
#[derive(Debug, Clone)]
pub struct GatherPlan {
    /// `(n * 8)` row indices into the feature table.
    pub idx: Vec<u32>,
    /// `(n, 8)` trilinear weights.
    pub w: Array2<f64>,
    /// Per-axis weight derivatives `dw/dx_axis`, each `(n, 8)`.
    pub dw: Option<[Array2<f64>; 3]>,
}

impl GridLevel {
    /// Zero-initialized grid with `2^level` cells per axis.
    pub fn new(level: u32, fdim: usize) -> Self {
        let res = 1usize << level;
        let corners = (res + 1).pow(3);
        assert!(corners <= u32::MAX as usize, "grid too large for u32 indices");
        GridLevel {
            level,
            res,
            fdim,
            values: Array2::zeros((corners, fdim)),
        }
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    /// Cells per axis (`2^level`).
    pub fn resolution(&self) -> usize {
        self.res
    }

    pub fn feature_dim(&self) -> usize {
        self.fdim
    }

    /// Corners per axis.
    pub fn corners_per_axis(&self) -> usize {
        self.res + 1
    }

    pub fn corner_count(&self) -> usize {
        (self.res + 1).pow(3)
    }

    /// Flat row index of corner `(x, y, z)`.
    pub fn corner_index(&self, x: usize, y: usize, z: usize) -> usize {
        let c = self.res + 1;
        debug_assert!(x < c && y < c && z < c);
        (z * c + y) * c + x
    }

    /// World position of corner `(x, y, z)`.
    pub fn corner_position(&self, x: usize, y: usize, z: usize) -> V3 {
        let h = 2.0 / self.res as f64;
        V3::new(
            -1.0 + h * x as f64,
            -1.0 + h * y as f64,
            -1.0 + h * z as f64,
        )
    }

    /// Cell index and fractional offset along one axis, with clamping.
    ///
    /// Interior cell boundaries take the floor convention (the query lands
    /// at fraction 0 of the upper cell); the far face `+1` lands at fraction
    /// 1 of the last cell so no wrap occurs.
    fn locate(&self, x: f64) -> (usize, f64) {
        let u = (x + 1.0) * 0.5 * self.res as f64;
        if u <= 0.0 {
            return (0, 0.0);
        }
        let max_cell = self.res - 1;
        if u >= self.res as f64 {
            return (max_cell, 1.0);
        }
        let i = (u.floor() as usize).min(max_cell);
        (i, u - i as f64)
    }

    /// The 8 corner rows and trilinear weights for `p`, plus `dw/dp` when
    /// `with_grad` is set. Outside the domain the weights are those of the
    /// clamped point and the derivatives are zero along the clamped axes.
    pub fn corner_weights(&self, p: V3, with_grad: bool) -> ([u32; 8], [f64; 8], [[f64; 3]; 8]) {
        let (ix, fx) = self.locate(p.x);
        let (iy, fy) = self.locate(p.y);
        let (iz, fz) = self.locate(p.z);
        // d(fraction)/d(world coordinate), zero where the query clamped.
        let scale = 0.5 * self.res as f64;
        let inside = |v: f64| v > -1.0 && v < 1.0;
        let (sx, sy, sz) = (
            if inside(p.x) { scale } else { 0.0 },
            if inside(p.y) { scale } else { 0.0 },
            if inside(p.z) { scale } else { 0.0 },
        );

        let mut idx = [0u32; 8];
        let mut w = [0.0f64; 8];
        let mut dw = [[0.0f64; 3]; 8];
        let c = self.res + 1;
        for (j, &(dz, dy, dx)) in CORNER_OFFSETS.iter().enumerate() {
            let wx = if dx == 0 { 1.0 - fx } else { fx };
            let wy = if dy == 0 { 1.0 - fy } else { fy };
            let wz = if dz == 0 { 1.0 - fz } else { fz };
            let flat = ((iz + dz) * c + (iy + dy)) * c + (ix + dx);
            idx[j] = flat as u32;
            w[j] = wx * wy * wz;
            if with_grad {
                let gx = if dx == 0 { -1.0 } else { 1.0 };
                let gy = if dy == 0 { -1.0 } else { 1.0 };
                let gz = if dz == 0 { -1.0 } else { 1.0 };
                dw[j] = [gx * wy * wz * sx, wx * gy * wz * sy, wx * wy * gz * sz];
            }
        }
        (idx, w, dw)
    }

    /// Trilinear feature lookup for a single position.
    pub fn interpolate(&self, p: V3) -> Vec<f64> {
        let (idx, w, _) = self.corner_weights(p, false);
        let mut out = vec![0.0; self.fdim];
        for j in 0..8 {
            if w[j] != 0.0 {
                let row = self.values.row(idx[j] as usize);
                for (o, v) in out.iter_mut().zip(row.iter()) {
                    *o += w[j] * v;
                }
            }
        }
        out
    }

    /// Gather plan for a batch of positions (for the tape's gather op and
    /// the tangent gathers used by spatial gradients).
    pub fn plan(&self, ps: &[V3], with_grad: bool) -> GatherPlan {
        let n = ps.len();
        let mut idx = Vec::with_capacity(n * 8);
        let mut w = Array2::zeros((n, 8));
        let mut dw = if with_grad {
            Some([
                Array2::zeros((n, 8)),
                Array2::zeros((n, 8)),
                Array2::zeros((n, 8)),
            ])
        } else {
            None
        };
        for (i, p) in ps.iter().enumerate() {
            let (ci, cw, cdw) = self.corner_weights(*p, with_grad);
            idx.extend_from_slice(&ci);
            for j in 0..8 {
                w[[i, j]] = cw[j];
            }
            if let Some(d) = dw.as_mut() {
                for j in 0..8 {
                    for a in 0..3 {
                        d[a][[i, j]] = cdw[j][a];
                    }
                }
            }
        }
        GatherPlan { idx, w, dw }
    }
}

/// The 8 cell-corner offsets in (z, y, x) nesting order, x fastest.
const CORNER_OFFSETS: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn filled_grid(level: u32, fdim: usize, seed: u64) -> GridLevel {
        let mut g = GridLevel::new(level, fdim);
        let mut rng = crate::rng::SeedSpring::new(seed).rng();
        g.values.mapv_inplace(|_| rng.gen_range(-2.0..2.0));
        g
    }

    #[test]
    fn corner_queries_are_bit_exact() {
        let g = filled_grid(3, 4, 11);
        let c = g.corners_per_axis();
        for z in [0, 3, c - 1] {
            for y in [0, 5, c - 1] {
                for x in 0..c {
                    let p = g.corner_position(x, y, z);
                    let f = g.interpolate(p);
                    let row = g.values.row(g.corner_index(x, y, z));
                    for (a, b) in f.iter().zip(row.iter()) {
                        assert_eq!(a.to_bits(), b.to_bits(), "corner ({x},{y},{z})");
                    }
                }
            }
        }
    }

    #[test]
    fn index_layout_is_z_major_x_fastest() {
        let g = GridLevel::new(2, 1);
        let c = g.corners_per_axis();
        assert_eq!(g.corner_index(1, 0, 0), 1);
        assert_eq!(g.corner_index(0, 1, 0), c);
        assert_eq!(g.corner_index(0, 0, 1), c * c);
    }

    proptest! {
        /// Trilinear interpolation reproduces affine fields to near machine
        /// precision, including at cell boundaries and domain faces.
        #[test]
        fn affine_fields_reproduce(
            a in prop::array::uniform3(-2.0f64..2.0),
            b in -2.0f64..2.0,
            q in prop::array::uniform3(-1.0f64..1.0),
            on_face in prop::bool::ANY,
        ) {
            let mut g = GridLevel::new(4, 1);
            let c = g.corners_per_axis();
            for z in 0..c {
                for y in 0..c {
                    for x in 0..c {
                        let p = g.corner_position(x, y, z);
                        let row = g.corner_index(x, y, z);
                        g.values[[row, 0]] = a[0] * p.x + a[1] * p.y + a[2] * p.z + b;
                    }
                }
            }
            let mut q = V3::new(q[0], q[1], q[2]);
            if on_face {
                q.z = 1.0;
            }
            let want = a[0] * q.x + a[1] * q.y + a[2] * q.z + b;
            let got = g.interpolate(q)[0];
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0),
                "got {got}, want {want}");
        }
    }

    #[test]
    fn continuous_across_cell_boundaries() {
        let g = filled_grid(3, 2, 12);
        // x = 0.25 is an interior corner plane at level 3.
        let eps = 1e-9;
        let lo = g.interpolate(V3::new(0.25 - eps, 0.1, -0.3));
        let hi = g.interpolate(V3::new(0.25 + eps, 0.1, -0.3));
        let at = g.interpolate(V3::new(0.25, 0.1, -0.3));
        for k in 0..2 {
            assert_relative_eq!(lo[k], at[k], epsilon = 1e-7);
            assert_relative_eq!(hi[k], at[k], epsilon = 1e-7);
        }
    }

    #[test]
    fn outside_queries_clamp_to_face() {
        let g = filled_grid(2, 3, 13);
        let inside = g.interpolate(V3::new(1.0, 0.2, -0.4));
        let outside = g.interpolate(V3::new(7.5, 0.2, -0.4));
        assert_eq!(inside, outside);
        // Clamped axes contribute zero weight gradient.
        let (_, _, dw) = g.corner_weights(V3::new(7.5, 0.2, -0.4), true);
        assert!(dw.iter().all(|d| d[0] == 0.0));
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let g = filled_grid(4, 1, 14);
        let mut rng = crate::rng::SeedSpring::new(15).rng();
        let value = |p: V3| g.interpolate(p)[0];
        for _ in 0..50 {
            // Stay clear of cell boundaries so FD does not cross a cell.
            let p = V3::new(
                rng.gen_range(-0.95..0.95),
                rng.gen_range(-0.95..0.95),
                rng.gen_range(-0.95..0.95),
            );
            let (idx, _, dw) = g.corner_weights(p, true);
            let h = 1e-7;
            for axis in 0..3 {
                let mut grad = 0.0;
                for j in 0..8 {
                    grad += dw[j][axis] * g.values[[idx[j] as usize, 0]];
                }
                let mut hi = p;
                let mut lo = p;
                hi[axis] += h;
                lo[axis] -= h;
                let fd = (value(hi) - value(lo)) / (2.0 * h);
                assert_relative_eq!(grad, fd, epsilon = 1e-5, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn plan_matches_single_queries() {
        let g = filled_grid(3, 5, 16);
        let ps = vec![
            V3::new(0.3, -0.2, 0.9),
            V3::new(-1.0, -1.0, -1.0),
            V3::new(0.0, 0.0, 0.0),
        ];
        let plan = g.plan(&ps, false);
        for (i, p) in ps.iter().enumerate() {
            let direct = g.interpolate(*p);
            let mut from_plan = vec![0.0; 5];
            for j in 0..8 {
                let w = plan.w[[i, j]];
                if w != 0.0 {
                    let row = g.values.row(plan.idx[i * 8 + j] as usize);
                    for (o, v) in from_plan.iter_mut().zip(row.iter()) {
                        *o += w * v;
                    }
                }
            }
            assert_eq!(direct, from_plan);
        }
    }
}
