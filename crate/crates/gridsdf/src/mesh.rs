//! Triangle meshes: zero-level-set extraction (marching cubes with
//! generated, face-consistent case tables), OBJ I/O, an icosphere helper,
//! and area-weighted surface sampling.
//!
//! # Case tables by construction
//!
//! Instead of transcribing the classic 256-entry triangle table, the tables
//! are *derived* at startup: for every sign configuration, each cube face is
//! cut by marching-squares segments (directed so the inside region sits to
//! the left when the face is viewed from outside the cube; ambiguous faces
//! always keep the two inside corners separate). Because a face's segments
//! depend only on that face's four signs, adjacent cubes always produce
//! mirror-image boundaries — the mesh is watertight by construction, not by
//! table-audit. The directed segments chain into closed loops on the cube
//! surface, and each loop is fan-triangulated.
//!
//! Vertices are welded by global lattice-edge id, so shared vertices are
//! bit-identical and the index structure is closed.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::field::Sdf;
use crate::{Error, Result, V3};

/// Indexed triangle mesh. Faces are counterclockwise seen from outside
/// (the positive side of the field that produced them).
#[derive(Debug, Clone, Default)]
pub struct TriMesh {
    pub vertices: Vec<V3>,
    pub faces: Vec<[u32; 3]>,
}

/// Uniform scale-and-translate mapping recorded when a mesh is normalized
/// into the unit cube: `model = (world - offset) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UnitCubeTransform {
    pub scale: f64,
    pub offset: [f64; 3],
}

impl UnitCubeTransform {
    pub fn apply(&self, p: V3) -> V3 {
        (p - V3::new(self.offset[0], self.offset[1], self.offset[2])) * self.scale
    }
}

impl TriMesh {
    pub fn face_vertices(&self, f: usize) -> [V3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.face_vertices(f);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Unit normal of a face (counterclockwise orientation).
    pub fn face_normal(&self, f: usize) -> V3 {
        let [a, b, c] = self.face_vertices(f);
        let n = (b - a).cross(&(c - a));
        n.try_normalize(1e-300).unwrap_or_else(V3::zeros)
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Every undirected edge is shared by exactly two faces (closed,
    /// edge-manifold surface).
    pub fn is_closed_manifold(&self) -> bool {
        let mut count: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let a = f[k];
                let b = f[(k + 1) % 3];
                *count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        count.values().all(|&c| c == 2)
    }

    /// `V - E + F` over distinct undirected edges.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges: HashMap<(u32, u32), ()> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let a = f[k];
                let b = f[(k + 1) % 3];
                edges.insert((a.min(b), a.max(b)), ());
            }
        }
        self.vertices.len() as i64 - edges.len() as i64 + self.faces.len() as i64
    }

    pub fn bounds(&self) -> (V3, V3) {
        let mut lo = V3::from_element(f64::INFINITY);
        let mut hi = V3::from_element(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Uniformly scales and centers the mesh so it fits in `[-m, m]^3`
    /// (with `m = margin`), returning the transform that was applied.
    pub fn normalize_to_unit_cube(&mut self, margin: f64) -> UnitCubeTransform {
        assert!(!self.vertices.is_empty(), "cannot normalize an empty mesh");
        let (lo, hi) = self.bounds();
        let center = (lo + hi) * 0.5;
        let half_extent = ((hi - lo) * 0.5).max().max(1e-300);
        let scale = margin / half_extent;
        let t = UnitCubeTransform { scale, offset: [center.x, center.y, center.z] };
        for v in &mut self.vertices {
            *v = t.apply(*v);
        }
        t
    }

    /// Area-weighted surface samples with their face normals. Degenerate
    /// (zero-area) faces are skipped; the skip count is returned.
    pub fn sample_surface(
        &self,
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<(Vec<V3>, Vec<V3>, usize)> {
        let mut weights = Vec::with_capacity(self.faces.len());
        let mut skipped = 0usize;
        for f in 0..self.faces.len() {
            let a = self.face_area(f);
            if a > 0.0 {
                weights.push(a);
            } else {
                weights.push(0.0);
                skipped += 1;
            }
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("mesh has no area to sample".into()));
        }
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::Config(format!("face weights: {e}")))?;
        let mut points = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        for _ in 0..n {
            let f = dist.sample(rng);
            let [a, b, c] = self.face_vertices(f);
            // Uniform barycentric sample via square-root trick.
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            let p = a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2);
            points.push(p);
            normals.push(self.face_normal(f));
        }
        Ok((points, normals, skipped))
    }

    /// Writes ASCII Wavefront OBJ (`v` and `f` records, 1-based indices).
    pub fn save_obj(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for f in &self.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads ASCII OBJ. Only `v` and triangular `f` records are honored;
    /// `f` entries may carry `/texture/normal` suffixes, which are ignored.
    /// Polygons with more than three vertices are fanned into triangles.
    pub fn load_obj(path: &Path) -> Result<TriMesh> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut mesh = TriMesh::default();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let mut coord = |name: &str| -> Result<f64> {
                        it.next()
                            .ok_or_else(|| bad_obj(lineno, "vertex missing coordinate"))?
                            .parse::<f64>()
                            .map_err(|_| bad_obj(lineno, &format!("bad {name} coordinate")))
                    };
                    let (x, y, z) = (coord("x")?, coord("y")?, coord("z")?);
                    mesh.vertices.push(V3::new(x, y, z));
                }
                Some("f") => {
                    let mut idx = Vec::new();
                    for tok in it {
                        let first = tok.split('/').next().unwrap_or("");
                        let i: i64 = first
                            .parse()
                            .map_err(|_| bad_obj(lineno, "bad face index"))?;
                        let resolved = if i < 0 {
                            mesh.vertices.len() as i64 + i
                        } else {
                            i - 1
                        };
                        if resolved < 0 || resolved >= mesh.vertices.len() as i64 {
                            return Err(bad_obj(lineno, "face index out of range"));
                        }
                        idx.push(resolved as u32);
                    }
                    if idx.len() < 3 {
                        return Err(bad_obj(lineno, "face with fewer than 3 vertices"));
                    }
                    for k in 1..idx.len() - 1 {
                        mesh.faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        if mesh.faces.is_empty() {
            return Err(Error::Config("mesh file contains no faces".into()));
        }
        Ok(mesh)
    }
}

fn bad_obj(lineno: usize, what: &str) -> Error {
    Error::Config(format!("OBJ line {}: {what}", lineno + 1))
}

// ---------------------------------------------------------------------------
// Marching cubes
// ---------------------------------------------------------------------------

/// Corner `c` of the unit cube sits at `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
/// The 12 cube edges, as (corner, corner) pairs: x-edges, then y, then z.
const CUBE_EDGES: [(u8, u8); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Axis (0=x, 1=y, 2=z) each edge runs along.
const EDGE_AXIS: [u8; 12] = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];

/// The six faces as corner loops, counterclockwise viewed from outside.
const FACE_LOOPS: [[u8; 4]; 6] = [
    [0, 4, 6, 2], // -x
    [1, 3, 7, 5], // +x
    [0, 1, 5, 4], // -y
    [2, 6, 7, 3], // +y
    [0, 2, 3, 1], // -z
    [4, 5, 7, 6], // +z
];

fn edge_id(a: u8, b: u8) -> u8 {
    let key = (a.min(b), a.max(b));
    CUBE_EDGES
        .iter()
        .position(|&e| e == key)
        .expect("corner pair is a cube edge") as u8
}

/// Directed boundary segments of the inside region on one face,
/// `(from_edge, to_edge)`, inside kept to the left viewed from outside.
fn face_segments(loop_: &[u8; 4], inside: u8) -> Vec<(u8, u8)> {
    let is_in = |c: u8| inside >> c & 1 == 1;
    let cut = |i: usize, j: usize| edge_id(loop_[i % 4], loop_[j % 4]);
    let n_in = loop_.iter().filter(|&&c| is_in(c)).count();
    match n_in {
        0 | 4 => Vec::new(),
        1 => {
            let i = (0..4).find(|&i| is_in(loop_[i])).unwrap();
            vec![(cut(i, i + 1), cut(i + 3, i))]
        }
        3 => {
            let i = (0..4).find(|&i| !is_in(loop_[i])).unwrap();
            vec![(cut(i + 3, i), cut(i, i + 1))]
        }
        2 => {
            let i0 = (0..4).find(|&i| is_in(loop_[i])).unwrap();
            if is_in(loop_[(i0 + 1) % 4]) || is_in(loop_[(i0 + 3) % 4]) {
                // Adjacent pair: one segment across the band. Use the first
                // index i such that (i, i+1) are both inside.
                let i = (0..4)
                    .find(|&i| is_in(loop_[i]) && is_in(loop_[(i + 1) % 4]))
                    .unwrap();
                vec![(cut(i + 1, i + 2), cut(i + 3, i))]
            } else {
                // Diagonal pair: ambiguous face; always keep the two inside
                // corners as separate lobes so every cube agrees.
                let j = (i0 + 2) % 4;
                vec![(cut(i0, i0 + 1), cut(i0 + 3, i0)), (cut(j, j + 1), cut(j + 3, j))]
            }
        }
        _ => unreachable!(),
    }
}

/// For each of the 256 sign configurations: closed loops of local edge ids.
struct CaseTables {
    loops: Vec<Vec<Vec<u8>>>,
}

fn case_tables() -> &'static CaseTables {
    static TABLES: OnceLock<CaseTables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let mut loops = Vec::with_capacity(256);
        for inside in 0..=255u8 {
            let mut next: HashMap<u8, u8> = HashMap::new();
            for fl in &FACE_LOOPS {
                for (from, to) in face_segments(fl, inside) {
                    let prev = next.insert(from, to);
                    assert!(prev.is_none(), "config {inside}: edge {from} leaves twice");
                }
            }
            let mut config_loops = Vec::new();
            let mut remaining: Vec<u8> = next.keys().copied().collect();
            remaining.sort_unstable();
            let mut visited = [false; 12];
            for start in remaining {
                if visited[start as usize] {
                    continue;
                }
                let mut cycle = vec![start];
                visited[start as usize] = true;
                let mut cur = next[&start];
                while cur != start {
                    visited[cur as usize] = true;
                    cycle.push(cur);
                    cur = next[&cur];
                }
                assert!(cycle.len() >= 3, "config {inside}: loop shorter than 3");
                config_loops.push(cycle);
            }
            loops.push(config_loops);
        }
        CaseTables { loops }
    })
}

/// Options for [`extract_mesh`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshOptions {
    /// Cells per axis of the output lattice over `[-1, 1]^3`.
    pub resolution: usize,
    /// Evaluate a coarse lattice first and refine only cells whose corner
    /// values come within `margin_scale * cell half-diagonal` of zero.
    /// Sound for fields with gradient norms up to about `margin_scale`;
    /// disable for wilder fields.
    pub prune: bool,
    /// Coarse cells per fine cell along each axis when pruning.
    pub coarse_factor: usize,
    pub margin_scale: f64,
}

impl Default for MeshOptions {
    fn default() -> Self {
        MeshOptions { resolution: 256, prune: true, coarse_factor: 4, margin_scale: 2.0 }
    }
}

/// Extracts the zero level set of `field` over `[-1, 1]^3` as a triangle
/// mesh. Fails with a numeric error if the field has no zero crossing on
/// the lattice.
pub fn extract_mesh(field: &dyn Sdf, opts: &MeshOptions) -> Result<TriMesh> {
    let res = opts.resolution;
    assert!(res >= 2, "resolution must be at least 2");
    let cells: Vec<[usize; 3]> = if opts.prune && res > opts.coarse_factor * 2 {
        admitted_cells(field, res, opts)?
    } else {
        let mut all = Vec::with_capacity(res * res * res);
        for z in 0..res {
            for y in 0..res {
                for x in 0..res {
                    all.push([x, y, z]);
                }
            }
        }
        all
    };

    // Evaluate every needed lattice corner once, batched.
    let n1 = res + 1;
    let corner_of = |x: usize, y: usize, z: usize| -> u64 { ((z * n1 + y) * n1 + x) as u64 };
    let pos_of = |x: usize, y: usize, z: usize| -> V3 {
        let h = 2.0 / res as f64;
        V3::new(-1.0 + h * x as f64, -1.0 + h * y as f64, -1.0 + h * z as f64)
    };
    let mut corner_ids: Vec<u64> = Vec::new();
    let mut seen: HashMap<u64, u32> = HashMap::new();
    for &[cx, cy, cz] in &cells {
        for c in 0..8u8 {
            let id = corner_of(cx + (c & 1) as usize, cy + (c >> 1 & 1) as usize, cz + (c >> 2 & 1) as usize);
            seen.entry(id).or_insert_with(|| {
                corner_ids.push(id);
                (corner_ids.len() - 1) as u32
            });
        }
    }
    let positions: Vec<V3> = corner_ids
        .iter()
        .map(|&id| {
            let x = (id % n1 as u64) as usize;
            let y = (id / n1 as u64 % n1 as u64) as usize;
            let z = (id / (n1 as u64 * n1 as u64)) as usize;
            pos_of(x, y, z)
        })
        .collect();
    let values = eval_in_chunks(field, &positions);

    let tables = case_tables();
    let mut mesh = TriMesh::default();
    let mut vertex_of_edge: HashMap<u64, u32> = HashMap::new();
    let value_at = |seen: &HashMap<u64, u32>, values: &[f64], id: u64| -> f64 {
        let v = values[seen[&id] as usize];
        // Exact zeros would put vertices on lattice corners and squeeze out
        // degenerate triangles; classify them as (barely) outside instead.
        if v == 0.0 {
            f64::MIN_POSITIVE
        } else {
            v
        }
    };

    for &[cx, cy, cz] in &cells {
        let mut corner_id = [0u64; 8];
        let mut val = [0.0f64; 8];
        for c in 0..8usize {
            let id = corner_of(
                cx + (c & 1),
                cy + (c >> 1 & 1),
                cz + (c >> 2 & 1),
            );
            corner_id[c] = id;
            val[c] = value_at(&seen, &values, id);
        }
        let mut inside = 0u8;
        for (c, &v) in val.iter().enumerate() {
            if v < 0.0 {
                inside |= 1 << c;
            }
        }
        if inside == 0 || inside == 255 {
            continue;
        }
        for cycle in &tables.loops[inside as usize] {
            let verts: Vec<u32> = cycle
                .iter()
                .map(|&e| {
                    let (a, b) = CUBE_EDGES[e as usize];
                    let ga = corner_id[a as usize];
                    let global_edge = ga * 3 + EDGE_AXIS[e as usize] as u64;
                    *vertex_of_edge.entry(global_edge).or_insert_with(|| {
                        let (va, vb) = (val[a as usize], val[b as usize]);
                        let t = va / (va - vb);
                        let pa = positions[seen[&corner_id[a as usize]] as usize];
                        let pb = positions[seen[&corner_id[b as usize]] as usize];
                        mesh.vertices.push(pa + (pb - pa) * t);
                        (mesh.vertices.len() - 1) as u32
                    })
                })
                .collect();
            for k in 1..verts.len() - 1 {
                // Loop orientation from the face rule makes this order
                // counterclockwise seen from the positive side.
                mesh.faces.push([verts[0], verts[k + 1], verts[k]]);
            }
        }
    }

    if mesh.faces.is_empty() {
        return Err(Error::Numeric(
            "field has no zero crossing inside [-1,1]^3 at this resolution".into(),
        ));
    }
    Ok(mesh)
}

/// Coarse-pass pruning: returns the fine cells contained in coarse cells
/// whose minimum corner |value| is within the safety margin.
fn admitted_cells(field: &dyn Sdf, res: usize, opts: &MeshOptions) -> Result<Vec<[usize; 3]>> {
    let k = opts.coarse_factor;
    assert!(res % k == 0, "resolution must be divisible by the coarse factor");
    let cres = res / k;
    let n1 = cres + 1;
    let h = 2.0 / cres as f64;
    let mut positions = Vec::with_capacity(n1 * n1 * n1);
    for z in 0..n1 {
        for y in 0..n1 {
            for x in 0..n1 {
                positions.push(V3::new(
                    -1.0 + h * x as f64,
                    -1.0 + h * y as f64,
                    -1.0 + h * z as f64,
                ));
            }
        }
    }
    let values = eval_in_chunks(field, &positions);
    let margin = opts.margin_scale * 0.5 * h * 3.0f64.sqrt();
    let mut cells = Vec::new();
    for z in 0..cres {
        for y in 0..cres {
            for x in 0..cres {
                let mut near = false;
                for c in 0..8usize {
                    let id = ((z + (c >> 2 & 1)) * n1 + y + (c >> 1 & 1)) * n1 + x + (c & 1);
                    if values[id].abs() <= margin {
                        near = true;
                        break;
                    }
                }
                if near {
                    for dz in 0..k {
                        for dy in 0..k {
                            for dx in 0..k {
                                cells.push([x * k + dx, y * k + dy, z * k + dz]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

fn eval_in_chunks(field: &dyn Sdf, positions: &[V3]) -> Vec<f64> {
    let mut values = Vec::with_capacity(positions.len());
    for chunk in positions.chunks(8192) {
        values.extend(field.eval_batch(chunk));
    }
    values
}

// ---------------------------------------------------------------------------
// Icosphere
// ---------------------------------------------------------------------------

/// Subdivided icosahedron projected onto a sphere.
pub fn icosphere(center: V3, radius: f64, subdivisions: u32) -> TriMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let raw = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ];
    let mut vertices: Vec<V3> = raw
        .iter()
        .map(|&(x, y, z)| V3::new(x, y, z).normalize())
        .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(u32, u32), u32> = HashMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        let mut mid = |a: u32, b: u32, vertices: &mut Vec<V3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                let m = ((vertices[a as usize] + vertices[b as usize]) * 0.5).normalize();
                vertices.push(m);
                (vertices.len() - 1) as u32
            })
        };
        for &[a, b, c] in &faces {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            new_faces.push([a, ab, ca]);
            new_faces.push([b, bc, ab]);
            new_faces.push([c, ca, bc]);
            new_faces.push([ab, bc, ca]);
        }
        faces = new_faces;
    }
    TriMesh {
        vertices: vertices.into_iter().map(|v| center + v * radius).collect(),
        faces,
    }
}
