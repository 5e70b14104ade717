//! Binary model container: grids, decoder, per-scene latents, and
//! (optionally) the rendering networks, in one versioned little-endian file.
//!
//! # Byte layout (version 1)
//!
//! All integers are `u32` little-endian; all floats are IEEE-754 `f64`
//! little-endian. A *tensor* is `rows: u32, cols: u32, rows*cols f64`
//! in row-major order.
//!
//! ```text
//! magic            4 bytes  b"GSDF"
//! version          u32      1
//! pe_freqs         u32      frequency bands of the field's encoder
//! latent_dim       u32
//! hidden           u32      decoder hidden width
//! feature_dim      u32      grid feature length
//! softplus_beta    f64
//! init_radius      f64
//! n_levels         u32
//! per level:
//!   level            u32    resolution exponent (cells per axis = 2^level)
//!   corners_per_axis u32    2^level + 1
//!   feature_dim      u32    equals the header feature_dim
//!   values           (2^level+1)^3 * feature_dim f64, corner-major
//!                    (corner index z-major, y next, x fastest; features
//!                    contiguous per corner)
//! decoder: 8 tensors in order
//!   W1 (aux_width + latent_dim, hidden)   first layer, unified: the
//!                                          encoded-input/grid rows first,
//!                                          then the latent rows
//!   b1 (1, hidden)
//!   W2 (hidden, hidden), b2 (1, hidden)
//!   W3 (hidden, hidden), b3 (1, hidden)
//!   Wout (hidden, 1),    bout (1, 1)
//! n_latents        u32
//! per latent:
//!   id_len u32, id bytes (utf-8), dim u32, dim f64
//! render_flag      u8       0 = absent, 1 = present
//! if present:
//!   q_hidden, q_depth, q_skip_after, feature_len, q_pe_freqs,
//!   r_hidden, r_depth, r_pe_freqs            u32 each
//!   softplus_beta                            f64
//!   n_q_layers u32, per layer: W tensor, b tensor
//!   n_r_layers u32, per layer: W tensor, b tensor
//! ```
//!
//! `load(save(f)) == f` bit-exactly; the round-trip test compares raw bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array2};

use crate::encoding::PosEnc;
use crate::field::{Decoder, FieldConfig, HybridField, LatentBank};
use crate::grid::GridLevel;
use crate::mlp::Affine;
use crate::render::{RenderConfig, RenderNets};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"GSDF";
const VERSION: u32 = 1;

/// Everything a run needs to resume or evaluate: the shared field, the
/// per-scene latents (keyed by scene id), and optional rendering networks.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub field: HybridField,
    pub latents: Vec<(String, Vec<f64>)>,
    pub render: Option<RenderNets>,
}

impl Checkpoint {
    /// Latents as a bank plus the id for each row, in file order.
    pub fn latent_bank(&self) -> (LatentBank, Vec<String>) {
        let dim = self.field.config.latent_dim;
        let mut bank = LatentBank::zeros(self.latents.len(), dim);
        let mut ids = Vec::with_capacity(self.latents.len());
        for (i, (id, z)) in self.latents.iter().enumerate() {
            assert_eq!(z.len(), dim, "latent length mismatch for {id}");
            for (j, v) in z.iter().enumerate() {
                bank.z[[i, j]] = *v;
            }
            ids.push(id.clone());
        }
        (bank, ids)
    }

    /// Row of the latent with the given scene id, if present.
    pub fn latent_row(&self, id: &str) -> Option<&[f64]> {
        self.latents.iter().find(|(k, _)| k == id).map(|(_, z)| z.as_slice())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        Self::read_from(&mut r)
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let cfg = &self.field.config;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(cfg.pe_freqs as u32)?;
        w.write_u32::<LittleEndian>(cfg.latent_dim as u32)?;
        w.write_u32::<LittleEndian>(cfg.hidden as u32)?;
        w.write_u32::<LittleEndian>(cfg.feature_dim as u32)?;
        w.write_f64::<LittleEndian>(cfg.softplus_beta)?;
        w.write_f64::<LittleEndian>(cfg.init_radius)?;

        w.write_u32::<LittleEndian>(self.field.grids.len() as u32)?;
        for g in &self.field.grids {
            w.write_u32::<LittleEndian>(g.level())?;
            w.write_u32::<LittleEndian>(g.corners_per_axis() as u32)?;
            w.write_u32::<LittleEndian>(g.feature_dim() as u32)?;
            write_floats(w, g.values.as_slice().expect("grid values contiguous"))?;
        }

        let d = &self.field.decoder;
        let mut w1 = Array2::zeros((cfg.input_width(), cfg.hidden));
        w1.slice_mut(s![..cfg.aux_width(), ..]).assign(&d.w_aux);
        w1.slice_mut(s![cfg.aux_width().., ..]).assign(&d.w_lat);
        write_tensor(w, &w1)?;
        write_tensor(w, &d.b1)?;
        write_tensor(w, &d.l2.w)?;
        write_tensor(w, &d.l2.b)?;
        write_tensor(w, &d.l3.w)?;
        write_tensor(w, &d.l3.b)?;
        write_tensor(w, &d.out.w)?;
        write_tensor(w, &d.out.b)?;

        w.write_u32::<LittleEndian>(self.latents.len() as u32)?;
        for (id, z) in &self.latents {
            let bytes = id.as_bytes();
            w.write_u32::<LittleEndian>(bytes.len() as u32)?;
            w.write_all(bytes)?;
            w.write_u32::<LittleEndian>(z.len() as u32)?;
            write_floats(w, z)?;
        }

        match &self.render {
            None => w.write_u8(0)?,
            Some(r) => {
                w.write_u8(1)?;
                let rc = &r.config;
                for v in [
                    rc.q_hidden,
                    rc.q_depth,
                    rc.q_skip_after,
                    rc.feature_len,
                    rc.q_pe_freqs,
                    rc.r_hidden,
                    rc.r_depth,
                    rc.r_pe_freqs,
                ] {
                    w.write_u32::<LittleEndian>(v as u32)?;
                }
                w.write_f64::<LittleEndian>(rc.softplus_beta)?;
                w.write_u32::<LittleEndian>(r.q_layers.len() as u32)?;
                for l in &r.q_layers {
                    write_tensor(w, &l.w)?;
                    write_tensor(w, &l.b)?;
                }
                w.write_u32::<LittleEndian>(r.r_layers.len() as u32)?;
                for l in &r.r_layers {
                    write_tensor(w, &l.w)?;
                    write_tensor(w, &l.b)?;
                }
            }
        }
        Ok(())
    }

    fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Config(format!(
                "not a model container (magic {magic:02x?})"
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Config(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        let pe_freqs = r.read_u32::<LittleEndian>()? as usize;
        let latent_dim = r.read_u32::<LittleEndian>()? as usize;
        let hidden = r.read_u32::<LittleEndian>()? as usize;
        let feature_dim = r.read_u32::<LittleEndian>()? as usize;
        let softplus_beta = r.read_f64::<LittleEndian>()?;
        let init_radius = r.read_f64::<LittleEndian>()?;

        let n_levels = r.read_u32::<LittleEndian>()? as usize;
        let mut levels = Vec::with_capacity(n_levels);
        let mut grids = Vec::with_capacity(n_levels);
        for _ in 0..n_levels {
            let level = r.read_u32::<LittleEndian>()?;
            let cpa = r.read_u32::<LittleEndian>()? as usize;
            let fdim = r.read_u32::<LittleEndian>()? as usize;
            let mut g = GridLevel::new(level, fdim);
            if g.corners_per_axis() != cpa {
                return Err(Error::Config(format!(
                    "level {level} claims {cpa} corners per axis, expected {}",
                    g.corners_per_axis()
                )));
            }
            if fdim != feature_dim {
                return Err(Error::Config(format!(
                    "level {level} feature length {fdim} != header {feature_dim}"
                )));
            }
            let n = g.corner_count() * fdim;
            let data = read_floats(r, n)?;
            g.values = Array2::from_shape_vec((g.corner_count(), fdim), data)
                .expect("shape checked above");
            levels.push(level);
            grids.push(g);
        }

        let config = FieldConfig {
            levels,
            feature_dim,
            pe_freqs,
            hidden,
            latent_dim,
            softplus_beta,
            init_radius,
        };

        let w1 = read_tensor(r)?;
        expect_shape("W1", &w1, config.input_width(), hidden)?;
        let b1 = read_tensor(r)?;
        let w2 = read_tensor(r)?;
        let b2 = read_tensor(r)?;
        let w3 = read_tensor(r)?;
        let b3 = read_tensor(r)?;
        let wout = read_tensor(r)?;
        let bout = read_tensor(r)?;
        let decoder = Decoder {
            w_aux: w1.slice(s![..config.aux_width(), ..]).to_owned(),
            w_lat: w1.slice(s![config.aux_width().., ..]).to_owned(),
            b1,
            l2: Affine { w: w2, b: b2 },
            l3: Affine { w: w3, b: b3 },
            out: Affine { w: wout, b: bout },
        };

        let field = HybridField {
            pe: PosEnc::new(config.pe_freqs),
            config,
            grids,
            decoder,
        };

        let n_latents = r.read_u32::<LittleEndian>()? as usize;
        let mut latents = Vec::with_capacity(n_latents);
        for _ in 0..n_latents {
            let id_len = r.read_u32::<LittleEndian>()? as usize;
            let mut id_bytes = vec![0u8; id_len];
            r.read_exact(&mut id_bytes)?;
            let id = String::from_utf8(id_bytes)
                .map_err(|e| Error::Config(format!("latent id is not utf-8: {e}")))?;
            let dim = r.read_u32::<LittleEndian>()? as usize;
            if dim != field.config.latent_dim {
                return Err(Error::Config(format!(
                    "latent '{id}' has length {dim}, expected {}",
                    field.config.latent_dim
                )));
            }
            latents.push((id, read_floats(r, dim)?));
        }

        let render = match r.read_u8()? {
            0 => None,
            1 => {
                let q_hidden = r.read_u32::<LittleEndian>()? as usize;
                let q_depth = r.read_u32::<LittleEndian>()? as usize;
                let q_skip_after = r.read_u32::<LittleEndian>()? as usize;
                let feature_len = r.read_u32::<LittleEndian>()? as usize;
                let q_pe_freqs = r.read_u32::<LittleEndian>()? as usize;
                let r_hidden = r.read_u32::<LittleEndian>()? as usize;
                let r_depth = r.read_u32::<LittleEndian>()? as usize;
                let r_pe_freqs = r.read_u32::<LittleEndian>()? as usize;
                let softplus_beta = r.read_f64::<LittleEndian>()?;
                let config = RenderConfig {
                    q_hidden,
                    q_depth,
                    q_skip_after,
                    feature_len,
                    q_pe_freqs,
                    r_hidden,
                    r_depth,
                    r_pe_freqs,
                    softplus_beta,
                };
                let n_q = r.read_u32::<LittleEndian>()? as usize;
                let mut q_layers = Vec::with_capacity(n_q);
                for _ in 0..n_q {
                    let w = read_tensor(r)?;
                    let b = read_tensor(r)?;
                    q_layers.push(Affine { w, b });
                }
                let n_r = r.read_u32::<LittleEndian>()? as usize;
                let mut r_layers = Vec::with_capacity(n_r);
                for _ in 0..n_r {
                    let w = read_tensor(r)?;
                    let b = read_tensor(r)?;
                    r_layers.push(Affine { w, b });
                }
                Some(RenderNets {
                    pe_q: PosEnc::new(config.q_pe_freqs),
                    pe_r: PosEnc::new(config.r_pe_freqs),
                    config,
                    q_layers,
                    r_layers,
                })
            }
            flag => {
                return Err(Error::Config(format!(
                    "render section flag must be 0 or 1, got {flag}"
                )))
            }
        };

        Ok(Checkpoint { field, latents, render })
    }
}

fn write_tensor(w: &mut impl Write, t: &Array2<f64>) -> Result<()> {
    w.write_u32::<LittleEndian>(t.nrows() as u32)?;
    w.write_u32::<LittleEndian>(t.ncols() as u32)?;
    // Row-major: ndarray's default layout; fall back to an iteration that
    // guarantees logical order if the tensor is a view artifact.
    match t.as_slice() {
        Some(s) => write_floats(w, s),
        None => {
            for v in t.iter() {
                w.write_f64::<LittleEndian>(*v)?;
            }
            Ok(())
        }
    }
}

fn read_tensor(r: &mut impl Read) -> Result<Array2<f64>> {
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let cols = r.read_u32::<LittleEndian>()? as usize;
    let data = read_floats(r, rows * cols)?;
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Config(format!("tensor shape error: {e}")))
}

fn write_floats(w: &mut impl Write, vals: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_floats(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn expect_shape(name: &str, t: &Array2<f64>, rows: usize, cols: usize) -> Result<()> {
    if t.nrows() != rows || t.ncols() != cols {
        return Err(Error::Config(format!(
            "{name} has shape ({}, {}), expected ({rows}, {cols})",
            t.nrows(),
            t.ncols()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{group_digest, Group};
    use crate::rng::SeedSpring;

    fn small_checkpoint(with_render: bool) -> Checkpoint {
        let cfg = FieldConfig {
            levels: vec![2, 3],
            feature_dim: 4,
            pe_freqs: 3,
            hidden: 32,
            latent_dim: 6,
            softplus_beta: 100.0,
            init_radius: 0.5,
        };
        let mut rng = SeedSpring::new(77).rng();
        let mut field = HybridField::geometric_init(cfg, &mut rng);
        // Make grid values non-trivial so the round trip exercises them.
        for g in &mut field.grids {
            g.values.mapv_inplace(|v| v + 0.123456789);
        }
        let latents = vec![
            ("scene-a".to_string(), vec![0.1, -0.2, 0.3, -0.4, 0.5, -0.6]),
            ("scene-b".to_string(), vec![1e-17, 2.0, -3.0, 4.0, 5.0, f64::MIN_POSITIVE]),
        ];
        let render = with_render.then(|| {
            let rc = RenderConfig {
                q_hidden: 8,
                q_depth: 3,
                q_skip_after: 1,
                feature_len: 5,
                q_pe_freqs: 2,
                r_hidden: 8,
                r_depth: 2,
                r_pe_freqs: 1,
                softplus_beta: 100.0,
            };
            RenderNets::init(rc, &mut SeedSpring::new(78).rng())
        });
        Checkpoint { field, latents, render }
    }

    fn assert_bits_equal(a: &Array2<f64>, b: &Array2<f64>) {
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for with_render in [false, true] {
            let ck = small_checkpoint(with_render);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.gsdf");
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();

            assert_eq!(back.field.config, ck.field.config);
            for (a, b) in ck.field.grids.iter().zip(&back.field.grids) {
                assert_eq!(a.level(), b.level());
                assert_bits_equal(&a.values, &b.values);
            }
            assert_bits_equal(&ck.field.decoder.w_aux, &back.field.decoder.w_aux);
            assert_bits_equal(&ck.field.decoder.w_lat, &back.field.decoder.w_lat);
            assert_bits_equal(&ck.field.decoder.b1, &back.field.decoder.b1);
            assert_bits_equal(&ck.field.decoder.l2.w, &back.field.decoder.l2.w);
            assert_bits_equal(&ck.field.decoder.l3.b, &back.field.decoder.l3.b);
            assert_bits_equal(&ck.field.decoder.out.w, &back.field.decoder.out.w);
            assert_bits_equal(&ck.field.decoder.out.b, &back.field.decoder.out.b);
            assert_eq!(back.latents.len(), ck.latents.len());
            for ((ia, za), (ib, zb)) in ck.latents.iter().zip(&back.latents) {
                assert_eq!(ia, ib);
                assert_eq!(za.len(), zb.len());
                for (x, y) in za.iter().zip(zb) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            match (&ck.render, &back.render) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    assert_eq!(a.config, b.config);
                    for (la, lb) in a.q_layers.iter().zip(&b.q_layers) {
                        assert_bits_equal(&la.w, &lb.w);
                        assert_bits_equal(&la.b, &lb.b);
                    }
                    for (la, lb) in a.r_layers.iter().zip(&b.r_layers) {
                        assert_bits_equal(&la.w, &lb.w);
                        assert_bits_equal(&la.b, &lb.b);
                    }
                }
                _ => panic!("render section presence changed across round trip"),
            }

            // Group digests (the schedule-conformance fingerprint) survive.
            for g in [Group::GridL4, Group::GridL5, Group::Decoder] {
                assert_eq!(group_digest(&ck.field, g), group_digest(&back.field, g));
            }
        }
    }

    #[test]
    fn rejects_wrong_magic_and_version() {
        let ck = small_checkpoint(false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gsdf");
        ck.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::Config(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }

        bytes[4] = 99; // version little-endian low byte
        std::fs::write(&path, &bytes).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::Config(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let ck = small_checkpoint(true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gsdf");
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::Io(_)) => {}
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn latent_bank_reconstructs_rows_in_order() {
        let ck = small_checkpoint(false);
        let (bank, ids) = ck.latent_bank();
        assert_eq!(ids, vec!["scene-a", "scene-b"]);
        assert_eq!(bank.scene_count(), 2);
        assert_eq!(bank.z[[0, 2]], 0.3);
        assert_eq!(ck.latent_row("scene-b").unwrap()[1], 2.0);
        assert!(ck.latent_row("missing").is_none());
    }
}
