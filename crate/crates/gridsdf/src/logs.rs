//! Line-delimited training logs: per-epoch records for the prior and
//! reconstruction runs, plus verifiers that replay a log and check the
//! schedule contracts (who was live when, how the encoding mask ramped).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One prior-training epoch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PriorEpochRecord {
    pub epoch: usize,
    pub stage: String,
    pub live_groups: Vec<String>,
    pub loss_total: f64,
    pub loss_surface: f64,
    pub loss_embedding: f64,
    pub loss_eikonal: f64,
    pub lr: f64,
    pub mask_alpha: f64,
    /// Eikonal probes dropped for sitting exactly on a grid plane.
    pub boundary_skipped: usize,
}

/// One reconstruction epoch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReconEpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub live_groups: Vec<String>,
    pub loss_total: f64,
    pub loss_rgb: f64,
    pub loss_mask: f64,
    pub loss_normal: f64,
    /// Always zero: reconstruction never evaluates the eikonal term. Logged
    /// so the invariant is visible in the record stream.
    pub eikonal_grad_norm: f64,
    pub hit_rays: usize,
    pub grazing_dropped: usize,
    pub lr: f64,
}

/// Append-only JSONL sink.
pub struct JsonlWriter {
    w: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlWriter { w: BufWriter::new(File::create(path)?) })
    }

    pub fn append(&mut self, record: &impl Serialize) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Config(format!("log record serialization: {e}")))?;
        writeln!(self.w, "{line}")?;
        self.w.flush()?;
        Ok(())
    }
}

/// Reads every record of a JSONL file.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("log line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Replays a prior log against the stage table: every epoch's recorded live
/// set and mask ramp must match what the schedule dictates.
pub fn verify_prior_log(records: &[PriorEpochRecord], n: usize, full_alpha: f64) -> Result<()> {
    if records.len() != 7 * n {
        return Err(Error::Config(format!(
            "expected {} epochs in the log, found {}",
            7 * n,
            records.len()
        )));
    }
    for (i, r) in records.iter().enumerate() {
        if r.epoch != i {
            return Err(Error::Config(format!("epoch {i} recorded as {}", r.epoch)));
        }
        let (stage, mut want) = if i < n {
            ("l4", vec!["decoder", "grid_l4", "latent"])
        } else if i < 3 * n {
            ("l5", vec!["grid_l5"])
        } else {
            ("l6", vec!["grid_l6"])
        };
        want.sort_unstable();
        let mut got = r.live_groups.clone();
        got.sort_unstable();
        if r.stage != stage || got != want {
            return Err(Error::Config(format!(
                "epoch {i}: stage {} live {:?}, schedule says {stage} {:?}",
                r.stage, r.live_groups, want
            )));
        }
        let ramp_end = (n / 2).max(1);
        let want_alpha = if i >= ramp_end {
            full_alpha
        } else {
            full_alpha * i as f64 / ramp_end as f64
        };
        if (r.mask_alpha - want_alpha).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "epoch {i}: mask_alpha {} but the ramp dictates {want_alpha}",
                r.mask_alpha
            )));
        }
    }
    Ok(())
}

/// Replays a reconstruction log: stage-1 epochs must not list the decoder
/// as live, stage 2 must, and the eikonal buffer must be zero throughout.
pub fn verify_recon_log(
    records: &[ReconEpochRecord],
    stage1_epochs: usize,
    total_epochs: usize,
) -> Result<()> {
    if records.len() != total_epochs {
        return Err(Error::Config(format!(
            "expected {total_epochs} epochs in the log, found {}",
            records.len()
        )));
    }
    for (i, r) in records.iter().enumerate() {
        let want_stage = if i < stage1_epochs { 1 } else { 2 };
        if r.epoch != i || r.stage != want_stage {
            return Err(Error::Config(format!(
                "epoch {i}: recorded epoch {} stage {}, expected stage {want_stage}",
                r.epoch, r.stage
            )));
        }
        let has_decoder = r.live_groups.iter().any(|g| g == "decoder");
        if has_decoder != (want_stage == 2) {
            return Err(Error::Config(format!(
                "epoch {i}: decoder live = {has_decoder} in stage {want_stage}"
            )));
        }
        if r.eikonal_grad_norm != 0.0 {
            return Err(Error::Config(format!(
                "epoch {i}: eikonal gradient buffer is {}, expected exactly 0",
                r.eikonal_grad_norm
            )));
        }
    }
    Ok(())
}
