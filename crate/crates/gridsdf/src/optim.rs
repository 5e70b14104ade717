//! Parameter identity, group freezing, and the Adam optimizer.
//!
//! Every trainable tensor in the system belongs to a [`Group`] (one per
//! feature-grid level, the SDF decoder, the per-scene latent bank, and the
//! two rendering networks) and is addressed by a [`ParamId`]. Training
//! schedules operate on whole groups: a frozen group receives no gradient
//! entries from the tape and is skipped by [`Adam::step`], so its bytes are
//! bit-identical across the frozen span — which the schedule-conformance
//! tests verify by hashing.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tape::Gradients;

/// Trainable parameter groups. Ordering is part of the on-disk and hashing
/// story, so variants are deliberately `Ord`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Group {
    GridL4,
    GridL5,
    GridL6,
    Decoder,
    Latent,
    RenderQ,
    RenderR,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::GridL4,
        Group::GridL5,
        Group::GridL6,
        Group::Decoder,
        Group::Latent,
        Group::RenderQ,
        Group::RenderR,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Group::GridL4 => "grid_l4",
            Group::GridL5 => "grid_l5",
            Group::GridL6 => "grid_l6",
            Group::Decoder => "decoder",
            Group::Latent => "latent",
            Group::RenderQ => "render_q",
            Group::RenderR => "render_r",
        }
    }
}

/// Identity of one tensor: its group plus a slot index within the group
/// (e.g. layer weights and biases of an MLP).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub group: Group,
    pub slot: u8,
}

impl ParamId {
    pub fn new(group: Group, slot: u8) -> Self {
        ParamId { group, slot }
    }
}

/// Set of groups currently receiving updates.
pub type LiveSet = BTreeSet<Group>;

/// Anything that owns parameter tensors and can enumerate them in a stable
/// order.
pub trait ParamBag {
    fn visit(&self, f: &mut dyn FnMut(ParamId, &Array2<f64>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamId, &mut Array2<f64>));
}

/// Several parameter bags addressed as one, so a single optimizer step can
/// span the field, the latent bank, and the rendering networks. Groups must
/// not repeat across parts.
pub struct Bags<'a> {
    parts: Vec<&'a mut dyn ParamBag>,
}

impl<'a> Bags<'a> {
    pub fn new(parts: Vec<&'a mut dyn ParamBag>) -> Self {
        Bags { parts }
    }
}

impl ParamBag for Bags<'_> {
    fn visit(&self, f: &mut dyn FnMut(ParamId, &Array2<f64>)) {
        for p in &self.parts {
            p.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamId, &mut Array2<f64>)) {
        for p in &mut self.parts {
            p.visit_mut(f);
        }
    }
}

/// SHA-256 over the little-endian bytes of every tensor in `group`, in visit
/// order. Used to prove frozen groups never move.
pub fn group_digest(bag: &impl ParamBag, group: Group) -> [u8; 32] {
    let mut h = Sha256::new();
    bag.visit(&mut |id, t| {
        if id.group == group {
            h.update([id.slot]);
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
    });
    h.finalize().into()
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant { base: f64 },
    /// `base * factor^(epoch / every)` with integer division.
    StepDecay { base: f64, factor: f64, every: u32 },
}

impl LrSchedule {
    pub fn lr(&self, epoch: u32) -> f64 {
        match *self {
            LrSchedule::Constant { base } => base,
            LrSchedule::StepDecay { base, factor, every } => {
                base * factor.powi((epoch / every) as i32)
            }
        }
    }
}

/// Adam with per-tensor moment buffers and bias correction.
///
/// Step counts are tracked per tensor and only advance when the tensor is
/// updated, so a group that unfreezes mid-run starts its bias correction
/// fresh instead of inheriting a stale count.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<ParamId, Array2<f64>>,
    v: BTreeMap<ParamId, Array2<f64>>,
    t: BTreeMap<ParamId, i32>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: BTreeMap::new(),
        }
    }

    /// Applies one update to every live tensor that has a gradient entry.
    /// Frozen groups are skipped even if a gradient were present (and the
    /// tape never produces one for them).
    pub fn step(
        &mut self,
        bag: &mut dyn ParamBag,
        grads: &Gradients,
        live: &LiveSet,
        lr: f64,
    ) {
        debug_assert!(
            grads.params.keys().all(|id| live.contains(&id.group)),
            "gradient present for a frozen group"
        );
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let m = &mut self.m;
        let v = &mut self.v;
        let tc = &mut self.t;
        bag.visit_mut(&mut |id, p| {
            if !live.contains(&id.group) {
                return;
            }
            let Some(g) = grads.params.get(&id) else { return };
            debug_assert_eq!(g.dim(), p.dim(), "gradient shape mismatch for {id:?}");
            let mt = m.entry(id).or_insert_with(|| Array2::zeros(p.dim()));
            let vt = v.entry(id).or_insert_with(|| Array2::zeros(p.dim()));
            let t = tc.entry(id).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - b1.powi(*t);
            let bc2 = 1.0 - b2.powi(*t);
            ndarray::Zip::from(p)
                .and(mt)
                .and(vt)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        });
    }

    /// Step count of a tensor (0 if it has never been updated).
    pub fn steps_taken(&self, id: ParamId) -> i32 {
        self.t.get(&id).copied().unwrap_or(0)
    }
}
