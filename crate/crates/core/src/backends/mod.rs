//! Sources of per-stage attention and logits.
//!
//! A backend answers one question: given a case, a stage grid and the mask of
//! patches visible at that stage, what self-attention, cross-attention and
//! logits does the model produce? Heads and layers are reduced by whoever
//! produced the data; the contract only carries single 2-D maps.

pub mod dump;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, CrossAttentionWeights};
use crate::contrastive::LogitVector;
use crate::error::Result;
use crate::metrics::{Answer, GroundTruthMask};
use crate::pyramid::{ClsStyle, PatchGrid};
use crate::selector::PatchMask;

pub use dump::{DumpBackend, Manifest};
pub use synthetic::{
    planted_fixture, synthetic_run_stage, FixtureSpec, SyntheticBackend, SyntheticCase, SyntheticModel,
};

/// One benchmark query.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub gold: Answer,
    /// Object mask, absent when the queried object is not in the image.
    pub gt: Option<GroundTruthMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    /// Stage resolutions the backend can serve; `None` means any.
    pub resolutions: Option<Vec<usize>>,
    pub vocab_size: Option<usize>,
    pub cls_style: ClsStyle,
    pub yes_token: usize,
    pub no_token: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub self_attn: AttentionMap,
    pub cross: CrossAttentionWeights,
    /// One vector per decode step.
    pub logits: Vec<LogitVector>,
}

pub trait Backend: Sync {
    fn capabilities(&self) -> &Capabilities;

    fn cases(&self) -> &[Case];

    /// Runs `case` at stage index `stage` on `grid`, seeing only the patches in `mask`.
    ///
    /// Must be deterministic, and must zero the self-attention of every patch
    /// the mask drops.
    fn run_stage(&self, case: &Case, stage: usize, grid: &PatchGrid, mask: &PatchMask) -> Result<StageOutput>;
}

/// Zeroes entries whose mask bit is off.
pub fn apply_mask(values: &mut [f64], mask: &PatchMask) {
    for (v, &keep) in values.iter_mut().zip(mask.bits()) {
        if !keep {
            *v = 0.0;
        }
    }
}
