//! Planted-signal toy model.
//!
//! Self-attention follows the per-patch object coverage plus Gaussian noise,
//! the single cross-attention row is uniform over visible patches, and the
//! yes/no logit margin grows with how much attention lands on the region:
//!
//! ```text
//! self_i  = max(0, g_i * gain + eps_i) * mask_i
//! overlap = sum(self_i * g_i) / sum(self_i)          (1 - overlap for gold "no")
//! logit_yes - logit_no = margin_gain * overlap + margin_bias
//! ```
//!
//! Noise is drawn from a ChaCha stream keyed by the case seed and the stage
//! grid, so a stage sees the same noise whatever mask it is given.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{apply_mask, Backend, Capabilities, Case, StageOutput};
use crate::attention::{AttentionMap, CrossAttentionWeights};
use crate::contrastive::LogitVector;
use crate::error::{Error, Result};
use crate::metrics::{Answer, GroundTruthMask};
use crate::pyramid::{ClsStyle, PatchGrid};
use crate::selector::PatchMask;

pub const YES_TOKEN: usize = 0;
pub const NO_TOKEN: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticModel {
    #[serde(default = "default_margin_gain")]
    pub margin_gain: f64,
    #[serde(default = "default_margin_bias")]
    pub margin_bias: f64,
}

fn default_margin_gain() -> f64 {
    4.0
}
fn default_margin_bias() -> f64 {
    -2.0
}

impl Default for SyntheticModel {
    fn default() -> Self {
        Self {
            margin_gain: default_margin_gain(),
            margin_bias: default_margin_bias(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCase {
    pub id: String,
    pub gold: Answer,
    /// Region the planted attention follows: the object for gold "yes", the
    /// evidence of absence for gold "no".
    pub region: GroundTruthMask,
    pub noise_sigma: f64,
    pub signal_gain: f64,
    pub seed: u64,
}

impl SyntheticCase {
    pub fn to_case(&self) -> Case {
        Case {
            id: self.id.clone(),
            gold: self.gold,
            gt: (self.gold == Answer::Yes).then(|| self.region.clone()),
        }
    }
}

fn noise(case: &SyntheticCase, grid: &PatchGrid) -> Result<Vec<f64>> {
    let n = grid.patch_count();
    if case.noise_sigma == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let normal = Normal::new(0.0, case.noise_sigma)
        .map_err(|e| Error::Config(format!("noise_sigma {}: {e}", case.noise_sigma)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let (rows, cols) = grid.dims();
    rng.set_stream(((rows as u64) << 32) | cols as u64);
    Ok((0..n).map(|_| normal.sample(&mut rng)).collect())
}

/// Runs the planted model for one stage.
pub fn synthetic_run_stage(
    case: &SyntheticCase,
    model: &SyntheticModel,
    grid: &PatchGrid,
    mask: &PatchMask,
) -> Result<StageOutput> {
    if mask.grid().dims() != grid.dims() {
        return Err(Error::GridMismatch {
            from: mask.grid().dims(),
            to: grid.dims(),
        });
    }
    let g = case.region.per_patch_avg(grid)?;
    let eps = noise(case, grid)?;
    let mut self_attn: Vec<f64> = g
        .iter()
        .zip(&eps)
        .map(|(gi, e)| (gi * case.signal_gain + e).max(0.0))
        .collect();
    apply_mask(&mut self_attn, mask);

    let kept = mask.kept_count();
    let row = mask
        .bits()
        .iter()
        .map(|&b| if b { 1.0 / kept as f64 } else { 0.0 })
        .collect();

    let mass: f64 = self_attn.iter().sum();
    let on_region = if mass > 0.0 {
        self_attn.iter().zip(&g).map(|(a, gi)| a * gi).sum::<f64>() / mass
    } else {
        0.0
    };
    let overlap = match case.gold {
        Answer::Yes => on_region,
        Answer::No => 1.0 - on_region,
    };
    let margin = model.margin_gain * overlap + model.margin_bias;
    let mut logits = vec![0.0; 2];
    logits[YES_TOKEN] = margin;

    Ok(StageOutput {
        self_attn: AttentionMap::new(*grid, self_attn)?,
        cross: CrossAttentionWeights::new(*grid, vec![row])?,
        logits: vec![LogitVector::new(logits)?],
    })
}

pub struct SyntheticBackend {
    model: SyntheticModel,
    capabilities: Capabilities,
    cases: Vec<Case>,
    params: HashMap<String, SyntheticCase>,
}

impl SyntheticBackend {
    pub fn new(model: SyntheticModel, cases: Vec<SyntheticCase>) -> Result<Self> {
        let mut params = HashMap::with_capacity(cases.len());
        let mut list = Vec::with_capacity(cases.len());
        for c in cases {
            list.push(c.to_case());
            if params.insert(c.id.clone(), c).is_some() {
                return Err(Error::Config(format!(
                    "duplicate case id {:?}",
                    list.last().unwrap().id
                )));
            }
        }
        Ok(Self {
            model,
            capabilities: Capabilities {
                resolutions: None,
                vocab_size: Some(2),
                cls_style: ClsStyle::FullInterp,
                yes_token: YES_TOKEN,
                no_token: NO_TOKEN,
            },
            cases: list,
            params,
        })
    }

    pub fn model(&self) -> &SyntheticModel {
        &self.model
    }
}

impl Backend for SyntheticBackend {
    fn capabilities(&self) -> &Capabilities {
        &self.capabilities
    }

    fn cases(&self) -> &[Case] {
        &self.cases
    }

    fn run_stage(&self, case: &Case, _stage: usize, grid: &PatchGrid, mask: &PatchMask) -> Result<StageOutput> {
        let params = self
            .params
            .get(&case.id)
            .ok_or_else(|| Error::MissingCase(case.id.clone()))?;
        synthetic_run_stage(params, &self.model, grid, mask)
    }
}

/// Parameters of a generated planted dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    #[serde(default = "default_cases")]
    pub cases: usize,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_signal_gain")]
    pub signal_gain: f64,
    /// Side of the square pixel mask; must be divisible by every stage grid.
    #[serde(default = "default_mask_px")]
    pub mask_px: usize,
    /// Object side as a fraction of the image side, drawn uniformly.
    #[serde(default = "default_min_object")]
    pub min_object: f64,
    #[serde(default = "default_max_object")]
    pub max_object: f64,
}

fn default_cases() -> usize {
    200
}
fn default_noise_sigma() -> f64 {
    0.05
}
fn default_signal_gain() -> f64 {
    1.0
}
fn default_mask_px() -> usize {
    192
}
fn default_min_object() -> f64 {
    0.05
}
fn default_max_object() -> f64 {
    0.5
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            cases: default_cases(),
            noise_sigma: default_noise_sigma(),
            signal_gain: default_signal_gain(),
            mask_px: default_mask_px(),
            min_object: default_min_object(),
            max_object: default_max_object(),
        }
    }
}

/// Generates a balanced fixture: even indices are gold "yes", odd are "no".
/// Each case plants one axis-aligned rectangle.
pub fn planted_fixture(spec: &FixtureSpec, seed: u64) -> Result<Vec<SyntheticCase>> {
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise_sigma {} must be >= 0", spec.noise_sigma)));
    }
    if !(0.0 < spec.min_object && spec.min_object <= spec.max_object && spec.max_object <= 1.0) {
        return Err(Error::Config(
            "object size range must satisfy 0 < min <= max <= 1".into(),
        ));
    }
    if spec.mask_px == 0 {
        return Err(Error::EmptyGrid);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = spec.mask_px;
    (0..spec.cases)
        .map(|i| {
            let extent = |rng: &mut ChaCha8Rng| {
                let f = rng.random_range(spec.min_object..=spec.max_object);
                ((f * side as f64).round() as usize).clamp(1, side)
            };
            let (h, w) = (extent(&mut rng), extent(&mut rng));
            let top = rng.random_range(0..=side - h);
            let left = rng.random_range(0..=side - w);
            let region = GroundTruthMask::from_fn((side, side), |r, c| {
                (top..top + h).contains(&r) && (left..left + w).contains(&c)
            })?;
            Ok(SyntheticCase {
                id: format!("case{i:04}"),
                gold: if i % 2 == 0 { Answer::Yes } else { Answer::No },
                region,
                noise_sigma: spec.noise_sigma,
                signal_gain: spec.signal_gain,
                seed: rng.random(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(gold: Answer, sigma: f64) -> SyntheticCase {
        SyntheticCase {
            id: "c".into(),
            gold,
            region: GroundTruthMask::from_fn((8, 8), |r, c| r >= 2 && r < 5 && c >= 1 && c < 6).unwrap(),
            noise_sigma: sigma,
            signal_gain: 1.0,
            seed: 9,
        }
    }

    #[test]
    fn noiseless_full_mask_closed_form() {
        let grid = PatchGrid::cells(4, 4).unwrap();
        let c = case(Answer::Yes, 0.0);
        let out = synthetic_run_stage(&c, &SyntheticModel::default(), &grid, &PatchMask::ones(grid)).unwrap();
        let g = c.region.per_patch_avg(&grid).unwrap();
        assert_eq!(out.self_attn.values(), g.as_slice());
        let overlap = g.iter().map(|x| x * x).sum::<f64>() / g.iter().sum::<f64>();
        let margin = 4.0 * overlap - 2.0;
        assert!((out.logits[0].values()[0] - margin).abs() < 1e-12);
        assert_eq!(out.logits[0].values()[1], 0.0);
        assert_eq!(out.cross.rows(), &[vec![1.0 / 16.0; 16]]);
    }

    #[test]
    fn missing_the_object_answers_wrong() {
        let grid = PatchGrid::cells(4, 4).unwrap();
        let c = case(Answer::Yes, 0.0);
        let g = c.region.per_patch_avg(&grid).unwrap();
        let mask = PatchMask::from_bits(grid, g.iter().map(|&x| x == 0.0).collect());
        let out = synthetic_run_stage(&c, &SyntheticModel::default(), &grid, &mask).unwrap();
        // overlap is 0 (all visible attention is zero), so the margin is the bias
        assert_eq!(out.logits[0].values()[0], -2.0);
        assert!(out.logits[0].values()[0] < out.logits[0].values()[1]);
    }

    #[test]
    fn deterministic_and_masked() {
        let grid = PatchGrid::cells(8, 8).unwrap();
        let c = case(Answer::No, 0.3);
        let mask = PatchMask::from_bits(grid, (0..64).map(|i| i % 3 != 0).collect());
        let a = synthetic_run_stage(&c, &SyntheticModel::default(), &grid, &mask).unwrap();
        let b = synthetic_run_stage(&c, &SyntheticModel::default(), &grid, &mask).unwrap();
        assert_eq!(a, b);
        for (v, &keep) in a.self_attn.values().iter().zip(mask.bits()) {
            if !keep {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn noise_is_independent_of_mask() {
        let grid = PatchGrid::cells(8, 8).unwrap();
        let c = case(Answer::Yes, 0.5);
        let full = synthetic_run_stage(&c, &SyntheticModel::default(), &grid, &PatchMask::ones(grid)).unwrap();
        let mask = PatchMask::from_bits(grid, (0..64).map(|i| i < 32).collect());
        let half = synthetic_run_stage(&c, &SyntheticModel::default(), &grid, &mask).unwrap();
        assert_eq!(&full.self_attn.values()[..32], &half.self_attn.values()[..32]);
    }

    #[test]
    fn fixture_is_balanced_and_reproducible() {
        let spec = FixtureSpec {
            cases: 10,
            ..Default::default()
        };
        let a = planted_fixture(&spec, 42).unwrap();
        assert_eq!(a, planted_fixture(&spec, 42).unwrap());
        assert_ne!(a, planted_fixture(&spec, 43).unwrap());
        assert_eq!(a.iter().filter(|c| c.gold == Answer::Yes).count(), 5);
        assert!(a.iter().all(|c| c.region.area() > 0));
        assert!(a[1].to_case().gt.is_none());
        assert!(a[0].to_case().gt.is_some());
    }
}
