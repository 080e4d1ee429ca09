//! Entropy-driven patch selection and the per-stage mask schedule.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{entropy, normalize, AttentionAccumulator, AttentionMap};
use crate::error::{Error, Result};
use crate::pyramid::{pool_attention, PatchGrid, StagePlan};

/// Keep/drop decision for every patch of one grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    grid: PatchGrid,
    bits: Vec<bool>,
    kept: usize,
}

impl PatchMask {
    /// Panics if `bits` does not cover the grid.
    pub fn from_bits(grid: PatchGrid, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), grid.patch_count(), "mask length must match grid");
        let kept = bits.iter().filter(|&&b| b).count();
        Self { grid, bits, kept }
    }

    pub fn ones(grid: PatchGrid) -> Self {
        Self::from_bits(grid, vec![true; grid.patch_count()])
    }

    pub fn zeros(grid: PatchGrid) -> Self {
        Self::from_bits(grid, vec![false; grid.patch_count()])
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn kept_count(&self) -> usize {
        self.kept
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept as f64 / self.bits.len() as f64
    }

    pub fn complement(&self) -> Self {
        Self::from_bits(self.grid, self.bits.iter().map(|b| !b).collect())
    }

    pub fn union(&self, other: &Self) -> Self {
        assert_eq!(self.grid.dims(), other.grid.dims());
        Self::from_bits(
            self.grid,
            self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        )
    }
}

/// How the next stage's patches are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionMode {
    /// Fraction from attention entropy.
    Dynamic,
    /// Constant fraction in `(0, 1]`.
    Fixed(f64),
    /// Complement of the dynamic choice.
    Reversed,
    /// Every patch.
    All,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionMode::Dynamic => f.write_str("dynamic"),
            SelectionMode::Fixed(p) => write!(f, "fixed:{p}"),
            SelectionMode::Reversed => f.write_str("reversed"),
            SelectionMode::All => f.write_str("all"),
        }
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(SelectionMode::Dynamic),
            "reversed" => Ok(SelectionMode::Reversed),
            "all" => Ok(SelectionMode::All),
            other => {
                let fraction = other
                    .strip_prefix("fixed:")
                    .and_then(|f| f.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown selection mode {other:?}")))?;
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(Error::Config(format!("fixed fraction {fraction} outside (0, 1]")));
                }
                Ok(SelectionMode::Fixed(fraction))
            }
        }
    }
}

impl Serialize for SelectionMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SelectionMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_mode")]
    pub mode: SelectionMode,
    /// OR each new mask with the previous stage's mask (off by default).
    #[serde(default)]
    pub cumulative_union: bool,
}

fn default_lambda() -> f64 {
    1.0
}

fn default_mode() -> SelectionMode {
    SelectionMode::Dynamic
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            mode: default_mode(),
            cumulative_union: false,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::NonPositiveLambda(self.lambda));
        }
        if let SelectionMode::Fixed(f) = self.mode {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("fixed fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// `p_select = (exp(lambda * H) - 1) / (exp(lambda) - 1)`.
pub fn selection_fraction(entropy: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&entropy) {
        return Err(Error::OutOfRangeEntropy(entropy));
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::NonPositiveLambda(lambda));
    }
    let p = if lambda <= 700.0 {
        (lambda * entropy).exp_m1() / lambda.exp_m1()
    } else {
        // same ratio rewritten to avoid overflowing exp(lambda)
        (lambda * (entropy - 1.0)).exp() * (-lambda * entropy).exp_m1() / (-lambda).exp_m1()
    };
    Ok(p.clamp(0.0, 1.0))
}

/// Keeps patches strictly above the k-th largest value, `k = clamp(floor(n * fraction), 1, n)`.
///
/// When ties at the top leave nothing strictly above the threshold, the
/// lowest-index maximum is kept so the next stage is never empty.
pub fn select_patches(attn: &AttentionMap, fraction: f64) -> PatchMask {
    let values = attn.values();
    let n = values.len();
    let k = ((n as f64 * fraction.clamp(0.0, 1.0)).floor() as usize).clamp(1, n);
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let threshold = sorted[k - 1];
    let mut bits: Vec<bool> = values.iter().map(|&v| v > threshold).collect();
    if !bits.contains(&true) {
        bits[argmax(values)] = true;
    }
    PatchMask::from_bits(*attn.grid(), bits)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Stage 1 sees every patch; later stages start empty.
pub fn init_masks(plan: &StagePlan) -> Vec<PatchMask> {
    plan.stages()
        .iter()
        .enumerate()
        .map(|(s, g)| {
            if s == 0 {
                PatchMask::ones(*g)
            } else {
                PatchMask::zeros(*g)
            }
        })
        .collect()
}

/// Outcome of one selection step.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSelection {
    pub mask: PatchMask,
    /// Entropy of the pooled accumulator, when it was needed.
    pub entropy: Option<f64>,
    /// Requested fraction before the top-k threshold.
    pub fraction: f64,
}

/// Derives the mask for `next_grid` from the accumulated attention.
pub fn advance_stage(
    acc: &AttentionAccumulator,
    next_grid: &PatchGrid,
    cfg: &SelectionConfig,
) -> Result<StageSelection> {
    if acc.is_empty() {
        return Err(Error::EmptyAccumulator);
    }
    if cfg.mode == SelectionMode::All {
        return Ok(StageSelection {
            mask: PatchMask::ones(*next_grid),
            entropy: None,
            fraction: 1.0,
        });
    }
    let pooled = pool_attention(&acc.to_map(), next_grid)?;
    match cfg.mode {
        SelectionMode::Fixed(fraction) => Ok(StageSelection {
            mask: select_patches(&pooled, fraction),
            entropy: None,
            fraction,
        }),
        SelectionMode::Dynamic | SelectionMode::Reversed => {
            let normalized = normalize(&pooled)?;
            let h = if next_grid.patch_count() < 2 {
                0.0
            } else {
                entropy(&normalized)?
            };
            let fraction = selection_fraction(h, cfg.lambda)?;
            let dynamic = select_patches(&normalized, fraction);
            let mask = if cfg.mode == SelectionMode::Reversed {
                let mut reversed = dynamic.complement();
                if reversed.kept_count() == 0 {
                    let mut bits = reversed.bits.clone();
                    bits[argmin(normalized.values())] = true;
                    reversed = PatchMask::from_bits(*next_grid, bits);
                }
                reversed
            } else {
                dynamic
            };
            Ok(StageSelection {
                mask,
                entropy: Some(h),
                fraction,
            })
        }
        SelectionMode::All => unreachable!(),
    }
}
