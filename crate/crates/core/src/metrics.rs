//! Hallucination probability, attention dice, and yes/no classification scores.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::pyramid::PatchGrid;

/// Relative slack allowed when comparing two dice values computed in floating point.
pub const DICE_COMPARE_TOLERANCE: f64 = 1e-12;

/// Binary object mask at pixel resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    height: usize,
    width: usize,
    pixels: Vec<bool>,
}

impl GroundTruthMask {
    pub fn new((height, width): (usize, usize), pixels: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::EmptyGrid);
        }
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} mask pixels for {height}x{width}",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn from_fn((height, width): (usize, usize), mut inside: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let pixels = (0..height * width).map(|i| inside(i / width, i % width)).collect();
        Self::new((height, width), pixels)
    }

    pub fn resolution_px(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    /// Mean of the pixel bits inside each patch of `grid` (`g_i`).
    ///
    /// Only the grid's `rows x cols` matter; the mask is split into that many
    /// equal blocks, so its resolution must be a multiple of both.
    pub fn per_patch_avg(&self, grid: &PatchGrid) -> Result<Vec<f64>> {
        let (rows, cols) = grid.dims();
        if self.height % rows != 0 || self.width % cols != 0 {
            return Err(Error::GridMismatch {
                from: (self.height, self.width),
                to: (rows, cols),
            });
        }
        let (bh, bw) = (self.height / rows, self.width / cols);
        let mut counts = vec![0usize; rows * cols];
        for (i, &p) in self.pixels.iter().enumerate() {
            if p {
                let (y, x) = (i / self.width, i % self.width);
                counts[(y / bh) * cols + x / bw] += 1;
            }
        }
        let area = (bh * bw) as f64;
        Ok(counts.into_iter().map(|c| c as f64 / area).collect())
    }
}

/// `2 * sum(a * g) / (sum(a) + sum(g))` on raw slices.
pub fn dice_coefficient(alpha: &[f64], g: &[f64]) -> Result<f64> {
    if alpha.len() != g.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} attention values vs {} mask values",
            alpha.len(),
            g.len()
        )));
    }
    let overlap: f64 = alpha.iter().zip(g).map(|(a, g)| a * g).sum();
    let denom: f64 = alpha.iter().sum::<f64>() + g.iter().sum::<f64>();
    if denom == 0.0 {
        return Err(Error::DegenerateInput);
    }
    Ok(2.0 * overlap / denom)
}

/// Attention dice against the mask averaged onto the attention's grid.
///
/// Attention must already lie in `[0, 1]` (see
/// [`max_normalize`](crate::attention::max_normalize)); an empty mask is an error.
pub fn attention_dice(attn: &AttentionMap, gt: &GroundTruthMask) -> Result<f64> {
    if let Some(v) = attn.values().iter().find(|&&v| v > 1.0) {
        return Err(Error::InvalidAttention(format!("{v} exceeds 1")));
    }
    let g = gt.per_patch_avg(attn.grid())?;
    if g.iter().all(|&x| x == 0.0) {
        return Err(Error::DegenerateInput);
    }
    dice_coefficient(attn.values(), &g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub stage: usize,
    pub dice: f64,
}

/// `P_Hal = 1 - P(y | v, x)`.
pub fn hallucination_probability(seq_prob: f64) -> Result<f64> {
    if !(seq_prob > 0.0 && seq_prob <= 1.0) {
        return Err(Error::OutOfRange(seq_prob));
    }
    Ok(1.0 - seq_prob)
}

/// Direct and closed-form verdicts on whether an on-mask increment can lower dice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonicityCheck {
    pub before: f64,
    pub after: f64,
    /// `sum(delta) * (sum(alpha * (1 - g)) + sum(g))`, which reduces to
    /// `sum_mask(delta) * (sum_offmask(alpha) + area)` for a binary mask.
    pub closed_form: f64,
}

impl MonotonicityCheck {
    pub fn direct_holds(&self) -> bool {
        self.after >= self.before - DICE_COMPARE_TOLERANCE * self.before.abs().max(1.0)
    }

    pub fn closed_form_holds(&self) -> bool {
        self.closed_form >= 0.0
    }

    pub fn agrees(&self) -> bool {
        self.direct_holds() == self.closed_form_holds()
    }
}

/// Checks `Dice(alpha) <= Dice(alpha + delta)` for increments confined to
/// fully covered patches (`g_i = 1`).
pub fn dice_monotonicity_oracle(
    alpha: &AttentionMap,
    delta: &AttentionMap,
    gt: &GroundTruthMask,
) -> Result<MonotonicityCheck> {
    let g = gt.per_patch_avg(alpha.grid())?;
    if delta.grid().dims() != alpha.grid().dims() {
        return Err(Error::GridMismatch {
            from: alpha.grid().dims(),
            to: delta.grid().dims(),
        });
    }
    if let Some(i) = delta.values().iter().zip(&g).position(|(&d, &gi)| d > 0.0 && gi != 1.0) {
        return Err(Error::HypothesisViolated(i));
    }
    let (before, after) = dice_change(alpha, delta, gt)?;
    let added: f64 = delta.values().iter().sum();
    let off_mask: f64 = alpha.values().iter().zip(&g).map(|(a, g)| a * (1.0 - g)).sum();
    let area: f64 = g.iter().sum();
    Ok(MonotonicityCheck {
        before,
        after,
        closed_form: added * (off_mask + area),
    })
}

/// Dice before and after adding `delta`, with no restriction on where it lands.
pub fn dice_change(alpha: &AttentionMap, delta: &AttentionMap, gt: &GroundTruthMask) -> Result<(f64, f64)> {
    let g = gt.per_patch_avg(alpha.grid())?;
    if delta.values().len() != alpha.values().len() {
        return Err(Error::GridMismatch {
            from: alpha.grid().dims(),
            to: delta.grid().dims(),
        });
    }
    let incremented: Vec<f64> = alpha.values().iter().zip(delta.values()).map(|(a, d)| a + d).collect();
    Ok((
        dice_coefficient(alpha.values(), &g)?,
        dice_coefficient(&incremented, &g)?,
    ))
}

/// Empirical mean and standard deviation of the coverage `g` of an `m x m`
/// patch whose pixels are i.i.d. Bernoulli(`p`).
pub fn bernoulli_patch_stats(p: f64, m: usize, trials: usize, seed: u64) -> Result<(f64, f64)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::OutOfRange(p));
    }
    if m == 0 || trials == 0 {
        return Err(Error::OutOfRange(0.0));
    }
    let dist = Bernoulli::new(p).map_err(|_| Error::OutOfRange(p))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = m * m;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..trials {
        let hits = (0..pixels).filter(|_| dist.sample(&mut rng)).count();
        let g = hits as f64 / pixels as f64;
        sum += g;
        sum_sq += g * g;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn is_yes(self) -> bool {
        self == Answer::Yes
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Answer::Yes => "yes",
            Answer::No => "no",
        })
    }
}

impl FromStr for Answer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "yes" => Ok(Answer::Yes),
            "no" => Ok(Answer::No),
            other => Err(Error::Config(format!("answer must be yes or no, got {other:?}"))),
        }
    }
}

/// Binary scores with "yes" as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores `(predicted, gold)` pairs.
pub fn classification_scores(answers: &[(Answer, Answer)]) -> Result<ClassificationReport> {
    if answers.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for &(pred, gold) in answers {
        match (pred, gold) {
            (Answer::Yes, Answer::Yes) => tp += 1,
            (Answer::Yes, Answer::No) => fp += 1,
            (Answer::No, Answer::No) => tn += 1,
            (Answer::No, Answer::Yes) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ClassificationReport {
        tp,
        fp,
        tn,
        fn_,
        precision,
        recall,
        accuracy: ratio(tp + tn, answers.len()),
        f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Answer::{No, Yes};

    fn cells_mask(bits: &[bool]) -> GroundTruthMask {
        GroundTruthMask::new((1, bits.len()), bits.to_vec()).unwrap()
    }

    fn map(values: &[f64]) -> AttentionMap {
        AttentionMap::new(PatchGrid::cells(1, values.len()).unwrap(), values.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let gt = cells_mask(&[true, true, false, false]);
        assert_eq!(attention_dice(&map(&[1.0, 1.0, 0.0, 0.0]), &gt).unwrap(), 1.0);
        let gt = cells_mask(&[false, true, false, false]);
        assert_eq!(attention_dice(&map(&[1.0, 0.0, 0.0, 0.0]), &gt).unwrap(), 0.0);
        let gt = cells_mask(&[true, false, false, false]);
        let d = attention_dice(&map(&[1.0, 1.0, 0.0, 0.0]), &gt).unwrap();
        // 2 * 1 / (2 + 1)
        assert!((d - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dice_errors() {
        assert!(matches!(
            dice_coefficient(&[0.0, 0.0], &[0.0, 0.0]),
            Err(Error::DegenerateInput)
        ));
        let empty = cells_mask(&[false, false]);
        assert!(matches!(
            attention_dice(&map(&[0.5, 0.5]), &empty),
            Err(Error::DegenerateInput)
        ));
        let gt = cells_mask(&[true, false]);
        assert!(attention_dice(&map(&[2.0, 0.0]), &gt).is_err());
    }

    #[test]
    fn per_patch_average() {
        let gt = GroundTruthMask::from_fn((4, 4), |r, c| r < 2 && c < 3).unwrap();
        let g = gt.per_patch_avg(&PatchGrid::cells(2, 2).unwrap()).unwrap();
        assert_eq!(g, vec![1.0, 0.5, 0.0, 0.0]);
        assert!(gt.per_patch_avg(&PatchGrid::cells(3, 3).unwrap()).is_err());
    }

    #[test]
    fn hallucination_probability_examples() {
        assert_eq!(hallucination_probability(1.0).unwrap(), 0.0);
        assert_eq!(hallucination_probability(0.25).unwrap(), 0.75);
        assert_eq!(hallucination_probability(0.5).unwrap(), 0.5);
        assert!(hallucination_probability(0.0).is_err());
        assert!(hallucination_probability(1.1).is_err());
    }

    #[test]
    fn monotonicity_zero_increment() {
        let gt = cells_mask(&[true, true, false, false]);
        let alpha = map(&[0.2, 0.4, 0.9, 0.1]);
        let check = dice_monotonicity_oracle(&alpha, &map(&[0.0; 4]), &gt).unwrap();
        assert_eq!(check.before, check.after);
        assert!(check.direct_holds() && check.agrees());
    }

    #[test]
    fn monotonicity_rejects_off_mask_increment() {
        let gt = cells_mask(&[true, true, false, false]);
        let alpha = map(&[0.2, 0.4, 0.9, 0.1]);
        assert!(matches!(
            dice_monotonicity_oracle(&alpha, &map(&[0.0, 0.0, 0.3, 0.0]), &gt),
            Err(Error::HypothesisViolated(2))
        ));
    }

    #[test]
    fn off_mask_increment_can_lower_dice() {
        // brute-force search over binary masks and grid-valued attention on 4 cells
        let levels = [0.0, 0.5, 1.0];
        let mut found = None;
        'search: for mask_bits in 1u8..16 {
            let bits: Vec<bool> = (0..4).map(|i| mask_bits >> i & 1 == 1).collect();
            let gt = cells_mask(&bits);
            for code in 0..81usize {
                let alpha: Vec<f64> = (0..4).map(|i| levels[code / 3usize.pow(i) % 3]).collect();
                for target in (0..4).filter(|&i| !bits[i]) {
                    let mut delta = vec![0.0; 4];
                    delta[target] = 0.5;
                    let (before, after) = dice_change(&map(&alpha), &map(&delta), &gt).unwrap();
                    if after < before {
                        found = Some((bits.clone(), alpha.clone(), before, after));
                        break 'search;
                    }
                }
            }
        }
        let (_, _, before, after) = found.expect("a counterexample exists");
        assert!(after < before);
    }

    #[test]
    fn bernoulli_single_pixel() {
        let (mean, std) = bernoulli_patch_stats(0.5, 1, 100_000, 7).unwrap();
        // std of the sample std for Bernoulli(0.5) is about 0.5 / sqrt(2N) ~ 0.0011
        assert!((std - 0.5).abs() < 3.0 * 0.5 / (2.0 * 100_000f64).sqrt());
        assert!((mean - 0.5).abs() < 3.0 * 0.5 / 100_000f64.sqrt());
    }

    #[test]
    fn bernoulli_unbiased_for_any_size() {
        for m in [1, 3, 8] {
            let (mean, _) = bernoulli_patch_stats(0.3, m, 20_000, 11).unwrap();
            assert!((mean - 0.3).abs() < 0.01, "m={m} mean={mean}");
        }
        assert!(bernoulli_patch_stats(1.0, 2, 10, 0).is_err());
    }

    #[test]
    fn classification_examples() {
        let r = classification_scores(&[(Yes, Yes), (No, No)]).unwrap();
        assert_eq!((r.recall, r.accuracy, r.f1), (1.0, 1.0, 1.0));
        let r = classification_scores(&[(No, Yes), (No, No), (No, Yes), (No, No)]).unwrap();
        assert_eq!((r.recall, r.accuracy, r.f1), (0.0, 0.5, 0.0));
        let r = classification_scores(&[(Yes, Yes), (Yes, No), (No, No), (No, Yes)]).unwrap();
        assert_eq!((r.recall, r.accuracy, r.f1), (0.5, 0.5, 0.5));
        assert!(matches!(classification_scores(&[]), Err(Error::EmptyDataset)));
    }
}
