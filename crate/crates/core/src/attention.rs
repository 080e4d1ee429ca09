//! Visual attention: fusion of encoder self-attention with decoder
//! cross-attention, normalization, entropy, and the cross-stage accumulator.

use crate::error::{Error, Result};
use crate::pyramid::{pool_attention, PatchGrid};

const NORMALIZED_TOLERANCE: f64 = 1e-9;

/// Nonnegative per-patch scores on one grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    grid: PatchGrid,
    values: Vec<f64>,
    normalized: bool,
}

fn check_values(grid: &PatchGrid, values: &[f64]) -> Result<()> {
    if values.len() != grid.patch_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} attention values for {} patches",
            values.len(),
            grid.patch_count()
        )));
    }
    if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidAttention(format!("value {v} at patch {i}")));
    }
    Ok(())
}

impl AttentionMap {
    pub fn new(grid: PatchGrid, values: Vec<f64>) -> Result<Self> {
        check_values(&grid, &values)?;
        Ok(Self {
            grid,
            values,
            normalized: false,
        })
    }

    /// Builds a map that already sums to one, setting the normalized flag.
    pub fn new_normalized(grid: PatchGrid, values: Vec<f64>) -> Result<Self> {
        check_values(&grid, &values)?;
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > NORMALIZED_TOLERANCE {
            return Err(Error::NotNormalized);
        }
        Ok(Self {
            grid,
            values,
            normalized: true,
        })
    }

    pub fn zeros(grid: PatchGrid) -> Self {
        Self {
            values: vec![0.0; grid.patch_count()],
            grid,
            normalized: false,
        }
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Cross-attention rows, one per generated token, each over the visual patches.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionWeights {
    grid: PatchGrid,
    rows: Vec<Vec<f64>>,
}

impl CrossAttentionWeights {
    pub fn new(grid: PatchGrid, rows: Vec<Vec<f64>>) -> Result<Self> {
        for row in &rows {
            check_values(&grid, row)?;
        }
        Ok(Self { grid, rows })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// `VisualAttn_i = sum over rows of row_i * self_attn_i`.
pub fn fuse_attention(self_attn: &AttentionMap, cross: &CrossAttentionWeights) -> Result<AttentionMap> {
    if self_attn.grid.dims() != cross.grid.dims() {
        return Err(Error::GridMismatch {
            from: self_attn.grid.dims(),
            to: cross.grid.dims(),
        });
    }
    if cross.rows.is_empty() {
        return Err(Error::EmptyCrossAttention);
    }
    let mut fused = vec![0.0; self_attn.values.len()];
    for row in &cross.rows {
        for ((acc, &w), &s) in fused.iter_mut().zip(row).zip(&self_attn.values) {
            *acc += w * s;
        }
    }
    AttentionMap::new(self_attn.grid, fused)
}

pub fn normalize(attn: &AttentionMap) -> Result<AttentionMap> {
    let total = attn.total();
    if !(total > 0.0) {
        return Err(Error::ZeroMassAttention);
    }
    Ok(AttentionMap {
        grid: attn.grid,
        values: attn.values.iter().map(|v| v / total).collect(),
        normalized: true,
    })
}

/// Scales values by their maximum so they land in `[0, 1]`.
pub fn max_normalize(attn: &AttentionMap) -> Result<AttentionMap> {
    let max = attn.max();
    if !(max > 0.0) {
        return Err(Error::ZeroMassAttention);
    }
    AttentionMap::new(attn.grid, attn.values.iter().map(|v| v / max).collect())
}

/// Shannon entropy divided by `ln(n)`, so the result lies in `[0, 1]`.
pub fn entropy(attn: &AttentionMap) -> Result<f64> {
    if !attn.normalized {
        return Err(Error::NotNormalized);
    }
    let n = attn.values.len();
    if n < 2 {
        return Err(Error::SinglePatchGrid);
    }
    let h: f64 = attn.values.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    Ok((h / (n as f64).ln()).clamp(0.0, 1.0))
}

/// Running sum of per-stage attention, held on the finest grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionAccumulator {
    finest: PatchGrid,
    values: Vec<f64>,
    additions: usize,
}

impl AttentionAccumulator {
    pub fn new(finest: PatchGrid) -> Self {
        Self {
            values: vec![0.0; finest.patch_count()],
            finest,
            additions: 0,
        }
    }

    pub fn finest_grid(&self) -> &PatchGrid {
        &self.finest
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn additions(&self) -> usize {
        self.additions
    }

    pub fn is_empty(&self) -> bool {
        self.additions == 0
    }

    pub fn to_map(&self) -> AttentionMap {
        AttentionMap {
            grid: self.finest,
            values: self.values.clone(),
            normalized: false,
        }
    }

    /// Adds one stage's map with unit mass, resized to the finest grid.
    pub fn accumulate(&self, stage_attn: &AttentionMap) -> Result<Self> {
        let resized = pool_attention(&normalize(stage_attn)?, &self.finest)?;
        let values = self.values.iter().zip(resized.values()).map(|(a, b)| a + b).collect();
        Ok(Self {
            finest: self.finest,
            values,
            additions: self.additions + 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> PatchGrid {
        PatchGrid::cells(1, n).unwrap()
    }

    fn map(values: &[f64]) -> AttentionMap {
        AttentionMap::new(grid(values.len()), values.to_vec()).unwrap()
    }

    #[test]
    fn fuse_identity_and_annihilator() {
        let s = map(&[0.2, 0.3, 0.5]);
        let ones = CrossAttentionWeights::new(grid(3), vec![vec![1.0; 3]]).unwrap();
        assert_eq!(fuse_attention(&s, &ones).unwrap().values(), s.values());
        let zero = map(&[0.0; 3]);
        assert!(fuse_attention(&zero, &ones).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_multiply_accumulate() {
        let s = map(&[0.5, 0.5]);
        let cross = CrossAttentionWeights::new(grid(2), vec![vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        // hand oracle: (0.5*1 + 0.5*0, 0.5*0 + 0.5*2)
        assert_eq!(fuse_attention(&s, &cross).unwrap().values(), &[0.5, 1.0]);
    }

    #[test]
    fn fuse_errors() {
        let s = map(&[1.0, 1.0]);
        let empty = CrossAttentionWeights::new(grid(2), vec![]).unwrap();
        assert!(matches!(fuse_attention(&s, &empty), Err(Error::EmptyCrossAttention)));
        let other = CrossAttentionWeights::new(grid(3), vec![vec![1.0; 3]]).unwrap();
        assert!(matches!(fuse_attention(&s, &other), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&map(&[2.0, 2.0])).unwrap().values(), &[0.5, 0.5]);
        assert_eq!(normalize(&map(&[1.0, 0.0, 0.0])).unwrap().values(), &[1.0, 0.0, 0.0]);
        assert_eq!(normalize(&map(&[1.0, 3.0])).unwrap().values(), &[1.0 / 4.0, 3.0 / 4.0]);
        assert!(matches!(normalize(&map(&[0.0, 0.0])), Err(Error::ZeroMassAttention)));
    }

    #[test]
    fn entropy_examples() {
        let uniform = normalize(&map(&[1.0; 7])).unwrap();
        assert!((entropy(&uniform).unwrap() - 1.0).abs() < 1e-12);
        let one_hot = normalize(&map(&[0.0, 5.0, 0.0])).unwrap();
        assert_eq!(entropy(&one_hot).unwrap(), 0.0);
        let half = normalize(&map(&[0.5, 0.5, 0.0, 0.0])).unwrap();
        let oracle = 2f64.ln() / 4f64.ln();
        assert!((entropy(&half).unwrap() - oracle).abs() < 1e-15);
        assert!((oracle - 0.5).abs() < 1e-15);
    }

    #[test]
    fn entropy_errors() {
        assert!(matches!(entropy(&map(&[0.5, 0.5])), Err(Error::NotNormalized)));
        let single = normalize(&map(&[1.0])).unwrap();
        assert!(matches!(entropy(&single), Err(Error::SinglePatchGrid)));
    }

    #[test]
    fn accumulate_uniform_and_linear() {
        let coarse = PatchGrid::cells(2, 2).unwrap();
        let fine = PatchGrid::cells(4, 4).unwrap();
        let acc = AttentionAccumulator::new(fine);
        let uniform = AttentionMap::new(coarse, vec![3.0; 4]).unwrap();
        let once = acc.accumulate(&uniform).unwrap();
        assert!(once.values().iter().all(|&v| v == 1.0 / 16.0));
        let twice = once.accumulate(&uniform).unwrap();
        for (a, b) in twice.values().iter().zip(once.values()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn accumulate_mass_bookkeeping() {
        let fine = PatchGrid::cells(8, 8).unwrap();
        let mut acc = AttentionAccumulator::new(fine);
        let maps = [
            AttentionMap::new(PatchGrid::cells(2, 2).unwrap(), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            AttentionMap::new(PatchGrid::cells(4, 4).unwrap(), (0..16).map(|v| v as f64).collect()).unwrap(),
            AttentionMap::new(fine, (0..64).map(|v| (v % 5) as f64).collect()).unwrap(),
        ];
        for (k, m) in maps.iter().enumerate() {
            acc = acc.accumulate(m).unwrap();
            let total: f64 = acc.values().iter().sum();
            assert!((total - (k + 1) as f64).abs() < 1e-9);
        }
        assert_eq!(acc.additions(), 3);
    }

    #[test]
    fn max_normalize_bounds() {
        let m = max_normalize(&map(&[0.0, 2.0, 4.0])).unwrap();
        assert_eq!(m.values(), &[0.0, 0.5, 1.0]);
    }
}
