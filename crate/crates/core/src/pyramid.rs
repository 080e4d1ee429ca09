//! Multi-scale patch grids and the mappings between them.
//!
//! Stages double in resolution and share a patch size, so every pair of
//! grids in a plan is related by an integer factor `k = 2^d`. Masks and
//! attention maps move between grids by exact block operations:
//!
//! * masks replicate each coarse bit onto its `k x k` block of fine patches;
//! * attention upsamples by replicating then dividing by `k^2`, and
//!   downsamples by block sums, so total mass is preserved in both directions;
//! * [`block_mean`] averages fine values over each coarse block, which is how
//!   per-patch ground-truth coverage composes across scales.
//!
//! Positional embeddings for down-scaled encoders are resampled with
//! per-channel bilinear interpolation at cell centers.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::contrastive::CdConfig;
use crate::error::{Error, Result};
use crate::selector::PatchMask;

/// Upper bound on plan length.
pub const MAX_STAGES: usize = 5;

/// A square-patch tiling of an image at one resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct PatchGrid {
    height_px: usize,
    width_px: usize,
    patch_px: usize,
}

#[derive(Serialize, Deserialize)]
struct RawGrid {
    height_px: usize,
    width_px: usize,
    patch_px: usize,
}

impl TryFrom<RawGrid> for PatchGrid {
    type Error = Error;
    fn try_from(raw: RawGrid) -> Result<Self> {
        PatchGrid::new(raw.height_px, raw.width_px, raw.patch_px)
    }
}

impl From<PatchGrid> for RawGrid {
    fn from(g: PatchGrid) -> Self {
        RawGrid {
            height_px: g.height_px,
            width_px: g.width_px,
            patch_px: g.patch_px,
        }
    }
}

impl PatchGrid {
    pub fn new(height_px: usize, width_px: usize, patch_px: usize) -> Result<Self> {
        if height_px == 0 || width_px == 0 || patch_px == 0 {
            return Err(Error::EmptyGrid);
        }
        for resolution in [height_px, width_px] {
            if resolution % patch_px != 0 {
                return Err(Error::NonDivisibleResolution { resolution, patch_px });
            }
        }
        Ok(Self {
            height_px,
            width_px,
            patch_px,
        })
    }

    pub fn square(resolution_px: usize, patch_px: usize) -> Result<Self> {
        Self::new(resolution_px, resolution_px, patch_px)
    }

    /// A grid with one pixel per patch, handy for abstract `rows x cols` maps.
    pub fn cells(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, 1)
    }

    pub fn resolution_px(&self) -> (usize, usize) {
        (self.height_px, self.width_px)
    }

    pub fn patch_px(&self) -> usize {
        self.patch_px
    }

    pub fn rows(&self) -> usize {
        self.height_px / self.patch_px
    }

    pub fn cols(&self) -> usize {
        self.width_px / self.patch_px
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    pub fn patch_count(&self) -> usize {
        self.rows() * self.cols()
    }
}

/// Relationship between two grids in the same pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rescale {
    Same,
    /// Each source patch covers a `k x k` block of target patches.
    Up(usize),
    /// Each target patch covers a `k x k` block of source patches.
    Down(usize),
}

impl Rescale {
    pub fn between(from: &PatchGrid, to: &PatchGrid) -> Result<Self> {
        let (fr, fc) = from.dims();
        let (tr, tc) = to.dims();
        let mismatch = || Error::GridMismatch {
            from: (fr, fc),
            to: (tr, tc),
        };
        if (fr, fc) == (tr, tc) {
            Ok(Rescale::Same)
        } else if tr >= fr && tc >= fc {
            if tr % fr != 0 || tc % fc != 0 || tr / fr != tc / fc {
                return Err(mismatch());
            }
            Ok(Rescale::Up(tr / fr))
        } else if tr <= fr && tc <= fc {
            if fr % tr != 0 || fc % tc != 0 || fr / tr != fc / tc {
                return Err(mismatch());
            }
            Ok(Rescale::Down(fr / tr))
        } else {
            Err(mismatch())
        }
    }
}

/// Ordered stages from coarsest (amateur) to finest (expert).
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    stages: Vec<PatchGrid>,
    pub lambda: f64,
    pub cd: CdConfig,
}

impl StagePlan {
    /// Plan whose top stage is twice `base_resolution` and whose lower stages
    /// halve successively, e.g. `336, 4 stages -> 84, 168, 336, 672`.
    pub fn build(
        base_resolution: usize,
        patch_px: usize,
        stage_count: usize,
        lambda: f64,
        cd: CdConfig,
    ) -> Result<Self> {
        if !(2..=MAX_STAGES).contains(&stage_count) {
            return Err(Error::InvalidPlan(format!(
                "stage count {stage_count} outside 2..={MAX_STAGES}"
            )));
        }
        let top = base_resolution * 2;
        let mut resolutions = Vec::with_capacity(stage_count);
        for level in (0..stage_count).rev() {
            let div = 1usize << level;
            if top % div != 0 {
                return Err(Error::InvalidPlan(format!("{top}px cannot be halved {level} times")));
            }
            resolutions.push(top / div);
        }
        Self::from_resolutions(&resolutions, patch_px, lambda, cd)
    }

    /// Plan from an explicit resolution list. A single-stage list is accepted
    /// as the degenerate baseline plan.
    pub fn from_resolutions(resolutions: &[usize], patch_px: usize, lambda: f64, cd: CdConfig) -> Result<Self> {
        if resolutions.is_empty() || resolutions.len() > MAX_STAGES {
            return Err(Error::InvalidPlan(format!(
                "{} stages, expected 1..={MAX_STAGES}",
                resolutions.len()
            )));
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::NonPositiveLambda(lambda));
        }
        cd.validate()?;
        let stages = resolutions
            .iter()
            .map(|&r| PatchGrid::square(r, patch_px))
            .collect::<Result<Vec<_>>>()?;
        for pair in resolutions.windows(2) {
            if pair[1] != pair[0] * 2 {
                return Err(Error::InvalidPlan(format!(
                    "stage {} -> {} is not a twofold step",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(Self { stages, lambda, cd })
    }

    pub fn stages(&self) -> &[PatchGrid] {
        &self.stages
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn finest(&self) -> &PatchGrid {
        self.stages.last().expect("plan has at least one stage")
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.stages.iter().map(|g| g.resolution_px().0).collect()
    }
}

/// Replicates every coarse bit onto its block of fine patches.
pub fn upsample_mask(mask: &PatchMask, from: &PatchGrid, to: &PatchGrid) -> Result<PatchMask> {
    if mask.grid().dims() != from.dims() {
        return Err(Error::GridMismatch {
            from: mask.grid().dims(),
            to: from.dims(),
        });
    }
    let k = match Rescale::between(from, to)? {
        Rescale::Same => return Ok(PatchMask::from_bits(*to, mask.bits().to_vec())),
        Rescale::Up(k) => k,
        Rescale::Down(_) => {
            return Err(Error::GridMismatch {
                from: from.dims(),
                to: to.dims(),
            })
        }
    };
    let (rows, cols) = to.dims();
    let src_cols = from.cols();
    let bits = (0..rows * cols)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            mask.bits()[(r / k) * src_cols + c / k]
        })
        .collect();
    Ok(PatchMask::from_bits(*to, bits))
}

/// Moves attention between grids while conserving total mass.
pub fn pool_attention(attn: &AttentionMap, to: &PatchGrid) -> Result<AttentionMap> {
    let from = attn.grid();
    let values = match Rescale::between(from, to)? {
        Rescale::Same => attn.values().to_vec(),
        Rescale::Up(k) => {
            let scale = 1.0 / (k * k) as f64;
            let src = attn.values();
            let (rows, cols) = to.dims();
            let src_cols = from.cols();
            (0..rows * cols)
                .map(|i| src[(i / cols / k) * src_cols + (i % cols) / k] * scale)
                .collect()
        }
        Rescale::Down(k) => block_reduce(attn.values(), from.dims(), k),
    };
    AttentionMap::new(*to, values)
}

/// Averages `values` (laid out on `from`) over each block of `to`.
pub fn block_mean(values: &[f64], from: &PatchGrid, to: &PatchGrid) -> Result<Vec<f64>> {
    if values.len() != from.patch_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} values for {} patches",
            values.len(),
            from.patch_count()
        )));
    }
    match Rescale::between(from, to)? {
        Rescale::Same => Ok(values.to_vec()),
        Rescale::Down(k) => {
            let area = (k * k) as f64;
            Ok(block_reduce(values, from.dims(), k)
                .into_iter()
                .map(|s| s / area)
                .collect())
        }
        Rescale::Up(_) => Err(Error::GridMismatch {
            from: from.dims(),
            to: to.dims(),
        }),
    }
}

fn block_reduce(values: &[f64], (rows, cols): (usize, usize), k: usize) -> Vec<f64> {
    let (out_rows, out_cols) = (rows / k, cols / k);
    let mut out = vec![0.0; out_rows * out_cols];
    for r in 0..rows {
        for c in 0..cols {
            out[(r / k) * out_cols + c / k] += values[r * cols + c];
        }
    }
    out
}

/// How the class token is treated when resampling positional embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsStyle {
    /// CLIP-style: the class embedding is carried over untouched.
    ClsPreserved,
    /// SigLIP-style: no class token, every position is resampled.
    FullInterp,
}

/// Learned positional embeddings laid out as `rows x cols x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEmbeddingGrid {
    rows: usize,
    cols: usize,
    dim: usize,
    values: Vec<f64>,
    cls_embedding: Option<Vec<f64>>,
}

impl PositionalEmbeddingGrid {
    pub fn new(
        (rows, cols): (usize, usize),
        dim: usize,
        values: Vec<f64>,
        cls_embedding: Option<Vec<f64>>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 {
            return Err(Error::EmptyGrid);
        }
        if values.len() != rows * cols * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {rows}x{cols}x{dim}",
                values.len()
            )));
        }
        if let Some(cls) = &cls_embedding {
            if cls.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "cls embedding has {} entries, expected {dim}",
                    cls.len()
                )));
            }
        }
        Ok(Self {
            rows,
            cols,
            dim,
            values,
            cls_embedding,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cls_embedding(&self) -> Option<&[f64]> {
        self.cls_embedding.as_deref()
    }

    pub fn cls_style(&self) -> ClsStyle {
        if self.cls_embedding.is_some() {
            ClsStyle::ClsPreserved
        } else {
            ClsStyle::FullInterp
        }
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.cols + col) * self.dim;
        &self.values[start..start + self.dim]
    }
}

/// Source coordinate and blend weight for one output index, cell-center aligned.
fn sample_axis(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinearly resamples the patch embeddings onto `target` rows/cols.
pub fn interpolate_positional_embeddings(
    src: &PositionalEmbeddingGrid,
    (rows, cols): (usize, usize),
) -> Result<PositionalEmbeddingGrid> {
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyGrid);
    }
    if (rows, cols) == src.grid() {
        return Ok(src.clone());
    }
    let dim = src.dim;
    let mut values = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        let (r0, r1, tr) = sample_axis(r, rows, src.rows);
        for c in 0..cols {
            let (c0, c1, tc) = sample_axis(c, cols, src.cols);
            let (p00, p01) = (src.at(r0, c0), src.at(r0, c1));
            let (p10, p11) = (src.at(r1, c0), src.at(r1, c1));
            for ch in 0..dim {
                let top = lerp(p00[ch], p01[ch], tc);
                let bottom = lerp(p10[ch], p11[ch], tc);
                values.push(lerp(top, bottom, tr));
            }
        }
    }
    PositionalEmbeddingGrid::new((rows, cols), dim, values, src.cls_embedding.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cd() -> CdConfig {
        CdConfig::default()
    }

    #[test]
    fn default_plan_matches_four_stage_ablation_row() {
        let plan = StagePlan::build(336, 14, 4, 1.0, cd()).unwrap();
        assert_eq!(plan.resolutions(), vec![84, 168, 336, 672]);
        let dims: Vec<_> = plan.stages().iter().map(|g| g.dims()).collect();
        assert_eq!(dims, vec![(6, 6), (12, 12), (24, 24), (48, 48)]);
    }

    #[test]
    fn two_stage_plan() {
        let plan = StagePlan::build(336, 14, 2, 1.0, cd()).unwrap();
        assert_eq!(plan.resolutions(), vec![336, 672]);
        let plan = StagePlan::build(336, 14, 5, 1.0, cd()).unwrap();
        assert_eq!(plan.resolutions(), vec![42, 84, 168, 336, 672]);
    }

    #[test]
    fn non_divisible_patch_rejected() {
        assert!(matches!(
            StagePlan::build(336, 13, 4, 1.0, cd()),
            Err(Error::NonDivisibleResolution { .. })
        ));
        assert!(StagePlan::build(336, 14, 1, 1.0, cd()).is_err());
        assert!(StagePlan::from_resolutions(&[84, 336], 14, 1.0, cd()).is_err());
    }

    #[test]
    fn mask_replication() {
        let g1 = PatchGrid::cells(1, 1).unwrap();
        let g2 = PatchGrid::cells(2, 2).unwrap();
        let ones = PatchMask::from_bits(g1, vec![true]);
        assert_eq!(upsample_mask(&ones, &g1, &g2).unwrap().kept_count(), 4);

        let g4 = PatchGrid::cells(4, 4).unwrap();
        let m = PatchMask::from_bits(g2, vec![true, false, false, false]);
        let up = upsample_mask(&m, &g2, &g4).unwrap();
        let expected: Vec<bool> = (0..16).map(|i| i / 4 < 2 && i % 4 < 2).collect();
        assert_eq!(up.bits(), expected.as_slice());
    }

    #[test]
    fn mask_kept_fraction_preserved() {
        let g6 = PatchGrid::square(84, 14).unwrap();
        let g12 = PatchGrid::square(168, 14).unwrap();
        let bits: Vec<bool> = (0..36).map(|i| i % 4 == 0).collect();
        let m = PatchMask::from_bits(g6, bits);
        let up = upsample_mask(&m, &g6, &g12).unwrap();
        // direct loop oracle
        let before = m.bits().iter().filter(|&&b| b).count() as f64 / 36.0;
        let mut count = 0;
        for &b in up.bits() {
            if b {
                count += 1;
            }
        }
        assert_eq!(before, 0.25);
        assert_eq!(count as f64 / 144.0, 0.25);
    }

    #[test]
    fn mask_rejects_non_integer_ratio() {
        let a = PatchGrid::cells(2, 2).unwrap();
        let b = PatchGrid::cells(3, 3).unwrap();
        let m = PatchMask::ones(a);
        assert!(matches!(upsample_mask(&m, &a, &b), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn block_mean_of_single_peak() {
        let g2 = PatchGrid::cells(2, 2).unwrap();
        let g1 = PatchGrid::cells(1, 1).unwrap();
        assert_eq!(block_mean(&[4.0, 0.0, 0.0, 0.0], &g2, &g1).unwrap(), vec![1.0]);
    }

    #[test]
    fn pooling_conserves_uniform_mass() {
        let g2 = PatchGrid::cells(2, 2).unwrap();
        let g8 = PatchGrid::cells(8, 8).unwrap();
        let uniform = AttentionMap::new(g2, vec![0.25; 4]).unwrap();
        let up = pool_attention(&uniform, &g8).unwrap();
        assert!(up.values().iter().all(|&v| v == 1.0 / 64.0));
        let back = pool_attention(&up, &g2).unwrap();
        assert_eq!(back.values(), uniform.values());
    }

    #[test]
    fn pooling_rejects_anisotropic() {
        let a = PatchGrid::cells(2, 2).unwrap();
        let b = PatchGrid::cells(4, 8).unwrap();
        let m = AttentionMap::new(a, vec![1.0; 4]).unwrap();
        assert!(pool_attention(&m, &b).is_err());
    }

    #[test]
    fn interpolation_identity_and_midpoint() {
        let src = PositionalEmbeddingGrid::new((2, 2), 1, vec![0.0, 1.0, 1.0, 2.0], None).unwrap();
        assert_eq!(interpolate_positional_embeddings(&src, (2, 2)).unwrap(), src);

        let out = interpolate_positional_embeddings(&src, (3, 3)).unwrap();
        // scalar oracle: center of 3x3 maps to source coordinate (0.5, 0.5)
        let (x, y) = (0.5f64, 0.5f64);
        let oracle = (1.0 - y) * ((1.0 - x) * 0.0 + x * 1.0) + y * ((1.0 - x) * 1.0 + x * 2.0);
        assert_eq!(oracle, 1.0);
        assert_eq!(out.at(1, 1), &[oracle]);
        assert_eq!(out.cls_style(), ClsStyle::FullInterp);
    }

    #[test]
    fn cls_embedding_passes_through() {
        let values: Vec<f64> = (0..4 * 4 * 3).map(|v| v as f64).collect();
        let cls = vec![-1.0, 7.5, 0.25];
        let src = PositionalEmbeddingGrid::new((4, 4), 3, values, Some(cls.clone())).unwrap();
        let out = interpolate_positional_embeddings(&src, (2, 2)).unwrap();
        assert_eq!(out.cls_embedding(), Some(cls.as_slice()));
        assert_eq!(out.cls_style(), ClsStyle::ClsPreserved);
        assert_eq!(out.values().len(), 2 * 2 * 3);
    }

    #[test]
    fn empty_target_rejected() {
        let src = PositionalEmbeddingGrid::new((1, 1), 1, vec![1.0], None).unwrap();
        assert!(matches!(
            interpolate_positional_embeddings(&src, (0, 3)),
            Err(Error::EmptyGrid)
        ));
    }
}
