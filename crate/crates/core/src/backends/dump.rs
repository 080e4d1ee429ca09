//! Backend over SECD tensor dumps written by an offline extractor.
//!
//! A dump directory holds `manifest.json` and the tensor files it names:
//!
//! ```json
//! {
//!   "cls_style": "cls_preserved",
//!   "cases": [{
//!     "id": "coco-0001",
//!     "gold": "yes",
//!     "gt_mask_path": "coco-0001/mask.secd",
//!     "stages": [{"resolution": 336, "self_attn": "...", "cross_attn": "...", "logits": "..."}]
//!   }]
//! }
//! ```
//!
//! Per stage: `self_attn` holds `rows*cols` values; `cross_attn` is `[n]`,
//! `[tokens, n]` or `[tokens, rows, cols]`; `logits` is `[vocab]` or
//! `[steps, vocab]`. Masks are 2-D `[height, width]` tensors of 0/1. Paths
//! are relative to the dump directory. Unknown fields (such as the
//! extractor's head/layer reduction policy) are ignored.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{apply_mask, Backend, Capabilities, Case, StageOutput};
use crate::attention::{AttentionMap, CrossAttentionWeights};
use crate::contrastive::LogitVector;
use crate::error::{with_path, Error, Result};
use crate::metrics::{Answer, GroundTruthMask};
use crate::pyramid::{ClsStyle, PatchGrid};
use crate::secd::{read_tensor, Tensor};
use crate::selector::PatchMask;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cases: Vec<ManifestCase>,
    pub cls_style: ClsStyle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default)]
    pub yes_token: usize,
    #[serde(default = "default_no_token")]
    pub no_token: usize,
}

fn default_no_token() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCase {
    pub id: String,
    pub gold: Answer,
    #[serde(default)]
    pub gt_mask_path: Option<PathBuf>,
    pub stages: Vec<ManifestStage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestStage {
    pub resolution: Resolution,
    pub self_attn: PathBuf,
    pub cross_attn: PathBuf,
    pub logits: PathBuf,
}

/// Square side in pixels, or `[height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Resolution {
    Square(usize),
    Rect([usize; 2]),
}

impl Resolution {
    pub fn px(&self) -> (usize, usize) {
        match *self {
            Resolution::Square(s) => (s, s),
            Resolution::Rect([h, w]) => (h, w),
        }
    }
}

impl Manifest {
    /// Parses and structurally validates a manifest.
    pub fn parse(text: &str) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(text).map_err(|source| Error::Manifest {
            path: PathBuf::from(MANIFEST_FILE),
            source,
        })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.yes_token == self.no_token {
            return Err(Error::Config("yes_token and no_token must differ".into()));
        }
        if let Some(v) = self.vocab_size {
            if v < 2 || self.yes_token >= v || self.no_token >= v {
                return Err(Error::Config(format!(
                    "vocab_size {v} does not cover the answer tokens"
                )));
            }
        }
        let mut ids = HashSet::new();
        for case in &self.cases {
            if !ids.insert(case.id.as_str()) {
                return Err(Error::Config(format!("duplicate case id {:?}", case.id)));
            }
            if case.stages.is_empty() {
                return Err(Error::Config(format!("case {:?} has no stages", case.id)));
            }
            let mut seen = HashSet::new();
            for stage in &case.stages {
                let (h, w) = stage.resolution.px();
                if h == 0 || w == 0 {
                    return Err(Error::Config(format!("case {:?} has a zero resolution", case.id)));
                }
                if !seen.insert((h, w)) {
                    return Err(Error::Config(format!("case {:?} repeats resolution {h}x{w}", case.id)));
                }
            }
        }
        Ok(())
    }
}

pub struct DumpBackend {
    root: PathBuf,
    manifest: Manifest,
    capabilities: Capabilities,
    cases: Vec<Case>,
    index: HashMap<String, usize>,
}

fn mask_from_tensor(tensor: &Tensor) -> Result<GroundTruthMask> {
    let &[h, w] = tensor.dims() else {
        return Err(Error::ShapeMismatch(format!(
            "mask dims {:?}, expected [height, width]",
            tensor.dims()
        )));
    };
    let pixels = tensor
        .data()
        .iter()
        .map(|&v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            other => Err(Error::ShapeMismatch(format!("mask value {other} is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    GroundTruthMask::new((h, w), pixels)
}

impl DumpBackend {
    /// Loads `manifest.json` and every ground-truth mask from `root`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest_path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| with_path(e, &manifest_path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Manifest {
            path: manifest_path.clone(),
            source,
        })?;
        manifest.validate()?;
        Self::from_manifest(root, manifest)
    }

    pub fn from_manifest(root: PathBuf, manifest: Manifest) -> Result<Self> {
        let mut cases = Vec::with_capacity(manifest.cases.len());
        let mut index = HashMap::new();
        for (i, mc) in manifest.cases.iter().enumerate() {
            let gt = match &mc.gt_mask_path {
                Some(p) => Some(mask_from_tensor(&read_tensor(root.join(p))?)?),
                None => None,
            };
            index.insert(mc.id.clone(), i);
            cases.push(Case {
                id: mc.id.clone(),
                gold: mc.gold,
                gt,
            });
        }
        let mut resolutions: Vec<usize> = manifest
            .cases
            .iter()
            .flat_map(|c| c.stages.iter().map(|s| s.resolution.px().0))
            .collect();
        resolutions.sort_unstable();
        resolutions.dedup();
        let capabilities = Capabilities {
            resolutions: Some(resolutions),
            vocab_size: manifest.vocab_size,
            cls_style: manifest.cls_style,
            yes_token: manifest.yes_token,
            no_token: manifest.no_token,
        };
        Ok(Self {
            root,
            manifest,
            capabilities,
            cases,
            index,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn stage_entry(&self, case_id: &str, grid: &PatchGrid) -> Result<&ManifestStage> {
        let &i = self
            .index
            .get(case_id)
            .ok_or_else(|| Error::MissingCase(case_id.to_string()))?;
        self.manifest.cases[i]
            .stages
            .iter()
            .find(|s| s.resolution.px() == grid.resolution_px())
            .ok_or_else(|| {
                let (h, w) = grid.resolution_px();
                Error::MissingCase(format!("{case_id} at {h}x{w}"))
            })
    }

    fn load(&self, rel: &Path) -> Result<Tensor> {
        read_tensor(self.root.join(rel))
    }
}

/// Splits a tensor into rows of length `n`, treating the leading dim as the row count.
fn split_rows(tensor: &Tensor, n: usize, what: &str) -> Result<Vec<Vec<f64>>> {
    let row_len: usize = match tensor.dims() {
        [len] => *len,
        [_, rest @ ..] => rest.iter().product(),
        [] => 1,
    };
    if row_len != n || tensor.numel() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{what} dims {:?}, expected rows of {n}",
            tensor.dims()
        )));
    }
    Ok(tensor.to_f64().chunks_exact(n).map(<[f64]>::to_vec).collect())
}

/// Loads one stage of `case` from the dump and applies `mask` to the self-attention.
pub fn dump_run_stage(backend: &DumpBackend, case_id: &str, grid: &PatchGrid, mask: &PatchMask) -> Result<StageOutput> {
    let entry = backend.stage_entry(case_id, grid)?;
    let n = grid.patch_count();
    if mask.grid().dims() != grid.dims() {
        return Err(Error::GridMismatch {
            from: mask.grid().dims(),
            to: grid.dims(),
        });
    }

    let self_tensor = backend.load(&entry.self_attn)?;
    if self_tensor.numel() != n {
        return Err(Error::ShapeMismatch(format!(
            "self_attn dims {:?} for {n} patches",
            self_tensor.dims()
        )));
    }
    let mut self_attn = self_tensor.to_f64();
    apply_mask(&mut self_attn, mask);

    let cross = split_rows(&backend.load(&entry.cross_attn)?, n, "cross_attn")?;

    let logits_tensor = backend.load(&entry.logits)?;
    let vocab = match logits_tensor.dims() {
        [v] | [_, v] => *v,
        dims => return Err(Error::ShapeMismatch(format!("logits dims {dims:?}"))),
    };
    if let Some(expected) = backend.capabilities.vocab_size {
        if vocab != expected {
            return Err(Error::VocabMismatch {
                expected,
                actual: vocab,
            });
        }
    }
    if backend.capabilities.yes_token.max(backend.capabilities.no_token) >= vocab {
        return Err(Error::ShapeMismatch(format!(
            "vocab {vocab} does not cover the answer tokens"
        )));
    }
    let logits = split_rows(&logits_tensor, vocab, "logits")?
        .into_iter()
        .map(LogitVector::new)
        .collect::<Result<Vec<_>>>()?;

    Ok(StageOutput {
        self_attn: AttentionMap::new(*grid, self_attn)?,
        cross: CrossAttentionWeights::new(*grid, cross)?,
        logits,
    })
}

impl Backend for DumpBackend {
    fn capabilities(&self) -> &Capabilities {
        &self.capabilities
    }

    fn cases(&self) -> &[Case] {
        &self.cases
    }

    fn run_stage(&self, case: &Case, _stage: usize, grid: &PatchGrid, mask: &PatchMask) -> Result<StageOutput> {
        dump_run_stage(self, &case.id, grid, mask)
    }
}
