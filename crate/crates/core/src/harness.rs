//! End-to-end selective decoding over a dataset, plus CSV and PGM output.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{fuse_attention, AttentionAccumulator, AttentionMap};
use crate::backends::{
    planted_fixture, Backend, Case, DumpBackend, FixtureSpec, StageOutput, SyntheticBackend, SyntheticModel,
};
use crate::contrastive::{
    greedy_token, multi_stage_cd, sequence_probability, single_stage_cd, CdConfig, LogitVector, StageLogits,
};
use crate::error::{Error, Result};
use crate::metrics::{attention_dice, classification_scores, hallucination_probability, Answer, ClassificationReport};
use crate::pyramid::{upsample_mask, StagePlan};
use crate::selector::{advance_stage, init_masks, SelectionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CdMode {
    None,
    /// Final stage against stage 1.
    Single,
    #[default]
    Multi,
}

impl fmt::Display for CdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CdMode::None => "none",
            CdMode::Single => "single",
            CdMode::Multi => "multi",
        })
    }
}

impl FromStr for CdMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CdMode::None),
            "single" => Ok(CdMode::Single),
            "multi" => Ok(CdMode::Multi),
            other => Err(Error::Config(format!("unknown cd mode {other:?}"))),
        }
    }
}

impl Serialize for CdMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CdMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Where stage outputs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Synthetic {
        #[serde(default)]
        fixture: FixtureSpec,
        #[serde(default)]
        model: SyntheticModel,
    },
    Dump {
        dir: PathBuf,
    },
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Synthetic {
            fixture: FixtureSpec::default(),
            model: SyntheticModel::default(),
        }
    }
}

impl FromStr for BackendSpec {
    type Err = Error;
    /// `synthetic` or `dump:<dir>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "synthetic" {
            Ok(BackendSpec::default())
        } else if let Some(dir) = s.strip_prefix("dump:") {
            if dir.is_empty() {
                return Err(Error::Config("dump backend needs a directory".into()));
            }
            Ok(BackendSpec::Dump { dir: dir.into() })
        } else {
            Err(Error::Config(format!("unknown backend {s:?}")))
        }
    }
}

/// Stage list as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_resolution: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_count: Option<usize>,
    #[serde(default = "default_patch_px")]
    pub patch_px: usize,
}

fn default_patch_px() -> usize {
    14
}

impl Default for PlanSpec {
    fn default() -> Self {
        Self {
            stages: Some(vec![84, 168, 336, 672]),
            base_resolution: None,
            stage_count: None,
            patch_px: default_patch_px(),
        }
    }
}

impl PlanSpec {
    pub fn build(&self, lambda: f64, cd: CdConfig) -> Result<StagePlan> {
        match (&self.stages, self.base_resolution, self.stage_count) {
            (Some(stages), None, None) => StagePlan::from_resolutions(stages, self.patch_px, lambda, cd),
            (None, Some(base), Some(count)) => StagePlan::build(base, self.patch_px, count, lambda, cd),
            _ => Err(Error::Config(
                "plan needs either `stages` or both `base_resolution` and `stage_count`".into(),
            )),
        }
    }
}

/// Run configuration as stored on disk. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub plan: PlanSpec,
    pub selection: SelectionConfig,
    pub cd: CdConfig,
    pub cd_mode: CdMode,
    pub backend: BackendSpec,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::new(
            self.plan.build(self.selection.lambda, self.cd)?,
            self.selection,
            self.cd,
            self.cd_mode,
            self.backend.clone(),
            self.seed,
            self.out.clone().unwrap_or_else(|| PathBuf::from("out")),
        )
    }
}

/// Validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub plan: StagePlan,
    pub selection: SelectionConfig,
    pub cd: CdConfig,
    pub cd_mode: CdMode,
    pub backend: BackendSpec,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(
        plan: StagePlan,
        selection: SelectionConfig,
        cd: CdConfig,
        cd_mode: CdMode,
        backend: BackendSpec,
        seed: u64,
        out_dir: PathBuf,
    ) -> Result<Self> {
        selection.validate()?;
        cd.validate()?;
        if cd_mode != CdMode::None && plan.stage_count() < 2 {
            return Err(Error::Config(format!(
                "cd mode {cd_mode} needs at least 2 stages, plan has {}",
                plan.stage_count()
            )));
        }
        Ok(Self {
            plan,
            selection,
            cd,
            cd_mode,
            backend,
            seed,
            out_dir,
        })
    }

    /// Same configuration with a different plan, CD mode or selection.
    pub fn with_plan(&self, plan: StagePlan) -> Result<Self> {
        Self::new(
            plan,
            self.selection,
            self.cd,
            self.cd_mode,
            self.backend.clone(),
            self.seed,
            self.out_dir.clone(),
        )
    }

    pub fn with_cd_mode(&self, cd_mode: CdMode) -> Result<Self> {
        Self::new(
            self.plan.clone(),
            self.selection,
            self.cd,
            cd_mode,
            self.backend.clone(),
            self.seed,
            self.out_dir.clone(),
        )
    }

    pub fn with_selection(&self, selection: SelectionConfig) -> Result<Self> {
        Self::new(
            self.plan.clone(),
            selection,
            self.cd,
            self.cd_mode,
            self.backend.clone(),
            self.seed,
            self.out_dir.clone(),
        )
    }
}

/// Builds the backend a spec describes. Synthetic fixtures are generated from `seed`.
pub fn open_backend(spec: &BackendSpec, seed: u64) -> Result<Box<dyn Backend>> {
    match spec {
        BackendSpec::Synthetic { fixture, model } => {
            let cases = planted_fixture(fixture, seed)?;
            Ok(Box::new(SyntheticBackend::new(*model, cases)?))
        }
        BackendSpec::Dump { dir } => Ok(Box::new(DumpBackend::open(dir)?)),
    }
}

/// Outcome of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub case_id: String,
    pub gold: Answer,
    pub answer: Answer,
    pub p_hal_expert: f64,
    pub p_hal_cd: f64,
    /// Per stage; `None` when the case has no object mask.
    pub dice: Vec<Option<f64>>,
    /// Kept fraction of each stage's mask (stage 1 is always 1).
    pub fractions: Vec<f64>,
    /// Accumulated attention on the finest grid after every stage.
    pub attention: AttentionMap,
}

impl CaseResult {
    pub fn correct(&self) -> bool {
        self.answer == self.gold
    }
}

fn stage_context(case: &Case, stage: usize) -> impl FnOnce(Error) -> Error + '_ {
    move |e| Error::Stage {
        case: case.id.clone(),
        stage: stage + 1,
        source: Box::new(e),
    }
}

fn p_hal(steps: &[LogitVector]) -> Result<f64> {
    let chosen: Vec<usize> = steps.iter().map(greedy_token).collect();
    let p = sequence_probability(steps, &chosen)?;
    if p > 0.0 {
        hallucination_probability(p)
    } else {
        Ok(1.0)
    }
}

fn combine_logits(outputs: &[StageOutput], cfg: &RunConfig) -> Result<Vec<LogitVector>> {
    let steps = outputs[0].logits.len();
    if steps == 0 {
        return Err(Error::ShapeMismatch("stage produced no logits".into()));
    }
    if let Some(o) = outputs.iter().find(|o| o.logits.len() != steps) {
        return Err(Error::ShapeMismatch(format!(
            "stages disagree on decode steps: {steps} vs {}",
            o.logits.len()
        )));
    }
    let last = outputs.len() - 1;
    (0..steps)
        .map(|t| {
            let expert = &outputs[last].logits[t];
            match cfg.cd_mode {
                CdMode::None => Ok(expert.clone()),
                CdMode::Single => single_stage_cd(expert, &outputs[0].logits[t], cfg.cd.alpha),
                CdMode::Multi => {
                    let stages = StageLogits::from_stages(outputs.iter().map(|o| o.logits[t].clone()).collect())?;
                    multi_stage_cd(&stages, &cfg.cd)
                }
            }
        })
        .collect()
}

/// Yes/no decision from the first decode step; ties go to "yes".
fn decide(logits: &LogitVector, yes: usize, no: usize) -> Result<Answer> {
    let v = logits.values();
    if yes >= v.len() || no >= v.len() {
        return Err(Error::IndexOutOfRange {
            index: yes.max(no),
            vocab: v.len(),
        });
    }
    Ok(if v[yes] >= v[no] { Answer::Yes } else { Answer::No })
}

/// Runs every stage of `case`: query the backend on the current mask, fuse
/// and accumulate attention, then derive the next mask. Attention is also
/// accumulated at the final stage so per-stage dice covers every stage.
pub fn run_case(backend: &dyn Backend, case: &Case, cfg: &RunConfig) -> Result<CaseResult> {
    let plan = &cfg.plan;
    let stages = plan.stages();
    let mut masks = init_masks(plan);
    let mut acc = AttentionAccumulator::new(*plan.finest());
    let mut snapshots = Vec::with_capacity(stages.len());
    let mut outputs = Vec::with_capacity(stages.len());
    let mut fractions = vec![1.0];

    for (s, grid) in stages.iter().enumerate() {
        let out = backend
            .run_stage(case, s, grid, &masks[s])
            .map_err(stage_context(case, s))?;
        let fused = fuse_attention(&out.self_attn, &out.cross).map_err(stage_context(case, s))?;
        acc = acc.accumulate(&fused).map_err(stage_context(case, s))?;
        snapshots.push(acc.values().to_vec());
        outputs.push(out);

        if s + 1 == stages.len() {
            break;
        }
        let next = &stages[s + 1];
        let mut mask = advance_stage(&acc, next, &cfg.selection)
            .map_err(stage_context(case, s))?
            .mask;
        if cfg.selection.cumulative_union {
            mask = mask.union(&upsample_mask(&masks[s], grid, next)?);
        }
        fractions.push(mask.kept_fraction());
        masks[s + 1] = mask;
    }

    let caps = backend.capabilities();
    let expert_steps: Vec<LogitVector> = outputs.last().unwrap().logits.clone();
    let cd_steps = combine_logits(&outputs, cfg).map_err(stage_context(case, stages.len() - 1))?;
    let answer = decide(&cd_steps[0], caps.yes_token, caps.no_token)?;

    let attention = acc.to_map();
    let dice = match &case.gt {
        Some(gt) if gt.area() > 0 => {
            let max = attention.max();
            snapshots
                .iter()
                .map(|snap| {
                    let scaled = AttentionMap::new(*plan.finest(), snap.iter().map(|v| v / max).collect())?;
                    attention_dice(&scaled, gt).map(Some)
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => vec![None; stages.len()],
    };

    Ok(CaseResult {
        case_id: case.id.clone(),
        gold: case.gold,
        answer,
        p_hal_expert: p_hal(&expert_steps)?,
        p_hal_cd: p_hal(&cd_steps)?,
        dice,
        fractions,
        attention,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRun {
    pub report: ClassificationReport,
    pub results: Vec<CaseResult>,
}

/// Runs every case in order and scores the answers.
pub fn run_dataset(backend: &dyn Backend, cases: &[Case], cfg: &RunConfig) -> Result<DatasetRun> {
    run_dataset_parallel(backend, cases, cfg, 1)
}

/// Like [`run_dataset`], spreading cases over `threads` workers. Results keep
/// the input order.
pub fn run_dataset_parallel(
    backend: &dyn Backend,
    cases: &[Case],
    cfg: &RunConfig,
    threads: usize,
) -> Result<DatasetRun> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let threads = threads.clamp(1, cases.len());
    let results: Vec<CaseResult> = if threads == 1 {
        cases.iter().map(|c| run_case(backend, c, cfg)).collect::<Result<_>>()?
    } else {
        let chunk = cases.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = cases
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|c| run_case(backend, c, cfg))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(cases.len());
            for h in handles {
                all.extend(h.join().expect("worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let answers: Vec<(Answer, Answer)> = results.iter().map(|r| (r.answer, r.gold)).collect();
    Ok(DatasetRun {
        report: classification_scores(&answers)?,
        results,
    })
}

/// Stage columns reported in CSV output; at least four.
fn stage_columns(results: &[CaseResult]) -> usize {
    results.iter().map(|r| r.dice.len()).max().unwrap_or(0).max(4)
}

fn fmt_float(v: f64) -> String {
    format!("{v:.6}")
}

/// Writes `case_id, gold, answer, correct, p_hal_expert, p_hal_cd, dice_s1.., frac_s2..`.
pub fn write_csv<W: Write>(results: &[CaseResult], out: W) -> Result<()> {
    let stages = stage_columns(results);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["case_id", "gold", "answer", "correct", "p_hal_expert", "p_hal_cd"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=stages).map(|s| format!("dice_s{s}")));
    header.extend((2..=stages).map(|s| format!("frac_s{s}")));
    w.write_record(&header)?;
    for r in results {
        let mut row = vec![
            r.case_id.clone(),
            r.gold.to_string(),
            r.answer.to_string(),
            r.correct().to_string(),
            fmt_float(r.p_hal_expert),
            fmt_float(r.p_hal_cd),
        ];
        row.extend((0..stages).map(|s| r.dice.get(s).copied().flatten().map(fmt_float).unwrap_or_default()));
        row.extend((1..stages).map(|s| r.fractions.get(s).map(|&f| fmt_float(f)).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(results: &[CaseResult], path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path)?;
    write_csv(results, std::io::BufWriter::new(file))
}

/// 8-bit binary PGM, scaled so the maximum maps to 255 (round half up).
pub fn pgm_bytes(attn: &AttentionMap) -> Vec<u8> {
    let (rows, cols) = attn.grid().dims();
    let max = attn.max();
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(attn.values().iter().map(|&v| {
        if max > 0.0 {
            (v / max * 255.0 + 0.5).floor().min(255.0) as u8
        } else {
            0
        }
    }));
    out
}

pub fn emit_heatmap_pgm(attn: &AttentionMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, pgm_bytes(attn))?;
    Ok(())
}
