//! Single- and multi-stage contrastive decoding over per-stage logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite logits over a vocabulary of at least two tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidLogits(format!("vocab size {}", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidLogits(format!("non-finite logit {v}")));
        }
        Ok(Self(values))
    }

    pub fn vocab_size(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Natural-log softmax, computed with the max subtracted.
    pub fn log_softmax(&self) -> Vec<f64> {
        let max = self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + self.0.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        self.0.iter().map(|v| v - log_z).collect()
    }
}

/// Contrast weights. `gamma` is ignored when fewer than four stages exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_alpha() -> f64 {
    0.7
}
fn default_beta() -> f64 {
    0.7
}
fn default_gamma() -> f64 {
    1.0
}

impl Default for CdConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            beta: default_beta(),
            gamma: default_gamma(),
        }
    }
}

impl CdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Logits of one decode step, coarsest amateur first.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLogits {
    pub amateur1: Option<LogitVector>,
    pub amateur2: Option<LogitVector>,
    pub amateur3: LogitVector,
    pub expert: LogitVector,
}

impl StageLogits {
    /// Assigns roles from stage-ordered logits: the last four stages become
    /// amateur1..3 and expert; earlier stages do not take part.
    pub fn from_stages(mut stages: Vec<LogitVector>) -> Result<Self> {
        if stages.len() < 2 {
            return Err(Error::MissingStage(format!(
                "{} stage(s), need at least 2",
                stages.len()
            )));
        }
        let expert = stages.pop().unwrap();
        let amateur3 = stages.pop().unwrap();
        let amateur2 = stages.pop();
        let amateur1 = stages.pop();
        Ok(Self {
            amateur1,
            amateur2,
            amateur3,
            expert,
        })
    }

    fn check(&self) -> Result<()> {
        if self.amateur1.is_some() && self.amateur2.is_none() {
            return Err(Error::MissingStage("amateur1 given without amateur2".into()));
        }
        let vocab = self.expert.vocab_size();
        for v in [Some(&self.amateur3), self.amateur2.as_ref(), self.amateur1.as_ref()]
            .into_iter()
            .flatten()
        {
            if v.vocab_size() != vocab {
                return Err(Error::VocabMismatch {
                    expected: vocab,
                    actual: v.vocab_size(),
                });
            }
        }
        Ok(())
    }
}

/// `expert + alpha * (expert - amateur)`.
pub fn single_stage_cd(expert: &LogitVector, amateur: &LogitVector, alpha: f64) -> Result<LogitVector> {
    if expert.vocab_size() != amateur.vocab_size() {
        return Err(Error::VocabMismatch {
            expected: expert.vocab_size(),
            actual: amateur.vocab_size(),
        });
    }
    let mut out = expert.0.clone();
    if alpha != 0.0 {
        add_term(&mut out, alpha, &expert.0, &amateur.0);
    }
    Ok(LogitVector(out))
}

fn add_term(out: &mut [f64], weight: f64, hi: &[f64], lo: &[f64]) {
    for ((o, h), l) in out.iter_mut().zip(hi).zip(lo) {
        *o += weight * (h - l);
    }
}

/// Telescoped contrast across stages:
/// `expert + a(expert - am3) + b(am3 - am2) + g(am2 - am1)`.
///
/// Terms are added in that order and terms with a zero weight or a missing
/// stage are skipped, so `beta = gamma = 0` reproduces [`single_stage_cd`]
/// bit for bit.
pub fn multi_stage_cd(stages: &StageLogits, cfg: &CdConfig) -> Result<LogitVector> {
    stages.check()?;
    let mut out = stages.expert.0.clone();
    if cfg.alpha != 0.0 {
        add_term(&mut out, cfg.alpha, &stages.expert.0, &stages.amateur3.0);
    }
    if let Some(am2) = &stages.amateur2 {
        if cfg.beta != 0.0 {
            add_term(&mut out, cfg.beta, &stages.amateur3.0, &am2.0);
        }
        if let Some(am1) = &stages.amateur1 {
            if cfg.gamma != 0.0 {
                add_term(&mut out, cfg.gamma, &am2.0, &am1.0);
            }
        }
    }
    Ok(LogitVector(out))
}

/// Index of the largest logit; ties go to the lowest index.
pub fn greedy_token(logits: &LogitVector) -> usize {
    let v = &logits.0;
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// `ln P(y)` as the sum of per-step log-softmax values of the chosen tokens.
pub fn sequence_log_probability(steps: &[LogitVector], chosen: &[usize]) -> Result<f64> {
    if steps.len() != chosen.len() {
        return Err(Error::LengthMismatch(steps.len(), chosen.len()));
    }
    let mut total = 0.0;
    for (logits, &token) in steps.iter().zip(chosen) {
        if token >= logits.vocab_size() {
            return Err(Error::IndexOutOfRange {
                index: token,
                vocab: logits.vocab_size(),
            });
        }
        total += logits.log_softmax()[token];
    }
    Ok(total)
}

/// Product over steps of `softmax(logits_t)[chosen_t]`.
pub fn sequence_probability(steps: &[LogitVector], chosen: &[usize]) -> Result<f64> {
    Ok(sequence_log_probability(steps, chosen)?.exp().min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn single_cd_examples() {
        let e = lv(&[1.5, -2.0, 0.25]);
        assert_eq!(single_stage_cd(&e, &e, 0.8).unwrap(), e);
        assert_eq!(single_stage_cd(&e, &lv(&[9.0, 9.0, 9.0]), 0.0).unwrap(), e);
        let out = single_stage_cd(&lv(&[2.0, 0.0]), &lv(&[1.0, 1.0]), 0.5).unwrap();
        assert_eq!(out.values(), &[2.0 + 0.5 * (2.0 - 1.0), 0.0 + 0.5 * (0.0 - 1.0)]);
        assert_eq!(out.values(), &[2.5, -0.5]);
        assert!(matches!(
            single_stage_cd(&lv(&[1.0, 2.0]), &lv(&[1.0, 2.0, 3.0]), 0.5),
            Err(Error::VocabMismatch { .. })
        ));
    }

    #[test]
    fn multi_cd_examples() {
        let same = lv(&[0.3, 1.7]);
        let stages = StageLogits::from_stages(vec![same.clone(); 4]).unwrap();
        assert_eq!(multi_stage_cd(&stages, &CdConfig::default()).unwrap(), same);

        // scalar oracle with a padding token to satisfy vocab >= 2
        let stages =
            StageLogits::from_stages(vec![lv(&[0.0, 0.0]), lv(&[0.5, 0.0]), lv(&[1.0, 0.0]), lv(&[2.0, 0.0])]).unwrap();
        let cfg = CdConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        };
        let oracle = 2.0 + (2.0 - 1.0) + (1.0 - 0.5) + (0.5 - 0.0);
        assert_eq!(oracle, 4.0);
        assert_eq!(multi_stage_cd(&stages, &cfg).unwrap().values()[0], oracle);
    }

    #[test]
    fn multi_reduces_to_single() {
        let (a1, a2, a3, e) = (lv(&[0.1, 3.0]), lv(&[-1.0, 2.0]), lv(&[0.7, 0.2]), lv(&[1.1, -0.3]));
        let stages = StageLogits::from_stages(vec![a1, a2, a3.clone(), e.clone()]).unwrap();
        let cfg = CdConfig {
            alpha: 0.37,
            beta: 0.0,
            gamma: 0.0,
        };
        let single = single_stage_cd(&e, &a3, 0.37).unwrap();
        let multi = multi_stage_cd(&stages, &cfg).unwrap();
        for (a, b) in single.values().iter().zip(multi.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn three_stage_ignores_gamma() {
        let stages = StageLogits::from_stages(vec![lv(&[0.0, 1.0]), lv(&[1.0, 0.0]), lv(&[2.0, 0.5])]).unwrap();
        assert!(stages.amateur1.is_none());
        let with_gamma = multi_stage_cd(
            &stages,
            &CdConfig {
                alpha: 0.5,
                beta: 0.5,
                gamma: 1.0,
            },
        )
        .unwrap();
        let without = multi_stage_cd(
            &stages,
            &CdConfig {
                alpha: 0.5,
                beta: 0.5,
                gamma: 0.0,
            },
        )
        .unwrap();
        assert_eq!(with_gamma, without);
    }

    #[test]
    fn missing_and_mismatched_stages() {
        assert!(matches!(
            StageLogits::from_stages(vec![lv(&[0.0, 1.0])]),
            Err(Error::MissingStage(_))
        ));
        let gap = StageLogits {
            amateur1: Some(lv(&[0.0, 1.0])),
            amateur2: None,
            amateur3: lv(&[0.0, 1.0]),
            expert: lv(&[0.0, 1.0]),
        };
        assert!(matches!(
            multi_stage_cd(&gap, &CdConfig::default()),
            Err(Error::MissingStage(_))
        ));
        let bad = StageLogits::from_stages(vec![lv(&[0.0, 1.0, 2.0]), lv(&[0.0, 1.0])]).unwrap();
        assert!(matches!(
            multi_stage_cd(&bad, &CdConfig::default()),
            Err(Error::VocabMismatch { .. })
        ));
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy_token(&lv(&[0.0, 3.0, 3.0])), 1);
        assert_eq!(greedy_token(&lv(&[-1.0, -2.0])), 0);
        assert!(LogitVector::new(vec![5.0]).is_err());
        assert!(LogitVector::new(vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn sequence_probability_examples() {
        let p = sequence_probability(&[lv(&[1e6, 0.0])], &[0]).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
        let uniform = lv(&[0.0, 0.0]);
        let p = sequence_probability(&[uniform.clone(), uniform], &[0, 1]).unwrap();
        assert!((p - 0.5 * 0.5).abs() < 1e-15);
        assert_eq!(sequence_probability(&[], &[]).unwrap(), 1.0);
        assert!(matches!(
            sequence_probability(&[lv(&[0.0, 0.0])], &[]),
            Err(Error::LengthMismatch(1, 0))
        ));
        assert!(matches!(
            sequence_probability(&[lv(&[0.0, 0.0])], &[2]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn cd_config_defaults_and_bounds() {
        let cfg: CdConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(
            cfg,
            CdConfig {
                alpha: 0.7,
                beta: 0.7,
                gamma: 1.0
            }
        );
        assert!(CdConfig { alpha: 1.2, ..cfg }.validate().is_err());
    }
}
