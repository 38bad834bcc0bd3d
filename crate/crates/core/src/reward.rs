//! Programmatic reward model for reasoning traces.
//!
//! The score looks only at the trace: a format credit for any parsed output,
//! evidence coverage, and an overlength penalty. An optional answer bonus is
//! available but off by default.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::format::Codec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub w_fmt: f64,
    pub w_cov: f64,
    pub w_len: f64,
    pub length_budget: usize,
    pub w_ans: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { w_fmt: 0.3, w_cov: 0.7, w_len: 0.2, length_budget: 6, w_ans: 0.0 }
    }
}

pub const REWARD_MIN: f64 = 0.0;
pub const REWARD_MAX: f64 = 1.0;

impl RewardConfig {
    pub fn validate(&self, max_trace: usize) -> Result<()> {
        for (name, w) in [("w_fmt", self.w_fmt), ("w_cov", self.w_cov), ("w_len", self.w_len), ("w_ans", self.w_ans)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("reward.{name} must be finite and >= 0")));
            }
        }
        if self.w_fmt + self.w_cov > 1.0 + 1e-12 {
            return Err(Error::Config("reward.w_fmt + reward.w_cov must not exceed 1".into()));
        }
        if self.length_budget > max_trace {
            return Err(Error::Config(format!(
                "reward.length_budget {} exceeds the maximum trace length {max_trace}",
                self.length_budget
            )));
        }
        Ok(())
    }

    /// Score a parsed trace against the sample's evidence, clamped to [0, 1].
    /// `max_trace` normalizes the overlength penalty.
    pub fn score_trace(&self, trace: &[usize], sample: &Sample, max_trace: usize) -> f64 {
        let distinct: BTreeSet<usize> = trace.iter().copied().collect();
        let coverage = if sample.evidence.is_empty() {
            0.0
        } else {
            distinct.intersection(&sample.evidence).count() as f64 / sample.evidence.len() as f64
        };
        let over = trace.len().saturating_sub(self.length_budget) as f64 / max_trace.max(1) as f64;
        (self.w_fmt + self.w_cov * coverage - self.w_len * over).clamp(REWARD_MIN, REWARD_MAX)
    }

    /// Reward of a text output. Unparseable text, including answers outside
    /// the choice set, earns the floor.
    pub fn reward(&self, codec: &Codec, text: &str, sample: &Sample, max_trace: usize) -> f64 {
        match codec.parse(text) {
            Ok(y) if y.answer < sample.choices => {
                let bonus = if y.answer == sample.truth { self.w_ans } else { 0.0 };
                (self.score_trace(&y.trace, sample, max_trace) + bonus).clamp(REWARD_MIN, REWARD_MAX)
            }
            _ => REWARD_MIN,
        }
    }
}

/// Reward function used by the trainers: decodes a structured output to
/// text and scores it, so every rollout goes through the same parse path as
/// external text.
#[derive(Debug, Clone)]
pub struct RewardFn {
    pub config: RewardConfig,
    pub codec: Codec,
    pub max_trace: usize,
}

impl RewardFn {
    pub fn new(config: RewardConfig, codec: Codec, max_trace: usize) -> Self {
        Self { config, codec, max_trace }
    }

    pub fn score(&self, y: &crate::format::StructuredOutput, sample: &Sample) -> f64 {
        match self.codec.serialize(y) {
            Ok(text) => self.config.reward(&self.codec, &text, sample, self.max_trace),
            Err(_) => REWARD_MIN,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::StructuredOutput;
    use proptest::prelude::*;

    fn sample(evidence: &[usize]) -> Sample {
        Sample {
            image: vec![0.0; 2],
            question: 0,
            choices: 4,
            truth: 1,
            modality: 0,
            evidence: evidence.iter().copied().collect(),
        }
    }

    #[test]
    fn full_coverage_clamps_to_one() {
        let cfg = RewardConfig::default();
        assert!((cfg.score_trace(&[3, 5], &sample(&[3, 5]), 6) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_trace_scores_format_credit() {
        let cfg = RewardConfig::default();
        assert!((cfg.score_trace(&[], &sample(&[3, 5]), 6) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn half_coverage() {
        let cfg = RewardConfig::default();
        assert!((cfg.score_trace(&[3, 9], &sample(&[3, 5]), 6) - 0.65).abs() < 1e-12);
    }

    #[test]
    fn overlength_is_penalized() {
        let cfg = RewardConfig { length_budget: 2, ..RewardConfig::default() };
        // 0.3 + 0.7 * 1 - 0.2 * (4 - 2) / 6
        let s = cfg.score_trace(&[3, 5, 9, 9], &sample(&[3, 5]), 6);
        assert!((s - (1.0 - 0.2 * 2.0 / 6.0)).abs() < 1e-12);
    }

    #[test]
    fn text_rewards() {
        let cfg = RewardConfig::default();
        let codec = Codec::new(32, 4).unwrap();
        let s = sample(&[3, 5]);
        assert_eq!(cfg.reward(&codec, "garbage", &s, 6), 0.0);
        assert!((cfg.reward(&codec, "<think></think><answer>A</answer>", &s, 6) - 0.3).abs() < 1e-12);
        let a = codec.serialize(&StructuredOutput::new(vec![3], 0)).unwrap();
        let b = codec.serialize(&StructuredOutput::new(vec![3], 1)).unwrap();
        assert_eq!(cfg.reward(&codec, &a, &s, 6), cfg.reward(&codec, &b, &s, 6));
    }

    #[test]
    fn answer_outside_sample_choices_earns_floor() {
        let cfg = RewardConfig::default();
        let codec = Codec::new(32, 6).unwrap();
        let s = sample(&[3]);
        let text = codec.serialize(&StructuredOutput::new(vec![3], 5)).unwrap();
        assert_eq!(cfg.reward(&codec, &text, &s, 6), 0.0);
    }

    #[test]
    fn answer_bonus() {
        let cfg = RewardConfig { w_ans: 0.5, ..RewardConfig::default() };
        let codec = Codec::new(32, 4).unwrap();
        let s = sample(&[3]);
        let right = codec.serialize(&StructuredOutput::new(vec![], 1)).unwrap();
        let wrong = codec.serialize(&StructuredOutput::new(vec![], 2)).unwrap();
        assert!((cfg.reward(&codec, &right, &s, 6) - 0.8).abs() < 1e-12);
        assert!((cfg.reward(&codec, &wrong, &s, 6) - 0.3).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn reward_is_bounded(text in ".{0,60}", trace in proptest::collection::vec(0usize..32, 0..10),
                             w_ans in 0.0f64..2.0, w_len in 0.0f64..3.0) {
            let cfg = RewardConfig { w_ans, w_len, ..RewardConfig::default() };
            let codec = Codec::new(32, 4).unwrap();
            let s = sample(&[1, 2, 3]);
            let r = cfg.reward(&codec, &text, &s, 6);
            prop_assert!((0.0..=1.0).contains(&r));
            let y = StructuredOutput::new(trace.into_iter().take(6).collect(), 0);
            let r = cfg.reward(&codec, &codec.serialize(&y).unwrap(), &s, 6);
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn adding_evidence_never_lowers_score(trace in proptest::collection::vec(0usize..32, 0..5), extra in 0usize..3) {
            let cfg = RewardConfig::default();
            let s = sample(&[10, 11, 12]);
            let before = cfg.score_trace(&trace, &s, 6);
            let mut longer = trace.clone();
            longer.push(10 + extra);
            prop_assert!(cfg.score_trace(&longer, &s, 6) >= before);
        }
    }
}
