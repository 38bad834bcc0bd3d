#![allow(dead_code)]

use vqalab::data::{Dataset, Sample};
use vqalab::format::Codec;
use vqalab::harness::RunConfig;
use vqalab::policy::{self, ParamSet};
use vqalab::reward::RewardFn;
use vqalab::sft;
use vqalab::synthenv::{self, PlantedRule, TaskSpec};

pub fn data(spec: &TaskSpec, seed: u64) -> (PlantedRule, Dataset, Dataset) {
    let rule = synthenv::make_rule(spec, seed).unwrap();
    let (train, test) = synthenv::gen_dataset(&rule, spec, seed).unwrap();
    (rule, train, test)
}

/// Initial parameters exactly as the pipeline builds them.
pub fn initial(cfg: &RunConfig, train: &[Sample]) -> ParamSet {
    let mut p = policy::init_params(&cfg.policy_config(), cfg.seed, cfg.policy.init_scale).unwrap();
    p.fit_input_norm(train.iter().map(|s| s.image.as_slice()));
    p
}

pub fn reward_fn(cfg: &RunConfig) -> RewardFn {
    RewardFn::new(cfg.reward.clone(), Codec::new(cfg.task.vocab, cfg.task.choices).unwrap(), cfg.task.max_trace)
}

/// Default configuration, data and clean SFT model.
pub struct Trained {
    pub cfg: RunConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub init: ParamSet,
    pub sft: ParamSet,
}

pub fn clean_sft(seed: u64) -> Trained {
    let cfg = RunConfig { seed, ..RunConfig::default() };
    let (_, train, test) = data(&cfg.task, seed);
    let init = initial(&cfg, &train.samples);
    let sft = sft::train_sft(&init, &train.samples, &cfg.sft, seed).unwrap().params;
    Trained { cfg, train, test, init, sft }
}

pub fn accuracy(params: &ParamSet, samples: &[Sample]) -> f64 {
    let ok = samples.iter().filter(|s| policy::greedy(params, s).answer == s.truth).count();
    ok as f64 / samples.len() as f64
}
