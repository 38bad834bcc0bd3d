//! Supervised fine-tuning on ground-truth structured outputs, and its
//! adversarial variant with PGD on the image.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::format::StructuredOutput;
use crate::optim::{self, Optimizer};
use crate::perturb::{self, Norm, PgdParams};
use crate::policy::{self, GradientSet, Loss, ParamSet};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub n_pgd: usize,
    pub norm: Norm,
    /// Fraction of batches that are adversarial.
    pub ratio: f64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self { epsilon: 0.01, alpha: 0.002, n_pgd: 5, norm: Norm::Linf, ratio: 0.5 }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        self.pgd().validate()?;
        if self.epsilon < self.alpha {
            return Err(Error::Config("adv.epsilon must be >= adv.alpha".into()));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("adv.ratio must be in [0, 1], got {}", self.ratio)));
        }
        Ok(())
    }

    pub fn pgd(&self) -> PgdParams {
        PgdParams { epsilon: self.epsilon, alpha: self.alpha, steps: self.n_pgd, norm: self.norm }
    }

    /// Whether global batch `i` is adversarial. Spreads `ratio` evenly:
    /// 0.5 alternates clean and adversarial batches starting with clean.
    pub fn is_adversarial(&self, i: usize) -> bool {
        ((i + 1) as f64 * self.ratio).floor() > (i as f64 * self.ratio).floor()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub grad_clip: f64,
    pub adv: Option<AdvConfig>,
    /// Start adversarial SFT from the clean SFT checkpoint instead of the
    /// initial parameters.
    pub warm_start: bool,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            epochs: 3,
            batch_size: 64,
            optimizer: Optimizer::ArrayRms,
            grad_clip: 1.0,
            adv: None,
            warm_start: false,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("sft.learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("sft.batch_size must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("sft.grad_clip must be > 0".into()));
        }
        if let Some(adv) = &self.adv {
            adv.validate()?;
        }
        Ok(())
    }
}

/// A sample and its reference output.
#[derive(Debug, Clone, PartialEq)]
pub struct SftTarget {
    pub sample: Sample,
    pub target: StructuredOutput,
}

impl SftTarget {
    /// Reference output: the evidence tokens in ascending id order (at most
    /// `max_trace`) and the true answer.
    pub fn from_sample(sample: &Sample, max_trace: usize) -> SftTarget {
        SftTarget {
            sample: sample.clone(),
            target: StructuredOutput::new(sample.evidence.iter().copied().take(max_trace).collect(), sample.truth),
        }
    }
}

/// Mean negative log-likelihood of the targets.
pub fn sft_loss(params: &ParamSet, batch: &[SftTarget]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty SFT batch".into()));
    }
    let losses = batch
        .par_iter()
        .map(|t| policy::loss_value(params, &t.sample, &Loss::Sft(t.target.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Mean loss and its gradient. Per-sample terms are computed in parallel and
/// reduced in batch order.
pub fn sft_loss_grad(params: &ParamSet, batch: &[SftTarget]) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::Config("empty SFT batch".into()));
    }
    let parts = batch
        .par_iter()
        .map(|t| {
            let loss = Loss::Sft(t.target.clone());
            Ok((policy::loss_value(params, &t.sample, &loss)?, policy::grad(params, &t.sample, &loss)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = batch.len() as f64;
    let loss = parts.iter().map(|p| p.0).sum::<f64>() / n;
    let mut g = GradientSet::sum(params, parts.iter().map(|p| &p.1));
    g.scale(1.0 / n);
    Ok((loss, g))
}

/// PGD on the image that increases the SFT loss of `target`. Returns the
/// perturbed sample.
pub fn pgd_maximize_sft(params: &ParamSet, target: &SftTarget, adv: &AdvConfig) -> Result<Sample> {
    let loss = Loss::Sft(target.target.clone());
    let (delta, _) = perturb::pgd_ascend(&target.sample.image, &adv.pgd(), |x, _| {
        Ok(policy::grad(params, &target.sample.with_image(x.to_vec()), &loss)?.image)
    })?;
    Ok(target.sample.with_image(perturb::add(&target.sample.image, &delta)))
}

/// One record of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftStep {
    pub step: usize,
    pub epoch: usize,
    /// Loss on the batch actually trained on.
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub adv: bool,
    /// Loss of the same batch without perturbation, on adversarial batches.
    pub clean_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub params: ParamSet,
    pub log: Vec<SftStep>,
}

/// Clean SFT: minibatch descent with cosine decay and gradient clipping.
/// Any adversarial settings in `config` are ignored.
pub fn train_sft(params: &ParamSet, train: &[Sample], config: &SftConfig, seed: u64) -> Result<SftOutcome> {
    run(params, train, config, None, seed)
}

/// Adversarial SFT: batches chosen by `adv.ratio` have every image replaced
/// by its PGD maximizer under the current parameters before the step.
pub fn train_at_sft(params: &ParamSet, train: &[Sample], config: &SftConfig, seed: u64) -> Result<SftOutcome> {
    let adv = config.adv.as_ref().ok_or_else(|| Error::Config("adversarial SFT needs sft.adv settings".into()))?;
    run(params, train, config, Some(adv), seed)
}

fn run(init: &ParamSet, train: &[Sample], config: &SftConfig, adv: Option<&AdvConfig>, seed: u64) -> Result<SftOutcome> {
    config.validate()?;
    let mut params = init.clone();
    let mut log = Vec::new();
    if config.epochs == 0 || train.is_empty() {
        return Ok(SftOutcome { params, log });
    }
    let max_trace = params.config.max_trace;
    let targets: Vec<SftTarget> = train.iter().map(|s| SftTarget::from_sample(s, max_trace)).collect();
    let per_epoch = targets.len().div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..targets.len()).collect();
        order.shuffle(&mut rng::substream(seed, &[tag::SFT, epoch as u64]));
        for chunk in order.chunks(config.batch_size) {
            let clean: Vec<SftTarget> = chunk.iter().map(|&i| targets[i].clone()).collect();
            let is_adv = adv.is_some_and(|a| a.is_adversarial(step));
            let (batch, clean_loss) = match adv {
                Some(a) if is_adv => {
                    let perturbed = clean
                        .par_iter()
                        .map(|t| Ok(SftTarget { sample: pgd_maximize_sft(&params, t, a)?, target: t.target.clone() }))
                        .collect::<Result<Vec<_>>>()?;
                    (perturbed, Some(sft_loss(&params, &clean)?))
                }
                _ => (clean, None),
            };
            let (loss, grads) = sft_loss_grad(&params, &batch)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::TrainingDiverged { step, detail: format!("SFT loss {loss}") });
            }
            let lr = optim::cosine_lr(config.learning_rate, step, total);
            let grad_norm = optim::apply(&mut params, &grads, lr, config.optimizer, config.grad_clip, false);
            log.push(SftStep { step, epoch, loss, lr, grad_norm, adv: is_adv, clean_loss });
            step += 1;
        }
    }
    Ok(SftOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_params, PolicyConfig};

    fn target(image: Vec<f64>, truth: usize) -> SftTarget {
        let s = Sample { image, question: 0, choices: 4, truth, modality: 0, evidence: [1, 5].into_iter().collect() };
        SftTarget::from_sample(&s, 0)
    }

    #[test]
    fn uniform_loss_is_ln_k() {
        let cfg = PolicyConfig { max_trace: 0, ..PolicyConfig::default() };
        let p = init_params(&cfg, 1, 0.0).unwrap();
        let l = sft_loss(&p, &[target(vec![0.1; 16], 2)]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn half_probability_target_gives_ln_2() {
        // K = 2 with equal logits puts 0.5 on the target.
        let cfg = PolicyConfig { max_trace: 0, choices: 2, ..PolicyConfig::default() };
        let p = init_params(&cfg, 1, 0.0).unwrap();
        let mut t = target(vec![0.0; 16], 1);
        t.sample.choices = 2;
        let l = sft_loss(&p, &[t]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn adversarial_schedule() {
        let half = AdvConfig::default();
        let flags: Vec<bool> = (0..6).map(|i| half.is_adversarial(i)).collect();
        assert_eq!(flags, [false, true, false, true, false, true]);
        let none = AdvConfig { ratio: 0.0, ..AdvConfig::default() };
        assert!((0..100).all(|i| !none.is_adversarial(i)));
        let all = AdvConfig { ratio: 1.0, ..AdvConfig::default() };
        assert!((0..100).all(|i| all.is_adversarial(i)));
    }

    #[test]
    fn zero_epochs_returns_params_unchanged() {
        let p = init_params(&PolicyConfig::default(), 3, 0.05).unwrap();
        let cfg = SftConfig { epochs: 0, ..SftConfig::default() };
        let out = train_sft(&p, &[target(vec![0.0; 16], 1).sample], &cfg, 1).unwrap();
        assert_eq!(out.params, p);
        assert!(out.log.is_empty());
    }

    #[test]
    fn pgd_stays_in_budget() {
        let p = init_params(&PolicyConfig::default(), 3, 0.5).unwrap();
        let t = SftTarget::from_sample(&target(vec![0.2; 16], 1).sample, 6);
        let adv = AdvConfig::default();
        let s = pgd_maximize_sft(&p, &t, &adv).unwrap();
        let delta: Vec<f64> = s.image.iter().zip(&t.sample.image).map(|(a, b)| a - b).collect();
        assert!(perturb::linf_norm(&delta) <= 0.01 + 1e-15);
        assert!(policy::loss_value(&p, &s, &Loss::Sft(t.target.clone())).unwrap()
            >= policy::loss_value(&p, &t.sample, &Loss::Sft(t.target)).unwrap());
    }

    #[test]
    fn invalid_adv_settings_rejected() {
        let bad = AdvConfig { epsilon: 0.001, alpha: 0.002, ..AdvConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = AdvConfig { ratio: 1.5, ..AdvConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let p = init_params(&PolicyConfig::default(), 3, 0.5).unwrap();
        assert!(matches!(train_at_sft(&p, &[], &SftConfig::default(), 0), Err(Error::Config(_))));
    }
}
