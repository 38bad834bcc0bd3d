//! Group-relative policy optimization and its adversarial variant.
//!
//! Every update is expressed as a weighted log-probability gradient: for
//! each sampled output `Y_j` at state `s_j` the objective contributes
//! `w_j ∇ log π_θ(Y_j | s_j)`, with the weights computed from the clipped
//! surrogate and the KL penalties and then held constant.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::format::StructuredOutput;
use crate::optim::{self, Optimizer};
use crate::perturb::{self, Norm, PgdParams};
use crate::policy::{self, GradientSet, Loss, ParamSet};
use crate::reward::RewardFn;
use crate::rng::{self, tag, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoAdvConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub n_pgd: usize,
    pub norm: Norm,
    /// Mixing weight of the adversarial-group surrogate.
    pub adv_reward_weight: f64,
    /// Weight of KL(π(·|s) ‖ π(·|s+δ)).
    pub robust_kl_weight: f64,
    /// Samples per PGD step of the reward-minimizing adversary; 0 means the
    /// group size.
    pub k_adv: usize,
}

impl Default for GrpoAdvConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            alpha: 0.002,
            n_pgd: 5,
            norm: Norm::Linf,
            adv_reward_weight: 0.3,
            robust_kl_weight: 1.0,
            k_adv: 0,
        }
    }
}

impl GrpoAdvConfig {
    pub fn pgd(&self) -> PgdParams {
        PgdParams { epsilon: self.epsilon, alpha: self.alpha, steps: self.n_pgd, norm: self.norm }
    }

    pub fn validate(&self) -> Result<()> {
        self.pgd().validate()?;
        if !(0.0..=1.0).contains(&self.adv_reward_weight) {
            return Err(Error::Config("grpo.adv.adv_reward_weight must be in [0, 1]".into()));
        }
        if !(self.robust_kl_weight >= 0.0 && self.robust_kl_weight.is_finite()) {
            return Err(Error::Config("grpo.adv.robust_kl_weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Group size.
    pub k: usize,
    pub eps_std: f64,
    pub eps_clip: f64,
    pub beta_kl: f64,
    pub iterations: usize,
    /// States per iteration.
    pub minibatch: usize,
    /// Gradient steps taken on one batch of groups before the old policy is
    /// refreshed.
    pub updates_per_refresh: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub grad_clip: f64,
    /// Decay of the logged reward moving average.
    pub ema_decay: f64,
    pub adv: Option<GrpoAdvConfig>,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            k: 8,
            eps_std: 1e-8,
            eps_clip: 0.2,
            beta_kl: 0.05,
            iterations: 200,
            minibatch: 64,
            updates_per_refresh: 1,
            learning_rate: 1.0,
            optimizer: Optimizer::Sgd,
            grad_clip: 1.0,
            ema_decay: 0.9,
            adv: None,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config("grpo.k must be at least 2".into()));
        }
        if !(self.eps_std > 0.0) {
            return Err(Error::Config("grpo.eps_std must be > 0".into()));
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return Err(Error::Config("grpo.eps_clip must lie in (0, 1)".into()));
        }
        if !(self.beta_kl >= 0.0 && self.beta_kl.is_finite()) {
            return Err(Error::Config("grpo.beta_kl must be >= 0".into()));
        }
        if self.minibatch == 0 || self.updates_per_refresh == 0 {
            return Err(Error::Config("grpo.minibatch and grpo.updates_per_refresh must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("grpo.learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("grpo.ema_decay must lie in [0, 1)".into()));
        }
        if let Some(adv) = &self.adv {
            adv.validate()?;
        }
        Ok(())
    }
}

/// K outputs sampled from the old policy for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub state: Sample,
    pub outputs: Vec<StructuredOutput>,
    pub old_logprobs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl Group {
    /// Score every output and standardize the rewards.
    pub fn score(&mut self, reward: &RewardFn, eps_std: f64) {
        self.rewards = self.outputs.iter().map(|y| reward.score(y, &self.state)).collect();
        self.advantages = normalized_advantages(&self.rewards, eps_std);
    }

    pub fn mean_reward(&self) -> f64 {
        mean(&self.rewards)
    }
}

/// Draw `k` outputs at `temperature`, recording temperature-1 log-probs.
/// Rewards and advantages are left empty.
pub fn sample_group(params_old: &ParamSet, state: &Sample, k: usize, temperature: f64, rng: &mut Rng) -> Result<Group> {
    if k < 2 {
        return Err(Error::Config("group size must be at least 2".into()));
    }
    let (outputs, old_logprobs) = (0..k).map(|_| policy::sample_output(params_old, state, rng, temperature)).unzip();
    Ok(Group { state: state.clone(), outputs, old_logprobs, rewards: Vec::new(), advantages: Vec::new() })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Unbiased (K-1 denominator) sample variance.
fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// `(r_i - mean) / sqrt(var + eps_std)` with the K-1 variance.
pub fn normalized_advantages(rewards: &[f64], eps_std: f64) -> Vec<f64> {
    // A rounded mean would leave ~1e-16 residues that eps_std then amplifies.
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let m = mean(rewards);
    let denom = (sample_variance(rewards) + eps_std).sqrt();
    rewards
        .iter()
        .map(|r| {
            let c = r - m;
            if c == 0.0 {
                0.0
            } else {
                c / denom
            }
        })
        .collect()
}

/// Mean over the group of `min(ρ Â, clip(ρ, 1-ε, 1+ε) Â)`, `ρ = exp(new - old)`.
pub fn clipped_surrogate(new_logprobs: &[f64], old_logprobs: &[f64], advantages: &[f64], eps_clip: f64) -> f64 {
    let terms: Vec<f64> = new_logprobs
        .iter()
        .zip(old_logprobs)
        .zip(advantages)
        .map(|((n, o), a)| {
            let rho = (n - o).exp();
            (rho * a).min(rho.clamp(1.0 - eps_clip, 1.0 + eps_clip) * a)
        })
        .collect();
    mean(&terms)
}

/// Whether the unclipped branch is the one selected by the min, i.e. the
/// term still depends on the new policy.
fn unclipped(rho: f64, adv: f64, eps_clip: f64) -> bool {
    rho * adv <= rho.clamp(1.0 - eps_clip, 1.0 + eps_clip) * adv
}

/// Derivative of [`clipped_surrogate`] with respect to each new log-prob.
pub fn surrogate_weights(new_logprobs: &[f64], old_logprobs: &[f64], advantages: &[f64], eps_clip: f64) -> Vec<f64> {
    let k = new_logprobs.len() as f64;
    new_logprobs
        .iter()
        .zip(old_logprobs)
        .zip(advantages)
        .map(|((n, o), &a)| {
            let rho = (n - o).exp();
            if a != 0.0 && unclipped(rho, a, eps_clip) {
                rho * a / k
            } else {
                0.0
            }
        })
        .collect()
}

/// Fraction of terms on the clipped (constant) branch.
pub fn clip_fraction(new_logprobs: &[f64], old_logprobs: &[f64], advantages: &[f64], eps_clip: f64) -> f64 {
    let n = new_logprobs.len().max(1) as f64;
    let clipped = new_logprobs
        .iter()
        .zip(old_logprobs)
        .zip(advantages)
        .filter(|((n, o), &a)| a != 0.0 && !unclipped((*n - *o).exp(), a, eps_clip))
        .count();
    clipped as f64 / n
}

/// `k3 = r - 1 - ln r` for `ln r = log q - log p`: a nonnegative, unbiased
/// per-sample estimate of KL(p ‖ q) under samples from p.
pub fn k3(logp: f64, logq: f64) -> f64 {
    let lr = logq - logp;
    lr.exp_m1() - lr
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Estimate KL(π_θ ‖ π_ref), averaged over `samples`, from `n_mc` draws of
/// π_θ (temperature 1) per sample using the k3 estimator.
pub fn reference_kl(params: &ParamSet, params_ref: &ParamSet, samples: &[Sample], n_mc: usize, seed: u64) -> Result<KlEstimate> {
    if n_mc == 0 || samples.is_empty() {
        return Err(Error::Config("KL estimate needs at least one sample and one draw".into()));
    }
    let values: Vec<f64> = samples
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, s)| {
            let mut rng = rng::substream(seed, &[tag::KL, i as u64]);
            (0..n_mc)
                .map(|_| {
                    let (y, lp) = policy::sample_output(params, s, &mut rng, 1.0);
                    k3(lp, policy::total_logprob(params_ref, s, &y))
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let m = mean(&values);
    Ok(KlEstimate { mean: m, std_err: (sample_variance(&values) / values.len() as f64).sqrt() })
}

/// Score-function estimate of `∇_image E_{Y~π(·|image)}[r(Y)]` from `n`
/// fresh temperature-1 draws: `(1/n) Σ r_i ∇_image log π(Y_i | image)`.
pub fn score_function_image_grad(
    params: &ParamSet,
    state: &Sample,
    reward: &RewardFn,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let (y, _) = policy::sample_output(params, state, rng, 1.0);
        let r = reward.score(&y, state);
        items.push((y, r / n as f64));
    }
    Ok(policy::grad(params, state, &Loss::WeightedLogprob(items))?.image)
}

/// Reward-minimizing PGD on the image. Each step draws fresh outputs from
/// the old policy at the current perturbed image and moves against the
/// score-function estimate of the reward gradient.
pub fn adversarial_state(
    params_old: &ParamSet,
    state: &Sample,
    adv: &GrpoAdvConfig,
    k: usize,
    reward: &RewardFn,
    rng: &mut Rng,
) -> Result<Sample> {
    let n = if adv.k_adv == 0 { k } else { adv.k_adv };
    let (delta, _) = perturb::pgd_ascend(&state.image, &adv.pgd(), |x, _| {
        let g = score_function_image_grad(params_old, &state.with_image(x.to_vec()), reward, n, rng)?;
        Ok(g.into_iter().map(|v| -v).collect())
    })?;
    Ok(state.with_image(perturb::add(&state.image, &delta)))
}

/// Per-iteration training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub reward_ema: f64,
    pub adv_reward_mean: Option<f64>,
    pub adv_reward_std: Option<f64>,
    pub surrogate: f64,
    pub reference_kl: f64,
    pub robust_kl: Option<f64>,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// What stays fixed across iterations.
#[derive(Debug, Clone, Copy)]
pub struct GrpoContext<'a> {
    pub config: &'a GrpoConfig,
    pub reward: &'a RewardFn,
    /// Frozen reference policy for the KL penalty.
    pub params_ref: &'a ParamSet,
    pub seed: u64,
}

/// Groups for one iteration: clean groups, and when adversarial training is
/// on, the perturbed states and their groups.
struct Rollouts {
    clean: Vec<Group>,
    perturbed: Option<Vec<Sample>>,
    adversarial: Option<Vec<Group>>,
}

fn rollouts(params_old: &ParamSet, batch: &[Sample], ctx: &GrpoContext, iteration: usize) -> Result<Rollouts> {
    let cfg = ctx.config;
    let temp = params_old.config.temperature;
    let it = iteration as u64;
    let clean = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng::substream(ctx.seed, &[tag::GRPO, it, i as u64]);
            let mut g = sample_group(params_old, s, cfg.k, temp, &mut rng)?;
            g.score(ctx.reward, cfg.eps_std);
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let Some(adv) = cfg.adv.as_ref().filter(|a| a.adv_reward_weight > 0.0 || a.robust_kl_weight > 0.0) else {
        return Ok(Rollouts { clean, perturbed: None, adversarial: None });
    };
    let perturbed = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng::substream(ctx.seed, &[tag::GRPO_ADV, it, i as u64]);
            adversarial_state(params_old, s, adv, cfg.k, ctx.reward, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let adversarial = if adv.adv_reward_weight > 0.0 {
        Some(
            perturbed
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut rng = rng::substream(ctx.seed, &[tag::GRPO_ADV, it, i as u64, u64::MAX]);
                    let mut g = sample_group(params_old, s, cfg.k, temp, &mut rng)?;
                    g.score(ctx.reward, cfg.eps_std);
                    Ok(g)
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(Rollouts { clean, perturbed: Some(perturbed), adversarial })
}

/// Rollouts for one state as seen by the objective: its clean group, and
/// when adversarial terms are on, the perturbed state and the group sampled
/// there.
#[derive(Debug, Clone, Copy)]
pub struct StateRollout<'a> {
    pub clean: &'a Group,
    pub perturbed: Option<&'a Sample>,
    pub adversarial: Option<&'a Group>,
}

/// Objective terms for one state. `value` is the state's contribution to
/// the ascent objective, `(1-w) L_clean + w L_adv - β KL_ref - λ KL_rob`,
/// divided by the number of states, and `grad` is its gradient.
#[derive(Debug, Clone)]
pub struct StateTerms {
    pub value: f64,
    pub surrogate: f64,
    pub adv_surrogate: f64,
    pub ref_kl: f64,
    pub robust_kl: f64,
    pub clip_fraction: f64,
    pub grad: GradientSet,
}

fn state_terms(params: &ParamSet, ctx: &GrpoContext, ro: &Rollouts, i: usize, n_states: f64) -> Result<StateTerms> {
    let view = StateRollout {
        clean: &ro.clean[i],
        perturbed: ro.perturbed.as_ref().map(|p| &p[i]),
        adversarial: ro.adversarial.as_ref().map(|g| &g[i]),
    };
    state_objective(params, ctx, &view, n_states)
}

/// Evaluate the objective terms for one state and their gradient with the
/// rollouts held fixed.
pub fn state_objective(params: &ParamSet, ctx: &GrpoContext, ro: &StateRollout, n_states: f64) -> Result<StateTerms> {
    let cfg = ctx.config;
    let adv_cfg = cfg.adv.as_ref();
    let w_adv = adv_cfg.map_or(0.0, |a| a.adv_reward_weight);
    let lambda = adv_cfg.map_or(0.0, |a| a.robust_kl_weight);
    let group = ro.clean;
    let k = group.outputs.len() as f64;
    let lp: Vec<f64> = group.outputs.iter().map(|y| policy::total_logprob(params, &group.state, y)).collect();
    let rho: Vec<f64> = lp.iter().zip(&group.old_logprobs).map(|(n, o)| (n - o).exp()).collect();

    let surrogate = clipped_surrogate(&lp, &group.old_logprobs, &group.advantages, cfg.eps_clip);
    let sw = surrogate_weights(&lp, &group.old_logprobs, &group.advantages, cfg.eps_clip);
    let mut clip_frac = clip_fraction(&lp, &group.old_logprobs, &group.advantages, cfg.eps_clip);

    let lref: Vec<f64> = if cfg.beta_kl > 0.0 {
        group.outputs.iter().map(|y| policy::total_logprob(ctx.params_ref, &group.state, y)).collect()
    } else {
        vec![0.0; lp.len()]
    };
    let ref_kl = if cfg.beta_kl > 0.0 { (0..lp.len()).map(|j| rho[j] * k3(lp[j], lref[j])).sum::<f64>() / k } else { 0.0 };

    // Clean-state weights.
    let mut clean_items = Vec::with_capacity(lp.len());
    for j in 0..lp.len() {
        let mut w = 0.0;
        if w_adv < 1.0 {
            w += (1.0 - w_adv) * sw[j] / n_states;
        }
        if cfg.beta_kl > 0.0 {
            w -= cfg.beta_kl * rho[j] * (lp[j] - lref[j]) / (k * n_states);
        }
        clean_items.push((group.outputs[j].clone(), w));
    }

    let mut robust_kl = 0.0;
    let mut perturbed_items = Vec::new();
    if lambda > 0.0 {
        let s_adv = ro.perturbed.ok_or_else(|| Error::Config("robust KL needs a perturbed state".into()))?;
        for j in 0..lp.len() {
            let lq = policy::total_logprob(params, s_adv, &group.outputs[j]);
            robust_kl += rho[j] * k3(lp[j], lq) / k;
            let r = (lq - lp[j]).exp();
            clean_items[j].1 -= lambda * rho[j] * (lp[j] - lq) / (k * n_states);
            perturbed_items.push((group.outputs[j].clone(), -lambda * rho[j] * (r - 1.0) / (k * n_states)));
        }
    }

    let mut grad = policy::grad(params, &group.state, &Loss::WeightedLogprob(clean_items))?;

    let mut adv_surrogate = 0.0;
    if let Some(g) = ro.adversarial.filter(|_| w_adv > 0.0) {
        let alp: Vec<f64> = g.outputs.iter().map(|y| policy::total_logprob(params, &g.state, y)).collect();
        adv_surrogate = clipped_surrogate(&alp, &g.old_logprobs, &g.advantages, cfg.eps_clip);
        clip_frac = 0.5 * (clip_frac + clip_fraction(&alp, &g.old_logprobs, &g.advantages, cfg.eps_clip));
        let aw = surrogate_weights(&alp, &g.old_logprobs, &g.advantages, cfg.eps_clip);
        for (j, y) in g.outputs.iter().enumerate() {
            perturbed_items.push((y.clone(), w_adv * aw[j] / n_states));
        }
    }
    if !perturbed_items.is_empty() {
        let state = match (ro.adversarial, ro.perturbed) {
            (Some(g), _) => &g.state,
            (None, Some(s)) => s,
            (None, None) => return Err(Error::Config("adversarial terms without a perturbed state".into())),
        };
        let extra = policy::grad(params, state, &Loss::WeightedLogprob(perturbed_items))?;
        grad.add_scaled(&extra, 1.0);
    }
    let value = ((1.0 - w_adv) * surrogate + w_adv * adv_surrogate - cfg.beta_kl * ref_kl - lambda * robust_kl) / n_states;
    Ok(StateTerms { value, surrogate, adv_surrogate, ref_kl, robust_kl, clip_fraction: clip_frac, grad })
}

fn group_stats(groups: &[Group]) -> (f64, f64) {
    let all: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
    let m = mean(&all);
    let var = all.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / all.len().max(1) as f64;
    (m, var.sqrt())
}

/// One outer iteration: sample groups from `params_old`, then take
/// `updates_per_refresh` ascent steps from `params`. With
/// `config.adv = None` this is plain GRPO; otherwise the objective mixes
/// clean and adversarial surrogates and adds the robust KL penalty.
pub fn at_grpo_iteration(
    params: &ParamSet,
    params_old: &ParamSet,
    batch: &[Sample],
    ctx: &GrpoContext,
    iteration: usize,
    lr: f64,
) -> Result<(ParamSet, IterationStats)> {
    let cfg = ctx.config;
    if batch.is_empty() {
        return Err(Error::Config("empty GRPO minibatch".into()));
    }
    let ro = rollouts(params_old, batch, ctx, iteration)?;
    let n = batch.len() as f64;
    let mut params = params.clone();
    let mut last = None;
    for _ in 0..cfg.updates_per_refresh {
        let terms = (0..batch.len())
            .into_par_iter()
            .map(|i| state_terms(&params, ctx, &ro, i, n))
            .collect::<Result<Vec<_>>>()?;
        let grad = GradientSet::sum(&params, terms.iter().map(|t| &t.grad));
        if !grad.is_finite() {
            return Err(Error::TrainingDiverged { step: iteration, detail: "non-finite GRPO gradient".into() });
        }
        let grad_norm = optim::apply(&mut params, &grad, lr, cfg.optimizer, cfg.grad_clip, true);
        last = Some((terms, grad_norm));
    }
    let (terms, grad_norm) = last.expect("at least one update");
    let avg = |f: fn(&StateTerms) -> f64| terms.iter().map(f).sum::<f64>() / n;
    let w_adv = cfg.adv.as_ref().map_or(0.0, |a| a.adv_reward_weight);
    let surrogate = (1.0 - w_adv) * avg(|t| t.surrogate) + w_adv * avg(|t| t.adv_surrogate);
    let (reward_mean, reward_std) = group_stats(&ro.clean);
    let adv_stats = ro.adversarial.as_ref().map(|g| group_stats(g));
    let stats = IterationStats {
        iteration,
        reward_mean,
        reward_std,
        reward_ema: reward_mean,
        adv_reward_mean: adv_stats.map(|s| s.0),
        adv_reward_std: adv_stats.map(|s| s.1),
        surrogate,
        reference_kl: avg(|t| t.ref_kl),
        robust_kl: ro.perturbed.as_ref().filter(|_| cfg.adv.as_ref().is_some_and(|a| a.robust_kl_weight > 0.0)).map(|_| avg(|t| t.robust_kl)),
        clip_fraction: avg(|t| t.clip_fraction),
        grad_norm,
        lr,
    };
    if !stats.surrogate.is_finite() {
        return Err(Error::TrainingDiverged { step: iteration, detail: "non-finite surrogate".into() });
    }
    Ok((params, stats))
}

/// Plain GRPO iteration: [`at_grpo_iteration`] with adversarial terms off.
pub fn grpo_iteration(
    params: &ParamSet,
    params_old: &ParamSet,
    batch: &[Sample],
    ctx: &GrpoContext,
    iteration: usize,
    lr: f64,
) -> Result<(ParamSet, IterationStats)> {
    let clean_cfg = GrpoConfig { adv: None, ..ctx.config.clone() };
    let clean_ctx = GrpoContext { config: &clean_cfg, ..*ctx };
    at_grpo_iteration(params, params_old, batch, &clean_ctx, iteration, lr)
}

#[derive(Debug, Clone)]
pub struct GrpoOutcome {
    pub params: ParamSet,
    pub log: Vec<IterationStats>,
}

/// Run `config.iterations` iterations starting from `init`, refreshing the
/// old policy every iteration. Minibatches are drawn without replacement
/// per iteration.
pub fn train_grpo(init: &ParamSet, train: &[Sample], ctx: &GrpoContext) -> Result<GrpoOutcome> {
    let cfg = ctx.config;
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty GRPO training set".into()));
    }
    let mut params = init.clone();
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut ema: Option<f64> = None;
    for it in 0..cfg.iterations {
        let mut pick = rng::substream(ctx.seed, &[tag::GRPO, it as u64, u64::MAX]);
        let b = cfg.minibatch.min(train.len());
        let batch: Vec<Sample> = index::sample(&mut pick, train.len(), b).into_iter().map(|i| train[i].clone()).collect();
        let lr = optim::cosine_lr(cfg.learning_rate, it, cfg.iterations);
        let old = params.clone();
        let (next, mut stats) = if cfg.adv.is_some() {
            at_grpo_iteration(&params, &old, &batch, ctx, it, lr)?
        } else {
            grpo_iteration(&params, &old, &batch, ctx, it, lr)?
        };
        let e = match ema {
            None => stats.reward_mean,
            Some(prev) => cfg.ema_decay * prev + (1.0 - cfg.ema_decay) * stats.reward_mean,
        };
        ema = Some(e);
        stats.reward_ema = e;
        params = next;
        log.push(stats);
    }
    Ok(GrpoOutcome { params, log })
}

/// Total variance (sum over coordinates) of the per-group gradient estimate
/// `(1/K) Σ_i c_i ∇_θ log π(Y_i | s)` across groups, with `c` the
/// normalized advantages and with `c` the raw rewards. The same groups feed
/// both estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComparison {
    pub normalized: f64,
    pub raw: f64,
    pub groups: usize,
    pub mean_reward: f64,
}

pub fn advantage_variance(
    params: &ParamSet,
    states: &[Sample],
    reward: &RewardFn,
    k: usize,
    eps_std: f64,
    seed: u64,
) -> Result<VarianceComparison> {
    let temp = params.config.temperature;
    let pairs = states
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng::substream(seed, &[tag::GRPO, u64::MAX, i as u64]);
            let mut g = sample_group(params, s, k, temp, &mut rng)?;
            g.score(reward, eps_std);
            let kf = k as f64;
            let est = |c: &[f64]| {
                let items = g.outputs.iter().zip(c).map(|(y, &ci)| (y.clone(), ci / kf)).collect();
                policy::grad(params, s, &Loss::WeightedLogprob(items))
            };
            Ok((flatten(&est(&g.advantages)?), flatten(&est(&g.rewards)?), g.mean_reward()))
        })
        .collect::<Result<Vec<_>>>()?;
    let total_var = |pick: fn(&(Vec<f64>, Vec<f64>, f64)) -> &Vec<f64>| {
        let n = pairs.len() as f64;
        let dim = pick(&pairs[0]).len();
        (0..dim)
            .map(|c| {
                let m = pairs.iter().map(|p| pick(p)[c]).sum::<f64>() / n;
                pairs.iter().map(|p| (pick(p)[c] - m).powi(2)).sum::<f64>() / (n - 1.0)
            })
            .sum::<f64>()
    };
    if pairs.len() < 2 {
        return Err(Error::Config("variance comparison needs at least two groups".into()));
    }
    Ok(VarianceComparison {
        normalized: total_var(|p| &p.0),
        raw: total_var(|p| &p.1),
        groups: pairs.len(),
        mean_reward: pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64,
    })
}

fn flatten(g: &GradientSet) -> Vec<f64> {
    g.arrays().iter().flat_map(|a| a.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn symmetric_rewards() {
        let a = normalized_advantages(&[1.0, 2.0, 3.0], 0.0);
        assert_eq!(a, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_rewards_give_zero_advantages() {
        assert_eq!(normalized_advantages(&[0.4; 8], 1e-8), vec![0.0; 8]);
    }

    #[test]
    fn clip_arithmetic() {
        let c = clipped_surrogate(&[1.5f64.ln()], &[0.0], &[1.0], 0.2);
        assert!((c - 1.2).abs() < 1e-12);
        let c = clipped_surrogate(&[0.5f64.ln()], &[0.0], &[-1.0], 0.2);
        assert!((c + 0.8).abs() < 1e-12);
        for a in [-2.0, 0.3, 5.0] {
            assert_eq!(clipped_surrogate(&[0.7], &[0.7], &[a], 0.2), a);
        }
    }

    #[test]
    fn clipped_side_has_zero_weight() {
        let w = surrogate_weights(&[1.5f64.ln(), 0.5f64.ln(), 1.5f64.ln()], &[0.0; 3], &[1.0, -1.0, -1.0], 0.2);
        assert_eq!(w[0], 0.0);
        assert_eq!(w[1], 0.0);
        assert!((w[2] - 1.5 * -1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn k3_is_nonnegative_and_zero_at_equality() {
        assert_eq!(k3(-1.3, -1.3), 0.0);
        for (a, b) in [(-1.0, -3.0), (-3.0, -1.0), (0.0, -10.0)] {
            assert!(k3(a, b) > 0.0);
        }
    }

    proptest! {
        #[test]
        fn advantages_center_and_are_affine_invariant(
            r in proptest::collection::vec(0.0f64..1.0, 2..12),
            a in 0.1f64..10.0, b in -5.0f64..5.0,
        ) {
            let adv = normalized_advantages(&r, 0.0);
            let var = sample_variance(&r);
            if var > 1e-12 {
                prop_assert!(adv.iter().sum::<f64>().abs() < 1e-9);
                let mapped: Vec<f64> = r.iter().map(|x| a * x + b).collect();
                let adv2 = normalized_advantages(&mapped, 0.0);
                for (x, y) in adv.iter().zip(&adv2) {
                    prop_assert!((x - y).abs() <= 1e-9);
                }
                let top = |v: &[f64]| policy::argmax(v);
                prop_assert_eq!(top(&r), top(&mapped));
            }
        }

        #[test]
        fn surrogate_is_pessimistic(lr in -1.0f64..1.0, a in -3.0f64..3.0, eps in 0.05f64..0.5) {
            let rho = lr.exp();
            prop_assert!(clipped_surrogate(&[lr], &[0.0], &[a], eps) <= rho * a + 1e-15);
        }
    }
}
