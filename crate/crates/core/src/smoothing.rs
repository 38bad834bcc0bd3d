//! Randomized smoothing: Gaussian-noise majority votes, exact binomial lower
//! bounds and L2 certified radii.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::perturb::{self, Norm, PgdParams};
use crate::policy::{self, Loss, ParamSet};
use crate::rng::{self, tag, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub sigma: f64,
    pub n_pred: usize,
    pub n_cert: usize,
    pub alpha: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { sigma: 0.0025, n_pred: 100, n_cert: 1000, alpha: 0.001 }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("smoothing.sigma must be > 0, got {}", self.sigma)));
        }
        if self.n_pred == 0 || self.n_cert == 0 {
            return Err(Error::Config("smoothing.n_pred and smoothing.n_cert must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("smoothing.alpha must lie in (0,1), got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Vote tally. `invalid` counts decodes that were not a well-formed output;
/// it can never win certification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Votes {
    pub counts: Vec<usize>,
    pub invalid: usize,
}

impl Votes {
    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.invalid
    }

    /// Most voted answer, lowest id on ties. `None` if no valid votes.
    pub fn top(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (a, &c) in self.counts.iter().enumerate() {
            if c > 0 && best.is_none_or(|b| c > self.counts[b]) {
                best = Some(a);
            }
        }
        best
    }
}

/// Greedy-decode `n` noisy copies of the image and tally the answers.
pub fn noisy_votes(params: &ParamSet, sample: &Sample, sigma: f64, n: usize, rng: &mut Rng) -> Votes {
    let c = &params.config;
    let mut votes = Votes { counts: vec![0; c.choices], invalid: 0 };
    let noise = Normal::new(0.0, sigma).unwrap_or(Normal::new(0.0, 0.0).unwrap());
    for _ in 0..n {
        let image: Vec<f64> = sample.image.iter().map(|&x| x + noise.sample(rng)).collect();
        let y = policy::greedy(params, &sample.with_image(image));
        match y.validate(c.vocab, c.choices, c.max_trace) {
            Ok(()) => votes.counts[y.answer] += 1,
            Err(_) => votes.invalid += 1,
        }
    }
    votes
}

fn ln_choose(n: usize, k: usize) -> f64 {
    libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0)
}

/// `P(Bin(n, p) ≥ k)` by direct summation in log space.
pub fn binomial_sf(k: usize, n: usize, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n || p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let terms: Vec<f64> = (k..=n).map(|i| ln_choose(n, i) + i as f64 * lp + (n - i) as f64 * lq).collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()).exp().min(1.0)
}

/// One-sided exact lower confidence bound on a binomial proportion: the `p`
/// with `P(Bin(n, p) ≥ k) = alpha`, found by bisection to 1e-10.
pub fn clopper_pearson_lower(k: usize, n: usize, alpha: f64) -> Result<f64> {
    if k > n {
        return Err(Error::Domain(format!("successes {k} exceed trials {n}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if k == 0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if binomial_sf(k, n, mid) > alpha {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Φ⁻¹ by a rational approximation (relative error about 1e-9) followed by
/// two Halley corrections against [`normal_cdf`].
pub fn inverse_normal_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("inverse normal CDF needs p in (0,1), got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Work in the lower tail and reflect, which keeps the result exactly
    // antisymmetric.
    if p > 0.5 {
        return Ok(-lower_tail_quantile(1.0 - p));
    }
    Ok(lower_tail_quantile(p))
}

fn lower_tail_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let mut x = if p < 0.02425 {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    for _ in 0..2 {
        let e = normal_cdf(x) - p;
        let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

/// `(σ/2)(Φ⁻¹(p_a) − Φ⁻¹(p_b))`.
pub fn radius_two_sided(sigma: f64, p_a: f64, p_b: f64) -> Result<f64> {
    if p_a < p_b {
        return Err(Error::Domain(format!("p_a = {p_a} is below p_b = {p_b}")));
    }
    Ok(0.5 * sigma * (inverse_normal_cdf(p_a)? - inverse_normal_cdf(p_b)?))
}

/// `σ·Φ⁻¹(p_lower)`, the radius with the runner-up bounded by `1 − p_lower`.
pub fn radius_one_sided(sigma: f64, p_lower: f64) -> Result<f64> {
    Ok(sigma * inverse_normal_cdf(p_lower)?)
}

/// `2·exp(−2·n·eps²)`, a bound on `P(|p̂ − p| ≥ eps)` for `n` draws.
pub fn hoeffding_bound(n: usize, eps: f64) -> f64 {
    2.0 * (-2.0 * n as f64 * eps * eps).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// `None` means abstain.
    pub prediction: Option<usize>,
    /// Stage-2 tally.
    pub votes: Votes,
    pub p_lower: f64,
    pub radius: f64,
}

impl Certificate {
    pub fn abstained(&self) -> bool {
        self.prediction.is_none()
    }
}

/// Turn a candidate and its stage-2 count into a certificate.
pub fn certificate_from(candidate: Option<usize>, votes: Votes, config: &SmoothingConfig) -> Result<Certificate> {
    let Some(a) = candidate else {
        return Ok(Certificate { prediction: None, votes, p_lower: 0.0, radius: 0.0 });
    };
    let p_lower = clopper_pearson_lower(votes.counts[a], votes.total(), config.alpha)?;
    if p_lower > 0.5 {
        let radius = radius_one_sided(config.sigma, p_lower)?;
        Ok(Certificate { prediction: Some(a), votes, p_lower, radius })
    } else {
        Ok(Certificate { prediction: None, votes, p_lower, radius: 0.0 })
    }
}

/// Two-stage certification of sample `index`: an `n_pred` majority vote picks
/// the candidate, then a fresh `n_cert` tally lower-bounds its probability.
pub fn certify(params: &ParamSet, sample: &Sample, config: &SmoothingConfig, seed: u64, index: u64) -> Result<Certificate> {
    config.validate()?;
    let pred = noisy_votes(params, sample, config.sigma, config.n_pred, &mut rng::substream(seed, &[tag::SMOOTH_PRED, index]));
    let cert = noisy_votes(params, sample, config.sigma, config.n_cert, &mut rng::substream(seed, &[tag::SMOOTH_CERT, index]));
    certificate_from(pred.top(), cert, config)
}

/// Certify every sample in parallel; output order follows input order.
pub fn certify_all(params: &ParamSet, samples: &[Sample], config: &SmoothingConfig, seed: u64) -> Result<Vec<Certificate>> {
    samples.par_iter().enumerate().map(|(i, s)| certify(params, s, config, seed, i as u64)).collect()
}

/// Fraction of samples certified correct at radius at least `r`, for each `r`.
pub fn certified_accuracy(certs: &[Certificate], samples: &[Sample], radii: &[f64]) -> Vec<(f64, f64)> {
    radii
        .iter()
        .map(|&r| {
            let hit = certs.iter().zip(samples).filter(|(c, s)| c.prediction == Some(s.truth) && c.radius >= r).count();
            (r, if samples.is_empty() { 0.0 } else { hit as f64 / samples.len() as f64 })
        })
        .collect()
}

/// Settings for attacking the smoothed predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedAttackConfig {
    pub steps: usize,
    /// Noise draws per gradient estimate.
    pub draws: usize,
    /// Step size as a multiple of `radius / steps`.
    pub step_factor: f64,
}

impl Default for SmoothedAttackConfig {
    fn default() -> Self {
        Self { steps: 20, draws: 32, step_factor: 2.5 }
    }
}

/// L2 PGD of norm `radius` on the expected anchor NLL under the smoothing
/// noise, averaged over fresh draws at each step. Returns the perturbation.
pub fn attack_smoothed(
    params: &ParamSet,
    sample: &Sample,
    anchor: usize,
    sigma: f64,
    radius: f64,
    config: &SmoothedAttackConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let pgd = PgdParams { epsilon: radius, alpha: config.step_factor * radius / config.steps.max(1) as f64, steps: config.steps, norm: Norm::L2 };
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let loss = Loss::AnchorNll(anchor);
    let dim = sample.image.len();
    let (delta, _) = perturb::pgd_ascend(&sample.image, &pgd, |x, _| {
        let mut g = vec![0.0; dim];
        for _ in 0..config.draws.max(1) {
            let noisy: Vec<f64> = x.iter().map(|&v| v + noise.sample(rng)).collect();
            let gi = policy::grad(params, &sample.with_image(noisy), &loss)?.image;
            g.iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
        }
        Ok(g)
    })?;
    Ok(delta)
}

/// Outcome of attacking one certified sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessCase {
    pub sample: usize,
    pub radius: f64,
    pub prediction: usize,
    pub attacked_prediction: Option<usize>,
    pub flipped: bool,
}

/// For each certified sample, attack the smoothed predictor at `fraction·R`
/// and re-run the `n_pred` majority vote with fresh noise.
pub fn soundness_check(
    params: &ParamSet,
    samples: &[Sample],
    certs: &[Certificate],
    config: &SmoothingConfig,
    attack: &SmoothedAttackConfig,
    fraction: f64,
    seed: u64,
) -> Result<Vec<SoundnessCase>> {
    let cases: Vec<Option<SoundnessCase>> = samples
        .par_iter()
        .zip(certs)
        .enumerate()
        .map(|(i, (s, c))| {
            let (Some(pred), true) = (c.prediction, c.radius > 0.0) else {
                return Ok(None);
            };
            let mut r = rng::substream(seed, &[tag::SMOOTH_ATTACK, i as u64]);
            let delta = attack_smoothed(params, s, pred, config.sigma, fraction * c.radius, attack, &mut r)?;
            let moved = s.with_image(perturb::add(&s.image, &delta));
            let votes = noisy_votes(params, &moved, config.sigma, config.n_pred, &mut r);
            let after = votes.top();
            Ok(Some(SoundnessCase { sample: i, radius: c.radius, prediction: pred, attacked_prediction: after, flipped: after != Some(pred) }))
        })
        .collect::<Result<_>>()?;
    Ok(cases.into_iter().flatten().collect())
}
