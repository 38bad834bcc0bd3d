//! Evaluation-time image attacks (FGSM, PGD, C&W), sweep accounting and the
//! area-under-accuracy metric.
//!
//! Success always means the model's own answer changed: an attack that moves
//! an already-wrong answer to another wrong answer succeeds, one that leaves
//! a wrong answer in place does not.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::perturb::{self, Norm, PgdParams};
use crate::policy::{self, Loss, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Cw,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Cw];
}

impl FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "cw" => Ok(AttackKind::Cw),
            _ => Err(Error::Config(format!("unknown attack {s:?}"))),
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Cw => "cw",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwConfig {
    /// Weight of the margin term against `‖δ‖₂`.
    pub c: f64,
    pub kappa: f64,
    /// Adam step size on δ.
    pub lr: f64,
    pub steps: usize,
    /// Rounds of binary search over `c`; 0 keeps `c` fixed.
    pub binary_search: usize,
}

impl Default for CwConfig {
    fn default() -> Self {
        Self { c: 1.0, kappa: 0.0, lr: 1e-3, steps: 100, binary_search: 5 }
    }
}

impl CwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("cw.c must be > 0, got {}", self.c)));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("cw.kappa must be >= 0, got {}", self.kappa)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("cw.lr must be > 0, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(Error::Config("cw.steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub norm: Norm,
    pub cw: CwConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { kind: AttackKind::Pgd, epsilon: 0.01, alpha: 0.0025, steps: 10, norm: Norm::Linf, cw: CwConfig::default() }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AttackKind::Fgsm => {
                if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
                    return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
                }
                Ok(())
            }
            AttackKind::Pgd => self.pgd().validate(),
            AttackKind::Cw => self.cw.validate(),
        }
    }

    pub fn pgd(&self) -> PgdParams {
        PgdParams { epsilon: self.epsilon, alpha: self.alpha, steps: self.steps, norm: self.norm }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub delta: Vec<f64>,
    pub success: bool,
    pub clean_answer: usize,
    pub attacked_answer: usize,
    pub delta_l2: f64,
    pub delta_linf: f64,
}

impl AttackOutcome {
    fn evaluate(params: &ParamSet, sample: &Sample, delta: Vec<f64>, clean_answer: usize) -> AttackOutcome {
        let attacked_answer = answer_at(params, &perturb::add(&sample.image, &delta), sample.question);
        AttackOutcome {
            success: attacked_answer != clean_answer,
            clean_answer,
            attacked_answer,
            delta_l2: perturb::l2_norm(&delta),
            delta_linf: perturb::linf_norm(&delta),
            delta,
        }
    }
}

/// Greedy answer on an image. The answer head reads only the shared hidden
/// state, so this is the greedy decode's answer in either trace mode.
pub fn answer_at(params: &ParamSet, image: &[f64], question: usize) -> usize {
    policy::argmax(&policy::answer_logits_for(params, image, question))
}

pub fn clean_answer(params: &ParamSet, sample: &Sample) -> usize {
    answer_at(params, &sample.image, sample.question)
}

/// Negative log-probability of `anchor`, marginal over traces.
pub fn untargeted_loss(params: &ParamSet, sample: &Sample, anchor: usize) -> Result<f64> {
    policy::loss_value(params, sample, &Loss::AnchorNll(anchor))
}

/// Image gradient of [`untargeted_loss`].
pub fn untargeted_grad(params: &ParamSet, sample: &Sample, anchor: usize) -> Result<Vec<f64>> {
    Ok(policy::grad(params, sample, &Loss::AnchorNll(anchor))?.image)
}

/// `ε·sign(∇_image loss)` for any registered loss.
pub fn fgsm_delta(params: &ParamSet, sample: &Sample, loss: &Loss, epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
    }
    let g = policy::grad(params, sample, loss)?.image;
    Ok(g.iter().map(|&v| epsilon * perturb::sign(v)).collect())
}

/// One signed step of size `epsilon` on the untargeted loss.
pub fn fgsm(params: &ParamSet, sample: &Sample, epsilon: f64) -> Result<AttackOutcome> {
    let anchor = clean_answer(params, sample);
    let delta = fgsm_delta(params, sample, &Loss::AnchorNll(anchor), epsilon)?;
    Ok(AttackOutcome::evaluate(params, sample, delta, anchor))
}

pub fn pgd_attack(params: &ParamSet, sample: &Sample, config: &AttackConfig) -> Result<AttackOutcome> {
    let anchor = clean_answer(params, sample);
    let (delta, _) = perturb::pgd_ascend(&sample.image, &config.pgd(), |x, _| {
        untargeted_grad(params, &sample.with_image(x.to_vec()), anchor)
    })?;
    Ok(AttackOutcome::evaluate(params, sample, delta, anchor))
}

/// Adam descent on `‖δ‖₂ + c·max(z_anchor − max_{a≠anchor} z_a, −κ)`.
/// Returns the smallest successful iterate over all rounds, else the last
/// iterate.
pub fn cw_attack(params: &ParamSet, sample: &Sample, config: &AttackConfig) -> Result<AttackOutcome> {
    let cw = &config.cw;
    cw.validate()?;
    let anchor = clean_answer(params, sample);
    let margin = Loss::CwMargin { anchor, kappa: cw.kappa };
    let dim = sample.image.len();
    let mut best: Option<Vec<f64>> = None;
    let mut last = vec![0.0; dim];
    let (mut c, mut lo, mut hi) = (cw.c, 0.0, f64::INFINITY);
    for _round in 0..cw.binary_search.max(1) {
        let mut delta = vec![0.0; dim];
        let (mut m, mut v) = (vec![0.0; dim], vec![0.0; dim]);
        let mut found = false;
        for t in 1..=cw.steps {
            let x = sample.with_image(perturb::add(&sample.image, &delta));
            let mut g = policy::grad(params, &x, &margin)?.image;
            g.iter_mut().for_each(|gi| *gi *= c);
            let n = perturb::l2_norm(&delta);
            if n > 0.0 {
                g.iter_mut().zip(&delta).for_each(|(gi, d)| *gi += d / n);
            }
            adam_step(&mut delta, &g, &mut m, &mut v, cw.lr, t);
            if answer_at(params, &perturb::add(&sample.image, &delta), sample.question) != anchor {
                found = true;
                if best.as_ref().is_none_or(|b| perturb::l2_norm(&delta) < perturb::l2_norm(b)) {
                    best = Some(delta.clone());
                }
            }
        }
        last = delta;
        if found {
            hi = c;
            c = 0.5 * (lo + hi);
        } else {
            lo = c;
            c = if hi.is_finite() { 0.5 * (lo + hi) } else { 10.0 * c };
        }
    }
    Ok(AttackOutcome::evaluate(params, sample, best.unwrap_or(last), anchor))
}

fn adam_step(x: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: usize) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    let (c1, c2) = (1.0 - B1.powi(t as i32), 1.0 - B2.powi(t as i32));
    for i in 0..x.len() {
        m[i] = B1 * m[i] + (1.0 - B1) * g[i];
        v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
        x[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-12);
    }
}

/// Dispatch on `config.kind`.
pub fn attack(params: &ParamSet, sample: &Sample, config: &AttackConfig) -> Result<AttackOutcome> {
    config.validate()?;
    match config.kind {
        AttackKind::Fgsm => fgsm(params, sample, config.epsilon),
        AttackKind::Pgd => pgd_attack(params, sample, config),
        AttackKind::Cw => cw_attack(params, sample, config),
    }
}

/// Trapezoidal area under accuracy-vs-ε, divided by the ε range.
pub fn aua(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Config(format!("AUA needs at least 2 points, got {}", points.len())));
    }
    if points[0].0 != 0.0 {
        return Err(Error::Config("AUA grid must start at epsilon 0".into()));
    }
    if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::Config("AUA epsilons must be strictly increasing".into()));
    }
    let area: f64 = points.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum();
    Ok(area / (points[points.len() - 1].0 - points[0].0))
}

pub const DEFAULT_EPSILONS: [f64; 6] = [0.0, 0.0025, 0.005, 0.01, 0.02, 0.04];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    pub kinds: Vec<AttackKind>,
    pub norm: Norm,
    pub pgd_steps: usize,
    /// PGD step size as a fraction of ε.
    pub alpha_fraction: f64,
    pub cw: CwConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            epsilons: DEFAULT_EPSILONS.to_vec(),
            kinds: AttackKind::ALL.to_vec(),
            norm: Norm::Linf,
            pgd_steps: 10,
            alpha_fraction: 0.25,
            cw: CwConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Ok(());
        }
        if self.epsilons.len() < 2 || self.epsilons[0] != 0.0 {
            return Err(Error::Config("attack.epsilons must start at 0 and have at least 2 entries".into()));
        }
        if self.epsilons.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("attack.epsilons must be strictly increasing".into()));
        }
        if !(self.alpha_fraction > 0.0) || self.pgd_steps == 0 {
            return Err(Error::Config("attack.alpha_fraction must be > 0 and attack.pgd_steps >= 1".into()));
        }
        if self.kinds.contains(&AttackKind::Cw) {
            self.cw.validate()?;
        }
        Ok(())
    }

    /// Attack settings for one (kind, ε) cell.
    pub fn attack_config(&self, kind: AttackKind, epsilon: f64) -> AttackConfig {
        AttackConfig {
            kind,
            epsilon,
            alpha: self.alpha_fraction * epsilon,
            steps: self.pgd_steps,
            norm: self.norm,
            cw: self.cw.clone(),
        }
    }
}

/// One (sample, attack, ε) cell. `correct` is against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sample: usize,
    pub attack: AttackKind,
    pub epsilon: f64,
    pub success: bool,
    pub correct: bool,
    pub delta_l2: f64,
    pub delta_linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub attack: AttackKind,
    /// `(ε, accuracy)` over the grid.
    pub points: Vec<(f64, f64)>,
    pub aua: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub curves: Vec<Curve>,
}

/// Run every attack at every ε on every sample. The ε = 0 cell is the
/// unattacked model. C&W is unbounded, so it runs once per sample and a
/// success counts at ε only if its δ lies in the ε-ball of the sweep norm.
pub fn sweep(params: &ParamSet, samples: &[Sample], config: &SweepConfig) -> Result<SweepResult> {
    config.validate()?;
    let per_sample = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| sweep_sample(params, i, s, config))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<SweepRow> = per_sample.into_iter().flatten().collect();
    let mut curves = Vec::new();
    for &kind in &config.kinds {
        let points: Vec<(f64, f64)> = config
            .epsilons
            .iter()
            .map(|&eps| {
                let cell: Vec<&SweepRow> = rows.iter().filter(|r| r.attack == kind && r.epsilon == eps).collect();
                let acc = if cell.is_empty() { 0.0 } else { cell.iter().filter(|r| r.correct).count() as f64 / cell.len() as f64 };
                (eps, acc)
            })
            .collect();
        let aua = aua(&points)?;
        curves.push(Curve { attack: kind, points, aua });
    }
    Ok(SweepResult { rows, curves })
}

fn sweep_sample(params: &ParamSet, index: usize, sample: &Sample, config: &SweepConfig) -> Result<Vec<SweepRow>> {
    let clean = clean_answer(params, sample);
    let row = |attack, epsilon, answer: usize, delta_l2, delta_linf| SweepRow {
        sample: index,
        attack,
        epsilon,
        success: answer != clean,
        correct: answer == sample.truth,
        delta_l2,
        delta_linf,
    };
    let mut rows = Vec::new();
    for &kind in &config.kinds {
        let cw = if kind == AttackKind::Cw { Some(cw_attack(params, sample, &config.attack_config(kind, 0.0))?) } else { None };
        for &eps in &config.epsilons {
            if eps == 0.0 {
                rows.push(row(kind, eps, clean, 0.0, 0.0));
                continue;
            }
            let out = match &cw {
                Some(o) => {
                    if o.success && perturb::norm_of(&o.delta, config.norm) <= eps {
                        o.clone()
                    } else {
                        AttackOutcome::evaluate(params, sample, vec![0.0; sample.image.len()], clean)
                    }
                }
                None => attack(params, sample, &config.attack_config(kind, eps))?,
            };
            rows.push(row(kind, eps, out.attacked_answer, out.delta_l2, out.delta_linf));
        }
    }
    Ok(rows)
}

/// Tab-separated sweep table, one row per (sample, attack, ε).
pub fn write_table(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut out = String::from("sample\tattack\tepsilon\tsuccess\tcorrect\tdelta_l2\tdelta_linf\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.6e}\t{:.6e}\n",
            r.sample, r.attack, r.epsilon, r.success as u8, r.correct as u8, r.delta_l2, r.delta_linf
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_params, PolicyConfig};
    use crate::rng;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};
    use std::collections::BTreeSet;

    fn setup(seed: u64) -> (ParamSet, Sample) {
        let cfg = PolicyConfig { dim: 6, questions: 2, choices: 3, vocab: 5, max_trace: 2, hidden: 8, ..PolicyConfig::default() };
        let p = init_params(&cfg, seed, 0.8).unwrap();
        let mut r = rng::from_seed(seed);
        let image = (0..6).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut r)).collect();
        let s = Sample { image, question: 1, choices: 3, truth: 2, modality: 0, evidence: BTreeSet::from([1, 3]) };
        (p, s)
    }

    #[test]
    fn aua_trapezoids() {
        assert!((aua(&[(0.0, 1.0), (0.1, 0.5)]).unwrap() - 0.75).abs() < 1e-12);
        assert!((aua(&[(0.0, 1.0), (0.05, 0.5), (0.1, 0.5)]).unwrap() - 0.625).abs() < 1e-12);
        assert!((aua(&[(0.0, 0.3), (0.01, 0.3), (0.04, 0.3)]).unwrap() - 0.3).abs() < 1e-12);
        assert!(matches!(aua(&[(0.0, 1.0)]), Err(Error::Config(_))));
        assert!(matches!(aua(&[(0.0, 1.0), (0.0, 1.0)]), Err(Error::Config(_))));
    }

    #[test]
    fn fgsm_is_one_step_pgd() {
        for seed in 0..20 {
            let (p, s) = setup(seed);
            let eps = 0.05;
            let a = fgsm(&p, &s, eps).unwrap();
            let cfg = AttackConfig { kind: AttackKind::Pgd, epsilon: eps, alpha: eps, steps: 1, ..AttackConfig::default() };
            let b = pgd_attack(&p, &s, &cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.delta_linf, eps);
        }
    }

    #[test]
    fn zero_step_pgd_is_a_config_error() {
        let (p, s) = setup(1);
        let cfg = AttackConfig { steps: 0, ..AttackConfig::default() };
        assert!(matches!(pgd_attack(&p, &s, &cfg), Err(Error::Config(_))));
        assert!(matches!(fgsm(&p, &s, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn loss_at_zero_perturbation_is_clean_nll() {
        let (p, s) = setup(3);
        let a = clean_answer(&p, &s);
        let z = policy::answer_logits_for(&p, &s.image, s.question);
        let nll = -policy::log_softmax(&z)[a];
        assert!((untargeted_loss(&p, &s, a).unwrap() - nll).abs() < 1e-15);
        let other = Sample { evidence: BTreeSet::from([0]), ..s.clone() };
        assert_eq!(untargeted_loss(&p, &s, a).unwrap(), untargeted_loss(&p, &other, a).unwrap());
    }

    #[test]
    fn cw_success_has_nonpositive_margin() {
        let mut hits = 0;
        for seed in 0..10 {
            let (p, s) = setup(seed);
            let cfg = AttackConfig { kind: AttackKind::Cw, cw: CwConfig { lr: 0.05, steps: 200, ..CwConfig::default() }, ..AttackConfig::default() };
            let out = cw_attack(&p, &s, &cfg).unwrap();
            let anchor = out.clean_answer;
            let z = policy::answer_logits_for(&p, &perturb::add(&s.image, &out.delta), s.question);
            if out.success {
                hits += 1;
                let best_other = (0..z.len()).filter(|&a| a != anchor).map(|a| z[a]).fold(f64::NEG_INFINITY, f64::max);
                assert!(z[anchor] - best_other <= 0.0);
            }
            assert_eq!(out.success, out.attacked_answer != out.clean_answer);
        }
        assert!(hits > 0);
    }

    #[test]
    fn sweep_zero_column_is_clean_accuracy() {
        let samples: Vec<Sample> = (0..8).map(|i| setup(i).1).collect();
        let (p, _) = setup(0);
        let cfg = SweepConfig { epsilons: vec![0.0, 0.1, 0.3], ..SweepConfig::default() };
        let res = sweep(&p, &samples, &cfg).unwrap();
        let clean = samples.iter().filter(|s| clean_answer(&p, s) == s.truth).count() as f64 / 8.0;
        assert_eq!(res.curves.len(), 3);
        for c in &res.curves {
            assert_eq!(c.points[0], (0.0, clean));
        }
        assert_eq!(res.rows.len(), 8 * 3 * 3);
    }

    proptest! {
        #[test]
        fn aua_is_bounded_and_monotone(acc in proptest::collection::vec(0.0f64..=1.0, 2..8), bump in 0.0f64..0.5) {
            let pts: Vec<(f64, f64)> = acc.iter().enumerate().map(|(i, &a)| (i as f64 * 0.01, a)).collect();
            let v = aua(&pts).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            let up: Vec<(f64, f64)> = pts.iter().map(|&(e, a)| (e, (a + bump).min(1.0))).collect();
            prop_assert!(aua(&up).unwrap() >= v - 1e-15);
        }
    }
}
