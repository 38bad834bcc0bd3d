//! Planted-rule synthetic VQA tasks with known answers and evidence.
//!
//! Images live in a latent space with isotropic Gaussian noise and are then
//! embedded by a fixed per-coordinate scale. The coordinates split into
//! three blocks:
//!
//! * **class block** (`K` coordinates): a one-hot class code of amplitude
//!   `class_amplitude`, embedded at unit scale;
//! * **modality block** (2 coordinates): the modality's point on a circle,
//!   embedded at unit scale;
//! * **fragile block** (the rest): a random ±1 class code of amplitude
//!   `fragile_amplitude`, embedded at `fragile_scale`.
//!
//! The fragile block is highly predictive but its embedded separation is of
//! the order of typical attack budgets, so a model leaning on it is easy to
//! flip while the class block supports a robust fit.
//!
//! The planted rule is the linear discriminant of these class-conditional
//! Gaussians, `score(a) = W_m[a]·x + b[m,q,a]`, with small per-question
//! biases. Ground truth is the rule's argmax on the generated (noisy) image.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::rng::{self, tag, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Image dimension.
    pub dim: usize,
    /// Answer choices per question.
    pub choices: usize,
    /// Trace vocabulary size.
    pub vocab: usize,
    /// Maximum trace length.
    pub max_trace: usize,
    pub modalities: usize,
    pub questions: usize,
    /// Lower bound on the rule's score gap at noiseless class means.
    pub margin: f64,
    /// Latent noise standard deviation (isotropic).
    pub noise_sigma: f64,
    /// Samples per modality.
    pub counts: Vec<usize>,
    /// Fraction of each modality assigned to the training split.
    pub split_ratio: f64,
    pub class_amplitude: f64,
    pub modality_amplitude: f64,
    pub fragile_amplitude: f64,
    pub fragile_scale: f64,
    pub bias_scale: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            choices: 4,
            vocab: 32,
            max_trace: 6,
            modalities: 8,
            questions: 4,
            margin: 1.0,
            noise_sigma: 0.3,
            counts: vec![400; 8],
            split_ratio: 0.8,
            class_amplitude: 1.0,
            modality_amplitude: 1.0,
            fragile_amplitude: 0.6,
            fragile_scale: 0.01,
            bias_scale: 0.25,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("choices", self.choices),
            ("vocab", self.vocab),
            ("modalities", self.modalities),
            ("questions", self.questions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("task.{name} must be at least 1")));
            }
        }
        if self.choices > 26 {
            return Err(Error::Config("task.choices must be at most 26".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("task.split_ratio must lie in (0,1), got {}", self.split_ratio)));
        }
        let nonneg = [
            ("margin", self.margin),
            ("noise_sigma", self.noise_sigma),
            ("class_amplitude", self.class_amplitude),
            ("modality_amplitude", self.modality_amplitude),
            ("fragile_amplitude", self.fragile_amplitude),
            ("bias_scale", self.bias_scale),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("task.{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.fragile_scale > 0.0 && self.fragile_scale.is_finite()) {
            return Err(Error::Config("task.fragile_scale must be > 0".into()));
        }
        if self.counts.len() != self.modalities {
            return Err(Error::Config(format!(
                "task.counts has {} entries for {} modalities",
                self.counts.len(),
                self.modalities
            )));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Coordinates of (class block, modality block, fragile block).
    pub fn layout(&self) -> Option<Layout> {
        let class = if self.choices >= 2 { self.choices } else { 0 };
        if self.dim < class {
            return None;
        }
        let modality = if self.modalities >= 2 { (self.dim - class).min(2) } else { 0 };
        Some(Layout { class, modality, fragile: self.dim - class - modality })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub class: usize,
    pub modality: usize,
    pub fragile: usize,
}

/// Ground-truth generator: rule weights, biases, class-conditional means and
/// the evidence map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRule {
    pub dim: usize,
    pub choices: usize,
    pub modalities: usize,
    pub questions: usize,
    /// `[m][a][j]`, flattened.
    pub weights: Vec<f64>,
    /// `[m][q][a]`, flattened.
    pub biases: Vec<f64>,
    /// Class-conditional latent-embedded means `[m][a][j]`, flattened.
    pub means: Vec<f64>,
    /// Per-coordinate noise standard deviation.
    pub noise: Vec<f64>,
    /// Evidence token sets indexed `[m][q][a]`.
    pub evidence: Vec<BTreeSet<usize>>,
}

impl PlantedRule {
    pub fn weight_row(&self, modality: usize, answer: usize) -> &[f64] {
        let off = (modality * self.choices + answer) * self.dim;
        &self.weights[off..off + self.dim]
    }

    pub fn mean(&self, modality: usize, answer: usize) -> &[f64] {
        let off = (modality * self.choices + answer) * self.dim;
        &self.means[off..off + self.dim]
    }

    pub fn bias(&self, modality: usize, question: usize, answer: usize) -> f64 {
        self.biases[(modality * self.questions + question) * self.choices + answer]
    }

    pub fn evidence_for(&self, modality: usize, question: usize, answer: usize) -> &BTreeSet<usize> {
        &self.evidence[(modality * self.questions + question) * self.choices + answer]
    }

    pub fn scores(&self, image: &[f64], question: usize, modality: usize) -> Vec<f64> {
        (0..self.choices)
            .map(|a| dot(self.weight_row(modality, a), image) + self.bias(modality, question, a))
            .collect()
    }

    /// Smallest gap between the true class score and the best competitor,
    /// over all noiseless class means.
    pub fn noiseless_margin(&self) -> f64 {
        if self.choices < 2 {
            return f64::INFINITY;
        }
        let mut worst = f64::INFINITY;
        for m in 0..self.modalities {
            for q in 0..self.questions {
                for a in 0..self.choices {
                    let s = self.scores(self.mean(m, a), q, m);
                    let best_other = s.iter().enumerate().filter(|&(b, _)| b != a).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
                    worst = worst.min(s[a] - best_other);
                }
            }
        }
        worst
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::decode(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::decode(path, e))
    }

    fn content_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("rule serializes").as_bytes())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Argmax of the rule's scores; ties go to the lowest answer id.
pub fn oracle_answer(rule: &PlantedRule, image: &[f64], question: usize, modality: usize) -> usize {
    let scores = rule.scores(image, question, modality);
    let mut best = 0;
    for (a, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = a;
        }
    }
    best
}

/// Build the planted rule for `spec`. Deterministic in `(spec, seed)`.
pub fn make_rule(spec: &TaskSpec, seed: u64) -> Result<PlantedRule> {
    spec.validate()?;
    let mut rng = rng::substream(seed, &[tag::RULE]);
    let layout = match spec.layout() {
        Some(l) => l,
        None if spec.margin == 0.0 => return Ok(random_rule(spec, &mut rng)),
        None => {
            return Err(Error::Config(format!(
                "margin {} unachievable: {} choices need at least {} image coordinates, have {}",
                spec.margin, spec.choices, spec.choices, spec.dim
            )))
        }
    };
    let (d, k, m_n, q_n) = (spec.dim, spec.choices, spec.modalities, spec.questions);

    let signs = fragile_codes(k, layout.fragile, &mut rng);
    let mut scale = vec![1.0; d];
    for s in scale.iter_mut().skip(layout.class + layout.modality) {
        *s = spec.fragile_scale;
    }
    let noise: Vec<f64> = scale.iter().map(|s| s * spec.noise_sigma).collect();
    // Precision of the discriminant; unit latent noise when the task is noiseless.
    let latent_sigma = if spec.noise_sigma > 0.0 { spec.noise_sigma } else { 1.0 };
    let precision: Vec<f64> = scale.iter().map(|s| 1.0 / (s * latent_sigma).powi(2)).collect();

    let mut means = vec![0.0; m_n * k * d];
    for m in 0..m_n {
        let angle = 2.0 * PI * m as f64 / m_n as f64;
        for a in 0..k {
            let mu = &mut means[(m * k + a) * d..(m * k + a + 1) * d];
            if layout.class > 0 {
                mu[a] = spec.class_amplitude;
            }
            let off = layout.class;
            if layout.modality >= 1 {
                mu[off] = spec.modality_amplitude * angle.cos();
            }
            if layout.modality >= 2 {
                mu[off + 1] = spec.modality_amplitude * angle.sin();
            }
            for (j, s) in signs[a].iter().enumerate() {
                let idx = layout.class + layout.modality + j;
                mu[idx] = scale[idx] * spec.fragile_amplitude * s;
            }
        }
    }

    let mut weights = vec![0.0; m_n * k * d];
    let mut base_bias = vec![0.0; m_n * k];
    for ma in 0..m_n * k {
        let mu = &means[ma * d..(ma + 1) * d];
        for j in 0..d {
            weights[ma * d + j] = mu[j] * precision[j];
        }
        base_bias[ma] = -0.5 * mu.iter().zip(&precision).map(|(x, p)| x * x * p).sum::<f64>();
    }

    let jitter: Vec<f64> = (0..m_n * q_n * k)
        .map(|_| spec.bias_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let evidence = evidence_map(spec, &mut rng);

    let build = |shrink: f64| {
        let mut biases = vec![0.0; m_n * q_n * k];
        for m in 0..m_n {
            for q in 0..q_n {
                for a in 0..k {
                    let i = (m * q_n + q) * k + a;
                    biases[i] = base_bias[m * k + a] + shrink * jitter[i];
                }
            }
        }
        PlantedRule {
            dim: d,
            choices: k,
            modalities: m_n,
            questions: q_n,
            weights: weights.clone(),
            biases,
            means: means.clone(),
            noise: noise.clone(),
            evidence: evidence.clone(),
        }
    };

    // Shrink the question biases until the margin holds.
    let mut shrink = 1.0;
    for _ in 0..40 {
        let rule = build(shrink);
        if rule.noiseless_margin() >= spec.margin {
            return Ok(rule);
        }
        shrink *= 0.5;
    }
    let rule = build(0.0);
    if rule.noiseless_margin() >= spec.margin {
        Ok(rule)
    } else {
        Err(Error::Config(format!(
            "margin {} unachievable for dim={} choices={} (best {:.4})",
            spec.margin,
            d,
            k,
            rule.noiseless_margin()
        )))
    }
}

/// Random ±1 codes, redrawn a few times to keep classes apart in Hamming
/// distance.
fn fragile_codes(k: usize, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let min_dist = n / 4;
    let draw = |rng: &mut Rng| -> Vec<Vec<f64>> {
        (0..k).map(|_| (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()).collect()
    };
    let spread = |codes: &[Vec<f64>]| {
        let mut worst = usize::MAX;
        for a in 0..codes.len() {
            for b in a + 1..codes.len() {
                worst = worst.min(codes[a].iter().zip(&codes[b]).filter(|(x, y)| x != y).count());
            }
        }
        worst
    };
    let mut codes = draw(rng);
    for _ in 0..64 {
        if spread(&codes) >= min_dist {
            break;
        }
        codes = draw(rng);
    }
    codes
}

/// Evidence for `(m, q, a)` is one token per factor: the answer, the modality
/// and the question each own a disjoint pool of vocabulary ids, laid out in
/// ascending order so the canonical (sorted) trace lists them in that order.
/// Vocabularies too small for disjoint pools fall back to random draws.
fn evidence_map(spec: &TaskSpec, rng: &mut Rng) -> Vec<BTreeSet<usize>> {
    let (k, m_n, q_n, v) = (spec.choices, spec.modalities, spec.questions, spec.vocab);
    let mut out = Vec::with_capacity(m_n * q_n * k);
    if k + m_n + q_n <= v {
        let mut answer_pool: Vec<usize> = (0..k).collect();
        let mut modality_pool: Vec<usize> = (k..k + m_n).collect();
        let mut question_pool: Vec<usize> = (k + m_n..k + m_n + q_n).collect();
        answer_pool.shuffle(rng);
        modality_pool.shuffle(rng);
        question_pool.shuffle(rng);
        for m in 0..m_n {
            for q in 0..q_n {
                for a in 0..k {
                    out.push([answer_pool[a], modality_pool[m], question_pool[q]].into_iter().collect());
                }
            }
        }
    } else {
        let size = v.min(3);
        for _ in 0..m_n * q_n * k {
            let mut ids: Vec<usize> = (0..v).collect();
            ids.shuffle(rng);
            out.push(ids[..size].iter().copied().collect());
        }
    }
    out
}

fn random_rule(spec: &TaskSpec, rng: &mut Rng) -> PlantedRule {
    let (d, k, m_n, q_n) = (spec.dim, spec.choices, spec.modalities, spec.questions);
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let weights: Vec<f64> = (0..m_n * k * d).map(|_| normal()).collect();
    let biases: Vec<f64> = (0..m_n * q_n * k).map(|_| spec.bias_scale * normal()).collect();
    let means = weights.clone();
    let noise = vec![spec.noise_sigma; d];
    let evidence = evidence_map(spec, rng);
    PlantedRule { dim: d, choices: k, modalities: m_n, questions: q_n, weights, biases, means, noise, evidence }
}

/// Per-modality stratified split: within each modality a seeded shuffle puts
/// the first `round(n * ratio)` indices in train. Returns `(train, test)`
/// index lists into `modalities`.
pub fn stratified_split(modalities: &[usize], n_modalities: usize, ratio: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for m in 0..n_modalities {
        let mut idx: Vec<usize> = (0..modalities.len()).filter(|&i| modalities[i] == m).collect();
        idx.shuffle(rng);
        let n_train = (idx.len() as f64 * ratio).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    (train, test)
}

/// Generate the train and test splits.
pub fn gen_dataset(rule: &PlantedRule, spec: &TaskSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    if rule.dim != spec.dim || rule.choices != spec.choices || rule.modalities != spec.modalities || rule.questions != spec.questions {
        return Err(Error::Config("rule shape does not match task spec".into()));
    }
    if let Some(m) = spec.counts.iter().position(|&c| c < 1) {
        return Err(Error::Config(format!("modality {m} has no samples")));
    }
    let mut rng = rng::substream(seed, &[tag::DATA]);
    let mut samples = Vec::with_capacity(spec.total_samples());
    for (m, &count) in spec.counts.iter().enumerate() {
        for _ in 0..count {
            let drawn = rng.random_range(0..spec.choices);
            let question = rng.random_range(0..spec.questions);
            let image: Vec<f64> = rule
                .mean(m, drawn)
                .iter()
                .zip(&rule.noise)
                .map(|(mu, s)| mu + s * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let truth = oracle_answer(rule, &image, question, m);
            let evidence = rule.evidence_for(m, question, truth).clone();
            samples.push(Sample { image, question, choices: spec.choices, truth, modality: m, evidence });
        }
    }
    for s in &samples {
        s.validate(spec.vocab)?;
    }

    let modalities: Vec<usize> = samples.iter().map(|s| s.modality).collect();
    let mut split_rng = rng::substream(seed, &[tag::SPLIT]);
    let (train_idx, test_idx) = stratified_split(&modalities, spec.modalities, spec.split_ratio, &mut split_rng);

    let spec_text = serde_json::to_string(spec).expect("spec serializes");
    let spec_hash = sha256_hex(format!("{spec_text}|{}|{seed}", rule.content_hash()).as_bytes())[..16].to_string();
    let pick = |idx: &[usize], split| Dataset {
        samples: idx.iter().map(|&i| samples[i].clone()).collect(),
        split,
        spec_hash: spec_hash.clone(),
    };
    Ok((pick(&train_idx, Split::Train), pick(&test_idx, Split::Test)))
}
