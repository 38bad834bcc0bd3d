//! A tiny structured-output policy with exact log-probabilities and
//! analytic gradients.
//!
//! Architecture:
//!
//! ```text
//! x      = concat((image - shift) * scale, onehot(question))
//! hidden = tanh(W x + b)
//! answer logits  = A hidden
//! trace logits_t = T_t g_t      g_t = hidden                      (factored, or t = 0)
//!                               g_t = tanh(W x + b + E[:, y_t-1])  (autoregressive, t >= 1)
//! ```
//!
//! `shift`/`scale` is a frozen per-coordinate standardization fitted on the
//! training images; it is not trained and has no gradient. The answer head
//! reads the shared hidden state only, so the answer distribution does not
//! depend on the trace in either mode.
//!
//! Every output carries exactly `max_trace` trace positions when sampled. The
//! log-probability of a shorter trace is the marginal of its prefix.

use std::fmt;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::format::StructuredOutput;
use crate::rng::{self, tag, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Factored,
    Autoregressive,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "factored" => Ok(Mode::Factored),
            "autoregressive" => Ok(Mode::Autoregressive),
            _ => Err(Error::Config(format!("unknown policy mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub dim: usize,
    pub questions: usize,
    pub choices: usize,
    pub vocab: usize,
    pub max_trace: usize,
    pub hidden: usize,
    pub mode: Mode,
    pub temperature: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            questions: 4,
            choices: 4,
            vocab: 32,
            max_trace: 6,
            hidden: 32,
            mode: Mode::Factored,
            temperature: 0.7,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("policy.hidden must be at least 1".into()));
        }
        if self.dim == 0 || self.choices == 0 || self.questions == 0 {
            return Err(Error::Config("policy dimensions must be at least 1".into()));
        }
        if self.vocab == 0 && self.max_trace > 0 {
            return Err(Error::Config("policy.vocab must be at least 1 when traces are non-empty".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("policy.temperature must be > 0".into()));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.dim + self.questions
    }
}

/// Names of the trainable arrays, in storage order.
pub const TRAINABLE: [&str; 5] = ["w_in", "b_hidden", "answer_head", "trace_heads", "token_embed"];

/// All policy parameters. Arrays are row-major:
/// `w_in` is `hidden × (dim + questions)`, `answer_head` is `choices × hidden`,
/// `trace_heads` is `max_trace × vocab × hidden`, `token_embed` is
/// `hidden × vocab` (empty in factored mode).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub config: PolicyConfig,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub w_in: Vec<f64>,
    pub b_hidden: Vec<f64>,
    pub answer_head: Vec<f64>,
    pub trace_heads: Vec<f64>,
    pub token_embed: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(config: &PolicyConfig) -> ParamSet {
        let (h, v) = (config.hidden, config.vocab);
        let embed = match config.mode {
            Mode::Factored => 0,
            Mode::Autoregressive => h * v,
        };
        ParamSet {
            config: config.clone(),
            input_shift: vec![0.0; config.dim],
            input_scale: vec![1.0; config.dim],
            w_in: vec![0.0; h * config.input_dim()],
            b_hidden: vec![0.0; h],
            answer_head: vec![0.0; config.choices * h],
            trace_heads: vec![0.0; config.max_trace * v * h],
            token_embed: vec![0.0; embed],
        }
    }

    pub fn trainable(&self) -> [&[f64]; 5] {
        [&self.w_in, &self.b_hidden, &self.answer_head, &self.trace_heads, &self.token_embed]
    }

    pub fn trainable_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [&mut self.w_in, &mut self.b_hidden, &mut self.answer_head, &mut self.trace_heads, &mut self.token_embed]
    }

    /// Shapes of every named array, frozen ones included.
    pub fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let c = &self.config;
        let embed = if self.token_embed.is_empty() { vec![0] } else { vec![c.hidden, c.vocab] };
        vec![
            ("input_shift", vec![c.dim]),
            ("input_scale", vec![c.dim]),
            ("w_in", vec![c.hidden, c.input_dim()]),
            ("b_hidden", vec![c.hidden]),
            ("answer_head", vec![c.choices, c.hidden]),
            ("trace_heads", vec![c.max_trace, c.vocab, c.hidden]),
            ("token_embed", embed),
        ]
    }

    pub fn array(&self, name: &str) -> Option<&[f64]> {
        Some(match name {
            "input_shift" => &self.input_shift,
            "input_scale" => &self.input_scale,
            "w_in" => &self.w_in,
            "b_hidden" => &self.b_hidden,
            "answer_head" => &self.answer_head,
            "trace_heads" => &self.trace_heads,
            "token_embed" => &self.token_embed,
            _ => return None,
        })
    }

    pub fn array_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        Some(match name {
            "input_shift" => &mut self.input_shift,
            "input_scale" => &mut self.input_scale,
            "w_in" => &mut self.w_in,
            "b_hidden" => &mut self.b_hidden,
            "answer_head" => &mut self.answer_head,
            "trace_heads" => &mut self.trace_heads,
            "token_embed" => &mut self.token_embed,
            _ => return None,
        })
    }

    /// Check array lengths against the config and that every entry is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = ParamSet::zeros(&self.config);
        for (name, _) in self.shapes() {
            let (have, want) = (self.array(name).unwrap(), expected.array(name).unwrap());
            if have.len() != want.len() {
                return Err(Error::Config(format!("array {name} has {} entries, expected {}", have.len(), want.len())));
            }
            if have.iter().any(|v| !v.is_finite()) {
                return Err(Error::Range(format!("array {name} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Fit the frozen input standardization to a set of images.
    pub fn fit_input_norm<'a>(&mut self, images: impl IntoIterator<Item = &'a [f64]>) {
        let d = self.config.dim;
        let mut n = 0usize;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for img in images {
            n += 1;
            for j in 0..d {
                sum[j] += img[j];
                sq[j] += img[j] * img[j];
            }
        }
        if n == 0 {
            return;
        }
        for j in 0..d {
            let mean = sum[j] / n as f64;
            let var = (sq[j] / n as f64 - mean * mean).max(0.0);
            self.input_shift[j] = mean;
            self.input_scale[j] = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|a| a.len()).sum()
    }
}

/// Gradients of a scalar loss: one array per trainable parameter array plus
/// the gradient with respect to the raw image.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub w_in: Vec<f64>,
    pub b_hidden: Vec<f64>,
    pub answer_head: Vec<f64>,
    pub trace_heads: Vec<f64>,
    pub token_embed: Vec<f64>,
    pub image: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(params: &ParamSet) -> GradientSet {
        GradientSet {
            w_in: vec![0.0; params.w_in.len()],
            b_hidden: vec![0.0; params.b_hidden.len()],
            answer_head: vec![0.0; params.answer_head.len()],
            trace_heads: vec![0.0; params.trace_heads.len()],
            token_embed: vec![0.0; params.token_embed.len()],
            image: vec![0.0; params.config.dim],
        }
    }

    pub fn arrays(&self) -> [&[f64]; 5] {
        [&self.w_in, &self.b_hidden, &self.answer_head, &self.trace_heads, &self.token_embed]
    }

    pub fn arrays_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [&mut self.w_in, &mut self.b_hidden, &mut self.answer_head, &mut self.trace_heads, &mut self.token_embed]
    }

    /// `self += c * other`, image included.
    pub fn add_scaled(&mut self, other: &GradientSet, c: f64) {
        for (a, b) in self.arrays_mut().into_iter().zip(other.arrays()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
        }
        self.image.iter_mut().zip(&other.image).for_each(|(x, y)| *x += c * y);
    }

    pub fn scale(&mut self, c: f64) {
        for a in self.arrays_mut() {
            a.iter_mut().for_each(|x| *x *= c);
        }
        self.image.iter_mut().for_each(|x| *x *= c);
    }

    /// L2 norm over the parameter arrays (the image gradient is excluded).
    pub fn param_norm(&self) -> f64 {
        self.arrays().iter().flat_map(|a| a.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().flat_map(|a| a.iter()).chain(&self.image).all(|x| x.is_finite())
    }

    /// Sum in the given order; fixed order keeps results bit-reproducible.
    pub fn sum<'a>(params: &ParamSet, parts: impl IntoIterator<Item = &'a GradientSet>) -> GradientSet {
        let mut total = GradientSet::zeros_like(params);
        for p in parts {
            total.add_scaled(p, 1.0);
        }
        total
    }
}

/// Gaussian `N(0, scale^2)` initialization, one substream per array. The
/// input standardization starts as the identity.
pub fn init_params(config: &PolicyConfig, seed: u64, scale: f64) -> Result<ParamSet> {
    config.validate()?;
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("init scale must be finite and >= 0, got {scale}")));
    }
    let mut params = ParamSet::zeros(config);
    for (i, arr) in params.trainable_mut().into_iter().enumerate() {
        let mut rng = rng::substream(seed, &[tag::INIT, i as u64]);
        for v in arr.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = scale * z;
        }
    }
    Ok(params)
}

/// Answer and per-position trace logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub answer: Vec<f64>,
    pub trace: Vec<Vec<f64>>,
}

pub(crate) struct Hidden {
    x: Vec<f64>,
    pre: Vec<f64>,
    h: Vec<f64>,
}

fn hidden_state(params: &ParamSet, image: &[f64], question: usize) -> Hidden {
    let c = &params.config;
    let n_in = c.input_dim();
    let mut x = vec![0.0; n_in];
    for j in 0..c.dim {
        x[j] = (image[j] - params.input_shift[j]) * params.input_scale[j];
    }
    if question < c.questions {
        x[c.dim + question] = 1.0;
    }
    let mut pre = params.b_hidden.clone();
    for (i, p) in pre.iter_mut().enumerate() {
        let row = &params.w_in[i * n_in..(i + 1) * n_in];
        *p += row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
    }
    let h = pre.iter().map(|v| v.tanh()).collect();
    Hidden { x, pre, h }
}

fn matvec(m: &[f64], v: &[f64], rows: usize) -> Vec<f64> {
    let cols = v.len();
    (0..rows).map(|r| m[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Input to trace head `t`: the shared hidden state, or in autoregressive
/// mode for `t >= 1` the hidden pre-activation shifted by the embedding of
/// the previous token.
fn trace_input(params: &ParamSet, hid: &Hidden, t: usize, prev: Option<usize>) -> Option<Vec<f64>> {
    match (params.config.mode, t, prev) {
        (Mode::Autoregressive, t, Some(p)) if t >= 1 => {
            let v = params.config.vocab;
            Some(hid.pre.iter().enumerate().map(|(i, z)| (z + params.token_embed[i * v + p]).tanh()).collect())
        }
        _ => None,
    }
}

fn trace_logits(params: &ParamSet, t: usize, g: &[f64]) -> Vec<f64> {
    let c = &params.config;
    let block = c.vocab * c.hidden;
    matvec(&params.trace_heads[t * block..(t + 1) * block], g, c.vocab)
}

fn answer_logits(params: &ParamSet, h: &[f64]) -> Vec<f64> {
    matvec(&params.answer_head, h, params.config.choices)
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn check_input(params: &ParamSet, sample: &Sample) -> Result<()> {
    if sample.image.len() != params.config.dim {
        return Err(Error::Config(format!(
            "image dimension {} does not match policy dimension {}",
            sample.image.len(),
            params.config.dim
        )));
    }
    Ok(())
}

/// Logits for a sample. In autoregressive mode trace positions are
/// conditioned on the greedy prefix.
pub fn forward(params: &ParamSet, sample: &Sample) -> Logits {
    let hid = hidden_state(params, &sample.image, sample.question);
    let answer = answer_logits(params, &hid.h);
    let mut trace = Vec::with_capacity(params.config.max_trace);
    let mut prev = None;
    for t in 0..params.config.max_trace {
        let g = trace_input(params, &hid, t, prev);
        let u = trace_logits(params, t, g.as_deref().unwrap_or(&hid.h));
        prev = Some(argmax(&u));
        trace.push(u);
    }
    Logits { answer, trace }
}

/// Answer logits only.
pub fn answer_logits_for(params: &ParamSet, image: &[f64], question: usize) -> Vec<f64> {
    let hid = hidden_state(params, image, question);
    answer_logits(params, &hid.h)
}

/// `log π(y | s)` at temperature 1: answer log-probability plus the
/// log-probability of each trace position present in `y`.
pub fn total_logprob(params: &ParamSet, sample: &Sample, y: &StructuredOutput) -> f64 {
    let hid = hidden_state(params, &sample.image, sample.question);
    logprob_with(params, &hid, y)
}

fn logprob_with(params: &ParamSet, hid: &Hidden, y: &StructuredOutput) -> f64 {
    let mut total = log_softmax(&answer_logits(params, &hid.h))[y.answer];
    let mut prev = None;
    for (t, &tok) in y.trace.iter().enumerate() {
        let g = trace_input(params, hid, t, prev);
        total += log_softmax(&trace_logits(params, t, g.as_deref().unwrap_or(&hid.h)))[tok];
        prev = Some(tok);
    }
    total
}

fn sample_categorical(logits: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let probs = softmax(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` past the cumulative sum: take the last supported index.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Ancestral sampling from temperature-scaled softmaxes: every trace
/// position in order, then the answer. Returns the output and its
/// log-probability under the unscaled policy.
pub fn sample_output(params: &ParamSet, sample: &Sample, rng: &mut Rng, temperature: f64) -> (StructuredOutput, f64) {
    let hid = hidden_state(params, &sample.image, sample.question);
    let mut trace = Vec::with_capacity(params.config.max_trace);
    let mut logprob = 0.0;
    let mut prev = None;
    for t in 0..params.config.max_trace {
        let g = trace_input(params, &hid, t, prev);
        let u = trace_logits(params, t, g.as_deref().unwrap_or(&hid.h));
        let tok = sample_categorical(&u, temperature, rng);
        logprob += log_softmax(&u)[tok];
        trace.push(tok);
        prev = Some(tok);
    }
    let z = answer_logits(params, &hid.h);
    let answer = sample_categorical(&z, temperature, rng);
    logprob += log_softmax(&z)[answer];
    (StructuredOutput { trace, answer }, logprob)
}

/// Greedy decoding: argmax at every position.
pub fn greedy(params: &ParamSet, sample: &Sample) -> StructuredOutput {
    let logits = forward(params, sample);
    StructuredOutput { trace: logits.trace.iter().map(|u| argmax(u)).collect(), answer: argmax(&logits.answer) }
}

/// The scalar losses the policy can differentiate.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    /// `-log π(target | s)`.
    Sft(StructuredOutput),
    /// `Σ_j w_j log π(y_j | s)`; weights are treated as constants.
    WeightedLogprob(Vec<(StructuredOutput, f64)>),
    /// `-log softmax(answer logits)[anchor]`; the trace is marginalized.
    AnchorNll(usize),
    /// `max(z_anchor - max_{a != anchor} z_a, -kappa)` over answer logits.
    CwMargin { anchor: usize, kappa: f64 },
    Zero,
}

impl Loss {
    pub const NAMES: [&'static str; 5] = ["sft", "weighted_logprob", "anchor_nll", "cw_margin", "zero"];

    /// Build a registered loss by name with targets taken from the sample:
    /// the canonical evidence trace and the true answer.
    pub fn by_name(name: &str, sample: &Sample, max_trace: usize) -> Result<Loss> {
        let target = || StructuredOutput {
            trace: sample.evidence.iter().copied().take(max_trace).collect(),
            answer: sample.truth,
        };
        Ok(match name {
            "sft" => Loss::Sft(target()),
            "weighted_logprob" => Loss::WeightedLogprob(vec![(target(), 1.0)]),
            "anchor_nll" => Loss::AnchorNll(sample.truth),
            "cw_margin" => Loss::CwMargin { anchor: sample.truth, kappa: 0.0 },
            "zero" => Loss::Zero,
            other => return Err(Error::UnsupportedLoss(other.to_string())),
        })
    }

    fn check(&self, c: &PolicyConfig) -> Result<()> {
        let check_y = |y: &StructuredOutput| y.validate(c.vocab, c.choices, c.max_trace);
        match self {
            Loss::Sft(y) => check_y(y),
            Loss::WeightedLogprob(items) => items.iter().try_for_each(|(y, _)| check_y(y)),
            Loss::AnchorNll(a) | Loss::CwMargin { anchor: a, .. } if *a >= c.choices => {
                Err(Error::Range(format!("anchor {a} outside {} choices", c.choices)))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Loss::Sft(_) => "sft",
            Loss::WeightedLogprob(_) => "weighted_logprob",
            Loss::AnchorNll(_) => "anchor_nll",
            Loss::CwMargin { .. } => "cw_margin",
            Loss::Zero => "zero",
        };
        f.write_str(name)
    }
}

/// Runner-up answer (largest logit other than `anchor`; lowest id on ties).
fn runner_up(z: &[f64], anchor: usize) -> usize {
    let mut best = usize::MAX;
    for (a, &v) in z.iter().enumerate() {
        if a != anchor && (best == usize::MAX || v > z[best]) {
            best = a;
        }
    }
    best
}

/// Value of a registered loss.
pub fn loss_value(params: &ParamSet, sample: &Sample, loss: &Loss) -> Result<f64> {
    check_input(params, sample)?;
    loss.check(&params.config)?;
    let hid = hidden_state(params, &sample.image, sample.question);
    Ok(match loss {
        Loss::Sft(y) => -logprob_with(params, &hid, y),
        Loss::WeightedLogprob(items) => items.iter().map(|(y, w)| w * logprob_with(params, &hid, y)).sum(),
        Loss::AnchorNll(a) => -log_softmax(&answer_logits(params, &hid.h))[*a],
        Loss::CwMargin { anchor, kappa } => {
            let z = answer_logits(params, &hid.h);
            if z.len() < 2 {
                -kappa
            } else {
                (z[*anchor] - z[runner_up(&z, *anchor)]).max(-kappa)
            }
        }
        Loss::Zero => 0.0,
    })
}

/// Backward pass accumulator for one forward.
struct Backward<'a> {
    params: &'a ParamSet,
    hid: &'a Hidden,
    grads: &'a mut GradientSet,
    /// Gradient of the loss wrt the hidden pre-activation, summed over every
    /// path that reaches it.
    dpre: Vec<f64>,
}

impl<'a> Backward<'a> {
    fn answer(&mut self, dz: &[f64]) {
        let h = self.params.config.hidden;
        let mut dh = vec![0.0; h];
        for (a, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.params.answer_head[a * h..(a + 1) * h];
            let grow = &mut self.grads.answer_head[a * h..(a + 1) * h];
            for i in 0..h {
                grow[i] += g * self.hid.h[i];
                dh[i] += g * row[i];
            }
        }
        self.through_hidden(&dh);
    }

    fn through_hidden(&mut self, dh: &[f64]) {
        for i in 0..dh.len() {
            self.dpre[i] += dh[i] * (1.0 - self.hid.h[i] * self.hid.h[i]);
        }
    }

    /// Add `coef * ∇ log π(y | s)`.
    fn logprob(&mut self, y: &StructuredOutput, coef: f64) {
        let c = &self.params.config;
        let (h, v) = (c.hidden, c.vocab);
        let z = answer_logits(self.params, &self.hid.h);
        let mut dz: Vec<f64> = softmax(&z).iter().map(|p| -coef * p).collect();
        dz[y.answer] += coef;
        self.answer(&dz);

        let mut prev = None;
        for (t, &tok) in y.trace.iter().enumerate() {
            let g_own = trace_input(self.params, self.hid, t, prev);
            let g: &[f64] = g_own.as_deref().unwrap_or(&self.hid.h);
            let u = trace_logits(self.params, t, g);
            let mut du: Vec<f64> = softmax(&u).iter().map(|p| -coef * p).collect();
            du[tok] += coef;
            let block = t * v * h;
            let mut dg = vec![0.0; h];
            for (k, &gk) in du.iter().enumerate() {
                let row = &self.params.trace_heads[block + k * h..block + (k + 1) * h];
                let grow = &mut self.grads.trace_heads[block + k * h..block + (k + 1) * h];
                for i in 0..h {
                    grow[i] += gk * g[i];
                    dg[i] += gk * row[i];
                }
            }
            match (&g_own, prev) {
                (Some(gv), Some(p)) => {
                    for i in 0..h {
                        let d = dg[i] * (1.0 - gv[i] * gv[i]);
                        self.dpre[i] += d;
                        self.grads.token_embed[i * v + p] += d;
                    }
                }
                _ => self.through_hidden(&dg),
            }
            prev = Some(tok);
        }
    }

    /// Push the accumulated pre-activation gradient into `w_in`, `b_hidden`
    /// and the image.
    fn finish(self) {
        let c = &self.params.config;
        let n_in = c.input_dim();
        let mut dx = vec![0.0; n_in];
        for (i, &d) in self.dpre.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            self.grads.b_hidden[i] += d;
            let row = &self.params.w_in[i * n_in..(i + 1) * n_in];
            let grow = &mut self.grads.w_in[i * n_in..(i + 1) * n_in];
            for j in 0..n_in {
                grow[j] += d * self.hid.x[j];
                dx[j] += d * row[j];
            }
        }
        for j in 0..c.dim {
            self.grads.image[j] += dx[j] * self.params.input_scale[j];
        }
    }
}

/// Exact gradient of a registered loss with respect to every trainable
/// array and the image.
pub fn grad(params: &ParamSet, sample: &Sample, loss: &Loss) -> Result<GradientSet> {
    check_input(params, sample)?;
    loss.check(&params.config)?;
    let mut grads = GradientSet::zeros_like(params);
    let hid = hidden_state(params, &sample.image, sample.question);
    let mut bw = Backward { params, hid: &hid, grads: &mut grads, dpre: vec![0.0; params.config.hidden] };
    match loss {
        Loss::Sft(y) => bw.logprob(y, -1.0),
        Loss::WeightedLogprob(items) => {
            for (y, w) in items {
                if *w != 0.0 {
                    bw.logprob(y, *w);
                }
            }
        }
        Loss::AnchorNll(a) => {
            let z = answer_logits(params, &hid.h);
            let mut dz = softmax(&z);
            dz[*a] -= 1.0;
            bw.answer(&dz);
        }
        Loss::CwMargin { anchor, kappa } => {
            let z = answer_logits(params, &hid.h);
            if z.len() >= 2 {
                let other = runner_up(&z, *anchor);
                if z[*anchor] - z[other] > -kappa {
                    let mut dz = vec![0.0; z.len()];
                    dz[*anchor] = 1.0;
                    dz[other] = -1.0;
                    bw.answer(&dz);
                }
            }
        }
        Loss::Zero => {}
    }
    bw.finish();
    Ok(grads)
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error, e.g. `w_in[12]` or `image[3]`.
    pub worst: String,
    pub coordinates: usize,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Relative error with the denominator floored at 1, so coordinates with
/// gradients below unit size are compared in absolute terms.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn record(report: &mut FdReport, name: String, a: f64, n: f64) {
    let e = rel_error(a, n);
    report.coordinates += 1;
    if e > report.max_rel_error || report.worst.is_empty() {
        report.max_rel_error = report.max_rel_error.max(e);
        report.worst = name;
    }
}

/// Compare the trainable part of `analytic` with central differences of an
/// arbitrary scalar function of the parameters.
pub fn compare_param_gradient(
    params: &ParamSet,
    analytic: &GradientSet,
    step: f64,
    tolerance: f64,
    mut f: impl FnMut(&ParamSet) -> Result<f64>,
) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(Error::Config("finite-difference step must be > 0".into()));
    }
    let mut report = FdReport { max_rel_error: 0.0, worst: String::new(), coordinates: 0, tolerance };
    let mut work = params.clone();
    for (k, name) in TRAINABLE.iter().enumerate() {
        for i in 0..params.trainable()[k].len() {
            let orig = work.trainable()[k][i];
            work.trainable_mut()[k][i] = orig + step;
            let up = f(&work)?;
            work.trainable_mut()[k][i] = orig - step;
            let down = f(&work)?;
            work.trainable_mut()[k][i] = orig;
            record(&mut report, format!("{name}[{i}]"), analytic.arrays()[k][i], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Compare `analytic` with central differences of `loss` over every
/// trainable coordinate and every image coordinate.
pub fn compare_gradient(
    params: &ParamSet,
    sample: &Sample,
    loss: &Loss,
    analytic: &GradientSet,
    step: f64,
    tolerance: f64,
) -> Result<FdReport> {
    let mut report = compare_param_gradient(params, analytic, step, tolerance, |p| loss_value(p, sample, loss))?;
    let mut img = sample.clone();
    for j in 0..sample.image.len() {
        let orig = img.image[j];
        img.image[j] = orig + step;
        let up = loss_value(params, &img, loss)?;
        img.image[j] = orig - step;
        let down = loss_value(params, &img, loss)?;
        img.image[j] = orig;
        record(&mut report, format!("image[{j}]"), analytic.image[j], (up - down) / (2.0 * step));
    }
    Ok(report)
}

/// Check [`grad`] against central differences.
pub fn finite_difference_check(params: &ParamSet, sample: &Sample, loss: &Loss, step: f64, tolerance: f64) -> Result<FdReport> {
    let analytic = grad(params, sample, loss)?;
    compare_gradient(params, sample, loss, &analytic, step, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(k: usize, v: usize, l: usize, mode: Mode) -> PolicyConfig {
        PolicyConfig { dim: 3, questions: 2, choices: k, vocab: v, max_trace: l, hidden: 5, mode, temperature: 1.0 }
    }

    fn sample(dim: usize) -> Sample {
        Sample {
            image: (0..dim).map(|i| 0.3 * i as f64 - 0.4).collect(),
            question: 1,
            choices: 4,
            truth: 1,
            modality: 0,
            evidence: [0, 2].into_iter().collect(),
        }
    }

    #[test]
    fn zero_params_give_uniform_distributions() {
        let cfg = PolicyConfig::default();
        let p = init_params(&cfg, 1, 0.0).unwrap();
        assert!(p.trainable().iter().all(|a| a.iter().all(|&v| v == 0.0)));
        let s = sample(16);
        let logits = forward(&p, &s);
        assert!(logits.answer.iter().all(|&v| v == 0.0));
        assert!(logits.trace.iter().flatten().all(|&v| v == 0.0));

        let no_trace = PolicyConfig { max_trace: 0, ..cfg.clone() };
        let p0 = init_params(&no_trace, 1, 0.0).unwrap();
        let lp = total_logprob(&p0, &s, &StructuredOutput::new(vec![], 2));
        assert!((lp + 4f64.ln()).abs() < 1e-12);
        assert!((lp - (-1.386294)).abs() < 1e-6);

        let two = PolicyConfig { max_trace: 2, ..cfg };
        let p2 = init_params(&two, 1, 0.0).unwrap();
        let lp = total_logprob(&p2, &s, &StructuredOutput::new(vec![5, 31], 0));
        assert!((lp - (-(4f64.ln()) - 2.0 * 32f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = PolicyConfig::default();
        assert_eq!(init_params(&cfg, 5, 0.05).unwrap(), init_params(&cfg, 5, 0.05).unwrap());
        assert_ne!(init_params(&cfg, 5, 0.05).unwrap(), init_params(&cfg, 6, 0.05).unwrap());
    }

    #[test]
    fn forward_is_finite_and_pure() {
        let cfg = PolicyConfig { mode: Mode::Autoregressive, ..PolicyConfig::default() };
        let p = init_params(&cfg, 2, 3.0).unwrap();
        let mut s = sample(16);
        s.image.iter_mut().for_each(|v| *v *= 1e6);
        let a = forward(&p, &s);
        assert!(a.answer.iter().chain(a.trace.iter().flatten()).all(|v| v.is_finite()));
        assert_eq!(a, forward(&p, &s));
    }

    fn all_outputs(k: usize, v: usize, l: usize) -> Vec<StructuredOutput> {
        let mut traces: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..l {
            traces = traces.into_iter().flat_map(|t| (0..v).map(move |tok| [t.clone(), vec![tok]].concat())).collect();
        }
        traces.into_iter().flat_map(|t| (0..k).map(move |a| StructuredOutput::new(t.clone(), a))).collect()
    }

    #[test]
    fn probabilities_sum_to_one_by_enumeration() {
        for mode in [Mode::Factored, Mode::Autoregressive] {
            for (k, v, l) in [(2, 2, 1), (3, 2, 2), (2, 3, 3)] {
                let p = init_params(&tiny_config(k, v, l, mode), 11, 0.8).unwrap();
                let s = sample(3);
                let total: f64 = all_outputs(k, v, l).iter().map(|y| total_logprob(&p, &s, y).exp()).sum();
                assert!((total - 1.0).abs() < 1e-12, "{mode:?} {k} {v} {l}: {total}");
            }
        }
    }

    #[test]
    fn sampled_logprob_matches_recomputation() {
        for mode in [Mode::Factored, Mode::Autoregressive] {
            let cfg = PolicyConfig { mode, ..PolicyConfig::default() };
            let p = init_params(&cfg, 3, 0.5).unwrap();
            let s = sample(16);
            let mut rng = rng::from_seed(4);
            for _ in 0..50 {
                let (y, lp) = sample_output(&p, &s, &mut rng, 0.7);
                assert_eq!(y.trace.len(), 6);
                assert!((total_logprob(&p, &s, &y) - lp).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn near_zero_temperature_is_greedy() {
        let cfg = PolicyConfig { mode: Mode::Autoregressive, ..PolicyConfig::default() };
        let p = init_params(&cfg, 8, 1.0).unwrap();
        let s = sample(16);
        let mut rng = rng::from_seed(1);
        let g = greedy(&p, &s);
        for _ in 0..20 {
            assert_eq!(sample_output(&p, &s, &mut rng, 1e-9).0, g);
        }
    }

    #[test]
    fn answer_head_gradient_matches_hand_derivation() {
        // Zero weights except a hidden bias, so the distribution is uniform
        // and hidden = tanh(b): d log π / dA[a] = (onehot(answer) - 1/K)[a] * hidden.
        let cfg = PolicyConfig { max_trace: 0, ..PolicyConfig::default() };
        let mut p = init_params(&cfg, 1, 0.0).unwrap();
        for (i, b) in p.b_hidden.iter_mut().enumerate() {
            *b = 0.1 * i as f64 - 1.0;
        }
        let s = sample(16);
        let y = StructuredOutput::new(vec![], 2);
        let g = grad(&p, &s, &Loss::WeightedLogprob(vec![(y.clone(), 1.0)])).unwrap();
        for a in 0..4 {
            let coef = if a == 2 { 0.75 } else { -0.25 };
            for i in 0..32 {
                let expect = coef * p.b_hidden[i].tanh();
                assert!((g.answer_head[a * 32 + i] - expect).abs() < 1e-14);
            }
        }
        let fd = finite_difference_check(&p, &s, &Loss::WeightedLogprob(vec![(y, 1.0)]), 1e-5, 1e-6).unwrap();
        assert!(fd.passed(), "{fd:?}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for mode in [Mode::Factored, Mode::Autoregressive] {
            let cfg = PolicyConfig { mode, hidden: 8, ..PolicyConfig::default() };
            let mut p = init_params(&cfg, 21, 0.3).unwrap();
            p.input_scale.iter_mut().enumerate().for_each(|(j, s)| *s = 1.0 + j as f64);
            let s = sample(16);
            let y1 = StructuredOutput::new(vec![3, 1, 4, 1, 5, 9], 2);
            let y2 = StructuredOutput::new(vec![2, 7], 0);
            for loss in [
                Loss::Sft(y1.clone()),
                Loss::WeightedLogprob(vec![(y1.clone(), 0.7), (y2.clone(), -1.3)]),
                Loss::AnchorNll(3),
                Loss::CwMargin { anchor: 1, kappa: 5.0 },
            ] {
                let fd = finite_difference_check(&p, &s, &loss, 1e-5, 1e-6).unwrap();
                assert!(fd.passed(), "{mode:?} {loss}: {fd:?}");
            }
        }
    }

    #[test]
    fn image_gradient_vanishes_when_loss_ignores_image() {
        let cfg = PolicyConfig::default();
        let p = init_params(&cfg, 3, 0.2).unwrap();
        let s = sample(16);
        let g = grad(&p, &s, &Loss::Zero).unwrap();
        assert!(g.image.iter().all(|&v| v == 0.0));
        // A policy with zero input weights cannot see the image.
        let mut blind = p.clone();
        blind.w_in.iter_mut().for_each(|w| *w = 0.0);
        let g = grad(&blind, &s, &Loss::AnchorNll(0)).unwrap();
        assert!(g.image.iter().all(|&v| v == 0.0));
        let fd = finite_difference_check(&p, &s, &Loss::Zero, 1e-5, 1e-6).unwrap();
        assert_eq!(fd.max_rel_error, 0.0);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let cfg = PolicyConfig { hidden: 6, ..PolicyConfig::default() };
        let p = init_params(&cfg, 4, 0.5).unwrap();
        let s = sample(16);
        let loss = Loss::AnchorNll(1);
        let mut g = grad(&p, &s, &loss).unwrap();
        g.answer_head[3] += 0.05;
        let fd = compare_gradient(&p, &s, &loss, &g, 1e-5, 1e-6).unwrap();
        assert!(!fd.passed());
        assert_eq!(fd.worst, "answer_head[3]");
    }

    #[test]
    fn unknown_loss_names_are_rejected() {
        let s = sample(16);
        assert!(matches!(Loss::by_name("hinge", &s, 6), Err(Error::UnsupportedLoss(_))));
        for name in Loss::NAMES {
            Loss::by_name(name, &s, 6).unwrap();
        }
    }

    #[test]
    fn sampling_frequencies_match_probabilities() {
        let cfg = tiny_config(2, 2, 1, Mode::Factored);
        let p = init_params(&cfg, 13, 0.9).unwrap();
        let s = sample(3);
        let outputs = all_outputs(2, 2, 1);
        let probs: Vec<f64> = outputs.iter().map(|y| total_logprob(&p, &s, y).exp()).collect();
        let mut counts = vec![0usize; outputs.len()];
        let mut rng = rng::from_seed(99);
        let n = 100_000;
        for _ in 0..n {
            let (y, _) = sample_output(&p, &s, &mut rng, 1.0);
            counts[outputs.iter().position(|o| *o == y).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sd + 1.0, "{c} vs {}", n as f64 * p);
        }
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let p = init_params(&PolicyConfig::default(), 1, 0.1).unwrap();
        assert!(matches!(grad(&p, &sample(3), &Loss::Zero), Err(Error::Config(_))));
    }
}
