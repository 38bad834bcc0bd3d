//! Run configuration, the staged clean and adversarial pipelines, evaluation
//! and report rendering.
//!
//! A run directory looks like
//!
//! ```text
//! <out>/run.json                 config and data hashes of this directory
//! <out>/config.json              resolved configuration
//! <out>/data/{train,test}.jsonl  generated splits (+ .meta.json), rule.json
//! <out>/<flavor>/sft.json        checkpoints, flavor = clean | adversarial
//! <out>/<flavor>/grpo.json
//! <out>/<flavor>/*.jsonl         training logs
//! <out>/<flavor>/eval.json       clean and attacked evaluation
//! <out>/<flavor>/certify.json    smoothing certificates
//! <out>/report.{tsv,txt}, curves_attack.tsv, curves_certified.tsv
//! <out>/error.json               written when a stage fails
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attacks::{self, AttackKind, Curve, SweepConfig, SweepRow};
use crate::checkpoint::{self, Manifest};
use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::format::Codec;
use crate::grpo::{self, GrpoAdvConfig, GrpoConfig, GrpoContext};
use crate::hash::sha256_hex;
use crate::policy::{self, init_params, Mode, ParamSet, PolicyConfig};
use crate::reward::{RewardConfig, RewardFn};
use crate::sft::{self, AdvConfig, SftConfig};
use crate::smoothing::{self, Certificate, SmoothingConfig};
use crate::synthenv::{self, PlantedRule, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineKind {
    Clean,
    Adversarial,
    Both,
}

impl PipelineKind {
    pub fn flavors(self) -> Vec<Flavor> {
        match self {
            PipelineKind::Clean => vec![Flavor::Clean],
            PipelineKind::Adversarial => vec![Flavor::Adversarial],
            PipelineKind::Both => vec![Flavor::Clean, Flavor::Adversarial],
        }
    }
}

impl FromStr for PipelineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(PipelineKind::Clean),
            "adversarial" => Ok(PipelineKind::Adversarial),
            "both" => Ok(PipelineKind::Both),
            _ => Err(Error::Config(format!("unknown pipeline {s:?}"))),
        }
    }
}

/// One training recipe: plain SFT then GRPO, or their adversarial variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Flavor {
    Clean,
    Adversarial,
}

impl Flavor {
    pub fn dir(self) -> &'static str {
        match self {
            Flavor::Clean => "clean",
            Flavor::Adversarial => "adversarial",
        }
    }

    /// Row label in reports.
    pub fn method(self) -> &'static str {
        match self {
            Flavor::Clean => "clean-ft",
            Flavor::Adversarial => "adv-ft",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Gendata,
    Sft,
    Grpo,
    Evaluate,
    Certify,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Gendata, Stage::Sft, Stage::Grpo, Stage::Evaluate, Stage::Certify, Stage::Report];
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}; expected one of gendata, sft, grpo, evaluate, certify, report")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Gendata => "gendata",
            Stage::Sft => "sft",
            Stage::Grpo => "grpo",
            Stage::Evaluate => "evaluate",
            Stage::Certify => "certify",
            Stage::Report => "report",
        })
    }
}

/// Policy settings not implied by the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySettings {
    pub hidden: usize,
    pub mode: Mode,
    pub temperature: f64,
    pub init_scale: f64,
}

impl Default for PolicySettings {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self { hidden: p.hidden, mode: p.mode, temperature: p.temperature, init_scale: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Weight modalities by sample count in the overall accuracy instead of
    /// averaging them equally.
    pub sample_weighted: bool,
    /// ε of the per-modality PGD row in reports.
    pub report_epsilon: f64,
    /// Radii of the certified-accuracy curve.
    pub radii: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { sample_weighted: false, report_epsilon: 0.01, radii: vec![0.0, 0.002, 0.004, 0.006, 0.008, 0.01] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub pipeline: PipelineKind,
    pub task: TaskSpec,
    pub reward: RewardConfig,
    pub policy: PolicySettings,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub attack: SweepConfig,
    pub smoothing: SmoothingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out: PathBuf::from("runs/default"),
            pipeline: PipelineKind::Both,
            task: TaskSpec::default(),
            reward: RewardConfig::default(),
            policy: PolicySettings::default(),
            sft: SftConfig { adv: Some(AdvConfig::default()), ..SftConfig::default() },
            grpo: GrpoConfig { adv: Some(GrpoAdvConfig::default()), ..GrpoConfig::default() },
            attack: SweepConfig::default(),
            smoothing: SmoothingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse flat dotted-key text (`grpo.k = 8`) over the defaults. Unknown
    /// keys and type mismatches are configuration errors.
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut given = BTreeMap::new();
        flatten_toml("", &toml::Value::Table(table), &mut given);
        let mut base = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let mut known = BTreeSet::new();
        flatten_json("", &base, &mut known);
        for (key, value) in given {
            if !known.contains(&key) {
                return Err(Error::Config(format!("unknown configuration key `{key}`")));
            }
            let json = toml_to_json(&value).ok_or_else(|| Error::Config(format!("unsupported value for `{key}`")))?;
            set_path(&mut base, &key, json);
        }
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `default` or a path to a configuration file.
    pub fn load(spec: &str) -> Result<RunConfig> {
        if spec == "default" {
            return Ok(RunConfig::default());
        }
        let text = fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
        RunConfig::from_toml_str(&text)
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            dim: self.task.dim,
            questions: self.task.questions,
            choices: self.task.choices,
            vocab: self.task.vocab,
            max_trace: self.task.max_trace,
            hidden: self.policy.hidden,
            mode: self.policy.mode,
            temperature: self.policy.temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.reward.validate(self.task.max_trace)?;
        self.policy_config().validate()?;
        if !(self.policy.init_scale >= 0.0 && self.policy.init_scale.is_finite()) {
            return Err(Error::Config("policy.init_scale must be >= 0".into()));
        }
        self.sft.validate()?;
        self.grpo.validate()?;
        if self.pipeline != PipelineKind::Clean && (self.sft.adv.is_none() || self.grpo.adv.is_none()) {
            return Err(Error::Config("the adversarial pipeline needs sft.adv and grpo.adv settings".into()));
        }
        self.attack.validate()?;
        self.smoothing.validate()?;
        if self.attack.kinds.contains(&AttackKind::Pgd) && !self.attack.epsilons.contains(&self.eval.report_epsilon) {
            return Err(Error::Config(format!("eval.report_epsilon {} is not on the attack.epsilons grid", self.eval.report_epsilon)));
        }
        if self.eval.radii.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::Config("eval.radii must be >= 0".into()));
        }
        Ok(())
    }

    /// Hash of everything except the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

fn flatten_toml(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_toml(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn flatten_json(prefix: &str, v: &Value, out: &mut BTreeSet<String>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string());
        }
    }
}

fn toml_to_json(v: &toml::Value) -> Option<Value> {
    Some(match v {
        toml::Value::String(s) => Value::String(s.clone()),
        toml::Value::Integer(i) => Value::from(*i),
        toml::Value::Float(f) => Value::from(serde_json::Number::from_f64(*f)?),
        toml::Value::Boolean(b) => Value::Bool(*b),
        toml::Value::Array(a) => Value::Array(a.iter().map(toml_to_json).collect::<Option<_>>()?),
        toml::Value::Table(_) | toml::Value::Datetime(_) => return None,
    })
}

fn set_path(root: &mut Value, key: &str, value: Value) {
    let mut node = root;
    for part in key.split('.') {
        node = node.get_mut(part).expect("known key");
    }
    *node = value;
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Layout {
        Layout { root: root.into() }
    }
    pub fn run_manifest(&self) -> PathBuf {
        self.root.join("run.json")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn train(&self) -> PathBuf {
        self.root.join("data/train.jsonl")
    }
    pub fn test(&self) -> PathBuf {
        self.root.join("data/test.jsonl")
    }
    pub fn rule(&self) -> PathBuf {
        self.root.join("data/rule.json")
    }
    pub fn flavor(&self, f: Flavor) -> PathBuf {
        self.root.join(f.dir())
    }
    pub fn sft_checkpoint(&self, f: Flavor) -> PathBuf {
        self.flavor(f).join("sft.json")
    }
    pub fn grpo_checkpoint(&self, f: Flavor) -> PathBuf {
        self.flavor(f).join("grpo.json")
    }
    pub fn eval(&self, f: Flavor) -> PathBuf {
        self.flavor(f).join("eval.json")
    }
    pub fn certify(&self, f: Flavor) -> PathBuf {
        self.flavor(f).join("certify.json")
    }
    pub fn error(&self) -> PathBuf {
        self.root.join("error.json")
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::decode(path, e))?;
    write(path, &(text + "\n"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::decode(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::decode(path, e))?);
        text.push('\n');
    }
    write(path, &text)
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunManifest {
    config_hash: String,
    data_hash: String,
}

/// Accuracy per modality and overall. Modalities without samples are `None`
/// and do not enter the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityAccuracy {
    pub per_modality: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    pub overall: f64,
}

/// Unweighted mean of per-modality accuracies.
pub fn overall_accuracy(per_modality: &[f64]) -> f64 {
    if per_modality.is_empty() {
        return 0.0;
    }
    per_modality.iter().sum::<f64>() / per_modality.len() as f64
}

/// Aggregate per-sample correctness flags.
pub fn aggregate(correct: &[bool], samples: &[Sample], modalities: usize, sample_weighted: bool) -> ModalityAccuracy {
    let mut hits = vec![0usize; modalities];
    let mut counts = vec![0usize; modalities];
    for (&c, s) in correct.iter().zip(samples) {
        if s.modality < modalities {
            counts[s.modality] += 1;
            hits[s.modality] += c as usize;
        }
    }
    let per_modality: Vec<Option<f64>> =
        hits.iter().zip(&counts).map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64)).collect();
    let overall = if sample_weighted {
        let n: usize = counts.iter().sum();
        if n == 0 {
            0.0
        } else {
            hits.iter().sum::<usize>() as f64 / n as f64
        }
    } else {
        overall_accuracy(&per_modality.iter().flatten().copied().collect::<Vec<_>>())
    };
    ModalityAccuracy { per_modality, counts, overall }
}

fn check_compatible(params: &ParamSet, test: &[Sample]) -> Result<()> {
    let c = &params.config;
    for (i, s) in test.iter().enumerate() {
        if s.image.len() != c.dim || s.choices != c.choices || s.question >= c.questions {
            return Err(Error::Config(format!(
                "test sample {i} (dim {}, {} choices, question {}) does not fit the policy (dim {}, {} choices, {} questions)",
                s.image.len(),
                s.choices,
                s.question,
                c.dim,
                c.choices,
                c.questions
            )));
        }
    }
    Ok(())
}

/// Greedy-decode every test sample; malformed outputs count as wrong.
pub fn clean_correct(params: &ParamSet, test: &[Sample]) -> Result<Vec<bool>> {
    check_compatible(params, test)?;
    let c = &params.config;
    Ok(test
        .iter()
        .map(|s| {
            let y = policy::greedy(params, s);
            y.validate(c.vocab, c.choices, c.max_trace).is_ok() && y.answer == s.truth
        })
        .collect())
}

pub fn evaluate_clean(params: &ParamSet, test: &[Sample], modalities: usize, sample_weighted: bool) -> Result<ModalityAccuracy> {
    Ok(aggregate(&clean_correct(params, test)?, test, modalities, sample_weighted))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackEval {
    pub curves: Vec<Curve>,
    /// Per-modality accuracy under PGD at the report ε.
    pub robust: Option<ModalityAccuracy>,
    pub rows: Vec<SweepRow>,
}

/// Accuracy against ground truth at every ε of the sweep, aggregated like
/// clean accuracy, and AUA per attack.
pub fn evaluate_under_attack(
    params: &ParamSet,
    test: &[Sample],
    sweep: &SweepConfig,
    report_epsilon: f64,
    modalities: usize,
    sample_weighted: bool,
) -> Result<AttackEval> {
    check_compatible(params, test)?;
    if sweep.kinds.is_empty() {
        return Ok(AttackEval { curves: Vec::new(), robust: None, rows: Vec::new() });
    }
    let res = attacks::sweep(params, test, sweep)?;
    let cell = |kind: AttackKind, eps: f64| -> ModalityAccuracy {
        let mut correct = vec![false; test.len()];
        for r in res.rows.iter().filter(|r| r.attack == kind && r.epsilon == eps) {
            correct[r.sample] = r.correct;
        }
        aggregate(&correct, test, modalities, sample_weighted)
    };
    let mut curves = Vec::new();
    for &kind in &sweep.kinds {
        let points: Vec<(f64, f64)> = sweep.epsilons.iter().map(|&e| (e, cell(kind, e).overall)).collect();
        curves.push(Curve { attack: kind, aua: attacks::aua(&points)?, points });
    }
    let robust = sweep.kinds.contains(&AttackKind::Pgd).then(|| cell(AttackKind::Pgd, report_epsilon));
    Ok(AttackEval { curves, robust, rows: res.rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub data_hash: String,
    pub seed: u64,
}

/// Evaluation of one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub clean: ModalityAccuracy,
    pub robust: Option<ModalityAccuracy>,
    pub report_epsilon: f64,
    pub curves: Vec<Curve>,
    /// `(radius, certified accuracy)`.
    pub certified: Vec<(f64, f64)>,
    /// Samples with a positive certified radius.
    pub certified_count: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EvalRecord {
    provenance: Provenance,
    clean: ModalityAccuracy,
    robust: Option<ModalityAccuracy>,
    report_epsilon: f64,
    curves: Vec<Curve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CertRow {
    sample: usize,
    prediction: Option<usize>,
    truth: usize,
    p_lower: f64,
    radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CertifyRecord {
    provenance: Provenance,
    sigma: f64,
    certified_count: usize,
    curve: Vec<(f64, f64)>,
    rows: Vec<CertRow>,
}

/// Where the pipeline is and what it produced.
pub struct Pipeline<'a> {
    pub config: &'a RunConfig,
    pub layout: Layout,
    config_hash: String,
    log: Box<dyn FnMut(&str) + 'a>,
}

impl<'a> Pipeline<'a> {
    pub fn new(config: &'a RunConfig) -> Result<Pipeline<'a>> {
        config.validate()?;
        Ok(Pipeline { config, layout: Layout::new(&config.out), config_hash: config.hash(), log: Box::new(|_| {}) })
    }

    /// Receive one line per stage step.
    pub fn with_log(mut self, log: impl FnMut(&str) + 'a) -> Self {
        self.log = Box::new(log);
        self
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Run `stages` in order. A failure writes `error.json` and returns the
    /// error.
    pub fn run(&mut self, stages: &[Stage]) -> Result<Vec<EvalReport>> {
        let _ = fs::remove_file(self.layout.error());
        let mut reports = Vec::new();
        for &stage in stages {
            (self.log)(&format!("stage {stage}"));
            match self.run_stage(stage) {
                Ok(Some(r)) => reports = r,
                Ok(None) => {}
                Err(e) => {
                    let record = serde_json::json!({
                        "stage": stage.to_string(),
                        "kind": e.kind(),
                        "exit_code": e.exit_code(),
                        "message": e.to_string(),
                    });
                    let _ = write_json(&self.layout.error(), &record);
                    return Err(e);
                }
            }
        }
        Ok(reports)
    }

    /// Run from `from` through the report.
    pub fn run_from(&mut self, from: Stage) -> Result<Vec<EvalReport>> {
        let stages: Vec<Stage> = Stage::ALL.into_iter().filter(|s| *s >= from).collect();
        self.run(&stages)
    }

    fn run_stage(&mut self, stage: Stage) -> Result<Option<Vec<EvalReport>>> {
        let flavors = self.config.pipeline.flavors();
        match stage {
            Stage::Gendata => {
                self.gendata()?;
            }
            Stage::Sft => {
                let (train, _) = self.load_data()?;
                for f in flavors {
                    self.sft(f, &train.samples)?;
                }
            }
            Stage::Grpo => {
                let (train, _) = self.load_data()?;
                for f in flavors {
                    self.grpo(f, &train.samples)?;
                }
            }
            Stage::Evaluate => {
                let (_, test) = self.load_data()?;
                for f in flavors {
                    self.evaluate(f, &test.samples)?;
                }
            }
            Stage::Certify => {
                let (_, test) = self.load_data()?;
                for f in flavors {
                    self.certify(f, &test.samples)?;
                }
            }
            Stage::Report => return self.report().map(Some),
        }
        Ok(None)
    }

    pub fn gendata(&mut self) -> Result<(Dataset, Dataset)> {
        let cfg = self.config;
        let rule = synthenv::make_rule(&cfg.task, cfg.seed)?;
        let (train, test) = synthenv::gen_dataset(&rule, &cfg.task, cfg.seed)?;
        fs::create_dir_all(self.layout.root.join("data")).map_err(|e| Error::io(&self.layout.root, e))?;
        rule.save(&self.layout.rule())?;
        train.save(&self.layout.train())?;
        test.save(&self.layout.test())?;
        write_json(&self.layout.config(), cfg)?;
        write_json(
            &self.layout.run_manifest(),
            &RunManifest { config_hash: self.config_hash.clone(), data_hash: train.spec_hash.clone() },
        )?;
        (self.log)(&format!("  {} train / {} test samples", train.len(), test.len()));
        Ok((train, test))
    }

    fn run_manifest(&self) -> Result<RunManifest> {
        let m: RunManifest = read_json(&self.layout.run_manifest())?;
        if m.config_hash != self.config_hash {
            return Err(Error::Config(format!(
                "{} was produced under configuration {}, not the current {}; rerun from gendata or use another --out",
                self.layout.root.display(),
                &m.config_hash[..12],
                &self.config_hash[..12]
            )));
        }
        Ok(m)
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let m = self.run_manifest()?;
        let train = Dataset::load(&self.layout.train(), Split::Train)?;
        let test = Dataset::load(&self.layout.test(), Split::Test)?;
        for d in [&train, &test] {
            if d.spec_hash != m.data_hash {
                return Err(Error::Config(format!("dataset hash {} does not match the run's {}", d.spec_hash, m.data_hash)));
            }
        }
        let _rule = PlantedRule::load(&self.layout.rule())?;
        let t = &self.config.task;
        train.validate(t.dim, t.choices, t.vocab, t.modalities)?;
        test.validate(t.dim, t.choices, t.vocab, t.modalities)?;
        Ok((train, test))
    }

    fn manifest(&self, stage: String, data_hash: &str) -> Manifest {
        Manifest {
            format: checkpoint::FORMAT.into(),
            stage,
            seed: self.config.seed,
            config_hash: self.config_hash.clone(),
            data_hash: data_hash.to_string(),
            policy: self.config.policy_config(),
        }
    }

    /// Load a checkpoint written by this run, refusing hash mismatches.
    pub fn load_checkpoint(&self, path: &Path) -> Result<(ParamSet, String)> {
        let m = self.run_manifest()?;
        let (params, manifest, hash) = checkpoint::load(path)?;
        if manifest.config_hash != self.config_hash {
            return Err(Error::Config(format!("{} was trained under a different configuration", path.display())));
        }
        if manifest.data_hash != m.data_hash {
            return Err(Error::Config(format!("{} was trained on different data", path.display())));
        }
        if manifest.policy != self.config.policy_config() {
            return Err(Error::Config(format!("{} has a different policy shape", path.display())));
        }
        Ok((params, hash))
    }

    fn initial_params(&self, train: &[Sample]) -> Result<ParamSet> {
        let mut p = init_params(&self.config.policy_config(), self.config.seed, self.config.policy.init_scale)?;
        p.fit_input_norm(train.iter().map(|s| s.image.as_slice()));
        Ok(p)
    }

    pub fn sft(&mut self, flavor: Flavor, train: &[Sample]) -> Result<ParamSet> {
        let cfg = self.config;
        let data_hash = self.run_manifest()?.data_hash;
        let init = self.initial_params(train)?;
        let outcome = match flavor {
            Flavor::Clean => sft::train_sft(&init, train, &cfg.sft, cfg.seed)?,
            Flavor::Adversarial => {
                let start = if cfg.sft.warm_start { sft::train_sft(&init, train, &cfg.sft, cfg.seed)?.params } else { init };
                sft::train_at_sft(&start, train, &cfg.sft, cfg.seed)?
            }
        };
        let path = self.layout.sft_checkpoint(flavor);
        let hash = checkpoint::save(&path, &outcome.params, &self.manifest(format!("{}/sft", flavor.dir()), &data_hash))?;
        write_jsonl(&self.layout.flavor(flavor).join("sft_log.jsonl"), &outcome.log)?;
        let last = outcome.log.last().map(|s| s.loss).unwrap_or(f64::NAN);
        (self.log)(&format!("  {} sft: {} steps, final loss {last:.4}, checkpoint {}", flavor.dir(), outcome.log.len(), &hash[..12]));
        Ok(outcome.params)
    }

    pub fn grpo(&mut self, flavor: Flavor, train: &[Sample]) -> Result<ParamSet> {
        let cfg = self.config;
        let data_hash = self.run_manifest()?.data_hash;
        let (p_sft, _) = self.load_checkpoint(&self.layout.sft_checkpoint(flavor))?;
        let gcfg = match flavor {
            Flavor::Clean => GrpoConfig { adv: None, ..cfg.grpo.clone() },
            Flavor::Adversarial => cfg.grpo.clone(),
        };
        let reward = RewardFn::new(cfg.reward.clone(), Codec::new(cfg.task.vocab, cfg.task.choices)?, cfg.task.max_trace);
        let ctx = GrpoContext { config: &gcfg, reward: &reward, params_ref: &p_sft, seed: cfg.seed };
        let outcome = grpo::train_grpo(&p_sft, train, &ctx)?;
        let path = self.layout.grpo_checkpoint(flavor);
        let hash = checkpoint::save(&path, &outcome.params, &self.manifest(format!("{}/grpo", flavor.dir()), &data_hash))?;
        write_jsonl(&self.layout.flavor(flavor).join("grpo_log.jsonl"), &outcome.log)?;
        if let (Some(a), Some(b)) = (outcome.log.first(), outcome.log.last()) {
            (self.log)(&format!(
                "  {} grpo: reward EMA {:.3} -> {:.3}, checkpoint {}",
                flavor.dir(),
                a.reward_ema,
                b.reward_ema,
                &hash[..12]
            ));
        }
        Ok(outcome.params)
    }

    fn provenance(&self, checkpoint_hash: String) -> Result<Provenance> {
        Ok(Provenance {
            config_hash: self.config_hash.clone(),
            checkpoint_hash,
            data_hash: self.run_manifest()?.data_hash,
            seed: self.config.seed,
        })
    }

    pub fn evaluate(&mut self, flavor: Flavor, test: &[Sample]) -> Result<()> {
        let cfg = self.config;
        let (params, hash) = self.load_checkpoint(&self.layout.grpo_checkpoint(flavor))?;
        let m = cfg.task.modalities;
        let clean = evaluate_clean(&params, test, m, cfg.eval.sample_weighted)?;
        let attacked = evaluate_under_attack(&params, test, &cfg.attack, cfg.eval.report_epsilon, m, cfg.eval.sample_weighted)?;
        attacks::write_table(&attacked.rows, &self.layout.flavor(flavor).join("attack.tsv"))?;
        let record = EvalRecord {
            provenance: self.provenance(hash)?,
            clean,
            robust: attacked.robust,
            report_epsilon: cfg.eval.report_epsilon,
            curves: attacked.curves,
        };
        (self.log)(&format!(
            "  {} clean accuracy {:.4}, PGD@{} accuracy {}",
            flavor.dir(),
            record.clean.overall,
            cfg.eval.report_epsilon,
            record.robust.as_ref().map(|r| format!("{:.4}", r.overall)).unwrap_or_else(|| "-".into())
        ));
        write_json(&self.layout.eval(flavor), &record)
    }

    pub fn certify(&mut self, flavor: Flavor, test: &[Sample]) -> Result<()> {
        let cfg = self.config;
        let (params, hash) = self.load_checkpoint(&self.layout.grpo_checkpoint(flavor))?;
        check_compatible(&params, test)?;
        let certs = smoothing::certify_all(&params, test, &cfg.smoothing, cfg.seed)?;
        let record = certify_record(self.provenance(hash)?, &certs, test, cfg);
        (self.log)(&format!("  {} certified {}/{} samples at sigma {}", flavor.dir(), record.certified_count, test.len(), cfg.smoothing.sigma));
        write_json(&self.layout.certify(flavor), &record)
    }

    /// Assemble reports from the evaluation records and render them. Records
    /// whose checkpoint hash no longer matches the checkpoint are refused.
    pub fn report(&mut self) -> Result<Vec<EvalReport>> {
        self.run_manifest()?;
        let mut reports = Vec::new();
        for f in self.config.pipeline.flavors() {
            let current = file_hash(&self.layout.grpo_checkpoint(f))?;
            let eval: EvalRecord = read_json(&self.layout.eval(f))?;
            let cert: CertifyRecord = read_json(&self.layout.certify(f))?;
            for (name, p) in [("evaluation", &eval.provenance), ("certification", &cert.provenance)] {
                if p.checkpoint_hash != current || p.config_hash != self.config_hash {
                    return Err(Error::Config(format!(
                        "{} {name} record is stale (checkpoint or configuration changed); rerun from evaluate",
                        f.dir()
                    )));
                }
            }
            reports.push(EvalReport {
                method: f.method().to_string(),
                clean: eval.clean,
                robust: eval.robust,
                report_epsilon: eval.report_epsilon,
                curves: eval.curves,
                certified: cert.curve,
                certified_count: cert.certified_count,
                provenance: eval.provenance,
            });
        }
        let files = render_report(&reports, &self.layout.root)?;
        for p in files {
            (self.log)(&format!("  wrote {}", p.display()));
        }
        Ok(reports)
    }
}

fn certify_record(provenance: Provenance, certs: &[Certificate], test: &[Sample], cfg: &RunConfig) -> CertifyRecord {
    let rows = certs
        .iter()
        .zip(test)
        .enumerate()
        .map(|(i, (c, s))| CertRow { sample: i, prediction: c.prediction, truth: s.truth, p_lower: c.p_lower, radius: c.radius })
        .collect();
    CertifyRecord {
        provenance,
        sigma: cfg.smoothing.sigma,
        certified_count: certs.iter().filter(|c| c.radius > 0.0).count(),
        curve: smoothing::certified_accuracy(certs, test, &cfg.eval.radii),
        rows,
    }
}

/// Load a checkpoint for evaluation on `test`, refusing checkpoints trained
/// on other data. Returns the parameters and the file hash.
pub fn load_for_eval(path: &Path, test: &Dataset) -> Result<(ParamSet, String)> {
    let (params, manifest, hash) = checkpoint::load(path)?;
    if manifest.data_hash != test.spec_hash {
        return Err(Error::Config(format!(
            "{} was trained on data {}, the test set is {}",
            path.display(),
            manifest.data_hash,
            test.spec_hash
        )));
    }
    check_compatible(&params, &test.samples)?;
    Ok((params, hash))
}

/// Evaluate an arbitrary checkpoint on `test`: clean accuracy, the attack
/// sweep and certification. The checkpoint must have been trained on the
/// same data.
pub fn evaluate_checkpoint(cfg: &RunConfig, path: &Path, test: &Dataset, method: &str) -> Result<(EvalReport, Vec<SweepRow>)> {
    let (params, hash) = load_for_eval(path, test)?;
    let m = cfg.task.modalities;
    let clean = evaluate_clean(&params, &test.samples, m, cfg.eval.sample_weighted)?;
    let attacked = evaluate_under_attack(&params, &test.samples, &cfg.attack, cfg.eval.report_epsilon, m, cfg.eval.sample_weighted)?;
    let certs = smoothing::certify_all(&params, &test.samples, &cfg.smoothing, cfg.seed)?;
    let provenance =
        Provenance { config_hash: cfg.hash(), checkpoint_hash: hash, data_hash: test.spec_hash.clone(), seed: cfg.seed };
    let cert = certify_record(provenance.clone(), &certs, &test.samples, cfg);
    let report = EvalReport {
        method: method.to_string(),
        clean,
        robust: attacked.robust,
        report_epsilon: cfg.eval.report_epsilon,
        curves: attacked.curves,
        certified: cert.curve,
        certified_count: cert.certified_count,
        provenance,
    };
    Ok((report, attacked.rows))
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

/// Write `report.tsv`, `report.txt`, `curves_attack.tsv` and
/// `curves_certified.tsv` into `dir`. Rows are methods (clean evaluation,
/// then PGD at the report ε); columns are the modalities and the overall
/// accuracy, followed by AUA per attack when a sweep was run.
pub fn render_report(reports: &[EvalReport], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::Config("no evaluation reports to render".into()));
    }
    let modalities = reports.iter().map(|r| r.clean.per_modality.len()).max().unwrap_or(0);
    let kinds: Vec<AttackKind> = {
        let mut k: Vec<AttackKind> = reports.iter().flat_map(|r| r.curves.iter().map(|c| c.attack)).collect();
        k.sort();
        k.dedup();
        k
    };
    let mut header: Vec<String> = vec!["method".into()];
    header.extend((0..modalities).map(|m| format!("mod{m}")));
    header.push("overall".into());
    header.extend(kinds.iter().map(|k| format!("aua_{k}")));
    let mut table: Vec<Vec<String>> = Vec::new();
    for r in reports {
        let mut row = vec![r.method.clone()];
        row.extend((0..modalities).map(|m| pct(r.clean.per_modality.get(m).copied().flatten())));
        row.push(pct(Some(r.clean.overall)));
        for k in &kinds {
            row.push(pct(r.curves.iter().find(|c| c.attack == *k).map(|c| c.aua)));
        }
        table.push(row);
        if let Some(rob) = &r.robust {
            let mut row = vec![format!("{} pgd@{}", r.method, r.report_epsilon)];
            row.extend((0..modalities).map(|m| pct(rob.per_modality.get(m).copied().flatten())));
            row.push(pct(Some(rob.overall)));
            row.extend(kinds.iter().map(|_| "-".to_string()));
            table.push(row);
        }
    }

    let mut tsv = header.join("\t") + "\n";
    for row in &table {
        tsv.push_str(&(row.join("\t") + "\n"));
    }

    let widths: Vec<usize> =
        (0..header.len()).map(|j| table.iter().map(|r| r[j].len()).chain([header[j].len()]).max().unwrap_or(0)).collect();
    let line = |cells: &[String]| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(j, c)| if j == 0 { format!("{:<w$}", c, w = widths[j]) } else { format!("{:>w$}", c, w = widths[j]) })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
            + "\n"
    };
    let mut txt = String::from("Accuracy (%) by modality\n\n");
    txt.push_str(&line(&header));
    txt.push_str(&(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ") + "\n"));
    for row in &table {
        txt.push_str(&line(row));
    }
    txt.push('\n');
    for r in reports {
        txt.push_str(&format!(
            "{}: certified {} samples; config {} checkpoint {} data {} seed {}\n",
            r.method,
            r.certified_count,
            r.provenance.config_hash,
            r.provenance.checkpoint_hash,
            r.provenance.data_hash,
            r.provenance.seed
        ));
    }

    let mut attack_curves = String::from("method\tattack\tepsilon\taccuracy\n");
    let mut cert_curves = String::from("method\tradius\tcertified_accuracy\n");
    for r in reports {
        for c in &r.curves {
            for (e, a) in &c.points {
                attack_curves.push_str(&format!("{}\t{}\t{}\t{:.6}\n", r.method, c.attack, e, a));
            }
        }
        for (rad, a) in &r.certified {
            cert_curves.push_str(&format!("{}\t{}\t{:.6}\n", r.method, rad, a));
        }
    }

    let files = [
        (dir.join("report.tsv"), tsv),
        (dir.join("report.txt"), txt),
        (dir.join("curves_attack.tsv"), attack_curves),
        (dir.join("curves_certified.tsv"), cert_curves),
    ];
    let mut written = Vec::new();
    for (path, text) in files {
        write(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn unweighted_overall_reproduces_table_arithmetic() {
        let per = [58.0, 76.0, 89.0, 80.0, 78.0, 87.0, 72.0, 84.0];
        assert!((overall_accuracy(&per) - 78.0).abs() < 1e-12);
    }

    fn sample(modality: usize, truth: usize) -> Sample {
        Sample { image: vec![0.0], question: 0, choices: 2, truth, modality, evidence: BTreeSet::new() }
    }

    #[test]
    fn aggregation_modes() {
        let s = vec![sample(0, 0), sample(0, 0), sample(0, 0), sample(1, 0)];
        let correct = [true, true, false, false];
        let a = aggregate(&correct, &s, 3, false);
        assert_eq!(a.per_modality, vec![Some(2.0 / 3.0), Some(0.0), None]);
        assert!((a.overall - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(aggregate(&correct, &s, 3, true).overall, 0.5);
    }

    #[test]
    fn config_keys() {
        let cfg = RunConfig::from_toml_str("grpo.k = 4\nsft.adv.epsilon = 0.02\n[attack]\nkinds = [\"pgd\"]\n").unwrap();
        assert_eq!(cfg.grpo.k, 4);
        assert_eq!(cfg.sft.adv.as_ref().unwrap().epsilon, 0.02);
        assert_eq!(cfg.attack.kinds, vec![AttackKind::Pgd]);
        assert!(matches!(RunConfig::from_toml_str("grpo.kk = 4"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("grpo.k = \"x\""), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("grpo.k = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("grpo = 1"), Err(Error::Config(_))));
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn config_hash_ignores_out_dir() {
        let a = RunConfig::default();
        let b = RunConfig { out: "elsewhere".into(), ..a.clone() };
        let c = RunConfig { seed: 7, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    fn report(method: &str, curves: Vec<Curve>) -> EvalReport {
        let acc = ModalityAccuracy { per_modality: vec![Some(0.5); 8], counts: vec![1; 8], overall: 0.5 };
        EvalReport {
            method: method.into(),
            clean: acc.clone(),
            robust: Some(acc),
            report_epsilon: 0.01,
            curves,
            certified: vec![(0.0, 0.5)],
            certified_count: 4,
            provenance: Provenance { config_hash: "c".into(), checkpoint_hash: "k".into(), data_hash: "d".into(), seed: 1 },
        }
    }

    #[test]
    fn report_shape_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let curve = Curve { attack: AttackKind::Pgd, points: vec![(0.0, 0.5), (0.01, 0.25)], aua: 0.375 };
        let reports = [report("a", vec![curve.clone()]), report("b", vec![curve])];
        render_report(&reports, dir.path()).unwrap();
        let tsv = fs::read_to_string(dir.path().join("report.tsv")).unwrap();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 1 + 4);
        let head: Vec<&str> = lines[0].split('\t').collect();
        assert_eq!(head.len(), 1 + 8 + 1 + 1);
        assert_eq!(head[9], "overall");
        let first = fs::read(dir.path().join("report.txt")).unwrap();
        render_report(&reports, dir.path()).unwrap();
        assert_eq!(first, fs::read(dir.path().join("report.txt")).unwrap());

        let bare = [report("a", Vec::new())];
        render_report(&bare, dir.path()).unwrap();
        let tsv = fs::read_to_string(dir.path().join("report.tsv")).unwrap();
        assert!(!tsv.contains("aua_"));
    }

    #[test]
    fn incompatible_test_set_is_a_config_error() {
        let p = init_params(&PolicyConfig::default(), 1, 0.1).unwrap();
        let s = vec![sample(0, 0)];
        assert!(matches!(evaluate_clean(&p, &s, 8, false), Err(Error::Config(_))));
    }
}
