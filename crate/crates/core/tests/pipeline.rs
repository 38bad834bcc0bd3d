use std::fs;
use std::path::Path;

use vqalab::harness::{Flavor, Layout, Pipeline, PipelineKind, RunConfig, Stage};
use vqalab::Error;

fn small(pipeline: &str, out: &Path) -> RunConfig {
    let text = format!(
        r#"
pipeline = "{pipeline}"
task.counts = [40, 40, 40, 40, 40, 40, 40, 40]
sft.epochs = 1
sft.batch_size = 32
grpo.iterations = 4
grpo.minibatch = 8
grpo.k = 4
attack.kinds = ["fgsm", "pgd"]
attack.epsilons = [0.0, 0.01, 0.02]
smoothing.n_cert = 200
smoothing.n_pred = 20
"#
    );
    let mut cfg = RunConfig::from_toml_str(&text).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

fn checkpoints(root: &Path) -> Vec<String> {
    let mut found = Vec::new();
    for f in ["clean", "adversarial"] {
        for stage in ["sft", "grpo"] {
            if root.join(f).join(format!("{stage}.json")).exists() {
                found.push(format!("{f}/{stage}"));
            }
        }
    }
    found
}

#[test]
fn clean_pipeline_writes_two_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small("clean", dir.path());
    let reports = Pipeline::new(&cfg).unwrap().run_from(Stage::Gendata).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].method, "clean-ft");
    assert_eq!(checkpoints(dir.path()), ["clean/sft", "clean/grpo"]);
    assert!(dir.path().join("report.tsv").exists());
}

#[test]
fn both_pipelines_write_four_checkpoints_and_one_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small("both", dir.path());
    assert_eq!(cfg.pipeline, PipelineKind::Both);
    let reports = Pipeline::new(&cfg).unwrap().run_from(Stage::Gendata).unwrap();
    assert_eq!(reports.iter().map(|r| r.method.as_str()).collect::<Vec<_>>(), ["clean-ft", "adv-ft"]);
    assert_eq!(checkpoints(dir.path()), ["clean/sft", "clean/grpo", "adversarial/sft", "adversarial/grpo"]);
    let table = fs::read_to_string(dir.path().join("report.tsv")).unwrap();
    let header = table.lines().next().unwrap();
    assert!(header.starts_with("method\t"));
    for r in &reports {
        assert!(r.clean.per_modality.iter().all(|a| a.is_some_and(|v| (0.0..=1.0).contains(&v))));
    }
}

#[test]
fn identical_configs_give_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        Pipeline::new(&small("both", d.path())).unwrap().run_from(Stage::Gendata).unwrap();
    }
    let la = Layout::new(a.path());
    let lb = Layout::new(b.path());
    let mut files = vec![la.train(), la.test(), a.path().join("report.tsv"), a.path().join("report.txt")];
    for f in [Flavor::Clean, Flavor::Adversarial] {
        files.extend([la.sft_checkpoint(f), la.grpo_checkpoint(f), la.eval(f), la.certify(f)]);
    }
    for fa in files {
        let rel = fa.strip_prefix(a.path()).unwrap();
        let fb = lb.root.join(rel);
        assert_eq!(fs::read(&fa).unwrap(), fs::read(&fb).unwrap(), "{}", rel.display());
    }
}

#[test]
fn resume_and_stale_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small("clean", dir.path());
    Pipeline::new(&cfg).unwrap().run_from(Stage::Gendata).unwrap();
    let before = fs::read(dir.path().join("report.tsv")).unwrap();
    Pipeline::new(&cfg).unwrap().run_from(Stage::Evaluate).unwrap();
    assert_eq!(before, fs::read(dir.path().join("report.tsv")).unwrap());

    // A different seed over the same directory is refused, with an error record.
    let other = RunConfig { seed: 7, ..cfg.clone() };
    let err = Pipeline::new(&other).unwrap().run(&[Stage::Report]).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(err.exit_code(), 2);
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(Layout::new(dir.path()).error()).unwrap()).unwrap();
    assert_eq!(record["exit_code"], 2);
}
