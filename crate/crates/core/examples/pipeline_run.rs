//! The whole pipeline on a reduced configuration, written to a directory.
//!
//! `cargo run --release --example pipeline_run -- runs/small`

use vqalab::harness::{Pipeline, RunConfig, Stage};

const SMALL: &str = r#"
seed = 7
task.counts = [80, 80, 80, 80, 80, 80, 80, 80]
grpo.iterations = 40
attack.kinds = ["fgsm", "pgd"]
smoothing.n_cert = 300
"#;

fn main() -> vqalab::Result<()> {
    let mut cfg = RunConfig::from_toml_str(SMALL)?;
    cfg.out = std::env::args().nth(1).unwrap_or_else(|| "runs/small".into()).into();
    let reports = Pipeline::new(&cfg)?.with_log(|l| println!("{l}")).run_from(Stage::Gendata)?;
    for r in &reports {
        let robust = r.robust.as_ref().map_or(f64::NAN, |x| x.overall);
        println!("{}: clean {:.4}, PGD@{} {:.4}", r.method, r.clean.overall, r.report_epsilon, robust);
    }
    println!("report written to {}", cfg.out.join("report.txt").display());
    Ok(())
}
