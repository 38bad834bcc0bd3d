use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vqalab::attacks;
use vqalab::data::{Dataset, Split};
use vqalab::harness::{self, Layout, Pipeline, RunConfig, Stage};
use vqalab::smoothing;
use vqalab::{Error, Result};

#[derive(Parser)]
#[command(name = "vqalab", version, about = "Train, attack and certify structured-output VQA policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file, or `default`.
    #[arg(long, default_value = "default")]
    config: String,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Evaluate this checkpoint instead of the run's final ones.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted rule and the train/test splits.
    Gendata(Common),
    /// Supervised fine-tuning (adversarial for the adversarial pipeline).
    Sft(Common),
    /// Group-relative policy optimization from the SFT checkpoint.
    Grpo(Common),
    /// Attack sweep.
    Attack(WithCheckpoint),
    /// Randomized-smoothing certification.
    Certify(WithCheckpoint),
    /// Clean, attacked and certified evaluation.
    Evaluate(WithCheckpoint),
    /// Render report tables from evaluation records.
    Report(Common),
    /// Run every stage, or resume from `--stage`.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "gendata")]
        stage: String,
    },
}

fn config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stages(c: &Common, stages: &[Stage]) -> Result<()> {
    let cfg = config(c)?;
    let mut p = Pipeline::new(&cfg)?.with_log(|l| eprintln!("{l}"));
    p.run(stages)?;
    Ok(())
}

fn test_set(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::load(&Layout::new(&cfg.out).test(), Split::Test)
}

fn print_curves(report: &harness::EvalReport) {
    println!("clean accuracy\t{:.4}", report.clean.overall);
    for c in &report.curves {
        let pts: Vec<String> = c.points.iter().map(|(e, a)| format!("{e}:{a:.4}")).collect();
        println!("{}\taua {:.4}\t{}", c.attack, c.aua, pts.join(" "));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gendata(c) => stages(&c, &[Stage::Gendata]),
        Command::Sft(c) => stages(&c, &[Stage::Sft]),
        Command::Grpo(c) => stages(&c, &[Stage::Grpo]),
        Command::Report(c) => stages(&c, &[Stage::Report]),
        Command::Pipeline { common, stage } => {
            let from: Stage = stage.parse()?;
            let cfg = config(&common)?;
            let mut p = Pipeline::new(&cfg)?.with_log(|l| eprintln!("{l}"));
            let reports = p.run_from(from)?;
            for r in &reports {
                println!("{}\tclean {:.4}\trobust {}", r.method, r.clean.overall, r.robust.as_ref().map_or("-".into(), |x| format!("{:.4}", x.overall)));
            }
            Ok(())
        }
        Command::Attack(a) => match &a.checkpoint {
            None => stages(&a.common, &[Stage::Evaluate]),
            Some(path) => {
                let cfg = config(&a.common)?;
                let test = test_set(&cfg)?;
                let (params, _) = harness::load_for_eval(path, &test)?;
                let m = cfg.task.modalities;
                let res = harness::evaluate_under_attack(&params, &test.samples, &cfg.attack, cfg.eval.report_epsilon, m, cfg.eval.sample_weighted)?;
                let out = cfg.out.join("attack.tsv");
                std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io { path: cfg.out.clone(), source: e })?;
                attacks::write_table(&res.rows, &out)?;
                for c in &res.curves {
                    println!("{}\taua {:.4}", c.attack, c.aua);
                }
                eprintln!("wrote {}", out.display());
                Ok(())
            }
        },
        Command::Certify(a) => match &a.checkpoint {
            None => stages(&a.common, &[Stage::Certify]),
            Some(path) => {
                let cfg = config(&a.common)?;
                let test = test_set(&cfg)?;
                let (params, _) = harness::load_for_eval(path, &test)?;
                let certs = smoothing::certify_all(&params, &test.samples, &cfg.smoothing, cfg.seed)?;
                let mut text = String::from("sample\tprediction\ttruth\tp_lower\tradius\tabstain\n");
                for (i, (c, s)) in certs.iter().zip(&test.samples).enumerate() {
                    let pred = c.prediction.map_or("-".to_string(), |p| p.to_string());
                    text.push_str(&format!("{i}\t{pred}\t{}\t{:.6}\t{:.6e}\t{}\n", s.truth, c.p_lower, c.radius, c.abstained() as u8));
                }
                let out = cfg.out.join("certify.tsv");
                std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io { path: cfg.out.clone(), source: e })?;
                std::fs::write(&out, text).map_err(|e| Error::Io { path: out.clone(), source: e })?;
                let n = certs.iter().filter(|c| c.radius > 0.0).count();
                println!("certified {n}/{}", certs.len());
                Ok(())
            }
        },
        Command::Evaluate(a) => match &a.checkpoint {
            None => stages(&a.common, &[Stage::Evaluate, Stage::Certify]),
            Some(path) => {
                let cfg = config(&a.common)?;
                let test = test_set(&cfg)?;
                let method = path.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned());
                let (report, _) = harness::evaluate_checkpoint(&cfg, path, &test, &method)?;
                let files = harness::render_report(std::slice::from_ref(&report), &cfg.out.join(format!("eval-{method}")))?;
                print_curves(&report);
                for f in files {
                    eprintln!("wrote {}", f.display());
                }
                Ok(())
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
