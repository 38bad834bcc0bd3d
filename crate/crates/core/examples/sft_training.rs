//! Clean and adversarial SFT on the default task, compared under PGD.

use vqalab::harness::{evaluate_clean, evaluate_under_attack, RunConfig};
use vqalab::policy::init_params;
use vqalab::sft::{train_at_sft, train_sft};
use vqalab::synthenv::{gen_dataset, make_rule};

fn main() -> vqalab::Result<()> {
    let cfg = RunConfig::default();
    let (train, test) = gen_dataset(&make_rule(&cfg.task, cfg.seed)?, &cfg.task, cfg.seed)?;
    let mut init = init_params(&cfg.policy_config(), cfg.seed, cfg.policy.init_scale)?;
    init.fit_input_norm(train.samples.iter().map(|s| s.image.as_slice()));

    let clean = train_sft(&init, &train.samples, &cfg.sft, cfg.seed)?;
    let adv = train_at_sft(&init, &train.samples, &cfg.sft, cfg.seed)?;
    let m = cfg.task.modalities;
    for (name, out) in [("sft", &clean), ("at-sft", &adv)] {
        let acc = evaluate_clean(&out.params, &test.samples, m, false)?.overall;
        let robust = evaluate_under_attack(&out.params, &test.samples, &cfg.attack, cfg.eval.report_epsilon, m, false)?;
        let pgd = robust.robust.map_or(f64::NAN, |r| r.overall);
        let last = out.log.last().map_or(f64::NAN, |s| s.loss);
        println!("{name:7} final loss {last:.4}  clean {acc:.4}  PGD@{} {pgd:.4}", cfg.eval.report_epsilon);
    }
    Ok(())
}
