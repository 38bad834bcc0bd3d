//! FGSM, PGD and C&W over the ε grid against a clean SFT model.

use vqalab::attacks::{sweep, SweepConfig};
use vqalab::harness::RunConfig;
use vqalab::policy::init_params;
use vqalab::sft::train_sft;
use vqalab::synthenv::{gen_dataset, make_rule};

fn main() -> vqalab::Result<()> {
    let cfg = RunConfig::default();
    let (train, test) = gen_dataset(&make_rule(&cfg.task, cfg.seed)?, &cfg.task, cfg.seed)?;
    let mut init = init_params(&cfg.policy_config(), cfg.seed, cfg.policy.init_scale)?;
    init.fit_input_norm(train.samples.iter().map(|s| s.image.as_slice()));
    let params = train_sft(&init, &train.samples, &cfg.sft, cfg.seed)?.params;

    let res = sweep(&params, &test.samples[..200], &SweepConfig::default())?;
    for c in &res.curves {
        let pts: Vec<String> = c.points.iter().map(|(e, a)| format!("{e}:{a:.3}")).collect();
        println!("{:5} aua {:.4}  {}", c.attack.to_string(), c.aua, pts.join(" "));
    }
    Ok(())
}
