//! Certify a trained model with randomized smoothing and attack the
//! certified points at 0.9 of their radius.

use vqalab::harness::RunConfig;
use vqalab::policy::init_params;
use vqalab::sft::train_sft;
use vqalab::smoothing::{certified_accuracy, certify_all, soundness_check, SmoothedAttackConfig};
use vqalab::synthenv::{gen_dataset, make_rule};

fn main() -> vqalab::Result<()> {
    let cfg = RunConfig::default();
    let (train, test) = gen_dataset(&make_rule(&cfg.task, cfg.seed)?, &cfg.task, cfg.seed)?;
    let mut init = init_params(&cfg.policy_config(), cfg.seed, cfg.policy.init_scale)?;
    init.fit_input_norm(train.samples.iter().map(|s| s.image.as_slice()));
    let params = train_sft(&init, &train.samples, &cfg.sft, cfg.seed)?.params;

    let samples = &test.samples[..200];
    let certs = certify_all(&params, samples, &cfg.smoothing, cfg.seed)?;
    let abstained = certs.iter().filter(|c| c.abstained()).count();
    println!("sigma {}, {} abstained of {}", cfg.smoothing.sigma, abstained, certs.len());
    for (r, acc) in certified_accuracy(&certs, samples, &cfg.eval.radii) {
        println!("radius {r:.3}  certified accuracy {acc:.3}");
    }

    let cases = soundness_check(&params, samples, &certs, &cfg.smoothing, &SmoothedAttackConfig::default(), 0.9, cfg.seed)?;
    let flips = cases.iter().filter(|c| c.flipped).count();
    println!("{flips} of {} certified predictions flipped at 0.9R", cases.len());
    Ok(())
}
