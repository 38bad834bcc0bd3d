//! GRPO from an SFT checkpoint, printing the reward trend.

use vqalab::format::Codec;
use vqalab::grpo::{advantage_variance, train_grpo, GrpoConfig, GrpoContext};
use vqalab::harness::RunConfig;
use vqalab::policy::init_params;
use vqalab::reward::RewardFn;
use vqalab::sft::train_sft;
use vqalab::synthenv::{gen_dataset, make_rule};

fn main() -> vqalab::Result<()> {
    let cfg = RunConfig::default();
    let (train, _) = gen_dataset(&make_rule(&cfg.task, cfg.seed)?, &cfg.task, cfg.seed)?;
    let mut init = init_params(&cfg.policy_config(), cfg.seed, cfg.policy.init_scale)?;
    init.fit_input_norm(train.samples.iter().map(|s| s.image.as_slice()));
    let sft = train_sft(&init, &train.samples, &cfg.sft, cfg.seed)?.params;

    let reward = RewardFn::new(cfg.reward.clone(), Codec::new(cfg.task.vocab, cfg.task.choices)?, cfg.task.max_trace);
    let gcfg = GrpoConfig { adv: None, ..cfg.grpo.clone() };
    let ctx = GrpoContext { config: &gcfg, reward: &reward, params_ref: &sft, seed: cfg.seed };
    let out = train_grpo(&sft, &train.samples, &ctx)?;
    for s in out.log.iter().step_by(25).chain(out.log.last()) {
        println!("iter {:3}  reward {:.3}  ema {:.3}  kl {:.4}  clip {:.3}", s.iteration, s.reward_mean, s.reward_ema, s.reference_kl, s.clip_fraction);
    }

    let v = advantage_variance(&out.params, &train.samples[..256], &reward, gcfg.k, gcfg.eps_std, cfg.seed)?;
    println!("gradient variance over {} groups: normalized {:.3}, raw {:.3}", v.groups, v.normalized, v.raw);
    Ok(())
}
