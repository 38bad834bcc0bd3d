mod common;

use vqalab::attacks;
use vqalab::harness::RunConfig;
use vqalab::perturb::{self, Norm};
use vqalab::policy::Loss;
use vqalab::sft::{self, AdvConfig, SftConfig, SftTarget};

#[test]
fn first_batch_has_nonzero_gradient() {
    let cfg = RunConfig::default();
    let (_, train, _) = common::data(&cfg.task, cfg.seed);
    let init = common::initial(&cfg, &train.samples);
    let one = SftConfig { epochs: 1, ..cfg.sft.clone() };
    let log = sft::train_sft(&init, &train.samples[..cfg.sft.batch_size], &one, cfg.seed).unwrap().log;
    assert!(log[0].grad_norm > 0.0 && log[0].grad_norm.is_finite());
}

#[test]
fn full_batch_loss_decreases_over_first_fifty_steps() {
    // With the whole training set as one batch each logged loss is the
    // training loss before that step.
    let cfg = RunConfig::default();
    let (_, train, _) = common::data(&cfg.task, cfg.seed);
    let init = common::initial(&cfg, &train.samples);
    let full = SftConfig { epochs: 50, batch_size: train.len(), ..cfg.sft.clone() };
    let log = sft::train_sft(&init, &train.samples, &full, cfg.seed).unwrap().log;
    assert_eq!(log.len(), 50);
    for w in log.windows(2) {
        assert!(w[1].loss < w[0].loss, "step {}: {} -> {}", w[1].step, w[0].loss, w[1].loss);
    }
}

#[test]
fn clean_and_adversarial_sft() {
    let t = common::clean_sft(42);
    let clean_acc = common::accuracy(&t.sft, &t.test.samples);
    assert!(clean_acc >= 0.90, "clean SFT accuracy {clean_acc}");

    let at = sft::train_at_sft(&t.init, &t.train.samples, &t.cfg.sft, 42).unwrap();
    let at_acc = common::accuracy(&at.params, &t.test.samples);
    assert!(clean_acc - at_acc <= 0.08, "clean {clean_acc} vs adversarial {at_acc}");
    assert!(at.log.iter().any(|s| s.adv) && at.log.iter().any(|s| !s.adv));
}

#[test]
fn all_adversarial_batches_raise_the_loss() {
    let t = common::clean_sft(7);
    let mut cfg = t.cfg.sft.clone();
    cfg.adv = Some(AdvConfig { ratio: 1.0, ..AdvConfig::default() });
    let log = sft::train_at_sft(&t.init, &t.train.samples, &cfg, 7).unwrap().log;
    assert!(log.iter().all(|s| s.adv));
    let raised = log.iter().filter(|s| s.loss >= s.clean_loss.unwrap()).count();
    assert!(raised as f64 >= 0.95 * log.len() as f64, "{raised}/{}", log.len());
}

#[test]
fn one_step_pgd_matches_fgsm_on_the_sft_loss() {
    let t = common::clean_sft(11);
    let eps = 0.01;
    let adv = AdvConfig { epsilon: eps, alpha: eps, n_pgd: 1, norm: Norm::Linf, ratio: 1.0 };
    for s in t.test.samples.iter().take(100) {
        let target = SftTarget::from_sample(s, t.cfg.task.max_trace);
        let pgd = sft::pgd_maximize_sft(&t.sft, &target, &adv).unwrap();
        let delta = attacks::fgsm_delta(&t.sft, s, &Loss::Sft(target.target.clone()), eps).unwrap();
        assert_eq!(pgd.image, perturb::add(&s.image, &delta));
    }
}

#[test]
fn default_pgd_stays_in_the_training_budget() {
    let t = common::clean_sft(13);
    let adv = AdvConfig::default();
    for s in t.test.samples.iter().take(50) {
        let target = SftTarget::from_sample(s, t.cfg.task.max_trace);
        let x = sft::pgd_maximize_sft(&t.sft, &target, &adv).unwrap();
        let delta: Vec<f64> = x.image.iter().zip(&s.image).map(|(a, b)| a - b).collect();
        assert!(perturb::linf_norm(&delta) <= 0.01 + 1e-15);
    }
}

#[test]
fn sft_is_deterministic() {
    let a = common::clean_sft(3);
    let b = common::clean_sft(3);
    assert_eq!(a.sft, b.sft);
}
