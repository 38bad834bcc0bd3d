mod common;

use vqalab::attacks::{self, AttackConfig, AttackKind, SweepConfig};
use vqalab::perturb::Norm;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn pgd(epsilon: f64, norm: Norm, steps: usize) -> AttackConfig {
    AttackConfig { kind: AttackKind::Pgd, epsilon, alpha: epsilon / 4.0, steps, norm, ..AttackConfig::default() }
}

#[test]
fn larger_budget_succeeds_at_least_as_often() {
    let t = common::clean_sft(42);
    let samples = &t.test.samples[..200];
    let rate = |eps: f64| {
        let cfg = pgd(eps, Norm::Linf, 10);
        samples.iter().filter(|s| attacks::pgd_attack(&t.sft, s, &cfg).unwrap().success).count()
    };
    let (small, large) = (rate(0.05), rate(0.2));
    assert!(large >= small, "{large} < {small}");
}

#[test]
fn cw_finds_smaller_perturbations_than_l2_pgd_at_matched_success() {
    let t = common::clean_sft(42);
    let samples = &t.test.samples[..150];
    let cw_cfg = AttackConfig { kind: AttackKind::Cw, ..AttackConfig::default() };
    let cw: Vec<_> = samples.iter().map(|s| attacks::cw_attack(&t.sft, s, &cw_cfg).unwrap()).collect();
    let cw_hits: Vec<f64> = cw.iter().filter(|o| o.success).map(|o| o.delta_l2).collect();
    assert!(!cw_hits.is_empty());
    let cw_rate = cw_hits.len() as f64 / samples.len() as f64;

    // Smallest L2 budget on the grid whose success rate reaches C&W's.
    let mut matched = None;
    for eps in [0.005, 0.01, 0.015, 0.02, 0.03, 0.05, 0.08, 0.13, 0.2] {
        let cfg = pgd(eps, Norm::L2, 20);
        let hits: Vec<f64> = samples
            .iter()
            .map(|s| attacks::pgd_attack(&t.sft, s, &cfg).unwrap())
            .filter(|o| o.success)
            .map(|o| o.delta_l2)
            .collect();
        if hits.len() as f64 / samples.len() as f64 >= cw_rate {
            matched = Some((eps, hits));
            break;
        }
    }
    let (eps, pgd_hits) = matched.expect("L2-PGD never matched the C&W success rate");
    let (m_cw, m_pgd) = (median(cw_hits), median(pgd_hits));
    assert!(m_cw <= m_pgd, "C&W median {m_cw} > L2-PGD median {m_pgd} at epsilon {eps}");
}

#[test]
fn pgd_accuracy_is_non_increasing_in_budget() {
    let sweep = SweepConfig { kinds: vec![AttackKind::Pgd], ..SweepConfig::default() };
    let seeds = [1u64, 2, 3, 4, 5, 6, 7, 8, 9, 10];
    let mut monotone = 0;
    for &seed in &seeds {
        let t = common::clean_sft(seed);
        let res = attacks::sweep(&t.sft, &t.test.samples[..200], &sweep).unwrap();
        let pts = &res.curves[0].points;
        assert_eq!(pts[0].1, common::accuracy(&t.sft, &t.test.samples[..200]));
        if pts.windows(2).all(|w| w[1].1 <= w[0].1) {
            monotone += 1;
        }
    }
    assert!(monotone as f64 >= 0.9 * seeds.len() as f64, "{monotone}/{} monotone", seeds.len());
}

#[test]
fn linf_pgd_respects_budget_for_any_step_count() {
    let t = common::clean_sft(5);
    for steps in [1, 3, 10] {
        let cfg = pgd(0.01, Norm::Linf, steps);
        for s in t.test.samples.iter().take(30) {
            let o = attacks::pgd_attack(&t.sft, s, &cfg).unwrap();
            assert!(o.delta_linf <= 0.01 + 1e-15);
        }
    }
}
