//! Compare analytic gradients of every loss against central differences.

use vqalab::policy::{finite_difference_check, init_params, sample_output, Loss, Mode, PolicyConfig};
use vqalab::rng;
use vqalab::synthenv::{gen_dataset, make_rule, TaskSpec};

fn main() -> vqalab::Result<()> {
    let spec = TaskSpec::default();
    let (_, test) = gen_dataset(&make_rule(&spec, 1)?, &spec, 1)?;
    let s = &test.samples[3];
    for mode in [Mode::Factored, Mode::Autoregressive] {
        let cfg = PolicyConfig { hidden: 8, mode, ..PolicyConfig::default() };
        let p = init_params(&cfg, 1, 0.4)?;
        let (y, _) = sample_output(&p, s, &mut rng::from_seed(1), 1.0);
        let losses = [
            Loss::by_name("sft", s, cfg.max_trace)?,
            Loss::WeightedLogprob(vec![(y, 0.7)]),
            Loss::AnchorNll(s.truth),
            Loss::CwMargin { anchor: s.truth, kappa: 50.0 },
        ];
        for loss in &losses {
            let r = finite_difference_check(&p, s, loss, 1e-5, 1e-6)?;
            println!("{mode:?} {loss}: max rel error {:.2e} over {} coordinates", r.max_rel_error, r.coordinates);
        }
    }
    Ok(())
}
