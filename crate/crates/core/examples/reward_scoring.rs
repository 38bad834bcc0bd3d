//! Score a few outputs with the composite reward.

use vqalab::format::{Codec, StructuredOutput};
use vqalab::reward::{RewardConfig, RewardFn};
use vqalab::synthenv::{gen_dataset, make_rule, TaskSpec};

fn main() -> vqalab::Result<()> {
    let spec = TaskSpec::default();
    let (_, test) = gen_dataset(&make_rule(&spec, 7)?, &spec, 7)?;
    let s = &test.samples[0];
    let config = RewardConfig::default();
    let codec = Codec::new(spec.vocab, spec.choices)?;
    let reward = RewardFn::new(config.clone(), codec.clone(), spec.max_trace);

    let evidence = StructuredOutput::new(s.evidence.iter().copied().collect(), s.truth);
    let unrelated: Vec<usize> = (0..spec.vocab).filter(|t| !s.evidence.contains(t)).take(3).collect();
    let wrong = StructuredOutput::new(unrelated, (s.truth + 1) % spec.choices);
    let long = StructuredOutput::new(vec![*s.evidence.first().expect("nonempty evidence"); spec.max_trace], s.truth);
    for (name, y) in [("evidence trace", &evidence), ("unrelated trace", &wrong), ("padded trace", &long)] {
        println!("{name:16} {:.3}  {}", reward.score(y, s), codec.serialize(y)?);
    }
    println!("malformed text    {:.3}", config.reward(&codec, "<answer>A</answer>", s, spec.max_trace));
    Ok(())
}
