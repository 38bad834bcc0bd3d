//! Generate the planted-rule task and look at its shape.

use vqalab::synthenv::{gen_dataset, make_rule, oracle_answer, TaskSpec};

fn main() -> vqalab::Result<()> {
    let spec = TaskSpec::default();
    let rule = make_rule(&spec, 42)?;
    let (train, test) = gen_dataset(&rule, &spec, 42)?;
    println!("dim {}, {} train, {} test, noiseless margin {:.3}", spec.dim, train.len(), test.len(), rule.noiseless_margin());

    let mut per_modality = vec![0usize; spec.modalities];
    for s in &test.samples {
        per_modality[s.modality] += 1;
    }
    println!("test samples per modality: {per_modality:?}");

    let s = &test.samples[0];
    let scores = rule.scores(&s.image, s.question, s.modality);
    println!("first test sample: question {}, truth {}, rule scores {:.2?}", s.question, s.truth, scores);
    println!("evidence tokens {:?}", s.evidence);
    assert_eq!(oracle_answer(&rule, &s.image, s.question, s.modality), s.truth);
    Ok(())
}
