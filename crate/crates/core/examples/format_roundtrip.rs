//! Serialize a structured output, parse it back, and show what the parser
//! rejects.

use vqalab::format::{Codec, StructuredOutput};

fn main() -> vqalab::Result<()> {
    let codec = Codec::with_words(&["red", "round", "left", "small"], 3)?;
    let y = StructuredOutput::new(vec![0, 1, 3], 2);
    let text = codec.serialize(&y)?;
    println!("{text}");
    assert_eq!(codec.parse(&text)?, y);
    println!("trace {:?}, answer {}", codec.extract_trace(&text)?, codec.extract_answer(&text)?);

    for bad in [
        "<answer>B</answer>",
        "<think>red</think><answer>B</answer> trailing",
        "<think>blue</think><answer>B</answer>",
    ] {
        println!("{bad:?}: {}", codec.parse(bad).unwrap_err());
    }
    Ok(())
}
