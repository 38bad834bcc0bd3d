//! Structured chain-of-thought outputs and their tagged text form.
//!
//! An output is a reasoning trace followed by a final answer:
//!
//! ```text
//! <think>word word ...</think><answer>X</answer>
//! ```
//!
//! Trace words come from a closed vocabulary and answers are the letters
//! `A`, `B`, ... truncated to the number of choices. [`Codec`] owns both maps
//! and converts between token ids and text.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

/// A reasoning trace (token ids) and an answer id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructuredOutput {
    pub trace: Vec<usize>,
    pub answer: usize,
}

impl StructuredOutput {
    pub fn new(trace: Vec<usize>, answer: usize) -> Self {
        Self { trace, answer }
    }

    /// Check token ids against a vocabulary of `vocab` words, answer ids
    /// against `choices`, and the trace length against `max_len`.
    pub fn validate(&self, vocab: usize, choices: usize, max_len: usize) -> Result<()> {
        if self.trace.len() > max_len {
            return Err(Error::Range(format!("trace length {} exceeds {max_len}", self.trace.len())));
        }
        if let Some(&t) = self.trace.iter().find(|&&t| t >= vocab) {
            return Err(Error::Range(format!("trace token {t} outside vocabulary of {vocab}")));
        }
        if self.answer >= choices {
            return Err(Error::Range(format!("answer {} outside {choices} choices", self.answer)));
        }
        Ok(())
    }
}

/// Medical-flavoured default trace words; ids past the list get `w<id>`.
const LEXICON: [&str; 32] = [
    "lesion", "irregular", "mass", "opacity", "nodule", "edema", "margin", "contrast",
    "benign", "malignant", "cyst", "calcified", "vessel", "tissue", "density", "lobe",
    "border", "fluid", "focal", "diffuse", "atrophy", "fracture", "effusion", "enhanced",
    "retina", "pigment", "cell", "nucleus", "layer", "thickened", "symmetric", "normal",
];

/// Bidirectional maps between ids and words for trace tokens and answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codec {
    words: Vec<String>,
    answers: Vec<String>,
}

impl Codec {
    /// Default codec: the built-in lexicon for trace words and letters for
    /// answers.
    pub fn new(vocab: usize, choices: usize) -> Result<Self> {
        if choices == 0 || choices > 26 {
            return Err(Error::Config(format!("answer count must be in 1..=26, got {choices}")));
        }
        let words = (0..vocab)
            .map(|i| LEXICON.get(i).map(|w| w.to_string()).unwrap_or_else(|| format!("w{i}")))
            .collect();
        let answers = (0..choices).map(|i| char::from(b'A' + i as u8).to_string()).collect();
        Ok(Self { words, answers })
    }

    /// Codec with explicit vocabulary words; answers are letters.
    pub fn with_words<S: AsRef<str>>(words: &[S], choices: usize) -> Result<Self> {
        let mut codec = Self::new(0, choices)?;
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.contains(char::is_whitespace) || w.contains('<') || w.contains('>') {
                return Err(Error::Config(format!("invalid vocabulary word {w:?}")));
            }
            if codec.words.iter().any(|x| x == w) {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
            codec.words.push(w.to_string());
        }
        Ok(codec)
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn choices(&self) -> usize {
        self.answers.len()
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Range(format!("token {id} outside vocabulary of {}", self.words.len())))
    }

    pub fn answer_word(&self, id: usize) -> Result<&str> {
        self.answers
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Range(format!("answer {id} outside {} choices", self.answers.len())))
    }

    pub fn token_id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn answer_id(&self, word: &str) -> Option<usize> {
        self.answers.iter().position(|w| w == word)
    }

    /// Render `<think>` + space-joined trace words + `</think><answer>` +
    /// answer word + `</answer>`.
    pub fn serialize(&self, y: &StructuredOutput) -> Result<String> {
        let mut out = String::from(THINK_OPEN);
        for (i, &t) in y.trace.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.word(t)?);
        }
        out.push_str(THINK_CLOSE);
        out.push_str(ANSWER_OPEN);
        out.push_str(self.answer_word(y.answer)?);
        out.push_str(ANSWER_CLOSE);
        Ok(out)
    }

    /// Parse the exact tag grammar. Both segments must be present, in order,
    /// exactly once, with nothing before or after.
    pub fn parse(&self, text: &str) -> Result<StructuredOutput> {
        let (think, answer) = split_segments(text)?;
        let trace = if think.is_empty() {
            Vec::new()
        } else {
            think
                .split(' ')
                .map(|w| {
                    self.token_id(w).ok_or_else(|| Error::Format(format!("unknown trace word {w:?}")))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let answer = self
            .answer_id(answer)
            .ok_or_else(|| Error::Format(format!("unknown answer {answer:?}")))?;
        Ok(StructuredOutput { trace, answer })
    }

    /// The trace segment only (ExtractT).
    pub fn extract_trace(&self, text: &str) -> Result<Vec<usize>> {
        self.parse(text).map(|y| y.trace)
    }

    /// The answer segment only (ExtractA).
    pub fn extract_answer(&self, text: &str) -> Result<usize> {
        self.parse(text).map(|y| y.answer)
    }
}

/// Split into raw `(think, answer)` contents, rejecting any deviation from
/// the grammar.
fn split_segments(text: &str) -> Result<(&str, &str)> {
    let rest = text
        .strip_prefix(THINK_OPEN)
        .ok_or_else(|| Error::Format("output must start with <think>".into()))?;
    let close = rest
        .find(THINK_CLOSE)
        .ok_or_else(|| Error::Format("missing </think>".into()))?;
    let think = &rest[..close];
    let rest = &rest[close + THINK_CLOSE.len()..];
    let rest = rest
        .strip_prefix(ANSWER_OPEN)
        .ok_or_else(|| Error::Format("<answer> must follow </think>".into()))?;
    let close = rest
        .find(ANSWER_CLOSE)
        .ok_or_else(|| Error::Format("missing </answer>".into()))?;
    let answer = &rest[..close];
    let trailing = &rest[close + ANSWER_CLOSE.len()..];
    if !trailing.is_empty() {
        return Err(Error::Format("trailing content after </answer>".into()));
    }
    if think.contains('<') || think.contains('>') || answer.contains('<') || answer.contains('>') {
        return Err(Error::Format("stray or duplicated tag".into()));
    }
    if think.starts_with(' ') || think.ends_with(' ') || think.contains("  ") {
        return Err(Error::Format("trace words must be separated by single spaces".into()));
    }
    Ok((think, answer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn codec() -> Codec {
        Codec::with_words(&["lesion", "irregular", "abc"], 4).unwrap()
    }

    #[test]
    fn serializes_tagged_format() {
        let c = codec();
        let y = StructuredOutput::new(vec![0, 1], 1);
        assert_eq!(c.serialize(&y).unwrap(), "<think>lesion irregular</think><answer>B</answer>");
        let empty = StructuredOutput::new(vec![], 0);
        assert_eq!(c.serialize(&empty).unwrap(), "<think></think><answer>A</answer>");
    }

    #[test]
    fn serialize_rejects_out_of_range_ids() {
        let c = codec();
        assert!(matches!(c.serialize(&StructuredOutput::new(vec![3], 0)), Err(Error::Range(_))));
        assert!(matches!(c.serialize(&StructuredOutput::new(vec![], 4)), Err(Error::Range(_))));
    }

    #[test]
    fn parses_valid_text() {
        let c = codec();
        assert_eq!(
            c.parse("<think>abc</think><answer>B</answer>").unwrap(),
            StructuredOutput::new(vec![2], 1)
        );
        assert_eq!(c.parse("<think></think><answer>A</answer>").unwrap(), StructuredOutput::new(vec![], 0));
    }

    #[test]
    fn rejects_malformed_text() {
        let c = codec();
        for bad in [
            "<think>abc<answer>B</answer>",
            "<think>abc</think>",
            "<answer>B</answer><think>abc</think>",
            "<think>abc</think><answer>B</answer> ",
            "<think>abc</think><answer>B</answer><answer>C</answer>",
            "<think>abc</think><answer><answer>B</answer>",
            "<think>abc</think><answer>E</answer>",
            "<think>abc</think><answer></answer>",
            "<think>zzz</think><answer>A</answer>",
            "<think>abc  abc</think><answer>A</answer>",
            "x<think>abc</think><answer>A</answer>",
            "",
        ] {
            assert!(matches!(c.parse(bad), Err(Error::Format(_))), "accepted {bad:?}");
        }
    }

    #[test]
    fn seeded_round_trip_over_random_outputs() {
        use rand::Rng;
        let c = Codec::new(32, 4).unwrap();
        let mut rng = crate::rng::from_seed(2024);
        for _ in 0..1000 {
            let len = rng.random_range(0..=6);
            let y = StructuredOutput::new((0..len).map(|_| rng.random_range(0..32)).collect(), rng.random_range(0..4));
            assert_eq!(c.parse(&c.serialize(&y).unwrap()).unwrap(), y);
        }
    }

    proptest! {
        #[test]
        fn parse_inverts_serialize(trace in proptest::collection::vec(0usize..40, 0..8), answer in 0usize..6) {
            let c = Codec::new(40, 6).unwrap();
            let y = StructuredOutput::new(trace, answer);
            prop_assert_eq!(c.parse(&c.serialize(&y).unwrap()).unwrap(), y);
        }
    }
}
