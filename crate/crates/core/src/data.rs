//! VQA samples and datasets, with line-delimited JSON persistence.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One VQA instance: image features, question type, answer choices, ground
/// truth, modality tag and the evidence tokens a sound trace should mention.
///
/// Field names are the on-disk names, fixed for interoperability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Vec<f64>,
    pub question: usize,
    #[serde(rename = "k")]
    pub choices: usize,
    pub truth: usize,
    pub modality: usize,
    pub evidence: BTreeSet<usize>,
}

impl Sample {
    /// Same sample with a replaced image (used for perturbed states).
    pub fn with_image(&self, image: Vec<f64>) -> Sample {
        Sample { image, ..self.clone() }
    }

    pub fn dim(&self) -> usize {
        self.image.len()
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.truth >= self.choices {
            return Err(Error::Range(format!("truth {} outside {} choices", self.truth, self.choices)));
        }
        if let Some(&t) = self.evidence.iter().find(|&&t| t >= vocab) {
            return Err(Error::Range(format!("evidence token {t} outside vocabulary of {vocab}")));
        }
        if self.image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range("image has non-finite entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: Split,
    /// Identifies the generating rule, spec and seed; shared by the train and
    /// test halves of one generation.
    pub spec_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    split: Split,
    spec_hash: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(Sample::dim)
    }

    /// Check per-sample invariants and that all samples share `dim`,
    /// `choices`, and stay within `vocab` tokens and `modalities` tags.
    pub fn validate(&self, dim: usize, choices: usize, vocab: usize, modalities: usize) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            s.validate(vocab).map_err(|e| Error::Range(format!("sample {i}: {e}")))?;
            if s.dim() != dim {
                return Err(Error::Range(format!("sample {i}: image dimension {} != {dim}", s.dim())));
            }
            if s.choices != choices {
                return Err(Error::Range(format!("sample {i}: {} choices != {choices}", s.choices)));
            }
            if s.modality >= modalities {
                return Err(Error::Range(format!("sample {i}: modality {} >= {modalities}", s.modality)));
            }
        }
        Ok(())
    }

    /// Write one JSON record per line, plus a `<path>.meta.json` sidecar
    /// carrying the split and spec hash.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for s in &self.samples {
            let line = serde_json::to_string(s).map_err(|e| Error::decode(path, e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let meta = Meta { split: self.split, spec_hash: self.spec_hash.clone() };
        let meta_path = meta_path(path);
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::decode(&meta_path, e))?;
        fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))
    }

    /// Load a line-delimited dataset. Without a sidecar the spec hash falls
    /// back to a content hash and the split to `default_split`.
    pub fn load(path: &Path, default_split: Split) -> Result<Dataset> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut samples = Vec::new();
        let mut raw = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            raw.extend_from_slice(line.as_bytes());
            raw.push(b'\n');
            let s: Sample =
                serde_json::from_str(&line).map_err(|e| Error::decode(path, format!("line {}: {e}", n + 1)))?;
            samples.push(s);
        }
        let meta_path = meta_path(path);
        let (split, spec_hash) = match fs::read_to_string(&meta_path) {
            Ok(text) => {
                let m: Meta = serde_json::from_str(&text).map_err(|e| Error::decode(&meta_path, e))?;
                (m.split, m.spec_hash)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                (default_split, format!("external:{}", crate::hash::sha256_hex(&raw)))
            }
            Err(e) => return Err(Error::io(&meta_path, e)),
        };
        Ok(Dataset { samples, split, spec_hash })
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}
