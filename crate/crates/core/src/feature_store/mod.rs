//! Feature datasets: preference tuples with precomputed prompt and
//! prompt-completion feature vectors, their two on-disk formats, and the
//! pool/train split.
//!
//! Vectors are kept at 32-bit precision as exported by feature extractors;
//! everything computed from them (distances, scores) is done in `f64`.

mod binary;
mod ndjson;
mod split;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use binary::{
    decode_binary, encode_binary, id_from_hash, id_hash, BINARY_HEADER_LEN, BINARY_MAGIC,
};
pub use ndjson::{read_ndjson, write_ndjson};
pub use split::{initial_split, SplitState};

#[derive(Debug, Error)]
pub enum FeatureStoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record at {location}: {message}")]
    Malformed { location: String, message: String },
    #[error("dimension mismatch in record {record}: {field} has length {found}, expected {expected}")]
    DimensionMismatch {
        record: usize,
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("duplicate tuple_id {0:?}")]
    DuplicateTupleId(String),
    #[error("prompt_id {prompt_id:?} has a different prompt_vec in record {record}")]
    InconsistentPrompt { prompt_id: String, record: usize },
    #[error("non-finite value in record {record} ({field})")]
    NonFinite { record: usize, field: &'static str },
    #[error("dataset is empty")]
    Empty,
    #[error("initial train size {requested} exceeds dataset size {available}")]
    SplitTooLarge { requested: usize, available: usize },
    #[error("unknown tuple id {0:?}")]
    UnknownTuple(String),
}

pub type Result<T, E = FeatureStoreError> = std::result::Result<T, E>;

/// One pool item: a prompt and two completions, as feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTuple {
    pub tuple_id: String,
    pub prompt_id: String,
    pub prompt_vec: Vec<f32>,
    pub pair1_vec: Vec<f32>,
    pub pair2_vec: Vec<f32>,
    /// `Some(true)` when completion 1 is preferred.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
}

/// A validated, immutable collection of tuples sharing feature dimensions.
#[derive(Debug, Clone)]
pub struct FeatureDataset {
    name: String,
    d_p: usize,
    d_c: usize,
    tuples: Vec<PreferenceTuple>,
    by_id: HashMap<String, usize>,
}

impl PartialEq for FeatureDataset {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.d_p == other.d_p
            && self.d_c == other.d_c
            && self.tuples.len() == other.tuples.len()
            && self
                .tuples
                .iter()
                .zip(&other.tuples)
                .all(|(a, b)| tuples_bit_equal(a, b))
    }
}

fn bits(v: &[f32]) -> impl Iterator<Item = u32> + '_ {
    v.iter().map(|x| x.to_bits())
}

fn tuples_bit_equal(a: &PreferenceTuple, b: &PreferenceTuple) -> bool {
    a.tuple_id == b.tuple_id
        && a.prompt_id == b.prompt_id
        && a.label == b.label
        && a.prompt_vec.len() == b.prompt_vec.len()
        && bits(&a.prompt_vec).eq(bits(&b.prompt_vec))
        && bits(&a.pair1_vec).eq(bits(&b.pair1_vec))
        && bits(&a.pair2_vec).eq(bits(&b.pair2_vec))
}

impl FeatureDataset {
    /// Validate `tuples` and build a dataset. Record numbers in errors are
    /// 1-based positions in `tuples`.
    pub fn new(name: impl Into<String>, tuples: Vec<PreferenceTuple>) -> Result<Self> {
        let first = tuples.first().ok_or(FeatureStoreError::Empty)?;
        let d_p = first.prompt_vec.len();
        let d_c = first.pair1_vec.len();
        if d_p == 0 || d_c == 0 {
            return Err(FeatureStoreError::Malformed {
                location: "record 1".into(),
                message: "feature vectors must be non-empty".into(),
            });
        }
        let mut by_id = HashMap::with_capacity(tuples.len());
        let mut prompts: HashMap<&str, &[f32]> = HashMap::new();
        for (i, t) in tuples.iter().enumerate() {
            let record = i + 1;
            check_len(record, "prompt_vec", d_p, t.prompt_vec.len())?;
            check_len(record, "pair1_vec", d_c, t.pair1_vec.len())?;
            check_len(record, "pair2_vec", d_c, t.pair2_vec.len())?;
            check_finite(record, "prompt_vec", &t.prompt_vec)?;
            check_finite(record, "pair1_vec", &t.pair1_vec)?;
            check_finite(record, "pair2_vec", &t.pair2_vec)?;
            if by_id.insert(t.tuple_id.clone(), i).is_some() {
                return Err(FeatureStoreError::DuplicateTupleId(t.tuple_id.clone()));
            }
            match prompts.get(t.prompt_id.as_str()) {
                Some(v) if !bits(v).eq(bits(&t.prompt_vec)) => {
                    return Err(FeatureStoreError::InconsistentPrompt {
                        prompt_id: t.prompt_id.clone(),
                        record,
                    })
                }
                Some(_) => {}
                None => {
                    prompts.insert(&t.prompt_id, &t.prompt_vec);
                }
            }
        }
        Ok(Self {
            name: name.into(),
            d_p,
            d_c,
            tuples,
            by_id,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn d_p(&self) -> usize {
        self.d_p
    }

    pub fn d_c(&self) -> usize {
        self.d_c
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    /// Always false for a constructed dataset; kept for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn tuples(&self) -> &[PreferenceTuple] {
        &self.tuples
    }

    pub fn get(&self, tuple_id: &str) -> Option<&PreferenceTuple> {
        self.by_id.get(tuple_id).map(|&i| &self.tuples[i])
    }

    pub fn index_of(&self, tuple_id: &str) -> Option<usize> {
        self.by_id.get(tuple_id).copied()
    }

    pub fn is_labeled(&self) -> bool {
        self.tuples.iter().all(|t| t.label.is_some())
    }

    /// Distinct prompts in order of first appearance.
    pub fn unique_prompts(&self) -> Vec<(&str, &[f32])> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for t in &self.tuples {
            if seen.insert(t.prompt_id.as_str(), ()).is_none() {
                out.push((t.prompt_id.as_str(), t.prompt_vec.as_slice()));
            }
        }
        out
    }

    /// Build a new dataset from the given tuple ids, in the given order.
    pub fn subset<S: AsRef<str>>(&self, name: impl Into<String>, ids: &[S]) -> Result<Self> {
        let tuples = ids
            .iter()
            .map(|id| {
                self.get(id.as_ref())
                    .cloned()
                    .ok_or_else(|| FeatureStoreError::UnknownTuple(id.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(name, tuples)
    }

    /// Replace labels by tuple id. Ids missing from `labels` keep theirs.
    pub fn with_labels(mut self, labels: &HashMap<String, bool>) -> Self {
        for t in &mut self.tuples {
            if let Some(&l) = labels.get(&t.tuple_id) {
                t.label = Some(l);
            }
        }
        self
    }

    /// Drop every label.
    pub fn without_labels(mut self) -> Self {
        for t in &mut self.tuples {
            t.label = None;
        }
        self
    }

    pub fn into_tuples(self) -> Vec<PreferenceTuple> {
        self.tuples
    }
}

fn check_len(record: usize, field: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(FeatureStoreError::DimensionMismatch {
            record,
            field,
            expected,
            found,
        });
    }
    Ok(())
}

fn check_finite(record: usize, field: &'static str, v: &[f32]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(FeatureStoreError::NonFinite { record, field })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Ndjson,
    Binary,
}

impl Format {
    /// Guess from the file extension: `.bin` is binary, anything else ndjson.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("balpm") => Format::Binary,
            _ => Format::Ndjson,
        }
    }
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ndjson" | "jsonl" => Ok(Format::Ndjson),
            "binary" | "bin" => Ok(Format::Binary),
            other => Err(format!("unknown format {other:?} (expected ndjson or binary)")),
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string()
}

pub fn load_dataset(path: &Path, format: Format) -> Result<FeatureDataset> {
    let name = stem(path);
    match format {
        Format::Ndjson => {
            let reader = BufReader::new(File::open(path)?);
            read_ndjson(name, reader)
        }
        Format::Binary => {
            let bytes = std::fs::read(path)?;
            decode_binary(name, &bytes)
        }
    }
}

pub fn save_dataset(dataset: &FeatureDataset, path: &Path, format: Format) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        Format::Ndjson => write_ndjson(dataset, &mut w)?,
        Format::Binary => w.write_all(&encode_binary(dataset))?,
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::PreferenceTuple;

    pub fn tuple(id: &str, prompt: &str, p: &[f32], c1: &[f32], c2: &[f32]) -> PreferenceTuple {
        PreferenceTuple {
            tuple_id: id.into(),
            prompt_id: prompt.into(),
            prompt_vec: p.to_vec(),
            pair1_vec: c1.to_vec(),
            pair2_vec: c2.to_vec(),
            label: None,
        }
    }
}
