//! Embedding records, their on-disk formats and the synthetic open-set
//! benchmark generator.

mod io;
mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast_vec, Scalar};

pub use io::{load_store, read_store, save_store, write_store, Format};
pub use synthetic::{generate_synthetic_openset, synthetic_means, GeneratingMeans, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Labeled,
        Split::Unlabeled,
        Split::Validation,
        Split::Test,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    /// Whether records of this split must carry a class label.
    pub fn requires_label(self) -> bool {
        !matches!(self, Split::Unlabeled)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Split::Labeled),
            "unlabeled" => Ok(Split::Unlabeled),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// One sample: an identifier, its split, an optional class label and a
/// feature (or latent) vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub split: Split,
    pub label: Option<usize>,
    pub vector: Vec<f64>,
    /// Ground-truth outlier flag. Only ever read by evaluation code.
    pub ood_truth: Option<bool>,
    /// Bag / patient identifier used for group-level aggregation.
    pub group_id: Option<String>,
}

impl EmbeddingRecord {
    pub fn is_labeled_split(&self) -> bool {
        self.split.requires_label()
    }
}

/// A validated, immutable collection of records sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Store {
    records: Vec<EmbeddingRecord>,
    dim: usize,
    index: HashMap<String, usize>,
}

impl Store {
    /// Validates every record invariant and builds the store.
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self> {
        let dim = records.first().map_or(0, |r| r.vector.len());
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.vector.is_empty() {
                return Err(Error::InvalidRecord {
                    id: r.id.clone(),
                    reason: "vector must have at least one component".into(),
                });
            }
            if r.vector.len() != dim {
                return Err(Error::DimensionMismatch {
                    id: r.id.clone(),
                    expected: dim,
                    found: r.vector.len(),
                });
            }
            if let Some(k) = r.vector.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidRecord {
                    id: r.id.clone(),
                    reason: format!("component {k} is not finite"),
                });
            }
            match (r.split.requires_label(), r.label) {
                (true, None) => {
                    return Err(Error::InvalidRecord {
                        id: r.id.clone(),
                        reason: format!("{} records require a label", r.split),
                    })
                }
                (false, Some(_)) => {
                    return Err(Error::InvalidRecord {
                        id: r.id.clone(),
                        reason: "unlabeled records must not carry a label".into(),
                    })
                }
                _ => {}
            }
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Store {
            records,
            dim,
            index,
        })
    }

    pub fn empty() -> Self {
        Store {
            records: Vec::new(),
            dim: 0,
            index: HashMap::new(),
        }
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EmbeddingRecord> {
        self.records
    }

    /// Vector dimension; 0 for an empty store.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &EmbeddingRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Number of classes implied by the largest label present.
    pub fn num_classes(&self) -> usize {
        self.records
            .iter()
            .filter_map(|r| r.label)
            .max()
            .map_or(0, |m| m + 1)
    }

    /// All vectors converted to the requested scalar type, in record order.
    pub fn vectors<T: Scalar>(&self) -> Vec<Vec<T>> {
        self.records.iter().map(|r| cast_vec(&r.vector)).collect()
    }

    /// A copy of this store with every vector replaced, keeping ids, splits,
    /// labels and metadata.
    pub fn with_vectors(&self, vectors: Vec<Vec<f64>>) -> Result<Store> {
        if vectors.len() != self.records.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} vectors, got {}",
                self.records.len(),
                vectors.len()
            )));
        }
        let records = self
            .records
            .iter()
            .zip(vectors)
            .map(|(r, vector)| EmbeddingRecord {
                vector,
                ..r.clone()
            })
            .collect();
        Store::new(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, split: Split, label: Option<usize>, v: Vec<f64>) -> EmbeddingRecord {
        EmbeddingRecord {
            id: id.into(),
            split,
            label,
            vector: v,
            ood_truth: None,
            group_id: None,
        }
    }

    #[test]
    fn rejects_duplicate_ids() {
        let err = Store::new(vec![
            rec("a", Split::Unlabeled, None, vec![1.0]),
            rec("a", Split::Test, Some(0), vec![2.0]),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateId(id) if id == "a"));
    }

    #[test]
    fn rejects_mixed_dimensions() {
        let err = Store::new(vec![
            rec("a", Split::Unlabeled, None, vec![1.0, 2.0]),
            rec("b", Split::Unlabeled, None, vec![1.0, 2.0, 3.0]),
        ])
        .unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                expected: 2,
                found: 3,
                ..
            }
        ));
    }

    #[test]
    fn label_presence_follows_split() {
        assert!(Store::new(vec![rec("a", Split::Labeled, None, vec![1.0])]).is_err());
        assert!(Store::new(vec![rec("a", Split::Unlabeled, Some(1), vec![1.0])]).is_err());
        assert!(Store::new(vec![rec("a", Split::Validation, Some(1), vec![1.0])]).is_ok());
    }

    #[test]
    fn rejects_non_finite_components() {
        let err = Store::new(vec![rec("a", Split::Unlabeled, None, vec![f64::NAN])]).unwrap_err();
        assert!(matches!(err, Error::InvalidRecord { .. }));
    }

    #[test]
    fn split_parses_round_trip() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("train".parse::<Split>().is_err());
    }
}
