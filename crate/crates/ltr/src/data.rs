//! LETOR / SVM-light ranking data: parsing, validation, per-query
//! normalization, and summary statistics.
//!
//! Each line is `<grade> qid:<id> <fid>:<val> ... [# comment]`. Feature ids
//! are positive integers, absent features default to 0.0, and all documents
//! sharing a qid form one query group in file order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::BufRead;

use thiserror::Error;

use crate::diff::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: grade {text:?} is not a non-negative integer")]
    NonIntegerGrade { line: usize, text: String },
    #[error("line {line}: duplicate feature id {fid}")]
    DuplicateFeature { line: usize, fid: usize },
    #[error("line {line}: feature {fid} has non-finite value {value}")]
    NonFiniteFeature { line: usize, fid: usize, value: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One query's documents: an n x d feature matrix plus n relevance grades.
#[derive(Debug, Clone)]
pub struct QueryGroup {
    pub qid: String,
    pub features: Tensor,
    pub relevance: Vec<u32>,
}

impl QueryGroup {
    pub fn num_docs(&self) -> usize {
        self.relevance.len()
    }
}

/// An ordered collection of query groups with a shared feature dimension.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub groups: Vec<QueryGroup>,
    pub feature_dim: usize,
    pub k_max: u32,
}

impl Dataset {
    pub fn num_queries(&self) -> usize {
        self.groups.len()
    }

    pub fn num_documents(&self) -> usize {
        self.groups.iter().map(QueryGroup::num_docs).sum()
    }

    /// Raise `k_max` to at least `floor` (grades stay untouched).
    pub fn with_k_max_floor(mut self, floor: u32) -> Self {
        self.k_max = self.k_max.max(floor);
        self
    }

    /// A new dataset holding a contiguous range of this one's groups.
    pub fn slice_groups(&self, start: usize, len: usize) -> Dataset {
        Dataset {
            groups: self.groups[start..start + len].to_vec(),
            feature_dim: self.feature_dim,
            k_max: self.k_max,
        }
    }
}

/// Corpus-level counts reported alongside training runs.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub num_queries: usize,
    pub num_documents: usize,
    pub avg_docs_per_query: f64,
    /// grade_histogram[g] = number of documents with grade g, g in 0..=k_max.
    pub grade_histogram: Vec<usize>,
    /// Queries whose grades are all zero (kept for training, flagged here).
    pub all_zero_grade_queries: usize,
}

pub fn parse_letor(reader: impl BufRead) -> Result<Dataset, DataError> {
    struct RawDoc {
        grade: u32,
        features: Vec<(usize, f64)>,
    }

    let mut group_order: Vec<(String, Vec<RawDoc>)> = Vec::new();
    let mut group_index: HashMap<String, usize> = HashMap::new();
    let mut feature_dim = 0usize;
    let mut k_max = 0u32;

    for (line_idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = line_idx + 1;
        let content = line.split('#').next().unwrap_or("").trim_end_matches('\r');
        let mut tokens = content.split_whitespace();
        let Some(grade_tok) = tokens.next() else { continue };

        let grade: u32 = grade_tok.parse().map_err(|_| DataError::NonIntegerGrade {
            line: line_no,
            text: grade_tok.to_string(),
        })?;

        let qid_tok = tokens.next().ok_or_else(|| DataError::Malformed {
            line: line_no,
            reason: "missing qid field".into(),
        })?;
        let qid = qid_tok
            .strip_prefix("qid:")
            .filter(|id| !id.is_empty())
            .ok_or_else(|| DataError::Malformed {
                line: line_no,
                reason: format!("expected qid:<id>, got {qid_tok:?}"),
            })?
            .to_string();

        let mut features: Vec<(usize, f64)> = Vec::new();
        let mut seen: Vec<usize> = Vec::new();
        for tok in tokens {
            let (fid_str, val_str) = tok.split_once(':').ok_or_else(|| DataError::Malformed {
                line: line_no,
                reason: format!("expected <fid>:<value>, got {tok:?}"),
            })?;
            let fid: usize = fid_str
                .parse()
                .ok()
                .filter(|&f| f >= 1)
                .ok_or_else(|| DataError::Malformed {
                    line: line_no,
                    reason: format!("feature id {fid_str:?} is not a positive integer"),
                })?;
            if seen.contains(&fid) {
                return Err(DataError::DuplicateFeature { line: line_no, fid });
            }
            seen.push(fid);
            let value: f64 = val_str.parse().map_err(|_| DataError::Malformed {
                line: line_no,
                reason: format!("bad feature value {val_str:?}"),
            })?;
            if !value.is_finite() {
                return Err(DataError::NonFiniteFeature { line: line_no, fid, value });
            }
            feature_dim = feature_dim.max(fid);
            features.push((fid, value));
        }

        k_max = k_max.max(grade);
        let doc = RawDoc { grade, features };
        match group_index.get(&qid) {
            Some(&gi) => group_order[gi].1.push(doc),
            None => {
                group_index.insert(qid.clone(), group_order.len());
                group_order.push((qid, vec![doc]));
            }
        }
    }

    let groups = group_order
        .into_iter()
        .map(|(qid, docs)| {
            let mut features = Tensor::zeros(docs.len(), feature_dim);
            let mut relevance = Vec::with_capacity(docs.len());
            for (i, doc) in docs.iter().enumerate() {
                for &(fid, val) in &doc.features {
                    features.set(i, fid - 1, val);
                }
                relevance.push(doc.grade);
            }
            QueryGroup { qid, features, relevance }
        })
        .collect();

    Ok(Dataset { groups, feature_dim, k_max })
}

/// Render a dataset back to LETOR text with dense feature columns, so that
/// parsing the output reproduces the dataset exactly.
pub fn serialize_letor(dataset: &Dataset) -> String {
    let mut out = String::new();
    for group in &dataset.groups {
        for (i, &grade) in group.relevance.iter().enumerate() {
            write!(out, "{grade} qid:{}", group.qid).unwrap();
            for j in 0..dataset.feature_dim {
                write!(out, " {}:{}", j + 1, group.features.get(i, j)).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

/// Per-query, per-column min-max rescaling to [0,1]; constant columns map
/// to 0. Relevance grades are untouched.
pub fn normalize_query_minmax(dataset: &Dataset) -> Dataset {
    let groups = dataset
        .groups
        .iter()
        .map(|group| {
            let (n, d) = group.features.shape();
            let mut normalized = Tensor::zeros(n, d);
            for j in 0..d {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for i in 0..n {
                    lo = lo.min(group.features.get(i, j));
                    hi = hi.max(group.features.get(i, j));
                }
                if hi > lo {
                    for i in 0..n {
                        normalized.set(i, j, (group.features.get(i, j) - lo) / (hi - lo));
                    }
                }
            }
            QueryGroup {
                qid: group.qid.clone(),
                features: normalized,
                relevance: group.relevance.clone(),
            }
        })
        .collect();
    Dataset { groups, feature_dim: dataset.feature_dim, k_max: dataset.k_max }
}

pub fn dataset_stats(dataset: &Dataset) -> DatasetStats {
    let num_queries = dataset.num_queries();
    let num_documents = dataset.num_documents();
    let mut grade_histogram = vec![0usize; dataset.k_max as usize + 1];
    let mut all_zero = 0usize;
    for group in &dataset.groups {
        for &g in &group.relevance {
            grade_histogram[g as usize] += 1;
        }
        if group.relevance.iter().all(|&g| g == 0) {
            all_zero += 1;
        }
    }
    DatasetStats {
        num_queries,
        num_documents,
        avg_docs_per_query: if num_queries == 0 {
            0.0
        } else {
            num_documents as f64 / num_queries as f64
        },
        grade_histogram,
        all_zero_grade_queries: all_zero,
    }
}
