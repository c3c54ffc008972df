//! Ranking-quality metrics (NDCG@k, ERR@k at positions 1/3/5/10) and the
//! paired t-test used to compare two systems per query.

pub mod stat;

use thiserror::Error;

use crate::data::{Dataset, QueryGroup};
use crate::model::{ModelError, RsaModel};

/// Reporting positions.
pub const CUTOFFS: [usize; 4] = [1, 3, 5, 10];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cutoff k must be at least 1")]
    BadCutoff,
    #[error("paired samples must have equal lengths ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("paired t-test needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// NDCG@k over grades listed in predicted order. Gain is 2^g - 1, discount
/// log2(rank+1), normalized by the best ordering's DCG; 0 when every grade
/// is zero.
pub fn ndcg_at_k(ranked_rels: &[u32], k: usize) -> Result<f64, MetricsError> {
    if k < 1 {
        return Err(MetricsError::BadCutoff);
    }
    let dcg = dcg_at_k(ranked_rels, k);
    let mut ideal = ranked_rels.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg_at_k(&ideal, k);
    Ok(if idcg == 0.0 { 0.0 } else { dcg / idcg })
}

fn dcg_at_k(rels: &[u32], k: usize) -> f64 {
    rels.iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| (2.0f64.powi(g as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// ERR@k over grades in predicted order: the expected reciprocal rank at
/// which a cascade user stops, with stop probability (2^g - 1) / 2^g_max.
pub fn err_at_k(ranked_rels: &[u32], k: usize, g_max: u32) -> Result<f64, MetricsError> {
    if k < 1 {
        return Err(MetricsError::BadCutoff);
    }
    let denom = 2.0f64.powi(g_max as i32);
    let mut continue_prob = 1.0;
    let mut err = 0.0;
    for (i, &g) in ranked_rels.iter().take(k).enumerate() {
        let stop = (2.0f64.powi(g as i32) - 1.0) / denom;
        err += continue_prob * stop / (i + 1) as f64;
        continue_prob *= 1.0 - stop;
    }
    Ok(err)
}

/// Paired two-sided Student t-test on per-query differences a - b.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    pub p: f64,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.len() < 2 {
        return Err(MetricsError::TooFewSamples(a.len()));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    let df = a.len() - 1;
    if var == 0.0 {
        // all differences identical: zero spread
        return Ok(if mean == 0.0 {
            TTestResult { t: 0.0, df, p: 1.0 }
        } else {
            TTestResult { t: mean.signum() * f64::INFINITY, df, p: 0.0 }
        });
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let p = stat::student_t_two_sided_p(t, df);
    Ok(TTestResult { t, df, p })
}

/// Per-query and mean ERR/NDCG at each cutoff.
#[derive(Debug, Clone)]
pub struct QueryMetrics {
    pub qid: String,
    pub err: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub cutoffs: Vec<usize>,
    pub per_query: Vec<QueryMetrics>,
    pub mean_err: Vec<f64>,
    pub mean_ndcg: Vec<f64>,
}

impl MetricReport {
    pub fn num_queries(&self) -> usize {
        self.per_query.len()
    }

    pub fn mean_ndcg_at(&self, k: usize) -> f64 {
        let idx = self.cutoffs.iter().position(|&c| c == k).expect("cutoff not reported");
        self.mean_ndcg[idx]
    }

    pub fn mean_err_at(&self, k: usize) -> f64 {
        let idx = self.cutoffs.iter().position(|&c| c == k).expect("cutoff not reported");
        self.mean_err[idx]
    }

    /// Column order follows the usual results-table layout:
    /// ERR@1, NDCG@1, ERR@3, NDCG@3, ERR@5, NDCG@5, ERR@10, NDCG@10.
    pub fn header_row() -> String {
        let mut cols = vec!["system".to_string()];
        for &k in &CUTOFFS {
            cols.push(format!("ERR@{k}"));
            cols.push(format!("NDCG@{k}"));
        }
        cols.join("\t")
    }

    pub fn summary_row(&self, system: &str) -> String {
        let mut cols = vec![system.to_string()];
        for i in 0..self.cutoffs.len() {
            cols.push(format!("{:.4}", self.mean_err[i]));
            cols.push(format!("{:.4}", self.mean_ndcg[i]));
        }
        cols.join("\t")
    }

    /// Per-query table: qid column then err@k/ndcg@k pairs.
    pub fn per_query_table(&self) -> String {
        let mut out = String::from("qid");
        for &k in &self.cutoffs {
            out.push_str(&format!("\terr@{k}\tndcg@{k}"));
        }
        out.push('\n');
        for q in &self.per_query {
            out.push_str(&q.qid);
            for i in 0..self.cutoffs.len() {
                out.push_str(&format!("\t{:.17e}\t{:.17e}", q.err[i], q.ndcg[i]));
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluate any scoring function: documents are re-ranked by descending
/// score with stable tie-breaking on input order.
pub fn evaluate_scores<F>(mut score_fn: F, dataset: &Dataset) -> Result<MetricReport, MetricsError>
where
    F: FnMut(&QueryGroup) -> Result<Vec<f64>, ModelError>,
{
    let mut per_query = Vec::with_capacity(dataset.groups.len());
    let mut mean_err = vec![0.0; CUTOFFS.len()];
    let mut mean_ndcg = vec![0.0; CUTOFFS.len()];
    for group in &dataset.groups {
        let scores = score_fn(group)?;
        let ranked = rank_by_scores(&scores, &group.relevance);
        let mut err = Vec::with_capacity(CUTOFFS.len());
        let mut ndcg = Vec::with_capacity(CUTOFFS.len());
        for &k in &CUTOFFS {
            err.push(err_at_k(&ranked, k, dataset.k_max)?);
            ndcg.push(ndcg_at_k(&ranked, k)?);
        }
        for i in 0..CUTOFFS.len() {
            mean_err[i] += err[i];
            mean_ndcg[i] += ndcg[i];
        }
        per_query.push(QueryMetrics { qid: group.qid.clone(), err, ndcg });
    }
    let n = per_query.len().max(1) as f64;
    for v in mean_err.iter_mut().chain(mean_ndcg.iter_mut()) {
        *v /= n;
    }
    Ok(MetricReport { cutoffs: CUTOFFS.to_vec(), per_query, mean_err, mean_ndcg })
}

/// Score every group with the model and compute both metrics at 1/3/5/10.
pub fn evaluate(model: &RsaModel, dataset: &Dataset) -> Result<MetricReport, MetricsError> {
    evaluate_scores(|group| model.score_group(group), dataset)
}

/// Grades reordered by descending score; ties keep input order.
pub fn rank_by_scores(scores: &[f64], rels: &[u32]) -> Vec<u32> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap_or(std::cmp::Ordering::Equal));
    order.into_iter().map(|i| rels[i]).collect()
}
