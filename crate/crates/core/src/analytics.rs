//! Bias and accuracy metrics over retrieval results.
//!
//! Per relation: object-bias entropy of the subject-masked query (natural
//! log of softmaxed top-k logits), the absolute OLS slope of logit against
//! rank, Pearson correlation between gold ranks under the original and
//! subject-masked prompts, P@1 and MRR. Relations aggregate into a
//! [`BiasReport`] by unweighted mean, with a percent column comparing each
//! entropy to the ln k ceiling.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, TokenId};

/// Default top-k for the bias entropy and slope.
pub const DEFAULT_ENTROPY_K: usize = 10;

/// Ranked candidate lists for one evaluated triple: top-m ids and raw
/// logits for the original prompt and the subject-masked prompt, each
/// sorted by logit descending with ties broken by ascending id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub triple_id: usize,
    pub gold_id: TokenId,
    /// Stored list length bound; gold outside the list gets rank `m + 1`.
    pub m: usize,
    pub original: Vec<(TokenId, f64)>,
    pub masked: Vec<(TokenId, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryPath {
    Original,
    Masked,
}

impl RetrievalResult {
    /// Builds a result from full-vocabulary logits, keeping the top `m`.
    pub fn from_full_logits(
        triple_id: usize,
        gold_id: TokenId,
        original: ndarray::ArrayView1<f64>,
        masked: ndarray::ArrayView1<f64>,
        m: usize,
    ) -> Self {
        let m = m.min(original.len());
        Self {
            triple_id,
            gold_id,
            m,
            original: crate::objectives::top_k_candidates(original, m),
            masked: crate::objectives::top_k_candidates(masked, m),
        }
    }

    fn list(&self, path: QueryPath) -> &[(TokenId, f64)] {
        match path {
            QueryPath::Original => &self.original,
            QueryPath::Masked => &self.masked,
        }
    }
}

/// 1-based rank of the gold object in the stored list; `m + 1` when the
/// gold fell outside the stored top-m.
pub fn gold_rank(result: &RetrievalResult, path: QueryPath) -> usize {
    let list = result.list(path);
    list.iter()
        .position(|&(id, _)| id == result.gold_id)
        .map(|p| p + 1)
        .unwrap_or(result.m + 1)
}

/// Shannon entropy (natural log) of the softmax over the top-k logit
/// values. Ranges over [0, ln k]; ln k means the candidates are treated
/// equally, smaller values mean stronger object bias.
pub fn object_bias_entropy(masked_logits: &[f64], k: usize) -> Result<f64> {
    if masked_logits.len() < k {
        return Err(Error::Metric(format!(
            "need at least {k} candidates, got {}",
            masked_logits.len()
        )));
    }
    if k == 0 {
        return Err(Error::Metric("k must be positive".into()));
    }
    let mut top: Vec<f64> = masked_logits.to_vec();
    top.sort_by(|a, b| b.partial_cmp(a).unwrap());
    top.truncate(k);
    let probs = crate::objectives::softmax(&top);
    Ok(probs
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum())
}

/// Absolute slope of the ordinary least-squares fit of the top-k logit
/// values against their rank index 1..k.
pub fn regression_slope(masked_logits: &[f64], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Metric("regression needs k >= 2".into()));
    }
    if masked_logits.len() < k {
        return Err(Error::Metric(format!(
            "need at least {k} candidates, got {}",
            masked_logits.len()
        )));
    }
    let mut top: Vec<f64> = masked_logits.to_vec();
    top.sort_by(|a, b| b.partial_cmp(a).unwrap());
    top.truncate(k);
    let n = k as f64;
    let x_mean = (n + 1.0) / 2.0;
    let y_mean: f64 = top.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &y) in top.iter().enumerate() {
        let dx = (i + 1) as f64 - x_mean;
        num += dx * (y - y_mean);
        den += dx * dx;
    }
    Ok((num / den).abs())
}

/// Pearson correlation between gold ranks under the original and masked
/// prompts. `Incorrect` keeps only samples whose original top-1 is not the
/// gold object. Returns `None` when either rank sequence has zero variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PearsonSubset {
    All,
    Incorrect,
}

pub fn pearson_rank_correlation(
    results: &[RetrievalResult],
    subset: PearsonSubset,
) -> Result<Option<f64>> {
    let pairs: Vec<(f64, f64)> = results
        .iter()
        .filter(|r| match subset {
            PearsonSubset::All => true,
            PearsonSubset::Incorrect => gold_rank(r, QueryPath::Original) != 1,
        })
        .map(|r| {
            (
                gold_rank(r, QueryPath::Original) as f64,
                gold_rank(r, QueryPath::Masked) as f64,
            )
        })
        .collect();
    if pairs.len() < 2 {
        return Err(Error::Metric(format!(
            "pearson needs at least 2 samples, got {}",
            pairs.len()
        )));
    }
    Ok(pearson(&pairs))
}

fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Fraction of samples whose original-path gold rank is 1.
pub fn p_at_1(results: &[RetrievalResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Metric("empty result set".into()));
    }
    let hits = results
        .iter()
        .filter(|r| gold_rank(r, QueryPath::Original) == 1)
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Mean reciprocal original-path gold rank; sentinel ranks contribute
/// `1 / (m + 1)`.
pub fn mrr(results: &[RetrievalResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Metric("empty result set".into()));
    }
    let sum: f64 = results
        .iter()
        .map(|r| 1.0 / gold_rank(r, QueryPath::Original) as f64)
        .sum();
    Ok(sum / results.len() as f64)
}

/// Everything evaluated for one relation: per-triple results plus the
/// single subject-masked relation query the entropy and slope come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationEval {
    pub relation_id: String,
    pub results: Vec<RetrievalResult>,
    /// Top-m (id, logit) list of the relation's subject-masked query.
    pub masked_query: Vec<(TokenId, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationMetrics {
    pub entropy: f64,
    /// Integer percent of entropy relative to the ln k ceiling, truncated
    /// toward zero (2.077 vs ln 10 gives -9).
    pub entropy_pct_vs_max: i32,
    pub slope: f64,
    pub pearson_all: Option<f64>,
    pub pearson_incorrect: Option<f64>,
    pub p_at_1: f64,
    pub mrr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasReport {
    pub k: usize,
    pub per_relation: BTreeMap<String, RelationMetrics>,
    pub aggregate: RelationMetrics,
}

/// Percentage deviation of an entropy from the ln k maximum, truncated
/// toward zero to an integer (the published tables' rounding).
pub fn entropy_percent_vs_max(entropy: f64, k: usize) -> i32 {
    ((entropy / (k as f64).ln() - 1.0) * 100.0).trunc() as i32
}

/// Builds per-relation metrics and their unweighted mean.
pub fn build_report(relations: &[RelationEval], k: usize) -> Result<BiasReport> {
    if relations.is_empty() {
        return Err(Error::Metric("report needs at least one relation".into()));
    }
    let mut per_relation = BTreeMap::new();
    for rel in relations {
        let logits: Vec<f64> = rel.masked_query.iter().map(|&(_, l)| l).collect();
        let entropy = object_bias_entropy(&logits, k)?;
        let pearson_all = pearson_rank_correlation(&rel.results, PearsonSubset::All)
            .ok()
            .flatten();
        let pearson_incorrect = pearson_rank_correlation(&rel.results, PearsonSubset::Incorrect)
            .ok()
            .flatten();
        let metrics = RelationMetrics {
            entropy,
            entropy_pct_vs_max: entropy_percent_vs_max(entropy, k),
            slope: regression_slope(&logits, k)?,
            pearson_all,
            pearson_incorrect,
            p_at_1: p_at_1(&rel.results)?,
            mrr: mrr(&rel.results)?,
            n: rel.results.len(),
        };
        if per_relation.insert(rel.relation_id.clone(), metrics).is_some() {
            return Err(Error::Metric(format!(
                "duplicate relation {:?} in report input",
                rel.relation_id
            )));
        }
    }

    let nrel = per_relation.len() as f64;
    let mean = |f: &dyn Fn(&RelationMetrics) -> f64| -> f64 {
        per_relation.values().map(|m| f(m)).sum::<f64>() / nrel
    };
    let mean_opt = |f: &dyn Fn(&RelationMetrics) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = per_relation.values().filter_map(|m| f(m)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let agg_entropy = mean(&|m| m.entropy);
    let aggregate = RelationMetrics {
        entropy: agg_entropy,
        entropy_pct_vs_max: entropy_percent_vs_max(agg_entropy, k),
        slope: mean(&|m| m.slope),
        pearson_all: mean_opt(&|m| m.pearson_all),
        pearson_incorrect: mean_opt(&|m| m.pearson_incorrect),
        p_at_1: mean(&|m| m.p_at_1),
        mrr: mean(&|m| m.mrr),
        n: per_relation.values().map(|m| m.n).sum(),
    };
    Ok(BiasReport {
        k,
        per_relation,
        aggregate,
    })
}

impl BiasReport {
    /// One CSV row per relation plus an `aggregate` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "relation",
            "n",
            "p_at_1",
            "mrr",
            "entropy",
            "entropy_pct_vs_max",
            "slope",
            "pearson_all",
            "pearson_incorrect",
        ])?;
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut write_row = |name: &str, m: &RelationMetrics| -> Result<()> {
            w.write_record([
                name.to_string(),
                m.n.to_string(),
                format!("{:.6}", m.p_at_1),
                format!("{:.6}", m.mrr),
                format!("{:.6}", m.entropy),
                m.entropy_pct_vs_max.to_string(),
                format!("{:.6}", m.slope),
                fmt_opt(m.pearson_all),
                fmt_opt(m.pearson_incorrect),
            ])?;
            Ok(())
        };
        for (rel, m) in &self.per_relation {
            write_row(rel, m)?;
        }
        write_row("aggregate", &self.aggregate)?;
        w.flush().map_err(Error::Io)?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Plot data for regression-line figures: `(rank, logit)` pairs of the
/// top-k subject-masked logits.
pub fn masked_query_plot_data(masked_query: &[(TokenId, f64)], k: usize) -> Vec<(usize, f64)> {
    masked_query
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &(_, l))| (i + 1, l))
        .collect()
}

pub fn write_plot_data(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rank", "logit"])?;
    for (rank, logit) in rows {
        w.write_record([rank.to_string(), format!("{logit:.10}")])?;
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}
