//! Retrieval accuracy at k, containment exact match and the evaluation report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EVAL_SCHEMA: u32 = 1;

/// Whether any gold id appears among the first `k` ranked ids.
pub fn hit_at_k(ranked: &[usize], gold: &BTreeSet<usize>, k: usize) -> bool {
    ranked.iter().take(k).any(|id| gold.contains(id))
}

pub fn acc_at_k(
    retrievals: &BTreeMap<String, Vec<usize>>,
    gold: &BTreeMap<String, BTreeSet<usize>>,
    k: usize,
) -> Result<f64> {
    if retrievals.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let mut hits = 0usize;
    for (qid, ranked) in retrievals {
        let g = gold.get(qid).ok_or_else(|| Error::MissingGold(qid.clone()))?;
        hits += hit_at_k(ranked, g, k) as usize;
    }
    Ok(hits as f64 / retrievals.len() as f64)
}

/// Lowercase, punctuation stripped, articles dropped, whitespace collapsed.
pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    lowered
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// True when some normalized gold answer occurs in the normalized prediction.
pub fn exact_match(prediction: &str, gold_answers: &[String]) -> Result<bool> {
    if gold_answers.is_empty() {
        return Err(Error::EmptyGold);
    }
    let p = normalize_answer(prediction);
    Ok(gold_answers.iter().any(|g| p.contains(&normalize_answer(g))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEval {
    pub query_id: String,
    pub hits: BTreeMap<usize, bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub em: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: u32,
    pub acc_at: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
    pub per_query: Vec<QueryEval>,
    pub config_hash: String,
}

impl EvalReport {
    /// Aggregates computed as means of the per-query booleans.
    pub fn from_per_query(per_query: Vec<QueryEval>, ks: &[usize], config_hash: impl Into<String>) -> Result<Self> {
        if per_query.is_empty() {
            return Err(Error::EmptyQuerySet);
        }
        let n = per_query.len() as f64;
        let acc_at = ks
            .iter()
            .map(|&k| {
                let hits = per_query.iter().filter(|q| q.hits.get(&k).copied().unwrap_or(false)).count();
                (k, hits as f64 / n)
            })
            .collect();
        let exact_match = if per_query.iter().all(|q| q.em.is_some()) {
            Some(per_query.iter().filter(|q| q.em == Some(true)).count() as f64 / n)
        } else {
            None
        };
        Ok(Self {
            schema: EVAL_SCHEMA,
            acc_at,
            exact_match,
            per_query,
            config_hash: config_hash.into(),
        })
    }

    pub fn table(&self) -> String {
        let mut rows: Vec<(String, String)> = self.acc_at.iter().map(|(k, v)| (format!("acc@{k}"), format!("{v:.6}"))).collect();
        if let Some(em) = self.exact_match {
            rows.push(("exact_match".into(), format!("{em:.6}")));
        }
        rows.push(("queries".into(), self.per_query.len().to_string()));
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("metric".len());
        let mut out = String::new();
        writeln!(out, "{:<w$}  value", "metric").unwrap();
        for (m, v) in rows {
            writeln!(out, "{m:<w$}  {v}").unwrap();
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn table_path(path: &Path) -> PathBuf {
    path.with_extension("txt")
}

/// Writes the JSON report to `path` and the text table next to it (`.txt`).
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(path, json)?;
    std::fs::write(table_path(path), report.table())?;
    Ok(())
}
