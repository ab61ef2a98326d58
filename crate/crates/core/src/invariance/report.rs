//! Per-cell relevance and LSR side by side, with top-5 membership churn
//! against the base cell.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{InterventionGrid, LsrTable, CELLS};
use crate::error::Result;

pub const REPORT_SCHEMA: u32 = 1;
pub const CHURN_DEPTH: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub chunk_id: usize,
    pub base_chunk_ids: Vec<usize>,
    pub relevance: f64,
    pub lsr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub query_variant: String,
    pub corpus_variant: String,
    pub query: String,
    /// Top-5 base chunk ids by pooled relevance.
    pub top5: Vec<usize>,
    pub churn: usize,
    pub triples: Vec<Triple>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub schema: u32,
    pub query_id: String,
    pub resize_factor: String,
    pub rewriter_fallback: bool,
    pub tau: f64,
    pub cells: Vec<CellReport>,
    /// Sum of per-cell churn.
    pub churn: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl VarianceReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// |symmetric difference| of each cell's top-5 base set with the base cell's.
pub fn cell_churn(table: &LsrTable) -> [usize; 4] {
    let sets: Vec<BTreeSet<usize>> = table.cells.iter().map(|c| c.top_base(CHURN_DEPTH).into_iter().collect()).collect();
    let mut out = [0; 4];
    for (o, s) in out.iter_mut().zip(&sets) {
        *o = s.symmetric_difference(&sets[0]).count();
    }
    out
}

pub fn total_churn(table: &LsrTable) -> usize {
    cell_churn(table).iter().sum()
}

pub fn variance_report(query_id: &str, grid: &InterventionGrid<'_>, table: &LsrTable) -> VarianceReport {
    let churn = cell_churn(table);
    let cells: Vec<CellReport> = CELLS
        .iter()
        .zip(churn)
        .map(|(&cell, churn)| {
            let c = table.cell(cell);
            CellReport {
                query_variant: cell.query.as_str().to_string(),
                corpus_variant: cell.corpus.as_str().to_string(),
                query: grid.query_text(cell.query).to_string(),
                top5: c.top_base(CHURN_DEPTH),
                churn,
                triples: c
                    .candidates
                    .iter()
                    .zip(&c.base_ids)
                    .zip(c.relevance.iter().zip(&c.lsr))
                    .map(|((&chunk_id, base), (&relevance, &lsr))| Triple {
                        chunk_id,
                        base_chunk_ids: base.clone(),
                        relevance,
                        lsr,
                    })
                    .collect(),
            }
        })
        .collect();
    VarianceReport {
        schema: REPORT_SCHEMA,
        query_id: query_id.to_string(),
        resize_factor: grid.corpora.factor.to_string(),
        rewriter_fallback: grid.rewriter_fallback,
        tau: table.tau,
        churn: churn.iter().sum(),
        cells,
        config_hash: None,
    }
}

#[cfg(test)]
mod tests {
    use super::super::rewriter::IdentityRewriter;
    use super::super::*;
    use super::*;
    use crate::lm_oracle::SyntheticOracle;

    fn pair() -> CorpusPair {
        let docs: Vec<(String, String)> = (0..8)
            .map(|i| (format!("s{i}"), (0..6).map(|t| format!("t{i}_{t}")).collect::<Vec<_>>().join(" ")))
            .collect();
        CorpusPair::new(Corpus::from_documents(&docs, 6, 6).unwrap(), ResizeFactor::IDENTITY).unwrap()
    }

    #[test]
    fn identity_interventions_have_no_churn_and_round_trip() {
        let pair = pair();
        let grid = build_grid("t3_1 t3_2", &IdentityRewriter, &pair);
        let rel: Vec<f64> = (0..8).map(|i| -(i as f64)).collect();
        let table = score_grid(&grid, "t3_1", &SyntheticOracle::default(), &[rel.clone(), rel.clone(), rel.clone(), rel], 6, 1.0, Pooling::Max).unwrap();
        let report = variance_report("q1", &grid, &table);
        assert_eq!(report.churn, 0);
        assert!(report.cells.iter().all(|c| c.churn == 0 && c.triples.len() == 6));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        report.save(&path).unwrap();
        assert_eq!(VarianceReport::load(&path).unwrap(), report);
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(json["schema"], 1);
        assert!(json["cells"][0]["triples"][0]["lsr"].is_f64());
    }

    #[test]
    fn drifted_rewrite_shows_churn() {
        let pair = pair();
        let grid = build_grid("t3_1", &IdentityRewriter, &pair);
        let rel: Vec<f64> = (0..8).map(|i| -(i as f64)).collect();
        let drift: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let table = score_grid(&grid, "t3_1", &SyntheticOracle::default(), &[rel.clone(), drift.clone(), rel, drift], 6, 1.0, Pooling::Max).unwrap();
        let churn = cell_churn(&table);
        assert_eq!(churn[0], 0);
        assert_eq!(churn[1], 6);
        assert_eq!(churn[2], 0);
        assert_eq!(total_churn(&table), 12);
    }
}
