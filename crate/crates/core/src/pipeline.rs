//! A loaded run: corpora, providers, embedded matrices, rewritten queries and
//! the oracle, plus the evaluation and variance-report passes over them.

use std::collections::{BTreeMap, BTreeSet};

use crate::alignment::AdaptedIndex;
use crate::config::RunConfig;
use crate::corpus::{ingest_jsonl, read_gold_jsonl, GoldLabel};
use crate::embedding::top_k_scores;
use crate::error::{Error, Result};
use crate::generation::predict_answer;
use crate::invariance::report::{total_churn, variance_report, VarianceReport};
use crate::invariance::rewriter::{build_rewriter, rewrite_with_fallback};
use crate::invariance::{grid_relevance, score_grid, CorpusPair, InterventionGrid, LsrTable};
use crate::lm_oracle::{build_oracle, CachedOracle, LanguageOracle};
use crate::metrics::{exact_match, hit_at_k, EvalReport, QueryEval};
use crate::provider::{build_provider, embed_corpus, EmbeddingProvider, PlantedProvider, ProviderKind, ProviderSpec};
use crate::scoring::renormalize_topk_pairs;
use crate::trainer::{TrainData, TrainQuery};
use crate::{AdapterParams, Embedding, EmbeddingMatrix};

/// A query with its rewrite and both coarse-space vectors.
#[derive(Debug, Clone)]
pub struct QueryEntry {
    pub label: GoldLabel,
    pub rewritten: String,
    pub rewriter_fallback: bool,
    pub vq: Embedding,
    pub vq_rewritten: Embedding,
}

pub struct Workspace {
    pub config: RunConfig,
    pub corpora: CorpusPair,
    pub coarse: EmbeddingMatrix,
    pub llm: EmbeddingMatrix,
    pub coarse_resized: EmbeddingMatrix,
    pub oracle: CachedOracle<Box<dyn LanguageOracle>>,
    /// Every known query by id: training labels first, then `extra`.
    pub entries: BTreeMap<String, QueryEntry>,
    pub train_ids: Vec<String>,
    pub train: Vec<TrainQuery>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub generation: bool,
    /// Retrieve with the rewritten query instead of the original.
    pub rewritten: bool,
}

fn provider_with_anchors(
    spec: &ProviderSpec,
    cfg: &RunConfig,
    corpora: &CorpusPair,
    entries: &[(GoldLabel, String)],
) -> Result<Box<dyn EmbeddingProvider>> {
    if spec.kind != ProviderKind::Planted {
        return build_provider(spec);
    }
    let mut p = PlantedProvider::new(spec)?;
    let plant = &cfg.planting;
    if plant.gold_to_query {
        for (label, _) in entries {
            for &id in &label.gold_chunk_ids {
                let chunk = corpora.base.chunk(id).ok_or(Error::MissingChunkText(id))?;
                p.register(chunk.text.clone(), label.query.clone(), None);
            }
        }
    }
    for (label, rewritten) in entries {
        p.register(rewritten.clone(), label.query.clone(), Some(plant.rewrite_noise));
    }
    for (chunk, bases) in corpora.resized.chunks().iter().zip(&corpora.provenance) {
        if let Some(text) = bases.first().and_then(|&b| corpora.base.chunk(b)).map(|c| c.text.clone()) {
            p.register(chunk.text.clone(), text, Some(plant.resized_noise));
        }
    }
    Ok(Box::new(p))
}

impl Workspace {
    /// Loads the configured corpus and training labels. `extra` labels (for
    /// evaluation) are rewritten, embedded and planted alongside them.
    pub fn load(config: RunConfig, extra: Vec<GoldLabel>) -> Result<Self> {
        config.validate()?;
        let base = ingest_jsonl(&config.resolve(&config.corpus.documents), config.corpus.window, config.stride())?;
        let corpora = CorpusPair::new(base, config.corpus.resize_factor)?;
        let train_labels = read_gold_jsonl(&config.resolve(&config.queries.train))?;
        if train_labels.is_empty() {
            return Err(Error::EmptyQuerySet);
        }

        let rewriter = build_rewriter(&config.rewriter)?;
        let mut seen = BTreeSet::new();
        let mut labels: Vec<(GoldLabel, String, bool)> = Vec::new();
        for label in train_labels.iter().chain(&extra) {
            if !seen.insert(label.query_id.clone()) {
                continue;
            }
            if let Some(&bad) = label.gold_chunk_ids.iter().find(|&&id| id >= corpora.base.len()) {
                return Err(Error::MissingChunkText(bad));
            }
            let r = rewrite_with_fallback(rewriter.as_ref(), &label.query);
            labels.push((label.clone(), r.text, r.fallback));
        }
        let anchors: Vec<(GoldLabel, String)> = labels.iter().map(|(l, r, _)| (l.clone(), r.clone())).collect();
        let coarse_p = provider_with_anchors(&config.embedding.coarse, &config, &corpora, &anchors)?;
        let llm_p = provider_with_anchors(&config.embedding.llm, &config, &corpora, &anchors)?;
        let coarse = embed_corpus(coarse_p.as_ref(), &corpora.base, "coarse")?;
        let llm = embed_corpus(llm_p.as_ref(), &corpora.base, "llm")?;
        let coarse_resized = embed_corpus(coarse_p.as_ref(), &corpora.resized, "coarse")?;

        let mut entries = BTreeMap::new();
        for (label, rewritten, fallback) in labels {
            let vq = coarse_p.embed(&label.query)?;
            let vq_rewritten = coarse_p.embed(&rewritten)?;
            entries.insert(
                label.query_id.clone(),
                QueryEntry {
                    label,
                    rewritten,
                    rewriter_fallback: fallback,
                    vq,
                    vq_rewritten,
                },
            );
        }
        let mut train_ids = Vec::new();
        let mut train = Vec::new();
        let mut train_seen = BTreeSet::new();
        for label in &train_labels {
            if !train_seen.insert(label.query_id.clone()) {
                continue;
            }
            let e = &entries[&label.query_id];
            train_ids.push(label.query_id.clone());
            train.push(TrainQuery {
                query_id: label.query_id.clone(),
                query: label.query.clone(),
                rewritten: e.rewritten.clone(),
                answer: label.gold_answers.first().cloned(),
                vq: e.vq.clone(),
                vq_rewritten: e.vq_rewritten.clone(),
            });
        }
        let oracle = CachedOracle::new(build_oracle(&config.oracle)?);
        Ok(Self {
            config,
            corpora,
            coarse,
            llm,
            coarse_resized,
            oracle,
            entries,
            train_ids,
            train,
        })
    }

    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            queries: &self.train,
            corpora: &self.corpora,
            coarse: &self.coarse,
            llm: &self.llm,
            coarse_resized: &self.coarse_resized,
            oracle: &self.oracle,
        }
    }

    pub fn entry(&self, query_id: &str) -> Result<&QueryEntry> {
        self.entries.get(query_id).ok_or_else(|| Error::UnknownQueryId(query_id.to_string()))
    }

    /// Gold answers of every known query plus the configured distractors,
    /// sorted and deduplicated.
    pub fn candidate_pool(&self) -> Vec<String> {
        let pool: BTreeSet<String> = self
            .entries
            .values()
            .flat_map(|e| e.label.gold_answers.iter().cloned())
            .chain(self.config.generation.distractors.iter().cloned())
            .collect();
        pool.into_iter().collect()
    }

    /// Retrieval accuracy (and optionally EM) for `query_ids` under `params`.
    pub fn evaluate(&self, params: &AdapterParams, query_ids: &[String], opts: &EvalOptions) -> Result<EvalReport> {
        if query_ids.is_empty() {
            return Err(Error::EmptyQuerySet);
        }
        let index = AdaptedIndex::new(params, &self.coarse)?;
        let depth = opts.ks.iter().copied().max().unwrap_or(1).max(self.config.generation.k_bar);
        let pool = if opts.generation { self.candidate_pool() } else { Vec::new() };
        let mut per_query = Vec::with_capacity(query_ids.len());
        for qid in query_ids {
            let e = self.entry(qid)?;
            if e.label.gold_chunk_ids.is_empty() {
                return Err(Error::MissingGold(qid.clone()));
            }
            let (text, vq) = if opts.rewritten { (&e.rewritten, &e.vq_rewritten) } else { (&e.label.query, &e.vq) };
            let scores = index.scores(vq)?;
            let top = top_k_scores(&scores, depth);
            let ranked: Vec<usize> = top.iter().map(|p| p.0).collect();
            let hits = opts.ks.iter().map(|&k| (k, hit_at_k(&ranked, &e.label.gold_chunk_ids, k))).collect();
            let (em, prediction) = if opts.generation {
                let retrieval = renormalize_topk_pairs(top.clone(), self.config.generation.k_bar)?;
                let pred = predict_answer(text, &pool, &retrieval, &self.corpora.base, &self.oracle)?;
                (Some(exact_match(&pred, &e.label.gold_answers)?), Some(pred))
            } else {
                (None, None)
            };
            per_query.push(QueryEval {
                query_id: qid.clone(),
                hits,
                em,
                prediction,
            });
        }
        EvalReport::from_per_query(per_query, &opts.ks, self.config.hash())
    }

    fn grid_table<'a>(&'a self, params: &AdapterParams, e: &QueryEntry) -> Result<(InterventionGrid<'a>, LsrTable)> {
        let answer = e
            .label
            .gold_answers
            .first()
            .ok_or_else(|| Error::MissingGold(e.label.query_id.clone()))?;
        let base = AdaptedIndex::new(params, &self.coarse)?;
        let resized = AdaptedIndex::new(params, &self.coarse_resized)?;
        let grid = InterventionGrid {
            query: e.label.query.clone(),
            rewritten: e.rewritten.clone(),
            rewriter_fallback: e.rewriter_fallback,
            corpora: &self.corpora,
        };
        let rel = grid_relevance(&base, &resized, &e.vq, &e.vq_rewritten)?;
        let t = &self.config.train;
        let table = score_grid(&grid, answer, &self.oracle, &rel, t.k, t.tau, t.pooling)?;
        Ok((grid, table))
    }

    /// The four-cell relevance/LSR report for one query.
    pub fn variance_report(&self, params: &AdapterParams, query_id: &str) -> Result<VarianceReport> {
        let e = self.entry(query_id)?;
        let (grid, table) = self.grid_table(params, e)?;
        let mut report = variance_report(query_id, &grid, &table);
        report.config_hash = Some(self.config.hash());
        Ok(report)
    }

    /// Total top-5 churn summed over `query_ids`.
    pub fn churn(&self, params: &AdapterParams, query_ids: &[String]) -> Result<usize> {
        query_ids
            .iter()
            .map(|q| {
                let (_, table) = self.grid_table(params, self.entry(q)?)?;
                Ok(total_churn(&table))
            })
            .sum()
    }
}
