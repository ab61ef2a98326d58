//! The four-cell intervention grid (query rewriting x corpus re-chunking),
//! invariant/variant pattern selection by LSR rank, and the variance penalty
//! over candidate subsets.

pub mod report;
pub mod rewriter;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterGrad, AdapterParams};
use crate::alignment::{AdaptedIndex, ScoredCandidates};
use crate::corpus::{Corpus, ResizeFactor};
use crate::embedding::{rank_order, top_k_scores, Embedding, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::lm_oracle::{lsr_scores, LanguageOracle, DEFAULT_TAU};
use crate::reduce::pairwise_sum;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

use rewriter::{rewrite_with_fallback, QueryRewriter};

/// Variant sets at or below this size are enumerated exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryVariant {
    Base,
    Rewritten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusVariant {
    Base,
    Resized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub query: QueryVariant,
    pub corpus: CorpusVariant,
}

impl Cell {
    pub const fn new(query: QueryVariant, corpus: CorpusVariant) -> Self {
        Self { query, corpus }
    }

    pub fn name(&self) -> String {
        format!("{}/{}", self.query.as_str(), self.corpus.as_str())
    }

    fn index(&self) -> usize {
        CELLS.iter().position(|c| c == self).unwrap()
    }
}

impl QueryVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Rewritten => "rewritten",
        }
    }
}

impl CorpusVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Resized => "resized",
        }
    }
}

/// q against D, q^r against D, q against resized D, q^r against resized D.
pub const CELLS: [Cell; 4] = [
    Cell::new(QueryVariant::Base, CorpusVariant::Base),
    Cell::new(QueryVariant::Rewritten, CorpusVariant::Base),
    Cell::new(QueryVariant::Base, CorpusVariant::Resized),
    Cell::new(QueryVariant::Rewritten, CorpusVariant::Resized),
];

/// A base corpus and its re-chunked counterpart with the overlap map back to
/// base chunk ids.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPair {
    pub base: Corpus,
    pub resized: Corpus,
    pub provenance: Vec<Vec<usize>>,
    pub factor: ResizeFactor,
}

impl CorpusPair {
    pub fn new(base: Corpus, factor: ResizeFactor) -> Result<Self> {
        let r = base.resize(factor)?;
        Ok(Self {
            base,
            resized: r.corpus,
            provenance: r.provenance,
            factor,
        })
    }

    pub fn corpus(&self, v: CorpusVariant) -> &Corpus {
        match v {
            CorpusVariant::Base => &self.base,
            CorpusVariant::Resized => &self.resized,
        }
    }

    /// Base chunk ids covered by chunk `id` of variant `v`.
    pub fn to_base(&self, v: CorpusVariant, id: usize) -> Vec<usize> {
        match v {
            CorpusVariant::Base => vec![id],
            CorpusVariant::Resized => self.provenance.get(id).cloned().unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct InterventionGrid<'a> {
    pub query: String,
    pub rewritten: String,
    /// The configured rewriter failed and the built-in rewrite was used.
    pub rewriter_fallback: bool,
    pub corpora: &'a CorpusPair,
}

impl InterventionGrid<'_> {
    pub fn query_text(&self, v: QueryVariant) -> &str {
        match v {
            QueryVariant::Base => &self.query,
            QueryVariant::Rewritten => &self.rewritten,
        }
    }

    pub fn cells(&self) -> [Cell; 4] {
        CELLS
    }
}

pub fn build_grid<'a>(query: &str, rewriter: &dyn QueryRewriter, corpora: &'a CorpusPair) -> InterventionGrid<'a> {
    let r = rewrite_with_fallback(rewriter, query);
    InterventionGrid {
        query: query.to_string(),
        rewritten: r.text,
        rewriter_fallback: r.fallback,
        corpora,
    }
}

/// How LSR mass from a resized chunk lands on the base chunks it overlaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    Sum,
}

/// Cross-cell aggregation used to rank base chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvarianceConfig {
    pub l: usize,
    pub k: usize,
    pub lambda: f64,
    pub tau: f64,
    pub subset_samples: usize,
    /// Enumerate all subsets when the variant set has at most
    /// [`EXHAUSTIVE_LIMIT`] members.
    pub exhaustive: bool,
    pub subset_seed: u64,
    pub aggregation: Aggregation,
    pub pooling: Pooling,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self {
            l: 3,
            k: 8,
            lambda: 1.0,
            tau: DEFAULT_TAU,
            subset_samples: 32,
            exhaustive: true,
            subset_seed: 0,
            aggregation: Aggregation::Mean,
            pooling: Pooling::Max,
        }
    }
}

impl InvarianceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.l >= self.k {
            return Err(Error::InvalidL { l: self.l, k: self.k });
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be finite and >= 0 (got {})", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive (got {})", self.tau)));
        }
        if self.subset_samples < 2 && !self.exhaustive {
            return Err(Error::InvalidConfig("subset_samples must be >= 2".into()));
        }
        Ok(())
    }
}

/// One cell's candidates (native chunk ids, ranked by adapted relevance) with
/// their relevance and LSR scores, plus views pooled into base chunk ids.
#[derive(Debug, Clone, PartialEq)]
pub struct CellScores {
    pub cell: Cell,
    pub candidates: Vec<usize>,
    pub relevance: Vec<f64>,
    pub lsr: Vec<f64>,
    pub base_ids: Vec<Vec<usize>>,
    pub mapped_lsr: BTreeMap<usize, f64>,
    pub mapped_relevance: BTreeMap<usize, f64>,
}

impl CellScores {
    /// Base chunk ids ranked by pooled relevance, truncated to `n`.
    pub fn top_base(&self, n: usize) -> Vec<usize> {
        let pairs: Vec<(usize, f64)> = self.mapped_relevance.iter().map(|(&c, &s)| (c, s)).collect();
        let mut ranked = pairs;
        ranked.sort_by(rank_order);
        ranked.into_iter().take(n).map(|p| p.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsrTable {
    pub k: usize,
    pub tau: f64,
    pub cells: Vec<CellScores>,
}

impl LsrTable {
    pub fn cell(&self, cell: Cell) -> &CellScores {
        &self.cells[cell.index()]
    }

    /// LSR probability of native chunk `chunk_id` in `cell`.
    pub fn entry(&self, cell: Cell, chunk_id: usize) -> Option<f64> {
        let c = self.cell(cell);
        c.candidates.iter().position(|&i| i == chunk_id).map(|p| c.lsr[p])
    }
}

/// Adapted relevance of every chunk, per cell, in [`CELLS`] order.
pub fn grid_relevance(
    base: &AdaptedIndex<'_>,
    resized: &AdaptedIndex<'_>,
    vq: &Embedding,
    vq_rewritten: &Embedding,
) -> Result<[Vec<f64>; 4]> {
    Ok([
        base.scores(vq)?,
        base.scores(vq_rewritten)?,
        resized.scores(vq)?,
        resized.scores(vq_rewritten)?,
    ])
}

/// Retrieves the top-k of every cell by `relevance` and scores the candidates
/// with LSR against `answer`.
pub fn score_grid(
    grid: &InterventionGrid<'_>,
    answer: &str,
    oracle: &dyn LanguageOracle,
    relevance: &[Vec<f64>; 4],
    k: usize,
    tau: f64,
    pooling: Pooling,
) -> Result<LsrTable> {
    if k == 0 {
        return Err(Error::EmptyCandidates);
    }
    let cells: Vec<CellScores> = CELLS
        .par_iter()
        .zip(relevance.par_iter())
        .map(|(&cell, rel)| score_cell(grid, answer, oracle, cell, rel, k, tau, pooling).map_err(|e| e.in_cell(cell.name())))
        .collect::<Result<_>>()?;
    Ok(LsrTable { k, tau, cells })
}

#[allow(clippy::too_many_arguments)]
fn score_cell(
    grid: &InterventionGrid<'_>,
    answer: &str,
    oracle: &dyn LanguageOracle,
    cell: Cell,
    rel: &[f64],
    k: usize,
    tau: f64,
    pooling: Pooling,
) -> Result<CellScores> {
    let corpus = grid.corpora.corpus(cell.corpus);
    if rel.len() != corpus.len() {
        return Err(Error::DimMismatch {
            expected: corpus.len(),
            found: rel.len(),
        });
    }
    let top = top_k_scores(rel, k);
    let candidates: Vec<usize> = top.iter().map(|p| p.0).collect();
    let relevance: Vec<f64> = top.iter().map(|p| p.1).collect();
    let lsr: Vec<f64> = lsr_scores(oracle, grid.query_text(cell.query), answer, &candidates, corpus, tau)?
        .into_iter()
        .map(|p| p.1)
        .collect();
    let base_ids: Vec<Vec<usize>> = candidates.iter().map(|&c| grid.corpora.to_base(cell.corpus, c)).collect();
    let mut mapped_lsr = BTreeMap::new();
    let mut mapped_relevance: BTreeMap<usize, f64> = BTreeMap::new();
    for ((ids, &p), &r) in base_ids.iter().zip(&lsr).zip(&relevance) {
        for &b in ids {
            let slot = mapped_lsr.entry(b).or_insert(0.0);
            *slot = match pooling {
                Pooling::Max => f64::max(*slot, p),
                Pooling::Sum => *slot + p,
            };
            mapped_relevance.entry(b).and_modify(|s: &mut f64| *s = s.max(r)).or_insert(r);
        }
    }
    Ok(CellScores {
        cell,
        candidates,
        relevance,
        lsr,
        base_ids,
        mapped_lsr,
        mapped_relevance,
    })
}

/// Invariant pattern `d_in` (top-l) and variant pattern `d_var` (the rest of
/// the top-k) over base chunk ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternPartition {
    pub d_in: Vec<usize>,
    pub d_var: Vec<usize>,
    pub l: usize,
    pub k: usize,
}

impl PatternPartition {
    /// `d_in` followed by `d_var`.
    pub fn candidates(&self) -> Vec<usize> {
        self.d_in.iter().chain(&self.d_var).copied().collect()
    }
}

/// Combines per-cell scores of one chunk; absent cells count as 0.
pub fn aggregate(values: &[Option<f64>], aggregation: Aggregation) -> f64 {
    let filled: Vec<f64> = values.iter().map(|v| v.unwrap_or(0.0)).collect();
    match aggregation {
        Aggregation::Mean => pairwise_sum(&filled) / filled.len().max(1) as f64,
        Aggregation::Min => filled.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

/// Splits ranked `(chunk_id, aggregate)` pairs into `d_in` and `d_var`.
pub fn partition_from_aggregates(mut aggregates: Vec<(usize, f64)>, l: usize, k: usize) -> Result<PatternPartition> {
    if l == 0 || l >= k {
        return Err(Error::InvalidL { l, k });
    }
    aggregates.sort_by(rank_order);
    aggregates.truncate(k);
    let ids: Vec<usize> = aggregates.into_iter().map(|p| p.0).collect();
    let split = l.min(ids.len());
    Ok(PatternPartition {
        d_in: ids[..split].to_vec(),
        d_var: ids[split..].to_vec(),
        l,
        k,
    })
}

pub fn partition_patterns(table: &LsrTable, l: usize, aggregation: Aggregation) -> Result<PatternPartition> {
    let ids: std::collections::BTreeSet<usize> = table.cells.iter().flat_map(|c| c.mapped_lsr.keys().copied()).collect();
    let aggregates = ids
        .into_iter()
        .map(|id| {
            let vals: Vec<Option<f64>> = table.cells.iter().map(|c| c.mapped_lsr.get(&id).copied()).collect();
            (id, aggregate(&vals, aggregation))
        })
        .collect();
    partition_from_aggregates(aggregates, l, table.k)
}

/// Which subsets of the variant set enter the variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetPlan {
    Exhaustive,
    Sampled { samples: usize, seed: u64 },
}

impl SubsetPlan {
    pub fn choose(cfg: &InvarianceConfig, n_var: usize, seed: u64) -> Self {
        if cfg.exhaustive && n_var <= EXHAUSTIVE_LIMIT {
            Self::Exhaustive
        } else {
            Self::Sampled {
                samples: cfg.subset_samples,
                seed,
            }
        }
    }

    /// Subsets as sorted position lists into the variant set. Sampled
    /// subsets include each element independently with probability 1/2.
    pub fn subsets(&self, n_var: usize) -> Vec<Vec<usize>> {
        match *self {
            Self::Exhaustive => {
                assert!(n_var < 32, "exhaustive enumeration over {n_var} elements");
                (0u32..1 << n_var)
                    .map(|mask| (0..n_var).filter(|i| mask >> i & 1 == 1).collect())
                    .collect()
            }
            Self::Sampled { samples, seed } => {
                let mut rng = SplitMix64::new(seed);
                (0..samples)
                    .map(|_| (0..n_var).filter(|_| rng.next_f64() < 0.5).collect())
                    .collect()
            }
        }
    }
}

/// Population variance, reduced in sorted order so the result does not
/// depend on the order of `values`.
pub fn population_variance<T: Scalar>(values: &[T]) -> T {
    if values.is_empty() {
        return T::zero();
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = T::from_usize(v.len()).unwrap();
    let mean = pairwise_sum(&v) / n;
    let mut sq: Vec<T> = v.iter().map(|&x| (x - mean) * (x - mean)).collect();
    sq.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    pairwise_sum(&sq) / n
}

/// Variance of `value(subset)` over the subsets drawn by `plan`.
pub fn subset_variance<T: Scalar>(n_var: usize, plan: SubsetPlan, value: impl Fn(&[usize]) -> T + Sync) -> T {
    let values: Vec<T> = plan.subsets(n_var).par_iter().map(|s| value(s)).collect();
    population_variance(&values)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvarianceOutcome<T: Scalar = f64> {
    pub loss: T,
    pub subsets: usize,
    /// The variant set was empty; the loss is 0 by definition.
    pub empty_variant_set: bool,
}

/// Variance over subsets `D` of `d_var` of the alignment KL restricted to
/// `d_in` plus `D`, averaged over `query_vecs`, and its gradient.
pub fn invariance_loss_and_grad<T: Scalar>(
    partition: &PatternPartition,
    query_vecs: &[&Embedding<T>],
    coarse: &EmbeddingMatrix<T>,
    llm: &EmbeddingMatrix<T>,
    params: &AdapterParams<T>,
    plan: SubsetPlan,
    dropout: Option<u64>,
) -> Result<(InvarianceOutcome<T>, AdapterGrad<T>)> {
    let mut grad = AdapterGrad::zeros_like(params);
    if partition.d_var.is_empty() {
        let outcome = InvarianceOutcome {
            loss: T::zero(),
            subsets: 0,
            empty_variant_set: true,
        };
        return Ok((outcome, grad));
    }
    if query_vecs.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    if coarse.len() != llm.len() {
        return Err(Error::SupportMismatch);
    }
    let ids = partition.candidates();
    if let Some(&bad) = ids.iter().find(|&&i| i >= coarse.len()) {
        return Err(Error::MissingChunkText(bad));
    }
    let coarse_rows: Vec<&[T]> = ids.iter().map(|&i| coarse.row(i)).collect();
    let llm_rows: Vec<&[T]> = ids.iter().map(|&i| llm.row(i)).collect();
    let scored: Vec<ScoredCandidates<T>> = query_vecs
        .iter()
        .map(|vq| ScoredCandidates::compute(vq.as_slice(), &ids, &coarse_rows, &llm_rows, params, dropout))
        .collect::<Result<_>>()?;

    let l = partition.d_in.len();
    let mut subsets = plan.subsets(partition.d_var.len());
    subsets.sort();
    let nq = T::from_usize(query_vecs.len()).unwrap();
    let per_subset: Vec<(T, Vec<(Vec<usize>, Vec<T>)>)> = subsets
        .par_iter()
        .map(|s| {
            let idx: Vec<usize> = (0..l).chain(s.iter().map(|&j| l + j)).collect();
            let parts: Vec<(T, Vec<T>)> = scored.iter().map(|sc| sc.kl_subset(&idx)).collect();
            let kls: Vec<T> = parts.iter().map(|p| p.0).collect();
            let value = pairwise_sum(&kls) / nq;
            (value, parts.into_iter().map(|p| (idx.clone(), p.1)).collect())
        })
        .collect();

    let values: Vec<T> = per_subset.iter().map(|p| p.0).collect();
    let loss = population_variance(&values);
    let m = T::from_usize(values.len()).unwrap();
    let mut sorted = values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mean = pairwise_sum(&sorted) / m;

    let two = T::one() + T::one();
    let mut coef = vec![vec![T::zero(); ids.len()]; query_vecs.len()];
    for (value, parts) in &per_subset {
        let w = two * (*value - mean) / (m * nq);
        for (q, (idx, ds)) in parts.iter().enumerate() {
            for (&i, &d) in idx.iter().zip(ds) {
                coef[q][i] += w * d;
            }
        }
    }
    for ((sc, vq), c) in scored.iter().zip(query_vecs).zip(&coef) {
        sc.backprop(vq.as_slice(), &coarse_rows, params, c, &mut grad);
    }
    let outcome = InvarianceOutcome {
        loss: loss.max(T::zero()),
        subsets: values.len(),
        empty_variant_set: false,
    };
    Ok((outcome, grad))
}

pub fn invariance_loss<T: Scalar>(
    partition: &PatternPartition,
    query_vecs: &[&Embedding<T>],
    coarse: &EmbeddingMatrix<T>,
    llm: &EmbeddingMatrix<T>,
    params: &AdapterParams<T>,
    plan: SubsetPlan,
) -> Result<InvarianceOutcome<T>> {
    Ok(invariance_loss_and_grad(partition, query_vecs, coarse, llm, params, plan, None)?.0)
}

/// `rl + lambda * invar`.
pub fn total_loss(rl: f64, invar: f64, lambda: f64) -> f64 {
    rl + lambda * invar
}
