//! Answer log-likelihoods `log p_LM(y | context)` from a deterministic
//! token-overlap oracle or a remote service, the retrieval-marginal answer
//! probability and LSR scores.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{token_set, Corpus};
use crate::error::{Error, Result};
use crate::remote::{RemoteClient, RemoteOptions};
use crate::scoring::{softmax, RelevanceDistribution};

pub const DEFAULT_BETA: f64 = 5.0;
pub const DEFAULT_GAMMA: f64 = 5.0;
pub const DEFAULT_TAU: f64 = 1.0;

const REMOTE_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    #[default]
    Synthetic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    pub kind: OracleKind,
    pub beta: f64,
    pub gamma: f64,
    pub endpoint: Option<String>,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            kind: OracleKind::Synthetic,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            endpoint: None,
        }
    }
}

impl OracleSpec {
    pub fn remote(endpoint: impl Into<String>) -> Self {
        Self {
            kind: OracleKind::Remote,
            endpoint: Some(endpoint.into()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.gamma >= 0.0 && self.beta.is_finite() && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "oracle beta/gamma must be finite and >= 0 (got {}, {})",
                self.beta, self.gamma
            )));
        }
        if self.kind == OracleKind::Remote && self.endpoint.is_none() {
            return Err(Error::InvalidConfig("remote oracle requires an endpoint".into()));
        }
        Ok(())
    }
}

/// The chunk-then-query prompt: `chunk + "\n\n" + query`.
pub fn concat(chunk: &str, query: &str) -> String {
    format!("{chunk}\n\n{query}")
}

pub trait LanguageOracle: Send + Sync {
    fn log_prob(&self, context: &str, target: &str) -> Result<f64>;

    /// Log-probabilities for `(context, target)` pairs, aligned by index.
    fn log_probs(&self, pairs: &[(String, String)]) -> Result<Vec<f64>> {
        pairs.par_iter().map(|(c, t)| self.log_prob(c, t)).collect()
    }
}

/// `log p = beta * overlap - gamma`, where overlap is the fraction of the
/// target's token set found in the context's token set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticOracle {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for SyntheticOracle {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl LanguageOracle for SyntheticOracle {
    fn log_prob(&self, context: &str, target: &str) -> Result<f64> {
        let t = token_set(target);
        if t.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let c = token_set(context);
        let overlap = t.intersection(&c).count() as f64 / t.len() as f64;
        Ok(self.beta * overlap - self.gamma)
    }
}

#[derive(Serialize)]
struct PairWire<'a> {
    context: &'a str,
    target: &'a str,
}

#[derive(Serialize)]
struct OracleRequest<'a> {
    pairs: Vec<PairWire<'a>>,
}

#[derive(Deserialize)]
struct OracleResponse {
    log_probs: Vec<f64>,
}

/// Oracle served over HTTP: `{"pairs": [{context, target}]}` to `{"log_probs": [..]}`.
#[derive(Debug)]
pub struct RemoteOracle {
    client: RemoteClient,
}

impl RemoteOracle {
    pub fn new(endpoint: &str, options: RemoteOptions) -> Result<Self> {
        Ok(Self {
            client: RemoteClient::new(endpoint, options)?,
        })
    }

    fn request(&self, pairs: &[(String, String)]) -> Result<Vec<f64>> {
        if pairs.iter().any(|(_, t)| token_set(t).is_empty()) {
            return Err(Error::EmptyTarget);
        }
        let body = OracleRequest {
            pairs: pairs.iter().map(|(c, t)| PairWire { context: c, target: t }).collect(),
        };
        let resp: OracleResponse = self.client.post_json(&body)?;
        if resp.log_probs.len() != pairs.len() {
            return Err(Error::RemoteUnavailable {
                endpoint: self.client.endpoint().to_string(),
                status: format!("expected {} log-probs, got {}", pairs.len(), resp.log_probs.len()),
            });
        }
        if let Some(&bad) = resp.log_probs.iter().find(|lp| !(lp.is_finite() && **lp <= 0.0)) {
            return Err(Error::InvalidLogProb(bad));
        }
        Ok(resp.log_probs)
    }
}

impl LanguageOracle for RemoteOracle {
    fn log_prob(&self, context: &str, target: &str) -> Result<f64> {
        Ok(self.request(&[(context.to_string(), target.to_string())])?[0])
    }

    fn log_probs(&self, pairs: &[(String, String)]) -> Result<Vec<f64>> {
        let batches: Vec<Vec<f64>> = pairs
            .par_chunks(REMOTE_BATCH)
            .map(|chunk| self.request(chunk))
            .collect::<Result<_>>()?;
        Ok(batches.into_iter().flatten().collect())
    }
}

/// Memoizes another oracle by `(context, target)`.
pub struct CachedOracle<O> {
    inner: O,
    cache: Mutex<HashMap<(String, String), f64>>,
}

impl<O: LanguageOracle> CachedOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl<O: LanguageOracle> LanguageOracle for CachedOracle<O> {
    fn log_prob(&self, context: &str, target: &str) -> Result<f64> {
        Ok(self.log_probs(&[(context.to_string(), target.to_string())])?[0])
    }

    fn log_probs(&self, pairs: &[(String, String)]) -> Result<Vec<f64>> {
        let missing: Vec<(String, String)> = {
            let cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            let mut seen = std::collections::HashSet::new();
            pairs
                .iter()
                .filter(|p| !cache.contains_key(*p) && seen.insert(*p))
                .cloned()
                .collect()
        };
        if !missing.is_empty() {
            let fresh = self.inner.log_probs(&missing)?;
            let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            cache.extend(missing.into_iter().zip(fresh));
        }
        let cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        Ok(pairs.iter().map(|p| cache[p]).collect())
    }
}

impl LanguageOracle for Box<dyn LanguageOracle> {
    fn log_prob(&self, context: &str, target: &str) -> Result<f64> {
        (**self).log_prob(context, target)
    }

    fn log_probs(&self, pairs: &[(String, String)]) -> Result<Vec<f64>> {
        (**self).log_probs(pairs)
    }
}

pub fn build_oracle(spec: &OracleSpec) -> Result<Box<dyn LanguageOracle>> {
    spec.validate()?;
    Ok(match spec.kind {
        OracleKind::Synthetic => Box::new(SyntheticOracle {
            beta: spec.beta,
            gamma: spec.gamma,
        }),
        OracleKind::Remote => Box::new(RemoteOracle::new(
            spec.endpoint.as_deref().unwrap_or_default(),
            RemoteOptions::default(),
        )?),
    })
}

pub fn log_prob(spec: &OracleSpec, context: &str, target: &str) -> Result<f64> {
    build_oracle(spec)?.log_prob(context, target)
}

/// Lookup of chunk text by chunk id.
pub trait ChunkTexts: Sync {
    fn chunk_text(&self, chunk_id: usize) -> Option<&str>;
}

impl ChunkTexts for Corpus {
    fn chunk_text(&self, chunk_id: usize) -> Option<&str> {
        self.chunk(chunk_id).map(|c| c.text.as_str())
    }
}

impl ChunkTexts for BTreeMap<usize, String> {
    fn chunk_text(&self, chunk_id: usize) -> Option<&str> {
        self.get(&chunk_id).map(String::as_str)
    }
}

impl ChunkTexts for [String] {
    fn chunk_text(&self, chunk_id: usize) -> Option<&str> {
        self.get(chunk_id).map(String::as_str)
    }
}

/// Answer log-likelihood given each chunk prepended to the query.
pub fn chunk_log_probs(
    oracle: &dyn LanguageOracle,
    query: &str,
    answer: &str,
    ids: &[usize],
    chunks: &(impl ChunkTexts + ?Sized),
) -> Result<Vec<f64>> {
    let pairs: Vec<(String, String)> = ids
        .iter()
        .map(|&id| {
            chunks
                .chunk_text(id)
                .map(|t| (concat(t, query), answer.to_string()))
                .ok_or(Error::MissingChunkText(id))
        })
        .collect::<Result<_>>()?;
    oracle.log_probs(&pairs)
}

/// `sum_i p_LM(answer | chunk_i, query) * P_R(chunk_i | query)`.
pub fn marginal_prob(
    oracle: &dyn LanguageOracle,
    query: &str,
    answer: &str,
    retrieval: &RelevanceDistribution,
    chunks: &(impl ChunkTexts + ?Sized),
) -> Result<f64> {
    let lps = chunk_log_probs(oracle, query, answer, retrieval.support(), chunks)?;
    let terms: Vec<f64> = lps.iter().zip(retrieval.probs()).map(|(lp, p)| lp.exp() * p).collect();
    Ok(crate::reduce::pairwise_sum(&terms))
}

/// Temperature softmax over answer log-likelihoods.
pub fn lsr_from_log_probs(log_probs: &[f64], tau: f64) -> Result<Vec<f64>> {
    if log_probs.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be positive (got {tau})")));
    }
    Ok(softmax(&log_probs.iter().map(|lp| lp / tau).collect::<Vec<_>>()))
}

/// LSR scores over `candidate_ids`, returned in candidate order.
pub fn lsr_scores(
    oracle: &dyn LanguageOracle,
    query: &str,
    answer: &str,
    candidate_ids: &[usize],
    chunks: &(impl ChunkTexts + ?Sized),
    tau: f64,
) -> Result<Vec<(usize, f64)>> {
    if candidate_ids.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let lps = chunk_log_probs(oracle, query, answer, candidate_ids, chunks)?;
    Ok(candidate_ids.iter().copied().zip(lsr_from_log_probs(&lps, tau)?).collect())
}

/// Largest absolute difference, over `topk_ids`, between LSR normalized over
/// the top-k only and over all of `all_ids`.
pub fn lsr_topk_vs_full_gap(
    oracle: &dyn LanguageOracle,
    query: &str,
    answer: &str,
    all_ids: &[usize],
    topk_ids: &[usize],
    chunks: &(impl ChunkTexts + ?Sized),
    tau: f64,
) -> Result<f64> {
    if topk_ids.iter().any(|id| !all_ids.contains(id)) {
        return Err(Error::SupportMismatch);
    }
    let full: BTreeMap<usize, f64> = lsr_scores(oracle, query, answer, all_ids, chunks, tau)?.into_iter().collect();
    let top = lsr_scores(oracle, query, answer, topk_ids, chunks, tau)?;
    Ok(top.iter().map(|(id, p)| (p - full[id]).abs()).fold(0.0, f64::max))
}
