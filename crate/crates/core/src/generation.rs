//! Generation-stage plumbing: chunk-prefixed prompt instances, greedy
//! packing, the answer negative log-likelihood and candidate-pool answer
//! prediction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, write_jsonl};
use crate::error::{Error, Result};
use crate::lm_oracle::{concat, marginal_prob, ChunkTexts, LanguageOracle};
use crate::reduce::pairwise_sum;
use crate::scoring::RelevanceDistribution;

pub const DEFAULT_K_BAR: usize = 5;
pub const DEFAULT_MAX_TOKENS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub chunk_id: usize,
    pub prompt_text: String,
    pub target: String,
    /// Tokens in prompt plus target.
    pub token_count: usize,
}

impl PromptInstance {
    pub fn new(chunk_id: usize, chunk_text: &str, query: &str, target: &str) -> Self {
        let prompt_text = concat(chunk_text, query);
        let token_count = tokenize(&prompt_text).len() + tokenize(target).len();
        Self {
            chunk_id,
            prompt_text,
            target: target.to_string(),
            token_count,
        }
    }
}

/// One instance per retrieved chunk, for the first `k_bar` chunks in
/// retrieval order.
pub fn expand_instances(
    query: &str,
    answer: &str,
    retrieved: &[usize],
    chunks: &(impl ChunkTexts + ?Sized),
    k_bar: usize,
) -> Result<Vec<PromptInstance>> {
    if retrieved.is_empty() || k_bar == 0 {
        return Err(Error::NoRetrievedChunks);
    }
    retrieved
        .iter()
        .take(k_bar)
        .map(|&id| {
            let text = chunks.chunk_text(id).ok_or(Error::MissingChunkText(id))?;
            Ok(PromptInstance::new(id, text, query, answer))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pack {
    /// Positions into the packed instance list, in input order.
    pub members: Vec<usize>,
    pub token_count: usize,
    /// A single instance longer than the limit.
    pub oversize: bool,
}

/// Greedy packing in input order; an instance that does not fit the open pack
/// starts a new one.
pub fn pack_examples(instances: &[PromptInstance], max_tokens: usize) -> Vec<Pack> {
    let mut packs: Vec<Pack> = Vec::new();
    let mut open: Option<Pack> = None;
    for (i, inst) in instances.iter().enumerate() {
        let n = inst.token_count;
        if n > max_tokens {
            packs.extend(open.take());
            packs.push(Pack {
                members: vec![i],
                token_count: n,
                oversize: true,
            });
            continue;
        }
        match &mut open {
            Some(p) if p.token_count + n <= max_tokens => {
                p.members.push(i);
                p.token_count += n;
            }
            _ => {
                packs.extend(open.take());
                open = Some(Pack {
                    members: vec![i],
                    token_count: n,
                    oversize: false,
                });
            }
        }
    }
    packs.extend(open);
    packs
}

/// `-sum_i log p_LM(target_i | prompt_i)`.
pub fn gen_loss(instances: &[PromptInstance], oracle: &dyn LanguageOracle) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::NoRetrievedChunks);
    }
    let pairs: Vec<(String, String)> = instances.iter().map(|i| (i.prompt_text.clone(), i.target.clone())).collect();
    let mut lps = oracle.log_probs(&pairs)?;
    lps.sort_by(f64::total_cmp);
    Ok(-pairwise_sum(&lps))
}

/// The candidate with the highest retrieval-marginal probability; ties go to
/// the lexicographically smallest candidate.
pub fn predict_answer(
    query: &str,
    candidates: &[String],
    retrieval: &RelevanceDistribution,
    chunks: &(impl ChunkTexts + ?Sized),
    oracle: &dyn LanguageOracle,
) -> Result<String> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidatePool);
    }
    let mut best: Option<(&String, f64)> = None;
    for c in candidates {
        let m = marginal_prob(oracle, query, c, retrieval, chunks)?;
        best = match best {
            Some((b, bm)) if bm > m || (bm == m && b <= c) => Some((b, bm)),
            _ => Some((c, m)),
        };
    }
    Ok(best.unwrap().0.clone())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub prompt: String,
    pub target: String,
    pub pack_id: usize,
}

/// JSONL of packed instances for an external fine-tuning run.
pub fn export_finetune(instances: &[PromptInstance], max_tokens: usize, path: &Path) -> Result<Vec<Pack>> {
    let packs = pack_examples(instances, max_tokens);
    let records: Vec<ExportRecord> = packs
        .iter()
        .enumerate()
        .flat_map(|(pack_id, p)| {
            p.members.iter().map(move |&i| ExportRecord {
                prompt: instances[i].prompt_text.clone(),
                target: instances[i].target.clone(),
                pack_id,
            })
        })
        .collect();
    write_jsonl(path, &records)?;
    Ok(packs)
}
