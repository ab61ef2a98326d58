//! Dot-product relevance scores, the top-k renormalized relevance
//! distribution and KL divergence between two such distributions.

use std::collections::BTreeMap;

use crate::embedding::{dot, rank_order, Embedding};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A probability distribution over a candidate set of chunk ids, ordered by
/// descending probability then ascending chunk id.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceDistribution<T: Scalar = f64> {
    support: Vec<usize>,
    probs: Vec<T>,
}

impl<T: Scalar> RelevanceDistribution<T> {
    /// Builds a distribution from `(chunk_id, prob)` pairs, canonicalizing order.
    pub fn from_pairs(mut pairs: Vec<(usize, T)>) -> Result<Self> {
        pairs.sort_by(rank_order);
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) || pairs.iter().any(|p| p.0 == usize::MAX) {
            return Err(Error::SupportMismatch);
        }
        let (support, probs) = pairs.into_iter().unzip();
        Ok(Self { support, probs })
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn prob_of(&self, chunk_id: usize) -> Option<T> {
        self.support.iter().position(|&c| c == chunk_id).map(|i| self.probs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        self.support.iter().copied().zip(self.probs.iter().copied())
    }

    /// Pairs sorted by chunk id.
    fn canonical(&self) -> Vec<(usize, T)> {
        let mut pairs: Vec<(usize, T)> = self.iter().collect();
        pairs.sort_by_key(|p| p.0);
        pairs
    }
}

/// `s_raw(V_q, V_r) = V_q . V_r` (and `s_pro` on LLM-space vectors).
pub fn raw_score<T: Scalar>(vq: &Embedding<T>, vd: &Embedding<T>) -> Result<T> {
    if vq.dim() != vd.dim() {
        return Err(Error::DimMismatch {
            expected: vq.dim(),
            found: vd.dim(),
        });
    }
    Ok(dot(vq.as_slice(), vd.as_slice()))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(scores: &[T]) -> Vec<T> {
    let Some(max) = scores.iter().copied().reduce(T::max) else {
        return Vec::new();
    };
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Log-softmax, computed as `s - max - ln(sum(exp(s - max)))`.
pub fn log_softmax<T: Scalar>(scores: &[T]) -> Vec<T> {
    let Some(max) = scores.iter().copied().reduce(T::max) else {
        return Vec::new();
    };
    let lse = scores.iter().map(|&s| (s - max).exp()).sum::<T>().ln();
    scores.iter().map(|&s| s - max - lse).collect()
}

/// Softmax over the `k` highest scores only (ties admit the lower chunk id).
pub fn renormalize_topk<T: Scalar>(scores: &BTreeMap<usize, T>, k: usize) -> Result<RelevanceDistribution<T>> {
    renormalize_topk_pairs(scores.iter().map(|(&c, &s)| (c, s)).collect(), k)
}

pub fn renormalize_topk_pairs<T: Scalar>(mut pairs: Vec<(usize, T)>, k: usize) -> Result<RelevanceDistribution<T>> {
    if pairs.is_empty() || k == 0 {
        return Err(Error::EmptyCandidates);
    }
    if let Some(&(c, _)) = pairs.iter().find(|p| !p.1.is_finite()) {
        return Err(Error::NonFiniteScore(c));
    }
    pairs.sort_by(rank_order);
    pairs.truncate(k);
    let scores: Vec<T> = pairs.iter().map(|p| p.1).collect();
    let probs = softmax(&scores);
    RelevanceDistribution::from_pairs(pairs.iter().map(|p| p.0).zip(probs).collect())
}

/// `KL(p || q) = sum_i p_i ln(p_i / q_i)` in nats. Both distributions must be
/// defined over the same chunk ids.
pub fn kl_divergence<T: Scalar>(p: &RelevanceDistribution<T>, q: &RelevanceDistribution<T>) -> Result<T> {
    let pc = p.canonical();
    let qc = q.canonical();
    if pc.len() != qc.len() || pc.iter().zip(&qc).any(|(a, b)| a.0 != b.0) {
        return Err(Error::SupportMismatch);
    }
    let mut total = T::zero();
    for ((_, pi), (_, qi)) in pc.iter().zip(&qc) {
        if *pi > T::zero() {
            total += *pi * (*pi / *qi).ln();
        }
    }
    Ok(total.max(T::zero()))
}

/// KL between the softmaxes of two aligned logit vectors, plus its gradient
/// with respect to the first logit vector: `dKL/da_j = p_j (ln p_j - ln q_j - KL)`.
pub fn softmax_kl_with_grad<T: Scalar>(adapted: &[T], target: &[T]) -> (T, Vec<T>) {
    let lp = log_softmax(adapted);
    let lq = log_softmax(target);
    let p: Vec<T> = lp.iter().map(|l| l.exp()).collect();
    let kl: T = p.iter().zip(lp.iter().zip(&lq)).map(|(&pi, (&a, &b))| pi * (a - b)).sum();
    let grad = p
        .iter()
        .zip(lp.iter().zip(&lq))
        .map(|(&pi, (&a, &b))| pi * (a - b - kl))
        .collect();
    (kl, grad)
}
