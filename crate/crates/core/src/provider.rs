//! Embedding providers.
//!
//! * `synthetic`: a pure function of `(seed, dim, text)`; FNV-1a of the text
//!   seeds a splitmix64 stream whose Box-Muller draws form the vector.
//! * `planted`: synthetic vectors, except that registered texts are pulled
//!   toward an anchor text (`normalize(anchor + noise * own)`), optionally with
//!   a shared low-rank nuisance component added on top.
//! * `remote`: batches of texts POSTed to an HTTP endpoint.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::embedding::{Embedding, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::remote::{RemoteClient, RemoteOptions};
use crate::rng::{fnv1a64, gaussian_vec, SplitMix64};
use crate::scalar::Scalar;

const ZERO_RETRIES: u64 = 3;
const NUISANCE_SALT: u64 = 0x6e75_6973_616e_6365;
const BASIS_SALT: u64 = 0x6261_7369_735f_6e75;
const MAX_ANCHOR_DEPTH: usize = 4;
const REMOTE_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Synthetic,
    Planted,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSpec {
    pub kind: ProviderKind,
    #[serde(default)]
    pub seed: u64,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Planted only: weight of a text's own vector relative to its anchor.
    #[serde(default)]
    pub noise: f64,
    /// Planted only: rank of the shared nuisance subspace (0 disables it).
    #[serde(default)]
    pub nuisance_rank: usize,
    #[serde(default)]
    pub nuisance_scale: f64,
}

impl ProviderSpec {
    pub fn synthetic(seed: u64, dim: usize) -> Self {
        Self {
            kind: ProviderKind::Synthetic,
            seed,
            dim,
            endpoint: None,
            noise: 0.0,
            nuisance_rank: 0,
            nuisance_scale: 0.0,
        }
    }

    pub fn planted(seed: u64, dim: usize, noise: f64) -> Self {
        Self {
            kind: ProviderKind::Planted,
            noise,
            ..Self::synthetic(seed, dim)
        }
    }

    pub fn remote(endpoint: impl Into<String>, dim: usize) -> Self {
        Self {
            kind: ProviderKind::Remote,
            endpoint: Some(endpoint.into()),
            ..Self::synthetic(0, dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidProvider(m.to_string()));
        match self.kind {
            ProviderKind::Remote => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return bad("remote provider requires an endpoint");
                }
                if self.dim == 0 {
                    return bad("dim must be positive");
                }
            }
            ProviderKind::Synthetic | ProviderKind::Planted => {
                if self.dim < 2 {
                    return bad("synthetic providers require dim >= 2");
                }
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise must be finite and non-negative");
        }
        if !(self.nuisance_scale.is_finite() && self.nuisance_scale >= 0.0) {
            return bad("nuisance_scale must be finite and non-negative");
        }
        if self.nuisance_rank >= self.dim && self.nuisance_rank > 0 {
            return bad("nuisance_rank must be below dim");
        }
        Ok(())
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Embedding<f64>>;

    /// Remote providers embed in batches; local ones embed per text.
    fn embed_batch(&self, texts: &[&str], _batch_index: usize) -> Result<Vec<Embedding<f64>>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }

    fn batch_size(&self) -> Option<usize> {
        None
    }
}

/// The synthetic embedding of `text`: unit-normalized Box-Muller draws from
/// `splitmix64(fnv1a64(text) ^ seed)`. A degenerate draw is retried from the
/// next hash value, up to three times.
pub fn synthetic_vector(seed: u64, dim: usize, text: &str) -> Result<Embedding<f64>> {
    let h = fnv1a64(text.as_bytes()) ^ seed;
    for retry in 0..=ZERO_RETRIES {
        let mut rng = SplitMix64::new(h.wrapping_add(retry));
        match Embedding::normalized(gaussian_vec(&mut rng, dim)) {
            Err(Error::ZeroVector) => continue,
            other => return other,
        }
    }
    Err(Error::ZeroVector)
}

#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    seed: u64,
    dim: usize,
}

impl SyntheticProvider {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding<f64>> {
        synthetic_vector(self.seed, self.dim, text)
    }
}

#[derive(Debug, Clone)]
struct Anchor {
    text: String,
    noise: Option<f64>,
}

#[derive(Debug, Clone)]
struct Nuisance {
    /// `dim x rank`, orthonormal columns, row-major.
    basis: Vec<f64>,
    rank: usize,
    scale: f64,
}

#[derive(Debug, Clone)]
pub struct PlantedProvider {
    seed: u64,
    dim: usize,
    noise: f64,
    anchors: HashMap<String, Anchor>,
    nuisance: Option<Nuisance>,
}

impl PlantedProvider {
    pub fn new(spec: &ProviderSpec) -> Result<Self> {
        spec.validate()?;
        let nuisance = (spec.nuisance_rank > 0 && spec.nuisance_scale > 0.0).then(|| Nuisance {
            basis: orthonormal_basis(spec.seed ^ BASIS_SALT, spec.dim, spec.nuisance_rank),
            rank: spec.nuisance_rank,
            scale: spec.nuisance_scale,
        });
        Ok(Self {
            seed: spec.seed,
            dim: spec.dim,
            noise: spec.noise,
            anchors: HashMap::new(),
            nuisance,
        })
    }

    /// Registers `text` to embed near `anchor`. `noise` overrides the spec noise.
    pub fn register(&mut self, text: impl Into<String>, anchor: impl Into<String>, noise: Option<f64>) {
        let text = text.into();
        let anchor = anchor.into();
        if text != anchor {
            self.anchors.insert(text, Anchor { text: anchor, noise });
        }
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors.len()
    }

    fn anchored(&self, text: &str, depth: usize) -> Result<Embedding<f64>> {
        let own = synthetic_vector(self.seed, self.dim, text)?;
        let Some(anchor) = self.anchors.get(text).filter(|_| depth < MAX_ANCHOR_DEPTH) else {
            return Ok(own);
        };
        let base = self.anchored(&anchor.text, depth + 1)?;
        let noise = anchor.noise.unwrap_or(self.noise);
        if noise == 0.0 {
            return Ok(base);
        }
        Embedding::normalized(
            base.as_slice()
                .iter()
                .zip(own.as_slice())
                .map(|(a, o)| a + noise * o)
                .collect(),
        )
    }
}

impl EmbeddingProvider for PlantedProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding<f64>> {
        let base = self.anchored(text, 0)?;
        let Some(nu) = &self.nuisance else {
            return Ok(base);
        };
        let coords = synthetic_vector(self.seed ^ NUISANCE_SALT, nu.rank.max(2), text)?;
        let mut values = base.into_vec();
        for (i, v) in values.iter_mut().enumerate() {
            let row = &nu.basis[i * nu.rank..(i + 1) * nu.rank];
            *v += nu.scale * row.iter().zip(coords.as_slice()).map(|(b, c)| b * c).sum::<f64>();
        }
        Embedding::normalized(values)
    }
}

fn orthonormal_basis(seed: u64, dim: usize, rank: usize) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while cols.len() < rank {
        let mut v = gaussian_vec(&mut rng, dim);
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let mut basis = vec![0.0; dim * rank];
    for (j, c) in cols.iter().enumerate() {
        for (i, x) in c.iter().enumerate() {
            basis[i * rank + j] = *x;
        }
    }
    basis
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
    dim: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

#[derive(Debug)]
pub struct RemoteProvider {
    client: RemoteClient,
    dim: usize,
}

impl RemoteProvider {
    pub fn new(endpoint: &str, dim: usize, options: RemoteOptions) -> Result<Self> {
        Ok(Self {
            client: RemoteClient::new(endpoint, options)?,
            dim,
        })
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding<f64>> {
        self.embed_batch(&[text], 0)?.pop().ok_or(Error::BatchSizeMismatch {
            batch: 0,
            expected: 1,
            got: 0,
        })
    }

    fn embed_batch(&self, texts: &[&str], batch_index: usize) -> Result<Vec<Embedding<f64>>> {
        let resp: EmbedResponse = self.client.post_json(&EmbedRequest { texts, dim: self.dim })?;
        if resp.embeddings.len() != texts.len() {
            return Err(Error::BatchSizeMismatch {
                batch: batch_index,
                expected: texts.len(),
                got: resp.embeddings.len(),
            });
        }
        resp.embeddings
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(Error::DimMismatch {
                        expected: self.dim,
                        found: v.len(),
                    });
                }
                Embedding::normalized(v)
            })
            .collect()
    }

    fn batch_size(&self) -> Option<usize> {
        Some(REMOTE_BATCH)
    }
}

/// Builds a provider from its spec. Planted providers start with no anchors.
pub fn build_provider(spec: &ProviderSpec) -> Result<Box<dyn EmbeddingProvider>> {
    spec.validate()?;
    Ok(match spec.kind {
        ProviderKind::Synthetic => Box::new(SyntheticProvider::new(spec.seed, spec.dim)),
        ProviderKind::Planted => Box::new(PlantedProvider::new(spec)?),
        ProviderKind::Remote => Box::new(RemoteProvider::new(
            spec.endpoint.as_deref().unwrap_or_default(),
            spec.dim,
            RemoteOptions::default(),
        )?),
    })
}

pub fn embed_text(spec: &ProviderSpec, text: &str) -> Result<Embedding<f64>> {
    build_provider(spec)?.embed(text)
}

/// Embeds every chunk. Row order is chunk id order regardless of scheduling.
pub fn embed_corpus<T: Scalar>(
    provider: &dyn EmbeddingProvider,
    corpus: &Corpus,
    provider_tag: &str,
) -> Result<EmbeddingMatrix<T>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let texts = corpus.texts();
    let rows: Vec<Embedding<f64>> = match provider.batch_size() {
        Some(size) => {
            let batches: Vec<Vec<Embedding<f64>>> = texts
                .chunks(size)
                .enumerate()
                .map(|(b, batch)| provider.embed_batch(batch, b))
                .collect::<Result<_>>()?;
            batches.into_iter().flatten().collect()
        }
        None => texts
            .par_iter()
            .enumerate()
            .map(|(chunk_id, t)| {
                provider.embed(t).map_err(|e| Error::ChunkEmbedding {
                    chunk_id,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?,
    };
    if let Some(row) = rows.iter().find(|r| r.dim() != provider.dim()) {
        return Err(Error::DimMismatch {
            expected: provider.dim(),
            found: row.dim(),
        });
    }
    EmbeddingMatrix::from_rows(rows.iter().map(Embedding::cast).collect(), provider_tag, corpus.label())
}
