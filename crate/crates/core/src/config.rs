//! Run configuration: a TOML file whose sections mirror the module configs.
//! Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::ResizeFactor;
use crate::error::{Error, Result};
use crate::generation::{DEFAULT_K_BAR, DEFAULT_MAX_TOKENS};
use crate::invariance::rewriter::{RewriterKind, RewriterSpec};
use crate::lm_oracle::{OracleKind, OracleSpec};
use crate::provider::{ProviderKind, ProviderSpec};
use crate::trainer::TrainConfig;

pub const EMBED_ENDPOINT_ENV: &str = "INVAR_EMBED_ENDPOINT";
pub const ORACLE_ENDPOINT_ENV: &str = "INVAR_ORACLE_ENDPOINT";
pub const REWRITER_ENDPOINT_ENV: &str = "INVAR_REWRITER_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// JSONL of `{"source_id", "text"}` documents.
    pub documents: PathBuf,
    pub window: usize,
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default = "default_factor")]
    pub resize_factor: ResizeFactor,
}

fn default_factor() -> ResizeFactor {
    ResizeFactor::HALF
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueriesSection {
    /// Gold-label JSONL used for training.
    pub train: PathBuf,
    /// Gold-label JSONL used by `eval` when no `--gold` is given.
    #[serde(default)]
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSection {
    pub coarse: ProviderSpec,
    pub llm: ProviderSpec,
}

/// Anchors registered with planted providers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantingSection {
    /// Gold chunks embed near their query.
    pub gold_to_query: bool,
    /// Noise of a rewritten query around its base query.
    pub rewrite_noise: f64,
    /// Noise of a resized chunk around the base chunk it starts in.
    pub resized_noise: f64,
}

impl Default for PlantingSection {
    fn default() -> Self {
        Self {
            gold_to_query: true,
            rewrite_noise: 0.3,
            resized_noise: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub k_bar: usize,
    pub max_tokens: usize,
    /// Extra candidate answers pooled with every query's gold answers.
    pub distractors: Vec<String>,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            k_bar: DEFAULT_K_BAR,
            max_tokens: DEFAULT_MAX_TOKENS,
            distractors: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { ks: vec![5, 20] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Training seed; overrides `train.seed`.
    #[serde(default)]
    pub seed: u64,
    pub corpus: CorpusSection,
    pub queries: QueriesSection,
    pub embedding: EmbeddingSection,
    #[serde(default)]
    pub planting: PlantingSection,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub rewriter: RewriterSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        Self::parse(&text, &std::fs::canonicalize(dir)?)
    }

    /// Applies the endpoint environment overrides.
    pub fn with_env_overrides(mut self) -> Result<Self> {
        self.apply_overrides(
            std::env::var(EMBED_ENDPOINT_ENV).ok(),
            std::env::var(ORACLE_ENDPOINT_ENV).ok(),
            std::env::var(REWRITER_ENDPOINT_ENV).ok(),
        );
        self.validate()?;
        Ok(self)
    }

    fn apply_overrides(&mut self, embed: Option<String>, oracle: Option<String>, rewriter: Option<String>) {
        if let Some(e) = embed {
            for spec in [&mut self.embedding.coarse, &mut self.embedding.llm] {
                if spec.kind == ProviderKind::Remote {
                    spec.endpoint = Some(e.clone());
                }
            }
        }
        if let (Some(e), OracleKind::Remote) = (oracle, self.oracle.kind) {
            self.oracle.endpoint = Some(e);
        }
        if let (Some(e), RewriterKind::Remote) = (rewriter, self.rewriter.kind) {
            self.rewriter.endpoint = Some(e);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stride = self.stride();
        if self.corpus.window == 0 || stride == 0 || stride > self.corpus.window {
            return Err(Error::InvalidWindow {
                window: self.corpus.window,
                stride,
            });
        }
        self.embedding.coarse.validate()?;
        self.embedding.llm.validate()?;
        if self.embedding.coarse.dim != self.embedding.llm.dim {
            return Err(Error::DimMismatch {
                expected: self.embedding.coarse.dim,
                found: self.embedding.llm.dim,
            });
        }
        self.oracle.validate()?;
        if self.rewriter.kind == RewriterKind::Remote && self.rewriter.endpoint.is_none() {
            return Err(Error::InvalidConfig("remote rewriter requires an endpoint".into()));
        }
        self.train.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::InvalidConfig("eval.ks must be non-empty positive integers".into()));
        }
        if self.generation.k_bar == 0 || self.generation.max_tokens == 0 {
            return Err(Error::InvalidConfig("generation.k_bar and max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.corpus.stride.unwrap_or(self.corpus.window)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn absolute(&self) -> Self {
        let mut c = self.clone();
        c.corpus.documents = self.resolve(&self.corpus.documents);
        c.queries.train = self.resolve(&self.queries.train);
        c.queries.eval = self.queries.eval.as_ref().map(|p| self.resolve(p));
        c
    }

    /// SHA-256 of the canonical JSON form, with paths resolved.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(&self.absolute()).expect("config serializes")))
    }

    /// The config as TOML with paths made absolute, for copying next to outputs.
    pub fn to_toml_absolute(&self) -> Result<String> {
        toml::to_string(&self.absolute()).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3

[corpus]
documents = "docs.jsonl"
window = 8

[queries]
train = "gold.jsonl"

[embedding.coarse]
kind = "planted"
seed = 1
dim = 16
noise = 0.5
nuisance_rank = 4
nuisance_scale = 2.0

[embedding.llm]
kind = "planted"
seed = 1
dim = 16
noise = 0.5

[train]
steps = 10
k = 6
l = 2
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = RunConfig::parse(MINIMAL, Path::new("/data")).unwrap();
        assert_eq!(cfg.stride(), 8);
        assert_eq!(cfg.corpus.resize_factor, ResizeFactor::HALF);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.rank, 16);
        assert_eq!(cfg.eval.ks, vec![5, 20]);
        assert_eq!(cfg.generation.k_bar, 5);
        assert_eq!(cfg.resolve(Path::new("docs.jsonl")), PathBuf::from("/data/docs.jsonl"));
        let again = RunConfig::parse(&cfg.to_toml_absolute().unwrap(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again.resolve(&again.corpus.documents), PathBuf::from("/data/docs.jsonl"));
        assert_eq!(cfg.hash(), again.hash());
        assert_ne!(cfg.hash(), RunConfig::parse(MINIMAL, Path::new("/other")).unwrap().hash());
    }

    #[test]
    fn rejects_bad_values() {
        let bad_window = MINIMAL.replace("window = 8", "window = 0");
        assert!(matches!(RunConfig::parse(&bad_window, Path::new(".")), Err(Error::InvalidWindow { .. })));
        let unknown = MINIMAL.replace("[train]", "[train]\nbogus = 1");
        assert!(matches!(RunConfig::parse(&unknown, Path::new(".")), Err(Error::InvalidConfig(_))));
        let bad_l = MINIMAL.replace("l = 2", "l = 6");
        assert!(matches!(RunConfig::parse(&bad_l, Path::new(".")), Err(Error::InvalidL { .. })));
    }

    #[test]
    fn endpoint_overrides_only_touch_remote_specs() {
        let remote = MINIMAL.to_string() + "\n[oracle]\nkind = \"remote\"\nendpoint = \"http://a\"\n";
        let mut cfg = RunConfig::parse(&remote, Path::new(".")).unwrap();
        cfg.apply_overrides(Some("http://e".into()), Some("http://o".into()), Some("http://r".into()));
        assert_eq!(cfg.oracle.endpoint.as_deref(), Some("http://o"));
        assert_eq!(cfg.embedding.coarse.endpoint, None);
        assert_eq!(cfg.rewriter.endpoint, None);
    }
}
