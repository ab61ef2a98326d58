//! Planted synthetic dataset: one single-window document per chunk, the first
//! `queries` documents each holding one query's answer token.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{CorpusSection, EmbeddingSection, EvalSection, GenerationSection, PlantingSection, QueriesSection, RunConfig};
use crate::corpus::{write_jsonl, GoldLabel, ResizeFactor};
use crate::error::{Error, Result};
use crate::invariance::rewriter::{RewriterKind, RewriterSpec};
use crate::lm_oracle::OracleSpec;
use crate::provider::ProviderSpec;
use crate::rng::SplitMix64;
use crate::trainer::TrainConfig;

pub const DOCS_FILE: &str = "docs.jsonl";
pub const GOLD_FILE: &str = "gold.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

const VOCAB: usize = 400;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub docs: usize,
    pub queries: usize,
    pub window: usize,
    pub dim: usize,
    pub seed: u64,
    /// Spread of a gold chunk around its query in both spaces.
    pub noise: f64,
    pub nuisance_rank: usize,
    pub nuisance_scale: f64,
    pub rewriter: RewriterKind,
    pub rewrite_noise: f64,
    pub resized_noise: f64,
    pub train: TrainConfig,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            docs: 200,
            queries: 50,
            window: 16,
            dim: 64,
            seed: 7,
            noise: 0.5,
            nuisance_rank: 8,
            nuisance_scale: 1.5,
            rewriter: RewriterKind::Builtin,
            rewrite_noise: 0.3,
            resized_noise: 0.2,
            train: TrainConfig {
                lr0: 10.0,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Serialize)]
struct Doc {
    source_id: String,
    text: String,
}

pub fn answer(j: usize) -> String {
    format!("ans{j}")
}

fn doc_text(rng: &mut SplitMix64, j: usize, spec: &FixtureSpec) -> String {
    let mut tokens: Vec<String> = (0..spec.window).map(|_| format!("w{}", rng.next_index(VOCAB))).collect();
    if j < spec.queries {
        let slot = rng.next_index(spec.window - 1);
        tokens[slot] = format!("topic{j}");
        tokens[slot + 1] = answer(j);
    }
    tokens.join(" ")
}

pub fn labels(spec: &FixtureSpec) -> Vec<GoldLabel> {
    (0..spec.queries)
        .map(|j| GoldLabel {
            query_id: format!("q{j:03}"),
            query: format!("Which record lists the value of topic{j}"),
            gold_chunk_ids: [j].into(),
            gold_answers: vec![answer(j)],
        })
        .collect()
}

pub fn run_config(spec: &FixtureSpec, base_dir: &Path) -> RunConfig {
    let planted = |nuisance_rank, nuisance_scale| ProviderSpec {
        nuisance_rank,
        nuisance_scale,
        ..ProviderSpec::planted(spec.seed, spec.dim, spec.noise)
    };
    RunConfig {
        seed: spec.train.seed,
        corpus: CorpusSection {
            documents: DOCS_FILE.into(),
            window: spec.window,
            stride: None,
            resize_factor: ResizeFactor::HALF,
        },
        queries: QueriesSection {
            train: GOLD_FILE.into(),
            eval: Some(GOLD_FILE.into()),
        },
        embedding: EmbeddingSection {
            coarse: planted(spec.nuisance_rank, spec.nuisance_scale),
            llm: planted(0, 0.0),
        },
        planting: PlantingSection {
            gold_to_query: true,
            rewrite_noise: spec.rewrite_noise,
            resized_noise: spec.resized_noise,
        },
        oracle: OracleSpec::default(),
        rewriter: RewriterSpec {
            kind: spec.rewriter,
            endpoint: None,
        },
        train: spec.train.clone(),
        generation: GenerationSection::default(),
        eval: EvalSection::default(),
        base_dir: base_dir.to_path_buf(),
    }
}

/// Writes documents, gold labels and a config into `dir`; returns the config path.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> Result<PathBuf> {
    if spec.window < 2 || spec.queries > spec.docs || spec.queries == 0 {
        return Err(Error::InvalidConfig("fixture needs window >= 2 and 0 < queries <= docs".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut rng = SplitMix64::new(spec.seed);
    let docs: Vec<Doc> = (0..spec.docs)
        .map(|j| Doc {
            source_id: format!("doc{j:04}"),
            text: doc_text(&mut rng, j, spec),
        })
        .collect();
    write_jsonl(&dir.join(DOCS_FILE), &docs)?;
    write_jsonl(&dir.join(GOLD_FILE), &labels(spec))?;
    let cfg = run_config(spec, dir);
    cfg.validate()?;
    let text = toml::to_string(&cfg).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, text)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::read_gold_jsonl;

    #[test]
    fn writes_loadable_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec {
            docs: 12,
            queries: 4,
            ..FixtureSpec::default()
        };
        let path = write_fixture(dir.path(), &spec).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg, run_config(&spec, dir.path()));
        let gold = read_gold_jsonl(&dir.path().join(GOLD_FILE)).unwrap();
        assert_eq!(gold.len(), 4);
        let docs = std::fs::read_to_string(dir.path().join(DOCS_FILE)).unwrap();
        assert_eq!(docs.lines().count(), 12);
        assert!(docs.lines().nth(2).unwrap().contains(" ans2"));
        let again = tempfile::tempdir().unwrap();
        write_fixture(again.path(), &spec).unwrap();
        for f in [DOCS_FILE, GOLD_FILE, CONFIG_FILE] {
            assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(again.path().join(f)).unwrap());
        }
    }
}
