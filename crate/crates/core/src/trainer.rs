//! Gradient descent on `L_rl + lambda * L_invar` over adapter parameters,
//! with a cosine schedule, checkpointing and exact resumption.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterGrad, AdapterParams, AdapterSide, DEFAULT_ALPHA, DEFAULT_DROPOUT, DEFAULT_RANK};
use crate::alignment::{build_batch_from_scores, rl_loss_and_grad, AdaptedIndex};
use crate::embedding::{Embedding, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::invariance::{
    grid_relevance, invariance_loss_and_grad, partition_patterns, score_grid, total_loss, Aggregation, CorpusPair,
    InterventionGrid, InvarianceConfig, Pooling, SubsetPlan,
};
use crate::lm_oracle::{LanguageOracle, DEFAULT_TAU};
use crate::reduce::{pairwise_sum, tree_reduce};
use crate::rng::{mix, SplitMix64};

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 50;
const BATCH_SALT: u64 = 0xba7c_4000_0000_0001;
const DROPOUT_SALT: u64 = 0xd409_0000_0000_0002;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub k: usize,
    pub l: usize,
    pub lambda: f64,
    pub tau: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub side: AdapterSide,
    /// 0 is plain gradient descent.
    pub momentum: f64,
    pub subset_samples: usize,
    pub exhaustive: bool,
    pub aggregation: Aggregation,
    pub pooling: Pooling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-2,
            steps: 500,
            batch_size: 64,
            schedule: Schedule::Cosine,
            k: 8,
            l: 3,
            lambda: 1.0,
            tau: DEFAULT_TAU,
            seed: 0,
            eval_every: 100,
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            dropout_p: DEFAULT_DROPOUT,
            side: AdapterSide::Document,
            momentum: 0.0,
            subset_samples: 32,
            exhaustive: true,
            aggregation: Aggregation::Mean,
            pooling: Pooling::Max,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive (got {})", self.lr0));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("steps, batch_size and eval_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1) (got {})", self.momentum));
        }
        self.invariance().validate()
    }

    pub fn invariance(&self) -> InvarianceConfig {
        InvarianceConfig {
            l: self.l,
            k: self.k,
            lambda: self.lambda,
            tau: self.tau,
            subset_samples: self.subset_samples,
            exhaustive: self.exhaustive,
            subset_seed: self.seed,
            aggregation: self.aggregation,
            pooling: self.pooling,
        }
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

pub fn lr_at(cfg: &TrainConfig, step: usize) -> Result<f64> {
    if step > cfg.steps {
        return Err(Error::StepOutOfRange { step, steps: cfg.steps });
    }
    Ok(match cfg.schedule {
        Schedule::Constant => cfg.lr0,
        Schedule::Cosine => cfg.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos()),
    })
}

/// A training query with its coarse-space vectors for both query variants.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainQuery {
    pub query_id: String,
    pub query: String,
    pub rewritten: String,
    pub answer: Option<String>,
    pub vq: Embedding,
    pub vq_rewritten: Embedding,
}

pub struct TrainData<'a> {
    pub queries: &'a [TrainQuery],
    pub corpora: &'a CorpusPair,
    /// Coarse and LLM-space rows of the base corpus.
    pub coarse: &'a EmbeddingMatrix,
    pub llm: &'a EmbeddingMatrix,
    /// Coarse rows of the resized corpus.
    pub coarse_resized: &'a EmbeddingMatrix,
    pub oracle: &'a dyn LanguageOracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub rl: f64,
    pub invar: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed steps.
    pub step: usize,
    pub params: AdapterParams,
    pub lr: f64,
    pub loss_history: Vec<LossRecord>,
    /// Training queries consumed so far.
    pub rng_cursor: u64,
    pub velocity: Option<AdapterGrad>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    step: usize,
    lr: f64,
    rng_cursor: u64,
    config_hash: String,
    loss_history: Vec<LossRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    velocity: Option<String>,
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{step}.ivad"))
}

pub fn state_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("state_{step}.json"))
}

fn grad_to_hex(g: &AdapterGrad) -> String {
    let bytes: Vec<u8> = g.da.iter().chain(&g.db).flat_map(|x| x.to_le_bytes()).collect();
    hex::encode(bytes)
}

fn grad_from_hex(s: &str, params: &AdapterParams) -> Option<AdapterGrad> {
    let bytes = hex::decode(s).ok()?;
    let n = params.a.len();
    if bytes.len() != 8 * (n + params.b.len()) {
        return None;
    }
    let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Some(AdapterGrad {
        da: vals[..n].to_vec(),
        db: vals[n..].to_vec(),
    })
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, dim: usize) -> Result<Self> {
        Ok(Self {
            step: 0,
            params: AdapterParams::init(dim, cfg.rank, cfg.alpha, cfg.dropout_p, cfg.seed, cfg.side)?,
            lr: lr_at(cfg, 0)?,
            loss_history: Vec::new(),
            rng_cursor: 0,
            velocity: None,
        })
    }

    /// Writes `ckpt_<step>.ivad` and `state_<step>.json` into `dir`.
    pub fn save(&self, dir: &Path, cfg: &TrainConfig) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let ckpt = checkpoint_path(dir, self.step);
        self.params.save(&ckpt)?;
        let file = StateFile {
            step: self.step,
            lr: self.lr,
            rng_cursor: self.rng_cursor,
            config_hash: cfg.hash(),
            loss_history: self.loss_history.clone(),
            velocity: self.velocity.as_ref().map(grad_to_hex),
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        fs::write(state_path(dir, self.step), text)?;
        Ok(ckpt)
    }
}

/// Restores the state saved alongside `checkpoint` (a `ckpt_<step>.ivad`).
pub fn resume(checkpoint: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: checkpoint.to_path_buf(),
        reason,
    };
    let params = AdapterParams::load(checkpoint)?;
    let step: usize = checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("ckpt_"))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| corrupt("file name is not ckpt_<step>.ivad".into()))?;
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(state_path(dir, step)).map_err(|e| corrupt(format!("state file: {e}")))?;
    let file: StateFile = serde_json::from_str(&text).map_err(|e| corrupt(format!("state file: {e}")))?;
    let current = cfg.hash();
    if file.config_hash != current {
        return Err(Error::ConfigMismatch {
            stored: file.config_hash,
            current,
        });
    }
    if file.step != step || file.loss_history.len() != step {
        return Err(corrupt("state file does not match checkpoint step".into()));
    }
    let velocity = match &file.velocity {
        Some(h) => Some(grad_from_hex(h, &params).ok_or_else(|| corrupt("bad velocity".into()))?),
        None => None,
    };
    Ok(TrainState {
        step,
        params,
        lr: file.lr,
        loss_history: file.loss_history,
        rng_cursor: file.rng_cursor,
        velocity,
    })
}

/// Query indices for the batch starting at `cursor`: each epoch is a seeded
/// shuffle of all queries, consumed round-robin.
pub fn batch_indices(seed: u64, n: usize, cursor: u64, size: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(size);
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = u64::MAX;
    for pos in cursor..cursor + size as u64 {
        let e = pos / n as u64;
        if e != epoch {
            epoch = e;
            order = (0..n).collect();
            SplitMix64::new(mix(seed ^ BATCH_SALT, e)).shuffle(&mut order);
        }
        out.push(order[(pos % n as u64) as usize]);
    }
    out
}

/// Per-step losses and gradients, before the update.
#[derive(Debug, Clone)]
pub struct StepGradient {
    pub rl: f64,
    pub invar: f64,
    pub grad_rl: AdapterGrad,
    pub grad_invar: AdapterGrad,
}

impl StepGradient {
    pub fn total(&self, lambda: f64) -> f64 {
        total_loss(self.rl, self.invar, lambda)
    }

    pub fn combined(&self, lambda: f64) -> AdapterGrad {
        let mut g = self.grad_rl.clone();
        if lambda != 0.0 {
            g.add_scaled(&self.grad_invar, lambda);
        }
        g
    }
}

fn mean_grads(parts: Vec<AdapterGrad>, params: &AdapterParams) -> AdapterGrad {
    let n = parts.len();
    match tree_reduce(parts, AdapterGrad::sum) {
        Some(mut g) => {
            g.scale(1.0 / n as f64);
            g
        }
        None => AdapterGrad::zeros_like(params),
    }
}

/// Mean alignment loss and gradient over `batch`, plus the mean invariance
/// loss and gradient when `lambda > 0`.
pub fn step_gradient(
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    params: &AdapterParams,
    step: usize,
    batch: &[usize],
) -> Result<StepGradient> {
    let base = AdaptedIndex::new(params, data.coarse)?;
    let dropout = (cfg.dropout_p > 0.0).then(|| mix(cfg.seed ^ DROPOUT_SALT, step as u64));

    let rl_parts: Vec<(f64, AdapterGrad)> = batch
        .par_iter()
        .map(|&qi| {
            let q = &data.queries[qi];
            let scores = base.scores(&q.vq)?;
            let b = build_batch_from_scores(q.query_id.clone(), &q.vq, &scores, data.coarse, data.llm, cfg.k)?;
            rl_loss_and_grad(&b, params, dropout)
        })
        .collect::<Result<_>>()?;
    let rl_losses: Vec<f64> = rl_parts.iter().map(|p| p.0).collect();
    let rl = pairwise_sum(&rl_losses) / batch.len() as f64;
    let grad_rl = mean_grads(rl_parts.into_iter().map(|p| p.1).collect(), params);

    if cfg.lambda == 0.0 {
        return Ok(StepGradient {
            rl,
            invar: 0.0,
            grad_rl,
            grad_invar: AdapterGrad::zeros_like(params),
        });
    }

    let resized = AdaptedIndex::new(params, data.coarse_resized)?;
    let inv_cfg = cfg.invariance();
    let inv_parts: Vec<(f64, AdapterGrad)> = batch
        .par_iter()
        .map(|&qi| {
            let q = &data.queries[qi];
            let answer = q.answer.as_deref().ok_or_else(|| Error::MissingGold(q.query_id.clone()))?;
            let grid = InterventionGrid {
                query: q.query.clone(),
                rewritten: q.rewritten.clone(),
                rewriter_fallback: false,
                corpora: data.corpora,
            };
            let rel = grid_relevance(&base, &resized, &q.vq, &q.vq_rewritten)?;
            let table = score_grid(&grid, answer, data.oracle, &rel, cfg.k, cfg.tau, cfg.pooling)?;
            let partition = partition_patterns(&table, cfg.l, cfg.aggregation)?;
            let plan = SubsetPlan::choose(
                &inv_cfg,
                partition.d_var.len(),
                mix(mix(inv_cfg.subset_seed, step as u64), qi as u64),
            );
            let (out, g) = invariance_loss_and_grad(
                &partition,
                &[&q.vq, &q.vq_rewritten],
                data.coarse,
                data.llm,
                params,
                plan,
                dropout,
            )?;
            Ok((out.loss, g))
        })
        .collect::<Result<_>>()?;
    let inv_losses: Vec<f64> = inv_parts.iter().map(|p| p.0).collect();
    let invar = pairwise_sum(&inv_losses) / batch.len() as f64;
    let grad_invar = mean_grads(inv_parts.into_iter().map(|p| p.1).collect(), params);
    Ok(StepGradient {
        rl,
        invar,
        grad_rl,
        grad_invar,
    })
}

/// Training loop state over fixed data and config.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: TrainData<'a>,
    state: TrainState,
    checkpoint_dir: Option<PathBuf>,
    initial_total: Option<f64>,
    over_count: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: TrainData<'a>) -> Result<Self> {
        cfg.validate()?;
        if data.queries.is_empty() {
            return Err(Error::EmptyQuerySet);
        }
        let state = TrainState::init(&cfg, data.coarse.dim())?;
        Ok(Self::with_state(cfg, data, state))
    }

    pub fn from_state(cfg: TrainConfig, data: TrainData<'a>, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if data.queries.is_empty() {
            return Err(Error::EmptyQuerySet);
        }
        if state.params.dim() != data.coarse.dim() {
            return Err(Error::DimMismatch {
                expected: data.coarse.dim(),
                found: state.params.dim(),
            });
        }
        Ok(Self::with_state(cfg, data, state))
    }

    fn with_state(cfg: TrainConfig, data: TrainData<'a>, state: TrainState) -> Self {
        let initial_total = state.loss_history.first().map(|r| r.total);
        let mut over_count = 0;
        if let Some(init) = initial_total.filter(|v| *v > 0.0) {
            over_count = state
                .loss_history
                .iter()
                .rev()
                .take_while(|r| r.total > DIVERGENCE_FACTOR * init)
                .count();
        }
        Self {
            cfg,
            data,
            state,
            checkpoint_dir: None,
            initial_total,
            over_count,
        }
    }

    /// Checkpoints every `eval_every` steps and at the end go into `dir`.
    pub fn checkpoint_into(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn step(&mut self) -> Result<LossRecord> {
        let s = self.state.step;
        let lr = lr_at(&self.cfg, s)?;
        let n = self.data.queries.len();
        let size = self.cfg.batch_size.min(n);
        let batch = batch_indices(self.cfg.seed, n, self.state.rng_cursor, size);
        let sg = step_gradient(&self.cfg, &self.data, &self.state.params, s, &batch)?;
        let total = sg.total(self.cfg.lambda);
        let grad = sg.combined(self.cfg.lambda);
        if !total.is_finite() || !grad.is_finite() {
            if let Some(dir) = &self.checkpoint_dir {
                self.state.save(dir, &self.cfg)?;
            }
            return Err(Error::NonFiniteLoss { step: s });
        }
        let init = *self.initial_total.get_or_insert(total);
        if init > 0.0 && total > DIVERGENCE_FACTOR * init {
            self.over_count += 1;
            if self.over_count >= DIVERGENCE_PATIENCE {
                return Err(Error::DivergenceGuard { step: s });
            }
        } else {
            self.over_count = 0;
        }

        let update = if self.cfg.momentum > 0.0 {
            let mut v = self.state.velocity.take().unwrap_or_else(|| AdapterGrad::zeros_like(&self.state.params));
            v.scale(self.cfg.momentum);
            v.add_scaled(&grad, 1.0);
            self.state.velocity = Some(v.clone());
            v
        } else {
            grad
        };
        self.state.params.apply_update(&update, lr);
        let record = LossRecord {
            step: s,
            rl: sg.rl,
            invar: sg.invar,
            total,
            lr,
        };
        self.state.loss_history.push(record);
        self.state.rng_cursor += size as u64;
        self.state.step = s + 1;
        self.state.lr = lr_at(&self.cfg, self.state.step)?;
        if let Some(dir) = &self.checkpoint_dir {
            if self.state.step % self.cfg.eval_every == 0 || self.state.step == self.cfg.steps {
                self.state.save(dir, &self.cfg)?;
            }
        }
        Ok(record)
    }

    /// Runs until `stop` steps have completed (capped at the configured total).
    pub fn run_until(&mut self, stop: usize) -> Result<()> {
        let stop = stop.min(self.cfg.steps);
        while self.state.step < stop {
            self.step()?;
        }
        if let Some(dir) = &self.checkpoint_dir {
            if !checkpoint_path(dir, self.state.step).exists() {
                self.state.save(dir, &self.cfg)?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.steps)
    }
}

pub fn train(cfg: &TrainConfig, data: TrainData<'_>) -> Result<TrainState> {
    let mut t = Trainer::new(cfg.clone(), data)?;
    t.run()?;
    Ok(t.into_state())
}

pub const LOSS_CSV_HEADER: &str = "step,rl,invar,total,lr";

pub fn write_loss_csv(history: &[LossRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{LOSS_CSV_HEADER}")?;
    for r in history {
        writeln!(out, "{},{},{},{},{}", r.step, r.rl, r.invar, r.total, r.lr)?;
    }
    out.flush()?;
    Ok(())
}
