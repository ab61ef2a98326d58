//! Low-rank additive adapter on unit embeddings:
//! `v' = normalize(v + (alpha / rank) * B (A v))`, with `A: rank x dim` drawn
//! from a seeded Gaussian and `B: dim x rank` zero at init, so a fresh
//! adapter is the identity.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, norm, Embedding};
use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, mix, SplitMix64};
use crate::scalar::Scalar;

pub const DEFAULT_RANK: usize = 16;
pub const DEFAULT_ALPHA: f64 = 32.0;
pub const DEFAULT_DROPOUT: f64 = 0.05;

/// Which vector the adapter transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterSide {
    #[default]
    Document,
    Query,
}

impl AdapterSide {
    fn to_byte(self) -> u8 {
        match self {
            AdapterSide::Document => 0,
            AdapterSide::Query => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(AdapterSide::Document),
            1 => Some(AdapterSide::Query),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<T: Scalar = f64> {
    /// `rank x dim`, row-major.
    pub a: Vec<T>,
    /// `dim x rank`, row-major.
    pub b: Vec<T>,
    dim: usize,
    rank: usize,
    alpha: T,
    dropout_p: T,
    seed: u64,
    side: AdapterSide,
}

/// Gradient with the same layout as [`AdapterParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad<T: Scalar = f64> {
    pub da: Vec<T>,
    pub db: Vec<T>,
}

impl<T: Scalar> AdapterGrad<T> {
    pub fn zeros(dim: usize, rank: usize) -> Self {
        Self {
            da: vec![T::zero(); dim * rank],
            db: vec![T::zero(); dim * rank],
        }
    }

    pub fn zeros_like(params: &AdapterParams<T>) -> Self {
        Self::zeros(params.dim, params.rank)
    }

    pub fn add_scaled(&mut self, other: &Self, w: T) {
        self.da.iter_mut().zip(&other.da).for_each(|(x, y)| *x += w * *y);
        self.db.iter_mut().zip(&other.db).for_each(|(x, y)| *x += w * *y);
    }

    pub fn scale(&mut self, w: T) {
        self.da.iter_mut().chain(self.db.iter_mut()).for_each(|x| *x *= w);
    }

    pub fn sum(mut self, other: Self) -> Self {
        self.add_scaled(&other, T::one());
        self
    }

    pub fn is_zero(&self) -> bool {
        self.da.iter().chain(&self.db).all(|x| x.is_zero())
    }

    pub fn is_finite(&self) -> bool {
        self.da.iter().chain(&self.db).all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.da.iter().chain(&self.db).fold(T::zero(), |m, x| m.max(x.abs()))
    }
}

/// Intermediate values of one adapter application, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AdapterForward<T: Scalar> {
    input: Vec<T>,
    hidden: Vec<T>,
    mask: Option<Vec<T>>,
    norm: T,
    output: Vec<T>,
}

impl<T: Scalar> AdapterForward<T> {
    pub fn output(&self) -> &[T] {
        &self.output
    }
}

impl<T: Scalar> AdapterParams<T> {
    /// Fresh adapter: `A` entries are standard normals scaled by `1/sqrt(dim)`
    /// from `splitmix64(seed)`, and `B = 0`.
    pub fn init(dim: usize, rank: usize, alpha: f64, dropout_p: f64, seed: u64, side: AdapterSide) -> Result<Self> {
        if rank == 0 || rank >= dim {
            return Err(Error::InvalidRank { rank, dim });
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidAdapter(format!("alpha must be positive, got {alpha}")));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::InvalidAdapter(format!("dropout_p must be in [0,1), got {dropout_p}")));
        }
        let scale = 1.0 / (dim as f64).sqrt();
        let mut rng = SplitMix64::new(seed);
        let a = gaussian_vec(&mut rng, rank * dim)
            .into_iter()
            .map(|x| T::lit(x * scale))
            .collect();
        Ok(Self {
            a,
            b: vec![T::zero(); dim * rank],
            dim,
            rank,
            alpha: T::lit(alpha),
            dropout_p: T::lit(dropout_p),
            seed,
            side,
        })
    }

    /// Builds an adapter from explicit matrices.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        a: Vec<T>,
        b: Vec<T>,
        dim: usize,
        rank: usize,
        alpha: T,
        dropout_p: T,
        seed: u64,
        side: AdapterSide,
    ) -> Result<Self> {
        if rank == 0 || rank >= dim {
            return Err(Error::InvalidRank { rank, dim });
        }
        if a.len() != rank * dim || b.len() != dim * rank {
            return Err(Error::InvalidAdapter("matrix shapes do not match dim/rank".into()));
        }
        if a.iter().chain(&b).any(|x| !x.is_finite()) {
            return Err(Error::InvalidAdapter("non-finite entry".into()));
        }
        if !(alpha > T::zero()) || !(dropout_p >= T::zero() && dropout_p < T::one()) {
            return Err(Error::InvalidAdapter("alpha or dropout out of range".into()));
        }
        Ok(Self {
            a,
            b,
            dim,
            rank,
            alpha,
            dropout_p,
            seed,
            side,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn dropout_p(&self) -> T {
        self.dropout_p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn side(&self) -> AdapterSide {
        self.side
    }

    pub fn set_alpha(&mut self, alpha: T) {
        self.alpha = alpha;
    }

    pub fn set_dropout(&mut self, p: T) {
        self.dropout_p = p;
    }

    /// `alpha / rank`.
    pub fn scaling(&self) -> T {
        self.alpha / T::from_usize(self.rank).unwrap()
    }

    pub fn is_identity(&self) -> bool {
        self.b.iter().all(|x| x.is_zero())
    }

    /// Gradient-descent style update: `params -= lr * grad`.
    pub fn apply_update(&mut self, grad: &AdapterGrad<T>, lr: T) {
        self.a.iter_mut().zip(&grad.da).for_each(|(p, g)| *p -= lr * *g);
        self.b.iter_mut().zip(&grad.db).for_each(|(p, g)| *p -= lr * *g);
    }

    fn dropout_mask(&self, step_seed: u64) -> Option<Vec<T>> {
        if self.dropout_p <= T::zero() {
            return None;
        }
        let p = self.dropout_p.to_f64_lossy();
        let keep_scale = T::one() / (T::one() - self.dropout_p);
        let mut rng = SplitMix64::new(mix(self.seed, step_seed));
        Some(
            (0..self.dim)
                .map(|_| if rng.next_f64() < p { T::zero() } else { keep_scale })
                .collect(),
        )
    }

    /// Runs the adapter on `v`. `dropout` carries the step seed when training;
    /// `None` is the inference path.
    pub fn forward(&self, v: &[T], dropout: Option<u64>) -> Result<AdapterForward<T>> {
        if v.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        let hidden: Vec<T> = self.a.chunks_exact(self.dim).map(|row| dot(row, v)).collect();
        let s = self.scaling();
        let mask = dropout.and_then(|seed| self.dropout_mask(seed));
        let mut u = v.to_vec();
        let mut moved = false;
        for (i, ui) in u.iter_mut().enumerate() {
            let mut delta = s * dot(&self.b[i * self.rank..(i + 1) * self.rank], &hidden);
            if let Some(m) = &mask {
                delta *= m[i];
            }
            moved |= !delta.is_zero();
            *ui += delta;
        }
        let n = norm(&u);
        if n.to_f64_lossy() < 1e-12 {
            return Err(Error::ZeroVector);
        }
        let output = if !moved && (n.to_f64_lossy() - 1.0).abs() < 1e-12 {
            u.clone()
        } else {
            u.iter().map(|&x| x / n).collect()
        };
        Ok(AdapterForward {
            input: v.to_vec(),
            hidden,
            mask,
            norm: n,
            output,
        })
    }

    /// Accumulates into `grads` the gradient of a scalar loss given
    /// `grad_out = dLoss/dv'` for one forward pass.
    pub fn backward(&self, fwd: &AdapterForward<T>, grad_out: &[T], grads: &mut AdapterGrad<T>) {
        // through normalization: (I - v'v'^T) g / |u|
        let proj = dot(&fwd.output, grad_out);
        let s = self.scaling();
        let g_delta: Vec<T> = fwd
            .output
            .iter()
            .zip(grad_out)
            .enumerate()
            .map(|(i, (&o, &g))| {
                let gu = (g - o * proj) / fwd.norm;
                let gu = fwd.mask.as_ref().map_or(gu, |m| gu * m[i]);
                s * gu
            })
            .collect();
        let mut g_hidden = vec![T::zero(); self.rank];
        for (i, &gd) in g_delta.iter().enumerate() {
            if gd.is_zero() {
                continue;
            }
            let brow = &self.b[i * self.rank..(i + 1) * self.rank];
            let dbrow = &mut grads.db[i * self.rank..(i + 1) * self.rank];
            for j in 0..self.rank {
                dbrow[j] += gd * fwd.hidden[j];
                g_hidden[j] += gd * brow[j];
            }
        }
        for (j, &gh) in g_hidden.iter().enumerate() {
            let darow = &mut grads.da[j * self.dim..(j + 1) * self.dim];
            for (d, &x) in darow.iter_mut().zip(&fwd.input) {
                *d += gh * x;
            }
        }
    }

    /// Writes the `IVAD` checkpoint format (little-endian, f64 payload).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(41 + 16 * self.dim * self.rank);
        buf.extend_from_slice(IVAD_MAGIC);
        buf.extend_from_slice(&IVAD_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.rank as u32).to_le_bytes());
        buf.extend_from_slice(&self.alpha.to_f64_lossy().to_le_bytes());
        buf.extend_from_slice(&self.dropout_p.to_f64_lossy().to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.push(self.side.to_byte());
        for x in self.a.iter().chain(&self.b) {
            buf.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        const HEADER: usize = 4 + 4 + 4 + 4 + 8 + 8 + 8 + 1;
        if bytes.len() < HEADER || &bytes[..4] != IVAD_MAGIC {
            return Err(corrupt("bad magic or truncated header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if u32_at(4) != IVAD_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let dim = u32_at(8) as usize;
        let rank = u32_at(12) as usize;
        let alpha = f64_at(16);
        let dropout_p = f64_at(24);
        let seed = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let side = AdapterSide::from_byte(bytes[40]).ok_or_else(|| corrupt("bad side byte"))?;
        if bytes.len() != HEADER + 16 * dim * rank {
            return Err(corrupt("payload length does not match header"));
        }
        let values: Vec<T> = bytes[HEADER..]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let (a, b) = values.split_at(dim * rank);
        Self::from_parts(a.to_vec(), b.to_vec(), dim, rank, T::lit(alpha), T::lit(dropout_p), seed, side)
            .map_err(|e| corrupt(&e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

const IVAD_MAGIC: &[u8; 4] = b"IVAD";
const IVAD_VERSION: u32 = 1;

/// Convenience wrapper over [`AdapterParams::forward`] returning the adapted
/// unit embedding. `training` enables dropout seeded by `(params.seed, step_seed)`.
pub fn apply_adapter<T: Scalar>(
    params: &AdapterParams<T>,
    v: &Embedding<T>,
    training: bool,
    step_seed: u64,
) -> Result<Embedding<T>> {
    let fwd = params.forward(v.as_slice(), training.then_some(step_seed))?;
    Embedding::new(fwd.output)
}
