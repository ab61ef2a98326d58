//! Document ingestion, fixed-window chunking and the context-resize intervention.
//!
//! Tokenization is a lowercase whitespace split everywhere in the engine; chunk
//! text is stored as its tokens joined by single spaces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BASE_LABEL: &str = "base";

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentChunk {
    pub chunk_id: usize,
    pub source_id: String,
    pub text: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    chunks: Vec<DocumentChunk>,
    window: usize,
    stride: usize,
    label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub query_id: String,
    pub query: String,
    #[serde(default)]
    pub gold_chunk_ids: BTreeSet<usize>,
    #[serde(default)]
    pub gold_answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub query: String,
}

/// A resized corpus plus, for every new chunk, the base chunk ids it overlaps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resized {
    pub corpus: Corpus,
    pub provenance: Vec<Vec<usize>>,
}

/// Positive rational resize factor, e.g. `1/2` or `2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ResizeFactor {
    num: u32,
    den: u32,
}

impl ResizeFactor {
    pub const IDENTITY: ResizeFactor = ResizeFactor { num: 1, den: 1 };
    pub const HALF: ResizeFactor = ResizeFactor { num: 1, den: 2 };
    pub const DOUBLE: ResizeFactor = ResizeFactor { num: 2, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidFactor(format!("{num}/{den}")));
        }
        let g = gcd(num, den);
        Ok(Self { num: num / g, den: den / g })
    }

    pub fn is_identity(&self) -> bool {
        self.num == self.den
    }

    pub fn as_f64(&self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }

    /// `max(1, round(window * factor))`, with halves rounded away from zero.
    pub fn apply(&self, window: usize) -> usize {
        let scaled = (window as u64 * u64::from(self.num) * 2 + u64::from(self.den)) / (2 * u64::from(self.den));
        (scaled as usize).max(1)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for ResizeFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for ResizeFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidFactor(s.to_string());
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n: u32 = n.trim().parse().map_err(|_| bad())?;
            let d: u32 = d.trim().parse().map_err(|_| bad())?;
            return ResizeFactor::new(n, d).map_err(|_| bad());
        }
        if let Ok(n) = s.parse::<u32>() {
            return ResizeFactor::new(n, 1).map_err(|_| bad());
        }
        // decimal form: at most 6 fractional digits
        let x: f64 = s.parse().map_err(|_| bad())?;
        if !(x.is_finite() && x > 0.0) {
            return Err(bad());
        }
        let den = 1_000_000u32;
        let num = (x * f64::from(den)).round();
        if num < 1.0 || num > f64::from(u32::MAX) {
            return Err(bad());
        }
        ResizeFactor::new(num as u32, den)
    }
}

impl TryFrom<String> for ResizeFactor {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ResizeFactor> for String {
    fn from(f: ResizeFactor) -> String {
        f.to_string()
    }
}

/// Splits `text` into windows of `window` tokens starting every `stride` tokens.
/// The final span may be short; spans stop once one reaches the end of the text.
pub fn chunk_text(text: &str, window: usize, stride: usize) -> Result<Vec<String>> {
    let tokens = tokenize(text);
    Ok(chunk_tokens(&tokens, window, stride)?
        .into_iter()
        .map(|(a, b)| tokens[a..b].join(" "))
        .collect())
}

/// Token-index spans `[start, end)` produced by the windowing rule.
pub fn chunk_tokens<S>(tokens: &[S], window: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::InvalidWindow { window, stride });
    }
    let n = tokens.len();
    let mut spans = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + window).min(n);
        spans.push((start, end));
        if end == n {
            break;
        }
        start += stride;
    }
    Ok(spans)
}

impl Corpus {
    /// Chunks documents given as `(source_id, text)` pairs. Chunk ids follow
    /// document order, then window order.
    pub fn from_documents<S: AsRef<str> + Sync>(docs: &[(S, S)], window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 || stride > window {
            return Err(Error::InvalidWindow { window, stride });
        }
        let per_doc: Vec<Vec<String>> = docs
            .par_iter()
            .map(|(_, text)| chunk_text(text.as_ref(), window, stride))
            .collect::<Result<_>>()?;
        let mut chunks = Vec::new();
        for ((source_id, _), spans) in docs.iter().zip(per_doc) {
            for text in spans {
                chunks.push(DocumentChunk {
                    chunk_id: chunks.len(),
                    source_id: source_id.as_ref().to_string(),
                    token_count: text.split_whitespace().count(),
                    text,
                });
            }
        }
        if chunks.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self {
            chunks,
            window,
            stride,
            label: BASE_LABEL.to_string(),
        })
    }

    pub fn chunks(&self) -> &[DocumentChunk] {
        &self.chunks
    }

    pub fn chunk(&self, chunk_id: usize) -> Option<&DocumentChunk> {
        self.chunks.get(chunk_id)
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn texts(&self) -> Vec<&str> {
        self.chunks.iter().map(|c| c.text.as_str()).collect()
    }

    /// Reassembles each source's token stream from its (possibly overlapping)
    /// chunks. Sources are returned in order of first appearance.
    fn source_streams(&self) -> Vec<(String, Vec<String>, Vec<(usize, usize, usize)>)> {
        let mut order: Vec<String> = Vec::new();
        let mut by_source: BTreeMap<&str, Vec<&DocumentChunk>> = BTreeMap::new();
        for chunk in &self.chunks {
            let entry = by_source.entry(chunk.source_id.as_str()).or_default();
            if entry.is_empty() {
                order.push(chunk.source_id.clone());
            }
            entry.push(chunk);
        }
        order
            .into_iter()
            .map(|source| {
                let mut tokens: Vec<String> = Vec::new();
                let mut spans = Vec::new();
                for (j, chunk) in by_source[source.as_str()].iter().enumerate() {
                    let start = j * self.stride;
                    let toks: Vec<&str> = chunk.text.split_whitespace().collect();
                    for (t, tok) in toks.iter().enumerate() {
                        if start + t >= tokens.len() {
                            tokens.push((*tok).to_string());
                        }
                    }
                    spans.push((chunk.chunk_id, start, start + toks.len()));
                }
                (source, tokens, spans)
            })
            .collect()
    }

    /// Applies the context-resize intervention: every source is re-chunked with
    /// non-overlapping windows of `round(window * factor)` tokens.
    pub fn resize(&self, factor: ResizeFactor) -> Result<Resized> {
        if self.label != BASE_LABEL {
            return Err(Error::NotBaseCorpus(self.label.clone()));
        }
        let label = format!("resized:{factor}");
        if factor.is_identity() {
            return Ok(Resized {
                corpus: self.clone().with_label(label),
                provenance: (0..self.len()).map(|i| vec![i]).collect(),
            });
        }
        let window = factor.apply(self.window);
        let mut chunks = Vec::new();
        let mut provenance = Vec::new();
        for (source, tokens, base_spans) in self.source_streams() {
            for (a, b) in chunk_tokens(&tokens, window, window)? {
                let overlaps: Vec<usize> = base_spans
                    .iter()
                    .filter(|&&(_, s, e)| a < e && s < b)
                    .map(|&(id, _, _)| id)
                    .collect();
                chunks.push(DocumentChunk {
                    chunk_id: chunks.len(),
                    source_id: source.clone(),
                    text: tokens[a..b].join(" "),
                    token_count: b - a,
                });
                provenance.push(overlaps);
            }
        }
        if chunks.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Resized {
            corpus: Corpus {
                chunks,
                window,
                stride: window,
                label,
            },
            provenance,
        })
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        serde_json::to_writer(
            &mut *out,
            &CorpusHeader {
                window: self.window,
                stride: self.stride,
                label: self.label.clone(),
            },
        )?;
        out.write_all(b"\n")?;
        for chunk in &self.chunks {
            serde_json::to_writer(
                &mut *out,
                &ChunkRecord {
                    chunk_id: chunk.chunk_id,
                    source_id: chunk.source_id.clone(),
                    text: chunk.text.clone(),
                },
            )?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_jsonl(&mut file)?;
        file.flush()?;
        Ok(())
    }

    /// Loads the persisted form written by [`Corpus::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let header: CorpusHeader = match lines.next() {
            Some((_, line)) => parse_line(&line?, 1)?,
            None => return Err(Error::EmptyCorpus),
        };
        if header.window == 0 || header.stride == 0 || header.stride > header.window {
            return Err(Error::InvalidWindow {
                window: header.window,
                stride: header.stride,
            });
        }
        let mut chunks = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ChunkRecord = parse_line(&line, i + 1)?;
            if rec.chunk_id != chunks.len() {
                return Err(Error::MalformedLine {
                    line_no: i + 1,
                    reason: format!("expected chunk_id {}, found {}", chunks.len(), rec.chunk_id),
                });
            }
            chunks.push(DocumentChunk {
                chunk_id: rec.chunk_id,
                token_count: rec.text.split_whitespace().count(),
                source_id: rec.source_id,
                text: rec.text,
            });
        }
        if chunks.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self {
            chunks,
            window: header.window,
            stride: header.stride,
            label: header.label,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    window: usize,
    stride: usize,
    label: String,
}

#[derive(Serialize, Deserialize)]
struct ChunkRecord {
    chunk_id: usize,
    source_id: String,
    text: String,
}

#[derive(Deserialize)]
struct SourceRecord {
    source_id: String,
    text: String,
}

fn parse_line<T: serde::de::DeserializeOwned>(line: &str, line_no: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::MalformedLine {
        line_no,
        reason: e.to_string(),
    })
}

/// Reads a JSONL file of `{"source_id", "text"}` records and chunks it.
pub fn ingest_jsonl(path: &Path, window: usize, stride: usize) -> Result<Corpus> {
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::InvalidWindow { window, stride });
    }
    let docs = read_jsonl::<SourceRecord>(path)?;
    let pairs: Vec<(String, String)> = docs.into_iter().map(|d| (d.source_id, d.text)).collect();
    Corpus::from_documents(&pairs, window, stride)
}

/// Reads one JSON record per non-blank line; line numbers in errors are 1-based.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn read_gold_jsonl(path: &Path) -> Result<Vec<GoldLabel>> {
    read_jsonl(path)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut file, rec)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Maps gold base chunk ids into a resized corpus: a resized chunk is gold
/// when it overlaps any gold base chunk.
pub fn map_gold(gold: &BTreeSet<usize>, provenance: &[Vec<usize>]) -> BTreeSet<usize> {
    provenance
        .iter()
        .enumerate()
        .filter(|(_, bases)| bases.iter().any(|b| gold.contains(b)))
        .map(|(i, _)| i)
        .collect()
}
