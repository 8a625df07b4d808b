//! Corpus ingestion, chunking, exact cosine k-NN and composite-unit mining.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost_ledger::UsageEvent;
use crate::io::{self, IoError};
use crate::prompts::{CHUNKER_SYSTEM, CHUNK_SEPARATOR};
use crate::providers::{ChatMessage, Embedder, Generator, ProviderError, SamplingParams};
use crate::text::word_count;

pub const MIN_CHUNK_WORDS: usize = 200;
pub const MAX_CHUNK_WORDS: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("chunk {0} has no embedding")]
    MissingEmbedding(String),
    #[error("chunk {0} embedding is not unit norm")]
    NotUnitNorm(String),
    #[error("unknown chunk id {0}")]
    UnknownChunk(String),
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    pub source_uri: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub published_date: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeUnit {
    /// Sorted ascending.
    pub chunk_ids: [String; 3],
    /// Cosines for (0,1), (0,2), (1,2).
    pub pairwise_sims: [f64; 3],
}

impl CompositeUnit {
    pub fn min_sim(&self) -> f64 {
        self.pairwise_sims.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn unit_id(&self) -> String {
        self.chunk_ids.join("+")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub k_nn: usize,
    pub tau_theme: f64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            k_nn: 10,
            tau_theme: 0.8,
        }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.k_nn < 2 {
            return Err(CorpusError::Precondition("k_nn must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.tau_theme) {
            return Err(CorpusError::Precondition("tau_theme must be in [0,1]".into()));
        }
        Ok(())
    }
}

pub fn validate_documents(docs: &[RawDocument]) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for d in docs {
        if d.body.trim().is_empty() {
            return Err(CorpusError::Precondition(format!("document {} has an empty body", d.doc_id)));
        }
        if !seen.insert(d.doc_id.as_str()) {
            return Err(CorpusError::DuplicateId(d.doc_id.clone()));
        }
    }
    Ok(())
}

pub fn read_documents(path: &Path) -> Result<Vec<RawDocument>, CorpusError> {
    let docs: Vec<RawDocument> = io::read_jsonl(path)?;
    validate_documents(&docs)?;
    Ok(docs)
}

fn chunk_id(doc_id: &str, i: usize) -> String {
    format!("{doc_id}#{i:04}")
}

fn split_words(text: &str, max: usize) -> Vec<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    words.chunks(max).map(|w| w.join(" ")).collect()
}

/// Paragraph-boundary splitter. Paragraphs are packed until a chunk holds
/// at least [`MIN_CHUNK_WORDS`]; no chunk exceeds [`MAX_CHUNK_WORDS`]
/// unless a single paragraph does, in which case it is cut by words.
pub fn split_paragraphs(body: &str) -> Vec<String> {
    let mut paragraphs = Vec::new();
    let mut cur = Vec::new();
    for line in body.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                paragraphs.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line.trim_end());
        }
    }
    if !cur.is_empty() {
        paragraphs.push(cur.join("\n"));
    }

    let mut pieces = Vec::new();
    for p in paragraphs {
        let p = p.trim().to_string();
        if word_count(&p) > MAX_CHUNK_WORDS {
            pieces.extend(split_words(&p, MAX_CHUNK_WORDS));
        } else {
            pieces.push(p);
        }
    }

    let mut chunks: Vec<String> = Vec::new();
    let mut buf = String::new();
    let mut buf_words = 0;
    for p in pieces {
        let w = word_count(&p);
        if buf_words > 0 && buf_words + w > MAX_CHUNK_WORDS {
            chunks.push(std::mem::take(&mut buf));
            buf_words = 0;
        }
        if !buf.is_empty() {
            buf.push_str("\n\n");
        }
        buf.push_str(&p);
        buf_words += w;
        if buf_words >= MIN_CHUNK_WORDS {
            chunks.push(std::mem::take(&mut buf));
            buf_words = 0;
        }
    }
    if !buf.is_empty() {
        match chunks.last_mut() {
            Some(last) if word_count(last) + buf_words <= MAX_CHUNK_WORDS => {
                last.push_str("\n\n");
                last.push_str(&buf);
            }
            _ => chunks.push(buf),
        }
    }
    chunks
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkingOutcome {
    pub chunks: Vec<Chunk>,
    /// Set when the generator failed and the paragraph splitter was used.
    pub warning: Option<String>,
    pub usage: UsageEvent,
}

/// Split a document into chunks, condensing through `chunker` when given.
pub fn chunk_document(doc: &RawDocument, chunker: Option<&dyn Generator>) -> Result<ChunkingOutcome, CorpusError> {
    if doc.body.trim().is_empty() {
        return Err(CorpusError::Precondition(format!("document {} has an empty body", doc.doc_id)));
    }
    let mut usage = UsageEvent::default();
    let mut warning = None;
    let mut texts = None;
    if let Some(g) = chunker {
        let messages = [ChatMessage::system(CHUNKER_SYSTEM), ChatMessage::user(doc.body.clone())];
        let params = SamplingParams {
            temperature: 0.0,
            ..SamplingParams::default()
        };
        match g.generate(&messages, &params) {
            Ok(r) => {
                usage.llm_calls = 1;
                usage.input_tokens = r.input_tokens as i64;
                usage.output_tokens = r.output_tokens as i64;
                usage.estimated = !r.usage_reported;
                let passages: Vec<String> = r
                    .text
                    .split(&format!("\n{CHUNK_SEPARATOR}\n"))
                    .flat_map(|s| s.split(CHUNK_SEPARATOR))
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                if passages.is_empty() {
                    warning = Some(format!("{}: chunker returned no passages; used paragraph splitter", doc.doc_id));
                } else {
                    texts = Some(passages);
                }
            }
            Err(e) => {
                warning = Some(format!("{}: chunker failed ({e}); used paragraph splitter", doc.doc_id));
            }
        }
    }
    if let Some(w) = &warning {
        tracing::warn!("{w}");
    }
    let texts = texts.unwrap_or_else(|| split_paragraphs(&doc.body));
    let chunks = texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| Chunk {
            chunk_id: chunk_id(&doc.doc_id, i),
            doc_id: doc.doc_id.clone(),
            text,
            embedding: None,
        })
        .collect();
    Ok(ChunkingOutcome { chunks, warning, usage })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub chunk_id: String,
    pub embedding: Vec<f64>,
}

/// Embed chunk texts in batches.
pub fn embed_chunks(chunks: &[Chunk], embedder: &dyn Embedder, batch: usize) -> Result<Vec<EmbeddingRecord>, CorpusError> {
    let mut out = Vec::with_capacity(chunks.len());
    for group in chunks.chunks(batch.max(1)) {
        let texts: Vec<String> = group.iter().map(|c| c.text.clone()).collect();
        let vecs = embedder.embed(&texts)?;
        out.extend(group.iter().zip(vecs).map(|(c, v)| EmbeddingRecord {
            chunk_id: c.chunk_id.clone(),
            embedding: v,
        }));
    }
    Ok(out)
}

/// Attach sidecar embeddings to chunks. Every chunk must have one.
pub fn attach_embeddings(chunks: &mut [Chunk], records: Vec<EmbeddingRecord>) -> Result<(), CorpusError> {
    let mut by_id: HashMap<String, Vec<f64>> = records.into_iter().map(|r| (r.chunk_id, r.embedding)).collect();
    for c in chunks.iter_mut() {
        let v = by_id
            .remove(&c.chunk_id)
            .ok_or_else(|| CorpusError::MissingEmbedding(c.chunk_id.clone()))?;
        c.embedding = Some(v);
    }
    Ok(())
}

/// Chunk store line: the embedding lives in the sidecar file.
pub fn write_chunks(path: &Path, chunks: &[Chunk]) -> Result<(), CorpusError> {
    let bare: Vec<Chunk> = chunks
        .iter()
        .map(|c| Chunk {
            embedding: None,
            ..c.clone()
        })
        .collect();
    Ok(io::write_jsonl(path, &bare)?)
}

pub fn read_chunks(path: &Path) -> Result<Vec<Chunk>, CorpusError> {
    Ok(io::read_jsonl(path)?)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact cosine index over unit vectors. Immutable after build.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    pos: HashMap<String, usize>,
}

impl VectorIndex {
    pub fn build(chunks: &[Chunk]) -> Result<Self, CorpusError> {
        let mut ids = Vec::with_capacity(chunks.len());
        let mut vectors = Vec::with_capacity(chunks.len());
        let mut pos = HashMap::with_capacity(chunks.len());
        let mut dim = None;
        for c in chunks {
            let v = c
                .embedding
                .as_ref()
                .ok_or_else(|| CorpusError::MissingEmbedding(c.chunk_id.clone()))?;
            let norm = dot(v, v).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(CorpusError::NotUnitNorm(c.chunk_id.clone()));
            }
            if *dim.get_or_insert(v.len()) != v.len() {
                return Err(CorpusError::Provider(ProviderError::DimensionMismatch {
                    expected: dim.unwrap_or_default(),
                    got: v.len(),
                }));
            }
            if pos.insert(c.chunk_id.clone(), ids.len()).is_some() {
                return Err(CorpusError::DuplicateId(c.chunk_id.clone()));
            }
            ids.push(c.chunk_id.clone());
            vectors.push(v.clone());
        }
        Ok(Self { ids, vectors, pos })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn similarity(&self, a: &str, b: &str) -> Result<f64, CorpusError> {
        let (i, j) = (self.index_of(a)?, self.index_of(b)?);
        Ok(dot(&self.vectors[i], &self.vectors[j]))
    }

    fn index_of(&self, id: &str) -> Result<usize, CorpusError> {
        self.pos.get(id).copied().ok_or_else(|| CorpusError::UnknownChunk(id.to_string()))
    }

    fn ranked(&self, i: usize, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = (0..self.ids.len())
            .filter(|j| *j != i)
            .map(|j| (j, dot(&self.vectors[i], &self.vectors[j])))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0])));
        all.truncate(k);
        all
    }

    /// Top-k neighbours by cosine, self excluded, ties by ascending id.
    pub fn nearest_neighbors(&self, chunk_id: &str, k: usize) -> Result<Vec<(String, f64)>, CorpusError> {
        if k == 0 {
            return Err(CorpusError::Precondition("k must be at least 1".into()));
        }
        let i = self.index_of(chunk_id)?;
        Ok(self
            .ranked(i, k)
            .into_iter()
            .map(|(j, s)| (self.ids[j].clone(), s))
            .collect())
    }

    /// Triplets whose three pairwise cosines all exceed `tau_theme`, where
    /// two members lie in the third's k-NN neighbourhood. Sorted by ids.
    pub fn mine_composite_units(&self, cfg: &IndexConfig) -> Result<Vec<CompositeUnit>, CorpusError> {
        cfg.validate()?;
        let tau = cfg.tau_theme;
        let found: Vec<Vec<[usize; 3]>> = (0..self.ids.len())
            .into_par_iter()
            .map(|i| {
                let nbrs: Vec<usize> = self
                    .ranked(i, cfg.k_nn)
                    .into_iter()
                    .filter(|(_, s)| *s > tau)
                    .map(|(j, _)| j)
                    .collect();
                let mut out = Vec::new();
                for (a, &j) in nbrs.iter().enumerate() {
                    for &k in &nbrs[a + 1..] {
                        if dot(&self.vectors[j], &self.vectors[k]) > tau {
                            out.push([i, j, k]);
                        }
                    }
                }
                out
            })
            .collect();

        let mut seen: BTreeMap<[&str; 3], [usize; 3]> = BTreeMap::new();
        for t in found.into_iter().flatten() {
            let mut t = t;
            t.sort_by(|a, b| self.ids[*a].cmp(&self.ids[*b]));
            seen.entry([&self.ids[t[0]], &self.ids[t[1]], &self.ids[t[2]]]).or_insert(t);
        }
        Ok(seen
            .into_values()
            .map(|[a, b, c]| {
                let s = |x: usize, y: usize| dot(&self.vectors[x], &self.vectors[y]);
                CompositeUnit {
                    chunk_ids: [self.ids[a].clone(), self.ids[b].clone(), self.ids[c].clone()],
                    pairwise_sims: [s(a, b), s(a, c), s(b, c)],
                }
            })
            .collect())
    }
}

/// Every chunk referenced by the units, for sanity checks.
pub fn referenced_chunks(units: &[CompositeUnit]) -> BTreeSet<&str> {
    units.iter().flat_map(|u| u.chunk_ids.iter().map(String::as_str)).collect()
}
