//! Retrieval over lemmatized chunks: BM25 and averaged word embeddings.
//!
//! Index file layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "CLNLUIDX"
//! version u8       1
//! k1, b   f64, f64
//! n       u64      chunk count
//! chunk*  id:str  start:u64  end:u64  raw_text:str  n_lemmas:u64  lemma:str*
//! str  =  u64 byte length + UTF-8 bytes
//! ```
//!
//! Term statistics are rebuilt on load, so they never disagree with the
//! stored chunks.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::RetrievalError;
use crate::lemma::{LemmaPipeline, LemmaSequence};
use crate::textproc::{DocumentChunk, LineSpan};

const MAGIC: &[u8; 8] = b"CLNLUIDX";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.5, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Result of a top-k query. `zero_query` is set when an embedding query had
/// no in-vocabulary lemma; `hits` is then empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub hits: Vec<ScoredChunk>,
    pub zero_query: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    chunks: Vec<DocumentChunk>,
    positions: HashMap<String, usize>,
    doc_freq: HashMap<String, usize>,
    doc_len: Vec<usize>,
    avg_len: f64,
    postings: HashMap<String, Vec<(usize, usize)>>,
    params: Bm25Params,
}

pub fn build_index(chunks: Vec<DocumentChunk>, params: Bm25Params) -> Result<RetrievalIndex, RetrievalError> {
    if chunks.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let mut positions = HashMap::with_capacity(chunks.len());
    let mut postings: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
    let mut doc_len = Vec::with_capacity(chunks.len());
    for (pos, chunk) in chunks.iter().enumerate() {
        if positions.insert(chunk.id.clone(), pos).is_some() {
            return Err(RetrievalError::DuplicateChunk(chunk.id.clone()));
        }
        // a chunk of pure punctuation legitimately has no lemmas
        if chunk.lemmas.is_empty() && chunk.has_word_char() {
            return Err(RetrievalError::UnlemmatizedChunk(chunk.id.clone()));
        }
        let mut tf: HashMap<&str, usize> = HashMap::new();
        for l in &chunk.lemmas {
            *tf.entry(l).or_default() += 1;
        }
        for (term, n) in tf {
            postings.entry(term.to_string()).or_default().push((pos, n));
        }
        doc_len.push(chunk.lemmas.len());
    }
    let doc_freq = postings.iter().map(|(t, p)| (t.clone(), p.len())).collect();
    let avg_len = doc_len.iter().sum::<usize>() as f64 / chunks.len() as f64;
    Ok(RetrievalIndex { chunks, positions, doc_freq, doc_len, avg_len, postings, params })
}

impl RetrievalIndex {
    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> &[DocumentChunk] {
        &self.chunks
    }

    pub fn chunk(&self, id: &str) -> Option<&DocumentChunk> {
        self.positions.get(id).map(|&p| &self.chunks[p])
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn doc_len(&self, id: &str) -> Option<usize> {
        self.positions.get(id).map(|&p| self.doc_len[p])
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn postings(&self, term: &str) -> &[(usize, usize)] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn vocabulary_size(&self) -> usize {
        self.doc_freq.len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.chunks.len() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_score(&self, idf: f64, tf: usize, len: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = if self.avg_len > 0.0 { len as f64 / self.avg_len } else { 0.0 };
        idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm))
    }

    pub fn bm25_score(&self, query: &LemmaSequence, chunk_id: &str) -> Result<f64, RetrievalError> {
        let pos = *self.positions.get(chunk_id).ok_or_else(|| RetrievalError::UnknownChunk(chunk_id.to_string()))?;
        let mut score = 0.0;
        for term in query.as_slice() {
            let tf = self
                .postings(term)
                .binary_search_by_key(&pos, |&(p, _)| p)
                .map(|i| self.postings(term)[i].1)
                .unwrap_or(0);
            if tf > 0 {
                score += self.term_score(self.idf(term), tf, self.doc_len[pos]);
            }
        }
        Ok(score)
    }

    fn bm25_all(&self, query: &LemmaSequence) -> Vec<f64> {
        let mut scores = vec![0.0; self.chunks.len()];
        for term in query.as_slice() {
            let idf = self.idf(term);
            for &(pos, tf) in self.postings(term) {
                scores[pos] += self.term_score(idf, tf, self.doc_len[pos]);
            }
        }
        scores
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&self.params.k1.to_le_bytes())?;
        w.write_all(&self.params.b.to_le_bytes())?;
        w.write_all(&(self.chunks.len() as u64).to_le_bytes())?;
        for c in &self.chunks {
            write_str(&mut w, &c.id)?;
            w.write_all(&(c.span.start as u64).to_le_bytes())?;
            w.write_all(&(c.span.end as u64).to_le_bytes())?;
            write_str(&mut w, &c.raw_text)?;
            w.write_all(&(c.lemmas.len() as u64).to_le_bytes())?;
            for l in &c.lemmas {
                write_str(&mut w, l)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let bytes = fs::read(path)?;
        let mut r = bytes.as_slice();
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| format_err("truncated header"))?;
        if &magic != MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = read_u8(&mut r)?;
        if version != VERSION {
            return Err(format_err(&format!("unsupported version {version}")));
        }
        let params = Bm25Params { k1: read_f64(&mut r)?, b: read_f64(&mut r)? };
        let n = read_u64(&mut r)? as usize;
        let mut chunks = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let id = read_str(&mut r)?;
            let span = LineSpan { start: read_u64(&mut r)? as usize, end: read_u64(&mut r)? as usize };
            let raw_text = read_str(&mut r)?;
            let m = read_u64(&mut r)? as usize;
            let lemmas = (0..m).map(|_| read_str(&mut r)).collect::<Result<_, _>>()?;
            chunks.push(DocumentChunk { id, span, raw_text, lemmas });
        }
        if !r.is_empty() {
            return Err(format_err("trailing bytes"));
        }
        build_index(chunks, params)
    }
}

fn format_err(msg: &str) -> RetrievalError {
    RetrievalError::IndexFormat(msg.to_string())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u8(r: &mut &[u8]) -> Result<u8, RetrievalError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).map_err(|_| format_err("truncated"))?;
    Ok(b[0])
}

fn read_u64(r: &mut &[u8]) -> Result<u64, RetrievalError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| format_err("truncated"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64, RetrievalError> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn read_str(r: &mut &[u8]) -> Result<String, RetrievalError> {
    let len = read_u64(r)? as usize;
    if len > r.len() {
        return Err(format_err("truncated string"));
    }
    let (s, rest) = r.split_at(len);
    *r = rest;
    String::from_utf8(s.to_vec()).map_err(|_| format_err("invalid UTF-8"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable { dim, vectors: HashMap::new() }
    }

    /// Inserts a vector, replacing any previous one for the lemma.
    pub fn insert(&mut self, lemma: impl Into<String>, vector: Vec<f64>) -> Result<(), RetrievalError> {
        if vector.len() != self.dim {
            return Err(RetrievalError::DimMismatch { line: 0, expected: self.dim, found: vector.len() });
        }
        self.vectors.insert(lemma.into(), vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, lemma: &str) -> Option<&[f64]> {
        self.vectors.get(lemma).map(Vec::as_slice)
    }
}

/// Reads `lemma v1 ... vdim` lines. The dimension comes from the first
/// vector line; a leading `count dim` header line is skipped.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable, RetrievalError> {
    let text = fs::read_to_string(path)?;
    parse_embeddings(&text)
}

pub fn parse_embeddings(text: &str) -> Result<EmbeddingTable, RetrievalError> {
    let mut table: Option<EmbeddingTable> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if table.is_none() && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            continue;
        }
        let values = fields[1..]
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| RetrievalError::ParseError { line: line_no, reason: e.to_string() })?;
        let table = table.get_or_insert_with(|| EmbeddingTable::new(values.len()));
        if values.is_empty() {
            return Err(RetrievalError::ParseError { line: line_no, reason: "no vector values".into() });
        }
        if values.len() != table.dim {
            return Err(RetrievalError::DimMismatch { line: line_no, expected: table.dim, found: values.len() });
        }
        if table.vectors.insert(fields[0].to_string(), values).is_some() {
            log::warn!("embedding line {line_no}: duplicate lemma `{}`, keeping the later vector", fields[0]);
        }
    }
    Ok(table.unwrap_or_else(|| EmbeddingTable::new(0)))
}

/// Mean vector of the in-vocabulary lemmas. `known == 0` means every lemma
/// was out of vocabulary and `vector` is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedEmbedding {
    pub vector: Vec<f64>,
    pub known: usize,
}

impl AveragedEmbedding {
    pub fn is_zero(&self) -> bool {
        self.known == 0
    }
}

pub fn embed_average(lemmas: &LemmaSequence, table: &EmbeddingTable) -> AveragedEmbedding {
    let mut vector = vec![0.0; table.dim];
    let mut known = 0;
    for l in lemmas.as_slice() {
        if let Some(v) = table.get(l) {
            for (acc, x) in vector.iter_mut().zip(v) {
                *acc += x;
            }
            known += 1;
        }
    }
    if known > 0 {
        for x in &mut vector {
            *x /= known as f64;
        }
    }
    AveragedEmbedding { vector, known }
}

/// Averaged chunk vectors and their norms, aligned with an index's chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    table: EmbeddingTable,
    vectors: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl EmbeddingIndex {
    pub fn build(index: &RetrievalIndex, table: EmbeddingTable) -> Self {
        let vectors: Vec<Vec<f64>> = index
            .chunks
            .iter()
            .map(|c| embed_average(&LemmaSequence::new(c.lemmas.clone()), &table).vector)
            .collect();
        let norms = vectors.iter().map(|v| norm(v)).collect();
        EmbeddingIndex { table, vectors, norms }
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    Bm25,
    AvgEmbedding,
}

impl std::fmt::Display for RetrieverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RetrieverKind::Bm25 => "bm25",
            RetrieverKind::AvgEmbedding => "avg_embedding",
        })
    }
}

impl std::str::FromStr for RetrieverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bm25" => Ok(RetrieverKind::Bm25),
            "avg_embedding" | "avg-embedding" | "embedding" | "avgft" | "glove" => Ok(RetrieverKind::AvgEmbedding),
            other => Err(format!("unknown retriever `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Retriever<'a> {
    Bm25,
    AvgEmbedding(&'a EmbeddingIndex),
}

/// Lemmatizes `query_raw` with the pipeline, then ranks.
pub fn top_k(
    index: &RetrievalIndex,
    pipeline: &LemmaPipeline,
    query_raw: &str,
    k: usize,
    retriever: Retriever<'_>,
) -> Result<Ranking, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let query = pipeline.lemmatize_text(query_raw)?;
    top_k_lemmas(index, &query, k, retriever)
}

pub fn top_k_lemmas(
    index: &RetrievalIndex,
    query: &LemmaSequence,
    k: usize,
    retriever: Retriever<'_>,
) -> Result<Ranking, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let scores = match retriever {
        Retriever::Bm25 => index.bm25_all(query),
        Retriever::AvgEmbedding(emb) => {
            let q = embed_average(query, &emb.table);
            let qn = norm(&q.vector);
            if q.is_zero() || qn == 0.0 {
                return Ok(Ranking { hits: Vec::new(), zero_query: true });
            }
            emb.vectors
                .iter()
                .zip(&emb.norms)
                .map(|(v, &n)| {
                    if n == 0.0 {
                        0.0
                    } else {
                        let dot: f64 = q.vector.iter().zip(v).map(|(x, y)| x * y).sum();
                        (dot / (qn * n)).clamp(-1.0, 1.0)
                    }
                })
                .collect()
        }
    };
    Ok(Ranking { hits: select_top(index, &scores, k), zero_query: false })
}

fn select_top(index: &RetrievalIndex, scores: &[f64], k: usize) -> Vec<ScoredChunk> {
    let cmp = |&a: &usize, &b: &usize| -> Ordering {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| index.chunks[a].id.cmp(&index.chunks[b].id))
    };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(order.len());
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    order
        .into_iter()
        .enumerate()
        .map(|(i, pos)| ScoredChunk { chunk_id: index.chunks[pos].id.clone(), score: scores[pos], rank: i + 1 })
        .collect()
}
