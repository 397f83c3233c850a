use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TextError {
    #[error("unknown script `{0}`")]
    UnknownScript(String),
    #[error("malformed combining sequence at byte {offset} (U+{:04X})", *ch as u32)]
    Malformed { offset: usize, ch: char },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid chunking: chunk_lines={chunk_lines}, overlap_lines={overlap_lines}")]
    InvalidChunking { chunk_lines: usize, overlap_lines: usize },
}

#[derive(Debug, Error)]
pub enum LemmaError {
    #[error("lexicon not found: {0}")]
    LexiconMissing(PathBuf),
    #[error("lexicon {path}:{line}: {reason}")]
    LexiconFormat { path: PathBuf, line: usize, reason: String },
    #[error("external lemmatizer unavailable: {0}")]
    ExternalLemmatizerUnavailable(String),
    #[error("chunk {chunk_id}: {source}")]
    Chunk {
        chunk_id: String,
        #[source]
        source: Box<LemmaError>,
    },
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("lemma cache: {0}")]
    Cache(String),
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("chunk {0} has no lemmas")]
    UnlemmatizedChunk(String),
    #[error("duplicate chunk id {0}")]
    DuplicateChunk(String),
    #[error("unknown chunk {0}")]
    UnknownChunk(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("embedding file line {line}: expected {expected} values, found {found}")]
    DimMismatch { line: usize, expected: usize, found: usize },
    #[error("embedding file line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("index file: {0}")]
    IndexFormat(String),
    #[error(transparent)]
    Lemma(#[from] LemmaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("{what}: {left} vs {right} items")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("item {0} has no references")]
    NoReferences(usize),
    #[error("sentence count mismatch: {gold} gold vs {pred} predicted")]
    SentenceCountMismatch { gold: usize, pred: usize },
    #[error("need at least {needed} items for {needed} chunks, got {got}")]
    TooFewItems { needed: usize, got: usize },
    #[error("acceptable answer set is empty")]
    NoAcceptableAnswers,
    #[error("lemmatizer: {0}")]
    Lemmatizer(String),
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("no cached response for request {0} (replay-only mode)")]
    CacheMiss(String),
    #[error("provider returned {status}: {body}")]
    ProviderError { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("response cache: {0}")]
    Cache(String),
    #[error("mock script exhausted after {0} responses")]
    MockExhausted(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("missing placeholder {0}")]
    MissingPlaceholder(String),
    #[error("template {file}: {reason}")]
    Format { file: String, reason: String },
    #[error("empty tagset")]
    EmptyTagset,
    #[error("template io: {0}")]
    Io(String),
}

#[derive(Debug, Error)]
pub enum KgError {
    #[error("knowledge graph line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("knowledge graph line {line}: edge references undeclared node {node}")]
    DanglingEdge { line: usize, node: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Lemma(#[from] LemmaError),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}:{line}: {reason}")]
    Schema { path: PathBuf, line: usize, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Lemma(#[from] LemmaError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }
}
