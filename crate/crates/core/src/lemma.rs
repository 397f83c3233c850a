//! Pluggable lemmatization and lemma-bag F1.
//!
//! Lemmatizers operate on canonical (SLP1) text. [`LemmaPipeline`] wraps one
//! with the normalization and script conversion that turn raw corpus or
//! question text into that form.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::LemmaError;
use crate::textproc::{self, DocumentChunk, NormalizeOptions, Script};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LemmatizerKind {
    Identity,
    Lexicon { path: PathBuf },
    External { command: Vec<String> },
}

impl fmt::Display for LemmatizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LemmatizerKind::Identity => f.write_str("identity"),
            LemmatizerKind::Lexicon { path } => write!(f, "lexicon:{}", path.display()),
            LemmatizerKind::External { command } => write!(f, "external:{}", command.join(" ")),
        }
    }
}

/// Ordered lemmas of one sentence, in canonical script. May be longer than
/// the token count when compounds are split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LemmaSequence(pub Vec<String>);

impl LemmaSequence {
    pub fn new(lemmas: Vec<String>) -> Self {
        LemmaSequence(lemmas)
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn joined(&self) -> String {
        self.0.join(" ")
    }
}

impl<S: Into<String>> FromIterator<S> for LemmaSequence {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        LemmaSequence(iter.into_iter().map(Into::into).collect())
    }
}

pub trait Lemmatizer: Send + Sync {
    fn kind(&self) -> LemmatizerKind;

    /// Tag that changes whenever the lemmatizer's behavior may change; part
    /// of the corpus lemma cache key.
    fn cache_tag(&self) -> String {
        self.kind().to_string()
    }

    fn lemmatize(&self, sentence: &str) -> Result<LemmaSequence, LemmaError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityLemmatizer;

impl Lemmatizer for IdentityLemmatizer {
    fn kind(&self) -> LemmatizerKind {
        LemmatizerKind::Identity
    }

    fn lemmatize(&self, sentence: &str) -> Result<LemmaSequence, LemmaError> {
        Ok(sentence.split_whitespace().collect())
    }
}

/// Dictionary lemmatizer over `surface<TAB>lemma1 lemma2 ...` entries.
///
/// Tokens found verbatim map to their lemmas. Other tokens are segmented
/// greedily left to right, always taking the longest surface that matches;
/// if that does not cover the whole token, the token passes through as is.
#[derive(Debug, Clone)]
pub struct LexiconLemmatizer {
    entries: HashMap<String, Vec<String>>,
    longest_surface: usize,
    path: PathBuf,
    digest: String,
}

impl LexiconLemmatizer {
    /// Loads a lexicon TSV whose entries are written in `script`.
    pub fn load(path: impl AsRef<Path>, script: Script) -> Result<Self, LemmaError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LemmaError::LexiconMissing(path.to_path_buf()),
            _ => LemmaError::LexiconFormat { path: path.to_path_buf(), line: 0, reason: e.to_string() },
        })?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| LemmaError::LexiconFormat {
                path: path.to_path_buf(),
                line: i + 1,
                reason: reason.to_string(),
            };
            let (surface, lemmas) = line.split_once('\t').ok_or_else(|| bad("expected surface<TAB>lemmas"))?;
            let surface = to_canonical(surface.trim(), script)?;
            let lemmas = lemmas
                .split_whitespace()
                .map(|l| to_canonical(l, script))
                .collect::<Result<Vec<_>, _>>()?;
            if surface.is_empty() || lemmas.is_empty() {
                return Err(bad("empty surface or lemma list"));
            }
            entries.push((surface, lemmas));
        }
        let mut lex = Self::from_entries(entries);
        lex.path = path.to_path_buf();
        lex.digest = hex::encode(Sha256::digest(text.as_bytes()));
        Ok(lex)
    }

    /// Builds a lexicon from canonical-script entries. Later duplicates win.
    pub fn from_entries<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<S>)>,
        S: Into<String>,
    {
        let mut map = HashMap::new();
        let mut hasher = Sha256::new();
        for (surface, lemmas) in entries {
            let surface: String = surface.into();
            let lemmas: Vec<String> = lemmas.into_iter().map(Into::into).collect();
            hasher.update(surface.as_bytes());
            hasher.update([0]);
            hasher.update(lemmas.join(" ").as_bytes());
            hasher.update([1]);
            map.insert(surface, lemmas);
        }
        let longest_surface = map.keys().map(|k| k.chars().count()).max().unwrap_or(0);
        LexiconLemmatizer {
            entries: map,
            longest_surface,
            path: PathBuf::from("<memory>"),
            digest: hex::encode(hasher.finalize()),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn lemmatize_token(&self, token: &str, out: &mut Vec<String>) {
        if let Some(lemmas) = self.entries.get(token) {
            out.extend(lemmas.iter().cloned());
            return;
        }
        let chars: Vec<char> = token.chars().collect();
        let mut pieces = Vec::new();
        let mut i = 0;
        'outer: while i < chars.len() {
            let max = self.longest_surface.min(chars.len() - i);
            for len in (1..=max).rev() {
                let candidate: String = chars[i..i + len].iter().collect();
                if let Some(lemmas) = self.entries.get(&candidate) {
                    pieces.extend(lemmas.iter().cloned());
                    i += len;
                    continue 'outer;
                }
            }
            out.push(token.to_string());
            return;
        }
        out.extend(pieces);
    }
}

impl Lemmatizer for LexiconLemmatizer {
    fn kind(&self) -> LemmatizerKind {
        LemmatizerKind::Lexicon { path: self.path.clone() }
    }

    fn cache_tag(&self) -> String {
        format!("lexicon:{}", self.digest)
    }

    fn lemmatize(&self, sentence: &str) -> Result<LemmaSequence, LemmaError> {
        let mut out = Vec::new();
        for token in sentence.split_whitespace() {
            self.lemmatize_token(token, &mut out);
        }
        Ok(LemmaSequence(out))
    }
}

fn to_canonical(text: &str, script: Script) -> Result<String, LemmaError> {
    Ok(textproc::transliterate(text, script, Script::CanonicalRoman)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalConfig {
    pub command: Vec<String>,
    pub timeout: Duration,
    pub pool_size: usize,
}

impl ExternalConfig {
    pub fn new(command: Vec<String>) -> Self {
        ExternalConfig { command, timeout: Duration::from_secs(30), pool_size: 1 }
    }
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Lemmatizer living in a child process.
///
/// Protocol: one sentence per line on the child's stdin, one line of
/// space-separated lemmas back on its stdout. Each child serves one request
/// at a time; a pool of children serves concurrent callers.
pub struct ExternalLemmatizer {
    config: ExternalConfig,
    pool: Vec<Mutex<Option<Worker>>>,
    next: AtomicUsize,
}

impl ExternalLemmatizer {
    pub fn new(config: ExternalConfig) -> Result<Self, LemmaError> {
        if config.command.is_empty() {
            return Err(LemmaError::ExternalLemmatizerUnavailable("empty command".into()));
        }
        let pool = (0..config.pool_size.max(1)).map(|_| Mutex::new(None)).collect();
        Ok(ExternalLemmatizer { config, pool, next: AtomicUsize::new(0) })
    }

    fn spawn(&self) -> Result<Worker, LemmaError> {
        let mut child = Command::new(&self.config.command[0])
            .args(&self.config.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| {
                LemmaError::ExternalLemmatizerUnavailable(format!("spawn `{}`: {e}", self.config.command[0]))
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                match line {
                    Ok(l) => {
                        if tx.send(l).is_err() {
                            break;
                        }
                    }
                    Err(_) => break,
                }
            }
        });
        Ok(Worker { child, stdin, lines: rx })
    }

    fn request(&self, slot: &mut Option<Worker>, sentence: &str) -> Result<LemmaSequence, LemmaError> {
        if slot.is_none() {
            *slot = Some(self.spawn()?);
        }
        let worker = slot.as_mut().expect("spawned");
        let line = sentence.replace(['\n', '\r'], " ");
        let sent = writeln!(worker.stdin, "{line}").and_then(|_| worker.stdin.flush());
        if let Err(e) = sent {
            let status = worker.child.try_wait().ok().flatten();
            *slot = None;
            return Err(LemmaError::ExternalLemmatizerUnavailable(match status {
                Some(s) => format!("lemmatizer exited with {s}"),
                None => format!("write failed: {e}"),
            }));
        }
        match worker.lines.recv_timeout(self.config.timeout) {
            Ok(reply) => Ok(reply.split_whitespace().collect()),
            Err(RecvTimeoutError::Timeout) => {
                *slot = None;
                Err(LemmaError::ExternalLemmatizerUnavailable(format!(
                    "no reply within {:?}",
                    self.config.timeout
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                let status = worker.child.wait().ok();
                *slot = None;
                Err(LemmaError::ExternalLemmatizerUnavailable(match status {
                    Some(s) => format!("lemmatizer exited with {s}"),
                    None => "lemmatizer closed its output".to_string(),
                }))
            }
        }
    }
}

impl Lemmatizer for ExternalLemmatizer {
    fn kind(&self) -> LemmatizerKind {
        LemmatizerKind::External { command: self.config.command.clone() }
    }

    fn lemmatize(&self, sentence: &str) -> Result<LemmaSequence, LemmaError> {
        let start = self.next.fetch_add(1, Ordering::Relaxed);
        let n = self.pool.len();
        for i in 0..n {
            if let Ok(mut slot) = self.pool[(start + i) % n].try_lock() {
                return self.request(&mut slot, sentence);
            }
        }
        let mut slot = self.pool[start % n].lock().unwrap_or_else(|p| p.into_inner());
        self.request(&mut slot, sentence)
    }
}

/// Raw text in a declared script → normalized canonical text → lemmas.
#[derive(Clone)]
pub struct LemmaPipeline {
    lemmatizer: Arc<dyn Lemmatizer>,
    script: Script,
    options: NormalizeOptions,
}

impl fmt::Debug for LemmaPipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LemmaPipeline")
            .field("lemmatizer", &self.lemmatizer.kind())
            .field("script", &self.script)
            .finish()
    }
}

impl LemmaPipeline {
    pub fn new(lemmatizer: Arc<dyn Lemmatizer>, script: Script) -> Self {
        LemmaPipeline { lemmatizer, script, options: NormalizeOptions::STRIP_ALL }
    }

    pub fn identity(script: Script) -> Self {
        Self::new(Arc::new(IdentityLemmatizer), script)
    }

    pub fn with_options(mut self, options: NormalizeOptions) -> Self {
        self.options = options;
        self
    }

    pub fn script(&self) -> Script {
        self.script
    }

    pub fn lemmatizer(&self) -> &Arc<dyn Lemmatizer> {
        &self.lemmatizer
    }

    pub fn kind(&self) -> LemmatizerKind {
        self.lemmatizer.kind()
    }

    pub fn canonical(&self, raw: &str) -> Result<String, LemmaError> {
        let normalized = textproc::normalize_with(raw, self.options);
        to_canonical(&normalized, self.script)
    }

    pub fn lemmatize_text(&self, raw: &str) -> Result<LemmaSequence, LemmaError> {
        self.lemmatizer.lemmatize(&self.canonical(raw)?)
    }

    /// Lemmatizes text whose script is not declared (model output, mixed
    /// Devanagari/IAST answers).
    pub fn lemmatize_mixed(&self, raw: &str) -> Result<LemmaSequence, LemmaError> {
        let normalized = textproc::normalize_with(raw, self.options);
        self.lemmatizer.lemmatize(&textproc::to_canonical_mixed(&normalized))
    }
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    lemmatizer: String,
    corpus_digest: String,
    chunks: Vec<(String, Vec<String>)>,
}

/// Directory of content-addressed corpus lemmatizations.
#[derive(Debug, Clone)]
pub struct LemmaCache {
    dir: PathBuf,
}

impl LemmaCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        LemmaCache { dir: dir.into() }
    }

    fn path_for(&self, corpus_digest: &str, tag: &str) -> PathBuf {
        let key = hex::encode(Sha256::digest(format!("{corpus_digest}\n{tag}").as_bytes()));
        self.dir.join(format!("{key}.json"))
    }
}

pub fn corpus_digest(chunks: &[DocumentChunk], script: Script) -> String {
    let mut h = Sha256::new();
    h.update(script.name().as_bytes());
    for c in chunks {
        h.update([0]);
        h.update(c.id.as_bytes());
        h.update([0]);
        h.update(c.raw_text.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Fills `lemmas` on every chunk, reusing a cached run when one exists for
/// the same corpus and lemmatizer.
pub fn lemmatize_corpus(
    mut chunks: Vec<DocumentChunk>,
    pipeline: &LemmaPipeline,
    cache: Option<&LemmaCache>,
) -> Result<Vec<DocumentChunk>, LemmaError> {
    let digest = corpus_digest(&chunks, pipeline.script());
    let tag = pipeline.lemmatizer().cache_tag();
    let cache_path = cache.map(|c| c.path_for(&digest, &tag));

    if let Some(path) = &cache_path {
        if let Ok(bytes) = fs::read(path) {
            match serde_json::from_slice::<CacheFile>(&bytes) {
                Ok(file)
                    if file.chunks.len() == chunks.len()
                        && file.chunks.iter().zip(&chunks).all(|((id, _), c)| *id == c.id) =>
                {
                    for (chunk, (_, lemmas)) in chunks.iter_mut().zip(file.chunks) {
                        chunk.lemmas = lemmas;
                    }
                    return Ok(chunks);
                }
                _ => log::warn!("ignoring stale lemma cache {}", path.display()),
            }
        }
    }

    for chunk in &mut chunks {
        chunk.lemmas = pipeline
            .lemmatize_text(&chunk.raw_text)
            .map_err(|e| LemmaError::Chunk { chunk_id: chunk.id.clone(), source: Box::new(e) })?
            .0;
    }

    if let Some(path) = &cache_path {
        let file = CacheFile {
            lemmatizer: tag,
            corpus_digest: digest,
            chunks: chunks.iter().map(|c| (c.id.clone(), c.lemmas.clone())).collect(),
        };
        write_atomic(path, &serde_json::to_vec(&file).map_err(|e| LemmaError::Cache(e.to_string()))?)
            .map_err(|e| LemmaError::Cache(format!("{}: {e}", path.display())))?;
    }
    Ok(chunks)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Multiset precision/recall of predicted against gold lemmas.
pub fn lemma_f1(predicted: &LemmaSequence, gold: &LemmaSequence) -> LemmaScore {
    match (predicted.is_empty(), gold.is_empty()) {
        (true, true) => return LemmaScore { precision: 1.0, recall: 1.0, f1: 1.0 },
        (true, false) | (false, true) => return LemmaScore { precision: 0.0, recall: 0.0, f1: 0.0 },
        _ => {}
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for g in gold.as_slice() {
        *gold_counts.entry(g).or_default() += 1;
    }
    let mut overlap = 0usize;
    for p in predicted.as_slice() {
        if let Some(n) = gold_counts.get_mut(p.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    let precision = overlap as f64 / predicted.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    LemmaScore { precision, recall, f1 }
}

/// Mean and population standard deviation of per-sentence F1.
pub fn mean_lemma_f1(pairs: &[(LemmaSequence, LemmaSequence)]) -> (f64, f64) {
    if pairs.is_empty() {
        return (0.0, 0.0);
    }
    let f1s: Vec<f64> = pairs.iter().map(|(p, g)| lemma_f1(p, g).f1).collect();
    let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
    let var = f1s.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / f1s.len() as f64;
    (mean, var.sqrt())
}
