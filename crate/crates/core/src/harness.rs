//! Dataset loaders, experiment configuration, runs and report files.
//!
//! Dataset formats:
//!
//! * QA: JSON lines, one [`QaRecord`] per line.
//! * NER: `token<TAB>tag` lines (any whitespace separates the two columns),
//!   sentences separated by blank lines.
//! * MT: `source<TAB>reference[<TAB>reference...]` lines.
//!
//! Config files are flat `key = value` text. `include = other.cfg` splices
//! another file in place (relative to the including file); later keys win.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::HarnessError;
use crate::kgtog::{tog_answer, KnowledgeGraph, TogConfig, TogEnv, TogStop, TogTrace};
use crate::lemma::{
    lemmatize_corpus, ExternalConfig, ExternalLemmatizer, IdentityLemmatizer, LemmaCache, LemmaPipeline, Lemmatizer,
    LexiconLemmatizer,
};
use crate::llmclient::{
    parse_tagged_dict, ChatRequest, HttpBackend, HttpConfig, LlmClient, MockLlm, MockScript, ResponseCache,
    DEFAULT_MAX_TOKENS,
};
use crate::metrics::{
    chunk_order, chunk_ranges, chunked_summary_with, corpus_bleu, em_key, exact_match, ner_macro_f1, sentence_bleu,
    ChunkedSummary, EmMode, NerPrediction, NerScores, TagScore, OUTSIDE,
};
use crate::prompts::{format_choices, format_contexts, template_id, Binding, PromptRegistry, Task};
use crate::retrieval::{
    build_index, load_embeddings, top_k_lemmas, Bm25Params, EmbeddingIndex, RetrievalIndex, Retriever, RetrieverKind,
    ScoredChunk,
};
use crate::textproc::{self, chunk_corpus, Script};

// ---------------------------------------------------------------- records

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Topic {
    #[serde(alias = "ramayana", alias = "Rāmāyaṇa")]
    Ramayana,
    #[serde(alias = "ayurveda", alias = "Āyurveda")]
    Ayurveda,
}

impl Topic {
    pub fn english(self) -> &'static str {
        match self {
            Topic::Ramayana => "Ramayana",
            Topic::Ayurveda => "Ayurveda",
        }
    }

    /// Sanskrit name of the topic in `script`.
    pub fn label(self, script: Script) -> String {
        let canonical = match self {
            Topic::Ramayana => "rAmAyaRa",
            Topic::Ayurveda => "Ayurveda",
        };
        textproc::transliterate(canonical, Script::CanonicalRoman, script).expect("static label transliterates")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub id: String,
    pub topic: Topic,
    #[serde(default)]
    pub category: String,
    pub question: String,
    #[serde(default)]
    pub choices: Option<Vec<String>>,
    pub acceptable_answers: Vec<String>,
    #[serde(default)]
    pub acceptable_answers_lemmatized: Option<Vec<String>>,
    #[serde(default)]
    pub requires_reasoning: bool,
    #[serde(default)]
    pub answer_in_retrieved_context: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerRecord {
    pub tokens: Vec<String>,
    pub gold_tags: Vec<String>,
    pub language: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MtRecord {
    pub source: String,
    pub references: Vec<String>,
    pub source_language: String,
    pub target_language: String,
}

fn read(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

fn schema(path: &Path, line: usize, reason: impl Into<String>) -> HarnessError {
    HarnessError::Schema { path: path.to_path_buf(), line, reason: reason.into() }
}

pub fn load_qa(path: impl AsRef<Path>) -> Result<Vec<QaRecord>, HarnessError> {
    let path = path.as_ref();
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in read(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: QaRecord = serde_json::from_str(line).map_err(|e| schema(path, i + 1, e.to_string()))?;
        if rec.question.trim().is_empty() {
            return Err(schema(path, i + 1, "empty question"));
        }
        if rec.acceptable_answers.is_empty() || rec.acceptable_answers.iter().any(|a| a.trim().is_empty()) {
            return Err(schema(path, i + 1, "acceptable_answers must be nonempty strings"));
        }
        if rec.acceptable_answers_lemmatized.as_ref().is_some_and(Vec::is_empty) {
            return Err(schema(path, i + 1, "acceptable_answers_lemmatized is empty"));
        }
        if !ids.insert(rec.id.clone()) {
            return Err(schema(path, i + 1, format!("duplicate id {}", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

fn valid_tag(tag: &str, tagset: Option<&[String]>) -> bool {
    if tag == OUTSIDE {
        return true;
    }
    let Some(ty) = tag.strip_prefix("B-").or_else(|| tag.strip_prefix("I-")) else {
        return false;
    };
    !ty.is_empty() && tagset.is_none_or(|ts| ts.iter().any(|t| t == ty))
}

/// Loads a token/tag file. When `tagset` is given, every entity type must
/// belong to it.
pub fn load_ner(path: impl AsRef<Path>, language: &str, tagset: Option<&[String]>) -> Result<Vec<NerRecord>, HarnessError> {
    let path = path.as_ref();
    let mut out = Vec::new();
    let mut cur = NerRecord { tokens: Vec::new(), gold_tags: Vec::new(), language: language.to_string() };
    let text = read(path)?;
    for (i, line) in text.lines().chain(std::iter::once("")).enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            if !cur.tokens.is_empty() {
                let next = NerRecord { tokens: Vec::new(), gold_tags: Vec::new(), language: language.to_string() };
                out.push(std::mem::replace(&mut cur, next));
            }
            continue;
        }
        if cols.len() != 2 {
            return Err(schema(path, i + 1, format!("expected one token and one tag, found {} fields", cols.len())));
        }
        if !valid_tag(cols[1], tagset) {
            return Err(schema(path, i + 1, format!("invalid tag {}", cols[1])));
        }
        cur.tokens.push(cols[0].to_string());
        cur.gold_tags.push(cols[1].to_string());
    }
    Ok(out)
}

pub fn load_mt(path: impl AsRef<Path>, source_language: &str, target_language: &str) -> Result<Vec<MtRecord>, HarnessError> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (i, line) in read(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() < 2 {
            return Err(schema(path, i + 1, "missing reference column"));
        }
        if cols.iter().any(|c| c.is_empty()) {
            return Err(schema(path, i + 1, "empty source or reference"));
        }
        out.push(MtRecord {
            source: cols[0].to_string(),
            references: cols[1..].iter().map(|s| s.to_string()).collect(),
            source_language: source_language.to_string(),
            target_language: target_language.to_string(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Qa,
    Ner,
    Mt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaMode {
    Closed,
    Rag,
    Tog,
}

macro_rules! keyword_enum {
    ($ty:ty, $($name:literal => $v:expr),+) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($v),)+
                    other => Err(format!("unknown value `{other}`")),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $v { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(TaskKind, "qa" => TaskKind::Qa, "ner" => TaskKind::Ner, "mt" => TaskKind::Mt);
keyword_enum!(QaMode, "closed" => QaMode::Closed, "rag" => QaMode::Rag, "tog" => QaMode::Tog);

fn parse_script(s: &str) -> Result<Script, String> {
    match s.to_ascii_lowercase().as_str() {
        "devanagari" => Ok(Script::Devanagari),
        "iast" => Ok(Script::Iast),
        "slp1" | "canonical" => Ok(Script::CanonicalRoman),
        other => Err(format!("unknown script `{other}`")),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LemmatizerSetting {
    Identity,
    Lexicon { path: PathBuf, script: Script },
    External { command: Vec<String>, timeout_secs: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub dataset: PathBuf,
    pub model: String,
    /// Dataset language: `san`, `lat` or `grc`.
    pub language: String,
    pub prompt_language: String,
    pub script: Script,
    /// Re-script Sanskrit dataset text into `script` before prompting.
    pub transliterate_inputs: bool,
    pub qa_mode: QaMode,
    pub retriever: RetrieverKind,
    pub k: usize,
    pub bm25: Bm25Params,
    pub tog: TogConfig,
    pub lemmatizer: LemmatizerSetting,
    pub corpus: Option<PathBuf>,
    pub corpus_script: Script,
    pub chunk_lines: usize,
    pub overlap_lines: usize,
    pub index: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub kg: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub replay_only: bool,
    pub mock: Option<PathBuf>,
    pub api: HttpConfig,
    pub rate_limit_per_minute: Option<u32>,
    pub seed: u64,
    pub n_chunks: usize,
    pub shuffle_chunks: bool,
    pub concurrency: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

const PATH_KEYS: &[&str] =
    &["dataset", "corpus", "index", "embeddings", "kg", "templates", "cache_dir", "mock", "lemmatizer.lexicon"];

const KNOWN_KEYS: &[&str] = &[
    "task", "dataset", "model", "language", "prompt_language", "script", "transliterate_inputs", "qa_mode",
    "retriever", "k", "bm25.k1", "bm25.b", "tog.sample_limit", "tog.depth_limit", "tog.width_limit",
    "tog.retry_temperature", "lemmatizer", "lemmatizer.lexicon", "lemmatizer.lexicon_script", "lemmatizer.command",
    "lemmatizer.timeout_secs", "corpus", "corpus.script", "corpus.chunk_lines", "corpus.overlap_lines", "index",
    "embeddings", "kg", "templates", "cache_dir", "replay_only", "mock", "api.base_url", "api.path", "api.key_env",
    "api.timeout_secs", "api.rate_limit_per_minute", "seed", "n_chunks", "shuffle_chunks", "concurrency",
    "temperature", "max_tokens",
];

/// Reads a config file into resolved `key → value` pairs. Path-valued keys
/// are made relative to the file that set them.
pub fn read_config_pairs(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>, HarnessError> {
    let mut out = BTreeMap::new();
    let mut stack = Vec::new();
    read_pairs_into(path.as_ref(), &mut out, &mut stack)?;
    Ok(out)
}

fn read_pairs_into(path: &Path, out: &mut BTreeMap<String, String>, stack: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    let canon = fs::canonicalize(path).map_err(|e| HarnessError::io(path, e))?;
    if stack.contains(&canon) {
        return Err(HarnessError::Config(format!("include cycle at {}", path.display())));
    }
    stack.push(canon);
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for (i, raw) in read(path)?.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "include" {
            read_pairs_into(&base.join(v), out, stack)?;
            continue;
        }
        if !KNOWN_KEYS.contains(&k) {
            return Err(HarnessError::Config(format!("{}:{}: unknown key `{k}`", path.display(), i + 1)));
        }
        let v = if PATH_KEYS.contains(&k) && !v.is_empty() { base.join(v).display().to_string() } else { v.to_string() };
        out.insert(k.to_string(), v);
    }
    stack.pop();
    Ok(())
}

fn get<T: FromStr>(pairs: &BTreeMap<String, String>, key: &str, default: T) -> Result<T, HarnessError>
where
    T::Err: fmt::Display,
{
    match pairs.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|e| HarnessError::Config(format!("{key}: {e}"))),
    }
}

fn required(pairs: &BTreeMap<String, String>, key: &str) -> Result<String, HarnessError> {
    pairs.get(key).cloned().ok_or_else(|| HarnessError::Config(format!("missing required key `{key}`")))
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        Self::from_pairs(&read_config_pairs(path)?)
    }

    pub fn from_pairs(p: &BTreeMap<String, String>) -> Result<Self, HarnessError> {
        for k in p.keys() {
            if !KNOWN_KEYS.contains(&k.as_str()) {
                return Err(HarnessError::Config(format!("unknown key `{k}`")));
            }
        }
        let path = |k: &str| p.get(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        let script_of = |k: &str, d: Script| p.get(k).map_or(Ok(d), |v| parse_script(v).map_err(|e| HarnessError::Config(format!("{k}: {e}"))));
        let lemmatizer = match p.get("lemmatizer").map(String::as_str).unwrap_or("identity") {
            "identity" => LemmatizerSetting::Identity,
            "lexicon" => LemmatizerSetting::Lexicon {
                path: path("lemmatizer.lexicon").ok_or_else(|| HarnessError::Config("lemmatizer.lexicon is required".into()))?,
                script: script_of("lemmatizer.lexicon_script", Script::Iast)?,
            },
            "external" => LemmatizerSetting::External {
                command: required(p, "lemmatizer.command")?.split_whitespace().map(String::from).collect(),
                timeout_secs: get(p, "lemmatizer.timeout_secs", 30)?,
            },
            other => return Err(HarnessError::Config(format!("lemmatizer: unknown value `{other}`"))),
        };
        let defaults = HttpConfig::default();
        let cfg = ExperimentConfig {
            task: required(p, "task")?.parse().map_err(|e| HarnessError::Config(format!("task: {e}")))?,
            dataset: PathBuf::from(required(p, "dataset")?),
            model: required(p, "model")?,
            language: p.get("language").cloned().unwrap_or_else(|| "san".into()),
            prompt_language: p.get("prompt_language").cloned().unwrap_or_else(|| "en".into()),
            script: script_of("script", Script::Devanagari)?,
            transliterate_inputs: get(p, "transliterate_inputs", true)?,
            qa_mode: get(p, "qa_mode", QaMode::Closed)?,
            retriever: get(p, "retriever", RetrieverKind::Bm25)?,
            k: get(p, "k", 4)?,
            bm25: Bm25Params { k1: get(p, "bm25.k1", 1.5)?, b: get(p, "bm25.b", 0.75)? },
            tog: TogConfig {
                sample_limit: get(p, "tog.sample_limit", 15)?,
                depth_limit: get(p, "tog.depth_limit", 1)?,
                width_limit: get(p, "tog.width_limit", 3)?,
                rng_seed: get(p, "seed", 0)?,
                retry_temperature: get(p, "tog.retry_temperature", 0.7)?,
            },
            lemmatizer,
            corpus: path("corpus"),
            corpus_script: script_of("corpus.script", Script::Devanagari)?,
            chunk_lines: get(p, "corpus.chunk_lines", 10)?,
            overlap_lines: get(p, "corpus.overlap_lines", 0)?,
            index: path("index"),
            embeddings: path("embeddings"),
            kg: path("kg"),
            templates: path("templates"),
            cache_dir: path("cache_dir"),
            replay_only: get(p, "replay_only", false)?,
            mock: path("mock"),
            api: HttpConfig {
                base_url: p.get("api.base_url").cloned().unwrap_or(defaults.base_url),
                path: p.get("api.path").cloned().unwrap_or(defaults.path),
                api_key_env: p.get("api.key_env").cloned().unwrap_or(defaults.api_key_env),
                timeout: Duration::from_secs(get(p, "api.timeout_secs", defaults.timeout.as_secs())?),
                ..defaults
            },
            rate_limit_per_minute: p.get("api.rate_limit_per_minute").map(|v| v.parse()).transpose().map_err(|e| HarnessError::Config(format!("api.rate_limit_per_minute: {e}")))?,
            seed: get(p, "seed", 0)?,
            n_chunks: get(p, "n_chunks", 10)?,
            shuffle_chunks: get(p, "shuffle_chunks", false)?,
            concurrency: get(p, "concurrency", 4)?,
            temperature: get(p, "temperature", 0.0)?,
            max_tokens: get(p, "max_tokens", DEFAULT_MAX_TOKENS)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.task == TaskKind::Qa && self.qa_mode == QaMode::Rag {
            if self.k == 0 {
                return bad("k must be at least 1 in rag mode (use qa_mode = closed for no context)");
            }
            if self.corpus.is_none() && self.index.is_none() {
                return bad("rag mode needs `corpus` or `index`");
            }
            if self.retriever == RetrieverKind::AvgEmbedding && self.embeddings.is_none() {
                return bad("avg_embedding retriever needs `embeddings`");
            }
        }
        if self.task == TaskKind::Qa && self.qa_mode == QaMode::Tog && self.kg.is_none() {
            return bad("tog mode needs `kg`");
        }
        if self.n_chunks == 0 || self.concurrency == 0 {
            return bad("n_chunks and concurrency must be at least 1");
        }
        if self.tog.width_limit == 0 || self.tog.sample_limit == 0 {
            return bad("tog width and sample limits must be at least 1");
        }
        if self.replay_only && self.cache_dir.is_none() {
            return bad("replay_only needs cache_dir");
        }
        if self.script == Script::CanonicalRoman {
            return bad("script must be devanagari or iast");
        }
        Ok(())
    }

    /// Every setting as `key → value`, defaults included.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        let script = |s: Script| match s {
            Script::Devanagari => "devanagari",
            Script::Iast => "iast",
            Script::CanonicalRoman => "slp1",
        };
        put("task", self.task.to_string());
        put("dataset", self.dataset.display().to_string());
        put("model", self.model.clone());
        put("language", self.language.clone());
        put("prompt_language", self.prompt_language.clone());
        put("script", script(self.script).into());
        put("transliterate_inputs", self.transliterate_inputs.to_string());
        put("qa_mode", self.qa_mode.to_string());
        put("retriever", self.retriever.to_string());
        put("k", self.k.to_string());
        put("bm25.k1", self.bm25.k1.to_string());
        put("bm25.b", self.bm25.b.to_string());
        put("tog.sample_limit", self.tog.sample_limit.to_string());
        put("tog.depth_limit", self.tog.depth_limit.to_string());
        put("tog.width_limit", self.tog.width_limit.to_string());
        put("tog.retry_temperature", self.tog.retry_temperature.to_string());
        match &self.lemmatizer {
            LemmatizerSetting::Identity => put("lemmatizer", "identity".into()),
            LemmatizerSetting::Lexicon { path, script: s } => {
                put("lemmatizer", "lexicon".into());
                put("lemmatizer.lexicon", path.display().to_string());
                put("lemmatizer.lexicon_script", script(*s).into());
            }
            LemmatizerSetting::External { command, timeout_secs } => {
                put("lemmatizer", "external".into());
                put("lemmatizer.command", command.join(" "));
                put("lemmatizer.timeout_secs", timeout_secs.to_string());
            }
        }
        for (k, v) in [
            ("corpus", &self.corpus),
            ("index", &self.index),
            ("embeddings", &self.embeddings),
            ("kg", &self.kg),
            ("templates", &self.templates),
            ("cache_dir", &self.cache_dir),
            ("mock", &self.mock),
        ] {
            if let Some(v) = v {
                put(k, v.display().to_string());
            }
        }
        put("corpus.script", script(self.corpus_script).into());
        put("corpus.chunk_lines", self.chunk_lines.to_string());
        put("corpus.overlap_lines", self.overlap_lines.to_string());
        put("replay_only", self.replay_only.to_string());
        put("api.base_url", self.api.base_url.clone());
        put("api.path", self.api.path.clone());
        put("api.key_env", self.api.api_key_env.clone());
        put("api.timeout_secs", self.api.timeout.as_secs().to_string());
        if let Some(r) = self.rate_limit_per_minute {
            put("api.rate_limit_per_minute", r.to_string());
        }
        put("seed", self.seed.to_string());
        put("n_chunks", self.n_chunks.to_string());
        put("shuffle_chunks", self.shuffle_chunks.to_string());
        put("concurrency", self.concurrency.to_string());
        put("temperature", self.temperature.to_string());
        put("max_tokens", self.max_tokens.to_string());
        m
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

// ---------------------------------------------------------------- setup

pub fn build_pipeline(cfg: &ExperimentConfig) -> Result<LemmaPipeline, HarnessError> {
    let lemmatizer: Arc<dyn Lemmatizer> = match &cfg.lemmatizer {
        LemmatizerSetting::Identity => Arc::new(IdentityLemmatizer),
        LemmatizerSetting::Lexicon { path, script } => Arc::new(LexiconLemmatizer::load(path, *script)?),
        LemmatizerSetting::External { command, timeout_secs } => {
            let mut ec = ExternalConfig::new(command.clone());
            ec.timeout = Duration::from_secs(*timeout_secs);
            ec.pool_size = cfg.concurrency;
            Arc::new(ExternalLemmatizer::new(ec)?)
        }
    };
    Ok(LemmaPipeline::new(lemmatizer, cfg.corpus_script))
}

pub fn build_client(cfg: &ExperimentConfig) -> Result<LlmClient, HarnessError> {
    let cache = cfg.cache_dir.as_ref().map(|d| ResponseCache::new(d.join("llm")));
    let client = if cfg.replay_only {
        LlmClient::replay_only(cache.ok_or_else(|| HarnessError::Config("replay_only needs cache_dir".into()))?)
    } else if let Some(mock) = &cfg.mock {
        LlmClient::live(MockLlm::from_script(MockScript::load(mock)?), cache)
    } else {
        LlmClient::live(HttpBackend::new(cfg.api.clone())?, cache)
    };
    let client = client.with_max_in_flight(cfg.concurrency);
    Ok(match cfg.rate_limit_per_minute {
        Some(r) => client.with_rate_limit(r),
        None => client,
    })
}

pub fn load_prompts(cfg: &ExperimentConfig) -> Result<PromptRegistry, HarnessError> {
    Ok(match &cfg.templates {
        Some(dir) => PromptRegistry::load_dir(dir)?,
        None => PromptRegistry::builtin(),
    })
}

/// Chunks, lemmatizes and indexes `cfg.corpus`.
pub fn build_corpus_index(cfg: &ExperimentConfig, pipeline: &LemmaPipeline) -> Result<RetrievalIndex, HarnessError> {
    let path = cfg.corpus.as_ref().ok_or_else(|| HarnessError::Config("`corpus` is not set".into()))?;
    let text = read(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let chunks = chunk_corpus(&lines, cfg.chunk_lines, cfg.overlap_lines)?;
    let cache = cfg.cache_dir.as_ref().map(|d| LemmaCache::new(d.join("lemma")));
    let chunks = lemmatize_corpus(chunks, pipeline, cache.as_ref())?;
    Ok(build_index(chunks, cfg.bm25)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Qa(Vec<QaRecord>),
    Ner(Vec<NerRecord>),
    Mt(Vec<MtRecord>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Qa(v) => v.len(),
            Dataset::Ner(v) => v.len(),
            Dataset::Mt(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn load_dataset(cfg: &ExperimentConfig, prompts: &PromptRegistry) -> Result<Dataset, HarnessError> {
    Ok(match cfg.task {
        TaskKind::Qa => Dataset::Qa(load_qa(&cfg.dataset)?),
        TaskKind::Ner => Dataset::Ner(load_ner(&cfg.dataset, &cfg.language, prompts.tagset(&cfg.language))?),
        TaskKind::Mt => Dataset::Mt(load_mt(&cfg.dataset, &cfg.language, "en")?),
    })
}

fn language_name(code: &str) -> &str {
    match code {
        "san" => "Sanskrit",
        "lat" => "Latin",
        "grc" => "Ancient Greek",
        "en" => "English",
        other => other,
    }
}

// ---------------------------------------------------------------- run

/// What the model said for one item, kept so scoring can be redone offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawOutput {
    pub index: usize,
    pub id: String,
    pub text: Option<String>,
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retrieved: Vec<ScoredChunk>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contexts: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_query: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TogTrace>,
}

struct RunCtx<'a> {
    cfg: &'a ExperimentConfig,
    llm: &'a LlmClient,
    prompts: &'a PromptRegistry,
    pipeline: &'a LemmaPipeline,
    index: Option<&'a RetrievalIndex>,
    embeddings: Option<&'a EmbeddingIndex>,
    kg: Option<&'a KnowledgeGraph>,
}

impl RunCtx<'_> {
    /// Dataset text as it goes into a prompt.
    fn show(&self, text: &str) -> String {
        if self.cfg.language == "san" && self.cfg.transliterate_inputs {
            textproc::transliterate(&textproc::to_canonical_mixed(text), Script::CanonicalRoman, self.cfg.script)
                .unwrap_or_else(|_| text.to_string())
        } else {
            text.to_string()
        }
    }

    fn complete(&self, id: &str, binding: &Binding) -> Result<String, HarnessError> {
        let messages = self.prompts.render(id, binding, self.cfg.script)?;
        let req = ChatRequest { max_tokens: self.cfg.max_tokens, ..ChatRequest::new(&self.cfg.model, messages) }
            .with_temperature(self.cfg.temperature);
        Ok(self.llm.complete(&req)?.text)
    }

    fn item(&self, dataset: &Dataset, i: usize) -> Result<RawOutput, HarnessError> {
        let mut out = RawOutput {
            index: i,
            id: String::new(),
            text: None,
            error: None,
            retrieved: Vec::new(),
            contexts: Vec::new(),
            zero_query: false,
            trace: None,
        };
        let mut b = Binding::new();
        let result: Result<String, HarnessError> = match dataset {
            Dataset::Qa(recs) => {
                let r = &recs[i];
                out.id = r.id.clone();
                b.insert("QUESTION".into(), self.show(&r.question));
                let choices: Vec<String> = r.choices.iter().flatten().map(|c| self.show(c)).collect();
                b.insert("CHOICES".into(), format_choices(&choices));
                b.insert(
                    "TOPIC".into(),
                    if self.cfg.prompt_language == "en" { r.topic.english().to_string() } else { r.topic.label(self.cfg.script) },
                );
                match self.cfg.qa_mode {
                    QaMode::Closed => self.complete(&template_id(Task::QaClosed, &self.cfg.prompt_language), &b),
                    QaMode::Rag => {
                        let index = self.index.expect("rag index prepared");
                        let retriever = match self.cfg.retriever {
                            RetrieverKind::Bm25 => Retriever::Bm25,
                            RetrieverKind::AvgEmbedding => Retriever::AvgEmbedding(self.embeddings.expect("embeddings prepared")),
                        };
                        let query = self.pipeline.lemmatize_mixed(&r.question)?;
                        let ranking = top_k_lemmas(index, &query, self.cfg.k, retriever)?;
                        out.zero_query = ranking.zero_query;
                        out.contexts = ranking
                            .hits
                            .iter()
                            .map(|h| index.chunk(&h.chunk_id).map(|c| c.raw_text.clone()).unwrap_or_default())
                            .collect();
                        out.retrieved = ranking.hits;
                        let shown: Vec<String> =
                            out.contexts.iter().map(|c| self.show(&textproc::normalize(c))).collect();
                        b.insert("CONTEXTS".into(), format_contexts(&shown));
                        self.complete(&template_id(Task::QaRag, &self.cfg.prompt_language), &b)
                    }
                    QaMode::Tog => {
                        let shown = QaRecord {
                            question: b["QUESTION"].clone(),
                            choices: r.choices.as_ref().map(|_| choices.clone()),
                            ..r.clone()
                        };
                        let env = TogEnv {
                            kg: self.kg.expect("kg prepared"),
                            llm: self.llm,
                            prompts: self.prompts,
                            pipeline: self.pipeline,
                            model: &self.cfg.model,
                            script: self.cfg.script,
                        };
                        match tog_answer(&shown, &env, &self.cfg.tog) {
                            Ok(o) => {
                                out.trace = Some(o.trace);
                                Ok(o.answer)
                            }
                            Err(e) => Err(e.into()),
                        }
                    }
                }
            }
            Dataset::Ner(recs) => {
                let r = &recs[i];
                out.id = format!("ner-{:06}", i + 1);
                let tokens: Vec<String> = r.tokens.iter().map(|t| self.show(t)).collect();
                b.insert("INPUT".into(), tokens.join(" "));
                b.insert("LANGUAGE".into(), language_name(&r.language).into());
                b.insert("ENTITY TYPES".into(), self.prompts.entity_type_list(&r.language)?);
                self.complete(&template_id(Task::Ner, &self.cfg.prompt_language), &b)
            }
            Dataset::Mt(recs) => {
                let r = &recs[i];
                out.id = format!("mt-{:06}", i + 1);
                b.insert("INPUT".into(), self.show(&r.source));
                b.insert("LANGUAGE".into(), language_name(&r.source_language).into());
                self.complete(&template_id(Task::Mt, &self.cfg.prompt_language), &b)
            }
        };
        match result {
            Ok(text) => out.text = Some(text),
            // Configuration problems abort the run; model-side failures are
            // recorded on the item.
            Err(e @ (HarnessError::Prompt(_) | HarnessError::Config(_) | HarnessError::Lemma(_))) => return Err(e),
            Err(e) => out.error = Some(e.to_string()),
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub raw: Vec<RawOutput>,
    pub report: MetricReport,
}

/// Runs `cfg` against `llm`: prompts every item (up to `cfg.concurrency` at
/// once), then scores. Output order is dataset order.
pub fn run_experiment(cfg: &ExperimentConfig, llm: &LlmClient) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let prompts = load_prompts(cfg)?;
    let pipeline = build_pipeline(cfg)?;
    let dataset = load_dataset(cfg, &prompts)?;
    let rag = cfg.task == TaskKind::Qa && cfg.qa_mode == QaMode::Rag;
    let index = if !rag {
        None
    } else if let Some(p) = &cfg.index {
        Some(RetrievalIndex::load(p)?)
    } else {
        Some(build_corpus_index(cfg, &pipeline)?)
    };
    let embeddings = match (&index, cfg.retriever, &cfg.embeddings) {
        (Some(ix), RetrieverKind::AvgEmbedding, Some(p)) => Some(EmbeddingIndex::build(ix, load_embeddings(p)?)),
        _ => None,
    };
    let kg = match (cfg.task, cfg.qa_mode, &cfg.kg) {
        (TaskKind::Qa, QaMode::Tog, Some(p)) => Some(KnowledgeGraph::load(p)?),
        _ => None,
    };
    let ctx = RunCtx {
        cfg,
        llm,
        prompts: &prompts,
        pipeline: &pipeline,
        index: index.as_ref(),
        embeddings: embeddings.as_ref(),
        kg: kg.as_ref(),
    };

    let n = dataset.len();
    let slots: Mutex<Vec<Option<Result<RawOutput, HarnessError>>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..cfg.concurrency.min(n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = ctx.item(&dataset, i);
                let failed = r.is_err();
                slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(r);
                if failed {
                    next.store(n, Ordering::SeqCst);
                }
            });
        }
    });
    let mut raw = Vec::with_capacity(n);
    for r in slots.into_inner().unwrap_or_else(|p| p.into_inner()).into_iter().flatten() {
        raw.push(r?);
    }
    let report = score(cfg, &dataset, &raw, &pipeline)?;
    Ok(RunOutput { raw, report })
}

// ---------------------------------------------------------------- scoring

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRow {
    pub index: usize,
    pub id: String,
    pub scores: BTreeMap<String, f64>,
    pub flags: Vec<String>,
    pub prediction: String,
    pub gold: String,
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScores {
    pub n: usize,
    #[serde(rename = "Inflected")]
    pub inflected: f64,
    #[serde(rename = "Lemmatized")]
    pub lemmatized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSplit {
    pub answer_in_context: SubsetScores,
    pub answer_not_in_context: SubsetScores,
    pub unannotated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValue {
    pub task: String,
    pub condition: String,
    pub model: String,
    pub value: f64,
}

const REFERENCE_TSV: &str = include_str!("../data/reference.tsv");

/// Published hosted-model scores bundled with the library.
pub fn reference_values() -> Vec<ReferenceValue> {
    REFERENCE_TSV
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let c: Vec<&str> = l.split('\t').collect();
            ReferenceValue {
                task: c[0].into(),
                condition: c[1].into(),
                model: c[2].into(),
                value: c[3].parse().expect("reference value is a number"),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub config: BTreeMap<String, String>,
    pub task: TaskKind,
    pub rows: Vec<ItemRow>,
    pub aggregates: BTreeMap<String, f64>,
    pub chunked: BTreeMap<String, ChunkedSummary>,
    pub split: Option<ContextSplit>,
    pub ner: Option<NerScores>,
    pub flags: BTreeMap<String, usize>,
    pub reference: Vec<ReferenceValue>,
    pub manual_review: Vec<ItemRow>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

struct Chunker {
    order: Vec<usize>,
    ranges: Vec<std::ops::Range<usize>>,
}

impl Chunker {
    fn new(cfg: &ExperimentConfig, n: usize) -> Option<Self> {
        let ranges = chunk_ranges(n, cfg.n_chunks).ok()?;
        Some(Chunker { order: chunk_order(n, cfg.shuffle_chunks.then_some(cfg.seed)), ranges })
    }

    fn groups(&self) -> impl Iterator<Item = &[usize]> {
        self.ranges.iter().map(|r| &self.order[r.clone()])
    }

    fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }
}

/// Scores model outputs against the dataset.
pub fn score(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    raw: &[RawOutput],
    pipeline: &LemmaPipeline,
) -> Result<MetricReport, HarnessError> {
    if raw.len() != dataset.len() {
        return Err(HarnessError::Config(format!("{} outputs for {} items", raw.len(), dataset.len())));
    }
    let mut report = MetricReport {
        config: cfg.to_pairs(),
        task: cfg.task,
        rows: Vec::with_capacity(raw.len()),
        aggregates: BTreeMap::new(),
        chunked: BTreeMap::new(),
        split: None,
        ner: None,
        flags: BTreeMap::new(),
        reference: Vec::new(),
        manual_review: Vec::new(),
    };
    let chunker = Chunker::new(cfg, raw.len());
    if chunker.is_none() {
        report.flags.insert("too_few_items_for_chunks".into(), raw.len());
    }
    let prediction = |o: &RawOutput| o.text.as_deref().unwrap_or("").trim().to_string();
    let base_flags = |o: &RawOutput| {
        let mut f = Vec::new();
        if o.error.is_some() {
            f.push("llm_error".to_string());
        } else if o.text.as_deref().unwrap_or("").trim().is_empty() {
            f.push("empty_prediction".to_string());
        }
        if o.zero_query {
            f.push("zero_query".to_string());
        }
        if let Some(t) = &o.trace {
            if t.steps.iter().any(|s| s.fallback) {
                f.push("tog_fallback".to_string());
            }
            if t.steps.iter().any(|s| s.parse_failed) {
                f.push("tog_parse_failed".to_string());
            }
            if t.stop == TogStop::NoEntities {
                f.push("tog_no_entities".to_string());
            }
        }
        f
    };

    match dataset {
        Dataset::Qa(recs) => {
            let mut scores: BTreeMap<EmMode, Vec<f64>> = BTreeMap::new();
            for (r, o) in recs.iter().zip(raw) {
                let pred = prediction(o);
                let mut row = ItemRow {
                    index: o.index,
                    id: r.id.clone(),
                    scores: BTreeMap::new(),
                    flags: base_flags(o),
                    prediction: pred.clone(),
                    gold: r.acceptable_answers.join(" | "),
                    extra: BTreeMap::new(),
                };
                for mode in EmMode::ALL {
                    let gold = match mode {
                        EmMode::Lemmatized => r.acceptable_answers_lemmatized.as_ref().unwrap_or(&r.acceptable_answers),
                        EmMode::Inflected => &r.acceptable_answers,
                    };
                    let em = exact_match(&pred, gold, mode, pipeline)? as f64;
                    row.scores.insert(format!("em_{}", mode.name()), em);
                    scores.entry(mode).or_default().push(em);
                }
                row.extra.insert(
                    "answer_in_context".into(),
                    r.answer_in_retrieved_context.map(|b| b.to_string()).unwrap_or_default(),
                );
                if cfg.qa_mode == QaMode::Rag {
                    let keys: Vec<String> = o.contexts.iter().map(|c| em_key(c)).collect();
                    let found = r.acceptable_answers.iter().any(|a| {
                        let a = em_key(a);
                        !a.is_empty() && keys.iter().any(|k| k.contains(&a))
                    });
                    row.extra.insert("answer_found_in_context".into(), found.to_string());
                    row.extra.insert(
                        "contexts".into(),
                        o.retrieved.iter().map(|h| h.chunk_id.as_str()).collect::<Vec<_>>().join(";"),
                    );
                }
                if r.requires_reasoning {
                    let mut review = row.clone();
                    review.extra.insert("question".into(), r.question.clone());
                    report.manual_review.push(review);
                }
                report.rows.push(row);
            }
            for (mode, v) in &scores {
                report.aggregates.insert(format!("em_{}", mode.name()), mean(v));
                if let Some(c) = &chunker {
                    let s = chunked_summary_with(v, c.ranges.len(), cfg.shuffle_chunks.then_some(cfg.seed))?;
                    report.chunked.insert(format!("em_{}", mode.name()), s);
                }
            }
            let subset = |want: bool| {
                let idx: Vec<usize> =
                    (0..recs.len()).filter(|&i| recs[i].answer_in_retrieved_context == Some(want)).collect();
                let pick = |m: EmMode| mean(&idx.iter().map(|&i| scores[&m][i]).collect::<Vec<_>>());
                SubsetScores { n: idx.len(), inflected: pick(EmMode::Inflected), lemmatized: pick(EmMode::Lemmatized) }
            };
            let (yes, no) = (subset(true), subset(false));
            if yes.n + no.n > 0 {
                let unannotated = recs.len() - yes.n - no.n;
                report.split = Some(ContextSplit { answer_in_context: yes, answer_not_in_context: no, unannotated });
            }
        }
        Dataset::Ner(recs) => {
            let san = cfg.language == "san";
            let canon = |s: &str| if san { textproc::to_canonical_mixed(s) } else { s.to_string() };
            let tokens: Vec<Vec<String>> = recs.iter().map(|r| r.tokens.iter().map(|t| canon(t)).collect()).collect();
            let tags: Vec<Vec<String>> = recs.iter().map(|r| r.gold_tags.clone()).collect();
            let mut preds = Vec::with_capacity(recs.len());
            for (r, o) in recs.iter().zip(raw) {
                let parsed = parse_tagged_dict(o.text.as_deref().unwrap_or(""));
                let pred = NerPrediction::new(
                    parsed.prediction.entries.iter().map(|(t, ws)| (t.clone(), ws.iter().map(|w| canon(w)).collect())).collect(),
                );
                let mut flags = base_flags(o);
                if o.text.is_some() && parsed.parse_failed {
                    flags.push("parse_failed".into());
                }
                let one = ner_macro_f1(&tokens[o.index..=o.index], &tags[o.index..=o.index], std::slice::from_ref(&pred), &[])?;
                report.rows.push(ItemRow {
                    index: o.index,
                    id: o.id.clone(),
                    scores: BTreeMap::from([("sentence_macro_f1".to_string(), one.macro_f1)]),
                    flags,
                    prediction: prediction(o),
                    gold: r.tokens.iter().zip(&r.gold_tags).map(|(t, g)| format!("{t}/{g}")).collect::<Vec<_>>().join(" "),
                    extra: BTreeMap::new(),
                });
                preds.push(pred);
            }
            let type_order = PromptRegistry::builtin().tagset(&cfg.language).map(<[String]>::to_vec).unwrap_or_default();
            let all = ner_macro_f1(&tokens, &tags, &preds, &type_order)?;
            report.aggregates.insert("macro_f1".into(), all.macro_f1);
            if let Some(c) = &chunker {
                let mut values = Vec::new();
                for g in c.groups() {
                    let pick = |v: &Vec<Vec<String>>| g.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
                    let p: Vec<NerPrediction> = g.iter().map(|&i| preds[i].clone()).collect();
                    values.push(ner_macro_f1(&pick(&tokens), &pick(&tags), &p, &type_order)?.macro_f1);
                }
                report.chunked.insert("macro_f1".into(), ChunkedSummary::from_chunk_values(values, c.sizes()));
            }
            report.ner = Some(all);
        }
        Dataset::Mt(recs) => {
            let cands: Vec<String> = raw.iter().map(prediction).collect();
            let refs: Vec<Vec<String>> = recs.iter().map(|r| r.references.clone()).collect();
            for ((r, o), c) in recs.iter().zip(raw).zip(&cands) {
                report.rows.push(ItemRow {
                    index: o.index,
                    id: o.id.clone(),
                    scores: BTreeMap::from([("sentence_bleu".to_string(), sentence_bleu(c, &r.references, 4)?)]),
                    flags: base_flags(o),
                    prediction: c.clone(),
                    gold: r.references.join(" | "),
                    extra: BTreeMap::new(),
                });
            }
            report.aggregates.insert("bleu".into(), corpus_bleu(&cands, &refs, 4)?.bleu);
            if let Some(c) = &chunker {
                let mut values = Vec::new();
                for g in c.groups() {
                    let cc: Vec<String> = g.iter().map(|&i| cands[i].clone()).collect();
                    let rr: Vec<Vec<String>> = g.iter().map(|&i| refs[i].clone()).collect();
                    values.push(corpus_bleu(&cc, &rr, 4)?.bleu);
                }
                report.chunked.insert("bleu".into(), ChunkedSummary::from_chunk_values(values, c.sizes()));
            }
        }
    }
    for row in &report.rows {
        for f in &row.flags {
            *report.flags.entry(f.clone()).or_default() += 1;
        }
    }
    report.reference = reference_values()
        .into_iter()
        .filter(|r| r.task == cfg.task.to_string() && r.model == cfg.model)
        .collect();
    Ok(report)
}

// ---------------------------------------------------------------- report

#[derive(Serialize)]
struct SummaryJson<'a> {
    task: String,
    model: &'a str,
    n_items: usize,
    metrics: &'a BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    em: Option<BTreeMap<&'static str, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    context_split: Option<&'a ContextSplit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_tag: Option<&'a BTreeMap<String, TagScore>>,
    chunked: &'a BTreeMap<String, ChunkedSummary>,
    flags: &'a BTreeMap<String, usize>,
    reference: &'a [ReferenceValue],
    config: &'a BTreeMap<String, String>,
}

#[derive(Serialize)]
struct BoxStats<'a> {
    min: f64,
    q1: f64,
    median: f64,
    q3: f64,
    max: f64,
    mean: f64,
    chunk_sizes: &'a [usize],
    per_chunk: &'a [f64],
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let err = |e: csv::Error| HarnessError::Config(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| HarnessError::Config(format!("csv: {e}")))
}

fn rows_csv(rows: &[ItemRow]) -> Result<Vec<u8>, HarnessError> {
    let score_cols: BTreeSet<&String> = rows.iter().flat_map(|r| r.scores.keys()).collect();
    let extra_cols: BTreeSet<&String> = rows.iter().flat_map(|r| r.extra.keys()).collect();
    let mut header = vec!["index".to_string(), "id".to_string()];
    header.extend(score_cols.iter().map(|s| s.to_string()));
    header.extend(["flags", "prediction", "gold"].map(String::from));
    header.extend(extra_cols.iter().map(|s| s.to_string()));
    csv_bytes(
        &header,
        rows.iter().map(|r| {
            let mut rec = vec![r.index.to_string(), r.id.clone()];
            rec.extend(score_cols.iter().map(|c| r.scores.get(*c).map(f64::to_string).unwrap_or_default()));
            rec.push(r.flags.join(";"));
            rec.push(r.prediction.clone());
            rec.push(r.gold.clone());
            rec.extend(extra_cols.iter().map(|c| r.extra.get(*c).cloned().unwrap_or_default()));
            rec
        }),
    )
}

pub const RAW_OUTPUTS_FILE: &str = "raw_outputs.jsonl";

/// Writes `items.csv`, `summary.json`, `boxplot.json`, `config.txt`,
/// `raw_outputs.jsonl`, plus `confusion.csv` (NER) and `manual_review.csv`
/// (QA items needing reasoning). Identical inputs give identical bytes.
pub fn write_report(run: &RunOutput, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, HarnessError> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let r = &run.report;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<(), HarnessError> {
        let p = dir.join(name);
        write_file(&p, &bytes)?;
        written.push(p);
        Ok(())
    };

    put("items.csv", rows_csv(&r.rows)?)?;

    let em = (r.task == TaskKind::Qa).then(|| {
        BTreeMap::from([
            ("Inflected", r.aggregates.get("em_inflected").copied().unwrap_or(0.0)),
            ("Lemmatized", r.aggregates.get("em_lemmatized").copied().unwrap_or(0.0)),
        ])
    });
    let summary = SummaryJson {
        task: r.task.to_string(),
        model: r.config.get("model").map(String::as_str).unwrap_or(""),
        n_items: r.rows.len(),
        metrics: &r.aggregates,
        em,
        context_split: r.split.as_ref(),
        per_tag: r.ner.as_ref().map(|n| &n.per_tag),
        chunked: &r.chunked,
        flags: &r.flags,
        reference: &r.reference,
        config: &r.config,
    };
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    put("summary.json", json.into_bytes())?;

    let boxes: BTreeMap<&String, BoxStats> = r
        .chunked
        .iter()
        .map(|(k, s)| {
            (k, BoxStats {
                min: s.min,
                q1: s.q1,
                median: s.median,
                q3: s.q3,
                max: s.max,
                mean: s.mean,
                chunk_sizes: &s.chunk_sizes,
                per_chunk: &s.per_chunk_means,
            })
        })
        .collect();
    let mut json = serde_json::to_string_pretty(&boxes).expect("boxplot serializes");
    json.push('\n');
    put("boxplot.json", json.into_bytes())?;

    if let Some(ner) = &r.ner {
        let mut header = vec!["gold\\pred".to_string()];
        header.extend(ner.confusion.labels.iter().cloned());
        let rows = ner.confusion.labels.iter().zip(&ner.confusion.row_normalized).map(|(l, row)| {
            let mut rec = vec![l.clone()];
            rec.extend(row.iter().map(f64::to_string));
            rec
        });
        put("confusion.csv", csv_bytes(&header, rows)?)?;
    }

    if r.task == TaskKind::Qa {
        put("manual_review.csv", rows_csv(&r.manual_review)?)?;
    }

    put("config.txt", r.config.iter().map(|(k, v)| format!("{k} = {v}\n")).collect::<String>().into_bytes())?;

    let mut jsonl = String::new();
    for o in &run.raw {
        jsonl.push_str(&serde_json::to_string(o).expect("raw output serializes"));
        jsonl.push('\n');
    }
    put(RAW_OUTPUTS_FILE, jsonl.into_bytes())?;
    Ok(written)
}

pub fn load_raw_outputs(path: impl AsRef<Path>) -> Result<Vec<RawOutput>, HarnessError> {
    let path = path.as_ref();
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| schema(path, i + 1, e.to_string())))
        .collect()
}

/// Re-scores saved outputs without calling a model.
pub fn rescore(cfg: &ExperimentConfig, raw: Vec<RawOutput>) -> Result<RunOutput, HarnessError> {
    let prompts = load_prompts(cfg)?;
    let pipeline = build_pipeline(cfg)?;
    let dataset = load_dataset(cfg, &prompts)?;
    let report = score(cfg, &dataset, &raw, &pipeline)?;
    Ok(RunOutput { raw, report })
}

/// Plain-text table of a `summary.json`.
pub fn render_summary(summary: &serde_json::Value) -> String {
    let mut out = String::new();
    let s = |v: &serde_json::Value| v.as_str().unwrap_or("").to_string();
    out.push_str(&format!("task: {}  model: {}  items: {}\n", s(&summary["task"]), s(&summary["model"]), summary["n_items"]));
    if let Some(m) = summary["metrics"].as_object() {
        for (k, v) in m {
            out.push_str(&format!("  {k:<20} {:.4}\n", v.as_f64().unwrap_or(0.0)));
        }
    }
    if let Some(split) = summary.get("context_split").and_then(|v| v.as_object()) {
        for (k, v) in split {
            if let Some(o) = v.as_object() {
                out.push_str(&format!(
                    "  {k:<22} n={:<5} Inflected={:.4} Lemmatized={:.4}\n",
                    o["n"],
                    o["Inflected"].as_f64().unwrap_or(0.0),
                    o["Lemmatized"].as_f64().unwrap_or(0.0)
                ));
            }
        }
    }
    if let Some(c) = summary["chunked"].as_object() {
        for (k, v) in c {
            out.push_str(&format!(
                "  chunks[{k}] median={:.4} q1={:.4} q3={:.4} min={:.4} max={:.4}\n",
                v["median"].as_f64().unwrap_or(0.0),
                v["q1"].as_f64().unwrap_or(0.0),
                v["q3"].as_f64().unwrap_or(0.0),
                v["min"].as_f64().unwrap_or(0.0),
                v["max"].as_f64().unwrap_or(0.0)
            ));
        }
    }
    if let Some(refs) = summary["reference"].as_array() {
        if !refs.is_empty() {
            out.push_str("  published values for this model:\n");
            for r in refs {
                out.push_str(&format!("    {:<45} {}\n", s(&r["condition"]), r["value"]));
            }
        }
    }
    out
}
