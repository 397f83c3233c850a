#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use clnlu::harness::{run_experiment, write_report, ExperimentConfig, MetricReport, TaskKind};
use clnlu::kgtog::{tog_answer, KnowledgeGraph, TogConfig, TogEnv, TogStop, TogTrace};
use clnlu::lemma::{lemma_f1, LemmaPipeline, LemmaSequence, LexiconLemmatizer};
use clnlu::llmclient::{ChatRequest, LlmClient, MockLlm};
use clnlu::metrics::{corpus_bleu, ner_macro_f1, NerPrediction, NerScores};
use clnlu::prompts::{tog_ids, PromptRegistry};
use clnlu::retrieval::{
    build_index, top_k_lemmas, Bm25Params, EmbeddingIndex, EmbeddingTable, Retriever, ScoredChunk,
};
use clnlu::textproc::{transliterate, DocumentChunk, LineSpan, Script, IAST_ALPHABET};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ------------------------------------------------------------ 1 retrieval

struct Corpus {
    chunks: Vec<DocumentChunk>,
    vectors: HashMap<String, Vec<f64>>,
    dim: usize,
    vocab: Vec<String>,
}

fn random_corpus(rng: &mut ChaCha8Rng) -> Corpus {
    let n = rng.gen_range(1..=1000);
    let v = rng.gen_range(1..=200);
    let vocab: Vec<String> = (0..v).map(|i| format!("w{i}")).collect();
    let mut chunks: Vec<DocumentChunk> = (0..n)
        .map(|i| {
            let len = rng.gen_range(0..=25);
            // skewed draws give a spread of document frequencies
            let lemmas: Vec<String> = (0..len)
                .map(|_| {
                    let r: f64 = rng.gen();
                    vocab[((r * r) * v as f64) as usize].clone()
                })
                .collect();
            let span = LineSpan { start: i, end: i };
            DocumentChunk { id: DocumentChunk::id_for(span), span, raw_text: lemmas.join(" "), lemmas }
        })
        .collect();
    // positions no longer follow id order
    for i in (1..chunks.len()).rev() {
        let j = rng.gen_range(0..=i);
        chunks.swap(i, j);
    }
    let dim = rng.gen_range(1..=8);
    let mut vectors = HashMap::new();
    for w in &vocab {
        if rng.gen_bool(0.8) {
            // small integers make exact score ties common
            let vec: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2i32..=2) as f64).collect();
            vectors.insert(w.clone(), vec);
        }
    }
    Corpus { chunks, vectors, dim, vocab }
}

/// Per-chunk statistics the oracle recomputes from the raw chunks.
struct OracleStats {
    tf: Vec<HashMap<String, usize>>,
    len: Vec<usize>,
    vectors: Vec<Vec<f64>>,
}

fn oracle_stats(chunks: &[DocumentChunk], c: &Corpus) -> OracleStats {
    let mut tf = Vec::with_capacity(chunks.len());
    for ch in chunks {
        let mut m: HashMap<String, usize> = HashMap::new();
        for l in &ch.lemmas {
            *m.entry(l.clone()).or_default() += 1;
        }
        tf.push(m);
    }
    OracleStats {
        tf,
        len: chunks.iter().map(|ch| ch.lemmas.len()).collect(),
        vectors: chunks.iter().map(|ch| oracle_mean(&ch.lemmas, &c.vectors, c.dim).0).collect(),
    }
}

fn oracle_bm25(st: &OracleStats, query: &[String], p: Bm25Params) -> Vec<f64> {
    let n = st.len.len() as f64;
    let avg = st.len.iter().sum::<usize>() as f64 / n;
    let mut scores = vec![0.0; st.len.len()];
    for term in query {
        let df = st.tf.iter().filter(|m| m.contains_key(term)).count() as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        for (i, s) in scores.iter_mut().enumerate() {
            let tf = st.tf[i].get(term).copied().unwrap_or(0);
            if tf == 0 {
                continue;
            }
            let tf = tf as f64;
            let norm = if avg > 0.0 { st.len[i] as f64 / avg } else { 0.0 };
            *s += idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * norm));
        }
    }
    scores
}

fn oracle_mean(words: &[String], vectors: &HashMap<String, Vec<f64>>, dim: usize) -> (Vec<f64>, usize) {
    let mut acc = vec![0.0; dim];
    let mut known = 0;
    for w in words {
        if let Some(v) = vectors.get(w) {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
            known += 1;
        }
    }
    if known > 0 {
        for a in &mut acc {
            *a /= known as f64;
        }
    }
    (acc, known)
}

fn oracle_cosine(st: &OracleStats, query: &[String], c: &Corpus) -> Option<Vec<f64>> {
    let (q, known) = oracle_mean(query, &c.vectors, c.dim);
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if known == 0 || qn == 0.0 {
        return None;
    }
    Some(
        st.vectors
            .iter()
            .map(|v| {
                let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if vn == 0.0 {
                    return 0.0;
                }
                let dot: f64 = q.iter().zip(v).map(|(a, b)| a * b).sum();
                (dot / (qn * vn)).clamp(-1.0, 1.0)
            })
            .collect(),
    )
}

fn oracle_top(chunks: &[DocumentChunk], scores: &[f64], k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = chunks.iter().map(|c| c.id.clone()).zip(scores.iter().copied()).collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn same_ranking(got: &[ScoredChunk], want: &[(String, f64)]) -> Result<(), String> {
    ensure!(got.len() == want.len(), "{} hits, oracle has {}", got.len(), want.len());
    for (i, (g, (id, s))) in got.iter().zip(want).enumerate() {
        ensure!(g.chunk_id == *id, "rank {}: {} vs oracle {}", i + 1, g.chunk_id, id);
        ensure!(close(g.score, *s, 1e-9), "rank {}: score {} vs oracle {}", i + 1, g.score, s);
        ensure!(g.rank == i + 1, "rank field {} at position {}", g.rank, i + 1);
    }
    Ok(())
}

pub fn retrieval_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let params = Bm25Params::default();
    let mut queries = 0;
    let mut zero = 0;
    for corpus_no in 0..50 {
        let corpus = random_corpus(&mut rng);
        let index = build_index(corpus.chunks.clone(), params).map_err(|e| e.to_string())?;
        let mut table = EmbeddingTable::new(corpus.dim);
        for (w, v) in &corpus.vectors {
            table.insert(w.clone(), v.clone()).map_err(|e| e.to_string())?;
        }
        let emb = EmbeddingIndex::build(&index, table);
        let chunks = index.chunks().to_vec();
        let stats = oracle_stats(&chunks, &corpus);
        for _ in 0..20 {
            let qlen = rng.gen_range(1..=8);
            let query: Vec<String> = (0..qlen)
                .map(|_| {
                    if rng.gen_bool(0.1) {
                        "oov".to_string()
                    } else {
                        corpus.vocab[rng.gen_range(0..corpus.vocab.len())].clone()
                    }
                })
                .collect();
            let k = rng.gen_range(1..=chunks.len().min(30) + 2);
            let seq = LemmaSequence::new(query.clone());
            let got = top_k_lemmas(&index, &seq, k, Retriever::Bm25).map_err(|e| e.to_string())?;
            let want = oracle_top(&chunks, &oracle_bm25(&stats, &query, params), k);
            same_ranking(&got.hits, &want).map_err(|e| format!("corpus {corpus_no} bm25 k={k}: {e}"))?;

            let got = top_k_lemmas(&index, &seq, k, Retriever::AvgEmbedding(&emb)).map_err(|e| e.to_string())?;
            match oracle_cosine(&stats, &query, &corpus) {
                None => {
                    ensure!(got.zero_query && got.hits.is_empty(), "corpus {corpus_no}: zero query not flagged");
                    zero += 1;
                }
                Some(scores) => {
                    let want = oracle_top(&chunks, &scores, k);
                    same_ranking(&got.hits, &want).map_err(|e| format!("corpus {corpus_no} embedding k={k}: {e}"))?;
                }
            }
            queries += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.2}s");
    Ok(format!("50 corpora, {queries} queries x 2 retrievers ({zero} zero queries), {secs:.2}s"))
}

// ------------------------------------------------------------ 2 bleu

#[derive(serde::Deserialize)]
struct BleuCase {
    candidates: Vec<String>,
    references: Vec<Vec<String>>,
    bleu: f64,
}

pub fn bleu_oracle() -> Check {
    let text = fs::read_to_string(fixture("bleu_oracle.json")).map_err(|e| e.to_string())?;
    let cases: Vec<BleuCase> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure!(cases.len() == 20, "expected 20 cases, found {}", cases.len());
    for (i, c) in cases.iter().enumerate() {
        let got = corpus_bleu(&c.candidates, &c.references, 4).map_err(|e| e.to_string())?.bleu;
        ensure!(close(got, c.bleu, 1e-9), "case {i}: {got} vs oracle {}", c.bleu);
    }
    let s = vec!["rāmaḥ vanaṃ gacchati saha lakṣmaṇena".to_string()];
    let identity = corpus_bleu(&s, std::slice::from_ref(&s), 4).map_err(|e| e.to_string())?.bleu;
    ensure!(identity == 1.0, "identity gave {identity}");
    let empty = corpus_bleu(&[String::new()], std::slice::from_ref(&s), 4).map_err(|e| e.to_string())?.bleu;
    ensure!(empty == 0.0, "empty candidate gave {empty}");
    Ok("20 oracle cases within 1e-9, identity 1.0, empty 0.0".into())
}

// ------------------------------------------------------------ 3 transliteration

pub fn random_iast(rng: &mut ChaCha8Rng) -> String {
    let words = rng.gen_range(1..=4);
    (0..words)
        .map(|_| {
            let units = rng.gen_range(1..=8);
            (0..units).map(|_| IAST_ALPHABET[rng.gen_range(0..IAST_ALPHABET.len())]).collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn transliteration() -> Check {
    let text = fs::read_to_string(fixture("translit_100.tsv")).map_err(|e| e.to_string())?;
    let mut lines = 0;
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        ensure!(cols.len() == 3, "fixture line {} has {} columns", i + 1, cols.len());
        // the canonical form writes the danda as `|` where SLP1 has `.`
        let slp = cols[2].replace('.', "|");
        let (dev, iast, slp) = (cols[0], cols[1], slp.as_str());
        let t = |s: &str, a: Script, b: Script| transliterate(s, a, b).map_err(|e| format!("line {}: {e}", i + 1));
        ensure!(t(dev, Script::Devanagari, Script::Iast)? == iast, "line {}: devanagari→iast", i + 1);
        ensure!(t(iast, Script::Iast, Script::Devanagari)? == dev, "line {}: iast→devanagari", i + 1);
        ensure!(t(dev, Script::Devanagari, Script::CanonicalRoman)? == slp, "line {}: devanagari→slp1", i + 1);
        ensure!(t(slp, Script::CanonicalRoman, Script::Iast)? == iast, "line {}: slp1→iast", i + 1);
        lines += 1;
    }
    ensure!(lines == 100, "fixture has {lines} lines");
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for _ in 0..1000 {
        let s = random_iast(&mut rng);
        let dev = transliterate(&s, Script::Iast, Script::Devanagari).map_err(|e| e.to_string())?;
        let back = transliterate(&dev, Script::Devanagari, Script::Iast).map_err(|e| e.to_string())?;
        ensure!(back == s, "round trip of {s:?} via {dev:?} gave {back:?}");
        let slp = transliterate(&s, Script::Iast, Script::CanonicalRoman).map_err(|e| e.to_string())?;
        let back = transliterate(&slp, Script::CanonicalRoman, Script::Iast).map_err(|e| e.to_string())?;
        ensure!(back == s, "round trip of {s:?} via {slp:?} gave {back:?}");
    }
    Ok("100 fixture lines byte-exact, 1000 random strings round-trip".into())
}

// ------------------------------------------------------------ 4 lemma f1

/// (predicted, gold, precision, recall, f1), tallied by hand.
pub const LEMMA_CASES: &[(&str, &str, f64, f64, f64)] = &[
    ("a b c", "a b c", 1.0, 1.0, 1.0),
    ("a b", "a b c", 1.0, 2.0 / 3.0, 0.8),
    ("a a b", "a b", 2.0 / 3.0, 1.0, 0.8),
    ("a a", "a a a", 1.0, 2.0 / 3.0, 0.8),
    ("x y", "a b", 0.0, 0.0, 0.0),
    ("", "", 1.0, 1.0, 1.0),
    ("", "a", 0.0, 0.0, 0.0),
    ("a b c d", "a", 0.25, 1.0, 0.4),
    ("b a", "a b", 1.0, 1.0, 1.0),
    ("a a b b c", "a b b b d", 0.6, 0.6, 0.6),
];

pub fn seq(s: &str) -> LemmaSequence {
    s.split_whitespace().collect()
}

pub fn lemma_scoring() -> Check {
    for (p, g, pr, rc, f) in LEMMA_CASES {
        let s = lemma_f1(&seq(p), &seq(g));
        ensure!(
            close(s.precision, *pr, 1e-12) && close(s.recall, *rc, 1e-12) && close(s.f1, *f, 1e-12),
            "{p:?} vs {g:?}: got {s:?}"
        );
    }
    let lex = LexiconLemmatizer::load(fixture("lexicon_iast.tsv"), Script::Iast).map_err(|e| e.to_string())?;
    let pipeline = LemmaPipeline::new(Arc::new(lex), Script::Iast);
    let predicted = pipeline.lemmatize_text("haridrāmalakaṃ gṛhṇāti").map_err(|e| e.to_string())?;
    let gold = LemmaPipeline::identity(Script::Iast).lemmatize_text("haridrā āmalaka gṛh").map_err(|e| e.to_string())?;
    let s = lemma_f1(&predicted, &gold);
    ensure!(s.f1 == 1.0, "compound pair: {:?} vs {:?} gave {}", predicted, gold, s.f1);
    let dev = pipeline.lemmatize_mixed("हरिद्रामलकं गृह्णाति").map_err(|e| e.to_string())?;
    ensure!(dev == predicted, "devanagari input lemmatized to {dev:?}");
    Ok(format!("{} multiset fixtures exact, compound pair F1=1.0", LEMMA_CASES.len()))
}

// ------------------------------------------------------------ 5 tog

pub const TOG_REPLIES: [&str; 5] = [
    "('rāma', 0.9)",
    "('FATHER_OF', 0.9), ('BROTHER_OF', 0.6), ('MOTHER_OF', 0.3), ('RULES', 0.1)",
    "('daśaratha', 0.9), ('kausalyā', 0.4), ('bharata', 0.2), ('lakṣmaṇa', 0.1)",
    "0",
    "daśaratha",
];

pub fn tog_question() -> clnlu::harness::QaRecord {
    serde_json::from_value(serde_json::json!({
        "id": "tog-1",
        "topic": "Ramayana",
        "question": "rāmasya pitā kaḥ?",
        "acceptable_answers": ["daśaratha"],
    }))
    .expect("valid record")
}

pub fn run_tog(cfg: &TogConfig, replies: &[&str]) -> Result<(TogTrace, usize), String> {
    let kg = KnowledgeGraph::load(fixture("kg12.tsv")).map_err(|e| e.to_string())?;
    let mock = Arc::new(MockLlm::queue(replies.iter().copied()));
    let llm = LlmClient::live(mock.clone(), None);
    let prompts = PromptRegistry::builtin();
    let pipeline = LemmaPipeline::identity(Script::Iast);
    let env = TogEnv { kg: &kg, llm: &llm, prompts: &prompts, pipeline: &pipeline, model: "mock", script: Script::Iast };
    let out = tog_answer(&tog_question(), &env, cfg).map_err(|e| e.to_string())?;
    Ok((out.trace, mock.calls()))
}

fn canon(s: &str) -> String {
    transliterate(s, Script::Iast, Script::CanonicalRoman).expect("iast")
}

pub fn tog_conformance() -> Check {
    let cfg = TogConfig { sample_limit: 15, depth_limit: 1, width_limit: 3, ..TogConfig::default() };
    let kg = KnowledgeGraph::load(fixture("kg12.tsv")).map_err(|e| e.to_string())?;
    ensure!(kg.node_count() == 12, "fixture has {} nodes", kg.node_count());
    let (trace, calls) = run_tog(&cfg, &TOG_REPLIES)?;

    ensure!(calls == 5 && trace.llm_calls == 5, "{calls} backend calls, trace counted {}", trace.llm_calls);
    let ids: Vec<&str> = trace.steps.iter().map(|s| s.prompt_id.as_str()).collect();
    let want_ids = [
        tog_ids::EXTRACT_ENTITIES,
        tog_ids::RELATION_PRUNE,
        tog_ids::ENTITY_EXTRACT_PRUNE,
        tog_ids::REASON,
        tog_ids::ANSWER,
    ];
    ensure!(ids == want_ids, "step order {ids:?}");
    let lemmas = |xs: &[&str]| xs.iter().map(|x| canon(x)).collect::<Vec<_>>();
    ensure!(trace.start_entities == lemmas(&["rāma"]), "start entities {:?}", trace.start_entities);
    ensure!(trace.steps[1].kept == ["FATHER_OF", "BROTHER_OF", "MOTHER_OF"], "relations kept {:?}", trace.steps[1].kept);
    ensure!(
        trace.steps[2].kept == lemmas(&["daśaratha", "kausalyā", "bharata"]),
        "entities kept {:?}",
        trace.steps[2].kept
    );
    let paths: Vec<(String, String, String)> =
        trace.paths.iter().map(|p| (p.src_lemma.clone(), p.relation.clone(), p.dst_lemma.clone())).collect();
    let want_paths = vec![
        (canon("daśaratha"), "FATHER_OF".to_string(), canon("rāma")),
        (canon("kausalyā"), "MOTHER_OF".to_string(), canon("rāma")),
        (canon("bharata"), "BROTHER_OF".to_string(), canon("rāma")),
    ];
    ensure!(paths == want_paths, "paths {paths:?}");
    ensure!(trace.steps.iter().all(|s| s.kept.len() <= 3), "a pruned set exceeds W=3");
    ensure!(trace.steps.iter().all(|s| !s.fallback && !s.parse_failed), "unexpected fallback or parse failure");
    let rama = kg.node_by_id("rama").ok_or("no rama node")?;
    let far: Vec<usize> = trace.paths.iter().map(|p| p.far_end(rama)).collect();
    let uniq: BTreeSet<usize> = far.iter().copied().collect();
    ensure!(uniq.len() == far.len() && !uniq.contains(&rama), "a node was revisited");
    ensure!(trace.stop == TogStop::DepthExhausted && trace.depth_reached == 1, "stop {:?}", trace.stop);
    ensure!(trace.answer == "daśaratha", "answer {}", trace.answer);

    let (again, _) = run_tog(&cfg, &TOG_REPLIES)?;
    ensure!(again.to_json() == trace.to_json(), "second run differs");
    let narrow = TogConfig { sample_limit: 2, ..cfg };
    let (a, _) = run_tog(&narrow, &TOG_REPLIES)?;
    let (b, _) = run_tog(&narrow, &TOG_REPLIES)?;
    ensure!(a.to_json() == b.to_json(), "sampled runs differ");
    Ok("5 calls, kept sets 1/3/3, 3 paths, no revisits, identical reruns".into())
}

// ------------------------------------------------------------ 6 rag

const CONSONANTS: &[&str] = &["k", "g", "c", "j", "ṭ", "t", "d", "n", "p", "b", "m", "y", "r", "l", "v", "s"];
const VOWELS: &[&str] = &["a", "ā", "i", "u", "e", "o"];

/// Distinct three-syllable IAST word for each `n < 96³`.
pub fn word(n: usize) -> String {
    let syl = |k: usize| format!("{}{}", CONSONANTS[k % 16], VOWELS[(k / 16) % 6]);
    format!("{}{}{}", syl(n % 96), syl((n / 96) % 96), syl(n / 9216))
}

pub fn dev(s: &str) -> String {
    transliterate(s, Script::Iast, Script::Devanagari).expect("iast")
}

pub struct RagFixture {
    pub dir: tempfile::TempDir,
    pub questions: Vec<String>,
    pub answers: Vec<String>,
}

/// Corpus with one chunk per item; answer `i` occurs only in chunk `i`,
/// next to a keyword that only question `i` uses.
pub fn rag_fixture(n: usize) -> RagFixture {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let filler: Vec<String> = (0..20).map(|i| word(50_000 + i)).collect();
    let mut corpus = String::new();
    let mut qa = String::new();
    let mut questions = Vec::new();
    let mut answers = Vec::new();
    for i in 0..n {
        let (key, ans) = (word(1 + i * 7), word(20_000 + i * 13));
        let f = |rng: &mut ChaCha8Rng| filler[rng.gen_range(0..filler.len())].clone();
        let line = format!("{} {} {} {} {}।", f(&mut rng), key, f(&mut rng), ans, f(&mut rng));
        corpus.push_str(&dev(&line));
        corpus.push('\n');
        let q = format!("{} {} kaḥ", key, f(&mut rng));
        let annotated = match i % 3 {
            0 => serde_json::json!(true),
            1 => serde_json::json!(false),
            _ => serde_json::Value::Null,
        };
        let mut rec = serde_json::json!({
            "id": format!("q{i:03}"),
            "topic": if i % 2 == 0 { "Ramayana" } else { "Ayurveda" },
            "question": q,
            "acceptable_answers": [ans],
            "requires_reasoning": i % 10 == 0,
        });
        if !annotated.is_null() {
            rec["answer_in_retrieved_context"] = annotated;
        }
        qa.push_str(&rec.to_string());
        qa.push('\n');
        questions.push(q);
        answers.push(ans);
    }
    fs::write(dir.path().join("corpus.txt"), corpus).unwrap();
    fs::write(dir.path().join("qa.jsonl"), qa).unwrap();
    RagFixture { dir, questions, answers }
}

/// Replies with the item's answer when the prompt contains both the question
/// and the answer; otherwise with nothing.
pub fn answer_echo(questions: &[String], answers: &[String]) -> impl Fn(&str) -> String {
    let pairs: Vec<(String, String)> = questions.iter().map(|q| dev(q)).zip(answers.iter().map(|a| dev(a))).collect();
    move |text: &str| {
        pairs
            .iter()
            .find(|(q, a)| text.contains(q.as_str()) && text.contains(a.as_str()))
            .map(|(_, a)| a.clone())
            .unwrap_or_default()
    }
}

pub fn config(dir: &Path, extra: &[(&str, &str)]) -> ExperimentConfig {
    let mut pairs: BTreeMap<String, String> = [
        ("task", "qa"),
        ("model", "echo"),
        ("language", "san"),
        ("script", "devanagari"),
        ("corpus.chunk_lines", "1"),
        ("n_chunks", "10"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    pairs.insert("dataset".into(), dir.join("qa.jsonl").display().to_string());
    pairs.insert("corpus".into(), dir.join("corpus.txt").display().to_string());
    for (k, v) in extra {
        pairs.insert(k.to_string(), v.to_string());
    }
    ExperimentConfig::from_pairs(&pairs).expect("valid config")
}

fn echo_client(fx: &RagFixture) -> LlmClient {
    let echo = answer_echo(&fx.questions, &fx.answers);
    LlmClient::live(MockLlm::func(move |req: &ChatRequest| Some(echo(&req.full_text()))), None)
}

fn em(report: &MetricReport, key: &str) -> f64 {
    report.aggregates.get(key).copied().unwrap_or(f64::NAN)
}

pub fn rag_end_to_end() -> Check {
    let fx = rag_fixture(100);
    let rag = config(fx.dir.path(), &[("qa_mode", "rag"), ("k", "4")]);
    let out = run_experiment(&rag, &echo_client(&fx)).map_err(|e| e.to_string())?;
    let r = &out.report;
    ensure!(r.rows.len() == 100, "{} rows", r.rows.len());
    ensure!(em(r, "em_inflected") == 1.0, "rag EM {}", em(r, "em_inflected"));
    ensure!(em(r, "em_lemmatized") == 1.0, "rag lemmatized EM {}", em(r, "em_lemmatized"));
    ensure!(out.raw.iter().all(|o| o.retrieved.len() == 4), "a query did not get 4 chunks");
    let split = r.split.as_ref().ok_or("no subset split")?;
    let (yes, no) = (&split.answer_in_context, &split.answer_not_in_context);
    ensure!(yes.n == 34 && no.n == 33 && split.unannotated == 33, "split {} / {} / {}", yes.n, no.n, split.unannotated);
    ensure!(yes.n + no.n + split.unannotated == 100, "split does not partition");
    ensure!(yes.inflected == 1.0 && no.inflected == 1.0, "subset EM {} / {}", yes.inflected, no.inflected);
    ensure!(r.manual_review.len() == 10, "{} manual review rows", r.manual_review.len());

    let closed = config(fx.dir.path(), &[("qa_mode", "closed")]);
    let out = run_experiment(&closed, &echo_client(&fx)).map_err(|e| e.to_string())?;
    let r = &out.report;
    ensure!(em(r, "em_inflected") == 0.0, "closed EM {}", em(r, "em_inflected"));
    ensure!(em(r, "em_lemmatized") == 0.0, "closed lemmatized EM {}", em(r, "em_lemmatized"));
    let split = r.split.as_ref().ok_or("no subset split")?;
    ensure!(split.answer_in_context.n + split.answer_not_in_context.n + split.unannotated == 100, "closed split");
    Ok("rag k=4 EM 1.0, closed EM 0.0, split 34/33/33".into())
}

// ------------------------------------------------------------ 7 ner

pub struct NerCase {
    pub tokens: Vec<Vec<&'static str>>,
    pub tags: Vec<Vec<&'static str>>,
    pub preds: Vec<Vec<(&'static str, Vec<&'static str>)>>,
    /// tag → (precision, recall, f1)
    pub per_tag: Vec<(&'static str, f64, f64, f64)>,
    pub macro_f1: f64,
    /// Rows of the row-normalized confusion matrix over PER, LOC, GRP, O.
    pub confusion: [[f64; 4]; 4],
    pub spurious: usize,
}

pub fn ner_cases() -> Vec<NerCase> {
    let t = 2.0 / 3.0;
    vec![
        NerCase {
            tokens: vec![vec!["Caesar", "Romam", "venit"]],
            tags: vec![vec!["B-PER", "B-LOC", "O"]],
            preds: vec![vec![("B-PER", vec!["Caesar"]), ("B-LOC", vec!["Romam"])]],
            per_tag: vec![("B-PER", 1.0, 1.0, 1.0), ("B-LOC", 1.0, 1.0, 1.0)],
            macro_f1: 1.0,
            confusion: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0; 4], [0.0, 0.0, 0.0, 1.0]],
            spurious: 0,
        },
        NerCase {
            tokens: vec![vec!["Marcus", "Tullius", "Cicero", "Athenas", "ivit"]],
            tags: vec![vec!["B-PER", "I-PER", "I-PER", "B-LOC", "O"]],
            preds: vec![vec![("B-PER", vec!["Marcus"]), ("I-PER", vec!["Tullius"]), ("B-LOC", vec!["Cicero", "Athenas"])]],
            per_tag: vec![("B-PER", 1.0, 1.0, 1.0), ("I-PER", 1.0, 0.5, t), ("B-LOC", 0.5, 1.0, t)],
            macro_f1: 7.0 / 9.0,
            confusion: [[t, 1.0 / 3.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0; 4], [0.0, 0.0, 0.0, 1.0]],
            spurious: 0,
        },
        NerCase {
            tokens: vec![vec!["Galli", "Romam", "oppugnant"]],
            tags: vec![vec!["B-GRP", "B-LOC", "O"]],
            preds: vec![vec![("B-GRP", vec!["Galli"]), ("B-PER", vec!["Brutus"])]],
            per_tag: vec![("B-GRP", 1.0, 1.0, 1.0), ("B-PER", 0.0, 0.0, 0.0), ("B-LOC", 0.0, 0.0, 0.0)],
            macro_f1: 1.0 / 3.0,
            confusion: [[0.0; 4], [0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
            spurious: 1,
        },
        NerCase {
            tokens: vec![vec!["Roma", "et", "Roma"]],
            tags: vec![vec!["B-LOC", "O", "B-LOC"]],
            preds: vec![vec![("B-LOC", vec!["Roma"])]],
            per_tag: vec![("B-LOC", 1.0, 0.5, t)],
            macro_f1: t,
            confusion: [[0.0; 4], [0.0, 0.5, 0.0, 0.5], [0.0; 4], [0.0, 0.0, 0.0, 1.0]],
            spurious: 0,
        },
        NerCase {
            tokens: vec![vec!["Brutus", "Caesarem", "necat"], vec!["in", "Gallia"]],
            tags: vec![vec!["B-PER", "B-PER", "O"], vec!["O", "B-LOC"]],
            preds: vec![vec![("B-PER", vec!["Brutus"]), ("B-LOC", vec!["necat"])], vec![("B-LOC", vec!["Gallia"])]],
            per_tag: vec![("B-PER", 1.0, 0.5, t), ("B-LOC", 0.5, 1.0, t)],
            macro_f1: t,
            confusion: [[0.5, 0.0, 0.0, 0.5], [0.0, 1.0, 0.0, 0.0], [0.0; 4], [0.0, 0.5, 0.0, 0.5]],
            spurious: 0,
        },
    ]
}

fn strings(v: &[Vec<&str>]) -> Vec<Vec<String>> {
    v.iter().map(|s| s.iter().map(|x| x.to_string()).collect()).collect()
}

pub fn score_case(c: &NerCase) -> Result<NerScores, String> {
    let preds: Vec<NerPrediction> = c
        .preds
        .iter()
        .map(|p| NerPrediction::new(p.iter().map(|(t, ws)| (t.to_string(), ws.iter().map(|w| w.to_string()).collect())).collect()))
        .collect();
    let order: Vec<String> = ["PER", "LOC", "GRP"].map(String::from).to_vec();
    ner_macro_f1(&strings(&c.tokens), &strings(&c.tags), &preds, &order).map_err(|e| e.to_string())
}

const NER_LAT: &str = "Caesar\tB-PER\nRomam\tB-LOC\nvenit\tO\n\n\
Marcus\tB-PER\nTullius\tI-PER\nCicero\tI-PER\nAthenas\tB-LOC\nivit\tO\n\n\
Galli\tB-GRP\nRomam\tB-LOC\noppugnant\tO\n\n\
Brutus\tB-PER\nCaesarem\tB-PER\nnecat\tO\n\n\
in\tO\nGallia\tB-LOC\nmanet\tO\n";

/// Mock NER run over [`NER_LAT`]; `reply` gets the sentence tokens and tags.
pub fn ner_run(reply: impl Fn(&[String], &[String]) -> String + Send + Sync + 'static) -> Result<MetricReport, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ner.tsv");
    fs::write(&path, NER_LAT).map_err(|e| e.to_string())?;
    let sentences = clnlu::harness::load_ner(&path, "lat", None).map_err(|e| e.to_string())?;
    let client = LlmClient::live(
        MockLlm::func(move |req: &ChatRequest| {
            let text = req.full_text();
            let s = sentences.iter().find(|s| text.contains(&s.tokens.join(" ")))?;
            Some(reply(&s.tokens, &s.gold_tags))
        }),
        None,
    );
    let pairs: BTreeMap<String, String> = [
        ("task", "ner".to_string()),
        ("dataset", path.display().to_string()),
        ("model", "echo".to_string()),
        ("language", "lat".to_string()),
        ("n_chunks", "5".to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let cfg = ExperimentConfig::from_pairs(&pairs).map_err(|e| e.to_string())?;
    Ok(run_experiment(&cfg, &client).map_err(|e| e.to_string())?.report)
}

pub fn gold_dict(tokens: &[String], tags: &[String]) -> String {
    let pred = NerPrediction::from_gold(tokens, tags);
    let body: Vec<String> = pred
        .entries
        .iter()
        .map(|(t, ws)| format!("'{t}': [{}]", ws.iter().map(|w| format!("'{w}'")).collect::<Vec<_>>().join(", ")))
        .collect();
    format!("{{{}}}", body.join(", "))
}

pub fn ner_scoring() -> Check {
    for (i, c) in ner_cases().iter().enumerate() {
        let s = score_case(c)?;
        ensure!(s.per_tag.len() == c.per_tag.len(), "case {i}: tags {:?}", s.per_tag.keys().collect::<Vec<_>>());
        for (tag, p, r, f) in &c.per_tag {
            let got = s.per_tag.get(*tag).ok_or(format!("case {i}: no {tag}"))?;
            ensure!(
                close(got.precision, *p, 1e-12) && close(got.recall, *r, 1e-12) && close(got.f1, *f, 1e-12),
                "case {i} {tag}: got {got:?}"
            );
        }
        ensure!(close(s.macro_f1, c.macro_f1, 1e-12), "case {i}: macro {}", s.macro_f1);
        ensure!(s.confusion.labels == ["PER", "LOC", "GRP", "O"], "case {i}: labels {:?}", s.confusion.labels);
        for (row, want) in s.confusion.row_normalized.iter().zip(&c.confusion) {
            ensure!(row.iter().zip(want).all(|(a, b)| close(*a, *b, 1e-12)), "case {i}: row {row:?} vs {want:?}");
        }
        for (row, counts) in s.confusion.row_normalized.iter().zip(&s.confusion.counts) {
            if counts.iter().sum::<usize>() > 0 {
                ensure!(close(row.iter().sum::<f64>(), 1.0, 1e-9), "case {i}: row sums to {}", row.iter().sum::<f64>());
            }
        }
        ensure!(s.spurious == c.spurious, "case {i}: spurious {}", s.spurious);
    }
    let echo = ner_run(gold_dict)?;
    let m = echo.aggregates["macro_f1"];
    ensure!(m == 1.0, "gold echo macro F1 {m}");
    let empty = ner_run(|_, _| "{}".to_string())?;
    let m = empty.aggregates["macro_f1"];
    ensure!(m == 0.0, "empty predictions macro F1 {m}");
    Ok("5 hand-tallied fixtures exact, gold echo 1.0, empty 0.0".into())
}

// ------------------------------------------------------------ 8 determinism

/// Minimal chat-completions endpoint on localhost; counts requests.
pub struct FakeApi {
    pub base_url: String,
    pub hits: Arc<AtomicUsize>,
}

pub fn fake_api(reply: impl Fn(&str) -> String + Send + Sync + 'static) -> FakeApi {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let base_url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let reply = Arc::new(reply);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let counter = counter.clone();
            let reply = reply.clone();
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = l.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            len = v.trim().parse().unwrap_or(0);
                        }
                    }
                }
                let mut body = vec![0; len];
                if reader.read_exact(&mut body).is_err() {
                    return;
                }
                counter.fetch_add(1, Ordering::SeqCst);
                let req: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
                let text: String = req["messages"]
                    .as_array()
                    .map(|ms| ms.iter().filter_map(|m| m["content"].as_str()).collect::<Vec<_>>().join("\n"))
                    .unwrap_or_default();
                let out = serde_json::json!({
                    "id": format!("resp-{}", counter.load(Ordering::SeqCst)),
                    "model": req["model"],
                    "choices": [{"message": {"role": "assistant", "content": reply(&text)}, "finish_reason": "stop"}],
                    "usage": {"prompt_tokens": 1, "completion_tokens": 1, "total_tokens": 2},
                })
                .to_string();
                let mut s = stream;
                let _ = write!(
                    s,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    out.len(),
                    out
                );
            });
        }
    });
    FakeApi { base_url, hits }
}

pub fn dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).expect("report dir") {
        let e = e.expect("entry");
        out.insert(e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).expect("read"));
    }
    out
}

pub fn determinism() -> Check {
    let fx = rag_fixture(103);
    // every fourth answer is withheld so chunk means differ
    let echo = answer_echo(&fx.questions, &fx.answers);
    let wrong: BTreeSet<String> = fx.answers.iter().step_by(4).map(|a| dev(a)).collect();
    let api = fake_api(move |text| {
        let a = echo(text);
        if wrong.contains(&a) {
            String::new()
        } else {
            a
        }
    });
    let cache = fx.dir.path().join("cache");
    let cache_s = cache.display().to_string();
    let cfg = config(
        fx.dir.path(),
        &[("qa_mode", "rag"), ("k", "4"), ("api.base_url", &api.base_url), ("cache_dir", &cache_s), ("concurrency", "4")],
    );
    let mut outs = Vec::new();
    let mut calls = Vec::new();
    for i in 0..2 {
        let client = clnlu::harness::build_client(&cfg).map_err(|e| e.to_string())?;
        let before = api.hits.load(Ordering::SeqCst);
        let run = run_experiment(&cfg, &client).map_err(|e| e.to_string())?;
        calls.push(api.hits.load(Ordering::SeqCst) - before);
        let out = fx.dir.path().join(format!("out{i}"));
        write_report(&run, &out).map_err(|e| e.to_string())?;
        outs.push((dir_files(&out), run.report));
    }
    ensure!(calls[0] == 103, "cold run made {} calls", calls[0]);
    ensure!(calls[1] == 0, "warm run made {} network calls", calls[1]);
    ensure!(outs[0].0 == outs[1].0, "reports differ between cold and warm runs");

    let replay = config(
        fx.dir.path(),
        &[("qa_mode", "rag"), ("k", "4"), ("cache_dir", &cache_s), ("replay_only", "true"), ("concurrency", "4")],
    );
    let before = api.hits.load(Ordering::SeqCst);
    let client = clnlu::harness::build_client(&replay).map_err(|e| e.to_string())?;
    let run = run_experiment(&replay, &client).map_err(|e| e.to_string())?;
    ensure!(api.hits.load(Ordering::SeqCst) == before, "replay-only run reached the network");
    ensure!(run.report.rows == outs[0].1.rows, "replay-only rows differ");

    let report = &outs[0].1;
    ensure!(report.task == TaskKind::Qa, "task");
    let overall = report.aggregates["em_inflected"];
    ensure!(overall == 77.0 / 103.0, "EM {overall}");
    let c = &report.chunked["em_inflected"];
    ensure!(c.n_chunks == 10 && c.chunk_sizes.iter().sum::<usize>() == 103, "chunks {:?}", c.chunk_sizes);
    let weighted: f64 =
        c.per_chunk_means.iter().zip(&c.chunk_sizes).map(|(m, n)| m * *n as f64).sum::<f64>() / 103.0;
    ensure!(close(weighted, overall, 1e-12), "weighted chunk mean {weighted} vs overall {overall}");
    ensure!(close(c.mean, overall, 1e-12), "summary mean {} vs overall {overall}", c.mean);
    Ok(format!("cold {} calls, warm 0, {} report files byte-identical, chunk mean within 1e-12", calls[0], outs[0].0.len()))
}

pub type Criterion = (&'static str, fn() -> Check);

pub const CRITERIA: [Criterion; 8] = [
    ("retrieval oracle equivalence", retrieval_oracle),
    ("BLEU oracle", bleu_oracle),
    ("transliteration", transliteration),
    ("lemma F1", lemma_scoring),
    ("ToG conformance", tog_conformance),
    ("RAG end-to-end", rag_end_to_end),
    ("NER scoring", ner_scoring),
    ("determinism and caching", determinism),
];
