mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clnlu::lemma::{
    lemma_f1, lemmatize_corpus, ExternalConfig, ExternalLemmatizer, LemmaCache, LemmaPipeline, LemmaSequence,
    Lemmatizer, LemmatizerKind, LexiconLemmatizer,
};
use clnlu::textproc::{chunk_corpus, Script};
use clnlu::LemmaError;

#[test]
fn hand_fixtures_and_compound_split() {
    common::lemma_scoring().unwrap();
}

#[test]
fn lexicon_rejects_malformed_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lex.tsv");
    std::fs::write(&path, "# comment\nrāmaḥ\trāma\nno tab here\n").unwrap();
    match LexiconLemmatizer::load(&path, Script::Iast) {
        Err(LemmaError::LexiconFormat { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a format error, got {other:?}"),
    }
    assert!(matches!(
        LexiconLemmatizer::load(dir.path().join("missing.tsv"), Script::Iast),
        Err(LemmaError::LexiconMissing(_))
    ));
}

#[test]
fn unknown_tokens_pass_through() {
    let lex = LexiconLemmatizer::load(common::fixture("lexicon_iast.tsv"), Script::Iast).unwrap();
    let p = LemmaPipeline::new(Arc::new(lex), Script::Iast);
    assert_eq!(p.lemmatize_text("haridrā vanam").unwrap(), common::seq("haridrA vanam"));
}

fn script(dir: &std::path::Path, name: &str, body: &str) -> Vec<String> {
    let path = dir.join(name);
    std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    vec!["sh".into(), path.display().to_string()]
}

// drops a final visarga from every word
const STRIP_H: &str = r#"set -f
while IFS= read -r line; do
  out=""
  for w in $line; do out="$out ${w%H}"; done
  printf '%s\n' "${out# }"
done"#;

#[test]
fn external_process_one_line_per_sentence() {
    let dir = tempfile::tempdir().unwrap();
    let ext = ExternalLemmatizer::new(ExternalConfig::new(script(dir.path(), "lem.sh", STRIP_H))).unwrap();
    assert!(matches!(ext.kind(), LemmatizerKind::External { .. }));
    let p = LemmaPipeline::new(Arc::new(ext), Script::Devanagari);
    assert_eq!(p.lemmatize_text("रामः वनं गच्छति।").unwrap(), common::seq("rAma vanaM gacCati"));
    assert_eq!(p.lemmatize_text("सीता").unwrap(), common::seq("sItA"));
    assert_eq!(p.lemmatize_text("").unwrap(), LemmaSequence::default());
}

#[test]
fn external_pool_serves_concurrent_callers() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExternalConfig::new(script(dir.path(), "lem.sh", STRIP_H));
    cfg.pool_size = 3;
    let ext = Arc::new(ExternalLemmatizer::new(cfg).unwrap());
    std::thread::scope(|s| {
        for t in 0..6 {
            let ext = Arc::clone(&ext);
            s.spawn(move || {
                for i in 0..20 {
                    let got = ext.lemmatize(&format!("w{t}x{i}H aH")).unwrap();
                    assert_eq!(got, common::seq(&format!("w{t}x{i} a")));
                }
            });
        }
    });
}

#[test]
fn external_failures_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let dead = ExternalLemmatizer::new(ExternalConfig::new(script(dir.path(), "dead.sh", "exit 3"))).unwrap();
    assert!(matches!(dead.lemmatize("a"), Err(LemmaError::ExternalLemmatizerUnavailable(_))));

    let mut cfg = ExternalConfig::new(script(dir.path(), "slow.sh", "exec sleep 30"));
    cfg.timeout = Duration::from_millis(200);
    let slow = ExternalLemmatizer::new(cfg).unwrap();
    assert!(matches!(slow.lemmatize("a"), Err(LemmaError::ExternalLemmatizerUnavailable(_))));

    let missing = ExternalLemmatizer::new(ExternalConfig::new(vec!["/nonexistent/lemmatizer".into()])).unwrap();
    assert!(matches!(missing.lemmatize("a"), Err(LemmaError::ExternalLemmatizerUnavailable(_))));
    assert!(ExternalLemmatizer::new(ExternalConfig::new(vec![])).is_err());
}

struct Counting(AtomicUsize);

impl Lemmatizer for Counting {
    fn kind(&self) -> LemmatizerKind {
        LemmatizerKind::Identity
    }

    fn lemmatize(&self, sentence: &str) -> Result<LemmaSequence, LemmaError> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Ok(sentence.split_whitespace().collect())
    }
}

#[test]
fn corpus_lemmas_are_cached_by_content() {
    let dir = tempfile::tempdir().unwrap();
    let cache = LemmaCache::new(dir.path());
    let counter = Arc::new(Counting(AtomicUsize::new(0)));
    let p = LemmaPipeline::new(counter.clone(), Script::Iast);
    let lines = ["rāmaḥ vanam", "sītā", "lakṣmaṇaḥ"];
    let first = lemmatize_corpus(chunk_corpus(&lines, 1, 0).unwrap(), &p, Some(&cache)).unwrap();
    assert_eq!(counter.0.load(Ordering::SeqCst), 3);
    let second = lemmatize_corpus(chunk_corpus(&lines, 1, 0).unwrap(), &p, Some(&cache)).unwrap();
    assert_eq!(counter.0.load(Ordering::SeqCst), 3);
    assert_eq!(first, second);
    assert_eq!(first[0].lemmas, ["rAmaH", "vanam"]);

    let changed = ["rāmaḥ vanam", "sītā", "bharataḥ"];
    lemmatize_corpus(chunk_corpus(&changed, 1, 0).unwrap(), &p, Some(&cache)).unwrap();
    assert_eq!(counter.0.load(Ordering::SeqCst), 6);
}

#[test]
fn f1_counts_repeats_once_each() {
    let s = lemma_f1(&common::seq("a a b"), &common::seq("a b b"));
    assert!((s.precision - 2.0 / 3.0).abs() < 1e-12 && (s.recall - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(lemma_f1(&common::seq(""), &common::seq("")).f1, 1.0);
    assert_eq!(lemma_f1(&common::seq("a"), &common::seq("")).f1, 0.0);
}
