//! Script handling, normalization, tokenization and corpus chunking.
//!
//! Sanskrit text moves between three scripts. Devanagari and IAST are the
//! scripts people read and write; the canonical romanization is SLP1, which
//! spells every phoneme with exactly one ASCII character and is what the
//! lemmatizer, the retrieval index and exact-match scoring compare on.
//!
//! Every conversion decodes the source into a sequence of [`Unit`]s and then
//! encodes that sequence into the target. Characters outside the source
//! alphabet become [`Unit::Other`] and are copied through untouched.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::TextError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Script {
    Devanagari,
    #[serde(rename = "iast")]
    Iast,
    /// SLP1: one ASCII character per phoneme.
    #[serde(rename = "canonical")]
    CanonicalRoman,
}

impl Script {
    pub fn name(self) -> &'static str {
        match self {
            Script::Devanagari => "devanagari",
            Script::Iast => "iast",
            Script::CanonicalRoman => "canonical",
        }
    }
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Script {
    type Err = TextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "devanagari" | "deva" => Ok(Script::Devanagari),
            "iast" => Ok(Script::Iast),
            "canonical" | "slp1" | "canonical-roman" => Ok(Script::CanonicalRoman),
            other => Err(TextError::UnknownScript(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Unit {
    Vowel(u8),
    Consonant(u8),
    Sign(u8),
    Other(char),
}

struct VowelRow {
    slp: char,
    iast: &'static str,
    letter: char,
    matra: Option<char>,
}

struct LetterRow {
    slp: char,
    iast: &'static str,
    deva: char,
}

const VOWELS: [VowelRow; 14] = [
    VowelRow { slp: 'a', iast: "a", letter: 'अ', matra: None },
    VowelRow { slp: 'A', iast: "ā", letter: 'आ', matra: Some('\u{093E}') },
    VowelRow { slp: 'i', iast: "i", letter: 'इ', matra: Some('\u{093F}') },
    VowelRow { slp: 'I', iast: "ī", letter: 'ई', matra: Some('\u{0940}') },
    VowelRow { slp: 'u', iast: "u", letter: 'उ', matra: Some('\u{0941}') },
    VowelRow { slp: 'U', iast: "ū", letter: 'ऊ', matra: Some('\u{0942}') },
    VowelRow { slp: 'f', iast: "ṛ", letter: 'ऋ', matra: Some('\u{0943}') },
    VowelRow { slp: 'F', iast: "ṝ", letter: 'ॠ', matra: Some('\u{0944}') },
    VowelRow { slp: 'x', iast: "ḷ", letter: 'ऌ', matra: Some('\u{0962}') },
    VowelRow { slp: 'X', iast: "ḹ", letter: 'ॡ', matra: Some('\u{0963}') },
    VowelRow { slp: 'e', iast: "e", letter: 'ए', matra: Some('\u{0947}') },
    VowelRow { slp: 'E', iast: "ai", letter: 'ऐ', matra: Some('\u{0948}') },
    VowelRow { slp: 'o', iast: "o", letter: 'ओ', matra: Some('\u{094B}') },
    VowelRow { slp: 'O', iast: "au", letter: 'औ', matra: Some('\u{094C}') },
];

const CONSONANTS: [LetterRow; 33] = [
    LetterRow { slp: 'k', iast: "k", deva: 'क' },
    LetterRow { slp: 'K', iast: "kh", deva: 'ख' },
    LetterRow { slp: 'g', iast: "g", deva: 'ग' },
    LetterRow { slp: 'G', iast: "gh", deva: 'घ' },
    LetterRow { slp: 'N', iast: "ṅ", deva: 'ङ' },
    LetterRow { slp: 'c', iast: "c", deva: 'च' },
    LetterRow { slp: 'C', iast: "ch", deva: 'छ' },
    LetterRow { slp: 'j', iast: "j", deva: 'ज' },
    LetterRow { slp: 'J', iast: "jh", deva: 'झ' },
    LetterRow { slp: 'Y', iast: "ñ", deva: 'ञ' },
    LetterRow { slp: 'w', iast: "ṭ", deva: 'ट' },
    LetterRow { slp: 'W', iast: "ṭh", deva: 'ठ' },
    LetterRow { slp: 'q', iast: "ḍ", deva: 'ड' },
    LetterRow { slp: 'Q', iast: "ḍh", deva: 'ढ' },
    LetterRow { slp: 'R', iast: "ṇ", deva: 'ण' },
    LetterRow { slp: 't', iast: "t", deva: 'त' },
    LetterRow { slp: 'T', iast: "th", deva: 'थ' },
    LetterRow { slp: 'd', iast: "d", deva: 'द' },
    LetterRow { slp: 'D', iast: "dh", deva: 'ध' },
    LetterRow { slp: 'n', iast: "n", deva: 'न' },
    LetterRow { slp: 'p', iast: "p", deva: 'प' },
    LetterRow { slp: 'P', iast: "ph", deva: 'फ' },
    LetterRow { slp: 'b', iast: "b", deva: 'ब' },
    LetterRow { slp: 'B', iast: "bh", deva: 'भ' },
    LetterRow { slp: 'm', iast: "m", deva: 'म' },
    LetterRow { slp: 'y', iast: "y", deva: 'य' },
    LetterRow { slp: 'r', iast: "r", deva: 'र' },
    LetterRow { slp: 'l', iast: "l", deva: 'ल' },
    LetterRow { slp: 'v', iast: "v", deva: 'व' },
    LetterRow { slp: 'S', iast: "ś", deva: 'श' },
    LetterRow { slp: 'z', iast: "ṣ", deva: 'ष' },
    LetterRow { slp: 's', iast: "s", deva: 'स' },
    LetterRow { slp: 'h', iast: "h", deva: 'ह' },
];

// anusvara, visarga, candrabindu, avagraha, danda
const SIGNS: [LetterRow; 5] = [
    LetterRow { slp: 'M', iast: "ṃ", deva: '\u{0902}' },
    LetterRow { slp: 'H', iast: "ḥ", deva: '\u{0903}' },
    LetterRow { slp: '~', iast: "m\u{0310}", deva: '\u{0901}' },
    LetterRow { slp: '\'', iast: "'", deva: '\u{093D}' },
    LetterRow { slp: '|', iast: "|", deva: '\u{0964}' },
];

const DANDA: Unit = Unit::Sign(4);
const DOUBLE_DANDA: char = '\u{0965}';

const VIRAMA: char = '\u{094D}';
const NUKTA: char = '\u{093C}';
const INHERENT_A: u8 = 0;

/// Lowercase IAST letters, digraphs included.
pub const IAST_ALPHABET: &[&str] = &[
    "a", "ā", "i", "ī", "u", "ū", "ṛ", "ṝ", "ḷ", "ḹ", "e", "ai", "o", "au", "k", "kh", "g", "gh",
    "ṅ", "c", "ch", "j", "jh", "ñ", "ṭ", "ṭh", "ḍ", "ḍh", "ṇ", "t", "th", "d", "dh", "n", "p",
    "ph", "b", "bh", "m", "y", "r", "l", "v", "ś", "ṣ", "s", "h", "ṃ", "ḥ", "m\u{0310}", "'",
];

fn is_devanagari_block(c: char) -> bool {
    ('\u{0900}'..='\u{097F}').contains(&c)
}

fn is_combining_mark(c: char) -> bool {
    ('\u{0300}'..='\u{036F}').contains(&c)
}

fn unit_iast(u: Unit) -> Option<&'static str> {
    match u {
        Unit::Vowel(i) => Some(VOWELS[i as usize].iast),
        Unit::Consonant(i) => Some(CONSONANTS[i as usize].iast),
        Unit::Sign(i) => Some(SIGNS[i as usize].iast),
        Unit::Other(_) => None,
    }
}

fn unit_slp(u: Unit) -> char {
    match u {
        Unit::Vowel(i) => VOWELS[i as usize].slp,
        Unit::Consonant(i) => CONSONANTS[i as usize].slp,
        Unit::Sign(i) => SIGNS[i as usize].slp,
        Unit::Other(c) => c,
    }
}

fn slp_unit(c: char) -> Unit {
    if let Some(i) = VOWELS.iter().position(|r| r.slp == c) {
        return Unit::Vowel(i as u8);
    }
    if let Some(i) = CONSONANTS.iter().position(|r| r.slp == c) {
        return Unit::Consonant(i as u8);
    }
    if let Some(i) = SIGNS.iter().position(|r| r.slp == c) {
        return Unit::Sign(i as u8);
    }
    Unit::Other(c)
}

/// Longest IAST letter at the start of `s`, with its byte length.
fn match_iast(s: &str) -> Option<(Unit, usize)> {
    let mut best: Option<(Unit, usize)> = None;
    let mut consider = |iast: &str, unit: Unit| {
        if s.starts_with(iast) && best.is_none_or(|(_, len)| iast.len() > len) {
            best = Some((unit, iast.len()));
        }
    };
    for (i, r) in VOWELS.iter().enumerate() {
        consider(r.iast, Unit::Vowel(i as u8));
    }
    for (i, r) in CONSONANTS.iter().enumerate() {
        consider(r.iast, Unit::Consonant(i as u8));
    }
    for (i, r) in SIGNS.iter().enumerate() {
        consider(r.iast, Unit::Sign(i as u8));
    }
    // ṁ is a common alternative spelling of the anusvara
    consider("ṁ", Unit::Sign(0));
    best
}

fn fold_capital(c: char) -> char {
    if !c.is_uppercase() {
        return c;
    }
    let mut lower = c.to_lowercase();
    match (lower.next(), lower.next()) {
        (Some(l), None) if l.len_utf8() == c.len_utf8() && IAST_ALPHABET.iter().any(|a| a.starts_with(l)) => l,
        _ => c,
    }
}

fn decode_iast(text: &str, base: usize, lenient: bool, out: &mut Vec<Unit>) -> Result<(), TextError> {
    // Capitals of alphabet letters fold to lowercase; foreign capitals pass
    // through. Folding keeps byte lengths, so offsets stay valid.
    let folded: String = text.chars().map(fold_capital).collect();
    let mut pos = 0;
    while pos < folded.len() {
        let rest = &folded[pos..];
        if let Some((unit, len)) = match_iast(rest) {
            out.push(unit);
            pos += len;
            continue;
        }
        let ch = rest.chars().next().expect("non-empty");
        if is_combining_mark(ch) && !lenient {
            return Err(TextError::Malformed { offset: base + pos, ch });
        }
        if !is_combining_mark(ch) {
            out.push(Unit::Other(text[pos..].chars().next().expect("same layout")));
        }
        pos += ch.len_utf8();
    }
    Ok(())
}

fn decode_devanagari(
    text: &str,
    base: usize,
    lenient: bool,
    out: &mut Vec<Unit>,
) -> Result<(), TextError> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (off, ch) = chars[i];
        if let Some(ci) = CONSONANTS.iter().position(|r| r.deva == ch) {
            out.push(Unit::Consonant(ci as u8));
            match chars.get(i + 1).map(|&(_, c)| c) {
                Some(VIRAMA) => i += 2,
                Some(next) => {
                    if let Some(vi) = VOWELS.iter().position(|r| r.matra == Some(next)) {
                        out.push(Unit::Vowel(vi as u8));
                        i += 2;
                    } else if next == NUKTA && !lenient {
                        return Err(TextError::Malformed { offset: base + chars[i + 1].0, ch: next });
                    } else {
                        out.push(Unit::Vowel(INHERENT_A));
                        i += 1;
                    }
                }
                None => {
                    out.push(Unit::Vowel(INHERENT_A));
                    i += 1;
                }
            }
            continue;
        }
        if let Some(vi) = VOWELS.iter().position(|r| r.letter == ch) {
            out.push(Unit::Vowel(vi as u8));
        } else if let Some(si) = SIGNS.iter().position(|r| r.deva == ch) {
            out.push(Unit::Sign(si as u8));
        } else if ch == DOUBLE_DANDA {
            out.extend([DANDA, DANDA]);
        } else if ch == VIRAMA || ch == NUKTA || VOWELS.iter().any(|r| r.matra == Some(ch)) {
            if !lenient {
                return Err(TextError::Malformed { offset: base + off, ch });
            }
        } else {
            out.push(Unit::Other(ch));
        }
        i += 1;
    }
    Ok(())
}

fn decode(text: &str, script: Script) -> Result<Vec<Unit>, TextError> {
    let mut units = Vec::with_capacity(text.len());
    match script {
        Script::Iast => decode_iast(text, 0, false, &mut units)?,
        Script::Devanagari => decode_devanagari(text, 0, false, &mut units)?,
        Script::CanonicalRoman => units.extend(text.chars().map(slp_unit)),
    }
    Ok(units)
}

fn encode(units: &[Unit], script: Script) -> String {
    let mut out = String::with_capacity(units.len() * 2);
    match script {
        Script::CanonicalRoman => out.extend(units.iter().map(|&u| unit_slp(u))),
        Script::Iast => {
            for &u in units {
                match unit_iast(u) {
                    Some(s) => out.push_str(s),
                    None => {
                        if let Unit::Other(c) = u {
                            out.push(c)
                        }
                    }
                }
            }
        }
        Script::Devanagari => {
            let mut i = 0;
            while i < units.len() {
                match units[i] {
                    Unit::Consonant(c) => {
                        out.push(CONSONANTS[c as usize].deva);
                        match units.get(i + 1) {
                            Some(Unit::Vowel(v)) => {
                                if let Some(m) = VOWELS[*v as usize].matra {
                                    out.push(m);
                                }
                                i += 1;
                            }
                            _ => out.push(VIRAMA),
                        }
                    }
                    Unit::Vowel(v) => out.push(VOWELS[v as usize].letter),
                    DANDA if units.get(i + 1) == Some(&DANDA) => {
                        out.push(DOUBLE_DANDA);
                        i += 1;
                    }
                    Unit::Sign(s) => out.push(SIGNS[s as usize].deva),
                    Unit::Other(c) => out.push(c),
                }
                i += 1;
            }
        }
    }
    out
}

/// Converts `text` between scripts.
///
/// Input is NFC-composed first. Characters outside the source alphabet are
/// copied unchanged; a dependent vowel sign or virama with no consonant to
/// attach to is reported with its byte offset in the composed input.
pub fn transliterate(text: &str, from: Script, to: Script) -> Result<String, TextError> {
    let composed: String = text.nfc().collect();
    if from == to {
        return Ok(composed);
    }
    let units = decode(&composed, from)?;
    Ok(encode(&units, to))
}

/// Canonical form of text that may mix Devanagari and IAST.
///
/// The two alphabets are disjoint, so each run is decoded by its own codec.
/// Stray combining marks are dropped instead of rejected; this is the form
/// used when comparing free model output against gold answers.
pub fn to_canonical_mixed(text: &str) -> String {
    let composed: String = text.nfc().collect();
    let mut units = Vec::with_capacity(composed.len());
    let mut run_start = 0;
    let mut run_deva: Option<bool> = None;
    let flush = |start: usize, end: usize, deva: bool, units: &mut Vec<Unit>| {
        let run = &composed[start..end];
        let res = if deva {
            decode_devanagari(run, start, true, units)
        } else {
            decode_iast(run, start, true, units)
        };
        debug_assert!(res.is_ok(), "lenient decoding never fails");
    };
    for (off, ch) in composed.char_indices() {
        let deva = is_devanagari_block(ch);
        match run_deva {
            Some(prev) if prev != deva => {
                flush(run_start, off, prev, &mut units);
                run_start = off;
                run_deva = Some(deva);
            }
            None => run_deva = Some(deva),
            _ => {}
        }
    }
    if let Some(deva) = run_deva {
        flush(run_start, composed.len(), deva, &mut units);
    }
    encode(&units, Script::CanonicalRoman)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NormalizeOptions {
    /// Remove daṇḍa marks (`।`, `॥`, `|`).
    pub strip_danda: bool,
    /// Remove sentence punctuation and quotes. Hyphens and apostrophes are
    /// kept because they are meaningful inside IAST words.
    pub strip_punctuation: bool,
}

impl NormalizeOptions {
    pub const STRIP_ALL: NormalizeOptions = NormalizeOptions { strip_danda: true, strip_punctuation: true };
}

fn is_danda(c: char) -> bool {
    matches!(c, '\u{0964}' | '\u{0965}' | '|')
}

fn is_strippable_punct(c: char) -> bool {
    matches!(
        c,
        '.' | ',' | ';' | ':' | '!' | '?' | '"' | '(' | ')' | '[' | ']' | '{' | '}' | '«' | '»'
            | '“' | '”' | '‘' | '’' | '¿' | '¡' | '…' | '—' | '–' | '/' | '\\' | '*' | '`'
    )
}

/// NFC composition, whitespace collapsed to single spaces, trimmed.
pub fn normalize(text: &str) -> String {
    normalize_with(text, NormalizeOptions::default())
}

pub fn normalize_with(text: &str, opts: NormalizeOptions) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.nfc() {
        let blank = c.is_whitespace()
            || (opts.strip_danda && is_danda(c))
            || (opts.strip_punctuation && is_strippable_punct(c));
        if blank {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.push(c);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub index: usize,
}

/// Whitespace tokenization with positions `0..n`.
pub fn tokenize(text: &str) -> Vec<Token> {
    text.split_whitespace()
        .enumerate()
        .map(|(index, s)| Token { surface: s.to_string(), index })
        .collect()
}

pub fn tokenize_with(text: &str, opts: NormalizeOptions) -> Vec<Token> {
    tokenize(&normalize_with(text, opts))
}

/// Inclusive, zero-based range of corpus lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineSpan {
    pub start: usize,
    pub end: usize,
}

impl LineSpan {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentChunk {
    pub id: String,
    pub span: LineSpan,
    pub raw_text: String,
    #[serde(default)]
    pub lemmas: Vec<String>,
}

impl DocumentChunk {
    pub fn id_for(span: LineSpan) -> String {
        // zero-padded so lexical id order matches corpus order
        format!("L{:06}-{:06}", span.start, span.end)
    }

    pub fn has_word_char(&self) -> bool {
        self.raw_text.chars().any(char::is_alphanumeric)
    }
}

/// Splits corpus lines into windows of `chunk_lines` lines, consecutive
/// windows sharing `overlap_lines` lines. The last window may be short.
pub fn chunk_corpus<S: AsRef<str>>(
    lines: &[S],
    chunk_lines: usize,
    overlap_lines: usize,
) -> Result<Vec<DocumentChunk>, TextError> {
    if chunk_lines == 0 || overlap_lines >= chunk_lines {
        return Err(TextError::InvalidChunking { chunk_lines, overlap_lines });
    }
    if lines.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let step = chunk_lines - overlap_lines;
    let mut chunks = Vec::with_capacity(lines.len() / step + 1);
    let mut start = 0;
    loop {
        let end = (start + chunk_lines).min(lines.len()) - 1;
        let span = LineSpan { start, end };
        let raw_text = lines[start..=end].iter().map(AsRef::as_ref).collect::<Vec<_>>().join("\n");
        chunks.push(DocumentChunk { id: DocumentChunk::id_for(span), span, raw_text, lemmas: Vec::new() });
        if end + 1 == lines.len() {
            break;
        }
        start += step;
    }
    Ok(chunks)
}
