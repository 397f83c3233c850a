//! Prompt template registry.
//!
//! A template file is a front-matter block followed by role sections:
//!
//! ```text
//! ---
//! id: qa_rag.san
//! task: qa_rag
//! language: san
//! script: canonical
//! placeholders: TOPIC, CONTEXTS, QUESTION, CHOICES
//! ---
//! @@ system
//! ...
//! @@ human
//! ...
//! ```
//!
//! In bodies, `{NAME}` is a placeholder, `{{` and `}}` are literal braces and
//! `[[...]]` is copied as is. With `script: canonical` the remaining text is
//! SLP1 and gets transliterated to the requested output script; `[[...]]`
//! spans and bound values are never transliterated.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::PromptError;
use crate::llmclient::{Message, Role};
use crate::textproc::{self, Script};

pub type Binding = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ner,
    Mt,
    QaClosed,
    QaRag,
    TogStep,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Ner => "ner",
            Task::Mt => "mt",
            Task::QaClosed => "qa_closed",
            Task::QaRag => "qa_rag",
            Task::TogStep => "tog_step",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ner" => Task::Ner,
            "mt" => Task::Mt,
            "qa_closed" => Task::QaClosed,
            "qa_rag" => Task::QaRag,
            "tog_step" => Task::TogStep,
            other => return Err(format!("unknown task `{other}`")),
        })
    }
}

pub mod tog_ids {
    pub const EXTRACT_ENTITIES: &str = "tog.extract_entities";
    pub const RELATION_PRUNE: &str = "tog.relation_prune";
    pub const ENTITY_EXTRACT_PRUNE: &str = "tog.entity_extract_prune";
    pub const REASON: &str = "tog.reason";
    pub const ANSWER: &str = "tog.answer";
}

/// `ner` + `san` → `ner.san`.
pub fn template_id(task: Task, language: &str) -> String {
    format!("{}.{language}", task.name())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    Verbatim,
    Canonical,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Verbatim(String),
    Placeholder(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub task: Task,
    pub language: String,
    pub storage: Storage,
    pub placeholders: Vec<String>,
    sections: Vec<(Role, Vec<Segment>)>,
}

fn format_err(file: &str, reason: impl Into<String>) -> PromptError {
    PromptError::Format { file: file.to_string(), reason: reason.into() }
}

fn is_placeholder_name(s: &str) -> bool {
    s.starts_with(|c: char| c.is_ascii_uppercase()) && s.chars().all(|c| c.is_ascii_uppercase() || c == ' ' || c == '_')
}

fn parse_segments(body: &str, file: &str) -> Result<Vec<Segment>, PromptError> {
    let mut out: Vec<Segment> = Vec::new();
    let mut text = String::new();
    let mut rest = body;
    let flush = |text: &mut String, out: &mut Vec<Segment>| {
        if !text.is_empty() {
            out.push(Segment::Text(std::mem::take(text)));
        }
    };
    while let Some(c) = rest.chars().next() {
        if rest.starts_with("{{") {
            text.push('{');
            rest = &rest[2..];
        } else if rest.starts_with("}}") {
            text.push('}');
            rest = &rest[2..];
        } else if rest.starts_with("[[") {
            let end = rest.find("]]").ok_or_else(|| format_err(file, "unterminated [[ span"))?;
            flush(&mut text, &mut out);
            out.push(Segment::Verbatim(rest[2..end].to_string()));
            rest = &rest[end + 2..];
        } else if c == '{' {
            let end = rest.find('}').ok_or_else(|| format_err(file, "unterminated placeholder"))?;
            let name = &rest[1..end];
            if !is_placeholder_name(name) {
                return Err(format_err(file, format!("bad placeholder name `{name}`")));
            }
            flush(&mut text, &mut out);
            out.push(Segment::Placeholder(name.to_string()));
            rest = &rest[end + 1..];
        } else if c == '}' {
            return Err(format_err(file, "stray `}`"));
        } else {
            text.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    flush(&mut text, &mut out);
    Ok(out)
}

impl PromptTemplate {
    pub fn parse(source: &str, file: &str) -> Result<Self, PromptError> {
        let source = source.replace("\r\n", "\n");
        let body = source.strip_prefix("---\n").ok_or_else(|| format_err(file, "missing front matter"))?;
        let (header, body) = body.split_once("\n---\n").ok_or_else(|| format_err(file, "unterminated front matter"))?;
        let mut fields = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line.split_once(':').ok_or_else(|| format_err(file, format!("bad header line `{line}`")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let field = |k: &str| fields.get(k).cloned().ok_or_else(|| format_err(file, format!("missing `{k}`")));
        let id = field("id")?;
        let task = field("task")?.parse::<Task>().map_err(|e| format_err(file, e))?;
        let language = field("language")?;
        let storage = match field("script")?.as_str() {
            "verbatim" => Storage::Verbatim,
            "canonical" => Storage::Canonical,
            other => return Err(format_err(file, format!("unknown storage script `{other}`"))),
        };
        let placeholders: Vec<String> = field("placeholders")?
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();

        let mut sections = Vec::new();
        let mut current: Option<(Role, String)> = None;
        for line in body.split_inclusive('\n') {
            if let Some(role) = line.strip_prefix("@@ ") {
                if let Some((r, text)) = current.take() {
                    sections.push((r, text));
                }
                let role = match role.trim() {
                    "system" => Role::System,
                    "human" => Role::Human,
                    other => return Err(format_err(file, format!("unknown role `{other}`"))),
                };
                current = Some((role, String::new()));
            } else {
                match &mut current {
                    Some((_, text)) => text.push_str(line),
                    None if line.trim().is_empty() => {}
                    None => return Err(format_err(file, "text before first @@ section")),
                }
            }
        }
        sections.extend(current);
        if sections.is_empty() {
            return Err(format_err(file, "no sections"));
        }
        let sections = sections
            .into_iter()
            .map(|(r, mut text)| {
                if text.ends_with('\n') {
                    text.pop();
                }
                parse_segments(&text, file).map(|s| (r, s))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let declared: BTreeSet<&str> = placeholders.iter().map(String::as_str).collect();
        for (_, segs) in &sections {
            for s in segs {
                if let Segment::Placeholder(name) = s {
                    if !declared.contains(name.as_str()) {
                        return Err(format_err(file, format!("undeclared placeholder {{{name}}}")));
                    }
                }
            }
        }
        Ok(PromptTemplate { id, task, language, storage, placeholders, sections })
    }

    /// Placeholders in order of first use.
    pub fn used_placeholders(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for (_, segs) in &self.sections {
            for s in segs {
                if let Segment::Placeholder(n) = s {
                    if !seen.contains(&n.as_str()) {
                        seen.push(n.as_str());
                    }
                }
            }
        }
        seen
    }

    /// Substitutes the binding. `script` chooses the output script of
    /// canonical-stored text and is ignored for verbatim templates.
    pub fn render(&self, binding: &Binding, script: Script) -> Result<Vec<Message>, PromptError> {
        for name in self.used_placeholders() {
            if !binding.contains_key(name) {
                return Err(PromptError::MissingPlaceholder(name.to_string()));
            }
        }
        let mut messages = Vec::with_capacity(self.sections.len());
        for (role, segs) in &self.sections {
            let mut content = String::new();
            for s in segs {
                match s {
                    Segment::Text(t) => match self.storage {
                        Storage::Verbatim => content.push_str(t),
                        Storage::Canonical => content.push_str(
                            &textproc::transliterate(t, Script::CanonicalRoman, script).map_err(|e| {
                                format_err(&self.id, format!("transliteration: {e}"))
                            })?,
                        ),
                    },
                    Segment::Verbatim(t) => content.push_str(t),
                    Segment::Placeholder(n) => content.push_str(&binding[n]),
                }
            }
            messages.push(Message { role: *role, content });
        }
        Ok(messages)
    }
}

const BUILTIN: &[(&str, &str)] = &[
    ("ner.en.tmpl", include_str!("../templates/ner.en.tmpl")),
    ("ner.san.tmpl", include_str!("../templates/ner.san.tmpl")),
    ("ner.lat.tmpl", include_str!("../templates/ner.lat.tmpl")),
    ("ner.grc.tmpl", include_str!("../templates/ner.grc.tmpl")),
    ("mt.en.tmpl", include_str!("../templates/mt.en.tmpl")),
    ("mt.san.tmpl", include_str!("../templates/mt.san.tmpl")),
    ("mt.lat.tmpl", include_str!("../templates/mt.lat.tmpl")),
    ("mt.grc.tmpl", include_str!("../templates/mt.grc.tmpl")),
    ("qa_closed.en.tmpl", include_str!("../templates/qa_closed.en.tmpl")),
    ("qa_closed.san.tmpl", include_str!("../templates/qa_closed.san.tmpl")),
    ("qa_rag.en.tmpl", include_str!("../templates/qa_rag.en.tmpl")),
    ("qa_rag.san.tmpl", include_str!("../templates/qa_rag.san.tmpl")),
    ("tog.extract_entities.tmpl", include_str!("../templates/tog.extract_entities.tmpl")),
    ("tog.relation_prune.tmpl", include_str!("../templates/tog.relation_prune.tmpl")),
    ("tog.entity_extract_prune.tmpl", include_str!("../templates/tog.entity_extract_prune.tmpl")),
    ("tog.reason.tmpl", include_str!("../templates/tog.reason.tmpl")),
    ("tog.answer.tmpl", include_str!("../templates/tog.answer.tmpl")),
];
const BUILTIN_MANIFEST: &str = include_str!("../templates/manifest.txt");
const BUILTIN_TAGSETS: &str = include_str!("../templates/tagsets.txt");

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptRegistry {
    templates: BTreeMap<String, PromptTemplate>,
    tagsets: BTreeMap<String, Vec<String>>,
}

impl PromptRegistry {
    /// The templates compiled into the library.
    pub fn builtin() -> Self {
        let mut reg = PromptRegistry::default();
        for file in manifest_entries(BUILTIN_MANIFEST) {
            let (_, src) = BUILTIN.iter().find(|(f, _)| *f == file).expect("manifest lists a bundled template");
            reg.insert(PromptTemplate::parse(src, file).expect("bundled template parses"));
        }
        reg.tagsets = parse_tagsets(BUILTIN_TAGSETS, "tagsets.txt").expect("bundled tagsets parse");
        reg
    }

    /// Loads `manifest.txt` (one template file name per line) and, when
    /// present, `tagsets.txt` from a directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let read = |name: &str| fs::read_to_string(dir.join(name)).map_err(|e| PromptError::Io(format!("{}: {e}", dir.join(name).display())));
        let manifest = read("manifest.txt")?;
        let mut reg = PromptRegistry::default();
        for file in manifest_entries(&manifest) {
            reg.insert(PromptTemplate::parse(&read(file)?, file)?);
        }
        if dir.join("tagsets.txt").exists() {
            reg.tagsets = parse_tagsets(&read("tagsets.txt")?, "tagsets.txt")?;
        }
        Ok(reg)
    }

    pub fn insert(&mut self, t: PromptTemplate) {
        self.templates.insert(t.id.clone(), t);
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates.get(id).ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn render(&self, id: &str, binding: &Binding, script: Script) -> Result<Vec<Message>, PromptError> {
        self.get(id)?.render(binding, script)
    }

    pub fn tagset(&self, language: &str) -> Option<&[String]> {
        self.tagsets.get(language).map(Vec::as_slice)
    }

    pub fn entity_type_list(&self, language: &str) -> Result<String, PromptError> {
        entity_type_list(self.tagset(language).unwrap_or(&[]))
    }
}

fn manifest_entries(manifest: &str) -> impl Iterator<Item = &str> {
    manifest.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'))
}

fn parse_tagsets(text: &str, file: &str) -> Result<BTreeMap<String, Vec<String>>, PromptError> {
    let mut out = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (lang, types) = line.split_once(':').ok_or_else(|| format_err(file, format!("bad line `{line}`")))?;
        out.insert(lang.trim().to_string(), types.split(',').map(|t| t.trim().to_string()).collect());
    }
    Ok(out)
}

/// Comma-separated entity types for the `{ENTITY TYPES}` slot.
pub fn entity_type_list(tagset: &[String]) -> Result<String, PromptError> {
    if tagset.is_empty() {
        return Err(PromptError::EmptyTagset);
    }
    Ok(tagset.join(", "))
}

/// Numbered retrieved passages for `{CONTEXTS}`, in rank order.
pub fn format_contexts<S: AsRef<str>>(passages: &[S]) -> String {
    passages
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{}. {}", i + 1, p.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// MCQ options for `{CHOICES}`: space-separated, in source order.
pub fn format_choices<S: AsRef<str>>(choices: &[S]) -> String {
    choices.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}
