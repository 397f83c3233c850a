//! File-backed knowledge graph and the Think-on-Graph loop.
//!
//! Graph file, one record per line (blank lines and `#` comments skipped):
//!
//! ```text
//! @node<TAB>id<TAB>lemma[<TAB>label,label,...]
//! src_id<TAB>RELATION<TAB>dst_id
//! ```
//!
//! Lemmas are Devanagari or IAST and are stored in canonical form. Nodes named
//! only by edges get `lemma = id`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::KgError;
use crate::harness::QaRecord;
use crate::lemma::LemmaPipeline;
use crate::llmclient::{parse_binary, parse_scored_list, ChatRequest, LlmClient};
use crate::prompts::{format_choices, tog_ids, Binding, PromptRegistry};
use crate::textproc::{self, NormalizeOptions, Script};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgNode {
    pub id: String,
    pub lemma: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgEdge {
    pub src: NodeId,
    pub relation: String,
    pub dst: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KgLoadMode {
    /// Edge endpoints without an `@node` line are created on the fly.
    #[default]
    AutoCreate,
    /// Edge endpoints must be declared by an earlier `@node` line.
    Strict,
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    nodes: Vec<KgNode>,
    edges: Vec<KgEdge>,
    by_id: HashMap<String, NodeId>,
    by_lemma: HashMap<String, Vec<NodeId>>,
    incident: Vec<Vec<usize>>,
    relation_rank: HashMap<String, usize>,
}

/// Lookup key for lemmas and free-text entity names.
pub fn lemma_key(text: &str) -> String {
    textproc::to_canonical_mixed(&textproc::normalize_with(text, NormalizeOptions::STRIP_ALL))
}

impl KnowledgeGraph {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, KgError> {
        Self::load_with(path, KgLoadMode::AutoCreate)
    }

    pub fn load_with(path: impl AsRef<Path>, mode: KgLoadMode) -> Result<Self, KgError> {
        Self::parse(&fs::read_to_string(path)?, mode)
    }

    pub fn parse(text: &str, mode: KgLoadMode) -> Result<Self, KgError> {
        let mut kg = KnowledgeGraph::default();
        let mut declared = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            let bad = |reason: &str| KgError::ParseError { line: line_no, reason: reason.to_string() };
            if cols[0] == "@node" {
                if !(3..=4).contains(&cols.len()) || cols[1].is_empty() || cols[2].is_empty() {
                    return Err(bad("expected @node<TAB>id<TAB>lemma[<TAB>labels]"));
                }
                if !declared.insert(cols[1].to_string()) {
                    return Err(bad("node declared twice"));
                }
                let labels = cols
                    .get(3)
                    .map(|l| l.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
                    .unwrap_or_default();
                let id = kg.node_or_insert(cols[1]);
                kg.nodes[id].lemma = lemma_key(cols[2]);
                kg.nodes[id].labels = labels;
                continue;
            }
            if cols.len() != 3 {
                return Err(bad("expected src<TAB>relation<TAB>dst"));
            }
            if cols[0].is_empty() || cols[2].is_empty() {
                return Err(bad("empty node id"));
            }
            if cols[1].is_empty() {
                return Err(bad("empty relation name"));
            }
            if mode == KgLoadMode::Strict {
                for n in [cols[0], cols[2]] {
                    if !declared.contains(n) {
                        return Err(KgError::DanglingEdge { line: line_no, node: n.to_string() });
                    }
                }
            }
            let src = kg.node_or_insert(cols[0]);
            let dst = kg.node_or_insert(cols[2]);
            let e = kg.edges.len();
            let next_rank = kg.relation_rank.len();
            kg.relation_rank.entry(cols[1].to_string()).or_insert(next_rank);
            kg.edges.push(KgEdge { src, relation: cols[1].to_string(), dst });
            kg.incident[src].push(e);
            if dst != src {
                kg.incident[dst].push(e);
            }
        }
        for (i, n) in kg.nodes.iter().enumerate() {
            kg.by_lemma.entry(n.lemma.clone()).or_default().push(i);
        }
        Ok(kg)
    }

    fn node_or_insert(&mut self, id: &str) -> NodeId {
        if let Some(&n) = self.by_id.get(id) {
            return n;
        }
        let n = self.nodes.len();
        self.nodes.push(KgNode { id: id.to_string(), lemma: lemma_key(id), labels: Vec::new() });
        self.incident.push(Vec::new());
        self.by_id.insert(id.to_string(), n);
        n
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, n: NodeId) -> &KgNode {
        &self.nodes[n]
    }

    pub fn nodes(&self) -> &[KgNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[KgEdge] {
        &self.edges
    }

    pub fn node_by_id(&self, id: &str) -> Option<NodeId> {
        self.by_id.get(id).copied()
    }

    /// Edge indices touching `n` in either direction, in file order.
    pub fn incident(&self, n: NodeId) -> &[usize] {
        &self.incident[n]
    }

    /// Nodes whose lemma matches `text` after canonicalization.
    pub fn resolve(&self, text: &str) -> &[NodeId] {
        self.by_lemma.get(&lemma_key(text)).map(Vec::as_slice).unwrap_or(&[])
    }

    fn relation_rank(&self, rel: &str) -> usize {
        self.relation_rank.get(rel).copied().unwrap_or(usize::MAX)
    }
}

fn sample_sorted<T: Clone>(items: Vec<T>, n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    if items.len() <= n {
        return items;
    }
    let mut picked = index::sample(rng, items.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i].clone()).collect()
}

/// Distinct relation names incident to `entities`, in first-seen file order;
/// more than `n` are sampled down to `n` with `rng`.
pub fn fetch_relations(kg: &KnowledgeGraph, entities: &[NodeId], n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut rels: Vec<&str> = entities
        .iter()
        .flat_map(|&e| kg.incident(e))
        .map(|&i| kg.edges[i].relation.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    rels.sort_by_key(|r| kg.relation_rank(r));
    sample_sorted(rels.into_iter().map(String::from).collect(), n, rng)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathTriple {
    pub src: NodeId,
    pub src_lemma: String,
    pub relation: String,
    pub dst: NodeId,
    pub dst_lemma: String,
    pub depth: usize,
}

impl PathTriple {
    fn of(kg: &KnowledgeGraph, edge: &KgEdge, depth: usize) -> Self {
        PathTriple {
            src: edge.src,
            src_lemma: kg.nodes[edge.src].lemma.clone(),
            relation: edge.relation.clone(),
            dst: edge.dst,
            dst_lemma: kg.nodes[edge.dst].lemma.clone(),
            depth,
        }
    }

    /// The end of the triple that is not `from`.
    pub fn far_end(&self, from: NodeId) -> NodeId {
        if self.src == from {
            self.dst
        } else {
            self.src
        }
    }
}

/// Unvisited neighbours of `entities` over `relations`, in node order, with
/// the triple that first reached each. Direction is ignored for traversal and
/// kept in the triple. More than `n` neighbours are sampled down to `n`.
pub fn fetch_entities(
    kg: &KnowledgeGraph,
    entities: &[NodeId],
    relations: &[String],
    visited: &BTreeSet<NodeId>,
    depth: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<NodeId>, Vec<PathTriple>) {
    if relations.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let mut edges: Vec<(usize, NodeId)> = entities.iter().flat_map(|&e| kg.incident(e).iter().map(move |&i| (i, e))).collect();
    edges.sort_unstable();
    let mut reached: Vec<(NodeId, PathTriple)> = Vec::new();
    for (i, from) in edges {
        let edge = &kg.edges[i];
        if !relations.contains(&edge.relation) {
            continue;
        }
        let to = if edge.src == from { edge.dst } else { edge.src };
        if visited.contains(&to) || reached.iter().any(|(n, _)| *n == to) {
            continue;
        }
        reached.push((to, PathTriple::of(kg, edge, depth)));
    }
    reached.sort_by_key(|(n, _)| *n);
    sample_sorted(reached, n, rng).into_iter().unzip()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TogConfig {
    pub sample_limit: usize,
    pub depth_limit: usize,
    pub width_limit: usize,
    pub rng_seed: u64,
    /// Temperature of the single retry after an unparseable prune reply.
    pub retry_temperature: f64,
}

impl Default for TogConfig {
    fn default() -> Self {
        TogConfig { sample_limit: 15, depth_limit: 1, width_limit: 3, rng_seed: 0, retry_temperature: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TogStep {
    pub prompt_id: String,
    pub depth: usize,
    pub temperature: f64,
    pub raw: String,
    pub parsed: Vec<(String, f64)>,
    pub parse_failed: bool,
    pub kept: Vec<String>,
    /// Kept set taken in graph order because the reply gave nothing usable.
    pub fallback: bool,
    pub reason: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TogStop {
    /// Reason returned 1.
    Sufficient,
    /// Depth limit reached.
    DepthExhausted,
    /// No question entity resolved to a node.
    NoEntities,
    /// The frontier had no relations or no unvisited neighbours.
    FrontierEmpty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TogTrace {
    pub question_id: String,
    pub steps: Vec<TogStep>,
    pub unresolved: Vec<String>,
    pub start_entities: Vec<String>,
    pub paths: Vec<PathTriple>,
    pub depth_reached: usize,
    pub stop: TogStop,
    pub llm_calls: usize,
    pub answer: String,
}

impl TogTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TogOutcome {
    pub answer: String,
    pub trace: TogTrace,
}

/// Everything a run needs besides the question and limits.
pub struct TogEnv<'a> {
    pub kg: &'a KnowledgeGraph,
    pub llm: &'a LlmClient,
    pub prompts: &'a PromptRegistry,
    pub pipeline: &'a LemmaPipeline,
    pub model: &'a str,
    pub script: Script,
}

fn run_seed(seed: u64, question_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(question_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn quote_list<S: AsRef<str>>(items: &[S]) -> String {
    items.iter().map(|s| format!("'{}'", s.as_ref())).collect::<Vec<_>>().join(", ")
}

struct Run<'a, 'b> {
    env: &'b TogEnv<'a>,
    cfg: TogConfig,
    base: Binding,
    trace: TogTrace,
}

impl Run<'_, '_> {
    fn show(&self, canonical: &str) -> String {
        textproc::transliterate(canonical, Script::CanonicalRoman, self.env.script).unwrap_or_else(|_| canonical.to_string())
    }

    fn show_paths(&self, paths: &[PathTriple]) -> String {
        paths
            .iter()
            .map(|p| format!("('{}', '{}', '{}')", self.show(&p.src_lemma), p.relation, self.show(&p.dst_lemma)))
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn call(&mut self, id: &str, extra: &[(&str, String)], temperature: f64) -> Result<String, KgError> {
        let mut binding = self.base.clone();
        for (k, v) in extra {
            binding.insert(k.to_string(), v.clone());
        }
        let messages = self.env.prompts.render(id, &binding, self.env.script)?;
        let req = ChatRequest::new(self.env.model, messages).with_temperature(temperature);
        self.trace.llm_calls += 1;
        Ok(self.env.llm.complete(&req)?.text)
    }

    fn step(&self, id: &str, depth: usize, temperature: f64, raw: String) -> TogStep {
        TogStep {
            prompt_id: id.to_string(),
            depth,
            temperature,
            raw,
            parsed: Vec::new(),
            parse_failed: false,
            kept: Vec::new(),
            fallback: false,
            reason: None,
        }
    }

    /// Nodes named by a model-produced string: its canonical form first, then
    /// its lemmas joined, then each lemma.
    fn resolve_name(&self, name: &str) -> Result<Vec<NodeId>, KgError> {
        let kg = self.env.kg;
        let direct = kg.resolve(name);
        if !direct.is_empty() {
            return Ok(direct.to_vec());
        }
        let lemmas = self.env.pipeline.lemmatize_mixed(name)?;
        let joined = kg.by_lemma.get(&lemmas.joined()).cloned().unwrap_or_default();
        if !joined.is_empty() {
            return Ok(joined);
        }
        let mut out = Vec::new();
        for l in lemmas.as_slice() {
            for &n in kg.by_lemma.get(l).map(Vec::as_slice).unwrap_or(&[]) {
                if !out.contains(&n) {
                    out.push(n);
                }
            }
        }
        Ok(out)
    }

    /// One prune call with a single retry on an unparseable reply. `score_of`
    /// maps parsed items onto candidate positions.
    #[allow(clippy::type_complexity)]
    fn prune(
        &mut self,
        id: &str,
        depth: usize,
        extra: &[(&str, String)],
        n_candidates: usize,
        score_of: &dyn Fn(&Self, &str) -> Result<Vec<usize>, KgError>,
    ) -> Result<Vec<usize>, KgError> {
        let mut temperature = 0.0;
        let mut raw = self.call(id, extra, temperature)?;
        let mut parsed = parse_scored_list(&raw);
        if parsed.parse_failed {
            self.trace.steps.push(TogStep { parse_failed: true, ..self.step(id, depth, temperature, raw) });
            temperature = self.cfg.retry_temperature;
            raw = self.call(id, extra, temperature)?;
            parsed = parse_scored_list(&raw);
        }
        let mut best: Vec<Option<f64>> = vec![None; n_candidates];
        for (item, score) in &parsed.items {
            for pos in score_of(self, item)? {
                best[pos] = Some(best[pos].map_or(*score, |s: f64| s.max(*score)));
            }
        }
        let mut ranked: Vec<(usize, f64)> = best.iter().enumerate().filter_map(|(i, s)| s.map(|s| (i, s))).collect();
        let fallback = ranked.is_empty();
        let kept: Vec<usize> = if fallback {
            (0..n_candidates.min(self.cfg.width_limit)).collect()
        } else {
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.into_iter().take(self.cfg.width_limit).map(|(i, _)| i).collect()
        };
        let mut step = self.step(id, depth, temperature, raw);
        step.parse_failed = parsed.parse_failed;
        step.parsed = parsed.items;
        step.fallback = fallback;
        self.trace.steps.push(step);
        Ok(kept)
    }
}

/// Answers `question` by exploring `env.kg`.
///
/// Calls: ExtractEntities, then per depth RelationPrune, EntityExtractPrune
/// and Reason, then Answer. An unparseable prune reply is retried once at
/// `retry_temperature`; a second failure keeps the first `width_limit`
/// candidates in graph order.
pub fn tog_answer(question: &QaRecord, env: &TogEnv<'_>, cfg: &TogConfig) -> Result<TogOutcome, KgError> {
    let kg = env.kg;
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed(cfg.rng_seed, &question.id));
    let mut base = Binding::new();
    base.insert("QUESTION".into(), question.question.clone());
    base.insert("CHOICES".into(), format_choices(question.choices.as_deref().unwrap_or(&[])));
    base.insert("TOPIC".into(), question.topic.label(env.script));
    let mut run = Run {
        env,
        cfg: *cfg,
        base,
        trace: TogTrace {
            question_id: question.id.clone(),
            steps: Vec::new(),
            unresolved: Vec::new(),
            start_entities: Vec::new(),
            paths: Vec::new(),
            depth_reached: 0,
            stop: TogStop::DepthExhausted,
            llm_calls: 0,
            answer: String::new(),
        },
    };

    let raw = run.call(tog_ids::EXTRACT_ENTITIES, &[], 0.0)?;
    let parsed = parse_scored_list(&raw);
    let mut order: Vec<(String, f64)> = parsed.items.clone();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut entities: Vec<NodeId> = Vec::new();
    for (name, _) in &order {
        let nodes = run.resolve_name(name)?;
        if nodes.is_empty() {
            run.trace.unresolved.push(name.clone());
        }
        for n in nodes {
            if !entities.contains(&n) && entities.len() < cfg.width_limit {
                entities.push(n);
            }
        }
    }
    let mut step = run.step(tog_ids::EXTRACT_ENTITIES, 0, 0.0, raw);
    step.parse_failed = parsed.parse_failed;
    step.parsed = parsed.items;
    step.kept = entities.iter().map(|&n| kg.nodes[n].lemma.clone()).collect();
    run.trace.steps.push(step);
    run.trace.start_entities = run.trace.steps[0].kept.clone();
    let mut visited: BTreeSet<NodeId> = entities.iter().copied().collect();

    let mut paths: Vec<PathTriple> = Vec::new();
    let mut d = 0;
    if entities.is_empty() {
        run.trace.stop = TogStop::NoEntities;
    }
    while d < cfg.depth_limit && !entities.is_empty() {
        let relations = fetch_relations(kg, &entities, cfg.sample_limit, &mut rng);
        if relations.is_empty() {
            run.trace.stop = TogStop::FrontierEmpty;
            break;
        }
        let rel_list = quote_list(&relations);
        let rels = relations.clone();
        let kept = run.prune(tog_ids::RELATION_PRUNE, d, &[("RELATIONS", rel_list)], relations.len(), &|_, item| {
            let item = item.trim();
            Ok(rels
                .iter()
                .enumerate()
                .filter(|(_, r)| r.as_str() == item || r.eq_ignore_ascii_case(item))
                .map(|(i, _)| i)
                .collect())
        })?;
        let pruned_rels: Vec<String> = kept.iter().map(|&i| relations[i].clone()).collect();
        run.trace.steps.last_mut().expect("prune step").kept = pruned_rels.clone();

        let (candidates, new_paths) = fetch_entities(kg, &entities, &pruned_rels, &visited, d + 1, cfg.sample_limit, &mut rng);
        if candidates.is_empty() {
            run.trace.stop = TogStop::FrontierEmpty;
            break;
        }
        let shown: Vec<String> = candidates.iter().map(|&n| run.show(&kg.nodes[n].lemma)).collect();
        let extra = [("RELATIONS", quote_list(&pruned_rels)), ("ENTITIES", quote_list(&shown))];
        let cands = candidates.clone();
        let kept = run.prune(tog_ids::ENTITY_EXTRACT_PRUNE, d, &extra, candidates.len(), &|r, item| {
            let nodes = r.resolve_name(item)?;
            Ok(cands.iter().enumerate().filter(|(_, c)| nodes.contains(c)).map(|(i, _)| i).collect())
        })?;
        entities = kept.iter().map(|&i| candidates[i]).collect();
        entities.sort_unstable();
        paths.extend(kept.iter().map(|&i| new_paths[i].clone()));
        visited.extend(entities.iter().copied());
        run.trace.steps.last_mut().expect("prune step").kept =
            entities.iter().map(|&n| kg.nodes[n].lemma.clone()).collect();

        let raw = run.call(tog_ids::REASON, &[("PATHS", run.show_paths(&paths))], 0.0)?;
        let bit = parse_binary(&raw);
        let mut step = run.step(tog_ids::REASON, d, 0.0, raw);
        step.parse_failed = bit.parse_failed;
        step.reason = Some(bit.value);
        run.trace.steps.push(step);
        d += 1;
        run.trace.depth_reached = d;
        if bit.value == 1 {
            run.trace.stop = TogStop::Sufficient;
            break;
        }
        run.trace.stop = TogStop::DepthExhausted;
    }

    let raw = run.call(tog_ids::ANSWER, &[("PATHS", run.show_paths(&paths))], 0.0)?;
    let answer = raw.trim().to_string();
    run.trace.steps.push(run.step(tog_ids::ANSWER, d, 0.0, raw));
    run.trace.paths = paths;
    run.trace.answer = answer.clone();
    Ok(TogOutcome { answer, trace: run.trace })
}
