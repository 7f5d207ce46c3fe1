//! Per-participant layered graph: subtasks, coded utterances, the transcript
//! chunk hierarchy, the report chunk hierarchy, and scored similarity edges
//! between same-window transcript and report chunks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::{self, Chunk, ChunkError, Origin};
use crate::corpus::{Report, Utterance};
use crate::simprovider::{self, ProviderError, SimilarityProvider};
use crate::table::{self, TableError};
use crate::text;

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("participant {0} has no coded utterances")]
    Empty(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
    #[error("windows must be strictly increasing and even, got {0:?}")]
    BadWindows(Vec<usize>),
    #[error("participant {participant}: {source}")]
    Chunk {
        participant: String,
        #[source]
        source: ChunkError,
    },
    #[error("participant {participant}: {source}")]
    Provider {
        participant: String,
        #[source]
        source: ProviderError,
    },
    #[error("chunks of `{0}` are missing a window")]
    Incomplete(String),
    #[error("unsupported graph format_version {0}")]
    Version(u32),
    #[error("graph json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Table(#[from] TableError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "window", rename_all = "lowercase")]
pub enum Layer {
    Subtask,
    Utterance,
    Transcript(usize),
    Report(usize),
}

impl Layer {
    pub fn window(self) -> Option<usize> {
        match self {
            Layer::Transcript(w) | Layer::Report(w) => Some(w),
            _ => None,
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Subtask => f.write_str("subtask"),
            Layer::Utterance => f.write_str("utterance"),
            Layer::Transcript(w) => write!(f, "t{w}"),
            Layer::Report(w) => write!(f, "r{w}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub layer: Layer,
    /// Chunk span and text, for chunk layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk: Option<ChunkPayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkPayload {
    pub start_index: usize,
    pub word_count: usize,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    /// Directed, parent to child.
    Hier,
    /// Undirected, stored transcript to report.
    Sim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub kind: EdgeKind,
    /// Word-share weight for chunk hierarchy edges, 1 for subtask and
    /// utterance edges, the similarity score for sim edges.
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct SemanticGraph {
    participant_id: String,
    windows: Vec<usize>,
    nodes: Vec<Node>,
    index: HashMap<String, usize>,
    word_sets: Vec<Option<BTreeSet<String>>>,
    edges: Vec<Edge>,
    out: Vec<Vec<(usize, f64)>>,
    inc: Vec<Vec<(usize, f64)>>,
    sim: Vec<Vec<(usize, f64)>>,
}

/// Options for [`build_graph`].
#[derive(Debug, Clone)]
pub struct GraphOptions {
    /// Strictly increasing, even window sizes.
    pub windows: Vec<usize>,
    /// Chunk uncoded utterances too (they get no subtask parent).
    pub include_uncoded: bool,
    /// Similarity edges scoring below this are dropped.
    pub score_floor: Option<f64>,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            windows: vec![20, 50, 100],
            include_uncoded: false,
            score_floor: None,
        }
    }
}

pub fn check_windows(windows: &[usize]) -> Result<(), GraphError> {
    let ok =
        windows.len() >= 2 && windows.iter().all(|&w| w > 0 && w % 2 == 0) && windows.windows(2).all(|p| p[0] < p[1]);
    if ok {
        Ok(())
    } else {
        Err(GraphError::BadWindows(windows.to_vec()))
    }
}

pub fn subtask_node_id(id: &str) -> String {
    format!("S/{id}")
}

pub fn utterance_node_id(u: &Utterance) -> String {
    format!("U/{}", u.key())
}

/// Chunks of one participant, grouped by text, smallest window first within
/// each text.
#[derive(Debug, Clone)]
pub struct ParticipantChunks {
    pub participant_id: String,
    /// Included utterances with their per-window chunks.
    pub utterances: Vec<(Utterance, Vec<Vec<Chunk>>)>,
    pub report: Vec<Vec<Chunk>>,
}

impl ParticipantChunks {
    pub fn all(&self) -> impl Iterator<Item = &Chunk> {
        self.utterances
            .iter()
            .flat_map(|(_, levels)| levels.iter().flatten())
            .chain(self.report.iter().flatten())
    }

    /// Every (transcript, report) pair of equal window, in build order.
    pub fn sim_pairs(&self) -> Vec<(&Chunk, &Chunk)> {
        let mut out = Vec::new();
        for (wi, rlevel) in self.report.iter().enumerate() {
            for (_, levels) in &self.utterances {
                for t in &levels[wi] {
                    for r in rlevel {
                        out.push((t, r));
                    }
                }
            }
        }
        out
    }
}

impl ParticipantChunks {
    /// Regroups a flat chunk inventory. Utterances keep the order of
    /// `utterances`; those without chunks are left out.
    pub fn from_chunks(
        participant_id: &str,
        utterances: &[Utterance],
        chunks: &[Chunk],
        windows: &[usize],
    ) -> Result<Self, GraphError> {
        check_windows(windows)?;
        let level_of = |w: usize| windows.iter().position(|&x| x == w);
        let mut by_origin: HashMap<String, Vec<Vec<Chunk>>> = HashMap::new();
        for c in chunks.iter().filter(|c| c.origin.participant_id() == participant_id) {
            let level = level_of(c.window).ok_or_else(|| GraphError::Chunk {
                participant: participant_id.to_string(),
                source: ChunkError::BadWindow(c.window),
            })?;
            by_origin
                .entry(c.origin.key())
                .or_insert_with(|| vec![Vec::new(); windows.len()])[level]
                .push(c.clone());
        }
        let complete = |levels: &Vec<Vec<Chunk>>| levels.iter().all(|l| !l.is_empty());
        let mut out_utts = Vec::new();
        for u in utterances {
            if let Some(levels) = by_origin.remove(&Origin::of_utterance(u).key()) {
                if !complete(&levels) {
                    return Err(GraphError::Incomplete(u.key()));
                }
                out_utts.push((u.clone(), levels));
            }
        }
        let report_key = Origin::Report {
            participant_id: participant_id.to_string(),
        }
        .key();
        let report = by_origin
            .remove(&report_key)
            .filter(complete)
            .ok_or_else(|| GraphError::Incomplete(report_key.clone()))?;
        if let Some(stray) = by_origin.keys().min() {
            return Err(GraphError::UnknownNode(stray.clone()));
        }
        if !out_utts.iter().any(|(u, _)| u.is_coded()) {
            return Err(GraphError::Empty(participant_id.to_string()));
        }
        Ok(Self {
            participant_id: participant_id.to_string(),
            utterances: out_utts,
            report,
        })
    }
}

pub fn chunk_participant(
    participant_id: &str,
    utterances: &[Utterance],
    report: &Report,
    options: &GraphOptions,
) -> Result<ParticipantChunks, GraphError> {
    check_windows(&options.windows)?;
    let wrap = |source| GraphError::Chunk {
        participant: participant_id.to_string(),
        source,
    };
    if !utterances.iter().any(Utterance::is_coded) {
        return Err(GraphError::Empty(participant_id.to_string()));
    }
    let mut out_utts = Vec::new();
    for u in utterances.iter().filter(|u| options.include_uncoded || u.is_coded()) {
        let tokens = u.tokens();
        if tokens.is_empty() {
            continue;
        }
        let levels = chunker::chunk_all(&tokens, &options.windows, &Origin::of_utterance(u)).map_err(wrap)?;
        out_utts.push((u.clone(), levels));
    }
    let report_levels =
        chunker::chunk_all(&report.tokens(), &options.windows, &Origin::of_report(report)).map_err(wrap)?;
    Ok(ParticipantChunks {
        participant_id: participant_id.to_string(),
        utterances: out_utts,
        report: report_levels,
    })
}

/// Chunks, scores and links one participant's material.
pub fn build_graph(
    participant_id: &str,
    utterances: &[Utterance],
    report: &Report,
    provider: &dyn SimilarityProvider,
    options: &GraphOptions,
) -> Result<SemanticGraph, GraphError> {
    let chunks = chunk_participant(participant_id, utterances, report, options)?;
    build_graph_from_chunks(&chunks, provider, options)
}

pub fn build_graph_from_chunks(
    chunks: &ParticipantChunks,
    provider: &dyn SimilarityProvider,
    options: &GraphOptions,
) -> Result<SemanticGraph, GraphError> {
    let pid = &chunks.participant_id;
    let mut g = SemanticGraph::empty(pid, options.windows.clone());

    let mut subtasks = BTreeSet::new();
    for (u, _) in &chunks.utterances {
        subtasks.extend(u.subtask_codes.iter().cloned());
    }
    for s in &subtasks {
        g.add_node(subtask_node_id(s), Layer::Subtask, None)?;
    }

    let top = options.windows.len() - 1;
    for (u, levels) in &chunks.utterances {
        let uid = utterance_node_id(u);
        g.add_node(uid.clone(), Layer::Utterance, None)?;
        for s in &u.subtask_codes {
            g.add_edge(&subtask_node_id(s), &uid, EdgeKind::Hier, 1.0)?;
        }
        g.add_chunk_levels(levels, Layer::Transcript)?;
        for c in &levels[top] {
            g.add_edge(&uid, &c.chunk_id, EdgeKind::Hier, 1.0)?;
        }
    }
    g.add_chunk_levels(&chunks.report, Layer::Report)?;

    let pairs = chunks.sim_pairs();
    let scores = simprovider::score_pairs(provider, &pairs).map_err(|source| GraphError::Provider {
        participant: pid.clone(),
        source,
    })?;
    for s in scores {
        if options.score_floor.is_some_and(|f| s.score < f) {
            continue;
        }
        g.add_edge(&s.left, &s.right, EdgeKind::Sim, s.score)?;
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditViolation {
    pub src: String,
    pub dst: String,
    pub message: String,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    format_version: u32,
    participant_id: String,
    windows: Vec<usize>,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

impl SemanticGraph {
    pub fn empty(participant_id: &str, windows: Vec<usize>) -> Self {
        Self {
            participant_id: participant_id.to_string(),
            windows,
            nodes: Vec::new(),
            index: HashMap::new(),
            word_sets: Vec::new(),
            edges: Vec::new(),
            out: Vec::new(),
            inc: Vec::new(),
            sim: Vec::new(),
        }
    }

    pub fn add_node(&mut self, id: String, layer: Layer, chunk: Option<ChunkPayload>) -> Result<usize, GraphError> {
        if self.index.contains_key(&id) {
            return Err(GraphError::DuplicateNode(id));
        }
        let ix = self.nodes.len();
        self.word_sets
            .push(chunk.as_ref().map(|c| text::word_set(&text::tokenize(&c.text))));
        self.index.insert(id.clone(), ix);
        self.nodes.push(Node { id, layer, chunk });
        self.out.push(Vec::new());
        self.inc.push(Vec::new());
        self.sim.push(Vec::new());
        Ok(ix)
    }

    fn add_chunk_levels(&mut self, levels: &[Vec<Chunk>], layer: fn(usize) -> Layer) -> Result<(), GraphError> {
        for level in levels.iter().rev() {
            for c in level {
                let ix = self.add_node(
                    c.chunk_id.clone(),
                    layer(c.window),
                    Some(ChunkPayload {
                        start_index: c.start_index,
                        word_count: c.word_count,
                        text: c.text.clone(),
                    }),
                )?;
                self.word_sets[ix] = Some(c.word_set.clone());
            }
        }
        let edges = chunker::build_hierarchy(levels).map_err(|source| GraphError::Chunk {
            participant: self.participant_id.clone(),
            source,
        })?;
        for e in edges {
            self.add_edge(&e.parent, &e.child, EdgeKind::Hier, e.weight)?;
        }
        Ok(())
    }

    pub fn add_edge(&mut self, src: &str, dst: &str, kind: EdgeKind, value: f64) -> Result<(), GraphError> {
        let a = self.ix(src)?;
        let b = self.ix(dst)?;
        match kind {
            EdgeKind::Hier => {
                self.out[a].push((b, value));
                self.inc[b].push((a, value));
            }
            EdgeKind::Sim => {
                self.sim[a].push((b, value));
                self.sim[b].push((a, value));
            }
        }
        self.edges.push(Edge {
            src: src.to_string(),
            dst: dst.to_string(),
            kind,
            value,
        });
        Ok(())
    }

    pub fn participant_id(&self) -> &str {
        &self.participant_id
    }

    pub fn windows(&self) -> &[usize] {
        &self.windows
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn ix(&self, id: &str) -> Result<usize, GraphError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| GraphError::UnknownNode(id.to_string()))
    }

    pub fn node(&self, ix: usize) -> &Node {
        &self.nodes[ix]
    }

    pub fn word_set(&self, ix: usize) -> Option<&BTreeSet<String>> {
        self.word_sets[ix].as_ref()
    }

    /// Node indices of one layer, in insertion order.
    pub fn layer(&self, layer: Layer) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].layer == layer)
            .collect()
    }

    pub fn layer_count(&self, layer: Layer) -> usize {
        self.nodes.iter().filter(|n| n.layer == layer).count()
    }

    /// Hierarchy children with edge weights.
    pub fn out_edges(&self, ix: usize) -> &[(usize, f64)] {
        &self.out[ix]
    }

    pub fn in_edges(&self, ix: usize) -> &[(usize, f64)] {
        &self.inc[ix]
    }

    pub fn sim_edges(&self, ix: usize) -> &[(usize, f64)] {
        &self.sim[ix]
    }

    pub fn children(&self, id: &str) -> Result<Vec<&str>, GraphError> {
        Ok(self.out[self.ix(id)?]
            .iter()
            .map(|&(c, _)| self.nodes[c].id.as_str())
            .collect())
    }

    pub fn parents(&self, id: &str) -> Result<Vec<&str>, GraphError> {
        Ok(self.inc[self.ix(id)?]
            .iter()
            .map(|&(p, _)| self.nodes[p].id.as_str())
            .collect())
    }

    pub fn sim_neighbors(&self, id: &str) -> Result<Vec<&str>, GraphError> {
        Ok(self.sim[self.ix(id)?]
            .iter()
            .map(|&(n, _)| self.nodes[n].id.as_str())
            .collect())
    }

    pub fn sim_edge_count(&self) -> usize {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Sim).count()
    }

    /// Checks that every edge joins an allowed pair of layers.
    pub fn audit(&self) -> Vec<AuditViolation> {
        let top = *self.windows.last().unwrap_or(&0);
        let next_smaller = |w: usize| self.windows.iter().rev().find(|&&x| x < w).copied();
        self.edges
            .iter()
            .filter_map(|e| {
                let (a, b) = match (self.index.get(&e.src), self.index.get(&e.dst)) {
                    (Some(&a), Some(&b)) => (self.nodes[a].layer, self.nodes[b].layer),
                    _ => {
                        return Some(AuditViolation {
                            src: e.src.clone(),
                            dst: e.dst.clone(),
                            message: "edge endpoint missing".into(),
                        })
                    }
                };
                let ok = match (e.kind, a, b) {
                    (EdgeKind::Hier, Layer::Subtask, Layer::Utterance) => true,
                    (EdgeKind::Hier, Layer::Utterance, Layer::Transcript(w)) => w == top,
                    (EdgeKind::Hier, Layer::Transcript(p), Layer::Transcript(c))
                    | (EdgeKind::Hier, Layer::Report(p), Layer::Report(c)) => next_smaller(p) == Some(c),
                    (EdgeKind::Sim, Layer::Transcript(t), Layer::Report(r)) => t == r,
                    _ => false,
                };
                let in_range = match e.kind {
                    EdgeKind::Hier => e.value > 0.0 && e.value <= 1.0,
                    EdgeKind::Sim => (0.0..=1.0).contains(&e.value),
                };
                if ok && in_range {
                    None
                } else {
                    Some(AuditViolation {
                        src: e.src.clone(),
                        dst: e.dst.clone(),
                        message: format!("{:?} edge {a} -> {b} with value {}", e.kind, e.value),
                    })
                }
            })
            .collect()
    }

    /// Finest-window report chunks reachable from a report node, in graph order.
    pub fn finest_descendants(&self, ix: usize) -> Vec<usize> {
        let finest = self.windows[0];
        let mut seen = BTreeSet::new();
        let mut stack = vec![ix];
        while let Some(n) = stack.pop() {
            if self.nodes[n].layer.window() == Some(finest) {
                seen.insert(n);
                continue;
            }
            stack.extend(self.out[n].iter().map(|&(c, _)| c));
        }
        seen.into_iter().collect()
    }

    pub fn to_json(&self) -> String {
        let file = GraphFile {
            format_version: GRAPH_FORMAT_VERSION,
            participant_id: self.participant_id.clone(),
            windows: self.windows.clone(),
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("graph serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, GraphError> {
        let file: GraphFile = serde_json::from_str(s)?;
        if file.format_version != GRAPH_FORMAT_VERSION {
            return Err(GraphError::Version(file.format_version));
        }
        let mut g = Self::empty(&file.participant_id, file.windows);
        for n in file.nodes {
            g.add_node(n.id, n.layer, n.chunk)?;
        }
        for e in file.edges {
            g.add_edge(&e.src, &e.dst, e.kind, e.value)?;
        }
        Ok(g)
    }

    pub fn write_nodes_csv<W: Write>(&self, sink: W) -> Result<(), GraphError> {
        let mut w = table::versioned_writer(sink, &["node_id", "layer"])?;
        for n in &self.nodes {
            w.write_record([n.id.as_str(), &n.layer.to_string()])
                .map_err(TableError::from)?;
        }
        w.flush().map_err(TableError::from)?;
        Ok(())
    }

    pub fn write_edges_csv<W: Write>(&self, sink: W) -> Result<(), GraphError> {
        let mut w = table::versioned_writer(sink, &["src", "dst", "kind", "weight_or_score"])?;
        for e in &self.edges {
            let kind = match e.kind {
                EdgeKind::Hier => "hier",
                EdgeKind::Sim => "sim",
            };
            w.write_record([e.src.as_str(), &e.dst, kind, &e.value.to_string()])
                .map_err(TableError::from)?;
        }
        w.flush().map_err(TableError::from)?;
        Ok(())
    }

    /// Layer sizes, for logs and audit output.
    pub fn layer_sizes(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for n in &self.nodes {
            *m.entry(n.layer.to_string()).or_insert(0) += 1;
        }
        m
    }
}

impl PartialEq for SemanticGraph {
    fn eq(&self, other: &Self) -> bool {
        self.participant_id == other.participant_id
            && self.windows == other.windows
            && self.nodes == other.nodes
            && self.edges == other.edges
    }
}
