//! Loads the frozen two-level propagation trace and rebuilds its graph.

use std::collections::BTreeMap;

use collabtrace_core::chunker::word_share;
use collabtrace_core::semgraph::{ChunkPayload, EdgeKind, Layer, SemanticGraph};
use collabtrace_core::text;
use nalgebra::DMatrix;
use serde::Deserialize;

#[derive(Deserialize)]
pub struct Fixture {
    pub epsilon: f64,
    pub k_max: usize,
    pub words: BTreeMap<String, Vec<String>>,
    pub transcript_children: BTreeMap<String, Vec<String>>,
    pub report_children: BTreeMap<String, Vec<String>>,
    pub layers: BTreeMap<String, Vec<String>>,
    pub sim20: Vec<(String, String, f64)>,
    pub sim50: Vec<(String, String, f64)>,
    pub sim100: Vec<(String, String, f64)>,
    pub expected: Expected,
}

#[derive(Deserialize)]
pub struct Expected {
    pub level50_relations: Vec<Relation>,
    pub level50_matrix: Dense,
    pub level100_relations: Vec<Relation>,
    pub level100_matrix: Dense,
    pub subtask_median: f64,
}

#[derive(Deserialize)]
pub struct Relation {
    pub parent_t: String,
    pub parent_r: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub col_weights: Vec<f64>,
    pub row_weights: Vec<f64>,
    pub parent_score: f64,
    pub sim: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub normalized_weights: Vec<Vec<f64>>,
    pub iterations: usize,
    pub weighted: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    pub v_adj: Vec<f64>,
}

#[derive(Deserialize)]
pub struct Dense {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

pub fn load() -> Fixture {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/propagation_trace.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn dense(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

/// Builds the fixture graph with one subtask `X` over one utterance whose
/// top chunk is the fixture's only 100w transcript chunk.
pub fn graph(f: &Fixture) -> SemanticGraph {
    let mut g = SemanticGraph::empty("P1", vec![20, 50, 100]);
    g.add_node("S/X".into(), Layer::Subtask, None).unwrap();
    g.add_node("U/P1/1r".into(), Layer::Utterance, None).unwrap();
    g.add_edge("S/X", "U/P1/1r", EdgeKind::Hier, 1.0).unwrap();
    let layer_of = |name: &str| -> Layer {
        let w: usize = name[1..].parse().unwrap();
        if name.starts_with('t') {
            Layer::Transcript(w)
        } else {
            Layer::Report(w)
        }
    };
    for name in ["t100", "t50", "t20", "r100", "r50", "r20"] {
        for id in &f.layers[name] {
            let words = &f.words[id];
            g.add_node(
                id.clone(),
                layer_of(name),
                Some(ChunkPayload {
                    start_index: 0,
                    word_count: words.len(),
                    text: words.join(" "),
                }),
            )
            .unwrap();
        }
    }
    for id in &f.layers["t100"] {
        g.add_edge("U/P1/1r", id, EdgeKind::Hier, 1.0).unwrap();
    }
    let set = |id: &str| text::word_set(&text::tokenize(&f.words[id].join(" ")));
    for children in [&f.transcript_children, &f.report_children] {
        for (p, cs) in children {
            for c in cs {
                g.add_edge(p, c, EdgeKind::Hier, word_share(&set(p), &set(c))).unwrap();
            }
        }
    }
    for (t, r, s) in f.sim20.iter().chain(&f.sim50).chain(&f.sim100) {
        g.add_edge(t, r, EdgeKind::Sim, *s).unwrap();
    }
    g
}
