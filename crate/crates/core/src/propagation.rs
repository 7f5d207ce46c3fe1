//! Similarity propagation from the finest chunk pairs up to subtask scores.
//!
//! At each level a transcript chunk and a report chunk joined by a
//! similarity edge form one relation. The relation's matrix has one column
//! per transcript child (one window smaller) and one row per finest-window
//! report descendant. Weights are the pairwise sums of the word-share weights on
//! both sides, balanced by alternating row and column scaling; the weighted
//! child similarities are summed across each row and averaged with the
//! parent pair's own score. Results over all relations of one transcript
//! chunk are summed per report row, giving one column of the level matrix.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::word_share;
use crate::semgraph::{GraphError, Layer, SemanticGraph};
use crate::stats;

#[derive(Debug, Error)]
pub enum PropagationError {
    #[error("matrix has an all-zero {axis} at index {index}")]
    Degenerate { axis: &'static str, index: usize },
    #[error("matrix has a negative or non-finite entry at ({0}, {1})")]
    BadEntry(usize, usize),
    #[error("k_max must be at least 1 and epsilon positive")]
    BadParams,
    #[error("{0}")]
    Structural(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChildInputs {
    /// Child similarities above the first level come from the previous
    /// level's matrix.
    #[default]
    Aggregated,
    /// Child similarities are the mean raw finest-window score between the
    /// child's finest descendants and the report row.
    StrictRaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub k_max: usize,
    pub epsilon: f64,
    pub child_inputs: ChildInputs,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            k_max: 1000,
            epsilon: 1e-9,
            child_inputs: ChildInputs::Aggregated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornReport {
    pub iterations: usize,
    pub converged: bool,
    /// Largest element-wise change in the final iteration.
    pub max_change: f64,
}

/// Alternately divides each row by its sum and each column by its sum (both
/// sums offset by `epsilon`) until no entry moves by `epsilon` or more in an
/// iteration, or `k_max` iterations have run.
pub fn sinkhorn_knopp(
    w: &DMatrix<f64>,
    k_max: usize,
    epsilon: f64,
) -> Result<(DMatrix<f64>, SinkhornReport), PropagationError> {
    if k_max == 0 || !(epsilon > 0.0) {
        return Err(PropagationError::BadParams);
    }
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            let x = w[(i, j)];
            if !(x >= 0.0 && x.is_finite()) {
                return Err(PropagationError::BadEntry(i, j));
            }
        }
    }
    for (i, r) in w.row_iter().enumerate() {
        if r.iter().all(|&x| x == 0.0) {
            return Err(PropagationError::Degenerate { axis: "row", index: i });
        }
    }
    for (j, c) in w.column_iter().enumerate() {
        if c.iter().all(|&x| x == 0.0) {
            return Err(PropagationError::Degenerate {
                axis: "column",
                index: j,
            });
        }
    }

    let mut cur = w.clone();
    let mut report = SinkhornReport {
        iterations: 0,
        converged: false,
        max_change: f64::INFINITY,
    };
    for k in 1..=k_max {
        let old = cur.clone();
        for mut row in cur.row_iter_mut() {
            let s = row.sum() + epsilon;
            row /= s;
        }
        for mut col in cur.column_iter_mut() {
            let s = col.sum() + epsilon;
            col /= s;
        }
        let change = (&cur - &old).abs().max();
        report.iterations = k;
        report.max_change = change;
        if change < epsilon {
            report.converged = true;
            break;
        }
    }
    Ok((cur, report))
}

/// Inputs to one relation: child similarities, pairwise-summed weights and
/// the parent pair's score.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrices {
    /// rows: report rows, columns: transcript children
    pub sim: DMatrix<f64>,
    pub weights: DMatrix<f64>,
    pub parent_score: f64,
}

impl RelationMatrices {
    /// `weights[i][j] = row_weights[i] + col_weights[j]`.
    pub fn new(sim: DMatrix<f64>, row_weights: &[f64], col_weights: &[f64], parent_score: f64) -> Self {
        let weights = DMatrix::from_fn(row_weights.len(), col_weights.len(), |i, j| {
            row_weights[i] + col_weights[j]
        });
        Self {
            sim,
            weights,
            parent_score,
        }
    }
}

/// Every intermediate of one relation.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationTrace {
    pub parent_t: String,
    pub parent_r: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub row_weights: Vec<f64>,
    pub col_weights: Vec<f64>,
    pub matrices: RelationMatrices,
    pub normalized_weights: DMatrix<f64>,
    pub sinkhorn: SinkhornReport,
    pub weighted: DMatrix<f64>,
    pub v: Vec<f64>,
    pub v_adj: Vec<f64>,
}

/// Balances the weights, weights the similarities, sums rows and averages
/// with the parent score.
pub fn evaluate_relation(
    m: &RelationMatrices,
    k_max: usize,
    epsilon: f64,
) -> Result<(DMatrix<f64>, SinkhornReport, DMatrix<f64>, Vec<f64>, Vec<f64>), PropagationError> {
    let (wn, report) = sinkhorn_knopp(&m.weights, k_max, epsilon)?;
    let weighted = wn.component_mul(&m.sim);
    let v: Vec<f64> = weighted.row_iter().map(|r| r.sum()).collect();
    let v_adj = v.iter().map(|x| (x + m.parent_score) / 2.0).collect();
    Ok((wn, report, weighted, v, v_adj))
}

/// One relation between transcript node `t` and report node `r`.
/// `child_sim(row, col)` gives the similarity between a finest report row
/// and a transcript child, both as graph indices.
pub fn aggregate_relation(
    g: &SemanticGraph,
    t: usize,
    r: usize,
    parent_score: f64,
    child_sim: &dyn Fn(usize, usize) -> f64,
    config: &PropagationConfig,
) -> Result<RelationTrace, PropagationError> {
    let cols: Vec<(usize, f64)> = g.out_edges(t).to_vec();
    if cols.is_empty() {
        return Err(PropagationError::Structural(format!(
            "transcript chunk {} has no children",
            g.node(t).id
        )));
    }
    let rows = g.finest_descendants(r);
    if rows.is_empty() {
        return Err(PropagationError::Structural(format!(
            "report chunk {} has no finest-window descendants",
            g.node(r).id
        )));
    }
    let parent_words = g
        .word_set(r)
        .ok_or_else(|| PropagationError::Structural(format!("{} is not a chunk", g.node(r).id)))?;
    let row_weights: Vec<f64> = rows
        .iter()
        .map(|&i| word_share(parent_words, g.word_set(i).expect("finest nodes are chunks")))
        .collect();
    let col_weights: Vec<f64> = cols.iter().map(|&(_, w)| w).collect();
    let sim = DMatrix::from_fn(rows.len(), cols.len(), |i, j| child_sim(rows[i], cols[j].0));
    let matrices = RelationMatrices::new(sim, &row_weights, &col_weights, parent_score);
    let (normalized_weights, sinkhorn, weighted, v, v_adj) = evaluate_relation(&matrices, config.k_max, config.epsilon)
        .map_err(|e| match e {
            PropagationError::Degenerate { axis, index } => PropagationError::Structural(format!(
                "relation {} / {}: all-zero weight {axis} {index}",
                g.node(t).id,
                g.node(r).id
            )),
            other => other,
        })?;
    Ok(RelationTrace {
        parent_t: g.node(t).id.clone(),
        parent_r: g.node(r).id.clone(),
        rows: rows.iter().map(|&i| g.node(i).id.clone()).collect(),
        cols: cols.iter().map(|&(i, _)| g.node(i).id.clone()).collect(),
        row_weights,
        col_weights,
        matrices,
        normalized_weights,
        sinkhorn,
        weighted,
        v,
        v_adj,
    })
}

/// Rows are every finest-window report chunk; columns are the transcript
/// chunks of one window. Entries a column never reached are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMatrix {
    pub window: usize,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// Per column, row index to value.
    pub values: Vec<BTreeMap<usize, f64>>,
}

impl LevelMatrix {
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.values[col].get(&row).copied()
    }

    pub fn col_index(&self, id: &str) -> Option<usize> {
        self.cols.iter().position(|c| c == id)
    }

    pub fn row_index(&self, id: &str) -> Option<usize> {
        self.rows.iter().position(|c| c == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub window: usize,
    pub parent_t: String,
    pub parent_r: String,
    pub rows: usize,
    pub cols: usize,
    pub iterations: usize,
    pub converged: bool,
    pub max_change: f64,
}

struct Lookup {
    raw: HashMap<(usize, usize), f64>,
    /// graph index of each finest report node to its row in level matrices
    row_of: HashMap<usize, usize>,
}

fn lookup(g: &SemanticGraph) -> Lookup {
    let finest = g.windows()[0];
    let mut raw = HashMap::new();
    for t in g.layer(Layer::Transcript(finest)) {
        for &(r, s) in g.sim_edges(t) {
            raw.insert((t, r), s);
        }
    }
    let row_of = g
        .layer(Layer::Report(finest))
        .into_iter()
        .enumerate()
        .map(|(i, ix)| (ix, i))
        .collect();
    Lookup { raw, row_of }
}

/// Computes the level matrix at `g.windows()[level]` (level ≥ 1), calling
/// `on_relation` with the full trace of every relation.
pub fn aggregate_level_with(
    g: &SemanticGraph,
    level: usize,
    previous: Option<&LevelMatrix>,
    config: &PropagationConfig,
    on_relation: &mut dyn FnMut(&RelationTrace),
) -> Result<LevelMatrix, PropagationError> {
    let windows = g.windows();
    if level == 0 || level >= windows.len() {
        return Err(PropagationError::Structural(format!(
            "no level {level} for windows {windows:?}"
        )));
    }
    let window = windows[level];
    let lk = lookup(g);
    let finest_rows = g.layer(Layer::Report(windows[0]));
    let raw = |row: usize, col: usize| lk.raw.get(&(col, row)).copied().unwrap_or(0.0);

    let prev_col: HashMap<usize, usize> = match previous {
        Some(p) => g
            .layer(Layer::Transcript(windows[level - 1]))
            .into_iter()
            .filter_map(|ix| p.col_index(&g.node(ix).id).map(|c| (ix, c)))
            .collect(),
        None => HashMap::new(),
    };
    if level >= 2 && config.child_inputs == ChildInputs::Aggregated && previous.is_none() {
        return Err(PropagationError::Structural(format!(
            "level {level} needs the previous level matrix"
        )));
    }
    let strict_cache: HashMap<usize, Vec<usize>> = if level >= 2 && config.child_inputs == ChildInputs::StrictRaw {
        g.layer(Layer::Transcript(windows[level - 1]))
            .into_iter()
            .map(|ix| (ix, g.finest_descendants(ix)))
            .collect()
    } else {
        HashMap::new()
    };

    let child_sim = |row: usize, col: usize| -> f64 {
        if level == 1 {
            return raw(row, col);
        }
        match config.child_inputs {
            ChildInputs::Aggregated => {
                let p = previous.expect("checked above");
                match (prev_col.get(&col), lk.row_of.get(&row)) {
                    (Some(&c), Some(&r)) => p.get(r, c).unwrap_or(0.0),
                    _ => 0.0,
                }
            }
            ChildInputs::StrictRaw => {
                let leaves = &strict_cache[&col];
                leaves.iter().map(|&c| raw(row, c)).sum::<f64>() / leaves.len() as f64
            }
        }
    };

    let cols = g.layer(Layer::Transcript(window));
    let mut values = Vec::with_capacity(cols.len());
    for &t in &cols {
        let mut column: BTreeMap<usize, f64> = BTreeMap::new();
        for &(r, score) in g.sim_edges(t) {
            let trace = aggregate_relation(g, t, r, score, &child_sim, config)?;
            let rows = g.finest_descendants(r);
            for (ix, v) in rows.iter().zip(&trace.v_adj) {
                *column.entry(lk.row_of[ix]).or_insert(0.0) += v;
            }
            on_relation(&trace);
        }
        values.push(column);
    }
    Ok(LevelMatrix {
        window,
        rows: finest_rows.iter().map(|&i| g.node(i).id.clone()).collect(),
        cols: cols.iter().map(|&i| g.node(i).id.clone()).collect(),
        values,
    })
}

pub fn aggregate_level(
    g: &SemanticGraph,
    level: usize,
    previous: Option<&LevelMatrix>,
    config: &PropagationConfig,
) -> Result<(LevelMatrix, Vec<ConvergenceRecord>), PropagationError> {
    let mut records = Vec::new();
    let window = g.windows().get(level).copied().unwrap_or(0);
    let m = aggregate_level_with(g, level, previous, config, &mut |t| {
        records.push(ConvergenceRecord {
            window,
            parent_t: t.parent_t.clone(),
            parent_r: t.parent_r.clone(),
            rows: t.rows.len(),
            cols: t.cols.len(),
            iterations: t.sinkhorn.iterations,
            converged: t.sinkhorn.converged,
            max_change: t.sinkhorn.max_change,
        })
    })?;
    Ok((m, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Propagation {
    /// One matrix per window above the finest.
    pub levels: Vec<LevelMatrix>,
    pub diagnostics: Vec<ConvergenceRecord>,
}

impl Propagation {
    pub fn top(&self) -> &LevelMatrix {
        self.levels.last().expect("at least one level")
    }
}

pub fn propagate(g: &SemanticGraph, config: &PropagationConfig) -> Result<Propagation, PropagationError> {
    let mut levels: Vec<LevelMatrix> = Vec::new();
    let mut diagnostics = Vec::new();
    for level in 1..g.windows().len() {
        let (m, d) = aggregate_level(g, level, levels.last(), config)?;
        levels.push(m);
        diagnostics.extend(d);
    }
    Ok(Propagation { levels, diagnostics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskSimilarity {
    pub participant_id: String,
    pub subtask_id: String,
    pub raw_score: f64,
    pub normalized_score: Option<f64>,
    /// Top-window transcript chunks under the subtask's utterances.
    pub n_chunks: usize,
    pub n_utterances: usize,
}

/// Median of the top-level entries in the columns that descend from each
/// subtask's coded utterances. Subtasks whose columns hold no entries are
/// left out.
pub fn subtask_scores(g: &SemanticGraph, top: &LevelMatrix) -> Result<Vec<SubtaskSimilarity>, PropagationError> {
    subtask_scores_by(g, top, &|v| stats::median(v))
}

/// As [`subtask_scores`] with a replaceable reduction.
pub fn subtask_scores_by(
    g: &SemanticGraph,
    top: &LevelMatrix,
    reduce: &dyn Fn(&[f64]) -> Option<f64>,
) -> Result<Vec<SubtaskSimilarity>, PropagationError> {
    let mut out = Vec::new();
    for s in g.layer(Layer::Subtask) {
        let utterances: Vec<usize> = g.out_edges(s).iter().map(|&(u, _)| u).collect();
        let mut cols: Vec<usize> = Vec::new();
        for &u in &utterances {
            for &(c, _) in g.out_edges(u) {
                if let Some(ci) = top.col_index(&g.node(c).id) {
                    if !cols.contains(&ci) {
                        cols.push(ci);
                    }
                }
            }
        }
        let entries: Vec<f64> = cols.iter().flat_map(|&c| top.values[c].values().copied()).collect();
        let id = g.node(s).id.strip_prefix("S/").unwrap_or(&g.node(s).id).to_string();
        match reduce(&entries) {
            Some(raw_score) => out.push(SubtaskSimilarity {
                participant_id: g.participant_id().to_string(),
                subtask_id: id,
                raw_score,
                normalized_score: None,
                n_chunks: cols.len(),
                n_utterances: utterances.len(),
            }),
            None => log::debug!("{}: subtask {id} has no propagated entries", g.participant_id()),
        }
    }
    Ok(out)
}

pub fn sigmoid(x: f64, center: f64, steepness: f64) -> f64 {
    1.0 / (1.0 + (-steepness * (x - center)).exp())
}

/// Median-centred logistic transform over the pooled raw scores.
pub fn normalize_scores(raw: &[f64], steepness: f64) -> Vec<f64> {
    match stats::median(raw) {
        Some(m) => raw.iter().map(|&x| sigmoid(x, m, steepness)).collect(),
        None => Vec::new(),
    }
}

/// Fills `normalized_score` across every participant's rows at once.
pub fn normalize_all(rows: &mut [SubtaskSimilarity], steepness: f64) {
    let raw: Vec<f64> = rows.iter().map(|r| r.raw_score).collect();
    for (r, n) in rows.iter_mut().zip(normalize_scores(&raw, steepness)) {
        r.normalized_score = Some(n);
    }
}
