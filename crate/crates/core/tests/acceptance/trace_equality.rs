use collabtrace_core::propagation::{
    aggregate_level_with, propagate, subtask_scores, LevelMatrix, PropagationConfig, RelationTrace,
};
use nalgebra::DMatrix;

use crate::trace::{self, Dense, Relation};

const TOL: f64 = 1e-9;

fn vec_eq(label: &str, got: &[f64], want: &[f64]) -> Result<(), String> {
    ensure!(
        got.len() == want.len(),
        "{label}: length {} vs {}",
        got.len(),
        want.len()
    );
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        ensure!((g - w).abs() <= TOL, "{label}[{i}]: {g} vs {w}");
    }
    Ok(())
}

fn mat_eq(label: &str, got: &DMatrix<f64>, want: &[Vec<f64>]) -> Result<(), String> {
    let want = trace::dense(want);
    ensure!(
        got.shape() == want.shape(),
        "{label}: shape {:?} vs {:?}",
        got.shape(),
        want.shape()
    );
    let diff = (got - &want).abs().max();
    ensure!(diff <= TOL, "{label}: max diff {diff:e}");
    Ok(())
}

fn relation_eq(got: &RelationTrace, want: &Relation) -> Result<(), String> {
    let id = format!("{}/{}", want.parent_t, want.parent_r);
    ensure!(
        got.rows == want.rows && got.cols == want.cols,
        "{id}: row/column ids differ"
    );
    vec_eq(&format!("{id} column weights"), &got.col_weights, &want.col_weights)?;
    vec_eq(&format!("{id} row weights"), &got.row_weights, &want.row_weights)?;
    ensure!(got.matrices.parent_score == want.parent_score, "{id}: parent score");
    mat_eq(&format!("{id} S"), &got.matrices.sim, &want.sim)?;
    mat_eq(&format!("{id} W"), &got.matrices.weights, &want.weights)?;
    mat_eq(
        &format!("{id} W_norm"),
        &got.normalized_weights,
        &want.normalized_weights,
    )?;
    ensure!(got.sinkhorn.iterations == want.iterations, "{id}: iterations");
    mat_eq(&format!("{id} S'"), &got.weighted, &want.weighted)?;
    vec_eq(&format!("{id} v"), &got.v, &want.v)?;
    vec_eq(&format!("{id} v_adj"), &got.v_adj, &want.v_adj)
}

fn level_eq(label: &str, got: &LevelMatrix, want: &Dense) -> Result<(), String> {
    ensure!(got.rows == want.rows && got.cols == want.cols, "{label}: ids differ");
    for (i, row) in want.values.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            match (got.get(i, j), w) {
                (Some(g), Some(w)) => ensure!((g - w).abs() <= TOL, "{label} ({i},{j}): {g} vs {w}"),
                (None, None) => {}
                (g, w) => return Err(format!("{label} ({i},{j}): {g:?} vs {w:?}")),
            }
        }
    }
    Ok(())
}

pub fn check() -> Result<String, String> {
    let f = trace::load();
    let g = trace::graph(&f);
    let cfg = PropagationConfig {
        k_max: f.k_max,
        epsilon: f.epsilon,
        ..PropagationConfig::default()
    };
    let mut first_traces = Vec::new();
    let first =
        aggregate_level_with(&g, 1, None, &cfg, &mut |t| first_traces.push(t.clone())).map_err(|e| e.to_string())?;
    ensure!(
        first_traces.len() == f.expected.level50_relations.len(),
        "level 1 relation count"
    );
    for (got, want) in first_traces.iter().zip(&f.expected.level50_relations) {
        relation_eq(got, want)?;
    }
    let shape = first_traces[0].matrices.sim.shape();
    ensure!(
        shape == (5, 4),
        "first relation child matrix is {shape:?}, expected 4 children by 5 rows"
    );
    level_eq("level 1", &first, &f.expected.level50_matrix)?;

    let mut second_traces = Vec::new();
    let second = aggregate_level_with(&g, 2, Some(&first), &cfg, &mut |t| second_traces.push(t.clone()))
        .map_err(|e| e.to_string())?;
    ensure!(
        second_traces.len() == f.expected.level100_relations.len(),
        "level 2 relation count"
    );
    for (got, want) in second_traces.iter().zip(&f.expected.level100_relations) {
        relation_eq(got, want)?;
    }
    level_eq("level 2", &second, &f.expected.level100_matrix)?;

    let p = propagate(&g, &cfg).map_err(|e| e.to_string())?;
    level_eq("final", p.top(), &f.expected.level100_matrix)?;
    let s = subtask_scores(&g, p.top()).map_err(|e| e.to_string())?;
    ensure!(
        (s[0].raw_score - f.expected.subtask_median).abs() <= TOL,
        "subtask median {}",
        s[0].raw_score
    );
    Ok(format!(
        "{} relations checked at every intermediate to 1e-9",
        first_traces.len() + second_traces.len()
    ))
}
