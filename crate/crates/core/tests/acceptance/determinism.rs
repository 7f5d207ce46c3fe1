use std::fs;

use collabtrace_core::pipeline;

use crate::fixture::scratch;

const COMPARED: [&str; 8] = [
    "manifest.json",
    "propagate/subtask_scores.csv",
    "propagate/convergence.csv",
    "metrics/utterances.csv",
    "metrics/turns.csv",
    "metrics/participant_subtask.csv",
    "metrics/composite.json",
    "export/metric_table.csv",
];

pub fn check() -> Result<String, String> {
    let a = scratch("toy");
    let b = scratch("toy");
    let out_a = pipeline::run(&a.path().join("config.toml"), 1).map_err(|e| e.to_string())?;
    let out_b = pipeline::run(&b.path().join("config.toml"), 4).map_err(|e| e.to_string())?;
    let participants: Vec<String> =
        serde_json::from_slice(&fs::read(out_a.join("graph/participants.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    ensure!(
        participants.len() == 2,
        "fixture has {} participants",
        participants.len()
    );
    for rel in COMPARED {
        let x = fs::read(out_a.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        let y = fs::read(out_b.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        ensure!(x == y, "{rel} differs between runs");
    }
    let manifest = fs::read_to_string(out_a.join("manifest.json")).map_err(|e| e.to_string())?;
    let n_artifacts = manifest.matches("\"sha256\"").count();
    Ok(format!(
        "2 runs (1 and 4 workers), manifest and {} tables byte-identical, {n_artifacts} digests",
        COMPARED.len() - 1
    ))
}
