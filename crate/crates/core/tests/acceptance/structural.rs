use std::fs::File;

use collabtrace_core::corpus::{by_participant, load_transcript, pair_turns};
use collabtrace_core::decomposition::load_decomposition;

use crate::fixture::fixtures;

pub fn check() -> Result<String, String> {
    let dir = fixtures().join("study");
    let d = load_decomposition(File::open(dir.join("decomposition.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure!(d.validate().is_valid(), "study decomposition is invalid");
    let (nodes, leaves, phases) = (d.len(), d.leaves().count(), d.phases().count());
    ensure!(nodes == 116, "{nodes} subtasks, expected 116");
    ensure!(leaves == 96, "{leaves} leaves, expected 96");
    ensure!(phases == 6, "{phases} level-1 phases, expected 6");

    let utterances = load_transcript(File::open(dir.join("transcripts.csv")).map_err(|e| e.to_string())?, &d)
        .map_err(|e| e.to_string())?;
    let n_utterances = utterances.len();
    let by_pid = by_participant(utterances);
    let mut turns = 0;
    for us in by_pid.values() {
        turns += pair_turns(us).map_err(|e| e.to_string())?.len();
    }
    ensure!(turns == 1168, "{turns} turns, expected 1168");
    ensure!(n_utterances == 2336, "{n_utterances} utterances, expected 2336");
    Ok(format!(
        "{nodes} subtasks, {leaves} leaves, {phases} phases; {} participants, {turns} turns, {n_utterances} utterances",
        by_pid.len()
    ))
}
