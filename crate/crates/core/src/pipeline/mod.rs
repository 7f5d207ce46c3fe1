//! Staged end-to-end run. Every stage reads only the configuration and the
//! artifacts of earlier stages, and writes plain files under its own
//! directory of the output root.
//!
//! ```text
//! validate   normalized decomposition, transcripts, reports, grades, stop words
//! chunk      chunk inventory and per-participant counts
//! score      similarity score table for every same-window chunk pair
//! graph      per-participant graph (JSON, node and edge tables), audit
//! propagate  subtask similarity scores, convergence log, level matrices
//! metrics    per-utterance, per-turn and per participant-subtask tables
//! export     participant-subtask table joined with grade reductions
//! ```

pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chunker::{self, Chunk};
use crate::corpus::{self, Report, TurnRecord, Utterance};
use crate::decomposition::{self, Decomposition};
use crate::metrics::{self, ParticipantTraversal, UsageInput};
use crate::propagation::{self, SubtaskSimilarity};
use crate::semgraph::{self, GraphError, ParticipantChunks, SemanticGraph};
use crate::simprovider::{self, ConstantProvider, FileProvider, LexicalProvider, RemoteProvider, SimilarityProvider};
use crate::table::{self, opt_f64, TableError};
use crate::text::StopWords;

pub use config::PipelineConfig;
use config::ProviderKind;

pub const STAGES: [&str; 7] = ["validate", "chunk", "score", "graph", "propagate", "metrics", "export"];
pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const TIMINGS_FILE: &str = "timings.json";

/// A failed stage, naming the entity (participant, file, chunk) at fault.
#[derive(Debug, Clone, Error, PartialEq, Serialize, Deserialize)]
#[error("stage {stage}: {entity}: {message}")]
pub struct StageError {
    pub stage: String,
    pub entity: String,
    pub message: String,
}

impl StageError {
    pub fn new(stage: &str, entity: impl Into<String>, message: impl ToString) -> Self {
        Self {
            stage: stage.to_string(),
            entity: entity.into(),
            message: message.to_string(),
        }
    }
}

type StageResult<T> = Result<T, StageError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: String,
    pub artifacts: Vec<ArtifactDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tool_version: String,
    pub config: PipelineConfig,
    pub inputs: Vec<ArtifactDigest>,
    pub stages: Vec<StageEntry>,
    /// Wall-clock stage timings are kept in this sibling file, outside the
    /// digested content.
    pub timings_file: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn rel_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn files_under(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Participant ids become file names; keep them to a safe alphabet.
fn check_participant_id(pid: &str) -> Result<(), String> {
    if !pid.is_empty()
        && pid
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && pid != "."
        && pid != ".."
    {
        Ok(())
    } else {
        Err(format!(
            "participant id `{pid}` must use only letters, digits, '-', '_' and '.'"
        ))
    }
}

/// Everything the validate stage normalizes.
struct Validated {
    decomposition: Decomposition,
    utterances: BTreeMap<String, Vec<Utterance>>,
    turns: BTreeMap<String, Vec<TurnRecord>>,
    reports: BTreeMap<String, Report>,
    stopwords: StopWords,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoreRecord {
    participant_id: String,
    subtask_id: String,
    raw_score: f64,
    normalized_score: f64,
    n_chunks: usize,
    n_utterances: usize,
}

/// One row of the participant-subtask table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskRow {
    pub participant_id: String,
    pub subtask_id: String,
    pub in_transcript: bool,
    pub mention_count: usize,
    pub semantic_similarity_raw: Option<f64>,
    pub semantic_similarity: Option<f64>,
    pub word_overlap: usize,
    pub log_word_overlap: f64,
    pub number_matches: usize,
    pub log_number_matches: f64,
    pub composite_usage: Option<f64>,
    pub avg_response_coherence: Option<f64>,
    pub median_diversity: Option<f64>,
    pub avg_distance_to_frontier: Option<f64>,
}

const SUBTASK_HEADER: [&str; 14] = [
    "participant_id",
    "subtask_id",
    "in_transcript",
    "mention_count",
    "semantic_similarity_raw",
    "semantic_similarity",
    "word_overlap",
    "log_word_overlap",
    "number_matches",
    "log_number_matches",
    "composite_usage",
    "avg_response_coherence",
    "median_diversity",
    "avg_distance_to_frontier",
];

impl SubtaskRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.participant_id.clone(),
            self.subtask_id.clone(),
            self.in_transcript.to_string(),
            self.mention_count.to_string(),
            opt_f64(self.semantic_similarity_raw),
            opt_f64(self.semantic_similarity),
            self.word_overlap.to_string(),
            self.log_word_overlap.to_string(),
            self.number_matches.to_string(),
            self.log_number_matches.to_string(),
            opt_f64(self.composite_usage),
            opt_f64(self.avg_response_coherence),
            opt_f64(self.median_diversity),
            opt_f64(self.avg_distance_to_frontier),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CompositeSummary {
    columns: Vec<String>,
    loadings: Vec<f64>,
    eigenvalue: Option<f64>,
    explained_variance: Option<f64>,
    rows_used: usize,
    note: Option<String>,
}

pub struct Pipeline {
    config: PipelineConfig,
    out: PathBuf,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, workers: usize) -> StageResult<Self> {
        config.validate().map_err(|e| StageError::new("config", "config", e))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| StageError::new("config", "workers", e))?;
        let out = config.output_path();
        Ok(Self { config, out, pool })
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    /// Runs every stage in order.
    pub fn run(&self) -> StageResult<()> {
        for s in STAGES {
            self.stage(s)?;
        }
        Ok(())
    }

    /// Runs one stage, then refreshes the manifest and timings. On failure
    /// writes `error.json` to the output root.
    pub fn stage(&self, name: &str) -> StageResult<()> {
        let result = self.stage_inner(name);
        match &result {
            Ok(()) => {
                let _ = fs::remove_file(self.out.join("error.json"));
            }
            Err(e) => {
                let _ = fs::create_dir_all(&self.out);
                let body = serde_json::to_string_pretty(e).expect("error serializes");
                let _ = fs::write(self.out.join("error.json"), body + "\n");
            }
        }
        result
    }

    fn stage_inner(&self, name: &str) -> StageResult<()> {
        if !STAGES.contains(&name) {
            return Err(StageError::new(
                "config",
                name,
                format!("unknown stage; expected one of {}", STAGES.join(", ")),
            ));
        }
        let started = Instant::now();
        let dir = self.out.join(name);
        self.check_upstream(name)?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| StageError::new(name, rel_string(&dir), e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| StageError::new(name, name, e))?;
        log::info!("stage {name}");
        match name {
            "validate" => self.validate()?,
            "chunk" => self.chunk()?,
            "score" => self.score()?,
            "graph" => self.graph()?,
            "propagate" => self.propagate()?,
            "metrics" => self.metrics()?,
            "export" => self.export()?,
            _ => unreachable!(),
        }
        self.write_manifest()?;
        self.record_timing(name, started.elapsed().as_secs_f64());
        Ok(())
    }

    fn check_upstream(&self, name: &str) -> StageResult<()> {
        let needs: &[(&str, &str)] = match name {
            "validate" => &[],
            "chunk" => &[("validate", "transcripts.csv")],
            "score" => &[("chunk", "chunks.csv")],
            "graph" => &[("chunk", "chunks.csv"), ("score", "scores.csv")],
            "propagate" => &[("graph", "participants.json")],
            "metrics" => &[("validate", "transcripts.csv"), ("propagate", "subtask_scores.csv")],
            "export" => &[("metrics", "participant_subtask.csv"), ("validate", "grades.csv")],
            _ => &[],
        };
        for (stage, file) in needs {
            let p = self.out.join(stage).join(file);
            if !p.is_file() {
                return Err(StageError::new(
                    name,
                    format!("{stage}/{file}"),
                    format!("missing upstream artifact; run stage `{stage}` first"),
                ));
            }
        }
        Ok(())
    }

    fn path(&self, stage: &str, file: &str) -> PathBuf {
        self.out.join(stage).join(file)
    }

    fn write(&self, stage: &str, file: &str, bytes: &[u8]) -> StageResult<()> {
        let p = self.path(stage, file);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| StageError::new(stage, file, e))?;
        }
        fs::write(&p, bytes).map_err(|e| StageError::new(stage, file, e))
    }

    fn write_json<T: Serialize>(&self, stage: &str, file: &str, value: &T) -> StageResult<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| StageError::new(stage, file, e))?;
        s.push('\n');
        self.write(stage, file, s.as_bytes())
    }

    fn read(&self, stage: &str, file: &str, reader: &str) -> StageResult<Vec<u8>> {
        fs::read(self.path(stage, file)).map_err(|e| StageError::new(reader, format!("{stage}/{file}"), e))
    }

    /// Maps over participants on the worker pool, keeping input order. The
    /// first error in input order wins.
    fn par_map<T, R, F>(&self, items: &[T], f: F) -> StageResult<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> StageResult<R> + Sync + Send,
    {
        let results: Vec<StageResult<R>> = self.pool.install(|| items.par_iter().map(&f).collect());
        results.into_iter().collect()
    }

    fn input_files(&self) -> StageResult<Vec<(String, PathBuf)>> {
        let c = &self.config;
        let mut files = vec![
            (rel_string(&c.inputs.decomposition), c.resolve(&c.inputs.decomposition)),
            (rel_string(&c.inputs.transcripts), c.resolve(&c.inputs.transcripts)),
        ];
        if let Some(g) = &c.inputs.grades {
            files.push((rel_string(g), c.resolve(g)));
        }
        if let Some(s) = &c.inputs.stopwords_extra {
            files.push((rel_string(s), c.resolve(s)));
        }
        if c.provider.kind == ProviderKind::File {
            let p = c.provider.path.as_ref().expect("validated");
            files.push((rel_string(p), c.resolve(p)));
        }
        let reports = c.resolve(&c.inputs.reports);
        if reports.is_dir() {
            for f in files_under(&reports).map_err(|e| StageError::new("manifest", rel_string(&c.inputs.reports), e))? {
                if f.extension().is_some_and(|e| e == "txt") {
                    let rel = f.strip_prefix(&reports).expect("under reports");
                    files.push((rel_string(&c.inputs.reports.join(rel)), f));
                }
            }
        }
        Ok(files)
    }

    fn write_manifest(&self) -> StageResult<()> {
        let mut inputs = Vec::new();
        for (rel, abs) in self.input_files()? {
            let bytes = fs::read(&abs).map_err(|e| StageError::new("manifest", rel.clone(), e))?;
            inputs.push(ArtifactDigest {
                path: rel,
                sha256: sha256_hex(&bytes),
            });
        }
        let mut stages = Vec::new();
        for s in STAGES {
            let dir = self.out.join(s);
            if !dir.is_dir() {
                continue;
            }
            let mut artifacts = Vec::new();
            for f in files_under(&dir).map_err(|e| StageError::new("manifest", s, e))? {
                let bytes = fs::read(&f).map_err(|e| StageError::new("manifest", rel_string(&f), e))?;
                artifacts.push(ArtifactDigest {
                    path: rel_string(f.strip_prefix(&self.out).expect("under output")),
                    sha256: sha256_hex(&bytes),
                });
            }
            stages.push(StageEntry {
                name: s.to_string(),
                artifacts,
            });
        }
        let manifest = Manifest {
            format_version: MANIFEST_FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config.clone(),
            inputs,
            stages,
            timings_file: TIMINGS_FILE.to_string(),
        };
        let mut s = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        s.push('\n');
        fs::write(self.out.join("manifest.json"), s).map_err(|e| StageError::new("manifest", "manifest.json", e))
    }

    /// Wall-clock timings live outside the manifest so that it stays a pure
    /// function of inputs and configuration.
    fn record_timing(&self, stage: &str, secs: f64) {
        let p = self.out.join(TIMINGS_FILE);
        let mut t: BTreeMap<String, f64> = fs::read_to_string(&p)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default();
        t.insert(stage.to_string(), secs);
        let _ = fs::write(&p, serde_json::to_string_pretty(&t).unwrap_or_default() + "\n");
    }

    // ---- validate -------------------------------------------------------

    fn validate(&self) -> StageResult<()> {
        const S: &str = "validate";
        let c = &self.config;
        let open = |p: &Path| fs::File::open(c.resolve(p)).map_err(|e| StageError::new(S, rel_string(p), e));

        let d = decomposition::load_decomposition(open(&c.inputs.decomposition)?)
            .map_err(|e| StageError::new(S, rel_string(&c.inputs.decomposition), e))?;
        let report = d.validate();
        if !report.is_valid() {
            let detail = serde_json::to_string(&report.violations).unwrap_or_default();
            return Err(StageError::new(
                S,
                rel_string(&c.inputs.decomposition),
                format!("invalid decomposition: {detail}"),
            ));
        }
        self.write(S, "decomposition.json", d.to_json_string().as_bytes())?;
        self.write_json(
            S,
            "decomposition_summary.json",
            &serde_json::json!({
                "nodes": d.len(),
                "leaves": d.leaves().count(),
                "phases": d.phases().count(),
                "dependencies": d.dependencies().len(),
            }),
        )?;

        let utterances = corpus::load_transcript(open(&c.inputs.transcripts)?, &d)
            .map_err(|e| StageError::new(S, rel_string(&c.inputs.transcripts), e))?;
        let mut buf = Vec::new();
        corpus::write_transcript(&utterances, &mut buf).map_err(|e| StageError::new(S, "transcripts.csv", e))?;
        let by_pid = corpus::by_participant(utterances);
        let mut n_turns = 0;
        let mut n_missing = 0;
        for (pid, us) in &by_pid {
            check_participant_id(pid).map_err(|m| StageError::new(S, pid.clone(), m))?;
            let turns = corpus::pair_turns(us).map_err(|e| StageError::new(S, pid.clone(), e))?;
            n_turns += turns.len();
            n_missing += turns.iter().filter(|t| t.response_missing).count();
        }

        let reports_dir = c.resolve(&c.inputs.reports);
        for pid in by_pid.keys() {
            let rel = c.inputs.reports.join(format!("{pid}.txt"));
            let f = fs::File::open(reports_dir.join(format!("{pid}.txt")))
                .map_err(|e| StageError::new(S, rel_string(&rel), e))?;
            let r = corpus::load_report(pid, f).map_err(|e| StageError::new(S, rel_string(&rel), e))?;
            self.write(S, &format!("reports/{pid}.txt"), (r.text() + "\n").as_bytes())?;
        }

        let grades = match &c.inputs.grades {
            Some(g) => {
                corpus::load_grades(open(g)?, &d, &c.grades).map_err(|e| StageError::new(S, rel_string(g), e))?
            }
            None => Vec::new(),
        };
        let mut gbuf = Vec::new();
        corpus::write_grades(&grades, &mut gbuf).map_err(|e| StageError::new(S, "grades.csv", e))?;

        let mut sw = StopWords::english();
        if let Some(p) = &c.inputs.stopwords_extra {
            let f = std::io::BufReader::new(open(p)?);
            sw.extend_from_reader(f)
                .map_err(|e| StageError::new(S, rel_string(p), e))?;
        }
        let sw_text: String = sw.iter().map(|w| format!("{w}\n")).collect();

        self.write(S, "transcripts.csv", &buf)?;
        self.write(S, "grades.csv", &gbuf)?;
        self.write(S, "stopwords.txt", sw_text.as_bytes())?;
        let n_utts: usize = by_pid.values().map(Vec::len).sum();
        let coded: usize = by_pid.values().flatten().filter(|u| u.is_coded()).count();
        self.write_json(
            S,
            "corpus_summary.json",
            &serde_json::json!({
                "participants": by_pid.len(),
                "turns": n_turns,
                "utterances": n_utts,
                "coded_utterances": coded,
                "missing_responses": n_missing,
                "grade_rows": grades.len(),
            }),
        )
    }

    fn load_validated(&self, reader: &str) -> StageResult<Validated> {
        let d = decomposition::load_decomposition(self.read("validate", "decomposition.json", reader)?.as_slice())
            .map_err(|e| StageError::new(reader, "validate/decomposition.json", e))?;
        let utterances = corpus::load_transcript(self.read("validate", "transcripts.csv", reader)?.as_slice(), &d)
            .map_err(|e| StageError::new(reader, "validate/transcripts.csv", e))?;
        let utterances = corpus::by_participant(utterances);
        let mut turns = BTreeMap::new();
        let mut reports = BTreeMap::new();
        for (pid, us) in &utterances {
            turns.insert(
                pid.clone(),
                corpus::pair_turns(us).map_err(|e| StageError::new(reader, pid.clone(), e))?,
            );
            let file = format!("reports/{pid}.txt");
            let r = corpus::load_report(pid, self.read("validate", &file, reader)?.as_slice())
                .map_err(|e| StageError::new(reader, format!("validate/{file}"), e))?;
            reports.insert(pid.clone(), r);
        }
        let mut stopwords = StopWords::empty();
        stopwords.extend_from_str(&String::from_utf8_lossy(&self.read(
            "validate",
            "stopwords.txt",
            reader,
        )?));
        Ok(Validated {
            decomposition: d,
            utterances,
            turns,
            reports,
            stopwords,
        })
    }

    // ---- chunk ----------------------------------------------------------

    fn chunk(&self) -> StageResult<()> {
        const S: &str = "chunk";
        let v = self.load_validated(S)?;
        let opts = self.config.graph_options();
        let pids: Vec<&String> = v.utterances.keys().collect();
        let per: Vec<Option<ParticipantChunks>> = self.par_map(&pids, |pid| {
            match semgraph::chunk_participant(pid, &v.utterances[*pid], &v.reports[*pid], &opts) {
                Ok(c) => Ok(Some(c)),
                Err(GraphError::Empty(_)) => {
                    log::warn!("participant {pid} has no coded utterances; no chunks");
                    Ok(None)
                }
                Err(e) => Err(StageError::new(S, pid.as_str(), e)),
            }
        })?;
        let mut buf = Vec::new();
        chunker::write_inventory(per.iter().flatten().flat_map(|p| p.all()), &mut buf)
            .map_err(|e| StageError::new(S, "chunks.csv", e))?;
        self.write(S, "chunks.csv", &buf)?;

        let mut counts = Vec::new();
        {
            let mut w = table::versioned_writer(&mut counts, &["participant_id", "side", "window", "chunks"])
                .map_err(|e| StageError::new(S, "counts.csv", e))?;
            for p in per.iter().flatten() {
                for (wi, &win) in opts.windows.iter().enumerate() {
                    let t: usize = p.utterances.iter().map(|(_, l)| l[wi].len()).sum();
                    let r = p.report[wi].len();
                    for (side, n) in [("transcript", t), ("report", r)] {
                        w.write_record([p.participant_id.as_str(), side, &win.to_string(), &n.to_string()])
                            .map_err(|e| StageError::new(S, "counts.csv", TableError::from(e)))?;
                    }
                }
            }
            w.flush().map_err(|e| StageError::new(S, "counts.csv", e))?;
        }
        self.write(S, "counts.csv", &counts)
    }

    fn load_chunks(&self, reader: &str, v: &Validated) -> StageResult<Vec<ParticipantChunks>> {
        let chunks = chunker::read_inventory(self.read("chunk", "chunks.csv", reader)?.as_slice())
            .map_err(|e| StageError::new(reader, "chunk/chunks.csv", e))?;
        let mut by_pid: BTreeMap<&str, Vec<Chunk>> = BTreeMap::new();
        for c in &chunks {
            by_pid.entry(c.origin.participant_id()).or_default().push(c.clone());
        }
        let windows = &self.config.chunking.windows;
        by_pid
            .into_iter()
            .map(|(pid, cs)| {
                let us = v.utterances.get(pid).ok_or_else(|| {
                    StageError::new(reader, pid, "chunks for a participant absent from the transcripts")
                })?;
                ParticipantChunks::from_chunks(pid, us, &cs, windows).map_err(|e| StageError::new(reader, pid, e))
            })
            .collect()
    }

    // ---- score ----------------------------------------------------------

    fn provider(&self) -> StageResult<Box<dyn SimilarityProvider>> {
        const S: &str = "score";
        let c = &self.config;
        Ok(match c.provider.kind {
            ProviderKind::Constant => Box::new(ConstantProvider(c.provider.value.expect("validated"))),
            ProviderKind::Lexical => Box::new(LexicalProvider),
            ProviderKind::File => {
                let p = c.provider.path.as_ref().expect("validated");
                let f = fs::File::open(c.resolve(p)).map_err(|e| StageError::new(S, rel_string(p), e))?;
                Box::new(FileProvider::from_reader(f, rel_string(p)).map_err(|e| StageError::new(S, rel_string(p), e))?)
            }
            ProviderKind::Remote => {
                let settings = c.remote_settings().expect("validated");
                Box::new(RemoteProvider::new(settings))
            }
        })
    }

    fn score(&self) -> StageResult<()> {
        const S: &str = "score";
        let v = self.load_validated(S)?;
        let chunks = self.load_chunks(S, &v)?;
        let provider = self.provider()?;
        let scored = self.par_map(&chunks, |pc| {
            simprovider::score_pairs(provider.as_ref(), &pc.sim_pairs())
                .map_err(|e| StageError::new(S, pc.participant_id.as_str(), e))
        })?;
        let mut buf = Vec::new();
        simprovider::write_score_table(scored.iter().flatten(), &mut buf)
            .map_err(|e| StageError::new(S, "scores.csv", e))?;
        self.write(S, "scores.csv", &buf)?;
        self.write_json(
            S,
            "provider.json",
            &serde_json::json!({
                "provider": provider.describe(),
                "pairs": scored.iter().map(Vec::len).sum::<usize>(),
            }),
        )
    }

    // ---- graph ----------------------------------------------------------

    fn graph(&self) -> StageResult<()> {
        const S: &str = "graph";
        let v = self.load_validated(S)?;
        let chunks = self.load_chunks(S, &v)?;
        let scores = FileProvider::from_reader(self.read("score", "scores.csv", S)?.as_slice(), "score/scores.csv")
            .map_err(|e| StageError::new(S, "score/scores.csv", e))?;
        let opts = self.config.graph_options();
        let graphs = self.par_map(&chunks, |pc| {
            semgraph::build_graph_from_chunks(pc, &scores, &opts)
                .map_err(|e| StageError::new(S, pc.participant_id.as_str(), e))
        })?;
        let mut audit = BTreeMap::new();
        for g in &graphs {
            let pid = g.participant_id();
            let violations = g.audit();
            if !violations.is_empty() {
                return Err(StageError::new(S, pid, format!("graph audit failed: {violations:?}")));
            }
            self.write(S, &format!("{pid}.json"), g.to_json().as_bytes())?;
            let mut nodes = Vec::new();
            g.write_nodes_csv(&mut nodes).map_err(|e| StageError::new(S, pid, e))?;
            self.write(S, &format!("{pid}.nodes.csv"), &nodes)?;
            let mut edges = Vec::new();
            g.write_edges_csv(&mut edges).map_err(|e| StageError::new(S, pid, e))?;
            self.write(S, &format!("{pid}.edges.csv"), &edges)?;
            audit.insert(
                pid.to_string(),
                serde_json::json!({
                    "layers": g.layer_sizes(),
                    "edges": g.edges().len(),
                    "sim_edges": g.sim_edge_count(),
                }),
            );
        }
        self.write_json(S, "audit.json", &audit)?;
        let pids: Vec<&str> = graphs.iter().map(SemanticGraph::participant_id).collect();
        self.write_json(S, "participants.json", &pids)
    }

    // ---- propagate ------------------------------------------------------

    fn propagate(&self) -> StageResult<()> {
        const S: &str = "propagate";
        let pids: Vec<String> = serde_json::from_slice(&self.read("graph", "participants.json", S)?)
            .map_err(|e| StageError::new(S, "graph/participants.json", e))?;
        let cfg = self.config.propagation_config();
        let results = self.par_map(&pids, |pid| {
            let file = format!("{pid}.json");
            let text = String::from_utf8_lossy(&self.read("graph", &file, S)?).into_owned();
            let g = SemanticGraph::from_json(&text).map_err(|e| StageError::new(S, format!("graph/{file}"), e))?;
            let p = propagation::propagate(&g, &cfg).map_err(|e| StageError::new(S, pid.as_str(), e))?;
            let scores = propagation::subtask_scores(&g, p.top()).map_err(|e| StageError::new(S, pid.as_str(), e))?;
            Ok((pid.clone(), p, scores))
        })?;

        let mut all: Vec<SubtaskSimilarity> = results.iter().flat_map(|(_, _, s)| s.clone()).collect();
        propagation::normalize_all(&mut all, self.config.propagation.steepness);
        let mut buf = Vec::new();
        {
            let mut w = table::versioned_writer(
                &mut buf,
                &[
                    "participant_id",
                    "subtask_id",
                    "raw_score",
                    "normalized_score",
                    "n_chunks",
                    "n_utterances",
                ],
            )
            .map_err(|e| StageError::new(S, "subtask_scores.csv", e))?;
            for s in &all {
                w.write_record([
                    s.participant_id.clone(),
                    s.subtask_id.clone(),
                    s.raw_score.to_string(),
                    opt_f64(s.normalized_score),
                    s.n_chunks.to_string(),
                    s.n_utterances.to_string(),
                ])
                .map_err(|e| StageError::new(S, "subtask_scores.csv", TableError::from(e)))?;
            }
            w.flush().map_err(|e| StageError::new(S, "subtask_scores.csv", e))?;
        }
        self.write(S, "subtask_scores.csv", &buf)?;

        let mut conv = Vec::new();
        {
            let mut w = table::versioned_writer(
                &mut conv,
                &[
                    "participant_id",
                    "window",
                    "parent_t",
                    "parent_r",
                    "rows",
                    "cols",
                    "iterations",
                    "converged",
                    "max_change",
                ],
            )
            .map_err(|e| StageError::new(S, "convergence.csv", e))?;
            for (pid, p, _) in &results {
                for d in &p.diagnostics {
                    if !d.converged {
                        log::warn!(
                            "{pid}: relation {} / {} did not converge in {} iterations",
                            d.parent_t,
                            d.parent_r,
                            d.iterations
                        );
                    }
                    w.write_record([
                        pid.clone(),
                        d.window.to_string(),
                        d.parent_t.clone(),
                        d.parent_r.clone(),
                        d.rows.to_string(),
                        d.cols.to_string(),
                        d.iterations.to_string(),
                        d.converged.to_string(),
                        d.max_change.to_string(),
                    ])
                    .map_err(|e| StageError::new(S, "convergence.csv", TableError::from(e)))?;
                }
            }
            w.flush().map_err(|e| StageError::new(S, "convergence.csv", e))?;
        }
        self.write(S, "convergence.csv", &conv)?;

        for (pid, p, _) in &results {
            let mut lv = Vec::new();
            {
                let mut w = table::versioned_writer(&mut lv, &["window", "report_chunk", "transcript_chunk", "value"])
                    .map_err(|e| StageError::new(S, pid.as_str(), e))?;
                for m in &p.levels {
                    for (ci, col) in m.values.iter().enumerate() {
                        for (&ri, val) in col {
                            w.write_record([
                                m.window.to_string(),
                                m.rows[ri].clone(),
                                m.cols[ci].clone(),
                                val.to_string(),
                            ])
                            .map_err(|e| StageError::new(S, pid.as_str(), TableError::from(e)))?;
                        }
                    }
                }
                w.flush().map_err(|e| StageError::new(S, pid.as_str(), e))?;
            }
            self.write(S, &format!("levels/{pid}.csv"), &lv)?;
        }
        Ok(())
    }

    // ---- metrics --------------------------------------------------------

    fn metrics(&self) -> StageResult<()> {
        const S: &str = "metrics";
        let v = self.load_validated(S)?;
        let scores: Vec<ScoreRecord> = {
            let mut r = table::versioned_reader(self.read("propagate", "subtask_scores.csv", S)?.as_slice())
                .map_err(|e| StageError::new(S, "propagate/subtask_scores.csv", e))?;
            r.deserialize()
                .collect::<Result<_, _>>()
                .map_err(|e| StageError::new(S, "propagate/subtask_scores.csv", e))?
        };
        let sim: BTreeMap<(&str, &str), &ScoreRecord> = scores
            .iter()
            .map(|s| ((s.participant_id.as_str(), s.subtask_id.as_str()), s))
            .collect();
        let mcfg = self.config.metrics_config();
        let d = &v.decomposition;
        let pids: Vec<&String> = v.turns.keys().collect();
        let per: Vec<(ParticipantTraversal, BTreeMap<String, (usize, usize)>)> = self.par_map(&pids, |pid| {
            let turns = &v.turns[*pid];
            let t = metrics::participant_traversal(pid, turns, d, &mcfg)
                .map_err(|e| StageError::new(S, pid.as_str(), e))?;
            let u = metrics::usage_counts(turns, &v.reports[*pid], &v.stopwords, &mcfg.numbers);
            Ok((t, u))
        })?;

        let mut rows = Vec::new();
        for (t, usage) in &per {
            for tr in &t.rows {
                let (wo, nm) = usage.get(&tr.subtask_id).copied().unwrap_or((0, 0));
                let s = sim.get(&(tr.participant_id.as_str(), tr.subtask_id.as_str()));
                rows.push(SubtaskRow {
                    participant_id: tr.participant_id.clone(),
                    subtask_id: tr.subtask_id.clone(),
                    in_transcript: tr.in_transcript,
                    mention_count: tr.mention_count,
                    semantic_similarity_raw: s.map(|s| s.raw_score),
                    semantic_similarity: s.map(|s| s.normalized_score),
                    word_overlap: wo,
                    log_word_overlap: (wo as f64).ln_1p(),
                    number_matches: nm,
                    log_number_matches: (nm as f64).ln_1p(),
                    composite_usage: None,
                    avg_response_coherence: tr.avg_response_coherence,
                    median_diversity: tr.median_diversity,
                    avg_distance_to_frontier: tr.avg_distance_to_frontier,
                });
            }
        }

        let inputs: Vec<UsageInput> = rows
            .iter()
            .map(|r| UsageInput {
                semantic_similarity: r.semantic_similarity,
                word_overlap: Some(r.word_overlap),
                number_matches: Some(r.number_matches),
            })
            .collect();
        let summary = match metrics::composite_usage(&inputs) {
            Ok(c) => {
                for (r, x) in rows.iter_mut().zip(&c.composite) {
                    r.composite_usage = *x;
                }
                CompositeSummary {
                    columns: c
                        .pca
                        .columns
                        .iter()
                        .map(|&i| metrics::COMPOSITE_COLUMNS[i].to_string())
                        .collect(),
                    loadings: c.pca.loadings.clone(),
                    eigenvalue: Some(c.pca.eigenvalue),
                    explained_variance: Some(c.pca.explained_variance),
                    rows_used: c.pca.scores.len(),
                    note: None,
                }
            }
            Err(e) => {
                log::warn!("composite usage not computed: {e}");
                CompositeSummary {
                    columns: Vec::new(),
                    loadings: Vec::new(),
                    eigenvalue: None,
                    explained_variance: None,
                    rows_used: 0,
                    note: Some(e.to_string()),
                }
            }
        };
        self.write_json(S, "composite.json", &summary)?;

        let mut buf = Vec::new();
        {
            let mut w = table::versioned_writer(&mut buf, &SUBTASK_HEADER)
                .map_err(|e| StageError::new(S, "participant_subtask.csv", e))?;
            for r in &rows {
                w.write_record(r.record())
                    .map_err(|e| StageError::new(S, "participant_subtask.csv", TableError::from(e)))?;
            }
            w.flush()
                .map_err(|e| StageError::new(S, "participant_subtask.csv", e))?;
        }
        self.write(S, "participant_subtask.csv", &buf)?;

        let join = |s: &BTreeSet<String>| s.iter().cloned().collect::<Vec<_>>().join(";");
        let mut ubuf = Vec::new();
        {
            let mut w = table::versioned_writer(
                &mut ubuf,
                &[
                    "participant_id",
                    "turn_index",
                    "speaker",
                    "index",
                    "subtask_codes",
                    "coherence",
                    "attention",
                    "frontier_size",
                    "distance_to_frontier",
                ],
            )
            .map_err(|e| StageError::new(S, "utterances.csv", e))?;
            for (t, _) in &per {
                for u in &t.utterances {
                    let attention = u
                        .attention
                        .iter()
                        .map(|(s, a)| format!("{s}={a}"))
                        .collect::<Vec<_>>()
                        .join(";");
                    let dist = u
                        .distance_to_frontier
                        .iter()
                        .map(|(s, d)| format!("{s}={}", d.map(|x| x.to_string()).unwrap_or_default()))
                        .collect::<Vec<_>>()
                        .join(";");
                    w.write_record([
                        u.participant_id.clone(),
                        u.turn_index.to_string(),
                        u.speaker.to_string(),
                        u.index.to_string(),
                        u.subtask_codes.join(";"),
                        opt_f64(u.coherence),
                        attention,
                        u.frontier_size.to_string(),
                        dist,
                    ])
                    .map_err(|e| StageError::new(S, "utterances.csv", TableError::from(e)))?;
                }
            }
            w.flush().map_err(|e| StageError::new(S, "utterances.csv", e))?;
        }
        self.write(S, "utterances.csv", &ubuf)?;

        let mut tbuf = Vec::new();
        {
            let mut w = table::versioned_writer(
                &mut tbuf,
                &[
                    "participant_id",
                    "turn_index",
                    "response_missing",
                    "diversity",
                    "unanswered",
                    "unsolicited",
                    "n_unanswered",
                    "n_unsolicited",
                ],
            )
            .map_err(|e| StageError::new(S, "turns.csv", e))?;
            for (t, _) in &per {
                for tm in &t.turns {
                    w.write_record([
                        tm.participant_id.clone(),
                        tm.turn_index.to_string(),
                        tm.response_missing.to_string(),
                        opt_f64(tm.diversity),
                        join(&tm.unanswered),
                        join(&tm.unsolicited),
                        tm.unanswered.len().to_string(),
                        tm.unsolicited.len().to_string(),
                    ])
                    .map_err(|e| StageError::new(S, "turns.csv", TableError::from(e)))?;
                }
            }
            w.flush().map_err(|e| StageError::new(S, "turns.csv", e))?;
        }
        self.write(S, "turns.csv", &tbuf)
    }

    // ---- export ---------------------------------------------------------

    fn export(&self) -> StageResult<()> {
        const S: &str = "export";
        let rows: Vec<SubtaskRow> = {
            let mut r = table::versioned_reader(self.read("metrics", "participant_subtask.csv", S)?.as_slice())
                .map_err(|e| StageError::new(S, "metrics/participant_subtask.csv", e))?;
            r.deserialize()
                .collect::<Result<_, _>>()
                .map_err(|e| StageError::new(S, "metrics/participant_subtask.csv", e))?
        };
        let d = decomposition::load_decomposition(self.read("validate", "decomposition.json", S)?.as_slice())
            .map_err(|e| StageError::new(S, "validate/decomposition.json", e))?;
        let grades = corpus::load_grades(
            self.read("validate", "grades.csv", S)?.as_slice(),
            &d,
            &self.config.grades,
        )
        .map_err(|e| StageError::new(S, "validate/grades.csv", e))?;
        let reduced = corpus::reduce_grades(&grades);

        let mut header: Vec<&str> = SUBTASK_HEADER.to_vec();
        header.extend([
            "n_graders",
            "completeness_mean",
            "completeness_median",
            "output_quality_mean",
            "output_quality_median",
            "room_for_improvement_mean",
            "room_for_improvement_median",
            "satisfactory_mean",
            "satisfactory_median",
        ]);
        let mut buf = Vec::new();
        {
            let mut w =
                table::versioned_writer(&mut buf, &header).map_err(|e| StageError::new(S, "metric_table.csv", e))?;
            for r in &rows {
                let mut rec = r.record();
                match reduced.get(&(r.participant_id.clone(), r.subtask_id.clone())) {
                    Some(g) => rec.extend([
                        g.n_graders.to_string(),
                        g.completeness_mean.to_string(),
                        g.completeness_median.to_string(),
                        g.output_quality_mean.to_string(),
                        g.output_quality_median.to_string(),
                        g.room_for_improvement_mean.to_string(),
                        g.room_for_improvement_median.to_string(),
                        g.satisfactory_mean.to_string(),
                        g.satisfactory_median.to_string(),
                    ]),
                    None => {
                        rec.push("0".into());
                        rec.extend(std::iter::repeat_n(String::new(), 8));
                    }
                }
                w.write_record(&rec)
                    .map_err(|e| StageError::new(S, "metric_table.csv", TableError::from(e)))?;
            }
            w.flush().map_err(|e| StageError::new(S, "metric_table.csv", e))?;
        }
        self.write(S, "metric_table.csv", &buf)?;
        Ok(())
    }
}

/// Loads the configuration and runs every stage.
pub fn run(config_path: &Path, workers: usize) -> StageResult<PathBuf> {
    let cfg = PipelineConfig::load(config_path).map_err(|e| StageError::new("config", rel_string(config_path), e))?;
    let p = Pipeline::new(cfg, workers)?;
    p.run()?;
    Ok(p.output_dir().to_path_buf())
}

/// Loads the configuration and runs one stage.
pub fn stage(config_path: &Path, name: &str, workers: usize) -> StageResult<PathBuf> {
    let cfg = PipelineConfig::load(config_path).map_err(|e| StageError::new("config", rel_string(config_path), e))?;
    let p = Pipeline::new(cfg, workers)?;
    p.stage(name)?;
    Ok(p.output_dir().to_path_buf())
}
