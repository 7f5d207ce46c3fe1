//! Coded transcripts, final reports and grader scores.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposition::Decomposition;
use crate::table::{self, TableError};
use crate::text::{self, Token};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("unknown subtask codes: {}", .0.iter().cloned().collect::<Vec<_>>().join(", "))]
    UnknownCodes(BTreeSet<String>),
    #[error("participant {participant}: turn {turn} has more than one {speaker}")]
    DuplicateUtterance {
        participant: String,
        turn: u32,
        speaker: Speaker,
    },
    #[error("participant {participant}: turn {turn} has a response but no prompt")]
    ResponseWithoutPrompt { participant: String, turn: u32 },
    #[error("pair_turns expects one participant, found `{0}` and `{1}`")]
    MixedParticipants(String, String),
    #[error("report for participant {0} is empty")]
    EmptyReport(String),
    #[error("row {row}: {field} = {value} outside {min}..={max}")]
    OutOfRange {
        row: usize,
        field: &'static str,
        value: i64,
        min: u8,
        max: u8,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Prompt,
    Response,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::Prompt => "prompt",
            Speaker::Response => "response",
        }
    }

    pub fn tag(self) -> char {
        match self {
            Speaker::Prompt => 'p',
            Speaker::Response => 'r',
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Speaker {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "prompt" => Ok(Speaker::Prompt),
            "response" => Ok(Speaker::Response),
            other => Err(format!("unknown speaker `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub participant_id: String,
    pub turn_index: u32,
    pub speaker: Speaker,
    /// Whitespace-delimited words in original spelling.
    pub words: Vec<String>,
    pub subtask_codes: BTreeSet<String>,
    pub specialty_codes: BTreeSet<String>,
}

impl Utterance {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    pub fn tokens(&self) -> Vec<Token> {
        text::tokenize(&self.text())
    }

    pub fn is_coded(&self) -> bool {
        !self.subtask_codes.is_empty()
    }

    /// Position key: turn first, prompt before response.
    pub fn order_key(&self) -> (u32, Speaker) {
        (self.turn_index, self.speaker)
    }

    /// Stable identifier used for graph nodes and chunk ids.
    pub fn key(&self) -> String {
        format!("{}/{}{}", self.participant_id, self.turn_index, self.speaker.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub participant_id: String,
    pub turn_index: u32,
    pub prompt: Utterance,
    pub response: Utterance,
    /// The response is a synthetic, uncoded placeholder.
    pub response_missing: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub participant_id: String,
    pub words: Vec<String>,
}

impl Report {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    pub fn tokens(&self) -> Vec<Token> {
        text::tokenize(&self.text())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraderScore {
    pub participant_id: String,
    pub subtask_id: String,
    pub grader_id: String,
    pub completeness: u8,
    pub output_quality: u8,
    pub room_for_improvement: u8,
    pub satisfactory: bool,
}

/// Inclusive ordinal range for grader scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeSchema {
    pub min: u8,
    pub max: u8,
}

impl Default for GradeSchema {
    fn default() -> Self {
        Self { min: 0, max: 5 }
    }
}

#[derive(Debug, Deserialize)]
struct TranscriptRow {
    participant_id: String,
    turn_index: String,
    speaker: String,
    text: String,
    #[serde(default)]
    subtask_codes: String,
    #[serde(default)]
    specialty_codes: String,
}

fn split_codes(s: &str) -> BTreeSet<String> {
    s.split(';')
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(str::to_string)
        .collect()
}

/// Reads a transcript table. Utterances come back ordered by participant,
/// then turn, then prompt before response.
pub fn load_transcript<R: Read>(source: R, decomposition: &Decomposition) -> Result<Vec<Utterance>, CorpusError> {
    let mut reader = table::versioned_reader(source)?;
    let mut out = Vec::new();
    let mut unknown = BTreeSet::new();
    for (i, rec) in reader.deserialize::<TranscriptRow>().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| CorpusError::Parse {
            row,
            message: e.to_string(),
        })?;
        let turn_index: u32 = rec.turn_index.trim().parse().map_err(|_| CorpusError::Parse {
            row,
            message: format!("turn_index `{}` is not a positive integer", rec.turn_index),
        })?;
        if turn_index == 0 {
            return Err(CorpusError::Parse {
                row,
                message: "turn_index must be positive".into(),
            });
        }
        let speaker = rec
            .speaker
            .parse()
            .map_err(|message| CorpusError::Parse { row, message })?;
        let words: Vec<String> = rec.text.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            return Err(CorpusError::Parse {
                row,
                message: "utterance text is empty".into(),
            });
        }
        let subtask_codes = split_codes(&rec.subtask_codes);
        unknown.extend(subtask_codes.iter().filter(|c| !decomposition.contains(c)).cloned());
        out.push(Utterance {
            participant_id: rec.participant_id.trim().to_string(),
            turn_index,
            speaker,
            words,
            subtask_codes,
            specialty_codes: split_codes(&rec.specialty_codes),
        });
    }
    if !unknown.is_empty() {
        return Err(CorpusError::UnknownCodes(unknown));
    }
    out.sort_by(|a, b| (a.participant_id.as_str(), a.order_key()).cmp(&(b.participant_id.as_str(), b.order_key())));
    Ok(out)
}

pub const TRANSCRIPT_HEADER: [&str; 6] = [
    "participant_id",
    "turn_index",
    "speaker",
    "text",
    "subtask_codes",
    "specialty_codes",
];

pub fn write_transcript<W: Write>(utterances: &[Utterance], sink: W) -> Result<(), CorpusError> {
    let mut w = table::versioned_writer(sink, &TRANSCRIPT_HEADER)?;
    for u in utterances {
        w.write_record([
            u.participant_id.clone(),
            u.turn_index.to_string(),
            u.speaker.to_string(),
            u.text(),
            u.subtask_codes.iter().cloned().collect::<Vec<_>>().join(";"),
            u.specialty_codes.iter().cloned().collect::<Vec<_>>().join(";"),
        ])
        .map_err(TableError::from)?;
    }
    w.flush()?;
    Ok(())
}

/// Groups utterances by participant, preserving order within each group.
pub fn by_participant(utterances: Vec<Utterance>) -> BTreeMap<String, Vec<Utterance>> {
    let mut out: BTreeMap<String, Vec<Utterance>> = BTreeMap::new();
    for u in utterances {
        out.entry(u.participant_id.clone()).or_default().push(u);
    }
    for v in out.values_mut() {
        v.sort_by_key(Utterance::order_key);
    }
    out
}

/// Pairs one participant's utterances into dyadic turns. Input order does not
/// matter. A prompt without a response gets an empty, uncoded placeholder
/// response flagged as missing.
pub fn pair_turns(utterances: &[Utterance]) -> Result<Vec<TurnRecord>, CorpusError> {
    let mut slots: BTreeMap<u32, (Option<&Utterance>, Option<&Utterance>)> = BTreeMap::new();
    let mut participant: Option<&str> = None;
    for u in utterances {
        match participant {
            None => participant = Some(&u.participant_id),
            Some(p) if p != u.participant_id => {
                return Err(CorpusError::MixedParticipants(p.to_string(), u.participant_id.clone()))
            }
            _ => {}
        }
        let slot = slots.entry(u.turn_index).or_default();
        let target = match u.speaker {
            Speaker::Prompt => &mut slot.0,
            Speaker::Response => &mut slot.1,
        };
        if target.is_some() {
            return Err(CorpusError::DuplicateUtterance {
                participant: u.participant_id.clone(),
                turn: u.turn_index,
                speaker: u.speaker,
            });
        }
        *target = Some(u);
    }

    slots
        .into_iter()
        .map(|(turn, pair)| match pair {
            (Some(p), Some(r)) => Ok(TurnRecord {
                participant_id: p.participant_id.clone(),
                turn_index: turn,
                prompt: p.clone(),
                response: r.clone(),
                response_missing: false,
            }),
            (Some(p), None) => Ok(TurnRecord {
                participant_id: p.participant_id.clone(),
                turn_index: turn,
                prompt: p.clone(),
                response: Utterance {
                    participant_id: p.participant_id.clone(),
                    turn_index: turn,
                    speaker: Speaker::Response,
                    words: Vec::new(),
                    subtask_codes: BTreeSet::new(),
                    specialty_codes: BTreeSet::new(),
                },
                response_missing: true,
            }),
            (None, Some(r)) => Err(CorpusError::ResponseWithoutPrompt {
                participant: r.participant_id.clone(),
                turn,
            }),
            (None, None) => unreachable!("slots are created on insert"),
        })
        .collect()
}

pub fn load_report<R: Read>(participant_id: &str, mut source: R) -> Result<Report, CorpusError> {
    let mut s = String::new();
    source.read_to_string(&mut s)?;
    let words: Vec<String> = s.split_whitespace().map(str::to_string).collect();
    if text::tokenize(&s).is_empty() {
        return Err(CorpusError::EmptyReport(participant_id.to_string()));
    }
    Ok(Report {
        participant_id: participant_id.to_string(),
        words,
    })
}

#[derive(Debug, Deserialize)]
struct GradeRow {
    participant_id: String,
    subtask_id: String,
    grader_id: String,
    completeness: String,
    output_quality: String,
    room_for_improvement: String,
    satisfactory: String,
}

pub const GRADES_HEADER: [&str; 7] = [
    "participant_id",
    "subtask_id",
    "grader_id",
    "completeness",
    "output_quality",
    "room_for_improvement",
    "satisfactory",
];

fn parse_ordinal(row: usize, field: &'static str, raw: &str, schema: &GradeSchema) -> Result<u8, CorpusError> {
    let v: i64 = raw.trim().parse().map_err(|_| CorpusError::Parse {
        row,
        message: format!("{field} `{raw}` is not an integer"),
    })?;
    if v < schema.min as i64 || v > schema.max as i64 {
        return Err(CorpusError::OutOfRange {
            row,
            field,
            value: v,
            min: schema.min,
            max: schema.max,
        });
    }
    Ok(v as u8)
}

fn parse_bool(row: usize, raw: &str) -> Result<bool, CorpusError> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(CorpusError::Parse {
            row,
            message: format!("satisfactory `{other}` is not a boolean"),
        }),
    }
}

pub fn load_grades<R: Read>(
    source: R,
    decomposition: &Decomposition,
    schema: &GradeSchema,
) -> Result<Vec<GraderScore>, CorpusError> {
    let mut reader = table::versioned_reader(source)?;
    let mut out = Vec::new();
    let mut unknown = BTreeSet::new();
    for (i, rec) in reader.deserialize::<GradeRow>().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| CorpusError::Parse {
            row,
            message: e.to_string(),
        })?;
        if !decomposition.contains(rec.subtask_id.trim()) {
            unknown.insert(rec.subtask_id.trim().to_string());
        }
        out.push(GraderScore {
            participant_id: rec.participant_id.trim().to_string(),
            subtask_id: rec.subtask_id.trim().to_string(),
            grader_id: rec.grader_id.trim().to_string(),
            completeness: parse_ordinal(row, "completeness", &rec.completeness, schema)?,
            output_quality: parse_ordinal(row, "output_quality", &rec.output_quality, schema)?,
            room_for_improvement: parse_ordinal(row, "room_for_improvement", &rec.room_for_improvement, schema)?,
            satisfactory: parse_bool(row, &rec.satisfactory)?,
        });
    }
    if !unknown.is_empty() {
        return Err(CorpusError::UnknownCodes(unknown));
    }
    Ok(out)
}

pub fn write_grades<W: Write>(grades: &[GraderScore], sink: W) -> Result<(), CorpusError> {
    let mut w = table::versioned_writer(sink, &GRADES_HEADER)?;
    for g in grades {
        w.write_record([
            g.participant_id.clone(),
            g.subtask_id.clone(),
            g.grader_id.clone(),
            g.completeness.to_string(),
            g.output_quality.to_string(),
            g.room_for_improvement.to_string(),
            g.satisfactory.to_string(),
        ])
        .map_err(TableError::from)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and median of each grading dimension across graders of one
/// participant-subtask. `satisfactory` is reduced over 0/1 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeReduction {
    pub n_graders: usize,
    pub completeness_mean: f64,
    pub completeness_median: f64,
    pub output_quality_mean: f64,
    pub output_quality_median: f64,
    pub room_for_improvement_mean: f64,
    pub room_for_improvement_median: f64,
    pub satisfactory_mean: f64,
    pub satisfactory_median: f64,
}

pub fn reduce_grades(grades: &[GraderScore]) -> BTreeMap<(String, String), GradeReduction> {
    let mut groups: BTreeMap<(String, String), Vec<&GraderScore>> = BTreeMap::new();
    for g in grades {
        groups
            .entry((g.participant_id.clone(), g.subtask_id.clone()))
            .or_default()
            .push(g);
    }
    groups
        .into_iter()
        .map(|(k, gs)| {
            let col = |f: &dyn Fn(&GraderScore) -> f64| gs.iter().map(|g| f(g)).collect::<Vec<_>>();
            let c = col(&|g| g.completeness as f64);
            let q = col(&|g| g.output_quality as f64);
            let r = col(&|g| g.room_for_improvement as f64);
            let s = col(&|g| if g.satisfactory { 1.0 } else { 0.0 });
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let med = |v: &[f64]| crate::stats::median(v).expect("group is nonempty");
            (
                k,
                GradeReduction {
                    n_graders: gs.len(),
                    completeness_mean: mean(&c),
                    completeness_median: med(&c),
                    output_quality_mean: mean(&q),
                    output_quality_median: med(&q),
                    room_for_improvement_mean: mean(&r),
                    room_for_improvement_median: med(&r),
                    satisfactory_mean: mean(&s),
                    satisfactory_median: med(&s),
                },
            )
        })
        .collect()
}
