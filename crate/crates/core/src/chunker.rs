//! Fixed-window chunking with half-window stride, and the word-share weight
//! between a chunk and a smaller chunk it contains.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Report, Speaker, Utterance};
use crate::table::{self, TableError};
use crate::text::{self, Token};

#[derive(Debug, Error)]
pub enum ChunkError {
    #[error("cannot chunk empty text ({0})")]
    EmptyText(Origin),
    #[error("window {0} must be a positive even number")]
    BadWindow(usize),
    #[error("chunks `{0}` and `{1}` come from different texts")]
    MismatchedOrigin(String, String),
    #[error("parent `{parent}` (window {parent_window}) is not larger than child `{child}` (window {child_window})")]
    WindowOrder {
        parent: String,
        parent_window: usize,
        child: String,
        child_window: usize,
    },
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("chunk inventory row {row}: {message}")]
    Parse { row: usize, message: String },
}

/// Which text a chunk was cut from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Origin {
    Transcript {
        participant_id: String,
        turn_index: u32,
        speaker: Speaker,
    },
    Report {
        participant_id: String,
    },
}

impl Origin {
    pub fn of_utterance(u: &Utterance) -> Self {
        Origin::Transcript {
            participant_id: u.participant_id.clone(),
            turn_index: u.turn_index,
            speaker: u.speaker,
        }
    }

    pub fn of_report(r: &Report) -> Self {
        Origin::Report {
            participant_id: r.participant_id.clone(),
        }
    }

    pub fn participant_id(&self) -> &str {
        match self {
            Origin::Transcript { participant_id, .. } | Origin::Report { participant_id } => participant_id,
        }
    }

    pub fn is_transcript(&self) -> bool {
        matches!(self, Origin::Transcript { .. })
    }

    /// `T/P1/3p` or `R/P1`; chunk ids extend this with window and offset.
    pub fn key(&self) -> String {
        match self {
            Origin::Transcript {
                participant_id,
                turn_index,
                speaker,
            } => format!("T/{participant_id}/{turn_index}{}", speaker.tag()),
            Origin::Report { participant_id } => format!("R/{participant_id}"),
        }
    }

    /// Inverse of [`Origin::key`].
    pub fn parse_key(key: &str) -> Option<Self> {
        let mut parts = key.split('/');
        let kind = parts.next()?;
        let pid = parts.next()?.to_string();
        let out = match kind {
            "R" => Origin::Report { participant_id: pid },
            "T" => {
                let turn = parts.next()?;
                let (num, tag) = turn.split_at(turn.len().checked_sub(1)?);
                let speaker = match tag {
                    "p" => Speaker::Prompt,
                    "r" => Speaker::Response,
                    _ => return None,
                };
                Origin::Transcript {
                    participant_id: pid,
                    turn_index: num.parse().ok()?,
                    speaker,
                }
            }
            _ => return None,
        };
        if parts.next().is_some() {
            return None;
        }
        Some(out)
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub origin: Origin,
    pub window: usize,
    pub start_index: usize,
    pub word_count: usize,
    pub word_set: BTreeSet<String>,
    /// The chunk's words in original spelling, space-joined.
    pub text: String,
}

impl Chunk {
    pub fn end_index(&self) -> usize {
        self.start_index + self.word_count
    }

    pub fn overlaps(&self, other: &Chunk) -> bool {
        self.start_index < other.end_index() && other.start_index < self.end_index()
    }
}

pub fn chunk_id(origin: &Origin, window: usize, start: usize) -> String {
    format!("{}/w{window}/{start}", origin.key())
}

/// `(start, len)` spans for a text of `n` words: starts at 0, stride, 2·stride, …
/// until a span reaches the end of the text.
pub fn chunk_spans(n: usize, window: usize) -> Vec<(usize, usize)> {
    if n == 0 || window == 0 {
        return Vec::new();
    }
    let stride = (window / 2).max(1);
    let mut out = Vec::with_capacity(n / stride + 1);
    let mut start = 0;
    loop {
        let end = (start + window).min(n);
        out.push((start, end - start));
        if end == n {
            break;
        }
        start += stride;
    }
    out
}

fn check_window(window: usize) -> Result<(), ChunkError> {
    if window == 0 || window % 2 != 0 {
        Err(ChunkError::BadWindow(window))
    } else {
        Ok(())
    }
}

/// Chunks a token sequence. Word indices count tokens, so pure punctuation
/// never occupies a position.
pub fn chunk_text(tokens: &[Token], window: usize, origin: &Origin) -> Result<Vec<Chunk>, ChunkError> {
    check_window(window)?;
    if tokens.is_empty() {
        return Err(ChunkError::EmptyText(origin.clone()));
    }
    Ok(chunk_spans(tokens.len(), window)
        .into_iter()
        .map(|(start, len)| {
            let span = &tokens[start..start + len];
            Chunk {
                chunk_id: chunk_id(origin, window, start),
                origin: origin.clone(),
                window,
                start_index: start,
                word_count: len,
                word_set: text::word_set(span),
                text: span.iter().map(|t| t.raw.as_str()).collect::<Vec<_>>().join(" "),
            }
        })
        .collect())
}

/// Chunks at every window, smallest first.
pub fn chunk_all(tokens: &[Token], windows: &[usize], origin: &Origin) -> Result<Vec<Vec<Chunk>>, ChunkError> {
    windows.iter().map(|&w| chunk_text(tokens, w, origin)).collect()
}

/// Share of the parent's distinct words that also occur in the child.
pub fn parent_child_weight(parent: &Chunk, child: &Chunk) -> Result<f64, ChunkError> {
    if parent.origin != child.origin {
        return Err(ChunkError::MismatchedOrigin(
            parent.chunk_id.clone(),
            child.chunk_id.clone(),
        ));
    }
    if parent.window <= child.window {
        return Err(ChunkError::WindowOrder {
            parent: parent.chunk_id.clone(),
            parent_window: parent.window,
            child: child.chunk_id.clone(),
            child_window: child.window,
        });
    }
    Ok(word_share(&parent.word_set, &child.word_set))
}

/// `|p ∩ c| / |p|`, 0 for an empty parent set.
pub fn word_share(parent: &BTreeSet<String>, child: &BTreeSet<String>) -> f64 {
    if parent.is_empty() {
        return 0.0;
    }
    parent.intersection(child).count() as f64 / parent.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierEdge {
    pub parent: String,
    pub child: String,
    pub weight: f64,
}

/// Links each chunk to every chunk of the next-smaller window whose word
/// range overlaps it. Pairs with zero weight are not linked. `levels` holds
/// one text's chunks per window, smallest window first.
pub fn build_hierarchy(levels: &[Vec<Chunk>]) -> Result<Vec<HierEdge>, ChunkError> {
    let mut edges = Vec::new();
    for pair in levels.windows(2) {
        let (children, parents) = (&pair[0], &pair[1]);
        for p in parents {
            // children are sorted by start; skip those ending before p starts
            let first = children.partition_point(|c| c.end_index() <= p.start_index);
            for c in children[first..].iter().take_while(|c| c.start_index < p.end_index()) {
                let weight = parent_child_weight(p, c)?;
                if weight > 0.0 {
                    edges.push(HierEdge {
                        parent: p.chunk_id.clone(),
                        child: c.chunk_id.clone(),
                        weight,
                    });
                }
            }
        }
    }
    Ok(edges)
}

pub const INVENTORY_HEADER: [&str; 6] = ["chunk_id", "origin", "window", "start_index", "word_count", "text"];

pub fn write_inventory<'a, W, I>(chunks: I, sink: W) -> Result<(), ChunkError>
where
    W: Write,
    I: IntoIterator<Item = &'a Chunk>,
{
    let mut w = table::versioned_writer(sink, &INVENTORY_HEADER)?;
    for c in chunks {
        w.write_record([
            c.chunk_id.clone(),
            c.origin.key(),
            c.window.to_string(),
            c.start_index.to_string(),
            c.word_count.to_string(),
            c.text.clone(),
        ])
        .map_err(TableError::from)?;
    }
    w.flush().map_err(TableError::from)?;
    Ok(())
}

#[derive(Deserialize)]
struct InventoryRow {
    chunk_id: String,
    origin: String,
    window: usize,
    start_index: usize,
    word_count: usize,
    text: String,
}

/// Reads an inventory back. Word sets are rebuilt from the stored text.
pub fn read_inventory<R: Read>(source: R) -> Result<Vec<Chunk>, ChunkError> {
    let mut reader = table::versioned_reader(source)?;
    let mut out = Vec::new();
    for (i, rec) in reader.deserialize::<InventoryRow>().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| ChunkError::Parse {
            row,
            message: e.to_string(),
        })?;
        let origin = Origin::parse_key(&rec.origin).ok_or_else(|| ChunkError::Parse {
            row,
            message: format!("bad origin `{}`", rec.origin),
        })?;
        let tokens = text::tokenize(&rec.text);
        if tokens.len() != rec.word_count {
            return Err(ChunkError::Parse {
                row,
                message: format!(
                    "{}: text has {} words, expected {}",
                    rec.chunk_id,
                    tokens.len(),
                    rec.word_count
                ),
            });
        }
        out.push(Chunk {
            chunk_id: rec.chunk_id,
            origin,
            window: rec.window,
            start_index: rec.start_index,
            word_count: rec.word_count,
            word_set: text::word_set(&tokens),
            text: rec.text,
        });
    }
    Ok(out)
}
