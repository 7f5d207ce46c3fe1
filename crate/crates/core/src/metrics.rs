//! Usage measures (word overlap, number matches, composite) and traversal
//! measures (coherence, diversity, attention and the information frontier).

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Report, Speaker, TurnRecord, Utterance};
use crate::decomposition::{Decomposition, DecompositionError, DistanceMode};
use crate::stats;
use crate::text::{self, StopWords};

/// Cumulative attention at which a subtask joins the frontier.
pub const ACTIVATION_THRESHOLD: f64 = 0.25;
/// Attention is accumulated in f64; sums of 1/N terms that equal the
/// threshold exactly in rationals may land a few ulps below it.
const ACTIVATION_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Decomposition(#[from] DecompositionError),
    #[error("utterance {got} does not follow {after}")]
    OutOfOrder { after: usize, got: usize },
    #[error("composite needs at least 3 complete rows, got {0}")]
    InsufficientRows(usize),
    #[error("every composite input column has zero variance")]
    NoVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiversityVariant {
    /// Mean distance over all pairs of the union of prompt and response codes.
    #[default]
    UnionPairs,
    /// Mean distance over (prompt code, response code) pairs.
    CrossPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSource {
    #[default]
    All,
    PromptsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrontierTiming {
    /// Distance against the frontier as it stood before the mentioning utterance.
    #[default]
    Before,
    After,
}

/// Numbers dropped from matching: small integers, and plain four-digit
/// integers that read as years.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumberFilter {
    pub common_min: u64,
    pub common_max: u64,
    pub year_min: u64,
    pub year_max: u64,
}

impl Default for NumberFilter {
    fn default() -> Self {
        Self {
            common_min: 1,
            common_max: 20,
            year_min: 1900,
            year_max: 2100,
        }
    }
}

impl NumberFilter {
    pub fn keeps(&self, n: &text::Number) -> bool {
        match n.integer {
            Some(v) if (self.common_min..=self.common_max).contains(&v) => false,
            // "2,022" is written as an amount, not a year
            Some(v) if !n.grouped && (self.year_min..=self.year_max).contains(&v) => false,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsConfig {
    pub attention_source: AttentionSource,
    pub diversity: DiversityVariant,
    pub frontier_timing: FrontierTiming,
    pub distance_mode: DistanceMode,
    pub numbers: NumberFilter,
}

/// Mean decomposition distance over all unordered pairs of `codes`; 0 for
/// fewer than two codes.
pub fn pairwise_mean_distance<'a, I>(codes: I, d: &Decomposition, mode: DistanceMode) -> Result<f64, DecompositionError>
where
    I: IntoIterator<Item = &'a String>,
{
    let codes: Vec<&String> = codes.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    let n = codes.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut total = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            total += d.distance_with(codes[i], codes[j], mode)? as u64;
        }
    }
    Ok(total as f64 / (n * (n - 1) / 2) as f64)
}

pub fn coherence(u: &Utterance, d: &Decomposition, mode: DistanceMode) -> Result<f64, DecompositionError> {
    pairwise_mean_distance(&u.subtask_codes, d, mode)
}

pub fn diversity(
    t: &TurnRecord,
    d: &Decomposition,
    variant: DiversityVariant,
    mode: DistanceMode,
) -> Result<f64, DecompositionError> {
    let (p, r) = (&t.prompt.subtask_codes, &t.response.subtask_codes);
    match variant {
        DiversityVariant::UnionPairs => pairwise_mean_distance(p.union(r), d, mode),
        DiversityVariant::CrossPairs => {
            if p.is_empty() || r.is_empty() {
                return Ok(0.0);
            }
            let mut total = 0u64;
            for a in p {
                for b in r {
                    total += d.distance_with(a, b, mode)? as u64;
                }
            }
            Ok(total as f64 / (p.len() * r.len()) as f64)
        }
    }
}

/// (prompt codes the response missed, response codes the prompt did not ask for)
pub fn unanswered_unsolicited(t: &TurnRecord) -> (BTreeSet<String>, BTreeSet<String>) {
    let (p, r) = (&t.prompt.subtask_codes, &t.response.subtask_codes);
    (p.difference(r).cloned().collect(), r.difference(p).cloned().collect())
}

/// Each code of the utterance receives 1/N.
pub fn attention_allocation(u: &Utterance) -> BTreeMap<String, f64> {
    let n = u.subtask_codes.len();
    u.subtask_codes.iter().map(|s| (s.clone(), 1.0 / n as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierState {
    pub participant_id: String,
    pub cumulative_attention: BTreeMap<String, f64>,
    pub frontier: BTreeSet<String>,
    /// Index of the last utterance folded in.
    pub as_of_utterance: Option<usize>,
}

impl FrontierState {
    pub fn new(participant_id: &str) -> Self {
        Self {
            participant_id: participant_id.to_string(),
            cumulative_attention: BTreeMap::new(),
            frontier: BTreeSet::new(),
            as_of_utterance: None,
        }
    }

    /// Folds utterance number `index` into the state.
    pub fn advance(&mut self, index: usize, u: &Utterance, source: AttentionSource) -> Result<(), MetricsError> {
        if let Some(prev) = self.as_of_utterance {
            if index <= prev {
                return Err(MetricsError::OutOfOrder {
                    after: prev,
                    got: index,
                });
            }
        }
        self.as_of_utterance = Some(index);
        if source == AttentionSource::PromptsOnly && u.speaker != Speaker::Prompt {
            return Ok(());
        }
        for (s, a) in attention_allocation(u) {
            let total = self.cumulative_attention.entry(s.clone()).or_insert(0.0);
            *total += a;
            if *total >= ACTIVATION_THRESHOLD - ACTIVATION_SLACK {
                self.frontier.insert(s);
            }
        }
        Ok(())
    }
}

pub fn advance_frontier(
    state: &FrontierState,
    index: usize,
    u: &Utterance,
    source: AttentionSource,
) -> Result<FrontierState, MetricsError> {
    let mut next = state.clone();
    next.advance(index, u, source)?;
    Ok(next)
}

/// Shortest distance from `s` to any frontier member; `None` while the
/// frontier is empty.
pub fn distance_to_frontier(
    s: &str,
    state: &FrontierState,
    d: &Decomposition,
    mode: DistanceMode,
) -> Result<Option<u32>, DecompositionError> {
    if !d.contains(s) {
        return Err(DecompositionError::UnknownId(s.to_string()));
    }
    let mut best = None;
    for f in &state.frontier {
        let dist = d.distance_with(s, f, mode)?;
        best = Some(best.map_or(dist, |b: u32| b.min(dist)));
        if dist == 0 {
            break;
        }
    }
    Ok(best)
}

/// Distinct non-stop-word tokens of each utterance that occur in the report,
/// summed over utterances.
pub fn word_overlap(utterances: &[&Utterance], report_words: &BTreeSet<String>, stopwords: &StopWords) -> usize {
    utterances
        .iter()
        .map(|u| {
            let own: BTreeSet<String> = u.tokens().into_iter().map(|t| t.canon).collect();
            own.iter()
                .filter(|w| !stopwords.contains(w) && report_words.contains(*w))
                .count()
        })
        .sum()
}

/// Canonical numeric values in a text.
pub fn numbers_in(tokens: &[text::Token]) -> Vec<text::Number> {
    tokens.iter().filter_map(|t| text::parse_number(&t.canon)).collect()
}

/// Distinct numeric values from the utterances that survive the filter and
/// also occur, after the same normalization, in the report.
pub fn number_matches(utterances: &[&Utterance], report: &Report, filter: &NumberFilter) -> usize {
    let in_report: BTreeSet<String> = numbers_in(&report.tokens()).into_iter().map(|n| n.value).collect();
    let mut found = BTreeSet::new();
    for u in utterances {
        for n in numbers_in(&u.tokens()) {
            if filter.keeps(&n) && in_report.contains(&n.value) {
                found.insert(n.value);
            }
        }
    }
    found.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub participant_id: String,
    pub turn_index: u32,
    pub speaker: Speaker,
    pub index: usize,
    pub subtask_codes: Vec<String>,
    /// `None` for an uncoded utterance.
    pub coherence: Option<f64>,
    pub attention: BTreeMap<String, f64>,
    pub frontier_size: usize,
    /// Distance to frontier for each code, at the configured timing.
    pub distance_to_frontier: BTreeMap<String, Option<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnMetrics {
    pub participant_id: String,
    pub turn_index: u32,
    pub response_missing: bool,
    /// `None` when neither side is coded.
    pub diversity: Option<f64>,
    pub unanswered: BTreeSet<String>,
    pub unsolicited: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalRow {
    pub participant_id: String,
    pub subtask_id: String,
    pub in_transcript: bool,
    pub avg_response_coherence: Option<f64>,
    pub median_diversity: Option<f64>,
    pub avg_distance_to_frontier: Option<f64>,
    pub mention_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantTraversal {
    pub utterances: Vec<UtteranceMetrics>,
    pub turns: Vec<TurnMetrics>,
    pub rows: Vec<TraversalRow>,
    pub final_frontier: FrontierState,
}

/// Walks one participant's turns in order and aggregates per subtask. Rows
/// cover every non-root subtask of the decomposition.
pub fn participant_traversal(
    participant_id: &str,
    turns: &[TurnRecord],
    d: &Decomposition,
    config: &MetricsConfig,
) -> Result<ParticipantTraversal, MetricsError> {
    let mode = config.distance_mode;
    let mut state = FrontierState::new(participant_id);
    let mut utterances = Vec::new();
    let mut turn_rows = Vec::new();
    let mut coherence_by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut diversity_by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut distance_by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut mentions: BTreeMap<&str, usize> = BTreeMap::new();

    let mut index = 0;
    for t in turns {
        let sides: &[&Utterance] = if t.response_missing {
            &[&t.prompt]
        } else {
            &[&t.prompt, &t.response]
        };
        for u in sides {
            let before = state.clone();
            state.advance(index, u, config.attention_source)?;
            let reference = match config.frontier_timing {
                FrontierTiming::Before => &before,
                FrontierTiming::After => &state,
            };
            let mut distances = BTreeMap::new();
            for s in &u.subtask_codes {
                let dist = distance_to_frontier(s, reference, d, mode)?;
                if let Some(x) = dist {
                    distance_by.entry(s).or_default().push(x as f64);
                }
                distances.insert(s.clone(), dist);
                *mentions.entry(s).or_insert(0) += 1;
            }
            let coh = if u.is_coded() {
                Some(coherence(u, d, mode)?)
            } else {
                None
            };
            if let (Some(c), Speaker::Response) = (coh, u.speaker) {
                for s in &u.subtask_codes {
                    coherence_by.entry(s).or_default().push(c);
                }
            }
            utterances.push(UtteranceMetrics {
                participant_id: participant_id.to_string(),
                turn_index: u.turn_index,
                speaker: u.speaker,
                index,
                subtask_codes: u.subtask_codes.iter().cloned().collect(),
                coherence: coh,
                attention: if config.attention_source == AttentionSource::PromptsOnly && u.speaker != Speaker::Prompt {
                    BTreeMap::new()
                } else {
                    attention_allocation(u)
                },
                frontier_size: state.frontier.len(),
                distance_to_frontier: distances,
            });
            index += 1;
        }

        let union: BTreeSet<&String> = t.prompt.subtask_codes.union(&t.response.subtask_codes).collect();
        let div = if union.is_empty() {
            None
        } else {
            Some(diversity(t, d, config.diversity, mode)?)
        };
        if let Some(v) = div {
            for s in &union {
                diversity_by.entry(s.as_str()).or_default().push(v);
            }
        }
        let (unanswered, unsolicited) = unanswered_unsolicited(t);
        turn_rows.push(TurnMetrics {
            participant_id: participant_id.to_string(),
            turn_index: t.turn_index,
            response_missing: t.response_missing,
            diversity: div,
            unanswered,
            unsolicited,
        });
    }

    let rows = d
        .nodes()
        .iter()
        .filter(|n| n.id != d.root_id())
        .map(|n| {
            let s = n.id.as_str();
            let mention_count = mentions.get(s).copied().unwrap_or(0);
            TraversalRow {
                participant_id: participant_id.to_string(),
                subtask_id: n.id.clone(),
                in_transcript: mention_count >= 1,
                avg_response_coherence: coherence_by.get(s).and_then(|v| stats::mean(v)),
                median_diversity: diversity_by.get(s).and_then(|v| stats::median(v)),
                avg_distance_to_frontier: distance_by.get(s).and_then(|v| stats::mean(v)),
                mention_count,
            }
        })
        .collect();

    Ok(ParticipantTraversal {
        utterances,
        turns: turn_rows,
        rows,
        final_frontier: state,
    })
}

/// Word overlap and number matches for every subtask coded on at least one
/// response utterance.
pub fn usage_counts(
    turns: &[TurnRecord],
    report: &Report,
    stopwords: &StopWords,
    filter: &NumberFilter,
) -> BTreeMap<String, (usize, usize)> {
    let report_words: BTreeSet<String> = report.tokens().into_iter().map(|t| t.canon).collect();
    let mut by: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
    for t in turns.iter().filter(|t| !t.response_missing) {
        for s in &t.response.subtask_codes {
            by.entry(s).or_default().push(&t.response);
        }
    }
    by.into_iter()
        .map(|(s, us)| {
            (
                s.to_string(),
                (
                    word_overlap(&us, &report_words, stopwords),
                    number_matches(&us, report, filter),
                ),
            )
        })
        .collect()
}

pub const COMPOSITE_COLUMNS: [&str; 3] = ["semantic_similarity", "log_word_overlap", "log_number_matches"];

/// First principal component of standardized data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// Indices of the input columns kept (zero-variance columns are dropped).
    pub columns: Vec<usize>,
    pub means: Vec<f64>,
    pub std_devs: Vec<f64>,
    /// Unit-length loadings over the kept columns, first loading positive.
    pub loadings: Vec<f64>,
    pub eigenvalue: f64,
    /// Share of total standardized variance on the component, in [0, 1].
    pub explained_variance: f64,
    pub scores: Vec<f64>,
}

/// Standardizes each column (sample standard deviation), takes the leading
/// eigenvector of the correlation matrix and projects the rows onto it.
pub fn first_component(data: &DMatrix<f64>) -> Result<Pca, MetricsError> {
    let n = data.nrows();
    if n < 3 {
        return Err(MetricsError::InsufficientRows(n));
    }
    let mut columns = Vec::new();
    let mut means = Vec::new();
    let mut std_devs = Vec::new();
    for (j, col) in data.column_iter().enumerate() {
        let mean = col.mean();
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        if sd > 0.0 && sd.is_finite() {
            columns.push(j);
            means.push(mean);
            std_devs.push(sd);
        } else {
            log::warn!("composite input column {j} has zero variance and is dropped");
        }
    }
    if columns.is_empty() {
        return Err(MetricsError::NoVariance);
    }
    let z = DMatrix::from_fn(n, columns.len(), |i, k| {
        (data[(i, columns[k])] - means[k]) / std_devs[k]
    });
    let corr = z.transpose() * &z / (n - 1) as f64;
    let eig = SymmetricEigen::new(corr.clone());
    let (top, &eigenvalue) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    let mut v: DVector<f64> = eig.eigenvectors.column(top).into_owned();
    let lead = v.iter().copied().find(|x| x.abs() > 1e-12).unwrap_or(1.0);
    if lead < 0.0 {
        v = -v;
    }
    let scores = (&z * &v).iter().copied().collect();
    Ok(Pca {
        columns,
        means,
        std_devs,
        loadings: v.iter().copied().collect(),
        eigenvalue,
        explained_variance: eigenvalue / corr.trace(),
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageInput {
    pub semantic_similarity: Option<f64>,
    pub word_overlap: Option<usize>,
    pub number_matches: Option<usize>,
}

impl UsageInput {
    /// `[similarity, ln(1+overlap), ln(1+numbers)]` when all three are present.
    pub fn features(&self) -> Option<[f64; 3]> {
        Some([
            self.semantic_similarity?,
            (self.word_overlap? as f64).ln_1p(),
            (self.number_matches? as f64).ln_1p(),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeUsage {
    pub pca: Pca,
    /// One entry per input row; `None` where an input was missing.
    pub composite: Vec<Option<f64>>,
}

pub fn composite_usage(rows: &[UsageInput]) -> Result<CompositeUsage, MetricsError> {
    let complete: Vec<(usize, [f64; 3])> = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.features().map(|f| (i, f)))
        .collect();
    let data = DMatrix::from_fn(complete.len(), 3, |i, j| complete[i].1[j]);
    let pca = first_component(&data)?;
    let mut composite = vec![None; rows.len()];
    for ((i, _), s) in complete.iter().zip(&pca.scores) {
        composite[*i] = Some(*s);
    }
    Ok(CompositeUsage { pca, composite })
}
