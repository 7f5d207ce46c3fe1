//! Usage and traversal metrics for transcripts of human-AI collaborative work.
//!
//! The pipeline reads a task decomposition, coded prompt/response transcripts
//! and final reports; chunks both sides into 20/50/100-word windows; links the
//! chunks into a layered semantic graph scored by a similarity provider;
//! propagates chunk similarities up to per-subtask scores; and computes
//! word-, number- and structure-based measures for every participant-subtask.

pub mod chunker;
pub mod corpus;
pub mod decomposition;
pub mod metrics;
pub mod pipeline;
pub mod propagation;
pub mod semgraph;
pub mod simprovider;
pub mod stats;
pub mod table;
pub mod text;
