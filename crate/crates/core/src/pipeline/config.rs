//! Pipeline configuration file (TOML). Relative paths resolve against the
//! directory holding the configuration file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::GradeSchema;
use crate::decomposition::DistanceMode;
use crate::metrics::{AttentionSource, DiversityVariant, FrontierTiming, MetricsConfig, NumberFilter};
use crate::propagation::{ChildInputs, PropagationConfig};
use crate::semgraph::GraphOptions;
use crate::simprovider::RemoteSettings;

/// Overrides `provider.endpoint` for the remote provider.
pub const ENDPOINT_ENV: &str = "COLLABTRACE_SCORER_URL";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: Inputs,
    /// Output directory.
    pub output_dir: PathBuf,
    /// The pipeline has no random components; the flag records that and must
    /// stay `true`.
    #[serde(default = "yes")]
    pub random_free: bool,
    pub provider: ProviderConfig,
    #[serde(default)]
    pub chunking: ChunkingConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub propagation: PropagationSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub grades: GradeSchema,
    /// Directory the relative paths resolve against. Not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub decomposition: PathBuf,
    pub transcripts: PathBuf,
    /// Directory of `<participant_id>.txt` report files.
    pub reports: PathBuf,
    #[serde(default)]
    pub grades: Option<PathBuf>,
    /// Extra stop words, one per line.
    #[serde(default)]
    pub stopwords_extra: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    File,
    Constant,
    Lexical,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Score table for `file`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Score for `constant`.
    #[serde(default)]
    pub value: Option<f64>,
    /// Base URL for `remote`.
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_ready")]
    pub ready_timeout_secs: f64,
}

fn default_batch() -> usize {
    64
}
fn default_in_flight() -> usize {
    4
}
fn default_timeout() -> f64 {
    60.0
}
fn default_ready() -> f64 {
    120.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkingConfig {
    #[serde(default = "default_windows")]
    pub windows: Vec<usize>,
    #[serde(default)]
    pub include_uncoded: bool,
}

fn default_windows() -> Vec<usize> {
    vec![20, 50, 100]
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            windows: default_windows(),
            include_uncoded: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    #[serde(default)]
    pub score_floor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationSection {
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_steepness")]
    pub steepness: f64,
    #[serde(default)]
    pub child_inputs: ChildInputs,
}

fn default_k_max() -> usize {
    1000
}
fn default_epsilon() -> f64 {
    1e-9
}
fn default_steepness() -> f64 {
    1.0
}

impl Default for PropagationSection {
    fn default() -> Self {
        Self {
            k_max: default_k_max(),
            epsilon: default_epsilon(),
            steepness: default_steepness(),
            child_inputs: ChildInputs::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(default)]
    pub attention_source: AttentionSource,
    #[serde(default)]
    pub diversity: DiversityVariant,
    #[serde(default)]
    pub frontier_timing: FrontierTiming,
    #[serde(default)]
    pub distance_mode: DistanceModeName,
    #[serde(default)]
    pub numbers: NumberFilter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceModeName {
    #[default]
    Hierarchy,
    HierarchyAndDependencies,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let w = &self.chunking.windows;
        if w.len() < 2 {
            return bad(format!("chunking.windows needs at least two sizes, got {w:?}"));
        }
        if let Some(&odd) = w.iter().find(|&&x| x == 0 || x % 2 != 0) {
            return bad(format!("chunking.windows: {odd} is not a positive even number"));
        }
        if !w.windows(2).all(|p| p[0] < p[1]) {
            return bad(format!("chunking.windows must be strictly increasing, got {w:?}"));
        }
        if !self.random_free {
            return bad("random_free must be true: the pipeline has no random components".into());
        }
        let p = &self.propagation;
        if p.k_max == 0 || !(p.epsilon > 0.0) || !(p.steepness > 0.0) {
            return bad("propagation: k_max ≥ 1, epsilon > 0 and steepness > 0 required".into());
        }
        if let Some(f) = self.graph.score_floor {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("graph.score_floor {f} outside [0, 1]"));
            }
        }
        let n = &self.metrics.numbers;
        if n.common_min > n.common_max || n.year_min > n.year_max {
            return bad("metrics.numbers: min above max".into());
        }
        if self.grades.min > self.grades.max {
            return bad("grades: min above max".into());
        }
        let pr = &self.provider;
        match pr.kind {
            ProviderKind::File if pr.path.is_none() => return bad("provider.path required for kind = \"file\"".into()),
            ProviderKind::Constant => match pr.value {
                Some(v) if v.is_finite() => {}
                _ => return bad("provider.value required for kind = \"constant\"".into()),
            },
            ProviderKind::Remote => {
                if pr.endpoint.is_none() && std::env::var(ENDPOINT_ENV).is_err() {
                    return bad(format!(
                        "provider.endpoint or {ENDPOINT_ENV} required for kind = \"remote\""
                    ));
                }
                if pr.batch_size == 0 || pr.max_in_flight == 0 || !(pr.timeout_secs > 0.0) {
                    return bad("provider: batch_size, max_in_flight and timeout_secs must be positive".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn graph_options(&self) -> GraphOptions {
        GraphOptions {
            windows: self.chunking.windows.clone(),
            include_uncoded: self.chunking.include_uncoded,
            score_floor: self.graph.score_floor,
        }
    }

    pub fn propagation_config(&self) -> PropagationConfig {
        PropagationConfig {
            k_max: self.propagation.k_max,
            epsilon: self.propagation.epsilon,
            child_inputs: self.propagation.child_inputs,
        }
    }

    pub fn metrics_config(&self) -> MetricsConfig {
        MetricsConfig {
            attention_source: self.metrics.attention_source,
            diversity: self.metrics.diversity,
            frontier_timing: self.metrics.frontier_timing,
            distance_mode: match self.metrics.distance_mode {
                DistanceModeName::Hierarchy => DistanceMode::Hierarchy,
                DistanceModeName::HierarchyAndDependencies => DistanceMode::HierarchyAndDependencies,
            },
            numbers: self.metrics.numbers.clone(),
        }
    }

    /// Remote settings with the environment override applied.
    pub fn remote_settings(&self) -> Option<RemoteSettings> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .ok()
            .or_else(|| self.provider.endpoint.clone())?;
        let mut s = RemoteSettings::new(endpoint);
        s.batch_size = self.provider.batch_size;
        s.max_in_flight = self.provider.max_in_flight;
        s.timeout = Duration::from_secs_f64(self.provider.timeout_secs);
        s.ready_timeout = Duration::from_secs_f64(self.provider.ready_timeout_secs.max(0.0));
        Some(s)
    }
}
