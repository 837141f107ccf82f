//! Stage driver: configuration, storage, stage reports and the end-to-end
//! run with a pause for human review.

pub mod config;
pub mod stages;
pub mod storage;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

pub use config::PipelineConfig;
pub use stages::{run, RunOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing prerequisite {path}: {hint}")]
    MissingPrerequisite { path: String, hint: String },
    #[error("unsupported storage backend {0}")]
    UnsupportedScheme(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Data(String),
}

impl PipelineError {
    /// 1 for problems the user fixes in config or files, 2 for bad data.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::MissingPrerequisite { .. }
            | PipelineError::UnsupportedScheme(_)
            | PipelineError::NotFound(_) => 1,
            PipelineError::Io { .. } | PipelineError::Data(_) => 2,
        }
    }

    pub(crate) fn data(e: impl fmt::Display) -> Self {
        PipelineError::Data(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Clean,
    LrsIntxns,
    SubjIntxns,
    ExportKml,
    ImportReview,
    Traj,
    Clips,
    Template,
    Synth,
    All,
}

impl Stage {
    pub const NAMES: [&'static str; 10] = [
        "clean",
        "lrs-intxns",
        "subj-intxns",
        "export-kml",
        "import-review",
        "traj",
        "clips",
        "template",
        "synth",
        "all",
    ];

    pub fn as_str(&self) -> &'static str {
        Self::NAMES[*self as usize]
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, PipelineError> {
        use Stage::*;
        let all = [Clean, LrsIntxns, SubjIntxns, ExportKml, ImportReview, Traj, Clips, Template, Synth, All];
        all.into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage {s:?}; expected one of {}", Self::NAMES.join(", "))))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Row accounting for one stage output; `rows_in` equals `rows_out` plus
/// the sum of `drops`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub output: String,
    pub rows_in: u64,
    pub rows_out: u64,
    pub drops: BTreeMap<String, u64>,
    pub counts: BTreeMap<String, u64>,
    pub warnings: Vec<String>,
    pub wall_time_s: f64,
}

impl StageReport {
    pub fn new(stage: Stage, output: &str) -> Self {
        StageReport {
            stage: stage.as_str().into(),
            output: output.into(),
            ..StageReport::default()
        }
    }

    pub fn drop_n(&mut self, reason: &str, n: u64) {
        if n > 0 {
            *self.drops.entry(reason.into()).or_default() += n;
        }
    }

    pub fn count(&mut self, name: &str, n: u64) {
        self.counts.insert(name.into(), n);
    }

    pub fn reconciles(&self) -> bool {
        self.rows_in == self.rows_out + self.drops.values().sum::<u64>()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
