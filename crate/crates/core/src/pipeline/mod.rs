//! End-to-end batch workflow: ingest raw counts and boundaries, build
//! boundary-consistent series, audit them for abrupt changes, apply declared
//! merges, and cluster the resulting rate curves.

mod config;
pub mod fixtures;
mod ingest;
pub mod output;
mod stages;

pub use config::{
    AuditSettings, ClusterSettings, FpcaSettings, Inputs, MergeDirective, PipelineConfig, ThresholdMode,
};
pub use ingest::{ingest, read_change_log, read_counts, CountTable, IngestedData, YearCounts};
pub use output::{audit_round, run_full, Artifact, Manifest, RunSummary, ARTIFACT_FILES, MANIFEST_FILE};
pub use stages::{
    apply_merges, calibrate_family_threshold, cluster_scores, compute_rates, interpolate, rate_table,
    run_audit, run_fpca, death_series, AuditOutcome, ClusterOutcome, DistrictCounts, InterpolatedTable,
};

use std::fmt;
use std::path::PathBuf;

/// Workflow stage, used to tag diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Interpolate,
    Audit,
    Merge,
    Rates,
    Fpca,
    Cluster,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Interpolate => "interpolate",
            Stage::Audit => "audit",
            Stage::Merge => "merge",
            Stage::Rates => "rates",
            Stage::Fpca => "fpca",
            Stage::Cluster => "cluster",
            Stage::Output => "output",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("[config] {0}")]
    Config(String),
    #[error("[{stage}] {path}: {source}")]
    Io {
        stage: Stage,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("[ingest] {file} line {line}: {detail}")]
    Parse { file: String, line: u64, detail: String },
    #[error("[ingest] {file} line {line}: {detail}")]
    Schema { file: String, line: u64, detail: String },
    #[error("[ingest] {file} line {line}: duplicate row for ({district}, {year}), first seen on line {first_line}")]
    DuplicateKey {
        file: String,
        line: u64,
        first_line: u64,
        district: String,
        year: i32,
    },
    #[error("[merge] unknown district {district} in merge {merge}")]
    UnknownDistrict { merge: String, district: String },
    #[error("[merge] district {district} appears in more than one merge")]
    OverlappingMerge { district: String },
    #[error("[{stage}] {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    pub fn stage(stage: Stage, message: impl fmt::Display) -> Self {
        PipelineError::Stage {
            stage,
            message: message.to_string(),
        }
    }

    pub fn io(stage: Stage, path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            stage,
            path: path.into(),
            source,
        }
    }
}
