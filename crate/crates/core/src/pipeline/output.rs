use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::stages::{
    apply_merges, calibrate_family_threshold, cluster_scores, interpolate, rate_table, run_audit, run_fpca,
    AuditOutcome, ClusterOutcome, DistrictCounts, InterpolatedTable,
};
use super::{ingest, PipelineConfig, PipelineError, Stage, ThresholdMode};
use crate::areal::YearSource;
use crate::cluster::write_index_csv;
use crate::fpca::FpcaModel;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Files written by a full run, besides the manifest.
pub const ARTIFACT_FILES: [&str; 9] = [
    "interpolated_counts.csv",
    "audit_report.csv",
    "audit_curves.csv",
    "rates.csv",
    "fpca_model.json",
    "fpca_scores.csv",
    "cluster_assignments.csv",
    "cluster_indices.csv",
    "dendrogram.json",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
    pub thresholds: Vec<Option<f64>>,
    pub audit_failures: Vec<(u8, String, String)>,
    pub skipped_curves: Vec<(String, String)>,
    pub merged_away: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn csv_bytes(write: impl FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>) -> Result<Vec<u8>, PipelineError> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        write(&mut w).map_err(|e| PipelineError::stage(Stage::Output, e))?;
        w.flush().map_err(|e| PipelineError::stage(Stage::Output, e))?;
    }
    Ok(buf)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn interpolated_csv(table: &InterpolatedTable) -> Result<Vec<u8>, PipelineError> {
    csv_bytes(|w| {
        w.write_record(["district_id", "year", "births", "deaths", "source"])?;
        for d in &table.districts {
            let sources = table.sources.get(&d.district_id);
            for (k, year) in d.years.iter().enumerate() {
                let source = match sources.and_then(|s| s.get(k)) {
                    Some(YearSource::Interpolated { epoch }) => epoch.to_string(),
                    _ => "raw".to_string(),
                };
                w.write_record([d.district_id.clone(), year.to_string(), opt(d.births[k]), opt(d.deaths[k]), source])?;
            }
        }
        Ok(())
    })
}

pub fn counts_csv(districts: &[DistrictCounts]) -> Result<Vec<u8>, PipelineError> {
    csv_bytes(|w| {
        w.write_record(["district_id", "year", "births", "deaths"])?;
        for d in districts {
            for (k, year) in d.years.iter().enumerate() {
                w.write_record([d.district_id.clone(), year.to_string(), opt(d.births[k]), opt(d.deaths[k])])?;
            }
        }
        Ok(())
    })
}

pub fn audit_report_csv(outcomes: &[AuditOutcome]) -> Result<Vec<u8>, PipelineError> {
    csv_bytes(|w| {
        w.write_record([
            "round",
            "rank",
            "district_id",
            "tau_hat",
            "t_max",
            "nearest_change",
            "distance",
            "exceeds_threshold",
        ])?;
        for o in outcomes {
            for (r, e) in o.report.entries.iter().enumerate() {
                w.write_record([
                    o.round.to_string(),
                    (r + 1).to_string(),
                    e.district_id.clone(),
                    e.tau_hat.to_string(),
                    e.t_max.to_string(),
                    opt(e.nearest_change),
                    opt(e.distance),
                    opt(e.exceeds_threshold),
                ])?;
            }
        }
        Ok(())
    })
}

pub fn audit_curves_csv(outcomes: &[AuditOutcome]) -> Result<Vec<u8>, PipelineError> {
    csv_bytes(|w| {
        w.write_record(["round", "district_id", "tau", "statistic"])?;
        for o in outcomes {
            for s in &o.scans {
                for (tau, t) in s.tau_grid.iter().zip(&s.statistics) {
                    let stat = if t.is_nan() { String::new() } else { t.to_string() };
                    w.write_record([o.round.to_string(), s.district_id.clone(), tau.to_string(), stat])?;
                }
            }
        }
        Ok(())
    })
}

pub fn rates_csv(districts: &[DistrictCounts]) -> Result<Vec<u8>, PipelineError> {
    let rates = rate_table(districts);
    csv_bytes(|w| {
        w.write_record(["district_id", "year", "births", "deaths", "rate"])?;
        for (d, r) in districts.iter().zip(&rates) {
            for (k, year) in d.years.iter().enumerate() {
                w.write_record([
                    d.district_id.clone(),
                    year.to_string(),
                    opt(d.births[k]),
                    opt(d.deaths[k]),
                    opt(r.values[k]),
                ])?;
            }
        }
        Ok(())
    })
}

pub fn fpca_json(model: &FpcaModel) -> Result<Vec<u8>, PipelineError> {
    model.to_json().map(String::into_bytes).map_err(|e| PipelineError::stage(Stage::Output, e))
}

pub fn scores_csv(model: &FpcaModel) -> Result<Vec<u8>, PipelineError> {
    let mut buf = Vec::new();
    model.write_scores_csv(&mut buf).map_err(|e| PipelineError::stage(Stage::Output, e))?;
    Ok(buf)
}

pub fn assignments_csv(outcome: &ClusterOutcome) -> Result<Vec<u8>, PipelineError> {
    let mut buf = Vec::new();
    outcome
        .assignment
        .write_csv(&outcome.district_ids, &mut buf)
        .map_err(|e| PipelineError::stage(Stage::Output, e))?;
    Ok(buf)
}

pub fn indices_csv(outcome: &ClusterOutcome) -> Result<Vec<u8>, PipelineError> {
    let mut buf = Vec::new();
    write_index_csv(&outcome.indices, &mut buf).map_err(|e| PipelineError::stage(Stage::Output, e))?;
    Ok(buf)
}

pub fn dendrogram_json(outcome: &ClusterOutcome) -> Result<Vec<u8>, PipelineError> {
    serde_json::to_vec_pretty(&outcome.dendrogram.to_json(&outcome.district_ids))
        .map_err(|e| PipelineError::stage(Stage::Output, e))
}

/// Writes `bytes` to `dir/file` and returns its digest entry.
pub fn write_artifact(dir: &Path, file: &str, bytes: &[u8]) -> Result<Artifact, PipelineError> {
    let path = dir.join(file);
    std::fs::write(&path, bytes).map_err(|e| PipelineError::io(Stage::Output, &path, e))?;
    Ok(Artifact {
        file: file.to_string(),
        sha256: sha256_hex(bytes),
        bytes: bytes.len(),
    })
}

/// Digest of the configuration with the output directory left out, so the
/// same analysis written elsewhere hashes identically.
pub fn config_digest(config: &PipelineConfig) -> String {
    let mut c = config.clone();
    c.out_dir = PathBuf::new();
    sha256_hex(c.to_toml().as_bytes())
}

fn input_digests(config: &PipelineConfig) -> Result<Vec<Artifact>, PipelineError> {
    let mut paths: Vec<&PathBuf> = vec![&config.inputs.counts];
    paths.extend(config.inputs.change_log.iter());
    paths.extend(config.inputs.weights.values());
    paths.extend(config.inputs.boundaries.values());
    paths.extend(config.inputs.targets.iter());
    paths
        .into_iter()
        .map(|p| {
            let full = config.resolve(p);
            let bytes = std::fs::read(&full).map_err(|e| PipelineError::io(Stage::Ingest, &full, e))?;
            Ok(Artifact {
                file: p.display().to_string(),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len(),
            })
        })
        .collect()
}

/// Audit with the configured threshold mode.
pub fn audit_round(
    config: &PipelineConfig,
    districts: &[DistrictCounts],
    round: u8,
) -> Result<AuditOutcome, PipelineError> {
    let mut outcome = run_audit(districts, &config.audit, config.excluded_years, None, round);
    if config.audit.threshold == ThresholdMode::Calibrated {
        let seed = config.seed.wrapping_add(u64::from(round));
        let t = calibrate_family_threshold(districts, &outcome, &config.audit, config.excluded_years, seed)?;
        outcome.report = outcome.report.with_threshold(t);
    }
    Ok(outcome)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    pub audits: Vec<AuditOutcome>,
    pub model: FpcaModel,
    pub clusters: ClusterOutcome,
}

/// Runs every stage and writes the artifacts plus `manifest.json`.
pub fn run_full(config: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    let inputs = input_digests(config)?;
    let data = ingest(config)?;
    let table = interpolate(&data, config.inputs.epoch_policy, config.period())?;

    let mut audits = vec![audit_round(config, &table.districts, 1)?];
    let merged = apply_merges(table.districts.clone(), &config.merges)?;
    if !config.merges.is_empty() {
        audits.push(audit_round(config, &merged, 2)?);
    }
    let (model, skipped_curves) = run_fpca(&rate_table(&merged), &config.fpca, config.period())?;
    let clusters = cluster_scores(&model, &config.cluster, config.seed)?;

    let out_dir = config.resolve(&config.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| PipelineError::io(Stage::Output, &out_dir, e))?;
    let contents: [Vec<u8>; 9] = [
        interpolated_csv(&table)?,
        audit_report_csv(&audits)?,
        audit_curves_csv(&audits)?,
        rates_csv(&merged)?,
        fpca_json(&model)?,
        scores_csv(&model)?,
        assignments_csv(&clusters)?,
        indices_csv(&clusters)?,
        dendrogram_json(&clusters)?,
    ];
    let artifacts = ARTIFACT_FILES
        .iter()
        .zip(&contents)
        .map(|(file, bytes)| write_artifact(&out_dir, file, bytes))
        .collect::<Result<Vec<_>, _>>()?;

    let manifest = Manifest {
        tool: "imaudit".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: config.seed,
        config_sha256: config_digest(config),
        inputs,
        artifacts,
        thresholds: audits.iter().map(|a| a.report.threshold).collect(),
        audit_failures: audits
            .iter()
            .flat_map(|a| a.failures.iter().map(|(d, e)| (a.round, d.clone(), e.clone())))
            .collect(),
        skipped_curves,
        merged_away: config.merges.iter().flat_map(|m| m.members.iter().cloned()).collect(),
    };
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| PipelineError::stage(Stage::Output, e))?;
    write_artifact(&out_dir, MANIFEST_FILE, &bytes)?;
    Ok(RunSummary {
        out_dir,
        manifest,
        audits,
        model,
        clusters,
    })
}
