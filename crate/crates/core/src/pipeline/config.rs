use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::areal::{EpochPolicy, PERIOD};
use crate::changepoint::{ScanMethod, DEFAULT_MIN_SEG};
use crate::cluster::{ClusterMethod, DEFAULT_K, DEFAULT_NEIGHBORS, DEFAULT_SCORE_DIMS};
use crate::fpca::{DEFAULT_COMPONENTS, DEFAULT_NUM_BASIS, DEFAULT_ORDER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_period")]
    pub period: [i32; 2],
    /// Inclusive year range left out of the change scan.
    #[serde(default = "default_excluded")]
    pub excluded_years: Option<[i32; 2]>,
    pub inputs: Inputs,
    #[serde(default)]
    pub audit: AuditSettings,
    #[serde(default)]
    pub merges: Vec<MergeDirective>,
    #[serde(default)]
    pub fpca: FpcaSettings,
    #[serde(default)]
    pub cluster: ClusterSettings,
    /// Directory relative input paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_period() -> [i32; 2] {
    [PERIOD.0, PERIOD.1]
}

fn default_excluded() -> Option<[i32; 2]> {
    Some([1940, 1944])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    /// CSV with `district_id,year,births,deaths`.
    pub counts: PathBuf,
    /// CSV with `district_id,year`.
    #[serde(default)]
    pub change_log: Option<PathBuf>,
    /// Weight CSVs keyed by census year.
    #[serde(default)]
    pub weights: BTreeMap<String, PathBuf>,
    /// GeoJSON boundary files keyed by census year.
    #[serde(default)]
    pub boundaries: BTreeMap<String, PathBuf>,
    /// GeoJSON of the final (target) boundaries; required with `boundaries`.
    #[serde(default)]
    pub targets: Option<PathBuf>,
    #[serde(default = "default_id_property")]
    pub id_property: String,
    #[serde(default)]
    pub epoch_policy: EpochPolicy,
}

fn default_id_property() -> String {
    "id".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    #[default]
    RankOnly,
    Calibrated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSettings {
    pub method: ScanMethod,
    pub min_seg: usize,
    pub threshold: ThresholdMode,
    pub fp_rate: f64,
    pub calibration_reps: usize,
}

impl Default for AuditSettings {
    fn default() -> Self {
        Self {
            method: ScanMethod::Level,
            min_seg: DEFAULT_MIN_SEG,
            threshold: ThresholdMode::RankOnly,
            fp_rate: 0.05,
            calibration_reps: 200,
        }
    }
}

/// Districts summed into one aggregated district.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeDirective {
    pub name: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpcaSettings {
    pub num_basis: usize,
    pub order: usize,
    pub components: usize,
}

impl Default for FpcaSettings {
    fn default() -> Self {
        Self {
            num_basis: DEFAULT_NUM_BASIS,
            order: DEFAULT_ORDER,
            components: DEFAULT_COMPONENTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSettings {
    pub method: ClusterMethod,
    pub k: usize,
    pub score_dims: usize,
    pub neighbors: usize,
    pub k_range: [usize; 2],
}

impl Default for ClusterSettings {
    fn default() -> Self {
        Self {
            method: ClusterMethod::Upgma,
            k: DEFAULT_K,
            score_dims: DEFAULT_SCORE_DIMS,
            neighbors: DEFAULT_NEIGHBORS,
            k_range: [2, 12],
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let mut config: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.base_dir = base_dir.into();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(super::Stage::Config, path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn period(&self) -> (i32, i32) {
        (self.period[0], self.period[1])
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn out_path(&self, file: &str) -> PathBuf {
        self.resolve(&self.out_dir).join(file)
    }

    /// Parsed census-year keys of a path map.
    pub fn epoch_paths(map: &BTreeMap<String, PathBuf>) -> Result<BTreeMap<i32, PathBuf>, PipelineError> {
        map.iter()
            .map(|(k, v)| {
                k.trim()
                    .parse::<i32>()
                    .map(|y| (y, v.clone()))
                    .map_err(|_| PipelineError::Config(format!("epoch key `{k}` is not a year")))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let (first, last) = self.period();
        if first >= last {
            return bad(format!("period {first}-{last} is empty"));
        }
        if let Some([a, b]) = self.excluded_years {
            if a > b || a < first || b > last {
                return bad(format!("excluded years {a}-{b} not within {first}-{last}"));
            }
        }
        if !(self.audit.fp_rate > 0.0 && self.audit.fp_rate < 1.0) {
            return bad(format!("fp_rate {} outside (0, 1)", self.audit.fp_rate));
        }
        if self.audit.threshold == ThresholdMode::Calibrated && self.audit.calibration_reps < 100 {
            return bad("calibration_reps must be at least 100".into());
        }
        if !self.inputs.weights.is_empty() && !self.inputs.boundaries.is_empty() {
            return bad("give either weight files or boundary files, not both".into());
        }
        if !self.inputs.boundaries.is_empty() && self.inputs.targets.is_none() {
            return bad("boundary files need a `targets` boundary file".into());
        }
        Self::epoch_paths(&self.inputs.weights)?;
        Self::epoch_paths(&self.inputs.boundaries)?;
        if self.cluster.k < 1 || self.cluster.score_dims < 1 {
            return bad("cluster k and score_dims must be positive".into());
        }
        if self.cluster.score_dims > self.fpca.components {
            return bad(format!(
                "cluster uses {} score dimensions but only {} components are kept",
                self.cluster.score_dims, self.fpca.components
            ));
        }
        for m in &self.merges {
            if m.members.is_empty() {
                return bad(format!("merge {} has no members", m.name));
            }
        }
        let mut paths = vec![&self.inputs.counts];
        paths.extend(self.inputs.change_log.iter());
        paths.extend(self.inputs.weights.values());
        paths.extend(self.inputs.boundaries.values());
        paths.extend(self.inputs.targets.iter());
        for p in paths {
            let full = self.resolve(p);
            if !full.exists() {
                return bad(format!("input {} does not exist", full.display()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("c.csv"), "district_id,year,births,deaths\n").unwrap();
        let c = PipelineConfig::from_toml_str("[inputs]\ncounts = \"c.csv\"\n", dir.path()).unwrap();
        assert_eq!(c.excluded_years, Some([1940, 1944]));
        assert_eq!(c.audit.min_seg, 5);
        assert_eq!(c.cluster.k, 9);
        assert_eq!(c.fpca.num_basis, 12);

        let missing = PipelineConfig::from_toml_str("[inputs]\ncounts = \"nope.csv\"\n", dir.path());
        assert!(matches!(missing, Err(PipelineError::Config(_))));
        let window = PipelineConfig::from_toml_str(
            "excluded_years = [1900, 1905]\n[inputs]\ncounts = \"c.csv\"\n",
            dir.path(),
        );
        assert!(window.is_err());
        let threshold = PipelineConfig::from_toml_str(
            "[inputs]\ncounts = \"c.csv\"\n[audit]\nthreshold = \"calibrated\"\ncalibration_reps = 500\n",
            dir.path(),
        )
        .unwrap();
        assert_eq!(threshold.audit.threshold, ThresholdMode::Calibrated);
    }
}
