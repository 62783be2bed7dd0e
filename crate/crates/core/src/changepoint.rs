//! Single-changepoint scan for abrupt level shifts in trending count series.
//!
//! For every admissible change year `τ` the statistic is
//! `T_τ = 2 (max L_τ − max L_n)`, the likelihood-ratio between a model whose
//! intercept shifts strictly after `τ` and the no-change trend model. The
//! candidate change is the year with the largest statistic. Series are then
//! ranked by that maximum so an analyst can review the strongest evidence first.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::series_model::{
    level_change_from_obs, level_trend_change_from_obs, null_from_obs, CountSeries, ModelError,
    TrendPoissonFit,
};

pub const DEFAULT_MIN_SEG: usize = 5;

/// Alternative model used by the scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScanMethod {
    /// Intercept shift with a slope shared across the change (method 1).
    #[default]
    Level,
    /// Intercept and slope both free after the change (method 2).
    LevelOrTrend,
}

impl ScanMethod {
    pub fn min_seg_floor(self) -> usize {
        match self {
            ScanMethod::Level => 2,
            ScanMethod::LevelOrTrend => 3,
        }
    }

    /// Method number as used in simulation tables.
    pub fn number(self) -> u8 {
        match self {
            ScanMethod::Level => 1,
            ScanMethod::LevelOrTrend => 2,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(ScanMethod::Level),
            2 => Some(ScanMethod::LevelOrTrend),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ScanError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("minimum segment {min_seg} is below {floor} for this method")]
    MinSegTooSmall { min_seg: usize, floor: usize },
    #[error("series {district}: no change year leaves {min_seg} usable points on both sides")]
    NoAdmissibleTau { district: String, min_seg: usize },
    #[error("threshold calibration: {0}")]
    Calibration(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangepointScan {
    pub district_id: String,
    pub method: ScanMethod,
    pub tau_grid: Vec<i32>,
    /// `T_τ` aligned with `tau_grid`; `NaN` where the change fit failed.
    pub statistics: Vec<f64>,
    pub tau_hat: i32,
    pub t_max: f64,
    pub null_fit: TrendPoissonFit,
    pub best_change_fit: TrendPoissonFit,
}

impl ChangepointScan {
    /// Number of change years whose fit did not converge.
    pub fn unavailable(&self) -> usize {
        self.statistics.iter().filter(|s| s.is_nan()).count()
    }
}

/// Scan with the level-shift alternative (method 1).
pub fn scan(series: &CountSeries, min_seg: usize) -> Result<ChangepointScan, ScanError> {
    scan_with(series, min_seg, ScanMethod::Level)
}

/// Scan with the level-or-trend alternative (method 2).
pub fn scan_trend_or_level(
    series: &CountSeries,
    min_seg: usize,
) -> Result<ChangepointScan, ScanError> {
    scan_with(series, min_seg, ScanMethod::LevelOrTrend)
}

pub fn scan_with(
    series: &CountSeries,
    min_seg: usize,
    method: ScanMethod,
) -> Result<ChangepointScan, ScanError> {
    let floor = method.min_seg_floor();
    if min_seg < floor {
        return Err(ScanError::MinSegTooSmall { min_seg, floor });
    }
    let obs = series.observations()?;
    let null_fit = match null_from_obs(&obs) {
        Ok(fit) => fit,
        Err(ModelError::NonConvergence { fit }) => {
            log::warn!(
                "{}: no-change fit stopped after {} iterations without meeting tolerance",
                series.district_id,
                fit.iterations
            );
            *fit
        }
        Err(e) => return Err(e.into()),
    };

    let n = obs.len();
    if n < 2 * min_seg {
        return Err(ScanError::NoAdmissibleTau {
            district: series.district_id.clone(),
            min_seg,
        });
    }
    // Change after the observation at `split - 1`.
    let splits = min_seg..=n - min_seg;
    let mut tau_grid = Vec::with_capacity(splits.clone().count());
    let mut statistics = Vec::with_capacity(tau_grid.capacity());
    let mut best: Option<(f64, i32, TrendPoissonFit)> = None;

    for split in splits {
        let tau = obs.years[split - 1];
        tau_grid.push(tau);
        let fit = match method {
            ScanMethod::Level => level_change_from_obs(&obs, tau, split),
            ScanMethod::LevelOrTrend => level_trend_change_from_obs(&obs, tau, split),
        };
        let fit = match fit {
            Ok(fit) => fit,
            Err(ModelError::NonConvergence { fit }) => {
                log::warn!(
                    "{}: change fit at {tau} did not converge, statistic unavailable",
                    series.district_id
                );
                drop(fit);
                statistics.push(f64::NAN);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        // The change model nests the no-change model, so its supremum is at
        // least the no-change maximum.
        let stat = 2.0 * (fit.log_lik - null_fit.log_lik).max(0.0);
        statistics.push(stat);
        // Strict comparison keeps the earliest year on ties.
        if best.as_ref().is_none_or(|(b, _, _)| stat > *b) {
            best = Some((stat, tau, fit));
        }
    }

    let Some((t_max, tau_hat, best_change_fit)) = best else {
        return Err(ModelError::NonConvergence {
            fit: Box::new(null_fit),
        }
        .into());
    };
    Ok(ChangepointScan {
        district_id: series.district_id.clone(),
        method,
        tau_grid,
        statistics,
        tau_hat,
        t_max,
        null_fit,
        best_change_fit,
    })
}

/// Scans many series in parallel; results keep input order.
pub fn scan_all(
    series: &[CountSeries],
    min_seg: usize,
    method: ScanMethod,
) -> Vec<Result<ChangepointScan, ScanError>> {
    series
        .par_iter()
        .map(|s| scan_with(s, min_seg, method))
        .collect()
}

/// Empirical `(1 − fp_rate)` quantile of null maxima.
///
/// With values sorted ascending the threshold is the `⌈(1 − fp)·m⌉`-th value,
/// so a strict `t_max > threshold` rule flags at most `fp_rate` of the sample.
pub fn empirical_threshold(null_t_max: &[f64], fp_rate: f64) -> Result<f64, ScanError> {
    if !(fp_rate > 0.0 && fp_rate <= 1.0) {
        return Err(ScanError::Calibration(format!(
            "false positive rate {fp_rate} outside (0, 1]"
        )));
    }
    let mut sorted: Vec<f64> = null_t_max.iter().copied().filter(|v| !v.is_nan()).collect();
    if sorted.is_empty() {
        return Err(ScanError::Calibration("no null statistics".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let rank = ((1.0 - fp_rate) * m as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(m) - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub fp_rate: f64,
    pub reps: usize,
    /// Null replications whose scan failed and were left out.
    pub failures: usize,
    pub method: ScanMethod,
}

/// Threshold from `reps` no-change series drawn by `generator(rep_index)`.
pub fn calibrate_threshold<G>(
    reps: usize,
    fp_rate: f64,
    method: ScanMethod,
    min_seg: usize,
    generator: G,
) -> Result<Calibration, ScanError>
where
    G: Fn(usize) -> CountSeries + Sync,
{
    if reps < 100 {
        return Err(ScanError::Calibration(format!(
            "{reps} replications, at least 100 required"
        )));
    }
    let maxima: Vec<Option<f64>> = (0..reps)
        .into_par_iter()
        .map(|rep| scan_with(&generator(rep), min_seg, method).ok().map(|s| s.t_max))
        .collect();
    let failures = maxima.iter().filter(|m| m.is_none()).count();
    let values: Vec<f64> = maxima.into_iter().flatten().collect();
    Ok(Calibration {
        threshold: empirical_threshold(&values, fp_rate)?,
        fp_rate,
        reps,
        failures,
        method,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub district_id: String,
    pub tau_hat: i32,
    pub t_max: f64,
    pub nearest_change: Option<i32>,
    pub distance: Option<u32>,
    /// Set when a calibrated threshold was supplied.
    pub exceeds_threshold: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RankedReport {
    pub entries: Vec<RankedEntry>,
    pub threshold: Option<f64>,
}

/// Known change year closest to `tau`; the earlier year wins a tie.
pub fn nearest_change(tau: i32, known: &[i32]) -> Option<(i32, u32)> {
    known
        .iter()
        .map(|&y| (y, tau.abs_diff(y)))
        .min_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)))
}

/// Orders scans by decreasing `t_max`, annotated with the nearest known
/// boundary change. Equal statistics keep their input order.
pub fn rank<'a>(
    scans: impl IntoIterator<Item = &'a ChangepointScan>,
    known_changes: &HashMap<String, Vec<i32>>,
) -> RankedReport {
    let mut entries: Vec<RankedEntry> = scans
        .into_iter()
        .map(|scan| {
            let near = known_changes
                .get(&scan.district_id)
                .and_then(|years| nearest_change(scan.tau_hat, years));
            RankedEntry {
                district_id: scan.district_id.clone(),
                tau_hat: scan.tau_hat,
                t_max: scan.t_max,
                nearest_change: near.map(|n| n.0),
                distance: near.map(|n| n.1),
                exceeds_threshold: None,
            }
        })
        .collect();
    entries.sort_by(|a, b| b.t_max.total_cmp(&a.t_max));
    RankedReport {
        entries,
        threshold: None,
    }
}

impl RankedReport {
    /// Flags entries whose statistic strictly exceeds `threshold`.
    pub fn with_threshold(mut self, threshold: f64) -> Self {
        for e in &mut self.entries {
            e.exceeds_threshold = Some(e.t_max > threshold);
        }
        self.threshold = Some(threshold);
        self
    }
}
