//! Areal-weighted interpolation of counts onto a fixed set of target districts.
//!
//! A target's estimate in year `t` is `Σ_i w_i x_{t,i}` with
//! `w_i = |S_i ∩ T| / |S_i|`: each source district contributes the share of its
//! area that falls inside the target, assuming counts are spread uniformly over
//! the source.

mod geometry;
pub mod io;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::series_model::CountSeries;

pub use geometry::{intersection_area, polygon_area, Point, PolygonPart, Ring, Zone};

/// First and last year of the reporting period.
pub const PERIOD: (i32, i32) = (1911, 1973);
/// Census years with published boundary sets.
pub const CENSUS_YEARS: [i32; 6] = [1911, 1921, 1931, 1951, 1961, 1971];

/// Weights below this are treated as slivers from boundary digitization.
pub const WEIGHT_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArealError {
    #[error("zone {zone}: degenerate ring ({detail})")]
    DegenerateRing { zone: String, detail: String },
    #[error("zone {zone}: geometry failure ({detail})")]
    GeometryFailure { zone: String, detail: String },
    #[error("{len} source counts for {expected} sources")]
    AlignmentError { expected: usize, len: usize },
    #[error("target {target}: no boundary epoch for the interval starting {year}")]
    MissingEpoch { target: String, year: i32 },
    #[error("change log for {district}: {detail}")]
    InvalidChangeLog { district: String, detail: String },
    #[error("weights: {0}")]
    InvalidWeights(String),
    #[error("boundary input: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub source_epoch: Option<i32>,
    pub target_epoch: Option<i32>,
    pub target_ids: Vec<String>,
    pub source_ids: Vec<String>,
    /// `weights[j][i]`: share of source `i` inside target `j`.
    weights: Vec<Vec<f64>>,
}

impl WeightMatrix {
    pub fn from_dense(
        target_ids: Vec<String>,
        source_ids: Vec<String>,
        weights: Vec<Vec<f64>>,
    ) -> Result<Self, ArealError> {
        if weights.len() != target_ids.len() || weights.iter().any(|r| r.len() != source_ids.len()) {
            return Err(ArealError::InvalidWeights("matrix shape does not match ids".into()));
        }
        if let Some(w) = weights.iter().flatten().find(|w| !(0.0..=1.0 + 1e-9).contains(*w)) {
            return Err(ArealError::InvalidWeights(format!("weight {w} outside [0, 1]")));
        }
        Ok(Self {
            source_epoch: None,
            target_epoch: None,
            target_ids,
            source_ids,
            weights,
        })
    }

    /// Builds a matrix from `(target, source, weight)` rows; absent pairs are 0.
    pub fn from_triplets<'a>(
        rows: impl IntoIterator<Item = (&'a str, &'a str, f64)>,
    ) -> Result<Self, ArealError> {
        let rows: Vec<(&str, &str, f64)> = rows.into_iter().collect();
        let mut target_ids: Vec<String> = rows.iter().map(|r| r.0.to_string()).collect();
        let mut source_ids: Vec<String> = rows.iter().map(|r| r.1.to_string()).collect();
        target_ids.sort();
        target_ids.dedup();
        source_ids.sort();
        source_ids.dedup();
        let t_index: HashMap<&str, usize> =
            target_ids.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
        let s_index: HashMap<&str, usize> =
            source_ids.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
        let mut weights = vec![vec![0.0; source_ids.len()]; target_ids.len()];
        for (t, s, w) in rows {
            let cell = &mut weights[t_index[t]][s_index[s]];
            if *cell != 0.0 {
                return Err(ArealError::InvalidWeights(format!("duplicate pair ({t}, {s})")));
            }
            *cell = w;
        }
        let ids_t = target_ids.clone();
        let ids_s = source_ids.clone();
        Self::from_dense(ids_t, ids_s, weights)
    }

    /// Non-zero `(target, source, weight)` rows in id order.
    pub fn triplets(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.weights.iter().enumerate().flat_map(move |(j, row)| {
            row.iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(move |(i, w)| (self.target_ids[j].as_str(), self.source_ids[i].as_str(), *w))
        })
    }

    pub fn get(&self, target: usize, source: usize) -> f64 {
        self.weights[target][source]
    }

    pub fn row(&self, target: usize) -> &[f64] {
        &self.weights[target]
    }

    pub fn target_index(&self, id: &str) -> Option<usize> {
        self.target_ids.iter().position(|t| t == id)
    }

    /// Total weight each source distributes over all targets.
    pub fn source_totals(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.source_ids.len()];
        for row in &self.weights {
            for (t, w) in totals.iter_mut().zip(row) {
                *t += w;
            }
        }
        totals
    }

    pub fn with_epochs(mut self, source_epoch: i32, target_epoch: i32) -> Self {
        self.source_epoch = Some(source_epoch);
        self.target_epoch = Some(target_epoch);
        self
    }
}

/// `w[j][i] = |S_i ∩ T_j| / |S_i|`, computed in parallel over sources.
pub fn build_weight_matrix(sources: &[Zone], targets: &[Zone]) -> Result<WeightMatrix, ArealError> {
    let columns: Vec<Vec<f64>> = sources
        .par_iter()
        .map(|source| {
            let area = polygon_area(source);
            targets
                .iter()
                .map(|target| {
                    let w = intersection_area(source, target)? / area;
                    Ok(if w < WEIGHT_FLOOR { 0.0 } else { w.min(1.0) })
                })
                .collect::<Result<Vec<f64>, ArealError>>()
        })
        .collect::<Result<_, _>>()?;
    let weights = (0..targets.len())
        .map(|j| columns.iter().map(|col| col[j]).collect())
        .collect();
    let mut m = WeightMatrix::from_dense(
        targets.iter().map(|z| z.zone_id.clone()).collect(),
        sources.iter().map(|z| z.zone_id.clone()).collect(),
        weights,
    )?;
    if let (Some(s), Some(t)) = (sources.first(), targets.first()) {
        m = m.with_epochs(s.epoch_year, t.epoch_year);
    }
    Ok(m)
}

/// `x̂_j = Σ_i w[j][i] x_i`.
pub fn interpolate_year(weights: &WeightMatrix, source_counts: &[f64]) -> Result<Vec<f64>, ArealError> {
    if source_counts.len() != weights.source_ids.len() {
        return Err(ArealError::AlignmentError {
            expected: weights.source_ids.len(),
            len: source_counts.len(),
        });
    }
    Ok(weights
        .weights
        .iter()
        .map(|row| row.iter().zip(source_counts).map(|(w, x)| w * x).sum())
        .collect())
}

/// Nearest integer, halves rounded up.
pub fn round_counts(values: &[f64]) -> Vec<u64> {
    values.iter().map(|v| (v.max(0.0) + 0.5).floor() as u64).collect()
}

/// Known boundary-change years per target district.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChangeLog(BTreeMap<String, Vec<i32>>);

impl ChangeLog {
    /// Sorts and deduplicates each district's years; years outside the period
    /// are rejected.
    pub fn new(entries: impl IntoIterator<Item = (String, i32)>) -> Result<Self, ArealError> {
        let mut map: BTreeMap<String, Vec<i32>> = BTreeMap::new();
        for (district, year) in entries {
            if !(PERIOD.0..=PERIOD.1).contains(&year) {
                return Err(ArealError::InvalidChangeLog {
                    district,
                    detail: format!("year {year} outside {}-{}", PERIOD.0, PERIOD.1),
                });
            }
            map.entry(district).or_default().push(year);
        }
        for years in map.values_mut() {
            years.sort_unstable();
            years.dedup();
        }
        Ok(Self(map))
    }

    pub fn changes(&self, district: &str) -> &[i32] {
        self.0.get(district).map_or(&[], Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<i32>)> {
        self.0.iter()
    }

    pub fn as_map(&self) -> HashMap<String, Vec<i32>> {
        self.0.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

/// Which census boundary set to use for an interval starting in a change year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EpochPolicy {
    /// Earliest census at or after the interval start.
    #[default]
    NextAvailable,
    /// Latest census at or before the interval start.
    PreviousCensus,
}

impl EpochPolicy {
    pub fn select(self, start: i32, available: impl IntoIterator<Item = i32>) -> Option<i32> {
        let years = available.into_iter();
        match self {
            EpochPolicy::NextAvailable => years.filter(|&y| y >= start).min(),
            EpochPolicy::PreviousCensus => years.filter(|&y| y <= start).max(),
        }
    }
}

/// How a year of a consistent series was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YearSource {
    Raw,
    Interpolated { epoch: i32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingRawCount {
    pub district: String,
    pub year: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistentSeries {
    /// Rounded counts; years with missing inputs are excluded.
    pub series: CountSeries,
    /// Values before rounding; `None` where an input count was missing.
    pub values: Vec<Option<f64>>,
    pub sources: Vec<YearSource>,
    pub missing: Vec<MissingRawCount>,
}

/// Counts for one target on its own (final) boundaries over the whole period.
///
/// Years before the first known change are interpolated from the first
/// census epoch; each later interval `[change_k, change_{k+1})` uses the epoch
/// chosen by `policy` for `change_k`; from the last change on the raw counts are
/// used as they are. With no known change every year is raw.
pub fn build_consistent_series(
    target_id: &str,
    changes: &[i32],
    epochs: &BTreeMap<i32, WeightMatrix>,
    raw: impl Fn(&str, i32) -> Option<u64>,
    policy: EpochPolicy,
    period: (i32, i32),
) -> Result<ConsistentSeries, ArealError> {
    let years: Vec<i32> = (period.0..=period.1).collect();
    let mut values = Vec::with_capacity(years.len());
    let mut sources = Vec::with_capacity(years.len());
    let mut missing = Vec::new();

    // Interval starts: period start, then every change year.
    let mut starts = vec![period.0];
    starts.extend(changes.iter().copied().filter(|&c| c > period.0));
    let last_change = changes.last().copied();

    for &year in &years {
        let raw_year = last_change.is_none_or(|last| year >= last);
        if raw_year {
            sources.push(YearSource::Raw);
            let v = raw(target_id, year);
            if v.is_none() {
                missing.push(MissingRawCount {
                    district: target_id.to_string(),
                    year,
                });
            }
            values.push(v.map(|c| c as f64));
            continue;
        }
        let start = *starts.iter().rev().find(|&&s| s <= year).expect("period start");
        let epoch = policy
            .select(start, epochs.keys().copied())
            .ok_or_else(|| ArealError::MissingEpoch {
                target: target_id.to_string(),
                year: start,
            })?;
        let matrix = &epochs[&epoch];
        let j = matrix.target_index(target_id).ok_or_else(|| ArealError::MissingEpoch {
            target: target_id.to_string(),
            year: start,
        })?;
        sources.push(YearSource::Interpolated { epoch });
        let mut total = 0.0;
        let mut complete = true;
        for (i, &w) in matrix.row(j).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let source = &matrix.source_ids[i];
            match raw(source, year) {
                Some(c) => total += w * c as f64,
                None => {
                    complete = false;
                    missing.push(MissingRawCount {
                        district: source.clone(),
                        year,
                    });
                }
            }
        }
        values.push(complete.then_some(total));
    }

    let rounded = round_counts(&values.iter().map(|v| v.unwrap_or(0.0)).collect::<Vec<_>>());
    let excluded = values.iter().map(Option::is_none).collect();
    let series = CountSeries::new(target_id, years, rounded, excluded)
        .expect("consecutive years are strictly increasing");
    Ok(ConsistentSeries {
        series,
        values,
        sources,
        missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn identical_zones_give_identity() {
        let zones: Vec<Zone> = (0..3)
            .map(|k| Zone::rect(format!("z{k}"), 1911, k as f64, 0.0, k as f64 + 1.0, 1.0).unwrap())
            .collect();
        let m = build_weight_matrix(&zones, &zones).unwrap();
        for j in 0..3 {
            for i in 0..3 {
                assert_eq!(m.get(j, i), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn split_source_shares_by_area() {
        let source = [Zone::rect("s", 1911, 0.0, 0.0, 4.0, 1.0).unwrap()];
        let targets = [
            Zone::rect("a", 1971, 0.0, 0.0, 1.0, 1.0).unwrap(),
            Zone::rect("b", 1971, 1.0, 0.0, 4.0, 1.0).unwrap(),
        ];
        let m = build_weight_matrix(&source, &targets).unwrap();
        assert!((m.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((m.get(1, 0) - 0.75).abs() < 1e-12);
        let est = interpolate_year(&m, &[100.0]).unwrap();
        assert!((est[0] - 25.0).abs() < 1e-9 && (est[1] - 75.0).abs() < 1e-9);
        assert_eq!(interpolate_year(&m, &[0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn misaligned_counts_are_rejected() {
        let m = WeightMatrix::from_dense(ids(&["t"]), ids(&["a", "b"]), vec![vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            interpolate_year(&m, &[1.0]),
            Err(ArealError::AlignmentError { expected: 2, len: 1 })
        ));
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(round_counts(&[2.4, 2.5, 2.6]), vec![2, 3, 3]);
        assert_eq!(round_counts(&[0.0]), vec![0]);
        assert_eq!(round_counts(&[10.499999]), vec![10]);
    }

    #[test]
    fn change_log_is_normalized() {
        let log = ChangeLog::new([("a".to_string(), 1955), ("a".to_string(), 1934), ("a".to_string(), 1934)]).unwrap();
        assert_eq!(log.changes("a"), &[1934, 1955]);
        assert!(log.changes("b").is_empty());
        assert!(ChangeLog::new([("a".to_string(), 1900)]).is_err());
    }

    #[test]
    fn epoch_selection_policies() {
        let years = CENSUS_YEARS;
        assert_eq!(EpochPolicy::NextAvailable.select(1934, years), Some(1951));
        assert_eq!(EpochPolicy::PreviousCensus.select(1934, years), Some(1931));
        assert_eq!(EpochPolicy::NextAvailable.select(1911, years), Some(1911));
        assert_eq!(EpochPolicy::NextAvailable.select(1972, years), None);
    }
}
