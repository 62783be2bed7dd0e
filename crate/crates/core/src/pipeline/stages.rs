use std::collections::{BTreeMap, HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AuditSettings, ClusterSettings, FpcaSettings, IngestedData, MergeDirective, PipelineError, Stage};
use crate::areal::{build_consistent_series, EpochPolicy, MissingRawCount, YearSource};
use crate::changepoint::{empirical_threshold, rank, scan_with, ChangepointScan, RankedReport};
use crate::cluster::{self, ClusterAssignment, ClusterMethod, Dendrogram, IndexRow};
use crate::fpca::{self, BasisSystem, FpcaModel, RateSeries};
use crate::series_model::CountSeries;
use crate::simulate::sample_poisson;

/// Rounded births and deaths for one district on consistent boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistrictCounts {
    pub district_id: String,
    pub years: Vec<i32>,
    pub births: Vec<Option<u64>>,
    pub deaths: Vec<Option<u64>>,
    /// Known boundary-change years, used to annotate audit reports.
    pub changes: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolatedTable {
    pub districts: Vec<DistrictCounts>,
    /// How each year of each district was obtained (deaths series).
    pub sources: BTreeMap<String, Vec<YearSource>>,
    pub missing: Vec<MissingRawCount>,
}

fn to_options(series: &CountSeries) -> Vec<Option<u64>> {
    series
        .counts()
        .iter()
        .zip(series.excluded())
        .map(|(&c, &e)| (!e).then_some(c))
        .collect()
}

/// Builds boundary-consistent birth and death series for every target.
pub fn interpolate(
    data: &IngestedData,
    policy: EpochPolicy,
    period: (i32, i32),
) -> Result<InterpolatedTable, PipelineError> {
    let built: Vec<_> = data
        .targets
        .par_iter()
        .map(|id| {
            let changes = data.change_log.changes(id);
            let births = build_consistent_series(id, changes, &data.epochs, |d, y| data.counts.births(d, y), policy, period)?;
            let deaths = build_consistent_series(id, changes, &data.epochs, |d, y| data.counts.deaths(d, y), policy, period)?;
            Ok((id, changes, births, deaths))
        })
        .collect::<Result<_, crate::areal::ArealError>>()
        .map_err(|e| PipelineError::stage(Stage::Interpolate, e))?;

    let mut table = InterpolatedTable {
        districts: Vec::with_capacity(built.len()),
        sources: BTreeMap::new(),
        missing: Vec::new(),
    };
    for (id, changes, births, deaths) in built {
        table.districts.push(DistrictCounts {
            district_id: id.clone(),
            years: deaths.series.years().to_vec(),
            births: to_options(&births.series),
            deaths: to_options(&deaths.series),
            changes: changes.to_vec(),
        });
        table.sources.insert(id.clone(), deaths.sources);
        table.missing.extend(births.missing);
        table.missing.extend(deaths.missing);
    }
    table.missing.sort_by(|a, b| (&a.district, a.year).cmp(&(&b.district, b.year)));
    table.missing.dedup();
    Ok(table)
}

/// Death-count series with missing years and the exclusion window masked.
pub fn death_series(d: &DistrictCounts, excluded: Option<[i32; 2]>) -> CountSeries {
    let in_window = |y: i32| excluded.is_some_and(|[a, b]| (a..=b).contains(&y));
    let mask = d.years.iter().zip(&d.deaths).map(|(&y, c)| c.is_none() || in_window(y)).collect();
    let counts = d.deaths.iter().map(|c| c.unwrap_or(0)).collect();
    CountSeries::new(d.district_id.clone(), d.years.clone(), counts, mask).expect("years come from a consistent series")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditOutcome {
    /// 1 for the first pass, 2 after merges.
    pub round: u8,
    pub report: RankedReport,
    pub scans: Vec<ChangepointScan>,
    /// Districts whose scan failed, with the reason.
    pub failures: Vec<(String, String)>,
}

/// Scans every district's death counts and ranks them. A failing district is
/// recorded and the audit continues.
pub fn run_audit(
    districts: &[DistrictCounts],
    settings: &AuditSettings,
    excluded: Option<[i32; 2]>,
    threshold: Option<f64>,
    round: u8,
) -> AuditOutcome {
    let series: Vec<CountSeries> = districts.iter().map(|d| death_series(d, excluded)).collect();
    let results: Vec<_> = series
        .par_iter()
        .map(|s| scan_with(s, settings.min_seg, settings.method))
        .collect();
    let mut scans = Vec::new();
    let mut failures = Vec::new();
    for (s, r) in series.iter().zip(results) {
        match r {
            Ok(scan) => scans.push(scan),
            Err(e) => failures.push((s.district_id.clone(), e.to_string())),
        }
    }
    let known: HashMap<String, Vec<i32>> = districts.iter().map(|d| (d.district_id.clone(), d.changes.clone())).collect();
    let mut report = rank(&scans, &known);
    if let Some(t) = threshold {
        report = report.with_threshold(t);
    }
    AuditOutcome {
        round,
        report,
        scans,
        failures,
    }
}

const BOOTSTRAP_TAG: u64 = 0x424f_4f54_5354_5250;

/// Parametric bootstrap of the largest statistic across all districts.
///
/// Each replication redraws every scanned series from its fitted no-change
/// model, rescans, and keeps the maximum. The `(1 − fp_rate)` quantile of
/// those maxima bounds the chance that any district in a change-free panel is
/// flagged.
pub fn calibrate_family_threshold(
    districts: &[DistrictCounts],
    outcome: &AuditOutcome,
    settings: &AuditSettings,
    excluded: Option<[i32; 2]>,
    seed: u64,
) -> Result<f64, PipelineError> {
    let by_id: HashMap<&str, &DistrictCounts> = districts.iter().map(|d| (d.district_id.as_str(), d)).collect();
    let templates: Vec<(CountSeries, &ChangepointScan)> = outcome
        .scans
        .iter()
        .filter_map(|scan| by_id.get(scan.district_id.as_str()).map(|d| (death_series(d, excluded), scan)))
        .collect();
    if templates.is_empty() {
        return Err(PipelineError::stage(Stage::Audit, "no scanned district to calibrate against"));
    }
    let maxima: Vec<f64> = (0..settings.calibration_reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ BOOTSTRAP_TAG);
            rng.set_stream(rep as u64);
            let mut best = f64::NEG_INFINITY;
            for (template, scan) in &templates {
                let counts = template
                    .years()
                    .iter()
                    .zip(template.excluded())
                    .map(|(&y, &e)| if e { 0 } else { sample_poisson(scan.null_fit.fitted_mean(y), &mut rng) })
                    .collect();
                let redrawn = CountSeries::new(
                    template.district_id.clone(),
                    template.years().to_vec(),
                    counts,
                    template.excluded().to_vec(),
                )
                .expect("template is valid");
                if let Ok(s) = scan_with(&redrawn, settings.min_seg, settings.method) {
                    best = best.max(s.t_max);
                }
            }
            best
        })
        .collect();
    let finite: Vec<f64> = maxima.into_iter().filter(|v| v.is_finite()).collect();
    empirical_threshold(&finite, settings.fp_rate).map_err(|e| PipelineError::stage(Stage::Audit, e))
}

/// Replaces each merge set by one district whose counts are the yearly sums.
/// A year is missing in the merged series if any member is missing it.
pub fn apply_merges(
    districts: Vec<DistrictCounts>,
    merges: &[MergeDirective],
) -> Result<Vec<DistrictCounts>, PipelineError> {
    if merges.is_empty() {
        return Ok(districts);
    }
    let mut claimed = HashSet::new();
    for m in merges {
        for member in &m.members {
            if !claimed.insert(member.as_str()) {
                return Err(PipelineError::OverlappingMerge {
                    district: member.clone(),
                });
            }
        }
    }
    let index: HashMap<&str, usize> = districts.iter().enumerate().map(|(i, d)| (d.district_id.as_str(), i)).collect();
    let mut merged = Vec::with_capacity(merges.len());
    for m in merges {
        let members: Vec<&DistrictCounts> = m
            .members
            .iter()
            .map(|id| {
                index.get(id.as_str()).map(|&i| &districts[i]).ok_or_else(|| PipelineError::UnknownDistrict {
                    merge: m.name.clone(),
                    district: id.clone(),
                })
            })
            .collect::<Result<_, _>>()?;
        let years = members[0].years.clone();
        if members.iter().any(|d| d.years != years) {
            return Err(PipelineError::stage(Stage::Merge, format!("members of {} cover different years", m.name)));
        }
        let sum = |pick: fn(&DistrictCounts) -> &Vec<Option<u64>>| -> Vec<Option<u64>> {
            (0..years.len())
                .map(|k| members.iter().map(|d| pick(d)[k]).sum::<Option<u64>>())
                .collect()
        };
        let mut changes: Vec<i32> = members.iter().flat_map(|d| d.changes.iter().copied()).collect();
        changes.sort_unstable();
        changes.dedup();
        merged.push(DistrictCounts {
            district_id: m.name.clone(),
            births: sum(|d| &d.births),
            deaths: sum(|d| &d.deaths),
            years,
            changes,
        });
    }
    let mut out: Vec<DistrictCounts> = districts
        .into_iter()
        .filter(|d| !claimed.contains(d.district_id.as_str()))
        .collect();
    out.extend(merged);
    Ok(out)
}

/// Deaths per 1000 births; missing where births are zero or either count is missing.
pub fn compute_rates(births: &[Option<u64>], deaths: &[Option<u64>]) -> Vec<Option<f64>> {
    births
        .iter()
        .zip(deaths)
        .map(|(b, d)| match (b, d) {
            (Some(b), Some(d)) if *b > 0 => Some(1000.0 * *d as f64 / *b as f64),
            _ => None,
        })
        .collect()
}

pub fn rate_table(districts: &[DistrictCounts]) -> Vec<RateSeries> {
    districts
        .iter()
        .map(|d| RateSeries {
            district_id: d.district_id.clone(),
            years: d.years.iter().map(|&y| f64::from(y)).collect(),
            values: compute_rates(&d.births, &d.deaths),
        })
        .collect()
}

/// Smooths every rate series and fits the component model. Series that
/// cannot be smoothed are left out and returned with the reason.
pub fn run_fpca(
    rates: &[RateSeries],
    settings: &FpcaSettings,
    period: (i32, i32),
) -> Result<(FpcaModel, Vec<(String, String)>), PipelineError> {
    let err = |e: fpca::FpcaError| PipelineError::stage(Stage::Fpca, e);
    let basis = BasisSystem::new(f64::from(period.0), f64::from(period.1), settings.num_basis, settings.order).map_err(err)?;
    let results: Vec<_> = rates
        .par_iter()
        .map(|s| fpca::smooth(&s.district_id, &s.years, &s.values, &basis))
        .collect();
    let mut curves = Vec::new();
    let mut skipped = Vec::new();
    for (s, r) in rates.iter().zip(results) {
        match r {
            Ok(c) => curves.push(c),
            Err(e) => skipped.push((s.district_id.clone(), e.to_string())),
        }
    }
    let model = fpca::fit(&curves, &basis, settings.components).map_err(err)?;
    Ok((model, skipped))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutcome {
    pub district_ids: Vec<String>,
    pub assignment: ClusterAssignment,
    pub dendrogram: Dendrogram,
    pub indices: Vec<IndexRow>,
}

/// Clusters the leading scores. The dendrogram is always built so it can be
/// exported alongside a k-means assignment.
pub fn cluster_scores(model: &FpcaModel, settings: &ClusterSettings, seed: u64) -> Result<ClusterOutcome, PipelineError> {
    let err = |e: cluster::ClusterError| PipelineError::stage(Stage::Cluster, e);
    let points = model.score_points(settings.score_dims);
    let distances = cluster::euclidean_distances(&points, settings.score_dims);
    let dendrogram = cluster::upgma(&distances).map_err(err)?;
    let k = settings.k.min(points.len());
    let assignment = match settings.method {
        ClusterMethod::Upgma => dendrogram.cut(k).map_err(err)?,
        ClusterMethod::KMeans => cluster::kmeans(&points, k, seed).map_err(err)?.assignment,
    };
    let [lo, hi] = settings.k_range;
    let indices = cluster::index_table(&points, lo..=hi, settings.neighbors, seed).map_err(err)?;
    Ok(ClusterOutcome {
        district_ids: model.district_ids.clone(),
        assignment,
        dendrogram,
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn district(id: &str, births: Vec<u64>, deaths: Vec<u64>) -> DistrictCounts {
        DistrictCounts {
            district_id: id.into(),
            years: (1911..1911 + births.len() as i32).collect(),
            births: births.into_iter().map(Some).collect(),
            deaths: deaths.into_iter().map(Some).collect(),
            changes: vec![],
        }
    }

    fn directive(name: &str, members: &[&str]) -> MergeDirective {
        MergeDirective {
            name: name.into(),
            members: members.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn merge_sums_members() {
        let ds = vec![
            district("X", vec![10, 10], vec![3, 4]),
            district("Y", vec![20, 20], vec![5, 6]),
            district("Z", vec![1, 1], vec![0, 0]),
        ];
        let out = apply_merges(ds.clone(), &[directive("XY AD", &["X", "Y"])]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].district_id, "Z");
        assert_eq!(out[1].deaths, vec![Some(8), Some(10)]);
        assert_eq!(apply_merges(ds.clone(), &[]).unwrap(), ds);
        assert!(matches!(
            apply_merges(ds.clone(), &[directive("a", &["X", "Y"]), directive("b", &["Y", "Z"])]),
            Err(PipelineError::OverlappingMerge { .. })
        ));
        assert!(matches!(
            apply_merges(ds, &[directive("a", &["X", "W"])]),
            Err(PipelineError::UnknownDistrict { .. })
        ));
    }

    #[test]
    fn rates_per_thousand() {
        let r = compute_rates(&[Some(100), Some(50), Some(0), None], &[Some(13), Some(0), Some(2), Some(1)]);
        assert_eq!(r, vec![Some(130.0), Some(0.0), None, None]);
    }

    #[test]
    fn empty_audit() {
        let out = run_audit(&[], &AuditSettings::default(), None, None, 1);
        assert!(out.report.entries.is_empty() && out.failures.is_empty());
    }
}
