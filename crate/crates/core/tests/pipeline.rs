use std::collections::BTreeMap;

use imaudit::areal::{build_consistent_series, build_weight_matrix, EpochPolicy, PERIOD};
use imaudit::pipeline::fixtures::{BoundaryPanel, CORRUPTED, FIRST_CHANGE};
use imaudit::pipeline::{
    apply_merges, audit_round, compute_rates, ingest, interpolate, rate_table, run_full, MergeDirective,
    PipelineConfig, ThresholdMode, ARTIFACT_FILES, MANIFEST_FILE,
};

fn setup(seed: u64, inject: bool) -> (tempfile::TempDir, PipelineConfig) {
    let dir = tempfile::tempdir().unwrap();
    let path = BoundaryPanel::new(seed, inject).write_to(dir.path()).unwrap();
    let config = PipelineConfig::load(&path).unwrap();
    (dir, config)
}

#[test]
fn injected_error_ranks_first_near_the_change() {
    for seed in [1, 2, 3, 4, 5] {
        let (_dir, config) = setup(seed, true);
        let data = ingest(&config).unwrap();
        let table = interpolate(&data, config.inputs.epoch_policy, config.period()).unwrap();
        let audit = audit_round(&config, &table.districts, 1).unwrap();
        let top = &audit.report.entries[0];
        assert_eq!(top.district_id, CORRUPTED, "seed {seed}: {:?}", &audit.report.entries[..3]);
        assert!((top.tau_hat - FIRST_CHANGE).abs() <= 1, "seed {seed}: tau_hat {}", top.tau_hat);
        assert_eq!(top.nearest_change, Some(FIRST_CHANGE));
    }
}

#[test]
fn clean_panel_interpolates_to_the_truth() {
    let panel = BoundaryPanel::new(11, false);
    let (_dir, config) = setup(11, false);
    let data = ingest(&config).unwrap();
    let table = interpolate(&data, config.inputs.epoch_policy, config.period()).unwrap();
    for d in &table.districts {
        let observed: f64 = d.deaths.iter().map(|c| c.unwrap() as f64).sum();
        let expected: f64 = d.years.iter().map(|&y| panel.truth(&d.district_id, y).unwrap().1).sum();
        // Four standard deviations of a Poisson total, plus rounding.
        let tolerance = 4.0 * expected.sqrt() + 0.5 * d.years.len() as f64;
        assert!((observed - expected).abs() < tolerance, "{}: {observed} vs {expected}", d.district_id);
    }
}

#[test]
fn boundary_files_and_weight_matrix_agree() {
    let panel = BoundaryPanel::new(3, false);
    let m = build_weight_matrix(&panel.zones(1911), &panel.zones(1971)).unwrap();
    let totals = m.source_totals();
    for t in totals {
        assert!((t - 1.0).abs() < 1e-9);
    }
    // D03 pieces before 1934 come from the 1911 shapes, then 1951 until 1955.
    let mut epochs = BTreeMap::new();
    epochs.insert(1911, m);
    epochs.insert(1951, build_weight_matrix(&panel.zones(1951), &panel.zones(1971)).unwrap());
    let s = build_consistent_series("D03", &[1934, 1955], &epochs, |_, _| Some(10), EpochPolicy::NextAvailable, PERIOD)
        .unwrap();
    assert_eq!(s.series.len(), 63);
}

#[test]
fn merging_then_rates_equals_rates_of_sums() {
    let (_dir, config) = setup(5, true);
    let data = ingest(&config).unwrap();
    let table = interpolate(&data, config.inputs.epoch_policy, config.period()).unwrap();
    let merge = MergeDirective {
        name: "D01-D02 AD".into(),
        members: vec!["D01".into(), "D02".into()],
    };
    let merged = apply_merges(table.districts.clone(), std::slice::from_ref(&merge)).unwrap();
    let (a, b) = (&table.districts[0], &table.districts[1]);
    let births: Vec<_> = a.births.iter().zip(&b.births).map(|(x, y)| Some(x.unwrap() + y.unwrap())).collect();
    let deaths: Vec<_> = a.deaths.iter().zip(&b.deaths).map(|(x, y)| Some(x.unwrap() + y.unwrap())).collect();
    let rates = rate_table(&merged);
    let ad_rates = &rates.iter().find(|r| r.district_id == merge.name).unwrap().values;
    assert_eq!(ad_rates, &compute_rates(&births, &deaths));

    let reaudit = audit_round(&config, &merged, 2).unwrap();
    assert!(reaudit.report.entries.iter().all(|e| e.district_id != "D01" && e.district_id != "D02"));
    assert_eq!(reaudit.report.entries.len(), merged.len());
}

#[test]
fn full_run_writes_artifacts_deterministically() {
    let (dir, mut config) = setup(9, true);
    config.merges = vec![MergeDirective {
        name: "D01-D02 AD".into(),
        members: vec!["D01".into(), "D02".into()],
    }];
    let first = run_full(&config).unwrap();
    for file in ARTIFACT_FILES.iter().chain([&MANIFEST_FILE]) {
        assert!(first.out_dir.join(file).is_file(), "{file}");
    }
    assert_eq!(first.manifest.artifacts.len(), ARTIFACT_FILES.len());
    assert_eq!(first.manifest.thresholds, vec![None, None]);

    let read = |d: &std::path::Path| -> Vec<Vec<u8>> {
        ARTIFACT_FILES.iter().chain([&MANIFEST_FILE]).map(|f| std::fs::read(d.join(f)).unwrap()).collect()
    };
    let before = read(&first.out_dir);
    config.out_dir = dir.path().join("second");
    let second = run_full(&config).unwrap();
    assert_eq!(before, read(&second.out_dir));
}

#[test]
fn calibrated_mode_sets_a_threshold() {
    let (_dir, mut config) = setup(21, true);
    config.audit.threshold = ThresholdMode::Calibrated;
    config.audit.calibration_reps = 100;
    let data = ingest(&config).unwrap();
    let table = interpolate(&data, config.inputs.epoch_policy, config.period()).unwrap();
    let audit = audit_round(&config, &table.districts, 1).unwrap();
    let t = audit.report.threshold.unwrap();
    assert!(t > 0.0);
    assert_eq!(audit.report.entries[0].exceeds_threshold, Some(true));
}

#[test]
fn clean_panels_rarely_exceed_the_calibrated_threshold() {
    let runs = 10;
    let mut quiet = 0;
    for seed in 0..runs {
        let (_dir, mut config) = setup(100 + seed, false);
        config.audit.threshold = ThresholdMode::Calibrated;
        config.audit.calibration_reps = 100;
        let data = ingest(&config).unwrap();
        let table = interpolate(&data, config.inputs.epoch_policy, config.period()).unwrap();
        let audit = audit_round(&config, &table.districts, 1).unwrap();
        if audit.report.entries.iter().all(|e| e.exceeds_threshold == Some(false)) {
            quiet += 1;
        }
    }
    assert!(quiet * 10 >= runs * 9, "{quiet} of {runs} runs without a flagged district");
}
