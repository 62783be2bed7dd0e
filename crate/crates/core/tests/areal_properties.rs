use std::collections::BTreeMap;

use imaudit::areal::{
    build_consistent_series, build_weight_matrix, intersection_area, interpolate_year, polygon_area, EpochPolicy,
    Point, WeightMatrix, YearSource, Zone, PERIOD,
};
use proptest::prelude::*;

/// Sorted interior cut positions in `(0, size)`, plus both ends.
fn cuts(size: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::btree_set(1u32..99, 0..4).prop_map(move |s| {
        let mut v = vec![0.0];
        v.extend(s.into_iter().map(|k| size * f64::from(k) / 100.0));
        v.push(size);
        v
    })
}

fn grid(prefix: &str, xs: &[f64], ys: &[f64]) -> Vec<Zone> {
    let mut zones = Vec::new();
    for (i, x) in xs.windows(2).enumerate() {
        for (j, y) in ys.windows(2).enumerate() {
            zones.push(Zone::rect(format!("{prefix}{i}_{j}"), 1911, x[0], y[0], x[1], y[1]).unwrap());
        }
    }
    zones
}

/// Each grid cell split along a diagonal into two triangles.
fn triangles(xs: &[f64], ys: &[f64]) -> Vec<Zone> {
    let mut zones = Vec::new();
    for (i, x) in xs.windows(2).enumerate() {
        for (j, y) in ys.windows(2).enumerate() {
            let (a, b, c, d) = (
                Point::new(x[0], y[0]),
                Point::new(x[1], y[0]),
                Point::new(x[1], y[1]),
                Point::new(x[0], y[1]),
            );
            zones.push(Zone::simple(format!("t{i}_{j}a"), 1911, vec![a, b, c]).unwrap());
            zones.push(Zone::simple(format!("t{i}_{j}b"), 1911, vec![a, c, d]).unwrap());
        }
    }
    zones
}

fn rect_overlap(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

fn rect() -> impl Strategy<Value = [f64; 4]> {
    (-50.0f64..50.0, -50.0f64..50.0, 0.1f64..40.0, 0.1f64..40.0).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tilings_preserve_mass(
        sx in cuts(10.0), sy in cuts(6.0), tx in cuts(10.0), ty in cuts(6.0),
        tri in any::<bool>(),
        seed_counts in prop::collection::vec(0u32..5000, 64),
    ) {
        let sources = if tri { triangles(&sx, &sy) } else { grid("s", &sx, &sy) };
        let targets = grid("g", &tx, &ty);
        let m = build_weight_matrix(&sources, &targets).unwrap();
        let counts: Vec<f64> = (0..sources.len()).map(|k| f64::from(seed_counts[k % 64])).collect();
        let out = interpolate_year(&m, &counts).unwrap();
        let total: f64 = counts.iter().sum();
        let moved: f64 = out.iter().sum();
        prop_assert!((moved - total).abs() <= 1e-9 * total.max(1.0), "{moved} vs {total}");
        prop_assert!(out.iter().all(|&v| v >= 0.0));
        for t in m.source_totals() {
            prop_assert!((t - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn a_tiling_maps_onto_itself(xs in cuts(8.0), ys in cuts(5.0)) {
        let zones = grid("z", &xs, &ys);
        let m = build_weight_matrix(&zones, &zones).unwrap();
        for j in 0..zones.len() {
            for i in 0..zones.len() {
                let expected = if i == j { 1.0 } else { 0.0 };
                prop_assert!((m.get(j, i) - expected).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn translation_leaves_weights_unchanged(
        sx in cuts(10.0), sy in cuts(6.0), tx in cuts(10.0), ty in cuts(6.0),
        dx in -1e4f64..1e4, dy in -1e4f64..1e4,
    ) {
        let sources = triangles(&sx, &sy);
        let targets = grid("g", &tx, &ty);
        let base = build_weight_matrix(&sources, &targets).unwrap();
        let moved_s: Vec<Zone> = sources.iter().map(|z| z.translate(dx, dy)).collect();
        let moved_t: Vec<Zone> = targets.iter().map(|z| z.translate(dx, dy)).collect();
        let moved = build_weight_matrix(&moved_s, &moved_t).unwrap();
        for j in 0..targets.len() {
            for i in 0..sources.len() {
                prop_assert!((base.get(j, i) - moved.get(j, i)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn rectangle_overlaps_match_the_closed_form(a in rect(), b in rect()) {
        let za = Zone::rect("a", 1911, a[0], a[1], a[2], a[3]).unwrap();
        let zb = Zone::rect("b", 1911, b[0], b[1], b[2], b[3]).unwrap();
        let expected = rect_overlap(a, b);
        let got = intersection_area(&za, &zb).unwrap();
        prop_assert!((got - expected).abs() <= 1e-9 * polygon_area(&za).max(1.0), "{got} vs {expected}");
        prop_assert!((intersection_area(&zb, &za).unwrap() - got).abs() <= 1e-9 * got.max(1.0));
    }

    #[test]
    fn covered_sources_distribute_all_their_mass(
        src in prop::collection::vec(rect(), 1..6),
        tx in cuts(200.0), ty in cuts(200.0),
    ) {
        // Targets tile a square that contains every source.
        let shift = |v: &[f64]| v.iter().map(|x| x - 100.0).collect::<Vec<_>>();
        let targets = grid("g", &shift(&tx), &shift(&ty));
        let sources: Vec<Zone> = src
            .iter()
            .enumerate()
            .map(|(k, r)| Zone::rect(format!("s{k}"), 1911, r[0], r[1], r[2], r[3]).unwrap())
            .collect();
        let m = build_weight_matrix(&sources, &targets).unwrap();
        for (i, total) in m.source_totals().into_iter().enumerate() {
            prop_assert!((total - 1.0).abs() <= 1e-6);
            for j in 0..targets.len() {
                let t = &targets[j];
                let expected = intersection_area(&sources[i], t).unwrap() / polygon_area(&sources[i]);
                let got = m.get(j, i);
                prop_assert!(got >= 0.0);
                let expected = if expected < 1e-9 { 0.0 } else { expected };
                prop_assert!((got - expected).abs() <= 1e-9, "{got} vs {expected}");
            }
        }
    }
}

fn two_epochs() -> BTreeMap<i32, WeightMatrix> {
    // Target T covers source A fully and half of source B in 1911; in 1951 it
    // covers A and all of B.
    let targets = [Zone::rect("T", 1971, 0.0, 0.0, 2.0, 1.0).unwrap()];
    let early = [
        Zone::rect("A", 1911, 0.0, 0.0, 1.0, 1.0).unwrap(),
        Zone::rect("B", 1911, 1.0, 0.0, 3.0, 1.0).unwrap(),
    ];
    let late = [
        Zone::rect("A", 1951, 0.0, 0.0, 1.0, 1.0).unwrap(),
        Zone::rect("B", 1951, 1.0, 0.0, 2.0, 1.0).unwrap(),
    ];
    let mut epochs = BTreeMap::new();
    epochs.insert(1911, build_weight_matrix(&early, &targets).unwrap());
    epochs.insert(1951, build_weight_matrix(&late, &targets).unwrap());
    epochs
}

fn raw(id: &str, _year: i32) -> Option<u64> {
    match id {
        "A" => Some(10),
        "B" => Some(7),
        "T" => Some(100),
        _ => None,
    }
}

#[test]
fn no_known_change_keeps_raw_counts() {
    let s = build_consistent_series("T", &[], &two_epochs(), raw, EpochPolicy::NextAvailable, PERIOD).unwrap();
    assert!(s.sources.iter().all(|src| *src == YearSource::Raw));
    assert!(s.series.counts().iter().all(|&c| c == 100));
    assert_eq!(s.series.len(), 63);
}

#[test]
fn single_change_splits_interpolated_and_raw() {
    let s = build_consistent_series("T", &[1935], &two_epochs(), raw, EpochPolicy::NextAvailable, PERIOD).unwrap();
    for (k, year) in s.series.years().iter().enumerate() {
        if *year < 1935 {
            assert_eq!(s.sources[k], YearSource::Interpolated { epoch: 1911 });
            // 10 + 7/2 = 13.5 rounds up.
            assert_eq!(s.series.counts()[k], 14);
        } else {
            assert_eq!(s.sources[k], YearSource::Raw);
            assert_eq!(s.series.counts()[k], 100);
        }
    }
}

#[test]
fn middle_interval_uses_the_next_census() {
    let s =
        build_consistent_series("T", &[1934, 1955], &two_epochs(), raw, EpochPolicy::NextAvailable, PERIOD).unwrap();
    for (k, year) in s.series.years().iter().enumerate() {
        let (source, count) = match year {
            ..=1933 => (YearSource::Interpolated { epoch: 1911 }, 14),
            1934..=1954 => (YearSource::Interpolated { epoch: 1951 }, 17),
            _ => (YearSource::Raw, 100),
        };
        assert_eq!((s.sources[k], s.series.counts()[k]), (source, count), "year {year}");
    }
    let previous =
        build_consistent_series("T", &[1934, 1955], &two_epochs(), raw, EpochPolicy::PreviousCensus, PERIOD).unwrap();
    let k = previous.series.years().iter().position(|&y| y == 1940).unwrap();
    assert_eq!(previous.sources[k], YearSource::Interpolated { epoch: 1911 });
}
