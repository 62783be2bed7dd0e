//! Synthetic inputs with known structure.
//!
//! [`BoundaryPanel`] is a small set of rectangular districts with boundary
//! changes in 1934 and 1955. Raw counts are drawn on whatever boundary was in
//! force in each year, from log-linear intensities spread over pieces of the
//! final districts. With uniform density inside every changed area the
//! interpolated series are free of interpolation error; `inject_error` makes
//! the strip that moves into `D01` in 1934 four times as dense as its
//! surroundings, so area weighting misallocates it and `D01` shows a level
//! shift at the change.
//!
//! [`rate_panel`] draws many infant-mortality-like rate curves for the
//! component analysis.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::areal::{intersection_area, polygon_area, Zone, PERIOD};
use crate::fpca::RateSeries;
use crate::simulate::sample_poisson;

/// Year the strip moves from `D02` to `D01` and the first `D03`/`D04` change.
pub const FIRST_CHANGE: i32 = 1934;
pub const SECOND_CHANGE: i32 = 1955;
/// District whose series carries the injected error.
pub const CORRUPTED: &str = "D01";

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

const fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Rect {
    Rect { x0, y0, x1, y1 }
}

impl Rect {
    fn zone(&self, id: &str, epoch: i32) -> Zone {
        Zone::rect(id, epoch, self.x0, self.y0, self.x1, self.y1).expect("fixture rectangles are valid")
    }
}

/// Log-linear births and death-rate parameters shared by every piece of a district.
#[derive(Debug, Clone, Copy)]
struct Trend {
    births_growth: f64,
    rate_1911: f64,
    rate_decline: f64,
}

#[derive(Debug, Clone)]
struct District {
    id: String,
    /// Shapes by first year in force.
    shapes: Vec<(i32, Rect)>,
    /// Pieces of the final district and their births in 1911.
    pieces: Vec<(Rect, f64)>,
    trend: Trend,
}

impl District {
    fn shape_in(&self, year: i32) -> Rect {
        self.shapes.iter().rev().find(|(from, _)| *from <= year).map(|s| s.1).unwrap_or(self.shapes[0].1)
    }

    fn changes(&self) -> Vec<i32> {
        self.shapes.iter().skip(1).map(|s| s.0).collect()
    }
}

#[derive(Debug, Clone)]
pub struct BoundaryPanel {
    districts: Vec<District>,
    pub seed: u64,
    pub inject_error: bool,
}

fn draw_trend(rng: &mut ChaCha8Rng) -> Trend {
    Trend {
        births_growth: rng.random_range(-0.012..0.004),
        rate_1911: rng.random_range(80.0..200.0),
        rate_decline: rng.random_range(0.02..0.045),
    }
}

impl BoundaryPanel {
    pub fn new(seed: u64, inject_error: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut districts = Vec::new();
        let unit = 500.0;

        // D01 absorbs the strip [0.5, 1] of D02 in 1934.
        let pair = draw_trend(&mut rng);
        let strip_births = if inject_error { 4.0 * unit } else { unit };
        districts.push(District {
            id: "D01".into(),
            shapes: vec![(PERIOD.0, rect(0.0, 0.0, 0.5, 1.0)), (FIRST_CHANGE, rect(0.0, 0.0, 1.0, 1.0))],
            pieces: vec![(rect(0.0, 0.0, 0.5, 1.0), unit), (rect(0.5, 0.0, 1.0, 1.0), strip_births)],
            trend: pair,
        });
        districts.push(District {
            id: "D02".into(),
            shapes: vec![(PERIOD.0, rect(0.5, 0.0, 5.0, 1.0)), (FIRST_CHANGE, rect(1.0, 0.0, 5.0, 1.0))],
            pieces: vec![(rect(1.0, 0.0, 5.0, 1.0), 8.0 * unit)],
            trend: pair,
        });

        // D03/D04 share a boundary moved twice, uniform density.
        let pair = draw_trend(&mut rng);
        let density = rng.random_range(300.0..1500.0);
        districts.push(District {
            id: "D03".into(),
            shapes: vec![
                (PERIOD.0, rect(0.0, 1.0, 1.3, 2.0)),
                (FIRST_CHANGE, rect(0.0, 1.0, 1.15, 2.0)),
                (SECOND_CHANGE, rect(0.0, 1.0, 1.0, 2.0)),
            ],
            pieces: vec![(rect(0.0, 1.0, 1.0, 2.0), density)],
            trend: pair,
        });
        districts.push(District {
            id: "D04".into(),
            shapes: vec![
                (PERIOD.0, rect(1.3, 1.0, 2.0, 2.0)),
                (FIRST_CHANGE, rect(1.15, 1.0, 2.0, 2.0)),
                (SECOND_CHANGE, rect(1.0, 1.0, 2.0, 2.0)),
            ],
            pieces: vec![(rect(1.0, 1.0, 2.0, 2.0), density)],
            trend: pair,
        });

        let mut unchanged = vec![rect(2.0, 1.0, 5.0, 2.0)];
        for row in 0..3 {
            for col in 0..4 {
                let (x, y) = (col as f64 * 1.25, 2.0 + row as f64);
                unchanged.push(rect(x, y, x + 1.25, y + 1.0));
            }
        }
        for (k, r) in unchanged.into_iter().enumerate() {
            let births = (rng.random_range(200f64.ln()..4000f64.ln())).exp();
            districts.push(District {
                id: format!("D{:02}", k + 5),
                shapes: vec![(PERIOD.0, r)],
                pieces: vec![(r, births)],
                trend: draw_trend(&mut rng),
            });
        }
        Self {
            districts,
            seed,
            inject_error,
        }
    }

    pub fn district_ids(&self) -> Vec<String> {
        self.districts.iter().map(|d| d.id.clone()).collect()
    }

    /// Boundary set in force in `year`.
    pub fn zones(&self, year: i32) -> Vec<Zone> {
        self.districts.iter().map(|d| d.shape_in(year).zone(&d.id, year)).collect()
    }

    pub fn change_log(&self) -> Vec<(String, i32)> {
        self.districts
            .iter()
            .flat_map(|d| d.changes().into_iter().map(|y| (d.id.clone(), y)))
            .collect()
    }

    /// Expected `(births, deaths)` of a final district in `year`.
    pub fn truth(&self, district: &str, year: i32) -> Option<(f64, f64)> {
        let d = self.districts.iter().find(|d| d.id == district)?;
        let t = f64::from(year - PERIOD.0);
        let births: f64 = d.pieces.iter().map(|p| p.1).sum::<f64>() * (d.trend.births_growth * t).exp();
        let rate = d.trend.rate_1911 * (-d.trend.rate_decline * t).exp();
        Some((births, births * rate / 1000.0))
    }

    /// Raw `(district, year, births, deaths)` rows on the boundaries in force.
    pub fn raw_counts(&self) -> Vec<(String, i32, u64, u64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x0052_4157);
        let mut rows = Vec::new();
        for year in PERIOD.0..=PERIOD.1 {
            let t = f64::from(year - PERIOD.0);
            for d in &self.districts {
                let shape = d.shape_in(year).zone(&d.id, year);
                let (mut births, mut deaths) = (0.0, 0.0);
                for owner in &self.districts {
                    let growth = (owner.trend.births_growth * t).exp();
                    let rate = owner.trend.rate_1911 * (-owner.trend.rate_decline * t).exp() / 1000.0;
                    for (piece, piece_births) in &owner.pieces {
                        let piece = piece.zone("piece", year);
                        let share = intersection_area(&piece, &shape).expect("rectangles intersect cleanly")
                            / polygon_area(&piece);
                        births += share * piece_births * growth;
                        deaths += share * piece_births * growth * rate;
                    }
                }
                rows.push((d.id.clone(), year, sample_poisson(births, &mut rng), sample_poisson(deaths, &mut rng)));
            }
        }
        rows
    }

    /// Writes counts, change log, boundary files and a config; returns the
    /// config path.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let mut counts = String::from("district_id,year,births,deaths\n");
        for (id, year, b, d) in self.raw_counts() {
            counts.push_str(&format!("{id},{year},{b},{d}\n"));
        }
        std::fs::write(dir.join("counts.csv"), counts)?;
        let mut log = String::from("district_id,year\n");
        for (id, year) in self.change_log() {
            log.push_str(&format!("{id},{year}\n"));
        }
        std::fs::write(dir.join("change_log.csv"), log)?;
        for epoch in [1911, 1951, 1971] {
            std::fs::write(dir.join(format!("boundaries_{epoch}.geojson")), self.geojson(epoch))?;
        }
        let config = format!(
            r#"seed = {seed}
out_dir = "out"

[inputs]
counts = "counts.csv"
change_log = "change_log.csv"
targets = "boundaries_1971.geojson"

[inputs.boundaries]
1911 = "boundaries_1911.geojson"
1951 = "boundaries_1951.geojson"

[audit]
min_seg = 5

[cluster]
k = 4
"#,
            seed = self.seed
        );
        let path = dir.join("config.toml");
        std::fs::write(&path, config)?;
        Ok(path)
    }

    /// Boundary file for the set in force in `epoch`.
    pub fn geojson(&self, epoch: i32) -> String {
        let features: Vec<_> = self
            .districts
            .iter()
            .map(|d| {
                let r = d.shape_in(epoch);
                json!({
                    "type": "Feature",
                    "properties": { "id": d.id, "epoch": epoch },
                    "geometry": {
                        "type": "Polygon",
                        "coordinates": [[[r.x0, r.y0], [r.x1, r.y0], [r.x1, r.y1], [r.x0, r.y1], [r.x0, r.y0]]]
                    }
                })
            })
            .collect();
        serde_json::to_string_pretty(&json!({ "type": "FeatureCollection", "features": features }))
            .expect("geojson serializes")
    }
}

/// Mean infant-mortality curve: fast fall to the mid 1920s, a plateau, then
/// a second fall after the mid 1940s.
fn mean_shape(year: f64) -> f64 {
    let s = |x: f64| 1.0 / (1.0 + (-x).exp());
    17.0 + 65.0 * (1.0 - s((year - 1919.0) / 3.0)) + 50.0 * (1.0 - s((year - 1946.0) / 3.5))
}

/// `n` rate curves over the reporting period with district-specific level,
/// steepness of the early decline, and timing, observed through Poisson
/// deaths out of a district-sized number of births.
pub fn rate_panel(n: usize, seed: u64) -> Vec<RateSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let years: Vec<f64> = (PERIOD.0..=PERIOD.1).map(f64::from).collect();
    (0..n)
        .map(|j| {
            let level = rng.random_range(0.7..1.35);
            let early = rng.random_range(-45.0..60.0);
            let shift = rng.random_range(-5.0..5.0);
            let late = rng.random_range(-15.0..15.0);
            let births = (rng.random_range(150f64.ln()..20000f64.ln())).exp();
            // Short local epidemics at random years.
            let outbreaks: Vec<(f64, f64)> = (0..rng.random_range(0..4))
                .map(|_| (rng.random_range(1911.0..1950.0), rng.random_range(10.0..60.0)))
                .collect();
            let values = years
                .iter()
                .map(|&y| {
                    let x = y - 1911.0;
                    let early_part = early * (-x / 12.0).exp();
                    let late_part = late * (-((y - 1940.0 - shift) / 8.0).powi(2)).exp();
                    let outbreak: f64 = outbreaks.iter().map(|(at, size)| size * (-((y - at) / 1.5).powi(2)).exp()).sum();
                    let rate = (level * mean_shape(y + shift) + early_part + late_part + outbreak).max(5.0);
                    let deaths = sample_poisson(births * rate / 1000.0, &mut rng);
                    Some(1000.0 * deaths as f64 / births)
                })
                .collect();
            RateSeries {
                district_id: format!("R{j:04}"),
                years: years.clone(),
                values,
            }
        })
        .collect()
}
