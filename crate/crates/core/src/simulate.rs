//! Monte Carlo study of the changepoint scan under four data-generating
//! scenarios:
//!
//! 1. Poisson with trend, intercept multiplied by `c` after `τ`.
//! 2. Poisson with trend, slope multiplied by `c` after `τ`.
//! 3. Negative binomial with trend, intercept multiplied by `c` after `τ`.
//! 4. Poisson without trend, intercept multiplied by `c` after `τ`.
//!
//! Every replication draws from its own ChaCha stream keyed by
//! `(seed, scenario, cell, purpose, rep)`, so results do not depend on how
//! replications are scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::changepoint::{calibrate_threshold, scan_with, Calibration, ScanError, ScanMethod};
use crate::series_model::CountSeries;

/// Half-width of the window around the true change that counts as accurate.
pub const ACCURACY_WINDOW: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    LevelShift = 1,
    TrendShift = 2,
    NegativeBinomial = 3,
    LevelShiftNoTrend = 4,
}

impl Scenario {
    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(Scenario::LevelShift),
            2 => Some(Scenario::TrendShift),
            3 => Some(Scenario::NegativeBinomial),
            4 => Some(Scenario::LevelShiftNoTrend),
            _ => None,
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    /// Symmetric range of the per-replication slope draw.
    pub fn beta_half_width(self) -> f64 {
        match self {
            Scenario::LevelShift | Scenario::TrendShift => 0.025,
            Scenario::NegativeBinomial => 0.015,
            Scenario::LevelShiftNoTrend => 0.0,
        }
    }
}

pub const ALPHA_RANGE: (f64, f64) = (2.0, 4.0);
pub const SIZE_RANGE: (f64, f64) = (1.0, 10.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub tau: usize,
    pub change_factor: f64,
    pub reps: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, tau: usize, change_factor: f64, reps: usize, seed: u64) -> Self {
        Self {
            scenario,
            n: 200,
            tau,
            change_factor,
            reps,
            seed,
        }
    }

    /// The same scenario with no change (`c = 1`).
    pub fn null(&self) -> Self {
        Self {
            change_factor: 1.0,
            ..*self
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.tau == 0 || self.tau >= self.n {
            return Err(format!("tau {} outside (0, {})", self.tau, self.n));
        }
        if !self.change_factor.is_finite() {
            return Err("change factor must be finite".into());
        }
        Ok(())
    }

    fn cell_key(&self) -> u64 {
        let mut h = mix(self.n as u64);
        h = mix(h ^ self.tau as u64);
        mix(h ^ self.change_factor.to_bits())
    }
}

/// Separates random streams used for different purposes within one study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Study,
    Calibration,
    Validation,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Study => 0x5354_5544,
            Stream::Calibration => 0x4341_4c49,
            Stream::Validation => 0x5641_4c49,
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random stream for one replication.
pub fn substream(seed: u64, scenario: Scenario, cell: u64, stream: Stream, rep: u64) -> ChaCha8Rng {
    let key = mix(mix(mix(seed) ^ u64::from(scenario.id())) ^ cell) ^ stream.tag();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(key));
    rng.set_stream(rep);
    rng
}

/// Draws from a negative binomial with the given mean and size `k` as a
/// gamma–Poisson mixture: `λ ~ Gamma(k, mean/k)`, `x ~ Poisson(λ)`, giving
/// variance `mean + mean²/k`.
pub fn sample_negative_binomial<R: Rng + ?Sized>(mean: f64, size: f64, rng: &mut R) -> u64 {
    assert!(mean > 0.0 && size > 0.0, "negative binomial needs mean > 0 and size > 0");
    let rate = Gamma::new(size, mean / size)
        .expect("valid gamma parameters")
        .sample(rng);
    sample_poisson(rate, rng)
}

pub fn sample_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
}

/// Per-replication parameter draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrawnParameters {
    pub alpha: f64,
    pub beta: f64,
    pub size: Option<f64>,
}

/// Log-mean at time `t` (1-based) for a scenario.
pub fn log_mean(config: &ScenarioConfig, p: &DrawnParameters, t: usize) -> f64 {
    let tf = t as f64;
    let post = t > config.tau;
    let c = config.change_factor;
    match config.scenario {
        Scenario::LevelShift | Scenario::NegativeBinomial => {
            let a = if post { p.alpha * c } else { p.alpha };
            a + p.beta * tf
        }
        Scenario::TrendShift => {
            let b = if post { p.beta * c } else { p.beta };
            p.alpha + b * tf
        }
        Scenario::LevelShiftNoTrend => {
            if post {
                p.alpha * c
            } else {
                p.alpha
            }
        }
    }
}

fn draw_parameters<R: Rng + ?Sized>(scenario: Scenario, rng: &mut R) -> DrawnParameters {
    let alpha = rng.random_range(ALPHA_RANGE.0..ALPHA_RANGE.1);
    let w = scenario.beta_half_width();
    let beta = if w > 0.0 { rng.random_range(-w..w) } else { 0.0 };
    let size = (scenario == Scenario::NegativeBinomial)
        .then(|| rng.random_range(SIZE_RANGE.0..SIZE_RANGE.1));
    DrawnParameters { alpha, beta, size }
}

/// One replication on the given stream: the series (times `1..=n`) and the
/// true change time.
pub fn generate_on(
    config: &ScenarioConfig,
    stream: Stream,
    rep_index: usize,
) -> (CountSeries, usize, DrawnParameters) {
    let mut rng = substream(
        config.seed,
        config.scenario,
        config.cell_key(),
        stream,
        rep_index as u64,
    );
    let params = draw_parameters(config.scenario, &mut rng);
    let counts = (1..=config.n)
        .map(|t| {
            let mean = log_mean(config, &params, t).exp();
            match params.size {
                Some(k) => sample_negative_binomial(mean, k, &mut rng),
                None => sample_poisson(mean, &mut rng),
            }
        })
        .collect();
    let id = format!("s{}-r{rep_index}", config.scenario.id());
    (CountSeries::from_counts(id, 1, counts), config.tau, params)
}

pub fn generate(config: &ScenarioConfig, rep_index: usize) -> (CountSeries, usize) {
    let (series, tau, _) = generate_on(config, Stream::Study, rep_index);
    (series, tau)
}

/// One cell of a study table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub scenario: u8,
    pub change_factor: f64,
    pub tau: usize,
    pub method: u8,
    pub accuracy_pct: f64,
    pub tpr_pct: f64,
    pub threshold: f64,
    pub reps: usize,
    /// Replications whose scan failed; excluded from the denominators.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StudyResult {
    pub cells: Vec<CellResult>,
}

impl StudyResult {
    pub fn cell(&self, change_factor: f64, tau: usize, method: u8) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.change_factor == change_factor && c.tau == tau && c.method == method)
    }
}

/// Outcome of scanning one replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Replicate {
    pub tau_hat: i32,
    pub t_max: f64,
}

/// Scans every replication of `config` on `stream`, in replication order.
pub fn replicate_scans(
    config: &ScenarioConfig,
    stream: Stream,
    method: ScanMethod,
    min_seg: usize,
) -> Vec<Result<Replicate, ScanError>> {
    (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let (series, _, _) = generate_on(config, stream, rep);
            scan_with(&series, min_seg, method).map(|s| Replicate {
                tau_hat: s.tau_hat,
                t_max: s.t_max,
            })
        })
        .collect()
}

/// Accuracy and true-positive rate of one cell against a fixed threshold.
/// Detection requires `t_max > threshold`; accuracy additionally requires the
/// estimate to fall within `ACCURACY_WINDOW` of the true change.
pub fn run_study(
    config: &ScenarioConfig,
    method: ScanMethod,
    threshold: f64,
    min_seg: usize,
) -> Result<CellResult, String> {
    config.validate()?;
    let outcomes = replicate_scans(config, Stream::Study, method, min_seg);
    let mut failures = 0;
    let (mut detected, mut accurate) = (0usize, 0usize);
    for outcome in &outcomes {
        match outcome {
            Ok(r) if r.t_max > threshold => {
                detected += 1;
                if (r.tau_hat as i64 - config.tau as i64).unsigned_abs() <= u64::from(ACCURACY_WINDOW) {
                    accurate += 1;
                }
            }
            Ok(_) => {}
            Err(e) => {
                log::warn!("scenario {} rep failed: {e}", config.scenario.id());
                failures += 1;
            }
        }
    }
    let scored = config.reps - failures;
    let pct = |k: usize| if scored == 0 { 0.0 } else { 100.0 * k as f64 / scored as f64 };
    Ok(CellResult {
        scenario: config.scenario.id(),
        change_factor: config.change_factor,
        tau: config.tau,
        method: method.number(),
        accuracy_pct: pct(accurate),
        tpr_pct: pct(detected),
        threshold,
        reps: config.reps,
        failures,
    })
}

/// Threshold calibrated on the no-change version of `config`.
pub fn calibrate(
    config: &ScenarioConfig,
    method: ScanMethod,
    reps: usize,
    fp_rate: f64,
    min_seg: usize,
) -> Result<Calibration, ScanError> {
    let null = ScenarioConfig {
        reps,
        ..config.null()
    };
    calibrate_threshold(reps, fp_rate, method, min_seg, |rep| {
        generate_on(&null, Stream::Calibration, rep).0
    })
}

/// Fraction (percent) of fresh replications of `config` whose statistic
/// strictly exceeds `threshold`.
pub fn exceedance_pct(
    config: &ScenarioConfig,
    stream: Stream,
    method: ScanMethod,
    threshold: f64,
    min_seg: usize,
) -> f64 {
    let outcomes = replicate_scans(config, stream, method, min_seg);
    let ok: Vec<f64> = outcomes.into_iter().flatten().map(|r| r.t_max).collect();
    if ok.is_empty() {
        return 0.0;
    }
    100.0 * ok.iter().filter(|&&t| t > threshold).count() as f64 / ok.len() as f64
}

/// Grid of cells sharing one scenario and method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPlan {
    pub scenario: Scenario,
    pub method: ScanMethod,
    pub factors: Vec<f64>,
    pub taus: Vec<usize>,
    pub n: usize,
    pub reps: usize,
    pub calibration_reps: usize,
    pub fp_rate: f64,
    pub min_seg: usize,
    pub seed: u64,
}

impl StudyPlan {
    pub fn table(scenario: Scenario, method: ScanMethod, reps: usize, seed: u64) -> Self {
        Self {
            scenario,
            method,
            factors: vec![0.5, 0.8, 1.2, 1.5],
            taus: vec![25, 150],
            n: 200,
            reps,
            calibration_reps: 1000,
            fp_rate: 0.05,
            min_seg: crate::changepoint::DEFAULT_MIN_SEG,
            seed,
        }
    }

    fn config(&self, tau: usize, factor: f64, reps: usize) -> ScenarioConfig {
        ScenarioConfig {
            scenario: self.scenario,
            n: self.n,
            tau,
            change_factor: factor,
            reps,
            seed: self.seed,
        }
    }

    /// Threshold from the no-change generator of this plan.
    pub fn calibrate(&self) -> Result<Calibration, ScanError> {
        let tau = self.taus.first().copied().unwrap_or(self.n / 2);
        calibrate(
            &self.config(tau, 1.0, self.calibration_reps),
            self.method,
            self.calibration_reps,
            self.fp_rate,
            self.min_seg,
        )
    }

    /// Runs every cell against `threshold`.
    pub fn run_with_threshold(&self, threshold: f64) -> Result<StudyResult, String> {
        let mut cells = Vec::new();
        for &factor in &self.factors {
            for &tau in &self.taus {
                let config = self.config(tau, factor, self.reps);
                cells.push(run_study(&config, self.method, threshold, self.min_seg)?);
            }
        }
        Ok(StudyResult { cells })
    }

    /// Calibrates, then runs every cell.
    pub fn run(&self) -> Result<(Calibration, StudyResult), String> {
        if self.reps == 0 {
            return Ok((
                Calibration {
                    threshold: f64::NAN,
                    fp_rate: self.fp_rate,
                    reps: 0,
                    failures: 0,
                    method: self.method,
                },
                StudyResult::default(),
            ));
        }
        let calibration = self.calibrate().map_err(|e| e.to_string())?;
        let result = self.run_with_threshold(calibration.threshold)?;
        Ok((calibration, result))
    }
}

/// Layout mirroring a results table: one row per factor (and method), with
/// accuracy then TPR columns per `τ`.
pub fn format_table(result: &StudyResult) -> String {
    let mut taus: Vec<usize> = result.cells.iter().map(|c| c.tau).collect();
    taus.sort_unstable();
    taus.dedup();
    let mut rows: Vec<(u8, f64)> = result
        .cells
        .iter()
        .map(|c| (c.method, c.change_factor))
        .collect();
    rows.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    rows.dedup();

    let mut out = String::new();
    out.push_str(&format!("{:<7}{:>8}", "Method", "Factor"));
    for tau in &taus {
        out.push_str(&format!("{:>12}", format!("Acc t={tau}")));
    }
    for tau in &taus {
        out.push_str(&format!("{:>12}", format!("TPR t={tau}")));
    }
    out.push('\n');
    for (method, factor) in rows {
        out.push_str(&format!("{method:<7}{factor:>8.1}"));
        let cell = |tau: usize| result.cell(factor, tau, method);
        for &tau in &taus {
            match cell(tau) {
                Some(c) => out.push_str(&format!("{:>12.1}", c.accuracy_pct)),
                None => out.push_str(&format!("{:>12}", "-")),
            }
        }
        for &tau in &taus {
            match cell(tau) {
                Some(c) => out.push_str(&format!("{:>12.1}", c.tpr_pct)),
                None => out.push_str(&format!("{:>12}", "-")),
            }
        }
        out.push('\n');
    }
    out
}
