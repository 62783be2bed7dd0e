//! Log-linear Poisson regression with a linear time trend.
//!
//! Three nested models are supported, all maximized by Newton iteration on the
//! concave log-likelihood `Σ (η_t x_t − e^{η_t})` (the `log x_t!` constants are
//! dropped):
//!
//! * no change: `η_t = α + β t`
//! * level change after `τ`: `η_t = α + β t` for `t ≤ τ`, `α* + β t` afterwards
//! * level and trend change after `τ`: each side has its own intercept and slope
//!
//! Internally the time covariate is centered on the mean of the usable years;
//! reported intercepts are always in the calendar-year parameterization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative log-likelihood change that ends Newton iteration.
pub const LOGLIK_TOL: f64 = 1e-10;
/// Max-norm of the Newton step that ends iteration.
pub const STEP_TOL: f64 = 1e-8;
/// Newton iteration cap.
pub const MAX_ITER: u32 = 100;

/// Fewest usable points for which the trend models are identifiable.
pub const MIN_USABLE: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("series {district}: {reason}")]
    InvalidSeries { district: String, reason: String },
    #[error("series {district} has {usable} usable observations, at least {MIN_USABLE} required")]
    DegenerateSeries { district: String, usable: usize },
    #[error("change year {tau} leaves {pre} points before and {post} after, minimum segment is {min_seg}")]
    InvalidTau {
        tau: i32,
        pre: usize,
        post: usize,
        min_seg: usize,
    },
    #[error("Newton iteration did not converge after {} iterations", .fit.iterations)]
    NonConvergence { fit: Box<TrendPoissonFit> },
}

/// One district's annual counts.
///
/// Excluded years stay in the series (so reports can show them) but are left
/// out of every likelihood sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSeries {
    pub district_id: String,
    years: Vec<i32>,
    counts: Vec<u64>,
    excluded: Vec<bool>,
}

impl CountSeries {
    pub fn new(
        district_id: impl Into<String>,
        years: Vec<i32>,
        counts: Vec<u64>,
        excluded: Vec<bool>,
    ) -> Result<Self, ModelError> {
        let district_id = district_id.into();
        let invalid = |reason: String| ModelError::InvalidSeries {
            district: district_id.clone(),
            reason,
        };
        if years.len() != counts.len() || years.len() != excluded.len() {
            return Err(invalid(format!(
                "length mismatch: {} years, {} counts, {} exclusion flags",
                years.len(),
                counts.len(),
                excluded.len()
            )));
        }
        if let Some(w) = years.windows(2).find(|w| w[1] <= w[0]) {
            return Err(invalid(format!(
                "years not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        Ok(Self {
            district_id,
            years,
            counts,
            excluded,
        })
    }

    /// Consecutive years starting at `first_year`, nothing excluded.
    pub fn from_counts(district_id: impl Into<String>, first_year: i32, counts: Vec<u64>) -> Self {
        let years = (0..counts.len() as i32).map(|k| first_year + k).collect();
        let excluded = vec![false; counts.len()];
        Self {
            district_id: district_id.into(),
            years,
            counts,
            excluded,
        }
    }

    /// Marks every year in `[first, last]` as excluded.
    pub fn exclude_years(mut self, first: i32, last: i32) -> Self {
        for (year, flag) in self.years.iter().zip(self.excluded.iter_mut()) {
            if (first..=last).contains(year) {
                *flag = true;
            }
        }
        self
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn excluded(&self) -> &[bool] {
        &self.excluded
    }

    pub fn len(&self) -> usize {
        self.years.len()
    }

    pub fn is_empty(&self) -> bool {
        self.years.is_empty()
    }

    /// Number of non-excluded observations.
    pub fn usable_len(&self) -> usize {
        self.excluded.iter().filter(|e| !**e).count()
    }

    /// Non-excluded `(year, count)` pairs in year order.
    pub fn usable(&self) -> impl Iterator<Item = (i32, u64)> + '_ {
        self.years
            .iter()
            .zip(&self.counts)
            .zip(&self.excluded)
            .filter(|(_, e)| !**e)
            .map(|((y, c), _)| (*y, *c))
    }

    pub(crate) fn observations(&self) -> Result<Observations, ModelError> {
        let usable = self.usable_len();
        if usable < MIN_USABLE {
            return Err(ModelError::DegenerateSeries {
                district: self.district_id.clone(),
                usable,
            });
        }
        Ok(Observations::new(self.usable()))
    }
}

/// Which segments of a fit have an all-zero count sum.
///
/// The likelihood supremum for such a segment is reached only as its intercept
/// goes to `−∞`; the corresponding `alpha`/`alpha_star` is reported as
/// `f64::NEG_INFINITY` and that segment contributes exactly 0 to `log_lik`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Interior,
    PreSegmentZero,
    PostSegmentZero,
    AllZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendPoissonFit {
    pub alpha: f64,
    pub alpha_star: Option<f64>,
    pub beta: f64,
    /// Post-change slope, present only for the level-and-trend model.
    pub beta_star: Option<f64>,
    /// Last year of the pre-change segment.
    pub tau: Option<i32>,
    pub log_lik: f64,
    pub converged: bool,
    pub iterations: u32,
    pub boundary: Boundary,
}

impl TrendPoissonFit {
    /// Fitted Poisson mean at `year`.
    pub fn fitted_mean(&self, year: i32) -> f64 {
        let t = f64::from(year);
        let post = self.tau.is_some_and(|tau| year > tau);
        let (a, b) = if post {
            (
                self.alpha_star.unwrap_or(self.alpha),
                self.beta_star.unwrap_or(self.beta),
            )
        } else {
            (self.alpha, self.beta)
        };
        if a == f64::NEG_INFINITY {
            0.0
        } else {
            (a + b * t).exp()
        }
    }

    /// Whether this fit has a change component.
    pub fn is_change_model(&self) -> bool {
        self.alpha_star.is_some()
    }
}

/// Usable observations with the time covariate centered.
#[derive(Debug, Clone)]
pub(crate) struct Observations {
    pub(crate) years: Vec<i32>,
    pub(crate) t: Vec<f64>,
    pub(crate) x: Vec<f64>,
    pub(crate) center: f64,
    /// Prefix sums of counts, `cum[k] = Σ_{i<k} x_i`.
    cum: Vec<f64>,
}

impl Observations {
    fn new(points: impl Iterator<Item = (i32, u64)>) -> Self {
        let (years, counts): (Vec<i32>, Vec<u64>) = points.unzip();
        let center = years.iter().map(|&y| f64::from(y)).sum::<f64>() / years.len() as f64;
        let t = years.iter().map(|&y| f64::from(y) - center).collect();
        let x: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let mut cum = Vec::with_capacity(x.len() + 1);
        cum.push(0.0);
        for v in &x {
            cum.push(cum.last().unwrap() + v);
        }
        Self {
            years,
            t,
            x,
            center,
            cum,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.x.len()
    }

    fn sum(&self, range: std::ops::Range<usize>) -> f64 {
        self.cum[range.end] - self.cum[range.start]
    }

    /// Index of the first observation strictly after `tau`.
    pub(crate) fn split_at_year(&self, tau: i32) -> usize {
        self.years.partition_point(|&y| y <= tau)
    }
}

/// Result of a Newton solve in centered coordinates.
#[derive(Debug, Clone, Copy)]
struct Solution<const K: usize> {
    theta: [f64; K],
    log_lik: f64,
    converged: bool,
    iterations: u32,
}

/// Log-likelihood, gradient and Hessian at one parameter vector.
struct Eval<const K: usize> {
    log_lik: f64,
    grad: [f64; K],
    hess: [[f64; K]; K],
}

fn evaluate<const K: usize>(
    n: usize,
    x: &[f64],
    row: &impl Fn(usize) -> [f64; K],
    theta: &[f64; K],
) -> Eval<K> {
    let mut log_lik = 0.0;
    let mut grad = [0.0; K];
    let mut hess = [[0.0; K]; K];
    for i in 0..n {
        let r = row(i);
        let eta = dot(&r, theta);
        let mu = eta.exp();
        log_lik += eta * x[i] - mu;
        let resid = x[i] - mu;
        for a in 0..K {
            grad[a] += r[a] * resid;
            for b in 0..=a {
                hess[a][b] += mu * r[a] * r[b];
            }
        }
    }
    for a in 0..K {
        for b in 0..a {
            hess[b][a] = hess[a][b];
        }
    }
    Eval {
        log_lik,
        grad,
        hess,
    }
}

/// Maximizes `Σ (η x − e^η)` with `η = row(i)·θ` by damped Newton iteration.
fn newton<const K: usize>(
    n: usize,
    x: &[f64],
    row: impl Fn(usize) -> [f64; K],
    init: [f64; K],
) -> Solution<K> {
    let mut theta = init;
    let mut current = evaluate(n, x, &row, &theta);
    for iter in 1..=MAX_ITER {
        let stop = |theta, log_lik, converged| Solution {
            theta,
            log_lik,
            converged,
            iterations: iter,
        };
        let Some(step) = solve_spd(current.hess, current.grad) else {
            return stop(theta, current.log_lik, false);
        };

        // Step halving keeps the objective monotone.
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut candidate = theta;
            for a in 0..K {
                candidate[a] += scale * step[a];
            }
            let next = evaluate(n, x, &row, &candidate);
            let floor = current.log_lik - 1e-12 * current.log_lik.abs().max(1.0);
            if next.log_lik.is_finite() && next.log_lik >= floor {
                accepted = Some((candidate, next));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, next)) = accepted else {
            return stop(theta, current.log_lik, false);
        };
        let step_norm = step.iter().fold(0.0_f64, |m, s| m.max((s * scale).abs()));
        let rel_change =
            (next.log_lik - current.log_lik).abs() / current.log_lik.abs().max(1.0);
        theta = candidate;
        current = next;
        if rel_change < LOGLIK_TOL || step_norm < STEP_TOL {
            return stop(theta, current.log_lik, true);
        }
    }
    Solution {
        theta,
        log_lik: current.log_lik,
        converged: false,
        iterations: MAX_ITER,
    }
}

#[inline]
fn dot<const K: usize>(a: &[f64; K], b: &[f64; K]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cholesky solve of a small symmetric positive definite system.
fn solve_spd<const K: usize>(a: [[f64; K]; K], b: [f64; K]) -> Option<[f64; K]> {
    let mut l = [[0.0; K]; K];
    for i in 0..K {
        for j in 0..=i {
            let s = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0; K];
    for i in 0..K {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = [0.0; K];
    for i in (0..K).rev() {
        x[i] = (y[i] - (i + 1..K).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

fn initial_intercept(total: f64, n: usize) -> f64 {
    (total / n as f64).max(0.5).ln()
}

/// Intercept and slope for one contiguous block, in centered coordinates.
/// Returns `None` when the block has no counts.
fn fit_block(obs: &Observations, range: std::ops::Range<usize>) -> Option<Solution<2>> {
    let total = obs.sum(range.clone());
    if total == 0.0 {
        return None;
    }
    let t = &obs.t[range.clone()];
    let x = &obs.x[range.clone()];
    Some(newton(
        range.len(),
        x,
        |i| [1.0, t[i]],
        [initial_intercept(total, range.len()), 0.0],
    ))
}

fn finish(fit: TrendPoissonFit) -> Result<TrendPoissonFit, ModelError> {
    if fit.converged {
        Ok(fit)
    } else {
        Err(ModelError::NonConvergence { fit: Box::new(fit) })
    }
}

pub(crate) fn null_from_obs(obs: &Observations) -> Result<TrendPoissonFit, ModelError> {
    let fit = match fit_block(obs, 0..obs.len()) {
        None => TrendPoissonFit {
            alpha: f64::NEG_INFINITY,
            alpha_star: None,
            beta: 0.0,
            beta_star: None,
            tau: None,
            log_lik: 0.0,
            converged: true,
            iterations: 0,
            boundary: Boundary::AllZero,
        },
        Some(sol) => TrendPoissonFit {
            alpha: sol.theta[0] - sol.theta[1] * obs.center,
            alpha_star: None,
            beta: sol.theta[1],
            beta_star: None,
            tau: None,
            log_lik: sol.log_lik,
            converged: sol.converged,
            iterations: sol.iterations,
            boundary: Boundary::Interior,
        },
    };
    finish(fit)
}

fn check_split(
    obs: &Observations,
    tau: i32,
    split: usize,
    min_seg: usize,
) -> Result<(), ModelError> {
    let (pre, post) = (split, obs.len() - split);
    if pre < min_seg || post < min_seg || pre == 0 || post == 0 {
        return Err(ModelError::InvalidTau {
            tau,
            pre,
            post,
            min_seg,
        });
    }
    Ok(())
}

/// Level-change fit with a shared slope; `split` is the first post-change index.
pub(crate) fn level_change_from_obs(
    obs: &Observations,
    tau: i32,
    split: usize,
) -> Result<TrendPoissonFit, ModelError> {
    let n = obs.len();
    let pre_total = obs.sum(0..split);
    let post_total = obs.sum(split..n);
    let c = obs.center;

    let fit = match (pre_total > 0.0, post_total > 0.0) {
        (true, true) => {
            let t = &obs.t;
            let sol = newton(
                n,
                &obs.x,
                |i| {
                    if i < split {
                        [1.0, 0.0, t[i]]
                    } else {
                        [0.0, 1.0, t[i]]
                    }
                },
                {
                    let a0 = initial_intercept(pre_total + post_total, n);
                    [a0, a0, 0.0]
                },
            );
            let [a, a_star, b] = sol.theta;
            TrendPoissonFit {
                alpha: a - b * c,
                alpha_star: Some(a_star - b * c),
                beta: b,
                beta_star: None,
                tau: Some(tau),
                log_lik: sol.log_lik,
                converged: sol.converged,
                iterations: sol.iterations,
                boundary: Boundary::Interior,
            }
        }
        (true, false) | (false, true) => {
            let pre_side = pre_total > 0.0;
            let range = if pre_side { 0..split } else { split..n };
            let sol = fit_block(obs, range).expect("segment has counts");
            let [a, b] = sol.theta;
            let live = a - b * c;
            let (alpha, alpha_star, boundary) = if pre_side {
                (live, f64::NEG_INFINITY, Boundary::PostSegmentZero)
            } else {
                (f64::NEG_INFINITY, live, Boundary::PreSegmentZero)
            };
            TrendPoissonFit {
                alpha,
                alpha_star: Some(alpha_star),
                beta: b,
                beta_star: None,
                tau: Some(tau),
                log_lik: sol.log_lik,
                converged: sol.converged,
                iterations: sol.iterations,
                boundary,
            }
        }
        (false, false) => TrendPoissonFit {
            alpha: f64::NEG_INFINITY,
            alpha_star: Some(f64::NEG_INFINITY),
            beta: 0.0,
            beta_star: None,
            tau: Some(tau),
            log_lik: 0.0,
            converged: true,
            iterations: 0,
            boundary: Boundary::AllZero,
        },
    };
    finish(fit)
}

/// Separate intercept and slope on each side of the split.
pub(crate) fn level_trend_change_from_obs(
    obs: &Observations,
    tau: i32,
    split: usize,
) -> Result<TrendPoissonFit, ModelError> {
    let n = obs.len();
    let c = obs.center;
    let side = |range: std::ops::Range<usize>| match fit_block(obs, range) {
        None => (f64::NEG_INFINITY, 0.0, 0.0, true, 0, true),
        Some(sol) => {
            let [a, b] = sol.theta;
            (a - b * c, b, sol.log_lik, sol.converged, sol.iterations, false)
        }
    };
    let (alpha, beta, ll_pre, conv_pre, it_pre, zero_pre) = side(0..split);
    let (alpha_star, beta_star, ll_post, conv_post, it_post, zero_post) = side(split..n);
    let boundary = match (zero_pre, zero_post) {
        (false, false) => Boundary::Interior,
        (true, false) => Boundary::PreSegmentZero,
        (false, true) => Boundary::PostSegmentZero,
        (true, true) => Boundary::AllZero,
    };
    finish(TrendPoissonFit {
        alpha,
        alpha_star: Some(alpha_star),
        beta,
        beta_star: Some(beta_star),
        tau: Some(tau),
        log_lik: ll_pre + ll_post,
        converged: conv_pre && conv_post,
        iterations: it_pre.max(it_post),
        boundary,
    })
}

/// Maximum-likelihood fit of the no-change model `log λ_t = α + β t`.
pub fn fit_null(series: &CountSeries) -> Result<TrendPoissonFit, ModelError> {
    null_from_obs(&series.observations()?)
}

/// Fit with an intercept shift strictly after `tau` and a slope shared by both
/// segments; each segment must hold at least `min_seg` usable points.
pub fn fit_change(
    series: &CountSeries,
    tau: i32,
    min_seg: usize,
) -> Result<TrendPoissonFit, ModelError> {
    let obs = series.observations()?;
    let split = obs.split_at_year(tau);
    check_split(&obs, tau, split, min_seg)?;
    level_change_from_obs(&obs, tau, split)
}

/// Fit where both intercept and slope may change after `tau`.
pub fn fit_trend_change(
    series: &CountSeries,
    tau: i32,
    min_seg: usize,
) -> Result<TrendPoissonFit, ModelError> {
    let obs = series.observations()?;
    let split = obs.split_at_year(tau);
    check_split(&obs, tau, split, min_seg.max(2))?;
    level_trend_change_from_obs(&obs, tau, split)
}

/// Intercept-only model (`β ≡ 0`): the MLE is the log of the sample mean.
pub fn fit_intercept_only(series: &CountSeries) -> Result<TrendPoissonFit, ModelError> {
    let usable: Vec<f64> = series.usable().map(|(_, c)| c as f64).collect();
    if usable.is_empty() {
        return Err(ModelError::DegenerateSeries {
            district: series.district_id.clone(),
            usable: 0,
        });
    }
    let total: f64 = usable.iter().sum();
    let (alpha, log_lik, boundary) = if total == 0.0 {
        (f64::NEG_INFINITY, 0.0, Boundary::AllZero)
    } else {
        let alpha = (total / usable.len() as f64).ln();
        (alpha, alpha * total - total, Boundary::Interior)
    };
    Ok(TrendPoissonFit {
        alpha,
        alpha_star: None,
        beta: 0.0,
        beta_star: None,
        tau: None,
        log_lik,
        converged: true,
        iterations: 0,
        boundary,
    })
}

/// Dropped-constant Poisson log-likelihood of arbitrary parameters, used by
/// tests and diagnostics. `alpha_star`/`beta_star` apply strictly after `tau`.
pub fn log_likelihood(
    series: &CountSeries,
    alpha: f64,
    beta: f64,
    change: Option<(i32, f64, Option<f64>)>,
) -> f64 {
    series
        .usable()
        .map(|(year, count)| {
            let t = f64::from(year);
            let (a, b) = match change {
                Some((tau, a_star, b_star)) if year > tau => (a_star, b_star.unwrap_or(beta)),
                _ => (alpha, beta),
            };
            if a == f64::NEG_INFINITY {
                0.0
            } else {
                let eta = a + b * t;
                eta * count as f64 - eta.exp()
            }
        })
        .sum()
}
