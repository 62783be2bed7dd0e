//! Functional principal components of smoothed rate curves.
//!
//! Each series is projected by least squares onto a B-spline basis. The
//! principal components are then computed in coefficient space, weighting by
//! the basis Gram matrix `W` so that inner products are true `L²` integrals.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_NUM_BASIS: usize = 12;
pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_COMPONENTS: usize = 4;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum FpcaError {
    #[error("invalid basis configuration: {0}")]
    InvalidConfig(String),
    #[error("curve {district}: design matrix rank {rank} is below {needed}")]
    RankDeficient {
        district: String,
        rank: usize,
        needed: usize,
    },
    #[error("eigen-decomposition failed: {0}")]
    EigenFailure(String),
    #[error("index out of range: {0}")]
    IndexError(String),
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(n: usize) -> &'static [(f64, f64)] {
    const G3: [(f64, f64); 3] = [
        (-0.774_596_669_241_483_4, 5.0 / 9.0),
        (0.0, 8.0 / 9.0),
        (0.774_596_669_241_483_4, 5.0 / 9.0),
    ];
    const G4: [(f64, f64); 4] = [
        (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
        (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
        (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
        (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    ];
    if n <= 3 {
        &G3
    } else {
        &G4
    }
}

/// B-spline basis on `[lower, upper]` with clamped ends and equally spaced
/// interior knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSystem {
    pub order: usize,
    pub num_basis: usize,
    pub lower: f64,
    pub upper: f64,
    pub knots: Vec<f64>,
    /// `gram[k][l] = ∫ φ_k φ_l`.
    pub gram: Vec<Vec<f64>>,
}

impl BasisSystem {
    /// Orders 1 through 4 are supported.
    pub fn new(lower: f64, upper: f64, num_basis: usize, order: usize) -> Result<Self, FpcaError> {
        if !(1..=4).contains(&order) {
            return Err(FpcaError::InvalidConfig(format!("order {order} not in 1..=4")));
        }
        if num_basis < order {
            return Err(FpcaError::InvalidConfig(format!(
                "{num_basis} basis functions is fewer than order {order}"
            )));
        }
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(FpcaError::InvalidConfig(format!("bad domain [{lower}, {upper}]")));
        }
        let breaks = Self::breakpoints(lower, upper, num_basis - order);
        let mut knots = vec![lower; order - 1];
        knots.extend_from_slice(&breaks);
        knots.extend(std::iter::repeat_n(upper, order - 1));

        let mut basis = Self {
            order,
            num_basis,
            lower,
            upper,
            knots,
            gram: vec![vec![0.0; num_basis]; num_basis],
        };
        basis.gram = basis.compute_gram(&breaks);
        Ok(basis)
    }

    pub fn for_years(first: i32, last: i32) -> Result<Self, FpcaError> {
        Self::new(first as f64, last as f64, DEFAULT_NUM_BASIS, DEFAULT_ORDER)
    }

    fn breakpoints(lower: f64, upper: f64, interior: usize) -> Vec<f64> {
        let pieces = interior + 1;
        (0..=pieces)
            .map(|m| {
                if m == pieces {
                    upper
                } else {
                    lower + (upper - lower) * m as f64 / pieces as f64
                }
            })
            .collect()
    }

    fn compute_gram(&self, breaks: &[f64]) -> Vec<Vec<f64>> {
        let k = self.num_basis;
        let mut gram = vec![vec![0.0; k]; k];
        let rule = gauss_legendre(self.order);
        for w in breaks.windows(2) {
            let (a, b) = (w[0], w[1]);
            let half = 0.5 * (b - a);
            for &(node, weight) in rule {
                let t = 0.5 * (a + b) + half * node;
                let (first, values) = self.nonzero(t);
                for (r, vr) in values.iter().enumerate() {
                    for (s, vs) in values.iter().enumerate().skip(r) {
                        gram[first + r][first + s] += half * weight * vr * vs;
                    }
                }
            }
        }
        for r in 0..k {
            for s in 0..r {
                gram[r][s] = gram[s][r];
            }
        }
        gram
    }

    /// Index of the first nonzero basis function at `t` and the `order`
    /// values starting there. `t` is clamped to the domain.
    pub fn nonzero(&self, t: f64) -> (usize, Vec<f64>) {
        let p = self.order - 1;
        let full = |idx: usize| self.knots[idx];
        let t = t.clamp(self.lower, self.upper);
        let last = self.num_basis - 1;
        let span = if t >= self.upper {
            last
        } else {
            let mut lo = p;
            let mut hi = last;
            while lo < hi {
                let mid = (lo + hi).div_ceil(2);
                if full(mid) <= t {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            lo
        };

        let mut n = vec![0.0; self.order];
        let mut left = vec![0.0; self.order];
        let mut right = vec![0.0; self.order];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = t - full(span + 1 - j);
            right[j] = full(span + j) - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        (span - p, n)
    }

    /// All basis values at `t`.
    pub fn evaluate(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_basis];
        let (first, values) = self.nonzero(t);
        out[first..first + self.order].copy_from_slice(&values);
        out
    }

    /// `Σ_k coefficients[k] φ_k(t)`.
    pub fn value(&self, coefficients: &[f64], t: f64) -> f64 {
        let (first, values) = self.nonzero(t);
        values
            .iter()
            .zip(&coefficients[first..])
            .map(|(v, c)| v * c)
            .sum()
    }

    /// `∫ φ_k` for each basis function.
    pub fn integrals(&self) -> Vec<f64> {
        self.gram.iter().map(|row| row.iter().sum()).collect()
    }

    /// `∫ f g` for two curves given by coefficients.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        let mut s = 0.0;
        for (k, row) in self.gram.iter().enumerate() {
            for (l, w) in row.iter().enumerate() {
                s += f[k] * w * g[l];
            }
        }
        s
    }

    fn gram_matrix(&self) -> DMatrix<f64> {
        let k = self.num_basis;
        DMatrix::from_fn(k, k, |r, c| self.gram[r][c])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedCurve {
    pub district_id: String,
    pub coefficients: Vec<f64>,
}

/// Least-squares projection of one series onto the basis. `None` values and
/// non-finite values are skipped.
pub fn smooth(
    district_id: &str,
    years: &[f64],
    values: &[Option<f64>],
    basis: &BasisSystem,
) -> Result<SmoothedCurve, FpcaError> {
    let observed: Vec<(f64, f64)> = years
        .iter()
        .zip(values)
        .filter_map(|(&t, v)| v.filter(|v| v.is_finite()).map(|v| (t, v)))
        .collect();
    let k = basis.num_basis;
    let rank_error = |rank| FpcaError::RankDeficient {
        district: district_id.to_string(),
        rank,
        needed: k,
    };
    if observed.len() < k {
        return Err(rank_error(observed.len()));
    }
    let mut design = DMatrix::zeros(observed.len(), k);
    for (row, &(t, _)) in observed.iter().enumerate() {
        let (first, vals) = basis.nonzero(t);
        for (j, v) in vals.into_iter().enumerate() {
            design[(row, first + j)] = v;
        }
    }
    let y = DVector::from_iterator(observed.len(), observed.iter().map(|o| o.1));
    let svd = design.svd(true, true);
    let largest = svd.singular_values.max();
    let tol = largest * observed.len().max(k) as f64 * f64::EPSILON;
    let rank = svd.rank(tol);
    if rank < k {
        return Err(rank_error(rank));
    }
    let c = svd
        .solve(&y, tol)
        .map_err(|e| FpcaError::EigenFailure(e.to_string()))?;
    Ok(SmoothedCurve {
        district_id: district_id.to_string(),
        coefficients: c.iter().copied().collect(),
    })
}

/// A rate series ready for smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct RateSeries {
    pub district_id: String,
    pub years: Vec<f64>,
    pub values: Vec<Option<f64>>,
}

pub fn smooth_all(series: &[RateSeries], basis: &BasisSystem) -> Result<Vec<SmoothedCurve>, FpcaError> {
    series
        .par_iter()
        .map(|s| smooth(&s.district_id, &s.years, &s.values, basis))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaModel {
    pub basis: BasisSystem,
    pub district_ids: Vec<String>,
    pub mean: Vec<f64>,
    /// Coefficient vectors of the retained eigenfunctions.
    pub eigenfunctions: Vec<Vec<f64>>,
    /// Retained eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Sum of all eigenvalues.
    pub total_variance: f64,
    pub variance_explained: Vec<f64>,
    /// `scores[j][p]`.
    pub scores: Vec<Vec<f64>>,
}

pub fn fit(curves: &[SmoothedCurve], basis: &BasisSystem, n_components: usize) -> Result<FpcaModel, FpcaError> {
    let k = basis.num_basis;
    let d = curves.len();
    if d < 2 {
        return Err(FpcaError::InvalidConfig(format!("{d} curves, at least 2 required")));
    }
    if n_components > k {
        return Err(FpcaError::InvalidConfig(format!(
            "{n_components} components requested, basis has {k}"
        )));
    }
    if let Some(c) = curves.iter().find(|c| c.coefficients.len() != k) {
        return Err(FpcaError::InvalidConfig(format!(
            "curve {} has {} coefficients, basis has {k}",
            c.district_id,
            c.coefficients.len()
        )));
    }

    let mut mean = vec![0.0; k];
    for c in curves {
        for (m, v) in mean.iter_mut().zip(&c.coefficients) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= d as f64);
    let centered = DMatrix::from_fn(d, k, |j, l| curves[j].coefficients[l] - mean[l]);

    let w = basis.gram_matrix();
    let w_eig = SymmetricEigen::new(w.clone());
    if w_eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
        return Err(FpcaError::EigenFailure("Gram matrix is not positive definite".into()));
    }
    let root = |power: f64| {
        let diag = DMatrix::from_diagonal(&w_eig.eigenvalues.map(|v| v.powf(power)));
        &w_eig.eigenvectors * diag * w_eig.eigenvectors.transpose()
    };
    let w_half = root(0.5);
    let w_inv_half = root(-0.5);

    let mut cov = &w_half * centered.transpose() * &centered * &w_half / d as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(cov);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(FpcaError::EigenFailure("non-finite eigenvalue".into()));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let all_values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total_variance: f64 = all_values.iter().sum();

    let integrals = basis.integrals();
    let mut eigenfunctions = Vec::with_capacity(n_components);
    for &i in order.iter().take(n_components) {
        let b = &w_inv_half * eig.eigenvectors.column(i);
        let mut b: Vec<f64> = b.iter().copied().collect();
        let area: f64 = b.iter().zip(&integrals).map(|(x, s)| x * s).sum();
        let scale: f64 = b.iter().zip(&integrals).map(|(x, s)| (x * s).abs()).sum();
        let flip = if area.abs() > 1e-12 * scale {
            area < 0.0
        } else {
            b.iter().find(|x| x.abs() > 1e-12).is_some_and(|x| *x < 0.0)
        };
        if flip {
            b.iter_mut().for_each(|x| *x = -*x);
        }
        eigenfunctions.push(b);
    }

    let weighted: Vec<DVector<f64>> = eigenfunctions
        .iter()
        .map(|b| &w * DVector::from_column_slice(b))
        .collect();
    let scores = (0..d)
        .map(|j| {
            weighted
                .iter()
                .map(|wb| centered.row(j).iter().zip(wb.iter()).map(|(c, v)| c * v).sum())
                .collect()
        })
        .collect();

    let eigenvalues: Vec<f64> = all_values[..n_components].to_vec();
    let variance_explained = eigenvalues
        .iter()
        .map(|v| if total_variance > 0.0 { v / total_variance } else { 0.0 })
        .collect();

    Ok(FpcaModel {
        basis: basis.clone(),
        district_ids: curves.iter().map(|c| c.district_id.clone()).collect(),
        mean,
        eigenfunctions,
        eigenvalues,
        total_variance,
        variance_explained,
        scores,
    })
}

impl FpcaModel {
    pub fn components(&self) -> usize {
        self.eigenfunctions.len()
    }

    /// Coefficients of `μ + Σ_{p < p_max} f[j][p] b_p`.
    pub fn reconstruct(&self, j: usize, p_max: usize) -> Result<Vec<f64>, FpcaError> {
        let scores = self
            .scores
            .get(j)
            .ok_or_else(|| FpcaError::IndexError(format!("curve {j} of {}", self.scores.len())))?;
        if p_max > self.components() {
            return Err(FpcaError::IndexError(format!(
                "{p_max} components requested, {} retained",
                self.components()
            )));
        }
        let mut out = self.mean.clone();
        for (f, b) in scores.iter().zip(&self.eigenfunctions).take(p_max) {
            for (o, x) in out.iter_mut().zip(b) {
                *o += f * x;
            }
        }
        Ok(out)
    }

    /// First `dims` scores per curve.
    pub fn score_points(&self, dims: usize) -> Vec<Vec<f64>> {
        self.scores.iter().map(|s| s[..dims.min(s.len())].to_vec()).collect()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    /// `district_id,f1,..,fP`.
    pub fn write_scores_csv(&self, writer: impl Write) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["district_id".to_string()];
        header.extend((1..=self.components()).map(|p| format!("f{p}")));
        w.write_record(&header)?;
        for (id, row) in self.district_ids.iter().zip(&self.scores) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(basis: &BasisSystem, n: usize) -> Vec<f64> {
        (0..=n)
            .map(|i| basis.lower + (basis.upper - basis.lower) * i as f64 / n as f64)
            .collect()
    }

    #[test]
    fn partition_of_unity() {
        let b = BasisSystem::for_years(1911, 1973).unwrap();
        assert_eq!(b.knots.len(), b.num_basis + b.order);
        for t in grid(&b, 997) {
            let s: f64 = b.evaluate(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-10, "t={t} sum={s}");
        }
    }

    #[test]
    fn constant_basis() {
        let b = BasisSystem::new(0.0, 1.0, 1, 1).unwrap();
        assert_eq!(b.gram, vec![vec![1.0]]);
        assert_eq!(b.evaluate(0.3), vec![1.0]);
    }

    #[test]
    fn gram_matches_fine_quadrature() {
        let b = BasisSystem::new(0.0, 9.0, 12, 3).unwrap();
        let n = 90_000;
        let h = 9.0 / n as f64;
        let mut fine = vec![vec![0.0; 12]; 12];
        for i in 0..n {
            let v = b.evaluate((i as f64 + 0.5) * h);
            for k in 0..12 {
                for l in 0..12 {
                    fine[k][l] += h * v[k] * v[l];
                }
            }
        }
        for k in 0..12 {
            for l in 0..12 {
                assert!((fine[k][l] - b.gram[k][l]).abs() < 1e-8);
                assert_eq!(b.gram[k][l], b.gram[l][k]);
            }
        }
        let eig = SymmetricEigen::new(b.gram_matrix());
        assert!(eig.eigenvalues.min() > 0.0);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(BasisSystem::new(0.0, 1.0, 2, 3).is_err());
        assert!(BasisSystem::new(1.0, 1.0, 12, 3).is_err());
        assert!(BasisSystem::new(0.0, 1.0, 12, 7).is_err());
    }

    #[test]
    fn smooths_constants_and_quadratics() {
        let b = BasisSystem::for_years(1911, 1973).unwrap();
        let years: Vec<f64> = (1911..=1973).map(f64::from).collect();
        let sev: Vec<Option<f64>> = years.iter().map(|_| Some(7.0)).collect();
        let c = smooth("a", &years, &sev, &b).unwrap();
        for t in grid(&b, 500) {
            assert!((b.value(&c.coefficients, t) - 7.0).abs() < 1e-8);
        }
        let q = |t: f64| 3.0 - 0.2 * (t - 1940.0) + 0.01 * (t - 1930.0).powi(2);
        let vals: Vec<Option<f64>> = years.iter().map(|&t| Some(q(t))).collect();
        let c = smooth("a", &years, &vals, &b).unwrap();
        for t in grid(&b, 500) {
            assert!((b.value(&c.coefficients, t) - q(t)).abs() < 1e-6);
        }
    }

    #[test]
    fn too_few_points_is_rank_deficient() {
        let b = BasisSystem::for_years(1911, 1973).unwrap();
        let years: Vec<f64> = (1911..1920).map(f64::from).collect();
        let vals = vec![Some(1.0); years.len()];
        assert!(matches!(smooth("x", &years, &vals, &b), Err(FpcaError::RankDeficient { .. })));
        // Enough points but all inside one knot interval.
        let years: Vec<f64> = (0..20).map(|i| 1911.0 + 0.1 * i as f64).collect();
        let vals = vec![Some(1.0); years.len()];
        assert!(matches!(smooth("x", &years, &vals, &b), Err(FpcaError::RankDeficient { .. })));
    }

    #[test]
    fn identical_curves_have_no_variance() {
        let b = BasisSystem::for_years(1911, 1973).unwrap();
        let c = SmoothedCurve {
            district_id: "a".into(),
            coefficients: (0..12).map(|k| k as f64).collect(),
        };
        let mut c2 = c.clone();
        c2.district_id = "b".into();
        let m = fit(&[c, c2], &b, 4).unwrap();
        assert!(m.eigenvalues.iter().all(|&v| v == 0.0));
        assert!(m.scores.iter().flatten().all(|&s| s.abs() < 1e-12));
    }

    #[test]
    fn eigenfunctions_are_orthonormal() {
        let b = BasisSystem::for_years(1911, 1973).unwrap();
        let curves: Vec<SmoothedCurve> = (0..30)
            .map(|j| SmoothedCurve {
                district_id: j.to_string(),
                coefficients: (0..12)
                    .map(|k| ((j * 7 + k * 13) % 11) as f64 + (k as f64).sin() * j as f64)
                    .collect(),
            })
            .collect();
        let m = fit(&curves, &b, 12).unwrap();
        for p in 0..12 {
            for q in 0..12 {
                let ip = b.inner(&m.eigenfunctions[p], &m.eigenfunctions[q]);
                let expect = if p == q { 1.0 } else { 0.0 };
                assert!((ip - expect).abs() < 1e-8, "{p},{q}: {ip}");
            }
        }
        assert!(m.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        for j in 0..30 {
            let full = m.reconstruct(j, 12).unwrap();
            for (a, e) in full.iter().zip(&curves[j].coefficients) {
                assert!((a - e).abs() < 1e-8);
            }
        }
        assert_eq!(m.reconstruct(0, 0).unwrap(), m.mean);
        assert!(m.reconstruct(30, 1).is_err());
        assert!(m.reconstruct(0, 13).is_err());
    }
}
