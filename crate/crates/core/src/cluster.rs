//! Average-linkage hierarchical clustering, k-means and validity indices over
//! principal-component score vectors.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const DEFAULT_K: usize = 9;
pub const DEFAULT_SCORE_DIMS: usize = 4;
pub const DEFAULT_NEIGHBORS: usize = 10;
pub const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 500;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("invalid distance matrix: {0}")]
    InvalidMatrix(String),
    #[error("index out of range: {0}")]
    IndexError(String),
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
}

/// Pairwise Euclidean distances over the first `dims` coordinates.
pub fn euclidean_distances(points: &[Vec<f64>], dims: usize) -> Vec<Vec<f64>> {
    points
        .par_iter()
        .map(|p| points.iter().map(|q| distance(p, q, dims)).collect())
        .collect()
}

fn distance(p: &[f64], q: &[f64], dims: usize) -> f64 {
    p.iter()
        .zip(q)
        .take(dims)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// One agglomeration step. Nodes `0..n` are leaves; merge `m` creates node `n + m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: usize,
    pub merges: Vec<Merge>,
}

fn validate(d: &[Vec<f64>]) -> Result<(), ClusterError> {
    let n = d.len();
    if n == 0 {
        return Err(ClusterError::InvalidMatrix("empty".into()));
    }
    let scale = d.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
    for (i, row) in d.iter().enumerate() {
        if row.len() != n {
            return Err(ClusterError::InvalidMatrix(format!("row {i} has {} entries, expected {n}", row.len())));
        }
        if row[i] != 0.0 {
            return Err(ClusterError::InvalidMatrix(format!("nonzero diagonal at {i}")));
        }
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(ClusterError::InvalidMatrix(format!("entry ({i},{j}) = {v}")));
            }
            if (v - d[j][i]).abs() > 1e-12 * scale {
                return Err(ClusterError::InvalidMatrix(format!("asymmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

/// Average linkage. Among equal distances the pair with the lowest slot
/// indices merges first; a merged cluster keeps the lower slot.
pub fn upgma(distances: &[Vec<f64>]) -> Result<Dendrogram, ClusterError> {
    validate(distances)?;
    let n = distances.len();
    // Cross-pair distance sums; the mean is recomputed from them on demand.
    let mut sums: Vec<Vec<f64>> = distances.to_vec();
    let mut size = vec![1usize; n];
    let mut node: Vec<usize> = (0..n).collect();
    let mut active = vec![true; n];
    let avg = |sums: &Vec<Vec<f64>>, size: &Vec<usize>, i: usize, j: usize| {
        sums[i][j] / (size[i] * size[j]) as f64
    };
    let nearest = |sums: &Vec<Vec<f64>>, size: &Vec<usize>, active: &Vec<bool>, i: usize| {
        let mut best: Option<(f64, usize)> = None;
        for j in i + 1..n {
            if active[j] {
                let v = avg(sums, size, i, j);
                if best.is_none_or(|(b, _)| v < b) {
                    best = Some((v, j));
                }
            }
        }
        best
    };
    let mut nn: Vec<Option<(f64, usize)>> = (0..n).map(|i| nearest(&sums, &size, &active, i)).collect();

    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut pick: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if let (true, Some((v, j))) = (active[i], nn[i]) {
                if pick.is_none_or(|(b, _, _)| v < b) {
                    pick = Some((v, i, j));
                }
            }
        }
        let (height, i, j) = pick.expect("at least two active clusters");
        merges.push(Merge {
            left: node[i],
            right: node[j],
            height,
            size: size[i] + size[j],
        });
        active[j] = false;
        for k in 0..n {
            if active[k] && k != i {
                let s = sums[i][k] + sums[j][k];
                sums[i][k] = s;
                sums[k][i] = s;
            }
        }
        size[i] += size[j];
        node[i] = n + step;

        nn[j] = None;
        nn[i] = nearest(&sums, &size, &active, i);
        for r in 0..n {
            if !active[r] || r == i {
                continue;
            }
            match nn[r] {
                Some((_, t)) if t == i || t == j => nn[r] = nearest(&sums, &size, &active, r),
                Some((b, t)) if r < i => {
                    let v = avg(&sums, &size, r, i);
                    if v < b || (v == b && i < t) {
                        nn[r] = Some((v, i));
                    }
                }
                _ => {}
            }
        }
    }
    Ok(Dendrogram { leaves: n, merges })
}

/// Cluster labels `1..=k`, numbered by first appearance in leaf order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl ClusterAssignment {
    fn from_groups(groups: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels: Vec<usize> = groups
            .iter()
            .map(|g| {
                let next = map.len() + 1;
                *map.entry(*g).or_insert(next)
            })
            .collect();
        Self { labels, k: map.len() }
    }

    /// `district_id,cluster`.
    pub fn write_csv(&self, ids: &[String], writer: impl Write) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["district_id", "cluster"])?;
        for (id, label) in ids.iter().zip(&self.labels) {
            w.write_record([id.as_str(), &label.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

impl Dendrogram {
    /// Partition left after undoing the `k − 1` last merges.
    pub fn cut(&self, k: usize) -> Result<ClusterAssignment, ClusterError> {
        let n = self.leaves;
        if k == 0 || k > n {
            return Err(ClusterError::IndexError(format!("{k} clusters from {n} leaves")));
        }
        let mut parent: Vec<usize> = (0..2 * n).collect();
        for (m, merge) in self.merges.iter().take(n - k).enumerate() {
            let id = n + m;
            let a = find(&mut parent, merge.left);
            let b = find(&mut parent, merge.right);
            parent[a] = id;
            parent[b] = id;
        }
        let roots: Vec<usize> = (0..n).map(|leaf| find(&mut parent, leaf)).collect();
        Ok(ClusterAssignment::from_groups(&roots))
    }

    /// Nested `{height, children}` objects with `{leaf, id}` leaves.
    pub fn to_json(&self, ids: &[String]) -> Value {
        let n = self.leaves;
        let mut nodes: Vec<Option<Value>> = (0..n)
            .map(|i| Some(json!({ "leaf": i, "id": ids.get(i).cloned().unwrap_or_else(|| i.to_string()) })))
            .collect();
        for m in &self.merges {
            let left = nodes[m.left].take().unwrap_or(Value::Null);
            let right = nodes[m.right].take().unwrap_or(Value::Null);
            nodes.push(Some(json!({ "height": m.height, "size": m.size, "children": [left, right] })));
        }
        nodes.into_iter().rev().flatten().next().unwrap_or(Value::Null)
    }
}

/// Lloyd's algorithm from k-means++ seeds; best of `KMEANS_RESTARTS` runs by
/// within-cluster sum of squares.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult, ClusterError> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(ClusterError::IndexError(format!("{k} clusters from {n} points")));
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart as u64);
        let run = lloyd(points, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.within_ss < b.within_ss) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub assignment: ClusterAssignment,
    pub centers: Vec<Vec<f64>>,
    pub within_ss: f64,
}

fn sq_dist(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn closest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, center) in centers.iter().enumerate() {
        let v = sq_dist(p, center);
        if v < best.0 {
            best = (v, c);
        }
    }
    best.1
}

fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let dims = points[0].len();
    let mut centers = plus_plus(points, k, rng);
    let mut groups: Vec<usize> = points.iter().map(|p| closest(p, &centers)).collect();
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![vec![0.0; dims]; k];
        let mut counts = vec![0usize; k];
        for (p, &g) in points.iter().zip(&groups) {
            counts[g] += 1;
            for (s, v) in sums[g].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Reseed an empty cluster at the point farthest from its center.
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centers[groups[a]])
                            .total_cmp(&sq_dist(&points[b], &centers[groups[b]]))
                            .then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                centers[c] = points[far].clone();
                groups[far] = c;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| closest(p, &centers)).collect();
        if next == groups {
            break;
        }
        groups = next;
    }
    let within_ss = points.iter().zip(&groups).map(|(p, &g)| sq_dist(p, &centers[g])).sum();
    let assignment = ClusterAssignment::from_groups(&groups);
    // Reorder centers to match the relabelled clusters.
    let mut ordered = vec![Vec::new(); assignment.k];
    for (&g, &label) in groups.iter().zip(&assignment.labels) {
        if ordered[label - 1].is_empty() {
            ordered[label - 1] = centers[g].clone();
        }
    }
    KMeansResult {
        assignment,
        centers: ordered,
        within_ss,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityIndices {
    pub connectivity: f64,
    pub dunn: f64,
    pub silhouette: f64,
}

/// Connectivity over `neighbors` nearest neighbours, Dunn index and mean
/// silhouette width, all on Euclidean distance.
pub fn validity(points: &[Vec<f64>], labels: &[usize], neighbors: usize) -> Result<ValidityIndices, ClusterError> {
    let n = points.len();
    if labels.len() != n {
        return Err(ClusterError::InvalidAssignment(format!("{} labels for {n} points", labels.len())));
    }
    let k = labels.iter().copied().max().unwrap_or(0);
    if labels.contains(&0) {
        return Err(ClusterError::InvalidAssignment("labels start at 1".into()));
    }
    if k < 2 {
        return Err(ClusterError::InvalidAssignment("at least two clusters required".into()));
    }
    let dims = points.first().map_or(0, Vec::len);
    let d = euclidean_distances(points, dims);

    let connectivity: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| d[i][a].total_cmp(&d[i][b]).then(a.cmp(&b)));
            order
                .iter()
                .take(neighbors)
                .enumerate()
                .filter(|(_, &j)| labels[j] != labels[i])
                .map(|(r, _)| 1.0 / (r + 1) as f64)
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();

    let (min_between, max_within) = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut between = f64::INFINITY;
            let mut within = 0.0_f64;
            for j in i + 1..n {
                if labels[i] == labels[j] {
                    within = within.max(d[i][j]);
                } else {
                    between = between.min(d[i][j]);
                }
            }
            (between, within)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((f64::INFINITY, 0.0_f64), |(b, w), (b2, w2)| (b.min(b2), w.max(w2)));
    let dunn = if max_within > 0.0 {
        min_between / max_within
    } else {
        f64::INFINITY
    };

    let mut sizes = vec![0usize; k + 1];
    for &l in labels {
        sizes[l] += 1;
    }
    let widths: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k + 1];
            for j in 0..n {
                sums[labels[j]] += d[i][j];
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (1..=k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    let silhouette = widths.iter().sum::<f64>() / n as f64;

    Ok(ValidityIndices {
        connectivity,
        dunn,
        silhouette,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    #[default]
    Upgma,
    KMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub method: ClusterMethod,
    pub k: usize,
    pub connectivity: f64,
    pub dunn: f64,
    pub silhouette: f64,
}

/// Validity indices for each `k` in `ks` under both methods. Values of `k`
/// outside `2..=points.len()` are skipped.
pub fn index_table(
    points: &[Vec<f64>],
    ks: std::ops::RangeInclusive<usize>,
    neighbors: usize,
    seed: u64,
) -> Result<Vec<IndexRow>, ClusterError> {
    let dims = points.first().map_or(0, Vec::len);
    let tree = upgma(&euclidean_distances(points, dims))?;
    let mut rows = Vec::new();
    for k in ks.filter(|&k| k >= 2 && k <= points.len()) {
        let candidates = [
            (ClusterMethod::Upgma, tree.cut(k)?),
            (ClusterMethod::KMeans, kmeans(points, k, seed)?.assignment),
        ];
        for (method, assignment) in candidates {
            if assignment.k < 2 {
                continue;
            }
            let v = validity(points, &assignment.labels, neighbors)?;
            rows.push(IndexRow {
                method,
                k,
                connectivity: v.connectivity,
                dunn: v.dunn,
                silhouette: v.silhouette,
            });
        }
    }
    Ok(rows)
}

pub fn write_index_csv(rows: &[IndexRow], writer: impl Write) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
