#![allow(dead_code)]

use std::collections::BTreeSet;

use imaudit::cluster::Dendrogram;

/// Average linkage by recomputing every cluster-pair mean from the leaves at
/// each step. Returns merged leaf sets and heights in merge order.
pub fn brute_force_upgma(d: &[Vec<f64>]) -> Vec<(BTreeSet<usize>, f64)> {
    let n = d.len();
    let mut slots: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut out = Vec::new();
    for _ in 1..n {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            for j in i + 1..n {
                let (Some(a), Some(b)) = (&slots[i], &slots[j]) else { continue };
                let sum: f64 = a.iter().flat_map(|&x| b.iter().map(move |&y| d[x][y])).sum();
                let avg = sum / (a.len() * b.len()) as f64;
                if best.is_none_or(|(v, _, _)| avg < v) {
                    best = Some((avg, i, j));
                }
            }
        }
        let (h, i, j) = best.unwrap();
        let moved = slots[j].take().unwrap();
        let merged = slots[i].as_mut().unwrap();
        merged.extend(moved);
        out.push((merged.iter().copied().collect(), h));
    }
    out
}

pub fn leaf_sets(tree: &Dendrogram) -> Vec<(BTreeSet<usize>, f64)> {
    let n = tree.leaves;
    let mut sets: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
    let mut out = Vec::new();
    for m in &tree.merges {
        let s: BTreeSet<usize> = sets[m.left].union(&sets[m.right]).copied().collect();
        assert_eq!(s.len(), m.size);
        sets.push(s.clone());
        out.push((s, m.height));
    }
    out
}

pub fn naive_connectivity(d: &[Vec<f64>], labels: &[usize], l: usize) -> f64 {
    let n = d.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (d[i][j], j)).collect();
        others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for (r, (_, j)) in others.iter().take(l).enumerate() {
            if labels[*j] != labels[i] {
                total += 1.0 / (r as f64 + 1.0);
            }
        }
    }
    total
}

pub fn naive_dunn(d: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = d.len();
    let mut sep = f64::INFINITY;
    let mut diam: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                diam = diam.max(d[i][j]);
            } else {
                sep = sep.min(d[i][j]);
            }
        }
    }
    sep / diam
}

pub fn naive_silhouette(d: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = d.len();
    let clusters: BTreeSet<usize> = labels.iter().copied().collect();
    let mut total = 0.0;
    for i in 0..n {
        let mean_to = |c: usize| {
            let members: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == c).collect();
            members.iter().map(|&j| d[i][j]).sum::<f64>() / members.len() as f64
        };
        if labels.iter().filter(|&&c| c == labels[i]).count() == 1 {
            continue;
        }
        let a = mean_to(labels[i]);
        let b = clusters.iter().filter(|&&c| c != labels[i]).map(|&c| mean_to(c)).fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

