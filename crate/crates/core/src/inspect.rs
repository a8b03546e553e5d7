//! Memory usage analysis: dominant sub-prototype assignments, their
//! agreement with planted sub-clusters, PCA projection for plotting, and
//! decoded sub-prototypes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingDataset;
use crate::error::{contract, Result};
use crate::memory::usage_histogram;
use crate::model::ModelView;
use crate::numerics::RealMatrix;

fn comb2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items. `None` for
/// fewer than two items. When both labelings are the same trivial partition
/// (all singletons, or one group) the index is 1.
pub fn adjusted_rand_index<A: Ord + Copy, B: Ord + Copy>(a: &[A], b: &[B]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len();
    if n < 2 {
        return None;
    }
    let mut table: BTreeMap<(A, B), usize> = BTreeMap::new();
    let mut rows: BTreeMap<A, usize> = BTreeMap::new();
    let mut cols: BTreeMap<B, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&v| comb2(v)).sum();
    let sa: f64 = rows.values().map(|&v| comb2(v)).sum();
    let sb: f64 = cols.values().map(|&v| comb2(v)).sum();
    let expected = sa * sb / comb2(n);
    let max = (sa + sb) / 2.0;
    if (max - expected).abs() < 1e-12 {
        return Some(1.0);
    }
    Some((index - expected) / (max - expected))
}

/// ARI within each class between `assigned` groups and `planted` sub-clusters.
/// Classes whose planted partition has a single group get `None`.
pub fn within_class_ari(
    labels: &[i32],
    planted: &[i32],
    assigned: &[usize],
) -> BTreeMap<i32, Option<f64>> {
    let mut by_class: BTreeMap<i32, (Vec<i32>, Vec<usize>)> = BTreeMap::new();
    for ((&l, &p), &a) in labels.iter().zip(planted).zip(assigned) {
        if l < 0 {
            continue;
        }
        let e = by_class.entry(l).or_default();
        e.0.push(p);
        e.1.push(a);
    }
    by_class
        .into_iter()
        .map(|(c, (p, a))| {
            let groups: std::collections::BTreeSet<i32> = p.iter().copied().collect();
            let ari = if groups.len() < 2 {
                None
            } else {
                adjusted_rand_index(&p, &a)
            };
            (c, ari)
        })
        .collect()
}

/// Mean over classes where the index is defined.
pub fn mean_defined(per_class: &BTreeMap<i32, Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = per_class.values().filter_map(|v| *v).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and unit eigenvectors (as rows), sorted descending.
fn symmetric_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| v.iter().map(|row| row[i]).collect())
        .collect();
    (values, vectors)
}

/// Two-component PCA basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Unit principal directions; the largest-magnitude entry of each is positive.
    pub components: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
}

impl Pca2 {
    pub fn fit(points: &RealMatrix) -> Result<Self> {
        let (m, d) = points.shape();
        if m < 2 || d < 2 {
            return Err(contract("PCA needs at least two points of width two"));
        }
        let mut mean = vec![0.0; d];
        for r in points.iter_rows() {
            crate::numerics::axpy(1.0 / m as f64, r, &mut mean);
        }
        let mut cov = vec![vec![0.0; d]; d];
        for r in points.iter_rows() {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in 0..d {
                    cov[i][j] += di * (r[j] - mean[j]) / (m - 1) as f64;
                }
            }
        }
        let (values, mut vectors) = symmetric_eigen(cov);
        for v in vectors.iter_mut().take(2) {
            let big = v
                .iter()
                .copied()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .expect("d >= 2");
            if big.1 < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        Ok(Self {
            mean,
            components: [vectors[0].clone(), vectors[1].clone()],
            explained_variance: [values[0], values[1]],
        })
    }

    pub fn project(&self, x: &[f64]) -> [f64; 2] {
        let c: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        [
            crate::numerics::dot(&c, &self.components[0]),
            crate::numerics::dot(&c, &self.components[1]),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRow {
    pub item: usize,
    pub sub: usize,
    pub usage_count: usize,
    /// Mean ground-truth label of the samples that selected this cell.
    pub mean_assigned_label: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub sample: usize,
    pub label: i32,
    pub subcluster: Option<i32>,
    pub item: usize,
    pub sub: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub usage: Vec<UsageRow>,
    pub assignments: Vec<Assignment>,
    pub zhat: RealMatrix,
    pub per_class_ari: BTreeMap<i32, Option<f64>>,
    pub mean_ari: Option<f64>,
}

impl MemoryReport {
    /// Used cells, most used first (ties by index).
    pub fn top_used(&self, n: usize) -> Vec<&UsageRow> {
        let mut used: Vec<&UsageRow> = self.usage.iter().filter(|u| u.usage_count > 0).collect();
        used.sort_by(|a, b| {
            b.usage_count
                .cmp(&a.usage_count)
                .then((a.item, a.sub).cmp(&(b.item, b.sub)))
        });
        used.truncate(n);
        used
    }
}

/// Addresses every sample and summarizes which sub-prototypes dominate.
pub fn memory_report(view: &ModelView<'_>, ds: &EmbeddingDataset) -> Result<MemoryReport> {
    let bank = view
        .bank
        .as_ref()
        .ok_or_else(|| contract("memory report needs a model with memory"))?;
    let cfg = bank.config;
    let truth = ds.ground_truth();
    let mut zhat = RealMatrix::zeros(ds.len(), cfg.dim);
    let mut assignments = Vec::with_capacity(ds.len());
    let mut label_sums = vec![(0.0, 0usize); cfg.n_rows()];
    let mut dominant = Vec::with_capacity(ds.len());
    let mut counts = vec![0usize; cfg.n_rows()];
    for (i, x) in ds.vectors.iter_rows().enumerate() {
        let (_, res, zh) = view.embed(x)?;
        let res = res.expect("memory present");
        let (item, sub) = res.dominant();
        // one-result histogram keeps the counting rule in one place
        let h = usage_histogram(std::iter::once(&res), &cfg);
        for (c, k) in counts.iter_mut().zip(h) {
            *c += k;
        }
        let cell = cfg.row_index(item, sub);
        if truth[i] >= 0 {
            label_sums[cell].0 += f64::from(truth[i]);
            label_sums[cell].1 += 1;
        }
        zhat.row_mut(i).copy_from_slice(&zh);
        dominant.push(cell);
        assignments.push(Assignment {
            sample: i,
            label: truth[i],
            subcluster: ds.subcluster_ids.as_ref().map(|s| s[i]),
            item,
            sub,
        });
    }
    let usage = (0..cfg.n_rows())
        .map(|cell| UsageRow {
            item: cell / cfg.n_subs,
            sub: cell % cfg.n_subs,
            usage_count: counts[cell],
            mean_assigned_label: (label_sums[cell].1 > 0)
                .then(|| label_sums[cell].0 / label_sums[cell].1 as f64),
        })
        .collect();
    let per_class_ari = match &ds.subcluster_ids {
        Some(planted) => within_class_ari(truth, planted, &dominant),
        None => BTreeMap::new(),
    };
    let mean_ari = mean_defined(&per_class_ari);
    Ok(MemoryReport {
        usage,
        assignments,
        zhat,
        per_class_ari,
        mean_ari,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ari_matches_reference_values() {
        let a = adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]).unwrap();
        assert!((a - 0.571_428_571_428_571_4).abs() < 1e-12);
        let a = adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[1, 1, 0, 0, 2, 2]).unwrap();
        assert!((a - 0.242_424_242_424_242_43).abs() < 1e-12);
        let a = adjusted_rand_index(&[0, 1, 2, 0, 1, 2], &[0, 0, 1, 1, 2, 2]).unwrap();
        assert!((a + 0.25).abs() < 1e-12);
    }

    #[test]
    fn ari_identity_and_relabeling() {
        let a = [3, 3, 1, 1, 7];
        assert_eq!(adjusted_rand_index(&a, &[0, 0, 5, 5, 2]), Some(1.0));
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[1, 1, 1]), Some(1.0));
        assert_eq!(adjusted_rand_index(&[0], &[1]), None);
    }

    #[test]
    fn single_planted_group_is_undefined() {
        let per = within_class_ari(&[0, 0, 0, 1, 1], &[0, 0, 0, 1, 2], &[4, 4, 5, 6, 7]);
        assert_eq!(per[&0], None);
        assert_eq!(per[&1], Some(1.0));
        assert_eq!(mean_defined(&per), Some(1.0));
    }

    #[test]
    fn pca_matches_reference() {
        let x = RealMatrix::from_rows(&[
            vec![2.0, 0.0],
            vec![0.0, 1.0],
            vec![-2.0, 0.0],
            vec![0.0, -1.0],
            vec![1.0, 0.5],
        ])
        .unwrap();
        let p = Pca2::fit(&x).unwrap();
        let expect = [[0.998_181_79, 0.060_275_28], [-0.060_275_28, 0.998_181_79]];
        for (c, e) in p.components.iter().zip(&expect) {
            for (a, b) in c.iter().zip(e) {
                assert!((a - b).abs() < 1e-8);
            }
        }
        let proj = p.project(x.row(0));
        assert!((proj[0] - 1.790_699_7).abs() < 1e-6);
        assert!((proj[1] + 0.208_313_68).abs() < 1e-6);
    }
}
