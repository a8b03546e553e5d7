use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::{dot, norm, RealMatrix};

/// Target cluster assignments and the pseudo-labels they induce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeling {
    pub cluster_of: Vec<usize>,
    /// `(source class, target cluster)` mutual nearest neighbors.
    pub consensus: Vec<(usize, usize)>,
    /// Matched class, or `None` for unknown.
    pub pseudo_label: Vec<Option<usize>>,
    pub unknown_mask: Vec<bool>,
}

impl PseudoLabeling {
    pub fn n_unknown(&self) -> usize {
        self.unknown_mask.iter().filter(|&&u| u).count()
    }

    pub fn consensus_classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.consensus.iter().map(|p| p.0).collect();
        c.sort_unstable();
        c
    }
}

/// Per-class mean of `zhat` rows. Classes in `requested` with no samples are
/// left out (with a diagnostic); labels outside `requested` are ignored.
pub fn class_centers(
    zhat: &RealMatrix,
    labels: &[usize],
    requested: &[usize],
) -> Vec<(usize, Vec<f64>)> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = requested
        .iter()
        .map(|&c| (c, (vec![0.0; zhat.cols()], 0)))
        .collect();
    for (row, l) in zhat.iter_rows().zip(labels) {
        if let Some(e) = sums.get_mut(l) {
            crate::numerics::axpy(1.0, row, &mut e.0);
            e.1 += 1;
        }
    }
    sums.into_iter()
        .filter_map(|(c, (s, n))| {
            if n == 0 {
                log::warn!("class {c} has no samples; no center computed");
                None
            } else {
                Some((c, s.into_iter().map(|x| x / n as f64).collect()))
            }
        })
        .collect()
}

fn nearest_by_cosine(v: &[f64], others: &[(usize, Vec<f64>)]) -> Option<usize> {
    let nv = norm(v);
    if nv == 0.0 {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for (pos, (_, o)) in others.iter().enumerate() {
        let no = norm(o);
        if no == 0.0 {
            continue;
        }
        let c = dot(v, o) / (nv * no);
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((pos, c));
        }
    }
    best.map(|b| b.0)
}

/// Mutual nearest neighbors under cosine similarity. Returns `(a_id, b_id)`
/// pairs in the order of `a`. Ties resolve to the earlier entry; zero-norm
/// centers never match.
pub fn cycle_consistent_match(
    a: &[(usize, Vec<f64>)],
    b: &[(usize, Vec<f64>)],
) -> Vec<(usize, usize)> {
    let a_to_b: Vec<Option<usize>> = a.iter().map(|(_, v)| nearest_by_cosine(v, b)).collect();
    let b_to_a: Vec<Option<usize>> = b.iter().map(|(_, v)| nearest_by_cosine(v, a)).collect();
    a_to_b
        .iter()
        .enumerate()
        .filter_map(|(i, &j)| {
            let j = j?;
            (b_to_a[j] == Some(i)).then(|| (a[i].0, b[j].0))
        })
        .collect()
}

pub fn assign_pseudo_labels(assignment: &[usize], consensus: &[(usize, usize)]) -> PseudoLabeling {
    let by_cluster: BTreeMap<usize, usize> = consensus.iter().map(|&(c, t)| (t, c)).collect();
    let pseudo_label: Vec<Option<usize>> = assignment
        .iter()
        .map(|t| by_cluster.get(t).copied())
        .collect();
    PseudoLabeling {
        cluster_of: assignment.to_vec(),
        consensus: consensus.to_vec(),
        unknown_mask: pseudo_label.iter().map(Option::is_none).collect(),
        pseudo_label,
    }
}
