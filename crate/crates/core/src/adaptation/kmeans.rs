use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::numerics::{axpy, squared_distance, RealMatrix};

const MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: RealMatrix,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to assigned centers.
    pub distortion: f64,
    pub iterations: usize,
}

fn nearest(p: &[f64], centers: &RealMatrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centers.iter_rows().enumerate() {
        let d = squared_distance(p, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations, deterministic in `seed`.
///
/// Stops at an assignment fixed point or after 100 iterations. A cluster
/// that empties is re-seeded with the point farthest from its own center.
pub fn kmeans(points: &RealMatrix, k: usize, seed: u64) -> Result<KMeans> {
    let (m, dim) = points.shape();
    if k == 0 || m < k {
        return Err(contract(format!(
            "k-means needs 1 <= k <= m, got k = {k}, m = {m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // seeding: D² sampling
    let mut chosen = vec![rng.random_range(0..m)];
    let mut d2: Vec<f64> = points
        .iter_rows()
        .map(|p| squared_distance(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if r < w {
                        break;
                    }
                    r -= w;
                }
            }
            pick.expect("positive total mass")
        } else {
            // all remaining points duplicate a chosen one
            (0..m).find(|i| !chosen.contains(i)).expect("m >= k")
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points.iter_rows()) {
            *d = d.min(squared_distance(p, points.row(next)));
        }
    }
    let mut centers = points.select_rows(&chosen);

    let mut assignment = vec![usize::MAX; m];
    let mut iterations = 0;
    loop {
        let mut changed = false;
        for (i, p) in points.iter_rows().enumerate() {
            let (c, _) = nearest(p, &centers);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        if !changed || iterations == MAX_ITERS {
            break;
        }
        iterations += 1;

        let mut sums = RealMatrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter_rows().enumerate() {
            axpy(1.0, p, sums.row_mut(assignment[i]));
            counts[assignment[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / n;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..m)
                    .max_by(|&a, &b| {
                        let da = squared_distance(points.row(a), centers.row(assignment[a]));
                        let db = squared_distance(points.row(b), centers.row(assignment[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("m >= 1");
                log::debug!("k-means cluster {c} emptied; re-seeding from point {far}");
                centers.row_mut(c).copy_from_slice(points.row(far));
                counts[assignment[far]] -= 1;
                assignment[far] = c;
                counts[c] = 1;
            }
        }
    }

    let distortion = points
        .iter_rows()
        .zip(&assignment)
        .map(|(p, &c)| squared_distance(p, centers.row(c)))
        .sum();
    Ok(KMeans {
        centers,
        assignment,
        distortion,
        iterations,
    })
}
