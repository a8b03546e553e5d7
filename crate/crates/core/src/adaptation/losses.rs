//! Loss terms and their gradients. Every term is a batch mean, and every
//! gradient is with respect to the per-sample inputs of that term.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::{log_sum_exp, softmax};

/// Weight of the inter-class term in the class-mean discrepancy.
pub const CDD_INTER_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Class-mean discrepancy.
    pub lambda1: f64,
    /// Target prediction entropy.
    pub lambda2: f64,
    /// Reconstruction.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 3.0,
            lambda3: 0.5,
        }
    }
}

impl LossWeights {
    pub const ZERO: Self = Self {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
    };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub cdd: f64,
    pub reg: f64,
    pub rec: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.cdd.is_finite() && self.reg.is_finite() && self.rec.is_finite()
    }
}

/// `ce + λ1·cdd + λ2·reg + λ3·rec`
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.ce + w.lambda1 * parts.cdd + w.lambda2 * parts.reg + w.lambda3 * parts.rec
}

/// Mean cross-entropy and `∂/∂logits`.
pub fn loss_ce(logits: &[Vec<f64>], labels: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let b = logits.len() as f64;
    let mut loss = 0.0;
    let grads = logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| {
            loss += log_sum_exp(l) - l[y];
            let mut g = softmax(l).expect("finite logits");
            g[y] -= 1.0;
            g.iter_mut().for_each(|x| *x /= b);
            g
        })
        .collect();
    (loss / b, grads)
}

/// Mean prediction entropy `−Σ p log p` and `∂/∂logits`.
pub fn loss_reg(logits: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    if logits.is_empty() {
        return (0.0, Vec::new());
    }
    let b = logits.len() as f64;
    let mut loss = 0.0;
    let grads = logits
        .iter()
        .map(|l| {
            let lse = log_sum_exp(l);
            let p = softmax(l).expect("finite logits");
            let logp: Vec<f64> = l.iter().map(|x| x - lse).collect();
            let h: f64 = -p.iter().zip(&logp).map(|(p, lp)| p * lp).sum::<f64>();
            loss += h;
            p.iter()
                .zip(&logp)
                .map(|(p, lp)| -p * (lp + h) / b)
                .collect()
        })
        .collect();
    (loss / b, grads)
}

/// Mean squared error over batch and dimensions, and `∂/∂x̂`.
pub fn loss_rec(xhat: &[Vec<f64>], x: &[&[f64]]) -> (f64, Vec<Vec<f64>>) {
    let count: usize = xhat.iter().map(Vec::len).sum();
    if count == 0 {
        return (0.0, vec![Vec::new(); xhat.len()]);
    }
    let n = count as f64;
    let mut loss = 0.0;
    let grads = xhat
        .iter()
        .zip(x)
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .map(|(p, q)| {
                    let d = p - q;
                    loss += d * d;
                    2.0 * d / n
                })
                .collect()
        })
        .collect();
    (loss / n, grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CddOutput {
    pub loss: f64,
    pub intra: f64,
    pub inter: f64,
    /// Classes that entered the loss.
    pub classes: Vec<usize>,
    pub grad_src: Vec<Vec<f64>>,
    pub grad_tgt: Vec<Vec<f64>>,
}

fn class_sums(
    z: &[Vec<f64>],
    labels: &[Option<usize>],
    dim: usize,
) -> BTreeMap<usize, (Vec<f64>, usize)> {
    let mut m: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (v, l) in z.iter().zip(labels) {
        if let Some(c) = *l {
            let e = m.entry(c).or_insert_with(|| (vec![0.0; dim], 0));
            crate::numerics::axpy(1.0, v, &mut e.0);
            e.1 += 1;
        }
    }
    m
}

/// Class-mean discrepancy: `intra − γ·inter` with
/// `intra = mean_c ‖μˢ_c − μᵗ_c‖²` and `inter = mean_{c≠c'} ‖μ_c − μ_c'‖²`
/// over pooled source ∪ target means. Only consensus classes present in both
/// batches participate; target samples labeled `None` (unknown) are ignored.
pub fn loss_cdd(
    src: &[Vec<f64>],
    src_labels: &[usize],
    tgt: &[Vec<f64>],
    tgt_labels: &[Option<usize>],
    consensus_classes: &[usize],
) -> CddOutput {
    let dim = src.first().or(tgt.first()).map_or(0, Vec::len);
    let src_l: Vec<Option<usize>> = src_labels.iter().map(|&c| Some(c)).collect();
    let s_sums = class_sums(src, &src_l, dim);
    let t_sums = class_sums(tgt, tgt_labels, dim);
    let classes: Vec<usize> = consensus_classes
        .iter()
        .copied()
        .filter(|c| s_sums.contains_key(c) && t_sums.contains_key(c))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut out = CddOutput {
        loss: 0.0,
        intra: 0.0,
        inter: 0.0,
        classes: classes.clone(),
        grad_src: vec![vec![0.0; dim]; src.len()],
        grad_tgt: vec![vec![0.0; dim]; tgt.len()],
    };
    if classes.is_empty() {
        log::debug!("no consensus class present in both batches; discrepancy term is 0");
        return out;
    }

    let m = classes.len() as f64;
    let mean = |s: &(Vec<f64>, usize)| s.0.iter().map(|x| x / s.1 as f64).collect::<Vec<f64>>();
    // per class: (μˢ − μᵗ, pooled μ, n_s, n_t)
    let mut stats = BTreeMap::new();
    for &c in &classes {
        let (s, t) = (&s_sums[&c], &t_sums[&c]);
        let (ms, mt) = (mean(s), mean(t));
        let diff: Vec<f64> = ms.iter().zip(&mt).map(|(a, b)| a - b).collect();
        let pooled: Vec<f64> =
            s.0.iter()
                .zip(&t.0)
                .map(|(a, b)| (a + b) / (s.1 + t.1) as f64)
                .collect();
        out.intra += diff.iter().map(|x| x * x).sum::<f64>() / m;
        stats.insert(c, (diff, pooled, s.1, t.1));
    }

    // ∂L/∂μ_c (pooled) accumulated for the inter term
    let mut g_pooled: BTreeMap<usize, Vec<f64>> =
        classes.iter().map(|&c| (c, vec![0.0; dim])).collect();
    if classes.len() > 1 {
        let pairs = m * (m - 1.0);
        for &a in &classes {
            for &b in &classes {
                if a == b {
                    continue;
                }
                let (pa, pb) = (&stats[&a].1, &stats[&b].1);
                let mut d2 = 0.0;
                let ga = g_pooled.get_mut(&a).expect("class present");
                for k in 0..dim {
                    let d = pa[k] - pb[k];
                    d2 += d * d;
                    // pair (a,b) and its mirror (b,a) both contribute 2d to a
                    ga[k] += -CDD_INTER_WEIGHT * 4.0 * d / pairs;
                }
                out.inter += d2 / pairs;
            }
        }
    }
    out.loss = out.intra - CDD_INTER_WEIGHT * out.inter;

    for (i, &c) in src_labels.iter().enumerate() {
        if let Some((diff, _, ns, nt)) = stats.get(&c) {
            let gp = &g_pooled[&c];
            for k in 0..dim {
                out.grad_src[i][k] = 2.0 * diff[k] / (m * *ns as f64) + gp[k] / (ns + nt) as f64;
            }
        }
    }
    for (i, l) in tgt_labels.iter().enumerate() {
        if let Some((diff, _, ns, nt)) = l.and_then(|c| stats.get(&c)) {
            let gp = &g_pooled[&l.expect("some")];
            for k in 0..dim {
                out.grad_tgt[i][k] = -2.0 * diff[k] / (m * *nt as f64) + gp[k] / (ns + nt) as f64;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_examples() {
        let (l, _) = loss_ce(&[vec![0.3; 4]], &[2]);
        assert!((l - 4f64.ln()).abs() < 1e-15);
        let (l, _) = loss_ce(&[vec![0.0, 800.0]], &[1]);
        assert!(l < 1e-300);
        let a = loss_ce(&[vec![1.0, -1.0], vec![0.2, 0.9]], &[0, 0]).0;
        let b = loss_ce(&[vec![0.2, 0.9], vec![1.0, -1.0]], &[0, 0]).0;
        assert_eq!(a, b);
    }

    #[test]
    fn reg_examples() {
        assert!((loss_reg(&[vec![1.0; 4]]).0 - 4f64.ln()).abs() < 1e-15);
        let onehot = vec![0.0, 0.0, 900.0, 0.0];
        assert!(loss_reg(std::slice::from_ref(&onehot)).0.abs() < 1e-300);
        let mixed = loss_reg(&[vec![1.0; 4], onehot]).0;
        assert!((mixed - 4f64.ln() / 2.0).abs() < 1e-15);
        assert_eq!(loss_reg(&[]).0, 0.0);
    }

    #[test]
    fn rec_examples() {
        let x = [1.0, 2.0];
        assert_eq!(loss_rec(&[x.to_vec()], &[&x]).0, 0.0);
        assert_eq!(loss_rec(&[vec![2.0, 3.0]], &[&x]).0, 1.0);
        assert_eq!(loss_rec(&[vec![1.0, 2.0]], &[&[0.0, 4.0]]).0, 2.5);
    }

    #[test]
    fn total_examples() {
        let zero = LossParts::default();
        assert_eq!(total_loss(&zero, &LossWeights::default()), 0.0);
        let p = LossParts {
            ce: 0.7,
            cdd: 5.0,
            reg: 2.0,
            rec: 9.0,
        };
        assert_eq!(total_loss(&p, &LossWeights::ZERO), 0.7);
        let ones = LossParts {
            ce: 1.0,
            cdd: 1.0,
            reg: 1.0,
            rec: 1.0,
        };
        assert!((total_loss(&ones, &LossWeights::default()) - 4.6).abs() < 1e-15);
    }

    #[test]
    fn cdd_matching_means_have_no_intra() {
        let s = vec![vec![1.0, 0.0], vec![3.0, 0.0]];
        let t = vec![vec![2.0, 0.0]];
        let out = loss_cdd(&s, &[0, 0], &t, &[Some(0)], &[0]);
        assert_eq!(out.intra, 0.0);
        assert_eq!(out.inter, 0.0);
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn cdd_single_class_is_intra() {
        let s = vec![vec![0.0, 0.0]];
        let t = vec![vec![1.0, 2.0], vec![9.0, 9.0]];
        let out = loss_cdd(&s, &[4], &t, &[Some(4), None], &[4, 7]);
        assert_eq!(out.classes, vec![4]);
        assert_eq!(out.loss, 5.0);
        assert_eq!(out.grad_tgt[1], vec![0.0, 0.0]);
    }

    #[test]
    fn cdd_two_class_hand_instance() {
        let s = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![4.0, 4.0]];
        let t = vec![vec![1.0, 1.0], vec![5.0, 3.0], vec![3.0, 5.0]];
        let out = loss_cdd(&s, &[0, 0, 1], &t, &[Some(0), Some(1), Some(1)], &[0, 1]);
        assert!((out.intra - 0.5).abs() < 1e-15);
        assert!((out.inter - 22.444_444_444_444_443).abs() < 1e-12);
        assert!((out.loss + 1.744_444_444_444_444_5).abs() < 1e-12);
    }

    #[test]
    fn cdd_without_shared_class_is_zero() {
        let out = loss_cdd(&[vec![1.0]], &[0], &[vec![2.0]], &[Some(1)], &[0, 1]);
        assert_eq!(out.loss, 0.0);
        assert!(out.classes.is_empty());
    }

    /// Central differences on every input coordinate of every term.
    #[test]
    fn term_gradients_match_central_differences() {
        let h = 1e-6;
        let logits = vec![vec![0.3, -1.2, 0.8], vec![1.5, 0.1, -0.4]];
        let check = |f: &dyn Fn(&[Vec<f64>]) -> f64, g: &[Vec<f64>], x: &[Vec<f64>]| {
            for i in 0..x.len() {
                for k in 0..x[i].len() {
                    let mut p = x.to_vec();
                    p[i][k] += h;
                    let mut m = x.to_vec();
                    m[i][k] -= h;
                    let num = (f(&p) - f(&m)) / (2.0 * h);
                    assert!(
                        (num - g[i][k]).abs() < 1e-7,
                        "{i},{k}: {num} vs {}",
                        g[i][k]
                    );
                }
            }
        };
        let (_, g) = loss_ce(&logits, &[2, 0]);
        check(&|l| loss_ce(l, &[2, 0]).0, &g, &logits);
        let (_, g) = loss_reg(&logits);
        check(&|l| loss_reg(l).0, &g, &logits);
        let x = [[0.5, 0.5, 0.5], [1.0, -1.0, 0.0]];
        let xr: Vec<&[f64]> = x.iter().map(|r| &r[..]).collect();
        let (_, g) = loss_rec(&logits, &xr);
        check(&|l| loss_rec(l, &xr).0, &g, &logits);

        let s = vec![
            vec![0.0, 0.5],
            vec![2.0, 0.1],
            vec![4.0, 4.0],
            vec![-1.0, 2.0],
        ];
        let sl = [0, 0, 1, 2];
        let t = vec![
            vec![1.0, 1.0],
            vec![5.0, 3.0],
            vec![3.0, 5.0],
            vec![0.0, 3.0],
        ];
        let tl = [Some(0), Some(1), None, Some(2)];
        let cons = [0, 1, 2];
        let out = loss_cdd(&s, &sl, &t, &tl, &cons);
        check(
            &|v| loss_cdd(v, &sl, &t, &tl, &cons).loss,
            &out.grad_src,
            &s,
        );
        check(
            &|v| loss_cdd(&s, &sl, v, &tl, &cons).loss,
            &out.grad_tgt,
            &t,
        );
    }
}
