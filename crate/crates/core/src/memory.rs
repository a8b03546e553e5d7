//! The sub-prototype memory bank.
//!
//! A bank holds `N` items of `S` sub-prototypes, each a `D`-vector, stored as
//! an `(N·S) × D` row-major matrix (row `i·S + j` is sub-prototype `j` of item
//! `i`). Addressing a query `z`:
//!
//! 1. cosine similarity of `z` to every sub-prototype, softmax over all `N·S`;
//! 2. per item, keep only the best sub-prototype (`s_i`, weight `a_i`);
//! 3. `λ` is the (K+1)-th largest `a_i` (0 when `N ≤ K`), and each `a_i` is
//!    hard-shrunk to `max(a−λ, 0)·a / (|a−λ| + ε)`;
//! 4. survivors are L1-renormalized and the retrieved embedding is the
//!    weighted sum of their selected sub-prototypes.
//!
//! Ties (argmax, order statistics) always resolve toward the lowest index.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, domain, Result};
use crate::numerics::{axpy, dot, norm, RealMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub n_items: usize,
    pub n_subs: usize,
    pub dim: usize,
    pub top_k: usize,
    pub epsilon: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            n_items: 64,
            n_subs: 30,
            dim: 16,
            top_k: 5,
            epsilon: 1e-12,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.n_subs == 0 || self.dim == 0 {
            return Err(contract("memory dimensions must be positive"));
        }
        if self.top_k == 0 || self.top_k > self.n_items {
            return Err(contract(format!(
                "top_k = {} must lie in [1, n_items = {}]",
                self.top_k, self.n_items
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(contract("epsilon must be positive"));
        }
        Ok(())
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.n_items * self.n_subs
    }

    #[inline]
    pub fn row_index(&self, item: usize, sub: usize) -> usize {
        item * self.n_subs + sub
    }
}

/// An owned memory bank.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub config: MemoryConfig,
    pub items: RealMatrix,
}

impl MemoryBank {
    pub fn new(config: MemoryConfig, items: RealMatrix) -> Result<Self> {
        config.validate()?;
        if items.shape() != (config.n_rows(), config.dim) {
            return Err(contract(format!(
                "bank items have shape {:?}, expected ({}, {})",
                items.shape(),
                config.n_rows(),
                config.dim
            )));
        }
        Ok(Self { config, items })
    }

    /// Uniform initialization in `[−1/√D, 1/√D)`; zero rows are redrawn.
    pub fn init_uniform<R: Rng + ?Sized>(config: MemoryConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            items: init_items(&config, rng),
        })
    }

    pub fn view(&self) -> Result<BankView<'_>> {
        BankView::new(self.config, &self.items)
    }
}

pub(crate) fn init_items<R: Rng + ?Sized>(config: &MemoryConfig, rng: &mut R) -> RealMatrix {
    let bound = 1.0 / (config.dim as f64).sqrt();
    let mut items = RealMatrix::zeros(config.n_rows(), config.dim);
    for r in 0..config.n_rows() {
        loop {
            let row = items.row_mut(r);
            for x in row.iter_mut() {
                *x = rng.random_range(-bound..bound);
            }
            if norm(row) > 0.0 {
                break;
            }
        }
    }
    items
}

/// Borrowed bank with cached row norms, valid while the parameters are fixed.
#[derive(Debug, Clone)]
pub struct BankView<'a> {
    pub config: MemoryConfig,
    pub items: &'a RealMatrix,
    norms: Vec<f64>,
}

impl<'a> BankView<'a> {
    pub fn new(config: MemoryConfig, items: &'a RealMatrix) -> Result<Self> {
        config.validate()?;
        if items.shape() != (config.n_rows(), config.dim) {
            return Err(contract(format!(
                "bank items have shape {:?}, expected ({}, {})",
                items.shape(),
                config.n_rows(),
                config.dim
            )));
        }
        let norms: Vec<f64> = items.iter_rows().map(norm).collect();
        if let Some(r) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
            return Err(domain(format!("memory row {r} has degenerate norm")));
        }
        Ok(Self {
            config,
            items,
            norms,
        })
    }

    #[inline]
    pub fn sub_prototype(&self, item: usize, sub: usize) -> &[f64] {
        self.items.row(self.config.row_index(item, sub))
    }
}

/// Every intermediate of one addressing pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AddressingResult {
    /// `N·S` softmax weights, item-major.
    pub full_weights: Vec<f64>,
    /// Selected sub-prototype per item.
    pub argmax_idx: Vec<usize>,
    pub item_max: Vec<f64>,
    pub lambda: f64,
    /// Item whose per-item max defines `lambda` (`None` when `N ≤ K`).
    pub lambda_item: Option<usize>,
    pub shrunk: Vec<f64>,
    /// Surviving items, ascending.
    pub kept_items: Vec<usize>,
    /// Renormalized weights, parallel to `kept_items`.
    pub kept_weights: Vec<f64>,
    /// True when shrinkage removed every item and the best item was kept alone.
    pub fell_back: bool,
}

impl AddressingResult {
    /// The (item, sub) with the largest kept weight.
    pub fn dominant(&self) -> (usize, usize) {
        let mut best = 0;
        for k in 1..self.kept_items.len() {
            if self.kept_weights[k] > self.kept_weights[best] {
                best = k;
            }
        }
        let item = self.kept_items[best];
        (item, self.argmax_idx[item])
    }
}

/// Softmax over cosine similarities of `z` to every sub-prototype.
pub fn attention_weights(z: &[f64], bank: &BankView<'_>) -> Result<Vec<f64>> {
    let cfg = &bank.config;
    if z.len() != cfg.dim {
        return Err(contract(format!(
            "query width {} does not match memory dim {}",
            z.len(),
            cfg.dim
        )));
    }
    let zn = norm(z);
    if !(zn > 0.0) || !zn.is_finite() {
        return Err(domain("addressing with a zero or non-finite query"));
    }
    let mut w: Vec<f64> = bank
        .items
        .iter_rows()
        .zip(&bank.norms)
        .map(|(m, &mn)| dot(z, m) / (zn * mn))
        .collect();
    // cosines lie in [-1, 1], so exp cannot overflow without max-subtraction
    let mut sum = 0.0;
    for x in w.iter_mut() {
        *x = x.exp();
        sum += *x;
    }
    for x in w.iter_mut() {
        *x /= sum;
    }
    Ok(w)
}

/// Per-item maximum over sub-prototypes of an item-major `N×S` tensor.
pub fn per_item_max(w: &[f64], n_subs: usize) -> (Vec<usize>, Vec<f64>) {
    w.chunks_exact(n_subs)
        .map(|row| {
            let mut j = 0;
            for (s, &x) in row.iter().enumerate().skip(1) {
                if x > row[j] {
                    j = s;
                }
            }
            (j, row[j])
        })
        .unzip()
}

/// Index of the item holding the (top_k+1)-th largest value, if `N > top_k`.
pub fn lambda_item(item_max: &[f64], top_k: usize) -> Option<usize> {
    if item_max.len() <= top_k {
        return None;
    }
    let mut order: Vec<usize> = (0..item_max.len()).collect();
    order.sort_by(|&a, &b| item_max[b].total_cmp(&item_max[a]).then(a.cmp(&b)));
    Some(order[top_k])
}

/// The (top_k+1)-th largest per-item max, or 0 when there are at most top_k items.
pub fn adaptive_lambda(item_max: &[f64], top_k: usize) -> f64 {
    lambda_item(item_max, top_k).map_or(0.0, |i| item_max[i])
}

/// `max(w−λ, 0)·w / (|w−λ| + ε)`, elementwise.
pub fn threshold_shrink(item_max: &[f64], lambda: f64, epsilon: f64) -> Vec<f64> {
    item_max
        .iter()
        .map(|&w| (w - lambda).max(0.0) * w / ((w - lambda).abs() + epsilon))
        .collect()
}

/// Divides by the L1 sum; zeros stay zero. An all-zero input is returned unchanged.
pub fn renormalize(shrunk: &[f64]) -> Vec<f64> {
    let sum: f64 = shrunk.iter().sum();
    if sum > 0.0 {
        shrunk.iter().map(|x| x / sum).collect()
    } else {
        shrunk.to_vec()
    }
}

pub fn address(z: &[f64], bank: &BankView<'_>) -> Result<AddressingResult> {
    let cfg = &bank.config;
    let full_weights = attention_weights(z, bank)?;
    let (argmax_idx, item_max) = per_item_max(&full_weights, cfg.n_subs);
    let lam_item = lambda_item(&item_max, cfg.top_k);
    let lambda = lam_item.map_or(0.0, |i| item_max[i]);
    let shrunk = threshold_shrink(&item_max, lambda, cfg.epsilon);

    let mut kept_items: Vec<usize> = (0..cfg.n_items).filter(|&i| shrunk[i] > 0.0).collect();
    let fell_back = kept_items.is_empty();
    let kept_weights = if fell_back {
        let best = crate::numerics::argmax(&item_max);
        log::warn!(
            "threshold shrinkage removed every memory item (lambda = {lambda:e}); keeping item {best}"
        );
        kept_items.push(best);
        vec![1.0]
    } else {
        let sum: f64 = kept_items.iter().map(|&i| shrunk[i]).sum();
        kept_items.iter().map(|&i| shrunk[i] / sum).collect()
    };

    Ok(AddressingResult {
        full_weights,
        argmax_idx,
        item_max,
        lambda,
        lambda_item: lam_item,
        shrunk,
        kept_items,
        kept_weights,
        fell_back,
    })
}

/// Weighted sum of the selected sub-prototypes of the kept items.
pub fn retrieve(res: &AddressingResult, bank: &BankView<'_>) -> Vec<f64> {
    let mut out = vec![0.0; bank.config.dim];
    for (&i, &w) in res.kept_items.iter().zip(&res.kept_weights) {
        axpy(w, bank.sub_prototype(i, res.argmax_idx[i]), &mut out);
    }
    out
}

/// Accumulates `∂L/∂items` into `grad_items` (same layout as the bank) and
/// returns `∂L/∂z`, given `grad_out = ∂L/∂Ẑ`.
///
/// The selections (argmax per item, kept set, which item sets `λ`) are held
/// fixed; the value of `λ` is differentiated as the per-item max it equals.
pub fn backward_into(
    res: &AddressingResult,
    bank: &BankView<'_>,
    z: &[f64],
    grad_out: &[f64],
    grad_items: &mut [f64],
) -> Vec<f64> {
    let cfg = &bank.config;
    let dim = cfg.dim;
    debug_assert_eq!(grad_items.len(), cfg.n_rows() * dim);
    let mut grad_z = vec![0.0; dim];

    // Ẑ = Σ r_k m_k
    let mut g_r = Vec::with_capacity(res.kept_items.len());
    for (&i, &r) in res.kept_items.iter().zip(&res.kept_weights) {
        let row = cfg.row_index(i, res.argmax_idx[i]);
        axpy(r, grad_out, &mut grad_items[row * dim..(row + 1) * dim]);
        g_r.push(dot(grad_out, bank.items.row(row)));
    }
    if res.fell_back {
        return grad_z;
    }

    // r = ŵ / Σŵ
    let sum: f64 = res.kept_items.iter().map(|&i| res.shrunk[i]).sum();
    let mean_gr: f64 = g_r.iter().zip(&res.kept_weights).map(|(g, r)| g * r).sum();

    // ŵ(a, λ) on the smooth branch a > λ
    let mut g_a = vec![0.0; cfg.n_items];
    let mut g_lambda = 0.0;
    let eps = cfg.epsilon;
    for (k, &i) in res.kept_items.iter().enumerate() {
        let g_w = (g_r[k] - mean_gr) / sum;
        let a = res.item_max[i];
        let d = a - res.lambda;
        let den = (d + eps) * (d + eps);
        g_a[i] += g_w * (a * eps + d * d + d * eps) / den;
        g_lambda -= g_w * a * eps / den;
    }
    if let Some(j) = res.lambda_item {
        g_a[j] += g_lambda;
    }

    // a_i = w[i, s_i] → softmax → cosine
    let g_dot: f64 = (0..cfg.n_items)
        .map(|i| g_a[i] * res.full_weights[cfg.row_index(i, res.argmax_idx[i])])
        .sum();
    let zn = norm(z);
    for i in 0..cfg.n_items {
        for s in 0..cfg.n_subs {
            let row = cfg.row_index(i, s);
            let g_sel = if s == res.argmax_idx[i] { g_a[i] } else { 0.0 };
            let g_c = res.full_weights[row] * (g_sel - g_dot);
            if g_c == 0.0 {
                continue;
            }
            let m = bank.items.row(row);
            let mn = bank.norms[row];
            let c = dot(z, m) / (zn * mn);
            let gm = &mut grad_items[row * dim..(row + 1) * dim];
            let (a1, a2) = (g_c / (zn * mn), g_c * c / (mn * mn));
            let (b1, b2) = (g_c / (zn * mn), g_c * c / (zn * zn));
            for d in 0..dim {
                gm[d] += a1 * z[d] - a2 * m[d];
                grad_z[d] += b1 * m[d] - b2 * z[d];
            }
        }
    }
    grad_z
}

/// Owned-gradient form of [`backward_into`]: `(∂L/∂items, ∂L/∂z)`.
pub fn backward_retrieve(
    res: &AddressingResult,
    bank: &BankView<'_>,
    z: &[f64],
    grad_out: &[f64],
) -> (RealMatrix, Vec<f64>) {
    let cfg = &bank.config;
    let mut g = RealMatrix::zeros(cfg.n_rows(), cfg.dim);
    let gz = backward_into(res, bank, z, grad_out, g.as_mut_slice());
    (g, gz)
}

/// Counts of how often each sub-prototype was the dominant selection,
/// item-major `N·S`.
pub fn usage_histogram<'r, I>(results: I, config: &MemoryConfig) -> Vec<usize>
where
    I: IntoIterator<Item = &'r AddressingResult>,
{
    let mut counts = vec![0; config.n_rows()];
    for res in results {
        let (i, s) = res.dominant();
        counts[config.row_index(i, s)] += 1;
    }
    counts
}
