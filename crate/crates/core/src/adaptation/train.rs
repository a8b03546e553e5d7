use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::consensus::{
    assign_pseudo_labels, class_centers, cycle_consistent_match, PseudoLabeling,
};
use super::kmeans::kmeans;
use super::losses::{loss_cdd, loss_ce, loss_rec, loss_reg, total_loss, LossParts, LossWeights};
use crate::data::EmbeddingDataset;
use crate::error::{contract, Error, Result};
use crate::model::MEM_ITEMS;
use crate::model::{ForwardOutput, Gradients, Model, ModelView};
use crate::numerics::{dot, lr_at, norm, sgd_step, ParamStore, RealMatrix, SgdConfig};

/// Geometry in which task-oriented embeddings are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSpace {
    Raw,
    /// Projected onto the unit sphere.
    Unit,
}

fn to_unit(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Rescales memory rows longer than `cap` back onto the ball of radius `cap`.
fn cap_row_norms(store: &mut ParamStore, cap: f64) -> Result<()> {
    let items = store.get_mut(MEM_ITEMS)?;
    for i in 0..items.rows() {
        let row = items.row_mut(i);
        let n = norm(row);
        if n > cap {
            row.iter_mut().for_each(|x| *x *= cap / n);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `total_iters` is recomputed from epochs and batch count at train time.
    pub sgd: SgdConfig,
    pub loss_weights: LossWeights,
    pub refresh_every: usize,
    /// Target cluster count; `None` means `2·|C_s| + 4`.
    pub k_target: Option<usize>,
    /// Space of the class-mean discrepancy.
    pub cdd_space: EmbeddingSpace,
    /// Space in which target embeddings are clustered.
    pub cluster_space: EmbeddingSpace,
    /// Upper bound on memory row norms, enforced after every step.
    pub max_row_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            // Calibrated on the synthetic benchmark; the smaller stock values
            // barely move the parameters in 60 short epochs.
            sgd: SgdConfig {
                lr0: 0.2,
                ..SgdConfig::default()
            },
            loss_weights: LossWeights {
                lambda1: 0.3,
                ..LossWeights::default()
            },
            refresh_every: 1,
            k_target: None,
            cdd_space: EmbeddingSpace::Unit,
            cluster_space: EmbeddingSpace::Unit,
            max_row_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.refresh_every == 0 || self.k_target == Some(0) {
            return Err(contract(
                "batch_size, refresh_every and k_target must be at least 1",
            ));
        }
        let w = &self.loss_weights;
        if w.lambda1 < 0.0 || w.lambda2 < 0.0 || w.lambda3 < 0.0 {
            return Err(contract("loss weights must be nonnegative"));
        }
        SgdConfig {
            total_iters: 1,
            ..self.sgd
        }
        .validate()
    }

    pub fn k_target_for(&self, n_source_classes: usize) -> usize {
        self.k_target.unwrap_or(2 * n_source_classes + 4)
    }
}

/// One row of the per-epoch history (batch means of each loss term).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub cdd: f64,
    pub reg: f64,
    pub rec: f64,
    pub total: f64,
    pub lr: f64,
    pub n_consensus: usize,
    pub n_unknown: usize,
}

pub const HISTORY_HEADER: &str = "epoch,ce,cdd,reg,rec,total,lr,n_consensus,n_unknown";

/// CSV rendering with round-trip float formatting.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{},{}\n",
            r.epoch, r.ce, r.cdd, r.reg, r.rec, r.total, r.lr, r.n_consensus, r.n_unknown
        ));
    }
    s
}

/// Source samples with labels and target samples with pseudo-labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub src_x: &'a [&'a [f64]],
    pub src_labels: &'a [usize],
    pub tgt_x: &'a [&'a [f64]],
    pub tgt_labels: &'a [Option<usize>],
    pub consensus_classes: &'a [usize],
}

/// Evaluates every loss term on a batch and, if `grads` is given, adds the
/// gradient of the weighted total into it. `cdd_space` selects whether the
/// class-mean discrepancy sees Ẑ as is or projected to the unit sphere.
pub fn batch_objective(
    view: &ModelView<'_>,
    batch: &Batch<'_>,
    weights: &LossWeights,
    cdd_space: EmbeddingSpace,
    grads: Option<&mut Gradients>,
) -> Result<LossParts> {
    let src: Vec<ForwardOutput> = batch
        .src_x
        .iter()
        .map(|x| view.forward(x))
        .collect::<Result<_>>()?;
    let tgt: Vec<ForwardOutput> = batch
        .tgt_x
        .iter()
        .map(|x| view.forward(x))
        .collect::<Result<_>>()?;

    let src_logits: Vec<Vec<f64>> = src.iter().map(|o| o.logits.clone()).collect();
    let (ce, g_ce) = if src.is_empty() {
        (0.0, Vec::new())
    } else {
        loss_ce(&src_logits, batch.src_labels)
    };

    let known: Vec<usize> = (0..tgt.len())
        .filter(|&i| batch.tgt_labels[i].is_some())
        .collect();
    let known_logits: Vec<Vec<f64>> = known.iter().map(|&i| tgt[i].logits.clone()).collect();
    let (reg, g_reg_known) = loss_reg(&known_logits);
    let mut g_reg = vec![None; tgt.len()];
    for (g, &i) in g_reg_known.into_iter().zip(&known) {
        g_reg[i] = Some(g);
    }

    let unit = cdd_space == EmbeddingSpace::Unit;
    let prep = |z: &[f64]| -> Vec<f64> {
        let mut v = z.to_vec();
        if unit {
            to_unit(&mut v);
        }
        v
    };
    let src_zhat: Vec<Vec<f64>> = src.iter().map(|o| prep(&o.zhat)).collect();
    let tgt_zhat: Vec<Vec<f64>> = tgt.iter().map(|o| prep(&o.zhat)).collect();
    let mut cdd = loss_cdd(
        &src_zhat,
        batch.src_labels,
        &tgt_zhat,
        batch.tgt_labels,
        batch.consensus_classes,
    );
    if unit {
        // d(z/|z|)ᵀg = (g − u·(uᵀg)) / |z|
        let back = |outs: &[ForwardOutput], us: &[Vec<f64>], gs: &mut [Vec<f64>]| {
            for ((o, u), g) in outs.iter().zip(us).zip(gs.iter_mut()) {
                let n = norm(&o.zhat);
                let ug = dot(u, g);
                for (gi, ui) in g.iter_mut().zip(u) {
                    *gi = (*gi - ui * ug) / n;
                }
            }
        };
        back(&src, &src_zhat, &mut cdd.grad_src);
        back(&tgt, &tgt_zhat, &mut cdd.grad_tgt);
    }

    let xhat: Vec<Vec<f64>> = src.iter().chain(&tgt).map(|o| o.xhat.clone()).collect();
    let x_all: Vec<&[f64]> = batch.src_x.iter().chain(batch.tgt_x).copied().collect();
    let (rec, g_rec) = loss_rec(&xhat, &x_all);

    let parts = LossParts {
        ce,
        cdd: cdd.loss,
        reg,
        rec,
    };

    if let Some(grads) = grads {
        let w = weights;
        let scaled = |v: &[f64], k: f64| v.iter().map(|x| x * k).collect::<Vec<f64>>();
        let ns = src.len();
        for (i, out) in src.iter().enumerate() {
            let g_logits = &g_ce[i];
            let g_xhat = scaled(&g_rec[i], w.lambda3);
            let g_zhat = scaled(&cdd.grad_src[i], w.lambda1);
            view.backward(out, Some(g_logits), Some(&g_xhat), Some(&g_zhat), grads);
        }
        for (i, out) in tgt.iter().enumerate() {
            let g_logits = g_reg[i].as_ref().map(|g| scaled(g, w.lambda2));
            let g_xhat = scaled(&g_rec[ns + i], w.lambda3);
            let g_zhat = scaled(&cdd.grad_tgt[i], w.lambda1);
            view.backward(
                out,
                g_logits.as_deref(),
                Some(&g_xhat),
                Some(&g_zhat),
                grads,
            );
        }
    }
    Ok(parts)
}

/// Task-oriented embeddings and logits of every row of a dataset.
pub fn embed_all(
    view: &ModelView<'_>,
    ds: &EmbeddingDataset,
) -> Result<(RealMatrix, Vec<Vec<f64>>)> {
    let mut zhat = RealMatrix::zeros(ds.len(), view.model.config.embed_dim());
    let mut logits = Vec::with_capacity(ds.len());
    for (i, x) in ds.vectors.iter_rows().enumerate() {
        let (_, _, zh) = view.embed(x)?;
        logits.push(view.classify(&zh));
        zhat.row_mut(i).copy_from_slice(&zh);
    }
    Ok((zhat, logits))
}

/// Clusters the target embeddings and pairs clusters with source classes.
pub fn refresh_pseudo_labels(
    view: &ModelView<'_>,
    source: &EmbeddingDataset,
    target: &EmbeddingDataset,
    k_target: usize,
    space: EmbeddingSpace,
    seed: u64,
) -> Result<PseudoLabeling> {
    let n_classes = view.model.config.n_classes;
    let (src_zhat, _) = embed_all(view, source)?;
    let (mut tgt_zhat, _) = embed_all(view, target)?;
    if space == EmbeddingSpace::Unit {
        for i in 0..tgt_zhat.rows() {
            to_unit(tgt_zhat.row_mut(i));
        }
    }
    let labels: Vec<usize> = source.labels.iter().map(|&l| l as usize).collect();
    let requested: Vec<usize> = (0..n_classes).collect();
    let src_centers = class_centers(&src_zhat, &labels, &requested);
    let km = kmeans(&tgt_zhat, k_target.min(target.len()), seed)?;
    let tgt_centers: Vec<(usize, Vec<f64>)> = km
        .centers
        .iter_rows()
        .enumerate()
        .map(|(i, r)| (i, r.to_vec()))
        .collect();
    let consensus = cycle_consistent_match(&src_centers, &tgt_centers);
    Ok(assign_pseudo_labels(&km.assignment, &consensus))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub store: ParamStore,
    pub history: Vec<EpochRecord>,
    /// Pseudo-labels from the last refresh, if any epoch ran.
    pub pseudo: Option<PseudoLabeling>,
    pub iterations: usize,
}

fn check_inputs(model: &Model, source: &EmbeddingDataset, target: &EmbeddingDataset) -> Result<()> {
    let in_dim = model.config.encoder.in_dim;
    if source.dim() != in_dim || target.dim() != in_dim {
        return Err(contract(format!(
            "dataset widths ({}, {}) do not match encoder input {in_dim}",
            source.dim(),
            target.dim()
        )));
    }
    if source.is_empty() || target.is_empty() {
        return Err(contract("training needs nonempty source and target data"));
    }
    if let Some(&l) = source
        .labels
        .iter()
        .find(|&&l| l < 0 || l as usize >= model.config.n_classes)
    {
        return Err(contract(format!(
            "source label {l} outside [0, {})",
            model.config.n_classes
        )));
    }
    Ok(())
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
pub fn train(
    model: &Model,
    source: &EmbeddingDataset,
    target: &EmbeddingDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let store = model.init_params(cfg.seed)?;
    train_from(model, store, source, target, cfg)
}

/// Alternates pseudo-label refreshes with epochs of paired source/target
/// mini-batches. The longer stream is covered once per epoch; the shorter
/// one wraps around.
pub fn train_from(
    model: &Model,
    mut store: ParamStore,
    source: &EmbeddingDataset,
    target: &EmbeddingDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_inputs(model, source, target)?;
    let b = cfg.batch_size;
    let (ns, nt) = (source.len(), target.len());
    let steps = ns.max(nt).div_ceil(b);
    let sgd = SgdConfig {
        total_iters: (cfg.epochs * steps).max(1),
        ..cfg.sgd
    };
    let k_target = cfg.k_target_for(model.config.n_classes);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(10);
    let mut src_perm: Vec<usize> = (0..ns).collect();
    let mut tgt_perm: Vec<usize> = (0..nt).collect();
    let src_labels: Vec<usize> = source.labels.iter().map(|&l| l as usize).collect();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut pseudo: Option<PseudoLabeling> = None;
    let mut iter = 0usize;

    for epoch in 0..cfg.epochs {
        if epoch % cfg.refresh_every == 0 || pseudo.is_none() {
            let view = model.view(&store)?;
            let km_seed = cfg
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(epoch as u64);
            pseudo = Some(refresh_pseudo_labels(
                &view,
                source,
                target,
                k_target,
                cfg.cluster_space,
                km_seed,
            )?);
        }
        let pl = pseudo.as_ref().expect("refreshed above");
        let consensus = pl.consensus_classes();

        src_perm.shuffle(&mut rng);
        tgt_perm.shuffle(&mut rng);

        let mut sums = LossParts::default();
        let mut total_sum = 0.0;
        let mut lr = lr_at(&sgd, iter);
        for step in 0..steps {
            let size = b.min(ns.max(nt) - step * b);
            let si: Vec<usize> = (0..size).map(|t| src_perm[(step * b + t) % ns]).collect();
            let ti: Vec<usize> = (0..size).map(|t| tgt_perm[(step * b + t) % nt]).collect();
            let src_x: Vec<&[f64]> = si.iter().map(|&i| source.vectors.row(i)).collect();
            let tgt_x: Vec<&[f64]> = ti.iter().map(|&i| target.vectors.row(i)).collect();
            let sl: Vec<usize> = si.iter().map(|&i| src_labels[i]).collect();
            let tl: Vec<Option<usize>> = ti.iter().map(|&i| pl.pseudo_label[i]).collect();
            let batch = Batch {
                src_x: &src_x,
                src_labels: &sl,
                tgt_x: &tgt_x,
                tgt_labels: &tl,
                consensus_classes: &consensus,
            };

            let mut grads = Gradients::zeros_like(&store);
            let parts = {
                let view = model.view(&store)?;
                batch_objective(
                    &view,
                    &batch,
                    &cfg.loss_weights,
                    cfg.cdd_space,
                    Some(&mut grads),
                )?
            };
            let total = total_loss(&parts, &cfg.loss_weights);
            if !parts.is_finite() || !total.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: step,
                    detail: format!("{parts:?}"),
                });
            }
            grads.accumulate_into(&mut store)?;
            lr = lr_at(&sgd, iter);
            sgd_step(&mut store, &sgd, iter)?;
            if let (Some(cap), true) = (cfg.max_row_norm, model.config.use_memory) {
                cap_row_norms(&mut store, cap)?;
            }
            iter += 1;

            sums.ce += parts.ce;
            sums.cdd += parts.cdd;
            sums.reg += parts.reg;
            sums.rec += parts.rec;
            total_sum += total;
        }
        let k = steps as f64;
        let rec = EpochRecord {
            epoch,
            ce: sums.ce / k,
            cdd: sums.cdd / k,
            reg: sums.reg / k,
            rec: sums.rec / k,
            total: total_sum / k,
            lr,
            n_consensus: pl.consensus.len(),
            n_unknown: pl.n_unknown(),
        };
        log::info!(
            "epoch {epoch}: total {:.5} ce {:.5} cdd {:.5} reg {:.5} rec {:.5} consensus {} unknown {}",
            rec.total,
            rec.ce,
            rec.cdd,
            rec.reg,
            rec.rec,
            rec.n_consensus,
            rec.n_unknown
        );
        history.push(rec);
    }

    Ok(TrainOutput {
        store,
        history,
        pseudo,
        iterations: iter,
    })
}
