//! End-to-end wiring shared by the command-line tool, the benchmarks and the
//! acceptance suite: run configuration, data preparation, evaluation and the
//! full-objective gradient check.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    batch_objective, embed_all, refresh_pseudo_labels, total_loss, Batch, EmbeddingSpace,
    LossWeights, PseudoLabeling, TrainConfig,
};
use crate::data::{
    apply_split, generate_synthetic, Domain, EmbeddingDataset, GeneratorStats, SyntheticSpec,
};
use crate::error::{contract, Result};
use crate::evaluation::{
    compute_metrics, predict_unknown_aware, LabelSplit, Metrics, Prediction, Scenario,
};
use crate::memory::MemoryConfig;
use crate::model::{EncoderKind, EncoderSpec, Gradients, Model, ModelConfig, MEM_ITEMS};
use crate::numerics::{finite_diff_check, GradCheckReport, ParamStore};

/// Every knob of a run; written next to each run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub synthetic: SyntheticSpec,
    pub scenario: Scenario,
    /// `dim` is taken from the data.
    pub memory: MemoryConfig,
    pub hidden: usize,
    pub use_memory: bool,
    pub encoder: EncoderKind,
    /// Output width of the random-projection encoder (ignored when precomputed).
    pub projection_dim: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            scenario: Scenario::UniDa,
            memory: MemoryConfig::default(),
            hidden: 256,
            use_memory: true,
            encoder: EncoderKind::Precomputed,
            projection_dim: 16,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Model configuration for data of width `in_dim` and `n_classes` source classes.
    pub fn model_config(&self, in_dim: usize, n_classes: usize) -> ModelConfig {
        let encoder = match self.encoder {
            EncoderKind::Precomputed => EncoderSpec::precomputed(in_dim),
            EncoderKind::RandomProjection => EncoderSpec {
                kind: EncoderKind::RandomProjection,
                in_dim,
                out_dim: self.projection_dim,
                seed: self.train.seed,
            },
        };
        ModelConfig {
            encoder,
            memory: MemoryConfig {
                dim: encoder.out_dim,
                ..self.memory
            },
            hidden: self.hidden,
            n_classes,
            use_memory: self.use_memory,
        }
    }

    pub fn split(&self) -> LabelSplit {
        LabelSplit::for_synthetic(&self.synthetic, self.scenario)
    }
}

/// Source and target after label-set filtering; target labels are hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub source: EmbeddingDataset,
    pub target: EmbeddingDataset,
    pub split: LabelSplit,
    /// Classifier width `|C_s|` (source class ids are `0..n_classes`).
    pub n_classes: usize,
}

pub fn prepare(
    source: &EmbeddingDataset,
    target: &EmbeddingDataset,
    split: &LabelSplit,
) -> Result<PreparedData> {
    let source = apply_split(source, split, Domain::Source)?;
    let target = apply_split(target, split, Domain::Target)?;
    let n_classes = split.source_classes().len();
    if let Some(&l) = source.labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(contract(format!(
            "source class id {l} is not below |C_s| = {n_classes}; ids must be laid out common first"
        )));
    }
    Ok(PreparedData {
        source,
        target,
        split: split.clone(),
        n_classes,
    })
}

pub fn prepare_synthetic(cfg: &RunConfig) -> Result<(PreparedData, GeneratorStats)> {
    let data = generate_synthetic(&cfg.synthetic)?;
    Ok((
        prepare(&data.source, &data.target, &cfg.split())?,
        data.stats,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub pseudo: PseudoLabeling,
    pub predictions: Vec<Prediction>,
}

/// Seed of the evaluation-time clustering, derived from the training seed.
pub fn eval_cluster_seed(train_seed: u64) -> u64 {
    train_seed ^ 0x5EED_E7A1
}

/// Refreshes pseudo-labels with the given parameters and scores unknown-aware
/// predictions against the target's hidden labels.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    data: &PreparedData,
    k_target: usize,
    space: EmbeddingSpace,
    seed: u64,
) -> Result<Evaluation> {
    let view = model.view(store)?;
    let pseudo = refresh_pseudo_labels(&view, &data.source, &data.target, k_target, space, seed)?;
    let (_, logits) = embed_all(&view, &data.target)?;
    let predictions: Vec<Prediction> = (0..data.target.len())
        .map(|i| predict_unknown_aware(&logits[i], &pseudo, i))
        .collect();
    let mut metrics = compute_metrics(&predictions, data.target.ground_truth(), &data.split)?;
    metrics.n_consensus_clusters = Some(pseudo.consensus.len());
    Ok(Evaluation {
        metrics,
        pseudo,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub model: Model,
    pub train: crate::adaptation::TrainOutput,
    pub eval: Evaluation,
}

/// Trains and evaluates on prepared data.
pub fn run(cfg: &RunConfig, data: &PreparedData) -> Result<RunResult> {
    let model = Model::new(cfg.model_config(data.source.dim(), data.n_classes))?;
    let train = crate::adaptation::train(&model, &data.source, &data.target, &cfg.train)?;
    let k = cfg.train.k_target_for(data.n_classes);
    let eval = evaluate(
        &model,
        &train.store,
        data,
        k,
        cfg.train.cluster_space,
        eval_cluster_seed(cfg.train.seed),
    )?;
    Ok(RunResult { model, train, eval })
}

// ---------------------------------------------------------------------------
// gradient check of the full objective

/// Shape of a small random instance for the gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub n_items: usize,
    pub n_subs: usize,
    pub dim: usize,
    pub top_k: usize,
    pub hidden: usize,
    pub n_classes: usize,
    pub batch: usize,
    pub step: f64,
    pub tol: f64,
    /// Draws with any per-item max within this distance of λ are re-sampled.
    pub locus_margin: f64,
    pub cdd_space: EmbeddingSpace,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            n_items: 8,
            n_subs: 4,
            dim: 8,
            top_k: 5,
            hidden: 6,
            n_classes: 3,
            batch: 4,
            step: 1e-5,
            tol: 1e-4,
            locus_margin: 1e-6,
            cdd_space: EmbeddingSpace::Unit,
        }
    }
}

/// A random instance on which every loss term is active.
pub struct GradCheckInstance {
    pub model: Model,
    pub store: ParamStore,
    pub src_x: Vec<Vec<f64>>,
    pub src_labels: Vec<usize>,
    pub tgt_x: Vec<Vec<f64>>,
    pub tgt_labels: Vec<Option<usize>>,
    pub consensus: Vec<usize>,
    pub cdd_space: EmbeddingSpace,
    /// Draws rejected for sitting near a non-differentiable point.
    pub resampled: usize,
}

impl GradCheckInstance {
    pub fn loss(&self, store: &ParamStore, weights: &LossWeights) -> Result<f64> {
        let view = self.model.view(store)?;
        let src: Vec<&[f64]> = self.src_x.iter().map(Vec::as_slice).collect();
        let tgt: Vec<&[f64]> = self.tgt_x.iter().map(Vec::as_slice).collect();
        let batch = Batch {
            src_x: &src,
            src_labels: &self.src_labels,
            tgt_x: &tgt,
            tgt_labels: &self.tgt_labels,
            consensus_classes: &self.consensus,
        };
        Ok(total_loss(
            &batch_objective(&view, &batch, weights, self.cdd_space, None)?,
            weights,
        ))
    }

    pub fn gradients(&self, weights: &LossWeights) -> Result<Gradients> {
        let view = self.model.view(&self.store)?;
        let src: Vec<&[f64]> = self.src_x.iter().map(Vec::as_slice).collect();
        let tgt: Vec<&[f64]> = self.tgt_x.iter().map(Vec::as_slice).collect();
        let batch = Batch {
            src_x: &src,
            src_labels: &self.src_labels,
            tgt_x: &tgt,
            tgt_labels: &self.tgt_labels,
            consensus_classes: &self.consensus,
        };
        let mut g = Gradients::zeros_like(&self.store);
        batch_objective(&view, &batch, weights, self.cdd_space, Some(&mut g))?;
        Ok(g)
    }

    /// Smallest distance of any forward quantity to a kink: per-item max vs
    /// λ, best vs runner-up inside an item, rectifier inputs vs 0.
    fn kink_distance(&self) -> Result<(f64, f64)> {
        let view = self.model.view(&self.store)?;
        let mut lambda_gap = f64::INFINITY;
        let mut other_gap = f64::INFINITY;
        let s = self.model.config.memory.n_subs;
        for x in self.src_x.iter().chain(&self.tgt_x) {
            let out = view.forward(x)?;
            if let Some(res) = &out.addressing {
                for (i, &a) in res.item_max.iter().enumerate() {
                    if Some(i) != res.lambda_item {
                        lambda_gap = lambda_gap.min((a - res.lambda).abs());
                    }
                    let row = &res.full_weights[i * s..(i + 1) * s];
                    for (j, &w) in row.iter().enumerate() {
                        if j != res.argmax_idx[i] {
                            other_gap = other_gap.min(a - w);
                        }
                    }
                }
            }
            for p in out.clf_cache.pre.iter().chain(&out.dec_cache.pre) {
                other_gap = other_gap.min(p.abs());
            }
        }
        Ok((lambda_gap, other_gap))
    }
}

/// Draws a gradient-check instance, re-sampling near non-differentiable points.
pub fn gradcheck_instance(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckInstance> {
    let model = Model::new(ModelConfig {
        encoder: EncoderSpec::precomputed(cfg.dim),
        memory: MemoryConfig {
            n_items: cfg.n_items,
            n_subs: cfg.n_subs,
            dim: cfg.dim,
            top_k: cfg.top_k,
            epsilon: 1e-12,
        },
        hidden: cfg.hidden,
        n_classes: cfg.n_classes,
        use_memory: true,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resampled = 0;
    loop {
        let store = model.init_params(rng.random())?;
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect())
                .collect()
        };
        let src_x = draw(cfg.batch);
        let tgt_x = draw(cfg.batch);
        // every class present in both batches when the batch allows it
        let mut src_labels: Vec<usize> = (0..cfg.batch).map(|i| i % cfg.n_classes).collect();
        src_labels.shuffle(&mut rng);
        let mut tgt_labels: Vec<Option<usize>> = (0..cfg.batch)
            .map(|i| {
                if i + 1 == cfg.batch && cfg.batch > 2 {
                    None
                } else {
                    Some(i % cfg.n_classes)
                }
            })
            .collect();
        tgt_labels.shuffle(&mut rng);
        let inst = GradCheckInstance {
            model: model.clone(),
            store,
            src_x,
            src_labels,
            tgt_x,
            tgt_labels,
            consensus: (0..cfg.n_classes).collect(),
            cdd_space: cfg.cdd_space,
            resampled,
        };
        let (lambda_gap, other_gap) = inst.kink_distance()?;
        // a step of h moves forward quantities by O(h); keep kinks well outside
        if lambda_gap >= cfg.locus_margin && other_gap >= 1e-3 * cfg.step.sqrt() {
            return Ok(inst);
        }
        resampled += 1;
    }
}

/// Builds an instance, fills analytic gradients (optionally corrupting one
/// parameter group by a factor of 2) and compares to central differences.
pub fn gradcheck(
    cfg: &GradCheckConfig,
    seed: u64,
    corrupt: Option<&str>,
) -> Result<(GradCheckReport, usize)> {
    let weights = LossWeights::default();
    let mut inst = gradcheck_instance(cfg, seed)?;
    let mut grads = inst.gradients(&weights)?;
    if let Some(name) = corrupt {
        if grads.get(name).is_none() {
            return Err(contract(format!("no parameter group {name:?} to corrupt")));
        }
        grads
            .get_mut(name)
            .as_mut_slice()
            .iter_mut()
            .for_each(|g| *g *= 2.0);
    }
    let mut store = std::mem::take(&mut inst.store);
    store.zero_grads();
    grads.accumulate_into(&mut store)?;
    let report = finite_diff_check(
        |s| inst.loss(s, &weights).expect("instance is valid"),
        &mut store,
        cfg.step,
        cfg.tol,
    );
    Ok((report, inst.resampled))
}

/// Names of the trainable groups, memory first.
pub fn param_groups(store: &ParamStore) -> Vec<String> {
    let mut names: Vec<String> = store.names().map(str::to_owned).collect();
    names.sort_by_key(|n| (n != MEM_ITEMS, n.clone()));
    names
}
