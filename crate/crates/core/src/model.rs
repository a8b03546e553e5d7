//! Frozen encoder, two-layer classifier and decoder, and the assembled
//! forward pass `x → z → (address, retrieve) → ẑ → (logits, x̂)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::memory::{self, AddressingResult, BankView, MemoryConfig};
use crate::numerics::{argmax, ParamStore, RealMatrix};

pub const MEM_ITEMS: &str = "mem.items";
pub const CLF_NAMES: [&str; 4] = ["clf.w1", "clf.b1", "clf.w2", "clf.b2"];
pub const DEC_NAMES: [&str; 4] = ["dec.v1", "dec.c1", "dec.v2", "dec.c2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Precomputed,
    RandomProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EncoderSpec {
    pub fn precomputed(dim: usize) -> Self {
        Self {
            kind: EncoderKind::Precomputed,
            in_dim: dim,
            out_dim: dim,
            seed: 0,
        }
    }
}

/// The frozen map `X → Z`. Holds no trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    spec: EncoderSpec,
    projection: Option<RealMatrix>,
}

impl Encoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        let projection = match spec.kind {
            EncoderKind::Precomputed => {
                if spec.in_dim != spec.out_dim {
                    return Err(contract(format!(
                        "precomputed encoder needs in_dim == out_dim, got {} and {}",
                        spec.in_dim, spec.out_dim
                    )));
                }
                None
            }
            EncoderKind::RandomProjection => {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                let scale = 1.0 / (spec.in_dim as f64).sqrt();
                let data = (0..spec.in_dim * spec.out_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                    .collect();
                Some(RealMatrix::from_vec(spec.out_dim, spec.in_dim, data)?)
            }
        };
        Ok(Self { spec, projection })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.spec.in_dim {
            return Err(contract(format!(
                "encoder input width {} does not match in_dim {}",
                x.len(),
                self.spec.in_dim
            )));
        }
        Ok(match &self.projection {
            None => x.to_vec(),
            Some(p) => {
                let mut z = vec![0.0; self.spec.out_dim];
                p.mul_vec(x, &mut z);
                z
            }
        })
    }
}

/// Shape and wiring of the trainable model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    pub memory: MemoryConfig,
    pub hidden: usize,
    pub n_classes: usize,
    /// When false, the memory is bypassed (`ẑ := z`) and `mem.items` does not exist.
    #[serde(default = "default_true")]
    pub use_memory: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.use_memory {
            self.memory.validate()?;
            if self.memory.dim != self.encoder.out_dim {
                return Err(contract(format!(
                    "memory dim {} must equal encoder output dim {}",
                    self.memory.dim, self.encoder.out_dim
                )));
            }
        }
        if self.hidden == 0 || self.n_classes == 0 {
            return Err(contract("hidden width and class count must be positive"));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.out_dim
    }
}

/// Borrowed two-layer perceptron `out = W2ᵀ relu(W1ᵀ x + b1) + b2`.
#[derive(Debug, Clone, Copy)]
pub struct TwoLayer<'a> {
    pub w1: &'a RealMatrix,
    pub b1: &'a RealMatrix,
    pub w2: &'a RealMatrix,
    pub b2: &'a RealMatrix,
    names: [&'static str; 4],
}

/// The classifier head reading `ẑ`.
pub type Classifier<'a> = TwoLayer<'a>;
/// The reconstruction head mapping `ẑ` back to encoder-input space.
pub type Decoder<'a> = TwoLayer<'a>;

#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerCache {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

impl<'a> TwoLayer<'a> {
    fn from_store(store: &'a ParamStore, names: [&'static str; 4]) -> Result<Self> {
        let t = Self {
            w1: store.get(names[0])?,
            b1: store.get(names[1])?,
            w2: store.get(names[2])?,
            b2: store.get(names[3])?,
            names,
        };
        let h = t.w1.cols();
        if t.b1.shape() != (1, h) || t.w2.rows() != h || t.b2.shape() != (1, t.w2.cols()) {
            return Err(contract(format!("inconsistent shapes in {}", names[0])));
        }
        Ok(t)
    }

    pub fn classifier(store: &'a ParamStore) -> Result<Self> {
        Self::from_store(store, CLF_NAMES)
    }

    pub fn decoder(store: &'a ParamStore) -> Result<Self> {
        Self::from_store(store, DEC_NAMES)
    }

    pub fn in_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn forward(&self, x: &[f64]) -> TwoLayerCache {
        let mut pre = vec![0.0; self.w1.cols()];
        self.w1.transpose_mul_vec(x, &mut pre);
        for (p, b) in pre.iter_mut().zip(self.b1.as_slice()) {
            *p += b;
        }
        let hidden: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();
        let mut out = vec![0.0; self.w2.cols()];
        self.w2.transpose_mul_vec(&hidden, &mut out);
        for (o, b) in out.iter_mut().zip(self.b2.as_slice()) {
            *o += b;
        }
        TwoLayerCache { pre, hidden, out }
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    pub fn backward(
        &self,
        x: &[f64],
        cache: &TwoLayerCache,
        g_out: &[f64],
        grads: &mut Gradients,
    ) -> Vec<f64> {
        grads.get_mut(self.names[3]).add_outer(&[1.0], g_out);
        grads.get_mut(self.names[2]).add_outer(&cache.hidden, g_out);
        let mut g_h = vec![0.0; self.w2.rows()];
        self.w2.mul_vec(g_out, &mut g_h);
        for (g, &p) in g_h.iter_mut().zip(&cache.pre) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
        grads.get_mut(self.names[1]).add_outer(&[1.0], &g_h);
        grads.get_mut(self.names[0]).add_outer(x, &g_h);
        let mut g_x = vec![0.0; self.w1.rows()];
        self.w1.mul_vec(&g_h, &mut g_x);
        g_x
    }
}

/// Gradient buffers keyed by parameter name, shaped like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    bufs: BTreeMap<String, RealMatrix>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            bufs: store
                .values()
                .map(|(k, v)| (k.to_owned(), RealMatrix::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&RealMatrix> {
        self.bufs.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut RealMatrix {
        self.bufs
            .get_mut(name)
            .unwrap_or_else(|| panic!("no gradient buffer for {name:?}"))
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.bufs.values_mut() {
            g.as_mut_slice().iter_mut().for_each(|x| *x *= k);
        }
    }

    /// Adds every buffer into the store's gradients (creating them if absent).
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, g) in &self.bufs {
            let dst = store.grad_mut(name)?;
            for (d, s) in dst.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *d += s;
            }
        }
        Ok(())
    }
}

/// Everything produced by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub z: Vec<f64>,
    pub addressing: Option<AddressingResult>,
    pub zhat: Vec<f64>,
    pub logits: Vec<f64>,
    pub xhat: Vec<f64>,
    pub clf_cache: TwoLayerCache,
    pub dec_cache: TwoLayerCache,
}

impl ForwardOutput {
    pub fn prediction(&self) -> usize {
        argmax(&self.logits)
    }
}

/// The model definition; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    encoder: Encoder,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: Encoder::new(config.encoder)?,
            config,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Fresh parameters: uniform memory, fan-in-scaled uniform layers.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let c = &self.config;
        let d = c.embed_dim();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if c.use_memory {
            rng.set_stream(1);
            store.insert(MEM_ITEMS, memory::init_items(&c.memory, &mut rng))?;
        }
        rng.set_stream(2);
        insert_two_layer(&mut store, CLF_NAMES, d, c.hidden, c.n_classes, &mut rng)?;
        rng.set_stream(3);
        insert_two_layer(
            &mut store,
            DEC_NAMES,
            d,
            c.hidden,
            c.encoder.in_dim,
            &mut rng,
        )?;
        Ok(store)
    }

    pub fn view<'a>(&'a self, store: &'a ParamStore) -> Result<ModelView<'a>> {
        let bank = if self.config.use_memory {
            Some(BankView::new(self.config.memory, store.get(MEM_ITEMS)?)?)
        } else {
            None
        };
        let clf = TwoLayer::classifier(store)?;
        let dec = TwoLayer::decoder(store)?;
        if clf.in_dim() != self.config.embed_dim() || clf.out_dim() != self.config.n_classes {
            return Err(contract("classifier shape does not match model config"));
        }
        if dec.in_dim() != self.config.embed_dim() || dec.out_dim() != self.config.encoder.in_dim {
            return Err(contract("decoder shape does not match model config"));
        }
        Ok(ModelView {
            model: self,
            bank,
            clf,
            dec,
        })
    }

    /// Single-sample convenience around [`ModelView::forward`].
    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<ForwardOutput> {
        self.view(store)?.forward(x)
    }
}

fn insert_two_layer<R: Rng>(
    store: &mut ParamStore,
    names: [&str; 4],
    d_in: usize,
    hidden: usize,
    d_out: usize,
    rng: &mut R,
) -> Result<()> {
    let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
        let b = 1.0 / (fan_in as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-b..b)).collect();
        RealMatrix::from_vec(rows, cols, data)
    };
    store.insert(names[0], uniform(d_in, hidden, d_in)?)?;
    store.insert(names[1], uniform(1, hidden, d_in)?)?;
    store.insert(names[2], uniform(hidden, d_out, hidden)?)?;
    store.insert(names[3], uniform(1, d_out, hidden)?)?;
    Ok(())
}

/// A model bound to fixed parameters; cheap to evaluate repeatedly.
#[derive(Debug, Clone)]
pub struct ModelView<'a> {
    pub model: &'a Model,
    pub bank: Option<BankView<'a>>,
    pub clf: Classifier<'a>,
    pub dec: Decoder<'a>,
}

impl<'a> ModelView<'a> {
    pub fn embed(&self, x: &[f64]) -> Result<(Vec<f64>, Option<AddressingResult>, Vec<f64>)> {
        let z = self.model.encoder.encode(x)?;
        match &self.bank {
            Some(bank) => {
                let res = memory::address(&z, bank)?;
                let zhat = memory::retrieve(&res, bank);
                Ok((z, Some(res), zhat))
            }
            None => {
                let zhat = z.clone();
                Ok((z, None, zhat))
            }
        }
    }

    pub fn classify(&self, zhat: &[f64]) -> Vec<f64> {
        self.clf.forward(zhat).out
    }

    pub fn decode(&self, zhat: &[f64]) -> Vec<f64> {
        self.dec.forward(zhat).out
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardOutput> {
        let (z, addressing, zhat) = self.embed(x)?;
        let clf_cache = self.clf.forward(&zhat);
        let dec_cache = self.dec.forward(&zhat);
        Ok(ForwardOutput {
            logits: clf_cache.out.clone(),
            xhat: dec_cache.out.clone(),
            z,
            addressing,
            zhat,
            clf_cache,
            dec_cache,
        })
    }

    /// Backpropagates `∂L/∂logits`, `∂L/∂x̂` and any direct `∂L/∂ẑ` into
    /// `grads`. The encoder is frozen, so nothing flows past `z`.
    pub fn backward(
        &self,
        out: &ForwardOutput,
        g_logits: Option<&[f64]>,
        g_xhat: Option<&[f64]>,
        g_zhat_extra: Option<&[f64]>,
        grads: &mut Gradients,
    ) {
        let mut g_zhat = vec![0.0; out.zhat.len()];
        if let Some(g) = g_logits {
            let gz = self.clf.backward(&out.zhat, &out.clf_cache, g, grads);
            crate::numerics::axpy(1.0, &gz, &mut g_zhat);
        }
        if let Some(g) = g_xhat {
            let gz = self.dec.backward(&out.zhat, &out.dec_cache, g, grads);
            crate::numerics::axpy(1.0, &gz, &mut g_zhat);
        }
        if let Some(g) = g_zhat_extra {
            crate::numerics::axpy(1.0, g, &mut g_zhat);
        }
        if let (Some(bank), Some(res)) = (&self.bank, &out.addressing) {
            memory::backward_into(
                res,
                bank,
                &out.z,
                &g_zhat,
                grads.get_mut(MEM_ITEMS).as_mut_slice(),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(use_memory: bool) -> ModelConfig {
        ModelConfig {
            encoder: EncoderSpec::precomputed(3),
            memory: MemoryConfig {
                n_items: 4,
                n_subs: 2,
                dim: 3,
                top_k: 2,
                epsilon: 1e-12,
            },
            hidden: 5,
            n_classes: 2,
            use_memory,
        }
    }

    #[test]
    fn precomputed_encoder_is_identity() {
        let e = Encoder::new(EncoderSpec::precomputed(3)).unwrap();
        assert_eq!(e.encode(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        assert!(e.encode(&[1.0]).is_err());
    }

    #[test]
    fn random_projection_is_frozen_and_linear() {
        let spec = EncoderSpec {
            kind: EncoderKind::RandomProjection,
            in_dim: 6,
            out_dim: 3,
            seed: 11,
        };
        let a = Encoder::new(spec).unwrap();
        let b = Encoder::new(spec).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4, 0.0, 1.0];
        assert_eq!(a.encode(&x).unwrap(), b.encode(&x).unwrap());
        assert_eq!(a.encode(&[0.0; 6]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn encoder_has_no_trainable_parameters() {
        let m = Model::new(small_config(true)).unwrap();
        let store = m.init_params(0).unwrap();
        let mut names: Vec<&str> = store.names().collect();
        names.sort_unstable();
        let mut expected: Vec<&str> = CLF_NAMES.iter().chain(&DEC_NAMES).copied().collect();
        expected.push(MEM_ITEMS);
        expected.sort_unstable();
        assert_eq!(names, expected);
    }

    #[test]
    fn zero_classifier_predicts_class_zero() {
        let m = Model::new(small_config(false)).unwrap();
        let mut store = m.init_params(0).unwrap();
        for n in CLF_NAMES.iter().chain(&DEC_NAMES) {
            store.get_mut(n).unwrap().fill(0.0);
        }
        let out = m.forward(&store, &[0.4, 0.1, -0.9]).unwrap();
        assert_eq!(out.logits, vec![0.0, 0.0]);
        assert_eq!(out.prediction(), 0);
        assert_eq!(out.xhat, vec![0.0; 3]);
    }

    #[test]
    fn output_bias_shift_keeps_prediction() {
        let m = Model::new(small_config(true)).unwrap();
        let mut store = m.init_params(3).unwrap();
        let x = [0.5, -0.2, 0.7];
        let before = m.forward(&store, &x).unwrap();
        store
            .get_mut("clf.b2")
            .unwrap()
            .as_mut_slice()
            .iter_mut()
            .for_each(|b| *b += 4.0);
        let after = m.forward(&store, &x).unwrap();
        assert_eq!(before.prediction(), after.prediction());
        for (a, b) in before.logits.iter().zip(&after.logits) {
            assert!((b - a - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_built_separator() {
        // hidden = relu(±x0), logits = (h1, h0)
        let mut store = ParamStore::new();
        store
            .insert(
                "clf.w1",
                RealMatrix::from_rows(&[vec![1.0, -1.0], vec![0.0, 0.0]]).unwrap(),
            )
            .unwrap();
        store.insert("clf.b1", RealMatrix::zeros(1, 2)).unwrap();
        store
            .insert(
                "clf.w2",
                RealMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
            )
            .unwrap();
        store.insert("clf.b2", RealMatrix::zeros(1, 2)).unwrap();
        let clf = TwoLayer::classifier(&store).unwrap();
        assert_eq!(argmax(&clf.forward(&[-1.0, 0.3]).out), 0);
        assert_eq!(argmax(&clf.forward(&[2.0, -5.0]).out), 1);
    }

    #[test]
    fn single_sub_prototype_bank_retrieves_itself() {
        let mut cfg = small_config(true);
        cfg.memory.n_items = 1;
        cfg.memory.n_subs = 1;
        cfg.memory.top_k = 1;
        let m = Model::new(cfg).unwrap();
        let store = m.init_params(8).unwrap();
        let row = store.get(MEM_ITEMS).unwrap().row(0).to_vec();
        for x in [[1.0, 0.0, 0.0], [-0.3, 2.0, 0.1]] {
            assert_eq!(m.forward(&store, &x).unwrap().zhat, row);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Model::new(small_config(true)).unwrap();
        let store = m.init_params(21).unwrap();
        let x = [0.3, 0.3, -0.1];
        assert_eq!(
            m.forward(&store, &x).unwrap(),
            m.forward(&store, &x).unwrap()
        );
    }

    #[test]
    fn mismatched_memory_dim_rejected() {
        let mut cfg = small_config(true);
        cfg.memory.dim = 4;
        assert!(Model::new(cfg).is_err());
    }
}
