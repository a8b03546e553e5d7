//! Embedding datasets: the MSPM binary format, CSV import, label-set
//! filtering and the synthetic generator with planted sub-clusters.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::evaluation::LabelSplit;
use crate::numerics::{norm, squared_distance, RealMatrix};

pub const UNLABELED: i32 = -1;

const MAGIC: &[u8; 4] = b"MSPM";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub vectors: RealMatrix,
    /// Public labels; [`UNLABELED`] where unknown to the learner.
    pub labels: Vec<i32>,
    pub domain: Domain,
    pub subcluster_ids: Option<Vec<i32>>,
    /// Ground truth withheld from training (target role after [`apply_split`]).
    pub hidden_labels: Option<Vec<i32>>,
}

impl EmbeddingDataset {
    pub fn new(
        vectors: RealMatrix,
        labels: Vec<i32>,
        domain: Domain,
        subcluster_ids: Option<Vec<i32>>,
    ) -> Result<Self> {
        let ds = Self {
            vectors,
            labels,
            domain,
            subcluster_ids,
            hidden_labels: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vectors.rows();
        if self.labels.len() != n {
            return Err(contract(format!(
                "{} labels for {n} vectors",
                self.labels.len()
            )));
        }
        if let Some(s) = &self.subcluster_ids {
            if s.len() != n {
                return Err(contract(format!(
                    "{} subcluster ids for {n} vectors",
                    s.len()
                )));
            }
        }
        if let Some(h) = &self.hidden_labels {
            if h.len() != n {
                return Err(contract(format!(
                    "{} hidden labels for {n} vectors",
                    h.len()
                )));
            }
        }
        if self.domain == Domain::Source && self.labels.iter().any(|&l| l < 0) {
            return Err(contract("source dataset has unlabeled samples"));
        }
        if !self.vectors.is_finite() {
            return Err(contract("dataset contains non-finite values"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Ground truth: hidden labels when present, else the public labels.
    pub fn ground_truth(&self) -> &[i32] {
        self.hidden_labels.as_deref().unwrap_or(&self.labels)
    }

    pub fn classes(&self) -> BTreeSet<i32> {
        self.ground_truth()
            .iter()
            .copied()
            .filter(|&l| l >= 0)
            .collect()
    }

    fn subset(&self, keep: &[usize]) -> Self {
        let pick = |v: &[i32]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            vectors: self.vectors.select_rows(keep),
            labels: pick(&self.labels),
            domain: self.domain,
            subcluster_ids: self.subcluster_ids.as_deref().map(pick),
            hidden_labels: self.hidden_labels.as_deref().map(pick),
        }
    }
}

// ---------------------------------------------------------------------------
// binary format

/// Serializes to the MSPM layout: 32-byte header, `n·d` f32 vectors,
/// `n` i32 labels, then `n` i32 subcluster ids if flagged. Little-endian.
pub fn encode_dataset(ds: &EmbeddingDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let (n, d) = ds.vectors.shape();
    let to_u32 =
        |x: usize| u32::try_from(x).map_err(|_| contract(format!("dimension {x} exceeds u32")));
    let has_sub = ds.subcluster_ids.is_some();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * (d + 2));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(n)?.to_le_bytes());
    out.extend_from_slice(&to_u32(d)?.to_le_bytes());
    out.push(match ds.domain {
        Domain::Source => 0,
        Domain::Target => 1,
    });
    out.push(u8::from(has_sub));
    out.resize(HEADER_LEN, 0);
    for &x in ds.vectors.as_slice() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    if let Some(s) = &ds.subcluster_ids {
        for &id in s {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn i32s(&mut self, n: usize, what: &str) -> Result<Vec<i32>> {
        Ok(self
            .take(4 * n, what)?
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<EmbeddingDataset> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected \"MSPM\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let n = r.u32("sample count")? as usize;
    let d = r.u32("dimension")? as usize;
    let flags = r.take(2, "flags")?;
    let domain = match flags[0] {
        0 => Domain::Source,
        1 => Domain::Target,
        x => {
            return Err(Error::Format {
                offset: 16,
                msg: format!("bad domain tag {x}"),
            })
        }
    };
    let has_sub = match flags[1] {
        0 => false,
        1 => true,
        x => {
            return Err(Error::Format {
                offset: 17,
                msg: format!("bad subcluster flag {x}"),
            })
        }
    };
    r.take(HEADER_LEN - 18, "header padding")?;

    let count = n.checked_mul(d).ok_or_else(|| Error::Format {
        offset: 8,
        msg: "n·d overflows".into(),
    })?;
    let vec_offset = r.pos;
    let raw = r.take(4 * count, "vectors")?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    if let Some(k) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::Format {
            offset: vec_offset + 4 * k,
            msg: "non-finite vector entry".into(),
        });
    }
    let labels = r.i32s(n, "labels")?;
    let subcluster_ids = if has_sub {
        Some(r.i32s(n, "subcluster ids")?)
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos,
            msg: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    let ds = EmbeddingDataset {
        vectors: RealMatrix::from_vec(n, d, data)?,
        labels,
        domain,
        subcluster_ids,
        hidden_labels: None,
    };
    ds.validate().map_err(|e| Error::Format {
        offset: HEADER_LEN + 4 * count,
        msg: e.to_string(),
    })?;
    Ok(ds)
}

pub fn write_dataset(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    decode_dataset(&fs::read(path)?)
}

/// Imports a CSV with header `label[,subcluster],f0,…,f{d−1}`.
pub fn read_csv(path: impl AsRef<Path>, domain: Domain) -> Result<EmbeddingDataset> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.get(0) != Some("label") {
        return Err(Error::Format {
            offset: 0,
            msg: "first CSV column must be `label`".into(),
        });
    }
    let has_sub = headers.get(1) == Some("subcluster");
    let first_feature = if has_sub { 2 } else { 1 };
    let d = headers.len() - first_feature;
    for (k, h) in headers.iter().skip(first_feature).enumerate() {
        if h != format!("f{k}") {
            return Err(Error::Format {
                offset: 0,
                msg: format!("expected column f{k}, found {h:?}"),
            });
        }
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut subs = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let offset = rec.position().map_or(0, |p| p.byte() as usize);
        let bad = |msg: String| Error::Format { offset, msg };
        if rec.len() != headers.len() {
            return Err(bad(format!(
                "row has {} fields, expected {}",
                rec.len(),
                headers.len()
            )));
        }
        labels.push(
            rec[0]
                .trim()
                .parse::<i32>()
                .map_err(|e| bad(format!("label: {e}")))?,
        );
        if has_sub {
            subs.push(
                rec[1]
                    .trim()
                    .parse::<i32>()
                    .map_err(|e| bad(format!("subcluster: {e}")))?,
            );
        }
        for f in rec.iter().skip(first_feature) {
            data.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("feature: {e}")))?,
            );
        }
    }
    let n = labels.len();
    EmbeddingDataset::new(
        RealMatrix::from_vec(n, d, data)?,
        labels,
        domain,
        has_sub.then_some(subs),
    )
}

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte() as usize);
    Error::Format {
        offset,
        msg: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// label-set filtering

/// Filters a dataset to the classes its domain sees under `split`. For the
/// target role, labels move to the hidden channel and public labels become −1.
pub fn apply_split(
    ds: &EmbeddingDataset,
    split: &LabelSplit,
    role: Domain,
) -> Result<EmbeddingDataset> {
    let allowed: BTreeSet<usize> = match role {
        Domain::Source => split.source_classes(),
        Domain::Target => split.target_classes(),
    };
    let truth = ds.ground_truth();
    let keep: Vec<usize> = (0..ds.len())
        .filter(|&i| truth[i] >= 0 && allowed.contains(&(truth[i] as usize)))
        .collect();
    if keep.is_empty() {
        return Err(contract(format!(
            "no samples of classes {allowed:?} in the {role:?} dataset"
        )));
    }
    let mut out = ds.subset(&keep);
    out.domain = role;
    if role == Domain::Target {
        let gt = out.ground_truth().to_vec();
        out.hidden_labels = Some(gt);
        out.labels = vec![UNLABELED; out.len()];
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// synthetic generator

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_common: usize,
    pub n_src_private: usize,
    pub n_tgt_private: usize,
    pub subclusters_per_class: usize,
    pub dim: usize,
    pub samples_per_subcluster: usize,
    pub shift_scale: f64,
    pub noise_sigma: f64,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_common: 6,
            n_src_private: 2,
            n_tgt_private: 3,
            subclusters_per_class: 3,
            dim: 16,
            samples_per_subcluster: 50,
            shift_scale: 1.0,
            noise_sigma: 0.15,
            separation: 4.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_common == 0
            || self.subclusters_per_class == 0
            || self.dim == 0
            || self.samples_per_subcluster == 0
        {
            return Err(contract("synthetic counts must be at least 1"));
        }
        if !(self.noise_sigma > 0.0) || !(self.separation > 0.0) || !(self.shift_scale >= 0.0) {
            return Err(contract(
                "noise_sigma and separation must be positive, shift_scale nonnegative",
            ));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_common + self.n_src_private + self.n_tgt_private
    }

    /// Class ids present in the source domain: common, then source-private.
    pub fn source_classes(&self) -> std::ops::Range<usize> {
        0..self.n_common + self.n_src_private
    }

    /// Class ids present in the target domain: common and target-private.
    pub fn target_classes(&self) -> impl Iterator<Item = usize> {
        (0..self.n_common).chain(self.n_common + self.n_src_private..self.n_classes())
    }
}

/// Self-check of the generated geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorStats {
    pub n_subclusters: usize,
    /// Smallest pairwise distance between any two source sub-cluster means.
    pub min_mean_distance: f64,
    /// `2·σ·√dim`, the noise-ball diameter the means must clear.
    pub required_distance: f64,
    pub passed: bool,
    pub has_substructure: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub source: EmbeddingDataset,
    pub target: EmbeddingDataset,
    /// Sub-cluster means, indexed by subcluster id (`class·G + g`).
    pub means: RealMatrix,
    pub shift: Vec<f64>,
    pub stats: GeneratorStats,
}

fn sphere_point<R: Rng>(dim: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x * radius / n).collect();
        }
    }
}

/// Draws `G` mutually repelled means on the sphere: greedy farthest-point
/// selection among `10·G` random candidates.
fn repelled_means<R: Rng>(g: usize, dim: usize, radius: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let candidates: Vec<Vec<f64>> = (0..10 * g)
        .map(|_| sphere_point(dim, radius, rng))
        .collect();
    let mut chosen = vec![0usize];
    let mut min_d: Vec<f64> = candidates
        .iter()
        .map(|c| squared_distance(c, &candidates[0]))
        .collect();
    while chosen.len() < g {
        let next = crate::numerics::argmax(&min_d);
        chosen.push(next);
        for (m, c) in min_d.iter_mut().zip(&candidates) {
            *m = m.min(squared_distance(c, &candidates[next]));
        }
    }
    chosen.into_iter().map(|i| candidates[i].clone()).collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let g = spec.subclusters_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut means = RealMatrix::zeros(spec.n_classes() * g, spec.dim);
    for c in 0..spec.n_classes() {
        for (k, m) in repelled_means(g, spec.dim, spec.separation, &mut rng)
            .into_iter()
            .enumerate()
        {
            means.row_mut(c * g + k).copy_from_slice(&m);
        }
    }
    let shift: Vec<f64> = if spec.shift_scale > 0.0 {
        sphere_point(spec.dim, spec.shift_scale, &mut rng)
    } else {
        vec![0.0; spec.dim]
    };

    let mut draw = |classes: &mut dyn Iterator<Item = usize>, offset: &[f64], domain, stream| {
        rng.set_stream(stream);
        rng.set_word_pos(0);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut subs = Vec::new();
        for c in classes {
            for k in 0..g {
                let id = c * g + k;
                let mean = means.row(id);
                for _ in 0..spec.samples_per_subcluster {
                    for (m, o) in mean.iter().zip(offset) {
                        let e: f64 = rng.sample(StandardNormal);
                        data.push(m + o + spec.noise_sigma * e);
                    }
                    labels.push(c as i32);
                    subs.push(id as i32);
                }
            }
        }
        let n = labels.len();
        EmbeddingDataset::new(
            RealMatrix::from_vec(n, spec.dim, data)?,
            labels,
            domain,
            Some(subs),
        )
    };
    let zero = vec![0.0; spec.dim];
    let source = draw(&mut spec.source_classes(), &zero, Domain::Source, 1)?;
    let target = draw(&mut spec.target_classes(), &shift, Domain::Target, 2)?;

    let mut min_d = f64::INFINITY;
    for a in 0..means.rows() {
        for b in a + 1..means.rows() {
            min_d = min_d.min(squared_distance(means.row(a), means.row(b)).sqrt());
        }
    }
    let required = 2.0 * spec.noise_sigma * (spec.dim as f64).sqrt();
    let stats = GeneratorStats {
        n_subclusters: means.rows(),
        min_mean_distance: min_d,
        required_distance: required,
        passed: min_d >= required,
        has_substructure: g > 1,
    };
    if !stats.passed {
        log::warn!("sub-cluster means closer than the noise diameter: {min_d:.4} < {required:.4}");
    }
    Ok(SyntheticData {
        source,
        target,
        means,
        shift,
        stats,
    })
}
