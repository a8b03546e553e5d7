//! Label-set splits, unknown-aware prediction and the OS* / UNK / H-score metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adaptation::PseudoLabeling;
use crate::data::SyntheticSpec;
use crate::error::{contract, Error, Result};
use crate::numerics::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "PDA")]
    Pda,
    #[serde(rename = "OSDA")]
    Osda,
    #[serde(rename = "UniDA")]
    UniDa,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pda" => Ok(Self::Pda),
            "osda" => Ok(Self::Osda),
            "unida" => Ok(Self::UniDa),
            _ => Err(contract(format!(
                "unknown scenario {s:?} (PDA, OSDA, UniDA)"
            ))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pda => "PDA",
            Self::Osda => "OSDA",
            Self::UniDa => "UniDA",
        })
    }
}

/// Benchmarks with a registered class split table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetName {
    Office31,
    OfficeHome,
    VisDa,
    DomainNet,
}

impl DatasetName {
    pub fn total_classes(self) -> usize {
        match self {
            Self::Office31 => 31,
            Self::OfficeHome => 65,
            Self::VisDa => 12,
            Self::DomainNet => 345,
        }
    }

    /// `(|C|, |Ĉs|, |Ĉt|)` for a scenario, if the benchmark defines one.
    pub fn split_counts(self, scenario: Scenario) -> Option<(usize, usize, usize)> {
        use Scenario::*;
        match (self, scenario) {
            (Self::Office31, Pda) => Some((10, 21, 0)),
            (Self::Office31, Osda) => Some((10, 0, 11)),
            (Self::Office31, UniDa) => Some((10, 10, 11)),
            (Self::OfficeHome, Pda) => Some((25, 40, 0)),
            (Self::OfficeHome, Osda) => Some((25, 0, 40)),
            (Self::OfficeHome, UniDa) => Some((10, 5, 50)),
            (Self::VisDa, Pda) => Some((6, 6, 0)),
            (Self::VisDa, Osda) => Some((6, 0, 6)),
            (Self::VisDa, UniDa) => Some((6, 3, 3)),
            (Self::DomainNet, UniDa) => Some((150, 50, 145)),
            (Self::DomainNet, _) => None,
        }
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "office31" => Ok(Self::Office31),
            "officehome" => Ok(Self::OfficeHome),
            "visda" | "visda2017" => Ok(Self::VisDa),
            "domainnet" => Ok(Self::DomainNet),
            _ => Err(contract(format!(
                "no registered class count for dataset {s:?}"
            ))),
        }
    }
}

/// Partition of class ids into common, source-private and target-private.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSplit {
    pub common: Vec<usize>,
    pub source_private: Vec<usize>,
    pub target_private: Vec<usize>,
}

impl LabelSplit {
    pub fn new(
        common: Vec<usize>,
        source_private: Vec<usize>,
        target_private: Vec<usize>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for &c in common.iter().chain(&source_private).chain(&target_private) {
            if !seen.insert(c) {
                return Err(contract(format!(
                    "class {c} appears in more than one label set"
                )));
            }
        }
        Ok(Self {
            common,
            source_private,
            target_private,
        })
    }

    /// `(|C|, |Ĉs|, |Ĉt|)`
    pub fn counts(&self) -> (usize, usize, usize) {
        (
            self.common.len(),
            self.source_private.len(),
            self.target_private.len(),
        )
    }

    pub fn source_classes(&self) -> BTreeSet<usize> {
        self.common
            .iter()
            .chain(&self.source_private)
            .copied()
            .collect()
    }

    pub fn target_classes(&self) -> BTreeSet<usize> {
        self.common
            .iter()
            .chain(&self.target_private)
            .copied()
            .collect()
    }

    pub fn is_partial(&self) -> bool {
        self.target_private.is_empty()
    }

    /// The split of the synthetic generator's class layout (common ids first,
    /// then source-private, then target-private).
    pub fn for_synthetic(spec: &SyntheticSpec, scenario: Scenario) -> Self {
        let c = spec.n_common;
        let sp = spec.n_src_private;
        let common = (0..c).collect();
        let src = if scenario == Scenario::Osda {
            vec![]
        } else {
            (c..c + sp).collect()
        };
        let tgt = if scenario == Scenario::Pda {
            vec![]
        } else {
            (c + sp..spec.n_classes()).collect()
        };
        Self {
            common,
            source_private: src,
            target_private: tgt,
        }
    }
}

/// Registered benchmark split: ascending class ids, common first.
pub fn make_split(scenario: Scenario, dataset: DatasetName) -> Result<LabelSplit> {
    let (c, s, t) = dataset
        .split_counts(scenario)
        .ok_or_else(|| contract(format!("{dataset:?} defines no {scenario} split")))?;
    if c + s + t > dataset.total_classes() {
        return Err(contract(format!(
            "split {c}/{s}/{t} exceeds {} classes",
            dataset.total_classes()
        )));
    }
    Ok(LabelSplit {
        common: (0..c).collect(),
        source_private: (c..c + s).collect(),
        target_private: (c + s..c + s + t).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Prediction {
    Class(usize),
    Unknown,
}

impl Prediction {
    /// `-1` for unknown.
    pub fn as_i64(self) -> i64 {
        match self {
            Self::Class(c) => c as i64,
            Self::Unknown => -1,
        }
    }
}

/// Samples in non-consensus clusters are unknown; the rest take the classifier's argmax.
pub fn predict_unknown_aware(logits: &[f64], pseudo: &PseudoLabeling, index: usize) -> Prediction {
    if pseudo.unknown_mask[index] {
        Prediction::Unknown
    } else {
        Prediction::Class(argmax(logits))
    }
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn h_score(os_star: f64, unk: f64) -> f64 {
    if os_star + unk == 0.0 {
        0.0
    } else {
        2.0 * os_star * unk / (os_star + unk)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub os_star: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_score: Option<f64>,
    pub per_class: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pda_accuracy: Option<f64>,
    /// Sample-weighted accuracy over every target sample (unknown counts as a class).
    pub overall_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_consensus_clusters: Option<usize>,
}

pub fn compute_metrics(
    predictions: &[Prediction],
    truth: &[i32],
    split: &LabelSplit,
) -> Result<Metrics> {
    if predictions.len() != truth.len() {
        return Err(contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    let common: BTreeSet<usize> = split.common.iter().copied().collect();
    let private: BTreeSet<usize> = split.target_private.iter().copied().collect();

    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let (mut unk_hit, mut unk_total, mut correct) = (0usize, 0usize, 0usize);
    for (&p, &t) in predictions.iter().zip(truth) {
        if t < 0 {
            return Err(contract("ground-truth label missing"));
        }
        let t = t as usize;
        if common.contains(&t) {
            let e = hits.entry(t).or_default();
            e.1 += 1;
            if p == Prediction::Class(t) {
                e.0 += 1;
                correct += 1;
            }
        } else if private.contains(&t) {
            unk_total += 1;
            if p == Prediction::Unknown {
                unk_hit += 1;
                correct += 1;
            }
        } else {
            return Err(contract(format!(
                "label {t} is outside the target label set"
            )));
        }
    }

    for c in &split.common {
        if !hits.contains_key(c) {
            log::warn!("common class {c} has no target samples; excluded from OS*");
        }
    }
    let per_class: BTreeMap<usize, f64> = hits
        .iter()
        .map(|(&c, &(h, n))| (c, h as f64 / n as f64))
        .collect();
    let os_star = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    let overall = if truth.is_empty() {
        0.0
    } else {
        correct as f64 / truth.len() as f64
    };

    let (unk, h, pda) = if split.is_partial() {
        (None, None, Some(overall))
    } else {
        let unk = if unk_total == 0 {
            log::warn!("no target-private samples present; UNK taken as 0");
            0.0
        } else {
            unk_hit as f64 / unk_total as f64
        };
        (Some(unk), Some(h_score(os_star, unk)), None)
    };

    Ok(Metrics {
        os_star,
        unk,
        h_score: h,
        per_class,
        pda_accuracy: pda,
        overall_accuracy: overall,
        n_consensus_clusters: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn table_splits() {
        assert_eq!(
            make_split(Scenario::UniDa, DatasetName::Office31)
                .unwrap()
                .counts(),
            (10, 10, 11)
        );
        assert_eq!(
            make_split(Scenario::Pda, DatasetName::VisDa)
                .unwrap()
                .counts(),
            (6, 6, 0)
        );
        assert_eq!(
            make_split(Scenario::Osda, DatasetName::OfficeHome)
                .unwrap()
                .counts(),
            (25, 0, 40)
        );
        assert!(make_split(Scenario::Pda, DatasetName::DomainNet).is_err());
        let s = make_split(Scenario::UniDa, DatasetName::Office31).unwrap();
        assert_eq!(s.common, (0..10).collect::<Vec<_>>());
        assert_eq!(s.source_private, (10..20).collect::<Vec<_>>());
        assert_eq!(s.target_private, (20..31).collect::<Vec<_>>());
    }

    #[test]
    fn names_parse() {
        assert_eq!(
            "Office-31".parse::<DatasetName>().unwrap(),
            DatasetName::Office31
        );
        assert_eq!(
            "OfficeHome".parse::<DatasetName>().unwrap(),
            DatasetName::OfficeHome
        );
        assert!("imagenet".parse::<DatasetName>().is_err());
        assert_eq!("unida".parse::<Scenario>().unwrap(), Scenario::UniDa);
    }

    #[test]
    fn overlapping_sets_rejected() {
        assert!(LabelSplit::new(vec![0, 1], vec![1], vec![]).is_err());
    }

    #[test]
    fn h_score_examples() {
        for k in 1..10 {
            let x = k as f64 / 10.0;
            assert!((h_score(x, x) - x).abs() < 1e-15);
        }
        assert!((h_score(0.6, 0.4) - 0.48).abs() < 1e-12);
        assert_eq!(h_score(0.7, 0.0), 0.0);
        assert_eq!(h_score(0.0, 0.0), 0.0);
    }

    fn pseudo(unknown: Vec<bool>) -> PseudoLabeling {
        PseudoLabeling {
            cluster_of: vec![0; unknown.len()],
            consensus: vec![],
            pseudo_label: unknown
                .iter()
                .map(|&u| if u { None } else { Some(0) })
                .collect(),
            unknown_mask: unknown,
        }
    }

    #[test]
    fn unknown_rule_takes_precedence() {
        let p = pseudo(vec![true, false]);
        assert_eq!(
            predict_unknown_aware(&[9.0, 0.0], &p, 0),
            Prediction::Unknown
        );
        assert_eq!(
            predict_unknown_aware(&[0.0, 9.0], &p, 1),
            Prediction::Class(1)
        );
    }

    #[test]
    fn metrics_on_hand_instance() {
        let split = LabelSplit::new(vec![0, 1], vec![], vec![2]).unwrap();
        use Prediction::*;
        let preds = [
            Class(0),
            Class(1),
            Class(1),
            Class(1),
            Unknown,
            Unknown,
            Class(0),
        ];
        let truth = [0, 0, 1, 1, 2, 2, 2];
        let m = compute_metrics(&preds, &truth, &split).unwrap();
        assert_eq!(m.per_class[&0], 0.5);
        assert_eq!(m.per_class[&1], 1.0);
        assert_eq!(m.os_star, 0.75);
        assert!((m.unk.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let h = 2.0 * 0.75 * (2.0 / 3.0) / (0.75 + 2.0 / 3.0);
        assert!((m.h_score.unwrap() - h).abs() < 1e-15);
        assert!((m.overall_accuracy - 5.0 / 7.0).abs() < 1e-15);
        assert!(m.pda_accuracy.is_none());
    }

    #[test]
    fn partial_split_reports_accuracy_not_h() {
        let split = LabelSplit::new(vec![0, 1], vec![2], vec![]).unwrap();
        use Prediction::*;
        let m = compute_metrics(&[Class(0), Unknown, Class(1)], &[0, 1, 1], &split).unwrap();
        assert!(m.h_score.is_none() && m.unk.is_none());
        assert!((m.pda_accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let json = serde_json::to_value(&m).unwrap();
        assert!(json.get("h_score").is_none());
        assert!(json.get("pda_accuracy").is_some());
    }

    #[test]
    fn label_outside_target_set_rejected() {
        let split = LabelSplit::new(vec![0], vec![1], vec![2]).unwrap();
        assert!(compute_metrics(&[Prediction::Unknown], &[1], &split).is_err());
    }

    proptest! {
        #[test]
        fn h_symmetric_and_below_mean(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let h = h_score(a, b);
            prop_assert_eq!(h, h_score(b, a));
            prop_assert!(h <= (a + b) / 2.0 + 1e-15);
            prop_assert_eq!(h == 0.0, a == 0.0 || b == 0.0);
        }

        #[test]
        fn metrics_permutation_invariant(
            rows in prop::collection::vec((0i32..4, 0i64..4), 1..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let split = LabelSplit::new(vec![0, 1], vec![], vec![2, 3]).unwrap();
            let to_pred = |p: i64| if p >= 2 { Prediction::Unknown } else { Prediction::Class(p as usize) };
            let preds: Vec<_> = rows.iter().map(|r| to_pred(r.1)).collect();
            let truth: Vec<_> = rows.iter().map(|r| r.0).collect();
            let a = compute_metrics(&preds, &truth, &split).unwrap();
            let mut idx: Vec<usize> = (0..rows.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let p2: Vec<_> = idx.iter().map(|&i| preds[i]).collect();
            let t2: Vec<_> = idx.iter().map(|&i| truth[i]).collect();
            let b = compute_metrics(&p2, &t2, &split).unwrap();
            prop_assert!((a.os_star - b.os_star).abs() < 1e-12);
            prop_assert_eq!(a.unk, b.unk);
        }
    }
}
