//! Label-set algebra over a dataset and the constraint table that names the
//! adaptation setting a dataset instance realizes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{GdaDataset, Sample};
use crate::error::{GdaError, Result};

pub type ClassSet = BTreeSet<u32>;

/// Per-domain class sets: all classes present, labeled ones, unlabeled ones.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DomainSets {
    pub classes: ClassSet,
    pub labeled: ClassSet,
    pub unlabeled: ClassSet,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LabelSets {
    pub all_classes: ClassSet,
    pub known_classes: ClassSet,
    pub per_domain: BTreeMap<u32, DomainSets>,
}

impl LabelSets {
    pub fn num_known(&self) -> usize {
        self.known_classes.len()
    }

    /// Known classes in ascending order; position = output index.
    pub fn known_list(&self) -> Vec<u32> {
        self.known_classes.iter().copied().collect()
    }
}

pub fn compute_label_sets(dataset: &GdaDataset) -> Result<LabelSets> {
    if dataset.is_empty() {
        return Err(GdaError::EmptyDataset);
    }
    let mut sets = LabelSets::default();
    for s in dataset.iter() {
        let dom = sets.per_domain.entry(s.domain_label).or_default();
        dom.classes.insert(s.class_label);
        if s.class_visible {
            dom.labeled.insert(s.class_label);
            sets.known_classes.insert(s.class_label);
        } else {
            dom.unlabeled.insert(s.class_label);
        }
        sets.all_classes.insert(s.class_label);
    }
    Ok(sets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScenarioName {
    #[serde(rename = "UDA")]
    Uda,
    #[serde(rename = "MSDA")]
    Msda,
    #[serde(rename = "OSDA")]
    Osda,
    #[serde(rename = "MS-OSDA")]
    MsOsda,
    #[serde(rename = "BTDA")]
    Btda,
    #[serde(rename = "GDA1")]
    Gda1,
    #[serde(rename = "GDA2")]
    Gda2,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 7] = [
        ScenarioName::Uda,
        ScenarioName::Msda,
        ScenarioName::Osda,
        ScenarioName::MsOsda,
        ScenarioName::Btda,
        ScenarioName::Gda1,
        ScenarioName::Gda2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Uda => "UDA",
            ScenarioName::Msda => "MSDA",
            ScenarioName::Osda => "OSDA",
            ScenarioName::MsOsda => "MS-OSDA",
            ScenarioName::Btda => "BTDA",
            ScenarioName::Gda1 => "GDA1",
            ScenarioName::Gda2 => "GDA2",
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = GdaError;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioName::ALL
            .into_iter()
            .find(|n| n.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| GdaError::invalid(format!("unknown scenario name `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Visibility {
    Visible,
    Hidden,
}

/// Domain-label visibility per domain; `None` when some domain mixes flags.
fn domain_visibility(dataset: &GdaDataset) -> Option<BTreeMap<u32, Visibility>> {
    let mut out = BTreeMap::new();
    for s in dataset.iter() {
        let v = if s.domain_visible {
            Visibility::Visible
        } else {
            Visibility::Hidden
        };
        if *out.entry(s.domain_label).or_insert(v) != v {
            return None;
        }
    }
    Some(out)
}

fn is_target(d: &DomainSets) -> bool {
    d.labeled.is_empty() && d.unlabeled == d.classes
}

fn is_source(d: &DomainSets, known: &ClassSet) -> bool {
    d.labeled == d.classes && &d.labeled == known && d.unlabeled.is_empty()
}

fn strict_subset(a: &ClassSet, b: &ClassSet) -> bool {
    a.is_subset(b) && a != b
}

/// The unique domain satisfying `pred`, if exactly one does.
fn unique(
    doms: &BTreeMap<u32, DomainSets>,
    pred: impl Fn(&DomainSets) -> bool,
) -> Option<(u32, &DomainSets)> {
    let mut hits = doms.iter().filter(|(_, d)| pred(d));
    let first = hits.next()?;
    hits.next().is_none().then_some((*first.0, first.1))
}

fn two_domain_row(sets: &LabelSets, openness: impl Fn(&ClassSet, &ClassSet) -> bool) -> bool {
    if sets.per_domain.len() != 2 {
        return false;
    }
    let d: Vec<&DomainSets> = sets.per_domain.values().collect();
    [(d[0], d[1]), (d[1], d[0])].iter().any(|(src, tgt)| {
        tgt.classes == sets.all_classes
            && openness(&src.classes, &tgt.classes)
            && is_target(tgt)
            && is_source(src, &sets.known_classes)
    })
}

/// Every setting whose full constraint row holds for `dataset`.
pub fn classify_scenario(dataset: &GdaDataset) -> Result<BTreeSet<ScenarioName>> {
    let sets = compute_label_sets(dataset)?;
    let mut out = BTreeSet::new();
    let Some(vis) = domain_visibility(dataset) else {
        return Ok(out);
    };
    let doms = &sets.per_domain;
    if doms.len() < 2 {
        return Ok(out);
    }
    let all_visible = vis.values().all(|v| *v == Visibility::Visible);
    let all_hidden = vis.values().all(|v| *v == Visibility::Hidden);
    let all_full = doms.values().all(|d| d.classes == sets.all_classes);
    let known = &sets.known_classes;

    if all_visible {
        if two_domain_row(&sets, |s, t| s == t) {
            out.insert(ScenarioName::Uda);
        }
        if two_domain_row(&sets, strict_subset) {
            out.insert(ScenarioName::Osda);
        }
        if all_full {
            if let Some((j, _)) = unique(doms, is_target) {
                if doms.iter().all(|(i, d)| *i == j || is_source(d, known)) {
                    out.insert(ScenarioName::Msda);
                }
            }
        }
        if let Some((j, dj)) = unique(doms, |d| d.classes == sets.all_classes) {
            let target_j = unique(doms, is_target).map(|(t, _)| t);
            if target_j == Some(j)
                && doms
                    .iter()
                    .all(|(i, d)| *i == j || (strict_subset(&d.classes, &dj.classes) && is_source(d, known)))
            {
                out.insert(ScenarioName::MsOsda);
            }
        }
    }

    if all_full {
        if let Some((j, _)) = unique(doms, |d| is_source(d, known)) {
            let others_ok = doms.iter().all(|(i, d)| *i == j || is_target(d));
            let vis_ok = vis.iter().all(|(i, v)| {
                (*i == j) == (*v == Visibility::Visible)
            });
            if others_ok && vis_ok {
                out.insert(ScenarioName::Btda);
            }
        }
    }

    if all_hidden {
        let labeled: Vec<&ClassSet> = doms.values().map(|d| &d.labeled).collect();
        let inconsistent = labeled.iter().any(|l| *l != labeled[0]);
        if inconsistent {
            if doms.values().all(|d| d.labeled.is_disjoint(&d.unlabeled)) {
                out.insert(ScenarioName::Gda1);
            }
            if doms.values().all(|d| d.labeled.is_subset(&d.unlabeled)) {
                out.insert(ScenarioName::Gda2);
            }
        }
    }
    Ok(out)
}

/// Ground-truth evaluation target of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Target {
    Known(u32),
    Unknown,
}

pub fn oracle_target(sample: &Sample, known: &ClassSet) -> Target {
    if known.contains(&sample.class_label) {
        Target::Known(sample.class_label)
    } else {
        Target::Unknown
    }
}

/// Row/column index of `target` in a `(K+1)`-wide confusion matrix, where
/// known classes are ordered ascending and `K` is UNK.
pub fn target_index(target: Target, known: &ClassSet) -> usize {
    match target {
        Target::Known(c) => known
            .iter()
            .position(|&k| k == c)
            .expect("known target must be in the known set"),
        Target::Unknown => known.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use proptest::prelude::*;

    fn s(y: u32, d: u32, vy: bool, vd: bool) -> Sample {
        Sample {
            image: Image::filled(1, 1, 1, 0.0).unwrap(),
            class_label: y,
            domain_label: d,
            class_visible: vy,
            domain_visible: vd,
        }
    }

    fn set(v: &[u32]) -> ClassSet {
        v.iter().copied().collect()
    }

    #[test]
    fn label_sets_follow_set_definitions() {
        let ds = GdaDataset::new(vec![
            s(0, 0, true, true),
            s(1, 0, false, true),
            s(1, 1, true, true),
            s(2, 1, false, true),
        ]);
        let ls = compute_label_sets(&ds).unwrap();
        assert_eq!(ls.all_classes, set(&[0, 1, 2]));
        assert_eq!(ls.known_classes, set(&[0, 1]));
        assert_eq!(ls.per_domain[&0].classes, set(&[0, 1]));
        assert_eq!(ls.per_domain[&0].labeled, set(&[0]));
        assert_eq!(ls.per_domain[&0].unlabeled, set(&[1]));
        assert_eq!(ls.per_domain[&1].labeled, set(&[1]));
        assert_eq!(ls.per_domain[&1].unlabeled, set(&[2]));
    }

    #[test]
    fn fully_labeled_single_domain() {
        let ds = GdaDataset::new(vec![s(0, 0, true, true), s(1, 0, true, true)]);
        let ls = compute_label_sets(&ds).unwrap();
        assert_eq!(ls.known_classes, ls.all_classes);
        assert_eq!(ls.per_domain[&0].classes, ls.all_classes);
        assert!(ls.per_domain[&0].unlabeled.is_empty());
        assert!(classify_scenario(&ds).unwrap().is_empty());
    }

    #[test]
    fn overlap_within_domain() {
        let ds = GdaDataset::new(vec![s(0, 0, true, false), s(0, 0, false, false)]);
        let ls = compute_label_sets(&ds).unwrap();
        assert!(ls.per_domain[&0].labeled.contains(&0));
        assert!(ls.per_domain[&0].unlabeled.contains(&0));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(
            compute_label_sets(&GdaDataset::default()),
            Err(GdaError::EmptyDataset)
        ));
        assert!(classify_scenario(&GdaDataset::default()).is_err());
    }

    #[test]
    fn uda_row() {
        let ds = GdaDataset::new(vec![
            s(0, 0, true, true),
            s(1, 0, true, true),
            s(0, 1, false, true),
            s(1, 1, false, true),
        ]);
        assert!(classify_scenario(&ds).unwrap().contains(&ScenarioName::Uda));
    }

    #[test]
    fn gda1_not_gda2() {
        let ds = GdaDataset::new(vec![
            s(0, 0, true, false),
            s(3, 0, false, false),
            s(1, 1, true, false),
            s(3, 1, false, false),
            s(2, 2, true, false),
            s(0, 2, false, false),
        ]);
        let got = classify_scenario(&ds).unwrap();
        assert!(got.contains(&ScenarioName::Gda1));
        assert!(!got.contains(&ScenarioName::Gda2));
    }

    #[test]
    fn mixed_domain_visibility_matches_nothing() {
        let ds = GdaDataset::new(vec![
            s(0, 0, true, true),
            s(0, 0, true, false),
            s(0, 1, false, false),
        ]);
        assert!(classify_scenario(&ds).unwrap().is_empty());
    }

    #[test]
    fn oracle_targets() {
        let known = set(&[0, 1, 2, 3, 4]);
        assert_eq!(oracle_target(&s(3, 0, true, true), &known), Target::Known(3));
        assert_eq!(oracle_target(&s(9, 0, true, true), &known), Target::Unknown);
        assert_eq!(oracle_target(&s(0, 0, true, true), &ClassSet::new()), Target::Unknown);
        assert_eq!(target_index(Target::Known(3), &known), 3);
        assert_eq!(target_index(Target::Unknown, &known), 5);
    }

    #[test]
    fn scenario_names_parse() {
        for n in ScenarioName::ALL {
            assert_eq!(n.as_str().parse::<ScenarioName>().unwrap(), n);
        }
    }

    fn arb_dataset() -> impl Strategy<Value = Vec<(u32, u32, bool, bool)>> {
        prop::collection::vec((0u32..5, 0u32..3, any::<bool>(), any::<bool>()), 1..40)
    }

    proptest! {
        #[test]
        fn unions_reconstruct_global_sets(rows in arb_dataset()) {
            let ds = GdaDataset::new(rows.iter().map(|&(y, d, vy, vd)| s(y, d, vy, vd)).collect());
            let ls = compute_label_sets(&ds).unwrap();
            let l: ClassSet = ls.per_domain.values().flat_map(|d| d.labeled.iter().copied()).collect();
            let c: ClassSet = ls.per_domain.values().flat_map(|d| d.classes.iter().copied()).collect();
            prop_assert_eq!(l, ls.known_classes.clone());
            prop_assert_eq!(c, ls.all_classes.clone());
            prop_assert!(ls.known_classes.is_subset(&ls.all_classes));
            for d in ls.per_domain.values() {
                let u: ClassSet = d.labeled.union(&d.unlabeled).copied().collect();
                prop_assert_eq!(&u, &d.classes);
            }
        }

        #[test]
        fn classification_ignores_sample_order(rows in arb_dataset(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let ds = GdaDataset::new(rows.iter().map(|&(y, d, vy, vd)| s(y, d, vy, vd)).collect());
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let ds2 = GdaDataset::new(shuffled.iter().map(|&(y, d, vy, vd)| s(y, d, vy, vd)).collect());
            prop_assert_eq!(classify_scenario(&ds).unwrap(), classify_scenario(&ds2).unwrap());
        }

        #[test]
        fn gda1_and_gda2_are_exclusive(rows in arb_dataset()) {
            let ds = GdaDataset::new(rows.iter().map(|&(y, d, vy, _)| s(y, d, vy, false)).collect());
            let got = classify_scenario(&ds).unwrap();
            prop_assert!(!(got.contains(&ScenarioName::Gda1) && got.contains(&ScenarioName::Gda2)));
        }
    }
}
