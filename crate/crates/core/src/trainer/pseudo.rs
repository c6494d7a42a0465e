//! Pseudo-labels for samples whose class label is hidden.

use serde::{Deserialize, Serialize};

use super::schedule::entropy;
use crate::error::{GdaError, Result};
use crate::nn::loss::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    EntropyInit,
    ArgmaxUpdate,
}

/// Label in `[0, K]`, where `K` is UNK.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub label: usize,
    pub provenance: Provenance,
}

/// Median with the even-length convention of averaging the middle pair.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Entropy-threshold initialisation for one batch. `known_probs` rows are
/// distributions over the `K` known classes; a row whose entropy strictly
/// exceeds the batch median becomes UNK (`K`), the rest take their argmax.
pub fn init_pseudo_labels(known_probs: &[Vec<f64>]) -> Result<Vec<PseudoLabel>> {
    if known_probs.len() < 2 {
        return Err(GdaError::invalid("entropy initialisation needs a batch of at least two"));
    }
    let k = known_probs[0].len();
    let h: Vec<f64> = known_probs.iter().map(|p| entropy(p)).collect::<Result<_>>()?;
    let sigma = median(&h);
    Ok(known_probs
        .iter()
        .zip(&h)
        .map(|(p, &hi)| PseudoLabel {
            label: if hi > sigma { k } else { argmax(p) },
            provenance: Provenance::EntropyInit,
        })
        .collect())
}

/// Refresh step: argmax over all `K + 1` outputs.
pub fn update_pseudo_label(all_probs: &[f64]) -> PseudoLabel {
    PseudoLabel {
        label: argmax(all_probs),
        provenance: Provenance::ArgmaxUpdate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(rows: &[Vec<f64>]) -> Vec<usize> {
        init_pseudo_labels(rows).unwrap().iter().map(|p| p.label).collect()
    }

    #[test]
    fn three_row_example() {
        let rows = vec![
            vec![0.97, 0.01, 0.01, 0.01],
            vec![0.4, 0.3, 0.2, 0.1],
            vec![0.25; 4],
        ];
        let h: Vec<f64> = rows.iter().map(|r| entropy(r).unwrap()).collect();
        assert!((h[0] - 0.1677).abs() < 1e-3);
        assert!((h[1] - 1.2799).abs() < 1e-3);
        assert!((h[2] - 1.3863).abs() < 1e-3);
        assert_eq!(labels(&rows), vec![0, 0, 4]);
    }

    #[test]
    fn identical_rows_keep_argmax() {
        let rows = vec![vec![0.2, 0.5, 0.3]; 5];
        assert_eq!(labels(&rows), vec![1; 5]);
    }

    #[test]
    fn one_hot_row_among_uniform() {
        let mut rows = vec![vec![1.0 / 3.0; 3]; 4];
        rows[2] = vec![0.0, 0.0, 1.0];
        let got = labels(&rows);
        assert_eq!(got[2], 2);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        assert!(init_pseudo_labels(&[vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn update_uses_all_outputs() {
        assert_eq!(update_pseudo_label(&[0.1, 0.1, 0.8]).label, 2);
        assert_eq!(update_pseudo_label(&[0.5, 0.5, 0.0]).label, 0);
    }

    proptest! {
        #[test]
        fn never_all_unknown(raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 2..40)) {
            let rows: Vec<Vec<f64>> = raw.iter().map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            }).collect();
            let unk = labels(&rows).iter().filter(|&&l| l == 3).count();
            prop_assert!(unk < rows.len());
        }
    }
}
