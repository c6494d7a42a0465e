//! Open-set metrics over `K` known classes plus UNK.

use serde::{Deserialize, Serialize};

use crate::error::{GdaError, Result};

/// `(K+1) x (K+1)` counts; rows are true labels, columns predictions, and
/// index `K` is UNK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_known: usize) -> Self {
        Self {
            counts: vec![vec![0; num_known + 1]; num_known + 1],
        }
    }

    pub fn from_pairs(num_known: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut cm = Self::new(num_known);
        for (t, p) in pairs {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if n < 2 || counts.iter().any(|r| r.len() != n) {
            return Err(GdaError::invalid("confusion matrix must be square with at least 2 rows"));
        }
        Ok(Self { counts })
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let n = self.counts.len();
        if truth >= n || predicted >= n {
            return Err(GdaError::invalid(format!(
                "label ({truth}, {predicted}) outside 0..{n}"
            )));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn num_known(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Per-row accuracy in percent, `None` for empty rows.
    fn row_accuracy(&self, row: usize) -> Option<f64> {
        let total: u64 = self.counts[row].iter().sum();
        (total > 0).then(|| 100.0 * self.counts[row][row] as f64 / total as f64)
    }

    fn mean_over(&self, rows: std::ops::Range<usize>, what: &str) -> Result<f64> {
        let accs: Vec<f64> = rows.filter_map(|r| self.row_accuracy(r)).collect();
        if accs.is_empty() {
            return Err(GdaError::invalid(format!("no {what} samples to evaluate")));
        }
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

/// Mean per-class accuracy over the known classes (empty rows skipped).
pub fn os_star(cm: &ConfusionMatrix) -> Result<f64> {
    cm.mean_over(0..cm.num_known(), "known-class")
}

/// Accuracy on the unknown row.
pub fn unk_acc(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.num_known();
    cm.mean_over(k..k + 1, "unknown-class")
}

/// Harmonic mean; 0 when both are 0.
pub fn hos(os_star: f64, unk: f64) -> f64 {
    if os_star + unk == 0.0 {
        0.0
    } else {
        2.0 * os_star * unk / (os_star + unk)
    }
}

/// Mean per-class accuracy over all `K + 1` rows (empty rows skipped).
pub fn os(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.num_known();
    if (0..k).all(|r| cm.row_accuracy(r).is_none()) {
        return Err(GdaError::invalid("no known-class samples to evaluate"));
    }
    cm.mean_over(0..k + 1, "")
}

/// Metrics that cannot be computed on the evaluated population are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub os_star: Option<f64>,
    pub unk: Option<f64>,
    pub hos: Option<f64>,
    pub os: Option<f64>,
    pub nmi_domain: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, nmi_domain: Option<f64>) -> Self {
        let s = os_star(cm).ok();
        let u = unk_acc(cm).ok();
        Self {
            os_star: s,
            unk: u,
            hos: s.zip(u).map(|(a, b)| hos(a, b)),
            os: os(cm).ok(),
            nmi_domain,
            confusion: cm.counts().to_vec(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Fraction of samples whose cluster maps to their true domain under the
/// best one-to-one cluster/domain assignment.
pub fn matched_agreement(clusters: &[usize], truth: &[usize]) -> Result<f64> {
    if clusters.len() != truth.len() || clusters.is_empty() {
        return Err(GdaError::invalid("label vectors must be non-empty and equally long"));
    }
    let rows = clusters.iter().max().expect("non-empty") + 1;
    let cols = truth.iter().max().expect("non-empty") + 1;
    let n = rows.max(cols);
    let mut table = vec![vec![0i64; n]; n];
    for (&c, &t) in clusters.iter().zip(truth) {
        table[c][t] += 1;
    }
    let assignment = max_weight_assignment(&table);
    let hits: i64 = assignment.iter().enumerate().map(|(r, &c)| table[r][c]).sum();
    Ok(hits as f64 / clusters.len() as f64)
}

/// Hungarian algorithm (potentials form) on a square matrix, maximising the
/// total weight. Returns the column assigned to each row.
pub fn max_weight_assignment(weights: &[Vec<i64>]) -> Vec<usize> {
    let n = weights.len();
    assert!(weights.iter().all(|r| r.len() == n), "matrix must be square");
    // Minimise the negated weights; 1-based arrays with a virtual column 0.
    let cost = |i: usize, j: usize| -weights[i - 1][j - 1];
    let (mut u, mut v) = (vec![0i64; n + 1], vec![0i64; n + 1]);
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[owner[j] - 1] = j - 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(k: usize, rows: &[(usize, usize, u64)]) -> ConfusionMatrix {
        let mut m = ConfusionMatrix::new(k);
        for &(t, p, n) in rows {
            for _ in 0..n {
                m.add(t, p).unwrap();
            }
        }
        m
    }

    #[test]
    fn os_star_examples() {
        let perfect = cm(2, &[(0, 0, 5), (1, 1, 5), (2, 2, 5)]);
        assert_eq!(os_star(&perfect).unwrap(), 100.0);
        let m = cm(2, &[(0, 0, 9), (0, 1, 1), (1, 1, 7), (1, 2, 3)]);
        assert!((os_star(&m).unwrap() - 80.0).abs() < 1e-12);
        let all_unk = cm(2, &[(0, 2, 4), (1, 2, 4)]);
        assert_eq!(os_star(&all_unk).unwrap(), 0.0);
        assert!(os_star(&cm(2, &[(2, 2, 1)])).is_err());
    }

    #[test]
    fn unk_examples() {
        assert_eq!(unk_acc(&cm(1, &[(1, 1, 4)])).unwrap(), 100.0);
        assert_eq!(unk_acc(&cm(1, &[(1, 1, 3), (1, 0, 1)])).unwrap(), 75.0);
        assert_eq!(unk_acc(&cm(1, &[(1, 0, 4)])).unwrap(), 0.0);
        assert!(unk_acc(&cm(1, &[(0, 0, 4)])).is_err());
    }

    #[test]
    fn hos_examples() {
        assert_eq!(hos(50.0, 0.0), 0.0);
        assert_eq!(hos(0.0, 0.0), 0.0);
        assert!((hos(80.0, 80.0) - 80.0).abs() < 1e-12);
    }

    #[test]
    fn os_examples() {
        assert_eq!(os(&cm(1, &[(0, 0, 3), (1, 1, 3)])).unwrap(), 100.0);
        assert_eq!(os(&cm(1, &[(0, 0, 3), (1, 0, 3)])).unwrap(), 50.0);
        let mut rows = Vec::new();
        for c in 0..11 {
            rows.push((c, c, 8));
            rows.push((c, (c + 1) % 11, 2));
        }
        assert!((os(&cm(10, &rows)).unwrap() - 80.0).abs() < 1e-9);
    }

    #[test]
    fn report_marks_missing_metrics() {
        let r = MetricsReport::from_confusion(&cm(2, &[(0, 0, 3), (1, 0, 1)]), None);
        assert_eq!(r.os_star, Some(50.0));
        assert_eq!(r.unk, None);
        assert_eq!(r.hos, None);
        let json = r.to_json().unwrap();
        assert!(json.contains("\"unk\": null"));
    }

    #[test]
    fn assignment_recovers_permutation() {
        let clusters = [2, 2, 0, 0, 1, 1, 1];
        let truth = [0, 0, 1, 1, 2, 2, 0];
        assert!((matched_agreement(&clusters, &truth).unwrap() - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(matched_agreement(&[0, 1, 2], &[0, 0, 0]).unwrap(), 1.0 / 3.0);
        assert_eq!(max_weight_assignment(&[vec![1, 9], vec![8, 2]]), vec![1, 0]);
    }

    fn brute_force(w: &[Vec<i64>]) -> i64 {
        fn go(w: &[Vec<i64>], row: usize, used: &mut Vec<bool>) -> i64 {
            if row == w.len() {
                return 0;
            }
            let mut best = i64::MIN;
            for c in 0..w.len() {
                if !used[c] {
                    used[c] = true;
                    best = best.max(w[row][c] + go(w, row + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        go(w, 0, &mut vec![false; w.len()])
    }

    proptest! {
        #[test]
        fn hos_bounds(a in 0.0f64..100.0, b in 0.0f64..100.0) {
            let h = hos(a, b);
            prop_assert!(h <= (a + b) / 2.0 + 1e-9);
            prop_assert!((h - hos(b, a)).abs() < 1e-12);
        }

        #[test]
        fn os_identity_and_permutation_invariance(
            raw in prop::collection::vec(prop::collection::vec(0u64..6, 4), 4),
            perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
        ) {
            let mut counts = raw.clone();
            for (i, row) in counts.iter_mut().enumerate() {
                row[i] += 1;
            }
            let m = ConfusionMatrix::from_counts(counts.clone()).unwrap();
            let (s, u, o) = (os_star(&m).unwrap(), unk_acc(&m).unwrap(), os(&m).unwrap());
            prop_assert!((o - (3.0 * s + u) / 4.0).abs() < 1e-9);
            let idx = |i: usize| if i < 3 { perm[i] } else { 3 };
            let mut permuted = vec![vec![0u64; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    permuted[idx(i)][idx(j)] = counts[i][j];
                }
            }
            let p = ConfusionMatrix::from_counts(permuted).unwrap();
            prop_assert!((os_star(&p).unwrap() - s).abs() < 1e-9);
            prop_assert!((unk_acc(&p).unwrap() - u).abs() < 1e-9);
            prop_assert!((os(&p).unwrap() - o).abs() < 1e-9);
        }

        #[test]
        fn assignment_is_optimal(w in prop::collection::vec(prop::collection::vec(-20i64..50, 5), 5)) {
            let a = max_weight_assignment(&w);
            let mut seen = a.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, vec![0, 1, 2, 3, 4]);
            let total: i64 = a.iter().enumerate().map(|(r, &c)| w[r][c]).sum();
            prop_assert_eq!(total, brute_force(&w));
        }
    }
}
