//! Evaluation metrics for placements and orderings.
//!
//! Slot-level metrics (direct comparison, accuracy) pool elements over the
//! whole test set. Rank correlations are computed per instance and averaged
//! uniformly over instances. For puzzles the raster index of a cell serves as
//! its rank, so every metric is defined for both tasks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Predicted and true slot of every element of one instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placement {
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
}

impl Placement {
    pub fn new(predicted: Vec<usize>, truth: Vec<usize>) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::ShapeMismatch {
                expected: truth.len().to_string(),
                got: predicted.len().to_string(),
            });
        }
        Ok(Self { predicted, truth })
    }

    pub fn correct(&self) -> usize {
        self.predicted.iter().zip(&self.truth).filter(|(a, b)| a == b).count()
    }

    pub fn is_perfect(&self) -> bool {
        self.predicted == self.truth
    }
}

fn nonempty(items: &[Placement]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    Ok(())
}

/// Percentage of correctly placed pieces, pooled over all instances.
pub fn direct_comparison(items: &[Placement]) -> Result<f64> {
    nonempty(items)?;
    let total: usize = items.iter().map(|p| p.truth.len()).sum();
    if total == 0 {
        return Err(Error::EmptyInput("elements"));
    }
    let correct: usize = items.iter().map(Placement::correct).sum();
    Ok(100.0 * correct as f64 / total as f64)
}

/// Percentage of instances with every piece placed correctly.
pub fn solved_rate(items: &[Placement]) -> Result<f64> {
    nonempty(items)?;
    Ok(100.0 * items.iter().filter(|p| p.is_perfect()).count() as f64 / items.len() as f64)
}

/// Percentage of correctly predicted positions over all elements.
pub fn accuracy(items: &[Placement]) -> Result<f64> {
    direct_comparison(items)
}

/// Perfect match ratio: percentage of instances ordered entirely correctly.
pub fn pmr(items: &[Placement]) -> Result<f64> {
    solved_rate(items)
}

fn check_pair(pred: &[usize], truth: &[usize], min: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch { expected: truth.len().to_string(), got: pred.len().to_string() });
    }
    if pred.len() < min {
        return Err(Error::TooFewElements { got: pred.len(), min });
    }
    Ok(())
}

/// Predicted ranks listed in ground-truth order.
fn pred_in_truth_order(pred: &[usize], truth: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..truth.len()).collect();
    idx.sort_by_key(|&i| (truth[i], i));
    idx.into_iter().map(|i| pred[i]).collect()
}

/// Strict inversions of `v` by merge sort.
fn count_inversions(v: &mut [usize]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = count_inversions(&mut v[..mid]) + count_inversions(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            merged.push(v[i]);
            i += 1;
        } else {
            inv += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    inv
}

fn tied_pairs(v: &[usize]) -> u64 {
    let mut s = v.to_vec();
    s.sort_unstable();
    let mut ties = 0u64;
    let mut run = 1u64;
    for w in s.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            ties += run * (run - 1) / 2;
            run = 1;
        }
    }
    ties + run * (run - 1) / 2
}

fn num_pairs(k: usize) -> f64 {
    (k * (k - 1) / 2) as f64
}

/// Discordant pairs of the predicted ranking relative to the true one.
pub fn inversions(pred: &[usize], truth: &[usize]) -> Result<u64> {
    check_pair(pred, truth, 1)?;
    Ok(count_inversions(&mut pred_in_truth_order(pred, truth)))
}

/// `1 - 2 * inversions / C(K, 2)`.
pub fn kendall_tau(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth, 2)?;
    let inv = inversions(pred, truth)? as f64;
    Ok(1.0 - 2.0 * inv / num_pairs(pred.len()))
}

/// Fraction of pairs whose relative order is predicted correctly.
///
/// Without tied predictions this is evaluated as `(tau + 1) / 2`, so that the
/// identity holds bit for bit; tied pairs count as incorrect.
pub fn pairwise_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth, 2)?;
    let ordered = pred_in_truth_order(pred, truth);
    let ties = tied_pairs(&ordered);
    if ties == 0 {
        return Ok((kendall_tau(pred, truth)? + 1.0) / 2.0);
    }
    let inv = count_inversions(&mut ordered.clone());
    let total = num_pairs(pred.len());
    Ok((total - inv as f64 - ties as f64) / total)
}

/// 1-based average ranks (ties share the mean of their positions).
fn average_ranks(v: &[usize]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by_key(|&i| v[i]);
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman's rank correlation; ties handled through average ranks.
///
/// Returns 0 when either ranking is constant.
pub fn spearman(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth, 2)?;
    let rp = average_ranks(pred);
    let rt = average_ranks(truth);
    if tied_pairs(pred) == 0 && tied_pairs(truth) == 0 {
        let k = pred.len() as f64;
        let d2: f64 = rp.iter().zip(&rt).map(|(a, b)| (a - b) * (a - b)).sum();
        return Ok(1.0 - 6.0 * d2 / (k * (k * k - 1.0)));
    }
    Ok(pearson(&rp, &rt))
}

/// Mean absolute displacement `|pred - truth|`.
pub fn average_distance(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth, 1)?;
    let s: usize = pred.iter().zip(truth).map(|(&a, &b)| a.abs_diff(b)).sum();
    Ok(s as f64 / pred.len() as f64)
}

/// Aggregated evaluation numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub direct_comparison: f64,
    pub solved_rate: f64,
    pub accuracy: f64,
    pub pmr: f64,
    pub kendall_tau: f64,
    pub spearman: f64,
    pub pairwise_accuracy: f64,
    pub average_distance: f64,
    pub instances: usize,
    pub elements: usize,
}

impl MetricsReport {
    /// Single-element instances count as perfectly ordered for the rank correlations.
    pub fn from_placements(items: &[Placement]) -> Result<Self> {
        nonempty(items)?;
        let n = items.len() as f64;
        let (mut tau, mut rho, mut pw, mut dist) = (0.0, 0.0, 0.0, 0.0);
        for p in items {
            if p.truth.len() >= 2 {
                tau += kendall_tau(&p.predicted, &p.truth)?;
                rho += spearman(&p.predicted, &p.truth)?;
                pw += pairwise_accuracy(&p.predicted, &p.truth)?;
            } else {
                tau += 1.0;
                rho += 1.0;
                pw += 1.0;
            }
            dist += average_distance(&p.predicted, &p.truth)?;
        }
        Ok(Self {
            direct_comparison: direct_comparison(items)?,
            solved_rate: solved_rate(items)?,
            accuracy: accuracy(items)?,
            pmr: pmr(items)?,
            kendall_tau: tau / n,
            spearman: rho / n,
            pairwise_accuracy: pw / n,
            average_distance: dist / n,
            instances: items.len(),
            elements: items.iter().map(|p| p.truth.len()).sum(),
        })
    }

    /// `key = value` lines in fixed order, reals with four decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("direct_comparison", self.direct_comparison),
            ("solved_rate", self.solved_rate),
            ("accuracy", self.accuracy),
            ("pmr", self.pmr),
            ("kendall_tau", self.kendall_tau),
            ("spearman", self.spearman),
            ("pairwise_accuracy", self.pairwise_accuracy),
            ("average_distance", self.average_distance),
        ] {
            // normalize negative zero so reports are byte-stable
            let v = if v == 0.0 { 0.0 } else { v };
            writeln!(s, "{k} = {v:.4}").unwrap();
        }
        writeln!(s, "instances = {}", self.instances).unwrap();
        writeln!(s, "elements = {}", self.elements).unwrap();
        s
    }

    pub fn is_well_formed(&self) -> bool {
        let pct = |v: f64| v.is_finite() && (0.0..=100.0).contains(&v);
        let unit = |v: f64| v.is_finite() && (-1.0..=1.0).contains(&v);
        pct(self.direct_comparison)
            && pct(self.solved_rate)
            && pct(self.accuracy)
            && pct(self.pmr)
            && unit(self.kendall_tau)
            && unit(self.spearman)
            && self.pairwise_accuracy.is_finite()
            && (0.0..=1.0).contains(&self.pairwise_accuracy)
            && self.average_distance.is_finite()
            && self.average_distance >= 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn placement(pred: &[usize], truth: &[usize]) -> Placement {
        Placement::new(pred.to_vec(), truth.to_vec()).unwrap()
    }

    fn identity(k: usize) -> Vec<usize> {
        (0..k).collect()
    }

    #[test]
    fn direct_comparison_examples() {
        assert_eq!(direct_comparison(&[placement(&[0, 1, 2], &[0, 1, 2])]).unwrap(), 100.0);
        let mut pred = identity(36);
        pred[0] = 99;
        let dc = direct_comparison(&[placement(&pred, &identity(36))]).unwrap();
        assert!((dc - 97.2222).abs() < 1e-4);
        assert!(direct_comparison(&[]).is_err());
    }

    #[test]
    fn solved_rate_examples() {
        let ok = placement(&[0, 1, 2, 3], &[0, 1, 2, 3]);
        let bad = placement(&[0, 1, 3, 2], &[0, 1, 2, 3]);
        assert_eq!(solved_rate(&[ok.clone(), ok.clone()]).unwrap(), 100.0);
        assert_eq!(solved_rate(&[ok.clone(), bad.clone()]).unwrap(), 50.0);
        assert_eq!(pmr(&[ok.clone(), ok.clone(), ok, bad]).unwrap(), 75.0);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[placement(&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 4])]).unwrap(), 100.0);
        assert_eq!(accuracy(&[placement(&[0, 1, 2, 4, 3], &[0, 1, 2, 3, 4])]).unwrap(), 60.0);
    }

    #[test]
    fn kendall_examples() {
        assert_eq!(kendall_tau(&identity(5), &identity(5)).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[3, 2, 1, 0], &identity(4)).unwrap(), -1.0);
        assert_eq!(inversions(&[3, 2, 1, 0], &identity(4)).unwrap(), 6);
        assert!((kendall_tau(&[0, 1, 2, 4, 3], &identity(5)).unwrap() - 0.8).abs() < 1e-15);
        assert!(kendall_tau(&[0], &[0]).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&identity(6), &identity(6)).unwrap(), 1.0);
        assert_eq!(spearman(&[4, 3, 2, 1, 0], &identity(5)).unwrap(), -1.0);
        assert!((spearman(&[0, 1, 2, 4, 3], &identity(5)).unwrap() - 0.9).abs() < 1e-15);
        // ties go through average ranks
        let tied = spearman(&[0, 0, 1], &[0, 1, 2]).unwrap();
        let want = pearson(&[1.5, 1.5, 3.0], &[1.0, 2.0, 3.0]);
        assert!((tied - want).abs() < 1e-15);
    }

    #[test]
    fn pairwise_and_distance_examples() {
        assert_eq!(pairwise_accuracy(&identity(5), &identity(5)).unwrap(), 1.0);
        assert!((pairwise_accuracy(&[0, 1, 2, 4, 3], &identity(5)).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(average_distance(&identity(4), &identity(4)).unwrap(), 0.0);
        assert_eq!(average_distance(&[1, 0], &[0, 1]).unwrap(), 1.0);
        assert!(average_distance(&[], &[]).is_err());
    }

    #[test]
    fn rank_metrics_ignore_element_labels() {
        // relabel elements: same rank correspondence, different element order
        let pred = [2, 0, 1, 4, 3];
        let truth = [1, 0, 2, 3, 4];
        let order = [4, 2, 0, 3, 1];
        let p2: Vec<usize> = order.iter().map(|&i| pred[i]).collect();
        let t2: Vec<usize> = order.iter().map(|&i| truth[i]).collect();
        assert_eq!(kendall_tau(&pred, &truth).unwrap(), kendall_tau(&p2, &t2).unwrap());
        assert_eq!(spearman(&pred, &truth).unwrap(), spearman(&p2, &t2).unwrap());
        assert_eq!(pairwise_accuracy(&pred, &truth).unwrap(), pairwise_accuracy(&p2, &t2).unwrap());
        assert_eq!(average_distance(&pred, &truth).unwrap(), average_distance(&p2, &t2).unwrap());
    }

    #[test]
    fn report_text_is_stable() {
        let items = [placement(&[0, 1, 2, 4, 3], &identity(5)), placement(&identity(3), &identity(3))];
        let r = MetricsReport::from_placements(&items).unwrap();
        assert!(r.is_well_formed());
        let want = "direct_comparison = 75.0000\n\
                    solved_rate = 50.0000\n\
                    accuracy = 75.0000\n\
                    pmr = 50.0000\n\
                    kendall_tau = 0.9000\n\
                    spearman = 0.9500\n\
                    pairwise_accuracy = 0.9500\n\
                    average_distance = 0.2000\n\
                    instances = 2\n\
                    elements = 8\n";
        assert_eq!(r.to_text(), want);
        let mut shuffled = items.to_vec();
        shuffled.reverse();
        assert_eq!(MetricsReport::from_placements(&shuffled).unwrap().to_text(), want);
    }
}
