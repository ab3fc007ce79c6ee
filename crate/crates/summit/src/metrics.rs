//! Ranking metrics for imbalanced binary classification, plus percentile
//! bootstrap confidence intervals.
//!
//! AUPRC is average precision (step integration of the PR curve, never
//! trapezoidal); AUROC is the pairwise-ranking probability with the 0.5
//! tie convention; the concordance index counts risk-ordered comparable
//! pairs under right censoring. The implementations are O(n log n) via
//! rank statistics so bootstrap replication stays cheap; brute-force pair
//! enumeration oracles live in the test suites.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::seed::derive_seed_indexed;
use crate::{Error, Result};

fn validate_scores(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("empty input".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {s}")));
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    (pos, labels.len() - pos)
}

/// Average precision: positives accumulate the precision at their
/// descending-score rank, with tied scores grouped so every member of a
/// group sees the precision at the group boundary.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    validate_scores(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs both classes".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_pos = 0usize;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            group_pos += usize::from(labels[order[j]] == 1);
            j += 1;
        }
        tp += group_pos;
        seen = j;
        let precision = tp as f64 / seen as f64;
        ap += group_pos as f64 * precision;
        i = j;
    }
    Ok(ap / n_pos as f64)
}

/// Pairwise-ranking probability (#{pos>neg} + 0.5·#{pos=neg}) / (n⁺·n⁻),
/// computed from midranks so tied groups are exact.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    validate_scores(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "auroc needs both classes".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; tied entries share the midrank. Both halves
        // of the sum are exact in f64 for any realistic input size.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fraction of samples where (score ≥ threshold) equals the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    validate_scores(scores, labels)?;
    let correct = scores
        .iter()
        .zip(labels.iter())
        .filter(|&(&s, &y)| u8::from(s >= threshold) == y)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

struct Fenwick {
    tree: Vec<usize>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self {
            tree: vec![0; n + 1],
        }
    }

    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted values with index ≤ i.
    fn prefix(&self, mut i: usize) -> usize {
        i += 1;
        let mut sum = 0;
        while i > 0 {
            sum += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        sum
    }
}

/// Concordance index. A pair (i, j) with i an event is comparable when j's
/// event comes strictly later, or j is censored at or after tᵢ; it is
/// concordant when the earlier event carries the higher score, ties count
/// one half.
pub fn c_index(scores: &[f64], event_times: &[f64], labels: &[u8]) -> Result<f64> {
    validate_scores(scores, labels)?;
    if event_times.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} event times vs {} scores",
            event_times.len(),
            scores.len()
        )));
    }
    if let Some(t) = event_times.iter().find(|t| !t.is_finite()) {
        return Err(Error::Numeric(format!("non-finite event time {t}")));
    }

    // Compress score ranks for the Fenwick counting.
    let mut sorted_scores: Vec<f64> = scores.to_vec();
    sorted_scores.sort_by(f64::total_cmp);
    sorted_scores.dedup();
    let rank_of = |s: f64| sorted_scores.partition_point(|&v| v < s);

    // Process in decreasing time: when an event at time t is handled, the
    // tree holds exactly the strictly-later samples plus censored samples
    // that share its timestamp.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| event_times[b].total_cmp(&event_times[a]));

    let mut tree = Fenwick::new(sorted_scores.len());
    let mut concordant = 0.0f64;
    let mut comparable = 0usize;
    let mut inserted = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && event_times[order[j]] == event_times[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        for &idx in group {
            if labels[idx] == 0 {
                tree.add(rank_of(scores[idx]));
                inserted += 1;
            }
        }
        for &idx in group {
            if labels[idx] == 1 {
                let r = rank_of(scores[idx]);
                let le = tree.prefix(r);
                let lt = if r > 0 { tree.prefix(r - 1) } else { 0 };
                comparable += inserted;
                concordant += lt as f64 + 0.5 * (le - lt) as f64;
            }
        }
        for &idx in group {
            if labels[idx] == 1 {
                tree.add(rank_of(scores[idx]));
                inserted += 1;
            }
        }
        i = j;
    }
    if comparable == 0 {
        return Err(Error::UndefinedMetric("no comparable pairs".into()));
    }
    Ok(concordant / comparable as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Auprc,
    Auroc,
    Accuracy,
    CIndex,
}

fn compute_metric(
    kind: MetricKind,
    scores: &[f64],
    labels: &[u8],
    times: Option<&[f64]>,
    threshold: f64,
) -> Result<f64> {
    match kind {
        MetricKind::Auprc => auprc(scores, labels),
        MetricKind::Auroc => auroc(scores, labels),
        MetricKind::Accuracy => accuracy(scores, labels, threshold),
        MetricKind::CIndex => {
            let times = times.ok_or_else(|| {
                Error::UndefinedMetric("c-index requires event times".into())
            })?;
            c_index(scores, times, labels)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub low: f64,
    pub high: f64,
    /// Replicates abandoned after the undefined-metric retry cap.
    pub skipped: usize,
    /// More than half the replicates were undefined.
    pub unreliable: bool,
}

const BOOTSTRAP_RETRY_CAP: usize = 10;

/// Percentile bootstrap over resamples of (score, label[, time]) triples.
/// Replicate r draws from a stream seeded by (seed, r), so results are
/// deterministic and replicates can run in parallel.
pub fn bootstrap_ci(
    kind: MetricKind,
    scores: &[f64],
    labels: &[u8],
    times: Option<&[f64]>,
    threshold: f64,
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi> {
    use rand::{Rng, SeedableRng};
    validate_scores(scores, labels)?;
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Config(format!("level must be in (0,1), got {level}")));
    }
    // The metric must be computable on the full set to begin with.
    let point = compute_metric(kind, scores, labels, times, threshold)?;

    let n = scores.len();
    let replicates: Vec<Option<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|r| {
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(derive_seed_indexed(
                seed,
                "bootstrap",
                r as u64,
            ));
            let mut bs = vec![0.0; n];
            let mut bl = vec![0u8; n];
            let mut bt = times.map(|_| vec![0.0; n]);
            for _attempt in 0..BOOTSTRAP_RETRY_CAP {
                for i in 0..n {
                    let pick = rng.random_range(0..n);
                    bs[i] = scores[pick];
                    bl[i] = labels[pick];
                    if let (Some(bt), Some(t)) = (bt.as_mut(), times) {
                        bt[i] = t[pick];
                    }
                }
                match compute_metric(kind, &bs, &bl, bt.as_deref(), threshold) {
                    Ok(v) => return Some(v),
                    Err(Error::UndefinedMetric(_)) => continue,
                    Err(_) => return None,
                }
            }
            None
        })
        .collect();

    let mut values: Vec<f64> = replicates.iter().filter_map(|v| *v).collect();
    let skipped = n_boot - values.len();
    if values.is_empty() {
        return Err(Error::UndefinedMetric(
            "every bootstrap replicate was undefined".into(),
        ));
    }
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let lo = percentile(&values, alpha);
    let hi = percentile(&values, 1.0 - alpha);
    Ok(BootstrapCi {
        // Percentile endpoints are widened to bracket the point estimate.
        low: lo.min(point),
        high: hi.max(point),
        skipped,
        unreliable: skipped * 2 > n_boot,
    })
}

/// Linear-interpolation percentile of a sorted slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// One metric with an optional bootstrap interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub point: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci: Option<BootstrapCi>,
}

/// Full evaluation report, serializable as JSON for auditability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auprc: MetricValue,
    pub auroc: MetricValue,
    pub accuracy: MetricValue,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_index: Option<MetricValue>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub threshold: f64,
    pub n_boot: usize,
    pub bootstrap_seed: u64,
    pub confidence_level: f64,
}

/// Compute the full report. `n_boot = 0` skips intervals.
#[allow(clippy::too_many_arguments)]
pub fn metrics_report(
    scores: &[f64],
    labels: &[u8],
    times: Option<&[f64]>,
    threshold: f64,
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<MetricsReport> {
    let (n_pos, n_neg) = class_counts(labels);
    let with_ci = |kind: MetricKind| -> Result<MetricValue> {
        let point = compute_metric(kind, scores, labels, times, threshold)?;
        let ci = if n_boot > 0 {
            Some(bootstrap_ci(
                kind, scores, labels, times, threshold, n_boot, level, seed,
            )?)
        } else {
            None
        };
        Ok(MetricValue { point, ci })
    };
    Ok(MetricsReport {
        auprc: with_ci(MetricKind::Auprc)?,
        auroc: with_ci(MetricKind::Auroc)?,
        accuracy: with_ci(MetricKind::Accuracy)?,
        c_index: times
            .is_some()
            .then(|| with_ci(MetricKind::CIndex))
            .transpose()?,
        n_pos,
        n_neg,
        threshold,
        n_boot,
        bootstrap_seed: seed,
        confidence_level: level,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        // Descending order ranks the negative first; the one positive sits
        // at rank 2 with precision 1/2.
        assert_eq!(auprc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn auprc_of_random_scores_approaches_prevalence() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let n = 10_000;
        let prevalence = 0.2;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..n)
            .map(|_| u8::from(rng.random_range(0.0..1.0) < prevalence))
            .collect();
        let ap = auprc(&scores, &labels).unwrap();
        assert!((ap - prevalence).abs() < 0.05, "ap = {ap}");
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4, 0.4, 0.4, 0.4], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(auroc(&[3.0, 2.0, 1.0, 0.0], &[1, 0, 1, 0]).unwrap(), 0.75);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), 1.0);
        // Boundary rule: score exactly at threshold predicts positive.
        assert_eq!(accuracy(&[0.5], &[1], 0.5).unwrap(), 1.0);
        let scores = [0.2, 0.6, 0.9, 0.4];
        let labels = [0, 1, 0, 1];
        let flipped: Vec<u8> = labels.iter().map(|&y| 1 - y).collect();
        let a = accuracy(&scores, &labels, 0.5).unwrap();
        let b = accuracy(&scores, &flipped, 0.5).unwrap();
        assert_eq!(a + b, 1.0);
    }

    #[test]
    fn c_index_examples() {
        // Events at t=1,2; censored at t=3. All three pairs concordant.
        let scores = [0.9, 0.8, 0.1];
        let times = [1.0, 2.0, 3.0];
        let labels = [1, 1, 0];
        assert_eq!(c_index(&scores, &times, &labels).unwrap(), 1.0);
        assert_eq!(
            c_index(&[0.5, 0.5, 0.5], &times, &labels).unwrap(),
            0.5
        );
        // Scores perfectly anti-ordered with event times.
        let n = 20;
        let times: Vec<f64> = (0..n).map(|i| i as f64 + 1.0).collect();
        let scores: Vec<f64> = (0..n).map(|i| -(i as f64)).collect();
        let labels = vec![1u8; n];
        assert_eq!(c_index(&scores, &times, &labels).unwrap(), 1.0);
    }

    #[test]
    fn c_index_errors_without_comparable_pairs() {
        // All censored.
        assert!(matches!(
            c_index(&[0.1, 0.5], &[1.0, 2.0], &[0, 0]),
            Err(Error::UndefinedMetric(_))
        ));
        // Two events at the same time are not comparable.
        assert!(matches!(
            c_index(&[0.1, 0.5], &[2.0, 2.0], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    fn random_case(seed: u64, n: usize) -> (Vec<f64>, Vec<u8>, Vec<f64>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        // Coarse grid scores force plenty of ties.
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(0.0..1.0f64) * 8.0).round() / 8.0)
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        labels[0] = 1;
        if n > 1 {
            labels[1] = 0;
        }
        let times: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(0.0..1.0f64) * 16.0).round() / 4.0 + 0.25)
            .collect();
        (scores, labels, times)
    }

    #[test]
    fn fast_paths_match_brute_force_oracles() {
        for seed in 0..60 {
            let n = 2 + (seed as usize * 7) % 150;
            let (scores, labels, times) = random_case(seed, n);
            assert_eq!(
                auroc(&scores, &labels).unwrap(),
                oracle::auroc_brute(&scores, &labels),
                "auroc seed {seed}"
            );
            let ap = auprc(&scores, &labels).unwrap();
            let ap_oracle = oracle::auprc_step_integration(&scores, &labels);
            assert!((ap - ap_oracle).abs() < 1e-12, "auprc seed {seed}");
            match (
                c_index(&scores, &times, &labels),
                oracle::c_index_brute(&scores, &times, &labels),
            ) {
                (Ok(fast), Some(brute)) => {
                    assert_eq!(fast, brute, "c-index seed {seed}")
                }
                (Err(Error::UndefinedMetric(_)), None) => {}
                (a, b) => panic!("c-index mismatch seed {seed}: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn ranking_metrics_are_invariant_under_monotone_transforms() {
        for seed in 100..110 {
            let (scores, labels, times) = random_case(seed, 80);
            let exp_scores: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|s| 3.5 * s - 2.0).collect();
            for transformed in [&exp_scores, &affine] {
                assert_eq!(
                    auroc(&scores, &labels).unwrap(),
                    auroc(transformed, &labels).unwrap()
                );
                assert_eq!(
                    auprc(&scores, &labels).unwrap(),
                    auprc(transformed, &labels).unwrap()
                );
                assert_eq!(
                    c_index(&scores, &times, &labels).unwrap(),
                    c_index(transformed, &times, &labels).unwrap()
                );
            }
        }
    }

    #[test]
    fn c_index_equals_auroc_on_two_time_groups() {
        // All events, event times in two tied groups derived from the
        // labels: comparable pairs are exactly the cross-class pairs.
        for seed in 200..210 {
            let (scores, labels, _) = random_case(seed, 60);
            let times: Vec<f64> = labels
                .iter()
                .map(|&y| if y == 1 { 1.0 } else { 2.0 })
                .collect();
            let all_events = vec![1u8; labels.len()];
            assert_eq!(
                c_index(&scores, &times, &all_events).unwrap(),
                auroc(&scores, &labels).unwrap()
            );
        }
    }

    #[test]
    fn bootstrap_is_deterministic_and_degenerate_on_perfect_scores() {
        let scores: Vec<f64> = (0..50).map(|i| if i < 10 { 0.9 } else { 0.1 }).collect();
        let labels: Vec<u8> = (0..50).map(|i| u8::from(i < 10)).collect();
        let ci = bootstrap_ci(
            MetricKind::Auprc,
            &scores,
            &labels,
            None,
            0.5,
            200,
            0.95,
            7,
        )
        .unwrap();
        assert_eq!((ci.low, ci.high), (1.0, 1.0));
        let ci2 = bootstrap_ci(
            MetricKind::Auprc,
            &scores,
            &labels,
            None,
            0.5,
            200,
            0.95,
            7,
        )
        .unwrap();
        assert_eq!(ci, ci2);
    }

    #[test]
    fn bootstrap_width_shrinks_with_sample_size() {
        let make = |n: usize, seed: u64| -> (Vec<f64>, Vec<u8>) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut scores = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let y = u8::from(rng.random_range(0.0..1.0) < 0.3);
                let s = if y == 1 {
                    rng.random_range(0.3..1.0)
                } else {
                    rng.random_range(0.0..0.7)
                };
                scores.push(s);
                labels.push(y);
            }
            (scores, labels)
        };
        let width = |n: usize| {
            let (s, l) = make(n, 5);
            let ci =
                bootstrap_ci(MetricKind::Auroc, &s, &l, None, 0.5, 300, 0.95, 11).unwrap();
            ci.high - ci.low
        };
        assert!(width(10_000) < width(100));
    }

    #[test]
    fn report_serializes_with_seeds_and_counts() {
        let scores = [0.9, 0.7, 0.3, 0.2];
        let labels = [1, 1, 0, 0];
        let report = metrics_report(&scores, &labels, None, 0.5, 50, 0.95, 3).unwrap();
        assert_eq!(report.auprc.point, 1.0);
        assert_eq!((report.n_pos, report.n_neg), (2, 2));
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"bootstrap_seed\":3"));
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
