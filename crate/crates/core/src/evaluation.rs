//! Scoring predictions against ground-truth easiness.
//!
//! All sums use pairwise summation in double precision. Histogram bins are
//! half-open `[lo, hi)` except the last, which is closed so 1.0 is counted.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schemas::PredictorKind;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no values to evaluate")]
    EmptyInput,
    #[error("value {value} at position {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("number of bins must be positive")]
    NoBins,
}

/// Pairwise (cascade) summation; error grows as O(log n) rather than O(n).
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 8;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let (a, b) = values.split_at(values.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

fn check_unit(values: impl Iterator<Item = f64>) -> Result<(), MetricError> {
    for (index, value) in values.enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricError::OutOfRange { index, value });
        }
    }
    Ok(())
}

fn check_pairs(pairs: &[(f64, f64)]) -> Result<(), MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    check_unit(pairs.iter().flat_map(|&(p, a)| [p, a])).map_err(|e| match e {
        MetricError::OutOfRange { index, value } => MetricError::OutOfRange { index: index / 2, value },
        other => other,
    })
}

fn abs_errors(pairs: &[(f64, f64)]) -> Vec<f64> {
    pairs.iter().map(|&(p, a)| (p - a).abs()).collect()
}

/// Mean of `|prediction - actual|` over `(prediction, actual)` pairs.
pub fn mean_absolute_error(pairs: &[(f64, f64)]) -> Result<f64, MetricError> {
    check_pairs(pairs)?;
    Ok(pairwise_sum(&abs_errors(pairs)) / pairs.len() as f64)
}

/// Mean of `(prediction - actual)^2`.
pub fn mean_squared_error(pairs: &[(f64, f64)]) -> Result<f64, MetricError> {
    check_pairs(pairs)?;
    let sq: Vec<f64> = pairs.iter().map(|&(p, a)| (p - a) * (p - a)).collect();
    Ok(pairwise_sum(&sq) / pairs.len() as f64)
}

/// Standard error of the mean absolute error: sample standard deviation
/// (n - 1 denominator) of the absolute errors over sqrt(n). Zero when n = 1.
pub fn sem_of_absolute_errors(pairs: &[(f64, f64)]) -> Result<f64, MetricError> {
    check_pairs(pairs)?;
    let n = pairs.len();
    if n == 1 {
        return Ok(0.0);
    }
    let errs = abs_errors(pairs);
    let mean = pairwise_sum(&errs) / n as f64;
    let dev: Vec<f64> = errs.iter().map(|e| (e - mean) * (e - mean)).collect();
    let variance = pairwise_sum(&dev) / (n - 1) as f64;
    Ok((variance / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
}

fn bin_edge(i: usize, n_bins: usize) -> f64 {
    i as f64 / n_bins as f64
}

/// Equal-width histogram of predictions over [0, 1].
pub fn prediction_histogram(predictions: &[f64], n_bins: usize) -> Result<Vec<HistogramBin>, MetricError> {
    if predictions.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if n_bins == 0 {
        return Err(MetricError::NoBins);
    }
    check_unit(predictions.iter().copied())?;
    let mut counts = vec![0u64; n_bins];
    for &p in predictions {
        let mut idx = ((p * n_bins as f64).floor() as usize).min(n_bins - 1);
        // reconcile with the stored edges where p * n rounds across a boundary
        while idx > 0 && p < bin_edge(idx, n_bins) {
            idx -= 1;
        }
        while idx + 1 < n_bins && p >= bin_edge(idx + 1, n_bins) {
            idx += 1;
        }
        counts[idx] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin { lo: bin_edge(i, n_bins), hi: bin_edge(i + 1, n_bins), count })
        .collect())
}

/// Scores for one pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub kind: PredictorKind,
    pub n_items: usize,
    pub mae: f64,
    pub mse: f64,
    pub sem_abs_error: f64,
    pub histogram: Vec<HistogramBin>,
}

impl EvaluationReport {
    /// Evaluate `(prediction, actual easiness)` pairs.
    pub fn evaluate(kind: PredictorKind, pairs: &[(f64, f64)], n_bins: usize) -> Result<Self, MetricError> {
        let predictions: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        Ok(Self {
            kind,
            n_items: pairs.len(),
            mae: mean_absolute_error(pairs)?,
            mse: mean_squared_error(pairs)?,
            sem_abs_error: sem_of_absolute_errors(pairs)?,
            histogram: prediction_histogram(&predictions, n_bins)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub rank: usize,
    pub kind: PredictorKind,
    pub mae: f64,
    pub mse: f64,
    pub sem_abs_error: f64,
    pub best: bool,
}

/// Order pipelines by MAE, then MSE, then kind name. The first is flagged best.
pub fn compare_pipelines(reports: &[EvaluationReport]) -> Result<Vec<RankEntry>, MetricError> {
    if reports.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut sorted: Vec<&EvaluationReport> = reports.iter().collect();
    sorted.sort_by(|a, b| {
        a.mae.total_cmp(&b.mae).then(a.mse.total_cmp(&b.mse)).then_with(|| a.kind.as_str().cmp(b.kind.as_str()))
    });
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, r)| RankEntry {
            rank: i + 1,
            kind: r.kind,
            mae: r.mae,
            mse: r.mse,
            sem_abs_error: r.sem_abs_error,
            best: i == 0,
        })
        .collect())
}

/// Bar-chart data: one row per pipeline with MAE and its SEM error bar.
pub fn write_mae_bars<W: Write>(ranking: &[RankEntry], sink: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["kind", "mae", "sem_abs_error", "mse", "rank", "best"])?;
    for r in ranking {
        w.write_record([
            r.kind.as_str().to_string(),
            r.mae.to_string(),
            r.sem_abs_error.to_string(),
            r.mse.to_string(),
            r.rank.to_string(),
            r.best.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Distribution data: one row per (pipeline, bin).
pub fn write_distributions<W: Write>(reports: &[EvaluationReport], sink: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["kind", "bin_lo", "bin_hi", "count"])?;
    for r in reports {
        for b in &r.histogram {
            w.write_record([r.kind.as_str().to_string(), b.lo.to_string(), b.hi.to_string(), b.count.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_term_metrics() {
        let pairs = [(0.5, 0.6), (0.7, 0.6)];
        assert!((mean_absolute_error(&pairs).unwrap() - 0.1).abs() < 1e-15);
        assert!((mean_squared_error(&pairs).unwrap() - 0.01).abs() < 1e-15);
        assert!(sem_of_absolute_errors(&pairs).unwrap().abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions() {
        let pairs: Vec<_> = [0.1, 0.4, 0.9].iter().map(|&x| (x, x)).collect();
        assert_eq!(mean_absolute_error(&pairs).unwrap(), 0.0);
        assert_eq!(mean_squared_error(&pairs).unwrap(), 0.0);
        assert_eq!(sem_of_absolute_errors(&pairs).unwrap(), 0.0);
    }

    #[test]
    fn constant_half_predictor_mse() {
        let actual = [0.2, 0.9, 0.5, 0.75];
        let pairs: Vec<_> = actual.iter().map(|&a| (0.5, a)).collect();
        let want = actual.iter().map(|a| (a - 0.5) * (a - 0.5)).sum::<f64>() / 4.0;
        assert!((mean_squared_error(&pairs).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn single_pair_sem_is_zero() {
        assert_eq!(sem_of_absolute_errors(&[(0.2, 0.9)]).unwrap(), 0.0);
    }

    #[test]
    fn empty_and_out_of_range() {
        assert_eq!(mean_absolute_error(&[]), Err(MetricError::EmptyInput));
        assert_eq!(mean_squared_error(&[]), Err(MetricError::EmptyInput));
        assert_eq!(sem_of_absolute_errors(&[]), Err(MetricError::EmptyInput));
        assert_eq!(
            mean_absolute_error(&[(0.5, 0.5), (1.2, 0.5)]),
            Err(MetricError::OutOfRange { index: 1, value: 1.2 })
        );
        assert!(mean_squared_error(&[(f64::NAN, 0.5)]).is_err());
    }

    #[test]
    fn histogram_half_open_bins() {
        let h = prediction_histogram(&[0.0, 0.5, 1.0], 2).unwrap();
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), [1, 2]);
        assert_eq!((h[0].lo, h[0].hi, h[1].lo, h[1].hi), (0.0, 0.5, 0.5, 1.0));
    }

    #[test]
    fn histogram_edges_are_respected() {
        // 0.3 * 10 and 0.7 * 10 both round above the integer
        let h = prediction_histogram(&[0.3, 0.7, 0.1 + 0.2], 10).unwrap();
        assert_eq!(h[3].count, 2);
        assert_eq!(h[7].count, 1);
    }

    #[test]
    fn histogram_errors() {
        assert_eq!(prediction_histogram(&[], 10), Err(MetricError::EmptyInput));
        assert_eq!(prediction_histogram(&[0.5], 0), Err(MetricError::NoBins));
    }

    fn report(kind: PredictorKind, mae: f64, mse: f64) -> EvaluationReport {
        EvaluationReport { kind, n_items: 10, mae, mse, sem_abs_error: 0.0, histogram: vec![] }
    }

    #[test]
    fn single_report_is_best() {
        let r = compare_pipelines(&[report(PredictorKind::TextOnly, 0.3, 0.1)]).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r[0].best);
        assert_eq!(compare_pipelines(&[]), Err(MetricError::EmptyInput));
    }

    #[test]
    fn ties_broken_by_mse_then_name() {
        let r = compare_pipelines(&[
            report(PredictorKind::TextOnly, 0.2, 0.09),
            report(PredictorKind::VisionOnly, 0.2, 0.05),
        ])
        .unwrap();
        assert_eq!(r[0].kind, PredictorKind::VisionOnly);
        let r = compare_pipelines(&[
            report(PredictorKind::VisionOnly, 0.2, 0.05),
            report(PredictorKind::TextOnly, 0.2, 0.05),
        ])
        .unwrap();
        assert_eq!(r[0].kind, PredictorKind::TextOnly);
        assert!(r[0].best && !r[1].best);
    }

    #[test]
    fn plot_csvs() {
        let rep = EvaluationReport::evaluate(PredictorKind::Multimodal, &[(0.2, 0.3), (0.9, 0.8)], 4).unwrap();
        let ranking = compare_pipelines(std::slice::from_ref(&rep)).unwrap();
        let mut bars = Vec::new();
        write_mae_bars(&ranking, &mut bars).unwrap();
        let bars = String::from_utf8(bars).unwrap();
        assert!(bars.starts_with("kind,mae,sem_abs_error,mse,rank,best\nmultimodal,"));
        let mut dist = Vec::new();
        write_distributions(&[rep], &mut dist).unwrap();
        assert_eq!(String::from_utf8(dist).unwrap().lines().count(), 5);
    }

    fn unit_pairs() -> impl Strategy<Value = Vec<(f64, f64)>> {
        proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..200)
    }

    proptest! {
        #[test]
        fn jensen_and_bounds(pairs in unit_pairs()) {
            let mae = mean_absolute_error(&pairs).unwrap();
            let mse = mean_squared_error(&pairs).unwrap();
            prop_assert!(mae * mae <= mse * (1.0 + 1e-12) + 1e-300);
            prop_assert!((0.0..=1.0).contains(&mae));
            prop_assert!((0.0..=1.0).contains(&mse));
        }

        #[test]
        fn permutation_invariant(pairs in unit_pairs()) {
            let mut rev = pairs.clone();
            rev.reverse();
            let tol = 1e-15;
            prop_assert!((mean_absolute_error(&pairs).unwrap() - mean_absolute_error(&rev).unwrap()).abs() < tol);
            prop_assert!((mean_squared_error(&pairs).unwrap() - mean_squared_error(&rev).unwrap()).abs() < tol);
        }

        #[test]
        fn histogram_counts_sum_to_n(preds in proptest::collection::vec(0.0f64..=1.0, 1..300), bins in 1usize..40) {
            let h = prediction_histogram(&preds, bins).unwrap();
            prop_assert_eq!(h.iter().map(|b| b.count).sum::<u64>(), preds.len() as u64);
        }
    }
}
