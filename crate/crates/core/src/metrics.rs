//! Evaluation metrics over scored predictions.
//!
//! Order-based metrics (correctness AUROC, the risk-coverage curve, AURC and
//! SAC) depend only on how uncertainty ranks the samples. Ties in uncertainty
//! are credited 1/2 in AUROC and kept in input order along the risk-coverage
//! curve.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    mode_logits, scaled_logits, score_duo, softmax_row, AggregationMode, ScoredPredictions,
    UncertaintyMeasure,
};
use crate::error::{Error, Result};
use crate::logit_store::{flops_balance, BundlePair, LogitBundle};
use crate::tune::nll;

pub const DEFAULT_ECE_BINS: usize = 15;
pub const DEFAULT_SAC_TARGET: f64 = 0.98;

pub fn accuracy(sp: &ScoredPredictions) -> Result<f64> {
    if sp.is_empty() {
        return Err(Error::Empty("accuracy of zero predictions"));
    }
    let hits = sp.correct.iter().filter(|&&c| c).count();
    Ok(hits as f64 / sp.len() as f64)
}

/// Unweighted mean of per-class F1 over classes that occur in `labels`.
///
/// A class with support but no true positives contributes 0.
pub fn macro_f1(pred: &[u32], labels: &[u32], num_classes: usize) -> Result<f64> {
    assert_eq!(pred.len(), labels.len());
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &y) in pred.iter().zip(labels) {
        if p == y {
            tp[y as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fn_[y as usize] += 1;
        }
    }
    let mut total = 0.0;
    let mut classes = 0usize;
    for c in 0..num_classes {
        let support = tp[c] + fn_[c];
        if support == 0 {
            continue;
        }
        classes += 1;
        if tp[c] > 0 {
            total += 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64;
        }
    }
    if classes == 0 {
        return Err(Error::NoSupport);
    }
    Ok(total / classes as f64)
}

/// Mean squared distance between `softmax(z_i)` and the one-hot label.
pub fn brier(z: &Array2<f64>, labels: &[u32]) -> f64 {
    assert_eq!(z.nrows(), labels.len());
    let mut p = vec![0.0; z.ncols()];
    let mut total = 0.0;
    for (row, &y) in z.rows().into_iter().zip(labels) {
        softmax_row(row, &mut p);
        total += p
            .iter()
            .enumerate()
            .map(|(k, &q)| {
                let d = q - if k == y as usize { 1.0 } else { 0.0 };
                d * d
            })
            .sum::<f64>();
    }
    total / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// 0 for empty bins.
    pub mean_confidence: f64,
    /// 0 for empty bins.
    pub empirical_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub bins: Vec<CalibrationBin>,
}

/// Expected calibration error over `num_bins` equal-width, right-closed
/// confidence bins; confidence 0 falls in the first bin.
pub fn ece(sp: &ScoredPredictions, num_bins: usize) -> CalibrationReport {
    assert!(num_bins >= 1);
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    let mut hits = vec![0usize; num_bins];
    for (&c, &ok) in sp.confidence.iter().zip(&sp.correct) {
        let b =
            ((c * num_bins as f64).ceil() as isize - 1).clamp(0, num_bins as isize - 1) as usize;
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }
    let n = sp.len() as f64;
    let mut ece = 0.0;
    let bins = (0..num_bins)
        .map(|b| {
            let (mean_confidence, empirical_accuracy) = if count[b] > 0 {
                let m = count[b] as f64;
                (conf_sum[b] / m, hits[b] as f64 / m)
            } else {
                (0.0, 0.0)
            };
            if count[b] > 0 {
                ece += count[b] as f64 / n * (mean_confidence - empirical_accuracy).abs();
            }
            CalibrationBin {
                lo: b as f64 / num_bins as f64,
                hi: (b + 1) as f64 / num_bins as f64,
                count: count[b],
                mean_confidence,
                empirical_accuracy,
            }
        })
        .collect();
    CalibrationReport { ece, bins }
}

/// Probability that an incorrect prediction has higher uncertainty than a
/// correct one, ties counting 1/2. Mann-Whitney U via average ranks.
pub fn auroc_correctness(sp: &ScoredPredictions) -> Result<f64> {
    let n_wrong = sp.correct.iter().filter(|&&c| !c).count();
    let n_right = sp.len() - n_wrong;
    if n_wrong == 0 || n_right == 0 {
        return Err(Error::UndefinedAuroc);
    }
    let mut order: Vec<usize> = (0..sp.len()).collect();
    order.sort_by(|&a, &b| sp.uncertainty[a].total_cmp(&sp.uncertainty[b]));

    // Twice the rank sum keeps tied averages integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let u = sp.uncertainty[order[i]];
        let mut j = i;
        while j < order.len() && sp.uncertainty[order[j]] == u {
            j += 1;
        }
        let avg2 = (i + 1 + j) as u128; // 2 * mean of ranks i+1..=j
        let wrong_in_group = order[i..j].iter().filter(|&&s| !sp.correct[s]).count() as u128;
        rank_sum2 += avg2 * wrong_in_group;
        i = j;
    }
    let nw = n_wrong as u128;
    let u2 = rank_sum2 - nw * (nw + 1);
    Ok(u2 as f64 / (2.0 * n_wrong as f64 * n_right as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCoverageCurve {
    /// `i / N` for `i = 1..=N`.
    pub coverage: Vec<f64>,
    /// Error rate among the `i` least uncertain samples.
    pub risk: Vec<f64>,
    /// Mean of `risk`.
    pub aurc: f64,
    errors: Vec<usize>,
}

impl RiskCoverageCurve {
    /// Largest coverage whose prefix accuracy is at least `target`, or 0.
    pub fn sac(&self, target: f64) -> f64 {
        let n = self.errors.len();
        (1..=n)
            .rev()
            .find(|&i| (i - self.errors[i - 1]) as f64 / i as f64 >= target)
            .map_or(0.0, |i| i as f64 / n as f64)
    }
}

/// Risk-coverage curve over samples sorted by ascending uncertainty (stable).
pub fn risk_coverage(sp: &ScoredPredictions) -> Result<RiskCoverageCurve> {
    let n = sp.len();
    if n == 0 {
        return Err(Error::Empty("risk-coverage of zero predictions"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sp.uncertainty[a].total_cmp(&sp.uncertainty[b]));
    let mut errors = Vec::with_capacity(n);
    let mut risk = Vec::with_capacity(n);
    let mut wrong = 0usize;
    for (i, &s) in order.iter().enumerate() {
        wrong += !sp.correct[s] as usize;
        errors.push(wrong);
        risk.push(wrong as f64 / (i + 1) as f64);
    }
    let aurc = risk.iter().sum::<f64>() / n as f64;
    Ok(RiskCoverageCurve {
        coverage: (1..=n).map(|i| i as f64 / n as f64).collect(),
        risk,
        aurc,
        errors,
    })
}

/// One row of a balance sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub split: String,
    pub large_model: String,
    pub small_model: String,
    pub balance: f64,
    pub mode: String,
    pub measure: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub nll: f64,
    pub brier: f64,
    pub ece: f64,
    pub auroc: f64,
    pub aurc: f64,
    /// `(target accuracy, coverage)` in the order requested.
    pub sac: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub sac_targets: Vec<f64>,
    pub ece_bins: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            sac_targets: vec![DEFAULT_SAC_TARGET],
            ece_bins: DEFAULT_ECE_BINS,
        }
    }
}

pub enum EvalInput<'a> {
    Single(&'a LogitBundle),
    Pair(&'a BundlePair),
}

/// Scores the input under `mode` and computes every metric.
///
/// NLL and Brier are taken from the distribution that supplies the
/// uncertainty, which for `UqOnlyDuo` is the Duo distribution.
pub fn evaluate(
    input: EvalInput<'_>,
    mode: AggregationMode,
    measure: UncertaintyMeasure,
    opts: &EvalOptions,
) -> Result<MetricRow> {
    let (large, small, balance, z, sp) = match input {
        EvalInput::Single(bundle) => {
            let AggregationMode::SingleScaled(s) = mode else {
                return Err(Error::InvalidWeights(format!(
                    "mode {} needs a bundle pair",
                    mode.tag()
                )));
            };
            let z = scaled_logits(bundle, s);
            let sp = crate::aggregate::score(&z, bundle.labels(), measure);
            (bundle, None, 0.0, z, sp)
        }
        EvalInput::Pair(pair) => {
            let (small, balance) = if mode.uses_small() {
                (Some(pair.small()), flops_balance(pair)?)
            } else {
                (None, 0.0)
            };
            (
                pair.large(),
                small,
                balance,
                mode_logits(pair, mode),
                score_duo(pair, mode, measure),
            )
        }
    };
    let labels = large.labels();
    let curve = risk_coverage(&sp)?;
    Ok(MetricRow {
        dataset: large.meta().dataset.clone(),
        split: large.meta().split.to_string(),
        large_model: large.meta().model_name.clone(),
        small_model: small
            .map(|b| b.meta().model_name.clone())
            .unwrap_or_default(),
        balance,
        mode: mode.tag().to_string(),
        measure: measure.tag().to_string(),
        accuracy: accuracy(&sp)?,
        macro_f1: macro_f1(&sp.pred, labels, large.num_classes())?,
        nll: nll(&z, labels),
        brier: brier(&z, labels),
        ece: ece(&sp, opts.ece_bins).ece,
        auroc: auroc_correctness(&sp)?,
        aurc: curve.aurc,
        sac: opts
            .sac_targets
            .iter()
            .map(|&t| (t, curve.sac(t)))
            .collect(),
    })
}
