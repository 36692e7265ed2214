//! Logit aggregation and per-sample scoring.
//!
//! A Duo scores samples from `t_large * f_large(x) + t_small * f_small(x)`.
//! Predictions are the argmax of the combined logits (lowest class index on
//! ties) and uncertainty is read from the softmax of the same logits, either
//! as the softmax response `1 - max_k p_k` or as entropy normalized by `ln K`.
//!
//! All arithmetic is `f64`; bundles only store `f32`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logit_store::{BundlePair, LogitBundle};

/// Scalar weights applied to the large and small members' logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuoWeights {
    pub t_large: f64,
    pub t_small: f64,
}

impl DuoWeights {
    pub const UNWEIGHTED: DuoWeights = DuoWeights {
        t_large: 0.5,
        t_small: 0.5,
    };

    pub fn new(t_large: f64, t_small: f64) -> Result<Self> {
        let w = DuoWeights { t_large, t_small };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.t_large.is_finite()
            && self.t_small.is_finite()
            && self.t_large >= 0.0
            && self.t_small >= 0.0
            && self.t_large + self.t_small > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidWeights(format!(
                "({}, {}) must be finite, non-negative and not both zero",
                self.t_large, self.t_small
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AggregationMode {
    WeightedDuo(DuoWeights),
    /// Same as `WeightedDuo(0.5, 0.5)`.
    UnweightedDuo,
    /// Class prediction from the large model, uncertainty from the Duo.
    UqOnlyDuo(DuoWeights),
    /// Large model alone with its logits multiplied by a scale.
    SingleScaled(f64),
}

impl AggregationMode {
    pub fn tag(&self) -> &'static str {
        match self {
            AggregationMode::WeightedDuo(_) => "weighted",
            AggregationMode::UnweightedDuo => "unweighted",
            AggregationMode::UqOnlyDuo(_) => "uq_only",
            AggregationMode::SingleScaled(_) => "single",
        }
    }

    pub fn uses_small(&self) -> bool {
        !matches!(self, AggregationMode::SingleScaled(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMeasure {
    #[default]
    SoftmaxResponse,
    Entropy,
}

impl UncertaintyMeasure {
    pub fn tag(&self) -> &'static str {
        match self {
            UncertaintyMeasure::SoftmaxResponse => "softmax",
            UncertaintyMeasure::Entropy => "entropy",
        }
    }
}

impl fmt::Display for UncertaintyMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for UncertaintyMeasure {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "softmax" | "softmax_response" => Ok(UncertaintyMeasure::SoftmaxResponse),
            "entropy" => Ok(UncertaintyMeasure::Entropy),
            other => Err(format!(
                "unknown measure {other:?} (expected softmax|entropy)"
            )),
        }
    }
}

/// Per-sample predictions and uncertainties, the input to every metric.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPredictions {
    pub pred: Vec<u32>,
    /// `1 - uncertainty`, in `[0, 1]`.
    pub confidence: Vec<f64>,
    pub uncertainty: Vec<f64>,
    pub correct: Vec<bool>,
}

impl ScoredPredictions {
    pub fn len(&self) -> usize {
        self.pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred.is_empty()
    }

    /// Builds predictions from raw uncertainties, e.g. for metric tests.
    pub fn from_uncertainty(uncertainty: Vec<f64>, correct: Vec<bool>) -> Self {
        assert_eq!(uncertainty.len(), correct.len());
        ScoredPredictions {
            pred: vec![0; correct.len()],
            confidence: uncertainty.iter().map(|u| 1.0 - u).collect(),
            uncertainty,
            correct,
        }
    }
}

/// `t_large * a + t_small * b`, elementwise.
pub fn combine_logits(pair: &BundlePair, w: DuoWeights) -> Array2<f64> {
    let mut out = Array2::zeros(pair.large().logits().dim());
    Zip::from(&mut out)
        .and(pair.large().logits())
        .and(pair.small().logits())
        .for_each(|z, &a, &b| *z = w.t_large * f64::from(a) + w.t_small * f64::from(b));
    out
}

/// Deep-ensemble baseline: the mean of the members' logits.
pub fn ensemble_average(members: &[LogitBundle]) -> Result<Array2<f64>> {
    let first = members.first().ok_or(Error::Empty("ensemble members"))?;
    let mut sum = Array2::<f64>::zeros(first.logits().dim());
    for (i, m) in members.iter().enumerate() {
        if m.logits().dim() != first.logits().dim() {
            return Err(Error::ShapeMismatch(format!(
                "member {i} is {:?}, member 0 is {:?}",
                m.logits().dim(),
                first.logits().dim()
            )));
        }
        if m.labels() != first.labels() {
            return Err(Error::ShapeMismatch(format!(
                "member {i} labels differ from member 0"
            )));
        }
        Zip::from(&mut sum)
            .and(m.logits())
            .for_each(|s, &v| *s += f64::from(v));
    }
    let m = members.len() as f64;
    sum.mapv_inplace(|s| s / m);
    Ok(sum)
}

/// Softmax with max subtraction.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    softmax_into(z.iter().copied(), &mut out);
    out
}

pub(crate) fn softmax_into(z: impl Iterator<Item = f64> + Clone, out: &mut [f64]) {
    let max = z.clone().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn softmax_row(row: ArrayView1<'_, f64>, out: &mut [f64]) {
    softmax_into(row.iter().copied(), out)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<I: IntoIterator<Item = f64>>(values: I) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Entropy of `p` divided by `ln K`, so it lies in `[0, 1]`.
pub fn normalized_entropy(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum();
    (h / (p.len() as f64).ln()).clamp(0.0, 1.0)
}

fn uncertainty_of(probs: &[f64], class: usize, measure: UncertaintyMeasure) -> f64 {
    match measure {
        UncertaintyMeasure::SoftmaxResponse => 1.0 - probs[class],
        UncertaintyMeasure::Entropy => normalized_entropy(probs),
    }
}

/// Scores a logit matrix: argmax prediction plus uncertainty under `measure`.
pub fn score(z: &Array2<f64>, labels: &[u32], measure: UncertaintyMeasure) -> ScoredPredictions {
    score_with_predictions(z, None, labels, measure)
}

/// Like [`score`], but with class predictions taken from `pred_from` when given.
fn score_with_predictions(
    z: &Array2<f64>,
    pred_from: Option<&Array2<f32>>,
    labels: &[u32],
    measure: UncertaintyMeasure,
) -> ScoredPredictions {
    let (n, k) = z.dim();
    assert_eq!(labels.len(), n, "labels/logits length mismatch");
    let mut probs = vec![0.0; k];
    let mut sp = ScoredPredictions {
        pred: Vec::with_capacity(n),
        confidence: Vec::with_capacity(n),
        uncertainty: Vec::with_capacity(n),
        correct: Vec::with_capacity(n),
    };
    for (i, row) in z.rows().into_iter().enumerate() {
        softmax_row(row, &mut probs);
        let pred = match pred_from {
            Some(other) => argmax(other.row(i).iter().map(|&v| f64::from(v))),
            None => argmax(row.iter().copied()),
        };
        let unc = uncertainty_of(&probs, pred, measure);
        sp.pred.push(pred as u32);
        sp.uncertainty.push(unc);
        sp.confidence.push(1.0 - unc);
        sp.correct.push(pred as u32 == labels[i]);
    }
    sp
}

/// The logits whose softmax provides uncertainty for `mode`.
pub fn mode_logits(pair: &BundlePair, mode: AggregationMode) -> Array2<f64> {
    match mode {
        AggregationMode::WeightedDuo(w) | AggregationMode::UqOnlyDuo(w) => combine_logits(pair, w),
        AggregationMode::UnweightedDuo => combine_logits(pair, DuoWeights::UNWEIGHTED),
        AggregationMode::SingleScaled(s) => scaled_logits(pair.large(), s),
    }
}

pub fn scaled_logits(bundle: &LogitBundle, scale: f64) -> Array2<f64> {
    bundle.logits().mapv(|v| scale * f64::from(v))
}

/// Scores a pair under an aggregation mode.
///
/// `UqOnlyDuo` under the entropy measure uses the entropy of the Duo
/// distribution; under softmax response it reads the Duo probability of the
/// large model's predicted class.
pub fn score_duo(
    pair: &BundlePair,
    mode: AggregationMode,
    measure: UncertaintyMeasure,
) -> ScoredPredictions {
    let z = mode_logits(pair, mode);
    match mode {
        AggregationMode::UqOnlyDuo(_) => {
            score_with_predictions(&z, Some(pair.large().logits()), pair.labels(), measure)
        }
        _ => score(&z, pair.labels(), measure),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logit_store::tests::meta;
    use crate::logit_store::Split;
    use ndarray::array;
    use proptest::prelude::*;

    fn bundle(name: &str, logits: Array2<f32>, labels: Vec<u32>, flops: f64) -> LogitBundle {
        let (n, k) = logits.dim();
        LogitBundle::new(meta(name, Split::Test, n, k, flops), logits, labels).unwrap()
    }

    fn random_pair(seed: u64, n: usize, k: usize) -> BundlePair {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
        let a = Array2::from_shape_fn((n, k), |_| rng.random_range(-4.0f32..4.0));
        let b = Array2::from_shape_fn((n, k), |_| rng.random_range(-4.0f32..4.0));
        BundlePair::new(
            bundle("l", a, labels.clone(), 2.0),
            bundle("s", b, labels, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn combine_examples() {
        let pair = BundlePair::new(
            bundle("l", array![[2.0, 0.0]], vec![0], 2.0),
            bundle("s", array![[0.0, 2.0]], vec![0], 1.0),
        )
        .unwrap();
        let z = combine_logits(&pair, DuoWeights::new(0.75, 0.25).unwrap());
        assert_eq!(z, array![[1.5, 0.5]]);
        let z = combine_logits(&pair, DuoWeights::new(1.0, 0.0).unwrap());
        assert_eq!(z, array![[2.0, 0.0]]);
        let z = combine_logits(&pair, DuoWeights::UNWEIGHTED);
        assert_eq!(z, array![[1.0, 1.0]]);
    }

    #[test]
    fn ensemble_examples() {
        let a = bundle("a", array![[2.0, 0.0]], vec![0], 1.0);
        let b = bundle("b", array![[0.0, 2.0]], vec![0], 1.0);
        assert_eq!(
            ensemble_average(&[a.clone(), b]).unwrap(),
            array![[1.0, 1.0]]
        );
        assert_eq!(
            ensemble_average(&[a.clone(), a.clone()]).unwrap(),
            array![[2.0, 0.0]]
        );
        assert_eq!(
            ensemble_average(std::slice::from_ref(&a)).unwrap(),
            array![[2.0, 0.0]]
        );
        assert!(matches!(ensemble_average(&[]), Err(Error::Empty(_))));
        let c = bundle("c", array![[0.0, 2.0, 1.0]], vec![0], 1.0);
        assert!(matches!(
            ensemble_average(&[a, c]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for q in &p {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[2.0, 0.0, 0.0]);
        let e2 = 2.0f64.exp();
        assert!((p[0] - 0.78699).abs() < 1e-5);
        assert!((p[1] - 0.10650).abs() < 1e-5);
        assert!((p[0] - e2 / (e2 + 2.0)).abs() < 1e-15);
        let p = softmax(&[1000.0, 0.0]);
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn score_examples() {
        let labels = [0u32];
        let sp = score(
            &array![[0.0, 0.0, 0.0]],
            &labels,
            UncertaintyMeasure::SoftmaxResponse,
        );
        assert!((sp.uncertainty[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(sp.pred[0], 0);
        assert!(sp.correct[0]);

        let sp = score(
            &array![[2.0, 0.0, 0.0]],
            &labels,
            UncertaintyMeasure::SoftmaxResponse,
        );
        assert!((sp.uncertainty[0] - 0.21301).abs() < 1e-5);

        let sp = score(&array![[0.0, 0.0]], &labels, UncertaintyMeasure::Entropy);
        assert!((sp.uncertainty[0] - 1.0).abs() < 1e-15);
        assert!((sp.confidence[0]).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let sp = score(
            &array![[0.0, 3.0, 3.0], [1.0, 1.0, 0.0]],
            &[2, 0],
            UncertaintyMeasure::SoftmaxResponse,
        );
        assert_eq!(sp.pred, vec![1, 0]);
        assert_eq!(sp.correct, vec![false, true]);
    }

    #[test]
    fn mode_identities() {
        let pair = random_pair(3, 200, 7);
        for measure in [
            UncertaintyMeasure::SoftmaxResponse,
            UncertaintyMeasure::Entropy,
        ] {
            let single = score_duo(&pair, AggregationMode::SingleScaled(1.0), measure);
            let revert = score_duo(
                &pair,
                AggregationMode::WeightedDuo(DuoWeights::new(1.0, 0.0).unwrap()),
                measure,
            );
            assert_eq!(single, revert);

            let w = DuoWeights::new(0.8, 0.3).unwrap();
            let uq = score_duo(&pair, AggregationMode::UqOnlyDuo(w), measure);
            assert_eq!(uq.pred, single.pred);
            assert_eq!(uq.correct, single.correct);

            let unweighted = score_duo(&pair, AggregationMode::UnweightedDuo, measure);
            let half = score_duo(
                &pair,
                AggregationMode::WeightedDuo(DuoWeights::UNWEIGHTED),
                measure,
            );
            assert_eq!(unweighted, half);

            let t = 2.5;
            let a = score_duo(
                &pair,
                AggregationMode::WeightedDuo(DuoWeights::new(t, 0.0).unwrap()),
                measure,
            );
            let b = score_duo(&pair, AggregationMode::SingleScaled(t), measure);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn uq_only_reads_duo_probability_at_large_prediction() {
        let pair = BundlePair::new(
            bundle("l", array![[1.0, 0.0]], vec![0], 2.0),
            bundle("s", array![[0.0, 3.0]], vec![0], 1.0),
        )
        .unwrap();
        let w = DuoWeights::new(1.0, 1.0).unwrap();
        let sp = score_duo(
            &pair,
            AggregationMode::UqOnlyDuo(w),
            UncertaintyMeasure::SoftmaxResponse,
        );
        assert_eq!(sp.pred, vec![0]);
        let p = softmax(&[1.0, 3.0]);
        assert!((sp.uncertainty[0] - (1.0 - p[0])).abs() < 1e-15);
    }

    #[test]
    fn identical_members_keep_predictions() {
        let pair = random_pair(5, 100, 5);
        let twin = BundlePair::new(pair.large().clone(), {
            let mut m = pair.large().meta().clone();
            m.model_name = "twin".into();
            LogitBundle::new(m, pair.large().logits().clone(), pair.labels().to_vec()).unwrap()
        })
        .unwrap();
        let duo = score_duo(
            &twin,
            AggregationMode::UnweightedDuo,
            UncertaintyMeasure::SoftmaxResponse,
        );
        let single = score_duo(
            &twin,
            AggregationMode::SingleScaled(1.0),
            UncertaintyMeasure::SoftmaxResponse,
        );
        assert_eq!(duo.pred, single.pred);
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_positive_scaling(
            rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 2..12), 1..30),
            c in 1e-3f64..1e3,
        ) {
            let k = rows[0].len();
            let rows: Vec<Vec<f64>> = rows.into_iter().filter(|r| r.len() == k).collect();
            let n = rows.len();
            let z = Array2::from_shape_vec((n, k), rows.concat()).unwrap();
            let labels = vec![0u32; n];
            let a = score(&z, &labels, UncertaintyMeasure::SoftmaxResponse);
            let b = score(&z.mapv(|v| v * c), &labels, UncertaintyMeasure::SoftmaxResponse);
            // scaling can create or break exact ties only through rounding
            for i in 0..n {
                let row = z.row(i);
                let top = row[a.pred[i] as usize];
                let runner = row.iter().enumerate()
                    .filter(|&(j, _)| j != a.pred[i] as usize)
                    .map(|(_, &v)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if top - runner > 1e-9 * top.abs().max(1.0) {
                    prop_assert_eq!(a.pred[i], b.pred[i]);
                }
            }
        }

        #[test]
        fn uncertainty_ranges(
            row in prop::collection::vec(-30.0f64..30.0, 2..20),
        ) {
            let k = row.len();
            let z = Array2::from_shape_vec((1, k), row).unwrap();
            let sr = score(&z, &[0], UncertaintyMeasure::SoftmaxResponse);
            let en = score(&z, &[0], UncertaintyMeasure::Entropy);
            prop_assert!(sr.uncertainty[0] >= 0.0);
            prop_assert!(sr.uncertainty[0] <= 1.0 - 1.0 / k as f64 + 1e-12);
            prop_assert!((0.0..=1.0).contains(&en.uncertainty[0]));
            let p = softmax(z.row(0).as_slice().unwrap());
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&q| q >= 0.0));
        }
    }
}
