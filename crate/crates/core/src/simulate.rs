//! Synthetic asymmetric classifier pairs.
//!
//! Every sample draws a true label uniformly, then for each member decides a
//! "correct event": a shared uniform `u` is used with probability `rho`,
//! otherwise a member-specific uniform `v`, and the event fires when that
//! uniform is below the member's target accuracy. The intended class is the
//! true label on a correct event and a uniformly random wrong class otherwise.
//! Logits are `c * (noise * N(0, 1) + m * [class == intended])`.
//!
//! The margin `m = margin * (1 - (1 - margin_floor) * draw)` shrinks with the
//! uniform that decided the correct event, so a member is more confident on
//! the samples it finds easy and least confident on its mistakes. Without
//! this (`margin_floor = 1`) confidence is independent of correctness and
//! neither temperature scaling nor a second member can exploit it.
//!
//! Measured accuracy tracks the target up to the probability that noise
//! overturns the margin, which is negligible at the defaults (margin 5,
//! noise 0.5) even for K = 100.
//!
//! # Random stream
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64(seed)`),
//! whose output is fixed by its algorithm rather than by the platform. The
//! validation split is drawn first, then the test split. Per sample the draws
//! are, in order: label; shared uniform; then for the large and then the
//! small member: selector uniform, own uniform, wrong-class index, and `K`
//! standard normals. Every draw happens regardless of outcome, so the stream
//! stays aligned across parameter changes that do not alter `K`.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logit_store::{BundlePair, LogitBundle, ModelMeta, Split};

pub const LARGE_FLOPS: f64 = 1.0;

fn default_margin() -> f64 {
    5.0
}
fn default_margin_floor() -> f64 {
    0.4
}
fn default_noise() -> f64 {
    0.5
}
fn default_one() -> f64 {
    1.0
}
fn default_dataset() -> String {
    "synthetic".into()
}
fn default_large_name() -> String {
    "sim-large".into()
}
fn default_small_name() -> String {
    "sim-small".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub num_classes: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub acc_large: f64,
    pub acc_small: f64,
    /// Probability that a member's correct event reuses the shared uniform.
    pub error_correlation: f64,
    /// Shift added to the intended class, in logit units before inflation.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Fraction of `margin` kept at the hardest draw; 1 makes the margin constant.
    #[serde(default = "default_margin_floor")]
    pub margin_floor: f64,
    /// Standard deviation of the per-class Gaussian noise, before inflation.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_one")]
    pub inflation_large: f64,
    #[serde(default = "default_one")]
    pub inflation_small: f64,
    /// Nominal FLOPs(small) / FLOPs(large) written into the metadata.
    #[serde(default = "default_one")]
    pub balance: f64,
    pub seed: u64,
    #[serde(default = "default_dataset")]
    pub dataset: String,
    #[serde(default = "default_large_name")]
    pub large_model: String,
    #[serde(default = "default_small_name")]
    pub small_model: String,
}

impl SimSpec {
    /// A spec with default margin, noise, inflation and balance.
    pub fn new(
        num_classes: usize,
        n_val: usize,
        n_test: usize,
        acc_large: f64,
        acc_small: f64,
        error_correlation: f64,
        seed: u64,
    ) -> Self {
        SimSpec {
            num_classes,
            n_val,
            n_test,
            acc_large,
            acc_small,
            error_correlation,
            margin: default_margin(),
            margin_floor: default_margin_floor(),
            noise: default_noise(),
            inflation_large: 1.0,
            inflation_small: 1.0,
            balance: 1.0,
            seed,
            dataset: default_dataset(),
            large_model: default_large_name(),
            small_model: default_small_name(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSimSpec(msg));
        let k = self.num_classes;
        if k < 2 {
            return bad(format!("num_classes must be >= 2, got {k}"));
        }
        if self.n_val == 0 || self.n_test == 0 {
            return bad("n_val and n_test must be positive".into());
        }
        let chance = 1.0 / k as f64;
        for (name, acc) in [("acc_large", self.acc_large), ("acc_small", self.acc_small)] {
            if !(acc > chance && acc < 1.0) {
                return bad(format!(
                    "{name} must lie in (1/K, 1) = ({chance}, 1), got {acc}"
                ));
            }
        }
        if self.acc_large < self.acc_small {
            return bad("acc_large must be >= acc_small".into());
        }
        if !(0.0..=1.0).contains(&self.error_correlation) {
            return bad(format!(
                "error_correlation must lie in [0, 1], got {}",
                self.error_correlation
            ));
        }
        if !(self.margin_floor > 0.0 && self.margin_floor <= 1.0) {
            return bad(format!(
                "margin_floor must lie in (0, 1], got {}",
                self.margin_floor
            ));
        }
        for (name, v) in [
            ("margin", self.margin),
            ("noise", self.noise),
            ("inflation_large", self.inflation_large),
            ("inflation_small", self.inflation_small),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be finite and positive, got {v}"));
            }
        }
        // balance 0 is reserved for the single-model row of a sweep
        if !(self.balance.is_finite() && self.balance > 0.0 && self.balance <= 1.0) {
            return bad(format!("balance must lie in (0, 1], got {}", self.balance));
        }
        Ok(())
    }

    /// Nominal `(flops_large, flops_small)`.
    pub fn flops(&self) -> (f64, f64) {
        (LARGE_FLOPS, self.balance * LARGE_FLOPS)
    }
}

/// One-paragraph summary of a spec, including the FLOPs metadata it implies.
pub fn describe(spec: &SimSpec) -> Result<String> {
    spec.validate()?;
    let (fl, fs) = spec.flops();
    Ok(format!(
        "synthetic pair on {dataset:?}: K={k}, n_val={nv}, n_test={nt}, seed={seed}\n\
         large {ln:?}: target accuracy {al}, inflation {cl}, flops {fl}\n\
         small {sn:?}: target accuracy {as_}, inflation {cs}, flops {fs}\n\
         error correlation {rho}, margin {m} (floor {mf}), noise {s}, balance {b}",
        dataset = spec.dataset,
        k = spec.num_classes,
        nv = spec.n_val,
        nt = spec.n_test,
        seed = spec.seed,
        ln = spec.large_model,
        al = spec.acc_large,
        cl = spec.inflation_large,
        sn = spec.small_model,
        as_ = spec.acc_small,
        cs = spec.inflation_small,
        mf = spec.margin_floor,
        rho = spec.error_correlation,
        m = spec.margin,
        s = spec.noise,
        b = spec.balance,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub val: BundlePair,
    pub test: BundlePair,
}

struct Member {
    acc: f64,
    inflation: f64,
}

pub fn generate(spec: &SimSpec) -> Result<SimOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let val = draw_pair(spec, Split::Val, spec.n_val, &mut rng)?;
    let test = draw_pair(spec, Split::Test, spec.n_test, &mut rng)?;
    Ok(SimOutput { val, test })
}

fn draw_pair(spec: &SimSpec, split: Split, n: usize, rng: &mut ChaCha8Rng) -> Result<BundlePair> {
    let k = spec.num_classes;
    let members = [
        Member {
            acc: spec.acc_large,
            inflation: spec.inflation_large,
        },
        Member {
            acc: spec.acc_small,
            inflation: spec.inflation_small,
        },
    ];
    let mut logits = [Array2::<f32>::zeros((n, k)), Array2::<f32>::zeros((n, k))];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = rng.random_range(0..k);
        let shared: f64 = rng.random();
        labels.push(y as u32);
        for (m, member) in members.iter().enumerate() {
            let use_shared = rng.random::<f64>() < spec.error_correlation;
            let own: f64 = rng.random();
            let wrong = rng.random_range(0..k - 1);
            let draw = if use_shared { shared } else { own };
            let intended = if draw < member.acc {
                y
            } else if wrong >= y {
                wrong + 1
            } else {
                wrong
            };
            // the draw doubles as sample difficulty: low draws are easy and confident
            let margin = spec.margin * (1.0 - (1.0 - spec.margin_floor) * draw);
            let mut row = logits[m].row_mut(i);
            for (c, z) in row.iter_mut().enumerate() {
                let eps: f64 = rng.sample(StandardNormal);
                let shift = if c == intended { margin } else { 0.0 };
                *z = (member.inflation * (spec.noise * eps + shift)) as f32;
            }
        }
    }
    let (fl, fs) = spec.flops();
    let [large_logits, small_logits] = logits;
    let large = LogitBundle::new(
        sim_meta(spec, &spec.large_model, split, n, fl),
        large_logits,
        labels.clone(),
    )?;
    let small = LogitBundle::new(
        sim_meta(spec, &spec.small_model, split, n, fs),
        small_logits,
        labels,
    )?;
    BundlePair::new(large, small)
}

fn sim_meta(spec: &SimSpec, name: &str, split: Split, n: usize, flops: f64) -> ModelMeta {
    let mut extra = BTreeMap::new();
    extra.insert(
        "simulator".to_string(),
        serde_json::to_value(spec).expect("spec serializes"),
    );
    ModelMeta {
        model_name: name.to_string(),
        dataset: spec.dataset.clone(),
        split,
        num_classes: spec.num_classes,
        num_samples: n,
        flops,
        params: 0,
        extra,
    }
}
