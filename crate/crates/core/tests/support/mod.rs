//! Independent oracles shared by the integration tests. Nothing here calls
//! into the implementation paths it is used to check.

#![allow(dead_code)]

use duo_core::{BundlePair, LogitBundle, ModelMeta, Split};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fraction of (incorrect, correct) pairs where the incorrect sample is more
/// uncertain, ties counting 1/2. O(N^2).
pub fn pairwise_auroc(unc: &[f64], correct: &[bool]) -> Option<f64> {
    let mut credit2 = 0u64;
    let mut pairs = 0u64;
    for (i, &ci) in correct.iter().enumerate() {
        if ci {
            continue;
        }
        for (j, &cj) in correct.iter().enumerate() {
            if !cj {
                continue;
            }
            pairs += 1;
            if unc[i] > unc[j] {
                credit2 += 2;
            } else if unc[i] == unc[j] {
                credit2 += 1;
            }
        }
    }
    (pairs > 0).then(|| credit2 as f64 / (2.0 * pairs as f64))
}

/// Position of each sample when ordered by (uncertainty, index), by counting.
fn brute_ranks(unc: &[f64]) -> Vec<usize> {
    (0..unc.len())
        .map(|i| {
            (0..unc.len())
                .filter(|&j| unc[j] < unc[i] || (unc[j] == unc[i] && j < i))
                .count()
        })
        .collect()
}

/// Risk at each coverage i/N, enumerating the covered set for every i.
pub fn brute_risks(unc: &[f64], correct: &[bool]) -> Vec<f64> {
    let ranks = brute_ranks(unc);
    let n = unc.len();
    let mut by_rank = vec![false; n];
    for (s, &r) in ranks.iter().enumerate() {
        by_rank[r] = correct[s];
    }
    (1..=n)
        .map(|i| {
            let errors = by_rank[..i].iter().filter(|&&c| !c).count();
            errors as f64 / i as f64
        })
        .collect()
}

pub fn brute_aurc(unc: &[f64], correct: &[bool]) -> f64 {
    let risks = brute_risks(unc, correct);
    risks.iter().sum::<f64>() / risks.len() as f64
}

/// Largest i/N whose covered set has accuracy >= target, else 0.
pub fn brute_sac(unc: &[f64], correct: &[bool], target: f64) -> f64 {
    let ranks = brute_ranks(unc);
    let n = unc.len();
    let mut best = 0.0;
    for i in 1..=n {
        let hits = (0..n).filter(|&s| ranks[s] < i && correct[s]).count();
        if hits as f64 / i as f64 >= target {
            best = i as f64 / n as f64;
        }
    }
    best
}

/// Mean NLL of `scale * logits`, straight from the definition.
pub fn scaled_nll(logits: &Array2<f32>, labels: &[u32], scale: f64) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let z: Vec<f64> = row.iter().map(|&v| scale * f64::from(v)).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y as usize];
    }
    total / labels.len() as f64
}

/// Minimum of `scaled_nll` over scales in [0.01, 100]: a 401-point log grid
/// followed by golden-section refinement inside the best grid bracket.
pub fn scan_best_scale(logits: &Array2<f32>, labels: &[u32]) -> (f64, f64) {
    let f = |s: f64| scaled_nll(logits, labels, s);
    let points = 401;
    let (lo, hi) = (0.01f64.ln(), 100f64.ln());
    let grid: Vec<f64> = (0..points)
        .map(|i| (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp())
        .collect();
    let vals: Vec<f64> = grid.iter().map(|&s| f(s)).collect();
    let best = (0..points)
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .unwrap();
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(points - 1)];
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-12 * b.abs().max(1.0) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let s = (a + b) / 2.0;
    let v = f(s).min(vals[best]);
    (s, v)
}

/// Duo NLL straight from the definition.
pub fn duo_nll_direct(pair: &BundlePair, t_large: f64, t_small: f64) -> f64 {
    let a = pair.large().logits();
    let b = pair.small().logits();
    let mut total = 0.0;
    for i in 0..pair.num_samples() {
        let z: Vec<f64> = (0..pair.num_classes())
            .map(|c| t_large * f64::from(a[[i, c]]) + t_small * f64::from(b[[i, c]]))
            .collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[pair.labels()[i] as usize];
    }
    total / pair.num_samples() as f64
}

pub fn meta(name: &str, split: Split, n: usize, k: usize, flops: f64) -> ModelMeta {
    ModelMeta {
        model_name: name.into(),
        dataset: "random".into(),
        split,
        num_classes: k,
        num_samples: n,
        flops,
        params: 0,
        extra: Default::default(),
    }
}

/// A pair with Gaussian logits; the large member gets a label-aligned shift.
pub fn random_pair(rng: &mut ChaCha8Rng, n: usize, k: usize, split: Split) -> BundlePair {
    let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
    let shift_large = rng.random_range(0.0..3.0f32);
    let shift_small = rng.random_range(0.0..2.0f32);
    let mut draw = |shift: f32| {
        Array2::from_shape_fn((n, k), |(i, c)| {
            let g: f32 = rng.sample(rand_distr::StandardNormal);
            g * 1.5 + if labels[i] as usize == c { shift } else { 0.0 }
        })
    };
    let a = draw(shift_large);
    let b = draw(shift_small);
    BundlePair::new(
        LogitBundle::new(meta("large", split, n, k, 2.0), a, labels.clone()).unwrap(),
        LogitBundle::new(meta("small", split, n, k, 1.0), b, labels).unwrap(),
    )
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Prints one criterion line and fails the test when `pass` is false.
pub fn report(name: &str, pass: bool, detail: impl std::fmt::Display) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "acceptance criterion failed: {name}: {detail}");
}
