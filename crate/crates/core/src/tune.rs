//! Temperature fitting by validation negative log likelihood.
//!
//! The Duo objective `L(t_large, t_small) = mean_i [lse(z_i) - z_i[y_i]]` with
//! `z_i = t_large * a_i + t_small * b_i` is a log-sum-exp of a linear map, so it
//! is convex in the two weights. A damped Newton method with projection onto
//! the non-negative orthant finds the global minimum in a handful of steps;
//! single-model temperature scaling is the same problem in one dimension.
//!
//! Weights are multiplicative: a classical temperature `T` corresponds to a
//! scale of `1 / T`.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::aggregate::DuoWeights;
use crate::error::{Error, Result};
use crate::logit_store::{BundlePair, LogitBundle, Split};

pub const MAX_ITERATIONS: usize = 500;
pub const NLL_TOLERANCE: f64 = 1e-10;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
const MAX_HALVINGS: usize = 60;
const ARMIJO: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    #[serde(flatten)]
    pub weights: DuoWeights,
    pub val_nll: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFit {
    pub scale: f64,
    pub val_nll: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn log_sum_exp(row: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
    max + row.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean negative log likelihood (natural log) of `labels` under `softmax(z)`.
pub fn nll(z: &Array2<f64>, labels: &[u32]) -> f64 {
    assert_eq!(z.nrows(), labels.len());
    let total: f64 = z
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row.iter().copied()) - row[y as usize])
        .sum();
    total / labels.len() as f64
}

/// Value, gradient and Hessian of the mean NLL of `softmax(sum_j x_j * member_j)`.
struct LinearNll<'a, const D: usize> {
    members: [&'a Array2<f64>; D],
    labels: &'a [u32],
}

impl<const D: usize> LinearNll<'_, D> {
    #[allow(clippy::needless_range_loop)]
    fn eval(&self, x: &[f64; D]) -> (f64, [f64; D], [[f64; D]; D]) {
        let (n, k) = self.members[0].dim();
        let mut z = vec![0.0; k];
        let mut p = vec![0.0; k];
        let mut value = 0.0;
        let mut grad = [0.0; D];
        let mut hess = [[0.0; D]; D];
        for i in 0..n {
            let rows: [ArrayView1<'_, f64>; D] = std::array::from_fn(|j| self.members[j].row(i));
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = (0..D).map(|j| x[j] * rows[j][c]).sum();
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (pc, &zc) in p.iter_mut().zip(&z) {
                *pc = (zc - max).exp();
                total += *pc;
            }
            for pc in p.iter_mut() {
                *pc /= total;
            }
            let y = self.labels[i] as usize;
            value += max + total.ln() - z[y];

            let mean: [f64; D] =
                std::array::from_fn(|j| p.iter().zip(rows[j].iter()).map(|(q, v)| q * v).sum());
            for j in 0..D {
                grad[j] += mean[j] - rows[j][y];
                for l in j..D {
                    let cov: f64 = p
                        .iter()
                        .enumerate()
                        .map(|(c, q)| q * (rows[j][c] - mean[j]) * (rows[l][c] - mean[l]))
                        .sum();
                    hess[j][l] += cov;
                }
            }
        }
        let inv = 1.0 / n as f64;
        for j in 0..D {
            grad[j] *= inv;
            for l in j..D {
                hess[j][l] *= inv;
                hess[l][j] = hess[j][l];
            }
        }
        (value * inv, grad, hess)
    }
}

/// Solves `(H + mu I) d = -g` by Cholesky, raising `mu` until it factors.
fn damped_newton_direction<const D: usize>(
    hess: &[[f64; D]; D],
    grad: &[f64; D],
    free: &[bool; D],
) -> [f64; D] {
    let scale = (0..D)
        .map(|j| hess[j][j].abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    let mut mu = 0.0;
    for _ in 0..40 {
        if let Some(d) = cholesky_solve(hess, grad, free, mu) {
            return d;
        }
        mu = if mu == 0.0 {
            1e-12 * scale.max(1.0)
        } else {
            mu * 10.0
        };
    }
    std::array::from_fn(|j| if free[j] { -grad[j] } else { 0.0 })
}

#[allow(clippy::needless_range_loop)]
fn cholesky_solve<const D: usize>(
    hess: &[[f64; D]; D],
    grad: &[f64; D],
    free: &[bool; D],
    mu: f64,
) -> Option<[f64; D]> {
    let idx: Vec<usize> = (0..D).filter(|&j| free[j]).collect();
    let m = idx.len();
    let mut l = [[0.0; D]; D];
    for a in 0..m {
        for b in 0..=a {
            let mut s = hess[idx[a]][idx[b]] + if a == b { mu } else { 0.0 };
            for c in 0..b {
                s -= l[a][c] * l[b][c];
            }
            if a == b {
                // relative pivot floor rejects numerically singular systems
                let diag = hess[idx[a]][idx[a]].abs() + mu;
                if s <= 1e-14 * diag || s <= 0.0 {
                    return None;
                }
                l[a][a] = s.sqrt();
            } else {
                l[a][b] = s / l[b][b];
            }
        }
    }
    let mut y = [0.0; D];
    for a in 0..m {
        let mut s = -grad[idx[a]];
        for c in 0..a {
            s -= l[a][c] * y[c];
        }
        y[a] = s / l[a][a];
    }
    let mut x = [0.0; D];
    for a in (0..m).rev() {
        let mut s = y[a];
        for c in a + 1..m {
            s -= l[c][a] * x[c];
        }
        x[a] = s / l[a][a];
    }
    let mut d = [0.0; D];
    for (a, &j) in idx.iter().enumerate() {
        d[j] = x[a];
    }
    Some(d)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NewtonOutcome<const D: usize> {
    pub x: [f64; D],
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace_monotone: bool,
}

/// Projected damped Newton on `{x >= 0}`.
fn projected_newton<const D: usize>(
    problem: &LinearNll<'_, D>,
    x0: [f64; D],
) -> Result<NewtonOutcome<D>> {
    let mut x = x0;
    let (mut fx, mut g, mut h) = problem.eval(&x);
    if !fx.is_finite() {
        return Err(Error::NonFiniteObjective(x.to_vec()));
    }
    let mut converged = false;
    let mut iterations = 0;
    let mut trace_monotone = true;

    while iterations < MAX_ITERATIONS {
        // a variable pinned at zero with an outward-pointing gradient stays put
        let free: [bool; D] = std::array::from_fn(|j| !(x[j] <= 0.0 && g[j] > 0.0));
        let proj_norm = (0..D)
            .filter(|&j| free[j])
            .map(|j| g[j] * g[j])
            .sum::<f64>()
            .sqrt();
        if proj_norm < GRADIENT_TOLERANCE {
            converged = true;
            break;
        }

        let mut d = damped_newton_direction(&h, &g, &free);
        let slope: f64 = (0..D).map(|j| g[j] * d[j]).sum();
        if slope.is_nan() || slope >= 0.0 {
            d = std::array::from_fn(|j| if free[j] { -g[j] } else { 0.0 });
        }

        iterations += 1;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: [f64; D] = std::array::from_fn(|j| (x[j] + step * d[j]).max(0.0));
            let (ft, gt, ht) = problem.eval(&trial);
            let decrease: f64 = (0..D).map(|j| g[j] * (trial[j] - x[j])).sum();
            if ft.is_finite() && ft <= fx + ARMIJO * decrease && ft <= fx {
                accepted = Some((trial, ft, gt, ht));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn, hn)) = accepted else {
            // no representable decrease along the Newton direction
            converged = true;
            break;
        };
        let delta = fx - fn_;
        trace_monotone &= fn_ <= fx;
        x = xn;
        fx = fn_;
        g = gn;
        h = hn;
        // near the optimum the gradient floor is set by f64 resolution of the
        // NLL, so the objective change is the reliable stopping signal
        if delta.abs() < NLL_TOLERANCE {
            converged = true;
            break;
        }
    }

    Ok(NewtonOutcome {
        x,
        value: fx,
        iterations,
        converged,
        trace_monotone,
    })
}

/// Analytic gradient of the Duo NLL with respect to `(t_large, t_small)`.
pub fn nll_gradient(pair: &BundlePair, w: DuoWeights) -> (f64, f64) {
    let a = pair.large().logits_f64();
    let b = pair.small().logits_f64();
    let problem = LinearNll {
        members: [&a, &b],
        labels: pair.labels(),
    };
    let (_, g, _) = problem.eval(&[w.t_large, w.t_small]);
    (g[0], g[1])
}

/// Duo NLL at the given weights.
pub fn duo_nll(pair: &BundlePair, w: DuoWeights) -> f64 {
    nll(&crate::aggregate::combine_logits(pair, w), pair.labels())
}

/// Fits `(t_large, t_small) >= 0` minimizing validation NLL, starting at `(1, 1)`.
///
/// Refuses test-split input.
pub fn fit_duo_temperatures(pair_val: &BundlePair) -> Result<TuneResult> {
    pair_val.large().require_split(Split::Val)?;
    let a = pair_val.large().logits_f64();
    let b = pair_val.small().logits_f64();
    let problem = LinearNll {
        members: [&a, &b],
        labels: pair_val.labels(),
    };
    let out = projected_newton(&problem, [1.0, 1.0])?;
    debug_assert!(out.trace_monotone);
    let weights = DuoWeights::new(out.x[0], out.x[1]).map_err(|_| {
        Error::InvalidWeights(
            "NLL is minimized at zero weights: neither member beats a uniform prediction".into(),
        )
    })?;
    Ok(TuneResult {
        weights,
        val_nll: out.value,
        iterations: out.iterations,
        converged: out.converged,
    })
}

/// Temperature scaling: the scale `s >= 0` minimizing validation NLL of `s * logits`.
pub fn fit_single_temperature(bundle_val: &LogitBundle) -> Result<ScaleFit> {
    bundle_val.require_split(Split::Val)?;
    fit_scale(&bundle_val.logits_f64(), bundle_val.labels())
}

pub(crate) fn fit_scale(logits: &Array2<f64>, labels: &[u32]) -> Result<ScaleFit> {
    let problem = LinearNll {
        members: [logits],
        labels,
    };
    let out = projected_newton(&problem, [1.0])?;
    Ok(ScaleFit {
        scale: out.x[0],
        val_nll: out.value,
        iterations: out.iterations,
        converged: out.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logit_store::tests::meta;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn bundle(
        name: &str,
        split: Split,
        logits: Array2<f32>,
        labels: Vec<u32>,
        flops: f64,
    ) -> LogitBundle {
        let (n, k) = logits.dim();
        LogitBundle::new(meta(name, split, n, k, flops), logits, labels).unwrap()
    }

    fn random_pair(seed: u64, n: usize, k: usize, zero_small: bool) -> BundlePair {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
        let a = Array2::from_shape_fn((n, k), |(i, c)| {
            rng.random_range(-2.0f32..2.0) + if c as u32 == labels[i] { 1.5 } else { 0.0 }
        });
        let b = if zero_small {
            Array2::zeros((n, k))
        } else {
            Array2::from_shape_fn((n, k), |(i, c)| {
                rng.random_range(-2.0f32..2.0) + if c as u32 == labels[i] { 0.8 } else { 0.0 }
            })
        };
        BundlePair::new(
            bundle("l", Split::Val, a, labels.clone(), 2.0),
            bundle("s", Split::Val, b, labels, 1.0),
        )
        .unwrap()
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn nll_examples() {
        assert!((nll(&array![[0.0, 0.0]], &[0]) - 0.69315).abs() < 1e-5);
        assert!((nll(&array![[0.0, 0.0]], &[0]) - 2f64.ln()).abs() < 1e-15);
        let e2 = 2f64.exp();
        let v = nll(&array![[2.0, 0.0, 0.0]], &[0]);
        assert!((v - 0.23954).abs() < 1e-5);
        assert!((v + (e2 / (e2 + 2.0)).ln()).abs() < 1e-14);
        let v1 = nll(&array![[2.0, 0.0, 0.0]], &[1]);
        assert!((v1 - 2.23954).abs() < 1e-5);
        assert!((v1 - v - 2.0).abs() < 1e-14);
        assert!(nll(&array![[1000.0, 0.0]], &[1]).is_finite());
    }

    #[test]
    fn flat_direction_has_zero_gradient() {
        let pair = random_pair(1, 300, 6, true);
        for w in [(1.0, 1.0), (0.3, 2.0), (4.0, 0.0)] {
            let (_, gs) = nll_gradient(&pair, DuoWeights::new(w.0, w.1).unwrap());
            assert_eq!(gs, 0.0);
        }
    }

    #[test]
    fn identical_members_have_equal_gradients() {
        let pair = random_pair(2, 200, 5, false);
        let twin = BundlePair::new(pair.large().clone(), {
            let mut m = pair.large().meta().clone();
            m.model_name = "twin".into();
            LogitBundle::new(m, pair.large().logits().clone(), pair.labels().to_vec()).unwrap()
        })
        .unwrap();
        for t in [0.2, 1.0, 3.0] {
            let (gl, gs) = nll_gradient(&twin, DuoWeights::new(t, t).unwrap());
            assert_eq!(gl, gs);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let pair = random_pair(3, 400, 8, false);
        let w = DuoWeights::new(0.7, 0.4).unwrap();
        let (gl, gs) = nll_gradient(&pair, w);
        let h = 1e-5;
        let f = |tl: f64, ts: f64| {
            duo_nll(
                &pair,
                DuoWeights {
                    t_large: tl,
                    t_small: ts,
                },
            )
        };
        let fl = (f(w.t_large + h, w.t_small) - f(w.t_large - h, w.t_small)) / (2.0 * h);
        let fs = (f(w.t_large, w.t_small + h) - f(w.t_large, w.t_small - h)) / (2.0 * h);
        assert!((fl - gl).abs() <= 1e-4 * gl.abs().max(fl.abs()).max(1e-6));
        assert!((fs - gs).abs() <= 1e-4 * gs.abs().max(fs.abs()).max(1e-6));
    }

    #[test]
    fn fit_is_stationary_and_deterministic() {
        let pair = random_pair(4, 500, 10, false);
        let a = fit_duo_temperatures(&pair).unwrap();
        let b = fit_duo_temperatures(&pair).unwrap();
        assert_eq!(a, b);
        assert!(a.converged);
        let (gl, gs) = nll_gradient(&pair, a.weights);
        for (t, g) in [(a.weights.t_large, gl), (a.weights.t_small, gs)] {
            // KKT: zero gradient in the interior, non-negative at the bound
            if t > 0.0 {
                assert!(g.abs() < 1e-6, "g = {g}");
            } else {
                assert!(g >= -1e-6);
            }
        }
        let start = duo_nll(&pair, DuoWeights::new(1.0, 1.0).unwrap());
        assert!(a.val_nll <= start + 1e-12);
        assert!((a.val_nll - duo_nll(&pair, a.weights)).abs() < 1e-12);
    }

    #[test]
    fn useless_sidekick_reverts_to_scaled_large() {
        let pair = random_pair(5, 400, 5, true);
        let duo = fit_duo_temperatures(&pair).unwrap();
        let single = fit_single_temperature(pair.large()).unwrap();
        assert!((duo.val_nll - single.val_nll).abs() < 1e-6);
    }

    #[test]
    fn refuses_test_split() {
        let val = random_pair(6, 20, 3, false);
        let to_test = |b: &LogitBundle| {
            let mut m = b.meta().clone();
            m.split = Split::Test;
            LogitBundle::new(m, b.logits().clone(), b.labels().to_vec()).unwrap()
        };
        let test = BundlePair::new(to_test(val.large()), to_test(val.small())).unwrap();
        assert!(matches!(
            fit_duo_temperatures(&test),
            Err(Error::SplitMismatch {
                expected: Split::Val,
                found: Split::Test
            })
        ));
        assert!(fit_single_temperature(test.large()).is_err());
    }

    #[test]
    fn single_scale_fixed_point() {
        let pair = random_pair(7, 600, 6, false);
        let first = fit_single_temperature(pair.large()).unwrap();
        let rescaled = pair.large().logits_f64().mapv(|v| v * first.scale);
        let again = fit_scale(&rescaled, pair.labels()).unwrap();
        assert!((again.scale - 1.0).abs() < 1e-3);
        assert!((again.val_nll - first.val_nll).abs() < 1e-8);
    }

    #[test]
    fn flat_sidekick_does_not_stall() {
        // zero Hessian along t_small exercises the damping path
        let pair = random_pair(8, 200, 4, true);
        let r = fit_duo_temperatures(&pair).unwrap();
        assert!(r.converged);
        assert!(r.iterations < MAX_ITERATIONS);
    }
}
