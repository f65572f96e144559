//! E-step and M-step procedures for the key mixture.
//!
//! `keys` are always `M` tensors of shape `N×D`, aligned with the queries:
//! row `i` of `keys[r]` is the component-`r` key that query `i` is scored
//! against.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, MgkError, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities {
    /// `N×M`, rows sum to one.
    pub gamma: Tensor,
    /// Column sums of `gamma`.
    pub counts: Vec<f64>,
}

impl Responsibilities {
    pub fn from_gamma(gamma: Tensor) -> Result<Self> {
        if !gamma.is_matrix() {
            return Err(MgkError::Contract(format!("gamma must be a matrix, got {:?}", gamma.shape())));
        }
        let m = gamma.cols();
        let mut counts = vec![0.0; m];
        for i in 0..gamma.rows() {
            counts.iter_mut().zip(gamma.row(i)).for_each(|(c, g)| *c += g);
        }
        Ok(Self { gamma, counts })
    }
}

/// Normalized `exp(t_r)` over the entries, computed relative to the largest
/// term. `None` when no term is finite.
pub fn posterior_from_log_terms(terms: &[f64]) -> Option<Vec<f64>> {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let w: Vec<f64> = terms.iter().map(|t| (t - max).exp()).collect();
    let s: f64 = w.iter().sum();
    Some(w.into_iter().map(|x| x / s).collect())
}

fn logsumexp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_mixture(q: &Tensor, keys: &[Tensor], sigma2: &[f64]) -> Result<usize> {
    if keys.is_empty() {
        return config_err("at least one key set is required");
    }
    if sigma2.len() != keys.len() {
        return config_err(format!("{} variances for {} components", sigma2.len(), keys.len()));
    }
    if let Some(s) = sigma2.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return config_err(format!("sigma2 must be positive and finite, got {s}"));
    }
    for k in keys {
        if k.shape() != q.shape() || !q.is_matrix() {
            return Err(MgkError::Dimension {
                op: "key mixture",
                left: q.shape().to_vec(),
                right: k.shape().to_vec(),
            });
        }
    }
    Ok(keys.len())
}

fn normalized(pi: &[f64], m: usize) -> Result<Vec<f64>> {
    if pi.len() != m {
        return config_err(format!("{} mixing weights for {m} components", pi.len()));
    }
    let s: f64 = pi.iter().sum();
    if pi.iter().any(|&p| !(p >= 0.0)) || !(s > 0.0) {
        return config_err(format!("mixing weights must be non-negative with positive mass, got {pi:?}"));
    }
    Ok(pi.iter().map(|p| p / s).collect())
}

/// Per-row log terms `log π_r − ‖q_i − k_ir‖²/2σ_r² + extra_r`.
fn row_terms(q: &Tensor, keys: &[Tensor], log_pi: &[f64], sigma2: &[f64], extra: &[f64], i: usize, out: &mut [f64]) {
    for (r, t) in out.iter_mut().enumerate() {
        *t = log_pi[r] + extra[r] - sqdist(q.row(i), keys[r].row(i)) / (2.0 * sigma2[r]);
    }
}

fn log_normalizers(sigma2: &[f64], d: usize) -> Vec<f64> {
    sigma2
        .iter()
        .map(|s| -0.5 * d as f64 * (2.0 * std::f64::consts::PI * s).ln())
        .collect()
}

/// Soft E-step: `γ_ir ∝ π_r exp(−‖q_i − k_ir‖² / 2σ_r²)`.
///
/// The Gaussian normalizers are left out, as in the attention scores. They
/// cancel when all variances are equal; otherwise see
/// [`posterior_responsibilities`].
pub fn soft_responsibilities(q: &Tensor, keys: &[Tensor], pi: &[f64], sigma2: &[f64]) -> Result<Responsibilities> {
    responsibilities_with(q, keys, pi, sigma2, false)
}

/// Exact component posteriors under the density that [`nll_queries`]
/// scores, `γ_ir ∝ π_r N(q_i; k_ir, σ_r² I)`. This is the E-step that makes
/// prior updates monotone in that NLL when the variances differ.
pub fn posterior_responsibilities(q: &Tensor, keys: &[Tensor], pi: &[f64], sigma2: &[f64]) -> Result<Responsibilities> {
    responsibilities_with(q, keys, pi, sigma2, true)
}

fn responsibilities_with(
    q: &Tensor,
    keys: &[Tensor],
    pi: &[f64],
    sigma2: &[f64],
    with_normalizers: bool,
) -> Result<Responsibilities> {
    let m = check_mixture(q, keys, sigma2)?;
    let log_pi: Vec<f64> = normalized(pi, m)?.iter().map(|p| p.ln()).collect();
    let zero = if with_normalizers { log_normalizers(sigma2, q.cols()) } else { vec![0.0; m] };
    let n = q.rows();
    let mut gamma = Vec::with_capacity(n * m);
    let mut terms = vec![0.0; m];
    for i in 0..n {
        row_terms(q, keys, &log_pi, sigma2, &zero, i, &mut terms);
        let g = posterior_from_log_terms(&terms).ok_or(MgkError::DegenerateResponsibility { row: i })?;
        gamma.extend(g);
    }
    Responsibilities::from_gamma(Tensor::new(vec![n, m], gamma)?)
}

/// Hard E-step: the best component per query, priors ignored. Ties go to
/// the smallest index.
pub fn hard_assign(q: &Tensor, keys: &[Tensor], sigma2: &[f64]) -> Result<Vec<usize>> {
    check_mixture(q, keys, sigma2)?;
    Ok((0..q.rows())
        .map(|i| {
            let mut best = (0, f64::NEG_INFINITY);
            for (r, (k, s2)) in keys.iter().zip(sigma2).enumerate() {
                let score = -sqdist(q.row(i), k.row(i)) / (2.0 * s2);
                if score > best.1 {
                    best = (r, score);
                }
            }
            best.0
        })
        .collect())
}

/// `π_r = (Σ_i γ_ir) / N`.
pub fn mstep_prior_update(resp: &Responsibilities) -> Result<Vec<f64>> {
    let n = resp.gamma.rows();
    if n == 0 {
        return Err(MgkError::EmptyInput("responsibilities have no rows".into()));
    }
    let total: f64 = resp.counts.iter().sum();
    Ok(resp.counts.iter().map(|c| c / total).collect())
}

/// Mean negative log-likelihood of the queries under the mixture of
/// isotropic Gaussians centred on their keys.
pub fn nll_queries(q: &Tensor, keys: &[Tensor], pi: &[f64], sigma2: &[f64]) -> Result<f64> {
    let m = check_mixture(q, keys, sigma2)?;
    let n = q.rows();
    if n == 0 {
        return Err(MgkError::EmptyInput("no queries".into()));
    }
    let log_pi: Vec<f64> = normalized(pi, m)?.iter().map(|p| p.ln()).collect();
    let norm = log_normalizers(sigma2, q.cols());
    let mut terms = vec![0.0; m];
    let mut total = 0.0;
    for i in 0..n {
        row_terms(q, keys, &log_pi, sigma2, &norm, i, &mut terms);
        total += logsumexp(&terms);
    }
    Ok(-total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTrace {
    pub pi: Vec<f64>,
    /// NLL before the first update and after each one.
    pub nll: Vec<f64>,
}

/// Alternates E-steps ([`posterior_responsibilities`]) and prior updates
/// with keys and variances held fixed.
pub fn em_prior_iterations(
    q: &Tensor,
    keys: &[Tensor],
    pi: &[f64],
    sigma2: &[f64],
    iterations: usize,
) -> Result<PriorTrace> {
    let mut pi = normalized(pi, keys.len())?;
    let mut nll = vec![nll_queries(q, keys, &pi, sigma2)?];
    for _ in 0..iterations {
        let resp = posterior_responsibilities(q, keys, &pi, sigma2)?;
        pi = mstep_prior_update(&resp)?;
        nll.push(nll_queries(q, keys, &pi, sigma2)?);
    }
    Ok(PriorTrace { pi, nll })
}

/// A mixture whose component means are shared by every query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub means: Vec<Vec<f64>>,
    pub pi: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub nll: f64,
}

impl MixtureFit {
    /// The means laid out as aligned key sets for `n` queries.
    pub fn keys(&self, n: usize) -> Vec<Tensor> {
        shared_keys(&self.means, n)
    }
}

fn shared_keys(means: &[Vec<f64>], n: usize) -> Vec<Tensor> {
    means
        .iter()
        .map(|mu| {
            let data = (0..n).flat_map(|_| mu.iter().copied()).collect();
            Tensor::new(vec![n, mu.len()], data).expect("length matches")
        })
        .collect()
}

fn run_em(q: &Tensor, mut means: Vec<Vec<f64>>, mut pi: Vec<f64>, sigma2: &[f64], iterations: usize) -> Result<MixtureFit> {
    let (n, d) = (q.rows(), q.cols());
    let fit = |means: &[Vec<f64>], pi: &[f64]| nll_queries(q, &shared_keys(means, n), pi, sigma2);
    let mut nll = fit(&means, &pi)?;
    for _ in 0..iterations {
        let keys = shared_keys(&means, n);
        let resp = posterior_responsibilities(q, &keys, &pi, sigma2)?;
        let new_pi = mstep_prior_update(&resp)?;
        let mut new_means = means.clone();
        for (r, mu) in new_means.iter_mut().enumerate() {
            let w = resp.counts[r];
            if w > 0.0 {
                let mut acc = vec![0.0; d];
                for i in 0..n {
                    let g = resp.gamma.at(i, r);
                    acc.iter_mut().zip(q.row(i)).for_each(|(a, x)| *a += g * x);
                }
                *mu = acc.into_iter().map(|a| a / w).collect();
            }
        }
        let new_nll = fit(&new_means, &new_pi)?;
        // Guard against round-off undoing monotonicity near convergence.
        if new_nll > nll {
            break;
        }
        let done = nll - new_nll < 1e-13;
        means = new_means;
        pi = new_pi;
        nll = new_nll;
        if done {
            break;
        }
    }
    Ok(MixtureFit { means, pi, sigma2: sigma2.to_vec(), nll })
}

/// Fits `sigma2.len()` shared-mean components to the queries by EM with the
/// variances held fixed. Several starts are tried, including ones built from
/// the fit with one component fewer, so the result is never worse than that
/// smaller fit.
pub fn fit_shared_mixture(q: &Tensor, sigma2: &[f64], iterations: usize, seed: u64) -> Result<MixtureFit> {
    if q.rows() == 0 {
        return Err(MgkError::EmptyInput("no queries".into()));
    }
    let m = sigma2.len();
    if m == 0 {
        return config_err("at least one component is required");
    }
    if let Some(s) = sigma2.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return config_err(format!("sigma2 must be positive and finite, got {s}"));
    }
    let n = q.rows();
    let mut rng = SplitMix64::new(seed);
    let mut starts: Vec<(Vec<Vec<f64>>, Vec<f64>)> = Vec::new();

    if m == 1 {
        let mean = (0..q.cols())
            .map(|c| (0..n).map(|i| q.at(i, c)).sum::<f64>() / n as f64)
            .collect();
        starts.push((vec![mean], vec![1.0]));
    } else {
        let smaller = fit_shared_mixture(q, &sigma2[..m - 1], iterations, seed)?;
        let heaviest = (0..m - 1).fold(0, |b, r| if smaller.pi[r] > smaller.pi[b] { r } else { b });

        let mut split_means = smaller.means.clone();
        split_means.push(smaller.means[heaviest].clone());
        let mut split_pi = smaller.pi.clone();
        split_pi[heaviest] /= 2.0;
        split_pi.push(split_pi[heaviest]);
        starts.push((split_means, split_pi));

        let mut idle_means = smaller.means.clone();
        idle_means.push(smaller.means[heaviest].clone());
        let mut idle_pi = smaller.pi.clone();
        idle_pi.push(0.0);
        starts.push((idle_means, idle_pi));

        // Farthest-point seeding from a random query.
        let mut chosen = vec![rng.below(n as u64) as usize];
        while chosen.len() < m {
            let next = (0..n)
                .max_by(|&a, &b| {
                    let da = chosen.iter().map(|&c| sqdist(q.row(a), q.row(c))).fold(f64::INFINITY, f64::min);
                    let db = chosen.iter().map(|&c| sqdist(q.row(b), q.row(c))).fold(f64::INFINITY, f64::min);
                    da.total_cmp(&db)
                })
                .expect("n > 0");
            chosen.push(next);
        }
        starts.push((chosen.iter().map(|&i| q.row(i).to_vec()).collect(), vec![1.0 / m as f64; m]));

        let random: Vec<Vec<f64>> = (0..m).map(|_| q.row(rng.below(n as u64) as usize).to_vec()).collect();
        starts.push((random, vec![1.0 / m as f64; m]));
    }

    let mut best: Option<MixtureFit> = None;
    for (means, pi) in starts {
        let fit = run_em(q, means, pi, sigma2, iterations)?;
        if best.as_ref().is_none_or(|b| fit.nll < b.nll) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one start"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random(rng: &mut SplitMix64, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn soft_examples() {
        let q = col(&[0.0]);
        let r = soft_responsibilities(&q, &[col(&[1.0]), col(&[-1.0])], &[0.5, 0.5], &[1.0, 1.0]).unwrap();
        assert_eq!(r.gamma.data(), &[0.5, 0.5]);

        let r = soft_responsibilities(&q, &[col(&[0.0]), col(&[1.0])], &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        let e = (-1f64).exp();
        assert!((r.gamma.at(0, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((r.gamma.at(0, 0) - 0.7311).abs() < 5e-5);
        assert!((r.gamma.at(0, 1) - 0.2689).abs() < 5e-5);

        let r = soft_responsibilities(&q, &[col(&[5.0]), col(&[0.0])], &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(r.gamma.data(), &[1.0, 0.0]);
    }

    #[test]
    fn posterior_adds_normalizers() {
        let mut rng = SplitMix64::new(9);
        let q = random(&mut rng, 6, 3);
        let keys = [random(&mut rng, 6, 3), random(&mut rng, 6, 3)];
        let a = soft_responsibilities(&q, &keys, &[0.3, 0.7], &[1.2, 1.2]).unwrap();
        let b = posterior_responsibilities(&q, &keys, &[0.3, 0.7], &[1.2, 1.2]).unwrap();
        assert!(a.gamma.max_abs_diff(&b.gamma).unwrap() < 1e-15);

        // Equal distances: the wider component loses by its normalizer ratio (σ₁²/σ₂²)^{D/2}.
        let q = col(&[0.0]);
        let g = posterior_responsibilities(&q, &[col(&[0.0]), col(&[0.0])], &[0.5, 0.5], &[1.0, 4.0]).unwrap();
        assert!((g.gamma.at(0, 0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn soft_survives_huge_distances() {
        let q = col(&[0.0]);
        let r = soft_responsibilities(&q, &[col(&[1e4]), col(&[1e4 + 1.0])], &[0.5, 0.5], &[1.0, 1.0]).unwrap();
        assert!((r.gamma.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r.gamma.at(0, 0) > 0.99);
    }

    #[test]
    fn hard_examples() {
        let q = col(&[0.0, 0.0]);
        assert_eq!(hard_assign(&q, &[col(&[0.0, 0.0]), col(&[9.0, 9.0])], &[1.0, 1.0]).unwrap(), vec![0, 0]);
        assert_eq!(hard_assign(&q, &[col(&[1.0, 3.0]), col(&[-1.0, 0.0])], &[1.0, 1.0]).unwrap(), vec![0, 1]);
        assert_eq!(hard_assign(&q, &[col(&[1.0, 1.0]), col(&[-1.0, -1.0])], &[1.0, 1.0]).unwrap(), vec![0, 0]);

        let mut rng = SplitMix64::new(1);
        let q = random(&mut rng, 20, 3);
        let keys: Vec<Tensor> = (0..3).map(|_| random(&mut rng, 20, 3)).collect();
        let s2 = [0.5, 1.0, 2.0];
        let got = hard_assign(&q, &keys, &s2).unwrap();
        for (i, &g) in got.iter().enumerate() {
            let mut best = 0;
            for r in 1..3 {
                let score = |r: usize| -sqdist(q.row(i), keys[r].row(i)) / (2.0 * s2[r]);
                if score(r) > score(best) {
                    best = r;
                }
            }
            assert_eq!(g, best);
        }
    }

    #[test]
    fn mstep_examples() {
        let g = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        let pi = mstep_prior_update(&Responsibilities::from_gamma(g).unwrap()).unwrap();
        assert!((pi[0] - 2.0 / 3.0).abs() < 1e-15 && (pi[1] - 1.0 / 3.0).abs() < 1e-15);

        let g = Tensor::filled(&[4, 2], 0.5);
        assert_eq!(mstep_prior_update(&Responsibilities::from_gamma(g).unwrap()).unwrap(), vec![0.5, 0.5]);

        let mut rng = SplitMix64::new(2);
        let raw: Vec<Vec<f64>> = (0..7)
            .map(|_| {
                let w: Vec<f64> = (0..3).map(|_| rng.next_f64() + 0.01).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let pi = mstep_prior_update(&Responsibilities::from_gamma(Tensor::from_rows(&raw).unwrap()).unwrap()).unwrap();
        for (r, p) in pi.iter().enumerate() {
            let mean = raw.iter().map(|row| row[r]).sum::<f64>() / 7.0;
            assert!((p - mean).abs() < 1e-15);
        }
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let empty = Responsibilities::from_gamma(Tensor::zeros(&[0, 2])).unwrap();
        assert!(matches!(mstep_prior_update(&empty), Err(MgkError::EmptyInput(_))));
    }

    #[test]
    fn nll_examples() {
        let q = Tensor::from_rows(&[[0.3, -0.2]]).unwrap();
        let v = nll_queries(&q, &[q.clone()], &[1.0], &[1.0]).unwrap();
        assert!((v - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        assert!((v - 1.8379).abs() < 5e-5);

        let mut rng = SplitMix64::new(3);
        let q = random(&mut rng, 9, 4);
        let k = random(&mut rng, 9, 4);
        let one = nll_queries(&q, &[k.clone()], &[1.0], &[1.5]).unwrap();
        let two = nll_queries(&q, &[k.clone(), k.clone()], &[0.5, 0.5], &[1.5, 1.5]).unwrap();
        assert!((one - two).abs() < 1e-14);

        assert!(matches!(nll_queries(&q, &[k], &[1.0], &[0.0]), Err(MgkError::Config(_))));
    }

    #[test]
    fn fitted_two_components_beat_one() {
        for seed in 0..5 {
            let mut rng = SplitMix64::new(seed);
            let mut rows = Vec::new();
            for i in 0..40 {
                let c = if i % 3 == 0 { 3.0 } else { -1.0 };
                rows.push(vec![c + rng.normal(), rng.normal()]);
            }
            let q = Tensor::from_rows(&rows).unwrap();
            let one = fit_shared_mixture(&q, &[1.0], 100, seed).unwrap();
            let two = fit_shared_mixture(&q, &[1.0, 3.0], 100, seed).unwrap();
            assert!(two.nll <= one.nll + 1e-6, "{} vs {}", two.nll, one.nll);
            let check = nll_queries(&q, &two.keys(40), &two.pi, &two.sigma2).unwrap();
            assert!((check - two.nll).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn soft_rows_normalized_and_shift_invariant(seed in any::<u64>(), m in 1usize..4, shift in -50.0f64..50.0) {
            let mut rng = SplitMix64::new(seed);
            let q = random(&mut rng, 6, 3);
            let keys: Vec<Tensor> = (0..m).map(|_| random(&mut rng, 6, 3)).collect();
            let pi: Vec<f64> = (0..m).map(|_| rng.next_f64() + 0.05).collect();
            let s2 = vec![1.3; m];
            let r = soft_responsibilities(&q, &keys, &pi, &s2).unwrap();
            for i in 0..6 {
                prop_assert!((r.gamma.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            prop_assert!((r.counts.iter().sum::<f64>() - 6.0).abs() < 1e-9);
            // Adding the same constant to every squared distance of a row:
            // done here by posterior_from_log_terms on shifted terms.
            let norm: f64 = pi.iter().sum();
            for i in 0..6 {
                let terms: Vec<f64> = (0..m)
                    .map(|k| (pi[k] / norm).ln() - (sqdist(q.row(i), keys[k].row(i)) + shift) / 2.6)
                    .collect();
                let g = posterior_from_log_terms(&terms).unwrap();
                for k in 0..m {
                    prop_assert!((g[k] - r.gamma.at(i, k)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn hard_matches_soft_argmax(seed in any::<u64>()) {
            let mut rng = SplitMix64::new(seed);
            let q = random(&mut rng, 8, 2);
            let keys: Vec<Tensor> = (0..3).map(|_| random(&mut rng, 8, 2)).collect();
            let s2 = [0.7, 0.7, 0.7];
            let hard = hard_assign(&q, &keys, &s2).unwrap();
            let soft = soft_responsibilities(&q, &keys, &[1.0, 1.0, 1.0], &s2).unwrap();
            for (i, &h) in hard.iter().enumerate() {
                let row = soft.gamma.row(i);
                let best = (0..3).fold(0, |b, r| if row[r] > row[b] { r } else { b });
                prop_assert_eq!(h, best);
            }
        }

        #[test]
        fn prior_em_is_monotone(seed in any::<u64>()) {
            let mut rng = SplitMix64::new(seed);
            let q = random(&mut rng, 12, 3);
            let keys: Vec<Tensor> = (0..3).map(|_| random(&mut rng, 12, 3)).collect();
            let trace = em_prior_iterations(&q, &keys, &[0.2, 0.3, 0.5], &[0.5, 1.0, 2.0], 30).unwrap();
            for w in trace.nll.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            prop_assert!((trace.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn splitting_a_component_keeps_nll(seed in any::<u64>(), frac in 0.01f64..0.99) {
            let mut rng = SplitMix64::new(seed);
            let q = random(&mut rng, 5, 2);
            let k1 = random(&mut rng, 5, 2);
            let k2 = random(&mut rng, 5, 2);
            let a = nll_queries(&q, &[k1.clone(), k2.clone()], &[0.4, 0.6], &[1.0, 2.0]).unwrap();
            let b = nll_queries(&q, &[k1.clone(), k2.clone(), k1], &[0.4 * frac, 0.6, 0.4 * (1.0 - frac)], &[1.0, 2.0, 1.0]).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
