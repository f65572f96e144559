//! Numerical identities between attention variants, each run over seeded
//! random instances and reported with its worst deviation.

use serde::{Serialize, Serializer};

use crate::attention::{
    gaussian_attention, linear_attention, mgk_attention, mlk_attention, softmax_attention, AttentionOutput, EStep,
    Kernel,
};
use crate::error::Result;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const REDUCTION_TOL: f64 = 1e-12;
pub const NESTING_TOL: f64 = 1e-12;
pub const HARD_SOFT_TOL: f64 = 1e-6;
pub const LINEARIZATION_TOL: f64 = 1e-10;
pub const HARD_SOFT_SIGMA2: f64 = 1e-6;

/// 17 significant digits.
pub fn format_deviation(x: f64) -> String {
    format!("{x:.16e}")
}

fn sci<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format_deviation(*x))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceCheck {
    pub name: String,
    pub instances: usize,
    #[serde(serialize_with = "sci")]
    pub tolerance: f64,
    #[serde(serialize_with = "sci")]
    pub max_deviation: f64,
    pub passed: bool,
}

impl EquivalenceCheck {
    fn new(name: &str, instances: usize, tolerance: f64, max_deviation: f64) -> Self {
        Self {
            name: name.to_string(),
            instances,
            tolerance,
            max_deviation,
            // NaN deviations fail
            passed: max_deviation <= tolerance,
        }
    }
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap_or(f64::INFINITY)
}

fn score_diff(a: &AttentionOutput, b: &AttentionOutput) -> f64 {
    match (&a.scores, &b.scores) {
        (Some(x), Some(y)) => max_diff(x, y),
        _ => f64::INFINITY,
    }
}

fn dims(rng: &mut SplitMix64, max_n: u64, max_d: u64) -> (usize, usize) {
    (1 + rng.below(max_n) as usize, 1 + rng.below(max_d) as usize)
}

/// Unit-normalized queries and keys, one component, `σ² = scale·√D`:
/// Gaussian-distance mixture scores against softmax scores. `scale = 1`
/// is the identity; any other value is a negative control.
pub fn reduction_identity(seed: u64, instances: usize, sigma2_scale: f64) -> Result<EquivalenceCheck> {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, d) = dims(&mut rng, 16, 8);
        let (n, d) = (n + 1, d + 1);
        let q = Tensor::randn(&[n, d], 1.0, &mut rng).normalize_rows();
        let k = Tensor::randn(&[n, d], 1.0, &mut rng).normalize_rows();
        let v = Tensor::randn(&[n, d], 1.0, &mut rng);
        let causal = rng.below(2) == 1;
        let s2 = sigma2_scale * (d as f64).sqrt();
        let mix = mgk_attention(
            &q,
            &[k.clone()],
            &v,
            &[1.0],
            &[s2],
            EStep::SoftLearnedPrior,
            Kernel::GaussianDistance,
            causal,
        )?;
        worst = worst.max(score_diff(&mix, &softmax_attention(&q, &k, &v, causal)?));
    }
    let name = if sigma2_scale == 1.0 {
        "reduction_identity".to_string()
    } else {
        format!("reduction_identity_sigma2_x{sigma2_scale}")
    };
    Ok(EquivalenceCheck::new(&name, instances, REDUCTION_TOL, worst))
}

/// Mixtures that collapse to a single kernel: one component, or two
/// identical components with equal weights and variances.
pub fn nesting(seed: u64, instances: usize) -> Result<Vec<EquivalenceCheck>> {
    let mut rng = SplitMix64::new(seed);
    let (mut mgk1, mut mgk_dup, mut dot1, mut mlk1, mut mlk_dup) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let soft = EStep::SoftLearnedPrior;
    for _ in 0..instances {
        let (n, d) = dims(&mut rng, 16, 6);
        let q = Tensor::randn(&[n, d], 1.0, &mut rng);
        let k = Tensor::randn(&[n, d], 1.0, &mut rng);
        let v = Tensor::randn(&[n, d], 1.0, &mut rng);
        let causal = rng.below(2) == 1;
        let s2 = 0.5 + 3.0 * rng.next_f64();
        let both = |a: &AttentionOutput, b: &AttentionOutput| score_diff(a, b).max(max_diff(&a.output, &b.output));

        let g = gaussian_attention(&q, &k, &v, s2, causal)?;
        let one = mgk_attention(&q, &[k.clone()], &v, &[1.0], &[s2], soft, Kernel::GaussianDistance, causal)?;
        mgk1 = mgk1.max(both(&one, &g));
        let two = mgk_attention(
            &q,
            &[k.clone(), k.clone()],
            &v,
            &[0.5, 0.5],
            &[s2, s2],
            soft,
            Kernel::GaussianDistance,
            causal,
        )?;
        mgk_dup = mgk_dup.max(both(&two, &g));

        let sd = (d as f64).sqrt();
        let dot = mgk_attention(&q, &[k.clone()], &v, &[1.0], &[sd], soft, Kernel::DotProduct, causal)?;
        dot1 = dot1.max(both(&dot, &softmax_attention(&q, &k, &v, causal)?));

        let lin = linear_attention(&q, &k, &v, causal)?;
        mlk1 = mlk1.max(max_diff(&mlk_attention(&q, &[k.clone()], &v, &[1.0], causal)?.output, &lin.output));
        let dup = mlk_attention(&q, &[k.clone(), k.clone()], &v, &[0.5, 0.5], causal)?;
        mlk_dup = mlk_dup.max(max_diff(&dup.output, &lin.output));
    }
    Ok(vec![
        EquivalenceCheck::new("nesting_mgk_single_component", instances, NESTING_TOL, mgk1),
        EquivalenceCheck::new("nesting_mgk_duplicate_components", instances, NESTING_TOL, mgk_dup),
        EquivalenceCheck::new("nesting_dot_kernel_single_component", instances, NESTING_TOL, dot1),
        EquivalenceCheck::new("nesting_mlk_single_component", instances, NESTING_TOL, mlk1),
        EquivalenceCheck::new("nesting_mlk_duplicate_components", instances, NESTING_TOL, mlk_dup),
    ])
}

/// Soft against hard E-step scores at `σ² = 1e-6`, with each position's two
/// keys at distance between 1 and 2 from each other.
pub fn hard_soft_limit(seed: u64, instances: usize) -> Result<EquivalenceCheck> {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, d) = dims(&mut rng, 12, 4);
        let q = Tensor::randn(&[n, d], 1.0, &mut rng);
        let k1 = Tensor::randn(&[n, d], 1.0, &mut rng);
        let mut k2 = k1.clone();
        for j in 0..n {
            let dir = Tensor::randn(&[d], 1.0, &mut rng);
            let norm = dir.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let len = 1.0 + rng.next_f64();
            for c in 0..d {
                k2.data_mut()[j * d + c] += len * dir.data()[c] / norm;
            }
        }
        let v = Tensor::randn(&[n, d], 1.0, &mut rng);
        let causal = rng.below(2) == 1;
        let keys = [k1, k2];
        let s2 = [HARD_SOFT_SIGMA2; 2];
        let run = |e| mgk_attention(&q, &keys, &v, &[0.5, 0.5], &s2, e, Kernel::GaussianDistance, causal);
        worst = worst.max(score_diff(&run(EStep::SoftLearnedPrior)?, &run(EStep::HardAssign)?));
    }
    Ok(EquivalenceCheck::new("hard_soft_limit", instances, HARD_SOFT_TOL, worst))
}

fn feature(u: f64) -> f64 {
    if u >= 0.0 {
        u + 1.0
    } else {
        u.exp()
    }
}

/// `h_i = Σ_j w_ij v_j / Σ_j w_ij` with `w_ij = Σ_r π_r φ(q_i)·φ(k_jr)`,
/// by direct summation.
pub fn quadratic_oracle(q: &Tensor, keys: &[Tensor], v: &Tensor, pi: &[f64], causal: bool) -> Tensor {
    let (n, n2, dv) = (q.rows(), keys[0].rows(), v.cols());
    let total: f64 = pi.iter().sum();
    let mut out = Tensor::zeros(&[n, dv]);
    for i in 0..n {
        let mut num = vec![0.0; dv];
        let mut den = 0.0;
        for j in 0..n2 {
            if causal && j > i {
                break;
            }
            let mut w = 0.0;
            for (k, p) in keys.iter().zip(pi) {
                let dot: f64 = q.row(i).iter().zip(k.row(j)).map(|(a, b)| feature(*a) * feature(*b)).sum();
                w += p / total * dot;
            }
            den += w;
            num.iter_mut().zip(v.row(j)).for_each(|(o, x)| *o += w * x);
        }
        for c in 0..dv {
            out.data_mut()[i * dv + c] = num[c] / den;
        }
    }
    out
}

/// Linear and mixture-of-linear-keys outputs against [`quadratic_oracle`],
/// as max absolute deviation over max absolute oracle entry.
pub fn linearization(seed: u64) -> Result<EquivalenceCheck> {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    let mut count = 0;
    for n in [1usize, 2, 7, 33, 64] {
        for m in [1usize, 2] {
            for causal in [false, true] {
                let d = 2 + rng.below(7) as usize;
                let q = Tensor::randn(&[n, d], 1.0, &mut rng);
                let keys: Vec<Tensor> = (0..m).map(|_| Tensor::randn(&[n, d], 1.0, &mut rng)).collect();
                let v = Tensor::randn(&[n, d], 1.0, &mut rng);
                let pi: Vec<f64> = (0..m).map(|_| 0.1 + rng.next_f64()).collect();
                let got = if m == 1 {
                    linear_attention(&q, &keys[0], &v, causal)?
                } else {
                    mlk_attention(&q, &keys, &v, &pi, causal)?
                };
                let pi = if m == 1 { vec![1.0] } else { pi };
                let want = quadratic_oracle(&q, &keys, &v, &pi, causal);
                let scale = want.data().iter().fold(0.0f64, |a, x| a.max(x.abs())).max(f64::MIN_POSITIVE);
                worst = worst.max(max_diff(&got.output, &want) / scale);
                count += 1;
            }
        }
    }
    Ok(EquivalenceCheck::new("linearization", count, LINEARIZATION_TOL, worst))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub seed: u64,
    pub checks: Vec<EquivalenceCheck>,
    pub passed: bool,
}

/// All identities, 20 random instances each where instances are random.
pub fn equivalence_suite(seed: u64) -> Result<EquivalenceReport> {
    let mut rng = SplitMix64::new(seed);
    let mut checks = vec![reduction_identity(rng.next_u64(), 20, 1.0)?];
    checks.extend(nesting(rng.next_u64(), 20)?);
    checks.push(hard_soft_limit(rng.next_u64(), 20)?);
    checks.push(linearization(rng.next_u64())?);
    let passed = checks.iter().all(|c| c.passed);
    Ok(EquivalenceReport { seed, checks, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let r = equivalence_suite(7).unwrap();
        assert!(r.passed, "{:#?}", r.checks);
        assert_eq!(r.checks.len(), 8);
    }

    #[test]
    fn perturbed_sigma2_fails() {
        let c = reduction_identity(7, 20, 1.5).unwrap();
        assert!(!c.passed);
        assert!(c.max_deviation > REDUCTION_TOL);
    }

    #[test]
    fn deviation_has_17_significant_digits() {
        assert_eq!(format_deviation(0.1), "1.0000000000000001e-1");
        let c = EquivalenceCheck::new("x", 1, 1e-12, 0.5f64.powi(42));
        let json = serde_json::to_value(&c).unwrap();
        // 2^-42 to 17 significant digits
        assert_eq!(json["max_deviation"], "2.2737367544323206e-13");
        assert_eq!(json["passed"], true);
        assert!(!EquivalenceCheck::new("nan", 1, 1.0, f64::NAN).passed);
    }

    #[test]
    fn oracle_on_single_token() {
        let q = Tensor::from_rows(&[[0.3, -2.0]]).unwrap();
        let k = Tensor::from_rows(&[[1.0, 0.5]]).unwrap();
        let v = Tensor::from_rows(&[[4.0, -1.0]]).unwrap();
        assert_eq!(quadratic_oracle(&q, &[k], &v, &[1.0], false), v);
    }
}
