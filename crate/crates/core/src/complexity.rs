//! FLOP and parameter accounting for softmax and mixture-of-keys attention.
//!
//! A multiply-add counts as two operations; exponentials, divisions and the
//! softmax itself are not counted. The mixture layer uses `H/M` heads so
//! that it carries the same number of keys per position as the `H`-head
//! softmax layer it is compared against.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, MultiHeadParams, Variant};
use crate::attention::multi_head::multi_head_on;
use crate::error::{MgkError, Result};
use crate::rng::SplitMix64;
use crate::tape::Tape;
use crate::tensor::Tensor;

fn positive(args: &[(&str, u64)]) -> Result<()> {
    match args.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(MgkError::Domain(format!("{name} must be positive"))),
        None => Ok(()),
    }
}

fn divisible(h: u64, m: u64) -> Result<u64> {
    if h % m != 0 {
        return Err(MgkError::Domain(format!("heads {h} must be a multiple of components {m}")));
    }
    Ok(h / m)
}

fn to_u64(v: i128) -> Result<u64> {
    u64::try_from(v).map_err(|_| MgkError::Domain(format!("count {v} does not fit in 64 bits")))
}

/// `N²H(4D−1) + NHD(6D_x + 2HD − 5)`
pub fn softmax_flops(n: u64, h: u64, d: u64, dx: u64) -> Result<u64> {
    positive(&[("N", n), ("H", h), ("D", d), ("D_x", dx)])?;
    let (n, h, d, dx) = (n as i128, h as i128, d as i128, dx as i128);
    to_u64(n * n * h * (4 * d - 1) + n * h * d * (6 * dx + 2 * h * d - 5))
}

/// Term-by-term count for `H/M` heads of `M` components each:
/// `(H/M)(N²((2M+2)D−1) + ND((M+2)(2D_x−1)−1)) + NHD(2(H/M)D−1)`.
pub fn mgk_flops(n: u64, h: u64, d: u64, dx: u64, m: u64) -> Result<u64> {
    positive(&[("N", n), ("H", h), ("D", d), ("D_x", dx), ("M", m)])?;
    let g = divisible(h, m)? as i128;
    let (n, h, d, dx, m) = (n as i128, h as i128, d as i128, dx as i128, m as i128);
    let per_head = n * n * ((2 * m + 2) * d - 1) + n * d * ((m + 2) * (2 * dx - 1) - 1);
    to_u64(g * per_head + n * h * d * (2 * g * d - 1))
}

/// The grouped closed form `(H/M)N²(2(M+1)D−1) + N(H/M)D(2(M+2)D_x + 2HD − (3M+2))`,
/// which at `M = 2` reads `N²H(3D−0.5) + NHD(4D_x + HD − 4)`. It falls short
/// of [`mgk_flops`] by `N(H/M)D(M−1)`.
pub fn mgk_flops_paper(n: u64, h: u64, d: u64, dx: u64, m: u64) -> Result<u64> {
    positive(&[("N", n), ("H", h), ("D", d), ("D_x", dx), ("M", m)])?;
    let g = divisible(h, m)? as i128;
    let (n, h, d, dx, m) = (n as i128, h as i128, d as i128, dx as i128, m as i128);
    to_u64(g * n * n * (2 * (m + 1) * d - 1) + n * g * d * (2 * (m + 2) * dx + 2 * h * d - (3 * m + 2)))
}

/// `mgk_flops − mgk_flops_paper = N(H/M)D(M−1)`.
pub fn flops_form_discrepancy(n: u64, h: u64, d: u64, m: u64) -> Result<u64> {
    positive(&[("N", n), ("H", h), ("D", d), ("M", m)])?;
    let g = divisible(h, m)?;
    Ok(n * g * d * (m - 1))
}

/// `3HDD_x + (HD)²`
pub fn softmax_params(h: u64, d: u64, dx: u64) -> Result<u64> {
    positive(&[("H", h), ("D", d), ("D_x", dx)])?;
    Ok(3 * h * d * dx + (h * d) * (h * d))
}

/// Two components, `H/2` heads: `2HDD_x + (HD)²/2 + H`.
pub fn mgk_params(h: u64, d: u64, dx: u64) -> Result<u64> {
    positive(&[("H", h), ("D", d), ("D_x", dx)])?;
    if h % 2 != 0 {
        return Err(MgkError::Domain(format!("heads {h} must be even")));
    }
    Ok(2 * h * d * dx + (h * d) * (h * d) / 2 + h)
}

/// `M` components, `H/M` heads with independent key projections:
/// `(H/M)(M+2)DD_x + (HD)²/M + H`.
pub fn mgk_params_general(h: u64, d: u64, dx: u64, m: u64) -> Result<u64> {
    positive(&[("H", h), ("D", d), ("D_x", dx), ("M", m)])?;
    let g = divisible(h, m)?;
    Ok(g * (m + 2) * d * dx + g * d * h * d + h)
}

/// The mixture layer whose cost [`mgk_flops`] describes.
pub fn mgk_counting_config(h: usize, d: usize, dx: usize, m: usize) -> Result<AttentionConfig> {
    divisible(h as u64, m.max(1) as u64)?;
    Ok(AttentionConfig::new(Variant::Mgk, h / m, d, dx)
        .with_components(m)
        .with_out_dim(h * d))
}

/// The softmax layer whose cost [`softmax_flops`] describes.
pub fn softmax_counting_config(h: usize, d: usize, dx: usize) -> AttentionConfig {
    AttentionConfig::new(Variant::Softmax, h, d, dx)
}

/// Runs the layer forward on `n` random tokens and returns the number of
/// multiplications and additions the tape executed.
pub fn instrumented_count(config: &AttentionConfig, n: usize) -> Result<u64> {
    config.validate()?;
    let mut rng = SplitMix64::new(0x5EED);
    let params = MultiHeadParams::init(config, &mut rng)?;
    let x = Tensor::new(
        vec![n, config.input_dim],
        (0..n * config.input_dim).map(|_| rng.normal()).collect(),
    )?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let bound = params.bind(&mut tape, &mut Vec::new());
    multi_head_on(&mut tape, xv, &bound, config)?;
    Ok(tape.flops())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(rename = "H")]
    pub h: u64,
    #[serde(rename = "D")]
    pub d: u64,
    #[serde(rename = "D_x")]
    pub dx: u64,
    #[serde(rename = "M")]
    pub m: u64,
    pub softmax_flops: u64,
    pub mgk_flops: u64,
    pub mgk_flops_paper: u64,
    pub softmax_params: u64,
    pub mgk_params: u64,
    pub flops_ratio: f64,
    pub params_ratio: f64,
    pub instrumented_flops: Option<u64>,
}

pub const CSV_HEADER: &str =
    "N,H,D,D_x,M,softmax_flops,mgk_flops,mgk_flops_paper,softmax_params,mgk_params,flops_ratio,params_ratio,instrumented_flops";

impl ComplexityReport {
    /// Closed-form counts for an `H`-head softmax layer against `H/M` mixture
    /// heads; `instrument` also measures the mixture layer on the tape.
    pub fn new(n: u64, h: u64, d: u64, dx: u64, m: u64, instrument: bool) -> Result<Self> {
        let softmax_flops = softmax_flops(n, h, d, dx)?;
        let mgk_flops = mgk_flops(n, h, d, dx, m)?;
        let softmax_params = softmax_params(h, d, dx)?;
        let mgk_params = mgk_params_general(h, d, dx, m)?;
        let instrumented_flops = if instrument {
            let cfg = mgk_counting_config(h as usize, d as usize, dx as usize, m as usize)?;
            Some(instrumented_count(&cfg, n as usize)?)
        } else {
            None
        };
        Ok(Self {
            n,
            h,
            d,
            dx,
            m,
            softmax_flops,
            mgk_flops,
            mgk_flops_paper: mgk_flops_paper(n, h, d, dx, m)?,
            softmax_params,
            mgk_params,
            flops_ratio: mgk_flops as f64 / softmax_flops as f64,
            params_ratio: mgk_params as f64 / softmax_params as f64,
            instrumented_flops,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:?},{:?},{}",
            self.n,
            self.h,
            self.d,
            self.dx,
            self.m,
            self.softmax_flops,
            self.mgk_flops,
            self.mgk_flops_paper,
            self.softmax_params,
            self.mgk_params,
            self.flops_ratio,
            self.params_ratio,
            self.instrumented_flops.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

pub fn to_csv(reports: &[ComplexityReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    for r in reports {
        out.push('\n');
        out.push_str(&r.csv_row());
    }
    out.push('\n');
    out
}

/// One report per `(N, D)` cell.
pub fn ratio_sweep(grid: &[(u64, u64)], h: u64, dx: u64, m: u64, instrument: bool) -> Result<Vec<ComplexityReport>> {
    if grid.is_empty() {
        return Err(MgkError::EmptyInput("sweep grid is empty".into()));
    }
    grid.iter()
        .map(|&(n, d)| ComplexityReport::new(n, h, d, dx, m, instrument))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_flops_examples() {
        assert_eq!(softmax_flops(1, 1, 1, 1).unwrap(), 6);
        assert_eq!(softmax_flops(2, 1, 1, 1).unwrap(), 18);
        let a = softmax_flops(1 << 20, 2, 4, 8).unwrap() as f64;
        let b = softmax_flops(1 << 21, 2, 4, 8).unwrap() as f64;
        assert!((b / a - 4.0).abs() < 1e-3);
        assert!(matches!(softmax_flops(0, 1, 1, 1), Err(MgkError::Domain(_))));
    }

    #[test]
    fn mgk_flops_examples() {
        assert_eq!(mgk_flops(1, 2, 1, 1, 2).unwrap(), 10);
        assert_eq!(mgk_flops_paper(1, 2, 1, 1, 2).unwrap(), 9);
        assert!(matches!(mgk_flops(1, 3, 1, 1, 2), Err(MgkError::Domain(_))));
        // At M = 1 the N² coefficient is H(4D−1): compare N = 2 and N = 1 via second difference.
        for (h, d, dx) in [(1, 1, 1), (3, 5, 2), (4, 8, 16)] {
            let f = |n| mgk_flops(n, h, d, dx, 1).unwrap() as i128;
            let second = f(3) - 2 * f(2) + f(1);
            assert_eq!(second, 2 * (h * (4 * d - 1)) as i128);
        }
    }

    #[test]
    fn params_examples() {
        assert_eq!(softmax_params(8, 32, 64).unwrap(), 114_688);
        assert_eq!(softmax_params(1, 1, 1).unwrap(), 4);
        assert_eq!(mgk_params(8, 32, 64).unwrap(), 65_544);
        assert_eq!(mgk_params(2, 1, 1).unwrap(), 8);
        assert_eq!(softmax_params(8, 32, 64).unwrap() - mgk_params(8, 32, 64).unwrap(), 49_144);
        let quad = |h: u64| softmax_params(h, 3, 5).unwrap() - 3 * h * 15;
        assert_eq!(quad(4), 4 * quad(2));
        assert!(matches!(mgk_params(3, 1, 1), Err(MgkError::Domain(_))));
        assert_eq!(mgk_params_general(8, 32, 64, 2).unwrap(), mgk_params(8, 32, 64).unwrap());
    }

    #[test]
    fn instrumented_matches_closed_forms() {
        assert_eq!(instrumented_count(&softmax_counting_config(1, 1, 1), 2).unwrap(), 18);
        for (n, h, d, dx, m) in [(1, 2, 1, 1, 2), (3, 2, 2, 3, 2), (5, 4, 3, 2, 2), (4, 3, 2, 5, 3), (2, 2, 4, 4, 1)] {
            let cfg = mgk_counting_config(h, d, dx, m).unwrap();
            assert_eq!(
                instrumented_count(&cfg, n).unwrap(),
                mgk_flops(n as u64, h as u64, d as u64, dx as u64, m as u64).unwrap()
            );
            assert_eq!(
                instrumented_count(&softmax_counting_config(h, d, dx), n).unwrap(),
                softmax_flops(n as u64, h as u64, d as u64, dx as u64).unwrap()
            );
        }
        assert_eq!(instrumented_count(&mgk_counting_config(2, 3, 4, 2).unwrap(), 0).unwrap(), 0);
    }

    #[test]
    fn sweep_shapes() {
        let grid: Vec<(u64, u64)> = [64, 256]
            .iter()
            .flat_map(|&n| [16, 32, 64, 128, 256].map(|d| (n, d)))
            .collect();
        let rows = ratio_sweep(&grid, 8, 64, 2, false).unwrap();
        assert!(rows.iter().all(|r| r.flops_ratio < 1.0 && r.params_ratio < 1.0));
        for w in rows.chunks(5) {
            assert!(w.windows(2).all(|p| p[1].flops_ratio < p[0].flops_ratio));
        }
        assert_eq!(rows[0].params_ratio, rows[5].params_ratio);
        assert!(ratio_sweep(&[], 8, 64, 2, false).is_err());

        let csv = to_csv(&rows[..1]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.next().unwrap().split(',').count(), 13);
    }

    proptest! {
        #[test]
        fn savings_identity(n in 1u64..200, half in 1u64..8, d in 1u64..64, dx in 1u64..64) {
            let h = 2 * half;
            let diff = 2 * (softmax_flops(n, h, d, dx).unwrap() as i128 - mgk_flops_paper(n, h, d, dx, 2).unwrap() as i128);
            let (n, h, d, dx) = (n as i128, h as i128, d as i128, dx as i128);
            prop_assert_eq!(diff, n * n * h * (2 * d - 1) + 2 * n * h * d * (2 * dx + h * d - 1));
        }

        #[test]
        fn discrepancy_between_forms(n in 1u64..100, g in 1u64..5, m in 1u64..5, d in 1u64..32, dx in 1u64..32) {
            let h = g * m;
            let gap = mgk_flops(n, h, d, dx, m).unwrap() - mgk_flops_paper(n, h, d, dx, m).unwrap();
            prop_assert_eq!(gap, flops_form_discrepancy(n, h, d, m).unwrap());
            prop_assert_eq!(gap * m, n * h * d * (m - 1));
        }

        #[test]
        fn half_head_params_cheaper(half in 1u64..32, d in 1u64..64, dx in 1u64..128) {
            let h = 2 * half;
            prop_assert!(mgk_params(h, d, dx).unwrap() < softmax_params(h, d, dx).unwrap());
        }
    }
}
