use crate::attention::config::{AttentionConfig, Variant};
use crate::attention::kernels::{
    gaussian_attention_on, linear_attention_on, make_keys_on, mgk_attention_on, mlk_attention_on,
    softmax_attention_on, AttentionOutput, HeadVars,
};
use crate::attention::params::{BoundHead, BoundMultiHead, MultiHeadParams};
use crate::error::{config_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadOutput {
    /// `N×out_dim`, after the output projection.
    pub output: Tensor,
    pub heads: Vec<AttentionOutput>,
}

#[derive(Debug, Clone)]
pub struct MultiHeadVars {
    pub output: Var,
    pub heads: Vec<HeadVars>,
    /// Per-head query rows.
    pub queries: Vec<Var>,
    /// Per-head key sets, one per component.
    pub keys: Vec<Vec<Var>>,
}

/// Runs one head on input rows `x`; also returns the queries and key sets.
pub fn head_on(
    tape: &mut Tape,
    x: Var,
    head: &BoundHead,
    config: &AttentionConfig,
) -> Result<(HeadVars, Var, Vec<Var>)> {
    let q = tape.project(x, head.w_q)?;
    let keys = make_keys_on(tape, x, head.mode, &head.projections, &head.offsets, config.components)?;
    let v = tape.project(x, head.w_v)?;
    let vars = match config.variant {
        Variant::Softmax => softmax_attention_on(tape, q, keys[0], v, config.causal),
        Variant::Gaussian => gaussian_attention_on(tape, q, keys[0], v, head.sigma2[0], config.causal),
        Variant::Mgk => mgk_attention_on(
            tape,
            q,
            &keys,
            v,
            head.pi,
            &head.sigma2,
            config.estep,
            config.kernel,
            config.causal,
        ),
        Variant::Linear => linear_attention_on(tape, q, keys[0], v, config.causal),
        Variant::Mlk => mlk_attention_on(tape, q, &keys, v, head.pi, config.causal),
    }?;
    Ok((vars, q, keys))
}

pub fn multi_head_on(
    tape: &mut Tape,
    x: Var,
    bound: &BoundMultiHead,
    config: &AttentionConfig,
) -> Result<MultiHeadVars> {
    config.validate()?;
    if bound.heads.len() != config.heads {
        return config_err(format!(
            "config has {} heads but {} parameter sets were given",
            config.heads,
            bound.heads.len()
        ));
    }
    let mut heads = Vec::with_capacity(config.heads);
    let mut queries = Vec::with_capacity(config.heads);
    let mut keys = Vec::with_capacity(config.heads);
    for h in &bound.heads {
        let (vars, q, k) = head_on(tape, x, h, config)?;
        heads.push(vars);
        queries.push(q);
        keys.push(k);
    }
    let outs: Vec<Var> = heads.iter().map(|h| h.output).collect();
    let cat = tape.concat_cols(&outs)?;
    let output = tape.matmul(cat, bound.w_o)?;
    Ok(MultiHeadVars {
        output,
        heads,
        queries,
        keys,
    })
}

/// Concatenates the head outputs along the feature axis and applies `W_O`.
pub fn multi_head(x: &Tensor, params: &MultiHeadParams, config: &AttentionConfig) -> Result<MultiHeadOutput> {
    params.validate(config)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let bound = params.bind(&mut tape, &mut Vec::new());
    let vars = multi_head_on(&mut tape, xv, &bound, config)?;
    Ok(MultiHeadOutput {
        output: tape.value(vars.output).clone(),
        heads: vars.heads.iter().map(|h| h.to_output(&tape)).collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::config::{EStep, KeyMode};
    use crate::attention::kernels::{mgk_attention, softmax_attention};
    use crate::rng::SplitMix64;
    use crate::tensor::{matmul, matmul_nt};
    use proptest::prelude::*;

    fn random(rng: &mut SplitMix64, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn single_head_identity_output() {
        let cfg = AttentionConfig::new(Variant::Softmax, 1, 3, 4);
        let mut rng = SplitMix64::new(1);
        let mut p = MultiHeadParams::init(&cfg, &mut rng).unwrap();
        p.w_o = Tensor::eye(3);
        let x = random(&mut rng, 5, 4);
        let out = multi_head(&x, &p, &cfg).unwrap();
        let h = &p.heads[0];
        let q = matmul_nt(&x, &h.w_q).unwrap();
        let k = matmul_nt(&x, &h.keys.projections[0]).unwrap();
        let v = matmul_nt(&x, &h.w_v).unwrap();
        let single = softmax_attention(&q, &k, &v, false).unwrap();
        assert!(out.output.max_abs_diff(&single.output).unwrap() < 1e-14);
    }

    #[test]
    fn identical_heads_duplicate_features() {
        let cfg = AttentionConfig::new(Variant::Mgk, 2, 2, 3).with_key_mode(KeyMode::SharedShifted);
        let mut rng = SplitMix64::new(2);
        let mut p = MultiHeadParams::init(&cfg, &mut rng).unwrap();
        p.heads[1] = p.heads[0].clone();
        p.w_o = Tensor::eye(4);
        let x = random(&mut rng, 4, 3);
        let out = multi_head(&x, &p, &cfg).unwrap().output;
        for i in 0..4 {
            assert_eq!(out.row(i)[..2], out.row(i)[2..]);
        }
    }

    #[test]
    fn matches_per_head_oracle() {
        let cfg = AttentionConfig::new(Variant::Mgk, 2, 3, 4).with_out_dim(5);
        let mut rng = SplitMix64::new(3);
        let p = MultiHeadParams::init(&cfg, &mut rng).unwrap();
        let x = random(&mut rng, 6, 4);
        let out = multi_head(&x, &p, &cfg).unwrap();
        let mut cat = vec![Vec::new(); 6];
        for h in &p.heads {
            let q = matmul_nt(&x, &h.w_q).unwrap();
            let keys: Vec<Tensor> = h.keys.projections.iter().map(|w| matmul_nt(&x, w).unwrap()).collect();
            let v = matmul_nt(&x, &h.w_v).unwrap();
            let o = mgk_attention(
                &q,
                &keys,
                &v,
                &h.keys.normalized_pi(),
                &h.keys.sigma2,
                EStep::SoftLearnedPrior,
                cfg.kernel,
                false,
            )
            .unwrap();
            for (i, row) in cat.iter_mut().enumerate() {
                row.extend_from_slice(o.output.row(i));
            }
        }
        let expected = matmul(&Tensor::from_rows(&cat).unwrap(), &p.w_o).unwrap();
        assert_eq!(out.output.shape(), &[6, 5]);
        assert!(out.output.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn head_count_mismatch() {
        let cfg = AttentionConfig::new(Variant::Softmax, 2, 2, 2);
        let p = MultiHeadParams::init(&AttentionConfig::new(Variant::Softmax, 1, 2, 2), &mut SplitMix64::new(4)).unwrap();
        let err = multi_head(&Tensor::zeros(&[2, 2]), &p, &cfg).unwrap_err();
        assert!(matches!(err, crate::MgkError::Config(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn permutation_equivariance(seed in any::<u64>(), variant in 0usize..5, n in 2usize..7) {
            let variant = Variant::ALL[variant];
            let cfg = AttentionConfig::new(variant, 2, 3, 4);
            let mut rng = SplitMix64::new(seed);
            let p = MultiHeadParams::init(&cfg, &mut rng).unwrap();
            let x = random(&mut rng, n, 4);
            let perm: Vec<usize> = (0..n).rev().collect();
            let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let a = multi_head(&x, &p, &cfg).unwrap().output;
            let b = multi_head(&xp, &p, &cfg).unwrap().output;
            for (new, &old) in perm.iter().enumerate() {
                for (u, w) in b.row(new).iter().zip(a.row(old)) {
                    prop_assert!((u - w).abs() < 1e-10 * (1.0 + w.abs()));
                }
            }
        }

        #[test]
        fn score_rows_are_stochastic(seed in any::<u64>(), variant in 0usize..3, causal: bool, n in 1usize..10) {
            let variant = [Variant::Softmax, Variant::Gaussian, Variant::Mgk][variant];
            let cfg = AttentionConfig::new(variant, 2, 3, 4).with_causal(causal);
            let mut rng = SplitMix64::new(seed);
            let p = MultiHeadParams::init(&cfg, &mut rng).unwrap();
            let x = random(&mut rng, n, 4);
            for h in multi_head(&x, &p, &cfg).unwrap().heads {
                let a = h.scores.unwrap();
                for i in 0..n {
                    prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    prop_assert!(a.row(i).iter().all(|&v| v >= 0.0));
                    if causal {
                        prop_assert!(a.row(i)[i + 1..].iter().all(|&v| v == 0.0));
                    }
                }
            }
        }
    }
}
