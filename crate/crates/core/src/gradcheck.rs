//! Central finite-difference checks of the tape's analytic gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::multi_head::multi_head_on;
use crate::attention::{AttentionConfig, EStep, Kernel, KeyMode, MultiHeadParams, ParamGroup, Variant};
use crate::error::Result;
use crate::rng::SplitMix64;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::training::{Model, ModelSpec};

pub const FD_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub name: String,
    pub groups: Vec<GroupCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `|g_a − g_fd| / max(|g_fd|, ABS_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(ABS_FLOOR)
}

/// Compares analytic and central-difference gradients for every parameter
/// tensor. `tensors` yields the parameters in registry order; `loss` records
/// the forward pass and returns the loss and the registry.
fn check<P: Clone>(
    name: &str,
    params: &P,
    tensors: impl Fn(&mut P) -> Vec<(ParamGroup, &mut Tensor)>,
    loss: impl Fn(&P, &mut Tape) -> Result<(Var, Vec<(ParamGroup, Var)>)>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let (l, registry) = loss(params, &mut tape)?;
    let grads: Gradients = tape.backward(l)?;
    let eval = |p: &P| -> Result<f64> {
        let mut t = Tape::new();
        let (l, _) = loss(p, &mut t)?;
        Ok(t.value(l).data()[0])
    };

    let mut groups: BTreeMap<ParamGroup, GroupCheck> = BTreeMap::new();
    let mut work = params.clone();
    for (idx, &(group, var)) in registry.iter().enumerate() {
        // parameters the loss never reaches (e.g. mixing weights under hard assignment)
        let Some(g) = grads.get(var) else { continue };
        let g = g.clone();
        let entry = groups.entry(group).or_insert(GroupCheck {
            group,
            entries: 0,
            max_rel_error: 0.0,
        });
        for e in 0..g.len() {
            let orig = tensors(&mut work)[idx].1.data()[e];
            tensors(&mut work)[idx].1.data_mut()[e] = orig + FD_STEP;
            let plus = eval(&work)?;
            tensors(&mut work)[idx].1.data_mut()[e] = orig - FD_STEP;
            let minus = eval(&work)?;
            tensors(&mut work)[idx].1.data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            entry.entries += 1;
            entry.max_rel_error = entry.max_rel_error.max(relative_error(g.data()[e], fd));
        }
    }
    let groups: Vec<GroupCheck> = groups.into_values().collect();
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        name: name.to_string(),
        groups,
        max_rel_error,
        passed: max_rel_error < TOLERANCE,
    })
}

/// Checks one attention layer under `Σ c⊙out + ½Σ out²` with random `x`
/// and `c` of `n` rows.
pub fn check_attention(name: &str, config: &AttentionConfig, n: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::new(seed);
    let params = MultiHeadParams::init(config, &mut rng)?;
    // keep mixing weights away from uniform so their gradient is generic
    let params = {
        let mut p = params;
        for h in &mut p.heads {
            h.keys.pi.data_mut().iter_mut().for_each(|v| *v = 0.25 + rng.next_f64());
        }
        p
    };
    let x = Tensor::randn(&[n, config.input_dim], 1.0, &mut rng);
    let c = Tensor::randn(&[n, config.output_dim()], 1.0, &mut rng);
    check(name, &params, MultiHeadParams::tensors_mut, |p, tape| {
        let mut registry = Vec::new();
        let bound = p.bind(tape, &mut registry);
        let xv = tape.leaf(x.clone());
        let cv = tape.leaf(c.clone());
        let out = multi_head_on(tape, xv, &bound, config)?.output;
        let lin = tape.mul(cv, out)?;
        let lin = tape.sum_all(lin);
        let sq = tape.mul(out, out)?;
        let sq = tape.sum_all(sq);
        let sq = tape.scale(sq, 0.5);
        Ok((tape.add(lin, sq)?, registry))
    })
}

/// Checks a full classifier on one sequence under cross-entropy.
pub fn check_model(name: &str, spec: &ModelSpec, seed: u64) -> Result<GradCheckReport> {
    let mut model = Model::init(spec, seed)?;
    let mut rng = SplitMix64::new(seed ^ 0xA5A5);
    for b in &mut model.blocks {
        for h in &mut b.attention.heads {
            h.keys.pi.data_mut().iter_mut().for_each(|v| *v = 0.25 + rng.next_f64());
        }
        // non-trivial norm parameters so their gradients are generic
        for t in [&mut b.norm1_bias, &mut b.norm2_bias, &mut b.ff_b1, &mut b.ff_b2] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.1 * rng.normal());
        }
    }
    let tokens: Vec<usize> = (0..spec.max_len).map(|_| rng.below(spec.tokens as u64) as usize).collect();
    let label = rng.below(spec.classes as u64) as usize;
    check(name, &model, Model::tensors_mut, |m, tape| {
        let bound = m.bind(tape);
        let fwd = m.forward_on(tape, &bound, &tokens)?;
        Ok((tape.cross_entropy(fwd.logits, label)?, bound.registry.clone()))
    })
}

/// Every attention variant and option, on a layer with `D_x = 8`, `D = 4`,
/// two heads.
pub fn standard_cases() -> Vec<(String, AttentionConfig)> {
    let base = |v| AttentionConfig::new(v, 2, 4, 8);
    let shifted = |v| base(v).with_key_mode(KeyMode::SharedShifted);
    vec![
        ("softmax".into(), base(Variant::Softmax)),
        ("softmax_causal".into(), base(Variant::Softmax).with_causal(true)),
        ("gaussian".into(), base(Variant::Gaussian)),
        ("mgk".into(), base(Variant::Mgk)),
        ("smgk".into(), shifted(Variant::Mgk)),
        ("mgk_m3".into(), base(Variant::Mgk).with_components(3)),
        ("mgk_dot".into(), base(Variant::Mgk).with_kernel(Kernel::DotProduct)),
        ("mgk_hard".into(), base(Variant::Mgk).with_estep(EStep::HardAssign)),
        ("smgk_hard".into(), shifted(Variant::Mgk).with_estep(EStep::HardAssign)),
        ("mgk_mstep".into(), base(Variant::Mgk).with_estep(EStep::SoftMStepPrior)),
        ("mgk_causal".into(), base(Variant::Mgk).with_causal(true)),
        ("linear".into(), base(Variant::Linear)),
        ("linear_causal".into(), base(Variant::Linear).with_causal(true)),
        ("mlk".into(), base(Variant::Mlk)),
        ("smlk".into(), shifted(Variant::Mlk)),
        ("mlk_causal".into(), base(Variant::Mlk).with_causal(true)),
    ]
}

/// Sequence length used by [`gradient_suite`].
pub const SUITE_LEN: usize = 6;

/// Runs [`standard_cases`] plus two full-model checks (width 8, one layer
/// each of MGK and sMLK attention).
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = standard_cases()
        .iter()
        .map(|(name, cfg)| check_attention(name, cfg, SUITE_LEN, seed))
        .collect::<Result<Vec<_>>>()?;
    for (name, attn) in [
        ("model_mgk", AttentionConfig::new(Variant::Mgk, 1, 4, 8)),
        (
            "model_smlk",
            AttentionConfig::new(Variant::Mlk, 2, 4, 8).with_key_mode(KeyMode::SharedShifted),
        ),
    ] {
        let mut spec = ModelSpec::new(attn, 8, 6, SUITE_LEN, 4);
        spec.ff_hidden = 8;
        out.push(check_model(name, &spec, seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        for r in gradient_suite(2024).unwrap() {
            assert!(r.passed, "{}: {:?}", r.name, r.groups);
        }
    }

    #[test]
    fn reports_cover_expected_groups() {
        let reports = gradient_suite(1).unwrap();
        let groups = |name: &str| -> Vec<ParamGroup> {
            reports.iter().find(|r| r.name == name).unwrap().groups.iter().map(|g| g.group).collect()
        };
        use ParamGroup::*;
        assert_eq!(groups("smgk"), vec![WQ, Keys, Offsets, WV, WO, Pi]);
        assert_eq!(groups("mgk_hard"), vec![WQ, Keys, WV, WO]);
        assert_eq!(groups("softmax"), vec![WQ, Keys, WV, WO]);
        assert_eq!(groups("mlk"), vec![WQ, Keys, WV, WO, Pi]);
        let model = groups("model_mgk");
        for g in [Embedding, Position, Norm, FeedForward, Classifier, Pi] {
            assert!(model.contains(&g), "{g:?}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // a loss whose recorded value does not follow the leaf: the check
        // must flag the mismatch
        let p = Tensor::vector(vec![1.0, 2.0]);
        let r = check(
            "bad",
            &p,
            |t| vec![(ParamGroup::WQ, t)],
            |t, tape| {
                let v = tape.leaf(t.clone());
                let doubled = tape.scale(v, 2.0);
                let s = tape.sum_all(doubled);
                // forward uses 3x, backward sees 2x
                let shift = tape.leaf(Tensor::scalar(t.data().iter().sum::<f64>()));
                Ok((tape.add(s, shift)?, vec![(ParamGroup::WQ, v)]))
            },
        )
        .unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 1.0 / 3.0).abs() < 1e-8);
    }
}
