//! Forward computation of every attention variant.
//!
//! Each variant has a tape form (`*_on`), used for training and gradient
//! checks, and a plain form over [`Tensor`]s that records onto a scratch
//! tape and returns the values.

use crate::attention::config::{EStep, Kernel, KeyMode};
use crate::attention::params::MixtureKeyParams;
use crate::em;
use crate::error::{config_err, MgkError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Mask, Tensor};

/// Values produced by one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `N×D_v`
    pub output: Tensor,
    /// Row-stochastic `N×N` attention matrix; `None` for linearized variants.
    pub scores: Option<Tensor>,
    /// `N×M` component posteriors, averaged over the keys each query can see.
    /// Present for soft E-step mixtures only.
    pub responsibilities: Option<Tensor>,
}

/// Tape handles for one head's forward pass.
#[derive(Debug, Clone)]
pub struct HeadVars {
    pub output: Var,
    pub scores: Option<Var>,
    /// Per-component `N×N` log-weights, kept for soft E-step mixtures only.
    pub component_logits: Vec<Var>,
    pub causal: bool,
}

impl HeadVars {
    fn plain(output: Var, scores: Option<Var>, causal: bool) -> Self {
        Self {
            output,
            scores,
            component_logits: Vec::new(),
            causal,
        }
    }

    /// `N×M` responsibilities averaged over visible keys; `None` unless the
    /// head is a soft E-step mixture.
    pub fn responsibilities(&self, tape: &Tape) -> Result<Option<Tensor>> {
        if self.component_logits.is_empty() {
            return Ok(None);
        }
        let comps: Vec<&Tensor> = self.component_logits.iter().map(|&l| tape.value(l)).collect();
        let mask = self.causal.then(|| Mask::causal(comps[0].rows()));
        averaged_responsibilities(&comps, mask.as_ref()).map(Some)
    }

    pub fn to_output(&self, tape: &Tape) -> Result<AttentionOutput> {
        Ok(AttentionOutput {
            output: tape.value(self.output).clone(),
            scores: self.scores.map(|s| tape.value(s).clone()),
            responsibilities: self.responsibilities(tape)?,
        })
    }
}

fn causal_mask(tape: &Tape, q: Var, k: Var, causal: bool) -> Result<Option<Mask>> {
    if !causal {
        return Ok(None);
    }
    let (n, n2) = (tape.value(q).rows(), tape.value(k).rows());
    if n != n2 {
        return Err(MgkError::Dimension {
            op: "causal mask",
            left: tape.value(q).shape().to_vec(),
            right: tape.value(k).shape().to_vec(),
        });
    }
    Ok(Some(Mask::causal(n)))
}

fn check_sigma2(sigma2: &[f64]) -> Result<()> {
    match sigma2.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        Some(s) => config_err(format!("sigma2 must be positive and finite, got {s}")),
        None => Ok(()),
    }
}

/// Builds the `M` key sets of one head from its input rows.
pub fn make_keys_on(
    tape: &mut Tape,
    x: Var,
    mode: KeyMode,
    projections: &[Var],
    offsets: &[Var],
    components: usize,
) -> Result<Vec<Var>> {
    match mode {
        KeyMode::IndependentProjections => {
            if projections.len() != components || !offsets.is_empty() {
                return config_err("independent keys need one projection per component and no offsets");
            }
            projections.iter().map(|&w| tape.project(x, w)).collect()
        }
        KeyMode::SharedShifted => {
            if projections.len() != 1 || offsets.len() != components {
                return config_err("shifted keys need one projection and one offset per component");
            }
            let base = tape.project(x, projections[0])?;
            offsets.iter().map(|&b| tape.add_row_broadcast(base, b)).collect()
        }
    }
}

pub fn softmax_attention_on(tape: &mut Tape, q: Var, k: Var, v: Var, causal: bool) -> Result<HeadVars> {
    let mask = causal_mask(tape, q, k, causal)?;
    let d = tape.value(q).cols();
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let scores = tape.softmax_rows(logits, mask.as_ref())?;
    let output = tape.matmul(scores, v)?;
    Ok(HeadVars::plain(output, Some(scores), causal))
}

pub fn gaussian_attention_on(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    sigma2: f64,
    causal: bool,
) -> Result<HeadVars> {
    check_sigma2(&[sigma2])?;
    let mask = causal_mask(tape, q, k, causal)?;
    let dist = tape.sqdist(q, k)?;
    let logits = tape.scale(dist, -0.5 / sigma2);
    let scores = tape.softmax_rows(logits, mask.as_ref())?;
    let output = tape.matmul(scores, v)?;
    Ok(HeadVars::plain(output, Some(scores), causal))
}

/// Mixture-of-keys attention. Component log-weights are mixed per key
/// position (log-sum-exp for soft E-steps, max for the hard E-step) and only
/// then normalized over the visible positions.
#[allow(clippy::too_many_arguments)]
pub fn mgk_attention_on(
    tape: &mut Tape,
    q: Var,
    keys: &[Var],
    v: Var,
    pi: Var,
    sigma2: &[f64],
    estep: EStep,
    kernel: Kernel,
    causal: bool,
) -> Result<HeadVars> {
    let m = keys.len();
    if m == 0 {
        return config_err("mixture attention needs at least one component");
    }
    if sigma2.len() != m {
        return config_err(format!("{} variances for {m} components", sigma2.len()));
    }
    check_sigma2(sigma2)?;
    if tape.value(pi).len() != m {
        return config_err(format!("{} mixing weights for {m} components", tape.value(pi).len()));
    }
    let mask = causal_mask(tape, q, keys[0], causal)?;

    let log_pi = if estep.is_soft() {
        let p = tape.normalize_sum(pi)?;
        Some(tape.log(p))
    } else {
        None
    };
    let mut logits = Vec::with_capacity(m);
    for (r, (&k, &s2)) in keys.iter().zip(sigma2).enumerate() {
        let base = match kernel {
            Kernel::GaussianDistance => {
                let dist = tape.sqdist(q, k)?;
                tape.scale(dist, -0.5 / s2)
            }
            Kernel::DotProduct => {
                let kt = tape.transpose(k)?;
                let dots = tape.matmul(q, kt)?;
                tape.scale(dots, 1.0 / s2)
            }
        };
        let l = match log_pi {
            Some(lp) => {
                let lpr = tape.index(lp, r)?;
                tape.add_scalar(base, lpr)?
            }
            None => base,
        };
        logits.push(l);
    }
    let mixed = if estep.is_soft() {
        tape.logsumexp_stack(&logits)?
    } else {
        tape.max_stack(&logits)?
    };
    let scores = tape.softmax_rows(mixed, mask.as_ref())?;
    let output = tape.matmul(scores, v)?;
    Ok(HeadVars {
        output,
        scores: Some(scores),
        component_logits: if estep.is_soft() { logits } else { Vec::new() },
        causal,
    })
}

/// `γ_i = mean_j softmax_r(l_r(i, j))` over the positions row `i` may see.
fn averaged_responsibilities(logits: &[&Tensor], mask: Option<&Mask>) -> Result<Tensor> {
    let (n, n2) = (logits[0].rows(), logits[0].cols());
    let m = logits.len();
    let mut out = vec![0.0; n * m];
    let mut terms = vec![0.0; m];
    for i in 0..n {
        let mut seen = 0usize;
        for j in 0..n2 {
            if mask.is_some_and(|mk| !mk.keeps(i, j)) {
                continue;
            }
            for (t, l) in terms.iter_mut().zip(logits) {
                *t = l.at(i, j);
            }
            let gamma = em::posterior_from_log_terms(&terms).ok_or(MgkError::DegenerateResponsibility { row: i })?;
            out[i * m..(i + 1) * m].iter_mut().zip(&gamma).for_each(|(o, g)| *o += g);
            seen += 1;
        }
        if seen > 0 {
            out[i * m..(i + 1) * m].iter_mut().for_each(|o| *o /= seen as f64);
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Shared tail of the linearized variants: `φ(q)` against already-mapped
/// (and, for mixtures, already-mixed) keys.
fn linear_core(tape: &mut Tape, fq: Var, fk: Var, v: Var, causal: bool) -> Result<Var> {
    let (n, n2) = (tape.value(fq).rows(), tape.value(fk).rows());
    if tape.value(v).rows() != n2 {
        return Err(MgkError::Dimension {
            op: "linear attention",
            left: tape.value(fk).shape().to_vec(),
            right: tape.value(v).shape().to_vec(),
        });
    }
    if causal {
        if n != n2 {
            return Err(MgkError::Dimension {
                op: "causal linear attention",
                left: tape.value(fq).shape().to_vec(),
                right: tape.value(fk).shape().to_vec(),
            });
        }
        let outer = tape.row_outer(fk, v)?;
        let state = tape.cumsum_rows(outer)?;
        let num = tape.row_vecmat(fq, state)?;
        let ksum = tape.cumsum_rows(fk)?;
        let den = tape.row_dot(fq, ksum)?;
        tape.div_rows(num, den)
    } else {
        let fkt = tape.transpose(fk)?;
        let kv = tape.matmul(fkt, v)?;
        let num = tape.matmul(fq, kv)?;
        let ksum = tape.sum_rows(fk)?;
        let ksum_t = tape.transpose(ksum)?;
        let den = tape.matmul(fq, ksum_t)?;
        tape.div_rows(num, den)
    }
}

pub fn linear_attention_on(tape: &mut Tape, q: Var, k: Var, v: Var, causal: bool) -> Result<HeadVars> {
    let fq = tape.elu_plus_one(q);
    let fk = tape.elu_plus_one(k);
    let output = linear_core(tape, fq, fk, v, causal)?;
    Ok(HeadVars::plain(output, None, causal))
}

/// Linearized mixture of keys: `Σ_r π_r φ(k_r)` stands in for `φ(k)`.
pub fn mlk_attention_on(
    tape: &mut Tape,
    q: Var,
    keys: &[Var],
    v: Var,
    pi: Var,
    causal: bool,
) -> Result<HeadVars> {
    let m = keys.len();
    if m == 0 {
        return config_err("mixture attention needs at least one component");
    }
    if tape.value(pi).len() != m {
        return config_err(format!("{} mixing weights for {m} components", tape.value(pi).len()));
    }
    let p = tape.normalize_sum(pi)?;
    let fq = tape.elu_plus_one(q);
    let mut mixed: Option<Var> = None;
    for (r, &k) in keys.iter().enumerate() {
        let fk = tape.elu_plus_one(k);
        let pr = tape.index(p, r)?;
        let term = tape.mul_scalar(fk, pr)?;
        mixed = Some(match mixed {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let output = linear_core(tape, fq, mixed.expect("m >= 1"), v, causal)?;
    Ok(HeadVars::plain(output, None, causal))
}

fn check_pi(pi: &[f64]) -> Result<()> {
    if pi.iter().any(|&p| !(p >= 0.0)) {
        return config_err(format!("mixing weights must be non-negative, got {pi:?}"));
    }
    Ok(())
}

/// Keys of every component for input rows `x` (`N×D_x`).
pub fn make_keys(x: &Tensor, params: &MixtureKeyParams) -> Result<Vec<Tensor>> {
    params.validate()?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let ws: Vec<Var> = params.projections.iter().map(|w| tape.leaf(w.clone())).collect();
    let bs: Vec<Var> = params.offsets.iter().map(|b| tape.leaf(b.clone())).collect();
    let keys = make_keys_on(&mut tape, xv, params.mode, &ws, &bs, params.components())?;
    Ok(keys.into_iter().map(|k| tape.value(k).clone()).collect())
}

pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<AttentionOutput> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    Ok(softmax_attention_on(&mut tape, qv, kv, vv, causal)?.to_output(&tape)?)
}

pub fn gaussian_attention(q: &Tensor, k: &Tensor, v: &Tensor, sigma2: f64, causal: bool) -> Result<AttentionOutput> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    Ok(gaussian_attention_on(&mut tape, qv, kv, vv, sigma2, causal)?.to_output(&tape)?)
}

#[allow(clippy::too_many_arguments)]
pub fn mgk_attention(
    q: &Tensor,
    keys: &[Tensor],
    v: &Tensor,
    pi: &[f64],
    sigma2: &[f64],
    estep: EStep,
    kernel: Kernel,
    causal: bool,
) -> Result<AttentionOutput> {
    check_pi(pi)?;
    let mut tape = Tape::new();
    let qv = tape.leaf(q.clone());
    let kvs: Vec<Var> = keys.iter().map(|k| tape.leaf(k.clone())).collect();
    let vv = tape.leaf(v.clone());
    let pv = tape.leaf(Tensor::vector(pi.to_vec()));
    Ok(mgk_attention_on(&mut tape, qv, &kvs, vv, pv, sigma2, estep, kernel, causal)?.to_output(&tape)?)
}

pub fn linear_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<AttentionOutput> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    Ok(linear_attention_on(&mut tape, qv, kv, vv, causal)?.to_output(&tape)?)
}

pub fn mlk_attention(q: &Tensor, keys: &[Tensor], v: &Tensor, pi: &[f64], causal: bool) -> Result<AttentionOutput> {
    check_pi(pi)?;
    let mut tape = Tape::new();
    let qv = tape.leaf(q.clone());
    let kvs: Vec<Var> = keys.iter().map(|k| tape.leaf(k.clone())).collect();
    let vv = tape.leaf(v.clone());
    let pv = tape.leaf(Tensor::vector(pi.to_vec()));
    Ok(mlk_attention_on(&mut tape, qv, &kvs, vv, pv, causal)?.to_output(&tape)?)
}

/// The `N×N` matrix a linearized head applies implicitly,
/// `A_ij = φ(q_i)·κ_j / Σ_j' φ(q_i)·κ_j'` with `κ_j = Σ_r π_r φ(k_jr)`.
/// Quadratic in `N`; meant for diagnostics only.
pub fn linearized_scores(q: &Tensor, keys: &[Tensor], pi: &[f64], causal: bool) -> Result<Tensor> {
    check_pi(pi)?;
    if keys.is_empty() || keys.len() != pi.len() {
        return config_err("one mixing weight per key set is required");
    }
    let total: f64 = pi.iter().sum();
    let fq = q.map(crate::tape::elu_plus_one);
    let (n, d) = (q.rows(), q.cols());
    let n2 = keys[0].rows();
    let mut kappa = Tensor::zeros(&[n2, d]);
    for (k, p) in keys.iter().zip(pi) {
        if k.shape() != [n2, d] {
            return Err(MgkError::Dimension {
                op: "linearized_scores",
                left: q.shape().to_vec(),
                right: k.shape().to_vec(),
            });
        }
        let fk = k.map(crate::tape::elu_plus_one);
        kappa.data_mut().iter_mut().zip(fk.data()).for_each(|(o, f)| *o += p / total * f);
    }
    let mut scores = crate::tensor::matmul_nt(&fq, &kappa)?;
    for i in 0..n {
        let row = &mut scores.data_mut()[i * n2..(i + 1) * n2];
        if causal {
            row.iter_mut().skip(i + 1).for_each(|v| *v = 0.0);
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(scores)
}
