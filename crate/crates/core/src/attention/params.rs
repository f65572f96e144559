use serde::{Deserialize, Serialize};

use crate::attention::config::{AttentionConfig, KeyMode};
use crate::error::{config_err, Result};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Trainable parameter families, used to report gradient checks and to
/// verify that every family receives updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    WQ,
    Keys,
    Offsets,
    WV,
    WO,
    Pi,
    Embedding,
    Position,
    Norm,
    FeedForward,
    Classifier,
}

/// Key parameters of one head. Mode A keeps one projection per component;
/// mode B keeps a single projection and one offset vector per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureKeyParams {
    pub mode: KeyMode,
    /// `D×D_x` matrices: `M` of them in mode A, one in mode B.
    pub projections: Vec<Tensor>,
    /// Length-`D` offsets, mode B only.
    pub offsets: Vec<Tensor>,
    /// Unnormalized positive mixing weights, length `M`, shared across positions.
    pub pi: Tensor,
    pub sigma2: Vec<f64>,
}

impl MixtureKeyParams {
    pub fn components(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.components();
        if m == 0 {
            return config_err("mixture needs at least one component");
        }
        match self.mode {
            KeyMode::IndependentProjections => {
                if self.projections.len() != m || !self.offsets.is_empty() {
                    return config_err(format!(
                        "independent keys need {m} projections and no offsets, got {} and {}",
                        self.projections.len(),
                        self.offsets.len()
                    ));
                }
            }
            KeyMode::SharedShifted => {
                if self.projections.len() != 1 || self.offsets.len() != m {
                    return config_err(format!(
                        "shifted keys need 1 projection and {m} offsets, got {} and {}",
                        self.projections.len(),
                        self.offsets.len()
                    ));
                }
            }
        }
        let d = self.projections[0].shape().first().copied().unwrap_or(0);
        if self.projections.iter().any(|w| w.shape() != self.projections[0].shape() || !w.is_matrix())
            || self.offsets.iter().any(|b| b.len() != d)
        {
            return config_err("key projections and offsets disagree on shape");
        }
        if self.pi.data().iter().any(|&p| !(p >= 0.0)) || !(self.pi.data().iter().sum::<f64>() > 0.0) {
            return config_err(format!("mixing weights must be non-negative, got {:?}", self.pi.data()));
        }
        if self.sigma2.len() != m || self.sigma2.iter().any(|&s| !(s > 0.0)) {
            return config_err("sigma2 must hold one positive variance per component");
        }
        Ok(())
    }

    pub fn normalized_pi(&self) -> Vec<f64> {
        let s: f64 = self.pi.data().iter().sum();
        self.pi.data().iter().map(|p| p / s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    /// `D×D_x`
    pub w_q: Tensor,
    /// `D_v×D_x`
    pub w_v: Tensor,
    pub keys: MixtureKeyParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadParams {
    pub heads: Vec<ProjectionParams>,
    /// `(H·D_v)×out_dim`, applied on the right of the concatenated heads.
    pub w_o: Tensor,
}

impl MultiHeadParams {
    /// Projections ~ N(0, 1/fan_in); mixing weights 0.5 each; offsets ~ N(0, 1).
    pub fn init(config: &AttentionConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let (d, dx, dv, m) = (config.head_dim, config.input_dim, config.value_dim, config.components);
        let std_in = 1.0 / (dx as f64).sqrt();
        let heads = (0..config.heads)
            .map(|_| {
                let w_q = Tensor::randn(&[d, dx], std_in, rng);
                let (projections, offsets) = match config.key_mode {
                    KeyMode::IndependentProjections => {
                        ((0..m).map(|_| Tensor::randn(&[d, dx], std_in, rng)).collect(), vec![])
                    }
                    KeyMode::SharedShifted => (
                        vec![Tensor::randn(&[d, dx], std_in, rng)],
                        (0..m).map(|_| Tensor::randn(&[d], 1.0, rng)).collect(),
                    ),
                };
                let w_v = Tensor::randn(&[dv, dx], std_in, rng);
                ProjectionParams {
                    w_q,
                    w_v,
                    keys: MixtureKeyParams {
                        mode: config.key_mode,
                        projections,
                        offsets,
                        pi: Tensor::filled(&[m], 0.5),
                        sigma2: config.sigma2.clone(),
                    },
                }
            })
            .collect();
        let cat = config.heads * dv;
        let w_o = Tensor::randn(&[cat, config.output_dim()], 1.0 / (cat as f64).sqrt(), rng);
        Ok(Self { heads, w_o })
    }

    pub fn validate(&self, config: &AttentionConfig) -> Result<()> {
        config.validate()?;
        if self.heads.len() != config.heads {
            return config_err(format!(
                "config has {} heads but {} parameter sets were given",
                config.heads,
                self.heads.len()
            ));
        }
        let (d, dx, dv) = (config.head_dim, config.input_dim, config.value_dim);
        for (h, p) in self.heads.iter().enumerate() {
            p.keys.validate()?;
            if p.keys.mode != config.key_mode || p.keys.components() != config.components {
                return config_err(format!("head {h} key parameters do not match the config"));
            }
            if p.w_q.shape() != [d, dx] || p.w_v.shape() != [dv, dx] || p.keys.projections[0].shape() != [d, dx] {
                return config_err(format!("head {h} projection shapes do not match the config"));
            }
        }
        if self.w_o.shape() != [config.heads * dv, config.output_dim()] {
            return config_err(format!(
                "output projection is {:?}, expected [{}, {}]",
                self.w_o.shape(),
                config.heads * dv,
                config.output_dim()
            ));
        }
        Ok(())
    }

    /// Registers every tensor as a tape leaf. `registry` receives the leaves
    /// in the same order as [`MultiHeadParams::tensors_mut`] yields them.
    pub fn bind(&self, tape: &mut Tape, registry: &mut Vec<(ParamGroup, Var)>) -> BoundMultiHead {
        let mut leaf = |tape: &mut Tape, group, t: &Tensor| {
            let v = tape.leaf(t.clone());
            registry.push((group, v));
            v
        };
        let heads = self
            .heads
            .iter()
            .map(|p| BoundHead {
                w_q: leaf(tape, ParamGroup::WQ, &p.w_q),
                projections: p.keys.projections.iter().map(|w| leaf(tape, ParamGroup::Keys, w)).collect(),
                offsets: p.keys.offsets.iter().map(|b| leaf(tape, ParamGroup::Offsets, b)).collect(),
                w_v: leaf(tape, ParamGroup::WV, &p.w_v),
                pi: leaf(tape, ParamGroup::Pi, &p.keys.pi),
                mode: p.keys.mode,
                sigma2: p.keys.sigma2.clone(),
            })
            .collect();
        let w_o = leaf(tape, ParamGroup::WO, &self.w_o);
        BoundMultiHead { heads, w_o }
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        let mut out = Vec::new();
        for p in &mut self.heads {
            out.push((ParamGroup::WQ, &mut p.w_q));
            out.extend(p.keys.projections.iter_mut().map(|w| (ParamGroup::Keys, w)));
            out.extend(p.keys.offsets.iter_mut().map(|b| (ParamGroup::Offsets, b)));
            out.push((ParamGroup::WV, &mut p.w_v));
            out.push((ParamGroup::Pi, &mut p.keys.pi));
        }
        out.push((ParamGroup::WO, &mut self.w_o));
        out
    }
}

/// Tape handles for one head's parameters.
#[derive(Debug, Clone)]
pub struct BoundHead {
    pub w_q: Var,
    pub w_v: Var,
    pub projections: Vec<Var>,
    pub offsets: Vec<Var>,
    pub pi: Var,
    pub mode: KeyMode,
    pub sigma2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BoundMultiHead {
    pub heads: Vec<BoundHead>,
    pub w_o: Var,
}
