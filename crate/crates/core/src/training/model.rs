use serde::{Deserialize, Serialize};

use crate::attention::multi_head::{multi_head_on, MultiHeadVars};
use crate::attention::params::BoundMultiHead;
use crate::attention::{AttentionConfig, MultiHeadParams, ParamGroup};
use crate::error::{config_err, Result};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: usize,
    /// Token embedding width `D_x`; every block maps back to it.
    pub model_dim: usize,
    pub ff_hidden: usize,
    pub attention: AttentionConfig,
    /// Embedding table rows.
    pub tokens: usize,
    /// Longest sequence the position table covers.
    pub max_len: usize,
    pub classes: usize,
}

impl ModelSpec {
    /// Two layers, 128 hidden units, attention input and output both at
    /// `model_dim`.
    pub fn new(attention: AttentionConfig, model_dim: usize, tokens: usize, max_len: usize, classes: usize) -> Self {
        let attention = AttentionConfig {
            input_dim: model_dim,
            out_dim: Some(model_dim),
            ..attention
        };
        Self {
            layers: 2,
            model_dim,
            ff_hidden: 128,
            attention,
            tokens,
            max_len,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.layers == 0 || self.model_dim == 0 || self.ff_hidden == 0 {
            return config_err("layers, model_dim and ff_hidden must be positive");
        }
        if self.tokens == 0 || self.max_len == 0 || self.classes < 2 {
            return config_err("tokens and max_len must be positive and classes at least 2");
        }
        if self.attention.input_dim != self.model_dim || self.attention.output_dim() != self.model_dim {
            return config_err(format!(
                "attention maps {} -> {} but the model width is {}",
                self.attention.input_dim,
                self.attention.output_dim(),
                self.model_dim
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub attention: MultiHeadParams,
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    /// `ff_hidden×D_x`
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    /// `D_x×ff_hidden`
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub embedding: Tensor,
    pub position: Tensor,
    pub blocks: Vec<Block>,
    /// `classes×D_x`
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
}

#[derive(Debug, Clone)]
struct BoundBlock {
    attention: BoundMultiHead,
    norm1: (Var, Var),
    ff1: (Var, Var),
    ff2: (Var, Var),
    norm2: (Var, Var),
}

/// Tape leaves for every model parameter.
#[derive(Debug, Clone)]
pub struct BoundModel {
    embedding: Var,
    position: Var,
    blocks: Vec<BoundBlock>,
    classifier: (Var, Var),
    /// Leaves in [`Model::tensors_mut`] order.
    pub registry: Vec<(ParamGroup, Var)>,
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `1×classes`
    pub logits: Var,
    pub layers: Vec<MultiHeadVars>,
}

impl Model {
    /// Embeddings ~ N(0, 1), positions ~ N(0, 0.01), dense weights
    /// ~ N(0, 1/fan_in), biases 0, norm gains 1.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SplitMix64::new(seed);
        let dx = spec.model_dim;
        let ff = spec.ff_hidden;
        let embedding = Tensor::randn(&[spec.tokens, dx], 1.0, &mut rng);
        let position = Tensor::randn(&[spec.max_len, dx], 0.1, &mut rng);
        let blocks = (0..spec.layers)
            .map(|_| {
                Ok(Block {
                    attention: MultiHeadParams::init(&spec.attention, &mut rng)?,
                    norm1_gain: Tensor::filled(&[dx], 1.0),
                    norm1_bias: Tensor::zeros(&[dx]),
                    ff_w1: Tensor::randn(&[ff, dx], 1.0 / (dx as f64).sqrt(), &mut rng),
                    ff_b1: Tensor::zeros(&[ff]),
                    ff_w2: Tensor::randn(&[dx, ff], 1.0 / (ff as f64).sqrt(), &mut rng),
                    ff_b2: Tensor::zeros(&[dx]),
                    norm2_gain: Tensor::filled(&[dx], 1.0),
                    norm2_bias: Tensor::zeros(&[dx]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let classifier_w = Tensor::randn(&[spec.classes, dx], 1.0 / (dx as f64).sqrt(), &mut rng);
        Ok(Self {
            spec: spec.clone(),
            embedding,
            position,
            blocks,
            classifier_w,
            classifier_b: Tensor::zeros(&[spec.classes]),
        })
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        let mut out = vec![
            (ParamGroup::Embedding, &mut self.embedding),
            (ParamGroup::Position, &mut self.position),
        ];
        for b in &mut self.blocks {
            out.extend(b.attention.tensors_mut());
            out.push((ParamGroup::Norm, &mut b.norm1_gain));
            out.push((ParamGroup::Norm, &mut b.norm1_bias));
            out.push((ParamGroup::FeedForward, &mut b.ff_w1));
            out.push((ParamGroup::FeedForward, &mut b.ff_b1));
            out.push((ParamGroup::FeedForward, &mut b.ff_w2));
            out.push((ParamGroup::FeedForward, &mut b.ff_b2));
            out.push((ParamGroup::Norm, &mut b.norm2_gain));
            out.push((ParamGroup::Norm, &mut b.norm2_bias));
        }
        out.push((ParamGroup::Classifier, &mut self.classifier_w));
        out.push((ParamGroup::Classifier, &mut self.classifier_b));
        out
    }

    pub fn is_finite(&self) -> bool {
        let mut copy = self.clone();
        copy.tensors_mut().iter().all(|(_, t)| t.is_finite())
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let mut registry = Vec::new();
        let leaf = |tape: &mut Tape, reg: &mut Vec<(ParamGroup, Var)>, g, t: &Tensor| {
            let v = tape.leaf(t.clone());
            reg.push((g, v));
            v
        };
        let embedding = leaf(tape, &mut registry, ParamGroup::Embedding, &self.embedding);
        let position = leaf(tape, &mut registry, ParamGroup::Position, &self.position);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let attention = b.attention.bind(tape, &mut registry);
            let norm1 = (
                leaf(tape, &mut registry, ParamGroup::Norm, &b.norm1_gain),
                leaf(tape, &mut registry, ParamGroup::Norm, &b.norm1_bias),
            );
            let ff1 = (
                leaf(tape, &mut registry, ParamGroup::FeedForward, &b.ff_w1),
                leaf(tape, &mut registry, ParamGroup::FeedForward, &b.ff_b1),
            );
            let ff2 = (
                leaf(tape, &mut registry, ParamGroup::FeedForward, &b.ff_w2),
                leaf(tape, &mut registry, ParamGroup::FeedForward, &b.ff_b2),
            );
            let norm2 = (
                leaf(tape, &mut registry, ParamGroup::Norm, &b.norm2_gain),
                leaf(tape, &mut registry, ParamGroup::Norm, &b.norm2_bias),
            );
            blocks.push(BoundBlock {
                attention,
                norm1,
                ff1,
                ff2,
                norm2,
            });
        }
        let classifier = (
            leaf(tape, &mut registry, ParamGroup::Classifier, &self.classifier_w),
            leaf(tape, &mut registry, ParamGroup::Classifier, &self.classifier_b),
        );
        BoundModel {
            embedding,
            position,
            blocks,
            classifier,
            registry,
        }
    }

    /// Records the forward pass for one sequence.
    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundModel, tokens: &[usize]) -> Result<ForwardVars> {
        let n = tokens.len();
        if n == 0 {
            return Err(crate::MgkError::EmptyInput("empty token sequence".into()));
        }
        if n > self.spec.max_len {
            return config_err(format!("sequence of {n} tokens exceeds max_len {}", self.spec.max_len));
        }
        let tok = tape.embed_rows(bound.embedding, tokens)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.embed_rows(bound.position, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let mut layers = Vec::with_capacity(bound.blocks.len());
        for b in &bound.blocks {
            let attn = multi_head_on(tape, x, &b.attention, &self.spec.attention)?;
            let r = tape.add(x, attn.output)?;
            let h = norm(tape, r, b.norm1)?;
            let f = tape.project(h, b.ff1.0)?;
            let f = tape.add_row_broadcast(f, b.ff1.1)?;
            let f = tape.relu(f);
            let f = tape.project(f, b.ff2.0)?;
            let f = tape.add_row_broadcast(f, b.ff2.1)?;
            let r = tape.add(h, f)?;
            x = norm(tape, r, b.norm2)?;
            layers.push(attn);
        }
        let pooled = tape.mean_rows(x)?;
        let logits = tape.project(pooled, bound.classifier.0)?;
        let logits = tape.add_row_broadcast(logits, bound.classifier.1)?;
        Ok(ForwardVars { logits, layers })
    }

    /// Class logits for one sequence.
    pub fn logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = self.forward_on(&mut tape, &bound, tokens)?;
        Ok(tape.value(out.logits).data().to_vec())
    }
}

fn norm(tape: &mut Tape, x: Var, (gain, bias): (Var, Var)) -> Result<Var> {
    let y = tape.layer_norm_rows(x, LN_EPS)?;
    let y = tape.mul_row_broadcast(y, gain)?;
    tape.add_row_broadcast(y, bias)
}
