use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Softmax,
    Gaussian,
    Mgk,
    Linear,
    Mlk,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Softmax,
        Variant::Gaussian,
        Variant::Mgk,
        Variant::Linear,
        Variant::Mlk,
    ];

    pub fn is_mixture(self) -> bool {
        matches!(self, Variant::Mgk | Variant::Mlk)
    }

    /// Whether the forward pass builds the `N×N` score matrix.
    pub fn materializes_scores(self) -> bool {
        !matches!(self, Variant::Linear | Variant::Mlk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    DotProduct,
    GaussianDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EStep {
    /// Mixing weights are trained by gradient descent.
    SoftLearnedPrior,
    /// Mixing weights are reset from averaged responsibilities after every step.
    SoftMStepPrior,
    /// Each query uses only its best component; mixing weights are ignored.
    HardAssign,
}

impl EStep {
    pub fn is_soft(self) -> bool {
        !matches!(self, EStep::HardAssign)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyMode {
    /// One key projection per component.
    IndependentProjections,
    /// One shared projection plus a learned offset per component.
    SharedShifted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub variant: Variant,
    pub heads: usize,
    pub components: usize,
    /// Per-head query/key dimension `D`.
    pub head_dim: usize,
    /// Input feature dimension `D_x`.
    pub input_dim: usize,
    /// Per-head value dimension `D_v`.
    pub value_dim: usize,
    /// Width after the output projection; `None` means `heads * value_dim`.
    #[serde(default)]
    pub out_dim: Option<usize>,
    pub kernel: Kernel,
    pub estep: EStep,
    pub key_mode: KeyMode,
    pub causal: bool,
    pub sigma2: Vec<f64>,
}

impl AttentionConfig {
    /// Defaults: two components for mixture variants, Gaussian-distance
    /// kernel, learned priors, independent key projections, non-causal.
    pub fn new(variant: Variant, heads: usize, head_dim: usize, input_dim: usize) -> Self {
        let components = if variant.is_mixture() { 2 } else { 1 };
        Self {
            variant,
            heads,
            components,
            head_dim,
            input_dim,
            value_dim: head_dim,
            out_dim: None,
            kernel: Kernel::GaussianDistance,
            estep: EStep::SoftLearnedPrior,
            key_mode: KeyMode::IndependentProjections,
            causal: false,
            sigma2: default_sigma2(components, head_dim),
        }
    }

    /// Sets the component count and resets variances to their defaults.
    pub fn with_components(mut self, m: usize) -> Self {
        self.components = m;
        self.sigma2 = default_sigma2(m, self.head_dim);
        self
    }

    pub fn with_kernel(mut self, kernel: Kernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn with_estep(mut self, estep: EStep) -> Self {
        self.estep = estep;
        self
    }

    pub fn with_key_mode(mut self, mode: KeyMode) -> Self {
        self.key_mode = mode;
        self
    }

    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn with_sigma2(mut self, sigma2: Vec<f64>) -> Self {
        self.sigma2 = sigma2;
        self
    }

    pub fn with_value_dim(mut self, dv: usize) -> Self {
        self.value_dim = dv;
        self
    }

    pub fn with_out_dim(mut self, out: usize) -> Self {
        self.out_dim = Some(out);
        self
    }

    pub fn output_dim(&self) -> usize {
        self.out_dim.unwrap_or(self.heads * self.value_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return config_err("heads must be at least 1");
        }
        if self.components == 0 {
            return config_err("components must be at least 1");
        }
        if !self.variant.is_mixture() && self.components != 1 {
            return config_err(format!(
                "{:?} attention uses exactly one component, got {}",
                self.variant, self.components
            ));
        }
        if self.head_dim == 0 || self.input_dim == 0 || self.value_dim == 0 || self.output_dim() == 0 {
            return config_err("all dimensions must be positive");
        }
        if self.sigma2.len() != self.components {
            return config_err(format!(
                "sigma2 has {} entries for {} components",
                self.sigma2.len(),
                self.components
            ));
        }
        if let Some(s) = self.sigma2.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return config_err(format!("sigma2 entries must be positive and finite, got {s}"));
        }
        Ok(())
    }
}

/// Component `r` (0-based) gets `(2r + 1)·√D`: `(√D, 3√D)` for two components.
pub fn default_sigma2(components: usize, head_dim: usize) -> Vec<f64> {
    let root = (head_dim as f64).sqrt();
    (0..components).map(|r| (2 * r + 1) as f64 * root).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = AttentionConfig::new(Variant::Mgk, 2, 16, 32);
        assert_eq!(c.components, 2);
        assert_eq!(c.sigma2, vec![4.0, 12.0]);
        assert_eq!(c.output_dim(), 32);
        c.validate().unwrap();
        let s = AttentionConfig::new(Variant::Softmax, 1, 4, 4);
        assert_eq!(s.sigma2, vec![2.0]);
    }

    #[test]
    fn invalid_configs() {
        let base = AttentionConfig::new(Variant::Mgk, 1, 4, 4);
        assert!(base.clone().with_sigma2(vec![1.0, 0.0]).validate().is_err());
        assert!(base.clone().with_sigma2(vec![1.0]).validate().is_err());
        assert!(base.clone().with_components(0).validate().is_err());
        assert!(AttentionConfig::new(Variant::Linear, 1, 4, 4)
            .with_components(2)
            .validate()
            .is_err());
        let mut zero_heads = base;
        zero_heads.heads = 0;
        assert!(zero_heads.validate().is_err());
    }
}
