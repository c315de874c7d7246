use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named architecture presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// CPU-minutes scale used by the synthetic benchmarks.
    #[default]
    Desk,
    /// Transformer widths of the original ViT-style backbones.
    PaperDims,
}

/// Continual-learning regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Each step is a new dataset; experts stack cumulatively.
    #[default]
    Task,
    /// Each step adds classes; experts are mixed by class gates.
    Class,
}

/// How the gate combines the token projection with the task embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateComposition {
    /// `σ(⟨σ(x · W_g), τ_e⟩)`.
    InputProjection,
    /// `σ(⟨x, σ(W_g · τ_e)⟩)`.
    EmbeddingProjection,
}

/// Whether each expert owns its gate projection or all share one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateProjection {
    /// `W_g^(e)` trained with expert `e`, frozen afterwards.
    PerExpert,
    /// One `W_g` trained in the first step, frozen afterwards.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub composition: GateComposition,
    pub projection: GateProjection,
    pub d_txt: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            composition: GateComposition::InputProjection,
            projection: GateProjection::PerExpert,
            d_txt: 32,
        }
    }
}

/// Backbone hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub rank: usize,
    /// Stack adapters on Q/K/V/O as well as the FFN projections.
    pub attention_adapters: bool,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch: 4,
            d_model: 256,
            heads: 8,
            layers: 2,
            d_ff: 1024,
            rank: 8,
            attention_adapters: true,
        }
    }

    pub fn paper_dims() -> Self {
        Self {
            image_size: 256,
            patch: 16,
            d_model: 512,
            heads: 8,
            layers: 12,
            d_ff: 2048,
            rank: 8,
            attention_adapters: true,
        }
    }

    /// A very small configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            patch: 4,
            d_model: 16,
            heads: 2,
            layers: 2,
            d_ff: 32,
            rank: 2,
            attention_adapters: true,
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::PaperDims => Self::paper_dims(),
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            bad.push(format!("image_size {} is not divisible by patch {}", self.image_size, self.patch));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            bad.push(format!("heads {} must divide d_model {}", self.heads, self.d_model));
        }
        if self.d_model % 4 != 0 {
            bad.push(format!("d_model {} must be a multiple of 4", self.d_model));
        }
        if self.layers == 0 || self.d_ff == 0 {
            bad.push("layers and d_ff must be positive".to_string());
        }
        if self.rank == 0 || 2 * self.rank > self.d_model.min(self.d_ff) {
            bad.push(format!("rank {} must satisfy 1 <= r <= min(d_model, d_ff)/2", self.rank));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(bad.join("; ")))
        }
    }

    /// Frozen parameter count of the dense network (patch embedding plus
    /// every base projection).
    pub fn dense_param_count(&self) -> usize {
        let d = self.d_model;
        self.patch * self.patch * d + self.layers * (4 * d * d + 2 * d * self.d_ff)
    }

    /// Adapter parameters one expert adds across the network.
    pub fn expert_param_count(&self) -> usize {
        let (d, r) = (self.d_model, self.rank);
        let attn = if self.attention_adapters { 4 * r * (d + d) } else { 0 };
        self.layers * (attn + 2 * r * (d + self.d_ff))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper_dims().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::paper_dims().d_k(), 64);
    }

    #[test]
    fn invalid_configs_list_every_problem() {
        let c = ModelConfig { image_size: 30, heads: 3, ..ModelConfig::desk() };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("image_size") && err.contains("heads"));
    }

    #[test]
    fn desk_expert_is_under_five_percent() {
        let c = ModelConfig::desk();
        let ratio = c.expert_param_count() as f64 / c.dense_param_count() as f64;
        assert!(ratio < 0.05, "{ratio}");
    }
}
