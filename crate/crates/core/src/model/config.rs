use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters shared by the backbone, head and prompt blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub template_size: usize,
    pub search_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Hidden channels of each corner-head branch.
    pub head_channels: usize,
    /// Prompt encoder width is `embed_dim / prompt_reduction`.
    pub prompt_reduction: usize,
    pub ln_eps: f64,
}

impl BackboneConfig {
    /// 20 tokens of width 8; the gradient-check configuration.
    pub fn tiny() -> Self {
        Self {
            template_size: 16,
            search_size: 32,
            patch_size: 8,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            head_channels: 4,
            prompt_reduction: 2,
            ln_eps: 1e-5,
        }
    }

    /// 80 tokens of width 32; trains in minutes on one core.
    pub fn small() -> Self {
        Self {
            template_size: 32,
            search_size: 64,
            patch_size: 8,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            mlp_ratio: 2,
            head_channels: 16,
            prompt_reduction: 4,
            ln_eps: 1e-5,
        }
    }

    /// 320 tokens of width 64, four layers.
    pub fn desk() -> Self {
        Self {
            template_size: 64,
            search_size: 128,
            patch_size: 8,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
            head_channels: 32,
            prompt_reduction: 32,
            ln_eps: 1e-5,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown model preset `{other}` (expected tiny, small or desk)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.template_size % p != 0 || self.search_size % p != 0 {
            return Err(Error::Config(format!(
                "template {} and search {} must be positive multiples of patch {p}",
                self.template_size, self.search_size
            )));
        }
        if self.template_size == 0 || self.search_size == 0 {
            return Err(Error::Config("crop sizes must be positive".into()));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.mlp_ratio == 0 || self.head_channels == 0 {
            return Err(Error::Config(
                "num_layers, mlp_ratio and head_channels must be positive".into(),
            ));
        }
        if self.prompt_reduction == 0
            || self.embed_dim % self.prompt_reduction != 0
            || self.embed_dim / self.prompt_reduction == 0
        {
            return Err(Error::Config(format!(
                "prompt_reduction {} must divide embed_dim {}",
                self.prompt_reduction, self.embed_dim
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn template_grid(&self) -> usize {
        self.template_size / self.patch_size
    }

    pub fn search_grid(&self) -> usize {
        self.search_size / self.patch_size
    }

    pub fn template_tokens(&self) -> usize {
        self.template_grid() * self.template_grid()
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid() * self.search_grid()
    }

    pub fn tokens(&self) -> usize {
        self.template_tokens() + self.search_tokens()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn prompt_dim(&self) -> usize {
        self.embed_dim / self.prompt_reduction
    }
}
