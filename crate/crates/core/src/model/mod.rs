//! Foundation tracker, prompt blocks and the full prompted forward pass.

pub mod backbone;
pub mod config;
pub mod prompt;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, CoordFrame};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::objective::{weighted_loss_with_grad, LossBreakdown, LossWeights};
use crate::params::{GradMap, ModelParams, ModuleTag};
use crate::tensor::{Graph, NodeId};

pub use backbone::{concat_tokens, corner_head, encoder_layer, init_backbone, patch_embed, Region, TokenState};
pub use config::BackboneConfig;

/// Which prompt mechanisms are built and invoked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationProfile {
    pub enable_dcp: bool,
    /// Gated chaining of prompts across layers.
    pub enable_gfa_pp: bool,
    /// Token-wise gated injection.
    pub enable_gfa_pb: bool,
}

impl AblationProfile {
    pub const BASE: Self = Self::new(false, false, false);
    pub const DCP: Self = Self::new(true, false, false);
    pub const DCP_GFA_PP: Self = Self::new(true, true, false);
    pub const FULL: Self = Self::new(true, true, true);
    pub const LADDER: [Self; 4] = [Self::BASE, Self::DCP, Self::DCP_GFA_PP, Self::FULL];

    const fn new(enable_dcp: bool, enable_gfa_pp: bool, enable_gfa_pb: bool) -> Self {
        Self {
            enable_dcp,
            enable_gfa_pp,
            enable_gfa_pb,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enable_dcp && (self.enable_gfa_pp || self.enable_gfa_pb) {
            return Err(Error::Config("gated aggregation requires the prompter".into()));
        }
        Ok(())
    }

    /// Command-line name.
    pub fn name(&self) -> &'static str {
        match (self.enable_dcp, self.enable_gfa_pp, self.enable_gfa_pb) {
            (false, _, _) => "base",
            (true, false, false) => "dcp",
            (true, true, false) => "dcp+gfa_pp",
            (true, true, true) => "dcp+gfa_full",
            (true, false, true) => "dcp+gfa_pb",
        }
    }

    /// Row label in ablation tables.
    pub fn label(&self) -> &'static str {
        match (self.enable_dcp, self.enable_gfa_pp, self.enable_gfa_pb) {
            (false, _, _) => "Base",
            (true, false, false) => "Base+DCP",
            (true, true, false) => "Base+DCP+GFA_pp",
            (true, true, true) => "Base+DCP+GFA_pp,pb",
            (true, false, true) => "Base+DCP+GFA_pb",
        }
    }
}

impl FromStr for AblationProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::BASE),
            "dcp" => Ok(Self::DCP),
            "dcp+gfa_pp" => Ok(Self::DCP_GFA_PP),
            "dcp+gfa_full" | "dcp+gfa_pp_pb" => Ok(Self::FULL),
            "dcp+gfa_pb" => Ok(Self::new(true, false, true)),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected base, dcp, dcp+gfa_pp or dcp+gfa_full)"
            ))),
        }
    }
}

impl fmt::Display for AblationProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Graph handles produced by one forward pass.
pub struct ForwardOutput {
    /// Raw normalized `[x1, y1, x2, y2]`.
    pub boxes: NodeId,
    pub tokens: TokenState,
    /// Prompt added at each layer (after chaining), empty without the prompter.
    pub prompts: Vec<NodeId>,
    /// Per layer, per head.
    pub attention: Vec<Vec<NodeId>>,
}

/// Full forward pass. With the prompter enabled, layer `l` receives
/// `inject(H^{l-1}, Pg^l)` where the prompt is computed from the unprompted
/// `H^{l-1}`.
pub fn forward(
    g: &mut Graph,
    cfg: &BackboneConfig,
    profile: AblationProfile,
    params: &ModelParams,
    template: &Image,
    search: &Image,
) -> Result<ForwardOutput> {
    profile.validate()?;
    let z = patch_embed(g, params, cfg, template, Region::Template)?;
    let x = patch_embed(g, params, cfg, search, Region::Search)?;
    let mut h = concat_tokens(g, z, x)?;
    let mut prompts = Vec::new();
    let mut attention = Vec::with_capacity(cfg.num_layers);
    let mut chained: Option<NodeId> = None;
    for l in 1..=cfg.num_layers {
        let mut input = h;
        if profile.enable_dcp {
            let p = prompt::dcp_forward(g, params, h.tokens, h.split, l)?;
            let pg = match chained {
                Some(prev) if profile.enable_gfa_pp => {
                    let gamma = g.param(params, &prompt::chain_gate_name(l))?;
                    prompt::chain(g, p, prev, gamma)?
                }
                _ => p,
            };
            chained = Some(pg);
            let gate = if profile.enable_gfa_pb {
                Some(g.param(params, &prompt::token_gate_name(l))?)
            } else {
                None
            };
            input.tokens = prompt::inject(g, h.tokens, pg, gate)?;
            prompts.push(pg);
        }
        let out = encoder_layer(g, params, cfg, input, l)?;
        attention.push(out.attention);
        h = out.state;
    }
    let h = backbone::final_norm(g, params, cfg, h)?;
    let boxes = corner_head(g, params, cfg, h)?;
    Ok(ForwardOutput {
        boxes,
        tokens: h,
        prompts,
        attention,
    })
}

/// A tracker: architecture, active prompt profile and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Tracker {
    pub config: BackboneConfig,
    pub profile: AblationProfile,
    pub params: ModelParams,
}

impl Tracker {
    /// Randomly initialized foundation model, no prompt parameters.
    pub fn foundation(config: BackboneConfig, seed: u64) -> Result<Self> {
        let params = init_backbone(&config, seed)?;
        Ok(Self {
            config,
            profile: AblationProfile::BASE,
            params,
        })
    }

    /// Adds zero-start prompt parameters for `profile` to a foundation model.
    /// Only the modules the profile invokes get parameters.
    pub fn with_prompts(mut self, profile: AblationProfile, seed: u64) -> Result<Self> {
        profile.validate()?;
        if self.params.contains_tag(ModuleTag::Dcp) || self.params.contains_tag(ModuleTag::Gfa) {
            return Err(Error::Contract("model already carries prompt parameters".into()));
        }
        if profile.enable_dcp {
            prompt::init_dcp(&mut self.params, &self.config, seed)?;
            prompt::init_gfa(&mut self.params, &self.config, profile.enable_gfa_pp, profile.enable_gfa_pb)?;
        }
        self.profile = profile;
        Ok(self)
    }

    /// Raw normalized box for one template/search pair.
    pub fn predict(&self, template: &Image, search: &Image) -> Result<BBox> {
        let mut g = Graph::new();
        let out = forward(&mut g, &self.config, self.profile, &self.params, template, search)?;
        let v = g.value(out.boxes).data();
        Ok(BBox::raw([v[0], v[1], v[2], v[3]], CoordFrame::Normalized))
    }

    /// Loss on one pair and its gradient with respect to every trainable parameter.
    pub fn loss_and_grads(
        &self,
        template: &Image,
        search: &Image,
        gt: &BBox,
        weights: LossWeights,
    ) -> Result<(LossBreakdown, GradMap)> {
        let mut g = Graph::new();
        let out = forward(&mut g, &self.config, self.profile, &self.params, template, search)?;
        let v = g.value(out.boxes).data();
        let pred = BBox::raw([v[0], v[1], v[2], v[3]], CoordFrame::Normalized);
        let (loss, grad) = weighted_loss_with_grad(&pred, gt, weights)?;
        let node = g.scalar_fn(out.boxes, loss.total, grad.to_vec())?;
        let grads = g.backward(node)?;
        Ok((loss, grads.into_params()))
    }

    pub fn loss(&self, template: &Image, search: &Image, gt: &BBox, weights: LossWeights) -> Result<LossBreakdown> {
        let pred = self.predict(template, search)?;
        Ok(weighted_loss_with_grad(&pred, gt, weights)?.0)
    }
}
