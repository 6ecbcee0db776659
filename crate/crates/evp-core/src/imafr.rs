//! Inverse multi-attentive feature refinement: a chained refinement of
//! the feature pyramid, seeded by spatial attention at one end and
//! propagated level by level through MultiAttention + resize + concat +
//! 1x1-conv fusion.
//!
//! Level convention throughout: `levels[0]` is the coarsest map and the
//! last level is the finest; refinement by default runs fine-to-coarse,
//! so information flows from the last level toward index 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    conv_block, multi_attention, spatial_attention, ConvBlockParams, MultiAttentionParams,
    SpatialGateParams,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binding, ParamStore};
use crate::tensor::Element;

/// Which end of the pyramid seeds the refinement chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainDirection {
    /// Seed at the finest level, refine toward the coarsest (default).
    FineToCoarse,
    /// Literal-index alternative: seed at the coarsest level.
    CoarseToFine,
}

/// Requires rank-4 levels with matching batch, coarse-to-fine ordering,
/// and integer upscale ratios between adjacent levels.
pub fn validate_pyramid(shapes: &[&[usize]]) -> Result<()> {
    if shapes.is_empty() {
        return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
    }
    for (i, s) in shapes.iter().enumerate() {
        if s.len() != 4 {
            return Err(Error::ShapeMismatch(format!("pyramid level {i} is not rank 4: {s:?}")));
        }
        if s[0] != shapes[0][0] {
            return Err(Error::ShapeMismatch(format!(
                "pyramid batch sizes disagree: level 0 has {}, level {i} has {}",
                shapes[0][0], s[0]
            )));
        }
    }
    for i in 1..shapes.len() {
        let (prev, cur) = (shapes[i - 1], shapes[i]);
        for d in [2, 3] {
            if cur[d] < prev[d] || cur[d] % prev[d] != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "pyramid extents must grow coarse-to-fine by integer ratios, got {:?} then {:?}",
                    prev, cur
                )));
            }
        }
    }
    Ok(())
}

/// One chain step: MultiAttention on the already-refined source level,
/// then fuse with the raw destination level.
#[derive(Debug, Clone)]
pub struct ImafrStep {
    pub ma: MultiAttentionParams,
    /// (C_src + C_dst) -> C_dst so refined and raw pyramids stay
    /// shape-identical.
    pub fuse: ConvBlockParams,
}

#[derive(Debug, Clone)]
pub struct ImafrParams {
    /// The chain's starting level gets the spatial gate only; channel
    /// attention and conv blocks enter through the steps.
    pub seed_attn: SpatialGateParams,
    /// Steps in application order (one fewer than there are levels).
    pub steps: Vec<ImafrStep>,
    pub direction: ChainDirection,
    /// Channels per level, coarse to fine; fixed at init.
    pub channels: Vec<usize>,
}

impl ImafrParams {
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: &[usize],
        direction: ChainDirection,
        kernel: usize,
        reduction: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(!channels.is_empty(), "pyramid needs at least one level");
        let l = channels.len();
        let seed_attn = SpatialGateParams::init(store, &format!("{prefix}.seed"), kernel, rng);
        let mut steps = Vec::new();
        let order: Vec<usize> = match direction {
            ChainDirection::FineToCoarse => (0..l - 1).rev().collect(),
            ChainDirection::CoarseToFine => (1..l).collect(),
        };
        for dst in order {
            let src = match direction {
                ChainDirection::FineToCoarse => dst + 1,
                ChainDirection::CoarseToFine => dst - 1,
            };
            let p = format!("{prefix}.to_l{dst}");
            steps.push(ImafrStep {
                ma: MultiAttentionParams::init(
                    store,
                    &format!("{p}.ma"),
                    channels[src],
                    kernel,
                    reduction,
                    groups,
                    rng,
                ),
                fuse: ConvBlockParams::init(
                    store,
                    &format!("{p}.fuse"),
                    channels[src] + channels[dst],
                    channels[dst],
                    groups,
                    rng,
                ),
            });
        }
        ImafrParams { seed_attn, steps, direction, channels: channels.to_vec() }
    }

    /// Refine a pyramid of graph variables. Output shapes equal input
    /// shapes level for level.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        levels: &[Var],
        binding: &Binding,
    ) -> Result<Vec<Var>> {
        let shapes: Vec<&[usize]> = levels.iter().map(|&v| g.shape(v)).collect();
        validate_pyramid(&shapes)?;
        let l = levels.len();
        if self.channels.len() != l {
            return Err(Error::InvalidArgument(format!(
                "refinement built for {} levels, pyramid has {l}",
                self.channels.len()
            )));
        }
        for (i, (&v, want)) in levels.iter().zip(&self.channels).enumerate() {
            let c = g.shape(v)[1];
            if c != *want {
                return Err(Error::ShapeMismatch(format!(
                    "pyramid level {i} has {c} channels, refinement expects {want}"
                )));
            }
        }

        let mut refined: Vec<Option<Var>> = vec![None; l];
        let seed_idx = match self.direction {
            ChainDirection::FineToCoarse => l - 1,
            ChainDirection::CoarseToFine => 0,
        };
        let seeded = spatial_attention(g, levels[seed_idx], &self.seed_attn.bind(binding))?;
        refined[seed_idx] = Some(seeded);

        let order: Vec<usize> = match self.direction {
            ChainDirection::FineToCoarse => (0..l - 1).rev().collect(),
            ChainDirection::CoarseToFine => (1..l).collect(),
        };
        for (step, dst) in self.steps.iter().zip(order) {
            let src = match self.direction {
                ChainDirection::FineToCoarse => dst + 1,
                ChainDirection::CoarseToFine => dst - 1,
            };
            let from_above = refined[src].expect("source level refined earlier in chain order");
            let ma = multi_attention(g, from_above, &step.ma.bind(binding))?;
            let (h, w) = (g.shape(levels[dst])[2], g.shape(levels[dst])[3]);
            let resized = g.resize_bilinear(ma, h, w)?;
            let cat = g.concat_channels(&[resized, levels[dst]])?;
            refined[dst] = Some(conv_block(g, cat, &step.fuse.bind(binding))?);
        }
        Ok(refined.into_iter().map(|v| v.expect("every level visited")).collect())
    }
}

/// Identity path for the refinement toggle: the decoder consumes the raw
/// pyramid unchanged.
pub fn imafr_bypass(levels: &[Var]) -> Vec<Var> {
    levels.to_vec()
}
