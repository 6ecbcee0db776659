//! Attention and convolution building blocks: the 1x1-conv block,
//! spatial and channel attention gates, and their MultiAttention
//! composition.
//!
//! Each block is split in two: a `*Params` struct registering tensors in
//! a [`ParamStore`], and a `*Vars` view produced by `bind` for one graph.
//! Forward functions are free functions over `*Vars`.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, PoolAxis, PoolKind, PoolScope, Var};
use crate::params::{init_fan_in, Binding, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

pub const GN_EPS: f64 = 1e-5;

/// Largest divisor of `c_out` that does not exceed `requested`; the
/// group count GroupNorm actually uses.
pub fn clamp_groups(requested: usize, c_out: usize) -> usize {
    let mut g = requested.clamp(1, c_out);
    while !c_out.is_multiple_of(g) {
        g -= 1;
    }
    g
}

// ── Conv block: 1x1 conv -> GroupNorm -> ReLU ────────────────────────

#[derive(Debug, Clone)]
pub struct ConvBlockParams {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvBlockParams {
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvBlockParams {
            weight: store.add(format!("{prefix}.weight"), init_fan_in(&[c_out, c_in, 1, 1], c_in, rng)),
            gamma: store.add(format!("{prefix}.gn_gamma"), Tensor::ones(&[c_out])),
            beta: store.add(format!("{prefix}.gn_beta"), Tensor::zeros(&[c_out])),
            groups: clamp_groups(groups, c_out),
            c_in,
            c_out,
        }
    }

    pub fn bind(&self, b: &Binding) -> ConvBlockVars {
        ConvBlockVars {
            weight: b.var(self.weight),
            gamma: b.var(self.gamma),
            beta: b.var(self.beta),
            groups: self.groups,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvBlockVars {
    pub weight: Var,
    pub gamma: Var,
    pub beta: Var,
    pub groups: usize,
}

pub fn conv_block<T: Element>(g: &mut Graph<T>, x: Var, p: &ConvBlockVars) -> Result<Var> {
    let y = g.conv2d(x, p.weight, None, 1, 0)?;
    let y = g.group_norm(y, p.gamma, p.beta, p.groups, GN_EPS)?;
    g.relu(y)
}

// ── Attention gates ──────────────────────────────────────────────────

/// The spatial gate alone; usable standalone (channel-count agnostic,
/// its conv sees only the two pooled context maps).
#[derive(Debug, Clone)]
pub struct SpatialGateParams {
    pub weight: ParamId,
    pub kernel: usize,
}

impl SpatialGateParams {
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "spatial attention kernel must be odd, got {kernel}");
        SpatialGateParams {
            weight: store.add(
                format!("{prefix}.spatial_kernel"),
                init_fan_in(&[1, 2, kernel, kernel], 2 * kernel * kernel, rng),
            ),
            kernel,
        }
    }

    pub fn bind(&self, b: &Binding) -> SpatialGateVars {
        SpatialGateVars { weight: b.var(self.weight), kernel: self.kernel }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SpatialGateVars {
    pub weight: Var,
    pub kernel: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub spatial: SpatialGateParams,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

impl AttentionParams {
    /// `kernel` must be odd; the MLP bottleneck is `channels/reduction`
    /// clamped to at least 1.
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        kernel: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        AttentionParams {
            spatial: SpatialGateParams::init(store, prefix, kernel, rng),
            mlp_w1: store.add(format!("{prefix}.mlp_w1"), init_fan_in(&[hidden, channels], channels, rng)),
            mlp_b1: store.add(format!("{prefix}.mlp_b1"), Tensor::zeros(&[hidden])),
            mlp_w2: store.add(format!("{prefix}.mlp_w2"), init_fan_in(&[channels, hidden], hidden, rng)),
            mlp_b2: store.add(format!("{prefix}.mlp_b2"), Tensor::zeros(&[channels])),
            channels,
            hidden,
        }
    }

    pub fn bind(&self, b: &Binding) -> AttentionVars {
        AttentionVars {
            spatial: self.spatial.bind(b),
            mlp_w1: b.var(self.mlp_w1),
            mlp_b1: b.var(self.mlp_b1),
            mlp_w2: b.var(self.mlp_w2),
            mlp_b2: b.var(self.mlp_b2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub spatial: SpatialGateVars,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

/// Gate every pixel by a sigmoid over channel-pooled context:
/// sigmoid(conv_k(concat(avg_c(x), max_c(x)))) * x.
pub fn spatial_attention<T: Element>(g: &mut Graph<T>, x: Var, p: &SpatialGateVars) -> Result<Var> {
    let avg = g.pool(x, PoolKind::Avg, PoolScope::Global, PoolAxis::Channel)?;
    let max = g.pool(x, PoolKind::Max, PoolScope::Global, PoolAxis::Channel)?;
    let pooled = g.concat_channels(&[avg, max])?;
    let pre = g.conv2d(pooled, p.weight, None, 1, (p.kernel - 1) / 2)?;
    let gate = g.sigmoid(pre)?;
    g.mul(gate, x)
}

/// Gate every channel by a sigmoid over a shared bottleneck MLP applied
/// to the global average and max pools.
pub fn channel_attention<T: Element>(g: &mut Graph<T>, x: Var, p: &AttentionVars) -> Result<Var> {
    let (n, c) = (g.shape(x)[0], g.shape(x)[1]);
    let branch = |g: &mut Graph<T>, kind: PoolKind| -> Result<Var> {
        let pooled = g.pool(x, kind, PoolScope::Global, PoolAxis::Spatial)?;
        let flat = g.reshape(pooled, &[n, c])?;
        let h = g.linear(flat, p.mlp_w1, Some(p.mlp_b1))?;
        let h = g.relu(h)?;
        g.linear(h, p.mlp_w2, Some(p.mlp_b2))
    };
    let a = branch(g, PoolKind::Avg)?;
    let m = branch(g, PoolKind::Max)?;
    let pre = g.add(a, m)?;
    let gate = g.sigmoid(pre)?;
    let gate = g.reshape(gate, &[n, c, 1, 1])?;
    g.mul(gate, x)
}

// ── MultiAttention: spatial -> channel -> conv block x2 ──────────────

#[derive(Debug, Clone)]
pub struct MultiAttentionParams {
    pub attn: AttentionParams,
    pub cb1: ConvBlockParams,
    pub cb2: ConvBlockParams,
}

impl MultiAttentionParams {
    /// Width-preserving by default: both conv blocks map C -> C.
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        kernel: usize,
        reduction: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        MultiAttentionParams {
            attn: AttentionParams::init(store, &format!("{prefix}.attn"), channels, kernel, reduction, rng),
            cb1: ConvBlockParams::init(store, &format!("{prefix}.cb1"), channels, channels, groups, rng),
            cb2: ConvBlockParams::init(store, &format!("{prefix}.cb2"), channels, channels, groups, rng),
        }
    }

    pub fn bind(&self, b: &Binding) -> MultiAttentionVars {
        MultiAttentionVars { attn: self.attn.bind(b), cb1: self.cb1.bind(b), cb2: self.cb2.bind(b) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiAttentionVars {
    pub attn: AttentionVars,
    pub cb1: ConvBlockVars,
    pub cb2: ConvBlockVars,
}

pub fn multi_attention<T: Element>(g: &mut Graph<T>, x: Var, p: &MultiAttentionVars) -> Result<Var> {
    let y = spatial_attention(g, x, &p.attn.spatial)?;
    let y = channel_attention(g, y, &p.attn)?;
    let y = conv_block(g, y, &p.cb1)?;
    conv_block(g, y, &p.cb2)
}
