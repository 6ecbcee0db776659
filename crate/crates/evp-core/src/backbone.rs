//! The encoder stand-in: a patchify conv producing a latent at 1/4
//! resolution, per-channel latent-std normalization, and four stages of
//! conv-block + single-head cross-attention emitting the feature
//! pyramid plus per-level attention maps.

use rand::Rng;

use crate::blocks::{conv_block, ConvBlockParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, PoolAxis, PoolKind, PoolScope, Var};
use crate::params::{init_fan_in, Binding, ParamId, ParamStore};
use crate::tensor::{stable_mean, Element, Tensor};

/// Channels of the patchify latent (the "encoder latent space").
pub const LATENT_CHANNELS: usize = 16;
/// Patchify downsampling factor; the finest pyramid level lives here.
pub const PATCH: usize = 4;

// ── Latent statistics ────────────────────────────────────────────────

/// Per-channel standard deviations of the latent space over a dataset.
#[derive(Debug, Clone)]
pub struct LatentStats<T: Element> {
    /// Rank 1, one value per latent channel, all >= eps_floor.
    pub std: Tensor<T>,
    /// Samples the estimate was computed from.
    pub count: usize,
    pub eps_floor: f64,
}

pub const STD_EPS_FLOOR: f64 = 1e-6;

impl<T: Element> LatentStats<T> {
    /// Rebuild from a deserialized std vector (the on-disk form keeps
    /// only the vector, so `count` resets to 1).
    pub fn from_std(std: Tensor<T>) -> Result<Self> {
        if std.rank() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "latent stats must be rank 1, got {:?}",
                std.shape()
            )));
        }
        let std = std.map(|v| T::from_f64(v.to_f64().max(STD_EPS_FLOOR)));
        Ok(LatentStats { std, count: 1, eps_floor: STD_EPS_FLOOR })
    }

    pub fn channels(&self) -> usize {
        self.std.shape()[0]
    }
}

/// Population std per channel over every sample and pixel, clamped
/// below at the eps floor. Exactly permutation-invariant: both passes
/// accumulate through sorted sums.
pub fn compute_latent_std<T: Element>(latents: &[Tensor<T>]) -> Result<LatentStats<T>> {
    let first = latents.first().ok_or_else(|| {
        Error::InvalidArgument("latent std over an empty dataset".into())
    })?;
    if first.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "latents must be rank 3 (C,H,W), got {:?}",
            first.shape()
        )));
    }
    for l in latents {
        if l.shape() != first.shape() {
            return Err(Error::ShapeMismatch(format!(
                "latent shapes disagree: {:?} vs {:?}",
                first.shape(),
                l.shape()
            )));
        }
    }
    let (c, h, w) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    let per_channel = |ch: usize| {
        latents
            .iter()
            .flat_map(move |l| l.data()[ch * h * w..(ch + 1) * h * w].iter().map(|v| v.to_f64()))
    };
    let std = Tensor::from_fn(&[c], |ch| {
        let mean = stable_mean(per_channel(ch));
        let var = stable_mean(per_channel(ch).map(|v| (v - mean) * (v - mean)));
        T::from_f64(var.sqrt().max(STD_EPS_FLOOR))
    });
    Ok(LatentStats { std, count: latents.len(), eps_floor: STD_EPS_FLOOR })
}

/// Divide every channel of `z` (N,C,H,W) by its dataset std. The stats
/// enter the graph as constants, so gradients pass straight through the
/// scaling.
pub fn normalize_latent<T: Element>(
    g: &mut Graph<T>,
    z: Var,
    stats: &LatentStats<T>,
) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 4 || shape[1] != stats.channels() {
        return Err(Error::ShapeMismatch(format!(
            "cannot normalize {:?} with {}-channel stats",
            shape,
            stats.channels()
        )));
    }
    let inv = Tensor::from_fn(&[1, stats.channels(), 1, 1], |i| {
        T::from_f64(1.0 / stats.std.data()[i].to_f64())
    });
    let inv = g.constant(inv)?;
    g.mul(z, inv)
}

// ── Single-head cross-attention ──────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CrossAttnParams {
    /// 1x1 conv projecting features to queries, C -> C.
    pub q_w: ParamId,
    /// Key/value projections from embedding dim D to C.
    pub k_w: ParamId,
    pub v_w: ParamId,
    pub channels: usize,
    pub dim: usize,
}

impl CrossAttnParams {
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        CrossAttnParams {
            q_w: store.add(format!("{prefix}.q"), init_fan_in(&[channels, channels, 1, 1], channels, rng)),
            k_w: store.add(format!("{prefix}.k"), init_fan_in(&[channels, dim], dim, rng)),
            v_w: store.add(format!("{prefix}.v"), init_fan_in(&[channels, dim], dim, rng)),
            channels,
            dim,
        }
    }

    pub fn bind(&self, b: &Binding) -> CrossAttnVars {
        CrossAttnVars {
            q_w: b.var(self.q_w),
            k_w: b.var(self.k_w),
            v_w: b.var(self.v_w),
            channels: self.channels,
            dim: self.dim,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CrossAttnVars {
    pub q_w: Var,
    pub k_w: Var,
    pub v_w: Var,
    pub channels: usize,
    pub dim: usize,
}

/// Queries from pixels, keys/values from the K embedding rows; softmax
/// over K. Returns the residual output (N,C,H,W) and the attention maps
/// (N,K,H,W) for the decoder.
pub fn cross_attention<T: Element>(
    g: &mut Graph<T>,
    feat: Var,
    emb: Var,
    p: &CrossAttnVars,
) -> Result<(Var, Var)> {
    let fs = g.shape(feat).to_vec();
    if fs.len() != 4 || fs[1] != p.channels {
        return Err(Error::ShapeMismatch(format!(
            "cross-attention expects (N,{},H,W) features, got {fs:?}",
            p.channels
        )));
    }
    let es = g.shape(emb).to_vec();
    if es.len() != 2 || es[1] != p.dim {
        return Err(Error::ShapeMismatch(format!(
            "cross-attention expects (K,{}) embeddings, got {es:?}",
            p.dim
        )));
    }
    let (n, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    let k = es[0];

    let q = g.conv2d(feat, p.q_w, None, 1, 0)?;
    let q = g.reshape(q, &[n, c, h * w])?;
    let q = g.permute(q, &[0, 2, 1])?; // (N, HW, C)

    let keys = g.linear(emb, p.k_w, None)?; // (K, C)
    let keys_t = g.permute(keys, &[1, 0])?;
    let keys_t = g.reshape(keys_t, &[1, c, k])?;
    let keys_t = g.broadcast_to(keys_t, &[n, c, k])?;

    let scores = g.matmul(q, keys_t)?; // (N, HW, K)
    let scores = g.mul_scalar(scores, 1.0 / (c as f64).sqrt())?;
    let weights = g.softmax(scores, 2)?;

    let values = g.linear(emb, p.v_w, None)?; // (K, C)
    let values = g.reshape(values, &[1, k, c])?;
    let values = g.broadcast_to(values, &[n, k, c])?;
    let attended = g.matmul(weights, values)?; // (N, HW, C)
    let attended = g.permute(attended, &[0, 2, 1])?;
    let attended = g.reshape(attended, &[n, c, h, w])?;
    let out = g.add(feat, attended)?;

    let maps = g.permute(weights, &[0, 2, 1])?;
    let maps = g.reshape(maps, &[n, k, h, w])?;
    Ok((out, maps))
}

// ── The pyramid stub ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StubStage {
    pub head: ConvBlockParams,
    pub attn: CrossAttnParams,
}

#[derive(Debug, Clone)]
pub struct StubParams {
    pub patchify_w: ParamId,
    pub patchify_b: ParamId,
    pub stages: Vec<StubStage>,
    /// Stage channels in emission order, finest level first.
    pub channels: Vec<usize>,
    pub dim: usize,
}

impl StubParams {
    /// `channels` in emission order (finest first); `dim` is the
    /// embedding dimension keys and values project from.
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: &[usize],
        dim: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(!channels.is_empty(), "pyramid needs at least one stage");
        let patchify_w = store.add(
            format!("{prefix}.patchify.weight"),
            init_fan_in(&[LATENT_CHANNELS, 3, 3, 3], 3 * 9, rng),
        );
        let patchify_b =
            store.add(format!("{prefix}.patchify.bias"), Tensor::zeros(&[LATENT_CHANNELS]));
        let mut stages = Vec::new();
        let mut c_prev = LATENT_CHANNELS;
        for (i, &c) in channels.iter().enumerate() {
            let p = format!("{prefix}.stage{i}");
            stages.push(StubStage {
                head: ConvBlockParams::init(store, &format!("{p}.head"), c_prev, c, groups, rng),
                attn: CrossAttnParams::init(store, &format!("{p}.attn"), c, dim, rng),
            });
            c_prev = c;
        }
        StubParams { patchify_w, patchify_b, stages, channels: channels.to_vec(), dim }
    }

    /// Smallest input extent both patchify and the stage downsampling
    /// divide evenly.
    pub fn required_divisor(&self) -> usize {
        PATCH << (self.stages.len() - 1)
    }

    /// Image (N,3,H,W) -> raw latent (N,LATENT_CHANNELS,H/4,W/4): a 3x3
    /// conv followed by 4x4 average pooling.
    pub fn patchify<T: Element>(&self, g: &mut Graph<T>, x: Var, b: &Binding) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::ShapeMismatch(format!("expected (N,3,H,W) image, got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        let d = self.required_divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::InvalidArgument(format!(
                "input extents {h}x{w} must be divisible by {d}"
            )));
        }
        let y = g.conv2d(x, b.var(self.patchify_w), Some(b.var(self.patchify_b)), 1, 1)?;
        g.pool(y, PoolKind::Avg, PoolScope::Window { k: PATCH, stride: PATCH }, PoolAxis::Spatial)
    }

    /// Full stub forward. Returns the pyramid and the per-level
    /// attention maps, both ordered coarsest level first.
    pub fn extract_pyramid<T: Element>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        emb: Var,
        stats: Option<&LatentStats<T>>,
        b: &Binding,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut cur = self.patchify(g, x, b)?;
        if let Some(stats) = stats {
            cur = normalize_latent(g, cur, stats)?;
        }
        let mut pyramid = Vec::with_capacity(self.stages.len());
        let mut maps = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                cur = g.pool(cur, PoolKind::Avg, PoolScope::Window { k: 2, stride: 2 }, PoolAxis::Spatial)?;
            }
            cur = conv_block(g, cur, &stage.head.bind(b))?;
            let (out, m) = cross_attention(g, cur, emb, &stage.attn.bind(b))?;
            cur = out;
            pyramid.push(out);
            maps.push(m);
        }
        pyramid.reverse();
        maps.reverse();
        Ok((pyramid, maps))
    }
}

/// Value-level patchify of one (3,H,W) image, for dataset std sweeps.
pub fn latent_of_image<T: Element>(
    store: &ParamStore<T>,
    p: &StubParams,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected a (3,H,W) image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut g: Graph<T> = Graph::new();
    let b = store.bind(&mut g)?;
    let x = g.constant(image.clone())?;
    let x = g.reshape(x, &[1, 3, h, w])?;
    let z = p.patchify(&mut g, x, &b)?;
    let zs = g.shape(z).to_vec();
    let out = g.reshape(z, &[zs[1], zs[2], zs[3]])?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stats_of(std: &[f64]) -> LatentStats<f64> {
        LatentStats::from_std(Tensor::new(vec![std.len()], std.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn constant_dataset_clamps_every_channel_to_floor() {
        let latents: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::ones(&[4, 2, 2]).map(|v| v * 7.0)).collect();
        let stats = compute_latent_std(&latents).unwrap();
        assert_eq!(stats.count, 3);
        for &s in stats.std.data() {
            assert_eq!(s, STD_EPS_FLOOR);
        }
    }

    #[test]
    fn plus_minus_one_pattern_has_unit_std() {
        // channel 0 alternates -1/+1 (mean 0, population var 1);
        // channel 1 stays constant and clamps
        let t = Tensor::new(vec![2, 2, 2], vec![-1.0, 1.0, -1.0, 1.0, 3.0, 3.0, 3.0, 3.0]).unwrap();
        let stats = compute_latent_std(&[t]).unwrap();
        assert_eq!(stats.std.data()[0], 1.0);
        assert_eq!(stats.std.data()[1], STD_EPS_FLOOR);
    }

    #[test]
    fn normalized_dataset_has_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let latents: Vec<Tensor<f64>> = (0..5)
            .map(|_| {
                // channel c scaled by (c+1) so stds differ
                let mut t: Tensor<f64> = Tensor::randn(&[3, 4, 4], &mut rng);
                for c in 0..3 {
                    for v in &mut t.data_mut()[c * 16..(c + 1) * 16] {
                        *v *= (c + 1) as f64;
                    }
                }
                t
            })
            .collect();
        let stats = compute_latent_std(&latents).unwrap();
        let normalized: Vec<Tensor<f64>> = latents
            .iter()
            .map(|t| {
                let mut out = t.clone();
                for c in 0..3 {
                    for v in &mut out.data_mut()[c * 16..(c + 1) * 16] {
                        *v /= stats.std.data()[c];
                    }
                }
                out
            })
            .collect();
        let again = compute_latent_std(&normalized).unwrap();
        for &s in again.std.data() {
            assert!((s - 1.0).abs() < 1e-6, "std after normalization: {s}");
        }
    }

    #[test]
    fn latent_std_is_exactly_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let latents: Vec<Tensor<f64>> = (0..6).map(|_| Tensor::randn(&[2, 3, 3], &mut rng)).collect();
        let a = compute_latent_std(&latents).unwrap();
        let mut shuffled = latents.clone();
        shuffled.reverse();
        shuffled.swap(1, 3);
        let b = compute_latent_std(&shuffled).unwrap();
        assert!(a.std.bit_eq(&b.std));
    }

    #[test]
    fn empty_and_ragged_inputs_are_errors() {
        assert!(matches!(compute_latent_std::<f64>(&[]), Err(Error::InvalidArgument(_))));
        let a: Tensor<f64> = Tensor::zeros(&[2, 2, 2]);
        let b: Tensor<f64> = Tensor::zeros(&[2, 3, 2]);
        assert!(matches!(compute_latent_std(&[a, b]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn unit_stats_normalize_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let z: Tensor<f64> = Tensor::randn(&[2, 3, 4, 4], &mut rng);
        let mut g = Graph::new();
        let vz = g.constant(z.clone()).unwrap();
        let y = normalize_latent(&mut g, vz, &stats_of(&[1.0, 1.0, 1.0])).unwrap();
        assert!(g.value(y).bit_eq(&z));
    }

    #[test]
    fn stats_of_two_halve_every_value() {
        let z: Tensor<f64> = Tensor::ones(&[1, 2, 2, 2]).map(|v| v * 3.0);
        let mut g = Graph::new();
        let vz = g.constant(z.clone()).unwrap();
        let y = normalize_latent(&mut g, vz, &stats_of(&[2.0, 2.0])).unwrap();
        assert!(g.value(y).bit_eq(&z.map(|v| v * 0.5)));
    }

    #[test]
    fn normalize_then_rescale_restores_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let z: Tensor<f64> = Tensor::randn(&[1, 4, 3, 3], &mut rng);
        let stats = stats_of(&[0.3, 1.7, 2.2, 5.0]);
        let mut g = Graph::new();
        let vz = g.constant(z.clone()).unwrap();
        let y = normalize_latent(&mut g, vz, &stats).unwrap();
        let back = Tensor::from_fn(&[1, 4, 1, 1], |i| stats.std.data()[i]);
        let vb = g.constant(back).unwrap();
        let restored = g.mul(y, vb).unwrap();
        assert!(g.value(restored).max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn normalize_rejects_channel_mismatch() {
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 3, 2, 2])).unwrap();
        assert!(matches!(
            normalize_latent(&mut g, z, &stats_of(&[1.0, 1.0])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    fn attn_fixture(c: usize, d: usize, seed: u64) -> (ParamStore<f64>, CrossAttnParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = CrossAttnParams::init(&mut store, "xa", c, d, &mut rng);
        (store, p)
    }

    #[test]
    fn attention_maps_are_a_distribution_over_keys() {
        let (store, p) = attn_fixture(6, 9, 94);
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        let feat: Tensor<f64> = Tensor::randn(&[2, 6, 4, 4], &mut rng);
        let emb: Tensor<f64> = Tensor::randn(&[5, 9], &mut rng);
        let mut g = Graph::new();
        let b = store.bind(&mut g).unwrap();
        let vf = g.constant(feat).unwrap();
        let ve = g.constant(emb).unwrap();
        let (out, maps) = cross_attention(&mut g, vf, ve, &p.bind(&b)).unwrap();
        assert_eq!(g.shape(out), &[2, 6, 4, 4]);
        assert_eq!(g.shape(maps), &[2, 5, 4, 4]);
        let m = g.value(maps);
        for n in 0..2 {
            for pix in 0..16 {
                let total: f64 = (0..5).map(|k| m.data()[(n * 5 + k) * 16 + pix]).sum();
                assert!((total - 1.0).abs() < 1e-6, "weights sum {total}");
            }
        }
    }

    #[test]
    fn single_key_collapses_to_value_broadcast() {
        let (store, p) = attn_fixture(4, 7, 96);
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let feat: Tensor<f64> = Tensor::randn(&[1, 4, 3, 3], &mut rng);
        let emb: Tensor<f64> = Tensor::randn(&[1, 7], &mut rng);
        let mut g = Graph::new();
        let b = store.bind(&mut g).unwrap();
        let vf = g.constant(feat.clone()).unwrap();
        let ve = g.constant(emb.clone()).unwrap();
        let (out, maps) = cross_attention(&mut g, vf, ve, &p.bind(&b)).unwrap();
        for &v in g.value(maps).data() {
            assert_eq!(v, 1.0);
        }
        // value row by hand: v = emb . v_w rows
        let vw = store.get(p.v_w);
        for ch in 0..4 {
            let want: f64 = (0..7).map(|j| emb.data()[j] * vw.data()[ch * 7 + j]).sum();
            for pix in 0..9 {
                let got = g.value(out).data()[ch * 9 + pix] - feat.data()[ch * 9 + pix];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_pixel_two_key_weights_match_hand_softmax() {
        // identity-ish projections so scores are inner products we can
        // write down: C = 2, D = 2, q conv = identity, k_w = identity
        let mut store: ParamStore<f64> = ParamStore::new();
        let p = CrossAttnParams {
            q_w: store.add("xa.q", Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
            k_w: store.add("xa.k", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
            v_w: store.add("xa.v", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
            channels: 2,
            dim: 2,
        };
        // pixels (1,0) and (0,2); keys (1,0) and (0,1)
        let feat = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let emb = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let b = store.bind(&mut g).unwrap();
        let vf = g.constant(feat).unwrap();
        let ve = g.constant(emb).unwrap();
        let (_, maps) = cross_attention(&mut g, vf, ve, &p.bind(&b)).unwrap();
        let scale = 1.0 / 2.0_f64.sqrt();
        // pixel 0 = (1,0): scores (1,0)*scale; pixel 1 = (0,2): scores (0,2)*scale
        let w00 = (1.0 * scale).exp() / ((1.0 * scale).exp() + (0.0 * scale).exp());
        let w11 = (2.0 * scale).exp() / ((0.0 * scale).exp() + (2.0 * scale).exp());
        let m = g.value(maps); // (1,2,1,2): k-major, pixel-minor
        assert!((m.data()[0] - w00).abs() < 1e-12);
        assert!((m.data()[2] - (1.0 - w00)).abs() < 1e-12);
        assert!((m.data()[1] - (1.0 - w11)).abs() < 1e-12);
        assert!((m.data()[3] - w11).abs() < 1e-12);
    }

    #[test]
    fn cross_attention_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(98);
        let feat: Tensor<f64> = Tensor::rand_uniform(&[1, 3, 2, 2], -1.0, 1.0, &mut rng);
        let emb: Tensor<f64> = Tensor::rand_uniform(&[2, 4], -1.0, 1.0, &mut rng);
        let qw: Tensor<f64> = Tensor::rand_uniform(&[3, 3, 1, 1], -0.5, 0.5, &mut rng);
        let kw: Tensor<f64> = Tensor::rand_uniform(&[3, 4], -0.5, 0.5, &mut rng);
        let vw: Tensor<f64> = Tensor::rand_uniform(&[3, 4], -0.5, 0.5, &mut rng);
        let out = GradCheck::default()
            .run(&[feat, emb, qw, kw, vw], &|g, v| {
                let p = CrossAttnVars { q_w: v[2], k_w: v[3], v_w: v[4], channels: 3, dim: 4 };
                let (y, maps) = cross_attention(g, v[0], v[1], &p)?;
                // pull loss through both outputs
                let a = g.mean_all(y)?;
                let b = g.mean_all(maps)?;
                g.add(a, b)
            })
            .unwrap();
        assert!(out.max_rel_err < 1e-4, "rel err {}", out.max_rel_err);
    }

    fn stub_fixture(seed: u64) -> (ParamStore<f32>, StubParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = StubParams::init(&mut store, "stub", &[32, 64, 96, 128], 24, 8, &mut rng);
        (store, p)
    }

    #[test]
    fn default_config_pyramid_shapes() {
        let (store, p) = stub_fixture(99);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let x: Tensor<f32> = Tensor::randn(&[2, 3, 64, 64], &mut rng);
        let emb: Tensor<f32> = Tensor::randn(&[5, 24], &mut rng);
        let mut g = Graph::new();
        let b = store.bind(&mut g).unwrap();
        let vx = g.constant(x).unwrap();
        let ve = g.constant(emb).unwrap();
        let (pyr, maps) = p.extract_pyramid(&mut g, vx, ve, None, &b).unwrap();
        let want: [&[usize]; 4] =
            [&[2, 128, 2, 2], &[2, 96, 4, 4], &[2, 64, 8, 8], &[2, 32, 16, 16]];
        for (v, w) in pyr.iter().zip(want) {
            assert_eq!(g.shape(*v), w);
        }
        for (m, w) in maps.iter().zip([[2, 5, 2, 2], [2, 5, 4, 4], [2, 5, 8, 8], [2, 5, 16, 16]]) {
            assert_eq!(g.shape(*m), &w);
        }
        let shapes: Vec<&[usize]> = pyr.iter().map(|&v| g.shape(v)).collect();
        crate::imafr::validate_pyramid(&shapes).unwrap();
    }

    #[test]
    fn indivisible_extents_are_rejected() {
        let (store, p) = stub_fixture(101);
        assert_eq!(p.required_divisor(), 32);
        let mut g: Graph<f32> = Graph::new();
        let b = store.bind(&mut g).unwrap();
        let vx = g.constant(Tensor::zeros(&[1, 3, 48, 48])).unwrap();
        let ve = g.constant(Tensor::zeros(&[2, 24])).unwrap();
        assert!(matches!(
            p.extract_pyramid(&mut g, vx, ve, None, &b),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn changing_the_embedding_changes_every_level() {
        let (store, p) = stub_fixture(102);
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let x: Tensor<f32> = Tensor::randn(&[1, 3, 64, 64], &mut rng);
        let e1: Tensor<f32> = Tensor::randn(&[3, 24], &mut rng);
        let e2: Tensor<f32> = Tensor::randn(&[3, 24], &mut rng);
        let run = |emb: &Tensor<f32>| -> Vec<Tensor<f32>> {
            let mut g = Graph::new();
            let b = store.bind(&mut g).unwrap();
            let vx = g.constant(x.clone()).unwrap();
            let ve = g.constant(emb.clone()).unwrap();
            let (pyr, _) = p.extract_pyramid(&mut g, vx, ve, None, &b).unwrap();
            pyr.into_iter().map(|v| g.value(v).clone()).collect()
        };
        for (a, b) in run(&e1).iter().zip(run(&e2)) {
            assert!(a.max_abs_diff(&b) > 0.0);
        }
    }

    #[test]
    fn latent_stats_change_the_outputs() {
        let (store, p) = stub_fixture(104);
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let x: Tensor<f32> = Tensor::randn(&[1, 3, 64, 64], &mut rng);
        let emb: Tensor<f32> = Tensor::randn(&[2, 24], &mut rng);
        let run = |stats: Option<&LatentStats<f32>>| -> Tensor<f32> {
            let mut g = Graph::new();
            let b = store.bind(&mut g).unwrap();
            let vx = g.constant(x.clone()).unwrap();
            let ve = g.constant(emb.clone()).unwrap();
            let (pyr, _) = p.extract_pyramid(&mut g, vx, ve, stats, &b).unwrap();
            g.value(pyr[0]).clone()
        };
        let latent = latent_of_image(&store, &p, &{
            let mut img = Tensor::zeros(&[3, 64, 64]);
            img.data_mut().copy_from_slice(x.data());
            img
        })
        .unwrap();
        let stats = compute_latent_std(&[latent]).unwrap();
        let with = run(Some(&stats));
        let without = run(None);
        assert!(with.max_abs_diff(&without) > 0.0);
    }

    #[test]
    fn gradient_reaches_the_embedding() {
        let (store, p) = stub_fixture(106);
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let x: Tensor<f32> = Tensor::randn(&[1, 3, 64, 64], &mut rng);
        let emb: Tensor<f32> = Tensor::randn(&[2, 24], &mut rng);
        let mut g = Graph::new();
        let b = store.bind(&mut g).unwrap();
        let vx = g.constant(x).unwrap();
        let ve = g.leaf(emb).unwrap();
        let (pyr, _) = p.extract_pyramid(&mut g, vx, ve, None, &b).unwrap();
        let loss = g.mean_all(pyr[0]).unwrap(); // coarsest level only
        let grads = g.backward(loss).unwrap();
        let ge = grads.get(ve).unwrap();
        assert!(ge.data().iter().any(|&v| v != 0.0), "embedding gradient is all zero");
    }
}
