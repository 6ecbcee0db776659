//! The depth decoder: fuses the refined pyramid with the attention
//! maps, predicts adaptive metric bins plus per-pixel probabilities
//! (or a sigmoid regression fallback), and scores predictions with the
//! scale-invariant log loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{conv_block, ConvBlockParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, PoolAxis, PoolKind, PoolScope, Var};
use crate::params::{init_fan_in, Binding, ParamId, ParamStore};
use crate::tensor::{Element, MaskTensor, Tensor};

/// Valid metric depth interval in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthRange {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self> {
        if !(d_min.is_finite() && d_max.is_finite() && 0.0 < d_min && d_min < d_max) {
            return Err(Error::InvalidArgument(format!(
                "invalid depth range [{d_min}, {d_max}]"
            )));
        }
        Ok(DepthRange { d_min, d_max })
    }

    pub fn span(&self) -> f64 {
        self.d_max - self.d_min
    }
}

/// Adaptive bin layout for one batch, kept as graph nodes so the layout
/// trains end to end.
#[derive(Debug, Clone, Copy)]
pub struct BinPartition {
    /// (N,B), strictly increasing inside (d_min, d_max).
    pub centers: Var,
    /// (N,B), positive, each row summing to 1.
    pub widths: Var,
    pub range: DepthRange,
}

/// Additive floor mixed into the softmax widths. Without it, extreme
/// logits underflow a width below the ULP of the running cumulative sum
/// and adjacent centers collide; the floor bounds every width away from
/// zero so the layout stays strictly monotone in floating point.
pub const WIDTH_FLOOR: f64 = 1e-3;

/// Turn logits into bin widths w = (softmax + floor) / (1 + B*floor)
/// and place each center mid-bin: c_k = d_min + span * (cum_k - w_k/2).
pub fn predict_bins<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    range: DepthRange,
) -> Result<BinPartition> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!("bin logits must be (N,B), got {shape:?}")));
    }
    let b = shape[1];
    if b < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {b}")));
    }
    let soft = g.softmax(logits, 1)?;
    let raised = g.add_scalar(soft, WIDTH_FLOOR)?;
    let widths = g.mul_scalar(raised, 1.0 / (1.0 + b as f64 * WIDTH_FLOOR))?;
    // prefix sums via one linear with a constant lower-triangular ones
    // matrix: (w L^T)_k = sum_{j<=k} w_j
    let tri = Tensor::from_fn(&[b, b], |i| {
        let (row, col) = (i / b, i % b);
        if col <= row { T::ONE } else { T::ZERO }
    });
    let tri = g.constant(tri)?;
    let cums = g.linear(widths, tri, None)?;
    let half = g.mul_scalar(widths, -0.5)?;
    let mid = g.add(cums, half)?;
    let scaled = g.mul_scalar(mid, range.span())?;
    let centers = g.add_scalar(scaled, range.d_min)?;
    Ok(BinPartition { centers, widths, range })
}

/// Per-pixel expectation over bin centers: depth = sum_k p_k * c_k,
/// (N,B,H,W) x (N,B) -> (N,1,H,W). Convexity keeps the output inside
/// the bin range.
pub fn depth_from_bins<T: Element>(
    g: &mut Graph<T>,
    probs: Var,
    bins: &BinPartition,
) -> Result<Var> {
    let ps = g.shape(probs).to_vec();
    let cs = g.shape(bins.centers).to_vec();
    if ps.len() != 4 || cs.len() != 2 || ps[0] != cs[0] || ps[1] != cs[1] {
        return Err(Error::ShapeMismatch(format!(
            "probs {ps:?} incompatible with centers {cs:?}"
        )));
    }
    let c = g.reshape(bins.centers, &[cs[0], cs[1], 1, 1])?;
    let c = g.broadcast_to(c, &ps)?;
    let weighted = g.mul(probs, c)?;
    g.sum_axis(weighted, 1)
}

// ── Decoder ──────────────────────────────────────────────────────────

/// Output head: either the adaptive-bins classifier or the plain
/// sigmoid regressor (the bins-off ablation). Regression checkpoints
/// carry no bin weights at all.
#[derive(Debug, Clone)]
pub enum HeadParams {
    Bins {
        /// 1x1 conv width -> B for per-pixel logits.
        logits_w: ParamId,
        logits_b: ParamId,
        /// Linear width -> B over pooled features for the bin layout.
        bins_w: ParamId,
        bins_b: ParamId,
        num_bins: usize,
    },
    Regression {
        w: ParamId,
        b: ParamId,
    },
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    /// Per level, coarse to fine: (C_i + K) -> width.
    pub reduce: Vec<ConvBlockParams>,
    /// After concatenating the upsampled levels: (L * width) -> width.
    pub fuse: ConvBlockParams,
    pub head: HeadParams,
    pub width: usize,
    /// Attention-map channels the decoder was built for.
    pub k: usize,
    pub range: DepthRange,
}

impl DecoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: &[usize],
        k: usize,
        width: usize,
        bins: Option<usize>,
        range: DepthRange,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(!channels.is_empty(), "decoder needs at least one pyramid level");
        let reduce = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                ConvBlockParams::init(store, &format!("{prefix}.reduce{i}"), c + k, width, groups, rng)
            })
            .collect::<Vec<_>>();
        let fuse = ConvBlockParams::init(
            store,
            &format!("{prefix}.fuse"),
            channels.len() * width,
            width,
            groups,
            rng,
        );
        let head = match bins {
            Some(b) => HeadParams::Bins {
                logits_w: store
                    .add(format!("{prefix}.logits.weight"), init_fan_in(&[b, width, 1, 1], width, rng)),
                logits_b: store.add(format!("{prefix}.logits.bias"), Tensor::zeros(&[b])),
                bins_w: store.add(format!("{prefix}.bins.weight"), init_fan_in(&[b, width], width, rng)),
                bins_b: store.add(format!("{prefix}.bins.bias"), Tensor::zeros(&[b])),
                num_bins: b,
            },
            None => HeadParams::Regression {
                w: store.add(format!("{prefix}.reg.weight"), init_fan_in(&[1, width, 1, 1], width, rng)),
                b: store.add(format!("{prefix}.reg.bias"), Tensor::zeros(&[1])),
            },
        };
        DecoderParams { reduce, fuse, head, width, k, range }
    }

    pub fn bins_enabled(&self) -> bool {
        matches!(self.head, HeadParams::Bins { .. })
    }
}

/// Everything decode produces, still inside the graph. `probs` and
/// `bins` exist only in bins mode.
#[derive(Debug, Clone, Copy)]
pub struct DepthOutput {
    /// (N,1,target_h,target_w), inside [d_min, d_max].
    pub depth: Var,
    /// (N,B,target_h,target_w), rows summing to 1 over B.
    pub probs: Option<Var>,
    pub bins: Option<BinPartition>,
}

/// Value-level snapshot of a prediction, for evaluation and reports.
#[derive(Debug, Clone)]
pub struct DepthPrediction<T: Element> {
    pub depth: Tensor<T>,
    pub probs: Option<Tensor<T>>,
}

impl DepthOutput {
    pub fn values<T: Element>(&self, g: &Graph<T>) -> DepthPrediction<T> {
        DepthPrediction {
            depth: g.value(self.depth).clone(),
            probs: self.probs.map(|p| g.value(p).clone()),
        }
    }
}

/// Fuse pyramid + attention maps and emit depth at `target_hw`.
///
/// Per level: concat(f_i, attn_i) -> conv block -> bilinear resize to
/// the finest level; the concatenated stack fuses into one map feeding
/// the head. Bins mode softmaxes per-pixel logits, lays out bins from
/// globally pooled features, upsamples the probabilities to the target
/// and takes the expectation; regression mode squashes a 1-channel conv
/// through a sigmoid onto [d_min, d_max].
pub fn decode<T: Element>(
    g: &mut Graph<T>,
    pyramid: &[Var],
    maps: &[Var],
    target_hw: (usize, usize),
    p: &DecoderParams,
    binding: &Binding,
) -> Result<DepthOutput> {
    if pyramid.is_empty() || pyramid.len() != maps.len() {
        return Err(Error::InvalidArgument(format!(
            "decoder needs matching pyramid/maps, got {} levels and {} maps",
            pyramid.len(),
            maps.len()
        )));
    }
    if pyramid.len() != p.reduce.len() {
        return Err(Error::InvalidArgument(format!(
            "decoder built for {} levels, given {}",
            p.reduce.len(),
            pyramid.len()
        )));
    }
    let n = g.shape(pyramid[0])[0];
    for (&f, &m) in pyramid.iter().zip(maps) {
        let (fs, ms) = (g.shape(f).to_vec(), g.shape(m).to_vec());
        if ms.len() != 4 || ms[0] != n || ms[1] != p.k || ms[2] != fs[2] || ms[3] != fs[3] {
            return Err(Error::ShapeMismatch(format!(
                "attention map {ms:?} does not match level {fs:?} with K={}",
                p.k
            )));
        }
    }
    let finest = *pyramid.last().expect("nonempty");
    let (fh, fw) = (g.shape(finest)[2], g.shape(finest)[3]);

    let mut upsampled = Vec::with_capacity(pyramid.len());
    for ((&f, &m), reduce) in pyramid.iter().zip(maps).zip(&p.reduce) {
        let cat = g.concat_channels(&[f, m])?;
        let r = conv_block(g, cat, &reduce.bind(binding))?;
        upsampled.push(g.resize_bilinear(r, fh, fw)?);
    }
    let stack = g.concat_channels(&upsampled)?;
    let fused = conv_block(g, stack, &p.fuse.bind(binding))?;

    let (th, tw) = target_hw;
    match &p.head {
        HeadParams::Bins { logits_w, logits_b, bins_w, bins_b, .. } => {
            let logits =
                g.conv2d(fused, binding.var(*logits_w), Some(binding.var(*logits_b)), 1, 0)?;
            let probs = g.softmax(logits, 1)?;
            let pooled = g.pool(fused, PoolKind::Avg, PoolScope::Global, PoolAxis::Spatial)?;
            let pooled = g.reshape(pooled, &[n, p.width])?;
            let bin_logits =
                g.linear(pooled, binding.var(*bins_w), Some(binding.var(*bins_b)))?;
            let bins = predict_bins(g, bin_logits, p.range)?;
            // Upsampling the probabilities and then taking the expectation
            // equals upsampling the depth (both are linear), and keeps the
            // returned probs/depth pair self-consistent at full resolution.
            let probs_full = g.resize_bilinear(probs, th, tw)?;
            let depth = depth_from_bins(g, probs_full, &bins)?;
            Ok(DepthOutput { depth, probs: Some(probs_full), bins: Some(bins) })
        }
        HeadParams::Regression { w, b } => {
            let pre = g.conv2d(fused, binding.var(*w), Some(binding.var(*b)), 1, 0)?;
            let squashed = g.sigmoid(pre)?;
            let scaled = g.mul_scalar(squashed, p.range.span())?;
            let depth4 = g.add_scalar(scaled, p.range.d_min)?;
            let depth = g.resize_bilinear(depth4, th, tw)?;
            Ok(DepthOutput { depth, probs: None, bins: None })
        }
    }
}

// ── Scale-invariant log loss ─────────────────────────────────────────

pub const SILOG_LAMBDA: f64 = 0.85;
pub const SILOG_ALPHA: f64 = 10.0;

/// alpha * sqrt(mean(g^2) - lambda * mean(g)^2) over masked pixels,
/// g = log pred - log gt. Masked-out pixels are spliced to 1 before the
/// log, so their prediction values cannot influence the loss (bitwise),
/// and the difference under the sqrt is clamped at 0 against roundoff.
pub fn silog_loss<T: Element>(
    g: &mut Graph<T>,
    pred: Var,
    gt: &Tensor<T>,
    mask: &MaskTensor,
    lambda: f64,
    alpha: f64,
) -> Result<Var> {
    let ps = g.shape(pred).to_vec();
    if ps != gt.shape() || ps != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?}, gt {:?}, mask {:?} must agree",
            ps,
            gt.shape(),
            mask.shape()
        )));
    }
    let m = mask.data().iter().filter(|&&b| b).count();
    if m == 0 {
        return Err(Error::InvalidArgument("loss over an empty mask".into()));
    }
    for (v, &keep) in gt.data().iter().zip(mask.data()) {
        if keep && v.to_f64() <= 0.0 {
            return Err(Error::Domain(format!(
                "ground truth must be positive under the mask, found {}",
                v.to_f64()
            )));
        }
    }
    let mask_f = Tensor::from_fn(gt.shape(), |i| if mask.data()[i] { T::ONE } else { T::ZERO });
    let anti_f = Tensor::from_fn(gt.shape(), |i| if mask.data()[i] { T::ZERO } else { T::ONE });
    // log gt with masked-out entries already zeroed (log 1)
    let log_gt = Tensor::from_fn(gt.shape(), |i| {
        if mask.data()[i] { T::from_f64(gt.data()[i].to_f64().ln()) } else { T::ZERO }
    });
    let vm = g.constant(mask_f)?;
    let va = g.constant(anti_f)?;
    let vlg = g.constant(log_gt)?;

    let kept = g.mul(pred, vm)?;
    let pred_safe = g.add(kept, va)?; // masked-out pixels become exactly 1
    let log_pred = g.log(pred_safe)?;
    let diff = g.sub(log_pred, vlg)?; // zero wherever masked out

    let sq = g.mul(diff, diff)?;
    let sum_sq = g.sum_all(sq)?;
    let mean_sq = g.mul_scalar(sum_sq, 1.0 / m as f64)?;
    let sum_d = g.sum_all(diff)?;
    let mean_d = g.mul_scalar(sum_d, 1.0 / m as f64)?;
    let mean_d2 = g.mul(mean_d, mean_d)?;
    let scaled = g.mul_scalar(mean_d2, lambda)?;
    let gap = g.sub(mean_sq, scaled)?;
    let clamped = g.relu(gap)?;
    let root = g.sqrt(clamped)?;
    g.mul_scalar(root, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const RANGE: DepthRange = DepthRange { d_min: 0.001, d_max: 10.0 };

    fn bins_of(logits: Tensor<f64>, range: DepthRange) -> (Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        let vl = g.constant(logits).unwrap();
        let b = predict_bins(&mut g, vl, range).unwrap();
        (g.value(b.centers).clone(), g.value(b.widths).clone())
    }

    #[test]
    fn uniform_logits_space_centers_evenly() {
        let b = 8;
        let (centers, widths) = bins_of(Tensor::zeros(&[1, b]), RANGE);
        for k in 0..b {
            let want = RANGE.d_min + RANGE.span() * (k as f64 + 0.5) / b as f64;
            assert!((centers.data()[k] - want).abs() < 1e-12, "center {k}");
            assert!((widths.data()[k] - 1.0 / b as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn random_logits_match_prefix_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(110);
        for _ in 0..20 {
            let logits: Tensor<f64> = Tensor::rand_uniform(&[3, 16], -4.0, 4.0, &mut rng);
            let (centers, widths) = bins_of(logits.clone(), RANGE);
            for n in 0..3 {
                // softmax + floor by hand, then the prefix-sum formula
                let row = &logits.data()[n * 16..(n + 1) * 16];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                let total: f64 = exps.iter().sum();
                let mut cum = 0.0;
                for k in 0..16 {
                    let w = (exps[k] / total + WIDTH_FLOOR) / (1.0 + 16.0 * WIDTH_FLOOR);
                    cum += w;
                    let want = RANGE.d_min + RANGE.span() * (cum - w / 2.0);
                    assert!((centers.data()[n * 16 + k] - want).abs() < 1e-12);
                    assert!((widths.data()[n * 16 + k] - w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn indoor_range_keeps_centers_under_ten_meters() {
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        let logits: Tensor<f64> = Tensor::rand_uniform(&[4, 64], -6.0, 6.0, &mut rng);
        let (centers, _) = bins_of(logits, DepthRange::new(0.001, 10.0).unwrap());
        for &c in centers.data() {
            assert!(c < 10.0 && c > 0.001);
        }
    }

    #[test]
    fn degenerate_ranges_and_single_bin_are_rejected() {
        assert!(DepthRange::new(0.0, 10.0).is_err());
        assert!(DepthRange::new(5.0, 5.0).is_err());
        assert!(DepthRange::new(8.0, 2.0).is_err());
        assert!(DepthRange::new(0.1, f64::INFINITY).is_err());
        let mut g: Graph<f64> = Graph::new();
        let one = g.constant(Tensor::zeros(&[2, 1])).unwrap();
        assert!(matches!(predict_bins(&mut g, one, RANGE), Err(Error::InvalidArgument(_))));
    }

    proptest! {
        #[test]
        fn centers_strictly_increase_for_any_logits(
            raw in proptest::collection::vec(-30.0f64..30.0, 12)
        ) {
            let logits = Tensor::new(vec![1, 12], raw).unwrap();
            let (centers, widths) = bins_of(logits, RANGE);
            for k in 1..12 {
                prop_assert!(centers.data()[k] > centers.data()[k - 1]);
            }
            let sum: f64 = widths.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(widths.data().iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn one_hot_probs_return_the_center_exactly() {
        let b = 5;
        let mut g = Graph::new();
        let logits = g.constant(Tensor::rand_uniform(&[1, b], -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(112))).unwrap();
        let bins = predict_bins(&mut g, logits, RANGE).unwrap();
        for hot in 0..b {
            let probs = Tensor::from_fn(&[1, b, 2, 2], |i| {
                if (i / 4) % b == hot { 1.0 } else { 0.0 }
            });
            let vp = g.constant(probs).unwrap();
            let d = depth_from_bins(&mut g, vp, &bins).unwrap();
            let want = g.value(bins.centers).data()[hot];
            for &v in g.value(d).data() {
                assert_eq!(v, want);
            }
        }
    }

    #[test]
    fn uniform_probs_return_the_mean_center() {
        let b = 7;
        let mut g = Graph::new();
        let logits = g.constant(Tensor::rand_uniform(&[1, b], -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(113))).unwrap();
        let bins = predict_bins(&mut g, logits, RANGE).unwrap();
        let probs = Tensor::from_fn(&[1, b, 1, 1], |_| 1.0 / b as f64);
        let vp = g.constant(probs).unwrap();
        let d = depth_from_bins(&mut g, vp, &bins).unwrap();
        let mean: f64 = g.value(bins.centers).data().iter().sum::<f64>() / b as f64;
        assert!((g.value(d).data()[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn random_probs_match_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(114);
        let (n, b, h, w) = (2, 6, 3, 3);
        let mut g = Graph::new();
        let logits = g.constant(Tensor::rand_uniform(&[n, b], -2.0, 2.0, &mut rng)).unwrap();
        let bins = predict_bins(&mut g, logits, RANGE).unwrap();
        // random distributions per pixel
        let raw: Tensor<f64> = Tensor::rand_uniform(&[n, b, h, w], 0.1, 1.0, &mut rng);
        let probs = {
            let mut t = raw.clone();
            for ni in 0..n {
                for pix in 0..h * w {
                    let total: f64 =
                        (0..b).map(|k| raw.data()[(ni * b + k) * h * w + pix]).sum();
                    for k in 0..b {
                        t.data_mut()[(ni * b + k) * h * w + pix] /= total;
                    }
                }
            }
            t
        };
        let vp = g.constant(probs.clone()).unwrap();
        let d = depth_from_bins(&mut g, vp, &bins).unwrap();
        let centers = g.value(bins.centers).clone();
        for ni in 0..n {
            for pix in 0..h * w {
                let want: f64 = (0..b)
                    .map(|k| probs.data()[(ni * b + k) * h * w + pix] * centers.data()[ni * b + k])
                    .sum();
                let got = g.value(d).data()[ni * h * w + pix];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bin_count_mismatch_is_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 4])).unwrap();
        let bins = predict_bins(&mut g, logits, RANGE).unwrap();
        let probs = g.constant(Tensor::zeros(&[1, 5, 2, 2])).unwrap();
        assert!(matches!(depth_from_bins(&mut g, probs, &bins), Err(Error::ShapeMismatch(_))));
    }

    // small two-level fixture: levels (N,3,2,2) and (N,2,4,4), K = 2
    fn decode_fixture(
        bins: Option<usize>,
        seed: u64,
    ) -> (ParamStore<f64>, DecoderParams, Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = DecoderParams::init(&mut store, "dec", &[3, 2], 2, 4, bins, RANGE, 8, &mut rng);
        let pyr = vec![
            Tensor::rand_uniform(&[1, 3, 2, 2], -1.0, 1.0, &mut rng),
            Tensor::rand_uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng),
        ];
        let maps = vec![
            Tensor::rand_uniform(&[1, 2, 2, 2], 0.0, 1.0, &mut rng),
            Tensor::rand_uniform(&[1, 2, 4, 4], 0.0, 1.0, &mut rng),
        ];
        (store, p, pyr, maps)
    }

    fn run_decode(
        store: &ParamStore<f64>,
        p: &DecoderParams,
        pyr: &[Tensor<f64>],
        maps: &[Tensor<f64>],
        target: (usize, usize),
    ) -> (Graph<f64>, DepthOutput) {
        let mut g = Graph::new();
        let b = store.bind(&mut g).unwrap();
        let vp: Vec<Var> = pyr.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let vm: Vec<Var> = maps.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let out = decode(&mut g, &vp, &vm, target, p, &b).unwrap();
        (g, out)
    }

    #[test]
    fn bins_mode_emits_full_resolution_distributions_in_range() {
        let (store, p, pyr, maps) = decode_fixture(Some(6), 115);
        let (g, out) = run_decode(&store, &p, &pyr, &maps, (16, 16));
        assert_eq!(g.shape(out.depth), &[1, 1, 16, 16]);
        let probs = out.probs.expect("bins mode keeps probabilities");
        assert_eq!(g.shape(probs), &[1, 6, 16, 16]);
        assert!(out.bins.is_some());
        let pv = g.value(probs);
        for pix in 0..256 {
            let total: f64 = (0..6).map(|k| pv.data()[k * 256 + pix]).sum();
            assert!((total - 1.0).abs() < 1e-6, "pixel {pix} sums to {total}");
        }
        for &d in g.value(out.depth).data() {
            assert!((RANGE.d_min..=RANGE.d_max).contains(&d));
        }
    }

    #[test]
    fn regression_mode_stays_in_range_and_builds_no_bins() {
        let (store, p, pyr, maps) = decode_fixture(None, 116);
        assert!(!p.bins_enabled());
        let (g, out) = run_decode(&store, &p, &pyr, &maps, (16, 16));
        assert_eq!(g.shape(out.depth), &[1, 1, 16, 16]);
        assert!(out.probs.is_none());
        assert!(out.bins.is_none());
        for &d in g.value(out.depth).data() {
            assert!((RANGE.d_min..=RANGE.d_max).contains(&d));
        }
    }

    #[test]
    fn every_decoder_parameter_receives_gradient_in_both_modes() {
        for bins in [Some(4), None] {
            let (store, p, pyr, maps) = decode_fixture(bins, 117);
            let mut g = Graph::new();
            let b = store.bind(&mut g).unwrap();
            let vp: Vec<Var> = pyr.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
            let vm: Vec<Var> = maps.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
            let out = decode(&mut g, &vp, &vm, (8, 8), &p, &b).unwrap();
            let loss = g.mean_all(out.depth).unwrap();
            let grads = g.backward(loss).unwrap();
            for id in store.ids() {
                let gr = grads.get(b.var(id)).unwrap();
                assert!(
                    gr.data().iter().any(|&v| v != 0.0),
                    "zero gradient on `{}` (bins={})",
                    store.name(id),
                    bins.is_some()
                );
            }
            for &v in &vp {
                assert!(grads.get(v).unwrap().data().iter().any(|&x| x != 0.0));
            }
        }
    }

    #[test]
    fn decode_gradcheck_against_finite_differences() {
        let (store, p, pyr, maps) = decode_fixture(Some(4), 118);
        let n_params = store.len();
        let mut inputs: Vec<Tensor<f64>> = store.ids().map(|id| store.get(id).clone()).collect();
        inputs.extend(pyr.iter().cloned());
        inputs.extend(maps.iter().cloned());
        let check = GradCheck { max_probes: 30, ..GradCheck::default() };
        let out = check
            .run(&inputs, &|g, v| {
                let binding = Binding::from_vars(v[..n_params].to_vec());
                let vp = vec![v[n_params], v[n_params + 1]];
                let vm = vec![v[n_params + 2], v[n_params + 3]];
                let out = decode(g, &vp, &vm, (8, 8), &p, &binding)?;
                g.mean_all(out.depth)
            })
            .unwrap();
        assert!(out.max_rel_err < 1e-4, "rel err {}", out.max_rel_err);
    }

    #[test]
    fn mismatched_maps_are_rejected() {
        let (store, p, pyr, mut maps) = decode_fixture(Some(4), 119);
        maps[1] = Tensor::zeros(&[1, 3, 4, 4]); // K = 3, decoder built for 2
        let mut g = Graph::new();
        let b = store.bind(&mut g).unwrap();
        let vp: Vec<Var> = pyr.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let vm: Vec<Var> = maps.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        assert!(matches!(
            decode(&mut g, &vp, &vm, (8, 8), &p, &b),
            Err(Error::ShapeMismatch(_))
        ));
    }

    // ── silog ────────────────────────────────────────────────────────

    fn full_mask(shape: &[usize]) -> MaskTensor {
        MaskTensor::from_fn(shape, |_| true)
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(120);
        let gt: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 4, 4], 0.5, 9.0, &mut rng);
        let mut g = Graph::new();
        let pred = g.constant(gt.clone()).unwrap();
        let loss = silog_loss(&mut g, pred, &gt, &full_mask(&[1, 1, 4, 4]), 0.85, 10.0).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
    }

    #[test]
    fn constant_log_offset_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(121);
        let gt: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 5, 5], 0.5, 5.0, &mut rng);
        for c in [-0.7, 0.3, 1.1] {
            let pred_t = gt.map(|v| v * c.exp());
            let mut g = Graph::new();
            let pred = g.constant(pred_t).unwrap();
            let loss =
                silog_loss(&mut g, pred, &gt, &full_mask(&[1, 1, 5, 5]), 0.85, 10.0).unwrap();
            let want = 10.0 * c.abs() * (1.0f64 - 0.85).sqrt();
            assert!(
                (g.value(loss).data()[0] - want).abs() < 1e-9,
                "c={c}: {} vs {want}",
                g.value(loss).data()[0]
            );
        }
    }

    #[test]
    fn masked_out_predictions_cannot_move_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(122);
        let gt: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 4, 4], 0.5, 9.0, &mut rng);
        let mask = MaskTensor::from_fn(&[1, 1, 4, 4], |i| i % 3 != 0);
        let base: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 4, 4], 0.5, 9.0, &mut rng);
        let mut poisoned = base.clone();
        for i in 0..16 {
            if i % 3 == 0 {
                // wild values, including negatives a log would reject
                poisoned.data_mut()[i] = if i % 2 == 0 { -731.0 } else { 1e12 };
            }
        }
        let run = |p: &Tensor<f64>| {
            let mut g = Graph::new();
            let vp = g.constant(p.clone()).unwrap();
            let loss = silog_loss(&mut g, vp, &gt, &mask, 0.85, 10.0).unwrap();
            g.value(loss).data()[0]
        };
        assert_eq!(run(&base).to_bits(), run(&poisoned).to_bits());
    }

    #[test]
    fn empty_mask_and_bad_gt_are_errors() {
        let gt: Tensor<f64> = Tensor::ones(&[1, 1, 2, 2]);
        let mut g = Graph::new();
        let pred = g.constant(gt.clone()).unwrap();
        let none = MaskTensor::from_fn(&[1, 1, 2, 2], |_| false);
        assert!(matches!(
            silog_loss(&mut g, pred, &gt, &none, 0.85, 10.0),
            Err(Error::InvalidArgument(_))
        ));
        let mut bad = gt.clone();
        bad.data_mut()[1] = -2.0;
        let pred2 = g.constant(gt.clone()).unwrap();
        assert!(matches!(
            silog_loss(&mut g, pred2, &bad, &full_mask(&[1, 1, 2, 2]), 0.85, 10.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn loss_is_nonnegative_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..25 {
            let gt: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 3, 3], 0.2, 8.0, &mut rng);
            let pred_t: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 3, 3], 0.2, 8.0, &mut rng);
            let run = |p: &Tensor<f64>, t: &Tensor<f64>| {
                let mut g = Graph::new();
                let vp = g.constant(p.clone()).unwrap();
                let loss = silog_loss(&mut g, vp, t, &full_mask(&[1, 1, 3, 3]), 0.85, 10.0).unwrap();
                g.value(loss).data()[0]
            };
            let base = run(&pred_t, &gt);
            assert!(base >= 0.0);
            let scaled = run(&pred_t.map(|v| v * 3.7), &gt.map(|v| v * 3.7));
            assert!((base - scaled).abs() < 1e-9, "{base} vs {scaled}");
        }
    }

    #[test]
    fn silog_gradcheck_with_partial_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(124);
        let gt: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 3, 3], 0.5, 5.0, &mut rng);
        let pred: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 3, 3], 0.5, 5.0, &mut rng);
        let mask = MaskTensor::from_fn(&[1, 1, 3, 3], |i| i != 4);
        let out = GradCheck::default()
            .run(&[pred], &|g, v| silog_loss(g, v[0], &gt, &mask, 0.85, 10.0))
            .unwrap();
        assert!(out.max_rel_err < 1e-4, "rel err {}", out.max_rel_err);
    }
}
