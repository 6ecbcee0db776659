//! Synthetic box-scene data: axis-aligned rectangles at sampled metric
//! depths over a far background, rendered as 1/depth-shaded images with
//! seeded noise. Every sample is a pure function of (seed, split,
//! index), and a dataset round-trips through a directory of EVPT files
//! plus JSON sidecars bit for bit.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::DepthRange;
use crate::error::{Error, Result};
use crate::evpt;
use crate::tensor::{Element, MaskTensor, Tensor};
use crate::text::{mix_seed, synth_embeddings, EmbeddingSet};

/// Per-channel tints applied to the 1/depth shading.
const TINT: [f64; 3] = [0.9, 1.0, 1.1];
/// Std of the additive image noise.
const NOISE_STD: f64 = 0.02;
/// Object depths are drawn from [lo*d_max, hi*d_max], inside the range
/// but away from both ends so shading intensities stay bounded.
const OBJ_DEPTH_LO: f64 = 0.05;
const OBJ_DEPTH_HI: f64 = 0.9;
/// Input extents must divide the backbone's full downsampling chain.
pub const EXTENT_DIVISOR: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::InvalidArgument(format!(
                "unknown split `{other}` (expected train or eval)"
            ))),
        }
    }
}

/// Coarse label derived from object count and mean object depth; the
/// kind of side information a caption would carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneClass {
    SparseNear,
    SparseMid,
    SparseFar,
    ClutteredNear,
    ClutteredMid,
    ClutteredFar,
}

impl SceneClass {
    fn derive(count: usize, mean_depth: f64, range: DepthRange) -> Self {
        let sparse = count <= 2;
        let t = (mean_depth - range.d_min) / range.span();
        match (sparse, t) {
            (true, t) if t < 1.0 / 3.0 => SceneClass::SparseNear,
            (true, t) if t < 2.0 / 3.0 => SceneClass::SparseMid,
            (true, _) => SceneClass::SparseFar,
            (false, t) if t < 1.0 / 3.0 => SceneClass::ClutteredNear,
            (false, t) if t < 2.0 / 3.0 => SceneClass::ClutteredMid,
            (false, _) => SceneClass::ClutteredFar,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            SceneClass::SparseNear => "sparse_near",
            SceneClass::SparseMid => "sparse_mid",
            SceneClass::SparseFar => "sparse_far",
            SceneClass::ClutteredNear => "cluttered_near",
            SceneClass::ClutteredMid => "cluttered_mid",
            SceneClass::ClutteredFar => "cluttered_far",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectSpec {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub split: Split,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub rects: Vec<RectSpec>,
    pub background_depth: f64,
    pub scene_class: SceneClass,
}

impl SceneDescriptor {
    /// Content-only text form feeding the embedding generator: two
    /// scenes with identical geometry get identical keys (and so
    /// identical embeddings), regardless of index or split.
    pub fn canonical_key(&self) -> String {
        let mut key = format!("scene:{}:bg={:.6}", self.scene_class.name(), self.background_depth);
        for r in &self.rects {
            key.push_str(&format!(":rect={},{},{},{},{:.6}", r.x, r.y, r.w, r.h, r.depth));
        }
        key
    }
}

/// Everything one training/eval example carries.
#[derive(Debug, Clone)]
pub struct Sample<T: Element> {
    /// (3,H,W) shaded rendering.
    pub image: Tensor<T>,
    /// (1,H,W) metric ground truth.
    pub depth: Tensor<T>,
    /// (1,H,W); every pixel of the synthetic world is valid.
    pub mask: MaskTensor,
    pub descriptor: SceneDescriptor,
    pub embedding: EmbeddingSet<T>,
}

/// Generation parameters; `seed` drives layout, noise, and embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub range: DepthRange,
    /// Embedding rows per scene.
    pub k: usize,
    /// Embedding dimension.
    pub dim: usize,
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.width.is_multiple_of(EXTENT_DIVISOR) || !self.height.is_multiple_of(EXTENT_DIVISOR) {
            return Err(Error::InvalidArgument(format!(
                "image extents {}x{} must be divisible by {EXTENT_DIVISOR}",
                self.width, self.height
            )));
        }
        if self.k == 0 || self.dim == 0 {
            return Err(Error::InvalidArgument("embedding extents must be nonzero".into()));
        }
        DepthRange::new(self.range.d_min, self.range.d_max)?;
        Ok(())
    }
}

fn sample_rng(spec: &DataSpec, split: Split, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&format!("sample:{split}:{index}"), spec.seed))
}

/// Generate one sample; a pure function of (spec, split, index).
pub fn gen_sample<T: Element>(spec: &DataSpec, split: Split, index: usize) -> Result<Sample<T>> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = sample_rng(spec, split, index);

    let count = rng.gen_range(1..=5);
    let rects: Vec<RectSpec> = (0..count)
        .map(|_| {
            let rw = rng.gen_range(w / 4..=w / 2);
            let rh = rng.gen_range(h / 4..=h / 2);
            let x = rng.gen_range(0..=w - rw);
            let y = rng.gen_range(0..=h - rh);
            let depth = rng
                .gen_range(OBJ_DEPTH_LO * spec.range.d_max..OBJ_DEPTH_HI * spec.range.d_max);
            RectSpec { x, y, w: rw, h: rh, depth }
        })
        .collect();
    let mean_depth = rects.iter().map(|r| r.depth).sum::<f64>() / count as f64;
    let descriptor = SceneDescriptor {
        split,
        index,
        width: w,
        height: h,
        rects,
        background_depth: spec.range.d_max,
        scene_class: SceneClass::derive(count, mean_depth, spec.range),
    };

    // nearest covering rectangle wins each pixel
    let mut depth_px = vec![descriptor.background_depth; h * w];
    for r in &descriptor.rects {
        for yy in r.y..r.y + r.h {
            for xx in r.x..r.x + r.w {
                let at = &mut depth_px[yy * w + xx];
                if r.depth < *at {
                    *at = r.depth;
                }
            }
        }
    }
    let depth = Tensor::from_fn(&[1, h, w], |i| T::from_f64(depth_px[i]));
    let image = Tensor::from_fn(&[3, h, w], |i| {
        let (c, pix) = (i / (h * w), i % (h * w));
        let noise: f64 = {
            // independent per channel and pixel, in emission order
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * NOISE_STD
        };
        T::from_f64(TINT[c] / depth_px[pix] + noise)
    });
    let mask = MaskTensor::full(&[1, h, w], true);
    let embedding = synth_embeddings(&descriptor.canonical_key(), spec.k, spec.dim, spec.seed);
    Ok(Sample { image, depth, mask, descriptor, embedding })
}

pub fn gen_split<T: Element>(
    spec: &DataSpec,
    split: Split,
    count: usize,
) -> Result<Vec<Sample<T>>> {
    (0..count).map(|i| gen_sample(spec, split, i)).collect()
}

// ── Directory round trip ─────────────────────────────────────────────

/// `dataset.json` sidecar: the spec echo plus what was materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: DataSpec,
    pub split: Split,
    pub count: usize,
}

/// Layout: dataset.json, samples.jsonl (one descriptor per line), and
/// per-sample `sample_%05d.{image,depth,mask,emb}.evpt`. Masks store as
/// 0/1 tensors since the format has no boolean dtype.
pub fn save_split<T: Element>(
    dir: impl AsRef<Path>,
    spec: &DataSpec,
    split: Split,
    samples: &[Sample<T>],
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = DatasetMeta { spec: *spec, split, count: samples.len() };
    let meta_path = dir.join("dataset.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_path, e))?;
    let mut lines = String::new();
    for (i, s) in samples.iter().enumerate() {
        lines.push_str(&serde_json::to_string(&s.descriptor)?);
        lines.push('\n');
        let stem = format!("sample_{i:05}");
        evpt::write_file(dir.join(format!("{stem}.image.evpt")), &s.image)?;
        evpt::write_file(dir.join(format!("{stem}.depth.evpt")), &s.depth)?;
        let mask_t: Tensor<T> =
            Tensor::from_fn(s.mask.shape(), |j| if s.mask.data()[j] { T::ONE } else { T::ZERO });
        evpt::write_file(dir.join(format!("{stem}.mask.evpt")), &mask_t)?;
        evpt::write_file(dir.join(format!("{stem}.emb.evpt")), s.embedding.vectors())?;
    }
    let jsonl = dir.join("samples.jsonl");
    std::fs::write(&jsonl, lines).map_err(|e| Error::io(&jsonl, e))?;
    Ok(())
}

pub fn load_split<T: Element>(dir: impl AsRef<Path>) -> Result<(DatasetMeta, Vec<Sample<T>>)> {
    let dir = dir.as_ref();
    let meta_path = dir.join("dataset.json");
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)?;
    meta.spec.validate()?;
    let jsonl = dir.join("samples.jsonl");
    let lines = std::fs::read_to_string(&jsonl).map_err(|e| Error::io(&jsonl, e))?;
    let mut samples = Vec::with_capacity(meta.count);
    for (i, line) in lines.lines().filter(|l| !l.is_empty()).enumerate() {
        let descriptor: SceneDescriptor = serde_json::from_str(line)?;
        let stem = format!("sample_{i:05}");
        let image = evpt::read_file(dir.join(format!("{stem}.image.evpt")))?;
        let depth = evpt::read_file(dir.join(format!("{stem}.depth.evpt")))?;
        let mask_t: Tensor<T> = evpt::read_file(dir.join(format!("{stem}.mask.evpt")))?;
        let mask = MaskTensor::from_fn(mask_t.shape(), |j| mask_t.data()[j].to_f64() != 0.0);
        let vectors = evpt::read_file(dir.join(format!("{stem}.emb.evpt")))?;
        let embedding = EmbeddingSet::new(vectors, descriptor.canonical_key())?;
        samples.push(Sample { image, depth, mask, descriptor, embedding });
    }
    if samples.len() != meta.count {
        return Err(Error::Checkpoint(format!(
            "dataset.json promises {} samples, samples.jsonl has {}",
            meta.count,
            samples.len()
        )));
    }
    Ok((meta, samples))
}
