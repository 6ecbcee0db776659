//! Image-text alignment inputs: per-image embedding sets, the four
//! aggregation strategies, the residual two-layer adapter, synthetic
//! embedding generation, and manifest-based ingestion.
//!
//! All dataset-axis means sort their addends before summing, so any
//! permutation of the input sets produces bitwise-identical output.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evpt;
use crate::graph::{Graph, Var};
use crate::params::{init_fan_in, Binding, ParamId, ParamStore};
use crate::tensor::{stable_mean, Element, Tensor};

/// `source_id` of aggregated (non-per-image) sets.
pub const DATASET_ID: &str = "dataset";

/// K embedding vectors of dimension D describing one image, or an
/// aggregated domain when `source_id == DATASET_ID`.
#[derive(Debug, Clone)]
pub struct EmbeddingSet<T: Element> {
    vectors: Tensor<T>,
    pub source_id: String,
}

impl<T: Element> EmbeddingSet<T> {
    pub fn new(vectors: Tensor<T>, source_id: impl Into<String>) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "embedding set must be rank 2 (K,D), got {:?}",
                vectors.shape()
            )));
        }
        if !vectors.all_finite() {
            return Err(Error::NonFinite { op: "embedding set" });
        }
        Ok(EmbeddingSet { vectors, source_id: source_id.into() })
    }

    pub fn vectors(&self) -> &Tensor<T> {
        &self.vectors
    }

    pub fn k(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }
}

/// The four regularization strategies: per-image sets (`I`), per-image
/// vector means (`V`), the dataset-wide set mean (`D`), and the single
/// dataset-wide vector (`Vd`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregationStrategy {
    #[serde(rename = "i")]
    I,
    #[serde(rename = "v")]
    V,
    #[serde(rename = "d")]
    D,
    #[serde(rename = "vd")]
    Vd,
}

impl std::str::FromStr for AggregationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i" => Ok(AggregationStrategy::I),
            "v" => Ok(AggregationStrategy::V),
            "d" => Ok(AggregationStrategy::D),
            "vd" => Ok(AggregationStrategy::Vd),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregation strategy `{other}` (expected i, v, d, or vd)"
            ))),
        }
    }
}

impl std::fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AggregationStrategy::I => "i",
            AggregationStrategy::V => "v",
            AggregationStrategy::D => "d",
            AggregationStrategy::Vd => "vd",
        })
    }
}

fn check_consistent<T: Element>(sets: &[EmbeddingSet<T>]) -> Result<(usize, usize)> {
    let first = sets.first().ok_or_else(|| {
        Error::InvalidArgument("aggregate over an empty list of embedding sets".into())
    })?;
    let (k, d) = (first.k(), first.dim());
    for s in sets {
        if s.k() != k || s.dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "embedding sets disagree: {}x{} vs {}x{} (set `{}`)",
                k,
                d,
                s.k(),
                s.dim(),
                s.source_id
            )));
        }
    }
    Ok((k, d))
}

/// Mean over the K rows of one set -> a 1xD set.
fn row_mean<T: Element>(set: &EmbeddingSet<T>) -> EmbeddingSet<T> {
    let (k, d) = (set.k(), set.dim());
    let data = set.vectors.data();
    let out = Tensor::from_fn(&[1, d], |j| {
        T::from_f64(stable_mean((0..k).map(|r| data[r * d + j].to_f64())))
    });
    EmbeddingSet { vectors: out, source_id: set.source_id.clone() }
}

/// Element-wise mean across sets, shape preserved.
fn dataset_mean<T: Element>(sets: &[EmbeddingSet<T>]) -> EmbeddingSet<T> {
    let (k, d) = (sets[0].k(), sets[0].dim());
    let out = Tensor::from_fn(&[k, d], |i| {
        T::from_f64(stable_mean(sets.iter().map(|s| s.vectors.data()[i].to_f64())))
    });
    EmbeddingSet { vectors: out, source_id: DATASET_ID.to_string() }
}

/// Apply one of the four strategies. Output count: `I` and `V` keep one
/// set per image; `D` and `Vd` collapse the dataset to a single set.
pub fn aggregate<T: Element>(
    sets: &[EmbeddingSet<T>],
    strategy: AggregationStrategy,
) -> Result<Vec<EmbeddingSet<T>>> {
    check_consistent(sets)?;
    Ok(match strategy {
        AggregationStrategy::I => sets.to_vec(),
        AggregationStrategy::V => sets.iter().map(row_mean).collect(),
        AggregationStrategy::D => vec![dataset_mean(sets)],
        // Defined as v-then-d so that N copies of one set reduce to that
        // set's own row mean exactly.
        AggregationStrategy::Vd => {
            let per_image: Vec<EmbeddingSet<T>> = sets.iter().map(row_mean).collect();
            vec![dataset_mean(&per_image)]
        }
    })
}

// ── Residual two-layer adapter ───────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// Learned residual gain, initialized to 1.
    pub gain: ParamId,
    pub dim: usize,
    pub hidden: usize,
}

impl AdapterParams {
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        AdapterParams {
            w1: store.add(format!("{prefix}.w1"), init_fan_in(&[hidden, dim], dim, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            w2: store.add(format!("{prefix}.w2"), init_fan_in(&[dim, hidden], hidden, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[dim])),
            gain: store.add(format!("{prefix}.gain"), Tensor::scalar(T::ONE)),
            dim,
            hidden,
        }
    }

    pub fn bind(&self, b: &Binding) -> AdapterVars {
        AdapterVars {
            w1: b.var(self.w1),
            b1: b.var(self.b1),
            w2: b.var(self.w2),
            b2: b.var(self.b2),
            gain: b.var(self.gain),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub gain: Var,
}

/// `c + gain * linear2(relu(linear1(c)))` row-wise; works for (K,D) and
/// batched (N,K,D) inputs alike.
pub fn text_adapter<T: Element>(g: &mut Graph<T>, c: Var, p: &AdapterVars) -> Result<Var> {
    let h = g.linear(c, p.w1, Some(p.b1))?;
    let h = g.relu(h)?;
    let m = g.linear(h, p.w2, Some(p.b2))?;
    let scaled = g.mul(p.gain, m)?;
    g.add(c, scaled)
}

// ── Synthetic embeddings ─────────────────────────────────────────────

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix an arbitrary key string and a seed into one 64-bit RNG seed.
pub fn mix_seed(key: &str, seed: u64) -> u64 {
    let mut h = splitmix64(seed ^ 0x45_56_50_54); // "EVPT" tag
    for &b in key.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

/// Deterministic stand-in for a caption-then-embed pipeline: the key
/// (a canonical scene description) and seed fix every value. Identical
/// inputs give bitwise-identical sets; distinct keys collide only with
/// 64-bit-hash probability.
pub fn synth_embeddings<T: Element>(key: &str, k: usize, d: usize, seed: u64) -> EmbeddingSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(key, seed));
    EmbeddingSet { vectors: Tensor::randn(&[k, d], &mut rng), source_id: key.to_string() }
}

// ── Manifest ingestion ───────────────────────────────────────────────

/// Write one EVPT file per set plus `manifest.tsv` ("id<TAB>file" per
/// line, input order) into `dir`; returns the manifest path.
pub fn save_embeddings<T: Element>(
    sets: &[EmbeddingSet<T>],
    dir: impl AsRef<Path>,
) -> Result<std::path::PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, set) in sets.iter().enumerate() {
        let file = format!("set_{i:05}.evpt");
        evpt::write_file(dir.join(&file), &set.vectors)?;
        manifest.push_str(&set.source_id);
        manifest.push('\t');
        manifest.push_str(&file);
        manifest.push('\n');
    }
    let mpath = dir.join("manifest.tsv");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(mpath)
}

/// Read sets back in manifest order. Every failure names the 1-based
/// manifest line: malformed lines, unreadable or non-EVPT files, rank
/// other than 2, and dimension disagreements across files.
pub fn load_embeddings<T: Element>(manifest_path: impl AsRef<Path>) -> Result<Vec<EmbeddingSet<T>>> {
    let manifest_path = manifest_path.as_ref();
    let text =
        std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut sets: Vec<EmbeddingSet<T>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_err = |msg: String| Error::Manifest { line: lineno + 1, msg };
        if line.is_empty() {
            continue;
        }
        let (id, rel) = line
            .split_once('\t')
            .ok_or_else(|| line_err("expected `image_id<TAB>relative_path`".into()))?;
        let path = base.join(rel);
        let vectors: Tensor<T> = evpt::read_file(&path)
            .map_err(|e| line_err(format!("cannot load `{rel}`: {e}")))?;
        if vectors.rank() != 2 {
            return Err(line_err(format!("`{rel}` has rank {}, embedding sets are rank 2", vectors.rank())));
        }
        if let Some(first) = sets.first() {
            if vectors.shape()[1] != first.dim() {
                return Err(line_err(format!(
                    "`{rel}` has dimension {}, earlier files have {}",
                    vectors.shape()[1],
                    first.dim()
                )));
            }
        }
        sets.push(EmbeddingSet { vectors, source_id: id.to_string() });
    }
    Ok(sets)
}
