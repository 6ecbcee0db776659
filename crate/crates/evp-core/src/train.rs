//! End-to-end training and evaluation over the synthetic world.
//!
//! Per step: pick the batch, bind every parameter into a fresh graph,
//! and for each sample run adapter -> pyramid extraction -> refinement
//! (or bypass) -> depth decoding -> scale-invariant log loss; the batch
//! loss is the mean. Backward + one optimizer update close the step.
//! Latent statistics and the dataset-level embedding context are
//! computed once before the first step and frozen as constants, like
//! any other dataset statistic.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{compute_latent_std, latent_of_image, LatentStats, StubParams};
use crate::config::RunConfig;
use crate::data::{gen_split, DatasetMeta, Sample, Split};
use crate::depth::{decode, silog_loss, DecoderParams, DepthOutput};
use crate::error::{Error, Result};
use crate::evpt;
use crate::graph::{Graph, Var};
use crate::imafr::{imafr_bypass, ImafrParams};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::optim::Adam;
use crate::params::{Binding, ParamStore};
use crate::tensor::{Element, MaskTensor, Tensor};
use crate::text::{
    aggregate, mix_seed, text_adapter, AdapterParams, AggregationStrategy, EmbeddingSet,
    DATASET_ID,
};

/// Attention-map rows the model sees for a given strategy: per-image
/// and dataset-set strategies keep all K rows, the vector strategies
/// collapse to one.
pub fn effective_k(strategy: AggregationStrategy, k: usize) -> usize {
    match strategy {
        AggregationStrategy::I | AggregationStrategy::D => k,
        AggregationStrategy::V | AggregationStrategy::Vd => 1,
    }
}

/// Every trainable piece plus the frozen dataset statistics.
pub struct Model<T: Element> {
    pub cfg: RunConfig,
    pub store: ParamStore<T>,
    pub adapter: AdapterParams,
    pub stub: StubParams,
    pub imafr: Option<ImafrParams>,
    pub decoder: DecoderParams,
    /// Present when latent-std normalization is on and prepared.
    pub stats: Option<LatentStats<T>>,
    /// Dataset-collapsed embedding set for the `d`/`vd` strategies.
    pub context: Option<EmbeddingSet<T>>,
}

impl<T: Element> Model<T> {
    /// Register all parameters for a validated config. The extractor
    /// seeds from `backbone.seed`, everything else from the run seed.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let groups = cfg.backbone.groups;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed("init:model", cfg.seed));
        let mut rng_backbone =
            ChaCha8Rng::seed_from_u64(mix_seed("init:backbone", cfg.backbone.seed));

        let adapter =
            AdapterParams::init(&mut store, "adapter", cfg.data.dim, cfg.text.hidden, &mut rng);
        let stub = StubParams::init(
            &mut store,
            "backbone",
            &cfg.backbone.channels,
            cfg.data.dim,
            groups,
            &mut rng_backbone,
        );
        // Pyramid consumers take channels coarsest level first.
        let coarse_first: Vec<usize> = cfg.backbone.channels.iter().rev().copied().collect();
        let imafr = cfg.imafr.enabled.then(|| {
            ImafrParams::init(
                &mut store,
                "imafr",
                &coarse_first,
                cfg.imafr.direction,
                cfg.imafr.kernel,
                cfg.imafr.reduction,
                groups,
                &mut rng,
            )
        });
        let decoder = DecoderParams::init(
            &mut store,
            "decoder",
            &coarse_first,
            effective_k(cfg.text.strategy, cfg.data.k),
            cfg.head.width,
            cfg.head.bins_enabled.then_some(cfg.head.num_bins),
            cfg.range(),
            groups,
            &mut rng,
        );
        Ok(Model {
            cfg: cfg.clone(),
            store,
            adapter,
            stub,
            imafr,
            decoder,
            stats: None,
            context: None,
        })
    }

    /// Compute the frozen dataset statistics this config calls for:
    /// per-channel latent std and, for the dataset strategies, the
    /// collapsed embedding context.
    pub fn prepare(&mut self, train: &[Sample<T>]) -> Result<()> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("cannot prepare on an empty split".into()));
        }
        if self.cfg.backbone.std_enabled {
            let latents = train
                .iter()
                .map(|s| latent_of_image(&self.store, &self.stub, &s.image))
                .collect::<Result<Vec<_>>>()?;
            self.stats = Some(compute_latent_std(&latents)?);
        }
        if matches!(self.cfg.text.strategy, AggregationStrategy::D | AggregationStrategy::Vd) {
            let sets: Vec<EmbeddingSet<T>> = train.iter().map(|s| s.embedding.clone()).collect();
            let mut collapsed = aggregate(&sets, self.cfg.text.strategy)?;
            self.context = Some(collapsed.remove(0));
        }
        Ok(())
    }

    /// The embedding set one sample conditions on under this config.
    pub fn context_for(&self, sample: &Sample<T>) -> Result<EmbeddingSet<T>> {
        match self.cfg.text.strategy {
            AggregationStrategy::I => Ok(sample.embedding.clone()),
            AggregationStrategy::V => {
                let mut v =
                    aggregate(std::slice::from_ref(&sample.embedding), AggregationStrategy::V)?;
                Ok(v.remove(0))
            }
            AggregationStrategy::D | AggregationStrategy::Vd => self
                .context
                .clone()
                .ok_or_else(|| Error::Checkpoint("dataset context was never prepared".into())),
        }
    }

    /// One sample through the whole pipeline, inside the caller's graph.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        image: &Tensor<T>,
        ctx: &EmbeddingSet<T>,
    ) -> Result<DepthOutput> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let x = g.constant(image.reshaped(&[1, 3, h, w])?)?;
        let e = g.constant(ctx.vectors().clone())?;
        let adapted = text_adapter(g, e, &self.adapter.bind(b))?;
        let (pyramid, maps) = self.stub.extract_pyramid(g, x, adapted, self.stats.as_ref(), b)?;
        let refined = match &self.imafr {
            Some(p) => p.forward(g, &pyramid, b)?,
            None => imafr_bypass(&pyramid),
        };
        decode(g, &refined, &maps, (h, w), &self.decoder, b)
    }

    fn batch_loss(&self, g: &mut Graph<T>, b: &Binding, batch: &[&Sample<T>]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for s in batch {
            let out = self.forward(g, b, &s.image, &self.context_for(s)?)?;
            let (h, w) = (s.depth.shape()[1], s.depth.shape()[2]);
            let gt = s.depth.reshaped(&[1, 1, h, w])?;
            let mask = MaskTensor::new(vec![1, 1, h, w], s.mask.data().to_vec())?;
            let loss = silog_loss(g, out.depth, &gt, &mask, self.cfg.loss.lambda, self.cfg.loss.alpha)?;
            acc = Some(match acc {
                Some(a) => g.add(a, loss)?,
                None => loss,
            });
        }
        g.mul_scalar(acc.expect("batch is never empty"), 1.0 / batch.len() as f64)
    }

    /// Value-level depth map (1,H,W) for one sample.
    pub fn predict(&self, sample: &Sample<T>) -> Result<Tensor<T>> {
        let mut g: Graph<T> = Graph::new();
        let b = self.store.bind(&mut g)?;
        let out = self.forward(&mut g, &b, &sample.image, &self.context_for(sample)?)?;
        let d = g.value(out.depth);
        let (h, w) = (d.shape()[2], d.shape()[3]);
        d.reshaped(&[1, h, w])
    }
}

// ── Training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Mean batch loss per step, in step order.
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

fn numerical_abort(step: usize, e: Error) -> Error {
    if e.is_numerical() {
        Error::TrainAbort { step, msg: e.to_string() }
    } else {
        e
    }
}

/// Run the full loop and leave a checkpoint in `out_dir`. Every emitted
/// log line goes through `sink` exactly as written.
pub fn train<T: Element>(
    cfg: &RunConfig,
    out_dir: impl AsRef<Path>,
    sink: &mut dyn FnMut(&str),
) -> Result<(Model<T>, TrainOutcome)> {
    cfg.validate()?;
    let spec = cfg.data_spec();
    let train_split: Vec<Sample<T>> = gen_split(&spec, Split::Train, cfg.data.train_count)?;
    let mut model = Model::init(cfg)?;
    model.prepare(&train_split)?;
    let mut adam = Adam::new(&model.store, cfg.train.adam())?;
    let mut losses = Vec::with_capacity(cfg.train.steps);

    for step in 1..=cfg.train.steps {
        let batch: Vec<&Sample<T>> = (0..cfg.train.batch)
            .map(|j| &train_split[((step - 1) * cfg.train.batch + j) % train_split.len()])
            .collect();
        let mut g: Graph<T> = Graph::new();
        let b = model.store.bind(&mut g)?;
        let loss = model.batch_loss(&mut g, &b, &batch).map_err(|e| numerical_abort(step, e))?;
        let loss_value = g.value(loss).scalar_value()?.to_f64();
        if !loss_value.is_finite() {
            return Err(Error::TrainAbort { step, msg: format!("loss = {loss_value}") });
        }
        let grads = g.backward(loss).map_err(|e| numerical_abort(step, e))?;
        let by_slot: Vec<Option<&Tensor<T>>> =
            model.store.ids().map(|id| grads.get(b.var(id))).collect();
        adam.step(&mut model.store, &by_slot)?;
        losses.push(loss_value);
        sink(&format!("step={step} loss={loss_value:.6e}"));
    }

    let out_dir = out_dir.as_ref().to_path_buf();
    save_checkpoint(&model, &out_dir)?;
    Ok((model, TrainOutcome { losses, checkpoint: out_dir }))
}

// ── Checkpoints ──────────────────────────────────────────────────────

/// Layout: one EVPT file per parameter plus `params.tsv` (from the
/// store), `config.json`, and the frozen statistics the config needs
/// (`stats.evpt`, `context.evpt`).
pub fn save_checkpoint<T: Element>(model: &Model<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    model.store.save(dir)?;
    model.cfg.save(dir.join("config.json"))?;
    if let Some(stats) = &model.stats {
        evpt::write_file(dir.join("stats.evpt"), &stats.std)?;
    }
    if let Some(ctx) = &model.context {
        evpt::write_file(dir.join("context.evpt"), ctx.vectors())?;
    }
    Ok(())
}

pub fn load_checkpoint<T: Element>(dir: impl AsRef<Path>) -> Result<Model<T>> {
    let dir = dir.as_ref();
    let cfg = RunConfig::load(dir.join("config.json"))?;
    let mut model = Model::init(&cfg)?;
    model.store.load_values(dir)?;
    if cfg.backbone.std_enabled {
        let std: Tensor<T> = evpt::read_file(dir.join("stats.evpt")).map_err(|e| {
            Error::Checkpoint(format!("config wants latent stats but stats.evpt is unusable: {e}"))
        })?;
        model.stats = Some(LatentStats::from_std(std)?);
    }
    if matches!(cfg.text.strategy, AggregationStrategy::D | AggregationStrategy::Vd) {
        let vectors: Tensor<T> = evpt::read_file(dir.join("context.evpt")).map_err(|e| {
            Error::Checkpoint(format!(
                "config wants a dataset context but context.evpt is unusable: {e}"
            ))
        })?;
        model.context = Some(EmbeddingSet::new(vectors, DATASET_ID)?);
    }
    Ok(model)
}

// ── Evaluation ───────────────────────────────────────────────────────

/// What produces the depth map under evaluation.
pub enum Predictor<'a, T: Element> {
    Model(&'a Model<T>),
    /// Ground truth echoed back; the zero-error oracle.
    Oracle,
    /// One constant depth everywhere (the median-baseline probe).
    Constant(f64),
}

/// A checkpoint only evaluates against data drawn from a matching
/// world: depth range and embedding extents must agree.
pub fn check_dataset_compat(cfg: &RunConfig, meta: &DatasetMeta) -> Result<()> {
    let range = cfg.range();
    if meta.spec.range != range {
        return Err(Error::Config(format!(
            "checkpoint depth range [{}, {}] vs dataset [{}, {}]",
            range.d_min, range.d_max, meta.spec.range.d_min, meta.spec.range.d_max
        )));
    }
    if meta.spec.k != cfg.data.k || meta.spec.dim != cfg.data.dim {
        return Err(Error::Config(format!(
            "checkpoint embeddings {}x{} vs dataset {}x{}",
            cfg.data.k, cfg.data.dim, meta.spec.k, meta.spec.dim
        )));
    }
    Ok(())
}

/// Run a predictor over a split, clamp into the metric range, and
/// reduce. Pixel order cannot change the result.
pub fn evaluate<T: Element>(
    predictor: &Predictor<'_, T>,
    samples: &[Sample<T>],
    cfg: &RunConfig,
) -> Result<MetricsReport> {
    let range = cfg.range();
    let mut acc = MetricsAccumulator::new();
    for s in samples {
        let pred = match predictor {
            Predictor::Model(m) => m.predict(s)?,
            Predictor::Oracle => s.depth.clone(),
            Predictor::Constant(c) => Tensor::full(s.depth.shape(), T::from_f64(*c)),
        };
        let pred = pred.map(|v| T::from_f64(v.to_f64().clamp(range.d_min, range.d_max)));
        acc.add_depths(&pred, &s.depth, &s.mask)?;
    }
    acc.finalize()
}

/// Median of every valid ground-truth pixel in the split.
pub fn median_gt_depth<T: Element>(samples: &[Sample<T>]) -> Result<f64> {
    let mut values: Vec<f64> = samples
        .iter()
        .flat_map(|s| {
            s.depth
                .data()
                .iter()
                .zip(s.mask.data())
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| v.to_f64())
        })
        .collect();
    if values.is_empty() {
        return Err(Error::InvalidArgument("median over an empty split".into()));
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Ok(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}
