//! Training regimes and the supervision ablation.
//!
//! * **T-Net** (stage-wise): the encoder is fitted to attention maps with the
//!   dice loss, then frozen while a posterior network learns the task from
//!   its multi-level features.
//! * **Baseline** (joint): encoder and posterior are optimized end to end on
//!   the task loss alone, for as many optimizer steps as both T-Net stages.
//!
//! Every run is a pure function of its [`ExperimentSpec`]: initialization,
//! mini-batch order and data all derive from the seeds it carries.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::attention::{build_supervision, AttentionKind, DEFAULT_FACTOR, DEFAULT_SIGMA};
use crate::checkpoint;
use crate::distance::Metric;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::DICE_EPS;
use crate::mask::Mask;
use crate::metrics::{dice_score, euclidean_distance, hausdorff95, EvalReport};
use crate::model::{Encoder, LocHead, ModelConfig, Posterior, SegDecoder};
use crate::optim::{Adam, AdamConfig, Bound, ParamStore};
use crate::synth::{self, Sample, SynthSpec};
use crate::tensor::Tensor;

const STREAM_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// Offsets that separate the random streams of one run.
#[derive(Clone, Copy)]
enum Stream {
    DecoderInit = 1,
    LocInit = 2,
    EncoderOrder = 3,
    PosteriorOrder = 4,
    BaselineOrder = 5,
}

fn stream_seed(seed: u64, stream: Stream) -> u64 {
    seed.wrapping_add((stream as u64).wrapping_mul(STREAM_STRIDE))
}

macro_rules! lowercase_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown {} `{other}` (expected {})",
                        stringify!($name).to_lowercase(),
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Tnet,
    Baseline,
}
lowercase_enum!(Mode { Tnet => "tnet", Baseline => "baseline" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    Shape,
    Contour,
    Center,
    None,
}
lowercase_enum!(Supervision { Shape => "shape", Contour => "contour", Center => "center", None => "none" });

impl Supervision {
    /// Row label in the ablation table.
    pub fn row_label(&self) -> &'static str {
        match self {
            Supervision::None => "-",
            Supervision::Shape => "Shape-Aware",
            Supervision::Contour => "Contour-Aware",
            Supervision::Center => "Center-Aware",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Segmentation,
    Localization,
}
lowercase_enum!(Task { Segmentation => "segmentation", Localization => "localization" });

/// Complete description of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub mode: Mode,
    pub supervision: Supervision,
    pub task: Task,
    pub encoder_epochs: usize,
    pub posterior_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub data: SynthSpec,
    pub train_fraction: f64,
    pub model: ModelConfig,
    pub factor: usize,
    pub sigma: f64,
    pub metric: Metric,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            mode: Mode::Tnet,
            supervision: Supervision::Shape,
            task: Task::Segmentation,
            encoder_epochs: 20,
            posterior_epochs: 20,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 1,
            data: SynthSpec::default(),
            train_fraction: 0.8,
            model: ModelConfig {
                bottleneck_channels: 1,
                ..ModelConfig::default()
            },
            factor: DEFAULT_FACTOR,
            sigma: DEFAULT_SIGMA,
            metric: Metric::Euclidean,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match (self.mode, self.supervision) {
            (Mode::Baseline, s) if s != Supervision::None => {
                return bad(format!("baseline mode trains without attention maps; got supervision `{s}`"))
            }
            (Mode::Tnet, Supervision::None) => {
                return bad("tnet mode needs a supervision kind (shape, contour or center)".into())
            }
            _ => {}
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.model.bottleneck_channels != 1 {
            return bad(format!(
                "synthetic data has a single class; bottleneck_channels must be 1, got {}",
                self.model.bottleneck_channels
            ));
        }
        if self.model.input_channels != 1 {
            return bad("synthetic images have one channel; input_channels must be 1".into());
        }
        if self.mode == Mode::Tnet && self.factor != 4 {
            return bad(format!(
                "the encoder supervision output is at 1/4 resolution; factor must be 4, got {}",
                self.factor
            ));
        }
        if !self.data.size.is_multiple_of(4) {
            return bad(format!("image size {} must be divisible by 4", self.data.size));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return bad(format!("sigma {} must be positive", self.sigma));
        }
        self.model.validate()?;
        self.data.validate()
    }

    /// Short identifier, e.g. `tnet-center-localization`.
    pub fn label(&self) -> String {
        format!("{}-{}-{}", self.mode, self.supervision, self.task)
    }

    pub fn attention_kind(&self) -> Option<AttentionKind> {
        match self.supervision {
            Supervision::Shape => Some(AttentionKind::Shape),
            Supervision::Contour => Some(AttentionKind::Contour { sigma: self.sigma }),
            Supervision::Center => Some(AttentionKind::Center { metric: self.metric }),
            Supervision::None => None,
        }
    }

    /// Optimizer steps a run of this spec takes on `n` training samples.
    pub fn optimizer_steps(&self, n: usize) -> u64 {
        let per_epoch = n.div_ceil(self.batch_size) as u64;
        (self.encoder_epochs + self.posterior_epochs) as u64 * per_epoch
    }

    /// Everything that determines a T-Net encoder, serialized; runs with
    /// equal keys train bit-identical encoders.
    fn encoder_key(&self) -> String {
        serde_json::json!({
            "supervision": self.supervision,
            "encoder_epochs": self.encoder_epochs,
            "batch_size": self.batch_size,
            "adam": self.adam,
            "seed": self.seed,
            "data": self.data,
            "train_fraction": self.train_fraction,
            "model": self.model,
            "factor": self.factor,
            "sigma": self.sigma,
            "metric": self.metric,
        })
        .to_string()
    }
}

/// Train/test partition of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Generates the dataset and splits it with the dataset seed.
pub fn prepare_data(data: &SynthSpec, train_fraction: f64) -> Result<Split> {
    let samples = synth::generate(data)?;
    let (train, test) = synth::split(&samples, train_fraction, data.seed)?;
    Ok(Split { train, test })
}

/// An encoder together with the posterior network that consumes it.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder<f32>,
    pub posterior: Posterior<f32>,
}

impl Model {
    /// Freshly initialized networks for `spec`.
    pub fn init(spec: &ExperimentSpec) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(spec.model.clone(), spec.seed)?,
            posterior: new_posterior(spec)?,
        })
    }

    pub fn task(&self) -> Task {
        match self.posterior {
            Posterior::Segmentation(_) => Task::Segmentation,
            Posterior::Localization(_) => Task::Localization,
        }
    }

    /// Segmentation probabilities `[B, N, H, W]` or normalized centres
    /// `[B, 2]` for a batch of images `[B, 1, H, W]`.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let enc = self.encoder.params.bind_frozen(&mut g);
        let post = self.posterior.params().bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let out = self.encoder.forward(&mut g, &enc, x)?;
        let y = posterior_forward(&self.posterior, &mut g, &post, out.f1, out.f2, out.f4)?;
        Ok(g.value(y).clone())
    }
}

pub fn new_posterior(spec: &ExperimentSpec) -> Result<Posterior<f32>> {
    Ok(match spec.task {
        Task::Segmentation => Posterior::Segmentation(SegDecoder::new(
            spec.model.clone(),
            stream_seed(spec.seed, Stream::DecoderInit),
        )?),
        Task::Localization => {
            Posterior::Localization(LocHead::new(spec.model.clone(), stream_seed(spec.seed, Stream::LocInit))?)
        }
    })
}

fn posterior_forward(
    post: &Posterior<f32>,
    g: &mut Graph<f32>,
    bound: &Bound,
    f1: NodeId,
    f2: NodeId,
    f4: NodeId,
) -> Result<NodeId> {
    match post {
        Posterior::Segmentation(d) => d.forward(g, bound, f1, f2, f4),
        Posterior::Localization(h) => h.forward(g, bound, f4),
    }
}

fn task_loss(task: Task, g: &mut Graph<f32>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    match task {
        Task::Segmentation => g.dice_loss(pred, target, DICE_EPS),
        Task::Localization => g.mse(pred, target),
    }
}

fn image4(s: &Sample) -> Result<Tensor<f32>> {
    let (_, h, w) = (s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]);
    s.image.clone().reshape(&[1, 1, h, w])
}

fn mask4(m: &Mask) -> Tensor<f32> {
    let data = m.values().iter().map(|&v| v as f32).collect();
    Tensor::new(&[1, 1, m.height(), m.width()], data).expect("mask extent matches its data")
}

/// Pixel-centre coordinates mapped into the unit square the way the
/// soft-argmax grid is: pixel `j` of `W` sits at `(j + 0.5) / W`.
pub fn normalize_center(center: (f64, f64), width: usize, height: usize) -> (f64, f64) {
    ((center.0 + 0.5) / width as f64, (center.1 + 0.5) / height as f64)
}

pub fn denormalize_center(p: (f64, f64), width: usize, height: usize) -> (f64, f64) {
    (p.0 * width as f64 - 0.5, p.1 * height as f64 - 0.5)
}

fn task_target(task: Task, s: &Sample) -> Tensor<f32> {
    match task {
        Task::Segmentation => mask4(&s.mask),
        Task::Localization => {
            let (x, y) = normalize_center(s.center, s.mask.width(), s.mask.height());
            Tensor::new(&[1, 2], vec![x as f32, y as f32]).expect("two coordinates")
        }
    }
}

fn stack(items: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &items[i]).collect();
    Tensor::stack_batch(&refs)
}

/// Shuffled mini-batch loop shared by all regimes. `step` receives the
/// epoch and the sample indices of one batch, performs one optimizer update
/// and returns the batch loss; the per-epoch mean is recorded.
fn run_epochs(
    epochs: usize,
    n: usize,
    batch: usize,
    seed: u64,
    mut step: impl FnMut(usize, &[usize]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(batch) {
            total += step(epoch, idx)? * idx.len() as f64;
        }
        curve.push(total / n as f64);
    }
    Ok(curve)
}

/// Reads the scalar loss and rejects non-finite values before any update.
fn checked_loss(g: &Graph<f32>, loss: NodeId, epoch: usize) -> Result<f64> {
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Diverged { epoch, loss: value });
    }
    Ok(value)
}

fn update(g: &Graph<f32>, store: &mut ParamStore<f32>, bound: &Bound, adam: &mut Adam<f32>) -> Result<()> {
    store.zero_grad();
    store.pull_grads(g, bound)?;
    adam.step(store)
}

fn require_samples(train: &[Sample]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    Ok(())
}

/// Attention-map targets `[1, 1, H/f, W/f]` of every sample for `spec`.
pub fn supervision_targets(spec: &ExperimentSpec, samples: &[Sample]) -> Result<Vec<Tensor<f32>>> {
    let kind = spec
        .attention_kind()
        .ok_or_else(|| Error::InvalidArgument("supervision targets need a supervision kind".into()))?;
    samples
        .iter()
        .map(|s| {
            let t = build_supervision::<f32>(std::slice::from_ref(&s.mask), &[kind], spec.factor)?;
            let (h, w) = (t.shape()[1], t.shape()[2]);
            t.reshape(&[1, 1, h, w])
        })
        .collect()
}

/// Fits a fresh encoder to the attention maps of `train` with the dice
/// loss. Returns the encoder and its per-epoch mean loss.
pub fn train_encoder(spec: &ExperimentSpec, train: &[Sample]) -> Result<(Encoder<f32>, Vec<f64>)> {
    let targets = if spec.encoder_epochs == 0 {
        Vec::new()
    } else {
        supervision_targets(spec, train)?
    };
    train_encoder_on(spec, train, &targets)
}

/// [`train_encoder`] with precomputed targets, one `[1, 1, H', W']` map per
/// training sample (for example maps loaded from disk).
pub fn train_encoder_on(
    spec: &ExperimentSpec,
    train: &[Sample],
    targets: &[Tensor<f32>],
) -> Result<(Encoder<f32>, Vec<f64>)> {
    spec.validate()?;
    if spec.mode != Mode::Tnet {
        return Err(Error::InvalidArgument("train_encoder needs tnet mode with a supervision kind".into()));
    }
    let mut encoder = Encoder::new(spec.model.clone(), spec.seed)?;
    if spec.encoder_epochs == 0 {
        return Ok((encoder, Vec::new()));
    }
    require_samples(train)?;
    if targets.len() != train.len() {
        return Err(Error::InvalidArgument(format!(
            "{} supervision maps for {} training samples",
            targets.len(),
            train.len()
        )));
    }
    let images = train.iter().map(image4).collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(spec.adam);
    let curve = run_epochs(
        spec.encoder_epochs,
        train.len(),
        spec.batch_size,
        stream_seed(spec.seed, Stream::EncoderOrder),
        |epoch, idx| {
            let mut g = Graph::new();
            let bound = encoder.params.bind(&mut g);
            let x = g.constant(stack(&images, idx)?);
            let out = encoder.forward(&mut g, &bound, x)?;
            let t = g.constant(stack(targets, idx)?);
            let loss = g.dice_loss(out.supervision, t, DICE_EPS)?;
            let value = checked_loss(&g, loss, epoch)?;
            g.backward(loss)?;
            update(&g, &mut encoder.params, &bound, &mut adam)?;
            Ok(value)
        },
    )?;
    Ok((encoder, curve))
}

struct FeatureBank {
    f1: Vec<Tensor<f32>>,
    f2: Vec<Tensor<f32>>,
    f4: Vec<Tensor<f32>>,
}

fn feature_bank(encoder: &Encoder<f32>, samples: &[Sample], batch: usize) -> Result<FeatureBank> {
    let mut bank = FeatureBank {
        f1: Vec::with_capacity(samples.len()),
        f2: Vec::with_capacity(samples.len()),
        f4: Vec::with_capacity(samples.len()),
    };
    let images = samples.iter().map(image4).collect::<Result<Vec<_>>>()?;
    let all: Vec<usize> = (0..samples.len()).collect();
    for idx in all.chunks(batch) {
        let f = encoder.features(&stack(&images, idx)?)?;
        for b in 0..idx.len() {
            bank.f1.push(f.f1.batch_item(b)?);
            bank.f2.push(f.f2.batch_item(b)?);
            bank.f4.push(f.f4.batch_item(b)?);
        }
    }
    Ok(bank)
}

/// Trains a fresh posterior network on features of the frozen `encoder`.
/// The encoder is only read; its features are computed once up front.
pub fn train_posterior(
    spec: &ExperimentSpec,
    encoder: &Encoder<f32>,
    train: &[Sample],
) -> Result<(Posterior<f32>, Vec<f64>)> {
    spec.validate()?;
    let mut posterior = new_posterior(spec)?;
    if spec.posterior_epochs == 0 {
        return Ok((posterior, Vec::new()));
    }
    require_samples(train)?;
    let bank = feature_bank(encoder, train, spec.batch_size)?;
    let targets: Vec<Tensor<f32>> = train.iter().map(|s| task_target(spec.task, s)).collect();
    let mut adam = Adam::new(spec.adam);
    let curve = run_epochs(
        spec.posterior_epochs,
        train.len(),
        spec.batch_size,
        stream_seed(spec.seed, Stream::PosteriorOrder),
        |epoch, idx| {
            let mut g = Graph::new();
            let bound = posterior.params().bind(&mut g);
            let f1 = g.constant(stack(&bank.f1, idx)?);
            let f2 = g.constant(stack(&bank.f2, idx)?);
            let f4 = g.constant(stack(&bank.f4, idx)?);
            let pred = posterior_forward(&posterior, &mut g, &bound, f1, f2, f4)?;
            let t = g.constant(stack(&targets, idx)?);
            let loss = task_loss(spec.task, &mut g, pred, t)?;
            let value = checked_loss(&g, loss, epoch)?;
            g.backward(loss)?;
            update(&g, posterior.params_mut(), &bound, &mut adam)?;
            Ok(value)
        },
    )?;
    Ok((posterior, curve))
}

/// Joint end-to-end training of encoder and posterior on the task loss for
/// `encoder_epochs + posterior_epochs` epochs.
pub fn train_baseline(spec: &ExperimentSpec, train: &[Sample]) -> Result<(Model, Vec<f64>)> {
    spec.validate()?;
    if spec.mode != Mode::Baseline {
        return Err(Error::InvalidArgument("train_baseline needs baseline mode".into()));
    }
    let mut model = Model::init(spec)?;
    let epochs = spec.encoder_epochs + spec.posterior_epochs;
    if epochs == 0 {
        return Ok((model, Vec::new()));
    }
    require_samples(train)?;
    let images = train.iter().map(image4).collect::<Result<Vec<_>>>()?;
    let targets: Vec<Tensor<f32>> = train.iter().map(|s| task_target(spec.task, s)).collect();
    let mut enc_adam = Adam::new(spec.adam);
    let mut post_adam = Adam::new(spec.adam);
    let curve = run_epochs(
        epochs,
        train.len(),
        spec.batch_size,
        stream_seed(spec.seed, Stream::BaselineOrder),
        |epoch, idx| {
            let Model { encoder, posterior } = &mut model;
            let mut g = Graph::new();
            let enc_bound = encoder.params.bind(&mut g);
            let post_bound = posterior.params().bind(&mut g);
            let x = g.constant(stack(&images, idx)?);
            let out = encoder.forward(&mut g, &enc_bound, x)?;
            let pred = posterior_forward(posterior, &mut g, &post_bound, out.f1, out.f2, out.f4)?;
            let t = g.constant(stack(&targets, idx)?);
            let loss = task_loss(spec.task, &mut g, pred, t)?;
            let value = checked_loss(&g, loss, epoch)?;
            g.backward(loss)?;
            // the unused supervision bottleneck keeps a zero gradient
            update(&g, &mut encoder.params, &enc_bound, &mut enc_adam)?;
            update(&g, posterior.params_mut(), &post_bound, &mut post_adam)?;
            Ok(value)
        },
    )?;
    Ok((model, curve))
}

/// Per-sample metrics of one evaluation pass, in sample order.
enum Scores {
    Segmentation { dice: Vec<f64>, hd: Vec<f64> },
    Localization(Vec<f64>),
}

fn score_chunk(model: &Model, samples: &[Sample], batch: usize) -> Result<Scores> {
    let images = samples.iter().map(image4).collect::<Result<Vec<_>>>()?;
    let all: Vec<usize> = (0..samples.len()).collect();
    let mut dice = Vec::new();
    let mut hd = Vec::new();
    let mut ed = Vec::new();
    for idx in all.chunks(batch.max(1)) {
        let pred = model.predict(&stack(&images, idx)?)?;
        for (b, &i) in idx.iter().enumerate() {
            let s = &samples[i];
            let (w, h) = (s.mask.width(), s.mask.height());
            let item = pred.batch_item(b)?;
            match model.task() {
                Task::Segmentation => {
                    let probs: Vec<f64> = item.data()[..w * h].iter().map(|&p| p as f64).collect();
                    let m = Mask::from_probabilities(w, h, &probs, 0.5)?;
                    dice.push(dice_score(&m, &s.mask)?);
                    hd.push(if m.is_empty() {
                        // nothing predicted: charge the largest possible distance
                        ((w * w + h * h) as f64).sqrt()
                    } else {
                        hausdorff95(&m, &s.mask)?
                    });
                }
                Task::Localization => {
                    let p = (item.data()[0] as f64, item.data()[1] as f64);
                    ed.push(euclidean_distance(denormalize_center(p, w, h), s.center));
                }
            }
        }
    }
    Ok(match model.task() {
        Task::Segmentation => Scores::Segmentation { dice, hd },
        Task::Localization => Scores::Localization(ed),
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Evaluates `model` on `samples`. Segmentation thresholds probabilities at
/// 0.5; an empty prediction scores dice 0 and a Hausdorff distance equal to
/// the image diagonal. Localization reports the mean centre error in pixels.
///
/// `threads` splits the samples into contiguous chunks scored in parallel;
/// results do not depend on it.
pub fn evaluate(model: &Model, samples: &[Sample], batch: usize, threads: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let threads = threads.clamp(1, samples.len());
    let chunk = samples.len().div_ceil(threads);
    let parts: Vec<Result<Scores>> = if threads == 1 {
        vec![score_chunk(model, samples, batch)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || score_chunk(model, part, batch)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
        })
    };
    let (mut dice, mut hd, mut ed) = (Vec::new(), Vec::new(), Vec::new());
    for part in parts {
        match part? {
            Scores::Segmentation { dice: d, hd: h } => {
                dice.extend(d);
                hd.extend(h);
            }
            Scores::Localization(e) => ed.extend(e),
        }
    }
    Ok(match model.task() {
        Task::Segmentation => EvalReport::segmentation(vec![mean(&dice)], vec![mean(&hd)], samples.len()),
        Task::Localization => EvalReport::localization(&ed),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    /// `loss` is kept as text because JSON has no NaN or infinity.
    Diverged { epoch: usize, loss: String },
    Failed { message: String },
}

/// Outcome of one run, appended to `runs.jsonl`.
///
/// `encoder_loss` has one entry per encoder epoch (empty for baseline runs);
/// `posterior_loss` has one entry per posterior epoch, or per joint epoch
/// for baseline runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub spec: ExperimentSpec,
    pub status: RunStatus,
    pub encoder_loss: Vec<f64>,
    pub posterior_loss: Vec<f64>,
    pub report: Option<EvalReport>,
    pub optimizer_steps: u64,
    pub encoder_checksum: u64,
    pub posterior_checksum: u64,
    pub warnings: Vec<String>,
    pub wall_time_s: f64,
}

impl RunRecord {
    fn failed(spec: &ExperimentSpec, status: RunStatus, started: Instant) -> Self {
        Self {
            label: spec.label(),
            spec: spec.clone(),
            status,
            encoder_loss: Vec::new(),
            posterior_loss: Vec::new(),
            report: None,
            optimizer_steps: 0,
            encoder_checksum: 0,
            posterior_checksum: 0,
            warnings: Vec::new(),
            wall_time_s: started.elapsed().as_secs_f64(),
        }
    }

    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

/// Returns a warning when the `window`-epoch moving average of `curve`
/// ever increases.
pub fn trend_warning(name: &str, curve: &[f64], window: usize) -> Option<String> {
    if curve.len() < window + 1 {
        return None;
    }
    let avg: Vec<f64> = curve.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect();
    avg.windows(2)
        .position(|p| p[1] > p[0])
        .map(|i| format!("{name} loss moving average rose after epoch {}", i + window))
}

/// Encoders already trained in this process, keyed by everything that
/// determines them, so grid cells sharing a supervision kind train it once.
#[derive(Default)]
pub struct EncoderCache {
    trained: HashMap<String, (Encoder<f32>, Vec<f64>)>,
}

impl EncoderCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_train(&mut self, spec: &ExperimentSpec, train: &[Sample]) -> Result<(Encoder<f32>, Vec<f64>)> {
        let key = spec.encoder_key();
        if let Some(hit) = self.trained.get(&key) {
            return Ok(hit.clone());
        }
        let fresh = train_encoder(spec, train)?;
        self.trained.insert(key, fresh.clone());
        Ok(fresh)
    }
}

/// Trains and evaluates one spec. Divergence yields a record with a
/// `diverged` status and no model; other failures are returned as errors.
///
/// `targets` optionally supplies the encoder supervision maps of the
/// training samples; otherwise they are computed (and encoders cached).
pub fn run_experiment(
    spec: &ExperimentSpec,
    data: &Split,
    targets: Option<&[Tensor<f32>]>,
    cache: &mut EncoderCache,
    threads: usize,
) -> Result<(RunRecord, Option<Model>)> {
    let started = Instant::now();
    spec.validate()?;
    let trained = match spec.mode {
        Mode::Tnet => match targets {
            Some(t) => train_encoder_on(spec, &data.train, t),
            None => cache.get_or_train(spec, &data.train),
        }
        .and_then(|(encoder, enc_curve)| {
            let before = encoder.params.checksum();
            let (posterior, post_curve) = train_posterior(spec, &encoder, &data.train)?;
            debug_assert_eq!(before, encoder.params.checksum());
            Ok((Model { encoder, posterior }, enc_curve, post_curve))
        }),
        Mode::Baseline => train_baseline(spec, &data.train).map(|(m, c)| (m, Vec::new(), c)),
    };
    let (model, encoder_loss, posterior_loss) = match trained {
        Ok(t) => t,
        Err(Error::Diverged { epoch, loss }) => {
            return Ok((RunRecord::failed(spec, RunStatus::Diverged { epoch, loss: loss.to_string() }, started), None))
        }
        Err(e) => return Err(e),
    };
    let report = evaluate(&model, &data.test, spec.batch_size, threads)?;
    let warnings = [
        trend_warning("encoder", &encoder_loss, 10),
        trend_warning("posterior", &posterior_loss, 10),
    ]
    .into_iter()
    .flatten()
    .collect();
    let record = RunRecord {
        label: spec.label(),
        spec: spec.clone(),
        status: RunStatus::Completed,
        encoder_loss,
        posterior_loss,
        report: Some(report),
        optimizer_steps: spec.optimizer_steps(data.train.len()),
        encoder_checksum: model.encoder.params.checksum(),
        posterior_checksum: model.posterior.params().checksum(),
        warnings,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((record, Some(model)))
}

/// Appends one JSON line to `path`.
pub fn append_record(path: &Path, record: &RunRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (n, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// The baseline row plus one T-Net row per supervision kind, for each task.
pub fn default_grid(base: &ExperimentSpec, tasks: &[Task]) -> Vec<ExperimentSpec> {
    let rows = [
        (Mode::Baseline, Supervision::None),
        (Mode::Tnet, Supervision::Shape),
        (Mode::Tnet, Supervision::Contour),
        (Mode::Tnet, Supervision::Center),
    ];
    let mut grid = Vec::new();
    for &task in tasks {
        for (mode, supervision) in rows {
            grid.push(ExperimentSpec {
                mode,
                supervision,
                task,
                ..base.clone()
            });
        }
    }
    grid
}

/// Runs every cell of `grid` on one shared dataset.
///
/// With `out_dir`, each finished cell appends its record to
/// `out_dir/runs.jsonl` and saves a checkpoint under
/// `out_dir/checkpoints/<label>`; cells whose completed record with an
/// identical spec is already present are skipped, so an interrupted grid
/// resumes where it stopped. A failing cell is recorded and the grid goes on.
pub fn run_ablation(grid: &[ExperimentSpec], out_dir: Option<&Path>, threads: usize) -> Result<Vec<RunRecord>> {
    let first = grid
        .first()
        .ok_or_else(|| Error::InvalidArgument("ablation grid is empty".into()))?;
    if let Some(other) = grid
        .iter()
        .find(|s| s.data != first.data || s.train_fraction != first.train_fraction)
    {
        return Err(Error::InvalidArgument(format!(
            "grid cell {} uses a different dataset than {}; all cells must share one",
            other.label(),
            first.label()
        )));
    }
    let previous = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            read_records(&dir.join("runs.jsonl"))?
        }
        None => Vec::new(),
    };
    let data = prepare_data(&first.data, first.train_fraction)?;
    let mut cache = EncoderCache::new();
    let mut records = Vec::with_capacity(grid.len());
    for spec in grid {
        if let Some(done) = previous.iter().rev().find(|r| r.is_completed() && &r.spec == spec) {
            records.push(done.clone());
            continue;
        }
        let started = Instant::now();
        let record = match run_experiment(spec, &data, None, &mut cache, threads) {
            Ok((record, model)) => {
                if let (Some(dir), Some(model)) = (out_dir, &model) {
                    checkpoint::save(&dir.join("checkpoints").join(&record.label), spec, model)?;
                }
                record
            }
            Err(e) => RunRecord::failed(spec, RunStatus::Failed { message: e.to_string() }, started),
        };
        if let Some(dir) = out_dir {
            append_record(&dir.join("runs.jsonl"), &record)?;
        }
        records.push(record);
    }
    Ok(records)
}

/// Ablation summary: rows are supervision kinds, columns task metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub columns: Vec<String>,
    /// `(row label, one cell per column)`; `None` marks a missing or failed run.
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl AblationTable {
    pub fn from_records(records: &[RunRecord], tasks: &[Task]) -> Self {
        let mut columns = Vec::new();
        for task in tasks {
            match task {
                Task::Segmentation => columns.extend(["Dice (%)", "HD95 (px)", "S"].map(String::from)),
                Task::Localization => columns.push("ED (px)".into()),
            }
        }
        let mut by_cell: HashMap<(&str, Task), &EvalReport> = HashMap::new();
        for r in records {
            if let (true, Some(report)) = (r.is_completed(), &r.report) {
                by_cell.insert((r.spec.supervision.row_label(), r.spec.task), report);
            }
        }
        let rows = [Supervision::None, Supervision::Shape, Supervision::Contour, Supervision::Center]
            .iter()
            .map(|s| {
                let label = s.row_label();
                let mut cells = Vec::new();
                for &task in tasks {
                    let report = by_cell.get(&(label, task));
                    match task {
                        Task::Segmentation => {
                            cells.push(report.and_then(|r| r.dice.first()).map(|d| d * 100.0));
                            cells.push(report.and_then(|r| r.hausdorff95.first()).copied());
                            cells.push(report.map(|r| r.s));
                        }
                        Task::Localization => cells.push(report.and_then(|r| r.ed)),
                    }
                }
                (label.to_string(), cells)
            })
            .collect();
        Self { columns, rows }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("supervision,{}\n", self.columns.join(","));
        for (label, cells) in &self.rows {
            let cells: Vec<String> = cells
                .iter()
                .map(|c| c.map_or_else(String::new, |v| format!("{v:.4}")))
                .collect();
            let _ = writeln!(out, "{label},{}", cells.join(","));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<14}", "Supervision");
        for c in &self.columns {
            let _ = write!(out, " {c:>10}");
        }
        out.push('\n');
        for (label, cells) in &self.rows {
            let _ = write!(out, "{label:<14}");
            for c in cells {
                match c {
                    Some(v) => {
                        let _ = write!(out, " {v:>10.2}");
                    }
                    None => {
                        let _ = write!(out, " {:>10}", "n/a");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}
