//! Two-stage training (frame-symbol pretraining, then emotion finetuning),
//! per-block probes and evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autograd::Var;
use crate::checkpoint::Checkpoint;
use crate::encoder::{encoder_forward, encoder_forward_until, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{head_forward, FusionConfig, NUM_EMOTIONS};
use crate::metrics::{argmax, compute_metrics, confusion_with_classes, EvalReport};
use crate::optim::{Adam, AdamConfig};
use crate::params::{FreezeMask, ParamGrads, ParamStore, Session};
use crate::synth::{hex_digest, Utterance};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Parameter-path prefixes excluded from updates.
    pub freeze: Vec<String>,
    /// Stop after this many epochs without a held-out UA improvement.
    pub patience: Option<usize>,
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            lr: 3e-4,
            seed: 0,
            freeze: Vec::new(),
            patience: None,
            max_steps: None,
        }
    }

    pub fn stage2() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 15,
            ..Self::stage1()
        }
    }

    pub fn probe() -> Self {
        TrainConfig {
            epochs: 8,
            lr: 1e-3,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn to_meta(&self) -> String {
        format!(
            "epochs={};batch={};lr={};seed={};freeze={};patience={};max_steps={}",
            self.epochs,
            self.batch_size,
            self.lr,
            self.seed,
            self.freeze.join(","),
            self.patience.map_or("none".into(), |p| p.to_string()),
            self.max_steps.map_or("none".into(), |p| p.to_string()),
        )
    }

    pub fn hash(&self) -> String {
        hex_digest(self.to_meta().as_bytes())
    }

    fn adam(&self) -> Adam<f32> {
        Adam::new(AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        })
    }
}

/// One line per optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut s = String::from("step loss lr\n");
        for e in &self.entries {
            writeln!(s, "{} {:.6} {}", e.step, e.loss, e.lr).unwrap();
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }
}

fn rng_for(seed: u64, salt: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, 1 + epoch as u64));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn accumulate(total: &mut ParamGrads<f32>, grads: ParamGrads<f32>, scale: f32) {
    for (path, g) in grads {
        let slot = total.entry(path).or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in slot.iter_mut().zip(g) {
            *a += scale * b;
        }
    }
}

/// Runs one minibatch: `loss_of` builds a scalar loss for each item on a fresh
/// session, gradients are averaged over the batch and applied.
fn train_step<F>(
    store: &mut ParamStore<f32>,
    mask: &FreezeMask,
    adam: &mut Adam<f32>,
    items: &[usize],
    mut loss_of: F,
) -> Result<f64>
where
    F: FnMut(&mut Session<'_, f32>, usize) -> Result<Var>,
{
    let mut grads = ParamGrads::new();
    let mut loss = 0.0;
    let scale = 1.0 / items.len() as f32;
    for &i in items {
        let mut s = Session::new(store, Some(mask))?;
        let l = loss_of(&mut s, i)?;
        loss += s.value(l).data()[0] as f64;
        accumulate(&mut grads, s.param_grads(l)?, scale);
    }
    adam.step(store, &grads, mask)?;
    Ok(loss / items.len() as f64)
}

/// Configs plus parameters of a (possibly partial) model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub head: FusionConfig,
    pub params: ParamStore<f32>,
}

impl Model {
    /// Fresh encoder and head parameters drawn from `seed`.
    pub fn init(encoder: EncoderConfig, head: FusionConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        encoder.init_params(&mut params, &mut rng_for(seed, 0xE0))?;
        head.validate(encoder.num_blocks, encoder.model_dim)?;
        head.init_params(&mut params, encoder.model_dim, &mut rng_for(seed, 0xF0))?;
        Ok(Model {
            encoder,
            head,
            params,
        })
    }

    /// Reads configs from checkpoint metadata. The head config defaults when absent.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let encoder = EncoderConfig::from_meta(
            ckpt.meta("encoder")
                .ok_or_else(|| Error::Checkpoint("checkpoint has no encoder config".into()))?,
        )?;
        let head = match ckpt.meta("head") {
            Some(h) => FusionConfig::from_meta(h)?,
            None => FusionConfig::default(),
        };
        Ok(Model {
            encoder,
            head,
            params: ckpt.params.clone(),
        })
    }

    pub fn to_checkpoint(&self, mask: FreezeMask) -> Result<Checkpoint> {
        Ok(Checkpoint::new(&self.params, mask)?
            .with_meta("encoder", self.encoder.to_meta())
            .with_meta("head", self.head.to_meta()))
    }

    /// Fails unless every encoder parameter the config needs is present with the right shape.
    pub fn check_encoder_params(&self) -> Result<()> {
        let mut want = ParamStore::<f32>::new();
        self.encoder.init_params(&mut want, &mut rng_for(0, 0))?;
        for (path, t) in want.iter() {
            let got = self.params.require(path)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{path} has shape {:?}, encoder config needs {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn logits(&self, u: &Utterance) -> Result<Vec<f32>> {
        let mut s = Session::inference(&self.params);
        let blocks = encoder_forward(&mut s, &u.spectrogram, &self.encoder)?;
        let h = head_forward(&mut s, &blocks, &self.head)?;
        Ok(s.value(h.logits).data().to_vec())
    }

    pub fn predict(&self, u: &Utterance) -> Result<usize> {
        Ok(argmax(&self.logits(u)?))
    }

    /// Features of the given 1-based blocks for one utterance, without any graph kept.
    pub fn block_features(&self, u: &Utterance, blocks: &[usize]) -> Result<Vec<Tensor<f32>>> {
        let last = blocks.iter().copied().max().unwrap_or(0);
        if let Some(&b) = blocks.iter().find(|&&b| b == 0 || b > self.encoder.num_blocks) {
            return Err(Error::Input(format!(
                "block {b} outside [1, {}]",
                self.encoder.num_blocks
            )));
        }
        let mut s = Session::inference(&self.params);
        let out = encoder_forward_until(&mut s, &u.spectrogram, &self.encoder, last)?;
        Ok(blocks.iter().map(|&b| s.value(out.block(b)).clone()).collect())
    }
}

/// Frame labels aligned to the frames of block `block`.
pub fn block_labels(cfg: &EncoderConfig, u: &Utterance, block: usize, frames: usize) -> Vec<usize> {
    (0..frames)
        .map(|j| u.frame_symbols[cfg.source_frame(block, j).min(u.frames() - 1)] as usize)
        .collect()
}

pub fn evaluate(model: &Model, utts: &[&Utterance]) -> Result<EvalReport> {
    let mut truth = Vec::with_capacity(utts.len());
    let mut pred = Vec::with_capacity(utts.len());
    for u in utts {
        truth.push(u.emotion);
        pred.push(model.predict(u)?);
    }
    compute_metrics(&confusion_with_classes(&truth, &pred, NUM_EMOTIONS)?)
}

#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    /// Encoder parameters only.
    pub checkpoint: Checkpoint,
    pub frame_accuracy: f64,
    pub log: TrainLog,
}

const SYMBOL_HEAD: &str = "symbol_head.";

fn symbol_loss(s: &mut Session<'_, f32>, u: &Utterance, cfg: &EncoderConfig) -> Result<(Var, Vec<usize>)> {
    let blocks = encoder_forward(s, &u.spectrogram, cfg)?;
    let w = s.param("symbol_head.w")?;
    let b = s.param("symbol_head.b")?;
    let logits = s.graph.linear(blocks.ppg(), w, b)?;
    let frames = s.value(logits).shape()[0];
    let labels = block_labels(cfg, u, cfg.num_blocks, frames);
    Ok((s.graph.cross_entropy(logits, &labels)?, labels))
}

fn require_symbols(utts: &[&Utterance]) -> Result<()> {
    match utts.iter().find(|u| u.frame_symbols.len() != u.frames()) {
        Some(u) => Err(Error::Data(format!(
            "{} has {} frame symbols for {} frames",
            u.id,
            u.frame_symbols.len(),
            u.frames()
        ))),
        None => Ok(()),
    }
}

/// Trains the encoder plus a temporary per-frame symbol head on the final
/// block. The head is dropped from the returned checkpoint.
pub fn stage1_pretrain(
    train: &[&Utterance],
    heldout: &[&Utterance],
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<Stage1Outcome> {
    cfg.validate()?;
    encoder.validate()?;
    require_symbols(train)?;
    require_symbols(heldout)?;
    if train.is_empty() {
        return Err(Error::Data("stage 1 needs at least one utterance".into()));
    }
    let mut store = ParamStore::new();
    encoder.init_params(&mut store, &mut rng_for(cfg.seed, 0xE0))?;
    let d = encoder.model_dim;
    let mut rng = rng_for(cfg.seed, 0x51);
    store.init_uniform("symbol_head.w", [d, encoder.num_symbols], d, &mut rng)?;
    store.insert("symbol_head.b", Tensor::zeros([encoder.num_symbols]))?;
    let mask = FreezeMask::from_prefixes(&store, &cfg.freeze);
    let mut adam = cfg.adam();
    let mut log = TrainLog::default();
    let mut step = 0;
    let mut epochs_run = 0;
    'outer: for epoch in 0..cfg.epochs {
        for batch in batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let loss = train_step(&mut store, &mask, &mut adam, &batch, |s, i| {
                symbol_loss(s, train[i], encoder).map(|(l, _)| l)
            })?;
            log.entries.push(LogEntry {
                step,
                loss,
                lr: cfg.lr,
            });
            step += 1;
        }
        epochs_run = epoch + 1;
    }

    let mut correct = 0usize;
    let mut total = 0usize;
    for u in heldout {
        let mut s = Session::inference(&store);
        let blocks = encoder_forward(&mut s, &u.spectrogram, encoder)?;
        let w = s.param("symbol_head.w")?;
        let b = s.param("symbol_head.b")?;
        let logits = s.graph.linear(blocks.ppg(), w, b)?;
        let v = s.value(logits);
        let labels = block_labels(encoder, u, encoder.num_blocks, v.rows());
        for (j, &l) in labels.iter().enumerate() {
            correct += usize::from(argmax(v.row(j)) == l);
        }
        total += labels.len();
    }
    let mut enc_store = store.clone();
    enc_store.retain_prefix(crate::encoder::PREFIX);
    debug_assert!(!enc_store.has_prefix(SYMBOL_HEAD));
    let model = Model {
        encoder: encoder.clone(),
        head: FusionConfig::default(),
        params: enc_store,
    };
    let mask = FreezeMask::none(&model.params);
    let checkpoint = Checkpoint::new(&model.params, mask)?
        .with_meta("encoder", encoder.to_meta())
        .with_meta("stage", 1)
        .with_meta("epoch", epochs_run)
        .with_meta("seed", cfg.seed)
        .with_meta("config_hash", cfg.hash());
    Ok(Stage1Outcome {
        checkpoint,
        frame_accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        log,
    })
}

/// Where the stage-2 encoder comes from.
#[derive(Clone, Copy, Debug)]
pub enum Stage2Init<'a> {
    Pretrained(&'a Checkpoint),
    Random(&'a EncoderConfig),
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    /// Parameters of the epoch with the best held-out UA.
    pub checkpoint: Checkpoint,
    pub model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub log: TrainLog,
}

impl Stage2Outcome {
    pub fn best_report(&self) -> &EvalReport {
        &self.history[self.best_epoch - 1].report
    }
}

/// Joint emotion training of encoder and head. Head parameters are always
/// fresh; the encoder comes from `init`. Evaluates on `heldout` after every
/// epoch and keeps the best-UA epoch (earliest on ties).
pub fn stage2_finetune(
    init: Stage2Init<'_>,
    head: &FusionConfig,
    train: &[&Utterance],
    heldout: &[&Utterance],
    cfg: &TrainConfig,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::Data(
            "stage 2 needs training and held-out utterances".into(),
        ));
    }
    let mut model = match init {
        Stage2Init::Random(enc) => Model::init(enc.clone(), head.clone(), cfg.seed)?,
        Stage2Init::Pretrained(ckpt) => {
            let pre = Model::from_checkpoint(ckpt)?;
            pre.check_encoder_params()?;
            let mut m = Model::init(pre.encoder.clone(), head.clone(), cfg.seed)?;
            m.params.merge_prefix(&pre.params, crate::encoder::PREFIX);
            m
        }
    };
    let mask = FreezeMask::from_prefixes(&model.params, &cfg.freeze);
    let mut adam = cfg.adam();
    let mut log = TrainLog::default();
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut n = 0;
        for batch in batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let (enc, hd) = (&model.encoder, &model.head);
            let loss = train_step(&mut model.params, &mask, &mut adam, &batch, |s, i| {
                let u = train[i];
                let blocks = encoder_forward(s, &u.spectrogram, enc)?;
                let h = head_forward(s, &blocks, hd)?;
                s.graph.cross_entropy(h.logits, &[u.emotion])
            })?;
            log.entries.push(LogEntry {
                step,
                loss,
                lr: cfg.lr,
            });
            epoch_loss += loss;
            n += 1;
            step += 1;
        }
        if n == 0 {
            break;
        }
        let report = evaluate(&model, heldout)?;
        let ua = report.ua;
        history.push(EpochRecord {
            epoch: epoch + 1,
            steps: step,
            train_loss: epoch_loss / n as f64,
            report,
        });
        if best.as_ref().is_none_or(|(_, b, _)| ua > *b) {
            best = Some((epoch + 1, ua, model.params.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if ua >= 1.0 || cfg.patience.is_some_and(|p| epoch + 1 - best_epoch >= p) {
            break;
        }
    }
    let (best_epoch, _, params) = best.ok_or_else(|| Error::Config("stage 2 ran zero steps".into()))?;
    model.params = params;
    let checkpoint = model
        .to_checkpoint(mask)?
        .with_meta("stage", 2)
        .with_meta("epoch", best_epoch)
        .with_meta("seed", cfg.seed)
        .with_meta("config_hash", cfg.hash());
    Ok(Stage2Outcome {
        checkpoint,
        model,
        best_epoch,
        history,
        log,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProbeTarget {
    Symbols,
    Emotion,
}

impl ProbeTarget {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "symbols" => Ok(ProbeTarget::Symbols),
            "emotion" => Ok(ProbeTarget::Emotion),
            other => Err(Error::Config(format!(
                "unknown probe target {other:?}, expected symbols or emotion"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProbeTarget::Symbols => "symbols",
            ProbeTarget::Emotion => "emotion",
        }
    }
}

/// One probe example: features `[rows, d]` and one label per row.
#[derive(Clone, Debug)]
pub struct ProbeSample {
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Frozen-encoder features for several blocks at once: `result[b][u]` is the
/// sample for `blocks[b]` and utterance `u`. Emotion samples are time-pooled.
pub fn probe_samples(
    model: &Model,
    utts: &[&Utterance],
    blocks: &[usize],
    target: ProbeTarget,
) -> Result<Vec<Vec<ProbeSample>>> {
    let mut out = vec![Vec::with_capacity(utts.len()); blocks.len()];
    for u in utts {
        let feats = model.block_features(u, blocks)?;
        for (slot, (&b, f)) in out.iter_mut().zip(blocks.iter().zip(feats)) {
            slot.push(match target {
                ProbeTarget::Symbols => {
                    let labels = block_labels(&model.encoder, u, b, f.rows());
                    ProbeSample { features: f, labels }
                }
                ProbeTarget::Emotion => {
                    let d = f.last_dim();
                    let mut mean = vec![0.0f32; d];
                    for r in 0..f.rows() {
                        for (m, v) in mean.iter_mut().zip(f.row(r)) {
                            *m += v;
                        }
                    }
                    let inv = 1.0 / f.rows() as f32;
                    mean.iter_mut().for_each(|m| *m *= inv);
                    ProbeSample {
                        features: Tensor::new([1, d], mean)?,
                        labels: vec![u.emotion],
                    }
                }
            });
        }
    }
    Ok(out)
}

pub const PROBE_HIDDEN: usize = 256;

/// Trains a `d -> 256 -> classes` head on frozen features and reports
/// held-out metrics. Only the head's parameters exist in the optimized store.
pub fn train_probe(
    train: &[ProbeSample],
    heldout: &[ProbeSample],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let d = train
        .first()
        .ok_or_else(|| Error::Data("probe needs training samples".into()))?
        .features
        .last_dim();
    let mut store = ParamStore::<f32>::new();
    let mut rng = rng_for(cfg.seed, 0x9B);
    store.init_uniform("probe.hidden.w", [d, PROBE_HIDDEN], d, &mut rng)?;
    store.insert("probe.hidden.b", Tensor::zeros([PROBE_HIDDEN]))?;
    store.init_uniform("probe.out.w", [PROBE_HIDDEN, classes], PROBE_HIDDEN, &mut rng)?;
    store.insert("probe.out.b", Tensor::zeros([classes]))?;
    let mask = FreezeMask::none(&store);
    let mut adam = cfg.adam();

    fn forward(s: &mut Session<'_, f32>, x: Tensor<f32>) -> Result<Var> {
        let x = s.input(x);
        let w = s.param("probe.hidden.w")?;
        let b = s.param("probe.hidden.b")?;
        let h = s.graph.linear(x, w, b)?;
        let h = s.graph.relu(h);
        let w = s.param("probe.out.w")?;
        let b = s.param("probe.out.b")?;
        s.graph.linear(h, w, b)
    }
    fn stack(samples: &[&ProbeSample]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let d = samples[0].features.last_dim();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for s in samples {
            data.extend_from_slice(s.features.data());
            labels.extend_from_slice(&s.labels);
        }
        Ok((Tensor::new([labels.len(), d], data)?, labels))
    }

    let mut step = 0;
    'outer: for epoch in 0..cfg.epochs {
        for batch in batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let picked: Vec<&ProbeSample> = batch.iter().map(|&i| &train[i]).collect();
            let (x, labels) = stack(&picked)?;
            let mut s = Session::new(&store, Some(&mask))?;
            let logits = forward(&mut s, x)?;
            let loss = s.graph.cross_entropy(logits, &labels)?;
            let grads = s.param_grads(loss)?;
            adam.step(&mut store, &grads, &mask)?;
            step += 1;
        }
    }

    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for chunk in heldout.chunks(64) {
        let refs: Vec<&ProbeSample> = chunk.iter().collect();
        let (x, labels) = stack(&refs)?;
        let mut s = Session::inference(&store);
        let logits = forward(&mut s, x)?;
        let v = s.value(logits);
        for (r, l) in labels.into_iter().enumerate() {
            truth.push(l);
            pred.push(argmax(v.row(r)));
        }
    }
    compute_metrics(&confusion_with_classes(&truth, &pred, classes)?)
}

/// Probe of a single block: extracts frozen features and trains a head.
pub fn linear_probe(
    model: &Model,
    train: &[&Utterance],
    heldout: &[&Utterance],
    block: usize,
    target: ProbeTarget,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    if block == 0 || block > model.encoder.num_blocks {
        return Err(Error::Input(format!(
            "probe block {block} outside [1, {}]",
            model.encoder.num_blocks
        )));
    }
    let tr = probe_samples(model, train, &[block], target)?.remove(0);
    let te = probe_samples(model, heldout, &[block], target)?.remove(0);
    train_probe(&tr, &te, probe_classes(model, target), cfg)
}

pub fn probe_classes(model: &Model, target: ProbeTarget) -> usize {
    match target {
        ProbeTarget::Symbols => model.encoder.num_symbols,
        ProbeTarget::Emotion => NUM_EMOTIONS,
    }
}
