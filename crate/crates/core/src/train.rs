//! Optimizer, losses, augmentation and the training schedules.
//!
//! Classification runs two stages: batch normalization, then bit-shift
//! normalization after folding. The codec runs three: encoder with the
//! patch-independent decoder, full-frame decoder on a frozen encoder, and
//! refinement alone on a frozen upsampling stack.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Gradients, ParamId, ParamStore};
use crate::data::{frames_to_patches, Dataset};
use crate::error::{Error, Result};
use crate::metrics::psnr_from_mse;
use crate::model::{FoldLog, Mode, Nqe, Output, QuantizerLog, ENCODER_STORE};
use crate::purenet::{Decoder, DecoderMode, DecoderStats, REFINEMENT_STORE, UPSAMPLING_STORE};
use crate::tensor::Tensor;
use crate::topology::DecoderVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredHinge,
    Mse,
}

/// Classification training protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lr_init: f64,
    pub lr_decay: f64,
    /// Epochs between two multiplications by `lr_decay`.
    #[serde(default = "default_decay_period")]
    pub decay_period: usize,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub augmentation: bool,
}

fn default_decay_period() -> usize {
    10
}

fn default_loss() -> LossKind {
    LossKind::SquaredHinge
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// The full CIFAR-10 protocol.
    pub fn full() -> Self {
        TrainConfig {
            batch_size: 50,
            epochs_stage1: 100,
            epochs_stage2: 120,
            lr_init: 1e-3,
            lr_decay: 0.8,
            decay_period: 10,
            loss: LossKind::SquaredHinge,
            seed: 0,
            augmentation: true,
        }
    }

    /// Desk-scale run on the synthetic textures.
    pub fn toy() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs_stage1: 20,
            epochs_stage2: 10,
            lr_init: 3e-3,
            lr_decay: 0.8,
            decay_period: 5,
            loss: LossKind::SquaredHinge,
            seed: 0,
            augmentation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return Err(Error::config(format!("lr_init must be positive, got {}", self.lr_init)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if self.decay_period == 0 {
            return Err(Error::config("decay_period must be positive"));
        }
        Ok(())
    }

    /// Learning rate of 0-based `epoch` within a stage.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_init * self.lr_decay.powi((epoch / self.decay_period) as i32)
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `stores` that has a gradient.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &Gradients, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for store in stores.iter_mut() {
            let ids: Vec<ParamId> = store.ids().collect();
            for id in ids {
                let Some(g) = grads.get(id) else { continue };
                let p = store.get_mut(id);
                if g.shape() != p.shape() {
                    return Err(Error::shape(format!(
                        "gradient {:?} for parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
                let (m, v) = self
                    .moments
                    .entry(id)
                    .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let gi = gi as f64;
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                    let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                    *w = (*w as f64 - update) as f32;
                }
            }
        }
        Ok(())
    }
}

/// `mean(max(0, 1 - y·ŷ)²)` and its gradient; targets must be `±1`.
pub fn squared_hinge(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    logits.expect_same_shape(targets)?;
    if let Some(bad) = targets.data().iter().find(|&&y| y != 1.0 && y != -1.0) {
        return Err(Error::config(format!("hinge targets must be ±1, got {bad}")));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits.zip_map(targets, |p, y| {
        let m = (1.0 - y * p).max(0.0);
        -2.0 * y * m / n as f32
    })?;
    for (&p, &y) in logits.data().iter().zip(targets.data()) {
        let m = (1.0 - y as f64 * p as f64).max(0.0);
        loss += m * m;
    }
    Ok((loss / n, grad))
}

/// Mean squared error and its gradient.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    pred.expect_same_shape(target)?;
    let n = pred.len() as f64;
    let loss = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
        .sum::<f64>()
        / n;
    let grad = pred.zip_map(target, |p, t| 2.0 * (p - t) / n as f32)?;
    Ok((loss, grad))
}

/// One-vs-rest `±1` targets.
pub fn one_vs_rest(labels: &[usize], classes: usize) -> Tensor {
    Tensor::from_fn(&[labels.len(), classes], |i| {
        if labels[i / classes] == i % classes {
            1.0
        } else {
            -1.0
        }
    })
}

/// Padding used by [`augment`]: 4 pixels at 32×32, scaled with the size.
pub fn augment_padding(size: usize) -> usize {
    (size / 8).max(1)
}

/// Zero-pads a `[1, s, s, c]` image, crops `s × s` at `(top, left)` of the
/// padded frame, optionally mirrors horizontally.
pub fn augment_with(image: &Tensor, top: usize, left: usize, flip: bool) -> Result<Tensor> {
    let [n, h, w, c] = image.dims4()?;
    let pad = augment_padding(h);
    if n != 1 || h != w {
        return Err(Error::shape(format!("augment expects one square image, got {:?}", image.shape())));
    }
    if top > 2 * pad || left > 2 * pad {
        return Err(Error::config(format!("crop offset ({top}, {left}) outside the padded frame")));
    }
    let src = image.data();
    let mut out = vec![0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let sx = if flip { w - 1 - x } else { x };
            let (py, px) = ((y + top) as isize - pad as isize, (sx + left) as isize - pad as isize);
            if py < 0 || px < 0 || py >= h as isize || px >= w as isize {
                continue;
            }
            let s = (py as usize * w + px as usize) * c;
            out[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&src[s..s + c]);
        }
    }
    Tensor::new(&[1, h, w, c], out)
}

/// Random pad-crop-flip.
pub fn augment(image: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let pad = augment_padding(image.shape().get(1).copied().unwrap_or(0));
    let top = rng.random_range(0..=2 * pad);
    let left = rng.random_range(0..=2 * pad);
    augment_with(image, top, left, rng.random::<bool>())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Protocol {
        task: String,
        settings: serde_json::Value,
        schedule: String,
    },
    Epoch {
        stage: String,
        epoch: usize,
        lr: f64,
        loss: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        accuracy: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        psnr: Option<f64>,
        quantizers: Vec<QuantizerLog>,
    },
    Fold {
        stage: String,
        layers: Vec<FoldLog>,
        #[serde(skip_serializing_if = "Option::is_none")]
        accuracy: Option<f64>,
    },
}

/// Sink for log records; `()` discards them.
pub trait TrainLog {
    fn record(&mut self, record: &LogRecord);
}

impl TrainLog for () {
    fn record(&mut self, _: &LogRecord) {}
}

impl TrainLog for Vec<LogRecord> {
    fn record(&mut self, record: &LogRecord) {
        self.push(record.clone());
    }
}

/// JSON-lines log over any writer.
pub struct JsonLines<W>(pub W);

impl<W: std::io::Write> TrainLog for JsonLines<W> {
    fn record(&mut self, record: &LogRecord) {
        let line = serde_json::to_string(record).expect("records serialize");
        if writeln!(self.0, "{line}").is_err() {
            log::warn!("dropping log record");
        }
    }
}

/// Result of [`train_classifier`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutcome {
    pub stage1_accuracy: f64,
    pub folded_accuracy: f64,
    pub stage2_accuracy: f64,
    /// Quantizer state after every epoch of both stages.
    pub quantizer_history: Vec<Vec<QuantizerLog>>,
}

/// Evaluation-mode accuracy in batches.
pub fn accuracy(model: &Nqe, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, labels) = data.select(chunk);
        let pred = model.logits(&x)?.argmax_rows();
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn batch_images(data: &Dataset, idx: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<usize>)> {
    let (x, labels) = data.select(idx);
    if !cfg.augmentation {
        return Ok((x, labels));
    }
    let samples = (0..x.batch())
        .map(|i| augment(&x.sample(i), rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&samples)?, labels))
}

fn diverged(stage: &str, epoch: usize, loss: f64) -> Error {
    Error::Diverged {
        stage: stage.to_string(),
        epoch,
        reason: format!("loss became {loss}"),
    }
}

fn classifier_stage(
    model: &mut Nqe,
    data: &Dataset,
    cfg: &TrainConfig,
    stage: &str,
    epochs: usize,
    rng: &mut ChaCha8Rng,
    history: &mut Vec<Vec<QuantizerLog>>,
    log: &mut dyn TrainLog,
) -> Result<f64> {
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut acc = accuracy(model, data)?;
    for epoch in 0..epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = batch_images(data, chunk, cfg, rng)?;
            let mut g = Graph::new();
            let xi = g.input(x);
            let (out, stats) = model.forward(&mut g, xi, Mode::Train, Output::Logits)?;
            let (loss, seed) = match cfg.loss {
                LossKind::SquaredHinge => squared_hinge(g.value(out), &one_vs_rest(&labels, data.classes))?,
                LossKind::Mse => mse(g.value(out), &one_vs_rest(&labels, data.classes))?,
            };
            if !loss.is_finite() {
                return Err(diverged(stage, epoch + 1, loss));
            }
            let grads = g.backward(out, seed)?;
            adam.step(&mut [model.params_mut()], &grads, lr)?;
            model.clip_proxies();
            model.apply_batch_stats(&stats);
            total += loss * chunk.len() as f64;
        }
        let quantizers = model.recalibrate()?;
        acc = accuracy(model, data)?;
        history.push(quantizers.clone());
        log.record(&LogRecord::Epoch {
            stage: stage.to_string(),
            epoch: epoch + 1,
            lr,
            loss: total / data.len() as f64,
            accuracy: Some(acc),
            psnr: None,
            quantizers,
        });
    }
    Ok(acc)
}

/// Two-stage classification training: batch norm, fold, bit-shift norm.
pub fn train_classifier(
    model: &mut Nqe,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn TrainLog,
) -> Result<ClassifierOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if data.classes != model.config().classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model {}",
            data.classes,
            model.config().classes
        )));
    }
    log.record(&LogRecord::Protocol {
        task: "classification".into(),
        settings: serde_json::to_value(cfg).expect("config serializes"),
        schedule: format!(
            "lr = {} * {}^floor(epoch / {}), restarted for stage 2; quantizers recalibrated after every epoch",
            cfg.lr_init, cfg.lr_decay, cfg.decay_period
        ),
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let stage1 = if model.is_folded() {
        accuracy(model, data)?
    } else {
        classifier_stage(model, data, cfg, "bn", cfg.epochs_stage1, &mut rng, &mut history, log)?
    };
    let layers = if model.is_folded() {
        Vec::new()
    } else {
        model.fold_normalization()?
    };
    let folded = accuracy(model, data)?;
    log.record(&LogRecord::Fold {
        stage: "fold".into(),
        layers,
        accuracy: Some(folded),
    });
    let stage2 = classifier_stage(model, data, cfg, "bsn", cfg.epochs_stage2, &mut rng, &mut history, log)?;
    Ok(ClassifierOutcome {
        stage1_accuracy: stage1,
        folded_accuracy: folded,
        stage2_accuracy: stage2,
        quantizer_history: history,
    })
}

/// Codec training protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub batch_a: usize,
    pub epochs_a_bn: usize,
    pub epochs_a_bsn: usize,
    pub lr_a: f64,
    pub decay_a: f64,
    pub decay_period_a: usize,
    pub batch_b: usize,
    pub epochs_b: usize,
    pub lr_b: f64,
    pub decay_b: f64,
    /// Epochs at the initial rate before decay starts.
    pub decay_after_b: usize,
    pub batch_c: usize,
    pub epochs_c: usize,
    pub lr_c: f64,
    pub decay_c: f64,
    pub decay_after_c: usize,
    #[serde(default)]
    pub seed: u64,
}

impl CodecConfig {
    pub fn full() -> Self {
        CodecConfig {
            batch_a: 100,
            epochs_a_bn: 60,
            epochs_a_bsn: 30,
            lr_a: 1e-3,
            decay_a: 0.8,
            decay_period_a: 10,
            batch_b: 1,
            epochs_b: 30,
            lr_b: 1e-3,
            decay_b: 0.95,
            decay_after_b: 5,
            batch_c: 2,
            epochs_c: 30,
            lr_c: 1e-3,
            decay_c: 0.95,
            decay_after_c: 10,
            seed: 0,
        }
    }

    /// Desk-scale run: 16×16 tiles of 8×8 patches.
    pub fn toy() -> Self {
        CodecConfig {
            batch_a: 32,
            epochs_a_bn: 10,
            epochs_a_bsn: 4,
            lr_a: 3e-3,
            decay_a: 0.8,
            decay_period_a: 5,
            batch_b: 4,
            epochs_b: 4,
            lr_b: 1e-3,
            decay_b: 0.95,
            decay_after_b: 2,
            batch_c: 4,
            epochs_c: 2,
            lr_c: 1e-3,
            decay_c: 0.95,
            decay_after_c: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("batch_a", self.batch_a), ("batch_b", self.batch_b), ("batch_c", self.batch_c)] {
            if b == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        for (name, lr) in [("lr_a", self.lr_a), ("lr_b", self.lr_b), ("lr_c", self.lr_c)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        for (name, d) in [("decay_a", self.decay_a), ("decay_b", self.decay_b), ("decay_c", self.decay_c)] {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::config(format!("{name} must be in (0, 1]")));
            }
        }
        if self.decay_period_a == 0 {
            return Err(Error::config("decay_period_a must be positive"));
        }
        Ok(())
    }

    /// Stage-A rate at 0-based `epoch` of either half.
    pub fn lr_a_at(&self, epoch: usize) -> f64 {
        self.lr_a * self.decay_a.powi((epoch / self.decay_period_a) as i32)
    }

    /// Stage-B rate at 0-based `epoch`: constant for `decay_after_b` epochs,
    /// then multiplied by `decay_b` every epoch.
    pub fn lr_b_at(&self, epoch: usize) -> f64 {
        self.lr_b * self.decay_b.powi((epoch + 1).saturating_sub(self.decay_after_b) as i32)
    }

    pub fn lr_c_at(&self, epoch: usize) -> f64 {
        self.lr_c * self.decay_c.powi((epoch + 1).saturating_sub(self.decay_after_c) as i32)
    }
}

/// Codec stages, in the only order they may run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodecStage {
    /// Encoder with a patch-independent decoder.
    A,
    /// Full-frame decoder on a frozen encoder.
    B,
    /// Refinement only.
    C,
    Done,
}

/// Per-stage losses, one entry per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub losses: Vec<f64>,
    pub psnr: Vec<f64>,
}

/// Runs the codec stages in order, rejecting anything else.
#[derive(Clone, Debug)]
pub struct CodecTrainer {
    config: CodecConfig,
    next: CodecStage,
    rng: ChaCha8Rng,
}

impl CodecTrainer {
    pub fn new(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(CodecTrainer {
            config,
            next: CodecStage::A,
            rng,
        })
    }

    pub fn next_stage(&self) -> CodecStage {
        self.next
    }

    fn enter(&mut self, stage: CodecStage) -> Result<()> {
        if self.next != stage {
            return Err(Error::StageOrder(format!(
                "stage {stage:?} requested while stage {:?} is next",
                self.next
            )));
        }
        self.next = match stage {
            CodecStage::A => CodecStage::B,
            CodecStage::B => CodecStage::C,
            _ => CodecStage::Done,
        };
        Ok(())
    }

    /// Stage A on patches `[N, p, p, 3]`: batch norm, fold, bit-shift norm.
    /// The decoder must be patch independent (PI or BBD).
    pub fn stage_a(
        &mut self,
        encoder: &mut Nqe,
        decoder: &mut Decoder,
        patches: &Tensor,
        log: &mut dyn TrainLog,
    ) -> Result<StageReport> {
        if decoder.variant() == DecoderVariant::Purenet {
            return Err(Error::config("stage A trains a patch-independent decoder (pi or bbd)"));
        }
        check_patches(encoder, decoder, patches)?;
        self.enter(CodecStage::A)?;
        log.record(&LogRecord::Protocol {
            task: "codec".into(),
            settings: serde_json::to_value(&self.config).expect("config serializes"),
            schedule: format!(
                "A: lr = {} * {}^floor(epoch / {}) per half; B: {} * {}^max(0, epoch - {}); C: {} * {}^max(0, epoch - {})",
                self.config.lr_a,
                self.config.decay_a,
                self.config.decay_period_a,
                self.config.lr_b,
                self.config.decay_b,
                self.config.decay_after_b,
                self.config.lr_c,
                self.config.decay_c,
                self.config.decay_after_c
            ),
        });
        let mut report = StageReport::default();
        for (half, epochs) in [("a_bn", self.config.epochs_a_bn), ("a_bsn", self.config.epochs_a_bsn)] {
            if half == "a_bsn" && !encoder.is_folded() {
                let layers = encoder.fold_normalization()?;
                log.record(&LogRecord::Fold {
                    stage: "a_fold".into(),
                    layers,
                    accuracy: None,
                });
            }
            let mut adam = Adam::default();
            let mut order: Vec<usize> = (0..patches.batch()).collect();
            for epoch in 0..epochs {
                let lr = self.config.lr_a_at(epoch);
                order.shuffle(&mut self.rng);
                let mut total = 0.0;
                for chunk in order.chunks(self.config.batch_a) {
                    let x = gather(patches, chunk)?;
                    let mut g = Graph::new();
                    let xi = g.input(x.clone());
                    let (codes, enc_stats) = encoder.forward(&mut g, xi, Mode::Train, Output::Code)?;
                    let mut dec_stats = DecoderStats::default();
                    let out = decoder.forward(&mut g, codes, 1, 1, DecoderMode::TRAIN, &mut dec_stats)?;
                    let (loss, seed) = mse(g.value(out), &x)?;
                    if !loss.is_finite() {
                        return Err(diverged(half, epoch + 1, loss));
                    }
                    let grads = g.backward(out, seed)?;
                    let (pu, re) = decoder.stores_mut();
                    adam.step(&mut [encoder.params_mut(), pu, re], &grads, lr)?;
                    encoder.clip_proxies();
                    encoder.apply_batch_stats(&enc_stats);
                    decoder.apply_batch_stats(&dec_stats);
                    total += loss * chunk.len() as f64;
                }
                let quantizers = encoder.recalibrate()?;
                let loss = total / patches.batch() as f64;
                let p = psnr_from_mse(loss);
                report.losses.push(loss);
                report.psnr.push(p);
                log.record(&LogRecord::Epoch {
                    stage: half.into(),
                    epoch: epoch + 1,
                    lr,
                    loss,
                    accuracy: None,
                    psnr: Some(p),
                    quantizers,
                });
            }
        }
        Ok(report)
    }

    /// Stage B on frames `[N, H, W, 3]`: PI weights seed the full-frame
    /// decoder, which trains on codes of the frozen encoder.
    pub fn stage_b(
        &mut self,
        encoder: &Nqe,
        decoder: &mut Decoder,
        frames: &Tensor,
        log: &mut dyn TrainLog,
    ) -> Result<StageReport> {
        self.enter(CodecStage::B)?;
        *decoder = decoder.clone().with_variant(DecoderVariant::Purenet);
        let cfg = self.config.clone();
        self.frame_stage(encoder, decoder, frames, "b", cfg.batch_b, cfg.epochs_b, |e| cfg.lr_b_at(e), false, log)
    }

    /// Stage C: refinement alone, upsampling frozen in evaluation mode.
    pub fn stage_c(
        &mut self,
        encoder: &Nqe,
        decoder: &mut Decoder,
        frames: &Tensor,
        log: &mut dyn TrainLog,
    ) -> Result<StageReport> {
        self.enter(CodecStage::C)?;
        let cfg = self.config.clone();
        self.frame_stage(encoder, decoder, frames, "c", cfg.batch_c, cfg.epochs_c, |e| cfg.lr_c_at(e), true, log)
    }

    #[allow(clippy::too_many_arguments)]
    fn frame_stage(
        &mut self,
        encoder: &Nqe,
        decoder: &mut Decoder,
        frames: &Tensor,
        stage: &str,
        batch: usize,
        epochs: usize,
        lr_at: impl Fn(usize) -> f64,
        freeze_upsampling: bool,
        log: &mut dyn TrainLog,
    ) -> Result<StageReport> {
        if !encoder.is_folded() {
            return Err(Error::StageOrder("frame stages need the folded encoder from stage A".into()));
        }
        let p = decoder.patch_size();
        let n = frames.batch();
        if n == 0 {
            return Err(Error::Empty("frame set"));
        }
        // The encoder is frozen: its codes are computed once.
        let mut codes = Vec::with_capacity(n);
        let mut grid = (0, 0);
        for i in 0..n {
            let (patches, rows, cols) = frames_to_patches(&frames.sample(i), p)?;
            grid = (rows, cols);
            codes.push(encoder.encode(&patches)?);
        }
        let (rows, cols) = grid;
        let mode = DecoderMode {
            upsampling: if freeze_upsampling { Mode::Eval } else { Mode::Train },
            refinement: Mode::Train,
        };
        let mut adam = Adam::default();
        let mut report = StageReport::default();
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..epochs {
            let lr = lr_at(epoch);
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            for chunk in order.chunks(batch) {
                let c = Tensor::stack(&chunk.iter().map(|&i| codes[i].clone()).collect::<Vec<_>>())?;
                let c = c.reshape(&[chunk.len() * rows * cols, decoder.code_bits()])?;
                let target = gather(frames, chunk)?;
                let mut g = Graph::new();
                if freeze_upsampling {
                    g.freeze_store(UPSAMPLING_STORE);
                }
                g.freeze_store(ENCODER_STORE);
                let ci = g.input(c);
                let mut stats = DecoderStats::default();
                let out = decoder.forward(&mut g, ci, rows, cols, mode, &mut stats)?;
                let (loss, seed) = mse(g.value(out), &target)?;
                if !loss.is_finite() {
                    return Err(diverged(stage, epoch + 1, loss));
                }
                let grads = g.backward(out, seed)?;
                let (pu, re) = decoder.stores_mut();
                if freeze_upsampling {
                    adam.step(&mut [re], &grads, lr)?;
                } else {
                    adam.step(&mut [pu, re], &grads, lr)?;
                }
                decoder.apply_batch_stats(&stats);
                total += loss * chunk.len() as f64;
            }
            let loss = total / n as f64;
            let p = psnr_from_mse(loss);
            report.losses.push(loss);
            report.psnr.push(p);
            log.record(&LogRecord::Epoch {
                stage: stage.into(),
                epoch: epoch + 1,
                lr,
                loss,
                accuracy: None,
                psnr: Some(p),
                quantizers: Vec::new(),
            });
        }
        debug_assert!(!decoder.store(REFINEMENT_STORE).is_empty());
        Ok(report)
    }
}

fn check_patches(encoder: &Nqe, decoder: &Decoder, patches: &Tensor) -> Result<()> {
    let [n, h, w, _] = patches.dims4()?;
    if n == 0 {
        return Err(Error::Empty("patch set"));
    }
    let s = encoder.config().input_size;
    if h != s || w != s || decoder.patch_size() != s {
        return Err(Error::shape(format!(
            "patches {h}x{w}, encoder input {s}, decoder patch {}",
            decoder.patch_size()
        )));
    }
    if decoder.code_bits() != encoder.config().code_bits() {
        return Err(Error::config("decoder code width differs from the encoder's"));
    }
    Ok(())
}

fn gather(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    Tensor::stack(&idx.iter().map(|&i| t.sample(i)).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn adam_first_step_by_hand() {
        let mut store = ParamStore::new(0);
        let id = store.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let grads = g.backward(w, Tensor::new(&[2], vec![0.5, -0.25]).unwrap()).unwrap();
        let mut adam = Adam::default();
        adam.step(&mut [&mut store], &grads, 0.1).unwrap();
        // m̂ = g and v̂ = g² after one step, so the update is lr·g/(|g| + ε).
        let want = [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 0.25 / (0.25 + 1e-8)];
        for (a, b) in store.get(id).data().iter().zip(want) {
            assert_relative_eq!(*a as f64, b, max_relative = 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_and_asymptote() {
        let mut store = ParamStore::new(0);
        let id = store.add("w", Tensor::zeros(&[1]));
        let mut adam = Adam::default();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let zero = g.backward(w, Tensor::zeros(&[1])).unwrap();
        adam.step(&mut [&mut store], &zero, 0.1).unwrap();
        assert_eq!(store.get(id).data()[0], 0.0);
        let constant = g.backward(w, Tensor::full(&[1], 3.0)).unwrap();
        let mut prev = store.get(id).data()[0];
        for _ in 0..2000 {
            adam.step(&mut [&mut store], &constant, 1e-3).unwrap();
        }
        let now = store.get(id).data()[0];
        adam.step(&mut [&mut store], &constant, 1e-3).unwrap();
        prev = prev.min(now);
        let step = now - store.get(id).data()[0];
        assert_relative_eq!(step as f64, 1e-3, max_relative = 1e-2);
        assert!(prev <= now);
    }

    #[test]
    fn hinge_and_mse_by_formula() {
        let y = Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap();
        let confident = Tensor::new(&[1, 2], vec![2.0, -1.0]).unwrap();
        assert_eq!(squared_hinge(&confident, &y).unwrap().0, 0.0);
        let zero = Tensor::zeros(&[1, 2]);
        assert_eq!(squared_hinge(&zero, &y).unwrap().0, 1.0);
        let bad = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert!(squared_hinge(&zero, &bad).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Tensor::from_fn(&[3, 4], |_| rng.random_range(-2.0f32..2.0));
        let t = one_vs_rest(&[0, 3, 1], 4);
        let direct: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (1.0 - a as f64 * b as f64).max(0.0).powi(2))
            .sum::<f64>()
            / 12.0;
        assert_relative_eq!(squared_hinge(&p, &t).unwrap().0, direct, max_relative = 1e-12);
        let direct_mse: f64 =
            p.data().iter().zip(t.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / 12.0;
        assert_relative_eq!(mse(&p, &t).unwrap().0, direct_mse, max_relative = 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Tensor::from_fn(&[2, 3], |_| rng.random_range(-2.0f32..2.0));
        let t = one_vs_rest(&[2, 0], 3);
        for f in [squared_hinge, mse] {
            let (_, grad) = f(&p, &t).unwrap();
            for i in 0..p.len() {
                let h = 1e-3;
                let mut a = p.clone();
                a.data_mut()[i] += h;
                let mut b = p.clone();
                b.data_mut()[i] -= h;
                let fd = (f(&a, &t).unwrap().0 - f(&b, &t).unwrap().0) / (2.0 * h as f64);
                assert!((fd - grad.data()[i] as f64).abs() < 1e-3, "{fd} vs {}", grad.data()[i]);
            }
        }
    }

    #[test]
    fn augment_identity_crop_and_multiset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::from_fn(&[1, 32, 32, 3], |_| rng.random::<f32>());
        assert_eq!(augment_with(&img, 4, 4, false).unwrap(), img);
        for _ in 0..10 {
            assert_eq!(augment(&img, &mut rng).unwrap().shape(), &[1, 32, 32, 3]);
        }
        // A flip without a shift keeps every pixel.
        let flipped = augment_with(&img, 4, 4, true).unwrap();
        let sorted = |t: &Tensor| {
            let mut v = t.data().to_vec();
            v.sort_by(f32::total_cmp);
            v
        };
        assert_eq!(sorted(&flipped), sorted(&img));
        assert!(augment_with(&Tensor::zeros(&[1, 8, 4, 3]), 0, 0, false).is_err());
    }

    #[test]
    fn schedules() {
        let c = TrainConfig::full();
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(9), 1e-3);
        assert_relative_eq!(c.lr_at(10), 8e-4);
        assert_relative_eq!(c.lr_at(99), 1e-3 * 0.8f64.powi(9));
        let k = CodecConfig::full();
        for e in 0..5 {
            assert_eq!(k.lr_b_at(e), 1e-3);
        }
        assert_relative_eq!(k.lr_b_at(5), 0.95e-3);
        assert_eq!(k.lr_c_at(9), 1e-3);
        assert_relative_eq!(k.lr_c_at(10), 0.95e-3);
        let mut bad = TrainConfig::full();
        bad.lr_decay = 1.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stage_order_enforced() {
        let mut t = CodecTrainer::new(CodecConfig::toy()).unwrap();
        let enc = Nqe::new(crate::topology::ModelConfig::toy(2), 0).unwrap();
        let mut dec = Decoder::new(crate::topology::PurenetConfig::toy(), 32, 0).unwrap();
        let frames = crate::data::synthetic_tiles(1, 16, 16, 0);
        assert!(matches!(t.stage_b(&enc, &mut dec, &frames, &mut ()), Err(Error::StageOrder(_))));
        assert_eq!(t.next_stage(), CodecStage::A);
    }
}
