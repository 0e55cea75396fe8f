//! Training state, the per-step update and its gradient-flow contract.

mod checkpoint;
mod run;
mod step;

pub(crate) use checkpoint::digest;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use run::{
    epoch_checkpoint_path, heldout_recon_mse, pretrain_decoder, read_metrics, train, MetricsRecord, PretrainReport,
    TrainOptions, TrainOutcome, LATEST_CHECKPOINT, METRICS_FILE,
};
pub use step::{probe_gradients, train_step, warm_queue, GradientProbe, StepBatch, StepLosses};

use rand_distr::{Distribution, StandardNormal};

use crate::datagen::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::{ContrastiveConfig, LossWeights};
use crate::nets::{Decoder, DecoderConfig, Encoder, EncoderConfig, Projector, ProjectorConfig};
use crate::optim::Sgd;
use crate::perturb::{FeatureBank, NoiseConfig, RingStore};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Network shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub encoder_channels: Vec<usize>,
    pub projector_hidden: usize,
    pub projector_dim: usize,
    pub decoder_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            encoder_channels: vec![16, 32, 64, 128],
            projector_hidden: 128,
            projector_dim: 64,
            decoder_channels: vec![128, 64, 32, 16],
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.encoder_channels.last().copied().unwrap_or(0)
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: 3,
            channels: self.encoder_channels.clone(),
        }
    }

    pub fn projector(&self) -> ProjectorConfig {
        ProjectorConfig {
            dims: vec![self.feature_dim(), self.projector_hidden, self.projector_dim],
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            feature_dim: self.feature_dim(),
            channels: self.decoder_channels.clone(),
            out_channels: 3,
            image_size: self.image_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub key_momentum: f64,
    pub queue_capacity: usize,
    pub bank_capacity: usize,
    /// Sample groups for batch normalization in the contrastive passes; the
    /// key batch is shuffled before grouping.
    pub bn_groups: usize,
    pub noise: NoiseConfig,
    pub weights: LossWeights,
    pub contrastive: ContrastiveConfig,
    pub seed: u64,
    /// Record zero wall time so metrics streams compare byte for byte.
    pub deterministic: bool,
    pub decoder_lr: f64,
    pub decoder_epochs: usize,
    pub decoder_batch_size: usize,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub allow_untrained_decoder: bool,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            key_momentum: 0.999,
            queue_capacity: 1024,
            bank_capacity: 256,
            bn_groups: 2,
            noise: NoiseConfig::default(),
            weights: LossWeights::default(),
            contrastive: ContrastiveConfig::default(),
            seed: 0,
            deterministic: true,
            decoder_lr: 1e-3,
            decoder_epochs: 40,
            decoder_batch_size: 32,
            checkpoint_every: 1,
            allow_untrained_decoder: false,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be >= 2".into()));
        }
        if self.batch_size > self.queue_capacity.min(self.bank_capacity) {
            return Err(Error::Config(format!(
                "train.batch_size {} exceeds min(queue_capacity {}, bank_capacity {})",
                self.batch_size, self.queue_capacity, self.bank_capacity
            )));
        }
        if !(0.0..=1.0).contains(&self.key_momentum) {
            return Err(Error::Config(format!("train.key_momentum {} outside [0, 1]", self.key_momentum)));
        }
        for (name, v) in [
            ("train.lr", self.lr),
            ("train.momentum", self.momentum),
            ("train.weight_decay", self.weight_decay),
            ("decoder.lr", self.decoder_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.decoder_batch_size < 2 {
            return Err(Error::Config("decoder.batch_size must be >= 2".into()));
        }
        if self.bn_groups == 0 {
            return Err(Error::Config("train.bn_groups must be >= 1".into()));
        }
        self.noise.validate()?;
        self.weights.validate()?;
        self.contrastive.validate()?;
        self.augment.validate()?;
        self.model.decoder().start_size()?;
        if self.model.projector_hidden == 0 || self.model.projector_dim == 0 || self.model.feature_dim() == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }

    /// Whether steps need the reconstruction path at all.
    pub fn uses_decoder(&self) -> bool {
        self.weights.alpha > 0.0 || self.weights.nu > 0.0
    }
}

/// FIFO of key representations used as negatives. The storage starts with
/// random unit vectors so the loss has negatives from the first step;
/// `train` replaces them with keys of training images before the first step.
/// `fill` counts keys pushed by steps only.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyQueue {
    ring: RingStore<f32>,
}

impl KeyQueue {
    pub fn new(capacity: usize, width: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Stream::Queue, &[]);
        let mut data: Vec<f32> = (0..capacity * width)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect();
        for row in data.chunks_mut(width.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let storage = Tensor::from_vec(&[capacity, width], data)?;
        if capacity == 0 || width == 0 {
            return Err(Error::Config("key queue needs positive capacity and width".into()));
        }
        Ok(Self {
            ring: RingStore::from_parts(storage, 0, 0)?,
        })
    }

    pub fn from_ring(ring: RingStore<f32>) -> Self {
        Self { ring }
    }

    pub fn ring(&self) -> &RingStore<f32> {
        &self.ring
    }

    pub fn fill(&self) -> usize {
        self.ring.fill()
    }

    pub fn capacity(&self) -> usize {
        self.ring.capacity()
    }

    /// Every stored row, including any initial random ones.
    pub fn negatives(&self) -> Tensor<f32> {
        self.ring.storage()
    }

    pub fn push(&mut self, keys: &Tensor<f32>) -> Result<()> {
        for i in 0..keys.dim(0) {
            let n = keys.row(i).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidArgument(format!("key row {i} has norm {n}, expected 1")));
            }
        }
        self.ring.push(keys)
    }

    /// Replace the placeholder rows of a queue that holds no real keys yet.
    /// The fill count is left at zero.
    pub fn replace_placeholders(&mut self, rows: &Tensor<f32>) -> Result<()> {
        if self.fill() != 0 {
            return Err(Error::InvalidArgument("queue already holds keys".into()));
        }
        if rows.shape() != [self.capacity(), self.ring.width()] {
            return Err(Error::shape(
                "queue placeholders",
                format!("expected [{}, {}], got {:?}", self.capacity(), self.ring.width(), rows.shape()),
            ));
        }
        let mut fresh = RingStore::new(self.capacity(), self.ring.width())?;
        for i in 0..rows.dim(0) {
            let n = rows.row(i).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidArgument(format!("placeholder row {i} has norm {n}, expected 1")));
            }
        }
        fresh.push(rows)?;
        self.ring = RingStore::from_parts(fresh.storage(), 0, 0)?;
        Ok(())
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub encoder_q: Encoder<f32>,
    pub projector_q: Projector<f32>,
    pub encoder_k: Encoder<f32>,
    pub projector_k: Projector<f32>,
    pub decoder: Decoder<f32>,
    pub opt_encoder: Sgd<f32>,
    pub opt_projector: Sgd<f32>,
    pub opt_decoder: Sgd<f32>,
    pub queue: KeyQueue,
    pub bank: FeatureBank<f32>,
    /// Steps completed.
    pub step: u64,
    /// Epochs completed.
    pub epoch: u64,
    pub decoder_pretrained: bool,
}

impl TrainState {
    /// Fresh seeded networks; the key networks start as copies of the query
    /// networks.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let m = &cfg.model;
        let encoder_q = Encoder::new(m.encoder(), &mut stream(cfg.seed, Stream::Init, &[0]))?;
        let projector_q = Projector::new(m.projector(), &mut stream(cfg.seed, Stream::Init, &[1]))?;
        let decoder = Decoder::new(m.decoder(), &mut stream(cfg.seed, Stream::Init, &[2]))?;
        Ok(Self {
            opt_encoder: Sgd::new(&encoder_q.params, cfg.momentum, cfg.weight_decay),
            opt_projector: Sgd::new(&projector_q.params, cfg.momentum, cfg.weight_decay),
            opt_decoder: Sgd::new(&decoder.params, cfg.momentum, cfg.weight_decay),
            encoder_k: encoder_q.clone(),
            projector_k: projector_q.clone(),
            encoder_q,
            projector_q,
            decoder,
            queue: KeyQueue::new(cfg.queue_capacity, m.projector_dim, cfg.seed)?,
            bank: FeatureBank::new(cfg.bank_capacity, m.feature_dim())?,
            step: 0,
            epoch: 0,
            decoder_pretrained: false,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.encoder_q.params.all_finite()
            && self.projector_q.params.all_finite()
            && self.encoder_k.params.all_finite()
            && self.projector_k.params.all_finite()
            && self.decoder.params.all_finite()
    }
}

#[cfg(test)]
mod tests;
