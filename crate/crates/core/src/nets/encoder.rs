use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

use super::{ensure_finite, kaiming_normal, Bound, Mode, NormIdx, ParamKind, ParamSet};

/// Stack of `conv3x3/stride2 -> batch norm -> ReLU` blocks followed by global
/// average pooling. The feature width is the last block's channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: vec![16, 32, 64, 128],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv: usize,
    norm: NormIdx,
}

#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub params: ParamSet<T>,
    blocks: Vec<Block>,
}

/// Tape handles produced by one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// Pooled features `[B, n]`.
    pub features: Var,
    /// Activation map of the last block `[B, C, h, w]`, before pooling.
    pub last_map: Var,
}

impl<T: Real> Encoder<T> {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        if config.in_channels == 0 || config.channels.is_empty() || config.channels.contains(&0) {
            return Err(Error::Config(format!("invalid encoder channels {:?}", config.channels)));
        }
        let mut params = ParamSet::new();
        let mut blocks = Vec::new();
        let mut cin = config.in_channels;
        for (i, &cout) in config.channels.iter().enumerate() {
            let w = kaiming_normal(&[cout, cin, 3, 3], cout * 9, rng);
            let conv = params.push(format!("block{i}.conv.weight"), w, ParamKind::Trainable);
            let norm = NormIdx::register(&mut params, &format!("block{i}.bn"), cout);
            blocks.push(Block { conv, norm });
            cin = cout;
        }
        Ok(Self {
            config,
            params,
            blocks,
        })
    }

    pub fn feature_dim(&self) -> usize {
        *self.config.channels.last().expect("validated non-empty")
    }

    /// Input side length must survive one halving per block.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::shape(
                "encode",
                format!(
                    "expected [B, {}, H, W] input, got {shape:?}",
                    self.config.in_channels
                ),
            ));
        }
        Ok(())
    }

    /// Run the encoder on the tape. Batch-statistics modes normalize within
    /// `groups` contiguous sample groups when the batch divides evenly.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
        groups: usize,
    ) -> Result<EncoderOutput> {
        self.check_input(tape.value(x).shape())?;
        let mut h = x;
        for block in &self.blocks {
            h = tape.conv2d(h, bound.var(block.conv), None, 2, 1)?;
            h = block.norm.forward(tape, h, bound, &mut self.params, mode, groups)?;
            h = tape.relu(h);
        }
        let features = tape.avg_pool(h)?;
        ensure_finite(tape.value(features), "encoder features")?;
        Ok(EncoderOutput {
            features,
            last_map: h,
        })
    }

    /// Encode a batch of images `[B, C, H, W]` into features `[B, n]`
    /// without recording gradients. Large batches are processed in chunks
    /// in `Eval` mode, where chunking does not change the result.
    pub fn encode(&mut self, images: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(images.shape())?;
        let b = images.dim(0);
        let chunk = if mode == Mode::Eval { 256 } else { b.max(1) };
        let mut out = Vec::with_capacity(b * self.feature_dim());
        let mut start = 0;
        while start < b {
            let end = (start + chunk).min(b);
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let x = tape.constant(images.slice_outer(start, end));
            let y = self.forward(&mut tape, &bound, x, mode, 1)?;
            out.extend_from_slice(tape.value(y.features).data());
            start = end;
        }
        Tensor::from_vec(&[b, self.feature_dim()], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn images(b: usize, side: usize) -> Tensor<f32> {
        let n = b * 3 * side * side;
        Tensor::from_vec(&[b, 3, side, side], (0..n).map(|i| ((i * 37 % 101) as f32) / 100.0).collect()).unwrap()
    }

    #[test]
    fn feature_shape_and_finiteness() {
        let mut enc = Encoder::<f32>::new(EncoderConfig::default(), &mut stream(0, Stream::Init, &[])).unwrap();
        let f = enc.encode(&images(4, 64), Mode::Train).unwrap();
        assert_eq!(f.shape(), &[4, 128]);
        assert!(f.all_finite());
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut enc = Encoder::<f32>::new(EncoderConfig::default(), &mut stream(0, Stream::Init, &[])).unwrap();
        let bad = Tensor::zeros(&[2, 1, 64, 64]);
        assert!(matches!(enc.encode(&bad, Mode::Eval), Err(Error::Shape { .. })));
    }

    #[test]
    fn eval_mode_is_per_sample() {
        let mut enc = Encoder::<f32>::new(EncoderConfig::default(), &mut stream(1, Stream::Init, &[])).unwrap();
        let x = images(3, 32);
        let all = enc.encode(&x, Mode::Eval).unwrap();
        let one = enc.encode(&x.slice_outer(1, 2), Mode::Eval).unwrap();
        assert!(all.slice_outer(1, 2).max_abs_diff(&one) < 1e-5);
    }

    #[test]
    fn train_mode_updates_running_stats_only_in_train() {
        let mut enc = Encoder::<f32>::new(EncoderConfig::default(), &mut stream(2, Stream::Init, &[])).unwrap();
        let before = enc.params.clone();
        enc.encode(&images(4, 32), Mode::Batch).unwrap();
        assert_eq!(enc.params, before);
        enc.encode(&images(4, 32), Mode::Train).unwrap();
        assert_ne!(enc.params, before);
    }
}
