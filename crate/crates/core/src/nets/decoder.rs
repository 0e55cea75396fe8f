use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

use super::{ensure_finite, kaiming_normal, uniform_fan_in, Bound, Mode, NormIdx, ParamKind, ParamSet};

/// Mirror of the encoder: a linear map to a small spatial grid, then
/// stride-2 transposed convolutions (kernel 4) doubling the side each time,
/// ending in a sigmoid so pixels land in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub feature_dim: usize,
    /// Channel width at each resolution, coarsest first.
    pub channels: Vec<usize>,
    pub out_channels: usize,
    pub image_size: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 128,
            channels: vec![128, 64, 32, 16],
            out_channels: 3,
            image_size: 64,
        }
    }
}

impl DecoderConfig {
    pub fn start_size(&self) -> Result<usize> {
        let up = 1usize << self.channels.len();
        if self.channels.is_empty() || self.image_size % up != 0 || self.image_size < up {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of 2^{}",
                self.image_size,
                self.channels.len()
            )));
        }
        Ok(self.image_size / up)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<T> {
    pub config: DecoderConfig,
    pub params: ParamSet<T>,
    fc: (usize, usize),
    fc_norm: NormIdx,
    ups: Vec<(usize, NormIdx)>,
    out: (usize, usize),
}

impl<T: Real> Decoder<T> {
    pub fn new(config: DecoderConfig, rng: &mut Rng) -> Result<Self> {
        if config.feature_dim == 0 || config.out_channels == 0 || config.channels.contains(&0) {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        let s0 = config.start_size()?;
        let c0 = config.channels[0];
        let n = config.feature_dim;
        let mut params = ParamSet::new();
        let fc_w = params.push("fc.weight", uniform_fan_in(&[c0 * s0 * s0, n], n, rng), ParamKind::Trainable);
        let fc_b = params.push("fc.bias", uniform_fan_in(&[c0 * s0 * s0], n, rng), ParamKind::Trainable);
        let fc_norm = NormIdx::register(&mut params, "fc.bn", c0);
        let mut ups = Vec::new();
        for (i, pair) in config.channels.windows(2).enumerate() {
            let (ci, co) = (pair[0], pair[1]);
            let w = params.push(format!("up{i}.weight"), kaiming_normal(&[ci, co, 4, 4], ci * 4, rng), ParamKind::Trainable);
            let norm = NormIdx::register(&mut params, &format!("up{i}.bn"), co);
            ups.push((w, norm));
        }
        let cl = *config.channels.last().expect("non-empty");
        let out_w = params.push(
            "out.weight",
            kaiming_normal(&[cl, config.out_channels, 4, 4], cl * 4, rng),
            ParamKind::Trainable,
        );
        let out_b = params.push("out.bias", Tensor::zeros(&[config.out_channels]), ParamKind::Trainable);
        Ok(Self {
            config,
            params,
            fc: (fc_w, fc_b),
            fc_norm,
            ups,
            out: (out_w, out_b),
        })
    }

    /// Reconstruct images `[B, C, S, S]` from features `[B, n]`.
    pub fn forward(&mut self, tape: &mut Tape<T>, bound: &Bound, features: Var, mode: Mode) -> Result<Var> {
        let fv = tape.value(features);
        if fv.rank() != 2 || fv.dim(1) != self.config.feature_dim {
            return Err(Error::shape(
                "decode",
                format!("expected [B, {}] features, got {:?}", self.config.feature_dim, fv.shape()),
            ));
        }
        ensure_finite(fv, "decoder input")?;
        let b = fv.dim(0);
        let s0 = self.config.start_size()?;
        let c0 = self.config.channels[0];
        let mut h = tape.linear(features, bound.var(self.fc.0), Some(bound.var(self.fc.1)))?;
        h = tape.reshape(h, &[b, c0, s0, s0])?;
        h = self.fc_norm.forward(tape, h, bound, &mut self.params, mode, 1)?;
        h = tape.relu(h);
        for &(w, norm) in &self.ups {
            h = tape.conv_transpose2d(h, bound.var(w), None, 2, 1)?;
            h = norm.forward(tape, h, bound, &mut self.params, mode, 1)?;
            h = tape.relu(h);
        }
        h = tape.conv_transpose2d(h, bound.var(self.out.0), Some(bound.var(self.out.1)), 2, 1)?;
        let y = tape.sigmoid(h);
        ensure_finite(tape.value(y), "decoder output")?;
        Ok(y)
    }

    /// Value-level decode without gradients.
    pub fn decode(&mut self, features: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(features.clone());
        let y = self.forward(&mut tape, &bound, x, mode)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn small() -> DecoderConfig {
        DecoderConfig {
            feature_dim: 8,
            channels: vec![8, 4],
            out_channels: 3,
            image_size: 16,
        }
    }

    #[test]
    fn default_output_shape_and_range() {
        let mut dec = Decoder::<f32>::new(DecoderConfig::default(), &mut stream(0, Stream::Init, &[])).unwrap();
        let f = Tensor::from_vec(&[2, 128], (0..256).map(|i| (i as f32 * 0.3).cos()).collect()).unwrap();
        let y = dec.decode(&f, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 3, 64, 64]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_non_finite_features() {
        let mut dec = Decoder::<f32>::new(small(), &mut stream(0, Stream::Init, &[])).unwrap();
        let mut f = Tensor::zeros(&[2, 8]);
        f.data_mut()[3] = f32::NAN;
        assert!(matches!(dec.decode(&f, Mode::Eval), Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_bad_image_size() {
        let cfg = DecoderConfig {
            image_size: 18,
            ..small()
        };
        assert!(Decoder::<f32>::new(cfg, &mut stream(0, Stream::Init, &[])).is_err());
    }
}
