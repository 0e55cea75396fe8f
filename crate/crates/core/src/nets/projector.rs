use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

use super::{ensure_finite, l2_normalize, uniform_fan_in, Bound, ParamKind, ParamSet};

/// Widths of the projection MLP, input first. `[128, 128, 64]` is
/// `Linear(128,128) -> ReLU -> Linear(128,64)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorConfig {
    pub dims: Vec<usize>,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            dims: vec![128, 128, 64],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Projector<T> {
    pub config: ProjectorConfig,
    pub params: ParamSet<T>,
    layers: Vec<(usize, usize)>,
}

impl<T: Real> Projector<T> {
    pub fn new(config: ProjectorConfig, rng: &mut Rng) -> Result<Self> {
        if config.dims.len() < 2 || config.dims.contains(&0) {
            return Err(Error::Config(format!("invalid projector dims {:?}", config.dims)));
        }
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        for (i, pair) in config.dims.windows(2).enumerate() {
            let (fin, fout) = (pair[0], pair[1]);
            let w = params.push(format!("fc{i}.weight"), uniform_fan_in(&[fout, fin], fin, rng), ParamKind::Trainable);
            let b = params.push(format!("fc{i}.bias"), uniform_fan_in(&[fout], fin, rng), ParamKind::Trainable);
            layers.push((w, b));
        }
        Ok(Self {
            config,
            params,
            layers,
        })
    }

    /// A single linear layer with identity weights and zero bias.
    pub fn identity(n: usize) -> Self {
        let mut params = ParamSet::new();
        let mut eye = Tensor::zeros(&[n, n]);
        for i in 0..n {
            eye.data_mut()[i * n + i] = T::one();
        }
        let w = params.push("fc0.weight", eye, ParamKind::Trainable);
        let b = params.push("fc0.bias", Tensor::zeros(&[n]), ParamKind::Trainable);
        Self {
            config: ProjectorConfig { dims: vec![n, n] },
            params,
            layers: vec![(w, b)],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.config.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.config.dims.last().expect("validated")
    }

    /// Project features `[B, n]` to L2-normalized representations `[B, k]`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, features: Var) -> Result<Var> {
        let shape = tape.value(features).shape();
        if shape.len() != 2 || shape[1] != self.in_dim() {
            return Err(Error::shape(
                "project",
                format!("expected [B, {}] features, got {shape:?}", self.in_dim()),
            ));
        }
        let mut h = features;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.linear(h, bound.var(w), Some(bound.var(b)))?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        let z = l2_normalize(tape, h)?;
        ensure_finite(tape.value(z), "projection")?;
        Ok(z)
    }

    pub fn project(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(features.clone());
        let z = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(z).clone())
    }
}
