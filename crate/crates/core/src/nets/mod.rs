//! Encoder, projection head and decoder, plus the parameter containers they
//! share with the optimizer, the momentum (key) copies and checkpoints.

mod decoder;
mod encoder;
mod projector;

pub use decoder::{Decoder, DecoderConfig};
pub use encoder::{Encoder, EncoderConfig, EncoderOutput};
pub use projector::{Projector, ProjectorConfig};

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Grads, Tape, Var};
use crate::tensor::{Real, Tensor};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;
const NORM_EPS: f64 = 1e-12;

/// How normalization layers behave during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics are left untouched.
    Batch,
    /// Running statistics. Deterministic per sample.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics; never receive gradients.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered named arrays belonging to one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> usize {
        self.entries.push(Param {
            name: name.into(),
            value,
            kind,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.entries[i]
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].value
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<&Param<T>> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.all_finite())
    }

    pub fn same_layout(&self, other: &ParamSet<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.value.shape() == b.value.shape())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                })
                .collect(),
        }
    }

    /// Put every trainable entry on the tape, as a leaf when `differentiable`
    /// and as a constant otherwise.
    pub fn bind(&self, tape: &mut Tape<T>, differentiable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|p| match p.kind {
                ParamKind::Buffer => None,
                ParamKind::Trainable if differentiable => Some(tape.leaf(p.value.clone())),
                ParamKind::Trainable => Some(tape.constant(p.value.clone())),
            })
            .collect();
        Bound { vars }
    }

    /// Copy values from `other`, which must share this layout.
    pub fn copy_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::shape("copy_from", "parameter layouts differ"));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.value.data_mut().copy_from_slice(b.value.data());
        }
        Ok(())
    }
}

/// Tape handles for one bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i].expect("parameter is a buffer and was not bound")
    }

    /// Gradient of each entry, aligned with the parameter set. Buffers and
    /// entries unreachable from the loss are `None`.
    pub fn grads<T: Real>(&self, grads: &Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}

/// `key = m * key + (1 - m) * query` over trainable entries. Buffers of the
/// key network are owned by its own forward passes and are left alone.
pub fn momentum_update<T: Real>(key: &mut ParamSet<T>, query: &ParamSet<T>, key_momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&key_momentum) {
        return Err(Error::InvalidArgument(format!(
            "key momentum {key_momentum} outside [0, 1]"
        )));
    }
    if !key.same_layout(query) {
        return Err(Error::shape("momentum_update", "key and query layouts differ"));
    }
    let m = T::of(key_momentum);
    let r = T::of(1.0 - key_momentum);
    for (k, q) in key.entries.iter_mut().zip(&query.entries) {
        if k.kind != ParamKind::Trainable {
            continue;
        }
        for (a, &b) in k.value.data_mut().iter_mut().zip(q.value.data()) {
            *a = m * *a + r * b;
        }
    }
    Ok(())
}

pub(crate) fn kaiming_normal<T: Real>(shape: &[usize], fan: usize, rng: &mut Rng) -> Tensor<T> {
    let std = (2.0 / fan as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape and data agree")
}

pub(crate) fn uniform_fan_in<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape and data agree")
}

/// Conv/BN parameter indices of one normalization layer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIdx {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

impl NormIdx {
    pub fn register<T: Real>(params: &mut ParamSet<T>, prefix: &str, ch: usize) -> Self {
        NormIdx {
            gamma: params.push(format!("{prefix}.gamma"), Tensor::full(&[ch], T::one()), ParamKind::Trainable),
            beta: params.push(format!("{prefix}.beta"), Tensor::zeros(&[ch]), ParamKind::Trainable),
            mean: params.push(format!("{prefix}.running_mean"), Tensor::zeros(&[ch]), ParamKind::Buffer),
            var: params.push(format!("{prefix}.running_var"), Tensor::full(&[ch], T::one()), ParamKind::Buffer),
        }
    }

    /// Apply the normalization on the tape. In `Train` mode the running
    /// statistics in `params` are updated.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        bound: &Bound,
        params: &mut ParamSet<T>,
        mode: Mode,
        groups: usize,
    ) -> Result<Var> {
        let (g, b) = (bound.var(self.gamma), bound.var(self.beta));
        match mode {
            Mode::Eval => {
                let mean = params.value(self.mean).data().to_vec();
                let var = params.value(self.var).data().to_vec();
                tape.batch_norm_eval(x, g, b, &mean, &var, T::of(BN_EPS))
            }
            Mode::Train | Mode::Batch => {
                let batch = tape.value(x).dim(0);
                let groups = if groups > 0 && batch % groups == 0 && batch / groups >= 2 {
                    groups
                } else {
                    1
                };
                let (y, stats) = tape.batch_norm(x, g, b, groups, T::of(BN_EPS))?;
                if mode == Mode::Train {
                    let mom = T::of(BN_MOMENTUM);
                    let keep = T::one() - mom;
                    for (r, s) in params.value_mut(self.mean).data_mut().iter_mut().zip(&stats.mean) {
                        *r = keep * *r + mom * *s;
                    }
                    for (r, s) in params.value_mut(self.var).data_mut().iter_mut().zip(&stats.var) {
                        *r = keep * *r + mom * *s;
                    }
                }
                Ok(y)
            }
        }
    }
}

pub(crate) fn l2_normalize<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.l2_normalize_rows(x, T::of(NORM_EPS))
}

pub(crate) fn ensure_finite<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if let Some(pos) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} (element {pos} of shape {:?})", t.shape())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(v), ParamKind::Trainable);
        p.push("running_mean", Tensor::scalar(5.0), ParamKind::Buffer);
        p
    }

    #[test]
    fn momentum_one_keeps_key() {
        let mut key = scalar_set(1.0);
        momentum_update(&mut key, &scalar_set(0.0), 1.0).unwrap();
        assert_eq!(key.value(0).item(), 1.0);
    }

    #[test]
    fn momentum_zero_copies_query() {
        let mut key = scalar_set(1.0);
        momentum_update(&mut key, &scalar_set(0.25), 0.0).unwrap();
        assert_eq!(key.value(0).item(), 0.25);
    }

    #[test]
    fn momentum_default_value() {
        let mut key = scalar_set(1.0);
        let query = scalar_set(0.0);
        momentum_update(&mut key, &query, 0.999).unwrap();
        assert!((key.value(0).item() - 0.999).abs() < 1e-12);
        // Query untouched; buffers never blended.
        assert_eq!(query.value(0).item(), 0.0);
        assert_eq!(key.value(1).item(), 5.0);
    }

    #[test]
    fn momentum_rejects_mismatch_and_range() {
        let mut key = scalar_set(1.0);
        let mut other = ParamSet::new();
        other.push("w", Tensor::zeros(&[2]), ParamKind::Trainable);
        assert!(momentum_update(&mut key, &other, 0.5).is_err());
        assert!(momentum_update(&mut key, &scalar_set(0.0), 1.5).is_err());
    }

    #[test]
    fn momentum_matches_closed_form_ema() {
        // key_T = m^T key_0 + (1 - m) Σ_{t<T} m^{T-1-t} q_t
        let m = 0.9;
        let queries: Vec<f64> = (0..25).map(|t| (t as f64 * 0.3).sin()).collect();
        let mut key = scalar_set(2.0);
        for &q in &queries {
            momentum_update(&mut key, &scalar_set(q), m).unwrap();
        }
        let t = queries.len() as i32;
        let mut closed = m.powi(t) * 2.0;
        for (i, &q) in queries.iter().enumerate() {
            closed += (1.0 - m) * m.powi(t - 1 - i as i32) * q;
        }
        assert!((key.value(0).item() - closed).abs() < 1e-12);
    }
}

#[cfg(test)]
mod grad_tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn fill(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, Stream::Probe, &[]);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Relative error of the tape gradient of `loss(params)` against
    /// central differences with step 1e-3, over every trainable entry.
    fn check(params: &mut ParamSet<f64>, loss: &mut dyn FnMut(&mut Tape<f64>, &Bound, &ParamSet<f64>) -> Var) -> f64 {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let l = loss(&mut tape, &bound, params);
        let grads = bound.grads(&tape.backward(l).unwrap());
        let h = 1e-3;
        let (mut diff, mut norm) = (0.0, 0.0);
        for i in 0..params.len() {
            if params.get(i).kind != ParamKind::Trainable {
                continue;
            }
            for j in 0..params.value(i).len() {
                let orig = params.value(i).data()[j];
                let mut eval = |v: f64, params: &mut ParamSet<f64>| {
                    params.value_mut(i).data_mut()[j] = v;
                    let mut t = Tape::new();
                    let b = params.bind(&mut t, false);
                    let l = loss(&mut t, &b, params);
                    t.value(l).item()
                };
                let fd = (eval(orig + h, params) - eval(orig - h, params)) / (2.0 * h);
                params.value_mut(i).data_mut()[j] = orig;
                let ad = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
                diff += (ad - fd).powi(2);
                norm += fd * fd;
            }
        }
        diff.sqrt() / norm.sqrt().max(1e-12)
    }

    #[test]
    fn encoder_and_projector_probe_gradients() {
        let cfg = EncoderConfig {
            in_channels: 3,
            channels: vec![3, 4],
        };
        let mut enc = Encoder::<f64>::new(cfg, &mut stream(1, Stream::Init, &[])).unwrap();
        let x = fill(&[3, 3, 8, 8], 2);
        let r = fill(&[3, 4], 3);
        let mut params = enc.params.clone();
        let err = check(&mut params, &mut |t, b, p| {
            enc.params = p.clone();
            let xv = t.constant(x.clone());
            let y = enc.forward(t, b, xv, Mode::Batch, 1).unwrap();
            let rv = t.constant(r.clone());
            let m = t.mul(y.features, rv).unwrap();
            t.sum_all(m)
        });
        assert!(err < 1e-3, "encoder {err}");

        let proj = Projector::<f64>::new(ProjectorConfig { dims: vec![4, 4, 3] }, &mut stream(4, Stream::Init, &[])).unwrap();
        let f = fill(&[3, 4], 5);
        let r = fill(&[3, 3], 6);
        let mut params = proj.params.clone();
        let err = check(&mut params, &mut |t, b, _| {
            let fv = t.constant(f.clone());
            let z = proj.forward(t, b, fv).unwrap();
            let rv = t.constant(r.clone());
            let m = t.mul(z, rv).unwrap();
            t.sum_all(m)
        });
        assert!(err < 1e-3, "projector {err}");
    }

    #[test]
    fn decoder_probe_gradients() {
        let cfg = DecoderConfig {
            feature_dim: 3,
            channels: vec![4, 2],
            out_channels: 3,
            image_size: 8,
        };
        let mut dec = Decoder::<f64>::new(cfg, &mut stream(7, Stream::Init, &[])).unwrap();
        let f = fill(&[2, 3], 8);
        let mut params = dec.params.clone();
        let err = check(&mut params, &mut |t, b, p| {
            dec.params = p.clone();
            let fv = t.constant(f.clone());
            let y = dec.forward(t, b, fv, Mode::Batch).unwrap();
            t.mean_all(y)
        });
        assert!(err < 1e-3, "decoder {err}");
    }
}
