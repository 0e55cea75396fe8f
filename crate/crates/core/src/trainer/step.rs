use rand::seq::SliceRandom;

use super::{TrainConfig, TrainState};
use crate::datagen::{make_views, Dataset};
use crate::error::{Error, Result};
use crate::losses::{half_pairing, info_nce_batch, info_nce_queue, recon_loss, total_loss};
use crate::nets::{momentum_update, Bound, Mode};
use crate::perturb::{perturb_sample, DispersionScores};
use crate::rng::{stream, Stream};
use crate::saliency::{feature_scores, min_max_normalize};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

/// Source images and their two augmented views, each `[B, 3, S, S]`.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub x: Tensor<f32>,
    pub x1: Tensor<f32>,
    pub x2: Tensor<f32>,
}

impl StepBatch {
    /// Views for dataset items; augmentation randomness is keyed by
    /// `(seed, epoch, item)`.
    pub fn from_items(ds: &Dataset, items: &[usize], cfg: &TrainConfig, epoch: u64) -> Result<Self> {
        let s = ds.image_size;
        let mut x = Vec::with_capacity(items.len() * ds.item_len());
        let mut x1 = Vec::with_capacity(x.capacity());
        let mut x2 = Vec::with_capacity(x.capacity());
        for &i in items {
            let mut rng = stream(cfg.seed, Stream::Augment, &[epoch, i as u64]);
            let v = make_views(ds.image(i), s, &cfg.augment, &mut rng)?;
            x.extend_from_slice(&v.source);
            x1.extend_from_slice(&v.view1);
            x2.extend_from_slice(&v.view2);
        }
        let shape = [items.len(), 3, s, s];
        Ok(Self {
            x: Tensor::from_vec(&shape, x)?,
            x1: Tensor::from_vec(&shape, x1)?,
            x2: Tensor::from_vec(&shape, x2)?,
        })
    }

    pub fn len(&self) -> usize {
        self.x.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss values of one step; skipped terms are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub loss_c: f64,
    pub loss_r: f64,
    pub loss_cp: f64,
    pub total: f64,
}

/// Gradient L2 norms of each loss term with respect to each network.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradientProbe {
    pub contrastive_query: f64,
    pub contrastive_key: f64,
    pub recon_encoder: f64,
    pub recon_decoder: f64,
    pub pair_encoder: f64,
    pub pair_decoder: f64,
}

struct Bindings {
    enc_q: Bound,
    proj_q: Bound,
    enc_k: Bound,
    proj_k: Bound,
    dec: Bound,
}

struct StepGraph {
    tape: Tape<f32>,
    bind: Bindings,
    lc: Var,
    lr: Option<Var>,
    lcp: Option<Var>,
    total: Var,
}

fn permutation(n: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut stream(seed, Stream::Shuffle, &[step, 1]));
    p
}

/// Keys from the momentum networks. The batch is permuted before the
/// grouped normalization and restored afterwards, so key and query groups
/// hold different samples.
fn key_forward(state: &mut TrainState, cfg: &TrainConfig, tape: &mut Tape<f32>, bind: &Bindings, x2: &Tensor<f32>) -> Result<Var> {
    let b = x2.dim(0);
    let perm = permutation(b, cfg.seed, state.step);
    let mut inverse = vec![0; b];
    for (pos, &i) in perm.iter().enumerate() {
        inverse[i] = pos;
    }
    let xs = tape.constant(x2.select_outer(&perm));
    let out = state.encoder_k.forward(tape, &bind.enc_k, xs, Mode::Train, cfg.bn_groups)?;
    let k = state.projector_k.forward(tape, &bind.proj_k, out.features)?;
    let k = tape.select_rows(k, &inverse)?;
    Ok(tape.detach(k))
}

fn build(state: &mut TrainState, cfg: &TrainConfig, batch: &StepBatch) -> Result<StepGraph> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!("batch of {b} is too small")));
    }
    momentum_update(&mut state.encoder_k.params, &state.encoder_q.params, cfg.key_momentum)?;
    momentum_update(&mut state.projector_k.params, &state.projector_q.params, cfg.key_momentum)?;

    let mut tape = Tape::new();
    let bind = Bindings {
        enc_q: state.encoder_q.params.bind(&mut tape, true),
        proj_q: state.projector_q.params.bind(&mut tape, true),
        enc_k: state.encoder_k.params.bind(&mut tape, true),
        proj_k: state.projector_k.params.bind(&mut tape, true),
        dec: state.decoder.params.bind(&mut tape, true),
    };

    // Contrastive term against the queue.
    let x1 = tape.constant(batch.x1.clone());
    let f1 = state.encoder_q.forward(&mut tape, &bind.enc_q, x1, Mode::Train, cfg.bn_groups)?;
    let q = state.projector_q.forward(&mut tape, &bind.proj_q, f1.features)?;
    let k = key_forward(state, cfg, &mut tape, &bind, &batch.x2)?;
    let negatives = state.queue.negatives();
    let lc = info_nce_queue(&mut tape, q, k, &negatives, &cfg.contrastive)?;
    let keys = tape.value(k).clone();
    state.queue.push(&keys)?;

    let (mut lr, mut lcp) = (None, None);
    if cfg.uses_decoder() {
        let x = tape.constant(batch.x.clone());
        let v = state.encoder_q.forward(&mut tape, &bind.enc_q, x, Mode::Batch, 1)?.features;
        let x_hat = state.decoder.forward(&mut tape, &bind.dec, v, Mode::Train)?;
        lr = Some(recon_loss(&mut tape, x, x_hat)?);
        let v_val = tape.value(v).clone();
        state.bank.push(&v_val)?;

        if cfg.weights.nu > 0.0 {
            let v_p = perturbed_features(state, cfg, &v_val, &batch.x2)?;
            let v_p = tape.constant(v_p);
            let x_p = state.decoder.forward(&mut tape, &bind.dec, v_p, Mode::Batch)?;
            let x_hat_d = tape.detach(x_hat);
            let x_p_d = tape.detach(x_p);
            let pair = tape.concat_rows(x_hat_d, x_p_d)?;
            // One normalization group: with contiguous groups every positive
            // would sit in the other group and group statistics would leak.
            let f = state.encoder_q.forward(&mut tape, &bind.enc_q, pair, Mode::Batch, 1)?;
            let z = state.projector_q.forward(&mut tape, &bind.proj_q, f.features)?;
            lcp = Some(info_nce_batch(&mut tape, z, &half_pairing(b), &cfg.contrastive)?);
        }
    }

    let total = total_loss(&mut tape, lc, lr, lcp, &cfg.weights)?;
    Ok(StepGraph {
        tape,
        bind,
        lc,
        lr,
        lcp,
        total,
    })
}

/// `v_p` for every sample: saliency from the query networks on the second
/// view, dispersion from the bank once it holds at least two batches.
fn perturbed_features(state: &mut TrainState, cfg: &TrainConfig, v: &Tensor<f32>, x2: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (b, n) = (v.dim(0), v.dim(1));
    let eta = if cfg.noise.mode.uses_gradcam() {
        let v2 = state.encoder_q.encode(x2, Mode::Batch)?;
        let z2 = state.projector_q.project(&v2)?;
        Some(feature_scores(&state.projector_q, v, &z2, &cfg.contrastive)?)
    } else {
        None
    };
    let dispersion = if cfg.noise.mode.uses_dispersion() && state.bank.fill() >= 2 * b {
        Some(DispersionScores::from_bank(&state.bank)?)
    } else {
        None
    };
    let mut rng = stream(cfg.seed, Stream::Noise, &[state.step]);
    let mut out = Vec::with_capacity(b * n);
    for i in 0..b {
        let row: Vec<f64> = v.row(i).iter().map(|&x| x as f64).collect();
        let eta_bar = match &eta {
            Some(e) => Some(min_max_normalize(e.row(i))?),
            None => None,
        };
        let vp = perturb_sample(&row, eta_bar.as_deref(), dispersion.as_ref(), &cfg.noise, &mut rng)?;
        out.extend(vp.into_iter().map(|x| x as f32));
    }
    Tensor::from_vec(&[b, n], out)
}

fn grad_norm(bound: &Bound, grads: &Grads<f32>) -> f64 {
    bound
        .grads(grads)
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// One optimization step: forward every term, back-propagate the weighted
/// total and update the query encoder, query projector and decoder.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, batch: &StepBatch, lr: f64) -> Result<StepLosses> {
    let g = build(state, cfg, batch)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| g.tape.value(v).item() as f64);
    let losses = StepLosses {
        loss_c: value(Some(g.lc)),
        loss_r: value(g.lr),
        loss_cp: value(g.lcp),
        total: value(Some(g.total)),
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!("total loss at step {}", state.step)));
    }
    let grads = g.tape.backward(g.total)?;
    state.opt_encoder.step(&mut state.encoder_q.params, &g.bind.enc_q.grads(&grads), lr)?;
    state.opt_projector.step(&mut state.projector_q.params, &g.bind.proj_q.grads(&grads), lr)?;
    if cfg.uses_decoder() {
        state.opt_decoder.step(&mut state.decoder.params, &g.bind.dec.grads(&grads), lr)?;
    }
    state.step += 1;
    Ok(losses)
}

/// Back-propagate each loss term separately on a copy of `state` and report
/// how much gradient reaches each network. `state` itself is unchanged.
pub fn probe_gradients(state: &TrainState, cfg: &TrainConfig, batch: &StepBatch) -> Result<GradientProbe> {
    let mut scratch = state.clone();
    let g = build(&mut scratch, cfg, batch)?;
    let mut probe = GradientProbe::default();
    let grads = g.tape.backward(g.lc)?;
    probe.contrastive_query = grad_norm(&g.bind.enc_q, &grads) + grad_norm(&g.bind.proj_q, &grads);
    probe.contrastive_key = grad_norm(&g.bind.enc_k, &grads) + grad_norm(&g.bind.proj_k, &grads);
    if let Some(lr) = g.lr {
        let grads = g.tape.backward(lr)?;
        probe.recon_encoder = grad_norm(&g.bind.enc_q, &grads);
        probe.recon_decoder = grad_norm(&g.bind.dec, &grads);
    }
    if let Some(lcp) = g.lcp {
        let grads = g.tape.backward(lcp)?;
        probe.pair_encoder = grad_norm(&g.bind.enc_q, &grads);
        probe.pair_decoder = grad_norm(&g.bind.dec, &grads);
    }
    Ok(probe)
}

/// Fill the placeholder rows of an empty key queue with keys of augmented
/// training images under the current key networks, so the first steps see
/// negatives drawn from the data rather than random directions.
pub fn warm_queue(state: &mut TrainState, cfg: &TrainConfig, ds: &Dataset, items: &[usize]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("no images to warm the key queue".into()));
    }
    let mut order = items.to_vec();
    order.shuffle(&mut stream(cfg.seed, Stream::Queue, &[1]));
    let cap = state.queue.capacity();
    let s = ds.image_size;
    let mut keys = Vec::with_capacity(cap * cfg.model.projector_dim);
    let mut start = 0;
    while start < cap {
        let end = (start + cfg.batch_size).min(cap);
        let mut views = Vec::with_capacity((end - start) * ds.item_len());
        for slot in start..end {
            let i = order[slot % order.len()];
            let mut rng = stream(cfg.seed, Stream::Queue, &[2, slot as u64]);
            views.extend_from_slice(&make_views(ds.image(i), s, &cfg.augment, &mut rng)?.view2);
        }
        let x = Tensor::from_vec(&[end - start, 3, s, s], views)?;
        let f = state.encoder_k.encode(&x, Mode::Batch)?;
        keys.extend_from_slice(state.projector_k.project(&f)?.data());
        start = end;
    }
    let rows = Tensor::from_vec(&[cap, cfg.model.projector_dim], keys)?;
    state.queue.replace_placeholders(&rows)
}
