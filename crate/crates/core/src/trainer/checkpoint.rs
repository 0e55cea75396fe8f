//! Binary checkpoints: magic, version, JSON metadata, then named f32
//! tensors. Writes go to a temporary file that is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KeyQueue, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::nets::ParamSet;
use crate::perturb::RingStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SYNPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub step: u64,
    pub epoch: u64,
    pub decoder_pretrained: bool,
    /// Digest of the network shapes.
    pub model_hash: String,
    /// Digest of the full training configuration.
    pub config_hash: String,
    pub queue_cursor: usize,
    pub queue_fill: usize,
    pub bank_cursor: usize,
    pub bank_fill: usize,
}

pub(crate) fn digest(text: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl TrainConfig {
    pub fn model_hash(&self) -> String {
        digest(&format!("{:?}", self.model))
    }

    pub fn config_hash(&self) -> String {
        digest(&format!("{self:?}"))
    }
}

fn put_params(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, params: &ParamSet<f32>) {
    for p in params.iter() {
        out.push((format!("{prefix}/{}", p.name), p.value.clone()));
    }
}

fn put_velocity(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, params: &ParamSet<f32>, state: &[Tensor<f32>]) {
    for (p, v) in params.iter().zip(state) {
        out.push((format!("opt/{prefix}/{}", p.name), v.clone()));
    }
}

fn tensors_of(state: &TrainState) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    put_params(&mut out, "encoder_q", &state.encoder_q.params);
    put_params(&mut out, "projector_q", &state.projector_q.params);
    put_params(&mut out, "encoder_k", &state.encoder_k.params);
    put_params(&mut out, "projector_k", &state.projector_k.params);
    put_params(&mut out, "decoder", &state.decoder.params);
    put_velocity(&mut out, "encoder_q", &state.encoder_q.params, state.opt_encoder.state());
    put_velocity(&mut out, "projector_q", &state.projector_q.params, state.opt_projector.state());
    put_velocity(&mut out, "decoder", &state.decoder.params, state.opt_decoder.state());
    out.push(("queue".into(), state.queue.ring().storage()));
    out.push(("bank".into(), state.bank.storage()));
    out
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn save_checkpoint(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<CheckpointMeta> {
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        step: state.step,
        epoch: state.epoch,
        decoder_pretrained: state.decoder_pretrained,
        model_hash: cfg.model_hash(),
        config_hash: cfg.config_hash(),
        queue_cursor: state.queue.ring().cursor(),
        queue_fill: state.queue.fill(),
        bank_cursor: state.bank.cursor(),
        bank_fill: state.bank.fill(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        write_u32(&mut w, CHECKPOINT_VERSION)?;
        let json = serde_json::to_vec(&meta).map_err(std::io::Error::other)?;
        write_u64(&mut w, json.len() as u64)?;
        w.write_all(&json)?;
        let tensors = tensors_of(state);
        write_u64(&mut w, tensors.len() as u64)?;
        for (name, t) in &tensors {
            write_u32(&mut w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            write_u32(&mut w, t.rank() as u32)?;
            for &d in t.shape() {
                write_u64(&mut w, d as u64)?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(meta)
}

fn read_exact<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_file(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, Tensor<f32>>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let corrupt = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    let io = |e: std::io::Error| Error::Checkpoint(format!("{}: truncated or unreadable ({e})", path.display()));
    if &read_exact::<8>(&mut r).map_err(io)? != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(read_exact(&mut r).map_err(io)?);
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io)?;
    let meta: CheckpointMeta = serde_json::from_slice(&json).map_err(|e| corrupt(&format!("metadata: {e}")))?;
    let count = u64::from_le_bytes(read_exact(&mut r).map_err(io)?);
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = u32::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let rank = u32::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(io)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        tensors.insert(name, Tensor::from_vec(&shape, data)?);
    }
    Ok((meta, tensors))
}

fn take(tensors: &mut BTreeMap<String, Tensor<f32>>, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing")))?;
    if t.shape() != shape {
        return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t)
}

fn load_params(tensors: &mut BTreeMap<String, Tensor<f32>>, prefix: &str, params: &mut ParamSet<f32>) -> Result<()> {
    for p in params.iter_mut() {
        p.value = take(tensors, &format!("{prefix}/{}", p.name), p.value.shape())?;
    }
    Ok(())
}

fn load_velocity(tensors: &mut BTreeMap<String, Tensor<f32>>, prefix: &str, params: &ParamSet<f32>) -> Result<Vec<Tensor<f32>>> {
    params
        .iter()
        .map(|p| take(tensors, &format!("opt/{prefix}/{}", p.name), p.value.shape()))
        .collect()
}

/// Restore a state saved with a configuration of the same network shapes.
pub fn load_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<(TrainState, CheckpointMeta)> {
    let (meta, mut t) = read_file(path)?;
    if meta.model_hash != cfg.model_hash() {
        return Err(Error::Checkpoint(format!(
            "{} was written for different network shapes",
            path.display()
        )));
    }
    let mut s = TrainState::new(cfg)?;
    load_params(&mut t, "encoder_q", &mut s.encoder_q.params)?;
    load_params(&mut t, "projector_q", &mut s.projector_q.params)?;
    load_params(&mut t, "encoder_k", &mut s.encoder_k.params)?;
    load_params(&mut t, "projector_k", &mut s.projector_k.params)?;
    load_params(&mut t, "decoder", &mut s.decoder.params)?;
    s.opt_encoder.load_state(load_velocity(&mut t, "encoder_q", &s.encoder_q.params)?)?;
    s.opt_projector.load_state(load_velocity(&mut t, "projector_q", &s.projector_q.params)?)?;
    s.opt_decoder.load_state(load_velocity(&mut t, "decoder", &s.decoder.params)?)?;
    let queue_shape = s.queue.ring().storage().shape().to_vec();
    let queue = take(&mut t, "queue", &queue_shape)?;
    s.queue = KeyQueue::from_ring(RingStore::from_parts(queue, meta.queue_cursor, meta.queue_fill)?);
    let bank_shape = s.bank.storage().shape().to_vec();
    let bank = take(&mut t, "bank", &bank_shape)?;
    s.bank = RingStore::from_parts(bank, meta.bank_cursor, meta.bank_fill)?;
    if let Some(extra) = t.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    s.step = meta.step;
    s.epoch = meta.epoch;
    s.decoder_pretrained = meta.decoder_pretrained;
    if !s.all_finite() {
        return Err(Error::NonFinite(format!("parameters loaded from {}", path.display())));
    }
    Ok((s, meta))
}
