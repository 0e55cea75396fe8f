use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::datagen::{augment, save_png};
use crate::error::{Error, Result};
use crate::nets::Mode;
use crate::perturb::{perturb_sample, DispersionScores};
use crate::rng::{stream, Stream};
use crate::saliency::{feature_scores, min_max_normalize, spatial_attention_maps};
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, TrainState};

const GUTTER: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExportSummary {
    pub files: Vec<PathBuf>,
    /// Mean per-pixel `|x_hat - x_hat_p|` (pairs only).
    pub mean_abs_diff: f64,
}

/// Lay planar `[3, S, S]` panels side by side with white gutters.
fn row_of_panels(panels: &[&[f32]], size: usize) -> (Vec<f32>, usize) {
    let width = panels.len() * size + (panels.len().saturating_sub(1)) * GUTTER;
    let mut out = vec![1.0f32; 3 * size * width];
    for (p, panel) in panels.iter().enumerate() {
        let x0 = p * (size + GUTTER);
        for c in 0..3 {
            for y in 0..size {
                let src = &panel[c * size * size + y * size..c * size * size + (y + 1) * size];
                let dst = c * size * width + y * width + x0;
                out[dst..dst + size].copy_from_slice(src);
            }
        }
    }
    (out, width)
}

fn check_images(images: &Tensor<f32>) -> Result<usize> {
    if images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != images.dim(3) {
        return Err(Error::shape("export", format!("expected [N, 3, S, S], got {:?}", images.shape())));
    }
    if images.dim(0) < 2 {
        return Err(Error::InvalidArgument("export needs at least two images".into()));
    }
    Ok(images.dim(2))
}

/// Second views for the saliency pass, keyed by the export seed.
fn second_views(images: &Tensor<f32>, cfg: &TrainConfig) -> Result<Tensor<f32>> {
    let size = images.dim(2);
    let mut data = Vec::with_capacity(images.len());
    for i in 0..images.dim(0) {
        let item = images.slice_outer(i, i + 1);
        data.extend(augment(item.data(), size, &cfg.augment, &mut stream(cfg.seed, Stream::Export, &[i as u64])));
    }
    Tensor::from_vec(images.shape(), data)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// For each input write `pair_NNN.png`: original, reconstruction and the
/// reconstruction of the perturbed features, side by side.
pub fn export_pairs(state: &TrainState, images: &Tensor<f32>, cfg: &TrainConfig, out_dir: &Path) -> Result<ExportSummary> {
    let size = check_images(images)?;
    if !state.decoder_pretrained && state.step == 0 {
        return Err(Error::Checkpoint("checkpoint holds no trained decoder parameters".into()));
    }
    cfg.noise.validate()?;
    let mut encoder = state.encoder_q.clone();
    let mut decoder = state.decoder.clone();
    let v = encoder.encode(images, Mode::Eval)?;
    let eta = if cfg.noise.mode.uses_gradcam() {
        let v2 = encoder.encode(&second_views(images, cfg)?, Mode::Eval)?;
        let z2 = state.projector_q.project(&v2)?;
        Some(feature_scores(&state.projector_q, &v, &z2, &cfg.contrastive)?)
    } else {
        None
    };
    let dispersion = if cfg.noise.mode.uses_dispersion() && state.bank.fill() >= 2 {
        Some(DispersionScores::from_bank(&state.bank)?)
    } else {
        None
    };
    let (b, n) = (v.dim(0), v.dim(1));
    let mut rng = stream(cfg.seed, Stream::Export, &[u64::MAX]);
    let mut vp = Vec::with_capacity(b * n);
    for i in 0..b {
        let row: Vec<f64> = v.row(i).iter().map(|&x| x as f64).collect();
        let eta_bar = match &eta {
            Some(e) => Some(min_max_normalize(e.row(i))?),
            None => None,
        };
        let p = perturb_sample(&row, eta_bar.as_deref(), dispersion.as_ref(), &cfg.noise, &mut rng)?;
        vp.extend(p.into_iter().map(|x| x as f32));
    }
    let vp = Tensor::from_vec(&[b, n], vp)?;
    // Separate calls with equal shapes, so equal features decode to equal
    // pixels.
    let x_hat = decoder.decode(&v, Mode::Eval)?;
    let x_hat_p = decoder.decode(&vp, Mode::Eval)?;
    if x_hat.shape() != images.shape() {
        return Err(Error::shape("export", "decoder output does not match the input size"));
    }

    prepare_dir(out_dir)?;
    let mut files = Vec::with_capacity(b);
    for i in 0..b {
        let (orig, rec, pert) = (images.slice_outer(i, i + 1), x_hat.slice_outer(i, i + 1), x_hat_p.slice_outer(i, i + 1));
        let (grid, width) = row_of_panels(&[orig.data(), rec.data(), pert.data()], size);
        let path = out_dir.join(format!("pair_{i:03}.png"));
        save_png(&path, &grid, size, width)?;
        files.push(path);
    }
    let diff = x_hat.data().iter().zip(x_hat_p.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
    Ok(ExportSummary {
        files,
        mean_abs_diff: diff / x_hat.len() as f64,
    })
}

fn heat_color(t: f64) -> [f32; 3] {
    let ch = |c: f64| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0) as f32;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// For each input write `attention_NNN.png`: original, spatial attention
/// heat map and their blend.
pub fn export_attention(state: &TrainState, images: &Tensor<f32>, cfg: &TrainConfig, out_dir: &Path) -> Result<ExportSummary> {
    let size = check_images(images)?;
    let mut encoder = state.encoder_q.clone();
    let maps = spatial_attention_maps(
        &mut encoder,
        &state.projector_q,
        images,
        &second_views(images, cfg)?,
        Mode::Eval,
        &cfg.contrastive,
    )?;
    prepare_dir(out_dir)?;
    let plane = size * size;
    let mut files = Vec::with_capacity(maps.len());
    for (i, map) in maps.iter().enumerate() {
        let orig = images.slice_outer(i, i + 1);
        let mut heat = vec![0.0f32; 3 * plane];
        let mut blend = vec![0.0f32; 3 * plane];
        for (p, &t) in map.data().iter().enumerate() {
            let col = heat_color(t);
            for c in 0..3 {
                heat[c * plane + p] = col[c];
                blend[c * plane + p] = 0.5 * orig.data()[c * plane + p] + 0.5 * col[c];
            }
        }
        let (grid, width) = row_of_panels(&[orig.data(), &heat, &blend], size);
        let path = out_dir.join(format!("attention_{i:03}.png"));
        save_png(&path, &grid, size, width)?;
        files.push(path);
    }
    Ok(ExportSummary {
        files,
        mean_abs_diff: 0.0,
    })
}
