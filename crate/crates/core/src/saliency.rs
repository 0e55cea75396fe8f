//! Gradient-weighted saliency of feature dimensions and of the last
//! convolutional activation map, both driven by the two-view contrastive
//! loss.

use crate::error::{Error, Result};
use crate::losses::{half_pairing, info_nce_batch, ContrastiveConfig};
use crate::nets::{Encoder, Mode, Projector};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

/// Rescale to `[0, 1]` by `(v - min) / (max - min)`. Constant input maps to
/// all zeros.
pub fn min_max_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("min-max normalization of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("min-max normalization input".into()));
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range <= 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    Ok(v.iter().map(|x| ((x - lo) / range).clamp(0.0, 1.0)).collect())
}

/// `ReLU(grad_i * v_i)`.
pub fn eta_from_gradient(grad: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if grad.len() != v.len() {
        return Err(Error::shape("saliency", format!("gradient {} vs features {}", grad.len(), v.len())));
    }
    Ok(grad.iter().zip(v).map(|(g, x)| (g * x).max(0.0)).collect())
}

/// Gradient of the two-view batch contrastive loss with respect to the
/// features `v` (`[B, n]`), where the second view's projections `z2` are
/// fixed. Runs on its own tape; nothing here touches parameter gradients.
pub fn feature_gradients<T: Real>(
    projector: &Projector<T>,
    v: &Tensor<T>,
    z2: &Tensor<T>,
    cfg: &ContrastiveConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = projector.params.bind(&mut tape, false);
    let vv = tape.leaf(v.clone());
    let z = projector.forward(&mut tape, &bound, vv)?;
    let z2v = tape.constant(z2.clone());
    if tape.value(z).shape() != z2.shape() {
        return Err(Error::shape("saliency", format!("views {:?} vs {:?}", tape.value(z).shape(), z2.shape())));
    }
    let reps = tape.concat_rows(z, z2v)?;
    let loss = info_nce_batch(&mut tape, reps, &half_pairing(v.dim(0)), cfg)?;
    let mut grads = tape.backward(loss)?;
    grads
        .take(vv)
        .ok_or_else(|| Error::InvalidArgument("feature gradient unavailable".into()))
}

/// Per-sample saliency `eta` (`[B, n]`) from features and fixed second-view
/// projections.
pub fn feature_scores<T: Real>(
    projector: &Projector<T>,
    v: &Tensor<T>,
    z2: &Tensor<T>,
    cfg: &ContrastiveConfig,
) -> Result<Tensor<f64>> {
    let g = feature_gradients(projector, v, z2, cfg)?;
    let eta: Vec<f64> = g
        .data()
        .iter()
        .zip(v.data())
        .map(|(g, x)| (g.as_f64() * x.as_f64()).max(0.0))
        .collect();
    Tensor::from_vec(v.shape(), eta)
}

/// Saliency of each feature dimension for a batch of images and their
/// second views. `mode` must not be `Train`, so parameters and running
/// statistics are left untouched.
pub fn gradcam_feature_scores<T: Real>(
    encoder: &mut Encoder<T>,
    projector: &Projector<T>,
    x: &Tensor<T>,
    x2: &Tensor<T>,
    mode: Mode,
    cfg: &ContrastiveConfig,
) -> Result<Tensor<f64>> {
    if mode == Mode::Train {
        return Err(Error::InvalidArgument("saliency pass must not update running statistics".into()));
    }
    let v = encoder.encode(x, mode)?;
    let v2 = encoder.encode(x2, mode)?;
    let z2 = projector.project(&v2)?;
    feature_scores(projector, &v, &z2, cfg)
}

/// Bilinear resize of an `h x w` map (half-pixel centers).
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_h * out_w];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[oy * out_w + ox] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Classic Grad-CAM map for one sample: channel weights are the spatial
/// mean of the loss gradient, the weighted activation sum is clamped at
/// zero, min-max normalized and resized to `out_h x out_w`.
pub fn attention_from_activations<T: Real>(
    acts: &Tensor<T>,
    grads: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<f64>> {
    if acts.rank() != 3 || acts.shape() != grads.shape() {
        return Err(Error::shape(
            "attention",
            format!("activations {:?}, gradients {:?}", acts.shape(), grads.shape()),
        ));
    }
    let (c, h, w) = (acts.dim(0), acts.dim(1), acts.dim(2));
    let plane = h * w;
    let mut cam = vec![0.0f64; plane];
    for ch in 0..c {
        let g = &grads.data()[ch * plane..(ch + 1) * plane];
        let weight = g.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
        if weight == 0.0 {
            continue;
        }
        for (o, a) in cam.iter_mut().zip(&acts.data()[ch * plane..(ch + 1) * plane]) {
            *o += weight * a.as_f64();
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let cam = min_max_normalize(&cam)?;
    Tensor::from_vec(&[out_h, out_w], resize_bilinear(&cam, h, w, out_h, out_w))
}

/// Spatial attention maps (`[H, W]` each) for a batch of at least two
/// images and their second views.
pub fn spatial_attention_maps<T: Real>(
    encoder: &mut Encoder<T>,
    projector: &Projector<T>,
    x: &Tensor<T>,
    x2: &Tensor<T>,
    mode: Mode,
    cfg: &ContrastiveConfig,
) -> Result<Vec<Tensor<f64>>> {
    if mode == Mode::Train {
        return Err(Error::InvalidArgument("attention pass must not update running statistics".into()));
    }
    let (h, w) = (x.dim(2), x.dim(3));
    let z2 = {
        let v2 = encoder.encode(x2, mode)?;
        projector.project(&v2)?
    };
    let mut tape = Tape::new();
    let eb = encoder.params.bind(&mut tape, false);
    let pb = projector.params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = encoder.forward(&mut tape, &eb, xv, mode, 1)?;
    let z = projector.forward(&mut tape, &pb, out.features)?;
    let z2v = tape.constant(z2);
    let reps = tape.concat_rows(z, z2v)?;
    let loss = info_nce_batch(&mut tape, reps, &half_pairing(x.dim(0)), cfg)?;
    let grads = tape.backward(loss)?;
    let acts = tape.value(out.last_map);
    let zero = Tensor::zeros(acts.shape());
    let g = grads.get(out.last_map).unwrap_or(&zero);
    (0..x.dim(0))
        .map(|b| attention_from_activations(&acts.slice_outer(b, b + 1).reshape(&acts.shape()[1..])?, &g.slice_outer(b, b + 1).reshape(&acts.shape()[1..])?, h, w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{EncoderConfig, ProjectorConfig};
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    #[test]
    fn min_max_examples() {
        assert_eq!(min_max_normalize(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(min_max_normalize(&[3.0, 3.0, 3.0]).unwrap(), vec![0.0; 3]);
        let got = min_max_normalize(&[0.1, 0.9, 0.5, 0.3]).unwrap();
        for (g, w) in got.iter().zip([0.0, 1.0, 0.5, 0.25]) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!(min_max_normalize(&[]).is_err());
    }

    #[test]
    fn eta_hand_examples() {
        // L = v1 at v1 = 2: gradient 1.
        assert_eq!(eta_from_gradient(&[1.0], &[2.0]).unwrap(), vec![2.0]);
        // L = -v1^2 at v1 = 3: gradient -6, product -18.
        assert_eq!(eta_from_gradient(&[-6.0], &[3.0]).unwrap(), vec![0.0]);
        // Constant loss.
        assert_eq!(eta_from_gradient(&[0.0, 0.0], &[5.0, -1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_gradient_gives_zero_map() {
        let acts = Tensor::<f64>::full(&[2, 4, 4], 0.7);
        let m = attention_from_activations(&acts, &Tensor::zeros(&[2, 4, 4]), 16, 16).unwrap();
        assert_eq!(m.shape(), &[16, 16]);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let out = resize_bilinear(&[0.25; 9], 3, 3, 7, 5);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    fn model() -> (Encoder<f64>, Projector<f64>) {
        let mut rng = stream(5, Stream::Init, &[]);
        let enc = Encoder::new(EncoderConfig { in_channels: 3, channels: vec![4, 6] }, &mut rng).unwrap();
        let proj = Projector::new(ProjectorConfig { dims: vec![6, 6, 4] }, &mut rng).unwrap();
        (enc, proj)
    }

    fn img(b: usize, seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, Stream::Probe, &[]);
        use rand::Rng as _;
        Tensor::from_vec(&[b, 3, 8, 8], (0..b * 192).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let (mut enc, proj) = model();
        let cfg = ContrastiveConfig::default();
        let v = enc.encode(&img(3, 1), Mode::Batch).unwrap();
        let z2 = proj.project(&enc.encode(&img(3, 2), Mode::Batch).unwrap()).unwrap();
        let g = feature_gradients(&proj, &v, &z2, &cfg).unwrap();
        let loss = |v: &Tensor<f64>| {
            let z = proj.project(v).unwrap();
            let reps = Tensor::concat_outer(&z, &z2).unwrap();
            crate::losses::info_nce_batch_value(&reps, &half_pairing(3), &cfg).unwrap()
        };
        let h = 1e-3;
        let (mut diff, mut norm) = (0.0, 0.0);
        for i in 0..v.len() {
            let mut p = v.clone();
            p.data_mut()[i] += h;
            let mut m = v.clone();
            m.data_mut()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            diff += (g.data()[i] - fd).powi(2);
            norm += fd * fd;
        }
        assert!(diff.sqrt() / norm.sqrt() < 1e-3);
    }

    #[test]
    fn scores_are_nonnegative_and_leave_model_untouched() {
        let (mut enc, proj) = model();
        let before = (enc.params.clone(), proj.params.clone());
        let eta = gradcam_feature_scores(&mut enc, &proj, &img(4, 3), &img(4, 4), Mode::Batch, &ContrastiveConfig::default()).unwrap();
        assert_eq!(eta.shape(), &[4, 6]);
        assert!(eta.data().iter().all(|&e| e >= 0.0));
        assert_eq!(before, (enc.params.clone(), proj.params.clone()));
        assert!(gradcam_feature_scores(&mut enc, &proj, &img(4, 3), &img(4, 4), Mode::Train, &ContrastiveConfig::default()).is_err());
    }

    #[test]
    fn attention_maps_in_range() {
        let (mut enc, proj) = model();
        let maps = spatial_attention_maps(&mut enc, &proj, &img(2, 5), &img(2, 6), Mode::Eval, &ContrastiveConfig::default()).unwrap();
        assert_eq!(maps.len(), 2);
        for m in maps {
            assert_eq!(m.shape(), &[8, 8]);
            assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    proptest! {
        #[test]
        fn min_max_affine_invariant(v in prop::collection::vec(-10.0f64..10.0, 1..20), a in 0.01f64..100.0, b in -50.0f64..50.0) {
            let base = min_max_normalize(&v).unwrap();
            let moved: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let got = min_max_normalize(&moved).unwrap();
            for (x, y) in base.iter().zip(&got) {
                prop_assert!((x - y).abs() < 1e-6);
            }
            prop_assert!(base.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
