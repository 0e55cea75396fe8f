//! Stochastic view augmentation: random resized crop, horizontal flip,
//! color jitter, grayscale and Gaussian blur, applied in that order.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

const CROP_ATTEMPTS: usize = 10;
const BLUR_KERNEL: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub crop: bool,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip: bool,
    pub flip_p: f64,
    pub jitter: bool,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale: bool,
    pub grayscale_p: f64,
    pub blur: bool,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: true,
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip: true,
            flip_p: 0.5,
            jitter: true,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale: true,
            grayscale_p: 0.2,
            blur: true,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled or with probability zero: views equal the
    /// source.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p", self.blur_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment {name} must be in [0, 1], got {p}")));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop scale range ({lo}, {hi}) must lie in (0, 1]")));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Config(format!("crop ratio range ({rlo}, {rhi}) invalid")));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("jitter {name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config(format!("jitter hue must be in [0, 0.5], got {}", self.hue)));
        }
        let (slo, shi) = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi) {
            return Err(Error::Config(format!("blur sigma range ({slo}, {shi}) invalid")));
        }
        Ok(())
    }
}

/// Two augmented views of one image plus the untouched source, all planar
/// `[3, S, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view1: Vec<f32>,
    pub view2: Vec<f32>,
    pub source: Vec<f32>,
}

pub fn make_views(x: &[f32], size: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Result<ViewPair> {
    if x.len() != 3 * size * size {
        return Err(Error::shape("make_views", format!("{} values for a 3x{size}x{size} image", x.len())));
    }
    Ok(ViewPair {
        view1: augment(x, size, cfg, rng),
        view2: augment(x, size, cfg, rng),
        source: x.to_vec(),
    })
}

/// One stochastic augmentation of a planar `[3, S, S]` image.
pub fn augment(x: &[f32], size: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f32> {
    let mut img: Vec<f32> = if cfg.crop {
        let (top, left, h, w) = sample_crop(size, cfg, rng);
        resized_crop(x, size, top, left, h, w)
    } else {
        x.to_vec()
    };
    if cfg.flip && rng.random_bool(cfg.flip_p) {
        hflip(&mut img, size);
    }
    if cfg.jitter && rng.random_bool(cfg.jitter_p) {
        color_jitter(&mut img, cfg, rng);
    }
    if cfg.grayscale && rng.random_bool(cfg.grayscale_p) {
        to_grayscale(&mut img);
    }
    if cfg.blur && rng.random_bool(cfg.blur_p) {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        gaussian_blur(&mut img, size, sigma);
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

/// Crop box `(top, left, height, width)`, never empty.
fn sample_crop(size: usize, cfg: &AugmentConfig, rng: &mut Rng) -> (usize, usize, usize, usize) {
    let area = (size * size) as f64;
    let (lr0, lr1) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.random_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if (1..=size).contains(&w) && (1..=size).contains(&h) {
            let top = rng.random_range(0..=size - h);
            let left = rng.random_range(0..=size - w);
            return (top, left, h, w);
        }
    }
    // Fallback: the whole image.
    (0, 0, size, size)
}

/// Bilinear resample of the box back to `size x size`.
fn resized_crop(x: &[f32], size: usize, top: usize, left: usize, h: usize, w: usize) -> Vec<f32> {
    if h == size && w == size {
        return x.to_vec();
    }
    let plane = size * size;
    let mut out = vec![0.0f32; 3 * plane];
    let sy = h as f64 / size as f64;
    let sx = w as f64 / size as f64;
    for oy in 0..size {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let ty = (fy - y0 as f64) as f32;
        let y1 = (y0 + 1).min(h - 1);
        for ox in 0..size {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let tx = (fx - x0 as f64) as f32;
            let x1 = (x0 + 1).min(w - 1);
            for c in 0..3 {
                let p = &x[c * plane..(c + 1) * plane];
                let at = |yy: usize, xx: usize| p[(top + yy) * size + left + xx];
                let a = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let b = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out[c * plane + oy * size + ox] = a * (1.0 - ty) + b * ty;
            }
        }
    }
    out
}

fn hflip(img: &mut [f32], size: usize) {
    for row in img.chunks_mut(size) {
        row.reverse();
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn to_grayscale(img: &mut [f32]) {
    let plane = img.len() / 3;
    for i in 0..plane {
        let l = luma(img[i], img[plane + i], img[2 * plane + i]);
        img[i] = l;
        img[plane + i] = l;
        img[2 * plane + i] = l;
    }
}

fn blend_clamped(img: &mut [f32], other: impl Fn(usize) -> f32, factor: f32) {
    for i in 0..img.len() {
        img[i] = (other(i) + factor * (img[i] - other(i))).clamp(0.0, 1.0);
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn color_jitter(img: &mut [f32], cfg: &AugmentConfig, rng: &mut Rng) {
    let factor = |rng: &mut Rng, s: f64| rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32;
    let plane = img.len() / 3;
    let mut ops = [0u8, 1, 2, 3];
    ops.shuffle(rng);
    for op in ops {
        match op {
            0 if cfg.brightness > 0.0 => {
                let f = factor(rng, cfg.brightness);
                blend_clamped(img, |_| 0.0, f);
            }
            1 if cfg.contrast > 0.0 => {
                let f = factor(rng, cfg.contrast);
                let mean = (0..plane)
                    .map(|i| luma(img[i], img[plane + i], img[2 * plane + i]))
                    .sum::<f32>()
                    / plane as f32;
                blend_clamped(img, |_| mean, f);
            }
            2 if cfg.saturation > 0.0 => {
                let f = factor(rng, cfg.saturation);
                let gray: Vec<f32> = (0..plane)
                    .map(|i| luma(img[i], img[plane + i], img[2 * plane + i]))
                    .collect();
                blend_clamped(img, |i| gray[i % plane], f);
            }
            3 if cfg.hue > 0.0 => {
                let shift = rng.random_range(-cfg.hue..=cfg.hue) as f32;
                for i in 0..plane {
                    let (h, s, v) = rgb_to_hsv(img[i], img[plane + i], img[2 * plane + i]);
                    let (r, g, b) = hsv_to_rgb(h + shift, s, v);
                    img[i] = r;
                    img[plane + i] = g;
                    img[2 * plane + i] = b;
                }
            }
            _ => {}
        }
    }
}

/// Separable Gaussian blur with reflected borders.
fn gaussian_blur(img: &mut [f32], size: usize, sigma: f64) {
    let half = (BLUR_KERNEL / 2) as isize;
    let mut k: Vec<f32> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let reflect = |i: isize| -> usize {
        let n = size as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut tmp = vec![0.0f32; size * size];
    for plane in img.chunks_mut(size * size) {
        for y in 0..size {
            for x in 0..size {
                tmp[y * size + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * plane[y * size + reflect(x as isize + j as isize - half)])
                    .sum();
            }
        }
        for y in 0..size {
            for x in 0..size {
                plane[y * size + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * tmp[reflect(y as isize + j as isize - half) * size + x])
                    .sum();
            }
        }
    }
}
