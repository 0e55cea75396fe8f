//! Feature memory bank, per-dimension dispersion, and the noise used to
//! build perturbed feature vectors.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::saliency::min_max_normalize;
use crate::tensor::{Real, Tensor};

/// Fixed-capacity FIFO of equal-width rows. New rows overwrite the oldest.
#[derive(Debug, Clone, PartialEq)]
pub struct RingStore<T> {
    capacity: usize,
    width: usize,
    data: Vec<T>,
    cursor: usize,
    fill: usize,
}

pub type FeatureBank<T> = RingStore<T>;

impl<T: Real> RingStore<T> {
    pub fn new(capacity: usize, width: usize) -> Result<Self> {
        if capacity == 0 || width == 0 {
            return Err(Error::Config(format!("ring store needs positive capacity and width, got {capacity}x{width}")));
        }
        Ok(Self {
            capacity,
            width,
            data: vec![T::zero(); capacity * width],
            cursor: 0,
            fill: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    /// Next row to be written.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn push(&mut self, rows: &Tensor<T>) -> Result<()> {
        if rows.rank() != 2 || rows.dim(1) != self.width {
            return Err(Error::shape("ring push", format!("expected [B, {}], got {:?}", self.width, rows.shape())));
        }
        let b = rows.dim(0);
        if b > self.capacity {
            return Err(Error::InvalidArgument(format!("batch of {b} exceeds capacity {}", self.capacity)));
        }
        for i in 0..b {
            let dst = self.cursor * self.width;
            self.data[dst..dst + self.width].copy_from_slice(rows.row(i));
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        self.fill = (self.fill + b).min(self.capacity);
        Ok(())
    }

    /// Filled rows in storage order.
    pub fn rows(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.fill, self.width], self.data[..self.fill * self.width].to_vec())
            .expect("fill rows are in range")
    }

    /// Filled rows oldest first.
    pub fn chronological(&self) -> Tensor<T> {
        let start = if self.fill < self.capacity { 0 } else { self.cursor };
        let order: Vec<usize> = (0..self.fill).map(|i| (start + i) % self.capacity).collect();
        let all = Tensor::from_vec(&[self.capacity, self.width], self.data.clone()).expect("consistent");
        all.select_outer(&order)
    }

    /// Whole storage including unfilled rows, for checkpointing.
    pub fn storage(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.capacity, self.width], self.data.clone()).expect("consistent")
    }

    pub fn from_parts(storage: Tensor<T>, cursor: usize, fill: usize) -> Result<Self> {
        if storage.rank() != 2 || cursor >= storage.dim(0).max(1) || fill > storage.dim(0) {
            return Err(Error::Checkpoint(format!(
                "ring store parts inconsistent: storage {:?}, cursor {cursor}, fill {fill}",
                storage.shape()
            )));
        }
        let (capacity, width) = (storage.dim(0), storage.dim(1));
        Ok(Self {
            capacity,
            width,
            data: storage.into_data(),
            cursor,
            fill,
        })
    }
}

/// Total squared deviation of each unit-normalized column of `rows`
/// (`[D, n]`), computed as `sum((v - mean)^2) / sum(v^2)`. All-zero and
/// exactly constant columns score 0.
pub fn dispersion_of_rows<T: Real>(rows: &Tensor<T>) -> Result<Vec<f64>> {
    if rows.rank() != 2 || rows.dim(0) < 2 {
        return Err(Error::InvalidArgument(format!(
            "dispersion needs at least 2 rows, got shape {:?}",
            rows.shape()
        )));
    }
    let (d, n) = (rows.dim(0), rows.dim(1));
    let first = rows.row(0);
    let mut sum = vec![0.0f64; n];
    let mut sq = vec![0.0f64; n];
    let mut constant = vec![true; n];
    for r in 0..d {
        for (i, &v) in rows.row(r).iter().enumerate() {
            let x = v.as_f64();
            sum[i] += x;
            sq[i] += x * x;
            constant[i] &= v == first[i];
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / d as f64).collect();
    let mut dev = vec![0.0f64; n];
    for r in 0..d {
        for (i, &v) in rows.row(r).iter().enumerate() {
            dev[i] += (v.as_f64() - mean[i]).powi(2);
        }
    }
    Ok((0..n)
        .map(|i| {
            if sq[i] <= 0.0 || constant[i] {
                return 0.0;
            }
            (dev[i] / sq[i]).clamp(0.0, 1.0)
        })
        .collect())
}

pub fn dispersion_scores<T: Real>(bank: &FeatureBank<T>) -> Result<Vec<f64>> {
    dispersion_of_rows(&bank.rows())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispersionScores {
    pub s: Vec<f64>,
    pub s_bar: Vec<f64>,
}

impl DispersionScores {
    pub fn from_bank<T: Real>(bank: &FeatureBank<T>) -> Result<Self> {
        let s = dispersion_scores(bank)?;
        let s_bar = min_max_normalize(&s)?;
        Ok(Self { s, s_bar })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    #[default]
    Both,
    GradcamOnly,
    LowvarOnly,
    RandomAll,
    None,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 5] = [
        NoiseMode::Both,
        NoiseMode::GradcamOnly,
        NoiseMode::LowvarOnly,
        NoiseMode::RandomAll,
        NoiseMode::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::Both => "both",
            NoiseMode::GradcamOnly => "gradcam_only",
            NoiseMode::LowvarOnly => "lowvar_only",
            NoiseMode::RandomAll => "random_all",
            NoiseMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown noise mode {s:?}")))
    }

    pub fn uses_gradcam(self) -> bool {
        matches!(self, NoiseMode::Both | NoiseMode::GradcamOnly)
    }

    pub fn uses_dispersion(self) -> bool {
        matches!(self, NoiseMode::Both | NoiseMode::LowvarOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub eps_g: f64,
    pub eps_var: f64,
    pub kappa: f64,
    pub mode: NoiseMode,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            eps_g: 0.1,
            eps_var: 0.05,
            kappa: 0.02,
            mode: NoiseMode::Both,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eps_g", self.eps_g), ("eps_var", self.eps_var)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("noise {name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.kappa.is_finite() {
            return Err(Error::Config("noise kappa must be finite".into()));
        }
        Ok(())
    }
}

fn check_unit_interval(what: &str, v: &[f64]) -> Result<()> {
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !(0.0..=1.0).contains(*x)) {
        return Err(Error::InvalidArgument(format!("{what}[{i}] = {x} outside [0, 1]")));
    }
    Ok(())
}

/// Standard deviation of the saliency-guided noise: `eps_g * (1 - eta_bar)`.
pub fn gradcam_std_profile(eta_bar: &[f64], eps_g: f64) -> Result<Vec<f64>> {
    check_unit_interval("eta_bar", eta_bar)?;
    Ok(eta_bar.iter().map(|e| eps_g * (1.0 - e)).collect())
}

/// Standard deviation of the dispersion-guided noise: `eps_var * (1 - s_bar)`
/// where `s < kappa`, zero elsewhere.
pub fn variance_std_profile(s: &[f64], s_bar: &[f64], cfg: &NoiseConfig) -> Result<Vec<f64>> {
    if s.len() != s_bar.len() {
        return Err(Error::shape("variance noise", format!("s has {} entries, s_bar {}", s.len(), s_bar.len())));
    }
    check_unit_interval("s_bar", s_bar)?;
    Ok(s.iter()
        .zip(s_bar)
        .map(|(&si, &sb)| if si < cfg.kappa { cfg.eps_var * (1.0 - sb) } else { 0.0 })
        .collect())
}

/// One zero-mean Gaussian draw per entry with the given standard deviations.
/// Zero deviations give exactly zero.
pub fn sample_with_profile(std: &[f64], rng: &mut Rng) -> Vec<f64> {
    std.iter()
        .map(|&sd| {
            let z: f64 = rng.sample(StandardNormal);
            if sd == 0.0 {
                0.0
            } else {
                sd * z
            }
        })
        .collect()
}

pub fn sample_gradcam_noise(eta_bar: &[f64], eps_g: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    Ok(sample_with_profile(&gradcam_std_profile(eta_bar, eps_g)?, rng))
}

pub fn sample_variance_noise(s: &[f64], s_bar: &[f64], cfg: &NoiseConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    Ok(sample_with_profile(&variance_std_profile(s, s_bar, cfg)?, rng))
}

/// Combine a feature vector with its noise draws according to the mode.
/// For `random_all`, `ng` must be drawn with the flat profile `eps_g`.
pub fn perturb_features(v: &[f64], ng: &[f64], nv: &[f64], mode: NoiseMode) -> Result<Vec<f64>> {
    if ng.len() != v.len() || nv.len() != v.len() {
        return Err(Error::shape("perturb_features", format!("v {}, ng {}, nv {}", v.len(), ng.len(), nv.len())));
    }
    let (use_g, use_v) = match mode {
        NoiseMode::Both => (true, true),
        NoiseMode::GradcamOnly | NoiseMode::RandomAll => (true, false),
        NoiseMode::LowvarOnly => (false, true),
        NoiseMode::None => (false, false),
    };
    Ok((0..v.len())
        .map(|i| v[i] + if use_g { ng[i] } else { 0.0 } + if use_v { nv[i] } else { 0.0 })
        .collect())
}

/// Draw both noise vectors for one sample and return `v_p`. `eta_bar` is
/// required when the mode uses saliency; `dispersion` may be absent (bank
/// not yet warm), which disables the dispersion term.
pub fn perturb_sample(
    v: &[f64],
    eta_bar: Option<&[f64]>,
    dispersion: Option<&DispersionScores>,
    cfg: &NoiseConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let n = v.len();
    let zeros = vec![0.0; n];
    let ng = match cfg.mode {
        NoiseMode::RandomAll => sample_with_profile(&vec![cfg.eps_g; n], rng),
        m if m.uses_gradcam() => {
            let eta_bar = eta_bar.ok_or_else(|| Error::InvalidArgument("saliency scores missing".into()))?;
            sample_gradcam_noise(eta_bar, cfg.eps_g, rng)?
        }
        _ => zeros.clone(),
    };
    let nv = match dispersion {
        Some(d) if cfg.mode.uses_dispersion() => sample_variance_noise(&d.s, &d.s_bar, cfg, rng)?,
        _ => zeros,
    };
    perturb_features(v, &ng, &nv, cfg.mode)
}
