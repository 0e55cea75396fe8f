//! Heavy-ball SGD, Adam and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::nets::{ParamKind, ParamSet};
use crate::tensor::{Real, Tensor};

/// Cosine decay from `base` to zero over `epochs`, stepped once per epoch.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return base;
    }
    let t = (epoch.min(epochs) as f64) / epochs as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

fn check_grads<T: Real>(params: &ParamSet<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape("optimizer", format!("{} grads for {} params", grads.len(), params.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::shape("optimizer", format!("gradient shape for {}", p.name)));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
    }
    Ok(())
}

fn zeros_like<T: Real>(params: &ParamSet<T>) -> Vec<Tensor<T>> {
    params.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = mu * v + (g + wd * p)`, `p -= lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &ParamSet<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: zeros_like(params),
        }
    }

    /// Entries whose gradient is `None` are left untouched, momentum and all.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if params.get(i).kind != ParamKind::Trainable {
                continue;
            }
            let v = self.velocity[i].data_mut();
            let p = params.value_mut(i).data_mut();
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
        Ok(())
    }

    pub fn state(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn load_state(&mut self, state: Vec<Tensor<T>>) -> Result<()> {
        if state.len() != self.velocity.len()
            || state.iter().zip(&self.velocity).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        self.velocity = state;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: zeros_like(params),
            v: zeros_like(params),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 / (1.0 - self.beta1.powi(t));
        let c2 = 1.0 / (1.0 - self.beta2.powi(t));
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (r1, r2) = (T::one() - b1, T::one() - b2);
        let (c1, c2, lr, eps) = (T::of(c1), T::of(c2), T::of(lr), T::of(self.eps));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if params.get(i).kind != ParamKind::Trainable {
                continue;
            }
            let p = params.value_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, &g) in g.data().iter().enumerate() {
                m[j] = b1 * m[j] + r1 * g;
                v[j] = b2 * v[j] + r2 * g * g;
                p[j] -= lr * (m[j] * c1) / ((v[j] * c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(v), ParamKind::Trainable);
        p
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.03, 0, 30), 0.03);
        assert!((cosine_lr(0.03, 15, 30) - 0.015).abs() < 1e-15);
        assert!(cosine_lr(0.03, 30, 30).abs() < 1e-15);
    }

    #[test]
    fn sgd_matches_recurrence() {
        let mut p = one(1.0);
        let mut opt = Sgd::new(&p, 0.9, 0.1);
        let (mut w, mut v) = (1.0f64, 0.0f64);
        for step in 0..5 {
            let g = 0.5 * step as f64;
            opt.step(&mut p, &[Some(Tensor::scalar(g))], 0.2).unwrap();
            v = 0.9 * v + g + 0.1 * w;
            w -= 0.2 * v;
            assert!((p.value(0).item() - w).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = one(0.0);
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &[Some(Tensor::scalar(3.0))], 1e-3).unwrap();
        assert!((p.value(0).item() + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = one(2.0);
        let mut opt = Adam::new(&p);
        for _ in 0..2000 {
            let g = 2.0 * (p.value(0).item() - 0.5);
            opt.step(&mut p, &[Some(Tensor::scalar(g))], 1e-2).unwrap();
        }
        assert!((p.value(0).item() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = one(0.0);
        let mut opt = Sgd::new(&p, 0.9, 0.0);
        assert!(opt.step(&mut p, &[Some(Tensor::scalar(f64::NAN))], 0.1).is_err());
        assert_eq!(p.value(0).item(), 0.0);
    }
}
