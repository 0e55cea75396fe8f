//! Contrastive and reconstruction losses.
//!
//! Each loss is available as a tape operation (for training) and as a plain
//! value function (for evaluation and tests).

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

const UNIT_NORM_TOL: f64 = 1e-4;

/// Which terms appear in the softmax denominator of a contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Denominator {
    /// Positive plus negatives (cross-entropy form).
    #[default]
    IncludePositive,
    /// Negatives only.
    NegativesOnly,
}

impl Denominator {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "include_positive" => Ok(Self::IncludePositive),
            "negatives_only" => Ok(Self::NegativesOnly),
            _ => Err(Error::Config(format!(
                "unknown denominator {s:?} (expected include_positive or negatives_only)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::IncludePositive => "include_positive",
            Self::NegativesOnly => "negatives_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub denominator: Denominator,
    /// Normalize rows before use. When unset, inputs must already be unit
    /// norm and are rejected otherwise.
    pub normalize: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            denominator: Denominator::IncludePositive,
            normalize: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn with_tau(tau: f64) -> Self {
        Self {
            tau,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub nu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, nu: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("nu", self.nu)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_unit_rows<T: Real>(what: &str, t: &Tensor<T>) -> Result<()> {
    for i in 0..t.dim(0) {
        let n = t.row(i).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::InvalidArgument(format!("{what} row {i} has norm {n:.6}, expected 1")));
        }
    }
    Ok(())
}

fn prepare<T: Real>(tape: &mut Tape<T>, x: Var, what: &str, cfg: &ContrastiveConfig) -> Result<Var> {
    let v = tape.value(x);
    if v.rank() != 2 {
        return Err(Error::shape("contrastive loss", format!("{what} must be [B, k], got {:?}", v.shape())));
    }
    if cfg.normalize {
        tape.l2_normalize_rows(x, T::of(1e-12))
    } else {
        check_unit_rows(what, v)?;
        Ok(x)
    }
}

/// Queue-based contrastive loss. Row `i` of `q` is scored against its key
/// `k[i]` (positive) and every queue row (negatives). The keys and the
/// queue carry no gradient.
pub fn info_nce_queue<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    queue: &Tensor<T>,
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    cfg.validate()?;
    if queue.rank() != 2 || queue.dim(0) == 0 {
        return Err(Error::InvalidArgument("contrastive queue is empty".into()));
    }
    let k = tape.detach(k);
    let q = prepare(tape, q, "query", cfg)?;
    let k = prepare(tape, k, "key", cfg)?;
    let (qs, ks) = (tape.value(q).shape().to_vec(), tape.value(k).shape().to_vec());
    if qs != ks || queue.dim(1) != qs[1] {
        return Err(Error::shape(
            "info_nce_queue",
            format!("q {qs:?}, k {ks:?}, queue {:?}", queue.shape()),
        ));
    }
    let queue = if cfg.normalize {
        let c = tape.constant(queue.clone());
        tape.l2_normalize_rows(c, T::of(1e-12))?
    } else {
        check_unit_rows("queue", queue)?;
        tape.constant(queue.clone())
    };
    let b = qs[0];
    let width = 1 + tape.value(queue).dim(0);
    let pos = tape.row_dot(q, k)?;
    let neg = tape.matmul_nt(q, queue)?;
    let logits = tape.concat_cols(pos, neg)?;
    let logits = tape.scale(logits, T::of(1.0 / cfg.tau));
    let targets = vec![0; b];
    match cfg.denominator {
        Denominator::IncludePositive => tape.nce(logits, &targets, None),
        Denominator::NegativesOnly => {
            let mask: Vec<bool> = (0..b * width).map(|i| i % width != 0).collect();
            tape.nce(logits, &targets, Some(&mask))
        }
    }
}

/// Pairing used by the generated-pair loss: rows `i` and `i + B` of a `2B`
/// batch are positives.
pub fn half_pairing(b: usize) -> Vec<usize> {
    (0..2 * b).map(|i| if i < b { i + b } else { i - b }).collect()
}

fn check_pairing(pairing: &[usize], n: usize) -> Result<()> {
    if pairing.len() != n {
        return Err(Error::shape("info_nce_batch", format!("pairing of {} for {n} rows", pairing.len())));
    }
    for (i, &j) in pairing.iter().enumerate() {
        if j >= n || j == i || pairing[j] != i {
            return Err(Error::InvalidArgument(format!(
                "pairing must be a fixed-point-free involution; entry {i} -> {j}"
            )));
        }
    }
    Ok(())
}

/// Symmetric batch contrastive loss over `2B` representations. Each row is
/// an anchor whose positive is `pairing[i]`; all other rows except the
/// anchor itself are negatives.
pub fn info_nce_batch<T: Real>(tape: &mut Tape<T>, reps: Var, pairing: &[usize], cfg: &ContrastiveConfig) -> Result<Var> {
    cfg.validate()?;
    let reps = prepare(tape, reps, "representation", cfg)?;
    let n = tape.value(reps).dim(0);
    if n < 4 || n % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "batch contrastive loss needs 2B rows with B >= 2, got {n}"
        )));
    }
    check_pairing(pairing, n)?;
    let sims = tape.matmul_nt(reps, reps)?;
    let logits = tape.scale(sims, T::of(1.0 / cfg.tau));
    let mut mask = vec![true; n * n];
    for i in 0..n {
        mask[i * n + i] = false;
        if cfg.denominator == Denominator::NegativesOnly {
            mask[i * n + pairing[i]] = false;
        }
    }
    tape.nce(logits, pairing, Some(&mask))
}

/// Mean squared error over all elements.
pub fn recon_loss<T: Real>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    tape.mse(x, x_hat)
}

/// `lc + alpha * lr + nu * lcp`. Terms whose weight is zero may be absent.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    lc: Var,
    lr: Option<Var>,
    lcp: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let mut terms = vec![(lc, T::one())];
    for (term, weight, name) in [(lr, w.alpha, "reconstruction"), (lcp, w.nu, "generated-pair")] {
        match term {
            Some(v) if weight != 0.0 => terms.push((v, T::of(weight))),
            None if weight != 0.0 => {
                return Err(Error::InvalidArgument(format!("{name} term missing with non-zero weight")))
            }
            _ => {}
        }
    }
    for &(v, _) in &terms {
        if !tape.value(v).all_finite() {
            return Err(Error::NonFinite("loss term".into()));
        }
    }
    tape.weighted_sum(&terms)
}

pub fn info_nce_queue_value<T: Real>(q: &Tensor<T>, k: &Tensor<T>, queue: &Tensor<T>, cfg: &ContrastiveConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let l = info_nce_queue(&mut tape, qv, kv, queue, cfg)?;
    Ok(tape.value(l).item().as_f64())
}

pub fn info_nce_batch_value<T: Real>(reps: &Tensor<T>, pairing: &[usize], cfg: &ContrastiveConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let r = tape.constant(reps.clone());
    let l = info_nce_batch(&mut tape, r, pairing, cfg)?;
    Ok(tape.value(l).item().as_f64())
}

pub fn recon_loss_value<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x.clone()), tape.constant(x_hat.clone()));
    let l = recon_loss(&mut tape, a, b)?;
    Ok(tape.value(l).item().as_f64())
}

pub fn total_loss_value(lc: f64, lr: f64, lcp: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    if !(lc.is_finite() && lr.is_finite() && lcp.is_finite()) {
        return Err(Error::NonFinite(format!("loss terms ({lc}, {lr}, {lcp})")));
    }
    Ok(lc + w.alpha * lr + w.nu * lcp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    fn normalize_rows(x: &mut [f64], width: usize) {
        for row in x.chunks_mut(width) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Direct enumeration of the queue loss.
    fn queue_oracle(q: &Tensor<f64>, k: &Tensor<f64>, queue: &Tensor<f64>, tau: f64, include: bool) -> f64 {
        let mut total = 0.0;
        for i in 0..q.dim(0) {
            let pos = (dot(q.row(i), k.row(i)) / tau).exp();
            let neg: f64 = (0..queue.dim(0)).map(|j| (dot(q.row(i), queue.row(j)) / tau).exp()).sum();
            let denom = if include { pos + neg } else { neg };
            total += -(pos / denom).ln();
        }
        total / q.dim(0) as f64
    }

    fn batch_oracle(r: &Tensor<f64>, pairing: &[usize], tau: f64, include: bool) -> f64 {
        let n = r.dim(0);
        let mut total = 0.0;
        for i in 0..n {
            let pos = (dot(r.row(i), r.row(pairing[i])) / tau).exp();
            let mut denom = 0.0;
            for j in 0..n {
                if j == i || (!include && j == pairing[i]) {
                    continue;
                }
                denom += (dot(r.row(i), r.row(j)) / tau).exp();
            }
            total += -(pos / denom).ln();
        }
        total / n as f64
    }

    #[test]
    fn queue_uniform_similarities_give_log_of_candidates() {
        let q = t(&[1, 2], vec![1.0, 0.0]);
        let k = t(&[1, 2], vec![0.0, 1.0]);
        let queue = t(&[3, 2], vec![0.0, 1.0, 0.0, -1.0, 0.0, 1.0]);
        let l = info_nce_queue_value(&q, &k, &queue, &ContrastiveConfig::with_tau(1.0)).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn queue_closed_form_value() {
        let q = t(&[1, 3], vec![1.0, 0.0, 0.0]);
        let queue = t(&[2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let l = info_nce_queue_value(&q, &q, &queue, &ContrastiveConfig::with_tau(0.2)).unwrap();
        let want = -(5f64.exp() / (5f64.exp() + 2.0)).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.013385).abs() < 1e-6);
    }

    #[test]
    fn queue_rejects_empty_queue_and_unnormalized_input() {
        let q = t(&[1, 2], vec![1.0, 0.0]);
        let cfg = ContrastiveConfig::default();
        assert!(info_nce_queue_value(&q, &q, &Tensor::zeros(&[0, 2]), &cfg).is_err());
        let bad = t(&[1, 2], vec![2.0, 0.0]);
        assert!(info_nce_queue_value(&bad, &q, &q, &cfg).is_err());
        let cfg = ContrastiveConfig {
            normalize: true,
            ..cfg
        };
        assert!(info_nce_queue_value(&bad, &q, &q, &cfg).is_ok());
    }

    #[test]
    fn queue_gradient_reaches_query_only() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(t(&[1, 2], vec![0.6, 0.8]));
        let k = tape.leaf(t(&[1, 2], vec![1.0, 0.0]));
        let queue = t(&[1, 2], vec![0.0, 1.0]);
        let l = info_nce_queue(&mut tape, q, k, &queue, &ContrastiveConfig::default()).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(q).is_some());
        assert!(g.get(k).is_none());
    }

    #[test]
    fn batch_orthogonal_pairs() {
        // Pairs (0,2) and (1,3) identical; the two pairs orthogonal.
        let r = t(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let l = info_nce_batch_value(&r, &half_pairing(2), &ContrastiveConfig::with_tau(1.0)).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.551444).abs() < 1e-6);
    }

    #[test]
    fn batch_identical_reps_give_log_2b_minus_1() {
        for b in [2, 3, 5] {
            let r = Tensor::full(&[2 * b, 4], 0.5);
            let l = info_nce_batch_value(&r, &half_pairing(b), &ContrastiveConfig::with_tau(0.2)).unwrap();
            assert!((l - ((2 * b - 1) as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_rejects_small_batch_and_bad_pairing() {
        let cfg = ContrastiveConfig::default();
        let r = Tensor::full(&[2, 4], 0.5);
        assert!(info_nce_batch_value(&r, &half_pairing(1), &cfg).is_err());
        let r = Tensor::full(&[4, 4], 0.5);
        assert!(info_nce_batch_value(&r, &[1, 0, 3, 3], &cfg).is_err());
    }

    #[test]
    fn recon_loss_examples() {
        let x = t(&[2], vec![0.0, 1.0]);
        assert_eq!(recon_loss_value(&x, &x).unwrap(), 0.0);
        assert_eq!(recon_loss_value(&x, &t(&[2], vec![0.5, 0.5])).unwrap(), 0.25);
        for m in [1, 7, 300] {
            let l = recon_loss_value(&Tensor::<f64>::zeros(&[m]), &Tensor::full(&[m], 1.0)).unwrap();
            assert_eq!(l, 1.0);
        }
        assert!(recon_loss_value(&x, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let zero = LossWeights { alpha: 0.0, nu: 0.0 };
        assert_eq!(total_loss_value(1.7, 2.0, 3.0, &zero).unwrap(), 1.7);
        let defaults = LossWeights { alpha: 1.0, nu: 0.5 };
        assert_eq!(total_loss_value(1.0, 2.0, 4.0, &defaults).unwrap(), 5.0);
        let no_nu = LossWeights { alpha: 1.0, nu: 0.0 };
        assert_eq!(
            total_loss_value(1.0, 2.0, 4.0, &no_nu).unwrap(),
            total_loss_value(1.0, 2.0, -9.0, &no_nu).unwrap()
        );
        assert!(total_loss_value(f64::NAN, 0.0, 0.0, &defaults).is_err());
    }

    #[test]
    fn total_loss_on_tape_skips_zero_weight_terms() {
        let mut tape = Tape::<f64>::new();
        let lc = tape.constant(Tensor::scalar(1.5));
        let w = LossWeights { alpha: 0.0, nu: 0.0 };
        let total = total_loss(&mut tape, lc, None, None, &w).unwrap();
        assert_eq!(tape.value(total).item(), 1.5);
        assert!(total_loss(&mut tape, lc, None, None, &LossWeights::default()).is_err());
    }

    fn unit_rows(rows: usize, width: usize) -> impl Strategy<Value = Tensor<f64>> {
        prop::collection::vec(-1.0f64..1.0, rows * width).prop_filter_map("non-zero rows", move |mut v| {
            if v.chunks(width).any(|r| r.iter().map(|x| x * x).sum::<f64>() < 1e-3) {
                return None;
            }
            normalize_rows(&mut v, width);
            Some(Tensor::from_vec(&[rows, width], v).unwrap())
        })
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-12)
    }

    proptest! {
        #[test]
        fn queue_matches_enumeration(
            b in 1usize..=4, kq in 1usize..=8, tau in 0.1f64..2.0, seed in any::<u64>()
        ) {
            let runner_rows = b * 2 + kq;
            let mut data: Vec<f64> = (0..runner_rows * 5)
                .map(|i| ((seed.wrapping_add(i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 11) as f64
                    / (1u64 << 53) as f64) * 2.0 - 1.0)
                .collect();
            normalize_rows(&mut data, 5);
            let q = t(&[b, 5], data[..b * 5].to_vec());
            let k = t(&[b, 5], data[b * 5..b * 10].to_vec());
            let queue = t(&[kq, 5], data[b * 10..].to_vec());
            for (den, include) in [(Denominator::IncludePositive, true), (Denominator::NegativesOnly, false)] {
                let cfg = ContrastiveConfig { tau, denominator: den, normalize: false };
                let got = info_nce_queue_value(&q, &k, &queue, &cfg).unwrap();
                let want = queue_oracle(&q, &k, &queue, tau, include);
                prop_assert!(rel(got, want) < 1e-6, "{got} vs {want}");
            }
            let got = info_nce_queue_value(&q, &k, &queue, &ContrastiveConfig::with_tau(tau)).unwrap();
            prop_assert!(got > 0.0);
            // Reversing the negatives leaves the loss unchanged.
            let rev: Vec<usize> = (0..kq).rev().collect();
            let got_rev = info_nce_queue_value(&q, &k, &queue.select_outer(&rev), &ContrastiveConfig::with_tau(tau)).unwrap();
            prop_assert!(rel(got, got_rev) < 1e-12);
        }

        #[test]
        fn batch_matches_enumeration(r in (2usize..=4).prop_flat_map(|b| unit_rows(2 * b, 3)), tau in 0.1f64..2.0) {
            let b = r.dim(0) / 2;
            let pairing = half_pairing(b);
            for (den, include) in [(Denominator::IncludePositive, true), (Denominator::NegativesOnly, false)] {
                let cfg = ContrastiveConfig { tau, denominator: den, normalize: false };
                let got = info_nce_batch_value(&r, &pairing, &cfg).unwrap();
                let want = batch_oracle(&r, &pairing, tau, include);
                prop_assert!(rel(got, want) < 1e-6, "{got} vs {want}");
            }
            // Swapping the order of pairs leaves the loss unchanged.
            let mut order: Vec<usize> = (0..b).rev().collect();
            order.extend((b..2 * b).rev());
            let got = info_nce_batch_value(&r, &pairing, &ContrastiveConfig::with_tau(tau)).unwrap();
            let permuted = info_nce_batch_value(&r.select_outer(&order), &pairing, &ContrastiveConfig::with_tau(tau)).unwrap();
            prop_assert!(got >= 0.0);
            prop_assert!(rel(got, permuted) < 1e-10);
        }

        #[test]
        fn queue_loss_decreases_with_positive_similarity(angle in 0.1f64..1.5, step in 0.01f64..0.09) {
            // q fixed, key rotates towards q, negatives fixed.
            let q = t(&[1, 3], vec![1.0, 0.0, 0.0]);
            let queue = t(&[2, 3], vec![0.0, 0.0, 1.0, -0.6, 0.0, 0.8]);
            let key = |a: f64| t(&[1, 3], vec![a.cos(), a.sin(), 0.0]);
            let cfg = ContrastiveConfig::default();
            let far = info_nce_queue_value(&q, &key(angle), &queue, &cfg).unwrap();
            let near = info_nce_queue_value(&q, &key(angle - step), &queue, &cfg).unwrap();
            prop_assert!(near < far);
        }

        #[test]
        fn recon_loss_is_symmetric_and_nonnegative(
            v in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..32)
        ) {
            let a = t(&[v.len()], v.iter().map(|p| p.0).collect());
            let b = t(&[v.len()], v.iter().map(|p| p.1).collect());
            let ab = recon_loss_value(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, recon_loss_value(&b, &a).unwrap());
            prop_assert_eq!(recon_loss_value(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn total_loss_is_linear(lc in -5.0f64..5.0, lr in 0.0f64..5.0, lcp in 0.0f64..5.0,
                                alpha in 0.0f64..3.0, nu in 0.0f64..3.0, d in -2.0f64..2.0) {
            let w = LossWeights { alpha, nu };
            let base = total_loss_value(lc, lr, lcp, &w).unwrap();
            prop_assert!((total_loss_value(lc + d, lr, lcp, &w).unwrap() - base - d).abs() < 1e-10);
            prop_assert!((total_loss_value(lc, lr + d, lcp, &w).unwrap() - base - alpha * d).abs() < 1e-10);
            prop_assert!((total_loss_value(lc, lr, lcp + d, &w).unwrap() - base - nu * d).abs() < 1e-10);
        }
    }
}
