//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Every forward operation appends a node holding its output value and
//! whatever it needs for the backward pass. [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients for every node that depends on
//! a leaf. Constants (including detached copies) stop gradient flow.

use crate::error::{Error, Result};
use crate::kernels::{self, Window};
use crate::tensor::{gemm, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Constant,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Window,
        batch: usize,
        out_ch: usize,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        // Scan over the *output* image; its positions equal the input grid.
        geom: Window,
        batch: usize,
        in_ch: usize,
        xmat: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    AvgPool(Var),
    Reshape(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    RowDot(Var, Var),
    ConcatRows(Var, Var),
    SelectRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    SumAll(Var),
    Nce {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Mse(Var, Var),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics of one batch-normalization forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_rank<T: Real>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copy of `v` with no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// `y = x wᵀ + b` with `x: [B, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        check_rank("linear", xv, 2)?;
        check_rank("linear", wv, 2)?;
        let (batch, inp) = (xv.dim(0), xv.dim(1));
        let out = wv.dim(0);
        if wv.dim(1) != inp {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let mut y = vec![T::zero(); batch * out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != out {
                return Err(Error::shape("linear", format!("bias {:?}", bv.shape())));
            }
            for row in y.chunks_mut(out) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(false, true, batch, out, inp, T::one(), xv.data(), wv.data(), T::one(), &mut y);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_vec(&[batch, out], y)?, Op::Linear { x, w, b }, rg))
    }

    /// `a bᵀ` for `a: [M, K]`, `b: [N, K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(a, b, None)
    }

    /// 2-D convolution, NCHW input, `w: [O, C, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        check_rank("conv2d", xv, 4)?;
        check_rank("conv2d", wv, 4)?;
        let (batch, ch, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (out_ch, k) = (wv.dim(0), wv.dim(2));
        if wv.dim(1) != ch || wv.dim(3) != k {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} vs weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let geom = Window {
            channels: ch,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        if !geom.valid() {
            return Err(Error::shape("conv2d", format!("kernel {k} too large for {h}x{wd}")));
        }
        let p = geom.positions();
        let mut cols = vec![T::zero(); geom.patch_len() * batch * p];
        kernels::im2col(xv.data(), batch, geom, &mut cols);
        let mut ymat = vec![T::zero(); out_ch * batch * p];
        gemm(
            false,
            false,
            out_ch,
            batch * p,
            geom.patch_len(),
            T::one(),
            wv.data(),
            &cols,
            T::zero(),
            &mut ymat,
        );
        let mut y = kernels::channel_to_batch_major(&ymat, batch, out_ch, p);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != out_ch {
                return Err(Error::shape("conv2d", format!("bias {:?}", bv.shape())));
            }
            add_channel_bias(&mut y, batch, out_ch, p, bv.data());
        }
        let shape = [batch, out_ch, geom.out_height(), geom.out_width()];
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        // The lowered input is only needed when a weight gradient is.
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::from_vec(&shape, y)?,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                out_ch,
                cols,
            },
            rg,
        ))
    }

    /// Transposed 2-D convolution, `w: [C_in, C_out, K, K]`.
    /// Output side is `(H - 1) * stride - 2 * pad + K`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        check_rank("conv_transpose2d", xv, 4)?;
        check_rank("conv_transpose2d", wv, 4)?;
        let (batch, in_ch, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (out_ch, k) = (wv.dim(1), wv.dim(2));
        if wv.dim(0) != in_ch || wv.dim(3) != k {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input {:?} vs weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        if (h - 1) * stride + k < 2 * pad + 1 {
            return Err(Error::shape("conv_transpose2d", "empty output"));
        }
        let (ho, wo) = ((h - 1) * stride + k - 2 * pad, (wd - 1) * stride + k - 2 * pad);
        let geom = Window {
            channels: out_ch,
            height: ho,
            width: wo,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!(geom.out_height(), h);
        let p = h * wd;
        let xmat = kernels::batch_to_channel_major(xv.data(), batch, in_ch, p);
        let mut cols = vec![T::zero(); geom.patch_len() * batch * p];
        gemm(
            true,
            false,
            geom.patch_len(),
            batch * p,
            in_ch,
            T::one(),
            wv.data(),
            &xmat,
            T::zero(),
            &mut cols,
        );
        let mut y = vec![T::zero(); batch * out_ch * ho * wo];
        kernels::col2im(&cols, batch, geom, &mut y);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != out_ch {
                return Err(Error::shape("conv_transpose2d", format!("bias {:?}", bv.shape())));
            }
            add_channel_bias(&mut y, batch, out_ch, ho * wo, bv.data());
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let xmat = if self.rg(w) { xmat } else { Vec::new() };
        Ok(self.push(
            Tensor::from_vec(&[batch, out_ch, ho, wo], y)?,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                batch,
                in_ch,
                xmat,
            },
            rg,
        ))
    }

    /// Batch normalization with batch statistics. Works on `[B, C, H, W]` or
    /// `[B, C]`. Statistics are computed separately for each of `groups`
    /// contiguous sample groups.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let xv = self.value(x);
        let (batch, ch) = (xv.dim(0), xv.dim(1));
        let spatial: usize = xv.shape()[2..].iter().product();
        if groups == 0 || batch % groups != 0 {
            return Err(Error::shape(
                "batch_norm",
                format!("batch {batch} not divisible into {groups} groups"),
            ));
        }
        let per = batch / groups;
        let n = per * spatial;
        if n < 2 {
            return Err(Error::shape("batch_norm", "need at least two values per channel"));
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != ch || bv.len() != ch {
            return Err(Error::shape("batch_norm", "affine parameter length"));
        }
        let xd = xv.data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); groups * ch];
        let mut y = vec![T::zero(); xd.len()];
        let mut run_mean = vec![T::zero(); ch];
        let mut run_var = vec![T::zero(); ch];
        let nf = T::of(n as f64);
        for g in 0..groups {
            for c in 0..ch {
                let mut mean = T::zero();
                for b in g * per..(g + 1) * per {
                    let off = (b * ch + c) * spatial;
                    mean += xd[off..off + spatial].iter().copied().sum::<T>();
                }
                mean /= nf;
                let mut var = T::zero();
                for b in g * per..(g + 1) * per {
                    let off = (b * ch + c) * spatial;
                    for &v in &xd[off..off + spatial] {
                        var += (v - mean) * (v - mean);
                    }
                }
                let unbiased = var / T::of((n - 1) as f64);
                var /= nf;
                let is = T::one() / (var + eps).sqrt();
                inv_std[g * ch + c] = is;
                run_mean[c] += mean / T::of(groups as f64);
                run_var[c] += unbiased / T::of(groups as f64);
                let (ga, be) = (gv.data()[c], bv.data()[c]);
                for b in g * per..(g + 1) * per {
                    let off = (b * ch + c) * spatial;
                    for i in off..off + spatial {
                        let h = (xd[i] - mean) * is;
                        xhat[i] = h;
                        y[i] = ga * h + be;
                    }
                }
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let var = self.push(
            Tensor::from_vec(&shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((
            var,
            BatchStats {
                mean: run_mean,
                var: run_var,
            },
        ))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (batch, ch) = (xv.dim(0), xv.dim(1));
        let spatial: usize = xv.shape()[2..].iter().product();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != ch || bv.len() != ch || mean.len() != ch || var.len() != ch {
            return Err(Error::shape("batch_norm_eval", "statistics length"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut y = xv.data().to_vec();
        for b in 0..batch {
            for c in 0..ch {
                let (m, is, ga, be) = (mean[c], inv_std[c], gv.data()[c], bv.data()[c]);
                let off = (b * ch + c) * spatial;
                for v in &mut y[off..off + spatial] {
                    *v = ga * (*v - m) * is + be;
                }
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_vec(&shape, y)?,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(y, Op::Sigmoid(x), rg)
    }

    /// Global average pool `[B, C, H, W] -> [B, C]`.
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_rank("avg_pool", xv, 4)?;
        let (batch, ch) = (xv.dim(0), xv.dim(1));
        let spatial = xv.dim(2) * xv.dim(3);
        let inv = T::one() / T::of(spatial as f64);
        let y: Vec<T> = xv
            .data()
            .chunks(spatial)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[batch, ch], y)?, Op::AvgPool(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    /// Scale each row of a `[B, D]` tensor to unit Euclidean norm; rows with
    /// norm below `eps` are divided by `eps` instead.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        check_rank("l2_normalize_rows", xv, 2)?;
        let mut y = xv.clone();
        let mut norms = Vec::with_capacity(xv.dim(0));
        for i in 0..xv.dim(0) {
            let row = y.row_mut(i);
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(y, Op::L2Normalize { x, norms, eps }, rg))
    }

    /// Row-wise dot product of two `[M, K]` tensors, giving `[M]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_rank("row_dot", av, 2)?;
        if av.shape() != bv.shape() {
            return Err(Error::shape("row_dot", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let y: Vec<T> = (0..av.dim(0))
            .map(|i| av.row(i).iter().zip(bv.row(i)).map(|(&p, &q)| p * q).sum())
            .collect();
        let m = av.dim(0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[m], y)?, Op::RowDot(a, b), rg))
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = Tensor::concat_outer(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::ConcatRows(a, b), rg))
    }

    /// Gather rows `idx` of `x` along the leading axis.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.dim(0)) {
            return Err(Error::shape("select_rows", format!("row {bad} of {}", xv.dim(0))));
        }
        let y = xv.select_outer(idx);
        let rg = self.rg(x);
        Ok(self.push(y, Op::SelectRows(x, idx.to_vec()), rg))
    }

    /// Concatenate `[M, Na]` and `[M, Nb]` (a rank-1 `[M]` counts as one column).
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let m = av.dim(0);
        let na = if av.rank() == 1 { 1 } else { av.dim(1) };
        let nb = if bv.rank() == 1 { 1 } else { bv.dim(1) };
        if bv.dim(0) != m || av.rank() > 2 || bv.rank() > 2 {
            return Err(Error::shape("concat_cols", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut y = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            y.extend_from_slice(&av.data()[i * na..(i + 1) * na]);
            y.extend_from_slice(&bv.data()[i * nb..(i + 1) * nb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[m, na + nb], y)?, Op::ConcatCols(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut y = av.clone();
        y.add_assign(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p * q).collect();
        let y = Tensor::from_vec(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(y, Op::Scale(x, s), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(y, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Mean over rows of `-logits[i, t_i] + logsumexp_{j in D_i} logits[i, j]`,
    /// where `D_i` is row `i` of `include` (all columns when `None`).
    pub fn nce(&mut self, logits: Var, targets: &[usize], include: Option<&[bool]>) -> Result<Var> {
        let lv = self.value(logits);
        check_rank("nce", lv, 2)?;
        let (m, n) = (lv.dim(0), lv.dim(1));
        if targets.len() != m {
            return Err(Error::shape("nce", format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(mask) = include {
            if mask.len() != m * n {
                return Err(Error::shape("nce", "mask size"));
            }
        }
        let mut probs = vec![T::zero(); m * n];
        let mut total = T::zero();
        for i in 0..m {
            let t = targets[i];
            if t >= n {
                return Err(Error::InvalidArgument(format!("target {t} out of range {n}")));
            }
            let row = lv.row(i);
            let inc = |j: usize| include.is_none_or(|mask| mask[i * n + j]);
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if inc(j) && v > mx {
                    mx = v;
                }
            }
            if mx == T::neg_infinity() {
                return Err(Error::InvalidArgument(format!("row {i} has an empty denominator")));
            }
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if inc(j) {
                    let e = (v - mx).exp();
                    probs[i * n + j] = e;
                    z += e;
                }
            }
            for p in &mut probs[i * n..(i + 1) * n] {
                *p /= z;
            }
            total += mx + z.ln() - row[t];
        }
        let y = Tensor::scalar(total / T::of(m as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            y,
            Op::Nce {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let s: T = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum();
        let y = Tensor::scalar(s / T::of(av.len() as f64));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mse(a, b), rg))
    }

    /// `Σ w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let val = self.value(v);
            if val.len() != 1 {
                return Err(Error::shape("weighted_sum", "terms must be scalars"));
            }
            total += w * val.item();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Gradients of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, inp, out) = (xv.dim(0), xv.dim(1), wv.dim(0));
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); batch * inp];
                    gemm(false, false, batch, inp, out, T::one(), gy.data(), wv.data(), T::zero(), &mut dx);
                    self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); out * inp];
                    gemm(true, false, out, inp, batch, T::one(), gy.data(), xv.data(), T::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); out];
                        for row in gy.data().chunks(out) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[out], db)?);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                out_ch,
                cols,
            } => {
                let p = geom.positions();
                let gmat = kernels::batch_to_channel_major(gy.data(), *batch, *out_ch, p);
                let wv = self.value(*w);
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    gemm(false, true, *out_ch, geom.patch_len(), batch * p, T::one(), &gmat, cols, T::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw)?);
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); geom.patch_len() * batch * p];
                    gemm(true, false, geom.patch_len(), batch * p, *out_ch, T::one(), wv.data(), &gmat, T::zero(), &mut dcols);
                    let xv = self.value(*x);
                    let mut dx = vec![T::zero(); xv.len()];
                    kernels::col2im(&dcols, *batch, *geom, &mut dx);
                    self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let db = channel_sums(gy.data(), *batch, *out_ch, p);
                        self.accumulate(grads, *b, Tensor::from_vec(&[*out_ch], db)?);
                    }
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                batch,
                in_ch,
                xmat,
            } => {
                let p = geom.positions();
                let mut dcols = vec![T::zero(); geom.patch_len() * batch * p];
                kernels::im2col(gy.data(), *batch, *geom, &mut dcols);
                let wv = self.value(*w);
                if self.rg(*x) {
                    let mut dxmat = vec![T::zero(); in_ch * batch * p];
                    gemm(false, false, *in_ch, batch * p, geom.patch_len(), T::one(), wv.data(), &dcols, T::zero(), &mut dxmat);
                    let dx = kernels::channel_to_batch_major(&dxmat, *batch, *in_ch, p);
                    self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    gemm(false, true, *in_ch, geom.patch_len(), batch * p, T::one(), xmat, &dcols, T::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let db = channel_sums(gy.data(), *batch, geom.channels, geom.height * geom.width);
                        self.accumulate(grads, *b, Tensor::from_vec(&[geom.channels], db)?);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let xv = self.value(*x);
                let (batch, ch) = (xv.dim(0), xv.dim(1));
                let spatial: usize = xv.shape()[2..].iter().product();
                let per = batch / groups;
                let n = T::of((per * spatial) as f64);
                let gv = self.value(*gamma).data();
                let g = gy.data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                for gi in 0..*groups {
                    for c in 0..ch {
                        let mut sum_g = T::zero();
                        let mut sum_gx = T::zero();
                        for bi in gi * per..(gi + 1) * per {
                            let off = (bi * ch + c) * spatial;
                            for i in off..off + spatial {
                                sum_g += g[i];
                                sum_gx += g[i] * xhat[i];
                            }
                        }
                        dgamma[c] += sum_gx;
                        dbeta[c] += sum_g;
                        let k = gv[c] * inv_std[gi * ch + c] / n;
                        for bi in gi * per..(gi + 1) * per {
                            let off = (bi * ch + c) * spatial;
                            for i in off..off + spatial {
                                dx[i] = k * (n * g[i] - sum_g - xhat[i] * sum_gx);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                self.accumulate(grads, *gamma, Tensor::from_vec(&[ch], dgamma)?);
                self.accumulate(grads, *beta, Tensor::from_vec(&[ch], dbeta)?);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let (batch, ch) = (xv.dim(0), xv.dim(1));
                let spatial: usize = xv.shape()[2..].iter().product();
                let gv = self.value(*gamma).data();
                let g = gy.data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let off = (b * ch + c) * spatial;
                        for i in off..off + spatial {
                            dx[i] = g[i] * gv[c] * inv_std[c];
                            dgamma[c] += g[i] * (xv.data()[i] - mean[c]) * inv_std[c];
                            dbeta[c] += g[i];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                self.accumulate(grads, *gamma, Tensor::from_vec(&[ch], dgamma)?);
                self.accumulate(grads, *beta, Tensor::from_vec(&[ch], dbeta)?);
            }
            Op::Relu(x) => {
                let data = gy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &o)| if o > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), data)?);
            }
            Op::Sigmoid(x) => {
                let data = gy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &o)| g * o * (T::one() - o))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), data)?);
            }
            Op::AvgPool(x) => {
                let xv = self.value(*x);
                let spatial = xv.dim(2) * xv.dim(3);
                let inv = T::one() / T::of(spatial as f64);
                let mut dx = Vec::with_capacity(xv.len());
                for &g in gy.data() {
                    dx.extend(std::iter::repeat_n(g * inv, spatial));
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, gy.clone().reshape(&shape)?);
            }
            Op::L2Normalize { x, norms, eps } => {
                let mut dx = gy.clone();
                for (i, &n) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let gr = dx.row_mut(i);
                    if n > *eps {
                        let proj: T = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                        for (g, &yy) in gr.iter_mut().zip(yr) {
                            *g = (*g - yy * proj) / n;
                        }
                    } else {
                        for g in gr.iter_mut() {
                            *g /= n;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = av.dim(1);
                let scale_rows = |src: &Tensor<T>| -> Result<Tensor<T>> {
                    let mut out = src.clone();
                    for (i, row) in out.data_mut().chunks_mut(k).enumerate() {
                        let g = gy.data()[i];
                        for v in row {
                            *v *= g;
                        }
                    }
                    Ok(out)
                };
                if self.rg(*a) {
                    self.accumulate(grads, *a, scale_rows(bv)?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, scale_rows(av)?);
                }
            }
            Op::ConcatRows(a, b) => {
                let ma = self.value(*a).dim(0);
                let total = gy.dim(0);
                self.accumulate(grads, *a, gy.slice_outer(0, ma));
                self.accumulate(grads, *b, gy.slice_outer(ma, total));
            }
            Op::SelectRows(x, idx) => {
                let xv = self.value(*x);
                let width = xv.len() / xv.dim(0).max(1);
                let mut dx = Tensor::zeros(xv.shape());
                for (r, &i) in idx.iter().enumerate() {
                    let src = &gy.data()[r * width..(r + 1) * width];
                    for (d, &g) in dx.data_mut()[i * width..(i + 1) * width].iter_mut().zip(src) {
                        *d += g;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let m = av.dim(0);
                let na = av.len() / m;
                let nb = bv.len() / m;
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for row in gy.data().chunks(na + nb) {
                    da.extend_from_slice(&row[..na]);
                    db.extend_from_slice(&row[na..]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(av.shape(), da)?);
                self.accumulate(grads, *b, Tensor::from_vec(bv.shape(), db)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let prod = |o: &Tensor<T>| -> Result<Tensor<T>> {
                    Tensor::from_vec(o.shape(), gy.data().iter().zip(o.data()).map(|(&g, &v)| g * v).collect())
                };
                if self.rg(*a) {
                    self.accumulate(grads, *a, prod(bv)?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, prod(av)?);
                }
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, gy.map(|g| g * *s));
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), gy.item()));
            }
            Op::Nce { logits, targets, probs } => {
                let lv = self.value(*logits);
                let (m, n) = (lv.dim(0), lv.dim(1));
                let k = gy.item() / T::of(m as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * k).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * n + t] -= k;
                }
                self.accumulate(grads, *logits, Tensor::from_vec(&[m, n], dl)?);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = T::of(2.0) * gy.item() / T::of(av.len() as f64);
                let diff: Vec<T> = av.data().iter().zip(bv.data()).map(|(&p, &q)| (p - q) * k).collect();
                let da = Tensor::from_vec(av.shape(), diff)?;
                if self.rg(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(gy.item() * w));
                }
            }
        }
        Ok(())
    }
}

fn add_channel_bias<T: Real>(y: &mut [T], batch: usize, ch: usize, p: usize, bias: &[T]) {
    for b in 0..batch {
        for c in 0..ch {
            for v in &mut y[(b * ch + c) * p..(b * ch + c + 1) * p] {
                *v += bias[c];
            }
        }
    }
}

fn channel_sums<T: Real>(g: &[T], batch: usize, ch: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); ch];
    for b in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            *o += g[(b * ch + c) * p..(b * ch + c + 1) * p].iter().copied().sum::<T>();
        }
    }
    out
}

#[cfg(test)]
#[path = "tape_tests.rs"]
mod tests;
