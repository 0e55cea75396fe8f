//! Convolution lowering helpers shared by the forward and backward passes.

use crate::tensor::Real;

/// Spatial geometry of a strided, zero-padded 2-D window scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Rows of the lowered matrix: one per (channel, ky, kx).
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn valid(&self) -> bool {
        self.kernel > 0
            && self.stride > 0
            && self.height + 2 * self.pad >= self.kernel
            && self.width + 2 * self.pad >= self.kernel
    }
}

/// Lower a batch `[B, C, H, W]` into `cols[C*K*K, B*P]`, column `b*P + p`.
pub fn im2col<T: Real>(x: &[T], batch: usize, g: Window, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let p = ho * wo;
    let total_cols = batch * p;
    let plane = g.height * g.width;
    debug_assert_eq!(cols.len(), g.patch_len() * total_cols);
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst_row = &mut cols[row * total_cols..(row + 1) * total_cols];
                for b in 0..batch {
                    let src = &x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    let dst = &mut dst_row[b * p..(b + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let out = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= g.height as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *o = if ix < 0 || ix >= g.width as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `x` (`x` is accumulated into).
pub fn col2im<T: Real>(cols: &[T], batch: usize, g: Window, x: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let p = ho * wo;
    let total_cols = batch * p;
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src_row = &cols[row * total_cols..(row + 1) * total_cols];
                for b in 0..batch {
                    let dst = &mut x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    let src = &src_row[b * p..(b + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[B, C, P]` -> `[C, B*P]`.
pub fn batch_to_channel_major<T: Real>(x: &[T], batch: usize, channels: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[(b * channels + c) * p..(b * channels + c + 1) * p];
            out[c * batch * p + b * p..c * batch * p + (b + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `[C, B*P]` -> `[B, C, P]`.
pub fn channel_to_batch_major<T: Real>(x: &[T], batch: usize, channels: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for c in 0..channels {
        for b in 0..batch {
            let src = &x[c * batch * p + b * p..c * batch * p + (b + 1) * p];
            out[(b * channels + c) * p..(b * channels + c + 1) * p].copy_from_slice(src);
        }
    }
    out
}
