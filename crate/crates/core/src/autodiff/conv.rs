//! Valid-padding strided convolution and transposed convolution over NHWC
//! tensors, lowered to [`gemm`] through im2col / col2im.
//!
//! Kernel layouts: convolution `[c_out, c_in, k, k]`, transposed convolution
//! `[c_in, c_out, k, k]`. With these layouts a convolution kernel reused as a
//! transposed-convolution kernel gives the exact adjoint operator.

use crate::tensor::{gemm, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub batch: usize,
    /// Extent of the larger (image) side.
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Extent of the smaller (patch-grid) side.
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn conv_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
        (input >= kernel && stride >= 1).then(|| (input - kernel) / stride + 1)
    }

    pub fn deconv_extent(input: usize, kernel: usize, stride: usize) -> usize {
        (input - 1) * stride + kernel
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Gathers patches: row `(n, oy, ox)`, column `(c, ky, kx)`.
pub fn im2col<T: Real>(image: &[T], g: &Geometry) -> Vec<T> {
    let patch = g.patch_len();
    let kk = g.kernel * g.kernel;
    let mut cols = vec![T::zero(); g.positions() * patch];
    for n in 0..g.batch {
        let img = &image[n * g.height * g.width * g.channels..];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((n * g.out_h + oy) * g.out_w + ox) * patch;
                let dst = &mut cols[row..row + patch];
                for ky in 0..g.kernel {
                    let y = oy * g.stride + ky;
                    for kx in 0..g.kernel {
                        let x = ox * g.stride + kx;
                        let src = &img[(y * g.width + x) * g.channels..][..g.channels];
                        let base = ky * g.kernel + kx;
                        for (c, &v) in src.iter().enumerate() {
                            dst[c * kk + base] = v;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds patches back onto an image; the adjoint of [`im2col`].
pub fn col2im<T: Real>(cols: &[T], g: &Geometry, image: &mut [T]) {
    let patch = g.patch_len();
    let kk = g.kernel * g.kernel;
    for n in 0..g.batch {
        let img = &mut image[n * g.height * g.width * g.channels..];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((n * g.out_h + oy) * g.out_w + ox) * patch;
                let src = &cols[row..row + patch];
                for ky in 0..g.kernel {
                    let y = oy * g.stride + ky;
                    for kx in 0..g.kernel {
                        let x = ox * g.stride + kx;
                        let dst = &mut img[(y * g.width + x) * g.channels..][..g.channels];
                        let base = ky * g.kernel + kx;
                        for (c, d) in dst.iter_mut().enumerate() {
                            *d += src[c * kk + base];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn bias_grad<T: Real>(dout: &[T], db: &mut [T]) {
    for row in dout.chunks_exact(db.len()) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
}

/// `g` describes the input image and the output grid.
pub fn conv_forward<T: Real>(x: &[T], w: &[T], b: &[T], c_out: usize, g: &Geometry) -> Vec<T> {
    let cols = im2col(x, g);
    let mut out = vec![T::zero(); g.positions() * c_out];
    gemm(g.positions(), g.patch_len(), c_out, &cols, false, w, true, T::zero(), &mut out);
    add_bias(&mut out, b);
    out
}

/// Accumulates parameter gradients; returns the input gradient if requested.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    c_out: usize,
    g: &Geometry,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    if let Some(dw) = dw {
        let cols = im2col(x, g);
        gemm(c_out, g.positions(), g.patch_len(), dout, true, &cols, false, T::one(), dw);
    }
    if let Some(db) = db {
        bias_grad(dout, db);
    }
    want_dx.then(|| {
        let mut dcols = vec![T::zero(); g.positions() * g.patch_len()];
        gemm(g.positions(), c_out, g.patch_len(), dout, false, w, false, T::zero(), &mut dcols);
        let mut dx = vec![T::zero(); x.len()];
        col2im(&dcols, g, &mut dx);
        dx
    })
}

/// Here `g` describes the *output* image (channels = `c_out`) and the input
/// grid (`out_h`, `out_w` = input spatial extent).
pub fn deconv_forward<T: Real>(x: &[T], w: &[T], b: &[T], c_in: usize, g: &Geometry) -> Vec<T> {
    let mut cols = vec![T::zero(); g.positions() * g.patch_len()];
    gemm(g.positions(), c_in, g.patch_len(), x, false, w, false, T::zero(), &mut cols);
    let mut out = vec![T::zero(); g.batch * g.height * g.width * g.channels];
    col2im(&cols, g, &mut out);
    add_bias(&mut out, b);
    out
}

#[allow(clippy::too_many_arguments)]
pub fn deconv_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    c_in: usize,
    g: &Geometry,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let dcols = im2col(dout, g);
    if let Some(dw) = dw {
        gemm(c_in, g.positions(), g.patch_len(), x, true, &dcols, false, T::one(), dw);
    }
    if let Some(db) = db {
        bias_grad(dout, db);
    }
    want_dx.then(|| {
        let mut dx = vec![T::zero(); x.len()];
        gemm(g.positions(), g.patch_len(), c_in, &dcols, false, w, true, T::zero(), &mut dx);
        dx
    })
}
