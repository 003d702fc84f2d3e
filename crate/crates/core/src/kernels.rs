//! Slice-level numeric kernels shared by the forward and backward passes.

use crate::tensor::Float;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn matmul_acc<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, k as isize, 1, b, n as isize, 1, c);
}

/// `c[m×n] += a[m×k] · bᵀ` where `b` is stored row-major as `n×k`.
pub fn matmul_nt_acc<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, k as isize, 1, b, 1, k as isize, c);
}

/// `c[m×n] += aᵀ · b` where `a` is stored row-major as `k×m` and `b` as `k×n`.
pub fn matmul_tn_acc<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, 1, m as isize, b, n as isize, 1, c);
}

/// Geometry of a 2-D cross-correlation over a `[rows, cols, channels]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output extent `floor((in + 2·pad − k)/stride) + 1`, or `None` when the kernel does not fit.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    pub fn out_h(&self) -> usize {
        Self::out_extent(self.in_h, self.kernel, self.stride, self.pad).expect("validated geometry")
    }

    pub fn out_w(&self) -> usize {
        Self::out_extent(self.in_w, self.kernel, self.stride, self.pad).expect("validated geometry")
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Calls `f(row, col_offset, src_index)` for every in-bounds tap of every output pixel.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let k = self.kernel;
        let c = self.channels;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = oy * ow + ox;
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        let col = (ky * k + kx) * c;
                        let src = (iy as usize * self.in_w + ix as usize) * c;
                        f(row, col, src);
                    }
                }
            }
        }
    }
}

/// Unfolds `x` into a `[out_h·out_w, k·k·C]` patch matrix (zero padding).
pub fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let pl = g.patch_len();
    let c = g.channels;
    let mut cols = vec![T::zero(); g.out_h() * g.out_w() * pl];
    g.for_each_tap(|row, col, src| {
        let dst = row * pl + col;
        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
    });
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds patch rows back onto an image.
pub fn col2im<T: Float>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let pl = g.patch_len();
    let c = g.channels;
    let mut x = vec![T::zero(); g.in_h * g.in_w * c];
    g.for_each_tap(|row, col, src| {
        let s = row * pl + col;
        for i in 0..c {
            x[src + i] = x[src + i] + cols[s + i];
        }
    });
    x
}

/// One axis of align-corners-false bilinear sampling: `(i0, i1, frac)` per output index.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}
