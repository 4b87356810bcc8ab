//! Dense kernels shared by the graph ops and the incremental samplers.

use alloc::vec;
use alloc::vec::Vec;

use crate::Real;

/// `c (m x n) += a (m x k) * b (k x n)`, all contiguous row-major.
pub fn matmul_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(m, k, n, T::one(), a, (k as isize, 1), b, (n as isize, 1), T::one(), c, (n as isize, 1));
}

pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_acc(m, k, n, a, b, &mut c);
    c
}

/// `c (m x n) += a^T * b` where `a` is stored `k x m`.
pub fn matmul_at_b_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(m, k, n, T::one(), a, (1, m as isize), b, (n as isize, 1), T::one(), c, (n as isize, 1));
}

/// `c (m x n) += a * b^T` where `b` is stored `n x k`.
pub fn matmul_a_bt_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(m, k, n, T::one(), a, (k as isize, 1), b, (1, k as isize), T::one(), c, (n as isize, 1));
}

/// Geometry of a stride-1, length-preserving dilated convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub len: usize,
}

impl ConvGeom {
    fn needs_unfold(&self) -> bool {
        self.kernel != 1 || self.pad_left != 0
    }
}

/// Unfolds `x (c_in x len)` into `(c_in*kernel) x len` columns.
fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let (k, t_len) = (g.kernel, g.len);
    let mut col = vec![T::zero(); g.c_in * k * t_len];
    for ci in 0..g.c_in {
        let src = &x[ci * t_len..(ci + 1) * t_len];
        for kk in 0..k {
            let row = &mut col[(ci * k + kk) * t_len..(ci * k + kk + 1) * t_len];
            let shift = (kk * g.dilation) as isize - g.pad_left as isize;
            let (lo, hi) = valid_range(shift, t_len);
            for t in lo..hi {
                row[t] = src[(t as isize + shift) as usize];
            }
        }
    }
    col
}

fn col2im_acc<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (k, t_len) = (g.kernel, g.len);
    for ci in 0..g.c_in {
        let dst = &mut dx[ci * t_len..(ci + 1) * t_len];
        for kk in 0..k {
            let row = &col[(ci * k + kk) * t_len..(ci * k + kk + 1) * t_len];
            let shift = (kk * g.dilation) as isize - g.pad_left as isize;
            let (lo, hi) = valid_range(shift, t_len);
            for t in lo..hi {
                dst[(t as isize + shift) as usize] += row[t];
            }
        }
    }
}

/// Output positions `t` for which `t + shift` lies in `[0, len)`.
fn valid_range(shift: isize, len: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

pub fn conv1d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let ck = g.c_in * g.kernel;
    if g.needs_unfold() {
        let col = im2col(g, x);
        matmul(g.c_out, ck, g.len, w, &col)
    } else {
        matmul(g.c_out, ck, g.len, w, x)
    }
}

/// Accumulates input and weight gradients of [`conv1d_forward`].
pub fn conv1d_backward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], dy: &[T], dx: Option<&mut [T]>, dw: Option<&mut [T]>) {
    let ck = g.c_in * g.kernel;
    if let Some(dw) = dw {
        if g.needs_unfold() {
            let col = im2col(g, x);
            matmul_a_bt_acc(g.c_out, g.len, ck, dy, &col, dw);
        } else {
            matmul_a_bt_acc(g.c_out, g.len, ck, dy, x, dw);
        }
    }
    if let Some(dx) = dx {
        if g.needs_unfold() {
            let mut dcol = vec![T::zero(); ck * g.len];
            matmul_at_b_acc(ck, g.c_out, g.len, w, dy, &mut dcol);
            col2im_acc(g, &dcol, dx);
        } else {
            matmul_at_b_acc(ck, g.c_out, g.len, w, dy, dx);
        }
    }
}

/// Geometry of an upsampling transposed convolution producing exactly
/// `len * stride` outputs. The full-length output is cropped by `crop`
/// samples on the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransposedGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub crop: usize,
    pub len: usize,
}

impl TransposedGeom {
    pub fn out_len(&self) -> usize {
        self.len * self.stride
    }
}

/// `w` is `c_in x c_out x kernel`.
pub fn conv_transpose1d_forward<T: Real>(g: &TransposedGeom, x: &[T], w: &[T]) -> Vec<T> {
    let ok = g.c_out * g.kernel;
    let mut cols = vec![T::zero(); ok * g.len];
    matmul_at_b_acc(ok, g.c_in, g.len, w, x, &mut cols);
    let out_len = g.out_len();
    let mut y = vec![T::zero(); g.c_out * out_len];
    for co in 0..g.c_out {
        let dst = &mut y[co * out_len..(co + 1) * out_len];
        for kk in 0..g.kernel {
            let row = &cols[(co * g.kernel + kk) * g.len..(co * g.kernel + kk + 1) * g.len];
            for (t, &v) in row.iter().enumerate() {
                let pos = (t * g.stride + kk) as isize - g.crop as isize;
                if pos >= 0 && (pos as usize) < out_len {
                    dst[pos as usize] += v;
                }
            }
        }
    }
    y
}

pub fn conv_transpose1d_backward<T: Real>(g: &TransposedGeom, x: &[T], w: &[T], dy: &[T], dx: Option<&mut [T]>, dw: Option<&mut [T]>) {
    let ok = g.c_out * g.kernel;
    let out_len = g.out_len();
    let mut dcols = vec![T::zero(); ok * g.len];
    for co in 0..g.c_out {
        let src = &dy[co * out_len..(co + 1) * out_len];
        for kk in 0..g.kernel {
            let row = &mut dcols[(co * g.kernel + kk) * g.len..(co * g.kernel + kk + 1) * g.len];
            for (t, slot) in row.iter_mut().enumerate() {
                let pos = (t * g.stride + kk) as isize - g.crop as isize;
                if pos >= 0 && (pos as usize) < out_len {
                    *slot = src[pos as usize];
                }
            }
        }
    }
    if let Some(dx) = dx {
        matmul_acc(g.c_in, ok, g.len, w, &dcols, dx);
    }
    if let Some(dw) = dw {
        matmul_a_bt_acc(g.c_in, g.len, ok, x, &dcols, dw);
    }
}

/// Stride-`stride` convolution sharing the kernel layout of the transposed
/// convolution: `out[ci, t] = sum_{co,k} w[ci, co, k] * y[co, t*stride + k - crop]`.
///
/// Written as direct loops; it is the adjoint of [`conv_transpose1d_forward`].
pub fn strided_conv1d<T: Real>(g: &TransposedGeom, y: &[T], w: &[T]) -> Vec<T> {
    let out_len = g.out_len();
    let mut out = vec![T::zero(); g.c_in * g.len];
    for ci in 0..g.c_in {
        for t in 0..g.len {
            let mut acc = T::zero();
            for co in 0..g.c_out {
                for kk in 0..g.kernel {
                    let pos = (t * g.stride + kk) as isize - g.crop as isize;
                    if pos >= 0 && (pos as usize) < out_len {
                        acc += w[(ci * g.c_out + co) * g.kernel + kk] * y[co * out_len + pos as usize];
                    }
                }
            }
            out[ci * g.len + t] = acc;
        }
    }
    out
}

/// `y (rows) = w (rows x cols) * x (cols) + y`.
pub fn matvec_acc<T: Real>(rows: usize, cols: usize, w: &[T], x: &[T], y: &mut [T]) {
    for (r, out) in y.iter_mut().enumerate().take(rows) {
        let wr = &w[r * cols..(r + 1) * cols];
        let mut acc = T::zero();
        for (a, b) in wr.iter().zip(x) {
            acc += *a * *b;
        }
        *out += acc;
    }
}
