//! Forward and backward kernels for the layer primitives. All buffers are
//! dense NHWC; convolutions lower to GEMM through an im2col buffer that is
//! processed a few samples at a time to bound memory.

use super::Scalar;

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 22;

/// `(output size, padding before)` for TensorFlow-style "same" padding.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

/// Output size and leading padding; `same == false` means no padding.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, same: bool) -> Option<(usize, usize)> {
    if same {
        Some(same_padding(input, kernel, stride))
    } else if input >= kernel {
        Some(((input - kernel) / stride + 1, 0))
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn pixels_out(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    fn samples_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.pixels_out() * self.k()).max(1)).clamp(1, self.n.max(1))
    }

    fn in_sample(&self) -> usize {
        self.h * self.w * self.cin
    }

    fn out_sample(&self) -> usize {
        self.ho * self.wo * self.cout
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], n0: usize, n1: usize, cols: &mut [T]) {
    let k = g.k();
    let mut row = 0;
    for n in n0..n1 {
        let xs = &x[n * g.in_sample()..(n + 1) * g.in_sample()];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dst = &mut cols[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        let d = &mut dst[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                        if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                            let s = ((iy as usize) * g.w + ix as usize) * g.cin;
                            d.copy_from_slice(&xs[s..s + g.cin]);
                        } else {
                            d.fill(T::zero());
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], n0: usize, n1: usize, dx: &mut [T]) {
    let k = g.k();
    let in_sample = g.in_sample();
    let mut row = 0;
    for n in n0..n1 {
        let xs = &mut dx[n * in_sample..(n + 1) * in_sample];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let src = &cols[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        let s = ((iy as usize) * g.w + ix as usize) * g.cin;
                        let c = &src[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                        for (a, &b) in xs[s..s + g.cin].iter_mut().zip(c) {
                            *a = *a + b;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation `out = conv(x, w) + bias`.
pub(crate) fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], wt: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let k = g.k();
    let rows_per_sample = g.pixels_out();
    if g.is_pointwise() {
        T::gemm(
            g.n * rows_per_sample,
            k,
            g.cout,
            T::one(),
            x,
            k as isize,
            1,
            wt,
            g.cout as isize,
            1,
            T::zero(),
            out,
            g.cout as isize,
            1,
        );
    } else {
        let chunk = g.samples_per_chunk();
        let mut cols = vec![T::zero(); chunk * rows_per_sample * k];
        let mut n0 = 0;
        while n0 < g.n {
            let n1 = (n0 + chunk).min(g.n);
            let rows = (n1 - n0) * rows_per_sample;
            im2col(g, x, n0, n1, &mut cols[..rows * k]);
            T::gemm(
                rows,
                k,
                g.cout,
                T::one(),
                &cols[..rows * k],
                k as isize,
                1,
                wt,
                g.cout as isize,
                1,
                T::zero(),
                &mut out[n0 * g.out_sample()..n1 * g.out_sample()],
                g.cout as isize,
                1,
            );
            n0 = n1;
        }
    }
    if let Some(b) = bias {
        for px in out.chunks_exact_mut(g.cout) {
            for (o, &bb) in px.iter_mut().zip(b) {
                *o = *o + bb;
            }
        }
    }
}

/// Accumulates gradients of a convolution into whichever of `dx`, `dw`,
/// `dbias` are requested.
pub(crate) fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    wt: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let k = g.k();
    if let Some(db) = dbias {
        for px in dy.chunks_exact(g.cout) {
            for (d, &v) in db.iter_mut().zip(px) {
                *d = *d + v;
            }
        }
    }
    let rows_per_sample = g.pixels_out();
    if g.is_pointwise() {
        let rows = g.n * rows_per_sample;
        if let Some(dw) = dw {
            T::gemm(k, rows, g.cout, T::one(), x, 1, k as isize, dy, g.cout as isize, 1, T::one(), dw, g.cout as isize, 1);
        }
        if let Some(dx) = dx {
            T::gemm(rows, g.cout, k, T::one(), dy, g.cout as isize, 1, wt, 1, g.cout as isize, T::one(), dx, k as isize, 1);
        }
        return;
    }
    let chunk = g.samples_per_chunk();
    let mut cols = vec![T::zero(); chunk * rows_per_sample * k];
    let mut dw = dw;
    let mut dx = dx;
    let mut n0 = 0;
    while n0 < g.n {
        let n1 = (n0 + chunk).min(g.n);
        let rows = (n1 - n0) * rows_per_sample;
        let dy_chunk = &dy[n0 * g.out_sample()..n1 * g.out_sample()];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(g, x, n0, n1, &mut cols[..rows * k]);
            T::gemm(
                k,
                rows,
                g.cout,
                T::one(),
                &cols[..rows * k],
                1,
                k as isize,
                dy_chunk,
                g.cout as isize,
                1,
                T::one(),
                dw,
                g.cout as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            T::gemm(
                rows,
                g.cout,
                k,
                T::one(),
                dy_chunk,
                g.cout as isize,
                1,
                wt,
                1,
                g.cout as isize,
                T::zero(),
                &mut cols[..rows * k],
                k as isize,
                1,
            );
            col2im_add(g, &cols[..rows * k], n0, n1, dx);
        }
        n0 = n1;
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub window: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Windowed maximum; padding cells never win. Returns the flat input index
/// of each maximum (first in scan order on ties).
pub(crate) fn max_pool_forward<T: Scalar>(g: &PoolGeom, x: &[T], out: &mut [T]) -> Vec<u32> {
    let mut argmax = vec![0u32; out.len()];
    let mut o = 0;
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                for ch in 0..g.c {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..g.window {
                        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        for kx in 0..g.window {
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if ix < 0 || ix as usize >= g.w {
                                continue;
                            }
                            let i = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c + ch;
                            if best_i == usize::MAX || x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    out[o] = best;
                    argmax[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
    argmax
}

/// `out[n, 2y+a, 2x+b, c] = x[n, y, x, c]`.
pub(crate) fn unpool_forward<T: Scalar>(n: usize, h: usize, w: usize, c: usize, x: &[T], out: &mut [T]) {
    let w2 = 2 * w;
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let src = &x[((b * h + y) * w + xx) * c..][..c];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let o = ((b * 2 * h + 2 * y + dy) * w2 + 2 * xx + dx) * c;
                        out[o..o + c].copy_from_slice(src);
                    }
                }
            }
        }
    }
}

pub(crate) fn unpool_backward<T: Scalar>(n: usize, h: usize, w: usize, c: usize, dy: &[T], dx: &mut [T]) {
    let w2 = 2 * w;
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let dst = &mut dx[((b * h + y) * w + xx) * c..][..c];
                for oy in 0..2 {
                    for ox in 0..2 {
                        let o = ((b * 2 * h + 2 * y + oy) * w2 + 2 * xx + ox) * c;
                        for (d, &g) in dst.iter_mut().zip(&dy[o..o + c]) {
                            *d = *d + g;
                        }
                    }
                }
            }
        }
    }
}
