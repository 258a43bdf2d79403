//! Raw forward/backward kernels for the spatial ops, NCHW layout.

use crate::scalar::{matmul_into, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn hout(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn wout(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Output columns `ox` whose input column `ox*stride + kx - pad` is inside `[0, w)`.
fn valid_range(g: &ConvGeom, kx: usize, wo: usize) -> (usize, usize) {
    let off = kx as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let hi_excl = (g.w as isize - off + s - 1) / s;
    let hi = hi_excl.clamp(0, wo as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (ho, wo) = (g.hout(), g.wout());
    let hw = ho * wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_range(g, kx, wo);
                let off = kx as isize - g.pad as isize;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let start = (lo as isize * g.stride as isize + off) as usize;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (j, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src[start + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (ho, wo) = (g.hout(), g.wout());
    let hw = ho * wo;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_range(g, kx, wo);
                if lo >= hi {
                    continue;
                }
                let start = (lo as isize * g.stride as isize + kx as isize - g.pad as isize) as usize;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * wo + lo..oy * wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in line[start..start + hi - lo].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in s.iter().enumerate() {
                            line[start + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let hw = g.hout() * g.wout();
    let kk = g.col_rows();
    let mut out = vec![T::zero(); g.n * g.cout * hw];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * hw] };
    for n in 0..g.n {
        let xn = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let on = &mut out[n * g.cout * hw..(n + 1) * g.cout * hw];
        if let Some(b) = bias {
            for (c, chunk) in on.chunks_mut(hw).enumerate() {
                chunk.fill(b[c]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            matmul_into(w, false, xn, false, g.cout, kk, hw, beta, on);
        } else {
            im2col(g, xn, &mut col);
            matmul_into(w, false, &col, false, g.cout, kk, hw, beta, on);
        }
    }
    out
}

/// Returns `(dx, dw, dbias)`; `dx` only when requested.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let hw = g.hout() * g.wout();
    let kk = g.col_rows();
    let mut dw = vec![T::zero(); g.cout * kk];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = if need_dx { Some(vec![T::zero(); g.n * g.cin * g.h * g.w]) } else { None };
    let mut col = vec![T::zero(); kk * hw];
    for n in 0..g.n {
        let xn = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let dyn_ = &dy[n * g.cout * hw..(n + 1) * g.cout * hw];
        for (c, chunk) in dyn_.chunks(hw).enumerate() {
            db[c] += chunk.iter().copied().sum::<T>();
        }
        if g.is_pointwise() {
            matmul_into(dyn_, false, xn, true, g.cout, hw, kk, T::one(), &mut dw);
        } else {
            im2col(g, xn, &mut col);
            matmul_into(dyn_, false, &col, true, g.cout, hw, kk, T::one(), &mut dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
            if g.is_pointwise() {
                matmul_into(w, true, dyn_, false, kk, g.cout, hw, T::one(), dxn);
            } else {
                matmul_into(w, true, dyn_, false, kk, g.cout, hw, T::zero(), &mut col);
                col2im_add(g, &col, dxn);
            }
        }
    }
    (dx, dw, db)
}

/// 2×2 max pooling with stride 2; returns values and flat argmax offsets.
pub fn maxpool2_forward<T: Scalar>(shape: &[usize], x: &[T]) -> (Vec<T>, Vec<usize>) {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nc * ho * wo);
    let mut arg = Vec::with_capacity(nc * ho * wo);
    for p in 0..nc {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn upsample2_forward<T: Scalar>(shape: &[usize], x: &[T]) -> Vec<T> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let mut out = vec![T::zero(); nc * 4 * h * w];
    for p in 0..nc {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[p * 4 * h * w + y * 2 * w + xx] = x[p * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(in_shape: &[usize], dy: &[T]) -> Vec<T> {
    let (nc, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let mut dx = vec![T::zero(); nc * h * w];
    for p in 0..nc {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dx[p * h * w + (y / 2) * w + xx / 2] += dy[p * 4 * h * w + y * 2 * w + xx];
            }
        }
    }
    dx
}
