//! Slice-level compute kernels behind the graph operations.

use std::any::TypeId;

use super::Real;
use crate::par;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output columns `[lo, hi)` whose input column for tap `kx` is in bounds.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad as isize;
        // ix = ox*s + off must satisfy 0 <= ix < w
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = self.w as isize - 1 - off;
        let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
        let lo = lo.max(0) as usize;
        let hi = (hi as usize).min(self.ow);
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// `c = a·b` (or `c += a·b` when `accumulate`) for strided `m×k` and `k×n`
/// operands; element `(i, j)` of a matrix lives at `i·rs + j·cs`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: (&[T], isize, isize),
    b: (&[T], isize, isize),
    c: (&mut [T], isize, isize),
    accumulate: bool,
) {
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
        }
    };
    assert!(a.0.len() >= span(m, k, a.1, a.2), "gemm: lhs too short");
    assert!(b.0.len() >= span(k, n, b.1, b.2), "gemm: rhs too short");
    assert!(c.0.len() >= span(m, n, c.1, c.2), "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let id = TypeId::of::<T>();
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the TypeId checks make the pointer casts identity casts, and
    // the asserts above keep every strided access inside the slices.
    unsafe {
        if id == TypeId::of::<f32>() {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr() as *const f32,
                a.1,
                a.2,
                b.0.as_ptr() as *const f32,
                b.1,
                b.2,
                beta as f32,
                c.0.as_mut_ptr() as *mut f32,
                c.1,
                c.2,
            );
            return;
        }
        if id == TypeId::of::<f64>() {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr() as *const f64,
                a.1,
                a.2,
                b.0.as_ptr() as *const f64,
                b.1,
                b.2,
                beta,
                c.0.as_mut_ptr() as *mut f64,
                c.1,
                c.2,
            );
            return;
        }
    }
    let at = |x: &[T], rs: isize, cs: isize, i: usize, j: usize| x[(i as isize * rs + j as isize * cs) as usize];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc += at(a.0, a.1, a.2, i, p) * at(b.0, b.1, b.2, p, j);
            }
            let o = &mut c.0[(i as isize * c.1 + j as isize * c.2) as usize];
            *o = if accumulate { *o + acc } else { acc };
        }
    }
}

impl ConvGeom {
    fn cols_k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image `[cin, h, w]` into `[cin·kh·kw, oh·ow]`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.oh * g.ow;
    for ci in 0..g.cin {
        let src = &x[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((ci * g.kh + ky) * g.kw + kx) * n..][..n];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.oh {
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    let Some(iy) = g.in_row(oy, ky) else {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    };
                    let irow = &src[iy * g.w..(iy + 1) * g.w];
                    dst[..lo].iter_mut().for_each(|v| *v = T::zero());
                    dst[hi..].iter_mut().for_each(|v| *v = T::zero());
                    for (ox, d) in dst[lo..hi].iter_mut().enumerate() {
                        *d = irow[(lo + ox) * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adds the folded columns `[cin·kh·kw, oh·ow]` into one image `[cin, h, w]`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let n = g.oh * g.ow;
    for ci in 0..g.cin {
        let dst = &mut x[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((ci * g.kh + ky) * g.kw + kx) * n..][..n];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.oh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    let irow = &mut dst[iy * g.w..(iy + 1) * g.w];
                    for (ox, &v) in src[lo..hi].iter().enumerate() {
                        irow[(lo + ox) * g.stride + kx - g.pad] += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let n = g.oh * g.ow;
    let kk = g.cols_k();
    let mut out = vec![T::zero(); g.batch * g.cout * n];
    par::for_each_chunk(&mut out, g.cout * n, |b, dst| {
        if let Some(bs) = bias {
            for (co, row) in dst.chunks_mut(n).enumerate() {
                row.iter_mut().for_each(|v| *v = bs[co]);
            }
        }
        let xb = &x[b * g.cin * g.h * g.w..][..g.cin * g.h * g.w];
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            let mut c = vec![T::zero(); kk * n];
            im2col(xb, g, &mut c);
            owned = c;
            &owned
        };
        gemm(g.cout, kk, n, (w, kk as isize, 1), (cols, n as isize, 1), (dst, n as isize, 1), bias.is_some());
    });
    out
}

pub(crate) fn conv2d_backward_input<T: Real>(gout: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.oh * g.ow;
    let kk = g.cols_k();
    let plane = g.cin * g.h * g.w;
    let mut gin = vec![T::zero(); g.batch * plane];
    par::for_each_chunk(&mut gin, plane, |b, dst| {
        let gb = &gout[b * g.cout * n..][..g.cout * n];
        if g.is_pointwise() {
            gemm(kk, g.cout, n, (w, 1, kk as isize), (gb, n as isize, 1), (dst, n as isize, 1), false);
        } else {
            let mut cols = vec![T::zero(); kk * n];
            gemm(kk, g.cout, n, (w, 1, kk as isize), (gb, n as isize, 1), (&mut cols, n as isize, 1), false);
            col2im(&cols, g, dst);
        }
    });
    gin
}

/// Returns (weight grad, bias grad).
pub(crate) fn conv2d_backward_params<T: Real>(gout: &[T], x: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let n = g.oh * g.ow;
    let kk = g.cols_k();
    let partial = par::map_collect(g.batch, |b| {
        let gb = &gout[b * g.cout * n..][..g.cout * n];
        let xb = &x[b * g.cin * g.h * g.w..][..g.cin * g.h * g.w];
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            let mut c = vec![T::zero(); kk * n];
            im2col(xb, g, &mut c);
            owned = c;
            &owned
        };
        let mut gw = vec![T::zero(); g.cout * kk];
        gemm(g.cout, n, kk, (gb, n as isize, 1), (cols, 1, n as isize), (&mut gw, kk as isize, 1), false);
        gw
    });
    let mut gw = vec![T::zero(); g.cout * kk];
    for p in partial {
        gw.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let gb = (0..g.cout)
        .map(|co| {
            (0..g.batch)
                .map(|b| gout[(b * g.cout + co) * n..][..n].iter().copied().sum::<T>())
                .sum()
        })
        .collect();
    (gw, gb)
}

fn rhs_offset(bi: usize, bb: usize, len: usize) -> usize {
    if bb == 1 {
        0
    } else {
        bi * len
    }
}

/// Batched `[batch, m, k] x [bb, k, n]` where `bb` is `batch` or 1.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], batch: usize, bb: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    par::for_each_chunk(&mut out, m * n, |bi, dst| {
        let ab = &a[bi * m * k..][..m * k];
        let bm = &b[rhs_offset(bi, bb, k * n)..][..k * n];
        gemm(m, k, n, (ab, k as isize, 1), (bm, n as isize, 1), (dst, n as isize, 1), false);
    });
    out
}

/// Gradient of `a` for `c = a·b`: `g·bᵀ`.
pub(crate) fn matmul_grad_a<T: Real>(g: &[T], b: &[T], batch: usize, bb: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * k];
    par::for_each_chunk(&mut out, m * k, |bi, dst| {
        let gb = &g[bi * m * n..][..m * n];
        let bm = &b[rhs_offset(bi, bb, k * n)..][..k * n];
        gemm(m, n, k, (gb, n as isize, 1), (bm, 1, n as isize), (dst, k as isize, 1), false);
    });
    out
}

/// Gradient of `b` for `c = a·b`: `aᵀ·g`, summed over the batch when `b` broadcasts.
pub(crate) fn matmul_grad_b<T: Real>(g: &[T], a: &[T], batch: usize, bb: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); bb * k * n];
    if bb == 1 {
        for bi in 0..batch {
            let gb = &g[bi * m * n..][..m * n];
            let ab = &a[bi * m * k..][..m * k];
            gemm(k, m, n, (ab, 1, k as isize), (gb, n as isize, 1), (&mut out, n as isize, 1), bi > 0);
        }
    } else {
        par::for_each_chunk(&mut out, k * n, |bi, dst| {
            let gb = &g[bi * m * n..][..m * n];
            let ab = &a[bi * m * k..][..m * k];
            gemm(k, m, n, (ab, 1, k as isize), (gb, n as isize, 1), (dst, n as isize, 1), false);
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
        let plane = g.oh * g.ow;
        let mut out = vec![T::zero(); g.batch * g.cout * plane];
        let ksz = g.kh * g.kw;
        par::for_each_chunk(&mut out, plane, |idx, dst| {
            let (b, co) = (idx / g.cout, idx % g.cout);
            let b0 = bias.map_or(T::zero(), |bs| bs[co]);
            dst.iter_mut().for_each(|v| *v = b0);
            for ci in 0..g.cin {
                let src = &x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                let wk = &w[(co * g.cin + ci) * ksz..][..ksz];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        let (lo, hi) = g.col_range(kx);
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let orow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                            let irow = &src[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let shift = kx as isize - g.pad as isize;
                                let istart = (lo as isize + shift) as usize;
                                let n = hi - lo;
                                for (o, i) in orow[lo..hi].iter_mut().zip(&irow[istart..istart + n]) {
                                    *o += wv * *i;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * g.stride + kx - g.pad;
                                    orow[ox] += wv * irow[ix];
                                }
                            }
                        }
                    }
                }
            }
        });
        out
    }

    fn direct_conv2d_backward_input<T: Real>(gout: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
        let plane = g.h * g.w;
        let oplane = g.oh * g.ow;
        let ksz = g.kh * g.kw;
        let mut gin = vec![T::zero(); g.batch * g.cin * plane];
        par::for_each_chunk(&mut gin, plane, |idx, dst| {
            let (b, ci) = (idx / g.cin, idx % g.cin);
            for co in 0..g.cout {
                let src = &gout[(b * g.cout + co) * oplane..][..oplane];
                let wk = &w[(co * g.cin + ci) * ksz..][..ksz];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        let (lo, hi) = g.col_range(kx);
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let grow = &src[oy * g.ow..(oy + 1) * g.ow];
                            let irow = &mut dst[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let shift = kx as isize - g.pad as isize;
                                let istart = (lo as isize + shift) as usize;
                                let n = hi - lo;
                                for (i, o) in irow[istart..istart + n].iter_mut().zip(&grow[lo..hi]) {
                                    *i += wv * *o;
                                }
                            } else {
                                for ox in lo..hi {
                                    irow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        });
        gin
    }

    /// Returns (weight grad, bias grad).
    fn direct_conv2d_backward_params<T: Real>(gout: &[T], x: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
        let oplane = g.oh * g.ow;
        let ksz = g.kh * g.kw;
        let per_co = g.cin * ksz;
        let mut gw = vec![T::zero(); g.cout * per_co];
        par::for_each_chunk(&mut gw, per_co, |co, dst| {
            for b in 0..g.batch {
                let gp = &gout[(b * g.cout + co) * oplane..][..oplane];
                for ci in 0..g.cin {
                    let src = &x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let (lo, hi) = g.col_range(kx);
                            let mut acc = T::zero();
                            for oy in 0..g.oh {
                                let Some(iy) = g.in_row(oy, ky) else { continue };
                                let grow = &gp[oy * g.ow..(oy + 1) * g.ow];
                                let irow = &src[iy * g.w..(iy + 1) * g.w];
                                if g.stride == 1 {
                                    let shift = kx as isize - g.pad as isize;
                                    let istart = (lo as isize + shift) as usize;
                                    let n = hi - lo;
                                    acc += grow[lo..hi]
                                        .iter()
                                        .zip(&irow[istart..istart + n])
                                        .fold(T::zero(), |s, (a, b)| s + *a * *b);
                                } else {
                                    for ox in lo..hi {
                                        acc += grow[ox] * irow[ox * g.stride + kx - g.pad];
                                    }
                                }
                            }
                            dst[ci * ksz + ky * g.kw + kx] += acc;
                        }
                    }
                }
            }
        });
        let gb = (0..g.cout)
            .map(|co| {
                (0..g.batch)
                    .map(|b| gout[(b * g.cout + co) * oplane..][..oplane].iter().copied().sum::<T>())
                    .sum()
            })
            .collect();
        (gw, gb)
    }


    fn naive_conv(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.cout * g.oh * g.ow];
        for b in 0..g.batch {
            for co in 0..g.cout {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = bias[co];
                        for ci in 0..g.cin {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += w[((co * g.cin + ci) * g.kh + ky) * g.kw + kx]
                                        * x[((b * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                        out[((b * g.cout + co) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn conv_matches_naive_loops_for_strides_and_pads() {
        let mut s = 7u64;
        for &(h, w, k, stride, pad) in &[(5, 7, 3, 1, 1), (8, 8, 3, 2, 1), (6, 5, 1, 1, 0), (9, 9, 3, 2, 0), (4, 4, 5, 1, 2)] {
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            let g = ConvGeom { batch: 2, cin: 3, h, w, cout: 4, kh: k, kw: k, stride, pad, oh, ow };
            let x: Vec<f64> = (0..2 * 3 * h * w).map(|_| lcg(&mut s)).collect();
            let wt: Vec<f64> = (0..4 * 3 * k * k).map(|_| lcg(&mut s)).collect();
            let bias: Vec<f64> = (0..4).map(|_| lcg(&mut s)).collect();
            let fast = conv2d_forward(&x, &wt, Some(&bias), &g);
            let slow = naive_conv(&x, &wt, &bias, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_broadcast_rhs() {
        // two batches against one shared rhs
        let a = [1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 1.0, 0.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let c = matmul(&a, &b, 2, 1, 2, 2, 2);
        assert_eq!(c, a.to_vec());
    }

    const CASES: [(usize, usize, usize, usize, usize); 6] =
        [(5, 7, 3, 1, 1), (8, 8, 3, 2, 1), (6, 5, 1, 1, 0), (9, 9, 3, 2, 0), (4, 4, 5, 1, 2), (7, 6, 1, 2, 0)];

    fn geom(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> ConvGeom {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        ConvGeom { batch: 2, cin: 3, h, w, cout: 4, kh: k, kw: k, stride, pad, oh, ow }
    }

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn gemm_kernels_match_direct_loops() {
        let mut s = 11u64;
        for &(h, w, k, stride, pad) in &CASES {
            let g = geom(h, w, k, stride, pad);
            let x: Vec<f64> = (0..2 * 3 * h * w).map(|_| lcg(&mut s)).collect();
            let wt: Vec<f64> = (0..4 * 3 * k * k).map(|_| lcg(&mut s)).collect();
            let bias: Vec<f64> = (0..4).map(|_| lcg(&mut s)).collect();
            let go: Vec<f64> = (0..2 * 4 * g.oh * g.ow).map(|_| lcg(&mut s)).collect();
            close(&conv2d_forward(&x, &wt, Some(&bias), &g), &direct_conv2d_forward(&x, &wt, Some(&bias), &g));
            close(&conv2d_forward(&x, &wt, None, &g), &direct_conv2d_forward(&x, &wt, None, &g));
            close(&conv2d_backward_input(&go, &wt, &g), &direct_conv2d_backward_input(&go, &wt, &g));
            let (gw, gb) = conv2d_backward_params(&go, &x, &g);
            let (dw, db) = direct_conv2d_backward_params(&go, &x, &g);
            close(&gw, &dw);
            close(&gb, &db);
        }
    }

    fn naive_matmul(a: &[f64], b: &[f64], batch: usize, bb: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let bo = if bb == 1 { 0 } else { bi * k * n };
            for i in 0..m {
                for j in 0..n {
                    c[(bi * m + i) * n + j] = (0..k).map(|p| a[(bi * m + i) * k + p] * b[bo + p * n + j]).sum();
                }
            }
        }
        c
    }

    #[test]
    fn matmul_and_grads_match_loops() {
        let mut s = 5u64;
        let (batch, m, k, n) = (3, 4, 5, 6);
        for bb in [1, batch] {
            let a: Vec<f64> = (0..batch * m * k).map(|_| lcg(&mut s)).collect();
            let b: Vec<f64> = (0..bb * k * n).map(|_| lcg(&mut s)).collect();
            let g: Vec<f64> = (0..batch * m * n).map(|_| lcg(&mut s)).collect();
            close(&matmul(&a, &b, batch, bb, m, k, n), &naive_matmul(&a, &b, batch, bb, m, k, n));
            // <g, a·b> is linear in each factor, so its gradients are exact adjoints.
            let ga = matmul_grad_a(&g, &b, batch, bb, m, k, n);
            let gbv = matmul_grad_b(&g, &a, batch, bb, m, k, n);
            let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
            let f = dot(&g, &matmul(&a, &b, batch, bb, m, k, n));
            assert!((dot(&ga, &a) - f).abs() < 1e-10);
            assert!((dot(&gbv, &b) - f).abs() < 1e-10);
            let mut e = vec![0.0; a.len()];
            e[7] = 1.0;
            assert!((dot(&g, &matmul(&e, &b, batch, bb, m, k, n)) - ga[7]).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_transposed_operands() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, -1.0, 0.5, 2.0];
        let mut c = [0.0f64; 6];
        gemm(3, 2, 2, (&a, 1, 3), (&b, 2, 1), (&mut c, 2, 1), false);
        // aᵀ as 3×2 = [[1,4],[2,5],[3,6]]
        assert_eq!(c, [1.0 + 2.0, -1.0 + 8.0, 2.0 + 2.5, -2.0 + 10.0, 3.0 + 3.0, -3.0 + 12.0]);
    }
}
