//! Direct convolution kernels.
//!
//! Both convolution flavours reduce to three kernels over a "small" and a
//! "big" tensor related by `big = small * stride + tap - pad` along each
//! spatial axis, with weights laid out `[C_small, C_big, k, k]`:
//!
//! * conv2d forward / transposed-conv input gradient: [`gather`]
//! * conv2d input gradient / transposed-conv forward: [`scatter`]
//! * weight gradient of either: [`weight_grad`]
//!
//! Work is split over output planes so every output element is accumulated
//! in a fixed order regardless of thread count.

use rayon::prelude::*;

use super::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub n: usize,
    pub c_small: usize,
    pub h_small: usize,
    pub w_small: usize,
    pub c_big: usize,
    pub h_big: usize,
    pub w_big: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Range of small-side indices `o` with `0 <= o*stride + tap - pad < big_len`.
#[inline]
fn valid(small_len: usize, big_len: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let (s, t, p) = (stride as isize, tap as isize, pad as isize);
    let lo = if p > t { (p - t + s - 1) / s } else { 0 };
    let top = big_len as isize - 1 + p - t;
    let hi = if top < 0 { 0 } else { (top / s + 1).min(small_len as isize) };
    (lo as usize, hi.max(lo) as usize)
}

#[inline]
fn axpy_strided<T: Real>(dst: &mut [T], src: &[T], a: T, stride: usize) {
    if stride == 1 {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += a * s;
        }
    } else {
        for (d, &s) in dst.iter_mut().zip(src.iter().step_by(stride)) {
            *d += a * s;
        }
    }
}

/// `small[n, cs] = bias[cs] + sum_{cb, taps} w[cs, cb] * big[n, cb]`.
pub(crate) fn gather<T: Real>(g: &Geom, big: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (ps, pb, kk) = (g.h_small * g.w_small, g.h_big * g.w_big, g.k * g.k);
    let mut out = vec![T::zero(); g.n * g.c_small * ps];
    out.par_chunks_mut(ps).enumerate().for_each(|(idx, o)| {
        let (ni, cs) = (idx / g.c_small, idx % g.c_small);
        if let Some(b) = bias {
            o.fill(b[cs]);
        }
        for cb in 0..g.c_big {
            let xp = &big[(ni * g.c_big + cb) * pb..][..pb];
            let wk = &w[(cs * g.c_big + cb) * kk..][..kk];
            for ky in 0..g.k {
                let (y0, y1) = valid(g.h_small, g.h_big, g.stride, ky, g.pad);
                for kx in 0..g.k {
                    let wv = wk[ky * g.k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (x0, x1) = valid(g.w_small, g.w_big, g.stride, kx, g.pad);
                    if x1 <= x0 {
                        continue;
                    }
                    let bx0 = x0 * g.stride + kx - g.pad;
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let orow = &mut o[oy * g.w_small + x0..oy * g.w_small + x1];
                        let xrow = &xp[iy * g.w_big + bx0..(iy + 1) * g.w_big];
                        axpy_strided(orow, xrow, wv, g.stride);
                    }
                }
            }
        }
    });
    out
}

/// `big[n, cb] = sum_{cs, taps} w[cs, cb] * small[n, cs]` (adjoint of [`gather`]).
pub(crate) fn scatter<T: Real>(g: &Geom, small: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (ps, pb, kk) = (g.h_small * g.w_small, g.h_big * g.w_big, g.k * g.k);
    let mut out = vec![T::zero(); g.n * g.c_big * pb];
    out.par_chunks_mut(pb).enumerate().for_each(|(idx, o)| {
        let (ni, cb) = (idx / g.c_big, idx % g.c_big);
        if let Some(b) = bias {
            o.fill(b[cb]);
        }
        for cs in 0..g.c_small {
            let sp = &small[(ni * g.c_small + cs) * ps..][..ps];
            let wk = &w[(cs * g.c_big + cb) * kk..][..kk];
            for ky in 0..g.k {
                let (y0, y1) = valid(g.h_small, g.h_big, g.stride, ky, g.pad);
                for kx in 0..g.k {
                    let wv = wk[ky * g.k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (x0, x1) = valid(g.w_small, g.w_big, g.stride, kx, g.pad);
                    if x1 <= x0 {
                        continue;
                    }
                    let bx0 = x0 * g.stride + kx - g.pad;
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let srow = &sp[oy * g.w_small + x0..oy * g.w_small + x1];
                        let brow = &mut o[iy * g.w_big + bx0..(iy + 1) * g.w_big];
                        if g.stride == 1 {
                            for (d, &s) in brow.iter_mut().zip(srow) {
                                *d += wv * s;
                            }
                        } else {
                            for (d, &s) in brow.iter_mut().step_by(g.stride).zip(srow) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// `dw[cs, cb, ky, kx] = sum_{n, positions} small[n, cs] * big[n, cb]`.
pub(crate) fn weight_grad<T: Real>(g: &Geom, small: &[T], big: &[T]) -> Vec<T> {
    let (ps, pb, kk) = (g.h_small * g.w_small, g.h_big * g.w_big, g.k * g.k);
    let mut dw = vec![T::zero(); g.c_small * g.c_big * kk];
    dw.par_chunks_mut(kk).enumerate().for_each(|(idx, o)| {
        let (cs, cb) = (idx / g.c_big, idx % g.c_big);
        for ni in 0..g.n {
            let sp = &small[(ni * g.c_small + cs) * ps..][..ps];
            let bp = &big[(ni * g.c_big + cb) * pb..][..pb];
            for ky in 0..g.k {
                let (y0, y1) = valid(g.h_small, g.h_big, g.stride, ky, g.pad);
                for kx in 0..g.k {
                    let (x0, x1) = valid(g.w_small, g.w_big, g.stride, kx, g.pad);
                    if x1 <= x0 {
                        continue;
                    }
                    let bx0 = x0 * g.stride + kx - g.pad;
                    let mut acc = T::zero();
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let srow = &sp[oy * g.w_small + x0..oy * g.w_small + x1];
                        let brow = &bp[iy * g.w_big + bx0..(iy + 1) * g.w_big];
                        if g.stride == 1 {
                            for (&s, &b) in srow.iter().zip(brow) {
                                acc += s * b;
                            }
                        } else {
                            for (&s, &b) in srow.iter().zip(brow.iter().step_by(g.stride)) {
                                acc += s * b;
                            }
                        }
                    }
                    o[ky * g.k + kx] += acc;
                }
            }
        }
    });
    dw
}

/// Per-channel sum over batch and space of an `N x C x H x W` buffer.
pub(crate) fn channel_sum<T: Real>(x: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            *o += x[(ni * c + ci) * plane..][..plane].iter().copied().sum::<T>();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gather(g: &Geom, big: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.c_small * g.h_small * g.w_small];
        for n in 0..g.n {
            for cs in 0..g.c_small {
                for oy in 0..g.h_small {
                    for ox in 0..g.w_small {
                        let mut acc = 0.0;
                        for cb in 0..g.c_big {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h_big as isize || ix >= g.w_big as isize {
                                        continue;
                                    }
                                    acc += w[((cs * g.c_big + cb) * g.k + ky) * g.k + kx]
                                        * big[((n * g.c_big + cb) * g.h_big + iy as usize) * g.w_big + ix as usize];
                                }
                            }
                        }
                        out[((n * g.c_small + cs) * g.h_small + oy) * g.w_small + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    }

    #[test]
    fn gather_matches_naive_loops() {
        let mut s = 7u64;
        for &(k, stride, hb) in &[(3, 1, 6), (3, 2, 8), (5, 2, 8), (2, 2, 4), (1, 1, 5)] {
            let pad = (k - 1) / 2;
            let hs = (hb + 2 * pad - k) / stride + 1;
            let g = Geom { n: 2, c_small: 3, h_small: hs, w_small: hs, c_big: 2, h_big: hb, w_big: hb, k, stride, pad };
            let big: Vec<f64> = (0..2 * 2 * hb * hb).map(|_| lcg(&mut s)).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k).map(|_| lcg(&mut s)).collect();
            let fast = gather(&g, &big, &w, None);
            let slow = naive_gather(&g, &big, &w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride}");
            }
        }
    }

    #[test]
    fn scatter_is_adjoint_of_gather() {
        // <gather(x), y> == <x, scatter(y)>
        let mut s = 11u64;
        for &(k, stride, hb) in &[(3, 1, 6), (3, 2, 8), (5, 2, 8), (2, 2, 6)] {
            let pad = (k - 1) / 2;
            let hs = (hb + 2 * pad - k) / stride + 1;
            let g = Geom { n: 1, c_small: 2, h_small: hs, w_small: hs, c_big: 3, h_big: hb, w_big: hb, k, stride, pad };
            let x: Vec<f64> = (0..3 * hb * hb).map(|_| lcg(&mut s)).collect();
            let y: Vec<f64> = (0..2 * hs * hs).map(|_| lcg(&mut s)).collect();
            let w: Vec<f64> = (0..2 * 3 * k * k).map(|_| lcg(&mut s)).collect();
            let gx = gather(&g, &x, &w, None);
            let sy = scatter(&g, &y, &w, None);
            let lhs: f64 = gx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&sy).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
