//! Forward and backward kernels over raw NCHW slices.
//!
//! Everything here is shape-checked by the caller (the tape); kernels assume
//! consistent extents.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Scalar;

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    /// "Same" padding for odd kernels.
    pub fn same(kernel: usize, stride: usize, groups: usize) -> Self {
        Self { kernel, stride, pad: kernel / 2, groups }
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub ho: usize,
    pub wo: usize,
}

fn im2col<T: Scalar>(x: &[T], cin_g: usize, h: usize, w: usize, g: &ConvGeom, ho: usize, wo: usize, col: &mut [T]) {
    let k = g.kernel;
    let p = ho * wo;
    for ci in 0..cin_g {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], cin_g: usize, h: usize, w: usize, g: &ConvGeom, ho: usize, wo: usize, dx: &mut [T]) {
    let k = g.kernel;
    let p = ho * wo;
    for ci in 0..cin_g {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], wt: &[T], d: ConvDims, g: &ConvGeom) -> Vec<T> {
    let cin_g = d.cin / g.groups;
    let cout_g = d.cout / g.groups;
    let kk = cin_g * g.kernel * g.kernel;
    let p = d.ho * d.wo;
    let mut y = vec![T::zero(); d.n * d.cout * p];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
    for n in 0..d.n {
        for gi in 0..g.groups {
            let xs = &x[(n * d.cin + gi * cin_g) * d.h * d.w..][..cin_g * d.h * d.w];
            let b: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, cin_g, d.h, d.w, g, d.ho, d.wo, &mut col);
                &col
            };
            let a = &wt[gi * cout_g * kk..][..cout_g * kk];
            let c = &mut y[(n * d.cout + gi * cout_g) * p..][..cout_g * p];
            T::gemm(cout_g, kk, p, T::one(), a, kk as isize, 1, b, p as isize, 1, T::zero(), c, p as isize, 1);
        }
    }
    y
}

/// Returns `(dx, dw)`; either may be skipped.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    dy: &[T],
    d: ConvDims,
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let cin_g = d.cin / g.groups;
    let cout_g = d.cout / g.groups;
    let kk = cin_g * g.kernel * g.kernel;
    let p = d.ho * d.wo;
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); wt.len()]);
    let mut col = vec![T::zero(); kk * p];
    for n in 0..d.n {
        for gi in 0..g.groups {
            let xoff = (n * d.cin + gi * cin_g) * d.h * d.w;
            let dys = &dy[(n * d.cout + gi * cout_g) * p..][..cout_g * p];
            let wg = &wt[gi * cout_g * kk..][..cout_g * kk];
            if let Some(dw) = dw.as_mut() {
                let xs = &x[xoff..][..cin_g * d.h * d.w];
                let b: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, cin_g, d.h, d.w, g, d.ho, d.wo, &mut col);
                    &col
                };
                // dW (cout_g x kk) += dY (cout_g x p) * col^T (p x kk)
                let c = &mut dw[gi * cout_g * kk..][..cout_g * kk];
                T::gemm(cout_g, p, kk, T::one(), dys, p as isize, 1, b, 1, p as isize, T::one(), c, kk as isize, 1);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[xoff..][..cin_g * d.h * d.w];
                if g.is_pointwise() {
                    T::gemm(kk, cout_g, p, T::one(), wg, 1, kk as isize, dys, p as isize, 1, T::one(), dxs, p as isize, 1);
                } else {
                    T::gemm(kk, cout_g, p, T::one(), wg, 1, kk as isize, dys, p as isize, 1, T::zero(), &mut col, p as isize, 1);
                    col2im(&col, cin_g, d.h, d.w, g, d.ho, d.wo, dxs);
                }
            }
        }
    }
    (dx, dw)
}

/// Average pooling with zero padding counted in the divisor.
pub(crate) fn avg_pool_forward<T: Scalar>(x: &[T], nc: usize, h: usize, w: usize, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let inv = T::one() / T::c((g.kernel * g.kernel) as f64);
    let mut y = vec![T::zero(); nc * ho * wo];
    for c in 0..nc {
        let plane = &x[c * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            acc += plane[iy as usize * w + ix as usize];
                        }
                    }
                }
                y[(c * ho + oy) * wo + ox] = acc * inv;
            }
        }
    }
    y
}

pub(crate) fn avg_pool_backward<T: Scalar>(dy: &[T], nc: usize, h: usize, w: usize, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let inv = T::one() / T::c((g.kernel * g.kernel) as f64);
    let mut dx = vec![T::zero(); nc * h * w];
    for c in 0..nc {
        let plane = &mut dx[c * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let gval = dy[(c * ho + oy) * wo + ox] * inv;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += gval;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Standardization statistics of one normalization group.
#[derive(Clone, Debug)]
pub(crate) struct Moments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel statistics over `(N, H, W)`.
pub(crate) fn batch_moments<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize, eps: T) -> Moments<T> {
    let m = T::c((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for b in 0..n {
            for &e in &x[(b * c + ch) * hw..][..hw] {
                v += (e - mu) * (e - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    Moments { mean, var, inv_std }
}

/// Per-(sample, group) statistics; groups partition the channels contiguously.
pub(crate) fn group_moments<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize, groups: usize, eps: T) -> Moments<T> {
    let len = c / groups * hw;
    let m = T::c(len as f64);
    let mut mean = Vec::with_capacity(n * groups);
    let mut var = Vec::with_capacity(n * groups);
    for chunk in x[..n * c * hw].chunks_exact(len) {
        let mu = chunk.iter().copied().sum::<T>() / m;
        let v = chunk.iter().map(|&e| (e - mu) * (e - mu)).sum::<T>() / m;
        mean.push(mu);
        var.push(v);
    }
    let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    Moments { mean, var, inv_std }
}

/// Gradient of `xhat = (x - mean) * inv_std` for one contiguous-or-strided group.
///
/// `dx = inv_std / m * (m * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))`.
pub(crate) fn standardize_backward_group<T: Scalar>(
    xhat: &[&[T]],
    dxhat: &[&[T]],
    inv_std: T,
    out: &mut [&mut [T]],
) {
    let m = T::c(xhat.iter().map(|s| s.len()).sum::<usize>() as f64);
    let mut s1 = T::zero();
    let mut s2 = T::zero();
    for (xs, ds) in xhat.iter().zip(dxhat) {
        for (&xv, &dv) in xs.iter().zip(ds.iter()) {
            s1 += dv;
            s2 += dv * xv;
        }
    }
    let scale = inv_std / m;
    for ((xs, ds), os) in xhat.iter().zip(dxhat).zip(out.iter_mut()) {
        for ((&xv, &dv), o) in xs.iter().zip(ds.iter()).zip(os.iter_mut()) {
            *o += scale * (m * dv - s1 - xv * s2);
        }
    }
}
