//! Raw numeric kernels behind the autodiff ops: direct convolution, matrix
//! products and resampling. Slices in, slices out; shapes are checked by the
//! callers.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Output columns `ox` whose tap `kx` lands inside the input row.
    #[inline]
    fn valid_cols(&self, k: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // ox*s + k - p <= in_len - 1
        let hi_num = in_len + p;
        if hi_num < k + 1 {
            return (0, 0);
        }
        let hi = ((hi_num - k - 1) / s + 1).min(out_len);
        (lo.min(hi), hi)
    }
}

pub fn conv2d_forward<T: Scalar>(
    geo: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let (h, w, k, s) = (geo.height, geo.width, geo.kernel, geo.stride);
    let (cig, cog) = (geo.in_per_group(), geo.out_per_group());
    for co in 0..geo.out_channels {
        let g = co / cog;
        let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        let b = bias.map_or(T::zero(), |b| b[co]);
        plane.iter_mut().for_each(|v| *v = b);
        for cl in 0..cig {
            let ci = g * cig + cl;
            let inp = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = geo.valid_cols(ky, ho, h);
                for kx in 0..k {
                    let wv = weight[((co * cig + cl) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox_lo, ox_hi) = geo.valid_cols(kx, wo, w);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - geo.pad;
                        let row = &inp[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            let off = kx as isize - geo.pad as isize;
                            let src = &row[(ox_lo as isize + off) as usize..(ox_hi as isize + off) as usize];
                            for (o, &x) in orow[ox_lo..ox_hi].iter_mut().zip(src) {
                                *o += wv * x;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * row[ox * s + kx - geo.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients. Any of the outputs may be
/// skipped by passing `None`.
pub fn conv2d_backward<T: Scalar>(
    geo: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut grad_in: Option<&mut [T]>,
    mut grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
) {
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let (h, w, k, s) = (geo.height, geo.width, geo.kernel, geo.stride);
    let (cig, cog) = (geo.in_per_group(), geo.out_per_group());
    if let Some(gb) = grad_b {
        for co in 0..geo.out_channels {
            gb[co] += grad_out[co * ho * wo..(co + 1) * ho * wo].iter().copied().sum();
        }
    }
    for co in 0..geo.out_channels {
        let g = co / cog;
        let gplane = &grad_out[co * ho * wo..(co + 1) * ho * wo];
        for cl in 0..cig {
            let ci = g * cig + cl;
            let inp = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = geo.valid_cols(ky, ho, h);
                for kx in 0..k {
                    let widx = ((co * cig + cl) * k + ky) * k + kx;
                    let (ox_lo, ox_hi) = geo.valid_cols(kx, wo, w);
                    let wv = weight[widx];
                    let mut acc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - geo.pad;
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            let start = (ox_lo + kx) - geo.pad;
                            let len = ox_hi - ox_lo;
                            let g_slice = &grow[ox_lo..ox_hi];
                            if grad_w.is_some() {
                                let row = &inp[iy * w + start..iy * w + start + len];
                                let mut part = T::zero();
                                for (&gv, &x) in g_slice.iter().zip(row) {
                                    part += gv * x;
                                }
                                acc += part;
                            }
                            if let Some(gi) = grad_in.as_deref_mut() {
                                let gin = &mut gi[ci * h * w + iy * w + start..ci * h * w + iy * w + start + len];
                                for (o, &gv) in gin.iter_mut().zip(g_slice) {
                                    *o += wv * gv;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * s + kx - geo.pad;
                                let gv = grow[ox];
                                acc += gv * inp[iy * w + ix];
                                if let Some(gi) = grad_in.as_deref_mut() {
                                    gi[ci * h * w + iy * w + ix] += wv * gv;
                                }
                            }
                        }
                    }
                    if let Some(gw) = grad_w.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// `out[M, N] = a[M, K] @ b[K, N]` (overwrites `out`).
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    out.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Gradients of `a @ b` given `g = dL/d(out)`; accumulates into the outputs.
pub fn matmul_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
    grad_a: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
) {
    if let Some(ga) = grad_a {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let mut acc = T::zero();
                for (&gv, &bv) in grow.iter().zip(brow) {
                    acc += gv * bv;
                }
                ga[i * k + p] += acc;
            }
        }
    }
    if let Some(gb) = grad_b {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &mut gb[p * n..(p + 1) * n];
                for (o, &gv) in brow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }
}

/// Nearest-neighbour upsampling of every `[H, W]` plane by an integer factor.
pub fn upsample_nearest<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![T::zero(); planes * oh * ow];
    for c in 0..planes {
        for oy in 0..oh {
            let src = &input[(c * h + oy / f) * w..(c * h + oy / f + 1) * w];
            let dst = &mut out[(c * oh + oy) * ow..(c * oh + oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / f];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]: sums each `f x f` block.
pub fn sum_pool<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![T::zero(); planes * oh * ow];
    for c in 0..planes {
        for y in 0..oh * f {
            let src = &input[(c * h + y) * w..(c * h + y) * w + ow * f];
            let dst = &mut out[(c * oh + y / f) * ow..(c * oh + y / f + 1) * ow];
            for (x, &v) in src.iter().enumerate() {
                dst[x / f] += v;
            }
        }
    }
    out
}
