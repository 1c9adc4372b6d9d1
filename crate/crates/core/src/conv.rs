//! 2-D convolution kernels.
//!
//! [`conv2d_direct`] is the literal nested-loop definition and serves as the
//! oracle. [`conv2d_fast`] lowers each (sample, group) pair to a matrix product
//! through im2col. Weights are laid out `(c_out, c_in / groups, kh, kw)`; there
//! are no bias terms.

use std::borrow::Cow;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// `floor((input + 2 * padding - kernel) / stride) + 1`
    pub fn output_dim(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::Geometry("stride must be positive".into()));
        }
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return Err(Error::Geometry(format!(
                "kernel {kernel} exceeds padded input {padded}"
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    /// Validates operand shapes and returns the output shape.
    pub fn output_shape(&self, x: Shape4, w: Shape4) -> Result<Shape4> {
        if self.groups == 0 {
            return Err(Error::Config("groups must be positive".into()));
        }
        if !x.c.is_multiple_of(self.groups) {
            return Err(Error::dim(
                "c_in",
                format!(
                    "{} input channels not divisible by {} groups",
                    x.c, self.groups
                ),
            ));
        }
        if !w.n.is_multiple_of(self.groups) {
            return Err(Error::dim(
                "c_out",
                format!(
                    "{} output channels not divisible by {} groups",
                    w.n, self.groups
                ),
            ));
        }
        if w.c != x.c / self.groups {
            return Err(Error::dim(
                "c_in",
                format!(
                    "weight expects {} channels per group, input has {}",
                    w.c,
                    x.c / self.groups
                ),
            ));
        }
        let oh = self.output_dim(x.h, w.h)?;
        let ow = self.output_dim(x.w, w.w)?;
        Ok(Shape4::new(x.n, w.n, oh, ow))
    }
}

/// Reference convolution by direct multiply-accumulate.
pub fn conv2d_direct<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    p: ConvParams,
) -> Result<Tensor4<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let os = p.output_shape(xs, ws)?;
    let cig = xs.c / p.groups;
    let cog = ws.n / p.groups;
    let mut out = Tensor4::zeros(os);
    for n in 0..os.n {
        for co in 0..os.c {
            let g = co / cog;
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = T::zero();
                    for ci in 0..cig {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc = acc
                                    + w.get(co, ci, ky, kx)
                                        * x.get(n, g * cig + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

struct Geometry {
    xs: Shape4,
    ws: Shape4,
    os: Shape4,
    cig: usize,
    cog: usize,
    p: ConvParams,
}

impl Geometry {
    fn new(xs: Shape4, ws: Shape4, p: ConvParams) -> Result<Self> {
        let os = p.output_shape(xs, ws)?;
        Ok(Self {
            xs,
            ws,
            os,
            cig: xs.c / p.groups,
            cog: ws.n / p.groups,
            p,
        })
    }

    /// Rows of the im2col matrix (`cig * kh * kw`).
    fn k(&self) -> usize {
        self.cig * self.ws.h * self.ws.w
    }

    fn is_depthwise(&self) -> bool {
        self.cig == 1 && self.cog == 1
    }

    /// Output rows/columns for which kernel tap `(ky, kx)` lands inside the
    /// input.
    fn tap_ranges(&self, ky: usize, kx: usize) -> (Range<usize>, Range<usize>) {
        let valid = |k: usize, size: usize, out: usize| {
            let (s, pad) = (self.p.stride, self.p.padding);
            let lo = pad.saturating_sub(k).div_ceil(s);
            let hi = if size + pad > k {
                (size + pad - k - 1) / s + 1
            } else {
                0
            };
            lo.min(out)..hi.min(out)
        };
        (
            valid(ky, self.xs.h, self.os.h),
            valid(kx, self.xs.w, self.os.w),
        )
    }

    /// Calls `f(oy, ox_range, iy, ix0)` for every tap row, where input column
    /// for output column `ox` is `ix0 + (ox - ox_range.start) * stride`.
    fn for_each_tap(
        &self,
        ky: usize,
        kx: usize,
        mut f: impl FnMut(usize, Range<usize>, usize, usize),
    ) {
        let (rows, cols) = self.tap_ranges(ky, kx);
        if cols.is_empty() {
            return;
        }
        let (s, pad) = (self.p.stride, self.p.padding);
        for oy in rows {
            let iy = oy * s + ky - pad;
            let ix0 = cols.start * s + kx - pad;
            f(oy, cols.clone(), iy, ix0);
        }
    }

    fn is_plain_1x1(&self) -> bool {
        self.ws.h == 1 && self.ws.w == 1 && self.p.stride == 1 && self.p.padding == 0
    }

    /// Input slice for sample `n`, group `g` (contiguous `cig * h * w`).
    fn input_block<'a, T>(&self, x: &'a [T], n: usize, g: usize) -> &'a [T] {
        let hw = self.xs.spatial();
        let start = (n * self.xs.c + g * self.cig) * hw;
        &x[start..start + self.cig * hw]
    }

    fn output_range(&self, n: usize, g: usize) -> std::ops::Range<usize> {
        let ohw = self.os.spatial();
        let start = (n * self.os.c + g * self.cog) * ohw;
        start..start + self.cog * ohw
    }

    fn weight_range(&self, g: usize) -> std::ops::Range<usize> {
        let k = self.k();
        g * self.cog * k..(g + 1) * self.cog * k
    }

    fn im2col<'a, T: Element>(&self, block: &'a [T]) -> Cow<'a, [T]> {
        if self.is_plain_1x1() {
            return Cow::Borrowed(block);
        }
        let (kh, kw) = (self.ws.h, self.ws.w);
        let (h, w) = (self.xs.h, self.xs.w);
        let (oh, ow) = (self.os.h, self.os.w);
        let ohw = oh * ow;
        let mut cols = vec![T::zero(); self.k() * ohw];
        for ci in 0..self.cig {
            let plane = &block[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &mut cols[((ci * kh + ky) * kw + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.p.stride + ky) as isize - self.p.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.p.stride + kx) as isize - self.p.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                row[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        Cow::Owned(cols)
    }

    /// Scatter-adds an im2col-shaped gradient back into an input block.
    fn col2im<T: Element>(&self, cols: &[T], block: &mut [T]) {
        let (kh, kw) = (self.ws.h, self.ws.w);
        let (h, w) = (self.xs.h, self.xs.w);
        let (oh, ow) = (self.os.h, self.os.w);
        let ohw = oh * ow;
        for ci in 0..self.cig {
            let plane = &mut block[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &cols[((ci * kh + ky) * kw + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.p.stride + ky) as isize - self.p.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.p.stride + kx) as isize - self.p.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] = dst[ix as usize] + row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 depthwise planes in a zero-padded, row-flattened layout: every
/// kernel tap becomes one contiguous slice of length `len` starting at
/// `ky * pw + kx`, and output `(oy, ox)` lives at `oy * pw + ox`.
struct PaddedPlane {
    pw: usize,
    pad: usize,
    len: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl PaddedPlane {
    fn new(geo: &Geometry) -> Option<Self> {
        if geo.p.stride != 1 {
            return None;
        }
        let pad = geo.p.padding;
        let pw = geo.xs.w + 2 * pad;
        let (oh, ow) = (geo.os.h, geo.os.w);
        Some(Self {
            pw,
            pad,
            len: (oh - 1) * pw + ow,
            h: geo.xs.h,
            w: geo.xs.w,
            oh,
            ow,
        })
    }

    fn padded_size(&self) -> usize {
        (self.h + 2 * self.pad) * self.pw
    }

    fn load<T: Copy>(&self, plane: &[T], buf: &mut [T]) {
        for y in 0..self.h {
            let start = (y + self.pad) * self.pw + self.pad;
            buf[start..start + self.w].copy_from_slice(&plane[y * self.w..(y + 1) * self.w]);
        }
    }

    fn tap(&self, ky: usize, kx: usize) -> std::ops::Range<usize> {
        let start = ky * self.pw + kx;
        start..start + self.len
    }
}

/// Visits every `(sample, channel)` plane of a depthwise convolution.
fn depthwise_planes(geo: &Geometry, mut f: impl FnMut(usize, usize, usize, usize)) {
    for n in 0..geo.xs.n {
        for c in 0..geo.xs.c {
            f(n, c, geo.ws.h, geo.ws.w);
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorises.
fn dot4<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let tail: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// `c (m x n) += a (m x k) * b (k x n)`, all row-major.
fn gemm_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

/// `c (k x n) += a^T * b` with `a (m x k)`, `b (m x n)`.
fn gemm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

/// `c (m x k) += a * b^T` with `a (m x n)`, `b (k x n)`.
fn gemm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = c[i * k + p] + dot4(arow, brow);
        }
    }
}

/// im2col + GEMM convolution; agrees with [`conv2d_direct`] up to summation order.
pub fn conv2d_fast<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    p: ConvParams,
) -> Result<Tensor4<T>> {
    let geo = Geometry::new(x.shape(), w.shape(), p)?;
    let mut out = Tensor4::zeros(geo.os);
    if geo.is_depthwise() {
        if let Some(pp) = PaddedPlane::new(&geo) {
            let mut buf = vec![T::zero(); pp.padded_size()];
            let mut ext = vec![T::zero(); pp.len];
            depthwise_planes(&geo, |n, c, kh, kw| {
                pp.load(x.plane(n, c), &mut buf);
                ext.iter_mut().for_each(|v| *v = T::zero());
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.data()[(c * kh + ky) * kw + kx];
                        for (e, &b) in ext.iter_mut().zip(&buf[pp.tap(ky, kx)]) {
                            *e = *e + wv * b;
                        }
                    }
                }
                let o = out.plane_mut(n, c);
                for oy in 0..pp.oh {
                    o[oy * pp.ow..(oy + 1) * pp.ow]
                        .copy_from_slice(&ext[oy * pp.pw..oy * pp.pw + pp.ow]);
                }
            });
            return Ok(out);
        }
        depthwise_planes(&geo, |n, c, kh, kw| {
            let xin = x.plane(n, c);
            let wk = &w.data()[c * kh * kw..(c + 1) * kh * kw];
            let o = out.plane_mut(n, c);
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wk[ky * kw + kx];
                    geo.for_each_tap(ky, kx, |oy, cols, iy, ix0| {
                        let orow = &mut o[oy * geo.os.w..(oy + 1) * geo.os.w];
                        let irow = &xin[iy * geo.xs.w..(iy + 1) * geo.xs.w];
                        if geo.p.stride == 1 {
                            let len = cols.len();
                            for (o, &i) in orow[cols].iter_mut().zip(&irow[ix0..ix0 + len]) {
                                *o = *o + wv * i;
                            }
                        } else {
                            for (j, ox) in cols.enumerate() {
                                orow[ox] = orow[ox] + wv * irow[ix0 + j * geo.p.stride];
                            }
                        }
                    });
                }
            }
        });
        return Ok(out);
    }
    let ohw = geo.os.spatial();
    let k = geo.k();
    for n in 0..geo.xs.n {
        for g in 0..p.groups {
            let cols = geo.im2col(geo.input_block(x.data(), n, g));
            let wg = &w.data()[geo.weight_range(g)];
            let range = geo.output_range(n, g);
            gemm_nn(geo.cog, k, ohw, wg, &cols, &mut out.data_mut()[range]);
        }
    }
    Ok(out)
}

/// Gradient of the convolution with respect to its input.
pub fn conv2d_backward_input<T: Element>(
    grad_out: &Tensor4<T>,
    w: &Tensor4<T>,
    input_shape: Shape4,
    p: ConvParams,
) -> Result<Tensor4<T>> {
    let geo = Geometry::new(input_shape, w.shape(), p)?;
    grad_out.expect_shape(geo.os, "grad_out")?;
    let mut gx = Tensor4::zeros(input_shape);
    if geo.is_depthwise() {
        if let Some(pp) = PaddedPlane::new(&geo) {
            let mut gbuf = vec![T::zero(); pp.padded_size()];
            let mut ext = vec![T::zero(); pp.len];
            depthwise_planes(&geo, |n, c, kh, kw| {
                let go = grad_out.plane(n, c);
                for oy in 0..pp.oh {
                    ext[oy * pp.pw..oy * pp.pw + pp.ow]
                        .copy_from_slice(&go[oy * pp.ow..(oy + 1) * pp.ow]);
                }
                gbuf.iter_mut().for_each(|v| *v = T::zero());
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.data()[(c * kh + ky) * kw + kx];
                        for (g, &e) in gbuf[pp.tap(ky, kx)].iter_mut().zip(&ext) {
                            *g = *g + wv * e;
                        }
                    }
                }
                let gi = gx.plane_mut(n, c);
                for y in 0..pp.h {
                    let start = (y + pp.pad) * pp.pw + pp.pad;
                    gi[y * pp.w..(y + 1) * pp.w].copy_from_slice(&gbuf[start..start + pp.w]);
                }
            });
            return Ok(gx);
        }
        depthwise_planes(&geo, |n, c, kh, kw| {
            let go = grad_out.plane(n, c);
            let wk = &w.data()[c * kh * kw..(c + 1) * kh * kw];
            let gi = gx.plane_mut(n, c);
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wk[ky * kw + kx];
                    geo.for_each_tap(ky, kx, |oy, cols, iy, ix0| {
                        let grow = &go[oy * geo.os.w..(oy + 1) * geo.os.w];
                        let irow = &mut gi[iy * geo.xs.w..(iy + 1) * geo.xs.w];
                        if geo.p.stride == 1 {
                            let len = cols.len();
                            for (i, &g) in irow[ix0..ix0 + len].iter_mut().zip(&grow[cols]) {
                                *i = *i + wv * g;
                            }
                        } else {
                            for (j, ox) in cols.enumerate() {
                                let ix = ix0 + j * geo.p.stride;
                                irow[ix] = irow[ix] + wv * grow[ox];
                            }
                        }
                    });
                }
            }
        });
        return Ok(gx);
    }
    let ohw = geo.os.spatial();
    let k = geo.k();
    let hw = input_shape.spatial();
    let mut cols = vec![T::zero(); k * ohw];
    for n in 0..input_shape.n {
        for g in 0..p.groups {
            cols.iter_mut().for_each(|v| *v = T::zero());
            let wg = &w.data()[geo.weight_range(g)];
            let go = &grad_out.data()[geo.output_range(n, g)];
            gemm_tn(geo.cog, k, ohw, wg, go, &mut cols);
            let start = (n * input_shape.c + g * geo.cig) * hw;
            let block = &mut gx.data_mut()[start..start + geo.cig * hw];
            if geo.is_plain_1x1() {
                for (b, &c) in block.iter_mut().zip(&cols) {
                    *b = *b + c;
                }
            } else {
                geo.col2im(&cols, block);
            }
        }
    }
    Ok(gx)
}

/// Gradient of the convolution with respect to its weight.
pub fn conv2d_backward_weight<T: Element>(
    x: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    weight_shape: Shape4,
    p: ConvParams,
) -> Result<Tensor4<T>> {
    let geo = Geometry::new(x.shape(), weight_shape, p)?;
    grad_out.expect_shape(geo.os, "grad_out")?;
    let mut gw = Tensor4::zeros(weight_shape);
    if geo.is_depthwise() {
        if let Some(pp) = PaddedPlane::new(&geo) {
            let mut buf = vec![T::zero(); pp.padded_size()];
            let mut ext = vec![T::zero(); pp.len];
            depthwise_planes(&geo, |n, c, kh, kw| {
                pp.load(x.plane(n, c), &mut buf);
                let go = grad_out.plane(n, c);
                for oy in 0..pp.oh {
                    ext[oy * pp.pw..oy * pp.pw + pp.ow]
                        .copy_from_slice(&go[oy * pp.ow..(oy + 1) * pp.ow]);
                }
                let gk = &mut gw.data_mut()[c * kh * kw..(c + 1) * kh * kw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let dot = dot4(&ext, &buf[pp.tap(ky, kx)]);
                        gk[ky * kw + kx] = gk[ky * kw + kx] + dot;
                    }
                }
            });
            return Ok(gw);
        }
        depthwise_planes(&geo, |n, c, kh, kw| {
            let go = grad_out.plane(n, c);
            let xin = x.plane(n, c);
            let gk = &mut gw.data_mut()[c * kh * kw..(c + 1) * kh * kw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = T::zero();
                    geo.for_each_tap(ky, kx, |oy, cols, iy, ix0| {
                        let grow = &go[oy * geo.os.w..(oy + 1) * geo.os.w];
                        let irow = &xin[iy * geo.xs.w..(iy + 1) * geo.xs.w];
                        if geo.p.stride == 1 {
                            let len = cols.len();
                            for (&g, &i) in grow[cols].iter().zip(&irow[ix0..ix0 + len]) {
                                acc = acc + g * i;
                            }
                        } else {
                            for (j, ox) in cols.enumerate() {
                                acc = acc + grow[ox] * irow[ix0 + j * geo.p.stride];
                            }
                        }
                    });
                    gk[ky * kw + kx] = gk[ky * kw + kx] + acc;
                }
            }
        });
        return Ok(gw);
    }
    let ohw = geo.os.spatial();
    let k = geo.k();
    for n in 0..geo.xs.n {
        for g in 0..p.groups {
            let cols = geo.im2col(geo.input_block(x.data(), n, g));
            let go = &grad_out.data()[geo.output_range(n, g)];
            let range = geo.weight_range(g);
            gemm_nt(geo.cog, k, ohw, go, &cols, &mut gw.data_mut()[range]);
        }
    }
    Ok(gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Shape4, v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(shape, v.to_vec()).unwrap()
    }

    fn identity_kernel() -> Tensor4<f64> {
        Tensor4::from_fn(Shape4::new(1, 1, 3, 3), |_, _, y, x| {
            if y == 1 && x == 1 {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::<f64>::randn(Shape4::new(1, 1, 3, 3), 1.0, &mut rng);
        let p = ConvParams::new(1, 1, 1);
        assert_eq!(conv2d_direct(&x, &identity_kernel(), p).unwrap(), x);
        assert_eq!(conv2d_fast(&x, &identity_kernel(), p).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 1, 5, 4));
        let w = Tensor4::<f64>::randn(Shape4::new(2, 1, 3, 3), 1.0, &mut rng);
        let p = ConvParams::new(1, 1, 1);
        assert!(conv2d_direct(&x, &w, p)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(conv2d_fast(&x, &w, p)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn hand_executed_2x2() {
        let x = t(Shape4::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let w = t(Shape4::new(1, 1, 2, 2), &[1.0, 0.0, 0.0, 1.0]);
        let p = ConvParams::default();
        let out = conv2d_direct(&x, &w, p).unwrap();
        assert_eq!(out.shape(), Shape4::new(1, 1, 1, 1));
        assert_eq!(out.data(), &[5.0]);
        assert_eq!(conv2d_fast(&x, &w, p).unwrap().data(), &[5.0]);
    }

    #[test]
    fn geometry_and_dimension_errors() {
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 4, 2, 2));
        let w = Tensor4::<f64>::zeros(Shape4::new(2, 4, 3, 3));
        assert!(matches!(
            conv2d_direct(&x, &w, ConvParams::default()),
            Err(Error::Geometry(_))
        ));
        let w = Tensor4::<f64>::zeros(Shape4::new(2, 3, 1, 1));
        assert!(matches!(
            conv2d_fast(&x, &w, ConvParams::default()),
            Err(Error::Dimension { axis: "c_in", .. })
        ));
        let w = Tensor4::<f64>::zeros(Shape4::new(3, 2, 1, 1));
        assert!(matches!(
            conv2d_fast(&x, &w, ConvParams::new(1, 0, 2)),
            Err(Error::Dimension { axis: "c_out", .. })
        ));
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 3, 2, 2));
        assert!(matches!(
            conv2d_fast(&x, &w, ConvParams::new(1, 0, 2)),
            Err(Error::Dimension { axis: "c_in", .. })
        ));
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Shape4, Shape4, ConvParams) {
        let groups = rng.random_range(1..=3);
        let cig = rng.random_range(1..=3);
        let cog = rng.random_range(1..=3);
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let padding = rng.random_range(0..=2);
        let h = rng.random_range(k.max(1)..=8);
        let w = rng.random_range(k.max(1)..=8);
        let n = rng.random_range(1..=2);
        (
            Shape4::new(n, groups * cig, h, w),
            Shape4::new(groups * cog, cig, k, k),
            ConvParams::new(stride, padding, groups),
        )
    }

    #[test]
    fn fast_matches_direct_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let (xs, ws, p) = random_case(&mut rng);
            let x = Tensor4::<f64>::randn(xs, 1.0, &mut rng);
            let w = Tensor4::<f64>::randn(ws, 1.0, &mut rng);
            let a = conv2d_direct(&x, &w, p).unwrap();
            let b = conv2d_fast(&x, &w, p).unwrap();
            assert!(
                a.max_rel_diff(&b, 1e-12).unwrap() < 1e-12,
                "{xs} {ws} {p:?}"
            );
        }
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let (xs, ws, p) = random_case(&mut rng);
            let x = Tensor4::<f64>::randn(xs, 1.0, &mut rng);
            let y = Tensor4::<f64>::randn(xs, 1.0, &mut rng);
            let w = Tensor4::<f64>::randn(ws, 1.0, &mut rng);
            let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let mix = x.scale(alpha).add(&y.scale(beta)).unwrap();
            let lhs = conv2d_fast(&mix, &w, p).unwrap();
            let rhs = conv2d_fast(&x, &w, p)
                .unwrap()
                .scale(alpha)
                .add(&conv2d_fast(&y, &w, p).unwrap().scale(beta))
                .unwrap();
            let scale = lhs.max_abs().max(1.0);
            let err = lhs.sub(&rhs).unwrap().max_abs() / scale;
            assert!(err < 1e-12, "{err}");
        }
    }

    /// Backward kernels against the adjoint identity <conv(x), g> = <x, conv^T(g)>.
    #[test]
    fn backward_kernels_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (xs, ws, p) = random_case(&mut rng);
            let x = Tensor4::<f64>::randn(xs, 1.0, &mut rng);
            let w = Tensor4::<f64>::randn(ws, 1.0, &mut rng);
            let y = conv2d_direct(&x, &w, p).unwrap();
            let g = Tensor4::<f64>::randn(y.shape(), 1.0, &mut rng);
            let lhs = y.dot(&g).unwrap();
            let gx = conv2d_backward_input(&g, &w, xs, p).unwrap();
            let gw = conv2d_backward_weight(&x, &g, ws, p).unwrap();
            let via_x = x.dot(&gx).unwrap();
            let via_w = w.dot(&gw).unwrap();
            assert!((lhs - via_x).abs() < 1e-10 * lhs.abs().max(1.0));
            assert!((lhs - via_w).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }
}
