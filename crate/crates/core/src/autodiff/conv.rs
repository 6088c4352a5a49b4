//! Convolution kernels: tap-list convolution (im2col + GEMM) and dilated depthwise.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One sampling location of a tap-list convolution.
///
/// The tap reads the input at `p + (dy, dx) + shift`; a non-zero `shift` is
/// resolved by bilinear interpolation. Disabled taps keep their weight slot
/// but never contribute and never receive gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub dy: i32,
    pub dx: i32,
    pub enabled: bool,
    pub shift: [f64; 2],
}

impl Tap {
    pub fn new(dy: i32, dx: i32) -> Self {
        Tap { dy, dx, enabled: true, shift: [0.0, 0.0] }
    }

    pub fn masked(dy: i32, dx: i32) -> Self {
        Tap { dy, dx, enabled: false, shift: [0.0, 0.0] }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.dy as f64 + self.shift[0], self.dx as f64 + self.shift[1]]
    }
}

/// Ordered taps with a declared square footprint of the given radius.
#[derive(Clone, Debug, PartialEq)]
pub struct TapSet {
    radius: usize,
    taps: Vec<Tap>,
}

impl TapSet {
    pub fn new(radius: usize, taps: Vec<Tap>) -> Result<Self> {
        let r = radius as f64;
        for t in &taps {
            let [py, px] = t.position();
            let base_ok = t.dy.unsigned_abs() as usize <= radius && t.dx.unsigned_abs() as usize <= radius;
            if !base_ok || py.abs() > r || px.abs() > r || !py.is_finite() || !px.is_finite() {
                return Err(Error::invalid(format!(
                    "tap ({}, {}) shifted to ({py}, {px}) lies outside footprint radius {radius}",
                    t.dy, t.dx
                )));
            }
        }
        Ok(TapSet { radius, taps })
    }

    /// Dense k x k grid with spacing `dilation`, all taps enabled.
    pub fn grid(k: usize, dilation: usize) -> Result<Self> {
        if k % 2 == 0 || dilation == 0 {
            return Err(Error::invalid(format!("grid needs odd k and dilation >= 1, got {k}, {dilation}")));
        }
        let r = (k / 2) as i32;
        let d = dilation as i32;
        let taps = (-r..=r).flat_map(|y| (-r..=r).map(move |x| Tap::new(y * d, x * d))).collect();
        TapSet::new(k / 2 * dilation, taps)
    }

    pub fn pointwise() -> Self {
        TapSet { radius: 0, taps: vec![Tap::new(0, 0)] }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn enabled_count(&self) -> usize {
        self.taps.iter().filter(|t| t.enabled).count()
    }
}

/// Precomputed sampling pattern of a tap-list convolution.
#[derive(Clone, Debug)]
pub(crate) struct ConvPlan {
    /// Index into the weight's tap axis for each enabled tap.
    pub tap_index: Vec<usize>,
    /// Bilinear corner samples `(dy, dx, weight)` per enabled tap.
    pub samples: Vec<Vec<(i32, i32, f64)>>,
    pub n_taps: usize,
    pub stride: usize,
    pub pointwise: bool,
}

impl ConvPlan {
    pub fn new(taps: &TapSet, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        let mut tap_index = Vec::new();
        let mut samples = Vec::new();
        for (i, t) in taps.taps().iter().enumerate() {
            if !t.enabled {
                continue;
            }
            tap_index.push(i);
            samples.push(bilinear_corners(t));
        }
        let pointwise = stride == 1 && samples.len() == 1 && samples[0] == [(0, 0, 1.0)];
        Ok(ConvPlan { tap_index, samples, n_taps: taps.len(), stride, pointwise })
    }

    pub fn out_extent(&self, n: usize) -> usize {
        if n == 0 {
            0
        } else {
            (n - 1) / self.stride + 1
        }
    }
}

fn bilinear_corners(t: &Tap) -> Vec<(i32, i32, f64)> {
    if t.shift == [0.0, 0.0] {
        return vec![(t.dy, t.dx, 1.0)];
    }
    let [py, px] = t.position();
    let (y0, x0) = (py.floor(), px.floor());
    let (fy, fx) = (py - y0, px - x0);
    let (y0, x0) = (y0 as i32, x0 as i32);
    let mut out = Vec::with_capacity(4);
    for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
            let w = wy * wx;
            if w != 0.0 {
                out.push((y0 + oy, x0 + ox, w));
            }
        }
    }
    out
}

/// Output columns `[x_lo, x_hi)` whose sample `x * stride + off` lies in `[0, w)`.
#[inline]
fn valid_range(off: i32, stride: usize, w_in: usize, w_out: usize) -> (usize, usize) {
    let s = stride as i64;
    let off = off as i64;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = if (w_in as i64) - off <= 0 { 0 } else { ((w_in as i64) - off + s - 1) / s };
    let lo = lo.clamp(0, w_out as i64) as usize;
    let hi = hi.clamp(0, w_out as i64) as usize;
    (lo, hi.max(lo))
}

/// Fills `cols` ((c_in * taps) x (h_out * w_out)) for one batch item.
pub(crate) fn im2col<T: Scalar>(
    plan: &ConvPlan,
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    cols: &mut [T],
) {
    let (ho, wo) = (plan.out_extent(h), plan.out_extent(w));
    let n_eff = plan.samples.len();
    let s = plan.stride;
    cols.fill(T::zero());
    for ci in 0..c_in {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for (t, samples) in plan.samples.iter().enumerate() {
            let row = &mut cols[(ci * n_eff + t) * ho * wo..(ci * n_eff + t + 1) * ho * wo];
            for &(sy, sx, sw) in samples {
                let sw = T::lit(sw);
                let (ylo, yhi) = valid_range(sy, s, h, ho);
                let (xlo, xhi) = valid_range(sx, s, w, wo);
                for oy in ylo..yhi {
                    let iy = (oy * s) as i64 + sy as i64;
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        let ix0 = (xlo as i64 + sx as i64) as usize;
                        let src = &src_row[ix0..ix0 + (xhi - xlo)];
                        for (d, &v) in dst[xlo..xhi].iter_mut().zip(src) {
                            *d += sw * v;
                        }
                    } else {
                        for ox in xlo..xhi {
                            let ix = (ox * s) as i64 + sx as i64;
                            dst[ox] += sw * src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `dcols` into `dinput` (accumulating).
pub(crate) fn col2im<T: Scalar>(
    plan: &ConvPlan,
    dcols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    dinput: &mut [T],
) {
    let (ho, wo) = (plan.out_extent(h), plan.out_extent(w));
    let n_eff = plan.samples.len();
    let s = plan.stride;
    for ci in 0..c_in {
        let plane = &mut dinput[ci * h * w..(ci + 1) * h * w];
        for (t, samples) in plan.samples.iter().enumerate() {
            let row = &dcols[(ci * n_eff + t) * ho * wo..(ci * n_eff + t + 1) * ho * wo];
            for &(sy, sx, sw) in samples {
                let sw = T::lit(sw);
                let (ylo, yhi) = valid_range(sy, s, h, ho);
                let (xlo, xhi) = valid_range(sx, s, w, wo);
                for oy in ylo..yhi {
                    let iy = ((oy * s) as i64 + sy as i64) as usize;
                    let src = &row[oy * wo..(oy + 1) * wo];
                    let dst_row = &mut plane[iy * w..(iy + 1) * w];
                    if s == 1 {
                        let ix0 = (xlo as i64 + sx as i64) as usize;
                        for (d, &g) in dst_row[ix0..ix0 + (xhi - xlo)].iter_mut().zip(&src[xlo..xhi]) {
                            *d += sw * g;
                        }
                    } else {
                        for ox in xlo..xhi {
                            let ix = ((ox * s) as i64 + sx as i64) as usize;
                            dst_row[ix] += sw * src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Gathers the enabled-tap weights into a dense (c_out x c_in * n_eff) matrix.
pub(crate) fn gather_weights<T: Scalar>(plan: &ConvPlan, weight: &[T], c_out: usize, c_in: usize) -> Vec<T> {
    let n_eff = plan.tap_index.len();
    let mut w = vec![T::zero(); c_out * c_in * n_eff];
    for co in 0..c_out {
        for ci in 0..c_in {
            for (t, &ti) in plan.tap_index.iter().enumerate() {
                w[(co * c_in + ci) * n_eff + t] = weight[(co * c_in + ci) * plan.n_taps + ti];
            }
        }
    }
    w
}

pub(crate) fn scatter_weight_grad<T: Scalar>(
    plan: &ConvPlan,
    dw_eff: &[T],
    c_out: usize,
    c_in: usize,
    dweight: &mut [T],
) {
    let n_eff = plan.tap_index.len();
    for co in 0..c_out {
        for ci in 0..c_in {
            for (t, &ti) in plan.tap_index.iter().enumerate() {
                dweight[(co * c_in + ci) * plan.n_taps + ti] += dw_eff[(co * c_in + ci) * n_eff + t];
            }
        }
    }
}

/// Scratch for depthwise planes. Each plane is embedded in a zero border of
/// `pad = (k / 2) * dilation`, row stride `w + 2 * pad`, so every tap becomes
/// one contiguous flat shift over the output rows. Output columns `>= w` of
/// the strided layout are scratch and never read back.
pub(crate) struct DepthwiseScratch<T> {
    k: usize,
    dilation: usize,
    h: usize,
    w: usize,
    pad: usize,
    stride: usize,
    padded: Vec<T>,
    strided: Vec<T>,
    dpadded: Vec<T>,
}

impl<T: Scalar> DepthwiseScratch<T> {
    pub(crate) fn new(k: usize, dilation: usize, h: usize, w: usize) -> Self {
        let pad = (k / 2) * dilation;
        let stride = w + 2 * pad;
        let n_pad = (h + 2 * pad) * stride;
        DepthwiseScratch {
            k,
            dilation,
            h,
            w,
            pad,
            stride,
            padded: vec![T::zero(); n_pad],
            strided: vec![T::zero(); h * stride],
            dpadded: vec![T::zero(); n_pad],
        }
    }

    /// Flat length of the strided output region that stays in bounds for all taps.
    #[inline]
    fn span(&self) -> usize {
        (self.h - 1) * self.stride + self.w
    }

    #[inline]
    fn tap_offset(&self, ky: usize, kx: usize) -> usize {
        ky * self.dilation * self.stride + kx * self.dilation
    }

    fn load(&mut self, input: &[T]) {
        let (w, s, p) = (self.w, self.stride, self.pad);
        for (y, row) in input.chunks_exact(w).enumerate() {
            let at = (y + p) * s + p;
            self.padded[at..at + w].copy_from_slice(row);
        }
    }

    /// Adds the convolution of `input` with `kernel` to `out`.
    pub(crate) fn forward(&mut self, input: &[T], kernel: &[T], out: &mut [T]) {
        self.load(input);
        let n = self.span();
        self.strided.fill(T::zero());
        for ky in 0..self.k {
            for kx in 0..self.k {
                let kw = kernel[ky * self.k + kx];
                if kw == T::zero() {
                    continue;
                }
                let off = self.tap_offset(ky, kx);
                axpy(kw, &self.padded[off..off + n], &mut self.strided[..n]);
            }
        }
        for (y, row) in out.chunks_exact_mut(self.w).enumerate() {
            for (o, &v) in row.iter_mut().zip(&self.strided[y * self.stride..]) {
                *o += v;
            }
        }
    }

    /// Accumulates input and kernel gradients of [`Self::forward`].
    pub(crate) fn backward(
        &mut self,
        input: &[T],
        kernel: &[T],
        dout: &[T],
        dinput: Option<&mut [T]>,
        dkernel: Option<&mut [T]>,
    ) {
        let n = self.span();
        let (w, s) = (self.w, self.stride);
        // Scratch columns of the strided gradient must be zero so they add nothing.
        self.strided.fill(T::zero());
        for (y, row) in dout.chunks_exact(w).enumerate() {
            self.strided[y * s..y * s + w].copy_from_slice(row);
        }
        if let Some(dk) = dkernel {
            self.load(input);
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let off = self.tap_offset(ky, kx);
                    dk[ky * self.k + kx] += dot(&self.padded[off..off + n], &self.strided[..n]);
                }
            }
        }
        if let Some(di) = dinput {
            self.dpadded.fill(T::zero());
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let kw = kernel[ky * self.k + kx];
                    if kw == T::zero() {
                        continue;
                    }
                    let off = self.tap_offset(ky, kx);
                    axpy(kw, &self.strided[..n], &mut self.dpadded[off..off + n]);
                }
            }
            let p = self.pad;
            for (y, row) in di.chunks_exact_mut(w).enumerate() {
                let at = (y + p) * s + p;
                for (d, &v) in row.iter_mut().zip(&self.dpadded[at..at + w]) {
                    *d += v;
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_clips_both_sides() {
        assert_eq!(valid_range(-2, 1, 5, 5), (2, 5));
        assert_eq!(valid_range(2, 1, 5, 5), (0, 3));
        assert_eq!(valid_range(0, 2, 5, 3), (0, 3));
        assert_eq!(valid_range(1, 2, 5, 3), (0, 2));
        assert_eq!(valid_range(9, 1, 5, 5), (0, 0));
        assert_eq!(valid_range(-9, 1, 5, 5), (5, 5));
    }

    #[test]
    fn bilinear_corners_sum_to_one() {
        let t = Tap { dy: 4, dx: -4, enabled: true, shift: [-2.4, 2.4] };
        let c = bilinear_corners(&t);
        let s: f64 = c.iter().map(|s| s.2).sum();
        assert!((s - 1.0).abs() < 1e-12);
        // 1.6 -> corners 1 and 2 with weights 0.4 / 0.6
        assert!(c.iter().any(|&(y, _, _)| y == 1));
        assert!(c.iter().any(|&(y, _, _)| y == 2));
    }

    #[test]
    fn tapset_rejects_outside_footprint() {
        assert!(TapSet::new(1, vec![Tap::new(2, 0)]).is_err());
        let shifted = Tap { dy: 1, dx: 0, enabled: true, shift: [0.5, 0.0] };
        assert!(TapSet::new(1, vec![shifted]).is_err());
    }
}
