//! Pure data-movement kernels: padding, cropping, pixel (un)shuffle, concat.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bookkeeping for pixel-shuffle downsampling of a (height x width) map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PdGeometry {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl PdGeometry {
    /// Extents after reflect padding to multiples of the stride.
    pub fn padded(&self) -> (usize, usize) {
        let s = self.stride.max(1);
        (self.height.div_ceil(s) * s, self.width.div_ceil(s) * s)
    }
}

/// Mirror index without edge repeat, folded periodically so any pad fits.
/// A single-sample axis has no mirror and repeats its only value.
#[inline]
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let m = i % (2 * (n - 1));
    if m < n {
        m
    } else {
        2 * (n - 1) - m
    }
}

pub(crate) fn pad_reflect<T: Scalar>(x: &Tensor<T>, ph: usize, pw: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims();
    if ph < h || pw < w || h == 0 || w == 0 {
        return Err(Error::invalid(format!("cannot reflect-pad {h}x{w} to {ph}x{pw}")));
    }
    Ok(Tensor::from_fn([b, c, ph, pw], |[bi, ci, y, xx]| x.at([bi, ci, reflect(y, h), reflect(xx, w)])))
}

pub(crate) fn pad_reflect_backward<T: Scalar>(g: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [b, c, ph, pw] = g.dims();
    let mut dx = Tensor::zeros([b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..ph {
                for xx in 0..pw {
                    let o = dx.offset([bi, ci, reflect(y, h), reflect(xx, w)]);
                    dx.data_mut()[o] += g.at([bi, ci, y, xx]);
                }
            }
        }
    }
    Ok(dx)
}

pub(crate) fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [b, c, xh, xw] = x.dims();
    if h > xh || w > xw {
        return Err(Error::invalid(format!("cannot crop {xh}x{xw} to {h}x{w}")));
    }
    Ok(Tensor::from_fn([b, c, h, w], |i| x.at(i)))
}

pub(crate) fn crop_backward<T: Scalar>(g: &Tensor<T>, dims: [usize; 4]) -> Result<Tensor<T>> {
    let [_, _, h, w] = g.dims();
    Ok(Tensor::from_fn(dims, |[b, c, y, x]| if y < h && x < w { g.at([b, c, y, x]) } else { T::zero() }))
}

/// (B, C, H, W) -> (B*s*s, C, H/s, W/s); sub-image `b*s*s + py*s + px` = phase (py, px).
pub(crate) fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::shape(format!("{h}x{w} not divisible by pd stride {s}")));
    }
    let (hs, ws) = (h / s, w / s);
    Ok(Tensor::from_fn([b * s * s, c, hs, ws], |[bb, ci, y, xx]| {
        let (bi, phase) = (bb / (s * s), bb % (s * s));
        let (py, px) = (phase / s, phase % s);
        x.at([bi, ci, y * s + py, xx * s + px])
    }))
}

/// Exact inverse of [`pixel_unshuffle`].
pub(crate) fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let [bb, c, hs, ws] = x.dims();
    if s == 0 || bb % (s * s) != 0 {
        return Err(Error::shape(format!("batch {bb} not divisible by pd stride^2 = {}", s * s)));
    }
    Ok(Tensor::from_fn([bb / (s * s), c, hs * s, ws * s], |[bi, ci, y, xx]| {
        let phase = (y % s) * s + xx % s;
        x.at([bi * s * s + phase, ci, y / s, xx / s])
    }))
}

pub(crate) fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
    let [b, _, h, w] = first.dims();
    for p in parts {
        let d = p.dims();
        if d[0] != b || d[2] != h || d[3] != w {
            return Err(Error::shape(format!("concat {:?} with {d:?}", first.dims())));
        }
    }
    let c_total: usize = parts.iter().map(|p| p.dims()[1]).sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(b * c_total * hw);
    for bi in 0..b {
        for p in parts {
            let c = p.dims()[1];
            data.extend_from_slice(&p.data()[bi * c * hw..(bi + 1) * c * hw]);
        }
    }
    Tensor::new([b, c_total, h, w], data)
}

/// Tensor-level pixel-shuffle downsampling (no tape).
pub fn pd_down<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<(Tensor<T>, PdGeometry)> {
    if s < 1 {
        return Err(Error::invalid("pd stride must be >= 1"));
    }
    let [_, _, h, w] = x.dims();
    let geom = PdGeometry { stride: s, height: h, width: w };
    let (ph, pw) = geom.padded();
    let padded = if (ph, pw) != (h, w) { pad_reflect(x, ph, pw)? } else { x.clone() };
    Ok((pixel_unshuffle(&padded, s)?, geom))
}

/// Tensor-level inverse of [`pd_down`].
pub fn pd_up<T: Scalar>(x: &Tensor<T>, geom: &PdGeometry) -> Result<Tensor<T>> {
    let full = pixel_shuffle(x, geom.stride)?;
    crop(&full, geom.height, geom.width)
}
