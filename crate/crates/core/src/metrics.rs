//! Full-reference image quality: PSNR and SSIM.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported PSNR for identical images, and the ceiling for all others.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// `10 log10(max_val^2 / MSE)` over all elements, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    a.same_dims(b, "psnr")?;
    if a.numel() == 0 {
        return Err(Error::invalid("psnr of empty tensors"));
    }
    let se: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    let mse = se / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Channel-mean luminance of image `bi`, row-major.
fn gray(t: &Tensor, bi: usize) -> Vec<f64> {
    let [_, c, h, w] = t.dims();
    let mut g = vec![0.0; h * w];
    for ci in 0..c {
        for (o, &v) in g.iter_mut().zip(t.plane(bi, ci)) {
            *o += v as f64;
        }
    }
    g.iter_mut().for_each(|v| *v /= c as f64);
    g
}

/// Valid-position separable filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = taps.iter().zip(&x[y * w + xo..]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for (j, &t) in taps.iter().enumerate() {
            for xo in 0..wo {
                out[yo * wo + xo] += t * rows[(yo + j) * wo + xo];
            }
        }
    }
    out
}

/// Mean SSIM on channel-mean luminance with an 11x11 Gaussian window
/// (sigma 1.5, dynamic range 1), over valid window positions, averaged
/// over the batch.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_dims(b, "ssim")?;
    let [n, _, h, w] = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for bi in 0..n {
        let (x, y) = (gray(a, bi), gray(b, bi));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &taps));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / n as f64)
}

/// Per-image and mean PSNR / SSIM of predictions against references.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<(f64, f64)>,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn evaluate(pairs: &[(Tensor, Tensor)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("no image pairs to evaluate"));
        }
        let per_image = pairs.iter().map(|(a, b)| Ok((psnr(a, b, 1.0)?, ssim(a, b)?))).collect::<Result<Vec<_>>>()?;
        let n = per_image.len() as f64;
        let psnr = per_image.iter().map(|p| p.0).sum::<f64>() / n;
        let ssim = per_image.iter().map(|p| p.1).sum::<f64>() / n;
        Ok(MetricReport { per_image, psnr, ssim })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Tensor {
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| f(c, y, x))
    }

    #[test]
    fn psnr_cap_and_closed_form() {
        let a = img(8, 8, |c, y, x| ((c + y * x) % 5) as f32 / 5.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
        // A tiny nonzero error would exceed the cap uncapped.
        let c = a.map(|v| v + 1e-7);
        assert!(psnr(&a, &c, 1.0).unwrap() <= PSNR_CAP);
        assert!(psnr(&a, &img(8, 9, |_, _, _| 0.0), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_errors() {
        let a = img(16, 20, |c, y, x| ((c * 7 + y * 3 + x * x) % 11) as f32 / 11.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let small = img(10, 20, |_, _, _| 0.0);
        assert!(ssim(&small, &small).is_err());
    }

    /// Direct 2-D window sums at every valid position, no separability.
    fn ssim_direct(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let g = gaussian_taps(11, 1.5);
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i] * g[j];
                        let (p, q) = (a[(y0 + i) * w + x0 + j], b[(y0 + i) * w + x0 + j]);
                        ma += wt * p;
                        mb += wt * q;
                        saa += wt * p * p;
                        sbb += wt * q * q;
                        sab += wt * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_of_inverted_binary_is_negative_and_matches_direct_sums() {
        let a = img(14, 15, |_, y, x| ((y + x) % 2) as f32);
        let b = a.map(|v| 1.0 - v);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.0, "{s}");
        let ga: Vec<f64> = a.plane(0, 0).iter().map(|&v| v as f64).collect();
        let gb: Vec<f64> = b.plane(0, 0).iter().map(|&v| v as f64).collect();
        assert!((s - ssim_direct(&ga, &gb, 14, 15)).abs() < 1e-9);
    }

    #[test]
    fn report_averages() {
        let a = img(12, 12, |_, y, x| (y * x % 3) as f32 / 3.0);
        let r = MetricReport::evaluate(&[(a.clone(), a.clone()), (a.clone(), a.map(|v| v + 0.1))]).unwrap();
        assert!((r.psnr - 60.0).abs() < 1e-4);
        assert_eq!(r.per_image.len(), 2);
        assert!(MetricReport::evaluate(&[]).is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in 0u64..1000) {
            let a = img(12, 13, |c, y, x| (((seed as usize + c * 5 + y * 7 + x * 3) * 2654435761) % 97) as f32 / 97.0);
            let b = img(12, 13, |c, y, x| (((seed as usize + c + y * 11 + x) * 40503) % 89) as f32 / 89.0);
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }
    }
}
