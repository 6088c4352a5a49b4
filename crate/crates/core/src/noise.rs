//! Spatial noise statistics: per-offset Pearson correlation, the derived
//! exclusion mask, and a seeded generator of spatially correlated noise.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorRecord};

/// Minimum number of pixel pairs per offset accepted by [`estimate_correlation`].
pub const MIN_PAIRS: u64 = 10_000;

/// `noisy - clean`.
pub fn extract_noise(noisy: &Tensor, clean: &Tensor) -> Result<Tensor> {
    noisy.same_dims(clean, "extract_noise")?;
    let data = noisy.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
    Tensor::new(noisy.dims(), data)
}

/// Square grid indexed by relative offset `(dy, dx)`, `|dy|, |dx| <= radius`.
fn grid_index(radius: usize, dy: i32, dx: i32) -> Option<usize> {
    let r = radius as i32;
    if dy.abs() > r || dx.abs() > r {
        return None;
    }
    let n = 2 * radius + 1;
    Some((dy + r) as usize * n + (dx + r) as usize)
}

/// Pearson coefficient of the noise at `p` and `p + δ` for every offset δ in
/// a square window.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMap {
    radius: usize,
    rho: Vec<f64>,
    counts: Vec<u64>,
}

impl CorrelationMap {
    pub fn new(radius: usize, rho: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        let n = (2 * radius + 1).pow(2);
        if rho.len() != n || counts.len() != n {
            return Err(Error::shape(format!("correlation grid of radius {radius} needs {n} cells")));
        }
        Ok(CorrelationMap { radius, rho, counts })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn rho(&self, dy: i32, dx: i32) -> f64 {
        grid_index(self.radius, dy, dx).map_or(0.0, |i| self.rho[i])
    }

    pub fn count(&self, dy: i32, dx: i32) -> u64 {
        grid_index(self.radius, dy, dx).map_or(0, |i| self.counts[i])
    }

    pub fn offsets(&self) -> impl Iterator<Item = (i32, i32)> {
        let r = self.radius as i32;
        (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| (dy, dx)))
    }

    /// Rank-3 record (2, 2R+1, 2R+1): ρ, then the pair counts.
    pub fn to_record(&self) -> TensorRecord {
        let n = 2 * self.radius + 1;
        let mut data: Vec<f32> = self.rho.iter().map(|&v| v as f32).collect();
        data.extend(self.counts.iter().map(|&c| c as f32));
        TensorRecord { extents: vec![2, n, n], data }
    }

    pub fn from_record(rec: &TensorRecord) -> Result<Self> {
        match rec.extents[..] {
            [2, n, m] if n == m && n % 2 == 1 => {
                let cells = n * n;
                let rho = rec.data[..cells].iter().map(|&v| v as f64).collect();
                let counts = rec.data[cells..].iter().map(|&v| v.max(0.0) as u64).collect();
                CorrelationMap::new(n / 2, rho, counts)
            }
            _ => Err(Error::Format(format!("correlation map record has extents {:?}", rec.extents))),
        }
    }
}

/// Pooled per-offset Pearson correlation over every image and channel.
///
/// Pairs with either pixel outside the image are dropped. The center is set
/// to exactly 1.
pub fn estimate_correlation(noise_maps: &[Tensor], radius: usize) -> Result<CorrelationMap> {
    let r = radius as i32;
    let n = 2 * radius + 1;
    let mut rho = vec![0.0; n * n];
    let mut counts = vec![0u64; n * n];
    for dy in -r..=r {
        for dx in -r..=r {
            let mut acc = PairAcc::default();
            for t in noise_maps {
                let [b, c, h, w] = t.dims();
                let (dyu, dxu) = (dy.unsigned_abs() as usize, dx.unsigned_abs() as usize);
                if dyu >= h || dxu >= w {
                    continue;
                }
                for bi in 0..b {
                    for ci in 0..c {
                        let plane = t.plane(bi, ci);
                        let (y0, y1) = if dy >= 0 { (0, h - dyu) } else { (dyu, h) };
                        let (x0, x1) = if dx >= 0 { (0, w - dxu) } else { (dxu, w) };
                        for y in y0..y1 {
                            let yb = (y as i32 + dy) as usize;
                            let a = &plane[y * w + x0..y * w + x1];
                            let xb0 = (x0 as i32 + dx) as usize;
                            let bb = &plane[yb * w + xb0..yb * w + xb0 + (x1 - x0)];
                            acc.add_row(a, bb);
                        }
                    }
                }
            }
            let i = grid_index(radius, dy, dx).expect("offset inside window");
            counts[i] = acc.n;
            if acc.n < MIN_PAIRS {
                return Err(Error::InsufficientSamples(format!(
                    "offset ({dy}, {dx}) has {} pairs, need {MIN_PAIRS}",
                    acc.n
                )));
            }
            rho[i] = if dy == 0 && dx == 0 { 1.0 } else { acc.pearson()? };
        }
    }
    CorrelationMap::new(radius, rho, counts)
}

#[derive(Default)]
struct PairAcc {
    n: u64,
    sa: f64,
    sb: f64,
    saa: f64,
    sbb: f64,
    sab: f64,
}

impl PairAcc {
    fn add_row(&mut self, a: &[f32], b: &[f32]) {
        // Row-level partial sums keep the f64 accumulators well conditioned.
        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (x as f64, y as f64);
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        }
        self.n += a.len() as u64;
        self.sa += sa;
        self.sb += sb;
        self.saa += saa;
        self.sbb += sbb;
        self.sab += sab;
    }

    fn pearson(&self) -> Result<f64> {
        let n = self.n as f64;
        let (ma, mb) = (self.sa / n, self.sb / n);
        let va = self.saa / n - ma * ma;
        let vb = self.sbb / n - mb * mb;
        let cov = self.sab / n - ma * mb;
        let scale = (self.saa / n).max(self.sbb / n);
        if va <= 1e-12 * scale || vb <= 1e-12 * scale || scale == 0.0 {
            return Err(Error::invalid("noise has zero variance"));
        }
        Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
    }
}

/// Offsets usable by a blind-spot kernel: `false` marks the center and every
/// offset whose noise is strongly correlated with it.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrMask {
    radius: usize,
    bits: Vec<bool>,
    threshold: f64,
}

impl CorrMask {
    /// Builds a mask from an explicit exclusion predicate, symmetrized and
    /// with the center always excluded.
    pub fn from_fn(radius: usize, threshold: f64, excluded: impl Fn(i32, i32) -> bool) -> Self {
        let r = radius as i32;
        let n = 2 * radius + 1;
        let mut bits = vec![true; n * n];
        for dy in -r..=r {
            for dx in -r..=r {
                if (dy == 0 && dx == 0) || excluded(dy, dx) || excluded(-dy, -dx) {
                    bits[grid_index(radius, dy, dx).expect("inside")] = false;
                }
            }
        }
        CorrMask { radius, bits, threshold }
    }

    /// Excludes only the center.
    pub fn center_only(radius: usize) -> Self {
        Self::from_fn(radius, 1.0, |_, _| false)
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Offsets outside the window count as usable.
    pub fn bit(&self, dy: i32, dx: i32) -> bool {
        grid_index(self.radius, dy, dx).is_none_or(|i| self.bits[i])
    }

    pub fn excluded_count(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }

    /// Re-centers the mask on a window of a different radius; new cells are usable.
    pub fn resized(&self, radius: usize) -> Self {
        Self::from_fn(radius, self.threshold, |dy, dx| !self.bit(dy, dx))
    }

    /// Rank-2 record of 0/1 bits.
    pub fn to_record(&self) -> TensorRecord {
        let n = 2 * self.radius + 1;
        TensorRecord { extents: vec![n, n], data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect() }
    }

    pub fn from_record(rec: &TensorRecord, threshold: f64) -> Result<Self> {
        match rec.extents[..] {
            [n, m] if n == m && n % 2 == 1 => {
                let radius = n / 2;
                let r = radius as i32;
                Ok(Self::from_fn(radius, threshold, |dy, dx| rec.data[((dy + r) as usize) * n + (dx + r) as usize] < 0.5))
            }
            _ => Err(Error::Format(format!("mask record has extents {:?}", rec.extents))),
        }
    }

    /// `x` excluded, `o` usable; one text row per dy.
    pub fn grid_text(&self) -> String {
        let r = self.radius as i32;
        let mut s = String::new();
        for dy in -r..=r {
            for dx in -r..=r {
                s.push(if self.bit(dy, dx) { 'o' } else { 'x' });
            }
            s.push('\n');
        }
        s
    }

    /// Parses [`CorrMask::grid_text`] output; blank lines are ignored.
    pub fn from_grid_text(text: &str, threshold: f64) -> Result<Self> {
        let rows: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let n = rows.len();
        if n % 2 == 0 || rows.iter().any(|r| r.chars().count() != n) {
            return Err(Error::Format(format!("mask grid must be an odd square, got {n} rows")));
        }
        let mut bits = Vec::with_capacity(n * n);
        for r in &rows {
            for ch in r.chars() {
                bits.push(match ch {
                    'o' => true,
                    'x' => false,
                    _ => return Err(Error::Format(format!("unexpected mask character '{ch}'"))),
                });
            }
        }
        let radius = n / 2;
        let r = radius as i32;
        Ok(Self::from_fn(radius, threshold, |dy, dx| !bits[((dy + r) as usize) * n + (dx + r) as usize]))
    }
}

/// Excludes every offset with `|ρ| >= tau`, and the center.
pub fn build_corr_mask(map: &CorrelationMap, tau: f64) -> Result<CorrMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("threshold {tau} outside (0, 1)")));
    }
    Ok(CorrMask::from_fn(map.radius(), tau, |dy, dx| map.rho(dy, dx).abs() >= tau))
}

/// Tab-separated `dy dx rho count bit` lines.
pub fn correlation_report(map: &CorrelationMap, mask: Option<&CorrMask>) -> String {
    let mut s = String::from("dy\tdx\trho\tpairs\tbit\n");
    for (dy, dx) in map.offsets() {
        let bit = mask.map_or(String::from("-"), |m| u8::from(m.bit(dy, dx)).to_string());
        let _ = writeln!(s, "{dy}\t{dx}\t{:.6}\t{}\t{bit}", map.rho(dy, dx), map.count(dy, dx));
    }
    s
}

/// Named synthesis kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKernel {
    Delta,
    Box3,
    /// Outer product of the binomial `[1, 2, 1]`.
    Gauss3,
}

impl NoiseKernel {
    pub fn weights(self) -> (usize, Vec<f64>) {
        match self {
            NoiseKernel::Delta => (1, vec![1.0]),
            NoiseKernel::Box3 => (3, vec![1.0; 9]),
            NoiseKernel::Gauss3 => {
                let b = [1.0, 2.0, 1.0];
                (3, b.iter().flat_map(|y| b.iter().map(move |x| y * x)).collect())
            }
        }
    }
}

impl std::str::FromStr for NoiseKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(NoiseKernel::Delta),
            "box3" => Ok(NoiseKernel::Box3),
            "gauss3" => Ok(NoiseKernel::Gauss3),
            _ => Err(Error::invalid(format!("unknown noise kernel '{s}' (delta|box3|gauss3)"))),
        }
    }
}

/// Parameters of `noisy = clean + (k * w) * (sigma + gain * clean)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSynthSpec {
    pub sigma: f64,
    /// Odd square kernel, row-major, `size * size` entries.
    pub kernel: Vec<f64>,
    pub kernel_size: usize,
    pub gain: f64,
    pub seed: u64,
}

impl NoiseSynthSpec {
    pub fn new(sigma: f64, kernel: NoiseKernel, gain: f64, seed: u64) -> Self {
        let (kernel_size, kernel) = kernel.weights();
        NoiseSynthSpec { sigma, kernel, kernel_size, gain, seed }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !(self.gain >= 0.0) {
            return Err(Error::invalid("sigma and gain must be non-negative"));
        }
        if self.kernel_size % 2 == 0 || self.kernel.len() != self.kernel_size * self.kernel_size {
            return Err(Error::invalid("noise kernel must be an odd square grid"));
        }
        if !(self.kernel.iter().sum::<f64>() > 0.0) {
            return Err(Error::invalid("noise kernel must have a positive sum"));
        }
        Ok(())
    }

    /// Kernel scaled to unit L2 norm, so that `sigma` is the marginal std.
    fn unit_kernel(&self) -> Vec<f64> {
        let norm = self.kernel.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.kernel.iter().map(|v| v / norm).collect()
    }
}

/// Stationary noise field `k * w` for one plane, drawn from `rng`.
fn correlated_field(rng: &mut ChaCha8Rng, kernel: &[f64], ks: usize, h: usize, w: usize) -> Vec<f64> {
    let r = ks / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let white: Vec<f64> = (0..ph * pw).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..ks {
                let row = &white[(y + ky) * pw + x..(y + ky) * pw + x + ks];
                for (kx, v) in row.iter().enumerate() {
                    acc += kernel[ky * ks + kx] * v;
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Adds seeded correlated noise. Each batch item draws from its own ChaCha8
/// stream, so the result does not depend on batch composition order.
pub fn synth_correlated_noise(clean: &Tensor, spec: &NoiseSynthSpec) -> Result<Tensor> {
    synth_correlated_noise_at(clean, spec, 0)
}

/// As [`synth_correlated_noise`], numbering batch items from `first_index`.
pub fn synth_correlated_noise_at(clean: &Tensor, spec: &NoiseSynthSpec, first_index: u64) -> Result<Tensor> {
    spec.validate()?;
    let kernel = spec.unit_kernel();
    let [b, c, h, w] = clean.dims();
    let mut out = clean.clone();
    for bi in 0..b {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(first_index + bi as u64);
        for ci in 0..c {
            let field = correlated_field(&mut rng, &kernel, spec.kernel_size, h, w);
            let base = (bi * c + ci) * h * w;
            let data = out.data_mut();
            for (i, n) in field.iter().enumerate() {
                let v = data[base + i] as f64;
                data[base + i] = (v + n * (spec.sigma + spec.gain * v)) as f32;
            }
        }
    }
    Ok(out)
}

/// Piecewise-smooth RGB test image in [0, 1]: a shaded background with
/// random discs and rectangles.
pub fn synth_clean(size: usize, seed: u64, index: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_C1EA);
    rng.set_stream(index);
    let s = size as f64;
    let color = |rng: &mut ChaCha8Rng| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let base = color(&mut rng);
    let grad = [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)];
    let mut img = Tensor::from_fn([1, 3, size, size], |[_, c, y, x]| {
        (base[c] * 0.6 + 0.2 + grad[0] * (y as f64 / s - 0.5) + grad[1] * (x as f64 / s - 0.5)) as f32
    });
    let shapes = rng.random_range(4..9);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let cy = rng.random::<f64>() * s;
        let cx = rng.random::<f64>() * s;
        let a = rng.random_range(0.08..0.35) * s;
        let b = rng.random_range(0.08..0.35) * s;
        let disc = rng.random::<bool>();
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = ((y as f64 - cy) / a, (x as f64 - cx) / b);
                let inside = if disc { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    for (c, v) in col.iter().enumerate() {
                        img.set([0, c, y, x], *v as f32);
                    }
                }
            }
        }
    }
    img.map(|v| v.clamp(0.0, 1.0))
}

/// Pseudo-clean proxy: per-channel median over a `(2r+1)^2` window clipped
/// to the image. A heuristic for data without clean references.
pub fn median_smooth(img: &Tensor, radius: usize) -> Tensor {
    let [b, c, h, w] = img.dims();
    let mut out = img.clone();
    let mut window = Vec::with_capacity((2 * radius + 1).pow(2));
    for bi in 0..b {
        for ci in 0..c {
            let plane = img.plane(bi, ci);
            for y in 0..h {
                for x in 0..w {
                    window.clear();
                    for yy in y.saturating_sub(radius)..(y + radius + 1).min(h) {
                        window.extend_from_slice(&plane[yy * w + x.saturating_sub(radius)..yy * w + (x + radius + 1).min(w)]);
                    }
                    let mid = window.len() / 2;
                    let (_, m, _) = window.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
                    out.set([bi, ci, y, x], *m);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn white(n: usize, seed: u64) -> Tensor {
        let spec = NoiseSynthSpec::new(1.0, NoiseKernel::Delta, 0.0, seed);
        synth_correlated_noise(&Tensor::zeros([1, 1, n, n]), &spec).unwrap()
    }

    #[test]
    fn extract_noise_cases() {
        let a = Tensor::from_fn([1, 1, 2, 2], |[_, _, y, x]| (y * 2 + x) as f32);
        assert!(extract_noise(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(extract_noise(&a, &Tensor::zeros([1, 1, 2, 2])).unwrap(), a);
        assert!(extract_noise(&a, &Tensor::zeros([1, 1, 2, 3])).is_err());
    }

    #[test]
    fn white_noise_is_uncorrelated() {
        let map = estimate_correlation(&[white(1000, 1)], 2).unwrap();
        assert_eq!(map.rho(0, 0), 1.0);
        for (dy, dx) in map.offsets().filter(|&o| o != (0, 0)) {
            assert!(map.rho(dy, dx).abs() < 0.01, "({dy},{dx}) {}", map.rho(dy, dx));
        }
    }

    #[test]
    fn duplicated_pixels_correlate_one_half() {
        // Pixel pairs (2j, 2j+1) share one value: half of all horizontal
        // neighbor pairs are identical, the other half independent.
        let base = white(1000, 2);
        let dup = Tensor::from_fn([1, 1, 1000, 1000], |[_, _, y, x]| base.at([0, 0, y, x & !1]));
        let map = estimate_correlation(&[dup], 1).unwrap();
        assert!((map.rho(0, 1) - 0.5).abs() < 0.01, "{}", map.rho(0, 1));
        assert!((map.rho(0, -1) - 0.5).abs() < 0.01);
        let mask = build_corr_mask(&map, 0.25).unwrap();
        let excluded: Vec<_> = map.offsets().filter(|&(dy, dx)| !mask.bit(dy, dx)).collect();
        assert_eq!(excluded, vec![(0, -1), (0, 0), (0, 1)]);
    }

    #[test]
    fn estimator_errors() {
        assert!(matches!(estimate_correlation(&[white(50, 3)], 2), Err(Error::InsufficientSamples(_))));
        let flat = Tensor::full([1, 1, 200, 200], 0.3);
        assert!(estimate_correlation(&[flat], 1).is_err());
    }

    #[test]
    fn mask_threshold_edges() {
        let map = CorrelationMap::new(1, vec![0.001; 9], vec![MIN_PAIRS; 9]).unwrap();
        let m = build_corr_mask(&map, 0.999).unwrap();
        assert_eq!(m.excluded_count(), 1);
        assert!(!m.bit(0, 0));
        let ones = CorrelationMap::new(1, vec![-1.0; 9], vec![MIN_PAIRS; 9]).unwrap();
        assert_eq!(build_corr_mask(&ones, 0.5).unwrap().excluded_count(), 9);
        assert!(build_corr_mask(&map, 0.0).is_err());
        assert!(build_corr_mask(&map, 1.0).is_err());
    }

    #[test]
    fn grid_text_roundtrip() {
        let m = CorrMask::from_fn(3, 0.05, |dy, dx| dy.abs() + dx.abs() <= 1 || (dy, dx) == (2, -3));
        assert_eq!(CorrMask::from_grid_text(&m.grid_text(), 0.05).unwrap(), m);
        assert!(CorrMask::from_grid_text("oo\noo\n", 0.05).is_err());
        assert!(CorrMask::from_grid_text("ooo\nozo\nooo\n", 0.05).is_err());
    }

    #[test]
    fn mask_is_symmetrized() {
        let mut rho = vec![0.0; 25];
        rho[grid_index(2, 1, 2).unwrap()] = 0.9;
        let map = CorrelationMap::new(2, rho, vec![MIN_PAIRS; 25]).unwrap();
        let m = build_corr_mask(&map, 0.5).unwrap();
        assert!(!m.bit(1, 2) && !m.bit(-1, -2));
        assert_eq!(m.excluded_count(), 3);
    }

    #[test]
    fn records_roundtrip() {
        let map = estimate_correlation(&[white(200, 4)], 2).unwrap();
        assert_eq!(CorrelationMap::from_record(&map.to_record()).unwrap().radius(), 2);
        let m = build_corr_mask(&map, 0.05).unwrap();
        assert_eq!(CorrMask::from_record(&m.to_record(), 0.05).unwrap(), m);
    }

    #[test]
    fn zero_sigma_is_identity_and_synthesis_is_seeded() {
        let clean = synth_clean(16, 1, 0);
        let spec = NoiseSynthSpec::new(0.0, NoiseKernel::Gauss3, 0.0, 9);
        assert_eq!(synth_correlated_noise(&clean, &spec).unwrap(), clean);
        let spec = NoiseSynthSpec::new(0.1, NoiseKernel::Gauss3, 0.2, 9);
        assert_eq!(synth_correlated_noise(&clean, &spec).unwrap(), synth_correlated_noise(&clean, &spec).unwrap());
    }

    #[test]
    fn delta_kernel_std_matches_sigma() {
        let sigma = 0.1;
        let spec = NoiseSynthSpec::new(sigma, NoiseKernel::Delta, 0.0, 5);
        let n = synth_correlated_noise(&Tensor::zeros([1, 1, 1000, 1000]), &spec).unwrap();
        let m = n.data().iter().map(|&v| v as f64).sum::<f64>() / 1e6;
        let var = n.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 1e6;
        assert!((var.sqrt() / sigma - 1.0).abs() < 0.02);
    }

    #[test]
    fn box_kernel_matches_autocorrelation() {
        // Box autocorrelation: (3 - |dy|)(3 - |dx|) / 9.
        let spec = NoiseSynthSpec::new(1.0, NoiseKernel::Box3, 0.0, 6);
        let n = synth_correlated_noise(&Tensor::zeros([4, 1, 512, 512]), &spec).unwrap();
        let map = estimate_correlation(&[n], 3).unwrap();
        for (dy, dx) in map.offsets() {
            let a = ((3 - dy.abs()).max(0) * (3 - dx.abs()).max(0)) as f64 / 9.0;
            assert!((map.rho(dy, dx) - a).abs() < 0.01, "({dy},{dx}) {} vs {a}", map.rho(dy, dx));
        }
    }

    #[test]
    fn clean_images_are_in_range_and_seeded() {
        let a = synth_clean(32, 3, 1);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, synth_clean(32, 3, 1));
        assert_ne!(a, synth_clean(32, 3, 2));
    }

    #[test]
    fn median_removes_isolated_spike() {
        let mut img = Tensor::full([1, 1, 9, 9], 0.5);
        img.set([0, 0, 4, 4], 1.0);
        let m = median_smooth(&img, 1);
        assert!(m.data().iter().all(|&v| v == 0.5));
    }
}
