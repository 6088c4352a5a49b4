//! Blind-spot kernel construction: masked dense-sampling kernels, the
//! lattice analysis that keeps the center unreachable through downstream
//! layers, and the test-time kernel shift.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::autodiff::{Tap, TapSet};
use crate::error::{Error, Result};
use crate::noise::CorrMask;

/// Spatial-mixing layers that follow a masked kernel, on a grid subsampled
/// by `stride`. Each `(dilation, count)` entry stands for `count` stacked
/// 3x3 layers at that dilation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DownstreamLattice {
    pub stride: usize,
    pub layers: Vec<(usize, usize)>,
}

impl DownstreamLattice {
    pub fn new(stride: usize, layers: Vec<(usize, usize)>) -> Result<Self> {
        if stride < 1 || layers.iter().any(|&(d, _)| d < 1) {
            return Err(Error::invalid("downstream stride and dilations must be >= 1"));
        }
        Ok(DownstreamLattice { stride, layers })
    }

    /// No spatial mixing after the kernel.
    pub fn none() -> Self {
        DownstreamLattice { stride: 1, layers: Vec::new() }
    }

    /// Every displacement `sum_i s * d_i * k_i`, `k_i` in {-1, 0, 1}^2.
    pub fn reach(&self) -> BTreeSet<(i32, i32)> {
        let mut set = BTreeSet::from([(0, 0)]);
        for &(d, count) in &self.layers {
            let step = (self.stride * d) as i32;
            for _ in 0..count {
                let mut next = BTreeSet::new();
                for &(y, x) in &set {
                    for ky in -1..=1 {
                        for kx in -1..=1 {
                            next.insert((y + ky * step, x + kx * step));
                        }
                    }
                }
                set = next;
            }
        }
        set
    }
}

/// Safety bits over a `footprint x footprint` window at unit spacing:
/// `false` where `-δ` is a downstream displacement (the center would
/// re-enter the output through that tap). The center itself is left to the
/// correlation mask. Only offsets on the `dilation` lattice are analysed.
pub fn lattice_safety_mask(footprint: usize, dilation: usize, downstream: &DownstreamLattice) -> Vec<bool> {
    let r = (footprint / 2) as i32;
    let n = footprint;
    let reach = downstream.reach();
    let d = dilation.max(1) as i32;
    let mut bits = vec![true; n * n];
    for dy in -r..=r {
        for dx in -r..=r {
            let on_lattice = dy % d == 0 && dx % d == 0;
            if on_lattice && (dy, dx) != (0, 0) && reach.contains(&(-dy, -dx)) {
                bits[((dy + r) as usize) * n + (dx + r) as usize] = false;
            }
        }
    }
    bits
}

/// State of one cell of a kernel footprint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapState {
    Effective,
    CorrMasked,
    SafetyMasked,
    OffLattice,
}

impl TapState {
    pub fn symbol(self) -> char {
        match self {
            TapState::Effective => 'o',
            TapState::CorrMasked => 'x',
            TapState::SafetyMasked => 's',
            TapState::OffLattice => '.',
        }
    }
}

/// Densely-sampled patch-masked kernel: a `footprint`-wide window sampled
/// every `dilation` pixels, minus correlated and lattice-unsafe offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct DspmcKernelSpec {
    footprint: usize,
    dilation: usize,
    cells: Vec<TapState>,
    shift_ratio: f64,
}

/// Builds the kernel spec; fails if no effective tap remains.
pub fn make_dspmc_spec(footprint: usize, dilation: usize, corr_mask: &CorrMask, downstream: &DownstreamLattice) -> Result<DspmcKernelSpec> {
    if footprint % 2 == 0 {
        return Err(Error::invalid(format!("footprint {footprint} must be odd")));
    }
    if dilation < 1 || (footprint / 2) % dilation != 0 {
        return Err(Error::invalid(format!("dilation {dilation} must divide the footprint radius {}", footprint / 2)));
    }
    if corr_mask.radius() < footprint / 2 {
        return Err(Error::invalid(format!("correlation mask radius {} below footprint radius {}", corr_mask.radius(), footprint / 2)));
    }
    let r = (footprint / 2) as i32;
    let d = dilation as i32;
    let safety = lattice_safety_mask(footprint, dilation, downstream);
    let mut cells = Vec::with_capacity(footprint * footprint);
    for dy in -r..=r {
        for dx in -r..=r {
            let i = ((dy + r) as usize) * footprint + (dx + r) as usize;
            cells.push(if dy % d != 0 || dx % d != 0 {
                TapState::OffLattice
            } else if !corr_mask.bit(dy, dx) || (dy, dx) == (0, 0) {
                TapState::CorrMasked
            } else if !safety[i] {
                TapState::SafetyMasked
            } else {
                TapState::Effective
            });
        }
    }
    let spec = DspmcKernelSpec { footprint, dilation, cells, shift_ratio: 0.0 };
    if spec.effective_count() == 0 {
        return Err(Error::EmptyKernel(format!("{footprint}x{footprint} kernel at dilation {dilation} has no usable tap")));
    }
    Ok(spec)
}

/// Returns a copy whose taps read at `(1 + ratio) * p`.
pub fn apply_kernel_shift(spec: &DspmcKernelSpec, ratio: f64) -> Result<DspmcKernelSpec> {
    if !(ratio > -1.0 && ratio <= 0.0) {
        return Err(Error::invalid(format!("shift ratio {ratio} outside (-1, 0]")));
    }
    Ok(DspmcKernelSpec { shift_ratio: ratio, ..spec.clone() })
}

impl DspmcKernelSpec {
    pub fn footprint(&self) -> usize {
        self.footprint
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn shift_ratio(&self) -> f64 {
        self.shift_ratio
    }

    /// Sample points per axis; weights hold `lattice_side^2` taps.
    pub fn lattice_side(&self) -> usize {
        (self.footprint / 2 / self.dilation) * 2 + 1
    }

    pub fn state(&self, dy: i32, dx: i32) -> TapState {
        let r = (self.footprint / 2) as i32;
        if dy.abs() > r || dx.abs() > r {
            return TapState::OffLattice;
        }
        self.cells[((dy + r) as usize) * self.footprint + (dx + r) as usize]
    }

    pub fn effective_count(&self) -> usize {
        self.cells.iter().filter(|c| **c == TapState::Effective).count()
    }

    /// Lattice offsets in weight order (row-major over the sampling lattice).
    pub fn lattice_offsets(&self) -> Vec<(i32, i32)> {
        let r = (self.footprint / 2 / self.dilation) as i32;
        let d = self.dilation as i32;
        (-r..=r).flat_map(|y| (-r..=r).map(move |x| (y * d, x * d))).collect()
    }

    /// Offsets of the effective taps.
    pub fn effective_offsets(&self) -> Vec<(i32, i32)> {
        self.lattice_offsets().into_iter().filter(|&(y, x)| self.state(y, x) == TapState::Effective).collect()
    }

    /// Convolution taps: one per lattice point, enabled iff effective, each
    /// shifted by `ratio * p`.
    pub fn taps(&self) -> TapSet {
        let ratio = self.shift_ratio;
        let taps = self
            .lattice_offsets()
            .into_iter()
            .map(|(y, x)| {
                let mut t = if self.state(y, x) == TapState::Effective { Tap::new(y, x) } else { Tap::masked(y, x) };
                if ratio != 0.0 {
                    t.shift = [ratio * y as f64, ratio * x as f64];
                }
                t
            })
            .collect();
        TapSet::new(self.footprint / 2, taps).expect("lattice lies inside the footprint")
    }

    /// Weight-slot mask in lattice order: `true` for effective taps.
    pub fn weight_mask(&self) -> Vec<bool> {
        self.lattice_offsets().into_iter().map(|(y, x)| self.state(y, x) == TapState::Effective).collect()
    }

    /// Turns the center into an effective tap. Breaks blindness; negative
    /// controls only.
    pub fn with_center_enabled(&self) -> Self {
        let mut s = self.clone();
        let r = self.footprint / 2;
        s.cells[r * self.footprint + r] = TapState::Effective;
        s
    }

    /// Plain-text block: header lines then one grid row per dy.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "footprint {}", self.footprint);
        let _ = writeln!(s, "dilation {}", self.dilation);
        let _ = writeln!(s, "ratio {}", self.shift_ratio);
        for row in self.cells.chunks(self.footprint) {
            s.extend(row.iter().map(|c| c.symbol()));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| Error::Format(format!("missing '{key}' line")))?;
            line.strip_prefix(key)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| Error::Format(format!("expected '{key}', got '{line}'")))
        };
        let parse_err = |e: &dyn std::fmt::Display| Error::Format(e.to_string());
        let footprint: usize = header("footprint")?.parse().map_err(|e| parse_err(&e))?;
        let dilation: usize = header("dilation")?.parse().map_err(|e| parse_err(&e))?;
        let shift_ratio: f64 = header("ratio")?.parse().map_err(|e| parse_err(&e))?;
        let mut cells = Vec::with_capacity(footprint * footprint);
        for line in lines.by_ref().take(footprint) {
            for ch in line.trim().chars() {
                cells.push(match ch {
                    'o' => TapState::Effective,
                    'x' => TapState::CorrMasked,
                    's' => TapState::SafetyMasked,
                    '.' => TapState::OffLattice,
                    _ => return Err(Error::Format(format!("unknown kernel cell '{ch}'"))),
                });
            }
        }
        if footprint % 2 == 0 || dilation == 0 || cells.len() != footprint * footprint {
            return Err(Error::Format("malformed kernel grid".into()));
        }
        Ok(DspmcKernelSpec { footprint, dilation, cells, shift_ratio })
    }
}
