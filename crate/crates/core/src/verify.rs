//! Empirical checks of the structural claims: blind-spot gradients,
//! receptive-field support, attention-statistic leakage, and a
//! finite-difference sweep over every operation family.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Fault, Graph, OpKind, Tap, TapSet, Var};
use crate::dtb::{attention_core, dtb_forward, dtb_param_specs, gated_ffn, AttentionOptions, DtbParams, DtbShape};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, grad_check_with, random_projection, GradCheck};
use crate::network::{BranchSelect, ForwardOptions, Mode, Model, NetworkConfig};
use crate::noise::CorrMask;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Probes keep this distance from every border; closer in, reflection
/// padding of non-divisible PD grids can route a pixel back to itself.
pub const BORDER_MARGIN: usize = 21;
/// Single-precision structural zero.
pub const STRUCTURAL_ZERO: f64 = 1e-6;
/// Leakage bound relative to the median off-center magnitude.
pub const LEAKAGE_RATIO: f64 = 1e-3;
/// Support threshold on normalized receptive-field maps.
pub const SUPPORT_EPS: f32 = 1e-8;

/// Uniform [0, 1) image batch from `seed`.
pub fn random_image(dims: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| rng.random::<f32>())
}

/// `count` distinct positions at least `margin` from every border.
pub fn interior_positions(h: usize, w: usize, margin: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if h < 2 * margin + 1 || w < 2 * margin + 1 {
        return Err(Error::invalid(format!("{h}x{w} has no positions {margin} px from the border")));
    }
    let avail = (h - 2 * margin) * (w - 2 * margin);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = BTreeSet::new();
    let mut out = Vec::new();
    while out.len() < count.min(avail) {
        let p = (rng.random_range(margin..h - margin), rng.random_range(margin..w - margin));
        if set.insert(p) {
            out.push(p);
        }
    }
    Ok(out)
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Blind-spot probe results.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub positions: Vec<(usize, usize)>,
    /// Per position: `max_c' |d sum_c y_c(p) / d x_c'(p)|`.
    pub center: Vec<f64>,
    /// Median over all nonzero off-center magnitudes of all probes.
    pub off_center_median: f64,
    pub max_center: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub detach_stats: bool,
    pub branches: BranchSelect,
}

/// Per-position input-gradient magnitudes `max_c' |dy(p)/dx_c'(q)|` for each probe.
fn gradient_maps(model: &Model, input: &Tensor, positions: &[(usize, usize)], opts: &ForwardOptions) -> Result<Vec<Vec<f64>>> {
    let [b, c, h, w] = input.dims();
    if b != 1 {
        return Err(Error::shape("probes take a single image"));
    }
    let mut g = Graph::<f32>::new();
    let bound = model.params.bind(&mut g, false);
    let x = g.param(input.clone());
    let y = model.forward(&mut g, &bound, x, opts)?;
    let out_dims = g.dims(y);
    let mut maps = Vec::with_capacity(positions.len());
    for &(py, px) in positions {
        let mut seed = Tensor::zeros(out_dims);
        for co in 0..out_dims[1] {
            seed.set([0, co, py, px], 1.0);
        }
        let grads = g.backward_with_seed(y, seed)?;
        let dx = grads.get_or_zeros(x, [b, c, h, w]);
        let mut m = vec![0.0f64; h * w];
        for ci in 0..c {
            for (o, &v) in m.iter_mut().zip(dx.plane(0, ci)) {
                *o = o.max(v.abs() as f64);
            }
        }
        maps.push(m);
    }
    Ok(maps)
}

/// Gradient of the summed output at each `p` with respect to the input at
/// `p`, in train mode.
pub fn blindspot_grad(model: &Model, input: &Tensor, positions: &[(usize, usize)], opts: &ForwardOptions, tolerance: f64) -> Result<ProbeReport> {
    if model.mode() != Mode::Train {
        return Err(Error::invalid("blindness is only claimed in train mode"));
    }
    let [_, _, h, w] = input.dims();
    for &(py, px) in positions {
        if py < BORDER_MARGIN || px < BORDER_MARGIN || py + BORDER_MARGIN >= h || px + BORDER_MARGIN >= w {
            return Err(Error::invalid(format!("probe ({py}, {px}) is within {BORDER_MARGIN} px of the border")));
        }
    }
    let maps = gradient_maps(model, input, positions, opts)?;
    let mut center = Vec::new();
    let mut off = Vec::new();
    for (&(py, px), m) in positions.iter().zip(&maps) {
        center.push(m[py * w + px]);
        off.extend(m.iter().enumerate().filter(|&(i, &v)| i != py * w + px && v > 0.0).map(|(_, &v)| v));
    }
    let max_center = center.iter().cloned().fold(0.0, f64::max);
    Ok(ProbeReport {
        positions: positions.to_vec(),
        center,
        off_center_median: median(off),
        max_center,
        tolerance,
        pass: max_center <= tolerance,
        detach_stats: opts.attention.detach_stats,
        branches: opts.branches,
    })
}

/// Copy of `model` whose local kernel also reads the center pixel, with a
/// nonzero center weight. Blindness must fail on it.
pub fn unmasked_center_model(model: &Model, seed: u64) -> Result<Model> {
    let mut m = model.clone();
    let spec = m.local_spec().with_center_enabled();
    let side = spec.lattice_side();
    let center = (side / 2) * side + side / 2;
    m.set_local_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = m.params.get_mut("local.dspmc.w")?;
    let per = side * side;
    for chunk in w.data_mut().chunks_mut(per) {
        chunk[center] = rng.random_range(0.25f32..0.75);
    }
    Ok(m)
}

/// `|dy(p)/dx(q)|` over all `q`, maxed over channels and scaled to [0, 1].
pub fn receptive_field_map(model: &Model, input: &Tensor, p: (usize, usize), opts: &ForwardOptions) -> Result<Tensor> {
    let [_, _, h, w] = input.dims();
    if p.0 >= h || p.1 >= w {
        return Err(Error::invalid(format!("position {p:?} outside {h}x{w}")));
    }
    let m = gradient_maps(model, input, &[p], opts)?.remove(0);
    let peak = m.iter().cloned().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    Tensor::new([1, 1, h, w], m.iter().map(|v| (v * scale) as f32).collect())
}

/// Positions where a normalized map exceeds [`SUPPORT_EPS`].
pub fn support(map: &Tensor) -> BTreeSet<(usize, usize)> {
    let [_, _, h, w] = map.dims();
    (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| map.at([0, 0, y, x]) > SUPPORT_EPS).collect()
}

pub fn save_heatmap(path: &Path, map: &Tensor) -> Result<()> {
    crate::image_io::save_image(path, map)
}

/// Input pixels the local branch can read for output `p` in train mode:
/// body taps walk the PD sub-grid (zero padded), sub positions map back to
/// full resolution with bottom/right reflection, and kernel taps read the
/// input with zero padding.
pub fn predicted_local_support(model: &Model, h: usize, w: usize, p: (usize, usize)) -> BTreeSet<(usize, usize)> {
    let cfg = &model.config;
    let s = cfg.pd_train;
    let (hs, ws) = (h.div_ceil(s), w.div_ceil(s));
    let d = cfg.local_conv_dilation as i64;
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let mut subs: BTreeSet<(i64, i64)> = BTreeSet::from([((p.0 / s) as i64, (p.1 / s) as i64)]);
    for _ in 0..cfg.local_layers {
        let mut next = BTreeSet::new();
        for &(y, x) in &subs {
            for ky in -1..=1 {
                for kx in -1..=1 {
                    let (ny, nx) = (y + ky * d, x + kx * d);
                    if ny >= 0 && nx >= 0 && ny < hs as i64 && nx < ws as i64 {
                        next.insert((ny, nx));
                    }
                }
            }
        }
        subs = next;
    }
    let (phy, phx) = (p.0 % s, p.1 % s);
    let taps = model.local_spec().effective_offsets();
    let mut out = BTreeSet::new();
    for (uy, ux) in subs {
        let fy = reflect(uy as usize * s + phy, h) as i64;
        let fx = reflect(ux as usize * s + phx, w) as i64;
        for &(dy, dx) in &taps {
            let (y, x) = (fy + dy as i64, fx + dx as i64);
            if y >= 0 && x >= 0 && y < h as i64 && x < w as i64 {
                out.insert((y as usize, x as usize));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeakageRow {
    pub height: usize,
    pub width: usize,
    /// Median center-gradient magnitude over the probes.
    pub leakage: f64,
    pub off_center_median: f64,
}

impl LeakageRow {
    pub fn area(&self) -> f64 {
        (self.height * self.width) as f64
    }

    pub fn ratio(&self) -> f64 {
        if self.off_center_median > 0.0 {
            self.leakage / self.off_center_median
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeakageTable {
    pub rows: Vec<LeakageRow>,
    /// Least-squares slope of log leakage against log area; `None` when
    /// some leakage is exactly zero and the logarithm is undefined.
    pub slope: Option<f64>,
}

impl LeakageTable {
    pub fn identically_zero(&self) -> bool {
        self.rows.iter().all(|r| r.leakage == 0.0)
    }
}

pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|&(a, l)| a <= 0.0 || l <= 0.0) {
        return None;
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

/// Probe margin at a given size: the border margin, or as close to it as
/// the image allows.
fn margin_for(h: usize, w: usize) -> usize {
    BORDER_MARGIN.min((h.min(w) - 1) / 2)
}

/// Full-model center-gradient leakage with live attention statistics.
pub fn leakage_scaling(model: &Model, sizes: &[(usize, usize)], probes: usize, seed: u64) -> Result<LeakageTable> {
    if sizes.len() < 2 {
        return Err(Error::invalid("leakage scaling needs at least two sizes"));
    }
    if model.mode() != Mode::Train {
        return Err(Error::invalid("leakage is measured in train mode"));
    }
    let opts = ForwardOptions { branches: BranchSelect::Full, attention: AttentionOptions { detach_stats: false, identity: false } };
    let mut rows = Vec::new();
    for (i, &(h, w)) in sizes.iter().enumerate() {
        let x = random_image([1, model.config.in_channels, h, w], seed.wrapping_add(i as u64));
        let pos = interior_positions(h, w, margin_for(h, w), probes, seed ^ 0x5eed)?;
        let maps = gradient_maps(model, &x, &pos, &opts)?;
        let mut center = Vec::new();
        let mut off = Vec::new();
        for (&(py, px), m) in pos.iter().zip(&maps) {
            center.push(m[py * w + px]);
            off.extend(m.iter().enumerate().filter(|&(j, &v)| j != py * w + px && v > 0.0).map(|(_, &v)| v));
        }
        rows.push(LeakageRow { height: h, width: w, leakage: median(center), off_center_median: median(off) });
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.area(), r.leakage)).collect();
    Ok(LeakageTable { slope: log_log_slope(&pts), rows })
}

/// Attention-statistic leakage of the model's block stack alone, at full
/// resolution on random features: the part of `dy(p)/dx(p)` that vanishes
/// when the attention map is detached.
pub fn attention_leakage_scaling(model: &Model, sizes: &[(usize, usize)], probes: usize, seed: u64) -> Result<LeakageTable> {
    if sizes.len() < 2 {
        return Err(Error::invalid("leakage scaling needs at least two sizes"));
    }
    let cfg = &model.config;
    let mut rows = Vec::new();
    for (i, &(h, w)) in sizes.iter().enumerate() {
        let x = random_image([1, cfg.width, h, w], seed.wrapping_add(i as u64));
        let pos = interior_positions(h, w, margin_for(h, w), probes, seed ^ 0x5eed)?;
        let center_grads = |detach: bool| -> Result<Vec<Vec<f32>>> {
            let mut g = Graph::<f32>::new();
            let b = model.params.bind(&mut g, false);
            let xv = g.param(x.clone());
            let mut y = xv;
            for k in 0..cfg.dtb_count {
                let p = DtbParams::from_bound(&b, &format!("global.dtb.{k}"), cfg.dtb_shape())?;
                y = dtb_forward(&mut g, &p, y, AttentionOptions { detach_stats: detach, identity: false })?;
            }
            let dims = g.dims(y);
            pos.iter()
                .map(|&(py, px)| {
                    let mut s = Tensor::zeros(dims);
                    for c in 0..dims[1] {
                        s.set([0, c, py, px], 1.0);
                    }
                    let gr = g.backward_with_seed(y, s)?.get_or_zeros(xv, x.dims());
                    Ok((0..cfg.width).map(|c| gr.at([0, c, py, px])).collect())
                })
                .collect()
        };
        let live = center_grads(false)?;
        let frozen = center_grads(true)?;
        let leak: Vec<f64> = live
            .iter()
            .zip(&frozen)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs() as f64).fold(0.0, f64::max))
            .collect();
        let live_mag: Vec<f64> = live.iter().map(|a| a.iter().map(|v| v.abs() as f64).fold(0.0, f64::max)).collect();
        rows.push(LeakageRow { height: h, width: w, leakage: median(leak), off_center_median: median(live_mag) });
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.area(), r.leakage)).collect();
    Ok(LeakageTable { slope: log_log_slope(&pts), rows })
}

/// Finite-difference results per operation family.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSuite {
    pub families: Vec<(String, GradCheck)>,
    /// Linear-only subgraph; should be exact up to rounding.
    pub linear: GradCheck,
    /// Check with a corrupted GELU backward rule; must fail.
    pub negative_control: GradCheck,
}

impl GradcheckSuite {
    pub fn worst(&self) -> f64 {
        self.families.iter().map(|f| f.1.max_rel_error).fold(0.0, f64::max)
    }
}

fn uniform(dims: [usize; 4], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(-scale..scale))
}

/// Names of `store`, in order, bound to `vars`.
fn bound_from(store: &ParamStore, vars: &[Var]) -> Bound {
    let mut b = Bound::default();
    for ((name, _), &v) in store.iter().zip(vars) {
        b.set(name, v);
    }
    b
}

fn tensors_of(store: &ParamStore) -> Vec<Tensor<f64>> {
    store.iter().map(|(_, t)| t.cast::<f64>()).collect()
}

/// Runs [`grad_check`] across every operation family at tiny sizes.
pub fn gradcheck_suite(seed: u64) -> Result<GradcheckSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const H: f64 = 1e-6;
    let mut fam = Vec::new();

    let masked = TapSet::new(1, vec![Tap::new(-1, -1), Tap::masked(0, 0), Tap::new(0, 1), Tap::new(1, 0), Tap::masked(1, 1)])?;
    let x = uniform([2, 2, 5, 6], &mut rng, 1.0);
    let wt = uniform([3, 2, 5, 1], &mut rng, 1.0);
    let bias = uniform([1, 3, 1, 1], &mut rng, 1.0);
    fam.push((
        "conv2d masked",
        grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), &masked, 1)?;
                let y = g.gelu(y)?;
                random_projection(g, y, 1)
            },
            &[x.clone(), wt, bias],
            H,
        )?,
    ));

    let dil = TapSet::grid(3, 2)?;
    let wt = uniform([2, 2, 9, 1], &mut rng, 1.0);
    fam.push((
        "conv2d dilated strided",
        grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, &dil, 2)?;
                let y = g.gelu(y)?;
                random_projection(g, y, 2)
            },
            &[x.clone(), wt],
            H,
        )?,
    ));

    let mut frac_taps = Vec::new();
    for (dy, dx) in [(-2, 0), (0, 2), (2, -2), (1, 1)] {
        let mut t = Tap::new(dy, dx);
        t.shift = [-0.6 * dy as f64, -0.6 * dx as f64 + 0.15];
        frac_taps.push(t);
    }
    let frac = TapSet::new(2, frac_taps)?;
    let wt = uniform([2, 2, 4, 1], &mut rng, 1.0);
    fam.push((
        "conv2d fractional",
        grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, &frac, 1)?;
                let y = g.gelu(y)?;
                random_projection(g, y, 3)
            },
            &[x.clone(), wt],
            H,
        )?,
    ));

    let dw = uniform([2, 1, 3, 3], &mut rng, 1.0);
    let db = uniform([1, 2, 1, 1], &mut rng, 1.0);
    fam.push((
        "depthwise",
        grad_check(
            |g, v| {
                let y = g.depthwise_conv2d(v[0], v[1], Some(v[2]), 3, 2)?;
                let y = g.gelu(y)?;
                random_projection(g, y, 4)
            },
            &[x.clone(), dw, db],
            H,
        )?,
    ));

    let xp = uniform([1, 2, 7, 8], &mut rng, 1.0);
    fam.push((
        "pixel shuffle downsampling",
        grad_check(
            |g, v| {
                let (d, geom) = g.pd_down(v[0], 3)?;
                let d = g.gelu(d)?;
                let u = g.pd_up(d, &geom)?;
                random_projection(g, u, 5)
            },
            &[xp],
            H,
        )?,
    ));

    let x3 = uniform([2, 3, 3, 4], &mut rng, 1.0);
    let g3 = uniform([1, 3, 1, 1], &mut rng, 1.0);
    let b3 = uniform([1, 3, 1, 1], &mut rng, 1.0);
    fam.push((
        "layer norm",
        grad_check(
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                random_projection(g, y, 6)
            },
            &[x3.clone(), g3, b3],
            H,
        )?,
    ));

    fam.push((
        "softmax",
        grad_check(
            |g, v| {
                let a = g.softmax(v[0], 3)?;
                let b = g.softmax(v[0], 1)?;
                let s = g.add(a, b)?;
                random_projection(g, s, 7)
            },
            &[x3.clone()],
            H,
        )?,
    ));

    let q = uniform([2, 3, 2, 3], &mut rng, 1.0);
    let k = uniform([2, 3, 2, 3], &mut rng, 1.0);
    let vv = uniform([2, 3, 2, 3], &mut rng, 1.0);
    fam.push((
        "attention",
        grad_check(
            |g, v| {
                let r = g.constant(Tensor::zeros(g.dims(v[2])));
                let y = attention_core(g, v[0], v[1], v[2], r, AttentionOptions::default())?;
                random_projection(g, y, 8)
            },
            &[q, k, vv],
            H,
        )?,
    ));

    let shape = DtbShape { channels: 2, expansion: 2, dilation: 2 };
    let store = ParamStore::init(&dtb_param_specs("b", &shape), seed ^ 11)?;
    let xb = uniform([1, 2, 5, 5], &mut rng, 1.0);
    let mut point = vec![xb];
    point.extend(tensors_of(&store));
    fam.push((
        "gated feed-forward",
        grad_check(
            |g, v| {
                let p = DtbParams::from_bound(&bound_from(&store, &v[1..]), "b", shape)?;
                let y = gated_ffn(g, &p, v[0])?;
                random_projection(g, y, 9)
            },
            &point,
            H,
        )?,
    ));
    fam.push((
        "transformer block",
        grad_check(
            |g, v| {
                let p = DtbParams::from_bound(&bound_from(&store, &v[1..]), "b", shape)?;
                let y = dtb_forward(g, &p, v[0], AttentionOptions::default())?;
                random_projection(g, y, 10)
            },
            &point,
            H,
        )?,
    ));

    let cfg = NetworkConfig { width: 2, local_layers: 1, dtb_count: 1, expansion: 1, ..NetworkConfig::default() };
    let mask = CorrMask::from_fn(10, 0.05, |dy, dx| dy.abs() <= 1 && dx.abs() <= 1);
    let model = Model::build(cfg.clone(), &mask, seed ^ 12)?;
    let xn = uniform([1, 3, 11, 12], &mut rng, 1.0);
    let mut point = vec![xn];
    point.extend(tensors_of(&model.params));
    fam.push((
        "network",
        grad_check(
            |g, v| {
                let b = bound_from(&model.params, &v[1..]);
                let y = model.forward(g, &b, v[0], &ForwardOptions::default())?;
                random_projection(g, y, 11)
            },
            &point,
            H,
        )?,
    ));

    // Linear-only: masked conv, PD, concat, scale and add.
    let wl = uniform([2, 2, 5, 1], &mut rng, 1.0);
    let linear = grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, &masked, 1)?;
            let (d, geom) = g.pd_down(y, 2)?;
            let d = g.scale(d, 0.5)?;
            let u = g.pd_up(d, &geom)?;
            let c = g.concat(&[u, v[0]])?;
            let s = g.add(c, c)?;
            random_projection(g, s, 12)
        },
        &[x.clone(), wl],
        1e-3,
    )?;

    let negative_control = grad_check_with(
        |g, v| {
            let y = g.gelu(v[0])?;
            random_projection(g, y, 13)
        },
        &[x],
        H,
        Some(Fault { kind: OpKind::Gelu, scale: 1.1 }),
    )?;

    Ok(GradcheckSuite {
        families: fam.into_iter().map(|(n, r)| (n.to_string(), r)).collect(),
        linear,
        negative_control,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let cfg = NetworkConfig { width: 4, local_layers: 1, dtb_count: 1, ..NetworkConfig::default() };
        let mask = CorrMask::from_fn(10, 0.05, |dy, dx| dy.abs() <= 2 && dx.abs() <= 2 && (dy.abs(), dx.abs()) != (2, 2));
        Model::build(cfg, &mask, 7).unwrap()
    }

    #[test]
    fn positions_respect_margin_and_are_distinct() {
        let p = interior_positions(50, 48, 21, 20, 1).unwrap();
        assert_eq!(p.len(), 20);
        assert!(p.iter().all(|&(y, x)| (21..29).contains(&y) && (21..27).contains(&x)));
        assert_eq!(p.iter().collect::<BTreeSet<_>>().len(), 20);
        assert_eq!(interior_positions(43, 43, 21, 5, 1).unwrap(), vec![(21, 21)]);
        assert!(interior_positions(42, 60, 21, 5, 1).is_err());
    }

    #[test]
    fn local_branch_is_blind_and_control_is_not() {
        let m = model();
        let x = random_image([1, 3, 48, 48], 3);
        let pos = interior_positions(48, 48, 21, 4, 2).unwrap();
        let opts = ForwardOptions { branches: BranchSelect::LocalOnly, ..Default::default() };
        let r = blindspot_grad(&m, &x, &pos, &opts, STRUCTURAL_ZERO).unwrap();
        assert!(r.pass && r.max_center == 0.0, "{r:?}");
        assert!(r.off_center_median > 0.0);
        let bad = unmasked_center_model(&m, 1).unwrap();
        let r = blindspot_grad(&bad, &x, &pos, &opts, STRUCTURAL_ZERO).unwrap();
        // At width 4 magnitudes are small; compare against the off-center scale.
        assert!(!r.pass && r.center.iter().all(|&c| c > r.off_center_median), "{r:?}");
    }

    #[test]
    fn probe_preconditions() {
        let mut m = model();
        let x = random_image([1, 3, 48, 48], 3);
        assert!(blindspot_grad(&m, &x, &[(5, 24)], &ForwardOptions::default(), 1e-6).is_err());
        m.set_mode(Mode::Test);
        assert!(blindspot_grad(&m, &x, &[(24, 24)], &ForwardOptions::default(), 1e-6).is_err());
    }

    #[test]
    fn receptive_field_is_normalized_with_blind_center() {
        // Wide enough that no kernel position has every ReLU channel dead.
        let cfg = NetworkConfig { width: 16, local_layers: 1, dtb_count: 1, ..NetworkConfig::default() };
        let mask = CorrMask::from_fn(10, 0.05, |dy, dx| dy.abs() <= 1 && dx.abs() <= 1);
        let m = Model::build(cfg, &mask, 7).unwrap();
        let x = random_image([1, 3, 30, 30], 4);
        let opts = ForwardOptions { branches: BranchSelect::LocalOnly, ..Default::default() };
        let map = receptive_field_map(&m, &x, (15, 15), &opts).unwrap();
        assert_eq!(map.at([0, 0, 15, 15]), 0.0);
        assert_eq!(map.max_abs(), 1.0);
        assert_eq!(support(&map), predicted_local_support(&m, 30, 30, (15, 15)));
    }

    #[test]
    fn slope_fit() {
        let pts = [(100.0, 1.0), (400.0, 0.25), (1600.0, 0.0625)];
        assert!((log_log_slope(&pts).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(log_log_slope(&[(1.0, 0.0), (2.0, 1.0)]), None);
        assert_eq!(log_log_slope(&[(1.0, 1.0)]), None);
    }

    #[test]
    fn median_values() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(vec![]), 0.0);
    }

    #[test]
    fn gradcheck_suite_tiers() {
        let s = gradcheck_suite(1).unwrap();
        for (name, r) in &s.families {
            assert!(r.max_rel_error < 1e-5, "{name}: {r:?}");
        }
        assert!(s.linear.max_rel_error < 1e-10, "{:?}", s.linear);
        assert!(s.negative_control.max_rel_error > 1e-2, "{:?}", s.negative_control);
        assert_eq!(s.families.len(), 11);
    }
}
