//! Two-branch blind-patch network: a local branch (masked 9x9 kernel, PD,
//! dilated convolutions) and a global branch (masked 21x21 lattice kernel,
//! PD, dilated Transformer blocks), fused by 1x1 layers before inverse PD.

use crate::autodiff::{Graph, TapSet, Var};
use crate::bsn::{apply_kernel_shift, make_dspmc_spec, DownstreamLattice, DspmcKernelSpec};
use crate::dtb::{dtb_forward, dtb_param_specs, AttentionOptions, DtbParams, DtbShape};
use crate::error::{Error, Result};
use crate::noise::CorrMask;
use crate::params::{Bound, Init, ParamSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub local_footprint: usize,
    pub local_dilation: usize,
    pub local_layers: usize,
    pub local_conv_dilation: usize,
    pub global_footprint: usize,
    pub global_dilation: usize,
    pub dtb_count: usize,
    pub dtb_dilation: usize,
    pub expansion: usize,
    pub pd_train: usize,
    pub pd_test: usize,
    pub shift_ratio: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 3,
            out_channels: 3,
            width: 48,
            local_footprint: 9,
            local_dilation: 1,
            local_layers: 3,
            local_conv_dilation: 2,
            global_footprint: 21,
            global_dilation: 2,
            dtb_count: 4,
            dtb_dilation: 2,
            expansion: 2,
            pd_train: 5,
            pd_test: 2,
            shift_ratio: -0.6,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.in_channels == 0 || self.out_channels == 0 || self.width == 0 || self.expansion == 0 {
            return bad("channel counts and expansion must be positive");
        }
        if self.local_footprint % 2 == 0 || self.global_footprint % 2 == 0 {
            return bad("kernel footprints must be odd");
        }
        if self.pd_train == 0 || self.pd_test == 0 {
            return bad("pd strides must be >= 1");
        }
        if self.local_dilation == 0 || self.global_dilation == 0 || self.local_conv_dilation == 0 || self.dtb_dilation == 0 {
            return bad("dilations must be >= 1");
        }
        if !(self.shift_ratio > -1.0 && self.shift_ratio <= 0.0) {
            return bad("shift ratio must lie in (-1, 0]");
        }
        Ok(())
    }

    /// Layers after the local kernel that mix positions.
    pub fn local_downstream(&self) -> DownstreamLattice {
        DownstreamLattice { stride: self.pd_train, layers: vec![(self.local_conv_dilation, self.local_layers)] }
    }

    /// Each block mixes positions twice in series: the value projection
    /// and the feed-forward depthwise layer. Query and key only feed the
    /// attention statistic.
    pub fn global_downstream(&self) -> DownstreamLattice {
        DownstreamLattice { stride: self.pd_train, layers: vec![(self.dtb_dilation, 2 * self.dtb_count)] }
    }

    pub fn dtb_shape(&self) -> DtbShape {
        DtbShape { channels: self.width, expansion: self.expansion, dilation: self.dtb_dilation }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

/// Which branches feed the fusion head; a deselected branch contributes zeros.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BranchSelect {
    #[default]
    Full,
    LocalOnly,
    GlobalOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub branches: BranchSelect,
    pub attention: AttentionOptions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ParamStore,
    local_spec: DspmcKernelSpec,
    global_spec: DspmcKernelSpec,
    mode: Mode,
}

fn kernel_specs(name: &str, spec: &DspmcKernelSpec, c_in: usize, c_out: usize) -> Vec<ParamSpec> {
    let side = spec.lattice_side();
    let fan = c_in * spec.effective_count();
    vec![
        ParamSpec::new(format!("{name}.w"), [c_out, c_in, side, side], Init::MaskedFanIn(fan, spec.weight_mask())),
        ParamSpec::new(format!("{name}.b"), [1, c_out, 1, 1], Init::FanIn(fan)),
    ]
}

fn pointwise_specs(name: &str, c_in: usize, c_out: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{name}.w"), [c_out, c_in, 1, 1], Init::FanIn(c_in)),
        ParamSpec::new(format!("{name}.b"), [1, c_out, 1, 1], Init::FanIn(c_in)),
    ]
}

/// Full parameter inventory, in initialization order.
pub fn param_specs(cfg: &NetworkConfig, local: &DspmcKernelSpec, global: &DspmcKernelSpec) -> Vec<ParamSpec> {
    let c = cfg.width;
    let mut v = kernel_specs("local.dspmc", local, cfg.in_channels, c);
    for i in 0..cfg.local_layers {
        v.push(ParamSpec::new(format!("local.body.{i}.w"), [c, c, 3, 3], Init::FanIn(9 * c)));
        v.push(ParamSpec::new(format!("local.body.{i}.b"), [1, c, 1, 1], Init::FanIn(9 * c)));
    }
    v.extend(kernel_specs("global.dspmc", global, cfg.in_channels, c));
    for i in 0..cfg.dtb_count {
        v.extend(dtb_param_specs(&format!("global.dtb.{i}"), &cfg.dtb_shape()));
    }
    v.extend(pointwise_specs("fusion.0", 2 * c, 2 * c));
    v.extend(pointwise_specs("fusion.1", 2 * c, 2 * c));
    v.extend(pointwise_specs("fusion.out", 2 * c, cfg.out_channels));
    v
}

impl Model {
    /// Builds kernel specs against the declared downstream stacks and
    /// initializes parameters from `seed`.
    pub fn build(config: NetworkConfig, corr_mask: &CorrMask, seed: u64) -> Result<Self> {
        Self::build_with_masks(config, corr_mask, corr_mask, seed)
    }

    /// As [`Model::build`] with a separate mask per branch (ablations).
    pub fn build_with_masks(config: NetworkConfig, local_mask: &CorrMask, global_mask: &CorrMask, seed: u64) -> Result<Self> {
        config.validate()?;
        for (mask, footprint) in [(local_mask, config.local_footprint), (global_mask, config.global_footprint)] {
            if mask.radius() < footprint / 2 {
                return Err(Error::Config(format!("correlation mask radius {} below required {}", mask.radius(), footprint / 2)));
            }
        }
        let local_spec = make_dspmc_spec(config.local_footprint, config.local_dilation, local_mask, &config.local_downstream())?;
        let global_spec = make_dspmc_spec(config.global_footprint, config.global_dilation, global_mask, &config.global_downstream())?;
        let params = ParamStore::init(&param_specs(&config, &local_spec, &global_spec), seed)?;
        Ok(Model { config, params, local_spec, global_spec, mode: Mode::Train })
    }

    /// Reassembles a model from stored parts, checking parameter shapes.
    pub fn from_parts(config: NetworkConfig, local_spec: DspmcKernelSpec, global_spec: DspmcKernelSpec, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config, &local_spec, &global_spec);
        if specs.len() != params.len() {
            return Err(Error::Format(format!("expected {} parameters, found {}", specs.len(), params.len())));
        }
        for s in &specs {
            let t = params.get(&s.name)?;
            if t.dims() != s.dims {
                return Err(Error::Format(format!("parameter '{}' has dims {:?}, expected {:?}", s.name, t.dims(), s.dims)));
            }
        }
        Ok(Model { config, params, local_spec, global_spec, mode: Mode::Train })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn local_spec(&self) -> &DspmcKernelSpec {
        &self.local_spec
    }

    pub fn global_spec(&self) -> &DspmcKernelSpec {
        &self.global_spec
    }

    /// Replaces the local kernel spec (negative controls). Weight dims are
    /// unchanged since the sampling lattice is.
    pub fn set_local_spec(&mut self, spec: DspmcKernelSpec) -> Result<()> {
        if spec.lattice_side() != self.local_spec.lattice_side() {
            return Err(Error::invalid("replacement spec must keep the sampling lattice"));
        }
        self.local_spec = spec;
        Ok(())
    }

    pub fn stride(&self) -> usize {
        match self.mode {
            Mode::Train => self.config.pd_train,
            Mode::Test => self.config.pd_test,
        }
    }

    pub fn shift_ratio(&self) -> f64 {
        match self.mode {
            Mode::Train => 0.0,
            Mode::Test => self.config.shift_ratio,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn taps(&self, spec: &DspmcKernelSpec) -> Result<TapSet> {
        Ok(apply_kernel_shift(spec, self.shift_ratio())?.taps())
    }

    /// Denoised prediction for `x` (B, in_channels, H, W).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var, opts: &ForwardOptions) -> Result<Var> {
        let [_, c_in, _, _] = g.dims(x);
        if c_in != self.config.in_channels {
            return Err(Error::shape(format!("model expects {} input channels, got {c_in}", self.config.in_channels)));
        }
        let s = self.stride();
        let local = if opts.branches != BranchSelect::GlobalOnly { Some(self.local_branch(g, b, x, s)?) } else { None };
        let global = if opts.branches != BranchSelect::LocalOnly { Some(self.global_branch(g, b, x, s, opts.attention)?) } else { None };
        let (l, gl, geom) = match (local, global) {
            (Some((l, geom)), Some((gl, _))) => (l, gl, geom),
            (Some((l, geom)), None) => {
                let z = g.constant(Tensor::zeros(g.dims(l)));
                (l, z, geom)
            }
            (None, Some((gl, geom))) => {
                let z = g.constant(Tensor::zeros(g.dims(gl)));
                (z, gl, geom)
            }
            (None, None) => unreachable!("at least one branch is selected"),
        };
        let cat = g.concat(&[l, gl])?;
        let pw = TapSet::pointwise();
        let mut h = cat;
        for name in ["fusion.0", "fusion.1"] {
            h = g.conv2d(h, b.get(&format!("{name}.w"))?, Some(b.get(&format!("{name}.b"))?), &pw, 1)?;
            h = g.relu(h)?;
        }
        let out = g.conv2d(h, b.get("fusion.out.w")?, Some(b.get("fusion.out.b")?), &pw, 1)?;
        g.pd_up(out, &geom)
    }

    fn local_branch<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var, s: usize) -> Result<(Var, crate::autodiff::PdGeometry)> {
        let taps = self.taps(&self.local_spec)?;
        let f = g.conv2d(x, b.get("local.dspmc.w")?, Some(b.get("local.dspmc.b")?), &taps, 1)?;
        let f = g.relu(f)?;
        let (mut h, geom) = g.pd_down(f, s)?;
        let body = TapSet::grid(3, self.config.local_conv_dilation)?;
        for i in 0..self.config.local_layers {
            h = g.conv2d(h, b.get(&format!("local.body.{i}.w"))?, Some(b.get(&format!("local.body.{i}.b"))?), &body, 1)?;
            h = g.relu(h)?;
        }
        Ok((h, geom))
    }

    fn global_branch<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var, s: usize, att: AttentionOptions) -> Result<(Var, crate::autodiff::PdGeometry)> {
        let taps = self.taps(&self.global_spec)?;
        let f = g.conv2d(x, b.get("global.dspmc.w")?, Some(b.get("global.dspmc.b")?), &taps, 1)?;
        let (mut h, geom) = g.pd_down(f, s)?;
        for i in 0..self.config.dtb_count {
            let p = DtbParams::from_bound(b, &format!("global.dtb.{i}"), self.config.dtb_shape())?;
            h = dtb_forward(g, &p, h, att)?;
        }
        Ok((h, geom))
    }

    /// Forward pass without gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let b = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &b, xv, &ForwardOptions::default())?;
        Ok(g.value(y).clone())
    }

    /// Multiply-accumulate count of one forward pass on a (1, C, h, w)
    /// input in the current mode; a rough analytic estimate.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let c = self.config.width as u64;
        let cin = self.config.in_channels as u64;
        let s = self.stride();
        let full = (h * w) as u64;
        let sub = ((h.div_ceil(s) * s) * (w.div_ceil(s) * s)) as u64;
        let e = self.config.expansion as u64 * c;
        let local = full * cin * c * self.local_spec.effective_count() as u64 + sub * 9 * c * c * self.config.local_layers as u64;
        let dtb = sub * (3 * (c * c + 9 * c) + 2 * (c * e + 9 * e) + e * c) + 2 * c * c * sub;
        let global = full * cin * c * self.global_spec.effective_count() as u64 + dtb * self.config.dtb_count as u64;
        let fusion = sub * (8 * c * c + 2 * c * self.config.out_channels as u64);
        local + global + fusion
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> NetworkConfig {
        NetworkConfig { width: 4, local_layers: 1, dtb_count: 1, ..NetworkConfig::default() }
    }

    fn mask() -> CorrMask {
        CorrMask::from_fn(10, 0.05, |dy, dx| dy.abs() <= 1 && dx.abs() <= 1)
    }

    fn input(h: usize, w: usize) -> Tensor {
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| ((c * 31 + y * 7 + x * 13) % 17) as f32 / 17.0)
    }

    #[test]
    fn default_config_builds_in_param_bracket() {
        let m = Model::build(NetworkConfig::default(), &mask(), 0).unwrap();
        let n = m.param_count();
        assert!((200_000..=900_000).contains(&n), "{n}");
        assert!(m.local_spec().effective_count() > 8 && m.global_spec().effective_count() > 8);
    }

    #[test]
    fn doubling_width_roughly_quadruples_params() {
        let a = Model::build(NetworkConfig::default(), &mask(), 0).unwrap().param_count() as f64;
        let cfg = NetworkConfig { width: 96, ..NetworkConfig::default() };
        let b = Model::build(cfg, &mask(), 0).unwrap().param_count() as f64;
        assert!((3.5..=4.5).contains(&(b / a)), "{}", b / a);
    }

    #[test]
    fn single_pointwise_conv_count() {
        let specs = pointwise_specs("p", 3, 3);
        let p = ParamStore::init(&specs, 0).unwrap();
        assert_eq!(p.count(), 12);
    }

    #[test]
    fn seeded_builds_identical() {
        let a = Model::build(tiny_config(), &mask(), 7).unwrap();
        assert_eq!(a, Model::build(tiny_config(), &mask(), 7).unwrap());
        assert_ne!(a.params.checksum(), Model::build(tiny_config(), &mask(), 8).unwrap().params.checksum());
    }

    #[test]
    fn masked_kernel_weights_start_at_zero() {
        let m = Model::build(tiny_config(), &mask(), 1).unwrap();
        let w = m.params.get("local.dspmc.w").unwrap();
        let wm = m.local_spec().weight_mask();
        for (i, v) in w.data().iter().enumerate() {
            if !wm[i % wm.len()] {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn output_dims_match_input() {
        let mut m = Model::build(tiny_config(), &mask(), 2).unwrap();
        assert_eq!(m.predict(&input(40, 40)).unwrap().dims(), [1, 3, 40, 40]);
        assert_eq!(m.predict(&input(23, 31)).unwrap().dims(), [1, 3, 23, 31]);
        m.set_mode(Mode::Test);
        assert_eq!(m.predict(&input(40, 40)).unwrap().dims(), [1, 3, 40, 40]);
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut m = Model::build(tiny_config(), &mask(), 3).unwrap();
        for (k, t) in m.params.iter_mut() {
            if !k.contains(".ln") {
                t.data_mut().fill(0.0);
            }
        }
        assert!(m.predict(&input(20, 20)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mode_roundtrip_preserves_outputs_and_params() {
        let mut m = Model::build(tiny_config(), &mask(), 4).unwrap();
        let x = input(30, 30);
        let before = m.predict(&x).unwrap();
        let sum = m.params.checksum();
        m.set_mode(Mode::Test);
        let test = m.predict(&x).unwrap();
        assert_ne!(test, before);
        m.set_mode(Mode::Train);
        assert_eq!(m.predict(&x).unwrap(), before);
        assert_eq!(m.params.checksum(), sum);
    }

    #[test]
    fn zero_shift_test_mode_is_stride_change_only() {
        let cfg = NetworkConfig { shift_ratio: 0.0, pd_test: 5, ..tiny_config() };
        let mut m = Model::build(cfg, &mask(), 5).unwrap();
        let x = input(30, 30);
        let train = m.predict(&x).unwrap();
        m.set_mode(Mode::Test);
        assert_eq!(m.predict(&x).unwrap(), train);
    }

    #[test]
    fn invalid_configs_rejected() {
        let even = NetworkConfig { local_footprint: 8, ..tiny_config() };
        assert!(Model::build(even, &mask(), 0).is_err());
        assert!(Model::build(tiny_config(), &CorrMask::center_only(4), 0).is_err());
        let shift = NetworkConfig { shift_ratio: 0.3, ..tiny_config() };
        assert!(Model::build(shift, &mask(), 0).is_err());
    }
}
