//! Blind-spot self-supervised training: L1 against the noisy input, Adam,
//! seeded epoch shuffling, periodic evaluation and checkpoints.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::network::{ForwardOptions, Mode, Model};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Square crop side; images larger than this are randomly cropped.
    pub patch: usize,
    pub seed: u64,
    /// Steps between metric log rows; 0 logs only at the end.
    pub log_every: usize,
    /// Steps between checkpoints; 0 checkpoints only at the end.
    pub checkpoint_every: usize,
    /// Halve the rate once half of the scheduled steps are done.
    pub lr_halve: bool,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Regress onto the clean image instead of the noisy input.
    pub supervised: bool,
    /// Held-out images with clean references evaluated at each log row.
    pub eval_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 8,
            lr: 1e-4,
            epochs: 20,
            patch: 64,
            seed: 0,
            log_every: 25,
            checkpoint_every: 0,
            lr_halve: false,
            grad_clip: 0.0,
            supervised: false,
            eval_count: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 || self.patch == 0 {
            return Err(Error::Config("batch, epochs and patch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        Ok(())
    }
}

/// One metric log row. Wall-clock time is kept out so that stored
/// histories are reproducible.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub config: TrainConfig,
    /// Adam first and second moments, keyed like the parameters.
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
    pub history: Vec<LogRow>,
    /// Loss sum and count since the last log row.
    pub pending_loss: (f64, u64),
}

fn zeros_like(p: &ParamStore) -> Result<ParamStore> {
    let mut z = ParamStore::new();
    for (k, t) in p.iter() {
        z.insert(k, Tensor::zeros(t.dims()))?;
    }
    Ok(z)
}

impl TrainState {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let m = zeros_like(&model.params)?;
        let v = zeros_like(&model.params)?;
        Ok(TrainState { model, config, m, v, step: 0, history: Vec::new(), pending_loss: (0.0, 0) })
    }

    /// Checks that moments shape-match parameters.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for store in [&self.m, &self.v] {
            if store.len() != self.model.params.len() {
                return Err(Error::Format("moment table does not match parameters".into()));
            }
            for (k, t) in self.model.params.iter() {
                if store.get(k)?.dims() != t.dims() {
                    return Err(Error::Format(format!("moment '{k}' shape mismatch")));
                }
            }
        }
        Ok(())
    }
}

/// One Adam step at 1-based step `t`, in place.
pub fn adam_update(param: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], t: u64, lr: f64) {
    let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
    let c1 = (1.0 - ADAM_BETA1.powi(t as i32)) as f32;
    let c2 = (1.0 - ADAM_BETA2.powi(t as i32)) as f32;
    let (lr, eps) = (lr as f32, ADAM_EPS as f32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Learning rate in effect at 0-based step `step` of `total`.
pub fn lr_at(cfg: &TrainConfig, step: u64, total: u64) -> f64 {
    if cfg.lr_halve && step >= total / 2 {
        cfg.lr * 0.5
    } else {
        cfg.lr
    }
}

/// Forward in train mode, L1 against `target`, backward, Adam. Returns the loss.
pub fn train_step(state: &mut TrainState, input: &Tensor, target: &Tensor, lr: f64) -> Result<f64> {
    input.same_dims(target, "train_step")?;
    if state.model.mode() != Mode::Train {
        return Err(Error::invalid("train_step needs a train-mode model"));
    }
    let mut g = Graph::<f32>::new();
    let bound = state.model.params.bind(&mut g, true);
    let x = g.constant(input.clone());
    let y = g.constant(target.clone());
    let out = state.model.forward(&mut g, &bound, x, &ForwardOptions::default())?;
    let loss_var = g.l1_mean(out, y).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFinite("loss"),
        e => e,
    })?;
    let loss = g.value(loss_var).item()? as f64;
    let grads = g.backward(loss_var)?;

    let mut gathered = Vec::with_capacity(state.model.params.len());
    let mut norm2 = 0.0f64;
    for (name, var) in bound.iter() {
        let t = grads.get_or_zeros(*var, state.model.params.get(name)?.dims());
        if !t.is_finite() {
            return Err(Error::NonFinite("parameter gradient"));
        }
        norm2 += t.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        gathered.push((name.clone(), t));
    }
    let clip = state.config.grad_clip;
    let scale = if clip > 0.0 && norm2.sqrt() > clip { (clip / norm2.sqrt()) as f32 } else { 1.0 };

    state.step += 1;
    let t = state.step;
    for (name, mut grad) in gathered {
        if scale != 1.0 {
            grad.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let p = state.model.params.get_mut(&name)?;
        let m = state.m.get_mut(&name)?;
        let v = state.v.get_mut(&name)?;
        adam_update(p.data_mut(), grad.data(), m.data_mut(), v.data_mut(), t, lr);
    }
    Ok(loss)
}

/// One training image, shaped (1, C, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub noisy: Tensor,
    pub clean: Option<Tensor>,
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Sample order and crop corners for `epoch`, from stream `epoch` of `seed`.
pub fn epoch_plan(seed: u64, epoch: u64, samples: &[Sample], patch: usize) -> Result<Vec<(usize, usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|i| {
            let [_, _, h, w] = samples[i].noisy.dims();
            if h < patch || w < patch {
                return Err(Error::Dataset(format!("sample {i} is {h}x{w}, smaller than patch {patch}")));
            }
            let y = rng.random_range(0..=h - patch);
            let x = rng.random_range(0..=w - patch);
            Ok((i, y, x))
        })
        .collect()
}

fn crop(t: &Tensor, y0: usize, x0: usize, p: usize) -> Tensor {
    let [_, c, _, _] = t.dims();
    Tensor::from_fn([1, c, p, p], |[_, ci, y, x]| t.at([0, ci, y0 + y, x0 + x]))
}

fn stack(items: &[Tensor]) -> Result<Tensor> {
    let [_, c, h, w] = items[0].dims();
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for t in items {
        if t.dims() != [1, c, h, w] {
            return Err(Error::shape("batch items differ in shape"));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new([items.len(), c, h, w], data)
}

/// Test-mode PSNR/SSIM over samples that carry a clean reference.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<Option<MetricReport>> {
    let mut m = model.clone();
    m.set_mode(Mode::Test);
    let mut pairs = Vec::new();
    for s in samples {
        if let Some(c) = &s.clean {
            pairs.push((m.predict(&s.noisy)?.map(|v| v.clamp(0.0, 1.0)), c.clone()));
        }
    }
    if pairs.is_empty() {
        return Ok(None);
    }
    MetricReport::evaluate(&pairs).map(Some)
}

/// Receives log rows and checkpoint requests during [`run`].
pub trait TrainObserver {
    fn on_log(&mut self, _row: &LogRow) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Trains from `state.step` up to `stop` (capped at the scheduled total).
/// The schedule depends only on the config, the sample count and the
/// step, so a resumed run replays the uninterrupted one exactly.
pub fn run(state: &mut TrainState, data: &[Sample], eval: &[Sample], stop: Option<u64>, obs: &mut dyn TrainObserver) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let cfg = state.config.clone();
    if cfg.supervised && data.iter().any(|s| s.clean.is_none()) {
        return Err(Error::Dataset("supervised training needs a clean image for every sample".into()));
    }
    let per_epoch = steps_per_epoch(data.len(), cfg.batch) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let stop = stop.unwrap_or(total).min(total);
    let eval = &eval[..eval.len().min(cfg.eval_count)];
    let mut plan_epoch = u64::MAX;
    let mut plan = Vec::new();
    while state.step < stop {
        let epoch = state.step / per_epoch;
        if epoch != plan_epoch {
            plan = epoch_plan(cfg.seed, epoch, data, cfg.patch)?;
            plan_epoch = epoch;
        }
        let k = (state.step % per_epoch) as usize;
        let chunk = &plan[k * cfg.batch..((k + 1) * cfg.batch).min(plan.len())];
        let noisy: Vec<Tensor> = chunk.iter().map(|&(i, y, x)| crop(&data[i].noisy, y, x, cfg.patch)).collect();
        let input = stack(&noisy)?;
        let target = if cfg.supervised {
            let clean: Vec<Tensor> = chunk
                .iter()
                .map(|&(i, y, x)| crop(data[i].clean.as_ref().expect("checked above"), y, x, cfg.patch))
                .collect();
            stack(&clean)?
        } else {
            input.clone()
        };
        let lr = lr_at(&cfg, state.step, total);
        let loss = train_step(state, &input, &target, lr)?;
        state.pending_loss.0 += loss;
        state.pending_loss.1 += 1;

        let done = state.step == total;
        if (cfg.log_every > 0 && state.step % cfg.log_every as u64 == 0) || done {
            let report = evaluate(&state.model, eval)?;
            let (psnr, ssim) = report.map_or((f64::NAN, f64::NAN), |r| (r.psnr, r.ssim));
            let row = LogRow { step: state.step, loss: state.pending_loss.0 / state.pending_loss.1 as f64, psnr, ssim };
            state.pending_loss = (0.0, 0);
            obs.on_log(&row)?;
            state.history.push(row);
        }
        if (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every as u64 == 0) || done {
            obs.on_checkpoint(state)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::noise::CorrMask;

    fn tiny_model(seed: u64) -> Model {
        let cfg = NetworkConfig { width: 4, local_layers: 1, dtb_count: 1, ..NetworkConfig::default() };
        let mask = CorrMask::from_fn(10, 0.05, |dy, dx| dy.abs() <= 1 && dx.abs() <= 1);
        Model::build(cfg, &mask, seed).unwrap()
    }

    fn samples(n: usize, size: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let clean = Tensor::from_fn([1, 3, size, size], |[_, c, y, x]| ((c + y / 3 + x / 4 + i) % 4) as f32 / 4.0);
                let noisy = Tensor::from_fn([1, 3, size, size], |[_, c, y, x]| {
                    clean.at([0, c, y, x]) + (((y * 31 + x * 17 + c * 7 + i * 13) % 23) as f32 / 23.0 - 0.5) * 0.2
                });
                Sample { noisy, clean: Some(clean) }
            })
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { batch: 2, lr: 1e-3, epochs: 2, patch: 20, seed: 3, log_every: 2, eval_count: 1, ..TrainConfig::default() }
    }

    #[test]
    fn adam_matches_hand_recurrence() {
        // Two steps on one parameter with gradients 0.5 then -0.25, lr 0.1.
        let (mut p, mut m, mut v) = ([1.0f32], [0.0f32], [0.0f32]);
        adam_update(&mut p, &[0.5], &mut m, &mut v, 1, 0.1);
        // Step 1: m = 0.05, v = 0.00025, mhat = 0.5, vhat = 0.25.
        let p1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] as f64 - p1).abs() < 1e-6);
        adam_update(&mut p, &[-0.25], &mut m, &mut v, 2, 0.1);
        let m2 = 0.9 * 0.05 + 0.1 * -0.25;
        let v2 = 0.999 * 0.00025 + 0.001 * 0.0625;
        let mh = m2 / (1.0 - 0.81);
        let vh: f64 = v2 / (1.0 - 0.999f64 * 0.999);
        let p2 = p1 - 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((p[0] as f64 - p2).abs() < 1e-6, "{} vs {p2}", p[0]);
        assert!((m[0] as f64 - m2).abs() < 1e-8);
    }

    #[test]
    fn zero_model_loss_is_mean_abs_input() {
        let mut model = tiny_model(0);
        for (_, t) in model.params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut st = TrainState::new(model, small_cfg()).unwrap();
        let x = Tensor::from_fn([2, 3, 20, 20], |[b, c, y, x]| ((b + c * 2 + y + x) % 7) as f32 / 7.0 - 0.3);
        let expect = x.data().iter().map(|v| v.abs() as f64).sum::<f64>() / x.numel() as f64;
        let loss = train_step(&mut st, &x, &x, 1e-3).unwrap();
        // Single-precision reduction over 2400 terms.
        assert!((loss - expect).abs() < 1e-5, "{loss} vs {expect}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn masked_weights_stay_zero_and_moments_match() {
        let mut st = TrainState::new(tiny_model(1), small_cfg()).unwrap();
        let data = samples(4, 24);
        run(&mut st, &data, &[], Some(6), &mut ()).unwrap();
        st.validate().unwrap();
        for (name, spec) in [("local.dspmc.w", st.model.local_spec().clone()), ("global.dspmc.w", st.model.global_spec().clone())] {
            let mask = spec.weight_mask();
            let w = st.model.params.get(name).unwrap().data();
            let m = st.m.get(name).unwrap().data();
            for (i, (&wv, &mv)) in w.iter().zip(m).enumerate() {
                if !mask[i % mask.len()] {
                    assert_eq!((wv, mv), (0.0, 0.0), "{name}[{i}]");
                }
            }
            assert!(w.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn runs_are_bit_reproducible_and_resumable() {
        let data = samples(5, 24);
        let eval = samples(1, 20);
        let mut a = TrainState::new(tiny_model(2), small_cfg()).unwrap();
        run(&mut a, &data, &eval, None, &mut ()).unwrap();
        assert_eq!(a.step, 6);
        assert_eq!(a.history.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 4, 6]);

        let mut b = TrainState::new(tiny_model(2), small_cfg()).unwrap();
        run(&mut b, &data, &eval, Some(3), &mut ()).unwrap();
        let mut resumed = b.clone();
        run(&mut resumed, &data, &eval, None, &mut ()).unwrap();
        assert_eq!(resumed, a);
        assert_eq!(a.model.params.checksum(), resumed.model.params.checksum());
    }

    #[test]
    fn one_epoch_of_full_batch_is_one_step() {
        let cfg = TrainConfig { batch: 8, epochs: 1, patch: 20, log_every: 0, ..TrainConfig::default() };
        let mut st = TrainState::new(tiny_model(0), cfg).unwrap();
        run(&mut st, &samples(8, 20), &[], None, &mut ()).unwrap();
        assert_eq!(st.step, 1);
        assert_eq!(st.history.len(), 1);
        assert!(st.history[0].psnr.is_nan());
    }

    #[test]
    fn epoch_plan_is_a_seeded_permutation() {
        let data = samples(6, 24);
        let p = epoch_plan(9, 1, &data, 20).unwrap();
        assert_eq!(p, epoch_plan(9, 1, &data, 20).unwrap());
        assert_ne!(p, epoch_plan(9, 2, &data, 20).unwrap());
        let mut idx: Vec<usize> = p.iter().map(|e| e.0).collect();
        idx.sort();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
        assert!(p.iter().all(|&(_, y, x)| y <= 4 && x <= 4));
        assert!(epoch_plan(9, 1, &data, 25).is_err());
    }

    #[test]
    fn errors() {
        let mut st = TrainState::new(tiny_model(0), small_cfg()).unwrap();
        assert!(run(&mut st, &[], &[], None, &mut ()).is_err());
        let mut unlabeled = samples(2, 20);
        unlabeled[0].clean = None;
        st.config.supervised = true;
        assert!(run(&mut st, &unlabeled, &[], None, &mut ()).is_err());
        assert!(TrainState::new(tiny_model(0), TrainConfig { lr: 0.0, ..small_cfg() }).is_err());
        let mut test_mode = TrainState::new(tiny_model(0), small_cfg()).unwrap();
        test_mode.model.set_mode(Mode::Test);
        let x = Tensor::zeros([1, 3, 20, 20]);
        assert!(train_step(&mut test_mode, &x, &x, 1e-3).is_err());
        let mut nan = TrainState::new(tiny_model(0), small_cfg()).unwrap();
        let bad = Tensor::full([1, 3, 20, 20], f32::NAN);
        assert!(train_step(&mut nan, &bad, &bad, 1e-3).is_err());
    }

    #[test]
    fn halving_schedule() {
        let cfg = TrainConfig { lr_halve: true, lr: 1e-3, ..TrainConfig::default() };
        assert_eq!(lr_at(&cfg, 4, 10), 1e-3);
        assert_eq!(lr_at(&cfg, 5, 10), 5e-4);
        assert_eq!(lr_at(&TrainConfig::default(), 9, 10), 1e-4);
    }
}
