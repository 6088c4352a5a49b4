//! End-to-end steps shared by the command-line tool and the acceptance
//! suite: synthetic datasets, correlation analysis, mask resolution,
//! training into an output directory, and denoising.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::save_checkpoint;
use crate::config::{Config, MaskConfig};
use crate::error::{Error, Result};
use crate::image_io::{dataset_scan, load_image, quantize, save_image};
use crate::network::{Mode, Model};
use crate::noise::{
    build_corr_mask, correlation_report, estimate_correlation, extract_noise, median_smooth, synth_clean,
    synth_correlated_noise_at, CorrMask, CorrelationMap, NoiseSynthSpec,
};
use crate::tensor::Tensor;
use crate::train::{run, LogRow, Sample, TrainObserver, TrainState};

/// Median window radius of the pseudo-clean proxy (an 11x11 window).
pub const PSEUDO_CLEAN_RADIUS: usize = 5;

/// Rounds to the byte grid, exactly as a PNG save and reload would.
pub fn quantized(t: &Tensor) -> Tensor {
    t.map(|v| quantize(v) as f32 / 255.0)
}

/// `n` synthetic clean images of `size`^2 and their noisy versions, both
/// quantized to bytes. Image `i` uses clean stream `i` and noise stream `i`.
pub fn synth_samples(n: usize, size: usize, spec: &NoiseSynthSpec) -> Result<Vec<Sample>> {
    synth_samples_from(0, n, size, spec)
}

/// As [`synth_samples`], numbering images from `first`; disjoint ranges
/// give independent held-out sets.
pub fn synth_samples_from(first: u64, n: usize, size: usize, spec: &NoiseSynthSpec) -> Result<Vec<Sample>> {
    (first..first + n as u64)
        .map(|i| {
            let clean = synth_clean(size, spec.seed, i);
            let noisy = synth_correlated_noise_at(&clean, spec, i)?;
            Ok(Sample { noisy: quantized(&noisy), clean: Some(quantized(&clean)) })
        })
        .collect()
}

/// Writes `noisy/NNNN.png` and, when present, `clean/NNNN.png`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir.join("noisy"))?;
    if samples.iter().any(|s| s.clean.is_some()) {
        std::fs::create_dir_all(dir.join("clean"))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:04}.png");
        save_image(&dir.join("noisy").join(&name), &s.noisy)?;
        if let Some(c) = &s.clean {
            save_image(&dir.join("clean").join(&name), c)?;
        }
    }
    Ok(())
}

/// Loads a dataset directory; returns the samples and scan warnings.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Sample>, Vec<String>)> {
    let scan = dataset_scan(dir)?;
    let mut samples = Vec::with_capacity(scan.pairs.len());
    for (noisy, clean) in &scan.pairs {
        let n = load_image(noisy)?;
        let c = clean.as_deref().map(load_image).transpose()?;
        if let Some(c) = &c {
            n.same_dims(c, "noisy and clean image")?;
        }
        samples.push(Sample { noisy: n, clean: c });
    }
    Ok((samples, scan.warnings))
}

/// Correlation of `noisy - clean` over PNG files with the same name in both directories.
pub fn analyze_dirs(noisy_dir: &Path, clean_dir: &Path, radius: usize) -> Result<CorrelationMap> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(noisy_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    names.sort();
    let mut maps = Vec::new();
    for p in &names {
        let c = clean_dir.join(p.file_name().expect("file"));
        if c.is_file() {
            maps.push(extract_noise(&load_image(p)?, &load_image(&c)?)?);
        }
    }
    if maps.is_empty() {
        return Err(Error::Dataset(format!("no matching PNG pairs in {} and {}", noisy_dir.display(), clean_dir.display())));
    }
    estimate_correlation(&maps, radius)
}

/// How a training mask was obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskSource {
    File(PathBuf),
    /// Estimated from this many noisy/clean pairs.
    CleanPairs(usize),
    /// Estimated from residuals against a median-smoothed proxy.
    PseudoClean(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedMask {
    pub mask: CorrMask,
    pub map: Option<CorrelationMap>,
    pub source: MaskSource,
}

/// A stored grid if configured; otherwise an estimate from clean pairs if
/// any sample has one, otherwise from pseudo-clean residuals.
pub fn resolve_mask(cfg: &MaskConfig, samples: &[Sample]) -> Result<ResolvedMask> {
    if let Some(p) = &cfg.path {
        let mask = CorrMask::from_grid_text(&std::fs::read_to_string(p)?, cfg.threshold)?;
        return Ok(ResolvedMask { mask, map: None, source: MaskSource::File(p.clone()) });
    }
    let pairs: Vec<Tensor> = samples
        .iter()
        .filter_map(|s| s.clean.as_ref().map(|c| extract_noise(&s.noisy, c)))
        .collect::<Result<_>>()?;
    let (maps, source) = if pairs.is_empty() {
        let res: Vec<Tensor> = samples
            .iter()
            .map(|s| extract_noise(&s.noisy, &median_smooth(&s.noisy, PSEUDO_CLEAN_RADIUS)))
            .collect::<Result<_>>()?;
        let n = res.len();
        (res, MaskSource::PseudoClean(n))
    } else {
        let n = pairs.len();
        (pairs, MaskSource::CleanPairs(n))
    };
    let map = estimate_correlation(&maps, cfg.radius)?;
    let mask = build_corr_mask(&map, cfg.threshold)?;
    Ok(ResolvedMask { mask, map: Some(map), source })
}

/// Trains a fresh model on in-memory samples and returns the final state.
pub fn fit(cfg: &Config, mask: &CorrMask, data: &[Sample], obs: &mut dyn TrainObserver) -> Result<TrainState> {
    cfg.validate()?;
    fit_model(cfg, Model::build(cfg.network.clone(), mask, cfg.train.seed)?, data, obs)
}

/// Trains a given model with `cfg.train`; clean references feed evaluation only.
pub fn fit_model(cfg: &Config, model: Model, data: &[Sample], obs: &mut dyn TrainObserver) -> Result<TrainState> {
    let mut state = TrainState::new(model, cfg.train.clone())?;
    let eval: Vec<Sample> = data.iter().filter(|s| s.clean.is_some()).cloned().collect();
    run(&mut state, data, &eval, None, obs)?;
    Ok(state)
}

/// File name of the checkpoint written at `step`; the final one is `model.ckpt`.
pub fn checkpoint_name(step: u64, last: bool) -> String {
    if last {
        "model.ckpt".into()
    } else {
        format!("step_{step:06}.ckpt")
    }
}

struct DirObserver<'a> {
    out: PathBuf,
    mask: MaskConfig,
    total: u64,
    metrics: std::fs::File,
    started: Instant,
    progress: &'a mut dyn FnMut(&str),
}

impl TrainObserver for DirObserver<'_> {
    fn on_log(&mut self, row: &LogRow) -> Result<()> {
        writeln!(self.metrics, "{}\t{:.6}\t{:.4}\t{:.6}", row.step, row.loss, row.psnr, row.ssim)?;
        self.metrics.flush()?;
        (self.progress)(&format!(
            "step {}/{}  loss {:.5}  psnr {:.2}  ssim {:.4}  {:.1}s",
            row.step,
            self.total,
            row.loss,
            row.psnr,
            row.ssim,
            self.started.elapsed().as_secs_f64()
        ));
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> Result<()> {
        let last = state.step == self.total;
        save_checkpoint(&self.out.join(checkpoint_name(state.step, last)), state, &self.mask)
    }
}

/// Trains on `data_dir` and writes into `out_dir`: `config.txt` (effective
/// configuration), `mask.txt`, `correlation.tsv` when the mask was
/// estimated, `metrics.tsv`, periodic checkpoints and `model.ckpt`.
/// Wall-clock time only goes to `progress`, so every file is reproducible.
pub fn train_dir(cfg: &Config, data_dir: &Path, out_dir: &Path, progress: &mut dyn FnMut(&str)) -> Result<TrainState> {
    cfg.validate()?;
    let (samples, warnings) = load_dataset(data_dir)?;
    for w in &warnings {
        progress(&format!("warning: {w}"));
    }
    let resolved = resolve_mask(&cfg.mask, &samples)?;
    progress(&format!(
        "{} images, mask from {:?}, {} offsets excluded",
        samples.len(),
        resolved.source,
        resolved.mask.excluded_count()
    ));
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.txt"), cfg.to_text())?;
    std::fs::write(out_dir.join("mask.txt"), resolved.mask.grid_text())?;
    if let Some(map) = &resolved.map {
        std::fs::write(out_dir.join("correlation.tsv"), correlation_report(map, Some(&resolved.mask)))?;
    }
    let mut metrics = std::fs::File::create(out_dir.join("metrics.tsv"))?;
    writeln!(metrics, "step\tloss\tpsnr\tssim")?;
    let per_epoch = crate::train::steps_per_epoch(samples.len(), cfg.train.batch) as u64;
    let mut obs = DirObserver {
        out: out_dir.to_path_buf(),
        mask: cfg.mask.clone(),
        total: per_epoch * cfg.train.epochs as u64,
        metrics,
        started: Instant::now(),
        progress,
    };
    fit(cfg, &resolved.mask, &samples, &mut obs)
}

/// Applies test-time overrides and switches to test mode.
pub fn inference_model(model: &Model, pd_test: Option<usize>, shift_ratio: Option<f64>) -> Result<Model> {
    let mut m = model.clone();
    if let Some(s) = pd_test {
        m.config.pd_test = s;
    }
    if let Some(r) = shift_ratio {
        m.config.shift_ratio = r;
    }
    m.config.validate()?;
    m.set_mode(Mode::Test);
    Ok(m)
}

/// Test-mode prediction clamped to [0, 1].
pub fn denoise(model: &Model, x: &Tensor) -> Result<Tensor> {
    if model.mode() != Mode::Test {
        return Err(Error::invalid("denoising runs in test mode"));
    }
    Ok(model.predict(x)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Denoises one PNG, or every PNG of a directory into `output` (created).
/// Returns the written paths.
pub fn denoise_path(model: &Model, input: &Path, output: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        std::fs::create_dir_all(output)?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        let mut written = Vec::new();
        for f in files {
            let dst = output.join(f.file_name().expect("file"));
            save_image(&dst, &denoise(model, &load_image(&f)?)?)?;
            written.push(dst);
        }
        Ok(written)
    } else {
        save_image(output, &denoise(model, &load_image(input)?)?)?;
        Ok(vec![output.to_path_buf()])
    }
}

/// Human-readable mask summary: the grid plus the excluded offsets.
pub fn mask_summary(mask: &CorrMask) -> String {
    let mut s = mask.grid_text();
    let r = mask.radius() as i32;
    let excluded: Vec<String> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| !mask.bit(dy, dx))
        .map(|(dy, dx)| format!("({dy},{dx})"))
        .collect();
    let _ = writeln!(s, "excluded {}: {}", excluded.len(), excluded.join(" "));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::noise::NoiseKernel;
    use crate::train::TrainConfig;

    fn spec() -> NoiseSynthSpec {
        NoiseSynthSpec::new(25.0 / 255.0, NoiseKernel::Gauss3, 0.0, 4)
    }

    #[test]
    fn synthetic_dataset_survives_png_roundtrip() {
        let samples = synth_samples(3, 24, &spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let (back, warnings) = load_dataset(dir.path()).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(back, samples);
        assert_eq!(synth_samples(3, 24, &spec()).unwrap(), samples);
    }

    #[test]
    fn mask_sources_fall_back_in_order() {
        let samples = synth_samples(6, 40, &spec()).unwrap();
        let cfg = MaskConfig { radius: 3, ..MaskConfig::default() };
        let r = resolve_mask(&cfg, &samples).unwrap();
        assert_eq!(r.source, MaskSource::CleanPairs(6));
        // Gauss3 noise correlates strongly at distance 1 and not at 3.
        assert!(!r.mask.bit(0, 1) && !r.mask.bit(1, 1) && r.mask.bit(0, 3));

        let blind: Vec<Sample> = samples.iter().map(|s| Sample { noisy: s.noisy.clone(), clean: None }).collect();
        assert_eq!(resolve_mask(&cfg, &blind).unwrap().source, MaskSource::PseudoClean(6));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        std::fs::write(&p, r.mask.grid_text()).unwrap();
        let from_file = resolve_mask(&MaskConfig { path: Some(p.clone()), ..cfg }, &[]).unwrap();
        assert_eq!((from_file.mask, from_file.source), (r.mask, MaskSource::File(p)));
    }

    #[test]
    fn train_dir_writes_reproducible_outputs() {
        let data = tempfile::tempdir().unwrap();
        // 48^2 images leave enough pixel pairs at radius 10.
        write_dataset(data.path(), &synth_samples(3, 48, &spec()).unwrap()).unwrap();
        let cfg = Config {
            network: NetworkConfig { width: 4, local_layers: 1, dtb_count: 1, ..NetworkConfig::default() },
            train: TrainConfig { batch: 2, patch: 24, epochs: 1, log_every: 1, checkpoint_every: 1, eval_count: 1, ..TrainConfig::default() },
            mask: MaskConfig::default(),
        };
        let outs: Vec<_> = (0..2)
            .map(|_| {
                let out = tempfile::tempdir().unwrap();
                let st = train_dir(&cfg, data.path(), out.path(), &mut |_| {}).unwrap();
                assert_eq!(st.step, 2);
                out
            })
            .collect();
        for f in ["config.txt", "mask.txt", "correlation.tsv", "metrics.tsv", "step_000001.ckpt", "model.ckpt"] {
            let a = std::fs::read(outs[0].path().join(f)).unwrap();
            assert_eq!(a, std::fs::read(outs[1].path().join(f)).unwrap(), "{f}");
        }
        let metrics = std::fs::read_to_string(outs[0].path().join("metrics.tsv")).unwrap();
        assert_eq!(metrics.lines().count(), 3);
        assert_eq!(Config::load(&outs[0].path().join("config.txt")).unwrap(), cfg);
    }

    #[test]
    fn denoise_requires_test_mode_and_applies_overrides() {
        let cfg = NetworkConfig { width: 4, local_layers: 1, dtb_count: 1, ..NetworkConfig::default() };
        let model = Model::build(cfg, &CorrMask::center_only(10), 0).unwrap();
        let x = Tensor::full([1, 3, 20, 20], 0.5f32);
        assert!(denoise(&model, &x).is_err());
        let m = inference_model(&model, Some(3), Some(0.0)).unwrap();
        assert_eq!((m.stride(), m.shift_ratio()), (3, 0.0));
        let y = denoise(&m, &x).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(inference_model(&model, None, Some(0.5)).is_err());
    }
}
