//! `lgbpn` command-line tool. Exit codes: 0 success, 1 usage error,
//! 2 runtime failure (including failed verification).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use lgbpn::checkpoint::load_checkpoint;
use lgbpn::config::Config;
use lgbpn::dtb::AttentionOptions;
use lgbpn::image_io::load_image;
use lgbpn::metrics::{psnr, ssim};
use lgbpn::network::{BranchSelect, ForwardOptions, Mode, Model};
use lgbpn::noise::{build_corr_mask, correlation_report, CorrelationMap, NoiseKernel, NoiseSynthSpec};
use lgbpn::pipeline;
use lgbpn::tensor::{load_record, save_tensor};
use lgbpn::verify;

#[derive(Parser, Debug)]
#[command(name = "lgbpn", version, about = "Self-supervised denoising of spatially correlated noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic noisy/clean dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Noise standard deviation in 8-bit levels.
        #[arg(long, default_value_t = 25.0)]
        sigma: f64,
        #[arg(long, default_value = "gauss3")]
        kernel: String,
        /// Signal-dependent std per unit intensity.
        #[arg(long, default_value_t = 0.0)]
        gain: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Estimate per-offset noise correlation from noisy/clean pairs.
    Analyze {
        #[arg(long)]
        noisy: PathBuf,
        #[arg(long)]
        clean: PathBuf,
        #[arg(long, default_value_t = 10)]
        radius: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Threshold a correlation map into a mask grid.
    Mask {
        #[arg(long)]
        corr: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        /// Grid destination; the report goes next to it as `<out>.tsv`.
        /// Without it both are printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        supervised: bool,
        /// Extra `key=value` assignments applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Denoise a PNG, or every PNG of a directory.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pd_test: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        shift_ratio: Option<f64>,
    },
    /// Check structural properties of a model or of the autodiff engine.
    Verify {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: VerifyMode,
        /// Treat attention statistics as constants in blind-spot probes.
        #[arg(long)]
        detach_stats: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Save the normalized input-gradient heatmap of one output pixel.
    Rfmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_pair)]
        pos: (usize, usize),
        #[arg(long, value_parser = parse_pair, default_value = "64,64")]
        size: (usize, usize),
        #[arg(long, value_enum, default_value_t = Branch::Full)]
        branch: Branch,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// PSNR and SSIM between two PNGs.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VerifyMode {
    Blindspot,
    Gradcheck,
    Leakage,
    Rf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Branch {
    Full,
    Local,
    Global,
}

impl From<Branch> for BranchSelect {
    fn from(b: Branch) -> Self {
        match b {
            Branch::Full => BranchSelect::Full,
            Branch::Local => BranchSelect::LocalOnly,
            Branch::Global => BranchSelect::GlobalOnly,
        }
    }
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected Y,X, got '{s}'"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad integer '{v}'"));
    Ok((p(a)?, p(b)?))
}

/// Parses `argv` (program name first), runs the command, returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn load_model(path: &Path) -> Result<Model> {
    let (state, _) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(state.model)
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Runs one command; `Ok(false)` reports a failed check.
fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Synth { out, n, size, sigma, kernel, gain, seed } => {
            let kernel: NoiseKernel = kernel.parse()?;
            let spec = NoiseSynthSpec::new(sigma / 255.0, kernel, gain, seed);
            let samples = pipeline::synth_samples(n, size, &spec)?;
            pipeline::write_dataset(&out, &samples)?;
            println!("wrote {n} pairs of {size}x{size} to {}", out.display());
        }
        Command::Analyze { noisy, clean, radius, out } => {
            let map = pipeline::analyze_dirs(&noisy, &clean, radius)?;
            std::fs::write(&out, map.to_record().to_bytes()?)?;
            print!("{}", correlation_report(&map, None));
        }
        Command::Mask { corr, threshold, out } => {
            let map = CorrelationMap::from_record(&load_record(&corr)?)?;
            let mask = build_corr_mask(&map, threshold)?;
            let report = correlation_report(&map, Some(&mask));
            match out {
                Some(p) => {
                    std::fs::write(&p, mask.grid_text())?;
                    let mut tsv = p.clone().into_os_string();
                    tsv.push(".tsv");
                    std::fs::write(&tsv, report)?;
                    println!("{} offsets excluded; wrote {} and {}", mask.excluded_count(), p.display(), Path::new(&tsv).display());
                }
                None => print!("{}{report}", pipeline::mask_summary(&mask)),
            }
        }
        Command::Train { config, data, out, seed, supervised, set } => {
            let mut cfg = match config {
                Some(p) => Config::load(&p).with_context(|| format!("reading {}", p.display()))?,
                None => Config::default(),
            };
            for kv in &set {
                let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got '{kv}'"))?;
                cfg.set(k.trim(), v)?;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if supervised {
                cfg.train.supervised = true;
            }
            let state = pipeline::train_dir(&cfg, &data, &out, &mut |line| eprintln!("{line}"))?;
            println!("trained {} steps; checkpoint {}", state.step, out.join("model.ckpt").display());
        }
        Command::Denoise { ckpt, input, out, pd_test, shift_ratio } => {
            let model = pipeline::inference_model(&load_model(&ckpt)?, pd_test, shift_ratio)?;
            for p in pipeline::denoise_path(&model, &input, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Verify { ckpt, mode, detach_stats, seed } => {
            if let VerifyMode::Gradcheck = mode {
                return Ok(verify_gradcheck(seed)?);
            }
            let path = ckpt.ok_or_else(|| anyhow!("--ckpt is required for this mode"))?;
            let mut model = load_model(&path)?;
            model.set_mode(Mode::Train);
            return match mode {
                VerifyMode::Blindspot => verify_blindspot(&model, detach_stats, seed),
                VerifyMode::Leakage => verify_leakage(&model, seed),
                VerifyMode::Rf => verify_rf(&model, seed),
                VerifyMode::Gradcheck => unreachable!(),
            };
        }
        Command::Rfmap { ckpt, out, pos, size, branch, seed } => {
            let mut model = load_model(&ckpt)?;
            model.set_mode(Mode::Train);
            let x = verify::random_image([1, model.config.in_channels, size.0, size.1], seed);
            let opts = ForwardOptions { branches: branch.into(), ..ForwardOptions::default() };
            let map = verify::receptive_field_map(&model, &x, pos, &opts)?;
            verify::save_heatmap(&out, &map)?;
            save_tensor(&out.with_extension("lgbp"), &map)?;
            println!("support {} px; wrote {}", verify::support(&map).len(), out.display());
        }
        Command::Metrics { a, b } => {
            let (x, y) = (load_image(&a)?, load_image(&b)?);
            println!("PSNR {:.2} dB, SSIM {:.4}", psnr(&x, &y, 1.0)?, ssim(&x, &y)?);
        }
    }
    Ok(true)
}

/// Probe count and image size of the blind-spot check.
const PROBE_IMAGES: u64 = 5;
const PROBES: usize = 20;
const PROBE_SIZE: usize = 64;
/// Finite-difference relative error ceiling, and the floor the corrupted rule must exceed.
const GRADCHECK_TOL: f64 = 1e-5;
const GRADCHECK_CONTROL: f64 = 1e-2;

fn verify_blindspot(model: &Model, detach_stats: bool, seed: u64) -> Result<bool> {
    let c = model.config.in_channels;
    let control = verify::unmasked_center_model(model, seed)?;
    let local = ForwardOptions { branches: BranchSelect::LocalOnly, ..ForwardOptions::default() };
    let full = ForwardOptions { branches: BranchSelect::Full, attention: AttentionOptions { detach_stats, identity: false } };
    let (mut worst_local, mut worst_full, mut max_control, mut min_control) = (0.0f64, 0.0f64, 0.0f64, f64::INFINITY);
    for i in 0..PROBE_IMAGES {
        let x = verify::random_image([1, c, PROBE_SIZE, PROBE_SIZE], seed + i);
        let pos = verify::interior_positions(PROBE_SIZE, PROBE_SIZE, verify::BORDER_MARGIN, PROBES, seed + 100 + i)?;
        worst_local = worst_local.max(verify::blindspot_grad(model, &x, &pos, &local, verify::STRUCTURAL_ZERO)?.max_center);
        worst_full = worst_full.max(verify::blindspot_grad(model, &x, &pos, &full, verify::STRUCTURAL_ZERO)?.max_center);
        let ctl = verify::blindspot_grad(&control, &x, &pos, &local, verify::STRUCTURAL_ZERO)?;
        max_control = max_control.max(ctl.max_center);
        min_control = min_control.min(ctl.center.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    let tol = verify::STRUCTURAL_ZERO;
    let (a, b) = (worst_local <= tol, worst_full <= tol);
    println!("{} local branch: max center gradient {worst_local:.3e} (<= {tol:e})", verdict(a));
    println!("{} full model, detach_stats={detach_stats}: max center gradient {worst_full:.3e} (<= {tol:e})", verdict(b));
    println!("control (center tap enabled): center gradient max {max_control:.3e}, min {min_control:.3e}");
    Ok(a && b)
}

fn verify_gradcheck(seed: u64) -> Result<bool> {
    let suite = verify::gradcheck_suite(seed)?;
    let tol = GRADCHECK_TOL;
    for (name, r) in &suite.families {
        println!("{} {name}: max rel error {:.3e}", verdict(r.max_rel_error < tol), r.max_rel_error);
    }
    println!("linear subgraph: max rel error {:.3e}", suite.linear.max_rel_error);
    let ctl = suite.negative_control.max_rel_error;
    println!("{} negative control: max rel error {ctl:.3e} (> {:e})", verdict(ctl > GRADCHECK_CONTROL), GRADCHECK_CONTROL);
    Ok(suite.worst() < tol && ctl > GRADCHECK_CONTROL)
}

fn verify_leakage(model: &Model, seed: u64) -> Result<bool> {
    let sizes = [(32, 32), (64, 64), (128, 128)];
    let table = verify::leakage_scaling(model, &sizes, 8, seed)?;
    for r in &table.rows {
        println!("{}x{}: center {:.3e}, off-center median {:.3e}, ratio {:.3e}", r.height, r.width, r.leakage, r.off_center_median, r.ratio());
    }
    match table.slope {
        Some(s) => println!("log-log slope vs area: {s:.3}"),
        None => println!("log-log slope vs area: undefined (leakage is exactly zero at some size)"),
    }
    let at64 = table.rows.iter().find(|r| r.height == 64).map_or(f64::INFINITY, |r| r.ratio());
    let pass = at64 <= verify::LEAKAGE_RATIO && table.slope.is_none_or(|s| s <= -0.5);
    println!("{} ratio at 64x64 {at64:.3e} (<= {:e})", verdict(pass), verify::LEAKAGE_RATIO);
    Ok(pass)
}

fn verify_rf(model: &Model, seed: u64) -> Result<bool> {
    let (h, w) = (PROBE_SIZE, PROBE_SIZE);
    let p = (h / 2, w / 2);
    let x = verify::random_image([1, model.config.in_channels, h, w], seed);
    let local = ForwardOptions { branches: BranchSelect::LocalOnly, ..ForwardOptions::default() };
    let global = ForwardOptions { branches: BranchSelect::GlobalOnly, ..ForwardOptions::default() };
    let got = verify::support(&verify::receptive_field_map(model, &x, p, &local)?);
    let want = verify::predicted_local_support(model, h, w, p);
    let g = verify::support(&verify::receptive_field_map(model, &x, p, &global)?);
    let same = got == want;
    println!(
        "{} local support {} px, predicted {} px ({} missing, {} extra)",
        verdict(same),
        got.len(),
        want.len(),
        want.difference(&got).count(),
        got.difference(&want).count()
    );
    let wider = g.len() > got.len();
    println!("{} global support {} px > local {} px", verdict(wider), g.len(), got.len());
    Ok(same && wider)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_parsing() {
        assert_eq!(parse_pair("3,4"), Ok((3, 4)));
        assert_eq!(parse_pair(" 10 , 2"), Ok((10, 2)));
        assert!(parse_pair("3").is_err() && parse_pair("a,1").is_err());
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(dispatch(["lgbpn", "frobnicate"]), 1);
        assert_eq!(dispatch(["lgbpn", "metrics", "--a", "x.png", "--b", "y.png", "--bogus"]), 1);
        assert_eq!(dispatch(["lgbpn", "verify", "--mode", "sideways"]), 1);
        assert_eq!(dispatch(["lgbpn", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_2() {
        assert_eq!(dispatch(["lgbpn", "metrics", "--a", "/nonexistent/a.png", "--b", "/nonexistent/b.png"]), 2);
        assert_eq!(dispatch(["lgbpn", "verify", "--mode", "blindspot"]), 2);
    }
}
