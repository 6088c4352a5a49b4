//! 8-bit RGB PNG files and the `noisy/` + `clean/` dataset layout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{ColorType, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn img_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), message: message.into() }
}

/// Byte for a value: clamp to [0, 1], then `floor(255 v + 0.5)`, so halves round up.
pub fn quantize(v: f32) -> u8 {
    let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (c as f64 * 255.0 + 0.5).floor() as u8
}

/// (1, 3, H, W) tensor with values `byte / 255`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| raw[(y * w + x) * 3 + c] as f32 / 255.0)
}

/// Quantizes image 0 of a (B, 3, H, W) or (B, 1, H, W) tensor; one channel is replicated.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let [_, c, h, w] = t.dims();
    if c != 3 && c != 1 {
        return Err(Error::shape(format!("image tensors need 1 or 3 channels, got {c}")));
    }
    let mut raw = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                raw.push(quantize(t.at([0, if c == 1 { 0 } else { ch }, y, x])));
            }
        }
    }
    RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::shape("image buffer size"))
}

/// Loads an 8-bit RGB PNG; other color types and bit depths are rejected.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let reader = image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| img_err(path, e.to_string()))?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(img_err(path, "not a PNG file"));
    }
    let img = reader.decode().map_err(|e| img_err(path, e.to_string()))?;
    if img.color() != ColorType::Rgb8 {
        return Err(img_err(path, format!("unsupported color type {:?}; expected 8-bit RGB", img.color())));
    }
    Ok(rgb_to_tensor(&img.into_rgb8()))
}

pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    tensor_to_rgb(t)?.save_with_format(path, ImageFormat::Png).map_err(|e| img_err(path, e.to_string()))
}

/// Noisy images paired with optional clean references.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetScan {
    pub pairs: Vec<(PathBuf, Option<PathBuf>)>,
    pub warnings: Vec<String>,
}

/// PNG files of `dir` keyed by stem. A stem seen twice (for instance
/// `a.png` and `a.PNG`) is an error; non-PNG files are skipped with a warning.
fn stems(dir: &Path, warnings: &mut Vec<String>) -> Result<BTreeMap<String, PathBuf>> {
    let mut seen: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if !p.is_file() {
            continue;
        }
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(prev) = seen.get(&stem) {
            return Err(Error::Dataset(format!("duplicate basename '{stem}': {} and {}", prev.display(), p.display())));
        }
        let is_png = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            warnings.push(format!("skipping non-PNG file {}", p.display()));
        }
        seen.insert(stem, p);
    }
    seen.retain(|_, p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    Ok(seen)
}

/// Scans `dir/noisy` and, if present, `dir/clean`, in lexicographic order.
pub fn dataset_scan(dir: &Path) -> Result<DatasetScan> {
    let mut warnings = Vec::new();
    let noisy_dir = dir.join("noisy");
    if !noisy_dir.is_dir() {
        return Err(Error::Dataset(format!("{} has no noisy/ directory", dir.display())));
    }
    let noisy = stems(&noisy_dir, &mut warnings)?;
    if noisy.is_empty() {
        return Err(Error::Dataset(format!("no PNG images in {}", noisy_dir.display())));
    }
    let clean_dir = dir.join("clean");
    let mut clean = if clean_dir.is_dir() { stems(&clean_dir, &mut warnings)? } else { BTreeMap::new() };
    let pairs = noisy.into_iter().map(|(stem, p)| (p, clean.remove(&stem))).collect();
    for p in clean.values() {
        warnings.push(format!("clean image {} has no noisy counterpart", p.display()));
    }
    Ok(DatasetScan { pairs, warnings })
}
