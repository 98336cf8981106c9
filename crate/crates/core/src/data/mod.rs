//! Loading, preprocessing, splitting and degradation of grayscale image sets.

mod augment;
mod phantom;

pub use augment::{augment, flip_horizontal, flip_vertical, rotate, rotate90, AugmentConfig};
pub use phantom::{generate_phantom_dataset, phantom_name};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LABELS_FILE: &str = "labels.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Normal = 0,
    Sick = 1,
}

impl Label {
    pub fn value(self) -> f64 {
        self as u8 as f64
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "0" => Some(Label::Normal),
            "1" => Some(Label::Sick),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    /// `(1, H, W)` in [-1, 1].
    pub pixels: Tensor,
    pub label: Option<Label>,
    pub source_path: PathBuf,
}

impl ImageRecord {
    pub fn height(&self) -> usize {
        self.pixels.dim(1)
    }

    pub fn width(&self) -> usize {
        self.pixels.dim(2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub size: (usize, usize),
    pub conditional: bool,
    pub split_ratio: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, size: (usize, usize)) -> Self {
        DatasetSpec {
            root: root.into(),
            size,
            conditional: false,
            split_ratio: 0.7,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.0 == 0 || self.size.1 == 0 {
            return Err(Error::Config(format!("target size {:?} must be positive", self.size)));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split ratio {} outside (0, 1)", self.split_ratio)));
        }
        self.augment.validate()
    }
}

/// Loaded records plus files that could not be read.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub failures: Vec<(PathBuf, String)>,
}

/// 8-bit value to [-1, 1].
pub fn normalize(p: f64) -> f64 {
    p / 127.5 - 1.0
}

/// [-1, 1] back to the nearest 8-bit value.
pub fn denormalize(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "pnm" | "ppm"))
        .unwrap_or(false)
}

/// Image file names in `dir`, sorted.
pub fn list_images(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && is_image(&path) {
            if let Some(n) = path.file_name().and_then(|n| n.to_str()) {
                names.push(n.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// `(height, width)` from the image header, without decoding pixels.
pub fn image_dims(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok((h as usize, w as usize))
}

/// Reads an image as `(1, H, W)` 8-bit-range values. Colour images become
/// the unweighted mean of their RGB channels.
pub fn read_gray(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        image::DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(f64::from).collect(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| (f64::from(p[0]) + f64::from(p[1]) + f64::from(p[2])) / 3.0)
            .collect(),
    };
    Tensor::new(&[1, h, w], data)
}

/// Writes 8-bit grayscale pixels as PNG via a temporary file and rename.
pub fn write_gray_png(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::Shape(format!("{} pixels for a {width}x{height} image", width * height)))?;
    let tmp = path.with_extension("png.tmp");
    img.save_with_format(&tmp, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: tmp.clone(),
            source,
        })?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes a `(.., H, W)` tensor in [-1, 1] as an 8-bit PNG.
pub fn write_normalized_png(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    write_gray_png(path, w, h, image.data().iter().map(|&x| denormalize(x)).collect())
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear resize with corner-aligned sampling: output row `i` samples
/// source row `i·(h−1)/(th−1)`, so corners map onto corners.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let coord = |i: usize, from: usize, to: usize| -> (usize, usize, f64) {
        let s = if to > 1 {
            i as f64 * (from - 1) as f64 / (to - 1) as f64
        } else {
            (from - 1) as f64 / 2.0
        };
        let lo = (s.floor() as usize).min(from - 1);
        let hi = (lo + 1).min(from - 1);
        (lo, hi, s - lo as f64)
    };
    let cols: Vec<_> = (0..tw).map(|j| coord(j, w, tw)).collect();
    let mut out = Vec::with_capacity(th * tw);
    for i in 0..th {
        let (y0, y1, fy) = coord(i, h, th);
        for &(x0, x1, fx) in &cols {
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
            let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    out
}

/// Reads `labels.csv` (`filename,label` per line) if present.
pub fn read_labels(dir: &Path) -> Result<Option<Vec<(String, Label)>>> {
    let path = dir.join(LABELS_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == "filename,label" {
            continue;
        }
        let parsed = line
            .split_once(',')
            .and_then(|(f, l)| Label::parse(l).map(|l| (f.trim().to_string(), l)));
        match parsed {
            Some(p) => out.push(p),
            None => {
                return Err(Error::Data(format!("{}:{}: bad label line `{line}`", path.display(), n + 1)));
            }
        }
    }
    Ok(Some(out))
}

pub fn write_labels(dir: &Path, labels: &[(String, Label)]) -> Result<()> {
    let mut sorted = labels.to_vec();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let text: String = sorted.iter().map(|(f, l)| format!("{f},{l}\n")).collect();
    let path = dir.join(LABELS_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Resizes to `(th, tw)` and maps to [-1, 1].
pub fn preprocess(image: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (h, w) = (image.dim(1), image.dim(2));
    let resized = if (h, w) == (th, tw) {
        image.data().to_vec()
    } else {
        resize_bilinear(image.data(), h, w, th, tw)
    };
    Tensor::new(&[1, th, tw], resized.into_iter().map(normalize).collect())
}

/// Loads every image under `spec.root`, sorted by file name. Unreadable
/// files are collected in `failures`; an empty result is an error.
pub fn load_and_preprocess(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    if !spec.root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", spec.root.display())));
    }
    let labels = match (spec.conditional, read_labels(&spec.root)?) {
        (true, None) => {
            return Err(Error::Config(format!(
                "conditional dataset {} has no {LABELS_FILE}",
                spec.root.display()
            )))
        }
        (true, Some(l)) => Some(l),
        (false, _) => None,
    };
    let names = list_images(&spec.root)?;
    let (th, tw) = spec.size;
    let results: Vec<_> = names
        .par_iter()
        .map(|name| {
            let path = spec.root.join(name);
            let label = match &labels {
                Some(l) => match l.iter().find(|(f, _)| f == name) {
                    Some((_, lab)) => Some(*lab),
                    None => return Err((path, format!("no label in {LABELS_FILE}"))),
                },
                None => None,
            };
            let pixels = read_gray(&path)
                .and_then(|img| preprocess(&img, th, tw))
                .map_err(|e| (path.clone(), e.to_string()))?;
            Ok(ImageRecord {
                id: name.clone(),
                pixels,
                label,
                source_path: path,
            })
        })
        .collect();
    let mut ds = Dataset::default();
    for r in results {
        match r {
            Ok(rec) => ds.records.push(rec),
            Err(f) => ds.failures.push(f),
        }
    }
    if ds.records.is_empty() {
        return Err(Error::Data(format!(
            "no usable images in {} ({} failures)",
            spec.root.display(),
            ds.failures.len()
        )));
    }
    Ok(ds)
}

/// Training-set size for `n` records at `ratio`: the floor of `n·ratio`,
/// kept within `[1, n−1]` so neither side is empty.
pub fn train_count(n: usize, ratio: f64) -> usize {
    // The small offset keeps products like 2000·0.7 from flooring to 1399.
    let t = (n as f64 * ratio + 1e-9).floor() as usize;
    t.clamp(1, n - 1)
}

/// Seeded shuffle, then the first `train_count` records train.
pub fn split<T: Clone>(records: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if records.len() < 2 {
        return Err(Error::Data(format!("cannot split {} records", records.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = train_count(records.len(), ratio);
    let pick = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect();
    Ok((pick(&idx[..k]), pick(&idx[k..])))
}

/// Generator seeded from `(seed, id, salt)` alone.
pub fn record_rng(seed: u64, id: &str, salt: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(salt.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Box-downsamples by `factor` and bilinearly upsamples back.
pub fn degrade(image: &Tensor, factor: usize) -> Result<Tensor> {
    let s = image.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if factor < 2 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Config(format!("degradation factor {factor} must be >= 2 and divide {h}x{w}")));
    }
    let (lh, lw) = (h / factor, w / factor);
    let src = image.data();
    let area = (factor * factor) as f64;
    let mut low = vec![0.0; lh * lw];
    for (i, row) in low.chunks_mut(lw).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for y in i * factor..(i + 1) * factor {
                for x in j * factor..(j + 1) * factor {
                    acc += src[y * w + x];
                }
            }
            *v = acc / area;
        }
    }
    Tensor::new(s, resize_bilinear(&low, lh, lw, h, w))
}

/// `(degraded, original)` per record.
pub fn make_lr_hr_pairs(records: &[ImageRecord], factor: usize) -> Result<Vec<(Tensor, Tensor)>> {
    records
        .iter()
        .map(|r| Ok((degrade(&r.pixels, factor)?, r.pixels.clone())))
        .collect()
}

/// SHA-256 over file names and bytes of every image and the labels file.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut names = list_images(dir)?;
    if dir.join(LABELS_FILE).is_file() {
        names.push(LABELS_FILE.to_string());
    }
    for n in names {
        let path = dir.join(&n);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update((n.len() as u64).to_le_bytes());
        h.update(n.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
