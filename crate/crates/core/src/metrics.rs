//! PSNR and SSIM, plus per-image reports over image directories.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{list_images, read_gray};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    /// The images are identical.
    Infinite,
}

impl Psnr {
    pub fn db(&self) -> f64 {
        match self {
            Psnr::Finite(v) => *v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

fn check_pair(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{what}: {} vs {} pixels", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape(format!("{what}: empty images")));
    }
    Ok(())
}

/// `10·log10(MAX² / MSE)` over two equally sized pixel buffers.
pub fn psnr_values(reference: &[f64], generated: &[f64], max_value: f64) -> Result<Psnr> {
    check_pair(reference, generated, "psnr")?;
    if !(max_value > 0.0) {
        return Err(Error::Config(format!("psnr max value must be positive, got {max_value}")));
    }
    let sse = reference
        .iter()
        .zip(generated)
        .fold(0.0, |a, (x, y)| a + (x - y) * (x - y));
    if sse == 0.0 {
        return Ok(Psnr::Infinite);
    }
    let mse = sse / reference.len() as f64;
    Ok(Psnr::Finite(10.0 * (max_value * max_value / mse).log10()))
}

pub fn psnr(reference: &Tensor, generated: &Tensor, max_value: f64) -> Result<Psnr> {
    if reference.shape() != generated.shape() {
        return Err(Error::Shape(format!(
            "psnr of {:?} and {:?}",
            reference.shape(),
            generated.shape()
        )));
    }
    psnr_values(reference.data(), generated.data(), max_value)
}

/// Moments entering the SSIM formula.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimStats {
    pub mu_x: f64,
    pub mu_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov_xy: f64,
    pub c1: f64,
    pub c2: f64,
}

impl SsimStats {
    /// Population moments of two equally sized buffers.
    pub fn global(x: &[f64], y: &[f64], dynamic_range: f64) -> Self {
        let n = x.len() as f64;
        let mu_x = x.iter().sum::<f64>() / n;
        let mu_y = y.iter().sum::<f64>() / n;
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            let (da, db) = (a - mu_x, b - mu_y);
            vx += da * da;
            vy += db * db;
            cxy += da * db;
        }
        Self::with_moments(mu_x, mu_y, vx / n, vy / n, cxy / n, dynamic_range)
    }

    pub fn with_moments(mu_x: f64, mu_y: f64, var_x: f64, var_y: f64, cov_xy: f64, dynamic_range: f64) -> Self {
        SsimStats {
            mu_x,
            mu_y,
            var_x: var_x.max(0.0),
            var_y: var_y.max(0.0),
            cov_xy,
            c1: (SSIM_K1 * dynamic_range).powi(2),
            c2: (SSIM_K2 * dynamic_range).powi(2),
        }
    }

    pub fn ssim(&self) -> f64 {
        let num = (2.0 * self.mu_x * self.mu_y + self.c1) * (2.0 * self.cov_xy + self.c2);
        let den = (self.mu_x * self.mu_x + self.mu_y * self.mu_y + self.c1) * (self.var_x + self.var_y + self.c2);
        num / den
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SsimMode {
    /// One window covering the whole image.
    Global,
    /// Mean over all fully contained Gaussian windows.
    Windowed { size: usize, sigma: f64 },
}

impl SsimMode {
    pub const WINDOWED: SsimMode = SsimMode::Windowed { size: 11, sigma: 1.5 };

    pub fn label(&self) -> &'static str {
        match self {
            SsimMode::Global => "global",
            SsimMode::Windowed { .. } => "windowed",
        }
    }
}

impl std::str::FromStr for SsimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(SsimMode::Global),
            "windowed" => Ok(SsimMode::WINDOWED),
            _ => Err(Error::Config(format!("unknown ssim mode `{s}` (global or windowed)"))),
        }
    }
}

/// Height and width of a single-channel image tensor of rank 2 to 4.
fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::Shape(format!("expected a single-channel image, got {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn windowed_ssim(x: &[f64], y: &[f64], h: usize, w: usize, size: usize, sigma: f64, range: f64) -> f64 {
    // Windows larger than the image shrink to the largest odd size that fits.
    let mut k = size.min(h).min(w);
    if k % 2 == 0 {
        k -= 1;
    }
    let g = gaussian_window(k.max(1), sigma);
    let k = g.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=h - k {
        for left in 0..=w - k {
            let (mut mx, mut my) = (0.0, 0.0);
            for (i, gi) in g.iter().enumerate() {
                let row = (top + i) * w + left;
                for (j, gj) in g.iter().enumerate() {
                    let wt = gi * gj;
                    mx += wt * x[row + j];
                    my += wt * y[row + j];
                }
            }
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            for (i, gi) in g.iter().enumerate() {
                let row = (top + i) * w + left;
                for (j, gj) in g.iter().enumerate() {
                    let wt = gi * gj;
                    let (a, b) = (x[row + j] - mx, y[row + j] - my);
                    sxx += wt * (a * a);
                    syy += wt * (b * b);
                    sxy += wt * (a * b);
                }
            }
            let st = SsimStats::with_moments(mx, my, sxx, syy, sxy, range);
            total += st.ssim();
            count += 1;
        }
    }
    total / count as f64
}

/// Structural similarity with dynamic range `max_value`.
pub fn ssim(x: &Tensor, y: &Tensor, max_value: f64, mode: SsimMode) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("ssim of {:?} and {:?}", x.shape(), y.shape())));
    }
    let (h, w) = plane_dims(x)?;
    if !(max_value > 0.0) {
        return Err(Error::Config(format!("ssim dynamic range must be positive, got {max_value}")));
    }
    Ok(match mode {
        SsimMode::Global => SsimStats::global(x.data(), y.data(), max_value).ssim(),
        SsimMode::Windowed { size, sigma } => {
            if size == 0 || !(sigma > 0.0) {
                return Err(Error::Config(format!("ssim window {size} / sigma {sigma}")));
            }
            windowed_ssim(x.data(), y.data(), h, w, size, sigma, max_value)
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub image: String,
    pub psnr: Psnr,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub model: String,
    pub phase: String,
    pub mode: SsimMode,
    pub rows: Vec<MetricRow>,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricReport {
    pub fn new(model: impl Into<String>, phase: impl Into<String>, mode: SsimMode) -> Self {
        MetricReport {
            model: model.into(),
            phase: phase.into(),
            mode,
            rows: Vec::new(),
        }
    }

    /// Mean and std of PSNR; a single infinite row makes both infinite.
    pub fn psnr_stats(&self) -> (Psnr, Psnr) {
        if self.rows.is_empty() {
            return (Psnr::Finite(f64::NAN), Psnr::Finite(f64::NAN));
        }
        if self.rows.iter().any(|r| r.psnr.is_infinite()) {
            return (Psnr::Infinite, Psnr::Infinite);
        }
        let v: Vec<f64> = self.rows.iter().map(|r| r.psnr.db()).collect();
        let (m, s) = mean_std(&v);
        (Psnr::Finite(m), Psnr::Finite(s))
    }

    pub fn ssim_stats(&self) -> (f64, f64) {
        let v: Vec<f64> = self.rows.iter().map(|r| r.ssim).collect();
        mean_std(&v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# model={} phase={} ssim_mode={}\nimage,psnr_db,ssim\n",
            self.model,
            self.phase,
            self.mode.label()
        );
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.image, r.psnr, r.ssim));
        }
        let (pm, ps) = self.psnr_stats();
        let (sm, ss) = self.ssim_stats();
        out.push_str(&format!("mean,{pm},{sm}\nstd,{ps},{ss}\n"));
        out
    }
}

/// Compares every image in `reference_dir` with the same-named file in
/// `generated_dir`; rows are sorted by name.
pub fn evaluate_pairs(reference_dir: &Path, generated_dir: &Path, max_value: f64, mode: SsimMode) -> Result<MetricReport> {
    let names = list_images(reference_dir)?;
    if names.is_empty() {
        return Err(Error::Data(format!("no images in {}", reference_dir.display())));
    }
    for n in &names {
        if !generated_dir.join(n).is_file() {
            return Err(Error::Data(format!(
                "{} has no counterpart for {n}",
                generated_dir.display()
            )));
        }
    }
    let rows = names
        .par_iter()
        .map(|n| {
            let a = read_gray(&reference_dir.join(n))?;
            let b = read_gray(&generated_dir.join(n))?;
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!("{n}: {:?} vs {:?}", a.shape(), b.shape())));
            }
            Ok(MetricRow {
                image: n.clone(),
                psnr: psnr(&a, &b, max_value)?,
                ssim: ssim(&a, &b, max_value, mode)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricReport::new("", "", mode);
    report.rows = rows;
    Ok(report)
}
