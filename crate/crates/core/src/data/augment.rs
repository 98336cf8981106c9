use rand::Rng;

use super::{resize_bilinear, ImageRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Background value for pixels with no source.
const FILL: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Rotation angle is drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Smallest fraction of each side kept by a random crop.
    pub crop_fraction: f64,
    /// Largest center zoom factor.
    pub zoom_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            flip_horizontal: false,
            flip_vertical: false,
            crop_fraction: 1.0,
            zoom_max: 1.0,
        }
    }
}

impl AugmentConfig {
    /// Mild settings suitable for cardiac slices.
    pub fn standard() -> Self {
        AugmentConfig {
            rotation_deg: 10.0,
            flip_horizontal: true,
            flip_vertical: false,
            crop_fraction: 0.9,
            zoom_max: 1.1,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentConfig::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=180.0).contains(&self.rotation_deg) {
            return Err(Error::Config(format!("rotation {}° outside [0, 180]", self.rotation_deg)));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::Config(format!("crop fraction {} outside (0, 1]", self.crop_fraction)));
        }
        if !(self.zoom_max >= 1.0 && self.zoom_max.is_finite()) {
            return Err(Error::Config(format!("zoom maximum {} below 1", self.zoom_max)));
        }
        Ok(())
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    (s[s.len() - 2], s[s.len() - 1])
}

fn rebuild(like: &Tensor, data: Vec<f64>, h: usize, w: usize) -> Tensor {
    let mut shape = like.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Tensor::new(&shape, data).expect("element count matches shape")
}

pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let (h, w) = dims(t);
    let src = t.data();
    let data = (0..h * w).map(|k| src[(k / w) * w + (w - 1 - k % w)]).collect();
    rebuild(t, data, h, w)
}

pub fn flip_vertical(t: &Tensor) -> Tensor {
    let (h, w) = dims(t);
    let src = t.data();
    let data = (0..h * w).map(|k| src[(h - 1 - k / w) * w + k % w]).collect();
    rebuild(t, data, h, w)
}

/// Exact quarter turn counter-clockwise: `[[a,b],[c,d]]` → `[[b,d],[a,c]]`.
pub fn rotate90(t: &Tensor) -> Tensor {
    let (h, w) = dims(t);
    let src = t.data();
    // Output is w×h; out[i][j] = in[j][w-1-i].
    let data = (0..w * h).map(|k| src[(k % h) * w + (w - 1 - k / h)]).collect();
    rebuild(t, data, w, h)
}

/// Counter-clockwise rotation about the image center with bilinear
/// sampling. Quarter turns of square images are exact.
pub fn rotate(t: &Tensor, degrees: f64) -> Tensor {
    let (h, w) = dims(t);
    let quarter = degrees / 90.0;
    if h == w && quarter == quarter.round() {
        let mut out = t.clone();
        for _ in 0..(quarter as i64).rem_euclid(4) {
            out = rotate90(&out);
        }
        return out;
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = t.data();
    let tol = 1e-9;
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (dy, dx) = (i as f64 - cy, j as f64 - cx);
            let sy = cy + dx * s + dy * c;
            let sx = cx + dx * c - dy * s;
            if sy < -tol || sx < -tol || sy > (h - 1) as f64 + tol || sx > (w - 1) as f64 + tol {
                data.push(FILL);
                continue;
            }
            let (sy, sx) = (sy.clamp(0.0, (h - 1) as f64), sx.clamp(0.0, (w - 1) as f64));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let top = src[y0 * w + x0] + fx * (src[y0 * w + x1] - src[y0 * w + x0]);
            let bot = src[y1 * w + x0] + fx * (src[y1 * w + x1] - src[y1 * w + x0]);
            data.push(top + fy * (bot - top));
        }
    }
    rebuild(t, data, h, w)
}

/// Crops `ch×cw` at `(top, left)` and resizes back to the original size.
fn crop_resize(t: &Tensor, top: usize, left: usize, ch: usize, cw: usize) -> Tensor {
    let (h, w) = dims(t);
    if (ch, cw) == (h, w) {
        return t.clone();
    }
    let src = t.data();
    let mut window = Vec::with_capacity(ch * cw);
    for y in top..top + ch {
        window.extend_from_slice(&src[y * w + left..y * w + left + cw]);
    }
    rebuild(t, resize_bilinear(&window, ch, cw, h, w), h, w)
}

/// Random rotation, flips, crop and zoom; the output keeps the input shape.
pub fn augment<R: Rng + ?Sized>(record: &ImageRecord, config: &AugmentConfig, rng: &mut R) -> Result<ImageRecord> {
    config.validate()?;
    let mut img = record.pixels.clone();
    let (h, w) = dims(&img);
    if config.rotation_deg > 0.0 {
        let a = rng.random_range(-config.rotation_deg..=config.rotation_deg);
        img = rotate(&img, a);
    }
    if config.flip_horizontal && rng.random_bool(0.5) {
        img = flip_horizontal(&img);
    }
    if config.flip_vertical && rng.random_bool(0.5) {
        img = flip_vertical(&img);
    }
    if config.crop_fraction < 1.0 {
        let f = rng.random_range(config.crop_fraction..=1.0);
        let ch = ((h as f64 * f).round() as usize).clamp(1, h);
        let cw = ((w as f64 * f).round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        img = crop_resize(&img, top, left, ch, cw);
    }
    if config.zoom_max > 1.0 {
        let z = rng.random_range(1.0..=config.zoom_max);
        let zh = ((h as f64 / z).round() as usize).clamp(1, h);
        let zw = ((w as f64 / z).round() as usize).clamp(1, w);
        img = crop_resize(&img, (h - zh) / 2, (w - zw) / 2, zh, zw);
    }
    Ok(ImageRecord {
        pixels: img,
        ..record.clone()
    })
}
