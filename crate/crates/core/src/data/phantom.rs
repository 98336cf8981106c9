//! Synthetic short-axis cardiac slices: a soft-tissue body ellipse holding a
//! bright myocardial ring around a darker blood pool.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{record_rng, write_gray_png, write_labels, Label};
use crate::error::{Error, Result};

/// Ring-thickness multiplier for the "Sick" class.
const SICK_THICKENING: f64 = 1.6;
/// Supersampling factor per axis for smooth edges.
const SS: usize = 3;

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Squared normalized radius of `(y, x)`, < 1 inside.
    fn rho2(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }

    fn shrunk(&self, by: f64) -> Ellipse {
        Ellipse {
            ry: (self.ry - by).max(0.5),
            rx: (self.rx - by).max(0.5),
            ..*self
        }
    }
}

fn render<R: Rng + ?Sized>(h: usize, w: usize, sick: bool, rng: &mut R) -> Vec<u8> {
    let side = h.min(w) as f64;
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (sin, cos) = angle.sin_cos();
    let body = Ellipse {
        cy: h as f64 / 2.0 + rng.random_range(-0.04..0.04) * side,
        cx: w as f64 / 2.0 + rng.random_range(-0.04..0.04) * side,
        ry: rng.random_range(0.38..0.46) * side,
        rx: rng.random_range(0.40..0.48) * side,
        cos,
        sin,
    };
    let heart_angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (hs, hc) = heart_angle.sin_cos();
    let outer = Ellipse {
        cy: body.cy + rng.random_range(-0.05..0.05) * side,
        cx: body.cx + rng.random_range(-0.05..0.05) * side,
        ry: rng.random_range(0.18..0.24) * side,
        rx: rng.random_range(0.18..0.24) * side,
        cos: hc,
        sin: hs,
    };
    let mut thickness = rng.random_range(0.05..0.07) * side;
    if sick {
        thickness *= SICK_THICKENING;
    }
    let inner = outer.shrunk(thickness);
    let tissue = rng.random_range(60.0..90.0);
    let muscle = rng.random_range(170.0..215.0);
    let blood = rng.random_range(110.0..140.0);

    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            let mut inside = false;
            for a in 0..SS {
                for b in 0..SS {
                    let y = i as f64 + (a as f64 + 0.5) / SS as f64;
                    let x = j as f64 + (b as f64 + 0.5) / SS as f64;
                    acc += if inner.rho2(y, x) < 1.0 {
                        blood
                    } else if outer.rho2(y, x) < 1.0 {
                        muscle
                    } else if body.rho2(y, x) < 1.0 {
                        tissue
                    } else {
                        0.0
                    };
                    inside |= body.rho2(y, x) < 1.0;
                }
            }
            let mut v = acc / (SS * SS) as f64;
            if inside {
                let n: f64 = rng.sample(StandardNormal);
                v += 2.0 * n;
            }
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// File name of phantom `i`.
pub fn phantom_name(i: usize) -> String {
    format!("phantom_{i:05}.png")
}

/// Writes `n` seeded phantoms of `size = (H, W)` to `out_dir`, plus
/// `labels.csv` in conditional mode.
pub fn generate_phantom_dataset(n: usize, size: (usize, usize), seed: u64, conditional: bool, out_dir: &Path) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("phantom count must be positive".into()));
    }
    let (h, w) = size;
    if h < 8 || w < 8 {
        return Err(Error::Config(format!("phantom size {h}x{w} is below 8x8")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut labels = Vec::new();
    for i in 0..n {
        let name = phantom_name(i);
        let mut rng = record_rng(seed, &name, 0);
        let label = if conditional && rng.random_bool(0.5) {
            Label::Sick
        } else {
            Label::Normal
        };
        let pixels = render(h, w, label == Label::Sick, &mut rng);
        write_gray_png(&out_dir.join(&name), w, h, pixels)?;
        if conditional {
            labels.push((name, label));
        }
    }
    if conditional {
        write_labels(out_dir, &labels)?;
    }
    Ok(())
}
