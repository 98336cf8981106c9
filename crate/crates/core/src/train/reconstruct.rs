use std::fs;
use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use super::engine::generate_for;
use crate::arch::Network;
use crate::data::{degrade, denormalize, list_images, normalize, read_gray, read_labels, write_gray_png, Label};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct ReconstructOptions {
    /// Also write `grid/<name>.png`: input | reconstruction | reference.
    pub grid: bool,
    /// Treat inputs as already degraded instead of degrading them first.
    pub as_is: bool,
    /// Label for conditional models when the input has no labels file.
    pub label: Option<Label>,
    /// Where to write the degraded inputs, if anywhere.
    pub degraded_dir: Option<PathBuf>,
}

fn png_name(name: &str) -> String {
    let stem = Path::new(name).file_stem().map_or(name.into(), |s| s.to_string_lossy().into_owned());
    format!("{stem}.png")
}

fn to_u8(t: &Tensor) -> Vec<u8> {
    t.data().iter().map(|&x| denormalize(x)).collect()
}

/// Runs the generator over every image in `input_dir` and writes 8-bit
/// PNGs with the same stems to `out_dir`. Returns the written names.
pub fn reconstruct_dir(
    gen: &Network,
    config: &TrainConfig,
    input_dir: &Path,
    out_dir: &Path,
    opts: &ReconstructOptions,
) -> Result<Vec<String>> {
    let size = config.image_size()?;
    let names = list_images(input_dir)?;
    if names.is_empty() {
        return Err(Error::Data(format!("no images in {}", input_dir.display())));
    }
    let labels = if config.preset.conditional() {
        let file = read_labels(input_dir)?;
        let per: Vec<f64> = names
            .iter()
            .map(|n| {
                file.as_ref()
                    .and_then(|l| l.iter().find(|(f, _)| f == n).map(|(_, lab)| *lab))
                    .or(opts.label)
                    .map(Label::value)
                    .ok_or_else(|| Error::Config(format!("{} is conditional: no label for {n} and no default label", config.preset)))
            })
            .collect::<Result<_>>()?;
        Some(per)
    } else {
        None
    };
    let mut references = Vec::with_capacity(names.len());
    let mut inputs = Vec::with_capacity(names.len());
    for n in &names {
        let path = input_dir.join(n);
        let img = read_gray(&path)?;
        if img.shape()[1..] != [size, size] {
            return Err(Error::Shape(format!(
                "{}: image is {}x{} but the checkpoint's generator produces {size}x{size}",
                path.display(),
                img.dim(1),
                img.dim(2)
            )));
        }
        let img = img.map(normalize);
        let input = if opts.as_is { img.clone() } else { degrade(&img, config.degrade_factor)? };
        references.push(img);
        inputs.push(input);
    }
    let outs = generate_for(gen, config, &names, &inputs, labels.as_deref())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if let Some(d) = &opts.degraded_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let grid_dir = out_dir.join("grid");
    if opts.grid {
        fs::create_dir_all(&grid_dir).map_err(|e| Error::io(&grid_dir, e))?;
    }
    let mut written = Vec::with_capacity(names.len());
    for ((n, (input, reference)), out) in names.iter().zip(inputs.iter().zip(&references)).zip(&outs) {
        let name = png_name(n);
        write_gray_png(&out_dir.join(&name), size, size, to_u8(out))?;
        if let Some(d) = &opts.degraded_dir {
            write_gray_png(&d.join(&name), size, size, to_u8(input))?;
        }
        if opts.grid {
            let parts = [to_u8(input), to_u8(out), to_u8(reference)];
            let mut strip = Vec::with_capacity(3 * size * size);
            for row in 0..size {
                for p in &parts {
                    strip.extend_from_slice(&p[row * size..(row + 1) * size]);
                }
            }
            write_gray_png(&grid_dir.join(&name), 3 * size, size, strip)?;
        }
        written.push(name);
    }
    Ok(written)
}
