use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use msrg::arch::{Preset, Scale};
use msrg::data::{
    dataset_hash, generate_phantom_dataset, image_dims, list_images, load_and_preprocess, DatasetSpec, Label,
};
use msrg::metrics::{evaluate_pairs, SsimMode};
use msrg::train::{
    load_checkpoint, parse_kv, reconstruct_dir, resume, run, CheckpointDir, ReconstructOptions, StopReason,
    TrainConfig, TrainState,
};
use msrg::{Error, Result};

#[derive(Parser)]
#[command(name = "msrg", version, about = "Train, evaluate and apply SOUP-GAN / CSR-GAN super-resolution models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic cardiac phantom dataset.
    Phantom(PhantomArgs),
    /// Train a model preset on an image directory.
    Train(TrainArgs),
    /// Compare generated images with references (PSNR / SSIM).
    Eval(EvalArgs),
    /// Run a trained generator over a directory of images.
    Reconstruct(ReconstructArgs),
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size component `{v}`"));
    Ok((p(h)?, p(w)?))
}

fn parse_label(s: &str) -> std::result::Result<Label, String> {
    Label::parse(s).ok_or_else(|| format!("label must be 0 or 1, got `{s}`"))
}

fn parse_set(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    n: usize,
    /// Image size as HxW.
    #[arg(long, value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Assign Normal/Sick labels and write labels.csv.
    #[arg(long)]
    conditional: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// soup-baseline, soup-optimized, csr-baseline or csr-optimized.
    #[arg(long)]
    model: Option<Preset>,
    /// Fraction of the native resolution, e.g. 1/8. Inferred from the data
    /// when neither this flag nor the config file sets it.
    #[arg(long)]
    scale: Option<Scale>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gen_lr: Option<f64>,
    #[arg(long)]
    disc_lr: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Any config key, as key=value. Repeatable.
    #[arg(long = "set", value_parser = parse_set)]
    set: Vec<(String, String)>,
    /// Resize images to the model size instead of requiring a match.
    #[arg(long)]
    resize: bool,
    /// Continue from this checkpoint; logs are appended.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    gen: PathBuf,
    #[arg(long, default_value = "windowed")]
    mode: SsimMode,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "unknown")]
    model: String,
    #[arg(long, default_value = "eval")]
    phase: String,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write input | reconstruction | reference strips under out/grid.
    #[arg(long)]
    grid: bool,
    /// Inputs are already degraded; feed them to the generator unchanged.
    #[arg(long)]
    as_is: bool,
    /// Condition label for images missing from labels.csv.
    #[arg(long, value_parser = parse_label)]
    label: Option<Label>,
    /// Also write the degraded inputs here.
    #[arg(long)]
    degraded_out: Option<PathBuf>,
}

fn threads() -> Result<usize> {
    match std::env::var("MSRG_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("MSRG_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(1),
    }
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    generate_phantom_dataset(a.n, a.size, a.seed, a.conditional, &a.out)?;
    println!("wrote {} phantoms ({}x{}) to {}", a.n, a.size.0, a.size.1, a.out.display());
    Ok(())
}

/// Preset, then config file, then flags.
fn resolve_config(a: &TrainArgs) -> Result<(TrainConfig, bool)> {
    let file_pairs = match &a.config {
        Some(p) => parse_kv(&fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)?,
        None => Vec::new(),
    };
    let file_model = file_pairs.iter().find(|(k, _)| k == "model").map(|(_, v)| v.clone());
    let preset = match (a.model, file_model) {
        (Some(m), _) => m,
        (None, Some(m)) => m.parse()?,
        (None, None) => return Err(Error::Config("no model: pass --model or set `model` in the config file".into())),
    };
    let mut c = TrainConfig::preset(preset);
    let mut scale_set = false;
    for (k, v) in file_pairs.iter().filter(|(k, _)| k != "model") {
        scale_set |= k == "scale";
        c.set(k, v)?;
    }
    if let Some(s) = a.scale {
        c.scale = s;
        scale_set = true;
    }
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.gen_lr {
        c.gen_lr = v;
    }
    if let Some(v) = a.disc_lr {
        c.disc_lr = v;
    }
    if let Some(v) = a.max_steps {
        c.max_steps = Some(v);
    }
    for (k, v) in &a.set {
        if k == "model" {
            return Err(Error::Config("use --model to choose the preset".into()));
        }
        scale_set |= k == "scale";
        c.set(k, v)?;
    }
    Ok((c, scale_set))
}

fn write_manifest(path: &Path, c: &TrainConfig, data: &Path, data_hash: &str, out: &Path, resume: Option<&Path>) -> Result<()> {
    let mut m = String::new();
    let _ = writeln!(m, "# msrg run manifest; usable as --config to repeat the run");
    let _ = writeln!(m, "# tool_version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "# config_hash = {}", c.hash());
    let _ = writeln!(m, "# master_seed = {}", c.seed);
    let _ = writeln!(m, "# perceptual_seed = {}", c.perceptual_seed);
    let _ = writeln!(m, "# data = {}", data.display());
    let _ = writeln!(m, "# data_sha256 = {data_hash}");
    let _ = writeln!(m, "# out = {}", out.display());
    let _ = writeln!(m, "# checkpoints = {}", out.join("checkpoints").display());
    if let Some(r) = resume {
        let _ = writeln!(m, "# resumed_from = {}", r.display());
    }
    m.push_str(&c.to_kv());
    fs::write(path, m).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (mut c, scale_set) = resolve_config(&a)?;
    if !a.data.is_dir() {
        return Err(Error::Data(format!("data directory {} does not exist", a.data.display())));
    }
    let names = list_images(&a.data)?;
    let first = names
        .first()
        .ok_or_else(|| Error::Data(format!("no images in {}", a.data.display())))?;
    let (h, w) = image_dims(&a.data.join(first))?;
    if !scale_set {
        if h != w {
            return Err(Error::Config(format!(
                "cannot infer a scale from non-square {h}x{w} images; pass --scale"
            )));
        }
        c.scale = c.preset.scale_for_size(h)?;
    }
    c.validate()?;
    let size = c.image_size()?;
    if !a.resize {
        for n in &names {
            let (ih, iw) = image_dims(&a.data.join(n))?;
            if (ih, iw) != (size, size) {
                return Err(Error::Config(format!(
                    "{n} is {ih}x{iw} but {} at scale {} needs {size}x{size} images (pass --resize to resample)",
                    c.preset, c.scale
                )));
            }
        }
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::Config(format!("cannot create {}: {e}", a.out.display())))?;
    let hash = dataset_hash(&a.data)?;
    write_manifest(&a.out.join("manifest.txt"), &c, &a.data, &hash, &a.out, a.resume.as_deref())?;

    let mut spec = DatasetSpec::new(&a.data, (size, size));
    spec.conditional = c.preset.conditional();
    spec.seed = c.seed;
    spec.split_ratio = c.split_ratio;
    let ds = load_and_preprocess(&spec)?;
    for (p, why) in &ds.failures {
        eprintln!("warning: skipped {}: {why}", p.display());
    }
    let mut state = match &a.resume {
        Some(p) => resume(p, &c)?,
        None => TrainState::new(c.clone())?,
    };
    let ckpt = CheckpointDir {
        dir: a.out.join("checkpoints"),
    };
    let started = state.step;
    let outcome = run(&mut state, &ds.records, Some(&ckpt))?;
    outcome.log.write(&a.out, a.resume.is_some())?;
    let why = match outcome.stop {
        StopReason::Completed => "epoch budget reached",
        StopReason::EarlyStopped => "loss plateau",
        StopReason::MaxSteps => "step budget reached",
    };
    println!(
        "{}: ran steps {}..{} (stopped in epoch {}, {why}); best validation SSIM {} at epoch {}",
        c.preset,
        started + 1,
        state.step,
        state.epoch,
        state.best_ssim,
        state.best_epoch
    );
    println!("checkpoints in {}", ckpt.dir.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut report = evaluate_pairs(&a.reference, &a.gen, 255.0, a.mode)?;
    report.model = a.model;
    report.phase = a.phase;
    let csv = report.to_csv();
    match &a.out {
        Some(p) => {
            fs::write(p, &csv).map_err(|e| Error::Config(format!("cannot write {}: {e}", p.display())))?;
            let (pm, _) = report.psnr_stats();
            let (sm, _) = report.ssim_stats();
            println!("{} images: mean PSNR {pm} dB, mean SSIM {sm}", report.rows.len());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_reconstruct(a: ReconstructArgs) -> Result<()> {
    let state = load_checkpoint(&a.ckpt)?;
    let opts = ReconstructOptions {
        grid: a.grid,
        as_is: a.as_is,
        label: a.label,
        degraded_dir: a.degraded_out,
    };
    let written = reconstruct_dir(&state.gen, &state.config, &a.input, &a.out, &opts)?;
    println!("wrote {} images to {}", written.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = threads().and_then(|n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    });
    let result = result.and_then(|()| match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
