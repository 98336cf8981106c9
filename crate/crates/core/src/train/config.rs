use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::arch::{ArchOptions, Preset, Scale};
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Every training hyperparameter, with preset defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub scale: Scale,
    pub epochs: usize,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub clip_norm: f64,
    pub patience: usize,
    pub plateau_eps: f64,
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub perceptual_seed: u64,
    pub sn_iters: usize,
    pub sn_warmup: usize,
    pub residual_blocks: usize,
    pub slope: f64,
    pub relu_baseline: bool,
    pub guided: bool,
    pub refine_channels: usize,
    pub degrade_factor: usize,
    pub disc_steps: usize,
    pub split_ratio: f64,
    pub augment: AugmentConfig,
    /// Steps between σ measurements of normalized weights; 0 disables.
    pub sigma_interval: u64,
    /// Stop once this many total steps have run.
    pub max_steps: Option<u64>,
}

/// Keys that only control how long a run lasts or how often it reports;
/// they may change between a checkpoint and its resumption.
const RUN_CONTROL: [&str; 6] = [
    "epochs",
    "patience",
    "plateau_eps",
    "checkpoint_interval",
    "sigma_interval",
    "max_steps",
];

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        TrainConfig {
            preset,
            scale: Scale::ONE,
            epochs: 40,
            batch_size: preset.default_batch_size(),
            latent_dim: 100,
            gen_lr: 1e-4,
            disc_lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            clip_norm: 1.0,
            patience: 5,
            plateau_eps: 1e-3,
            checkpoint_interval: 5,
            seed: 0,
            deterministic: true,
            perceptual_seed: 7,
            sn_iters: 1,
            sn_warmup: 200,
            residual_blocks: 4,
            slope: crate::nn::DEFAULT_SLOPE,
            relu_baseline: false,
            guided: true,
            refine_channels: 16,
            degrade_factor: 2,
            disc_steps: 1,
            split_ratio: 0.7,
            augment: AugmentConfig::standard(),
            sigma_interval: 1,
            max_steps: None,
        }
    }

    pub fn arch_options(&self) -> ArchOptions {
        ArchOptions {
            latent_dim: self.latent_dim,
            slope: self.slope,
            relu_baseline: self.relu_baseline,
            residual_blocks: self.residual_blocks,
            guided: self.guided,
            refine_channels: self.refine_channels,
        }
    }

    /// Generator output side length.
    pub fn image_size(&self) -> Result<usize> {
        self.scale.apply(self.preset.native_size(), "image size")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 || self.latent_dim == 0 || self.patience == 0 {
            return bad("batch_size, epochs, latent_dim and patience must all be at least 1".into());
        }
        if !(self.gen_lr >= 0.0 && self.disc_lr >= 0.0) {
            return bad(format!("learning rates must be >= 0 (gen {}, disc {})", self.gen_lr, self.disc_lr));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.plateau_eps > 0.0) {
            return bad(format!("plateau_eps must be positive, got {}", self.plateau_eps));
        }
        if self.disc_steps == 0 {
            return bad("disc_steps must be at least 1".into());
        }
        if self.degrade_factor < 2 {
            return bad(format!("degrade_factor must be >= 2, got {}", self.degrade_factor));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio {} outside (0, 1)", self.split_ratio));
        }
        self.weights.validate()?;
        self.augment.validate()?;
        let opts = self.arch_options();
        self.preset.generator(self.scale, &opts)?;
        self.preset.discriminator(self.scale, &opts)?;
        Ok(())
    }

    /// All keys in a fixed order, as `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.augment;
        vec![
            ("model", self.preset.name().to_string()),
            ("scale", self.scale.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("gen_lr", self.gen_lr.to_string()),
            ("disc_lr", self.disc_lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("w_adv", self.weights.adv.to_string()),
            ("w_pix", self.weights.pix.to_string()),
            ("w_perc", self.weights.perc.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("patience", self.patience.to_string()),
            ("plateau_eps", self.plateau_eps.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("seed", self.seed.to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("perceptual_seed", self.perceptual_seed.to_string()),
            ("sn_iters", self.sn_iters.to_string()),
            ("sn_warmup", self.sn_warmup.to_string()),
            ("residual_blocks", self.residual_blocks.to_string()),
            ("slope", self.slope.to_string()),
            ("relu_baseline", self.relu_baseline.to_string()),
            ("guided", self.guided.to_string()),
            ("refine_channels", self.refine_channels.to_string()),
            ("degrade_factor", self.degrade_factor.to_string()),
            ("disc_steps", self.disc_steps.to_string()),
            ("split_ratio", self.split_ratio.to_string()),
            ("aug_rotation", a.rotation_deg.to_string()),
            ("aug_flip_h", a.flip_horizontal.to_string()),
            ("aug_flip_v", a.flip_vertical.to_string()),
            ("aug_crop", a.crop_fraction.to_string()),
            ("aug_zoom", a.zoom_max.to_string()),
            ("sigma_interval", self.sigma_interval.to_string()),
            ("max_steps", self.max_steps.map_or("none".to_string(), |v| v.to_string())),
        ]
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        let v = value.trim();
        match key.trim() {
            "model" => self.preset = v.parse()?,
            "scale" => self.scale = v.parse()?,
            "epochs" => self.epochs = p(key, v)?,
            "batch_size" => self.batch_size = p(key, v)?,
            "latent_dim" => self.latent_dim = p(key, v)?,
            "gen_lr" => self.gen_lr = p(key, v)?,
            "disc_lr" => self.disc_lr = p(key, v)?,
            "beta1" => self.beta1 = p(key, v)?,
            "beta2" => self.beta2 = p(key, v)?,
            "adam_eps" => self.adam_eps = p(key, v)?,
            "w_adv" => self.weights.adv = p(key, v)?,
            "w_pix" => self.weights.pix = p(key, v)?,
            "w_perc" => self.weights.perc = p(key, v)?,
            "clip_norm" => self.clip_norm = p(key, v)?,
            "patience" => self.patience = p(key, v)?,
            "plateau_eps" => self.plateau_eps = p(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = p(key, v)?,
            "seed" => self.seed = p(key, v)?,
            "deterministic" => self.deterministic = p(key, v)?,
            "perceptual_seed" => self.perceptual_seed = p(key, v)?,
            "sn_iters" => self.sn_iters = p(key, v)?,
            "sn_warmup" => self.sn_warmup = p(key, v)?,
            "residual_blocks" => self.residual_blocks = p(key, v)?,
            "slope" => self.slope = p(key, v)?,
            "relu_baseline" => self.relu_baseline = p(key, v)?,
            "guided" => self.guided = p(key, v)?,
            "refine_channels" => self.refine_channels = p(key, v)?,
            "degrade_factor" => self.degrade_factor = p(key, v)?,
            "disc_steps" => self.disc_steps = p(key, v)?,
            "split_ratio" => self.split_ratio = p(key, v)?,
            "aug_rotation" => self.augment.rotation_deg = p(key, v)?,
            "aug_flip_h" => self.augment.flip_horizontal = p(key, v)?,
            "aug_flip_v" => self.augment.flip_vertical = p(key, v)?,
            "aug_crop" => self.augment.crop_fraction = p(key, v)?,
            "aug_zoom" => self.augment.zoom_max = p(key, v)?,
            "sigma_interval" => self.sigma_interval = p(key, v)?,
            "max_steps" => {
                self.max_steps = if v == "none" { None } else { Some(p(key, v)?) };
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. A `model` line is applied first so the
    /// other keys override that preset.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        let pairs = parse_kv(text)?;
        if let Some((_, m)) = pairs.iter().find(|(k, _)| k == "model") {
            let scale = self.scale;
            *self = TrainConfig::preset(m.parse()?);
            self.scale = scale;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "model") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = TrainConfig::preset(Preset::SoupBaseline);
        c.apply_kv(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }

    /// Hex SHA-256 prefix over every key that affects the computation.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !RUN_CONTROL.contains(&k) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Splits `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_defaults() {
        assert_eq!(TrainConfig::preset(Preset::SoupOptimized).batch_size, 32);
        assert_eq!(TrainConfig::preset(Preset::CsrBaseline).batch_size, 64);
        let c = TrainConfig::preset(Preset::CsrOptimized);
        assert_eq!((c.gen_lr, c.disc_lr, c.latent_dim, c.epochs), (1e-4, 2e-4, 100, 40));
    }

    #[test]
    fn kv_round_trip() {
        let mut c = TrainConfig::preset(Preset::CsrOptimized);
        c.scale = "4/25".parse().unwrap();
        c.gen_lr = 3.3e-4;
        c.max_steps = Some(12);
        let back = TrainConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn file_model_line_sets_preset_then_overrides() {
        let c = TrainConfig::from_kv("batch_size = 3\nmodel = csr-baseline # preset\n").unwrap();
        assert_eq!(c.preset, Preset::CsrBaseline);
        assert_eq!(c.batch_size, 3);
        assert!(TrainConfig::from_kv("bogus = 1").is_err());
        assert!(TrainConfig::from_kv("epochs 3").is_err());
    }

    #[test]
    fn hash_ignores_run_control() {
        let a = TrainConfig::preset(Preset::CsrOptimized);
        let mut b = a.clone();
        b.max_steps = Some(5);
        b.epochs = 2;
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation_names_problem() {
        let mut c = TrainConfig::preset(Preset::SoupBaseline);
        c.scale = "1/3".parse().unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.scale = "1/8".parse().unwrap();
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
