//! SOUP-GAN and CSR-GAN generator/discriminator builders.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Binder, ConvSpec, Init, LayerKind, LayerNode, LayerSpec, DEFAULT_SLOPE};
use crate::tensor::{Tape, Tensor, Var};

/// Positive rational multiplier applied to every spatial size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Scale {
    num: u64,
    den: u64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Scale {
    pub const ONE: Scale = Scale { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("scale {num}/{den} must be positive")));
        }
        let g = gcd(num, den);
        Ok(Scale {
            num: num / g,
            den: den / g,
        })
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    /// `size · scale`, which must be a positive integer.
    pub fn apply(&self, size: usize, what: &str) -> Result<usize> {
        let p = size as u64 * self.num;
        if p % self.den != 0 {
            return Err(Error::Config(format!(
                "scale {self} turns {what} {size} into the non-integral {p}/{}",
                self.den
            )));
        }
        Ok((p / self.den) as usize)
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse scale `{s}`; expected `n` or `n/d`"));
        let (n, d) = match s.trim().split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        Scale::new(n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Soup,
    Csr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    SoupBaseline,
    SoupOptimized,
    CsrBaseline,
    CsrOptimized,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::SoupBaseline,
        Preset::SoupOptimized,
        Preset::CsrBaseline,
        Preset::CsrOptimized,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::SoupBaseline => "soup-baseline",
            Preset::SoupOptimized => "soup-optimized",
            Preset::CsrBaseline => "csr-baseline",
            Preset::CsrOptimized => "csr-optimized",
        }
    }

    pub fn family(&self) -> Family {
        match self {
            Preset::SoupBaseline | Preset::SoupOptimized => Family::Soup,
            Preset::CsrBaseline | Preset::CsrOptimized => Family::Csr,
        }
    }

    pub fn optimized(&self) -> bool {
        matches!(self, Preset::SoupOptimized | Preset::CsrOptimized)
    }

    pub fn conditional(&self) -> bool {
        self.family() == Family::Csr
    }

    /// Output side length at scale 1.
    pub fn native_size(&self) -> usize {
        match self.family() {
            Family::Soup => 256,
            Family::Csr => 200,
        }
    }

    pub fn default_batch_size(&self) -> usize {
        match self.family() {
            Family::Soup => 32,
            Family::Csr => 64,
        }
    }

    /// The scale whose generator output is `size` pixels on a side, if the
    /// resulting network is well formed.
    pub fn scale_for_size(&self, size: usize) -> Result<Scale> {
        let s = Scale::new(size as u64, self.native_size() as u64)?;
        self.generator(s, &ArchOptions::default())?;
        self.discriminator(s, &ArchOptions::default())?;
        Ok(s)
    }

    pub fn generator(&self, scale: Scale, opts: &ArchOptions) -> Result<NetworkSpec> {
        match self.family() {
            Family::Soup => build_soup_generator(self.optimized(), scale, opts),
            Family::Csr => build_csr_generator(self.optimized(), scale, opts),
        }
    }

    pub fn discriminator(&self, scale: Scale, opts: &ArchOptions) -> Result<NetworkSpec> {
        match self.family() {
            Family::Soup => build_soup_discriminator(self.optimized(), scale, opts),
            Family::Csr => build_csr_discriminator(self.optimized(), scale, opts),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!("unknown model preset `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Construction knobs the paper leaves open.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchOptions {
    pub latent_dim: usize,
    pub slope: f64,
    /// Use plain ReLU instead of LeakyReLU in the baseline presets.
    pub relu_baseline: bool,
    pub residual_blocks: usize,
    /// Append the image-guided refinement head to generators.
    pub guided: bool,
    pub refine_channels: usize,
}

impl Default for ArchOptions {
    fn default() -> Self {
        ArchOptions {
            latent_dim: 100,
            slope: DEFAULT_SLOPE,
            relu_baseline: false,
            residual_blocks: 4,
            guided: true,
            refine_channels: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Generator,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub role: Role,
    pub conditional: bool,
    pub layers: Vec<LayerSpec>,
    /// Index of the first refinement-head layer; it receives the body output
    /// with the guide image stacked as an extra channel.
    pub head_start: Option<usize>,
    /// Input without conditioning, batch size 1.
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub scale: Scale,
}

impl NetworkSpec {
    fn new(name: &str, role: Role, conditional: bool, layers: Vec<LayerSpec>, input: Vec<usize>, scale: Scale) -> Result<Self> {
        let mut spec = NetworkSpec {
            name: name.to_string(),
            role,
            conditional,
            layers,
            head_start: None,
            input_shape: input,
            output_shape: Vec::new(),
            scale,
        };
        spec.output_shape = spec.trace()?.last().map(|(_, s)| s.clone()).unwrap_or_default();
        Ok(spec)
    }

    /// Shape the first layer actually sees, conditioning included.
    pub fn layer_input_shape(&self) -> Vec<usize> {
        let mut s = self.input_shape.clone();
        if self.conditional {
            s[1] += 1;
        }
        s
    }

    /// Shape after every layer, in order, for a batch of one.
    pub fn trace(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut shape = self.layer_input_shape();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            if Some(i) == self.head_start {
                shape[1] += 1;
            }
            shape = l.output_shape(&shape).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", self.name)),
                e => e,
            })?;
            out.push((l.name.clone(), shape.clone()));
        }
        Ok(out)
    }

    pub fn guided(&self) -> bool {
        self.head_start.is_some()
    }

    pub fn find(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    fn with_head(mut self, opts: &ArchOptions) -> Result<Self> {
        let r = opts.refine_channels;
        self.head_start = Some(self.layers.len());
        self.layers.extend([
            LayerSpec::new("refine1", LayerKind::Conv2d(ConvSpec::same(2, r))),
            LayerSpec::new("refine1_act", LayerKind::LeakyRelu { slope: opts.slope }),
            LayerSpec::new("refine2", LayerKind::Conv2d(ConvSpec::same(r, r))),
            LayerSpec::new("refine2_act", LayerKind::LeakyRelu { slope: opts.slope }),
            LayerSpec::new("refine3", LayerKind::Conv2d(ConvSpec::same(r, 1))).with_init(Init::Zero),
        ]);
        self.output_shape = self.trace()?.last().map(|(_, s)| s.clone()).unwrap_or_default();
        Ok(self)
    }
}

fn act(name: &str, opts: &ArchOptions, optimized: bool) -> LayerSpec {
    let kind = if opts.relu_baseline && !optimized {
        LayerKind::Relu
    } else {
        LayerKind::LeakyRelu { slope: opts.slope }
    };
    LayerSpec::new(name, kind)
}

fn dense(name: &str, i: usize, o: usize) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Dense {
            in_features: i,
            out_features: o,
        },
    )
}

fn check_opts(opts: &ArchOptions) -> Result<()> {
    if opts.latent_dim == 0 {
        return Err(Error::Config("latent_dim must be at least 1".into()));
    }
    if opts.guided && opts.refine_channels == 0 {
        return Err(Error::Config("refine_channels must be at least 1".into()));
    }
    Ok(())
}

/// Dense → 256-channel map at 64·scale → two stride-2 transposed convs →
/// tanh. The optimized variant doubles the first stage width and follows
/// each upsampling stage with a 3×3 conv.
pub fn build_soup_generator(optimized: bool, scale: Scale, opts: &ArchOptions) -> Result<NetworkSpec> {
    check_opts(opts)?;
    let b = scale.apply(64, "base size")?;
    let mut layers = vec![
        dense("dense", opts.latent_dim, 256 * b * b),
        LayerSpec::new(
            "reshape",
            LayerKind::Reshape {
                channels: 256,
                height: b,
                width: b,
            },
        ),
    ];
    if optimized {
        layers.extend([
            LayerSpec::new("up1", LayerKind::ConvTranspose2d(ConvSpec::resample(256, 256))),
            act("up1_act", opts, optimized),
            LayerSpec::new("conv1", LayerKind::Conv2d(ConvSpec::same(256, 256))),
            act("conv1_act", opts, optimized),
            LayerSpec::new("up2", LayerKind::ConvTranspose2d(ConvSpec::resample(256, 32))),
            act("up2_act", opts, optimized),
            LayerSpec::new("conv2", LayerKind::Conv2d(ConvSpec::same(32, 1))),
        ]);
    } else {
        layers.extend([
            LayerSpec::new("up1", LayerKind::ConvTranspose2d(ConvSpec::resample(256, 128))),
            act("up1_act", opts, optimized),
            LayerSpec::new("up2", LayerKind::ConvTranspose2d(ConvSpec::resample(128, 1))),
        ]);
    }
    layers.push(LayerSpec::new("tanh", LayerKind::Tanh));
    let name = if optimized { "soup-generator-optimized" } else { "soup-generator" };
    let spec = NetworkSpec::new(name, Role::Generator, false, layers, vec![1, opts.latent_dim], scale)?;
    if opts.guided {
        spec.with_head(opts)
    } else {
        Ok(spec)
    }
}

/// Three stride-2 convs 64→128→256 down to 32·scale, flatten, dense,
/// sigmoid. The optimized variant doubles the first width, adds a stride-1
/// stage and normalizes every weight.
pub fn build_soup_discriminator(optimized: bool, scale: Scale, opts: &ArchOptions) -> Result<NetworkSpec> {
    check_opts(opts)?;
    let size = scale.apply(256, "image size")?;
    let f = scale.apply(32, "final feature size")?;
    let first = if optimized { 128 } else { 64 };
    let mut layers = vec![
        LayerSpec::new("conv1", LayerKind::Conv2d(ConvSpec::resample(1, first))),
        act("conv1_act", opts, optimized),
        LayerSpec::new("conv2", LayerKind::Conv2d(ConvSpec::resample(first, 128))),
        act("conv2_act", opts, optimized),
        LayerSpec::new("conv3", LayerKind::Conv2d(ConvSpec::resample(128, 256))),
        act("conv3_act", opts, optimized),
    ];
    if optimized {
        layers.extend([
            LayerSpec::new("conv4", LayerKind::Conv2d(ConvSpec::same(256, 256))),
            act("conv4_act", opts, optimized),
        ]);
    }
    layers.extend([
        LayerSpec::new("flatten", LayerKind::Flatten),
        dense("dense", 256 * f * f, 1),
        LayerSpec::new("sigmoid", LayerKind::Sigmoid),
    ]);
    let layers = layers.into_iter().map(|l| l.with_spectral_norm(optimized)).collect();
    let name = if optimized { "soup-discriminator-optimized" } else { "soup-discriminator" };
    NetworkSpec::new(name, Role::Discriminator, false, layers, vec![1, 1, size, size], scale)
}

/// `z ⊕ condition` → dense → 128-channel map at 25·scale → three stride-2
/// transposed convs → tanh. The optimized variant inserts residual blocks
/// right after the reshape.
pub fn build_csr_generator(optimized: bool, scale: Scale, opts: &ArchOptions) -> Result<NetworkSpec> {
    check_opts(opts)?;
    let b = scale.apply(25, "base size")?;
    let mut layers = vec![
        dense("dense", opts.latent_dim + 1, 128 * b * b),
        LayerSpec::new(
            "reshape",
            LayerKind::Reshape {
                channels: 128,
                height: b,
                width: b,
            },
        ),
    ];
    if optimized {
        for i in 0..opts.residual_blocks {
            layers.push(LayerSpec::new(
                format!("res{}", i + 1),
                LayerKind::ResidualBlock {
                    channels: 128,
                    slope: opts.slope,
                },
            ));
        }
    }
    layers.extend([
        LayerSpec::new("up1", LayerKind::ConvTranspose2d(ConvSpec::resample(128, 64))),
        act("up1_act", opts, optimized),
        LayerSpec::new("up2", LayerKind::ConvTranspose2d(ConvSpec::resample(64, 32))),
        act("up2_act", opts, optimized),
        LayerSpec::new("up3", LayerKind::ConvTranspose2d(ConvSpec::resample(32, 1))),
        LayerSpec::new("tanh", LayerKind::Tanh),
    ]);
    let name = if optimized { "csr-generator-optimized" } else { "csr-generator" };
    let spec = NetworkSpec::new(name, Role::Generator, true, layers, vec![1, opts.latent_dim], scale)?;
    if opts.guided {
        spec.with_head(opts)
    } else {
        Ok(spec)
    }
}

/// Image ⊕ condition plane → two stride-2 convs (64, 128) → flatten →
/// dense → sigmoid. The optimized variant adds a 3×3 conv and one
/// self-attention block at the last stage and normalizes every weight.
pub fn build_csr_discriminator(optimized: bool, scale: Scale, opts: &ArchOptions) -> Result<NetworkSpec> {
    check_opts(opts)?;
    let size = scale.apply(200, "image size")?;
    let f = scale.apply(50, "final feature size")?;
    let mut layers = vec![
        LayerSpec::new("conv1", LayerKind::Conv2d(ConvSpec::resample(2, 64))),
        act("conv1_act", opts, optimized),
        LayerSpec::new("conv2", LayerKind::Conv2d(ConvSpec::resample(64, 128))),
        act("conv2_act", opts, optimized),
    ];
    if optimized {
        layers.extend([
            LayerSpec::new("conv3", LayerKind::Conv2d(ConvSpec::same(128, 128))),
            act("conv3_act", opts, optimized),
            LayerSpec::new("attention", LayerKind::SelfAttention { channels: 128 }),
        ]);
    }
    layers.extend([
        LayerSpec::new("flatten", LayerKind::Flatten),
        dense("dense", 128 * f * f, 1),
        LayerSpec::new("sigmoid", LayerKind::Sigmoid),
    ]);
    let layers = layers.into_iter().map(|l| l.with_spectral_norm(optimized)).collect();
    let name = if optimized { "csr-discriminator-optimized" } else { "csr-discriminator" };
    NetworkSpec::new(name, Role::Discriminator, true, layers, vec![1, 1, size, size], scale)
}

/// A built network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<LayerNode>,
}

impl Network {
    pub fn build<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R, sn_warmup: usize) -> Result<Self> {
        spec.trace()?;
        let layers = spec
            .layers
            .iter()
            .map(|l| LayerNode::new(l.clone(), rng, sn_warmup))
            .collect::<Result<_>>()?;
        Ok(Network { spec, layers })
    }

    pub fn layer(&self, name: &str) -> Option<&LayerNode> {
        self.layers.iter().find(|l| l.name() == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut LayerNode> {
        self.layers.iter_mut().find(|l| l.name() == name)
    }

    fn check_condition(&self, condition: Option<&[f64]>, batch: usize) -> Result<()> {
        match (self.spec.conditional, condition) {
            (true, None) => Err(Error::Contract(format!("{} requires a condition label per sample", self.spec.name))),
            (false, Some(_)) => Err(Error::Contract(format!("{} is unconditional but got a condition", self.spec.name))),
            (true, Some(c)) if c.len() != batch => Err(Error::Shape(format!(
                "{}: {} condition labels for a batch of {batch}",
                self.spec.name,
                c.len()
            ))),
            _ => Ok(()),
        }
    }

    fn check_role(&self, role: Role) -> Result<()> {
        if self.spec.role != role {
            return Err(Error::Contract(format!("{} is not a {role:?}", self.spec.name)));
        }
        Ok(())
    }

    fn run(&self, tape: &mut Tape, mut x: Var, range: std::ops::Range<usize>, binder: &mut Binder) -> Result<Var> {
        for i in range {
            x = self.layers[i].forward(tape, x, binder, i)?;
        }
        Ok(x)
    }

    /// Generator forward; `z` is `(N, latent_dim)`, `guide` `(N, 1, H, W)`.
    pub fn generate(
        &self,
        tape: &mut Tape,
        z: Var,
        condition: Option<&[f64]>,
        guide: Option<Var>,
        binder: &mut Binder,
    ) -> Result<Var> {
        self.check_role(Role::Generator)?;
        let zs = tape.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.spec.input_shape[1] {
            return Err(Error::Shape(format!(
                "{} expects latent input [N, {}], got {zs:?}",
                self.spec.name, self.spec.input_shape[1]
            )));
        }
        let n = zs[0];
        self.check_condition(condition, n)?;
        let mut x = z;
        if let Some(c) = condition {
            let cv = tape.constant(Tensor::new(&[n, 1], c.to_vec())?);
            x = tape.concat(&[z, cv])?;
        }
        let Some(head) = self.spec.head_start else {
            if guide.is_some() {
                return Err(Error::Contract(format!("{} has no refinement head for a guide image", self.spec.name)));
            }
            return self.run(tape, x, 0..self.layers.len(), binder);
        };
        let guide = guide.ok_or_else(|| {
            Error::Contract(format!("{} is guided and needs a degraded input image", self.spec.name))
        })?;
        let mut expect = self.spec.output_shape.clone();
        expect[0] = n;
        if tape.shape(guide) != expect.as_slice() {
            return Err(Error::Shape(format!(
                "{}: guide {:?}, expected {expect:?}",
                self.spec.name,
                tape.shape(guide)
            )));
        }
        let body = self.run(tape, x, 0..head, binder)?;
        let stacked = tape.concat(&[body, guide])?;
        let r = self.run(tape, stacked, head..self.layers.len(), binder)?;
        let out = tape.add(guide, r)?;
        Ok(tape.clamp(out, -1.0, 1.0))
    }

    /// Discriminator forward: probability per sample, shape `(N, 1)`.
    pub fn discriminate(
        &self,
        tape: &mut Tape,
        image: Var,
        condition: Option<&[f64]>,
        binder: &mut Binder,
    ) -> Result<Var> {
        self.check_role(Role::Discriminator)?;
        let s = tape.shape(image).to_vec();
        if s.len() != 4 || s[1..] != self.spec.input_shape[1..] {
            return Err(Error::Shape(format!(
                "{} expects images [N, {}, {}, {}], got {s:?}",
                self.spec.name, self.spec.input_shape[1], self.spec.input_shape[2], self.spec.input_shape[3]
            )));
        }
        self.check_condition(condition, s[0])?;
        let mut x = image;
        if let Some(c) = condition {
            let plane = s[2] * s[3];
            let data: Vec<f64> = c.iter().flat_map(|&v| std::iter::repeat_n(v, plane)).collect();
            let cv = tape.constant(Tensor::new(&[s[0], 1, s[2], s[3]], data)?);
            x = tape.concat(&[image, cv])?;
        }
        self.run(tape, x, 0..self.layers.len(), binder)
    }

    /// Gradient-free generator evaluation.
    pub fn generate_tensor(&self, z: &Tensor, condition: Option<&[f64]>, guide: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let gv = guide.map(|g| tape.constant(g.clone()));
        let y = self.generate(&mut tape, zv, condition, gv, &mut Binder::new(false))?;
        Ok(tape.value(y).clone())
    }

    pub fn discriminate_tensor(&self, image: &Tensor, condition: Option<&[f64]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let y = self.discriminate(&mut tape, x, condition, &mut Binder::new(false))?;
        Ok(tape.value(y).clone())
    }

    /// Qualified names `layer.param`, in parameter order.
    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().map(move |p| format!("{}.{}", l.name(), p.name)))
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter().map(|p| &p.tensor)).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut().map(|p| &mut p.tensor))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(LayerNode::zero_grad);
    }

    pub fn accumulate_grads(&mut self, tape: &Tape, binder: &Binder) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.accumulate_grads(tape, binder, i);
        }
    }

    pub fn spectral_normalized(&self) -> bool {
        self.layers.iter().any(|l| !l.sn_state.is_empty())
    }

    /// One round of `iters` power iterations on every normalized weight.
    pub fn spectral_step(&mut self, iters: usize) {
        for l in &mut self.layers {
            l.spectral_normalize(iters);
        }
    }

    /// `(layer.param, σ(W/σ̂))` for every normalized weight.
    pub fn normalized_sigmas(&self) -> Vec<(String, f64)> {
        self.layers
            .iter()
            .flat_map(|l| {
                let names: Vec<_> = l.sn_state.iter().map(|s| format!("{}.{}", l.name(), l.params[s.param].name)).collect();
                names.into_iter().zip(l.normalized_sigmas())
            })
            .collect()
    }
}

/// Layer names and output shapes, the raw material of the shape audit.
pub fn shape_audit(spec: &NetworkSpec) -> Result<Vec<(String, Vec<usize>)>> {
    spec.trace()
}
