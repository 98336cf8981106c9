//! Adversarial, pixel and perceptual losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::DEFAULT_SLOPE;
use crate::tensor::{ConvGeometry, Tape, Tensor, Var};

/// Probability clamp inside binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub adv: f64,
    pub pix: f64,
    pub perc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adv: 1e-3,
            pix: 1.0,
            perc: 6e-3,
        }
    }
}

impl LossWeights {
    pub fn new(adv: f64, pix: f64, perc: f64) -> Result<Self> {
        let w = LossWeights { adv, pix, perc };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.adv, self.pix, self.perc];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        LossWeights {
            adv: self.adv * k,
            pix: self.pix * k,
            perc: self.perc * k,
        }
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities `p` against `labels`.
pub fn bce_loss(tape: &mut Tape, p: Var, labels: &[f64]) -> Result<Var> {
    tape.bce(p, labels, BCE_EPS)
}

/// Mean absolute error.
pub fn pixel_loss(tape: &mut Tape, generated: Var, target: Var) -> Result<Var> {
    same_shape(tape, generated, target, "pixel loss")?;
    let d = tape.sub(generated, target)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Frozen three-stage conv + LeakyReLU feature stack.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor {
    stages: Vec<(Tensor, Tensor, ConvGeometry)>,
}

/// `(in, out, kernel, stride, padding)` of the default stages.
const STAGES: [(usize, usize, usize, usize, usize); 3] = [(1, 8, 3, 1, 1), (8, 16, 4, 2, 1), (16, 32, 4, 2, 1)];

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = STAGES
            .iter()
            .map(|&(cin, cout, k, s, p)| {
                let fan_in = (cin * k * k) as f64;
                let std = (2.0 / ((1.0 + DEFAULT_SLOPE * DEFAULT_SLOPE) * fan_in)).sqrt();
                (
                    Tensor::randn(&[cout, cin, k, k], std, &mut rng),
                    Tensor::zeros(&[cout]),
                    ConvGeometry::new(s, p),
                )
            })
            .collect();
        PerceptualExtractor { stages }
    }

    /// Externally supplied `(weight, bias, geometry)` stages, e.g. from a
    /// pretrained network. The first stage must take one channel.
    pub fn from_weights(stages: Vec<(Tensor, Tensor, ConvGeometry)>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Config("perceptual extractor needs at least one stage".into()));
        }
        let mut channels = 1;
        for (i, (w, b, _)) in stages.iter().enumerate() {
            if w.rank() != 4 || w.dim(1) != channels || b.shape() != [w.dim(0)] {
                return Err(Error::Shape(format!(
                    "extractor stage {i}: weight {:?}, bias {:?}, expected {channels} input channels",
                    w.shape(),
                    b.shape()
                )));
            }
            channels = w.dim(0);
        }
        Ok(PerceptualExtractor { stages })
    }

    pub fn stages(&self) -> &[(Tensor, Tensor, ConvGeometry)] {
        &self.stages
    }

    /// Feature maps after every stage.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut taps = Vec::with_capacity(self.stages.len());
        for (w, b, g) in &self.stages {
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let y = tape.conv2d(h, wv, *g)?;
            let y = tape.add_bias(y, bv)?;
            h = tape.leaky_relu(y, DEFAULT_SLOPE);
            taps.push(h);
        }
        Ok(taps)
    }
}

/// Mean squared feature difference averaged over tap points. The target is
/// detached, so gradient reaches `generated` only.
pub fn perceptual_loss(
    tape: &mut Tape,
    generated: Var,
    target: Var,
    extractor: &PerceptualExtractor,
) -> Result<Var> {
    same_shape(tape, generated, target, "perceptual loss")?;
    if tape.shape(generated).get(1) != Some(&1) {
        return Err(Error::Shape(format!(
            "perceptual loss expects single-channel NCHW images, got {:?}",
            tape.shape(generated)
        )));
    }
    let target = tape.detach(target);
    let fg = extractor.features(tape, generated)?;
    let ft = extractor.features(tape, target)?;
    let mut total: Option<Var> = None;
    for (a, b) in fg.into_iter().zip(ft) {
        let d = tape.sub(a, b)?;
        let sq = tape.mul(d, d)?;
        let m = tape.mean(sq);
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    let n = extractor.stages.len() as f64;
    Ok(tape.scale(total.expect("extractor has stages"), 1.0 / n))
}

/// Combined generator objective and the values of its terms.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub total: Var,
    pub adv: f64,
    pub pix: f64,
    pub perc: f64,
}

/// `w_adv·bce(d_fake, 1) + w_pix·pixel + w_perc·perceptual`. Terms with
/// zero weight are not evaluated and report 0.
pub fn combined_generator_loss(
    tape: &mut Tape,
    d_out_on_fake: Var,
    generated: Var,
    target: Var,
    weights: &LossWeights,
    extractor: &PerceptualExtractor,
) -> Result<GeneratorLoss> {
    weights.validate()?;
    let mut total: Option<Var> = None;
    let mut parts = [0.0; 3];
    let mut push = |tape: &mut Tape, v: Var, w: f64| -> Result<()> {
        let s = tape.scale(v, w);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
        Ok(())
    };
    if weights.adv > 0.0 {
        let ones = vec![1.0; tape.value(d_out_on_fake).numel()];
        let l = bce_loss(tape, d_out_on_fake, &ones)?;
        parts[0] = tape.value(l).data()[0];
        push(tape, l, weights.adv)?;
    }
    if weights.pix > 0.0 {
        let l = pixel_loss(tape, generated, target)?;
        parts[1] = tape.value(l).data()[0];
        push(tape, l, weights.pix)?;
    }
    if weights.perc > 0.0 {
        let l = perceptual_loss(tape, generated, target, extractor)?;
        parts[2] = tape.value(l).data()[0];
        push(tape, l, weights.perc)?;
    }
    Ok(GeneratorLoss {
        total: total.expect("validated weights have a positive entry"),
        adv: parts[0],
        pix: parts[1],
        perc: parts[2],
    })
}
