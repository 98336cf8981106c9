use rand::Rng;

use super::spectral::{self, SIGMA_EPS};
use super::{ConvSpec, Init, LayerKind, LayerSpec, ATTENTION_DIVISOR};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Persistent power-iteration vectors for one normalized weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    /// Index into the owning layer's `params`.
    pub param: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// A layer with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub spec: LayerSpec,
    pub params: Vec<Param>,
    pub sn_state: Vec<SpectralState>,
}

/// Tracks which tape leaves hold which parameters during one forward pass.
#[derive(Debug, Default)]
pub struct Binder {
    trainable: bool,
    bound: Vec<(usize, usize, Var)>,
}

impl Binder {
    /// `trainable = false` binds parameters as constants: no gradient flows
    /// into them and nothing is recorded.
    pub fn new(trainable: bool) -> Self {
        Binder {
            trainable,
            bound: Vec::new(),
        }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn bound(&self) -> &[(usize, usize, Var)] {
        &self.bound
    }

    pub fn var(&self, slot: usize, param: usize) -> Option<Var> {
        self.bound
            .iter()
            .find(|(s, p, _)| *s == slot && *p == param)
            .map(|(_, _, v)| *v)
    }

    fn bind(&mut self, tape: &mut Tape, slot: usize, layer: &LayerNode, param: usize) -> Result<Var> {
        let value = layer.params[param].tensor.clone().with_requires_grad(self.trainable);
        let v = tape.leaf(value);
        if self.trainable {
            self.bound.push((slot, param, v));
        }
        match layer.sn_state.iter().find(|s| s.param == param) {
            Some(st) => tape.spectral_normalize(v, &st.u, &st.v, SIGMA_EPS),
            None => Ok(v),
        }
    }
}

fn kaiming_std(fan_in: usize, slope: f64) -> f64 {
    (2.0 / ((1.0 + slope * slope) * fan_in.max(1) as f64)).sqrt()
}

fn weight_tensor<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::Kaiming => Tensor::randn(shape, kaiming_std(fan_in, super::DEFAULT_SLOPE), rng),
        Init::Zero => Tensor::zeros(shape),
    }
}

fn param(name: &str, tensor: Tensor) -> Param {
    Param {
        name: name.to_string(),
        tensor,
    }
}

impl LayerNode {
    /// Initializes parameters in a fixed order from `rng`. Normalized weights
    /// get random unit `u`, `v` advanced by `sn_warmup` power iterations.
    pub fn new<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R, sn_warmup: usize) -> Result<Self> {
        let init = spec.init;
        let conv = |prefix: &str, c: &ConvSpec, transposed: bool, rng: &mut R| {
            let k2 = c.kernel * c.kernel;
            let (shape, fan_in) = if transposed {
                let per_out = k2 / (c.stride * c.stride).max(1);
                ([c.in_channels, c.out_channels, c.kernel, c.kernel], c.in_channels * per_out.max(1))
            } else {
                ([c.out_channels, c.in_channels, c.kernel, c.kernel], c.in_channels * k2)
            };
            vec![
                param(&format!("{prefix}weight"), weight_tensor(&shape, fan_in, init, rng)),
                param(&format!("{prefix}bias"), Tensor::zeros(&[c.out_channels])),
            ]
        };
        let params = match &spec.kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } => vec![
                param(
                    "weight",
                    weight_tensor(&[*out_features, *in_features], *in_features, init, rng),
                ),
                param("bias", Tensor::zeros(&[*out_features])),
            ],
            LayerKind::Conv2d(c) => conv("", c, false, rng),
            LayerKind::ConvTranspose2d(c) => conv("", c, true, rng),
            LayerKind::ResidualBlock { channels, .. } => {
                let c = ConvSpec::same(*channels, *channels);
                let mut p = conv("conv1.", &c, false, rng);
                p.extend(conv("conv2.", &c, false, rng));
                p
            }
            LayerKind::SelfAttention { channels } => {
                if *channels < ATTENTION_DIVISOR {
                    return Err(Error::Config(format!(
                        "self-attention `{}` needs at least {ATTENTION_DIVISOR} channels, got {channels}",
                        spec.name
                    )));
                }
                let inner = channels / ATTENTION_DIVISOR;
                let mut p = conv("query.", &ConvSpec::new(*channels, inner, 1, 1, 0), false, rng);
                p.extend(conv("key.", &ConvSpec::new(*channels, inner, 1, 1, 0), false, rng));
                p.extend(conv("value.", &ConvSpec::new(*channels, *channels, 1, 1, 0), false, rng));
                p.push(param("gamma", Tensor::zeros(&[1])));
                p
            }
            _ => Vec::new(),
        };
        let mut node = LayerNode {
            spec,
            params,
            sn_state: Vec::new(),
        };
        if node.spec.spectral_norm {
            for (i, p) in node.params.iter().enumerate() {
                if p.name.ends_with("weight") {
                    let (rows, cols) = matrix_dims(&p.tensor);
                    node.sn_state.push(SpectralState {
                        param: i,
                        u: spectral::unit_random(rows, rng),
                        v: spectral::unit_random(cols, rng),
                    });
                }
            }
            node.spectral_normalize(sn_warmup);
        }
        Ok(node)
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    /// Advances every persistent `u`, `v` by `iters` power iterations and
    /// returns the resulting estimates σ̂, one per normalized weight.
    pub fn spectral_normalize(&mut self, iters: usize) -> Vec<f64> {
        let params = &self.params;
        self.sn_state
            .iter_mut()
            .map(|st| {
                let w = &params[st.param].tensor;
                let (rows, cols) = matrix_dims(w);
                spectral::power_iterate(w.data(), rows, cols, &mut st.u, &mut st.v, iters)
            })
            .collect()
    }

    /// Current σ̂ per normalized weight, without iterating.
    pub fn sigma_estimates(&self) -> Vec<f64> {
        self.sn_state
            .iter()
            .map(|st| {
                let w = &self.params[st.param].tensor;
                let (rows, cols) = matrix_dims(w);
                spectral::sigma_estimate(w.data(), rows, cols, &st.u, &st.v).max(SIGMA_EPS)
            })
            .collect()
    }

    /// `W / σ̂` for parameter `param`, or the raw weight if it is not normalized.
    pub fn effective_weight(&self, param: usize) -> Tensor {
        let w = &self.params[param].tensor;
        match self.sn_state.iter().position(|s| s.param == param) {
            Some(i) => {
                let sigma = self.sigma_estimates()[i];
                w.map(|x| x / sigma)
            }
            None => w.clone(),
        }
    }

    /// Largest singular value of each effective weight `W / σ̂`, measured
    /// exactly rather than by power iteration.
    pub fn normalized_sigmas(&self) -> Vec<f64> {
        self.sn_state
            .iter()
            .zip(self.sigma_estimates())
            .map(|(st, est)| {
                let w = &self.params[st.param].tensor;
                let (rows, cols) = matrix_dims(w);
                spectral::exact_top_singular_value(w.data(), rows, cols) / est
            })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, binder: &mut Binder, slot: usize) -> Result<Var> {
        match &self.spec.kind {
            LayerKind::Dense { in_features, .. } => {
                let s = tape.shape(x);
                if s.len() != 2 || s[1] != *in_features {
                    return Err(Error::Shape(format!(
                        "dense `{}` expects [N, {in_features}], got {s:?}",
                        self.spec.name
                    )));
                }
                let w = binder.bind(tape, slot, self, 0)?;
                let b = binder.bind(tape, slot, self, 1)?;
                let wt = tape.transpose(w)?;
                let y = tape.matmul(x, wt)?;
                tape.add_bias(y, b)
            }
            LayerKind::Conv2d(c) => self.conv(tape, x, binder, slot, 0, c.geometry(), false),
            LayerKind::ConvTranspose2d(c) => self.conv(tape, x, binder, slot, 0, c.geometry(), true),
            LayerKind::LeakyRelu { slope } => Ok(tape.leaky_relu(x, *slope)),
            LayerKind::Relu => Ok(tape.relu(x)),
            LayerKind::Tanh => Ok(tape.tanh(x)),
            LayerKind::Sigmoid => Ok(tape.sigmoid(x)),
            LayerKind::Flatten => {
                let s = tape.shape(x);
                let shape = [s[0], s[1..].iter().product()];
                tape.reshape(x, &shape)
            }
            LayerKind::Reshape {
                channels,
                height,
                width,
            } => {
                let n = tape.shape(x)[0];
                tape.reshape(x, &[n, *channels, *height, *width])
            }
            LayerKind::ResidualBlock { slope, .. } => {
                let same = ConvGeometry::new(1, 1);
                let h = self.conv(tape, x, binder, slot, 0, same, false)?;
                let h = tape.leaky_relu(h, *slope);
                let h = self.conv(tape, h, binder, slot, 2, same, false)?;
                tape.add(x, h)
            }
            LayerKind::SelfAttention { .. } => Ok(self.attention(tape, x, binder, slot)?.0),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &self,
        tape: &mut Tape,
        x: Var,
        binder: &mut Binder,
        slot: usize,
        first: usize,
        geom: ConvGeometry,
        transposed: bool,
    ) -> Result<Var> {
        let w = binder.bind(tape, slot, self, first)?;
        let b = binder.bind(tape, slot, self, first + 1)?;
        let y = if transposed {
            tape.conv_transpose2d(x, w, geom)?
        } else {
            tape.conv2d(x, w, geom)?
        };
        tape.add_bias(y, b)
    }

    /// Gated attention `x + γ·(V · softmax(QᵀK)ᵀ)`; also returns the
    /// `(N, HW, HW)` attention weights.
    fn attention(&self, tape: &mut Tape, x: Var, binder: &mut Binder, slot: usize) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("self-attention needs NCHW, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let point = ConvGeometry::new(1, 0);
        let q = self.conv(tape, x, binder, slot, 0, point, false)?;
        let k = self.conv(tape, x, binder, slot, 2, point, false)?;
        let v = self.conv(tape, x, binder, slot, 4, point, false)?;
        let inner = tape.shape(q)[1];
        let q = tape.reshape(q, &[n, inner, hw])?;
        let k = tape.reshape(k, &[n, inner, hw])?;
        let v = tape.reshape(v, &[n, c, hw])?;
        let energy = tape.bmm(q, k, true, false)?;
        let attn = tape.softmax(energy);
        let mixed = tape.bmm(v, attn, false, true)?;
        let mixed = tape.reshape(mixed, &s)?;
        let gamma = binder.bind(tape, slot, self, 6)?;
        let gated = tape.scale_by(mixed, gamma)?;
        Ok((tape.add(x, gated)?, attn))
    }

    /// Attention weights of a self-attention layer for input `x`.
    pub fn attention_weights(&self, x: &Tensor) -> Result<Tensor> {
        if !matches!(self.spec.kind, LayerKind::SelfAttention { .. }) {
            return Err(Error::Contract(format!("`{}` is not a self-attention layer", self.spec.name)));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (_, attn) = self.attention(&mut tape, xv, &mut Binder::new(false), 0)?;
        Ok(tape.value(attn).clone())
    }

    /// Adds the gradients recorded on `tape` for this layer's bound
    /// parameters into their gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, binder: &Binder, slot: usize) {
        for (s, p, v) in binder.bound() {
            if *s != slot {
                continue;
            }
            if let Some(g) = tape.grad(*v) {
                let dst = self.params[*p].tensor.grad_mut();
                dst.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.grad_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// `(shape[0], rest)` view used by spectral normalization.
pub fn matrix_dims(t: &Tensor) -> (usize, usize) {
    let rows = t.dim(0);
    (rows, t.numel() / rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ConvSpec, LayerKind, LayerSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn run(layer: &LayerNode, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = layer.forward(&mut tape, xv, &mut Binder::new(false), 0).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn leaky_relu_values() {
        let l = LayerNode::new(LayerSpec::new("l", LayerKind::LeakyRelu { slope: 0.2 }), &mut rng(), 0).unwrap();
        let x = Tensor::new(&[1, 3], vec![2.0, -1.0, 0.0]).unwrap();
        let y = run(&l, &x);
        assert_eq!(y.data()[0], 2.0);
        assert!((y.data()[1] + 0.2).abs() < 1e-15);
        assert_eq!(y.data()[2], 0.0);
    }

    #[test]
    fn residual_block_with_zero_weights_is_identity() {
        let spec = LayerSpec::new(
            "res",
            LayerKind::ResidualBlock {
                channels: 64,
                slope: 0.2,
            },
        )
        .with_init(Init::Zero);
        let l = LayerNode::new(spec, &mut rng(), 0).unwrap();
        let x = Tensor::randn(&[1, 64, 16, 16], 1.0, &mut rng());
        let y = run(&l, &x);
        assert_eq!(y.shape(), &[1, 64, 16, 16]);
        assert_eq!(y, x);
    }

    #[test]
    fn attention_is_identity_at_init_and_rows_are_distributions() {
        let l = LayerNode::new(LayerSpec::new("att", LayerKind::SelfAttention { channels: 128 }), &mut rng(), 0)
            .unwrap();
        let x = Tensor::randn(&[1, 128, 8, 8], 1.0, &mut rng());
        let y = run(&l, &x);
        assert_eq!(y.shape(), &[1, 128, 8, 8]);
        assert_eq!(y, x);
        let attn = l.attention_weights(&x).unwrap();
        assert_eq!(attn.shape(), &[1, 64, 64]);
        for row in attn.data().chunks(64) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_rejects_narrow_input() {
        let spec = LayerSpec::new("att", LayerKind::SelfAttention { channels: 4 });
        assert!(matches!(LayerNode::new(spec, &mut rng(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn spectral_state_exists_and_is_unit() {
        let spec = LayerSpec::new("c", LayerKind::Conv2d(ConvSpec::resample(3, 8))).with_spectral_norm(true);
        let mut l = LayerNode::new(spec, &mut rng(), 5).unwrap();
        assert_eq!(l.sn_state.len(), 1);
        l.spectral_normalize(1);
        for st in &l.sn_state {
            let nu: f64 = st.u.iter().map(|x| x * x).sum();
            let nv: f64 = st.v.iter().map(|x| x * x).sum();
            assert!((nu - 1.0).abs() < 1e-12 && (nv - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_identity_and_diagonal() {
        let mut spec = LayerSpec::new(
            "d",
            LayerKind::Dense {
                in_features: 3,
                out_features: 3,
            },
        )
        .with_spectral_norm(true);
        spec.init = Init::Zero;
        let mut l = LayerNode::new(spec.clone(), &mut rng(), 0).unwrap();
        *l.param_mut("weight").unwrap() =
            Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let s = l.spectral_normalize(1);
        assert!((s[0] - 1.0).abs() < 1e-12);
        let eff = l.effective_weight(0);
        for (a, b) in eff.data().iter().zip(l.params[0].tensor.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        spec.kind = LayerKind::Dense {
            in_features: 2,
            out_features: 2,
        };
        let mut l = LayerNode::new(spec, &mut rng(), 0).unwrap();
        *l.param_mut("weight").unwrap() = Tensor::new(&[2, 2], vec![2., 0., 0., 1.]).unwrap();
        let s = l.spectral_normalize(100);
        assert!((s[0] - 2.0).abs() < 1e-9);
        let eff = l.effective_weight(0);
        let expect = [1.0, 0.0, 0.0, 0.5];
        for (a, b) in eff.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weight_is_floored_not_nan() {
        let spec = LayerSpec::new(
            "z",
            LayerKind::Dense {
                in_features: 4,
                out_features: 2,
            },
        )
        .with_spectral_norm(true)
        .with_init(Init::Zero);
        let l = LayerNode::new(spec, &mut rng(), 3).unwrap();
        let y = run(&l, &Tensor::full(&[1, 4], 1.0));
        assert!(y.all_finite());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
