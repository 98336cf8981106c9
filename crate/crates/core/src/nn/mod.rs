//! Layer vocabulary shared by every generator and discriminator.

mod layer;
pub mod spectral;

pub use layer::{Binder, LayerNode, Param, SpectralState};

use crate::error::{Error, Result};
use crate::tensor::ConvGeometry;

/// Negative slope used when a configuration does not override it.
pub const DEFAULT_SLOPE: f64 = 0.2;

/// Query/key bottleneck divisor of the self-attention block.
pub const ATTENTION_DIVISOR: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Stride-2 resampling: k=4, s=2, p=1 halves (or doubles) each side.
    pub fn resample(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 4, 2, 1)
    }

    /// Channel-mixing 3×3 that keeps the spatial size.
    pub fn same(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 3, 1, 1)
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, self.padding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Dense { in_features: usize, out_features: usize },
    Conv2d(ConvSpec),
    ConvTranspose2d(ConvSpec),
    LeakyRelu { slope: f64 },
    Relu,
    Tanh,
    Sigmoid,
    Flatten,
    Reshape { channels: usize, height: usize, width: usize },
    ResidualBlock { channels: usize, slope: f64 },
    SelfAttention { channels: usize },
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "Dense",
            LayerKind::Conv2d(_) => "Conv2d",
            LayerKind::ConvTranspose2d(_) => "ConvTranspose2d",
            LayerKind::LeakyRelu { .. } => "LeakyReLU",
            LayerKind::Relu => "ReLU",
            LayerKind::Tanh => "Tanh",
            LayerKind::Sigmoid => "Sigmoid",
            LayerKind::Flatten => "Flatten",
            LayerKind::Reshape { .. } => "Reshape",
            LayerKind::ResidualBlock { .. } => "ResidualBlock",
            LayerKind::SelfAttention { .. } => "SelfAttention",
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(
            self,
            LayerKind::Dense { .. }
                | LayerKind::Conv2d(_)
                | LayerKind::ConvTranspose2d(_)
                | LayerKind::ResidualBlock { .. }
                | LayerKind::SelfAttention { .. }
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Init {
    /// Fan-in scaled normal weights, zero biases.
    #[default]
    Kaiming,
    /// Everything zero; used for layers that must start as a no-op.
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub spectral_norm: bool,
    pub init: Init,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            spectral_norm: false,
            init: Init::Kaiming,
        }
    }

    pub fn with_spectral_norm(mut self, on: bool) -> Self {
        self.spectral_norm = on && self.kind.has_weights();
        self
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    fn config_err<T>(&self, msg: String) -> Result<T> {
        Err(Error::Config(format!("layer `{}` ({}): {msg}", self.name, self.kind.tag())))
    }

    /// Shape produced from `input` (batch axis included), or a configuration
    /// error naming the offending layer.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let n = *input.first().unwrap_or(&0);
        match &self.kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                if input.len() != 2 || input[1] != *in_features {
                    return self.config_err(format!("expects [N, {in_features}], got {input:?}"));
                }
                Ok(vec![n, *out_features])
            }
            LayerKind::Conv2d(c) | LayerKind::ConvTranspose2d(c) => {
                if input.len() != 4 || input[1] != c.in_channels {
                    return self.config_err(format!("expects [N, {}, H, W], got {input:?}", c.in_channels));
                }
                let g = c.geometry();
                let transposed = matches!(self.kind, LayerKind::ConvTranspose2d(_));
                let out = |s: usize| {
                    if transposed {
                        g.conv_transpose_out(s, c.kernel)
                    } else {
                        g.conv_out(s, c.kernel)
                    }
                };
                match (out(input[2]), out(input[3])) {
                    (Some(h), Some(w)) => Ok(vec![n, c.out_channels, h, w]),
                    _ => self.config_err(format!("non-positive output size for input {input:?}")),
                }
            }
            LayerKind::LeakyRelu { slope } => {
                if !(*slope > 0.0 && *slope < 1.0) {
                    return self.config_err(format!("negative slope {slope} outside (0, 1)"));
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu | LayerKind::Tanh | LayerKind::Sigmoid => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![n, input[1..].iter().product()]),
            LayerKind::Reshape {
                channels,
                height,
                width,
            } => {
                let have: usize = input[1..].iter().product();
                if have != channels * height * width {
                    return self.config_err(format!(
                        "cannot reshape {input:?} into [N, {channels}, {height}, {width}]"
                    ));
                }
                Ok(vec![n, *channels, *height, *width])
            }
            LayerKind::ResidualBlock { channels, .. } => {
                if input.len() != 4 || input[1] != *channels {
                    return self.config_err(format!("expects [N, {channels}, H, W], got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerKind::SelfAttention { channels } => {
                if *channels < ATTENTION_DIVISOR {
                    return self.config_err(format!(
                        "needs at least {ATTENTION_DIVISOR} channels for the query/key bottleneck, got {channels}"
                    ));
                }
                if input.len() != 4 || input[1] != *channels {
                    return self.config_err(format!("expects [N, {channels}, H, W], got {input:?}"));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Walks `layers` from `input`, returning the shape after each layer.
pub fn trace_shapes(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shape = input.to_vec();
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        shape = l.output_shape(&shape)?;
        out.push(shape.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_shape_formulas() {
        let down = LayerSpec::new("d", LayerKind::Conv2d(ConvSpec::resample(1, 8)));
        assert_eq!(down.output_shape(&[1, 1, 4, 4]).unwrap(), vec![1, 8, 2, 2]);
        let up = LayerSpec::new("u", LayerKind::ConvTranspose2d(ConvSpec::resample(8, 1)));
        assert_eq!(up.output_shape(&[1, 8, 64, 64]).unwrap(), vec![1, 1, 128, 128]);
        assert!(down.output_shape(&[1, 2, 4, 4]).is_err());
        let big = LayerSpec::new("b", LayerKind::Conv2d(ConvSpec::new(1, 1, 7, 1, 0)));
        assert!(big.output_shape(&[1, 1, 4, 4]).is_err());
    }

    #[test]
    fn attention_needs_bottleneck_channels() {
        let a = LayerSpec::new("a", LayerKind::SelfAttention { channels: 4 });
        let err = a.output_shape(&[1, 4, 2, 2]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn leaky_slope_must_be_in_unit_interval() {
        for slope in [0.0, 1.0, -0.1] {
            let l = LayerSpec::new("l", LayerKind::LeakyRelu { slope });
            assert!(l.output_shape(&[1, 3]).is_err());
        }
    }

    #[test]
    fn spectral_norm_flag_ignored_without_weights() {
        let l = LayerSpec::new("t", LayerKind::Tanh).with_spectral_norm(true);
        assert!(!l.spectral_norm);
    }
}
