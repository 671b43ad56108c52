//! Layers with explicit forward and backward passes.
//!
//! Each layer kind has free `*_forward` / `*_backward` functions; [`Layer`]
//! pairs a [`LayerSpec`] with its parameters and dispatches to them.

mod activation;
mod batchnorm;
mod conv;
mod dense;
pub mod gradcheck;

use std::fmt;

pub use activation::{activation_backward, activation_forward, sigmoid, Activation, ActivationCache};
pub use batchnorm::{batchnorm2d_backward, batchnorm2d_forward, BatchNormCache};
pub use conv::{
    conv2d_backward, conv2d_forward, conv_output_size, conv_transpose2d_backward, conv_transpose2d_forward,
    conv_transpose_output_size, ConvCache, ConvTransposeCache,
};
pub use dense::{dense_backward, dense_forward, DenseCache};
pub use gradcheck::{grad_check, grad_check_with, gradcheck_suite, Fault, GradCheckEntry};

use crate::error::{Error, Result};
use crate::tensor::{Real, Rng, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec { in_channels, out_channels, kernel, stride, padding }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense { in_features: usize, out_features: usize },
    Conv2d(ConvSpec),
    ConvTranspose2d(ConvSpec),
    BatchNorm2d { channels: usize, eps: f64, momentum: f64 },
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
    /// Reshapes each sample to `shape`, keeping the batch axis.
    Reshape { shape: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    Dense,
    Conv2d,
    ConvTranspose2d,
    BatchNorm2d,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Reshape,
}

impl LayerKind {
    pub const ALL: [LayerKind; 8] = [
        LayerKind::Dense,
        LayerKind::Conv2d,
        LayerKind::ConvTranspose2d,
        LayerKind::BatchNorm2d,
        LayerKind::LeakyRelu,
        LayerKind::Tanh,
        LayerKind::Sigmoid,
        LayerKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
            LayerKind::ConvTranspose2d => "conv_transpose2d",
            LayerKind::BatchNorm2d => "batchnorm2d",
            LayerKind::LeakyRelu => "leaky_relu",
            LayerKind::Tanh => "tanh",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Reshape => "reshape",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn is_activation(self) -> bool {
        matches!(self, LayerKind::LeakyRelu | LayerKind::Tanh | LayerKind::Sigmoid)
    }

    /// Dense and convolution layers.
    pub fn is_weighted(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv2d | LayerKind::ConvTranspose2d)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Dense { .. } => LayerKind::Dense,
            LayerSpec::Conv2d(_) => LayerKind::Conv2d,
            LayerSpec::ConvTranspose2d(_) => LayerKind::ConvTranspose2d,
            LayerSpec::BatchNorm2d { .. } => LayerKind::BatchNorm2d,
            LayerSpec::LeakyRelu { .. } => LayerKind::LeakyRelu,
            LayerSpec::Tanh => LayerKind::Tanh,
            LayerSpec::Sigmoid => LayerKind::Sigmoid,
            LayerSpec::Reshape { .. } => LayerKind::Reshape,
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        LayerSpec::BatchNorm2d { channels, eps: BN_EPS, momentum: BN_MOMENTUM }
    }

    pub fn leaky_relu() -> Self {
        LayerSpec::LeakyRelu { slope: LEAKY_SLOPE }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self {
            LayerSpec::Dense { in_features, out_features } => {
                if *in_features == 0 || *out_features == 0 {
                    return bad(format!("dense features must be >= 1: {self:?}"));
                }
            }
            LayerSpec::Conv2d(c) | LayerSpec::ConvTranspose2d(c) => {
                if c.in_channels == 0 || c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                    return bad(format!("conv channels, kernel and stride must be >= 1: {self:?}"));
                }
            }
            LayerSpec::BatchNorm2d { channels, eps, momentum } => {
                if *channels == 0 || !(*eps > 0.0) || !(0.0..=1.0).contains(momentum) {
                    return bad(format!("invalid batchnorm parameters: {self:?}"));
                }
            }
            LayerSpec::LeakyRelu { slope } => {
                if !(*slope > 0.0 && *slope < 1.0) {
                    return bad(format!("leaky slope must lie in (0, 1), got {slope}"));
                }
            }
            LayerSpec::Reshape { shape } => {
                if shape.is_empty() || shape.contains(&0) {
                    return bad(format!("invalid reshape target {shape:?}"));
                }
            }
            LayerSpec::Tanh | LayerSpec::Sigmoid => {}
        }
        Ok(())
    }

    /// Shape produced from an input of shape `input` (batch axis first).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || Error::Shape(format!("{:?} cannot take input {input:?}", self.kind()));
        match self {
            LayerSpec::Dense { in_features, out_features } => match *input {
                [n, f] if f == *in_features => Ok(vec![n, *out_features]),
                _ => Err(mismatch()),
            },
            LayerSpec::Conv2d(c) => match *input {
                [n, ch, h, w] if ch == c.in_channels => Ok(vec![
                    n,
                    c.out_channels,
                    conv_output_size(h, c.kernel, c.stride, c.padding)?,
                    conv_output_size(w, c.kernel, c.stride, c.padding)?,
                ]),
                _ => Err(mismatch()),
            },
            LayerSpec::ConvTranspose2d(c) => match *input {
                [n, ch, h, w] if ch == c.in_channels => Ok(vec![
                    n,
                    c.out_channels,
                    conv_transpose_output_size(h, c.kernel, c.stride, c.padding)?,
                    conv_transpose_output_size(w, c.kernel, c.stride, c.padding)?,
                ]),
                _ => Err(mismatch()),
            },
            LayerSpec::BatchNorm2d { channels, .. } => match *input {
                [_, ch, _, _] if ch == *channels => Ok(input.to_vec()),
                _ => Err(mismatch()),
            },
            LayerSpec::LeakyRelu { .. } | LayerSpec::Tanh | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::Reshape { shape } => {
                let per_sample: usize = input[1..].iter().product();
                if input.is_empty() || per_sample != shape.iter().product::<usize>() {
                    return Err(mismatch());
                }
                let mut out = vec![input[0]];
                out.extend_from_slice(shape);
                Ok(out)
            }
        }
    }
}

/// Weight and bias of a dense or convolution layer. Dense weights are
/// `[out, in]`, conv kernels `[out, in, k, k]`, transposed-conv kernels
/// `[in, out, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Learned scale and shift plus running statistics of a batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Real> NormParams<T> {
    /// `gamma = 1`, `beta = 0`, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(NormParams {
            gamma: Tensor::create(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::create(&[channels], T::one())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T: Real> {
    None,
    Affine(AffineParams<T>),
    Norm(NormParams<T>),
}

/// Gradients from one backward pass. `params` follows the order of
/// [`Layer::params`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    pub input: Option<Tensor<T>>,
    pub params: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub enum ForwardCache<T: Real> {
    Dense(DenseCache<T>),
    Conv(ConvCache<T>),
    ConvTranspose(ConvTransposeCache<T>),
    BatchNorm(BatchNormCache<T>),
    Activation(ActivationCache<T>),
    Reshape { input_shape: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Real> {
    pub spec: LayerSpec,
    pub params: LayerParams<T>,
}

impl<T: Real> Layer<T> {
    /// Weights ~ N(0, 0.02), biases 0, batchnorm scale 1 and shift 0.
    pub fn new(spec: LayerSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let params = match &spec {
            LayerSpec::Dense { in_features, out_features } => LayerParams::Affine(AffineParams {
                weight: Tensor::randn_scaled(&[*out_features, *in_features], 0.0, INIT_STD, rng)?,
                bias: Tensor::zeros(&[*out_features])?,
            }),
            LayerSpec::Conv2d(c) => LayerParams::Affine(AffineParams {
                weight: Tensor::randn_scaled(&[c.out_channels, c.in_channels, c.kernel, c.kernel], 0.0, INIT_STD, rng)?,
                bias: Tensor::zeros(&[c.out_channels])?,
            }),
            LayerSpec::ConvTranspose2d(c) => LayerParams::Affine(AffineParams {
                weight: Tensor::randn_scaled(&[c.in_channels, c.out_channels, c.kernel, c.kernel], 0.0, INIT_STD, rng)?,
                bias: Tensor::zeros(&[c.out_channels])?,
            }),
            LayerSpec::BatchNorm2d { channels, .. } => LayerParams::Norm(NormParams::new(*channels)?),
            _ => LayerParams::None,
        };
        Ok(Layer { spec, params })
    }

    pub fn kind(&self) -> LayerKind {
        self.spec.kind()
    }

    fn affine(&self) -> Result<&AffineParams<T>> {
        match &self.params {
            LayerParams::Affine(p) => Ok(p),
            _ => Err(Error::Config(format!("{} layer is missing weights", self.kind()))),
        }
    }

    fn norm(&self) -> Result<&NormParams<T>> {
        match &self.params {
            LayerParams::Norm(p) => Ok(p),
            _ => Err(Error::Config(format!("{} layer is missing statistics", self.kind()))),
        }
    }

    /// Trainable tensors: `[weight, bias]` or `[gamma, beta]`.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        match &self.params {
            LayerParams::None => vec![],
            LayerParams::Affine(p) => vec![&p.weight, &p.bias],
            LayerParams::Norm(p) => vec![&p.gamma, &p.beta],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match &mut self.params {
            LayerParams::None => vec![],
            LayerParams::Affine(p) => vec![&mut p.weight, &mut p.bias],
            LayerParams::Norm(p) => vec![&mut p.gamma, &mut p.beta],
        }
    }

    /// Every stored tensor with a stable name suffix, running statistics
    /// included.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match &self.params {
            LayerParams::None => vec![],
            LayerParams::Affine(p) => vec![("weight", &p.weight), ("bias", &p.bias)],
            LayerParams::Norm(p) => vec![
                ("gamma", &p.gamma),
                ("beta", &p.beta),
                ("running_mean", &p.running_mean),
                ("running_var", &p.running_var),
            ],
        }
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match &mut self.params {
            LayerParams::None => vec![],
            LayerParams::Affine(p) => vec![("weight", &mut p.weight), ("bias", &mut p.bias)],
            LayerParams::Norm(p) => vec![
                ("gamma", &mut p.gamma),
                ("beta", &mut p.beta),
                ("running_mean", &mut p.running_mean),
                ("running_var", &mut p.running_var),
            ],
        }
    }

    /// Forward pass. Train-mode batchnorm updates the running statistics.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ForwardCache<T>)> {
        match &self.spec {
            LayerSpec::Dense { .. } => {
                let (y, c) = dense_forward(x, self.affine()?)?;
                Ok((y, ForwardCache::Dense(c)))
            }
            LayerSpec::Conv2d(c) => {
                let (y, cache) = conv2d_forward(x, self.affine()?, c.stride, c.padding)?;
                Ok((y, ForwardCache::Conv(cache)))
            }
            LayerSpec::ConvTranspose2d(c) => {
                let (y, cache) = conv_transpose2d_forward(x, self.affine()?, c.stride, c.padding)?;
                Ok((y, ForwardCache::ConvTranspose(cache)))
            }
            LayerSpec::BatchNorm2d { eps, momentum, .. } => {
                let (eps, momentum) = (*eps, *momentum);
                let LayerParams::Norm(p) = &mut self.params else {
                    return Err(Error::Config("batchnorm layer is missing statistics".into()));
                };
                let (y, c) = batchnorm2d_forward(x, p, eps, momentum, mode)?;
                Ok((y, ForwardCache::BatchNorm(c)))
            }
            LayerSpec::LeakyRelu { slope } => {
                let (y, c) = activation_forward(x, Activation::LeakyRelu { slope: *slope });
                Ok((y, ForwardCache::Activation(c)))
            }
            LayerSpec::Tanh => {
                let (y, c) = activation_forward(x, Activation::Tanh);
                Ok((y, ForwardCache::Activation(c)))
            }
            LayerSpec::Sigmoid => {
                let (y, c) = activation_forward(x, Activation::Sigmoid);
                Ok((y, ForwardCache::Activation(c)))
            }
            LayerSpec::Reshape { .. } => {
                let out = self.spec.output_shape(x.shape())?;
                Ok((x.clone().reshape(&out)?, ForwardCache::Reshape { input_shape: x.shape().to_vec() }))
            }
        }
    }

    /// Backward pass. Skipping the input or parameter gradients saves the
    /// corresponding GEMMs.
    pub fn backward(
        &self,
        grad_y: &Tensor<T>,
        cache: &ForwardCache<T>,
        need_input: bool,
        need_params: bool,
    ) -> Result<Gradients<T>> {
        match (&self.spec, cache) {
            (LayerSpec::Dense { .. }, ForwardCache::Dense(c)) => {
                dense::dense_backward_with(grad_y, c, self.affine()?, need_input, need_params)
            }
            (LayerSpec::Conv2d(_), ForwardCache::Conv(c)) => {
                conv::conv2d_backward_with(grad_y, c, self.affine()?, need_input, need_params)
            }
            (LayerSpec::ConvTranspose2d(_), ForwardCache::ConvTranspose(c)) => {
                conv::conv_transpose2d_backward_with(grad_y, c, self.affine()?, need_input, need_params)
            }
            (LayerSpec::BatchNorm2d { .. }, ForwardCache::BatchNorm(c)) => {
                batchnorm::batchnorm2d_backward_with(grad_y, c, self.norm()?, need_input, need_params)
            }
            (LayerSpec::LeakyRelu { .. } | LayerSpec::Tanh | LayerSpec::Sigmoid, ForwardCache::Activation(c)) => {
                Ok(Gradients { input: Some(activation_backward(grad_y, c)?), params: vec![] })
            }
            (LayerSpec::Reshape { .. }, ForwardCache::Reshape { input_shape }) => Ok(Gradients {
                input: Some(grad_y.clone().reshape(input_shape)?),
                params: vec![],
            }),
            _ => Err(Error::Config(format!("forward cache does not belong to a {} layer", self.kind()))),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}
