//! Central finite-difference verification of the analytic backward passes.
//!
//! For a layer `f` and a random upstream tensor `r`, the scalar objective is
//! `L = sum(r * f(x))`. Every input and parameter coordinate is perturbed by
//! `+/- h` with `h = 1e-5`, and the relative error of each coordinate is
//! `|a - n| / max(|a|, |n|, 1e-8)`.

use crate::error::Result;
use crate::par;
use crate::tensor::{Rng, Tensor};

use super::{ConvSpec, Layer, LayerKind, LayerParams, LayerSpec, Mode};

pub const STEP: f64 = 1e-5;

/// Fault injection for exercising the harness itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Negates every analytic gradient before comparison.
    FlipSign,
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn forward_output(layer: &Layer<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    // Train mode; the clone keeps running statistics of `layer` untouched.
    Ok(layer.clone().forward(x, Mode::Train)?.0)
}

/// `(L(+h) - L(-h)) / 2h`, differencing outputs before weighting by `r` so
/// outputs that do not depend on the coordinate contribute exactly zero.
fn central_difference(plus: &Tensor<f64>, minus: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    plus.data()
        .iter()
        .zip(minus.data())
        .zip(r.data())
        .map(|((p, m), w)| (p - m) * w)
        .sum::<f64>()
        / (2.0 * STEP)
}

/// Finite-difference gradients of `sum(r * layer(x))` with respect to the
/// input and each trainable parameter tensor.
pub fn numeric_gradients(layer: &Layer<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> Result<(Tensor<f64>, Vec<Tensor<f64>>)> {
    let mut gx = Tensor::zeros(x.shape())?;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= STEP;
        gx.data_mut()[i] = central_difference(&forward_output(layer, &xp)?, &forward_output(layer, &xm)?, r);
    }

    let mut gparams = Vec::new();
    for (pi, t) in layer.params().into_iter().enumerate() {
        let mut g = Tensor::zeros(t.shape())?;
        for j in 0..t.len() {
            let mut lp = layer.clone();
            lp.params_mut()[pi].data_mut()[j] += STEP;
            let mut lm = layer.clone();
            lm.params_mut()[pi].data_mut()[j] -= STEP;
            g.data_mut()[j] = central_difference(&forward_output(&lp, x)?, &forward_output(&lm, x)?, r);
        }
        gparams.push(g);
    }
    Ok((gx, gparams))
}

/// Maximum relative error between analytic and finite-difference gradients
/// over every input and parameter coordinate of a random instance.
pub fn grad_check(layer: &Layer<f64>, input_shape: &[usize], rng: &mut Rng) -> Result<f64> {
    grad_check_with(layer, input_shape, rng, Fault::None)
}

pub fn grad_check_with(layer: &Layer<f64>, input_shape: &[usize], rng: &mut Rng, fault: Fault) -> Result<f64> {
    let mut x = Tensor::<f64>::randn(input_shape, rng)?;
    if layer.kind() == LayerKind::LeakyRelu {
        // Keep every coordinate well clear of the kink at 0.
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v = if *v < 0.0 { -0.05 } else { 0.05 };
            }
        }
    }
    let (y, cache) = layer.clone().forward(&x, Mode::Train)?;
    let r = Tensor::randn(y.shape(), rng)?;
    let mut analytic = layer.backward(&r, &cache, true, true)?;
    if fault == Fault::FlipSign {
        if let Some(g) = analytic.input.as_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = -*v);
        }
        for g in &mut analytic.params {
            g.data_mut().iter_mut().for_each(|v| *v = -*v);
        }
    }
    let (nx, nparams) = numeric_gradients(layer, &x, &r)?;

    let mut worst = 0.0f64;
    let ax = analytic.input.expect("input gradient requested");
    for (a, n) in ax.data().iter().zip(nx.data()) {
        worst = worst.max(relative_error(*a, *n));
    }
    for (at, nt) in analytic.params.iter().zip(&nparams) {
        for (a, n) in at.data().iter().zip(nt.data()) {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    Ok(worst)
}

/// Result of checking one layer kind across all seeds and instances.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub kind: LayerKind,
    pub max_error: f64,
    pub tolerance: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

/// Per-kind relative-error bound.
pub fn tolerance(kind: LayerKind) -> f64 {
    match kind {
        LayerKind::Dense => 1e-7,
        LayerKind::Conv2d | LayerKind::ConvTranspose2d => 1e-6,
        LayerKind::BatchNorm2d => 1e-5,
        LayerKind::LeakyRelu | LayerKind::Tanh | LayerKind::Sigmoid | LayerKind::Reshape => 1e-7,
    }
}

/// Small instances checked for each layer kind: (spec, input shape).
fn instances(kind: LayerKind) -> Vec<(LayerSpec, Vec<usize>)> {
    let act_shape = vec![2, 3, 2, 2];
    match kind {
        LayerKind::Dense => vec![
            (LayerSpec::Dense { in_features: 3, out_features: 2 }, vec![2, 3]),
            (LayerSpec::Dense { in_features: 5, out_features: 4 }, vec![3, 5]),
        ],
        LayerKind::Conv2d => vec![
            (LayerSpec::Conv2d(ConvSpec::new(1, 1, 3, 1, 0)), vec![1, 1, 4, 4]),
            (LayerSpec::Conv2d(ConvSpec::new(2, 3, 3, 2, 1)), vec![2, 2, 5, 5]),
            (LayerSpec::Conv2d(ConvSpec::new(2, 2, 4, 2, 1)), vec![1, 2, 6, 6]),
        ],
        LayerKind::ConvTranspose2d => vec![
            (LayerSpec::ConvTranspose2d(ConvSpec::new(1, 1, 3, 1, 0)), vec![1, 1, 3, 3]),
            (LayerSpec::ConvTranspose2d(ConvSpec::new(2, 3, 4, 2, 1)), vec![2, 2, 3, 3]),
        ],
        LayerKind::BatchNorm2d => vec![(LayerSpec::batchnorm(2), vec![3, 2, 2, 2])],
        LayerKind::LeakyRelu => vec![(LayerSpec::leaky_relu(), act_shape)],
        LayerKind::Tanh => vec![(LayerSpec::Tanh, act_shape)],
        LayerKind::Sigmoid => vec![(LayerSpec::Sigmoid, act_shape)],
        LayerKind::Reshape => vec![(LayerSpec::Reshape { shape: vec![12] }, act_shape)],
    }
}

/// Layer with parameters drawn well away from their initial values, so that
/// every gradient term is exercised.
fn randomized_layer(spec: LayerSpec, rng: &mut Rng) -> Result<Layer<f64>> {
    let mut layer = Layer::new(spec, rng)?;
    match &mut layer.params {
        LayerParams::None => {}
        LayerParams::Affine(p) => {
            p.weight = Tensor::randn_scaled(p.weight.shape(), 0.0, 0.5, rng)?;
            p.bias = Tensor::randn_scaled(p.bias.shape(), 0.0, 0.5, rng)?;
        }
        LayerParams::Norm(p) => {
            p.gamma = Tensor::randn_scaled(p.gamma.shape(), 1.0, 0.2, rng)?;
            p.beta = Tensor::randn_scaled(p.beta.shape(), 0.0, 0.2, rng)?;
        }
    }
    Ok(layer)
}

/// Checks every layer kind on every seed. `fault` injects a sign error into
/// one kind's analytic gradients.
pub fn gradcheck_suite(seeds: &[u64], fault: Option<LayerKind>) -> Result<Vec<GradCheckEntry>> {
    let results = par::map_indices(LayerKind::ALL.len(), |ki| -> Result<GradCheckEntry> {
        let kind = LayerKind::ALL[ki];
        let mode = if fault == Some(kind) { Fault::FlipSign } else { Fault::None };
        let mut worst = 0.0f64;
        for &seed in seeds {
            for (i, (spec, shape)) in instances(kind).into_iter().enumerate() {
                let mut rng = Rng::derive(seed, (ki * 16 + i) as u64);
                let layer = randomized_layer(spec, &mut rng)?;
                worst = worst.max(grad_check_with(&layer, &shape, &mut rng, mode)?);
            }
        }
        Ok(GradCheckEntry { kind, max_error: worst, tolerance: tolerance(kind) })
    });
    results.into_iter().collect()
}
