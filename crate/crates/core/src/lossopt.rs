//! Binary cross-entropy on probabilities and the Adam optimizer.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` before taking logs.
pub const CLAMP: f64 = 1e-7;

fn check_pair<T: Real>(p: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "bce predictions {:?} and labels {:?} differ",
            p.shape(),
            y.shape()
        )));
    }
    if let Some(l) = y.data().iter().find(|&&l| l != T::zero() && l != T::one()) {
        return Err(Error::InvalidValue(format!("label {l} is not 0 or 1")));
    }
    if let Some(v) = p.data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::InvalidValue(format!("probability {v} outside [0, 1]")));
    }
    Ok(())
}

/// `-mean(y ln p + (1 - y) ln(1 - p))` with clamped `p`, evaluated in `f64`.
pub fn bce<T: Real>(p: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check_pair(p, y)?;
    let sum: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &y)| {
            let p = p.as_f64().clamp(CLAMP, 1.0 - CLAMP);
            if y == T::one() {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / p.len() as f64)
}

/// Gradient of [`bce`] with respect to `p`; zero wherever the clamp is active.
pub fn bce_backward<T: Real>(p: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair(p, y)?;
    let count = p.len() as f64;
    let g = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &y)| {
            let p = p.as_f64();
            if !(CLAMP..=1.0 - CLAMP).contains(&p) {
                return T::zero();
            }
            T::lit((p - y.as_f64()) / (p * (1.0 - p)) / count)
        })
        .collect();
    Ok(Tensor::from_parts(p.shape().to_vec(), g))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// First and second moment estimates for one parameter set.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Result<Self> {
        config.validate()?;
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Result<Vec<_>>>();
        Ok(AdamState { config, m: zeros()?, v: zeros()?, t: 0 })
    }

    /// One bias-corrected Adam update:
    /// `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "Adam tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "Adam parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }

        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (ob1, ob2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let (lr_t, c1_t, c2_t, eps_t) = (T::lit(lr), T::lit(c1), T::lit(c2), T::lit(eps));

        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((theta, &gi), (mi, vi)) in it {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                let m_hat = *mi / c1_t;
                let v_hat = *vi / c2_t;
                *theta -= lr_t * m_hat / (v_hat.sqrt() + eps_t);
            }
        }
        Ok(())
    }
}
