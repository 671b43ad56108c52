use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
pub struct ActivationCache<T: Real> {
    kind: Activation,
    /// The input for leaky ReLU, the output for tanh and sigmoid.
    saved: Tensor<T>,
}

/// Logistic function, evaluated on the branch that cannot overflow and kept
/// strictly inside `(0, 1)`. NaN passes through so divergence stays visible.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x.is_nan() {
        return x;
    }
    let one = T::one();
    let y = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let hi = one - T::epsilon() / T::lit(2.0);
    y.max(T::min_positive_value()).min(hi)
}

pub fn activation_forward<T: Real>(x: &Tensor<T>, kind: Activation) -> (Tensor<T>, ActivationCache<T>) {
    match kind {
        Activation::LeakyRelu { slope } => {
            let a = T::lit(slope);
            let y = x.map(|v| if v > T::zero() { v } else { a * v });
            (y, ActivationCache { kind, saved: x.clone() })
        }
        Activation::Tanh => {
            let y = x.map(|v| v.tanh());
            (y.clone(), ActivationCache { kind, saved: y })
        }
        Activation::Sigmoid => {
            let y = x.map(sigmoid);
            (y.clone(), ActivationCache { kind, saved: y })
        }
    }
}

/// Leaky ReLU's derivative at exactly 0 is taken from the positive branch.
pub fn activation_backward<T: Real>(grad_y: &Tensor<T>, cache: &ActivationCache<T>) -> Result<Tensor<T>> {
    if grad_y.shape() != cache.saved.shape() {
        return Err(Error::Shape(format!(
            "activation gradient must be {:?}, got {:?}",
            cache.saved.shape(),
            grad_y.shape()
        )));
    }
    let one = T::one();
    let data = grad_y.data().iter().zip(cache.saved.data());
    let gx: Vec<T> = match cache.kind {
        Activation::LeakyRelu { slope } => {
            let a = T::lit(slope);
            data.map(|(&g, &x)| if x >= T::zero() { g } else { a * g }).collect()
        }
        Activation::Tanh => data.map(|(&g, &y)| g * (one - y * y)).collect(),
        Activation::Sigmoid => data.map(|(&g, &y)| g * y * (one - y)).collect(),
    };
    Ok(Tensor::from_parts(grad_y.shape().to_vec(), gx))
}
