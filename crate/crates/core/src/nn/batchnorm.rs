//! Per-channel batch normalization over `[N, C, H, W]`.
//!
//! Train mode normalizes with the batch mean and biased variance over
//! `N, H, W`, then folds them into the running statistics:
//! `running = momentum * running + (1 - momentum) * batch` (the running
//! variance uses the unbiased batch estimate). Eval mode normalizes with the
//! running statistics. Statistics are accumulated in `f64`.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Real, Tensor};

use super::{Gradients, Mode, NormParams};

#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Real> {
    x_hat: Tensor<T>,
    inv_std: Vec<f64>,
    mode: Mode,
}

fn dims<T: Real>(x: &Tensor<T>, channels: usize) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] if c == channels => Ok((n, c, h * w)),
        _ => Err(Error::Shape(format!(
            "batchnorm2d over {channels} channels expects [N, {channels}, H, W], got {:?}",
            x.shape()
        ))),
    }
}

pub fn batchnorm2d_forward<T: Real>(
    x: &Tensor<T>,
    params: &mut NormParams<T>,
    eps: f64,
    momentum: f64,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let channels = params.gamma.len();
    let (n, c, plane) = dims(x, channels)?;
    let count = n * plane;
    let xd = x.data();

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::DegenerateBatch(format!(
                    "batchnorm needs N*H*W >= 2 in train mode, got {count}"
                )));
            }
            let stats = par::map_indices(c, |ci| {
                let mut sum = 0.0;
                for ni in 0..n {
                    sum += xd[(ni * c + ci) * plane..][..plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0;
                for ni in 0..n {
                    sq += xd[(ni * c + ci) * plane..][..plane]
                        .iter()
                        .map(|v| (v.as_f64() - mean).powi(2))
                        .sum::<f64>();
                }
                (mean, sq / count as f64)
            });
            let unbias = count as f64 / (count - 1) as f64;
            let rm = params.running_mean.data_mut();
            for (ci, &(m, _)) in stats.iter().enumerate() {
                rm[ci] = T::lit(momentum * rm[ci].as_f64() + (1.0 - momentum) * m);
            }
            let rv = params.running_var.data_mut();
            for (ci, &(_, v)) in stats.iter().enumerate() {
                rv[ci] = T::lit(momentum * rv[ci].as_f64() + (1.0 - momentum) * v * unbias);
            }
            stats.into_iter().unzip()
        }
        Mode::Eval => (
            params.running_mean.data().iter().map(|v| v.as_f64()).collect(),
            params.running_var.data().iter().map(|v| v.as_f64()).collect(),
        ),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    par::for_each_chunk(&mut x_hat, plane, |idx, dst| {
        let ci = idx % c;
        let (m, s) = (mean[ci], inv_std[ci]);
        for (d, v) in dst.iter_mut().zip(&xd[idx * plane..][..plane]) {
            *d = T::lit((v.as_f64() - m) * s);
        }
    });
    let (gamma, beta) = (params.gamma.data(), params.beta.data());
    par::for_each_chunk(&mut y, plane, |idx, dst| {
        let ci = idx % c;
        let (g, b) = (gamma[ci], beta[ci]);
        for (d, &h) in dst.iter_mut().zip(&x_hat[idx * plane..][..plane]) {
            *d = g * h + b;
        }
    });
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), y),
        BatchNormCache { x_hat: Tensor::from_parts(shape, x_hat), inv_std, mode },
    ))
}

/// Gradients with respect to the input, `gamma` and `beta`. In train mode
/// the dependence of the batch mean and variance on the input is included.
pub fn batchnorm2d_backward<T: Real>(
    grad_y: &Tensor<T>,
    cache: &BatchNormCache<T>,
    params: &NormParams<T>,
) -> Result<Gradients<T>> {
    batchnorm2d_backward_with(grad_y, cache, params, true, true)
}

pub(crate) fn batchnorm2d_backward_with<T: Real>(
    grad_y: &Tensor<T>,
    cache: &BatchNormCache<T>,
    params: &NormParams<T>,
    need_input: bool,
    need_params: bool,
) -> Result<Gradients<T>> {
    if grad_y.shape() != cache.x_hat.shape() {
        return Err(Error::Shape(format!(
            "batchnorm gradient must be {:?}, got {:?}",
            cache.x_hat.shape(),
            grad_y.shape()
        )));
    }
    let (n, c, plane) = dims(grad_y, params.gamma.len())?;
    let count = (n * plane) as f64;
    let gy = grad_y.data();
    let xh = cache.x_hat.data();

    // Per channel: (sum g, sum g * x_hat).
    let sums = par::map_indices(c, |ci| {
        let (mut sg, mut sgx) = (0.0, 0.0);
        for ni in 0..n {
            let off = (ni * c + ci) * plane;
            for (g, h) in gy[off..off + plane].iter().zip(&xh[off..off + plane]) {
                sg += g.as_f64();
                sgx += g.as_f64() * h.as_f64();
            }
        }
        (sg, sgx)
    });

    let mut out = Gradients { input: None, params: Vec::new() };
    if need_params {
        let gg = sums.iter().map(|&(_, sgx)| T::lit(sgx)).collect();
        let gb = sums.iter().map(|&(sg, _)| T::lit(sg)).collect();
        out.params.push(Tensor::from_parts(vec![c], gg));
        out.params.push(Tensor::from_parts(vec![c], gb));
    }
    if need_input {
        let gamma = params.gamma.data();
        let mut gx = vec![T::zero(); gy.len()];
        let train = cache.mode == Mode::Train;
        par::for_each_chunk(&mut gx, plane, |idx, dst| {
            let ci = idx % c;
            let scale = gamma[ci].as_f64() * cache.inv_std[ci];
            let (sg, sgx) = sums[ci];
            let off = idx * plane;
            for ((d, g), h) in dst.iter_mut().zip(&gy[off..off + plane]).zip(&xh[off..off + plane]) {
                let v = if train {
                    scale * (g.as_f64() - sg / count - h.as_f64() * sgx / count)
                } else {
                    scale * g.as_f64()
                };
                *d = T::lit(v);
            }
        });
        out.input = Some(Tensor::from_parts(grad_y.shape().to_vec(), gx));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    const EPS: f64 = 1e-5;

    fn fresh(c: usize) -> NormParams<f64> {
        NormParams::new(c).unwrap()
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut p = fresh(2);
        p.beta.data_mut().copy_from_slice(&[0.25, -1.5]);
        p.gamma.data_mut().copy_from_slice(&[3.0, 0.5]);
        let mut x = Tensor::<f64>::zeros(&[3, 2, 2, 2]).unwrap();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = if (i / 4) % 2 == 0 { 0.7 } else { -2.0 };
        }
        let (y, _) = batchnorm2d_forward(&x, &mut p, EPS, 0.9, Mode::Train).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let beta = if (i / 4) % 2 == 0 { 0.25 } else { -1.5 };
            assert!((v - beta).abs() < 1e-9, "{v} vs {beta}");
        }
    }

    #[test]
    fn train_output_is_standardized() {
        let mut rng = Rng::new(12);
        let x = Tensor::<f64>::randn_scaled(&[8, 3, 5, 5], 2.0, 3.0, &mut rng).unwrap();
        let mut p = fresh(3);
        let (y, _) = batchnorm2d_forward(&x, &mut p, EPS, 0.9, Mode::Train).unwrap();
        for ci in 0..3 {
            let vals: Vec<f64> = (0..8)
                .flat_map(|n| y.data()[(n * 3 + ci) * 25..][..25].to_vec())
                .collect();
            let xs: Vec<f64> = (0..8)
                .flat_map(|n| x.data()[(n * 3 + ci) * 25..][..25].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            let xm = xs.iter().sum::<f64>() / xs.len() as f64;
            let sigma2 = xs.iter().map(|a| (a - xm).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!(m.abs() < 1e-6);
            assert!((v - sigma2 / (sigma2 + EPS)).abs() < 1e-4);
        }
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let x = Tensor::<f64>::from_vec(&[2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let mut p = fresh(1);
        batchnorm2d_forward(&x, &mut p, EPS, 0.9, Mode::Train).unwrap();
        // batch mean 4, unbiased variance 20/3
        assert!((p.running_mean.data()[0] - 0.4).abs() < 1e-12);
        assert!((p.running_var.data()[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_with_unit_running_stats_is_near_identity() {
        let x = Tensor::<f64>::randn(&[2, 2, 3, 3], &mut Rng::new(4)).unwrap();
        let mut p = fresh(2);
        let (y, _) = batchnorm2d_forward(&x, &mut p, EPS, 0.9, Mode::Eval).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= b.abs() * 1e-5);
        }
        assert_eq!(p.running_mean.data(), &[0.0, 0.0]);
    }

    #[test]
    fn degenerate_batch_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2, 1, 1]).unwrap();
        let mut p = fresh(2);
        assert!(matches!(
            batchnorm2d_forward(&x, &mut p, EPS, 0.9, Mode::Train),
            Err(Error::DegenerateBatch(_))
        ));
        assert!(batchnorm2d_forward(&x, &mut p, EPS, 0.9, Mode::Eval).is_ok());
    }

    #[test]
    fn constant_upstream_gives_count_scaled_beta_gradient() {
        let x = Tensor::<f64>::randn(&[3, 2, 2, 2], &mut Rng::new(9)).unwrap();
        let mut p = fresh(2);
        let (y, cache) = batchnorm2d_forward(&x, &mut p, EPS, 0.9, Mode::Train).unwrap();
        let c = 0.75;
        let g = batchnorm2d_backward(&Tensor::create(y.shape(), c).unwrap(), &cache, &p).unwrap();
        for &b in g.params[1].data() {
            assert!((b - c * 12.0).abs() < 1e-12);
        }
        let g = batchnorm2d_backward(&Tensor::zeros(y.shape()).unwrap(), &cache, &p).unwrap();
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.params.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }
}
