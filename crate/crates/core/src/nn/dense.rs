use crate::error::{Error, Result};
use crate::par::{self, MatRef};
use crate::tensor::{Real, Tensor};

use super::{AffineParams, Gradients};

#[derive(Debug, Clone)]
pub struct DenseCache<T: Real> {
    x: Tensor<T>,
}

/// `y = x W^T + b` for `x: [N, F_in]`, `W: [F_out, F_in]`.
pub fn dense_forward<T: Real>(x: &Tensor<T>, params: &AffineParams<T>) -> Result<(Tensor<T>, DenseCache<T>)> {
    let (out_f, in_f) = match *params.weight.shape() {
        [o, i] => (o, i),
        _ => return Err(Error::Shape(format!("dense weight must be rank 2, got {:?}", params.weight.shape()))),
    };
    let n = match *x.shape() {
        [n, f] if f == in_f => n,
        _ => {
            return Err(Error::Shape(format!(
                "dense layer expects [N, {in_f}], got {:?}",
                x.shape()
            )))
        }
    };
    if params.bias.shape() != [out_f] {
        return Err(Error::Shape(format!("dense bias must be [{out_f}], got {:?}", params.bias.shape())));
    }
    let mut y = vec![T::zero(); n * out_f];
    let bias = params.bias.data();
    for row in y.chunks_mut(out_f) {
        row.copy_from_slice(bias);
    }
    par::gemm(
        MatRef::row_major(x.data(), n, in_f),
        MatRef::transposed(params.weight.data(), out_f, in_f),
        T::one(),
        &mut y,
    );
    Ok((Tensor::from_parts(vec![n, out_f], y), DenseCache { x: x.clone() }))
}

pub fn dense_backward<T: Real>(
    grad_y: &Tensor<T>,
    cache: &DenseCache<T>,
    params: &AffineParams<T>,
) -> Result<Gradients<T>> {
    dense_backward_with(grad_y, cache, params, true, true)
}

pub(crate) fn dense_backward_with<T: Real>(
    grad_y: &Tensor<T>,
    cache: &DenseCache<T>,
    params: &AffineParams<T>,
    need_input: bool,
    need_params: bool,
) -> Result<Gradients<T>> {
    let (n, in_f) = (cache.x.shape()[0], cache.x.shape()[1]);
    let out_f = params.weight.shape()[0];
    if grad_y.shape() != [n, out_f] {
        return Err(Error::Shape(format!(
            "dense gradient must be [{n}, {out_f}], got {:?}",
            grad_y.shape()
        )));
    }
    let mut out = Gradients { input: None, params: Vec::new() };
    if need_params {
        let mut gw = vec![T::zero(); out_f * in_f];
        par::gemm(
            MatRef::transposed(grad_y.data(), n, out_f),
            MatRef::row_major(cache.x.data(), n, in_f),
            T::zero(),
            &mut gw,
        );
        let mut gb = vec![T::zero(); out_f];
        for row in grad_y.data().chunks(out_f) {
            gb.iter_mut().zip(row).for_each(|(b, &g)| *b += g);
        }
        out.params.push(Tensor::from_parts(vec![out_f, in_f], gw));
        out.params.push(Tensor::from_parts(vec![out_f], gb));
    }
    if need_input {
        let mut gx = vec![T::zero(); n * in_f];
        par::gemm(
            MatRef::row_major(grad_y.data(), n, out_f),
            MatRef::row_major(params.weight.data(), out_f, in_f),
            T::zero(),
            &mut gx,
        );
        out.input = Some(Tensor::from_parts(vec![n, in_f], gx));
    }
    Ok(out)
}
