//! Strided 2-D convolution and its adjoint, the transposed convolution.
//!
//! Both use the cross-correlation convention (no kernel flip). A conv layer
//! stores its kernel as `[out, in, k, k]`; a transposed conv stores
//! `[in, out, k, k]`, i.e. the kernel of the convolution it is the adjoint
//! of. With identical `(k, s, p)` and kernel, `<conv(x), y> = <x, convT(y)>`.
//!
//! The batch is folded into the GEMM column dimension: patches are unrolled
//! into a `[C*k*k, N*H'*W']` matrix so a whole layer is one (tiled) GEMM.

use crate::error::{Error, Result};
use crate::par::{self, MatRef};
use crate::tensor::{Real, Tensor};

use super::{AffineParams, Gradients};

/// Spatial geometry shared by an unrolled input (`h x w`) and the grid of
/// kernel positions over it (`out_h x out_w`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    fn col_len(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// For kernel column `kj`: the range of output columns whose tap lands
    /// inside the input row, and the input column of the first one.
    fn valid_span(&self, kj: usize) -> (usize, usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = p.saturating_sub(kj).div_ceil(s);
        let hi = (self.w + p).saturating_sub(kj).div_ceil(s).min(self.out_w);
        if lo >= hi {
            return (0, 0, 0);
        }
        let start = lo * s + kj - p;
        assert!(start + (hi - lo - 1) * s < self.w && hi <= self.out_w);
        (lo, hi, start)
    }
}

/// Output extent of a convolution, or an error if the kernel positions do
/// not tile the padded input exactly.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::Shape(format!(
            "input {size} with kernel {kernel}, stride {stride}, padding {padding} gives a non-integer output size"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution: `(size - 1) * s - 2p + k`.
pub fn conv_transpose_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let full = (size - 1) * stride + kernel;
    if full <= 2 * padding {
        return Err(Error::Shape(format!(
            "transposed conv of {size} with kernel {kernel}, stride {stride}, padding {padding} has no output"
        )));
    }
    Ok(full - 2 * padding)
}

/// Upper bound on the unrolled patch buffer. Layers are processed a few
/// images at a time so the buffer stays cache-friendly and is reused.
const CHUNK_ELEMS: usize = 1 << 20;

impl Window {
    /// Images per chunk; depends only on the layer shape.
    fn chunk_images(&self) -> usize {
        let per_image = (self.rows() * self.out_h * self.out_w).max(1);
        (CHUNK_ELEMS / per_image).clamp(1, self.batch.max(1))
    }

    fn with_batch(&self, batch: usize) -> Window {
        Window { batch, ..*self }
    }

    /// Image ranges `(start, count)` covering the batch in chunk order.
    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let (n, per) = (self.batch, self.chunk_images());
        (0..n).step_by(per).map(move |s| (s, per.min(n - s)))
    }
}

/// Unrolls `x` (`[N, C, H, W]`) into `dst`, laid out `[C*k*k, N*H'*W']`.
pub(crate) fn im2col_into<T: Real>(x: &[T], g: &Window, dst: &mut [T]) {
    let cols = g.col_len();
    let kk = g.kernel * g.kernel;
    let out_plane = g.out_h * g.out_w;
    par::for_each_chunk(&mut dst[..g.rows() * cols], cols, |row, dst| {
        let c = row / kk;
        let ki = (row % kk) / g.kernel;
        let kj = row % g.kernel;
        let (lo, hi, start) = g.valid_span(kj);
        for n in 0..g.batch {
            let plane = &x[(n * g.channels + c) * g.h * g.w..][..g.h * g.w];
            let dst = &mut dst[n * out_plane..][..out_plane];
            for oh in 0..g.out_h {
                let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                let drow = &mut dst[oh * g.out_w..][..g.out_w];
                if ih < 0 || ih as usize >= g.h {
                    drow.fill(T::zero());
                    continue;
                }
                let src = &plane[ih as usize * g.w..][..g.w];
                drow[..lo].fill(T::zero());
                drow[hi..].fill(T::zero());
                for (i, d) in drow[lo..hi].iter_mut().enumerate() {
                    // SAFETY: `valid_span` keeps every tap inside the row; it asserts as much.
                    *d = unsafe { *src.get_unchecked(start + i * g.stride) };
                }
            }
        }
    });
}

/// Adjoint of [`im2col_into`]: scatters `[C*k*k, N*H'*W']` onto `dst`
/// (`[N, C, H, W]`, overwritten), summing overlaps in a fixed order.
pub(crate) fn col2im_into<T: Real>(cols: &[T], g: &Window, dst: &mut [T]) {
    let plane_len = g.h * g.w;
    let col_len = g.col_len();
    par::for_each_chunk(&mut dst[..g.batch * g.channels * plane_len], plane_len, |idx, plane| {
        plane.fill(T::zero());
        let n = idx / g.channels;
        let c = idx % g.channels;
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * col_len + n * g.out_h * g.out_w..][..g.out_h * g.out_w];
                let (lo, hi, start) = g.valid_span(kj);
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    let drow = &mut plane[ih as usize * g.w..][..g.w];
                    let srow = &src[oh * g.out_w..][..g.out_w];
                    for (i, &v) in srow[lo..hi].iter().enumerate() {
                        // SAFETY: `valid_span` keeps every tap inside the row; it asserts as much.
                        unsafe { *drow.get_unchecked_mut(start + i * g.stride) += v };
                    }
                }
            }
        }
    });
}

/// `[N, C, P]` to `[C, N*P]`.
pub(crate) fn batch_to_channel_major<T: Real>(x: &[T], n: usize, c: usize, p: usize, dst: &mut [T]) {
    par::for_each_chunk(&mut dst[..n * c * p], n * p, |ci, dst| {
        for ni in 0..n {
            dst[ni * p..(ni + 1) * p].copy_from_slice(&x[(ni * c + ci) * p..][..p]);
        }
    });
}

/// `[C, N*P]` to `[N, C, P]`, adding `bias[c]` when given.
pub(crate) fn channel_to_batch_major<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    p: usize,
    bias: Option<&[T]>,
    dst: &mut [T],
) {
    par::for_each_chunk(&mut dst[..n * c * p], p, |idx, dst| {
        let (ni, ci) = (idx / c, idx % c);
        dst.copy_from_slice(&x[ci * n * p + ni * p..][..p]);
        if let Some(b) = bias {
            let bv = b[ci];
            dst.iter_mut().for_each(|v| *v += bv);
        }
    });
}

/// Per-channel sum of an `[N, C, P]` gradient, accumulated in index order.
pub(crate) fn channel_sums<T: Real>(g: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    par::map_indices(c, |ci| {
        let mut acc = T::zero();
        for ni in 0..n {
            for &v in &g[(ni * c + ci) * p..][..p] {
                acc += v;
            }
        }
        acc
    })
}

fn expect_rank4<T: Real>(x: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::Shape(format!("{what} expects [N, C, H, W], got {:?}", x.shape()))),
    }
}

fn kernel_dims<T: Real>(params: &AffineParams<T>) -> Result<[usize; 4]> {
    match *params.weight.shape() {
        [a, b, k1, k2] if k1 == k2 => Ok([a, b, k1, k2]),
        _ => Err(Error::Shape(format!(
            "conv kernel must be [a, b, k, k], got {:?}",
            params.weight.shape()
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache<T: Real> {
    input: Tensor<T>,
    window: Window,
    out_channels: usize,
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    params: &AffineParams<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let [n, c, h, w] = expect_rank4(x, "conv2d")?;
    let [o, ci, k, _] = kernel_dims(params)?;
    if ci != c {
        return Err(Error::Shape(format!("conv2d kernel expects {ci} input channels, input has {c}")));
    }
    if params.bias.shape() != [o] {
        return Err(Error::Shape(format!("conv2d bias must be [{o}], got {:?}", params.bias.shape())));
    }
    let out_h = conv_output_size(h, k, stride, padding)?;
    let out_w = conv_output_size(w, k, stride, padding)?;
    let window = Window { batch: n, channels: c, h, w, kernel: k, stride, padding, out_h, out_w };

    let (rows, p, in_len) = (window.rows(), out_h * out_w, c * h * w);
    let per = window.chunk_images();
    let mut cols = vec![T::zero(); rows * per * p];
    let mut yt = vec![T::zero(); o * per * p];
    let mut y = vec![T::zero(); n * o * p];
    for (start, nb) in window.chunks() {
        let g = window.with_batch(nb);
        im2col_into(&x.data()[start * in_len..][..nb * in_len], &g, &mut cols);
        let yt = &mut yt[..o * nb * p];
        par::gemm(
            MatRef::row_major(params.weight.data(), o, rows),
            MatRef::row_major(&cols, rows, nb * p),
            T::zero(),
            yt,
        );
        channel_to_batch_major(yt, nb, o, p, Some(params.bias.data()), &mut y[start * o * p..]);
    }
    Ok((
        Tensor::from_parts(vec![n, o, out_h, out_w], y),
        ConvCache { input: x.clone(), window, out_channels: o },
    ))
}

pub fn conv2d_backward<T: Real>(
    grad_y: &Tensor<T>,
    cache: &ConvCache<T>,
    params: &AffineParams<T>,
) -> Result<Gradients<T>> {
    conv2d_backward_with(grad_y, cache, params, true, true)
}

pub(crate) fn conv2d_backward_with<T: Real>(
    grad_y: &Tensor<T>,
    cache: &ConvCache<T>,
    params: &AffineParams<T>,
    need_input: bool,
    need_params: bool,
) -> Result<Gradients<T>> {
    let window = &cache.window;
    let o = cache.out_channels;
    let expected = [window.batch, o, window.out_h, window.out_w];
    if grad_y.shape() != expected {
        return Err(Error::Shape(format!(
            "conv2d gradient must be {expected:?}, got {:?}",
            grad_y.shape()
        )));
    }
    let (rows, p) = (window.rows(), window.out_h * window.out_w);
    let in_len = window.channels * window.h * window.w;
    let per = window.chunk_images();
    let mut gyt = vec![T::zero(); o * per * p];
    let mut cols = vec![T::zero(); rows * per * p];
    let mut gw = vec![T::zero(); if need_params { o * rows } else { 0 }];
    let mut gx = vec![T::zero(); if need_input { window.batch * in_len } else { 0 }];
    for (start, nb) in window.chunks() {
        let g = window.with_batch(nb);
        let np = nb * p;
        batch_to_channel_major(&grad_y.data()[start * o * p..], nb, o, p, &mut gyt);
        if need_params {
            im2col_into(&cache.input.data()[start * in_len..][..nb * in_len], &g, &mut cols);
            par::gemm(
                MatRef::row_major(&gyt, o, np),
                MatRef::transposed(&cols, rows, np),
                T::one(),
                &mut gw,
            );
        }
        if need_input {
            let gcols = &mut cols[..rows * np];
            par::gemm(
                MatRef::transposed(params.weight.data(), o, rows),
                MatRef::row_major(&gyt, o, np),
                T::zero(),
                gcols,
            );
            col2im_into(gcols, &g, &mut gx[start * in_len..]);
        }
    }

    let mut out = Gradients { input: None, params: Vec::new() };
    if need_params {
        let gb = channel_sums(grad_y.data(), window.batch, o, p);
        out.params.push(Tensor::from_parts(params.weight.shape().to_vec(), gw));
        out.params.push(Tensor::from_parts(vec![o], gb));
    }
    if need_input {
        out.input = Some(Tensor::from_parts(vec![window.batch, window.channels, window.h, window.w], gx));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvTransposeCache<T: Real> {
    input: Tensor<T>,
    /// Geometry of the adjoint convolution: unrolled space is the output.
    window: Window,
    in_channels: usize,
}

pub fn conv_transpose2d_forward<T: Real>(
    x: &Tensor<T>,
    params: &AffineParams<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, ConvTransposeCache<T>)> {
    let [n, c, h, w] = expect_rank4(x, "conv_transpose2d")?;
    let [ci, o, k, _] = kernel_dims(params)?;
    if ci != c {
        return Err(Error::Shape(format!(
            "conv_transpose2d kernel expects {ci} input channels, input has {c}"
        )));
    }
    if params.bias.shape() != [o] {
        return Err(Error::Shape(format!(
            "conv_transpose2d bias must be [{o}], got {:?}",
            params.bias.shape()
        )));
    }
    let out_h = conv_transpose_output_size(h, k, stride, padding)?;
    let out_w = conv_transpose_output_size(w, k, stride, padding)?;
    let window = Window { batch: n, channels: o, h: out_h, w: out_w, kernel: k, stride, padding, out_h: h, out_w: w };

    let (rows, p, plane) = (window.rows(), h * w, out_h * out_w);
    let per = window.chunk_images();
    let mut xt = vec![T::zero(); c * per * p];
    let mut cols = vec![T::zero(); rows * per * p];
    let mut y = vec![T::zero(); n * o * plane];
    for (start, nb) in window.chunks() {
        let g = window.with_batch(nb);
        batch_to_channel_major(&x.data()[start * c * p..], nb, c, p, &mut xt);
        let cols = &mut cols[..rows * nb * p];
        par::gemm(
            MatRef::transposed(params.weight.data(), c, rows),
            MatRef::row_major(&xt, c, nb * p),
            T::zero(),
            cols,
        );
        col2im_into(cols, &g, &mut y[start * o * plane..]);
    }
    let bias = params.bias.data();
    par::for_each_chunk(&mut y, plane, |idx, dst| {
        let b = bias[idx % o];
        dst.iter_mut().for_each(|v| *v += b);
    });
    Ok((
        Tensor::from_parts(vec![n, o, out_h, out_w], y),
        ConvTransposeCache { input: x.clone(), window, in_channels: c },
    ))
}

pub fn conv_transpose2d_backward<T: Real>(
    grad_y: &Tensor<T>,
    cache: &ConvTransposeCache<T>,
    params: &AffineParams<T>,
) -> Result<Gradients<T>> {
    conv_transpose2d_backward_with(grad_y, cache, params, true, true)
}

pub(crate) fn conv_transpose2d_backward_with<T: Real>(
    grad_y: &Tensor<T>,
    cache: &ConvTransposeCache<T>,
    params: &AffineParams<T>,
    need_input: bool,
    need_params: bool,
) -> Result<Gradients<T>> {
    let window = &cache.window;
    let c = cache.in_channels;
    let o = window.channels;
    let expected = [window.batch, o, window.h, window.w];
    if grad_y.shape() != expected {
        return Err(Error::Shape(format!(
            "conv_transpose2d gradient must be {expected:?}, got {:?}",
            grad_y.shape()
        )));
    }
    let (rows, p, plane) = (window.rows(), window.out_h * window.out_w, window.h * window.w);
    let per = window.chunk_images();
    let mut gcols = vec![T::zero(); rows * per * p];
    let mut xt = vec![T::zero(); c * per * p];
    let mut gw = vec![T::zero(); if need_params { c * rows } else { 0 }];
    let mut gx = vec![T::zero(); if need_input { window.batch * c * p } else { 0 }];
    for (start, nb) in window.chunks() {
        let g = window.with_batch(nb);
        let np = nb * p;
        im2col_into(&grad_y.data()[start * o * plane..][..nb * o * plane], &g, &mut gcols);
        let gcols = &gcols[..rows * np];
        if need_params {
            batch_to_channel_major(&cache.input.data()[start * c * p..], nb, c, p, &mut xt);
            par::gemm(
                MatRef::row_major(&xt, c, np),
                MatRef::transposed(gcols, rows, np),
                T::one(),
                &mut gw,
            );
        }
        if need_input {
            let gxt = &mut xt[..c * np];
            par::gemm(
                MatRef::row_major(params.weight.data(), c, rows),
                MatRef::row_major(gcols, rows, np),
                T::zero(),
                gxt,
            );
            channel_to_batch_major(gxt, nb, c, p, None, &mut gx[start * c * p..]);
        }
    }

    let mut out = Gradients { input: None, params: Vec::new() };
    if need_params {
        let gb = channel_sums(grad_y.data(), window.batch, o, plane);
        out.params.push(Tensor::from_parts(params.weight.shape().to_vec(), gw));
        out.params.push(Tensor::from_parts(vec![o], gb));
    }
    if need_input {
        out.input = Some(Tensor::from_parts(vec![window.batch, c, window.out_h, window.out_w], gx));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn params(weight: Tensor<f64>, out: usize) -> AffineParams<f64> {
        AffineParams { weight, bias: Tensor::zeros(&[out]).unwrap() }
    }

    /// Direct-summation cross-correlation, the oracle for the GEMM path.
    fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut y = vec![0.0; n * o * oh * ow];
        for ni in 0..n {
            for oi in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for a in 0..k {
                                for b in 0..k {
                                    let ih = (i * s + a) as isize - p as isize;
                                    let iw = (j * s + b) as isize - p as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                        acc += x.data()[((ni * c + ci) * h + ih as usize) * wd + iw as usize]
                                            * w.data()[((oi * c + ci) * k + a) * k + b];
                                    }
                                }
                            }
                        }
                        y[((ni * o + oi) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, o, oh, ow], y).unwrap()
    }

    #[test]
    fn all_ones_valid_conv_sums_nine() {
        let x = Tensor::<f64>::create(&[1, 1, 3, 3], 1.0).unwrap();
        let p = params(Tensor::create(&[1, 1, 3, 3], 1.0).unwrap(), 1);
        let (y, _) = conv2d_forward(&x, &p, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn all_ones_padded_conv_matches_direct_sum() {
        let x = Tensor::<f64>::create(&[1, 1, 3, 3], 1.0).unwrap();
        let w = Tensor::create(&[1, 1, 3, 3], 1.0).unwrap();
        let (y, _) = conv2d_forward(&x, &params(w.clone(), 1), 1, 1).unwrap();
        assert_eq!(y, conv_direct(&x, &w, 1, 1));
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[4], 9.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::<f64>::randn(&[2, 1, 5, 4], &mut Rng::new(3)).unwrap();
        let mut w = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        w.data_mut()[4] = 1.0;
        let (y, _) = conv2d_forward(&x, &params(w, 1), 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn random_conv_matches_direct_summation() {
        let mut rng = Rng::new(11);
        for &(k, s, p, h) in &[(3, 1, 1, 5), (4, 2, 1, 8), (3, 2, 0, 7), (4, 1, 0, 6)] {
            let x = Tensor::<f64>::randn(&[2, 3, h, h], &mut rng).unwrap();
            let w = Tensor::randn(&[4, 3, k, k], &mut rng).unwrap();
            let (y, _) = conv2d_forward(&x, &params(w.clone(), 4), s, p).unwrap();
            let e = conv_direct(&x, &w, s, p);
            for (a, b) in y.data().iter().zip(e.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_integer_output_size_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]).unwrap();
        let p = params(Tensor::zeros(&[1, 1, 3, 3]).unwrap(), 1);
        assert!(matches!(conv2d_forward(&x, &p, 2, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_backward_counts_window_coverage() {
        let x = Tensor::<f64>::create(&[1, 1, 4, 4], 1.0).unwrap();
        let p = params(Tensor::create(&[1, 1, 3, 3], 1.0).unwrap(), 1);
        let (y, cache) = conv2d_forward(&x, &p, 1, 0).unwrap();
        let gy = Tensor::create(y.shape(), 1.0).unwrap();
        let grads = conv2d_backward(&gy, &cache, &p).unwrap();
        // Counting oracle: windows covering (i, j) in a 4x4 input, k=3, s=1.
        let mut expected = [0.0; 16];
        for oi in 0..2 {
            for oj in 0..2 {
                for a in 0..3 {
                    for b in 0..3 {
                        expected[(oi + a) * 4 + oj + b] += 1.0;
                    }
                }
            }
        }
        assert_eq!(grads.input.unwrap().data(), &expected[..]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::randn(&[2, 2, 4, 4], &mut rng).unwrap();
        let p = params(Tensor::randn(&[3, 2, 3, 3], &mut rng).unwrap(), 3);
        let (y, cache) = conv2d_forward(&x, &p, 1, 1).unwrap();
        let g = conv2d_backward(&Tensor::zeros(y.shape()).unwrap(), &cache, &p).unwrap();
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.params.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));

        let pt = params(Tensor::randn(&[2, 3, 4, 4], &mut rng).unwrap(), 3);
        let (y, cache) = conv_transpose2d_forward(&x, &pt, 2, 1).unwrap();
        let g = conv_transpose2d_backward(&Tensor::zeros(y.shape()).unwrap(), &cache, &pt).unwrap();
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.params.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_pixel_transpose_places_kernel_center() {
        let v = 2.5;
        let x = Tensor::<f64>::create(&[1, 1, 1, 1], v).unwrap();
        let w = Tensor::randn(&[1, 1, 4, 4], &mut Rng::new(8)).unwrap();
        let (y, _) = conv_transpose2d_forward(&x, &params(w.clone(), 1), 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // Output (i, j) receives kernel tap (i + p, j + p).
        let wd = w.data();
        let expected = [v * wd[5], v * wd[6], v * wd[9], v * wd[10]];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn zero_input_transpose_is_zero() {
        let x = Tensor::<f64>::zeros(&[2, 3, 4, 4]).unwrap();
        let w = Tensor::randn(&[3, 2, 4, 4], &mut Rng::new(1)).unwrap();
        let (y, _) = conv_transpose2d_forward(&x, &params(w, 2), 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 2, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transpose_input_gradient_is_conv_of_upstream() {
        let mut rng = Rng::new(21);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4], &mut rng).unwrap();
        let p = params(Tensor::randn(&[3, 2, 4, 4], &mut rng).unwrap(), 2);
        let (y, cache) = conv_transpose2d_forward(&x, &p, 2, 1).unwrap();
        let gy = Tensor::randn(y.shape(), &mut rng).unwrap();
        let gx = conv_transpose2d_backward(&gy, &cache, &p).unwrap().input.unwrap();
        let (conv_gy, _) = conv2d_forward(&gy, &params(p.weight.clone(), 3), 2, 1).unwrap();
        for (a, b) in gx.data().iter().zip(conv_gy.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_size_rules() {
        assert_eq!(conv_output_size(64, 4, 2, 1).unwrap(), 32);
        assert_eq!(conv_transpose_output_size(4, 4, 2, 1).unwrap(), 8);
        assert!(conv_transpose_output_size(1, 1, 1, 1).is_err());
    }
}
