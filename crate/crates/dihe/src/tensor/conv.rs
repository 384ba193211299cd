//! Spatial ops: convolution (im2col + gemm), pooling, nearest upsampling.
//!
//! Layout is channel-last throughout: activations are (n, h, w, c) and
//! kernels are (kh, kw, in_c, out_c), so the im2col patch matrix multiplies
//! the flattened kernel directly.

use super::tape::{Tape, Var};
use super::{Scalar, Tensor};

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= kernel,
        "conv: input {} + 2*pad {} smaller than kernel {}",
        input,
        pad,
        kernel
    );
    (input + 2 * pad - kernel) / stride + 1
}

/// Patch matrix: rows are (n, oh, ow), columns are (kh, kw, ic).
fn im2col<F: Scalar>(
    x: &[F],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let k = kh * kw * c;
    let mut cols = vec![F::zero(); n * oh * ow * k];
    for bi in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * k;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let dst = row + (ky * kw + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of a patch matrix back onto the input grid.
#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    cols: &[F],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let k = kh * kw * c;
    let mut x = vec![F::zero(); n * h * w * c];
    for bi in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * k;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let src = row + (ky * kw + kx) * c;
                        for ci in 0..c {
                            x[dst + ci] = x[dst + ci] + cols[src + ci];
                        }
                    }
                }
            }
        }
    }
    x
}

impl<F: Scalar> Tape<F> {
    /// 2-D convolution with zero padding: (n,h,w,c) * (kh,kw,c,oc) -> (n,oh,ow,oc).
    pub fn conv2d(&self, input: Var, kernel: Var, stride: usize, pad: usize) -> Var {
        assert!(stride >= 1, "conv2d stride must be >= 1");
        let x = self.value(input);
        let k = self.value(kernel);
        assert_eq!(x.shape().len(), 4, "conv2d input must be rank 4, got {:?}", x.shape());
        assert_eq!(k.shape().len(), 4, "conv2d kernel must be rank 4, got {:?}", k.shape());
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw, ic, oc) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        assert_eq!(c, ic, "conv2d: input channels {} vs kernel {}", c, ic);
        let oh = conv_out_dim(h, kh, stride, pad);
        let ow = conv_out_dim(w, kw, stride, pad);
        let m = n * oh * ow;
        let kd = kh * kw * ic;
        let cols = im2col(x.data(), n, h, w, c, kh, kw, stride, pad, oh, ow);
        let mut out = vec![F::zero(); m * oc];
        F::gemm(m, kd, oc, &cols, false, k.data(), false, &mut out);
        // The forward patch matrix is kept for the backward pass; grads for
        // constant operands are skipped and replaced by empty placeholders.
        let needs_dx = self.requires(input);
        let needs_dk = self.requires(kernel);
        self.push(
            Tensor::new(vec![n, oh, ow, oc], out),
            vec![input, kernel],
            Some(Box::new(move |g| {
                let dx = if needs_dx {
                    // dcols = g * k^T, scattered back onto the grid.
                    let mut dcols = vec![F::zero(); m * kd];
                    F::gemm(m, oc, kd, g.data(), false, k.data(), true, &mut dcols);
                    Tensor::new(
                        vec![n, h, w, c],
                        col2im(&dcols, n, h, w, c, kh, kw, stride, pad, oh, ow),
                    )
                } else {
                    Tensor::zeros(vec![0])
                };
                let dk = if needs_dk {
                    // dk = cols^T * g
                    let mut dk = vec![F::zero(); kd * oc];
                    F::gemm(kd, m, oc, &cols, true, g.data(), false, &mut dk);
                    Tensor::new(vec![kh, kw, ic, oc], dk)
                } else {
                    Tensor::zeros(vec![0])
                };
                vec![dx, dk]
            })),
        )
    }

    pub fn max_pool2d(&self, input: Var, window: usize, stride: usize) -> Var {
        let x = self.value(input);
        assert_eq!(x.shape().len(), 4, "max_pool2d input must be rank 4");
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let oh = conv_out_dim(h, window, stride, 0);
        let ow = conv_out_dim(w, window, stride, 0);
        let mut out = vec![F::zero(); n * oh * ow * c];
        let mut argmax = vec![0usize; n * oh * ow * c];
        for bi in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ci in 0..c {
                        let mut best = F::neg_infinity();
                        let mut best_idx = 0;
                        for ky in 0..window {
                            for kx in 0..window {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                let idx = ((bi * h + iy) * w + ix) * c + ci;
                                if x.data()[idx] > best {
                                    best = x.data()[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((bi * oh + oy) * ow + ox) * c + ci;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let in_len = x.len();
        let in_shape = x.shape().to_vec();
        self.unary(input, Tensor::new(vec![n, oh, ow, c], out), move |g| {
            let mut dx = vec![F::zero(); in_len];
            for (o, &src) in argmax.iter().enumerate() {
                dx[src] = dx[src] + g.data()[o];
            }
            Tensor::new(in_shape.clone(), dx)
        })
    }

    /// Channel-wise spatial max: (n,h,w,c) -> (n,c). This is the MAC pooling.
    pub fn global_max_pool(&self, input: Var) -> Var {
        let x = self.value(input);
        assert_eq!(x.shape().len(), 4, "global_max_pool input must be rank 4");
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let p = h * w;
        let mut out = vec![F::neg_infinity(); n * c];
        let mut argmax = vec![0usize; n * c];
        for bi in 0..n {
            for pi in 0..p {
                for ci in 0..c {
                    let idx = (bi * p + pi) * c + ci;
                    let o = bi * c + ci;
                    if x.data()[idx] > out[o] {
                        out[o] = x.data()[idx];
                        argmax[o] = idx;
                    }
                }
            }
        }
        let in_len = x.len();
        let in_shape = x.shape().to_vec();
        self.unary(input, Tensor::new(vec![n, c], out), move |g| {
            let mut dx = vec![F::zero(); in_len];
            for (o, &src) in argmax.iter().enumerate() {
                dx[src] = dx[src] + g.data()[o];
            }
            Tensor::new(in_shape.clone(), dx)
        })
    }

    /// Channel-wise spatial mean: (n,h,w,c) -> (n,c).
    pub fn global_avg_pool(&self, input: Var) -> Var {
        let x = self.value(input);
        assert_eq!(x.shape().len(), 4, "global_avg_pool input must be rank 4");
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let p = h * w;
        let pf = F::from_f64(p as f64);
        let mut out = vec![F::zero(); n * c];
        for bi in 0..n {
            for pi in 0..p {
                for ci in 0..c {
                    out[bi * c + ci] = out[bi * c + ci] + x.data()[(bi * p + pi) * c + ci];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v / pf;
        }
        let in_shape = x.shape().to_vec();
        self.unary(input, Tensor::new(vec![n, c], out), move |g| {
            let mut dx = vec![F::zero(); n * p * c];
            for bi in 0..n {
                for pi in 0..p {
                    for ci in 0..c {
                        dx[(bi * p + pi) * c + ci] = g.data()[bi * c + ci] / pf;
                    }
                }
            }
            Tensor::new(in_shape.clone(), dx)
        })
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn nearest_upsample(&self, input: Var, factor: usize) -> Var {
        assert!(factor >= 1, "upsample factor must be >= 1");
        let x = self.value(input);
        assert_eq!(x.shape().len(), 4, "nearest_upsample input must be rank 4");
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![F::zero(); n * oh * ow * c];
        for bi in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let src = ((bi * h + oy / factor) * w + ox / factor) * c;
                    let dst = ((bi * oh + oy) * ow + ox) * c;
                    out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.unary(input, Tensor::new(vec![n, oh, ow, c], out), move |g| {
            let mut dx = vec![F::zero(); n * h * w * c];
            for bi in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let dst = ((bi * h + oy / factor) * w + ox / factor) * c;
                        let src = ((bi * oh + oy) * ow + ox) * c;
                        for ci in 0..c {
                            dx[dst + ci] = dx[dst + ci] + g.data()[src + ci];
                        }
                    }
                }
            }
            Tensor::new(in_shape.clone(), dx)
        })
    }
}
