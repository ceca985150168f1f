//! Slow, obviously-correct convolution passes used as ground truth.
//!
//! Floating-point oracles accumulate in `f64` and the integer oracle in
//! `i64`, so they never share the engine's rounding or overflow behavior.
//! Padding is handled with bounds checks on logical coordinates, never with
//! a materialized halo.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::element::Element;
use crate::error::Result;
use crate::layer::ConvLayerSpec;
use crate::tensor::Tensor4;

/// Output positions `o < out_len` whose input coordinate
/// `stride * o + tap - pad` lies inside `[0, extent)`.
pub(crate) fn valid_outputs(extent: usize, pad: usize, tap: usize, stride: usize, out_len: usize) -> Range<usize> {
    // stride*o + tap >= pad
    let lo = pad.saturating_sub(tap).div_ceil(stride);
    // stride*o + tap < extent + pad
    let hi = if extent + pad > tap { (extent + pad - tap).div_ceil(stride) } else { 0 };
    lo.min(out_len)..hi.min(out_len).max(lo.min(out_len))
}

fn check_shapes<T: Element>(
    spec: &ConvLayerSpec,
    a: (&Tensor4<T>, &'static str, [usize; 4]),
    b: (&Tensor4<T>, &'static str, [usize; 4]),
) -> Result<()> {
    spec.validate()?;
    a.0.expect_dims(a.1, a.2)?;
    b.0.expect_dims(b.1, b.2)
}

/// `O[n][k][oj][oi] += I[n][c][stride*oj + r - pad][stride*oi + s - pad] * W[k][c][r][s]`.
pub fn conv_forward_naive<T: Element>(spec: &ConvLayerSpec, input: &Tensor4<T>, weight: &Tensor4<T>) -> Result<Tensor4<T>> {
    let s = *spec;
    check_shapes(spec, (input, "input", [s.n, s.c, s.h, s.w]), (weight, "weight", [s.k, s.c, s.r, s.s]))?;
    let (p, q) = (s.p(), s.q());
    let mut out = vec![0.0f64; s.n * s.k * p * q];
    for n in 0..s.n {
        for k in 0..s.k {
            let plane = &mut out[(n * s.k + k) * p * q..][..p * q];
            for c in 0..s.c {
                for r in 0..s.r {
                    let rows = valid_outputs(s.h, s.pad_h, r, s.stride, p);
                    for t in 0..s.s {
                        let wv = weight.get(k, c, r, t).to_f64();
                        let cols = valid_outputs(s.w, s.pad_w, t, s.stride, q);
                        for oj in rows.clone() {
                            let iy = s.stride * oj + r - s.pad_h;
                            for oi in cols.clone() {
                                let ix = s.stride * oi + t - s.pad_w;
                                plane[oj * q + oi] += input.get(n, c, iy, ix).to_f64() * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor4::from_vec([s.n, s.k, p, q], out.into_iter().map(T::from_f64).collect())
}

/// `dI[n][c][stride*oj + r - pad][stride*oi + s - pad] += dO[n][k][oj][oi] * W[k][c][r][s]`;
/// contributions that land in the padding are dropped.
pub fn conv_backward_naive<T: Element>(spec: &ConvLayerSpec, grad_output: &Tensor4<T>, weight: &Tensor4<T>) -> Result<Tensor4<T>> {
    let s = *spec;
    let (p, q) = (s.p(), s.q());
    check_shapes(spec, (grad_output, "output gradient", [s.n, s.k, p, q]), (weight, "weight", [s.k, s.c, s.r, s.s]))?;
    let mut out = vec![0.0f64; s.n * s.c * s.h * s.w];
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = &mut out[(n * s.c + c) * s.h * s.w..][..s.h * s.w];
            for k in 0..s.k {
                for r in 0..s.r {
                    let rows = valid_outputs(s.h, s.pad_h, r, s.stride, p);
                    for t in 0..s.s {
                        let wv = weight.get(k, c, r, t).to_f64();
                        let cols = valid_outputs(s.w, s.pad_w, t, s.stride, q);
                        for oj in rows.clone() {
                            let iy = s.stride * oj + r - s.pad_h;
                            for oi in cols.clone() {
                                let ix = s.stride * oi + t - s.pad_w;
                                plane[iy * s.w + ix] += grad_output.get(n, k, oj, oi).to_f64() * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor4::from_vec([s.n, s.c, s.h, s.w], out.into_iter().map(T::from_f64).collect())
}

/// `dW[k][c][r][s] += I[n][c][stride*oj + r - pad][stride*oi + s - pad] * dO[n][k][oj][oi]`.
pub fn conv_update_naive<T: Element>(spec: &ConvLayerSpec, input: &Tensor4<T>, grad_output: &Tensor4<T>) -> Result<Tensor4<T>> {
    let s = *spec;
    let (p, q) = (s.p(), s.q());
    check_shapes(spec, (input, "input", [s.n, s.c, s.h, s.w]), (grad_output, "output gradient", [s.n, s.k, p, q]))?;
    let mut out = vec![0.0f64; s.k * s.c * s.r * s.s];
    for k in 0..s.k {
        for c in 0..s.c {
            for r in 0..s.r {
                let rows = valid_outputs(s.h, s.pad_h, r, s.stride, p);
                for t in 0..s.s {
                    let cols = valid_outputs(s.w, s.pad_w, t, s.stride, q);
                    let mut acc = 0.0f64;
                    for n in 0..s.n {
                        for oj in rows.clone() {
                            let iy = s.stride * oj + r - s.pad_h;
                            for oi in cols.clone() {
                                let ix = s.stride * oi + t - s.pad_w;
                                acc += input.get(n, c, iy, ix).to_f64() * grad_output.get(n, k, oj, oi).to_f64();
                            }
                        }
                    }
                    out[((k * s.c + c) * s.r + r) * s.s + t] = acc;
                }
            }
        }
    }
    Tensor4::from_vec([s.k, s.c, s.r, s.s], out.into_iter().map(T::from_f64).collect())
}

/// Exact integer forward convolution with 64-bit accumulation.
pub fn int_conv_forward_oracle(spec: &ConvLayerSpec, input: &Tensor4<i16>, weight: &Tensor4<i16>) -> Result<Tensor4<i64>> {
    let s = *spec;
    check_shapes(spec, (input, "input", [s.n, s.c, s.h, s.w]), (weight, "weight", [s.k, s.c, s.r, s.s]))?;
    let (p, q) = (s.p(), s.q());
    let mut out = vec![0i64; s.n * s.k * p * q];
    for n in 0..s.n {
        for k in 0..s.k {
            let plane = &mut out[(n * s.k + k) * p * q..][..p * q];
            for c in 0..s.c {
                for r in 0..s.r {
                    let rows = valid_outputs(s.h, s.pad_h, r, s.stride, p);
                    for t in 0..s.s {
                        let wv = weight.get(k, c, r, t) as i64;
                        let cols = valid_outputs(s.w, s.pad_w, t, s.stride, q);
                        for oj in rows.clone() {
                            let iy = s.stride * oj + r - s.pad_h;
                            for oi in cols.clone() {
                                let ix = s.stride * oi + t - s.pad_w;
                                plane[oj * q + oi] += input.get(n, c, iy, ix) as i64 * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor4::from_vec([s.n, s.k, p, q], out)
}

/// `(C·R·S) × (P·Q)` matrix of flattened receptive fields for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Im2colBuffer {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Im2colBuffer {
    /// Row `(c·R + r)·S + s`, column `oj·Q + oi`; zero where the field leaves the input.
    pub fn build(spec: &ConvLayerSpec, input: &Tensor4<f32>, image: usize) -> Self {
        let s = *spec;
        let (p, q) = (s.p(), s.q());
        let (rows, cols) = (s.c * s.r * s.s, p * q);
        let mut data = vec![0.0f32; rows * cols];
        for c in 0..s.c {
            for r in 0..s.r {
                for t in 0..s.s {
                    let row = &mut data[((c * s.r + r) * s.s + t) * cols..][..cols];
                    for oj in valid_outputs(s.h, s.pad_h, r, s.stride, p) {
                        let iy = s.stride * oj + r - s.pad_h;
                        for oi in valid_outputs(s.w, s.pad_w, t, s.stride, q) {
                            row[oj * q + oi] = input.get(image, c, iy, s.stride * oi + t - s.pad_w);
                        }
                    }
                }
            }
        }
        Self { rows, cols, data }
    }
}

/// Forward convolution as im2col followed by a plain `K × CRS × PQ` matrix multiply per image.
pub fn conv_forward_im2col(spec: &ConvLayerSpec, input: &Tensor4<f32>, weight: &Tensor4<f32>) -> Result<Tensor4<f32>> {
    let s = *spec;
    check_shapes(spec, (input, "input", [s.n, s.c, s.h, s.w]), (weight, "weight", [s.k, s.c, s.r, s.s]))?;
    let (p, q) = (s.p(), s.q());
    // KCRS is already the row-major K × (C·R·S) matrix.
    let a = weight.as_slice();
    let depth = s.c * s.r * s.s;
    let mut out = Tensor4::zeros([s.n, s.k, p, q]);
    for n in 0..s.n {
        let cols = Im2colBuffer::build(spec, input, n);
        let o = &mut out.as_mut_slice()[n * s.k * p * q..][..s.k * p * q];
        for i in 0..s.k {
            let c_row = &mut o[i * cols.cols..][..cols.cols];
            for d in 0..depth {
                let av = a[i * depth + d];
                let b_row = &cols.data[d * cols.cols..][..cols.cols];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
    }
    Ok(out)
}

/// Elementwise `max(x, 0)` after an optional per-channel bias, on an `NKPQ` tensor.
pub fn apply_bias_relu<T: Element>(t: &mut Tensor4<T>, bias: Option<&[f32]>, relu: bool) {
    let [n, k, p, q] = t.dims();
    let data = t.as_mut_slice();
    for i in 0..n {
        for ch in 0..k {
            for v in &mut data[(i * k + ch) * p * q..][..p * q] {
                if let Some(b) = bias {
                    *v = v.add_bias(b[ch]);
                }
                if relu {
                    *v = v.relu();
                }
            }
        }
    }
}
