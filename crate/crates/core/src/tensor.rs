//! Canonical and VLEN-blocked tensors, layout conversions and error norms.

use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::layer::ConvLayerSpec;

fn check(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { what, expected, found })
    }
}

/// Dense row-major 4-d tensor (`NCHW` activations, `KCRS` weights).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Element> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self { dims, data: vec![T::ZERO; dims.iter().product()] }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        check("tensor data length", dims.iter().product(), data.len())?;
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    for d in 0..dims[3] {
                        data.push(f([a, b, c, d]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn index(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        ((a * self.dims[1] + b) * self.dims[2] + c) * self.dims[3] + d
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize, d: usize) -> T {
        self.data[self.index(a, b, c, d)]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Element>(&self, f: impl FnMut(T) -> U) -> Tensor4<U> {
        Tensor4 { dims: self.dims, data: self.data.iter().copied().map(f).collect() }
    }

    pub(crate) fn expect_dims(&self, what: &'static str, dims: [usize; 4]) -> Result<()> {
        for (expected, found) in dims.into_iter().zip(self.dims) {
            check(what, expected, found)?;
        }
        Ok(())
    }
}

/// Physical geometry of a blocked activation `[N][C_b][H_p][W_p][vlen]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActivationLayout {
    pub n: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub halo_h: usize,
    pub halo_w: usize,
    pub vlen: usize,
}

impl ActivationLayout {
    pub fn blocks(&self) -> usize {
        self.channels.div_ceil(self.vlen)
    }

    pub fn rows(&self) -> usize {
        self.h + 2 * self.halo_h
    }

    pub fn cols(&self) -> usize {
        self.w + 2 * self.halo_w
    }

    pub fn row_stride(&self) -> usize {
        self.cols() * self.vlen
    }

    pub fn block_stride(&self) -> usize {
        self.rows() * self.row_stride()
    }

    pub fn len(&self) -> usize {
        self.n * self.blocks() * self.block_stride()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element index of lane 0 at physical `(row, col)`.
    #[inline]
    pub fn offset(&self, n: usize, block: usize, row: usize, col: usize) -> usize {
        ((n * self.blocks() + block) * self.rows() + row) * self.row_stride() + col * self.vlen
    }

    /// Element index of logical `(n, c, y, x)`.
    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        self.offset(n, c / self.vlen, y + self.halo_h, x + self.halo_w) + c % self.vlen
    }
}

/// Activation tensor in `[N][C_b][H_p][W_p][vlen]` layout with a zero halo of
/// `halo_h`/`halo_w` pixels around each feature map. Lanes past `channels`
/// in the last block are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedActivation<T> {
    layout: ActivationLayout,
    /// Quantization step for integer tensors (`real = scale * stored`); 1 for floats.
    pub scale: f32,
    data: Vec<T>,
}

impl<T: Element> BlockedActivation<T> {
    pub fn zeros(layout: ActivationLayout) -> Self {
        Self { layout, scale: 1.0, data: vec![T::ZERO; layout.len()] }
    }

    pub fn from_canonical(t: &Tensor4<T>, vlen: usize, halo_h: usize, halo_w: usize) -> Result<Self> {
        if vlen == 0 {
            return Err(Error::InvalidSpec("vlen must be at least 1"));
        }
        let [n, channels, h, w] = t.dims();
        let mut out = Self::zeros(ActivationLayout { n, channels, h, w, halo_h, halo_w, vlen });
        for i in 0..n {
            for c in 0..channels {
                for y in 0..h {
                    for x in 0..w {
                        let dst = out.layout.index(i, c, y, x);
                        out.data[dst] = t.get(i, c, y, x);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn to_canonical(&self) -> Tensor4<T> {
        let l = self.layout;
        Tensor4::from_fn([l.n, l.channels, l.h, l.w], |[i, c, y, x]| self.data[l.index(i, c, y, x)])
    }

    pub fn layout(&self) -> &ActivationLayout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.layout.index(n, c, y, x)]
    }

    /// Copy with a different halo width.
    pub fn with_halo(&self, halo_h: usize, halo_w: usize) -> Self {
        let l = self.layout;
        if (l.halo_h, l.halo_w) == (halo_h, halo_w) {
            return self.clone();
        }
        let mut out = Self::zeros(ActivationLayout { halo_h, halo_w, ..l });
        out.scale = self.scale;
        for i in 0..l.n {
            for b in 0..l.blocks() {
                for y in 0..l.h {
                    let src = l.offset(i, b, y + l.halo_h, l.halo_w);
                    let dst = out.layout.offset(i, b, y + halo_h, halo_w);
                    let len = l.w * l.vlen;
                    out.data[dst..dst + len].copy_from_slice(&self.data[src..src + len]);
                }
            }
        }
        out
    }

    pub fn zero_halo(&mut self) {
        let l = self.layout;
        let v = l.vlen;
        for i in 0..l.n {
            for b in 0..l.blocks() {
                for row in 0..l.rows() {
                    let base = l.offset(i, b, row, 0);
                    if row < l.halo_h || row >= l.halo_h + l.h {
                        self.data[base..base + l.row_stride()].fill(T::ZERO);
                    } else {
                        self.data[base..base + l.halo_w * v].fill(T::ZERO);
                        let right = base + (l.halo_w + l.w) * v;
                        self.data[right..base + l.row_stride()].fill(T::ZERO);
                    }
                }
            }
        }
    }

    /// True when every halo element is zero.
    pub fn halo_is_zero(&self) -> bool {
        let l = self.layout;
        (0..l.n).all(|i| {
            (0..l.blocks()).all(|b| {
                (0..l.rows()).all(|row| {
                    (0..l.cols()).all(|col| {
                        let inside = row >= l.halo_h && row < l.halo_h + l.h && col >= l.halo_w && col < l.halo_w + l.w;
                        let base = l.offset(i, b, row, col);
                        inside || self.data[base..base + l.vlen].iter().all(|&v| v == T::ZERO)
                    })
                })
            })
        })
    }

    /// True when every lane past `channels` in the last block is zero.
    pub fn tail_lanes_are_zero(&self) -> bool {
        let l = self.layout;
        let used = l.channels - (l.blocks() - 1) * l.vlen;
        if used == l.vlen {
            return true;
        }
        (0..l.n).all(|i| {
            (0..l.rows()).all(|row| {
                (0..l.cols()).all(|col| {
                    let base = l.offset(i, l.blocks() - 1, row, col);
                    self.data[base + used..base + l.vlen].iter().all(|&v| v == T::ZERO)
                })
            })
        })
    }
}

/// Geometry of a blocked weight tensor `[K_b][C_b][R][S][vlen_c][vlen_k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WeightLayout {
    pub k: usize,
    pub c: usize,
    pub r: usize,
    pub s: usize,
    pub vlen: usize,
}

impl WeightLayout {
    pub fn k_blocks(&self) -> usize {
        self.k.div_ceil(self.vlen)
    }

    pub fn c_blocks(&self) -> usize {
        self.c.div_ceil(self.vlen)
    }

    /// Elements in one `(k_b, c_b)` block.
    pub fn block_len(&self) -> usize {
        self.r * self.s * self.vlen * self.vlen
    }

    pub fn len(&self) -> usize {
        self.k_blocks() * self.c_blocks() * self.block_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element index of `[k_b][c_b][r][s][0][0]`.
    #[inline]
    pub fn offset(&self, kb: usize, cb: usize, r: usize, s: usize) -> usize {
        (kb * self.c_blocks() + cb) * self.block_len() + (r * self.s + s) * self.vlen * self.vlen
    }

    #[inline]
    pub fn index(&self, k: usize, c: usize, r: usize, s: usize) -> usize {
        self.offset(k / self.vlen, c / self.vlen, r, s) + (c % self.vlen) * self.vlen + k % self.vlen
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockedWeight<T> {
    layout: WeightLayout,
    pub scale: f32,
    data: Vec<T>,
}

impl<T: Element> BlockedWeight<T> {
    pub fn zeros(layout: WeightLayout) -> Self {
        Self { layout, scale: 1.0, data: vec![T::ZERO; layout.len()] }
    }

    pub fn from_canonical(t: &Tensor4<T>, vlen: usize) -> Result<Self> {
        if vlen == 0 {
            return Err(Error::InvalidSpec("vlen must be at least 1"));
        }
        let [k, c, r, s] = t.dims();
        let mut out = Self::zeros(WeightLayout { k, c, r, s, vlen });
        for ko in 0..k {
            for ci in 0..c {
                for y in 0..r {
                    for x in 0..s {
                        let dst = out.layout.index(ko, ci, y, x);
                        out.data[dst] = t.get(ko, ci, y, x);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn to_canonical(&self) -> Tensor4<T> {
        let l = self.layout;
        Tensor4::from_fn([l.k, l.c, l.r, l.s], |[k, c, r, s]| self.data[l.index(k, c, r, s)])
    }

    pub fn layout(&self) -> &WeightLayout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, k: usize, c: usize, r: usize, s: usize) -> T {
        self.data[self.layout.index(k, c, r, s)]
    }

    /// True when lanes past `c` (rows) and past `k` (columns) are zero.
    pub fn tail_lanes_are_zero(&self) -> bool {
        let l = self.layout;
        let v = l.vlen;
        (0..l.k_blocks()).all(|kb| {
            (0..l.c_blocks()).all(|cb| {
                (0..l.r).all(|r| {
                    (0..l.s).all(|s| {
                        let base = l.offset(kb, cb, r, s);
                        (0..v).all(|ci| {
                            (0..v).all(|ki| {
                                let live = cb * v + ci < l.c && kb * v + ki < l.k;
                                live || self.data[base + ci * v + ki] == T::ZERO
                            })
                        })
                    })
                })
            })
        })
    }
}

/// Blocks an `N×C×H×W` input for `spec`, materializing the padding as a halo.
pub fn to_blocked_activation<T: Element>(t: &Tensor4<T>, spec: &ConvLayerSpec) -> Result<BlockedActivation<T>> {
    t.expect_dims("input tensor", [spec.n, spec.c, spec.h, spec.w])?;
    BlockedActivation::from_canonical(t, spec.vlen, spec.pad_h, spec.pad_w)
}

pub fn from_blocked_activation<T: Element>(b: &BlockedActivation<T>, spec: &ConvLayerSpec) -> Result<Tensor4<T>> {
    let l = b.layout();
    check("batch", spec.n, l.n)?;
    check("channels", spec.c, l.channels)?;
    check("height", spec.h, l.h)?;
    check("width", spec.w, l.w)?;
    check("vlen", spec.vlen, l.vlen)?;
    Ok(b.to_canonical())
}

pub fn to_blocked_weight<T: Element>(t: &Tensor4<T>, spec: &ConvLayerSpec) -> Result<BlockedWeight<T>> {
    t.expect_dims("weight tensor", [spec.k, spec.c, spec.r, spec.s])?;
    BlockedWeight::from_canonical(t, spec.vlen)
}

pub fn from_blocked_weight<T: Element>(b: &BlockedWeight<T>, spec: &ConvLayerSpec) -> Result<Tensor4<T>> {
    let l = b.layout();
    check("output channels", spec.k, l.k)?;
    check("input channels", spec.c, l.c)?;
    check("filter height", spec.r, l.r)?;
    check("filter width", spec.s, l.s)?;
    check("vlen", spec.vlen, l.vlen)?;
    Ok(b.to_canonical())
}

/// Absolute and relative L∞ / L2 error norms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorNorms {
    pub linf_abs: f64,
    pub l2_abs: f64,
    pub linf_rel: f64,
    pub l2_rel: f64,
}

impl ErrorNorms {
    /// Relative norms divide by `max|ref|` and `‖ref‖₂`; when the reference
    /// norm is zero they fall back to the absolute value.
    pub fn between<T: Element>(reference: &[T], candidate: &[T]) -> Result<Self> {
        check("norm operands", reference.len(), candidate.len())?;
        let (mut linf, mut sq, mut ref_max, mut ref_sq) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for (&a, &b) in reference.iter().zip(candidate) {
            let (a, b) = (a.to_f64(), b.to_f64());
            let d = libm::fabs(a - b);
            linf = linf.max(d);
            sq += d * d;
            ref_max = ref_max.max(libm::fabs(a));
            ref_sq += a * a;
        }
        let l2 = libm::sqrt(sq);
        let ref_l2 = libm::sqrt(ref_sq);
        Ok(Self {
            linf_abs: linf,
            l2_abs: l2,
            linf_rel: if ref_max > 0.0 { linf / ref_max } else { linf },
            l2_rel: if ref_l2 > 0.0 { l2 / ref_l2 } else { l2 },
        })
    }

    pub fn within(&self, linf_rel: f64, l2_rel: f64) -> bool {
        self.linf_rel <= linf_rel && self.l2_rel <= l2_rel
    }
}

pub fn error_norms<T: Element>(reference: &Tensor4<T>, candidate: &Tensor4<T>) -> Result<ErrorNorms> {
    candidate.expect_dims("norm operands", reference.dims())?;
    ErrorNorms::between(reference.as_slice(), candidate.as_slice())
}
