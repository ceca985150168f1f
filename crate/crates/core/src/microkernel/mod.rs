//! Specialized small-convolution kernels.
//!
//! A [`MicrokernelDescriptor`] fixes everything a kernel depends on (tile
//! shape, filter taps, stride, tensor strides, datatype, hints). Building it
//! precomputes the pixel and tap offset tables and selects a body that is
//! monomorphized over `vlen` and compiled for the best [`Isa`] available.
//! Each call takes three compute offsets and three prefetch offsets; the
//! prefetch offsets are hints and never change the result.

pub mod blocking;
mod bodies;
mod isa;

use alloc::vec::Vec;
use core::fmt;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::prefetch;

pub use blocking::{select_register_blocking, BlockingConfig, RegisterBlocking};
pub use isa::Isa;

pub const DEFAULT_ACC_CHAIN_LIMIT: usize = 512;
pub const DEFAULT_I16_BOUND: u32 = 1 << 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pass {
    Forward,
    Update,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelDtype {
    F32,
    /// int16 inputs, int32 accumulation.
    I16,
}

/// Specialization parameters of one microkernel.
///
/// For the forward pass the tile is the register block `RB_P×RB_Q` of
/// output pixels; for the update pass it is the spatial block `B_P×B_Q` of
/// output-gradient pixels reduced into one `vlen×vlen` weight block, for a
/// single filter tap chosen by the caller's input offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MicrokernelDescriptor {
    pub pass: Pass,
    pub dtype: KernelDtype,
    pub vlen: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub r: usize,
    pub s: usize,
    pub stride: usize,
    /// Elements between vertically adjacent input pixels.
    pub input_row_stride: usize,
    /// Elements between vertically adjacent output (or output-gradient) pixels.
    pub output_row_stride: usize,
    /// Elements between horizontally adjacent output pixels (`vlen` for dense outputs).
    pub output_pixel_stride: usize,
    pub prefetch: bool,
    pub streaming_stores: bool,
    /// Products summed into one int32 partial before it is flushed (int16 only).
    pub acc_chain_limit: usize,
    /// Declared magnitude bounds of int16 inputs and weights.
    pub input_bound: u32,
    pub weight_bound: u32,
}

impl MicrokernelDescriptor {
    /// Forward kernel over an `rb_p×rb_q` tile with densely packed operands.
    pub fn forward(vlen: usize, (rb_p, rb_q): (usize, usize), (r, s): (usize, usize), stride: usize) -> Self {
        Self {
            pass: Pass::Forward,
            dtype: KernelDtype::F32,
            vlen,
            tile_rows: rb_p,
            tile_cols: rb_q,
            r,
            s,
            stride,
            input_row_stride: ((rb_q.max(1) - 1) * stride + s) * vlen,
            output_row_stride: rb_q * vlen,
            output_pixel_stride: vlen,
            prefetch: true,
            streaming_stores: false,
            acc_chain_limit: DEFAULT_ACC_CHAIN_LIMIT,
            input_bound: DEFAULT_I16_BOUND,
            weight_bound: DEFAULT_I16_BOUND,
        }
    }

    /// Update kernel over a `b_p×b_q` block with densely packed operands.
    pub fn update(vlen: usize, (b_p, b_q): (usize, usize), stride: usize) -> Self {
        Self {
            pass: Pass::Update,
            input_row_stride: ((b_q.max(1) - 1) * stride + 1) * vlen,
            ..Self::forward(vlen, (b_p, b_q), (1, 1), stride)
        }
    }

    pub fn with_strides(mut self, input_row: usize, output_row: usize, output_pixel: usize) -> Self {
        self.input_row_stride = input_row;
        self.output_row_stride = output_row;
        self.output_pixel_stride = output_pixel;
        self
    }

    pub fn with_dtype(mut self, dtype: KernelDtype) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn with_prefetch(mut self, on: bool) -> Self {
        self.prefetch = on;
        self
    }

    pub fn with_streaming_stores(mut self, on: bool) -> Self {
        self.streaming_stores = on;
        self
    }

    pub fn with_chain_limit(mut self, limit: usize, input_bound: u32, weight_bound: u32) -> Self {
        self.acc_chain_limit = limit;
        self.input_bound = input_bound;
        self.weight_bound = weight_bound;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg| Err(Error::InvalidDescriptor(msg));
        if self.vlen == 0 || self.tile_rows == 0 || self.tile_cols == 0 {
            return bad("vlen and tile extents must be positive");
        }
        if self.r == 0 || self.s == 0 || self.stride == 0 {
            return bad("filter extents and stride must be positive");
        }
        if self.output_pixel_stride < self.vlen {
            return bad("output pixels overlap");
        }
        if self.tile_rows > 1 && self.output_row_stride < (self.tile_cols - 1) * self.output_pixel_stride + self.vlen {
            return bad("output rows overlap");
        }
        if self.input_row_stride < self.vlen {
            return bad("input row stride is shorter than one pixel");
        }
        match (self.pass, self.dtype) {
            (Pass::Update, KernelDtype::I16) => return bad("int16 is only supported for the forward pass"),
            (Pass::Update, _) if self.r != 1 || self.s != 1 => return bad("update kernels handle a single filter tap"),
            (_, KernelDtype::I16) => self.certify_chain()?,
            _ => {}
        }
        Ok(())
    }

    /// Largest magnitude one int32 partial can reach between flushes.
    pub fn chain_worst_case(&self) -> u64 {
        self.acc_chain_limit as u64 * self.input_bound as u64 * self.weight_bound as u64
    }

    fn certify_chain(&self) -> Result<()> {
        if self.acc_chain_limit == 0 {
            return Err(Error::InvalidDescriptor("accumulation chain limit must be positive"));
        }
        let worst = self.chain_worst_case();
        if worst > i32::MAX as u64 {
            return Err(Error::OverflowRisk { worst_case: worst, budget: i32::MAX as u64 });
        }
        Ok(())
    }

    /// Checks that a full int16 reduction over `channels` input channels
    /// stays inside the int32 output accumulator with a 2× margin.
    pub fn certify_i16_reduction(&self, channels: usize) -> Result<()> {
        self.certify_chain()?;
        let worst = (self.r * self.s * channels) as u64 * 2 * self.input_bound as u64 * self.weight_bound as u64;
        if worst > i32::MAX as u64 {
            return Err(Error::OverflowRisk { worst_case: worst, budget: i32::MAX as u64 });
        }
        Ok(())
    }
}

/// Element offsets of the three operands of one kernel call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct Offsets {
    pub input: usize,
    pub weight: usize,
    pub output: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Pixel {
    pub input: usize,
    pub output: usize,
}

/// Input element type of a forward kernel and its accumulator type.
pub trait KernelElement: Element {
    type Acc: Element;
    const DTYPE: KernelDtype;

    #[doc(hidden)]
    fn forward_body(vlen: usize, isa: Isa) -> ForwardBody<Self>;
}

#[doc(hidden)]
pub type ForwardBody<T> = unsafe fn(&CompiledKernel<T>, *const T, *const T, *mut <T as KernelElement>::Acc);

impl KernelElement for f32 {
    type Acc = f32;
    const DTYPE: KernelDtype = KernelDtype::F32;

    fn forward_body(vlen: usize, isa: Isa) -> ForwardBody<Self> {
        bodies::select_forward_f32(vlen, isa)
    }
}

impl KernelElement for i16 {
    type Acc = i32;
    const DTYPE: KernelDtype = KernelDtype::I16;

    fn forward_body(vlen: usize, isa: Isa) -> ForwardBody<Self> {
        bodies::select_forward_i16(vlen, isa)
    }
}

/// Forward microkernel specialized for one descriptor. Immutable and
/// callable from many threads at once.
#[derive(Clone)]
pub struct CompiledKernel<T: KernelElement> {
    desc: MicrokernelDescriptor,
    isa: Isa,
    pixels: Vec<Pixel>,
    taps: Vec<usize>,
    extents: Offsets,
    body: ForwardBody<T>,
}

impl<T: KernelElement> fmt::Debug for CompiledKernel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompiledKernel").field("desc", &self.desc).field("isa", &self.isa).finish()
    }
}

fn check_bounds(at: Offsets, extents: Offsets, lens: (usize, usize, usize)) -> Result<()> {
    let fits = |off: usize, ext: usize, len: usize| off.checked_add(ext).is_some_and(|end| end <= len);
    if fits(at.input, extents.input, lens.0) && fits(at.weight, extents.weight, lens.1) && fits(at.output, extents.output, lens.2) {
        Ok(())
    } else {
        Err(Error::PlanTensorMismatch("kernel operand out of bounds"))
    }
}

impl<T: KernelElement> CompiledKernel<T> {
    pub fn descriptor(&self) -> &MicrokernelDescriptor {
        &self.desc
    }

    pub fn isa(&self) -> Isa {
        self.isa
    }

    /// Elements touched past each compute offset.
    pub fn extents(&self) -> Offsets {
        self.extents
    }

    /// Runs the kernel: `output[at.output..] += conv(input[at.input..], weight[at.weight..])`.
    pub fn run(&self, input: &[T], weight: &[T], output: &mut [T::Acc], at: Offsets, prefetch: Offsets) -> Result<()> {
        check_bounds(at, self.extents, (input.len(), weight.len(), output.len()))?;
        // SAFETY: all three compute regions were checked above; prefetch
        // pointers are only used as hints.
        unsafe {
            self.run_raw(
                input.as_ptr().add(at.input),
                weight.as_ptr().add(at.weight),
                output.as_mut_ptr().add(at.output),
                [
                    input.as_ptr().wrapping_add(prefetch.input) as *const u8,
                    weight.as_ptr().wrapping_add(prefetch.weight) as *const u8,
                    output.as_ptr().wrapping_add(prefetch.output) as *const u8,
                ],
            )
        }
        Ok(())
    }

    /// # Safety
    /// `input`, `weight` and `output` must be valid for the kernel's
    /// [`extents`](Self::extents), and no other thread may access the
    /// output region concurrently.
    #[inline]
    pub(crate) unsafe fn run_raw(&self, input: *const T, weight: *const T, output: *mut T::Acc, pf: [*const u8; 3]) {
        if self.desc.prefetch {
            let sizes = [
                self.extents.input * core::mem::size_of::<T>(),
                self.extents.weight * core::mem::size_of::<T>(),
                self.extents.output * core::mem::size_of::<T::Acc>(),
            ];
            for (p, bytes) in pf.into_iter().zip(sizes) {
                prefetch::l2_region(p, bytes, 16);
            }
        }
        (self.body)(self, input, weight, output);
        if self.desc.streaming_stores {
            prefetch::store_fence();
        }
    }

    pub(crate) fn pixels(&self) -> &[Pixel] {
        &self.pixels
    }

    pub(crate) fn taps(&self) -> &[usize] {
        &self.taps
    }
}

fn forward_geometry(desc: &MicrokernelDescriptor) -> (Vec<Pixel>, Vec<usize>, Offsets) {
    let v = desc.vlen;
    let mut pixels = Vec::with_capacity(desc.tile_rows * desc.tile_cols);
    for p in 0..desc.tile_rows {
        for q in 0..desc.tile_cols {
            pixels.push(Pixel {
                input: desc.stride * (p * desc.input_row_stride + q * v),
                output: p * desc.output_row_stride + q * desc.output_pixel_stride,
            });
        }
    }
    let mut taps = Vec::with_capacity(desc.r * desc.s);
    for r in 0..desc.r {
        for s in 0..desc.s {
            taps.push(r * desc.input_row_stride + s * v);
        }
    }
    let last = pixels[pixels.len() - 1];
    let extents = Offsets { input: last.input + taps[taps.len() - 1] + v, weight: desc.r * desc.s * v * v, output: last.output + v };
    (pixels, taps, extents)
}

pub fn build_kernel<T: KernelElement>(desc: &MicrokernelDescriptor) -> Result<CompiledKernel<T>> {
    build_kernel_for_isa(desc, Isa::detect())
}

/// Like [`build_kernel`] but for an explicit instruction-set level.
pub fn build_kernel_for_isa<T: KernelElement>(desc: &MicrokernelDescriptor, isa: Isa) -> Result<CompiledKernel<T>> {
    desc.validate()?;
    if desc.pass != Pass::Forward {
        return Err(Error::InvalidDescriptor("not a forward descriptor"));
    }
    if desc.dtype != T::DTYPE {
        return Err(Error::InvalidDescriptor("descriptor datatype does not match the element type"));
    }
    if !isa.is_supported() {
        return Err(Error::InvalidDescriptor("instruction set not supported on this machine"));
    }
    let (pixels, taps, extents) = forward_geometry(desc);
    Ok(CompiledKernel { desc: *desc, isa, pixels, taps, extents, body: T::forward_body(desc.vlen, isa) })
}

pub fn build_forward_kernel(desc: &MicrokernelDescriptor) -> Result<CompiledKernel<f32>> {
    build_kernel(desc)
}

pub fn build_forward_kernel_i16(desc: &MicrokernelDescriptor) -> Result<CompiledKernel<i16>> {
    build_kernel(desc)
}

/// Element offsets of the operands of one update-kernel call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct UpdateOffsets {
    pub input: usize,
    pub grad_output: usize,
    pub grad_weight: usize,
}

#[doc(hidden)]
pub type UpdateBody = unsafe fn(&UpdateKernel, *const f32, *const f32, *mut f32);

/// Weight-gradient microkernel: accumulates one `vlen×vlen` block
/// `dW[c][k] += Σ_pixels I[pixel][c] · dO[pixel][k]`.
#[derive(Clone)]
pub struct UpdateKernel {
    desc: MicrokernelDescriptor,
    isa: Isa,
    pixels: Vec<Pixel>,
    extents: UpdateOffsets,
    body: UpdateBody,
}

impl fmt::Debug for UpdateKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UpdateKernel").field("desc", &self.desc).field("isa", &self.isa).finish()
    }
}

pub fn build_update_kernel(desc: &MicrokernelDescriptor) -> Result<UpdateKernel> {
    build_update_kernel_for_isa(desc, Isa::detect())
}

pub fn build_update_kernel_for_isa(desc: &MicrokernelDescriptor, isa: Isa) -> Result<UpdateKernel> {
    desc.validate()?;
    if desc.pass != Pass::Update {
        return Err(Error::InvalidDescriptor("not an update descriptor"));
    }
    if !isa.is_supported() {
        return Err(Error::InvalidDescriptor("instruction set not supported on this machine"));
    }
    let v = desc.vlen;
    let mut pixels = Vec::with_capacity(desc.tile_rows * desc.tile_cols);
    for p in 0..desc.tile_rows {
        for q in 0..desc.tile_cols {
            pixels.push(Pixel {
                input: desc.stride * (p * desc.input_row_stride + q * v),
                output: p * desc.output_row_stride + q * desc.output_pixel_stride,
            });
        }
    }
    let last = pixels[pixels.len() - 1];
    let extents = UpdateOffsets { input: last.input + v, grad_output: last.output + v, grad_weight: v * v };
    Ok(UpdateKernel { desc: *desc, isa, pixels, extents, body: bodies::select_update_f32(v, isa) })
}

impl UpdateKernel {
    pub fn descriptor(&self) -> &MicrokernelDescriptor {
        &self.desc
    }

    pub fn extents(&self) -> UpdateOffsets {
        self.extents
    }

    pub fn run(&self, input: &[f32], grad_output: &[f32], grad_weight: &mut [f32], at: UpdateOffsets) -> Result<()> {
        check_bounds(
            Offsets { input: at.input, weight: at.grad_output, output: at.grad_weight },
            Offsets { input: self.extents.input, weight: self.extents.grad_output, output: self.extents.grad_weight },
            (input.len(), grad_output.len(), grad_weight.len()),
        )?;
        // SAFETY: bounds checked above.
        unsafe {
            self.run_raw(
                input.as_ptr().add(at.input),
                grad_output.as_ptr().add(at.grad_output),
                grad_weight.as_mut_ptr().add(at.grad_weight),
            )
        }
        Ok(())
    }

    /// # Safety
    /// Operands must be valid for [`extents`](Self::extents) and the weight
    /// block must not be accessed concurrently.
    #[inline]
    pub(crate) unsafe fn run_raw(&self, input: *const f32, grad_output: *const f32, grad_weight: *mut f32) {
        (self.body)(self, input, grad_output, grad_weight);
    }

    pub(crate) fn pixels(&self) -> &[Pixel] {
        &self.pixels
    }
}

#[cfg(test)]
mod tests;
