//! Kernel bodies, monomorphized over `vlen` and the pixel sub-tile size and
//! compiled once per instruction-set level.
//!
//! Every body accumulates in the same order (existing output value, then
//! taps in `(r, s)` order, then input lanes ascending) with separate
//! multiplies and adds, so all levels produce identical bits.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

use super::{CompiledKernel, ForwardBody, Isa, Pixel, UpdateBody, UpdateKernel};
use crate::prefetch;

#[inline(always)]
unsafe fn store_lane_f32(dst: *mut f32, v: f32, stream: bool) {
    if stream {
        prefetch::stream_u32(dst as *mut u32, v.to_bits());
    } else {
        *dst = v;
    }
}

#[inline(always)]
unsafe fn store_lane_i32(dst: *mut i32, v: i32, stream: bool) {
    if stream {
        prefetch::stream_u32(dst as *mut u32, v as u32);
    } else {
        *dst = v;
    }
}

#[inline(always)]
unsafe fn next_tap_hint<T>(weight: *const T, taps: usize, t: usize, block: usize, on: bool) {
    if on && t + 1 < taps {
        prefetch::l1_region(weight.add((t + 1) * block), block * core::mem::size_of::<T>());
    }
}

#[inline(always)]
unsafe fn forward_f32_chunk<const V: usize, const M: usize>(
    px: &[Pixel],
    taps: &[usize],
    input: *const f32,
    weight: *const f32,
    output: *mut f32,
    hints: bool,
    stream: bool,
) {
    let mut acc = [[0f32; V]; M];
    for m in 0..M {
        acc[m] = *(output.add(px[m].output) as *const [f32; V]);
    }
    for (t, &tap) in taps.iter().enumerate() {
        next_tap_hint(weight, taps.len(), t, V * V, hints);
        let block = weight.add(t * V * V);
        for c in 0..V {
            let w = &*(block.add(c * V) as *const [f32; V]);
            for m in 0..M {
                let x = *input.add(px[m].input + tap + c);
                for k in 0..V {
                    acc[m][k] += x * w[k];
                }
            }
        }
    }
    for m in 0..M {
        let dst = output.add(px[m].output);
        for k in 0..V {
            store_lane_f32(dst.add(k), acc[m][k], stream);
        }
    }
}

#[inline(always)]
unsafe fn forward_f32<const V: usize, const M: usize>(
    kernel: &CompiledKernel<f32>,
    input: *const f32,
    weight: *const f32,
    output: *mut f32,
) {
    let taps = kernel.taps();
    let (hints, stream) = (kernel.desc.prefetch, kernel.desc.streaming_stores);
    let mut rest = kernel.pixels();
    while !rest.is_empty() {
        let n = chunk_len::<M>(rest.len());
        let (head, tail) = rest.split_at(n);
        match n {
            n if n == M => forward_f32_chunk::<V, M>(head, taps, input, weight, output, hints, stream),
            4 => forward_f32_chunk::<V, 4>(head, taps, input, weight, output, hints, stream),
            2 => forward_f32_chunk::<V, 2>(head, taps, input, weight, output, hints, stream),
            _ => forward_f32_chunk::<V, 1>(head, taps, input, weight, output, hints, stream),
        }
        rest = tail;
    }
}

#[inline(always)]
fn chunk_len<const M: usize>(left: usize) -> usize {
    if left >= M {
        M
    } else if left >= 4 {
        4
    } else if left >= 2 {
        2
    } else {
        1
    }
}

#[inline(always)]
unsafe fn forward_i16_chunk<const V: usize, const M: usize>(
    px: &[Pixel],
    taps: &[usize],
    input: *const i16,
    weight: *const i16,
    output: *mut i32,
    chain_limit: usize,
    hints: bool,
    stream: bool,
) {
    let mut total = [[0i32; V]; M];
    let mut partial = [[0i32; V]; M];
    for m in 0..M {
        total[m] = *(output.add(px[m].output) as *const [i32; V]);
    }
    let mut chain = 0;
    for (t, &tap) in taps.iter().enumerate() {
        next_tap_hint(weight, taps.len(), t, V * V, hints);
        let block = weight.add(t * V * V);
        for c in 0..V {
            let w = &*(block.add(c * V) as *const [i16; V]);
            for m in 0..M {
                let x = *input.add(px[m].input + tap + c) as i32;
                for k in 0..V {
                    partial[m][k] = partial[m][k].wrapping_add(x.wrapping_mul(w[k] as i32));
                }
            }
            chain += 1;
            if chain == chain_limit {
                flush(&mut total, &mut partial);
                chain = 0;
            }
        }
    }
    flush(&mut total, &mut partial);
    for m in 0..M {
        let dst = output.add(px[m].output);
        for k in 0..V {
            store_lane_i32(dst.add(k), total[m][k], stream);
        }
    }
}

#[inline(always)]
fn flush<const V: usize, const M: usize>(total: &mut [[i32; V]; M], partial: &mut [[i32; V]; M]) {
    for m in 0..M {
        for k in 0..V {
            total[m][k] = total[m][k].wrapping_add(partial[m][k]);
            partial[m][k] = 0;
        }
    }
}

#[inline(always)]
unsafe fn forward_i16<const V: usize, const M: usize>(
    kernel: &CompiledKernel<i16>,
    input: *const i16,
    weight: *const i16,
    output: *mut i32,
) {
    let taps = kernel.taps();
    let limit = kernel.desc.acc_chain_limit;
    let (hints, stream) = (kernel.desc.prefetch, kernel.desc.streaming_stores);
    let mut rest = kernel.pixels();
    while !rest.is_empty() {
        let n = chunk_len::<M>(rest.len());
        let (head, tail) = rest.split_at(n);
        match n {
            n if n == M => forward_i16_chunk::<V, M>(head, taps, input, weight, output, limit, hints, stream),
            4 => forward_i16_chunk::<V, 4>(head, taps, input, weight, output, limit, hints, stream),
            2 => forward_i16_chunk::<V, 2>(head, taps, input, weight, output, limit, hints, stream),
            _ => forward_i16_chunk::<V, 1>(head, taps, input, weight, output, limit, hints, stream),
        }
        rest = tail;
    }
}

#[inline(always)]
unsafe fn update_f32<const V: usize>(kernel: &UpdateKernel, input: *const f32, grad_output: *const f32, grad_weight: *mut f32) {
    let mut acc = [[0f32; V]; V];
    for c in 0..V {
        acc[c] = *(grad_weight.add(c * V) as *const [f32; V]);
    }
    for px in kernel.pixels() {
        let dout = &*(grad_output.add(px.output) as *const [f32; V]);
        for c in 0..V {
            let x = *input.add(px.input + c);
            for k in 0..V {
                acc[c][k] += x * dout[k];
            }
        }
    }
    for c in 0..V {
        *(grad_weight.add(c * V) as *mut [f32; V]) = acc[c];
    }
}

// Runtime-vlen fallbacks, operating directly on memory in the same order.

unsafe fn forward_f32_dyn(kernel: &CompiledKernel<f32>, input: *const f32, weight: *const f32, output: *mut f32) {
    let v = kernel.desc.vlen;
    for px in kernel.pixels() {
        let dst = output.add(px.output);
        for (t, &tap) in kernel.taps().iter().enumerate() {
            for c in 0..v {
                let x = *input.add(px.input + tap + c);
                let w = weight.add((t * v + c) * v);
                for k in 0..v {
                    *dst.add(k) = *dst.add(k) + x * *w.add(k);
                }
            }
        }
    }
}

unsafe fn forward_i16_dyn(kernel: &CompiledKernel<i16>, input: *const i16, weight: *const i16, output: *mut i32) {
    let v = kernel.desc.vlen;
    let limit = kernel.desc.acc_chain_limit;
    let mut partial = alloc::vec![0i32; v];
    for px in kernel.pixels() {
        let dst = output.add(px.output);
        let mut chain = 0;
        let drain = |partial: &mut [i32]| {
            for (k, p) in partial.iter_mut().enumerate() {
                *dst.add(k) = (*dst.add(k)).wrapping_add(*p);
                *p = 0;
            }
        };
        for (t, &tap) in kernel.taps().iter().enumerate() {
            for c in 0..v {
                let x = *input.add(px.input + tap + c) as i32;
                let w = weight.add((t * v + c) * v);
                for (k, p) in partial.iter_mut().enumerate() {
                    *p = p.wrapping_add(x.wrapping_mul(*w.add(k) as i32));
                }
                chain += 1;
                if chain == limit {
                    drain(&mut partial);
                    chain = 0;
                }
            }
        }
        drain(&mut partial);
    }
}

unsafe fn update_f32_dyn(kernel: &UpdateKernel, input: *const f32, grad_output: *const f32, grad_weight: *mut f32) {
    let v = kernel.desc.vlen;
    for px in kernel.pixels() {
        for c in 0..v {
            let x = *input.add(px.input + c);
            let row = grad_weight.add(c * v);
            for k in 0..v {
                *row.add(k) = *row.add(k) + x * *grad_output.add(px.output + k);
            }
        }
    }
}

macro_rules! isa_level {
    ($name:ident, $chunk:literal $(, $feature:literal)?) => {
        mod $name {
            use super::*;

            $(#[target_feature(enable = $feature)])?
            pub(super) unsafe fn forward_f32<const V: usize>(
                kernel: &CompiledKernel<f32>,
                input: *const f32,
                weight: *const f32,
                output: *mut f32,
            ) {
                super::forward_f32::<V, $chunk>(kernel, input, weight, output)
            }

            $(#[target_feature(enable = $feature)])?
            pub(super) unsafe fn forward_i16<const V: usize>(
                kernel: &CompiledKernel<i16>,
                input: *const i16,
                weight: *const i16,
                output: *mut i32,
            ) {
                super::forward_i16::<V, $chunk>(kernel, input, weight, output)
            }

            $(#[target_feature(enable = $feature)])?
            pub(super) unsafe fn update_f32<const V: usize>(
                kernel: &UpdateKernel,
                input: *const f32,
                grad_output: *const f32,
                grad_weight: *mut f32,
            ) {
                super::update_f32::<V>(kernel, input, grad_output, grad_weight)
            }
        }
    };
}

isa_level!(portable, 4);
#[cfg(target_arch = "x86_64")]
isa_level!(avx2, 4, "avx2");
#[cfg(target_arch = "x86_64")]
isa_level!(avx512, 8, "avx512f");

macro_rules! select {
    ($isa:expr, $vlen:expr, $body:ident, $fallback:expr) => {{
        macro_rules! by_vlen {
            ($level:ident) => {
                match $vlen {
                    4 => $level::$body::<4> as _,
                    8 => $level::$body::<8> as _,
                    16 => $level::$body::<16> as _,
                    _ => $fallback as _,
                }
            };
        }
        match $isa {
            #[cfg(target_arch = "x86_64")]
            Isa::Avx512 => by_vlen!(avx512),
            #[cfg(target_arch = "x86_64")]
            Isa::Avx2 => by_vlen!(avx2),
            _ => by_vlen!(portable),
        }
    }};
}

pub(super) fn select_forward_f32(vlen: usize, isa: Isa) -> ForwardBody<f32> {
    select!(isa, vlen, forward_f32, forward_f32_dyn)
}

pub(super) fn select_forward_i16(vlen: usize, isa: Isa) -> ForwardBody<i16> {
    select!(isa, vlen, forward_i16, forward_i16_dyn)
}

pub(super) fn select_update_f32(vlen: usize, isa: Isa) -> UpdateBody {
    select!(isa, vlen, update_f32, update_f32_dyn)
}
