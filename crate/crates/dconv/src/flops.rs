//! Multiply-accumulate counting by walking the full convolution loop nest.

use std::hint::black_box;

use dconv_core::ConvLayerSpec;

/// Walks every `(n, k, c, oj, oi, r, s)` point of the loop nest, padded taps
/// included, and counts one multiply-accumulate per point. The counter goes
/// through [`black_box`] so the walk is not folded into a product.
pub fn count_multiply_adds(spec: &ConvLayerSpec) -> u64 {
    let (p, q) = (spec.p(), spec.q());
    let mut count = 0u64;
    for _n in 0..spec.n {
        for _k in 0..spec.k {
            for _c in 0..spec.c {
                for _oj in 0..p {
                    for _oi in 0..q {
                        for _r in 0..black_box(spec.r) {
                            for _s in 0..black_box(spec.s) {
                                count = black_box(count) + 1;
                            }
                        }
                    }
                }
            }
        }
    }
    count
}

/// Floating-point operations of one pass: two per multiply-accumulate.
pub fn count_flops(spec: &ConvLayerSpec) -> u64 {
    2 * count_multiply_adds(spec)
}
