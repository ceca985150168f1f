use super::*;
use alloc::vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_f32(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn random_i16(len: usize, bound: i16, seed: u64) -> Vec<i16> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Direct evaluation of what a forward kernel call should add to `output`.
fn forward_reference(d: &MicrokernelDescriptor, input: &[f64], weight: &[f64], output: &mut [f64]) {
    let v = d.vlen;
    for p in 0..d.tile_rows {
        for q in 0..d.tile_cols {
            let out = p * d.output_row_stride + q * d.output_pixel_stride;
            for k in 0..v {
                let mut sum = 0.0;
                for r in 0..d.r {
                    for s in 0..d.s {
                        for c in 0..v {
                            let i = (p * d.stride + r) * d.input_row_stride + (q * d.stride + s) * v + c;
                            sum += input[i] * weight[((r * d.s + s) * v + c) * v + k];
                        }
                    }
                }
                output[out + k] += sum;
            }
        }
    }
}

fn check_forward(d: MicrokernelDescriptor, seed: u64) {
    for isa in Isa::available() {
        let kernel = build_kernel_for_isa::<f32>(&d, isa).unwrap();
        let ext = kernel.extents();
        let input = random_f32(ext.input, seed);
        let weight = random_f32(ext.weight, seed + 1);
        let mut output = random_f32(ext.output, seed + 2);
        let mut expected: Vec<f64> = output.iter().map(|&x| x as f64).collect();
        kernel.run(&input, &weight, &mut output, Offsets::default(), Offsets::default()).unwrap();
        let wide = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        forward_reference(&d, &wide(&input), &wide(&weight), &mut expected);
        for (got, want) in output.iter().zip(&expected) {
            assert!((*got as f64 - want).abs() < 1e-4, "{isa:?} {d:?}: {got} vs {want}");
        }
    }
}

#[test]
fn forward_matches_reference_for_common_shapes() {
    check_forward(MicrokernelDescriptor::forward(16, (1, 28), (3, 3), 1), 1);
    check_forward(MicrokernelDescriptor::forward(16, (2, 7), (1, 1), 1), 2);
    check_forward(MicrokernelDescriptor::forward(16, (1, 14), (1, 1), 2), 3);
    check_forward(MicrokernelDescriptor::forward(8, (3, 5), (3, 3), 2), 4);
    check_forward(MicrokernelDescriptor::forward(4, (1, 1), (7, 7), 2), 5);
    check_forward(MicrokernelDescriptor::forward(5, (2, 3), (2, 2), 1), 6);
}

#[test]
fn forward_respects_output_pixel_stride() {
    let d = MicrokernelDescriptor::forward(8, (2, 3), (1, 1), 1).with_strides(3 * 8, 2 * 3 * 2 * 8, 2 * 8);
    check_forward(d, 11);
}

#[test]
fn isa_levels_are_bitwise_identical() {
    let d = MicrokernelDescriptor::forward(16, (2, 14), (3, 3), 1);
    let reference = build_kernel_for_isa::<f32>(&d, Isa::Portable).unwrap();
    let ext = reference.extents();
    let input = random_f32(ext.input, 7);
    let weight = random_f32(ext.weight, 8);
    let mut base = random_f32(ext.output, 9);
    let start = base.clone();
    reference.run(&input, &weight, &mut base, Offsets::default(), Offsets::default()).unwrap();
    for isa in Isa::available() {
        let kernel = build_kernel_for_isa::<f32>(&d, isa).unwrap();
        let mut out = start.clone();
        kernel.run(&input, &weight, &mut out, Offsets::default(), Offsets::default()).unwrap();
        assert!(out.iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits()), "{isa:?}");
    }
}

#[test]
fn hints_and_streaming_do_not_change_results() {
    let plain = MicrokernelDescriptor::forward(16, (1, 7), (3, 3), 1).with_prefetch(false);
    let hinted = plain.with_prefetch(true).with_streaming_stores(true);
    let a = build_forward_kernel(&plain).unwrap();
    let b = build_forward_kernel(&hinted).unwrap();
    let ext = a.extents();
    let input = random_f32(ext.input * 2, 1);
    let weight = random_f32(ext.weight * 2, 2);
    let mut out_a = vec![0.0; ext.output];
    let mut out_b = vec![0.0; ext.output];
    a.run(&input, &weight, &mut out_a, Offsets::default(), Offsets::default()).unwrap();
    let elsewhere = Offsets { input: ext.input, weight: ext.weight, output: 0 };
    b.run(&input, &weight, &mut out_b, Offsets::default(), elsewhere).unwrap();
    assert_eq!(out_a, out_b);
}

#[test]
fn out_of_bounds_offsets_are_rejected() {
    let kernel = build_forward_kernel(&MicrokernelDescriptor::forward(16, (1, 4), (1, 1), 1)).unwrap();
    let ext = kernel.extents();
    let input = vec![0.0; ext.input];
    let weight = vec![0.0; ext.weight];
    let mut output = vec![0.0; ext.output];
    let at = Offsets { input: 1, ..Offsets::default() };
    assert!(kernel.run(&input, &weight, &mut output, at, Offsets::default()).is_err());
}

#[test]
fn int16_forward_is_exact() {
    for vlen in [16, 6] {
        let d = MicrokernelDescriptor::forward(vlen, (2, 5), (3, 3), 1).with_dtype(KernelDtype::I16).with_chain_limit(20, 256, 256);
        for isa in Isa::available() {
            let kernel = build_kernel_for_isa::<i16>(&d, isa).unwrap();
            let ext = kernel.extents();
            let input = random_i16(ext.input, 256, 3);
            let weight = random_i16(ext.weight, 256, 4);
            let mut output = vec![5i32; ext.output];
            kernel.run(&input, &weight, &mut output, Offsets::default(), Offsets::default()).unwrap();
            let mut expected = vec![5.0f64; ext.output];
            let wide = |v: &[i16]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
            forward_reference(&d, &wide(&input), &wide(&weight), &mut expected);
            for (got, want) in output.iter().zip(&expected) {
                assert_eq!(*got as f64, *want, "{isa:?} vlen {vlen}");
            }
        }
    }
}

#[test]
fn overflow_certifier_rejects_unsafe_chains() {
    let d = MicrokernelDescriptor::forward(16, (1, 7), (3, 3), 1).with_dtype(KernelDtype::I16);
    assert!(d.validate().is_ok());
    assert!(d.certify_i16_reduction(1024).is_ok());
    assert!(matches!(d.certify_i16_reduction(1 << 20), Err(Error::OverflowRisk { .. })));
    let long = d.with_chain_limit(1 << 16, 256, 256);
    assert!(matches!(long.validate(), Err(Error::OverflowRisk { worst_case, .. }) if worst_case == 1 << 32));
    assert!(matches!(build_forward_kernel_i16(&long), Err(Error::OverflowRisk { .. })));
}

#[test]
fn descriptor_validation() {
    let good = MicrokernelDescriptor::forward(16, (1, 7), (3, 3), 1);
    assert!(matches!(good.with_strides(16, 16, 8).validate(), Err(Error::InvalidDescriptor(_))));
    let mut zero = good;
    zero.tile_cols = 0;
    assert!(zero.validate().is_err());
    assert!(build_forward_kernel_i16(&good).is_err(), "dtype mismatch");
    assert!(build_update_kernel(&good).is_err(), "pass mismatch");
}

fn check_update(d: MicrokernelDescriptor, seed: u64) {
    for isa in Isa::available() {
        let kernel = build_update_kernel_for_isa(&d, isa).unwrap();
        let ext = kernel.extents();
        let input = random_f32(ext.input, seed);
        let grad_out = random_f32(ext.grad_output, seed + 1);
        let mut grad_w = random_f32(ext.grad_weight, seed + 2);
        let mut expected: Vec<f64> = grad_w.iter().map(|&x| x as f64).collect();
        kernel.run(&input, &grad_out, &mut grad_w, UpdateOffsets::default()).unwrap();
        let v = d.vlen;
        for p in 0..d.tile_rows {
            for q in 0..d.tile_cols {
                let i = d.stride * (p * d.input_row_stride + q * v);
                let o = p * d.output_row_stride + q * d.output_pixel_stride;
                for c in 0..v {
                    for k in 0..v {
                        expected[c * v + k] += input[i + c] as f64 * grad_out[o + k] as f64;
                    }
                }
            }
        }
        for (got, want) in grad_w.iter().zip(&expected) {
            assert!((*got as f64 - want).abs() < 1e-4, "{isa:?}");
        }
    }
}

#[test]
fn update_matches_reference() {
    check_update(MicrokernelDescriptor::update(16, (4, 7), 1), 1);
    check_update(MicrokernelDescriptor::update(8, (3, 3), 2), 2);
    check_update(MicrokernelDescriptor::update(3, (2, 2), 1), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_agrees_for_random_descriptors(
        vlen in prop::sample::select(vec![4usize, 8, 16, 3]),
        rows in 1usize..4,
        cols in 1usize..12,
        r in 1usize..4,
        s in 1usize..4,
        stride in 1usize..3,
        seed in any::<u64>(),
    ) {
        check_forward(MicrokernelDescriptor::forward(vlen, (rows, cols), (r, s), stride), seed);
    }
}
