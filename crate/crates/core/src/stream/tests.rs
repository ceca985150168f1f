use super::*;
use crate::exec::Sequential;
use crate::layer::resnet50_layer;
use crate::microkernel::{select_register_blocking, BlockingConfig};
use crate::oracle::{apply_bias_relu, conv_forward_naive};
use crate::planner::{choose_loop_order, partition_threads};
use crate::tensor::{to_blocked_activation, to_blocked_weight, ErrorNorms, Tensor4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(dims: [usize; 4], seed: u64) -> Tensor4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(dims, |_| rng.random_range(-0.5f32..0.5))
}

struct Case {
    spec: ConvLayerSpec,
    input: Tensor4<f32>,
    weight: Tensor4<f32>,
}

impl Case {
    fn new(spec: ConvLayerSpec, seed: u64) -> Self {
        let input = random_tensor([spec.n, spec.c, spec.h, spec.w], seed);
        let weight = random_tensor([spec.k, spec.c, spec.r, spec.s], seed + 1);
        Self { spec, input, weight }
    }

    fn blocked(&self) -> (BlockedActivation<f32>, BlockedWeight<f32>) {
        (to_blocked_activation(&self.input, &self.spec).unwrap(), to_blocked_weight(&self.weight, &self.spec).unwrap())
    }

    fn plan(&self, threads: usize, fusion: Option<FusedOp>) -> ExecutionPlan<f32> {
        let blocking = select_register_blocking(&self.spec, &BlockingConfig::default());
        let partition = partition_threads(&self.spec, &blocking, threads);
        dryrun_forward(&self.spec, choose_loop_order(&self.spec), blocking, &partition, fusion, &PlanOptions::default()).unwrap()
    }
}

fn run(plan: &ExecutionPlan<f32>, input: &BlockedActivation<f32>, weight: &BlockedWeight<f32>) -> BlockedActivation<f32> {
    let mut out = plan.new_output();
    plan.replay_all(input, weight, &mut out, &Sequential).unwrap();
    out
}

fn bits(t: &BlockedActivation<f32>) -> Vec<u32> {
    t.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn apply(kind: FusedKind) -> ApplyInfo {
    ApplyInfo { op: kind, output: 0, rows: 1, cols: 1, channel_block: 0 }
}

#[test]
fn encoding_examples() {
    let a = Call::Apply(apply(FusedKind::Relu));
    assert_eq!(encode_segments(&[Call::Conv; 3]).unwrap(), vec![Segment::ConvStreak(3)]);
    let trace = [Call::Conv, a, Call::Conv, a];
    let seg = Segment::Apply(apply(FusedKind::Relu));
    assert_eq!(encode_segments(&trace).unwrap(), vec![Segment::ConvStreak(1), seg, Segment::ConvStreak(1), seg]);
    assert!(matches!(encode_segments(&[]), Err(Error::EmptyTrace)));
}

fn call_strategy() -> impl Strategy<Value = Call> {
    prop_oneof![
        3 => Just(Call::Conv),
        1 => (0u64..100, 0u32..4).prop_map(|(output, cb)| Call::Apply(ApplyInfo {
            op: FusedKind::BiasRelu,
            output,
            rows: 1,
            cols: 2,
            channel_block: cb,
        })),
    ]
}

proptest! {
    #[test]
    fn decode_inverts_encode(trace in prop::collection::vec(call_strategy(), 1..64)) {
        let segments = encode_segments(&trace).unwrap();
        prop_assert_eq!(decode_segments(&segments), trace);
        prop_assert!(segments.windows(2).all(|w| !matches!(w, [Segment::ConvStreak(_), Segment::ConvStreak(_)])));
    }
}

#[test]
fn fused_trace_of_two_tiles_and_two_input_blocks() {
    let spec = ConvLayerSpec::new(1, 32, 16, 3, 6, 3, 3, 1).with_padding(0, 0);
    let blocking = RegisterBlocking::new(spec.p(), spec.q(), 1, 2);
    assert_eq!((blocking.tiles_p(), blocking.tiles_q(), spec.c_blocks()), (1, 2, 2));
    let partition = partition_threads(&spec, &blocking, 1);
    let plan: ExecutionPlan<f32> =
        dryrun_forward(&spec, choose_loop_order(&spec), blocking, &partition, Some(FusedOp::relu()), &PlanOptions::default()).unwrap();
    let segments = &plan.stream(0).segments;
    let kinds: Vec<_> = segments.iter().map(|s| matches!(s, Segment::ConvStreak(_))).collect();
    assert_eq!(kinds, [true, false, true, false]);
    assert_eq!(segments[0], Segment::ConvStreak(3));
    assert_eq!(segments[2], Segment::ConvStreak(1));
    let Segment::Apply(first) = segments[1] else { unreachable!() };
    assert_eq!((first.output, first.cols), (0, 2));
    let Segment::Apply(second) = segments[3] else { unreachable!() };
    assert_eq!(second.output, 2 * 16);
    assert!(validate_plan(&plan).is_clean());
}

#[test]
fn unfused_plans_have_one_streak_per_thread() {
    let case = Case::new(resnet50_layer(4, 2).unwrap(), 1);
    let plan = case.plan(4, None);
    for t in 0..4 {
        let s = &plan.stream(t);
        assert_eq!(s.segments, vec![Segment::ConvStreak(s.buffers.len() as u32)]);
    }
}

#[test]
fn remainder_tiles_alternate_variants() {
    let spec = ConvLayerSpec::new(1, 16, 16, 2, 30, 1, 1, 1);
    let case = Case::new(spec, 2);
    let plan = case.plan(1, None);
    assert_eq!(plan.blocking().rb_q, 28);
    assert_eq!(plan.stream(0).buffers.var, vec![0, 1, 0, 1]);
    assert_eq!(plan.kernels().len(), 2);
}

#[test]
fn replay_matches_oracle_and_direct_execution() {
    for (id, threads) in [(2, 2), (4, 3), (6, 4), (13, 1)] {
        let case = Case::new(resnet50_layer(id, 2).unwrap(), id as u64);
        let (input, weight) = case.blocked();
        let plan = case.plan(threads, None);
        assert!(validate_plan(&plan).is_clean(), "layer {id}");
        let streamed = run(&plan, &input, &weight);
        let mut direct = plan.new_output();
        plan.execute_direct(&input, &weight, &mut direct).unwrap();
        assert_eq!(bits(&streamed), bits(&direct), "layer {id}");
        assert_eq!(bits(&run(&plan, &input, &weight)), bits(&streamed));
        let oracle = conv_forward_naive(&case.spec, &case.input, &case.weight).unwrap();
        let norms = ErrorNorms::between(oracle.as_slice(), streamed.to_canonical().as_slice()).unwrap();
        assert!(norms.within(1e-4, 1e-5), "layer {id}: {norms:?}");
    }
}

#[test]
fn fusion_equals_post_hoc_operator() {
    let case = Case::new(resnet50_layer(13, 1).unwrap().with_padding(1, 1), 5);
    let (input, weight) = case.blocked();
    let bias: Vec<f32> = (0..case.spec.k).map(|k| (k as f32 - 128.0) / 300.0).collect();
    let plain = run(&case.plan(2, None), &input, &weight).to_canonical();
    for op in [FusedOp::relu(), FusedOp::bias_add(bias.clone()), FusedOp::bias_relu(bias.clone())] {
        let plan = case.plan(2, Some(op.clone()));
        assert!(validate_plan(&plan).is_clean());
        let fused = run(&plan, &input, &weight);
        assert!(fused.tail_lanes_are_zero());
        let mut expected = plain.clone();
        apply_bias_relu(&mut expected, op.bias(), op.kind().has_relu());
        let got = fused.to_canonical();
        assert!(got.as_slice().iter().zip(expected.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()), "{:?}", op.kind());
    }
}

#[test]
fn fault_injection_is_reported() {
    let case = Case::new(resnet50_layer(4, 2).unwrap(), 9);
    let plan = case.plan(2, Some(FusedOp::relu()));
    assert!(validate_plan(&plan).is_clean());

    let mut parts = plan.clone().into_parts();
    let b = &mut parts.threads[1].buffers;
    b.out[3] = b.out[4];
    b.pf_out[2] = b.out[3];
    let corrupt = unsafe { ExecutionPlan::<f32>::from_parts_unchecked(parts.clone()) }.unwrap();
    let report = validate_plan(&corrupt);
    assert!(report.violations.iter().any(|v| matches!(v, Violation::Coverage { .. })), "{report:?}");
    assert!(ExecutionPlan::<f32>::from_parts(parts).is_err());

    let mut parts = plan.clone().into_parts();
    parts.threads[0].buffers.pf_inp.reverse();
    let shuffled = unsafe { ExecutionPlan::<f32>::from_parts_unchecked(parts) }.unwrap();
    let report = validate_plan(&shuffled);
    assert!(report.violations.iter().any(|v| matches!(v, Violation::PrefetchChain { .. })));
    assert!(!report.violations.iter().any(|v| matches!(v, Violation::Coverage { .. })));

    let mut parts = plan.clone().into_parts();
    let segs = &mut parts.threads[0].segments;
    let apply = segs.remove(1);
    segs.insert(0, apply);
    let moved = unsafe { ExecutionPlan::<f32>::from_parts_unchecked(parts) }.unwrap();
    assert!(validate_plan(&moved).violations.iter().any(|v| matches!(v, Violation::ApplyPlacement { .. })));

    let rebuilt = ExecutionPlan::<f32>::from_parts(plan.clone().into_parts()).unwrap();
    assert_eq!(rebuilt.parts(), plan.parts());
}

#[test]
fn longer_lookahead_chains_further() {
    let spec = resnet50_layer(18, 2).unwrap();
    let blocking = select_register_blocking(&spec, &BlockingConfig::default());
    let partition = partition_threads(&spec, &blocking, 2);
    let options = PlanOptions { lookahead: 3, ..PlanOptions::default() };
    let plan: ExecutionPlan<f32> = dryrun_forward(&spec, choose_loop_order(&spec), blocking, &partition, None, &options).unwrap();
    let b = &plan.stream(0).buffers;
    assert_eq!(b.pf_wt[0], b.wt[3]);
    assert_eq!(b.pf_out[b.len() - 1], b.out[b.len() - 1]);
    assert!(validate_plan(&plan).is_clean());
}

#[test]
fn empty_threads_make_the_plan_infeasible() {
    let spec = ConvLayerSpec::new(1, 16, 16, 2, 2, 1, 1, 1);
    let blocking = select_register_blocking(&spec, &BlockingConfig::default());
    let partition = partition_threads(&spec, &blocking, 2);
    let result = dryrun_forward::<f32>(&spec, choose_loop_order(&spec), blocking, &partition, None, &PlanOptions::default());
    assert!(matches!(result, Err(Error::PlanInfeasible { thread: 0 })));
}

#[test]
fn mismatched_tensors_are_rejected() {
    let case = Case::new(resnet50_layer(4, 1).unwrap(), 3);
    let plan = case.plan(1, None);
    let (input, weight) = case.blocked();
    let mut wrong = BlockedActivation::zeros(ActivationLayout { halo_h: 1, ..*plan.output_layout() });
    assert!(matches!(plan.replay_all(&input, &weight, &mut wrong, &Sequential), Err(Error::PlanTensorMismatch(_))));
    let bad_input = input.with_halo(0, 0);
    let mut out = plan.new_output();
    assert!(matches!(plan.replay(&bad_input, &weight, &mut out, 0), Err(Error::PlanTensorMismatch(_))));
}

#[test]
fn placement_writes_into_haloed_and_strided_outputs() {
    let spec = ConvLayerSpec::new(1, 16, 32, 5, 5, 3, 3, 1);
    let case = Case::new(spec, 4);
    let (input, weight) = case.blocked();
    let dense = run(&case.plan(1, None), &input, &weight).to_canonical();
    let blocking = select_register_blocking(&spec, &BlockingConfig::default());
    let partition = partition_threads(&spec, &blocking, 1);
    let placement = OutputPlacement { h: 9, w: 10, halo_h: 1, halo_w: 2, step: 2 };
    let options = PlanOptions { output: Some(placement), ..PlanOptions::default() };
    let plan: ExecutionPlan<f32> = dryrun_forward(&spec, choose_loop_order(&spec), blocking, &partition, None, &options).unwrap();
    assert!(validate_plan(&plan).is_clean());
    let spread = run(&plan, &input, &weight);
    assert!(spread.halo_is_zero());
    for k in 0..32 {
        for y in 0..9 {
            for x in 0..10 {
                let want = if y % 2 == 0 && x % 2 == 0 && x / 2 < 5 { dense.get(0, k, y / 2, x / 2) } else { 0.0 };
                assert_eq!(spread.get(0, k, y, x), want);
            }
        }
    }
}
