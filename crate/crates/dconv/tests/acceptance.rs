//! Acceptance criteria, one PASS/FAIL line each.
//!
//! The process exits successfully even when a criterion fails so that the
//! rest of the workspace's tests still run; set `ACCEPTANCE_STRICT=1` to
//! turn any failure into a non-zero exit status.

use std::hint::black_box;
use std::time::Instant;

use dconv::bench::{BenchConfig, ImplKind, LayerSource};
use dconv::data::{stream_seed, uniform_f32, uniform_i16};
use dconv::flops::count_flops;
use dconv::{resnet50, run_benchmark, LayerEntry, ScopedThreads};
use dconv_core::microkernel::{KernelDtype, MicrokernelDescriptor, RegisterBlocking};
use dconv_core::oracle::{
    apply_bias_relu, conv_backward_naive, conv_forward_im2col, conv_forward_naive, conv_update_naive, int_conv_forward_oracle,
};
use dconv_core::planner::{
    choose_loop_order, choose_spatial_blocking, partition_threads, PlannerConfig, WeightUpdateStrategy, DEFAULT_CACHE_BUDGET,
};
use dconv_core::propagation::{forward, plan_forward, select_backward_route, weight_update, BackwardPlan, BackwardRoute};
use dconv_core::stream::{dryrun_forward, validate_plan, ExecutionPlan, FusedKind, FusedOp, PlanOptions, Segment};
use dconv_core::tensor::{to_blocked_activation, to_blocked_weight};
use dconv_core::{error_norms, BlockedActivation, ConvLayerSpec, Error, Parallel, Sequential, Tensor4};

const LINF_REL: f64 = 1e-4;
const L2_REL: f64 = 1e-5;
const IM2COL_LINF_REL: f64 = 1e-5;
const ADJOINT_REL: f64 = 1e-10;
const SEED: u64 = 42;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn fail<T>(message: impl Into<String>) -> Result<T, String> {
    Err(message.into())
}

fn core<T>(result: dconv_core::Result<T>) -> Result<T, String> {
    result.map_err(|e| e.to_string())
}

fn layer(id: usize, n: usize) -> ConvLayerSpec {
    resnet50().into_iter().find(|l| l.id == id).expect("table id").spec.with_minibatch(n)
}

fn layers(n: usize) -> impl Iterator<Item = (usize, ConvLayerSpec)> {
    resnet50().into_iter().map(move |LayerEntry { id, spec }| (id, spec.with_minibatch(n)))
}

fn input_of(spec: &ConvLayerSpec, id: usize) -> Tensor4<f32> {
    uniform_f32([spec.n, spec.c, spec.h, spec.w], stream_seed(SEED, id, 0))
}

fn weight_of(spec: &ConvLayerSpec, id: usize) -> Tensor4<f32> {
    uniform_f32([spec.k, spec.c, spec.r, spec.s], stream_seed(SEED, id, 1))
}

fn grad_output_of(spec: &ConvLayerSpec, id: usize) -> Tensor4<f32> {
    uniform_f32([spec.n, spec.k, spec.p(), spec.q()], stream_seed(SEED, id, 2))
}

fn bias_of(spec: &ConvLayerSpec, id: usize) -> Vec<f32> {
    uniform_f32([1, 1, 1, spec.k], stream_seed(SEED, id, 3)).into_vec()
}

fn bits(t: &Tensor4<f32>) -> Vec<u32> {
    t.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn direct_forward(
    spec: &ConvLayerSpec,
    input: &Tensor4<f32>,
    weight: &Tensor4<f32>,
    threads: usize,
    fusion: Option<FusedOp>,
    par: &dyn Parallel,
) -> Result<Tensor4<f32>, String> {
    let plan = core(plan_forward::<f32>(spec, threads, fusion, &PlannerConfig::default(), &PlanOptions::default()))?;
    let output = core(forward(&plan, &core(to_blocked_activation(input, spec))?, &core(to_blocked_weight(weight, spec))?, par))?;
    Ok(output.to_canonical())
}

fn forward_oracle() -> Outcome {
    let mut worst = (0.0f64, 0.0f64);
    for (id, spec) in layers(2) {
        let (input, weight) = (input_of(&spec, id), weight_of(&spec, id));
        let reference = core(conv_forward_naive(&spec, &input, &weight))?;
        let result = direct_forward(&spec, &input, &weight, 1, None, &Sequential)?;
        let norms = core(error_norms(&reference, &result))?;
        if !norms.within(LINF_REL, L2_REL) {
            return fail(format!("layer {id}: linf_rel {:.2e}, l2_rel {:.2e}", norms.linf_rel, norms.l2_rel));
        }
        worst = (worst.0.max(norms.linf_rel), worst.1.max(norms.l2_rel));
    }
    Ok(format!("20 layers, N=2, worst linf_rel {:.2e}, l2_rel {:.2e}", worst.0, worst.1))
}

fn backward_oracle() -> Outcome {
    let mut runs = [0usize; 3];
    let mut worst = (0.0f64, 0.0f64);
    let mut lattice_layers = 0;
    for (id, spec) in layers(2) {
        let (grad_output, weight) = (grad_output_of(&spec, id), weight_of(&spec, id));
        let reference = core(conv_backward_naive(&spec, &grad_output, &weight))?;
        let blocked_grad = core(BlockedActivation::from_canonical(&grad_output, spec.vlen, 0, 0))?;
        let blocked_weight = core(to_blocked_weight(&weight, &spec))?;
        let selected = select_backward_route(&spec);
        let mut routes = vec![selected];
        if selected != BackwardRoute::GenericGemm {
            routes.push(BackwardRoute::GenericGemm);
        }
        let on_lattice = spec.r == 1 && spec.s == 1 && spec.stride == 2;
        for route in routes {
            let plan = core(BackwardPlan::with_route(&spec, route, 1, &PlannerConfig::default(), &PlanOptions::default()))?;
            let result = core(plan.backward(&blocked_grad, &blocked_weight, &Sequential))?.to_canonical();
            let norms = core(error_norms(&reference, &result))?;
            if !norms.within(LINF_REL, L2_REL) {
                return fail(format!("layer {id} {route:?}: linf_rel {:.2e}, l2_rel {:.2e}", norms.linf_rel, norms.l2_rel));
            }
            worst = (worst.0.max(norms.linf_rel), worst.1.max(norms.l2_rel));
            if on_lattice {
                let [n, c, h, w] = result.dims();
                for img in 0..n {
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                if (y % spec.stride != 0 || x % spec.stride != 0) && result.get(img, ch, y, x).to_bits() != 0 {
                                    return fail(format!("layer {id} {route:?}: non-zero gradient off the stride lattice at ({y}, {x})"));
                                }
                            }
                        }
                    }
                }
            }
            runs[route as usize] += 1;
        }
        lattice_layers += on_lattice as usize;
    }
    if runs.contains(&0) {
        return fail(format!("a route was never exercised: {runs:?}"));
    }
    Ok(format!(
        "route runs stride1/1x1/gemm = {runs:?}, worst linf_rel {:.2e}, l2_rel {:.2e}, {lattice_layers} stride-2 1x1 layers zero off the lattice",
        worst.0, worst.1
    ))
}

fn update_oracle() -> Outcome {
    let threads = 4;
    let mut worst = 0.0f64;
    for id in [4, 8, 13, 18, 19] {
        let spec = layer(id, 4);
        let (input, grad_output) = (input_of(&spec, id), grad_output_of(&spec, id));
        let reference = core(conv_update_naive(&spec, &input, &grad_output))?;
        let blocked_input = core(to_blocked_activation(&input, &spec))?;
        let blocked_grad = core(BlockedActivation::from_canonical(&grad_output, spec.vlen, 0, 0))?;
        let blocks = choose_spatial_blocking(&spec, DEFAULT_CACHE_BUDGET);
        let mut results: Vec<(usize, Tensor4<f32>)> = Vec::new();
        for copies in [1, 2, threads] {
            let strategy = core(WeightUpdateStrategy::new(&spec, threads, copies))?;
            if !strategy.is_feasible(&spec) {
                continue;
            }
            let run = || weight_update(&spec, &blocked_input, &blocked_grad, &strategy, blocks, &ScopedThreads).map(|w| w.to_canonical());
            let first = core(run())?;
            let second = core(run())?;
            if bits(&first) != bits(&second) {
                return fail(format!("layer {id} G={copies}: two runs differ bitwise"));
            }
            let norms = core(error_norms(&reference, &first))?;
            if norms.linf_rel > LINF_REL {
                return fail(format!("layer {id} G={copies}: linf_rel {:.2e}", norms.linf_rel));
            }
            worst = worst.max(norms.linf_rel);
            for (other, earlier) in &results {
                let pair = core(error_norms(earlier, &first))?;
                if pair.linf_rel > LINF_REL {
                    return fail(format!("layer {id}: G={other} and G={copies} disagree, linf_rel {:.2e}", pair.linf_rel));
                }
            }
            results.push((copies, first));
        }
        if results.len() != 3 {
            return fail(format!("layer {id}: only {} strategies feasible", results.len()));
        }
    }
    Ok(format!("layers 4/8/13/18/19, N=4, T=4, G in {{1,2,4}}, worst linf_rel {worst:.2e}, reproducible and pairwise consistent"))
}

fn blocked_bits(t: &BlockedActivation<f32>) -> Vec<u32> {
    t.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn streams_soundness() -> Outcome {
    let mut plans = 0;
    for (id, spec) in layers(2) {
        let input = core(to_blocked_activation(&input_of(&spec, id), &spec))?;
        let weight = core(to_blocked_weight(&weight_of(&spec, id), &spec))?;
        for threads in [1, 2, 4, 8] {
            let plan: ExecutionPlan<f32> = core(plan_forward(&spec, threads, None, &PlannerConfig::default(), &PlanOptions::default()))?;
            let report = validate_plan(&plan);
            if !report.is_clean() {
                return fail(format!("layer {id} T={threads}: {:?}", &report.violations[..report.violations.len().min(3)]));
            }
            let first = core(forward(&plan, &input, &weight, &ScopedThreads))?;
            let second = core(forward(&plan, &input, &weight, &ScopedThreads))?;
            let mut direct = plan.new_output();
            core(plan.execute_direct(&input, &weight, &mut direct))?;
            if blocked_bits(&first) != blocked_bits(&second) {
                return fail(format!("layer {id} T={threads}: replay is not idempotent"));
            }
            if blocked_bits(&first) != blocked_bits(&direct) {
                return fail(format!("layer {id} T={threads}: replay differs from direct execution"));
            }
            plans += 1;
        }
    }
    Ok(format!("{plans} plans (20 layers x T in {{1,2,4,8}}, N=2) validated, replay bitwise equal to direct execution and idempotent"))
}

fn fusion_correctness() -> Outcome {
    for id in [2, 4, 13] {
        let spec = layer(id, 2);
        let (input, weight, bias) = (input_of(&spec, id), weight_of(&spec, id), bias_of(&spec, id));
        let plain = direct_forward(&spec, &input, &weight, 2, None, &ScopedThreads)?;
        for (op, with_bias) in [(FusedOp::relu(), false), (FusedOp::bias_relu(bias.clone()), true)] {
            let kind = op.kind();
            let fused = direct_forward(&spec, &input, &weight, 2, Some(op), &ScopedThreads)?;
            let mut expected = plain.clone();
            apply_bias_relu(&mut expected, with_bias.then_some(&bias[..]), true);
            if bits(&fused) != bits(&expected) {
                return fail(format!("layer {id} {kind:?}: fused result differs from the post-hoc operator"));
            }
        }
    }

    let spec = ConvLayerSpec::new(1, 32, 16, 3, 6, 3, 3, 1).with_padding(0, 0);
    let blocking = RegisterBlocking::new(spec.p(), spec.q(), 1, 2);
    let partition = partition_threads(&spec, &blocking, 1);
    let plan: ExecutionPlan<f32> =
        core(dryrun_forward(&spec, choose_loop_order(&spec), blocking, &partition, Some(FusedOp::relu()), &PlanOptions::default()))?;
    let segments = &plan.stream(0).segments;
    let shape: Vec<String> = segments
        .iter()
        .map(|s| match s {
            Segment::ConvStreak(n) => format!("CONV x{n}"),
            Segment::Apply(info) => format!("APPLY {:?}", info.op),
        })
        .collect();
    let expected = ["CONV x3", "APPLY Relu", "CONV x1", "APPLY Relu"];
    if shape != expected || plan.stream(0).buffers.len() != 4 {
        return fail(format!("six-call example encodes as {shape:?}"));
    }
    if let [_, Segment::Apply(a), _, Segment::Apply(b)] = segments[..] {
        if a.op != FusedKind::Relu || a.output == b.output {
            return fail("APPLYs of the six-call example target the same tile");
        }
    }
    Ok("relu and bias_relu fused == post-hoc bitwise on layers 2/4/13; six-call trace = [CONV x3, APPLY, CONV x1, APPLY]".into())
}

fn int16_exactness() -> Outcome {
    for id in [4, 13, 18] {
        let spec = layer(id, 1);
        let input = uniform_i16([spec.n, spec.c, spec.h, spec.w], stream_seed(SEED, id, 0));
        let weight = uniform_i16([spec.k, spec.c, spec.r, spec.s], stream_seed(SEED, id, 1));
        let plan: ExecutionPlan<i16> = core(plan_forward(&spec, 1, None, &PlannerConfig::default(), &PlanOptions::default()))?;
        let output =
            core(forward(&plan, &core(to_blocked_activation(&input, &spec))?, &core(to_blocked_weight(&weight, &spec))?, &Sequential))?;
        let result = output.to_canonical();
        let reference = core(int_conv_forward_oracle(&spec, &input, &weight))?.map(|v| v as i32);
        if result != reference {
            return fail(format!("layer {id}: int16 result differs from the integer oracle"));
        }
        let certified = plan.kernels().iter().all(|k| k.descriptor().certify_i16_reduction(spec.c).is_ok());
        if !certified {
            return fail(format!("layer {id}: certifier rejects a layer inside the budget"));
        }
    }

    let desc = MicrokernelDescriptor::forward(16, (1, 7), (3, 3), 1).with_dtype(KernelDtype::I16);
    let long_chain = desc.with_chain_limit(1 << 16, 256, 256);
    if !matches!(long_chain.validate(), Err(Error::OverflowRisk { .. })) {
        return fail("a 2^16-product chain of 256x256 products was accepted");
    }
    if !matches!(desc.certify_i16_reduction(1 << 20), Err(Error::OverflowRisk { .. })) {
        return fail("a 2^20-channel reduction was certified");
    }
    let options = PlanOptions { acc_chain_limit: 1 << 16, ..PlanOptions::default() };
    if !matches!(plan_forward::<i16>(&layer(4, 1), 1, None, &PlannerConfig::default(), &options), Err(Error::OverflowRisk { .. })) {
        return fail("planning with an overflowing chain limit succeeded");
    }
    Ok("layers 4/13/18 bit-exact vs the integer oracle; certifier rejects 2^16-long chains and 2^20-channel reductions".into())
}

fn im2col_baseline() -> Outcome {
    let mut worst = 0.0f64;
    for (id, spec) in layers(1) {
        let (input, weight) = (input_of(&spec, id), weight_of(&spec, id));
        let reference = core(conv_forward_naive(&spec, &input, &weight))?;
        let result = core(conv_forward_im2col(&spec, &input, &weight))?;
        let norms = core(error_norms(&reference, &result))?;
        if norms.linf_rel > IM2COL_LINF_REL {
            return fail(format!("layer {id}: linf_rel {:.2e}", norms.linf_rel));
        }
        worst = worst.max(norms.linf_rel);
    }
    Ok(format!("20 layers, N=1, worst linf_rel {worst:.2e}"))
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

fn adjoint_identities() -> Outcome {
    let mut worst = 0.0f64;
    for (id, spec) in layers(1) {
        let wide = |t: Tensor4<f32>| t.map(|v| v as f64);
        let x = wide(input_of(&spec, id));
        let w = wide(weight_of(&spec, id));
        let y = wide(grad_output_of(&spec, id));
        let forward = dot(&core(conv_forward_naive(&spec, &x, &w))?, &y);
        let backward = dot(&x, &core(conv_backward_naive(&spec, &y, &w))?);
        let update = dot(&w, &core(conv_update_naive(&spec, &x, &y))?);
        for (name, other) in [("backward", backward), ("update", update)] {
            let rel = (forward - other).abs() / forward.abs().max(other.abs()).max(f64::MIN_POSITIVE);
            if rel > ADJOINT_REL {
                return fail(format!("layer {id}: <F(x),y> vs {name} differ by {rel:.2e}"));
            }
            worst = worst.max(rel);
        }
    }
    Ok(format!("20 layers, N=1, f64, worst relative gap {worst:.2e}"))
}

fn best_of(runs: usize, mut body: impl FnMut()) -> f64 {
    (0..runs)
        .map(|_| {
            let start = Instant::now();
            body();
            start.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

fn performance() -> Outcome {
    let spec = layer(8, 4);
    let (input, weight) = (input_of(&spec, 8), weight_of(&spec, 8));
    let plan: ExecutionPlan<f32> = core(plan_forward(&spec, 1, None, &PlannerConfig::default(), &PlanOptions::default()))?;
    let (bi, bw) = (core(to_blocked_activation(&input, &spec))?, core(to_blocked_weight(&weight, &spec))?);
    let mut out = plan.new_output();
    let direct = best_of(20, || {
        out.as_mut_slice().fill(0.0);
        plan.replay_all(&bi, &bw, &mut out, &Sequential).expect("replay");
        black_box(&out);
    });
    let naive = best_of(20, || {
        black_box(conv_forward_naive(&spec, &input, &weight).expect("naive"));
    });
    let im2col = best_of(20, || {
        black_box(conv_forward_im2col(&spec, &input, &weight).expect("im2col"));
    });

    let spec13 = layer(13, 8);
    let (input13, weight13) = (input_of(&spec13, 13), weight_of(&spec13, 13));
    let (bi13, bw13) = (core(to_blocked_activation(&input13, &spec13))?, core(to_blocked_weight(&weight13, &spec13))?);
    let timed_threads = |threads: usize| -> Result<f64, String> {
        let plan: ExecutionPlan<f32> = core(plan_forward(&spec13, threads, None, &PlannerConfig::default(), &PlanOptions::default()))?;
        let mut out = plan.new_output();
        Ok(best_of(20, || {
            out.as_mut_slice().fill(0.0);
            plan.replay_all(&bi13, &bw13, &mut out, &ScopedThreads).expect("replay");
            black_box(&out);
        }))
    };
    let one = timed_threads(1)?;
    let four = timed_threads(4)?;

    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let (vs_naive, vs_im2col, scaling) = (naive / direct, im2col / direct, one / four);
    let summary = format!(
        "layer 8 N=4: direct {:.2} ms, {vs_naive:.1}x naive, {vs_im2col:.2}x im2col; layer 13 N=8: T=4 {scaling:.2}x T=1 ({cpus} CPUs available)",
        direct * 1e3
    );
    if vs_naive >= 3.0 && vs_im2col >= 1.5 && scaling >= 2.0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn flop_accounting() -> Outcome {
    let config = BenchConfig {
        layers: LayerSource::Resnet50,
        layer_ids: Some(vec![4]),
        minibatch: 28,
        implementation: ImplKind::Direct,
        ..BenchConfig::default()
    };
    let reported = run_benchmark(&config).map_err(|e| e.to_string())?.layers[0].flops;
    let counted = count_flops(&layer(4, 28));
    if reported != 6_473_908_224 || counted != reported {
        return fail(format!("reported {reported}, counted {counted}"));
    }
    for (id, spec) in layers(1) {
        if count_flops(&spec) != spec.flops() {
            return fail(format!("layer {id}: counter {} vs formula {}", count_flops(&spec), spec.flops()));
        }
    }
    Ok(format!("layer 4 N=28: reported {reported} = counted {counted}; counter matches the formula on all 20 layers"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("forward oracle equivalence", forward_oracle),
        ("backward oracle equivalence", backward_oracle),
        ("weight-update oracle equivalence", update_oracle),
        ("kernel-stream soundness", streams_soundness),
        ("fusion correctness", fusion_correctness),
        ("int16 exactness", int16_exactness),
        ("im2col baseline", im2col_baseline),
        ("adjoint identities", adjoint_identities),
        ("performance smoke", performance),
        ("flop accounting", flop_accounting),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let seconds = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail} [{seconds:.1}s]", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {} ({name}): {detail} [{seconds:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
