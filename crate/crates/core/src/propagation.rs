//! Forward, backward and weight-update passes on blocked tensors.
//!
//! The forward pass replays a recorded [`ExecutionPlan`]. The backward pass
//! reuses the forward machinery whenever the layer admits it: stride-1
//! layers run a forward pass with flipped, channel-transposed weights over
//! a re-haloed output gradient, and strided 1×1 layers run a forward pass
//! whose outputs land on the stride lattice of the input gradient. Other
//! layers fall back to a loop nest of small GEMMs. The weight update runs
//! per-tap `vlen×vlen` kernels over spatial blocks, with gradient copies
//! over minibatch shards when the chosen strategy asks for them.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::exec::{Parallel, SharedMut};
use crate::layer::ConvLayerSpec;
use crate::microkernel::{
    build_forward_kernel, build_update_kernel, select_register_blocking, CompiledKernel, KernelElement, MicrokernelDescriptor, UpdateKernel,
};
use crate::planner::{choose_loop_order, partition_threads, PlannerConfig, WeightUpdateStrategy};
use crate::stream::{dryrun_forward, ExecutionPlan, FusedOp, OutputPlacement, PlanOptions};
use crate::tensor::{ActivationLayout, BlockedActivation, BlockedWeight, WeightLayout};

/// Dryrun of a forward layer with the default loop order and blocking.
/// More threads than work items are clamped to the number of items.
pub fn plan_forward<T: KernelElement>(
    spec: &ConvLayerSpec,
    threads: usize,
    fusion: Option<FusedOp>,
    planner: &PlannerConfig,
    options: &PlanOptions,
) -> Result<ExecutionPlan<T>> {
    spec.validate()?;
    let blocking = select_register_blocking(spec, &planner.blocking);
    let items = spec.n * spec.k_blocks() * blocking.tiles_p() * blocking.tiles_q();
    let partition = partition_threads(spec, &blocking, threads.clamp(1, items));
    dryrun_forward(spec, choose_loop_order(spec), blocking, &partition, fusion, options)
}

/// Runs a forward plan into a fresh output tensor.
pub fn forward<T: KernelElement>(
    plan: &ExecutionPlan<T>,
    input: &BlockedActivation<T>,
    weight: &BlockedWeight<T>,
    par: &dyn Parallel,
) -> Result<BlockedActivation<T::Acc>> {
    let mut output = plan.new_output();
    plan.replay_all(input, weight, &mut output, par)?;
    Ok(output)
}

/// Weights of the backward-as-forward convolution:
/// `W'[c][k][R-1-r][S-1-s] = W[k][c][r][s]`. Input and output channel
/// roles swap, lanes transpose, and taps flip. Applying it twice is the
/// identity.
pub fn transform_weight_stride1<T: crate::Element>(weight: &BlockedWeight<T>) -> BlockedWeight<T> {
    let l = *weight.layout();
    let mut out = BlockedWeight::zeros(WeightLayout { k: l.c, c: l.k, ..l });
    let dst_layout = *out.layout();
    let data = out.as_mut_slice();
    for k in 0..l.k {
        for c in 0..l.c {
            for r in 0..l.r {
                for s in 0..l.s {
                    data[dst_layout.index(c, k, l.r - 1 - r, l.s - 1 - s)] = weight.get(k, c, r, s);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackwardRoute {
    /// Forward pass with transformed weights over the output gradient padded by `R-1-pad`.
    DualityStride1,
    /// Forward 1×1 pass writing onto the stride lattice of the input gradient.
    Duality1x1,
    /// Loop nest of `vlen×vlen×Q` GEMMs.
    GenericGemm,
}

pub fn select_backward_route(spec: &ConvLayerSpec) -> BackwardRoute {
    if spec.stride == 1 && spec.pad_h < spec.r && spec.pad_w < spec.s {
        BackwardRoute::DualityStride1
    } else if spec.r == 1 && spec.s == 1 && spec.pad_h == 0 && spec.pad_w == 0 {
        BackwardRoute::Duality1x1
    } else {
        BackwardRoute::GenericGemm
    }
}

/// The forward-shaped convolution that produces the input gradient, with
/// where its outputs go in the input-gradient tensor.
fn duality_spec(spec: &ConvLayerSpec, route: BackwardRoute) -> (ConvLayerSpec, OutputPlacement) {
    let base = ConvLayerSpec { c: spec.k, k: spec.c, h: spec.p(), w: spec.q(), ..*spec };
    match route {
        BackwardRoute::DualityStride1 => (
            base.with_padding(spec.r - 1 - spec.pad_h, spec.s - 1 - spec.pad_w),
            OutputPlacement { h: spec.h, w: spec.w, halo_h: spec.pad_h, halo_w: spec.pad_w, step: 1 },
        ),
        _ => (ConvLayerSpec { stride: 1, ..base }, OutputPlacement { h: spec.h, w: spec.w, halo_h: 0, halo_w: 0, step: spec.stride }),
    }
}

#[derive(Debug, Clone)]
enum BackwardEngine {
    Duality { spec: ConvLayerSpec, plan: Box<ExecutionPlan<f32>> },
    Gemm { kernel: CompiledKernel<f32>, threads: usize },
}

/// Setup of an input-gradient pass. The input gradient has the layout of
/// the layer input (halo = padding).
#[derive(Debug, Clone)]
pub struct BackwardPlan {
    spec: ConvLayerSpec,
    route: BackwardRoute,
    engine: BackwardEngine,
}

impl BackwardPlan {
    pub fn new(spec: &ConvLayerSpec, threads: usize, planner: &PlannerConfig, options: &PlanOptions) -> Result<Self> {
        Self::with_route(spec, select_backward_route(spec), threads, planner, options)
    }

    /// Forces a route; the duality routes are rejected on layers they do not apply to.
    pub fn with_route(
        spec: &ConvLayerSpec,
        route: BackwardRoute,
        threads: usize,
        planner: &PlannerConfig,
        options: &PlanOptions,
    ) -> Result<Self> {
        spec.validate()?;
        let applicable = match route {
            BackwardRoute::DualityStride1 => spec.stride == 1 && spec.pad_h < spec.r && spec.pad_w < spec.s,
            BackwardRoute::Duality1x1 => spec.r == 1 && spec.s == 1 && spec.pad_h == 0 && spec.pad_w == 0,
            BackwardRoute::GenericGemm => true,
        };
        if !applicable {
            return Err(Error::InvalidSpec("backward route does not apply to this layer"));
        }
        let engine = match route {
            BackwardRoute::GenericGemm => {
                let v = spec.vlen;
                let desc = MicrokernelDescriptor::forward(v, (1, spec.q()), (1, 1), 1)
                    .with_strides(spec.q() * v, spec.q() * spec.stride * v, spec.stride * v)
                    .with_prefetch(options.prefetch);
                let kernel = build_forward_kernel(&desc)?;
                BackwardEngine::Gemm { kernel, threads: threads.clamp(1, spec.n * spec.c_blocks()) }
            }
            _ => {
                let (dual, placement) = duality_spec(spec, route);
                let options = PlanOptions { output: Some(placement), ..*options };
                let plan = plan_forward(&dual, threads, None, planner, &options)?;
                BackwardEngine::Duality { spec: dual, plan: Box::new(plan) }
            }
        };
        Ok(Self { spec: *spec, route, engine })
    }

    pub fn route(&self) -> BackwardRoute {
        self.route
    }

    pub fn spec(&self) -> &ConvLayerSpec {
        &self.spec
    }

    /// The forward plan a duality route replays.
    pub fn duality_plan(&self) -> Option<&ExecutionPlan<f32>> {
        match &self.engine {
            BackwardEngine::Duality { plan, .. } => Some(plan),
            BackwardEngine::Gemm { .. } => None,
        }
    }

    pub fn input_gradient_layout(&self) -> ActivationLayout {
        let s = &self.spec;
        ActivationLayout { n: s.n, channels: s.c, h: s.h, w: s.w, halo_h: s.pad_h, halo_w: s.pad_w, vlen: s.vlen }
    }

    fn check(&self, grad_output: &BlockedActivation<f32>, weight: &BlockedWeight<f32>) -> Result<()> {
        let s = &self.spec;
        let g = grad_output.layout();
        let expect = [(s.n, g.n, "gradient batch"), (s.k, g.channels, "gradient channels"), (s.p(), g.h, "gradient height")];
        for (expected, found, what) in expect.into_iter().chain([(s.q(), g.w, "gradient width"), (s.vlen, g.vlen, "gradient vlen")]) {
            if expected != found {
                return Err(Error::ShapeMismatch { what, expected, found });
            }
        }
        let w = weight.layout();
        if *w != (WeightLayout { k: s.k, c: s.c, r: s.r, s: s.s, vlen: s.vlen }) {
            return Err(Error::ShapeMismatch { what: "weight elements", expected: s.k * s.c * s.r * s.s, found: w.k * w.c * w.r * w.s });
        }
        Ok(())
    }

    /// Input gradient of the layer for output gradient `grad_output` (any halo).
    pub fn backward(
        &self,
        grad_output: &BlockedActivation<f32>,
        weight: &BlockedWeight<f32>,
        par: &dyn Parallel,
    ) -> Result<BlockedActivation<f32>> {
        self.check(grad_output, weight)?;
        let transformed = transform_weight_stride1(weight);
        match &self.engine {
            BackwardEngine::Duality { spec, plan } => {
                let padded = grad_output.with_halo(spec.pad_h, spec.pad_w);
                forward(plan, &padded, &transformed, par)
            }
            BackwardEngine::Gemm { kernel, threads } => self.backward_gemm(kernel, *threads, grad_output, &transformed, par),
        }
    }

    fn backward_gemm(
        &self,
        kernel: &CompiledKernel<f32>,
        threads: usize,
        grad_output: &BlockedActivation<f32>,
        transformed: &BlockedWeight<f32>,
        par: &dyn Parallel,
    ) -> Result<BlockedActivation<f32>> {
        let spec = &self.spec;
        let mut grad_input = BlockedActivation::<f32>::zeros(self.input_gradient_layout());
        let gl = *grad_input.layout();
        let ol = *grad_output.layout();
        let wl = *transformed.layout();
        let (dout, wts) = (grad_output.as_slice(), transformed.as_slice());
        let shared = SharedMut::new(grad_input.as_mut_slice());
        let units = spec.n * spec.c_blocks();
        let ext = kernel.extents();
        par.run(threads, &|t| {
            for unit in t * units / threads..(t + 1) * units / threads {
                let (n, cb) = (unit / spec.c_blocks(), unit % spec.c_blocks());
                for kb in 0..spec.k_blocks() {
                    for oj in 0..spec.p() {
                        let src = ol.offset(n, kb, ol.halo_h + oj, ol.halo_w);
                        for r in 0..spec.r {
                            for s in 0..spec.s {
                                let dst = gl.offset(n, cb, oj * spec.stride + r, s);
                                let w = wl.offset(cb, kb, spec.r - 1 - r, spec.s - 1 - s);
                                debug_assert!(src + ext.input <= dout.len() && w + ext.weight <= wts.len());
                                debug_assert!(dst + ext.output <= shared.len());
                                // SAFETY: offsets stay inside the tensors (the
                                // padded input-gradient map holds every tap),
                                // and unit (n, c_b) is written by this worker only.
                                unsafe {
                                    kernel.run_raw(
                                        dout.as_ptr().add(src),
                                        wts.as_ptr().add(w),
                                        shared.ptr().add(dst),
                                        [core::ptr::null(); 3],
                                    )
                                };
                            }
                        }
                    }
                }
            }
        });
        grad_input.zero_halo();
        Ok(grad_input)
    }
}

/// `G` weight-gradient accumulators and the copy each thread writes.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGradCopies {
    layout: WeightLayout,
    copies: usize,
    data: Vec<f32>,
    owner: Vec<usize>,
}

impl WeightGradCopies {
    pub fn zeros(layout: WeightLayout, copies: usize, threads: usize) -> Self {
        let copies = copies.max(1);
        let threads = threads.max(copies);
        let group = threads / copies;
        Self { layout, copies, data: vec![0.0; copies * layout.len()], owner: (0..threads).map(|t| (t / group).min(copies - 1)).collect() }
    }

    pub fn copies(&self) -> usize {
        self.copies
    }

    pub fn layout(&self) -> &WeightLayout {
        &self.layout
    }

    pub fn owner(&self, thread: usize) -> usize {
        self.owner[thread]
    }

    pub fn copy(&self, g: usize) -> &[f32] {
        let len = self.layout.len();
        &self.data[g * len..(g + 1) * len]
    }

    pub fn copy_mut(&mut self, g: usize) -> &mut [f32] {
        let len = self.layout.len();
        &mut self.data[g * len..(g + 1) * len]
    }

    pub fn clear(&mut self) {
        self.data.fill(0.0);
    }
}

/// Sums the copies in copy order; each of `threads` workers reduces a
/// disjoint slice of the result.
pub fn reduce_weight_copies(copies: &WeightGradCopies, threads: usize, par: &dyn Parallel) -> BlockedWeight<f32> {
    let mut out = BlockedWeight::zeros(copies.layout);
    let len = copies.layout.len();
    let threads = threads.clamp(1, len.max(1));
    let shared = SharedMut::new(out.as_mut_slice());
    par.run(threads, &|t| {
        let range = t * len / threads..(t + 1) * len / threads;
        // SAFETY: worker slices are disjoint.
        let dst = unsafe { shared.slice_mut(range.start, range.len()) };
        dst.copy_from_slice(&copies.copy(0)[range.clone()]);
        for g in 1..copies.copies {
            for (d, s) in dst.iter_mut().zip(&copies.copy(g)[range.clone()]) {
                *d += *s;
            }
        }
    });
    out
}

/// Weight gradient `dW[k][c][r][s] = Σ I[n][c][·]·dO[n][k][·]` using the
/// given strategy and `(B_P, B_Q)` spatial blocks. `input` must carry a
/// halo equal to the padding; `grad_output` may have any halo.
pub fn weight_update(
    spec: &ConvLayerSpec,
    input: &BlockedActivation<f32>,
    grad_output: &BlockedActivation<f32>,
    strategy: &WeightUpdateStrategy,
    (b_p, b_q): (usize, usize),
    par: &dyn Parallel,
) -> Result<BlockedWeight<f32>> {
    spec.validate()?;
    let il = *input.layout();
    let ol = *grad_output.layout();
    let expected_input =
        ActivationLayout { n: spec.n, channels: spec.c, h: spec.h, w: spec.w, halo_h: spec.pad_h, halo_w: spec.pad_w, vlen: spec.vlen };
    if il != expected_input {
        return Err(Error::ShapeMismatch { what: "input elements", expected: expected_input.len(), found: il.len() });
    }
    let expected_out =
        ActivationLayout { n: spec.n, channels: spec.k, h: spec.p(), w: spec.q(), halo_h: ol.halo_h, halo_w: ol.halo_w, vlen: spec.vlen };
    if ol != expected_out {
        return Err(Error::ShapeMismatch { what: "output-gradient elements", expected: expected_out.len(), found: ol.len() });
    }
    if b_p == 0 || b_q == 0 || !spec.p().is_multiple_of(b_p) || !spec.q().is_multiple_of(b_q) {
        return Err(Error::InvalidSpec("spatial blocks must divide the output plane"));
    }
    let check = WeightUpdateStrategy::new(spec, strategy.threads(), strategy.copies())?;
    if check != *strategy || strategy.copies() > spec.n {
        return Err(Error::InfeasibleStrategy("strategy does not fit this layer"));
    }

    let desc = MicrokernelDescriptor::update(spec.vlen, (b_p, b_q), spec.stride).with_strides(il.row_stride(), ol.row_stride(), spec.vlen);
    let kernel = build_update_kernel(&desc)?;
    let layout = WeightLayout { k: spec.k, c: spec.c, r: spec.r, s: spec.s, vlen: spec.vlen };
    let mut copies = WeightGradCopies::zeros(layout, strategy.copies(), strategy.threads());
    {
        let shared = SharedMut::new(&mut copies.data);
        let copies_ref = &copies;
        let split = strategy.split();
        let group = strategy.threads() / strategy.copies();
        let (rs_total, kbs, cbs) = (spec.r * spec.s, spec.k_blocks(), spec.c_blocks());
        par.run(strategy.threads(), &|t| {
            let local = t % group;
            if local >= split.threads() {
                return;
            }
            let g = copies_ref.owner(t);
            let (i_rs, i_k, i_c) = (local / (split.k * split.c), local / split.c % split.k, local % split.c);
            let part = |i: usize, parts: usize, total: usize| i * total / parts..(i + 1) * total / parts;
            let job = UpdateJob { spec, kernel: &kernel, input, grad_output, layout, base: g * layout.len(), blocks: (b_p, b_q) };
            // SAFETY: within a copy, workers own disjoint (r·s, k_b, c_b) blocks.
            unsafe {
                job.run(&shared, strategy.shard(spec, g), part(i_rs, split.rs, rs_total), part(i_k, split.k, kbs), part(i_c, split.c, cbs))
            };
        });
    }
    if strategy.copies() == 1 {
        let mut out = BlockedWeight::zeros(layout);
        out.as_mut_slice().copy_from_slice(copies.copy(0));
        return Ok(out);
    }
    Ok(reduce_weight_copies(&copies, strategy.threads(), par))
}

struct UpdateJob<'a> {
    spec: &'a ConvLayerSpec,
    kernel: &'a UpdateKernel,
    input: &'a BlockedActivation<f32>,
    grad_output: &'a BlockedActivation<f32>,
    layout: WeightLayout,
    base: usize,
    blocks: (usize, usize),
}

impl UpdateJob<'_> {
    /// # Safety
    /// No other worker may write the `(rs, kb, cb)` blocks of this copy.
    unsafe fn run(
        &self,
        out: &SharedMut<f32>,
        images: core::ops::Range<usize>,
        taps: core::ops::Range<usize>,
        kbs: core::ops::Range<usize>,
        cbs: core::ops::Range<usize>,
    ) {
        let spec = self.spec;
        let (il, ol) = (self.input.layout(), self.grad_output.layout());
        let (b_p, b_q) = self.blocks;
        let (ip, op) = (self.input.as_slice().as_ptr(), self.grad_output.as_slice().as_ptr());
        for n in images {
            for kb in kbs.clone() {
                for cb in cbs.clone() {
                    for pb in 0..spec.p() / b_p {
                        for qb in 0..spec.q() / b_q {
                            let (oj, oi) = (pb * b_p, qb * b_q);
                            let dout = ol.offset(n, kb, ol.halo_h + oj, ol.halo_w + oi);
                            for tap in taps.clone() {
                                let (r, s) = (tap / spec.s, tap % spec.s);
                                let inp = il.offset(n, cb, oj * spec.stride + r, oi * spec.stride + s);
                                let dw = self.base + self.layout.offset(kb, cb, r, s);
                                debug_assert!(dw + spec.vlen * spec.vlen <= out.len());
                                self.kernel.run_raw(ip.add(inp), op.add(dout), out.ptr().add(dw));
                            }
                        }
                    }
                }
            }
        }
    }
}
