//! Kernel streams: record each thread's kernel calls once (dryrun), then
//! execute the recording (replay).
//!
//! A dryrun walks the blocked loop nest for every thread without touching
//! tensor data. It records, per call, the kernel variant and the element
//! offsets of the three operands, plus the offsets to prefetch (those of a
//! later call). The call sequence, interleaved with fused-operator
//! applications, is run-length encoded into [`Segment`]s.

use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::exec::{Parallel, SharedMut};
use crate::layer::ConvLayerSpec;
use crate::microkernel::{
    build_kernel_for_isa, CompiledKernel, Isa, KernelElement, MicrokernelDescriptor, Offsets, RegisterBlocking, DEFAULT_ACC_CHAIN_LIMIT,
    DEFAULT_I16_BOUND,
};
use crate::planner::{LoopIndex, LoopOrder, ThreadPartition, WorkItem};
use crate::tensor::{ActivationLayout, BlockedActivation, BlockedWeight, WeightLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FusedKind {
    Relu = 0,
    BiasAdd = 1,
    BiasRelu = 2,
}

impl FusedKind {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(FusedKind::Relu),
            1 => Some(FusedKind::BiasAdd),
            2 => Some(FusedKind::BiasRelu),
            _ => None,
        }
    }

    pub fn has_bias(self) -> bool {
        !matches!(self, FusedKind::Relu)
    }

    pub fn has_relu(self) -> bool {
        !matches!(self, FusedKind::BiasAdd)
    }
}

/// Element-wise operator applied to each output tile right after its last
/// accumulation.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedOp {
    kind: FusedKind,
    bias: Vec<f32>,
}

impl FusedOp {
    pub fn relu() -> Self {
        Self { kind: FusedKind::Relu, bias: Vec::new() }
    }

    pub fn bias_add(bias: Vec<f32>) -> Self {
        Self { kind: FusedKind::BiasAdd, bias }
    }

    pub fn bias_relu(bias: Vec<f32>) -> Self {
        Self { kind: FusedKind::BiasRelu, bias }
    }

    pub fn kind(&self) -> FusedKind {
        self.kind
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.kind.has_bias().then_some(&self.bias[..])
    }

    /// Checks the bias length against the number of output channels.
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.kind.has_bias() && self.bias.len() != channels {
            return Err(Error::ShapeMismatch { what: "bias length", expected: channels, found: self.bias.len() });
        }
        Ok(())
    }

    #[inline]
    fn apply_lane<A: Element>(&self, x: A, channel: usize) -> A {
        let x = if self.kind.has_bias() { x.add_bias(self.bias[channel]) } else { x };
        if self.kind.has_relu() {
            x.relu()
        } else {
            x
        }
    }
}

/// Target of one APPLY: a `rows×cols` output tile of one channel block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ApplyInfo {
    pub op: FusedKind,
    pub output: u64,
    pub rows: u32,
    pub cols: u32,
    pub channel_block: u32,
}

/// One entry of a raw call trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Call {
    Conv,
    Apply(ApplyInfo),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    /// A maximal run of kernel calls.
    ConvStreak(u32),
    Apply(ApplyInfo),
}

/// Run-length encodes a call trace into maximal convolution streaks.
pub fn encode_segments(trace: &[Call]) -> Result<Vec<Segment>> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut out = Vec::new();
    for call in trace {
        match (call, out.last_mut()) {
            (Call::Conv, Some(Segment::ConvStreak(n))) => *n += 1,
            (Call::Conv, _) => out.push(Segment::ConvStreak(1)),
            (Call::Apply(info), _) => out.push(Segment::Apply(*info)),
        }
    }
    Ok(out)
}

pub fn decode_segments(segments: &[Segment]) -> Vec<Call> {
    let mut out = Vec::new();
    for seg in segments {
        match *seg {
            Segment::ConvStreak(n) => out.extend(core::iter::repeat_n(Call::Conv, n as usize)),
            Segment::Apply(info) => out.push(Call::Apply(info)),
        }
    }
    out
}

/// Per-thread offset streams. Offsets are element indices relative to the
/// start of each tensor.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StreamBuffers {
    pub var: Vec<u32>,
    pub inp: Vec<u64>,
    pub wt: Vec<u64>,
    pub out: Vec<u64>,
    pub pf_inp: Vec<u64>,
    pub pf_wt: Vec<u64>,
    pub pf_out: Vec<u64>,
}

impl StreamBuffers {
    pub fn len(&self) -> usize {
        self.var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.var.is_empty()
    }

    fn lengths_agree(&self) -> bool {
        let n = self.var.len();
        [&self.inp, &self.wt, &self.out, &self.pf_inp, &self.pf_wt, &self.pf_out].iter().all(|s| s.len() == n)
    }

    fn chain_prefetch(&mut self, lookahead: usize) {
        let n = self.len();
        let target = |i: usize| if i + lookahead < n { i + lookahead } else { i };
        self.pf_inp = (0..n).map(|i| self.inp[target(i)]).collect();
        self.pf_wt = (0..n).map(|i| self.wt[target(i)]).collect();
        self.pf_out = (0..n).map(|i| self.out[target(i)]).collect();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ThreadStream {
    pub buffers: StreamBuffers,
    pub segments: Vec<Segment>,
}

/// Where output pixel `(oj, oi)` is stored: padded row `halo_h + step·oj`,
/// padded column `halo_w + step·oi` of an `h×w` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OutputPlacement {
    pub h: usize,
    pub w: usize,
    pub halo_h: usize,
    pub halo_w: usize,
    pub step: usize,
}

impl OutputPlacement {
    pub fn dense(spec: &ConvLayerSpec) -> Self {
        Self { h: spec.p(), w: spec.q(), halo_h: 0, halo_w: 0, step: 1 }
    }

    pub fn with_halo(mut self, halo_h: usize, halo_w: usize) -> Self {
        self.halo_h = halo_h;
        self.halo_w = halo_w;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PlanOptions {
    /// Calls between a prefetch and the call that uses the data.
    pub lookahead: usize,
    pub prefetch: bool,
    pub streaming_stores: bool,
    /// Output placement; `None` writes a dense `P×Q` map without halo.
    pub output: Option<OutputPlacement>,
    /// Instruction-set level of the kernels; `None` uses the best available.
    pub isa: Option<Isa>,
    pub acc_chain_limit: usize,
    pub input_bound: u32,
    pub weight_bound: u32,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            lookahead: 1,
            prefetch: true,
            streaming_stores: false,
            output: None,
            isa: None,
            acc_chain_limit: DEFAULT_ACC_CHAIN_LIMIT,
            input_bound: DEFAULT_I16_BOUND,
            weight_bound: DEFAULT_I16_BOUND,
        }
    }
}

/// Everything an [`ExecutionPlan`] is made of, with public fields, for
/// serialization and inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanParts {
    pub spec: ConvLayerSpec,
    pub order: LoopOrder,
    pub blocking: RegisterBlocking,
    pub partition: ThreadPartition,
    pub options: PlanOptions,
    pub fusion: Option<FusedOp>,
    pub threads: Vec<ThreadStream>,
}

/// Recorded per-thread kernel streams of one forward layer, with the kernel
/// table they index. Immutable once built.
#[derive(Debug, Clone)]
pub struct ExecutionPlan<T: KernelElement> {
    parts: PlanParts,
    kernels: Vec<CompiledKernel<T>>,
    input: ActivationLayout,
    weight: WeightLayout,
    output: ActivationLayout,
}

/// Coordinates of one recorded kernel call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CallCoords {
    pub n: usize,
    pub kb: usize,
    pub cb: usize,
    pub ojb: usize,
    pub oib: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    StreamLengths {
        thread: usize,
    },
    SegmentEncoding {
        thread: usize,
    },
    UnknownVariant {
        thread: usize,
        position: usize,
    },
    OutOfBounds {
        thread: usize,
        position: usize,
    },
    /// The offsets of a call do not describe a single `(n, k_b, c_b, tile)` tuple.
    Inconsistent {
        thread: usize,
        position: usize,
    },
    NotOwned {
        thread: usize,
        position: usize,
    },
    Coverage {
        coords: CallCoords,
        count: usize,
    },
    PrefetchChain {
        thread: usize,
        position: usize,
    },
    ApplyPlacement {
        thread: usize,
        segment: usize,
    },
    /// A tile received a number of APPLYs other than one (fused) or zero.
    ApplyCount {
        item: WorkItem,
        count: usize,
    },
}

/// Findings of [`validate_plan`]; empty when the plan is sound.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PlanReport {
    pub violations: Vec<Violation>,
}

impl PlanReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn layouts(spec: &ConvLayerSpec, placement: &OutputPlacement) -> (ActivationLayout, WeightLayout, ActivationLayout) {
    let v = spec.vlen;
    let input = ActivationLayout { n: spec.n, channels: spec.c, h: spec.h, w: spec.w, halo_h: spec.pad_h, halo_w: spec.pad_w, vlen: v };
    let weight = WeightLayout { k: spec.k, c: spec.c, r: spec.r, s: spec.s, vlen: v };
    let output = ActivationLayout {
        n: spec.n,
        channels: spec.k,
        h: placement.h,
        w: placement.w,
        halo_h: placement.halo_h,
        halo_w: placement.halo_w,
        vlen: v,
    };
    (input, weight, output)
}

fn check_placement(spec: &ConvLayerSpec, placement: &OutputPlacement) -> Result<()> {
    let step = placement.step;
    if step == 0 || (spec.p() - 1) * step >= placement.h || (spec.q() - 1) * step >= placement.w {
        return Err(Error::InvalidSpec("output placement does not hold the output plane"));
    }
    Ok(())
}

fn build_kernels<T: KernelElement>(
    spec: &ConvLayerSpec,
    blocking: &RegisterBlocking,
    options: &PlanOptions,
    input: &ActivationLayout,
    output: &ActivationLayout,
    step: usize,
) -> Result<Vec<CompiledKernel<T>>> {
    let isa = options.isa.unwrap_or_else(Isa::detect);
    blocking
        .variants()
        .into_iter()
        .map(|shape| {
            let desc = MicrokernelDescriptor::forward(spec.vlen, shape, (spec.r, spec.s), spec.stride)
                .with_dtype(T::DTYPE)
                .with_strides(input.row_stride(), step * output.row_stride(), step * spec.vlen)
                .with_prefetch(options.prefetch)
                .with_streaming_stores(options.streaming_stores)
                .with_chain_limit(options.acc_chain_limit, options.input_bound, options.weight_bound);
            if T::DTYPE == crate::microkernel::KernelDtype::I16 {
                desc.certify_i16_reduction(spec.c)?;
            }
            build_kernel_for_isa(&desc, isa)
        })
        .collect()
}

struct Geometry<'a> {
    spec: &'a ConvLayerSpec,
    blocking: &'a RegisterBlocking,
    input: ActivationLayout,
    weight: WeightLayout,
    output: ActivationLayout,
    placement: OutputPlacement,
}

impl Geometry<'_> {
    fn offsets(&self, c: CallCoords) -> Offsets {
        let (oj, oi) = (c.ojb * self.blocking.rb_p, c.oib * self.blocking.rb_q);
        let stride = self.spec.stride;
        let p = &self.placement;
        Offsets {
            input: self.input.offset(c.n, c.cb, oj * stride, oi * stride),
            weight: self.weight.offset(c.kb, c.cb, 0, 0),
            output: self.output.offset(c.n, c.kb, p.halo_h + oj * p.step, p.halo_w + oi * p.step),
        }
    }

    fn apply_info(&self, kind: FusedKind, c: CallCoords) -> ApplyInfo {
        let (rows, cols) = self.blocking.tile_shape(c.ojb, c.oib);
        ApplyInfo { op: kind, output: self.offsets(c).output as u64, rows: rows as u32, cols: cols as u32, channel_block: c.kb as u32 }
    }

    /// Inverse of [`offsets`](Self::offsets); `None` when the offsets are
    /// not those of a single call.
    fn decode(&self, inp: u64, wt: u64, out: u64) -> Option<CallCoords> {
        let v = self.spec.vlen as u64;
        let (o, p) = (&self.output, &self.placement);
        if !out.is_multiple_of(v) {
            return None;
        }
        let pixel = (out / v) as usize;
        let (col, row, plane) = (pixel % o.cols(), pixel / o.cols() % o.rows(), pixel / (o.cols() * o.rows()));
        let (n, kb) = (plane / o.blocks(), plane % o.blocks());
        let oj = row.checked_sub(p.halo_h).filter(|d| d % p.step == 0)? / p.step;
        let oi = col.checked_sub(p.halo_w).filter(|d| d % p.step == 0)? / p.step;
        if n >= self.spec.n || oj % self.blocking.rb_p != 0 || oi % self.blocking.rb_q != 0 {
            return None;
        }
        let (ojb, oib) = (oj / self.blocking.rb_p, oi / self.blocking.rb_q);
        if ojb >= self.blocking.tiles_p() || oib >= self.blocking.tiles_q() {
            return None;
        }
        let block = self.weight.block_len() as u64;
        if !wt.is_multiple_of(block) {
            return None;
        }
        let wb = (wt / block) as usize;
        let (wkb, cb) = (wb / self.weight.c_blocks(), wb % self.weight.c_blocks());
        let coords = CallCoords { n, kb, cb, ojb, oib };
        (wkb == kb && self.offsets(coords).input as u64 == inp).then_some(coords)
    }
}

fn loop_extent(idx: LoopIndex, spec: &ConvLayerSpec, blocking: &RegisterBlocking) -> usize {
    match idx {
        LoopIndex::Image => spec.n,
        LoopIndex::KBlock => spec.k_blocks(),
        LoopIndex::CBlock => spec.c_blocks(),
        LoopIndex::TileRow => blocking.tiles_p(),
        LoopIndex::TileCol => blocking.tiles_q(),
    }
}

/// Visits every `(n, k_b, c_b, ojb, oib)` tuple in `order`.
fn walk_nest(order: &LoopOrder, spec: &ConvLayerSpec, blocking: &RegisterBlocking, mut visit: impl FnMut(CallCoords)) {
    let idx = order.indices();
    let ext = idx.map(|i| loop_extent(i, spec, blocking));
    let total: usize = ext.iter().product();
    let mut counter = [0usize; 5];
    for _ in 0..total {
        let mut c = CallCoords { n: 0, kb: 0, cb: 0, ojb: 0, oib: 0 };
        for (i, &which) in idx.iter().enumerate() {
            let slot = match which {
                LoopIndex::Image => &mut c.n,
                LoopIndex::KBlock => &mut c.kb,
                LoopIndex::CBlock => &mut c.cb,
                LoopIndex::TileRow => &mut c.ojb,
                LoopIndex::TileCol => &mut c.oib,
            };
            *slot = counter[i];
        }
        visit(c);
        for i in (0..5).rev() {
            counter[i] += 1;
            if counter[i] < ext[i] {
                break;
            }
            counter[i] = 0;
        }
    }
}

fn item_of(c: CallCoords) -> WorkItem {
    WorkItem { n: c.n, kb: c.kb, ojb: c.ojb, oib: c.oib }
}

/// Records the per-thread kernel streams of a forward pass.
///
/// Each thread walks the loop nest in `order`, keeping the calls whose
/// output tile it owns. With `fusion`, an APPLY follows the last input
/// block of every tile.
pub fn dryrun_forward<T: KernelElement>(
    spec: &ConvLayerSpec,
    order: LoopOrder,
    blocking: RegisterBlocking,
    partition: &ThreadPartition,
    fusion: Option<FusedOp>,
    options: &PlanOptions,
) -> Result<ExecutionPlan<T>> {
    spec.validate()?;
    if (blocking.p, blocking.q) != (spec.p(), spec.q()) {
        return Err(Error::InvalidSpec("register blocking does not match the output plane"));
    }
    if partition.extents() != [spec.n, spec.k_blocks(), blocking.tiles_p(), blocking.tiles_q()] {
        return Err(Error::InvalidSpec("thread partition does not match the layer"));
    }
    if options.lookahead == 0 {
        return Err(Error::InvalidSpec("prefetch lookahead must be at least 1"));
    }
    if let Some(op) = &fusion {
        op.validate(spec.k)?;
    }
    if let Some(thread) = partition.ranges().iter().position(|r| r.is_empty()) {
        return Err(Error::PlanInfeasible { thread });
    }
    let placement = options.output.unwrap_or_else(|| OutputPlacement::dense(spec));
    check_placement(spec, &placement)?;
    let (input, weight, output) = layouts(spec, &placement);
    let kernels = build_kernels::<T>(spec, &blocking, options, &input, &output, placement.step)?;
    let geometry = Geometry { spec, blocking: &blocking, input, weight, output, placement };
    let last_cb = spec.c_blocks() - 1;

    let mut threads = Vec::with_capacity(partition.threads());
    for t in 0..partition.threads() {
        let owned = partition.range(t);
        let mut buffers = StreamBuffers::default();
        let mut trace = Vec::new();
        walk_nest(&order, spec, &blocking, |c| {
            if !owned.contains(&partition.linear(item_of(c))) {
                return;
            }
            let at = geometry.offsets(c);
            buffers.var.push(blocking.variant_of(c.ojb, c.oib) as u32);
            buffers.inp.push(at.input as u64);
            buffers.wt.push(at.weight as u64);
            buffers.out.push(at.output as u64);
            trace.push(Call::Conv);
            if let (Some(op), true) = (&fusion, c.cb == last_cb) {
                trace.push(Call::Apply(geometry.apply_info(op.kind(), c)));
            }
        });
        buffers.chain_prefetch(options.lookahead);
        let segments = encode_segments(&trace)?;
        threads.push(ThreadStream { buffers, segments });
    }

    let parts = PlanParts { spec: *spec, order, blocking, partition: partition.clone(), options: *options, fusion, threads };
    Ok(ExecutionPlan { parts, kernels, input, weight, output })
}

impl<T: KernelElement> ExecutionPlan<T> {
    /// Rebuilds a plan from its parts, rejecting it unless
    /// [`validate_plan`] finds no violation.
    pub fn from_parts(parts: PlanParts) -> Result<Self> {
        // SAFETY: the plan is validated before it is returned.
        let plan = unsafe { Self::from_parts_unchecked(parts)? };
        if validate_plan(&plan).is_clean() {
            Ok(plan)
        } else {
            Err(Error::InvalidPlan("plan failed validation"))
        }
    }

    /// Rebuilds a plan without validating its streams.
    ///
    /// # Safety
    /// Replaying a plan whose threads write overlapping output tiles is a
    /// data race. Offsets are still bounds-checked on replay.
    pub unsafe fn from_parts_unchecked(parts: PlanParts) -> Result<Self> {
        let spec = parts.spec;
        spec.validate()?;
        let placement = parts.options.output.unwrap_or_else(|| OutputPlacement::dense(&spec));
        check_placement(&spec, &placement)?;
        if parts.threads.len() != parts.partition.threads() {
            return Err(Error::InvalidPlan("stream count differs from the thread count"));
        }
        let (input, weight, output) = layouts(&spec, &placement);
        let kernels = build_kernels::<T>(&spec, &parts.blocking, &parts.options, &input, &output, placement.step)?;
        Ok(Self { parts, kernels, input, weight, output })
    }

    pub fn parts(&self) -> &PlanParts {
        &self.parts
    }

    pub fn into_parts(self) -> PlanParts {
        self.parts
    }

    pub fn spec(&self) -> &ConvLayerSpec {
        &self.parts.spec
    }

    pub fn threads(&self) -> usize {
        self.parts.threads.len()
    }

    pub fn order(&self) -> LoopOrder {
        self.parts.order
    }

    pub fn blocking(&self) -> RegisterBlocking {
        self.parts.blocking
    }

    pub fn fusion(&self) -> Option<&FusedOp> {
        self.parts.fusion.as_ref()
    }

    pub fn kernels(&self) -> &[CompiledKernel<T>] {
        &self.kernels
    }

    pub fn stream(&self, thread: usize) -> &ThreadStream {
        &self.parts.threads[thread]
    }

    pub fn input_layout(&self) -> &ActivationLayout {
        &self.input
    }

    pub fn weight_layout(&self) -> &WeightLayout {
        &self.weight
    }

    pub fn output_layout(&self) -> &ActivationLayout {
        &self.output
    }

    fn placement(&self) -> OutputPlacement {
        self.parts.options.output.unwrap_or_else(|| OutputPlacement::dense(&self.parts.spec))
    }

    fn geometry(&self) -> Geometry<'_> {
        Geometry {
            spec: &self.parts.spec,
            blocking: &self.parts.blocking,
            input: self.input,
            weight: self.weight,
            output: self.output,
            placement: self.placement(),
        }
    }

    /// Zeroed output tensor in the layout this plan writes.
    pub fn new_output(&self) -> BlockedActivation<T::Acc> {
        BlockedActivation::zeros(self.output)
    }

    fn check_tensors(&self, input: &BlockedActivation<T>, weight: &BlockedWeight<T>, output: &BlockedActivation<T::Acc>) -> Result<()> {
        if *input.layout() != self.input {
            return Err(Error::PlanTensorMismatch("input layout differs from the plan"));
        }
        if *weight.layout() != self.weight {
            return Err(Error::PlanTensorMismatch("weight layout differs from the plan"));
        }
        if *output.layout() != self.output {
            return Err(Error::PlanTensorMismatch("output layout differs from the plan"));
        }
        Ok(())
    }

    /// Replays the stream of one thread, accumulating into `output`.
    pub fn replay(
        &self,
        input: &BlockedActivation<T>,
        weight: &BlockedWeight<T>,
        output: &mut BlockedActivation<T::Acc>,
        thread: usize,
    ) -> Result<()> {
        self.check_tensors(input, weight, output)?;
        if thread >= self.threads() {
            return Err(Error::PlanTensorMismatch("thread index outside the plan"));
        }
        let shared = SharedMut::new(output.as_mut_slice());
        // SAFETY: `output` is exclusively borrowed for the duration of the call.
        unsafe { self.replay_shared(input.as_slice(), weight.as_slice(), &shared, thread) }
    }

    /// Replays every thread's stream on `par` and waits for completion.
    /// `output` is accumulated into; start from zeros for a plain forward pass.
    pub fn replay_all(
        &self,
        input: &BlockedActivation<T>,
        weight: &BlockedWeight<T>,
        output: &mut BlockedActivation<T::Acc>,
        par: &dyn Parallel,
    ) -> Result<()> {
        self.check_tensors(input, weight, output)?;
        let shared = SharedMut::new(output.as_mut_slice());
        let failure = core::sync::atomic::AtomicBool::new(false);
        par.run(self.threads(), &|t| {
            // SAFETY: threads of a plan write disjoint output tiles.
            if unsafe { self.replay_shared(input.as_slice(), weight.as_slice(), &shared, t) }.is_err() {
                failure.store(true, core::sync::atomic::Ordering::Relaxed);
            }
        });
        if failure.into_inner() {
            Err(Error::PlanTensorMismatch("stream offset outside the tensors"))
        } else {
            Ok(())
        }
    }

    /// # Safety
    /// No other thread may concurrently write the output tiles this
    /// thread's stream writes.
    unsafe fn replay_shared(&self, input: &[T], weight: &[T], output: &SharedMut<T::Acc>, thread: usize) -> Result<()> {
        let stream = &self.parts.threads[thread];
        let b = &stream.buffers;
        if !b.lengths_agree() {
            return Err(Error::PlanTensorMismatch("stream buffers have different lengths"));
        }
        let (ip, wp, op) = (input.as_ptr(), weight.as_ptr(), output.ptr());
        let lens = (input.len(), weight.len(), output.len());
        let placement = self.placement();
        let out_row = placement.step * self.output.row_stride();
        let out_px = placement.step * self.output.vlen;
        let mut i = 0;
        for seg in &stream.segments {
            match *seg {
                Segment::ConvStreak(count) => {
                    let end = i + count as usize;
                    if end > b.len() {
                        return Err(Error::PlanTensorMismatch("segments run past the streams"));
                    }
                    for i in i..end {
                        let kernel = self.kernels.get(b.var[i] as usize).ok_or(Error::PlanTensorMismatch("unknown kernel variant"))?;
                        let at = Offsets { input: b.inp[i] as usize, weight: b.wt[i] as usize, output: b.out[i] as usize };
                        let ext = kernel.extents();
                        let fits = |o: usize, e: usize, l: usize| o.checked_add(e).is_some_and(|end| end <= l);
                        if !(fits(at.input, ext.input, lens.0)
                            && fits(at.weight, ext.weight, lens.1)
                            && fits(at.output, ext.output, lens.2))
                        {
                            return Err(Error::PlanTensorMismatch("stream offset outside the tensors"));
                        }
                        kernel.run_raw(
                            ip.add(at.input),
                            wp.add(at.weight),
                            op.add(at.output),
                            [
                                ip.wrapping_add(b.pf_inp[i] as usize) as *const u8,
                                wp.wrapping_add(b.pf_wt[i] as usize) as *const u8,
                                op.wrapping_add(b.pf_out[i] as usize) as *const u8,
                            ],
                        );
                    }
                    i = end;
                }
                Segment::Apply(info) => {
                    let op_desc = self.parts.fusion.as_ref().ok_or(Error::PlanTensorMismatch("APPLY without a fused operator"))?;
                    let (rows, cols) = (info.rows as usize, info.cols as usize);
                    let base = info.output as usize;
                    let v = self.output.vlen;
                    let last = base + (rows.max(1) - 1) * out_row + (cols.max(1) - 1) * out_px + v;
                    let first_channel = info.channel_block as usize * v;
                    if last > lens.2 || first_channel >= self.output.channels {
                        return Err(Error::PlanTensorMismatch("APPLY target outside the output"));
                    }
                    let lanes = v.min(self.output.channels - first_channel);
                    for r in 0..rows {
                        for c in 0..cols {
                            let px = op.add(base + r * out_row + c * out_px);
                            for lane in 0..lanes {
                                *px.add(lane) = op_desc.apply_lane(*px.add(lane), first_channel + lane);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Runs the un-recorded loop nest on one thread, calling the same kernels
    /// and applying the fused operator after the last input block of each tile.
    pub fn execute_direct(
        &self,
        input: &BlockedActivation<T>,
        weight: &BlockedWeight<T>,
        output: &mut BlockedActivation<T::Acc>,
    ) -> Result<()> {
        self.check_tensors(input, weight, output)?;
        let geometry = self.geometry();
        let spec = &self.parts.spec;
        let blocking = &self.parts.blocking;
        let last_cb = spec.c_blocks() - 1;
        let placement = self.placement();
        let mut result = Ok(());
        walk_nest(&self.parts.order, spec, blocking, |c| {
            if result.is_err() {
                return;
            }
            let kernel = &self.kernels[blocking.variant_of(c.ojb, c.oib)];
            let at = geometry.offsets(c);
            result = kernel.run(input.as_slice(), weight.as_slice(), output.as_mut_slice(), at, at);
            if let (Some(op), true) = (&self.parts.fusion, c.cb == last_cb) {
                let (rows, cols) = blocking.tile_shape(c.ojb, c.oib);
                let v = spec.vlen;
                let lanes = v.min(spec.k - c.kb * v);
                let data = output.as_mut_slice();
                for r in 0..rows {
                    for q in 0..cols {
                        let px = at.output + placement.step * (r * self.output.row_stride() + q * v);
                        for lane in 0..lanes {
                            data[px + lane] = op.apply_lane(data[px + lane], c.kb * v + lane);
                        }
                    }
                }
            }
        });
        result
    }
}

/// Checks a plan's streams: consistent buffers and segments, every offset
/// in bounds and owned by its thread, every `(n, k_b, c_b, tile)` covered
/// exactly once, prefetch offsets chained to the call `lookahead` ahead,
/// and one APPLY right after the last accumulation of each tile.
pub fn validate_plan<T: KernelElement>(plan: &ExecutionPlan<T>) -> PlanReport {
    let mut violations = Vec::new();
    let parts = &plan.parts;
    let spec = &parts.spec;
    let geometry = plan.geometry();
    let lens = (plan.input.len(), plan.weight.len(), plan.output.len());
    let tiles = parts.blocking.tiles_p() * parts.blocking.tiles_q();
    let c_blocks = spec.c_blocks();
    let coverage_index = |c: &CallCoords| {
        (((c.n * spec.k_blocks() + c.kb) * c_blocks + c.cb) * parts.blocking.tiles_p() + c.ojb) * parts.blocking.tiles_q() + c.oib
    };
    let mut coverage = vec![0usize; spec.n * spec.k_blocks() * c_blocks * tiles];
    let mut applied = vec![0usize; spec.n * spec.k_blocks() * tiles];
    let lookahead = parts.options.lookahead.max(1);

    for (t, stream) in parts.threads.iter().enumerate() {
        let b = &stream.buffers;
        if !b.lengths_agree() {
            violations.push(Violation::StreamLengths { thread: t });
            continue;
        }
        let calls_in_segments: usize = stream.segments.iter().map(|s| if let Segment::ConvStreak(n) = s { *n as usize } else { 0 }).sum();
        let maximal = stream.segments.windows(2).all(|w| !matches!(w, [Segment::ConvStreak(_), Segment::ConvStreak(_)]))
            && stream.segments.iter().all(|s| !matches!(s, Segment::ConvStreak(0)));
        if calls_in_segments != b.len() || !maximal {
            violations.push(Violation::SegmentEncoding { thread: t });
        }

        let owned = parts.partition.range(t);
        let mut coords = Vec::with_capacity(b.len());
        for i in 0..b.len() {
            let Some(kernel) = plan.kernels.get(b.var[i] as usize) else {
                violations.push(Violation::UnknownVariant { thread: t, position: i });
                coords.push(None);
                continue;
            };
            let ext = kernel.extents();
            let fits = |o: u64, e: usize, l: usize| (o as usize).checked_add(e).is_some_and(|end| end <= l);
            if !(fits(b.inp[i], ext.input, lens.0) && fits(b.wt[i], ext.weight, lens.1) && fits(b.out[i], ext.output, lens.2)) {
                violations.push(Violation::OutOfBounds { thread: t, position: i });
            }
            let decoded = geometry.decode(b.inp[i], b.wt[i], b.out[i]);
            match decoded {
                Some(c) if parts.blocking.variant_of(c.ojb, c.oib) == b.var[i] as usize => {
                    if !owned.contains(&parts.partition.linear(item_of(c))) {
                        violations.push(Violation::NotOwned { thread: t, position: i });
                    }
                    coverage[coverage_index(&c)] += 1;
                }
                _ => violations.push(Violation::Inconsistent { thread: t, position: i }),
            }
            coords.push(decoded);
            let target = if i + lookahead < b.len() { i + lookahead } else { i };
            if (b.pf_inp[i], b.pf_wt[i], b.pf_out[i]) != (b.inp[target], b.wt[target], b.out[target]) {
                violations.push(Violation::PrefetchChain { thread: t, position: i });
            }
        }

        // APPLY placement: it must name the tile of the preceding call, come
        // right after that tile's last input block, and match the plan's operator.
        let mut position = 0;
        let mut seen = alloc::collections::BTreeMap::new();
        for (s, seg) in stream.segments.iter().enumerate() {
            match *seg {
                Segment::ConvStreak(n) => {
                    for c in coords.iter().skip(position).take(n as usize).flatten() {
                        *seen.entry((c.n, c.kb, c.ojb, c.oib)).or_insert(0usize) += 1;
                    }
                    position += n as usize;
                }
                Segment::Apply(info) => {
                    let prev = position.checked_sub(1).and_then(|p| coords.get(p).copied().flatten());
                    let ok = match (prev, &parts.fusion) {
                        (Some(c), Some(op)) => {
                            let expected = geometry.apply_info(op.kind(), c);
                            let tile = (c.n, c.kb, c.ojb, c.oib);
                            info == expected && seen.get(&tile).copied() == Some(c_blocks)
                        }
                        _ => false,
                    };
                    if ok {
                        let c = prev.expect("checked above");
                        applied[(c.n * spec.k_blocks() + c.kb) * tiles + c.ojb * parts.blocking.tiles_q() + c.oib] += 1;
                    } else {
                        violations.push(Violation::ApplyPlacement { thread: t, segment: s });
                    }
                }
            }
        }
    }

    let mut index = 0;
    for n in 0..spec.n {
        for kb in 0..spec.k_blocks() {
            for cb in 0..c_blocks {
                for ojb in 0..parts.blocking.tiles_p() {
                    for oib in 0..parts.blocking.tiles_q() {
                        if coverage[index] != 1 {
                            violations.push(Violation::Coverage { coords: CallCoords { n, kb, cb, ojb, oib }, count: coverage[index] });
                        }
                        index += 1;
                    }
                }
            }
        }
    }
    let expected_applies = usize::from(parts.fusion.is_some());
    for (linear, &count) in applied.iter().enumerate() {
        if count != expected_applies {
            violations.push(Violation::ApplyCount { item: parts.partition.item(linear), count });
        }
    }
    PlanReport { violations }
}

#[cfg(test)]
mod tests;
