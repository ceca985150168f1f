//! Versioned binary dump of forward plans, plus a short text description.
//!
//! The dump holds the plan's parts (layer, loop order, blocking, thread
//! partition, options, fused operator and every thread's streams and
//! segments). Loading rebuilds the kernels and validates the streams.

use std::fmt::Write as _;

use dconv_core::microkernel::{Isa, KernelElement, RegisterBlocking};
use dconv_core::planner::{LoopIndex, LoopOrder, ThreadPartition};
use dconv_core::stream::{
    ApplyInfo, ExecutionPlan, FusedKind, FusedOp, OutputPlacement, PlanOptions, PlanParts, Segment, StreamBuffers, ThreadStream,
};
use dconv_core::ConvLayerSpec;

use crate::error::{DconvError, Result};

pub const PLAN_MAGIC: &[u8; 4] = b"DCPL";
pub const PLAN_VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn u32s(&mut self, v: &[u32]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.u32(x));
    }

    fn u64s(&mut self, v: &[u64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.u64(x));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(DconvError::Format("plan dump is truncated".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(DconvError::Format(format!("invalid flag byte {v}"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| DconvError::Format("value exceeds usize".into()))
    }

    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.checked_mul(elem).is_none_or(|b| b > self.bytes.len()) {
            return Err(DconvError::Format("sequence length exceeds the dump".into()));
        }
        Ok(n)
    }

    fn u32s(&mut self) -> Result<Vec<u32>> {
        let n = self.len(4)?;
        (0..n).map(|_| self.u32()).collect()
    }

    fn u64s(&mut self) -> Result<Vec<u64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.u64()).collect()
    }
}

const LOOP_INDICES: [LoopIndex; 5] = [LoopIndex::Image, LoopIndex::KBlock, LoopIndex::CBlock, LoopIndex::TileRow, LoopIndex::TileCol];
const ISAS: [Isa; 3] = [Isa::Portable, Isa::Avx2, Isa::Avx512];

fn fused_kind(id: u8) -> Result<FusedKind> {
    FusedKind::from_id(id).ok_or_else(|| DconvError::Format(format!("unknown fused operator {id}")))
}

/// Serializes a plan's parts.
pub fn dump_plan<T: KernelElement>(plan: &ExecutionPlan<T>) -> Vec<u8> {
    encode_parts(plan.parts())
}

pub fn encode_parts(parts: &PlanParts) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes.extend_from_slice(PLAN_MAGIC);
    w.u32(PLAN_VERSION);

    let s = &parts.spec;
    for v in [s.n, s.c, s.k, s.h, s.w, s.r, s.s, s.stride, s.pad_h, s.pad_w, s.vlen] {
        w.usize(v);
    }
    for idx in parts.order.indices() {
        w.u8(LOOP_INDICES.iter().position(|&i| i == idx).expect("known index") as u8);
    }
    let b = &parts.blocking;
    for v in [b.p, b.q, b.rb_p, b.rb_q] {
        w.usize(v);
    }
    for v in parts.partition.extents() {
        w.usize(v);
    }
    w.usize(parts.partition.threads());
    for r in parts.partition.ranges() {
        w.usize(r.start);
        w.usize(r.end);
    }

    let o = &parts.options;
    w.usize(o.lookahead);
    w.u8(o.prefetch as u8);
    w.u8(o.streaming_stores as u8);
    match o.output {
        None => w.u8(0),
        Some(p) => {
            w.u8(1);
            for v in [p.h, p.w, p.halo_h, p.halo_w, p.step] {
                w.usize(v);
            }
        }
    }
    match o.isa {
        None => w.u8(0),
        Some(isa) => w.u8(1 + ISAS.iter().position(|&i| i == isa).expect("known isa") as u8),
    }
    w.usize(o.acc_chain_limit);
    w.u32(o.input_bound);
    w.u32(o.weight_bound);

    match &parts.fusion {
        None => w.u8(0),
        Some(op) => {
            w.u8(1 + op.kind().id());
            let bias = op.bias().unwrap_or(&[]);
            w.u32s(&bias.iter().map(|b| b.to_bits()).collect::<Vec<_>>());
        }
    }

    w.usize(parts.threads.len());
    for t in &parts.threads {
        let b = &t.buffers;
        w.u32s(&b.var);
        for s in [&b.inp, &b.wt, &b.out, &b.pf_inp, &b.pf_wt, &b.pf_out] {
            w.u64s(s);
        }
        w.usize(t.segments.len());
        for seg in &t.segments {
            match *seg {
                Segment::ConvStreak(n) => {
                    w.u8(0);
                    w.u32(n);
                }
                Segment::Apply(info) => {
                    w.u8(1);
                    w.u8(info.op.id());
                    w.u64(info.output);
                    w.u32(info.rows);
                    w.u32(info.cols);
                    w.u32(info.channel_block);
                }
            }
        }
    }
    w.bytes
}

pub fn decode_parts(bytes: &[u8]) -> Result<PlanParts> {
    let mut r = Reader { bytes };
    if r.take(4)? != PLAN_MAGIC {
        return Err(DconvError::Format("not a plan dump".into()));
    }
    let version = r.u32()?;
    if version != PLAN_VERSION {
        return Err(DconvError::Format(format!("plan dump version {version}, expected {PLAN_VERSION}")));
    }

    let mut f = [0usize; 11];
    for v in &mut f {
        *v = r.usize()?;
    }
    let spec = ConvLayerSpec::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7]).with_padding(f[8], f[9]).with_vlen(f[10]);
    spec.validate()?;

    let mut order = [LoopIndex::Image; 5];
    for slot in &mut order {
        let i = r.u8()? as usize;
        *slot = *LOOP_INDICES.get(i).ok_or_else(|| DconvError::Format(format!("unknown loop index {i}")))?;
    }
    let order = LoopOrder::new(order)?;

    let (p, q, rb_p, rb_q) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    let blocking = RegisterBlocking::new(p, q, rb_p, rb_q);
    if (blocking.rb_p, blocking.rb_q) != (rb_p, rb_q) {
        return Err(DconvError::Format("register blocking exceeds the output plane".into()));
    }

    let mut extents = [0usize; 4];
    for e in &mut extents {
        *e = r.usize()?;
    }
    let threads = r.len(16)?;
    let mut ranges = Vec::with_capacity(threads);
    for _ in 0..threads {
        ranges.push(r.usize()?..r.usize()?);
    }
    let partition = ThreadPartition::from_ranges(extents, ranges)?;

    let lookahead = r.usize()?;
    let prefetch = r.bool()?;
    let streaming_stores = r.bool()?;
    let output = match r.u8()? {
        0 => None,
        1 => Some(OutputPlacement { h: r.usize()?, w: r.usize()?, halo_h: r.usize()?, halo_w: r.usize()?, step: r.usize()? }),
        v => return Err(DconvError::Format(format!("invalid placement tag {v}"))),
    };
    let isa = match r.u8()? {
        0 => None,
        v => Some(*ISAS.get(v as usize - 1).ok_or_else(|| DconvError::Format(format!("unknown isa {v}")))?),
    };
    let options = PlanOptions {
        lookahead,
        prefetch,
        streaming_stores,
        output,
        isa,
        acc_chain_limit: r.usize()?,
        input_bound: r.u32()?,
        weight_bound: r.u32()?,
    };

    let fusion = match r.u8()? {
        0 => None,
        tag => {
            let kind = fused_kind(tag - 1)?;
            let bias: Vec<f32> = r.u32s()?.into_iter().map(f32::from_bits).collect();
            Some(match kind {
                FusedKind::Relu => FusedOp::relu(),
                FusedKind::BiasAdd => FusedOp::bias_add(bias),
                FusedKind::BiasRelu => FusedOp::bias_relu(bias),
            })
        }
    };

    let count = r.len(1)?;
    let mut streams = Vec::with_capacity(count);
    for _ in 0..count {
        let var = r.u32s()?;
        let mut cols: [Vec<u64>; 6] = Default::default();
        for c in &mut cols {
            *c = r.u64s()?;
        }
        let [inp, wt, out, pf_inp, pf_wt, pf_out] = cols;
        let buffers = StreamBuffers { var, inp, wt, out, pf_inp, pf_wt, pf_out };
        let segs = r.len(5)?;
        let mut segments = Vec::with_capacity(segs);
        for _ in 0..segs {
            segments.push(match r.u8()? {
                0 => Segment::ConvStreak(r.u32()?),
                1 => Segment::Apply(ApplyInfo {
                    op: fused_kind(r.u8()?)?,
                    output: r.u64()?,
                    rows: r.u32()?,
                    cols: r.u32()?,
                    channel_block: r.u32()?,
                }),
                v => return Err(DconvError::Format(format!("invalid segment tag {v}"))),
            });
        }
        streams.push(ThreadStream { buffers, segments });
    }
    if !r.bytes.is_empty() {
        return Err(DconvError::Format("trailing bytes after the plan".into()));
    }
    Ok(PlanParts { spec, order, blocking, partition, options, fusion, threads: streams })
}

/// Decodes and validates a dump; any stream violation is an error.
pub fn load_plan<T: KernelElement>(bytes: &[u8]) -> Result<ExecutionPlan<T>> {
    Ok(ExecutionPlan::from_parts(decode_parts(bytes)?)?)
}

/// Human-readable summary of a plan and the first segments of each thread.
pub fn describe_plan<T: KernelElement>(plan: &ExecutionPlan<T>) -> String {
    let parts = plan.parts();
    let s = &parts.spec;
    let mut text = String::new();
    let order: Vec<String> = parts.order.indices().iter().map(|i| i.to_string()).collect();
    let _ = writeln!(
        text,
        "layer N={} C={} K={} H={} W={} R={} S={} stride={} pad=({},{}) vlen={}",
        s.n, s.c, s.k, s.h, s.w, s.r, s.s, s.stride, s.pad_h, s.pad_w, s.vlen
    );
    let _ = writeln!(text, "loop order ({})", order.join(", "));
    let _ = writeln!(
        text,
        "register blocking {}x{} over {}x{}, variants {:?}",
        parts.blocking.rb_p,
        parts.blocking.rb_q,
        s.p(),
        s.q(),
        parts.blocking.variants()
    );
    if let Some(k) = plan.kernels().first() {
        let _ = writeln!(text, "isa {:?}", k.isa());
    }
    if let Some(op) = &parts.fusion {
        let _ = writeln!(text, "fused {:?}", op.kind());
    }
    for (t, stream) in parts.threads.iter().enumerate() {
        let shown: Vec<String> = stream
            .segments
            .iter()
            .take(8)
            .map(|seg| match seg {
                Segment::ConvStreak(n) => format!("CONV x{n}"),
                Segment::Apply(info) => format!("APPLY {:?}@{}", info.op, info.output),
            })
            .collect();
        let more = if stream.segments.len() > 8 { ", ..." } else { "" };
        let _ = writeln!(
            text,
            "thread {t}: items {:?}, {} calls, {} segments [{}{more}]",
            parts.partition.range(t),
            stream.buffers.len(),
            stream.segments.len(),
            shown.join(", ")
        );
    }
    text
}
