//! Loop ordering, thread partitioning, spatial cache blocking and the
//! weight-update parallelization strategy.

use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::layer::ConvLayerSpec;
use crate::microkernel::{BlockingConfig, RegisterBlocking};

/// Default per-thread cache budget for the update pass spatial blocking.
pub const DEFAULT_CACHE_BUDGET: usize = 512 * 1024;

/// Tunables shared by the planning functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannerConfig {
    pub blocking: BlockingConfig,
    /// Bytes available per thread for one update-kernel working set.
    pub cache_budget: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { blocking: BlockingConfig::default(), cache_budget: DEFAULT_CACHE_BUDGET }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LoopIndex {
    Image,
    KBlock,
    CBlock,
    TileRow,
    TileCol,
}

impl fmt::Display for LoopIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LoopIndex::Image => "n",
            LoopIndex::KBlock => "k_b",
            LoopIndex::CBlock => "c_b",
            LoopIndex::TileRow => "ojb",
            LoopIndex::TileCol => "oib",
        })
    }
}

/// Outer-to-inner order of the five blocked loops of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LoopOrder {
    order: [LoopIndex; 5],
}

impl LoopOrder {
    /// `(n, k_b, c_b, ojb, oib)`: every output tile is revisited once per input block.
    pub const CHANNELS_OUTSIDE: LoopOrder =
        LoopOrder { order: [LoopIndex::Image, LoopIndex::KBlock, LoopIndex::CBlock, LoopIndex::TileRow, LoopIndex::TileCol] };

    /// `(n, k_b, ojb, oib, c_b)`: each output tile stays hot across all input blocks.
    pub const CHANNELS_INSIDE: LoopOrder =
        LoopOrder { order: [LoopIndex::Image, LoopIndex::KBlock, LoopIndex::TileRow, LoopIndex::TileCol, LoopIndex::CBlock] };

    pub fn new(order: [LoopIndex; 5]) -> Result<Self> {
        let all = [LoopIndex::Image, LoopIndex::KBlock, LoopIndex::CBlock, LoopIndex::TileRow, LoopIndex::TileCol];
        if all.iter().all(|idx| order.iter().filter(|o| *o == idx).count() == 1) {
            Ok(Self { order })
        } else {
            Err(Error::InvalidSpec("loop order must be a permutation of n, k_b, c_b, ojb, oib"))
        }
    }

    pub fn indices(&self) -> [LoopIndex; 5] {
        self.order
    }

    /// True when `c_b` sits inside both tile loops.
    pub fn pull_in_cb(&self) -> bool {
        let pos = |idx| self.order.iter().position(|&o| o == idx).unwrap_or(0);
        pos(LoopIndex::CBlock) > pos(LoopIndex::TileRow) && pos(LoopIndex::CBlock) > pos(LoopIndex::TileCol)
    }
}

/// 1×1 layers keep the output tile in registers across all input blocks;
/// other layers use the channels-outside order.
pub fn choose_loop_order(spec: &ConvLayerSpec) -> LoopOrder {
    if spec.r == 1 && spec.s == 1 {
        LoopOrder::CHANNELS_INSIDE
    } else {
        LoopOrder::CHANNELS_OUTSIDE
    }
}

/// Coordinates of one forward work item (an output tile of one image and
/// output-channel block, across all input blocks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WorkItem {
    pub n: usize,
    pub kb: usize,
    pub ojb: usize,
    pub oib: usize,
}

/// Contiguous ranges of the linearized `(n, k_b, ojb, oib)` space, one per thread.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadPartition {
    extents: [usize; 4],
    ranges: Vec<Range<usize>>,
}

impl ThreadPartition {
    /// Partition from explicit contiguous ranges that cover the item space in order.
    pub fn from_ranges(extents: [usize; 4], ranges: Vec<Range<usize>>) -> Result<Self> {
        let total: usize = extents.iter().product();
        let mut next = 0;
        for r in &ranges {
            if r.start != next || r.end < r.start {
                return Err(Error::InvalidPlan("thread ranges must be contiguous and ordered"));
            }
            next = r.end;
        }
        if ranges.is_empty() || next != total {
            return Err(Error::InvalidPlan("thread ranges must cover every work item"));
        }
        Ok(Self { extents, ranges })
    }

    pub fn threads(&self) -> usize {
        self.ranges.len()
    }

    pub fn total_items(&self) -> usize {
        self.extents.iter().product()
    }

    /// Extents of `(n, k_b, ojb, oib)`.
    pub fn extents(&self) -> [usize; 4] {
        self.extents
    }

    pub fn range(&self, thread: usize) -> Range<usize> {
        self.ranges[thread].clone()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn item(&self, linear: usize) -> WorkItem {
        let [_, kbs, rows, cols] = self.extents;
        WorkItem { n: linear / (kbs * rows * cols), kb: linear / (rows * cols) % kbs, ojb: linear / cols % rows, oib: linear % cols }
    }

    pub fn linear(&self, item: WorkItem) -> usize {
        let [_, kbs, rows, cols] = self.extents;
        ((item.n * kbs + item.kb) * rows + item.ojb) * cols + item.oib
    }

    pub fn owner(&self, item: WorkItem) -> Option<usize> {
        let linear = self.linear(item);
        self.ranges.iter().position(|r| r.contains(&linear))
    }
}

/// Splits the output work between `threads` workers: whole images while
/// there are enough of them, then `(n, k_b)` pairs, then single tiles.
pub fn partition_threads(spec: &ConvLayerSpec, blocking: &RegisterBlocking, threads: usize) -> ThreadPartition {
    let threads = threads.max(1);
    let extents = [spec.n, spec.k_blocks(), blocking.tiles_p(), blocking.tiles_q()];
    let tiles = extents[2] * extents[3];
    let grain = if threads <= spec.n {
        extents[1] * tiles
    } else if threads <= spec.n * extents[1] {
        tiles
    } else {
        1
    };
    let units = extents.iter().product::<usize>() / grain;
    let ranges = (0..threads).map(|t| (t * units / threads) * grain..((t + 1) * units / threads) * grain).collect();
    ThreadPartition { extents, ranges }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpdateMode {
    /// One shared gradient; threads own disjoint `(r·s, k_b, c_b)` tasks.
    TaskParallel,
    /// One private gradient copy per thread over a minibatch shard.
    CopyReduce,
    /// `G` copies, each shared by `T/G` threads that split tasks.
    Hybrid,
}

/// How the threads of one copy group split the `(r·s, k_b, c_b)` task space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskSplit {
    pub rs: usize,
    pub k: usize,
    pub c: usize,
}

impl TaskSplit {
    pub fn threads(&self) -> usize {
        self.rs * self.k * self.c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WeightUpdateStrategy {
    threads: usize,
    copies: usize,
    split: TaskSplit,
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n).max(1)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)
}

impl WeightUpdateStrategy {
    /// Strategy with `copies` gradient copies over `threads` workers. The
    /// per-group task split takes the largest divisors over `r·s`, then
    /// `k_b`, then `c_b`.
    pub fn new(spec: &ConvLayerSpec, threads: usize, copies: usize) -> Result<Self> {
        if threads == 0 || copies == 0 || copies > threads || !threads.is_multiple_of(copies) {
            return Err(Error::InfeasibleStrategy("copies must divide the thread count"));
        }
        let group = threads / copies;
        let rs = largest_divisor_at_most(group, spec.r * spec.s);
        let k = largest_divisor_at_most(group / rs, spec.k_blocks());
        let c = largest_divisor_at_most(group / rs / k, spec.c_blocks());
        Ok(Self { threads, copies, split: TaskSplit { rs, k, c } })
    }

    pub fn mode(&self) -> UpdateMode {
        if self.copies == 1 {
            UpdateMode::TaskParallel
        } else if self.copies == self.threads {
            UpdateMode::CopyReduce
        } else {
            UpdateMode::Hybrid
        }
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn copies(&self) -> usize {
        self.copies
    }

    pub fn split(&self) -> TaskSplit {
        self.split
    }

    /// Threads that receive work.
    pub fn active_threads(&self, spec: &ConvLayerSpec) -> usize {
        self.copies.min(spec.n) * self.split.threads()
    }

    /// Every thread has a task and every copy has at least one image.
    pub fn is_feasible(&self, spec: &ConvLayerSpec) -> bool {
        self.copies <= spec.n && self.split.threads() * self.copies == self.threads
    }

    /// Minibatch shard of copy `g`.
    pub fn shard(&self, spec: &ConvLayerSpec, g: usize) -> Range<usize> {
        g * spec.n / self.copies..(g + 1) * spec.n / self.copies
    }
}

/// Estimated tensor traffic of one weight-update pass, in bytes of `f32`.
///
/// Every thread of a group re-reads the input for each `(r·s, k_b)` split
/// and the output gradient for each `(r·s, c_b)` split. A single shared
/// gradient is written once; `G > 1` copies are each written, read back by
/// the reduction, and the result written.
pub fn update_bytes_model(spec: &ConvLayerSpec, strategy: &WeightUpdateStrategy) -> u64 {
    let u = |v: usize| v as u64;
    let input = u(spec.n) * u(spec.c) * u(spec.h) * u(spec.w);
    let grad_out = u(spec.n) * u(spec.k) * u(spec.p()) * u(spec.q());
    let weights = u(spec.r) * u(spec.s) * u(spec.c) * u(spec.k);
    let split = strategy.split();
    let weight_term = if strategy.copies() == 1 { weights } else { (2 * u(strategy.copies()) + 1) * weights };
    let elements = u(split.rs * split.k) * input + u(split.rs * split.c) * grad_out + weight_term;
    elements * core::mem::size_of::<f32>() as u64
}

/// Cheapest feasible strategy over copy counts dividing `threads`, ties
/// going to fewer copies. When nothing is feasible the strategy keeping
/// the most threads busy wins.
pub fn choose_update_strategy(spec: &ConvLayerSpec, threads: usize) -> WeightUpdateStrategy {
    let threads = threads.max(1);
    let candidates: Vec<_> =
        (1..=threads).filter(|g| threads.is_multiple_of(*g)).filter_map(|g| WeightUpdateStrategy::new(spec, threads, g).ok()).collect();
    let best = candidates.iter().filter(|s| s.is_feasible(spec)).min_by_key(|s| (update_bytes_model(spec, s), s.copies()));
    match best {
        Some(s) => *s,
        None => *candidates
            .iter()
            .filter(|s| s.copies() <= spec.n)
            .min_by_key(|s| (core::cmp::Reverse(s.active_threads(spec)), update_bytes_model(spec, s), s.copies()))
            .expect("one copy is always a candidate"),
    }
}

/// Bytes touched by one update-kernel sweep over a `b_p×b_q` block.
pub fn spatial_block_footprint(spec: &ConvLayerSpec, b_p: usize, b_q: usize) -> usize {
    let rows = (b_p - 1) * spec.stride + spec.r;
    let cols = (b_q - 1) * spec.stride + spec.s;
    (rows * cols * spec.vlen + b_p * b_q * spec.vlen + spec.vlen * spec.vlen) * core::mem::size_of::<f32>()
}

/// Largest `(B_P, B_Q)` dividing `(P, Q)` whose footprint fits `budget`,
/// ties going to wider blocks. Falls back to `(1, 1)`.
pub fn choose_spatial_blocking(spec: &ConvLayerSpec, budget: usize) -> (usize, usize) {
    let (p, q) = (spec.p(), spec.q());
    let mut best = (1, 1);
    for b_p in (1..=p).filter(|d| p % d == 0) {
        for b_q in (1..=q).filter(|d| q % d == 0) {
            let area = b_p * b_q;
            let better = area > best.0 * best.1 || (area == best.0 * best.1 && b_q > best.1);
            if better && spatial_block_footprint(spec, b_p, b_q) <= budget {
                best = (b_p, b_q);
            }
        }
    }
    best
}
