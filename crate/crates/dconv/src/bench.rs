//! Benchmark runner: runs one pass of every selected layer with a chosen
//! implementation and datatype, times it and optionally checks it against
//! the reference oracles.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ValueEnum;
use dconv_core::oracle::{
    apply_bias_relu, conv_backward_naive, conv_forward_im2col, conv_forward_naive, conv_update_naive, int_conv_forward_oracle,
};
use dconv_core::planner::{choose_spatial_blocking, choose_update_strategy, PlannerConfig};
use dconv_core::propagation::{plan_forward, weight_update, BackwardPlan};
use dconv_core::stream::{ExecutionPlan, FusedOp, PlanOptions};
use dconv_core::tensor::{to_blocked_activation, to_blocked_weight};
use dconv_core::{BlockedActivation, ConvLayerSpec, Element, ErrorNorms, Tensor4};
use serde::Serialize;

use crate::data::{stream_seed, uniform_f32, uniform_i16};
use crate::error::{DconvError, Result};
use crate::format::{save_tensor, FileElement};
use crate::layers::{parse_layer_file, resnet50, LayerEntry};
use crate::plan_io::{describe_plan, dump_plan};
use crate::threads::ScopedThreads;

/// Relative L∞ tolerance of `f32` results against the oracle.
pub const F32_LINF_REL: f64 = 1e-4;
/// Relative L2 tolerance of `f32` results against the oracle.
pub const F32_L2_REL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, ValueEnum)]
pub enum PassKind {
    #[value(name = "F", alias = "f")]
    #[serde(rename = "F")]
    Forward,
    #[value(name = "B", alias = "b")]
    #[serde(rename = "B")]
    Backward,
    #[value(name = "U", alias = "u")]
    #[serde(rename = "U")]
    Update,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DtypeKind {
    F32,
    I16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ImplKind {
    Naive,
    Im2col,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FuseKind {
    None,
    Relu,
    #[value(name = "bias_relu")]
    BiasRelu,
}

impl FuseKind {
    pub fn has_bias(self) -> bool {
        self == FuseKind::BiasRelu
    }

    /// The fused operator, with `bias` used only when the kind needs one.
    pub fn operator(self, bias: &[f32]) -> Option<FusedOp> {
        match self {
            FuseKind::None => None,
            FuseKind::Relu => Some(FusedOp::relu()),
            FuseKind::BiasRelu => Some(FusedOp::bias_relu(bias.to_vec())),
        }
    }

    /// Applies the operator to a canonical tensor after the convolution.
    pub fn apply<T: Element>(self, tensor: &mut Tensor4<T>, bias: &[f32]) {
        if self != FuseKind::None {
            apply_bias_relu(tensor, self.has_bias().then_some(bias), true);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSource {
    Resnet50,
    File(PathBuf),
}

impl LayerSource {
    /// `resnet50` selects the built-in table; anything else is a CSV path.
    pub fn parse(text: &str) -> Self {
        if text.eq_ignore_ascii_case("resnet50") {
            LayerSource::Resnet50
        } else {
            LayerSource::File(PathBuf::from(text))
        }
    }

    pub fn load(&self) -> Result<Vec<LayerEntry>> {
        match self {
            LayerSource::Resnet50 => Ok(resnet50()),
            LayerSource::File(path) => parse_layer_file(path),
        }
    }
}

/// Picks the layers named in `ids` (in that order), or all of them.
pub fn select_layers(all: Vec<LayerEntry>, ids: Option<&[usize]>) -> Result<Vec<LayerEntry>> {
    match ids {
        None => Ok(all),
        Some(ids) => ids.iter().map(|&id| all.iter().find(|l| l.id == id).copied().ok_or(DconvError::UnknownLayer(id))).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub layers: LayerSource,
    pub layer_ids: Option<Vec<usize>>,
    pub minibatch: usize,
    pub iterations: usize,
    pub pass: PassKind,
    pub dtype: DtypeKind,
    pub implementation: ImplKind,
    pub threads: usize,
    pub check: bool,
    pub fuse: FuseKind,
    pub seed: u64,
    pub planner: PlannerConfig,
    /// Directory receiving the reference and result tensors of checked layers.
    pub dump_dir: Option<PathBuf>,
    /// Directory receiving the binary dump and description of forward plans.
    pub plan_dir: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            layers: LayerSource::Resnet50,
            layer_ids: None,
            minibatch: 1,
            iterations: 1,
            pass: PassKind::Forward,
            dtype: DtypeKind::F32,
            implementation: ImplKind::Direct,
            threads: 1,
            check: false,
            fuse: FuseKind::None,
            seed: 42,
            planner: PlannerConfig::default(),
            dump_dir: None,
            plan_dir: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(DconvError::InvalidConfig("iterations must be at least 1"));
        }
        if self.minibatch == 0 {
            return Err(DconvError::InvalidConfig("minibatch must be at least 1"));
        }
        if self.threads == 0 {
            return Err(DconvError::InvalidConfig("threads must be at least 1"));
        }
        if self.implementation == ImplKind::Im2col && (self.pass != PassKind::Forward || self.dtype != DtypeKind::F32) {
            return Err(DconvError::Unsupported("im2col implements the f32 forward pass only"));
        }
        if self.dtype == DtypeKind::I16 && self.pass != PassKind::Forward {
            return Err(DconvError::Unsupported("i16 implements the forward pass only"));
        }
        if self.fuse != FuseKind::None && self.pass != PassKind::Forward {
            return Err(DconvError::Unsupported("fused operators apply to the forward pass only"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Norms {
    pub linf_abs: f64,
    pub l2_abs: f64,
    pub linf_rel: f64,
    pub l2_rel: f64,
}

impl From<ErrorNorms> for Norms {
    fn from(n: ErrorNorms) -> Self {
        Self { linf_abs: n.linf_abs, l2_abs: n.l2_abs, linf_rel: n.linf_rel, l2_rel: n.l2_rel }
    }
}

/// Setup choices behind a measurement.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct LayerMetadata {
    pub register_blocking: Option<String>,
    pub loop_order: Option<String>,
    pub isa: Option<String>,
    pub backward_route: Option<String>,
    pub update_strategy: Option<String>,
    pub spatial_blocking: Option<String>,
    pub i16_certified: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub id: usize,
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub r: usize,
    pub s: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub flops: u64,
    pub best_seconds: f64,
    pub mean_seconds: f64,
    pub samples: Vec<f64>,
    pub gflops: f64,
    pub norms: Option<Norms>,
    pub passed: Option<bool>,
    pub metadata: LayerMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub pass: PassKind,
    pub dtype: DtypeKind,
    pub implementation: ImplKind,
    pub fuse: FuseKind,
    pub minibatch: usize,
    pub threads: usize,
    pub iterations: usize,
    pub seed: u64,
    pub layers: Vec<LayerReport>,
}

/// One flat CSV row per layer.
#[derive(Serialize)]
struct CsvRow<'a> {
    id: usize,
    pass: PassKind,
    dtype: DtypeKind,
    implementation: ImplKind,
    fuse: FuseKind,
    n: usize,
    c: usize,
    k: usize,
    h: usize,
    w: usize,
    r: usize,
    s: usize,
    stride: usize,
    threads: usize,
    flops: u64,
    best_seconds: f64,
    mean_seconds: f64,
    samples: usize,
    gflops: f64,
    linf_rel: Option<f64>,
    l2_rel: Option<f64>,
    passed: Option<bool>,
    register_blocking: Option<&'a str>,
    loop_order: Option<&'a str>,
    isa: Option<&'a str>,
    backward_route: Option<&'a str>,
    update_strategy: Option<&'a str>,
    spatial_blocking: Option<&'a str>,
}

impl BenchReport {
    /// False when any checked layer exceeded its tolerance.
    pub fn all_passed(&self) -> bool {
        self.layers.iter().all(|l| l.passed != Some(false))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| DconvError::Format(e.to_string()))
    }

    pub fn write_csv(&self, sink: impl Write) -> Result<()> {
        let mut writer = csv::Writer::from_writer(sink);
        for l in &self.layers {
            let m = &l.metadata;
            writer
                .serialize(CsvRow {
                    id: l.id,
                    pass: self.pass,
                    dtype: self.dtype,
                    implementation: self.implementation,
                    fuse: self.fuse,
                    n: l.n,
                    c: l.c,
                    k: l.k,
                    h: l.h,
                    w: l.w,
                    r: l.r,
                    s: l.s,
                    stride: l.stride,
                    threads: self.threads,
                    flops: l.flops,
                    best_seconds: l.best_seconds,
                    mean_seconds: l.mean_seconds,
                    samples: l.samples.len(),
                    gflops: l.gflops,
                    linf_rel: l.norms.map(|n| n.linf_rel),
                    l2_rel: l.norms.map(|n| n.l2_rel),
                    passed: l.passed,
                    register_blocking: m.register_blocking.as_deref(),
                    loop_order: m.loop_order.as_deref(),
                    isa: m.isa.as_deref(),
                    backward_route: m.backward_route.as_deref(),
                    update_strategy: m.update_strategy.as_deref(),
                    spatial_blocking: m.spatial_blocking.as_deref(),
                })
                .map_err(|e| DconvError::Format(e.to_string()))?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Writes JSON or CSV depending on the file extension (`.csv` or anything else).
    pub fn save(&self, path: &Path) -> Result<()> {
        let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        if is_csv {
            self.write_csv(std::fs::File::create(path)?)
        } else {
            std::fs::write(path, self.to_json()?)?;
            Ok(())
        }
    }

    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "pass {:?}, {:?}, {:?}, fuse {:?}, N={}, threads={}, iterations={}",
            self.pass, self.dtype, self.implementation, self.fuse, self.minibatch, self.threads, self.iterations
        );
        let _ = writeln!(
            out,
            "{:>4} {:>5} {:>5} {:>4} {:>4} {:>3} {:>3} {:>10} {:>10} {:>10} {:>9} {:>10} {:>10}  check",
            "id", "C", "K", "H", "W", "RxS", "str", "GFLOP", "best ms", "mean ms", "GFLOPS", "linf_rel", "l2_rel"
        );
        for l in &self.layers {
            let (linf, l2) = match l.norms {
                Some(n) => (format!("{:.2e}", n.linf_rel), format!("{:.2e}", n.l2_rel)),
                None => ("-".into(), "-".into()),
            };
            let check = match l.passed {
                Some(true) => "ok",
                Some(false) => "FAILED",
                None => "-",
            };
            let _ = writeln!(
                out,
                "{:>4} {:>5} {:>5} {:>4} {:>4} {:>3} {:>3} {:>10.3} {:>10.3} {:>10.3} {:>9.2} {:>10} {:>10}  {}",
                l.id,
                l.c,
                l.k,
                l.h,
                l.w,
                format!("{}x{}", l.r, l.s),
                l.stride,
                l.flops as f64 * 1e-9,
                l.best_seconds * 1e3,
                l.mean_seconds * 1e3,
                l.gflops,
                linf,
                l2,
                check
            );
        }
        out
    }
}

/// Runs `body` `iterations` times, timing each run, and returns the
/// samples with the result of the last run.
fn time_runs<R>(iterations: usize, mut body: impl FnMut() -> Result<R>) -> Result<(Vec<f64>, R)> {
    let mut samples = Vec::with_capacity(iterations);
    let mut last = None;
    for _ in 0..iterations {
        let start = Instant::now();
        let result = body()?;
        samples.push(start.elapsed().as_secs_f64());
        last = Some(result);
    }
    Ok((samples, last.expect("at least one iteration")))
}

/// Result of one layer before it is turned into a report.
struct Measured<R> {
    samples: Vec<f64>,
    result: R,
    metadata: LayerMetadata,
}

fn plan_metadata<T: dconv_core::microkernel::KernelElement>(plan: &ExecutionPlan<T>) -> LayerMetadata {
    let b = plan.blocking();
    let order: Vec<String> = plan.order().indices().iter().map(|i| i.to_string()).collect();
    LayerMetadata {
        register_blocking: Some(format!("{}x{}", b.rb_p, b.rb_q)),
        loop_order: Some(order.join(",")),
        isa: plan.kernels().first().map(|k| format!("{:?}", k.isa())),
        ..LayerMetadata::default()
    }
}

fn write_plan<T: dconv_core::microkernel::KernelElement>(dir: Option<&Path>, id: usize, plan: &ExecutionPlan<T>) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("layer{id}.plan")), dump_plan(plan))?;
        std::fs::write(dir.join(format!("layer{id}.txt")), describe_plan(plan))?;
    }
    Ok(())
}

struct LayerData {
    input: Tensor4<f32>,
    weight: Tensor4<f32>,
    grad_output: Tensor4<f32>,
    bias: Vec<f32>,
}

fn layer_data(spec: &ConvLayerSpec, id: usize, seed: u64, pass: PassKind) -> LayerData {
    let empty = || Tensor4::zeros([0, 0, 0, 0]);
    let needs_input = pass != PassKind::Backward;
    let needs_weight = pass != PassKind::Update;
    let needs_grad = pass != PassKind::Forward;
    LayerData {
        input: if needs_input { uniform_f32([spec.n, spec.c, spec.h, spec.w], stream_seed(seed, id, 0)) } else { empty() },
        weight: if needs_weight { uniform_f32([spec.k, spec.c, spec.r, spec.s], stream_seed(seed, id, 1)) } else { empty() },
        grad_output: if needs_grad { uniform_f32([spec.n, spec.k, spec.p(), spec.q()], stream_seed(seed, id, 2)) } else { empty() },
        bias: uniform_f32([1, 1, 1, spec.k], stream_seed(seed, id, 3)).into_vec(),
    }
}

fn measure_f32(config: &BenchConfig, id: usize, spec: &ConvLayerSpec, d: &LayerData) -> Result<Measured<Tensor4<f32>>> {
    let iters = config.iterations;
    let par = ScopedThreads;
    let fused = |mut t: Tensor4<f32>| {
        config.fuse.apply(&mut t, &d.bias);
        t
    };
    match (config.pass, config.implementation) {
        (PassKind::Forward, ImplKind::Naive) => {
            let (samples, result) = time_runs(iters, || Ok(fused(conv_forward_naive(spec, &d.input, &d.weight)?)))?;
            Ok(Measured { samples, result, metadata: LayerMetadata::default() })
        }
        (PassKind::Forward, ImplKind::Im2col) => {
            let (samples, result) = time_runs(iters, || Ok(fused(conv_forward_im2col(spec, &d.input, &d.weight)?)))?;
            Ok(Measured { samples, result, metadata: LayerMetadata::default() })
        }
        (PassKind::Forward, ImplKind::Direct) => {
            let plan = plan_forward::<f32>(spec, config.threads, config.fuse.operator(&d.bias), &config.planner, &PlanOptions::default())?;
            write_plan(config.plan_dir.as_deref(), id, &plan)?;
            let input = to_blocked_activation(&d.input, spec)?;
            let weight = to_blocked_weight(&d.weight, spec)?;
            let mut output = plan.new_output();
            let (samples, ()) = time_runs(iters, || {
                output.as_mut_slice().fill(0.0);
                Ok(plan.replay_all(&input, &weight, &mut output, &par)?)
            })?;
            Ok(Measured { samples, result: output.to_canonical(), metadata: plan_metadata(&plan) })
        }
        (PassKind::Backward, ImplKind::Naive) => {
            let (samples, result) = time_runs(iters, || Ok(conv_backward_naive(spec, &d.grad_output, &d.weight)?))?;
            Ok(Measured { samples, result, metadata: LayerMetadata::default() })
        }
        (PassKind::Backward, ImplKind::Direct) => {
            let plan = BackwardPlan::new(spec, config.threads, &config.planner, &PlanOptions::default())?;
            let grad_output = BlockedActivation::from_canonical(&d.grad_output, spec.vlen, 0, 0)?;
            let weight = to_blocked_weight(&d.weight, spec)?;
            let (samples, grad_input) = time_runs(iters, || Ok(plan.backward(&grad_output, &weight, &par)?))?;
            let mut metadata = plan.duality_plan().map(plan_metadata).unwrap_or_default();
            metadata.backward_route = Some(format!("{:?}", plan.route()));
            Ok(Measured { samples, result: grad_input.to_canonical(), metadata })
        }
        (PassKind::Update, ImplKind::Naive) => {
            let (samples, result) = time_runs(iters, || Ok(conv_update_naive(spec, &d.input, &d.grad_output)?))?;
            Ok(Measured { samples, result, metadata: LayerMetadata::default() })
        }
        (PassKind::Update, ImplKind::Direct) => {
            let strategy = choose_update_strategy(spec, config.threads);
            let blocks = choose_spatial_blocking(spec, config.planner.cache_budget);
            let input = to_blocked_activation(&d.input, spec)?;
            let grad_output = BlockedActivation::from_canonical(&d.grad_output, spec.vlen, 0, 0)?;
            let (samples, grad_weight) = time_runs(iters, || Ok(weight_update(spec, &input, &grad_output, &strategy, blocks, &par)?))?;
            let split = strategy.split();
            let metadata = LayerMetadata {
                update_strategy: Some(format!(
                    "{:?} copies={} split rs={} k={} c={}",
                    strategy.mode(),
                    strategy.copies(),
                    split.rs,
                    split.k,
                    split.c
                )),
                spatial_blocking: Some(format!("{}x{}", blocks.0, blocks.1)),
                ..LayerMetadata::default()
            };
            Ok(Measured { samples, result: grad_weight.to_canonical(), metadata })
        }
        (_, ImplKind::Im2col) => Err(DconvError::Unsupported("im2col implements the f32 forward pass only")),
    }
}

fn reference_f32(config: &BenchConfig, spec: &ConvLayerSpec, d: &LayerData) -> Result<Tensor4<f64>> {
    let wide = |t: &Tensor4<f32>| t.map(|v| v as f64);
    Ok(match config.pass {
        PassKind::Forward => {
            let mut out = conv_forward_naive(spec, &wide(&d.input), &wide(&d.weight))?;
            config.fuse.apply(&mut out, &d.bias);
            out
        }
        PassKind::Backward => conv_backward_naive(spec, &wide(&d.grad_output), &wide(&d.weight))?,
        PassKind::Update => conv_update_naive(spec, &wide(&d.input), &wide(&d.grad_output))?,
    })
}

fn measure_i16(
    config: &BenchConfig,
    id: usize,
    spec: &ConvLayerSpec,
    input: &Tensor4<i16>,
    weight: &Tensor4<i16>,
    bias: &[f32],
) -> Result<Measured<Tensor4<i32>>> {
    match config.implementation {
        ImplKind::Naive => {
            let (samples, result) = time_runs(config.iterations, || {
                let mut out = int_conv_forward_oracle(spec, input, weight)?.map(|v| v as i32);
                config.fuse.apply(&mut out, bias);
                Ok(out)
            })?;
            Ok(Measured { samples, result, metadata: LayerMetadata::default() })
        }
        ImplKind::Direct => {
            let plan = plan_forward::<i16>(spec, config.threads, config.fuse.operator(bias), &config.planner, &PlanOptions::default())?;
            write_plan(config.plan_dir.as_deref(), id, &plan)?;
            let blocked_input = to_blocked_activation(input, spec)?;
            let blocked_weight = to_blocked_weight(weight, spec)?;
            let mut output = plan.new_output();
            let (samples, ()) = time_runs(config.iterations, || {
                output.as_mut_slice().fill(0);
                Ok(plan.replay_all(&blocked_input, &blocked_weight, &mut output, &ScopedThreads)?)
            })?;
            let mut metadata = plan_metadata(&plan);
            metadata.i16_certified = plan.kernels().first().map(|k| k.descriptor().certify_i16_reduction(spec.c).is_ok());
            Ok(Measured { samples, result: output.to_canonical(), metadata })
        }
        ImplKind::Im2col => Err(DconvError::Unsupported("im2col implements the f32 forward pass only")),
    }
}

fn dump_checked<T: FileElement>(dir: Option<&Path>, id: usize, pass: PassKind, reference: &Tensor4<T>, result: &Tensor4<T>) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        save_tensor(&dir.join(format!("layer{id}_{pass:?}_reference.cft")), reference)?;
        save_tensor(&dir.join(format!("layer{id}_{pass:?}_result.cft")), result)?;
    }
    Ok(())
}

fn run_layer(config: &BenchConfig, entry: &LayerEntry) -> Result<LayerReport> {
    let spec = entry.spec.with_minibatch(config.minibatch);
    spec.validate()?;
    let (samples, norms, passed, metadata) = match config.dtype {
        DtypeKind::F32 => {
            let data = layer_data(&spec, entry.id, config.seed, config.pass);
            let m = measure_f32(config, entry.id, &spec, &data)?;
            let (norms, passed) = if config.check {
                let reference = reference_f32(config, &spec, &data)?;
                let result = m.result.map(|v| v as f64);
                dump_checked(config.dump_dir.as_deref(), entry.id, config.pass, &reference, &result)?;
                let norms = dconv_core::error_norms(&reference, &result)?;
                (Some(norms), Some(norms.within(F32_LINF_REL, F32_L2_REL)))
            } else {
                (None, None)
            };
            (m.samples, norms, passed, m.metadata)
        }
        DtypeKind::I16 => {
            let input = uniform_i16([spec.n, spec.c, spec.h, spec.w], stream_seed(config.seed, entry.id, 0));
            let weight = uniform_i16([spec.k, spec.c, spec.r, spec.s], stream_seed(config.seed, entry.id, 1));
            let bias = uniform_f32([1, 1, 1, spec.k], stream_seed(config.seed, entry.id, 3)).into_vec();
            let m = measure_i16(config, entry.id, &spec, &input, &weight, &bias)?;
            let (norms, passed) = if config.check {
                let mut reference = int_conv_forward_oracle(&spec, &input, &weight)?.map(|v| v as i32);
                config.fuse.apply(&mut reference, &bias);
                dump_checked(config.dump_dir.as_deref(), entry.id, config.pass, &reference, &m.result)?;
                let norms = dconv_core::error_norms(&reference, &m.result)?;
                (Some(norms), Some(norms.linf_abs == 0.0))
            } else {
                (None, None)
            };
            (m.samples, norms, passed, m.metadata)
        }
    };
    let flops = spec.flops();
    let best = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    Ok(LayerReport {
        id: entry.id,
        n: spec.n,
        c: spec.c,
        k: spec.k,
        h: spec.h,
        w: spec.w,
        r: spec.r,
        s: spec.s,
        stride: spec.stride,
        pad_h: spec.pad_h,
        pad_w: spec.pad_w,
        flops,
        best_seconds: best,
        mean_seconds: mean,
        samples,
        gflops: if best > 0.0 { flops as f64 / best * 1e-9 } else { 0.0 },
        norms: norms.map(Norms::from),
        passed,
        metadata,
    })
}

/// Runs the configured pass on every selected layer. Planning, blocking
/// of the operands and the oracle check are outside the timed region.
pub fn run_benchmark(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let layers = select_layers(config.layers.load()?, config.layer_ids.as_deref())?;
    let reports = layers.iter().map(|entry| run_layer(config, entry)).collect::<Result<Vec<_>>>()?;
    Ok(BenchReport {
        pass: config.pass,
        dtype: config.dtype,
        implementation: config.implementation,
        fuse: config.fuse,
        minibatch: config.minibatch,
        threads: config.threads,
        iterations: config.iterations,
        seed: config.seed,
        layers: reports,
    })
}
