use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use dconv::bench::select_layers;
use dconv::chain::{run_chain, ChainConfig, ChainLayer};
use dconv::{run_benchmark, BenchConfig, DtypeKind, FuseKind, ImplKind, LayerSource, PassKind};
use dconv_core::microkernel::BlockingConfig;
use dconv_core::planner::{PlannerConfig, DEFAULT_CACHE_BUDGET};

/// Times convolution layers and checks them against reference oracles.
#[derive(Debug, Parser)]
#[command(name = "bench", version)]
struct Args {
    /// CSV layer table, or `resnet50` for the built-in table.
    #[arg(long, default_value = "resnet50")]
    layers: String,
    /// Comma-separated layer ids to run, in order (default: all).
    #[arg(long, value_delimiter = ',')]
    layer_ids: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1)]
    minibatch: usize,
    #[arg(long, default_value_t = 1)]
    iters: usize,
    #[arg(long, value_enum, default_value = "F")]
    pass: PassKind,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DtypeKind,
    #[arg(long = "impl", value_enum, default_value = "direct")]
    implementation: ImplKind,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Compare every result with the matching oracle; exit non-zero when out of tolerance.
    #[arg(long)]
    check: bool,
    #[arg(long, value_enum, default_value = "none")]
    fuse: FuseKind,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Report file; `.csv` writes CSV, anything else JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the selected layers as one forward chain (direct engine, f32).
    #[arg(long)]
    chain: bool,
    /// Directory for binary dumps and descriptions of forward plans.
    #[arg(long)]
    dump_plan: Option<PathBuf>,
    /// Directory for reference and result tensors of checked layers.
    #[arg(long)]
    dump_tensors: Option<PathBuf>,
    /// Accumulators needed to hide arithmetic latency.
    #[arg(long, default_value_t = BlockingConfig::default().min_accumulators)]
    min_acc: usize,
    /// Register budget for accumulators.
    #[arg(long, default_value_t = BlockingConfig::default().max_accumulators)]
    max_acc: usize,
    /// Cache budget in bytes for weight-update spatial blocks.
    #[arg(long, default_value_t = DEFAULT_CACHE_BUDGET)]
    cache_budget: usize,
}

impl Args {
    fn planner(&self) -> PlannerConfig {
        PlannerConfig {
            blocking: BlockingConfig { min_accumulators: self.min_acc, max_accumulators: self.max_acc },
            cache_budget: self.cache_budget,
        }
    }
}

fn run_as_chain(args: &Args) -> Result<bool> {
    let entries = select_layers(LayerSource::parse(&args.layers).load()?, args.layer_ids.as_deref())?;
    let config = ChainConfig {
        layers: entries.iter().map(|e| ChainLayer { id: e.id, spec: e.spec, fuse: args.fuse }).collect(),
        minibatch: args.minibatch,
        threads: args.threads,
        seed: args.seed,
        check: args.check,
        planner: args.planner(),
    };
    let report = run_chain(&config)?;
    println!("chain of {} layers, fuse {:?}, N={}, threads={}", report.steps.len(), args.fuse, args.minibatch, args.threads);
    println!("{:>4} {:>10} {:>10} {:>9}", "id", "GFLOP", "ms", "GFLOPS");
    for step in &report.steps {
        let gflops = if step.seconds > 0.0 { step.flops as f64 / step.seconds * 1e-9 } else { 0.0 };
        println!("{:>4} {:>10.3} {:>10.3} {:>9.2}", step.id, step.flops as f64 * 1e-9, step.seconds * 1e3, gflops);
    }
    let dims = report.output.dims();
    println!("output {}x{}x{}x{}", dims[0], dims[1], dims[2], dims[3]);
    if let Some(n) = report.norms {
        println!("vs oracle chain: linf_rel {:.3e}, l2_rel {:.3e}", n.linf_rel, n.l2_rel);
    }
    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&report.steps)?;
        std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(report.passed() != Some(false))
}

fn run(args: &Args) -> Result<bool> {
    if args.chain {
        return run_as_chain(args);
    }
    let config = BenchConfig {
        layers: LayerSource::parse(&args.layers),
        layer_ids: args.layer_ids.clone(),
        minibatch: args.minibatch,
        iterations: args.iters,
        pass: args.pass,
        dtype: args.dtype,
        implementation: args.implementation,
        threads: args.threads,
        check: args.check,
        fuse: args.fuse,
        seed: args.seed,
        planner: args.planner(),
        dump_dir: args.dump_tensors.clone(),
        plan_dir: args.dump_plan.clone(),
    };
    let report = run_benchmark(&config)?;
    print!("{}", report.table());
    if let Some(path) = &args.out {
        report.save(path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(report.all_passed())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("check failed: results exceed the tolerance");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
