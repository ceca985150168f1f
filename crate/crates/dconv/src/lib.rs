//! Host-side companion of `dconv-core`: OS threads, seeded data, layer
//! tables, tensor and plan files, the benchmark runner and multi-layer
//! forward chains.

pub mod bench;
pub mod chain;
pub mod data;
pub mod error;
pub mod flops;
pub mod format;
pub mod layers;
pub mod plan_io;
pub mod threads;

pub use bench::{run_benchmark, BenchConfig, BenchReport, DtypeKind, FuseKind, ImplKind, LayerSource, PassKind};
pub use chain::{run_chain, ChainConfig, ChainLayer, ChainReport};
pub use error::{DconvError, Result};
pub use layers::{parse_layer_file, parse_layers, resnet50, LayerEntry};
pub use threads::ScopedThreads;
