//! Multi-layer forward chains: each layer's blocked output, with its fused
//! operator applied, is written straight into the halo layout the next
//! layer reads.

use std::time::Instant;

use dconv_core::oracle::conv_forward_naive;
use dconv_core::planner::PlannerConfig;
use dconv_core::propagation::plan_forward;
use dconv_core::stream::{OutputPlacement, PlanOptions};
use dconv_core::tensor::{to_blocked_activation, to_blocked_weight};
use dconv_core::{ConvLayerSpec, ErrorNorms, Tensor4};
use serde::Serialize;

use crate::bench::{FuseKind, F32_L2_REL, F32_LINF_REL};
use crate::data::{stream_seed, uniform_f32};
use crate::error::{DconvError, Result};
use crate::threads::ScopedThreads;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainLayer {
    pub id: usize,
    pub spec: ConvLayerSpec,
    pub fuse: FuseKind,
}

#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub layers: Vec<ChainLayer>,
    pub minibatch: usize,
    pub threads: usize,
    pub seed: u64,
    pub check: bool,
    pub planner: PlannerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainStep {
    pub id: usize,
    pub flops: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ChainReport {
    pub output: Tensor4<f32>,
    pub steps: Vec<ChainStep>,
    /// Against the composition of oracle layers, when checked.
    pub norms: Option<ErrorNorms>,
}

impl ChainReport {
    pub fn passed(&self) -> Option<bool> {
        self.norms.map(|n| n.within(F32_LINF_REL, F32_L2_REL))
    }
}

/// Checks that every layer consumes what the previous one produces.
pub fn check_chain(layers: &[ChainLayer]) -> Result<()> {
    if layers.is_empty() {
        return Err(DconvError::InvalidConfig("a chain needs at least one layer"));
    }
    for layer in layers {
        layer.spec.validate()?;
    }
    for pair in layers.windows(2) {
        let (prev, next) = (&pair[0].spec, &pair[1].spec);
        let mismatch = |what, expected, found| Err(DconvError::ChainShapeMismatch { layer: pair[1].id, what, expected, found });
        if prev.k != next.c {
            return mismatch("channels", prev.k, next.c);
        }
        if prev.p() != next.h {
            return mismatch("height", prev.p(), next.h);
        }
        if prev.q() != next.w {
            return mismatch("width", prev.q(), next.w);
        }
        if prev.vlen != next.vlen {
            return mismatch("vlen", prev.vlen, next.vlen);
        }
    }
    Ok(())
}

/// Seeded input, per-layer weights and per-layer biases of a chain.
pub struct ChainData {
    pub input: Tensor4<f32>,
    pub weights: Vec<Tensor4<f32>>,
    pub biases: Vec<Vec<f32>>,
}

pub fn chain_data(layers: &[ChainLayer], minibatch: usize, seed: u64) -> ChainData {
    let first = &layers[0];
    let input = uniform_f32([minibatch, first.spec.c, first.spec.h, first.spec.w], stream_seed(seed, first.id, 0));
    let weights = layers
        .iter()
        .enumerate()
        .map(|(i, l)| uniform_f32([l.spec.k, l.spec.c, l.spec.r, l.spec.s], stream_seed(seed, l.id, 1 + 4 * i as u64)))
        .collect();
    let biases = layers
        .iter()
        .enumerate()
        .map(|(i, l)| uniform_f32([1, 1, 1, l.spec.k], stream_seed(seed, l.id, 3 + 4 * i as u64)).into_vec())
        .collect();
    ChainData { input, weights, biases }
}

/// The chain computed with the naive oracle, layer by layer.
pub fn chain_reference(layers: &[ChainLayer], minibatch: usize, data: &ChainData) -> Result<Tensor4<f32>> {
    let mut activation = data.input.clone();
    for (i, layer) in layers.iter().enumerate() {
        let spec = layer.spec.with_minibatch(minibatch);
        activation = conv_forward_naive(&spec, &activation, &data.weights[i])?;
        layer.fuse.apply(&mut activation, &data.biases[i]);
    }
    Ok(activation)
}

/// Runs the chain with the direct engine. Only plan replays are timed.
pub fn run_chain(config: &ChainConfig) -> Result<ChainReport> {
    if config.minibatch == 0 || config.threads == 0 {
        return Err(DconvError::InvalidConfig("minibatch and threads must be at least 1"));
    }
    check_chain(&config.layers)?;
    let data = chain_data(&config.layers, config.minibatch, config.seed);
    let specs: Vec<ConvLayerSpec> = config.layers.iter().map(|l| l.spec.with_minibatch(config.minibatch)).collect();

    let mut activation = to_blocked_activation(&data.input, &specs[0])?;
    let mut steps = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let (halo_h, halo_w) = specs.get(i + 1).map_or((0, 0), |next| (next.pad_h, next.pad_w));
        let options = PlanOptions { output: Some(OutputPlacement::dense(spec).with_halo(halo_h, halo_w)), ..PlanOptions::default() };
        let fusion = config.layers[i].fuse.operator(&data.biases[i]);
        let plan = plan_forward::<f32>(spec, config.threads, fusion, &config.planner, &options)?;
        let weight = to_blocked_weight(&data.weights[i], spec)?;
        let mut output = plan.new_output();
        let start = Instant::now();
        plan.replay_all(&activation, &weight, &mut output, &ScopedThreads)?;
        steps.push(ChainStep { id: config.layers[i].id, flops: spec.flops(), seconds: start.elapsed().as_secs_f64() });
        activation = output;
    }
    let output = activation.to_canonical();
    let norms = if config.check {
        let reference = chain_reference(&config.layers, config.minibatch, &data)?;
        Some(dconv_core::error_norms(&reference, &output)?)
    } else {
        None
    };
    Ok(ChainReport { output, steps, norms })
}
