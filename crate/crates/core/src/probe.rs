//! Pre-training gradient probe: folds per-batch base-weight gradients into a
//! running mean per target layer, with an adaptive early-stopping rule on
//! the normalized importance scores.
//!
//! Accumulation lives in a "host buffer" arena separate from working memory
//! so the byte cost of the probe can be accounted for (one buffer per layer,
//! never more). No optimizer state exists at any point.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::allocate::{self, ImportanceMetric};
use crate::error::{GoraError, Result};
use crate::net::{Batch, Network};
use crate::numerics::Matrix;

/// Where the per-step importance trace comes from: the running mean of the
/// accumulated gradient (what allocation will consume) or the latest batch
/// gradient alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    RunningMean,
    LastBatch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Total accumulation steps (batches folded into the mean).
    pub max_steps: usize,
    pub adaptive: bool,
    pub convergence_threshold: f64,
    /// Account accumulation bytes against the simulated host buffer.
    pub offload: bool,
    pub trace_source: TraceSource,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            max_steps: 64,
            adaptive: false,
            convergence_threshold: 0.01,
            offload: true,
            trace_source: TraceSource::RunningMean,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(GoraError::Config("probe needs at least one step".into()));
        }
        if !(self.convergence_threshold > 0.0) {
            return Err(GoraError::Config("convergence threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Accumulation arena standing in for pinned host memory. At most one live
/// buffer per layer; the peak is what a real offload would have paged.
#[derive(Debug, Default)]
pub struct HostArena {
    buffers: Vec<(usize, Matrix)>,
    bytes: usize,
}

impl HostArena {
    pub fn new() -> Self {
        HostArena::default()
    }

    pub fn alloc(&mut self, layer: usize, rows: usize, cols: usize) {
        assert!(
            !self.buffers.iter().any(|(l, _)| *l == layer),
            "second host buffer for layer {layer}"
        );
        self.buffers.push((layer, Matrix::zeros(rows, cols)));
        self.bytes += rows * cols * std::mem::size_of::<f64>();
    }

    pub fn get_mut(&mut self, layer: usize) -> &mut Matrix {
        &mut self
            .buffers
            .iter_mut()
            .find(|(l, _)| *l == layer)
            .expect("buffer allocated")
            .1
    }

    pub fn get(&self, layer: usize) -> &Matrix {
        &self
            .buffers
            .iter()
            .find(|(l, _)| *l == layer)
            .expect("buffer allocated")
            .1
    }

    /// Total bytes held; with one buffer per layer this is also the peak.
    pub fn peak_bytes(&self) -> usize {
        self.bytes
    }

    pub fn live_buffers(&self) -> usize {
        self.buffers.len()
    }

    pub fn into_buffers(self) -> Vec<(usize, Matrix)> {
        self.buffers
    }
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    /// Target layer indices, ascending.
    pub layers: Vec<usize>,
    /// Averaged gradient per target layer, aligned with `layers`.
    pub grads: Vec<Matrix>,
    /// Batches folded into the mean.
    pub steps_used: usize,
    /// Normalized importance vector per accumulation round.
    pub importance_trace: Vec<Vec<f64>>,
    /// Peak bytes of the accumulation arena.
    pub host_peak_bytes: usize,
    pub threshold: f64,
}

impl ProbeResult {
    pub fn grad_for(&self, layer: usize) -> Option<&Matrix> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| &self.grads[i])
    }
}

/// True when two normalized importance vectors are closer than `threshold`
/// in the L-infinity distance (strict comparison).
pub fn adaptive_stop_check(prev: &[f64], cur: &[f64], threshold: f64) -> Result<bool> {
    if prev.len() != cur.len() {
        return Err(GoraError::Config(format!(
            "importance vectors of different lengths: {} vs {}",
            prev.len(),
            cur.len()
        )));
    }
    for (name, v) in [("previous", prev), ("current", cur)] {
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GoraError::Config(format!(
                "{name} importance vector not normalized, sum is {sum}"
            )));
        }
    }
    let dist = prev
        .iter()
        .zip(cur)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    Ok(dist < threshold)
}

/// Single-worker probe over a batch stream. A thin wrapper around the round
/// engine with one batch per round.
pub fn run_probe(
    net: &Network,
    stream: &[Batch],
    metric: ImportanceMetric,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    probe_rounds(net, &stream.iter().collect::<Vec<_>>(), 1, metric, cfg)
}

/// Round-based accumulation engine shared by the single-worker probe and the
/// data-parallel simulation. Each round folds `round_size` consecutive
/// batches into the host buffers in stream order (an ascending left fold,
/// so the summation order is identical for every round size).
pub(crate) fn probe_rounds(
    net: &Network,
    stream: &[&Batch],
    round_size: usize,
    metric: ImportanceMetric,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    let targets = net.target_layers();
    if targets.is_empty() {
        return Err(GoraError::Config("no layers are flagged for adaptation".into()));
    }
    if stream.is_empty() {
        return Err(GoraError::Config("empty probe stream".into()));
    }
    let min_batches = if cfg.adaptive { 2 * round_size } else { cfg.max_steps };
    if stream.len() < min_batches {
        return Err(GoraError::Config(format!(
            "probe stream yields {} batches but {} are required",
            stream.len(),
            min_batches
        )));
    }

    let weight_hash_before = net.weight_hash();
    let mut arena = HostArena::new();
    for &l in &targets {
        let (m, n) = net.layers[l].weight.shape();
        arena.alloc(l, m, n);
    }

    let total_steps = cfg.max_steps.min(stream.len());
    let rounds = total_steps / round_size;
    if rounds == 0 {
        return Err(GoraError::Config(format!(
            "round size {round_size} exceeds the {total_steps} available steps"
        )));
    }

    let adapters = crate::adapter::AdapterSet::new();
    let mut trace: Vec<Vec<f64>> = Vec::new();
    let mut consumed = 0usize;
    let mut stopped = false;

    for round in 0..rounds {
        let mut last_batch_grads: Vec<Matrix> = Vec::new();
        for member in 0..round_size {
            let batch = stream[round * round_size + member];
            let (_, grads) = net.forward_backward(&adapters, batch)?;
            for (&l, g) in targets.iter().map(|l| (l, &grads[*l])) {
                if !g.is_finite() {
                    return Err(GoraError::NonFinite(format!(
                        "gradient of layer {l} at probe step {consumed}"
                    )));
                }
                arena.get_mut(l).axpy(1.0, g)?;
            }
            if cfg.trace_source == TraceSource::LastBatch && member == round_size - 1 {
                last_batch_grads = targets.iter().map(|&l| grads[l].clone()).collect();
            }
            consumed += 1;
        }

        // Importance of the state the allocation would consume right now.
        let importances: Vec<f64> = match cfg.trace_source {
            TraceSource::RunningMean => targets
                .iter()
                .map(|&l| {
                    let mean = arena.get(l).scale(1.0 / consumed as f64);
                    allocate::importance(&net.layers[l].weight, &mean, metric)
                })
                .collect::<Result<_>>()?,
            TraceSource::LastBatch => targets
                .iter()
                .zip(&last_batch_grads)
                .map(|(&l, g)| allocate::importance(&net.layers[l].weight, g, metric))
                .collect::<Result<_>>()?,
        };
        trace.push(allocate::advantages(&importances)?);

        if cfg.adaptive && round >= 1 {
            let prev = &trace[round - 1];
            let cur = &trace[round];
            if adaptive_stop_check(prev, cur, cfg.convergence_threshold)? {
                stopped = true;
                break;
            }
        }
    }
    let _ = stopped;

    debug_assert_eq!(net.weight_hash(), weight_hash_before);
    let peak = arena.peak_bytes();
    let threshold = cfg.convergence_threshold;
    let grads: Vec<Matrix> = {
        let mut out = Vec::with_capacity(targets.len());
        let buffers = arena.into_buffers();
        for &l in &targets {
            let sum = &buffers.iter().find(|(li, _)| *li == l).unwrap().1;
            out.push(sum.scale(1.0 / consumed as f64));
        }
        out
    };

    Ok(ProbeResult {
        layers: targets,
        grads,
        steps_used: consumed,
        importance_trace: trace,
        host_peak_bytes: peak,
        threshold,
    })
}

const GPRB_MAGIC: &[u8; 4] = b"GPRB";

/// Persist a probe result: magic, layer count, steps_used, threshold, then
/// per layer a u32 index and a GMAT block.
pub fn write_probe<W: Write>(w: &mut W, probe: &ProbeResult) -> Result<()> {
    w.write_all(GPRB_MAGIC)?;
    w.write_all(&(probe.layers.len() as u32).to_le_bytes())?;
    w.write_all(&(probe.steps_used as u32).to_le_bytes())?;
    w.write_all(&probe.threshold.to_le_bytes())?;
    for (&l, g) in probe.layers.iter().zip(&probe.grads) {
        w.write_all(&(l as u32).to_le_bytes())?;
        g.write_gmat(w)?;
    }
    Ok(())
}

pub fn read_probe<R: Read>(r: &mut R) -> Result<ProbeResult> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GPRB_MAGIC {
        return Err(GoraError::Format(format!("bad GPRB magic: {magic:02x?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let steps_used = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let threshold = f64::from_le_bytes(b8);
    let mut layers = Vec::with_capacity(count);
    let mut grads = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b4)?;
        layers.push(u32::from_le_bytes(b4) as usize);
        grads.push(Matrix::read_gmat(r)?);
    }
    let host_peak_bytes = grads
        .iter()
        .map(|g| g.rows() * g.cols() * std::mem::size_of::<f64>())
        .sum();
    Ok(ProbeResult {
        layers,
        grads,
        steps_used,
        importance_trace: Vec::new(),
        host_peak_bytes,
        threshold,
    })
}
