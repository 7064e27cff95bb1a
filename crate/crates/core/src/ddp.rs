//! Deterministic in-process simulation of data-parallel probing and
//! initialization: W workers shard the batch stream round-robin, per-layer
//! gradients are reduced straight into the single host buffer on worker 0
//! in ascending worker order, and the plan plus initialized adapters are
//! broadcast back.
//!
//! The reduce is an ascending left fold into the accumulation buffer, which
//! makes the summation order identical to a single worker consuming the
//! global stream in order. Equivalence across world sizes is therefore
//! bit-exact, not approximate.

use serde::{Deserialize, Serialize};

use crate::adapter::{checkpoint_bytes, AdapterSet, ScalingMode};
use crate::allocate::{self, AllocConfig, ImportanceMetric, RankPlan};
use crate::error::{GoraError, Result};
use crate::init::{initialize_adapters, InitConfig, InitReport};
use crate::net::{Batch, Network};
use crate::numerics::Matrix;
use crate::probe::{probe_rounds, HostArena, ProbeConfig, ProbeResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkerTopology {
    pub world_size: usize,
    /// Compute each round's per-worker gradients on real threads; the merge
    /// point still enforces ascending worker order, so bytes are identical.
    pub threaded: bool,
    /// Literal per-worker accumulation: worker 0 folds only its own shard
    /// instead of the reduced global gradient. Kept for comparison.
    pub literal_local_accumulation: bool,
}

impl WorkerTopology {
    pub fn new(world_size: usize) -> Result<Self> {
        if world_size == 0 {
            return Err(GoraError::Config("world size must be at least 1".into()));
        }
        Ok(WorkerTopology { world_size, threaded: false, literal_local_accumulation: false })
    }
}

/// Round-robin shard view: worker w sees batches {w, w+W, w+2W, ...}.
pub struct ShardedStream<'a> {
    pub batches: &'a [Batch],
    pub world_size: usize,
}

impl<'a> ShardedStream<'a> {
    pub fn new(batches: &'a [Batch], world_size: usize) -> Self {
        ShardedStream { batches, world_size }
    }

    pub fn shard(&self, worker: usize) -> impl Iterator<Item = &'a Batch> + '_ {
        self.batches
            .iter()
            .skip(worker)
            .step_by(self.world_size)
    }

    /// Full synchronized rounds available.
    pub fn rounds(&self) -> usize {
        self.batches.len() / self.world_size
    }
}

/// Data-parallel probe. `cfg.max_steps` counts batches folded into the mean
/// globally; it must cover whole rounds, a remainder is dropped and
/// reported. With `literal_local_accumulation` only worker 0's shard is
/// accumulated.
pub fn ddp_probe(
    net: &Network,
    stream: &[Batch],
    topology: &WorkerTopology,
    metric: ImportanceMetric,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let w = topology.world_size;
    let sharded = ShardedStream::new(stream, w);
    if sharded.rounds() == 0 {
        return Err(GoraError::Config(format!(
            "stream of {} batches cannot feed {w} workers a full round",
            stream.len()
        )));
    }

    if topology.literal_local_accumulation {
        return literal_local_probe(net, stream, topology, metric, cfg);
    }

    if topology.threaded {
        return threaded_probe(net, stream, topology, metric, cfg);
    }

    // Sequential reduce-to-rank-0: identical to the round engine where each
    // round is one synchronized step of all W workers.
    let refs: Vec<&Batch> = stream.iter().collect();
    let dropped = cfg.max_steps.min(stream.len()) % w;
    if dropped != 0 {
        eprintln!("[ddp] dropping {dropped} remainder batches to keep rounds synchronized");
    }
    probe_rounds(net, &refs, w, metric, cfg)
}

/// Threaded variant: per-round worker gradients are computed concurrently,
/// then folded at the merge point in ascending worker order.
fn threaded_probe(
    net: &Network,
    stream: &[Batch],
    topology: &WorkerTopology,
    metric: ImportanceMetric,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    let w = topology.world_size;
    let targets = net.target_layers();
    let total = cfg.max_steps.min(stream.len());
    let rounds = total / w;
    if rounds == 0 {
        return Err(GoraError::Config("not enough batches for one round".into()));
    }

    let mut arena = HostArena::new();
    for &l in &targets {
        let (m, n) = net.layers[l].weight.shape();
        arena.alloc(l, m, n);
    }

    let adapters = AdapterSet::new();
    let mut trace: Vec<Vec<f64>> = Vec::new();
    let mut consumed = 0usize;

    for round in 0..rounds {
        let round_batches = &stream[round * w..(round + 1) * w];
        let mut worker_grads: Vec<Option<Vec<Matrix>>> = (0..w).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = round_batches
                .iter()
                .map(|batch| {
                    let adapters = &adapters;
                    scope.spawn(move || net.forward_backward(adapters, batch))
                })
                .collect();
            for (slot, handle) in worker_grads.iter_mut().zip(handles) {
                match handle.join().expect("worker thread panicked") {
                    Ok((_, grads)) => *slot = Some(grads),
                    Err(_) => *slot = None,
                }
            }
        });
        for grads in worker_grads {
            let grads = grads.ok_or_else(|| {
                GoraError::NonFinite(format!("worker gradient in round {round}"))
            })?;
            for &l in &targets {
                arena.get_mut(l).axpy(1.0, &grads[l])?;
            }
            consumed += 1;
        }

        let importances: Vec<f64> = targets
            .iter()
            .map(|&l| {
                let mean = arena.get(l).scale(1.0 / consumed as f64);
                allocate::importance(&net.layers[l].weight, &mean, metric)
            })
            .collect::<Result<_>>()?;
        trace.push(allocate::advantages(&importances)?);

        if cfg.adaptive && round >= 1 {
            let stop = crate::probe::adaptive_stop_check(
                &trace[round - 1],
                &trace[round],
                cfg.convergence_threshold,
            )?;
            if stop {
                break;
            }
        }
    }

    let peak = arena.peak_bytes();
    let buffers = arena.into_buffers();
    let grads = targets
        .iter()
        .map(|&l| {
            buffers
                .iter()
                .find(|(li, _)| *li == l)
                .unwrap()
                .1
                .scale(1.0 / consumed as f64)
        })
        .collect();

    Ok(ProbeResult {
        layers: targets,
        grads,
        steps_used: consumed,
        importance_trace: trace,
        host_peak_bytes: peak,
        threshold: cfg.convergence_threshold,
    })
}

/// Worker 0 accumulates only its own shard; the result is the mean over
/// N batches instead of W*N. Kept behind a flag for comparison only.
fn literal_local_probe(
    net: &Network,
    stream: &[Batch],
    topology: &WorkerTopology,
    metric: ImportanceMetric,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let w = topology.world_size;
    let shard: Vec<&Batch> = ShardedStream::new(stream, w).shard(0).collect();
    let rounds = cfg.max_steps.min(stream.len()) / w;
    let local_cfg = ProbeConfig { max_steps: rounds.max(1), ..cfg.clone() };
    probe_rounds(net, &shard, 1, metric, &local_cfg)
}

/// Everything the rank-0 side of the allocation/initialization produces.
pub struct DdpInit {
    pub plan: RankPlan,
    pub report: InitReport,
    /// One adapter set per worker, bit-identical after the broadcast.
    pub per_worker: Vec<AdapterSet>,
    /// Protocol-order event log: importance broadcast precedes init
    /// broadcast.
    pub events: Vec<String>,
}

/// Rank allocation and initialization on worker 0, then broadcast: the
/// importance set first, the initialized adapters after — every worker
/// ends up with identical bytes.
pub fn ddp_allocate_and_init(
    net: &Network,
    probe: &ProbeResult,
    topology: &WorkerTopology,
    alloc_cfg: &AllocConfig,
    alpha: f64,
    mode: ScalingMode,
    init_cfg: &InitConfig,
    first_batch: Option<&Batch>,
) -> Result<DdpInit> {
    let mut events = Vec::new();

    // Worker 0 computes importances from its host buffers.
    let importances: Vec<f64> = probe
        .layers
        .iter()
        .zip(&probe.grads)
        .map(|(&l, g)| allocate::importance(&net.layers[l].weight, g, alloc_cfg.metric))
        .collect::<Result<_>>()?;
    events.push("importance_broadcast".to_string());

    let advantages = allocate::advantages(&importances)?;
    let layers: Vec<(usize, (usize, usize))> = probe
        .layers
        .iter()
        .map(|&l| (l, net.layers[l].weight.shape()))
        .collect();
    let plan = allocate::allocate_ranks(alloc_cfg, &layers, &importances, &advantages)?;

    let (adapters, report) =
        initialize_adapters(net, &plan, probe, alpha, mode, init_cfg, first_batch)?;
    events.push("init_broadcast".to_string());

    let per_worker: Vec<AdapterSet> = (0..topology.world_size)
        .map(|_| adapters.clone())
        .collect();
    debug_assert!(per_worker
        .iter()
        .all(|set| checkpoint_bytes(set) == checkpoint_bytes(&adapters)));

    Ok(DdpInit { plan, report, per_worker, events })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::GammaSpec;
    use crate::net::{Activation, Layer, LayerSpec, Loss, Targets};
    use crate::numerics::Rng;
    use crate::probe::run_probe;

    fn net_and_stream(seed: u64, batches: usize) -> (Network, Vec<Batch>) {
        let mut rng = Rng::new(seed);
        let net = Network::new(
            vec![
                Layer {
                    spec: LayerSpec { in_dim: 6, out_dim: 8, activation: Activation::Tanh, adapt: true },
                    weight: rng.sample_gaussian(6, 8).scale(0.4),
                    bias: None,
                },
                Layer {
                    spec: LayerSpec { in_dim: 8, out_dim: 4, activation: Activation::Linear, adapt: true },
                    weight: rng.sample_gaussian(8, 4).scale(0.4),
                    bias: None,
                },
            ],
            Loss::Mse,
        )
        .unwrap();
        let stream = (0..batches)
            .map(|_| Batch {
                inputs: rng.sample_gaussian(8, 6),
                targets: Targets::Regression(rng.sample_gaussian(8, 4)),
            })
            .collect();
        (net, stream)
    }

    #[test]
    fn world_of_one_matches_single_worker_probe_bitwise() {
        let (net, stream) = net_and_stream(1, 8);
        let cfg = ProbeConfig { max_steps: 8, ..ProbeConfig::default() };
        let single = run_probe(&net, &stream, ImportanceMetric::Sensitivity, &cfg).unwrap();
        let topo = WorkerTopology::new(1).unwrap();
        let ddp = ddp_probe(&net, &stream, &topo, ImportanceMetric::Sensitivity, &cfg).unwrap();
        for (a, b) in single.grads.iter().zip(&ddp.grads) {
            assert_eq!(a, b);
        }
        assert_eq!(single.steps_used, ddp.steps_used);
    }

    #[test]
    fn four_workers_match_single_worker_bitwise() {
        let (net, stream) = net_and_stream(2, 8);
        let cfg = ProbeConfig { max_steps: 8, ..ProbeConfig::default() };
        let single = run_probe(&net, &stream, ImportanceMetric::Sensitivity, &cfg).unwrap();
        let topo = WorkerTopology::new(4).unwrap();
        let ddp = ddp_probe(&net, &stream, &topo, ImportanceMetric::Sensitivity, &cfg).unwrap();
        for (a, b) in single.grads.iter().zip(&ddp.grads) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn threaded_mode_produces_identical_bytes() {
        let (net, stream) = net_and_stream(3, 12);
        let cfg = ProbeConfig { max_steps: 12, ..ProbeConfig::default() };
        let mut topo = WorkerTopology::new(4).unwrap();
        let sequential = ddp_probe(&net, &stream, &topo, ImportanceMetric::Sensitivity, &cfg).unwrap();
        topo.threaded = true;
        let threaded = ddp_probe(&net, &stream, &topo, ImportanceMetric::Sensitivity, &cfg).unwrap();
        for (a, b) in sequential.grads.iter().zip(&threaded.grads) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn peak_host_bytes_independent_of_world_size() {
        let (net, stream) = net_and_stream(4, 8);
        let cfg = ProbeConfig { max_steps: 8, ..ProbeConfig::default() };
        let expected = (6 * 8 + 8 * 4) * 8;
        for w in [1usize, 2, 4] {
            let topo = WorkerTopology::new(w).unwrap();
            let ddp = ddp_probe(&net, &stream, &topo, ImportanceMetric::Sensitivity, &cfg).unwrap();
            assert_eq!(ddp.host_peak_bytes, expected);
        }
    }

    #[test]
    fn literal_reading_differs_from_reduce_reading() {
        let (net, stream) = net_and_stream(5, 8);
        let cfg = ProbeConfig { max_steps: 8, ..ProbeConfig::default() };
        let mut topo = WorkerTopology::new(4).unwrap();
        let reduced = ddp_probe(&net, &stream, &topo, ImportanceMetric::Sensitivity, &cfg).unwrap();
        topo.literal_local_accumulation = true;
        let literal = ddp_probe(&net, &stream, &topo, ImportanceMetric::Sensitivity, &cfg).unwrap();
        assert_eq!(literal.steps_used, 2); // only worker 0's shard
        assert_ne!(reduced.grads[0], literal.grads[0]);
    }

    #[test]
    fn broadcast_contract_and_plan_equality() {
        let (net, stream) = net_and_stream(6, 8);
        let cfg = ProbeConfig { max_steps: 8, ..ProbeConfig::default() };
        let alloc_cfg = AllocConfig::from_r_ref(2, ImportanceMetric::Sensitivity).unwrap();
        let init_cfg = InitConfig { gamma: GammaSpec::Fixed(0.05), seed: 11 };

        let mut outputs = Vec::new();
        for w in [1usize, 2, 4] {
            let topo = WorkerTopology::new(w).unwrap();
            let probe = ddp_probe(&net, &stream, &topo, ImportanceMetric::Sensitivity, &cfg).unwrap();
            let out = ddp_allocate_and_init(
                &net,
                &probe,
                &topo,
                &alloc_cfg,
                16.0,
                ScalingMode::RsLora,
                &init_cfg,
                None,
            )
            .unwrap();
            assert_eq!(out.events, vec!["importance_broadcast", "init_broadcast"]);
            let checksums: Vec<Vec<u8>> =
                out.per_worker.iter().map(checkpoint_bytes).collect();
            for c in &checksums {
                assert_eq!(c, &checksums[0]);
            }
            outputs.push((out.plan.clone(), checksums[0].clone()));
        }
        for (plan, bytes) in &outputs {
            assert_eq!(plan.records, outputs[0].0.records);
            assert_eq!(bytes, &outputs[0].1);
        }
    }
}
