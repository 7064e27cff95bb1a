//! Stage orchestration: build the task and network from a config, run
//! probe -> allocate -> init -> train, and keep every stage replayable from
//! the artifacts of the one before it.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::adapter::{self, AdapterSet};
use crate::allocate::{self, RankPlan};
use crate::config::{RunConfig, TaskFamily};
use crate::ddp::{ddp_allocate_and_init, ddp_probe, WorkerTopology};
use crate::error::{GoraError, Result};
use crate::init::{InitConfig, InitReport};
use crate::manifest::{sha256_hex, ArtifactRecord, RunManifest, Timings};
use crate::net::{Activation, Batch, Layer, LayerSpec, Loss, Network};
use crate::numerics::{derive_seed, Rng};
use crate::probe::{self, ProbeResult};
use crate::tasks;
use crate::train::{train, TrainRecord};

pub const PROBE_FILE: &str = "probe.gprb";
pub const PLAN_JSON: &str = "rankplan.json";
pub const PLAN_TABLE: &str = "rankplan.txt";
pub const ADAPTER_FILE: &str = "adapters.gadp";
pub const TRAIN_CSV: &str = "train.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Materialized task plus the frozen network it runs on.
pub struct Workbench {
    pub net: Network,
    pub train_batches: Vec<Batch>,
    pub eval_batch: Batch,
}

/// Build the network and data for a config. Deterministic in the seed: the
/// task stream uses (seed, "task"), model weights (seed, "model", layer).
pub fn build_workbench(cfg: &RunConfig) -> Result<Workbench> {
    cfg.validate()?;
    let mut task_rng = Rng::new(derive_seed(cfg.seed, "task", 0));
    match cfg.task.family {
        TaskFamily::Teacher => {
            let t = tasks::make_lowrank_teacher_task(
                &mut task_rng,
                cfg.task.m,
                cfg.task.n,
                cfg.task.r_true,
                cfg.task.samples,
                cfg.task.noise_std,
                cfg.task.batch_size,
            )?;
            let net = Network::new(
                vec![Layer {
                    spec: LayerSpec {
                        in_dim: cfg.task.m,
                        out_dim: cfg.task.n,
                        activation: Activation::Linear,
                        adapt: true,
                    },
                    weight: t.w0,
                    bias: None,
                }],
                Loss::Mse,
            )?;
            Ok(Workbench { net, train_batches: t.train, eval_batch: t.eval })
        }
        TaskFamily::Cluster => {
            let t = tasks::make_cluster_classification_task(
                &mut task_rng,
                cfg.task.m,
                cfg.task.n,
                cfg.task.samples,
                cfg.task.separation,
                cfg.task.batch_size,
            )?;
            let mut dims = vec![cfg.task.m];
            dims.extend(&cfg.model.hidden);
            dims.push(cfg.task.n);
            let mut layers = Vec::new();
            for (idx, pair) in dims.windows(2).enumerate() {
                let (m, n) = (pair[0], pair[1]);
                let last = idx == dims.len() - 2;
                let mut rng = Rng::new(derive_seed(cfg.seed, "model", idx as u64));
                let weight = rng.sample_gaussian(m, n).scale(1.0 / (m as f64).sqrt());
                let adapt = cfg.model.adapt.is_empty() || cfg.model.adapt.contains(&idx);
                layers.push(Layer {
                    spec: LayerSpec {
                        in_dim: m,
                        out_dim: n,
                        activation: if last { Activation::Linear } else { cfg.model.activation },
                        adapt,
                    },
                    weight,
                    bias: if cfg.model.bias { Some(vec![0.0; n]) } else { None },
                });
            }
            let net = Network::new(layers, Loss::SoftmaxCrossEntropy)?;
            Ok(Workbench { net, train_batches: t.train, eval_batch: t.eval })
        }
    }
}

fn read_artifact(dir: &Path, name: &str, stage: &str, produced_by: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(GoraError::StageOrder(format!(
            "{stage} needs `{name}` but it does not exist in {}; run `{produced_by}` first",
            dir.display()
        )));
    }
    Ok(fs::read(path)?)
}

/// Probe stage: accumulate gradients, write `probe.gprb`.
pub fn stage_probe(cfg: &RunConfig, out: &Path) -> Result<ProbeResult> {
    let bench = build_workbench(cfg)?;
    let topo = WorkerTopology::new(cfg.workers)?;
    let result = ddp_probe(
        &bench.net,
        &bench.train_batches,
        &topo,
        cfg.adapter.metric,
        &cfg.probe_config(),
    )?;
    fs::create_dir_all(out)?;
    let mut buf = Vec::new();
    probe::write_probe(&mut buf, &result)?;
    fs::write(out.join(PROBE_FILE), buf)?;
    Ok(result)
}

/// Allocation stage: consume `probe.gprb`, write the plan table and record.
pub fn stage_allocate(cfg: &RunConfig, out: &Path) -> Result<RankPlan> {
    let bench = build_workbench(cfg)?;
    let bytes = read_artifact(out, PROBE_FILE, "allocate", "probe")?;
    let probe = probe::read_probe(&mut bytes.as_slice())?;
    let plan = plan_from_probe(cfg, &bench.net, &probe)?;
    fs::write(out.join(PLAN_TABLE), plan.to_table())?;
    fs::write(out.join(PLAN_JSON), serde_json::to_string_pretty(&plan).unwrap())?;
    Ok(plan)
}

pub fn plan_from_probe(cfg: &RunConfig, net: &Network, probe: &ProbeResult) -> Result<RankPlan> {
    let alloc_cfg = cfg.alloc_config()?;
    let importances: Vec<f64> = probe
        .layers
        .iter()
        .zip(&probe.grads)
        .map(|(&l, g)| allocate::importance(&net.layers[l].weight, g, alloc_cfg.metric))
        .collect::<Result<_>>()?;
    let advantages = allocate::advantages(&importances)?;
    let layers: Vec<(usize, (usize, usize))> = probe
        .layers
        .iter()
        .map(|&l| (l, net.layers[l].weight.shape()))
        .collect();
    allocate::allocate_ranks(&alloc_cfg, &layers, &importances, &advantages)
}

/// Init stage: consume the probe and plan artifacts, write `adapters.gadp`.
pub fn stage_init(cfg: &RunConfig, out: &Path) -> Result<(AdapterSet, InitReport)> {
    let bench = build_workbench(cfg)?;
    let probe_bytes = read_artifact(out, PROBE_FILE, "init", "probe")?;
    let probe = probe::read_probe(&mut probe_bytes.as_slice())?;
    let plan_bytes = read_artifact(out, PLAN_JSON, "init", "allocate")?;
    let plan: RankPlan = serde_json::from_slice(&plan_bytes)
        .map_err(|e| GoraError::Format(format!("rank plan: {e}")))?;

    let init_cfg = InitConfig { gamma: cfg.adapter.gamma, seed: cfg.seed };
    let (adapters, report) = crate::init::initialize_adapters(
        &bench.net,
        &plan,
        &probe,
        cfg.adapter.alpha,
        cfg.adapter.mode,
        &init_cfg,
        bench.train_batches.first(),
    )?;
    fs::write(out.join(ADAPTER_FILE), adapter::checkpoint_bytes(&adapters))?;
    Ok((adapters, report))
}

/// Train stage: consume `adapters.gadp`, write the loss curve and summary.
pub fn stage_train(cfg: &RunConfig, out: &Path) -> Result<TrainRecord> {
    let bench = build_workbench(cfg)?;
    let bytes = read_artifact(out, ADAPTER_FILE, "train", "init")?;
    let mut adapters = adapter::read_checkpoint(&mut bytes.as_slice())?;
    let record = train(
        &bench.net,
        &mut adapters,
        &bench.train_batches,
        &bench.eval_batch,
        &cfg.optim,
        cfg.train_steps,
        cfg.seed,
    )?;
    fs::write(out.join(TRAIN_CSV), record.to_csv())?;
    let summary = serde_json::json!({
        "label": cfg.label,
        "seed": cfg.seed,
        "steps": record.steps.len(),
        "final_eval": record.final_eval,
        "first_step_loss": record.first_step_loss(),
    });
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary).unwrap())?;
    Ok(record)
}

pub struct PipelineOutcome {
    pub manifest: RunManifest,
    pub adapters: AdapterSet,
    pub record: TrainRecord,
}

/// Full probe -> allocate -> init -> train pipeline with a manifest that
/// pins the resolved config, artifact checksums, and timings.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let bench = build_workbench(cfg)?;
    let topo = WorkerTopology::new(cfg.workers)?;

    let t0 = Instant::now();
    let probe_result = ddp_probe(
        &bench.net,
        &bench.train_batches,
        &topo,
        cfg.adapter.metric,
        &cfg.probe_config(),
    )?;
    let probe_ms = t0.elapsed().as_secs_f64() * 1e3;
    let mut probe_bytes = Vec::new();
    probe::write_probe(&mut probe_bytes, &probe_result)?;
    fs::write(out.join(PROBE_FILE), &probe_bytes)?;

    let init_cfg = InitConfig { gamma: cfg.adapter.gamma, seed: cfg.seed };
    let alloc_cfg = cfg.alloc_config()?;
    let t1 = Instant::now();
    let ddp_out = ddp_allocate_and_init(
        &bench.net,
        &probe_result,
        &topo,
        &alloc_cfg,
        cfg.adapter.alpha,
        cfg.adapter.mode,
        &init_cfg,
        bench.train_batches.first(),
    )?;
    let init_ms = t1.elapsed().as_secs_f64() * 1e3;

    fs::write(out.join(PLAN_TABLE), ddp_out.plan.to_table())?;
    fs::write(
        out.join(PLAN_JSON),
        serde_json::to_string_pretty(&ddp_out.plan).unwrap(),
    )?;
    let adapter_bytes = adapter::checkpoint_bytes(&ddp_out.per_worker[0]);
    fs::write(out.join(ADAPTER_FILE), &adapter_bytes)?;

    let mut adapters = ddp_out.per_worker[0].clone();
    let t2 = Instant::now();
    let record = train(
        &bench.net,
        &mut adapters,
        &bench.train_batches,
        &bench.eval_batch,
        &cfg.optim,
        cfg.train_steps,
        cfg.seed,
    )?;
    let train_ms = t2.elapsed().as_secs_f64() * 1e3;

    let csv = record.to_csv();
    fs::write(out.join(TRAIN_CSV), &csv)?;
    let summary = serde_json::json!({
        "label": cfg.label,
        "seed": cfg.seed,
        "steps": record.steps.len(),
        "final_eval": record.final_eval,
        "first_step_loss": record.first_step_loss(),
    });
    let summary_bytes = serde_json::to_string_pretty(&summary).unwrap();
    fs::write(out.join(SUMMARY_FILE), &summary_bytes)?;

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        label: cfg.label.clone(),
        seed: cfg.seed,
        workers: cfg.workers,
        config: cfg.clone(),
        timings: Timings { probe_ms, init_ms, train_ms },
        rank_plan: ddp_out.plan,
        init_report: ddp_out.report,
        probe_steps_used: probe_result.steps_used,
        host_peak_bytes: probe_result.host_peak_bytes,
        final_eval: record.final_eval,
        artifacts: vec![
            ArtifactRecord::new(PROBE_FILE, &probe_bytes),
            ArtifactRecord::new(ADAPTER_FILE, &adapter_bytes),
            ArtifactRecord::new(TRAIN_CSV, csv.as_bytes()),
            ArtifactRecord::new(SUMMARY_FILE, summary_bytes.as_bytes()),
        ],
    };
    fs::write(
        out.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )?;

    Ok(PipelineOutcome { manifest, adapters, record })
}

/// Convenience for tests and the Python bindings: pipeline into a directory,
/// returning the manifest.
pub fn run_pipeline_from_text(config_text: &str, out: &Path) -> Result<RunManifest> {
    let cfg = crate::config::parse_config(config_text)?;
    Ok(run_pipeline(&cfg, out)?.manifest)
}

/// Checksum helper for reproducibility checks on artifact files.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

pub fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
