//! Run configuration: a flat `key.path = value` text format with `#`
//! comments, plus the resolved structures every stage consumes. "auto"
//! sentinels select the adaptive probe length and the gamma line search.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::ScalingMode;
use crate::allocate::{AllocConfig, ImportanceMetric};
use crate::error::{GoraError, Result};
use crate::init::{default_gamma, GammaSpec};
use crate::net::Activation;
use crate::train::{Algorithm, Decay, OptimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Teacher,
    Cluster,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    /// Teacher: input dim m. Cluster: input dim.
    pub m: usize,
    /// Teacher: output dim n. Cluster: class count.
    pub n: usize,
    pub r_true: usize,
    pub noise_std: f64,
    pub separation: f64,
    pub samples: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Hidden widths for the cluster family; the teacher family is a single
    /// linear layer and ignores this.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub bias: bool,
    /// Layer indices to adapt; empty means all.
    pub adapt: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub mode: ScalingMode,
    pub alpha: f64,
    pub r_ref: usize,
    pub r_min: Option<usize>,
    pub r_max: Option<usize>,
    pub metric: ImportanceMetric,
    pub gamma: GammaSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSpec {
    /// None means adaptive ("auto").
    pub steps: Option<usize>,
    pub max_steps: usize,
    pub threshold: f64,
    pub offload: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub label: String,
    pub seed: u64,
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub adapter: AdapterSpec,
    pub probe: ProbeSpec,
    pub optim: OptimConfig,
    pub train_steps: usize,
    pub workers: usize,
}

impl RunConfig {
    pub fn alloc_config(&self) -> Result<AllocConfig> {
        AllocConfig::new(
            self.adapter.r_ref,
            self.adapter.r_min.unwrap_or(self.adapter.r_ref / 2),
            self.adapter.r_max.unwrap_or(4 * self.adapter.r_ref),
            self.adapter.metric,
        )
    }

    pub fn probe_config(&self) -> crate::probe::ProbeConfig {
        crate::probe::ProbeConfig {
            max_steps: self.probe.steps.unwrap_or(self.probe.max_steps),
            adaptive: self.probe.steps.is_none(),
            convergence_threshold: self.probe.threshold,
            offload: self.probe.offload,
            trace_source: crate::probe::TraceSource::RunningMean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.alloc_config()?;
        self.optim.validate()?;
        self.probe_config().validate()?;
        if self.workers == 0 {
            return Err(GoraError::Config("topology.workers must be at least 1".into()));
        }
        if self.task.batch_size == 0 {
            return Err(GoraError::Config("task.batch_size must be at least 1".into()));
        }
        if self.task.samples < self.task.batch_size {
            return Err(GoraError::Config("task.samples must cover one batch".into()));
        }
        if let GammaSpec::Fixed(g) = self.adapter.gamma {
            if !(g >= 0.0) {
                return Err(GoraError::Config(format!("adapter.gamma must be >= 0, got {g}")));
            }
        }
        match self.task.family {
            TaskFamily::Teacher => {
                if self.task.r_true > self.task.m.min(self.task.n) {
                    return Err(GoraError::Config(
                        "task.r_true exceeds min(task.m, task.n)".into(),
                    ));
                }
            }
            TaskFamily::Cluster => {
                if self.task.n < 2 {
                    return Err(GoraError::Config(
                        "cluster family needs task.n >= 2 classes".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn parse_keyed(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            GoraError::Config(format!("line {}: expected `key.path = value`", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(GoraError::Config(format!(
                "line {}: empty key or value",
                lineno + 1
            )));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(GoraError::Config(format!("duplicate key `{key}`")));
        }
    }
    Ok(map)
}

struct Fields {
    map: BTreeMap<String, String>,
}

impl Fields {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| GoraError::Config(format!("field `{key}`: cannot parse `{v}`"))),
        }
    }

    fn require<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self
            .take(key)
            .ok_or_else(|| GoraError::Config(format!("missing required field `{key}`")))?;
        v.parse()
            .map_err(|_| GoraError::Config(format!("field `{key}`: cannot parse `{v}`")))
    }
}

fn parse_enum<T>(key: &str, value: &str, table: &[(&str, T)]) -> Result<T>
where
    T: Copy,
{
    for (name, v) in table {
        if *name == value {
            return Ok(*v);
        }
    }
    let options: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
    Err(GoraError::Config(format!(
        "field `{key}`: `{value}` is not one of {options:?}"
    )))
}

/// Parse the flat text format into a validated RunConfig.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut f = Fields { map: parse_keyed(text)? };

    let family = parse_enum(
        "task.family",
        &f.take("task.family").unwrap_or_else(|| "teacher".into()),
        &[("teacher", TaskFamily::Teacher), ("cluster", TaskFamily::Cluster)],
    )?;

    let task = TaskSpec {
        family,
        m: f.require("task.m")?,
        n: f.require("task.n")?,
        r_true: f.parse("task.r_true", 0)?,
        noise_std: f.parse("task.noise_std", 0.0)?,
        separation: f.parse("task.separation", 6.0)?,
        samples: f.require("task.samples")?,
        batch_size: f.parse("task.batch_size", 32)?,
    };

    let hidden = match f.take("model.hidden") {
        None => Vec::new(),
        Some(v) => v
            .split(',')
            .map(|p| {
                p.trim().parse::<usize>().map_err(|_| {
                    GoraError::Config(format!("field `model.hidden`: cannot parse `{p}`"))
                })
            })
            .collect::<Result<_>>()?,
    };
    let activation = parse_enum(
        "model.activation",
        &f.take("model.activation").unwrap_or_else(|| "tanh".into()),
        &[
            ("linear", Activation::Linear),
            ("relu", Activation::Relu),
            ("tanh", Activation::Tanh),
        ],
    )?;
    let adapt = match f.take("model.adapt") {
        None => Vec::new(),
        Some(v) if v == "all" => Vec::new(),
        Some(v) => v
            .split(',')
            .map(|p| {
                p.trim().parse::<usize>().map_err(|_| {
                    GoraError::Config(format!("field `model.adapt`: cannot parse `{p}`"))
                })
            })
            .collect::<Result<_>>()?,
    };
    let model = ModelSpec {
        hidden,
        activation,
        bias: f.parse("model.bias", false)?,
        adapt,
    };

    let r_ref = f.parse("adapter.r_ref", 8usize)?;
    let gamma = match f.take("adapter.gamma") {
        None => GammaSpec::Fixed(default_gamma(r_ref)),
        Some(v) if v == "auto" => GammaSpec::Auto,
        Some(v) => GammaSpec::Fixed(v.parse().map_err(|_| {
            GoraError::Config(format!("field `adapter.gamma`: cannot parse `{v}`"))
        })?),
    };
    let opt_rank = |f: &mut Fields, key: &str| -> Result<Option<usize>> {
        match f.take(key) {
            None => Ok(None),
            Some(v) if v == "auto" => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| GoraError::Config(format!("field `{key}`: cannot parse `{v}`"))),
        }
    };
    let adapter = AdapterSpec {
        mode: parse_enum(
            "adapter.mode",
            &f.take("adapter.mode").unwrap_or_else(|| "rslora".into()),
            &[("lora", ScalingMode::Lora), ("rslora", ScalingMode::RsLora)],
        )?,
        alpha: f.parse("adapter.alpha", 16.0)?,
        r_ref,
        r_min: opt_rank(&mut f, "adapter.r_min")?,
        r_max: opt_rank(&mut f, "adapter.r_max")?,
        metric: parse_enum(
            "adapter.metric",
            &f.take("adapter.metric").unwrap_or_else(|| "sensitivity".into()),
            &[
                ("sensitivity", ImportanceMetric::Sensitivity),
                ("nuclear_grad", ImportanceMetric::NuclearGrad),
                ("nuclear_prod", ImportanceMetric::NuclearProd),
            ],
        )?,
        gamma,
    };

    let probe_steps = match f.take("probe.steps") {
        None => Some(64),
        Some(v) if v == "auto" => None,
        Some(v) => Some(v.parse().map_err(|_| {
            GoraError::Config(format!("field `probe.steps`: cannot parse `{v}`"))
        })?),
    };
    let probe = ProbeSpec {
        steps: probe_steps,
        max_steps: f.parse("probe.max_steps", 64usize)?,
        threshold: f.parse("probe.threshold", 0.01)?,
        offload: f.parse("probe.offload", true)?,
    };

    let betas = match f.take("optim.betas") {
        None => (0.9, 0.999),
        Some(v) => {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(GoraError::Config(
                    "field `optim.betas`: expected two comma-separated values".into(),
                ));
            }
            let b1 = parts[0].parse().map_err(|_| {
                GoraError::Config(format!("field `optim.betas`: cannot parse `{}`", parts[0]))
            })?;
            let b2 = parts[1].parse().map_err(|_| {
                GoraError::Config(format!("field `optim.betas`: cannot parse `{}`", parts[1]))
            })?;
            (b1, b2)
        }
    };
    let optim = OptimConfig {
        algorithm: parse_enum(
            "optim.algorithm",
            &f.take("optim.algorithm").unwrap_or_else(|| "adamw".into()),
            &[("sgd", Algorithm::Sgd), ("adamw", Algorithm::AdamW)],
        )?,
        lr: f.parse("optim.lr", 1e-3)?,
        betas,
        weight_decay: f.parse("optim.weight_decay", 0.0)?,
        eps: f.parse("optim.eps", 1e-8)?,
        b_lr_ratio: f.parse("optim.b_lr_ratio", 16.0)?,
        warmup_ratio: f.parse("optim.warmup_ratio", 0.03)?,
        decay: parse_enum(
            "optim.decay",
            &f.take("optim.decay").unwrap_or_else(|| "cosine".into()),
            &[("none", Decay::None), ("cosine", Decay::Cosine)],
        )?,
        min_lr_ratio: f.parse("optim.min_lr_ratio", 0.0)?,
    };

    let config = RunConfig {
        label: f.take("run.label").unwrap_or_else(|| "run".into()),
        seed: f.parse("run.seed", 42u64)?,
        task,
        model,
        adapter,
        probe,
        optim,
        train_steps: f.parse("train.steps", 200usize)?,
        workers: f.parse("topology.workers", 1usize)?,
    };

    if let Some(unknown) = f.map.keys().next() {
        return Err(GoraError::Config(format!("unknown field `{unknown}`")));
    }
    config.validate()?;
    Ok(config)
}
