//! Optimizers, the warmup/cosine schedule, the adapter training loop, and
//! the first-batch line search for the init step size.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterSet;
use crate::error::{GoraError, Result};
use crate::net::{Batch, EvalMetrics, Network};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    None,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    /// B matrices train with this multiple of A's learning rate.
    pub b_lr_ratio: f64,
    pub warmup_ratio: f64,
    pub decay: Decay,
    pub min_lr_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            algorithm: Algorithm::AdamW,
            lr: 1e-3,
            betas: (0.9, 0.999),
            weight_decay: 0.0,
            eps: 1e-8,
            b_lr_ratio: 16.0,
            warmup_ratio: 0.03,
            decay: Decay::Cosine,
            min_lr_ratio: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(GoraError::Config("learning rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.betas.0), ("beta2", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return Err(GoraError::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(GoraError::Config("weight decay must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(GoraError::Config("warmup ratio must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Scheduled learning rate at `step` of `total_steps`: linear warmup from
/// zero over warmup_ratio * total steps, then either flat or cosine down to
/// min_lr_ratio * peak. Continuous at the junction.
pub fn lr_at(step: usize, total_steps: usize, cfg: &OptimConfig) -> f64 {
    let total = total_steps as f64;
    let warmup = cfg.warmup_ratio * total;
    let s = step as f64;
    if warmup > 0.0 && s < warmup {
        return cfg.lr * s / warmup;
    }
    match cfg.decay {
        Decay::None => cfg.lr,
        Decay::Cosine => {
            let span = (total - warmup).max(1.0);
            let progress = ((s - warmup) / span).clamp(0.0, 1.0);
            let floor = cfg.min_lr_ratio * cfg.lr;
            floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Matrix,
    v: Matrix,
}

impl Moments {
    fn like(p: &Matrix) -> Self {
        Moments { m: Matrix::zeros(p.rows(), p.cols()), v: Matrix::zeros(p.rows(), p.cols()) }
    }
}

/// Optimizer over adapter parameters only; base weights and non-adapted
/// layers are never touched.
pub struct Optimizer {
    cfg: OptimConfig,
    /// Step count for bias correction, starting at 1 on the first step.
    t: u64,
    state: BTreeMap<usize, (Moments, Moments)>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer { cfg, t: 0, state: BTreeMap::new() })
    }

    /// One update from per-layer effective-weight gradients. `lr` is the
    /// scheduled rate for A; B uses lr * b_lr_ratio.
    pub fn step(
        &mut self,
        adapters: &mut AdapterSet,
        weight_grads: &BTreeMap<usize, Matrix>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        for (&layer, ad) in adapters.iter_mut() {
            let g = match weight_grads.get(&layer) {
                Some(g) => g,
                None => continue,
            };
            if !g.is_finite() {
                return Err(GoraError::NonFinite(format!(
                    "weight gradient of layer {layer} at optimizer step {}",
                    self.t
                )));
            }
            let (ga, gb) = ad.grads(g)?;
            let lr_b = lr * self.cfg.b_lr_ratio;
            match self.cfg.algorithm {
                Algorithm::Sgd => {
                    if !ad.freeze_a {
                        sgd_update(&mut ad.a, &ga, lr, self.cfg.weight_decay);
                    }
                    sgd_update(&mut ad.b, &gb, lr_b, self.cfg.weight_decay);
                }
                Algorithm::AdamW => {
                    let entry = self
                        .state
                        .entry(layer)
                        .or_insert_with(|| (Moments::like(&ad.a), Moments::like(&ad.b)));
                    if !ad.freeze_a {
                        adamw_update(&mut ad.a, &ga, &mut entry.0, lr, self.t, &self.cfg);
                    }
                    adamw_update(&mut ad.b, &gb, &mut entry.1, lr_b, self.t, &self.cfg);
                }
            }
        }
        Ok(())
    }
}

fn sgd_update(p: &mut Matrix, g: &Matrix, lr: f64, wd: f64) {
    for (pv, gv) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *pv -= lr * (gv + wd * *pv);
    }
}

fn adamw_update(p: &mut Matrix, g: &Matrix, mom: &mut Moments, lr: f64, t: u64, cfg: &OptimConfig) {
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for i in 0..p.as_slice().len() {
        let gv = g.as_slice()[i];
        let m = &mut mom.m.as_mut_slice()[i];
        *m = b1 * *m + (1.0 - b1) * gv;
        let v = &mut mom.v.as_mut_slice()[i];
        *v = b2 * *v + (1.0 - b2) * gv * gv;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        let pv = &mut p.as_mut_slice()[i];
        // decoupled weight decay
        *pv -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *pv);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub steps: Vec<StepRecord>,
    pub final_eval: EvalMetrics,
    pub seed: u64,
}

impl TrainRecord {
    pub fn first_step_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,lr\n");
        for s in &self.steps {
            out.push_str(&format!("{},{:.17e},{:.17e}\n", s.step, s.loss, s.lr));
        }
        out
    }
}

/// Train the adapters over `steps` mini-batch updates, cycling through
/// `batches`. Base weights stay frozen; every recorded loss is the batch
/// loss at the parameters before that step's update.
pub fn train(
    net: &Network,
    adapters: &mut AdapterSet,
    batches: &[Batch],
    eval_batch: &Batch,
    cfg: &OptimConfig,
    steps: usize,
    seed: u64,
) -> Result<TrainRecord> {
    if batches.is_empty() {
        return Err(GoraError::Config("no training batches".into()));
    }
    let mut optimizer = Optimizer::new(cfg.clone())?;
    let weight_hash_before = net.weight_hash();
    let mut records = Vec::with_capacity(steps);

    for step in 0..steps {
        let batch = &batches[step % batches.len()];
        let (loss, grads) = net.forward_backward(adapters, batch)?;
        if !loss.is_finite() {
            return Err(GoraError::NonFinite(format!("loss at step {step}")));
        }
        let lr = lr_at(step, steps, cfg);
        let grad_map: BTreeMap<usize, Matrix> = adapters
            .keys()
            .map(|&l| (l, grads[l].clone()))
            .collect();
        optimizer.step(adapters, &grad_map, lr)?;
        debug_assert_eq!(net.weight_hash(), weight_hash_before);
        records.push(StepRecord { step, loss, lr });
    }

    let final_eval = net.evaluate(adapters, eval_batch)?;
    Ok(TrainRecord { steps: records, final_eval, seed })
}

/// Candidate grid for the init step size: start, start*decay, ... the first
/// candidate at or below the floor is included and generation stops there.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaGrid {
    pub start: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for GammaGrid {
    fn default() -> Self {
        GammaGrid { start: 1.0, decay: 0.9, floor: 5e-5 }
    }
}

impl GammaGrid {
    pub fn candidates(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut g = self.start;
        loop {
            out.push(g);
            if g < self.floor {
                break;
            }
            g *= self.decay;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct AutotuneOutcome {
    pub gamma: f64,
    /// Every evaluated (gamma, first-batch loss) pair, in grid order.
    pub evals: Vec<(f64, f64)>,
    pub skipped: usize,
}

/// First-batch line search for gamma. `adapters` hold A0 with any B;
/// `raw_b` holds the unscaled pseudo-inverse solves per layer. Each
/// candidate is evaluated forward-only with B = (gamma/s) * B0. Ties prefer
/// the larger gamma.
pub fn autotune_gamma(
    net: &Network,
    adapters: &AdapterSet,
    raw_b: &[(usize, Matrix)],
    first_batch: &Batch,
    grid: &GammaGrid,
) -> Result<AutotuneOutcome> {
    let mut scratch = adapters.clone();
    let mut best: Option<(f64, f64)> = None;
    let mut evals = Vec::new();
    let mut skipped = 0usize;

    for gamma in grid.candidates() {
        for (layer, b0) in raw_b {
            let ad = scratch.get_mut(layer).ok_or_else(|| {
                GoraError::Config(format!("no adapter for layer {layer} in autotune"))
            })?;
            ad.b = b0.scale(gamma / ad.scale());
        }
        match net.forward_loss(&scratch, first_batch) {
            Ok(loss) => {
                evals.push((gamma, loss));
                // strict <: the first (largest) gamma wins ties
                if best.map_or(true, |(_, bl)| loss < bl) {
                    best = Some((gamma, loss));
                }
            }
            Err(GoraError::NonFinite(_)) => {
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }

    let (gamma, _) = best.ok_or_else(|| {
        GoraError::Degenerate("every gamma candidate produced a non-finite loss".into())
    })?;
    Ok(AutotuneOutcome { gamma, evals, skipped })
}
