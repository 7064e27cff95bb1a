//! Verification suites runnable from the CLI: numerical oracles for the
//! projection optimality and expected-norm results, and the bit-equality
//! check of the data-parallel probe.

use serde::{Deserialize, Serialize};

use crate::adapter::{checkpoint_bytes, ScalingMode};
use crate::allocate::{AllocConfig, ImportanceMetric};
use crate::ddp::{ddp_allocate_and_init, ddp_probe, WorkerTopology};
use crate::error::{GoraError, Result};
use crate::init::{
    compress_init_b, frobenius_expectation_oracle, projection_coefficients, GammaSpec, InitConfig,
};
use crate::net::{Activation, Batch, Layer, LayerSpec, Loss, Network, Targets};
use crate::numerics::{Matrix, Rng};
use crate::probe::ProbeConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyRow {
    pub suite: String,
    pub case: String,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

impl VerifyRow {
    fn new(suite: &str, case: &str, measured: f64, bound: f64, pass: bool) -> Self {
        VerifyRow {
            suite: suite.to_string(),
            case: case.to_string(),
            measured,
            bound,
            pass,
        }
    }

    pub fn csv_header() -> &'static str {
        "suite,case,measured,bound,pass"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6e},{:.6e},{}",
            self.suite, self.case, self.measured, self.bound, self.pass
        )
    }
}

/// Projection optimality: for random (A0, G) pairs the normal-equation
/// residual vanishes and no perturbation of the solve lowers the error.
pub fn suite_projection(seed: u64) -> Result<Vec<VerifyRow>> {
    let mut rng = Rng::new(seed);
    let (m, r, n) = (64, 8, 64);
    let pairs = 200;
    let mut worst_residual = 0.0f64;
    let mut violations = 0usize;

    for _ in 0..pairs {
        let a0 = rng.sample_gaussian(m, r);
        let g = rng.sample_gaussian(m, n);
        let b_hat = compress_init_b(&a0, &g)?;
        // residual of A0^T (G - A0 * (-B)) relative to ||A0^T G||
        let proj = a0.matmul(&b_hat)?.scale(-1.0);
        let resid = a0.transpose().matmul(&g.sub(&proj)?)?.frobenius();
        let scale = a0.transpose().matmul(&g)?.frobenius().max(1.0);
        worst_residual = worst_residual.max(resid / scale);

        let base = g.sub(&proj)?.frobenius();
        for k in 0..100 {
            let eps = 10f64.powi(-(k % 5));
            let mut perturbed = b_hat.scale(-1.0);
            perturbed.axpy(eps, &rng.sample_gaussian(r, n))?;
            let err = g.sub(&a0.matmul(&perturbed)?)?.frobenius();
            if err < base {
                violations += 1;
            }
        }
    }

    Ok(vec![
        VerifyRow::new(
            "projection",
            "normal_equation_residual_max",
            worst_residual,
            1e-10,
            worst_residual <= 1e-10,
        ),
        VerifyRow::new(
            "projection",
            "perturbation_violations",
            violations as f64,
            0.0,
            violations == 0,
        ),
    ])
}

/// Expected norm of the projected gradient: Monte Carlo against sqrt(n*r),
/// plus the projector trace.
pub fn suite_frobenius(seed: u64) -> Result<Vec<VerifyRow>> {
    let mut rng = Rng::new(seed);
    let (m, n, r) = (64, 64, 8);
    let mean = frobenius_expectation_oracle(&mut rng, m, n, r, 500)?;
    let expect = ((n * r) as f64).sqrt();
    let rel = (mean - expect).abs() / expect;

    let a = rng.sample_gaussian(m, r);
    let x = projection_coefficients(&a, &Matrix::identity(m))?;
    let p = a.matmul(&x)?;
    let trace_err = (p.trace() - r as f64).abs();

    Ok(vec![
        VerifyRow::new("frobenius", "monte_carlo_mean_rel_dev", rel, 0.02, rel <= 0.02),
        VerifyRow::new("frobenius", "projector_trace_abs_dev", trace_err, 1e-6, trace_err <= 1e-6),
    ])
}

fn verify_net_and_stream(seed: u64) -> Result<(Network, Vec<Batch>)> {
    let mut rng = Rng::new(seed);
    let net = Network::new(
        vec![
            Layer {
                spec: LayerSpec { in_dim: 12, out_dim: 16, activation: Activation::Tanh, adapt: true },
                weight: rng.sample_gaussian(12, 16).scale(0.3),
                bias: None,
            },
            Layer {
                spec: LayerSpec { in_dim: 16, out_dim: 8, activation: Activation::Linear, adapt: true },
                weight: rng.sample_gaussian(16, 8).scale(0.3),
                bias: None,
            },
        ],
        Loss::Mse,
    )?;
    let stream = (0..16)
        .map(|_| Batch {
            inputs: rng.sample_gaussian(8, 12),
            targets: Targets::Regression(rng.sample_gaussian(8, 8)),
        })
        .collect();
    Ok((net, stream))
}

/// Bit-equality of probe gradients, plans, and initialized adapters across
/// world sizes 1, 2, 4 on the same global stream.
pub fn suite_ddp(seed: u64) -> Result<Vec<VerifyRow>> {
    let (net, stream) = verify_net_and_stream(seed)?;
    let cfg = ProbeConfig { max_steps: 16, ..ProbeConfig::default() };
    let alloc_cfg = AllocConfig::from_r_ref(4, ImportanceMetric::Sensitivity)?;
    let init_cfg = InitConfig { gamma: GammaSpec::Fixed(0.05), seed };

    let mut rows = Vec::new();
    let mut reference: Option<(Vec<u64>, Vec<u8>, usize)> = None;
    for w in [1usize, 2, 4] {
        let topo = WorkerTopology::new(w)?;
        let probe = ddp_probe(&net, &stream, &topo, ImportanceMetric::Sensitivity, &cfg)?;
        let out = ddp_allocate_and_init(
            &net,
            &probe,
            &topo,
            &alloc_cfg,
            16.0,
            ScalingMode::RsLora,
            &init_cfg,
            None,
        )?;
        let grad_bits: Vec<u64> = probe.grads.iter().map(|g| g.bit_hash()).collect();
        let adapter_bytes = checkpoint_bytes(&out.per_worker[0]);
        match &reference {
            None => reference = Some((grad_bits, adapter_bytes, probe.host_peak_bytes)),
            Some((g0, a0, peak0)) => {
                let equal = *g0 == grad_bits && *a0 == adapter_bytes;
                rows.push(VerifyRow::new(
                    "ddp",
                    &format!("bit_equality_w{w}"),
                    if equal { 0.0 } else { 1.0 },
                    0.0,
                    equal,
                ));
                rows.push(VerifyRow::new(
                    "ddp",
                    &format!("host_peak_bytes_w{w}"),
                    probe.host_peak_bytes as f64,
                    *peak0 as f64,
                    probe.host_peak_bytes == *peak0,
                ));
            }
        }
    }
    Ok(rows)
}

/// Run a named suite; "all" concatenates every suite.
pub fn run_suite(name: &str, seed: u64) -> Result<Vec<VerifyRow>> {
    match name {
        "projection" => suite_projection(seed),
        "frobenius" => suite_frobenius(seed),
        "ddp" => suite_ddp(seed),
        "all" => {
            let mut rows = suite_projection(seed)?;
            rows.extend(suite_frobenius(seed)?);
            rows.extend(suite_ddp(seed)?);
            Ok(rows)
        }
        other => Err(GoraError::Config(format!(
            "unknown suite `{other}`; available: projection, frobenius, ddp, all"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_suite_passes() {
        let rows = suite_projection(17).unwrap();
        assert!(rows.iter().all(|r| r.pass), "{rows:?}");
    }

    #[test]
    fn frobenius_suite_passes() {
        let rows = suite_frobenius(18).unwrap();
        assert!(rows.iter().all(|r| r.pass), "{rows:?}");
    }

    #[test]
    fn ddp_suite_passes() {
        let rows = suite_ddp(19).unwrap();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r.pass), "{rows:?}");
    }

    #[test]
    fn unknown_suite_is_a_config_error() {
        assert!(matches!(run_suite("nope", 1), Err(GoraError::Config(_))));
    }
}
