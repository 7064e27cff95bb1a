//! Adapter initialization: Kaiming-uniform A0, a pseudo-inverse-compressed
//! B0 solved from the probe gradient, and the scaling that turns the initial
//! adapter product into a gamma-sized gradient step through the projector
//! onto col(A0).
//!
//! With P = A0 (A0^T A0)^-1 A0^T, the unscaled solve gives A0 B0 = -P G.
//! B0 is then multiplied by gamma/s so the merged delta at step zero is
//! exactly -gamma * P * G in either scaling mode. The magnitude-calibration
//! factor xi derived from the variance argument is computed and reported
//! alongside for reference.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterSet, AdapterState, ScalingMode};
use crate::allocate::RankPlan;
use crate::error::{GoraError, Result};
use crate::net::{Batch, Network};
use crate::numerics::{cholesky_solve, derive_seed, Matrix, Rng};
use crate::probe::ProbeResult;
use crate::train::{autotune_gamma, GammaGrid};

/// Gradient-step size for the initialization. `Auto` runs the first-batch
/// line search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaSpec {
    Fixed(f64),
    Auto,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitConfig {
    pub gamma: GammaSpec,
    pub seed: u64,
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if let GammaSpec::Fixed(g) = self.gamma {
            if !(g >= 0.0) || !g.is_finite() {
                return Err(GoraError::Config(format!("gamma must be >= 0, got {g}")));
            }
        }
        Ok(())
    }
}

/// Default gamma by reference rank: higher ranks compress more gradient
/// information, so the step shrinks.
pub fn default_gamma(r_ref: usize) -> f64 {
    if r_ref <= 8 {
        5e-2
    } else if r_ref <= 32 {
        1e-2
    } else {
        5e-3
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerInitReport {
    pub layer: usize,
    pub rank: usize,
    /// Multiplier actually applied to the unscaled B0 (gamma / s).
    pub b_scale: f64,
    /// Variance-argument calibration factor, reported for reference.
    pub xi_formula: f64,
    pub gram_retries: u32,
    pub abs_error: Option<f64>,
    pub rel_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitReport {
    pub per_layer: Vec<LayerInitReport>,
    pub gamma: f64,
    pub wall_ms: f64,
    /// (candidate gamma, first-batch loss) pairs when the line search ran.
    pub autotune_evals: Option<Vec<(f64, f64)>>,
}

/// Kaiming-uniform A0 with fan_in = m.
pub fn init_a(rng: &mut Rng, m: usize, r: usize) -> Matrix {
    assert!(r >= 1, "rank must be at least 1");
    rng.sample_kaiming_uniform(m, r, m)
}

/// Projection coefficients: the X solving (A^T A) X = A^T G, so that A X is
/// the orthogonal projection of G onto col(A).
pub fn projection_coefficients(a: &Matrix, g: &Matrix) -> Result<Matrix> {
    let gram = a.transpose().matmul(a)?;
    let rhs = a.transpose().matmul(g)?;
    cholesky_solve(&gram, &rhs).map_err(|e| match e {
        GoraError::SingularGram(msg) => GoraError::SingularGram(format!(
            "{msg}; adapter basis is rank-deficient, re-seed A0"
        )),
        other => other,
    })
}

/// Pseudo-inverse-compressed initialization: B0 = -(A0^T A0)^-1 A0^T G.
pub fn compress_init_b(a0: &Matrix, g: &Matrix) -> Result<Matrix> {
    Ok(projection_coefficients(a0, g)?.scale(-1.0))
}

/// Magnitude-calibration factor from the variance argument:
/// gamma*sqrt(r*m)/alpha in lora mode, gamma*sqrt(m)/alpha in rslora mode.
pub fn xi(gamma: f64, alpha: f64, m: usize, r: usize, mode: ScalingMode) -> f64 {
    match mode {
        ScalingMode::Lora => gamma * ((r * m) as f64).sqrt() / alpha,
        ScalingMode::RsLora => gamma * (m as f64).sqrt() / alpha,
    }
}

/// Reconstruction diagnostics of a scaled init against the target step
/// -gamma*G: E = s*A0*B0_scaled + gamma*G, absolute = avg|E|,
/// relative = ||E||_F / ||gamma*G||_F.
pub fn reconstruction_error(
    a0: &Matrix,
    b0_scaled: &Matrix,
    g: &Matrix,
    gamma: f64,
    s: f64,
) -> Result<(f64, f64)> {
    if g.frobenius() == 0.0 {
        return Err(GoraError::Degenerate(
            "relative reconstruction error undefined for zero gradient".into(),
        ));
    }
    if gamma == 0.0 {
        return Err(GoraError::Degenerate(
            "relative reconstruction error undefined for gamma = 0".into(),
        ));
    }
    let mut e = a0.matmul(b0_scaled)?.scale(s);
    e.axpy(gamma, g)?;
    let absolute = e.mean_abs();
    let relative = e.frobenius() / (gamma.abs() * g.frobenius());
    Ok((absolute, relative))
}

/// Monte Carlo estimate of E||A (A^T A)^-1 A^T G||_F for standard-normal
/// A (m x r) and G (m x n); the closed form is sqrt(n*r).
pub fn frobenius_expectation_oracle(
    rng: &mut Rng,
    m: usize,
    n: usize,
    r: usize,
    trials: usize,
) -> Result<f64> {
    if trials < 100 {
        return Err(GoraError::Config("need at least 100 trials".into()));
    }
    let mut sum = 0.0;
    for _ in 0..trials {
        let a = rng.sample_gaussian(m, r);
        let g = rng.sample_gaussian(m, n);
        let x = projection_coefficients(&a, &g)?;
        sum += a.matmul(&x)?.frobenius();
    }
    Ok(sum / trials as f64)
}

const GRAM_RETRIES: u32 = 3;

/// Sample A0 for one layer, retrying with a derived seed if the Gram matrix
/// comes out singular (vanishingly unlikely for continuous samples, but the
/// retry count is logged so determinism stays auditable).
fn sample_a0_with_retries(
    seed: u64,
    layer: usize,
    m: usize,
    r: usize,
    g: &Matrix,
) -> Result<(Matrix, Matrix, u32)> {
    let mut last_err = None;
    for attempt in 0..=GRAM_RETRIES {
        let mut rng = Rng::new(derive_seed(seed, "init", (layer as u64) << 8 | attempt as u64));
        let a0 = init_a(&mut rng, m, r);
        match compress_init_b(&a0, g) {
            Ok(b0) => return Ok((a0, b0, attempt)),
            Err(e @ GoraError::SingularGram(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap())
}

/// Initialize adapters for every layer in the rank plan. Layers with rank 0
/// receive no adapter. When gamma is `Auto`, the unscaled inits are built
/// first and the line search on `first_batch` picks the step size.
pub fn initialize_adapters(
    net: &Network,
    plan: &RankPlan,
    probe: &ProbeResult,
    alpha: f64,
    mode: ScalingMode,
    cfg: &InitConfig,
    first_batch: Option<&Batch>,
) -> Result<(AdapterSet, InitReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let weight_hash_before = net.weight_hash();

    // Phase 1: per-layer A0 and unscaled B0.
    let mut adapters = AdapterSet::new();
    let mut raw_b: Vec<(usize, Matrix)> = Vec::new();
    let mut retries: Vec<(usize, u32)> = Vec::new();
    for record in &plan.records {
        if record.rank == 0 {
            continue;
        }
        let g = probe.grad_for(record.layer).ok_or_else(|| {
            GoraError::StageOrder(format!(
                "rank plan targets layer {} but the probe has no gradient for it",
                record.layer
            ))
        })?;
        let (a0, b0, attempts) =
            sample_a0_with_retries(cfg.seed, record.layer, record.m, record.rank, g)?;
        retries.push((record.layer, attempts));
        raw_b.push((record.layer, b0.clone()));
        adapters.insert(record.layer, AdapterState::zero_b(a0, record.n, alpha, mode)?);
    }

    // Phase 2: resolve gamma.
    let (gamma, autotune_evals) = match cfg.gamma {
        GammaSpec::Fixed(g) => (g, None),
        GammaSpec::Auto => {
            let batch = first_batch.ok_or_else(|| {
                GoraError::Config("gamma = auto needs the first training batch".into())
            })?;
            let outcome = autotune_gamma(net, &adapters, &raw_b, batch, &GammaGrid::default())?;
            (outcome.gamma, Some(outcome.evals))
        }
    };

    // Phase 3: scale. B = (gamma/s) * B0 makes the merged delta equal
    // -gamma * P * G; gamma = 0 degenerates to plain zero init, bit-exact.
    for (layer, b0) in &raw_b {
        let ad = adapters.get_mut(layer).unwrap();
        if gamma > 0.0 {
            ad.b = b0.scale(gamma / ad.scale());
        }
    }

    let mut per_layer = Vec::new();
    for record in &plan.records {
        if record.rank == 0 {
            continue;
        }
        let ad = &adapters[&record.layer];
        let g = probe.grad_for(record.layer).unwrap();
        let s = ad.scale();
        let (abs_error, rel_error) = if gamma > 0.0 && g.frobenius() > 0.0 {
            let (a, r) = reconstruction_error(&ad.a, &ad.b, g, gamma, s)?;
            (Some(a), Some(r))
        } else {
            (None, None)
        };
        per_layer.push(LayerInitReport {
            layer: record.layer,
            rank: record.rank,
            b_scale: if gamma > 0.0 { gamma / s } else { 0.0 },
            xi_formula: xi(gamma, alpha, record.m, record.rank, mode),
            gram_retries: retries
                .iter()
                .find(|(l, _)| *l == record.layer)
                .map(|(_, a)| *a)
                .unwrap_or(0),
            abs_error,
            rel_error,
        });
    }

    debug_assert_eq!(net.weight_hash(), weight_hash_before);
    let report = InitReport {
        per_layer,
        gamma,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        autotune_evals,
    };
    Ok((adapters, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_a_bound_and_determinism() {
        let m = 64;
        let a1 = init_a(&mut Rng::new(9), m, 8);
        let a2 = init_a(&mut Rng::new(9), m, 8);
        assert_eq!(a1, a2);
        let bound = 1.0 / (m as f64).sqrt();
        assert!(a1.as_slice().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn kaiming_columns_independent_over_100_seeds() {
        for seed in 0..100 {
            let a = init_a(&mut Rng::new(seed), 64, 8);
            let gram = a.transpose().matmul(&a).unwrap();
            assert!(crate::numerics::cholesky_factor(&gram).is_ok(), "seed {seed}");
        }
    }

    #[test]
    fn compress_hand_projection() {
        let a0 = Matrix::from_rows(&[&[1.0], &[0.0]]);
        let g = Matrix::from_rows(&[&[2.0, 4.0], &[6.0, 8.0]]);
        let b0 = compress_init_b(&a0, &g).unwrap();
        assert_eq!(b0, Matrix::from_rows(&[&[-2.0, -4.0]]));
        let ab = a0.matmul(&b0).unwrap();
        assert_eq!(ab, Matrix::from_rows(&[&[-2.0, -4.0], &[0.0, 0.0]]));
    }

    #[test]
    fn compress_zero_gradient_gives_zero_b() {
        let a0 = init_a(&mut Rng::new(1), 16, 4);
        let b0 = compress_init_b(&a0, &Matrix::zeros(16, 8)).unwrap();
        assert!(b0.frobenius() <= 1e-14);
    }

    #[test]
    fn orthonormal_a_reduces_to_transpose() {
        // columns e_0, e_2 of R^4 are orthonormal
        let mut a0 = Matrix::zeros(4, 2);
        a0[(0, 0)] = 1.0;
        a0[(2, 1)] = 1.0;
        let g = Rng::new(2).sample_gaussian(4, 3);
        let b0 = compress_init_b(&a0, &g).unwrap();
        let expect = a0.transpose().matmul(&g).unwrap().scale(-1.0);
        assert!(b0.sub(&expect).unwrap().frobenius() < 1e-14);
    }

    #[test]
    fn normal_equations_hold() {
        let mut rng = Rng::new(3);
        let a0 = rng.sample_gaussian(32, 4);
        let g = rng.sample_gaussian(32, 16);
        let b0 = compress_init_b(&a0, &g).unwrap();
        // A0^T (-G - A0 B0) = 0 within 1e-10 * ||A0^T G||
        let minus_g = g.scale(-1.0);
        let resid = a0
            .transpose()
            .matmul(&minus_g.sub(&a0.matmul(&b0).unwrap()).unwrap())
            .unwrap();
        let scale = a0.transpose().matmul(&g).unwrap().frobenius();
        assert!(resid.frobenius() <= 1e-10 * scale.max(1.0));
    }

    #[test]
    fn projection_is_optimal_under_perturbations() {
        let mut rng = Rng::new(4);
        let a0 = rng.sample_gaussian(24, 4);
        let g = rng.sample_gaussian(24, 8);
        let coeff = projection_coefficients(&a0, &g).unwrap();
        let base = g.sub(&a0.matmul(&coeff).unwrap()).unwrap().frobenius();
        for k in 0..100 {
            let scale = 10f64.powi(-(k % 6));
            let perturbed = {
                let mut c = coeff.clone();
                c.axpy(scale, &rng.sample_gaussian(4, 8)).unwrap();
                c
            };
            let err = g.sub(&a0.matmul(&perturbed).unwrap()).unwrap().frobenius();
            assert!(err >= base, "perturbation reduced the residual: {err} < {base}");
        }
    }

    #[test]
    fn xi_hand_cases() {
        assert!((xi(0.05, 16.0, 64, 8, ScalingMode::RsLora) - 0.025).abs() < 1e-15);
        assert_eq!(xi(0.0, 16.0, 64, 8, ScalingMode::RsLora), 0.0);
        for r in [1usize, 4, 9, 25] {
            let lora = xi(0.05, 16.0, 64, r, ScalingMode::Lora);
            let rs = xi(0.05, 16.0, 64, r, ScalingMode::RsLora);
            assert!((lora - rs * (r as f64).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn reconstruction_zero_when_gradient_in_column_space() {
        let mut rng = Rng::new(5);
        let a0 = rng.sample_gaussian(16, 4);
        let c = rng.sample_gaussian(4, 8);
        let g = a0.matmul(&c).unwrap();
        let gamma = 0.05;
        let mode = ScalingMode::RsLora;
        let s = mode.scale(16.0, 4);
        let b0 = compress_init_b(&a0, &g).unwrap().scale(gamma / s);
        let (_, rel) = reconstruction_error(&a0, &b0, &g, gamma, s).unwrap();
        assert!(rel < 1e-10, "relative error {rel}");
    }

    #[test]
    fn reconstruction_errors_on_zero_gradient() {
        let a0 = init_a(&mut Rng::new(6), 8, 2);
        let b0 = Matrix::zeros(2, 4);
        assert!(reconstruction_error(&a0, &b0, &Matrix::zeros(8, 4), 0.1, 1.0).is_err());
    }

    #[test]
    fn projector_is_idempotent_symmetric_with_trace_r() {
        let mut rng = Rng::new(7);
        let (m, r) = (64, 8);
        let a0 = init_a(&mut rng, m, r);
        let x = projection_coefficients(&a0, &Matrix::identity(m)).unwrap();
        let p = a0.matmul(&x).unwrap();
        let pp = p.matmul(&p).unwrap();
        assert!(pp.sub(&p).unwrap().frobenius() <= 1e-9);
        assert!(p.transpose().sub(&p).unwrap().frobenius() <= 1e-9);
        assert!((p.trace() - r as f64).abs() <= 1e-8);
    }

    #[test]
    fn expectation_oracle_full_projection() {
        // r = m: A is square invertible, P = I, norm is exactly ||G||
        let mut rng = Rng::new(8);
        let (m, n) = (8, 8);
        let got = frobenius_expectation_oracle(&mut rng, m, n, m, 200).unwrap();
        let expect = ((m * n) as f64).sqrt();
        assert!((got - expect).abs() < 0.05 * expect, "{got} vs {expect}");
    }

    #[test]
    fn expectation_oracle_rank_one() {
        let mut rng = Rng::new(9);
        let n = 64;
        let got = frobenius_expectation_oracle(&mut rng, 64, n, 1, 1000).unwrap();
        let expect = (n as f64).sqrt();
        assert!((got - expect).abs() < 0.05 * expect, "{got} vs {expect}");
    }
}
