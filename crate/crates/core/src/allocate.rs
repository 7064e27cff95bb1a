//! Rank allocation: importance metrics, normalized advantages, the smoothed
//! parameter budget, and clipped integer ranks.

use serde::{Deserialize, Serialize};

use crate::error::{GoraError, Result};
use crate::numerics::{nuclear_norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMetric {
    /// avg|W ⊙ G|, the sensitivity score.
    Sensitivity,
    /// Nuclear norm of the gradient.
    NuclearGrad,
    /// Nuclear norm of W ⊙ G.
    NuclearProd,
}

/// Importance of one weight matrix under the selected metric.
pub fn importance(w: &Matrix, g: &Matrix, metric: ImportanceMetric) -> Result<f64> {
    match metric {
        ImportanceMetric::Sensitivity => w.hadamard_abs_avg(g),
        ImportanceMetric::NuclearGrad => {
            if w.shape() != g.shape() {
                return Err(GoraError::ShapeMismatch {
                    op: "importance",
                    left: w.shape(),
                    right: g.shape(),
                });
            }
            nuclear_norm(g)
        }
        ImportanceMetric::NuclearProd => nuclear_norm(&w.hadamard(g)?),
    }
}

/// Normalize an importance set into advantages that sum to one.
/// An all-zero set means the probe carried no signal; that is an error, not
/// a silent uniform fallback.
pub fn advantages(importances: &[f64]) -> Result<Vec<f64>> {
    if importances.is_empty() {
        return Err(GoraError::Degenerate("empty importance set".into()));
    }
    if importances.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(GoraError::NonFinite("importance score".into()));
    }
    let sum: f64 = importances.iter().sum();
    if sum <= 0.0 {
        return Err(GoraError::Degenerate(
            "uninformative probe: all importance scores are zero".into(),
        ));
    }
    Ok(importances.iter().map(|v| v / sum).collect())
}

/// Smoothed total parameter budget: sum of sqrt(m+n) * r_ref over layers.
pub fn total_budget(layers: &[(usize, usize)], r_ref: usize) -> f64 {
    layers
        .iter()
        .map(|&(m, n)| ((m + n) as f64).sqrt() * r_ref as f64)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocConfig {
    pub r_ref: usize,
    pub r_min: usize,
    pub r_max: usize,
    pub metric: ImportanceMetric,
    /// Additionally cap each rank at min(m, n). Off by default: ranks above
    /// min(m, n) are wasteful but well-defined, and the budget arithmetic
    /// treats them at face value.
    pub cap_to_min_dim: bool,
}

impl AllocConfig {
    pub fn new(r_ref: usize, r_min: usize, r_max: usize, metric: ImportanceMetric) -> Result<Self> {
        let cfg = AllocConfig { r_ref, r_min, r_max, metric, cap_to_min_dim: false };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults from the reference rank: r_min = r_ref/2, r_max = 4*r_ref.
    pub fn from_r_ref(r_ref: usize, metric: ImportanceMetric) -> Result<Self> {
        Self::new(r_ref, r_ref / 2, 4 * r_ref, metric)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_ref == 0 {
            return Err(GoraError::Config("r_ref must be at least 1".into()));
        }
        if !(self.r_min <= self.r_ref && self.r_ref <= self.r_max) {
            return Err(GoraError::Config(format!(
                "rank bounds must satisfy r_min <= r_ref <= r_max, got {} <= {} <= {}",
                self.r_min, self.r_ref, self.r_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub layer: usize,
    pub m: usize,
    pub n: usize,
    pub importance: f64,
    pub advantage: f64,
    /// Real-valued budget share b * a.
    pub budget_share: f64,
    pub rank: usize,
}

impl RankRecord {
    pub fn allocated_params(&self) -> usize {
        self.rank * (self.m + self.n)
    }
}

/// Per-layer allocation plus the config it was computed under. Totals are
/// recomputed from the records, never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub records: Vec<RankRecord>,
    pub config: AllocConfig,
}

impl RankPlan {
    pub fn total_budget(&self) -> f64 {
        self.records
            .iter()
            .map(|r| ((r.m + r.n) as f64).sqrt() * self.config.r_ref as f64)
            .sum()
    }

    pub fn allocated_params(&self) -> usize {
        self.records.iter().map(|r| r.allocated_params()).sum()
    }

    /// Trainable parameter count of plain rank-r_ref adapters on the same
    /// layers.
    pub fn lora_equivalent_params(&self) -> usize {
        self.records
            .iter()
            .map(|r| self.config.r_ref * (r.m + r.n))
            .sum()
    }

    /// Signed relative deviation of allocated params from the rank-r_ref
    /// equivalent.
    pub fn budget_deviation(&self) -> f64 {
        let lora = self.lora_equivalent_params() as f64;
        (self.allocated_params() as f64 - lora) / lora
    }

    pub fn rank_for(&self, layer: usize) -> Option<usize> {
        self.records.iter().find(|r| r.layer == layer).map(|r| r.rank)
    }

    /// Human-readable table (layer, m, n, I, a, p, r) with totals footer.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>5} {:>6} {:>6} {:>14} {:>10} {:>12} {:>5}\n",
            "layer", "m", "n", "importance", "advantage", "budget", "rank"
        ));
        for r in &self.records {
            out.push_str(&format!(
                "{:>5} {:>6} {:>6} {:>14.6e} {:>10.6} {:>12.4} {:>5}\n",
                r.layer, r.m, r.n, r.importance, r.advantage, r.budget_share, r.rank
            ));
        }
        out.push_str(&format!(
            "total budget {:.4}, allocated params {}, rank-{} equivalent {}, deviation {:+.2}%\n",
            self.total_budget(),
            self.allocated_params(),
            self.config.r_ref,
            self.lora_equivalent_params(),
            100.0 * self.budget_deviation()
        ));
        out
    }
}

/// Round half away from zero; documented tie rule for the rank formula.
fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Turn advantages into clipped integer ranks:
/// r_i = clip(round(b * a_i / sqrt(m_i + n_i)), r_min, r_max).
///
/// `layers` pairs each (layer index, (m, n)) with the advantage at the same
/// position. With `cap_to_min_dim` the upper clip becomes
/// min(r_max, min(m, n)).
pub fn allocate_ranks(
    cfg: &AllocConfig,
    layers: &[(usize, (usize, usize))],
    importances: &[f64],
    advantages: &[f64],
) -> Result<RankPlan> {
    cfg.validate()?;
    if layers.len() != advantages.len() || layers.len() != importances.len() {
        return Err(GoraError::Config(format!(
            "layers/importances/advantages length mismatch: {} vs {} vs {}",
            layers.len(),
            importances.len(),
            advantages.len()
        )));
    }
    let sum: f64 = advantages.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(GoraError::Config(format!(
            "advantages must be normalized, sum is {sum}"
        )));
    }

    let shapes: Vec<(usize, usize)> = layers.iter().map(|&(_, s)| s).collect();
    let budget = total_budget(&shapes, cfg.r_ref);

    let records = layers
        .iter()
        .zip(importances)
        .zip(advantages)
        .map(|((&(layer, (m, n)), &imp), &adv)| {
            let share = budget * adv;
            let raw = round_half_away(share / ((m + n) as f64).sqrt());
            let mut upper = cfg.r_max;
            if cfg.cap_to_min_dim {
                upper = upper.min(m.min(n));
            }
            let rank = (raw.max(0.0) as usize).clamp(cfg.r_min.min(upper), upper);
            RankRecord { layer, m, n, importance: imp, advantage: adv, budget_share: share, rank }
        })
        .collect();

    Ok(RankPlan { records, config: cfg.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn importance_hand_cases() {
        let w = Matrix::from_rows(&[&[1.0, -2.0], &[0.0, 3.0]]);
        let g = Matrix::from_rows(&[&[2.0, 1.0], &[-1.0, 0.0]]);
        assert_eq!(importance(&w, &g, ImportanceMetric::Sensitivity).unwrap(), 1.0);

        let gd = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 4.0]]);
        let i = importance(&Matrix::identity(2), &gd, ImportanceMetric::NuclearGrad).unwrap();
        assert!((i - 7.0).abs() < 1e-12);

        let z = Matrix::zeros(2, 2);
        for metric in [
            ImportanceMetric::Sensitivity,
            ImportanceMetric::NuclearGrad,
            ImportanceMetric::NuclearProd,
        ] {
            assert!(importance(&w, &z, metric).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn advantages_hand_cases() {
        let a = advantages(&[0.3, 0.1]).unwrap();
        assert!((a[0] - 0.75).abs() < 1e-15 && (a[1] - 0.25).abs() < 1e-15);
        assert_eq!(advantages(&[2.0; 4]).unwrap(), vec![0.25; 4]);
        assert!(matches!(
            advantages(&[0.0, 0.0]),
            Err(GoraError::Degenerate(_))
        ));
    }

    #[test]
    fn budget_hand_cases() {
        assert_eq!(total_budget(&[(8, 8), (8, 8)], 8), 64.0);
        assert_eq!(total_budget(&[(10, 6)], 3), 12.0);
        assert_eq!(total_budget(&[(8, 8)], 0), 0.0);
        assert!(AllocConfig::new(0, 0, 0, ImportanceMetric::Sensitivity).is_err());
    }

    #[test]
    fn rank_allocation_hand_case() {
        let cfg = AllocConfig::new(8, 4, 32, ImportanceMetric::Sensitivity).unwrap();
        let layers = [(0, (8, 8)), (1, (8, 8))];
        let plan = allocate_ranks(&cfg, &layers, &[0.3, 0.1], &[0.75, 0.25]).unwrap();
        assert_eq!(plan.records[0].rank, 12);
        assert_eq!(plan.records[1].rank, 4);
    }

    #[test]
    fn uniform_advantages_allocate_r_ref_exactly() {
        let cfg = AllocConfig::from_r_ref(8, ImportanceMetric::Sensitivity).unwrap();
        let layers: Vec<_> = (0..4).map(|i| (i, (16, 16))).collect();
        let plan = allocate_ranks(&cfg, &layers, &[1.0; 4], &[0.25; 4]).unwrap();
        for r in &plan.records {
            assert_eq!(r.rank, 8);
        }
        assert_eq!(plan.allocated_params(), plan.lora_equivalent_params());
        assert_eq!(plan.budget_deviation(), 0.0);
    }

    #[test]
    fn hoarding_layer_clips_at_r_max() {
        // five homogeneous layers: unclipped rank is 5 * 8 * a = 39.6
        let cfg = AllocConfig::new(8, 0, 32, ImportanceMetric::Sensitivity).unwrap();
        let layers: Vec<_> = (0..5).map(|i| (i, (64, 64))).collect();
        let imps = [99.0, 0.25, 0.25, 0.25, 0.25];
        let advs = [0.99, 0.0025, 0.0025, 0.0025, 0.0025];
        let plan = allocate_ranks(&cfg, &layers, &imps, &advs).unwrap();
        assert_eq!(plan.records[0].rank, 32);
        assert_eq!(plan.records[1].rank, 0);
    }

    #[test]
    fn min_dim_cap_applies_when_enabled() {
        let mut cfg = AllocConfig::new(8, 0, 32, ImportanceMetric::Sensitivity).unwrap();
        cfg.cap_to_min_dim = true;
        let layers = [(0, (64, 4)), (1, (64, 64))];
        let plan = allocate_ranks(&cfg, &layers, &[99.0, 1.0], &[0.99, 0.01]).unwrap();
        assert_eq!(plan.records[0].rank, 4);
    }

    #[test]
    fn rounding_ties_go_away_from_zero() {
        // budget 64, shapes 8x8: share/sqrt(16) hits 4.5 and 11.5 exactly
        let cfg = AllocConfig::new(8, 0, 32, ImportanceMetric::Sensitivity).unwrap();
        let layers = [(0, (8, 8)), (1, (8, 8))];
        let plan = allocate_ranks(&cfg, &layers, &[0.28125, 0.71875], &[0.28125, 0.71875]).unwrap();
        assert_eq!(plan.records[0].rank, 5);
        assert_eq!(plan.records[1].rank, 12);
    }

    #[test]
    fn zero_rank_layers_allowed_with_zero_r_min() {
        let cfg = AllocConfig::new(8, 0, 1000, ImportanceMetric::Sensitivity).unwrap();
        let layers = [(0, (8, 8)), (1, (8, 8))];
        let plan = allocate_ranks(&cfg, &layers, &[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(plan.records[1].rank, 0);
    }
}
