//! Maps smoothed layer scores to per-layer pruning ratios that meet an
//! exact global sparsity target.
//!
//! Each layer's smoothed score s is min-max rescaled and mapped into the
//! band [e1, e2]; a single scalar eta then scales the whole profile so the
//! parameter-weighted mean ratio equals the target:
//!
//! ```text
//! base_i = (s_i - s_min) / (s_max - s_min) * (e2 - e1) + e1
//! eta    = target * sum(d) / sum(base_i * d_i)
//! phi_i  = eta * base_i
//! ```
//!
//! Ratios that would exceed the cap are clamped to it and eta is re-solved
//! over the remaining layers until stable, preserving the global constraint
//! exactly. Higher scores always receive ratios at least as large; the
//! reverse plan feeds 1 - s instead, for ablations that deliberately prune
//! the highest-scoring layers hardest.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layer_scores::LayerScoreVector;
use crate::numerics::compensated_sum;

/// Highest ratio a layer may receive; keeps every layer from being emptied.
pub const DEFAULT_RATIO_CAP: f64 = 0.999;

/// Errors from sparsity planning.
#[derive(Debug, Error)]
pub enum SparsityError {
    #[error("scores have no smoothed profile to plan from")]
    MissingProfile,
    #[error("target sparsity {0} must lie strictly inside (0, 1)")]
    BadTarget(f64),
    #[error("ratio bounds invalid: e1={e1}, e2={e2} (need e2 > e1 >= 0)")]
    BadWindow { e1: f64, e2: f64 },
    #[error("ratio cap {0} must lie in (0, 1]")]
    BadCap(f64),
    #[error("{dims} layer dims do not match {scores} scores")]
    LengthMismatch { dims: usize, scores: usize },
    #[error("layer {0} has zero parameters")]
    ZeroDim(usize),
    #[error("target {target} is unreachable: every layer would exceed the cap {cap}")]
    Infeasible { target: f64, cap: f64 },
}

/// Target, ratio band, and layer sizes for a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlanConfig {
    /// Global parameter-weighted sparsity to achieve, in (0, 1).
    pub target: f64,
    /// Lower edge of the pre-scaling ratio band.
    pub e1: f64,
    /// Upper edge of the pre-scaling ratio band.
    pub e2: f64,
    /// Prunable parameter count per layer.
    pub layer_dims: Vec<usize>,
    /// Per-layer ratio ceiling.
    pub cap: f64,
}

impl SparsityPlanConfig {
    /// Standard band: a symmetric 0.1 margin around the target, with the
    /// lower edge clamped at zero.
    pub fn with_default_window(target: f64, layer_dims: Vec<usize>) -> Self {
        SparsityPlanConfig {
            target,
            e1: (target - 0.1).max(0.0),
            e2: target + 0.1,
            layer_dims,
            cap: DEFAULT_RATIO_CAP,
        }
    }

    /// Relative band: (e1, e2) = (target - epsilon*target, target +
    /// epsilon*target).
    pub fn with_epsilon(target: f64, epsilon: f64, layer_dims: Vec<usize>) -> Self {
        SparsityPlanConfig {
            target,
            e1: target - epsilon * target,
            e2: target + epsilon * target,
            layer_dims,
            cap: DEFAULT_RATIO_CAP,
        }
    }

    fn validate(&self, scores: usize) -> Result<(), SparsityError> {
        if !(self.target > 0.0 && self.target < 1.0) {
            return Err(SparsityError::BadTarget(self.target));
        }
        if !(self.e2 > self.e1 && self.e1 >= 0.0) || !self.e1.is_finite() || !self.e2.is_finite() {
            return Err(SparsityError::BadWindow { e1: self.e1, e2: self.e2 });
        }
        if !(self.cap > 0.0 && self.cap <= 1.0) {
            return Err(SparsityError::BadCap(self.cap));
        }
        if self.layer_dims.len() != scores {
            return Err(SparsityError::LengthMismatch { dims: self.layer_dims.len(), scores });
        }
        if let Some(l) = self.layer_dims.iter().position(|&d| d == 0) {
            return Err(SparsityError::ZeroDim(l));
        }
        if self.target >= self.cap {
            return Err(SparsityError::Infeasible { target: self.target, cap: self.cap });
        }
        Ok(())
    }
}

/// Per-layer pruning ratios meeting the global target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub ratios: Vec<f64>,
    pub eta: f64,
    pub e1: f64,
    pub e2: f64,
    pub target: f64,
    /// Parameter-weighted mean of `ratios`; matches `target` to 1e-9
    /// relative.
    pub achieved: f64,
    /// Layers pinned at the cap during the re-solve loop.
    pub clamped_layers: Vec<usize>,
    pub source_scores: String,
}

impl SparsityPlan {
    pub fn num_layers(&self) -> usize {
        self.ratios.len()
    }
}

/// Parameter-weighted mean ratio: sum(phi_i * d_i) / sum(d_i).
pub fn achieved_sparsity(ratios: &[f64], layer_dims: &[usize]) -> f64 {
    assert_eq!(ratios.len(), layer_dims.len(), "ratio/dim length mismatch");
    let weighted: Vec<f64> =
        ratios.iter().zip(layer_dims).map(|(phi, &d)| phi * d as f64).collect();
    let total: Vec<f64> = layer_dims.iter().map(|&d| d as f64).collect();
    compensated_sum(&weighted) / compensated_sum(&total)
}

fn solve_profile(
    profile: &[f64],
    cfg: &SparsityPlanConfig,
    source: &str,
) -> Result<SparsityPlan, SparsityError> {
    cfg.validate(profile.len())?;
    let l_count = profile.len();
    let min = profile.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = profile.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let base: Vec<f64> = if max > min {
        profile.iter().map(|s| (s - min) / (max - min) * (cfg.e2 - cfg.e1) + cfg.e1).collect()
    } else {
        vec![(cfg.e1 + cfg.e2) / 2.0; l_count]
    };
    let dims: Vec<f64> = cfg.layer_dims.iter().map(|&d| d as f64).collect();
    let total_params = compensated_sum(&dims);

    let mut clamped = vec![false; l_count];
    loop {
        // Masked sums keep a fixed term order across iterations so the
        // solve is deterministic.
        let unclamped_mass: Vec<f64> =
            (0..l_count).map(|i| if clamped[i] { 0.0 } else { base[i] * dims[i] }).collect();
        let clamped_params: Vec<f64> =
            (0..l_count).map(|i| if clamped[i] { dims[i] } else { 0.0 }).collect();
        let denom = compensated_sum(&unclamped_mass);
        if denom <= 0.0 {
            return Err(SparsityError::Infeasible { target: cfg.target, cap: cfg.cap });
        }
        let eta = (cfg.target * total_params - cfg.cap * compensated_sum(&clamped_params)) / denom;
        let ratios: Vec<f64> =
            (0..l_count).map(|i| if clamped[i] { cfg.cap } else { eta * base[i] }).collect();

        let overshoot: Vec<usize> =
            (0..l_count).filter(|&i| !clamped[i] && ratios[i] > cfg.cap).collect();
        if overshoot.is_empty() {
            let achieved = achieved_sparsity(&ratios, &cfg.layer_dims);
            debug_assert!((achieved - cfg.target).abs() <= 1e-9 * cfg.target);
            return Ok(SparsityPlan {
                ratios,
                eta,
                e1: cfg.e1,
                e2: cfg.e2,
                target: cfg.target,
                achieved,
                clamped_layers: (0..l_count).filter(|&i| clamped[i]).collect(),
                source_scores: source.to_string(),
            });
        }
        for i in overshoot {
            clamped[i] = true;
        }
        if clamped.iter().all(|&c| c) {
            return Err(SparsityError::Infeasible { target: cfg.target, cap: cfg.cap });
        }
    }
}

/// Plans per-layer ratios from the smoothed score profile: higher scores
/// get higher ratios within the [e1, e2] band.
pub fn plan_sparsity(
    scores: &LayerScoreVector,
    cfg: &SparsityPlanConfig,
) -> Result<SparsityPlan, SparsityError> {
    let profile = scores.smoothed.as_deref().ok_or(SparsityError::MissingProfile)?;
    solve_profile(profile, cfg, &scores.source)
}

/// Plans against the complemented profile 1 - s, so the highest-scoring
/// layers are pruned hardest. Used by the reversed-allocation ablation.
pub fn reverse_plan(
    scores: &LayerScoreVector,
    cfg: &SparsityPlanConfig,
) -> Result<SparsityPlan, SparsityError> {
    let profile = scores.smoothed.as_deref().ok_or(SparsityError::MissingProfile)?;
    let flipped: Vec<f64> = profile.iter().map(|s| 1.0 - s).collect();
    solve_profile(&flipped, cfg, &scores.source)
}
