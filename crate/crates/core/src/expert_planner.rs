//! Maps per-layer scores to an integer expert allocation under a global
//! budget.
//!
//! Given strictly positive layer scores S, a budget T, and an exponent
//! beta, the plan is:
//!
//! ```text
//! v_hat_l = S_l^beta
//! f_l     = v_hat_l * (T - L) / sum(v_hat)
//! s_l     = floor(f_l) + 1
//! ```
//!
//! then the remaining r = T - sum(s) units go to the r layers with the
//! largest fractional parts f_l - floor(f_l), ties to the lower index.
//! Every layer ends with at least one expert and the counts sum exactly
//! to T. Larger beta sharpens the profile, concentrating experts on
//! high-scoring layers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layer_scores::LayerScoreVector;
use crate::numerics::compensated_sum;

/// Every layer is guaranteed at least this many experts.
pub const MIN_EXPERTS: usize = 1;

/// Errors from expert planning.
#[derive(Debug, Error)]
pub enum PlanError {
    #[error("no layers to allocate")]
    Empty,
    #[error("budget {budget} is below the layer count {layers}")]
    BudgetTooSmall { budget: usize, layers: usize },
    #[error(
        "layer {layer} has non-positive score {score}; zero benefit usually means an upstream bug"
    )]
    NonPositiveScore { layer: usize, score: f64 },
    #[error("layer {layer} has a non-finite score")]
    NonFiniteScore { layer: usize },
    #[error("beta must be positive and finite, got {0}")]
    BadBeta(f64),
}

/// Budget and sharpening exponent for a plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertPlanConfig {
    /// Total experts to hand out (must be at least the layer count).
    pub budget: usize,
    /// Sharpening exponent applied to each score.
    pub beta: f64,
}

impl Default for ExpertPlanConfig {
    fn default() -> Self {
        ExpertPlanConfig { budget: 160, beta: 3.0 }
    }
}

/// An integer expert allocation plus the audit trail that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertAllocation {
    /// Final expert count per layer; sums to `budget`, every entry >= 1.
    pub layers: Vec<usize>,
    pub budget: usize,
    pub beta: f64,
    /// Fractional allocations f_l before flooring.
    pub fractional: Vec<f64>,
    /// Budget units left after flooring, before remainder distribution.
    pub remainder: usize,
    /// Scores as fed to the power step.
    pub v_tilde: Vec<f64>,
    /// Scores after the power step.
    pub v_hat: Vec<f64>,
    /// Identifier of the score vector the plan came from.
    pub source_scores: String,
}

impl ExpertAllocation {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self, cfg: &ExpertPlanConfig) -> Vec<Violation> {
        validate_allocation(&self.layers, cfg)
    }
}

/// A single constraint violation found by the validator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Violation {
    /// Counts do not sum to the budget.
    Budget { expected: usize, got: usize },
    /// A layer fell below the minimum expert count.
    MinExperts { layer: usize, count: usize },
    /// The allocation has no layers.
    Empty,
}

impl Violation {
    pub fn label(&self) -> &'static str {
        match self {
            Violation::Budget { .. } => "budget",
            Violation::MinExperts { .. } => "min-experts",
            Violation::Empty => "empty",
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Budget { expected, got } => {
                write!(f, "budget: counts sum to {got}, expected {expected}")
            }
            Violation::MinExperts { layer, count } => {
                write!(f, "min-experts: layer {layer} has {count} < {MIN_EXPERTS}")
            }
            Violation::Empty => write!(f, "empty: allocation has no layers"),
        }
    }
}

/// Plans an expert allocation from the raw (un-normalized) layer scores.
pub fn plan_experts(
    scores: &LayerScoreVector,
    cfg: &ExpertPlanConfig,
) -> Result<ExpertAllocation, PlanError> {
    let v_tilde = scores.raw.clone();
    let l_count = v_tilde.len();
    if l_count == 0 {
        return Err(PlanError::Empty);
    }
    if cfg.budget < l_count {
        return Err(PlanError::BudgetTooSmall { budget: cfg.budget, layers: l_count });
    }
    if !(cfg.beta.is_finite() && cfg.beta > 0.0) {
        return Err(PlanError::BadBeta(cfg.beta));
    }
    for (layer, &s) in v_tilde.iter().enumerate() {
        if !s.is_finite() {
            return Err(PlanError::NonFiniteScore { layer });
        }
        if s <= 0.0 {
            return Err(PlanError::NonPositiveScore { layer, score: s });
        }
    }

    let v_hat: Vec<f64> = v_tilde.iter().map(|s| s.powf(cfg.beta)).collect();
    let total = compensated_sum(&v_hat);
    let spare = (cfg.budget - l_count) as f64;
    // Multiply before dividing so exact cases (e.g. proportional integer
    // shares) survive rounding.
    let fractional: Vec<f64> = v_hat.iter().map(|v| v * spare / total).collect();
    let mut layers: Vec<usize> = fractional.iter().map(|f| f.floor() as usize + 1).collect();
    let assigned: usize = layers.iter().sum();
    assert!(
        assigned <= cfg.budget,
        "floor allocation {assigned} exceeded budget {} (degenerate score profile)",
        cfg.budget
    );
    let remainder = cfg.budget - assigned;

    // Hand the remainder to the largest fractional parts, ties to the
    // lower layer index.
    let mut order: Vec<usize> = (0..l_count).collect();
    order.sort_by(|&a, &b| {
        let fa = fractional[a] - fractional[a].floor();
        let fb = fractional[b] - fractional[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &l in order.iter().take(remainder) {
        layers[l] += 1;
    }

    let alloc = ExpertAllocation {
        layers,
        budget: cfg.budget,
        beta: cfg.beta,
        fractional,
        remainder,
        v_tilde,
        v_hat,
        source_scores: scores.source.clone(),
    };
    debug_assert!(alloc.validate(cfg).is_empty());
    Ok(alloc)
}

/// Checks an expert-count vector against the budget and minimum-count
/// constraints, returning every violation found.
pub fn validate_allocation(layers: &[usize], cfg: &ExpertPlanConfig) -> Vec<Violation> {
    let mut violations = Vec::new();
    if layers.is_empty() {
        violations.push(Violation::Empty);
        return violations;
    }
    let got: usize = layers.iter().sum();
    if got != cfg.budget {
        violations.push(Violation::Budget { expected: cfg.budget, got });
    }
    for (layer, &count) in layers.iter().enumerate() {
        if count < MIN_EXPERTS {
            violations.push(Violation::MinExperts { layer, count });
        }
    }
    violations
}
