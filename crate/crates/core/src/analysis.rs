//! Cross-plan comparison and ablation reporting: rank agreement between
//! expert allocations, heatmap-shaped CSV exports of allocation grids, and
//! the reversed-allocation pruning ablation.

use std::collections::BTreeMap;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert_planner::ExpertAllocation;
use crate::layer_scores::LayerScoreVector;
use crate::numerics::{self, NumericsError};
use crate::pruning_exec::{
    activation_weighted_mask, apply_mask, magnitude_mask, Criterion, PruneError,
};
use crate::sparsity_planner::{
    plan_sparsity, reverse_plan, SparsityError, SparsityPlan, SparsityPlanConfig,
};
use crate::toy_model::{evaluate, Sample, ToyTransformer};

/// Calibration sequences drawn per ablation seed for the
/// activation-weighted criterion.
pub const ABLATION_CALIBRATION_BATCH: usize = 32;

/// Errors from comparison and ablation drivers.
#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("inputs have {a} and {b} layers; need equal lengths")]
    LengthMismatch { a: usize, b: usize },
    #[error("no allocations to export")]
    Empty,
    #[error("evaluation split is empty")]
    EmptyEval,
    #[error(transparent)]
    Plan(#[from] SparsityError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Rank agreement between two expert allocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// Score source of the left allocation.
    pub id_a: String,
    /// Score source of the right allocation.
    pub id_b: String,
    /// Rank correlation of the two count vectors, always in [-1, 1].
    pub spearman: f64,
    /// Per-layer count difference, left minus right.
    pub per_layer_diff: Vec<i64>,
    pub metadata: BTreeMap<String, String>,
}

/// Rank-correlates two expert-count vectors (average ranks on ties) and
/// records their elementwise differences.
///
/// When either count vector is constant the correlation is undefined; the
/// report then falls back to 1.0 for identical allocations and 0.0
/// otherwise, keeping the [-1, 1] invariant.
pub fn compare_allocations(
    a: &ExpertAllocation,
    b: &ExpertAllocation,
) -> Result<ComparisonReport, AnalysisError> {
    if a.layers.len() != b.layers.len() {
        return Err(AnalysisError::LengthMismatch { a: a.layers.len(), b: b.layers.len() });
    }
    let xa: Vec<f64> = a.layers.iter().map(|&c| c as f64).collect();
    let xb: Vec<f64> = b.layers.iter().map(|&c| c as f64).collect();
    let spearman = match numerics::spearman(&xa, &xb) {
        Ok(r) => r.clamp(-1.0, 1.0),
        Err(NumericsError::ZeroRankVariance) | Err(NumericsError::TooFewSamples(_)) => {
            if a.layers == b.layers {
                1.0
            } else {
                0.0
            }
        }
        Err(e) => return Err(e.into()),
    };
    let per_layer_diff =
        a.layers.iter().zip(&b.layers).map(|(&ca, &cb)| ca as i64 - cb as i64).collect();
    let mut metadata = BTreeMap::new();
    metadata.insert("num_layers".into(), a.layers.len().to_string());
    metadata.insert("budget_a".into(), a.budget.to_string());
    metadata.insert("budget_b".into(), b.budget.to_string());
    metadata.insert("beta_a".into(), a.beta.to_string());
    metadata.insert("beta_b".into(), b.beta.to_string());
    Ok(ComparisonReport {
        id_a: a.source_scores.clone(),
        id_b: b.source_scores.clone(),
        spearman,
        per_layer_diff,
        metadata,
    })
}

/// Renders named allocations as a heatmap-shaped CSV: one row per
/// allocation, one `layer_i` column per layer.
pub fn heatmap_export(allocs: &[(String, ExpertAllocation)]) -> Result<String, AnalysisError> {
    let first = allocs.first().ok_or(AnalysisError::Empty)?;
    let cols = first.1.layers.len();
    for (_, a) in allocs {
        if a.layers.len() != cols {
            return Err(AnalysisError::LengthMismatch { a: cols, b: a.layers.len() });
        }
    }
    let mut out = String::from("name");
    for l in 0..cols {
        out.push_str(&format!(",layer_{l}"));
    }
    out.push('\n');
    for (name, a) in allocs {
        out.push_str(&csv_field(name));
        for &c in &a.layers {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Quotes a CSV field when it contains a separator, quote, or newline.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One pruned-model evaluation from the reversed-allocation ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub criterion: String,
    /// "forward" for the planned profile, "reversed" for its complement.
    pub direction: String,
    pub achieved_sparsity: f64,
    pub accuracy: f64,
    pub cross_entropy: f64,
}

/// Paired forward/reversed evaluations plus the accuracy win count over
/// (seed, criterion) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub forward_wins: usize,
    pub reversed_wins: usize,
    pub ties: usize,
}

impl AblationTable {
    /// Rows as CSV; the win-count summary stays in the JSON form.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("seed,criterion,direction,achieved_sparsity,accuracy,cross_entropy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.seed, r.criterion, r.direction, r.achieved_sparsity, r.accuracy, r.cross_entropy
            ));
        }
        out
    }
}

/// Prunes with the planned profile and with its reverse for every
/// (seed, criterion) pair, evaluates each pruned copy, and tallies which
/// direction wins on accuracy.
///
/// Seeds select the calibration subset used by the activation-weighted
/// criterion (the magnitude criterion ignores them, so its rows repeat
/// across seeds). Rows come out in seed-major, then criterion, then
/// forward-before-reversed order, bit-identical across reruns.
pub fn ablation_reversed(
    model: &ToyTransformer,
    scores: &LayerScoreVector,
    cfg: &SparsityPlanConfig,
    criteria: &[Criterion],
    seeds: &[u64],
    eval_samples: &[Sample],
    calib_pool: &[Sample],
) -> Result<AblationTable, AnalysisError> {
    if eval_samples.is_empty() {
        return Err(AnalysisError::EmptyEval);
    }
    let forward = plan_sparsity(scores, cfg)?;
    let reversed = reverse_plan(scores, cfg)?;
    let combos: Vec<(u64, Criterion)> =
        seeds.iter().flat_map(|&s| criteria.iter().map(move |&c| (s, c))).collect();
    let pairs: Vec<Result<(AblationRow, AblationRow), AnalysisError>> = combos
        .into_par_iter()
        .map(|(seed, criterion)| {
            let calib = calibration_batch(calib_pool, seed);
            let run = |direction: &str, plan: &SparsityPlan| {
                let mask = match criterion {
                    Criterion::Magnitude => magnitude_mask(model, plan)?,
                    Criterion::ActivationWeighted => activation_weighted_mask(model, plan, &calib)?,
                };
                let pruned = apply_mask(model, &mask)?;
                let metrics = evaluate(&pruned, eval_samples);
                Ok::<AblationRow, AnalysisError>(AblationRow {
                    seed,
                    criterion: criterion.to_string(),
                    direction: direction.to_string(),
                    achieved_sparsity: mask.global_sparsity(),
                    accuracy: metrics.accuracy,
                    cross_entropy: metrics.cross_entropy,
                })
            };
            Ok((run("forward", &forward)?, run("reversed", &reversed)?))
        })
        .collect();
    let mut rows = Vec::with_capacity(2 * pairs.len());
    let mut forward_wins = 0;
    let mut reversed_wins = 0;
    let mut ties = 0;
    for pair in pairs {
        let (f, r) = pair?;
        if f.accuracy > r.accuracy {
            forward_wins += 1;
        } else if f.accuracy < r.accuracy {
            reversed_wins += 1;
        } else {
            ties += 1;
        }
        rows.push(f);
        rows.push(r);
    }
    Ok(AblationTable { rows, forward_wins, reversed_wins, ties })
}

/// Seeded shuffle of the pool, truncated to the calibration batch size.
fn calibration_batch(pool: &[Sample], seed: u64) -> Vec<Sample> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(ABLATION_CALIBRATION_BATCH.min(pool.len()));
    idx.into_iter().map(|i| pool[i].clone()).collect()
}
