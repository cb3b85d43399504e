//! Builds, applies, and persists unstructured pruning masks over the toy
//! model's prunable weights, and reports post-pruning quality.
//!
//! Masks cover exactly the six prunable matrices of each block, stored flat
//! in the same frozen order as gradient dumps (Q, K, V, O, MLP-up,
//! MLP-down, row-major). Two criteria are supported:
//!
//! * magnitude: drop the smallest-|w| weights, compared jointly across the
//!   whole block (or per matrix under the per-matrix scope);
//! * activation-weighted: score each weight by |w| times the L2 norm of its
//!   input feature over a calibration batch, and drop the lowest scores row
//!   by row.
//!
//! Either way a block's budget is exactly floor(ratio * d_l) weights, so
//! the achieved per-layer ratio deviates from the requested one only by
//! integer rounding (under 1/d_l). The activation-weighted criterion
//! apportions that budget across output rows by largest remainder, keeping
//! the block total exact.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparsity_planner::SparsityPlan;
use crate::toy_model::{CalibrationNorms, Sample, ToyTransformer};

const MASK_FORMAT_VERSION: u32 = 1;

/// Errors from mask construction, application, and persistence.
#[derive(Debug, Error)]
pub enum PruneError {
    #[error("plan has {plan} layers but the model has {model} blocks")]
    PlanMismatch { plan: usize, model: usize },
    #[error("mask block {block} has {got} bits, expected {expected}")]
    ShapeMismatch { block: usize, got: usize, expected: usize },
    #[error("calibration batch is empty")]
    EmptyCalibration,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad mask artifact: {0}")]
    BadMask(String),
}

/// Pruning criterion selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    Magnitude,
    ActivationWeighted,
}

impl Criterion {
    pub fn as_str(&self) -> &'static str {
        match self {
            Criterion::Magnitude => "magnitude",
            Criterion::ActivationWeighted => "activation-weighted",
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "magnitude" => Ok(Criterion::Magnitude),
            "activation-weighted" => Ok(Criterion::ActivationWeighted),
            other => Err(format!(
                "unknown criterion '{other}' (expected magnitude or activation-weighted)"
            )),
        }
    }
}

/// Whether a block's ratio is enforced jointly across the block or within
/// each matrix separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskScope {
    Block,
    PerMatrix,
}

/// Boolean masks over every prunable weight; true means pruned.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub criterion: Criterion,
    /// One flat mask per block, in the frozen matrix order.
    pub blocks: Vec<Vec<bool>>,
    /// Fraction of each block actually pruned.
    pub achieved: Vec<f64>,
}

impl PruneMask {
    /// Pruned-weight count over prunable-weight count, across all blocks.
    pub fn global_sparsity(&self) -> f64 {
        let pruned: usize = self.blocks.iter().map(|b| b.iter().filter(|&&x| x).count()).sum();
        let total: usize = self.blocks.iter().map(|b| b.len()).sum();
        pruned as f64 / total as f64
    }
}

/// Pruned-weight count over prunable-weight count.
pub fn global_sparsity(mask: &PruneMask) -> f64 {
    mask.global_sparsity()
}

/// Post-pruning quality report, one per (criterion, plan) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvalReport {
    pub criterion: String,
    pub plan_id: String,
    pub achieved_sparsity: f64,
    pub accuracy: f64,
    pub cross_entropy: f64,
}

/// Marks the `k` smallest scores (ties to the lower index) in a fresh mask.
fn mask_smallest(scores: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut mask = vec![false; scores.len()];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    mask
}

/// Splits `budget` across rows proportionally to row length, assigning
/// leftovers to the largest fractional shares (ties to the lower row).
fn apportion_budget(row_lens: &[usize], budget: usize) -> Vec<usize> {
    let total: usize = row_lens.iter().sum();
    assert!(budget <= total, "budget exceeds available weights");
    if total == 0 {
        return vec![0; row_lens.len()];
    }
    let shares: Vec<f64> =
        row_lens.iter().map(|&l| budget as f64 * l as f64 / total as f64).collect();
    let mut counts: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..row_lens.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &r in order.iter().take(budget - assigned) {
        // A row may already be full when its share rounded up to its
        // length; push the unit to the next candidate instead.
        counts[r] += 1;
    }
    // Repair any overfull rows (possible only via the remainder step).
    let mut spill = 0usize;
    for (c, &l) in counts.iter_mut().zip(row_lens) {
        if *c > l {
            spill += *c - l;
            *c = l;
        }
    }
    if spill > 0 {
        for (c, &l) in counts.iter_mut().zip(row_lens) {
            let room = l - *c;
            let add = room.min(spill);
            *c += add;
            spill -= add;
            if spill == 0 {
                break;
            }
        }
    }
    counts
}

/// The six prunable matrices of one block as (name, weights, rows, cols),
/// in the frozen flat order.
fn block_matrices(model: &ToyTransformer, b: usize) -> [(&'static str, &[f64], usize, usize); 6] {
    let d = model.cfg.d_model;
    let ff = model.cfg.d_ff;
    let blk = &model.blocks[b];
    [
        ("wq", blk.wq.as_slice(), d, d),
        ("wk", blk.wk.as_slice(), d, d),
        ("wv", blk.wv.as_slice(), d, d),
        ("wo", blk.wo.as_slice(), d, d),
        ("w_up", blk.w_up.as_slice(), ff, d),
        ("w_down", blk.w_down.as_slice(), d, ff),
    ]
}

fn check_plan(model: &ToyTransformer, plan: &SparsityPlan) -> Result<(), PruneError> {
    if plan.num_layers() != model.cfg.num_blocks {
        return Err(PruneError::PlanMismatch {
            plan: plan.num_layers(),
            model: model.cfg.num_blocks,
        });
    }
    Ok(())
}

/// Magnitude criterion at block scope: each block drops its
/// floor(ratio * d_l) smallest-|w| weights, compared across the whole
/// block.
pub fn magnitude_mask(
    model: &ToyTransformer,
    plan: &SparsityPlan,
) -> Result<PruneMask, PruneError> {
    magnitude_mask_scoped(model, plan, MaskScope::Block)
}

/// Magnitude criterion with an explicit comparison scope.
pub fn magnitude_mask_scoped(
    model: &ToyTransformer,
    plan: &SparsityPlan,
    scope: MaskScope,
) -> Result<PruneMask, PruneError> {
    check_plan(model, plan)?;
    let d_l = model.block_param_count();
    let blocks: Vec<Vec<bool>> = (0..model.cfg.num_blocks)
        .into_par_iter()
        .map(|b| {
            let ratio = plan.ratios[b];
            match scope {
                MaskScope::Block => {
                    let mut scores = Vec::with_capacity(d_l);
                    for (_, w, _, _) in block_matrices(model, b) {
                        scores.extend(w.iter().map(|x| x.abs()));
                    }
                    mask_smallest(&scores, (ratio * d_l as f64).floor() as usize)
                }
                MaskScope::PerMatrix => {
                    let mut mask = Vec::with_capacity(d_l);
                    for (_, w, _, _) in block_matrices(model, b) {
                        let scores: Vec<f64> = w.iter().map(|x| x.abs()).collect();
                        let k = (ratio * w.len() as f64).floor() as usize;
                        mask.extend(mask_smallest(&scores, k));
                    }
                    mask
                }
            }
        })
        .collect();
    let achieved =
        blocks.iter().map(|m| m.iter().filter(|&&x| x).count() as f64 / m.len() as f64).collect();
    Ok(PruneMask { criterion: Criterion::Magnitude, blocks, achieved })
}

/// Activation-weighted criterion: weight w_jk scores |w_jk| * norm(x_k)
/// with the input-feature norms taken from the calibration batch; the
/// lowest scores are dropped per output row, with the block budget
/// apportioned across rows by largest remainder.
pub fn activation_weighted_mask(
    model: &ToyTransformer,
    plan: &SparsityPlan,
    calibration: &[Sample],
) -> Result<PruneMask, PruneError> {
    check_plan(model, plan)?;
    if calibration.is_empty() {
        return Err(PruneError::EmptyCalibration);
    }
    let norms = model.calibration_norms(calibration);
    let d_l = model.block_param_count();
    let blocks: Vec<Vec<bool>> = (0..model.cfg.num_blocks)
        .into_par_iter()
        .map(|b| {
            let budget = (plan.ratios[b] * d_l as f64).floor() as usize;
            let mats = block_matrices(model, b);
            let input_norms = matrix_input_norms(&norms[b]);
            // One budget row per output row across all six matrices.
            let row_lens: Vec<usize> = mats
                .iter()
                .flat_map(|(_, _, rows, cols)| std::iter::repeat_n(*cols, *rows))
                .collect();
            let row_budgets = apportion_budget(&row_lens, budget);
            let mut mask = Vec::with_capacity(d_l);
            let mut row_cursor = 0;
            for ((_, w, rows, cols), norm) in mats.iter().zip(input_norms) {
                for r in 0..*rows {
                    let row = &w[r * cols..(r + 1) * cols];
                    let scores: Vec<f64> = row.iter().zip(norm).map(|(x, n)| x.abs() * n).collect();
                    mask.extend(mask_smallest(&scores, row_budgets[row_cursor]));
                    row_cursor += 1;
                }
            }
            mask
        })
        .collect();
    let achieved =
        blocks.iter().map(|m| m.iter().filter(|&&x| x).count() as f64 / m.len() as f64).collect();
    Ok(PruneMask { criterion: Criterion::ActivationWeighted, blocks, achieved })
}

/// Input-feature norms for each of the six matrices, in flat order.
fn matrix_input_norms(n: &CalibrationNorms) -> [&[f64]; 6] {
    [&n.attn_in, &n.attn_in, &n.attn_in, &n.attn_ctx, &n.mlp_in, &n.mlp_act]
}

/// Returns a copy of the model with masked weights zeroed; unmasked
/// weights are bit-identical and the original is untouched.
pub fn apply_mask(model: &ToyTransformer, mask: &PruneMask) -> Result<ToyTransformer, PruneError> {
    if mask.blocks.len() != model.cfg.num_blocks {
        return Err(PruneError::PlanMismatch {
            plan: mask.blocks.len(),
            model: model.cfg.num_blocks,
        });
    }
    let d_l = model.block_param_count();
    for (b, bits) in mask.blocks.iter().enumerate() {
        if bits.len() != d_l {
            return Err(PruneError::ShapeMismatch { block: b, got: bits.len(), expected: d_l });
        }
    }
    let mut pruned = model.clone();
    for (b, bits) in mask.blocks.iter().enumerate() {
        let blk = &mut pruned.blocks[b];
        let mut offset = 0;
        for part in
            [&mut blk.wq, &mut blk.wk, &mut blk.wv, &mut blk.wo, &mut blk.w_up, &mut blk.w_down]
        {
            for x in part.iter_mut() {
                if bits[offset] {
                    *x = 0.0;
                }
                offset += 1;
            }
        }
    }
    Ok(pruned)
}

/// JSON index stored next to the packed mask bits.
#[derive(Debug, Serialize, Deserialize)]
struct MaskIndex {
    format_version: u32,
    criterion: Criterion,
    block_bits: Vec<usize>,
    achieved: Vec<f64>,
}

/// Writes the mask as `mask.bin` (bits packed LSB-first per block,
/// byte-aligned between blocks) plus a `mask.json` index.
pub fn write_mask(mask: &PruneMask, dir: &Path) -> Result<(), PruneError> {
    let io_err = |path: &Path, e: std::io::Error| PruneError::Io {
        path: path.display().to_string(),
        source: e,
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let index = MaskIndex {
        format_version: MASK_FORMAT_VERSION,
        criterion: mask.criterion,
        block_bits: mask.blocks.iter().map(|b| b.len()).collect(),
        achieved: mask.achieved.clone(),
    };
    let json =
        serde_json::to_string_pretty(&index).map_err(|e| PruneError::BadMask(e.to_string()))?;
    let json_path = dir.join("mask.json");
    fs::write(&json_path, json).map_err(|e| io_err(&json_path, e))?;

    let mut bytes = Vec::new();
    for bits in &mask.blocks {
        let mut packed = vec![0u8; bits.len().div_ceil(8)];
        for (i, &bit) in bits.iter().enumerate() {
            if bit {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        bytes.extend_from_slice(&packed);
    }
    let bin_path = dir.join("mask.bin");
    fs::write(&bin_path, bytes).map_err(|e| io_err(&bin_path, e))?;
    Ok(())
}

/// Reads a mask written by [`write_mask`].
pub fn read_mask(dir: &Path) -> Result<PruneMask, PruneError> {
    let io_err = |path: &Path, e: std::io::Error| PruneError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let json_path = dir.join("mask.json");
    let index: MaskIndex =
        serde_json::from_str(&fs::read_to_string(&json_path).map_err(|e| io_err(&json_path, e))?)
            .map_err(|e| PruneError::BadMask(e.to_string()))?;
    if index.format_version != MASK_FORMAT_VERSION {
        return Err(PruneError::BadMask(format!(
            "unsupported mask version {}",
            index.format_version
        )));
    }
    let bin_path = dir.join("mask.bin");
    let bytes = fs::read(&bin_path).map_err(|e| io_err(&bin_path, e))?;
    let expected: usize = index.block_bits.iter().map(|n| n.div_ceil(8)).sum();
    if bytes.len() != expected {
        return Err(PruneError::BadMask(format!(
            "mask.bin has {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut blocks = Vec::with_capacity(index.block_bits.len());
    let mut cursor = 0;
    for &n in &index.block_bits {
        let packed = &bytes[cursor..cursor + n.div_ceil(8)];
        cursor += packed.len();
        blocks.push((0..n).map(|i| packed[i / 8] & (1 << (i % 8)) != 0).collect());
    }
    Ok(PruneMask { criterion: index.criterion, blocks, achieved: index.achieved })
}
