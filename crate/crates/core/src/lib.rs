//! Layer-wise influence scoring for a small transformer, plus the two
//! downstream planners the scores feed: per-layer expert counts for
//! mixture-of-experts allocation and per-layer sparsity ratios for pruning.
//!
//! The pipeline runs end to end at desk scale:
//!
//! 1. [`toy_model`] trains a small transformer on a synthetic modular-sum
//!    task and dumps per-sample, per-block gradients.
//! 2. [`gradient_store`] persists those gradients in a bit-exact wire format.
//! 3. [`if_engine`] turns gradients into a per-sample, per-layer influence
//!    matrix under one of three Hessian treatments.
//! 4. [`layer_scores`] collapses the matrix into one score per layer,
//!    normalizes, and smooths.
//! 5. [`expert_planner`] and [`sparsity_planner`] map scores to integer
//!    expert counts and fractional sparsity ratios.
//! 6. [`pruning_exec`] applies sparsity plans to model weights and evaluates
//!    the result; [`analysis`] compares allocations and runs the
//!    reversed-plan ablation.
//!
//! All internal arithmetic uses 64-bit floats; storage formats use 32-bit
//! floats. Every stage is deterministic given its inputs and seeds.

pub mod analysis;
pub mod expert_planner;
pub mod gradient_store;
pub mod if_engine;
pub mod layer_scores;
pub mod numerics;
pub mod pruning_exec;
pub mod sparsity_planner;
pub mod toy_model;
