//! Collapses an influence matrix into per-layer quality scores, then
//! normalizes and smooths them for the planners.
//!
//! The benefit of training sample i to layer l is the negated raw influence
//! b = -I_l(i), so beneficial samples contribute positively. A strategy
//! picks which benefits count: every sample, only the beneficial ones, or
//! the top fraction of the beneficial ones. Downstream planners consume the
//! normalized (and optionally smoothed) profile, both kept in [0, 1].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::if_engine::LayerInfluenceMatrix;
use crate::numerics::{compensated_sum, savitzky_golay, NumericsError};

/// Savitzky-Golay window used by [`smooth_default`].
pub const SMOOTH_WINDOW: usize = 7;
/// Savitzky-Golay polynomial order used by [`smooth_default`].
pub const SMOOTH_POLYORDER: usize = 3;

/// Errors from score aggregation and post-processing.
#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("top fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("influence matrix has no samples")]
    EmptyMatrix,
    #[error("scores must be normalized before smoothing")]
    NotNormalized,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which per-sample benefits count toward a layer's score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Sum of max(benefit, 0) over all samples.
    PositiveOnly,
    /// Sum of every benefit, negative ones included.
    All,
    /// Sum of the largest `ceil(f * count_positive)` positive benefits.
    TopFraction(f64),
}

impl Strategy {
    /// Short label used in sidecars and report rows.
    pub fn label(&self) -> String {
        match self {
            Strategy::PositiveOnly => "positive_only".into(),
            Strategy::All => "all".into(),
            Strategy::TopFraction(f) => format!("top_fraction({f})"),
        }
    }
}

/// Per-layer scores with their optional normalized and smoothed variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScoreVector {
    pub raw: Vec<f64>,
    pub strategy: Strategy,
    pub normalized: Option<Vec<f64>>,
    pub smoothed: Option<Vec<f64>>,
    /// True when smoothing was requested but skipped because the profile is
    /// shorter than the filter window.
    pub smoothing_skipped: bool,
    /// Identifier of the influence matrix (and hence gradient set) the
    /// scores came from.
    pub source: String,
}

impl LayerScoreVector {
    pub fn num_layers(&self) -> usize {
        self.raw.len()
    }

    /// The profile the planners should consume: smoothed when present,
    /// else normalized.
    pub fn planning_profile(&self) -> Option<&[f64]> {
        self.smoothed.as_deref().or(self.normalized.as_deref())
    }

    /// CSV rendering: `layer_index,raw,normalized,smoothed`, with empty
    /// fields for variants not yet computed.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("layer_index,raw,normalized,smoothed\n");
        for l in 0..self.raw.len() {
            let _ = write!(out, "{l},{}", self.raw[l]);
            match &self.normalized {
                Some(v) => {
                    let _ = write!(out, ",{}", v[l]);
                }
                None => out.push(','),
            }
            match &self.smoothed {
                Some(v) => {
                    let _ = write!(out, ",{}", v[l]);
                }
                None => out.push(','),
            }
            out.push('\n');
        }
        out
    }

    pub fn sidecar(&self) -> ScoreSidecar {
        ScoreSidecar {
            strategy: self.strategy,
            window: self.smoothed.as_ref().map(|_| SMOOTH_WINDOW),
            polyorder: self.smoothed.as_ref().map(|_| SMOOTH_POLYORDER),
            smoothing_skipped: self.smoothing_skipped,
            source: self.source.clone(),
        }
    }
}

/// Sidecar metadata persisted next to the score CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSidecar {
    pub strategy: Strategy,
    pub window: Option<usize>,
    pub polyorder: Option<usize>,
    pub smoothing_skipped: bool,
    pub source: String,
}

/// Aggregates an influence matrix into one raw score per layer.
pub fn aggregate(
    infl: &LayerInfluenceMatrix,
    strategy: Strategy,
) -> Result<LayerScoreVector, ScoreError> {
    if infl.num_samples() == 0 {
        return Err(ScoreError::EmptyMatrix);
    }
    if let Strategy::TopFraction(f) = strategy {
        if !(f > 0.0 && f <= 1.0) {
            return Err(ScoreError::BadFraction(f));
        }
    }
    let n = infl.num_samples();
    let raw = (0..infl.num_layers())
        .map(|l| {
            let benefits: Vec<f64> = (0..n).map(|i| -infl.values.get(i, l)).collect();
            match strategy {
                Strategy::All => compensated_sum(&benefits),
                Strategy::PositiveOnly => {
                    let clipped: Vec<f64> = benefits.iter().map(|b| b.max(0.0)).collect();
                    compensated_sum(&clipped)
                }
                Strategy::TopFraction(f) => {
                    let mut pos: Vec<f64> = benefits.iter().copied().filter(|b| *b > 0.0).collect();
                    pos.sort_by(|a, b| b.total_cmp(a));
                    let take = (f * pos.len() as f64).ceil() as usize;
                    compensated_sum(&pos[..take.min(pos.len())])
                }
            }
        })
        .collect();
    Ok(LayerScoreVector {
        raw,
        strategy,
        normalized: None,
        smoothed: None,
        smoothing_skipped: false,
        source: infl.gradient_set_id.clone(),
    })
}

/// Min-max normalizes the absolute raw scores into [0, 1]. A degenerate
/// profile (all absolute scores equal) maps to all 0.5.
pub fn normalize_abs_minmax(s: &LayerScoreVector) -> LayerScoreVector {
    let abs: Vec<f64> = s.raw.iter().map(|x| x.abs()).collect();
    let min = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = abs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let normalized = if max > min {
        abs.iter().map(|x| (x - min) / (max - min)).collect()
    } else {
        vec![0.5; abs.len()]
    };
    LayerScoreVector {
        raw: s.raw.clone(),
        strategy: s.strategy,
        normalized: Some(normalized),
        smoothed: None,
        smoothing_skipped: false,
        source: s.source.clone(),
    }
}

/// Savitzky-Golay smooths the normalized profile, clamping the result back
/// to [0, 1] (the filter can overshoot at the edges). Profiles shorter than
/// the window are passed through unchanged with `smoothing_skipped` set.
pub fn smooth(
    s: &LayerScoreVector,
    window: usize,
    polyorder: usize,
) -> Result<LayerScoreVector, ScoreError> {
    let normalized = s.normalized.as_ref().ok_or(ScoreError::NotNormalized)?;
    let mut out = s.clone();
    if normalized.len() < window {
        out.smoothed = Some(normalized.clone());
        out.smoothing_skipped = true;
        return Ok(out);
    }
    let filtered = savitzky_golay(normalized, window, polyorder)?;
    out.smoothed = Some(filtered.iter().map(|x| x.clamp(0.0, 1.0)).collect());
    out.smoothing_skipped = false;
    Ok(out)
}

/// [`smooth`] with the standard window 7, polyorder 3.
pub fn smooth_default(s: &LayerScoreVector) -> Result<LayerScoreVector, ScoreError> {
    smooth(s, SMOOTH_WINDOW, SMOOTH_POLYORDER)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::if_engine::Backend;
    use crate::numerics::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Influence matrix whose benefit columns (-values) are given per layer.
    fn matrix_from_benefits(cols: &[Vec<f64>]) -> LayerInfluenceMatrix {
        let n = cols[0].len();
        let mut values = Matrix::zeros(n, cols.len());
        for (l, col) in cols.iter().enumerate() {
            for (i, b) in col.iter().enumerate() {
                values.set(i, l, -b);
            }
        }
        LayerInfluenceMatrix {
            values,
            backend: Backend::HessianFree,
            lambda: vec![0.0; cols.len()],
            gradient_set_id: "fixture".into(),
        }
    }

    fn scores(raw: Vec<f64>) -> LayerScoreVector {
        LayerScoreVector {
            raw,
            strategy: Strategy::PositiveOnly,
            normalized: None,
            smoothed: None,
            smoothing_skipped: false,
            source: "fixture".into(),
        }
    }

    #[test]
    fn strategies_match_the_hand_enumerated_column() {
        let im = matrix_from_benefits(&[vec![3.0, -1.0, 2.0]]);
        assert_eq!(aggregate(&im, Strategy::PositiveOnly).unwrap().raw, vec![5.0]);
        assert_eq!(aggregate(&im, Strategy::All).unwrap().raw, vec![4.0]);
        // Two positive benefits, ceil(0.5 * 2) = 1 -> just the 3.
        assert_eq!(aggregate(&im, Strategy::TopFraction(0.5)).unwrap().raw, vec![3.0]);
    }

    #[test]
    fn all_negative_benefits_give_zero_positive_only_score() {
        let im = matrix_from_benefits(&[vec![-3.0, -0.5]]);
        assert_eq!(aggregate(&im, Strategy::PositiveOnly).unwrap().raw, vec![0.0]);
        assert_eq!(aggregate(&im, Strategy::TopFraction(0.5)).unwrap().raw, vec![0.0]);
    }

    #[test]
    fn full_fraction_equals_positive_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cols: Vec<Vec<f64>> =
            (0..5).map(|_| (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let im = matrix_from_benefits(&cols);
        let full = aggregate(&im, Strategy::TopFraction(1.0)).unwrap();
        let pos = aggregate(&im, Strategy::PositiveOnly).unwrap();
        for (a, b) in full.raw.iter().zip(&pos.raw) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn positive_only_dominates_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cols: Vec<Vec<f64>> =
            (0..6).map(|_| (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let im = matrix_from_benefits(&cols);
        let pos = aggregate(&im, Strategy::PositiveOnly).unwrap();
        let all = aggregate(&im, Strategy::All).unwrap();
        for (p, a) in pos.raw.iter().zip(&all.raw) {
            assert!(p >= a, "positive_only {p} must dominate all {a}");
        }
    }

    #[test]
    fn aggregate_is_layer_equivariant_and_row_order_insensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cols: Vec<Vec<f64>> =
            (0..4).map(|_| (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let im = matrix_from_benefits(&cols);
        let base = aggregate(&im, Strategy::PositiveOnly).unwrap();

        // Swapping two layers swaps exactly those scores.
        let mut swapped_cols = cols.clone();
        swapped_cols.swap(1, 3);
        let swapped =
            aggregate(&matrix_from_benefits(&swapped_cols), Strategy::PositiveOnly).unwrap();
        assert_eq!(swapped.raw[1], base.raw[3]);
        assert_eq!(swapped.raw[3], base.raw[1]);
        assert_eq!(swapped.raw[0], base.raw[0]);

        // Reversing the training rows leaves scores unchanged to summation
        // accuracy.
        let reversed_cols: Vec<Vec<f64>> =
            cols.iter().map(|c| c.iter().rev().copied().collect()).collect();
        let reversed =
            aggregate(&matrix_from_benefits(&reversed_cols), Strategy::PositiveOnly).unwrap();
        for (a, b) in base.raw.iter().zip(&reversed.raw) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn aggregate_rejects_bad_inputs() {
        let im = matrix_from_benefits(&[vec![1.0]]);
        assert!(matches!(
            aggregate(&im, Strategy::TopFraction(0.0)),
            Err(ScoreError::BadFraction(_))
        ));
        assert!(matches!(
            aggregate(&im, Strategy::TopFraction(1.5)),
            Err(ScoreError::BadFraction(_))
        ));
        let empty = LayerInfluenceMatrix {
            values: Matrix::zeros(0, 2),
            backend: Backend::HessianFree,
            lambda: vec![0.0; 2],
            gradient_set_id: "empty".into(),
        };
        assert!(matches!(aggregate(&empty, Strategy::All), Err(ScoreError::EmptyMatrix)));
    }

    #[test]
    fn normalization_matches_affine_and_degenerate_examples() {
        assert_eq!(
            normalize_abs_minmax(&scores(vec![1.0, 3.0, 5.0])).normalized.unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        // Absolute values collapse (-2, 2) into a degenerate profile.
        assert_eq!(
            normalize_abs_minmax(&scores(vec![-2.0, 2.0])).normalized.unwrap(),
            vec![0.5, 0.5]
        );
        assert_eq!(
            normalize_abs_minmax(&scores(vec![0.0, 10.0])).normalized.unwrap(),
            vec![0.0, 1.0]
        );
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let base = normalize_abs_minmax(&scores(vec![0.3, 1.7, 0.9, 2.4])).normalized.unwrap();
        // Power-of-two scaling is exact in floats.
        let doubled = normalize_abs_minmax(&scores(vec![0.6, 3.4, 1.8, 4.8])).normalized.unwrap();
        assert_eq!(base, doubled);
        let scaled =
            normalize_abs_minmax(&scores([0.3, 1.7, 0.9, 2.4].iter().map(|x| x * 3.7).collect()))
                .normalized
                .unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn smoothing_preserves_constants_and_cubics() {
        let flat = normalize_abs_minmax(&scores(vec![2.0; 9]));
        let sm = smooth_default(&flat).unwrap();
        for x in sm.smoothed.unwrap() {
            assert!((x - 0.5).abs() <= 1e-12);
        }
        assert!(!sm.smoothing_skipped);

        // A cubic profile across 32 layers, kept strictly inside (0,1) so
        // the clamp cannot bite, is a fixed point of the filter.
        let cubic: Vec<f64> = (0..32)
            .map(|l| {
                let t = l as f64 / 31.0;
                0.001 + 0.997 * t * t * t
            })
            .collect();
        let mut vec = scores(vec![0.0; 32]);
        vec.normalized = Some(cubic.clone());
        let sm = smooth_default(&vec).unwrap();
        for (a, b) in sm.smoothed.unwrap().iter().zip(&cubic) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn short_profiles_skip_smoothing_with_the_flag_set() {
        let s = normalize_abs_minmax(&scores(vec![1.0, 4.0, 2.0, 5.0, 3.0]));
        let sm = smooth_default(&s).unwrap();
        assert!(sm.smoothing_skipped);
        assert_eq!(sm.smoothed.as_ref(), sm.normalized.as_ref());
    }

    #[test]
    fn smoothing_requires_normalized_scores_and_stays_in_unit_range() {
        assert!(matches!(smooth_default(&scores(vec![1.0; 8])), Err(ScoreError::NotNormalized)));
        // A step profile overshoots at the edge; the clamp pulls it back.
        let mut vec = scores(vec![0.0; 12]);
        vec.normalized = Some(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let sm = smooth_default(&vec).unwrap();
        for x in sm.smoothed.unwrap() {
            assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn csv_has_one_row_per_layer_with_optional_fields() {
        let s = scores(vec![3.0, 1.0]);
        let csv = s.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "layer_index,raw,normalized,smoothed");
        assert_eq!(csv.lines().nth(1).unwrap(), "0,3,,");
        let full = smooth(&normalize_abs_minmax(&s), 7, 3).unwrap();
        let csv = full.to_csv();
        assert_eq!(csv.lines().nth(2).unwrap(), "1,1,0,0");
        let side = full.sidecar();
        assert!(side.smoothing_skipped);
        assert_eq!(side.strategy, Strategy::PositiveOnly);
        let json = serde_json::to_string(&side).unwrap();
        let back: ScoreSidecar = serde_json::from_str(&json).unwrap();
        assert_eq!(back, side);
    }
}
