//! Temperature scaling of propagated scores.
//!
//! Propagated rows are treated as two-class logits, divided by a
//! temperature and pushed through softmax. The temperature is fit by
//! minimizing negative log-likelihood on a validation set over a bounded
//! range; the objective is convex in 1/T, so a bracketed golden-section
//! search finds the global minimum.

use serde::{Deserialize, Serialize};

use crate::labels::LabelMatrix;

pub const DEFAULT_T_MIN: f64 = 0.1;
pub const DEFAULT_T_MAX: f64 = 10.0;

/// Floor applied to probabilities inside the NLL to keep logs finite.
const PROB_FLOOR: f64 = 1e-12;

/// Interval width at which the golden-section search stops. Well inside
/// the 1e-4 optimality contract.
const GOLDEN_TOLERANCE: f64 = 1e-7;

/// Fitted temperature plus the validation NLL it achieved.
/// `nll_before` is the NLL at the identity temperature T = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub t_star: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    /// Mean |change in P(malicious)| over the rows calibration touched.
    /// Set from the validation rows at fit time; pipelines overwrite it
    /// with the graph-wide figure after applying T*.
    pub mean_abs_score_shift: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("temperature bounds are invalid: [{0}, {1}]")]
    BadBounds(f64, f64),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("validation set contains a single class; NLL is degenerate")]
    SingleClassValidation,
    #[error("rows and labels differ in length: {rows} vs {labels}")]
    LengthMismatch { rows: usize, labels: usize },
}

/// Softmax of one row divided by T.
fn scale_row(row: [f64; 2], t: f64) -> [f64; 2] {
    // Subtracting the max keeps the exponentials tame for tiny T.
    let m = row[0].max(row[1]);
    let e0 = ((row[0] - m) / t).exp();
    let e1 = ((row[1] - m) / t).exp();
    let sum = e0 + e1;
    [e0 / sum, e1 / sum]
}

/// Temperature-scales every row: `softmax(row / T)`.
pub fn scale(rows: &[[f64; 2]], t: f64) -> Result<Vec<[f64; 2]>, CalibrationError> {
    if !(t > 0.0) {
        return Err(CalibrationError::NonPositiveTemperature(t));
    }
    Ok(rows.iter().map(|&r| scale_row(r, t)).collect())
}

/// Mean cross-entropy of `probs` against boolean labels
/// (`true` = malicious, class 1). Probabilities are floored at 1e-12.
pub fn nll(labels: &[bool], probs: &[[f64; 2]]) -> Result<f64, CalibrationError> {
    if labels.is_empty() {
        return Err(CalibrationError::EmptyValidation);
    }
    if labels.len() != probs.len() {
        return Err(CalibrationError::LengthMismatch {
            rows: probs.len(),
            labels: labels.len(),
        });
    }
    let mut total = 0.0;
    for (&label, row) in labels.iter().zip(probs) {
        let p = if label { row[1] } else { row[0] };
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// NLL of the validation rows scaled at temperature `t`.
fn nll_at(rows: &[[f64; 2]], labels: &[bool], t: f64) -> f64 {
    let mut total = 0.0;
    for (&label, &row) in labels.iter().zip(rows) {
        let scaled = scale_row(row, t);
        let p = if label { scaled[1] } else { scaled[0] };
        total -= p.max(PROB_FLOOR).ln();
    }
    total / labels.len() as f64
}

/// Fits T* = argmin NLL(T) over [t_min, t_max] by golden-section search,
/// then takes the best of the search result, both endpoints and T = 1, so
/// the fitted NLL never exceeds the identity or boundary values.
pub fn fit_temperature(
    val_rows: &[[f64; 2]],
    val_labels: &[bool],
    t_min: f64,
    t_max: f64,
) -> Result<CalibrationResult, CalibrationError> {
    if val_rows.is_empty() || val_labels.is_empty() {
        return Err(CalibrationError::EmptyValidation);
    }
    if val_rows.len() != val_labels.len() {
        return Err(CalibrationError::LengthMismatch {
            rows: val_rows.len(),
            labels: val_labels.len(),
        });
    }
    if !(t_min > 0.0) || !(t_max > t_min) {
        return Err(CalibrationError::BadBounds(t_min, t_max));
    }
    let positives = val_labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == val_labels.len() {
        return Err(CalibrationError::SingleClassValidation);
    }

    let f = |t: f64| nll_at(val_rows, val_labels, t);

    // Golden-section search; NLL is unimodal in T on a positive interval.
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (t_min, t_max);
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > GOLDEN_TOLERANCE {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    let golden = 0.5 * (lo + hi);

    let mut t_star = golden;
    let mut best = f(golden);
    for candidate in [t_min, t_max, 1.0_f64.clamp(t_min, t_max)] {
        let v = f(candidate);
        if v < best {
            best = v;
            t_star = candidate;
        }
    }

    let nll_before = f(1.0_f64.clamp(t_min, t_max));
    let scaled = scale(val_rows, t_star)?;
    let shift = val_rows
        .iter()
        .zip(&scaled)
        .map(|(a, b)| (a[1] - b[1]).abs())
        .sum::<f64>()
        / val_rows.len() as f64;

    Ok(CalibrationResult {
        t_star,
        nll_before,
        nll_after: best,
        mean_abs_score_shift: shift,
    })
}

/// Applies T* to every unmasked row of a propagated label matrix. Masked
/// rows are ground truth and stay untouched. Returns the calibrated matrix
/// and the mean |change in P(malicious)| over unmasked rows.
pub fn calibrate_graph(
    labels: &LabelMatrix,
    t_star: f64,
) -> Result<(LabelMatrix, f64), CalibrationError> {
    if !(t_star > 0.0) {
        return Err(CalibrationError::NonPositiveTemperature(t_star));
    }
    let mut out = labels.clone();
    let mut shift_sum = 0.0;
    let mut shifted = 0usize;
    for i in 0..labels.len() {
        if labels.mask[i] {
            continue;
        }
        let scaled = scale_row(labels.rows[i], t_star);
        shift_sum += (scaled[1] - labels.rows[i][1]).abs();
        shifted += 1;
        out.rows[i] = scaled;
    }
    let mean_shift = if shifted > 0 {
        shift_sum / shifted as f64
    } else {
        0.0
    };
    Ok((out, mean_shift))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeId;

    #[test]
    fn symmetric_rows_are_fixed_points_of_scaling() {
        for t in [0.1, 1.0, 2.5, 10.0] {
            let out = scale(&[[0.5, 0.5]], t).unwrap();
            assert!((out[0][0] - 0.5).abs() < 1e-12);
            assert!((out[0][1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_matches_closed_form_softmax() {
        let out = scale(&[[0.9, 0.1]], 1.0).unwrap();
        let e9 = 0.9_f64.exp();
        let e1 = 0.1_f64.exp();
        assert!((out[0][0] - e9 / (e9 + e1)).abs() < 1e-12);
        assert!((out[0][1] - e1 / (e9 + e1)).abs() < 1e-12);
        // ~ [0.690, 0.310]
        assert!((out[0][0] - 0.690).abs() < 1e-3);
    }

    #[test]
    fn huge_temperature_flattens_rows() {
        let out = scale(&[[0.99, 0.01], [0.2, 0.8]], 1e6).unwrap();
        for row in out {
            assert!((row[0] - 0.5).abs() < 1e-3);
            assert!((row[1] - 0.5).abs() < 1e-3);
            assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nonpositive_temperature_is_rejected() {
        assert!(scale(&[[0.5, 0.5]], 0.0).is_err());
        assert!(scale(&[[0.5, 0.5]], -1.0).is_err());
    }

    #[test]
    fn nll_of_perfect_prediction_is_zero() {
        let v = nll(&[true, false], &[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn nll_of_uniform_prediction_is_ln2() {
        let v = nll(&[true, false, true], &[[0.5, 0.5]; 3]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_closed_form() {
        let v = nll(&[false], &[[0.8, 0.2]]).unwrap();
        assert!((v + 0.8_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_empty_validation() {
        assert!(matches!(
            nll(&[], &[]),
            Err(CalibrationError::EmptyValidation)
        ));
    }

    fn noisy_confident_set(flip_every: usize) -> (Vec<[f64; 2]>, Vec<bool>) {
        // Confident scores with a fixed fraction of flipped labels.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..400 {
            let malicious = i % 2 == 0;
            let row = if malicious { [0.02, 0.98] } else { [0.98, 0.02] };
            rows.push(row);
            let flipped = i % flip_every == 0;
            labels.push(malicious != flipped);
        }
        (rows, labels)
    }

    #[test]
    fn fitted_nll_never_beats_identity_baseline() {
        let (rows, labels) = noisy_confident_set(5);
        let fit = fit_temperature(&rows, &labels, DEFAULT_T_MIN, DEFAULT_T_MAX).unwrap();
        assert!(fit.nll_after <= fit.nll_before + 1e-9);
        assert!(fit.t_star >= DEFAULT_T_MIN && fit.t_star <= DEFAULT_T_MAX);
    }

    #[test]
    fn heavy_label_noise_pushes_temperature_above_one() {
        // Scores live in [0,1], so the widest logit gap is 0.96 and the
        // identity temperature already undersells confidence; the fitted
        // temperature only exceeds 1 once the labels are noisy enough
        // (accuracy below ~73%). Flip 2 in 5.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..400 {
            let malicious = i % 2 == 0;
            rows.push(if malicious { [0.02, 0.98] } else { [0.98, 0.02] });
            let flipped = i % 5 < 2;
            labels.push(malicious != flipped);
        }
        let fit = fit_temperature(&rows, &labels, DEFAULT_T_MIN, DEFAULT_T_MAX).unwrap();
        assert!(fit.t_star > 1.0, "t_star = {}", fit.t_star);
    }

    #[test]
    fn fit_agrees_with_brute_force_grid() {
        let (rows, labels) = noisy_confident_set(4);
        let fit = fit_temperature(&rows, &labels, DEFAULT_T_MIN, DEFAULT_T_MAX).unwrap();
        let mut grid_best = f64::INFINITY;
        for k in 0..1000 {
            let t = DEFAULT_T_MIN + (DEFAULT_T_MAX - DEFAULT_T_MIN) * k as f64 / 999.0;
            let v = nll(&labels, &scale(&rows, t).unwrap()).unwrap();
            grid_best = grid_best.min(v);
        }
        assert!(
            fit.nll_after <= grid_best + 1e-9,
            "fit {} worse than grid {}",
            fit.nll_after,
            grid_best
        );
        assert!((fit.nll_after - grid_best).abs() <= 1e-6);
    }

    #[test]
    fn single_class_validation_is_rejected() {
        let rows = vec![[0.3, 0.7]; 10];
        let labels = vec![true; 10];
        assert!(matches!(
            fit_temperature(&rows, &labels, DEFAULT_T_MIN, DEFAULT_T_MAX),
            Err(CalibrationError::SingleClassValidation)
        ));
    }

    #[test]
    fn calibrate_graph_skips_masked_rows() {
        let labels = LabelMatrix {
            order: vec![NodeId(0), NodeId(1), NodeId(2)],
            rows: vec![[0.05, 0.95], [0.4, 0.6], [0.5, 0.5]],
            mask: vec![true, false, false],
        };
        let (out, shift) = calibrate_graph(&labels, 0.5).unwrap();
        assert_eq!(out.rows[0], [0.05, 0.95], "masked row must not move");
        assert_ne!(out.rows[1], labels.rows[1]);
        assert!(shift > 0.0);
        for row in &out.rows {
            assert!((row[0] + row[1] - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn identity_temperature_keeps_symmetric_rows() {
        let labels = LabelMatrix {
            order: vec![NodeId(0)],
            rows: vec![[0.5, 0.5]],
            mask: vec![false],
        };
        let (out, shift) = calibrate_graph(&labels, 1.0).unwrap();
        assert_eq!(out.rows[0], [0.5, 0.5]);
        assert!(shift.abs() < 1e-12);
    }

    #[test]
    fn scaling_preserves_within_row_ranking() {
        let rows = [[0.7, 0.3], [0.1, 0.9], [0.45, 0.55]];
        for t in [0.1, 0.5, 1.0, 3.0, 10.0] {
            let out = scale(&rows, t).unwrap();
            for (orig, cal) in rows.iter().zip(&out) {
                assert_eq!(orig[0] > orig[1], cal[0] > cal[1]);
            }
        }
    }
}
