//! Reputation propagation over the normalized adjacency.
//!
//! Each iteration multiplies the row-normalized adjacency into the label
//! matrix, re-imposes the high-confidence rows from Y(0), renormalizes the
//! remaining rows, and stops once the Frobenius residual between
//! consecutive label matrices drops below the tolerance.
//!
//! Rows are accumulated in fixed column order, so results are identical
//! whether the per-iteration product runs on one thread or many.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::labels::LabelMatrix;
use crate::sparse::CsrMatrix;

/// Stop conditions for the propagation loop.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationConfig {
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            max_iters: 100,
            tolerance: 1e-3,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<(), PropagationError> {
        if self.max_iters < 1 {
            return Err(PropagationError::BadConfig("max_iters must be >= 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(PropagationError::BadConfig("tolerance must be > 0".into()));
        }
        Ok(())
    }
}

/// Outcome of one propagation run.
#[derive(Debug, Clone)]
pub struct PropagationResult {
    pub labels: LabelMatrix,
    /// Frobenius residual after each iteration.
    pub residual_trace: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum PropagationError {
    #[error("bad propagation config: {0}")]
    BadConfig(String),
    #[error("matrix is {matrix} x {matrix} but label matrix has {labels} rows")]
    DimensionMismatch { matrix: usize, labels: usize },
    #[error("row {row} has zero degree (sum {sum}); prune isolated nodes before exporting")]
    ZeroDegreeRow { row: usize, sum: f64 },
    #[error("row {row} of the adjacency is not stochastic (sum {sum})")]
    NotRowStochastic { row: usize, sum: f64 },
    #[error("label row {row} summed to zero during normalization")]
    ZeroRowSum { row: usize },
    #[error("dense oracle supports at most {max} nodes, got {n}")]
    SizeExceeded { n: usize, max: usize },
}

/// Divides every row of `a` by its row sum. Fails on any zero-degree row,
/// naming the offending row.
pub fn degree_normalize(a: &CsrMatrix) -> Result<CsrMatrix, PropagationError> {
    let mut factors = Vec::with_capacity(a.n());
    for i in 0..a.n() {
        let sum = a.row_sum(i);
        if !(sum > 0.0) {
            return Err(PropagationError::ZeroDegreeRow { row: i, sum });
        }
        factors.push(1.0 / sum);
    }
    Ok(a.scale_rows(&factors))
}

const PARALLEL_CUTOVER: usize = 8192;

/// Runs the propagation loop. See [`propagate_with`] for the observer
/// variant used by invariant checks.
pub fn propagate(
    a_hat: &CsrMatrix,
    y0: &LabelMatrix,
    config: &PropagationConfig,
) -> Result<PropagationResult, PropagationError> {
    propagate_with(a_hat, y0, config, |_, _, _| {})
}

/// Propagation with a per-iteration observer `(iteration, rows, residual)`,
/// called after the mask and normalization steps.
pub fn propagate_with(
    a_hat: &CsrMatrix,
    y0: &LabelMatrix,
    config: &PropagationConfig,
    mut observer: impl FnMut(usize, &[[f64; 2]], f64),
) -> Result<PropagationResult, PropagationError> {
    config.validate()?;
    let n = a_hat.n();
    if y0.len() != n {
        return Err(PropagationError::DimensionMismatch {
            matrix: n,
            labels: y0.len(),
        });
    }
    for i in 0..n {
        let sum = a_hat.row_sum(i);
        if (sum - 1.0).abs() > 1e-6 {
            return Err(PropagationError::NotRowStochastic { row: i, sum });
        }
    }

    let step_row = |i: usize, prev: &[[f64; 2]]| -> Result<[f64; 2], PropagationError> {
        if y0.mask[i] {
            // High-confidence rows are pinned to Y(0) verbatim.
            return Ok(y0.rows[i]);
        }
        let (cols, vals) = a_hat.row(i);
        let mut acc = [0.0f64; 2];
        for (&j, &w) in cols.iter().zip(vals) {
            let row = prev[j as usize];
            acc[0] += w * row[0];
            acc[1] += w * row[1];
        }
        let sum = acc[0] + acc[1];
        if !(sum > 0.0) {
            return Err(PropagationError::ZeroRowSum { row: i });
        }
        Ok([acc[0] / sum, acc[1] / sum])
    };

    let mut prev = y0.rows.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations_used = 0;

    for iteration in 1..=config.max_iters {
        let stepped: Vec<Result<[f64; 2], PropagationError>> = if n >= PARALLEL_CUTOVER {
            (0..n).into_par_iter().map(|i| step_row(i, &prev)).collect()
        } else {
            (0..n).map(|i| step_row(i, &prev)).collect()
        };
        let mut next = Vec::with_capacity(n);
        for row in stepped {
            next.push(row?);
        }

        // Sequential reduction keeps the residual bit-stable.
        let mut sq = 0.0f64;
        for i in 0..n {
            let d0 = next[i][0] - prev[i][0];
            let d1 = next[i][1] - prev[i][1];
            sq += d0 * d0 + d1 * d1;
        }
        let residual = sq.sqrt();
        trace.push(residual);
        observer(iteration, &next, residual);

        prev = next;
        iterations_used = iteration;
        if residual < config.tolerance {
            converged = true;
            break;
        }
    }

    Ok(PropagationResult {
        labels: LabelMatrix {
            order: y0.order.clone(),
            rows: prev,
            mask: y0.mask.clone(),
        },
        residual_trace: trace,
        iterations_used,
        converged,
    })
}

const DENSE_ORACLE_MAX: usize = 1000;

/// Reference implementation over a dense matrix. Same algorithm, written
/// against plain nested vectors with no shared code in the hot path;
/// intended for cross-checking the sparse kernel on small graphs.
pub fn dense_oracle(
    a: &[Vec<f64>],
    y0: &LabelMatrix,
    config: &PropagationConfig,
) -> Result<PropagationResult, PropagationError> {
    config.validate()?;
    let n = a.len();
    if n > DENSE_ORACLE_MAX {
        return Err(PropagationError::SizeExceeded {
            n,
            max: DENSE_ORACLE_MAX,
        });
    }
    if y0.len() != n {
        return Err(PropagationError::DimensionMismatch {
            matrix: n,
            labels: y0.len(),
        });
    }
    // Degree-normalize the dense matrix in place (on a copy).
    let mut a_hat = vec![vec![0.0; n]; n];
    for i in 0..n {
        let sum: f64 = a[i].iter().sum();
        if !(sum > 0.0) {
            return Err(PropagationError::ZeroDegreeRow { row: i, sum });
        }
        for j in 0..n {
            a_hat[i][j] = a[i][j] / sum;
        }
    }

    let mut prev = y0.rows.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations_used = 0;

    for iteration in 1..=config.max_iters {
        let mut next = vec![[0.0f64; 2]; n];
        for i in 0..n {
            if y0.mask[i] {
                next[i] = y0.rows[i];
                continue;
            }
            let mut acc = [0.0f64; 2];
            for j in 0..n {
                let w = a_hat[i][j];
                if w != 0.0 {
                    acc[0] += w * prev[j][0];
                    acc[1] += w * prev[j][1];
                }
            }
            let sum = acc[0] + acc[1];
            if !(sum > 0.0) {
                return Err(PropagationError::ZeroRowSum { row: i });
            }
            next[i] = [acc[0] / sum, acc[1] / sum];
        }

        let mut sq = 0.0f64;
        for i in 0..n {
            let d0 = next[i][0] - prev[i][0];
            let d1 = next[i][1] - prev[i][1];
            sq += d0 * d0 + d1 * d1;
        }
        let residual = sq.sqrt();
        trace.push(residual);

        prev = next;
        iterations_used = iteration;
        if residual < config.tolerance {
            converged = true;
            break;
        }
    }

    Ok(PropagationResult {
        labels: LabelMatrix {
            order: y0.order.clone(),
            rows: prev,
            mask: y0.mask.clone(),
        },
        residual_trace: trace,
        iterations_used,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeId;

    fn labels_from(scores: &[f64], masked: &[bool]) -> LabelMatrix {
        let order = (0..scores.len() as u32).map(NodeId).collect();
        let mut y = LabelMatrix::from_scores(order, scores).unwrap();
        y.mask = masked.to_vec();
        y
    }

    fn path_matrix(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n - 1 {
            t.push((i as u32, i as u32 + 1, 1.0));
            t.push((i as u32 + 1, i as u32, 1.0));
        }
        CsrMatrix::from_triplets(n, t)
    }

    #[test]
    fn degree_normalize_two_node() {
        let a = CsrMatrix::from_triplets(2, vec![(0, 1, 2.0), (1, 0, 2.0)]);
        let norm = degree_normalize(&a).unwrap();
        assert_eq!(norm.get(0, 1), Some(1.0));
        assert_eq!(norm.get(1, 0), Some(1.0));
    }

    #[test]
    fn degree_normalize_triangle() {
        let mut t = Vec::new();
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            t.push((i as u32, j as u32, 1.0));
            t.push((j as u32, i as u32, 1.0));
        }
        let norm = degree_normalize(&CsrMatrix::from_triplets(3, t)).unwrap();
        for (i, j) in [(0, 1), (1, 0), (1, 2), (2, 1), (0, 2), (2, 0)] {
            assert_eq!(norm.get(i, j), Some(0.5));
        }
    }

    #[test]
    fn degree_normalize_rejects_zero_row() {
        let a = CsrMatrix::from_triplets(3, vec![(0, 1, 1.0), (1, 0, 1.0)]);
        match degree_normalize(&a) {
            Err(PropagationError::ZeroDegreeRow { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected zero-degree error, got {other:?}"),
        }
    }

    #[test]
    fn chain_converges_to_harmonic_fixed_point() {
        // masked 1.0 -- u1 -- u2 -- masked 0.0, unit weights
        let a_hat = degree_normalize(&path_matrix(4)).unwrap();
        let y0 = labels_from(&[1.0, 0.5, 0.5, 0.0], &[true, false, false, true]);
        let cfg = PropagationConfig {
            max_iters: 100,
            tolerance: 1e-10,
        };
        let result = propagate(&a_hat, &y0, &cfg).unwrap();
        assert!(result.converged);
        assert!((result.labels.p_malicious(1) - 2.0 / 3.0).abs() < 1e-6);
        assert!((result.labels.p_malicious(2) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn star_center_balances_opposite_leaves() {
        let mut t = Vec::new();
        for leaf in [1u32, 2u32] {
            t.push((0, leaf, 1.0));
            t.push((leaf, 0, 1.0));
        }
        let a_hat = degree_normalize(&CsrMatrix::from_triplets(3, t)).unwrap();
        let y0 = labels_from(&[0.5, 0.0, 1.0], &[false, true, true]);
        let result = propagate(&a_hat, &y0, &PropagationConfig::default()).unwrap();
        assert!((result.labels.p_malicious(0) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn fully_masked_matrix_is_a_fixed_point() {
        let a_hat = degree_normalize(&path_matrix(3)).unwrap();
        let y0 = labels_from(&[1.0, 0.05, 0.95], &[true, true, true]);
        let result = propagate(&a_hat, &y0, &PropagationConfig::default()).unwrap();
        assert!(result.converged);
        assert_eq!(result.iterations_used, 1);
        assert_eq!(result.labels.rows, y0.rows);
        assert_eq!(result.residual_trace, vec![0.0]);
    }

    #[test]
    fn unmasked_pair_oscillates_without_converging() {
        // A fully unmasked two-node graph is the classic bipartite
        // oscillation: each step swaps the rows, the residual never decays,
        // and the run must report non-convergence instead of pretending.
        let a = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let y0 = labels_from(&[0.2, 0.8], &[false, false]);
        let cfg = PropagationConfig {
            max_iters: 100,
            tolerance: 1e-12,
        };
        let result = dense_oracle(&a, &y0, &cfg).unwrap();
        assert!(!result.converged);
        assert_eq!(result.iterations_used, 100);
        let first = result.residual_trace[0];
        assert!(result.residual_trace.iter().all(|r| (r - first).abs() < 1e-12));
        for i in 0..2 {
            let p = result.labels.p_malicious(i);
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn dense_oracle_matches_sparse_on_small_graph() {
        let a_sparse = path_matrix(6);
        let a_dense = a_sparse.to_dense();
        let a_hat = degree_normalize(&a_sparse).unwrap();
        let y0 = labels_from(
            &[0.95, 0.5, 0.5, 0.5, 0.5, 0.02],
            &[true, false, false, false, false, true],
        );
        let cfg = PropagationConfig {
            max_iters: 50,
            tolerance: 1e-9,
        };
        let sparse = propagate(&a_hat, &y0, &cfg).unwrap();
        let dense = dense_oracle(&a_dense, &y0, &cfg).unwrap();
        assert_eq!(sparse.iterations_used, dense.iterations_used);
        for i in 0..6 {
            for c in 0..2 {
                assert!((sparse.labels.rows[i][c] - dense.labels.rows[i][c]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn mask_and_stochasticity_hold_every_iteration() {
        let a_hat = degree_normalize(&path_matrix(5)).unwrap();
        let y0 = labels_from(
            &[1.0, 0.5, 0.5, 0.5, 0.0],
            &[true, false, false, false, true],
        );
        let cfg = PropagationConfig {
            max_iters: 40,
            tolerance: 1e-12,
        };
        let mut checked = 0;
        propagate_with(&a_hat, &y0, &cfg, |_, rows, _| {
            for (i, row) in rows.iter().enumerate() {
                if y0.mask[i] {
                    assert_eq!(*row, y0.rows[i], "masked row drifted");
                }
                assert!((row[0] + row[1] - 1.0).abs() <= 1e-9);
                assert!(row[0] >= 0.0 && row[1] >= 0.0);
            }
            checked += 1;
        })
        .unwrap();
        assert!(checked > 0);
    }

    #[test]
    fn automorphic_nodes_get_equal_scores() {
        // 0 and 4 are both masked at 1.0; 1 and 3 are mirror images.
        let a_hat = degree_normalize(&path_matrix(5)).unwrap();
        let y0 = labels_from(
            &[1.0, 0.5, 0.5, 0.5, 1.0],
            &[true, false, false, false, true],
        );
        let cfg = PropagationConfig {
            max_iters: 100,
            tolerance: 1e-12,
        };
        let result = propagate(&a_hat, &y0, &cfg).unwrap();
        assert!((result.labels.p_malicious(1) - result.labels.p_malicious(3)).abs() <= 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let a_hat = degree_normalize(&path_matrix(4)).unwrap();
        let y0 = labels_from(&[0.5, 0.5], &[false, false]);
        assert!(matches!(
            propagate(&a_hat, &y0, &PropagationConfig::default()),
            Err(PropagationError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dense_oracle_size_cap() {
        let n = 1001;
        let a = vec![vec![0.0; n]; n];
        let y0 = labels_from(&vec![0.5; n], &vec![false; n]);
        assert!(matches!(
            dense_oracle(&a, &y0, &PropagationConfig::default()),
            Err(PropagationError::SizeExceeded { .. })
        ));
    }

    #[test]
    fn single_masked_node_is_unchanged() {
        let a = vec![vec![1.0]];
        let y0 = labels_from(&[0.95], &[true]);
        let result = dense_oracle(&a, &y0, &PropagationConfig::default()).unwrap();
        assert_eq!(result.labels.rows, y0.rows);
        assert!(result.converged);
    }
}
