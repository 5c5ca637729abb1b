//! Pseudo-label prediction for unlabeled samples.
//!
//! With a confidence penalty of weight `alpha1` on the pseudo labels, the
//! per-sample label subproblem has the closed-form "sharpening" solution
//! `v_j = p_j^(alpha0/alpha1) / sum_l p_l^(alpha0/alpha1)`; with `alpha1 = 0`
//! it degenerates to the hard argmax label. [`oracle_solve`] is an
//! independent numerical minimizer of the same subproblem (projected
//! gradient descent on the simplex) used to validate the closed form; it
//! never calls [`sharpen`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, ProbabilityVector};
use crate::nn::{self, ln_clamped, ModelParams};

/// Soft labels of one client's unlabeled shard, one simplex row per sample,
/// index-aligned with the shard. Rows persist between rounds so label motion
/// can be measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelTable {
    client_id: usize,
    table: DenseMatrix,
}

impl PseudoLabelTable {
    /// All-uniform table: the neutral initial state before the first refresh.
    pub fn uniform(client_id: usize, rows: usize, classes: usize) -> Self {
        let mut table = DenseMatrix::zeros(rows, classes);
        let u = 1.0 / classes as f64;
        table.as_mut_slice().fill(u);
        PseudoLabelTable { client_id, table }
    }

    pub fn from_matrix(client_id: usize, table: DenseMatrix) -> Self {
        PseudoLabelTable { client_id, table }
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn rows(&self) -> usize {
        self.table.rows()
    }

    pub fn classes(&self) -> usize {
        self.table.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.table.row(i)
    }

    pub fn set_row(&mut self, i: usize, row: &[f64]) {
        self.table.row_mut(i).copy_from_slice(row);
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.table.iter_rows()
    }

    pub fn as_matrix(&self) -> &DenseMatrix {
        &self.table
    }

    /// Every row must lie on the simplex within 1e-9.
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.iter_rows().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ProbabilityVector::SIMPLEX_TOL
                || row.iter().any(|&v| v < 0.0)
            {
                return Err(Error::Internal(format!(
                    "pseudo label row {i} off the simplex (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    /// Squared Frobenius norm of the difference, unnormalized by the row
    /// count; this is the label-motion convention of the optimality gap.
    pub fn frobenius_distance_sq(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.table.rows(), other.table.rows());
        self.table
            .as_slice()
            .iter()
            .zip(other.table.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// One-hot label at the argmax; ties go to the smallest class index.
pub fn hard_label(p: &[f64]) -> Vec<f64> {
    let mut best = 0;
    for (j, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = j;
        }
    }
    let mut out = vec![0.0; p.len()];
    out[best] = 1.0;
    out
}

/// Temperature-style sharpening: entries raised to `ratio` and renormalized.
/// Computed as `exp(ratio * ln(max(p, 1e-12)))` to avoid `powf` underflow
/// surprises; `ratio == 1` returns the input unchanged.
pub fn sharpen(p: &[f64], ratio: f64) -> Vec<f64> {
    debug_assert!(ratio > 0.0, "sharpen ratio must be positive");
    if ratio == 1.0 {
        return p.to_vec();
    }
    let mut out: Vec<f64> = p.iter().map(|&pj| (ratio * ln_clamped(pj)).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Refresh a client's table at the current model: one forward pass over the
/// unlabeled shard, then sharpening with ratio `alpha0 / alpha1`, or hard
/// labels when `alpha1 == 0`. `alpha0` is the current (ramped) value.
pub fn update_pseudo_labels(
    client_id: usize,
    params: &ModelParams,
    unlabeled_inputs: &DenseMatrix,
    alpha0: f64,
    alpha1: f64,
) -> Result<PseudoLabelTable> {
    let classes = params.shape().classes;
    let mut table = DenseMatrix::zeros(unlabeled_inputs.rows(), classes);
    if unlabeled_inputs.rows() == 0 {
        return Ok(PseudoLabelTable::from_matrix(client_id, table));
    }
    let probs = nn::forward(params, unlabeled_inputs)?;
    for i in 0..probs.rows() {
        let row = if alpha1 > 0.0 {
            sharpen(probs.row(i), alpha0 / alpha1)
        } else {
            hard_label(probs.row(i))
        };
        table.row_mut(i).copy_from_slice(&row);
    }
    Ok(PseudoLabelTable::from_matrix(client_id, table))
}

/// Euclidean projection onto the probability simplex.
fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut rho = 0;
    let mut lambda = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (1.0 - cumsum) / (i + 1) as f64;
        if u + candidate > 0.0 {
            rho = i + 1;
            lambda = candidate;
        }
    }
    debug_assert!(rho > 0);
    v.iter().map(|&x| (x + lambda).max(0.0)).collect()
}

/// Independent minimizer of the pseudo-label subproblem
/// `alpha0 * <v, -log p> + alpha1 * KL(v, u)` over the simplex, by projected
/// gradient descent with Armijo backtracking. Intended for validation at
/// small class counts; fails rather than returning an unconverged point.
pub fn oracle_solve(p: &[f64], alpha0: f64, alpha1: f64) -> Result<Vec<f64>> {
    if alpha1 <= 0.0 {
        return Err(Error::Internal(
            "oracle_solve needs alpha1 > 0; use hard_label otherwise".into(),
        ));
    }
    let c = p.len();
    let neg_log_p: Vec<f64> = p.iter().map(|&pj| -ln_clamped(pj)).collect();
    let objective = |v: &[f64]| -> f64 {
        let ce: f64 = v.iter().zip(&neg_log_p).map(|(a, b)| a * b).sum();
        alpha0 * ce + alpha1 * crate::objective::kl_to_uniform(v)
    };
    let gradient = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .zip(&neg_log_p)
            .map(|(&vj, &nlp)| alpha0 * nlp + alpha1 * ((c as f64).ln() + ln_clamped(vj) + 1.0))
            .collect()
    };

    let mut v = vec![1.0 / c as f64; c];
    let mut value = objective(&v);
    let mut step = 1.0 / alpha1;
    const MAX_ITER: usize = 100_000;
    for _ in 0..MAX_ITER {
        let g = gradient(&v);
        // Armijo backtracking on the projected step.
        let mut improved = false;
        for _ in 0..60 {
            let trial: Vec<f64> = v.iter().zip(&g).map(|(x, gj)| x - step * gj).collect();
            let projected = project_to_simplex(&trial);
            let trial_value = objective(&projected);
            let move_sq: f64 = projected
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if trial_value <= value - 1e-4 / step * move_sq {
                if move_sq < 1e-26 {
                    return Ok(projected);
                }
                v = projected;
                value = trial_value;
                improved = true;
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            // Step collapsed below float resolution: stationary.
            return Ok(v);
        }
    }
    Err(Error::Internal(
        "pseudo-label oracle failed to converge".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::linf_distance;
    use crate::nn::MlpShape;
    use crate::seeds;
    use rand::Rng;

    fn random_simplex(c: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
        let mut v: Vec<f64> = (0..c).map(|_| -f64::ln(rng.random_range(1e-6..1.0))).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    }

    #[test]
    fn hard_label_cases() {
        assert_eq!(hard_label(&[0.1, 0.7, 0.2]), vec![0.0, 1.0, 0.0]);
        assert_eq!(hard_label(&[0.5, 0.5]), vec![1.0, 0.0]);
        assert_eq!(hard_label(&[0.0, 1.0, 0.0]), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn sharpen_hand_value() {
        let out = sharpen(&[0.6, 0.4], 2.0);
        assert!((out[0] - 0.36 / 0.52).abs() < 1e-12);
        assert!((out[1] - 0.16 / 0.52).abs() < 1e-12);
    }

    #[test]
    fn sharpen_identity_at_ratio_one() {
        let p = vec![0.3, 0.45, 0.25];
        assert_eq!(sharpen(&p, 1.0), p);
    }

    #[test]
    fn sharpen_keeps_uniform_uniform() {
        for c in [2, 5, 10] {
            let p = vec![1.0 / c as f64; c];
            for ratio in [0.2, 1.0, 3.5, 80.0] {
                let out = sharpen(&p, ratio);
                for &v in &out {
                    assert_eq!(v, out[0]);
                }
                let sum: f64 = out.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sharpen_preserves_order_and_simplex() {
        let mut rng = seeds::rng(21, "order", 0);
        for _ in 0..200 {
            let c = rng.random_range(2..=8usize);
            let p = random_simplex(c, &mut rng);
            let ratio = rng.random_range(0.01..100.0f64);
            let out = sharpen(&p, ratio);
            let sum: f64 = out.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(out.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
            for i in 0..c {
                for j in 0..c {
                    if p[i] > p[j] {
                        assert!(out[i] > out[j], "order broken at ratio {ratio}");
                    }
                }
            }
        }
    }

    #[test]
    fn large_ratio_approaches_hard_label() {
        let p = vec![0.45, 0.3, 0.25];
        let out = sharpen(&p, 50.0);
        assert!(linf_distance(&out, &hard_label(&p)) < 1e-2);
    }

    #[test]
    fn oracle_matches_sharpen_on_hand_case() {
        let p = [0.6, 0.4];
        let v = oracle_solve(&p, 2.0, 1.0).unwrap();
        assert!(linf_distance(&v, &sharpen(&p, 2.0)) < 1e-5);
    }

    #[test]
    fn oracle_pure_kl_returns_uniform() {
        let p = [0.9, 0.05, 0.05];
        let v = oracle_solve(&p, 0.0, 1.0).unwrap();
        assert!(linf_distance(&v, &[1.0 / 3.0; 3]) < 1e-8);
    }

    #[test]
    fn oracle_small_ratio_is_near_uniform() {
        let p = [0.7, 0.2, 0.1];
        let v = oracle_solve(&p, 0.01, 1.0).unwrap();
        assert!(linf_distance(&v, &[1.0 / 3.0; 3]) < 1e-2);
    }

    #[test]
    fn closed_form_matches_oracle_across_random_cases() {
        let mut rng = seeds::rng(22, "lemma", 0);
        for trial in 0..200 {
            let c = rng.random_range(2..=6usize);
            let p = random_simplex(c, &mut rng);
            let alpha0 = rng.random_range(0.05..4.0f64);
            let alpha1 = rng.random_range(0.2..4.0f64);
            let closed = sharpen(&p, alpha0 / alpha1);
            let numeric = oracle_solve(&p, alpha0, alpha1).unwrap();
            let dist = linf_distance(&closed, &numeric);
            assert!(dist < 1e-5, "trial {trial}: linf {dist}");
        }
    }

    #[test]
    fn refresh_modes() {
        let shape = MlpShape {
            input: 4,
            hidden: 3,
            classes: 5,
        };
        let inputs = {
            let mut rng = seeds::rng(23, "refresh", 0);
            let data = (0..6 * 4).map(|_| rng.random_range(0.0..1.0)).collect();
            DenseMatrix::from_vec(6, 4, data).unwrap()
        };

        // Zero params predict uniform, so soft labels stay uniform.
        let zero = ModelParams::zeros(shape);
        let t = update_pseudo_labels(0, &zero, &inputs, 1.0, 0.75).unwrap();
        for row in t.iter_rows() {
            for &v in row {
                assert!((v - 0.2).abs() < 1e-12);
            }
        }

        // alpha1 = 0 falls back to hard labels.
        let p = ModelParams::init(shape, &mut seeds::rng(24, "refresh-init", 0));
        let hard = update_pseudo_labels(0, &p, &inputs, 1.0, 0.0).unwrap();
        for row in hard.iter_rows() {
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 4);
        }
        hard.validate().unwrap();

        // Soft rows agree with the oracle on the same predictions.
        let soft = update_pseudo_labels(0, &p, &inputs, 1.3, 0.6).unwrap();
        soft.validate().unwrap();
        let probs = nn::forward(&p, &inputs).unwrap();
        for i in 0..probs.rows() {
            let oracle = oracle_solve(probs.row(i), 1.3, 0.6).unwrap();
            assert!(linf_distance(soft.row(i), &oracle) < 1e-5);
        }
    }

    #[test]
    fn projection_returns_simplex_points() {
        let mut rng = seeds::rng(25, "proj", 0);
        for _ in 0..100 {
            let c = rng.random_range(2..=7usize);
            let v: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = project_to_simplex(&v);
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&x| x >= 0.0));
        }
    }
}
