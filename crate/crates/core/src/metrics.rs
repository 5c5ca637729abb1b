//! Run diagnostics: optimality gap, test accuracy, multi-seed accuracy
//! spread, and the 2D loss-landscape slice.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::client::ClientState;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::nn::{self, ModelParams};
use crate::objective::LossWeights;
use crate::pseudo::PseudoLabelTable;
use crate::seeds;

/// One evaluation of the optimality gap
/// `g_t = |grad_theta F(theta, vhat_new)|^2 + sum_k omega_k |vhat_new_k - vhat_old_k|^2`.
/// The label-motion term is the squared Frobenius norm of the stacked row
/// difference, deliberately not normalized by the table size, so it scales
/// with the number of unlabeled samples.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GapSample {
    pub round: u64,
    pub grad_norm_sq: f64,
    pub label_motion: f64,
    pub gap: f64,
}

/// Compute the gap for a frozen fleet snapshot; the expectation in the
/// gradient term is realized as the exact full-shard gradient.
pub fn optimality_gap(
    clients: &[ClientState],
    omegas: &[f64],
    theta: &ModelParams,
    new_tables: &[PseudoLabelTable],
    old_tables: &[PseudoLabelTable],
    weights: &LossWeights,
    alpha0_effective: f64,
    round: u64,
) -> Result<GapSample> {
    let mut grad_total = ModelParams::zeros(theta.shape());
    let mut label_motion = 0.0;
    for (k, client) in clients.iter().enumerate() {
        let g = client.full_gradient(theta, weights, alpha0_effective)?;
        grad_total.add_scaled(&g, omegas[k]);
        label_motion += omegas[k] * new_tables[k].frobenius_distance_sq(&old_tables[k]);
    }
    let grad_norm_sq = grad_total.l2_norm_sq();
    Ok(GapSample {
        round,
        grad_norm_sq,
        label_motion,
        gap: grad_norm_sq + label_motion,
    })
}

/// Fraction of test samples whose argmax prediction matches the label; ties
/// break toward the smaller class index.
pub fn test_accuracy(params: &ModelParams, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut correct = 0usize;
    // Chunked so a large test set never materializes its activations at once.
    let chunk = 4096;
    let n = test.len();
    let mut at = 0;
    while at < n {
        let hi = (at + chunk).min(n);
        let indices: Vec<usize> = (at..hi).collect();
        let batch = test.gather_features(&indices);
        let probs = nn::forward(params, &batch)?;
        for (row, &i) in probs.iter_rows().zip(&indices) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == test.labels[i] {
                correct += 1;
            }
        }
        at = hi;
    }
    Ok(correct as f64 / n as f64)
}

/// Per-round population standard deviation across seeds:
/// `std_t = sqrt(sum_i (p_t^i - mean_t)^2 / S)` with divisor = seed count.
pub fn accuracy_std(per_seed_series: &[Vec<f64>]) -> Result<Vec<f64>> {
    let seeds = per_seed_series.len();
    if seeds < 2 {
        return Err(Error::config(
            "run.seeds",
            "std over seeds needs at least 2 seeds",
        ));
    }
    let rounds = per_seed_series[0].len();
    if per_seed_series.iter().any(|s| s.len() != rounds) {
        return Err(Error::Internal("unequal series lengths".into()));
    }
    let mut out = Vec::with_capacity(rounds);
    for t in 0..rounds {
        let mean: f64 = per_seed_series.iter().map(|s| s[t]).sum::<f64>() / seeds as f64;
        let var: f64 = per_seed_series
            .iter()
            .map(|s| (s[t] - mean) * (s[t] - mean))
            .sum::<f64>()
            / seeds as f64;
        out.push(var.sqrt());
    }
    Ok(out)
}

/// Grid description for a landscape slice: symmetric ranges, odd resolution
/// so the anchor sits exactly on the center cell.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridSpec {
    pub half_range: f64,
    pub resolution: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 3 || self.resolution % 2 == 0 {
            return Err(Error::config(
                "diagnostics.landscape.resolution",
                format!("must be odd and >= 3, got {}", self.resolution),
            ));
        }
        if !(self.half_range > 0.0) {
            return Err(Error::config(
                "diagnostics.landscape.half_range",
                "must be > 0",
            ));
        }
        Ok(())
    }

    pub fn axis(&self) -> Vec<f64> {
        let n = self.resolution;
        (0..n)
            .map(|i| {
                let frac = i as f64 / (n - 1) as f64;
                -self.half_range + 2.0 * self.half_range * frac
            })
            .collect()
    }
}

/// Values of the global objective on a 2D slice through parameter space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub values: DenseMatrix,
    pub direction_seed: u64,
}

/// Gaussian direction with unit l2 norm over the whole flattened vector.
fn unit_direction(len: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    let norm = crate::linalg::l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Evaluate `Q(b1, b2) = F(anchor + b1 d1 + b2 d2, vhat)` on a grid, with
/// `d1, d2` unit-norm random directions drawn from `direction_seed` and `F`
/// the full-batch global objective at the fleet's current pseudo labels.
pub fn landscape_slice(
    clients: &[ClientState],
    omegas: &[f64],
    anchor: &ModelParams,
    weights: &LossWeights,
    alpha0_effective: f64,
    spec: GridSpec,
    direction_seed: u64,
) -> Result<LandscapeGrid> {
    spec.validate()?;
    let shape = anchor.shape();
    let flat = anchor.flatten();
    let mut rng = seeds::rng(direction_seed, "landscape-directions", 0);
    let d1 = unit_direction(flat.len(), &mut rng);
    let d2 = unit_direction(flat.len(), &mut rng);

    let axis = spec.axis();
    let mut values = DenseMatrix::zeros(axis.len(), axis.len());
    for (i, &b1) in axis.iter().enumerate() {
        for (j, &b2) in axis.iter().enumerate() {
            let point: Vec<f64> = flat
                .iter()
                .zip(&d1)
                .zip(&d2)
                .map(|((&x, &a), &b)| x + b1 * a + b2 * b)
                .collect();
            let params = ModelParams::unflatten(shape, &point)?;
            let mut f = 0.0;
            for (k, client) in clients.iter().enumerate() {
                f += omegas[k] * client.full_loss(&params, weights, alpha0_effective)?;
            }
            values.set(i, j, f);
        }
    }
    Ok(LandscapeGrid {
        beta1: axis.clone(),
        beta2: axis,
        values,
        direction_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::nn::MlpShape;

    #[test]
    fn accuracy_corner_cases() {
        let ds = synth_blobs(2, 4, 3, 0.1, 1);
        let shape = MlpShape {
            input: 3,
            hidden: 2,
            classes: 2,
        };
        let zero = ModelParams::zeros(shape);
        // Uniform predictions tie; argmax breaks to class 0, so accuracy is
        // exactly the fraction of class-0 samples.
        let acc = test_accuracy(&zero, &ds).unwrap();
        assert_eq!(acc, 0.5);

        let one = Dataset {
            features: ds.features.clone(),
            labels: ds.labels.clone(),
            class_count: 2,
        };
        let single = Dataset {
            features: crate::linalg::DenseMatrix::from_rows(&[one.features.row(0)]).unwrap(),
            labels: vec![one.labels[0]],
            class_count: 2,
        };
        let acc = test_accuracy(&zero, &single).unwrap();
        assert!(acc == 0.0 || acc == 1.0);

        let empty = Dataset {
            features: crate::linalg::DenseMatrix::zeros(0, 3),
            labels: vec![],
            class_count: 2,
        };
        assert!(matches!(test_accuracy(&zero, &empty), Err(Error::EmptyTestSet)));
    }

    #[test]
    fn random_params_hover_near_chance() {
        let ds = synth_blobs(2, 100, 4, 0.3, 2);
        let shape = MlpShape {
            input: 4,
            hidden: 6,
            classes: 2,
        };
        let mut total = 0.0;
        for seed in 0..5u64 {
            let p = ModelParams::init(shape, &mut seeds::rng(seed, "chance", 0));
            total += test_accuracy(&p, &ds).unwrap();
        }
        let mean = total / 5.0;
        assert!((0.3..=0.7).contains(&mean), "mean accuracy {mean}");
    }

    #[test]
    fn std_hand_values() {
        let series = vec![vec![0.8, 0.5], vec![0.9, 0.5]];
        let std = accuracy_std(&series).unwrap();
        assert!((std[0] - 0.05).abs() < 1e-15);
        assert_eq!(std[1], 0.0);

        // Order of seeds cannot matter.
        let swapped = vec![series[1].clone(), series[0].clone()];
        assert_eq!(accuracy_std(&swapped).unwrap(), std);

        assert!(accuracy_std(&series[..1].to_vec()).is_err());

        let identical = vec![vec![0.7; 4]; 3];
        assert!(accuracy_std(&identical).unwrap().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn grid_spec_axis_is_symmetric() {
        let spec = GridSpec {
            half_range: 2.0,
            resolution: 5,
        };
        spec.validate().unwrap();
        let axis = spec.axis();
        assert_eq!(axis.len(), 5);
        assert_eq!(axis[2], 0.0);
        assert_eq!(axis[0], -2.0);
        assert_eq!(axis[4], 2.0);

        assert!(GridSpec {
            half_range: 1.0,
            resolution: 4
        }
        .validate()
        .is_err());
    }
}
