//! Losses and regularizers of the semi-supervised objective.
//!
//! The per-client cost is
//!
//! ```text
//! F_k(theta, vhat) = ce(labeled) + alpha0 * ce(unlabeled, vhat)
//!                  + alpha1 * r1(vhat) + alpha2 * r2(theta)
//! ```
//!
//! where `r1` penalizes confident pseudo labels and `r2` penalizes confident
//! model outputs on unlabeled data, both as mean KL divergence to the uniform
//! distribution. `r1` does not depend on `theta`, so it never contributes to
//! model gradients. The global objective is the client-weighted sum
//! `F = sum_k omega_k F_k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::nn::{self, ln_clamped, ModelParams};
use crate::pseudo::PseudoLabelTable;

/// Coefficients of the composite loss. `alpha0` is the target weight for the
/// unsupervised cross-entropy; during the first `alpha0_ramp_epochs` local
/// epochs its effective value ramps linearly from 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha0_ramp_epochs: u32,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha0", self.alpha0),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(name, format!("must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Effective `alpha0` for communication round `t` (1-based) when each
    /// round runs `epochs_per_round` local epochs. Round `t` uses the ramp
    /// value at `t * epochs_per_round` elapsed epochs, so the very first
    /// round already trains with a small unsupervised weight.
    pub fn alpha0_at_round(&self, round: u64, epochs_per_round: u32) -> f64 {
        if self.alpha0_ramp_epochs == 0 {
            return self.alpha0;
        }
        let elapsed = (round * epochs_per_round as u64) as f64;
        let frac = (elapsed / self.alpha0_ramp_epochs as f64).min(1.0);
        self.alpha0 * frac
    }
}

/// Mean cross-entropy `-(1/N) sum_i <t_i, log p_i>` between target rows and
/// prediction rows; predictions are clamped at 1e-12 before the log.
pub fn cross_entropy(targets: &DenseMatrix, predictions: &DenseMatrix) -> Result<f64> {
    if targets.rows() != predictions.rows() || targets.cols() != predictions.cols() {
        return Err(Error::Shape(format!(
            "cross_entropy {}x{} vs {}x{}",
            targets.rows(),
            targets.cols(),
            predictions.rows(),
            predictions.cols()
        )));
    }
    if targets.rows() == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (t, p) in targets.iter_rows().zip(predictions.iter_rows()) {
        for (&tj, &pj) in t.iter().zip(p) {
            if tj != 0.0 {
                sum -= tj * ln_clamped(pj);
            }
        }
    }
    Ok(sum / targets.rows() as f64)
}

/// KL(p, u) = sum_j p_j log(C p_j), with the convention 0 log 0 = 0.
/// Zero exactly when `p` is uniform; tiny negative rounding residue is
/// clamped away.
pub fn kl_to_uniform(p: &[f64]) -> f64 {
    let c = p.len() as f64;
    let mut kl = 0.0;
    for &pj in p {
        if pj > 0.0 {
            kl += pj * (c.ln() + ln_clamped(pj));
        }
    }
    kl.max(0.0)
}

/// Pseudo-label confidence penalty: mean KL-to-uniform over the table rows.
/// An empty table (client without unlabeled data) contributes 0.
pub fn r1(vhat: &PseudoLabelTable) -> f64 {
    if vhat.rows() == 0 {
        return 0.0;
    }
    let sum: f64 = vhat.iter_rows().map(kl_to_uniform).sum();
    sum / vhat.rows() as f64
}

/// Model-output confidence penalty: mean KL-to-uniform of the predictions on
/// an unlabeled batch. An empty batch contributes 0.
pub fn r2(params: &ModelParams, unlabeled: &DenseMatrix) -> Result<f64> {
    if unlabeled.rows() == 0 {
        return Ok(0.0);
    }
    let probs = nn::forward(params, unlabeled)?;
    let sum: f64 = probs.iter_rows().map(kl_to_uniform).sum();
    Ok(sum / unlabeled.rows() as f64)
}

/// Full-batch data of one client as seen by the objective.
pub struct ClientObjectiveContext<'a> {
    pub labeled_inputs: &'a DenseMatrix,
    pub labeled_targets: &'a DenseMatrix,
    pub unlabeled_inputs: &'a DenseMatrix,
    pub pseudo_labels: &'a PseudoLabelTable,
}

/// Full-batch per-client objective `F_k`; used for diagnostics and the loss
/// landscape, not inside the SGD loop.
pub fn local_objective(
    ctx: &ClientObjectiveContext,
    params: &ModelParams,
    weights: &LossWeights,
    alpha0_effective: f64,
) -> Result<f64> {
    let mut value = 0.0;
    if ctx.labeled_inputs.rows() > 0 {
        let probs = nn::forward(params, ctx.labeled_inputs)?;
        value += cross_entropy(ctx.labeled_targets, &probs)?;
    }
    if ctx.unlabeled_inputs.rows() > 0 {
        if alpha0_effective != 0.0 {
            let probs = nn::forward(params, ctx.unlabeled_inputs)?;
            value += alpha0_effective * cross_entropy(ctx.pseudo_labels.as_matrix(), &probs)?;
        }
        if weights.alpha1 != 0.0 {
            value += weights.alpha1 * r1(ctx.pseudo_labels);
        }
        if weights.alpha2 != 0.0 {
            value += weights.alpha2 * r2(params, ctx.unlabeled_inputs)?;
        }
    }
    Ok(value)
}

/// Stochastic gradient of `F_k` on the given minibatches. `r1` has no
/// `theta` dependence, so only the cross-entropy terms and `r2` contribute.
/// Returns the gradient and the minibatch loss from the same forward passes.
pub fn stochastic_gradient(
    params: &ModelParams,
    labeled: Option<(&DenseMatrix, &DenseMatrix)>,
    unlabeled: Option<(&DenseMatrix, &DenseMatrix)>,
    alpha0_effective: f64,
    alpha2: f64,
) -> Result<(ModelParams, f64)> {
    nn::backward(params, labeled, unlabeled, alpha0_effective, alpha2)
}
