//! One-hidden-layer MLP classifier (ReLU + softmax) with analytic forward
//! and backward passes over composite semi-supervised minibatch losses.
//!
//! Parameters live in [`ModelParams`]; the flat layout used by
//! [`ModelParams::flatten`] is `w1 | b1 | w2 | b2`, row-major. Server
//! averaging, gradient corrections and loss-landscape directions all work on
//! that layout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Probabilities are clamped to this floor before any logarithm.
pub(crate) const LOG_FLOOR: f64 = 1e-12;

pub(crate) fn ln_clamped(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl MlpShape {
    pub fn param_count(&self) -> usize {
        self.hidden * self.input + self.hidden + self.classes * self.hidden + self.classes
    }
}

/// Weights and biases of the classifier; the object exchanged between
/// clients and server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(shape: MlpShape) -> Self {
        ModelParams {
            w1: DenseMatrix::zeros(shape.hidden, shape.input),
            b1: vec![0.0; shape.hidden],
            w2: DenseMatrix::zeros(shape.classes, shape.hidden),
            b2: vec![0.0; shape.classes],
        }
    }

    /// Uniform weight init on [-s, s] with s = sqrt(6 / (fan_in + fan_out));
    /// biases start at zero.
    pub fn init(shape: MlpShape, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(shape);
        let s1 = (6.0 / (shape.input + shape.hidden) as f64).sqrt();
        for w in p.w1.as_mut_slice() {
            *w = rng.random_range(-s1..=s1);
        }
        let s2 = (6.0 / (shape.hidden + shape.classes) as f64).sqrt();
        for w in p.w2.as_mut_slice() {
            *w = rng.random_range(-s2..=s2);
        }
        p
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape {
            input: self.w1.cols(),
            hidden: self.w1.rows(),
            classes: self.w2.rows(),
        }
    }

    /// Dimensions must be mutually consistent.
    pub fn validate(&self) -> Result<()> {
        let s = self.shape();
        if self.b1.len() != s.hidden || self.w2.cols() != s.hidden || self.b2.len() != s.classes {
            return Err(Error::Shape(format!(
                "inconsistent parameter blocks: w1 {}x{}, b1 {}, w2 {}x{}, b2 {}",
                self.w1.rows(),
                self.w1.cols(),
                self.b1.len(),
                self.w2.rows(),
                self.w2.cols(),
                self.b2.len()
            )));
        }
        Ok(())
    }

    fn blocks(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        let ModelParams { w1, b1, w2, b2 } = self;
        [w1.as_mut_slice(), b1, w2.as_mut_slice(), b2]
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in self.blocks() {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn unflatten(shape: MlpShape, flat: &[f64]) -> Result<Self> {
        if flat.len() != shape.param_count() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, shape needs {}",
                flat.len(),
                shape.param_count()
            )));
        }
        let mut p = Self::zeros(shape);
        let mut at = 0;
        for b in p.blocks_mut() {
            b.copy_from_slice(&flat[at..at + b.len()]);
            at += b.len();
        }
        Ok(p)
    }

    /// `self += s * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        for (mine, theirs) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in mine.iter_mut().zip(theirs) {
                *x += s * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in self.blocks_mut() {
            for x in b {
                *x *= s;
            }
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    /// `self -= eta * (grad + corr)`; the sum is formed before scaling so an
    /// exactly opposite correction cancels a gradient bit-for-bit.
    pub fn sgd_step(&mut self, grad: &Self, corr: Option<&Self>, eta: f64) {
        match corr {
            Some(c) => {
                for ((mine, g), d) in self
                    .blocks_mut()
                    .into_iter()
                    .zip(grad.blocks())
                    .zip(c.blocks())
                {
                    for ((x, g), d) in mine.iter_mut().zip(g).zip(d) {
                        *x -= eta * (g + d);
                    }
                }
            }
            None => self.add_scaled(grad, -eta),
        }
    }

    pub fn linf_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum()
    }

    pub fn linf_distance(&self, other: &Self) -> f64 {
        self.blocks()
            .iter()
            .zip(other.blocks().iter())
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|x| x.is_finite()))
    }
}

fn softmax_rows(logits: &mut DenseMatrix) {
    let cols = logits.cols();
    for i in 0..logits.rows() {
        let row = logits.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
        debug_assert_eq!(row.len(), cols);
    }
}

struct ForwardTrace {
    pre_hidden: DenseMatrix,
    hidden: DenseMatrix,
    probs: DenseMatrix,
}

fn forward_trace(params: &ModelParams, batch: &DenseMatrix) -> Result<ForwardTrace> {
    let shape = params.shape();
    if batch.cols() != shape.input {
        return Err(Error::Shape(format!(
            "batch has {} columns, model expects {}",
            batch.cols(),
            shape.input
        )));
    }
    let mut pre_hidden = batch.matmul(&params.w1.transposed())?;
    pre_hidden.add_row_vector(&params.b1);
    let mut hidden = pre_hidden.clone();
    for x in hidden.as_mut_slice() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let mut logits = hidden.matmul(&params.w2.transposed())?;
    logits.add_row_vector(&params.b2);
    softmax_rows(&mut logits);
    Ok(ForwardTrace {
        pre_hidden,
        hidden,
        probs: logits,
    })
}

/// Class-probability rows for a batch: ReLU hidden layer, then softmax with
/// row-max subtraction.
pub fn forward(params: &ModelParams, batch: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(forward_trace(params, batch)?.probs)
}

/// One term of the composite minibatch loss.
struct BatchTerm<'a> {
    inputs: &'a DenseMatrix,
    targets: &'a DenseMatrix,
    /// weight of the cross-entropy part
    ce_weight: f64,
    /// weight of the KL-to-uniform confidence penalty on the model output
    conf_weight: f64,
}

/// Gradient (and value) of
/// `ce(labeled) + alpha0 * ce(unlabeled, soft targets) + alpha2 * r2(unlabeled)`
/// with every cross-entropy / KL term averaged over its own batch. Either
/// batch may be `None`; with both absent the gradient is zero.
pub fn backward(
    params: &ModelParams,
    labeled: Option<(&DenseMatrix, &DenseMatrix)>,
    unlabeled: Option<(&DenseMatrix, &DenseMatrix)>,
    alpha0: f64,
    alpha2: f64,
) -> Result<(ModelParams, f64)> {
    let mut grad = ModelParams::zeros(params.shape());
    let mut loss = 0.0;
    let mut terms: Vec<BatchTerm> = Vec::new();
    if let Some((x, y)) = labeled {
        terms.push(BatchTerm {
            inputs: x,
            targets: y,
            ce_weight: 1.0,
            conf_weight: 0.0,
        });
    }
    if let Some((u, v)) = unlabeled {
        terms.push(BatchTerm {
            inputs: u,
            targets: v,
            ce_weight: alpha0,
            conf_weight: alpha2,
        });
    }

    for term in terms {
        let batch = term.inputs.rows();
        if batch == 0 {
            continue;
        }
        if term.targets.rows() != batch {
            return Err(Error::Shape(format!(
                "{batch} input rows vs {} target rows",
                term.targets.rows()
            )));
        }
        let trace = forward_trace(params, term.inputs)?;
        let classes = trace.probs.cols();
        if term.targets.cols() != classes {
            return Err(Error::Shape(format!(
                "targets have {} classes, model emits {classes}",
                term.targets.cols()
            )));
        }
        let inv = 1.0 / batch as f64;

        // dLoss/dlogits, and the loss value from the same forward pass.
        let mut logit_grad = DenseMatrix::zeros(batch, classes);
        let mut ce_sum = 0.0;
        let mut kl_sum = 0.0;
        for i in 0..batch {
            let p = trace.probs.row(i);
            let t = term.targets.row(i);
            let g = logit_grad.row_mut(i);
            let mut plogp = 0.0;
            for &pj in p {
                plogp += pj * ln_clamped(pj);
            }
            for j in 0..classes {
                ce_sum -= t[j] * ln_clamped(p[j]);
                let mut gj = term.ce_weight * (p[j] - t[j]);
                if term.conf_weight != 0.0 {
                    gj += term.conf_weight * p[j] * (ln_clamped(p[j]) - plogp);
                }
                g[j] = gj * inv;
            }
            if term.conf_weight != 0.0 {
                kl_sum += (classes as f64).ln() + plogp;
            }
        }
        loss += term.ce_weight * ce_sum * inv + term.conf_weight * (kl_sum * inv).max(0.0);

        // Backprop: logits -> (w2, b2) -> hidden -> (w1, b1).
        grad.w2.add_scaled_matrix(&logit_grad.transpose_matmul(&trace.hidden)?, 1.0);
        for row in logit_grad.iter_rows() {
            for (b, g) in grad.b2.iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut hidden_grad = logit_grad.matmul(&params.w2)?;
        for (h, a) in hidden_grad
            .as_mut_slice()
            .iter_mut()
            .zip(trace.pre_hidden.as_slice())
        {
            if *a <= 0.0 {
                *h = 0.0;
            }
        }
        grad.w1.add_scaled_matrix(&hidden_grad.transpose_matmul(term.inputs)?, 1.0);
        for row in hidden_grad.iter_rows() {
            for (b, g) in grad.b1.iter_mut().zip(row) {
                *b += g;
            }
        }
    }
    Ok((grad, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    fn small_params(seed: u64) -> ModelParams {
        let shape = MlpShape {
            input: 5,
            hidden: 4,
            classes: 3,
        };
        ModelParams::init(shape, &mut seeds::rng(seed, "test-init", 0))
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = seeds::rng(seed, "test-batch", 0);
        let data = (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_rows() {
        let shape = MlpShape {
            input: 6,
            hidden: 3,
            classes: 4,
        };
        let p = ModelParams::zeros(shape);
        let batch = random_batch(5, 6, 1);
        let probs = forward(&p, &batch).unwrap();
        for row in probs.iter_rows() {
            for &v in row {
                assert_eq!(v, 0.25);
            }
        }
    }

    #[test]
    fn duplicate_rows_get_identical_outputs() {
        let p = small_params(2);
        let row = random_batch(1, 5, 3);
        let batch = DenseMatrix::from_rows(&[row.row(0), row.row(0)]).unwrap();
        let probs = forward(&p, &batch).unwrap();
        assert_eq!(probs.row(0), probs.row(1));
    }

    #[test]
    fn rows_sum_to_one() {
        let p = small_params(4);
        let batch = random_batch(8, 5, 5);
        let probs = forward(&p, &batch).unwrap();
        for row in probs.iter_rows() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sums to {sum}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let p = small_params(6);
        let batch = random_batch(4, 5, 7);
        let a = forward(&p, &batch).unwrap();
        let b = forward(&p, &batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = small_params(8);
        let batch = random_batch(4, 6, 9);
        assert!(forward(&p, &batch).is_err());
    }

    #[test]
    fn flatten_round_trip_is_identity() {
        let p = small_params(10);
        let flat = p.flatten();
        let q = ModelParams::unflatten(p.shape(), &flat).unwrap();
        assert_eq!(p, q);
        assert!(ModelParams::unflatten(p.shape(), &flat[1..]).is_err());
    }

    #[test]
    fn flatten_is_linear() {
        let p = small_params(11);
        let q = small_params(12);
        let sum: Vec<f64> = p
            .flatten()
            .iter()
            .zip(q.flatten())
            .map(|(a, b)| a + b)
            .collect();
        let mut expected = p.clone();
        expected.add_scaled(&q, 1.0);
        let got = ModelParams::unflatten(p.shape(), &sum).unwrap();
        assert_eq!(got, expected);
        let zeros = ModelParams::zeros(p.shape());
        assert!(zeros.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_loss_has_zero_gradient() {
        let p = small_params(13);
        let (grad, loss) = backward(&p, None, None, 0.0, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.linf_norm(), 0.0);
    }

    #[test]
    fn confident_correct_predictions_have_tiny_gradient() {
        // Scale the second layer hard so softmax saturates at the right class.
        let shape = MlpShape {
            input: 2,
            hidden: 2,
            classes: 2,
        };
        let mut p = ModelParams::zeros(shape);
        p.w1 = DenseMatrix::from_vec(2, 2, vec![50.0, 0.0, 0.0, 50.0]).unwrap();
        p.w2 = DenseMatrix::from_vec(2, 2, vec![50.0, -50.0, -50.0, 50.0]).unwrap();
        let x = DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (grad, _) = backward(&p, Some((&x, &y)), None, 0.0, 0.0).unwrap();
        assert!(grad.linf_norm() < 1e-6, "norm {}", grad.linf_norm());
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let shape = MlpShape {
            input: 1,
            hidden: 2,
            classes: 3,
        };
        let mut p = ModelParams::zeros(shape);
        p.w1 = DenseMatrix::from_vec(2, 1, vec![1e3, -1e3]).unwrap();
        p.w2 = DenseMatrix::from_vec(3, 2, vec![1.0, 0.0, -1.0, 0.5, 0.25, -0.25]).unwrap();
        let batch = DenseMatrix::from_vec(2, 1, vec![1.0, -1.0]).unwrap();
        let probs = forward(&p, &batch).unwrap();
        assert!(probs.all_finite());
        for row in probs.iter_rows() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
