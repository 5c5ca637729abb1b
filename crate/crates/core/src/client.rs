//! Per-client state and the local SGD loop.
//!
//! Each client owns disjoint labeled/unlabeled shards, its pseudo-label
//! table, a gradient-correction term `d_k` and a private RNG stream, so
//! rounds can run clients in parallel with results identical to serial
//! execution.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::nn::ModelParams;
use crate::objective::{self, LossWeights};
use crate::pseudo::{self, PseudoLabelTable};

/// How minibatches are drawn from a shard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Shuffle once per epoch and walk the shard, wrapping into a freshly
    /// shuffled epoch mid-batch when the shard ends.
    EpochShuffle,
    /// Draw every batch uniformly with replacement.
    WithReplacement,
}

/// Number of local SGD iterations: `floor(max(M_k E / B_u, N_k E / B_l))`,
/// at least 1.
pub fn compute_tau(
    labeled: usize,
    unlabeled: usize,
    epochs: usize,
    batch_labeled: usize,
    batch_unlabeled: usize,
) -> Result<usize> {
    if labeled == 0 && unlabeled == 0 {
        return Err(Error::config(
            "partition",
            "a client with no data cannot participate",
        ));
    }
    let from_labeled = labeled * epochs / batch_labeled;
    let from_unlabeled = unlabeled * epochs / batch_unlabeled;
    Ok(from_labeled.max(from_unlabeled).max(1))
}

/// Shard walker for epoch-shuffled sampling.
#[derive(Debug, Clone)]
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn new(len: usize) -> Self {
        Cursor {
            order: (0..len).collect(),
            pos: len, // force a shuffle before the first draw
        }
    }

    fn next_positions(&mut self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Result of one client's local pass: the end model, the per-step minibatch
/// losses, and the summed per-step gradients (used by the server-side
/// identity checks).
#[derive(Debug, Clone)]
pub struct LocalRunResult {
    pub theta_end: ModelParams,
    pub steps_taken: usize,
    pub loss_trace: Vec<f64>,
    pub grad_sum: ModelParams,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    data: Arc<Dataset>,
    labeled_idx: Vec<usize>,
    unlabeled_idx: Vec<usize>,
    pub pseudo: PseudoLabelTable,
    /// Gradient-correction term `d_k`; starts at zero.
    pub correction: ModelParams,
    pub tau: usize,
    pub omega: f64,
    /// The model this client uploaded last round (`theta_k^{t-1, tau_k}`);
    /// before any round it equals the shared initial model.
    pub last_local: ModelParams,
    rng: ChaCha8Rng,
    labeled_cursor: Cursor,
    unlabeled_cursor: Cursor,
    sampling: SamplingMode,
    batch_labeled: usize,
    batch_unlabeled: usize,
}

impl ClientState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        data: Arc<Dataset>,
        labeled_idx: Vec<usize>,
        unlabeled_idx: Vec<usize>,
        omega: f64,
        tau: usize,
        batch_labeled: usize,
        batch_unlabeled: usize,
        sampling: SamplingMode,
        rng: ChaCha8Rng,
        init: &ModelParams,
    ) -> Self {
        let classes = data.class_count;
        let labeled_cursor = Cursor::new(labeled_idx.len());
        let unlabeled_cursor = Cursor::new(unlabeled_idx.len());
        let pseudo = PseudoLabelTable::uniform(id, unlabeled_idx.len(), classes);
        ClientState {
            id,
            data,
            labeled_idx,
            unlabeled_idx,
            pseudo,
            correction: ModelParams::zeros(init.shape()),
            tau,
            omega,
            last_local: init.clone(),
            rng,
            labeled_cursor,
            unlabeled_cursor,
            sampling,
            batch_labeled,
            batch_unlabeled,
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled_idx.len()
    }

    pub fn unlabeled_count(&self) -> usize {
        self.unlabeled_idx.len()
    }

    fn draw_positions(&mut self, labeled: bool) -> Vec<usize> {
        let (len, batch) = if labeled {
            (self.labeled_idx.len(), self.batch_labeled.min(self.labeled_idx.len()))
        } else {
            (
                self.unlabeled_idx.len(),
                self.batch_unlabeled.min(self.unlabeled_idx.len()),
            )
        };
        match self.sampling {
            SamplingMode::EpochShuffle => {
                let cursor = if labeled {
                    &mut self.labeled_cursor
                } else {
                    &mut self.unlabeled_cursor
                };
                cursor.next_positions(batch, &mut self.rng)
            }
            SamplingMode::WithReplacement => (0..batch)
                .map(|_| self.rng.random_range(0..len))
                .collect(),
        }
    }

    fn labeled_minibatch(&mut self) -> (DenseMatrix, DenseMatrix) {
        let positions = self.draw_positions(true);
        let indices: Vec<usize> = positions.iter().map(|&p| self.labeled_idx[p]).collect();
        (
            self.data.gather_features(&indices),
            self.data.one_hot_targets(&indices),
        )
    }

    fn unlabeled_minibatch(&mut self) -> (DenseMatrix, DenseMatrix) {
        let positions = self.draw_positions(false);
        let indices: Vec<usize> = positions.iter().map(|&p| self.unlabeled_idx[p]).collect();
        let mut targets = DenseMatrix::zeros(positions.len(), self.pseudo.classes());
        for (r, &p) in positions.iter().enumerate() {
            targets.row_mut(r).copy_from_slice(self.pseudo.row(p));
        }
        (self.data.gather_features(&indices), targets)
    }

    /// Refresh the pseudo-label table at the broadcast model.
    pub fn refresh_pseudo_labels(
        &mut self,
        params: &ModelParams,
        alpha0_effective: f64,
        alpha1: f64,
    ) -> Result<()> {
        if self.unlabeled_idx.is_empty() {
            return Ok(());
        }
        let inputs = self.data.gather_features(&self.unlabeled_idx);
        self.pseudo =
            pseudo::update_pseudo_labels(self.id, params, &inputs, alpha0_effective, alpha1)?;
        Ok(())
    }

    /// Apply the gradient-correction recursion at a round boundary.
    pub fn update_correction(
        &mut self,
        theta_prev: &ModelParams,
        theta_new: &ModelParams,
        eta: f64,
        tau_bar: f64,
    ) {
        self.correction = next_correction(
            &self.correction,
            theta_prev,
            theta_new,
            &self.last_local,
            eta,
            self.tau,
            tau_bar,
        );
    }

    /// Run `tau` corrected SGD steps from `theta_start`, drawing minibatches
    /// from this client's RNG stream. `alpha0_effective` is the ramped
    /// unsupervised weight for this round.
    pub fn local_sgd_run(
        &mut self,
        theta_start: &ModelParams,
        weights: &LossWeights,
        alpha0_effective: f64,
        eta: f64,
    ) -> Result<LocalRunResult> {
        let mut theta = theta_start.clone();
        let mut grad_sum = ModelParams::zeros(theta.shape());
        let mut loss_trace = Vec::with_capacity(self.tau);
        let use_unlabeled = !self.unlabeled_idx.is_empty()
            && (alpha0_effective != 0.0 || weights.alpha2 != 0.0);
        for _ in 0..self.tau {
            let labeled = if self.labeled_idx.is_empty() {
                None
            } else {
                Some(self.labeled_minibatch())
            };
            let unlabeled = if use_unlabeled {
                Some(self.unlabeled_minibatch())
            } else {
                None
            };
            let (grad, loss) = objective::stochastic_gradient(
                &theta,
                labeled.as_ref().map(|(x, y)| (x, y)),
                unlabeled.as_ref().map(|(u, v)| (u, v)),
                alpha0_effective,
                weights.alpha2,
            )?;
            theta.sgd_step(&grad, Some(&self.correction), eta);
            grad_sum.add_scaled(&grad, 1.0);
            loss_trace.push(loss);
        }
        Ok(LocalRunResult {
            theta_end: theta,
            steps_taken: self.tau,
            loss_trace,
            grad_sum,
        })
    }

    /// Deterministic full-shard gradient of `F_k` at `params`, computed in
    /// chunks so large shards never materialize at once.
    pub fn full_gradient(
        &self,
        params: &ModelParams,
        weights: &LossWeights,
        alpha0_effective: f64,
    ) -> Result<ModelParams> {
        self.full_gradient_chunked(params, weights, alpha0_effective, CHUNK)
    }

    fn full_gradient_chunked(
        &self,
        params: &ModelParams,
        weights: &LossWeights,
        alpha0_effective: f64,
        chunk_size: usize,
    ) -> Result<ModelParams> {
        let mut total = ModelParams::zeros(params.shape());
        if !self.labeled_idx.is_empty() {
            accumulate_chunked(&self.labeled_idx, chunk_size, |chunk, frac| {
                let x = self.data.gather_features(chunk);
                let y = self.data.one_hot_targets(chunk);
                let (g, _) = objective::stochastic_gradient(
                    params,
                    Some((&x, &y)),
                    None,
                    alpha0_effective,
                    weights.alpha2,
                )?;
                total.add_scaled(&g, frac);
                Ok(())
            })?;
        }
        if !self.unlabeled_idx.is_empty() && (alpha0_effective != 0.0 || weights.alpha2 != 0.0) {
            let positions: Vec<usize> = (0..self.unlabeled_idx.len()).collect();
            accumulate_chunked(&positions, chunk_size, |chunk, frac| {
                let indices: Vec<usize> = chunk.iter().map(|&p| self.unlabeled_idx[p]).collect();
                let u = self.data.gather_features(&indices);
                let mut v = DenseMatrix::zeros(chunk.len(), self.pseudo.classes());
                for (r, &p) in chunk.iter().enumerate() {
                    v.row_mut(r).copy_from_slice(self.pseudo.row(p));
                }
                let (g, _) = objective::stochastic_gradient(
                    params,
                    None,
                    Some((&u, &v)),
                    alpha0_effective,
                    weights.alpha2,
                )?;
                total.add_scaled(&g, frac);
                Ok(())
            })?;
        }
        Ok(total)
    }

    /// Deterministic full-shard objective `F_k` at `params`.
    pub fn full_loss(
        &self,
        params: &ModelParams,
        weights: &LossWeights,
        alpha0_effective: f64,
    ) -> Result<f64> {
        let mut value = 0.0;
        if !self.labeled_idx.is_empty() {
            accumulate_chunked(&self.labeled_idx, CHUNK, |chunk, frac| {
                let x = self.data.gather_features(chunk);
                let y = self.data.one_hot_targets(chunk);
                let probs = crate::nn::forward(params, &x)?;
                value += frac * objective::cross_entropy(&y, &probs)?;
                Ok(())
            })?;
        }
        if !self.unlabeled_idx.is_empty() {
            if alpha0_effective != 0.0 || weights.alpha2 != 0.0 {
                let positions: Vec<usize> = (0..self.unlabeled_idx.len()).collect();
                accumulate_chunked(&positions, CHUNK, |chunk, frac| {
                    let indices: Vec<usize> =
                        chunk.iter().map(|&p| self.unlabeled_idx[p]).collect();
                    let u = self.data.gather_features(&indices);
                    let probs = crate::nn::forward(params, &u)?;
                    if alpha0_effective != 0.0 {
                        let mut v = DenseMatrix::zeros(chunk.len(), self.pseudo.classes());
                        for (r, &p) in chunk.iter().enumerate() {
                            v.row_mut(r).copy_from_slice(self.pseudo.row(p));
                        }
                        value += frac
                            * alpha0_effective
                            * objective::cross_entropy(&v, &probs)?;
                    }
                    if weights.alpha2 != 0.0 {
                        let kl: f64 = probs.iter_rows().map(objective::kl_to_uniform).sum();
                        value += frac * weights.alpha2 * kl / chunk.len() as f64;
                    }
                    Ok(())
                })?;
            }
            if weights.alpha1 != 0.0 {
                value += weights.alpha1 * objective::r1(&self.pseudo);
            }
        }
        Ok(value)
    }
}

const CHUNK: usize = 2048;

/// Walk `items` in chunks, passing each chunk and its weight (chunk length
/// over total length) to `f`; per-chunk means combine into the full mean.
fn accumulate_chunked<F>(items: &[usize], chunk: usize, mut f: F) -> Result<()>
where
    F: FnMut(&[usize], f64) -> Result<()>,
{
    let total = items.len() as f64;
    for c in items.chunks(chunk) {
        f(c, c.len() as f64 / total)?;
    }
    Ok(())
}

/// The gradient-correction recursion:
/// `d_k <- d_k + (theta_prev - theta_new) / (eta tau_bar)
///            - (theta_prev - theta_local_end) / (eta tau_k)`.
pub fn next_correction(
    d_prev: &ModelParams,
    theta_prev: &ModelParams,
    theta_new: &ModelParams,
    theta_local_end: &ModelParams,
    eta: f64,
    tau: usize,
    tau_bar: f64,
) -> ModelParams {
    let mut d = d_prev.clone();
    let global = theta_prev.sub(theta_new);
    d.add_scaled(&global, 1.0 / (eta * tau_bar));
    let local = theta_prev.sub(theta_local_end);
    d.add_scaled(&local, -1.0 / (eta * tau as f64));
    d
}
