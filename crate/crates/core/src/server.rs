//! Server aggregation and the communication-round loop.
//!
//! The round order is: aggregate last round's uploads, broadcast, then each
//! client refreshes its pseudo labels, updates its correction term and runs
//! its local SGD steps. Uploads of the round before the first equal the
//! shared initial model, so the first aggregate is a no-op and the first
//! correction update stays at zero.
//!
//! Normalized averaging rescales each client's model delta by
//! `tau_bar / tau_k` before weighting; plain averaging keeps the deltas as
//! they are. Both are computed in delta form `theta - sum_k omega_k s_k
//! (theta - theta_k)` so a homogeneous fleet collapses to the plain weighted
//! mean bit-for-bit.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::client::ClientState;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, GapSample};
use crate::nn::ModelParams;
use crate::objective::LossWeights;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Which pieces of the algorithm a run uses. The ablations differ only in
/// two switches (gradient correction, normalized averaging) and in how
/// pseudo labels are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmVariant {
    /// Correction + normalized averaging + soft labels.
    FedShvr,
    /// Normalized averaging only (no correction).
    FedSh,
    /// Correction only (plain weighted averaging).
    FedSvr,
    /// Supervised baseline: labeled data only, plain averaging.
    FedAvgSupervised,
    /// Hard pseudo labels, no correction, plain averaging.
    FedPseudo,
}

impl AlgorithmVariant {
    pub fn uses_correction(self) -> bool {
        matches!(self, AlgorithmVariant::FedShvr | AlgorithmVariant::FedSvr)
    }

    pub fn normalized_averaging(self) -> bool {
        matches!(self, AlgorithmVariant::FedShvr | AlgorithmVariant::FedSh)
    }

    /// Whether the variant looks at unlabeled data at all.
    pub fn uses_unlabeled(self) -> bool {
        !matches!(self, AlgorithmVariant::FedAvgSupervised)
    }

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmVariant::FedShvr => "fed-shvr",
            AlgorithmVariant::FedSh => "fed-sh",
            AlgorithmVariant::FedSvr => "fed-svr",
            AlgorithmVariant::FedAvgSupervised => "fed-avg-supervised",
            AlgorithmVariant::FedPseudo => "fed-pseudo",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub theta: ModelParams,
    pub round: u64,
    pub eta: f64,
    pub tau_bar: f64,
    pub omegas: Vec<f64>,
    pub taus: Vec<usize>,
    pub variant: AlgorithmVariant,
}

/// `tau_bar = sum_k omega_k tau_k`. A homogeneous fleet gets the shared
/// value exactly, so the normalized update collapses to plain averaging
/// without rounding residue.
pub fn weighted_tau_bar(omegas: &[f64], taus: &[usize]) -> f64 {
    if taus.iter().all(|&t| t == taus[0]) {
        return taus[0] as f64;
    }
    omegas
        .iter()
        .zip(taus)
        .map(|(w, &t)| w * t as f64)
        .sum()
}

/// One round of server aggregation. Expects exactly one upload per client;
/// `uploads` are `theta_k^{t-1, tau_k}`.
pub fn aggregate(server: &ServerState, uploads: &[(usize, &ModelParams)]) -> Result<ModelParams> {
    let k = server.omegas.len();
    if uploads.len() != k {
        return Err(Error::Protocol(format!(
            "expected {k} uploads, got {}",
            uploads.len()
        )));
    }
    let mut seen = vec![false; k];
    for &(id, params) in uploads {
        if id >= k {
            return Err(Error::Protocol(format!("unknown client id {id}")));
        }
        if seen[id] {
            return Err(Error::Protocol(format!("duplicate upload from client {id}")));
        }
        seen[id] = true;
        if params.shape() != server.theta.shape() {
            return Err(Error::Protocol(format!(
                "client {id} uploaded parameters of a different shape"
            )));
        }
    }

    let mut next = server.theta.clone();
    for &(id, params) in uploads {
        let scale = if server.variant.normalized_averaging() {
            server.tau_bar / server.taus[id] as f64
        } else {
            1.0
        };
        let delta = server.theta.sub(params);
        next.add_scaled(&delta, -server.omegas[id] * scale);
    }
    Ok(next)
}

/// Metrics recorded once per communication round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    /// Global objective at the broadcast model and freshly updated labels.
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub gap: Option<GapSample>,
    /// `max_element |sum_k omega_k d_k|`; zero when the variant runs
    /// without corrections.
    pub correction_sum_residual: f64,
    pub taus: Vec<usize>,
    pub alpha0_effective: f64,
    pub wall_ms: f64,
}

/// A server plus its client fleet, ready to run rounds.
pub struct Simulation {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub weights: LossWeights,
    pub epochs: usize,
    pub test_set: Option<Arc<Dataset>>,
    /// Evaluate the optimality gap every `gap_interval` rounds (0 = never).
    pub gap_interval: u64,
    /// Keep each client's summed per-step gradients from the last round,
    /// for the update-rule identity checks.
    pub record_grad_sums: bool,
    pub last_grad_sums: Vec<ModelParams>,
}

struct ClientOutcome {
    loss: f64,
    grad: Option<ModelParams>,
    label_motion: Option<f64>,
    grad_sum: ModelParams,
}

fn map_clients<T, F>(clients: &mut [ClientState], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut ClientState) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        clients.par_iter_mut().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        clients.iter_mut().map(f).collect()
    }
}

impl Simulation {
    /// Execute one communication round and record its metrics.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let start = Instant::now();
        let t = self.server.round + 1;

        let uploads: Vec<(usize, &ModelParams)> = self
            .clients
            .iter()
            .map(|c| (c.id, &c.last_local))
            .collect();
        let theta_prev = self.server.theta.clone();
        let theta_new = aggregate(&self.server, &uploads)?;
        drop(uploads);
        self.server.theta = theta_new;
        self.server.round = t;

        let alpha0_eff = self.weights.alpha0_at_round(t, self.epochs as u32);
        let compute_gap = self.gap_interval > 0 && t % self.gap_interval == 0;
        let variant = self.server.variant;
        let weights = self.weights;
        let eta = self.server.eta;
        let tau_bar = self.server.tau_bar;
        let theta_bcast = &self.server.theta;

        let outcomes: Vec<Result<ClientOutcome>> = map_clients(&mut self.clients, |c| {
            let old_pseudo = (compute_gap && variant.uses_unlabeled()).then(|| c.pseudo.clone());
            if variant.uses_unlabeled() {
                c.refresh_pseudo_labels(theta_bcast, alpha0_eff, weights.alpha1)?;
            }
            if variant.uses_correction() {
                c.update_correction(&theta_prev, theta_bcast, eta, tau_bar);
            }
            let loss = c.full_loss(theta_bcast, &weights, alpha0_eff)?;
            let grad = if compute_gap {
                Some(c.full_gradient(theta_bcast, &weights, alpha0_eff)?)
            } else {
                None
            };
            let label_motion = old_pseudo.map(|old| c.pseudo.frobenius_distance_sq(&old));
            let run = c.local_sgd_run(theta_bcast, &weights, alpha0_eff, eta)?;
            c.last_local = run.theta_end;
            Ok(ClientOutcome {
                loss,
                grad,
                label_motion,
                grad_sum: run.grad_sum,
            })
        });

        // Fold sequentially in client order so parallel execution cannot
        // perturb floating-point sums.
        let mut train_loss = 0.0;
        let mut grad_total: Option<ModelParams> = None;
        let mut label_motion = 0.0;
        let mut grad_sums = Vec::new();
        for (outcome, omega) in outcomes.into_iter().zip(&self.server.omegas) {
            let outcome = outcome?;
            train_loss += omega * outcome.loss;
            if let Some(g) = outcome.grad {
                grad_total
                    .get_or_insert_with(|| ModelParams::zeros(g.shape()))
                    .add_scaled(&g, *omega);
            }
            if let Some(m) = outcome.label_motion {
                label_motion += omega * m;
            }
            if self.record_grad_sums {
                grad_sums.push(outcome.grad_sum);
            }
        }
        self.last_grad_sums = grad_sums;

        let gap = grad_total.map(|g| {
            let grad_norm_sq = g.l2_norm_sq();
            GapSample {
                round: t,
                grad_norm_sq,
                label_motion,
                gap: grad_norm_sq + label_motion,
            }
        });

        let correction_sum_residual = if variant.uses_correction() {
            let mut sum = ModelParams::zeros(self.server.theta.shape());
            for (c, omega) in self.clients.iter().zip(&self.server.omegas) {
                sum.add_scaled(&c.correction, *omega);
            }
            sum.linf_norm()
        } else {
            0.0
        };

        let test_accuracy = match &self.test_set {
            Some(test) => Some(metrics::test_accuracy(&self.server.theta, test)?),
            None => None,
        };

        Ok(RoundMetrics {
            round: t,
            train_loss,
            test_accuracy,
            gap,
            correction_sum_residual,
            taus: self.server.taus.clone(),
            alpha0_effective: alpha0_eff,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn run(&mut self, rounds: u64) -> Result<Vec<RoundMetrics>> {
        let mut out = Vec::with_capacity(rounds as usize);
        for _ in 0..rounds {
            out.push(self.run_round()?);
        }
        Ok(out)
    }
}
