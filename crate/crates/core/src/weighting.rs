//! Task weighting strategies: uniform, uncertainty weights, gradient-norm
//! balancing, and dynamic weight averaging.
//!
//! Weighting scales per-task losses; it never changes per-task gradient
//! directions. Uncertainty weights are learnable log-variances updated by
//! the main optimizer; the other strategies keep their own state and treat
//! the resulting weights as constants inside the training loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DWA_TEMPERATURE: f64 = 2.0;
pub const DEFAULT_GRADNORM_ALPHA: f64 = 1.5;
const LAMBDA_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "strategy")]
pub enum WeightStrategy {
    Uniform,
    /// Learnable per-task log-variances s_t; the loss term is
    /// exp(-s_t) * l_t + s_t / 2 and s_t rides the main optimizer.
    Uncertainty,
    /// One gradient step per training step on |lambda_t g_t - gbar r_t^alpha|,
    /// followed by renormalization to sum T.
    GradNorm { alpha: f64, lr: f64 },
    /// Weights from the softmax of loss-ratio descent rates, per epoch.
    Dwa { temperature: f64 },
}

/// Mutable weighting state owned by one training loop.
#[derive(Clone, Debug)]
pub struct WeightState {
    pub strategy: WeightStrategy,
    /// Current multiplicative weights, always positive.
    pub lambdas: Vec<f64>,
    /// GradNorm: first observed loss per task.
    initial_losses: Vec<Option<f64>>,
    /// DWA: epoch-mean losses from the last two completed epochs.
    history: Vec<Vec<f64>>,
    /// Clamp events worth surfacing (zero prior losses and the like).
    pub warnings: Vec<String>,
}

impl WeightState {
    pub fn new(strategy: WeightStrategy, num_tasks: usize) -> Result<Self> {
        match strategy {
            WeightStrategy::GradNorm { alpha, lr } => {
                if !alpha.is_finite() || lr <= 0.0 {
                    return Err(Error::Config(format!(
                        "gradnorm needs finite alpha and lr > 0, got alpha={alpha} lr={lr}"
                    )));
                }
            }
            WeightStrategy::Dwa { temperature } => {
                if temperature <= 0.0 {
                    return Err(Error::Config(format!(
                        "dwa temperature must be positive, got {temperature}"
                    )));
                }
            }
            _ => {}
        }
        Ok(WeightState {
            strategy,
            lambdas: vec![1.0; num_tasks],
            initial_losses: vec![None; num_tasks],
            history: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.lambdas.len()
    }

    /// True if the strategy keeps learnable log-variance parameters.
    pub fn uses_uncertainty(&self) -> bool {
        matches!(self.strategy, WeightStrategy::Uncertainty)
    }

    /// Record the first observed loss per task (GradNorm reference point).
    pub fn observe_initial(&mut self, losses: &[Option<f64>]) {
        for (slot, l) in self.initial_losses.iter_mut().zip(losses) {
            if slot.is_none() {
                *slot = *l;
            }
        }
    }

    /// Per-step update from shared-gradient norms and current losses.
    /// Only GradNorm reacts; other strategies ignore it.
    pub fn step_update(&mut self, grad_norms: &[f64], losses: &[Option<f64>]) -> Result<()> {
        if let WeightStrategy::GradNorm { alpha, lr } = self.strategy {
            self.observe_initial(losses);
            let current: Vec<f64> = losses
                .iter()
                .map(|l| l.unwrap_or(0.0))
                .collect();
            let initial: Vec<f64> = self
                .initial_losses
                .iter()
                .map(|l| l.unwrap_or(0.0))
                .collect();
            let updated = gradnorm_step(
                grad_norms,
                &current,
                &initial,
                alpha,
                &self.lambdas,
                lr,
                &mut self.warnings,
            )?;
            self.lambdas = updated;
        }
        Ok(())
    }

    /// Per-epoch update from the epoch-mean task losses. Only DWA reacts.
    pub fn epoch_update(&mut self, epoch_mean_losses: &[f64]) -> Result<()> {
        if let WeightStrategy::Dwa { temperature } = self.strategy {
            self.history.push(epoch_mean_losses.to_vec());
            if self.history.len() > 2 {
                self.history.remove(0);
            }
            if self.history.len() == 2 {
                self.lambdas = dwa_weights(
                    &self.history[1],
                    &self.history[0],
                    temperature,
                    &mut self.warnings,
                )?;
            }
        }
        Ok(())
    }
}

/// Uncertainty-weighted total: sum_t exp(-s_t) l_t + s_t / 2.
pub fn uw_total_loss(losses: &[f64], log_variances: &[f64]) -> Result<f64> {
    if losses.len() != log_variances.len() {
        return Err(Error::Contract(format!(
            "{} losses but {} log-variances",
            losses.len(),
            log_variances.len()
        )));
    }
    Ok(losses
        .iter()
        .zip(log_variances)
        .map(|(&l, &s)| (-s).exp() * l + s / 2.0)
        .sum())
}

/// DWA weights from the last two epoch-mean losses:
/// w_t = L_t(k-1)/L_t(k-2), lambda_t = T exp(w_t/temp) / sum_u exp(w_u/temp).
pub fn dwa_weights(
    last: &[f64],
    previous: &[f64],
    temperature: f64,
    warnings: &mut Vec<String>,
) -> Result<Vec<f64>> {
    if last.len() != previous.len() || last.is_empty() {
        return Err(Error::Contract("dwa history lengths disagree".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::Contract(format!(
            "dwa temperature must be positive, got {temperature}"
        )));
    }
    let t = last.len() as f64;
    let ratios: Vec<f64> = last
        .iter()
        .zip(previous)
        .enumerate()
        .map(|(i, (&l1, &l0))| {
            if l0 == 0.0 {
                warnings.push(format!("dwa: zero prior loss for task {i}, ratio clamped to 1"));
                1.0
            } else {
                l1 / l0
            }
        })
        .collect();
    let exps: Vec<f64> = ratios.iter().map(|&w| (w / temperature).exp()).collect();
    let denom: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| t * e / denom).collect())
}

/// GradNorm auxiliary objective sum_t |lambda_t g_t - gbar r_t^alpha| with
/// gbar = mean(lambda_t g_t) and r_t the normalized inverse training rate;
/// gbar and r_t are treated as constants for the lambda step.
pub fn gradnorm_aux_loss(
    grad_norms: &[f64],
    lambdas: &[f64],
    rates: &[f64],
    alpha: f64,
) -> f64 {
    let t = grad_norms.len() as f64;
    let gbar: f64 = grad_norms
        .iter()
        .zip(lambdas)
        .map(|(&g, &l)| l * g)
        .sum::<f64>()
        / t;
    grad_norms
        .iter()
        .zip(lambdas)
        .zip(rates)
        .map(|((&g, &l), &r)| (l * g - gbar * r.powf(alpha)).abs())
        .sum()
}

/// One lambda descent step on the auxiliary objective followed by
/// renormalization to sum T; weights clamped positive.
pub fn gradnorm_step(
    grad_norms: &[f64],
    current_losses: &[f64],
    initial_losses: &[f64],
    alpha: f64,
    lambdas: &[f64],
    lr: f64,
    warnings: &mut Vec<String>,
) -> Result<Vec<f64>> {
    let t = grad_norms.len();
    if current_losses.len() != t || initial_losses.len() != t || lambdas.len() != t {
        return Err(Error::Contract("gradnorm input lengths disagree".into()));
    }
    // Inverse training rates L_t / L_t(0), clamped to 1 when the reference
    // is unavailable, normalized by their mean.
    let raw: Vec<f64> = current_losses
        .iter()
        .zip(initial_losses)
        .enumerate()
        .map(|(i, (&l, &l0))| {
            if l0 == 0.0 {
                if l != 0.0 {
                    warnings.push(format!("gradnorm: zero initial loss for task {i}, rate set to 1"));
                }
                1.0
            } else {
                l / l0
            }
        })
        .collect();
    let mean_rate = raw.iter().sum::<f64>() / t as f64;
    let rates: Vec<f64> = if mean_rate == 0.0 {
        vec![1.0; t]
    } else {
        raw.iter().map(|&r| r / mean_rate).collect()
    };

    let gbar: f64 = grad_norms
        .iter()
        .zip(lambdas)
        .map(|(&g, &l)| l * g)
        .sum::<f64>()
        / t as f64;

    let mut updated: Vec<f64> = lambdas
        .iter()
        .zip(grad_norms)
        .zip(&rates)
        .map(|((&l, &g), &r)| {
            let target = gbar * r.powf(alpha);
            // Subgradient of |.| at 0 is taken as 0 so the balanced case
            // is an exact fixed point.
            let residual = l * g - target;
            let sign = if residual > 0.0 {
                1.0
            } else if residual < 0.0 {
                -1.0
            } else {
                0.0
            };
            (l - lr * sign * g).max(LAMBDA_FLOOR)
        })
        .collect();

    let sum: f64 = updated.iter().sum();
    for l in &mut updated {
        *l *= t as f64 / sum;
    }
    Ok(updated)
}
