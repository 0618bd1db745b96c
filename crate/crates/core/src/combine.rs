//! Combining per-task shared-parameter gradients into one update direction.
//!
//! The combiners only ever see gradients over the shared parameters;
//! decoder gradients flow to their tasks unmodified.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tape::{NodeId, Tape};
use crate::tensor::{dot, norm};

pub const MGDA_MAX_ITERS: usize = 250;
pub const MGDA_DUALITY_GAP: f64 = 1e-8;
pub const DEFAULT_COSREG_BETA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CombinerKind {
    Sum,
    Pcgrad,
    Mgda,
    /// Weighted sum plus beta * sum over pairs of cos^2(g_a, g_b), with the
    /// penalty's parameter gradient obtained through the recorded backward.
    Cosreg { beta: f64 },
}

impl CombinerKind {
    pub fn validate(&self) -> Result<()> {
        if let CombinerKind::Cosreg { beta } = self {
            if *beta < 0.0 || !beta.is_finite() {
                return Err(Error::Config(format!(
                    "cosreg beta must be >= 0, got {beta}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-task flattened gradients over the shared parameters.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    grads: Vec<Vec<f64>>,
}

impl GradientBundle {
    pub fn new(grads: Vec<Vec<f64>>) -> Result<Self> {
        if grads.is_empty() {
            return Err(Error::Contract("empty gradient bundle".into()));
        }
        let len = grads[0].len();
        for (t, g) in grads.iter().enumerate() {
            if g.len() != len {
                return Err(Error::Contract(format!(
                    "bundle gradient {t} has length {} != {len}",
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "gradient_bundle" });
            }
        }
        Ok(GradientBundle { grads })
    }

    pub fn num_tasks(&self) -> usize {
        self.grads.len()
    }

    pub fn flat_len(&self) -> usize {
        self.grads[0].len()
    }

    pub fn grad(&self, task: usize) -> &[f64] {
        &self.grads[task]
    }

    pub fn norms(&self) -> Vec<f64> {
        self.grads.iter().map(|g| norm(g)).collect()
    }

    /// Cosines for all ordered pairs a < b, with None for zero-norm pairs.
    pub fn pairwise_cosines(&self) -> Vec<(usize, usize, Option<f64>)> {
        let mut out = Vec::new();
        for a in 0..self.num_tasks() {
            for b in (a + 1)..self.num_tasks() {
                let (na, nb) = (norm(&self.grads[a]), norm(&self.grads[b]));
                let cos = if na == 0.0 || nb == 0.0 {
                    None
                } else {
                    Some((dot(&self.grads[a], &self.grads[b]) / (na * nb)).clamp(-1.0, 1.0))
                };
                out.push((a, b, cos));
            }
        }
        out
    }
}

/// sum_t lambda_t g_t.
pub fn combine_sum(bundle: &GradientBundle, lambdas: &[f64]) -> Result<Vec<f64>> {
    if lambdas.len() != bundle.num_tasks() {
        return Err(Error::Contract(format!(
            "{} lambdas for {} tasks",
            lambdas.len(),
            bundle.num_tasks()
        )));
    }
    if lambdas.iter().any(|&l| l <= 0.0) {
        return Err(Error::Contract("combine_sum needs positive lambdas".into()));
    }
    let mut out = vec![0.0; bundle.flat_len()];
    for (g, &l) in bundle.grads.iter().zip(lambdas) {
        for (o, &v) in out.iter_mut().zip(g) {
            *o += l * v;
        }
    }
    Ok(out)
}

/// Outcome of a combiner call: the update direction plus diagnostics.
#[derive(Clone, Debug)]
pub struct CombineOutcome {
    pub direction: Vec<f64>,
    /// MGDA simplex weights, when that solver ran.
    pub mgda_weights: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Gradient surgery: project each task gradient away from the gradients it
/// conflicts with, then sum.
///
/// Conflicts are resolved against the *original* gradients, visiting the
/// other tasks in a random order redrawn per call. Zero-norm gradients are
/// skipped as projection targets.
pub fn pcgrad_combine(bundle: &GradientBundle, rng: &mut Stream) -> Result<CombineOutcome> {
    let t = bundle.num_tasks();
    if t < 2 {
        return Err(Error::Contract("pcgrad needs at least two tasks".into()));
    }
    let norms_sq: Vec<f64> = bundle.grads.iter().map(|g| dot(g, g)).collect();
    let mut warnings = Vec::new();
    let mut sum = vec![0.0; bundle.flat_len()];
    for a in 0..t {
        let mut projected = bundle.grads[a].clone();
        let mut order: Vec<usize> = (0..t).filter(|&b| b != a).collect();
        rng.shuffle(&mut order);
        for b in order {
            if norms_sq[b] == 0.0 {
                warnings.push(format!("pcgrad: task {b} has a zero gradient, skipped"));
                continue;
            }
            let d = dot(&projected, &bundle.grads[b]);
            if d < 0.0 {
                let coef = d / norms_sq[b];
                for (p, &g) in projected.iter_mut().zip(&bundle.grads[b]) {
                    *p -= coef * g;
                }
            }
        }
        for (s, &p) in sum.iter_mut().zip(&projected) {
            *s += p;
        }
    }
    Ok(CombineOutcome {
        direction: sum,
        mgda_weights: None,
        warnings,
    })
}

/// Minimum-norm element of the convex hull of the task gradients.
///
/// T = 2 is solved in closed form; larger T runs Frank-Wolfe to a duality
/// gap of 1e-8 or 250 iterations. Returns the simplex weights and the
/// combined direction sum_t gamma_t g_t.
pub fn mgda_combine(bundle: &GradientBundle) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = bundle.num_tasks();
    if t < 2 {
        return Err(Error::Contract("mgda needs at least two tasks".into()));
    }
    if bundle.norms().iter().all(|&n| n == 0.0) {
        return Ok((vec![1.0 / t as f64; t], vec![0.0; bundle.flat_len()]));
    }

    let weights = if t == 2 {
        let g1 = bundle.grad(0);
        let g2 = bundle.grad(1);
        let gamma = min_norm_coefficient(g1, g2);
        vec![gamma, 1.0 - gamma]
    } else {
        frank_wolfe_weights(bundle)
    };

    let direction = weighted_direction(bundle, &weights);
    Ok((weights, direction))
}

/// argmin_{gamma in [0,1]} || gamma a + (1 - gamma) b ||^2, in closed form.
fn min_norm_coefficient(a: &[f64], b: &[f64]) -> f64 {
    let diff_sq: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    if diff_sq == 0.0 {
        return 0.5;
    }
    let num: f64 = b.iter().zip(a).map(|(&y, &x)| y * (y - x)).sum();
    (num / diff_sq).clamp(0.0, 1.0)
}

fn weighted_direction(bundle: &GradientBundle, weights: &[f64]) -> Vec<f64> {
    let mut d = vec![0.0; bundle.flat_len()];
    for (g, &w) in bundle.grads.iter().zip(weights) {
        for (o, &v) in d.iter_mut().zip(g) {
            *o += w * v;
        }
    }
    d
}

fn frank_wolfe_weights(bundle: &GradientBundle) -> Vec<f64> {
    let t = bundle.num_tasks();
    // Gram matrix of the task gradients; the objective is w' G w.
    let mut gram = vec![vec![0.0; t]; t];
    for a in 0..t {
        for b in a..t {
            let d = dot(bundle.grad(a), bundle.grad(b));
            gram[a][b] = d;
            gram[b][a] = d;
        }
    }
    // Away-step Frank-Wolfe: linear convergence on the simplex, needed for
    // the 1e-8 duality gap inside the iteration budget.
    let mut weights = vec![1.0 / t as f64; t];
    for _ in 0..MGDA_MAX_ITERS {
        // dg[t] = d . g_t with d = sum_t w_t g_t; the gradient is 2 dg.
        let dg: Vec<f64> = (0..t)
            .map(|a| (0..t).map(|b| weights[b] * gram[a][b]).sum())
            .collect();
        let d_sq: f64 = (0..t).map(|a| weights[a] * dg[a]).sum();
        let (fw, &min_dg) = dg
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .unwrap();
        if d_sq - min_dg <= MGDA_DUALITY_GAP {
            break;
        }
        let (away, &max_dg) = dg
            .iter()
            .enumerate()
            .filter(|(i, _)| weights[*i] > 0.0)
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .unwrap();

        let fw_gap = d_sq - min_dg;
        let away_gap = max_dg - d_sq;
        if fw_gap >= away_gap || weights[away] >= 1.0 {
            // Step toward the best vertex: w <- (1-s) w + s e_fw.
            let denom = d_sq - 2.0 * dg[fw] + gram[fw][fw];
            let step = if denom <= 0.0 {
                1.0
            } else {
                (fw_gap / denom).clamp(0.0, 1.0)
            };
            for w in weights.iter_mut() {
                *w *= 1.0 - step;
            }
            weights[fw] += step;
        } else {
            // Step away from the worst active vertex: w <- (1+s) w - s e_away.
            let denom = d_sq - 2.0 * dg[away] + gram[away][away];
            let max_step = weights[away] / (1.0 - weights[away]);
            let step = if denom <= 0.0 {
                max_step
            } else {
                (away_gap / denom).clamp(0.0, max_step)
            };
            for w in weights.iter_mut() {
                *w *= 1.0 + step;
            }
            weights[away] -= step;
            weights[away] = weights[away].max(0.0);
        }
    }
    // Project residual rounding back onto the simplex.
    let sum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w = (*w / sum).clamp(0.0, 1.0);
    }
    weights
}

/// beta * sum_{a<b} cos^2(g_a, g_b) built on the tape from per-task shared
/// gradient nodes, so a further backward yields its parameter gradient.
/// Zero-norm gradients contribute nothing.
pub fn cosreg_penalty(
    tape: &mut Tape,
    per_task_grads: &[Vec<NodeId>],
    beta: f64,
) -> Result<Option<NodeId>> {
    if beta < 0.0 {
        return Err(Error::Contract(format!("cosreg beta must be >= 0, got {beta}")));
    }
    let t = per_task_grads.len();
    let mut sq_norms: Vec<Option<NodeId>> = Vec::with_capacity(t);
    let mut norm_values = Vec::with_capacity(t);
    for grads in per_task_grads {
        let mut acc: Option<NodeId> = None;
        let mut value = 0.0;
        for &g in grads {
            let sq = tape.square(g)?;
            let s = tape.sum(sq)?;
            value += tape.scalar_value(s)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, s)?,
                None => s,
            });
        }
        sq_norms.push(acc);
        norm_values.push(value);
    }

    let mut penalty: Option<NodeId> = None;
    for a in 0..t {
        for b in (a + 1)..t {
            if norm_values[a] == 0.0 || norm_values[b] == 0.0 {
                continue;
            }
            let (Some(na), Some(nb)) = (sq_norms[a], sq_norms[b]) else {
                continue;
            };
            let mut dot_acc: Option<NodeId> = None;
            for (&ga, &gb) in per_task_grads[a].iter().zip(&per_task_grads[b]) {
                let p = tape.mul(ga, gb)?;
                let s = tape.sum(p)?;
                dot_acc = Some(match dot_acc {
                    Some(prev) => tape.add(prev, s)?,
                    None => s,
                });
            }
            let dot_node = dot_acc.expect("bundle tasks have identical path lists");
            let dot_sq = tape.square(dot_node)?;
            let denom = tape.mul(na, nb)?;
            let cos_sq = tape.div(dot_sq, denom)?;
            penalty = Some(match penalty {
                Some(prev) => tape.add(prev, cos_sq)?,
                None => cos_sq,
            });
        }
    }
    match penalty {
        Some(p) => Ok(Some(tape.scale(p, beta)?)),
        None => Ok(None),
    }
}
