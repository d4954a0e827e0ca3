//! Reference diffusion classifiers: local-and-global consistency (LGC) and
//! label propagation (LP). Both build a dense RBF affinity over the feature
//! space and iterate to a fixed point; they are the comparison points for the
//! particle methods in the benchmark harness.

use ndarray::linalg::general_mat_mul;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabelConfig};
use crate::engine::LabelAssignment;
use crate::error::{Error, Result};
use crate::graph::SquaredDistances;

/// RBF affinity and solver parameters shared by both baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityConfig {
    /// RBF bandwidth: affinity is `exp(-dist^2 / (2 sigma^2))`.
    pub sigma: f64,
    /// Clamping coefficient of the LGC iteration.
    pub alpha_lgc: f64,
    /// Sweep cap; hitting it flags the result as truncated.
    pub max_sweeps: usize,
    /// Convergence tolerance on the max absolute score change per sweep.
    pub tol: f64,
}

impl AffinityConfig {
    pub fn with_sigma(sigma: f64) -> Self {
        AffinityConfig { sigma, alpha_lgc: 0.99, max_sweeps: 10_000, tol: 1e-6 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidSigma(self.sigma));
        }
        if !(self.alpha_lgc > 0.0 && self.alpha_lgc < 1.0) {
            return Err(Error::InvalidParameter { name: "alpha_lgc", value: self.alpha_lgc });
        }
        Ok(())
    }
}

/// Zero-diagonal RBF affinity matrix.
fn rbf_affinity(sq: &SquaredDistances, sigma: f64) -> Array2<f64> {
    let n = sq.n();
    let scale = -1.0 / (2.0 * sigma * sigma);
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        let row = sq.row(i);
        for j in 0..n {
            if i != j {
                w[(i, j)] = (row[j] * scale).exp();
            }
        }
    }
    w
}

/// One-hot matrix of given labels; unlabeled rows are zero.
fn seed_matrix(cfg: &LabelConfig, c: usize) -> Array2<f64> {
    let mut y = Array2::zeros((cfg.n(), c));
    for i in 0..cfg.n() {
        if let Some(label) = cfg.given(i) {
            y[(i, label)] = 1.0;
        }
    }
    y
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Labeled nodes keep their given labels; unlabeled rows take the argmax,
/// ties to the lowest class.
fn assignment_from_scores(
    scores: Array2<f64>,
    cfg: &LabelConfig,
    sweeps: usize,
    converged: bool,
) -> LabelAssignment {
    let c = scores.ncols();
    let mut labels = Vec::with_capacity(scores.nrows());
    let mut decision = Vec::with_capacity(scores.nrows());
    for (i, row) in scores.rows().into_iter().enumerate() {
        decision.push(row.to_vec());
        if let Some(given) = cfg.given(i) {
            labels.push(given);
            continue;
        }
        let mut best = 0;
        for q in 1..c {
            if row[q] > row[best] {
                best = q;
            }
        }
        labels.push(best);
    }
    LabelAssignment { labels, decision, resets: 0, iterations: sweeps as u64, truncated: !converged }
}

/// Local and global consistency: symmetrically normalized affinity, scores
/// iterated as `F <- alpha S F + (1 - alpha) Y` until the change drops below
/// tolerance or the sweep cap fires (best iterate returned, flagged).
pub fn lgc_classify(d: &Dataset, cfg: &LabelConfig, ac: &AffinityConfig) -> Result<LabelAssignment> {
    let sq = SquaredDistances::compute(d)?;
    lgc_from_sq(&sq, d.c(), cfg, ac)
}

/// [`lgc_classify`] on a precomputed squared-distance matrix.
pub fn lgc_from_sq(
    sq: &SquaredDistances,
    c: usize,
    cfg: &LabelConfig,
    ac: &AffinityConfig,
) -> Result<LabelAssignment> {
    ac.validate()?;
    let n = sq.n();
    let mut w = rbf_affinity(sq, ac.sigma);
    // S = D^{-1/2} W D^{-1/2}; isolated rows (zero degree) stay zero.
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = w.row(i).sum();
            if deg > 0.0 {
                deg.sqrt().recip()
            } else {
                0.0
            }
        })
        .collect();
    for ((i, j), v) in w.indexed_iter_mut() {
        *v *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
    }

    let y = seed_matrix(cfg, c);
    let mut f = y.clone();
    let mut next = Array2::zeros((n, c));
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < ac.max_sweeps {
        next.assign(&y);
        next *= 1.0 - ac.alpha_lgc;
        general_mat_mul(ac.alpha_lgc, &w, &f, 1.0, &mut next);
        sweeps += 1;
        let delta = max_abs_diff(&next, &f);
        std::mem::swap(&mut f, &mut next);
        if delta < ac.tol {
            converged = true;
            break;
        }
    }
    Ok(assignment_from_scores(f, cfg, sweeps, converged))
}

/// Label propagation: row-normalized affinity, labeled rows clamped to their
/// one-hot seeds after every sweep.
pub fn lp_classify(d: &Dataset, cfg: &LabelConfig, ac: &AffinityConfig) -> Result<LabelAssignment> {
    let sq = SquaredDistances::compute(d)?;
    lp_from_sq(&sq, d.c(), cfg, ac)
}

/// [`lp_classify`] on a precomputed squared-distance matrix.
pub fn lp_from_sq(
    sq: &SquaredDistances,
    c: usize,
    cfg: &LabelConfig,
    ac: &AffinityConfig,
) -> Result<LabelAssignment> {
    ac.validate()?;
    let n = sq.n();
    let mut w = rbf_affinity(sq, ac.sigma);
    for mut row in w.rows_mut() {
        let sum = row.sum();
        if sum > 0.0 {
            row /= sum;
        }
    }

    let y = seed_matrix(cfg, c);
    let mut f = y.clone();
    let mut next = Array2::zeros((n, c));
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < ac.max_sweeps {
        general_mat_mul(1.0, &w, &f, 0.0, &mut next);
        for i in 0..n {
            if let Some(label) = cfg.given(i) {
                let mut row = next.row_mut(i);
                row.fill(0.0);
                row[label] = 1.0;
            }
        }
        sweeps += 1;
        let delta = max_abs_diff(&next, &f);
        std::mem::swap(&mut f, &mut next);
        if delta < ac.tol {
            converged = true;
            break;
        }
    }
    Ok(assignment_from_scores(f, cfg, sweeps, converged))
}
