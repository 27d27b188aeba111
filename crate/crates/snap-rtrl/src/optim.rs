//! Parameter updates (SGD, Adam) and the magnitude-pruning schedule used by
//! the constant-parameter sparsity study.
//!
//! Optimizers act on one flat trainable vector (core parameters followed by
//! readout parameters). A `frozen` set marks entries that must remain exactly
//! zero: their gradients are ignored, their values never move, and pruning
//! only ever grows the set.

use serde::{Deserialize, Serialize};

use crate::cells::CellParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Adam hyperparameters; defaults follow common practice for this setup.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        hyper: AdamHyper,
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                hyper: AdamHyper::default(),
                m: vec![0.0; dim],
                v: vec![0.0; dim],
                t: 0,
            },
        }
    }

    /// Applies one update in place. `frozen` entries are skipped entirely.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], frozen: &[bool]) -> Result<()> {
        if params.len() != grad.len() || params.len() != frozen.len() {
            return Err(Error::dimension(
                "optimizer step",
                format!("{} params, {} grads, {} frozen", params.len(), grad.len(), frozen.len()),
            ));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { what: "gradient".into() });
        }
        match self {
            Optimizer::Sgd { lr } => {
                for i in 0..params.len() {
                    if !frozen[i] {
                        params[i] -= *lr * grad[i];
                    }
                }
            }
            Optimizer::Adam { lr, hyper, m, v, t } => {
                *t += 1;
                let b1 = hyper.beta1;
                let b2 = hyper.beta2;
                let bc1 = 1.0 - b1.powi(*t as i32);
                let bc2 = 1.0 - b2.powi(*t as i32);
                for i in 0..params.len() {
                    if frozen[i] {
                        continue;
                    }
                    let g = grad[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] -= *lr * m_hat / (v_hat.sqrt() + hyper.eps);
                }
            }
        }
        Ok(())
    }

    /// Zeroes optimizer state for newly frozen entries so they cannot drift.
    pub fn freeze(&mut self, indices: &[usize]) {
        if let Optimizer::Adam { m, v, .. } = self {
            for &i in indices {
                m[i] = 0.0;
                v[i] = 0.0;
            }
        }
    }
}

/// Interpolation curve for the progressive sparsity target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneCurve {
    /// s(t) = s_f·(1 − (1 − t/t_f)³): fast early pruning, gentle near the end.
    Cubic,
    Linear,
}

impl PruneCurve {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cubic" => Ok(PruneCurve::Cubic),
            "linear" => Ok(PruneCurve::Linear),
            other => Err(Error::Config(format!("unknown prune curve '{other}'"))),
        }
    }
}

/// Progressive magnitude-pruning schedule: per weight matrix, the target
/// sparsity ramps from zero to `final_sparsity` along the chosen curve,
/// with decisions every `interval` steps and the endpoint reached at
/// `final_step`. Biases are never pruned.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub interval: u64,
    pub final_sparsity: f64,
    pub final_step: u64,
    pub curve: PruneCurve,
}

impl PruneSchedule {
    pub fn target_sparsity(&self, step: u64) -> f64 {
        if step >= self.final_step {
            return self.final_sparsity;
        }
        let frac = step as f64 / self.final_step as f64;
        match self.curve {
            PruneCurve::Cubic => self.final_sparsity * (1.0 - (1.0 - frac).powi(3)),
            PruneCurve::Linear => self.final_sparsity * frac,
        }
    }

    pub fn is_boundary(&self, step: u64) -> bool {
        step > 0 && step % self.interval == 0
    }
}

/// Masks the smallest-magnitude unmasked entries of every weight matrix to
/// reach the schedule's target sparsity at `step`, re-zeroing the pruned
/// values. Ties break toward the lowest flat index. Returns the flat indices
/// (core layout) that were newly pruned.
pub fn prune_step(
    schedule: &PruneSchedule,
    step: u64,
    params: &mut CellParams,
) -> Result<Vec<usize>> {
    let target = schedule.target_sparsity(step);
    let mut newly_pruned = Vec::new();
    for mi in 0..params.weights.len() {
        let w = &params.weights[mi];
        let total = w.rows * w.cols;
        let target_nnz = ((1.0 - target) * total as f64).round() as usize;
        let current_nnz = w.mask.nnz();
        if target_nnz >= current_nnz {
            continue; // sparsity is monotone; nothing to do this round
        }
        // order candidates by (|value|, flat index)
        let mut candidates: Vec<(f64, usize, usize)> = w
            .mask
            .positions()
            .map(|(r, c)| (w.get(r, c).abs(), r, c))
            .collect();
        candidates.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap()
                .then((a.1 * w.cols + a.2).cmp(&(b.1 * w.cols + b.2)))
        });
        let drop = current_nnz - target_nnz;
        let mut keep_pos: Vec<(usize, usize)> =
            candidates[drop..].iter().map(|&(_, r, c)| (r, c)).collect();
        keep_pos.sort_unstable();
        for &(_, r, c) in &candidates[..drop] {
            newly_pruned.push(params.layout.flat_index(crate::cells::ParamRef::Weight {
                matrix: mi,
                row: r,
                col: c,
            }));
        }
        let rows = w.rows;
        let cols = w.cols;
        params.weights[mi].mask =
            crate::kernels::SparsityPattern::from_positions(rows, cols, &keep_pos)?;
        params.weights[mi].enforce_mask();
    }
    newly_pruned.sort_unstable();
    Ok(newly_pruned)
}
