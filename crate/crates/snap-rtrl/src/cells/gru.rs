//! GRU with the reset gate applied after the recurrent matrix multiplication:
//!
//!   z = σ(W_iz x + W_hz h + b_z)
//!   r = σ(W_ir x + W_hr h + b_r)
//!   a = tanh(W_ia x + r ⊙ (W_ha h) + b_a)
//!   h' = (1 − z) ⊙ h + z ⊙ a
//!
//! This keeps one nonzero per Ĩ column and avoids composing parameterized
//! linear maps inside a single step.

use std::sync::Arc;

use crate::error::Result;
use crate::kernels::{MaddCounter, PatternedMatrix, SparsityPattern};

use super::vanilla::accumulate_weight_grad;
use super::{check_finite, sigmoid, CellCache, CellParams, InputVec, ParamRef, StateVec};

const W_HZ: usize = 0;
const W_HR: usize = 1;
const W_HA: usize = 2;
const W_IZ: usize = 3;
const W_IR: usize = 4;
const W_IA: usize = 5;
const B_Z: usize = 0;
const B_R: usize = 1;
const B_A: usize = 2;

pub(super) fn forward(
    params: &CellParams,
    state: &StateVec,
    x: &InputVec<'_>,
    counter: &mut MaddCounter,
) -> Result<(StateVec, CellCache)> {
    let k = params.units;
    let h = InputVec::Dense(state);

    let mut z_pre = params.biases[B_Z].clone();
    params.weights[W_HZ].matvec_into(&h, &mut z_pre, counter);
    params.weights[W_IZ].matvec_into(x, &mut z_pre, counter);
    let z: Vec<f64> = z_pre.iter().map(|&p| sigmoid(p)).collect();
    check_finite("gru.z", &z)?;

    let mut r_pre = params.biases[B_R].clone();
    params.weights[W_HR].matvec_into(&h, &mut r_pre, counter);
    params.weights[W_IR].matvec_into(x, &mut r_pre, counter);
    let r: Vec<f64> = r_pre.iter().map(|&p| sigmoid(p)).collect();
    check_finite("gru.r", &r)?;

    let mut q = vec![0.0; k];
    params.weights[W_HA].matvec_into(&h, &mut q, counter);

    let mut a_pre = params.biases[B_A].clone();
    params.weights[W_IA].matvec_into(x, &mut a_pre, counter);
    let a: Vec<f64> = (0..k).map(|i| (a_pre[i] + r[i] * q[i]).tanh()).collect();
    check_finite("gru.a", &a)?;
    counter.add(k as u64);

    let next: Vec<f64> = (0..k)
        .map(|i| (1.0 - z[i]) * state[i] + z[i] * a[i])
        .collect();
    check_finite("gru.h", &next)?;
    counter.add(2 * k as u64);

    Ok((next, CellCache::Gru { z, r, q, a }))
}

pub(super) fn jacobians(
    params: &CellParams,
    state: &StateVec,
    x: &InputVec<'_>,
    cache: &CellCache,
    d_pattern: &Arc<SparsityPattern>,
    i_pattern: &Arc<SparsityPattern>,
    counter: &mut MaddCounter,
) -> Result<(PatternedMatrix, PatternedMatrix)> {
    let CellCache::Gru { z, r, q, a } = cache else {
        unreachable!("gru cache");
    };
    let k = params.units;

    // per-unit prefactors for each parameter group
    let mut fz = vec![0.0; k]; // z-gate params: (a − h)·σ'
    let mut fr = vec![0.0; k]; // r-gate params: z·φ'·q·σ'
    let mut fa = vec![0.0; k]; // candidate input/bias params: z·φ'
    let mut far = vec![0.0; k]; // W_ha params: z·φ'·r
    for i in 0..k {
        let zp = z[i] * (1.0 - z[i]);
        let rp = r[i] * (1.0 - r[i]);
        let ap = 1.0 - a[i] * a[i];
        fz[i] = (a[i] - state[i]) * zp;
        fa[i] = z[i] * ap;
        far[i] = fa[i] * r[i];
        fr[i] = fa[i] * q[i] * rp;
    }

    let mut d = PatternedMatrix::zeros(Arc::clone(d_pattern));
    {
        let values = d.values_mut();
        let mut slot = 0usize;
        for i in 0..k {
            for &j in d_pattern.row_cols(i) {
                let mut v = fz[i] * params.weights[W_HZ].get(i, j)
                    + far[i] * params.weights[W_HA].get(i, j)
                    + fr[i] * params.weights[W_HR].get(i, j);
                if i == j {
                    v += 1.0 - z[i];
                }
                values[slot] = v;
                slot += 1;
            }
        }
    }
    counter.add(3 * d_pattern.nnz() as u64);

    let mut i_tilde = PatternedMatrix::zeros(Arc::clone(i_pattern));
    {
        let layout = &params.layout;
        let values = i_tilde.values_mut();
        for (slot, (u, j)) in i_pattern.positions().enumerate() {
            values[slot] = match layout.compressed_ref(j) {
                ParamRef::Weight { matrix: W_HZ, col, .. } => fz[u] * state[col],
                ParamRef::Weight { matrix: W_HR, col, .. } => fr[u] * state[col],
                ParamRef::Weight { matrix: W_HA, col, .. } => far[u] * state[col],
                ParamRef::Weight { matrix: W_IZ, col, .. } => fz[u] * x.get(col),
                ParamRef::Weight { matrix: W_IR, col, .. } => fr[u] * x.get(col),
                ParamRef::Weight { matrix: W_IA, col, .. } => fa[u] * x.get(col),
                ParamRef::Weight { .. } => unreachable!("gru has six weight matrices"),
                ParamRef::Bias { vector: B_Z, .. } => fz[u],
                ParamRef::Bias { vector: B_R, .. } => fr[u],
                ParamRef::Bias { vector: B_A, .. } => fa[u],
                ParamRef::Bias { .. } => unreachable!("gru has three biases"),
            };
        }
    }
    counter.add(i_pattern.nnz() as u64);
    Ok((d, i_tilde))
}

/// Structural dynamics pattern of the original gate ordering, where the
/// reset gate multiplies the state before the recurrent matmul:
/// a = φ(W_ia x + W_ha (r ⊙ h) + b_a). The reset path then composes two
/// parameterized maps, so D picks up every two-hop W_ha·W_hr position. Kept
/// as a pattern-level demonstration of the densification; the trainable cell
/// uses the reset-after-matmul form.
pub fn variant1_structural_d_pattern(params: &CellParams) -> Result<SparsityPattern> {
    let k = params.units;
    let mut pos: Vec<(usize, usize)> = (0..k).map(|i| (i, i)).collect();
    pos.extend(params.weights[W_HZ].mask.positions());
    pos.extend(params.weights[W_HA].mask.positions());
    for (i, m) in params.weights[W_HA].mask.positions() {
        for &j in params.weights[W_HR].mask.row_cols(m) {
            pos.push((i, j));
        }
    }
    SparsityPattern::from_positions(k, k, &pos)
}

/// Structural immediate pattern of the original gate ordering: reset-gate
/// parameters feeding unit m reach every unit whose W_ha row touches m, so
/// their Ĩ columns are no longer one-hot.
pub fn variant1_structural_i_pattern(params: &CellParams) -> Result<SparsityPattern> {
    let k = params.units;
    let p_tilde = params.layout.p_tilde;
    let mut pos = Vec::new();
    for j in 0..p_tilde {
        match params.layout.compressed_ref(j) {
            ParamRef::Weight { matrix, row, .. } => {
                if matrix == W_HR || matrix == W_IR {
                    for i in 0..k {
                        if params.weights[W_HA].mask.contains(i, row) {
                            pos.push((i, j));
                        }
                    }
                } else {
                    pos.push((row, j));
                }
            }
            ParamRef::Bias { vector, index } => {
                if vector == B_R {
                    for i in 0..k {
                        if params.weights[W_HA].mask.contains(i, index) {
                            pos.push((i, j));
                        }
                    }
                } else {
                    pos.push((index, j));
                }
            }
        }
    }
    SparsityPattern::from_positions(k, p_tilde, &pos)
}

pub(super) fn backward(
    params: &CellParams,
    state: &StateVec,
    x: &InputVec<'_>,
    cache: &CellCache,
    dnext: &[f64],
    grads: &mut [f64],
    counter: &mut MaddCounter,
) -> Result<Vec<f64>> {
    let CellCache::Gru { z, r, q, a } = cache else {
        unreachable!("gru cache");
    };
    let k = params.units;

    let mut delta_z = vec![0.0; k];
    let mut delta_r = vec![0.0; k];
    let mut delta_a = vec![0.0; k]; // gradient at the candidate pre-activation
    let mut dq = vec![0.0; k];
    let mut dprev = vec![0.0; k];
    for i in 0..k {
        let dh = dnext[i];
        let da = dh * z[i];
        let dz = dh * (a[i] - state[i]);
        dprev[i] += dh * (1.0 - z[i]);
        let ap = 1.0 - a[i] * a[i];
        delta_a[i] = da * ap;
        dq[i] = delta_a[i] * r[i];
        let dr = delta_a[i] * q[i];
        delta_r[i] = dr * r[i] * (1.0 - r[i]);
        delta_z[i] = dz * z[i] * (1.0 - z[i]);
    }
    counter.add(6 * k as u64);

    let h = InputVec::Dense(state);
    accumulate_weight_grad(params, W_HZ, &delta_z, &h, grads, counter);
    accumulate_weight_grad(params, W_HR, &delta_r, &h, grads, counter);
    accumulate_weight_grad(params, W_HA, &dq, &h, grads, counter);
    accumulate_weight_grad(params, W_IZ, &delta_z, x, grads, counter);
    accumulate_weight_grad(params, W_IR, &delta_r, x, grads, counter);
    accumulate_weight_grad(params, W_IA, &delta_a, x, grads, counter);
    for i in 0..k {
        grads[params.layout.bias_offset(B_Z) + i] += delta_z[i];
        grads[params.layout.bias_offset(B_R) + i] += delta_r[i];
        grads[params.layout.bias_offset(B_A) + i] += delta_a[i];
    }

    params.weights[W_HZ].matvec_transpose_into(&delta_z, &mut dprev, counter);
    params.weights[W_HR].matvec_transpose_into(&delta_r, &mut dprev, counter);
    params.weights[W_HA].matvec_transpose_into(&dq, &mut dprev, counter);
    Ok(dprev)
}
