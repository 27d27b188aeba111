//! Vanilla RNN: h' = tanh(W_h h + W_x x + b).

use std::sync::Arc;

use crate::error::Result;
use crate::kernels::{MaddCounter, PatternedMatrix, SparsityPattern};

use super::{check_finite, CellCache, CellParams, InputVec, ParamRef, StateVec};

const W_H: usize = 0;
const W_X: usize = 1;

pub(super) fn forward(
    params: &CellParams,
    state: &StateVec,
    x: &InputVec<'_>,
    counter: &mut MaddCounter,
) -> Result<(StateVec, CellCache)> {
    let k = params.units;
    let mut pre = params.biases[0].clone();
    params.weights[W_H].matvec_into(&InputVec::Dense(state), &mut pre, counter);
    params.weights[W_X].matvec_into(x, &mut pre, counter);
    let next: Vec<f64> = pre.iter().map(|&p| p.tanh()).collect();
    check_finite("vanilla.h", &next)?;
    debug_assert_eq!(next.len(), k);
    Ok((next.clone(), CellCache::Vanilla { next_h: next }))
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
    let CellCache::Vanilla { next_h } = cache else {
        unreachable!("vanilla cache");
    };
    let phi: Vec<f64> = next_h.iter().map(|&h| 1.0 - h * h).collect();

    let mut d = PatternedMatrix::zeros(Arc::clone(d_pattern));
    {
        let values = d.values_mut();
        let mut slot = 0usize;
        for i in 0..d_pattern.rows() {
            for &j in d_pattern.row_cols(i) {
                values[slot] = phi[i] * params.weights[W_H].get(i, j);
                slot += 1;
            }
        }
    }
    counter.add(d_pattern.nnz() as u64);

    let mut i_tilde = PatternedMatrix::zeros(Arc::clone(i_pattern));
    {
        let layout = &params.layout;
        let values = i_tilde.values_mut();
        for (slot, (u, j)) in i_pattern.positions().enumerate() {
            values[slot] = match layout.compressed_ref(j) {
                ParamRef::Weight { matrix: W_H, col, .. } => phi[u] * state[col],
                ParamRef::Weight { matrix: W_X, col, .. } => phi[u] * x.get(col),
                ParamRef::Weight { .. } => unreachable!("vanilla has two weight matrices"),
                ParamRef::Bias { .. } => phi[u],
            };
        }
    }
    counter.add(i_pattern.nnz() as u64);
    Ok((d, i_tilde))
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
    let CellCache::Vanilla { next_h } = cache else {
        unreachable!("vanilla cache");
    };
    let k = params.units;
    let delta: Vec<f64> = (0..k)
        .map(|i| dnext[i] * (1.0 - next_h[i] * next_h[i]))
        .collect();
    accumulate_weight_grad(params, W_H, &delta, &InputVec::Dense(state), grads, counter);
    accumulate_weight_grad(params, W_X, &delta, x, grads, counter);
    let b_off = params.layout.bias_offset(0);
    for i in 0..k {
        grads[b_off + i] += delta[i];
    }
    let mut dprev = vec![0.0; k];
    params.weights[W_H].matvec_transpose_into(&delta, &mut dprev, counter);
    Ok(dprev)
}

pub(super) fn accumulate_weight_grad(
    params: &CellParams,
    matrix: usize,
    delta: &[f64],
    src: &InputVec<'_>,
    grads: &mut [f64],
    counter: &mut MaddCounter,
) {
    let w = &params.weights[matrix];
    let off = params.layout.weight_offset(matrix);
    match src {
        InputVec::Dense(sv) => {
            for r in 0..w.rows {
                let dr = delta[r];
                if dr == 0.0 {
                    continue;
                }
                for &c in w.mask.row_cols(r) {
                    grads[off + r * w.cols + c] += dr * sv[c];
                }
            }
            counter.add(w.mask.nnz() as u64);
        }
        InputVec::OneHot { index, .. } => {
            let mut touched = 0u64;
            for r in 0..w.rows {
                if w.mask.contains(r, *index) {
                    grads[off + r * w.cols + index] += delta[r];
                    touched += 1;
                }
            }
            counter.add(touched);
        }
    }
}
