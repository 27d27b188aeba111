//! LSTM over the stacked state [h; c]:
//!
//!   i = σ(W_ii x + W_hi h + b_i)      f = σ(W_if x + W_hf h + b_f)
//!   g = φ(W_ig x + W_hg h + b_g)      o = σ(W_io x + W_ho h + b_o)
//!   c' = f ⊙ c + i ⊙ g                h' = o ⊙ φ(c')
//!
//! Influence is tracked over the stacked state of dimension 2k, so every Ĩ
//! column carries two rows (the fed unit in the h block and in the c block).

use std::sync::Arc;

use crate::error::Result;
use crate::kernels::{MaddCounter, PatternedMatrix, SparsityPattern};

use super::vanilla::accumulate_weight_grad;
use super::{check_finite, sigmoid, CellCache, CellParams, InputVec, ParamRef, StateVec};

const W_HI: usize = 0;
const W_HF: usize = 1;
const W_HG: usize = 2;
const W_HO: usize = 3;

pub(super) fn forward(
    params: &CellParams,
    state: &StateVec,
    x: &InputVec<'_>,
    counter: &mut MaddCounter,
) -> Result<(StateVec, CellCache)> {
    let k = params.units;
    let (h_prev, c_prev) = state.split_at(k);
    let h_in = InputVec::Dense(h_prev);

    let mut gates = Vec::with_capacity(4);
    for gate in 0..4 {
        let mut pre = params.biases[gate].clone();
        params.weights[gate].matvec_into(&h_in, &mut pre, counter);
        params.weights[gate + 4].matvec_into(x, &mut pre, counter);
        gates.push(pre);
    }
    let i: Vec<f64> = gates[0].iter().map(|&p| sigmoid(p)).collect();
    let f: Vec<f64> = gates[1].iter().map(|&p| sigmoid(p)).collect();
    let g: Vec<f64> = gates[2].iter().map(|&p| p.tanh()).collect();
    let o: Vec<f64> = gates[3].iter().map(|&p| sigmoid(p)).collect();
    check_finite("lstm.i", &i)?;
    check_finite("lstm.f", &f)?;
    check_finite("lstm.g", &g)?;
    check_finite("lstm.o", &o)?;

    let c_next: Vec<f64> = (0..k).map(|u| f[u] * c_prev[u] + i[u] * g[u]).collect();
    let tanh_c_next: Vec<f64> = c_next.iter().map(|&c| c.tanh()).collect();
    let h_next: Vec<f64> = (0..k).map(|u| o[u] * tanh_c_next[u]).collect();
    check_finite("lstm.c", &c_next)?;
    check_finite("lstm.h", &h_next)?;
    counter.add(3 * k as u64);

    let mut next = h_next;
    next.extend_from_slice(&c_next);
    Ok((
        next,
        CellCache::Lstm {
            i,
            f,
            g,
            o,
            c_next,
            tanh_c_next,
        },
    ))
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
    let CellCache::Lstm {
        i,
        f,
        g,
        o,
        c_next: _,
        tanh_c_next,
    } = cache
    else {
        unreachable!("lstm cache");
    };
    let k = params.units;
    let c_prev = &state[k..];

    // per-unit prefactors: dc'/d(gate pre-activation) and the h chain
    let mut ci = vec![0.0; k]; // via input gate: g·σ'
    let mut cf = vec![0.0; k]; // via forget gate: c_prev·σ'
    let mut cg = vec![0.0; k]; // via candidate: i·φ'
    let mut ho = vec![0.0; k]; // dh'/d(o pre): φ(c')·σ'
    let mut hc = vec![0.0; k]; // dh'/dc': o·φ'(c')
    for u in 0..k {
        ci[u] = g[u] * i[u] * (1.0 - i[u]);
        cf[u] = c_prev[u] * f[u] * (1.0 - f[u]);
        cg[u] = i[u] * (1.0 - g[u] * g[u]);
        ho[u] = tanh_c_next[u] * o[u] * (1.0 - o[u]);
        hc[u] = o[u] * (1.0 - tanh_c_next[u] * tanh_c_next[u]);
    }

    let mut d = PatternedMatrix::zeros(Arc::clone(d_pattern));
    {
        let values = d.values_mut();
        let mut slot = 0usize;
        for row in 0..2 * k {
            for &col in d_pattern.row_cols(row) {
                let u = row % k;
                values[slot] = if row < k && col < k {
                    // h ← h: through o directly and through c'
                    ho[u] * params.weights[W_HO].get(u, col)
                        + hc[u]
                            * (ci[u] * params.weights[W_HI].get(u, col)
                                + cf[u] * params.weights[W_HF].get(u, col)
                                + cg[u] * params.weights[W_HG].get(u, col))
                } else if row < k {
                    // h ← c: diagonal through the forget path
                    debug_assert_eq!(col, k + u);
                    hc[u] * f[u]
                } else if col < k {
                    // c ← h
                    ci[u] * params.weights[W_HI].get(u, col)
                        + cf[u] * params.weights[W_HF].get(u, col)
                        + cg[u] * params.weights[W_HG].get(u, col)
                } else {
                    // c ← c: diagonal forget
                    debug_assert_eq!(col, k + u);
                    f[u]
                };
                slot += 1;
            }
        }
    }
    counter.add(4 * d_pattern.nnz() as u64);

    let mut i_tilde = PatternedMatrix::zeros(Arc::clone(i_pattern));
    {
        let layout = &params.layout;
        let values = i_tilde.values_mut();
        for (slot, (row, j)) in i_pattern.positions().enumerate() {
            let u = row % k;
            let c_row = row >= k;
            let (gate, src) = match layout.compressed_ref(j) {
                ParamRef::Weight { matrix, col, .. } => {
                    let src = if matrix < 4 { state[col] } else { x.get(col) };
                    (matrix % 4, src)
                }
                ParamRef::Bias { vector, .. } => (vector, 1.0),
            };
            let dc = match gate {
                0 => ci[u],
                1 => cf[u],
                2 => cg[u],
                _ => 0.0, // output gate does not touch the cell
            };
            values[slot] = if c_row {
                dc * src
            } else if gate == 3 {
                ho[u] * src
            } else {
                hc[u] * dc * src
            };
        }
    }
    counter.add(2 * i_pattern.nnz() as u64);
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
    let CellCache::Lstm {
        i,
        f,
        g,
        o,
        c_next: _,
        tanh_c_next,
    } = cache
    else {
        unreachable!("lstm cache");
    };
    let k = params.units;
    let (h_prev, c_prev) = state.split_at(k);
    let (dh, dc_in) = dnext.split_at(k);

    let mut delta = vec![vec![0.0; k]; 4]; // gate pre-activation gradients i, f, g, o
    let mut dc_prev = vec![0.0; k];
    for u in 0..k {
        let do_ = dh[u] * tanh_c_next[u];
        let dc = dc_in[u] + dh[u] * o[u] * (1.0 - tanh_c_next[u] * tanh_c_next[u]);
        delta[0][u] = dc * g[u] * i[u] * (1.0 - i[u]);
        delta[1][u] = dc * c_prev[u] * f[u] * (1.0 - f[u]);
        delta[2][u] = dc * i[u] * (1.0 - g[u] * g[u]);
        delta[3][u] = do_ * o[u] * (1.0 - o[u]);
        dc_prev[u] = dc * f[u];
    }
    counter.add(8 * k as u64);

    let h_in = InputVec::Dense(h_prev);
    let mut dh_prev = vec![0.0; k];
    for gate in 0..4 {
        accumulate_weight_grad(params, gate, &delta[gate], &h_in, grads, counter);
        accumulate_weight_grad(params, gate + 4, &delta[gate], x, grads, counter);
        let b_off = params.layout.bias_offset(gate);
        for u in 0..k {
            grads[b_off + u] += delta[gate][u];
        }
        params.weights[gate].matvec_transpose_into(&delta[gate], &mut dh_prev, counter);
    }

    let mut dprev = dh_prev;
    dprev.extend_from_slice(&dc_prev);
    Ok(dprev)
}
