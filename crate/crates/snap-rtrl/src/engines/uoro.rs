//! Rank-1 unbiased influence estimate maintained with sign-vector probing
//! and variance-minimizing rescaling.
//!
//! The influence is approximated as J ≈ s·wᵀ. Each step draws signs
//! ν ∈ {±1}^K and sets
//!
//!   s′ = ρ₀·(D s) + ρ₁·ν,   w′ = w/ρ₀ + (Ĩᵀν)/ρ₁
//!
//! with ρ₀ = √(‖w‖/‖D s‖) and ρ₁ = √(‖Ĩᵀν‖/‖ν‖). The cross terms vanish in
//! expectation over the signs (the ρ's depend on ν only through norms, which
//! are sign-symmetric), leaving E[s′w′ᵀ] = D s wᵀ + Ĩ.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::kernels::{MaddCounter, PatternedMatrix};

use super::EngineContext;

const NORM_FLOOR: f64 = 1e-30;

pub(super) fn update(
    ctx: &EngineContext,
    d: &PatternedMatrix,
    i_tilde: &PatternedMatrix,
    s: &mut [f64],
    w: &mut [f64],
    rng: &mut ChaCha8Rng,
    counter: &mut MaddCounter,
) {
    let big_k = s.len();

    // D·s through the structural pattern
    let mut ds = vec![0.0; big_k];
    {
        let pattern = d.pattern();
        let values = d.values();
        for r in 0..big_k {
            let range = pattern.row_range(r);
            let mut acc = 0.0;
            for (slot, &c) in range.clone().zip(pattern.row_cols(r)) {
                acc += values[slot] * s[c];
            }
            ds[r] = acc;
        }
        counter.add(pattern.nnz() as u64);
    }

    let nu: Vec<f64> = (0..big_k)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();

    // νᵀ·Ĩ via the tracked entries
    let mut it_nu = vec![0.0; w.len()];
    for (slot, &v) in i_tilde.values().iter().enumerate() {
        let r = ctx.slot_rows[slot] as usize;
        let c = ctx.slot_cols[slot] as usize;
        it_nu[c] += nu[r] * v;
    }
    counter.add(i_tilde.pattern().nnz() as u64);

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rho0 = ((norm(w) + NORM_FLOOR) / (norm(&ds) + NORM_FLOOR)).sqrt();
    let rho1 = ((norm(&it_nu) + NORM_FLOOR) / ((big_k as f64).sqrt() + NORM_FLOOR)).sqrt();

    for i in 0..big_k {
        s[i] = rho0 * ds[i] + rho1 * nu[i];
    }
    for (wv, &iv) in w.iter_mut().zip(it_nu.iter()) {
        *wv = *wv / rho0 + iv / rho1;
    }
    counter.add(2 * (big_k + w.len()) as u64);
}
