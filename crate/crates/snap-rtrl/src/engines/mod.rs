//! Gradient-estimation engines behind one stepping contract.
//!
//! All online engines maintain some stand-in for the influence matrix
//! J_t = ∂state_t/∂θ and produce, at every step, the contraction
//! (∂L_t/∂state_t)·J_t as the core-parameter gradient. They differ only in
//! what they keep of J:
//!
//! * `rtrl` — dense K×p storage, exact.
//! * `rtrl_sparse` — column-compressed J̃ on the full reachable pattern, exact.
//! * `snap{n}` — J̃ masked to the structural n-step pattern (biased, cheap).
//! * `snap1` — one tracked entry per Ĩ column, updated through the diagonal
//!   of D (2×2 diagonal blocks for the LSTM's stacked state).
//! * `rflo` — accumulates Ĩ and drops the D·J̃ propagation term entirely.
//! * `uoro` — unbiased stochastic rank-1 estimate with sign probing.
//! * `bptt` — stores a tape and materializes exact gradients on
//!   [`flush_window`], the reverse-mode oracle.
//!
//! Readout parameters always receive their exact local gradient; only core
//! parameters go through influence approximation.

mod bptt;
mod uoro;

pub use bptt::{flush_window, TapeStep};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cells::{CellParams, InputVec, StateVec};
use crate::error::{Error, Result};
use crate::kernels::{
    ColumnView, DenseMatrix, MaddCounter, MaskedProductPlan, PatternedMatrix, SparsityPattern,
};
use crate::pattern::{n_step_pattern, pattern_fixpoint};
use crate::readout::{softmax_loss, Readout};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineKind {
    Bptt,
    RtrlDense,
    RtrlSparse,
    Snap1,
    SnapN(usize),
    Rflo,
    Uoro,
}

impl EngineKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bptt" => Ok(EngineKind::Bptt),
            "rtrl" => Ok(EngineKind::RtrlDense),
            "rtrl_sparse" => Ok(EngineKind::RtrlSparse),
            "rflo" => Ok(EngineKind::Rflo),
            "uoro" => Ok(EngineKind::Uoro),
            "snap1" => Ok(EngineKind::Snap1),
            other => {
                if let Some(n) = other.strip_prefix("snap").and_then(|n| n.parse::<usize>().ok()) {
                    if n >= 2 {
                        return Ok(EngineKind::SnapN(n));
                    }
                }
                Err(Error::Config(format!("unknown engine '{other}'")))
            }
        }
    }

    pub fn name(self) -> String {
        match self {
            EngineKind::Bptt => "bptt".into(),
            EngineKind::RtrlDense => "rtrl".into(),
            EngineKind::RtrlSparse => "rtrl_sparse".into(),
            EngineKind::Snap1 => "snap1".into(),
            EngineKind::SnapN(n) => format!("snap{n}"),
            EngineKind::Rflo => "rflo".into(),
            EngineKind::Uoro => "uoro".into(),
        }
    }

    /// Engines whose influence storage is column-compressed; these cannot
    /// train under a schedule that grows the mask.
    pub fn compressed_influence(self) -> bool {
        !matches!(self, EngineKind::Bptt)
    }
}

/// Per-run immutable engine state: patterns, product plans, and slot maps
/// shared by every batch element.
pub struct EngineContext {
    pub kind: EngineKind,
    pub d_pattern: Arc<SparsityPattern>,
    pub i_pattern: Arc<SparsityPattern>,
    /// Influence pattern for rtrl_sparse / snap_n, with the n it realizes.
    pub j_pattern: Option<Arc<SparsityPattern>>,
    pub n_star: Option<usize>,
    product_plan: Option<MaskedProductPlan>,
    /// i_pattern slot → j_pattern slot.
    i_stamp: Option<Vec<u32>>,
    /// Per i-slot row and column (tracked-entry engines and contractions).
    slot_rows: Vec<u32>,
    slot_cols: Vec<u32>,
    /// Diagonal D slots per state row (sentinel u32::MAX when absent).
    diag_slots: Vec<u32>,
    /// LSTM tracked pairs per compressed column: (h slot, c slot, unit).
    lstm_pairs: Option<Vec<(u32, u32, u32)>>,
    state_dim: usize,
    visible_dim: usize,
    p: usize,
    p_tilde: usize,
}

const NO_SLOT: u32 = u32::MAX;

impl EngineContext {
    pub fn new(kind: EngineKind, params: &CellParams) -> Result<Self> {
        let d_pattern = Arc::new(params.structural_d_pattern()?);
        let i_pattern = Arc::new(params.structural_i_pattern()?);
        let state_dim = params.state_dim();
        let p = params.layout.p;
        let p_tilde = params.layout.p_tilde;

        let (j_pattern, n_star) = match kind {
            EngineKind::RtrlSparse => {
                let (pat, n) = pattern_fixpoint(&d_pattern, &i_pattern)?;
                (Some(Arc::new(pat)), Some(n))
            }
            EngineKind::SnapN(n) => (
                Some(Arc::new(n_step_pattern(&d_pattern, &i_pattern, n)?)),
                None,
            ),
            _ => (None, None),
        };

        let (product_plan, i_stamp) = match &j_pattern {
            Some(jp) => {
                let plan = MaskedProductPlan::new(
                    Arc::clone(&d_pattern),
                    Arc::clone(jp),
                    Arc::clone(jp),
                )?;
                let stamp = crate::kernels::support_map(jp, &i_pattern)?;
                (Some(plan), Some(stamp))
            }
            None => (None, None),
        };

        let mut slot_rows = Vec::with_capacity(i_pattern.nnz());
        let mut slot_cols = Vec::with_capacity(i_pattern.nnz());
        for (r, c) in i_pattern.positions() {
            slot_rows.push(r as u32);
            slot_cols.push(c as u32);
        }
        let diag_slots: Vec<u32> = (0..state_dim)
            .map(|r| d_pattern.slot(r, r).map_or(NO_SLOT, |s| s as u32))
            .collect();

        let lstm_pairs = if params.arch == crate::cells::Architecture::Lstm
            && matches!(kind, EngineKind::Snap1 | EngineKind::Rflo)
        {
            let cols = ColumnView::new(&i_pattern);
            let k = params.units;
            let mut pairs = Vec::with_capacity(p_tilde);
            for j in 0..p_tilde {
                let (rows, slots) = cols.col(j);
                debug_assert_eq!(rows.len(), 2);
                debug_assert_eq!(rows[1] as usize, rows[0] as usize + k);
                pairs.push((slots[0], slots[1], rows[0]));
            }
            Some(pairs)
        } else {
            None
        };

        Ok(Self {
            kind,
            d_pattern,
            i_pattern,
            j_pattern,
            n_star,
            product_plan,
            i_stamp,
            slot_rows,
            slot_cols,
            diag_slots,
            lstm_pairs,
            state_dim,
            visible_dim: params.units,
            p,
            p_tilde,
        })
    }

    /// Length of the core gradient buffer this engine writes: dense flat p
    /// for BPTT (pruning-capable), compressed p̃ for everything else.
    pub fn grad_len(&self) -> usize {
        match self.kind {
            EngineKind::Bptt => self.p,
            _ => self.p_tilde,
        }
    }

    pub fn fresh_accumulator(&self, uoro_seed: u64) -> Accumulator {
        match self.kind {
            EngineKind::Bptt => Accumulator::Tape(Vec::new()),
            EngineKind::RtrlDense => {
                Accumulator::Dense(DenseMatrix::zeros(self.state_dim, self.p))
            }
            EngineKind::RtrlSparse | EngineKind::SnapN(_) => {
                let jp = self.j_pattern.as_ref().expect("pattern built in new()");
                Accumulator::Patterned {
                    j: PatternedMatrix::zeros(Arc::clone(jp)),
                    scratch: vec![0.0; jp.nnz()],
                }
            }
            EngineKind::Snap1 | EngineKind::Rflo => {
                Accumulator::PerEntry(vec![0.0; self.i_pattern.nnz()])
            }
            EngineKind::Uoro => Accumulator::Rank1 {
                s: vec![0.0; self.state_dim],
                w: vec![0.0; self.p_tilde],
                rng: ChaCha8Rng::seed_from_u64(uoro_seed),
            },
        }
    }

    /// Zeroes the influence at a sequence boundary. The UORO sign stream and
    /// the BPTT tape capacity are kept.
    pub fn reset_accumulator(&self, acc: &mut Accumulator) {
        match acc {
            Accumulator::Dense(m) => m.fill(0.0),
            Accumulator::Patterned { j, scratch } => {
                j.fill(0.0);
                scratch.iter_mut().for_each(|v| *v = 0.0);
            }
            Accumulator::PerEntry(v) => v.iter_mut().for_each(|x| *x = 0.0),
            Accumulator::Rank1 { s, w, .. } => {
                s.iter_mut().for_each(|x| *x = 0.0);
                w.iter_mut().for_each(|x| *x = 0.0);
            }
            Accumulator::Tape(tape) => tape.clear(),
        }
    }
}

/// Engine-specific replacement for the influence matrix.
pub enum Accumulator {
    /// K×p dense influence (rtrl).
    Dense(DenseMatrix),
    /// Column-compressed influence on a fixed pattern (rtrl_sparse, snap_n).
    Patterned {
        j: PatternedMatrix,
        scratch: Vec<f64>,
    },
    /// One value per tracked Ĩ entry (snap1, rflo).
    PerEntry(Vec<f64>),
    /// Rank-1 state/parameter pair with its sign stream (uoro).
    Rank1 {
        s: Vec<f64>,
        w: Vec<f64>,
        rng: ChaCha8Rng,
    },
    /// Stored steps awaiting reverse accumulation (bptt).
    Tape(Vec<TapeStep>),
}

impl Accumulator {
    fn variant_name(&self) -> &'static str {
        match self {
            Accumulator::Dense(_) => "dense",
            Accumulator::Patterned { .. } => "patterned",
            Accumulator::PerEntry(_) => "per-entry",
            Accumulator::Rank1 { .. } => "rank-1",
            Accumulator::Tape(_) => "tape",
        }
    }

    /// Stored influence entries (tape length in steps for BPTT).
    pub fn nnz(&self) -> usize {
        match self {
            Accumulator::Dense(m) => m.rows() * m.cols(),
            Accumulator::Patterned { j, .. } => j.pattern().nnz(),
            Accumulator::PerEntry(v) => v.len(),
            Accumulator::Rank1 { s, w, .. } => s.len() + w.len(),
            Accumulator::Tape(t) => t.len(),
        }
    }
}

/// Per-step observation returned by [`engine_step`].
#[derive(Debug, Clone, Copy, Default)]
pub struct StepOutcome {
    /// Loss in nats at this step, when a target was present.
    pub loss: Option<f64>,
    pub accumulator_nnz: usize,
}

fn expected_variant(kind: EngineKind) -> &'static str {
    match kind {
        EngineKind::Bptt => "tape",
        EngineKind::RtrlDense => "dense",
        EngineKind::RtrlSparse | EngineKind::SnapN(_) => "patterned",
        EngineKind::Snap1 | EngineKind::Rflo => "per-entry",
        EngineKind::Uoro => "rank-1",
    }
}

/// Advances one engine step: next state, updated influence accumulator, and
/// gradient contributions added into `grad_core` / `grad_readout`.
///
/// `grad_core` uses the compressed layout (length p̃) for online engines and
/// the dense flat layout (length p) for BPTT, which only writes it on
/// [`flush_window`]. The loss derivative fed to the influence contraction is
/// the purely local ∂L_t/∂state_t; steps without a target update the
/// influence but contribute no gradient.
#[allow(clippy::too_many_arguments)]
pub fn engine_step(
    ctx: &EngineContext,
    params: &CellParams,
    readout: &Readout,
    state: &StateVec,
    acc: &mut Accumulator,
    x: &InputVec<'_>,
    target: Option<usize>,
    grad_core: &mut [f64],
    grad_readout: &mut [f64],
    counter: &mut MaddCounter,
) -> Result<(StateVec, StepOutcome)> {
    let ok = matches!(
        (ctx.kind, &*acc),
        (EngineKind::Bptt, Accumulator::Tape(_))
            | (EngineKind::RtrlDense, Accumulator::Dense(_))
            | (EngineKind::RtrlSparse, Accumulator::Patterned { .. })
            | (EngineKind::SnapN(_), Accumulator::Patterned { .. })
            | (EngineKind::Snap1, Accumulator::PerEntry(_))
            | (EngineKind::Rflo, Accumulator::PerEntry(_))
            | (EngineKind::Uoro, Accumulator::Rank1 { .. })
    );
    if !ok {
        return Err(Error::AccumulatorMismatch {
            expected: expected_variant(ctx.kind),
            got: acc.variant_name(),
        });
    }

    // BPTT only records; gradients come from flush_window.
    if let Accumulator::Tape(tape) = acc {
        let (next_state, _cache) = params.step_forward(state, x, counter)?;
        let loss = match target {
            Some(t) => {
                let rc = readout.forward(&next_state[..ctx.visible_dim], counter)?;
                Some(softmax_loss(&rc.logits, t).0)
            }
            None => None,
        };
        tape.push(TapeStep {
            state_prev: state.clone(),
            x: x.to_owned_input(),
            target,
        });
        let outcome = StepOutcome {
            loss,
            accumulator_nnz: tape.len(),
        };
        if let Some(l) = loss {
            if !l.is_finite() {
                return Err(Error::NonFinite { what: "loss".into() });
            }
        }
        return Ok((next_state, outcome));
    }

    let (next_state, cache) = params.step_forward(state, x, counter)?;
    let (d, i_tilde) = params.jacobians(
        state,
        x,
        &cache,
        &ctx.d_pattern,
        &ctx.i_pattern,
        counter,
    )?;

    // influence update
    match acc {
        Accumulator::Dense(j) => {
            let d_dense = d.to_dense();
            let new_j = d_dense.matmul(j, counter)?;
            *j = new_j;
            let flat = &params.layout.map;
            for (slot, &v) in i_tilde.values().iter().enumerate() {
                let r = ctx.slot_rows[slot] as usize;
                let c = flat.flat_of(ctx.slot_cols[slot] as usize);
                j.set(r, c, j.get(r, c) + v);
            }
        }
        Accumulator::Patterned { j, scratch } => {
            let plan = ctx.product_plan.as_ref().expect("plan built in new()");
            plan.execute_into(&d, j, scratch, counter)?;
            let stamp = ctx.i_stamp.as_ref().expect("stamp built in new()");
            for (slot, &v) in i_tilde.values().iter().enumerate() {
                scratch[stamp[slot] as usize] += v;
            }
            j.swap_values(scratch)?;
        }
        Accumulator::PerEntry(vals) => match ctx.kind {
            EngineKind::Rflo => {
                for (v, &i) in vals.iter_mut().zip(i_tilde.values()) {
                    *v += i;
                }
            }
            EngineKind::Snap1 => {
                if let Some(pairs) = &ctx.lstm_pairs {
                    let k = ctx.visible_dim;
                    let dv = d.values();
                    let iv = i_tilde.values();
                    let read = |slot: u32| if slot == NO_SLOT { 0.0 } else { dv[slot as usize] };
                    for &(sh, sc, unit) in pairs {
                        let u = unit as usize;
                        let d_hh = read(ctx.diag_slots[u]);
                        let d_cc = read(ctx.diag_slots[k + u]);
                        let d_hc = read(d_slot(&ctx.d_pattern, u, k + u));
                        let d_ch = read(d_slot(&ctx.d_pattern, k + u, u));
                        let (sh, sc) = (sh as usize, sc as usize);
                        let (ah, ac) = (vals[sh], vals[sc]);
                        vals[sh] = iv[sh] + d_hh * ah + d_hc * ac;
                        vals[sc] = iv[sc] + d_ch * ah + d_cc * ac;
                    }
                    counter.add(4 * pairs.len() as u64);
                } else {
                    let dv = d.values();
                    for (slot, v) in vals.iter_mut().enumerate() {
                        let r = ctx.slot_rows[slot] as usize;
                        let ds = ctx.diag_slots[r];
                        let dii = if ds == NO_SLOT { 0.0 } else { dv[ds as usize] };
                        *v = i_tilde.values()[slot] + dii * *v;
                    }
                    counter.add(vals.len() as u64);
                }
            }
            _ => unreachable!("variant checked above"),
        },
        Accumulator::Rank1 { s, w, rng } => {
            uoro::update(ctx, &d, &i_tilde, s, w, rng, counter);
        }
        Accumulator::Tape(_) => unreachable!("handled above"),
    }

    // local loss and gradients
    let mut outcome = StepOutcome {
        loss: None,
        accumulator_nnz: acc.nnz(),
    };
    if let Some(t) = target {
        let visible = &next_state[..ctx.visible_dim];
        let rc = readout.forward(visible, counter)?;
        let (loss, dlogits) = softmax_loss(&rc.logits, t);
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "loss".into() });
        }
        outcome.loss = Some(loss);
        let dvisible = readout.backward(visible, &rc, &dlogits, grad_readout, counter)?;
        let mut dstate = vec![0.0; ctx.state_dim];
        dstate[..ctx.visible_dim].copy_from_slice(&dvisible);

        match acc {
            Accumulator::Dense(j) => {
                let flat_grad = j.vec_mat(&dstate, counter)?;
                let compressed = params.layout.map.compress(&flat_grad)?;
                for (g, v) in grad_core.iter_mut().zip(compressed) {
                    *g += v;
                }
            }
            Accumulator::Patterned { j, .. } => {
                let g = crate::kernels::vec_mat(&dstate, j, counter)?;
                for (dst, v) in grad_core.iter_mut().zip(g) {
                    *dst += v;
                }
            }
            Accumulator::PerEntry(vals) => {
                for (slot, &v) in vals.iter().enumerate() {
                    let r = ctx.slot_rows[slot] as usize;
                    let c = ctx.slot_cols[slot] as usize;
                    grad_core[c] += dstate[r] * v;
                }
                counter.add(vals.len() as u64);
            }
            Accumulator::Rank1 { s, w, .. } => {
                let alpha: f64 = dstate.iter().zip(s.iter()).map(|(a, b)| a * b).sum();
                for (g, &wv) in grad_core.iter_mut().zip(w.iter()) {
                    *g += alpha * wv;
                }
                counter.add((s.len() + w.len()) as u64);
            }
            Accumulator::Tape(_) => unreachable!(),
        }
        for g in grad_core.iter() {
            if !g.is_finite() {
                return Err(Error::NonFinite { what: "grad_core".into() });
            }
        }
    }

    Ok((next_state, outcome))
}

#[inline]
fn d_slot(pattern: &SparsityPattern, r: usize, c: usize) -> u32 {
    pattern.slot(r, c).map_or(NO_SLOT, |s| s as u32)
}

#[cfg(test)]
mod tests;
