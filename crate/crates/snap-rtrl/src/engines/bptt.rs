//! Reverse accumulation over a stored window of steps.

use crate::cells::{CellCache, CellParams, OwnedInput, StateVec};
use crate::error::{Error, Result};
use crate::kernels::MaddCounter;
use crate::readout::{softmax_loss, Readout};

/// One recorded step: the state the step consumed, its input, and target.
#[derive(Debug, Clone)]
pub struct TapeStep {
    pub state_prev: StateVec,
    pub x: OwnedInput,
    pub target: Option<usize>,
}

/// Exact gradient of the summed window losses w.r.t. core and readout
/// parameters via reverse accumulation; forward activations are recomputed
/// from the stored states. The tape is cleared; the caller carries the last
/// state forward for truncated mode.
///
/// `grad_core` uses the dense flat layout (length p) so the same path serves
/// pruning schedules; masked entries receive no gradient.
pub fn flush_window(
    params: &CellParams,
    readout: &Readout,
    tape: &mut Vec<TapeStep>,
    grad_core: &mut [f64],
    grad_readout: &mut [f64],
    counter: &mut MaddCounter,
) -> Result<f64> {
    if tape.is_empty() {
        return Err(Error::EmptyTape);
    }
    let visible = params.units;

    // forward sweep to rebuild activations
    let mut caches: Vec<CellCache> = Vec::with_capacity(tape.len());
    let mut states: Vec<StateVec> = Vec::with_capacity(tape.len());
    for step in tape.iter() {
        let (next, cache) = params.step_forward(&step.state_prev, &step.x.as_ref(), counter)?;
        caches.push(cache);
        states.push(next);
    }

    // reverse sweep
    let mut total_loss = 0.0;
    let mut dstate = vec![0.0; params.state_dim()];
    for t in (0..tape.len()).rev() {
        if let Some(target) = tape[t].target {
            let vis = &states[t][..visible];
            let rc = readout.forward(vis, counter)?;
            let (loss, dlogits) = softmax_loss(&rc.logits, target);
            total_loss += loss;
            let dvis = readout.backward(vis, &rc, &dlogits, grad_readout, counter)?;
            for (d, v) in dstate[..visible].iter_mut().zip(dvis) {
                *d += v;
            }
        }
        dstate = params.backward_step(
            &tape[t].state_prev,
            &tape[t].x.as_ref(),
            &caches[t],
            &dstate,
            grad_core,
            counter,
        )?;
    }
    if !total_loss.is_finite() {
        return Err(Error::NonFinite { what: "bptt window loss".into() });
    }
    tape.clear();
    Ok(total_loss)
}
