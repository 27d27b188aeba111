//! Small-net oracle suites shared by the test batteries and the `gradcheck`
//! command.
//!
//! The finite-difference oracle here is built purely from forward passes
//! ([`sequence_loss`]), so it stays independent of every gradient engine it
//! is used to check.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::cells::{Architecture, CellParams, InputVec};
use crate::engines::{engine_step, flush_window, Accumulator, EngineContext, EngineKind};
use crate::kernels::MaddCounter;
use crate::readout::{softmax_loss, Readout};

/// One step of a frozen-weight probe sequence.
pub struct SeqStep {
    pub input: Vec<f64>,
    pub target: Option<usize>,
}

pub fn random_sequence(
    rng: &mut ChaCha8Rng,
    len: usize,
    input_dim: usize,
    classes: usize,
) -> Vec<SeqStep> {
    (0..len)
        .map(|_| SeqStep {
            input: (0..input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            target: Some(rng.gen_range(0..classes)),
        })
        .collect()
}

/// Runs a frozen-weight sequence through one engine, summing per-step core
/// gradients (compressed layout) and readout gradients. BPTT flushes once at
/// the end. Returns (grad_core, grad_readout, total_loss, multiply-adds).
pub fn run_engine(
    kind: EngineKind,
    params: &CellParams,
    readout: &Readout,
    seq: &[SeqStep],
    uoro_seed: u64,
) -> (Vec<f64>, Vec<f64>, f64, u64) {
    let ctx = EngineContext::new(kind, params).unwrap();
    let mut acc = ctx.fresh_accumulator(uoro_seed);
    let mut state = params.zero_state();
    let mut grad_core = vec![0.0; ctx.grad_len()];
    let mut grad_readout = vec![0.0; readout.param_len()];
    let mut counter = MaddCounter::new();
    let mut total_loss = 0.0;
    for step in seq {
        let x = InputVec::Dense(&step.input);
        let (next, outcome) = engine_step(
            &ctx,
            params,
            readout,
            &state,
            &mut acc,
            &x,
            step.target,
            &mut grad_core,
            &mut grad_readout,
            &mut counter,
        )
        .unwrap();
        state = next;
        total_loss += outcome.loss.unwrap_or(0.0);
    }
    if kind == EngineKind::Bptt {
        let Accumulator::Tape(ref mut tape) = acc else { unreachable!() };
        total_loss = flush_window(params, readout, tape, &mut grad_core, &mut grad_readout, &mut counter)
            .unwrap();
        grad_core = params.layout.map.compress(&grad_core).unwrap();
    }
    (grad_core, grad_readout, total_loss, counter.total())
}

/// Relative L2 error of `a` against reference `b`.
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let norm: f64 = b.iter().map(|y| y * y).sum();
    (diff / norm.max(1e-300)).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Total frozen-weight sequence loss from forward passes only.
pub fn sequence_loss(params: &CellParams, readout: &Readout, seq: &[SeqStep]) -> f64 {
    let mut state = params.zero_state();
    let mut total = 0.0;
    let mut counter = MaddCounter::new();
    for step in seq {
        let (next, _) = params
            .step_forward(&state, &InputVec::Dense(&step.input), &mut counter)
            .unwrap();
        if let Some(t) = step.target {
            let rc = readout.forward(&next[..params.units], &mut counter).unwrap();
            total += softmax_loss(&rc.logits, t).0;
        }
        state = next;
    }
    total
}

/// Central finite differences of the sequence loss w.r.t. the compressed
/// core parameters.
pub fn fd_core_gradient(
    params: &CellParams,
    readout: &Readout,
    seq: &[SeqStep],
    eps: f64,
) -> Vec<f64> {
    let p_tilde = params.layout.p_tilde;
    let mut base = vec![0.0; p_tilde];
    params.read_compressed(&mut base);
    let mut work = params.clone();
    let mut out = vec![0.0; p_tilde];
    for j in 0..p_tilde {
        let mut v = base.clone();
        v[j] += eps;
        work.write_compressed(&v);
        let lp = sequence_loss(&work, readout, seq);
        v[j] -= 2.0 * eps;
        work.write_compressed(&v);
        let lm = sequence_loss(&work, readout, seq);
        out[j] = (lp - lm) / (2.0 * eps);
    }
    out
}

/// One named oracle check.
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// The quick oracle battery behind `gradcheck`: RTRL↔BPTT equality, BPTT vs
/// finite differences, the fixpoint equivalence, and dense-cell collapse of
/// the two-step approximation, each on small random nets.
pub fn gradcheck(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    // RTRL vs BPTT, every architecture
    let mut worst = 0.0f64;
    for arch in [Architecture::Vanilla, Architecture::Gru, Architecture::Lstm] {
        for trial in 0..5 {
            let params = CellParams::new(arch, 6, 3, 0.4, seed + trial).unwrap();
            let readout = Readout::linear(6, 2, seed ^ 0x11);
            let seq = random_sequence(&mut rng, 8, 3, 2);
            let (a, _, _, _) = run_engine(EngineKind::RtrlDense, &params, &readout, &seq, 0);
            let (b, _, _, _) = run_engine(EngineKind::Bptt, &params, &readout, &seq, 0);
            worst = worst.max(rel_l2(&a, &b));
        }
    }
    results.push(CheckResult {
        name: "rtrl-vs-bptt",
        passed: worst <= 1e-8,
        detail: format!("worst relative L2 error {worst:.3e} (tolerance 1e-8)"),
    });

    // BPTT vs central finite differences
    let params = CellParams::new(Architecture::Gru, 4, 3, 0.0, seed ^ 0x22).unwrap();
    let readout = Readout::linear(4, 2, seed ^ 0x23);
    let seq = random_sequence(&mut rng, 6, 3, 2);
    let (b, _, _, _) = run_engine(EngineKind::Bptt, &params, &readout, &seq, 0);
    let fd = fd_core_gradient(&params, &readout, &seq, 1e-6);
    let err = rel_l2(&b, &fd);
    results.push(CheckResult {
        name: "bptt-vs-finite-differences",
        passed: err <= 1e-5,
        detail: format!("relative L2 error {err:.3e} (tolerance 1e-5)"),
    });

    // fixpoint equivalence, bitwise
    let params = CellParams::new(Architecture::Gru, 6, 3, 0.6, seed ^ 0x33).unwrap();
    let readout = Readout::linear(6, 2, seed ^ 0x34);
    let ctx = EngineContext::new(EngineKind::RtrlSparse, &params).unwrap();
    let n_star = ctx.n_star.unwrap();
    let seq = random_sequence(&mut rng, 10, 3, 2);
    let (a, _, _, _) = run_engine(EngineKind::RtrlSparse, &params, &readout, &seq, 0);
    let (b, _, _, _) = run_engine(EngineKind::SnapN(n_star), &params, &readout, &seq, 0);
    let bitwise = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    results.push(CheckResult {
        name: "fixpoint-equivalence",
        passed: bitwise,
        detail: format!("n_star = {n_star}, bitwise match = {bitwise}"),
    });

    // dense cell: two-step approximation collapses to exact RTRL
    let params = CellParams::new(Architecture::Vanilla, 6, 3, 0.0, seed ^ 0x44).unwrap();
    let readout = Readout::linear(6, 2, seed ^ 0x45);
    let seq = random_sequence(&mut rng, 8, 3, 2);
    let (a, _, _, _) = run_engine(EngineKind::RtrlDense, &params, &readout, &seq, 0);
    let (b, _, _, _) = run_engine(EngineKind::SnapN(2), &params, &readout, &seq, 0);
    let err = rel_l2(&b, &a);
    results.push(CheckResult {
        name: "dense-snap2-collapse",
        passed: err <= 1e-10,
        detail: format!("relative L2 error {err:.3e} (tolerance 1e-10)"),
    });

    results
}
