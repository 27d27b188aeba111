//! Analytic cost formulas and empirical multiply-add counters per engine.
//!
//! Analytic entries give the standard memory / time-per-step scalings in
//! terms of sequence length T, state size k, recurrent parameter count p,
//! and weight density d = 1 − s. Empirical entries drive one probe sequence
//! through each engine and read the kernel counters; reports express FLOPs
//! as two per multiply-add, but every asserted quantity is a ratio, which is
//! convention-invariant. Readout costs are excluded from engine ratios.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cells::{Architecture, CellParams, InputVec};
use crate::engines::{engine_step, Accumulator, EngineContext, EngineKind};
use crate::error::{Error, Result};
use crate::kernels::MaddCounter;
use crate::pattern::measure_sparsity;
use crate::readout::Readout;

/// Table of analytic (memory, time-per-step) expressions.
pub fn analytic_cost(
    engine: &str,
    seq_len: f64,
    k: f64,
    p: f64,
    d: f64,
) -> Result<(f64, f64)> {
    if !(0.0 < d && d <= 1.0) {
        return Err(Error::Config(format!("density must be in (0, 1], got {d}")));
    }
    let k2 = k * k;
    Ok(match engine {
        "bptt" => (seq_len * k + p, k2 + p),
        "uoro" => (k + p, k2 + p),
        "rtrl" => (k + k * p, k2 + k2 * p),
        "bptt_sparse" => (seq_len * k + d * p, d * (k2 + p)),
        "rtrl_sparse" => (k + d * k * p, d * (k2 + d * k2 * p)),
        "snap1" => (k + d * p, d * (k2 + p)),
        "snap2" => (k + d * d * k * p, d * (k2 + d * d * k2 * p)),
        other => return Err(Error::Config(format!("no analytic cost row for '{other}'"))),
    })
}

/// One empirical probe configuration.
#[derive(Debug, Clone)]
pub struct CostConfig {
    pub arch: Architecture,
    pub units: usize,
    pub input_dim: usize,
    pub sparsity: f64,
    pub seed: u64,
    pub probe_steps: usize,
    /// Engines to measure; ratios are always against bptt and rtrl_sparse,
    /// which are added implicitly.
    pub engines: Vec<EngineKind>,
}

impl CostConfig {
    pub fn standard(arch: Architecture, units: usize, sparsity: f64, seed: u64) -> Self {
        Self {
            arch,
            units,
            input_dim: 4,
            sparsity,
            seed,
            probe_steps: 4,
            engines: vec![
                EngineKind::Bptt,
                EngineKind::Uoro,
                EngineKind::Rflo,
                EngineKind::Snap1,
                EngineKind::SnapN(2),
                EngineKind::SnapN(3),
                EngineKind::RtrlSparse,
            ],
        }
    }

    /// Adds the dense-RTRL row (quadratic in state size; expensive at k ≳ 256).
    pub fn with_dense_rtrl(mut self) -> Self {
        self.engines.push(EngineKind::RtrlDense);
        self
    }
}

/// One measured row.
#[derive(Debug, Clone)]
pub struct CostRow {
    pub engine: String,
    pub arch: Architecture,
    pub units: usize,
    pub param_sparsity: f64,
    /// Sparsity of the influence pattern the engine maintains, when it has one.
    pub j_sparsity: Option<f64>,
    pub madds_per_step: f64,
    pub ratio_vs_bptt: f64,
    pub ratio_vs_rtrl_sparse: f64,
    pub influence_entries: usize,
    pub tape_entries: usize,
}

/// Measures per-step multiply-adds for every requested engine on one probe
/// sequence (a target at every step), with per-step readout costs subtracted.
pub fn empirical_flops_table(configs: &[CostConfig]) -> Result<Vec<CostRow>> {
    let mut rows = Vec::new();
    for cfg in configs {
        let params = CellParams::new(cfg.arch, cfg.units, cfg.input_dim, cfg.sparsity, cfg.seed)?;
        let readout = Readout::linear(cfg.units, 2, cfg.seed ^ 0x5eed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xfeed);
        let seq: Vec<(Vec<f64>, usize)> = (0..cfg.probe_steps)
            .map(|_| {
                (
                    (0..cfg.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    rng.gen_range(0..2),
                )
            })
            .collect();

        // readout correction, measured once: forward and backward counts are
        // input-independent
        let (ro_fwd, ro_bwd) = {
            let mut cf = MaddCounter::new();
            let h = vec![0.1; cfg.units];
            let cache = readout.forward(&h, &mut cf)?;
            let fwd = cf.total();
            let mut cb = MaddCounter::new();
            let mut g = vec![0.0; readout.param_len()];
            readout.backward(&h, &cache, &[0.1, -0.1], &mut g, &mut cb)?;
            (fwd, cb.total())
        };

        let mut engines = cfg.engines.clone();
        for required in [EngineKind::Bptt, EngineKind::RtrlSparse] {
            if !engines.contains(&required) {
                engines.push(required);
            }
        }

        let mut measured: Vec<(EngineKind, f64, Option<f64>, usize, usize)> = Vec::new();
        for &kind in &engines {
            let ctx = EngineContext::new(kind, &params)?;
            let mut acc = ctx.fresh_accumulator(cfg.seed);
            let mut state = params.zero_state();
            let mut grad_core = vec![0.0; ctx.grad_len()];
            let mut grad_ro = vec![0.0; readout.param_len()];
            let mut counter = MaddCounter::new();
            for (x, t) in &seq {
                let (next, _) = engine_step(
                    &ctx,
                    &params,
                    &readout,
                    &state,
                    &mut acc,
                    &InputVec::Dense(x),
                    Some(*t),
                    &mut grad_core,
                    &mut grad_ro,
                    &mut counter,
                )?;
                state = next;
            }
            let mut tape_entries = 0;
            if let Accumulator::Tape(ref mut tape) = acc {
                tape_entries = tape.len();
                crate::engines::flush_window(
                    &params,
                    &readout,
                    tape,
                    &mut grad_core,
                    &mut grad_ro,
                    &mut counter,
                )?;
            }
            // bptt touches the readout forward twice (metrics + flush)
            let ro_per_step = match kind {
                EngineKind::Bptt => 2 * ro_fwd + ro_bwd,
                _ => ro_fwd + ro_bwd,
            };
            let net = counter
                .total()
                .saturating_sub(ro_per_step * cfg.probe_steps as u64);
            let per_step = net as f64 / cfg.probe_steps as f64;
            let j_sparsity = ctx.j_pattern.as_ref().map(|p| measure_sparsity(p));
            let influence = match &acc {
                Accumulator::Tape(_) => 0,
                other => other.nnz(),
            };
            measured.push((kind, per_step, j_sparsity, influence, tape_entries));
        }

        let base_bptt = measured
            .iter()
            .find(|(k, ..)| *k == EngineKind::Bptt)
            .map(|&(_, m, ..)| m)
            .expect("bptt row present");
        let base_rtrl = measured
            .iter()
            .find(|(k, ..)| *k == EngineKind::RtrlSparse)
            .map(|&(_, m, ..)| m)
            .expect("rtrl_sparse row present");

        for (kind, per_step, j_sparsity, influence, tape) in measured {
            if !cfg.engines.contains(&kind) {
                continue;
            }
            rows.push(CostRow {
                engine: kind.name(),
                arch: cfg.arch,
                units: cfg.units,
                param_sparsity: cfg.sparsity,
                j_sparsity,
                madds_per_step: per_step,
                ratio_vs_bptt: per_step / base_bptt,
                ratio_vs_rtrl_sparse: per_step / base_rtrl,
                influence_entries: influence,
                tape_entries: tape,
            });
        }
    }
    Ok(rows)
}

/// Writes the table with the fixed column header. FLOPs convention: one
/// multiply-add counts as two FLOPs; the `madds` column is raw multiply-adds.
pub fn write_cost_csv<W: Write>(rows: &[CostRow], out: &mut W) -> Result<()> {
    writeln!(
        out,
        "engine,arch,k,param_sparsity,j_sparsity,madds,ratio_vs_bptt,ratio_vs_rtrl"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:.1},{:.4},{:.6}",
            r.engine,
            r.arch.name(),
            r.units,
            r.param_sparsity,
            r.j_sparsity.map_or(String::new(), |s| format!("{s:.4}")),
            r.madds_per_step,
            r.ratio_vs_bptt,
            r.ratio_vs_rtrl_sparse,
        )?;
    }
    Ok(())
}
