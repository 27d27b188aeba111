//! The training loop: task batches → engine steps → online update cycle →
//! optimizer, with metrics logging.
//!
//! Batch elements run in lockstep over timesteps; each element owns its
//! state, influence accumulator, and gradient buffers, so elements may be
//! advanced in parallel. Gradients are reduced in element order and averaged
//! over the batch, which keeps trajectories bit-identical regardless of
//! thread count. Every processed timestep counts as one token.
//!
//! With update period U ≥ 1 the optimizer fires every U timesteps; the
//! influence accumulator and state are carried forward stale across the
//! update. U = 0 accumulates over the whole sequence and updates once at its
//! end. Any partial window remaining at a sequence boundary is applied there,
//! so gradients never leak across sequences. Accumulators reset at sequence
//! boundaries.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cells::{CellParams, InputVec, StateVec};
use crate::engines::{engine_step, flush_window, Accumulator, EngineContext, EngineKind};
use crate::error::{Error, Result};
use crate::kernels::MaddCounter;
use crate::optim::{prune_step, Optimizer, PruneSchedule};
use crate::readout::{softmax_loss, Readout};
use crate::tasks::{
    bpc_from_nats, curriculum_update, sample_copy_batch, sample_copy_fixed_batch, synthetic_corpus,
    ByteCorpus, CopyCurriculum, CopySequence,
};

use super::config::{RunConfig, TaskId};
use super::metrics::{MetricsRecord, MetricsWriter};

/// Final state of a run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub steps: u64,
    pub tokens: u64,
    pub final_level: usize,
    pub final_bpc: f64,
    pub val_bpc: Option<f64>,
    pub madds: u64,
}

enum WorkerSeq {
    Copy(CopySequence),
    Lm { offset: usize },
}

struct Worker {
    state: StateVec,
    acc: Accumulator,
    grad_core: Vec<f64>,
    grad_ro: Vec<f64>,
    counter: MaddCounter,
    seq: Option<WorkerSeq>,
    loss_sum: f64,
    loss_count: u64,
    acc_nnz: usize,
    /// Gradient buffers hold nonzero contributions since the last update.
    dirty: bool,
}

impl Worker {
    fn seq_len(&self, crop_len: usize) -> usize {
        match &self.seq {
            Some(WorkerSeq::Copy(s)) => s.len(),
            Some(WorkerSeq::Lm { .. }) => crop_len,
            None => 0,
        }
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    kind: EngineKind,
    pub params: CellParams,
    pub readout: Readout,
    ctx: EngineContext,
    optimizer: Optimizer,
    /// Flat trainable vector: core parameters then readout parameters.
    flat: Vec<f64>,
    frozen: Vec<bool>,
    core_len: usize,
    workers: Vec<Worker>,
    data_rng: ChaCha8Rng,
    pub curriculum: CopyCurriculum,
    train_corpus: Option<ByteCorpus>,
    val_corpus: Option<ByteCorpus>,
    prune: Option<PruneSchedule>,
    pub steps: u64,
    pub tokens: u64,
    pub total_madds: u64,
    pending_update: bool,
    started: Instant,
    last_grad_norm: f64,
    pub last_val_bpc: Option<f64>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let kind = cfg.engine_kind()?;
        let params = CellParams::new(
            cfg.arch,
            cfg.units,
            cfg.input_dim(),
            cfg.sparsity,
            cfg.seed ^ 0x6d61_736b,
        )?;
        let readout = if cfg.readout_hidden > 0 {
            Readout::mlp(cfg.units, cfg.readout_hidden, cfg.classes(), cfg.seed ^ 0x7265_6164)
        } else {
            Readout::linear(cfg.units, cfg.classes(), cfg.seed ^ 0x7265_6164)
        };
        let ctx = EngineContext::new(kind, &params)?;
        let core_len = ctx.grad_len();
        let trainable = core_len + readout.param_len();
        let optimizer = Optimizer::new(cfg.optimizer, cfg.lr, trainable);

        let mut flat = vec![0.0; trainable];
        read_core(&params, kind, &mut flat[..core_len]);
        readout.read_flat(&mut flat[core_len..]);
        let mut frozen = vec![false; trainable];
        if kind == EngineKind::Bptt {
            // dense layout: masked entries are permanently frozen at zero
            for i in 0..core_len {
                if params.layout.map.column_of(i).is_none() {
                    frozen[i] = true;
                }
            }
        }

        let workers = (0..cfg.batch)
            .map(|w| Worker {
                state: params.zero_state(),
                acc: ctx.fresh_accumulator(cfg.seed ^ (0x756f_726f + w as u64)),
                grad_core: vec![0.0; core_len],
                grad_ro: vec![0.0; readout.param_len()],
                counter: MaddCounter::new(),
                seq: None,
                loss_sum: 0.0,
                loss_count: 0,
                acc_nnz: 0,
                dirty: false,
            })
            .collect();

        let (train_corpus, val_corpus) = if cfg.task == TaskId::ByteLm {
            let corpus = match &cfg.corpus {
                Some(path) => ByteCorpus::load(path)?,
                None => ByteCorpus::from_bytes(synthetic_corpus(cfg.corpus_bytes, cfg.seed ^ 0xc0)),
            };
            let (train, val) = corpus.split_validation(cfg.val_fraction);
            if train.len() <= cfg.crop_len || val.len() <= cfg.crop_len {
                return Err(Error::Config("corpus too short for the crop length".into()));
            }
            (Some(train), Some(val))
        } else {
            (None, None)
        };

        Ok(Self {
            data_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xda7a),
            prune: cfg.prune_schedule(),
            cfg,
            kind,
            params,
            readout,
            ctx,
            optimizer,
            flat,
            frozen,
            core_len,
            workers,
            curriculum: CopyCurriculum::new(),
            train_corpus,
            val_corpus,
            steps: 0,
            tokens: 0,
            total_madds: 0,
            pending_update: false,
            started: Instant::now(),
            last_grad_norm: 0.0,
            last_val_bpc: None,
        })
    }

    fn assign_batch(&mut self) {
        match self.cfg.task {
            TaskId::Copy => {
                let seqs = sample_copy_batch(&self.curriculum, self.cfg.batch, &mut self.data_rng);
                for (w, s) in self.workers.iter_mut().zip(seqs) {
                    w.seq = Some(WorkerSeq::Copy(s));
                }
            }
            TaskId::CopyFixed => {
                let seqs =
                    sample_copy_fixed_batch(self.cfg.copy_fixed_len, self.cfg.batch, &mut self.data_rng);
                for (w, s) in self.workers.iter_mut().zip(seqs) {
                    w.seq = Some(WorkerSeq::Copy(s));
                }
            }
            TaskId::ByteLm => {
                let corpus = self.train_corpus.as_ref().expect("built in new()");
                for w in self.workers.iter_mut() {
                    let offset = corpus
                        .sample_offset(self.cfg.crop_len, &mut self.data_rng)
                        .expect("validated corpus length");
                    w.seq = Some(WorkerSeq::Lm { offset });
                }
            }
        }
        for w in self.workers.iter_mut() {
            w.loss_sum = 0.0;
            w.loss_count = 0;
        }
    }

    /// Runs one batch to completion and returns its mean bpc over loss steps.
    pub fn step_batch(&mut self) -> Result<f64> {
        self.assign_batch();
        let crop_len = self.cfg.crop_len;
        let max_len = self
            .workers
            .iter()
            .map(|w| w.seq_len(crop_len))
            .max()
            .unwrap_or(0);
        let update_period = self.cfg.update_period;

        for t in 0..max_len {
            let ctx = &self.ctx;
            let params = &self.params;
            let readout = &self.readout;
            let corpus = self.train_corpus.as_ref();
            let active: u64 = self
                .workers
                .par_iter_mut()
                .map(|w| -> Result<u64> {
                    let len = w.seq_len(crop_len);
                    if t >= len {
                        return Ok(0);
                    }
                    let (x, target) = match w.seq.as_ref().expect("assigned") {
                        WorkerSeq::Copy(s) => {
                            (InputVec::Dense(&s.inputs[t][..]), s.targets[t])
                        }
                        WorkerSeq::Lm { offset } => {
                            let corpus = corpus.expect("lm corpus");
                            let (inputs, targets) = corpus.crop(*offset, crop_len);
                            (
                                InputVec::OneHot {
                                    index: inputs[t] as usize,
                                    dim: crate::tasks::BYTE_CLASSES,
                                },
                                Some(targets[t] as usize),
                            )
                        }
                    };
                    let (next, outcome) = engine_step(
                        ctx,
                        params,
                        readout,
                        &w.state,
                        &mut w.acc,
                        &x,
                        target,
                        &mut w.grad_core,
                        &mut w.grad_ro,
                        &mut w.counter,
                    )?;
                    w.state = next;
                    if let Some(loss) = outcome.loss {
                        w.loss_sum += loss;
                        w.loss_count += 1;
                        w.dirty = true;
                    }
                    w.acc_nnz = outcome.accumulator_nnz;
                    Ok(1)
                })
                .try_reduce(|| 0u64, |a, b| Ok(a + b))?;
            self.tokens += active;
            self.pending_update = true;
            if update_period > 0 && (t + 1) % update_period == 0 {
                self.apply_update()?;
            }
        }
        if self.pending_update {
            self.apply_update()?;
        }

        let loss_sum: f64 = self.workers.iter().map(|w| w.loss_sum).sum();
        let loss_count: u64 = self.workers.iter().map(|w| w.loss_count).sum();
        let bpc = if loss_count > 0 {
            bpc_from_nats(loss_sum / loss_count as f64)
        } else {
            f64::INFINITY
        };

        if self.cfg.task == TaskId::Copy {
            curriculum_update(&mut self.curriculum, bpc);
        }

        // sequence boundary: fresh state and influence
        for w in self.workers.iter_mut() {
            self.ctx.reset_accumulator(&mut w.acc);
            w.state = self.params.zero_state();
            w.seq = None;
        }
        Ok(bpc)
    }

    /// Applies the optimizer to the batch-averaged accumulated gradients,
    /// then zeroes the gradient buffers. BPTT tapes are flushed first.
    fn apply_update(&mut self) -> Result<()> {
        if self.kind == EngineKind::Bptt {
            let params = &self.params;
            let readout = &self.readout;
            self.workers
                .par_iter_mut()
                .map(|w| -> Result<()> {
                    if let Accumulator::Tape(ref mut tape) = w.acc {
                        if !tape.is_empty() {
                            flush_window(
                                params,
                                readout,
                                tape,
                                &mut w.grad_core,
                                &mut w.grad_ro,
                                &mut w.counter,
                            )?;
                            w.dirty = true;
                        }
                    }
                    Ok(())
                })
                .collect::<Result<Vec<()>>>()?;
        }

        let batch = self.cfg.batch as f64;
        let total = self.flat.len();
        let mut grad = vec![0.0; total];
        for w in self.workers.iter_mut() {
            if !w.dirty {
                continue;
            }
            for (g, v) in grad[..self.core_len].iter_mut().zip(&w.grad_core) {
                *g += v;
            }
            for (g, v) in grad[self.core_len..].iter_mut().zip(&w.grad_ro) {
                *g += v;
            }
            w.grad_core.iter_mut().for_each(|v| *v = 0.0);
            w.grad_ro.iter_mut().for_each(|v| *v = 0.0);
            w.dirty = false;
        }
        grad.iter_mut().for_each(|g| *g /= batch);
        self.last_grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();

        self.optimizer.step(&mut self.flat, &grad, &self.frozen)?;
        write_core(&mut self.params, self.kind, &self.flat[..self.core_len]);
        self.readout.write_flat(&self.flat[self.core_len..]);
        self.steps += 1;
        self.pending_update = false;

        if let Some(schedule) = self.prune.clone() {
            if schedule.is_boundary(self.steps) {
                let newly = prune_step(&schedule, self.steps, &mut self.params)?;
                for &i in &newly {
                    self.frozen[i] = true;
                }
                self.optimizer.freeze(&newly);
                read_core(&self.params, self.kind, &mut self.flat[..self.core_len]);
            }
        }
        Ok(())
    }

    /// Held-out bits per character over a fixed set of crops.
    pub fn validate(&mut self) -> Result<f64> {
        let corpus = self
            .val_corpus
            .as_ref()
            .ok_or_else(|| Error::Config("validation needs a byte-lm run".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x7a1);
        let crops = 24usize;
        let mut counter = MaddCounter::new();
        let mut loss_sum = 0.0;
        let mut count = 0u64;
        for _ in 0..crops {
            let offset = corpus.sample_offset(self.cfg.crop_len, &mut rng)?;
            let (inputs, targets) = corpus.crop(offset, self.cfg.crop_len);
            let mut state = self.params.zero_state();
            for (&b, &target) in inputs.iter().zip(targets.iter()) {
                let x = InputVec::OneHot {
                    index: b as usize,
                    dim: crate::tasks::BYTE_CLASSES,
                };
                let (next, _) = self.params.step_forward(&state, &x, &mut counter)?;
                let rc = self
                    .readout
                    .forward(&next[..self.cfg.units], &mut counter)?;
                loss_sum += softmax_loss(&rc.logits, target as usize).0;
                count += 1;
                state = next;
            }
        }
        let bpc = bpc_from_nats(loss_sum / count as f64);
        self.last_val_bpc = Some(bpc);
        Ok(bpc)
    }

    fn gather_madds(&mut self) {
        self.total_madds = self.workers.iter().map(|w| w.counter.total()).sum();
    }

    fn record(&mut self, bpc: f64, loss_nats: f64) -> MetricsRecord {
        self.gather_madds();
        MetricsRecord {
            step: self.steps,
            tokens: self.tokens,
            loss_nats,
            bpc,
            level: match self.cfg.task {
                TaskId::Copy => Some(self.curriculum.level),
                _ => None,
            },
            val_bpc: self.last_val_bpc,
            grad_norm: self.last_grad_norm,
            accumulator_nnz: self.workers.first().map_or(0, |w| w.acc_nnz),
            madds: self.total_madds,
            wall_ms: self.started.elapsed().as_millis() as u64,
            config_hash: self.cfg.hash(),
        }
    }

    fn budget_exhausted(&self) -> bool {
        let token_done = self.cfg.budget_tokens > 0 && self.tokens >= self.cfg.budget_tokens;
        let step_done = self.cfg.budget_steps > 0 && self.steps >= self.cfg.budget_steps;
        if self.cfg.budget_tokens > 0 && self.cfg.budget_steps > 0 {
            token_done || step_done
        } else if self.cfg.budget_steps > 0 {
            step_done
        } else {
            token_done
        }
    }

    /// Full training loop; streams metrics and returns the summary.
    pub fn run(&mut self, writer: &mut MetricsWriter) -> Result<RunSummary> {
        let mut last_logged_tokens = 0u64;
        let mut last_eval_step = 0u64;
        let mut last_bpc = f64::INFINITY;
        let mut last_loss = f64::INFINITY;
        while !self.budget_exhausted() {
            let bpc = self.step_batch()?;
            let loss_nats = bpc * std::f64::consts::LN_2;
            last_bpc = bpc;
            last_loss = loss_nats;
            if self.cfg.task == TaskId::ByteLm
                && self.cfg.eval_interval > 0
                && self.steps - last_eval_step >= self.cfg.eval_interval
            {
                self.validate()?;
                last_eval_step = self.steps;
            }
            if self.tokens - last_logged_tokens >= self.cfg.log_interval {
                let rec = self.record(bpc, loss_nats);
                writer.write(&rec)?;
                last_logged_tokens = self.tokens;
            }
        }
        if self.cfg.task == TaskId::ByteLm {
            self.validate()?;
        }
        let rec = self.record(last_bpc, last_loss);
        writer.write(&rec)?;
        Ok(RunSummary {
            config_hash: self.cfg.hash(),
            steps: self.steps,
            tokens: self.tokens,
            final_level: self.curriculum.level,
            final_bpc: last_bpc,
            val_bpc: self.last_val_bpc,
            madds: self.total_madds,
        })
    }
}

fn read_core(params: &CellParams, kind: EngineKind, out: &mut [f64]) {
    match kind {
        EngineKind::Bptt => params.read_flat(out),
        _ => params.read_compressed(out),
    }
}

fn write_core(params: &mut CellParams, kind: EngineKind, vals: &[f64]) {
    match kind {
        EngineKind::Bptt => params.write_flat(vals),
        _ => params.write_compressed(vals),
    }
}

/// Runs one configured experiment end to end, writing `config.txt`,
/// `metrics.jsonl`, and `summary.csv` under the output directory when one is
/// configured. Deterministic given (config, seed), except wall-clock fields.
pub fn run_experiment(cfg: RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out_dir = cfg.out.clone();
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), cfg.to_kv())?;
    }
    let metrics_path = out_dir.as_ref().map(|d| d.join("metrics.jsonl"));
    let mut writer = MetricsWriter::new(metrics_path.as_deref())?;
    let mut trainer = Trainer::new(cfg)?;
    let summary = trainer.run(&mut writer)?;
    if let Some(dir) = &out_dir {
        let mut csv = String::from(
            "config_hash,task,arch,units,sparsity,engine,update_period,batch,lr,seed,steps,tokens,final_level,final_bpc,val_bpc\n",
        );
        let c = &trainer.cfg;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.6},{}\n",
            summary.config_hash,
            c.task.name(),
            c.arch.name(),
            c.units,
            c.sparsity,
            c.engine,
            c.update_period,
            c.batch,
            c.lr,
            c.seed,
            summary.steps,
            summary.tokens,
            summary.final_level,
            summary.final_bpc,
            summary.val_bpc.map_or(String::new(), |v| format!("{v:.6}")),
        ));
        std::fs::write(dir.join("summary.csv"), csv)?;
    }
    Ok(summary)
}
