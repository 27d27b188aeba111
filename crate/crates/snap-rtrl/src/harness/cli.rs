//! Command-line interface: `run`, `sweep`, `costs`, `bias`, `gradcheck`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::cells::Architecture;
use crate::costmodel::{empirical_flops_table, write_cost_csv, CostConfig};
use crate::diagnostics::gradcheck;
use crate::error::{Error, Result};

use super::bias::{analyze_bias, BiasConfig};
use super::config::RunConfig;
use super::train::run_experiment;

#[derive(Parser)]
#[command(
    name = "snap-rtrl",
    about = "Online RNN training with sparse approximations to real-time recurrent learning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Run(RunArgs),
    /// Grid over learning rates and seeds with per-run outputs and an aggregate.
    Sweep(SweepArgs),
    /// Analytic and measured cost tables (CSV).
    Costs(CostsArgs),
    /// Exact-influence bias analysis on a small net.
    Bias(BiasArgs),
    /// Gradient oracle suites on small nets.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key = value config file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    units: Option<usize>,
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long)]
    engine: Option<String>,
    #[arg(long)]
    update_period: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    budget_tokens: Option<u64>,
    #[arg(long)]
    budget_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra key=value overrides (repeatable), e.g. --set crop_len=64.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        macro_rules! flag {
            ($field:ident, $key:literal) => {
                if let Some(v) = &self.$field {
                    cfg.set($key, &v.to_string())?;
                }
            };
        }
        flag!(task, "task");
        flag!(arch, "arch");
        flag!(units, "units");
        flag!(sparsity, "sparsity");
        flag!(engine, "engine");
        flag!(update_period, "update_period");
        flag!(batch, "batch");
        flag!(lr, "lr");
        flag!(optimizer, "optimizer");
        flag!(budget_tokens, "budget_tokens");
        flag!(budget_steps, "budget_steps");
        flag!(seed, "seed");
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated learning rates.
    #[arg(long, default_value = "1e-3,3.1623e-4,1e-4")]
    lrs: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Concurrent runs.
    #[arg(long, default_value_t = 2)]
    threads: usize,
}

#[derive(Args)]
struct CostsArgs {
    #[arg(long, default_value = "vanilla")]
    arch: String,
    #[arg(long, default_value_t = 128)]
    units: usize,
    #[arg(long, default_value_t = 0.75)]
    sparsity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Include the dense-RTRL row (quadratic cost in the state size).
    #[arg(long)]
    dense_rtrl: bool,
    /// CSV output path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BiasArgs {
    #[arg(long, default_value_t = 8)]
    units: usize,
    #[arg(long, default_value_t = 0.75)]
    sparsity: f64,
    #[arg(long, default_value_t = 16)]
    target_len: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated checkpoint steps.
    #[arg(long, default_value = "100,1000,5000")]
    checkpoints: String,
    /// Output directory for the report and influence dumps.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} entry '{x}'")))
        })
        .collect()
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = args.config.build()?;
    let summary = run_experiment(cfg)?;
    println!(
        "done: steps {} tokens {} level {} bpc {:.4}{}",
        summary.steps,
        summary.tokens,
        summary.final_level,
        summary.final_bpc,
        summary
            .val_bpc
            .map_or(String::new(), |v| format!(" val_bpc {v:.4}")),
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let base = args.config.build()?;
    let lrs: Vec<f64> = parse_list(&args.lrs, "learning rate")?;
    let seeds: Vec<u64> = parse_list(&args.seeds, "seed")?;
    let out_root = base
        .out
        .clone()
        .ok_or_else(|| Error::Config("sweep needs --out".into()))?;
    std::fs::create_dir_all(&out_root)?;

    let mut jobs = Vec::new();
    for &lr in &lrs {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.lr = lr;
            cfg.seed = seed;
            cfg.out = Some(out_root.join(format!("lr{lr}_seed{seed}")));
            jobs.push(cfg);
        }
    }

    let threads = args.threads.max(1);
    let results: Vec<(usize, Result<super::train::RunSummary>)> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in jobs
            .iter()
            .cloned()
            .enumerate()
            .collect::<Vec<_>>()
            .chunks(jobs.len().div_ceil(threads))
        {
            let chunk = chunk.to_vec();
            handles.push(scope.spawn(move || {
                chunk
                    .into_iter()
                    .map(|(i, cfg)| (i, run_experiment(cfg)))
                    .collect::<Vec<_>>()
            }));
        }
        let mut all: Vec<(usize, Result<super::train::RunSummary>)> = Vec::new();
        for h in handles {
            all.extend(h.join().expect("sweep worker"));
        }
        all.sort_by_key(|(i, _)| *i);
        all
    });

    // aggregate per learning rate: mean and min/max over seeds, never a
    // single silent seed
    let is_copy = matches!(base.task, super::config::TaskId::Copy);
    let mut agg = String::from("lr,seeds,metric,mean,min,max\n");
    let mut best: Option<(f64, f64)> = None; // (lr, mean score)
    for &lr in &lrs {
        let mut values = Vec::new();
        for (i, r) in &results {
            if (jobs[*i].lr - lr).abs() > f64::EPSILON {
                continue;
            }
            let summary = r.as_ref().map_err(|e| Error::Config(e.to_string()))?;
            values.push(if is_copy {
                summary.final_level as f64
            } else {
                summary.val_bpc.unwrap_or(summary.final_bpc)
            });
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let metric = if is_copy { "final_level" } else { "val_bpc" };
        agg.push_str(&format!("{lr},{},{metric},{mean:.4},{min:.4},{max:.4}\n", values.len()));
        let better = match best {
            None => true,
            Some((_, score)) => {
                if is_copy {
                    mean > score
                } else {
                    mean < score
                }
            }
        };
        if better {
            best = Some((lr, mean));
        }
    }
    std::fs::write(out_root.join("aggregate.csv"), &agg)?;
    print!("{agg}");
    if let Some((lr, score)) = best {
        println!("best lr {lr} (mean {score:.4})");
    }
    Ok(())
}

fn cmd_costs(args: &CostsArgs) -> Result<()> {
    let arch = Architecture::parse(&args.arch)?;
    let mut cfg = CostConfig::standard(arch, args.units, args.sparsity, args.seed);
    if args.dense_rtrl {
        cfg = cfg.with_dense_rtrl();
    }
    let rows = empirical_flops_table(&[cfg])?;
    let mut buf = Vec::new();
    write_cost_csv(&rows, &mut buf)?;
    match &args.out {
        Some(path) => std::fs::write(path, &buf)?,
        None => print!("{}", String::from_utf8_lossy(&buf)),
    }
    Ok(())
}

fn cmd_bias(args: &BiasArgs) -> Result<()> {
    let cfg = BiasConfig {
        units: args.units,
        sparsity: args.sparsity,
        target_len: args.target_len,
        batch: args.batch,
        lr: args.lr,
        seed: args.seed,
        checkpoints: parse_list(&args.checkpoints, "checkpoint")?,
    };
    let reports = analyze_bias(&cfg, args.out.as_deref())?;
    println!("step,snap1_mean_kept,snap1_mass,snap2_mean_kept,snap2_mass,nonzero");
    let mut csv = String::from("step,snap1_mean_kept,snap1_mass,snap2_mean_kept,snap2_mass,nonzero\n");
    for r in &reports {
        let line = format!(
            "{},{:.4e},{:.4},{:.4e},{:.4},{}",
            r.step,
            r.snap1_mean_kept,
            r.snap1_mass_fraction,
            r.snap2_mean_kept,
            r.snap2_mass_fraction,
            r.nonzero_entries
        );
        println!("{line}");
        csv.push_str(&line);
        csv.push('\n');
    }
    if let Some(dir) = &args.out {
        std::fs::write(dir.join("bias_report.csv"), csv)?;
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let results = gradcheck(args.seed);
    let mut all_ok = true;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        all_ok &= r.passed;
    }
    if all_ok {
        Ok(())
    } else {
        Err(Error::Config("gradcheck failed".into()))
    }
}

/// Entry point; returns the process exit status.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage/help text
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Costs(args) => cmd_costs(args),
        Command::Bias(args) => cmd_bias(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
