//! Command-line interface: `train`, `ablate`, `bench-compression`, `replay`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use log::info;

use crate::checkpoint::Checkpoint;
use crate::config::{Ablation, RunConfig};
use crate::error::{Error, Result};
use crate::optimizer::task_objective_with_grad;
use crate::policy::sample_rollouts;
use crate::trace::{validate_run_dir, ReplayReport, TraceWriter, CHECKPOINT_FILE};
use crate::trainer::{run, summarize, TrainContext, TrainSummary};
use crate::utility::{compress_gradient, cosine_similarity};
use crate::envs::{score_rollouts, synthetic_format_flags};

#[derive(Debug, Parser)]
#[command(name = "astor", version, about = "Utility-driven multi-task GRPO on synthetic verifiable tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write traces plus a final checkpoint.
    Train(RunArgs),
    /// Train with one scheduling or KL component disabled.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = PossibleValuesParser::new(["uniform-quotas", "random-prompts", "fixed-beta", "uniform-beta"]))]
        ablation: String,
    },
    /// Report gradient compression size and cost for the configured policy.
    BenchCompression {
        #[arg(long)]
        config: PathBuf,
        /// Timing repetitions.
        #[arg(long, default_value_t = 20)]
        iters: usize,
    },
    /// Validate the traces of a run directory.
    Replay {
        /// Run directory written by `train` or `ablate`.
        trace: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write prompts.csv.
    #[arg(long)]
    pub verbose_prompts: bool,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        config.trace.verbose_prompts |= self.verbose_prompts;
        config.validate()?;
        Ok(config)
    }
}

/// Train with full tracing into `config.output_dir`.
pub fn run_traced(config: RunConfig) -> Result<TrainSummary> {
    let ctx = TrainContext::new(config)?;
    let dir = ctx.config.output_dir.clone();
    let mut writer = TraceWriter::create(&dir, &ctx.config)?;
    let state = run(&ctx, ctx.initial_state()?, |state, record| {
        if state.step % 50 == 0 {
            info!("step {}: objective {:.6}", state.step, record.objective);
        }
        writer.record(record)
    })?;
    writer.finish()?;
    Checkpoint::from_state(&state).save(&dir.join(CHECKPOINT_FILE))?;
    summarize(&ctx, &state)
}

fn print_summary(config: &RunConfig, summary: &TrainSummary) {
    println!("run: {} (ablation {}, seed {})", config.output_dir.display(), config.ablation, config.seed);
    println!("steps: {}", summary.steps);
    for (k, sampled) in &summary.sampled {
        let name = &config.suite.tasks[k.0].name;
        println!("task {k} {name}: sampled {sampled:.4} greedy {:.4}", summary.greedy[k]);
    }
    println!("mean: sampled {:.4} greedy {:.4}", summary.mean_sampled, summary.mean_greedy);
}

pub fn cmd_train(args: &RunArgs) -> Result<()> {
    let config = args.load()?;
    let summary = run_traced(config.clone())?;
    print_summary(&config, &summary);
    Ok(())
}

pub fn cmd_ablate(args: &RunArgs, ablation: &str) -> Result<()> {
    let mut config = args.load()?;
    config.ablation = ablation.parse::<Ablation>()?;
    let summary = run_traced(config.clone())?;
    print_summary(&config, &summary);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    pub layer_shapes: Vec<(String, Vec<usize>)>,
    pub parameters: usize,
    pub compressed_dim: usize,
    pub ratio: f64,
    /// Seconds per compress + all pairwise cosines.
    pub compress_secs: f64,
    /// Seconds per forward/backward pass over one batch.
    pub forward_backward_secs: f64,
}

impl CompressionReport {
    pub fn overhead_percent(&self) -> f64 {
        100.0 * self.compress_secs / self.forward_backward_secs
    }
}

/// Time one task objective gradient against compressing it and comparing it
/// with every task's gradient, using the configured policy shape.
pub fn bench_compression(config: &RunConfig, iters: usize) -> Result<CompressionReport> {
    let ctx = TrainContext::new(config.clone())?;
    let state = ctx.initial_state()?;
    let task = &ctx.tasks[0];
    let n = config.budget.min(task.prompt_pool.len());
    let groups = task.prompt_pool[..n]
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let g = sample_rollouts(&state.params, p, config.group_size, i as u64)?;
            let flags = synthetic_format_flags(task, &g);
            score_rollouts(task, g, &flags)
        })
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<_> = task.prompt_pool[..n].iter().zip(&groups).collect();
    let opt = &config.optimizer;
    let iters = iters.max(1);

    let start = Instant::now();
    let mut grad = None;
    for _ in 0..iters {
        grad = Some(task_objective_with_grad(&batch, &state.params, &state.ref_params, task.beta_base, opt.clip_eps, opt.ratio_baseline)?.1);
    }
    let forward_backward_secs = start.elapsed().as_secs_f64() / iters as f64;
    let grad = grad.expect("at least one iteration");

    let emas: Vec<Vec<f64>> = state.ledger.gradient_emas().into_values().collect();
    let start = Instant::now();
    let mut compressed = compress_gradient(&grad);
    for _ in 0..iters {
        compressed = compress_gradient(&grad);
        for other in &emas {
            std::hint::black_box(cosine_similarity(&compressed.vector, other)?);
        }
    }
    let compress_secs = start.elapsed().as_secs_f64() / iters as f64;

    let parameters = state.params.num_parameters();
    Ok(CompressionReport {
        layer_shapes: state.params.layers().iter().map(|l| (l.name.clone(), l.tensor.shape().to_vec())).collect(),
        parameters,
        compressed_dim: compressed.dim(),
        ratio: parameters as f64 / compressed.dim() as f64,
        compress_secs,
        forward_backward_secs,
    })
}

pub fn cmd_bench_compression(config_path: &Path, iters: usize) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let r = bench_compression(&config, iters)?;
    let s = &config.suite;
    println!("policy: V={} L={} F={}", s.vocab_size, s.seq_len, s.feature_dim);
    for (name, shape) in &r.layer_shapes {
        println!("layer {name}: {shape:?}");
    }
    println!("parameters: {}", r.parameters);
    println!("compressed_dim: {}", r.compressed_dim);
    println!("reduction_ratio: {}/{} = {}", r.parameters, r.compressed_dim, r.ratio);
    println!(
        "overhead: compress+similarity {:.3} us, forward/backward {:.3} us, share {:.4}%",
        r.compress_secs * 1e6,
        r.forward_backward_secs * 1e6,
        r.overhead_percent()
    );
    Ok(())
}

pub fn cmd_replay(dir: &Path) -> Result<ReplayReport> {
    let report = validate_run_dir(dir)?;
    println!("steps: {}", report.steps);
    println!("tasks: {}", report.tasks);
    println!("rows: {}", report.rows);
    println!("violations: {}", report.violations.len());
    for v in &report.violations {
        println!("  {v}");
    }
    if report.is_valid() {
        Ok(report)
    } else {
        Err(Error::Trace(format!("{} trace violations in {}", report.violations.len(), dir.display())))
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Ablate { run, ablation } => cmd_ablate(run, ablation),
        Command::BenchCompression { config, iters } => cmd_bench_compression(config, *iters),
        Command::Replay { trace } => cmd_replay(trace).map(|_| ()),
    }
}
