use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use meterguard::attacks::{AttackConfig, AttackKind, AttackParams, DEFAULT_MAX_ITER};
use meterguard::eval::{average_l1, measure_recall};
use meterguard::models::Family;
use meterguard::pipeline::{model_name, AttackRequest, Pipeline, Role, RunConfig, Source};
use meterguard::{Error, Result};

#[derive(Parser)]
#[command(
    name = "meterguard",
    version,
    about = "Adversarial evaluation of neural energy-theft detectors",
    arg_required_else_help = true
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Recompute every stage touched instead of reusing cached outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Raw readings file (`meter_id code kwh`, optionally gzip).
    #[arg(long, global = true)]
    data_in: Option<PathBuf>,
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Report directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, conflicts_with = "raw")]
    synthetic: bool,
    #[arg(long, global = true)]
    raw: bool,
    /// Rows in each of the defender and attacker datasets.
    #[arg(long, global = true, visible_alias = "rows")]
    count: Option<usize>,
    #[arg(long, global = true)]
    width_scale: Option<f64>,
    /// Comma list or `log:lo:hi:count`.
    #[arg(long, global = true)]
    eps_grid: Option<String>,
    #[arg(long, global = true)]
    step_max: Option<usize>,
    /// Comma list or `log:lo:hi:count`.
    #[arg(long, global = true)]
    size_grid: Option<String>,
    #[arg(long, global = true)]
    sigma: Option<f64>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Any other configuration key, as KEY=VALUE; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the defender and attacker datasets.
    PrepareData,
    /// Train the plain defender and attacker models.
    Train,
    /// Train distilled defenders.
    Distill,
    /// Generate one adversarial batch.
    Attack(AttackArgs),
    /// Run every attack experiment.
    Evaluate,
    /// Write reports and plot data.
    Report,
    /// Run all stages end to end.
    Reproduce,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    family: Family,
    /// Model whose gradients drive the attack: defender, attacker or distilled.
    #[arg(long, default_value = "attacker")]
    surrogate: Role,
    #[arg(long)]
    kind: AttackKind,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    step: Option<usize>,
    #[arg(long)]
    size: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    u: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
    /// Vectors to generate; defaults to the configured per-cell count.
    #[arg(long)]
    vectors: Option<usize>,
}

impl AttackArgs {
    fn params(&self) -> Result<AttackParams> {
        let need = |v: Option<f64>, flag: &str| {
            v.ok_or_else(|| Error::InvalidConfig(format!("{} needs --{flag}", self.kind)))
        };
        Ok(match self.kind {
            AttackKind::Fgsm => AttackParams::Fgsm {
                epsilon: need(self.epsilon, "epsilon")?,
            },
            AttackKind::Fgv => AttackParams::Fgv {
                epsilon: need(self.epsilon, "epsilon")?,
            },
            AttackKind::Deepfool => AttackParams::Deepfool { max_iter: self.max_iter },
            AttackKind::SsfIter => AttackParams::SsfIter {
                step: self
                    .step
                    .ok_or_else(|| Error::InvalidConfig("ssf-iter needs --step".into()))?,
                size: need(self.size, "size")?,
            },
            AttackKind::Va1 => AttackParams::Va1 {
                alpha: need(self.alpha, "alpha")?,
            },
            AttackKind::Va2 => AttackParams::Va2 { u: need(self.u, "u")? },
            AttackKind::InitOnly => AttackParams::InitOnly,
        })
    }
}

fn build_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = &c.data_in {
        cfg.data_in = Some(v.clone());
        cfg.source = Source::Raw;
    }
    if c.synthetic {
        cfg.source = Source::Synthetic;
    }
    if c.raw {
        cfg.source = Source::Raw;
    }
    if let Some(v) = &c.workdir {
        cfg.workdir = v.clone();
    }
    if let Some(v) = &c.out {
        cfg.out = v.clone();
    }
    if let Some(v) = c.count {
        cfg.rows = v;
    }
    if let Some(v) = c.width_scale {
        cfg.width_scale = v;
    }
    if let Some(v) = &c.eps_grid {
        cfg.set("eps_grid", v)?;
    }
    if let Some(v) = c.step_max {
        cfg.step_max = v;
    }
    if let Some(v) = &c.size_grid {
        cfg.set("size_grid", v)?;
    }
    if let Some(v) = c.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = c.temperature {
        cfg.temperature = v;
    }
    for kv in &c.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set {kv:?}: expected KEY=VALUE")))?;
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli.common)?;
    if let Some(jobs) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    }
    let pipeline = Pipeline::new(cfg, cli.common.force)?;
    match cli.command {
        Command::PrepareData => {
            let data = pipeline.prepare_data()?;
            println!("{}", data.dir.display());
        }
        Command::Train | Command::Distill => {
            let (_, models) = match cli.command {
                Command::Train => pipeline.train_all()?,
                _ => pipeline.distill_all()?,
            };
            for m in models {
                println!(
                    "{}\taccuracy {:.4}\trecall {:.4}\tfpr {:.4}\t{}",
                    m.record.name,
                    m.record.metrics.accuracy,
                    m.record.metrics.recall,
                    m.record.metrics.false_positive_rate,
                    m.path.display()
                );
            }
        }
        Command::Attack(args) => {
            let cfg = &pipeline.config;
            let request = AttackRequest {
                family: args.family,
                surrogate: args.surrogate,
                config: AttackConfig {
                    params: args.params()?,
                    sigma: cfg.sigma,
                    seed: cfg.seed,
                },
                n: args.vectors.unwrap_or(cfg.n),
            };
            let (batch, path) = pipeline.attack(&request)?;
            let data = pipeline.prepare_data()?;
            let defender = pipeline.model(&data, args.family, Role::Defender)?;
            println!(
                "{}\t{} vectors\tavg_l1 {:.4}\trecall vs {} {:.4}",
                path.display(),
                batch.len(),
                average_l1(&batch.vectors)?,
                model_name(args.family, Role::Defender),
                measure_recall(&defender.model, &batch.vectors)?
            );
        }
        Command::Evaluate => {
            let eval = pipeline.evaluate()?;
            println!("{} cells, evaluation {}", eval.rows.len(), eval.hash);
        }
        Command::Report | Command::Reproduce => {
            let eval = pipeline.report()?;
            println!("{} cells written to {}", eval.rows.len(), pipeline.config.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
