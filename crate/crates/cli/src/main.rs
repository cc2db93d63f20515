use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use usercl::dataset::{save_bundle, GeneratorConfig};
use usercl::experiment::{
    evaluate_run, generate_named, load_run, render_report, run_experiment, ExperimentConfig, RunOptions,
};
use usercl::Error;

#[derive(Parser)]
#[command(name = "usercl", version, about = "Continual user-representation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset bundle.
    Generate {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        users: usize,
        #[arg(long, default_value_t = 500)]
        vocab: usize,
        #[arg(long, default_value_t = 20)]
        seq_len: usize,
        /// Task preset: ttl-like, three-task or noisy.
        #[arg(long, default_value = "ttl-like")]
        tasks: String,
        #[arg(long, default_value = "dataset.txt")]
        out: PathBuf,
    },
    /// Train a method over the task sequence.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Stop once this many tasks are trained.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Reuse source-task parameters from a run directory or parameter file.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Score every trained task from a checkpoint.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint stage; the latest by default.
        #[arg(long)]
        stage: Option<usize>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Compare finished runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    order: Option<String>,
    #[arg(long)]
    noisy_task: bool,
    #[arg(long)]
    sampling: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other setting, as key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> usercl::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        let quoted = |v: &str| format!("\"{}\"", v.replace('\\', "\\\\").replace('"', "\\\""));
        if let Some(v) = &self.method {
            cfg.apply_override(&format!("method={}", quoted(v)))?;
        }
        if let Some(v) = &self.sampling {
            cfg.apply_override(&format!("sampling={}", quoted(v)))?;
        }
        if let Some(v) = &self.order {
            cfg.order = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.dataset {
            cfg.dataset = Some(v.clone());
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        cfg.noisy_task |= self.noisy_task;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { seed, users, vocab, seq_len, tasks, out } => {
            let defaults = ExperimentConfig::default();
            let gen = GeneratorConfig::preset(&tasks, seed, users, vocab, seq_len)?;
            gen.validate()?;
            let bundle = generate_named(&gen, &tasks, defaults.noise_fraction, defaults.noise_classes)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            save_bundle(&bundle, &out)?;
            println!("wrote {} ({} users, {} tasks)", out.display(), bundle.users.len(), bundle.tasks.len());
        }
        Command::Train { run, stop_after, resume, init_from } => {
            let cfg = run.resolve()?;
            std::fs::create_dir_all(&cfg.out)?;
            std::fs::write(cfg.out.join("config.toml"), cfg.to_toml())?;
            let summary = run_experiment(&cfg, &RunOptions { stop_after, resume, init_from })?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}: {}/{} tasks trained in {}", cfg.method.name(), summary.completed, summary.total, cfg.out.display());
        }
        Command::Evaluate { run, stage, split } => {
            let cfg = run.resolve()?;
            for r in evaluate_run(&cfg, stage, &split)? {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
        Command::Report { runs, out } => {
            let data = runs
                .iter()
                .map(|d| load_run(d).with_context(|| format!("reading run {}", d.display())))
                .collect::<Result<Vec<_>>>()?;
            let report = render_report(&data)?;
            print!("{}", report.text);
            for w in &report.warnings {
                log::warn!("{w}");
            }
            if let Some(path) = out {
                std::fs::write(&path, &report.text).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let config = err.chain().any(|e| e.downcast_ref::<Error>().is_some_and(Error::is_config));
            ExitCode::from(if config { 2 } else { 3 })
        }
    }
}
