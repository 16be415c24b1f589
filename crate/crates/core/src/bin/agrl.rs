use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agrl_core::config;
use agrl_core::experiment::ExperimentConfig;
use agrl_core::harness::{self, SweepParam, LAMBDA_GRID, TAU_GRID};
use agrl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "agrl", version, about = "Rule-gated GRPO experiments on a synthetic relevance world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key = value config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds every component (world, training, sampling).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Override a config key, e.g. --set grpo.kl_beta=0.02 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic world as JSONL.
    GenData(Common),
    /// Screen, difficulty-filter and balance a dataset.
    SampleData(Common),
    /// Train one variant and evaluate the final policy.
    Train(Common),
    /// Evaluate a checkpoint produced under the same config.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train once per replay threshold.
    SweepTau {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = TAU_GRID)]
        values: Vec<f64>,
    },
    /// Train once per soft-gate value.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = LAMBDA_GRID)]
        values: Vec<f64>,
    },
    /// Summary table and curve files over finished runs or sweeps.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => config::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.variant {
            config::apply(&mut cfg, "variant", v)?;
        }
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(n) = self.steps {
            cfg.grpo.max_steps = n;
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::config(kv.as_str(), "--set expects KEY=VALUE"))?;
            config::apply(&mut cfg, k.trim(), v.trim())?;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.display().to_string();
        }
        cfg.validate()?;
        let out = PathBuf::from(&cfg.output_dir);
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let (cfg, out) = c.resolve()?;
            let n = harness::gen_data(&cfg, &out)?;
            println!("wrote {n} instances to {}", out.join("data.jsonl").display());
        }
        Command::SampleData(c) => {
            let (cfg, out) = c.resolve()?;
            let report = harness::sample_data(&cfg, &out)?;
            for st in &report.stages {
                println!("{:<12} {:>7} -> {:>7}", st.stage, st.count_in, st.count_out);
            }
            println!("{} quarantined; output in {}", report.quarantine.len(), out.display());
        }
        Command::Train(c) => {
            let (cfg, out) = c.resolve()?;
            let o = harness::train(&cfg, &out)?;
            let m = &o.eval.metrics;
            println!(
                "{} seed {}: macro_f1 {:.4} good_f1 {:.4} accuracy {:.4} rar {:.4} kept {:.3} -> {}",
                cfg.variant.as_str(),
                cfg.seed,
                m.macro_f1,
                m.good_f1,
                m.accuracy,
                m.rar,
                o.eval.summary.mean_kept_ratio,
                out.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, out) = common.resolve()?;
            let e = harness::eval(&cfg, &checkpoint, &out)?;
            println!("{}", serde_json::to_string_pretty(&e.metrics)?);
        }
        Command::SweepTau { common, values } => sweep(common, SweepParam::Tau, &values)?,
        Command::SweepLambda { common, values } => sweep(common, SweepParam::Lambda, &values)?,
        Command::Report { runs, out } => print!("{}", harness::report(&runs, &out)?),
    }
    Ok(())
}

fn sweep(common: Common, param: SweepParam, values: &[f64]) -> Result<()> {
    let (cfg, out) = common.resolve()?;
    harness::sweep(&cfg, param, values, &out)?;
    print!("{}", std::fs::read_to_string(out.join("sweep.txt")).unwrap_or_default());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
