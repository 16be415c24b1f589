//! Run directories and the bodies of the `agrl` subcommands.
//!
//! Every subcommand writes into its own output directory: the exact config
//! that produced it (`config.txt`), its artifacts, and a `manifest.json`
//! listing them. A `.lock` file guards the directory while a command runs and
//! an `INCOMPLETE` marker stays behind if it fails part way.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config;
use crate::error::{Error, Result};
use crate::experiment::{run_on, ExperimentConfig, RunResult};
use crate::metrics::{evaluate, summarize_trace, to_jsonl, trace_csv, EvalReport, MetricsRow, TraceRow, TraceSummary, FINAL_WINDOW};
use crate::pipeline::{class_histogram, ingest, run_funnel, synthetic_records, write_records, SamplingReport};
use crate::policy::Checkpoint;
use crate::rng::mix;
use crate::world::{generate, probe_policy, write_jsonl, Instance};

pub const MANIFEST: &str = "manifest.json";
pub const INCOMPLETE: &str = "INCOMPLETE";
pub const LOCK: &str = ".lock";

pub const TAU_GRID: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
pub const LAMBDA_GRID: [f64; 5] = [0.0, 0.2, 0.5, 0.8, 1.0];

/// SHA-256 of the canonical config text. The output directory is left out so
/// that the same experiment hashes alike wherever it is written.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir.clear();
    let digest = Sha256::digest(config::to_text(&c).as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub checkpoint_format: u32,
    pub config_hash: String,
    pub seed: u64,
    pub variant: String,
    pub files: Vec<String>,
    pub complete: bool,
}

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// An output directory held for the duration of one command.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let lock = path.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(Error::Locked(path)),
            Err(e) => return Err(Error::io(lock, e)),
        }
        let dir = RunDir { path, files: Vec::new() };
        let manifest = dir.path.join(MANIFEST);
        if manifest.exists() {
            fs::remove_file(&manifest).map_err(|e| Error::io(&manifest, e))?;
        }
        let marker = dir.path.join(INCOMPLETE);
        fs::write(&marker, b"").map_err(|e| Error::io(marker, e))?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let target = self.path.join(name);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&target, contents).map_err(|e| Error::io(&target, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes the manifest and clears the incomplete marker.
    pub fn finish(mut self, command: &str, cfg: &ExperimentConfig) -> Result<Manifest> {
        self.files.sort();
        self.files.dedup();
        let manifest = Manifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: crate::policy::CHECKPOINT_VERSION,
            config_hash: config_hash(cfg),
            seed: cfg.seed,
            variant: cfg.variant.as_str().to_string(),
            files: std::mem::take(&mut self.files),
            complete: true,
        };
        let path = self.path.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
        let marker = self.path.join(INCOMPLETE);
        fs::remove_file(&marker).map_err(|e| Error::io(marker, e))?;
        Ok(manifest)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK));
    }
}

/// The training instances: the ingested data file when one is configured,
/// the generated world otherwise.
pub fn training_set(cfg: &ExperimentConfig) -> Result<Vec<Instance>> {
    match &cfg.data_path {
        Some(path) => {
            let (records, _) = ingest(path, &cfg.table()?)?;
            records.iter().enumerate().map(|(i, r)| r.to_instance(i)).collect()
        }
        None => generate(&cfg.world),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub config_hash: String,
    pub checkpoint_step: Option<usize>,
    pub report: EvalReport,
    pub metrics: MetricsRow,
    pub summary: TraceSummary,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub result: RunResult,
    pub eval: EvalOutput,
    pub manifest: Manifest,
}

fn checkpoint(cfg_hash: &str, step: usize, params: &crate::policy::PolicyParams) -> Checkpoint {
    Checkpoint {
        config_hash: Some(cfg_hash.to_string()),
        step: Some(step),
        ..params.to_checkpoint()
    }
}

pub fn train(cfg: &ExperimentConfig, out: impl Into<PathBuf>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut dir = RunDir::open(out)?;
    let hash = config_hash(cfg);
    dir.write("config.txt", config::to_text(cfg))?;
    let data = training_set(cfg)?;
    let every = cfg.checkpoint_every;
    let result = run_on(cfg, &data, |step, params| {
        if every > 0 && step % every == 0 {
            dir.write(&format!("checkpoints/step_{step:06}.json"), checkpoint(&hash, step, params).to_json()?)?;
        }
        Ok(())
    })?;
    let trace = &result.state.trace;
    dir.write("trace.jsonl", to_jsonl(trace)?)?;
    dir.write("trace.csv", trace_csv(trace))?;
    dir.write("replay.jsonl", to_jsonl(&result.state.replay_log)?)?;
    dir.write("groups.jsonl", to_jsonl(&result.state.group_log)?)?;
    dir.write("checkpoint.json", checkpoint(&hash, trace.len(), &result.state.params).to_json()?)?;
    let summary = summarize_trace(trace, FINAL_WINDOW);
    let eval = EvalOutput {
        config_hash: hash,
        checkpoint_step: Some(trace.len()),
        metrics: MetricsRow::from_run(&result.eval, &summary),
        report: result.eval.clone(),
        summary,
    };
    dir.write("eval.json", serde_json::to_string_pretty(&eval)? + "\n")?;
    let manifest = dir.finish("train", cfg)?;
    Ok(TrainOutcome { result, eval, manifest })
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Evaluates a checkpoint on the config's held-out set. The checkpoint must
/// carry the hash of this exact config. Training dynamics are filled in from
/// a `trace.jsonl` next to the checkpoint when there is one.
pub fn eval(cfg: &ExperimentConfig, checkpoint_path: &Path, out: impl Into<PathBuf>) -> Result<EvalOutput> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint_path)?;
    let hash = config_hash(cfg);
    match &ck.config_hash {
        Some(h) if *h == hash => {}
        Some(h) => return Err(Error::Checkpoint(format!("written under config {h}, evaluating under {hash}"))),
        None => return Err(Error::Checkpoint("no config hash recorded".into())),
    }
    let mut dir = RunDir::open(out)?;
    dir.write("config.txt", config::to_text(cfg))?;
    let report = evaluate(&ck.params, &cfg.eval_set()?, &cfg.table()?)?;
    let trace_path = checkpoint_path.parent().map(|p| p.join("trace.jsonl"));
    let summary = match trace_path {
        Some(p) if p.exists() => {
            let trace = read_trace(&p)?;
            let upto = ck.step.unwrap_or(trace.len()).min(trace.len());
            summarize_trace(&trace[..upto], FINAL_WINDOW)
        }
        _ => TraceSummary::default(),
    };
    let mut metrics = MetricsRow::from_run(&report, &summary);
    if let Some(step) = ck.step {
        metrics.step = step;
    }
    let output = EvalOutput {
        config_hash: hash,
        checkpoint_step: ck.step,
        report,
        metrics,
        summary,
    };
    dir.write("eval.json", serde_json::to_string_pretty(&output)? + "\n")?;
    dir.finish("eval", cfg)?;
    Ok(output)
}

pub fn gen_data(cfg: &ExperimentConfig, out: impl Into<PathBuf>) -> Result<usize> {
    cfg.validate()?;
    let mut dir = RunDir::open(out)?;
    dir.write("config.txt", config::to_text(cfg))?;
    let data = generate(&cfg.world)?;
    write_jsonl(dir.path().join("data.jsonl"), &data)?;
    dir.files.push("data.jsonl".into());
    dir.finish("gen-data", cfg)?;
    Ok(data.len())
}

/// Runs the data funnel over the configured data file, or over the generated
/// world with annotation noise when there is none.
pub fn sample_data(cfg: &ExperimentConfig, out: impl Into<PathBuf>) -> Result<SamplingReport> {
    cfg.validate()?;
    let mut dir = RunDir::open(out)?;
    dir.write("config.txt", config::to_text(cfg))?;
    let table = cfg.table()?;
    let (records, mut report) = match &cfg.data_path {
        Some(path) => ingest(path, &table)?,
        None => (synthetic_records(&generate(&cfg.world)?, &cfg.sampling), SamplingReport::default()),
    };
    let probe = probe_policy(cfg.sampling.probe_scale);
    let (kept, funnel) = run_funnel(records, &table, &probe, &cfg.sampling)?;
    report.extend(funnel);
    write_records(dir.path().join("sampled.jsonl"), &kept)?;
    dir.files.push("sampled.jsonl".into());
    dir.write("sampling_report.json", report.to_json()?)?;
    dir.write("funnel.txt", funnel_table(&report, class_histogram(&kept)))?;
    dir.finish("sample-data", cfg)?;
    Ok(report)
}

fn funnel_table(report: &SamplingReport, final_hist: [usize; 4]) -> String {
    let mut s = format!("{:<12} {:>8} {:>8} {:>8}\n", "stage", "in", "out", "dropped");
    for st in &report.stages {
        let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>8}", st.stage, st.count_in, st.count_out, st.count_in - st.count_out);
    }
    let total: usize = final_hist.iter().sum();
    let _ = write!(s, "final shares:");
    for (t, n) in crate::rules::Tier::ALL.iter().zip(final_hist) {
        let share = if total == 0 { 0.0 } else { n as f64 / total as f64 };
        let _ = write!(s, " {}={share:.4}", t.name());
    }
    s.push('\n');
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Tau,
    Lambda,
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Tau => "grpo.replay_tau",
            SweepParam::Lambda => "reward.gating_lambda",
        }
    }

    fn short(self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::Lambda => "lambda",
        }
    }

    fn command(self) -> &'static str {
        match self {
            SweepParam::Tau => "sweep-tau",
            SweepParam::Lambda => "sweep-lambda",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub run_dir: String,
    pub metrics: MetricsRow,
    pub summary: TraceSummary,
}

/// The config of one sweep point. Data and evaluation stay on the root seed;
/// the training stream is derived from the root seed and the swept value.
pub fn sweep_point(cfg: &ExperimentConfig, param: SweepParam, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    config::apply(&mut c, param.key(), &value.to_string())?;
    c.grpo.seed = mix(&[cfg.seed, value.to_bits()]);
    Ok(c)
}

pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64], out: impl Into<PathBuf>) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::config(param.key(), "sweep needs at least one value"));
    }
    match param {
        SweepParam::Tau if !cfg.variant.uses_replay() => {
            return Err(Error::config("variant", format!("{} never replays; sweeping tau has no effect", cfg.variant.as_str())));
        }
        SweepParam::Lambda if cfg.reward_config().variant != crate::reward::RewardVariant::Agrl => {
            return Err(Error::config("reward.variant", "only the gated reward has a soft gate"));
        }
        _ => {}
    }
    let points = values
        .iter()
        .map(|&v| sweep_point(cfg, param, v).map(|c| (v, c)))
        .collect::<Result<Vec<_>>>()?;
    for (_, c) in &points {
        c.validate()?;
    }
    let mut dir = RunDir::open(out)?;
    dir.write("config.txt", config::to_text(cfg))?;
    let mut rows = Vec::with_capacity(points.len());
    for (v, c) in points {
        let name = format!("{}_{v}", param.short());
        let outcome = train(&c, dir.path().join(&name))?;
        rows.push(SweepRow {
            value: v,
            run_dir: name,
            metrics: outcome.eval.metrics,
            summary: outcome.eval.summary,
        });
    }
    dir.write("sweep.csv", sweep_csv(param, &rows))?;
    dir.write("sweep.txt", sweep_table(param, &rows))?;
    dir.write("sweep.jsonl", to_jsonl(&rows)?)?;
    dir.finish(param.command(), cfg)?;
    Ok(rows)
}

const SWEEP_COLUMNS: [&str; 8] = ["macro_f1", "good_f1", "accuracy", "rar", "mean_kept_ratio", "cum_reward_delta", "final_entropy", "run_dir"];

fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut s = format!("{},{}\n", param.short(), SWEEP_COLUMNS.join(","));
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.value, m.macro_f1, m.good_f1, m.accuracy, m.rar, r.summary.mean_kept_ratio, r.summary.cumulative_reward_delta, r.summary.final_entropy, r.run_dir
        );
    }
    s
}

fn sweep_table(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:>8} {:>9} {:>8} {:>9} {:>7} {:>6} {:>9} {:>8}\n",
        param.short(), "macro_f1", "good_f1", "accuracy", "rar", "kept", "cum_delta", "entropy"
    );
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{:>8} {:>9.4} {:>8.4} {:>9.4} {:>7.4} {:>6.3} {:>9.2} {:>8.3}",
            r.value, m.macro_f1, m.good_f1, m.accuracy, m.rar, r.summary.mean_kept_ratio, r.summary.cumulative_reward_delta, r.summary.final_entropy
        );
    }
    s
}

/// Curve columns written by `report`, one file each.
pub const CURVES: [&str; 9] = [
    "kept_ratio",
    "reward_delta",
    "cum_reward_delta",
    "entropy",
    "mean_reward_unguided",
    "mean_reward_replayed",
    "rar",
    "kl",
    "loss",
];

fn curve_value(row: &TraceRow, name: &str) -> f64 {
    match name {
        "kept_ratio" => row.kept_ratio,
        "reward_delta" => row.reward_delta,
        "entropy" => row.entropy,
        "mean_reward_unguided" => row.mean_reward_unguided,
        "mean_reward_replayed" => row.mean_reward_replayed,
        "rar" => row.rar,
        "kl" => row.kl,
        "loss" => row.loss,
        _ => unreachable!("unknown curve {name}"),
    }
}

/// Summary table and per-metric curve files over finished training runs.
/// A sweep directory expands to its runs.
pub fn report(runs: &[PathBuf], out: impl Into<PathBuf>) -> Result<String> {
    let mut dirs = Vec::new();
    for run in runs {
        let m = Manifest::load(run)?;
        if !m.complete || run.join(INCOMPLETE).exists() {
            return Err(Error::Incomplete(run.clone()));
        }
        if m.command == "train" {
            dirs.push(run.clone());
        } else if m.command.starts_with("sweep-") {
            let mut children: Vec<PathBuf> = fs::read_dir(run)
                .map_err(|e| Error::io(run, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join(MANIFEST).exists())
                .collect();
            children.sort();
            dirs.extend(children);
        } else {
            return Err(Error::config("report", format!("{} holds `{}` output, not a training run", run.display(), m.command)));
        }
    }
    if dirs.is_empty() {
        return Err(Error::EmptyInput("no runs to report"));
    }
    let mut labels = Vec::new();
    let mut traces = Vec::new();
    let mut table = format!(
        "{:<28} {:<12} {:>5} {:>6} {:>9} {:>8} {:>9} {:>8} {:>9} {:>7}\n",
        "run", "variant", "steps", "kept", "cum_delta", "entropy", "macro_f1", "good_f1", "accuracy", "rar"
    );
    for d in &dirs {
        let label = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| d.display().to_string());
        let manifest = Manifest::load(d)?;
        let trace = read_trace(d.join("trace.jsonl"))?;
        let eval_path = d.join("eval.json");
        let eval_text = fs::read_to_string(&eval_path).map_err(|e| Error::io(&eval_path, e))?;
        let ev: EvalOutput = serde_json::from_str(&eval_text)?;
        let s = &ev.summary;
        let m = &ev.metrics;
        let _ = writeln!(
            table,
            "{:<28} {:<12} {:>5} {:>6.3} {:>9.2} {:>8.3} {:>9.4} {:>8.4} {:>9.4} {:>7.4}",
            label, manifest.variant, s.steps, s.mean_kept_ratio, s.cumulative_reward_delta, s.final_entropy, m.macro_f1, m.good_f1, m.accuracy, m.rar
        );
        labels.push(label);
        traces.push(trace);
    }
    let cfg = ExperimentConfig::default();
    let mut dir = RunDir::open(out)?;
    dir.write("report.txt", &table)?;
    let steps = traces.iter().map(Vec::len).max().unwrap_or(0);
    for name in CURVES {
        let mut s = format!("step,{}\n", labels.join(","));
        let mut cum = vec![0.0; traces.len()];
        for i in 0..steps {
            let _ = write!(s, "{}", i + 1);
            for (k, t) in traces.iter().enumerate() {
                match t.get(i) {
                    Some(row) if name == "cum_reward_delta" => {
                        cum[k] += row.reward_delta;
                        let _ = write!(s, ",{}", cum[k]);
                    }
                    Some(row) => {
                        let _ = write!(s, ",{}", curve_value(row, name));
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        dir.write(&format!("curves/{name}.csv"), s)?;
    }
    dir.finish("report", &cfg)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::Variant;

    fn tiny(variant: Variant) -> ExperimentConfig {
        let mut c = ExperimentConfig::for_variant(variant).with_seed(3);
        c.world.n_instances = 64;
        c.grpo.max_steps = 4;
        c.grpo.batch_size = 8;
        c.eval_instances = 50;
        c
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = tiny(Variant::Agrl);
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.grpo.max_steps += 1;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn lock_blocks_second_writer() {
        let tmp = tempfile::tempdir().unwrap();
        let first = RunDir::open(tmp.path().join("r")).unwrap();
        assert!(matches!(RunDir::open(tmp.path().join("r")), Err(Error::Locked(_))));
        drop(first);
        assert!(tmp.path().join("r").join(INCOMPLETE).exists());
        RunDir::open(tmp.path().join("r")).unwrap();
    }

    #[test]
    fn train_then_eval() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Variant::OutcomeGrpo);
        cfg.checkpoint_every = 2;
        let run = tmp.path().join("run");
        let out = train(&cfg, &run).unwrap();
        assert!(out.manifest.complete);
        assert!(!run.join(INCOMPLETE).exists() && !run.join(LOCK).exists());
        for f in ["config.txt", "trace.jsonl", "trace.csv", "replay.jsonl", "groups.jsonl", "checkpoint.json", "eval.json", "checkpoints/step_000002.json", "checkpoints/step_000004.json"] {
            assert!(out.manifest.files.contains(&f.to_string()), "{f}");
            assert!(run.join(f).exists(), "{f}");
        }
        assert_eq!(config::load(run.join("config.txt")).unwrap(), cfg);
        let ev = eval(&cfg, &run.join("checkpoint.json"), tmp.path().join("ev")).unwrap();
        assert_eq!(ev.report, out.eval.report);
        assert_eq!(ev.metrics, out.eval.metrics);
        assert!(ev.metrics.in_bounds());

        let mut other = cfg.clone();
        other.grpo.learning_rate = 0.3;
        let err = eval(&other, &run.join("checkpoint.json"), tmp.path().join("ev2")).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn sweep_points_share_data_but_not_streams() {
        let cfg = tiny(Variant::Agrl);
        let a = sweep_point(&cfg, SweepParam::Tau, 0.1).unwrap();
        let b = sweep_point(&cfg, SweepParam::Tau, 0.2).unwrap();
        assert_eq!(a.world, b.world);
        assert_eq!(a.eval_world(), b.eval_world());
        assert_ne!(a.grpo.seed, b.grpo.seed);
        assert_eq!(b.grpo.replay_tau, 0.2);
        assert_eq!(sweep_point(&cfg, SweepParam::Lambda, 0.5).unwrap().reward.gating_lambda, 0.5);
    }

    #[test]
    fn sweeps_reject_inert_parameters() {
        let tmp = tempfile::tempdir().unwrap();
        let err = sweep(&tiny(Variant::GrpoRrs), SweepParam::Tau, &TAU_GRID, tmp.path().join("s")).unwrap_err();
        assert!(err.is_config());
        let err = sweep(&tiny(Variant::OutcomeGrpo), SweepParam::Lambda, &LAMBDA_GRID, tmp.path().join("s")).unwrap_err();
        assert!(err.is_config());
    }
}
