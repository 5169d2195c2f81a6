//! The `retrace` command line: train, eval, ablate, transfer, rollout and
//! truncdump. Every subcommand writes a resolved `config.toml`, a
//! `manifest.toml` and its CSV outputs into one output directory.
//!
//! Exit codes: 0 success, 2 config or input error, 3 numeric abort, 4 I/O.

mod config;

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{apply_override, AblationConfig, RunConfig, RunSection};

use crate::error::{Error, Result};
use crate::numcore::seeded;
use crate::trainer::{
    checkpoint, evaluate, export_latents, rollout_error_eval, run_episode, transfer_eval, ActMode,
    Trainer, METRICS_HEADER,
};
use crate::truncation::{adaptive_trace, TruncationMode};

/// Environment variable naming the default output root.
pub const OUT_ROOT_VAR: &str = "RETRACE_OUT_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "retrace", version, about = "Retracing world-model experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Default)]
pub struct Common {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `trainer.total_steps=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a world model and agent; writes metrics.csv and checkpoint.bin.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Greedy evaluation of a checkpoint; writes eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the lambda x truncation x variant x seed matrix; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Zero-shot transfer over the configured change sets; writes transfer.csv.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint for the one-sided Welch comparison.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Open-loop prediction error per horizon; writes rollout.csv and latents.csv.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Dump Q, sliding average, relative change and mask for a Q-value CSV.
    Truncdump {
        #[command(flatten)]
        common: Common,
        /// CSV with a `q` column and an optional `episode` column.
        #[arg(long)]
        input: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Transfer { .. } => "transfer",
            Command::Rollout { .. } => "rollout",
            Command::Truncdump { .. } => "truncdump",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Train { common }
            | Command::Eval { common, .. }
            | Command::Ablate { common }
            | Command::Transfer { common, .. }
            | Command::Rollout { common, .. }
            | Command::Truncdump { common, .. } => common,
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric { .. } => EXIT_NUMERIC,
        Error::Io(_) | Error::Csv(_) => EXIT_IO,
        Error::Config { .. } | Error::Contract(_) | Error::NotReady(_) => EXIT_CONFIG,
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli.command) {
        Ok(out) => {
            println!("wrote {}", out.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Execute one subcommand and return its output directory.
pub fn run(cmd: &Command) -> Result<PathBuf> {
    let common = cmd.common();
    let (base, primary) = match cmd {
        Command::Eval { checkpoint, .. }
        | Command::Transfer { checkpoint, .. }
        | Command::Rollout { checkpoint, .. } => {
            let t = checkpoint::load(checkpoint)?;
            (Some(RunConfig::from_experiment(&t.exp)), Some(t))
        }
        _ => (None, None),
    };
    let mut cfg = RunConfig::resolve(common.config.as_deref(), base, &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = output_dir(&cfg, common);
    prepare(&out, common.force)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    std::fs::write(out.join("manifest.toml"), manifest(cmd, &cfg)?)?;
    match cmd {
        Command::Train { .. } => cmd_train(&cfg, &out)?,
        Command::Eval { .. } => cmd_eval(&cfg, &mut primary.expect("loaded"), &out)?,
        Command::Ablate { .. } => cmd_ablate(&cfg, &out)?,
        Command::Transfer { compare, .. } => cmd_transfer(&cfg, &mut primary.expect("loaded"), compare.as_deref(), &out)?,
        Command::Rollout { .. } => cmd_rollout(&cfg, &mut primary.expect("loaded"), &out)?,
        Command::Truncdump { input, .. } => cmd_truncdump(&cfg, input, &out)?,
    }
    Ok(out)
}

fn output_dir(cfg: &RunConfig, common: &Common) -> PathBuf {
    if let Some(o) = &common.out {
        return o.clone();
    }
    if !cfg.run.out_dir.is_empty() {
        return PathBuf::from(&cfg.run.out_dir);
    }
    let root = std::env::var_os(OUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(&cfg.run.name)
}

fn prepare(out: &Path, force: bool) -> Result<()> {
    let used = ["config.toml", "manifest.toml"].iter().any(|f| out.join(f).exists());
    if used && !force {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("{} already holds a run; pass --force to overwrite", out.display()),
        )));
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    version: &'a str,
    mask_reading: crate::truncation::MaskReading,
    truncation_mode: TruncationMode,
    retrace_variant: crate::losses::RetraceVariant,
    inputs: Vec<String>,
}

fn manifest(cmd: &Command, cfg: &RunConfig) -> Result<String> {
    let mut inputs = Vec::new();
    match cmd {
        Command::Eval { checkpoint, .. } | Command::Rollout { checkpoint, .. } => {
            inputs.push(checkpoint.display().to_string())
        }
        Command::Transfer { checkpoint, compare, .. } => {
            inputs.push(checkpoint.display().to_string());
            inputs.extend(compare.iter().map(|c| c.display().to_string()));
        }
        Command::Truncdump { input, .. } => inputs.push(input.display().to_string()),
        _ => {}
    }
    if let Some(c) = &cmd.common().config {
        inputs.push(c.display().to_string());
    }
    let m = Manifest {
        command: cmd.name(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        mask_reading: cfg.truncation.reading,
        truncation_mode: cfg.truncation.mode,
        retrace_variant: cfg.losses.retrace_variant,
        inputs,
    };
    toml::to_string(&m).map_err(|e| Error::config(e.to_string()))
}

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<File>> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    Ok(w)
}

/// Train one experiment, streaming rows to `emit`. A numeric abort writes
/// `diagnostic.toml` into `out`.
fn train_into(
    cfg: &RunConfig,
    out: &Path,
    checkpoint_name: Option<&str>,
    emit: &mut dyn FnMut(&[String]) -> Result<()>,
) -> Result<Trainer> {
    let mut trainer = Trainer::new(cfg.experiment())?;
    let result = trainer.run(&mut |row, t| {
        emit(&row.record())?;
        if row.eval.is_some() {
            if let Some(name) = checkpoint_name {
                checkpoint::save(t, &out.join(name))?;
            }
        }
        Ok(())
    });
    if let Err(e @ Error::Numeric { .. }) = result {
        let path = out.join("diagnostic.toml");
        let mut f = File::create(&path)?;
        writeln!(f, "error = {:?}", e.to_string())?;
        writeln!(f, "step = {}", trainer.global_step)?;
        if let Some(r) = trainer.last_report {
            let l = r.loss;
            writeln!(f, "total = {:?}\nelbo = {:?}\nkl = {:?}\nrecon = {:?}\nretrace = {:?}\nmasked_fraction = {:?}",
                l.total, l.elbo_term, l.kl_term, l.recon_term, l.retrace_term, l.masked_fraction)?;
        }
        return Err(Error::numeric("train", format!("{e}; diagnostics in {}", path.display())));
    }
    result?;
    Ok(trainer)
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut w = csv_writer(&out.join("metrics.csv"), &METRICS_HEADER)?;
    let trainer = train_into(cfg, out, Some("checkpoint.bin"), &mut |rec| {
        w.write_record(rec)?;
        w.flush()?;
        Ok(())
    })?;
    checkpoint::save(&trainer, &out.join("checkpoint.bin"))
}

fn cmd_eval(cfg: &RunConfig, t: &mut Trainer, out: &Path) -> Result<()> {
    check_dims(cfg, t)?;
    let r = evaluate(&cfg.env, &t.model, &t.policy, cfg.trainer.eval_episodes, cfg.seed)?;
    let mut w = csv_writer(&out.join("eval.csv"), &["episode", "return"])?;
    for (i, v) in r.returns.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    w.flush()?;
    println!("mean {} sd {}", r.mean, r.sd);
    Ok(())
}

fn check_dims(cfg: &RunConfig, t: &Trainer) -> Result<()> {
    if cfg.env.obs_dim() != t.model.obs_dim || cfg.env.action_dim() != t.model.action_dim {
        return Err(Error::config("env dimensions do not match the checkpoint"));
    }
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let a = &cfg.ablation;
    let seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds.clone() };
    let mut header = vec!["lambda", "mode", "variant", "seed"];
    header.extend(METRICS_HEADER);
    let mut w = csv_writer(&out.join("ablation.csv"), &header)?;
    for &lambda in &a.lambdas {
        for &mode in &a.modes {
            for &variant in &a.variants {
                for &seed in &seeds {
                    let mut cell = cfg.clone();
                    cell.seed = seed;
                    cell.losses.lambda = lambda;
                    cell.losses.retrace_variant = variant;
                    cell.truncation.mode = mode;
                    if mode.fixed() {
                        cell.truncation.fixed_proportion = a.fixed_proportion;
                    }
                    let prefix = [lambda.to_string(), label(&mode), label(&variant), seed.to_string()];
                    train_into(&cell, out, None, &mut |rec| {
                        w.write_record(prefix.iter().chain(rec))?;
                        Ok(())
                    })?;
                    w.flush()?;
                }
            }
        }
    }
    Ok(())
}

/// Snake-case name of a config enum as it appears in TOML.
fn label<T: Serialize>(v: &T) -> String {
    toml::Value::try_from(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn cmd_transfer(cfg: &RunConfig, t: &mut Trainer, compare: Option<&Path>, out: &Path) -> Result<()> {
    check_dims(cfg, t)?;
    let other = compare.map(checkpoint::load).transpose()?;
    if let Some(o) = &other {
        check_dims(cfg, o)?;
    }
    let rows = transfer_eval(
        &t.model,
        &t.policy,
        &cfg.env,
        &cfg.eval.change_sets,
        cfg.eval.transfer_seeds,
        cfg.seed,
        other.as_ref().map(|o| (&o.model, &o.policy)),
    )?;
    let mut w = csv_writer(&out.join("transfer.csv"), &["change_set", "mean", "sd", "p_value"])?;
    for r in rows {
        w.write_record([r.change_set, r.mean.to_string(), r.sd.to_string(), r.p_value.map_or(String::new(), |p| p.to_string())])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_rollout(cfg: &RunConfig, t: &mut Trainer, out: &Path) -> Result<()> {
    check_dims(cfg, t)?;
    let e = &cfg.eval;
    let mse = rollout_error_eval(&t.model, &t.policy, &cfg.env, e.rollout_context, e.rollout_horizon, e.rollout_episodes, cfg.seed)?;
    let mut w = csv_writer(&out.join("rollout.csv"), &["horizon", "mse"])?;
    for (k, m) in mse.iter().enumerate() {
        w.write_record([(k + 1).to_string(), m.to_string()])?;
    }
    w.flush()?;

    let mut env = crate::envs::Env::new(cfg.env.clone())?;
    let mut rng = seeded(cfg.seed);
    let episode = run_episode(&mut env, &t.model, &t.policy, ActMode::Greedy, cfg.seed, &mut rng)?;
    let stoch = t.model.config.stoch;
    let mut header = vec!["step".to_string()];
    header.extend((0..stoch).map(|i| format!("posterior_{i}")));
    header.extend((0..stoch).map(|i| format!("retraced_{i}")));
    let mut w = csv::Writer::from_path(out.join("latents.csv"))?;
    w.write_record(&header)?;
    if episode.len() >= 2 {
        for row in export_latents(&t.model, &episode, cfg.seed)? {
            let mut rec = vec![row.step.to_string()];
            rec.extend(row.posterior.iter().chain(&row.retraced).map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Q sequences from a CSV with a `q` column, grouped by an optional
/// `episode` column (consecutive rows with equal labels).
pub fn read_q_sequences(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let q_col = headers
        .iter()
        .position(|h| h.trim() == "q")
        .ok_or_else(|| Error::config(format!("{} has no `q` column", path.display())))?;
    let ep_col = headers.iter().position(|h| h.trim() == "episode");
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = rec.get(q_col).unwrap_or("").trim();
        let q: f64 = field.parse().map_err(|_| Error::Config {
            line: Some(i + 2),
            msg: format!("`{field}` is not a number"),
        })?;
        let ep = ep_col.and_then(|c| rec.get(c)).unwrap_or("0").trim().to_string();
        match out.last_mut() {
            Some((label, seq)) if *label == ep => seq.push(q),
            _ => out.push((ep, vec![q])),
        }
    }
    Ok(out)
}

fn cmd_truncdump(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let seqs = read_q_sequences(input)?;
    let mut w = csv_writer(&out.join("truncdump.csv"), &["episode", "step", "q", "qbar", "delta", "mask"])?;
    let cell = |v: &[f64], i: usize| v.get(i).map_or(String::new(), f64::to_string);
    for (ep, q) in seqs {
        let trace = adaptive_trace(&q, &cfg.truncation)?;
        for (i, (qi, m)) in q.iter().zip(&trace.mask).enumerate() {
            w.write_record([
                ep.clone(),
                i.to_string(),
                qi.to_string(),
                cell(&trace.qbar, i),
                cell(&trace.delta, i),
                m.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
