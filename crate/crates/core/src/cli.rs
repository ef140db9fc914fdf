//! Command-line front end: `train`, `evaluate`, `report` and `selftest`.
//!
//! Exit codes: 0 success, 1 self-test failure, 2 configuration or usage
//! error, 3 data error (unreadable or inconsistent inputs), 4 training
//! divergence.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use crate::data::{load_csv, stratified_split};
use crate::error::{Error, Result};
use crate::eval::aggregate::{average_ranks, friedman_test, relative_percent_change, BlockTable, Metric};
use crate::eval::report::{emit_report, read_metrics};
use crate::eval::sweep::{attack_sweep, censoring_km, parse_eps_grid, Attack, SweepConfig, SweepCurves, DEFAULT_EPS_GRID};
use crate::output::write_atomic;
use crate::selftest;
use crate::trainer::{train, Checkpoint, Method, TrainConfig};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "ROBUST_SURV_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_SELFTEST: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

const AFTER_HELP: &str = "\
Configuration precedence: built-in defaults < --config file (TOML, key = value) < command-line flags.
Exit codes: 0 ok, 1 self-test failure, 2 configuration error, 3 data error, 4 training divergence.
Outputs default to $ROBUST_SURV_OUT (or ./runs) when --out is not given.";

#[derive(Debug, Parser)]
#[command(name = "robust-surv", version, about = "Certified-robust survival networks", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one method on one dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint under perturbation sweeps.
    Evaluate(EvaluateArgs),
    /// Aggregate metrics.csv files into ranks, percent changes and Friedman tests.
    Report(ReportArgs),
    /// Run the built-in oracle checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// SurvSet-style CSV file.
    #[arg(long)]
    pub dataset: PathBuf,
    /// baseline | noise | fgsm | pgd | sawar
    #[arg(long)]
    pub method: String,
    /// TOML file overriding the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for the split, initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// fgsm | worstcase, or a comma-separated list of both.
    #[arg(long, default_value = "worstcase")]
    pub attack: String,
    /// Comma-separated radii; defaults to 0,0.05,0.1,0.2,...,1.0.
    #[arg(long)]
    pub eps_grid: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip curve emission.
    #[arg(long)]
    pub no_curves: bool,
    /// Worker threads for sweep cells.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory searched recursively for metrics.csv files.
    #[arg(long)]
    pub inputs: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Method that percent changes are measured against.
    #[arg(long, default_value = "baseline")]
    pub reference: String,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Oracle seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Everything needed to reproduce a run, written before any heavy work.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config: Option<TrainConfig>,
    pub datasets: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub tool_version: String,
    pub started_unix: u64,
    pub status: String,
    pub wall_time_secs: Option<f64>,
}

impl RunManifest {
    fn new(command: &str, args: &[String], out_dir: &Path) -> Self {
        Self {
            command: command.into(),
            args: args.to_vec(),
            config_path: None,
            config: None,
            datasets: Vec::new(),
            out_dir: out_dir.to_path_buf(),
            seeds: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            status: "started".into(),
            wall_time_secs: None,
        }
    }

    fn write(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Codec(e.to_string()))?;
        write_atomic(self.out_dir.join("manifest.json"), json.as_bytes())
    }

    fn finish(&mut self, started: Instant) -> Result<()> {
        self.status = "completed".into();
        self.wall_time_secs = Some(started.elapsed().as_secs_f64());
        self.write()
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_DATA,
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let text_args: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, &text_args),
        Command::Evaluate(a) => cmd_evaluate(&a, &text_args),
        Command::Report(a) => cmd_report(&a, &text_args),
        Command::Selftest(a) => return cmd_selftest(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn cmd_train(args: &TrainArgs, raw_args: &[String]) -> Result<()> {
    let started = Instant::now();
    let mut config = match &args.config {
        Some(p) => TrainConfig::load(p).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("cannot read config {}: {source}", path.display())),
            other => other,
        })?,
        None => TrainConfig::default(),
    };
    config.method = args.method.parse::<Method>()?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    let name = dataset_name(&args.dataset);
    let out = args.out.clone().unwrap_or_else(|| {
        out_root()
            .join(&name)
            .join(config.method.as_str())
            .join(format!("seed{}", config.seed))
    });

    let mut manifest = RunManifest::new("train", raw_args, &out);
    manifest.config_path = args.config.clone();
    manifest.config = Some(config.clone());
    manifest.datasets = vec![args.dataset.clone()];
    manifest.seeds = vec![config.seed];
    manifest.write()?;

    let raw = load_csv(&args.dataset)?;
    let split = stratified_split(&raw, config.seed, config.normalize_all)?;
    info!(
        "{name}: {} train / {} validation / {} test rows, {} features",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        split.train.dim()
    );
    let (net, report) = match train(&config, &split) {
        Ok(r) => r,
        Err(Error::Divergence { reason, last_good }) => {
            if let Some(net) = &last_good {
                let ck = Checkpoint {
                    net: (**net).clone(),
                    codec: split.codec.clone(),
                    config: config.clone(),
                };
                ck.save(out.join("last_good.json"))?;
            }
            return Err(Error::Divergence { reason, last_good });
        }
        Err(e) => return Err(e),
    };
    Checkpoint {
        net,
        codec: split.codec.clone(),
        config: config.clone(),
    }
    .save(out.join("model.json"))?;
    report.write_csv(out.join("train_report.csv"))?;
    println!(
        "trained {} on {name}: best epoch {} (validation loss {:.6}), checkpoint {}",
        config.method,
        report.best_epoch,
        report.best_val_loss,
        out.join("model.json").display()
    );
    manifest.finish(started)
}

#[derive(Debug, Serialize)]
struct EvalSummary<'a> {
    dataset: &'a str,
    method: &'a str,
    seed: u64,
    attacks: Vec<&'static str>,
    eps_grid: &'a [f64],
    dropped_nonpositive_time: usize,
    test_rows: usize,
    brier_exclusions: usize,
    ci_flags: usize,
    ibs_flags: usize,
    negll_flags: usize,
    config: &'a TrainConfig,
}

fn parse_attacks(text: &str) -> Result<Vec<Attack>> {
    let attacks = text
        .split(',')
        .map(|s| s.trim().parse::<Attack>())
        .collect::<Result<BTreeSet<_>>>()?;
    Ok(attacks.into_iter().collect())
}

pub fn cmd_evaluate(args: &EvaluateArgs, raw_args: &[String]) -> Result<()> {
    let started = Instant::now();
    let attacks = parse_attacks(&args.attack)?;
    let grid = match &args.eps_grid {
        Some(g) => parse_eps_grid(g)?,
        None => DEFAULT_EPS_GRID.to_vec(),
    };
    if args.jobs == 0 {
        return Err(Error::Config("--jobs must be >= 1".into()));
    }
    let ck = Checkpoint::load(&args.model)?;
    let name = dataset_name(&args.dataset);
    let out = args.out.clone().unwrap_or_else(|| {
        out_root()
            .join(&name)
            .join(ck.config.method.as_str())
            .join(format!("seed{}", ck.config.seed))
            .join("eval")
    });
    let mut manifest = RunManifest::new("evaluate", raw_args, &out);
    manifest.config = Some(ck.config.clone());
    manifest.datasets = vec![args.dataset.clone()];
    manifest.seeds = vec![ck.config.seed];
    manifest.write()?;

    let raw = load_csv(&args.dataset)?;
    let split = stratified_split(&raw, ck.config.seed, ck.config.normalize_all)?;
    if split.codec != ck.codec {
        return Err(Error::Codec(format!(
            "checkpoint {} was not trained on {} (feature encodings differ)",
            args.model.display(),
            args.dataset.display()
        )));
    }
    let km = censoring_km(&split.train)?;
    let sweep_cfg = SweepConfig {
        dataset: name.clone(),
        method: ck.config.method.to_string(),
        seed: ck.config.seed,
        loss_params: ck.config.loss_params(),
        step_rule: ck.config.step_rule(),
        curves: !args.no_curves,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut records = Vec::new();
    let mut curves = SweepCurves::default();
    let mut exclusions = 0;
    for attack in &attacks {
        let outp = pool.install(|| attack_sweep(&ck.net, &split.test, &km, *attack, &grid, &sweep_cfg))?;
        records.extend(outp.records);
        curves.curves.extend(outp.curves.curves);
        if curves.km.is_none() {
            curves.km = outp.curves.km;
        }
        exclusions = exclusions.max(outp.brier_exclusions);
    }
    let summary = EvalSummary {
        dataset: &name,
        method: ck.config.method.as_str(),
        seed: ck.config.seed,
        attacks: attacks.iter().map(Attack::as_str).collect(),
        eps_grid: &grid,
        dropped_nonpositive_time: raw.dropped_nonpositive_time,
        test_rows: split.test.len(),
        brier_exclusions: exclusions,
        ci_flags: records.iter().filter(|r| r.ci_flag).count(),
        ibs_flags: records.iter().filter(|r| r.ibs_flag).count(),
        negll_flags: records.iter().filter(|r| r.negll_flag).count(),
        config: &ck.config,
    };
    emit_report(&records, None, &curves, &summary, &out)?;
    println!("wrote {} metric records to {}", records.len(), out.join("metrics.csv").display());
    manifest.finish(started)
}

fn find_metrics(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            find_metrics(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.csv") {
            found.push(p);
        }
    }
    Ok(())
}

pub fn cmd_report(args: &ReportArgs, raw_args: &[String]) -> Result<()> {
    let started = Instant::now();
    let out = args.out.clone().unwrap_or_else(|| out_root().join("report"));
    let mut manifest = RunManifest::new("report", raw_args, &out);
    manifest.datasets = vec![args.inputs.clone()];
    manifest.write()?;

    let mut files = Vec::new();
    find_metrics(&args.inputs, &mut files)?;
    if files.is_empty() {
        return Err(Error::Input(format!("no metrics.csv files under {}", args.inputs.display())));
    }
    let mut records = Vec::new();
    for f in &files {
        records.extend(read_metrics(f)?);
    }
    if records.is_empty() {
        return Err(Error::Input("metrics files contain no records".into()));
    }
    let ranks = average_ranks(&records)?;
    write_atomic(out.join("ranks.csv"), ranks.to_csv().as_bytes())?;

    let mut pc = String::from("attack,metric,eps,method,percent,flagged\n");
    if ranks.methods.contains(&args.reference) {
        for p in relative_percent_change(&records, &args.reference)? {
            pc.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.attack,
                p.metric.as_str(),
                p.eps,
                p.method,
                p.percent,
                p.flagged
            ));
        }
    } else {
        warn!("reference method {} not among the inputs; percent_change.csv left empty", args.reference);
    }
    write_atomic(out.join("percent_change.csv"), pc.as_bytes())?;

    let table = BlockTable::build(&records)?;
    let attacks: BTreeSet<Attack> = records.iter().map(|r| r.attack).collect();
    let mut fr = String::from("attack,metric,blocks,treatments,statistic,p_value\n");
    for attack in attacks {
        for metric in Metric::ALL {
            let blocks = table.oriented_blocks(attack, metric, None);
            match friedman_test(&blocks) {
                Ok(r) => fr.push_str(&format!(
                    "{attack},{},{},{},{},{}\n",
                    metric.as_str(),
                    r.blocks,
                    r.treatments,
                    r.statistic,
                    r.p_value
                )),
                Err(e) => warn!("Friedman test skipped for {attack}/{}: {e}", metric.as_str()),
            }
        }
    }
    write_atomic(out.join("friedman.csv"), fr.as_bytes())?;
    println!(
        "aggregated {} records from {} files ({} methods) into {}",
        records.len(),
        files.len(),
        ranks.methods.len(),
        out.display()
    );
    manifest.finish(started)
}

pub fn cmd_selftest(args: &SelftestArgs) -> i32 {
    let results = selftest::run_all(args.seed);
    let mut failed = 0;
    for r in &results {
        println!("{} {} ({})", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    println!("{} checks, {failed} failed", results.len());
    if failed == 0 {
        EXIT_OK
    } else {
        EXIT_SELFTEST
    }
}
