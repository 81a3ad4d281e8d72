//! `normsphere verify | train | attack | report`
//!
//! Exit codes: 0 success, 1 a verification suite failed (or an internal
//! error), 2 bad input (unknown suite, missing files, invalid config),
//! 3 training diverged.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use normsphere::normalizers::Method;
use normsphere::robustness::{read_report_csv, robustness_report, write_report_csv, AttackConfig, ReportRow};
use normsphere::trainer::{load_model, read_summary, train, DatasetSpec, TrainConfig, SUMMARY_JSON};
use normsphere::verify::{render_table, run_suites, Probes, SUITES};
use normsphere::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const VERIFY_JSON: &str = "verify.json";
pub const ROBUSTNESS_CSV: &str = "robustness.csv";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Parser)]
#[command(name = "normsphere", version, about = "Normalization-as-standardization checks, training runs and attacks")]
pub struct Cli {
    /// Seed for data, initialization, batching and attacks [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory receiving every output [default: runs]
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    /// JSON file whose keys mirror the flag names; flags win over the file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the invariant suites and print a PASS/FAIL table
    Verify {
        /// Suite to run (repeatable); all suites when omitted
        #[arg(long = "suite")]
        suites: Vec<String>,
    },
    /// Train one model and write metrics.csv, summary.json and the model
    Train(TrainArgs),
    /// Evaluate a trained run under Gaussian noise and BIM
    Attack(AttackArgs),
    /// Aggregate run directories into one row per (method, weight decay)
    Report {
        /// Glob patterns matching run directories
        #[arg(required = true)]
        patterns: Vec<String>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// bn, ln, gn (or gn:<groups>), in, wn, cwn, ws, sn or none [default: bn]
    #[arg(long)]
    pub method: Option<String>,
    /// Weight decay lambda [default: 0]
    #[arg(long)]
    pub wd: Option<f64>,
    /// Learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 40]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many SGD steps
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// eps added to the variance inside data-based normalizers [default: 1e-5]
    #[arg(long)]
    pub eps_norm: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Run directory written by `train`
    pub run: PathBuf,
    /// l-infinity budget in standardized-feature units [default: 0.1]
    #[arg(long)]
    pub eps: Option<f64>,
    /// BIM iterations [default: 10]
    #[arg(long)]
    pub steps: Option<usize>,
    /// BIM step size [default: eps / 5]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Gaussian noise standard deviation [default: eps]
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Noise draws averaged for the Gaussian accuracy [default: 100]
    #[arg(long)]
    pub noise_draws: Option<usize>,
}

/// Contents of `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub suite: Option<Vec<String>>,
    pub method: Option<String>,
    pub wd: Option<f64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub eps_norm: Option<f64>,
    pub momentum: Option<f64>,
    pub hidden: Option<Vec<usize>>,
    pub activation: Option<String>,
    pub init_scale: Option<f64>,
    pub dataset: Option<DatasetSpec>,
    pub eps: Option<f64>,
    pub steps: Option<usize>,
    pub alpha: Option<f64>,
    pub noise_std: Option<f64>,
    pub noise_draws: Option<usize>,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Io(_) | Error::Parse { .. } | Error::Dimension(_) => EXIT_INPUT,
            Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
            _ => EXIT_FAILED,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self { code: EXIT_FAILED, message: e.to_string() }
    }
}

/// Parses `args` (program name first) and runs the subcommand, writing
/// human-readable output to `out` and diagnostics to `err`.
pub fn run<I, T>(args: I, probes: &Probes, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    match dispatch(&cli, probes, out) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: &Cli, probes: &Probes, out: &mut dyn Write) -> Result<i32, Failure> {
    let file = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let out_dir = cli.out_dir.clone().or_else(|| file.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"));
    match &cli.command {
        Command::Verify { suites } => {
            let suites = if suites.is_empty() { file.suite.clone().unwrap_or_default() } else { suites.clone() };
            cmd_verify(&suites, seed, &out_dir, probes, out)
        }
        Command::Train(args) => cmd_train(&train_config(args, &file, seed)?, &out_dir, out),
        Command::Attack(args) => cmd_attack(args, &file, seed, &out_dir, out),
        Command::Report { patterns } => cmd_report(patterns, &out_dir, out),
    }
}

fn cmd_verify(suites: &[String], seed: u64, out_dir: &Path, probes: &Probes, out: &mut dyn Write) -> Result<i32, Failure> {
    let names: Vec<&str> = if suites.is_empty() { SUITES.to_vec() } else { suites.iter().map(String::as_str).collect() };
    let reports = run_suites(&names, seed, probes)?;
    write!(out, "{}", render_table(&reports))?;
    std::fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(&reports).map_err(|e| Failure { code: EXIT_FAILED, message: e.to_string() })?;
    std::fs::write(out_dir.join(VERIFY_JSON), json + "\n")?;
    let failed: Vec<String> = reports
        .iter()
        .flat_map(|r| r.failed_checks().map(move |c| format!("{}: {}", r.suite, c.name)))
        .collect();
    if failed.is_empty() {
        writeln!(out, "all {} suites passed", reports.len())?;
        Ok(EXIT_OK)
    } else {
        writeln!(out, "FAILED: {}", failed.join("; "))?;
        Ok(EXIT_FAILED)
    }
}

fn train_config(args: &TrainArgs, file: &FileConfig, seed: u64) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
    if let Some(m) = args.method.as_ref().or(file.method.as_ref()) {
        cfg.method = m.parse::<Method>()?;
    }
    if let Some(a) = &file.activation {
        cfg.activation = a.parse()?;
    }
    let pick = |flag: Option<f64>, key: Option<f64>| flag.or(key);
    if let Some(v) = pick(args.wd, file.wd) {
        cfg.weight_decay = v;
    }
    if let Some(v) = pick(args.lr, file.lr) {
        cfg.learning_rate = v;
    }
    if let Some(v) = pick(args.eps_norm, file.eps_norm) {
        cfg.eps_norm = v;
    }
    if let Some(v) = args.batch_size.or(file.batch_size) {
        cfg.batch_size = v;
    }
    if let Some(v) = args.epochs.or(file.epochs) {
        cfg.epochs = v;
    }
    cfg.max_steps = args.max_steps.or(file.max_steps);
    if let Some(v) = file.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = &file.hidden {
        cfg.hidden = v.clone();
    }
    if let Some(v) = file.init_scale {
        cfg.init_scale = v;
    }
    if let Some(v) = &file.dataset {
        cfg.dataset = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(cfg: &TrainConfig, out_dir: &Path, out: &mut dyn Write) -> Result<i32, Failure> {
    let output = train(cfg)?;
    let dir = output.save(&out_dir.join(cfg.run_name()))?;
    let s = &output.record.summary;
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    writeln!(
        out,
        "{}: {} steps, loss {:.4}, train acc {}, test acc {}, ||W|| {:.4}",
        dir.display(),
        s.steps,
        s.final_loss,
        fmt(s.train_acc),
        fmt(s.test_acc),
        s.weight_norm
    )?;
    if let Some(f) = &s.failure {
        writeln!(out, "diverged at step {}: {}", f.step, f.message)?;
        return Ok(EXIT_DIVERGED);
    }
    Ok(EXIT_OK)
}

fn cmd_attack(args: &AttackArgs, file: &FileConfig, seed: u64, out_dir: &Path, out: &mut dyn Write) -> Result<i32, Failure> {
    let run = &args.run;
    let summary_path = run.join(SUMMARY_JSON);
    if !summary_path.is_file() {
        return Err(Failure::input(format!("{} is not a run directory (no {SUMMARY_JSON})", run.display())));
    }
    let model = load_model(run).map_err(|e| Failure::input(format!("cannot load model from {}: {e}", run.display())))?;
    let summary = read_summary(&summary_path)?;
    let (_, test) = summary.config.datasets()?;

    let eps = args.eps.or(file.eps).unwrap_or(AttackConfig::default().epsilon);
    let mut cfg = AttackConfig::with_epsilon(eps);
    cfg.seed = seed;
    if let Some(v) = args.steps.or(file.steps) {
        cfg.steps = v;
    }
    if let Some(v) = args.alpha.or(file.alpha) {
        cfg.alpha = v;
    }
    if let Some(v) = args.noise_std.or(file.noise_std) {
        cfg.noise_std = v;
    }
    if let Some(v) = args.noise_draws.or(file.noise_draws) {
        cfg.noise_draws = v;
    }
    let report = robustness_report(&model, &test.x, &test.labels, &cfg)?;
    let row = ReportRow::new(summary.config.method.short_name(), summary.config.weight_decay, seed, &report);

    let path = run.join(ROBUSTNESS_CSV);
    let mut rows = if path.is_file() { read_report_csv(&path)? } else { Vec::new() };
    rows.push(row.clone());
    write_report_csv(&path, &rows)?;
    // The out-dir copy holds only the latest evaluation of this run.
    if out_dir != run.as_path() {
        let name = run.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned());
        std::fs::create_dir_all(out_dir)?;
        write_report_csv(&out_dir.join(format!("{name}_{ROBUSTNESS_CSV}")), std::slice::from_ref(&row))?;
    }
    writeln!(
        out,
        "clean {:.4}  gauss {:.4}  bim {:.4}  accdiff1 {:.4}  accdiff2 {:.4}  (eps {}, steps {}, alpha {}){}",
        row.clean,
        row.gauss,
        row.bim,
        row.accdiff1,
        row.accdiff2,
        row.eps,
        row.steps,
        row.alpha,
        if report.bim_degenerate { "  [zero input gradient]" } else { "" }
    )?;
    Ok(EXIT_OK)
}

/// Mean over the runs sharing one (method, weight decay) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub method: String,
    pub wd: f64,
    pub runs: usize,
    pub clean: f64,
    pub gauss: Option<f64>,
    pub accdiff1: Option<f64>,
    pub bim: Option<f64>,
    pub accdiff2: Option<f64>,
    pub weight_norm: f64,
}

impl ReportEntry {
    fn label(&self) -> String {
        let m = self.method.to_uppercase();
        if self.wd > 0.0 {
            format!("{m}+WD({})", self.wd)
        } else {
            m
        }
    }
}

struct Accum {
    runs: usize,
    clean: f64,
    attacked: usize,
    gauss: f64,
    bim: f64,
    weight_norm: f64,
}

fn cmd_report(patterns: &[String], out_dir: &Path, out: &mut dyn Write) -> Result<i32, Failure> {
    let mut dirs = Vec::new();
    for p in patterns {
        let paths = glob::glob(p).map_err(|e| Failure::input(format!("bad pattern {p:?}: {e}")))?;
        dirs.extend(paths.filter_map(|r| r.ok()).filter(|d| d.join(SUMMARY_JSON).is_file()));
    }
    dirs.sort();
    dirs.dedup();
    if dirs.is_empty() {
        return Err(Failure::input(format!("no run directories matched {}", patterns.join(" "))));
    }
    let mut groups: BTreeMap<(String, u64), Accum> = BTreeMap::new();
    for dir in &dirs {
        let s = read_summary(&dir.join(SUMMARY_JSON))?;
        let key = (s.config.method.short_name().to_string(), s.config.weight_decay.to_bits());
        let latest = match dir.join(ROBUSTNESS_CSV) {
            p if p.is_file() => read_report_csv(&p)?.pop(),
            _ => None,
        };
        let a = groups.entry(key).or_insert(Accum { runs: 0, clean: 0.0, attacked: 0, gauss: 0.0, bim: 0.0, weight_norm: 0.0 });
        a.runs += 1;
        a.weight_norm += s.weight_norm;
        match latest {
            Some(r) => {
                a.clean += r.clean;
                a.attacked += 1;
                a.gauss += r.gauss;
                a.bim += r.bim;
            }
            None => a.clean += s.test_acc.unwrap_or(f64::NAN),
        }
    }
    let entries: Vec<ReportEntry> = groups
        .into_iter()
        .map(|((method, wd), a)| {
            let n = a.runs as f64;
            let clean = a.clean / n;
            let attacked = a.attacked == a.runs;
            let gauss = attacked.then(|| a.gauss / n);
            let bim = attacked.then(|| a.bim / n);
            ReportEntry {
                method,
                wd: f64::from_bits(wd),
                runs: a.runs,
                clean,
                gauss,
                accdiff1: gauss.map(|g| clean - g),
                bim,
                accdiff2: bim.map(|b| clean - b),
                weight_norm: a.weight_norm / n,
            }
        })
        .collect();

    write!(out, "{}", render_report(&entries))?;
    std::fs::create_dir_all(out_dir)?;
    write_report_entries(&out_dir.join(REPORT_CSV), &entries)?;
    Ok(EXIT_OK)
}

/// Methods as columns, metrics as rows.
pub fn render_report(entries: &[ReportEntry]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    let mut lines = vec![std::iter::once(format!("{:<16}", "Model")).chain(entries.iter().map(|e| format!("{:>14}", e.label()))).collect::<String>()];
    let rows: [(&str, Box<dyn Fn(&ReportEntry) -> String>); 7] = [
        ("Clean", Box::new(|e| cell(Some(e.clean)))),
        ("Gaussian Noise", Box::new(|e| cell(e.gauss))),
        ("Acc-Diff1", Box::new(|e| cell(e.accdiff1))),
        ("BIM-linf", Box::new(|e| cell(e.bim))),
        ("Acc-Diff2", Box::new(|e| cell(e.accdiff2))),
        ("||W||", Box::new(|e| cell(Some(e.weight_norm)))),
        ("Runs", Box::new(|e| e.runs.to_string())),
    ];
    for (name, f) in rows.iter() {
        lines.push(std::iter::once(format!("{name:<16}")).chain(entries.iter().map(|e| format!("{:>14}", f(e)))).collect());
    }
    lines.join("\n") + "\n"
}

fn write_report_entries(path: &Path, entries: &[ReportEntry]) -> Result<(), Failure> {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:?}"));
    let mut text = String::from("method,wd,runs,clean,gauss,accdiff1,bim,accdiff2,weight_norm\n");
    for e in entries {
        text += &format!(
            "{},{:?},{},{:?},{},{},{},{},{:?}\n",
            e.method,
            e.wd,
            e.runs,
            e.clean,
            opt(e.gauss),
            opt(e.accdiff1),
            opt(e.bim),
            opt(e.accdiff2),
            e.weight_norm
        );
    }
    std::fs::write(path, text)?;
    Ok(())
}
