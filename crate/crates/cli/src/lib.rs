//! Command-line front end for the loop simulator.
//!
//! Exit codes: 0 clean, 1 metric mismatch, 2 key underrun, 3 unrecovered
//! attack, 64 usage or missing config, 65 unparseable or invalid config,
//! 66 unreadable fixture, 74 output error.

pub mod output;
pub mod verify;

use std::ffi::OsString;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, ValueEnum};
use qkdncs::adversary::DetectionRecord;
use qkdncs::keysource::KeyGrade;
use qkdncs::config::{parse_loop_config, parse_sweep, ConfigError};
use qkdncs::loopsim::{run, LoopConfig, LoopError, PathKeyStats, RunReport};
use qkdncs::metrics::{round_complexity_table, strength_table_expanded, tradeoff_table};
use rayon::prelude::*;
use thiserror::Error;

pub use output::{fmt_float, Format, Table};

pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_CONFIG: i32 = 65;
pub const EXIT_FIXTURE: i32 = 66;
pub const EXIT_IO: i32 = 74;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Verb {
    Run,
    Sweep,
    MetricsTable,
    MetricsVerify,
    Keystats,
}

impl Verb {
    fn needs_config(self) -> bool {
        matches!(self, Self::Run | Self::Sweep | Self::Keystats)
    }
}

#[derive(Debug, Parser)]
#[command(name = "qkdncs", version, about = "Simulate a networked control loop keyed by QKD one-time pads")]
struct Args {
    /// What to do.
    #[arg(value_enum)]
    verb: Verb,
    /// Scenario file (required by run, sweep and keystats).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario's rng_seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads for sweeps; defaults to the available cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Command {
    pub verb: Verb,
    pub config_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed_override: Option<u64>,
    pub format: Format,
    pub jobs: Option<usize>,
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Help or version text; not a failure.
    #[error("{0}")]
    Info(String),
    #[error("{0}")]
    Usage(String),
    #[error("config file {0} not found")]
    MissingConfig(PathBuf),
    #[error("{}: {source}", path.display())]
    Config { path: PathBuf, source: ConfigError },
    #[error("{}: {source}", path.display())]
    Loop { path: PathBuf, source: LoopError },
    #[error("fixture: {0}")]
    Fixture(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Info(_) => 0,
            Self::Usage(_) | Self::MissingConfig(_) => EXIT_USAGE,
            Self::Config { .. } => EXIT_CONFIG,
            Self::Loop { source, .. } => source.exit_code(),
            Self::Fixture(_) => EXIT_FIXTURE,
            Self::Io { .. } => EXIT_IO,
        }
    }
}

/// Parses `argv` including the program name.
pub fn parse_args<I, T>(argv: I) -> Result<Command, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = Args::try_parse_from(argv).map_err(|e| match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => CliError::Info(e.to_string()),
        _ => CliError::Usage(e.to_string()),
    })?;
    if args.verb.needs_config() && args.config.is_none() {
        return Err(CliError::Usage(format!(
            "`{}` needs --config <FILE>\n\nFor more information, try '--help'.",
            args.verb.to_possible_value().expect("named verb").get_name()
        )));
    }
    if args.jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    Ok(Command {
        verb: args.verb,
        config_path: args.config,
        output_dir: args.out,
        seed_override: args.seed,
        format: args.format,
        jobs: args.jobs,
    })
}

fn read_config(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| match source.kind() {
        io::ErrorKind::NotFound => CliError::MissingConfig(path.to_path_buf()),
        _ => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
    })
}

impl Command {
    fn load_config(&self) -> Result<LoopConfig, CliError> {
        let Some(path) = &self.config_path else {
            return Ok(self.with_seed(LoopConfig::default()));
        };
        let cfg = parse_loop_config(&read_config(path)?).map_err(|source| CliError::Config {
            path: path.clone(),
            source,
        })?;
        Ok(self.with_seed(cfg))
    }

    fn with_seed(&self, mut cfg: LoopConfig) -> LoopConfig {
        if let Some(seed) = self.seed_override {
            cfg.rng_seed = seed;
        }
        cfg
    }

    fn config_label(&self) -> PathBuf {
        self.config_path.clone().unwrap_or_else(|| PathBuf::from("<defaults>"))
    }

    fn validate(&self, cfg: &LoopConfig) -> Result<(), CliError> {
        cfg.validate().map_err(|source| CliError::Loop {
            path: self.config_label(),
            source,
        })
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn bool_cell(b: bool) -> String {
    if b { "true" } else { "false" }.into()
}

pub fn trace_table(report: &RunReport) -> Table {
    let mut t = Table::new(&[
        "period",
        "t",
        "r",
        "y_true",
        "y_received",
        "y_used",
        "u_sent",
        "u_applied",
        "frame_valid",
        "verdict",
        "tau_roundtrip",
    ]);
    for row in &report.trace {
        t.push(vec![
            row.period.to_string(),
            fmt_float(row.t),
            fmt_float(row.r),
            fmt_float(row.y_true),
            fmt_float(row.y_received),
            fmt_float(row.y_used),
            fmt_float(row.u_sent),
            fmt_float(row.u_applied),
            bool_cell(row.frame_valid),
            row.verdict.to_string(),
            fmt_float(row.tau_roundtrip),
        ]);
    }
    t
}

pub fn report_table(cfg: &LoopConfig, report: &RunReport) -> Table {
    let mut t = Table::new(&[
        "cipher",
        "key_grade",
        "seed",
        "periods",
        "P",
        "S",
        "keys_consumed",
        "keys_reused_r",
        "model_delay",
        "mean_tau",
        "alarms",
        "unrecovered_attack",
    ]);
    let alarms = report
        .detection_u
        .iter()
        .chain(&report.detection_y)
        .filter(|r| r.verdict != Default::default())
        .count();
    t.push(vec![
        cfg.cipher.to_string(),
        cfg.key_grade.to_string(),
        cfg.rng_seed.to_string(),
        report.trace.len().to_string(),
        fmt_float(report.p_score),
        fmt_float(report.s_score),
        report.keys_consumed.to_string(),
        fmt_float(report.keys_reused_r),
        fmt_float(report.model_delay),
        fmt_float(report.mean_tau),
        alarms.to_string(),
        bool_cell(report.unrecovered_attack),
    ]);
    t
}

pub fn detection_table(report: &RunReport) -> Table {
    let mut t = Table::new(&[
        "path",
        "period",
        "frame_valid",
        "seq_observed",
        "ciphertext_digest",
        "verdict",
        "stale_key_invalid",
    ]);
    let mut rows: Vec<(&str, &DetectionRecord)> = report.detection_u.iter().map(|r| ("u", r)).collect();
    rows.extend(report.detection_y.iter().map(|r| ("y", r)));
    rows.sort_by_key(|(path, r)| (r.period, *path));
    for (path, r) in rows {
        t.push(vec![
            path.into(),
            r.period.to_string(),
            bool_cell(r.frame_valid),
            r.seq_observed.map(|s| s.to_string()).unwrap_or_default(),
            format!("{:016x}", r.ciphertext_digest),
            r.verdict.to_string(),
            bool_cell(r.stale_key_invalid),
        ]);
    }
    t
}

pub fn pool_table(report: &RunReport) -> Table {
    let mut t = Table::new(&["path", "key_id", "grade", "use_count", "hamming_gap"]);
    for (path, id, grade, uses, gap) in &report.pool_rows {
        t.push(vec![
            path.to_string(),
            id.to_string(),
            grade.to_string(),
            uses.to_string(),
            gap.to_string(),
        ]);
    }
    t
}

pub fn keystats_table(cfg: &LoopConfig, report: &RunReport) -> Table {
    let mut t = Table::new(&[
        "path",
        "grade",
        "final_keys_generated",
        "raw_keys_generated",
        "keys_used",
        "key_uses",
        "max_use_count",
        "sifted_bits",
        "reconcile_failures",
        "qber_aborts",
        "generated_bps",
        "consumed_bps",
    ]);
    let seconds = report.trace.len() as f64 * cfg.plant.ts;
    let key_len = cfg.cipher.key_len as f64;
    let per_second = |x: f64| if seconds > 0.0 { x / seconds } else { 0.0 };
    for (path, s) in [("u", &report.key_stats_u), ("y", &report.key_stats_y)] {
        let PathKeyStats {
            final_keys_generated,
            raw_keys_generated,
            keys_used,
            key_uses,
            max_use_count,
            sifted_bits,
            reconcile_failures,
            qber_aborts,
        } = s;
        let generated = match cfg.key_grade {
            KeyGrade::Final => *final_keys_generated,
            KeyGrade::Raw => *raw_keys_generated,
        };
        t.push(vec![
            path.into(),
            cfg.key_grade.to_string(),
            final_keys_generated.to_string(),
            raw_keys_generated.to_string(),
            keys_used.to_string(),
            key_uses.to_string(),
            max_use_count.to_string(),
            sifted_bits.to_string(),
            reconcile_failures.to_string(),
            qber_aborts.to_string(),
            fmt_float(per_second(generated as f64 * key_len)),
            fmt_float(per_second(*key_uses as f64 * key_len)),
        ]);
    }
    t
}

/// Runs one scenario and writes its files into `dir`.
fn run_into(cfg: &LoopConfig, dir: &Path, format: Format, label: &Path) -> Result<RunReport, CliError> {
    let report = run(cfg).map_err(|source| CliError::Loop {
        path: label.to_path_buf(),
        source,
    })?;
    create_dir(dir)?;
    trace_table(&report).save(dir, "trace", format)?;
    report_table(cfg, &report).save(dir, "report", format)?;
    detection_table(&report).save(dir, "detection", format)?;
    pool_table(&report).save(dir, "pool", format)?;
    Ok(report)
}

fn cmd_run(cmd: &Command) -> Result<i32, CliError> {
    let cfg = cmd.load_config()?;
    cmd.validate(&cfg)?;
    let report = run_into(&cfg, &cmd.output_dir, cmd.format, &cmd.config_label())?;
    Ok(report.exit_code())
}

fn cmd_sweep(cmd: &Command) -> Result<i32, CliError> {
    let path = cmd.config_path.clone().expect("checked by parse_args");
    let scenarios = parse_sweep(&read_config(&path)?).map_err(|source| CliError::Config {
        path: path.clone(),
        source,
    })?;
    let scenarios: Vec<(String, LoopConfig)> = scenarios
        .into_iter()
        .map(|(name, cfg)| (name, cmd.with_seed(cfg)))
        .collect();
    for (name, cfg) in &scenarios {
        cfg.validate().map_err(|source| CliError::Loop {
            path: PathBuf::from(format!("{}[{name}]", path.display())),
            source,
        })?;
    }
    create_dir(&cmd.output_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cmd.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", cmd.jobs.unwrap_or(0))))?;
    let results: Vec<Result<RunReport, CliError>> = pool.install(|| {
        scenarios
            .par_iter()
            .map(|(name, cfg)| {
                let label = PathBuf::from(format!("{}[{name}]", path.display()));
                run_into(cfg, &cmd.output_dir.join(name), cmd.format, &label)
            })
            .collect()
    });

    let mut summary = Table::new(&["scenario", "cipher", "exit_code", "P", "S", "keys_reused_r", "mean_tau", "error"]);
    let mut code = 0;
    for ((name, cfg), result) in scenarios.iter().zip(results) {
        let (scenario_code, cells) = match result {
            Ok(r) => (
                r.exit_code(),
                [fmt_float(r.p_score), fmt_float(r.s_score), fmt_float(r.keys_reused_r), fmt_float(r.mean_tau), String::new()],
            ),
            Err(e @ CliError::Loop { .. }) => {
                eprintln!("{e}");
                (e.exit_code(), [String::new(), String::new(), String::new(), String::new(), e.to_string()])
            }
            Err(e) => return Err(e),
        };
        if code == 0 {
            code = scenario_code;
        }
        let mut row = vec![name.clone(), cfg.cipher.to_string(), scenario_code.to_string()];
        row.extend(cells);
        summary.push(row);
    }
    summary.save(&cmd.output_dir, "sweep", cmd.format)?;
    Ok(code)
}

fn cmd_metrics_table(cmd: &Command) -> Result<i32, CliError> {
    let cfg = cmd.load_config()?;
    cmd.validate(&cfg)?;
    create_dir(&cmd.output_dir)?;

    let mut t1 = Table::new(&["algorithm", "eta", "rounds", "log2_key_len", "s_a"]);
    for r in strength_table_expanded(16) {
        t1.push(vec![
            r.algorithm,
            fmt_float(r.eta),
            r.rounds.map(|n| n.to_string()).unwrap_or_default(),
            fmt_float(r.log2_key_len),
            fmt_float(r.s_a),
        ]);
    }
    t1.save(&cmd.output_dir, "table1", cmd.format)?;

    let mut t2 = Table::new(&["quantity", "xor", "feistel", "spn"]);
    for (name, x, f, s) in round_complexity_table() {
        t2.push(vec![name, fmt_float(x), fmt_float(f), fmt_float(s)]);
    }
    t2.save(&cmd.output_dir, "table2", cmd.format)?;

    // Security at r = 1; performance from one run per cipher on the scenario.
    let rows = tradeoff_table(cfg.epsilon, 1.0, &cfg.delay).map_err(|e| CliError::Loop {
        path: cmd.config_label(),
        source: e.into(),
    })?;
    let scores: Vec<Option<f64>> = rows
        .par_iter()
        .map(|row| {
            let scenario = LoopConfig {
                cipher: row.cipher.clone(),
                ..cfg.clone()
            };
            run(&scenario).ok().map(|r| r.p_score)
        })
        .collect();
    let mut t3 = Table::new(&["algorithm", "s_a", "s", "delay", "p"]);
    for (row, p) in rows.iter().zip(scores) {
        t3.push(vec![
            verify::table_name(&row.cipher),
            fmt_float(row.s_a),
            fmt_float(row.s),
            fmt_float(row.model_delay),
            p.map(fmt_float).unwrap_or_default(),
        ]);
    }
    t3.save(&cmd.output_dir, "table3", cmd.format)?;
    Ok(0)
}

fn cmd_metrics_verify(cmd: &Command) -> Result<i32, CliError> {
    let (table, failures) = verify::verify_tables()?;
    let stdout = io::stdout();
    table.write_to(stdout.lock(), cmd.format).map_err(|source| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    })?;
    if failures > 0 {
        eprintln!("{failures} of {} checks failed", table.rows.len());
        Ok(EXIT_MISMATCH)
    } else {
        Ok(0)
    }
}

fn cmd_keystats(cmd: &Command) -> Result<i32, CliError> {
    let cfg = cmd.load_config()?;
    cmd.validate(&cfg)?;
    let report = run(&cfg).map_err(|source| CliError::Loop {
        path: cmd.config_label(),
        source,
    })?;
    create_dir(&cmd.output_dir)?;
    keystats_table(&cfg, &report).save(&cmd.output_dir, "keystats", cmd.format)?;
    pool_table(&report).save(&cmd.output_dir, "pool", cmd.format)?;
    Ok(report.exit_code())
}

/// Executes `cmd`, returning the process exit code for completed work.
pub fn execute(cmd: &Command) -> Result<i32, CliError> {
    match cmd.verb {
        Verb::Run => cmd_run(cmd),
        Verb::Sweep => cmd_sweep(cmd),
        Verb::MetricsTable => cmd_metrics_table(cmd),
        Verb::MetricsVerify => cmd_metrics_verify(cmd),
        Verb::Keystats => cmd_keystats(cmd),
    }
}

/// Parses and executes, printing diagnostics to stderr.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let result = parse_args(argv).and_then(|cmd| execute(&cmd));
    match result {
        Ok(code) => code,
        Err(CliError::Info(text)) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("qkdncs: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Command, CliError> {
        parse_args(std::iter::once("qkdncs").chain(args.iter().copied()))
    }

    #[test]
    fn run_with_config_and_out() {
        let cmd = parse(&["run", "--config", "s.cfg", "--out", "out/"]).unwrap();
        assert_eq!(cmd.verb, Verb::Run);
        assert_eq!(cmd.config_path, Some(PathBuf::from("s.cfg")));
        assert_eq!(cmd.output_dir, PathBuf::from("out/"));
        assert_eq!(cmd.format, Format::Csv);
    }

    #[test]
    fn no_arguments_is_usage() {
        let err = parse(&[]).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
        assert!(err.to_string().contains("Usage"));
    }

    #[test]
    fn unknown_flag_rejected() {
        assert_eq!(parse(&["run", "--config", "a", "--bogus"]).unwrap_err().exit_code(), EXIT_USAGE);
    }

    #[test]
    fn run_needs_config_but_metrics_do_not() {
        assert_eq!(parse(&["run"]).unwrap_err().exit_code(), EXIT_USAGE);
        assert!(parse(&["metrics-table"]).is_ok());
        assert!(parse(&["metrics-verify", "--format", "tsv"]).is_ok());
    }

    #[test]
    fn seed_overrides_config() {
        let cmd = parse(&["run", "--config", "x", "--seed", "7"]).unwrap();
        let cfg = cmd.with_seed(LoopConfig {
            rng_seed: 3,
            ..LoopConfig::default()
        });
        assert_eq!(cfg.rng_seed, 7);
    }

    #[test]
    fn help_is_not_an_error() {
        assert_eq!(parse(&["--help"]).unwrap_err().exit_code(), 0);
    }

    #[test]
    fn zero_jobs_rejected() {
        assert_eq!(parse(&["sweep", "--config", "x", "--jobs", "0"]).unwrap_err().exit_code(), EXIT_USAGE);
    }
}
