use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use disagg_bench::checker::{check_history, CheckOptions};
use disagg_bench::config::{BenchConfig, ConfigError, OutFormat};
use disagg_bench::history_io;
use disagg_bench::runner::run_benchmark;

/// Deterministic simulation of a lock-disaggregated transaction system.
#[derive(Parser, Debug)]
#[command(name = "disagg-bench", version)]
struct Cli {
    /// `key = value` file; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// kvs | smallbank
    #[arg(long)]
    workload: Option<String>,
    /// lotus | mn-lock
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    cns: Option<String>,
    #[arg(long)]
    mns: Option<String>,
    /// Coordinators per compute node.
    #[arg(long)]
    coordinators: Option<String>,
    /// Transaction attempts to run.
    #[arg(long, conflicts_with = "duration")]
    txns: Option<String>,
    /// Simulated run length in ms.
    #[arg(long)]
    duration: Option<String>,
    /// Share of read-write transactions.
    #[arg(long = "rw-ratio")]
    rw_ratio: Option<String>,
    /// Zipf exponent; 0 is uniform.
    #[arg(long)]
    zipf: Option<String>,
    /// sr | si
    #[arg(long)]
    isolation: Option<String>,
    /// Version slots per key.
    #[arg(long)]
    versions: Option<String>,
    /// Version-table cache entries per compute node.
    #[arg(long = "cache-entries")]
    cache_entries: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// cn:<id>@<ms>; repeatable.
    #[arg(long)]
    crash: Vec<String>,
    /// on | off
    #[arg(long)]
    reshard: Option<String>,
    /// Write the binary history to this path.
    #[arg(long)]
    history: Option<String>,
    /// json | csv | table
    #[arg(long)]
    out: Option<String>,
    /// Keys (kvs) or accounts (smallbank).
    #[arg(long)]
    keys: Option<String>,
    /// Concurrent clients; defaults to one per coordinator.
    #[arg(long)]
    clients: Option<String>,
    /// Check an existing history file instead of running.
    #[arg(long = "check-history", value_name = "PATH")]
    check_history: Option<PathBuf>,
    /// Print an existing history file as text instead of running.
    #[arg(long = "dump-history", value_name = "PATH")]
    dump_history: Option<PathBuf>,
}

impl Cli {
    fn config(&self) -> Result<BenchConfig, ConfigError> {
        let mut cfg = BenchConfig::default();
        if let Some(p) = &self.config {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError::new("config", format!("{}: {e}", p.display())))?;
            cfg.apply_file(&text)?;
            // --crash flags replace the file's crash list
            if !self.crash.is_empty() {
                cfg.crashes.clear();
            }
        }
        let flags = [
            ("workload", &self.workload),
            ("mode", &self.mode),
            ("cns", &self.cns),
            ("mns", &self.mns),
            ("coordinators", &self.coordinators),
            ("txns", &self.txns),
            ("duration", &self.duration),
            ("rw-ratio", &self.rw_ratio),
            ("zipf", &self.zipf),
            ("isolation", &self.isolation),
            ("versions", &self.versions),
            ("cache-entries", &self.cache_entries),
            ("seed", &self.seed),
            ("reshard", &self.reshard),
            ("history", &self.history),
            ("out", &self.out),
            ("keys", &self.keys),
            ("clients", &self.clients),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.apply(k, v)?;
            }
        }
        for c in &self.crash {
            cfg.apply("crash", c)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_history(p: &PathBuf) -> Result<history_io::HistoryFile, String> {
    let bytes = std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?;
    history_io::decode(&bytes).map_err(|e| format!("{}: {e}", p.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match cli.config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };

    if let Some(p) = &cli.dump_history {
        return match read_history(p) {
            Ok(h) => {
                print!("{}", history_io::dump_text(&h));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        };
    }
    if let Some(p) = &cli.check_history {
        let h = match read_history(p) {
            Ok(h) => h,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        };
        let opts = CheckOptions {
            isolation: cfg.isolation,
            conservation: cfg.workload == disagg_bench::config::WorkloadKind::SmallBank,
        };
        return match check_history(&h, opts) {
            Ok(v) if v.passed() => {
                println!("pass: {} committed transactions", v.committed);
                ExitCode::SUCCESS
            }
            Ok(v) => {
                for x in &v.violations {
                    println!("violation: {x:?}");
                }
                ExitCode::from(1)
            }
            Err(e) => {
                eprintln!("malformed history: {e}");
                ExitCode::from(2)
            }
        };
    }

    let out = match run_benchmark(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match cfg.out {
        OutFormat::Json => print!("{}", out.metrics.to_json_lines()),
        OutFormat::Csv => print!("{}", out.metrics.to_csv()),
        OutFormat::Table => print!("{}", out.metrics.to_table()),
    }
    if out.passed() {
        ExitCode::SUCCESS
    } else {
        for x in &out.verdict.violations {
            eprintln!("violation: {x:?}");
        }
        ExitCode::from(1)
    }
}
