use std::io::{self, Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Parser, Subcommand};
use gwpasan_cli::inject::{self, InjectOptions};
use gwpasan_cli::options::{HarnessConfig, HarnessError, EXIT_CONFIG, EXIT_FAILURE, EXIT_OK};
use gwpasan_cli::{bench, parse, stats, stress};

/// Fault-injection and measurement harness for the gwpasan allocator.
///
/// Exit status: 0 success or bug detected as expected, 1 failure, 2 injected
/// bug not detected, 3 configuration error.
#[derive(Parser)]
#[command(name = "gwpasan", version)]
struct Cli {
    #[command(flatten)]
    config: HarnessConfig,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Commit one memory error against a guarded allocation.
    Inject(InjectOptions),
    #[command(hide = true)]
    InjectChild(InjectOptions),
    /// Measure the sampling rate and inter-sample gaps.
    SampleStats,
    /// Compare malloc/free throughput with and without the tool.
    Bench {
        #[arg(long, default_value_t = bench::DEFAULT_TRIALS)]
        trials: usize,
    },
    /// Parse reports from a file (or stdin) and print their fields.
    ParseReport {
        /// Input file; `-` or absent reads stdin.
        path: Option<PathBuf>,
    },
    /// Hammer one allocator from several threads and verify block contents.
    Stress {
        #[arg(long, default_value_t = stress::DEFAULT_THREADS)]
        threads: usize,
    },
}

fn print(text: &str) {
    let mut out = io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    let _ = out.flush();
}

fn run(cli: Cli) -> Result<i32, HarnessError> {
    let config = &cli.config;
    match cli.command {
        Cmd::Inject(o) => {
            let exe = std::env::current_exe()
                .map_err(|e| HarnessError::Failed(format!("cannot locate own executable: {e}")))?;
            let result = inject::run(&exe, config, &o)?;
            print(&result.render(config.format));
            Ok(result.exit_code())
        }
        Cmd::InjectChild(o) => {
            inject::run_child(config, &o)?;
            Ok(EXIT_OK)
        }
        Cmd::SampleStats => {
            let s = stats::run(config)?;
            print(&s.render(config.format));
            Ok(EXIT_OK)
        }
        Cmd::Bench { trials } => {
            let b = bench::run(config, trials)?;
            print(&b.render(config.format));
            Ok(EXIT_OK)
        }
        Cmd::ParseReport { path } => {
            let mut text = String::new();
            let read = match path.as_deref() {
                None => io::stdin().read_to_string(&mut text).map(drop),
                Some(p) if p.as_os_str() == "-" => io::stdin().read_to_string(&mut text).map(drop),
                Some(p) => std::fs::read_to_string(p).map(|t| text = t),
            };
            read.map_err(|e| HarnessError::Failed(format!("cannot read input: {e}")))?;
            let reports = parse::parse_all(&text).map_err(|e| HarnessError::Failed(format!("parse error: {e}")))?;
            print(&parse::render(&reports, config.format));
            Ok(EXIT_OK)
        }
        Cmd::Stress { threads } => {
            let r = stress::run(config, threads)?;
            print(&r.render(config.format));
            Ok(if r.clean() { EXIT_OK } else { EXIT_FAILURE })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_CONFIG as u8),
            };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("gwpasan: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
