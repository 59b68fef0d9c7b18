use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;
use pob_cli::config::ScenarioConfig;
use pob_cli::exit;
use pob_cli::live::{self, LiveConfig, LiveError};
use pob_cli::report::{self, RunReport};
use pob_cli::simulate::{simulate, RunOverrides};

/// Proof-of-backhaul simulator and measurement harness.
///
/// Log verbosity comes from the POB_LOG environment variable
/// (e.g. POB_LOG=info).
#[derive(Parser)]
#[command(name = "pob", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenario files in the simulator and write a JSON report.
    Simulate {
        /// Scenario file; repeat to produce a bundle.
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-challenger CSV export.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Event trace of the first repetition of the first scenario.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<u32>,
    },
    /// Run one role of a live measurement over UDP.
    Measure {
        #[arg(long, value_enum)]
        role: Role,
        #[arg(long)]
        config: PathBuf,
        /// Challenger index.
        #[arg(long, default_value_t = 0)]
        id: u32,
        /// Local address, overriding the config.
        #[arg(long)]
        listen: Option<SocketAddr>,
        /// Peer address override such as `prover=10.0.0.2:9000` or `c3=...`.
        #[arg(long)]
        peer: Vec<String>,
        /// Report path for the verifier; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print reports as a table.
    Report {
        #[arg(long = "render", required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        /// Emit CSV instead of the aligned table.
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Challenger,
    Prover,
    Verifier,
}

struct Failure {
    code: i32,
    message: String,
}

fn fail(code: i32, message: impl ToString) -> Failure {
    Failure { code, message: message.to_string() }
}

fn write_or_print(path: Option<&PathBuf>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| fail(exit::RUNTIME, format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<i32, Failure> {
    match cli.command {
        Command::Simulate { configs, out, csv, trace, seed, reps } => {
            let scenarios = configs
                .iter()
                .map(|p| ScenarioConfig::load(p))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| fail(exit::CONFIG, e))?;
            let mut reports = Vec::new();
            for (i, cfg) in scenarios.iter().enumerate() {
                let overrides = RunOverrides { seed, repetitions: reps, trace: trace.is_some() && i == 0 };
                let output = simulate(cfg, &overrides).map_err(|e| fail(exit::RUNTIME, e))?;
                if let (Some(path), Some(t)) = (&trace, &output.trace) {
                    write_or_print(Some(path), &t.to_text())?;
                }
                reports.push(output.report);
            }
            let json = if reports.len() == 1 {
                reports[0].to_json()
            } else {
                serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n"
            };
            write_or_print(out.as_ref(), &json)?;
            if let Some(path) = &csv {
                let mut text = String::new();
                for (i, r) in reports.iter().enumerate() {
                    let part = r.challenger_csv().map_err(|e| fail(exit::RUNTIME, e))?;
                    // One header for the whole file.
                    text.push_str(if i == 0 { &part } else { part.split_once('\n').map_or("", |(_, rest)| rest) });
                }
                write_or_print(Some(path), &text)?;
            }
            let silent = reports.iter().any(|r| r.ladder.is_none() && r.repetitions.iter().any(|rep| !rep.terminated));
            Ok(if silent { exit::NO_OUTPUT } else { exit::OK })
        }
        Command::Report { reports, csv } => {
            let mut all: Vec<RunReport> = Vec::new();
            for p in &reports {
                all.extend(report::load_reports(p).map_err(|e| fail(exit::CONFIG, e))?);
            }
            let text = if csv {
                report::summary_csv(&all).map_err(|e| fail(exit::RUNTIME, e))?
            } else {
                report::render_table(&all)
            };
            print!("{text}");
            Ok(exit::OK)
        }
        Command::Measure { role, config, id, listen, peer, out } => {
            let mut cfg = LiveConfig::load(&config).map_err(|e| fail(exit::CONFIG, e))?;
            for p in &peer {
                cfg.apply_peer(p).map_err(|e| fail(exit::CONFIG, e))?;
            }
            let live_fail = |e: LiveError| match e {
                LiveError::Config(_) => fail(exit::CONFIG, e),
                LiveError::NoOutput => fail(exit::NO_OUTPUT, e),
                _ => fail(exit::RUNTIME, e),
            };
            match role {
                Role::Challenger => {
                    let s = live::run_challenger(&cfg, id, listen).map_err(live_fail)?;
                    println!(
                        "challenger {}: latency {} us, rtt {} ns, {} packets sent",
                        s.id,
                        s.latency_ns / 1000,
                        s.rtt_ns.map_or("none".into(), |r| r.to_string()),
                        s.sent
                    );
                }
                Role::Prover => {
                    let s = live::run_prover(&cfg, listen).map_err(live_fail)?;
                    println!("prover: {} packets counted, {} dropped by shaper", s.received, s.shaper_drops);
                }
                Role::Verifier => {
                    let r = live::run_verifier(&cfg, listen).map_err(live_fail)?;
                    write_or_print(out.as_ref(), &r.to_json())?;
                }
            }
            Ok(exit::OK)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("POB_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(f) => {
            error!("{}", f.message);
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
