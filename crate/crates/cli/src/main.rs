use std::io::Write;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use approxcache_cli::args::{Cli, Command};
use approxcache_cli::serve::{self, ServeState, ShutdownOutputs};
use approxcache_cli::{commands, effective_config, CliError};
use clap::Parser;

fn execute(cli: Cli) -> Result<(), CliError> {
    let config = effective_config(&cli)?;
    let text = match &cli.command {
        Command::Run { report, outcomes, json } => {
            commands::run(&config, report.as_deref(), outcomes.as_deref(), *json)?
        }
        Command::Profile { out, json } => commands::profile(&config, out.as_deref(), *json)?,
        Command::Compare {
            policies,
            capacities,
            out,
            json,
        } => commands::compare(&config, policies, capacities, out.as_deref(), *json)?,
        Command::Serve { addr, snapshot } => {
            let state = Arc::new(Mutex::new(ServeState::new(&config)?));
            let outputs = ShutdownOutputs {
                report: config.output.report.clone(),
                snapshot: snapshot.clone(),
            };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                serve::serve(listener, state, outputs, shutdown_signal()).await
            })?;
            return Ok(());
        }
        Command::Synth { out } => {
            let n = match out {
                Some(path) => {
                    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
                    commands::synth(&config, &mut w)?
                }
                None => commands::synth(&config, &mut std::io::stdout().lock())?,
            };
            log::info!("wrote {n} prompts");
            return Ok(());
        }
        Command::Calibrate { samples } => commands::calibrate(&config, *samples),
        Command::ShowConfig => commands::show_config(&config)?,
    };
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{}", text.trim_end()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

/// Resolves on Ctrl-C, or SIGTERM where available.
async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    log::info!("shutting down");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
