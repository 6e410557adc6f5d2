//! Serves a testbed over TCP until SIGINT/SIGTERM.
//!
//! Exit codes: 0 clean shutdown, 1 bad config, 2 bind failure, 3 backend init failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use clap::Parser;
use log::error;
use testbed_core::daemon::server::DaemonServer;
use testbed_core::daemon::DaemonConfig;

#[derive(Parser)]
#[command(name = "testbed-daemon", version, about = "Device daemon for a door or drawer testbed")]
struct Args {
    /// Daemon config file (JSON).
    config: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let config = match std::fs::read_to_string(&args.config) {
        Ok(text) => match DaemonConfig::from_json(&text) {
            Ok(c) => c,
            Err(e) => {
                error!("{}: {e}", args.config.display());
                return ExitCode::from(1);
            }
        },
        Err(e) => {
            error!("{}: {e}", args.config.display());
            return ExitCode::from(1);
        }
    };
    let server = match DaemonServer::start(config) {
        Ok(s) => s,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    // Scripts read the bound address from stdout, useful with port 0.
    println!("listening {}", server.local_addr());
    let flag = server.shutdown_handle();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        error!("cannot install signal handler: {e}");
    }
    server.wait();
    ExitCode::SUCCESS
}
