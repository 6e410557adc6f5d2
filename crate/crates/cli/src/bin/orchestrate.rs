//! Runs a trial campaign against a daemon and records the dataset.
//!
//! Exit codes: 0 campaign finished, 1 usage or setup error, 5 halted on a fault.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::mpsc;

use clap::{Args as ClapArgs, Parser, Subcommand};
use log::{error, info};
use testbed_core::daemon::DaemonCore;
use testbed_core::dataset::CampaignStore;
use testbed_core::gateway::{Gateway, GatewayOptions};
use testbed_core::model::{CampaignSpec, TestbedKind};
use testbed_core::orchestrator::link::{DaemonLink, InProcessLink, TcpLink};
use testbed_core::orchestrator::manipulator::{ScriptConfig, ScriptedManipulator};
use testbed_core::orchestrator::{CampaignReport, Orchestrator, OrchestratorConfig};
use testbed_core::sim::SimParams;

#[derive(Parser)]
#[command(name = "orchestrate", version, about = "Campaign orchestrator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every trial of a campaign.
    Run(RunArgs),
}

#[derive(ClapArgs)]
struct RunArgs {
    /// Campaign spec (JSON file), or `door` / `drawer` for the built-in grids.
    #[arg(long)]
    campaign: String,
    /// Daemon address, or `inproc` for an in-process simulator.
    #[arg(long)]
    daemon: String,
    /// Output root; the campaign lands in `<out>/campaign/<id>`.
    #[arg(long)]
    out: PathBuf,
    /// In-process only: simulated seconds per wall second. Unpaced when omitted.
    #[arg(long)]
    accelerate: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Serve the operator gateway on this address.
    #[arg(long)]
    gateway: Option<String>,
    /// Try to recover from faults instead of halting.
    #[arg(long)]
    auto_continue: bool,
    /// Scripted arm holds every grasp with a weak 10 N grip.
    #[arg(long)]
    weak_grip: bool,
}

fn load_spec(arg: &str) -> Result<CampaignSpec, String> {
    match arg {
        "door" => Ok(CampaignSpec::door_dataset()),
        "drawer" => Ok(CampaignSpec::drawer_dataset()),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
            serde_json::from_str(&text).map_err(|e| format!("{path}: {e}"))
        }
    }
}

fn run<L: DaemonLink>(link: L, spec: &CampaignSpec, args: &RunArgs) -> Result<CampaignReport, String> {
    let mut store = CampaignStore::create(&args.out, spec, args.seed).map_err(|e| e.to_string())?;
    let script = ScriptConfig { weak_grip: args.weak_grip, ..Default::default() };
    let arm = ScriptedManipulator::new(spec.testbed, script, args.seed);
    let config = OrchestratorConfig { seed: args.seed, auto_continue: args.auto_continue, ..Default::default() };
    let mut orch = Orchestrator::new(link, arm, config).map_err(|e| e.to_string())?;
    let _gateway = match &args.gateway {
        Some(addr) => {
            let (tx, rx) = mpsc::channel();
            let opts = GatewayOptions { controls: Some(tx), dataset: Some(store.dir().to_path_buf()) };
            let (gw, monitor) = Gateway::start(addr.as_str(), opts).map_err(|e| format!("gateway {addr}: {e}"))?;
            println!("gateway {}", gw.local_addr());
            orch.set_monitor(Box::new(monitor));
            orch.set_controls(rx);
            Some(gw)
        }
        None => None,
    };
    let report = orch.run_campaign(spec, Some(&mut store)).map_err(|e| e.to_string())?;
    info!("campaign written to {}", store.dir().display());
    Ok(report)
}

fn in_process(testbed: TestbedKind, spec: &CampaignSpec, args: &RunArgs) -> Result<InProcessLink, String> {
    let attachment = *spec.attachment_grasps.keys().next().ok_or("campaign has no attachment")?;
    if spec.attachment_grasps.len() > 1 {
        return Err("an in-process daemon serves one attachment; split the campaign".into());
    }
    let core = DaemonCore::simulated(SimParams::for_testbed(testbed).with_seed(args.seed), attachment).map_err(|e| e.to_string())?;
    let link = InProcessLink::new(core);
    Ok(match args.accelerate {
        Some(k) if k > 0.0 => link.with_pace(k),
        Some(k) => return Err(format!("--accelerate must be positive, got {k}")),
        None => link,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let Cmd::Run(args) = Cli::parse().command;
    let spec = match load_spec(&args.campaign) {
        Ok(s) => s,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(1);
        }
    };
    let result = if args.daemon == "inproc" {
        in_process(spec.testbed, &spec, &args).and_then(|link| run(link, &spec, &args))
    } else {
        if args.accelerate.is_some() {
            info!("--accelerate is ignored for TCP daemons; their clock comes from the daemon config");
        }
        TcpLink::connect(args.daemon.as_str(), "orchestrate")
            .map_err(|e| format!("daemon {}: {e}", args.daemon))
            .and_then(|link| run(link, &spec, &args))
    };
    match result {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            if report.halted {
                ExitCode::from(5)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(1)
        }
    }
}
