//! Onset/release normalization and grouping of one FSR channel.
//!
//! Exit codes: 0 table written, 1 error, 4 nothing left to analyze.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use log::{error, warn};
use testbed_core::analysis::{analyze_campaign, AnalysisOptions, GroupBy, PipelineError};

#[derive(Clone, Copy, ValueEnum)]
enum Group {
    Resistance,
    Grasp,
}

#[derive(Parser)]
#[command(name = "analyze", version, about = "Normalized FSR traces grouped by resistance or grasp")]
struct Args {
    /// Campaign directory (the one holding manifest.json).
    #[arg(long)]
    campaign: PathBuf,
    #[arg(long, default_value_t = 9)]
    channel: usize,
    #[arg(long, value_enum, default_value = "resistance")]
    group_by: Group,
    /// Group table (CSV).
    #[arg(long)]
    out: PathBuf,
    /// Per-trial normalized traces (CSV).
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Onset level as a fraction of the baseline-to-peak rise.
    #[arg(long, default_value_t = 0.2)]
    threshold: f64,
    #[arg(long, default_value_t = 100.0)]
    sustain_ms: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let group_by = match args.group_by {
        Group::Resistance => GroupBy::Resistance,
        Group::Grasp => GroupBy::Grasp,
    };
    let mut opts = AnalysisOptions { channel: args.channel, group_by, ..Default::default() };
    opts.detect.threshold = args.threshold;
    opts.detect.sustain_s = args.sustain_ms / 1000.0;
    if !(0.0 < opts.detect.threshold && opts.detect.threshold < 1.0) || !(opts.detect.sustain_s >= 0.0) {
        error!("threshold must lie in (0, 1) and sustain must be non-negative");
        return ExitCode::from(1);
    }
    let result = match analyze_campaign(&args.campaign, &opts) {
        Ok(r) => r,
        Err(PipelineError::Empty) => {
            error!("no trials survived filtering");
            return ExitCode::from(4);
        }
        Err(e) => {
            error!("{e}");
            return ExitCode::from(1);
        }
    };
    for w in &result.warnings {
        warn!("{w}");
    }
    for (cell, report) in &result.filter {
        for (id, why) in &report.dropped {
            warn!("{cell}: dropped {id}: {why:?}");
        }
    }
    if result.groups.is_empty() {
        error!("no groups to report");
        return ExitCode::from(4);
    }
    if let Err(e) = std::fs::write(&args.out, result.group_csv(group_by)) {
        error!("{}: {e}", args.out.display());
        return ExitCode::from(1);
    }
    if let Some(path) = &args.traces {
        if let Err(e) = std::fs::write(path, result.trial_csv()) {
            error!("{}: {e}", path.display());
            return ExitCode::from(1);
        }
    }
    let kept: usize = result.filter.values().map(|r| r.kept.len()).sum();
    let dropped: usize = result.filter.values().map(|r| r.dropped.len()).sum();
    println!("{kept} trials kept, {dropped} dropped");
    ExitCode::SUCCESS
}
