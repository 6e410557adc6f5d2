//! Trace processing over recorded campaigns: grasp onset/release detection,
//! outlier filtering, time normalization and aggregate export.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{load_campaign, DatasetError, TrialRecord};
use crate::model::TrialLabel;
use crate::sim::median;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("trace spans {0} s, need at least 1 s")]
    ShortTrace(f64),
    #[error("no grasp onset (rise {0} counts)")]
    NoOnset(f64),
    #[error("no release after onset")]
    NoRelease,
    #[error("normalization window holds {0} samples, need 10")]
    Degenerate(usize),
    #[error("invalid window [{0}, {1}]")]
    Window(f64, f64),
    #[error("trace timestamps must be finite and increasing")]
    BadTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    /// Fraction of the baseline-to-peak rise.
    pub threshold: f64,
    pub sustain_s: f64,
    pub baseline_s: f64,
    /// Smallest rise that counts as a grasp, counts.
    pub min_rise: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams { threshold: 0.2, sustain_s: 0.1, baseline_s: 0.5, min_rise: 20.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnsetRelease {
    pub onset: f64,
    pub release: f64,
    /// Onset and release in seconds after the first sample.
    pub onset_offset: f64,
    pub release_offset: f64,
    pub baseline: f64,
    pub peak: f64,
}

fn check_trace(trace: &[(f64, f64)]) -> Result<(), AnalysisError> {
    let ok = trace.iter().all(|&(t, v)| t.is_finite() && v.is_finite()) && trace.windows(2).all(|w| w[1].0 > w[0].0);
    if ok {
        Ok(())
    } else {
        Err(AnalysisError::BadTrace)
    }
}

/// Times relative to the first sample. Keeps later arithmetic independent of
/// where the trace sits on the clock.
fn relative(trace: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let t0 = trace[0].0;
    trace.iter().map(|&(t, v)| (t - t0, v)).collect()
}

/// Crossings of `level`: `(time, rising)`, linearly interpolated.
fn crossings(rel: &[(f64, f64)], level: f64) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    if rel[0].1 >= level {
        out.push((rel[0].0, true));
    }
    for w in rel.windows(2) {
        let ((ta, va), (tb, vb)) = (w[0], w[1]);
        if va < level && vb >= level {
            out.push((ta + (level - va) / (vb - va) * (tb - ta), true));
        } else if va >= level && vb < level {
            out.push((ta + (va - level) / (va - vb) * (tb - ta), false));
        }
    }
    out
}

/// Finds the grasp rise and release fall of one FSR channel.
pub fn detect_onset_release(trace: &[(f64, f64)], p: &DetectParams) -> Result<OnsetRelease, AnalysisError> {
    if trace.len() < 2 {
        return Err(AnalysisError::ShortTrace(0.0));
    }
    check_trace(trace)?;
    let rel = relative(trace);
    let span = rel[rel.len() - 1].0;
    if span < 1.0 {
        return Err(AnalysisError::ShortTrace(span));
    }
    let baseline = median(rel.iter().filter(|s| s.0 <= p.baseline_s).map(|s| s.1));
    let peak = rel.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    if peak - baseline < p.min_rise {
        return Err(AnalysisError::NoOnset(peak - baseline));
    }
    let level = baseline + p.threshold * (peak - baseline);
    let xs = crossings(&rel, level);
    // Runs alternate: every rising crossing is followed by a falling one or
    // the end of the trace.
    let run_end = |i: usize| xs.get(i + 1).map_or(span, |c| c.0);
    let onset = (0..xs.len())
        .find(|&i| xs[i].1 && run_end(i) - xs[i].0 >= p.sustain_s)
        .map(|i| xs[i].0)
        .ok_or(AnalysisError::NoOnset(peak - baseline))?;
    let release = (0..xs.len())
        .rev()
        .find(|&i| !xs[i].1 && xs[i].0 > onset && run_end(i) - xs[i].0 >= p.sustain_s)
        .map(|i| xs[i].0)
        .ok_or(AnalysisError::NoRelease)?;
    let t0 = trace[0].0;
    Ok(OnsetRelease { onset: t0 + onset, release: t0 + release, onset_offset: onset, release_offset: release, baseline, peak })
}

/// Linear interpolation on a sorted trace; `t` must lie within its span.
fn interpolate(rel: &[(f64, f64)], t: f64) -> f64 {
    let i = rel.partition_point(|s| s.0 <= t);
    if i == 0 {
        return rel[0].1;
    }
    if i == rel.len() {
        return rel[rel.len() - 1].1;
    }
    let ((ta, va), (tb, vb)) = (rel[i - 1], rel[i]);
    if t == ta {
        return va;
    }
    va + (vb - va) * ((t - ta) / (tb - ta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedTrace {
    pub trial_id: String,
    pub channel: usize,
    pub samples: Vec<f64>,
    pub onset_t: f64,
    pub release_t: f64,
}

pub const DEFAULT_POINTS: usize = 100;

/// Resamples `[onset, release]` onto `points` uniform steps of normalized time.
pub fn normalize(trace: &[(f64, f64)], onset: f64, release: f64, points: usize) -> Result<Vec<f64>, AnalysisError> {
    if trace.is_empty() {
        return Err(AnalysisError::Degenerate(0));
    }
    let first = trace[0].0;
    resample(trace, onset - first, release - first, points).map_err(|e| match e {
        AnalysisError::Window(..) => AnalysisError::Window(onset, release),
        e => e,
    })
}

/// Like [`normalize`] with a detected window. Works on offsets from the first
/// sample, so the result does not depend on where the trace starts.
pub fn normalize_window(trace: &[(f64, f64)], w: &OnsetRelease, points: usize) -> Result<Vec<f64>, AnalysisError> {
    resample(trace, w.onset_offset, w.release_offset, points)
}

fn resample(trace: &[(f64, f64)], a: f64, b: f64, points: usize) -> Result<Vec<f64>, AnalysisError> {
    if trace.is_empty() {
        return Err(AnalysisError::Degenerate(0));
    }
    check_trace(trace)?;
    let rel = relative(trace);
    let span = rel[rel.len() - 1].0;
    if !(a < b) || a < 0.0 || b > span || points < 2 {
        return Err(AnalysisError::Window(a, b));
    }
    let inside = rel.iter().filter(|s| s.0 >= a && s.0 <= b).count();
    if inside < 10 {
        return Err(AnalysisError::Degenerate(inside));
    }
    let last = points - 1;
    Ok((0..points)
        .map(|k| {
            let u = if k == last { b } else { a + (b - a) * (k as f64 / last as f64) };
            interpolate(&rel, u)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DropReason {
    DurationOutlier,
    ForceOutlier,
    NoOnset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialFeatures {
    pub trial_id: String,
    pub pull_duration: f64,
    /// Channel maximum over the trial.
    pub peak: f64,
    pub window: Option<OnsetRelease>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterReport {
    pub kept: Vec<String>,
    pub dropped: Vec<(String, DropReason)>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    /// Duration cut: median + k * 1.4826 * MAD.
    pub mad_k: f64,
    /// Peak fences: [Q1 - k*IQR, Q3 + k*IQR].
    pub iqr_k: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams { mad_k: 2.0, iqr_k: 1.5 }
    }
}

/// Sample quantile, linear interpolation between order statistics (type 7).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Outlier filter for one (grasp, resistance) cell.
pub fn filter_outliers(trials: &[TrialFeatures], p: &FilterParams) -> FilterReport {
    let mut report = FilterReport::default();
    let with_onset: Vec<&TrialFeatures> = trials.iter().filter(|t| t.window.is_some()).collect();
    let stats = if with_onset.len() < 3 {
        report.warnings.push(format!("{} usable trials; outlier rules skipped", with_onset.len()));
        None
    } else {
        let d: Vec<f64> = with_onset.iter().map(|t| t.pull_duration).collect();
        let med = median(d.iter().copied());
        let mad = median(d.iter().map(|x| (x - med).abs()));
        let max_duration = med + p.mad_k * 1.4826 * mad;
        let peaks = sorted(with_onset.iter().map(|t| t.peak).collect());
        let (q1, q3) = (quantile(&peaks, 0.25), quantile(&peaks, 0.75));
        let iqr = q3 - q1;
        Some((max_duration, q1 - p.iqr_k * iqr, q3 + p.iqr_k * iqr))
    };
    for t in trials {
        let reason = if t.window.is_none() {
            Some(DropReason::NoOnset)
        } else {
            stats.and_then(|(max_d, lo, hi)| {
                if t.pull_duration > max_d {
                    Some(DropReason::DurationOutlier)
                } else if t.peak < lo || t.peak > hi {
                    Some(DropReason::ForceOutlier)
                } else {
                    None
                }
            })
        };
        match reason {
            Some(r) => report.dropped.push((t.trial_id.clone(), r)),
            None => report.kept.push(t.trial_id.clone()),
        }
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Resistance,
    Grasp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub channel: usize,
    pub group_by: GroupBy,
    pub detect: DetectParams,
    pub filter: FilterParams,
    pub points: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            channel: 9,
            group_by: GroupBy::Resistance,
            detect: DetectParams::default(),
            filter: FilterParams::default(),
            points: DEFAULT_POINTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRow {
    pub group: String,
    pub u: f64,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialTrace {
    pub grasp: String,
    pub resistance: f64,
    pub trace: NormalizedTrace,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnalysisResult {
    pub groups: Vec<GroupRow>,
    pub traces: Vec<TrialTrace>,
    pub filter: BTreeMap<String, FilterReport>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("channel {channel} not recorded (campaign has {available})")]
    Channel { channel: usize, available: usize },
    #[error("no trials survived filtering")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Key(f64);

impl Eq for Key {}
impl PartialOrd for Key {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Key {
    fn cmp(&self, o: &Self) -> Ordering {
        self.0.total_cmp(&o.0)
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs the pipeline over in-memory records. Only trials that ran to
/// completion (Success or Failure) are considered.
pub fn analyze_records(records: &[TrialRecord], opts: &AnalysisOptions) -> Result<AnalysisResult, PipelineError> {
    let mut records: Vec<&TrialRecord> = records
        .iter()
        .filter(|r| matches!(r.meta.result.label, TrialLabel::Success | TrialLabel::Failure))
        .collect();
    records.sort_by(|a, b| a.trial_id().cmp(b.trial_id()));
    let mut result = AnalysisResult::default();

    // Cells for filtering, in deterministic order.
    let mut cells: BTreeMap<(String, Key), Vec<(&TrialRecord, TrialFeatures, Vec<(f64, f64)>)>> = BTreeMap::new();
    for r in records {
        let trace = r
            .channel_trace(opts.channel)
            .ok_or(PipelineError::Channel { channel: opts.channel, available: r.meta.channel_count })?;
        let peak = trace.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let window = match detect_onset_release(&trace, &opts.detect) {
            Ok(w) => Some(w),
            Err(e) => {
                result.warnings.push(format!("{}: {e}", r.trial_id()));
                None
            }
        };
        let features = TrialFeatures { trial_id: r.trial_id().to_string(), pull_duration: r.meta.result.pull_duration, peak, window };
        let spec = &r.meta.spec;
        cells.entry((spec.grasp.clone(), Key(spec.resistance))).or_default().push((r, features, trace));
    }

    let mut groups: BTreeMap<(String, Key), Vec<Vec<f64>>> = BTreeMap::new();
    for ((grasp, res), members) in &cells {
        let features: Vec<TrialFeatures> = members.iter().map(|m| m.1.clone()).collect();
        let report = filter_outliers(&features, &opts.filter);
        for w in &report.warnings {
            warn!("cell {grasp}@{}: {w}", res.0);
            result.warnings.push(format!("cell {grasp}@{}: {w}", res.0));
        }
        for (r, f, trace) in members {
            if !report.kept.contains(&f.trial_id) {
                continue;
            }
            let w = f.window.expect("kept trials have a window");
            match normalize_window(trace, &w, opts.points) {
                Ok(samples) => {
                    let key = match opts.group_by {
                        GroupBy::Resistance => (String::new(), *res),
                        GroupBy::Grasp => (grasp.clone(), Key(0.0)),
                    };
                    groups.entry(key).or_default().push(samples.clone());
                    result.traces.push(TrialTrace {
                        grasp: grasp.clone(),
                        resistance: res.0,
                        trace: NormalizedTrace { trial_id: f.trial_id.clone(), channel: opts.channel, samples, onset_t: w.onset, release_t: w.release },
                    });
                }
                Err(e) => result.warnings.push(format!("{}: {e}", r.trial_id())),
            }
        }
        result.filter.insert(format!("{grasp}@{}", res.0), report);
    }
    if groups.is_empty() {
        return Err(PipelineError::Empty);
    }
    result.traces.sort_by(|a, b| a.trace.trial_id.cmp(&b.trace.trial_id));
    let last = (opts.points - 1) as f64;
    for ((grasp, res), traces) in &groups {
        let group = match opts.group_by {
            GroupBy::Resistance => res.0.to_string(),
            GroupBy::Grasp => grasp.clone(),
        };
        for k in 0..opts.points {
            let column: Vec<f64> = traces.iter().map(|s| s[k]).collect();
            let (mean, sd) = mean_sd(&column);
            result.groups.push(GroupRow { group: group.clone(), u: k as f64 / last, mean, sd, n: column.len() });
        }
    }
    Ok(result)
}

/// Loads a campaign directory and runs the pipeline.
pub fn analyze_campaign(dir: &Path, opts: &AnalysisOptions) -> Result<AnalysisResult, PipelineError> {
    let loaded = load_campaign(dir)?;
    for id in &loaded.incomplete {
        warn!("skipping incomplete trial {id}");
    }
    analyze_records(&loaded.trials, opts)
}

impl AnalysisResult {
    /// Mean and sd per group and normalized time point.
    pub fn group_csv(&self, group_by: GroupBy) -> String {
        let name = match group_by {
            GroupBy::Resistance => "resistance",
            GroupBy::Grasp => "grasp",
        };
        let mut out = format!("{name},u,mean,sd,n\n");
        for r in &self.groups {
            let _ = writeln!(out, "{},{},{},{},{}", r.group, r.u, r.mean, r.sd, r.n);
        }
        out
    }

    /// One row per trial and normalized time point.
    pub fn trial_csv(&self) -> String {
        let mut out = String::from("trial_id,grasp,resistance,channel,onset_t,release_t,u,value\n");
        for t in &self.traces {
            let last = (t.trace.samples.len() - 1) as f64;
            for (k, v) in t.trace.samples.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    t.trace.trial_id,
                    t.grasp,
                    t.resistance,
                    t.trace.channel,
                    t.trace.onset_t,
                    t.trace.release_t,
                    k as f64 / last,
                    v
                );
            }
        }
        out
    }

    /// Mean curve of one group, if present.
    pub fn group_mean(&self, group: &str) -> Vec<f64> {
        self.groups.iter().filter(|r| r.group == group).map(|r| r.mean).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trapezoid(dt: f64, end: f64) -> Vec<(f64, f64)> {
        let n = (end / dt).round() as usize;
        (0..=n)
            .map(|i| {
                let t = i as f64 * dt;
                let v = if t < 2.0 {
                    0.0
                } else if t < 2.1 {
                    4000.0 * (t - 2.0)
                } else if t < 7.0 {
                    400.0
                } else if t < 7.1 {
                    400.0 - 4000.0 * (t - 7.0)
                } else {
                    0.0
                };
                (t, v)
            })
            .collect()
    }

    #[test]
    fn trapezoid_crossings() {
        let w = detect_onset_release(&trapezoid(0.01, 9.0), &DetectParams::default()).unwrap();
        assert!((2.015..=2.025).contains(&w.onset), "{w:?}");
        assert!((7.075..=7.085).contains(&w.release), "{w:?}");
    }

    #[test]
    fn flat_trace_has_no_onset() {
        let tr: Vec<_> = (0..300).map(|i| (i as f64 * 0.01, 0.0)).collect();
        assert!(matches!(detect_onset_release(&tr, &DetectParams::default()), Err(AnalysisError::NoOnset(_))));
    }

    #[test]
    fn short_spike_is_ignored() {
        let tr: Vec<_> = (0..300)
            .map(|i| {
                let t = i as f64 * 0.01;
                (t, if (1.0..1.05).contains(&t) { 400.0 } else { 0.0 })
            })
            .collect();
        assert!(matches!(detect_onset_release(&tr, &DetectParams::default()), Err(AnalysisError::NoOnset(_))));
    }

    #[test]
    fn constant_normalizes_to_constant() {
        let tr: Vec<_> = (0..100).map(|i| (i as f64 * 0.01, 7.5)).collect();
        let s = normalize(&tr, 0.1, 0.8, 100).unwrap();
        assert_eq!(s.len(), 100);
        assert!(s.iter().all(|&v| v == 7.5));
    }

    #[test]
    fn ramp_endpoints_exact() {
        let tr: Vec<_> = (0..100).map(|i| (i as f64 / 64.0, i as f64 / 64.0)).collect();
        let s = normalize(&tr, 0.25, 1.25, 100).unwrap();
        assert_eq!((s[0], s[99]), (0.25, 1.25));
        for w in s.windows(3) {
            assert!(((w[2] - w[1]) - (w[1] - w[0])).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_samples_in_window() {
        let tr: Vec<_> = (0..100).map(|i| (i as f64 * 0.1, 1.0)).collect();
        assert_eq!(normalize(&tr, 1.0, 1.5, 100), Err(AnalysisError::Degenerate(6)));
    }

    fn feat(id: &str, d: f64, peak: f64) -> TrialFeatures {
        let w = OnsetRelease { onset: 0.0, release: d, onset_offset: 0.0, release_offset: d, baseline: 0.0, peak };
        TrialFeatures { trial_id: id.into(), pull_duration: d, peak, window: Some(w) }
    }

    #[test]
    fn identical_cell_keeps_all() {
        let ts: Vec<_> = (0..5).map(|i| feat(&i.to_string(), 4.0, 300.0)).collect();
        let r = filter_outliers(&ts, &FilterParams::default());
        assert_eq!(r.kept.len(), 5);
    }

    #[test]
    fn small_cell_passes_through() {
        let ts = vec![feat("a", 4.0, 300.0), feat("b", 40.0, 3.0)];
        let r = filter_outliers(&ts, &FilterParams::default());
        assert_eq!(r.kept.len(), 2);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn quantile_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&v, 0.75), 3.25);
    }
}
