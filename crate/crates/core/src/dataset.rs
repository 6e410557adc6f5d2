//! On-disk trial dataset: CSV streams plus JSON metadata and a campaign manifest.
//!
//! ```text
//! <out>/campaign/<id>/manifest.json
//! <out>/campaign/<id>/trials/<trial_id>/{meta.json, testbed.csv, fsr.csv, manipulator.csv}
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading a
//! file and writing it back reproduces it byte for byte. Stream files carry a
//! `.partial` suffix until the trial is finalized.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{CampaignSpec, TrialLabel, TrialResult, TrialSpec};
use crate::sim::{ResetMotor, SensorFrame};

pub const SCHEMA_VERSION: u32 = 1;
pub const TESTBED_CSV: &str = "testbed.csv";
pub const FSR_CSV: &str = "fsr.csv";
pub const MANIPULATOR_CSV: &str = "manipulator.csv";
pub const META_JSON: &str = "meta.json";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const PARTIAL_SUFFIX: &str = ".partial";
const STREAMS: [&str; 3] = [TESTBED_CSV, FSR_CSV, MANIPULATOR_CSV];

pub const TESTBED_HEADER: &str = "t,opening,opening_measured,velocity,resistance,reset_motor,flags";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: unsupported schema_version {found} (this build reads {SCHEMA_VERSION})")]
    SchemaVersion { path: PathBuf, found: u64 },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0} is incomplete (never finalized)")]
    Incomplete(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl Into<String>) -> DatasetError {
    DatasetError::Format { path: path.to_path_buf(), message: message.into() }
}

pub fn fsr_header(channels: usize) -> String {
    let mut s = String::from("t");
    for i in 0..channels {
        write!(s, ",ch{i:02}").unwrap();
    }
    s
}

pub fn manipulator_header(joints: usize) -> String {
    let mut s = String::from("t");
    for i in 0..joints {
        write!(s, ",q{i}").unwrap();
    }
    for i in 0..joints {
        write!(s, ",qd{i}").unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestbedRow {
    pub t: f64,
    /// Ground truth, present only for simulated runs.
    pub opening: Option<f64>,
    pub opening_measured: f64,
    pub velocity: Option<f64>,
    pub resistance: f64,
    pub reset_motor: ResetMotor,
    pub flags: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsrRow {
    pub t: f64,
    pub counts: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManipulatorRow {
    pub t: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
}

impl TestbedRow {
    pub fn from_frame(t: f64, frame: &SensorFrame) -> Self {
        TestbedRow {
            t,
            opening: frame.truth.map(|g| g.opening),
            opening_measured: frame.opening_measured,
            velocity: frame.truth.map(|g| g.velocity),
            resistance: frame.resistance_setting,
            reset_motor: frame.reset_motor,
            flags: frame.flags.0,
        }
    }

    fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}\n",
            self.t,
            opt(self.opening),
            self.opening_measured,
            opt(self.velocity),
            self.resistance,
            self.reset_motor.as_str(),
            self.flags
        )
    }

    fn parse(fields: &[&str]) -> Result<Self, String> {
        if fields.len() != 7 {
            return Err(format!("expected 7 columns, found {}", fields.len()));
        }
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { parse_f64(s).map(Some) };
        Ok(TestbedRow {
            t: parse_f64(fields[0])?,
            opening: opt(fields[1])?,
            opening_measured: parse_f64(fields[2])?,
            velocity: opt(fields[3])?,
            resistance: parse_f64(fields[4])?,
            reset_motor: ResetMotor::parse(fields[5]).ok_or_else(|| format!("bad reset_motor {:?}", fields[5]))?,
            flags: fields[6].parse().map_err(|_| format!("bad flags {:?}", fields[6]))?,
        })
    }
}

impl FsrRow {
    fn to_line(&self) -> String {
        let mut s = self.t.to_string();
        for c in &self.counts {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
        s
    }

    fn parse(fields: &[&str], channels: usize) -> Result<Self, String> {
        if fields.len() != channels + 1 {
            return Err(format!("expected {} columns, found {}", channels + 1, fields.len()));
        }
        let counts = fields[1..]
            .iter()
            .map(|f| f.parse::<u16>().map_err(|_| format!("bad count {f:?}")))
            .collect::<Result<_, _>>()?;
        Ok(FsrRow { t: parse_f64(fields[0])?, counts })
    }
}

impl ManipulatorRow {
    fn to_line(&self) -> String {
        let mut s = self.t.to_string();
        for v in self.q.iter().chain(&self.qd) {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
        s
    }

    fn parse(fields: &[&str], joints: usize) -> Result<Self, String> {
        if fields.len() != 2 * joints + 1 {
            return Err(format!("expected {} columns, found {}", 2 * joints + 1, fields.len()));
        }
        let vals = fields[1..].iter().map(|f| parse_f64(f)).collect::<Result<Vec<_>, _>>()?;
        Ok(ManipulatorRow { t: parse_f64(fields[0])?, q: vals[..joints].to_vec(), qd: vals[joints..].to_vec() })
    }
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|_| format!("bad number {s:?}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseStamp {
    pub phase: String,
    /// Testbed clock, seconds.
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub testbed: usize,
    pub fsr: usize,
    pub manipulator: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMeta {
    pub schema_version: u32,
    pub campaign_id: String,
    pub spec: TrialSpec,
    pub testbed_name: String,
    /// Gripper pose at grasp: x, y, z in metres then roll, pitch, yaw in radians.
    pub grasp_pose: [f64; 6],
    pub result: TrialResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub seed: u64,
    pub software_version: String,
    /// Testbed clock at the stream time origin.
    pub origin_clock: f64,
    pub end_clock: f64,
    pub channel_count: usize,
    pub joint_count: usize,
    pub samples: SampleCounts,
    #[serde(default)]
    pub media_refs: Vec<String>,
    #[serde(default)]
    pub phase_history: Vec<PhaseStamp>,
}

/// Everything known about one recorded trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub meta: TrialMeta,
    pub testbed: Vec<TestbedRow>,
    pub fsr: Vec<FsrRow>,
    pub manipulator: Vec<ManipulatorRow>,
}

impl TrialRecord {
    pub fn trial_id(&self) -> &str {
        &self.meta.spec.trial_id
    }

    /// Measured opening trace `(t, opening)`.
    pub fn opening_trace(&self) -> Vec<(f64, f64)> {
        self.testbed.iter().map(|r| (r.t, r.opening_measured)).collect()
    }

    /// One FSR channel as `(t, counts)`.
    pub fn channel_trace(&self, channel: usize) -> Option<Vec<(f64, f64)>> {
        if channel >= self.meta.channel_count {
            return None;
        }
        Some(self.fsr.iter().map(|r| (r.t, f64::from(r.counts[channel]))).collect())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, DatasetError> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn partial(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}{PARTIAL_SUFFIX}"))
}

struct StreamFile {
    out: BufWriter<File>,
    last_t: f64,
}

/// Streams one trial to disk. Rows are also kept in memory so that
/// [`TrialWriter::finalize`] can hand back the full record.
pub struct TrialWriter {
    dir: PathBuf,
    files: Option<[StreamFile; 3]>,
    failure: Option<String>,
    testbed: Vec<TestbedRow>,
    fsr: Vec<FsrRow>,
    manipulator: Vec<ManipulatorRow>,
    channel_count: usize,
    joint_count: usize,
}

impl TrialWriter {
    /// Creates `trials/<trial_id>/` under `campaign_dir` and writes stream headers.
    pub fn open(campaign_dir: &Path, trial_id: &str, channel_count: usize, joint_count: usize) -> Result<Self, DatasetError> {
        if trial_id.is_empty() || trial_id.contains(['/', '\\']) || trial_id.starts_with('.') {
            return Err(format_err(campaign_dir, format!("trial id {trial_id:?} is not a valid directory name")));
        }
        let dir = campaign_dir.join("trials").join(trial_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let headers = [TESTBED_HEADER.to_string(), fsr_header(channel_count), manipulator_header(joint_count)];
        let mut files = Vec::with_capacity(3);
        for (name, header) in STREAMS.iter().zip(headers) {
            let path = partial(&dir, name);
            let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
            writeln!(out, "{header}").map_err(io_err(&path))?;
            files.push(StreamFile { out, last_t: f64::NEG_INFINITY });
        }
        let files: [StreamFile; 3] = files.try_into().ok().expect("three streams");
        Ok(TrialWriter {
            dir,
            files: Some(files),
            failure: None,
            testbed: Vec::new(),
            fsr: Vec::new(),
            manipulator: Vec::new(),
            channel_count,
            joint_count,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// First write error, if any. The trial will be finalized as `Error`.
    pub fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }

    /// Simulates a write failure on the underlying storage.
    pub fn poison(&mut self, reason: impl Into<String>) {
        self.failure.get_or_insert(reason.into());
    }

    fn write(&mut self, stream: usize, t: f64, line: &str) {
        if self.failure.is_some() {
            return;
        }
        let Some(files) = self.files.as_mut() else {
            self.failure = Some("stream written after close".into());
            return;
        };
        let f = &mut files[stream];
        if !(t >= f.last_t) {
            self.failure = Some(format!("{}: timestamp {t} not monotone", STREAMS[stream]));
            return;
        }
        f.last_t = t;
        if let Err(e) = f.out.write_all(line.as_bytes()) {
            self.failure = Some(format!("{}: {e}", STREAMS[stream]));
        }
    }

    pub fn append_frame(&mut self, t: f64, frame: &SensorFrame) {
        let row = TestbedRow::from_frame(t, frame);
        let fsr = FsrRow { t, counts: frame.fsr_counts.clone() };
        self.append_rows(row, fsr);
    }

    pub fn append_rows(&mut self, row: TestbedRow, fsr: FsrRow) {
        if fsr.counts.len() != self.channel_count {
            self.failure.get_or_insert(format!("frame has {} channels, expected {}", fsr.counts.len(), self.channel_count));
            return;
        }
        self.write(0, row.t, &row.to_line());
        self.write(1, fsr.t, &fsr.to_line());
        self.testbed.push(row);
        self.fsr.push(fsr);
    }

    pub fn append_manipulator(&mut self, row: ManipulatorRow) {
        if row.q.len() != self.joint_count || row.qd.len() != self.joint_count {
            self.failure.get_or_insert("manipulator sample has the wrong joint count".into());
            return;
        }
        self.write(2, row.t, &row.to_line());
        self.manipulator.push(row);
    }

    /// Flushes and closes the stream files. They keep their `.partial` names
    /// until [`TrialWriter::finalize`].
    pub fn close_streams(&mut self) {
        if let Some(files) = self.files.take() {
            for (f, name) in files.into_iter().zip(STREAMS) {
                let result = f.out.into_inner().map_err(|e| e.into_error()).and_then(|file| file.sync_all());
                if let Err(e) = result {
                    self.failure.get_or_insert(format!("{name}: {e}"));
                }
            }
        }
    }

    /// Renames the streams into place and writes `meta.json`. On an earlier
    /// write failure the streams keep their `.partial` suffix and the trial is
    /// labelled `Error`.
    pub fn finalize(mut self, mut meta: TrialMeta) -> Result<TrialRecord, DatasetError> {
        self.close_streams();
        meta.schema_version = SCHEMA_VERSION;
        meta.channel_count = self.channel_count;
        meta.joint_count = self.joint_count;
        meta.samples = SampleCounts { testbed: self.testbed.len(), fsr: self.fsr.len(), manipulator: self.manipulator.len() };
        if let Some(failure) = &self.failure {
            meta.result.label = TrialLabel::Error;
            meta.reason = Some(format!("write failure: {failure}"));
        } else {
            for name in STREAMS {
                let from = partial(&self.dir, name);
                let to = self.dir.join(name);
                fs::rename(&from, &to).map_err(io_err(&to))?;
            }
        }
        let json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
        write_atomic(&self.dir.join(META_JSON), &json)?;
        Ok(TrialRecord { meta, testbed: self.testbed, fsr: self.fsr, manipulator: self.manipulator })
    }
}

/// Writes a complete record in one go (used by playback round-trips and imports).
pub fn write_record(campaign_dir: &Path, record: &TrialRecord) -> Result<TrialRecord, DatasetError> {
    let mut w = TrialWriter::open(campaign_dir, record.trial_id(), record.meta.channel_count, record.meta.joint_count)?;
    for (row, fsr) in record.testbed.iter().zip(&record.fsr) {
        w.append_rows(row.clone(), fsr.clone());
    }
    for m in &record.manipulator {
        w.append_manipulator(m.clone());
    }
    if let Some(f) = w.failure() {
        return Err(format_err(campaign_dir, f.to_string()));
    }
    w.finalize(record.meta.clone())
}

fn read_lines(path: &Path) -> Result<(String, Vec<String>), DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.split_terminator('\n').map(str::to_owned);
    let header = lines.next().ok_or_else(|| format_err(path, "missing header"))?;
    Ok((header, lines.collect()))
}

struct Streams {
    testbed: Vec<TestbedRow>,
    fsr: Vec<FsrRow>,
    manipulator: Vec<ManipulatorRow>,
}

/// Parses the three streams of a trial directory. With `lenient`, malformed
/// trailing rows (a torn write) are dropped instead of failing.
fn read_streams(dir: &Path, suffix: &str, channels: usize, joints: usize, lenient: bool) -> Result<Streams, DatasetError> {
    fn parse_all<T>(
        path: &Path,
        expected_header: &str,
        lenient: bool,
        parse: impl Fn(&[&str]) -> Result<T, String>,
    ) -> Result<Vec<T>, DatasetError> {
        let (header, lines) = read_lines(path)?;
        if header != expected_header {
            return Err(format_err(path, format!("header {header:?} != {expected_header:?}")));
        }
        let mut out = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            match parse(&fields) {
                Ok(row) => out.push(row),
                Err(_) if lenient => break,
                Err(e) => return Err(format_err(path, format!("line {}: {e}", i + 2))),
            }
        }
        Ok(out)
    }
    let p = |name: &str| dir.join(format!("{name}{suffix}"));
    Ok(Streams {
        testbed: parse_all(&p(TESTBED_CSV), TESTBED_HEADER, lenient, TestbedRow::parse)?,
        fsr: parse_all(&p(FSR_CSV), &fsr_header(channels), lenient, |f| FsrRow::parse(f, channels))?,
        manipulator: parse_all(&p(MANIPULATOR_CSV), &manipulator_header(joints), lenient, |f| {
            ManipulatorRow::parse(f, joints)
        })?,
    })
}

fn read_meta(dir: &Path) -> Result<TrialMeta, DatasetError> {
    let path = dir.join(META_JSON);
    if !path.exists() {
        return Err(DatasetError::Incomplete(dir.to_path_buf()));
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| format_err(&path, e.to_string()))?;
    match value.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(v) => return Err(DatasetError::SchemaVersion { path, found: v }),
        None => return Err(format_err(&path, "missing schema_version")),
    }
    serde_json::from_value(value).map_err(|e| format_err(&path, e.to_string()))
}

/// Loads a finalized trial directory.
pub fn read_trial(dir: &Path) -> Result<TrialRecord, DatasetError> {
    let meta = read_meta(dir)?;
    let suffix = if meta.result.label == TrialLabel::Error && !dir.join(TESTBED_CSV).exists() { PARTIAL_SUFFIX } else { "" };
    let s = read_streams(dir, suffix, meta.channel_count, meta.joint_count, false)?;
    Ok(TrialRecord { meta, testbed: s.testbed, fsr: s.fsr, manipulator: s.manipulator })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub trial_id: String,
    /// Relative to the campaign directory.
    pub path: String,
    pub label: TrialLabel,
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub trial_id: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignManifest {
    pub schema_version: u32,
    pub campaign_id: String,
    pub spec: CampaignSpec,
    pub seed: u64,
    pub expected_trials: usize,
    pub trials: Vec<ManifestEntry>,
    /// Trials from the expansion that are missing, with the reason.
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

/// A campaign directory being written.
pub struct CampaignStore {
    dir: PathBuf,
    manifest: CampaignManifest,
}

impl CampaignStore {
    /// Creates `<out>/campaign/<id>/` with an empty manifest.
    pub fn create(out: &Path, spec: &CampaignSpec, seed: u64) -> Result<Self, DatasetError> {
        let dir = campaign_dir(out, &spec.id);
        fs::create_dir_all(dir.join("trials")).map_err(io_err(&dir))?;
        let store = CampaignStore {
            manifest: CampaignManifest {
                schema_version: SCHEMA_VERSION,
                campaign_id: spec.id.clone(),
                spec: spec.clone(),
                seed,
                expected_trials: spec.trial_count(),
                trials: Vec::new(),
                annotations: Vec::new(),
            },
            dir,
        };
        store.save()?;
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &CampaignManifest {
        &self.manifest
    }

    pub fn open_trial(&self, trial_id: &str, channel_count: usize, joint_count: usize) -> Result<TrialWriter, DatasetError> {
        TrialWriter::open(&self.dir, trial_id, channel_count, joint_count)
    }

    /// Adds a finalized trial to the manifest, replacing any earlier entry.
    pub fn commit(&mut self, record: &TrialRecord) -> Result<(), DatasetError> {
        let id = record.trial_id().to_string();
        let trial_dir = self.dir.join("trials").join(&id);
        let mut checksums = BTreeMap::new();
        for name in [META_JSON].into_iter().chain(STREAMS) {
            let path = trial_dir.join(name);
            if path.exists() {
                checksums.insert(name.to_string(), sha256_file(&path)?);
            }
        }
        let entry = ManifestEntry { trial_id: id.clone(), path: format!("trials/{id}"), label: record.meta.result.label, checksums };
        self.manifest.trials.retain(|e| e.trial_id != id);
        self.manifest.annotations.retain(|a| a.trial_id != id);
        self.manifest.trials.push(entry);
        self.save()
    }

    /// Records why a trial of the expansion has no entry.
    pub fn annotate_skipped(&mut self, trial_id: &str, note: impl Into<String>) -> Result<(), DatasetError> {
        self.manifest.annotations.push(Annotation { trial_id: trial_id.to_string(), note: note.into() });
        self.save()
    }

    fn save(&self) -> Result<(), DatasetError> {
        let json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.dir.join(MANIFEST_JSON), &json)
    }
}

pub fn campaign_dir(out: &Path, campaign_id: &str) -> PathBuf {
    out.join("campaign").join(campaign_id)
}

#[derive(Debug, Default)]
pub struct LoadedCampaign {
    pub manifest: Option<CampaignManifest>,
    pub trials: Vec<TrialRecord>,
    /// Trial directories that were never finalized.
    pub incomplete: Vec<String>,
}

fn read_manifest(dir: &Path) -> Result<Option<CampaignManifest>, DatasetError> {
    let path = dir.join(MANIFEST_JSON);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| format_err(&path, e.to_string()))?;
    match value.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(v) => return Err(DatasetError::SchemaVersion { path, found: v }),
        None => return Err(format_err(&path, "missing schema_version")),
    }
    serde_json::from_value(value).map(Some).map_err(|e| format_err(&path, e.to_string()))
}

fn trial_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>, DatasetError> {
    let trials = dir.join("trials");
    if !trials.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&trials).map_err(io_err(&trials))? {
        let entry = entry.map_err(io_err(&trials))?;
        if entry.path().is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every finalized trial of a campaign directory, sorted by trial id.
/// Unfinalized trials are listed in `incomplete` rather than failing the load.
pub fn load_campaign(dir: &Path) -> Result<LoadedCampaign, DatasetError> {
    let mut loaded = LoadedCampaign { manifest: read_manifest(dir)?, ..Default::default() };
    for (id, path) in trial_dirs(dir)? {
        match read_trial(&path) {
            Ok(rec) => loaded.trials.push(rec),
            Err(DatasetError::Incomplete(_)) => loaded.incomplete.push(id),
            Err(e) => return Err(e),
        }
    }
    Ok(loaded)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub file: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub trials_checked: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn flagged_files(&self) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = self.violations.iter().map(|x| x.file.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    fn flag(&mut self, file: &Path, message: impl Into<String>) {
        self.violations.push(Violation { file: file.to_path_buf(), message: message.into() });
    }
}

/// Largest allowed gap between an FSR row and the nearest testbed row, s.
pub const ALIGNMENT_TOLERANCE: f64 = 0.010;

fn check_trial(dir: &Path, report: &mut ValidationReport) {
    let meta = match read_meta(dir) {
        Ok(m) => m,
        Err(DatasetError::Incomplete(_)) => {
            report.flag(dir, "trial was never finalized");
            return;
        }
        Err(e) => {
            report.flag(&dir.join(META_JSON), e.to_string());
            return;
        }
    };
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if meta.spec.trial_id != name {
        report.flag(&dir.join(META_JSON), format!("trial_id {:?} does not match directory", meta.spec.trial_id));
    }
    if meta.result.label == TrialLabel::Error && !dir.join(TESTBED_CSV).exists() {
        // Failed writes keep partial streams; nothing else to check.
        return;
    }
    let mut streams: [Option<Vec<f64>>; 3] = [None, None, None];
    let headers = [TESTBED_HEADER.to_string(), fsr_header(meta.channel_count), manipulator_header(meta.joint_count)];
    let widths = [7, meta.channel_count + 1, 2 * meta.joint_count + 1];
    let expected_rows = [meta.samples.testbed, meta.samples.fsr, meta.samples.manipulator];
    for (i, stream) in STREAMS.iter().enumerate() {
        let path = dir.join(stream);
        let (header, lines) = match read_lines(&path) {
            Ok(x) => x,
            Err(e) => {
                report.flag(&path, e.to_string());
                continue;
            }
        };
        if header != headers[i] {
            report.flag(&path, format!("header {header:?}, expected {:?}", headers[i]));
        }
        if lines.len() != expected_rows[i] {
            report.flag(&path, format!("{} rows, meta says {}", lines.len(), expected_rows[i]));
        }
        let mut times = Vec::with_capacity(lines.len());
        let mut ok = true;
        for (n, line) in lines.iter().enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            let parsed = match i {
                0 => TestbedRow::parse(&fields).map(|r| r.t),
                1 => FsrRow::parse(&fields, meta.channel_count).map(|r| r.t),
                _ => ManipulatorRow::parse(&fields, meta.joint_count).map(|r| r.t),
            };
            match parsed {
                Ok(t) => times.push(t),
                Err(e) => {
                    report.flag(&path, format!("line {}: {e} (expected {} columns)", n + 2, widths[i]));
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            if let Some(k) = times.windows(2).position(|w| !(w[1] >= w[0])) {
                report.flag(&path, format!("timestamps not monotone at line {}", k + 3));
            }
            streams[i] = Some(times);
        }
    }
    if let (Some(tb), Some(fsr)) = (&streams[0], &streams[1]) {
        if let Some(t) = fsr.iter().find(|&&t| nearest_gap(tb, t) > ALIGNMENT_TOLERANCE) {
            report.flag(&dir.join(FSR_CSV), format!("fsr row at t={t} has no testbed row within 10 ms"));
        }
    }
}

fn nearest_gap(sorted: &[f64], t: f64) -> f64 {
    let i = sorted.partition_point(|&x| x < t);
    let mut best = f64::INFINITY;
    if i < sorted.len() {
        best = best.min((sorted[i] - t).abs());
    }
    if i > 0 {
        best = best.min((t - sorted[i - 1]).abs());
    }
    best
}

/// Checks schema, headers, column counts, monotone timestamps, stream
/// alignment and manifest checksums. Reports every violation found.
pub fn validate(dir: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();
    let manifest = match read_manifest(dir) {
        Ok(m) => m,
        Err(e) => {
            report.flag(&dir.join(MANIFEST_JSON), e.to_string());
            None
        }
    };
    let dirs = match trial_dirs(dir) {
        Ok(d) => d,
        Err(e) => {
            report.flag(dir, e.to_string());
            return report;
        }
    };
    for (_, path) in &dirs {
        report.trials_checked += 1;
        check_trial(path, &mut report);
    }
    if let Some(m) = manifest {
        for entry in &m.trials {
            let tdir = dir.join(&entry.path);
            if !tdir.is_dir() {
                report.flag(&tdir, "listed in manifest but missing");
                continue;
            }
            for (name, sum) in &entry.checksums {
                let path = tdir.join(name);
                match sha256_file(&path) {
                    Ok(actual) if &actual == sum => {}
                    Ok(_) => report.flag(&path, "checksum mismatch"),
                    Err(e) => report.flag(&path, e.to_string()),
                }
            }
        }
        let listed: std::collections::HashSet<&str> = m.trials.iter().map(|e| e.trial_id.as_str()).collect();
        for (id, path) in &dirs {
            if !listed.contains(id.as_str()) && path.join(META_JSON).exists() {
                report.flag(path, "finalized trial missing from manifest");
            }
        }
        let annotated = m.annotations.iter().map(|a| &a.trial_id).collect::<std::collections::HashSet<_>>().len();
        if m.trials.len() + annotated < m.expected_trials {
            report.flag(
                &dir.join(MANIFEST_JSON),
                format!("{} trials listed, {} annotated, {} expected", m.trials.len(), annotated, m.expected_trials),
            );
        }
    }
    report
}

/// One item re-emitted by [`playback`].
#[derive(Debug, Clone, PartialEq)]
pub enum PlaybackItem {
    Frame { testbed: TestbedRow, fsr: FsrRow },
    Manipulator(ManipulatorRow),
}

impl PlaybackItem {
    pub fn t(&self) -> f64 {
        match self {
            PlaybackItem::Frame { testbed, .. } => testbed.t,
            PlaybackItem::Manipulator(m) => m.t,
        }
    }
}

/// A trial opened for playback. Unfinalized trials play their readable prefix.
#[derive(Debug, Clone)]
pub struct Playback {
    pub items: Vec<PlaybackItem>,
    pub incomplete: bool,
}

impl Playback {
    pub fn from_record(record: &TrialRecord) -> Self {
        Playback { items: merge(&record.testbed, &record.fsr, &record.manipulator), incomplete: false }
    }

    /// Opens a trial directory; `channels`/`joints` are only needed for
    /// unfinalized trials, which have no meta.json to read them from.
    pub fn open(dir: &Path, channels: usize, joints: usize) -> Result<Self, DatasetError> {
        match read_trial(dir) {
            Ok(r) => Ok(Self::from_record(&r)),
            Err(DatasetError::Incomplete(_)) => {
                let s = read_streams(dir, PARTIAL_SUFFIX, channels, joints, true)?;
                Ok(Playback { items: merge(&s.testbed, &s.fsr, &s.manipulator), incomplete: true })
            }
            Err(e) => Err(e),
        }
    }

    /// Re-emits items with the recorded spacing divided by `rate`.
    /// `rate = f64::INFINITY` emits as fast as possible.
    pub fn play(&self, rate: f64, mut sink: impl FnMut(&PlaybackItem)) {
        assert!(rate > 0.0, "playback rate must be positive");
        let Some(first) = self.items.first() else { return };
        let t0 = first.t();
        let start = Instant::now();
        for item in &self.items {
            if rate.is_finite() {
                let due = Duration::from_secs_f64(((item.t() - t0) / rate).max(0.0));
                let elapsed = start.elapsed();
                if due > elapsed {
                    thread::sleep(due - elapsed);
                }
            }
            sink(item);
        }
    }
}

fn merge(testbed: &[TestbedRow], fsr: &[FsrRow], manipulator: &[ManipulatorRow]) -> Vec<PlaybackItem> {
    let mut out = Vec::with_capacity(testbed.len() + manipulator.len());
    let mut m = manipulator.iter().peekable();
    for (tb, f) in testbed.iter().zip(fsr) {
        while let Some(row) = m.next_if(|row| row.t < tb.t) {
            out.push(PlaybackItem::Manipulator(row.clone()));
        }
        out.push(PlaybackItem::Frame { testbed: tb.clone(), fsr: f.clone() });
    }
    out.extend(m.cloned().map(PlaybackItem::Manipulator));
    out
}

/// Rebuilds stream rows from a playback item sequence.
pub fn collect_playback(items: &[PlaybackItem]) -> (Vec<TestbedRow>, Vec<FsrRow>, Vec<ManipulatorRow>) {
    let (mut tb, mut fsr, mut man) = (Vec::new(), Vec::new(), Vec::new());
    for item in items {
        match item {
            PlaybackItem::Frame { testbed, fsr: f } => {
                tb.push(testbed.clone());
                fsr.push(f.clone());
            }
            PlaybackItem::Manipulator(m) => man.push(m.clone()),
        }
    }
    (tb, fsr, man)
}

/// Default metadata for a trial; callers fill in the result and clocks.
pub fn meta_for(campaign_id: &str, spec: &TrialSpec, seed: u64) -> TrialMeta {
    TrialMeta {
        schema_version: SCHEMA_VERSION,
        campaign_id: campaign_id.to_string(),
        spec: spec.clone(),
        testbed_name: spec.testbed.name().to_string(),
        grasp_pose: [0.0; 6],
        result: TrialResult::error(),
        reason: None,
        seed,
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        origin_clock: 0.0,
        end_clock: 0.0,
        channel_count: spec.attachment.channel_count(),
        joint_count: 0,
        samples: SampleCounts { testbed: 0, fsr: 0, manipulator: 0 },
        media_refs: camera_refs(spec),
        phase_history: Vec::new(),
    }
}

/// Opaque identifiers of the rear camera streams for a trial.
pub fn camera_refs(spec: &TrialSpec) -> Vec<String> {
    ["rear-left", "rear-right"].iter().map(|cam| format!("camera/{cam}/{}.mp4", spec.trial_id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttachmentKind, TestbedKind};
    use crate::sim::FrameFlags;
    use proptest::prelude::*;

    fn spec(id: &str) -> TrialSpec {
        TrialSpec::new(id, TestbedKind::Drawer, AttachmentKind::Knob, "knob-palm", 7.0, 200.0, 0).unwrap()
    }

    fn frame(i: u64) -> SensorFrame {
        SensorFrame {
            timestamp: i as f64 * 0.01,
            seq: i,
            opening_measured: (i as f64 * 1.7).round(),
            fsr_counts: vec![i as u16, 0, 4095, 7, 300],
            resistance_setting: 7.0,
            reset_motor: ResetMotor::Idle,
            flags: FrameFlags(2),
            truth: Some(crate::sim::GroundTruth { opening: i as f64 * 1.7, velocity: 0.1 + i as f64 }),
        }
    }

    fn write_sample(dir: &Path, id: &str, frames: u64) -> TrialRecord {
        let mut w = TrialWriter::open(dir, id, 5, 2).unwrap();
        for i in 0..frames {
            w.append_frame(i as f64 * 0.01, &frame(i));
            w.append_manipulator(ManipulatorRow { t: i as f64 * 0.01, q: vec![0.1, -2.5e-7], qd: vec![1.0 / 3.0, 0.0] });
        }
        let mut meta = meta_for("c", &spec(id), 42);
        meta.result = TrialResult { label: TrialLabel::Success, peak_opening: 250.0, pull_duration: 3.25 };
        w.finalize(meta).unwrap()
    }

    #[test]
    fn hundred_frames_make_101_lines() {
        let tmp = tempfile::tempdir().unwrap();
        let rec = write_sample(tmp.path(), "t1", 100);
        let text = fs::read_to_string(tmp.path().join("trials/t1/testbed.csv")).unwrap();
        assert_eq!(text.lines().count(), 101);
        assert_eq!(text.lines().next().unwrap(), TESTBED_HEADER);
        let fsr = fs::read_to_string(tmp.path().join("trials/t1/fsr.csv")).unwrap();
        assert_eq!(fsr.lines().next().unwrap(), "t,ch00,ch01,ch02,ch03,ch04");
        let back = read_trial(&tmp.path().join("trials/t1")).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_sample(a.path(), "t1", 50);
        let rec = read_trial(&a.path().join("trials/t1")).unwrap();
        write_record(b.path(), &rec).unwrap();
        for name in STREAMS.iter().chain([&META_JSON]) {
            let x = fs::read(a.path().join("trials/t1").join(name)).unwrap();
            let y = fs::read(b.path().join("trials/t1").join(name)).unwrap();
            assert_eq!(x, y, "{name}");
        }
    }

    #[test]
    fn crash_before_finalize_is_incomplete() {
        let tmp = tempfile::tempdir().unwrap();
        write_sample(tmp.path(), "good", 10);
        let mut w = TrialWriter::open(tmp.path(), "torn", 5, 2).unwrap();
        for i in 0..10 {
            w.append_frame(i as f64 * 0.01, &frame(i));
        }
        w.close_streams();
        drop(w);
        let c = load_campaign(tmp.path()).unwrap();
        assert_eq!(c.trials.len(), 1);
        assert_eq!(c.incomplete, vec!["torn".to_string()]);
        let p = Playback::open(&tmp.path().join("trials/torn"), 5, 2).unwrap();
        assert!(p.incomplete);
        assert_eq!(p.items.iter().filter(|i| matches!(i, PlaybackItem::Frame { .. })).count(), 10);
    }

    #[test]
    fn write_failure_keeps_partial_and_labels_error() {
        let tmp = tempfile::tempdir().unwrap();
        let mut w = TrialWriter::open(tmp.path(), "bad", 5, 2).unwrap();
        w.append_frame(0.0, &frame(0));
        w.poison("No space left on device");
        w.append_frame(0.01, &frame(1));
        let mut meta = meta_for("c", &spec("bad"), 1);
        meta.result.label = TrialLabel::Success;
        let rec = w.finalize(meta).unwrap();
        assert_eq!(rec.meta.result.label, TrialLabel::Error);
        let dir = tmp.path().join("trials/bad");
        assert!(dir.join("testbed.csv.partial").exists());
        assert!(!dir.join("testbed.csv").exists());
        let back = read_trial(&dir).unwrap();
        assert_eq!(back.meta.result.label, TrialLabel::Error);
    }

    #[test]
    fn empty_directory_is_valid_and_empty() {
        let tmp = tempfile::tempdir().unwrap();
        let c = load_campaign(tmp.path()).unwrap();
        assert!(c.trials.is_empty() && c.manifest.is_none());
        assert!(validate(tmp.path()).is_clean());
    }

    #[test]
    fn corrupted_checksum_flags_only_that_file() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cs = crate::model::CampaignSpec::drawer_dataset();
        cs.id = "c".into();
        let mut store = CampaignStore::create(tmp.path(), &cs, 3).unwrap();
        for id in ["a", "b"] {
            let rec = write_sample(store.dir(), id, 20);
            store.commit(&rec).unwrap();
        }
        let dir = store.dir().to_path_buf();
        let report = validate(&dir);
        // Only the expected-count check fires: 2 of 360 trials present.
        assert_eq!(report.flagged_files(), vec![dir.join(MANIFEST_JSON)]);

        let mpath = dir.join(MANIFEST_JSON);
        let mut m: CampaignManifest = serde_json::from_slice(&fs::read(&mpath).unwrap()).unwrap();
        m.expected_trials = 2;
        let sum = m.trials[1].checksums.get_mut(FSR_CSV).unwrap();
        *sum = sum.replace(&sum[..1], if sum.starts_with('0') { "1" } else { "0" });
        fs::write(&mpath, serde_json::to_vec_pretty(&m).unwrap()).unwrap();
        let report = validate(&dir);
        assert_eq!(report.flagged_files(), vec![dir.join("trials/b").join(FSR_CSV)]);
    }

    #[test]
    fn validate_reports_all_violations() {
        let tmp = tempfile::tempdir().unwrap();
        write_sample(tmp.path(), "t1", 10);
        let d = tmp.path().join("trials/t1");
        let tb = fs::read_to_string(d.join(TESTBED_CSV)).unwrap().replace("0.05,", "0.5,");
        fs::write(d.join(TESTBED_CSV), tb).unwrap();
        let f = fs::read_to_string(d.join(FSR_CSV)).unwrap().replacen(",4095,", ",4095,1,", 1);
        fs::write(d.join(FSR_CSV), f).unwrap();
        let report = validate(tmp.path());
        let files = report.flagged_files();
        assert!(files.contains(&d.join(TESTBED_CSV)), "{report:?}");
        assert!(files.contains(&d.join(FSR_CSV)), "{report:?}");
    }

    #[test]
    fn unknown_schema_version_is_explicit() {
        let tmp = tempfile::tempdir().unwrap();
        write_sample(tmp.path(), "t1", 3);
        let p = tmp.path().join("trials/t1/meta.json");
        let text = fs::read_to_string(&p).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 7");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_trial(&tmp.path().join("trials/t1")), Err(DatasetError::SchemaVersion { found: 7, .. })));
    }

    #[test]
    fn fast_playback_preserves_order_and_payloads() {
        let tmp = tempfile::tempdir().unwrap();
        let rec = write_sample(tmp.path(), "t1", 30);
        let p = Playback::from_record(&rec);
        let mut seen = Vec::new();
        p.play(f64::INFINITY, |i| seen.push(i.clone()));
        let (tb, fsr, man) = collect_playback(&seen);
        assert_eq!((tb, fsr, man), (rec.testbed, rec.fsr, rec.manipulator));
        assert!(seen.windows(2).all(|w| w[1].t() >= w[0].t()));
    }

    proptest! {
        #[test]
        fn float_rows_round_trip(t in 0.0f64..1e4, x in proptest::num::f64::NORMAL | proptest::num::f64::ZERO) {
            let row = TestbedRow { t, opening: Some(x), opening_measured: x, velocity: None, resistance: 0.0, reset_motor: ResetMotor::WindingIn, flags: 7 };
            let line = row.to_line();
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            let back = TestbedRow::parse(&fields).unwrap();
            prop_assert_eq!(back.to_line(), line);
            prop_assert_eq!(back, row);
        }
    }
}
