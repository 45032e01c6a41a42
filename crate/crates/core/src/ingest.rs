//! Parsers for the five raw telemetry log streams and per-user trace assembly.
//!
//! All logs are line-oriented comma-separated text with a mandatory header,
//! UTF-8, LF or CRLF line endings. Lines starting with `#` are comments.
//! Files ending in `.gz` are transparently decompressed.
//!
//! Malformed lines are collected with their line numbers rather than
//! aborting the parse; parsing fails hard only when the malformed-line rate
//! exceeds a configurable cap (default 1%), which turns systemic corruption
//! into an error instead of silent data loss.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use thiserror::Error;

pub const BATTERY_HEADER: &str = "user_id,timestamp,charge_state,level";
pub const SCREEN_HEADER: &str = "user_id,timestamp,action";
pub const BROADCAST_HEADER: &str = "user_id,timestamp,broadcast_type";
pub const APP_HEADER: &str = "user_id,timestamp,app_id,state";

/// Default number of broadcast types in the vocabulary.
pub const DEFAULT_BROADCAST_TYPES: u32 = 86;
/// Sensor group T1 width.
pub const T1_WIDTH: usize = 9;
/// Sensor group T2 width.
pub const T2_WIDTH: usize = 150;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ChargeState {
    Charge,
    Discharge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScreenAction {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppState {
    Foreground,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensorGroup {
    T1,
    T2,
}

impl SensorGroup {
    pub fn width(self) -> usize {
        match self {
            SensorGroup::T1 => T1_WIDTH,
            SensorGroup::T2 => T2_WIDTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatteryEntry {
    pub user_id: String,
    pub timestamp: i64,
    pub state: ChargeState,
    pub level: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScreenEvent {
    pub user_id: String,
    pub timestamp: i64,
    pub action: ScreenAction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BroadcastEvent {
    pub user_id: String,
    pub timestamp: i64,
    /// In `[0, n_types]`; the value `n_types` is the reserved "other" bucket
    /// for ids outside the configured vocabulary.
    pub broadcast_type: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppSample {
    pub user_id: String,
    pub timestamp: i64,
    pub app_id: String,
    pub state: AppState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorSample {
    pub user_id: String,
    pub timestamp: i64,
    pub group: SensorGroup,
    /// Fixed-length vector; `None` marks a missing slot. No imputation here.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineErrorKind {
    FieldCount,
    BadTimestamp,
    BadLevel,
    BadState,
    BadValue,
    WidthMismatch,
}

/// One malformed line, reported with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub kind: LineErrorKind,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing or wrong header: expected `{expected}`, got `{got}`")]
    MissingHeader { expected: String, got: String },
    #[error("malformed-line rate {rate:.4} exceeds cap {cap:.4} ({errors} of {lines} lines)")]
    ErrorRateExceeded {
        rate: f64,
        cap: f64,
        errors: usize,
        lines: usize,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-stream parse outcome: records in file order plus the error report.
#[derive(Debug)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub errors: Vec<LineError>,
    /// Broadcast ids outside the vocabulary that were mapped to the
    /// reserved "other" bucket.
    pub other_broadcasts: usize,
}

impl<T> Parsed<T> {
    fn new() -> Self {
        Parsed {
            records: Vec::new(),
            errors: Vec::new(),
            other_broadcasts: 0,
        }
    }
}

/// Options shared by all parsers.
#[derive(Debug, Clone)]
pub struct ParseOptions {
    /// Hard-failure cap on the fraction of malformed data lines.
    pub error_rate_cap: f64,
    /// Broadcast vocabulary size; ids at or above map to the "other" bucket.
    pub n_broadcast_types: u32,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            error_rate_cap: 0.01,
            n_broadcast_types: DEFAULT_BROADCAST_TYPES,
        }
    }
}

/// Opens a log file, decompressing when the name ends in `.gz`.
pub fn open_log(path: &Path) -> std::io::Result<Box<dyn BufRead>> {
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(BufReader::new(flate2::read::MultiGzDecoder::new(
            file,
        ))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Line-by-line driver: checks the header, strips comments and blank lines,
/// and feeds data lines to `handle`. `handle` returns `Ok(true)` when the
/// line produced a record, or `Err(kind)` when it is malformed.
fn drive<R: Read, F>(reader: R, expected_header: &str, mut handle: F) -> Result<Vec<LineError>, IngestError>
where
    F: FnMut(usize, &str) -> Result<(), LineErrorKind>,
{
    let mut lines = BufReader::new(reader).lines();
    let mut lineno = 0usize;
    let header = loop {
        match lines.next() {
            None => {
                return Err(IngestError::MissingHeader {
                    expected: expected_header.to_string(),
                    got: String::new(),
                })
            }
            Some(line) => {
                lineno += 1;
                let line = line?;
                let t = line.trim_end_matches('\r');
                if t.starts_with('#') || t.is_empty() {
                    continue;
                }
                break t.to_string();
            }
        }
    };
    if header != expected_header {
        return Err(IngestError::MissingHeader {
            expected: expected_header.to_string(),
            got: header,
        });
    }
    let mut errors = Vec::new();
    for line in lines {
        lineno += 1;
        let line = line?;
        let t = line.trim_end_matches('\r');
        if t.starts_with('#') || t.is_empty() {
            continue;
        }
        if let Err(kind) = handle(lineno, t) {
            errors.push(LineError { line: lineno, kind });
        }
    }
    Ok(errors)
}

fn check_rate(errors: Vec<LineError>, records: usize, cap: f64) -> Result<Vec<LineError>, IngestError> {
    let lines = records + errors.len();
    if lines > 0 {
        let rate = errors.len() as f64 / lines as f64;
        if rate > cap {
            return Err(IngestError::ErrorRateExceeded {
                rate,
                cap,
                errors: errors.len(),
                lines,
            });
        }
    }
    Ok(errors)
}

fn parse_timestamp(s: &str) -> Result<i64, LineErrorKind> {
    match s.parse::<i64>() {
        Ok(t) if t > 0 => Ok(t),
        _ => Err(LineErrorKind::BadTimestamp),
    }
}

/// Parses a battery log: `user_id,timestamp,charge_state,level`.
///
/// Charge states other than `charge`/`discharge` (e.g. `full`) map to
/// `Charge`; only the discharge / not-discharge distinction is used
/// downstream.
pub fn parse_battery_log<R: Read>(reader: R, opts: &ParseOptions) -> Result<Parsed<BatteryEntry>, IngestError> {
    let mut out = Parsed::new();
    let errors = drive(reader, BATTERY_HEADER, |_, line| {
        let mut f = line.split(',');
        let (user, ts, state, level) = match (f.next(), f.next(), f.next(), f.next(), f.next()) {
            (Some(a), Some(b), Some(c), Some(d), None) => (a, b, c, d),
            _ => return Err(LineErrorKind::FieldCount),
        };
        let timestamp = parse_timestamp(ts)?;
        let state = match state {
            "" => return Err(LineErrorKind::BadState),
            "discharge" => ChargeState::Discharge,
            _ => ChargeState::Charge,
        };
        let level: u8 = match level.parse::<u8>() {
            Ok(l) if l <= 100 => l,
            _ => return Err(LineErrorKind::BadLevel),
        };
        out.records.push(BatteryEntry {
            user_id: user.to_string(),
            timestamp,
            state,
            level,
        });
        Ok(())
    })?;
    out.errors = check_rate(errors, out.records.len(), opts.error_rate_cap)?;
    Ok(out)
}

/// Parses a screen event log: `user_id,timestamp,action` with `on`/`off`.
pub fn parse_screen_log<R: Read>(reader: R, opts: &ParseOptions) -> Result<Parsed<ScreenEvent>, IngestError> {
    let mut out = Parsed::new();
    let errors = drive(reader, SCREEN_HEADER, |_, line| {
        let mut f = line.split(',');
        let (user, ts, action) = match (f.next(), f.next(), f.next(), f.next()) {
            (Some(a), Some(b), Some(c), None) => (a, b, c),
            _ => return Err(LineErrorKind::FieldCount),
        };
        let timestamp = parse_timestamp(ts)?;
        let action = match action {
            "on" => ScreenAction::On,
            "off" => ScreenAction::Off,
            _ => return Err(LineErrorKind::BadState),
        };
        out.records.push(ScreenEvent {
            user_id: user.to_string(),
            timestamp,
            action,
        });
        Ok(())
    })?;
    out.errors = check_rate(errors, out.records.len(), opts.error_rate_cap)?;
    Ok(out)
}

/// Parses a broadcast log: `user_id,timestamp,broadcast_type`. Ids outside
/// `[0, n_broadcast_types)` map to the reserved "other" bucket (the value
/// `n_broadcast_types`) and are counted in `other_broadcasts`.
pub fn parse_broadcast_log<R: Read>(reader: R, opts: &ParseOptions) -> Result<Parsed<BroadcastEvent>, IngestError> {
    let mut out = Parsed::new();
    let n_types = opts.n_broadcast_types;
    let mut other = 0usize;
    let errors = drive(reader, BROADCAST_HEADER, |_, line| {
        let mut f = line.split(',');
        let (user, ts, ty) = match (f.next(), f.next(), f.next(), f.next()) {
            (Some(a), Some(b), Some(c), None) => (a, b, c),
            _ => return Err(LineErrorKind::FieldCount),
        };
        let timestamp = parse_timestamp(ts)?;
        let ty: u32 = ty.parse().map_err(|_| LineErrorKind::BadValue)?;
        let broadcast_type = if ty < n_types {
            ty
        } else {
            other += 1;
            n_types
        };
        out.records.push(BroadcastEvent {
            user_id: user.to_string(),
            timestamp,
            broadcast_type,
        });
        Ok(())
    })?;
    out.other_broadcasts = other;
    out.errors = check_rate(errors, out.records.len(), opts.error_rate_cap)?;
    Ok(out)
}

/// Parses an app sample log: `user_id,timestamp,app_id,state` with
/// `foreground`/`background`.
pub fn parse_app_log<R: Read>(reader: R, opts: &ParseOptions) -> Result<Parsed<AppSample>, IngestError> {
    let mut out = Parsed::new();
    let errors = drive(reader, APP_HEADER, |_, line| {
        let mut f = line.split(',');
        let (user, ts, app, state) = match (f.next(), f.next(), f.next(), f.next(), f.next()) {
            (Some(a), Some(b), Some(c), Some(d), None) => (a, b, c, d),
            _ => return Err(LineErrorKind::FieldCount),
        };
        let timestamp = parse_timestamp(ts)?;
        let state = match state {
            "foreground" => AppState::Foreground,
            "background" => AppState::Background,
            _ => return Err(LineErrorKind::BadState),
        };
        out.records.push(AppSample {
            user_id: user.to_string(),
            timestamp,
            app_id: app.to_string(),
            state,
        });
        Ok(())
    })?;
    out.errors = check_rate(errors, out.records.len(), opts.error_rate_cap)?;
    Ok(out)
}

/// Header for a sensor log of the given group: `user_id,timestamp,s1..sK`.
pub fn sensor_header(group: SensorGroup) -> String {
    let mut h = String::from("user_id,timestamp");
    for i in 1..=group.width() {
        h.push_str(&format!(",s{i}"));
    }
    h
}

/// Parses a sensor log. Empty cells mean missing; rows whose cell count
/// differs from the group width are `WidthMismatch` errors.
pub fn parse_sensor_log<R: Read>(
    reader: R,
    group: SensorGroup,
    opts: &ParseOptions,
) -> Result<Parsed<SensorSample>, IngestError> {
    let mut out = Parsed::new();
    let width = group.width();
    let header = sensor_header(group);
    let errors = drive(reader, &header, |_, line| {
        let mut f = line.split(',');
        let user = f.next().ok_or(LineErrorKind::FieldCount)?;
        let ts = f.next().ok_or(LineErrorKind::FieldCount)?;
        let timestamp = parse_timestamp(ts)?;
        let mut values = Vec::with_capacity(width);
        for cell in f {
            if cell.is_empty() {
                values.push(None);
            } else {
                values.push(Some(cell.parse::<f64>().map_err(|_| LineErrorKind::BadValue)?));
            }
        }
        if values.len() != width {
            return Err(LineErrorKind::WidthMismatch);
        }
        out.records.push(SensorSample {
            user_id: user.to_string(),
            timestamp,
            group,
            values,
        });
        Ok(())
    })?;
    out.errors = check_rate(errors, out.records.len(), opts.error_rate_cap)?;
    Ok(out)
}

/// Anything carrying an epoch-seconds timestamp.
pub trait Timestamped {
    fn ts(&self) -> i64;
}

macro_rules! impl_ts {
    ($($t:ty),*) => {$(
        impl Timestamped for $t {
            fn ts(&self) -> i64 {
                self.timestamp
            }
        }
    )*};
}
impl_ts!(BatteryEntry, ScreenEvent, BroadcastEvent, AppSample, SensorSample);

/// Returns the sub-slice of a time-sorted stream with `a <= timestamp <= b`.
pub fn range<T: Timestamped>(stream: &[T], a: i64, b: i64) -> &[T] {
    let lo = stream.partition_point(|r| r.ts() < a);
    let hi = stream.partition_point(|r| r.ts() <= b);
    &stream[lo..hi.max(lo)]
}

/// Time-sorted, per-user merge of all five streams. Immutable after
/// construction.
#[derive(Debug, Clone, Default)]
pub struct UserTrace {
    pub user_id: String,
    pub battery: Vec<BatteryEntry>,
    pub screen: Vec<ScreenEvent>,
    pub broadcast: Vec<BroadcastEvent>,
    pub app: Vec<AppSample>,
    pub sensor_t1: Vec<SensorSample>,
    pub sensor_t2: Vec<SensorSample>,
}

fn normalize<T: Timestamped + Clone + PartialEq>(mut v: Vec<T>) -> Vec<T> {
    v.sort_by_key(|r| r.ts());
    v.dedup();
    v
}

/// Builds per-user traces from (possibly unsorted, interleaved) parser
/// output. Streams are stably sorted by timestamp, exact duplicate records
/// dropped, and consecutive duplicate screen actions collapsed to the first.
pub fn build_user_trace(
    battery: Vec<BatteryEntry>,
    screen: Vec<ScreenEvent>,
    broadcast: Vec<BroadcastEvent>,
    app: Vec<AppSample>,
    sensors: Vec<SensorSample>,
) -> BTreeMap<String, UserTrace> {
    let mut traces: BTreeMap<String, UserTrace> = BTreeMap::new();
    for r in battery {
        traces.entry(r.user_id.clone()).or_default().battery.push(r);
    }
    for r in screen {
        traces.entry(r.user_id.clone()).or_default().screen.push(r);
    }
    for r in broadcast {
        traces.entry(r.user_id.clone()).or_default().broadcast.push(r);
    }
    for r in app {
        traces.entry(r.user_id.clone()).or_default().app.push(r);
    }
    for r in sensors {
        let t = traces.entry(r.user_id.clone()).or_default();
        match r.group {
            SensorGroup::T1 => t.sensor_t1.push(r),
            SensorGroup::T2 => t.sensor_t2.push(r),
        }
    }
    for (user, t) in traces.iter_mut() {
        t.user_id = user.clone();
        t.battery = normalize(std::mem::take(&mut t.battery));
        t.screen = normalize(std::mem::take(&mut t.screen));
        // Collapse runs of the same screen action to the first event.
        t.screen.dedup_by(|b, a| a.action == b.action);
        t.broadcast = normalize(std::mem::take(&mut t.broadcast));
        t.app = normalize(std::mem::take(&mut t.app));
        t.sensor_t1 = normalize(std::mem::take(&mut t.sensor_t1));
        t.sensor_t2 = normalize(std::mem::take(&mut t.sensor_t2));
    }
    traces
}
