//! Seeded synthetic telemetry worlds in the exact ingestion formats.
//!
//! Each user is simulated as a piecewise-linear battery process: a set of
//! regimes fixes the discharge rate (%/min), screen-on probability, app/
//! broadcast intensity, and sensor levels; the active regime either follows a
//! per-minute Markov transition matrix or a fixed time-of-day schedule. The
//! device charges when the level falls to a threshold (and optionally during
//! a daily charging window) and discharges otherwise.
//!
//! Battery is integer-percent in the emitted logs, but the manifest records
//! every 1%-crossing time exactly, which makes `true_remaining_life` a
//! sharper oracle than anything recoverable from the quantized samples.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::ingest::{
    sensor_header, SensorGroup, APP_HEADER, BATTERY_HEADER, BROADCAST_HEADER, SCREEN_HEADER,
};
use crate::rng::derived_rng;

#[derive(Debug, Clone)]
pub struct Regime {
    pub name: String,
    /// Discharge rate in percent per minute.
    pub rate: f64,
    pub screen_on_prob: f64,
    /// Expected app samples per minute; also drives broadcast emission.
    pub app_intensity: f64,
    /// Base sensor levels, cycled across the T1/T2 slots.
    pub sensor_means: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RegimeModel {
    pub regimes: Vec<Regime>,
    /// Row-stochastic per-minute transition matrix; ignored when a schedule
    /// is present.
    pub transition: Vec<Vec<f64>>,
    /// Hour-of-day → regime index; fixes the regime deterministically.
    pub schedule: Option<[usize; 24]>,
}

impl RegimeModel {
    /// A single always-on regime; the smallest valid model.
    pub fn constant(regime: Regime) -> Self {
        RegimeModel {
            regimes: vec![regime],
            transition: vec![vec![1.0]],
            schedule: None,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let k = self.regimes.len();
        if k == 0 {
            return Err(SynthError::ConfigInvalid {
                detail: "at least one regime is required".into(),
            });
        }
        for r in &self.regimes {
            if !(r.rate > 0.0) {
                return Err(SynthError::ConfigInvalid {
                    detail: format!("regime {:?} has non-positive rate {}", r.name, r.rate),
                });
            }
            if !(0.0..=1.0).contains(&r.screen_on_prob) || r.app_intensity < 0.0 {
                return Err(SynthError::ConfigInvalid {
                    detail: format!("regime {:?} has out-of-range probabilities", r.name),
                });
            }
            if r.sensor_means.is_empty() {
                return Err(SynthError::ConfigInvalid {
                    detail: format!("regime {:?} has no sensor means", r.name),
                });
            }
        }
        if self.transition.len() != k {
            return Err(SynthError::ConfigInvalid {
                detail: "transition matrix must have one row per regime".into(),
            });
        }
        for row in &self.transition {
            if row.len() != k || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(SynthError::ConfigInvalid {
                    detail: "transition rows must be length-k and sum to 1".into(),
                });
            }
        }
        if let Some(schedule) = &self.schedule {
            if schedule.iter().any(|&r| r >= k) {
                return Err(SynthError::ConfigInvalid {
                    detail: "schedule references a missing regime".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_users: usize,
    pub days: u32,
    pub battery_period_secs: i64,
    pub t2_period_secs: i64,
    pub t1_period_secs: i64,
    /// Start charging when the level falls to this value.
    pub charge_threshold: u8,
    /// Charging rate in percent per minute.
    pub charge_rate: f64,
    /// Daily charging window `[start_hour, end_hour)`; the device charges to
    /// full and then idles until the window closes.
    pub charge_hours: Option<(u8, u8)>,
    pub start_level: u8,
    /// Epoch-seconds of the world's first sample; midnight-aligned keeps the
    /// schedule hours readable.
    pub base_timestamp: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 3,
            days: 2,
            battery_period_secs: 5,
            t2_period_secs: 15,
            t1_period_secs: 60,
            charge_threshold: 10,
            charge_rate: 3.0,
            charge_hours: None,
            start_level: 100,
            // 2021-01-01 00:00:00 UTC.
            base_timestamp: 1_609_459_200,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let positive = [
            ("battery_period_secs", self.battery_period_secs),
            ("t2_period_secs", self.t2_period_secs),
            ("t1_period_secs", self.t1_period_secs),
        ];
        for (name, v) in positive {
            if v <= 0 {
                return Err(SynthError::ConfigInvalid {
                    detail: format!("{name} must be positive, got {v}"),
                });
            }
        }
        if self.n_users == 0 || self.days == 0 {
            return Err(SynthError::ConfigInvalid {
                detail: "n_users and days must be positive".into(),
            });
        }
        if self.start_level > 100 || self.charge_threshold >= self.start_level {
            return Err(SynthError::ConfigInvalid {
                detail: format!(
                    "need charge_threshold < start_level ≤ 100, got {} and {}",
                    self.charge_threshold, self.start_level
                ),
            });
        }
        if !(self.charge_rate > 0.0) {
            return Err(SynthError::ConfigInvalid {
                detail: "charge_rate must be positive".into(),
            });
        }
        if let Some((a, b)) = self.charge_hours {
            if a >= b || b > 24 {
                return Err(SynthError::ConfigInvalid {
                    detail: format!("charge window must satisfy start < end ≤ 24, got {a}..{b}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {detail}")]
    ConfigInvalid { detail: String },
    #[error("user {user:?} is not in the manifest")]
    UnknownUser { user: String },
    #[error("t={t} is not inside a discharge interval for user {user:?}")]
    OutsideDischarge { user: String, t: f64 },
    #[error("manifest line {line} is malformed: {detail}")]
    ManifestFormat { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Regime,
    ChargeOn,
    ChargeOff,
    Crossing,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Regime => "regime",
            EventKind::ChargeOn => "charge_on",
            EventKind::ChargeOff => "charge_off",
            EventKind::Crossing => "crossing",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEvent {
    pub user_id: String,
    /// Seconds; crossing times are exact, not grid-quantized.
    pub t: f64,
    pub event: EventKind,
    /// Regime name, crossed level, or empty.
    pub detail: String,
}

/// Ground truth for one generated world: per-user event streams in time
/// order, users in id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub events: Vec<ManifestEvent>,
}

impl Manifest {
    pub fn save<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "user_id,t,event,detail")?;
        for e in &self.events {
            writeln!(w, "{},{},{},{}", e.user_id, e.t, e.event.as_str(), e.detail)?;
        }
        Ok(())
    }

    pub fn load<R: std::io::Read>(reader: R) -> Result<Self, SynthError> {
        let mut events = Vec::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line.trim_end() != "user_id,t,event,detail" {
                    return Err(SynthError::ManifestFormat {
                        line: 1,
                        detail: "missing manifest header".into(),
                    });
                }
                continue;
            }
            let bad = |detail: &str| SynthError::ManifestFormat {
                line: i + 1,
                detail: detail.into(),
            };
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            if fields.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let event = match fields[2] {
                "regime" => EventKind::Regime,
                "charge_on" => EventKind::ChargeOn,
                "charge_off" => EventKind::ChargeOff,
                "crossing" => EventKind::Crossing,
                other => return Err(bad(&format!("unknown event {other:?}"))),
            };
            events.push(ManifestEvent {
                user_id: fields[0].to_string(),
                t: fields[1].parse().map_err(|_| bad("bad time"))?,
                event,
                detail: fields[3].to_string(),
            });
        }
        Ok(Manifest { events })
    }

    fn user_events(&self, user: &str) -> impl Iterator<Item = &ManifestEvent> {
        let user = user.to_string();
        self.events.iter().filter(move |e| e.user_id == user)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LifeOutcome {
    Minutes(f64),
    /// Charging (or the end of the generated world) arrives before the
    /// threshold crossing.
    CensoredByCharge,
}

/// Exact minutes from `t` until the user's battery crosses `level`, from the
/// ground-truth process. `t` must lie in a discharge interval that has not
/// yet crossed `level`; the crossing instant itself reports 0 minutes.
pub fn true_remaining_life(
    manifest: &Manifest,
    user: &str,
    t: f64,
    level: u8,
) -> Result<LifeOutcome, SynthError> {
    let mut seen = false;
    let mut charging = false;
    let mut crossed_already = false;
    // First establish the state at time t from the events up to it.
    for e in manifest.user_events(user).filter(|e| e.t <= t) {
        seen = true;
        match e.event {
            EventKind::ChargeOn => charging = true,
            EventKind::ChargeOff => {
                charging = false;
                crossed_already = false;
            }
            // A crossing at or below the target means t is already past the
            // event this oracle measures.
            EventKind::Crossing => {
                if e.t == t && e.detail.parse::<u8>().ok() == Some(level) {
                    return Ok(LifeOutcome::Minutes(0.0));
                }
                if e.detail.parse::<u8>().ok().is_some_and(|l| l <= level) {
                    crossed_already = true;
                }
            }
            EventKind::Regime => {}
        }
    }
    if !seen && manifest.user_events(user).next().is_none() {
        return Err(SynthError::UnknownUser { user: user.into() });
    }
    if charging || crossed_already {
        return Err(SynthError::OutsideDischarge { user: user.into(), t });
    }
    // Then scan forward for the target crossing or intervening charge.
    for e in manifest.user_events(user).filter(|e| e.t > t) {
        match e.event {
            EventKind::Crossing if e.detail.parse::<u8>().ok() == Some(level) => {
                return Ok(LifeOutcome::Minutes((e.t - t) / 60.0));
            }
            EventKind::ChargeOn => return Ok(LifeOutcome::CensoredByCharge),
            _ => {}
        }
    }
    // The generated world ended first; treated the same as a charge.
    Ok(LifeOutcome::CensoredByCharge)
}

struct Writers {
    battery: BufWriter<File>,
    screen: BufWriter<File>,
    broadcast: BufWriter<File>,
    app: BufWriter<File>,
    t1: BufWriter<File>,
    t2: BufWriter<File>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PowerState {
    Discharging,
    /// `scheduled` charging holds at 100% until the window closes;
    /// threshold-triggered charging stops at full.
    Charging { scheduled: bool },
}

struct UserSim<'a> {
    user: String,
    cfg: &'a SynthConfig,
    model: &'a RegimeModel,
    rng: ChaCha12Rng,
    level: f64,
    state: PowerState,
    regime: usize,
    screen_on: bool,
    next_battery: i64,
    events: Vec<ManifestEvent>,
}

impl UserSim<'_> {
    fn push(&mut self, t: f64, event: EventKind, detail: String) {
        self.events.push(ManifestEvent {
            user_id: self.user.clone(),
            t,
            event,
            detail,
        });
    }

    fn charge_state_str(&self) -> &'static str {
        match self.state {
            PowerState::Discharging => "discharge",
            PowerState::Charging { .. } => "charge",
        }
    }

    /// Emits 5-second-grid battery samples in `[from, to)`; the level is
    /// linear over the span, starting at `level_at_from` with `slope` %/sec.
    fn emit_battery(
        &mut self,
        w: &mut Writers,
        from: f64,
        to: f64,
        level_at_from: f64,
        slope: f64,
    ) -> std::io::Result<()> {
        while (self.next_battery as f64) < to {
            let ts = self.next_battery;
            let level = (level_at_from + slope * (ts as f64 - from)).floor().clamp(0.0, 100.0);
            writeln!(
                w.battery,
                "{},{},{},{}",
                self.user,
                ts,
                self.charge_state_str(),
                level as u8
            )?;
            self.next_battery += self.cfg.battery_period_secs;
        }
        Ok(())
    }

    /// Advances the battery process across one minute starting at `t_min`.
    fn advance_minute(&mut self, w: &mut Writers, t_min: i64) -> std::io::Result<()> {
        let minute_end = (t_min + 60) as f64;
        let mut cursor = t_min as f64;
        while cursor < minute_end {
            match self.state {
                PowerState::Discharging => {
                    let slope = -self.model.regimes[self.regime].rate / 60.0;
                    // Next whole percent below the current level.
                    let target = if self.level == self.level.floor() {
                        self.level - 1.0
                    } else {
                        self.level.floor()
                    };
                    let t_target = cursor + (self.level - target) / -slope;
                    let t_end = t_target.min(minute_end);
                    self.emit_battery(w, cursor, t_end, self.level, slope)?;
                    self.level += slope * (t_end - cursor);
                    cursor = t_end;
                    if t_end == t_target {
                        self.level = target; // kill accumulated roundoff
                        self.push(t_target, EventKind::Crossing, format!("{}", target as u8));
                        if target as u8 <= self.cfg.charge_threshold {
                            self.push(t_target, EventKind::ChargeOn, String::new());
                            self.state = PowerState::Charging { scheduled: false };
                        }
                    }
                }
                PowerState::Charging { scheduled } => {
                    if self.level >= 100.0 {
                        if scheduled {
                            // Idle at full until the window closes.
                            self.emit_battery(w, cursor, minute_end, 100.0, 0.0)?;
                            cursor = minute_end;
                        } else {
                            self.push(cursor, EventKind::ChargeOff, String::new());
                            self.state = PowerState::Discharging;
                        }
                    } else {
                        let slope = self.cfg.charge_rate / 60.0;
                        let t_full = cursor + (100.0 - self.level) / slope;
                        let t_end = t_full.min(minute_end);
                        self.emit_battery(w, cursor, t_end, self.level, slope)?;
                        self.level += slope * (t_end - cursor);
                        cursor = t_end;
                        if t_end == t_full {
                            self.level = 100.0;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn run(&mut self, w: &mut Writers) -> std::io::Result<()> {
        let minutes = self.cfg.days as i64 * 1440;
        self.push(
            self.cfg.base_timestamp as f64,
            EventKind::Regime,
            self.model.regimes[self.regime].name.clone(),
        );
        for minute in 0..minutes {
            let t_min = self.cfg.base_timestamp + minute * 60;
            let hour = (t_min.rem_euclid(86_400) / 3_600) as u8;
            // Regime for this minute: scheduled, or one Markov step.
            let next = match &self.model.schedule {
                Some(schedule) => schedule[hour as usize],
                None => {
                    let row = &self.model.transition[self.regime];
                    let draw: f64 = self.rng.random();
                    let mut acc = 0.0;
                    let mut chosen = row.len() - 1;
                    for (i, p) in row.iter().enumerate() {
                        acc += p;
                        if draw < acc {
                            chosen = i;
                            break;
                        }
                    }
                    chosen
                }
            };
            if next != self.regime {
                self.regime = next;
                self.push(
                    t_min as f64,
                    EventKind::Regime,
                    self.model.regimes[next].name.clone(),
                );
            }
            let regime = &self.model.regimes[self.regime];

            // Scheduled charging window boundaries.
            if let Some((start, end)) = self.cfg.charge_hours {
                let in_window = hour >= start && hour < end;
                match (in_window, self.state) {
                    (true, PowerState::Discharging) => {
                        self.push(t_min as f64, EventKind::ChargeOn, String::new());
                        self.state = PowerState::Charging { scheduled: true };
                    }
                    (false, PowerState::Charging { scheduled: true }) => {
                        self.push(t_min as f64, EventKind::ChargeOff, String::new());
                        self.state = PowerState::Discharging;
                    }
                    _ => {}
                }
            }

            // Screen toggles once per minute at most.
            let want_on = self.rng.random::<f64>() < regime.screen_on_prob;
            if want_on != self.screen_on {
                self.screen_on = want_on;
                writeln!(
                    w.screen,
                    "{},{},{}",
                    self.user,
                    t_min,
                    if want_on { "on" } else { "off" }
                )?;
            }

            // App and broadcast activity, conditionally independent given
            // the regime.
            if self.rng.random::<f64>() < regime.app_intensity.min(1.0) {
                let app = self.rng.random_range(0..8u32);
                let state = if self.rng.random::<f64>() < 0.8 {
                    "foreground"
                } else {
                    "background"
                };
                writeln!(w.app, "{},{},app{:02},{}", self.user, t_min, app, state)?;
            }
            if self.rng.random::<f64>() < (regime.app_intensity * 0.7).min(1.0) {
                let ty = self.rng.random_range(0..20u32);
                writeln!(w.broadcast, "{},{},{}", self.user, t_min, ty)?;
            }

            // Sensor rows on their own grids.
            for group in [SensorGroup::T1, SensorGroup::T2] {
                let (period, file) = match group {
                    SensorGroup::T1 => (self.cfg.t1_period_secs, &mut w.t1),
                    SensorGroup::T2 => (self.cfg.t2_period_secs, &mut w.t2),
                };
                let mut ts = t_min;
                while ts < t_min + 60 {
                    if (ts - self.cfg.base_timestamp) % period == 0 {
                        write!(file, "{},{}", self.user, ts)?;
                        for slot in 0..group.width() {
                            let mean = regime.sensor_means[slot % regime.sensor_means.len()];
                            let noise = self.rng.random::<f64>() - 0.5;
                            write!(file, ",{:.3}", mean + noise)?;
                        }
                        writeln!(file)?;
                    }
                    ts += period.min(60);
                }
            }

            self.advance_minute(w, t_min)?;
        }
        Ok(())
    }
}

/// Simulates every user and writes the five ingestion files plus
/// `manifest.csv` into `out_dir`. Users are generated and written in id
/// order from per-user derived seeds, so output is byte-identical for a
/// given config.
pub fn generate_world(
    cfg: &SynthConfig,
    model: &RegimeModel,
    out_dir: &Path,
) -> Result<Manifest, SynthError> {
    cfg.validate()?;
    model.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let open = |name: &str, header: &str| -> Result<BufWriter<File>, SynthError> {
        let mut w = BufWriter::new(File::create(out_dir.join(name))?);
        writeln!(w, "{header}")?;
        Ok(w)
    };
    let mut writers = Writers {
        battery: open("battery.csv", BATTERY_HEADER)?,
        screen: open("screen.csv", SCREEN_HEADER)?,
        broadcast: open("broadcast.csv", BROADCAST_HEADER)?,
        app: open("app.csv", APP_HEADER)?,
        t1: open("t1.csv", &sensor_header(SensorGroup::T1))?,
        t2: open("t2.csv", &sensor_header(SensorGroup::T2))?,
    };
    let mut manifest = Manifest::default();
    for u in 0..cfg.n_users {
        let start_regime = match &model.schedule {
            Some(schedule) => {
                schedule[(cfg.base_timestamp.rem_euclid(86_400) / 3_600) as usize]
            }
            None => 0,
        };
        let mut sim = UserSim {
            user: format!("u{u:03}"),
            cfg,
            model,
            rng: derived_rng(cfg.seed, "synth-user", u as u64),
            level: cfg.start_level as f64,
            state: PowerState::Discharging,
            regime: start_regime,
            screen_on: false,
            next_battery: cfg.base_timestamp,
            events: Vec::new(),
        };
        sim.run(&mut writers)?;
        manifest.events.append(&mut sim.events);
    }
    for w in [
        &mut writers.battery,
        &mut writers.screen,
        &mut writers.broadcast,
        &mut writers.app,
        &mut writers.t1,
        &mut writers.t2,
    ] {
        w.flush()?;
    }
    let mut mw = BufWriter::new(File::create(out_dir.join("manifest.csv"))?);
    manifest.save(&mut mw)?;
    mw.flush()?;
    Ok(manifest)
}
