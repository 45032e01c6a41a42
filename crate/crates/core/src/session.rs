//! Discharge session segmentation, labeling, and descriptive distributions.
//!
//! A session is a maximal run of discharge entries in which consecutive
//! entries are at most `gap_threshold` apart and the level never rises.
//! Each filtered session is labeled observed (the level reaches threshold
//! `L` within it) or censored (it ends above `L`).

use std::io::Write;

use thiserror::Error;

use crate::ingest::{BatteryEntry, ChargeState, UserTrace};

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub user_id: String,
    pub t_start: i64,
    pub t_end: i64,
    /// Sorted discharge entries; levels non-increasing.
    pub entries: Vec<BatteryEntry>,
    pub b_start: u8,
    pub b_end: u8,
}

impl Session {
    pub fn duration_secs(&self) -> i64 {
        self.t_end - self.t_start
    }

    /// Battery consumed over the session, in percent.
    pub fn consumption(&self) -> u8 {
        self.b_start - self.b_end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionLabel {
    /// The level reached threshold L at this entry timestamp.
    Observed { t_event: i64 },
    /// The session ended before the level reached L.
    Censored,
}

#[derive(Debug, Clone)]
pub struct SegmentationConfig {
    /// Gap between consecutive discharge entries that forces a split.
    pub gap_threshold_secs: i64,
    /// Minimum session duration kept by the filter.
    pub min_duration_secs: i64,
    /// Minimum beginning battery level kept by the filter.
    pub min_start_battery: u8,
    /// Low-battery threshold L.
    pub threshold_l: u8,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            gap_threshold_secs: 600,
            min_duration_secs: 3600,
            min_start_battery: 30,
            threshold_l: 20,
        }
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("config invalid: {0}")]
    ConfigInvalid(String),
    #[error("t={0} outside session range")]
    OutOfRange(i64),
    #[error("empty input")]
    EmptyInput,
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        if self.gap_threshold_secs <= 0 || self.min_duration_secs <= 0 {
            return Err(SessionError::ConfigInvalid("thresholds must be positive".into()));
        }
        if self.min_start_battery <= self.threshold_l {
            return Err(SessionError::ConfigInvalid(format!(
                "min_start_battery ({}) must exceed threshold_l ({})",
                self.min_start_battery, self.threshold_l
            )));
        }
        Ok(())
    }
}

/// Splits a user's battery stream into discharge sessions. Charging entries
/// are discarded; a new session starts when the gap to the previous entry
/// exceeds the threshold or the level rises (battery replaced). Equal
/// consecutive levels never split.
pub fn segment_sessions(trace: &UserTrace, cfg: &SegmentationConfig) -> Vec<Session> {
    let mut sessions = Vec::new();
    let mut current: Vec<BatteryEntry> = Vec::new();
    let flush = |entries: &mut Vec<BatteryEntry>, sessions: &mut Vec<Session>| {
        if entries.is_empty() {
            return;
        }
        let entries = std::mem::take(entries);
        sessions.push(Session {
            user_id: trace.user_id.clone(),
            t_start: entries.first().unwrap().timestamp,
            t_end: entries.last().unwrap().timestamp,
            b_start: entries.first().unwrap().level,
            b_end: entries.last().unwrap().level,
            entries,
        });
    };
    for e in &trace.battery {
        if e.state == ChargeState::Charge {
            continue;
        }
        if let Some(prev) = current.last() {
            if e.timestamp - prev.timestamp > cfg.gap_threshold_secs || e.level > prev.level {
                flush(&mut current, &mut sessions);
            }
        }
        current.push(e.clone());
    }
    flush(&mut current, &mut sessions);
    sessions
}

/// Which filter stages to apply, so per-stage counts can be reported: the
/// duration filter belongs to session generation, the start-battery filter
/// to experiment setup.
#[derive(Debug, Clone, Copy)]
pub struct FilterFlags {
    pub min_duration: bool,
    pub min_start_battery: bool,
}

impl Default for FilterFlags {
    fn default() -> Self {
        FilterFlags {
            min_duration: true,
            min_start_battery: true,
        }
    }
}

/// Keeps sessions passing the enabled filters, preserving order.
pub fn filter_sessions(sessions: Vec<Session>, cfg: &SegmentationConfig, flags: FilterFlags) -> Vec<Session> {
    sessions
        .into_iter()
        .filter(|s| {
            (!flags.min_duration || s.duration_secs() >= cfg.min_duration_secs)
                && (!flags.min_start_battery || s.b_start >= cfg.min_start_battery)
        })
        .collect()
}

/// Labels a session against threshold L: observed at the first entry whose
/// level is at or below L, censored when no entry reaches it.
pub fn label_session(session: &Session, cfg: &SegmentationConfig) -> SessionLabel {
    for e in &session.entries {
        if e.level <= cfg.threshold_l {
            return SessionLabel::Observed { t_event: e.timestamp };
        }
    }
    SessionLabel::Censored
}

/// Battery level at time `t` as a right-continuous step function: the level
/// of the last entry at or before `t`.
pub fn battery_at(session: &Session, t: i64) -> Result<u8, SessionError> {
    if t < session.t_start || t > session.t_end {
        return Err(SessionError::OutOfRange(t));
    }
    let idx = session.entries.partition_point(|e| e.timestamp <= t);
    Ok(session.entries[idx - 1].level)
}

/// Empirical CDF as sorted (value, cumulative fraction) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfTable {
    pub points: Vec<(f64, f64)>,
}

impl CdfTable {
    pub fn from_values(mut values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        values.sort_by(|a, b| a.total_cmp(b));
        let mut points: Vec<(f64, f64)> = Vec::new();
        for (i, v) in values.iter().enumerate() {
            let frac = (i + 1) as f64 / n;
            match points.last_mut() {
                Some(last) if last.0 == *v => last.1 = frac,
                _ => points.push((*v, frac)),
            }
        }
        CdfTable { points }
    }

    /// Fraction of values at or below `x`.
    pub fn eval(&self, x: f64) -> f64 {
        let idx = self.points.partition_point(|(v, _)| *v <= x);
        if idx == 0 {
            0.0
        } else {
            self.points[idx - 1].1
        }
    }

    /// Two-column plot data: `value,cum_fraction`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "value,cum_fraction")?;
        for (v, f) in &self.points {
            writeln!(w, "{v},{f}")?;
        }
        Ok(())
    }
}

/// The four descriptive distributions over a session set: duration (hours),
/// beginning level, ending level, and consumption (begin minus end).
#[derive(Debug, Clone)]
pub struct SessionCdfs {
    pub duration_hours: CdfTable,
    pub begin_level: CdfTable,
    pub end_level: CdfTable,
    pub consumption: CdfTable,
}

pub fn empirical_cdfs(sessions: &[Session]) -> Result<SessionCdfs, SessionError> {
    if sessions.is_empty() {
        return Err(SessionError::EmptyInput);
    }
    Ok(SessionCdfs {
        duration_hours: CdfTable::from_values(sessions.iter().map(|s| s.duration_secs() as f64 / 3600.0).collect()),
        begin_level: CdfTable::from_values(sessions.iter().map(|s| s.b_start as f64).collect()),
        end_level: CdfTable::from_values(sessions.iter().map(|s| s.b_end as f64).collect()),
        consumption: CdfTable::from_values(sessions.iter().map(|s| s.consumption() as f64).collect()),
    })
}

/// Writes sessions as `user_id,t_start,t_end,b_start,b_end,label,t_event`
/// with an empty `t_event` for censored sessions.
pub fn write_sessions_csv<W: Write>(
    mut w: W,
    sessions: &[Session],
    cfg: &SegmentationConfig,
) -> std::io::Result<()> {
    writeln!(w, "user_id,t_start,t_end,b_start,b_end,label,t_event")?;
    for s in sessions {
        let (label, t_event) = match label_session(s, cfg) {
            SessionLabel::Observed { t_event } => ("observed", t_event.to_string()),
            SessionLabel::Censored => ("censored", String::new()),
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.user_id, s.t_start, s.t_end, s.b_start, s.b_end, label, t_event
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::build_user_trace;

    fn entry(ts: i64, level: u8, state: ChargeState) -> BatteryEntry {
        BatteryEntry {
            user_id: "u".into(),
            timestamp: ts,
            state,
            level,
        }
    }

    fn trace(entries: Vec<BatteryEntry>) -> UserTrace {
        build_user_trace(entries, vec![], vec![], vec![], vec![])
            .remove("u")
            .unwrap_or_default()
    }

    fn cfg() -> SegmentationConfig {
        SegmentationConfig::default()
    }

    #[test]
    fn gap_rule_splits() {
        let mut e: Vec<BatteryEntry> = (0..=60)
            .map(|i| entry(i * 5, 90, ChargeState::Discharge))
            .collect();
        e.push(entry(300 + 15 * 60, 89, ChargeState::Discharge));
        let s = segment_sessions(&trace(e), &cfg());
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].entries.len(), 1);
    }

    #[test]
    fn level_rise_splits_before_rising_entry() {
        let e = vec![
            entry(0, 55, ChargeState::Discharge),
            entry(5, 54, ChargeState::Discharge),
            entry(10, 80, ChargeState::Discharge),
        ];
        let s = segment_sessions(&trace(e), &cfg());
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].b_end, 54);
        assert_eq!(s[1].b_start, 80);
    }

    #[test]
    fn equal_levels_do_not_split() {
        let e = vec![
            entry(0, 54, ChargeState::Discharge),
            entry(5, 54, ChargeState::Discharge),
        ];
        assert_eq!(segment_sessions(&trace(e), &cfg()).len(), 1);
    }

    #[test]
    fn all_charging_yields_nothing() {
        let e = vec![entry(0, 50, ChargeState::Charge), entry(5, 51, ChargeState::Charge)];
        assert!(segment_sessions(&trace(e), &cfg()).is_empty());
    }

    #[test]
    fn segmentation_is_a_partition_of_discharge_entries() {
        let mut e = Vec::new();
        let mut t = 0;
        for i in 0..200u8 {
            let state = if i % 7 == 0 { ChargeState::Charge } else { ChargeState::Discharge };
            e.push(entry(t, 100 - (i % 90), state));
            t += if i % 13 == 0 { 700 } else { 5 };
        }
        let tr = trace(e);
        let sessions = segment_sessions(&tr, &cfg());
        let total: usize = sessions.iter().map(|s| s.entries.len()).sum();
        let discharge = tr
            .battery
            .iter()
            .filter(|x| x.state == ChargeState::Discharge)
            .count();
        assert_eq!(total, discharge);
        // Within each session, both split predicates are off.
        for s in &sessions {
            for w in s.entries.windows(2) {
                assert!(w[1].timestamp - w[0].timestamp <= cfg().gap_threshold_secs);
                assert!(w[1].level <= w[0].level);
            }
        }
    }

    fn session(levels: &[(i64, u8)]) -> Session {
        let entries: Vec<BatteryEntry> = levels
            .iter()
            .map(|&(t, l)| entry(t, l, ChargeState::Discharge))
            .collect();
        Session {
            user_id: "u".into(),
            t_start: entries.first().unwrap().timestamp,
            t_end: entries.last().unwrap().timestamp,
            b_start: entries.first().unwrap().level,
            b_end: entries.last().unwrap().level,
            entries,
        }
    }

    #[test]
    fn filter_drops_short_and_low_start() {
        let sessions = vec![
            session(&[(0, 100), (50 * 60, 90)]),          // 50 min: dropped
            session(&[(0, 28), (2 * 3600, 21)]),          // starts at 28: dropped
            session(&[(0, 100), (2 * 3600, 60)]),         // kept
        ];
        let kept = filter_sessions(sessions, &cfg(), FilterFlags::default());
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].b_start, 100);
    }

    #[test]
    fn label_first_crossing_wins() {
        let s = session(&[(0, 90), (7200, 20), (6000 + 7200, 15)]);
        assert_eq!(label_session(&s, &cfg()), SessionLabel::Observed { t_event: 7200 });
        let c = session(&[(0, 90), (7200, 45)]);
        assert_eq!(label_session(&c, &cfg()), SessionLabel::Censored);
    }

    #[test]
    fn battery_at_is_a_step_function() {
        let s = session(&[(0, 80), (60, 79)]);
        assert_eq!(battery_at(&s, 59).unwrap(), 80);
        assert_eq!(battery_at(&s, 0).unwrap(), 80);
        assert_eq!(battery_at(&s, 60).unwrap(), 79);
        assert!(battery_at(&s, 61).is_err());
        assert!(battery_at(&s, -1).is_err());
    }

    #[test]
    fn empirical_cdf_matches_definition() {
        let sessions = vec![
            session(&[(0, 100), (2 * 3600, 50)]),
            session(&[(0, 100), (2 * 3600, 50)]),
            session(&[(0, 100), (4 * 3600, 50)]),
        ];
        let cdfs = empirical_cdfs(&sessions).unwrap();
        let d = &cdfs.duration_hours;
        assert!((d.eval(2.0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.eval(4.0) - 1.0).abs() < 1e-12);
        assert_eq!(d.points.last().unwrap().1, 1.0);
    }

    #[test]
    fn single_session_cdf_is_one_step() {
        let cdfs = empirical_cdfs(&[session(&[(0, 100), (3600, 50)])]).unwrap();
        assert_eq!(cdfs.begin_level.points, vec![(100.0, 1.0)]);
        assert!(empirical_cdfs(&[]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        assert!(c.validate().is_ok());
        c.min_start_battery = 20;
        assert!(c.validate().is_err());
    }
}
