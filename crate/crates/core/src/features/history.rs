//! Cross-session user history for features F19-F21.

use std::collections::BTreeMap;

use crate::ingest::{ScreenAction, UserTrace};
use crate::session::Session;

use super::{hour_of, weekday_of};

/// Summary of one finished session, as seen by later queries.
#[derive(Debug, Clone, PartialEq)]
pub struct HistorySession {
    pub t_start: i64,
    pub t_end: i64,
    pub start_hour: usize,
    pub start_weekday: usize,
    /// Mean discharge rate over the whole session, %/min.
    pub mean_rate: f64,
    /// Fraction of the session with the screen on.
    pub screen_on_frac: f64,
}

/// Per-user lists of prior sessions, sorted by end time. For a query inside
/// session `s`, only sessions with `t_end < s.t_start` are visible.
#[derive(Debug, Clone, Default)]
pub struct UserHistoryIndex {
    per_user: BTreeMap<String, Vec<HistorySession>>,
}

/// Screen-on statistics over `[a, b]`: number of On events inside the
/// interval and the fraction of the interval spent on. The state at `a` is
/// carried over from the last event at or before `a` (off when none).
pub fn screen_on_stats(trace: &UserTrace, a: i64, b: i64) -> (usize, f64) {
    if b <= a {
        return (0, 0.0);
    }
    let start_idx = trace.screen.partition_point(|e| e.timestamp <= a);
    let mut on = start_idx > 0 && trace.screen[start_idx - 1].action == ScreenAction::On;
    let mut on_count = 0usize;
    if on && start_idx > 0 && trace.screen[start_idx - 1].timestamp == a {
        // An On event exactly at `a` counts as inside the interval.
        on_count += 1;
    }
    let mut cursor = a;
    let mut on_secs = 0i64;
    for e in &trace.screen[start_idx..] {
        if e.timestamp > b {
            break;
        }
        if on {
            on_secs += e.timestamp - cursor;
        }
        cursor = e.timestamp;
        on = e.action == ScreenAction::On;
        if on {
            on_count += 1;
        }
    }
    if on {
        on_secs += b - cursor;
    }
    (on_count, on_secs as f64 / (b - a) as f64)
}

impl UserHistoryIndex {
    /// Builds the index from all filtered sessions and their traces.
    pub fn build(sessions: &[Session], traces: &BTreeMap<String, UserTrace>, utc_offset_secs: i64) -> Self {
        let mut per_user: BTreeMap<String, Vec<HistorySession>> = BTreeMap::new();
        for s in sessions {
            let duration_min = s.duration_secs() as f64 / 60.0;
            let mean_rate = if duration_min > 0.0 {
                s.consumption() as f64 / duration_min
            } else {
                0.0
            };
            let screen_on_frac = traces
                .get(&s.user_id)
                .map(|t| screen_on_stats(t, s.t_start, s.t_end).1)
                .unwrap_or(0.0);
            per_user.entry(s.user_id.clone()).or_default().push(HistorySession {
                t_start: s.t_start,
                t_end: s.t_end,
                start_hour: hour_of(s.t_start, utc_offset_secs),
                start_weekday: weekday_of(s.t_start, utc_offset_secs),
                mean_rate,
                screen_on_frac,
            });
        }
        for v in per_user.values_mut() {
            v.sort_by_key(|h| h.t_end);
        }
        UserHistoryIndex { per_user }
    }

    /// Sessions of `user` that ended strictly before `before`.
    pub fn prior_sessions(&self, user: &str, before: i64) -> &[HistorySession] {
        match self.per_user.get(user) {
            None => &[],
            Some(v) => {
                let idx = v.partition_point(|h| h.t_end < before);
                &v[..idx]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{BatteryEntry, ChargeState, ScreenEvent};

    fn trace_with_screen(events: Vec<(i64, ScreenAction)>) -> UserTrace {
        UserTrace {
            user_id: "u".into(),
            screen: events
                .into_iter()
                .map(|(t, action)| ScreenEvent {
                    user_id: "u".into(),
                    timestamp: t,
                    action,
                })
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn screen_stats_reconstruct_state() {
        let t = trace_with_screen(vec![
            (10, ScreenAction::On),
            (40, ScreenAction::Off),
            (70, ScreenAction::On),
        ]);
        // [0, 100]: on during [10,40] and [70,100] -> 60 of 100 seconds.
        let (count, frac) = screen_on_stats(&t, 0, 100);
        assert_eq!(count, 2);
        assert!((frac - 0.6).abs() < 1e-12);
        // Interval starting mid-on-period carries the on state.
        let (count, frac) = screen_on_stats(&t, 20, 40);
        assert_eq!(count, 0);
        assert!((frac - 1.0).abs() < 1e-12);
    }

    #[test]
    fn screen_stats_no_events_is_off() {
        let t = trace_with_screen(vec![]);
        assert_eq!(screen_on_stats(&t, 0, 100), (0, 0.0));
    }

    fn session(user: &str, t_start: i64, t_end: i64, b_start: u8, b_end: u8) -> Session {
        Session {
            user_id: user.into(),
            t_start,
            t_end,
            b_start,
            b_end,
            entries: vec![
                BatteryEntry {
                    user_id: user.into(),
                    timestamp: t_start,
                    state: ChargeState::Discharge,
                    level: b_start,
                },
                BatteryEntry {
                    user_id: user.into(),
                    timestamp: t_end,
                    state: ChargeState::Discharge,
                    level: b_end,
                },
            ],
        }
    }

    #[test]
    fn history_sees_only_strictly_earlier_sessions() {
        let sessions = vec![
            session("u", 0, 6000, 100, 50),
            session("u", 10_000, 16_000, 90, 40),
            session("u", 20_000, 26_000, 80, 30),
        ];
        let idx = UserHistoryIndex::build(&sessions, &BTreeMap::new(), 0);
        assert_eq!(idx.prior_sessions("u", 20_000).len(), 2);
        assert_eq!(idx.prior_sessions("u", 16_000).len(), 1);
        assert_eq!(idx.prior_sessions("u", 0).len(), 0);
        assert_eq!(idx.prior_sessions("other", 99_999).len(), 0);
    }

    #[test]
    fn mean_rate_is_consumption_over_duration() {
        let sessions = vec![session("u", 0, 6000, 100, 50)];
        let idx = UserHistoryIndex::build(&sessions, &BTreeMap::new(), 0);
        let h = &idx.prior_sessions("u", 99_999)[0];
        assert!((h.mean_rate - 50.0 / 100.0).abs() < 1e-12);
    }
}
