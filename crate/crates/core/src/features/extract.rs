//! Feature extraction for a single query. Missing cells are NaN until the
//! preprocessor imputes them.
//!
//! Everything here reads only records with timestamp at or before the query
//! time; user-history features read only sessions that ended before the
//! current session began.

use std::collections::BTreeMap;

use crate::ingest::{range, AppState, UserTrace};
use crate::session::{battery_at, Session};

use super::history::{screen_on_stats, HistorySession, UserHistoryIndex};
use super::{hour_of, weekday_of, FeatureSchema, APP_WINDOWS_MIN, T1_WINDOWS_MIN};

const MISSING: f64 = f64::NAN;

/// First entry time at which the session level was at or below `level`,
/// or `None` when the session never got that low before `t_query`.
fn reach_time(session: &Session, level: i32, t_query: i64) -> Option<i64> {
    // Levels are non-increasing, so entries above `level` form a prefix.
    let idx = session.entries.partition_point(|e| (e.level as i32) > level);
    match session.entries.get(idx) {
        Some(e) if e.timestamp <= t_query => Some(e.timestamp),
        _ => None,
    }
}

fn push_one_hot(out: &mut Vec<f64>, width: usize, hot: Option<usize>) {
    let base = out.len();
    out.resize(base + width, 0.0);
    if let Some(h) = hot {
        if h < width {
            out[base + h] = 1.0;
        }
    }
}

/// F1-F4: battery level, hour, weekday, and the last T2 sample at or before
/// the query time.
pub fn extract_query_time_features(
    schema: &FeatureSchema,
    trace: &UserTrace,
    session: &Session,
    t_query: i64,
) -> Vec<f64> {
    let off = schema.config.utc_offset_secs;
    let mut out = Vec::new();
    out.push(battery_at(session, t_query).expect("t_query inside session") as f64);
    push_one_hot(&mut out, 24, Some(hour_of(t_query, off)));
    push_one_hot(&mut out, 7, Some(weekday_of(t_query, off)));
    let idx = trace.sensor_t2.partition_point(|s| s.timestamp <= t_query);
    match idx.checked_sub(1).map(|i| &trace.sensor_t2[i]) {
        Some(sample) => {
            for v in &sample.values {
                out.push(v.unwrap_or(MISSING));
            }
        }
        None => out.extend(std::iter::repeat(MISSING).take(schema.group(4).unwrap().width)),
    }
    out
}

fn window_mean(values: &mut [f64], base: usize, slot: usize, value: Option<f64>, counts: &mut [u32]) {
    if let Some(v) = value {
        let i = base + slot;
        if counts[i] == 0 {
            values[i] = 0.0;
        }
        values[i] += v;
        counts[i] += 1;
    }
}

/// F5-F18: session context, discharge history, sensor aggregates, app
/// usage, and system events within `[t_start, t_query]`.
pub fn extract_session_features(
    schema: &FeatureSchema,
    trace: &UserTrace,
    session: &Session,
    t_query: i64,
) -> Vec<f64> {
    let off = schema.config.utc_offset_secs;
    let mut out = Vec::new();
    let current = battery_at(session, t_query).expect("t_query inside session") as f64;

    // F5-F7
    out.push(session.b_start as f64);
    push_one_hot(&mut out, 24, Some(hour_of(session.t_start, off)));
    push_one_hot(&mut out, 7, Some(weekday_of(session.t_start, off)));

    // F8-F11
    let age_min = (t_query - session.t_start) as f64 / 60.0;
    let consumed = session.b_start as f64 - current;
    let rate = if consumed == 0.0 { 0.0 } else { consumed / age_min };
    out.push(age_min);
    out.push(consumed);
    out.push(rate);
    out.push(if rate == 0.0 { MISSING } else { current / rate });

    // F12: per-percent recent rates plus dwell time in the current level.
    let current_int = current as i32;
    let reach_current = reach_time(session, current_int, t_query).unwrap_or(session.t_start);
    for p in 1..=10i32 {
        if (session.b_start as i32) < current_int + p {
            out.push(MISSING);
        } else {
            let high = reach_time(session, current_int + p, t_query).unwrap_or(session.t_start);
            out.push(((reach_current - high) as f64 / 60.0) / p as f64);
        }
    }
    out.push((t_query - reach_current) as f64 / 60.0);

    // F13: T1 means over trailing windows, clipped at the session start.
    {
        let base = out.len();
        let width = schema.group(13).unwrap().width;
        out.resize(base + width, MISSING);
        let mut counts = vec![0u32; out.len()];
        for (wi, w) in T1_WINDOWS_MIN.iter().enumerate() {
            let lo = (t_query - w * 60).max(session.t_start);
            for sample in range(&trace.sensor_t1, lo, t_query) {
                for (slot, v) in sample.values.iter().enumerate() {
                    window_mean(&mut out, base + slot * T1_WINDOWS_MIN.len(), wi, *v, &mut counts);
                }
            }
        }
        for i in base..base + width {
            if counts[i] > 0 {
                out[i] /= counts[i] as f64;
            }
        }
    }

    // F14: T2 means over the trailing 5 minutes.
    {
        let base = out.len();
        let width = schema.group(14).unwrap().width;
        out.resize(base + width, MISSING);
        let mut counts = vec![0u32; out.len()];
        let lo = (t_query - 300).max(session.t_start);
        for sample in range(&trace.sensor_t2, lo, t_query) {
            for (slot, v) in sample.values.iter().enumerate() {
                window_mean(&mut out, base + slot, 0, *v, &mut counts);
            }
        }
        for i in base..base + width {
            if counts[i] > 0 {
                out[i] /= counts[i] as f64;
            }
        }
    }

    let app_index: BTreeMap<&str, usize> = schema
        .top_apps
        .iter()
        .enumerate()
        .filter(|(_, a)| !a.is_empty())
        .map(|(i, a)| (a.as_str(), i))
        .collect();
    let n_windows = APP_WINDOWS_MIN.len();

    // F15: binary occurrence of top apps per state per trailing window.
    {
        let base = out.len();
        out.resize(base + schema.group(15).unwrap().width, 0.0);
        let widest = (t_query - APP_WINDOWS_MIN.iter().max().unwrap() * 60).max(session.t_start);
        for sample in range(&trace.app, widest, t_query) {
            if let Some(&a) = app_index.get(sample.app_id.as_str()) {
                let state = if sample.state == AppState::Foreground { 0 } else { 1 };
                for (wi, w) in APP_WINDOWS_MIN.iter().enumerate() {
                    let lo = (t_query - w * 60).max(session.t_start);
                    if sample.timestamp >= lo {
                        out[base + (a * 2 + state) * n_windows + wi] = 1.0;
                    }
                }
            }
        }
    }

    // F16: fraction of elapsed session time each top app spent per state.
    // A sample extends the app's state until the app's next sample or the
    // query time.
    {
        let base = out.len();
        out.resize(base + schema.group(16).unwrap().width, 0.0);
        let elapsed = (t_query - session.t_start) as f64;
        let mut last: BTreeMap<usize, (i64, AppState)> = BTreeMap::new();
        for sample in range(&trace.app, session.t_start, t_query) {
            if let Some(&a) = app_index.get(sample.app_id.as_str()) {
                if let Some((t0, state)) = last.insert(a, (sample.timestamp, sample.state)) {
                    let s = if state == AppState::Foreground { 0 } else { 1 };
                    out[base + a * 2 + s] += (sample.timestamp - t0) as f64;
                }
            }
        }
        for (a, (t0, state)) in last {
            let s = if state == AppState::Foreground { 0 } else { 1 };
            out[base + a * 2 + s] += (t_query - t0) as f64;
        }
        if elapsed > 0.0 {
            for i in base..out.len() {
                out[i] /= elapsed;
            }
        }
    }

    // F17: screen-on count and screen-on time fraction.
    let (on_count, on_frac) = screen_on_stats(trace, session.t_start, t_query);
    out.push(on_count as f64);
    out.push(on_frac);

    // F18: per-type broadcast counts; the reserved "other" bucket is not a
    // column.
    {
        let base = out.len();
        let width = schema.group(18).unwrap().width;
        out.resize(base + width, 0.0);
        for ev in range(&trace.broadcast, session.t_start, t_query) {
            if (ev.broadcast_type as usize) < width {
                out[base + ev.broadcast_type as usize] += 1.0;
            }
        }
    }

    out
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// F19-F21: one-hot user index and statistics of prior sessions under the
/// four start-time filters (anytime, same hour, same weekday, both).
pub fn extract_user_features(
    schema: &FeatureSchema,
    session: &Session,
    history: &UserHistoryIndex,
) -> Vec<f64> {
    let off = schema.config.utc_offset_secs;
    let mut out = Vec::new();
    let user_pos = schema.users.binary_search(&session.user_id).ok();
    push_one_hot(&mut out, schema.group(19).unwrap().width, user_pos);

    let prior = history.prior_sessions(&session.user_id, session.t_start);
    let hour = hour_of(session.t_start, off);
    let weekday = weekday_of(session.t_start, off);
    let filters: [&dyn Fn(&HistorySession) -> bool; 4] = [
        &|_| true,
        &|h| h.start_hour == hour,
        &|h| h.start_weekday == weekday,
        &|h| h.start_hour == hour && h.start_weekday == weekday,
    ];
    for value in [
        &(|h: &HistorySession| h.mean_rate) as &dyn Fn(&HistorySession) -> f64,
        &|h: &HistorySession| h.screen_on_frac,
    ] {
        for filter in filters {
            let mut vals: Vec<f64> = prior.iter().filter(|h| filter(h)).map(value).collect();
            if vals.is_empty() {
                out.push(MISSING);
                out.push(MISSING);
            } else {
                out.push(mean(&vals));
                out.push(median(&mut vals));
            }
        }
    }
    out
}

/// Full F1-F21 vector for one query, in schema column order.
pub fn extract_features(
    schema: &FeatureSchema,
    trace: &UserTrace,
    session: &Session,
    t_query: i64,
    history: &UserHistoryIndex,
) -> Vec<f64> {
    let mut out = extract_query_time_features(schema, trace, session, t_query);
    out.extend(extract_session_features(schema, trace, session, t_query));
    out.extend(extract_user_features(schema, session, history));
    debug_assert_eq!(out.len(), schema.total_width());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_schema, FeatureConfig};
    use crate::ingest::{AppSample, BatteryEntry, ChargeState, SensorGroup, SensorSample};

    fn entry(ts: i64, level: u8) -> BatteryEntry {
        BatteryEntry {
            user_id: "u".into(),
            timestamp: ts,
            state: ChargeState::Discharge,
            level,
        }
    }

    /// One entry per minute, 1% per `mins_per_pct` minutes, from `b_start`.
    fn steady_session(b_start: u8, mins_per_pct: i64, total_min: i64) -> Session {
        let entries: Vec<BatteryEntry> = (0..=total_min)
            .map(|m| entry(m * 60, (b_start as i64 - m / mins_per_pct) as u8))
            .collect();
        Session {
            user_id: "u".into(),
            t_start: 0,
            t_end: total_min * 60,
            b_start,
            b_end: entries.last().unwrap().level,
            entries,
        }
    }

    fn schema() -> FeatureSchema {
        let mut traces = std::collections::BTreeMap::new();
        traces.insert("u".to_string(), UserTrace { user_id: "u".into(), ..Default::default() });
        build_schema(&FeatureConfig::default(), &traces, &[])
    }

    fn group_slice<'a>(schema: &FeatureSchema, v: &'a [f64], id: u8) -> &'a [f64] {
        let g = schema.group(id).unwrap();
        &v[g.start..g.start + g.width]
    }

    #[test]
    fn rate_example_two_hours_forty_percent() {
        // Session lasted 2 hours and consumed 40%: F10 = 40/120 %/min.
        let schema = schema();
        let trace = UserTrace { user_id: "u".into(), ..Default::default() };
        let s = steady_session(100, 3, 120);
        let v = extract_features(&schema, &trace, &s, 120 * 60, &UserHistoryIndex::default());
        let f10 = group_slice(&schema, &v, 10)[0];
        assert!((f10 - 40.0 / 120.0).abs() < 1e-12);
        // F9 = F5 - F1 and F10 * F8 = F9 hold exactly.
        let f1 = group_slice(&schema, &v, 1)[0];
        let f5 = group_slice(&schema, &v, 5)[0];
        let f8 = group_slice(&schema, &v, 8)[0];
        let f9 = group_slice(&schema, &v, 9)[0];
        assert_eq!(f9, f5 - f1);
        assert!((f10 * f8 - f9).abs() < 1e-9);
    }

    #[test]
    fn f11_is_naive_life_prediction() {
        // F1=60, F10=1/3 %/min -> F11 = 180 minutes.
        let schema = schema();
        let trace = UserTrace { user_id: "u".into(), ..Default::default() };
        let s = steady_session(100, 3, 120);
        let v = extract_features(&schema, &trace, &s, 120 * 60, &UserHistoryIndex::default());
        assert_eq!(group_slice(&schema, &v, 1)[0], 60.0);
        assert!((group_slice(&schema, &v, 11)[0] - 180.0).abs() < 1e-9);
    }

    #[test]
    fn f11_missing_when_rate_zero() {
        let schema = schema();
        let trace = UserTrace { user_id: "u".into(), ..Default::default() };
        let entries = vec![entry(0, 80), entry(600, 80)];
        let s = Session {
            user_id: "u".into(),
            t_start: 0,
            t_end: 600,
            b_start: 80,
            b_end: 80,
            entries,
        };
        let v = extract_features(&schema, &trace, &s, 600, &UserHistoryIndex::default());
        assert_eq!(group_slice(&schema, &v, 10)[0], 0.0);
        assert!(group_slice(&schema, &v, 11)[0].is_nan());
    }

    #[test]
    fn f12_recent_percent_rates() {
        // 10 minutes per percent: every recent-p% rate is 10 min/%.
        let schema = schema();
        let trace = UserTrace { user_id: "u".into(), ..Default::default() };
        let s = steady_session(100, 10, 160);
        let v = extract_features(&schema, &trace, &s, 160 * 60, &UserHistoryIndex::default());
        let f12 = group_slice(&schema, &v, 12);
        for p in 0..10 {
            assert!((f12[p] - 10.0).abs() < 1e-9, "rate at {}%: {}", p + 1, f12[p]);
        }
        // Level just reached at the query -> zero dwell.
        assert!((f12[10] - 0.0).abs() < 1e-9);
    }

    #[test]
    fn f12_missing_when_not_enough_consumed() {
        let schema = schema();
        let trace = UserTrace { user_id: "u".into(), ..Default::default() };
        // Consumed 3% so far: rates for 4%..10% are missing.
        let s = steady_session(100, 10, 35);
        let v = extract_features(&schema, &trace, &s, 35 * 60, &UserHistoryIndex::default());
        let f12 = group_slice(&schema, &v, 12);
        for p in 0..3 {
            assert!(f12[p].is_finite());
        }
        for p in 3..10 {
            assert!(f12[p].is_nan(), "rate at {}% should be missing", p + 1);
        }
    }

    #[test]
    fn one_hot_groups_sum_to_one() {
        let schema = schema();
        let trace = UserTrace { user_id: "u".into(), ..Default::default() };
        let s = steady_session(100, 3, 120);
        let history = UserHistoryIndex::build(&[s.clone()], &Default::default(), 0);
        let v = extract_features(&schema, &trace, &s, 7200, &history);
        for id in [2u8, 3, 6, 7, 19] {
            let sum: f64 = group_slice(&schema, &v, id).iter().sum();
            assert_eq!(sum, 1.0, "group F{id}");
        }
    }

    #[test]
    fn query_hour_one_hot_position() {
        let schema = schema();
        let trace = UserTrace { user_id: "u".into(), ..Default::default() };
        // Session starting at 12:00, query at 13:05.
        let base = 12 * 3600;
        let mut s = steady_session(100, 3, 120);
        for e in &mut s.entries {
            e.timestamp += base;
        }
        s.t_start += base;
        s.t_end += base;
        let v = extract_features(&schema, &trace, &s, base + 3600 + 300, &UserHistoryIndex::default());
        let f2 = group_slice(&schema, &v, 2);
        assert_eq!(f2[13], 1.0);
        assert_eq!(f2.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn no_t2_sample_means_all_f4_missing() {
        let schema = schema();
        let trace = UserTrace { user_id: "u".into(), ..Default::default() };
        let s = steady_session(100, 3, 120);
        let v = extract_features(&schema, &trace, &s, 7200, &UserHistoryIndex::default());
        assert!(group_slice(&schema, &v, 4).iter().all(|x| x.is_nan()));
    }

    #[test]
    fn f4_uses_last_sample_at_or_before_query() {
        let schema = schema();
        let mk = |ts: i64, v: f64| SensorSample {
            user_id: "u".into(),
            timestamp: ts,
            group: SensorGroup::T2,
            values: {
                let mut vals = vec![Some(v); 150];
                vals[7] = None;
                vals
            },
        };
        let trace = UserTrace {
            user_id: "u".into(),
            sensor_t2: vec![mk(1000, 1.0), mk(2000, 2.0), mk(9000, 9.0)],
            ..Default::default()
        };
        let s = steady_session(100, 3, 120);
        let v = extract_features(&schema, &trace, &s, 2500, &UserHistoryIndex::default());
        let f4 = group_slice(&schema, &v, 4);
        assert_eq!(f4[0], 2.0);
        assert!(f4[7].is_nan());
    }

    #[test]
    fn empty_history_yields_missing_f20_f21() {
        let schema = schema();
        let trace = UserTrace { user_id: "u".into(), ..Default::default() };
        let s = steady_session(100, 3, 120);
        let v = extract_features(&schema, &trace, &s, 7200, &UserHistoryIndex::default());
        let cells: Vec<f64> = group_slice(&schema, &v, 20)
            .iter()
            .chain(group_slice(&schema, &v, 21))
            .copied()
            .collect();
        assert_eq!(cells.len(), 16);
        assert!(cells.iter().all(|x| x.is_nan()));
    }

    #[test]
    fn f20_anytime_mean_and_median() {
        let schema = schema();
        // Two prior sessions with rates 0.2 and 0.4 %/min.
        let prior = |t0: i64, consumed: u8, minutes: i64| Session {
            user_id: "u".into(),
            t_start: t0,
            t_end: t0 + minutes * 60,
            b_start: 100,
            b_end: 100 - consumed,
            entries: vec![entry(t0, 100), entry(t0 + minutes * 60, 100 - consumed)],
        };
        let sessions = vec![prior(0, 20, 100), prior(10_000 * 60, 40, 100)];
        let history = UserHistoryIndex::build(&sessions, &Default::default(), 0);
        let mut s = steady_session(100, 3, 120);
        let shift = 100_000 * 60;
        for e in &mut s.entries {
            e.timestamp += shift;
        }
        s.t_start += shift;
        s.t_end += shift;
        let v = extract_features(&schema, &UserTrace { user_id: "u".into(), ..Default::default() }, &s, shift + 7200, &history);
        let f20 = group_slice(&schema, &v, 20);
        assert!((f20[0] - 0.3).abs() < 1e-12); // anytime mean
        assert!((f20[1] - 0.3).abs() < 1e-12); // anytime median
    }

    #[test]
    fn f16_fractions_follow_state_extension() {
        let _schema = schema();
        let mut traces = std::collections::BTreeMap::new();
        let app = |ts: i64, app_id: &str, state: AppState| AppSample {
            user_id: "u".into(),
            timestamp: ts,
            app_id: app_id.into(),
            state,
        };
        let trace = UserTrace {
            user_id: "u".into(),
            app: vec![
                app(0, "a", AppState::Foreground),
                app(600, "a", AppState::Background),
                app(0, "b", AppState::Background),
            ],
            ..Default::default()
        };
        traces.insert("u".to_string(), trace.clone());
        let s = steady_session(100, 3, 120);
        let schema = build_schema(&FeatureConfig::default(), &traces, &[&s]);
        let v = extract_features(&schema, &trace, &s, 1200, &UserHistoryIndex::default());
        let f16 = group_slice(&schema, &v, 16);
        let a = schema.top_apps.iter().position(|x| x == "a").unwrap();
        let b = schema.top_apps.iter().position(|x| x == "b").unwrap();
        // App a: foreground [0,600), background [600,1200] of 1200 total.
        assert!((f16[a * 2] - 0.5).abs() < 1e-12);
        assert!((f16[a * 2 + 1] - 0.5).abs() < 1e-12);
        // App b: background for the whole interval.
        assert!((f16[b * 2 + 1] - 1.0).abs() < 1e-12);
        for &x in f16 {
            assert!((0.0..=1.0).contains(&x));
        }
        // F15: the foreground sample at t=0 is inside the 60-minute window
        // but outside the 5-minute one for a query at t=1200.
        let f15 = group_slice(&schema, &v, 15);
        assert!(f15.iter().all(|&x| x == 0.0 || x == 1.0));
        assert_eq!(f15[(a * 2) * 4 + 3], 1.0);
        assert_eq!(f15[(a * 2) * 4], 0.0);
    }
}
