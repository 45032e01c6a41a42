//! Feature groups F1-F21: schema, extraction, user history, preprocessing.
//!
//! Features are computed strictly from data at or before the query time;
//! user-history features (F19-F21) additionally see only sessions that
//! ended before the current session started. Missing values are carried as
//! NaN until the preprocessor imputes per-column training medians and
//! standardizes each column to mean 0 and standard deviation 1.
//!
//! Column layout at defaults (1,079 columns):
//!
//! | group | width | content                                             |
//! |-------|-------|-----------------------------------------------------|
//! | F1    | 1     | battery level at query time                         |
//! | F2    | 24    | one-hot query hour                                  |
//! | F3    | 7     | one-hot query weekday                               |
//! | F4    | 150   | last T2 sample at or before the query               |
//! | F5    | 1     | battery level at session start                      |
//! | F6    | 24    | one-hot session start hour                          |
//! | F7    | 7     | one-hot session start weekday                       |
//! | F8    | 1     | session age at query, minutes                       |
//! | F9    | 1     | battery consumed since session start                |
//! | F10   | 1     | mean consuming rate so far, %/min                   |
//! | F11   | 1     | naive life prediction F1/F10, minutes               |
//! | F12   | 11    | per-percent recent rates (1%..10%) + level dwell    |
//! | F13   | 45    | T1 means over trailing 1/5/10/30/60 minutes         |
//! | F14   | 150   | T2 means over trailing 5 minutes                    |
//! | F15   | 400   | top-K app occurrence in trailing 5/10/30/60 minutes |
//! | F16   | 100   | top-K app usage-time fractions within the session   |
//! | F17   | 2     | screen-on count and screen-on time fraction         |
//! | F18   | 86    | per-type broadcast counts within the session        |
//! | F19   | users | one-hot user index                                  |
//! | F20   | 8     | user-history discharge-rate stats under 4 filters   |
//! | F21   | 8     | user-history screen-on stats under 4 filters        |

mod extract;
mod history;
mod preprocess;

pub use extract::{extract_features, extract_query_time_features, extract_session_features, extract_user_features};
pub use history::{screen_on_stats, HistorySession, UserHistoryIndex};
pub use preprocess::{apply_preprocessor, fit_preprocessor, Preprocessor};

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{range, UserTrace, T1_WIDTH, T2_WIDTH};
use crate::rng::fnv1a64;
use crate::session::Session;

/// Trailing windows, minutes, for the T1 sensor means (F13).
pub const T1_WINDOWS_MIN: [i64; 5] = [1, 5, 10, 30, 60];
/// Trailing windows, minutes, for app occurrence indicators (F15).
pub const APP_WINDOWS_MIN: [i64; 4] = [5, 10, 30, 60];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Apps ranked into the schema vocabulary.
    pub top_k_apps: usize,
    pub n_broadcast_types: u32,
    /// Minimum width of the one-hot user group; grows when the data has
    /// more users.
    pub n_users: usize,
    /// Local-time offset for hour/weekday features.
    pub utc_offset_secs: i64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            top_k_apps: 50,
            n_broadcast_types: 86,
            n_users: 51,
            utc_offset_secs: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    /// Group number, 1..=21.
    pub id: u8,
    /// First column of the group.
    pub start: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub version: u32,
    pub config: FeatureConfig,
    pub groups: Vec<GroupSpec>,
    pub column_names: Vec<String>,
    /// Top-K app ids by training sample count; padded with empty tokens
    /// (never-firing columns) when fewer apps exist.
    pub top_apps: Vec<String>,
    /// Known user ids in sorted order; one-hot positions for F19.
    pub users: Vec<String>,
    /// Set when fewer than `top_k_apps` distinct apps were available.
    pub insufficient_apps: bool,
}

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("need at least 2 training rows, got {0}")]
    TooFewRows(usize),
    #[error("row has {got} columns, schema has {expected}")]
    SchemaMismatch { got: usize, expected: usize },
    #[error("unknown feature group F{0}")]
    BadGroupId(u8),
}

/// Local hour of day in 0..24 for an epoch timestamp.
pub fn hour_of(t: i64, utc_offset_secs: i64) -> usize {
    ((t + utc_offset_secs).rem_euclid(86_400) / 3_600) as usize
}

/// Local weekday in 0..7 with 0 = Monday.
pub fn weekday_of(t: i64, utc_offset_secs: i64) -> usize {
    // 1970-01-01 was a Thursday.
    (((t + utc_offset_secs).div_euclid(86_400)) + 3).rem_euclid(7) as usize
}

impl FeatureSchema {
    pub fn total_width(&self) -> usize {
        self.column_names.len()
    }

    pub fn group(&self, id: u8) -> Result<&GroupSpec, FeatureError> {
        self.groups
            .iter()
            .find(|g| g.id == id)
            .ok_or(FeatureError::BadGroupId(id))
    }

    /// Column indices covered by the given feature groups, in layout order.
    pub fn columns_for(&self, group_ids: &[u8]) -> Result<Vec<usize>, FeatureError> {
        let mut cols = Vec::new();
        let mut ids = group_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        for id in ids {
            let g = self.group(id)?;
            cols.extend(g.start..g.start + g.width);
        }
        Ok(cols)
    }

    /// Stable fingerprint over version and column layout; models refuse to
    /// predict under a different fingerprint.
    pub fn fingerprint(&self) -> u64 {
        let mut buf = Vec::new();
        buf.extend_from_slice(&self.version.to_le_bytes());
        for name in &self.column_names {
            buf.extend_from_slice(name.as_bytes());
            buf.push(0);
        }
        fnv1a64(&buf)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Builds the schema from the configuration and the training portion of the
/// data. The top-K app vocabulary is ranked by total sample count inside
/// training sessions only, ties broken lexicographically by app id.
pub fn build_schema(
    config: &FeatureConfig,
    traces: &BTreeMap<String, UserTrace>,
    training_sessions: &[&Session],
) -> FeatureSchema {
    let mut app_counts: BTreeMap<&str, u64> = BTreeMap::new();
    for s in training_sessions {
        if let Some(trace) = traces.get(&s.user_id) {
            for sample in range(&trace.app, s.t_start, s.t_end) {
                *app_counts.entry(sample.app_id.as_str()).or_default() += 1;
            }
        }
    }
    // Descending count, ascending app id on ties (BTreeMap iteration is
    // already id-sorted, and the sort is stable).
    let mut ranked: Vec<(&str, u64)> = app_counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    let insufficient = ranked.len() < config.top_k_apps;
    let mut top_apps: Vec<String> = ranked
        .iter()
        .take(config.top_k_apps)
        .map(|(a, _)| a.to_string())
        .collect();
    top_apps.resize(config.top_k_apps, String::new());

    let users: Vec<String> = {
        let mut u: Vec<String> = traces.keys().cloned().collect();
        u.sort();
        u
    };
    let user_width = users.len().max(config.n_users);

    let mut column_names = Vec::new();
    let mut groups = Vec::new();
    let group = |id: u8, names: Vec<String>, column_names: &mut Vec<String>, groups: &mut Vec<GroupSpec>| {
        groups.push(GroupSpec {
            id,
            start: column_names.len(),
            width: names.len(),
        });
        column_names.extend(names);
    };

    let one_hot = |prefix: &str, k: usize| -> Vec<String> { (0..k).map(|i| format!("{prefix}_{i}")).collect() };

    group(1, vec!["current_battery".into()], &mut column_names, &mut groups);
    group(2, one_hot("current_hour", 24), &mut column_names, &mut groups);
    group(3, one_hot("current_weekday", 7), &mut column_names, &mut groups);
    group(4, one_hot("t2_last", T2_WIDTH), &mut column_names, &mut groups);
    group(5, vec!["start_battery".into()], &mut column_names, &mut groups);
    group(6, one_hot("start_hour", 24), &mut column_names, &mut groups);
    group(7, one_hot("start_weekday", 7), &mut column_names, &mut groups);
    group(8, vec!["age_min".into()], &mut column_names, &mut groups);
    group(9, vec!["consumption_pct".into()], &mut column_names, &mut groups);
    group(10, vec!["history_rate".into()], &mut column_names, &mut groups);
    group(11, vec!["naive_surv".into()], &mut column_names, &mut groups);
    let mut f12: Vec<String> = (1..=10).map(|p| format!("past_rate_{p}pct")).collect();
    f12.push("level_dwell_min".into());
    group(12, f12, &mut column_names, &mut groups);
    let mut f13 = Vec::new();
    for s in 0..T1_WIDTH {
        for w in T1_WINDOWS_MIN {
            f13.push(format!("t1_s{s}_mean_{w}m"));
        }
    }
    group(13, f13, &mut column_names, &mut groups);
    group(14, one_hot("t2_mean_5m", T2_WIDTH), &mut column_names, &mut groups);
    let mut f15 = Vec::new();
    let mut f16 = Vec::new();
    for a in 0..config.top_k_apps {
        for state in ["fg", "bg"] {
            for w in APP_WINDOWS_MIN {
                f15.push(format!("app{a}_{state}_seen_{w}m"));
            }
            f16.push(format!("app{a}_{state}_frac"));
        }
    }
    group(15, f15, &mut column_names, &mut groups);
    group(16, f16, &mut column_names, &mut groups);
    group(
        17,
        vec!["screen_on_count".into(), "screen_on_frac".into()],
        &mut column_names,
        &mut groups,
    );
    group(
        18,
        one_hot("broadcast", config.n_broadcast_types as usize),
        &mut column_names,
        &mut groups,
    );
    group(19, one_hot("user", user_width), &mut column_names, &mut groups);
    let mut f20 = Vec::new();
    let mut f21 = Vec::new();
    for filter in ["any", "hour", "weekday", "hourweekday"] {
        for stat in ["mean", "median"] {
            f20.push(format!("hist_rate_{filter}_{stat}"));
            f21.push(format!("hist_screen_{filter}_{stat}"));
        }
    }
    group(20, f20, &mut column_names, &mut groups);
    group(21, f21, &mut column_names, &mut groups);

    FeatureSchema {
        version: SCHEMA_VERSION,
        config: config.clone(),
        groups,
        column_names,
        top_apps,
        users,
        insufficient_apps: insufficient,
    }
}

/// Parses a feature-set expression like `F1,F10-F12` into group ids,
/// expanded, deduplicated, order-preserving.
pub fn feature_set_parse(expr: &str) -> Result<Vec<u8>, FeatureError> {
    let parse_id = |tok: &str| -> Result<u8, FeatureError> {
        let tok = tok.trim();
        let digits = tok
            .strip_prefix('F')
            .or_else(|| tok.strip_prefix('f'))
            .ok_or(FeatureError::BadGroupId(0))?;
        let id: u8 = digits.parse().map_err(|_| FeatureError::BadGroupId(0))?;
        if (1..=21).contains(&id) {
            Ok(id)
        } else {
            Err(FeatureError::BadGroupId(id))
        }
    };
    let mut out = Vec::new();
    for part in expr.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        if let Some((a, b)) = part.split_once('-') {
            let (a, b) = (parse_id(a)?, parse_id(b)?);
            if a > b {
                return Err(FeatureError::BadGroupId(a));
            }
            for id in a..=b {
                if !out.contains(&id) {
                    out.push(id);
                }
            }
        } else {
            let id = parse_id(part)?;
            if !out.contains(&id) {
                out.push(id);
            }
        }
    }
    Ok(out)
}

/// Writes a feature matrix: header of column names, one CSV row per query.
/// NaN cells are written as empty (missing).
pub fn write_feature_matrix<W: Write>(mut w: W, schema: &FeatureSchema, cols: &[usize], rows: &[Vec<f64>]) -> std::io::Result<()> {
    let names: Vec<&str> = cols.iter().map(|&c| schema.column_names[c].as_str()).collect();
    writeln!(w, "{}", names.join(","))?;
    for row in rows {
        let mut line = String::new();
        for (i, &c) in cols.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            if row[c].is_finite() {
                line.push_str(&format!("{}", row[c]));
            }
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{AppSample, AppState};

    fn schema_with_apps(apps: &[(&str, u64)], k: usize) -> FeatureSchema {
        let mut traces = BTreeMap::new();
        let mut t = UserTrace {
            user_id: "u".into(),
            ..Default::default()
        };
        let mut ts = 0;
        for (app, count) in apps {
            for _ in 0..*count {
                t.app.push(AppSample {
                    user_id: "u".into(),
                    timestamp: ts,
                    app_id: app.to_string(),
                    state: AppState::Foreground,
                });
                ts += 1;
            }
        }
        traces.insert("u".to_string(), t);
        let session = Session {
            user_id: "u".into(),
            t_start: 0,
            t_end: ts.max(1),
            b_start: 100,
            b_end: 50,
            entries: vec![],
        };
        let cfg = FeatureConfig {
            top_k_apps: k,
            ..Default::default()
        };
        build_schema(&cfg, &traces, &[&session])
    }

    #[test]
    fn default_schema_width_is_1079() {
        let cfg = FeatureConfig::default();
        let schema = build_schema(&cfg, &BTreeMap::new(), &[]);
        assert_eq!(schema.total_width(), 1079);
        // Independent hand sum of the published group widths.
        let widths = [1, 24, 7, 150, 1, 24, 7, 1, 1, 1, 1, 11, 45, 150, 400, 100, 2, 86, 51, 8, 8];
        assert_eq!(widths.iter().sum::<usize>(), 1079);
        for (g, w) in schema.groups.iter().zip(widths) {
            assert_eq!(g.width, w, "group F{}", g.id);
        }
    }

    #[test]
    fn f15_width_is_4_windows_by_apps_by_states() {
        let cfg = FeatureConfig::default();
        let schema = build_schema(&cfg, &BTreeMap::new(), &[]);
        assert_eq!(schema.group(15).unwrap().width, 50 * 4 * 2);
    }

    #[test]
    fn top_apps_rank_by_count_then_lexicographic() {
        let schema = schema_with_apps(&[("zz", 5), ("aa", 5), ("mm", 10)], 2);
        assert_eq!(schema.top_apps, vec!["mm".to_string(), "aa".to_string()]);
    }

    #[test]
    fn insufficient_apps_pads_schema() {
        let schema = schema_with_apps(&[("only", 3)], 50);
        assert!(schema.insufficient_apps);
        assert_eq!(schema.top_apps.len(), 50);
        assert_eq!(schema.top_apps[1], "");
        assert_eq!(schema.total_width(), 1079);
    }

    #[test]
    fn feature_set_expressions() {
        assert_eq!(feature_set_parse("F1,F10-F12").unwrap(), vec![1, 10, 11, 12]);
        assert_eq!(feature_set_parse("F1-F21").unwrap().len(), 21);
        assert!(feature_set_parse("F22").is_err());
        assert!(feature_set_parse("banana").is_err());
        assert_eq!(feature_set_parse("F3,F1,F3").unwrap(), vec![3, 1]);
    }

    #[test]
    fn schema_roundtrips_and_fingerprint_is_stable() {
        let cfg = FeatureConfig::default();
        let schema = build_schema(&cfg, &BTreeMap::new(), &[]);
        let back = FeatureSchema::from_json(&schema.to_json()).unwrap();
        assert_eq!(back.fingerprint(), schema.fingerprint());
        assert_eq!(back.column_names, schema.column_names);
    }

    #[test]
    fn hour_and_weekday_helpers() {
        // 1970-01-01 00:00 UTC was a Thursday.
        assert_eq!(hour_of(0, 0), 0);
        assert_eq!(weekday_of(0, 0), 3);
        assert_eq!(hour_of(13 * 3600 + 5 * 60, 0), 13);
        assert_eq!(weekday_of(4 * 86_400, 0), 0); // Monday 1970-01-05
        assert_eq!(hour_of(0, 7200), 2);
    }
}
