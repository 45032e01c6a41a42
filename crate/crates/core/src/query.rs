//! Query simulation inside sessions and the stratified train/test split.
//!
//! One query is sampled per session (a flag allows more for augmentation).
//! The query time is uniform inside the session with a 2-minute border at
//! both the beginning and the end, where "end" is the low-battery event for
//! observed sessions and the session end for censored ones.

use std::io::Write;

use rand::Rng;
use thiserror::Error;

use crate::rng::{derive_seed, derived_rng};
use crate::session::{Session, SessionLabel};

/// Border at both ends of the sampling window, seconds.
pub const QUERY_BORDER_SECS: i64 = 120;

/// A session plus its label under the configured threshold L.
#[derive(Debug, Clone)]
pub struct LabeledSession {
    pub session: Session,
    pub label: SessionLabel,
}

impl LabeledSession {
    /// Stable identifier: a user never has two sessions starting at the
    /// same timestamp.
    pub fn id(&self) -> String {
        format!("{}:{}", self.session.user_id, self.session.t_start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    /// Actual remaining life in minutes (observed sessions).
    Life(f64),
    /// Lower bound on remaining life in minutes (censored sessions).
    CensoredAtLeast(f64),
}

impl Outcome {
    pub fn minutes(&self) -> f64 {
        match *self {
            Outcome::Life(m) | Outcome::CensoredAtLeast(m) => m,
        }
    }

    pub fn is_observed(&self) -> bool {
        matches!(self, Outcome::Life(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryInstance {
    /// Index into the labeled-session list the query was drawn from.
    pub session_idx: usize,
    pub session_id: String,
    pub t_query: i64,
    pub outcome: Outcome,
}

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("t_query {t_query} outside the valid window [{lo}, {hi}]")]
    WindowViolation { t_query: i64, lo: i64, hi: i64 },
}

fn window_end(session: &Session, label: SessionLabel) -> i64 {
    match label {
        SessionLabel::Observed { t_event } => t_event,
        SessionLabel::Censored => session.t_end,
    }
}

/// Samples a query time uniformly on `[t_start+120, U-120]`, where U is the
/// event time (observed) or session end (censored). Returns `None` (skip)
/// when the window is empty.
pub fn sample_query_time<R: Rng>(session: &Session, label: SessionLabel, rng: &mut R) -> Option<i64> {
    let upper = window_end(session, label);
    if upper - session.t_start < 2 * QUERY_BORDER_SECS {
        return None;
    }
    let lo = session.t_start + QUERY_BORDER_SECS;
    let hi = upper - QUERY_BORDER_SECS;
    Some(rng.random_range(lo..=hi))
}

/// Attaches the life label or censoring bound to a sampled query time.
pub fn make_query_instance(
    sessions: &[LabeledSession],
    session_idx: usize,
    t_query: i64,
) -> Result<QueryInstance, QueryError> {
    let ls = &sessions[session_idx];
    let upper = window_end(&ls.session, ls.label);
    let lo = ls.session.t_start + QUERY_BORDER_SECS;
    let hi = upper - QUERY_BORDER_SECS;
    if t_query < lo || t_query > hi {
        return Err(QueryError::WindowViolation { t_query, lo, hi });
    }
    let minutes = (upper - t_query) as f64 / 60.0;
    let outcome = match ls.label {
        SessionLabel::Observed { .. } => Outcome::Life(minutes),
        SessionLabel::Censored => Outcome::CensoredAtLeast(minutes),
    };
    Ok(QueryInstance {
        session_idx,
        session_id: ls.id(),
        t_query,
        outcome,
    })
}

/// Samples `per_session` queries for every session. Seeds are derived per
/// session id so results do not depend on iteration order.
pub fn simulate_queries(sessions: &[LabeledSession], per_session: usize, master_seed: u64) -> Vec<QueryInstance> {
    let mut queries = Vec::new();
    for (idx, ls) in sessions.iter().enumerate() {
        let sub = derive_seed(master_seed, "query", crate::rng::fnv1a64(ls.id().as_bytes()));
        let mut rng = derived_rng(sub, "draw", 0);
        for _ in 0..per_session {
            if let Some(t_query) = sample_query_time(&ls.session, ls.label, &mut rng) {
                queries.push(make_query_instance(sessions, idx, t_query).expect("sampled inside window"));
            }
        }
    }
    queries
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<QueryInstance>,
    pub test: Vec<QueryInstance>,
    pub seed: u64,
    /// Strata with fewer than 6 sessions, reported rather than failed.
    pub warnings: Vec<String>,
}

/// Splits queries into train/test by session, stratified by observed vs
/// censored outcome. Within each stratum `ceil(n * test_fraction)` sessions
/// go to test; this rounding reproduces the published per-stratum counts
/// for a 1/6 fraction.
pub fn stratified_session_split(queries: &[QueryInstance], test_fraction: f64, seed: u64) -> DatasetSplit {
    let mut warnings = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (stratum, observed) in [("observed", true), ("censored", false)] {
        let mut idx: Vec<usize> = (0..queries.len())
            .filter(|&i| queries[i].outcome.is_observed() == observed)
            .collect();
        if idx.is_empty() {
            continue;
        }
        // Count sessions, not queries, so augmented runs stay session-disjoint.
        let mut session_ids: Vec<&str> = idx.iter().map(|&i| queries[i].session_id.as_str()).collect();
        session_ids.sort_unstable();
        session_ids.dedup();
        let n = session_ids.len();
        if n < 6 {
            warnings.push(format!("stratum {stratum} has only {n} sessions"));
        }
        let n_test = ((n as f64) * test_fraction).ceil() as usize;
        let mut rng = derived_rng(seed, "split", if observed { 0 } else { 1 });
        // Fisher-Yates over the deduplicated session-id list.
        let mut ids: Vec<String> = session_ids.iter().map(|s| s.to_string()).collect();
        for i in (1..ids.len()).rev() {
            let j = rng.random_range(0..=i);
            ids.swap(i, j);
        }
        let test_ids: std::collections::BTreeSet<&str> = ids[..n_test].iter().map(|s| s.as_str()).collect();
        idx.sort_unstable();
        for i in idx {
            if test_ids.contains(queries[i].session_id.as_str()) {
                test.push(queries[i].clone());
            } else {
                train.push(queries[i].clone());
            }
        }
    }
    DatasetSplit {
        train,
        test,
        seed,
        warnings,
    }
}

/// Writes the split manifest:
/// `session_id,stratum,assignment,t_query,outcome_kind,outcome_minutes`.
pub fn write_split_manifest<W: Write>(mut w: W, split: &DatasetSplit) -> std::io::Result<()> {
    writeln!(w, "session_id,stratum,assignment,t_query,outcome_kind,outcome_minutes")?;
    let mut rows: Vec<(&QueryInstance, &str)> = split
        .train
        .iter()
        .map(|q| (q, "train"))
        .chain(split.test.iter().map(|q| (q, "test")))
        .collect();
    rows.sort_by(|a, b| (&a.0.session_id, a.0.t_query).cmp(&(&b.0.session_id, b.0.t_query)));
    for (q, assignment) in rows {
        let (stratum, kind) = match q.outcome {
            Outcome::Life(_) => ("observed", "life"),
            Outcome::CensoredAtLeast(_) => ("censored", "censored_at_least"),
        };
        writeln!(
            w,
            "{},{},{},{},{},{}",
            q.session_id,
            stratum,
            assignment,
            q.t_query,
            kind,
            q.outcome.minutes()
        )?;
    }
    Ok(())
}
