//! Censoring-aware scoring: RMSE and Kendall's Tau over observed rows, the
//! concordance index over all rows, a paired bootstrap significance test, and
//! the 5-fold stability-variance experiment.
//!
//! Two concordance variants are provided. The default averages the pair score
//! over *all* unordered pairs, counting indeterminable pairs as 0.5; the
//! `harrell` variant averages over determinable pairs only. A pair is
//! determinable exactly when the smaller outcome time belongs to an observed
//! record and is strictly earlier; equal times are never determinable.
//! Prediction ties score 0.5 under both variants.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{apply_preprocessor, fit_preprocessor};
use crate::model::{fit_model, predict, ModelConfig};
use crate::query::Outcome;
use crate::rng::derived_rng;
use crate::session::Session;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub predicted: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric needs at least one observed record")]
    NoObservedRows,
    #[error("every observed pair is tied; Kendall's Tau is undefined")]
    AllPairsTied,
    #[error("no determinable pairs; the harrell concordance variant is undefined")]
    NoDeterminablePairs,
    #[error("paired inputs score different query ids: {detail}")]
    MismatchedIds { detail: String },
    #[error("session consumed {consumed}% but the stability list needs at least 2 whole percent")]
    InsufficientConsumption { consumed: u8 },
    #[error("stability experiment needs at least 25 sessions, got {0}")]
    TooFewSessions(usize),
    #[error("bootstrap replicate metric failed after {retries} redraws: {source}")]
    DegenerateReplicate {
        retries: usize,
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CIndexVariant {
    /// Average pair score over all unordered pairs; indeterminable pairs
    /// contribute 0.5.
    Paper,
    /// Average over determinable pairs only.
    Harrell,
}

impl FromStr for CIndexVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paper" => Ok(CIndexVariant::Paper),
            "harrell" => Ok(CIndexVariant::Harrell),
            other => Err(format!(
                "unknown concordance variant {other:?} (expected paper or harrell)"
            )),
        }
    }
}

/// Root mean square error over observed records only.
pub fn rmse(records: &[PredictionRecord]) -> Result<f64, EvalError> {
    let mut sse = 0.0;
    let mut n = 0usize;
    for r in records {
        if let Outcome::Life(actual) = r.outcome {
            sse += (r.predicted - actual).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::NoObservedRows);
    }
    Ok((sse / n as f64).sqrt())
}

/// τ = (C − D)/(C + D) over observed pairs; pairs tied in either list are
/// excluded from both counts. Quadratic scan — evaluation sets are small.
pub fn kendall_tau(records: &[PredictionRecord]) -> Result<f64, EvalError> {
    let observed: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| match r.outcome {
            Outcome::Life(actual) => Some((r.predicted, actual)),
            Outcome::CensoredAtLeast(_) => None,
        })
        .collect();
    let mut concordant = 0u64;
    let mut discordant = 0u64;
    for i in 0..observed.len() {
        for j in i + 1..observed.len() {
            let product = (observed[i].0 - observed[j].0) * (observed[i].1 - observed[j].1);
            if product > 0.0 {
                concordant += 1;
            } else if product < 0.0 {
                discordant += 1;
            }
        }
    }
    if concordant + discordant == 0 {
        return Err(EvalError::AllPairsTied);
    }
    Ok((concordant as f64 - discordant as f64) / (concordant as f64 + discordant as f64))
}

/// Counts over determinable pairs: prediction strictly agrees, strictly
/// disagrees, or ties.
struct PairCounts {
    agree: u64,
    disagree: u64,
    pred_tie: u64,
    total_pairs: u64,
}

impl PairCounts {
    fn determinable(&self) -> u64 {
        self.agree + self.disagree + self.pred_tie
    }

    fn score(&self, variant: CIndexVariant) -> Result<f64, EvalError> {
        let half_credit = match variant {
            CIndexVariant::Paper => {
                let indeterminable = self.total_pairs - self.determinable();
                self.pred_tie + indeterminable
            }
            CIndexVariant::Harrell => self.pred_tie,
        };
        let denominator = match variant {
            CIndexVariant::Paper => self.total_pairs,
            CIndexVariant::Harrell => self.determinable(),
        };
        if denominator == 0 {
            return match variant {
                // Zero pairs carry no evidence either way; documented as 0.5.
                CIndexVariant::Paper => Ok(0.5),
                CIndexVariant::Harrell => Err(EvalError::NoDeterminablePairs),
            };
        }
        Ok((self.agree as f64 + 0.5 * half_credit as f64) / denominator as f64)
    }
}

/// Fenwick (binary indexed) tree over compressed prediction ranks.
struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(size: usize) -> Self {
        Fenwick {
            tree: vec![0; size + 1],
        }
    }

    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks in [0, i].
    fn prefix(&self, i: usize) -> u64 {
        let mut i = i + 1;
        let mut sum = 0;
        while i > 0 {
            sum += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        sum
    }
}

fn count_pairs_fenwick(records: &[PredictionRecord]) -> PairCounts {
    let n = records.len();
    let mut ranks: Vec<f64> = records.iter().map(|r| r.predicted).collect();
    ranks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ranks.dedup();
    let rank_of = |p: f64| ranks.partition_point(|&v| v < p);

    // Sort by outcome time descending and sweep: when an observed record is
    // reached, every already-inserted record has a strictly later time, so
    // each such pair is determinable with the current record as the earlier
    // event. Agreement then means the later record got the larger prediction.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .outcome
            .minutes()
            .partial_cmp(&records[a].outcome.minutes())
            .unwrap()
    });
    let mut fen = Fenwick::new(ranks.len());
    let mut counts = PairCounts {
        agree: 0,
        disagree: 0,
        pred_tie: 0,
        total_pairs: (n as u64) * (n as u64 - 1) / 2,
    };
    let mut inserted = 0u64;
    let mut at = 0;
    while at < n {
        let mut group_end = at;
        let time = records[order[at]].outcome.minutes();
        while group_end < n && records[order[group_end]].outcome.minutes() == time {
            group_end += 1;
        }
        for &i in &order[at..group_end] {
            if records[i].outcome.is_observed() && inserted > 0 {
                let r = rank_of(records[i].predicted);
                let below = if r == 0 { 0 } else { fen.prefix(r - 1) };
                let at_rank = fen.prefix(r) - below;
                counts.agree += inserted - below - at_rank;
                counts.disagree += below;
                counts.pred_tie += at_rank;
            }
        }
        for &i in &order[at..group_end] {
            fen.add(rank_of(records[i].predicted));
            inserted += 1;
        }
        at = group_end;
    }
    counts
}

/// Concordance index via a Fenwick-tree sweep, O(n log n).
pub fn concordance_index(
    records: &[PredictionRecord],
    variant: CIndexVariant,
) -> Result<f64, EvalError> {
    count_pairs_fenwick(records).score(variant)
}

/// Naive O(n²) double loop over the same pair rules; the verification oracle
/// for [`concordance_index`].
pub fn concordance_oracle(
    records: &[PredictionRecord],
    variant: CIndexVariant,
) -> Result<f64, EvalError> {
    let n = records.len();
    let mut counts = PairCounts {
        agree: 0,
        disagree: 0,
        pred_tie: 0,
        total_pairs: (n as u64) * (n as u64 - 1) / 2,
    };
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&records[i], &records[j]);
            // Orient so `first` has the strictly smaller outcome time.
            let (first, second) = if a.outcome.minutes() < b.outcome.minutes() {
                (a, b)
            } else if b.outcome.minutes() < a.outcome.minutes() {
                (b, a)
            } else {
                continue;
            };
            if !first.outcome.is_observed() {
                continue;
            }
            if first.predicted < second.predicted {
                counts.agree += 1;
            } else if first.predicted > second.predicted {
                counts.disagree += 1;
            } else {
                counts.pred_tie += 1;
            }
        }
    }
    counts.score(variant)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Rmse,
    Tau,
    CIndex,
}

impl Metric {
    pub fn eval(self, records: &[PredictionRecord], variant: CIndexVariant) -> Result<f64, EvalError> {
        match self {
            Metric::Rmse => rmse(records),
            Metric::Tau => kendall_tau(records),
            Metric::CIndex => concordance_index(records, variant),
        }
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rmse" => Ok(Metric::Rmse),
            "tau" => Ok(Metric::Tau),
            "c_index" | "cindex" => Ok(Metric::CIndex),
            other => Err(format!(
                "unknown metric {other:?} (expected rmse, tau, or c_index)"
            )),
        }
    }
}

/// All three scores plus stratum counts for one prediction set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_observed: usize,
    pub n_censored: usize,
    pub rmse: f64,
    pub tau: f64,
    pub c_index: f64,
    pub c_variant: CIndexVariant,
}

pub fn evaluate(
    records: &[PredictionRecord],
    variant: CIndexVariant,
) -> Result<MetricReport, EvalError> {
    let n_observed = records.iter().filter(|r| r.outcome.is_observed()).count();
    Ok(MetricReport {
        n_observed,
        n_censored: records.len() - n_observed,
        rmse: rmse(records)?,
        tau: kendall_tau(records)?,
        c_index: concordance_index(records, variant)?,
        c_variant: variant,
    })
}

/// Plot-ready table, one row per (feature set, model) experiment.
pub fn write_metric_table<W: Write>(
    rows: &[(String, String, MetricReport)],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "feature_set,model,rmse,tau,c_index,n_observed,n_censored")?;
    for (feature_set, model, report) in rows {
        writeln!(
            w,
            "{feature_set},{model},{:.4},{:.4},{:.4},{},{}",
            report.rmse, report.tau, report.c_index, report.n_observed, report.n_censored
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub observed_delta: f64,
    pub replicate_deltas: Vec<f64>,
    pub p_value: f64,
    pub seed: u64,
}

/// How many fresh draws to attempt when a replicate's resample makes the
/// metric undefined (for example an all-censored RMSE resample). Redraws come
/// from the same seeded stream, so results stay deterministic.
const REPLICATE_RETRIES: usize = 100;

/// Paired bootstrap with the shifted null: resample query ids with
/// replacement, shift the replicate deltas to mean zero, and report
/// p = (1 + #{|shifted| ≥ |observed|}) / (B + 1).
pub fn bootstrap_shift_test(
    records_a: &[PredictionRecord],
    records_b: &[PredictionRecord],
    metric: Metric,
    variant: CIndexVariant,
    iterations: usize,
    seed: u64,
) -> Result<BootstrapResult, EvalError> {
    if records_a.len() != records_b.len() {
        return Err(EvalError::MismatchedIds {
            detail: format!("{} vs {} records", records_a.len(), records_b.len()),
        });
    }
    let index_b: BTreeMap<&str, usize> = records_b
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    if index_b.len() != records_b.len() {
        return Err(EvalError::MismatchedIds {
            detail: "duplicate query ids".into(),
        });
    }
    // Pair B's records into A's order so one index resamples both sides.
    let mut paired_b = Vec::with_capacity(records_a.len());
    for r in records_a {
        match index_b.get(r.id.as_str()) {
            Some(&i) => paired_b.push(records_b[i].clone()),
            None => {
                return Err(EvalError::MismatchedIds {
                    detail: format!("id {:?} present in A only", r.id),
                })
            }
        }
    }
    let observed_delta =
        metric.eval(records_a, variant)? - metric.eval(&paired_b, variant)?;
    let n = records_a.len();
    let mut replicate_deltas = Vec::with_capacity(iterations);
    for replicate in 0..iterations {
        let mut rng = derived_rng(seed, "bootstrap-replicate", replicate as u64);
        let mut last_err = None;
        let mut delta = None;
        for _ in 0..REPLICATE_RETRIES {
            let mut sample_a = Vec::with_capacity(n);
            let mut sample_b = Vec::with_capacity(n);
            for _ in 0..n {
                let i = rng.random_range(0..n);
                sample_a.push(records_a[i].clone());
                sample_b.push(paired_b[i].clone());
            }
            match (
                metric.eval(&sample_a, variant),
                metric.eval(&sample_b, variant),
            ) {
                (Ok(a), Ok(b)) => {
                    delta = Some(a - b);
                    break;
                }
                (Err(e), _) | (_, Err(e)) => last_err = Some(e),
            }
        }
        match delta {
            Some(d) => replicate_deltas.push(d),
            None => {
                return Err(EvalError::DegenerateReplicate {
                    retries: REPLICATE_RETRIES,
                    source: Box::new(last_err.expect("retry loop ran at least once")),
                })
            }
        }
    }
    let mean = replicate_deltas.iter().sum::<f64>() / iterations as f64;
    let exceed = replicate_deltas
        .iter()
        .filter(|&&d| (d - mean).abs() >= observed_delta.abs())
        .count();
    Ok(BootstrapResult {
        observed_delta,
        replicate_deltas,
        p_value: (1 + exceed) as f64 / (iterations + 1) as f64,
        seed,
    })
}

/// Population variance of the per-1% consumption times: for each whole
/// percent below `b_start`, the minutes the session took to consume it. The
/// list spans the whole session regardless of the censoring label.
pub fn session_stability_variance(session: &Session) -> Result<f64, EvalError> {
    let consumed = session.b_start - session.b_end;
    if consumed < 2 {
        return Err(EvalError::InsufficientConsumption { consumed });
    }
    // First time each level (or lower) is reached; entries are sorted with
    // non-increasing levels, so a forward scan suffices.
    let reach = |target: u8| -> i64 {
        session
            .entries
            .iter()
            .find(|e| e.level <= target)
            .map(|e| e.timestamp)
            .expect("target is within the session's level range")
    };
    let times: Vec<f64> = (session.b_end..session.b_start)
        .map(|level| (reach(level) - reach(level + 1)) as f64 / 60.0)
        .collect();
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    Ok(times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / times.len() as f64)
}

/// One session's worth of input to the stability experiment: its variance,
/// its query outcome, and one raw (unstandardized) feature row per cumulative
/// feature set.
#[derive(Debug, Clone)]
pub struct StabilityInput {
    pub session_id: String,
    pub variance: f64,
    pub outcome: Outcome,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityGroup {
    /// 0 = lowest variance quintile, 4 = highest.
    pub group: usize,
    pub n_sessions: usize,
    pub min_variance: f64,
    pub max_variance: f64,
    /// Validation τ per cumulative feature set, in input order.
    pub taus: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub groups: Vec<StabilityGroup>,
}

pub fn write_stability_csv<W: Write>(report: &StabilityReport, mut w: W) -> std::io::Result<()> {
    writeln!(w, "group,feature_set,tau,n_sessions,min_variance,max_variance")?;
    for g in &report.groups {
        for (si, tau) in g.taus.iter().enumerate() {
            writeln!(
                w,
                "{},{},{:.4},{},{:.6},{:.6}",
                g.group, si, tau, g.n_sessions, g.min_variance, g.max_variance
            )?;
        }
    }
    Ok(())
}

/// Splits sessions into 5 nearest-rank quintiles by stability variance (ties
/// broken by session id), then runs 5-fold validation: each quintile in turn
/// is the validation set and the other four train one model per cumulative
/// feature set. Reports validation τ per group per set.
pub fn stability_experiment(
    sessions: &[StabilityInput],
    cfg: &ModelConfig,
) -> Result<StabilityReport, EvalError> {
    let n = sessions.len();
    if n < 25 {
        return Err(EvalError::TooFewSessions(n));
    }
    let n_sets = sessions[0].rows.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        sessions[a]
            .variance
            .partial_cmp(&sessions[b].variance)
            .unwrap()
            .then_with(|| sessions[a].session_id.cmp(&sessions[b].session_id))
    });
    let bound = |k: usize| (k * n).div_ceil(5);
    let mut groups = Vec::with_capacity(5);
    for g in 0..5 {
        let validation: Vec<usize> = order[bound(g)..bound(g + 1)].to_vec();
        let training: Vec<usize> = order[..bound(g)]
            .iter()
            .chain(&order[bound(g + 1)..])
            .copied()
            .collect();
        let mut taus = Vec::with_capacity(n_sets);
        for set in 0..n_sets {
            // Models train on observed outcomes only.
            let mut train_rows = Vec::new();
            let mut train_y = Vec::new();
            for &i in &training {
                if let Outcome::Life(minutes) = sessions[i].outcome {
                    train_rows.push(sessions[i].rows[set].clone());
                    train_y.push(minutes);
                }
            }
            let pre = fit_preprocessor(&train_rows)?;
            let train_rows: Vec<Vec<f64>> = train_rows
                .iter()
                .map(|r| apply_preprocessor(&pre, r))
                .collect::<Result<_, _>>()?;
            let model = fit_model(cfg, &train_rows, &train_y, set as u64)?;
            let val_rows: Vec<Vec<f64>> = validation
                .iter()
                .map(|&i| apply_preprocessor(&pre, &sessions[i].rows[set]))
                .collect::<Result<_, _>>()?;
            let predictions = predict(&model, &val_rows, set as u64)?;
            let records: Vec<PredictionRecord> = validation
                .iter()
                .zip(&predictions)
                .map(|(&i, &p)| PredictionRecord {
                    id: sessions[i].session_id.clone(),
                    predicted: p,
                    outcome: sessions[i].outcome,
                })
                .collect();
            taus.push(kendall_tau(&records)?);
        }
        groups.push(StabilityGroup {
            group: g,
            n_sessions: validation.len(),
            min_variance: sessions[validation[0]].variance,
            max_variance: sessions[*validation.last().expect("quintile is non-empty")].variance,
            taus,
        });
    }
    Ok(StabilityReport { groups })
}
