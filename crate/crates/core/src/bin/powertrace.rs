//! Pipeline driver: synth → ingest → sessionize → stats → simulate →
//! featurize → train → predict → evaluate (plus bootstrap and stability).
//!
//! Each stage reads the raw logs and/or prior-stage artifacts, writes its own
//! files into the output directory, and extends `run_manifest.json` with row
//! counts and input digests. Exit codes: 0 success, 1 usage/config error,
//! 2 data error (missing artifact, malformed file).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand};

use powertrace::config::{ConfigError, PipelineConfig, RunManifest};
use powertrace::eval::{
    bootstrap_shift_test, evaluate, session_stability_variance, stability_experiment,
    write_metric_table, write_stability_csv, PredictionRecord, StabilityInput,
};
use powertrace::features::{
    apply_preprocessor, build_schema, extract_features, feature_set_parse, fit_preprocessor,
    FeatureSchema, Preprocessor, UserHistoryIndex,
};
use powertrace::ingest::{
    build_user_trace, open_log, parse_app_log, parse_battery_log, parse_broadcast_log,
    parse_screen_log, parse_sensor_log, ParseOptions, SensorGroup, UserTrace,
};
use powertrace::model::{fit_model, load_model, predict, save_model};
use powertrace::query::{
    simulate_queries, stratified_session_split, write_split_manifest, LabeledSession, Outcome,
};
use powertrace::rng::{derive_seed, fnv1a64};
use powertrace::session::{
    empirical_cdfs, filter_sessions, label_session, segment_sessions, write_sessions_csv,
    FilterFlags, Session,
};
use powertrace::synth::generate_world;

#[derive(Parser)]
#[command(
    name = "powertrace",
    version,
    about = "Censoring-aware battery-life prediction pipeline"
)]
struct Cli {
    /// Pipeline config file (line-oriented `key = value` with [sections]).
    #[arg(long, global = true, default_value = "powertrace.conf")]
    config: PathBuf,
    /// Override a config key, e.g. `--set model.kind=linear`. Repeatable;
    /// overrides win over the file.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    stage: Stage,
}

#[derive(Subcommand)]
enum Stage {
    /// Generate a synthetic telemetry world into the data directory.
    Synth,
    /// Parse and validate the raw logs; report row and error counts.
    Ingest,
    /// Segment, filter, and label discharge sessions.
    Sessionize,
    /// Write empirical CDF tables of session statistics.
    Stats,
    /// Sample query times and split sessions into train/test.
    Simulate,
    /// Extract raw feature matrices for the train and test queries.
    Featurize,
    /// Fit the preprocessor and the configured model on the training matrix.
    Train,
    /// Predict remaining life for the test matrix.
    Predict,
    /// Score predictions with RMSE, Kendall's Tau, and the C-index.
    Evaluate,
    /// Paired bootstrap significance test between two prediction files.
    Bootstrap {
        /// Baseline predictions.csv.
        baseline: PathBuf,
        /// Challenger predictions.csv.
        challenger: PathBuf,
    },
    /// Stability-variance quintile experiment over the training sessions.
    Stability,
}

enum CliError {
    Usage(String),
    Data(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

macro_rules! data_error_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}
data_error_from!(
    powertrace::ingest::IngestError,
    powertrace::session::SessionError,
    powertrace::features::FeatureError,
    powertrace::model::ModelError,
    powertrace::eval::EvalError,
    powertrace::synth::SynthError
);

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
            std::process::exit(code);
        }
    };
    std::process::exit(match run(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{}", Cli::command().render_usage());
            1
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    });
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = if cli.config.exists() {
        PipelineConfig::load(&cli.config)?
    } else if cli.config == Path::new("powertrace.conf") {
        PipelineConfig::default()
    } else {
        return Err(CliError::Usage(format!(
            "config file {} does not exist",
            cli.config.display()
        )));
    };
    for raw in &cli.overrides {
        let (key, value) = raw.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("override {raw:?} must be section.key=value"))
        })?;
        config.set(key, value)?;
    }
    let out_dir = config.out_dir();
    std::fs::create_dir_all(&out_dir)?;
    let manifest_path = out_dir.join("run_manifest.json");
    let mut manifest = RunManifest::load_or_new(&manifest_path, &config)?;
    match cli.stage {
        Stage::Synth => stage_synth(&config, &mut manifest)?,
        Stage::Ingest => stage_ingest(&config, &mut manifest)?,
        Stage::Sessionize => stage_sessionize(&config, &mut manifest)?,
        Stage::Stats => stage_stats(&config, &mut manifest)?,
        Stage::Simulate => stage_simulate(&config, &mut manifest)?,
        Stage::Featurize => stage_featurize(&config, &mut manifest)?,
        Stage::Train => stage_train(&config, &mut manifest)?,
        Stage::Predict => stage_predict(&config, &mut manifest)?,
        Stage::Evaluate => stage_evaluate(&config, &mut manifest)?,
        Stage::Bootstrap {
            baseline,
            challenger,
        } => stage_bootstrap(&config, &mut manifest, &baseline, &challenger)?,
        Stage::Stability => stage_stability(&config, &mut manifest)?,
    }
    manifest.save(&manifest_path)?;
    Ok(())
}

// ---------------------------------------------------------------- loading

const LOG_FILES: [&str; 6] = [
    "battery.csv",
    "screen.csv",
    "broadcast.csv",
    "app.csv",
    "t1.csv",
    "t2.csv",
];

/// Parses the raw logs into per-user traces. `battery.csv` is required; the
/// other streams default to empty when absent.
fn load_traces(
    config: &PipelineConfig,
    manifest: &mut RunManifest,
) -> Result<BTreeMap<String, UserTrace>, CliError> {
    let dir = config.data_dir();
    let opts = ParseOptions {
        n_broadcast_types: config.feature_config()?.n_broadcast_types,
        ..ParseOptions::default()
    };
    let battery_path = dir.join("battery.csv");
    if !battery_path.exists() {
        return Err(CliError::Data(format!(
            "missing {}; run `powertrace synth` or point general.data_dir at your logs",
            battery_path.display()
        )));
    }
    for name in LOG_FILES {
        let path = dir.join(name);
        if path.exists() {
            manifest.record_digest(&path)?;
        }
    }
    let battery = parse_battery_log(open_log(&battery_path)?, &opts)?;
    let optional = |name: &str| dir.join(name);
    let screen = match optional("screen.csv") {
        p if p.exists() => parse_screen_log(open_log(&p)?, &opts)?.records,
        _ => Vec::new(),
    };
    let broadcast = match optional("broadcast.csv") {
        p if p.exists() => parse_broadcast_log(open_log(&p)?, &opts)?.records,
        _ => Vec::new(),
    };
    let app = match optional("app.csv") {
        p if p.exists() => parse_app_log(open_log(&p)?, &opts)?.records,
        _ => Vec::new(),
    };
    let mut sensors = Vec::new();
    for (name, group) in [("t1.csv", SensorGroup::T1), ("t2.csv", SensorGroup::T2)] {
        let p = optional(name);
        if p.exists() {
            sensors.extend(parse_sensor_log(open_log(&p)?, group, &opts)?.records);
        }
    }
    Ok(build_user_trace(
        battery.records,
        screen,
        broadcast,
        app,
        sensors,
    ))
}

/// Segments, filters, and labels sessions across every user, in user order.
fn load_sessions(
    config: &PipelineConfig,
    traces: &BTreeMap<String, UserTrace>,
) -> Result<Vec<LabeledSession>, CliError> {
    let seg = config.segmentation()?;
    seg.validate()?;
    let mut out = Vec::new();
    for trace in traces.values() {
        let sessions = filter_sessions(
            segment_sessions(trace, &seg),
            &seg,
            FilterFlags::default(),
        );
        for session in sessions {
            let label = label_session(&session, &seg);
            out.push(LabeledSession { session, label });
        }
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn read_artifact(path: &Path, produced_by: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|_| {
        CliError::Data(format!(
            "missing artifact {}; run `powertrace {produced_by}` first",
            path.display()
        ))
    })
}

// ----------------------------------------------------------------- stages

fn stage_synth(config: &PipelineConfig, manifest: &mut RunManifest) -> Result<(), CliError> {
    let cfg = config.synth_config()?;
    let model = config.regime_model()?;
    let world = generate_world(&cfg, &model, &config.data_dir())?;
    manifest.record_count("synth", "users", cfg.n_users as u64);
    manifest.record_count("synth", "manifest_events", world.events.len() as u64);
    println!(
        "synth: {} users, {} days, {} ground-truth events",
        cfg.n_users,
        cfg.days,
        world.events.len()
    );
    Ok(())
}

fn stage_ingest(config: &PipelineConfig, manifest: &mut RunManifest) -> Result<(), CliError> {
    let traces = load_traces(config, manifest)?;
    let mut battery = 0u64;
    let mut events = 0u64;
    for trace in traces.values() {
        battery += trace.battery.len() as u64;
        events += (trace.screen.len()
            + trace.broadcast.len()
            + trace.app.len()
            + trace.sensor_t1.len()
            + trace.sensor_t2.len()) as u64;
    }
    manifest.record_count("ingest", "users", traces.len() as u64);
    manifest.record_count("ingest", "battery_rows", battery);
    manifest.record_count("ingest", "other_rows", events);
    println!(
        "ingest: {} users, {battery} battery rows, {events} other rows",
        traces.len()
    );
    Ok(())
}

fn stage_sessionize(config: &PipelineConfig, manifest: &mut RunManifest) -> Result<(), CliError> {
    let traces = load_traces(config, manifest)?;
    let sessions = load_sessions(config, &traces)?;
    let seg = config.segmentation()?;
    let plain: Vec<Session> = sessions.iter().map(|ls| ls.session.clone()).collect();
    let mut w = create(&config.out_dir().join("sessions.csv"))?;
    write_sessions_csv(&mut w, &plain, &seg)?;
    w.flush()?;
    let observed = sessions
        .iter()
        .filter(|ls| matches!(ls.label, powertrace::session::SessionLabel::Observed { .. }))
        .count();
    manifest.record_count("sessionize", "sessions", sessions.len() as u64);
    manifest.record_count("sessionize", "observed", observed as u64);
    manifest.record_count("sessionize", "censored", (sessions.len() - observed) as u64);
    println!(
        "sessionize: {} sessions ({observed} observed, {} censored)",
        sessions.len(),
        sessions.len() - observed
    );
    Ok(())
}

fn stage_stats(config: &PipelineConfig, manifest: &mut RunManifest) -> Result<(), CliError> {
    let traces = load_traces(config, manifest)?;
    let sessions = load_sessions(config, &traces)?;
    let plain: Vec<Session> = sessions.iter().map(|ls| ls.session.clone()).collect();
    let cdfs = empirical_cdfs(&plain)?;
    let out = config.out_dir();
    for (name, table) in [
        ("cdf_duration_hours.csv", &cdfs.duration_hours),
        ("cdf_begin_level.csv", &cdfs.begin_level),
        ("cdf_end_level.csv", &cdfs.end_level),
        ("cdf_consumption.csv", &cdfs.consumption),
    ] {
        let mut w = create(&out.join(name))?;
        table.write_csv(&mut w)?;
        w.flush()?;
    }
    manifest.record_count("stats", "sessions", plain.len() as u64);
    println!("stats: wrote 4 CDF tables over {} sessions", plain.len());
    Ok(())
}

fn stage_simulate(config: &PipelineConfig, manifest: &mut RunManifest) -> Result<(), CliError> {
    let traces = load_traces(config, manifest)?;
    let sessions = load_sessions(config, &traces)?;
    let master = config.master_seed()?;
    let queries = simulate_queries(
        &sessions,
        config.queries_per_session()?,
        derive_seed(master, "query-sim", 0),
    );
    let split = stratified_session_split(
        &queries,
        config.test_fraction()?,
        derive_seed(master, "split", 0),
    );
    for warning in &split.warnings {
        eprintln!("warning: {warning}");
    }
    let mut w = create(&config.out_dir().join("split.csv"))?;
    write_split_manifest(&mut w, &split)?;
    w.flush()?;
    manifest.record_count("simulate", "queries", queries.len() as u64);
    manifest.record_count("simulate", "train", split.train.len() as u64);
    manifest.record_count("simulate", "test", split.test.len() as u64);
    println!(
        "simulate: {} queries ({} train, {} test)",
        queries.len(),
        split.train.len(),
        split.test.len()
    );
    Ok(())
}

/// One row of the split manifest read back from disk.
struct SplitRow {
    session_id: String,
    assignment: String,
    t_query: i64,
    outcome: Outcome,
}

fn read_split(config: &PipelineConfig) -> Result<Vec<SplitRow>, CliError> {
    let path = config.out_dir().join("split.csv");
    let text = read_artifact(&path, "simulate")?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || CliError::Data(format!("{}: bad line {}", path.display(), i + 1));
        if f.len() != 6 {
            return Err(bad());
        }
        let minutes: f64 = f[5].parse().map_err(|_| bad())?;
        rows.push(SplitRow {
            session_id: f[0].to_string(),
            assignment: f[2].to_string(),
            t_query: f[3].parse().map_err(|_| bad())?,
            outcome: match f[4] {
                "life" => Outcome::Life(minutes),
                "censored_at_least" => Outcome::CensoredAtLeast(minutes),
                _ => return Err(bad()),
            },
        });
    }
    Ok(rows)
}

fn query_id(session_id: &str, t_query: i64) -> String {
    format!("{session_id}@{t_query}")
}

/// Fingerprint of the (schema, selected columns) pair; stored with models so
/// predict can reject matrices built under a different layout.
fn matrix_fingerprint(schema: &FeatureSchema, columns: &[usize]) -> u64 {
    let mut text = format!("{:016x}", schema.fingerprint());
    for c in columns {
        text.push_str(&format!(":{c}"));
    }
    fnv1a64(text.as_bytes())
}

fn write_feature_rows(
    path: &Path,
    schema: &FeatureSchema,
    columns: &[usize],
    rows: &[(String, i64, Outcome, Vec<f64>)],
) -> Result<(), CliError> {
    let mut w = create(path)?;
    write!(w, "session_id,t_query,outcome_kind,outcome_minutes")?;
    for &c in columns {
        write!(w, ",{}", schema.column_names[c])?;
    }
    writeln!(w)?;
    for (session_id, t_query, outcome, features) in rows {
        let kind = if outcome.is_observed() { "observed" } else { "censored" };
        write!(w, "{session_id},{t_query},{kind},{}", outcome.minutes())?;
        for &c in columns {
            if features[c].is_nan() {
                write!(w, ",")?;
            } else {
                write!(w, ",{}", features[c])?;
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

struct FeatureRows {
    ids: Vec<String>,
    outcomes: Vec<Outcome>,
    rows: Vec<Vec<f64>>,
}

fn read_feature_rows(path: &Path) -> Result<FeatureRows, CliError> {
    let text = read_artifact(path, "featurize")?;
    let mut out = FeatureRows {
        ids: Vec::new(),
        outcomes: Vec::new(),
        rows: Vec::new(),
    };
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || CliError::Data(format!("{}: bad line {}", path.display(), i + 1));
        let mut f = line.split(',');
        let session_id = f.next().ok_or_else(bad)?;
        let t_query: i64 = f.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let kind = f.next().ok_or_else(bad)?;
        let minutes: f64 = f.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        out.ids.push(query_id(session_id, t_query));
        out.outcomes.push(match kind {
            "observed" => Outcome::Life(minutes),
            "censored" => Outcome::CensoredAtLeast(minutes),
            _ => return Err(bad()),
        });
        let row: Result<Vec<f64>, CliError> = f
            .map(|cell| {
                if cell.is_empty() {
                    Ok(f64::NAN)
                } else {
                    cell.parse().map_err(|_| bad())
                }
            })
            .collect();
        out.rows.push(row?);
    }
    Ok(out)
}

fn stage_featurize(config: &PipelineConfig, manifest: &mut RunManifest) -> Result<(), CliError> {
    let traces = load_traces(config, manifest)?;
    let sessions = load_sessions(config, &traces)?;
    let split = read_split(config)?;
    let by_id: BTreeMap<String, &LabeledSession> =
        sessions.iter().map(|ls| (ls.id(), ls)).collect();
    let train_sessions: Vec<&Session> = {
        let mut ids: Vec<&str> = split
            .iter()
            .filter(|r| r.assignment == "train")
            .map(|r| r.session_id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids.iter()
            .map(|id| {
                by_id
                    .get(*id)
                    .map(|ls| &ls.session)
                    .ok_or_else(|| CliError::Data(format!("split references unknown session {id}")))
            })
            .collect::<Result<_, _>>()?
    };
    let feature_config = config.feature_config()?;
    let schema = build_schema(&feature_config, &traces, &train_sessions);
    let groups = feature_set_parse(&config.feature_set())?;
    let columns = schema.columns_for(&groups)?;
    let plain: Vec<Session> = sessions.iter().map(|ls| ls.session.clone()).collect();
    let history = UserHistoryIndex::build(&plain, &traces, feature_config.utc_offset_secs);

    let out = config.out_dir();
    std::fs::write(out.join("schema.json"), schema.to_json())?;
    for assignment in ["train", "test"] {
        let mut rows = Vec::new();
        for r in split.iter().filter(|r| r.assignment == assignment) {
            let ls = by_id.get(&r.session_id).ok_or_else(|| {
                CliError::Data(format!("split references unknown session {}", r.session_id))
            })?;
            let trace = &traces[&ls.session.user_id];
            let features = extract_features(&schema, trace, &ls.session, r.t_query, &history);
            rows.push((r.session_id.clone(), r.t_query, r.outcome, features));
        }
        let name = format!("features_{assignment}.csv");
        write_feature_rows(&out.join(name), &schema, &columns, &rows)?;
        manifest.record_count("featurize", &format!("{assignment}_rows"), rows.len() as u64);
    }
    let meta = serde_json::json!({
        "feature_set": config.feature_set(),
        "n_columns": columns.len(),
        "fingerprint": format!("{:016x}", matrix_fingerprint(&schema, &columns)),
    });
    std::fs::write(out.join("features_meta.json"), meta.to_string())?;
    manifest.record_count("featurize", "columns", columns.len() as u64);
    println!(
        "featurize: {} columns for set {}",
        columns.len(),
        config.feature_set()
    );
    Ok(())
}

fn read_fingerprint(config: &PipelineConfig) -> Result<u64, CliError> {
    let path = config.out_dir().join("features_meta.json");
    let text = read_artifact(&path, "featurize")?;
    let meta: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Data(e.to_string()))?;
    let hex = meta["fingerprint"]
        .as_str()
        .ok_or_else(|| CliError::Data("features_meta.json lacks a fingerprint".into()))?;
    u64::from_str_radix(hex, 16).map_err(|e| CliError::Data(e.to_string()))
}

fn stage_train(config: &PipelineConfig, manifest: &mut RunManifest) -> Result<(), CliError> {
    let out = config.out_dir();
    let data = read_feature_rows(&out.join("features_train.csv"))?;
    let fingerprint = read_fingerprint(config)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, outcome) in data.outcomes.iter().enumerate() {
        if let Outcome::Life(minutes) = outcome {
            rows.push(data.rows[i].clone());
            targets.push(*minutes);
        }
    }
    let preprocessor = fit_preprocessor(&rows)?;
    let rows: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| apply_preprocessor(&preprocessor, r))
        .collect::<Result<_, _>>()?;
    let model_cfg = config.model_config()?;
    let model = fit_model(&model_cfg, &rows, &targets, fingerprint)?;
    std::fs::write(
        out.join("preprocessor.json"),
        serde_json::to_string(&preprocessor).expect("preprocessor serializes"),
    )?;
    let mut w = create(&out.join("model.json"))?;
    save_model(&model, &mut w)?;
    w.flush()?;
    manifest.record_count("train", "rows", rows.len() as u64);
    println!(
        "train: fitted {} on {} observed rows",
        model_cfg.kind.as_str(),
        rows.len()
    );
    Ok(())
}

fn stage_predict(config: &PipelineConfig, manifest: &mut RunManifest) -> Result<(), CliError> {
    let out = config.out_dir();
    let data = read_feature_rows(&out.join("features_test.csv"))?;
    let fingerprint = read_fingerprint(config)?;
    let preprocessor: Preprocessor =
        serde_json::from_str(&read_artifact(&out.join("preprocessor.json"), "train")?)
            .map_err(|e| CliError::Data(e.to_string()))?;
    let model = load_model(File::open(out.join("model.json")).map_err(|_| {
        CliError::Data("missing artifact model.json; run `powertrace train` first".into())
    })?)?;
    let rows: Vec<Vec<f64>> = data
        .rows
        .iter()
        .map(|r| apply_preprocessor(&preprocessor, r))
        .collect::<Result<_, _>>()?;
    let predictions = predict(&model, &rows, fingerprint)?;
    let mut w = create(&out.join("predictions.csv"))?;
    writeln!(w, "query_id,predicted,outcome_kind,outcome_minutes")?;
    for ((id, outcome), p) in data.ids.iter().zip(&data.outcomes).zip(&predictions) {
        let kind = if outcome.is_observed() { "observed" } else { "censored" };
        writeln!(w, "{id},{p},{kind},{}", outcome.minutes())?;
    }
    w.flush()?;
    manifest.record_count("predict", "rows", predictions.len() as u64);
    println!("predict: {} rows", predictions.len());
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, CliError> {
    let text = read_artifact(path, "predict")?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || CliError::Data(format!("{}: bad line {}", path.display(), i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let minutes: f64 = f[3].parse().map_err(|_| bad())?;
        records.push(PredictionRecord {
            id: f[0].to_string(),
            predicted: f[1].parse().map_err(|_| bad())?,
            outcome: match f[2] {
                "observed" => Outcome::Life(minutes),
                "censored" => Outcome::CensoredAtLeast(minutes),
                _ => return Err(bad()),
            },
        });
    }
    Ok(records)
}

fn stage_evaluate(config: &PipelineConfig, manifest: &mut RunManifest) -> Result<(), CliError> {
    let out = config.out_dir();
    let records = read_predictions(&out.join("predictions.csv"))?;
    let report = evaluate(&records, config.c_index_variant()?)?;
    let label = (
        config.feature_set(),
        config.model_config()?.kind.as_str().to_string(),
        report.clone(),
    );
    let mut table = Vec::new();
    write_metric_table(std::slice::from_ref(&label), &mut table)?;
    print!("{}", String::from_utf8_lossy(&table));
    std::fs::write(out.join("metrics.csv"), table)?;
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    manifest.record_count("evaluate", "observed", report.n_observed as u64);
    manifest.record_count("evaluate", "censored", report.n_censored as u64);
    Ok(())
}

fn stage_bootstrap(
    config: &PipelineConfig,
    manifest: &mut RunManifest,
    baseline: &Path,
    challenger: &Path,
) -> Result<(), CliError> {
    let a = read_predictions(challenger)?;
    let b = read_predictions(baseline)?;
    let metric = config.bootstrap_metric()?;
    let iterations = config.bootstrap_iterations()?;
    let result = bootstrap_shift_test(
        &a,
        &b,
        metric,
        config.c_index_variant()?,
        iterations,
        derive_seed(config.master_seed()?, "bootstrap", 0),
    )?;
    let summary = serde_json::json!({
        "metric": format!("{metric:?}").to_lowercase(),
        "iterations": iterations,
        "observed_delta": result.observed_delta,
        "p_value": result.p_value,
    });
    std::fs::write(
        config.out_dir().join("bootstrap.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    manifest.record_count("bootstrap", "iterations", iterations as u64);
    println!(
        "bootstrap: delta {:+.4}, p = {:.4} over {} replicates",
        result.observed_delta, result.p_value, iterations
    );
    Ok(())
}

fn stage_stability(config: &PipelineConfig, manifest: &mut RunManifest) -> Result<(), CliError> {
    let traces = load_traces(config, manifest)?;
    let sessions = load_sessions(config, &traces)?;
    let split = read_split(config)?;
    let by_id: BTreeMap<String, &LabeledSession> =
        sessions.iter().map(|ls| (ls.id(), ls)).collect();
    let feature_config = config.feature_config()?;
    let train_sessions: Vec<&Session> = {
        let mut ids: Vec<&str> = split
            .iter()
            .filter(|r| r.assignment == "train")
            .map(|r| r.session_id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids.iter().filter_map(|id| by_id.get(*id)).map(|ls| &ls.session).collect()
    };
    let schema = build_schema(&feature_config, &traces, &train_sessions);
    let plain: Vec<Session> = sessions.iter().map(|ls| ls.session.clone()).collect();
    let history = UserHistoryIndex::build(&plain, &traces, feature_config.utc_offset_secs);
    let set_columns: Vec<Vec<usize>> = config
        .stability_feature_sets()
        .iter()
        .map(|expr| Ok(schema.columns_for(&feature_set_parse(expr)?)?))
        .collect::<Result<_, CliError>>()?;

    // One input per training session with a query; sessions that consumed
    // less than 2% have no defined variance and are skipped.
    let mut inputs = Vec::new();
    let mut skipped = 0u64;
    for r in split.iter().filter(|r| r.assignment == "train") {
        let Some(ls) = by_id.get(&r.session_id) else { continue };
        let variance = match session_stability_variance(&ls.session) {
            Ok(v) => v,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let trace = &traces[&ls.session.user_id];
        let full = extract_features(&schema, trace, &ls.session, r.t_query, &history);
        inputs.push(StabilityInput {
            session_id: r.session_id.clone(),
            variance,
            outcome: r.outcome,
            rows: set_columns
                .iter()
                .map(|cols| cols.iter().map(|&c| full[c]).collect())
                .collect(),
        });
    }
    let report = stability_experiment(&inputs, &config.model_config()?)?;
    let out = config.out_dir();
    let mut w = create(&out.join("stability.csv"))?;
    write_stability_csv(&report, &mut w)?;
    w.flush()?;
    std::fs::write(
        out.join("stability.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    manifest.record_count("stability", "sessions", inputs.len() as u64);
    manifest.record_count("stability", "skipped", skipped);
    for group in &report.groups {
        let taus: Vec<String> = group.taus.iter().map(|t| format!("{t:.4}")).collect();
        println!(
            "stability: group {} (n={}) tau {}",
            group.group,
            group.n_sessions,
            taus.join(" / ")
        );
    }
    Ok(())
}
