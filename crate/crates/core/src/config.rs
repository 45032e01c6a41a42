//! Pipeline configuration and run provenance.
//!
//! The config file is line-oriented `key = value` grouped into `[section]`
//! blocks, one section per pipeline stage plus `[general]`. Every key can be
//! overridden on the command line with `--set section.key=value`; the
//! override wins. Unknown keys are kept (and recorded in the run manifest)
//! rather than rejected, so configs can carry notes for other tools.
//!
//! `RunManifest` captures everything needed to reproduce a run byte-for-byte:
//! the resolved config snapshot, the master seed, digests of every input
//! file, the tool version, and per-stage row counts. It deliberately records
//! no wall-clock time.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureConfig;
use crate::model::{ModelConfig, ModelKind};
use crate::rng::derive_seed;
use crate::session::SegmentationConfig;
use crate::synth::{Regime, RegimeModel, SynthConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {detail}")]
    Syntax { line: usize, detail: String },
    #[error("config key {key}: {detail}")]
    BadValue { key: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parsed config file: section → key → value, all strings.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = "general".to_string();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    detail: format!("expected `key = value`, got {line:?}"),
                });
            };
            sections
                .entry(current.clone())
                .or_default()
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(PipelineConfig { sections })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies a `section.key=value` command-line override.
    pub fn set(&mut self, dotted_key: &str, value: &str) -> Result<(), ConfigError> {
        let (section, key) = dotted_key.split_once('.').ok_or_else(|| ConfigError::BadValue {
            key: dotted_key.to_string(),
            detail: "override keys are written section.key".into(),
        })?;
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    fn get_parsed<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(section, key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|e| ConfigError::BadValue {
                key: format!("{section}.{key}"),
                detail: format!("{e} (value {raw:?})"),
            }),
        }
    }

    pub fn master_seed(&self) -> Result<u64, ConfigError> {
        self.get_parsed("general", "seed", 42)
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(self.get("general", "data_dir").unwrap_or("data"))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("general", "out_dir").unwrap_or("out"))
    }

    pub fn segmentation(&self) -> Result<SegmentationConfig, ConfigError> {
        let d = SegmentationConfig::default();
        Ok(SegmentationConfig {
            gap_threshold_secs: self.get_parsed(
                "segmentation",
                "gap_threshold_secs",
                d.gap_threshold_secs,
            )?,
            min_duration_secs: self.get_parsed(
                "segmentation",
                "min_duration_secs",
                d.min_duration_secs,
            )?,
            min_start_battery: self.get_parsed(
                "segmentation",
                "min_start_battery",
                d.min_start_battery,
            )?,
            threshold_l: self.get_parsed("segmentation", "threshold_l", d.threshold_l)?,
        })
    }

    pub fn feature_config(&self) -> Result<FeatureConfig, ConfigError> {
        let d = FeatureConfig::default();
        Ok(FeatureConfig {
            top_k_apps: self.get_parsed("features", "top_k_apps", d.top_k_apps)?,
            n_broadcast_types: self.get_parsed(
                "features",
                "n_broadcast_types",
                d.n_broadcast_types,
            )?,
            n_users: self.get_parsed("features", "n_users", d.n_users)?,
            utc_offset_secs: self.get_parsed("features", "utc_offset_secs", d.utc_offset_secs)?,
        })
    }

    /// The feature-set expression features are selected by (`F1,F10-F12`
    /// style).
    pub fn feature_set(&self) -> String {
        self.get("features", "feature_set").unwrap_or("F1-F21").to_string()
    }

    /// Cumulative feature sets for the stability experiment, `;`-separated.
    pub fn stability_feature_sets(&self) -> Vec<String> {
        self.get("stability", "feature_sets")
            .unwrap_or("F1-F4;F1-F18;F1-F21")
            .split(';')
            .map(|s| s.trim().to_string())
            .collect()
    }

    pub fn test_fraction(&self) -> Result<f64, ConfigError> {
        self.get_parsed("query", "test_fraction", 1.0 / 6.0)
    }

    pub fn queries_per_session(&self) -> Result<usize, ConfigError> {
        self.get_parsed("query", "per_session", 1)
    }

    /// Model hyperparameters; the model seed defaults to a derivation of the
    /// master seed so one config knob controls everything.
    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let kind: ModelKind = self
            .get("model", "kind")
            .unwrap_or("boost")
            .parse()
            .map_err(|detail| ConfigError::BadValue {
                key: "model.kind".into(),
                detail,
            })?;
        let d = ModelConfig::new(kind);
        let max_depth = match self.get("model", "max_depth") {
            None => d.max_depth,
            Some("none") => None,
            Some(raw) => Some(raw.parse().map_err(|e| ConfigError::BadValue {
                key: "model.max_depth".into(),
                detail: format!("{e} (value {raw:?})"),
            })?),
        };
        Ok(ModelConfig {
            kind,
            n_estimators: self.get_parsed("model", "n_estimators", d.n_estimators)?,
            learning_rate: self.get_parsed("model", "learning_rate", d.learning_rate)?,
            max_depth,
            min_samples_leaf: self.get_parsed("model", "min_samples_leaf", d.min_samples_leaf)?,
            subsample: self.get_parsed("model", "subsample", d.subsample)?,
            feature_fraction: self.get_parsed("model", "feature_fraction", d.feature_fraction)?,
            l2_reg: self.get_parsed("model", "l2_reg", d.l2_reg)?,
            ridge: self.get_parsed("model", "ridge", d.ridge)?,
            seed: self.get_parsed(
                "model",
                "seed",
                derive_seed(self.master_seed()?, "model", 0),
            )?,
            identity_bootstrap: false,
        })
    }

    pub fn c_index_variant(&self) -> Result<crate::eval::CIndexVariant, ConfigError> {
        self.get("eval", "c_index_variant")
            .unwrap_or("paper")
            .parse()
            .map_err(|detail| ConfigError::BadValue {
                key: "eval.c_index_variant".into(),
                detail,
            })
    }

    pub fn bootstrap_iterations(&self) -> Result<usize, ConfigError> {
        self.get_parsed("eval", "bootstrap_iterations", 10_000)
    }

    pub fn bootstrap_metric(&self) -> Result<crate::eval::Metric, ConfigError> {
        self.get("eval", "metric")
            .unwrap_or("rmse")
            .parse()
            .map_err(|detail| ConfigError::BadValue {
                key: "eval.metric".into(),
                detail,
            })
    }

    pub fn synth_config(&self) -> Result<SynthConfig, ConfigError> {
        let d = SynthConfig::default();
        let charge_hours = match self.get("synth", "charge_hours") {
            None | Some("none") => None,
            Some(raw) => {
                let parts: Option<(u8, u8)> = raw
                    .split_once('-')
                    .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)));
                Some(parts.ok_or_else(|| ConfigError::BadValue {
                    key: "synth.charge_hours".into(),
                    detail: format!("expected start-end hours, got {raw:?}"),
                })?)
            }
        };
        Ok(SynthConfig {
            n_users: self.get_parsed("synth", "n_users", d.n_users)?,
            days: self.get_parsed("synth", "days", d.days)?,
            battery_period_secs: self.get_parsed(
                "synth",
                "battery_period_secs",
                d.battery_period_secs,
            )?,
            t2_period_secs: self.get_parsed("synth", "t2_period_secs", d.t2_period_secs)?,
            t1_period_secs: self.get_parsed("synth", "t1_period_secs", d.t1_period_secs)?,
            charge_threshold: self.get_parsed("synth", "charge_threshold", d.charge_threshold)?,
            charge_rate: self.get_parsed("synth", "charge_rate", d.charge_rate)?,
            charge_hours,
            start_level: self.get_parsed("synth", "start_level", d.start_level)?,
            base_timestamp: self.get_parsed("synth", "base_timestamp", d.base_timestamp)?,
            seed: self.get_parsed(
                "synth",
                "seed",
                derive_seed(self.master_seed()?, "synth", 0),
            )?,
        })
    }

    /// Regime list `name:rate:screen_prob:app_intensity:sensor_mean|…`, an
    /// optional schedule `0-18:0,18-24:1`, and otherwise a stay-probability
    /// Markov chain controlled by `switch_prob`.
    pub fn regime_model(&self) -> Result<RegimeModel, ConfigError> {
        let bad = |detail: String| ConfigError::BadValue {
            key: "synth.regimes".into(),
            detail,
        };
        let spec = self
            .get("synth", "regimes")
            .unwrap_or("steady:1.0:0.3:0.4:1.0");
        let mut regimes = Vec::new();
        for part in spec.split('|') {
            let fields: Vec<&str> = part.split(':').collect();
            if fields.len() != 5 {
                return Err(bad(format!(
                    "regime {part:?} needs name:rate:screen:apps:sensor"
                )));
            }
            let num = |i: usize| -> Result<f64, ConfigError> {
                fields[i]
                    .parse()
                    .map_err(|_| bad(format!("bad number {:?} in regime {part:?}", fields[i])))
            };
            regimes.push(Regime {
                name: fields[0].to_string(),
                rate: num(1)?,
                screen_on_prob: num(2)?,
                app_intensity: num(3)?,
                sensor_means: vec![num(4)?],
            });
        }
        let k = regimes.len();
        let schedule = match self.get("synth", "schedule") {
            None | Some("none") => None,
            Some(raw) => {
                let mut table = [0usize; 24];
                for entry in raw.split(',') {
                    let parse = || -> Option<(usize, usize, usize)> {
                        let (hours, regime) = entry.split_once(':')?;
                        let (a, b) = hours.split_once('-')?;
                        Some((a.parse().ok()?, b.parse().ok()?, regime.parse().ok()?))
                    };
                    let (a, b, r) = parse().ok_or_else(|| ConfigError::BadValue {
                        key: "synth.schedule".into(),
                        detail: format!("expected start-end:regime, got {entry:?}"),
                    })?;
                    for slot in table.iter_mut().take(b.min(24)).skip(a) {
                        *slot = r;
                    }
                }
                Some(table)
            }
        };
        let switch_prob: f64 = self.get_parsed("synth", "switch_prob", 0.05)?;
        let transition = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        if k == 1 {
                            1.0
                        } else if i == j {
                            1.0 - switch_prob
                        } else {
                            switch_prob / (k - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(RegimeModel {
            regimes,
            transition,
            schedule,
        })
    }
}

/// FNV-1a digest of a file's bytes, streamed.
pub fn digest_file(path: &Path) -> std::io::Result<u64> {
    let mut file = std::fs::File::open(path)?;
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        for &b in &buf[..n] {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    Ok(hash)
}

/// Provenance record written next to the artifacts and extended stage by
/// stage. Contains no timestamps so reruns are byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub master_seed: u64,
    pub config: BTreeMap<String, BTreeMap<String, String>>,
    /// Input file name → FNV-1a digest, hex.
    pub input_digests: BTreeMap<String, String>,
    /// Stage name → named row counts.
    pub stage_counts: BTreeMap<String, BTreeMap<String, u64>>,
}

impl RunManifest {
    pub fn new(config: &PipelineConfig) -> Result<Self, ConfigError> {
        Ok(RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: config.master_seed()?,
            config: config.sections.clone(),
            input_digests: BTreeMap::new(),
            stage_counts: BTreeMap::new(),
        })
    }

    /// Loads the manifest beside existing artifacts, or starts a fresh one.
    pub fn load_or_new(path: &Path, config: &PipelineConfig) -> Result<Self, ConfigError> {
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            if let Ok(manifest) = serde_json::from_str(&text) {
                return Ok(manifest);
            }
        }
        Self::new(config)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text)
    }

    pub fn record_digest(&mut self, path: &Path) -> std::io::Result<()> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.input_digests
            .insert(name, format!("{:016x}", digest_file(path)?));
        Ok(())
    }

    pub fn record_count(&mut self, stage: &str, name: &str, count: u64) {
        self.stage_counts
            .entry(stage.to_string())
            .or_default()
            .insert(name.to_string(), count);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# experiment config
seed = 7

[segmentation]
gap_threshold_secs = 300
threshold_l = 25

[model]
kind = linear
ridge = 0.5

[synth]
regimes = office:0.2:0.1:0.2:1.0|commute:1.5:0.9:0.9:5.0
schedule = 0-18:0,18-24:1
";

    #[test]
    fn parses_sections_defaults_and_overrides() {
        let mut cfg = PipelineConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.master_seed().unwrap(), 7);
        let seg = cfg.segmentation().unwrap();
        assert_eq!(seg.gap_threshold_secs, 300);
        assert_eq!(seg.threshold_l, 25);
        assert_eq!(seg.min_duration_secs, 3600); // untouched default

        cfg.set("segmentation.threshold_l", "20").unwrap();
        assert_eq!(cfg.segmentation().unwrap().threshold_l, 20);
        assert!(cfg.set("no_dot", "1").is_err());
    }

    #[test]
    fn model_config_reads_kind_specific_defaults() {
        let cfg = PipelineConfig::parse(SAMPLE).unwrap();
        let model = cfg.model_config().unwrap();
        assert_eq!(model.kind, ModelKind::Linear);
        assert_eq!(model.ridge, 0.5);
        assert_eq!(model.n_estimators, 100);
        // Unset model seed derives from the master seed.
        assert_eq!(model.seed, derive_seed(7, "model", 0));
    }

    #[test]
    fn regime_model_round_trips_schedule() {
        let cfg = PipelineConfig::parse(SAMPLE).unwrap();
        let model = cfg.regime_model().unwrap();
        assert_eq!(model.regimes.len(), 2);
        assert_eq!(model.regimes[1].name, "commute");
        assert_eq!(model.regimes[1].rate, 1.5);
        let schedule = model.schedule.unwrap();
        assert_eq!(schedule[17], 0);
        assert_eq!(schedule[18], 1);
        model.validate().unwrap();
    }

    #[test]
    fn syntax_and_value_errors_name_the_line_or_key() {
        assert!(matches!(
            PipelineConfig::parse("just words\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        let cfg = PipelineConfig::parse("[general]\nseed = alpha\n").unwrap();
        assert!(matches!(cfg.master_seed(), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn manifest_records_counts_and_digests() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("input.csv");
        std::fs::write(&input, b"user_id\n").unwrap();
        let cfg = PipelineConfig::parse(SAMPLE).unwrap();
        let mut manifest = RunManifest::new(&cfg).unwrap();
        manifest.record_digest(&input).unwrap();
        manifest.record_count("sessionize", "sessions", 12);
        let path = dir.path().join("run_manifest.json");
        manifest.save(&path).unwrap();
        let loaded = RunManifest::load_or_new(&path, &cfg).unwrap();
        assert_eq!(loaded.stage_counts["sessionize"]["sessions"], 12);
        assert_eq!(
            loaded.input_digests["input.csv"],
            format!("{:016x}", digest_file(&input).unwrap())
        );
        // No timestamp-like keys anywhere in the serialized form.
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("time"));
    }

    #[test]
    fn digest_is_stable_fnv1a() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(digest_file(&path).unwrap(), crate::rng::fnv1a64(b"abc"));
    }
}
