//! Regression models behind one fit/predict contract.
//!
//! Five kinds share a training matrix (dense rows, no missing cells) and a
//! target vector of remaining-life minutes: ridge-stabilized linear least
//! squares, a CART regression tree, a bootstrap-aggregated forest, stagewise
//! gradient boosting, and a second-order boosting variant with L2-shrunk leaf
//! values. Training rows come from observed-outcome queries only; censored
//! rows carry no target and are scored downstream by the concordance index.
//!
//! Every fitted model records the feature-schema fingerprint it was trained
//! against, and `predict` refuses rows described by a different schema.

mod ensemble;
mod tree;

pub use ensemble::{fit_boosted, fit_forest, BoostedEnsemble};
pub use tree::{ColumnOrder, Node, Tree, TreeParams};

use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use tree::fit_tree;

/// Bumped when the serialized model layout changes incompatibly.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Tree,
    Forest,
    Boost,
    Boost2,
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "tree" => Ok(ModelKind::Tree),
            "forest" => Ok(ModelKind::Forest),
            "boost" => Ok(ModelKind::Boost),
            "boost2" => Ok(ModelKind::Boost2),
            other => Err(format!(
                "unknown model kind {other:?} (expected linear, tree, forest, boost, or boost2)"
            )),
        }
    }
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Tree => "tree",
            ModelKind::Forest => "forest",
            ModelKind::Boost => "boost",
            ModelKind::Boost2 => "boost2",
        }
    }
}

/// Hyperparameters for every model kind; irrelevant fields are ignored by the
/// kinds that do not use them. Config-file keys match these field names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_estimators: usize,
    pub learning_rate: f64,
    /// None means growth limited only by `min_samples_leaf`.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Row fraction per boosting stage, without replacement.
    pub subsample: f64,
    /// Column fraction per forest tree.
    pub feature_fraction: f64,
    /// L2 penalty on leaf values (boost2 only).
    pub l2_reg: f64,
    /// Tikhonov term on the linear normal equations; 0 disables it.
    pub ridge: f64,
    pub seed: u64,
    /// Replace the forest bootstrap with the identity sample; test hook for
    /// reducing a one-tree forest to a plain tree.
    #[serde(default)]
    pub identity_bootstrap: bool,
}

impl ModelConfig {
    /// Defaults per kind: 100 estimators at rate 0.1, depth 3 for boosting,
    /// unlimited depth with 5-sample leaves for single trees and forests,
    /// all features for forests.
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            n_estimators: 100,
            learning_rate: 0.1,
            max_depth: match kind {
                ModelKind::Boost | ModelKind::Boost2 => Some(3),
                _ => None,
            },
            min_samples_leaf: 5,
            subsample: 1.0,
            feature_fraction: 1.0,
            l2_reg: 1.0,
            ridge: 1e-8,
            seed: 0,
            identity_bootstrap: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fractions = [
            ("learning_rate", self.learning_rate),
            ("subsample", self.subsample),
            ("feature_fraction", self.feature_fraction),
        ];
        for (name, value) in fractions {
            if !(value > 0.0 && value <= 1.0) {
                return Err(ModelError::BadConfig {
                    detail: format!("{name} must be in (0, 1], got {value}"),
                });
            }
        }
        if self.n_estimators == 0 || self.min_samples_leaf == 0 {
            return Err(ModelError::BadConfig {
                detail: "n_estimators and min_samples_leaf must be at least 1".into(),
            });
        }
        if self.l2_reg < 0.0 || self.ridge < 0.0 {
            return Err(ModelError::BadConfig {
                detail: "l2_reg and ridge must be non-negative".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {detail}")]
    BadConfig { detail: String },
    #[error("training requires at least one row with a finite target")]
    EmptyTraining,
    #[error("training matrix contains a non-finite cell at row {row}, column {column}")]
    NonFiniteCell { row: usize, column: usize },
    #[error("normal equations are singular and ridge is disabled")]
    SingularSystem,
    #[error("schema fingerprint mismatch: model was trained against {expected:#018x}, input is {got:#018x}")]
    SchemaMismatch { expected: u64, got: u64 },
    #[error("model file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file is not valid: {0}")]
    Format(#[from] serde_json::Error),
    #[error("model file declares format version {got}, this build reads {expected}")]
    FormatVersion { expected: u32, got: u32 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ModelParams {
    Linear { weights: Vec<f64>, intercept: f64 },
    Tree { tree: Tree },
    Forest { trees: Vec<Tree> },
    Boosted { init: f64, learning_rate: f64, trees: Vec<Tree> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub kind: ModelKind,
    pub n_columns: usize,
    pub schema_fingerprint: u64,
    pub params: ModelParams,
}

fn check_training(rows: &[Vec<f64>], y: &[f64]) -> Result<(), ModelError> {
    if rows.is_empty() || rows.len() != y.len() {
        return Err(ModelError::EmptyTraining);
    }
    for (ri, row) in rows.iter().enumerate() {
        if let Some(ci) = row.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteCell { row: ri, column: ci });
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::EmptyTraining);
    }
    Ok(())
}

/// Solves `A x = b` for symmetric positive-definite `A` by Cholesky
/// factorization in place. Fails on a non-positive pivot, which for the
/// normal equations means a singular (collinear) system.
fn cholesky_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>, ModelError> {
    let n = b.len();
    // Pivots that fall below this fraction of the largest diagonal entry are
    // roundoff residue of an exactly-collinear system, not signal.
    let scale = (0..n).map(|i| a[i][i]).fold(1.0, f64::max);
    let floor = scale * 1e-12;
    for j in 0..n {
        let mut diag = a[j][j];
        for k in 0..j {
            diag -= a[j][k] * a[j][k];
        }
        if diag <= floor || !diag.is_finite() {
            return Err(ModelError::SingularSystem);
        }
        let diag = diag.sqrt();
        a[j][j] = diag;
        for i in j + 1..n {
            let mut v = a[i][j];
            for k in 0..j {
                v -= a[i][k] * a[j][k];
            }
            a[i][j] = v / diag;
        }
    }
    // Forward substitution L z = b, then back substitution Lᵀ x = z.
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i][k] * b[k];
        }
        b[i] = v / a[i][i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in i + 1..n {
            v -= a[k][i] * b[k];
        }
        b[i] = v / a[i][i];
    }
    Ok(b)
}

/// Ridge-stabilized ordinary least squares with an unpenalized intercept.
fn fit_linear(rows: &[Vec<f64>], y: &[f64], cfg: &ModelConfig) -> Result<ModelParams, ModelError> {
    let n = rows.len();
    let d = rows[0].len();
    // Augmented system over [features, 1]; the intercept is the last entry.
    let m = d + 1;
    let mut gram = vec![vec![0.0; m]; m];
    let mut rhs = vec![0.0; m];
    for (row, &target) in rows.iter().zip(y) {
        for i in 0..d {
            for k in 0..=i {
                gram[i][k] += row[i] * row[k];
            }
            gram[d][i] += row[i];
            rhs[i] += row[i] * target;
        }
        rhs[d] += target;
    }
    gram[d][d] = n as f64;
    for i in 0..d {
        gram[i][i] += cfg.ridge;
    }
    for i in 0..m {
        for k in i + 1..m {
            gram[i][k] = gram[k][i];
        }
    }
    let mut solution = cholesky_solve(gram, rhs)?;
    let intercept = solution.pop().expect("augmented system is non-empty");
    Ok(ModelParams::Linear {
        weights: solution,
        intercept,
    })
}

/// Fits a model of the configured kind. `schema_fingerprint` identifies the
/// feature layout the matrix columns follow; it is stored in the model and
/// re-checked at prediction time.
pub fn fit_model(
    cfg: &ModelConfig,
    rows: &[Vec<f64>],
    y: &[f64],
    schema_fingerprint: u64,
) -> Result<TrainedModel, ModelError> {
    cfg.validate()?;
    check_training(rows, y)?;
    let d = rows[0].len();
    let params = match cfg.kind {
        ModelKind::Linear => fit_linear(rows, y, cfg)?,
        ModelKind::Tree => {
            let columns: Vec<usize> = (0..d).collect();
            let order = ColumnOrder::build(rows, &columns);
            let tree = fit_tree(
                rows,
                y,
                (0..rows.len() as u32).collect(),
                &columns,
                &order,
                TreeParams {
                    max_depth: cfg.max_depth,
                    min_samples_leaf: cfg.min_samples_leaf,
                    lambda: 0.0,
                },
            );
            ModelParams::Tree { tree }
        }
        ModelKind::Forest => ModelParams::Forest {
            trees: fit_forest(rows, y, cfg),
        },
        ModelKind::Boost | ModelKind::Boost2 => {
            let lambda = if cfg.kind == ModelKind::Boost2 { cfg.l2_reg } else { 0.0 };
            let fitted = fit_boosted(rows, y, cfg, lambda);
            ModelParams::Boosted {
                init: fitted.init,
                learning_rate: fitted.learning_rate,
                trees: fitted.trees,
            }
        }
    };
    Ok(TrainedModel {
        format_version: MODEL_FORMAT_VERSION,
        kind: cfg.kind,
        n_columns: d,
        schema_fingerprint,
        params,
    })
}

/// Predicted remaining life in minutes, one value per input row.
pub fn predict(
    model: &TrainedModel,
    rows: &[Vec<f64>],
    schema_fingerprint: u64,
) -> Result<Vec<f64>, ModelError> {
    if model.schema_fingerprint != schema_fingerprint {
        return Err(ModelError::SchemaMismatch {
            expected: model.schema_fingerprint,
            got: schema_fingerprint,
        });
    }
    let out = rows
        .iter()
        .map(|row| match &model.params {
            ModelParams::Linear { weights, intercept } => {
                intercept + weights.iter().zip(row).map(|(w, x)| w * x).sum::<f64>()
            }
            ModelParams::Tree { tree } => tree.predict_row(row),
            ModelParams::Forest { trees } => {
                trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / trees.len() as f64
            }
            ModelParams::Boosted {
                init,
                learning_rate,
                trees,
            } => {
                init + learning_rate
                    * trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
            }
        })
        .collect();
    Ok(out)
}

pub fn save_model<W: Write>(model: &TrainedModel, writer: W) -> Result<(), ModelError> {
    serde_json::to_writer(writer, model)?;
    Ok(())
}

pub fn load_model<R: Read>(reader: R) -> Result<TrainedModel, ModelError> {
    let model: TrainedModel = serde_json::from_reader(reader)?;
    if model.format_version != MODEL_FORMAT_VERSION {
        return Err(ModelError::FormatVersion {
            expected: MODEL_FORMAT_VERSION,
            got: model.format_version,
        });
    }
    Ok(model)
}
