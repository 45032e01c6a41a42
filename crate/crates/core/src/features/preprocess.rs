//! Median imputation and standardization, fitted on training rows only.

use serde::{Deserialize, Serialize};

use super::FeatureError;

/// Per-column imputation and standardization parameters. Fitted only on
/// training rows; applied unchanged to test rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Preprocessor {
    pub medians: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Zero-variance (or all-missing) columns are passed through after
    /// imputation instead of being standardized.
    pub passthrough: Vec<bool>,
}

/// Kahan-compensated sum, so fitted statistics do not depend on how rows
/// would be chunked by a parallel reduction.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Fits medians (valid cells only), then means and standard deviations
/// after imputation.
pub fn fit_preprocessor(rows: &[Vec<f64>]) -> Result<Preprocessor, FeatureError> {
    if rows.len() < 2 {
        return Err(FeatureError::TooFewRows(rows.len()));
    }
    let width = rows[0].len();
    for r in rows {
        if r.len() != width {
            return Err(FeatureError::SchemaMismatch {
                got: r.len(),
                expected: width,
            });
        }
    }
    let n = rows.len() as f64;
    let mut medians = vec![0.0; width];
    let mut means = vec![0.0; width];
    let mut stds = vec![1.0; width];
    let mut passthrough = vec![false; width];
    let mut valid = Vec::with_capacity(rows.len());
    for col in 0..width {
        valid.clear();
        valid.extend(rows.iter().map(|r| r[col]).filter(|v| v.is_finite()));
        if valid.is_empty() {
            // All-missing column: impute 0 and pass through.
            medians[col] = 0.0;
            passthrough[col] = true;
            continue;
        }
        valid.sort_by(|a, b| a.total_cmp(b));
        let m = valid.len();
        medians[col] = if m % 2 == 1 {
            valid[m / 2]
        } else {
            (valid[m / 2 - 1] + valid[m / 2]) / 2.0
        };
        let imputed = |r: &Vec<f64>| {
            let v = r[col];
            if v.is_finite() {
                v
            } else {
                medians[col]
            }
        };
        let mean = compensated_sum(rows.iter().map(&imputed)) / n;
        let var = compensated_sum(rows.iter().map(|r| {
            let d = imputed(r) - mean;
            d * d
        })) / n;
        let std = var.sqrt();
        means[col] = mean;
        if std <= 1e-12 * mean.abs().max(1.0) {
            passthrough[col] = true;
        } else {
            stds[col] = std;
        }
    }
    Ok(Preprocessor {
        medians,
        means,
        stds,
        passthrough,
    })
}

/// Imputes missing cells with the training median, then standardizes
/// non-pass-through columns. The output has no missing cells.
pub fn apply_preprocessor(pre: &Preprocessor, row: &[f64]) -> Result<Vec<f64>, FeatureError> {
    if row.len() != pre.medians.len() {
        return Err(FeatureError::SchemaMismatch {
            got: row.len(),
            expected: pre.medians.len(),
        });
    }
    Ok(row
        .iter()
        .enumerate()
        .map(|(col, &v)| {
            let x = if v.is_finite() { v } else { pre.medians[col] };
            if pre.passthrough[col] {
                x
            } else {
                (x - pre.means[col]) / pre.stds[col]
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_over_valid_cells() {
        let rows = vec![vec![1.0], vec![f64::NAN], vec![3.0]];
        let pre = fit_preprocessor(&rows).unwrap();
        assert_eq!(pre.medians[0], 2.0);
    }

    #[test]
    fn constant_column_passes_through() {
        let rows = vec![vec![7.0, 0.0], vec![7.0, 10.0]];
        let pre = fit_preprocessor(&rows).unwrap();
        assert!(pre.passthrough[0]);
        let out = apply_preprocessor(&pre, &[7.0, 0.0]).unwrap();
        assert_eq!(out[0], 7.0);
        // {0, 10} standardizes to {-1, +1}.
        assert_eq!(out[1], -1.0);
        assert_eq!(apply_preprocessor(&pre, &[7.0, 10.0]).unwrap()[1], 1.0);
    }

    #[test]
    fn training_rows_standardize_to_unit_moments() {
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|i| vec![i as f64, (i * i) as f64 % 13.0, if i % 7 == 0 { f64::NAN } else { i as f64 * 0.5 }])
            .collect();
        let pre = fit_preprocessor(&rows).unwrap();
        let transformed: Vec<Vec<f64>> = rows.iter().map(|r| apply_preprocessor(&pre, r).unwrap()).collect();
        for col in 0..3 {
            let n = transformed.len() as f64;
            let mean: f64 = transformed.iter().map(|r| r[col]).sum::<f64>() / n;
            let var: f64 = transformed.iter().map(|r| (r[col] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "col {col} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-9, "col {col} std");
        }
    }

    #[test]
    fn fully_missing_row_maps_to_zero_vector() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let pre = fit_preprocessor(&rows).unwrap();
        let out = apply_preprocessor(&pre, &[f64::NAN, f64::NAN]).unwrap();
        // Medians standardize to ~0 by construction.
        for v in out {
            assert!(v.abs() < 0.1, "{v}");
        }
    }

    #[test]
    fn too_few_rows_and_mismatched_width() {
        assert!(matches!(fit_preprocessor(&[vec![1.0]]), Err(FeatureError::TooFewRows(1))));
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let pre = fit_preprocessor(&rows).unwrap();
        assert!(matches!(
            apply_preprocessor(&pre, &[1.0]),
            Err(FeatureError::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn no_missing_cells_after_transform() {
        let rows = vec![vec![f64::NAN, 1.0], vec![f64::NAN, 2.0], vec![f64::NAN, 3.0]];
        let pre = fit_preprocessor(&rows).unwrap();
        let out = apply_preprocessor(&pre, &rows[0]).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }
}
