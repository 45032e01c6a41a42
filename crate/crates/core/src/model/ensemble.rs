//! Bagged and boosted tree ensembles.

use rand::Rng;

use crate::rng::derived_rng;

use super::tree::{fit_tree, ColumnOrder, Tree, TreeParams};
use super::ModelConfig;

/// Draws `n` row indices with replacement, or the identity when the config
/// asks for a degenerate bootstrap (used to reduce a 1-tree forest to a plain
/// tree in tests).
fn bootstrap_rows(n: usize, cfg: &ModelConfig, tree_index: u64) -> Vec<u32> {
    if cfg.identity_bootstrap {
        return (0..n as u32).collect();
    }
    let mut rng = derived_rng(cfg.seed, "forest-bootstrap", tree_index);
    (0..n).map(|_| rng.random_range(0..n) as u32).collect()
}

/// Chooses `ceil(fraction · d)` distinct columns, ascending, via a partial
/// Fisher-Yates shuffle. fraction=1 keeps every column.
fn sample_columns(d: usize, fraction: f64, seed: u64, tree_index: u64) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..d).collect();
    }
    let k = ((fraction * d as f64).ceil() as usize).clamp(1, d);
    let mut pool: Vec<usize> = (0..d).collect();
    let mut rng = derived_rng(seed, "forest-columns", tree_index);
    for i in 0..k {
        let j = rng.random_range(i..d);
        pool.swap(i, j);
    }
    let mut chosen = pool[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

pub fn fit_forest(rows: &[Vec<f64>], y: &[f64], cfg: &ModelConfig) -> Vec<Tree> {
    let d = rows[0].len();
    let params = TreeParams {
        max_depth: cfg.max_depth,
        min_samples_leaf: cfg.min_samples_leaf,
        lambda: 0.0,
    };
    let full_order = if cfg.feature_fraction >= 1.0 {
        let columns: Vec<usize> = (0..d).collect();
        Some(ColumnOrder::build(rows, &columns))
    } else {
        None
    };
    (0..cfg.n_estimators)
        .map(|i| {
            let members = bootstrap_rows(rows.len(), cfg, i as u64);
            let columns = sample_columns(d, cfg.feature_fraction, cfg.seed, i as u64);
            match &full_order {
                Some(order) => fit_tree(rows, y, members, &columns, order, params),
                None => {
                    let order = ColumnOrder::build(rows, &columns);
                    fit_tree(rows, y, members, &columns, &order, params)
                }
            }
        })
        .collect()
}

pub struct BoostedEnsemble {
    pub init: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
}

/// Stagewise residual fitting. Plain boosting uses mean leaves (λ=0); the
/// regularized variant shrinks leaf values with `l2_reg`, which for squared
/// error and unit Hessians is exactly the Newton leaf `−G/(H+λ)`.
pub fn fit_boosted(rows: &[Vec<f64>], y: &[f64], cfg: &ModelConfig, lambda: f64) -> BoostedEnsemble {
    let n = rows.len();
    let d = rows[0].len();
    let init = y.iter().sum::<f64>() / n as f64;
    let params = TreeParams {
        max_depth: cfg.max_depth,
        min_samples_leaf: cfg.min_samples_leaf,
        lambda,
    };
    let columns: Vec<usize> = (0..d).collect();
    let order = ColumnOrder::build(rows, &columns);
    let mut current: Vec<f64> = vec![init; n];
    let mut residuals = vec![0.0; n];
    let mut trees = Vec::with_capacity(cfg.n_estimators);
    for stage in 0..cfg.n_estimators {
        for i in 0..n {
            residuals[i] = y[i] - current[i];
        }
        let members: Vec<u32> = if cfg.subsample < 1.0 {
            let k = ((cfg.subsample * n as f64).ceil() as usize).clamp(1, n);
            let mut pool: Vec<u32> = (0..n as u32).collect();
            let mut rng = derived_rng(cfg.seed, "boost-subsample", stage as u64);
            for i in 0..k {
                let j = rng.random_range(i..n);
                pool.swap(i, j);
            }
            pool.truncate(k);
            pool.sort_unstable();
            pool
        } else {
            (0..n as u32).collect()
        };
        let tree = fit_tree(rows, &residuals, members, &columns, &order, params);
        for (i, row) in rows.iter().enumerate() {
            current[i] += cfg.learning_rate * tree.predict_row(row);
        }
        trees.push(tree);
    }
    BoostedEnsemble {
        init,
        learning_rate: cfg.learning_rate,
        trees,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fit_model, predict, ModelConfig, ModelKind};

    fn quadratic_data() -> (Vec<Vec<f64>>, Vec<f64>) {
        let rows: Vec<Vec<f64>> = (0..64).map(|i| vec![-1.0 + i as f64 / 32.0]).collect();
        let y = rows.iter().map(|r| r[0] * r[0]).collect();
        (rows, y)
    }

    fn rmse(pred: &[f64], y: &[f64]) -> f64 {
        let sse: f64 = pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum();
        (sse / y.len() as f64).sqrt()
    }

    #[test]
    fn identity_bootstrap_one_tree_forest_equals_plain_tree() {
        let (rows, y) = quadratic_data();
        let mut cfg = ModelConfig::new(ModelKind::Forest);
        cfg.n_estimators = 1;
        cfg.identity_bootstrap = true;
        cfg.min_samples_leaf = 3;
        let forest = fit_model(&cfg, &rows, &y, 7).unwrap();
        let mut tree_cfg = ModelConfig::new(ModelKind::Tree);
        tree_cfg.min_samples_leaf = 3;
        let tree = fit_model(&tree_cfg, &rows, &y, 7).unwrap();
        assert_eq!(
            predict(&forest, &rows, 7).unwrap(),
            predict(&tree, &rows, 7).unwrap()
        );
    }

    #[test]
    fn constant_targets_predict_that_constant() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y = vec![42.0; 20];
        let cfg = ModelConfig {
            n_estimators: 5,
            ..ModelConfig::new(ModelKind::Forest)
        };
        let model = fit_model(&cfg, &rows, &y, 0).unwrap();
        for p in predict(&model, &rows, 0).unwrap() {
            assert_eq!(p, 42.0);
        }
    }

    #[test]
    fn same_seed_gives_identical_forest() {
        let (rows, y) = quadratic_data();
        let cfg = ModelConfig {
            n_estimators: 8,
            feature_fraction: 1.0,
            ..ModelConfig::new(ModelKind::Forest)
        };
        let a = fit_model(&cfg, &rows, &y, 3).unwrap();
        let b = fit_model(&cfg, &rows, &y, 3).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn forest_predictions_bounded_by_leaf_values() {
        let (rows, y) = quadratic_data();
        let cfg = ModelConfig {
            n_estimators: 10,
            min_samples_leaf: 4,
            ..ModelConfig::new(ModelKind::Forest)
        };
        let trees = fit_forest(&rows, &y, &cfg);
        let lo = trees
            .iter()
            .flat_map(|t| t.leaf_values())
            .fold(f64::INFINITY, f64::min);
        let hi = trees
            .iter()
            .flat_map(|t| t.leaf_values())
            .fold(f64::NEG_INFINITY, f64::max);
        for row in &rows {
            let p: f64 = trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
                / trees.len() as f64;
            assert!(p >= lo && p <= hi);
        }
    }

    #[test]
    fn one_full_stage_matches_mean_plus_residual_tree() {
        let (rows, y) = quadratic_data();
        let cfg = ModelConfig {
            n_estimators: 1,
            learning_rate: 1.0,
            max_depth: Some(16),
            min_samples_leaf: 1,
            ..ModelConfig::new(ModelKind::Boost)
        };
        let boosted = fit_model(&cfg, &rows, &y, 0).unwrap();
        let pred = predict(&boosted, &rows, 0).unwrap();
        // With one unshrunk stage and unrestricted depth the training fit is
        // exact, so it cannot be worse than any single tree.
        assert!(rmse(&pred, &y) < 1e-12);
    }

    #[test]
    fn boosting_beats_linear_on_quadratic() {
        let (rows, y) = quadratic_data();
        let boost = fit_model(&ModelConfig::new(ModelKind::Boost), &rows, &y, 0).unwrap();
        let linear = fit_model(&ModelConfig::new(ModelKind::Linear), &rows, &y, 0).unwrap();
        let boost_rmse = rmse(&predict(&boost, &rows, 0).unwrap(), &y);
        let linear_rmse = rmse(&predict(&linear, &rows, 0).unwrap(), &y);
        assert!(
            boost_rmse < linear_rmse,
            "boost {boost_rmse} vs linear {linear_rmse}"
        );
    }

    #[test]
    fn huge_l2_collapses_predictions_to_mean() {
        let (rows, y) = quadratic_data();
        let cfg = ModelConfig {
            l2_reg: 1e12,
            ..ModelConfig::new(ModelKind::Boost2)
        };
        let model = fit_model(&cfg, &rows, &y, 0).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        for p in predict(&model, &rows, 0).unwrap() {
            assert!((p - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn training_loss_is_non_increasing_per_stage() {
        let (rows, y) = quadratic_data();
        for kind in [ModelKind::Boost, ModelKind::Boost2] {
            let cfg = ModelConfig {
                n_estimators: 30,
                ..ModelConfig::new(kind)
            };
            let lambda = if kind == ModelKind::Boost2 { cfg.l2_reg } else { 0.0 };
            let ensemble = fit_boosted(&rows, &y, &cfg, lambda);
            let mut current = vec![ensemble.init; y.len()];
            let mut prev = rmse(&current, &y);
            for tree in &ensemble.trees {
                for (c, row) in current.iter_mut().zip(&rows) {
                    *c += ensemble.learning_rate * tree.predict_row(row);
                }
                let now = rmse(&current, &y);
                assert!(now <= prev + 1e-12, "{kind:?} stage increased loss");
                prev = now;
            }
        }
    }

    #[test]
    fn subsampled_boosting_is_deterministic() {
        let (rows, y) = quadratic_data();
        let cfg = ModelConfig {
            n_estimators: 10,
            subsample: 0.5,
            ..ModelConfig::new(ModelKind::Boost)
        };
        let a = fit_model(&cfg, &rows, &y, 11).unwrap();
        let b = fit_model(&cfg, &rows, &y, 11).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn feature_fraction_restricts_split_columns() {
        // Column 1 carries all the signal; with fraction low enough that some
        // trees never see it, predictions still come back finite and the
        // sampled column sets differ across trees.
        let rows: Vec<Vec<f64>> = (0..32)
            .map(|i| vec![(i % 4) as f64, i as f64, (i % 3) as f64])
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| r[1] * 2.0).collect();
        let cfg = ModelConfig {
            n_estimators: 12,
            feature_fraction: 0.34,
            ..ModelConfig::new(ModelKind::Forest)
        };
        let trees = fit_forest(&rows, &y, &cfg);
        assert_eq!(trees.len(), 12);
        for row in &rows {
            for t in &trees {
                assert!(t.predict_row(row).is_finite());
            }
        }
        let sets: std::collections::BTreeSet<Vec<usize>> = (0..12)
            .map(|i| sample_columns(3, 0.34, cfg.seed, i))
            .collect();
        assert!(sets.len() > 1, "column sampling never varied");
    }
}
