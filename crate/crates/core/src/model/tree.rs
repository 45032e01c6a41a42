//! CART regression trees used standalone and as ensemble members.
//!
//! Splits minimize squared error via the equivalent gain form
//! `Z_L²/(n_L+λ) + Z_R²/(n_R+λ) − Z²/(n+λ)` where `Z` sums the targets in a
//! cell. With λ=0 this is exactly variance reduction; with λ>0 it is the
//! second-order gain used by the regularized boosting variant (unit Hessians),
//! and leaf values become `Z/(n+λ)`.

use serde::{Deserialize, Serialize};

/// A fitted tree as a flat arena; index 0 is the root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Node {
    Split {
        column: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Stopping and regularization knobs for a single tree fit.
#[derive(Debug, Clone, Copy)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// L2 penalty on leaf values; 0 gives plain CART mean leaves.
    pub lambda: f64,
}

/// Column-major presort of row indices, shared across the nodes of one fit so
/// each node partitions in O(n) per column instead of re-sorting.
pub struct ColumnOrder {
    orders: Vec<Vec<u32>>,
}

impl ColumnOrder {
    pub fn build(rows: &[Vec<f64>], columns: &[usize]) -> Self {
        let n = rows.len();
        let mut orders = Vec::with_capacity(columns.len());
        for &c in columns {
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.sort_by(|&a, &b| {
                rows[a as usize][c]
                    .partial_cmp(&rows[b as usize][c])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            orders.push(order);
        }
        ColumnOrder { orders }
    }
}

struct Builder<'a> {
    rows: &'a [Vec<f64>],
    targets: &'a [f64],
    columns: &'a [usize],
    order: &'a ColumnOrder,
    params: TreeParams,
    nodes: Vec<Node>,
    in_node: Vec<bool>,
}

struct BestSplit {
    column: usize,
    threshold: f64,
    gain: f64,
}

impl Builder<'_> {
    fn leaf_value(&self, sum: f64, count: usize) -> f64 {
        sum / (count as f64 + self.params.lambda)
    }

    fn cell_score(&self, sum: f64, count: usize) -> f64 {
        sum * sum / (count as f64 + self.params.lambda)
    }

    /// Exhaustive scan over midpoint thresholds. Columns are visited in
    /// ascending index order and thresholds in ascending value order with a
    /// strict improvement test, so ties resolve to the lowest column, then the
    /// lowest threshold.
    fn find_split(&self, members: &[u32]) -> Option<BestSplit> {
        let total_sum: f64 = members.iter().map(|&i| self.targets[i as usize]).sum();
        let total = members.len();
        let parent = self.cell_score(total_sum, total);
        let min_leaf = self.params.min_samples_leaf;
        let mut best: Option<BestSplit> = None;
        for (ci, &column) in self.columns.iter().enumerate() {
            let mut left_sum = 0.0;
            let mut left_count = 0usize;
            let mut prev_value = f64::NAN;
            for &i in &self.order.orders[ci] {
                if !self.in_node[i as usize] {
                    continue;
                }
                let value = self.rows[i as usize][column];
                if left_count >= min_leaf
                    && total - left_count >= min_leaf
                    && value > prev_value
                {
                    let right_sum = total_sum - left_sum;
                    let gain = self.cell_score(left_sum, left_count)
                        + self.cell_score(right_sum, total - left_count)
                        - parent;
                    if gain > 1e-12 && best.as_ref().is_none_or(|b| gain > b.gain) {
                        best = Some(BestSplit {
                            column,
                            threshold: (prev_value + value) / 2.0,
                            gain,
                        });
                    }
                }
                left_sum += self.targets[i as usize];
                left_count += 1;
                prev_value = value;
            }
        }
        best
    }

    fn grow(&mut self, members: Vec<u32>, depth: usize) -> usize {
        let sum: f64 = members.iter().map(|&i| self.targets[i as usize]).sum();
        let count = members.len();
        let at_depth_limit = self.params.max_depth.is_some_and(|d| depth >= d);
        let split = if at_depth_limit || count < 2 * self.params.min_samples_leaf {
            None
        } else {
            for &i in &members {
                self.in_node[i as usize] = true;
            }
            let found = self.find_split(&members);
            for &i in &members {
                self.in_node[i as usize] = false;
            }
            found
        };
        let Some(split) = split else {
            self.nodes.push(Node::Leaf {
                value: self.leaf_value(sum, count),
            });
            return self.nodes.len() - 1;
        };
        let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = members
            .into_iter()
            .partition(|&i| self.rows[i as usize][split.column] < split.threshold);
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 }); // reserved, patched below
        let left = self.grow(left_rows, depth + 1);
        let right = self.grow(right_rows, depth + 1);
        self.nodes[slot] = Node::Split {
            column: split.column,
            threshold: split.threshold,
            left,
            right,
        };
        slot
    }
}

/// Fits one tree on the given row indices, considering only `columns` as
/// split candidates. `order` must have been built over the same `columns`.
pub fn fit_tree(
    rows: &[Vec<f64>],
    targets: &[f64],
    members: Vec<u32>,
    columns: &[usize],
    order: &ColumnOrder,
    params: TreeParams,
) -> Tree {
    assert!(!members.is_empty(), "cannot fit a tree on zero rows");
    let mut builder = Builder {
        rows,
        targets,
        columns,
        order,
        params,
        nodes: Vec::new(),
        in_node: vec![false; rows.len()],
    };
    builder.grow(members, 0);
    Tree {
        nodes: builder.nodes,
    }
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    column,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*column] < *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn leaf_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { value } => Some(*value),
            Node::Split { .. } => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit_simple(rows: &[Vec<f64>], y: &[f64], params: TreeParams) -> Tree {
        let columns: Vec<usize> = (0..rows[0].len()).collect();
        let order = ColumnOrder::build(rows, &columns);
        fit_tree(
            rows,
            y,
            (0..rows.len() as u32).collect(),
            &columns,
            &order,
            params,
        )
    }

    fn default_params() -> TreeParams {
        TreeParams {
            max_depth: None,
            min_samples_leaf: 1,
            lambda: 0.0,
        }
    }

    #[test]
    fn piecewise_constant_recovered_at_depth_one() {
        let rows: Vec<Vec<f64>> = (-5..5).map(|x| vec![x as f64]).collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| if r[0] < 0.0 { 2.0 } else { 7.0 })
            .collect();
        let tree = fit_simple(
            &rows,
            &y,
            TreeParams {
                max_depth: Some(1),
                ..default_params()
            },
        );
        for (row, want) in rows.iter().zip(&y) {
            assert_eq!(tree.predict_row(row), *want);
        }
        // Brute force over every midpoint agrees the chosen threshold is best.
        assert!(matches!(
            tree.nodes[0],
            Node::Split { threshold, .. } if threshold == -0.5
        ));
    }

    #[test]
    fn constant_targets_give_single_leaf() {
        let rows: Vec<Vec<f64>> = (0..10).map(|x| vec![x as f64]).collect();
        let y = vec![4.5; 10];
        let tree = fit_simple(&rows, &y, default_params());
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(tree.predict_row(&[99.0]), 4.5);
    }

    #[test]
    fn too_few_rows_give_mean_leaf() {
        let rows = vec![vec![0.0], vec![1.0], vec![2.0]];
        let y = vec![1.0, 2.0, 6.0];
        let tree = fit_simple(
            &rows,
            &y,
            TreeParams {
                min_samples_leaf: 2,
                ..default_params()
            },
        );
        // 3 < 2·min_samples_leaf, so no split is attempted.
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(tree.predict_row(&[0.0]), 3.0);
    }

    #[test]
    fn tie_break_prefers_lowest_column_and_threshold() {
        // Both columns separate the targets perfectly; column 0 must win.
        let rows = vec![
            vec![0.0, 10.0],
            vec![1.0, 11.0],
            vec![2.0, 12.0],
            vec![3.0, 13.0],
        ];
        let y = vec![0.0, 0.0, 1.0, 1.0];
        let tree = fit_simple(&rows, &y, default_params());
        match tree.nodes[0] {
            Node::Split { column, threshold, .. } => {
                assert_eq!(column, 0);
                assert_eq!(threshold, 1.5);
            }
            Node::Leaf { .. } => panic!("expected a split at the root"),
        }
    }

    #[test]
    fn deeper_tree_never_increases_training_error() {
        let rows: Vec<Vec<f64>> = (0..40).map(|x| vec![x as f64 / 4.0]).collect();
        let y: Vec<f64> = rows.iter().map(|r| (r[0] * 1.3).sin()).collect();
        let sse = |depth| {
            let tree = fit_simple(
                &rows,
                &y,
                TreeParams {
                    max_depth: Some(depth),
                    ..default_params()
                },
            );
            rows.iter()
                .zip(&y)
                .map(|(r, t)| (tree.predict_row(r) - t).powi(2))
                .sum::<f64>()
        };
        let mut prev = f64::INFINITY;
        for depth in 0..6 {
            let err = sse(depth);
            assert!(err <= prev + 1e-12, "depth {depth} worsened training SSE");
            prev = err;
        }
    }

    #[test]
    fn exact_fit_memorizes_training_targets() {
        let rows: Vec<Vec<f64>> = (0..16).map(|x| vec![x as f64]).collect();
        let y: Vec<f64> = (0..16).map(|x| (x * x) as f64).collect();
        let tree = fit_simple(&rows, &y, default_params());
        for (row, want) in rows.iter().zip(&y) {
            assert_eq!(tree.predict_row(row), *want);
        }
    }

    #[test]
    fn lambda_shrinks_leaf_values_toward_zero() {
        let rows = vec![vec![0.0], vec![1.0]];
        let y = vec![10.0, 10.0];
        let tree = fit_simple(
            &rows,
            &y,
            TreeParams {
                lambda: 1e9,
                ..default_params()
            },
        );
        let value = tree.predict_row(&[0.0]);
        assert!(value.abs() < 1e-6, "λ→∞ leaf was {value}");
    }
}
