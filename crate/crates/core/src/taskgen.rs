//! In-context linear regression tasks.
//!
//! A task is a weight vector `w ~ N(0, I)` plus `N − 1` context inputs and one
//! query, all `~ N(0, I)`. Each sequence position stacks an input on top of
//! its label, so the model sees a `(d_x + 1) × N` matrix whose last column is
//! `[x_query, 0]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix, RngState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub weights: Vec<f64>,
    pub context: Vec<Vec<f64>>,
    pub query: Vec<f64>,
}

impl Task {
    pub fn label(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x)
    }

    pub fn target(&self) -> f64 {
        self.label(&self.query)
    }

    pub fn input_dim(&self) -> usize {
        self.weights.len()
    }

    /// Column `j < N−1` is `[x_j, ⟨w, x_j⟩]`; the last column is `[x_query, 0]`.
    pub fn build_sequence(&self) -> Matrix {
        let dx = self.input_dim();
        let n = self.context.len() + 1;
        let mut m = Matrix::zeros(dx + 1, n);
        for (j, x) in self.context.iter().enumerate() {
            for (k, v) in x.iter().enumerate() {
                m[(k, j)] = *v;
            }
            m[(dx, j)] = self.label(x);
        }
        for (k, v) in self.query.iter().enumerate() {
            m[(k, n - 1)] = *v;
        }
        m
    }
}

/// Reads `(x_j, y_j)` context pairs back out of a sequence matrix.
pub fn read_pairs(seq: &Matrix) -> Vec<(Vec<f64>, f64)> {
    let dx = seq.rows() - 1;
    (0..seq.cols() - 1)
        .map(|j| {
            let col = seq.col(j);
            (col[..dx].to_vec(), col[dx])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBatch {
    pub tasks: Vec<Task>,
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn sequences(&self) -> Vec<Matrix> {
        self.tasks.iter().map(Task::build_sequence).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.tasks.iter().map(Task::target).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("task batch serialises");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

/// Draws `batch` tasks with `seq_len − 1` context pairs each.
///
/// Per task the draw order is `w`, then the context inputs, then the query.
pub fn sample_tasks(rng: &mut RngState, batch: usize, seq_len: usize, input_dim: usize) -> TaskBatch {
    assert!(batch >= 1 && seq_len >= 1 && input_dim >= 1, "task sizes must be >= 1");
    let draw = |rng: &mut RngState| -> Vec<f64> { (0..input_dim).map(|_| rng.normal()).collect() };
    let tasks = (0..batch)
        .map(|_| {
            let weights = draw(rng);
            let context = (0..seq_len - 1).map(|_| draw(rng)).collect();
            let query = draw(rng);
            Task {
                weights,
                context,
                query,
            }
        })
        .collect();
    TaskBatch { tasks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_is_inner_product() {
        let t = Task {
            weights: vec![2.0],
            context: vec![vec![3.0]],
            query: vec![1.0],
        };
        assert_eq!(t.label(&[3.0]), 6.0);
        assert_eq!(t.build_sequence(), Matrix::from_rows(&[&[3.0, 1.0], &[6.0, 0.0]]));
    }

    #[test]
    fn layout_stacks_input_over_label() {
        let t = Task {
            weights: vec![3.0, -1.0],
            context: vec![vec![1.0, 0.0]],
            query: vec![0.5, 0.25],
        };
        let s = t.build_sequence();
        assert_eq!(s.col(0), vec![1.0, 0.0, 3.0]);
        assert_eq!(s.col(1), vec![0.5, 0.25, 0.0]);
    }

    #[test]
    fn sampling_is_deterministic_and_pairs_read_back() {
        let a = sample_tasks(&mut RngState::new(4), 3, 6, 2);
        let b = sample_tasks(&mut RngState::new(4), 3, 6, 2);
        assert_eq!(a, b);
        for (task, seq) in a.tasks.iter().zip(a.sequences()) {
            assert_eq!(seq.shape(), (3, 6));
            assert_eq!(seq[(2, 5)], 0.0);
            let pairs = read_pairs(&seq);
            assert_eq!(pairs.len(), 5);
            for ((x, y), cx) in pairs.iter().zip(&task.context) {
                assert_eq!(x, cx);
                assert_eq!(*y, task.label(cx));
            }
        }
    }

    #[test]
    fn label_variance_is_input_dim() {
        // Var(<w, x>) = d_x for independent unit normals.
        let dx = 3;
        let batch = sample_tasks(&mut RngState::new(8), 20_000, 2, dx);
        let ys: Vec<f64> = batch.tasks.iter().map(|t| t.label(&t.context[0])).collect();
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        assert!((var - dx as f64).abs() < 0.15, "var {var}");
    }

    #[test]
    fn single_token_sequences_are_just_the_query() {
        let b = sample_tasks(&mut RngState::new(1), 2, 1, 2);
        let s = b.sequences();
        assert_eq!(s[0].shape(), (3, 1));
        assert_eq!(s[0][(2, 0)], 0.0);
    }
}
