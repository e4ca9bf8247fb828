//! Accuracy bookkeeping, backward transfer and feature-shift measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Batch, TaskId, ToyModel};
use crate::sinkhorn::{sinkhorn_distance, SinkhornConfig};

/// `a[t][i]`: accuracy after step `t + 1` on task `i + 1`, for `i <= t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a matrix from complete lower-triangular rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the row for the next step; it must hold one entry per task so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let expected = self.rows.len() + 1;
        if row.len() != expected {
            return Err(Error::Data(format!(
                "accuracy row for step {expected} needs {expected} entries, got {}",
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Entry for step `t` and task `i`, both counted from 1.
    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t.checked_sub(1)?)?.get(i.checked_sub(1)?).copied()
    }

    pub fn final_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }

    /// Mean of the final row.
    pub fn average_accuracy(&self) -> Result<f64> {
        let row = self
            .final_row()
            .ok_or_else(|| Error::Data("empty accuracy matrix".into()))?;
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }
}

/// Backward transfer: `(1 / (T - 1)) * sum_{i < T} (a[T][i] - a[i][i])`.
pub fn bwt(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.steps();
    if t < 2 {
        return Err(Error::Data(format!("backward transfer needs >= 2 steps, got {t}")));
    }
    let last = &m.rows[t - 1];
    let total: f64 = (0..t - 1).map(|i| last[i] - m.rows[i][i]).sum();
    Ok(total / (t - 1) as f64)
}

/// Feature shift of a merged model against the two reference models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub delta_pre: f64,
    pub delta_post: f64,
    pub delta_total: f64,
    pub sinkhorn_pre: f64,
    pub sinkhorn_post: f64,
    pub sinkhorn_total: f64,
}

/// Mean l1 distance between paired feature rows.
pub fn l1_shift_features(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() == 0 {
        return Err(Error::Data("shift needs at least one input".into()));
    }
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::shape(
            "features",
            format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let total: f64 = a
        .row_iter()
        .zip(b.row_iter())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .sum();
    Ok(total / a.rows() as f64)
}

/// `mean_x |f_merged(x) - f_reference(x)|_1`.
pub fn l1_shift(merged: &ToyModel, reference: &ToyModel, inputs: &Matrix) -> Result<f64> {
    l1_shift_features(&merged.forward_features(inputs)?, &reference.forward_features(inputs)?)
}

/// Transport cost between two clouds after dividing both by the mean row
/// norm of `reference`.
pub fn sinkhorn_shift_features(merged: &Matrix, reference: &Matrix, cfg: &SinkhornConfig) -> Result<f64> {
    let norm = reference.mean_row_norm();
    let s = if norm > 0.0 { 1.0 / norm } else { 1.0 };
    Ok(sinkhorn_distance(&merged.scaled(s), &reference.scaled(s), cfg)?.0)
}

/// Shift from precomputed feature clouds: `(merged, reference)` per side.
pub fn shift_from_features(
    pre: (&Matrix, &Matrix),
    post: (&Matrix, &Matrix),
    cfg: &SinkhornConfig,
) -> Result<ShiftReport> {
    let delta_pre = l1_shift_features(pre.0, pre.1)?;
    let delta_post = l1_shift_features(post.0, post.1)?;
    let sinkhorn_pre = sinkhorn_shift_features(pre.0, pre.1, cfg)?;
    let sinkhorn_post = sinkhorn_shift_features(post.0, post.1, cfg)?;
    Ok(ShiftReport {
        delta_pre,
        delta_post,
        delta_total: delta_pre + delta_post,
        sinkhorn_pre,
        sinkhorn_post,
        sinkhorn_total: sinkhorn_pre + sinkhorn_post,
    })
}

pub fn total_shift(
    merged: &ToyModel,
    pre_model: &ToyModel,
    post_model: &ToyModel,
    pre_inputs: &Matrix,
    post_inputs: &Matrix,
    cfg: &SinkhornConfig,
) -> Result<ShiftReport> {
    shift_from_features(
        (&merged.forward_features(pre_inputs)?, &pre_model.forward_features(pre_inputs)?),
        (&merged.forward_features(post_inputs)?, &post_model.forward_features(post_inputs)?),
        cfg,
    )
}

/// Fraction of argmax-correct predictions (ties go to the lowest class).
pub fn accuracy(model: &ToyModel, task: TaskId, batch: &Batch) -> Result<f64> {
    batch.check_classes(model.spec().num_classes)?;
    let predicted = model.predict(task, &batch.inputs)?;
    let correct = predicted
        .iter()
        .zip(&batch.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
