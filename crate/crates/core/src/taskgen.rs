//! Synthetic task streams: Gaussian blobs under task-specific rigid motions.
//!
//! A base layout of class centroids is drawn once per seed. Every task moves
//! the centroids by a motion shared across the stream, then by a motion of
//! its own, `task_spread` times as large. A motion is a product of Givens
//! rotations followed by a translation; angles and translation length scale
//! with `heterogeneity`. Pretraining data comes from the untransformed
//! layout, so the tasks are related domains away from it.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::Batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskStreamSpec {
    pub num_tasks: usize,
    pub input_dim: usize,
    pub classes_per_task: usize,
    pub samples_per_task: usize,
    /// Scales both the rotation angles and the translation length.
    pub heterogeneity: f64,
    pub seed: u64,
    pub pretrain_samples: usize,
    /// Standard deviation of the base centroids around the origin.
    pub centroid_spread: f64,
    /// Within-class standard deviation.
    pub noise_std: f64,
    /// Translation length at `heterogeneity = 1`.
    pub translation: f64,
    /// Size of each task's own motion relative to the motion all tasks share.
    pub task_spread: f64,
}

impl Default for TaskStreamSpec {
    fn default() -> Self {
        Self {
            num_tasks: 3,
            input_dim: 8,
            classes_per_task: 4,
            samples_per_task: 200,
            heterogeneity: 1.0,
            seed: 0,
            pretrain_samples: 400,
            centroid_spread: 1.5,
            noise_std: 0.5,
            translation: 1.0,
            task_spread: 0.6,
        }
    }
}

impl TaskStreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks < 1
            || self.input_dim < 1
            || self.classes_per_task < 1
            || self.pretrain_samples < 1
        {
            return Err(Error::Config("task stream counts and dims must be >= 1".into()));
        }
        if self.samples_per_task < 5 * self.classes_per_task {
            return Err(Error::Config(format!(
                "samples_per_task must be >= 5 per class so every class appears in both splits, got {}",
                self.samples_per_task
            )));
        }
        for (name, v) in [
            ("heterogeneity", self.heterogeneity),
            ("centroid_spread", self.centroid_spread),
            ("noise_std", self.noise_std),
            ("translation", self.translation),
            ("task_spread", self.task_spread),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Batch,
    pub test: Batch,
    /// Inputs available without labels (the training inputs).
    pub unlabeled: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub pretrain: Batch,
    pub tasks: Vec<TaskData>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Rigid motion applied to a task's centroids.
struct Motion {
    /// Givens rotations `(i, j, angle)`, applied in order.
    rotations: Vec<(usize, usize, f64)>,
    translation: Vec<f64>,
}

impl Motion {
    fn random(rng: &mut ChaCha8Rng, d: usize, angle_scale: f64, translation: f64) -> Self {
        let mut rotations = Vec::new();
        if d >= 2 {
            for _ in 0..d {
                let i = rng.random_range(0..d);
                let mut j = rng.random_range(0..d - 1);
                if j >= i {
                    j += 1;
                }
                let angle = angle_scale * rng.random_range(-PI / 2.0..PI / 2.0);
                rotations.push((i, j, angle));
            }
        }
        let dir: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let translation = dir.iter().map(|v| v / norm * translation).collect();
        Self {
            rotations,
            translation,
        }
    }

    fn apply(&self, point: &mut [f64]) {
        for &(i, j, angle) in &self.rotations {
            let (s, c) = angle.sin_cos();
            let (a, b) = (point[i], point[j]);
            point[i] = c * a - s * b;
            point[j] = s * a + c * b;
        }
        for (p, t) in point.iter_mut().zip(&self.translation) {
            *p += t;
        }
    }
}

fn base_centroids(rng: &mut ChaCha8Rng, spec: &TaskStreamSpec) -> Vec<Vec<f64>> {
    (0..spec.classes_per_task)
        .map(|_| {
            (0..spec.input_dim)
                .map(|_| spec.centroid_spread * gauss(rng))
                .collect()
        })
        .collect()
}

/// `per_class` samples of every class around `centroids`, shuffled.
fn sample_blobs(
    rng: &mut ChaCha8Rng,
    centroids: &[Vec<f64>],
    per_class: &[usize],
    noise: f64,
) -> Result<Batch> {
    let mut rows = Vec::new();
    for (c, (mu, &n)) in centroids.iter().zip(per_class).enumerate() {
        for _ in 0..n {
            let x: Vec<f64> = mu
                .iter()
                .map(|m| m + noise * gauss(rng))
                .collect();
            rows.push((x, c));
        }
    }
    rows.shuffle(rng);
    let labels = rows.iter().map(|(_, c)| *c).collect();
    let inputs: Vec<Vec<f64>> = rows.into_iter().map(|(x, _)| x).collect();
    Batch::new(Matrix::from_rows(&inputs)?, labels)
}

fn balanced_counts(total: usize, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| total / classes + usize::from(c < total % classes))
        .collect()
}

/// Deterministic stream for `spec`; identical specs give bit-identical data.
pub fn generate_stream(spec: &TaskStreamSpec) -> Result<TaskStream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = base_centroids(&mut rng, spec);
    let (d, h) = (spec.input_dim, spec.heterogeneity);
    let shared = Motion::random(&mut rng, d, h, h * spec.translation);
    let own = h * spec.task_spread;
    let motions: Vec<Motion> = (0..spec.num_tasks)
        .map(|_| Motion::random(&mut rng, d, own, own * spec.translation))
        .collect();

    let pretrain_counts = balanced_counts(spec.pretrain_samples, spec.classes_per_task);
    let pretrain = {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0000);
        sample_blobs(&mut r, &base, &pretrain_counts, spec.noise_std)?
    };

    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for (k, motion) in motions.iter().enumerate() {
        let centroids: Vec<Vec<f64>> = base
            .iter()
            .map(|mu| {
                let mut p = mu.clone();
                shared.apply(&mut p);
                motion.apply(&mut p);
                p
            })
            .collect();
        let counts = balanced_counts(spec.samples_per_task, spec.classes_per_task);
        let train_counts: Vec<usize> = counts.iter().map(|n| n * 4 / 5).collect();
        let test_counts: Vec<usize> = counts.iter().zip(&train_counts).map(|(n, t)| n - t).collect();
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x7a5c_0000 + k as u64 + 1));
        let train = sample_blobs(&mut r, &centroids, &train_counts, spec.noise_std)?;
        let test = sample_blobs(&mut r, &centroids, &test_counts, spec.noise_std)?;
        let unlabeled = train.inputs.clone();
        tasks.push(TaskData {
            train,
            test,
            unlabeled,
        });
    }
    Ok(TaskStream { pretrain, tasks })
}

/// `ceil(x)` that ignores round-off just above an integer.
fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Stratified subsample of `ceil(fraction * n)` rows, kept in original order.
///
/// Per-class quotas follow the largest-remainder rule, so each class gets
/// `floor` or `ceil` of `fraction * n_c`; every class keeps at least one row
/// whenever the total allows.
pub fn subsample_labeled(batch: &Batch, fraction: f64, seed: u64) -> Result<Batch> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let num_classes = batch.labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in batch.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let total = ceil_count(fraction * batch.len() as f64).min(batch.len());
    if total == 0 {
        return Err(Error::Data("subsample would be empty".into()));
    }

    let exact: Vec<f64> = by_class.iter().map(|ix| fraction * ix.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - quota[a] as f64;
        let rb = exact[b] - quota[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = total.saturating_sub(quota.iter().sum());
    for &c in order.iter().cycle().take(num_classes * 2) {
        if missing == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let present = by_class.iter().filter(|ix| !ix.is_empty()).count();
    if total >= present {
        for c in 0..num_classes {
            if quota[c] == 0 && !by_class[c].is_empty() {
                let donor = (0..num_classes)
                    .max_by_key(|&d| (quota[d], std::cmp::Reverse(d)))
                    .expect("at least one class");
                quota[donor] -= 1;
                quota[c] = 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(total);
    for (ix, &q) in by_class.iter().zip(&quota) {
        let mut ix = ix.clone();
        ix.shuffle(&mut rng);
        picked.extend_from_slice(&ix[..q]);
    }
    picked.sort_unstable();
    let labels = picked.iter().map(|&i| batch.labels[i]).collect();
    Batch::new(batch.inputs.select_rows(&picked), labels)
}
