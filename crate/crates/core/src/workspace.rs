//! Run directories: each command reads the artifacts of the previous one.
//!
//! ```text
//! <out>/seed-<s>/config.toml
//! <out>/seed-<s>/data/{pretrain,task<k>_train,task<k>_test}.csv
//! <out>/seed-<s>/models/{pretrained,task<k>}.ckpt, reference.json
//! <out>/seed-<s>/merge/<method>/step<t>.ckpt, merged.ckpt, report.json,
//!                               accuracy.csv, timings.json
//! <out>/seed-<s>/eval/<name>/eval.json, features_task<k>.csv
//! <out>/seed-<s>/ablate-alpha/alpha.csv, alpha.json
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{accuracy, l1_shift_features, sinkhorn_shift_features};
use crate::model::{Batch, ToyModel};
use crate::pipeline::{
    ablate_alpha, merge_with, reference_accuracy, task_id, train_all, AlphaRow, Experiment, MergeMethod,
    MethodReport, ReferenceAccuracy, RunConfig, TaskSource, TrainedModels, TOOL_VERSION,
};
use crate::taskgen::{generate_stream, TaskData, TaskStream};

/// Directory of one seed's artifacts.
#[derive(Debug, Clone)]
pub struct SeedDir {
    root: PathBuf,
}

impl SeedDir {
    pub fn new(out: &Path, seed: u64) -> Self {
        Self {
            root: out.join(format!("seed-{seed}")),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data(&self, file: &str) -> PathBuf {
        self.root.join("data").join(file)
    }

    pub fn model(&self, k: Option<usize>) -> PathBuf {
        let name = k.map_or("pretrained.ckpt".to_string(), |k| format!("task{}.ckpt", k + 1));
        self.root.join("models").join(name)
    }

    pub fn merge_dir(&self, method: MergeMethod) -> PathBuf {
        self.root.join("merge").join(method.name())
    }

    pub fn eval_dir(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(name)
    }

    pub fn ablate_dir(&self) -> PathBuf {
        self.root.join("ablate-alpha")
    }
}

/// Writes the stream for `cfg.for_seed(seed)`.
pub fn gen(cfg: &RunConfig, seed: u64, dir: &SeedDir) -> Result<TaskStream> {
    cfg.validate()?;
    let cfg = cfg.for_seed(seed);
    let stream = generate_stream(&cfg.stream)?;
    io::write_bytes(&dir.root.join("config.toml"), io::config_to_toml(&cfg)?.as_bytes())?;
    io::save_batch(&dir.data("pretrain.csv"), &stream.pretrain)?;
    for (k, task) in stream.tasks.iter().enumerate() {
        io::save_batch(&dir.data(&format!("task{}_train.csv", k + 1)), &task.train)?;
        io::save_batch(&dir.data(&format!("task{}_test.csv", k + 1)), &task.test)?;
    }
    Ok(stream)
}

fn check_batch(batch: &Batch, cfg: &RunConfig, file: &str) -> Result<()> {
    if batch.inputs.cols() != cfg.stream.input_dim {
        return Err(Error::shape(
            file,
            format!("{} input columns, config says {}", batch.inputs.cols(), cfg.stream.input_dim),
        ));
    }
    batch.check_classes(cfg.model.num_classes)
}

/// Reads the stream written by [`gen`].
pub fn load_stream(cfg: &RunConfig, dir: &SeedDir) -> Result<TaskStream> {
    let load = |file: String| -> Result<Batch> {
        let b = io::load_batch(&dir.data(&file))?;
        check_batch(&b, cfg, &file)?;
        Ok(b)
    };
    let pretrain = load("pretrain.csv".into())?;
    let tasks = (1..=cfg.stream.num_tasks)
        .map(|k| {
            let train = load(format!("task{k}_train.csv"))?;
            let test = load(format!("task{k}_test.csv"))?;
            Ok(TaskData {
                unlabeled: train.inputs.clone(),
                train,
                test,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskStream { pretrain, tasks })
}

/// Trains the pretrained and fine-tuned models and records their accuracy.
pub fn train(cfg: &RunConfig, seed: u64, dir: &SeedDir) -> Result<ReferenceAccuracy> {
    cfg.validate()?;
    let cfg = cfg.for_seed(seed);
    let stream = load_stream(&cfg, dir)?;
    let trained = train_all(&cfg, &stream, seed)?;
    io::save_checkpoint(&dir.model(None), &trained.pretrained)?;
    for (k, m) in trained.finetuned.iter().enumerate() {
        io::save_checkpoint(&dir.model(Some(k)), m)?;
    }
    let reference = reference_accuracy(&trained, &stream)?;
    io::save_json(
        &dir.root.join("models").join("reference.json"),
        &Stamped::new(&cfg, seed, &reference),
    )?;
    Ok(reference)
}

fn check_model(model: &ToyModel, cfg: &RunConfig, path: &Path) -> Result<()> {
    if model.spec() != &cfg.model {
        return Err(Error::shape(
            path.display().to_string(),
            "checkpoint architecture differs from the configured model",
        ));
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<ToyModel> {
    let m = io::load_checkpoint(path)?;
    check_model(&m, cfg, path)?;
    Ok(m)
}

/// Task checkpoints read one at a time during a merge.
struct DiskModels<'a> {
    cfg: &'a RunConfig,
    dir: &'a SeedDir,
}

impl TaskSource for DiskModels<'_> {
    fn num_tasks(&self) -> usize {
        self.cfg.stream.num_tasks
    }

    fn load(&self, k: usize) -> Result<ToyModel> {
        load_model(self.cfg, &self.dir.model(Some(k)))
    }
}

fn load_trained(cfg: &RunConfig, dir: &SeedDir) -> Result<TrainedModels> {
    let src = DiskModels { cfg, dir };
    Ok(TrainedModels {
        pretrained: load_model(cfg, &dir.model(None))?,
        finetuned: (0..src.num_tasks()).map(|k| src.load(k)).collect::<Result<_>>()?,
    })
}

fn accuracy_csv(report: &MethodReport) -> String {
    let t = report.accuracy.steps();
    let mut header = vec!["step".to_string()];
    header.extend((1..=t).map(|i| format!("task{i}")));
    let rows = report.accuracy.rows().iter().enumerate().map(|(s, row)| {
        let mut r = vec![(s + 1).to_string()];
        r.extend((0..t).map(|i| row.get(i).map_or(String::new(), |v| format!("{v:?}"))));
        r
    });
    io::encode_csv(&header, rows)
}

/// A command's result with the effective config and seed that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub tool_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub result: T,
}

impl<T> Stamped<T> {
    pub fn new(cfg: &RunConfig, seed: u64, result: T) -> Self {
        Self {
            tool_version: TOOL_VERSION.into(),
            seed,
            config: cfg.clone(),
            result,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timings {
    pub method: MergeMethod,
    pub step_seconds: Vec<f64>,
}

/// Merges the task checkpoints in order and writes per-step checkpoints and the report.
pub fn merge(cfg: &RunConfig, seed: u64, dir: &SeedDir, method: MergeMethod) -> Result<MethodReport> {
    cfg.validate()?;
    let cfg = cfg.for_seed(seed);
    let stream = load_stream(&cfg, dir)?;
    let pretrained = load_model(&cfg, &dir.model(None))?;
    let out = merge_with(method, &cfg, seed, &pretrained, &DiskModels { cfg: &cfg, dir }, &stream)?;
    let mdir = dir.merge_dir(method);
    for (t, m) in out.step_models.iter().enumerate() {
        io::save_checkpoint(&mdir.join(format!("step{}.ckpt", t + 1)), m)?;
    }
    let last = out.step_models.last().expect("at least two steps");
    io::save_checkpoint(&mdir.join("merged.ckpt"), last)?;
    io::save_json(&mdir.join("report.json"), &Stamped::new(&cfg, seed, &out.report))?;
    io::write_bytes(&mdir.join("accuracy.csv"), accuracy_csv(&out.report).as_bytes())?;
    io::save_json(
        &mdir.join("timings.json"),
        &Timings {
            method,
            step_seconds: out.step_seconds,
        },
    )?;
    Ok(out.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: usize,
    pub accuracy: f64,
    /// Mean per-sample ℓ1 distance to the task's fine-tuned features.
    pub l1_shift: f64,
    /// Sinkhorn transport cost to the task's fine-tuned features.
    pub sinkhorn_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub tasks: Vec<TaskEval>,
    pub average_accuracy: f64,
}

/// Evaluates a checkpoint on every task it has a head for, against the
/// fine-tuned models, and dumps the feature clouds.
pub fn eval(cfg: &RunConfig, seed: u64, dir: &SeedDir, checkpoint: &Path, name: &str) -> Result<EvalReport> {
    cfg.validate()?;
    let cfg = cfg.for_seed(seed);
    let stream = load_stream(&cfg, dir)?;
    let model = load_model(&cfg, checkpoint)?;
    let edir = dir.eval_dir(name);
    let mut tasks = Vec::new();
    for k in 0..cfg.stream.num_tasks {
        if !model.heads().contains_key(&task_id(k)) {
            continue;
        }
        let test = &stream.tasks[k].test;
        let sft = load_model(&cfg, &dir.model(Some(k)))?;
        let f = model.forward_features(&test.inputs)?;
        let f_sft = sft.forward_features(&test.inputs)?;
        let sk = sinkhorn_shift_features(&f, &f_sft, &cfg.fusion.sinkhorn)?;
        tasks.push(TaskEval {
            task: k + 1,
            accuracy: accuracy(&model, task_id(k), test)?,
            l1_shift: l1_shift_features(&f, &f_sft)?,
            sinkhorn_shift: sk,
        });
        let dump = io::encode_features(&[("merged", &f), ("finetuned", &f_sft)])?;
        io::write_bytes(&edir.join(format!("features_task{}.csv", k + 1)), dump.as_bytes())?;
    }
    if tasks.is_empty() {
        return Err(Error::Data(format!("{} has no task heads", checkpoint.display())));
    }
    let report = EvalReport {
        checkpoint: checkpoint.display().to_string(),
        average_accuracy: tasks.iter().map(|t| t.accuracy).sum::<f64>() / tasks.len() as f64,
        tasks,
    };
    io::save_json(&edir.join("eval.json"), &Stamped::new(&cfg, seed, &report))?;
    Ok(report)
}

/// OTMF alpha sweep over the stored models.
pub fn ablate(cfg: &RunConfig, seed: u64, dir: &SeedDir, grid: &[f64]) -> Result<Vec<AlphaRow>> {
    cfg.validate()?;
    if let Some(a) = grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
    }
    let config = cfg.for_seed(seed);
    let stream = load_stream(&config, dir)?;
    let trained = load_trained(&config, dir)?;
    let exp = Experiment {
        config,
        seed,
        stream,
        trained,
    };
    let rows = ablate_alpha(&exp, grid)?;
    let t = exp.stream.tasks.len();
    let mut header = vec!["alpha".to_string()];
    header.extend((1..=t).map(|i| format!("task{i}")));
    header.extend(["average".to_string(), "best".to_string()]);
    let lines = rows.iter().map(|r| {
        let mut l = vec![format!("{:?}", r.alpha)];
        l.extend(r.per_task.iter().map(|v| format!("{v:?}")));
        l.push(format!("{:?}", r.average));
        l.push(r.best.to_string());
        l
    });
    let adir = dir.ablate_dir();
    io::write_bytes(&adir.join("alpha.csv"), io::encode_csv(&header, lines).as_bytes())?;
    io::save_json(&adir.join("alpha.json"), &Stamped::new(&exp.config, seed, &rows))?;
    Ok(rows)
}

/// `gen`, `train` and a merge per method, in one call.
pub fn run_all(cfg: &RunConfig, seed: u64, dir: &SeedDir, methods: &[MergeMethod]) -> Result<Vec<MethodReport>> {
    gen(cfg, seed, dir)?;
    train(cfg, seed, dir)?;
    methods.iter().map(|&m| merge(cfg, seed, dir, m)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::taskgen::TaskStreamSpec;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.stream = TaskStreamSpec {
            num_tasks: 2,
            input_dim: 3,
            classes_per_task: 2,
            samples_per_task: 40,
            pretrain_samples: 40,
            ..TaskStreamSpec::default()
        };
        cfg.model = ModelSpec {
            layer_dims: vec![3, 4],
            num_classes: 2,
            ..ModelSpec::default()
        };
        cfg.pretrain.epochs = 5;
        cfg.finetune.epochs = 5;
        cfg.fusion.ot_epochs = 2;
        cfg.fusion.head_epochs = 2;
        cfg
    }

    #[test]
    fn stream_round_trips_through_disk() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = SeedDir::new(tmp.path(), 4);
        let cfg = small();
        let stream = gen(&cfg, 4, &dir).unwrap();
        assert_eq!(load_stream(&cfg.for_seed(4), &dir).unwrap(), stream);
    }

    #[test]
    fn missing_models_are_io_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = SeedDir::new(tmp.path(), 0);
        let cfg = small();
        gen(&cfg, 0, &dir).unwrap();
        assert!(matches!(merge(&cfg, 0, &dir, MergeMethod::Swa), Err(Error::Io { .. })));
    }

    #[test]
    fn architecture_mismatch_is_a_shape_error() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = SeedDir::new(tmp.path(), 0);
        let cfg = small();
        run_all(&cfg, 0, &dir, &[]).unwrap();
        let mut other = cfg.clone();
        other.model.layer_dims = vec![3, 5];
        assert!(matches!(
            merge(&other, 0, &dir, MergeMethod::Swa),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
