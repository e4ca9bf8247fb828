//! End-to-end experiment: generate a stream, pretrain, fine-tune each task,
//! merge with a chosen method and evaluate after every step.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_merger, BaselineConfig, BaselineMethod};
use crate::error::{Error, Result};
use crate::fusion::{reconstruct, AlignmentSummary, ContinualMerger, FusionConfig, LossRecord, OtmfMerger, TaskArrival};
use crate::matrix::Matrix;
use crate::metrics::{accuracy, bwt, shift_from_features, AccuracyMatrix, ShiftReport};
use crate::model::{train_sft, ModelSpec, SftConfig, TaskId, ToyModel};
use crate::param::TaskVector;
use crate::taskgen::{generate_stream, TaskStream, TaskStreamSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Otmf,
    Swa,
    TaskArithmetic,
    Ties,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 4] = [
        MergeMethod::Otmf,
        MergeMethod::Swa,
        MergeMethod::TaskArithmetic,
        MergeMethod::Ties,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::Otmf => "otmf",
            MergeMethod::Swa => "swa",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Ties => "ties",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown merge method `{s}`")))
    }
}

/// Everything a run depends on. Defaults reproduce the reference setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stream: TaskStreamSpec,
    pub model: ModelSpec,
    pub pretrain: SftConfig,
    pub finetune: SftConfig,
    pub fusion: FusionConfig,
    pub baseline: BaselineConfig,
    /// Seeds swept by multi-seed commands; each seed also seeds the stream.
    pub seeds: Vec<u64>,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stream: TaskStreamSpec::default(),
            model: ModelSpec::default(),
            pretrain: SftConfig::default(),
            finetune: SftConfig::default(),
            fusion: FusionConfig::default(),
            baseline: BaselineConfig::default(),
            seeds: vec![0],
            output_dir: "runs".into(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.fusion.validate()?;
        self.baseline.validate()?;
        if self.stream.num_tasks < 2 {
            return Err(Error::Config("merging needs num_tasks >= 2".into()));
        }
        if self.model.input_dim() != self.stream.input_dim {
            return Err(Error::Config(format!(
                "model input dim {} differs from stream input dim {}",
                self.model.input_dim(),
                self.stream.input_dim
            )));
        }
        if self.model.num_classes != self.stream.classes_per_task {
            return Err(Error::Config(format!(
                "model has {} classes, stream has {}",
                self.model.num_classes, self.stream.classes_per_task
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        Ok(())
    }

    /// The configuration with the stream seeded by `seed`.
    pub fn for_seed(&self, seed: u64) -> RunConfig {
        let mut cfg = self.clone();
        cfg.stream.seed = seed;
        cfg
    }
}

/// Pretrained model (head [`TaskId::PRETRAIN`]) plus one fine-tuned model per task.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModels {
    pub pretrained: ToyModel,
    /// `finetuned[k]` carries the head for `TaskId(k + 1)`.
    pub finetuned: Vec<ToyModel>,
}

pub fn task_id(k: usize) -> TaskId {
    TaskId(k as u32 + 1)
}

pub fn pretrain(cfg: &RunConfig, stream: &TaskStream, seed: u64) -> Result<ToyModel> {
    let init = ToyModel::init(cfg.model.clone(), seed)?;
    train_sft(&init, TaskId::PRETRAIN, std::slice::from_ref(&stream.pretrain), &cfg.pretrain, seed)
}

pub fn finetune(cfg: &RunConfig, pretrained: &ToyModel, stream: &TaskStream, k: usize, seed: u64) -> Result<ToyModel> {
    let base = ToyModel::new(
        cfg.model.clone(),
        pretrained.backbone().clone(),
        Default::default(),
    )?;
    let data = stream
        .tasks
        .get(k)
        .ok_or_else(|| Error::Data(format!("stream has no task {}", k + 1)))?;
    train_sft(
        &base,
        task_id(k),
        std::slice::from_ref(&data.train),
        &cfg.finetune,
        seed.wrapping_add(k as u64 + 1),
    )
}

pub fn train_all(cfg: &RunConfig, stream: &TaskStream, seed: u64) -> Result<TrainedModels> {
    let pretrained = pretrain(cfg, stream, seed)?;
    let finetuned = (0..stream.tasks.len())
        .map(|k| finetune(cfg, &pretrained, stream, k, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainedModels {
        pretrained,
        finetuned,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepShift {
    pub step: usize,
    #[serde(flatten)]
    pub shift: ShiftReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: MergeMethod,
    pub accuracy: AccuracyMatrix,
    pub average_accuracy: f64,
    pub bwt: f64,
    pub shifts: Vec<StepShift>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ot_loss_history: Vec<LossRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alignment: Vec<AlignmentSummary>,
}

/// Result of one merge: the report plus the artifacts it describes.
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub report: MethodReport,
    /// Merged model after every step, with the heads in use at that step.
    pub step_models: Vec<ToyModel>,
    pub step_seconds: Vec<f64>,
}

/// Source of task models for a merge; lets callers stream from disk.
pub trait TaskSource {
    fn num_tasks(&self) -> usize;
    fn load(&self, k: usize) -> Result<ToyModel>;
}

impl TaskSource for [ToyModel] {
    fn num_tasks(&self) -> usize {
        self.len()
    }

    fn load(&self, k: usize) -> Result<ToyModel> {
        self.get(k)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no model for task {}", k + 1)))
    }
}

fn features(spec: &ModelSpec, backbone: &crate::param::ParamVector, x: &Matrix) -> Result<Matrix> {
    ToyModel::new(spec.clone(), backbone.clone(), Default::default())?.forward_features(x)
}

fn drive<M: ContinualMerger + ?Sized>(
    merger: &mut M,
    method: MergeMethod,
    cfg: &RunConfig,
    theta0: &ToyModel,
    models: &(impl TaskSource + ?Sized),
    stream: &TaskStream,
) -> Result<MergeOutcome> {
    let spec = &cfg.model;
    let theta0 = theta0.backbone();
    let t_total = models.num_tasks();
    if t_total != stream.tasks.len() {
        return Err(Error::Data(format!(
            "{t_total} task models for {} tasks",
            stream.tasks.len()
        )));
    }
    let mut acc = AccuracyMatrix::new();
    let mut shifts = Vec::new();
    let mut step_models = Vec::with_capacity(t_total);
    let mut step_seconds = Vec::with_capacity(t_total);
    for k in 0..t_total {
        let started = Instant::now();
        let pre_inputs = if k > 0 {
            let parts: Vec<&Matrix> = stream.tasks[..k].iter().map(|t| &t.test.inputs).collect();
            let x = Matrix::vstack(&parts)?;
            let prev = reconstruct(theta0, merger.merged().expect("k > 0"))?;
            let f = features(spec, &prev, &x)?;
            Some((x, f))
        } else {
            None
        };
        let model = models.load(k)?;
        let post_inputs = &stream.tasks[k].test.inputs;
        let post_reference = model.forward_features(post_inputs)?;
        let arrival = TaskArrival {
            task: task_id(k),
            task_vector: TaskVector::between(model.backbone(), theta0)?,
            head: model.head(task_id(k))?.clone(),
            unlabeled: stream.tasks[k].unlabeled.clone(),
            labeled: stream.tasks[k].train.clone(),
        };
        drop(model);
        merger.absorb(arrival)?;

        let backbone = reconstruct(theta0, merger.merged().expect("absorbed"))?;
        let merged = ToyModel::new(spec.clone(), backbone, merger.heads().clone())?;
        let row = (0..=k)
            .map(|i| accuracy(&merged, task_id(i), &stream.tasks[i].test))
            .collect::<Result<Vec<_>>>()?;
        acc.push_row(row)?;
        if let Some((x, prev_features)) = pre_inputs {
            let shift = shift_from_features(
                (&merged.forward_features(&x)?, &prev_features),
                (&merged.forward_features(post_inputs)?, &post_reference),
                &cfg.fusion.sinkhorn,
            )?;
            shifts.push(StepShift { step: k + 1, shift });
        }
        step_models.push(merged);
        step_seconds.push(started.elapsed().as_secs_f64());
        log::info!("{}: step {} done", method.name(), k + 1);
    }
    let report = MethodReport {
        method,
        average_accuracy: acc.average_accuracy()?,
        bwt: bwt(&acc)?,
        accuracy: acc,
        shifts,
        ot_loss_history: Vec::new(),
        alignment: Vec::new(),
    };
    Ok(MergeOutcome {
        report,
        step_models,
        step_seconds,
    })
}

/// Merges the task models in order with `method` and evaluates every step.
pub fn merge_with(
    method: MergeMethod,
    cfg: &RunConfig,
    seed: u64,
    pretrained: &ToyModel,
    models: &(impl TaskSource + ?Sized),
    stream: &TaskStream,
) -> Result<MergeOutcome> {
    if models.num_tasks() < 2 {
        return Err(Error::Data("merging needs at least 2 tasks".into()));
    }
    let theta0 = pretrained.backbone().clone();
    match method {
        MergeMethod::Otmf => {
            let mut merger = OtmfMerger::new(cfg.model.clone(), theta0, cfg.fusion.clone(), seed)?;
            let mut out = drive(&mut merger, method, cfg, pretrained, models, stream)?;
            out.report.ot_loss_history = merger.state().ot_loss_history().to_vec();
            out.report.alignment = merger.state().alignment().to_vec();
            Ok(out)
        }
        other => {
            let b = match other {
                MergeMethod::Swa => BaselineMethod::Swa,
                MergeMethod::TaskArithmetic => BaselineMethod::TaskArithmetic,
                _ => BaselineMethod::Ties,
            };
            let mut merger = baseline_merger(b, &cfg.baseline)?;
            drive(merger.as_mut(), method, cfg, pretrained, models, stream)
        }
    }
}

/// Per-task accuracies of the trained models before any merging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceAccuracy {
    /// Each fine-tuned model on its own task's test split.
    pub finetuned: Vec<f64>,
    /// Pretrained backbone with each task's fine-tuned head.
    pub pretrained: Vec<f64>,
}

pub fn reference_accuracy(trained: &TrainedModels, stream: &TaskStream) -> Result<ReferenceAccuracy> {
    let mut finetuned = Vec::new();
    let mut pretrained = Vec::new();
    for (k, model) in trained.finetuned.iter().enumerate() {
        let test = &stream.tasks[k].test;
        finetuned.push(accuracy(model, task_id(k), test)?);
        let zero_shot = trained
            .pretrained
            .clone()
            .with_head(task_id(k), model.head(task_id(k))?.clone())?;
        pretrained.push(accuracy(&zero_shot, task_id(k), test)?);
    }
    Ok(ReferenceAccuracy {
        finetuned,
        pretrained,
    })
}

/// Full single-seed experiment in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub reference: ReferenceAccuracy,
    pub methods: Vec<MethodReport>,
}

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct Experiment {
    pub config: RunConfig,
    pub seed: u64,
    pub stream: TaskStream,
    pub trained: TrainedModels,
}

impl Experiment {
    /// Generates the stream for `seed` and trains all models.
    pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let config = cfg.for_seed(seed);
        let stream = generate_stream(&config.stream)?;
        let trained = train_all(&config, &stream, seed)?;
        Ok(Self {
            config,
            seed,
            stream,
            trained,
        })
    }

    pub fn merge(&self, method: MergeMethod) -> Result<MergeOutcome> {
        merge_with(
            method,
            &self.config,
            self.seed,
            &self.trained.pretrained,
            self.trained.finetuned.as_slice(),
            &self.stream,
        )
    }

    /// Same experiment with a different fusion configuration.
    pub fn merge_with_fusion(&self, fusion: &FusionConfig) -> Result<MergeOutcome> {
        let mut config = self.config.clone();
        config.fusion = fusion.clone();
        config.validate()?;
        merge_with(
            MergeMethod::Otmf,
            &config,
            self.seed,
            &self.trained.pretrained,
            self.trained.finetuned.as_slice(),
            &self.stream,
        )
    }

    pub fn report(&self, methods: &[MergeMethod]) -> Result<RunReport> {
        let methods = methods
            .iter()
            .map(|&m| Ok(self.merge(m)?.report))
            .collect::<Result<Vec<_>>>()?;
        Ok(RunReport {
            tool_version: TOOL_VERSION.into(),
            seed: self.seed,
            config: self.config.clone(),
            reference: reference_accuracy(&self.trained, &self.stream)?,
            methods,
        })
    }
}

/// One row of an alpha sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub per_task: Vec<f64>,
    pub average: f64,
    pub best: bool,
}

/// Full OTMF merge per grid value; the row with the highest average is
/// flagged (first one on ties).
pub fn ablate_alpha(exp: &Experiment, grid: &[f64]) -> Result<Vec<AlphaRow>> {
    if grid.is_empty() {
        return Err(Error::Config("alpha grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let fusion = FusionConfig {
            alpha,
            ..exp.config.fusion.clone()
        };
        let out = exp.merge_with_fusion(&fusion)?;
        rows.push(AlphaRow {
            alpha,
            per_task: out.report.accuracy.final_row().expect("merged").to_vec(),
            average: out.report.average_accuracy,
            best: false,
        });
    }
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.average > rows[b].average { i } else { b });
    rows[best].best = true;
    Ok(rows)
}

/// The eleven-point grid `0.0, 0.1, ..., 1.0`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}
