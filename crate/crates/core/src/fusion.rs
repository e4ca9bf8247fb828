//! Masked task-vector fusion trained by an optimal-transport alignment loss.
//!
//! Each continual step fuses the running merged task vector (`pre`) with the
//! incoming one (`post`):
//!
//! ```text
//! delta_m = alpha * (m_pre ⊙ delta_pre) + (1 - alpha) * (m_post ⊙ delta_post)
//! theta   = theta0 + delta_m
//! ```
//!
//! The masks start at one and are trained in alternation: odd epochs move
//! `m_pre` to pull the merged features towards the previous merged model,
//! even epochs move `m_post` towards the incoming fine-tuned model. The loss is
//! the entropic OT objective between the two feature clouds. Both clouds are
//! divided by the mean row norm of the target features, so `epsilon` is
//! relative to the feature scale.
//!
//! Only [`TaskVector`] values count towards the memory contract: a merger
//! holds the running merged vector and the incoming one, plus the freshly
//! fused vector for the instant before the old one is dropped.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{
    backbone_backward, backbone_forward, cross_entropy_and_grad, head_backward, head_logits, Batch,
    ModelSpec, TaskId,
};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::param::{MaskVector, ParamVector, TaskVector};
use crate::sinkhorn::{pairwise_cost, sinkhorn_grad_features, sinkhorn_plan, Marginals, SinkhornConfig};
use crate::taskgen::subsample_labeled;

/// Which unlabeled inputs the pre-side loss is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreBatchPolicy {
    /// Inputs from every task merged so far.
    Mixture,
    /// Inputs of the most recently merged task only.
    Recent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub alpha: f64,
    pub ot_epochs: usize,
    pub mask_lr: f64,
    pub optimizer: OptimizerConfig,
    /// Samples per side in the OT loss.
    pub batch_size: usize,
    pub sinkhorn: SinkhornConfig,
    pub pre_batch: PreBatchPolicy,
    pub head_epochs: usize,
    pub head_lr: f64,
    pub head_optimizer: OptimizerConfig,
    /// Fraction of the labeled training split used for head fine-tuning.
    pub head_fraction: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            ot_epochs: 100,
            mask_lr: 0.01,
            optimizer: OptimizerConfig::default(),
            batch_size: 64,
            sinkhorn: SinkhornConfig::default(),
            pre_batch: PreBatchPolicy::Mixture,
            head_epochs: 100,
            head_lr: 0.01,
            head_optimizer: OptimizerConfig::default(),
            head_fraction: 0.25,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.mask_lr > 0.0) || !self.mask_lr.is_finite() {
            return Err(Error::Config(format!("mask_lr must be > 0, got {}", self.mask_lr)));
        }
        if !(self.head_lr >= 0.0) || !self.head_lr.is_finite() {
            return Err(Error::Config(format!("head_lr must be >= 0, got {}", self.head_lr)));
        }
        if !(self.head_fraction > 0.0 && self.head_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "head_fraction must be in (0, 1], got {}",
                self.head_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.head_optimizer.validate()?;
        self.sinkhorn.validate()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Pre,
    Post,
}

impl Side {
    /// Odd epochs train the pre mask, even epochs the post mask (epochs count from 1).
    pub fn for_epoch(epoch: usize) -> Side {
        if epoch % 2 == 1 {
            Side::Pre
        } else {
            Side::Post
        }
    }
}

/// `alpha * (m_pre ⊙ pre) + (1 - alpha) * (m_post ⊙ post)`.
pub fn masked_fuse(
    pre: &ParamVector,
    post: &ParamVector,
    m_pre: &MaskVector,
    m_post: &MaskVector,
    alpha: f64,
) -> Result<ParamVector> {
    check_alpha(alpha)?;
    let a = pre.hadamard(m_pre)?.scale(alpha)?;
    let b = post.hadamard(m_post)?.scale(1.0 - alpha)?;
    a.add(&b)
}

/// `theta0 + delta`.
pub fn reconstruct(theta0: &ParamVector, delta: &ParamVector) -> Result<ParamVector> {
    theta0.add(delta)
}

/// Unlabeled inputs and the (scaled) features a reference model assigns them.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTarget {
    inputs: Matrix,
    features: Matrix,
    scale: f64,
}

impl AlignmentTarget {
    pub fn new(spec: &ModelSpec, backbone: &ParamVector, inputs: Matrix) -> Result<Self> {
        let features = backbone_forward(spec, backbone, &inputs)?
            .pop()
            .expect("trace holds at least the input");
        Ok(Self::from_features(inputs, features))
    }

    pub fn from_features(inputs: Matrix, features: Matrix) -> Self {
        let norm = features.mean_row_norm();
        let scale = if norm > 0.0 { 1.0 / norm } else { 1.0 };
        Self {
            inputs,
            features: features.scaled(scale),
            scale,
        }
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    /// Target features after scaling.
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// Value of the alignment loss at one mask setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OtLoss {
    /// `<P, C>`, the reported distance.
    pub transport_cost: f64,
    /// Entropic objective; the quantity the masks descend.
    pub regularized_cost: f64,
}

/// Everything fixed during one continual step.
#[derive(Debug, Clone, Copy)]
pub struct FusionProblem<'a> {
    pub spec: &'a ModelSpec,
    pub theta0: &'a ParamVector,
    pub delta_pre: &'a ParamVector,
    pub delta_post: &'a ParamVector,
    pub alpha: f64,
    pub sinkhorn: &'a SinkhornConfig,
}

impl FusionProblem<'_> {
    pub fn merged_backbone(&self, m_pre: &MaskVector, m_post: &MaskVector) -> Result<ParamVector> {
        let delta = masked_fuse(self.delta_pre, self.delta_post, m_pre, m_post, self.alpha)?;
        reconstruct(self.theta0, &delta)
    }

    /// Alignment loss of the merged model against `target`.
    pub fn loss(&self, m_pre: &MaskVector, m_post: &MaskVector, target: &AlignmentTarget) -> Result<OtLoss> {
        let backbone = self.merged_backbone(m_pre, m_post)?;
        let features = last(backbone_forward(self.spec, &backbone, &target.inputs)?);
        let (loss, _) = self.solve(&features, target)?;
        Ok(loss)
    }

    /// Loss and its gradient with respect to the mask on `side`.
    ///
    /// The plan is held fixed (envelope gradient), the feature gradient is
    /// pulled back through the backbone, then multiplied by the side's
    /// scaled task vector.
    pub fn loss_and_mask_grad(
        &self,
        m_pre: &MaskVector,
        m_post: &MaskVector,
        target: &AlignmentTarget,
        side: Side,
    ) -> Result<(OtLoss, ParamVector)> {
        let backbone = self.merged_backbone(m_pre, m_post)?;
        let trace = backbone_forward(self.spec, &backbone, &target.inputs)?;
        let features = trace.last().expect("trace holds at least the input");
        let (loss, feature_grad) = self.solve(features, target)?;
        let grad = backbone_backward(self.spec, &backbone, &trace, &feature_grad)?;
        let (delta, coeff) = match side {
            Side::Pre => (self.delta_pre, self.alpha),
            Side::Post => (self.delta_post, 1.0 - self.alpha),
        };
        let mask_grad = grad.zip_with(delta, |g, d| g * (coeff * d))?;
        Ok((loss, mask_grad))
    }

    /// Solves the transport problem on scaled clouds; returns the loss and
    /// its gradient in the unscaled merged features.
    fn solve(&self, features: &Matrix, target: &AlignmentTarget) -> Result<(OtLoss, Matrix)> {
        let x = features.scaled(target.scale);
        let cost = pairwise_cost(&x, &target.features)?;
        let marginals = Marginals::uniform(x.rows(), target.features.rows())?;
        let plan = sinkhorn_plan(&cost, &marginals, self.sinkhorn)?;
        let grad = sinkhorn_grad_features(&x, &target.features, &plan)?.scaled(target.scale);
        Ok((
            OtLoss {
                transport_cost: plan.transport_cost,
                regularized_cost: plan.regularized_cost,
            },
            grad,
        ))
    }
}

fn last(mut trace: Vec<Matrix>) -> Matrix {
    trace.pop().expect("trace holds at least the input")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// Continual step (number of tasks merged once the step completes).
    pub step: usize,
    pub epoch: usize,
    pub side: Side,
    pub transport_cost: f64,
    pub regularized_cost: f64,
}

/// Both-side transport costs at the start and end of one step's mask training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub step: usize,
    pub initial_pre: f64,
    pub initial_post: f64,
    pub final_pre: f64,
    pub final_post: f64,
}

impl AlignmentSummary {
    pub fn initial_total(&self) -> f64 {
        self.initial_pre + self.initial_post
    }

    pub fn final_total(&self) -> f64 {
        self.final_pre + self.final_post
    }
}

/// State carried between continual steps.
#[derive(Debug)]
pub struct MergeState {
    step: usize,
    merged: Option<TaskVector>,
    mask_pre: MaskVector,
    mask_post: MaskVector,
    opt_pre: Optimizer,
    opt_post: Optimizer,
    heads: BTreeMap<TaskId, ParamVector>,
    ot_loss_history: Vec<LossRecord>,
    alignment: Vec<AlignmentSummary>,
}

impl MergeState {
    pub fn new(spec: &ModelSpec, optimizer: &OptimizerConfig) -> Self {
        let sig = spec.backbone_signature();
        let ones = MaskVector::ones(&sig);
        let opt = Optimizer::new(optimizer, ones.as_params());
        Self {
            step: 0,
            merged: None,
            mask_pre: ones.clone(),
            mask_post: ones,
            opt_pre: opt.clone(),
            opt_post: opt,
            heads: BTreeMap::new(),
            ot_loss_history: Vec::new(),
            alignment: Vec::new(),
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn merged(&self) -> Option<&TaskVector> {
        self.merged.as_ref()
    }

    pub fn mask_pre(&self) -> &MaskVector {
        &self.mask_pre
    }

    pub fn mask_post(&self) -> &MaskVector {
        &self.mask_post
    }

    pub fn heads(&self) -> &BTreeMap<TaskId, ParamVector> {
        &self.heads
    }

    pub fn ot_loss_history(&self) -> &[LossRecord] {
        &self.ot_loss_history
    }

    pub fn alignment(&self) -> &[AlignmentSummary] {
        &self.alignment
    }

    /// Masks back to one, optimizer moments cleared.
    pub fn reset_masks(&mut self, optimizer: &OptimizerConfig) {
        let sig = self.mask_pre.signature();
        self.mask_pre = MaskVector::ones(&sig);
        self.mask_post = MaskVector::ones(&sig);
        self.opt_pre = Optimizer::new(optimizer, self.mask_pre.as_params());
        self.opt_post = Optimizer::new(optimizer, self.mask_post.as_params());
    }
}

/// Inputs of one step besides the state: the incoming vector and both targets.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub spec: &'a ModelSpec,
    pub theta0: &'a ParamVector,
    pub delta_post: &'a ParamVector,
    pub pre_target: &'a AlignmentTarget,
    pub post_target: &'a AlignmentTarget,
}

/// One optimizer step on the mask selected by `epoch`'s parity.
///
/// The loss is evaluated before the update and appended to the history.
pub fn ot_mask_epoch(
    state: &mut MergeState,
    ctx: &StepContext<'_>,
    epoch: usize,
    cfg: &FusionConfig,
) -> Result<LossRecord> {
    let delta_pre = state
        .merged
        .as_ref()
        .ok_or_else(|| Error::Data("no merged task vector to align against yet".into()))?;
    let problem = FusionProblem {
        spec: ctx.spec,
        theta0: ctx.theta0,
        delta_pre,
        delta_post: ctx.delta_post,
        alpha: cfg.alpha,
        sinkhorn: &cfg.sinkhorn,
    };
    let side = Side::for_epoch(epoch);
    let target = match side {
        Side::Pre => ctx.pre_target,
        Side::Post => ctx.post_target,
    };
    let (loss, grad) = problem.loss_and_mask_grad(&state.mask_pre, &state.mask_post, target, side)?;
    match side {
        Side::Pre => {
            let next = state.opt_pre.step(state.mask_pre.as_params(), &grad, cfg.mask_lr)?;
            state.mask_pre = MaskVector::from_params(next);
        }
        Side::Post => {
            let next = state.opt_post.step(state.mask_post.as_params(), &grad, cfg.mask_lr)?;
            state.mask_post = MaskVector::from_params(next);
        }
    }
    let record = LossRecord {
        step: state.step + 1,
        epoch,
        side,
        transport_cost: loss.transport_cost,
        regularized_cost: loss.regularized_cost,
    };
    state.ot_loss_history.push(record);
    Ok(record)
}

/// Full-batch training of a head over a frozen backbone; mean cross-entropy.
pub fn head_finetune(
    spec: &ModelSpec,
    backbone: &ParamVector,
    head: &ParamVector,
    labeled: &Batch,
    epochs: usize,
    lr: f64,
    optimizer: &OptimizerConfig,
) -> Result<ParamVector> {
    if labeled.is_empty() {
        return Err(Error::Data("head fine-tuning needs a non-empty labeled subset".into()));
    }
    labeled.check_classes(spec.num_classes)?;
    spec.head_signature().check_matches(&head.signature())?;
    if epochs == 0 || lr == 0.0 {
        return Ok(head.clone());
    }
    let features = last(backbone_forward(spec, backbone, &labeled.inputs)?);
    let mut head = head.clone();
    let mut opt = Optimizer::new(optimizer, &head);
    for _ in 0..epochs {
        let logits = head_logits(spec, &head, &features)?;
        let (_, dlogits) = cross_entropy_and_grad(&logits, &labeled.labels);
        let (grad, _) = head_backward(spec, &head, &features, &dlogits)?;
        head = opt.step(&head, &grad, lr)?;
    }
    Ok(head)
}

/// One task entering the stream.
#[derive(Debug)]
pub struct TaskArrival {
    pub task: TaskId,
    pub task_vector: TaskVector,
    /// The task's fine-tuned head.
    pub head: ParamVector,
    pub unlabeled: Matrix,
    /// Full labeled training split; mergers subsample it as configured.
    pub labeled: Batch,
}

/// A merging strategy consuming tasks one at a time.
pub trait ContinualMerger {
    fn name(&self) -> &'static str;

    fn absorb(&mut self, arrival: TaskArrival) -> Result<()>;

    /// Merged task vector after the last absorbed task.
    fn merged(&self) -> Option<&TaskVector>;

    /// Head used to evaluate each task with the merged backbone.
    fn heads(&self) -> &BTreeMap<TaskId, ParamVector>;

    fn steps(&self) -> usize;
}

/// The learnable-mask merger.
#[derive(Debug)]
pub struct OtmfMerger {
    spec: ModelSpec,
    theta0: ParamVector,
    cfg: FusionConfig,
    seed: u64,
    state: MergeState,
    seen_unlabeled: Vec<Matrix>,
    pending_head: Option<(TaskId, Batch)>,
}

impl OtmfMerger {
    pub fn new(spec: ModelSpec, theta0: ParamVector, cfg: FusionConfig, seed: u64) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        spec.backbone_signature().check_matches(&theta0.signature())?;
        let state = MergeState::new(&spec, &cfg.optimizer);
        Ok(Self {
            spec,
            theta0,
            cfg,
            seed,
            state,
            seen_unlabeled: Vec::new(),
            pending_head: None,
        })
    }

    pub fn state(&self) -> &MergeState {
        &self.state
    }

    pub fn into_state(self) -> MergeState {
        self.state
    }

    fn step_rng(&self, salt: u64) -> ChaCha8Rng {
        let mix = (self.state.step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt;
        ChaCha8Rng::seed_from_u64(self.seed ^ mix)
    }

    fn pre_inputs(&self) -> Result<Matrix> {
        let pool = match self.cfg.pre_batch {
            PreBatchPolicy::Mixture => {
                let parts: Vec<&Matrix> = self.seen_unlabeled.iter().collect();
                Matrix::vstack(&parts)?
            }
            PreBatchPolicy::Recent => self
                .seen_unlabeled
                .last()
                .cloned()
                .ok_or_else(|| Error::Data("no earlier task inputs".into()))?,
        };
        Ok(draw_rows(&pool, self.cfg.batch_size, &mut self.step_rng(1)))
    }

    /// Transport costs of both sides at the current masks.
    fn both_sides(
        &self,
        incoming: &ParamVector,
        pre_target: &AlignmentTarget,
        post_target: &AlignmentTarget,
    ) -> Result<(f64, f64)> {
        let problem = FusionProblem {
            spec: &self.spec,
            theta0: &self.theta0,
            delta_pre: self.state.merged.as_ref().expect("step > 0"),
            delta_post: incoming,
            alpha: self.cfg.alpha,
            sinkhorn: &self.cfg.sinkhorn,
        };
        let (m_pre, m_post) = (&self.state.mask_pre, &self.state.mask_post);
        Ok((
            problem.loss(m_pre, m_post, pre_target)?.transport_cost,
            problem.loss(m_pre, m_post, post_target)?.transport_cost,
        ))
    }

    /// Runs the step's mask training and returns the fused task vector.
    fn train_masks(&mut self, incoming: &TaskVector, post_inputs: &Matrix) -> Result<ParamVector> {
        let pre_inputs = self.pre_inputs()?;
        let post_inputs = draw_rows(post_inputs, self.cfg.batch_size, &mut self.step_rng(2));
        self.state.reset_masks(&self.cfg.optimizer);
        let delta_pre = self.state.merged.as_ref().expect("step > 0");
        let pre_target = AlignmentTarget::new(&self.spec, &reconstruct(&self.theta0, delta_pre)?, pre_inputs)?;
        let post_target = AlignmentTarget::new(&self.spec, &reconstruct(&self.theta0, incoming)?, post_inputs)?;
        let (initial_pre, initial_post) = self.both_sides(incoming, &pre_target, &post_target)?;

        let ctx = StepContext {
            spec: &self.spec,
            theta0: &self.theta0,
            delta_post: incoming,
            pre_target: &pre_target,
            post_target: &post_target,
        };
        for epoch in 1..=self.cfg.ot_epochs {
            let record = ot_mask_epoch(&mut self.state, &ctx, epoch, &self.cfg)?;
            log::debug!(
                "step {} epoch {epoch} {:?}: cost {:.6}",
                record.step,
                record.side,
                record.transport_cost
            );
        }

        let (final_pre, final_post) = if self.cfg.ot_epochs == 0 {
            (initial_pre, initial_post)
        } else {
            self.both_sides(incoming, &pre_target, &post_target)?
        };
        let summary = AlignmentSummary {
            step: self.state.step + 1,
            initial_pre,
            initial_post,
            final_pre,
            final_post,
        };
        log::info!(
            "step {}: alignment {:.5} -> {:.5}",
            summary.step,
            summary.initial_total(),
            summary.final_total()
        );
        self.state.alignment.push(summary);
        masked_fuse(
            self.state.merged.as_ref().expect("step > 0"),
            incoming,
            &self.state.mask_pre,
            &self.state.mask_post,
            self.cfg.alpha,
        )
    }
}

/// Up to `n` distinct rows drawn without replacement, in draw order.
fn draw_rows(pool: &Matrix, n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    if pool.rows() <= n {
        return pool.clone();
    }
    let picked = rand::seq::index::sample(rng, pool.rows(), n).into_vec();
    pool.select_rows(&picked)
}

impl ContinualMerger for OtmfMerger {
    fn name(&self) -> &'static str {
        "otmf"
    }

    fn absorb(&mut self, arrival: TaskArrival) -> Result<()> {
        let TaskArrival {
            task,
            task_vector,
            head,
            unlabeled,
            labeled,
        } = arrival;
        self.spec
            .backbone_signature()
            .check_matches(&task_vector.signature())?;
        if self.state.heads.contains_key(&task) {
            return Err(Error::Data(format!("{task} was already merged")));
        }
        if self.state.merged.is_none() {
            self.state.merged = Some(task_vector);
        } else {
            let fused = self.train_masks(&task_vector, &unlabeled)?;
            // Three task vectors live for this one statement.
            self.state.merged = Some(TaskVector::new(fused));
            drop(task_vector);
            if let Some((prev, batch)) = self.pending_head.take() {
                let backbone = reconstruct(&self.theta0, self.state.merged.as_ref().expect("set above"))?;
                let tuned = head_finetune(
                    &self.spec,
                    &backbone,
                    &self.state.heads[&prev],
                    &batch,
                    self.cfg.head_epochs,
                    self.cfg.head_lr,
                    &self.cfg.head_optimizer,
                )?;
                self.state.heads.insert(prev, tuned);
            }
        }
        let subset = subsample_labeled(&labeled, self.cfg.head_fraction, self.seed ^ u64::from(task.0))?;
        self.pending_head = Some((task, subset));
        self.state.heads.insert(task, head);
        self.seen_unlabeled.push(unlabeled);
        self.state.step += 1;
        Ok(())
    }

    fn merged(&self) -> Option<&TaskVector> {
        self.state.merged.as_ref()
    }

    fn heads(&self) -> &BTreeMap<TaskId, ParamVector> {
        &self.state.heads
    }

    fn steps(&self) -> usize {
        self.state.step
    }
}

/// Feeds `arrivals` to `merger` in order, calling `after_step` once per task.
///
/// Arrivals are pulled lazily, so at most one incoming task vector exists at
/// a time.
pub fn run_stream<M, I, F>(merger: &mut M, arrivals: I, mut after_step: F) -> Result<()>
where
    M: ContinualMerger,
    I: IntoIterator<Item = Result<TaskArrival>>,
    F: FnMut(&M) -> Result<()>,
{
    for arrival in arrivals {
        merger.absorb(arrival?)?;
        after_step(merger)?;
    }
    if merger.steps() < 2 {
        return Err(Error::Data(format!(
            "continual merging needs at least 2 tasks, got {}",
            merger.steps()
        )));
    }
    Ok(())
}

/// Merges a task stream with learnable masks; returns `theta0 + delta_final`
/// and the final state.
pub fn continual_merge<I>(
    spec: &ModelSpec,
    theta0: &ParamVector,
    arrivals: I,
    cfg: &FusionConfig,
    seed: u64,
) -> Result<(ParamVector, MergeState)>
where
    I: IntoIterator<Item = Result<TaskArrival>>,
{
    let mut merger = OtmfMerger::new(spec.clone(), theta0.clone(), cfg.clone(), seed)?;
    run_stream(&mut merger, arrivals, |_| Ok(()))?;
    let merged = reconstruct(theta0, merger.merged().expect("at least two steps"))?;
    Ok((merged, merger.into_state()))
}
