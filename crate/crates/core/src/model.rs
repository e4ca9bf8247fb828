//! Small feed-forward classifiers with hand-written reverse mode.
//!
//! A [`ToyModel`] is a backbone of affine layers, each followed by the
//! activation, plus one affine classification head per task. The backbone
//! output (last hidden layer, post-activation) is the feature vector used by
//! the transport losses. Weights are stored `out x in`, row-major.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::param::{ParamVector, ShapeSignature};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_at_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Architecture: `layer_dims = [input, hidden.., feature]`, plus a
/// `feature -> num_classes` head per task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub num_classes: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            layer_dims: vec![8, 12, 4],
            activation: Activation::Tanh,
            num_classes: 4,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Config(format!(
                "layer_dims needs at least input and feature dims, got {:?}",
                self.layer_dims
            )));
        }
        if self.layer_dims.contains(&0) || self.num_classes == 0 {
            return Err(Error::Config(format!(
                "all dims must be >= 1 (layer_dims {:?}, num_classes {})",
                self.layer_dims, self.num_classes
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn backbone_signature(&self) -> ShapeSignature {
        let mut layers = Vec::with_capacity(2 * self.num_layers());
        for (l, pair) in self.layer_dims.windows(2).enumerate() {
            layers.push((weight_name(l), pair[0] * pair[1]));
            layers.push((bias_name(l), pair[1]));
        }
        ShapeSignature::new(layers)
    }

    pub fn head_signature(&self) -> ShapeSignature {
        ShapeSignature::new(vec![
            (HEAD_WEIGHT.to_string(), self.feature_dim() * self.num_classes),
            (HEAD_BIAS.to_string(), self.num_classes),
        ])
    }
}

fn weight_name(l: usize) -> String {
    format!("layer{l}.weight")
}

fn bias_name(l: usize) -> String {
    format!("layer{l}.bias")
}

/// Task identifier. Task 0 is reserved for the pretraining head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId(pub u32);

impl TaskId {
    pub const PRETRAIN: TaskId = TaskId(0);
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task{}", self.0)
    }
}

/// Labeled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::Data("batch must contain at least one sample".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&y| y >= num_classes) {
            Some(y) => Err(Error::Data(format!(
                "label {y} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }
}

/// Loss whose gradient [`ToyModel::backward`] computes.
#[derive(Debug, Clone, Copy)]
pub enum Loss<'a> {
    /// Mean cross-entropy of the task head's logits.
    CrossEntropy { task: TaskId, labels: &'a [usize] },
    /// Upstream gradient with respect to the feature cloud.
    FeatureGradient(&'a Matrix),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    Backbone,
    Head,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub backbone: Option<ParamVector>,
    pub head: Option<ParamVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    spec: ModelSpec,
    backbone: ParamVector,
    heads: BTreeMap<TaskId, ParamVector>,
}

impl ToyModel {
    pub fn new(
        spec: ModelSpec,
        backbone: ParamVector,
        heads: BTreeMap<TaskId, ParamVector>,
    ) -> Result<Self> {
        spec.validate()?;
        spec.backbone_signature().check_matches(&backbone.signature())?;
        let head_sig = spec.head_signature();
        for head in heads.values() {
            head_sig.check_matches(&head.signature())?;
        }
        Ok(Self {
            spec,
            backbone,
            heads,
        })
    }

    /// Randomly initialized backbone (Glorot uniform weights, zero biases), no heads.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (l, pair) in spec.layer_dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            layers.push((weight_name(l), glorot(&mut rng, fan_in, fan_out)));
            layers.push((bias_name(l), vec![0.0; fan_out]));
        }
        let backbone = ParamVector::new(layers)?;
        Ok(Self {
            spec,
            backbone,
            heads: BTreeMap::new(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn backbone(&self) -> &ParamVector {
        &self.backbone
    }

    pub fn heads(&self) -> &BTreeMap<TaskId, ParamVector> {
        &self.heads
    }

    pub fn head(&self, task: TaskId) -> Result<&ParamVector> {
        self.heads
            .get(&task)
            .ok_or_else(|| Error::Data(format!("model has no head for {task}")))
    }

    pub fn with_backbone(&self, backbone: ParamVector) -> Result<Self> {
        self.spec
            .backbone_signature()
            .check_matches(&backbone.signature())?;
        Ok(Self {
            spec: self.spec.clone(),
            backbone,
            heads: self.heads.clone(),
        })
    }

    pub fn with_head(mut self, task: TaskId, head: ParamVector) -> Result<Self> {
        self.spec.head_signature().check_matches(&head.signature())?;
        self.heads.insert(task, head);
        Ok(self)
    }

    pub fn with_heads(mut self, heads: BTreeMap<TaskId, ParamVector>) -> Result<Self> {
        let sig = self.spec.head_signature();
        for head in heads.values() {
            sig.check_matches(&head.signature())?;
        }
        self.heads = heads;
        Ok(self)
    }

    pub fn forward_features(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut trace = backbone_forward(&self.spec, &self.backbone, inputs)?;
        Ok(trace.pop().expect("trace holds at least the input"))
    }

    pub fn forward_logits(&self, task: TaskId, inputs: &Matrix) -> Result<Matrix> {
        let head = self.head(task)?;
        let features = self.forward_features(inputs)?;
        head_logits(&self.spec, head, &features)
    }

    /// Class predictions; ties go to the lowest class index.
    pub fn predict(&self, task: TaskId, inputs: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward_logits(task, inputs)?))
    }

    pub fn cross_entropy(&self, task: TaskId, batch: &Batch) -> Result<f64> {
        batch.check_classes(self.spec.num_classes)?;
        let logits = self.forward_logits(task, &batch.inputs)?;
        Ok(cross_entropy_and_grad(&logits, &batch.labels).0)
    }

    /// Exact reverse-mode gradients of `loss` at the current parameters.
    pub fn backward(&self, inputs: &Matrix, loss: Loss<'_>, wrt: Wrt) -> Result<Gradients> {
        let trace = backbone_forward(&self.spec, &self.backbone, inputs)?;
        let features = trace.last().expect("trace holds at least the input");
        match loss {
            Loss::FeatureGradient(upstream) => {
                if wrt != Wrt::Backbone {
                    return Err(Error::Config(
                        "a feature-space loss has no head gradient; use Wrt::Backbone".into(),
                    ));
                }
                let backbone = backbone_backward(&self.spec, &self.backbone, &trace, upstream)?;
                Ok(Gradients {
                    backbone: Some(backbone),
                    head: None,
                })
            }
            Loss::CrossEntropy { task, labels } => {
                let head = self.head(task)?;
                if labels.len() != inputs.rows() {
                    return Err(Error::Data(format!(
                        "{} inputs but {} labels",
                        inputs.rows(),
                        labels.len()
                    )));
                }
                if let Some(y) = labels.iter().find(|&&y| y >= self.spec.num_classes) {
                    return Err(Error::Data(format!("label {y} out of range")));
                }
                let logits = head_logits(&self.spec, head, features)?;
                let (_, dlogits) = cross_entropy_and_grad(&logits, labels);
                let (head_grad, dfeatures) = head_backward(&self.spec, head, features, &dlogits)?;
                let backbone = match wrt {
                    Wrt::Head => None,
                    _ => Some(backbone_backward(&self.spec, &self.backbone, &trace, &dfeatures)?),
                };
                let head = (wrt != Wrt::Backbone).then_some(head_grad);
                Ok(Gradients { backbone, head })
            }
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect()
}

/// Freshly initialized head for `spec`, drawn from `seed`.
pub fn init_head(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ParamVector::new([
        (HEAD_WEIGHT, glorot(&mut rng, spec.feature_dim(), spec.num_classes)),
        (HEAD_BIAS, vec![0.0; spec.num_classes]),
    ])
}

fn layer<'a>(params: &'a ParamVector, name: &str) -> Result<&'a [f64]> {
    params
        .layer(name)
        .ok_or_else(|| Error::shape(name, "layer missing from parameters"))
}

/// Affine map `out_i = b + W a_i` over the rows of `a`.
fn affine(a: &Matrix, weight: &[f64], bias: &[f64], out_dim: usize) -> Matrix {
    let in_dim = a.cols();
    let mut out = Matrix::zeros(a.rows(), out_dim);
    for i in 0..a.rows() {
        let ai = a.row(i);
        let oi = out.row_mut(i);
        for (o, slot) in oi.iter_mut().enumerate() {
            let w = &weight[o * in_dim..(o + 1) * in_dim];
            *slot = bias[o] + w.iter().zip(ai).map(|(w, x)| w * x).sum::<f64>();
        }
    }
    out
}

/// Backbone activations `[input, a_1, .., a_L]`; the last entry is the
/// feature cloud.
pub fn backbone_forward(spec: &ModelSpec, backbone: &ParamVector, inputs: &Matrix) -> Result<Vec<Matrix>> {
    if inputs.cols() != spec.input_dim() {
        return Err(Error::shape(
            "inputs",
            format!("expected {} input dims, got {}", spec.input_dim(), inputs.cols()),
        ));
    }
    let mut trace = Vec::with_capacity(spec.layer_dims.len());
    trace.push(inputs.clone());
    for l in 0..spec.num_layers() {
        let w = layer(backbone, &weight_name(l))?;
        let b = layer(backbone, &bias_name(l))?;
        let mut next = affine(trace.last().expect("non-empty"), w, b, spec.layer_dims[l + 1]);
        for v in next.as_mut_slice() {
            *v = spec.activation.apply(*v);
        }
        trace.push(next);
    }
    let features = trace.last().expect("non-empty");
    if !features.is_finite() {
        return Err(Error::Numerical("forward pass produced non-finite features".into()));
    }
    Ok(trace)
}

/// Gradient of a loss with respect to the backbone, given `d loss / d features`.
pub fn backbone_backward(
    spec: &ModelSpec,
    backbone: &ParamVector,
    trace: &[Matrix],
    upstream: &Matrix,
) -> Result<ParamVector> {
    let features = trace.last().expect("trace holds at least the input");
    if upstream.rows() != features.rows() || upstream.cols() != features.cols() {
        return Err(Error::shape(
            "feature gradient",
            format!(
                "{}x{} upstream for {}x{} features",
                upstream.rows(),
                upstream.cols(),
                features.rows(),
                features.cols()
            ),
        ));
    }
    let n = upstream.rows();
    // delta = dL/dz at the current layer.
    let mut delta = upstream.clone();
    for (d, a) in delta.as_mut_slice().iter_mut().zip(features.as_slice()) {
        *d *= spec.activation.derivative_at_output(*a);
    }
    let mut grads: Vec<(String, Vec<f64>)> = Vec::with_capacity(2 * spec.num_layers());
    for l in (0..spec.num_layers()).rev() {
        let (in_dim, out_dim) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
        let a_prev = &trace[l];
        let mut gw = vec![0.0; in_dim * out_dim];
        let mut gb = vec![0.0; out_dim];
        for i in 0..n {
            let di = delta.row(i);
            let ai = a_prev.row(i);
            for o in 0..out_dim {
                let d = di[o];
                gb[o] += d;
                if d != 0.0 {
                    for (g, x) in gw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(ai) {
                        *g += d * x;
                    }
                }
            }
        }
        if l > 0 {
            let w = layer(backbone, &weight_name(l))?;
            let mut prev = Matrix::zeros(n, in_dim);
            for i in 0..n {
                let di = delta.row(i);
                let pi = prev.row_mut(i);
                for o in 0..out_dim {
                    let d = di[o];
                    if d != 0.0 {
                        for (p, wv) in pi.iter_mut().zip(&w[o * in_dim..(o + 1) * in_dim]) {
                            *p += d * wv;
                        }
                    }
                }
            }
            for (p, a) in prev.as_mut_slice().iter_mut().zip(a_prev.as_slice()) {
                *p *= spec.activation.derivative_at_output(*a);
            }
            delta = prev;
        }
        grads.push((bias_name(l), gb));
        grads.push((weight_name(l), gw));
    }
    grads.reverse();
    ParamVector::new(grads)
}

pub fn head_logits(spec: &ModelSpec, head: &ParamVector, features: &Matrix) -> Result<Matrix> {
    if features.cols() != spec.feature_dim() {
        return Err(Error::shape(
            "features",
            format!("expected {} dims, got {}", spec.feature_dim(), features.cols()),
        ));
    }
    Ok(affine(
        features,
        layer(head, HEAD_WEIGHT)?,
        layer(head, HEAD_BIAS)?,
        spec.num_classes,
    ))
}

/// Head parameter gradient and feature gradient for `dL/dlogits`.
pub fn head_backward(
    spec: &ModelSpec,
    head: &ParamVector,
    features: &Matrix,
    dlogits: &Matrix,
) -> Result<(ParamVector, Matrix)> {
    let (k, c) = (spec.feature_dim(), spec.num_classes);
    let w = layer(head, HEAD_WEIGHT)?;
    let mut gw = vec![0.0; k * c];
    let mut gb = vec![0.0; c];
    let mut dfeat = Matrix::zeros(features.rows(), k);
    for i in 0..features.rows() {
        let fi = features.row(i);
        let di = dlogits.row(i);
        for o in 0..c {
            let d = di[o];
            gb[o] += d;
            for (g, x) in gw[o * k..(o + 1) * k].iter_mut().zip(fi) {
                *g += d * x;
            }
        }
        let df = dfeat.row_mut(i);
        for o in 0..c {
            let d = di[o];
            for (slot, wv) in df.iter_mut().zip(&w[o * k..(o + 1) * k]) {
                *slot += d * wv;
            }
        }
    }
    let grad = ParamVector::new([(HEAD_WEIGHT, gw), (HEAD_BIAS, gb)])?;
    Ok((grad, dfeat))
}

/// Mean softmax cross-entropy and its gradient in the logits.
pub fn cross_entropy_and_grad(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows();
    let scale = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_norm = max + sum.ln();
        total += log_norm - row[labels[i]];
        let g = grad.row_mut(i);
        for (j, z) in row.iter().enumerate() {
            g[j] = (z - log_norm).exp() * scale;
        }
        g[labels[i]] -= scale;
    }
    (total * scale, grad)
}

pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.row_iter()
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Plain gradient-descent settings for supervised fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 0.5 }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Fine-tunes backbone and a freshly initialized head for `task`.
///
/// One full-batch gradient step per batch per epoch, batches in order. The
/// head initialization is drawn from `seed`, so the result is a pure function
/// of its arguments.
pub fn train_sft(
    init: &ToyModel,
    task: TaskId,
    batches: &[Batch],
    cfg: &SftConfig,
    seed: u64,
) -> Result<ToyModel> {
    cfg.validate()?;
    if batches.is_empty() {
        return Err(Error::Data("train_sft needs at least one batch".into()));
    }
    for b in batches {
        b.check_classes(init.spec.num_classes)?;
    }
    let head = init_head(&init.spec, seed)?;
    let mut model = init.clone().with_head(task, head)?;
    for _ in 0..cfg.epochs {
        for batch in batches {
            let grads = model.backward(
                &batch.inputs,
                Loss::CrossEntropy {
                    task,
                    labels: &batch.labels,
                },
                Wrt::All,
            )?;
            let backbone = model
                .backbone
                .add_scaled(-cfg.lr, grads.backbone.as_ref().expect("requested"))?;
            let head = model
                .head(task)?
                .add_scaled(-cfg.lr, grads.head.as_ref().expect("requested"))?;
            model.backbone = backbone;
            model.heads.insert(task, head);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Straight-line interpreter: walks the layer list with explicit loops,
    /// reading parameters by name.
    fn reference_features(model: &ToyModel, x: &[f64]) -> Vec<f64> {
        let spec = model.spec();
        let mut a = x.to_vec();
        for l in 0..spec.num_layers() {
            let w = model.backbone().layer(&format!("layer{l}.weight")).unwrap();
            let b = model.backbone().layer(&format!("layer{l}.bias")).unwrap();
            let out = spec.layer_dims[l + 1];
            let mut next = vec![0.0; out];
            for o in 0..out {
                let mut z = b[o];
                for k in 0..a.len() {
                    z += w[o * a.len() + k] * a[k];
                }
                next[o] = match spec.activation {
                    Activation::Tanh => z.tanh(),
                    Activation::Relu => if z > 0.0 { z } else { 0.0 },
                };
            }
            a = next;
        }
        a
    }

    fn reference_logits(model: &ToyModel, task: TaskId, x: &[f64]) -> Vec<f64> {
        let f = reference_features(model, x);
        let head = model.head(task).unwrap();
        let w = head.layer(HEAD_WEIGHT).unwrap();
        let b = head.layer(HEAD_BIAS).unwrap();
        (0..model.spec().num_classes)
            .map(|o| b[o] + (0..f.len()).map(|k| w[o * f.len() + k] * f[k]).sum::<f64>())
            .collect()
    }

    fn random_model(seed: u64, dims: Vec<usize>, activation: Activation, classes: usize) -> ToyModel {
        let spec = ModelSpec { layer_dims: dims, activation, num_classes: classes };
        let mut model = ToyModel::init(spec.clone(), seed).unwrap();
        // Nonzero biases so every parameter matters.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let backbone = ParamVector::new(model.backbone().layers().map(|(name, vals)| {
            let noisy: Vec<f64> = vals
                .iter()
                .map(|v| v + 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            (name.to_string(), noisy)
        }))
        .unwrap();
        model = model.with_backbone(backbone).unwrap();
        let head = init_head(&spec, seed + 1).unwrap().map(|v| v + 0.1).unwrap();
        model.with_head(TaskId(1), head).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let spec = ModelSpec { layer_dims: vec![3, 4, 2], activation: Activation::Tanh, num_classes: 2 };
        let model = ToyModel::new(spec.clone(), ParamVector::zeros(&spec.backbone_signature()), BTreeMap::new()).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.3, 0.3, 0.3]]).unwrap();
        let f = model.forward_features(&x).unwrap();
        assert!(f.as_slice().iter().all(|v| *v == 0.0));
        let model = model.with_head(TaskId(1), ParamVector::zeros(&spec.head_signature())).unwrap();
        assert!(model.forward_logits(TaskId(1), &x).unwrap().as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_layer_with_relu_is_exact_on_positive_inputs() {
        let spec = ModelSpec { layer_dims: vec![3, 3], activation: Activation::Relu, num_classes: 1 };
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let backbone = ParamVector::new([("layer0.weight", w), ("layer0.bias", vec![0.0; 3])]).unwrap();
        let model = ToyModel::new(spec.clone(), backbone, BTreeMap::new()).unwrap();
        let x = Matrix::from_rows(&[[0.5, 1.0, 2.0], [3.0, 0.1, 0.2]]).unwrap();
        assert_eq!(model.forward_features(&x).unwrap(), x);

        let tanh = ToyModel::new(
            ModelSpec { activation: Activation::Tanh, ..spec },
            model.backbone().clone(),
            BTreeMap::new(),
        )
        .unwrap();
        let small = x.scaled(1e-3);
        let f = tanh.forward_features(&small).unwrap();
        // tanh(z) = z - z^3/3 + ...
        assert!(f.max_abs_diff(&small).unwrap() < 1e-8);
    }

    #[test]
    fn single_class_head_predicts_constant() {
        let model = random_model(5, vec![4, 3], Activation::Tanh, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(&mut rng, 7, 4);
        assert!(model.predict(TaskId(1), &x).unwrap().iter().all(|&c| c == 0));
    }

    #[test]
    fn forward_matches_reference_interpreter() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (seed, act) in [(1, Activation::Tanh), (2, Activation::Relu)] {
            let model = random_model(seed, vec![5, 7, 6, 4], act, 3);
            let x = random_matrix(&mut rng, 9, 5);
            let f = model.forward_features(&x).unwrap();
            let logits = model.forward_logits(TaskId(1), &x).unwrap();
            for i in 0..9 {
                let rf = reference_features(&model, x.row(i));
                let rl = reference_logits(&model, TaskId(1), x.row(i));
                for (a, b) in f.row(i).iter().zip(&rf) {
                    assert!((a - b).abs() < 1e-14);
                }
                for (a, b) in logits.row(i).iter().zip(&rl) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn features_ignore_heads() {
        let model = random_model(3, vec![4, 5, 3], Activation::Tanh, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 4, 4);
        let other = model
            .clone()
            .with_head(TaskId(1), init_head(model.spec(), 1234).unwrap())
            .unwrap();
        assert_eq!(model.forward_features(&x).unwrap(), other.forward_features(&x).unwrap());
    }

    #[test]
    fn errors_on_bad_inputs() {
        let model = random_model(3, vec![4, 5, 3], Activation::Tanh, 2);
        assert!(matches!(
            model.forward_features(&Matrix::zeros(2, 3)),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            model.forward_logits(TaskId(7), &Matrix::zeros(2, 4)),
            Err(Error::Data(_))
        ));
        assert!(ModelSpec { layer_dims: vec![4], ..ModelSpec::default() }.validate().is_err());
        assert!(ModelSpec { layer_dims: vec![4, 0], ..ModelSpec::default() }.validate().is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let model = random_model(4, vec![3, 4, 2], Activation::Tanh, 2);
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3]]).unwrap();
        let g = model
            .backward(&x, Loss::FeatureGradient(&Matrix::zeros(1, 2)), Wrt::Backbone)
            .unwrap();
        assert!(g.backbone.unwrap().values().all(|v| v == 0.0));
    }

    #[test]
    fn squared_loss_hand_derivative() {
        // f = relu(w x + b), L = (f - y)^2 with w = 1, b = 0, x = 2, y = 0.
        let spec = ModelSpec { layer_dims: vec![1, 1], activation: Activation::Relu, num_classes: 1 };
        let backbone = ParamVector::new([("layer0.weight", vec![1.0]), ("layer0.bias", vec![0.0])]).unwrap();
        let model = ToyModel::new(spec, backbone, BTreeMap::new()).unwrap();
        let x = Matrix::from_rows(&[[2.0]]).unwrap();
        let f = model.forward_features(&x).unwrap();
        let upstream = Matrix::from_rows(&[[2.0 * (f.get(0, 0) - 0.0)]]).unwrap();
        let g = model.backward(&x, Loss::FeatureGradient(&upstream), Wrt::Backbone).unwrap();
        let g = g.backbone.unwrap();
        assert_eq!(g.layer("layer0.weight").unwrap(), &[8.0]);
        assert_eq!(g.layer("layer0.bias").unwrap(), &[4.0]);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = random_model(8, vec![3, 5, 4, 3], Activation::Tanh, 3);
        let x = random_matrix(&mut rng, 6, 3);
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let batch = Batch::new(x.clone(), labels.clone()).unwrap();
        let g = model
            .backward(&x, Loss::CrossEntropy { task: TaskId(1), labels: &labels }, Wrt::All)
            .unwrap();
        let h = 1e-5;
        let gb = g.backbone.unwrap();
        for (k, analytic) in gb.values().enumerate() {
            let base = model.backbone().values().nth(k).unwrap();
            let plus = model.with_backbone(model.backbone().with_flat_entry(k, base + h).unwrap()).unwrap();
            let minus = model.with_backbone(model.backbone().with_flat_entry(k, base - h).unwrap()).unwrap();
            let fd = (plus.cross_entropy(TaskId(1), &batch).unwrap()
                - minus.cross_entropy(TaskId(1), &batch).unwrap())
                / (2.0 * h);
            assert!(rel_err(analytic, fd) < 1e-4, "backbone {k}: {analytic} vs {fd}");
        }
        let head = model.head(TaskId(1)).unwrap().clone();
        for (k, analytic) in g.head.unwrap().values().enumerate() {
            let base = head.values().nth(k).unwrap();
            let plus = model.clone().with_head(TaskId(1), head.with_flat_entry(k, base + h).unwrap()).unwrap();
            let minus = model.clone().with_head(TaskId(1), head.with_flat_entry(k, base - h).unwrap()).unwrap();
            let fd = (plus.cross_entropy(TaskId(1), &batch).unwrap()
                - minus.cross_entropy(TaskId(1), &batch).unwrap())
                / (2.0 * h);
            assert!(rel_err(analytic, fd) < 1e-4, "head {k}: {analytic} vs {fd}");
        }
    }

    #[test]
    fn feature_loss_gradients_match_finite_differences() {
        // L = sum_i <c_i, f(x_i)> has upstream gradient c.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let model = random_model(9, vec![4, 6, 3], Activation::Tanh, 2);
        let x = random_matrix(&mut rng, 5, 4);
        let coeff = random_matrix(&mut rng, 5, 3);
        let loss = |m: &ToyModel| -> f64 {
            let f = m.forward_features(&x).unwrap();
            f.as_slice().iter().zip(coeff.as_slice()).map(|(a, b)| a * b).sum()
        };
        let g = model.backward(&x, Loss::FeatureGradient(&coeff), Wrt::Backbone).unwrap();
        let h = 1e-5;
        for (k, analytic) in g.backbone.unwrap().values().enumerate() {
            let base = model.backbone().values().nth(k).unwrap();
            let plus = model.with_backbone(model.backbone().with_flat_entry(k, base + h).unwrap()).unwrap();
            let minus = model.with_backbone(model.backbone().with_flat_entry(k, base - h).unwrap()).unwrap();
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!(rel_err(analytic, fd) < 1e-4, "param {k}: {analytic} vs {fd}");
        }
    }

    #[test]
    fn head_only_gradient_request() {
        let model = random_model(2, vec![3, 4], Activation::Tanh, 2);
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3]]).unwrap();
        let g = model
            .backward(&x, Loss::CrossEntropy { task: TaskId(1), labels: &[1] }, Wrt::Head)
            .unwrap();
        assert!(g.backbone.is_none() && g.head.is_some());
        assert!(model.backward(&x, Loss::FeatureGradient(&Matrix::zeros(1, 4)), Wrt::All).is_err());
    }

    fn blobs(seed: u64, n: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -1.5 } else { 1.5 };
            let gx: f64 = StandardNormal.sample(&mut rng);
            let gy: f64 = StandardNormal.sample(&mut rng);
            rows.push(vec![c + 0.4 * gx, c + 0.4 * gy]);
            labels.push(y);
        }
        Batch::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
    }

    fn accuracy(model: &ToyModel, task: TaskId, batch: &Batch) -> f64 {
        let p = model.predict(task, &batch.inputs).unwrap();
        p.iter().zip(&batch.labels).filter(|(a, b)| a == b).count() as f64 / batch.len() as f64
    }

    #[test]
    fn sft_learns_separable_blobs() {
        let spec = ModelSpec { layer_dims: vec![2, 6, 4], activation: Activation::Tanh, num_classes: 2 };
        let init = ToyModel::init(spec, 0).unwrap();
        let batch = blobs(1, 80);
        let cfg = SftConfig { epochs: 200, lr: 0.5 };
        let untrained = train_sft(&init, TaskId(1), std::slice::from_ref(&batch), &SftConfig { epochs: 0, ..cfg }, 7).unwrap();
        let trained = train_sft(&init, TaskId(1), std::slice::from_ref(&batch), &cfg, 7).unwrap();
        let before = accuracy(&untrained, TaskId(1), &batch);
        let after = accuracy(&trained, TaskId(1), &batch);
        assert!(after >= 0.95, "{after}");
        assert!(after > before || before == 1.0);
        // Zero epochs: init backbone plus fresh head.
        assert_eq!(untrained.backbone(), init.backbone());
        assert_eq!(untrained.head(TaskId(1)).unwrap(), &init_head(init.spec(), 7).unwrap());
        // Determinism.
        let again = train_sft(&init, TaskId(1), std::slice::from_ref(&batch), &cfg, 7).unwrap();
        assert_eq!(trained, again);
        assert!(train_sft(&init, TaskId(1), &[], &cfg, 7).is_err());
    }
}
