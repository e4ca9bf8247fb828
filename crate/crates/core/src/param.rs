//! Layer-keyed parameter algebra.
//!
//! [`ParamVector`] is the common currency for model weights, task vectors and
//! (through [`MaskVector`]) learnable masks. Layers keep their insertion order,
//! which is also the order used by checkpoints. Binary operations require
//! identical shape signatures and every result is checked for finiteness.

use std::cell::Cell;
use std::fmt;

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Ordered list of `(layer name, length)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ShapeSignature(Vec<(String, usize)>);

impl ShapeSignature {
    pub fn new(layers: Vec<(String, usize)>) -> Self {
        Self(layers)
    }

    pub fn layers(&self) -> &[(String, usize)] {
        &self.0
    }

    pub fn num_params(&self) -> usize {
        self.0.iter().map(|(_, n)| n).sum()
    }

    /// Returns the first layer at which `self` and `other` disagree.
    pub fn check_matches(&self, other: &ShapeSignature) -> Result<()> {
        for (i, (a, b)) in self.0.iter().zip(&other.0).enumerate() {
            if a.0 != b.0 {
                return Err(Error::shape(
                    &a.0,
                    format!("layer {i} is named `{}` on the other side", b.0),
                ));
            }
            if a.1 != b.1 {
                return Err(Error::shape(&a.0, format!("length {} vs {}", a.1, b.1)));
            }
        }
        match self.0.len().cmp(&other.0.len()) {
            std::cmp::Ordering::Equal => Ok(()),
            std::cmp::Ordering::Greater => {
                let extra = &self.0[other.0.len()].0;
                Err(Error::shape(extra, "missing on the other side"))
            }
            std::cmp::Ordering::Less => {
                let extra = &other.0[self.0.len()].0;
                Err(Error::shape(extra, "missing on this side"))
            }
        }
    }
}

impl fmt::Display for ShapeSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(n, l)| format!("{n}:{l}")).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

/// Dense real parameters keyed by layer name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    entries: IndexMap<String, Vec<f64>>,
}

impl ParamVector {
    /// Builds a vector from `(name, values)` pairs.
    ///
    /// Rejects duplicate names, zero-length layers and non-finite values.
    pub fn new<S: Into<String>>(layers: impl IntoIterator<Item = (S, Vec<f64>)>) -> Result<Self> {
        let mut entries = IndexMap::new();
        for (name, values) in layers {
            let name = name.into();
            if values.is_empty() {
                return Err(Error::shape(name, "zero-length layer"));
            }
            if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "layer `{name}` has non-finite value at index {pos}"
                )));
            }
            if entries.contains_key(&name) {
                return Err(Error::shape(name, "duplicate layer name"));
            }
            entries.insert(name, values);
        }
        Ok(Self { entries })
    }

    pub fn zeros(signature: &ShapeSignature) -> Self {
        Self::filled(signature, 0.0)
    }

    pub(crate) fn filled(signature: &ShapeSignature, value: f64) -> Self {
        let entries = signature
            .layers()
            .iter()
            .map(|(name, len)| (name.clone(), vec![value; *len]))
            .collect();
        Self { entries }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.signature())
    }

    pub fn signature(&self) -> ShapeSignature {
        ShapeSignature(
            self.entries
                .iter()
                .map(|(n, v)| (n.clone(), v.len()))
                .collect(),
        )
    }

    pub fn layer(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v.as_slice()))
    }

    pub fn num_layers(&self) -> usize {
        self.entries.len()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    /// All values, layer by layer in declared order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.values().flat_map(|v| v.iter().copied())
    }

    /// Copy of `self` with a single flat entry replaced; used by finite
    /// difference checks.
    pub fn with_flat_entry(&self, index: usize, value: f64) -> Result<Self> {
        let mut out = self.clone();
        let mut offset = index;
        for values in out.entries.values_mut() {
            if offset < values.len() {
                values[offset] = value;
                return out.ensure_finite();
            }
            offset -= values.len();
        }
        Err(Error::shape(
            "flat index",
            format!("{index} out of range for {} parameters", self.num_params()),
        ))
    }

    pub fn add(&self, other: &ParamVector) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Elementwise product with a mask.
    pub fn hadamard(&self, mask: &MaskVector) -> Result<Self> {
        self.zip_with(&mask.0, |v, m| v * m)
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        if !s.is_finite() {
            return Err(Error::Numerical(format!("non-finite scale factor {s}")));
        }
        let entries = self
            .entries
            .iter()
            .map(|(n, v)| (n.clone(), v.iter().map(|x| s * x).collect()))
            .collect();
        Self { entries }.ensure_finite()
    }

    /// `self + s * other`, the update shape shared by every optimizer here.
    pub fn add_scaled(&self, s: f64, other: &ParamVector) -> Result<Self> {
        if !s.is_finite() {
            return Err(Error::Numerical(format!("non-finite scale factor {s}")));
        }
        self.zip_with(other, |a, b| a + s * b)
    }

    /// Applies `f` to matching entries of `self` and `other`.
    pub fn zip_with(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_shape(other)?;
        let entries = self
            .entries
            .iter()
            .zip(other.entries.values())
            .map(|((n, a), b)| (n.clone(), a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()))
            .collect();
        Self { entries }.ensure_finite()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|(n, v)| (n.clone(), v.iter().map(|&x| f(x)).collect()))
            .collect();
        Self { entries }.ensure_finite()
    }

    pub fn check_shape(&self, other: &ParamVector) -> Result<()> {
        if self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.len() == b.len())
        {
            return Ok(());
        }
        self.signature().check_matches(&other.signature())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_shape(other)?;
        Ok(self.values().zip(other.values()).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64> {
        self.check_shape(other)?;
        Ok(self
            .values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Splits into the layers whose names start with `prefix` and the rest.
    pub fn split_prefix(&self, prefix: &str) -> (Option<Self>, Option<Self>) {
        let (with, without): (IndexMap<_, _>, IndexMap<_, _>) = self
            .entries
            .iter()
            .map(|(n, v)| (n.clone(), v.clone()))
            .partition(|(n, _)| n.starts_with(prefix));
        let wrap = |e: IndexMap<String, Vec<f64>>| (!e.is_empty()).then_some(Self { entries: e });
        (wrap(with), wrap(without))
    }

    fn ensure_finite(self) -> Result<Self> {
        for (name, values) in &self.entries {
            if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "layer `{name}` became non-finite at index {pos}"
                )));
            }
        }
        Ok(self)
    }
}

/// Learnable elementwise multiplier over a task vector.
///
/// Values are unconstrained reals; a fresh mask is all ones.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVector(ParamVector);

impl MaskVector {
    pub fn ones(signature: &ShapeSignature) -> Self {
        Self(ParamVector::filled(signature, 1.0))
    }

    pub fn zeros(signature: &ShapeSignature) -> Self {
        Self(ParamVector::zeros(signature))
    }

    pub fn from_params(params: ParamVector) -> Self {
        Self(params)
    }

    pub fn as_params(&self) -> &ParamVector {
        &self.0
    }

    pub fn into_params(self) -> ParamVector {
        self.0
    }

    pub fn signature(&self) -> ShapeSignature {
        self.0.signature()
    }
}

thread_local! {
    static RESIDENT_TASK_VECTORS: Cell<usize> = const { Cell::new(0) };
    static PEAK_TASK_VECTORS: Cell<usize> = const { Cell::new(0) };
}

/// Counters for live [`TaskVector`] values on the current thread.
///
/// Merging runs single-threaded, so a thread-local count is exactly the number
/// of task vectors a merge holds at once.
pub mod residency {
    use super::{PEAK_TASK_VECTORS, RESIDENT_TASK_VECTORS};

    pub fn current() -> usize {
        RESIDENT_TASK_VECTORS.with(|c| c.get())
    }

    pub fn peak() -> usize {
        PEAK_TASK_VECTORS.with(|c| c.get())
    }

    /// Resets the high-water mark to the current count.
    pub fn reset_peak() {
        let now = current();
        PEAK_TASK_VECTORS.with(|c| c.set(now));
    }

    pub(super) fn acquire() {
        let now = RESIDENT_TASK_VECTORS.with(|c| {
            c.set(c.get() + 1);
            c.get()
        });
        PEAK_TASK_VECTORS.with(|p| p.set(p.get().max(now)));
    }

    pub(super) fn release() {
        RESIDENT_TASK_VECTORS.with(|c| c.set(c.get().saturating_sub(1)));
    }
}

/// Deviation of a model's backbone from the shared pretrained backbone.
///
/// Construction and drop are tracked by [`residency`].
#[derive(Debug, PartialEq)]
pub struct TaskVector(ParamVector);

impl TaskVector {
    pub fn new(delta: ParamVector) -> Self {
        residency::acquire();
        Self(delta)
    }

    /// `finetuned - pretrained`.
    pub fn between(finetuned: &ParamVector, pretrained: &ParamVector) -> Result<Self> {
        Ok(Self::new(finetuned.sub(pretrained)?))
    }

    pub fn params(&self) -> &ParamVector {
        &self.0
    }
}

impl Clone for TaskVector {
    fn clone(&self) -> Self {
        Self::new(self.0.clone())
    }
}

impl Drop for TaskVector {
    fn drop(&mut self) {
        residency::release();
    }
}

impl std::ops::Deref for TaskVector {
    type Target = ParamVector;

    fn deref(&self) -> &ParamVector {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(layers: &[(&str, &[f64])]) -> ParamVector {
        ParamVector::new(layers.iter().map(|(n, v)| (n.to_string(), v.to_vec()))).unwrap()
    }

    #[test]
    fn add_small_case() {
        let a = pv(&[("w", &[1.0, 2.0])]);
        let b = pv(&[("w", &[3.0, 4.0])]);
        assert_eq!(a.add(&b).unwrap(), pv(&[("w", &[4.0, 6.0])]));
        assert_eq!(a.add(&a.zeros_like()).unwrap(), a);
    }

    #[test]
    fn sub_small_cases() {
        let a = pv(&[("w", &[5.0])]);
        let b = pv(&[("w", &[2.0])]);
        assert_eq!(a.sub(&b).unwrap(), pv(&[("w", &[3.0])]));
        assert_eq!(a.sub(&a).unwrap(), a.zeros_like());
    }

    #[test]
    fn hadamard_identities() {
        let v = pv(&[("a", &[1.5, -2.0]), ("b", &[3.0])]);
        let sig = v.signature();
        assert_eq!(v.hadamard(&MaskVector::ones(&sig)).unwrap(), v);
        assert_eq!(v.hadamard(&MaskVector::zeros(&sig)).unwrap(), v.zeros_like());
    }

    #[test]
    fn scale_cases() {
        let v = pv(&[("w", &[10.0])]);
        assert_eq!(v.scale(1.0).unwrap(), v);
        assert_eq!(v.scale(0.0).unwrap(), v.zeros_like());
        assert_eq!(v.scale(0.8).unwrap(), pv(&[("w", &[8.0])]));
        assert!(matches!(v.scale(f64::NAN), Err(Error::Numerical(_))));
        assert!(matches!(v.scale(f64::INFINITY), Err(Error::Numerical(_))));
    }

    #[test]
    fn shape_mismatch_names_first_offending_layer() {
        let a = pv(&[("x", &[1.0]), ("y", &[1.0, 2.0])]);
        let b = pv(&[("x", &[1.0]), ("y", &[1.0])]);
        match a.add(&b) {
            Err(Error::ShapeMismatch { layer, .. }) => assert_eq!(layer, "y"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        let c = pv(&[("x", &[1.0]), ("z", &[1.0, 2.0])]);
        match a.sub(&c) {
            Err(Error::ShapeMismatch { layer, .. }) => assert_eq!(layer, "y"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        let d = pv(&[("x", &[1.0])]);
        match a.add(&d) {
            Err(Error::ShapeMismatch { layer, .. }) => assert_eq!(layer, "y"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn construction_rejects_bad_layers() {
        assert!(ParamVector::new([("w", vec![])]).is_err());
        assert!(ParamVector::new([("w", vec![f64::NAN])]).is_err());
        assert!(ParamVector::new([("w", vec![1.0]), ("w", vec![2.0])]).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let v = pv(&[("w", &[f64::MAX])]);
        assert!(matches!(v.add(&v), Err(Error::Numerical(_))));
    }

    #[test]
    fn residency_tracks_live_task_vectors() {
        residency::reset_peak();
        let base = residency::current();
        let a = TaskVector::new(pv(&[("w", &[1.0])]));
        let b = a.clone();
        assert_eq!(residency::current(), base + 2);
        drop(a);
        drop(b);
        assert_eq!(residency::current(), base);
        assert_eq!(residency::peak(), base + 2);
    }

    fn three_layer_pair() -> impl Strategy<Value = (ParamVector, ParamVector)> {
        (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(l0, l1, l2)| {
            let total = l0 + l1 + l2;
            (
                prop::collection::vec(-1e3f64..1e3, total),
                prop::collection::vec(-1e3f64..1e3, total),
            )
                .prop_map(move |(a, b)| {
                    let split = |v: &[f64]| {
                        ParamVector::new([
                            ("l0", v[..l0].to_vec()),
                            ("l1", v[l0..l0 + l1].to_vec()),
                            ("l2", v[l0 + l1..].to_vec()),
                        ])
                        .unwrap()
                    };
                    (split(&a), split(&b))
                })
        })
    }

    proptest! {
        #[test]
        fn elementwise_ops_match_brute_force((a, b) in three_layer_pair()) {
            let sum = a.add(&b).unwrap();
            let diff = a.sub(&b).unwrap();
            let prod = a.hadamard(&MaskVector::from_params(b.clone())).unwrap();
            let scaled = a.scale(-0.37).unwrap();
            for (name, av) in a.layers() {
                let bv = b.layer(name).unwrap();
                for i in 0..av.len() {
                    prop_assert_eq!(sum.layer(name).unwrap()[i], av[i] + bv[i]);
                    prop_assert_eq!(diff.layer(name).unwrap()[i], av[i] - bv[i]);
                    prop_assert_eq!(prod.layer(name).unwrap()[i], av[i] * bv[i]);
                    prop_assert_eq!(scaled.layer(name).unwrap()[i], -0.37 * av[i]);
                }
            }
            for out in [&sum, &diff, &prod, &scaled] {
                prop_assert_eq!(out.signature(), a.signature());
            }
            prop_assert_eq!(b.add(&a).unwrap(), sum);
        }

        #[test]
        fn sub_then_add_round_trips((a, b) in three_layer_pair()) {
            let back = a.sub(&b).unwrap().add(&b).unwrap();
            prop_assert!(back.max_abs_diff(&a).unwrap() <= 1e-12);
        }
    }
}
