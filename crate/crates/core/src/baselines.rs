//! Continual merging baselines: weight averaging, task arithmetic and
//! TIES merging, each consuming one task vector at a time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ContinualMerger, TaskArrival};
use crate::model::TaskId;
use crate::param::{ParamVector, TaskVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Swa,
    TaskArithmetic,
    Ties,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Swa => "swa",
            BaselineMethod::TaskArithmetic => "task_arithmetic",
            BaselineMethod::Ties => "ties",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Task-arithmetic coefficient.
    pub scaling: f64,
    /// TIES keep rate: fraction of entries kept by magnitude.
    pub trim_fraction: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            scaling: 0.3,
            trim_fraction: 0.2,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.scaling.is_finite() {
            return Err(Error::Config(format!("scaling must be finite, got {}", self.scaling)));
        }
        check_trim(self.trim_fraction)
    }
}

fn check_trim(trim: f64) -> Result<()> {
    if trim > 0.0 && trim <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("trim_fraction must be in (0, 1], got {trim}")))
    }
}

/// Keeps the `ceil(trim * n)` largest-magnitude entries; ties go to the
/// lower flat index.
pub fn trim_top(v: &ParamVector, trim: f64) -> Result<ParamVector> {
    check_trim(trim)?;
    let flat: Vec<f64> = v.values().collect();
    let keep = ((trim * flat.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()).then(a.cmp(&b)));
    let mut kept = vec![false; flat.len()];
    for &i in &order[..keep.min(flat.len())] {
        kept[i] = true;
    }
    let out: Vec<f64> = flat
        .iter()
        .zip(&kept)
        .map(|(x, k)| if *k { *x } else { 0.0 })
        .collect();
    let mut layers = Vec::with_capacity(v.num_layers());
    let mut idx = 0;
    for (name, vals) in v.layers() {
        layers.push((name.to_string(), out[idx..idx + vals.len()].to_vec()));
        idx += vals.len();
    }
    ParamVector::new(layers)
}

/// One TIES step on a pair: trim each vector, elect a sign per entry by
/// summed value (zero elects `+`), then average the nonzero entries that
/// agree with the elected sign.
pub fn ties_pair(merged: &ParamVector, incoming: &ParamVector, trim: f64) -> Result<ParamVector> {
    merged.check_shape(incoming)?;
    let a = trim_top(merged, trim)?;
    let b = trim_top(incoming, trim)?;
    a.zip_with(&b, |x, y| {
        let positive = x + y >= 0.0;
        let agrees = |v: f64| v != 0.0 && ((v > 0.0) == positive);
        let (mut sum, mut count) = (0.0, 0u32);
        for v in [x, y] {
            if agrees(v) {
                sum += v;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / f64::from(count)
        }
    })
}

/// Running mean of task vectors, updated in place as `avg += (v - avg) / t`.
pub fn continual_swa(vectors: impl IntoIterator<Item = TaskVector>) -> Result<TaskVector> {
    let mut merger = SwaMerger::default();
    for v in vectors {
        merger.push(v)?;
    }
    merger.merged.ok_or_else(|| Error::Data("no task vectors".into()))
}

/// `scaling * sum(v)`, accumulated one vector at a time.
pub fn continual_task_arithmetic(
    vectors: impl IntoIterator<Item = TaskVector>,
    scaling: f64,
) -> Result<TaskVector> {
    let mut merger = TaskArithmeticMerger::new(scaling)?;
    for v in vectors {
        merger.push(v)?;
    }
    merger.merged.ok_or_else(|| Error::Data("no task vectors".into()))
}

/// Pairwise streaming TIES: the first vector is taken as is, every later one
/// is merged into the running result with [`ties_pair`].
pub fn continual_ties(vectors: impl IntoIterator<Item = TaskVector>, trim: f64) -> Result<TaskVector> {
    let mut merger = TiesMerger::new(trim)?;
    let mut n = 0;
    for v in vectors {
        merger.push(v)?;
        n += 1;
    }
    if n < 2 {
        return Err(Error::Data(format!("ties merging needs at least 2 vectors, got {n}")));
    }
    Ok(merger.merged.expect("two vectors pushed"))
}

#[derive(Debug, Default)]
pub struct SwaMerger {
    merged: Option<TaskVector>,
    count: usize,
    heads: BTreeMap<TaskId, ParamVector>,
}

impl SwaMerger {
    fn push(&mut self, v: TaskVector) -> Result<()> {
        self.count += 1;
        let t = self.count as f64;
        let next = match self.merged.as_ref() {
            None => v.params().clone(),
            Some(avg) => avg.zip_with(&v, |a, x| a + (x - a) / t)?,
        };
        self.replace(v, next);
        Ok(())
    }
}

#[derive(Debug)]
pub struct TaskArithmeticMerger {
    scaling: f64,
    merged: Option<TaskVector>,
    count: usize,
    heads: BTreeMap<TaskId, ParamVector>,
}

impl TaskArithmeticMerger {
    pub fn new(scaling: f64) -> Result<Self> {
        BaselineConfig { scaling, ..BaselineConfig::default() }.validate()?;
        Ok(Self {
            scaling,
            merged: None,
            count: 0,
            heads: BTreeMap::new(),
        })
    }

    fn push(&mut self, v: TaskVector) -> Result<()> {
        let next = match self.merged.as_ref() {
            None => v.scale(self.scaling)?,
            Some(sum) => sum.add_scaled(self.scaling, &v)?,
        };
        self.replace(v, next);
        self.count += 1;
        Ok(())
    }
}

#[derive(Debug)]
pub struct TiesMerger {
    trim: f64,
    merged: Option<TaskVector>,
    count: usize,
    heads: BTreeMap<TaskId, ParamVector>,
}

impl TiesMerger {
    pub fn new(trim: f64) -> Result<Self> {
        check_trim(trim)?;
        Ok(Self {
            trim,
            merged: None,
            count: 0,
            heads: BTreeMap::new(),
        })
    }

    fn push(&mut self, v: TaskVector) -> Result<()> {
        let next = match self.merged.as_ref() {
            None => v.params().clone(),
            Some(m) => ties_pair(m, &v, self.trim)?,
        };
        self.replace(v, next);
        self.count += 1;
        Ok(())
    }
}

/// Swaps in the new merged vector after releasing the incoming and old ones,
/// so at most two task vectors are live at any point.
trait ReplaceMerged {
    fn slot(&mut self) -> &mut Option<TaskVector>;

    fn replace(&mut self, incoming: TaskVector, next: ParamVector) {
        drop(incoming);
        *self.slot() = None;
        *self.slot() = Some(TaskVector::new(next));
    }
}

impl ReplaceMerged for SwaMerger {
    fn slot(&mut self) -> &mut Option<TaskVector> {
        &mut self.merged
    }
}

impl ReplaceMerged for TaskArithmeticMerger {
    fn slot(&mut self) -> &mut Option<TaskVector> {
        &mut self.merged
    }
}

impl ReplaceMerged for TiesMerger {
    fn slot(&mut self) -> &mut Option<TaskVector> {
        &mut self.merged
    }
}

/// Builds the baseline merger for `method`.
pub fn baseline_merger(method: BaselineMethod, cfg: &BaselineConfig) -> Result<Box<dyn ContinualMerger>> {
    cfg.validate()?;
    Ok(match method {
        BaselineMethod::Swa => Box::new(SwaMerger::default()),
        BaselineMethod::TaskArithmetic => Box::new(TaskArithmeticMerger::new(cfg.scaling)?),
        BaselineMethod::Ties => Box::new(TiesMerger::new(cfg.trim_fraction)?),
    })
}

macro_rules! impl_merger {
    ($ty:ty, $name:expr) => {
        impl ContinualMerger for $ty {
            fn name(&self) -> &'static str {
                $name
            }

            fn absorb(&mut self, arrival: TaskArrival) -> Result<()> {
                if self.heads.contains_key(&arrival.task) {
                    return Err(Error::Data(format!("{} was already merged", arrival.task)));
                }
                self.push(arrival.task_vector)?;
                self.heads.insert(arrival.task, arrival.head);
                Ok(())
            }

            fn merged(&self) -> Option<&TaskVector> {
                self.merged.as_ref()
            }

            fn heads(&self) -> &BTreeMap<TaskId, ParamVector> {
                &self.heads
            }

            fn steps(&self) -> usize {
                self.count
            }
        }
    };
}

impl_merger!(SwaMerger, "swa");
impl_merger!(TaskArithmeticMerger, "task_arithmetic");
impl_merger!(TiesMerger, "ties");

impl<M: ContinualMerger + ?Sized> ContinualMerger for Box<M> {
    fn name(&self) -> &'static str {
        (**self).name()
    }

    fn absorb(&mut self, arrival: TaskArrival) -> Result<()> {
        (**self).absorb(arrival)
    }

    fn merged(&self) -> Option<&TaskVector> {
        (**self).merged()
    }

    fn heads(&self) -> &BTreeMap<TaskId, ParamVector> {
        (**self).heads()
    }

    fn steps(&self) -> usize {
        (**self).steps()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::residency;
    use proptest::prelude::*;

    fn tv(w: &[f64]) -> TaskVector {
        TaskVector::new(ParamVector::new([("w", w.to_vec())]).unwrap())
    }

    fn w(v: &TaskVector) -> Vec<f64> {
        v.layer("w").unwrap().to_vec()
    }

    #[test]
    fn swa_examples() {
        let v = [0.5, -1.25, 3.0];
        assert_eq!(w(&continual_swa((0..4).map(|_| tv(&v))).unwrap()), v);
        assert_eq!(w(&continual_swa([tv(&[2.0]), tv(&[0.0])]).unwrap()), [1.0]);
        assert!(continual_swa(std::iter::empty()).is_err());
    }

    #[test]
    fn task_arithmetic_examples() {
        let v = [0.5, -1.25];
        assert_eq!(w(&continual_task_arithmetic([tv(&v)], 1.0).unwrap()), v);
        assert_eq!(w(&continual_task_arithmetic([tv(&v), tv(&[3.0, 1.0])], 0.0).unwrap()), [0.0, 0.0]);
        let vs = [[1.0, 2.0], [-0.5, 4.0], [0.25, -1.0]];
        let got = w(&continual_task_arithmetic(vs.iter().map(|v| tv(v)), 0.3).unwrap());
        for j in 0..2 {
            let direct: f64 = 0.3 * vs.iter().map(|v| v[j]).sum::<f64>();
            assert!((got[j] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_examples() {
        let v = [0.5, -1.25, 3.0];
        assert_eq!(w(&continual_ties([tv(&v), tv(&v)], 1.0).unwrap()), v);
        assert_eq!(w(&continual_ties([tv(&[3.0]), tv(&[-1.0])], 1.0).unwrap()), [3.0]);
        assert_eq!(w(&continual_ties([tv(&[1.0]), tv(&[-1.0])], 1.0).unwrap()), [1.0]);
        assert!(continual_ties([tv(&v)], 1.0).is_err());
        assert!(TiesMerger::new(0.0).is_err());
    }

    #[test]
    fn trim_keeps_largest_magnitudes() {
        let v = ParamVector::new([("a", vec![0.1, -5.0]), ("b", vec![2.0, -0.3, 4.0])]).unwrap();
        let t = trim_top(&v, 0.4).unwrap();
        assert_eq!(t.layer("a").unwrap(), &[0.0, -5.0]);
        assert_eq!(t.layer("b").unwrap(), &[0.0, 0.0, 4.0]);
    }

    #[test]
    fn mergers_keep_at_most_two_vectors() {
        let base = residency::current();
        residency::reset_peak();
        let _ = continual_swa((0..20).map(|k| tv(&[k as f64, 1.0]))).unwrap();
        let _ = continual_task_arithmetic((0..20).map(|k| tv(&[k as f64, 1.0])), 0.3).unwrap();
        let _ = continual_ties((0..20).map(|k| tv(&[k as f64, -1.0])), 0.5).unwrap();
        assert!(residency::peak() - base <= 2);
    }

    proptest! {
        #[test]
        fn swa_equals_batch_mean(vs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..=32)) {
            let got = w(&continual_swa(vs.iter().map(|v| tv(v))).unwrap());
            for j in 0..4 {
                let mean = vs.iter().map(|v| v[j]).sum::<f64>() / vs.len() as f64;
                prop_assert!((got[j] - mean).abs() < 1e-12);
            }
        }

        #[test]
        fn task_arithmetic_is_order_invariant(mut vs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 2..8)) {
            let a = w(&continual_task_arithmetic(vs.iter().map(|v| tv(v)), 0.3).unwrap());
            vs.reverse();
            let b = w(&continual_task_arithmetic(vs.iter().map(|v| tv(v)), 0.3).unwrap());
            for j in 0..3 {
                prop_assert!((a[j] - b[j]).abs() < 1e-9);
            }
        }

        #[test]
        fn elected_sign_follows_summed_magnitude(x in prop::collection::vec(-5.0f64..5.0, 6), y in prop::collection::vec(-5.0f64..5.0, 6)) {
            let out = ties_pair(
                &ParamVector::new([("w", x.clone())]).unwrap(),
                &ParamVector::new([("w", y.clone())]).unwrap(),
                1.0,
            ).unwrap();
            for (j, o) in out.values().enumerate() {
                let s = x[j] + y[j];
                if o != 0.0 {
                    prop_assert_eq!(o > 0.0, s >= 0.0);
                }
            }
        }
    }
}
