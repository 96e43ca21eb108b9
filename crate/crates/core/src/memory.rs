//! Rehearsal memory.
//!
//! Two management strategies are supported: a fixed total capacity shared by
//! every seen class, and a fixed number of exemplars per class. Exemplars are
//! raw inputs chosen by herding on encoder features and kept in selection
//! order, so shrinking a class keeps its best prefix.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderState;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum MemoryStrategy {
    FixedTotal { capacity: usize },
    FixedPerClass { per_class: usize },
}

/// Training-sample count per class for the upcoming task.
pub type ClassCountTable = BTreeMap<usize, usize>;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBuffer {
    strategy: MemoryStrategy,
    store: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl MemoryBuffer {
    pub fn new(strategy: MemoryStrategy) -> Self {
        Self {
            strategy,
            store: BTreeMap::new(),
        }
    }

    pub fn strategy(&self) -> MemoryStrategy {
        self.strategy
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.store.keys().copied()
    }

    pub fn exemplars(&self, class: usize) -> &[Vec<f64>] {
        self.store.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn total(&self) -> usize {
        self.store.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    /// Exemplar count per stored class.
    pub fn counts(&self) -> ClassCountTable {
        self.store.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    /// Per-class quota once `classes_seen` classes share the buffer.
    pub fn quota(&self, classes_seen: usize) -> Result<usize> {
        let quota = match self.strategy {
            MemoryStrategy::FixedTotal { capacity } => {
                capacity.checked_div(classes_seen).unwrap_or(capacity)
            }
            MemoryStrategy::FixedPerClass { per_class } => per_class,
        };
        if quota == 0 {
            let capacity = match self.strategy {
                MemoryStrategy::FixedTotal { capacity } => capacity,
                MemoryStrategy::FixedPerClass { per_class } => per_class,
            };
            return Err(Error::CapacityZero {
                capacity,
                classes: classes_seen,
            });
        }
        Ok(quota)
    }

    /// Stores exemplars for classes just learned, shrinking old classes if the
    /// strategy requires it.
    ///
    /// `new_classes` maps each new class to its raw training inputs.
    pub fn update(
        &mut self,
        new_classes: &BTreeMap<usize, Array2<f64>>,
        encoder: &EncoderState,
    ) -> Result<()> {
        let mut seen: Vec<usize> = self.store.keys().copied().collect();
        seen.extend(new_classes.keys().filter(|c| !self.store.contains_key(c)));
        let quota = self.quota(seen.len())?;
        if let MemoryStrategy::FixedTotal { .. } = self.strategy {
            for exemplars in self.store.values_mut() {
                exemplars.truncate(quota);
            }
        }
        for (&class, inputs) in new_classes {
            if inputs.nrows() == 0 {
                return Err(Error::EmptyInput);
            }
            let feats = encoder.encode(inputs.view())?;
            let chosen = herding_select(feats.view(), quota)?;
            let rows = chosen.into_iter().map(|i| inputs.row(i).to_vec()).collect();
            self.store.insert(class, rows);
        }
        Ok(())
    }

    /// Exemplar inputs and labels, classes ascending, selection order within a class.
    pub fn as_rows(&self) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rows = Vec::with_capacity(self.total());
        let mut labels = Vec::with_capacity(self.total());
        for (&class, exemplars) in &self.store {
            for x in exemplars {
                rows.push(x.clone());
                labels.push(class);
            }
        }
        (rows, labels)
    }
}

/// Greedy herding: repeatedly add the point that brings the running exemplar
/// mean closest to the mean of all points.
///
/// Returns `min(m, n)` distinct indices in selection order; ties go to the
/// smallest index.
pub fn herding_select(feats: ArrayView2<'_, f64>, m: usize) -> Result<Vec<usize>> {
    let n = feats.nrows();
    if n == 0 || m == 0 {
        return Err(Error::EmptyInput);
    }
    let mean = feats.mean_axis(Axis(0)).expect("non-empty");
    let mut running: Array1<f64> = Array1::zeros(feats.ncols());
    let mut taken = vec![false; n];
    let mut chosen = Vec::with_capacity(m.min(n));
    for k in 0..m.min(n) {
        let denom = (k + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for (j, row) in feats.rows().into_iter().enumerate() {
            if taken[j] {
                continue;
            }
            let dist_sq: f64 = mean
                .iter()
                .zip(running.iter().zip(row.iter()))
                .map(|(mu, (s, x))| {
                    let diff = mu - (s + x) / denom;
                    diff * diff
                })
                .sum();
            if !matches!(best, Some((_, b)) if dist_sq >= b) {
                best = Some((j, dist_sq));
            }
        }
        let (j, _) = best.expect("an untaken index remains");
        taken[j] = true;
        running += &feats.row(j);
        chosen.push(j);
    }
    Ok(chosen)
}

/// Largest class count over smallest class count.
pub fn imbalance_ratio(counts: &ClassCountTable) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some((&class, _)) = counts.iter().find(|(_, &n)| n == 0) {
        return Err(Error::ZeroCount(class));
    }
    let max = *counts.values().max().expect("non-empty");
    let min = *counts.values().min().expect("non-empty");
    Ok(max as f64 / min as f64)
}
