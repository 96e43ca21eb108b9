//! Class-to-prototype assignment.
//!
//! Each class keeps an exponential moving average of its normalised features.
//! New classes are matched to free prototype rows by minimum total Euclidean
//! distance between center and prototype, solved as a rectangular linear
//! assignment problem.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PrototypeSet;

/// EMA factor used when none is configured.
pub const DEFAULT_EMA_FACTOR: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCenter {
    pub center: Vec<f64>,
    pub count_seen: usize,
}

/// Running feature centers keyed by class id.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCenters {
    dim: usize,
    ema_factor: f64,
    centers: BTreeMap<usize, ClassCenter>,
}

impl ClassCenters {
    pub fn new(dim: usize, ema_factor: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ema_factor) {
            return Err(Error::InvalidArgument(format!(
                "ema factor {ema_factor} outside [0, 1]"
            )));
        }
        Ok(Self {
            dim,
            ema_factor,
            centers: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ema_factor(&self) -> f64 {
        self.ema_factor
    }

    pub fn get(&self, class: usize) -> Option<&ClassCenter> {
        self.centers.get(&class)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Folds one batch of normalised features into the centers.
    ///
    /// A class seen for the first time starts at its batch mean; later batches
    /// update `center <- ema * center + (1 - ema) * batch_mean`.
    pub fn update(&mut self, feats: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
        if feats.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: feats.ncols(),
            });
        }
        if feats.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: feats.nrows(),
                got: labels.len(),
            });
        }
        let mut sums: BTreeMap<usize, (Array1<f64>, usize)> = BTreeMap::new();
        for (row, &label) in feats.rows().into_iter().zip(labels) {
            let entry = sums
                .entry(label)
                .or_insert_with(|| (Array1::zeros(self.dim), 0));
            entry.0 += &row;
            entry.1 += 1;
        }
        let keep = self.ema_factor;
        for (class, (sum, n)) in sums {
            let batch_mean = sum / n as f64;
            match self.centers.get_mut(&class) {
                Some(entry) => {
                    for (c, m) in entry.center.iter_mut().zip(batch_mean.iter()) {
                        *c = keep * *c + (1.0 - keep) * m;
                    }
                    entry.count_seen += n;
                }
                None => {
                    self.centers.insert(
                        class,
                        ClassCenter {
                            center: batch_mean.to_vec(),
                            count_seen: n,
                        },
                    );
                }
            }
        }
        Ok(())
    }
}

/// Injective map from class id to prototype row.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Assignment(BTreeMap<usize, usize>);

impl Assignment {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds an assignment, rejecting a prototype row used twice.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut used = BTreeSet::new();
        for (class, row) in pairs {
            if !used.insert(row) {
                return Err(Error::InvalidArgument(format!(
                    "prototype row {row} assigned twice"
                )));
            }
            if map.insert(class, row).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "class {class} listed twice"
                )));
            }
        }
        Ok(Self(map))
    }

    pub fn get(&self, class: usize) -> Option<usize> {
        self.0.get(&class).copied()
    }

    pub fn contains_class(&self, class: usize) -> bool {
        self.0.contains_key(&class)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Class ids in ascending order.
    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().map(|(&c, &r)| (c, r))
    }

    pub fn used_rows(&self) -> BTreeSet<usize> {
        self.0.values().copied().collect()
    }
}

/// Minimum-cost injection of rows into columns for an `n x m` cost, `n <= m`.
///
/// Returns the column chosen for each row. Among optimal injections the one
/// with the lexicographically smallest column sequence is returned.
pub fn solve_assignment(cost: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let (n, m) = cost.dim();
    if n > m {
        return Err(Error::InfeasibleShape { rows: n, cols: m });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("cost matrix must be finite".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let (best_cols, best) = hungarian(cost);
    let tol = 1e-9 * (1.0 + best.abs());

    // Fix rows one at a time to the smallest column that still admits an optimum.
    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut taken = vec![false; m];
    let mut fixed_cost = 0.0;
    for row in 0..n {
        let mut chosen = None;
        for col in 0..m {
            if taken[col] {
                continue;
            }
            let rest_rows: Vec<usize> = ((row + 1)..n).collect();
            let rest_cols: Vec<usize> = (0..m).filter(|&c| !taken[c] && c != col).collect();
            let rest_cost = if rest_rows.is_empty() {
                0.0
            } else {
                let sub = Array2::from_shape_fn((rest_rows.len(), rest_cols.len()), |(i, j)| {
                    cost[[rest_rows[i], rest_cols[j]]]
                });
                hungarian(sub.view()).1
            };
            if fixed_cost + cost[[row, col]] + rest_cost <= best + tol {
                chosen = Some(col);
                break;
            }
        }
        // Unreachable in exact arithmetic; keep the Hungarian column otherwise.
        let col = chosen.unwrap_or(best_cols[row]);
        taken[col] = true;
        fixed_cost += cost[[row, col]];
        fixed.push(col);
    }
    Ok(fixed)
}

/// Shortest augmenting path Hungarian method with row/column potentials.
fn hungarian(cost: ArrayView2<'_, f64>) -> (Vec<usize>, f64) {
    let (n, m) = cost.dim();
    // 1-based arrays; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            cols[owner[j] - 1] = j - 1;
        }
    }
    let total = cols.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    (cols, total)
}

/// Matches `new_classes` to prototype rows not used by `assignment`.
///
/// Existing entries are copied through untouched.
pub fn assign_new_classes(
    centers: &ClassCenters,
    protos: &PrototypeSet,
    assignment: &Assignment,
    new_classes: &[usize],
) -> Result<Assignment> {
    if centers.dim() != protos.dim() {
        return Err(Error::DimensionMismatch {
            expected: protos.dim(),
            got: centers.dim(),
        });
    }
    let used = assignment.used_rows();
    let free: Vec<usize> = (0..protos.len()).filter(|r| !used.contains(r)).collect();
    if free.len() < new_classes.len() {
        return Err(Error::NotEnoughPrototypes {
            needed: new_classes.len(),
            free: free.len(),
        });
    }
    let mut cost = Array2::zeros((new_classes.len(), free.len()));
    for (i, &class) in new_classes.iter().enumerate() {
        if assignment.contains_class(class) {
            return Err(Error::InvalidArgument(format!(
                "class {class} is already assigned"
            )));
        }
        let center = &centers
            .get(class)
            .ok_or(Error::MissingCenter(class))?
            .center;
        for (j, &row) in free.iter().enumerate() {
            let proto = protos.row(row);
            cost[[i, j]] = proto
                .iter()
                .zip(center)
                .map(|(p, c)| (p - c) * (p - c))
                .sum::<f64>()
                .sqrt();
        }
    }
    let cols = solve_assignment(cost.view())?;
    let mut merged = assignment.0.clone();
    for (&class, col) in new_classes.iter().zip(cols) {
        merged.insert(class, free[col]);
    }
    Ok(Assignment(merged))
}

/// True when the last `window` assignments are identical.
pub fn has_stabilized(history: &[Assignment], window: usize) -> bool {
    if window == 0 || history.len() < window {
        return false;
    }
    let tail = &history[history.len() - window..];
    tail.windows(2).all(|w| w[0] == w[1])
}
