//! Fixed prototypes on the unit hypersphere.
//!
//! Four generators are provided: online Gram-Schmidt extension (the default
//! classifier geometry), a simplex equiangular tight frame, Muller's
//! normalised-Gaussian sampler, and minimum hyperspherical energy descent.
//! [`min_cosine_distance`] scores how uniform a set is in the Tammes sense.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, SeededRng};

/// Norm tolerance for every geometric identity at double precision.
pub const UNIT_TOL: f64 = 1e-6;

/// Residual norms below this are treated as linearly dependent draws.
const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    GramSchmidt,
    SimplexEtf,
    Muller,
    Mhe,
}

impl Generator {
    pub const ALL: [Generator; 4] = [
        Generator::SimplexEtf,
        Generator::GramSchmidt,
        Generator::Mhe,
        Generator::Muller,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Generator::GramSchmidt => "gram_schmidt",
            Generator::SimplexEtf => "simplex_etf",
            Generator::Muller => "muller",
            Generator::Mhe => "mhe",
        }
    }
}

impl std::fmt::Display for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A point on the unit sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Accepts coordinates whose norm is already 1 within [`UNIT_TOL`].
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&coords);
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidArgument(format!(
                "vector norm {norm} is not 1"
            )));
        }
        Ok(Self(coords))
    }

    /// Rescales arbitrary non-zero coordinates onto the sphere.
    pub fn normalize(mut coords: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&coords);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::EmptyInput);
        }
        coords.iter_mut().for_each(|c| *c /= norm);
        Ok(Self(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Rows of unit vectors sharing one ambient dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    rows: Array2<f64>,
    generator: Generator,
}

impl PrototypeSet {
    pub fn empty(dim: usize, generator: Generator) -> Self {
        Self {
            rows: Array2::zeros((0, dim)),
            generator,
        }
    }

    pub fn from_rows(dim: usize, rows: Vec<UnitVector>, generator: Generator) -> Result<Self> {
        let mut data = Array2::zeros((rows.len(), dim));
        for (i, row) in rows.iter().enumerate() {
            if row.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.dim(),
                });
            }
            data.row_mut(i).assign(&ArrayView1::from(row.as_slice()));
        }
        Ok(Self {
            rows: data,
            generator,
        })
    }

    /// Wraps a row matrix, re-checking the unit-norm invariant.
    pub fn from_matrix(rows: Array2<f64>, generator: Generator) -> Result<Self> {
        for row in rows.rows() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidArgument(format!(
                    "prototype row norm {norm} is not 1"
                )));
            }
        }
        Ok(Self { rows, generator })
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn generator(&self) -> Generator {
        self.generator
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    /// The first `n` rows, keeping the generator tag.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n > self.len() {
            return Err(Error::CapacityExceeded {
                requested: n,
                capacity: self.len(),
            });
        }
        Ok(Self {
            rows: self.rows.slice(s![..n, ..]).to_owned(),
            generator: self.generator,
        })
    }

    /// Appends unit rows after the existing ones.
    pub fn append(&self, extra: ArrayView2<'_, f64>) -> Result<Self> {
        if extra.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: extra.ncols(),
            });
        }
        let mut rows = self.rows.clone();
        rows.append(Axis(0), extra)
            .expect("column count checked above");
        Self::from_matrix(rows, self.generator)
    }

    /// Largest |<t_i, t_j>| over distinct pairs, 0 for fewer than two rows.
    pub fn max_abs_offdiag(&self) -> f64 {
        let gram = self.rows.dot(&self.rows.t());
        let mut worst: f64 = 0.0;
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                worst = worst.max(gram[[i, j]].abs());
            }
        }
        worst
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Removes the components of `v` along each row of `basis`, twice.
fn orthogonalize_against(v: &mut Array1<f64>, basis: ArrayView2<'_, f64>) {
    // A second sweep restores orthogonality lost to cancellation.
    for _ in 0..2 {
        for row in basis.rows() {
            let proj = row.dot(v);
            v.scaled_add(-proj, &row);
        }
    }
}

/// Draws `k_new` further orthonormal rows, leaving the existing rows as they are.
pub fn gram_schmidt_extend(
    existing: &PrototypeSet,
    k_new: usize,
    rng: &mut SeededRng,
) -> Result<PrototypeSet> {
    if existing.generator != Generator::GramSchmidt {
        return Err(Error::InvalidArgument(format!(
            "cannot Gram-Schmidt extend a {} set",
            existing.generator
        )));
    }
    let dim = existing.dim();
    let total = existing.len() + k_new;
    if total > dim {
        return Err(Error::CapacityExceeded {
            requested: total,
            capacity: dim,
        });
    }
    let mut rows = Array2::zeros((total, dim));
    rows.slice_mut(s![..existing.len(), ..])
        .assign(&existing.rows);
    for i in existing.len()..total {
        let fresh = loop {
            let mut v = Array1::from(gaussian_vec(rng, dim));
            orthogonalize_against(&mut v, rows.slice(s![..i, ..]));
            let norm = v.dot(&v).sqrt();
            if norm > DEGENERATE_NORM {
                break v / norm;
            }
        };
        rows.row_mut(i).assign(&fresh);
    }
    Ok(PrototypeSet {
        rows,
        generator: Generator::GramSchmidt,
    })
}

/// `count` orthonormal columns of a `dim`-dimensional space, as rows.
fn random_orthonormal_rows(count: usize, dim: usize, rng: &mut SeededRng) -> Array2<f64> {
    let seed = PrototypeSet::empty(dim, Generator::GramSchmidt);
    gram_schmidt_extend(&seed, count, rng)
        .expect("count <= dim is checked by callers")
        .rows
}

/// `classes` unit rows with every pairwise inner product equal to -1/(classes-1).
///
/// The standard basis of R^classes is centred and rescaled, expressed in an
/// orthonormal basis of its (classes-1)-dimensional span, and then mapped into
/// R^dim by a random isometry.
pub fn simplex_etf(classes: usize, dim: usize, rng: &mut SeededRng) -> Result<PrototypeSet> {
    if classes < 2 {
        return Err(Error::TooFewRows(classes));
    }
    if classes > dim + 1 {
        return Err(Error::CapacityExceeded {
            requested: classes,
            capacity: dim + 1,
        });
    }
    let c = classes as f64;
    let scale = (c / (c - 1.0)).sqrt();
    let mut centred = Array2::<f64>::eye(classes);
    centred.mapv_inplace(|x| (x - 1.0 / c) * scale);

    // Orthonormal basis of the sum-zero subspace, as columns.
    let mut basis = Array2::<f64>::zeros((classes - 1, classes));
    for k in 0..classes - 1 {
        let mut v = centred.row(k).to_owned();
        orthogonalize_against(&mut v, basis.slice(s![..k, ..]));
        let norm = v.dot(&v).sqrt();
        basis.row_mut(k).assign(&(v / norm));
    }
    let coords = centred.dot(&basis.t());
    let isometry = random_orthonormal_rows(classes - 1, dim, rng);
    let mut rows = coords.dot(&isometry);
    for mut row in rows.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|x| x / norm);
    }
    Ok(PrototypeSet {
        rows,
        generator: Generator::SimplexEtf,
    })
}

/// Independent normalised standard-Gaussian rows.
pub fn muller_random(count: usize, dim: usize, rng: &mut SeededRng) -> Result<PrototypeSet> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    let mut rows = Array2::zeros((count, dim));
    for mut row in rows.rows_mut() {
        let v = loop {
            let v = gaussian_vec(rng, dim);
            let norm = l2_norm(&v);
            if norm > DEGENERATE_NORM {
                break v.into_iter().map(|x| x / norm).collect::<Vec<_>>();
            }
        };
        row.assign(&ArrayView1::from(&v[..]));
    }
    Ok(PrototypeSet {
        rows,
        generator: Generator::Muller,
    })
}

/// Riesz s=1 energy: the sum over pairs of inverse Euclidean distance.
pub fn hyperspherical_energy(rows: ArrayView2<'_, f64>) -> f64 {
    let n = rows.nrows();
    let mut energy = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = pair_distance(rows.row(i), rows.row(j));
            energy += 1.0 / dist.max(f64::MIN_POSITIVE);
        }
    }
    energy
}

fn pair_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn energy_gradient(rows: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, d) = rows.dim();
    let mut grad = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = &rows.row(i) - &rows.row(j);
            let dist = diff.dot(&diff).sqrt().max(f64::MIN_POSITIVE);
            let coef = -1.0 / (dist * dist * dist);
            grad.row_mut(i).scaled_add(coef, &diff);
            grad.row_mut(j).scaled_add(-coef, &diff);
        }
    }
    grad
}

/// Result of [`mhe_optimize`].
#[derive(Clone, Debug)]
pub struct MheOutcome {
    pub prototypes: PrototypeSet,
    /// Energy after every iteration, starting with the initial energy.
    pub energy_trace: Vec<f64>,
    /// Energy fell by less than 1e-9 over the final tenth of the iterations.
    pub non_convergence: bool,
}

/// Minimum hyperspherical energy descent from a Muller start.
///
/// Each iteration takes a projected gradient step and renormalises every row.
/// A step that would raise the energy is rejected and the step size halved,
/// so the trace never increases.
pub fn mhe_optimize(
    count: usize,
    dim: usize,
    iters: usize,
    step: f64,
    rng: &mut SeededRng,
) -> Result<MheOutcome> {
    if count < 2 {
        return Err(Error::TooFewRows(count));
    }
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {step}"
        )));
    }
    let mut rows = muller_random(count, dim, rng)?.rows;
    let mut energy = hyperspherical_energy(rows.view());
    let mut step = step;
    let mut trace = Vec::with_capacity(iters + 1);
    trace.push(energy);

    for _ in 0..iters {
        let mut grad = energy_gradient(rows.view());
        for (mut g, t) in grad.rows_mut().into_iter().zip(rows.rows()) {
            let radial = g.dot(&t);
            g.scaled_add(-radial, &t);
        }
        let mut candidate = &rows - &(grad * step);
        for mut row in candidate.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / norm);
        }
        let next = hyperspherical_energy(candidate.view());
        if next <= energy {
            rows = candidate;
            energy = next;
        } else {
            step *= 0.5;
        }
        trace.push(energy);
    }

    let tail = (iters / 10).max(1).min(trace.len() - 1);
    let reference = trace[trace.len() - 1 - tail];
    let non_convergence = reference - energy < 1e-9;
    Ok(MheOutcome {
        prototypes: PrototypeSet {
            rows,
            generator: Generator::Mhe,
        },
        energy_trace: trace,
        non_convergence,
    })
}

/// Smallest `1 - <t_i, t_j>` over unordered pairs.
pub fn min_cosine_distance(protos: &PrototypeSet) -> Result<f64> {
    let n = protos.len();
    if n < 2 {
        return Err(Error::TooFewRows(n));
    }
    let gram = protos.rows.dot(&protos.rows.t());
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            best = best.min(1.0 - gram[[i, j]]);
        }
    }
    Ok(best)
}

/// Generates `count` rows in `dim` dimensions with the given generator.
pub fn generate(
    generator: Generator,
    count: usize,
    dim: usize,
    mhe: MheParams,
    rng: &mut SeededRng,
) -> Result<PrototypeSet> {
    match generator {
        Generator::GramSchmidt => gram_schmidt_extend(
            &PrototypeSet::empty(dim, Generator::GramSchmidt),
            count,
            rng,
        ),
        Generator::SimplexEtf => simplex_etf(count, dim, rng),
        Generator::Muller => muller_random(count, dim, rng),
        Generator::Mhe => mhe_optimize(count, dim, mhe.iters, mhe.step, rng).map(|o| o.prototypes),
    }
}

/// Iteration budget for [`mhe_optimize`] when used through [`generate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MheParams {
    pub iters: usize,
    pub step: f64,
}

impl Default for MheParams {
    fn default() -> Self {
        Self {
            iters: 200,
            step: 0.01,
        }
    }
}
