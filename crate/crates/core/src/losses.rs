//! Loss values and their exact gradients with respect to features.
//!
//! All losses take row-normalised features and return the mean loss over the
//! batch together with `d loss / d feats`. Prototypes are constants; the
//! cosine classifier additionally returns the gradient for its weight rows.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::assignment::Assignment;
use crate::error::{Error, Result};
use crate::geometry::PrototypeSet;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_FIXED_MARGIN: f64 = 0.1;
pub const DEFAULT_FEAT_WEIGHT_BASE: f64 = 0.5;

/// Per-class training counts and their normalised frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    counts: BTreeMap<usize, usize>,
    freq: BTreeMap<usize, f64>,
}

impl ClassPrior {
    pub fn from_counts(counts: &BTreeMap<usize, usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some((&class, _)) = counts.iter().find(|(_, &n)| n == 0) {
            return Err(Error::ZeroCount(class));
        }
        let total: usize = counts.values().sum();
        let freq = counts
            .iter()
            .map(|(&c, &n)| (c, n as f64 / total as f64))
            .collect();
        Ok(Self {
            counts: counts.clone(),
            freq,
        })
    }

    /// Equal counts for every listed class.
    pub fn uniform(classes: impl IntoIterator<Item = usize>) -> Result<Self> {
        Self::from_counts(&classes.into_iter().map(|c| (c, 1)).collect())
    }

    pub fn freq(&self, class: usize) -> Option<f64> {
        self.freq.get(&class).copied()
    }

    pub fn count(&self, class: usize) -> Option<usize> {
        self.counts.get(&class).copied()
    }

    pub fn counts(&self) -> &BTreeMap<usize, usize> {
        &self.counts
    }
}

/// Normalised features with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub feats: Array2<f64>,
    pub labels: Vec<usize>,
}

impl FeatureBatch {
    pub fn new(feats: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if feats.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: feats.nrows(),
                got: labels.len(),
            });
        }
        Ok(Self { feats, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feats.ncols()
    }
}

#[derive(Clone, Debug)]
pub struct LossResult {
    pub value: f64,
    pub grad_feats: Array2<f64>,
}

impl LossResult {
    pub fn zero(n: usize, d: usize) -> Self {
        Self {
            value: 0.0,
            grad_feats: Array2::zeros((n, d)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MarginMode {
    None,
    /// Subtract a constant from the target-class logit.
    Fixed(f64),
    /// Add `log p(k)` to every class logit.
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub margin: MarginMode,
    /// Base of the task-decayed weight on the contrastive term.
    pub feat_weight_base: f64,
    pub task_index: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            margin: MarginMode::Dynamic,
            feat_weight_base: DEFAULT_FEAT_WEIGHT_BASE,
            task_index: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let MarginMode::Fixed(m) = self.margin {
            if !(m >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "fixed margin must be >= 0, got {m}"
                )));
            }
        }
        Ok(())
    }

    /// Weight on the contrastive term at this task: `base^t`.
    pub fn feat_weight(&self) -> f64 {
        self.feat_weight_base.powi(self.task_index as i32)
    }
}

/// Cross-entropy over margin-adjusted cosine logits against arbitrary class rows.
///
/// Returns `(value, d/d feats, d/d rows)`. `class_ids[k]` names the class
/// whose direction is `rows[k]`.
fn margin_cross_entropy(
    batch: &FeatureBatch,
    class_ids: &[usize],
    rows: ArrayView2<'_, f64>,
    prior: &ClassPrior,
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    cfg.validate()?;
    let (n, d) = batch.feats.dim();
    if rows.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: rows.ncols(),
        });
    }
    let k_count = class_ids.len();
    let mut target = Vec::with_capacity(n);
    for &label in &batch.labels {
        let k = class_ids
            .iter()
            .position(|&c| c == label)
            .ok_or(Error::UnassignedClass(label))?;
        target.push(k);
    }
    let shift: Vec<f64> = match cfg.margin {
        MarginMode::Dynamic => class_ids
            .iter()
            .map(|&c| prior.freq(c).map(f64::ln).ok_or(Error::MissingPrior(c)))
            .collect::<Result<_>>()?,
        _ => vec![0.0; k_count],
    };
    let target_margin = match cfg.margin {
        MarginMode::Fixed(m) => m,
        _ => 0.0,
    };
    if n == 0 {
        return Ok((0.0, Array2::zeros((0, d)), Array2::zeros((k_count, d))));
    }

    let inv_tau = 1.0 / cfg.temperature;
    let sims = batch.feats.dot(&rows.t());
    // coef[i, k] = d loss_i / d sims[i, k] (before the 1/n mean)
    let mut coef = Array2::<f64>::zeros((n, k_count));
    let mut total = 0.0;
    let mut logits = vec![0.0; k_count];
    for i in 0..n {
        for k in 0..k_count {
            let margin = if k == target[i] { target_margin } else { 0.0 };
            logits[k] = (sims[[i, k]] + shift[k] - margin) * inv_tau;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let log_norm = max + sum.ln();
        total += log_norm - logits[target[i]];
        for k in 0..k_count {
            let p = (logits[k] - log_norm).exp();
            let indicator = if k == target[i] { 1.0 } else { 0.0 };
            coef[[i, k]] = (p - indicator) * inv_tau / n as f64;
        }
    }
    let grad_feats = coef.dot(&rows);
    let grad_rows = coef.t().dot(&batch.feats);
    Ok((total / n as f64, grad_feats, grad_rows))
}

/// Prototype cross-entropy with temperature and margin.
///
/// The softmax ranges over every assigned class; unassigned prototype rows do
/// not take part.
pub fn proto_loss(
    batch: &FeatureBatch,
    protos: &PrototypeSet,
    assignment: &Assignment,
    prior: &ClassPrior,
    cfg: &LossConfig,
) -> Result<LossResult> {
    let class_ids: Vec<usize> = assignment.classes().collect();
    let mut rows = Array2::zeros((class_ids.len(), protos.dim()));
    for (k, &class) in class_ids.iter().enumerate() {
        let r = assignment.get(class).expect("class taken from assignment");
        if r >= protos.len() {
            return Err(Error::InvalidArgument(format!(
                "class {class} points at row {r} of a {}-row prototype set",
                protos.len()
            )));
        }
        rows.row_mut(k).assign(&protos.row(r));
    }
    let (value, grad_feats, _) = margin_cross_entropy(batch, &class_ids, rows.view(), prior, cfg)?;
    Ok(LossResult { value, grad_feats })
}

/// Result of [`cosine_ce_loss`].
#[derive(Clone, Debug)]
pub struct CosineLossResult {
    pub loss: LossResult,
    pub grad_weights: Array2<f64>,
}

/// The prototype cross-entropy with learnable class rows in place of prototypes.
///
/// `class_ids[k]` is the class represented by `weights[k]`.
pub fn cosine_ce_loss(
    batch: &FeatureBatch,
    class_ids: &[usize],
    weights: ArrayView2<'_, f64>,
    prior: &ClassPrior,
    cfg: &LossConfig,
) -> Result<CosineLossResult> {
    if weights.nrows() != class_ids.len() {
        return Err(Error::DimensionMismatch {
            expected: class_ids.len(),
            got: weights.nrows(),
        });
    }
    let (value, grad_feats, grad_weights) =
        margin_cross_entropy(batch, class_ids, weights, prior, cfg)?;
    Ok(CosineLossResult {
        loss: LossResult { value, grad_feats },
        grad_weights,
    })
}

/// Supervised contrastive loss over same-class positives within the batch.
pub fn feat_loss(batch: &FeatureBatch, cfg: &LossConfig) -> Result<LossResult> {
    cfg.validate()?;
    let (n, d) = batch.feats.dim();
    let positives: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && batch.labels[j] == batch.labels[i])
                .collect()
        })
        .collect();
    let anchors = positives.iter().filter(|p| !p.is_empty()).count();
    if anchors == 0 {
        return Ok(LossResult::zero(n, d));
    }
    let inv_tau = 1.0 / cfg.temperature;
    let sims = batch.feats.dot(&batch.feats.t()) * inv_tau;
    // weight[i, a] = d loss / d sims[i, a]
    let mut weight = Array2::<f64>::zeros((n, n));
    let mut total = 0.0;
    for i in 0..n {
        let pos = &positives[i];
        if pos.is_empty() {
            continue;
        }
        let max = (0..n)
            .filter(|&a| a != i)
            .map(|a| sims[[i, a]])
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..n)
            .filter(|&a| a != i)
            .map(|a| (sims[[i, a]] - max).exp())
            .sum();
        let log_norm = max + sum.ln();
        let inv_pos = 1.0 / pos.len() as f64;
        let mean_pos: f64 = pos.iter().map(|&p| sims[[i, p]]).sum::<f64>() * inv_pos;
        total += log_norm - mean_pos;
        for a in 0..n {
            if a != i {
                weight[[i, a]] = (sims[[i, a]] - log_norm).exp();
            }
        }
        for &p in pos {
            weight[[i, p]] -= inv_pos;
        }
    }
    let scale = inv_tau / anchors as f64;
    let symmetric = (&weight + &weight.t()) * scale;
    Ok(LossResult {
        value: total / anchors as f64,
        grad_feats: symmetric.dot(&batch.feats),
    })
}

/// `proto + base^t * feat`, values and gradients alike.
pub fn upcl_loss(
    batch: &FeatureBatch,
    protos: &PrototypeSet,
    assignment: &Assignment,
    prior: &ClassPrior,
    cfg: &LossConfig,
) -> Result<LossResult> {
    let proto = proto_loss(batch, protos, assignment, prior, cfg)?;
    let feat = feat_loss(batch, cfg)?;
    Ok(weighted_sum(&proto, 1.0, &feat, cfg.feat_weight()))
}

/// Mean cosine discrepancy `1 - <teacher_i, student_i>`; gradient is for the student.
pub fn fkd_loss(student: ArrayView2<'_, f64>, teacher: ArrayView2<'_, f64>) -> Result<LossResult> {
    if student.dim() != teacher.dim() {
        return Err(Error::DimensionMismatch {
            expected: student.len(),
            got: teacher.len(),
        });
    }
    let n = student.nrows();
    if n == 0 {
        return Ok(LossResult::zero(0, student.ncols()));
    }
    let dots = (&student * &teacher).sum_axis(Axis(1));
    let value = dots.iter().map(|d| 1.0 - d).sum::<f64>() / n as f64;
    Ok(LossResult {
        value,
        grad_feats: teacher.mapv(|t| -t / n as f64),
    })
}

/// Old and total class counts at the current task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassSplit {
    pub old: usize,
    pub total: usize,
}

impl ClassSplit {
    /// Distillation weight `old / total`.
    pub fn distill_weight(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.old as f64 / self.total as f64
        }
    }
}

/// `(1 - w) * base + w * fkd(student, teacher)` with `w = old / total`.
///
/// At the first task the distillation term is skipped entirely.
pub fn with_distillation(
    base: LossResult,
    student: ArrayView2<'_, f64>,
    teacher: Option<ArrayView2<'_, f64>>,
    split: ClassSplit,
    task_index: usize,
) -> Result<LossResult> {
    if task_index == 0 {
        return Ok(base);
    }
    let teacher = teacher.ok_or(Error::MissingTeacher)?;
    let fkd = fkd_loss(student, teacher)?;
    let w = split.distill_weight();
    Ok(weighted_sum(&base, 1.0 - w, &fkd, w))
}

/// Full objective for the prototype head.
pub fn total_loss(
    batch: &FeatureBatch,
    protos: &PrototypeSet,
    assignment: &Assignment,
    prior: &ClassPrior,
    cfg: &LossConfig,
    teacher_feats: Option<ArrayView2<'_, f64>>,
    split: ClassSplit,
) -> Result<LossResult> {
    let upcl = upcl_loss(batch, protos, assignment, prior, cfg)?;
    with_distillation(
        upcl,
        batch.feats.view(),
        teacher_feats,
        split,
        cfg.task_index,
    )
}

fn weighted_sum(a: &LossResult, wa: f64, b: &LossResult, wb: f64) -> LossResult {
    LossResult {
        value: wa * a.value + wb * b.value,
        grad_feats: &a.grad_feats * wa + &b.grad_feats * wb,
    }
}
