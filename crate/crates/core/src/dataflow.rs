//! Datasets and the class-incremental task protocol.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::muller_random;
use crate::memory::{ClassCountTable, MemoryBuffer};
use crate::rng::{gaussian_vec, SeededRng};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    /// Checks labels are in range and every class has at least one sample.
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::CountMismatch {
                images: inputs.nrows(),
                labels: labels.len(),
            });
        }
        let mut seen = vec![false; class_count];
        for &label in &labels {
            if label >= class_count {
                return Err(Error::InvalidArgument(format!(
                    "label {label} outside [0, {class_count})"
                )));
            }
            seen[label] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!(
                "class {missing} has no samples"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Row indices whose label is in `classes`.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| classes.contains(l))
            .map(|(i, _)| i)
            .collect()
    }

    /// Inputs of a single class, in dataset order.
    pub fn class_inputs(&self, class: usize) -> Array2<f64> {
        self.inputs.select(Axis(0), &self.indices_of(&[class]))
    }

    /// Affine rescale of all inputs into [0, 1] so the set can be written as IDX.
    pub fn rescaled_unit(&self) -> Self {
        let lo = self.inputs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self
            .inputs
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        Self {
            inputs: self.inputs.mapv(|x| (x - lo) / span),
            labels: self.labels.clone(),
            class_count: self.class_count,
        }
    }
}

/// Blob benchmark parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobParams {
    pub classes: usize,
    pub input_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            classes: 16,
            input_dim: 32,
            n_train: 200,
            n_test: 50,
            spread: 0.35,
            seed: 0,
        }
    }
}

/// Gaussian blobs around `classes` random unit means.
///
/// Samples are drawn class by class; the whole training split is drawn before
/// the test split.
pub fn gen_blobs(
    params: &BlobParams,
    rng: &mut SeededRng,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if params.classes < 2 {
        return Err(Error::InvalidArgument(
            "blobs need at least two classes".into(),
        ));
    }
    if !(params.spread > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "spread must be positive, got {}",
            params.spread
        )));
    }
    if params.n_train == 0 || params.n_test == 0 {
        return Err(Error::InvalidArgument(
            "per-class sample counts must be positive".into(),
        ));
    }
    let means = muller_random(params.classes, params.input_dim, rng)?;
    let draw = |per_class: usize, rng: &mut SeededRng| {
        let n = per_class * params.classes;
        let mut inputs = Array2::zeros((n, params.input_dim));
        let mut labels = Vec::with_capacity(n);
        for class in 0..params.classes {
            for k in 0..per_class {
                let noise = gaussian_vec(rng, params.input_dim);
                let mut row = inputs.row_mut(class * per_class + k);
                for ((x, m), z) in row.iter_mut().zip(means.row(class)).zip(noise) {
                    *x = m + params.spread * z;
                }
                labels.push(class);
            }
        }
        LabeledDataset::new(inputs, labels, params.classes)
    };
    let train = draw(params.n_train, rng)?;
    let test = draw(params.n_test, rng)?;
    Ok((train, test))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::TruncatedFile {
            needed: offset + 4,
            have: bytes.len(),
        })
}

/// Parses IDX image (`[N, H, W]` u8) and label (`[N]` u8) buffers.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let magic = be_u32(images, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let magic = be_u32(labels, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let n_images = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_labels = be_u32(labels, 4)? as usize;
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let dim = rows * cols;
    let pixels = images
        .get(16..16 + n_images * dim)
        .ok_or(Error::TruncatedFile {
            needed: 16 + n_images * dim,
            have: images.len(),
        })?;
    let label_bytes = labels.get(8..8 + n_labels).ok_or(Error::TruncatedFile {
        needed: 8 + n_labels,
        have: labels.len(),
    })?;
    let inputs = Array2::from_shape_vec(
        (n_images, dim),
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
    .expect("sized from header");
    let labels: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(inputs, labels, class_count)
}

pub fn read_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

/// Encodes a dataset with inputs in [0, 1] as IDX buffers shaped `[N, 1, D]`.
pub fn to_idx_bytes(dataset: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let n = dataset.len();
    let dim = dataset.input_dim();
    let mut images = Vec::with_capacity(16 + n * dim);
    images.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    images.extend_from_slice(&(n as u32).to_be_bytes());
    images.extend_from_slice(&1u32.to_be_bytes());
    images.extend_from_slice(&(dim as u32).to_be_bytes());
    for &x in dataset.inputs.iter() {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::ValueOutOfRange(x));
        }
        images.push((x * 255.0).round() as u8);
    }
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &dataset.labels {
        let byte = u8::try_from(l)
            .map_err(|_| Error::InvalidArgument(format!("label {l} does not fit in a byte")))?;
        labels.push(byte);
    }
    Ok((images, labels))
}

pub fn write_idx(
    dataset: &LabeledDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (images, labels) = to_idx_bytes(dataset)?;
    std::fs::write(images_path, images)?;
    std::fs::write(labels_path, labels)?;
    Ok(())
}

/// Fixed random class order split into equal consecutive groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub class_order: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
}

impl TaskSchedule {
    pub fn tasks(&self) -> usize {
        self.groups.len()
    }

    /// Classes introduced before task `t`.
    pub fn classes_before(&self, t: usize) -> Vec<usize> {
        self.groups[..t].iter().flatten().copied().collect()
    }

    /// Classes seen once task `t` has been learned.
    pub fn classes_through(&self, t: usize) -> Vec<usize> {
        self.groups[..=t].iter().flatten().copied().collect()
    }
}

pub fn make_schedule(
    class_count: usize,
    tasks: usize,
    rng: &mut SeededRng,
) -> Result<TaskSchedule> {
    if tasks == 0 || class_count % tasks != 0 {
        return Err(Error::IndivisibleSplit {
            classes: class_count,
            tasks,
        });
    }
    let mut order: Vec<usize> = (0..class_count).collect();
    order.shuffle(rng);
    let per_task = class_count / tasks;
    let groups = order.chunks(per_task).map(<[usize]>::to_vec).collect();
    Ok(TaskSchedule {
        class_order: order,
        groups,
    })
}

/// The data visible while learning task `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskTrainSet {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub counts: ClassCountTable,
}

/// Task-`t` samples followed by every memory exemplar.
pub fn task_train_set(
    dataset: &LabeledDataset,
    schedule: &TaskSchedule,
    t: usize,
    memory: &MemoryBuffer,
) -> Result<TaskTrainSet> {
    let group = schedule.groups.get(t).ok_or_else(|| {
        Error::InvalidArgument(format!("task {t} outside schedule of {}", schedule.tasks()))
    })?;
    let idx = dataset.indices_of(group);
    let (mem_rows, mem_labels) = memory.as_rows();
    let dim = dataset.input_dim();
    let mut inputs = Array2::zeros((idx.len() + mem_rows.len(), dim));
    let mut labels = Vec::with_capacity(idx.len() + mem_rows.len());
    for (r, &i) in idx.iter().enumerate() {
        inputs.row_mut(r).assign(&dataset.inputs.row(i));
        labels.push(dataset.labels[i]);
    }
    for (r, (x, &l)) in mem_rows.iter().zip(&mem_labels).enumerate() {
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        for (dst, src) in inputs.row_mut(idx.len() + r).iter_mut().zip(x) {
            *dst = *src;
        }
        labels.push(l);
    }
    let mut counts = BTreeMap::new();
    for &l in &labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    Ok(TaskTrainSet {
        inputs,
        labels,
        counts,
    })
}
