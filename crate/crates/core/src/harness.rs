//! Class-incremental runs end to end.
//!
//! [`run_experiment`] trains one configuration over its task sequence; each
//! task builds the visible train set (task data plus memory), extends the
//! classifier, trains, updates memory, snapshots the teacher and evaluates on
//! the test samples of every class seen so far. [`run_ablation`] repeats this
//! for the six head/margin variants over several seed replicates.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign_new_classes, has_stabilized, Assignment, ClassCenters};
use crate::config::{DatasetConfig, Head, MarginSetting, RunConfig};
use crate::dataflow::{
    gen_blobs, make_schedule, read_idx, task_train_set, LabeledDataset, TaskSchedule, TaskTrainSet,
};
use crate::encoder::{sgd_step, snapshot_teacher, EncoderState, OptimizerState, TeacherSnapshot};
use crate::error::{Error, Result};
use crate::geometry::{generate, gram_schmidt_extend, muller_random, Generator, PrototypeSet};
use crate::losses::{
    cosine_ce_loss, total_loss, with_distillation, ClassPrior, ClassSplit, FeatureBatch, LossResult,
};
use crate::memory::{imbalance_ratio, ClassCountTable, MemoryBuffer};
use crate::rng::{self, SeededRng, Stream};

/// One cell of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantSpec {
    pub head: Head,
    pub margin: MarginSetting,
}

impl VariantSpec {
    pub const GRID: [VariantSpec; 6] = [
        VariantSpec {
            head: Head::CosineClassifier,
            margin: MarginSetting::None,
        },
        VariantSpec {
            head: Head::CosineClassifier,
            margin: MarginSetting::Fixed,
        },
        VariantSpec {
            head: Head::CosineClassifier,
            margin: MarginSetting::Dynamic,
        },
        VariantSpec {
            head: Head::UniformPrototype,
            margin: MarginSetting::None,
        },
        VariantSpec {
            head: Head::UniformPrototype,
            margin: MarginSetting::Fixed,
        },
        VariantSpec {
            head: Head::UniformPrototype,
            margin: MarginSetting::Dynamic,
        },
    ];

    pub fn of(cfg: &RunConfig) -> Self {
        Self {
            head: cfg.head,
            margin: cfg.margin_mode,
        }
    }

    pub fn tag(&self) -> &'static str {
        match (self.head, self.margin) {
            (Head::CosineClassifier, MarginSetting::None) => "cos",
            (Head::CosineClassifier, MarginSetting::Fixed) => "cos+fm",
            (Head::CosineClassifier, MarginSetting::Dynamic) => "cos+dm",
            (Head::UniformPrototype, MarginSetting::None) => "up",
            (Head::UniformPrototype, MarginSetting::Fixed) => "up+fm",
            (Head::UniformPrototype, MarginSetting::Dynamic) => "up+dm",
        }
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.head = self.head;
        cfg.margin_mode = self.margin;
        cfg
    }
}

/// Accuracy and imbalance summary of a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub per_task_acc: Vec<f64>,
    pub a_last: f64,
    pub a_avg: f64,
    pub ir: Vec<f64>,
    /// `confusion[true][predicted]` after the final task, indexed by class id.
    pub confusion: Vec<Vec<u64>>,
    pub per_class_acc: Vec<f64>,
}

/// Fills `A_last`, `A_avg` and per-class accuracy.
pub fn compute_metrics(
    per_task_acc: &[f64],
    ir: &[f64],
    confusion: Vec<Vec<u64>>,
) -> Result<MetricsRecord> {
    if per_task_acc.is_empty() {
        return Err(Error::EmptyInput);
    }
    let a_last = *per_task_acc.last().expect("non-empty");
    let a_avg = per_task_acc.iter().sum::<f64>() / per_task_acc.len() as f64;
    let per_class_acc = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                row[c] as f64 / total as f64
            }
        })
        .collect();
    Ok(MetricsRecord {
        per_task_acc: per_task_acc.to_vec(),
        a_last,
        a_avg,
        ir: ir.to_vec(),
        confusion,
        per_class_acc,
    })
}

/// Top-1 prediction by the largest inner product with a class direction.
///
/// `class_ids[k]` owns `rows[k]`; ties go to the smallest class id.
pub fn evaluate_scores(
    feats: ArrayView2<'_, f64>,
    labels: &[usize],
    class_ids: &[usize],
    rows: ArrayView2<'_, f64>,
    class_count: usize,
) -> Result<(f64, Vec<Vec<u64>>)> {
    if class_ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut order: Vec<usize> = (0..class_ids.len()).collect();
    order.sort_by_key(|&k| class_ids[k]);
    let scores = feats.dot(&rows.t());
    let mut confusion = vec![vec![0u64; class_count]; class_count];
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let mut best = order[0];
        for &k in &order[1..] {
            if scores[[i, k]] > scores[[i, best]] {
                best = k;
            }
        }
        let predicted = class_ids[best];
        if predicted == label {
            correct += 1;
        }
        confusion[label][predicted] += 1;
    }
    let acc = if labels.is_empty() {
        0.0
    } else {
        correct as f64 / labels.len() as f64
    };
    Ok((acc, confusion))
}

/// Prototype-argmax evaluation over the assigned classes.
pub fn evaluate(
    encoder: &EncoderState,
    protos: &PrototypeSet,
    assignment: &Assignment,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    class_count: usize,
) -> Result<(f64, Vec<Vec<u64>>)> {
    if let Some(&missing) = labels.iter().find(|&&l| !assignment.contains_class(l)) {
        return Err(Error::UnassignedClass(missing));
    }
    let class_ids: Vec<usize> = assignment.classes().collect();
    let rows = protos.rows().select(
        Axis(0),
        &class_ids
            .iter()
            .map(|&c| assignment.get(c).expect("assigned"))
            .collect::<Vec<_>>(),
    );
    let feats = encoder.encode(inputs)?;
    evaluate_scores(feats.view(), labels, &class_ids, rows.view(), class_count)
}

/// Snapshot of one assignment during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub task: usize,
    /// Epochs completed when the assignment was computed.
    pub epoch: usize,
    pub map: Assignment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    pub new_classes: Vec<usize>,
    pub train_counts: ClassCountTable,
    pub ir: f64,
    pub distill_weight: f64,
    pub feat_weight: f64,
    /// Loss on the first batch of the task, before any update.
    pub initial_loss: f64,
    pub epoch_mean_loss: Vec<f64>,
    /// Epoch count after which the assignment stopped changing.
    pub assignment_frozen_at: Option<usize>,
    pub final_lr: f64,
    pub prototype_count: usize,
    pub memory_counts: ClassCountTable,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub run_id: String,
    pub variant: VariantSpec,
    pub config: RunConfig,
    pub schedule: TaskSchedule,
    pub metrics: MetricsRecord,
    pub tasks: Vec<TaskLog>,
    pub assignment_history: Vec<AssignmentRecord>,
    pub encoder: EncoderState,
    /// Prototype rows after the last task (empty for the cosine head).
    pub prototypes: Option<PrototypeSet>,
}

impl RunOutput {
    pub fn seed(&self) -> u64 {
        self.config.run_seed
    }
}

/// Deterministic identifier from variant and seeds.
pub fn run_id(cfg: &RunConfig) -> String {
    format!(
        "{}-s{}-o{}",
        VariantSpec::of(cfg).tag(),
        cfg.run_seed,
        cfg.class_order_seed
    )
}

/// Supplies prototype rows task by task.
enum PrototypeSource {
    /// Rows are drawn when a task needs them.
    Online { set: PrototypeSet, rng: SeededRng },
    /// The full set is drawn up front and released as a growing prefix.
    Pregenerated { full: PrototypeSet, released: usize },
}

impl PrototypeSource {
    fn new(cfg: &RunConfig, total_classes: usize) -> Result<Self> {
        let d = cfg.feature_dim();
        let mut rng = rng::stream(cfg.run_seed, Stream::Prototypes);
        Ok(match cfg.generator {
            Generator::GramSchmidt | Generator::Muller => Self::Online {
                set: PrototypeSet::empty(d, cfg.generator),
                rng,
            },
            Generator::SimplexEtf | Generator::Mhe => Self::Pregenerated {
                full: generate(cfg.generator, total_classes, d, cfg.mhe, &mut rng)?,
                released: 0,
            },
        })
    }

    fn extend(&mut self, k: usize) -> Result<()> {
        match self {
            Self::Online { set, rng } => {
                *set = match set.generator() {
                    Generator::GramSchmidt => gram_schmidt_extend(set, k, rng)?,
                    _ => {
                        let extra = muller_random(k, set.dim(), rng)?;
                        set.append(extra.rows())?
                    }
                };
            }
            Self::Pregenerated { full, released } => {
                if *released + k > full.len() {
                    return Err(Error::CapacityExceeded {
                        requested: *released + k,
                        capacity: full.len(),
                    });
                }
                *released += k;
            }
        }
        Ok(())
    }

    fn current(&self) -> Result<PrototypeSet> {
        match self {
            Self::Online { set, .. } => Ok(set.clone()),
            Self::Pregenerated { full, released } => full.prefix(*released),
        }
    }
}

struct PrototypeHead {
    source: PrototypeSource,
    protos: PrototypeSet,
    /// Entries fixed by earlier tasks.
    frozen: Assignment,
    current: Assignment,
    centers: ClassCenters,
}

struct CosineHead {
    class_ids: Vec<usize>,
    weights: Array2<f64>,
    rng: SeededRng,
}

enum ClassifierHead {
    Prototype(PrototypeHead),
    Cosine(CosineHead),
}

fn load_data(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match &cfg.dataset {
        DatasetConfig::Blobs(params) => {
            gen_blobs(params, &mut rng::stream(params.seed, Stream::Data))
        }
        DatasetConfig::Idx(paths) => {
            let train = read_idx(&paths.train_images, &paths.train_labels)?;
            let test = read_idx(&paths.test_images, &paths.test_labels)?;
            Ok((train, test))
        }
    }
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|x| x / norm);
    }
}

/// Runs every task of one configuration.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let schedule = make_schedule(
        train.class_count,
        cfg.tasks,
        &mut rng::stream(cfg.class_order_seed, Stream::ClassOrder),
    )?;

    let mut sizes = vec![train.input_dim()];
    sizes.extend_from_slice(&cfg.layer_sizes);
    let mut encoder =
        EncoderState::new(&sizes, &mut rng::stream(cfg.run_seed, Stream::EncoderInit))?;
    let d = encoder.output_dim();

    let mut head = match cfg.head {
        Head::UniformPrototype => {
            let source = PrototypeSource::new(cfg, train.class_count)?;
            let protos = source.current()?;
            ClassifierHead::Prototype(PrototypeHead {
                source,
                protos,
                frozen: Assignment::new(),
                current: Assignment::new(),
                centers: ClassCenters::new(d, cfg.ema_factor)?,
            })
        }
        Head::CosineClassifier => ClassifierHead::Cosine(CosineHead {
            class_ids: Vec::new(),
            weights: Array2::zeros((0, d)),
            rng: rng::stream(cfg.run_seed, Stream::Head),
        }),
    };

    let mut memory = MemoryBuffer::new(cfg.memory.strategy());
    let mut teacher: Option<TeacherSnapshot> = None;
    let mut shuffle_rng = rng::stream(cfg.run_seed, Stream::Shuffle);
    let mut history = Vec::new();
    let mut logs = Vec::new();
    let mut accs = Vec::new();
    let mut irs = Vec::new();
    let mut last_confusion = Vec::new();

    for t in 0..schedule.tasks() {
        let set = task_train_set(&train, &schedule, t, &memory)?;
        let new_classes = schedule.groups[t].clone();
        let mut log = train_task(
            cfg,
            t,
            &set,
            &new_classes,
            &mut encoder,
            &mut head,
            teacher.as_ref(),
            &mut shuffle_rng,
            &mut history,
        )?;

        let new_data: BTreeMap<usize, Array2<f64>> = new_classes
            .iter()
            .map(|&c| {
                let idx: Vec<usize> = (0..set.labels.len())
                    .filter(|&i| set.labels[i] == c)
                    .collect();
                (c, set.inputs.select(Axis(0), &idx))
            })
            .collect();
        memory.update(&new_data, &encoder)?;
        teacher = Some(snapshot_teacher(&encoder));

        let seen = schedule.classes_through(t);
        let test_idx = test.indices_of(&seen);
        let test_x = test.inputs.select(Axis(0), &test_idx);
        let test_y: Vec<usize> = test_idx.iter().map(|&i| test.labels[i]).collect();
        let (acc, confusion) = match &head {
            ClassifierHead::Prototype(h) => evaluate(
                &encoder,
                &h.protos,
                &h.current,
                test_x.view(),
                &test_y,
                train.class_count,
            )?,
            ClassifierHead::Cosine(h) => {
                let feats = encoder.encode(test_x.view())?;
                evaluate_scores(
                    feats.view(),
                    &test_y,
                    &h.class_ids,
                    h.weights.view(),
                    train.class_count,
                )?
            }
        };
        log.memory_counts = memory.counts();
        log.accuracy = acc;
        accs.push(acc);
        irs.push(log.ir);
        last_confusion = confusion;
        logs.push(log);
    }

    let metrics = compute_metrics(&accs, &irs, last_confusion)?;
    let prototypes = match head {
        ClassifierHead::Prototype(h) => Some(h.protos),
        ClassifierHead::Cosine(_) => None,
    };
    Ok(RunOutput {
        run_id: run_id(cfg),
        variant: VariantSpec::of(cfg),
        config: cfg.clone(),
        schedule,
        metrics,
        tasks: logs,
        assignment_history: history,
        encoder,
        prototypes,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_task(
    cfg: &RunConfig,
    t: usize,
    set: &TaskTrainSet,
    new_classes: &[usize],
    encoder: &mut EncoderState,
    head: &mut ClassifierHead,
    teacher: Option<&TeacherSnapshot>,
    shuffle_rng: &mut SeededRng,
    history: &mut Vec<AssignmentRecord>,
) -> Result<TaskLog> {
    let prior = ClassPrior::from_counts(&set.counts)?;
    let ir = imbalance_ratio(&set.counts)?;
    let loss_cfg = cfg.loss_config(t);
    let old = set.counts.len() - new_classes.len();
    let split = ClassSplit {
        old,
        total: set.counts.len(),
    };

    // Extend the classifier for the new classes.
    match head {
        ClassifierHead::Prototype(h) => {
            h.source.extend(new_classes.len())?;
            h.protos = h.source.current()?;
            // Initial assignment from the untrained features of the new classes.
            let idx: Vec<usize> = (0..set.labels.len())
                .filter(|&i| new_classes.contains(&set.labels[i]))
                .collect();
            let x = set.inputs.select(Axis(0), &idx);
            let y: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
            h.centers.update(encoder.encode(x.view())?.view(), &y)?;
            h.current = assign_new_classes(&h.centers, &h.protos, &h.frozen, new_classes)?;
            history.push(AssignmentRecord {
                task: t,
                epoch: 0,
                map: h.current.clone(),
            });
        }
        ClassifierHead::Cosine(h) => {
            let fresh = muller_random(new_classes.len(), h.weights.ncols(), &mut h.rng)?;
            h.weights.append(Axis(0), fresh.rows()).expect("same width");
            h.class_ids.extend_from_slice(new_classes);
        }
    }

    let epochs = if t == 0 {
        cfg.epochs.base
    } else {
        cfg.epochs.increment
    };
    let mut opt = cfg.optimizer.build(t)?;
    let mut head_opt: OptimizerState = cfg.optimizer.build(t)?;
    let mut task_history: Vec<Assignment> = Vec::new();
    let mut frozen_at = None;
    let mut epoch_mean_loss = Vec::with_capacity(epochs);
    let mut initial_loss = f64::NAN;
    let mut order: Vec<usize> = (0..set.labels.len()).collect();

    for epoch in 0..epochs {
        order.shuffle(shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = set.inputs.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
            let cache = encoder.forward(x.view())?;
            let batch = FeatureBatch::new(cache.feats().clone(), labels)?;
            let teacher_feats = match teacher {
                Some(tch) if t > 0 => Some(tch.encode(x.view())?),
                _ => None,
            };
            let loss: LossResult = match head {
                ClassifierHead::Prototype(h) => {
                    if frozen_at.is_none() {
                        h.centers.update(batch.feats.view(), &batch.labels)?;
                    }
                    total_loss(
                        &batch,
                        &h.protos,
                        &h.current,
                        &prior,
                        &loss_cfg,
                        teacher_feats.as_ref().map(|f| f.view()),
                        split,
                    )?
                }
                ClassifierHead::Cosine(h) => {
                    let out =
                        cosine_ce_loss(&batch, &h.class_ids, h.weights.view(), &prior, &loss_cfg)?;
                    let weight_scale = if t == 0 {
                        1.0
                    } else {
                        1.0 - split.distill_weight()
                    };
                    let grad_w = out.grad_weights * weight_scale;
                    let w = h.weights.as_slice_mut().expect("standard layout");
                    head_opt.step_tensors(&mut [w], &[grad_w.as_slice().expect("standard layout")]);
                    normalize_rows(&mut h.weights);
                    with_distillation(
                        out.loss,
                        batch.feats.view(),
                        teacher_feats.as_ref().map(|f| f.view()),
                        split,
                        t,
                    )?
                }
            };
            if epoch == 0 && batches == 0 {
                initial_loss = loss.value;
            }
            loss_sum += loss.value;
            batches += 1;
            let grads = encoder.backward(&cache, loss.grad_feats.view())?;
            sgd_step(encoder, &mut opt, &grads)?;
        }
        epoch_mean_loss.push(loss_sum / batches.max(1) as f64);
        opt.schedule_epoch(epoch + 1);
        head_opt.schedule_epoch(epoch + 1);

        if let ClassifierHead::Prototype(h) = head {
            if frozen_at.is_none() {
                h.current = assign_new_classes(&h.centers, &h.protos, &h.frozen, new_classes)?;
                history.push(AssignmentRecord {
                    task: t,
                    epoch: epoch + 1,
                    map: h.current.clone(),
                });
                task_history.push(h.current.clone());
                if has_stabilized(&task_history, cfg.assign_window) {
                    frozen_at = Some(epoch + 1);
                }
            }
        }
    }

    let prototype_count = match head {
        ClassifierHead::Prototype(h) => {
            h.frozen = h.current.clone();
            h.protos.len()
        }
        ClassifierHead::Cosine(h) => h.weights.nrows(),
    };

    Ok(TaskLog {
        task: t,
        new_classes: new_classes.to_vec(),
        train_counts: set.counts.clone(),
        ir,
        distill_weight: if t == 0 { 0.0 } else { split.distill_weight() },
        feat_weight: match cfg.head {
            Head::UniformPrototype => loss_cfg.feat_weight(),
            Head::CosineClassifier => 0.0,
        },
        initial_loss,
        epoch_mean_loss,
        assignment_frozen_at: frozen_at,
        final_lr: opt.learning_rate,
        prototype_count,
        memory_counts: ClassCountTable::new(),
        accuracy: f64::NAN,
    })
}

/// One run of the ablation grid.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub variant: VariantSpec,
    pub replicate: u64,
    pub output: RunOutput,
}

/// Mean and standard error of a variant over its replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub mean_a_last: f64,
    pub se_a_last: f64,
    pub mean_a_avg: f64,
    pub se_a_avg: f64,
}

pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn summarize(runs: &[AblationRun], variant: VariantSpec) -> VariantSummary {
    let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == variant).collect();
    let last: Vec<f64> = mine.iter().map(|r| r.output.metrics.a_last).collect();
    let avg: Vec<f64> = mine.iter().map(|r| r.output.metrics.a_avg).collect();
    let (mean_a_last, se_a_last) = mean_and_se(&last);
    let (mean_a_avg, se_a_avg) = mean_and_se(&avg);
    VariantSummary {
        variant: variant.tag().to_string(),
        runs: mine.len(),
        mean_a_last,
        se_a_last,
        mean_a_avg,
        se_a_avg,
    }
}

/// Runs `variants` x `replicates` configurations derived from `base`.
///
/// Replicate `i` shifts every seed by `i`, and all variants of a replicate
/// share data, class order and initialisation. Results come back in
/// variant-major order regardless of scheduling.
pub fn run_grid(
    base: &RunConfig,
    variants: &[VariantSpec],
    replicates: u64,
) -> Result<Vec<AblationRun>> {
    let jobs: Vec<(VariantSpec, u64)> = variants
        .iter()
        .flat_map(|&v| (0..replicates).map(move |i| (v, i)))
        .collect();
    jobs.into_par_iter()
        .map(|(variant, replicate)| {
            let cfg = variant.apply(&base.replicate(replicate));
            run_experiment(&cfg).map(|output| AblationRun {
                variant,
                replicate,
                output,
            })
        })
        .collect()
}

/// The six-cell head x margin grid.
pub fn run_ablation(
    base: &RunConfig,
    replicates: u64,
) -> Result<(Vec<AblationRun>, Vec<VariantSummary>)> {
    let runs = run_grid(base, &VariantSpec::GRID, replicates)?;
    let summary = VariantSpec::GRID
        .iter()
        .map(|&v| summarize(&runs, v))
        .collect();
    Ok((runs, summary))
}
