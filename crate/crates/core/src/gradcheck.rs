//! Central-difference gradient checks.
//!
//! [`grad_check`] compares an analytic gradient against finite differences
//! of the loss value alone. [`run_suite`] applies it to random instances of
//! every loss and to the encoder composed with the full objective.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::Assignment;
use crate::encoder::EncoderState;
use crate::error::Result;
use crate::geometry::{gram_schmidt_extend, muller_random, Generator, PrototypeSet};
use crate::losses::{
    cosine_ce_loss, feat_loss, fkd_loss, proto_loss, total_loss, ClassPrior, ClassSplit,
    FeatureBatch, LossConfig, MarginMode,
};
use crate::rng::{seeded, SeededRng};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const PASS_THRESHOLD: f64 = 1e-4;

/// Max over coordinates of `|numeric - analytic| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Array2<f64>, analytic: ArrayView2<'_, f64>, h: f64) -> f64
where
    F: Fn(&Array2<f64>) -> f64,
{
    assert_eq!(x.dim(), analytic.dim(), "gradient shape");
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let up = f(&probe);
        probe[[r, c]] = orig - h;
        let down = f(&probe);
        probe[[r, c]] = orig;
        let numeric = (up - down) / (2.0 * h);
        let g = analytic[[r, c]];
        worst = worst.max((numeric - g).abs() / g.abs().max(1.0));
    }
    worst
}

fn unit_rows(n: usize, d: usize, rng: &mut SeededRng) -> Array2<f64> {
    muller_random(n, d, rng)
        .expect("positive dimension")
        .rows()
        .to_owned()
}

/// Labels over `classes` where every class present appears at least twice.
fn paired_labels(n: usize, classes: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| (i / 2) % classes).collect();
    for l in labels.iter_mut().skip(2 * classes) {
        *l = rng.random_range(0..classes);
    }
    labels
}

fn random_margin(rng: &mut SeededRng) -> MarginMode {
    match rng.random_range(0..3) {
        0 => MarginMode::None,
        1 => MarginMode::Fixed(rng.random_range(0.0..0.5)),
        _ => MarginMode::Dynamic,
    }
}

/// A random prototype-loss instance.
pub struct ProtoInstance {
    pub batch: FeatureBatch,
    pub protos: PrototypeSet,
    pub assignment: Assignment,
    pub prior: ClassPrior,
    pub cfg: LossConfig,
}

pub fn proto_instance(n: usize, d: usize, classes: usize, rng: &mut SeededRng) -> ProtoInstance {
    let extra = rng.random_range(0..=d.saturating_sub(classes).min(3));
    let protos = gram_schmidt_extend(
        &PrototypeSet::empty(d, Generator::GramSchmidt),
        classes + extra,
        rng,
    )
    .expect("classes + extra <= d");
    let mut rows: Vec<usize> = (0..classes + extra).collect();
    for i in (1..rows.len()).rev() {
        let j = rng.random_range(0..=i);
        rows.swap(i, j);
    }
    let assignment =
        Assignment::from_pairs((0..classes).map(|c| (c, rows[c]))).expect("distinct rows");
    let counts: BTreeMap<usize, usize> = (0..classes)
        .map(|c| (c, rng.random_range(1..500)))
        .collect();
    ProtoInstance {
        batch: FeatureBatch::new(unit_rows(n, d, rng), paired_labels(n, classes, rng))
            .expect("shapes"),
        protos,
        assignment,
        prior: ClassPrior::from_counts(&counts).expect("positive counts"),
        cfg: LossConfig {
            temperature: rng.random_range(0.1..1.0),
            margin: random_margin(rng),
            feat_weight_base: 0.5,
            task_index: rng.random_range(0..4),
        },
    }
}

pub fn check_proto(inst: &ProtoInstance, h: f64) -> Result<f64> {
    let analytic = proto_loss(
        &inst.batch,
        &inst.protos,
        &inst.assignment,
        &inst.prior,
        &inst.cfg,
    )?;
    Ok(grad_check(
        |x| {
            let b = FeatureBatch::new(x.clone(), inst.batch.labels.clone()).expect("shape");
            proto_loss(&b, &inst.protos, &inst.assignment, &inst.prior, &inst.cfg)
                .expect("valid instance")
                .value
        },
        &inst.batch.feats,
        analytic.grad_feats.view(),
        h,
    ))
}

pub fn check_feat(inst: &ProtoInstance, h: f64) -> Result<f64> {
    let analytic = feat_loss(&inst.batch, &inst.cfg)?;
    Ok(grad_check(
        |x| {
            let b = FeatureBatch::new(x.clone(), inst.batch.labels.clone()).expect("shape");
            feat_loss(&b, &inst.cfg).expect("valid instance").value
        },
        &inst.batch.feats,
        analytic.grad_feats.view(),
        h,
    ))
}

pub fn check_fkd(n: usize, d: usize, rng: &mut SeededRng, h: f64) -> Result<f64> {
    let student = unit_rows(n, d, rng);
    let teacher = unit_rows(n, d, rng);
    let analytic = fkd_loss(student.view(), teacher.view())?;
    Ok(grad_check(
        |x| fkd_loss(x.view(), teacher.view()).expect("shape").value,
        &student,
        analytic.grad_feats.view(),
        h,
    ))
}

/// Checks both the feature and the weight gradient of the cosine classifier.
pub fn check_cosine(inst: &ProtoInstance, rng: &mut SeededRng, h: f64) -> Result<f64> {
    let class_ids: Vec<usize> = inst.assignment.classes().collect();
    let weights = unit_rows(class_ids.len(), inst.batch.dim(), rng);
    let analytic = cosine_ce_loss(
        &inst.batch,
        &class_ids,
        weights.view(),
        &inst.prior,
        &inst.cfg,
    )?;
    let feats_err = grad_check(
        |x| {
            let b = FeatureBatch::new(x.clone(), inst.batch.labels.clone()).expect("shape");
            cosine_ce_loss(&b, &class_ids, weights.view(), &inst.prior, &inst.cfg)
                .expect("valid instance")
                .loss
                .value
        },
        &inst.batch.feats,
        analytic.loss.grad_feats.view(),
        h,
    );
    let weights_err = grad_check(
        |w| {
            cosine_ce_loss(&inst.batch, &class_ids, w.view(), &inst.prior, &inst.cfg)
                .expect("valid instance")
                .loss
                .value
        },
        &weights,
        analytic.grad_weights.view(),
        h,
    );
    Ok(feats_err.max(weights_err))
}

/// Outcome of an end-to-end encoder check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU and were not compared.
    pub skipped_kinks: usize,
}

fn relu_pattern(state: &EncoderState, inputs: ArrayView2<'_, f64>) -> Vec<bool> {
    let mut act = inputs.to_owned();
    let mut pattern = Vec::new();
    for l in 0..state.weights().len() - 1 {
        let pre = act.dot(&state.weights()[l].t()) + &state.biases()[l];
        pattern.extend(pre.iter().map(|&p| p > 0.0));
        act = pre.mapv(|x| x.max(0.0));
    }
    pattern
}

/// Finite differences of the full objective with respect to every encoder
/// parameter, through forward, normalisation, total loss and backward.
pub fn check_encoder(
    layer_sizes: &[usize],
    n: usize,
    rng: &mut SeededRng,
    h: f64,
) -> Result<EncoderCheck> {
    let d = *layer_sizes.last().expect("sizes");
    let classes = 4.min(d);
    let state = EncoderState::new(layer_sizes, rng)?;
    let inputs = Array2::from_shape_fn((n, layer_sizes[0]), |_| rng.random_range(-1.0..1.0));
    let labels = paired_labels(n, classes, rng);
    let inst = proto_instance(n, d, classes, rng);
    let mut cfg = inst.cfg;
    cfg.task_index = 1;
    let teacher = unit_rows(n, d, rng);
    let split = ClassSplit {
        old: 2,
        total: classes,
    };

    let objective = |s: &EncoderState| -> Result<(f64, Array2<f64>)> {
        let cache = s.forward(inputs.view())?;
        let batch = FeatureBatch::new(cache.feats().clone(), labels.clone())?;
        let loss = total_loss(
            &batch,
            &inst.protos,
            &inst.assignment,
            &inst.prior,
            &cfg,
            Some(teacher.view()),
            split,
        )?;
        Ok((loss.value, loss.grad_feats))
    };

    let cache = state.forward(inputs.view())?;
    let (_, grad_feats) = objective(&state)?;
    let grads = state.backward(&cache, grad_feats.view())?;
    let base_pattern = relu_pattern(&state, inputs.view());

    let mut probe = state.clone();
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for i in 0..state.param_count() {
        let orig = state.param(i);
        probe.set_param(i, orig + h);
        let up_pattern = relu_pattern(&probe, inputs.view());
        let up = objective(&probe)?.0;
        probe.set_param(i, orig - h);
        let down_pattern = relu_pattern(&probe, inputs.view());
        let down = objective(&probe)?.0;
        probe.set_param(i, orig);
        if up_pattern != base_pattern || down_pattern != base_pattern {
            skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        let g = grads.flat(i);
        worst = worst.max((numeric - g).abs() / g.abs().max(1.0));
    }
    Ok(EncoderCheck {
        max_rel_error: worst,
        checked: state.param_count() - skipped,
        skipped_kinks: skipped,
    })
}

/// Worst error per check across all instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub instances: usize,
    pub step: f64,
    pub threshold: f64,
    pub proto_loss: f64,
    pub feat_loss: f64,
    pub fkd_loss: f64,
    pub cosine_ce_loss: f64,
    pub encoder: f64,
    pub encoder_skipped_kinks: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        [
            self.proto_loss,
            self.feat_loss,
            self.fkd_loss,
            self.cosine_ce_loss,
            self.encoder,
        ]
        .iter()
        .all(|&e| e < self.threshold)
    }
}

/// Runs every check on `instances` random instances (n=8, d=16, C=4 for the
/// losses; encoder widths cycling up to [32, 64, 16]).
pub fn run_suite(instances: usize, seed: u64, h: f64) -> Result<GradReport> {
    let mut rng = seeded(seed);
    let mut report = GradReport {
        instances,
        step: h,
        threshold: PASS_THRESHOLD,
        proto_loss: 0.0,
        feat_loss: 0.0,
        fkd_loss: 0.0,
        cosine_ce_loss: 0.0,
        encoder: 0.0,
        encoder_skipped_kinks: 0,
    };
    const NETS: [&[usize]; 4] = [&[6, 10, 8], &[8, 12, 12, 8], &[16, 24, 16], &[32, 64, 16]];
    for i in 0..instances {
        let inst = proto_instance(8, 16, 4, &mut rng);
        report.proto_loss = report.proto_loss.max(check_proto(&inst, h)?);
        report.feat_loss = report.feat_loss.max(check_feat(&inst, h)?);
        report.fkd_loss = report.fkd_loss.max(check_fkd(8, 16, &mut rng, h)?);
        report.cosine_ce_loss = report.cosine_ce_loss.max(check_cosine(&inst, &mut rng, h)?);
        // The widest net is costly; visit it every fourth instance.
        let enc = check_encoder(NETS[i % NETS.len()], 6, &mut rng, h)?;
        report.encoder = report.encoder.max(enc.max_rel_error);
        report.encoder_skipped_kinks += enc.skipped_kinks;
    }
    Ok(report)
}
