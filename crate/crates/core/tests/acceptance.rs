//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p upcl-core --test acceptance`.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use upcl_core::assignment::solve_assignment;
use upcl_core::config::{Head, MarginSetting, MemoryKind};
use upcl_core::geometry::{
    gram_schmidt_extend, min_cosine_distance, simplex_etf, Generator, MheParams, PrototypeSet,
};
use upcl_core::gradcheck::{self, PASS_THRESHOLD};
use upcl_core::harness::{
    run_ablation, run_experiment, run_grid, summarize, AblationRun, VariantSpec,
};
use upcl_core::losses::{
    feat_loss, fkd_loss, proto_loss, total_loss, upcl_loss, ClassPrior, ClassSplit, FeatureBatch,
    LossConfig, MarginMode,
};
use upcl_core::memory::{herding_select, imbalance_ratio};
use upcl_core::report::{metrics_csv, proto_study};
use upcl_core::rng::seeded;
use upcl_core::{Assignment, RunConfig, UnitVector};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

// 1 -------------------------------------------------------------------------

fn geometry_identities() -> Outcome {
    let start = Instant::now();
    let mut worst_dot: f64 = 0.0;
    let mut worst_mcd: f64 = 0.0;
    for &c in &[2usize, 3, 4, 8, 16] {
        let etf = simplex_etf(c, 64, &mut seeded(c as u64)).unwrap();
        let target = -1.0 / (c as f64 - 1.0);
        let gram = etf.rows().dot(&etf.rows().t());
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    worst_dot = worst_dot.max((gram[[i, j]] - target).abs());
                }
            }
        }
        let mcd = min_cosine_distance(&etf).unwrap();
        worst_mcd = worst_mcd.max((mcd - (1.0 + 1.0 / (c as f64 - 1.0))).abs());
    }
    let mut worst_gs: f64 = 0.0;
    for c in 2..=16 {
        let gs = gram_schmidt_extend(
            &PrototypeSet::empty(16, Generator::GramSchmidt),
            c,
            &mut seeded(c as u64),
        )
        .unwrap();
        worst_gs = worst_gs.max((min_cosine_distance(&gs).unwrap() - 1.0).abs());
    }
    let elapsed = start.elapsed();
    let pass =
        worst_dot < 1e-6 && worst_mcd < 1e-6 && worst_gs < 1e-6 && elapsed < Duration::from_secs(1);
    outcome(
        pass,
        format!(
            "etf |dot+1/(C-1)| {worst_dot:.1e}, etf mcd err {worst_mcd:.1e}, gs mcd err {worst_gs:.1e}, {}",
            secs(elapsed)
        ),
    )
}

// 2 -------------------------------------------------------------------------

fn generator_ranking() -> Outcome {
    let start = Instant::now();
    let sizes = [4usize, 8, 16, 32];
    let rows = proto_study(64, &sizes, 20, MheParams::default()).unwrap();
    let elapsed = start.elapsed();
    let mean = |g: Generator, c: usize| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.generator == g && r.classes == c)
            .map(|r| r.min_cos_dist)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let mut pass = elapsed < Duration::from_secs(60);
    let mut parts = Vec::new();
    for &c in &sizes {
        let etf = mean(Generator::SimplexEtf, c);
        let gs = mean(Generator::GramSchmidt, c);
        let mhe = mean(Generator::Mhe, c);
        let muller = mean(Generator::Muller, c);
        let ok = etf >= gs && gs >= mhe && mhe >= muller && gs - muller > 0.05;
        pass &= ok;
        parts.push(format!(
            "C={c} etf {etf:.3} gs {gs:.3} mhe {mhe:.3} muller {muller:.3}{}",
            if ok { "" } else { " (order broken)" }
        ));
    }
    outcome(pass, format!("{}; {}", parts.join("; "), secs(elapsed)))
}

// 3 -------------------------------------------------------------------------

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let report = gradcheck::run_suite(50, 2024, gradcheck::DEFAULT_STEP).unwrap();
    let elapsed = start.elapsed();
    let pass = report.instances >= 50
        && report.passed()
        && report.threshold == PASS_THRESHOLD
        && elapsed < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "{} instances: proto {:.1e} feat {:.1e} fkd {:.1e} cosine {:.1e} encoder {:.1e} (kinks skipped {}), {}",
            report.instances,
            report.proto_loss,
            report.feat_loss,
            report.fkd_loss,
            report.cosine_ce_loss,
            report.encoder,
            report.encoder_skipped_kinks,
            secs(elapsed)
        ),
    )
}

// 4 -------------------------------------------------------------------------

/// Lexicographically first minimum-cost injection by enumeration.
fn brute_force_assignment(cost: ArrayView2<'_, f64>) -> Vec<usize> {
    fn walk(
        cost: ArrayView2<'_, f64>,
        row: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        acc: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if row == cost.nrows() {
            if acc < best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for col in 0..cost.ncols() {
            if !used[col] {
                used[col] = true;
                cur.push(col);
                walk(cost, row + 1, used, cur, acc + cost[[row, col]], best);
                cur.pop();
                used[col] = false;
            }
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    walk(
        cost,
        0,
        &mut vec![false; cost.ncols()],
        &mut Vec::new(),
        0.0,
        &mut best,
    );
    best.1
}

/// Greedy herding written against whole-matrix mean arithmetic.
fn herding_oracle(feats: ArrayView2<'_, f64>, m: usize) -> Vec<usize> {
    let mu = feats.mean_axis(Axis(0)).unwrap();
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < m.min(feats.nrows()) {
        let k = chosen.len() + 1;
        let sum: Array1<f64> = chosen
            .iter()
            .fold(Array1::zeros(feats.ncols()), |s, &i| s + feats.row(i));
        let best = (0..feats.nrows())
            .filter(|i| !chosen.contains(i))
            .map(|i| {
                let candidate = (&sum + &feats.row(i)) / k as f64;
                let gap = &mu - &candidate;
                (i, gap.dot(&gap))
            })
            .fold(None::<(usize, f64)>, |acc, (i, d)| match acc {
                Some((_, bd)) if bd <= d => acc,
                _ => Some((i, d)),
            })
            .unwrap();
        chosen.push(best.0);
    }
    chosen
}

fn oracle_equivalence() -> Outcome {
    let mut rng = seeded(44);
    let mut assignment_mismatch = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(n..=6);
        let cost = Array2::from_shape_fn((n, m), |_| rng.random_range(0.0..10.0));
        if solve_assignment(cost.view()).unwrap() != brute_force_assignment(cost.view()) {
            assignment_mismatch += 1;
        }
    }
    let mut herding_mismatch = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=30);
        let d = rng.random_range(1..=8);
        let m = rng.random_range(1..=n + 2);
        let feats = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        if herding_select(feats.view(), m).unwrap() != herding_oracle(feats.view(), m) {
            herding_mismatch += 1;
        }
    }
    outcome(
        assignment_mismatch == 0 && herding_mismatch == 0,
        format!("assignment mismatches {assignment_mismatch}/100, herding mismatches {herding_mismatch}/100"),
    )
}

// 5 -------------------------------------------------------------------------

fn random_unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut m: Array2<f64> = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    for mut row in m.rows_mut() {
        let norm: f64 = row.dot(&row);
        let norm = norm.sqrt();
        row /= norm;
    }
    m
}

fn loss_identities() -> Outcome {
    let mut rng = seeded(55);
    let mut dm_vs_none: f64 = 0.0;
    let mut upcl_exact = true;
    let mut total_exact = true;
    for trial in 0..50 {
        let d = 16;
        let classes = rng.random_range(2..=6);
        let protos = gram_schmidt_extend(
            &PrototypeSet::empty(d, Generator::GramSchmidt),
            classes,
            &mut rng,
        )
        .unwrap();
        let assignment = Assignment::from_pairs((0..classes).map(|c| (c, c))).unwrap();
        let n = 12;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let batch = FeatureBatch::new(random_unit_rows(n, d, &mut rng), labels).unwrap();
        let t = trial % 4;
        let dyn_cfg = LossConfig {
            temperature: rng.random_range(0.05..1.0),
            margin: MarginMode::Dynamic,
            feat_weight_base: 0.5,
            task_index: t,
        };
        let none_cfg = LossConfig {
            margin: MarginMode::None,
            ..dyn_cfg
        };
        let uniform = ClassPrior::uniform(0..classes).unwrap();
        let a = proto_loss(&batch, &protos, &assignment, &uniform, &dyn_cfg).unwrap();
        let b = proto_loss(&batch, &protos, &assignment, &uniform, &none_cfg).unwrap();
        dm_vs_none = dm_vs_none.max((a.value - b.value).abs());
        dm_vs_none = dm_vs_none.max(
            (&a.grad_feats - &b.grad_feats)
                .iter()
                .fold(0.0, |m, x| m.max(x.abs())),
        );

        let counts: BTreeMap<usize, usize> = (0..classes)
            .map(|c| (c, rng.random_range(1..300)))
            .collect();
        let prior = ClassPrior::from_counts(&counts).unwrap();
        let proto = proto_loss(&batch, &protos, &assignment, &prior, &dyn_cfg).unwrap();
        let feat = feat_loss(&batch, &dyn_cfg).unwrap();
        let upcl = upcl_loss(&batch, &protos, &assignment, &prior, &dyn_cfg).unwrap();
        upcl_exact &= upcl.value == proto.value + 0.5f64.powi(t as i32) * feat.value;

        let teacher = random_unit_rows(n, d, &mut rng);
        let old = rng.random_range(1..classes);
        let split = ClassSplit {
            old,
            total: classes,
        };
        let task_cfg = LossConfig {
            task_index: t.max(1),
            ..dyn_cfg
        };
        let upcl_t = upcl_loss(&batch, &protos, &assignment, &prior, &task_cfg).unwrap();
        let fkd = fkd_loss(batch.feats.view(), teacher.view()).unwrap();
        let total = total_loss(
            &batch,
            &protos,
            &assignment,
            &prior,
            &task_cfg,
            Some(teacher.view()),
            split,
        )
        .unwrap();
        let lambda = old as f64 / classes as f64;
        total_exact &= total.value == (1.0 - lambda) * upcl_t.value + lambda * fkd.value;
    }

    // Hand-worked toy values.
    let e1e2 = PrototypeSet::from_rows(
        2,
        vec![
            UnitVector::new(vec![1.0, 0.0]).unwrap(),
            UnitVector::new(vec![0.0, 1.0]).unwrap(),
        ],
        Generator::GramSchmidt,
    )
    .unwrap();
    let assign = Assignment::from_pairs([(0, 0), (1, 1)]).unwrap();
    let unit_tau = LossConfig {
        temperature: 1.0,
        margin: MarginMode::Dynamic,
        feat_weight_base: 0.5,
        task_index: 0,
    };
    let single = FeatureBatch::new(ndarray::array![[1.0, 0.0]], vec![0]).unwrap();
    let uniform = proto_loss(
        &single,
        &e1e2,
        &assign,
        &ClassPrior::uniform([0, 1]).unwrap(),
        &unit_tau,
    )
    .unwrap()
    .value;
    let skewed_prior = ClassPrior::from_counts(&BTreeMap::from([(0, 8), (1, 2)])).unwrap();
    let skewed = proto_loss(&single, &e1e2, &assign, &skewed_prior, &unit_tau)
        .unwrap()
        .value;
    let triple = FeatureBatch::new(
        ndarray::array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        vec![0, 0, 1],
    )
    .unwrap();
    let supcon = feat_loss(&triple, &unit_tau).unwrap().value;
    let toys_ok = (uniform - 0.3133).abs() < 1e-4
        && (skewed - 0.0880).abs() < 1e-4
        && (supcon - 0.3133).abs() < 1e-4;

    outcome(
        dm_vs_none < 1e-10 && upcl_exact && total_exact && toys_ok,
        format!(
            "dynamic vs none {dm_vs_none:.1e}, upcl exact {upcl_exact}, total exact {total_exact}, toys {uniform:.4}/{skewed:.4}/{supcon:.4}"
        ),
    )
}

// 6, 7, 8 --------------------------------------------------------------------

struct GridRuns {
    main: Vec<AblationRun>,
    elapsed: Duration,
}

fn default_grid() -> GridRuns {
    let start = Instant::now();
    let (main, _) = run_ablation(&RunConfig::default(), 5).unwrap();
    GridRuns {
        main,
        elapsed: start.elapsed(),
    }
}

fn variant(head: Head, margin: MarginSetting) -> VariantSpec {
    VariantSpec { head, margin }
}

fn ablation_direction(grid: &GridRuns) -> Outcome {
    let s = |v| summarize(&grid.main, v);
    let cos = s(variant(Head::CosineClassifier, MarginSetting::None));
    let up = s(variant(Head::UniformPrototype, MarginSetting::None));
    let fm = s(variant(Head::UniformPrototype, MarginSetting::Fixed));
    let dm = s(variant(Head::UniformPrototype, MarginSetting::Dynamic));
    // a >= b up to one standard error of the difference
    let geq = |a: &upcl_core::harness::VariantSummary, b: &upcl_core::harness::VariantSummary| {
        a.mean_a_last >= b.mean_a_last - (a.se_a_last.powi(2) + b.se_a_last.powi(2)).sqrt()
    };
    let gap = 100.0 * (dm.mean_a_last - cos.mean_a_last);
    let cells = VariantSpec::GRID
        .iter()
        .map(|&v| s(v))
        .filter(|x| x.runs == 5)
        .count();
    let pass = gap >= 10.0
        && geq(&dm, &fm)
        && geq(&fm, &up)
        && cells == 6
        && grid.elapsed < Duration::from_secs(600);
    let table: Vec<String> = VariantSpec::GRID
        .iter()
        .map(|&v| {
            let x = s(v);
            format!(
                "{} {:.1}±{:.1}",
                x.variant,
                100.0 * x.mean_a_last,
                100.0 * x.se_a_last
            )
        })
        .collect();
    outcome(
        pass,
        format!(
            "gap up+dm - cos {gap:.1} pts; {}; {}",
            table.join(", "),
            secs(grid.elapsed)
        ),
    )
}

fn imbalance_dynamics(grid: &GridRuns) -> Outcome {
    let mut monotone = true;
    let mut exact = true;
    for run in &grid.main {
        let ir = &run.output.metrics.ir;
        monotone &= ir.windows(2).all(|w| w[1] >= w[0]);
        for (log, &r) in run.output.tasks.iter().zip(ir) {
            exact &= r == imbalance_ratio(&log.train_counts).unwrap();
        }
    }
    let mut cfg = RunConfig::default();
    cfg.memory.strategy = MemoryKind::FixedPerClass;
    cfg.memory.size = 5;
    let per_class = run_experiment(&cfg).unwrap();
    let ir = &per_class.metrics.ir;
    let constant = ir[1..].windows(2).all(|w| w[0] == w[1]);
    for (log, &r) in per_class.tasks.iter().zip(ir) {
        exact &= r == imbalance_ratio(&log.train_counts).unwrap();
    }
    outcome(
        monotone && exact && constant,
        format!(
            "fixed-total IR non-decreasing {monotone}, IR = max/min {exact}, fixed-per-class IR {:?}",
            ir
        ),
    )
}

fn memory_trend(grid: &GridRuns) -> Outcome {
    let dm = variant(Head::UniformPrototype, MarginSetting::Dynamic);
    let cos = variant(Head::CosineClassifier, MarginSetting::None);
    let mut by_size = BTreeMap::new();
    for size in [40usize, 160] {
        let mut cfg = RunConfig::default();
        cfg.memory.size = size;
        by_size.insert(size, run_grid(&cfg, &[dm, cos], 5).unwrap());
    }
    let mean = |runs: &[AblationRun], v| summarize(runs, v).mean_a_last;
    let dm_curve = [
        mean(&by_size[&40], dm),
        mean(&grid.main, dm),
        mean(&by_size[&160], dm),
    ];
    let cos_curve = [
        mean(&by_size[&40], cos),
        mean(&grid.main, cos),
        mean(&by_size[&160], cos),
    ];
    let non_decreasing = dm_curve.windows(2).all(|w| w[1] >= w[0]);
    let dm_drop = dm_curve[2] - dm_curve[0];
    let cos_drop = cos_curve[2] - cos_curve[0];
    outcome(
        non_decreasing && dm_drop < cos_drop,
        format!(
            "up+dm A_last {:.1}/{:.1}/{:.1}, cos {:.1}/{:.1}/{:.1} at 40/80/160; drop up+dm {:.1} vs cos {:.1}",
            100.0 * dm_curve[0],
            100.0 * dm_curve[1],
            100.0 * dm_curve[2],
            100.0 * cos_curve[0],
            100.0 * cos_curve[1],
            100.0 * cos_curve[2],
            100.0 * dm_drop,
            100.0 * cos_drop
        ),
    )
}

// 9 -------------------------------------------------------------------------

fn determinism() -> Outcome {
    let cfg = RunConfig::default();
    let a = metrics_csv([&run_experiment(&cfg).unwrap()]);
    let b = metrics_csv([&run_experiment(&cfg).unwrap()]);
    // and again through the echoed config
    let echoed = RunConfig::from_json_str(&cfg.to_json_pretty()).unwrap();
    let c = metrics_csv([&run_experiment(&echoed).unwrap()]);
    outcome(
        a.as_bytes() == b.as_bytes() && a.as_bytes() == c.as_bytes(),
        format!(
            "{} bytes, identical across 3 runs: {}",
            a.len(),
            a == b && a == c
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture are accepted and ignored.
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "geometry identities", guarded(geometry_identities)),
        (2, "generator ranking", guarded(generator_ranking)),
        (3, "gradient fidelity", guarded(gradient_fidelity)),
        (4, "oracle equivalence", guarded(oracle_equivalence)),
        (5, "loss identities", guarded(loss_identities)),
    ];
    let grid = panic::catch_unwind(default_grid).ok();
    let needs_grid = |f: fn(&GridRuns) -> Outcome| match &grid {
        Some(g) => guarded(|| f(g)),
        None => outcome(false, "ablation grid failed to run"),
    };
    results.push((
        6,
        "head/margin ablation direction",
        needs_grid(ablation_direction),
    ));
    results.push((
        7,
        "imbalance ratio dynamics",
        needs_grid(imbalance_dynamics),
    ));
    results.push((8, "memory size trend", needs_grid(memory_trend)));
    results.push((9, "determinism", guarded(determinism)));

    let mut failed = 0;
    for (id, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id} [{tag}] {name}: {}", o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!(
        "acceptance: {}/{} passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
