//! Plot-ready CSV and JSON outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::assignment::Assignment;
use crate::config::RunConfig;
use crate::error::Result;
use crate::harness::{AblationRun, RunOutput, VariantSummary};

pub const METRICS_HEADER: &str = "run_id,variant,seed,task,acc,ir";
pub const PROTOS_HEADER: &str = "generator,C,d,seed,min_cos_dist";

/// `metrics.csv` rows for one run, without the header.
pub fn metrics_rows(out: &RunOutput) -> String {
    let mut s = String::new();
    for log in &out.tasks {
        writeln!(
            s,
            "{},{},{},{},{:.6},{:.6}",
            out.run_id,
            out.variant.tag(),
            out.seed(),
            log.task,
            log.accuracy,
            log.ir
        )
        .expect("write to string");
    }
    s
}

pub fn metrics_csv<'a>(runs: impl IntoIterator<Item = &'a RunOutput>) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for out in runs {
        s.push_str(&metrics_rows(out));
    }
    s
}

pub fn confusion_csv(out: &RunOutput) -> String {
    let mut s = String::from("row_class,col_class,count\n");
    for (r, row) in out.metrics.confusion.iter().enumerate() {
        for (c, &count) in row.iter().enumerate() {
            writeln!(s, "{r},{c},{count}").expect("write to string");
        }
    }
    s
}

pub fn memory_csv(out: &RunOutput) -> String {
    let mut s = String::from("task,class_id,exemplar_count\n");
    for log in &out.tasks {
        for (class, count) in &log.memory_counts {
            writeln!(s, "{},{class},{count}", log.task).expect("write to string");
        }
    }
    s
}

#[derive(Serialize)]
struct HistoryEntry<'a> {
    task: usize,
    epoch: usize,
    map: &'a Assignment,
}

#[derive(Serialize)]
struct FinalReport<'a> {
    run_id: &'a str,
    variant: &'a str,
    #[serde(rename = "A_last")]
    a_last: f64,
    #[serde(rename = "A_avg")]
    a_avg: f64,
    per_task_acc: &'a [f64],
    ir: &'a [f64],
    per_class_acc: &'a [f64],
    class_order_seed: u64,
    class_order: &'a [usize],
    config: &'a RunConfig,
    assignment_history: Vec<HistoryEntry<'a>>,
    tasks: &'a [crate::harness::TaskLog],
}

pub fn final_json(out: &RunOutput) -> String {
    let report = FinalReport {
        run_id: &out.run_id,
        variant: out.variant.tag(),
        a_last: out.metrics.a_last,
        a_avg: out.metrics.a_avg,
        per_task_acc: &out.metrics.per_task_acc,
        ir: &out.metrics.ir,
        per_class_acc: &out.metrics.per_class_acc,
        class_order_seed: out.config.class_order_seed,
        class_order: &out.schedule.class_order,
        config: &out.config,
        assignment_history: out
            .assignment_history
            .iter()
            .map(|r| HistoryEntry {
                task: r.task,
                epoch: r.epoch,
                map: &r.map,
            })
            .collect(),
        tasks: &out.tasks,
    };
    serde_json::to_string_pretty(&report).expect("report serializes")
}

/// Writes metrics, final report, confusion and memory logs of one run.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv([out]))?;
    fs::write(dir.join("final.json"), final_json(out))?;
    fs::write(dir.join("confusion.csv"), confusion_csv(out))?;
    fs::write(dir.join("memory.csv"), memory_csv(out))?;
    out.encoder.save(dir.join("encoder.bin"))?;
    Ok(())
}

pub fn summary_csv(summary: &[VariantSummary]) -> String {
    let mut s = String::from("variant,runs,mean_a_last,se_a_last,mean_a_avg,se_a_avg\n");
    for v in summary {
        writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            v.variant, v.runs, v.mean_a_last, v.se_a_last, v.mean_a_avg, v.se_a_avg
        )
        .expect("write to string");
    }
    s
}

/// Fixed-width comparison table for terminals.
pub fn summary_table(summary: &[VariantSummary]) -> String {
    let mut s = format!(
        "{:<8} {:>4} {:>16} {:>16}\n",
        "variant", "runs", "A_last", "A_avg"
    );
    for v in summary {
        writeln!(
            s,
            "{:<8} {:>4} {:>9.2} ± {:<4.2} {:>9.2} ± {:<4.2}",
            v.variant,
            v.runs,
            100.0 * v.mean_a_last,
            100.0 * v.se_a_last,
            100.0 * v.mean_a_avg,
            100.0 * v.se_a_avg
        )
        .expect("write to string");
    }
    s
}

/// Writes the grid: shared metrics.csv and summary, one subdirectory per run.
pub fn write_ablation(dir: &Path, runs: &[AblationRun], summary: &[VariantSummary]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("metrics.csv"),
        metrics_csv(runs.iter().map(|r| &r.output)),
    )?;
    fs::write(dir.join("summary.csv"), summary_csv(summary))?;
    for run in runs {
        write_run(&dir.join(&run.output.run_id), &run.output)?;
    }
    Ok(())
}

/// One row of the geometry study.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProtoRow {
    pub generator: crate::geometry::Generator,
    pub classes: usize,
    pub dim: usize,
    pub seed: u64,
    pub min_cos_dist: f64,
}

pub fn protos_csv(rows: &[ProtoRow]) -> String {
    let mut s = format!("{PROTOS_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{:.9}",
            r.generator, r.classes, r.dim, r.seed, r.min_cos_dist
        )
        .expect("write to string");
    }
    s
}

/// Minimum cosine distance of every generator for each class count and seed.
///
/// Seed `s` seeds the prototype stream of every generator, so rows with the
/// same seed are drawn from the same random state.
pub fn proto_study(
    dim: usize,
    class_counts: &[usize],
    seeds: u64,
    mhe: crate::geometry::MheParams,
) -> Result<Vec<ProtoRow>> {
    use crate::geometry::{generate, min_cosine_distance, Generator};
    use rayon::prelude::*;
    let jobs: Vec<(Generator, usize, u64)> = Generator::ALL
        .iter()
        .flat_map(|&g| {
            class_counts
                .iter()
                .flat_map(move |&c| (0..seeds).map(move |s| (g, c, s)))
        })
        .collect();
    jobs.into_par_iter()
        .map(|(generator, classes, seed)| {
            let mut rng = crate::rng::stream(seed, crate::rng::Stream::Prototypes);
            let set = generate(generator, classes, dim, mhe, &mut rng)?;
            Ok(ProtoRow {
                generator,
                classes,
                dim,
                seed,
                min_cos_dist: min_cosine_distance(&set)?,
            })
        })
        .collect()
}
