//! `run`, `sweep`, `report` and `eval`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use exssnet::harness::{run_continual, task_accuracy, RunOutput};
use exssnet::persistence::{checkpoint_bytes, load_checkpoint, save_checkpoint, storage_bits_for_shapes};
use exssnet::Mode;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ConfigFile;
use crate::output::*;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Density,
    Overlap,
    Tasks,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Density => "mask_density",
            Axis::Overlap => "forced_overlap",
            Axis::Tasks => "n_tasks",
        }
    }

    fn apply(self, cfg: &mut ConfigFile, value: f64) -> Result<(), CliError> {
        match self {
            Axis::Density => cfg.mask_density = value,
            Axis::Overlap => cfg.forced_overlap = value,
            Axis::Tasks => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(CliError::Config(format!("task count must be a positive integer, got {value}")));
                }
                cfg.n_tasks = value as usize;
            }
        }
        cfg.validate()
    }
}

/// Timestamped sidecar log; the only output that differs between reruns.
struct RunLog(fs::File);

impl RunLog {
    fn create(out: &Path) -> Result<Self, CliError> {
        Ok(Self(fs::File::create(out.join(RUN_LOG))?))
    }

    fn line(&mut self, msg: &str) {
        let _ = writeln!(self.0, "{} {msg}", chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true));
    }
}

fn execute(cfg: &ConfigFile) -> Result<RunOutput, CliError> {
    let (data, tasks) = cfg.tasks(cfg.seed)?;
    Ok(run_continual(&data, &tasks, &cfg.run_config(&data, &tasks))?)
}

fn run_id(cfg: &ConfigFile) -> String {
    format!("{}-s{}", cfg.mode, cfg.seed)
}

pub fn run(cfg: &ConfigFile) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out)?;
    let mut log = RunLog::create(&cfg.out)?;
    log.line(&format!("run {} dataset {:?}", run_id(cfg), cfg.dataset));
    let start = Instant::now();
    let out = execute(cfg)?;
    for t in &out.report.timings {
        log.line(&format!(
            "task {} mask {:.3}s weights {:.3}s eval {:.3}s",
            t.task_id, t.mask_secs, t.weight_secs, t.eval_secs
        ));
    }
    let id = run_id(cfg);
    let report = &out.report;
    write_csv(&cfg.out.join(METRICS_CSV), &metric_rows(&id, report))?;
    let summary = summary_row(&id, report);
    write_csv(&cfg.out.join(SUMMARY_CSV), std::slice::from_ref(&summary))?;
    if cfg.record_curves {
        write_csv(&cfg.out.join(CURVES_CSV), &curve_rows(&id, report))?;
    }
    let bytes = save_checkpoint(cfg.out.join(CHECKPOINT), &out.model, &out.registry, cfg.mask_density as f32)?;
    log.line(&format!("checkpoint {bytes} bytes, total {:.3}s", start.elapsed().as_secs_f64()));
    println!(
        "{id}: avg_accuracy {:.4} forgetting {} mean_sparse_overlap {:.4}",
        summary.avg_accuracy,
        summary.forgetting.map_or("-".to_string(), |f| format!("{f:.4}")),
        summary.mean_sparse_overlap
    );
    Ok(())
}

fn threads() -> usize {
    std::env::var("EXSS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn sweep(base: &ConfigFile, axis: Axis, values: &[f64], modes: &[Mode]) -> Result<(), CliError> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let mut jobs = Vec::new();
    for &v in values {
        for &mode in modes {
            for seed in base.sweep_seeds() {
                let mut cfg = base.clone();
                axis.apply(&mut cfg, v)?;
                cfg.mode = mode;
                cfg.seed = seed;
                jobs.push((v, cfg));
            }
        }
    }
    fs::create_dir_all(&base.out)?;
    let mut log = RunLog::create(&base.out)?;
    log.line(&format!("sweep {} over {values:?}, {} runs, {} threads", axis.name(), jobs.len(), threads()));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads())
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let results: Vec<Result<(String, RunOutput), CliError>> = pool.install(|| {
        jobs.par_iter()
            .map(|(v, cfg)| Ok((format!("{}={v}/{}", axis.name(), run_id(cfg)), execute(cfg)?)))
            .collect()
    });

    let mut metrics = Vec::new();
    let mut summaries = Vec::new();
    let mut groups: BTreeMap<(usize, Mode), Vec<SummaryRow>> = BTreeMap::new();
    for ((v, _), r) in jobs.iter().zip(results) {
        let (id, out) = r?;
        log.line(&format!("{id} done in {:.3}s", out.report.timings.iter().map(|t| t.mask_secs + t.weight_secs + t.eval_secs).sum::<f64>()));
        metrics.extend(metric_rows(&id, &out.report));
        let s = summary_row(&id, &out.report);
        let value_index = values.iter().position(|x| x == v).expect("job values come from the list");
        groups.entry((value_index, out.report.config.train.mode)).or_default().push(s.clone());
        summaries.push(s);
    }
    let sweep_rows: Vec<SweepRow> = groups
        .iter()
        .map(|(&(vi, mode), rows)| {
            let n = rows.len() as f64;
            let forgetting: Option<Vec<f64>> = rows.iter().map(|r| r.forgetting).collect();
            SweepRow {
                axis: axis.name().to_string(),
                value: values[vi],
                mode: mode.to_string(),
                seeds: rows.len(),
                avg_accuracy: rows.iter().map(|r| r.avg_accuracy).sum::<f64>() / n,
                forgetting: forgetting.map(|f| f.iter().sum::<f64>() / n),
                mean_sparse_overlap: rows.iter().map(|r| r.mean_sparse_overlap).sum::<f64>() / n,
            }
        })
        .collect();
    write_csv(&base.out.join(METRICS_CSV), &metrics)?;
    write_csv(&base.out.join(SUMMARY_CSV), &summaries)?;
    write_csv(&base.out.join(SWEEP_CSV), &sweep_rows)?;

    let series: Vec<(String, Vec<(f64, f64)>)> = modes
        .iter()
        .map(|m| {
            let mut pts: Vec<(f64, f64)> =
                sweep_rows.iter().filter(|r| r.mode == m.as_str()).map(|r| (r.value, r.avg_accuracy)).collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (m.to_string(), pts)
        })
        .collect();
    let svg = line_chart(&format!("average accuracy vs {}", axis.name()), axis.name(), "average accuracy", &series);
    fs::write(base.out.join(SWEEP_SVG), svg)?;

    for r in &sweep_rows {
        println!("{}={} {}: avg_accuracy {:.4} over {} seeds", r.axis, r.value, r.mode, r.avg_accuracy, r.seeds);
    }
    Ok(())
}

/// Checkpoint summary; all fractions are of the whole weight count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: usize,
    pub kept: usize,
    pub free: usize,
    pub density: f64,
    pub sparse_overlap: f64,
}

pub fn report(path: &Path, out: Option<&Path>) -> Result<String, CliError> {
    let (model, registry, meta) = load_checkpoint(path)?;
    let shapes = model.shapes();
    let params = model.param_count();
    let ids = registry.task_ids();
    let mut text = String::new();
    let _ = writeln!(text, "checkpoint {} (version {}, density {})", path.display(), meta.version, meta.density);
    let _ = writeln!(text, "layers {shapes:?}, {params} weights, {} tasks", ids.len());

    let mut rows = Vec::new();
    let mut previous = Vec::new();
    for &id in &ids {
        let m = registry.task_mask(id)?;
        let f = registry.free_mask(id)?;
        let kept = m.count_ones();
        let so = if kept == 0 { 0.0 } else { (kept - f.count_ones()) as f64 / kept as f64 };
        rows.push(ReportRow { task: id, kept, free: f.count_ones(), density: m.density(), sparse_overlap: so });
        previous.push(m);
    }
    if !ids.is_empty() {
        let _ = writeln!(text, "\npairwise overlap |M_i & M_j| / |M_i|");
        let _ = write!(text, "{:>6}", "");
        for id in &ids {
            let _ = write!(text, "{:>8}", format!("t{id}"));
        }
        let _ = writeln!(text);
        for (i, mi) in previous.iter().enumerate() {
            let _ = write!(text, "{:>6}", format!("t{}", ids[i]));
            for mj in &previous {
                let both = mi.and(mj)?.count_ones();
                let _ = write!(text, "{:>8.4}", both as f64 / mi.count_ones().max(1) as f64);
            }
            let _ = writeln!(text);
        }
        let _ = writeln!(text, "\n{:>6}{:>10}{:>10}{:>10}{:>10}", "task", "kept", "free", "density", "overlap");
        for r in &rows {
            let _ = writeln!(text, "{:>6}{:>10}{:>10}{:>10.4}{:>10.4}", format!("t{}", r.task), r.kept, r.free, r.density, r.sparse_overlap);
        }
    }
    let used = registry.union_of_task_masks(&shapes)?.count_ones();
    let _ = writeln!(
        text,
        "\nused weights {used} ({:.4}), free capacity remaining {:.4}",
        used as f64 / params as f64,
        1.0 - used as f64 / params as f64
    );

    let file_bytes = fs::metadata(path)?.len();
    let expected = checkpoint_bytes(&shapes, ids.len());
    let _ = writeln!(text, "file size {file_bytes} bytes (layout formula {expected})");
    if meta.density > 0.0 && !ids.is_empty() {
        let bits = storage_bits_for_shapes(&shapes, meta.density as f64, ids.len() as u64)?;
        let _ = writeln!(
            text,
            "storage_bits {bits} ({} bytes); file minus theoretical {} bytes",
            bits.div_ceil(8),
            file_bytes as i64 - bits.div_ceil(8) as i64
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_csv(&dir.join("report.csv"), &rows)?;
    }
    Ok(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: usize,
    pub accuracy: f64,
}

/// Test accuracy of every checkpointed task on the config's task sequence.
pub fn eval(cfg: &ConfigFile, checkpoint: &Path) -> Result<Vec<EvalRow>, CliError> {
    let (model, registry, _) = load_checkpoint(checkpoint)?;
    let (data, tasks) = cfg.tasks(cfg.seed)?;
    if model.input_width() != data.features() {
        return Err(CliError::Config(format!(
            "checkpoint expects {} features, dataset has {}",
            model.input_width(),
            data.features()
        )));
    }
    let mut rows = Vec::new();
    for id in registry.task_ids() {
        let spec = tasks
            .get(id)
            .ok_or_else(|| CliError::Config(format!("checkpoint task {id} is beyond the configured {} tasks", tasks.len())))?;
        let acc = task_accuracy(&model, registry.task_mask(id)?, &data, spec, &spec.test)?;
        rows.push(EvalRow { task: id, accuracy: acc });
    }
    fs::create_dir_all(&cfg.out)?;
    write_csv(&cfg.out.join("eval.csv"), &rows)?;
    Ok(rows)
}
