//! Experiment runner and report emitter: drives the configured method over
//! all rotated sequences and seeds, writing accuracy matrices, loss traces,
//! selection-score rankings, discrepancy tables, and metric summaries as CSV.

use crate::error::{Error, Result};
use crate::metrics::{aggregate, MetricTriple, Regime};
use crate::protocol::{
    make_sequences, ExperimentConfig, ExperimentContext, Method, SequenceRun, SequenceSpec,
};
use crate::selection::rank_reference;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Numeric CSV cells: scientific notation with 17 significant digits, so
/// every value round-trips to the exact f64 it came from.
fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seeds: Option<Vec<u64>>,
    pub method: Option<Method>,
    pub regime: Option<Regime>,
    pub jobs: usize,
}

/// Run descriptor written next to the outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub method: String,
    pub regime: String,
    pub seeds: Vec<u64>,
    pub num_sequences: usize,
    pub sequence_files: Vec<String>,
    pub elapsed_secs: f64,
}

/// Parses and validates a TOML experiment config.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Hash of the parsed config; stable under key reordering of the file and
/// sensitive to every semantic field.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for line in lines {
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn write_matrix_csv(path: &Path, run: &SequenceRun) -> Result<()> {
    let k = run.matrix.num_tasks();
    let mut lines = Vec::with_capacity(k + 2);
    let header: Vec<String> = std::iter::once("stage".to_string())
        .chain((1..=k).map(|j| format!("task_{j}")))
        .collect();
    lines.push(header.join(","));
    for stage in 0..run.matrix.num_rows() {
        let mut cells = vec![stage.to_string()];
        cells.extend(run.matrix.row(stage).iter().map(|&v| fmt_num(v)));
        lines.push(cells.join(","));
    }
    write_lines(path, &lines)
}

fn write_traces_csv(path: &Path, run: &SequenceRun) -> Result<()> {
    let mut lines =
        vec!["stage,step,lr,loss_total,loss_ce,loss_kd_prev,loss_kd_pre,eta_mean".to_string()];
    for stage in &run.stages {
        for t in &stage.traces {
            lines.push(format!(
                "{},{},{},{},{},{},{},{}",
                t.stage,
                t.step,
                fmt_num(t.lr),
                fmt_num(t.loss_total),
                fmt_num(t.loss_ce),
                fmt_num(t.loss_kd_prev),
                fmt_num(t.loss_kd_pre),
                fmt_num(t.eta_mean)
            ));
        }
    }
    write_lines(path, &lines)
}

fn write_eta_rank_csv(path: &Path, run: &SequenceRun) -> Result<()> {
    let mut lines = vec!["stage,rank,sample_id,eta".to_string()];
    for stage in &run.stages {
        if stage.eta_records.is_empty() {
            continue;
        }
        let eta_by_id: HashMap<&str, f64> = stage
            .eta_records
            .iter()
            .map(|r| (r.sample_id.as_str(), r.eta))
            .collect();
        let ranked = rank_reference(&stage.eta_records, stage.eta_records.len());
        for (rank, id) in ranked.iter().enumerate() {
            lines.push(format!(
                "{},{},{},{}",
                stage.stage_index,
                rank + 1,
                id,
                fmt_num(eta_by_id[id.as_str()])
            ));
        }
    }
    write_lines(path, &lines)
}

fn write_discrepancy_csv(path: &Path, run: &SequenceRun) -> Result<()> {
    let mut lines = vec!["stage,domain_id,avg_d".to_string()];
    for row in &run.discrepancies {
        lines.push(format!("{},{},{}", row.stage, row.domain_id, fmt_num(row.avg_d)));
    }
    write_lines(path, &lines)
}

fn write_metrics_csv(path: &Path, triples: &[(usize, MetricTriple)]) -> Result<()> {
    let mut lines = vec!["sequence,forgetting,degradation,avg_accuracy".to_string()];
    for (index, t) in triples {
        lines.push(format!(
            "S{},{},{},{}",
            index,
            fmt_num(t.forgetting),
            fmt_num(t.degradation),
            fmt_num(t.avg_accuracy)
        ));
    }
    write_lines(path, &lines)
}

fn seq_file_names(seq_index: usize) -> [String; 4] {
    [
        format!("matrix_S{seq_index}.csv"),
        format!("traces_S{seq_index}.csv"),
        format!("eta_rank_S{seq_index}.csv"),
        format!("discrepancy_S{seq_index}.csv"),
    ]
}

fn write_sequence_outputs(dir: &Path, seq: &SequenceSpec, run: &SequenceRun) -> Result<()> {
    let [matrix, traces, eta, disc] = seq_file_names(seq.index);
    write_matrix_csv(&dir.join(matrix), run)?;
    write_traces_csv(&dir.join(traces), run)?;
    write_eta_rank_csv(&dir.join(eta), run)?;
    write_discrepancy_csv(&dir.join(disc), run)?;
    Ok(())
}

/// Runs the configured method over all rotated sequences for every seed,
/// writing per-sequence artifacts under `seed_<s>/`, per-seed and
/// seed-averaged metric tables, and a run manifest.
pub fn cmd_run(config_path: &Path, out_dir: &Path, opts: &RunOptions) -> Result<()> {
    let started = Instant::now();
    let mut cfg = load_config(config_path)?;
    if let Some(seeds) = &opts.seeds {
        if seeds.is_empty() {
            return Err(Error::config("--seeds must list at least one seed"));
        }
        cfg.experiment.seeds = seeds.clone();
    }
    if let Some(method) = opts.method {
        cfg.experiment.method = method;
    }
    if let Some(regime) = opts.regime {
        cfg.experiment.regime = regime;
    }
    cfg.validate()?;
    if cfg.experiment.base_order.len() < 2 {
        return Err(Error::config(
            "run needs at least 2 domains; the drop metrics are undefined for a single task",
        ));
    }

    let sequences = make_sequences(&cfg.experiment.base_order);
    let seeds = cfg.experiment.seeds.clone();
    fs::create_dir_all(out_dir)?;
    for seed in &seeds {
        fs::create_dir_all(out_dir.join(format!("seed_{seed}")))?;
    }

    let contexts: Vec<ExperimentContext> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::config(format!("cannot build thread pool: {e}")))?;
        pool.install(|| {
            seeds
                .par_iter()
                .map(|&seed| ExperimentContext::prepare(&cfg, seed))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        seeds
            .iter()
            .map(|&seed| ExperimentContext::prepare(&cfg, seed))
            .collect::<Result<Vec<_>>>()?
    };

    let jobs: Vec<(usize, usize)> = (0..contexts.len())
        .flat_map(|ci| (0..sequences.len()).map(move |si| (ci, si)))
        .collect();
    let exec = |&(ci, si): &(usize, usize)| -> Result<MetricTriple> {
        let ctx = &contexts[ci];
        let seq = &sequences[si];
        let run = ctx.run_sequence(seq).map_err(|e| match e {
            Error::Divergence { stage, step, .. } => Error::Divergence {
                stage,
                step,
                location: format!(" in sequence S{} (seed {})", seq.index, ctx.run_seed),
            },
            other => other,
        })?;
        let dir = out_dir.join(format!("seed_{}", ctx.run_seed));
        write_sequence_outputs(&dir, seq, &run)?;
        MetricTriple::from_matrix(&run.matrix)
    };
    let results: Vec<MetricTriple> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::config(format!("cannot build thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(exec).collect::<Result<Vec<_>>>())?
    } else {
        jobs.iter().map(exec).collect::<Result<Vec<_>>>()?
    };

    // Per-seed metric tables, then the seed-averaged table.
    for (ci, ctx) in contexts.iter().enumerate() {
        let triples: Vec<(usize, MetricTriple)> = sequences
            .iter()
            .enumerate()
            .map(|(si, seq)| (seq.index, results[ci * sequences.len() + si]))
            .collect();
        write_metrics_csv(
            &out_dir.join(format!("seed_{}", ctx.run_seed)).join("metrics.csv"),
            &triples,
        )?;
    }
    let averaged: Vec<(usize, MetricTriple)> = sequences
        .iter()
        .enumerate()
        .map(|(si, seq)| -> Result<(usize, MetricTriple)> {
            let per_seed: Vec<MetricTriple> = (0..contexts.len())
                .map(|ci| results[ci * sequences.len() + si])
                .collect();
            Ok((seq.index, aggregate(&per_seed)?))
        })
        .collect::<Result<_>>()?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &averaged)?;

    let mut sequence_files = Vec::new();
    for seed in &seeds {
        for seq in &sequences {
            for name in seq_file_names(seq.index) {
                sequence_files.push(format!("seed_{seed}/{name}"));
            }
        }
    }
    let manifest = RunManifest {
        config_hash: config_hash(&cfg),
        method: cfg.experiment.method.as_str().to_string(),
        regime: cfg.experiment.regime.as_str().to_string(),
        seeds,
        num_sequences: sequences.len(),
        sequence_files,
        elapsed_secs: started.elapsed().as_secs_f64(),
    };
    let mut f = fs::File::create(out_dir.join("manifest.json"))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn parse_metrics_csv(path: &Path) -> Result<Vec<(usize, MetricTriple)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::config(format!("{} is empty", path.display())))?;
    if header != "sequence,forgetting,degradation,avg_accuracy" {
        return Err(Error::config(format!(
            "{} has unexpected header '{header}'",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 || !fields[0].starts_with('S') {
            return Err(Error::config(format!("{}: bad row '{line}'", path.display())));
        }
        let index: usize = fields[0][1..]
            .parse()
            .map_err(|_| Error::config(format!("bad sequence label '{}'", fields[0])))?;
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::config(format!("bad numeric cell '{s}' in {}", path.display())))
        };
        out.push((
            index,
            MetricTriple {
                forgetting: num(fields[1])?,
                degradation: num(fields[2])?,
                avg_accuracy: num(fields[3])?,
            },
        ));
    }
    if out.is_empty() {
        return Err(Error::config(format!("{} has no data rows", path.display())));
    }
    Ok(out)
}

/// Aggregates one or more run directories into `summary.csv`: one row per
/// (method, metric) with columns S1..SK and the cross-sequence mean.
pub fn cmd_report(run_dirs: &[PathBuf], out_path: &Path) -> Result<()> {
    if run_dirs.is_empty() {
        return Err(Error::config("report needs at least one run directory"));
    }
    let mut k_seen: Option<usize> = None;
    let mut lines: Vec<String> = Vec::new();
    for dir in run_dirs {
        let manifest = read_manifest(dir)?;
        let rows = parse_metrics_csv(&dir.join("metrics.csv"))?;
        let k = rows.len();
        match k_seen {
            None => {
                k_seen = Some(k);
                let header: Vec<String> = ["method".to_string(), "metric".to_string()]
                    .into_iter()
                    .chain((1..=k).map(|i| format!("S{i}")))
                    .chain(std::iter::once("Mean".to_string()))
                    .collect();
                lines.push(header.join(","));
            }
            Some(prev) if prev != k => {
                return Err(Error::config(format!(
                    "{} has {k} sequences, earlier inputs had {prev}",
                    dir.display()
                )));
            }
            _ => {}
        }
        for (i, (index, _)) in rows.iter().enumerate() {
            if *index != i + 1 {
                return Err(Error::config(format!(
                    "{}: sequences out of order",
                    dir.display()
                )));
            }
        }
        let triples: Vec<MetricTriple> = rows.iter().map(|(_, t)| *t).collect();
        let mean = aggregate(&triples)?;
        let metric_rows = [
            ("forgetting", triples.iter().map(|t| t.forgetting).collect::<Vec<_>>(), mean.forgetting),
            ("degradation", triples.iter().map(|t| t.degradation).collect(), mean.degradation),
            ("avg_accuracy", triples.iter().map(|t| t.avg_accuracy).collect(), mean.avg_accuracy),
        ];
        for (name, values, mean_value) in &metric_rows {
            let mut cells = vec![manifest.method.clone(), name.to_string()];
            cells.extend(values.iter().map(|&v| fmt_num(v)));
            cells.push(fmt_num(*mean_value));
            lines.push(cells.join(","));
        }
    }
    write_lines(out_path, &lines)
}

/// Prints the top-k selection-ranked reference sample ids of one stage,
/// reading the stored ranking so output and artifact cannot disagree.
pub fn cmd_rank_ref(
    out_dir: &Path,
    stage: usize,
    k: usize,
    seq: usize,
    seed: Option<u64>,
    out: &mut impl Write,
) -> Result<()> {
    let manifest = read_manifest(out_dir)?;
    let seed = match seed {
        Some(s) => {
            if !manifest.seeds.contains(&s) {
                return Err(Error::config(format!("seed {s} not part of this run")));
            }
            s
        }
        None => manifest.seeds[0],
    };
    let path = out_dir.join(format!("seed_{seed}/eta_rank_S{seq}.csv"));
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::config(format!("{}: bad row '{line}'", path.display())));
        }
        let row_stage: usize = fields[0]
            .parse()
            .map_err(|_| Error::config(format!("bad stage cell '{}'", fields[0])))?;
        if row_stage == stage {
            rows.push((fields[1].to_string(), fields[2].to_string(), fields[3].to_string()));
        }
    }
    if rows.is_empty() {
        return Err(Error::config(format!(
            "no selection ranking for stage {stage} in {}",
            path.display()
        )));
    }
    if k == 0 {
        return Ok(());
    }
    writeln!(out, "rank,sample_id,eta")?;
    for (rank, id, eta) in rows.into_iter().take(k) {
        writeln!(out, "{rank},{id},{eta}")?;
    }
    Ok(())
}
