//! Subcommand bodies. Each writes its artifacts under `--out`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lightccf::dataset::{
    inject_noise, load_interactions, sparsity_groups, split_per_user, InputFormat,
    InteractionDataset, SplitManifest,
};
use lightccf::evaluator::{evaluate, write_long_format, EvalReport};
use lightccf::exec::Execution;
use lightccf::gradcheck::{self, GradcheckConfig};
use lightccf::model::{load_checkpoint, save_checkpoint};
use lightccf::synthetic::{generate, SyntheticConfig};
use lightccf::trainer::{run_grid, timing_harness, train_with_observer, TrainError, Trainer};
use serde::Serialize;

use crate::config::RunConfig;

/// Failure that maps to exit status 1 rather than 2.
#[derive(Debug)]
pub struct ValidationFailure(pub String);

impl std::fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationFailure {}

pub const CONFIG_COPY: &str = "config.toml";
pub const DATA_REF: &str = "data.json";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const RUN_RECORD: &str = "run.json";
pub const REPORT: &str = "report.json";
pub const METRICS: &str = "metrics.tsv";
pub const CHECKPOINT: &str = "checkpoint.bin";

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    let path = out.join(CONFIG_COPY);
    std::fs::write(&path, cfg.to_toml()?).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(dir: &Path) -> Result<InteractionDataset> {
    InteractionDataset::load(dir).with_context(|| format!("loading split {}", dir.display()))
}

/// Pointer from a run directory back to the split it used.
#[derive(Serialize)]
struct DataRef<'a> {
    path: &'a Path,
    manifest: SplitManifest,
}

pub enum Source {
    File { path: PathBuf, format: InputFormat },
    Synthetic(SyntheticConfig),
}

pub struct PrepareArgs {
    pub source: Source,
    pub train_ratio: f64,
    pub seed: u64,
    pub noise: f64,
}

pub fn prepare(args: &PrepareArgs, out: &Path) -> Result<SplitManifest> {
    let raw = match &args.source {
        Source::File { path, format } => {
            if !path.exists() {
                bail!("input file {} does not exist", path.display());
            }
            load_interactions(path, *format)
                .with_context(|| format!("reading {}", path.display()))?
        }
        Source::Synthetic(cfg) => generate(cfg),
    };
    let mut ds = split_per_user(&raw, args.train_ratio, args.seed)?;
    if args.noise > 0.0 {
        ds = inject_noise(&ds, args.noise, args.seed)?;
    }
    create_out(out)?;
    raw.write_id_maps(out)?;
    let manifest = ds.save_with_duplicates(out, raw.duplicates)?;
    log::info!(
        "{} users, {} items, {} train / {} test edges, {} injected",
        manifest.num_users,
        manifest.num_items,
        manifest.train_edges,
        manifest.test_edges,
        manifest.injected_edges
    );
    Ok(manifest)
}

fn grouped_report(
    scoring: &lightccf::model::EmbeddingState,
    ds: &InteractionDataset,
    cfg: &RunConfig,
    exec: Execution,
) -> Result<EvalReport> {
    let groups = sparsity_groups(ds, cfg.eval.group_boundaries)?;
    Ok(evaluate(scoring, ds, &cfg.train.ks, Some(&groups), exec)?)
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, exec: Execution) -> Result<EvalReport> {
    let ds = load_dataset(data)?;
    cfg.train.validate()?;
    create_out(out)?;
    write_config(out, cfg)?;
    write_json(
        &out.join(DATA_REF),
        &DataRef {
            path: data,
            manifest: ds.manifest(),
        },
    )?;
    let log_path = out.join(EPOCH_LOG);
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let mut log_err = None;
    let result = train_with_observer(&ds, &cfg.train, exec, |rec| {
        let line = serde_json::to_string(rec).map_err(std::io::Error::from);
        if let Err(e) = line.and_then(|l| writeln!(log, "{l}").and_then(|_| log.flush())) {
            log_err.get_or_insert(e);
        }
    });
    if let Some(e) = log_err {
        return Err(e).context(format!("writing {}", log_path.display()));
    }
    let outcome = match result {
        Err(e @ TrainError::NonFinite { .. }) => return Err(ValidationFailure(e.to_string()).into()),
        other => other?,
    };
    save_checkpoint(
        &out.join(CHECKPOINT),
        &outcome.base,
        cfg.train.seed,
        cfg.train.loss.similarity,
    )?;
    write_json(&out.join(RUN_RECORD), &outcome.record)?;
    let mut report = grouped_report(&outcome.scoring, &ds, cfg, exec)?;
    report.wall_time_per_epoch = outcome.report.wall_time_per_epoch;
    write_json(&out.join(REPORT), &report)?;
    write_long_format(&out.join(METRICS), &[(outcome.record.label.clone(), &report)])?;
    Ok(report)
}

/// Re-score a finished run from its config copy and checkpoint.
pub fn evaluate_run(
    run: &Path,
    data_override: Option<&Path>,
    boundaries: Option<(usize, usize)>,
    exec: Execution,
) -> Result<EvalReport> {
    let mut cfg = RunConfig::load(&run.join(CONFIG_COPY))?;
    if boundaries.is_some() {
        cfg.eval.group_boundaries = boundaries;
    }
    let data = crate::config::resolve_data(data_override, &cfg)?;
    let ds = load_dataset(&data)?;
    let (header, base) = load_checkpoint(&run.join(CHECKPOINT))
        .with_context(|| format!("loading {}", run.join(CHECKPOINT).display()))?;
    if header.dim as usize != cfg.train.dim {
        bail!("checkpoint dim {} != config dim {}", header.dim, cfg.train.dim);
    }
    if header.num_users as usize != ds.num_users() || header.num_items as usize != ds.num_items() {
        bail!(
            "checkpoint is {}x{} but split {} is {}x{}",
            header.num_users,
            header.num_items,
            data.display(),
            ds.num_users(),
            ds.num_items()
        );
    }
    // The encoder graph is built from whatever the trainer saw.
    let carved;
    let graph_ds = match cfg.train.validation_ratio {
        Some(r) => {
            carved = ds.carve_validation(r, cfg.train.seed)?;
            &carved
        }
        None => &ds,
    };
    let scoring = Trainer::new(graph_ds, cfg.train.clone(), exec)?.scoring_embeddings(&base)?;
    let report = grouped_report(&scoring, &ds, &cfg, exec)?;
    write_json(&run.join("eval_report.json"), &report)?;
    write_long_format(
        &run.join("eval_metrics.tsv"),
        &[(cfg.train.label(), &report)],
    )?;
    Ok(report)
}

pub fn grid(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    workers: usize,
    exec: Execution,
) -> Result<()> {
    let ds = load_dataset(data)?;
    cfg.train.validate()?;
    create_out(out)?;
    write_config(out, cfg)?;
    let cells = run_grid(&ds, &cfg.train, &cfg.grid.taus, &cfg.grid.alphas, workers, exec)?;
    write_json(&out.join("grid.json"), &cells)?;
    let path = out.join("grid.tsv");
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "tau\talpha\tk\trecall\tndcg")?;
    for c in &cells {
        for (k, r) in &c.recall {
            writeln!(w, "{}\t{}\t{k}\t{r:.6}\t{:.6}", c.tau, c.alpha, c.ndcg[k])?;
        }
    }
    w.flush()?;
    let k = cfg.train.early_stop_k;
    for c in &cells {
        println!(
            "tau {:<6} alpha {:<6} NDCG@{k} {:.4}",
            c.tau, c.alpha, c.ndcg[&k]
        );
    }
    Ok(())
}

pub fn gradcheck_cmd(gc: &GradcheckConfig, out: Option<&Path>) -> Result<()> {
    let rows = gradcheck::run(gc);
    println!("{:<10} {:>9} {:>14}  result", "loss", "instances", "max rel err");
    for r in &rows {
        println!(
            "{:<10} {:>9} {:>14.3e}  {}",
            r.loss,
            r.instances,
            r.max_relative_error,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(out) = out {
        create_out(out)?;
        write_json(&out.join("gradcheck.json"), &rows)?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.loss.as_str()).collect();
    if !failed.is_empty() {
        return Err(ValidationFailure(format!(
            "gradient check failed (tolerance {:e}): {}",
            gc.tolerance,
            failed.join(", ")
        ))
        .into());
    }
    Ok(())
}

pub fn bench(cfg: &RunConfig, data: &Path, out: &Path, exec: Execution) -> Result<()> {
    let ds = load_dataset(data)?;
    create_out(out)?;
    write_config(out, cfg)?;
    let configs: Vec<_> = cfg
        .bench
        .objectives
        .iter()
        .map(|&objective| {
            let mut c = cfg.train.clone();
            c.objective = objective;
            (c.label(), c)
        })
        .collect();
    let rows = timing_harness(&ds, &configs, cfg.bench.epochs, exec)?;
    write_json(&out.join("timing.json"), &rows)?;
    let path = out.join("timing.tsv");
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "config\tseconds_per_epoch\tepochs\ttotal_seconds")?;
    println!("{:<32} {:>12} {:>10}", "config", "s/epoch", "total s");
    for r in &rows {
        writeln!(
            w,
            "{}\t{:.6}\t{}\t{:.6}",
            r.label, r.seconds_per_epoch, r.epochs, r.total_seconds
        )?;
        println!(
            "{:<32} {:>12.4} {:>10.3}",
            r.label, r.seconds_per_epoch, r.total_seconds
        );
    }
    w.flush()?;
    Ok(())
}
