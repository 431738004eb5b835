//! `seqrec` — prepare data, train, evaluate, and sweep the sequential
//! recommender from the command line.
//!
//! Exit codes: 0 success, 1 internal failure, 2 usage or input error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use config::{expand_grid, help_text, ConfigError, ConfigMap, ResolvedConfig};
use seqrec_core::dataset::{load_interactions, InteractionDataset, LoadReport};
use seqrec_core::eval::{evaluate, EvalError, EvalReport, Split};
use seqrec_core::params::Checkpoint;
use seqrec_core::train::{restore, train, TrainOutcome};
use seqrec_core::Real;

#[derive(Debug, thiserror::Error)]
enum AppError {
    /// Bad invocation or unreadable/ill-formed input: exit 2.
    #[error("{0}")]
    Usage(String),
    /// Failure inside the pipeline: exit 1.
    #[error("{0}")]
    Internal(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 2,
            AppError::Internal(_) => 1,
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Usage(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "seqrec",
    version,
    about = "Sequential recommender with contrastive intent modeling",
    after_help = help_text()
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Configuration file of `key = value` lines (see the key list below).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. --set loss.gamma=0.2
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed (shorthand for --set seed=N).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Evaluation worker threads (shorthand for --set threads=N).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for run artifacts.
    #[arg(long, global = true, env = "SEQREC_OUT_DIR", default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load a raw interaction log, filter it, cache it, and print its statistics.
    Prepare {
        /// Raw interaction log (`user item` pairs or one sequence per line).
        input: PathBuf,
        /// Cache file to write (default: <out-dir>/prepare/dataset.json).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a model; writes checkpoints, an epoch history, reports, and a manifest.
    Train {
        /// Dataset: a cache from `prepare` (*.json) or a raw log.
        data: PathBuf,
        /// Sweep a key over several values (repeatable), e.g. --grid intent.K=64,128.
        /// Cells run sequentially, each with its own run directory and manifest.
        #[arg(long, value_name = "KEY=V1,V2,...")]
        grid: Vec<String>,
        /// Continue from a `checkpoint.latest.json` of an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one leave-one-out split.
    Evaluate {
        /// A `checkpoint.best.json` (or `.latest`) from `train`.
        checkpoint: PathBuf,
        /// Dataset the checkpoint was trained on.
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Train once per value of one hyperparameter axis and print a metrics table.
    Ablate {
        /// Dataset: a cache from `prepare` (*.json) or a raw log.
        data: PathBuf,
        /// Which hyperparameter to sweep.
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated axis values, e.g. 32,64,128.
        #[arg(long)]
        values: String,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    /// Centroid count (intent.K).
    K,
    /// Relevant-intent fraction (intent.ratio).
    Ratio,
    /// Multi-intent loss weight (loss.gamma).
    Gamma,
}

impl AxisArg {
    fn key(self) -> &'static str {
        match self {
            AxisArg::K => "intent.K",
            AxisArg::Ratio => "intent.ratio",
            AxisArg::Gamma => "loss.gamma",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    let mut map = ConfigMap::default();
    if let Some(path) = &cli.config {
        let text = read_named(path)?;
        map.apply_file(&text)?;
    }
    map.apply_sets(&cli.sets)?;
    if let Some(seed) = cli.seed {
        map.set("seed", &seed.to_string())?;
    }
    if let Some(threads) = cli.threads {
        map.set("threads", &threads.to_string())?;
    }

    match cli.cmd {
        Cmd::Prepare { input, output } => cmd_prepare(&cli.out_dir, &input, output, &map),
        Cmd::Train { data, grid, resume } => cmd_train(&cli.out_dir, &data, &grid, resume, &map),
        Cmd::Evaluate { checkpoint, data, split } => {
            cmd_evaluate(&cli.out_dir, &checkpoint, &data, split.into(), &map)
        }
        Cmd::Ablate { data, axis, values } => cmd_ablate(&cli.out_dir, &data, axis, &values, &map),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn read_named(path: &Path) -> Result<String, AppError> {
    fs::read_to_string(path)
        .map_err(|e| AppError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), AppError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| AppError::Internal(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, text)
        .map_err(|e| AppError::Internal(format!("cannot write {}: {e}", path.display())))
}

fn sha256_file(path: &Path) -> Result<String, AppError> {
    let bytes = fs::read(path)
        .map_err(|e| AppError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Loads a dataset (JSON cache or raw log), applying the configured user
/// subsample. Returns the load report for raw inputs.
fn load_dataset(
    path: &Path,
    rc: &ResolvedConfig,
) -> Result<(InteractionDataset, Option<LoadReport>), AppError> {
    if !path.exists() {
        return Err(AppError::Usage(format!("no such file: {}", path.display())));
    }
    let is_cache = path.extension().is_some_and(|e| e == "json");
    let (ds, report) = if is_cache {
        let ds = InteractionDataset::load_cache(path)
            .map_err(|e| AppError::Usage(format!("cannot load cache {}: {e}", path.display())))?;
        (ds, None)
    } else {
        let (ds, rep) = load_interactions(path, &rc.load_options())
            .map_err(|e| AppError::Usage(format!("cannot load {}: {e}", path.display())))?;
        (ds, Some(rep))
    };
    let ds = if rc.subsample_users > 0 {
        ds.subsample_users(rc.subsample_users, rc.subsample_seed)
            .map_err(|e| AppError::Usage(e.to_string()))?
    } else {
        ds
    };
    Ok((ds, report))
}

struct ManifestInputs<'a> {
    command: &'a str,
    created_unix: u64,
    map: &'a ConfigMap,
    overrides: &'a [(String, String)],
    dataset: Option<(&'a Path, String, &'a InteractionDataset)>,
    artifacts: Vec<(&'static str, PathBuf)>,
}

fn write_manifest(run_dir: &Path, inputs: &ManifestInputs) -> Result<PathBuf, AppError> {
    let rc = inputs.map.resolve()?;
    let mut cfg = serde_json::Map::new();
    for (k, v) in inputs.map.entries() {
        cfg.insert(k.to_string(), serde_json::Value::String(v));
    }
    let dataset = inputs.dataset.as_ref().map(|(path, sha, ds)| {
        let stats = ds.stats();
        serde_json::json!({
            "path": path.display().to_string(),
            "sha256": sha,
            "users": ds.user_count(),
            "items": ds.item_count(),
            "actions": stats.actions,
        })
    });
    let mut artifacts = serde_json::Map::new();
    for (name, path) in &inputs.artifacts {
        artifacts.insert(name.to_string(), serde_json::Value::String(path.display().to_string()));
    }
    let overrides: Vec<String> =
        inputs.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let manifest = serde_json::json!({
        "command": inputs.command,
        "created_unix": inputs.created_unix,
        "finished_unix": now_unix(),
        "seed": rc.seed,
        "threads": rc.threads,
        "dataset": dataset,
        "overrides": overrides,
        "config": serde_json::Value::Object(cfg),
        "artifacts": serde_json::Value::Object(artifacts),
    });
    let path = run_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| AppError::Internal(format!("manifest serialization failed: {e}")))?;
    write_text(&path, &format!("{text}\n"))?;
    Ok(path)
}

fn save_checkpoint(ckpt: &Checkpoint<Real>, path: &Path) -> Result<(), AppError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| AppError::Internal(format!("cannot create {}: {e}", parent.display())))?;
    }
    ckpt.save(path)
        .map_err(|e| AppError::Internal(format!("cannot write {}: {e}", path.display())))
}

fn report_artifacts(
    run_dir: &Path,
    tag: &str,
    report: &EvalReport,
) -> Result<[(&'static str, PathBuf); 2], AppError> {
    let txt = run_dir.join(format!("report.{tag}.txt"));
    let kv = run_dir.join(format!("report.{tag}.kv"));
    write_text(&txt, &format!("{report}\n"))?;
    write_text(&kv, &format!("{}\n", report.to_kv()))?;
    Ok(if tag == "valid" {
        [("report_valid_txt", txt), ("report_valid_kv", kv)]
    } else {
        [("report_test_txt", txt), ("report_test_kv", kv)]
    })
}

fn eval_app_err(e: EvalError) -> AppError {
    match e {
        EvalError::Invalid(_) => AppError::Usage(e.to_string()),
        other => AppError::Internal(other.to_string()),
    }
}

// ---------------------------------------------------------------------------
// prepare

fn cmd_prepare(
    out_dir: &Path,
    input: &Path,
    output: Option<PathBuf>,
    map: &ConfigMap,
) -> Result<(), AppError> {
    let created = now_unix();
    let rc = map.resolve()?;
    if !input.exists() {
        return Err(AppError::Usage(format!("no such file: {}", input.display())));
    }
    let run_dir = out_dir.join("prepare");
    let (ds, report) = load_interactions(input, &rc.load_options())
        .map_err(|e| AppError::Usage(format!("cannot load {}: {e}", input.display())))?;
    let cache_path = output.unwrap_or_else(|| run_dir.join("dataset.json"));
    if let Some(parent) = cache_path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| AppError::Internal(format!("cannot create {}: {e}", parent.display())))?;
    }
    ds.save_cache(&cache_path)
        .map_err(|e| AppError::Internal(format!("cannot write {}: {e}", cache_path.display())))?;

    println!("{}", ds.stats());
    println!(
        "raw_users={} raw_items={} raw_actions={} filter_rounds={} users_dropped_short={}",
        report.raw_users,
        report.raw_items,
        report.raw_actions,
        report.filter_rounds,
        report.users_dropped_short
    );
    println!("cache written to {}", cache_path.display());

    let sha = sha256_file(input)?;
    write_manifest(
        &run_dir,
        &ManifestInputs {
            command: "prepare",
            created_unix: created,
            map,
            overrides: &[],
            dataset: Some((input, sha, &ds)),
            artifacts: vec![("cache", cache_path)],
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn cmd_train(
    out_dir: &Path,
    data: &Path,
    grid: &[String],
    resume: Option<PathBuf>,
    map: &ConfigMap,
) -> Result<(), AppError> {
    let cells = if grid.is_empty() { vec![Vec::new()] } else { expand_grid(grid)? };
    if cells.len() > 1 && resume.is_some() {
        return Err(AppError::Usage("--resume cannot be combined with --grid".into()));
    }
    for (i, overrides) in cells.iter().enumerate() {
        let mut cell_map = map.clone();
        for (k, v) in overrides {
            cell_map.set(k, v)?;
        }
        let run_dir = if cells.len() == 1 {
            out_dir.join("train")
        } else {
            out_dir.join(format!("train-{i:03}"))
        };
        if cells.len() > 1 {
            let tag: Vec<String> = overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!("# run {i}: {}", tag.join(" "));
        }
        run_train(&run_dir, data, &cell_map, resume.as_deref(), overrides)?;
    }
    Ok(())
}

fn run_train(
    run_dir: &Path,
    data: &Path,
    map: &ConfigMap,
    resume: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<(), AppError> {
    let created = now_unix();
    let rc = map.resolve()?;
    let (ds, _) = load_dataset(data, &rc)?;
    let sha = sha256_file(data)?;
    let train_cfg = rc.train_config(ds.item_count());

    let resume_ckpt: Option<Checkpoint<Real>> = match resume {
        None => None,
        Some(path) => {
            if !path.exists() {
                return Err(AppError::Usage(format!("no such file: {}", path.display())));
            }
            Some(
                Checkpoint::load(path)
                    .map_err(|e| AppError::Usage(format!("cannot load {}: {e}", path.display())))?,
            )
        }
    };

    let outcome: TrainOutcome<Real> = train(&ds, &train_cfg, resume_ckpt.as_ref())
        .map_err(|e| AppError::Internal(e.to_string()))?;

    let history_path = run_dir.join("history.txt");
    let mut history_text = String::new();
    for r in &outcome.history {
        history_text.push_str(&r.to_kv());
        history_text.push('\n');
    }
    write_text(&history_path, &history_text)?;

    let best_path = run_dir.join("checkpoint.best.json");
    let latest_path = run_dir.join("checkpoint.latest.json");
    save_checkpoint(&outcome.best, &best_path)?;
    save_checkpoint(&outcome.latest, &latest_path)?;
    let config_path = run_dir.join("config.resolved");
    write_text(&config_path, &map.to_lines())?;

    let model = restore(&outcome.best).map_err(|e| AppError::Internal(e.to_string()))?;
    let mut artifacts: Vec<(&'static str, PathBuf)> = vec![
        ("history", history_path),
        ("checkpoint_best", best_path),
        ("checkpoint_latest", latest_path),
        ("config_resolved", config_path),
    ];
    for (split, tag) in [(Split::Valid, "valid"), (Split::Test, "test")] {
        let report =
            evaluate(&model.encoder, &model.params, &ds, split, &rc.eval_config()).map_err(eval_app_err)?;
        artifacts.extend(report_artifacts(run_dir, tag, &report)?);
        println!("{}", report.to_kv());
    }
    println!(
        "best epoch {} (validation ndcg10 {}), {} epoch(s) run{}",
        outcome.best_epoch,
        outcome.best_ndcg10,
        outcome.history.len(),
        if outcome.stopped_early { ", stopped early" } else { "" }
    );

    write_manifest(
        run_dir,
        &ManifestInputs {
            command: "train",
            created_unix: created,
            map,
            overrides,
            dataset: Some((data, sha, &ds)),
            artifacts,
        },
    )?;
    println!("artifacts in {}", run_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

fn cmd_evaluate(
    out_dir: &Path,
    checkpoint: &Path,
    data: &Path,
    split: Split,
    map: &ConfigMap,
) -> Result<(), AppError> {
    let created = now_unix();
    let rc = map.resolve()?;
    if !checkpoint.exists() {
        return Err(AppError::Usage(format!("no such file: {}", checkpoint.display())));
    }
    let ckpt: Checkpoint<Real> = Checkpoint::load(checkpoint)
        .map_err(|e| AppError::Usage(format!("cannot load {}: {e}", checkpoint.display())))?;
    // Architecture/shape problems in the stored model are input errors.
    let model = restore(&ckpt).map_err(|e| AppError::Usage(e.to_string()))?;
    let (ds, _) = load_dataset(data, &rc)?;
    let report = evaluate(&model.encoder, &model.params, &ds, split, &rc.eval_config())
        .map_err(eval_app_err)?;

    println!("{report}");
    println!("{}", report.to_kv());

    let run_dir = out_dir.join("evaluate");
    let tag = split.as_str();
    let artifacts = report_artifacts(&run_dir, tag, &report)?.to_vec();
    let sha = sha256_file(data)?;
    write_manifest(
        &run_dir,
        &ManifestInputs {
            command: "evaluate",
            created_unix: created,
            map,
            overrides: &[],
            dataset: Some((data, sha, &ds)),
            artifacts,
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate

fn cmd_ablate(
    out_dir: &Path,
    data: &Path,
    axis: AxisArg,
    values: &str,
    map: &ConfigMap,
) -> Result<(), AppError> {
    let created = now_unix();
    let key = axis.key();
    let values: Vec<String> =
        values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(AppError::Usage("--values must list at least one axis value".into()));
    }
    let rc_base = map.resolve()?;
    let (ds, _) = load_dataset(data, &rc_base)?;
    let sha = sha256_file(data)?;

    // A failing cell (for example K larger than the user count) is recorded
    // in its row and the sweep continues.
    let mut rows: Vec<(String, Result<EvalReport, String>)> = Vec::new();
    for value in &values {
        let mut cell_map = map.clone();
        cell_map.set(key, value)?;
        let outcome = ablate_cell(&ds, &cell_map);
        rows.push((value.clone(), outcome));
    }

    let mut table = format!(
        "{:<14} {:>9} {:>9} {:>9} {:>9}\n",
        key, "HR@5", "HR@10", "NDCG@5", "NDCG@10"
    );
    let mut kv_lines = String::new();
    for (value, row) in &rows {
        match row {
            Ok(r) => {
                table.push_str(&format!(
                    "{value:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
                    r.hr5, r.hr10, r.ndcg5, r.ndcg10
                ));
                kv_lines.push_str(&format!("axis={key} value={value} {}\n", r.to_kv()));
            }
            Err(msg) => {
                table.push_str(&format!("{value:<14} error: {msg}\n"));
                kv_lines.push_str(&format!("axis={key} value={value} error={msg}\n"));
            }
        }
    }
    print!("{table}");

    let run_dir = out_dir.join("ablate");
    let table_path = run_dir.join("table.txt");
    let kv_path = run_dir.join("table.kv");
    write_text(&table_path, &table)?;
    write_text(&kv_path, &kv_lines)?;
    write_manifest(
        &run_dir,
        &ManifestInputs {
            command: "ablate",
            created_unix: created,
            map,
            overrides: &[],
            dataset: Some((data, sha, &ds)),
            artifacts: vec![("table_txt", table_path), ("table_kv", kv_path)],
        },
    )?;
    Ok(())
}

/// Trains one sweep cell and scores its best checkpoint on the test split.
fn ablate_cell(ds: &InteractionDataset, map: &ConfigMap) -> Result<EvalReport, String> {
    let rc = map.resolve().map_err(|e| e.to_string())?;
    let cfg = rc.train_config(ds.item_count());
    let outcome: TrainOutcome<Real> = train(ds, &cfg, None).map_err(|e| e.to_string())?;
    let model = restore(&outcome.best).map_err(|e| e.to_string())?;
    evaluate(&model.encoder, &model.params, ds, Split::Test, &rc.eval_config())
        .map_err(|e| e.to_string())
}
