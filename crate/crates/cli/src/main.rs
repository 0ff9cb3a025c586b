use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use brainho::autograd::FaultInjection;
use brainho::checkpoint;
use brainho::config::{parse_config, RunConfig};
use brainho::data::{
    generate_synthetic, load_dataset, write_dataset, DatasetManifest, FoldSplit, SubjectRecord,
    SyntheticSpec,
};
use brainho::eval::{compute_metrics, predict_scores, run_cv};
use brainho::gradcheck::{gradcheck, GradcheckOptions};
use brainho::interpret::{aggregate_assignments, atlas_overlap, export_report, rank_subgraphs};
use brainho::train::{fit, write_training_log};
use brainho::Error;
use clap::{Args, Parser, Subcommand};

const OUT_ROOT_ENV: &str = "BRAINHO_OUT_ROOT";

#[derive(Parser)]
#[command(name = "brainho", version, about = "Hierarchical attention over connectivity graphs")]
struct Cli {
    /// Worker threads; 1 makes every output bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on the first cross-validation fold.
    Train(RunArgs),
    /// Full stratified cross-validation.
    Evaluate(RunArgs),
    /// Extract learned sub-networks from a checkpoint.
    Interpret(InterpretArgs),
    /// Write a synthetic planted-subgraph dataset.
    Synth(SynthArgs),
    /// Finite-difference check of every parameter gradient on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root (default: config `out`, then $BRAINHO_OUT_ROOT, then ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut overrides = Vec::new();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(lr) = self.lr {
            overrides.push(format!("train.lr={lr:e}"));
        }
        if let Some(e) = self.epochs {
            overrides.push(format!("train.epochs={e}"));
        }
        // explicit --set wins over the convenience flags
        overrides.extend(self.overrides.iter().cloned());
        parse_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Dataset manifest (default: config `data.manifest`).
    #[arg(long, conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Use the built-in planted benchmark generated from this seed.
    #[arg(long)]
    synth: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct InterpretArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, conflicts_with = "synth")]
    data: Option<PathBuf>,
    #[arg(long)]
    synth: Option<u64>,
    /// Restrict the cohort to this fold's test subjects.
    #[arg(long)]
    fold: Option<usize>,
    /// Include control subjects in the cohort (default: patients only).
    #[arg(long)]
    include_controls: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 60)]
    n: usize,
    #[arg(long, default_value_t = 200)]
    subjects: usize,
    #[arg(long, default_value_t = 0.5)]
    signal: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Output root for the dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_sparsemax_fault: bool,
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else if e.is_usage() || matches!(e, Error::InvalidSpec(_)) {
            Failure::Usage(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Interpret(a) => cmd_interpret(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, body).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

/// Creates `<root>/<command>-<timestamp>[-i]`.
fn run_dir(explicit: Option<&Path>, cfg_out: Option<&str>, command: &str) -> Result<PathBuf, Failure> {
    let root = explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg_out.map(PathBuf::from))
        .or_else(|| std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let base = root.join(format!("{command}-{stamp}"));
    let mut dir = base.clone();
    let mut i = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{i}", base.display()));
        i += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    log::info!("writing outputs to {}", dir.display());
    Ok(dir)
}

fn load_data(data: Option<&Path>, synth: Option<u64>, cfg: &RunConfig) -> Result<DatasetManifest, Failure> {
    if let Some(seed) = synth {
        return Ok(generate_synthetic(&SyntheticSpec::planted_benchmark(seed))?);
    }
    let path = data
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.manifest.as_ref().map(PathBuf::from))
        .ok_or_else(|| Failure::Usage("no dataset: pass --data, --synth or set data.manifest".into()))?;
    Ok(load_dataset(&path)?)
}

/// Loads config and data, matching the model's node count to the data.
fn prepare(args: &RunArgs) -> Result<(RunConfig, DatasetManifest), Failure> {
    let mut cfg = args.common.load()?;
    let ds = load_data(args.data.as_deref(), args.synth, &cfg)?;
    if cfg.model.n != ds.n {
        log::info!("model.n set to {} from the dataset", ds.n);
        cfg.model.n = ds.n;
    }
    Ok((cfg, ds))
}

fn cmd_train(args: RunArgs) -> CmdResult {
    let (cfg, ds) = prepare(&args)?;
    let dir = run_dir(args.common.out.as_deref(), cfg.out.as_deref(), "train")?;
    write(&dir.join("config.json"), cfg.to_json())?;
    let split: FoldSplit = cfg.folds(&ds)?.swap_remove(0);
    write(&dir.join("split.json"), json(&split))?;

    let train = ds.select(&split.train_ids);
    let val = ds.select(&split.val_ids);
    let test = ds.select(&split.test_ids);
    let outcome = fit(&train, &val, cfg.init_params(0), &cfg.model, &cfg.train, &cfg.loss)?;

    let ckpt = dir.join("checkpoint.bin");
    checkpoint::save(&ckpt, &outcome.params, &cfg.model)?;
    write_training_log(&dir.join("training_log.csv"), &outcome.log)?;
    let mut report = outcome.report;
    report.checkpoint_path = Some("checkpoint.bin".into());
    write(&dir.join("train_report.json"), json(&report))?;

    let scores = predict_scores(&outcome.params, &cfg.model, &test)?;
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let metrics = compute_metrics(&scores, &labels)?;
    write(&dir.join("test_metrics.json"), json(&metrics))?;
    println!(
        "best epoch {} (val {:.4}); test acc {:.4} auc {:.4} sen {:.4} spe {:.4}",
        report.best_epoch, report.best_val_metric, metrics.acc, metrics.auc, metrics.sen, metrics.spe
    );
    println!("{}", dir.display());
    Ok(())
}

fn cmd_evaluate(args: RunArgs) -> CmdResult {
    let (cfg, ds) = prepare(&args)?;
    let dir = run_dir(args.common.out.as_deref(), cfg.out.as_deref(), "evaluate")?;
    write(&dir.join("config.json"), cfg.to_json())?;
    let folds = cfg.folds(&ds)?;
    write(&dir.join("splits.json"), json(&folds))?;

    let snapshot = serde_json::to_value(&cfg).expect("serializable");
    let run = run_cv(
        &ds,
        &folds,
        |f| cfg.init_params(f),
        &cfg.model,
        &cfg.train,
        &cfg.loss,
        snapshot,
    )?;
    let mut report = run.report;
    for (f, (params, log)) in run.fold_params.iter().zip(&run.fold_logs).enumerate() {
        let fold_dir = dir.join(format!("fold{f}"));
        fs::create_dir_all(&fold_dir).map_err(|e| Failure::Data(e.to_string()))?;
        checkpoint::save(&fold_dir.join("checkpoint.bin"), params, &cfg.model)?;
        write_training_log(&fold_dir.join("training_log.csv"), log)?;
        report.folds[f].train.checkpoint_path = Some(format!("fold{f}/checkpoint.bin"));
    }
    write(&dir.join("cv_report.json"), json(&report))?;
    write(&dir.join("predictions.csv"), report.predictions_csv())?;
    write(&dir.join("table.txt"), report.table())?;
    print!("{}", report.table());
    println!("{}", dir.display());
    Ok(())
}

fn cmd_interpret(args: InterpretArgs) -> CmdResult {
    let mut cfg = args.common.load()?;
    let (params, model_cfg) = checkpoint::load(&args.checkpoint)?;
    cfg.model = model_cfg;
    let ds = load_data(args.data.as_deref(), args.synth, &cfg)?;
    let include_controls = args.include_controls || cfg.data.include_controls;

    let pool: Vec<&SubjectRecord> = match args.fold {
        Some(f) => {
            let folds = cfg.folds(&ds)?;
            let split = folds
                .get(f)
                .ok_or_else(|| Failure::Usage(format!("fold {f} out of range")))?;
            ds.select(&split.test_ids)
        }
        None => ds.subjects.iter().collect(),
    };
    let cohort: Vec<&SubjectRecord> = pool
        .into_iter()
        .filter(|s| include_controls || s.label == 1)
        .collect();
    log::info!("interpreting {} subjects", cohort.len());

    let dir = run_dir(args.common.out.as_deref(), cfg.out.as_deref(), "interpret")?;
    write(&dir.join("config.json"), cfg.to_json())?;
    let assign = aggregate_assignments(&params, &cfg.model, &cohort)?;
    let importance = rank_subgraphs(&params, &cfg.model, &cohort)?;
    let labels = ds.atlas_labels.as_deref();
    let overlap = match atlas_overlap(&assign, labels) {
        Ok(o) => Some(o),
        Err(Error::MissingAtlasLabels) => {
            log::warn!("dataset has no atlas labels; skipping the overlap table");
            None
        }
        Err(e) => return Err(e.into()),
    };
    export_report(&assign, overlap.as_ref(), &importance, labels, &dir)?;
    write(&dir.join("importance.json"), json(&importance))?;
    for (rank, &k) in importance.ranking.iter().enumerate() {
        println!(
            "#{} subgraph {k}: weight {:.4}, {} nodes {:?}",
            rank + 1,
            importance.weights[k],
            assign.support[k].len(),
            assign.support[k]
        );
    }
    println!("{}", dir.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let mut spec = SyntheticSpec::planted_benchmark(args.seed);
    spec.n = args.n;
    spec.subject_count = args.subjects;
    spec.signal_strength = args.signal;
    spec.noise_level = args.noise;
    let ds = generate_synthetic(&spec)?;
    let dir = run_dir(args.out.as_deref(), None, "synth")?;
    write(&dir.join("synth_spec.json"), json(&spec))?;
    let manifest = write_dataset(&ds, &dir)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> CmdResult {
    let opts = GradcheckOptions {
        seed: args.seed,
        tolerance: args.tolerance,
        fault: FaultInjection {
            sparsemax_identity_jacobian: args.inject_sparsemax_fault,
        },
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&opts)?;
    print!("{}", report.render());
    if let Some(out) = args.out.as_deref() {
        let dir = run_dir(Some(out), None, "gradcheck")?;
        write(&dir.join("gradcheck.json"), json(&report))?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "gradient mismatch in {}",
            report.failures().join(", ")
        )))
    }
}
