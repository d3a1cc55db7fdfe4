//! Command-line front end: training, evaluation, gradient checking, and
//! dataset dumps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error. Flags override config-file values; the effective configuration
//! is echoed into the output directory before training starts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sab::metrics::{bpc, record_attention, write_heatmap, CsvLogger, MetricRow};
use sab::tasks::{
    dump_batches, gen_adding, gen_copying, load_char_corpus, load_mnist_idx, AddingConfig,
    AddingSource, Batch, BatchSource, CharSource, CopyingConfig, CopyingSource, CorpusKind,
    MnistSource,
};
use sab::train::{checkpoint, GradCheckSettings, Mode, TrainConfig, Trainer};
use sab::Error;

#[derive(Parser)]
#[command(name = "sab", version, about = "Sequence learning with sparse attentive backtracking")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics, checkpoints, and attention
    /// snapshots to the output directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a task split.
    Eval(EvalArgs),
    /// Verify analytic gradients of the full pipeline against central
    /// finite differences on a toy configuration.
    Gradcheck(GradcheckArgs),
    /// Generate a dataset dump for cross-run comparison.
    GenData(GenDataArgs),
}

/// Keys accepted in a JSON config file; snake_case mirrors of the flags.
#[derive(Args, Serialize, Deserialize, Default, Clone)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    /// Task: copying | adding | mnist | ptb | text8.
    #[arg(long)]
    task: Option<String>,
    /// Mode: bptt | tbptt | sab.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long = "k-trunc")]
    k_trunc: Option<usize>,
    #[arg(long = "k-top")]
    k_top: Option<usize>,
    #[arg(long = "k-att")]
    k_att: Option<usize>,
    #[arg(long = "hidden-size")]
    hidden_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "clip-norm")]
    clip_norm: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Sequence-length parameter for the synthetic tasks.
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long = "data-dir")]
    data_dir: Option<PathBuf>,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    /// Write an attention heatmap every N optimizer updates (sab mode).
    #[arg(long = "snapshot-every")]
    snapshot_every: Option<u64>,
    /// Emit a metrics row every N batches (0: epoch ends only).
    #[arg(long = "eval-every")]
    eval_every: Option<usize>,
    #[arg(long = "update-every")]
    update_every: Option<usize>,
    #[arg(long = "batches-per-epoch")]
    batches_per_epoch: Option<usize>,
    #[arg(long = "recursive-backtrack")]
    recursive_backtrack: Option<bool>,
    #[arg(long = "macrostate-capacity")]
    macrostate_capacity: Option<usize>,
}

impl RunConfig {
    /// Flag values override config-file values.
    fn overlay(file: RunConfig, flags: RunConfig) -> RunConfig {
        macro_rules! pick {
            ($($f:ident),*) => {
                RunConfig { $($f: flags.$f.or(file.$f)),* }
            };
        }
        pick!(
            task,
            mode,
            k_trunc,
            k_top,
            k_att,
            hidden_size,
            lr,
            clip_norm,
            batch_size,
            seed,
            epochs,
            t,
            data_dir,
            out_dir,
            snapshot_every,
            eval_every,
            update_every,
            batches_per_epoch,
            recursive_backtrack,
            macrostate_capacity
        )
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from a checkpoint (its stored config wins over flags).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    run: RunConfig,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to evaluate: valid | test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunConfig,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    hidden_size: usize,
    #[arg(long = "T", default_value_t = 12)]
    t: usize,
    #[arg(long = "k-att", default_value_t = 2)]
    k_att: usize,
    #[arg(long = "k-top", default_value_t = 2)]
    k_top: usize,
    #[arg(long = "k-trunc", default_value_t = 3)]
    k_trunc: usize,
    #[arg(long = "batch-size", default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to sweep.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Deliberately corrupt one backward rule to verify the check fails.
    #[arg(long, hide = true, default_value_t = false)]
    corrupt_backward: bool,
}

#[derive(Args)]
struct GenDataArgs {
    /// Task: copying | adding.
    #[arg(long)]
    task: String,
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "batch-size", default_value_t = 64)]
    batch_size: usize,
    /// Number of batches to dump.
    #[arg(long, default_value_t = 1)]
    batches: u64,
    /// Output file (manifest; the blob lands next to it).
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::GenData(args) => cmd_gen_data(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Domain(_) | Error::Format { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config_file(path: &Path) -> Result<RunConfig, Error> {
    let body =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&body)
        .map_err(|e| Error::Usage(format!("config file {}: {e}", path.display())))
}

fn parse_mode(s: &str) -> Result<Mode, Error> {
    match s {
        "bptt" => Ok(Mode::Bptt),
        "tbptt" => Ok(Mode::Tbptt),
        "sab" => Ok(Mode::Sab),
        other => Err(Error::Usage(format!(
            "invalid value for key \"mode\": {other:?} (expected bptt|tbptt|sab)"
        ))),
    }
}

/// Task wiring: sizes, a training source, and held-out batches.
struct TaskSetup {
    name: String,
    n_input: usize,
    n_out: usize,
    train: Box<dyn BatchSource>,
    /// (split name, batches) available for evaluation.
    eval_splits: Vec<(&'static str, Vec<Batch>)>,
    /// Report metrics restricted to the last N steps too.
    last_window: Option<usize>,
}

fn build_task(rc: &RunConfig, cfg: &TrainConfig) -> Result<TaskSetup, Error> {
    let name = rc
        .task
        .clone()
        .ok_or_else(|| Error::Usage("missing required key \"task\"".into()))?;
    let seed = cfg.seed;
    let batch_size = cfg.batch_size;
    let batches_per_epoch = cfg.batches_per_epoch;
    // Held-out batches draw from an epoch namespace training never uses.
    const EVAL_EPOCH: u64 = u64::MAX;

    match name.as_str() {
        "copying" => {
            let t_gap = rc.t.unwrap_or(100);
            let config = CopyingConfig { t_gap };
            let source = CopyingSource {
                config,
                seed,
                batch_size,
                batches_per_epoch,
            };
            let eval: Vec<Batch> = (0..4).map(|k| source.batch(EVAL_EPOCH, k)).collect();
            Ok(TaskSetup {
                name,
                n_input: source.n_input(),
                n_out: source.n_out(),
                eval_splits: vec![("valid", eval.clone()), ("test", eval)],
                train: Box::new(source),
                last_window: Some(10),
            })
        }
        "adding" => {
            let t_len = rc.t.unwrap_or(200);
            let config = AddingConfig { t_len };
            let source = AddingSource {
                config,
                seed,
                batch_size,
                batches_per_epoch,
            };
            let eval: Vec<Batch> = (0..4).map(|k| source.batch(EVAL_EPOCH, k)).collect();
            Ok(TaskSetup {
                name,
                n_input: source.n_input(),
                n_out: source.n_out(),
                eval_splits: vec![("valid", eval.clone()), ("test", eval)],
                train: Box::new(source),
                last_window: None,
            })
        }
        "mnist" => {
            let dir = rc.data_dir.clone().ok_or_else(|| {
                Error::Usage("key \"data_dir\" is required for the mnist task".into())
            })?;
            let data = Arc::new(load_mnist_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?);
            let n = data.images.len();
            let holdout = (n / 6).min(10_000);
            let train = MnistSource {
                data: Arc::clone(&data),
                range: 0..n - holdout,
                batch_size,
                seed,
            };
            let valid_src = MnistSource {
                data: Arc::clone(&data),
                range: n - holdout..n,
                batch_size,
                seed,
            };
            let valid: Vec<Batch> = (0..valid_src.batches_per_epoch().min(16) as u64)
                .map(|k| valid_src.batch(0, k))
                .collect();
            let mut eval_splits = vec![("valid", valid)];
            let test_images = dir.join("t10k-images-idx3-ubyte");
            if test_images.exists() {
                let test = Arc::new(load_mnist_idx(
                    &test_images,
                    &dir.join("t10k-labels-idx1-ubyte"),
                )?);
                let m = test.images.len();
                let test_src = MnistSource {
                    data: test,
                    range: 0..m,
                    batch_size,
                    seed,
                };
                let batches: Vec<Batch> = (0..test_src.batches_per_epoch().min(16) as u64)
                    .map(|k| test_src.batch(0, k))
                    .collect();
                eval_splits.push(("test", batches));
            }
            Ok(TaskSetup {
                name,
                n_input: 1,
                n_out: 10,
                train: Box::new(train),
                eval_splits,
                last_window: None,
            })
        }
        "ptb" | "text8" => {
            let kind = if name == "ptb" {
                CorpusKind::Ptb
            } else {
                CorpusKind::Text8
            };
            let path = rc.data_dir.clone().ok_or_else(|| {
                Error::Usage(format!("key \"data_dir\" is required for the {name} task"))
            })?;
            let corpus = Arc::new(load_char_corpus(&path, kind)?);
            let train = CharSource {
                corpus: Arc::clone(&corpus),
                split: "train",
                kind,
                batch_size,
            };
            let mut eval_splits = Vec::new();
            for split in ["valid", "test"] {
                let src = CharSource {
                    corpus: Arc::clone(&corpus),
                    split,
                    kind,
                    batch_size,
                };
                let n = src.batches_per_epoch().min(8) as u64;
                eval_splits.push((split, (0..n).map(|k| src.batch(0, k)).collect()));
            }
            Ok(TaskSetup {
                name,
                n_input: corpus.n_classes(),
                n_out: corpus.n_classes(),
                train: Box::new(train),
                eval_splits,
                last_window: None,
            })
        }
        other => Err(Error::Usage(format!(
            "invalid value for key \"task\": {other:?} (expected copying|adding|mnist|ptb|text8)"
        ))),
    }
}

fn resolve_train_config(rc: &RunConfig) -> Result<TrainConfig, Error> {
    let mode = parse_mode(rc.mode.as_deref().unwrap_or("sab"))?;
    let mut cfg = TrainConfig::defaults(mode);
    if let Some(v) = rc.k_trunc {
        cfg.k_trunc = v;
    }
    if let Some(v) = rc.k_top {
        cfg.k_top = v;
    }
    if let Some(v) = rc.k_att {
        cfg.k_att = v;
    }
    if let Some(v) = rc.hidden_size {
        cfg.n_hidden = v;
    }
    if let Some(v) = rc.lr {
        cfg.lr = v;
    }
    if let Some(v) = rc.clip_norm {
        cfg.clip_norm = v;
    }
    if let Some(v) = rc.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = rc.seed {
        cfg.seed = v;
    }
    if let Some(v) = rc.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = rc.eval_every {
        cfg.eval_every = v;
    }
    cfg.update_every = rc.update_every.unwrap_or(cfg.k_trunc);
    if let Some(v) = rc.batches_per_epoch {
        cfg.batches_per_epoch = v;
    }
    if let Some(v) = rc.recursive_backtrack {
        cfg.recursive_backtrack = v;
    }
    cfg.macrostate_capacity = rc.macrostate_capacity;
    Ok(cfg)
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Bptt => "bptt",
        Mode::Tbptt => "tbptt",
        Mode::Sab => "sab",
    }
}

fn out_dir_for(rc: &RunConfig, task: &str, mode: Mode, seed: u64) -> PathBuf {
    if let Some(dir) = &rc.out_dir {
        return dir.clone();
    }
    let root = std::env::var_os("SAB_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("{task}-{}-seed{seed}", mode_name(mode)))
}

fn eval_row(
    trainer: &Trainer,
    split: &str,
    batches: &[Batch],
    last_window: Option<usize>,
    started: Instant,
) -> Result<MetricRow, Error> {
    let m = trainer.evaluate(batches, last_window)?;
    Ok(MetricRow {
        step: trainer.counters.updates,
        epoch: trainer.counters.epoch,
        split: split.to_string(),
        loss_nats: m.loss,
        accuracy: m.accuracy,
        bpc: (!m.is_regression).then(|| bpc(m.loss)),
        ce_last10: m.ce_last,
        acc_last10: m.acc_last,
        wallclock_seconds: started.elapsed().as_secs_f64(),
    })
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, Error> {
    let file_rc = match &args.config {
        Some(p) => load_config_file(p)?,
        None => RunConfig::default(),
    };
    let rc = RunConfig::overlay(file_rc, args.run);

    let mut trainer = match &args.checkpoint {
        Some(path) => checkpoint::load(path)?,
        None => {
            let mut cfg = resolve_train_config(&rc)?;
            // Task wiring decides the input/output widths.
            let probe = build_task(&rc, &cfg)?;
            cfg.n_input = probe.n_input;
            cfg.n_out = probe.n_out;
            cfg.validate()?;
            Trainer::new(cfg)?
        }
    };
    let task = build_task(&rc, &trainer.config)?;
    let out_dir = out_dir_for(&rc, &task.name, trainer.config.mode, trainer.config.seed);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    // Echo the effective configuration before any training.
    let echo = serde_json::json!({
        "task": task.name,
        "config": trainer.config,
        "out_dir": out_dir.display().to_string(),
    });
    let cfg_path = out_dir.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&echo).unwrap())
        .map_err(|e| Error::io(cfg_path.display().to_string(), e))?;

    let started = Instant::now();
    let mut log = CsvLogger::create(&out_dir.join("metrics.csv"))?;
    let snapshot_every = rc.snapshot_every.unwrap_or(0);
    let mut next_snapshot = snapshot_every.max(1);
    let eval_every = trainer.config.eval_every;
    let max_epochs = trainer.config.max_epochs as u64;

    println!(
        "training {} ({}) for {} epochs of {} batches",
        task.name,
        mode_name(trainer.config.mode),
        max_epochs,
        task.train.batches_per_epoch()
    );

    while trainer.counters.epoch < max_epochs {
        let mut batch_count = 0u64;
        let valid = &task.eval_splits[0];
        let snapshot_batch = task.train.batch(u64::MAX - 1, 0);
        let mean_loss = {
            let log = &mut log;
            let next_snapshot = &mut next_snapshot;
            trainer.train_epoch(task.train.as_ref(), |t, _loss| {
                batch_count += 1;
                if eval_every > 0 && batch_count % eval_every as u64 == 0 {
                    let row = eval_row(t, valid.0, &valid.1, task.last_window, started)?;
                    println!(
                        "  step {} epoch {} {}: loss {:.6} acc {:?} acc_last {:?}",
                        row.step, row.epoch, row.split, row.loss_nats, row.accuracy,
                        row.acc_last10
                    );
                    log.append(&row)?;
                }
                if snapshot_every > 0
                    && t.config.mode == Mode::Sab
                    && t.counters.updates >= *next_snapshot
                {
                    *next_snapshot += snapshot_every;
                    let snap = record_attention(t, &snapshot_batch, t.counters.updates);
                    let path = out_dir.join(format!("attn-{:08}.pgm", t.counters.updates));
                    write_heatmap(&snap, &path)?;
                }
                Ok(())
            })?
        };

        let row = eval_row(&trainer, valid.0, &valid.1, task.last_window, started)?;
        println!(
            "epoch {} done: train loss {:.6}, {} loss {:.6}, acc {:?}, acc_last {:?}",
            trainer.counters.epoch, mean_loss, row.split, row.loss_nats, row.accuracy,
            row.acc_last10
        );
        log.append(&row)?;
        checkpoint::save(&trainer, &out_dir.join("checkpoint.sabckpt"))?;
    }

    checkpoint::save(&trainer, &out_dir.join("final.sabckpt"))?;
    println!("done: {} updates", trainer.counters.updates);
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, Error> {
    let file_rc = match &args.config {
        Some(p) => load_config_file(p)?,
        None => RunConfig::default(),
    };
    let rc = RunConfig::overlay(file_rc, args.run);
    let trainer = checkpoint::load(&args.checkpoint)?;
    let task = build_task(&rc, &trainer.config)?;
    let split = task
        .eval_splits
        .iter()
        .find(|(name, _)| *name == args.split)
        .ok_or_else(|| {
            Error::Usage(format!("invalid value for key \"split\": {:?}", args.split))
        })?;
    let row = eval_row(&trainer, split.0, &split.1, task.last_window, Instant::now())?;
    println!("{}", sab::metrics::CSV_HEADER);
    println!("{}", row.csv_line());
    if let Some(dir) = &rc.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        sab::metrics::write_csv(std::slice::from_ref(&row), &dir.join("eval.csv"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode, Error> {
    let settings = GradCheckSettings {
        n_hidden: args.hidden_size,
        t_len: args.t,
        k_att: args.k_att,
        k_top: args.k_top,
        k_trunc: args.k_trunc,
        batch: args.batch_size,
        tanh_skew: if args.corrupt_backward { 1e-3 } else { 0.0 },
        ..GradCheckSettings::default()
    };
    let mut all_ok = true;
    for seed in args.seed..args.seed + args.seeds.max(1) {
        let report = sab::train::sab_gradient_check(&settings, seed)?;
        let ok = report.max_rel_err < 1e-5 && report.skipped_fraction() < 0.05;
        all_ok &= ok;
        println!(
            "seed {seed}: max {:.3e} (raw {:.3e}) mean {:.3e} checked {} skipped {} -> {}",
            report.max_rel_err,
            report.max_raw_rel_err,
            report.mean_rel_err,
            report.checked,
            report.skipped,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            if let Some(w) = report.worst {
                println!(
                    "  worst: {}[{}] analytic {:.6e} numeric {:.6e} rel {:.3e}",
                    w.param, w.index, w.analytic, w.numeric, w.rel_err
                );
            }
        }
    }
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_gen_data(args: GenDataArgs) -> Result<ExitCode, Error> {
    let batches: Vec<Batch> = match args.task.as_str() {
        "copying" => {
            let config = CopyingConfig {
                t_gap: args.t.unwrap_or(100),
            };
            (0..args.batches)
                .map(|k| {
                    gen_copying(
                        sab::tasks::derive_seed(args.seed, 0, k),
                        &config,
                        args.batch_size,
                    )
                })
                .collect()
        }
        "adding" => {
            let config = AddingConfig {
                t_len: args.t.unwrap_or(200),
            };
            (0..args.batches)
                .map(|k| {
                    gen_adding(
                        sab::tasks::derive_seed(args.seed, 0, k),
                        &config,
                        args.batch_size,
                    )
                })
                .collect()
        }
        other => {
            return Err(Error::Usage(format!(
                "invalid value for key \"task\": {other:?} (expected copying|adding)"
            )))
        }
    };
    let meta = serde_json::json!({
        "task": args.task,
        "seed": args.seed,
        "T": args.t,
        "batch_size": args.batch_size,
    });
    dump_batches(&args.out, &batches, meta)?;
    println!(
        "wrote {} batches to {} (+ .blob)",
        batches.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
