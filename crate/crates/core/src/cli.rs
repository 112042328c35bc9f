//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for invalid input (bad flags, config or
//! arguments), 2 for runtime and numeric failures.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
use crate::config::{ExperimentConfig, Manifest};
use crate::data::{generate_dataset, Splits};
use crate::engine::{self, Engine, ProbeConfig, RecoveryPoint};
use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::metrics::{self, accuracy, MetricsRecord};
use crate::model::{pretrain, TransformerClassifier};

#[derive(Debug, Parser)]
#[command(name = "gslora", version, about = "Continual class forgetting with group-sparse LoRA")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's experiment seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the dataset and train the base classifier.
    Pretrain(RunArgs),
    /// Run the forgetting schedule; writes per-task adapters and metrics.csv.
    Forget {
        #[command(flatten)]
        run: RunArgs,
        /// Base checkpoint; pretrained in-process (and saved) when omitted.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Recompute the metrics record of one task from checkpoints.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        base: PathBuf,
        /// Adapter checkpoint written by `forget` for the task.
        #[arg(long)]
        lora: PathBuf,
    },
    /// Head-only fine-tuning on all classes after forgetting.
    Recover {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        base: PathBuf,
        /// Adapter checkpoint; required unless --control is given.
        #[arg(long)]
        lora: Option<PathBuf>,
        /// Probe a masked-head model instead of the adapted backbone.
        #[arg(long)]
        control: bool,
        /// Classes to treat as forgotten for --control (defaults to all scheduled ones).
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<usize>>,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
    },
    /// Print a metrics log as a table and write a long-format CSV for plotting.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// Long-format CSV output (defaults next to the metrics file).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

fn load_config(run: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&run.config)?;
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &run.out {
        cfg.output.dir = out.clone();
    }
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok((cfg, dir))
}

fn load_base(cfg: &ExperimentConfig, path: &Path) -> Result<TransformerClassifier> {
    TransformerClassifier::from_named(cfg.model_config(), &load_checkpoint(path)?)
}

fn load_adapters(cfg: &ExperimentConfig, model: &TransformerClassifier, path: &Path) -> Result<LoraSet> {
    LoraSet::from_named(model, &load_checkpoint(path)?, cfg.lora.grouping)
}

fn pretrain_base(cfg: &ExperimentConfig, splits: &Splits) -> Result<TransformerClassifier> {
    pretrain(
        &cfg.model_config(),
        &splits.train,
        &cfg.pretrain.optimizer(),
        cfg.pretrain.dropout,
        cfg.seed,
    )
}

fn write_manifest(cmd: &str, cfg: &ExperimentConfig, dir: &Path, outputs: Vec<PathBuf>) -> Result<()> {
    Manifest::new(cmd, cfg, outputs)?.save(&dir.join(format!("{cmd}.manifest.json")))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain(run) => {
            let (cfg, dir) = load_config(&run)?;
            let splits = generate_dataset(&cfg.dataset)?;
            let model = pretrain_base(&cfg, &splits)?;
            let all: Vec<usize> = (0..cfg.dataset.num_classes).collect();
            let train_acc = accuracy(&model, None, &splits.train, &all)?;
            let test_acc = accuracy(&model, None, &splits.test, &all)?;
            let path = dir.join("base.gslf");
            save_checkpoint(&path, &model.named_tensors())?;
            write_manifest("pretrain", &cfg, &dir, vec![path.clone()])?;
            println!(
                "pretrained {} parameters: train acc {train_acc:.2}%, test acc {test_acc:.2}% -> {}",
                model.num_params(),
                path.display()
            );
            Ok(())
        }
        Command::Forget { run, base } => {
            let (cfg, dir) = load_config(&run)?;
            let splits = generate_dataset(&cfg.dataset)?;
            let mut outputs = Vec::new();
            let model = match base {
                Some(p) => load_base(&cfg, &p)?,
                None => {
                    let m = pretrain_base(&cfg, &splits)?;
                    let p = dir.join("base.gslf");
                    save_checkpoint(&p, &m.named_tensors())?;
                    outputs.push(p);
                    m
                }
            };
            let mut engine = Engine::new(model, cfg.engine_config())?;
            for task in &cfg.tasks {
                let outcome = engine.run_task(&splits, task)?;
                let p = dir.join(format!("lora_task{}.gslf", outcome.record.task));
                save_checkpoint(&p, &outcome.adapters.named_tensors())?;
                outputs.push(p);
            }
            let csv = dir.join("metrics.csv");
            metrics::save_csv(&csv, engine.records())?;
            outputs.push(csv.clone());
            write_manifest("forget", &cfg, &dir, outputs)?;
            let mut out = Vec::new();
            write_table(&mut out, engine.records())?;
            print!("{}", String::from_utf8_lossy(&out));
            Ok(())
        }
        Command::Eval { run, base, lora } => {
            let (cfg, dir) = load_config(&run)?;
            let splits = generate_dataset(&cfg.dataset)?;
            let model = load_base(&cfg, &base)?;
            let adapters = load_adapters(&cfg, &model, &lora)?;
            let record = eval_record(&cfg, &model, &adapters, &splits)?;
            write_manifest("eval", &cfg, &dir, vec![])?;
            print_json(&record)
        }
        Command::Recover {
            run,
            base,
            lora,
            control,
            classes,
            epochs,
            lr,
        } => {
            let (cfg, dir) = load_config(&run)?;
            let splits = generate_dataset(&cfg.dataset)?;
            let model = load_base(&cfg, &base)?;
            let scheduled: Vec<usize> = cfg.tasks.iter().flat_map(|t| t.forget.iter().copied()).collect();
            let probe = ProbeConfig {
                epochs,
                lr,
                batch_size: 32,
                seed: cfg.seed,
            };
            let all_train: Vec<usize> = (0..splits.train.len()).collect();
            let (curve, name) = if control {
                let forgotten = classes.unwrap_or(scheduled);
                let retained: Vec<usize> =
                    (0..cfg.dataset.num_classes).filter(|k| !forgotten.contains(k)).collect();
                let feats = model.pooled_features(&splits.train, &all_train, None)?;
                let head = engine::mask_head(&model, &feats, &forgotten)?;
                let curve = engine::recovery_probe(
                    &model,
                    None,
                    Some(head),
                    &splits,
                    &all_train,
                    &forgotten,
                    &retained,
                    &probe,
                )?;
                (curve, "recovery_control.csv")
            } else {
                let path = lora.ok_or_else(|| Error::validation("--lora is required unless --control is set"))?;
                let mut adapters = load_adapters(&cfg, &model, &path)?;
                let t = adapters.task() as usize;
                adapters.merge();
                let forgotten: Vec<usize> = cfg
                    .tasks
                    .get(..t)
                    .ok_or_else(|| Error::validation(format!("config has fewer than {t} tasks")))?
                    .iter()
                    .flat_map(|t| t.forget.iter().copied())
                    .collect();
                let retained: Vec<usize> =
                    (0..cfg.dataset.num_classes).filter(|k| !forgotten.contains(k)).collect();
                let curve = engine::recovery_probe(
                    &model,
                    Some(&adapters),
                    None,
                    &splits,
                    &all_train,
                    &forgotten,
                    &retained,
                    &probe,
                )?;
                (curve, "recovery.csv")
            };
            let path = dir.join(name);
            write_curve(&path, &curve)?;
            write_manifest("recover", &cfg, &dir, vec![path.clone()])?;
            for p in &curve {
                println!("epoch {:>3}  acc_f {:>6.2}  acc_r {:>6.2}", p.epoch, p.acc_f, p.acc_r);
            }
            Ok(())
        }
        Command::Report { metrics: path, csv } => {
            let records = metrics::load_csv(&path)?;
            let mut table = Vec::new();
            write_table(&mut table, &records)?;
            print!("{}", String::from_utf8_lossy(&table));
            let out = csv.unwrap_or_else(|| path.with_file_name("report.csv"));
            let mut buf = Vec::new();
            write_long_csv(&mut buf, &records)?;
            write_atomic(&out, &buf)?;
            let manifest = serde_json::json!({
                "command": "report",
                "metrics": path,
                "outputs": [out],
                "crate_version": env!("CARGO_PKG_VERSION"),
            });
            let mpath = out.with_file_name("report.manifest.json");
            write_atomic(&mpath, manifest.to_string().as_bytes())?;
            Ok(())
        }
    }
}

/// Rebuilds the metrics record of the adapters' task: accuracies before it
/// come from the merged history alone.
pub fn eval_record(
    cfg: &ExperimentConfig,
    model: &TransformerClassifier,
    adapters: &LoraSet,
    splits: &Splits,
) -> Result<MetricsRecord> {
    let t = adapters.task() as usize;
    if t == 0 || t > cfg.tasks.len() {
        return Err(Error::validation(format!(
            "adapter checkpoint is for task {t}, config schedules {}",
            cfg.tasks.len()
        )));
    }
    let current = &cfg.tasks[t - 1].forget;
    let previous: Vec<usize> = cfg.tasks[..t - 1].iter().flat_map(|x| x.forget.iter().copied()).collect();
    let mut before = adapters.clone();
    before.pairs_mut().iter_mut().for_each(|p| p.b.data_mut().fill(0.0));
    let acc_f_before = accuracy(model, Some(&before), &splits.test, current)?;
    let zero = adapters.zero_group_ratio(cfg.lora.zero_eps);
    let tunable = metrics::tunable_ratio(model, adapters);
    let mut merged = adapters.clone();
    merged.merge();
    let retained: Vec<usize> = (0..cfg.dataset.num_classes)
        .filter(|k| !previous.contains(k) && !current.contains(k))
        .collect();
    let acc_r = if retained.is_empty() {
        0.0
    } else {
        accuracy(model, Some(&merged), &splits.test, &retained)?
    };
    let acc_f = accuracy(model, Some(&merged), &splits.test, current)?;
    let acc_o = if previous.is_empty() {
        None
    } else {
        Some(accuracy(model, Some(&merged), &splits.test, &previous)?)
    };
    Ok(MetricsRecord::new(t as u32, acc_r, acc_f_before, acc_f, acc_o, zero, tunable))
}

fn write_curve(path: &Path, curve: &[RecoveryPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in curve {
        w.serialize(p)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Aligned table with one row per task.
pub fn write_table<W: Write>(w: &mut W, records: &[MetricsRecord]) -> Result<()> {
    let header = ["Task", "Acc_r", "Acc_f", "Acc_o", "Drop", "H-Mean", "Zero ratio", "Tunable %"];
    let rows: Vec<[String; 8]> = records
        .iter()
        .map(|r| {
            [
                r.task.to_string(),
                format!("{:.2}", r.acc_r),
                format!("{:.2}", r.acc_f),
                fmt_opt(r.acc_o),
                format!("{:.2}", r.drop),
                format!("{:.2}", r.h_mean),
                format!("{:.3}", r.zero_group_ratio),
                format!("{:.3}", 100.0 * r.tunable_ratio),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let io = |e| Error::io("<report>", e);
    writeln!(w, "{}", line(header.to_vec())).map_err(io)?;
    let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    writeln!(w, "{}", "-".repeat(total)).map_err(io)?;
    for r in &rows {
        writeln!(w, "{}", line(r.iter().map(String::as_str).collect())).map_err(io)?;
    }
    Ok(())
}

/// `task,metric,value` rows; absent values are skipped.
pub fn write_long_csv<W: Write>(w: W, records: &[MetricsRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["task", "metric", "value"])?;
    for r in records {
        let t = r.task.to_string();
        let fields = [
            ("acc_r", Some(r.acc_r)),
            ("acc_f", Some(r.acc_f)),
            ("acc_o", r.acc_o),
            ("drop", Some(r.drop)),
            ("h_mean", Some(r.h_mean)),
            ("zero_group_ratio", Some(r.zero_group_ratio)),
            ("tunable_ratio", Some(r.tunable_ratio)),
        ];
        for (name, v) in fields {
            if let Some(v) = v {
                out.write_record([t.as_str(), name, &v.to_string()])?;
            }
        }
    }
    out.flush().map_err(|e| Error::io("<report csv>", e))?;
    Ok(())
}
