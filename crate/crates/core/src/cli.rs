//! Command-line entry point.
//!
//! Exit codes: 0 on success (and `--help`), 1 for usage and validation
//! errors, 2 for runtime, I/O and numerical failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::datagen::{generate_dataset, load_dataset, write_dataset, DatasetSpec, PairedSample, Split};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_rows, data_efficiency_rows, evaluate, mean_accuracy_by_config, sweep, write_csv, SweepData,
    SweepRecord,
};
use crate::model::{load_checkpoint, LoadMode};
use crate::parallel::init_threads;
use crate::train::{
    finetune_segmentation, load_train_state, parse_override, pretrain_with, subsample_split, FinetuneMode,
    PretrainOptions, SegmentationModel, Task, TrainConfig, TrainState,
};

#[derive(Debug, Parser)]
#[command(name = "crossvideo", version, about = "Cross-modal contrastive pretraining for point cloud videos")]
struct Cli {
    /// JSON config file; missing keys take defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set encoder.feature_dim=32`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Seed for data generation and training; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true, default_value = "info", value_name = "LEVEL")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic paired dataset.
    Datagen(DatagenArgs),
    /// Contrastive pretraining on the pretrain split.
    Pretrain(PretrainArgs),
    /// Fine-tune a segmentation model on the train split.
    Finetune(FinetuneArgs),
    /// Score a fine-tuned model on the test split.
    Eval(EvalArgs),
    /// Linear-probe comparison of the full objective against loss-term ablations.
    Ablate(AblateArgs),
    /// Data-efficiency sweep: pretrained vs scratch fine-tuning over data fractions.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct DatagenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Labelled sequences; a fifth go to the test split, the rest to train.
    #[arg(long, default_value_t = 100)]
    sequences: usize,
    /// Extra unlabelled-use sequences for pretraining. Without them the
    /// pretrain split reuses the train sequences.
    #[arg(long, default_value_t = 0)]
    pretrain_sequences: usize,
    #[arg(long, default_value_t = 8)]
    frames: u32,
    #[arg(long, default_value_t = 128)]
    points: u32,
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [32, 32])]
    image_size: Vec<u32>,
}

#[derive(Debug, Args)]
struct DataArg {
    /// Dataset root written by `datagen`. Without it the dataset described
    /// by the config's `data` section is generated in memory.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArg,
    /// Receives `state.ckpt`, `model.ckpt` and `config.json`.
    #[arg(long)]
    out: PathBuf,
    /// Continue from `<out>/state.ckpt` if it exists.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long, default_value = "action")]
    task: Task,
    #[arg(long, default_value = "full")]
    mode: FinetuneMode,
    /// Pretrained model checkpoint; required unless `--mode scratch`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fraction of the train split to use.
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    /// Receives `model.ckpt` and `config.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long, default_value = "report.json")]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArg,
    /// Loss terms to disable together, joined by `+` or `,`. Each use adds one variant.
    #[arg(long, required = true)]
    disable: Vec<String>,
    /// Number of seeds, counted up from `--seed`.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value = "action")]
    task: Task,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.4, 0.8])]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value = "action")]
    task: Task,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_target(false)
        .try_init();
    if let Err(e) = init_threads(cli.threads) {
        log::warn!("thread pool already configured: {e}");
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let base = match &cli.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    let overrides = cli
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = base.with_overrides(&overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.data.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Short content hash of the command and its effective configuration.
fn run_id(command: &str, echo: &Value) -> String {
    let digest = Sha256::digest(format!("{command}\n{echo}").as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn write_echo(dir: &Path, command: &str, echo: &Value) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id = run_id(command, echo);
    log::info!("run {id}: {command}");
    log::debug!("config {echo}");
    let doc = json!({ "run_id": id, "command": command, "config": echo });
    let text = serde_json::to_string_pretty(&doc).expect("plain data");
    crate::datagen::atomic_write_file(&dir.join("config.json"), text.as_bytes())?;
    Ok(id)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Datagen(a) => datagen(cli, a),
        Command::Pretrain(a) => pretrain_cmd(cli, a),
        Command::Finetune(a) => finetune_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Ablate(a) => ablate_cmd(cli, a),
        Command::Sweep(a) => sweep_cmd(cli, a),
    }
}

fn datagen(cli: &Cli, a: &DatagenArgs) -> Result<()> {
    if cli.config.is_some() || !cli.overrides.is_empty() {
        return Err(Error::validation("datagen", "takes no config; use the datagen flags"));
    }
    let test = a.sequences / 5;
    let spec = DatasetSpec {
        pretrain: a.pretrain_sequences,
        train: a.sequences - test,
        test,
        frames: a.frames,
        points: a.points,
        image_size: (a.image_size[0], a.image_size[1]),
        seed: cli.seed.unwrap_or(0),
        ..DatasetSpec::default()
    };
    let echo = serde_json::to_value(&spec).expect("plain data");
    let data = generate_dataset(&spec)?;
    let pretrain = if data.pretrain.is_empty() { &data.train } else { &data.pretrain };
    write_dataset(
        &a.out,
        &[(Split::Pretrain, pretrain), (Split::Train, &data.train), (Split::Test, &data.test)],
    )?;
    write_echo(&a.out, "datagen", &echo)?;
    log::info!(
        "wrote {} train, {} test, {} pretrain sequences to {}",
        data.train.len(),
        data.test.len(),
        pretrain.len(),
        a.out.display()
    );
    Ok(())
}

fn load_split(data: &DataArg, cfg: &TrainConfig, split: Split) -> Result<Vec<PairedSample>> {
    match &data.data {
        Some(root) => load_dataset(root, split),
        None => {
            let mut d = generate_dataset(&cfg.data)?;
            Ok(match split {
                Split::Pretrain => d.pretrain,
                Split::Train => std::mem::take(&mut d.train),
                Split::Test => d.test,
            })
        }
    }
}

fn pretrain_cmd(cli: &Cli, a: &PretrainArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let echo = cfg.to_value();
    write_echo(&a.out, "pretrain", &echo)?;
    let dataset = load_split(&a.data, &cfg, Split::Pretrain)?;
    let state_path = a.out.join("state.ckpt");
    let state = if a.resume && state_path.exists() {
        let s = load_train_state(&state_path)?;
        if s.config != cfg {
            return Err(Error::validation("resume", "saved state was trained with a different config"));
        }
        log::info!("resuming after epoch {}", s.epoch);
        s
    } else {
        TrainState::new(&cfg)?
    };
    let opts = PretrainOptions {
        checkpoint_dir: Some(a.out.clone()),
        echo: Some(echo),
        ..PretrainOptions::default()
    };
    let state = pretrain_with(&dataset, state, &opts)?;
    if state.epoch == 0 {
        crate::model::checkpoint::save_checkpoint_with(&state.model, cfg.to_value(), &a.out.join("model.ckpt"))?;
    }
    log::info!("final loss {:?}", state.epoch_losses.last());
    Ok(())
}

fn finetune_cmd(cli: &Cli, a: &FinetuneArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let init = match (&a.checkpoint, a.mode) {
        (Some(p), _) => Some(load_checkpoint(p, LoadMode::PointBranch)?),
        (None, FinetuneMode::Scratch) => None,
        (None, _) => {
            return Err(Error::validation("checkpoint", format!("--mode {} needs --checkpoint", a.mode)))
        }
    };
    let echo = json!({ "train": cfg.to_value(), "task": a.task, "mode": a.mode, "fraction": a.fraction });
    write_echo(&a.out, "finetune", &echo)?;
    let train = load_split(&a.data, &cfg, Split::Train)?;
    let train = subsample_split(&train, a.fraction, cfg.seed)?;
    log::info!("fine-tuning on {} sequences", train.len());
    let model = finetune_segmentation(&train, init.as_ref(), &cfg, a.mode, a.task)?;
    model.save(&a.out.join("model.ckpt"), echo)
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let model = SegmentationModel::load(&a.checkpoint)?;
    let task = a.task.unwrap_or(model.task);
    if task != model.task {
        return Err(Error::validation(
            "task",
            format!("checkpoint was trained for {}, not {task}", model.task),
        ));
    }
    let test = load_split(&a.data, &cfg, Split::Test)?;
    let mut report = evaluate(&model, &test, task, model.num_classes)?;
    report.config_echo = cfg.to_value();
    report.seed = cfg.seed;
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    report.write_json(&a.report)?;
    log::info!("accuracy {:.2}", report.accuracy);
    println!("{}", serde_json::to_string_pretty(&report).expect("plain data"));
    Ok(())
}

fn sweep_data(data: &DataArg, cfg: &TrainConfig) -> Result<[Vec<PairedSample>; 3]> {
    match &data.data {
        Some(root) => Ok([
            load_dataset(root, Split::Pretrain)?,
            load_dataset(root, Split::Train)?,
            load_dataset(root, Split::Test)?,
        ]),
        None => {
            let d = generate_dataset(&cfg.data)?;
            Ok([d.pretrain, d.train, d.test])
        }
    }
}

fn report_records(records: &[SweepRecord], out: &Path, name: &str) -> Result<()> {
    let path = out.join(name);
    write_csv(records, &path)?;
    for (config, acc) in mean_accuracy_by_config(records) {
        println!("{config}\t{acc:.2}");
    }
    log::info!("wrote {}", path.display());
    Ok(())
}

fn ablate_cmd(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let disabled: Vec<Vec<String>> = a
        .disable
        .iter()
        .map(|s| s.split(['+', ',']).map(|t| t.trim().to_string()).collect())
        .collect();
    let seeds: Vec<u64> = (0..a.seeds.max(1)).map(|k| cfg.seed + k).collect();
    let rows = ablation_rows(&disabled, &seeds, a.task)?;
    let echo = json!({ "train": cfg.to_value(), "disable": a.disable, "seeds": seeds, "task": a.task });
    write_echo(&a.out, "ablate", &echo)?;
    let [p, t, s] = sweep_data(&a.data, &cfg)?;
    let records = sweep(&rows, &SweepData { pretrain: &p, train: &t, test: &s }, &cfg)?;
    report_records(&records, &a.out, "ablation.csv")
}

fn sweep_cmd(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let seeds: Vec<u64> = (0..a.seeds.max(1)).map(|k| cfg.seed + k).collect();
    let rows = data_efficiency_rows(&a.fractions, &seeds, a.task);
    let echo = json!({ "train": cfg.to_value(), "fractions": a.fractions, "seeds": seeds, "task": a.task });
    write_echo(&a.out, "sweep", &echo)?;
    let [p, t, s] = sweep_data(&a.data, &cfg)?;
    let records = sweep(&rows, &SweepData { pretrain: &p, train: &t, test: &s }, &cfg)?;
    report_records(&records, &a.out, "sweep.csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_depends_on_config() {
        let a = run_id("pretrain", &json!({"seed": 0}));
        assert_eq!(a.len(), 12);
        assert_eq!(a, run_id("pretrain", &json!({"seed": 0})));
        assert_ne!(a, run_id("pretrain", &json!({"seed": 1})));
    }

    #[test]
    fn parser_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
