//! `ume`: generate synthetic mixtures, train, evaluate and run inference.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ume::config::RunConfig;
use ume::dataset::{read_dataset, read_wav, write_dataset, MANIFEST_NAME};
use ume::encoder::Task;
use ume::eval::{evaluate, write_inference, EvalConfig};
use ume::model::UmeModel;
use ume::sim::generate_dataset;
use ume::train::{init_from_asr, load_checkpoint, pretrain_asr_config, train, InitMode, TrainConfig, TrainOptions};
use ume::{Result, UmeError};

#[derive(Parser)]
#[command(name = "ume", version, about = "Unified multi-speaker encoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic mixture dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the model on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from a pretrained ASR checkpoint.
        #[arg(long)]
        init_asr: Option<PathBuf>,
        /// Continue a run from one of its checkpoints.
        #[arg(long, conflicts_with = "init_asr")]
        resume: Option<PathBuf>,
    },
    /// Train the encoder and ASR head alone, for use with `train --init-asr`.
    PretrainAsr {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Supplies the `eval` section; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated subset of diar,sep,asr.
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
        /// DER collar in seconds; repeat for several.
        #[arg(long)]
        collar: Vec<f64>,
        /// Median filter width in frames (odd).
        #[arg(long)]
        median: Option<usize>,
        /// Score the references themselves instead of model outputs.
        #[arg(long)]
        oracle: bool,
    },
    /// Run every head on one WAV file.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                UmeError::Config { .. } => 2,
                UmeError::Diverged { .. } => 3,
                _ => 1,
            })
        }
    }
}

/// Caps worker threads at `UME_THREADS` when set.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("UME_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UmeError::config("UME_THREADS", format!("must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| UmeError::Invalid(format!("thread pool: {e}")))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { config, out, seed } => cmd_gen(&config, &out, seed),
        Command::Train {
            config,
            data,
            out,
            init_asr,
            resume,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(p) = init_asr {
                cfg.train.init = InitMode::AsrCheckpoint(p);
            }
            cfg.check_paths()?;
            cmd_train(&cfg, cfg.train.clone(), &data, &out, resume.as_deref())
        }
        Command::PretrainAsr { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let train_cfg = pretrain_asr_config(&cfg.train);
            cmd_train(&cfg, train_cfg, &data, &out, None)
        }
        Command::Eval {
            ckpt,
            data,
            out,
            config,
            tasks,
            collar,
            median,
            oracle,
        } => {
            let mut eval = eval_section(config.as_deref())?;
            if let Some(t) = tasks {
                eval.tasks = parse_tasks(&t)?;
            }
            if !collar.is_empty() {
                eval.collars = collar;
            }
            if let Some(m) = median {
                eval.median_frames = m;
            }
            eval.validate("eval")?;
            cmd_eval(&ckpt, &data, &out, &eval, oracle)
        }
        Command::Infer { ckpt, wav, out, config } => {
            let eval = eval_section(config.as_deref())?;
            cmd_infer(&ckpt, &wav, &out, &eval)
        }
    }
}

fn eval_section(config: Option<&Path>) -> Result<EvalConfig> {
    Ok(match config {
        Some(p) => RunConfig::load(p)?.eval,
        None => EvalConfig::default(),
    })
}

fn parse_tasks(names: &[String]) -> Result<Vec<Task>> {
    names
        .iter()
        .map(|n| {
            Task::ALL
                .into_iter()
                .find(|t| t.name() == n.trim())
                .ok_or_else(|| UmeError::config("--tasks", format!("unknown task {n:?}; expected diar, sep or asr")))
        })
        .collect()
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_NAME)
    } else {
        data.to_path_buf()
    }
}

fn cmd_gen(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let samples = generate_dataset(&cfg.data)?;
    let manifest = write_dataset(&samples, out)?;
    let seconds: f64 = samples.iter().map(|s| s.duration_seconds()).sum();
    println!(
        "{} items, {seconds:.2} s of audio, manifest {}",
        samples.len(),
        manifest.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, train_cfg: TrainConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    train_cfg.validate("train")?;
    let samples = read_dataset(&manifest_path(data))?;
    let (model, mut store, start_step) = match resume {
        Some(ckpt) => {
            let (model, store, meta) = load_checkpoint(ckpt)?;
            if model.cfg != cfg.model {
                return Err(UmeError::config(
                    "model",
                    format!("differs from the model stored in {}", ckpt.display()),
                ));
            }
            (model, store, meta.step)
        }
        None => {
            let (model, mut store) = UmeModel::new(&cfg.model, train_cfg.seed)?;
            if let InitMode::AsrCheckpoint(p) = &train_cfg.init {
                let loaded = init_from_asr(&mut store, p)?;
                println!("initialized {} tensors from {}", loaded.len(), p.display());
            }
            (model, store, 0)
        }
    };
    std::fs::create_dir_all(out).map_err(|e| UmeError::io(out, e))?;
    let resolved = RunConfig {
        train: train_cfg.clone(),
        ..cfg.clone()
    };
    let cfg_path = out.join("config.json");
    std::fs::write(&cfg_path, resolved.to_json()).map_err(|e| UmeError::io(&cfg_path, e))?;
    let outcome = train(
        &model,
        &mut store,
        &samples,
        &train_cfg,
        &TrainOptions {
            out_dir: Some(out.to_path_buf()),
            start_step,
        },
    )?;
    if let Some(last) = outcome.log.last() {
        println!("step {} L_all {}", last.step, last.losses.all);
    }
    for p in &outcome.checkpoints {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, out: &Path, eval: &EvalConfig, oracle: bool) -> Result<()> {
    let (model, store, _) = load_checkpoint(ckpt)?;
    let samples = read_dataset(&manifest_path(data))?;
    let report = evaluate(&model, &store, &samples, eval, oracle)?;
    std::fs::create_dir_all(out).map_err(|e| UmeError::io(out, e))?;
    report.write(&out.join("report.json"), &out.join("report.csv"))?;
    println!(
        "{}",
        serde_json::to_string(&report.aggregate).expect("aggregate serializes")
    );
    Ok(())
}

fn cmd_infer(ckpt: &Path, wav: &Path, out: &Path, eval: &EvalConfig) -> Result<()> {
    let (model, store, _) = load_checkpoint(ckpt)?;
    let (samples, sr) = read_wav(wav)?;
    let expected = model.cfg.sample_rate;
    if sr != expected {
        return Err(UmeError::Wav {
            path: wav.display().to_string(),
            msg: format!("sample rate {sr} Hz, model expects {expected} Hz"),
        });
    }
    let id = wav.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string();
    let inf = model.infer(&store, &samples)?;
    for p in write_inference(out, &id, &inf, sr, eval)? {
        println!("{}", p.display());
    }
    Ok(())
}
