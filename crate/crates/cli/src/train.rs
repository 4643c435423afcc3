use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use cropforge::autograd::{Checkpoint, CheckpointMeta};
use cropforge::config::RunConfig;
use cropforge::dataset::Dataset;
use cropforge::decoder::DecoderModel;
use cropforge::querying::QueryMode;
use cropforge::training::{train, TrainState, TrainingData};

use crate::{split_dir, user};

#[derive(clap::Args)]
pub struct Args {
    /// Dataset root from gen-data; trains on DATA/train and probes on DATA/val when present.
    #[arg(long)]
    data: PathBuf,
    /// JSON run config (sections encoder, decoder, train, concepts). Missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path; rewritten after every epoch.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines epoch log. Defaults to the checkpoint path with a .log.jsonl suffix.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Query construction: both, main, key or none (the base variant).
    #[arg(long)]
    query_mode: Option<QueryMode>,
    /// Train on single images only.
    #[arg(long)]
    no_mosaic: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, env = "CROPFORGE_SEED")]
    seed: Option<u64>,
    /// Continue from this checkpoint; epoch numbering picks up where it stopped.
    #[arg(long)]
    resume: Option<PathBuf>,
}

pub fn log_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".log.jsonl");
    out.with_file_name(name)
}

fn effective_config(args: &Args, resumed: Option<&Checkpoint>) -> anyhow::Result<RunConfig> {
    let mut cfg = match (&args.config, resumed) {
        (Some(path), _) => RunConfig::read(path).map_err(user)?,
        (None, Some(ckpt)) => serde_json::from_value(ckpt.metadata.config.clone())
            .map_err(|e| user(anyhow!("checkpoint config: {e}")))?,
        (None, None) => RunConfig::default(),
    };
    if let Some(m) = args.query_mode {
        cfg.train.query_mode = m;
    }
    if args.no_mosaic {
        cfg.train.mosaic_enabled = false;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.data = Some(args.data.display().to_string());
    Ok(cfg)
}

pub fn run(args: Args) -> anyhow::Result<ExitCode> {
    let resumed = match &args.resume {
        Some(p) => Some(Checkpoint::read(p).map_err(|e| user(anyhow!("{}: {e}", p.display())))?),
        None => None,
    };
    let mut cfg = effective_config(&args, resumed.as_ref())?;
    let train_ds = Dataset::load(&split_dir(&args.data, "train")).map_err(user)?;
    if cfg.concepts.is_empty() {
        cfg.concepts = train_ds.manifest.vocabulary.clone();
    }
    let cfg = cfg.checked().map_err(user)?;
    let val_dir = args.data.join("val");
    let probe = if val_dir.join("manifest.json").is_file() {
        Some(Dataset::load(&val_dir).map_err(user)?).filter(|d| !d.is_empty())
    } else {
        None
    };
    let encoder = cfg.build_encoder().map_err(user)?;
    let lexicon = cfg.lexicon();

    let state = match &resumed {
        Some(ckpt) => {
            let model = DecoderModel::from_checkpoint(ckpt, Some(&cfg.decoder)).map_err(user)?;
            TrainState {
                model,
                optimizer: ckpt.optimizer_state()?.unwrap_or_default(),
                epoch: ckpt.metadata.epoch as usize,
            }
        }
        None => TrainState::fresh(DecoderModel::init(cfg.decoder.clone(), cfg.train.seed)?),
    };

    let log_file = args.log.clone().unwrap_or_else(|| log_path(&args.out));
    if let Some(parent) = log_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut log = File::create(&log_file).with_context(|| log_file.display().to_string())?;
    let meta = |epoch: usize| CheckpointMeta {
        config_hash: cfg.hash(),
        epoch: epoch as u64,
        seed: cfg.train.seed,
        config: cfg.to_value(),
    };
    let save = |state: &TrainState| -> anyhow::Result<()> {
        let ckpt = state.model.to_checkpoint(meta(state.epoch), Some(&state.optimizer));
        crate::write_file(&args.out, ckpt.to_json())
    };

    println!(
        "training {} samples for epochs {}..={} (mode {}, mosaic {}, config {})",
        train_ds.len(),
        state.epoch + 1,
        cfg.train.epochs,
        cfg.train.query_mode,
        if cfg.train.mosaic_enabled { "on" } else { "off" },
        &cfg.hash()[..12]
    );
    let data = TrainingData {
        encoder: &encoder,
        lexicon: &lexicon,
        train: &train_ds,
        probe: probe.as_ref(),
    };
    let mut io_err: Option<anyhow::Error> = None;
    let final_state = train(data, &cfg.train, state, |line, st| {
        let json = serde_json::to_string(line).expect("log line serializes");
        let r = writeln!(log, "{json}").map_err(anyhow::Error::from).and_then(|_| save(st));
        if let Err(e) = r {
            io_err = Some(e);
            return Err(cropforge::training::TrainError::Data("could not write training outputs".into()));
        }
        let probe = line.probe_iou_max.map_or(String::from("-"), |p| format!("{p:.4}"));
        println!(
            "epoch {:>3}  lr {:.3e}  total {:.4}  l1 {:.4}  giou {:.4}  score {:.4}  probe {probe}  fallbacks {}",
            line.epoch, line.lr, line.total, line.l1_box, line.giou_box, line.score, line.fallback_filter_count
        );
        Ok(())
    });
    if let Some(e) = io_err {
        return Err(e);
    }
    let final_state = final_state?;
    // epochs=0 or an already finished resume still leaves a checkpoint behind
    save(&final_state)?;
    println!("wrote {} and {}", args.out.display(), log_file.display());
    Ok(ExitCode::SUCCESS)
}
