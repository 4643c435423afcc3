use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use cropforge::autograd::Checkpoint;
use cropforge::config::RunConfig;
use cropforge::dataset::Dataset;
use cropforge::decoder::DecoderModel;
use cropforge::evalsuite::{evaluate, parse_metrics, read_predictions, EvalOptions, PredictionSource};
use cropforge::querying::QueryMode;

use crate::{split_dir, user, write_file};

#[derive(clap::Args)]
pub struct Args {
    /// Dataset root (or a split directory holding manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Split evaluated when DATA is a root.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, required_unless_present = "predictions")]
    ckpt: Option<PathBuf>,
    /// External predictions: JSON [{id, text_index, boxes: [[cx,cy,w,h]...], scores}]. Replaces --ckpt.
    #[arg(long, conflicts_with = "ckpt")]
    predictions: Option<PathBuf>,
    /// Comma-separated: iou (IoU-Mean/Max, annotator boxes), acc (ACC_1/5, ACC_1/10, dense proposals).
    #[arg(long, default_value = "iou")]
    metrics: String,
    #[arg(long)]
    report: PathBuf,
    /// Also write the aggregates as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Overrides the query mode stored in the checkpoint.
    #[arg(long)]
    query_mode: Option<QueryMode>,
    /// Ranked boxes kept per unit in the report.
    #[arg(long, default_value_t = 5)]
    record_k: usize,
}

pub fn run(args: Args) -> anyhow::Result<ExitCode> {
    let metrics = parse_metrics(&args.metrics).map_err(user)?;
    let ds = Dataset::load(&split_dir(&args.data, &args.split)).map_err(user)?;
    let report = match (&args.ckpt, &args.predictions) {
        (_, Some(path)) => {
            let records = read_predictions(path).map_err(user)?;
            let opts = EvalOptions {
                metrics,
                record_k: args.record_k,
                config: serde_json::Value::Null,
            };
            evaluate(&PredictionSource::Records(&records), &ds, &opts).map_err(user)?
        }
        (Some(path), None) => {
            let ckpt = Checkpoint::read(path).map_err(|e| user(anyhow!("{}: {e}", path.display())))?;
            let cfg: RunConfig = serde_json::from_value(ckpt.metadata.config.clone())
                .map_err(|e| user(anyhow!("{}: checkpoint config: {e}", path.display())))?;
            let model = DecoderModel::from_checkpoint(&ckpt, Some(&cfg.decoder)).map_err(user)?;
            let encoder = cfg.build_encoder().map_err(user)?;
            let lexicon = cfg.lexicon();
            let mode = args.query_mode.unwrap_or(cfg.train.query_mode);
            let source = PredictionSource::Model {
                model: &model,
                encoder: &encoder,
                lexicon: &lexicon,
                mode,
            };
            let opts = EvalOptions {
                metrics,
                record_k: args.record_k,
                config: ckpt.metadata.config.clone(),
            };
            evaluate(&source, &ds, &opts).map_err(user)?
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    write_file(&args.report, report.to_json())?;
    if let Some(csv) = &args.csv {
        write_file(csv, report.to_csv())?;
    }
    println!("{} units from split '{}' ({})", report.units, report.split, report.source);
    for (name, v) in report.aggregate_rows() {
        println!("  {name:<9} {v:.4}");
    }
    Ok(ExitCode::SUCCESS)
}
