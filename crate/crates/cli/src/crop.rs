use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use cropforge::autograd::Checkpoint;
use cropforge::boxgeom::BBox;
use cropforge::config::RunConfig;
use cropforge::decoder::DecoderModel;
use cropforge::encoder::{crop_pixels, pixel_rect, ppm_bytes, read_ppm, read_scene, EncoderInput};
use cropforge::querying::{build_queries, Condition, QueryMode};
use serde::Serialize;

use crate::{user, write_file};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    image: PathBuf,
    /// Scene metadata written next to the image by gen-data.
    #[arg(long)]
    meta: PathBuf,
    /// Text condition.
    #[arg(long, conflicts_with = "query_image", required_unless_present = "query_image")]
    text: Option<String>,
    /// Image condition (one-shot querying).
    #[arg(long)]
    query_image: Option<PathBuf>,
    #[arg(long, requires = "query_image")]
    query_meta: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 1)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
    /// Text query mode; defaults to the checkpoint's. Ignored for image queries.
    #[arg(long)]
    query_mode: Option<QueryMode>,
}

#[derive(Serialize)]
struct CropRecord {
    rank: usize,
    #[serde(rename = "box")]
    bbox: BBox,
    score: f64,
    query_index: usize,
    /// `[x0, y0, x1, y1]`, exclusive end.
    pixels: [u32; 4],
    file: String,
}

#[derive(Serialize)]
struct CropReport {
    image: String,
    condition: String,
    mode: QueryMode,
    union_box: BBox,
    config_hash: String,
    crops: Vec<CropRecord>,
}

pub fn run(args: Args) -> anyhow::Result<ExitCode> {
    if args.top_k == 0 {
        return Err(user(anyhow!("--top-k must be at least 1")));
    }
    let ckpt = Checkpoint::read(&args.ckpt).map_err(|e| user(anyhow!("{}: {e}", args.ckpt.display())))?;
    let cfg: RunConfig = serde_json::from_value(ckpt.metadata.config.clone())
        .map_err(|e| user(anyhow!("{}: checkpoint config: {e}", args.ckpt.display())))?;
    let model = DecoderModel::from_checkpoint(&ckpt, Some(&cfg.decoder)).map_err(user)?;
    if args.top_k > cfg.decoder.num_queries {
        return Err(user(anyhow!(
            "--top-k {} exceeds the model's {} queries",
            args.top_k,
            cfg.decoder.num_queries
        )));
    }
    let encoder = cfg.build_encoder().map_err(user)?;
    let lexicon = cfg.lexicon();

    let image = read_ppm(&args.image).map_err(user)?;
    let meta = read_scene(&args.meta).map_err(user)?;
    let input = EncoderInput::Pixels {
        image: image.clone(),
        meta: Some(meta),
    };
    let enc = encoder.encode(&input).map_err(user)?;

    let query_input;
    let (mode, condition, label) = match (&args.text, &args.query_image) {
        (Some(t), _) => (
            args.query_mode.unwrap_or(cfg.train.query_mode),
            Condition::Text(t),
            format!("text:{t}"),
        ),
        (None, Some(q)) => {
            let meta = match &args.query_meta {
                Some(p) => Some(read_scene(p).map_err(user)?),
                None => None,
            };
            query_input = EncoderInput::Pixels {
                image: read_ppm(q).map_err(user)?,
                meta,
            };
            (QueryMode::Image, Condition::Image(&query_input), format!("image:{}", q.display()))
        }
        (None, None) => unreachable!("clap requires a condition"),
    };
    let queries = build_queries(mode, condition, &lexicon, &encoder).map_err(user)?;
    let out = model.run(&encoder, &enc, &queries).map_err(user)?;
    let ranked = cropforge::decoder::rank(&out, args.top_k);

    std::fs::create_dir_all(&args.out).map_err(|e| anyhow!("{}: {e}", args.out.display()))?;
    let (w, h) = (image.width(), image.height());
    let mut crops = Vec::with_capacity(ranked.len());
    for (i, r) in ranked.iter().enumerate() {
        let file = format!("crop_{:02}.ppm", i + 1);
        let (x0, y0, x1, y1) = pixel_rect(&r.bbox, w, h);
        write_file(&args.out.join(&file), ppm_bytes(&crop_pixels(&image, &r.bbox))?)?;
        crops.push(CropRecord {
            rank: i + 1,
            bbox: r.bbox,
            score: r.score,
            query_index: r.query_index,
            pixels: [x0, y0, x1, y1],
            file,
        });
    }
    let report = CropReport {
        image: args.image.display().to_string(),
        condition: label,
        mode,
        union_box: out.union_box,
        config_hash: ckpt.metadata.config_hash.clone(),
        crops,
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_file(&args.out.join("crops.json"), json)?;
    for c in &report.crops {
        println!(
            "#{} score {:.4} box [{:.4}, {:.4}, {:.4}, {:.4}] -> {}",
            c.rank,
            c.score,
            c.bbox.cx,
            c.bbox.cy,
            c.bbox.w,
            c.bbox.h,
            args.out.join(&c.file).display()
        );
    }
    Ok(ExitCode::SUCCESS)
}
