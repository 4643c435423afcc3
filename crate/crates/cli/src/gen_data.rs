use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cropforge::dataset::{generate_split, GeneratorParams, SchemaKind};
use cropforge::querying::{default_concepts, read_word_list};

use crate::user;

#[derive(clap::Args)]
pub struct Args {
    /// Output root; splits go to OUT/train, OUT/val and OUT/test.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 20)]
    val: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    /// Concept list, one id per line ('#' starts a comment). Defaults to the built-in 16 concepts.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, env = "CROPFORGE_SEED", default_value_t = 0)]
    seed: u64,
    /// Annotation schema: dense (scored proposals), annotators (boxes) or both.
    #[arg(long, default_value = "both")]
    schema: SchemaKind,
}

pub fn run(args: Args) -> anyhow::Result<ExitCode> {
    let concepts: Vec<String> = match &args.vocab {
        Some(path) => read_word_list(path).map_err(user)?.into_iter().collect(),
        None => default_concepts(),
    };
    let params = GeneratorParams::default();
    for (split, n) in [("train", args.train), ("val", args.val), ("test", args.test)] {
        if n == 0 {
            eprintln!("warning: split '{split}' is empty");
        }
        let ds = generate_split(split, n, &concepts, args.seed, args.schema, &params).map_err(user)?;
        let dir = args.out.join(split);
        ds.write(&dir).with_context(|| format!("writing {}", dir.display()))?;
        println!("{split}: {} samples, {} evaluation units -> {}", ds.len(), ds.num_units(), dir.display());
    }
    Ok(ExitCode::SUCCESS)
}
