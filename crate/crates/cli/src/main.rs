//! `cropforge`: data generation, training, evaluation and conditioned cropping.

mod crop;
mod eval;
mod gen_data;
mod gradcheck;
mod train;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cropforge", version, about = "Text- and image-conditioned aesthetic cropping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/val/test splits.
    GenData(gen_data::Args),
    /// Train the crop decoder and write a checkpoint plus a JSON-lines log.
    Train(train::Args),
    /// Score a checkpoint or a prediction file on a split.
    Eval(eval::Args),
    /// Crop one image by a text or image query.
    Crop(crop::Args),
    /// Run the finite-difference gradient suite.
    Gradcheck(gradcheck::Args),
}

/// An error caused by the command's inputs; exits with status 2.
#[derive(Debug)]
pub struct UserInput(pub anyhow::Error);

impl fmt::Display for UserInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&describe(&self.0))
    }
}

/// The error chain joined by ": ", skipping causes the parent message already
/// spells out.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        if cause.is::<UserInput>() {
            continue;
        }
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

impl std::error::Error for UserInput {}

/// Wraps any error as a user-input error.
pub fn user<E: Into<anyhow::Error>>(e: E) -> anyhow::Error {
    anyhow::Error::new(UserInput(e.into()))
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| anyhow::anyhow!("{}: {e}", parent.display()))?;
    }
    std::fs::write(path, contents).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

/// A split directory: `dir` itself when it holds a manifest, else `dir/split`.
pub fn split_dir(dir: &Path, split: &str) -> PathBuf {
    if dir.join("manifest.json").is_file() {
        dir.to_path_buf()
    } else {
        dir.join(split)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Crop(a) => crop::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            if let Some(u) = e.downcast_ref::<UserInput>() {
                eprintln!("error: {u}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {}", describe(&e));
                ExitCode::from(1)
            }
        }
    }
}
