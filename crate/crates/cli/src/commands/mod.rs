use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;
use treegen_core::Vocab;

use crate::error::{data, CliError, Result};

pub mod build_vocab;
pub mod codec;
pub mod evaluate;
pub mod gen_synth;
pub mod predict;
pub mod sample;
pub mod train;

#[derive(Parser, Debug)]
#[command(name = "treegen", version, about = "Property-conditioned molecule generation over spanning-tree token sequences")]
pub struct Cli {
    /// JSON settings file; command-line flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sampling (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Induce a vocabulary and fit a property spec from a dataset.
    BuildVocab(build_vocab::Args),
    /// Generate a synthetic corpus by random walks through the validity mask.
    GenSynth(gen_synth::Args),
    /// Train a model.
    Train(train::Args),
    /// Generate molecules for property targets.
    Sample(sample::Args),
    /// Compute validity, uniqueness, novelty, MinMAE and diversity of samples.
    Evaluate(evaluate::Args),
    /// Predict properties of molecules with a trained model.
    Predict(predict::Args),
    /// Print the token sequence of a SMILES string.
    Encode(codec::EncodeArgs),
    /// Print the SMILES string of a token sequence.
    Decode(codec::DecodeArgs),
    /// Check decode(encode(g)) against g over random traversal orders.
    RoundtripCheck(codec::RoundtripArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    let job = move || {
        let cfg = cli.config.as_deref();
        match cli.command {
            Command::BuildVocab(a) => build_vocab::run(a.with_seed(cli.seed), cfg).map(drop),
            Command::GenSynth(a) => gen_synth::run(a.with_seed(cli.seed), cfg).map(drop),
            Command::Train(a) => train::run(a.with_seed(cli.seed), cfg).map(drop),
            Command::Sample(a) => sample::run(a.with_seed(cli.seed), cfg).map(drop),
            Command::Evaluate(a) => evaluate::run(a.with_seed(cli.seed), cfg).map(drop),
            Command::Predict(a) => predict::run(a.with_seed(cli.seed), cfg).map(drop),
            Command::Encode(a) => codec::encode_cmd(a.with_seed(cli.seed), cfg),
            Command::Decode(a) => codec::decode_cmd(a.with_seed(cli.seed), cfg),
            Command::RoundtripCheck(a) => codec::roundtrip_cmd(a.with_seed(cli.seed), cfg).map(drop),
        }
    };
    match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::Internal(e.to_string()))?
            .install(job),
        None => job(),
    }
}

/// Every settings struct carries the global seed.
pub(crate) trait WithSeed: Sized {
    fn seed_mut(&mut self) -> &mut Option<u64>;

    fn with_seed(mut self, seed: Option<u64>) -> Self {
        if seed.is_some() {
            *self.seed_mut() = seed;
        }
        self
    }
}

macro_rules! with_seed {
    ($t:ty) => {
        impl $crate::commands::WithSeed for $t {
            fn seed_mut(&mut self) -> &mut Option<u64> {
                &mut self.seed
            }
        }
    };
}
pub(crate) use with_seed;

pub(crate) fn echo<T: Serialize>(settings: &T) -> Value {
    serde_json::to_value(settings).expect("settings serialize")
}

pub(crate) fn load_vocab(path: &Path) -> Result<Vocab> {
    Vocab::load(path).map_err(data(path.display()))
}

/// Buffered output to a file, or stdout when `path` is `None`.
pub(crate) fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p).map_err(data(p.display()))?)),
        None => Box::new(std::io::BufWriter::new(std::io::stdout())),
    })
}

pub(crate) fn write_line(w: &mut dyn Write, value: &Value) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| CliError::Data(e.to_string()))?;
    w.write_all(b"\n").map_err(data("write"))
}
