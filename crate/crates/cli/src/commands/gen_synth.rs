use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use treegen_core::SurrogateProperty;

use super::{echo, load_vocab, output, with_seed};
use crate::error::{data, Result};
use crate::settings::{required, resolve};
use crate::synth::{generate, seed_vocab, SynthMolecule};

#[derive(clap::Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(default)]
pub struct Args {
    /// Seed vocabulary with hand-set valences (default: the bundled one).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Output SMILES file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output property CSV (default: --out with a .csv extension).
    #[arg(long)]
    pub props_out: Option<PathBuf>,
    #[arg(skip)]
    pub seed: Option<u64>,
}
with_seed!(Args);

fn defaults() -> Args {
    Args {
        n: Some(10_000),
        max_len: Some(64),
        seed: Some(0),
        ..Args::default()
    }
}

pub fn run(flags: Args, config: Option<&Path>) -> Result<Vec<SynthMolecule>> {
    let a = resolve("gen-synth", config, &flags, &defaults())?;
    let out = required(&a.out, "out")?;
    let props_out = a.props_out.clone().unwrap_or_else(|| out.with_extension("csv"));
    let vocab = match &a.vocab {
        Some(p) => load_vocab(p)?,
        None => seed_vocab(),
    };
    let mols = generate(&vocab, a.n.unwrap_or(10_000), a.max_len.unwrap_or(64), a.seed.unwrap_or(0))?;
    let header = format!("# treegen gen-synth {}\n", echo(&a));

    let mut w = output(Some(&out))?;
    w.write_all(header.as_bytes()).map_err(data(out.display()))?;
    for m in &mols {
        writeln!(w, "{}", m.smiles).map_err(data(out.display()))?;
    }
    w.flush().map_err(data(out.display()))?;

    let mut w = output(Some(&props_out))?;
    w.write_all(header.as_bytes()).map_err(data(props_out.display()))?;
    let names: Vec<&str> = SurrogateProperty::ALL.iter().map(|p| p.name()).collect();
    writeln!(w, "{}", names.join(",")).map_err(data(props_out.display()))?;
    for m in &mols {
        let cells: Vec<String> = m.props.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{}", cells.join(",")).map_err(data(props_out.display()))?;
    }
    w.flush().map_err(data(props_out.display()))?;
    println!("{} molecules -> {}, properties -> {}", mols.len(), out.display(), props_out.display());
    Ok(mols)
}
