use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use treegen_core::codec::{from_text, to_text};
use treegen_core::{decode, encode, is_isomorphic, parse_smiles, write_smiles, Order};

use super::{load_vocab, with_seed};
use crate::data::{parse_entries, read_smiles_file};
use crate::error::{data, CliError, Result};
use crate::settings::{required, resolve};

#[derive(clap::Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(default)]
pub struct EncodeArgs {
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// SMILES to encode.
    pub smiles: Option<String>,
    /// Use a random traversal order drawn from this seed (default: canonical).
    #[arg(long)]
    pub order_seed: Option<u64>,
    #[arg(skip)]
    pub seed: Option<u64>,
}
with_seed!(EncodeArgs);

#[derive(clap::Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(default)]
pub struct DecodeArgs {
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Whitespace-separated token text.
    pub tokens: Option<String>,
    #[arg(skip)]
    pub seed: Option<u64>,
}
with_seed!(DecodeArgs);

#[derive(clap::Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(default)]
pub struct RoundtripArgs {
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// SMILES file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Random traversal orders per molecule, in addition to the canonical one.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Check at most this many molecules.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(skip)]
    pub seed: Option<u64>,
}
with_seed!(RoundtripArgs);

pub fn encode_text(a: &EncodeArgs) -> Result<String> {
    let vocab = load_vocab(&required(&a.vocab, "vocab")?)?;
    let smiles = required(&a.smiles, "smiles")?;
    let g = parse_smiles(&smiles).map_err(data(&smiles))?;
    let order = a.order_seed.map_or(Order::Canonical, Order::Random);
    let t = encode(&g, &vocab, order).map_err(data(&smiles))?;
    Ok(to_text(&t, &vocab))
}

pub fn encode_cmd(flags: EncodeArgs, config: Option<&Path>) -> Result<()> {
    let a = resolve("encode", config, &flags, &EncodeArgs::default())?;
    println!("{}", encode_text(&a)?);
    Ok(())
}

pub fn decode_text(a: &DecodeArgs) -> Result<String> {
    let vocab = load_vocab(&required(&a.vocab, "vocab")?)?;
    let text = required(&a.tokens, "tokens")?;
    let t = from_text(&text, &vocab).map_err(data("tokens"))?;
    let g = decode(&t, &vocab).map_err(data("tokens"))?;
    write_smiles(&g).map_err(|e| CliError::Internal(e.to_string()))
}

pub fn decode_cmd(flags: DecodeArgs, config: Option<&Path>) -> Result<()> {
    let a = resolve("decode", config, &flags, &DecodeArgs::default())?;
    println!("{}", decode_text(&a)?);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoundtripSummary {
    pub molecules: usize,
    pub checks: usize,
}

/// Encodes every molecule canonically and under `seeds` random orders
/// (streams derived from the global seed) and checks each decode is
/// isomorphic to the input. A mismatch is an internal error.
pub fn roundtrip_cmd(flags: RoundtripArgs, config: Option<&Path>) -> Result<RoundtripSummary> {
    let defaults = RoundtripArgs {
        seeds: Some(20),
        limit: Some(1000),
        seed: Some(0),
        ..RoundtripArgs::default()
    };
    let a = resolve("roundtrip-check", config, &flags, &defaults)?;
    let vocab = load_vocab(&required(&a.vocab, "vocab")?)?;
    let path = required(&a.data, "data")?;
    let entries = read_smiles_file(&path)?;
    let limit = a.limit.unwrap_or(1000).min(entries.len());
    let graphs = parse_entries(&path, &entries[..limit])?;
    let base = a.seed.unwrap_or(0).wrapping_mul(1_000_003);
    let mut summary = RoundtripSummary { molecules: 0, checks: 0 };
    for ((line, smiles), g) in entries.iter().zip(&graphs) {
        let Some(g) = g else { continue };
        summary.molecules += 1;
        let orders = std::iter::once(Order::Canonical).chain((0..a.seeds.unwrap_or(20)).map(|s| Order::Random(base.wrapping_add(s))));
        for order in orders {
            let t = encode(g, &vocab, order).map_err(|e| CliError::Data(format!("{}:{line}: {e}", path.display())))?;
            let back = decode(&t, &vocab).map_err(|e| CliError::Internal(format!("{}:{line} ({order:?}): {e}", path.display())))?;
            if !is_isomorphic(g, &back) {
                return Err(CliError::Internal(format!(
                    "{}:{line}: {smiles} ({order:?}) decoded to a different molecule",
                    path.display()
                )));
            }
            summary.checks += 1;
        }
    }
    println!("{} molecules, {} round trips, all isomorphic", summary.molecules, summary.checks);
    Ok(summary)
}
