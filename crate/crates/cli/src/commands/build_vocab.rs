use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use treegen_core::Vocab;
use treegen_model::PropertySpec;

use super::{echo, with_seed};
use crate::data::{column_kinds, extract_columns, load_dataset, read_props_table, split_of, write_spec, Split};
use crate::error::{data, CliError, Result};
use crate::settings::{required, resolve};

#[derive(clap::Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(default)]
pub struct Args {
    /// SMILES file, one molecule per line.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Property CSV with a header row, one row per molecule; empty cell = missing.
    #[arg(long)]
    pub props: Option<PathBuf>,
    /// Output vocabulary JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output property spec JSON (default: next to --out with a .spec.json suffix).
    #[arg(long)]
    pub spec_out: Option<PathBuf>,
    /// Largest ring-closure index.
    #[arg(long)]
    pub r_max: Option<usize>,
    /// Property columns holding integer category ids.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    /// Keep raw property units (mean 0, std 1).
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(skip)]
    pub seed: Option<u64>,
}
with_seed!(Args);

fn defaults() -> Args {
    Args {
        r_max: Some(treegen_core::vocab::DEFAULT_R_MAX),
        seed: Some(0),
        ..Args::default()
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub vocab: Vocab,
    pub spec: PropertySpec,
    pub molecules: usize,
}

pub fn spec_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "vocab".into());
    out.with_file_name(format!("{stem}.spec.json"))
}

pub fn run(flags: Args, config: Option<&Path>) -> Result<Outcome> {
    let a = resolve("build-vocab", config, &flags, &defaults())?;
    let data_path = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let r_max = a.r_max.unwrap_or(treegen_core::vocab::DEFAULT_R_MAX);

    let (columns, table) = match &a.props {
        Some(p) => {
            let table = read_props_table(p)?;
            for c in &a.categorical {
                if !table.header.contains(c) {
                    return Err(CliError::Usage(format!("--categorical names unknown column `{c}`")));
                }
            }
            let provisional: Vec<_> = table
                .header
                .iter()
                .map(|h| {
                    let kind = if a.categorical.contains(h) {
                        treegen_model::PropertyKind::Categorical { cardinality: usize::MAX }
                    } else {
                        treegen_model::PropertyKind::Continuous
                    };
                    (h.clone(), kind)
                })
                .collect();
            let raw = extract_columns(p, &table, &provisional)?;
            (column_kinds(&table, &raw, &a.categorical), Some((p.clone(), table)))
        }
        None => (Vec::new(), None),
    };
    let records = load_dataset(&data_path, table.as_ref().map(|(p, t)| (p.as_path(), t)), &columns)?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{} holds no molecules", data_path.display())));
    }
    let vocab = Vocab::induce(records.iter().map(|r| &r.graph), r_max).map_err(data(data_path.display()))?;
    let train_rows: Vec<Vec<Option<f64>>> = records
        .iter()
        .filter(|r| split_of(&r.smiles) == Split::Train)
        .map(|r| r.props.clone())
        .collect();
    let spec = PropertySpec::fit(&columns, &train_rows, !a.no_standardize);

    vocab.save(&out).map_err(data(out.display()))?;
    let spec_out = a.spec_out.clone().unwrap_or_else(|| spec_path(&out));
    write_spec(&spec_out, &spec, &echo(&a))?;
    println!(
        "{} molecules, {} atom tokens, vocabulary size {} -> {}",
        records.len(),
        vocab.atom_tokens().len(),
        vocab.len(),
        out.display()
    );
    println!("property spec ({} properties) -> {}", spec.len(), spec_out.display());
    Ok(Outcome {
        vocab,
        spec,
        molecules: records.len(),
    })
}
