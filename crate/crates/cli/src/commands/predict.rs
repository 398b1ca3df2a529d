use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use treegen_core::mask::MaskEngine;
use treegen_core::{encode, Order};
use treegen_model::{load_checkpoint, self_predict};

use super::{echo, load_vocab, output, with_seed, write_line};
use crate::data::{named_values, parse_entries, read_smiles_file};
use crate::error::{data, CliError, Result};
use crate::settings::{required, resolve};

#[derive(clap::Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(default)]
pub struct Args {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// SMILES file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output JSON lines (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(skip)]
    pub seed: Option<u64>,
}
with_seed!(Args);

/// Writes one `{line, smiles, predicted}` record per molecule; `predicted`
/// is `null` for molecules the vocabulary or length limit cannot encode.
pub fn run(flags: Args, config: Option<&Path>) -> Result<Vec<Value>> {
    let a = resolve("predict", config, &flags, &Args::default())?;
    let model_path = required(&a.model, "model")?;
    let vocab_path = required(&a.vocab, "vocab")?;
    let data_path = required(&a.data, "data")?;
    let vocab = load_vocab(&vocab_path)?;
    let model = load_checkpoint(&model_path, Some(&vocab)).map_err(data(model_path.display()))?.model;
    let engine = MaskEngine::new(&vocab);
    let entries = read_smiles_file(&data_path)?;
    let graphs = parse_entries(&data_path, &entries)?;

    let mut w = output(a.out.as_deref())?;
    write_line(&mut *w, &json!({ "resolved_config": echo(&a) }))?;
    let mut records = Vec::new();
    for ((line, smiles), g) in entries.iter().zip(&graphs) {
        let Some(g) = g else { continue };
        let predicted = match encode(g, &vocab, Order::Canonical) {
            Ok(t) if t.len() <= model.config.max_len => {
                let pv = self_predict(&model, &engine, &t).map_err(|e| CliError::Internal(format!("line {line}: {e}")))?;
                Value::Object(named_values(&model.spec, &model.spec.destandardize(&pv)))
            }
            Ok(t) => {
                eprintln!("warning: line {line}: {} tokens exceed the model's max_len {}", t.len(), model.config.max_len);
                Value::Null
            }
            Err(e) => {
                eprintln!("warning: line {line}: {e}");
                Value::Null
            }
        };
        let rec = json!({ "line": line, "smiles": smiles, "predicted": predicted });
        write_line(&mut *w, &rec)?;
        records.push(rec);
    }
    w.flush().map_err(data("output"))?;
    Ok(records)
}
