use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use treegen_core::codec::{encode, Order};
use treegen_model::{
    load_checkpoint, save_checkpoint, Arch, Corpus, EpochLog, Model, ModelConfig, PropEncoder, PropertyKind, PropertySpec, TrainConfig,
};

use super::{echo, load_vocab, output, with_seed, write_line};
use crate::data::{load_dataset, read_props_table, read_spec, split_of, Split};
use crate::error::{data, CliError, Result};
use crate::settings::{required, resolve};

#[derive(clap::Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(default)]
pub struct Args {
    /// Training SMILES file (only its train split is used).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub props: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Property spec JSON (from build-vocab).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-epoch JSON-lines log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Start from this checkpoint (fine-tuning); its architecture is kept.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub lambda_prop: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// Default: 1.5x the longest encoded training sequence.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// LayerNorm, learned positions and GELU instead of RMSNorm, rotary and SwiGLU.
    #[arg(long)]
    pub legacy_arch: bool,
    /// Canonical traversal order only.
    #[arg(long)]
    pub no_random_order: bool,
    /// Raw property units.
    #[arg(long)]
    pub no_standardize: bool,
    /// Drop the property-prediction loss.
    #[arg(long)]
    pub no_prop_loss: bool,
    /// Linear property encoder instead of the two-layer MLP.
    #[arg(long)]
    pub single_layer_prop_encoder: bool,
    #[arg(skip)]
    pub seed: Option<u64>,
}
with_seed!(Args);

fn defaults() -> Args {
    Args {
        epochs: Some(20),
        batch_size: Some(64),
        lr: Some(1e-3),
        warmup_steps: Some(0),
        lambda_prop: Some(1.0),
        weight_decay: Some(0.1),
        d_model: Some(64),
        n_layers: Some(3),
        n_heads: Some(4),
        seed: Some(0),
        ..Args::default()
    }
}

pub struct Outcome {
    pub model: Model<f32>,
    pub logs: Vec<EpochLog>,
    pub resolved: serde_json::Value,
}

fn identity_spec(spec: &PropertySpec) -> PropertySpec {
    let mut s = spec.clone();
    for p in &mut s.props {
        if p.kind == PropertyKind::Continuous {
            p.mean = 0.0;
            p.std = 1.0;
        }
    }
    s
}

pub fn run(flags: Args, config: Option<&Path>) -> Result<Outcome> {
    let a = resolve("train", config, &flags, &defaults())?;
    let data_path = required(&a.data, "data")?;
    let vocab_path = required(&a.vocab, "vocab")?;
    let out = required(&a.out, "out")?;
    let vocab = load_vocab(&vocab_path)?;
    let seed = a.seed.unwrap_or(0);

    let init = match &a.init {
        Some(p) => Some(load_checkpoint(p, Some(&vocab)).map_err(data(p.display()))?),
        None => None,
    };
    let mut spec = match (&init, &a.spec) {
        (Some(ck), _) => ck.model.spec.clone(),
        (None, Some(p)) => read_spec(p)?,
        (None, None) => PropertySpec::default(),
    };
    if a.no_standardize {
        spec = identity_spec(&spec);
    }
    let columns: Vec<(String, PropertyKind)> = spec.props.iter().map(|p| (p.name.clone(), p.kind)).collect();
    let table = match &a.props {
        Some(p) => Some((p.clone(), read_props_table(p)?)),
        None => None,
    };
    let records = load_dataset(&data_path, table.as_ref().map(|(p, t)| (p.as_path(), t)), &columns)?;
    let train: Vec<_> = records.into_iter().filter(|r| split_of(&r.smiles) == Split::Train).collect();
    if train.is_empty() {
        return Err(CliError::Data(format!("{} has no molecules in the train split", data_path.display())));
    }
    let mut longest = 0;
    for r in &train {
        let t = encode(&r.graph, &vocab, Order::Canonical)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", data_path.display(), r.line)))?;
        longest = longest.max(t.len());
    }

    let mut model = match init {
        Some(ck) => ck.model,
        None => {
            let max_len = a.max_len.unwrap_or((longest * 3).div_ceil(2));
            let mut cfg = ModelConfig::small(vocab.len(), vocab.r_max(), max_len);
            cfg.d_model = a.d_model.unwrap_or(64);
            cfg.n_layers = a.n_layers.unwrap_or(3);
            cfg.n_heads = a.n_heads.unwrap_or(4);
            if a.legacy_arch {
                cfg.arch = Arch::Legacy;
            }
            if a.single_layer_prop_encoder {
                cfg.prop_encoder = PropEncoder::Linear;
            }
            Model::new(cfg, spec.clone(), seed).map_err(|e| CliError::Usage(e.to_string()))?
        }
    };
    if longest > model.config.max_len {
        eprintln!(
            "warning: longest canonical sequence ({longest}) exceeds max_len {}; such molecules are skipped",
            model.config.max_len
        );
    }
    let tc = TrainConfig {
        lr: a.lr.unwrap_or(1e-3),
        weight_decay: a.weight_decay.unwrap_or(0.1),
        epochs: a.epochs.unwrap_or(20),
        batch_size: a.batch_size.unwrap_or(64),
        warmup_steps: a.warmup_steps.unwrap_or(0),
        seed,
        lambda_prop: if a.no_prop_loss { 0.0 } else { a.lambda_prop.unwrap_or(1.0) },
        augment_random_order: !a.no_random_order,
        grad_clip: a.grad_clip,
        ..TrainConfig::default()
    };
    let resolved = json!({
        "settings": echo(&a),
        "model": model.config,
        "train": tc,
        "property_spec": model.spec,
        "train_molecules": train.len(),
    });

    let corpus = Corpus {
        graphs: train.iter().map(|r| r.graph.clone()).collect(),
        props: train.iter().map(|r| r.props.clone()).collect(),
    };
    let mut log = match &a.log {
        Some(p) => Some(output(Some(p))?),
        None => None,
    };
    if let Some(w) = log.as_deref_mut() {
        write_line(w, &json!({ "resolved_config": resolved }))?;
    }
    let mut log_err = None;
    let logs = treegen_model::train(&mut model, &vocab, &corpus, &tc, |e| {
        eprintln!(
            "epoch {:>3}  token_ce {:.4}  prop_mse {:.4}  prop_ce {:.4}  lr {:.2e}  {:.1}s",
            e.epoch, e.token_ce, e.prop_mse, e.prop_ce, e.lr, e.wallclock
        );
        if let Some(w) = log.as_deref_mut() {
            let rec = serde_json::to_value(e).expect("epoch log serializes");
            if let Err(err) = write_line(w, &rec).and_then(|_| w.flush().map_err(data("log"))) {
                log_err.get_or_insert(err);
            }
        }
    })
    .map_err(|e| match e {
        treegen_model::TrainError::Config(m) => CliError::Usage(m),
        treegen_model::TrainError::Property { .. } | treegen_model::TrainError::EmptyCorpus => CliError::Data(e.to_string()),
        other => CliError::Internal(other.to_string()),
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    save_checkpoint(&out, &model, &vocab, &json!({ "resolved_config": resolved })).map_err(data(out.display()))?;
    println!("trained on {} molecules for {} epochs -> {}", corpus.len(), logs.len(), out.display());
    Ok(Outcome { model, logs, resolved })
}
