use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use treegen_core::mask::MaskEngine;
use treegen_core::write_smiles;
use treegen_model::{load_checkpoint, sample_best_of_k, Candidate, Guidance, Model, PropertySpec, SampleRequest, SampleResult};

use super::{echo, load_vocab, output, with_seed, write_line};
use crate::data::{extract_columns, named_values, parse_target, read_props_table};
use crate::error::{data, CliError, Result};
use crate::settings::{required, resolve};

#[derive(clap::Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(default)]
pub struct Args {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Property target in raw units, e.g. `molWt=250,ring_count=2`; repeatable.
    #[arg(long)]
    pub target: Vec<String>,
    /// CSV of targets (columns named after properties, empty = unconstrained).
    #[arg(long)]
    pub targets_file: Option<PathBuf>,
    /// Sample with every property hidden (ignores targets).
    #[arg(long)]
    pub unconditional: bool,
    /// Requests per target.
    #[arg(long)]
    pub n: Option<usize>,
    /// Candidates per request; the best by self-predicted properties is kept.
    #[arg(long)]
    pub k: Option<usize>,
    /// Fixed guidance weight.
    #[arg(long)]
    pub w: Option<f64>,
    /// Draw the guidance weight uniformly from [LO, HI] per candidate.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    pub w_uniform: Option<Vec<f64>>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Default: the model's max_len.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Output JSON lines (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(skip)]
    pub seed: Option<u64>,
}
with_seed!(Args);

fn defaults() -> Args {
    Args {
        n: Some(1),
        k: Some(5),
        w: Some(1.5),
        temperature: Some(1.0),
        seed: Some(0),
        ..Args::default()
    }
}

/// Seed of request `index` under base seed `seed` (splitmix64 finalizer).
pub fn request_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn guidance_of(a: &Args) -> Result<Guidance> {
    match &a.w_uniform {
        Some(v) if v.len() == 2 => {
            if !(v[0] <= v[1]) {
                return Err(CliError::Usage(format!("--w-uniform {} {}: LO must not exceed HI", v[0], v[1])));
            }
            Ok(Guidance::Uniform { lo: v[0], hi: v[1] })
        }
        Some(v) => Err(CliError::Usage(format!("--w-uniform takes 2 values, got {}", v.len()))),
        None => {
            let w = a.w.unwrap_or(1.5);
            if !(w > 0.0 && w.is_finite()) {
                return Err(CliError::Usage(format!("--w must be positive, got {w}")));
            }
            Ok(Guidance::Fixed { w })
        }
    }
}

fn candidate_json(spec: &PropertySpec, c: &Candidate) -> Value {
    let smiles = c.graph.as_ref().and_then(|g| write_smiles(g).ok());
    json!({
        "smiles": smiles,
        "predicted_props": named_values(spec, &spec.destandardize(&c.predicted)),
        "w": c.w,
        "self_score": c.self_score,
    })
}

pub fn record_json(spec: &PropertySpec, index: usize, raw_target: &[Option<f64>], k: usize, g: &Guidance, r: &SampleResult) -> Value {
    json!({
        "request": index,
        "target": named_values(spec, raw_target),
        "k": k,
        "w_mode": g,
        "best": candidate_json(spec, r.best()),
        "candidates": r.candidates.iter().map(|c| candidate_json(spec, c)).collect::<Vec<_>>(),
    })
}

fn targets(a: &Args, spec: &PropertySpec) -> Result<Vec<Vec<Option<f64>>>> {
    if a.unconditional {
        return Ok(vec![vec![None; spec.len()]]);
    }
    let mut out: Vec<Vec<Option<f64>>> = a.target.iter().map(|t| parse_target(spec, t)).collect::<Result<_>>()?;
    if let Some(p) = &a.targets_file {
        let table = read_props_table(p)?;
        let cols: Vec<_> = spec
            .props
            .iter()
            .filter(|q| table.header.contains(&q.name))
            .map(|q| (q.name.clone(), q.kind))
            .collect();
        for row in extract_columns(p, &table, &cols)? {
            let mut raw = vec![None; spec.len()];
            for ((name, _), v) in cols.iter().zip(row) {
                raw[spec.index_of(name).unwrap()] = v;
            }
            out.push(raw);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("give --target, --targets-file or --unconditional".into()));
    }
    Ok(out)
}

pub struct Outcome {
    pub records: Vec<Value>,
}

/// Runs every request; returns (raw target, result) pairs in request order.
pub fn sample_targets(
    model: &Model<f32>,
    engine: &MaskEngine,
    raw_targets: &[Vec<Option<f64>>],
    n: usize,
    k: usize,
    guidance: Guidance,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<Vec<(Vec<Option<f64>>, SampleResult)>> {
    let mut out = Vec::with_capacity(raw_targets.len() * n);
    for (ti, raw) in raw_targets.iter().enumerate() {
        let target = model.spec.standardize(raw).map_err(|e| CliError::Usage(e.to_string()))?;
        for r in 0..n {
            let index = (ti * n + r) as u64;
            let req = SampleRequest {
                target: target.clone(),
                guidance,
                k,
                temperature,
                max_len,
                seed: request_seed(seed, index),
            };
            let res = sample_best_of_k(model, engine, &req).map_err(|e| match e {
                treegen_model::SampleError::Request(m) => CliError::Usage(m),
                other => CliError::Internal(other.to_string()),
            })?;
            if res.candidates.iter().any(|c| c.graph.is_none()) {
                return Err(CliError::Internal(format!("request {index}: a sampled sequence failed to decode")));
            }
            out.push((raw.clone(), res));
        }
    }
    Ok(out)
}

pub fn run(flags: Args, config: Option<&Path>) -> Result<Outcome> {
    let a = resolve("sample", config, &flags, &defaults())?;
    let model_path = required(&a.model, "model")?;
    let vocab_path = required(&a.vocab, "vocab")?;
    let vocab = load_vocab(&vocab_path)?;
    let ck = load_checkpoint(&model_path, Some(&vocab)).map_err(data(model_path.display()))?;
    let model = ck.model;
    let guidance = guidance_of(&a)?;
    let k = a.k.unwrap_or(5);
    let max_len = a.max_len.unwrap_or(model.config.max_len);
    let raw_targets = targets(&a, &model.spec)?;
    let engine = MaskEngine::new(&vocab);
    let results = sample_targets(
        &model,
        &engine,
        &raw_targets,
        a.n.unwrap_or(1),
        k,
        guidance,
        a.temperature.unwrap_or(1.0),
        max_len,
        a.seed.unwrap_or(0),
    )?;

    let mut w = output(a.out.as_deref())?;
    write_line(&mut *w, &json!({ "resolved_config": echo(&a) }))?;
    let mut records = Vec::with_capacity(results.len());
    for (i, (raw, r)) in results.iter().enumerate() {
        let rec = record_json(&model.spec, i, raw, k, &guidance, r);
        write_line(&mut *w, &rec)?;
        records.push(rec);
    }
    w.flush().map_err(data("output"))?;
    if a.out.is_some() {
        println!("{} requests sampled", records.len());
    }
    Ok(Outcome { records })
}
