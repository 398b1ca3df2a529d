use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use treegen_core::metrics::{generative_efficiency, internal_diversity, min_mae, MolIndex, SampleCounts};
use treegen_core::{parse_smiles, MolGraph, SurrogateProperty};

use super::{echo, with_seed};
use crate::data::{parse_entries, read_smiles_file};
use crate::error::{data, CliError, Result};
use crate::settings::{required, resolve};

pub const REPORT_FORMAT: &str = "treegen-eval";
pub const REPORT_VERSION: u32 = 1;

#[derive(clap::Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(default)]
pub struct Args {
    /// `sample` output (JSON lines) or a plain SMILES list.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Training SMILES, for novelty.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Report path (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Target for a plain SMILES list, e.g. `molWt=250`.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(skip)]
    pub seed: Option<u64>,
}
with_seed!(Args);

/// One evaluated sample: its graph (if it decodes) and the target it was
/// generated for, by property name.
#[derive(Clone, Debug)]
pub struct Sample {
    pub graph: Option<MolGraph>,
    pub target: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetMae {
    pub target: f64,
    pub samples: usize,
    /// `null` when no sample in the group is valid.
    pub min_mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyMae {
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub per_target: Vec<TargetMae>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub format: &'static str,
    pub version: u32,
    pub counts: SampleCounts,
    pub validity: f64,
    pub uniqueness: f64,
    pub novelty: f64,
    pub efficiency: f64,
    pub min_mae: BTreeMap<String, PropertyMae>,
    /// `null` with fewer than two valid samples.
    pub diversity: Option<f64>,
    pub config: Value,
}

fn parse_target_text(text: &str) -> Result<BTreeMap<String, Option<f64>>> {
    let mut out = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("target `{part}` is not name=value")))?;
        let x: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("target value `{value}` is not a number")))?;
        out.insert(name.trim().to_string(), Some(x));
    }
    Ok(out)
}

/// Reads samples. JSON-lines input takes `best.smiles` and `target` of each
/// record and skips `resolved_config` header lines; anything else is read as
/// a SMILES list, where unparseable lines count as invalid samples.
pub fn read_samples(path: &Path, target: Option<&str>) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path).map_err(data(path.display()))?;
    let fixed = target.map(parse_target_text).transpose()?.unwrap_or_default();
    let first = text.lines().map(str::trim).find(|l| !l.is_empty() && !l.starts_with('#'));
    let mut out = Vec::new();
    if first.is_some_and(|l| l.starts_with('{')) {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: String| CliError::Data(format!("{}:{}: {m}", path.display(), i + 1));
            let rec: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            if rec.get("resolved_config").is_some() {
                continue;
            }
            let smiles = rec.pointer("/best/smiles").ok_or_else(|| bad("record has no best.smiles".into()))?;
            let graph = smiles.as_str().and_then(|s| parse_smiles(s).ok());
            let mut target = fixed.clone();
            if let Some(obj) = rec.get("target").and_then(Value::as_object) {
                for (k, v) in obj {
                    target.insert(k.clone(), v.as_f64());
                }
            }
            out.push(Sample { graph, target });
        }
    } else {
        for (_, s) in read_smiles_file(path)? {
            out.push(Sample {
                graph: parse_smiles(&s).ok(),
                target: fixed.clone(),
            });
        }
    }
    Ok(out)
}

fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// MinMAE per surrogate property, with samples grouped by their target value.
pub fn min_mae_table(samples: &[Sample]) -> BTreeMap<String, PropertyMae> {
    let mut out = BTreeMap::new();
    for prop in SurrogateProperty::ALL {
        let mut groups: Vec<(f64, Vec<Option<MolGraph>>)> = Vec::new();
        for s in samples {
            let Some(Some(t)) = s.target.get(prop.name()) else { continue };
            match groups.iter_mut().find(|(g, _)| g.to_bits() == t.to_bits()) {
                Some((_, v)) => v.push(s.graph.clone()),
                None => groups.push((*t, vec![s.graph.clone()])),
            }
        }
        if groups.is_empty() {
            continue;
        }
        groups.sort_by(|a, b| a.0.total_cmp(&b.0));
        let per_target: Vec<TargetMae> = groups
            .iter()
            .map(|(t, gs)| {
                let m = min_mae(gs, *t, prop);
                TargetMae {
                    target: *t,
                    samples: gs.len(),
                    min_mae: m.is_finite().then_some(m),
                }
            })
            .collect();
        let finite: Vec<f64> = per_target.iter().filter_map(|t| t.min_mae).collect();
        let all_finite = finite.len() == per_target.len();
        out.insert(
            prop.name().to_string(),
            PropertyMae {
                mean: all_finite.then(|| finite.iter().sum::<f64>() / finite.len() as f64),
                median: if all_finite { median(&finite) } else { None },
                per_target,
            },
        );
    }
    out
}

pub fn evaluate(samples: &[Sample], train: &MolIndex, config: Value) -> Report {
    let graphs: Vec<Option<MolGraph>> = samples.iter().map(|s| s.graph.clone()).collect();
    let eff = generative_efficiency(&graphs, train);
    Report {
        format: REPORT_FORMAT,
        version: REPORT_VERSION,
        counts: eff.counts,
        validity: eff.validity,
        uniqueness: eff.uniqueness,
        novelty: eff.novelty,
        efficiency: eff.efficiency,
        min_mae: min_mae_table(samples),
        diversity: internal_diversity(&graphs).ok(),
        config,
    }
}

pub fn run(flags: Args, config: Option<&Path>) -> Result<Report> {
    let a = resolve("evaluate", config, &flags, &Args::default())?;
    let samples_path = required(&a.samples, "samples")?;
    let train_path = required(&a.train, "train")?;
    let samples = read_samples(&samples_path, a.target.as_deref())?;
    let entries = read_smiles_file(&train_path)?;
    let train: MolIndex = parse_entries(&train_path, &entries)?.iter().flatten().collect();
    let report = evaluate(&samples, &train, echo(&a));
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))? + "\n";
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(data(p.display()))?,
        None => print!("{text}"),
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(s: &str, t: Option<f64>) -> Sample {
        Sample {
            graph: parse_smiles(s).ok(),
            target: t.map(|x| [("molWt".to_string(), Some(x))].into()).unwrap_or_default(),
        }
    }

    #[test]
    fn groups_by_target() {
        // CH4 16.043, C2H6 30.07, CH3OH 32.042
        let s = vec![sample("C", Some(20.0)), sample("CC", Some(20.0)), sample("CO", Some(31.0)), sample("X(", Some(31.0))];
        let t = min_mae_table(&s);
        let m = &t["molWt"];
        assert_eq!(m.per_target.len(), 2);
        assert_eq!(m.per_target[0].samples, 2);
        assert!((m.per_target[0].min_mae.unwrap() - 3.957).abs() < 0.01);
        assert!((m.per_target[1].min_mae.unwrap() - 1.042).abs() < 0.01);
        assert!(!t.contains_key("ring_count"));
    }

    #[test]
    fn group_without_valid_samples_is_null() {
        let t = min_mae_table(&[sample("X(", Some(5.0))]);
        assert_eq!(t["molWt"].per_target[0].min_mae, None);
        assert_eq!(t["molWt"].median, None);
    }

    #[test]
    fn median_of_even_count() {
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
