//! Dataset files: SMILES lists, property CSVs, property-spec JSON and the
//! deterministic train/valid/test split.

use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use treegen_core::smiles::read_smiles_lines;
use treegen_core::{parse_smiles, MolGraph};
use treegen_model::{PropertyDef, PropertyKind, PropertySpec};

use crate::error::{data, CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// 90/5/5 split keyed on a hash of the SMILES text.
pub fn split_of(smiles: &str) -> Split {
    let h = Sha256::digest(smiles.as_bytes());
    let bucket = u64::from_le_bytes(h[..8].try_into().unwrap()) % 100;
    match bucket {
        0..=89 => Split::Train,
        90..=94 => Split::Valid,
        _ => Split::Test,
    }
}

/// Fraction of unparseable lines above which a dataset is rejected.
pub const MAX_FAILURE_RATE: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct Record {
    pub line: usize,
    pub smiles: String,
    pub graph: MolGraph,
    /// Raw values in property-spec order.
    pub props: Vec<Option<f64>>,
}

/// Non-blank entries as (line number, SMILES); text after the first
/// whitespace (e.g. a molecule name) is ignored.
pub fn read_smiles_file(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = std::fs::File::open(path).map_err(data(path.display()))?;
    let lines = read_smiles_lines(BufReader::new(f)).map_err(data(path.display()))?;
    Ok(lines
        .into_iter()
        .map(|(n, l)| (n, l.split_whitespace().next().unwrap_or("").to_string()))
        .collect())
}

/// Parses every entry. Failures are reported on stderr with line numbers;
/// more than 1% of failing lines aborts with a data error.
pub fn parse_entries(path: &Path, entries: &[(usize, String)]) -> Result<Vec<Option<MolGraph>>> {
    let mut out = Vec::with_capacity(entries.len());
    let mut failures = Vec::new();
    for (line, s) in entries {
        match parse_smiles(s) {
            Ok(g) => out.push(Some(g)),
            Err(e) => {
                failures.push(format!("{}:{line}: {e}", path.display()));
                out.push(None);
            }
        }
    }
    if !failures.is_empty() {
        let rate = failures.len() as f64 / entries.len() as f64;
        for f in failures.iter().take(20) {
            eprintln!("warning: {f}");
        }
        if rate > MAX_FAILURE_RATE {
            return Err(CliError::Data(format!(
                "{} of {} lines in {} failed to parse (first: {})",
                failures.len(),
                entries.len(),
                path.display(),
                failures[0]
            )));
        }
        eprintln!("warning: skipped {} unparseable lines", failures.len());
    }
    Ok(out)
}

/// A property CSV: header plus raw cells, one row per molecule.
#[derive(Clone, Debug)]
pub struct PropsTable {
    pub header: Vec<String>,
    /// (file line, cells)
    pub rows: Vec<(u64, Vec<String>)>,
}

pub fn read_props_table(path: &Path) -> Result<PropsTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(data(path.display()))?;
    let header: Vec<String> = rdr.headers().map_err(data(path.display()))?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(data(path.display()))?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec.iter().map(|c| c.trim().to_string()).collect()));
    }
    Ok(PropsTable { header, rows })
}

fn parse_cell(path: &Path, line: u64, name: &str, kind: PropertyKind, cell: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    let bad = |what: &str| CliError::Data(format!("{} line {line}, column `{name}`: `{cell}` is not {what}", path.display()));
    let x: f64 = cell.parse().map_err(|_| bad("a number"))?;
    if !x.is_finite() {
        return Err(bad("a finite number"));
    }
    if matches!(kind, PropertyKind::Categorical { .. }) && (x < 0.0 || x.fract() != 0.0) {
        return Err(bad("a non-negative integer category"));
    }
    Ok(Some(x))
}

/// Raw values of the named columns, row-aligned with the table.
pub fn extract_columns(path: &Path, table: &PropsTable, columns: &[(String, PropertyKind)]) -> Result<Vec<Vec<Option<f64>>>> {
    let idx: Vec<usize> = columns
        .iter()
        .map(|(name, _)| {
            table
                .header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CliError::Data(format!("{}: no column named `{name}`", path.display())))
        })
        .collect::<Result<_>>()?;
    table
        .rows
        .iter()
        .map(|(line, cells)| {
            columns
                .iter()
                .zip(&idx)
                .map(|((name, kind), &i)| parse_cell(path, *line, name, *kind, &cells[i]))
                .collect()
        })
        .collect()
}

/// Column kinds for a CSV header: categorical when named in `categorical`.
pub fn column_kinds(table: &PropsTable, raw: &[Vec<Option<f64>>], categorical: &[String]) -> Vec<(String, PropertyKind)> {
    table
        .header
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let kind = if categorical.contains(name) {
                let max = raw.iter().filter_map(|r| r[j]).fold(0.0f64, f64::max);
                PropertyKind::Categorical {
                    cardinality: max as usize + 1,
                }
            } else {
                PropertyKind::Continuous
            };
            (name.clone(), kind)
        })
        .collect()
}

/// Loads molecules and (optionally) their property rows, dropping entries
/// whose SMILES fail to parse.
pub fn load_dataset(data_path: &Path, props: Option<(&Path, &PropsTable)>, columns: &[(String, PropertyKind)]) -> Result<Vec<Record>> {
    let entries = read_smiles_file(data_path)?;
    let graphs = parse_entries(data_path, &entries)?;
    let raw = match props {
        Some((path, table)) => {
            if table.rows.len() != entries.len() {
                return Err(CliError::Data(format!(
                    "{} has {} rows but {} has {} molecules",
                    path.display(),
                    table.rows.len(),
                    data_path.display(),
                    entries.len()
                )));
            }
            extract_columns(path, table, columns)?
        }
        None => {
            if !columns.is_empty() {
                return Err(CliError::Usage("property spec names columns but no --props file was given".into()));
            }
            vec![Vec::new(); entries.len()]
        }
    };
    Ok(entries
        .into_iter()
        .zip(graphs)
        .zip(raw)
        .filter_map(|(((line, smiles), g), props)| {
            g.map(|graph| Record {
                line,
                smiles,
                graph,
                props,
            })
        })
        .collect())
}

const SPEC_FORMAT: &str = "treegen-property-spec";
const SPEC_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SpecFile {
    format: String,
    version: u32,
    properties: Vec<PropertyDef>,
    #[serde(default)]
    config: Value,
}

pub fn write_spec(path: &Path, spec: &PropertySpec, config: &Value) -> Result<()> {
    let file = SpecFile {
        format: SPEC_FORMAT.into(),
        version: SPEC_VERSION,
        properties: spec.props.clone(),
        config: config.clone(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(data(path.display()))
}

pub fn read_spec(path: &Path) -> Result<PropertySpec> {
    let text = std::fs::read_to_string(path).map_err(data(path.display()))?;
    let file: SpecFile = serde_json::from_str(&text).map_err(data(path.display()))?;
    if file.format != SPEC_FORMAT || file.version != SPEC_VERSION {
        return Err(CliError::Data(format!(
            "{}: expected {SPEC_FORMAT} version {SPEC_VERSION}, found {} version {}",
            path.display(),
            file.format,
            file.version
        )));
    }
    PropertySpec::new(file.properties).map_err(data(path.display()))
}

/// `{name: value}` with `null` for missing values.
pub fn named_values(spec: &PropertySpec, raw: &[Option<f64>]) -> serde_json::Map<String, Value> {
    spec.props
        .iter()
        .zip(raw)
        .map(|(p, v)| (p.name.clone(), v.map_or(Value::Null, Value::from)))
        .collect()
}

/// Parses `name=value,name=value` into raw values in spec order; names not
/// mentioned are missing.
pub fn parse_target(spec: &PropertySpec, text: &str) -> Result<Vec<Option<f64>>> {
    let mut raw = vec![None; spec.len()];
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("target `{part}` is not name=value")))?;
        let j = spec
            .index_of(name.trim())
            .ok_or_else(|| CliError::Usage(format!("target names unknown property `{}`", name.trim())))?;
        let x: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("target value `{value}` is not a number")))?;
        raw[j] = Some(x);
    }
    Ok(raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_roughly_90_5_5() {
        let mut counts = [0usize; 3];
        for i in 0..20000 {
            let s = format!("C{}", "C".repeat(i % 40)) + &i.to_string();
            assert_eq!(split_of(&s), split_of(&s));
            counts[split_of(&s) as usize] += 1;
        }
        assert!((17700..18300).contains(&counts[0]), "{counts:?}");
        assert!((800..1200).contains(&counts[1]));
    }

    #[test]
    fn csv_cells_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        std::fs::write(&p, "molWt,kind\n12.5,1\n,0\nabc,2\n").unwrap();
        let t = read_props_table(&p).unwrap();
        let cols = vec![("molWt".to_string(), PropertyKind::Continuous), ("kind".to_string(), PropertyKind::Categorical { cardinality: 3 })];
        let err = extract_columns(&p, &t, &cols).unwrap_err();
        assert!(matches!(err, CliError::Data(ref m) if m.contains("line 4") && m.contains("molWt")), "{err}");
        std::fs::write(&p, "molWt,kind\n12.5,1\n,0\n").unwrap();
        let t = read_props_table(&p).unwrap();
        assert_eq!(extract_columns(&p, &t, &cols).unwrap(), vec![vec![Some(12.5), Some(1.0)], vec![None, Some(0.0)]]);
        std::fs::write(&p, "molWt,kind\n12.5,1.5\n").unwrap();
        let t = read_props_table(&p).unwrap();
        assert!(extract_columns(&p, &t, &cols).is_err());
    }

    #[test]
    fn targets_parse_by_name() {
        let spec = PropertySpec::new(vec![
            PropertyDef {
                name: "molWt".into(),
                kind: PropertyKind::Continuous,
                mean: 0.0,
                std: 1.0,
            },
            PropertyDef {
                name: "ring_count".into(),
                kind: PropertyKind::Continuous,
                mean: 0.0,
                std: 1.0,
            },
        ])
        .unwrap();
        assert_eq!(parse_target(&spec, "ring_count=2").unwrap(), vec![None, Some(2.0)]);
        assert_eq!(parse_target(&spec, "molWt=250.5, ring_count=1").unwrap(), vec![Some(250.5), Some(1.0)]);
        assert!(parse_target(&spec, "logP=2").is_err());
        assert!(parse_target(&spec, "molWt").is_err());
    }
}
