use std::path::{Path, PathBuf};
use std::process::Command;

use treegen_cli::commands::{build_vocab, gen_synth};
use treegen_cli::CliError;
use treegen_core::{parse_smiles, SurrogateProperty};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn treegen(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_treegen")).current_dir(dir).args(args).output().unwrap()
}

#[test]
fn evaluate_matches_golden_report() {
    let dir = fixture("eval");
    let out = treegen(&dir, &["evaluate", "--samples", "samples.jsonl", "--train", "train.smi"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let golden = std::fs::read(dir.join("expected_report.json")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), String::from_utf8(golden).unwrap());
}

#[test]
fn exit_codes() {
    let dir = fixture("eval");
    let code = |args: &[&str]| treegen(&dir, args).status.code().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["evaluate", "--samples", "samples.jsonl"]), 1);
    assert_eq!(code(&["sample", "--w", "1.5"]), 1);
    assert_eq!(code(&["evaluate", "--samples", "missing.jsonl", "--train", "train.smi"]), 2);
    assert_eq!(code(&["--config", "missing.json", "evaluate"]), 1);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 4, "gen-synth": {"n": 7, "max_len": 30}}"#).unwrap();
    let out = tmp.path().join("s.smi");
    let flags = gen_synth::Args {
        n: Some(5),
        out: Some(out.clone()),
        ..Default::default()
    };
    let mols = gen_synth::run(flags, Some(&cfg)).unwrap();
    assert_eq!(mols.len(), 5);
    let header = std::fs::read_to_string(&out).unwrap().lines().next().unwrap().to_string();
    assert!(header.contains(r#""max_len":30"#) && header.contains(r#""seed":4"#), "{header}");

    std::fs::write(&cfg, r#"{"gen-synth": {"bogus": 1}}"#).unwrap();
    let err = gen_synth::run(gen_synth::Args::default(), Some(&cfg)).unwrap_err();
    assert!(matches!(err, CliError::Usage(_)), "{err}");
}

fn build(data: &Path, props: Option<&Path>, out: &Path) -> Result<build_vocab::Outcome, CliError> {
    let args = build_vocab::Args {
        data: Some(data.to_path_buf()),
        props: props.map(Path::to_path_buf),
        out: Some(out.to_path_buf()),
        ..Default::default()
    };
    build_vocab::run(args, None)
}

#[test]
fn build_vocab_token_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let r = build(&fixture("nacl.smi"), None, &tmp.path().join("v.json")).unwrap();
    assert_eq!(r.vocab.atom_tokens().len(), 2);
    assert!(tmp.path().join("v.spec.json").exists());
    let r = build(&fixture("qm9_style.smi"), None, &tmp.path().join("q.json")).unwrap();
    assert_eq!(r.vocab.atom_tokens().len(), 21);
    assert_eq!(r.molecules, 21);
}

#[test]
fn non_numeric_property_cell_names_the_row() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d.smi");
    let props = tmp.path().join("d.csv");
    std::fs::write(&data, "CC\nCO\nCCC\n").unwrap();
    std::fs::write(&props, "molWt,logp\n30.07,1.0\n32.04,abc\n44.1,\n").unwrap();
    let err = build(&data, Some(&props), &tmp.path().join("v.json")).unwrap_err();
    let CliError::Data(msg) = err else { panic!("{err}") };
    assert!(msg.contains("line 3") && msg.contains("logp"), "{msg}");
}

#[test]
fn unparseable_lines_abort_above_one_percent() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d.smi");
    std::fs::write(&data, "CC\nC(\nCO\n").unwrap();
    let err = build(&data, None, &tmp.path().join("v.json")).unwrap_err();
    assert!(matches!(err, CliError::Data(ref m) if m.contains(":2")), "{err}");
}

#[test]
fn gen_synth_is_deterministic_and_properties_recompute() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str, seed| {
        let out = tmp.path().join(name);
        let args = gen_synth::Args {
            n: Some(300),
            out: Some(out.clone()),
            seed: Some(seed),
            ..Default::default()
        };
        gen_synth::run(args, None).unwrap();
        (std::fs::read_to_string(&out).unwrap(), std::fs::read_to_string(out.with_extension("csv")).unwrap())
    };
    let (a, a_props) = run("a.smi", 11);
    let (b, b_props) = run("b.smi", 11);
    assert_eq!(a.replace("b.smi", "a.smi"), a);
    assert_eq!(a_props, b_props.replace("b.smi", "a.smi"));
    assert_eq!(a, b.replace("b.smi", "a.smi"));
    let (c, _) = run("c.smi", 12);
    assert_ne!(a.lines().skip(1).collect::<Vec<_>>(), c.lines().skip(1).collect::<Vec<_>>());

    let smiles: Vec<&str> = a.lines().filter(|l| !l.starts_with('#')).collect();
    let rows: Vec<&str> = a_props.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(smiles.len(), 300);
    assert_eq!(rows.len(), 300);
    for (s, row) in smiles.iter().zip(rows) {
        let g = parse_smiles(s).unwrap();
        let cells: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        for (p, x) in SurrogateProperty::ALL.iter().zip(cells) {
            assert_eq!(p.compute(&g), x, "{s} {p}");
        }
    }
}
