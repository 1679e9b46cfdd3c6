#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_abet"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn abet")
}

pub fn schema_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{name}.schema.json"))
}

pub enum SchemaCheck {
    Valid,
    Invalid(String),
    /// No validator available; only the structural checks ran.
    Unchecked,
}

/// Validates `doc` against a published schema with the Python `jsonschema`
/// package when it is installed. Required top-level keys and the
/// `schema_version` tag are always checked here.
pub fn validate(doc: &Path, schema: &str) -> SchemaCheck {
    let schema_file = schema_path(schema);
    let text = std::fs::read_to_string(doc).unwrap();
    let value: serde_json::Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => return SchemaCheck::Invalid(format!("{}: {e}", doc.display())),
    };
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&schema_file).unwrap()).unwrap();
    if let Some(req) = s["required"].as_array() {
        for k in req {
            let k = k.as_str().unwrap();
            if value.get(k).is_none() {
                return SchemaCheck::Invalid(format!("{}: missing {k}", doc.display()));
            }
        }
    }
    if let Some(c) = s["properties"]["schema_version"]["const"].as_str() {
        if value["schema_version"] != c {
            return SchemaCheck::Invalid(format!("{}: schema_version != {c}", doc.display()));
        }
    }
    let script = "import json,sys,jsonschema\n\
        s=json.load(open(sys.argv[1]));d=json.load(open(sys.argv[2]))\n\
        jsonschema.Draft202012Validator.check_schema(s)\n\
        jsonschema.Draft202012Validator(s).validate(d)\n";
    let out = Command::new("python3")
        .args(["-c", script])
        .arg(&schema_file)
        .arg(doc)
        .output();
    match out {
        Ok(o) if o.status.success() => SchemaCheck::Valid,
        Ok(o) => {
            let err = String::from_utf8_lossy(&o.stderr);
            if err.contains("No module named") {
                SchemaCheck::Unchecked
            } else {
                SchemaCheck::Invalid(format!("{}: {}", doc.display(), err.lines().last().unwrap_or("")))
            }
        }
        Err(_) => SchemaCheck::Unchecked,
    }
}

pub fn assert_valid(doc: &Path, schema: &str) {
    match validate(doc, schema) {
        SchemaCheck::Valid => {}
        SchemaCheck::Unchecked => eprintln!("note: python jsonschema unavailable, structural check only for {}", doc.display()),
        SchemaCheck::Invalid(m) => panic!("schema violation: {m}"),
    }
}

pub fn well_formed_svg(path: &Path) -> Result<(), String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let doc = roxmltree::Document::parse(&text).map_err(|e| e.to_string())?;
    if doc.root_element().tag_name().name() != "svg" {
        return Err("root element is not <svg>".into());
    }
    Ok(())
}

pub fn write_json(path: &Path, v: &serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

/// Two labeled synthetic sets, a train config and a checkpoint, via the CLI verbs.
pub struct Pipeline {
    pub dir: PathBuf,
}

impl Pipeline {
    pub fn p(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn s(&self, name: &str) -> String {
        self.p(name).display().to_string()
    }
}

fn check(o: &Output, what: &str) {
    assert!(
        o.status.success(),
        "{what} failed ({:?}): {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// synth -> train -> extract -> score -> eval -> report, all through the binary.
pub fn cli_pipeline(dir: &Path) -> Pipeline {
    let pl = Pipeline { dir: dir.to_path_buf() };
    write_json(
        &pl.p("id_spec.json"),
        &serde_json::json!({"kind": "blobs", "dims": 8, "classes": 3, "separation": 4.0, "noise": 1.0, "samples": 600, "seed": 1}),
    );
    write_json(
        &pl.p("ood_spec.json"),
        &serde_json::json!({"kind": "uniform-box", "half_width": 6.0, "dims": 8, "classes": 1, "separation": 0.0, "noise": 0.0, "samples": 200, "seed": 2}),
    );
    write_json(
        &pl.p("train.json"),
        &serde_json::json!({"seed": 3, "model": {"hidden_sizes": [32], "penultimate_dim": 16, "head": "cosine"},
            "train": {"epochs": 5, "batch_size": 64, "learning_rate": 0.1, "momentum": 0.9, "milestones": [0.5, 0.75], "decay_factor": 0.1, "shuffle_seed": 3}}),
    );
    let out = pl.s("");
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("synth id", vec!["synth".into(), "--config".into(), pl.s("id_spec.json"), "--name".into(), "id".into()]),
        ("synth ood", vec!["synth".into(), "--config".into(), pl.s("ood_spec.json"), "--name".into(), "ood".into()]),
        (
            "train",
            vec!["train".into(), "--config".into(), pl.s("train.json"), "--data".into(), pl.s("id.fdump"), "--ood".into(), pl.s("ood.fdump")],
        ),
        (
            "extract id",
            vec!["extract".into(), "--model".into(), pl.s("checkpoint.json"), "--data".into(), pl.s("id.fdump"), "--name".into(), "id_out".into()],
        ),
        (
            "extract ood",
            vec!["extract".into(), "--model".into(), pl.s("checkpoint.json"), "--data".into(), pl.s("ood.fdump"), "--name".into(), "ood_out".into()],
        ),
        (
            "score id",
            vec!["score".into(), "--dump".into(), pl.s("id_out.fdump"), "--scorers".into(), "abet,energy,msp".into(), "--name".into(), "id_scores".into()],
        ),
        (
            "score ood",
            vec!["score".into(), "--dump".into(), pl.s("ood_out.fdump"), "--scorers".into(), "abet,energy,msp".into(), "--name".into(), "ood_scores".into()],
        ),
        (
            "eval",
            vec!["eval".into(), "--id".into(), pl.s("id_scores.csv"), "--ood".into(), pl.s("ood_scores.csv"), "--column".into(), "abet".into()],
        ),
        (
            "analyze",
            vec!["analyze".into(), "--model".into(), pl.s("checkpoint.json"), "--id-data".into(), pl.s("id.fdump"), "--ood-data".into(), pl.s("ood.fdump")],
        ),
        (
            "report",
            vec!["report".into(), "--id".into(), pl.s("id_scores.csv"), "--ood".into(), pl.s("ood_scores.csv"), "--column".into(), "abet".into()],
        ),
    ];
    for (what, mut args) in steps {
        args.push("--out".into());
        args.push(out.clone());
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        check(&run(&refs), what);
    }
    pl
}
