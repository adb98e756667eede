// Drive the command-line pipeline in-process: tokenizer, corpus prep,
// pretraining, distillation and evaluation into one run directory.

use std::path::PathBuf;

/// Returns the run directory's manifest after all stages.
pub fn run_example() -> Result<serde_json::Value, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("run");
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{
  "tokenizer": {"vocab_size": 120},
  "model": {
    "teacher": {"d": 2, "a": 2, "h": 16, "i": 32, "vocab_size": 120, "max_positions": 64, "dropout": 0.0},
    "student": {"d": 1, "a": 2, "h": 16, "i": 32, "vocab_size": 120, "max_positions": 64, "dropout": 0.0}
  },
  "pretrain": {"epochs": 1},
  "distill": {"epochs": 1, "micro_batch": 4, "accumulation_steps": 2}
}"#,
    )
    .map_err(|e| e.to_string())?;
    let docs = PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/data/grammar_docs.txt"));
    let heldout = PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/data/grammar_heldout.txt"));
    let (o, c) = (out.to_str().unwrap(), config.to_str().unwrap());
    let (docs, heldout) = (docs.to_str().unwrap(), heldout.to_str().unwrap());
    let data = out.join("data/sequences.txt");
    let teacher = out.join("checkpoints/teacher.ckpt");
    let (data, teacher) = (data.to_str().unwrap(), teacher.to_str().unwrap());

    let stages: Vec<Vec<&str>> = vec![
        vec!["tokenizer-train", "--input", docs],
        vec!["corpus-prep", "--input", docs, "--tokenizer", o],
        vec!["pretrain", "--data", data, "--tokenizer", o],
        vec!["distill", "--teacher", teacher, "--data", data, "--tokenizer", o],
        vec!["eval-pppl", "--model", teacher, "--tokenizer", o, "--data", heldout],
    ];
    for stage in stages {
        let mut args = vec!["distillforge", "--config", c, "--out", o, "--seed", "7"];
        args.extend(stage);
        distillforge::cli::run(args).map_err(|(code, msg)| format!("exit {code}: {msg}"))?;
    }
    let manifest = std::fs::read_to_string(out.join("manifest.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&manifest).map_err(|e| e.to_string())
}

fn main() -> Result<(), String> {
    let manifest = run_example()?;
    for entry in manifest.as_array().into_iter().flatten() {
        println!("{} (seed {})", entry["command"], entry["seed"]);
    }
    Ok(())
}
