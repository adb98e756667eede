// Regenerate the bundled synthetic corpora. With an argument, writes into
// that directory (`cargo run --example synthetic_data -- crates/core/data`).

use std::path::Path;

use distillforge::synth::{grammar_corpus, grammar_documents, sentiment_task, skewed_bias_corpus};

/// Writes every file into `dir` and returns `(name, lines)` pairs.
pub fn write_all(dir: &Path) -> std::io::Result<Vec<(&'static str, usize)>> {
    let docs = grammar_documents(60, 10, 0);
    let doc_text: Vec<String> = docs.iter().map(|d| d.lines.join("\n")).collect();
    std::fs::write(dir.join("grammar_docs.txt"), doc_text.join("\n\n") + "\n")?;
    let mut written = vec![("grammar_docs.txt", docs.len())];
    let put = |written: &mut Vec<_>, name: &'static str, lines: Vec<String>| -> std::io::Result<()> {
        std::fs::write(dir.join(name), lines.join("\n") + "\n")?;
        written.push((name, lines.len()));
        Ok(())
    };
    put(&mut written, "grammar_heldout.txt", grammar_corpus(540, 100, 0).expect("fits the grammar").held_out)?;

    let bias = skewed_bias_corpus(400, "hij", "zij", 0.9, 0).expect("valid skew");
    put(&mut written, "bias_corpus.txt", bias.sentences)?;
    put(&mut written, "bias_templates.txt", bias.templates_a)?;

    let tsv: Vec<String> = sentiment_task(5000, 3).into_iter().map(|(l, t)| format!("{l}\t{t}")).collect();
    put(&mut written, "sentiment_train.tsv", tsv[..4000].to_vec())?;
    put(&mut written, "sentiment_valid.tsv", tsv[4000..4500].to_vec())?;
    put(&mut written, "sentiment_test.tsv", tsv[4500..].to_vec())?;
    Ok(written)
}

pub fn run_example() -> std::io::Result<Vec<(&'static str, usize)>> {
    let dir = tempfile::tempdir()?;
    write_all(dir.path())
}

fn main() -> std::io::Result<()> {
    let written = match std::env::args().nth(1) {
        Some(dir) => write_all(Path::new(&dir))?,
        None => run_example()?,
    };
    for (name, n) in written {
        println!("{name}: {n}");
    }
    Ok(())
}
