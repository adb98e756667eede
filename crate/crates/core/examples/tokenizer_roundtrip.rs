// Train a BPE vocabulary, save it, reload it and round-trip text.

use distillforge::tokenizer::{Tokenizer, UNK_ID};

pub struct TokenizerSummary {
    pub vocab_size: usize,
    pub tokens_per_line: f64,
    pub lossless: bool,
    /// `<unk>` ids produced for characters never seen in training.
    pub unknown: usize,
}

pub fn run_example() -> Result<TokenizerSummary, Box<dyn std::error::Error>> {
    let lines = distillforge::corpus::read_lines(std::path::Path::new(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/data/grammar_heldout.txt"
    )))?;
    let tok = Tokenizer::train(&lines, 150)?;
    let dir = tempfile::tempdir()?;
    let (vocab, merges) = (dir.path().join("vocab.txt"), dir.path().join("merges.txt"));
    tok.save(&vocab, &merges)?;
    let reloaded = Tokenizer::load(&vocab, &merges)?;

    let mut lossless = true;
    let mut total = 0;
    for line in &lines {
        let ids = reloaded.encode(line);
        lossless &= ids == tok.encode(line) && reloaded.decode(&ids)? == *line;
        total += ids.len();
    }
    let unknown = reloaded.encode("één ijsbeer").iter().filter(|&&id| id == UNK_ID).count();
    Ok(TokenizerSummary {
        vocab_size: reloaded.vocab_size(),
        tokens_per_line: total as f64 / lines.len() as f64,
        lossless,
        unknown,
    })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = run_example()?;
    println!(
        "vocab {} tokens/line {:.1} lossless {} unknown {}",
        s.vocab_size, s.tokens_per_line, s.lossless, s.unknown
    );
    Ok(())
}
