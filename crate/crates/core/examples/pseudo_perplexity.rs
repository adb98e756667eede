// Score sentences with pseudo-perplexity: mask each token in turn and
// average the negative log-likelihood of the original token.

use distillforge::eval::pseudo_perplexity_text;
use distillforge::model::{EncoderConfig, EncoderModel};
use distillforge::tokenizer::Tokenizer;

pub struct PpplSummary {
    pub vocab_size: usize,
    pub pppl: f64,
    pub predictions: usize,
}

/// An untrained model is close to uniform, so its PPPL sits near the
/// vocabulary size.
pub fn run_example() -> Result<PpplSummary, Box<dyn std::error::Error>> {
    let lines = distillforge::corpus::read_lines(std::path::Path::new(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/data/grammar_heldout.txt"
    )))?;
    let tok = Tokenizer::train(&lines, 120)?;
    let model = EncoderModel::init_random(EncoderConfig::new(2, 2, 16, 32, tok.vocab_size(), 32), 0)?;
    let result = pseudo_perplexity_text(&model, &tok, &lines[..20])?;
    Ok(PpplSummary {
        vocab_size: tok.vocab_size(),
        pppl: result.pppl,
        predictions: result.predictions,
    })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = run_example()?;
    println!("PPPL {:.1} over {} predictions (vocab {})", s.pppl, s.predictions, s.vocab_size);
    Ok(())
}
