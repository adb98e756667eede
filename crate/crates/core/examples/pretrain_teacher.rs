// Pretrain a small masked language model from scratch and watch its
// pseudo-perplexity fall on held-out sentences.

use distillforge::eval::pseudo_perplexity;
use distillforge::model::{EncoderConfig, EncoderModel};
use distillforge::pretrain::{pretrain_mlm, PretrainConfig};
use distillforge::synth::grammar_corpus;
use distillforge::tokenizer::Tokenizer;

pub struct PretrainSummary {
    pub epoch_losses: Vec<f64>,
    pub pppl_before: f64,
    pub pppl_after: f64,
}

pub fn run_example() -> Result<PretrainSummary, Box<dyn std::error::Error>> {
    let corpus = grammar_corpus(300, 50, 0)?;
    let tok = Tokenizer::train(&corpus.train, 150)?;
    let train: Vec<Vec<u32>> = corpus.train.iter().map(|s| tok.encode(s)).collect();
    let held_out: Vec<Vec<u32>> = corpus.held_out.iter().map(|s| tok.encode(s)).collect();

    let model = EncoderModel::init_random(EncoderConfig::new(2, 4, 32, 64, tok.vocab_size(), 32).with_dropout(0.0), 0)?;
    let pppl_before = pseudo_perplexity(&model, &held_out)?.pppl;
    let config = PretrainConfig {
        epochs: 8,
        learning_rate: 2e-3,
        ..Default::default()
    };
    let report = pretrain_mlm(model, &train, &config)?;
    Ok(PretrainSummary {
        epoch_losses: report.epoch_losses,
        pppl_before,
        pppl_after: pseudo_perplexity(&report.model, &held_out)?.pppl,
    })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = run_example()?;
    for (i, l) in s.epoch_losses.iter().enumerate() {
        println!("epoch {i}: mlm loss {l:.3}");
    }
    println!("held-out PPPL {:.2} -> {:.2}", s.pppl_before, s.pppl_after);
    Ok(())
}
