// Measure a gendered association with masked templates: the log ratio of
// target probability in context to its prior with attribute words masked.

use distillforge::corpus::read_lines;
use distillforge::eval::{bias_score, parse_templates, BiasScoreReport};
use distillforge::model::{EncoderConfig, EncoderModel};
use distillforge::pretrain::{pretrain_mlm, PretrainConfig};
use distillforge::tokenizer::Tokenizer;

pub fn run_example() -> Result<BiasScoreReport, Box<dyn std::error::Error>> {
    let data = concat!(env!("CARGO_MANIFEST_DIR"), "/data");
    let sentences = read_lines(&std::path::Path::new(data).join("bias_corpus.txt"))?;
    let templates = parse_templates(&std::fs::read_to_string(std::path::Path::new(data).join("bias_templates.txt"))?)?;

    let tok = Tokenizer::train(&sentences, 80)?;
    let ids: Vec<Vec<u32>> = sentences.iter().map(|s| tok.encode(s)).collect();
    let cfg = EncoderConfig::new(4, 4, 32, 64, tok.vocab_size(), 32).with_dropout(0.0);
    let config = PretrainConfig {
        epochs: 20,
        learning_rate: 2e-3,
        ..Default::default()
    };
    let model = pretrain_mlm(EncoderModel::init_random(cfg, 0)?, &ids, &config)?.model;
    // the corpus pairs these professions with "hij" nine times in ten
    Ok(bias_score(&model, &tok, &templates, "hij", "zij")?)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    print!("{}", run_example()?.to_csv());
    Ok(())
}
