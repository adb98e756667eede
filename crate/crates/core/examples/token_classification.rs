// Token tagging from CoNLL-style input, scored with micro-F1 over the
// non-`O` tags.

use distillforge::finetune::{attach_head, evaluate, parse_conll, train_task, HyperparameterSample, MetricReport, TaskSpec};
use distillforge::model::{EncoderConfig, EncoderModel};
use distillforge::synth::{tagging_task, TAGS};
use distillforge::tokenizer::Tokenizer;

fn to_conll(sentences: &[Vec<(String, String)>]) -> String {
    sentences
        .iter()
        .map(|s| s.iter().map(|(w, t)| format!("{w} {t}\n")).collect::<String>())
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn run_example() -> Result<MetricReport, Box<dyn std::error::Error>> {
    let sentences = tagging_task(400, 0);
    let words: Vec<String> = sentences.iter().map(|s| s.iter().map(|(w, _)| w.as_str()).collect::<Vec<_>>().join(" ")).collect();
    let tok = Tokenizer::train(&words, 120)?;
    let tags: Vec<String> = TAGS.iter().map(|t| t.to_string()).collect();
    let train = parse_conll(&to_conll(&sentences[..300]), &tok, &tags)?;
    let test = parse_conll(&to_conll(&sentences[300..]), &tok, &tags)?;

    let encoder = EncoderModel::init_random(EncoderConfig::new(1, 2, 32, 64, tok.vocab_size(), 32).with_dropout(0.0), 0)?;
    let model = attach_head(encoder, TaskSpec::token(tags.len()), 0)?;
    let sample = HyperparameterSample {
        epochs: 5,
        ..HyperparameterSample::with(1e-3, 0.0, 2)
    };
    let model = train_task(model, &train, &sample)?;
    Ok(evaluate(&model, &test)?)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let r = run_example()?;
    println!("micro-F1 {:.3} over {} tags", r.value, r.n);
    Ok(())
}
