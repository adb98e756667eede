// Random hyperparameter search for sentence classification: select on
// validation, then score the chosen model once on test.

use distillforge::finetune::{
    parse_sequence_tsv, random_search, sample_hyperparameters, FinetuneResult, TaskSpec, DEFAULT_SAMPLES,
};
use distillforge::model::{EncoderConfig, EncoderModel};
use distillforge::tokenizer::Tokenizer;

pub fn run_example() -> Result<FinetuneResult, Box<dyn std::error::Error>> {
    let read = |name: &str| std::fs::read_to_string(std::path::Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data")).join(name));
    let (train, valid, test) = (read("sentiment_train.tsv")?, read("sentiment_valid.tsv")?, read("sentiment_test.tsv")?);

    let texts: Vec<&str> = train.lines().filter_map(|l| l.split_once('\t')).map(|(_, t)| t).collect();
    let tok = Tokenizer::train(&texts, 60)?;
    let encoder = EncoderModel::init_random(EncoderConfig::new(2, 4, 32, 64, tok.vocab_size(), 32).with_dropout(0.0), 0)?;

    let spec = TaskSpec::sequence(2);
    let (train, valid, test) = (
        parse_sequence_tsv(&train, &tok, 2)?,
        parse_sequence_tsv(&valid, &tok, 2)?,
        parse_sequence_tsv(&test, &tok, 2)?,
    );
    let samples = sample_hyperparameters(DEFAULT_SAMPLES, 0)?;
    let outcome = random_search(&encoder, spec, &train, &valid, samples, 0)?;
    Ok(outcome.evaluate_test(&test)?.0)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let r = run_example()?;
    for (s, v) in r.samples.iter().zip(&r.validation) {
        println!(
            "lr {:.2e} wd {:.3} acc {:>2}: validation {:.3}",
            s.learning_rate, s.weight_decay, s.gradient_accumulation_steps, v.value
        );
    }
    println!("selected #{}: test {:.3} ± {:.3}", r.selected, r.test.value, r.test.ci_half_width.unwrap_or(0.0));
    Ok(())
}
