// Distil a two-layer student from a four-layer teacher with the combined
// soft-target, MLM and hidden-state cosine loss.

use distillforge::distill::{distill_run, DistillConfig};
use distillforge::eval::pseudo_perplexity;
use distillforge::model::{init_student_from_teacher, EncoderConfig, EncoderModel};
use distillforge::pretrain::{pretrain_mlm, LrDecay, PretrainConfig};
use distillforge::synth::grammar_corpus;
use distillforge::tokenizer::Tokenizer;

pub struct DistillSummary {
    pub teacher_pppl: f64,
    pub student_pppl: f64,
    pub first_total: f64,
    pub last_total: f64,
    pub updates: usize,
}

pub fn run_example() -> Result<DistillSummary, Box<dyn std::error::Error>> {
    let corpus = grammar_corpus(300, 50, 1)?;
    let tok = Tokenizer::train(&corpus.train, 150)?;
    let train: Vec<Vec<u32>> = corpus.train.iter().map(|s| tok.encode(s)).collect();
    let held_out: Vec<Vec<u32>> = corpus.held_out.iter().map(|s| tok.encode(s)).collect();

    let teacher_cfg = EncoderConfig::new(4, 4, 32, 64, tok.vocab_size(), 32).with_dropout(0.0);
    let pretrain = PretrainConfig {
        epochs: 10,
        learning_rate: 2e-3,
        ..Default::default()
    };
    let teacher = pretrain_mlm(EncoderModel::init_random(teacher_cfg, 0)?, &train, &pretrain)?.model;

    // every other teacher layer seeds the student
    let student = init_student_from_teacher(&teacher, EncoderConfig { layers: 2, ..teacher_cfg }, 1)?;
    let config = DistillConfig {
        micro_batch: 5,
        accumulation_steps: 2,
        epochs: 3,
        learning_rate: 1e-3,
        lr_decay: LrDecay::Linear,
        ..Default::default()
    };
    let report = distill_run(&teacher, student, &train, &config)?;
    Ok(DistillSummary {
        teacher_pppl: pseudo_perplexity(&teacher, &held_out)?.pppl,
        student_pppl: pseudo_perplexity(&report.student, &held_out)?.pppl,
        first_total: report.first_step.map_or(f64::NAN, |l| l.total),
        last_total: report.epochs.last().map_or(f64::NAN, |l| l.total),
        updates: report.log.len(),
    })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = run_example()?;
    println!("teacher PPPL {:.2}, student PPPL {:.2}", s.teacher_pppl, s.student_pppl);
    println!("loss {:.2} -> {:.2} over {} updates", s.first_total, s.last_total, s.updates);
    Ok(())
}
