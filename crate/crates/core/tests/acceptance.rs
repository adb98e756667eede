//! Acceptance criteria, one test per criterion. Each prints a single
//! `PASS`/`FAIL` line (written straight to stderr so it survives output
//! capture) before asserting.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;

use distillforge::autodiff::{finite_difference_check, softmax_with_temperature, Tape, Tensor, Var};
use distillforge::corpus::{expected_merged_count, merge_sequences, shuffle_records, MergePolicy, LINE_JOINER};
use distillforge::distill::{
    combined_loss, cosine_alignment_loss, distill_run, distillation_ce_loss, mlm_loss, teacher_targets, DistillConfig,
    Distiller, MaskedBatch, IGNORE_INDEX,
};
use distillforge::eval::{bias_score, pseudo_perplexity, BiasTemplate};
use distillforge::finetune::{
    random_search, sample_hyperparameters, select_best, Example, TaskSpec, ACCUMULATION_CHOICES,
};
use distillforge::model::{
    count_parameters, init_student_from_teacher, load_checkpoint, save_checkpoint, student_layer_map, EncoderConfig,
    EncoderModel, EncoderParams, TokenBatch,
};
use distillforge::optim::OptimizerConfig;
use distillforge::pretrain::{pretrain_mlm, LrDecay, PretrainConfig};
use distillforge::synth::{grammar_corpus, grammar_documents, sentiment_task, skewed_bias_corpus};
use distillforge::tokenizer::Tokenizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[acceptance] criterion {id} {status}: {name} ({detail})");
    assert!(ok, "criterion {id} failed: {name} ({detail})");
}

#[test]
fn criterion_1_parameter_counts() {
    let rows = [
        (EncoderConfig::robbert_base(40_000), 116.0),
        (EncoderConfig::distilbert(40_000), 74.0),
        (EncoderConfig::bort(40_000), 46.0),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (cfg, want) in rows {
        let got = count_parameters(&cfg) as f64 / 1e6;
        let rel = (got - want).abs() / want;
        ok &= rel <= 0.03;
        detail.push(format!("{got:.2}M vs {want}M"));
    }
    // the closed form also equals what init_random allocates
    let toy = EncoderConfig::new(3, 2, 16, 40, 57, 24);
    let allocated = EncoderModel::init_random(toy, 0).unwrap().num_parameters();
    ok &= allocated == count_parameters(&toy);
    report(1, "parameter counts within 3%", ok, &detail.join(", "));
}

fn random_values(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f32> {
    (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) as f32 * scale as f32).collect()
}

fn replace(bound: &mut EncoderParams<Var>, name: &str, x: Var) {
    for (n, v) in bound.named_mut() {
        if n == name {
            *v = x;
        }
    }
}

#[test]
fn criterion_2_gradient_suite() {
    let step = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut errors = BTreeMap::new();

    let logits = Tensor::new(vec![3, 5], random_values(&mut rng, 15, 2.0)).unwrap();
    let target = softmax_with_temperature(&Tensor::new(vec![3, 5], random_values(&mut rng, 15, 2.0)).unwrap(), 1.0).unwrap();
    let e = finite_difference_check(
        |tape: &mut Tape<f64>, x| {
            let lp = tape.log_softmax(x, 2.0)?;
            let t = tape.constant(&target);
            let prod = tape.mul(t, lp)?;
            let s = tape.sum(prod);
            Ok(tape.scale(s, -1.0))
        },
        &logits,
        step,
    )
    .unwrap();
    errors.insert("softmax_T + cross-entropy", e);

    let logits = Tensor::new(vec![4, 7], random_values(&mut rng, 28, 2.0)).unwrap();
    let e = finite_difference_check(|tape, x| mlm_loss(tape, x, &[3, IGNORE_INDEX, 0, 6]), &logits, step).unwrap();
    errors.insert("mlm loss", e);

    let teacher = Tensor::new(vec![4, 7], random_values(&mut rng, 28, 2.0)).unwrap();
    let e = finite_difference_check(
        |tape, x| {
            let t = tape.constant(&teacher);
            distillation_ce_loss(tape, t, x, 2.0)
        },
        &logits,
        step,
    )
    .unwrap();
    errors.insert("distillation CE", e);

    let th = Tensor::new(vec![2, 3, 4], random_values(&mut rng, 24, 1.0)).unwrap();
    let sh = Tensor::new(vec![2, 3, 4], random_values(&mut rng, 24, 1.0)).unwrap();
    let mask = [true, true, false, true, true, true];
    let e = finite_difference_check(
        |tape, x| {
            let t = tape.constant(&th);
            cosine_alignment_loss(tape, t, x, &mask)
        },
        &sh,
        step,
    )
    .unwrap();
    errors.insert("cosine alignment", e);

    // full weighted loss of a D=2, H=32 student against a frozen teacher
    let cfg = EncoderConfig::new(2, 4, 32, 64, 23, 16).with_dropout(0.0);
    let teacher = EncoderModel::init_random(cfg, 10).unwrap();
    let student = EncoderModel::init_random(cfg, 11).unwrap();
    let inputs = TokenBatch::from_sequences(&[vec![1, 4, 9, 12, 2], vec![1, 7, 4, 2]]).unwrap();
    let mut labels = vec![IGNORE_INDEX; inputs.len()];
    labels[1] = 6;
    labels[7] = 15;
    let batch = MaskedBatch::new(inputs, labels).unwrap();
    let targets = teacher_targets(&teacher, &batch).unwrap();
    let dcfg = DistillConfig::default();
    for name in [
        "layers.0.q_weight",
        "layers.1.ff_in_weight",
        "layers.1.ff_ln_gain",
        "embeddings.position",
        "head.dense_weight",
        "head.decoder_bias",
    ] {
        let param = student.params.named().into_iter().find(|(n, _)| n == name).unwrap().1.clone();
        let e = finite_difference_check(
            |tape, x| {
                let mut bound = student.bind(tape, false);
                replace(&mut bound, name, x);
                Ok(combined_loss(tape, &student, &bound, &targets, &batch, &dcfg, None)?.total)
            },
            &param,
            step,
        )
        .unwrap();
        errors.insert(name, e);
    }
    let worst = errors.values().cloned().fold(0.0, f64::max);
    let detail: Vec<String> = errors.iter().map(|(k, v)| format!("{k}={v:.1e}")).collect();
    report(2, "finite-difference gradients", worst <= 1e-3, &detail.join(", "));
}

#[test]
fn criterion_3_merge_statistics() {
    let docs = grammar_documents(1000, 20, 3);
    let p = 0.5;
    let records = merge_sequences(&docs, MergePolicy::new(p, 99).unwrap());
    let expected = expected_merged_count(&docs, p);
    let sigma = (1000.0 * 19.0 * p * (1.0 - p)).sqrt();
    let within = (records.len() as f64 - expected).abs() <= 3.0 * sigma;

    let identity = merge_sequences(&docs, MergePolicy::new(0.0, 1).unwrap());
    let flat: Vec<&String> = docs.iter().flat_map(|d| &d.lines).collect();
    let identity_ok = identity.len() == flat.len()
        && identity.iter().zip(&flat).all(|(r, l)| &r.text == *l && r.merged_from == 1);

    let whole = merge_sequences(&docs, MergePolicy::new(1.0, 1).unwrap());
    let whole_ok = whole.len() == docs.len() && whole.iter().all(|r| r.merged_from == 20);

    // replaying records against their documents: each consumes the next
    // `merged_from` lines of its own document, with nothing left over
    let mut cursor = vec![0usize; docs.len()];
    let mut boundaries_ok = true;
    for r in &records {
        let d = &docs[r.source_doc];
        let start = cursor[r.source_doc];
        let end = start + r.merged_from;
        boundaries_ok &= end <= d.lines.len() && r.text == d.lines[start..end.min(d.lines.len())].join(LINE_JOINER);
        cursor[r.source_doc] = end;
    }
    boundaries_ok &= cursor.iter().zip(&docs).all(|(c, d)| *c == d.lines.len());

    report(
        3,
        "merge transform statistics",
        within && identity_ok && whole_ok && boundaries_ok,
        &format!(
            "{} records vs expected {expected} ± 3·{sigma:.1}; identity {identity_ok}; p=1 {whole_ok}; boundaries {boundaries_ok}",
            records.len()
        ),
    );
}

struct GrammarSetup {
    held_out: Vec<Vec<u32>>,
    train: Vec<Vec<u32>>,
    teacher: EncoderModel,
    teacher_pppl: f64,
}

/// A D=4, H=64 teacher pretrained on 500 grammar sentences.
fn grammar_teacher() -> &'static GrammarSetup {
    static SETUP: OnceLock<GrammarSetup> = OnceLock::new();
    SETUP.get_or_init(|| {
        let c = grammar_corpus(500, 100, 7).unwrap();
        let tok = Tokenizer::train(&c.train, 200).unwrap();
        let train: Vec<Vec<u32>> = c.train.iter().map(|s| tok.encode(s)).collect();
        let held_out: Vec<Vec<u32>> = c.held_out.iter().map(|s| tok.encode(s)).collect();
        let cfg = EncoderConfig::new(4, 4, 64, 128, tok.vocab_size(), 32).with_dropout(0.0);
        let pcfg = PretrainConfig {
            batch_size: 16,
            epochs: 25,
            learning_rate: 2e-3,
            seed: 1,
            ..Default::default()
        };
        let teacher = pretrain_mlm(EncoderModel::init_random(cfg, 1).unwrap(), &train, &pcfg).unwrap().model;
        let teacher_pppl = pseudo_perplexity(&teacher, &held_out).unwrap().pppl;
        GrammarSetup {
            held_out,
            train,
            teacher,
            teacher_pppl,
        }
    })
}

/// Encoder whose MLM head outputs all-zero logits.
fn uniform_model(cfg: EncoderConfig) -> EncoderModel {
    let mut m = EncoderModel::init_random(cfg, 0).unwrap();
    for t in [&mut m.params.head.dense_weight, &mut m.params.head.dense_bias, &mut m.params.head.ln_gain, &mut m.params.head.ln_bias, &mut m.params.head.decoder_bias] {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    m
}

#[test]
fn criterion_4_pppl_correctness() {
    let v = 181;
    let uniform = uniform_model(EncoderConfig::new(2, 2, 16, 32, v, 32));
    let seqs: Vec<Vec<u32>> = (0..20).map(|i| (0..8).map(|j| 5 + ((i * 7 + j * 3) % 170) as u32).collect()).collect();
    let u = pseudo_perplexity(&uniform, &seqs).unwrap().pppl;
    let uniform_ok = (u - v as f64).abs() / v as f64 <= 1e-6;

    let setup = grammar_teacher();
    let random = EncoderModel::init_random(*setup.teacher.config(), 5).unwrap();
    let r = pseudo_perplexity(&random, &setup.held_out).unwrap().pppl;
    let order_ok = setup.teacher_pppl < r;
    report(
        4,
        "pseudo-perplexity correctness",
        uniform_ok && order_ok,
        &format!("uniform {u:.6} vs V={v}; trained {:.3} < random {r:.3}", setup.teacher_pppl),
    );
}

#[test]
fn criterion_5_distillation_efficacy() {
    let setup = grammar_teacher();
    let v = setup.teacher.config().vocab_size;
    let student = EncoderModel::init_random(EncoderConfig::new(2, 4, 64, 128, v, 32).with_dropout(0.0), 2).unwrap();
    let before = setup.teacher.params.clone();
    let cfg = DistillConfig {
        micro_batch: 5,
        accumulation_steps: 2,
        epochs: 30,
        learning_rate: 2e-3,
        lr_decay: LrDecay::Linear,
        seed: 3,
        ..Default::default()
    };
    let run = distill_run(&setup.teacher, student, &setup.train, &cfg).unwrap();
    let student_pppl = pseudo_perplexity(&run.student, &setup.held_out).unwrap().pppl;
    let first = run.first_step.unwrap().total;
    let last = run.epochs.last().unwrap().total;
    let drop = 1.0 - last / first;
    let ok = setup.teacher_pppl < 5.0
        && student_pppl <= 1.5 * setup.teacher_pppl
        && drop >= 0.5
        && setup.teacher.params == before;
    report(
        5,
        "distillation efficacy at desk scale",
        ok,
        &format!(
            "teacher PPPL {:.3}, student PPPL {student_pppl:.3}, loss {first:.2} -> {last:.2} ({:.0}% drop)",
            setup.teacher_pppl,
            drop * 100.0
        ),
    );
}

fn equal_batches(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> Vec<MaskedBatch> {
    (0..n)
        .map(|_| {
            let seqs: Vec<Vec<u32>> = (0..2)
                .map(|_| {
                    let mut s = vec![1];
                    s.extend((0..6).map(|_| rng.random_range(5..vocab)));
                    s.push(2);
                    s
                })
                .collect();
            let inputs = TokenBatch::from_sequences(&seqs).unwrap();
            let mut labels = vec![IGNORE_INDEX; inputs.len()];
            for row in [0, 1] {
                for pos in [2, 5] {
                    let i = row * inputs.seq_len + pos;
                    labels[i] = inputs.ids[i] as i32;
                }
            }
            let mut masked = inputs.clone();
            for (i, l) in labels.iter().enumerate() {
                if *l != IGNORE_INDEX {
                    masked.ids[i] = 4;
                }
            }
            MaskedBatch::new(masked, labels).unwrap()
        })
        .collect()
}

fn concat(batches: &[MaskedBatch]) -> MaskedBatch {
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut mask = Vec::new();
    for b in batches {
        ids.extend_from_slice(&b.inputs.ids);
        labels.extend_from_slice(&b.labels);
        mask.extend_from_slice(&b.inputs.attention_mask);
    }
    let inputs = TokenBatch {
        ids,
        batch: batches.len() * batches[0].inputs.batch,
        seq_len: batches[0].inputs.seq_len,
        attention_mask: mask,
    };
    MaskedBatch::new(inputs, labels).unwrap()
}

#[test]
fn criterion_6_accumulation_equivalence() {
    let cfg = EncoderConfig::new(2, 2, 16, 32, 30, 16).with_dropout(0.0);
    let teacher = EncoderModel::init_random(cfg, 1).unwrap();
    let student = EncoderModel::init_random(EncoderConfig { layers: 1, ..cfg }, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batches = equal_batches(&mut rng, 4, 30);
    let base = DistillConfig {
        learning_rate: 0.5,
        optimizer: OptimizerConfig::sgd(),
        ..Default::default()
    };

    let mut acc4 = Distiller::new(&teacher, student.clone(), DistillConfig { accumulation_steps: 4, ..base.clone() }).unwrap();
    for b in &batches {
        acc4.distill_step(b).unwrap();
    }
    let mut acc1 = Distiller::new(&teacher, student.clone(), DistillConfig { accumulation_steps: 1, ..base.clone() }).unwrap();
    acc1.distill_step(&concat(&batches)).unwrap();

    let mut max_diff = 0f32;
    let mut max_step = 0f32;
    for (((_, a), (_, b)), (_, s)) in acc4
        .student()
        .params
        .named()
        .into_iter()
        .zip(acc1.student().params.named())
        .zip(student.params.named())
    {
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(s.data()) {
            max_diff = max_diff.max((x - y).abs());
            max_step = max_step.max((x - z).abs());
        }
    }
    let effective = DistillConfig::default().effective_batch_size();
    let ok = acc4.updates() == 1 && acc1.updates() == 1 && max_diff <= 1e-5 && max_step > 1e-3 && effective == 640;
    report(
        6,
        "gradient-accumulation equivalence",
        ok,
        &format!("max parameter difference {max_diff:.2e} (update size {max_step:.2e}); 5 x 128 = {effective}"),
    );
}

struct BiasRun {
    teacher: f64,
    teacher_b: f64,
    student: f64,
    antisymmetry: f64,
}

fn bias_run(seed: u64) -> BiasRun {
    let c = skewed_bias_corpus(400, "hij", "zij", 0.9, seed).unwrap();
    let tok = Tokenizer::train(&c.sentences, 80).unwrap();
    let ids: Vec<Vec<u32>> = c.sentences.iter().map(|s| tok.encode(s)).collect();
    let v = tok.vocab_size();
    let tcfg = EncoderConfig::new(4, 4, 32, 64, v, 32).with_dropout(0.0);
    let pcfg = PretrainConfig {
        batch_size: 16,
        epochs: 20,
        learning_rate: 2e-3,
        seed,
        ..Default::default()
    };
    let teacher = pretrain_mlm(EncoderModel::init_random(tcfg, seed).unwrap(), &ids, &pcfg).unwrap().model;
    let ta: Vec<BiasTemplate> = c.templates_a.iter().map(|t| BiasTemplate::parse(t).unwrap()).collect();
    let tb: Vec<BiasTemplate> = c.templates_b.iter().map(|t| BiasTemplate::parse(t).unwrap()).collect();
    let forward = bias_score(&teacher, &tok, &ta, "hij", "zij").unwrap();
    let swapped = bias_score(&teacher, &tok, &ta, "zij", "hij").unwrap();
    let antisymmetry = forward
        .entries
        .iter()
        .zip(&swapped.entries)
        .map(|(a, b)| (a.score + b.score).abs())
        .fold(0.0, f64::max);
    let teacher_b = bias_score(&teacher, &tok, &tb, "hij", "zij").unwrap().aggregate;

    let scfg = EncoderConfig::new(2, 4, 32, 64, v, 32).with_dropout(0.0);
    let dcfg = DistillConfig {
        micro_batch: 5,
        accumulation_steps: 2,
        epochs: 10,
        learning_rate: 2e-3,
        lr_decay: LrDecay::Linear,
        seed,
        ..Default::default()
    };
    let student = distill_run(&teacher, EncoderModel::init_random(scfg, seed + 100).unwrap(), &ids, &dcfg)
        .unwrap()
        .student;
    BiasRun {
        teacher: forward.aggregate,
        teacher_b,
        student: bias_score(&student, &tok, &ta, "hij", "zij").unwrap().aggregate,
        antisymmetry,
    }
}

#[test]
fn criterion_7_bias_score_contract() {
    let runs: Vec<BiasRun> = (0..5).map(bias_run).collect();
    let antisym = runs.iter().map(|r| r.antisymmetry).fold(0.0, f64::max);

    let c = skewed_bias_corpus(50, "hij", "zij", 0.9, 0).unwrap();
    let tok = Tokenizer::train(&c.sentences, 80).unwrap();
    let blind = uniform_model(EncoderConfig::new(1, 2, 8, 16, tok.vocab_size(), 32));
    let ta: Vec<BiasTemplate> = c.templates_a.iter().map(|t| BiasTemplate::parse(t).unwrap()).collect();
    let zero = bias_score(&blind, &tok, &ta, "hij", "zij").unwrap().aggregate;

    let sign_ok = runs.iter().all(|r| r.teacher > 0.0 && r.teacher_b < 0.0);
    let shrunk = runs.iter().filter(|r| r.student.abs() <= r.teacher.abs()).count();
    let ok = antisym <= 1e-6 && zero.abs() <= 1e-6 && sign_ok && shrunk >= 4;
    let pairs: Vec<String> = runs.iter().map(|r| format!("{:.2}/{:.2}", r.teacher, r.student)).collect();
    report(
        7,
        "bias score contract",
        ok,
        &format!(
            "antisymmetry {antisym:.1e}; blind model {zero:.1e}; teacher sign correct {sign_ok}; \
             teacher/student {}; student smaller in {shrunk}/5",
            pairs.join(" ")
        ),
    );
}

#[test]
fn criterion_8_finetune_protocol() {
    let draws = sample_hyperparameters(10_000, 8).unwrap();
    let in_range = draws.iter().all(|s| s.in_range())
        && ACCUMULATION_CHOICES.iter().all(|a| draws.iter().any(|s| s.gradient_accumulation_steps == *a));

    let data = sentiment_task(5000, 3);
    let texts: Vec<&str> = data.iter().map(|(_, t)| t.as_str()).collect();
    let tok = Tokenizer::train(&texts, 60).unwrap();
    let examples: Vec<Example> = data
        .iter()
        .map(|(l, t)| Example {
            ids: tok.encode(t),
            labels: vec![*l as i32],
        })
        .collect();
    let (train, rest) = examples.split_at(4000);
    let (valid, test) = rest.split_at(500);
    let encoder = EncoderModel::init_random(EncoderConfig::new(2, 4, 32, 64, tok.vocab_size(), 32).with_dropout(0.0), 0).unwrap();
    let samples = sample_hyperparameters(5, 0).unwrap();
    // the search sees only train and validation; test is scored afterwards
    let outcome = random_search(&encoder, TaskSpec::sequence(2), train, valid, samples, 0).unwrap();
    let values: Vec<f64> = outcome.validation.iter().map(|r| r.value).collect();
    let selected_ok = select_best(&values) == Some(outcome.selected) && outcome.samples.len() == 5;
    let best = values[outcome.selected];
    let (result, _) = outcome.evaluate_test(test).unwrap();
    let ok = in_range && selected_ok && best >= 0.95;
    report(
        8,
        "fine-tuning protocol",
        ok,
        &format!(
            "10^4 draws in range {in_range}; validation {values:?}; selected {} (test {:.3})",
            result.selected, result.test.value
        ),
    );
}

#[test]
fn criterion_9_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let model = EncoderModel::init_random(EncoderConfig::new(2, 2, 16, 32, 50, 16), 4).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let bits = |m: &EncoderModel| -> Vec<u32> {
        m.params.named().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
    };
    let ckpt_ok = bits(&model) == bits(&back) && back.config() == model.config();

    let corpus = grammar_corpus(300, 0, 1).unwrap().train;
    let tok = Tokenizer::train(&corpus, 150).unwrap();
    let tok_ok = corpus.iter().all(|l| tok.decode(&tok.encode(l)).unwrap() == *l);

    let mut shuffled: Vec<String> = corpus.clone();
    shuffle_records(&mut shuffled, 5);
    let mut a = shuffled.clone();
    let mut b = corpus.clone();
    a.sort();
    b.sort();
    let shuffle_ok = a == b && shuffled != corpus;

    let teacher = EncoderModel::init_random(EncoderConfig::new(12, 2, 8, 16, 30, 16), 1).unwrap();
    let student = init_student_from_teacher(&teacher, EncoderConfig::new(6, 2, 8, 16, 30, 16), 2).unwrap();
    let map = student_layer_map(12, 6);
    let layers_ok = map == [0, 2, 4, 6, 8, 10]
        && map.iter().enumerate().all(|(k, &t)| student.params.layers[k] == teacher.params.layers[t])
        && student.params.embeddings == teacher.params.embeddings
        && student.params.head == teacher.params.head;

    report(
        9,
        "round trips",
        ckpt_ok && tok_ok && shuffle_ok && layers_ok,
        &format!("checkpoint {ckpt_ok}; tokenizer {tok_ok}; shuffle {shuffle_ok}; layer copy {map:?} {layers_ok}"),
    );
}
