//! Classification heads, task data, metrics and random hyperparameter search.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::{truncate_keep_first, truncate_keep_last};
use crate::distill::{mlm_loss, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::model::{EncoderModel, EncoderParams, TokenBatch, INIT_STD};
use crate::optim::{clip_grad_norm, Optimizer, OptimizerConfig};
use crate::pretrain::shuffled_batches;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SequenceClassification,
    TokenClassification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    #[default]
    KeepFirst,
    KeepLast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    /// Token-level micro-F1 with label 0 as the outside class.
    MicroF1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub num_labels: usize,
    #[serde(default)]
    pub truncation: Truncation,
    pub metric: Metric,
}

impl TaskSpec {
    pub fn sequence(num_labels: usize) -> Self {
        TaskSpec {
            kind: TaskKind::SequenceClassification,
            num_labels,
            truncation: Truncation::KeepFirst,
            metric: Metric::Accuracy,
        }
    }

    pub fn token(num_labels: usize) -> Self {
        TaskSpec {
            kind: TaskKind::TokenClassification,
            num_labels,
            truncation: Truncation::KeepFirst,
            metric: Metric::MicroF1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_labels < 2 {
            return Err(Error::Config(format!("num_labels must be at least 2, got {}", self.num_labels)));
        }
        Ok(())
    }
}

/// One tokenized example. Sequence tasks carry a single label; token tasks
/// carry one label per id, [`IGNORE_INDEX`] where no prediction is scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub labels: Vec<i32>,
}

/// Parses `label<TAB>text` lines; labels are integers in `[0, num_labels)`.
pub fn parse_sequence_tsv(text: &str, tokenizer: &Tokenizer, num_labels: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("line {}: expected label<TAB>text", n + 1)))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("line {}: label {label:?} is not an integer", n + 1)))?;
        if label >= num_labels {
            return Err(Error::Data(format!("line {}: label {label} outside [0, {num_labels})", n + 1)));
        }
        out.push(Example {
            ids: tokenizer.encode(body),
            labels: vec![label as i32],
        });
    }
    Ok(out)
}

/// Parses CoNLL-style `token tag` lines with blank lines between sentences.
/// Each word's first piece carries the tag index in `tags`; later pieces
/// and the specials are ignored.
pub fn parse_conll(text: &str, tokenizer: &Tokenizer, tags: &[String]) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let mut words: Vec<(String, usize)> = Vec::new();
    let flush = |words: &mut Vec<(String, usize)>, out: &mut Vec<Example>| {
        if words.is_empty() {
            return;
        }
        let mut ids = vec![crate::tokenizer::BOS_ID];
        let mut labels = vec![IGNORE_INDEX];
        for (w, tag) in words.drain(..) {
            for (i, id) in tokenizer.encode_word(&w).into_iter().enumerate() {
                ids.push(id);
                labels.push(if i == 0 { tag as i32 } else { IGNORE_INDEX });
            }
        }
        ids.push(crate::tokenizer::EOS_ID);
        labels.push(IGNORE_INDEX);
        out.push(Example { ids, labels });
    };
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            flush(&mut words, &mut out);
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(word), Some(tag), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Data(format!("line {}: expected 'token tag'", n + 1)));
        };
        let idx = tags
            .iter()
            .position(|t| t == tag)
            .ok_or_else(|| Error::Data(format!("line {}: unknown tag {tag:?}", n + 1)))?;
        words.push((word.to_string(), idx));
    }
    flush(&mut words, &mut out);
    Ok(out)
}

/// Fits examples into `max_len` positions using the task's truncation rule.
pub fn truncate_examples(examples: &[Example], spec: &TaskSpec, max_len: usize) -> Result<Vec<Example>> {
    examples
        .iter()
        .map(|ex| {
            if ex.ids.len() <= max_len {
                return Ok(ex.clone());
            }
            let ids = match spec.truncation {
                Truncation::KeepFirst => truncate_keep_first(&ex.ids, max_len)?,
                Truncation::KeepLast => truncate_keep_last(&ex.ids, max_len)?,
            };
            let labels = match spec.kind {
                TaskKind::SequenceClassification => ex.labels.clone(),
                TaskKind::TokenClassification => {
                    let l = &ex.labels;
                    let mut labels = match spec.truncation {
                        Truncation::KeepFirst => l[..max_len - 1].to_vec(),
                        Truncation::KeepLast => {
                            let mut v = vec![IGNORE_INDEX];
                            v.extend_from_slice(&l[l.len() - (max_len - 1)..]);
                            v
                        }
                    };
                    if spec.truncation == Truncation::KeepFirst {
                        labels.push(IGNORE_INDEX);
                    }
                    labels
                }
            };
            Ok(Example { ids, labels })
        })
        .collect()
}

/// Encoder plus a freshly initialized linear classification head.
#[derive(Debug, Clone)]
pub struct TaskModel {
    pub encoder: EncoderModel,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    spec: TaskSpec,
}

pub fn attach_head(encoder: EncoderModel, spec: TaskSpec, seed: u64) -> Result<TaskModel> {
    spec.validate()?;
    let h = encoder.config().hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, INIT_STD).expect("positive std");
    let w: Vec<f32> = (0..h * spec.num_labels).map(|_| normal.sample(&mut rng)).collect();
    Ok(TaskModel {
        encoder,
        head_weight: Tensor::new(vec![h, spec.num_labels], w)?.with_grad(),
        head_bias: Tensor::zeros(&[spec.num_labels]).with_grad(),
        spec,
    })
}

struct Bound {
    encoder: EncoderParams<Var>,
    weight: Var,
    bias: Var,
}

impl TaskModel {
    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> Bound {
        let encoder = self.encoder.bind(tape, trainable);
        let (weight, bias) = if trainable {
            (tape.input(&self.head_weight), tape.input(&self.head_bias))
        } else {
            (tape.constant(&self.head_weight), tape.constant(&self.head_bias))
        };
        Bound { encoder, weight, bias }
    }

    /// Logits: `[B, L]` for sequence tasks, `[B, S, L]` for token tasks.
    fn logits(&self, tape: &mut Tape<f32>, bound: &Bound, batch: &TokenBatch, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let out = self.encoder.forward(tape, &bound.encoder, batch, rng)?;
        let hidden = match self.spec.kind {
            TaskKind::SequenceClassification => {
                let rows: Vec<usize> = (0..batch.batch).map(|b| b * batch.seq_len).collect();
                tape.gather_rows(out.last_hidden(), &rows)?
            }
            TaskKind::TokenClassification => out.last_hidden(),
        };
        let y = tape.matmul(hidden, bound.weight, false)?;
        tape.add_bias(y, bound.bias)
    }

    /// Eval-mode logits as a tensor.
    pub fn predict_logits(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, false);
        let y = self.logits(&mut tape, &bound, batch, None)?;
        Ok(tape.to_tensor(y))
    }

    /// Argmax label per scored position: one per example for sequence tasks,
    /// one per labelled position for token tasks.
    pub fn predict(&self, examples: &[Example]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(32) {
            let seqs: Vec<Vec<u32>> = chunk.iter().map(|e| e.ids.clone()).collect();
            let batch = TokenBatch::from_sequences(&seqs)?;
            let logits = self.predict_logits(&batch)?;
            let l = self.spec.num_labels;
            let argmax = |row: &[f32]| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            };
            for (b, ex) in chunk.iter().enumerate() {
                match self.spec.kind {
                    TaskKind::SequenceClassification => {
                        out.push(vec![argmax(&logits.data()[b * l..(b + 1) * l])]);
                    }
                    TaskKind::TokenClassification => {
                        let preds = (0..ex.ids.len())
                            .filter(|&s| ex.labels[s] != IGNORE_INDEX)
                            .map(|s| {
                                let row = (b * batch.seq_len + s) * l;
                                argmax(&logits.data()[row..row + l])
                            })
                            .collect();
                        out.push(preds);
                    }
                }
            }
        }
        Ok(out)
    }

    fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.head_weight.zero_grad();
        self.head_bias.zero_grad();
    }

    fn accumulate_grads(&mut self, tape: &Tape<f32>, bound: &Bound) -> Result<()> {
        self.encoder.accumulate_grads(tape, &bound.encoder)?;
        if let Some(g) = tape.grad(bound.weight) {
            self.head_weight.accumulate_grad(g)?;
        }
        if let Some(g) = tape.grad(bound.bias) {
            self.head_bias.accumulate_grad(g)?;
        }
        Ok(())
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut params = self.encoder.params.named_mut();
        params.push(("classifier.weight".into(), &mut self.head_weight));
        params.push(("classifier.bias".into(), &mut self.head_bias));
        params
    }
}

/// One point of the fine-tuning search space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterSample {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub gradient_accumulation_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
    pub adam_epsilon: f32,
    pub warmup_steps: usize,
    pub max_grad_norm: f32,
}

pub const LR_RANGE: (f64, f64) = (1e-6, 1e-4);
pub const WEIGHT_DECAY_RANGE: (f64, f64) = (0.0, 0.1);
pub const ACCUMULATION_CHOICES: [usize; 4] = [2, 4, 8, 16];
pub const DEFAULT_SAMPLES: usize = 5;

impl HyperparameterSample {
    /// Sample with the fixed settings and the given searched values.
    pub fn with(learning_rate: f32, weight_decay: f32, gradient_accumulation_steps: usize) -> Self {
        HyperparameterSample {
            learning_rate,
            weight_decay,
            gradient_accumulation_steps,
            epochs: 3,
            batch_size: 8,
            max_len: 512,
            seed: 1,
            adam_epsilon: 1e-8,
            warmup_steps: 0,
            max_grad_norm: 1.0,
        }
    }

    pub fn in_range(&self) -> bool {
        let lr = self.learning_rate as f64;
        let wd = self.weight_decay as f64;
        lr >= LR_RANGE.0 * (1.0 - 1e-6)
            && lr <= LR_RANGE.1 * (1.0 + 1e-6)
            && (WEIGHT_DECAY_RANGE.0..=WEIGHT_DECAY_RANGE.1).contains(&wd)
            && ACCUMULATION_CHOICES.contains(&self.gradient_accumulation_steps)
    }
}

/// `n` independent draws: log-uniform learning rate, uniform weight decay,
/// uniform accumulation choice.
pub fn sample_hyperparameters(n: usize, seed: u64) -> Result<Vec<HyperparameterSample>> {
    if n == 0 {
        return Err(Error::invalid("need at least one hyperparameter sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (LR_RANGE.0.ln(), LR_RANGE.1.ln());
    Ok((0..n)
        .map(|_| {
            let lr = rng.random_range(lo..=hi).exp();
            let wd = rng.random_range(WEIGHT_DECAY_RANGE.0..=WEIGHT_DECAY_RANGE.1);
            let acc = *ACCUMULATION_CHOICES.choose(&mut rng).expect("non-empty");
            HyperparameterSample::with(lr as f32, wd as f32, acc)
        })
        .collect())
}

fn check_labels(examples: &[Example], spec: &TaskSpec) -> Result<()> {
    for (i, ex) in examples.iter().enumerate() {
        let bad = ex
            .labels
            .iter()
            .find(|&&l| l != IGNORE_INDEX && (l < 0 || l as usize >= spec.num_labels));
        if let Some(l) = bad {
            return Err(Error::Data(format!("example {i}: label {l} outside [0, {})", spec.num_labels)));
        }
        let expected = match spec.kind {
            TaskKind::SequenceClassification => 1,
            TaskKind::TokenClassification => ex.ids.len(),
        };
        if ex.labels.len() != expected {
            return Err(Error::Data(format!("example {i}: {} labels, expected {expected}", ex.labels.len())));
        }
    }
    Ok(())
}

/// Cross-entropy training of `model` on `train` with one sample's settings.
pub fn train_task(mut model: TaskModel, train: &[Example], sample: &HyperparameterSample) -> Result<TaskModel> {
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    check_labels(train, &model.spec)?;
    let max_len = sample.max_len.min(model.encoder.config().max_positions);
    let train = truncate_examples(train, &model.spec, max_len)?;
    let mut optimizer = Optimizer::new(OptimizerConfig {
        epsilon: sample.adam_epsilon,
        weight_decay: sample.weight_decay,
        ..OptimizerConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(sample.seed);
    let accum = sample.gradient_accumulation_steps.max(1);
    let use_dropout = model.encoder.config().dropout > 0.0;
    model.encoder.set_trainable(true);
    model.zero_grad();
    let mut update = |model: &mut TaskModel| {
        let mut params = model.named_mut();
        clip_grad_norm(&mut params, sample.max_grad_norm);
        optimizer.step(&mut params, sample.learning_rate);
        drop(params);
        model.zero_grad();
    };
    for _ in 0..sample.epochs {
        let mut pending = 0;
        for idx in shuffled_batches(train.len(), sample.batch_size, &mut rng) {
            let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| train[i].ids.clone()).collect();
            let batch = TokenBatch::from_sequences(&seqs)?;
            let labels: Vec<i32> = match model.spec.kind {
                TaskKind::SequenceClassification => idx.iter().map(|&i| train[i].labels[0]).collect(),
                TaskKind::TokenClassification => idx
                    .iter()
                    .flat_map(|&i| {
                        let l = &train[i].labels;
                        l.iter().copied().chain(std::iter::repeat_n(IGNORE_INDEX, batch.seq_len - l.len()))
                    })
                    .collect(),
            };
            if labels.iter().all(|&l| l == IGNORE_INDEX) {
                continue;
            }
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape, true);
            let logits = model.logits(&mut tape, &bound, &batch, use_dropout.then_some(&mut rng))?;
            let loss = mlm_loss(&mut tape, logits, &labels)?;
            let scaled = tape.scale(loss, 1.0 / accum as f64);
            tape.backward(scaled)?;
            model.accumulate_grads(&tape, &bound)?;
            pending += 1;
            if pending == accum {
                update(&mut model);
                pending = 0;
            }
        }
        if pending > 0 {
            update(&mut model);
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub value: f64,
    /// Half-width of the 95% normal-approximation interval (accuracy only).
    pub ci_half_width: Option<f64>,
    /// Number of scored predictions.
    pub n: usize,
}

/// `1.96 * sqrt(p (1 - p) / n)`.
pub fn accuracy_ci(p: f64, n: usize) -> f64 {
    1.96 * (p * (1.0 - p) / n as f64).sqrt()
}

pub fn accuracy(preds: &[usize], gold: &[usize]) -> Result<MetricReport> {
    if preds.len() != gold.len() || gold.is_empty() {
        return Err(Error::shape("accuracy", &[preds.len()], &[gold.len()]));
    }
    let correct = preds.iter().zip(gold).filter(|(p, g)| p == g).count();
    let p = correct as f64 / gold.len() as f64;
    Ok(MetricReport {
        metric: Metric::Accuracy,
        value: p,
        ci_half_width: Some(accuracy_ci(p, gold.len())),
        n: gold.len(),
    })
}

/// Micro-averaged F1 over all non-outside labels (label 0 is outside).
/// Zero when nothing is predicted as a positive label.
pub fn micro_f1(preds: &[usize], gold: &[usize]) -> Result<MetricReport> {
    if preds.len() != gold.len() || gold.is_empty() {
        return Err(Error::shape("micro_f1", &[preds.len()], &[gold.len()]));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in preds.iter().zip(gold) {
        if p == g {
            if g != 0 {
                tp += 1;
            }
        } else {
            if p != 0 {
                fp += 1;
            }
            if g != 0 {
                fn_ += 1;
            }
        }
    }
    let value = if tp + fp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ok(MetricReport {
        metric: Metric::MicroF1,
        value,
        ci_half_width: None,
        n: gold.len(),
    })
}

pub fn evaluate(model: &TaskModel, split: &[Example]) -> Result<MetricReport> {
    if split.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    check_labels(split, &model.spec)?;
    let split = truncate_examples(split, &model.spec, model.encoder.config().max_positions)?;
    let preds: Vec<usize> = model.predict(&split)?.concat();
    let gold: Vec<usize> = split
        .iter()
        .flat_map(|e| e.labels.iter().filter(|&&l| l != IGNORE_INDEX).map(|&l| l as usize))
        .collect();
    match model.spec.metric {
        Metric::Accuracy => accuracy(&preds, &gold),
        Metric::MicroF1 => micro_f1(&preds, &gold),
    }
}

/// Outcome of the search on train and validation data. Test data can only
/// be scored through [`SearchOutcome::evaluate_test`], which consumes it.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub samples: Vec<HyperparameterSample>,
    pub validation: Vec<MetricReport>,
    pub selected: usize,
    model: TaskModel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneResult {
    pub samples: Vec<HyperparameterSample>,
    pub validation: Vec<MetricReport>,
    pub selected: usize,
    pub test: MetricReport,
}

impl SearchOutcome {
    pub fn model(&self) -> &TaskModel {
        &self.model
    }

    pub fn evaluate_test(self, test: &[Example]) -> Result<(FinetuneResult, TaskModel)> {
        let test = evaluate(&self.model, test)?;
        Ok((
            FinetuneResult {
                samples: self.samples,
                validation: self.validation,
                selected: self.selected,
                test,
            },
            self.model,
        ))
    }
}

/// Index of the largest value; the earliest wins ties.
pub fn select_best(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Trains one model per sample from `encoder` and keeps the best on
/// `validation`.
pub fn random_search(
    encoder: &EncoderModel,
    spec: TaskSpec,
    train: &[Example],
    validation: &[Example],
    samples: Vec<HyperparameterSample>,
    head_seed: u64,
) -> Result<SearchOutcome> {
    if samples.is_empty() {
        return Err(Error::invalid("random search needs at least one sample"));
    }
    if validation.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    let mut best: Option<TaskModel> = None;
    let mut reports = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let model = attach_head(encoder.clone(), spec, head_seed)?;
        let model = train_task(model, train, sample)?;
        let report = evaluate(&model, validation)?;
        log::info!("sample {i}: lr {:.2e} validation {:.4}", sample.learning_rate, report.value);
        let values: Vec<f64> = reports.iter().map(|r: &MetricReport| r.value).collect();
        if values.iter().all(|v| report.value > *v) {
            best = Some(model);
        }
        reports.push(report);
    }
    let values: Vec<f64> = reports.iter().map(|r| r.value).collect();
    Ok(SearchOutcome {
        selected: select_best(&values).expect("non-empty"),
        samples,
        validation: reports,
        model: best.expect("first sample always kept"),
    })
}
