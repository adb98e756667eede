//! Plain masked-language-model training, used to build teachers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::distill::{apply_masking_with, mlm_loss, MaskPolicy};
use crate::error::{Error, Result};
use crate::model::{EncoderModel, TokenBatch};
use crate::optim::{clip_grad_norm, LrSchedule, Optimizer, OptimizerConfig};

/// How the learning rate evolves over a run whose length is known up front.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Constant,
    Linear,
}

impl LrDecay {
    pub fn schedule(self, total_steps: usize) -> LrSchedule {
        match self {
            LrDecay::Constant => LrSchedule::Constant,
            LrDecay::Linear => LrSchedule::Linear {
                warmup_steps: 0,
                total_steps,
            },
        }
    }
}

/// Index batches covering `0..n` in a random order.
pub(crate) fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub masking: MaskPolicy,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub lr_decay: LrDecay,
    pub optimizer: OptimizerConfig,
    pub max_grad_norm: Option<f32>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            masking: MaskPolicy::default(),
            batch_size: 16,
            epochs: 10,
            learning_rate: 1e-3,
            lr_decay: LrDecay::Constant,
            optimizer: OptimizerConfig::default(),
            max_grad_norm: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub model: EncoderModel,
    /// Mean MLM loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains `model` on tokenized `corpus` with the MLM objective only.
pub fn pretrain_mlm(mut model: EncoderModel, corpus: &[Vec<u32>], config: &PretrainConfig) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    config.masking.validate()?;
    let per_epoch = corpus.len().div_ceil(config.batch_size);
    let schedule = config.lr_decay.schedule(per_epoch * config.epochs);
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = model.config().vocab_size;
    let use_dropout = model.config().dropout > 0.0;
    model.set_trainable(true);
    model.zero_grad();

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let batches = shuffled_batches(corpus.len(), config.batch_size, &mut rng);
        let n = batches.len();
        for idx in batches {
            let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| corpus[i].clone()).collect();
            let batch = TokenBatch::from_sequences(&seqs)?;
            let masked = apply_masking_with(&batch, &config.masking, vocab, &mut rng)?;

            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape, true);
            let dropout = use_dropout.then_some(&mut rng);
            let out = model.forward(&mut tape, &bound, &masked.inputs, dropout)?;
            let rows = tape.gather_rows(out.last_hidden(), &masked.masked_rows())?;
            let logits = model.mlm_logits(&mut tape, &bound, rows)?;
            let labels: Vec<i32> = masked.masked_labels().iter().map(|&l| l as i32).collect();
            let loss = mlm_loss(&mut tape, logits, &labels)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Data(format!("non-finite MLM loss at step {step}")));
            }
            total += value;
            tape.backward(loss)?;
            model.accumulate_grads(&tape, &bound)?;

            let lr = schedule.lr_at(config.learning_rate, step);
            let mut params = model.params.named_mut();
            if let Some(max) = config.max_grad_norm {
                clip_grad_norm(&mut params, max);
            }
            optimizer.step(&mut params, lr);
            drop(params);
            model.zero_grad();
            step += 1;
        }
        let mean = total / n as f64;
        log::debug!("pretrain epoch {} mlm loss {mean:.4}", epoch + 1);
        epoch_losses.push(mean);
    }
    Ok(PretrainReport { model, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = shuffled_batches(11, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 3]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn loss_goes_down_on_tiny_corpus() {
        let cfg = EncoderConfig::new(1, 2, 16, 32, 12, 8).with_dropout(0.0);
        let model = EncoderModel::init_random(cfg, 0).unwrap();
        let corpus: Vec<Vec<u32>> = (0..8).map(|i| vec![1, 5 + i % 3, 8 + i % 4, 2]).collect();
        let run = PretrainConfig {
            batch_size: 4,
            epochs: 30,
            learning_rate: 5e-3,
            ..Default::default()
        };
        let report = pretrain_mlm(model, &corpus, &run).unwrap();
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(last < first, "{first} -> {last}");
    }
}
