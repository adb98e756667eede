use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{cosine_alignment_loss, distillation_ce_loss, mlm_loss};
use super::masking::{apply_masking_with, MaskPolicy, MaskedBatch};
use crate::autodiff::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{EncoderModel, EncoderParams, TokenBatch};
use crate::optim::{clip_grad_norm, LrSchedule, Optimizer, OptimizerConfig};
use crate::pretrain::{shuffled_batches, LrDecay};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub temperature: f64,
    pub alpha_ce: f64,
    pub alpha_mlm: f64,
    pub alpha_cos: f64,
    pub masking: MaskPolicy,
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub lr_decay: LrDecay,
    pub optimizer: OptimizerConfig,
    pub max_grad_norm: Option<f32>,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 2.0,
            alpha_ce: 5.0,
            alpha_mlm: 2.0,
            alpha_cos: 1.0,
            masking: MaskPolicy::default(),
            micro_batch: 5,
            accumulation_steps: 128,
            epochs: 1,
            learning_rate: 5e-4,
            lr_decay: LrDecay::Constant,
            optimizer: OptimizerConfig::default(),
            max_grad_norm: None,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        let alphas = [self.alpha_ce, self.alpha_mlm, self.alpha_cos];
        if alphas.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if alphas.iter().all(|a| *a == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if self.micro_batch == 0 || self.accumulation_steps == 0 {
            return Err(Error::Config("micro_batch and accumulation_steps must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        self.masking.validate()
    }

    /// Sequences contributing to one parameter update.
    pub fn effective_batch_size(&self) -> usize {
        self.micro_batch * self.accumulation_steps
    }
}

/// Loss values of one micro-batch. `l_ce` already includes the `T²` factor,
/// so `total = alpha_ce·l_ce + alpha_mlm·l_mlm + alpha_cos·l_cos`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_mlm: f64,
    pub l_cos: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(LossBreakdown {
            l_ce: sum(|l| l.l_ce),
            l_mlm: sum(|l| l.l_mlm),
            l_cos: sum(|l| l.l_cos),
            total: sum(|l| l.total),
        })
    }
}

/// One line of the training log, written per parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_ce: f64,
    pub l_mlm: f64,
    pub l_cos: f64,
    pub total: f64,
    pub learning_rate: f32,
}

/// Frozen teacher outputs for one masked batch.
#[derive(Debug, Clone)]
pub struct TeacherTargets {
    /// Logits at the masked rows, `[num_masked, V]`.
    pub logits: Tensor,
    /// Final hidden states, `[B, S, H]`.
    pub hidden: Tensor,
}

pub fn teacher_targets(teacher: &EncoderModel, batch: &MaskedBatch) -> Result<TeacherTargets> {
    let mut tape = Tape::<f32>::new();
    let bound = teacher.bind(&mut tape, false);
    let out = teacher.forward(&mut tape, &bound, &batch.inputs, None)?;
    let hidden = out.last_hidden();
    let rows = tape.gather_rows(hidden, &batch.masked_rows())?;
    let logits = teacher.mlm_logits(&mut tape, &bound, rows)?;
    Ok(TeacherTargets {
        logits: tape.to_tensor(logits),
        hidden: tape.to_tensor(hidden),
    })
}

/// Loss nodes recorded by [`combined_loss`].
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    /// Soft-target cross-entropy, before the `T²` factor.
    pub ce: Var,
    pub mlm: Var,
    pub cos: Var,
    pub total: Var,
}

/// Records the weighted distillation objective for `student` on `tape`.
pub fn combined_loss<F: Element>(
    tape: &mut Tape<F>,
    student: &EncoderModel,
    bound: &EncoderParams<Var>,
    targets: &TeacherTargets,
    batch: &MaskedBatch,
    config: &DistillConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<LossVars> {
    if targets.hidden.shape().last() != Some(&student.config().hidden) {
        return Err(Error::shape(
            "teacher/student hidden",
            targets.hidden.shape(),
            &[student.config().hidden],
        ));
    }
    let out = student.forward(tape, bound, &batch.inputs, dropout_rng)?;
    let hidden = out.last_hidden();
    let rows = tape.gather_rows(hidden, &batch.masked_rows())?;
    let logits = student.mlm_logits(tape, bound, rows)?;

    let t_logits = tape.constant(&targets.logits);
    let t_hidden = tape.constant(&targets.hidden);
    let labels: Vec<i32> = batch.masked_labels().iter().map(|&l| l as i32).collect();

    let ce = distillation_ce_loss(tape, t_logits, logits, config.temperature)?;
    let mlm = mlm_loss(tape, logits, &labels)?;
    let cos = cosine_alignment_loss(tape, t_hidden, hidden, &batch.inputs.attention_mask)?;

    let t2 = config.temperature * config.temperature;
    let a = tape.scale(ce, config.alpha_ce * t2);
    let b = tape.scale(mlm, config.alpha_mlm);
    let c = tape.scale(cos, config.alpha_cos);
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossVars { ce, mlm, cos, total })
}

/// Owns the student during distillation and applies an optimizer update
/// every `accumulation_steps` micro-batches.
pub struct Distiller<'t> {
    teacher: &'t EncoderModel,
    student: EncoderModel,
    config: DistillConfig,
    optimizer: Optimizer,
    schedule: LrSchedule,
    rng: ChaCha8Rng,
    pending: Vec<LossBreakdown>,
    updates: usize,
    log: Vec<StepLog>,
}

impl<'t> Distiller<'t> {
    pub fn new(teacher: &'t EncoderModel, mut student: EncoderModel, config: DistillConfig) -> Result<Self> {
        config.validate()?;
        let (t, s) = (teacher.config(), student.config());
        if t.hidden != s.hidden {
            return Err(Error::Config(format!(
                "student hidden size {} differs from teacher hidden size {}",
                s.hidden, t.hidden
            )));
        }
        if t.vocab_size != s.vocab_size {
            return Err(Error::Config("student and teacher vocabularies differ".into()));
        }
        student.set_trainable(true);
        student.zero_grad();
        Ok(Distiller {
            teacher,
            student,
            optimizer: Optimizer::new(config.optimizer),
            schedule: LrSchedule::Constant,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            pending: Vec::new(),
            updates: 0,
            log: Vec::new(),
        })
    }

    pub fn with_schedule(mut self, schedule: LrSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn student(&self) -> &EncoderModel {
        &self.student
    }

    pub fn into_student(self) -> EncoderModel {
        self.student
    }

    pub fn log(&self) -> &[StepLog] {
        &self.log
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn config(&self) -> &DistillConfig {
        &self.config
    }

    /// Forward both models on `batch`, accumulate `total / accumulation_steps`
    /// into the student gradients and update once enough micro-batches have
    /// been seen.
    pub fn distill_step(&mut self, batch: &MaskedBatch) -> Result<LossBreakdown> {
        let targets = teacher_targets(self.teacher, batch)?;
        let mut tape = Tape::<f32>::new();
        let bound = self.student.bind(&mut tape, true);
        let dropout = (self.student.config().dropout > 0.0).then_some(&mut self.rng);
        let vars = combined_loss(&mut tape, &self.student, &bound, &targets, batch, &self.config, dropout)?;
        let t2 = self.config.temperature * self.config.temperature;
        let breakdown = LossBreakdown {
            l_ce: tape.scalar(vars.ce) * t2,
            l_mlm: tape.scalar(vars.mlm),
            l_cos: tape.scalar(vars.cos),
            total: tape.scalar(vars.total),
        };
        if ![breakdown.l_ce, breakdown.l_mlm, breakdown.l_cos, breakdown.total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Data(format!("non-finite distillation loss {breakdown:?}")));
        }
        let scaled = tape.scale(vars.total, 1.0 / self.config.accumulation_steps as f64);
        tape.backward(scaled)?;
        self.student.accumulate_grads(&tape, &bound)?;
        self.pending.push(breakdown);
        if self.pending.len() == self.config.accumulation_steps {
            self.flush();
        }
        Ok(breakdown)
    }

    /// Applies an update from whatever gradient has been accumulated.
    pub fn flush(&mut self) -> Option<StepLog> {
        let mean = LossBreakdown::mean(&self.pending)?;
        self.pending.clear();
        let lr = self.schedule.lr_at(self.config.learning_rate, self.updates);
        let mut params = self.student.params.named_mut();
        if let Some(max) = self.config.max_grad_norm {
            clip_grad_norm(&mut params, max);
        }
        self.optimizer.step(&mut params, lr);
        drop(params);
        self.student.zero_grad();
        self.updates += 1;
        let entry = StepLog {
            step: self.updates,
            l_ce: mean.l_ce,
            l_mlm: mean.l_mlm,
            l_cos: mean.l_cos,
            total: mean.total,
            learning_rate: lr,
        };
        self.log.push(entry);
        Some(entry)
    }

    fn next_masked(&mut self, seqs: &[Vec<u32>]) -> Result<MaskedBatch> {
        let batch = TokenBatch::from_sequences(seqs)?;
        apply_masking_with(&batch, &self.config.masking, self.student.config().vocab_size, &mut self.rng)
    }
}

#[derive(Debug, Clone)]
pub struct DistillReport {
    pub student: EncoderModel,
    /// Loss of the very first micro-batch.
    pub first_step: Option<LossBreakdown>,
    /// Mean micro-batch loss per epoch.
    pub epochs: Vec<LossBreakdown>,
    pub log: Vec<StepLog>,
}

/// Distills `student` from `teacher` on tokenized `corpus`.
///
/// Each epoch visits the corpus in a fresh seeded order; a partially filled
/// accumulation window is applied at the end of every epoch.
pub fn distill_run(
    teacher: &EncoderModel,
    student: EncoderModel,
    corpus: &[Vec<u32>],
    config: &DistillConfig,
) -> Result<DistillReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("distillation corpus is empty"));
    }
    let per_epoch = corpus.len().div_ceil(config.micro_batch);
    let total_updates = config.epochs * per_epoch.div_ceil(config.accumulation_steps);
    let schedule = config.lr_decay.schedule(total_updates);
    let mut distiller = Distiller::new(teacher, student, config.clone())?.with_schedule(schedule);
    let mut first_step = None;
    let mut epochs = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut losses = Vec::with_capacity(per_epoch);
        for idx in shuffled_batches(corpus.len(), config.micro_batch, &mut distiller.rng) {
            let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| corpus[i].clone()).collect();
            let batch = distiller.next_masked(&seqs)?;
            let loss = distiller.distill_step(&batch)?;
            first_step.get_or_insert(loss);
            losses.push(loss);
        }
        distiller.flush();
        epochs.extend(LossBreakdown::mean(&losses));
    }
    let log = distiller.log.clone();
    Ok(DistillReport {
        student: distiller.into_student(),
        first_step,
        epochs,
        log,
    })
}
