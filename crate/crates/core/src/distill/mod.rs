//! Student distillation: masking, the three losses and the training loop.

mod losses;
mod masking;
mod trainer;

pub use losses::{cosine_alignment_loss, distillation_ce_loss, mean_entropy, mlm_loss};
pub use masking::{apply_masking, apply_masking_with, MaskPolicy, MaskedBatch, IGNORE_INDEX};
pub use trainer::{
    combined_loss, distill_run, teacher_targets, DistillConfig, DistillReport, Distiller, LossBreakdown, LossVars,
    StepLog, TeacherTargets,
};
