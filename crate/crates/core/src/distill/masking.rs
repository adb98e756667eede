use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::tokenizer::{is_special, MASK_ID, NUM_SPECIAL};

/// Label value at positions that carry no MLM target.
pub const IGNORE_INDEX: i32 = -100;

/// Token selection for masked language modelling.
///
/// Each non-special token is selected with `mask_rate`; a selected token is
/// replaced by `<mask>` with `mask_prob`, by a random ordinary token with
/// `random_prob`, and left unchanged otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskPolicy {
    pub mask_rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            mask_rate: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!("mask_rate must lie in (0, 1), got {}", self.mask_rate)));
        }
        if self.mask_prob < 0.0 || self.random_prob < 0.0 || self.mask_prob + self.random_prob > 1.0 {
            return Err(Error::Config("mask/random replacement split must be a sub-distribution".into()));
        }
        Ok(())
    }
}

/// A batch with MLM corruption applied.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    /// Corrupted inputs.
    pub inputs: TokenBatch,
    /// Original token at selected positions, [`IGNORE_INDEX`] elsewhere.
    pub labels: Vec<i32>,
}

impl MaskedBatch {
    /// Builds a batch from explicit labels; every labelled position must be
    /// a real (non-padding) position.
    pub fn new(inputs: TokenBatch, labels: Vec<i32>) -> Result<Self> {
        if labels.len() != inputs.len() {
            return Err(Error::shape("masked batch", &[inputs.len()], &[labels.len()]));
        }
        if labels.iter().all(|&l| l == IGNORE_INDEX) {
            return Err(Error::invalid("masked batch has no labelled positions"));
        }
        if labels
            .iter()
            .zip(&inputs.attention_mask)
            .any(|(&l, &real)| l != IGNORE_INDEX && !real)
        {
            return Err(Error::invalid("label placed on a padding position"));
        }
        Ok(MaskedBatch { inputs, labels })
    }

    /// Flat row indices (`b * S + s`) that carry a label.
    pub fn masked_rows(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != IGNORE_INDEX)
            .map(|(i, _)| i)
            .collect()
    }

    /// Labels at [`MaskedBatch::masked_rows`], in the same order.
    pub fn masked_labels(&self) -> Vec<usize> {
        self.labels
            .iter()
            .filter(|&&l| l != IGNORE_INDEX)
            .map(|&l| l as usize)
            .collect()
    }

    pub fn num_masked(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }
}

pub fn apply_masking(batch: &TokenBatch, policy: &MaskPolicy, vocab_size: usize, seed: u64) -> Result<MaskedBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_masking_with(batch, policy, vocab_size, &mut rng)
}

/// Same as [`apply_masking`] drawing from a caller-owned generator.
///
/// If no token is selected, one eligible position is chosen uniformly so
/// that every batch carries at least one label.
pub fn apply_masking_with(
    batch: &TokenBatch,
    policy: &MaskPolicy,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Result<MaskedBatch> {
    policy.validate()?;
    let eligible: Vec<usize> = batch
        .ids
        .iter()
        .zip(&batch.attention_mask)
        .enumerate()
        .filter(|(_, (&id, &real))| real && !is_special(id))
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::invalid("batch contains no maskable (non-special) tokens"));
    }
    if vocab_size <= NUM_SPECIAL as usize {
        return Err(Error::invalid("vocabulary has no ordinary tokens"));
    }
    let mut selected: Vec<usize> = eligible
        .iter()
        .copied()
        .filter(|_| rng.random_bool(policy.mask_rate))
        .collect();
    if selected.is_empty() {
        selected.push(eligible[rng.random_range(0..eligible.len())]);
    }
    let mut inputs = batch.clone();
    let mut labels = vec![IGNORE_INDEX; batch.ids.len()];
    for pos in selected {
        labels[pos] = batch.ids[pos] as i32;
        let u: f64 = rng.random();
        if u < policy.mask_prob {
            inputs.ids[pos] = MASK_ID;
        } else if u < policy.mask_prob + policy.random_prob {
            inputs.ids[pos] = rng.random_range(NUM_SPECIAL..vocab_size as u32);
        }
    }
    Ok(MaskedBatch { inputs, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{BOS_ID, EOS_ID};

    fn batch(n: usize) -> TokenBatch {
        let seq: Vec<u32> = std::iter::once(BOS_ID)
            .chain((0..n).map(|i| 5 + (i % 50) as u32))
            .chain(std::iter::once(EOS_ID))
            .collect();
        TokenBatch::from_sequences(&[seq]).unwrap()
    }

    #[test]
    fn seed_determinism() {
        let b = batch(200);
        let p = MaskPolicy::default();
        assert_eq!(apply_masking(&b, &p, 60, 5).unwrap(), apply_masking(&b, &p, 60, 5).unwrap());
        assert_ne!(apply_masking(&b, &p, 60, 5).unwrap(), apply_masking(&b, &p, 60, 6).unwrap());
    }

    #[test]
    fn specials_are_never_labelled() {
        let b = batch(100);
        let m = apply_masking(&b, &MaskPolicy::default(), 60, 1).unwrap();
        assert_eq!(m.labels[0], IGNORE_INDEX);
        assert_eq!(*m.labels.last().unwrap(), IGNORE_INDEX);
        for row in m.masked_rows() {
            assert_eq!(m.labels[row] as u32, b.ids[row]);
        }
    }

    #[test]
    fn tiny_rate_still_labels_one_token() {
        let b = batch(30);
        let p = MaskPolicy {
            mask_rate: 1e-12,
            ..Default::default()
        };
        for seed in 0..20 {
            assert_eq!(apply_masking(&b, &p, 60, seed).unwrap().num_masked(), 1);
        }
    }

    #[test]
    fn all_special_input_is_rejected() {
        let b = TokenBatch::from_sequences(&[vec![BOS_ID, EOS_ID]]).unwrap();
        assert!(apply_masking(&b, &MaskPolicy::default(), 60, 0).is_err());
    }

    #[test]
    fn empirical_rate_is_binomial() {
        let n = 100_000;
        let b = batch(n);
        let p = MaskPolicy::default();
        let m = apply_masking(&b, &p, 60, 42).unwrap();
        let sigma = (n as f64 * p.mask_rate * (1.0 - p.mask_rate)).sqrt();
        let diff = (m.num_masked() as f64 - n as f64 * p.mask_rate).abs();
        assert!(diff < 3.0 * sigma, "{diff} vs 3σ = {}", 3.0 * sigma);
    }
}
