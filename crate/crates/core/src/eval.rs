//! Pseudo-perplexity and the log-probability bias score.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderModel, TokenBatch};
use crate::tokenizer::{is_special, Tokenizer, BOS_ID, EOS_ID, MASK_ID};

/// Anything that can score a vocabulary distribution at one position of a
/// (possibly masked) token sequence.
pub trait MaskedLm: Sync {
    fn vocab_size(&self) -> usize;

    fn max_positions(&self) -> usize;

    /// For each `(seqs[i], positions[i])`, the natural-log distribution over
    /// the vocabulary at that position.
    fn masked_log_probs(&self, seqs: &[Vec<u32>], positions: &[usize]) -> Result<Vec<Vec<f64>>>;
}

impl MaskedLm for EncoderModel {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_positions(&self) -> usize {
        self.config().max_positions
    }

    fn masked_log_probs(&self, seqs: &[Vec<u32>], positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        if seqs.len() != positions.len() {
            return Err(Error::shape("masked_log_probs", &[seqs.len()], &[positions.len()]));
        }
        let batch = TokenBatch::from_sequences(seqs)?;
        let rows: Vec<usize> = positions
            .iter()
            .enumerate()
            .map(|(b, &p)| {
                if p >= seqs[b].len() {
                    Err(Error::invalid(format!("position {p} outside sequence of length {}", seqs[b].len())))
                } else {
                    Ok(b * batch.seq_len + p)
                }
            })
            .collect::<Result<_>>()?;
        let lp = self.log_probs_at_rows(&batch, &rows)?;
        let v = self.config().vocab_size;
        Ok(lp.data().chunks(v).map(|r| r.iter().map(|&x| x as f64).collect()).collect())
    }
}

/// Masked copies scored per forward pass.
const PPPL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub nll: f64,
    pub predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpplResult {
    pub pppl: f64,
    pub sequences: usize,
    pub predictions: usize,
    pub per_sequence: Vec<SequenceScore>,
}

fn score_sequence<M: MaskedLm + ?Sized>(model: &M, ids: &[u32]) -> Result<SequenceScore> {
    if ids.len() > model.max_positions() {
        return Err(Error::invalid(format!(
            "sequence of {} tokens exceeds {} positions",
            ids.len(),
            model.max_positions()
        )));
    }
    let targets: Vec<usize> = (0..ids.len()).filter(|&i| !is_special(ids[i])).collect();
    let mut nll = 0.0;
    for chunk in targets.chunks(PPPL_CHUNK) {
        let seqs: Vec<Vec<u32>> = chunk
            .iter()
            .map(|&p| {
                let mut s = ids.to_vec();
                s[p] = MASK_ID;
                s
            })
            .collect();
        let lps = model.masked_log_probs(&seqs, chunk)?;
        for (&p, lp) in chunk.iter().zip(&lps) {
            nll -= lp[ids[p] as usize];
        }
    }
    Ok(SequenceScore {
        nll,
        predictions: targets.len(),
    })
}

/// Masks every non-special token in turn and scores the original token;
/// `exp` of the mean negative log-likelihood over all predictions.
pub fn pseudo_perplexity<M: MaskedLm + ?Sized>(model: &M, sequences: &[Vec<u32>]) -> Result<PpplResult> {
    if sequences.is_empty() {
        return Err(Error::invalid("pseudo-perplexity needs at least one sequence"));
    }
    let per_sequence = sequences
        .par_iter()
        .map(|s| score_sequence(model, s))
        .collect::<Result<Vec<_>>>()?;
    let predictions: usize = per_sequence.iter().map(|s| s.predictions).sum();
    if predictions == 0 {
        return Err(Error::invalid("no maskable tokens in the evaluation set"));
    }
    let nll: f64 = per_sequence.iter().map(|s| s.nll).sum();
    Ok(PpplResult {
        pppl: (nll / predictions as f64).exp(),
        sequences: sequences.len(),
        predictions,
        per_sequence,
    })
}

/// Encodes `lines` and scores them.
pub fn pseudo_perplexity_text<M: MaskedLm + ?Sized, S: AsRef<str>>(
    model: &M,
    tokenizer: &Tokenizer,
    lines: &[S],
) -> Result<PpplResult> {
    let seqs: Vec<Vec<u32>> = lines.iter().map(|l| tokenizer.encode(l.as_ref())).collect();
    pseudo_perplexity(model, &seqs)
}

pub const PROB_FLOOR: f64 = 1e-12;

const TARGET_SLOT: &str = "<mask>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Span {
    Plain,
    Target,
    Attribute,
}

/// A template sentence with one `<mask>` target slot and one or more
/// `[[...]]` attribute spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasTemplate {
    text: String,
    segments: Vec<(Span, String)>,
}

impl BiasTemplate {
    pub fn parse(line: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("template {line:?}: {msg}"));
        let mut segments = Vec::new();
        let mut rest = line;
        while !rest.is_empty() {
            let next_mask = rest.find(TARGET_SLOT);
            let next_attr = rest.find("[[");
            let stray_close = rest.find("]]");
            let cut = match (next_mask, next_attr) {
                (Some(m), Some(a)) => m.min(a),
                (Some(m), None) => m,
                (None, Some(a)) => a,
                (None, None) => rest.len(),
            };
            if stray_close.is_some_and(|c| c < cut) {
                return Err(bad("']]' without '[['"));
            }
            if cut > 0 {
                segments.push((Span::Plain, rest[..cut].to_string()));
            }
            rest = &rest[cut..];
            if let Some(after) = rest.strip_prefix(TARGET_SLOT) {
                segments.push((Span::Target, TARGET_SLOT.to_string()));
                rest = after;
            } else if let Some(after) = rest.strip_prefix("[[") {
                let end = after.find("]]").ok_or_else(|| bad("unterminated '[['"))?;
                let attr = &after[..end];
                if attr.trim().is_empty() {
                    return Err(bad("empty attribute span"));
                }
                if attr.contains("[[") || attr.contains(TARGET_SLOT) {
                    return Err(bad("nested markers"));
                }
                segments.push((Span::Attribute, attr.to_string()));
                rest = &after[end + 2..];
            }
        }
        let targets = segments.iter().filter(|(k, _)| *k == Span::Target).count();
        if targets != 1 {
            return Err(bad(&format!("expected exactly one {TARGET_SLOT} slot, found {targets}")));
        }
        if !segments.iter().any(|(k, _)| *k == Span::Attribute) {
            return Err(bad("no [[attribute]] span"));
        }
        Ok(BiasTemplate {
            text: line.trim().to_string(),
            segments,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Template with markers removed and the slot filled by `target`.
    pub fn fill(&self, target: &str) -> String {
        let joined: String = self
            .segments
            .iter()
            .map(|(k, s)| if *k == Span::Target { target } else { s.as_str() })
            .collect();
        joined.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    /// `<s> ... </s>` ids with the slot already masked, the slot position and
    /// the positions of all attribute tokens.
    pub fn encode(&self, tokenizer: &Tokenizer) -> (Vec<u32>, usize, Vec<usize>) {
        let mut ids = vec![BOS_ID];
        let mut slot = 0;
        let mut attrs = Vec::new();
        for (kind, text) in &self.segments {
            match kind {
                Span::Target => {
                    slot = ids.len();
                    ids.push(MASK_ID);
                }
                Span::Plain | Span::Attribute => {
                    let pieces = tokenizer.encode_plain(text);
                    if *kind == Span::Attribute {
                        attrs.extend(ids.len()..ids.len() + pieces.len());
                    }
                    ids.extend(pieces);
                }
            }
        }
        ids.push(EOS_ID);
        (ids, slot, attrs)
    }
}

pub fn parse_templates(text: &str) -> Result<Vec<BiasTemplate>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(BiasTemplate::parse)
        .collect()
}

/// The single vocabulary id of `target`.
pub fn single_token(tokenizer: &Tokenizer, target: &str) -> Result<u32> {
    match tokenizer.encode_plain(target).as_slice() {
        [id] => Ok(*id),
        pieces => Err(Error::invalid(format!(
            "target {target:?} is not a single token ({} pieces)",
            pieces.len()
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Association {
    /// `log p_tgt - log p_prior`.
    pub value: f64,
    /// Whether either probability fell below [`PROB_FLOOR`].
    pub clamped: bool,
}

fn clamp_log(lp: f64) -> (f64, bool) {
    let floor = PROB_FLOOR.ln();
    if lp.is_nan() || lp < floor {
        (floor, true)
    } else {
        (lp, false)
    }
}

/// Association of token `target` with the template's attributes, for a
/// template already encoded as in [`BiasTemplate::encode`].
pub fn association_ids<M: MaskedLm + ?Sized>(
    model: &M,
    ids: &[u32],
    slot: usize,
    attributes: &[usize],
    target: u32,
) -> Result<Association> {
    if target as usize >= model.vocab_size() {
        return Err(Error::invalid(format!("target id {target} out of range")));
    }
    if attributes.is_empty() {
        return Err(Error::invalid("association needs at least one attribute token"));
    }
    let mut prior = ids.to_vec();
    prior[slot] = MASK_ID;
    for &a in attributes {
        prior[a] = MASK_ID;
    }
    let mut masked = ids.to_vec();
    masked[slot] = MASK_ID;
    let lps = model.masked_log_probs(&[masked, prior], &[slot, slot])?;
    let (tgt, c1) = clamp_log(lps[0][target as usize]);
    let (pri, c2) = clamp_log(lps[1][target as usize]);
    Ok(Association {
        value: tgt - pri,
        clamped: c1 || c2,
    })
}

/// `log(p_tgt / p_prior)` for `target` in `template`.
pub fn log_prob_association<M: MaskedLm + ?Sized>(
    model: &M,
    tokenizer: &Tokenizer,
    template: &BiasTemplate,
    target: &str,
) -> Result<Association> {
    let id = single_token(tokenizer, target)?;
    let (ids, slot, attrs) = template.encode(tokenizer);
    association_ids(model, &ids, slot, &attrs, id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasEntry {
    pub template: String,
    pub assoc_t1: f64,
    pub assoc_t2: f64,
    pub score: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasScoreReport {
    pub t1: String,
    pub t2: String,
    pub entries: Vec<BiasEntry>,
    /// Mean of the per-template scores.
    pub aggregate: f64,
}

impl BiasScoreReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("template,assoc_t1,assoc_t2,score\n");
        for e in &self.entries {
            let quoted = format!("\"{}\"", e.template.replace('"', "\"\""));
            let _ = writeln!(out, "{quoted},{:.6},{:.6},{:.6}", e.assoc_t1, e.assoc_t2, e.score);
        }
        let _ = writeln!(out, "aggregate,,,{:.6}", self.aggregate);
        out
    }
}

/// Per-template `assoc(t1) - assoc(t2)` and their mean.
pub fn bias_score<M: MaskedLm + ?Sized>(
    model: &M,
    tokenizer: &Tokenizer,
    templates: &[BiasTemplate],
    t1: &str,
    t2: &str,
) -> Result<BiasScoreReport> {
    if templates.is_empty() {
        return Err(Error::invalid("bias score needs at least one template"));
    }
    let id1 = single_token(tokenizer, t1)?;
    let id2 = single_token(tokenizer, t2)?;
    let entries = templates
        .par_iter()
        .map(|t| {
            let (ids, slot, attrs) = t.encode(tokenizer);
            let a1 = association_ids(model, &ids, slot, &attrs, id1)?;
            let a2 = association_ids(model, &ids, slot, &attrs, id2)?;
            Ok(BiasEntry {
                template: t.text().to_string(),
                assoc_t1: a1.value,
                assoc_t2: a2.value,
                score: a1.value - a2.value,
                clamped: a1.clamped || a2.clamped,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = entries.iter().map(|e| e.score).sum::<f64>() / entries.len() as f64;
    Ok(BiasScoreReport {
        t1: t1.to_string(),
        t2: t2.to_string(),
        entries,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Same distribution everywhere.
    struct Uniform(usize);

    impl MaskedLm for Uniform {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn max_positions(&self) -> usize {
            64
        }
        fn masked_log_probs(&self, seqs: &[Vec<u32>], _: &[usize]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![-(self.0 as f64).ln(); self.0]; seqs.len()])
        }
    }

    /// Vocabulary of specials plus ids 5 and 6. At a masked position the
    /// model prefers 5 when the token at position 2 is visible and is 6.
    struct Table;

    impl MaskedLm for Table {
        fn vocab_size(&self) -> usize {
            7
        }
        fn max_positions(&self) -> usize {
            16
        }
        fn masked_log_probs(&self, seqs: &[Vec<u32>], _: &[usize]) -> Result<Vec<Vec<f64>>> {
            Ok(seqs
                .iter()
                .map(|s| {
                    let p5 = if s.get(2) == Some(&6) { 0.9 } else { 0.5 };
                    let mut lp = vec![f64::NEG_INFINITY; 7];
                    lp[5] = f64::ln(p5);
                    lp[6] = f64::ln(1.0 - p5);
                    lp
                })
                .collect())
        }
    }

    #[test]
    fn uniform_model_has_pppl_v() {
        let seqs = vec![vec![1, 5, 6, 7, 2], vec![1, 9, 2]];
        let r = pseudo_perplexity(&Uniform(50), &seqs).unwrap();
        assert!((r.pppl - 50.0).abs() / 50.0 < 1e-12);
        assert_eq!(r.predictions, 4);
        assert!(pseudo_perplexity(&Uniform(50), &[]).is_err());
    }

    #[test]
    fn pppl_ignores_sequence_order() {
        let seqs = vec![vec![1, 5, 6, 2], vec![1, 6, 6, 6, 2], vec![1, 5, 2]];
        let mut rev = seqs.clone();
        rev.reverse();
        let a = pseudo_perplexity(&Table, &seqs).unwrap().pppl;
        let b = pseudo_perplexity(&Table, &rev).unwrap().pppl;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn template_parsing() {
        let t = BiasTemplate::parse("<mask> is een [[verpleger]] .").unwrap();
        assert_eq!(t.fill("zij"), "zij is een verpleger .");
        assert!(BiasTemplate::parse("geen slot [[x]]").is_err());
        assert!(BiasTemplate::parse("<mask> en <mask> [[x]]").is_err());
        assert!(BiasTemplate::parse("<mask> zonder attribuut").is_err());
        assert!(BiasTemplate::parse("<mask> [[open").is_err());
        assert!(BiasTemplate::parse("<mask> dicht]] [[x]]").is_err());
    }

    #[test]
    fn association_matches_table() {
        // ids: <s> <mask> 6 </s>; attribute at position 2
        let ids = vec![1, 4, 6, 2];
        let a5 = association_ids(&Table, &ids, 1, &[2], 5).unwrap();
        let a6 = association_ids(&Table, &ids, 1, &[2], 6).unwrap();
        assert!((a5.value - (0.9f64 / 0.5).ln()).abs() < 1e-12);
        assert!((a6.value - (0.1f64 / 0.5).ln()).abs() < 1e-12);
        assert!(!a5.clamped);
        let zero = association_ids(&Table, &ids, 1, &[2], 3).unwrap();
        assert!(zero.clamped && zero.value.is_finite());
    }

    #[test]
    fn attribute_blind_model_has_zero_association() {
        let ids = vec![1, 4, 6, 2];
        let a = association_ids(&Uniform(7), &ids, 1, &[2], 5).unwrap();
        assert_eq!(a.value, 0.0);
    }
}
