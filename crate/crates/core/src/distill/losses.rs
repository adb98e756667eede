use crate::autodiff::{Element, Tape, Var};
use crate::error::{Error, Result};

use super::masking::IGNORE_INDEX;

/// Soft-target cross-entropy `-Σ_i p(t_i, T) log p(s_i, T)`, averaged over
/// rows of `[N, K]` logits. Gradients flow only into the student side unless
/// the teacher logits are themselves trainable.
pub fn distillation_ce_loss<F: Element>(
    tape: &mut Tape<F>,
    teacher_logits: Var,
    student_logits: Var,
    temperature: f64,
) -> Result<Var> {
    if tape.shape(teacher_logits) != tape.shape(student_logits) {
        return Err(Error::shape(
            "distillation_ce_loss",
            tape.shape(teacher_logits),
            tape.shape(student_logits),
        ));
    }
    let k = *tape.shape(student_logits).last().unwrap_or(&0);
    let rows = tape.value(student_logits).len().checked_div(k).unwrap_or(0);
    if rows == 0 {
        return Err(Error::invalid("distillation loss over zero positions"));
    }
    let p_teacher = tape.softmax(teacher_logits, temperature)?;
    let log_student = tape.log_softmax(student_logits, temperature)?;
    let weighted = tape.mul(p_teacher, log_student)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / rows as f64))
}

/// Mean negative log-likelihood of the labelled positions of `logits[N, V]`
/// (any leading shape flattening to `N` rows). Unlabelled rows carry
/// [`IGNORE_INDEX`].
pub fn mlm_loss<F: Element>(tape: &mut Tape<F>, logits: Var, labels: &[i32]) -> Result<Var> {
    let v = *tape.shape(logits).last().unwrap_or(&0);
    if v == 0 || tape.value(logits).len() != labels.len() * v {
        return Err(Error::shape("mlm_loss", tape.shape(logits), &[labels.len()]));
    }
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != IGNORE_INDEX).collect();
    if rows.is_empty() {
        return Err(Error::invalid("mlm loss needs at least one labelled position"));
    }
    let targets: Vec<usize> = rows
        .iter()
        .map(|&i| usize::try_from(labels[i]).map_err(|_| Error::invalid(format!("invalid label {}", labels[i]))))
        .collect::<Result<_>>()?;
    let picked_rows = if rows.len() == labels.len() {
        logits
    } else {
        tape.gather_rows(logits, &rows)?
    };
    let log_probs = tape.log_softmax(picked_rows, 1.0)?;
    let true_lp = tape.pick(log_probs, &targets)?;
    let mean = tape.mean(true_lp)?;
    Ok(tape.scale(mean, -1.0))
}

/// Mean over non-padding positions of `1 - cos(teacher_h, student_h)`.
pub fn cosine_alignment_loss<F: Element>(
    tape: &mut Tape<F>,
    teacher_hidden: Var,
    student_hidden: Var,
    attention_mask: &[bool],
) -> Result<Var> {
    let (ts, ss) = (tape.shape(teacher_hidden).to_vec(), tape.shape(student_hidden).to_vec());
    if ts != ss || ts.is_empty() {
        return Err(Error::shape("cosine_alignment_loss", &ts, &ss));
    }
    let h = *ts.last().unwrap();
    if h == 0 || tape.value(teacher_hidden).len() != attention_mask.len() * h {
        return Err(Error::shape("cosine_alignment_loss", &ts, &[attention_mask.len()]));
    }
    let rows: Vec<usize> = (0..attention_mask.len()).filter(|&i| attention_mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::invalid("cosine loss over zero positions"));
    }
    let t = tape.gather_rows(teacher_hidden, &rows)?;
    let s = tape.gather_rows(student_hidden, &rows)?;
    let cos = tape.row_cosine(t, s)?;
    let mean = tape.mean(cos)?;
    let neg = tape.scale(mean, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Shannon entropy (nats) of `softmax(logits / T)` averaged over rows.
pub fn mean_entropy(logits: &[f64], k: usize, temperature: f64) -> f64 {
    let rows = logits.len() / k;
    let mut total = 0.0;
    for row in logits.chunks(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| ((v - max) / temperature).exp()).collect();
        let z: f64 = e.iter().sum();
        total -= e.iter().map(|v| v / z).filter(|p| *p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    }
    total / rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(tape: &mut Tape<f64>, shape: &[usize], v: &[f64]) -> Var {
        tape.variable_values(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn ce_with_itself_is_entropy() {
        let logits = [0.3, -1.0, 2.0, 0.0, 0.5, 0.5];
        for t in [0.5, 1.0, 2.0, 7.0] {
            let mut tape = Tape::<f64>::new();
            let a = var(&mut tape, &[2, 3], &logits);
            let b = var(&mut tape, &[2, 3], &logits);
            let l = distillation_ce_loss(&mut tape, a, b, t).unwrap();
            assert!((tape.scalar(l) - mean_entropy(&logits, 3, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_approaches_log_k_at_high_temperature() {
        let mut tape = Tape::<f64>::new();
        let a = var(&mut tape, &[1, 4], &[3.0, -2.0, 0.0, 1.0]);
        let b = var(&mut tape, &[1, 4], &[-1.0, 5.0, 0.5, 0.0]);
        let l = distillation_ce_loss(&mut tape, a, b, 1e6).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn ce_rejects_bad_inputs() {
        let mut tape = Tape::<f64>::new();
        let a = var(&mut tape, &[1, 3], &[0.0; 3]);
        let b = var(&mut tape, &[1, 4], &[0.0; 4]);
        assert!(distillation_ce_loss(&mut tape, a, b, 1.0).is_err());
        let c = var(&mut tape, &[1, 3], &[0.0; 3]);
        assert!(distillation_ce_loss(&mut tape, a, c, 0.0).is_err());
    }

    #[test]
    fn mlm_uniform_is_log_v_and_one_hot_is_zero() {
        let mut tape = Tape::<f64>::new();
        let u = var(&mut tape, &[2, 5], &[0.0; 10]);
        let l = mlm_loss(&mut tape, u, &[3, IGNORE_INDEX]).unwrap();
        assert!((tape.scalar(l) - 5f64.ln()).abs() < 1e-12);
        let mut peaked = vec![0.0; 5];
        peaked[2] = 60.0;
        let p = var(&mut tape, &[1, 5], &peaked);
        let l = mlm_loss(&mut tape, p, &[2]).unwrap();
        assert!(tape.scalar(l) < 1e-20);
        assert!(mlm_loss(&mut tape, u, &[IGNORE_INDEX, IGNORE_INDEX]).is_err());
    }

    #[test]
    fn mlm_matches_hand_computed_toy() {
        // 2×3 logits, labels [2, 0]; independent per-row log-softmax
        let logits = [1.0, 2.0, 3.0, 0.5, -0.5, 0.0];
        let row = |r: &[f64], y: usize| {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            -(r[y].exp() / z).ln()
        };
        let want = (row(&logits[0..3], 2) + row(&logits[3..6], 0)) / 2.0;
        let mut tape = Tape::<f64>::new();
        let x = var(&mut tape, &[2, 3], &logits);
        let l = mlm_loss(&mut tape, x, &[2, 0]).unwrap();
        assert!((tape.scalar(l) - want).abs() < 1e-12);
    }

    #[test]
    fn cosine_edge_cases() {
        let mut tape = Tape::<f64>::new();
        let t = var(&mut tape, &[1, 2, 2], &[1.0, 2.0, 0.0, 1.0]);
        let same = var(&mut tape, &[1, 2, 2], &[1.0, 2.0, 0.0, 1.0]);
        let double = var(&mut tape, &[1, 2, 2], &[2.0, 4.0, 0.0, 2.0]);
        let ortho = var(&mut tape, &[1, 2, 2], &[-2.0, 1.0, 1.0, 0.0]);
        let mask = [true, true];
        for (other, want) in [(same, 0.0), (double, 0.0), (ortho, 1.0)] {
            let l = cosine_alignment_loss(&mut tape, t, other, &mask).unwrap();
            assert!((tape.scalar(l) - want).abs() < 1e-12);
        }
        let wide = var(&mut tape, &[1, 2, 3], &[0.0; 6]);
        assert!(cosine_alignment_loss(&mut tape, t, wide, &mask).is_err());
    }

    #[test]
    fn cosine_ignores_padding_rows() {
        let mut tape = Tape::<f64>::new();
        let t = var(&mut tape, &[2, 2], &[1.0, 0.0, 1.0, 0.0]);
        let s = var(&mut tape, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let l = cosine_alignment_loss(&mut tape, t, s, &[true, false]).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);
    }
}
