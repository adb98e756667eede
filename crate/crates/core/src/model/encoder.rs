use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{EncoderConfig, LAYER_NORM_EPS};
use crate::autodiff::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tokenizer::PAD_ID;

pub const INIT_STD: f32 = 0.02;

/// Declares a parameter container generic over its slot type, with named
/// traversal and mapping.
macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
                $(out.push((format!("{prefix}{}", stringify!($field)), &self.$field));)*
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
                $(out.push((format!("{prefix}{}", stringify!($field)), &mut self.$field));)*
            }

            fn map_with<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field),)*
                }
            }
        }
    };
}

param_struct!(
    /// One transformer layer: self-attention, two layer norms and the
    /// feed-forward block.
    LayerParams {
        q_weight, q_bias, k_weight, k_bias, v_weight, v_bias, o_weight, o_bias,
        attn_ln_gain, attn_ln_bias,
        ff_in_weight, ff_in_bias, ff_out_weight, ff_out_bias,
        ff_ln_gain, ff_ln_bias,
    }
);

param_struct!(
    /// Token and position embeddings with their layer norm.
    EmbeddingParams { token, position, ln_gain, ln_bias }
);

param_struct!(
    /// MLM head: dense transform, GELU, layer norm, then a decoder tied to
    /// the token embedding plus its own bias.
    HeadParams { dense_weight, dense_bias, ln_gain, ln_bias, decoder_bias }
);

/// Every parameter slot of an encoder. Instantiated with [`Tensor`] for the
/// stored model and with [`Var`] for a model bound to a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub embeddings: EmbeddingParams<T>,
    pub layers: Vec<LayerParams<T>>,
    pub head: HeadParams<T>,
}

impl<T> EncoderParams<T> {
    /// `(name, slot)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.embeddings.visit("embeddings.", &mut out);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("layers.{i}."), &mut out);
        }
        self.head.visit("head.", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.embeddings.visit_mut("embeddings.", &mut out);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("layers.{i}."), &mut out);
        }
        self.head.visit_mut("head.", &mut out);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> EncoderParams<U> {
        EncoderParams {
            embeddings: self.embeddings.map_with("embeddings.", &mut f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map_with(&format!("layers.{i}."), &mut f))
                .collect(),
            head: self.head.map_with("head.", &mut f),
        }
    }
}

/// Expected shape of every named parameter for `config`, in canonical order.
pub fn parameter_shapes(config: &EncoderConfig) -> EncoderParams<Vec<usize>> {
    let (h, i, v, p) = (config.hidden, config.intermediate, config.vocab_size, config.max_positions);
    let layer = LayerParams {
        q_weight: vec![h, h],
        q_bias: vec![h],
        k_weight: vec![h, h],
        k_bias: vec![h],
        v_weight: vec![h, h],
        v_bias: vec![h],
        o_weight: vec![h, h],
        o_bias: vec![h],
        attn_ln_gain: vec![h],
        attn_ln_bias: vec![h],
        ff_in_weight: vec![h, i],
        ff_in_bias: vec![i],
        ff_out_weight: vec![i, h],
        ff_out_bias: vec![h],
        ff_ln_gain: vec![h],
        ff_ln_bias: vec![h],
    };
    EncoderParams {
        embeddings: EmbeddingParams {
            token: vec![v, h],
            position: vec![p, h],
            ln_gain: vec![h],
            ln_bias: vec![h],
        },
        layers: vec![layer; config.layers],
        head: HeadParams {
            dense_weight: vec![h, h],
            dense_bias: vec![h],
            ln_gain: vec![h],
            ln_bias: vec![h],
            decoder_bias: vec![v],
        },
    }
}

/// How a freshly allocated parameter is filled.
fn init_kind(name: &str) -> InitKind {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if leaf.contains("gain") {
        InitKind::Ones
    } else if leaf.contains("bias") {
        InitKind::Zeros
    } else {
        InitKind::Normal
    }
}

enum InitKind {
    Normal,
    Zeros,
    Ones,
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = match init_kind(name) {
        InitKind::Zeros => Tensor::zeros(shape),
        InitKind::Ones => Tensor::filled(shape, 1.0),
        InitKind::Normal => {
            let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
            let mut t = Tensor::zeros(shape);
            t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
            t
        }
    };
    t.set_requires_grad(true);
    t
}

/// Padded batch of token-id sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    /// `[batch, seq_len]`, row-major.
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
    /// False at padding positions.
    pub attention_mask: Vec<bool>,
}

impl TokenBatch {
    /// Right-pads every sequence with `<pad>` to the longest one.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seq_len == 0 {
            return Err(Error::invalid("batch of empty sequences"));
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut attention_mask = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            ids.extend_from_slice(s);
            attention_mask.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(PAD_ID, seq_len - s.len()));
            attention_mask.extend(std::iter::repeat_n(false, seq_len - s.len()));
        }
        Ok(TokenBatch {
            ids,
            batch: seqs.len(),
            seq_len,
            attention_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Values recorded by [`EncoderModel::forward`].
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Embedding output followed by every layer's output, each `[B, S, H]`.
    pub hidden_states: Vec<Var>,
    /// Attention probabilities per layer, each `[B, A, S, S]`.
    pub attentions: Vec<Var>,
}

impl EncoderOutput {
    pub fn last_hidden(&self) -> Var {
        *self.hidden_states.last().expect("at least the embedding output")
    }
}

/// BERT-like encoder without token-type embeddings or pooler.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    pub params: EncoderParams<Tensor>,
}

impl EncoderModel {
    /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init_random(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = parameter_shapes(&config).map(|name, shape| init_tensor(name, shape, &mut rng));
        Ok(EncoderModel { config, params })
    }

    pub(crate) fn from_parts(config: EncoderConfig, params: EncoderParams<Tensor>) -> Self {
        EncoderModel { config, params }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Number of allocated scalars.
    pub fn num_parameters(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in self.params.named_mut() {
            t.set_requires_grad(trainable);
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.params.named_mut() {
            t.zero_grad();
        }
    }

    /// Records every parameter on `tape`; trainable iff `trainable` and the
    /// tensor itself requires grad.
    pub fn bind<F: Element>(&self, tape: &mut Tape<F>, trainable: bool) -> EncoderParams<Var> {
        self.params.map(|_, t| if trainable { tape.input(t) } else { tape.constant(t) })
    }

    /// Adds the tape gradients of `bound` into the stored parameters.
    pub fn accumulate_grads<F: Element>(&mut self, tape: &Tape<F>, bound: &EncoderParams<Var>) -> Result<()> {
        for ((_, t), (_, v)) in self.params.named_mut().into_iter().zip(bound.named()) {
            if let Some(g) = tape.grad(*v) {
                let g: Vec<f32> = g.iter().map(|x| x.as_f32()).collect();
                t.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.ids.len() != batch.batch * batch.seq_len || batch.attention_mask.len() != batch.ids.len() {
            return Err(Error::shape(
                "token batch",
                &[batch.batch, batch.seq_len],
                &[batch.ids.len(), batch.attention_mask.len()],
            ));
        }
        if batch.seq_len > self.config.max_positions {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max positions {}",
                batch.seq_len, self.config.max_positions
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the encoder stack. `dropout_rng` enables training-mode dropout.
    pub fn forward<F: Element>(
        &self,
        tape: &mut Tape<F>,
        params: &EncoderParams<Var>,
        batch: &TokenBatch,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (b, s, h) = (batch.batch, batch.seq_len, cfg.hidden);
        let (heads, dh) = (cfg.heads, cfg.head_dim());
        let dropout = if dropout_rng.is_some() { cfg.dropout } else { 0.0 };

        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let tok = tape.embedding(params.embeddings.token, &ids)?;
        let pos = tape.embedding(params.embeddings.position, &positions)?;
        let x = tape.add(tok, pos)?;
        let x = tape.reshape(x, &[b, s, h])?;
        let x = tape.layer_norm(x, params.embeddings.ln_gain, params.embeddings.ln_bias, LAYER_NORM_EPS)?;
        let mut x = apply_dropout(tape, x, dropout, dropout_rng.as_deref_mut())?;

        let mut hidden_states = vec![x];
        let mut attentions = Vec::with_capacity(cfg.layers);
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &params.layers {
            let split = |tape: &mut Tape<F>, w: Var, bias: Var| -> Result<Var> {
                let y = tape.matmul(x, w, false)?;
                let y = tape.add_bias(y, bias)?;
                let y = tape.reshape(y, &[b, s, heads, dh])?;
                let y = tape.permute(y, &[0, 2, 1, 3])?;
                tape.reshape(y, &[b * heads, s, dh])
            };
            let q = split(tape, layer.q_weight, layer.q_bias)?;
            let k = split(tape, layer.k_weight, layer.k_bias)?;
            let v = split(tape, layer.v_weight, layer.v_bias)?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.reshape(scores, &[b, heads, s, s])?;
            let probs = tape.attention_softmax(scores, &batch.attention_mask)?;
            attentions.push(probs);
            let probs = apply_dropout(tape, probs, dropout, dropout_rng.as_deref_mut())?;
            let probs = tape.reshape(probs, &[b * heads, s, s])?;
            let ctx = tape.batch_matmul(probs, v, false)?;
            let ctx = tape.reshape(ctx, &[b, heads, s, dh])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[b, s, h])?;
            let attn = tape.matmul(ctx, layer.o_weight, false)?;
            let attn = tape.add_bias(attn, layer.o_bias)?;
            let attn = apply_dropout(tape, attn, dropout, dropout_rng.as_deref_mut())?;
            let res = tape.add(x, attn)?;
            let x1 = tape.layer_norm(res, layer.attn_ln_gain, layer.attn_ln_bias, LAYER_NORM_EPS)?;

            let ff = tape.matmul(x1, layer.ff_in_weight, false)?;
            let ff = tape.add_bias(ff, layer.ff_in_bias)?;
            let ff = tape.gelu(ff);
            let ff = tape.matmul(ff, layer.ff_out_weight, false)?;
            let ff = tape.add_bias(ff, layer.ff_out_bias)?;
            let ff = apply_dropout(tape, ff, dropout, dropout_rng.as_deref_mut())?;
            let res = tape.add(x1, ff)?;
            x = tape.layer_norm(res, layer.ff_ln_gain, layer.ff_ln_bias, LAYER_NORM_EPS)?;
            hidden_states.push(x);
        }
        Ok(EncoderOutput {
            hidden_states,
            attentions,
        })
    }

    /// Vocabulary logits for hidden rows `[..., H]`, giving `[..., V]`.
    pub fn mlm_logits<F: Element>(&self, tape: &mut Tape<F>, params: &EncoderParams<Var>, hidden: Var) -> Result<Var> {
        let y = tape.matmul(hidden, params.head.dense_weight, false)?;
        let y = tape.add_bias(y, params.head.dense_bias)?;
        let y = tape.gelu(y);
        let y = tape.layer_norm(y, params.head.ln_gain, params.head.ln_bias, LAYER_NORM_EPS)?;
        let y = tape.matmul(y, params.embeddings.token, true)?;
        tape.add_bias(y, params.head.decoder_bias)
    }

    /// Eval-mode final hidden states `[B, S, H]` as a tensor.
    pub fn encode(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, batch, None)?;
        Ok(tape.to_tensor(out.last_hidden()))
    }

    /// Eval-mode log-probabilities at the given flat `(row = b * S + s)`
    /// positions, `[rows.len(), V]`.
    pub fn log_probs_at_rows(&self, batch: &TokenBatch, rows: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, batch, None)?;
        let picked = tape.gather_rows(out.last_hidden(), rows)?;
        let logits = self.mlm_logits(&mut tape, &bound, picked)?;
        let lp = tape.log_softmax(logits, 1.0)?;
        Ok(tape.to_tensor(lp))
    }
}

fn apply_dropout<F: Element>(tape: &mut Tape<F>, x: Var, rate: f32, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate as f64;
            let scale = F::of_f64(1.0 / keep);
            let mask = (0..tape.value(x).len())
                .map(|_| if rng.random_bool(keep) { scale } else { F::zero() })
                .collect();
            tape.dropout(x, mask)
        }
        _ => Ok(x),
    }
}

/// Teacher layer copied into each student layer: `floor(k * D_t / D_s)`.
pub fn student_layer_map(teacher_layers: usize, student_layers: usize) -> Vec<usize> {
    (0..student_layers)
        .map(|k| k * teacher_layers / student_layers)
        .collect()
}

/// Builds a student that shares the teacher's embeddings and MLM head and
/// takes evenly spaced teacher layers.
///
/// Tensors whose shapes differ (e.g. a narrower feed-forward block) keep their
/// fresh random initialization.
pub fn init_student_from_teacher(teacher: &EncoderModel, student_config: EncoderConfig, seed: u64) -> Result<EncoderModel> {
    student_config.validate()?;
    let t = teacher.config();
    if student_config.hidden != t.hidden {
        return Err(Error::Config(format!(
            "student hidden size {} must equal teacher hidden size {}",
            student_config.hidden, t.hidden
        )));
    }
    if student_config.layers > t.layers {
        return Err(Error::Config(format!(
            "student has {} layers, more than the teacher's {}",
            student_config.layers, t.layers
        )));
    }
    if student_config.vocab_size != t.vocab_size || student_config.max_positions > t.max_positions {
        return Err(Error::Config(
            "student vocabulary must match and its positions must fit the teacher's".into(),
        ));
    }
    let mut student = EncoderModel::init_random(student_config, seed)?;
    let p = &teacher.params;
    student.params.embeddings = p.embeddings.clone();
    if student_config.max_positions < t.max_positions {
        let h = t.hidden;
        let rows = p.embeddings.position.data()[..student_config.max_positions * h].to_vec();
        student.params.embeddings.position =
            Tensor::new(vec![student_config.max_positions, h], rows)?.with_grad();
    }
    student.params.head = p.head.clone();
    let map = student_layer_map(t.layers, student_config.layers);
    for (k, &src) in map.iter().enumerate() {
        let mut src_named = Vec::new();
        teacher.params.layers[src].visit("", &mut src_named);
        let mut dst_named = Vec::new();
        student.params.layers[k].visit_mut("", &mut dst_named);
        for ((name, from), (_, to)) in src_named.into_iter().zip(dst_named) {
            if from.shape() == to.shape() {
                *to = from.clone();
            } else {
                log::info!(
                    "student layer {k}.{name}: shape {:?} differs from teacher {:?}, keeping random init",
                    to.shape(),
                    from.shape()
                );
            }
        }
    }
    student.set_trainable(true);
    Ok(student)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::count_parameters;

    fn toy() -> EncoderConfig {
        EncoderConfig::new(2, 2, 8, 16, 20, 12).with_dropout(0.0)
    }

    #[test]
    fn same_seed_same_model() {
        let a = EncoderModel::init_random(toy(), 3).unwrap();
        let b = EncoderModel::init_random(toy(), 3).unwrap();
        let c = EncoderModel::init_random(toy(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params.embeddings.token, c.params.embeddings.token);
    }

    #[test]
    fn allocated_count_matches_closed_form() {
        let m = EncoderModel::init_random(toy(), 0).unwrap();
        assert_eq!(m.num_parameters(), count_parameters(&toy()));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = EncoderConfig::new(1, 3, 8, 8, 10, 8);
        assert!(matches!(EncoderModel::init_random(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn forward_rejects_bad_ids_and_lengths() {
        let m = EncoderModel::init_random(toy(), 0).unwrap();
        let bad = TokenBatch::from_sequences(&[vec![1, 25, 2]]).unwrap();
        assert!(m.encode(&bad).is_err());
        let long = TokenBatch::from_sequences(&[vec![5; 13]]).unwrap();
        assert!(m.encode(&long).is_err());
        let single = TokenBatch::from_sequences(&[vec![7]]).unwrap();
        assert!(m.encode(&single).unwrap().all_finite());
    }

    #[test]
    fn layer_map_is_evenly_spaced() {
        assert_eq!(student_layer_map(12, 6), vec![0, 2, 4, 6, 8, 10]);
        assert_eq!(student_layer_map(4, 4), vec![0, 1, 2, 3]);
    }

    #[test]
    fn student_hidden_must_match() {
        let teacher = EncoderModel::init_random(toy(), 0).unwrap();
        let wrong = EncoderConfig::new(1, 2, 10, 16, 20, 12);
        assert!(init_student_from_teacher(&teacher, wrong, 1).is_err());
    }
}
