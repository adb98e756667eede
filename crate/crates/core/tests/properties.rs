//! Invariants checked over generated inputs.

use distillforge::autodiff::{softmax_with_temperature, Tape, Tensor};
use distillforge::corpus::{merge_sequences, shuffle_records, split_shards, truncate_keep_first, truncate_keep_last, Document, MergePolicy, LINE_JOINER};
use distillforge::distill::{apply_masking, cosine_alignment_loss, mean_entropy, MaskPolicy, IGNORE_INDEX};
use distillforge::finetune::{accuracy, micro_f1};
use distillforge::model::{load_checkpoint, save_checkpoint, EncoderConfig, EncoderModel, TokenBatch};
use distillforge::tokenizer::{is_special, normalize, Tokenizer, BOS_ID, MASK_ID};
use proptest::prelude::*;

fn logits(rows: usize, k: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-8.0f32..8.0, rows * k)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in logits(3, 6), t in 0.1f32..10.0) {
        let p = softmax_with_temperature(&Tensor::new(vec![3, 6], v).unwrap(), t).unwrap();
        for row in p.data().chunks(6) {
            prop_assert!(row.iter().all(|x| *x >= 0.0 && *x <= 1.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn entropy_grows_with_temperature(v in prop::collection::vec(-6.0f64..6.0, 12), t in 0.2f64..5.0, dt in 0.01f64..5.0) {
        prop_assert!(mean_entropy(&v, 4, t + dt) >= mean_entropy(&v, 4, t) - 1e-12);
        prop_assert!(mean_entropy(&v, 4, t + dt) <= 4f64.ln() + 1e-12);
    }

    #[test]
    fn cosine_loss_ignores_positive_scale(
        t in prop::collection::vec(-2.0f64..2.0, 12),
        s in prop::collection::vec(0.1f64..2.0, 12),
        scale in 0.01f64..100.0,
    ) {
        let mask = [true, true, false];
        let loss = |factor: f64| {
            let mut tape = Tape::<f64>::new();
            let tv = tape.constant_values(&[3, 4], t.clone()).unwrap();
            let sv = tape.constant_values(&[3, 4], s.iter().map(|x| x * factor).collect()).unwrap();
            let l = cosine_alignment_loss(&mut tape, tv, sv, &mask).unwrap();
            tape.scalar(l)
        };
        let (a, b) = (loss(1.0), loss(scale));
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((0.0..=2.0 + 1e-12).contains(&a));
    }

    #[test]
    fn shuffle_keeps_multiset_and_is_seeded(mut v in prop::collection::vec(0u32..50, 0..60), seed in any::<u64>()) {
        let mut a = v.clone();
        let mut b = v.clone();
        shuffle_records(&mut a, seed);
        shuffle_records(&mut b, seed);
        prop_assert_eq!(&a, &b);
        a.sort();
        v.sort();
        prop_assert_eq!(a, v);
    }

    #[test]
    fn shards_reassemble_in_order(v in prop::collection::vec(any::<u16>(), 1..80), n in 1usize..10) {
        prop_assume!(n <= v.len());
        let shards = split_shards(&v, n).unwrap();
        prop_assert_eq!(shards.len(), n);
        prop_assert_eq!(shards.concat(), v);
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn truncation_bounds_length_and_is_idempotent(body in prop::collection::vec(5u32..100, 0..40), max_len in 2usize..20) {
        let mut ids = vec![BOS_ID];
        ids.extend(&body);
        ids.push(2);
        let last = truncate_keep_last(&ids, max_len).unwrap();
        let first = truncate_keep_first(&ids, max_len).unwrap();
        for t in [&last, &first] {
            prop_assert!(t.len() <= max_len);
            prop_assert_eq!(t[0], BOS_ID);
        }
        prop_assert_eq!(truncate_keep_last(&last, max_len).unwrap(), last.clone());
        prop_assert_eq!(truncate_keep_first(&first, max_len).unwrap(), first.clone());
        prop_assert!(ids.ends_with(&last[1..]));
        prop_assert_eq!(*first.last().unwrap(), 2);
    }

    #[test]
    fn merging_conserves_lines_within_documents(
        lens in prop::collection::vec(1usize..8, 1..12),
        p in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let docs: Vec<Document> = lens
            .iter()
            .enumerate()
            .map(|(d, &n)| Document { doc_id: d, lines: (0..n).map(|i| format!("d{d}l{i}")).collect() })
            .collect();
        let records = merge_sequences(&docs, MergePolicy::new(p, seed).unwrap());
        let total: usize = lens.iter().sum();
        prop_assert_eq!(records.iter().map(|r| r.merged_from).sum::<usize>(), total);
        prop_assert!(records.len() >= docs.len() && records.len() <= total);
        for d in &docs {
            let rebuilt: Vec<&str> = records.iter().filter(|r| r.source_doc == d.doc_id).map(|r| r.text.as_str()).collect();
            prop_assert_eq!(rebuilt.join(LINE_JOINER), d.lines.join(LINE_JOINER));
        }
    }

    #[test]
    fn tokenizer_round_trips_training_text(lines in prop::collection::vec("[a-e ]{0,10}[a-e][a-e ]{0,10}", 1..20), extra in 0usize..40) {
        let tok = Tokenizer::train(&lines, 20 + extra).unwrap();
        for l in &lines {
            let ids = tok.encode(l);
            prop_assert_eq!(tok.decode(&ids).unwrap(), normalize(l));
        }
    }

    #[test]
    fn tokenizer_never_panics_on_arbitrary_text(text in "\\PC{0,40}") {
        let tok = Tokenizer::train(&["abc de f"], 20).unwrap();
        let ids = tok.encode(&text);
        prop_assert!(ids.iter().all(|&id| (id as usize) < tok.vocab_size()));
        prop_assert!(tok.decode(&ids).is_ok());
    }

    #[test]
    fn masking_labels_only_selected_ordinary_tokens(
        seqs in prop::collection::vec(prop::collection::vec(5u32..40, 1..12), 1..5),
        seed in any::<u64>(),
    ) {
        let seqs: Vec<Vec<u32>> = seqs.into_iter().map(|s| [vec![BOS_ID], s, vec![2]].concat()).collect();
        let batch = TokenBatch::from_sequences(&seqs).unwrap();
        let masked = apply_masking(&batch, &MaskPolicy::default(), 40, seed).unwrap();
        prop_assert!(masked.num_masked() >= 1);
        for i in 0..batch.ids.len() {
            let label = masked.labels[i];
            if label == IGNORE_INDEX {
                prop_assert_eq!(masked.inputs.ids[i], batch.ids[i]);
            } else {
                prop_assert!(batch.attention_mask[i] && !is_special(batch.ids[i]));
                prop_assert_eq!(label as u32, batch.ids[i]);
                let now = masked.inputs.ids[i];
                prop_assert!(now == MASK_ID || !is_special(now));
            }
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..50)) {
        let (preds, gold): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let acc = accuracy(&preds, &gold).unwrap();
        let f1 = micro_f1(&preds, &gold).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc.value) && (0.0..=1.0).contains(&f1.value));
        let ci = acc.ci_half_width.unwrap();
        prop_assert!(ci >= 0.0 && ci <= 1.96 * 0.5 / (gold.len() as f64).sqrt() + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn truncated_checkpoints_are_rejected(cut in 0.0f64..1.0) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&EncoderModel::init_random(EncoderConfig::new(1, 2, 8, 16, 20, 8), 0).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..(cut * bytes.len() as f64) as usize]).unwrap();
        prop_assert!(load_checkpoint(&path).is_err());
    }
}
