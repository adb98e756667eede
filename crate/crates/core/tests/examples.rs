//! Every example under `examples/` runs here through its `run_example`.

macro_rules! example {
    ($name:ident) => {
        #[allow(dead_code)]
        mod $name {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", stringify!($name), ".rs"));
        }
    };
}

example!(gradient_check);
example!(tokenizer_roundtrip);
example!(corpus_merge);
example!(parameter_counts);
example!(pretrain_teacher);
example!(distill_student);
example!(pseudo_perplexity);
example!(bias_score);
example!(finetune_search);
example!(token_classification);
example!(checkpoint_roundtrip);
example!(cli_pipeline);
example!(synthetic_data);

#[test]
fn gradient_check_agrees() {
    assert!(gradient_check::run_example().unwrap() < 1e-6);
}

#[test]
fn tokenizer_roundtrip_is_lossless() {
    let s = tokenizer_roundtrip::run_example().unwrap();
    assert!(s.lossless);
    assert_eq!(s.vocab_size, 150);
    assert_eq!(s.unknown, 2);
}

#[test]
fn corpus_merge_reduces_line_count() {
    let s = corpus_merge::run_example().unwrap();
    assert_eq!((s.documents, s.lines), (60, 600));
    assert!(s.records < s.lines && s.records >= s.documents);
    assert!((s.records as f64 - s.expected).abs() < 4.0 * (60.0 * 9.0 * 0.25f64).sqrt());
    assert_eq!(s.shard_sizes.iter().sum::<usize>(), s.records);
    assert!(s.histogram_csv.starts_with("bin_start,bin_end,count\n"));
}

#[test]
fn parameter_counts_rank_by_size() {
    let rows = parameter_counts::run_example();
    assert!(rows[0].1 > rows[1].1 && rows[1].1 > rows[2].1);
}

#[test]
fn pretraining_lowers_pppl() {
    let s = pretrain_teacher::run_example().unwrap();
    assert!(s.epoch_losses.last() < s.epoch_losses.first());
    assert!(s.pppl_after < s.pppl_before / 4.0, "{} -> {}", s.pppl_before, s.pppl_after);
}

#[test]
fn distillation_lowers_loss() {
    let s = distill_student::run_example().unwrap();
    assert!(s.last_total < s.first_total);
    assert!(s.student_pppl.is_finite() && s.teacher_pppl.is_finite());
    assert!(s.updates > 0);
}

#[test]
fn untrained_model_is_near_uniform() {
    let s = pseudo_perplexity::run_example().unwrap();
    let v = s.vocab_size as f64;
    assert!(s.pppl > 0.5 * v && s.pppl < 2.0 * v, "{} vs {v}", s.pppl);
}

#[test]
fn bias_example_finds_the_skew() {
    let r = bias_score::run_example().unwrap();
    assert_eq!(r.entries.len(), 12);
    assert!(r.aggregate > 0.0);
}

#[test]
fn finetune_search_selects_best_validation() {
    let r = finetune_search::run_example().unwrap();
    let best = r.validation.iter().map(|m| m.value).fold(f64::MIN, f64::max);
    assert_eq!(r.validation[r.selected].value, best);
    assert!(best >= 0.95);
}

#[test]
fn token_classification_learns_tags() {
    assert!(token_classification::run_example().unwrap().value > 0.9);
}

#[test]
fn checkpoint_example_round_trips() {
    let s = checkpoint_roundtrip::run_example().unwrap();
    assert!(s.identical);
    assert_eq!(s.layer_map, [0, 2, 4, 6, 8, 10]);
}

#[test]
fn cli_pipeline_records_every_stage() {
    let manifest = cli_pipeline::run_example().unwrap();
    let commands: Vec<&str> = manifest.as_array().unwrap().iter().map(|e| e["command"].as_str().unwrap()).collect();
    assert_eq!(commands, ["tokenizer-train", "corpus-prep", "pretrain", "distill", "eval-pppl"]);
}

#[test]
fn synthetic_data_matches_bundled_files() {
    let dir = tempfile::tempdir().unwrap();
    synthetic_data::write_all(dir.path()).unwrap();
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let path = entry.unwrap().path();
        let bundled = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(path.file_name().unwrap());
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(bundled).unwrap(), "{}", path.display());
    }
    assert_eq!(synthetic_data::run_example().unwrap().len(), 7);
}
