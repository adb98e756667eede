//! Transfer-corpus preparation: document loading, probabilistic merging of
//! neighbouring lines, shuffling, sharding, truncation and length statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{Tokenizer, BOS_ID};

/// Separator placed between lines folded into one record.
pub const LINE_JOINER: &str = " ";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: usize,
    pub lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub text: String,
    pub source_doc: usize,
    pub merged_from: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergePolicy {
    p: f64,
    pub seed: u64,
}

impl MergePolicy {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("merge probability must lie in [0, 1], got {p}")));
        }
        Ok(MergePolicy { p, seed })
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

/// Parses blank-line-delimited documents; every non-blank line is a sequence.
pub fn parse_documents(text: &str) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut current = Vec::new();
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(Document {
                    doc_id: docs.len(),
                    lines: std::mem::take(&mut current),
                });
            }
        } else {
            current.push(line.to_string());
        }
    }
    if !current.is_empty() {
        docs.push(Document {
            doc_id: docs.len(),
            lines: current,
        });
    }
    docs
}

pub fn load_documents(path: &Path) -> Result<Vec<Document>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Utf8 {
        path: path.to_path_buf(),
        offset: e.valid_up_to(),
    })?;
    Ok(parse_documents(text))
}

/// Folds each line into its predecessor with probability `p`, never across
/// documents.
///
/// Scanning left to right, after a line is appended to the open record one
/// Bernoulli(`p`) draw decides whether the document's next line joins the same
/// record. A document of `L` lines therefore yields `1 + Binomial(L - 1, 1 - p)`
/// records.
pub fn merge_sequences(docs: &[Document], policy: MergePolicy) -> Vec<SequenceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut out = Vec::new();
    for doc in docs {
        let mut lines = doc.lines.iter();
        let Some(first) = lines.next() else { continue };
        let mut record = SequenceRecord {
            text: first.clone(),
            source_doc: doc.doc_id,
            merged_from: 1,
        };
        for line in lines {
            if rng.random_bool(policy.p) {
                record.text.push_str(LINE_JOINER);
                record.text.push_str(line);
                record.merged_from += 1;
            } else {
                out.push(std::mem::replace(
                    &mut record,
                    SequenceRecord {
                        text: line.clone(),
                        source_doc: doc.doc_id,
                        merged_from: 1,
                    },
                ));
            }
        }
        out.push(record);
    }
    out
}

/// Expected record count after merging: `Σ_d (1 + (L_d - 1)(1 - p))`.
pub fn expected_merged_count(docs: &[Document], p: f64) -> f64 {
    docs.iter()
        .filter(|d| !d.lines.is_empty())
        .map(|d| 1.0 + (d.lines.len() as f64 - 1.0) * (1.0 - p))
        .sum()
}

/// Seeded Fisher-Yates permutation.
pub fn shuffle_records<T>(records: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
}

/// Contiguous, order-preserving partitions whose sizes differ by at most one
/// (earlier shards take the remainder).
pub fn split_shards<T: Clone>(records: &[T], n_shards: usize) -> Result<Vec<Vec<T>>> {
    if n_shards == 0 {
        return Err(Error::invalid("need at least one shard"));
    }
    if n_shards > records.len() {
        return Err(Error::invalid(format!(
            "cannot split {} records into {n_shards} shards",
            records.len()
        )));
    }
    let base = records.len() / n_shards;
    let extra = records.len() % n_shards;
    let mut out = Vec::with_capacity(n_shards);
    let mut start = 0;
    for i in 0..n_shards {
        let len = base + usize::from(i < extra);
        out.push(records[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

/// The final `n` records (all of them when fewer exist).
pub fn take_last_shard<T: Clone>(records: &[T], n: usize) -> Vec<T> {
    records[records.len().saturating_sub(n)..].to_vec()
}

/// Keeps `<s>` plus the final `max_len - 1` tokens of an overlong sequence.
pub fn truncate_keep_last(ids: &[u32], max_len: usize) -> Result<Vec<u32>> {
    if max_len < 2 {
        return Err(Error::invalid(format!("max_len must be at least 2, got {max_len}")));
    }
    if ids.len() <= max_len {
        return Ok(ids.to_vec());
    }
    let mut out = Vec::with_capacity(max_len);
    out.push(BOS_ID);
    out.extend_from_slice(&ids[ids.len() - (max_len - 1)..]);
    Ok(out)
}

/// Keeps the first `max_len - 1` tokens and the final one (the end marker).
pub fn truncate_keep_first(ids: &[u32], max_len: usize) -> Result<Vec<u32>> {
    if max_len < 2 {
        return Err(Error::invalid(format!("max_len must be at least 2, got {max_len}")));
    }
    if ids.len() <= max_len {
        return Ok(ids.to_vec());
    }
    let mut out = ids[..max_len - 1].to_vec();
    out.push(*ids.last().unwrap());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthHistogram {
    pub bin_width: usize,
    /// `counts[i]` covers token counts in `[i * bin_width, (i + 1) * bin_width)`.
    pub counts: Vec<usize>,
    pub total: usize,
    pub mean_length: f64,
    pub cutoff: usize,
    pub fraction_over_cutoff: f64,
}

impl LengthHistogram {
    pub fn from_lengths(lengths: &[usize], bin_width: usize, cutoff: usize) -> Result<Self> {
        if bin_width == 0 {
            return Err(Error::invalid("histogram bin width must be positive"));
        }
        let mut counts = Vec::new();
        let mut over = 0;
        for &len in lengths {
            let bin = len / bin_width;
            if bin >= counts.len() {
                counts.resize(bin + 1, 0);
            }
            counts[bin] += 1;
            over += usize::from(len > cutoff);
        }
        let total = lengths.len();
        let (mean_length, fraction_over_cutoff) = if total == 0 {
            (0.0, 0.0)
        } else {
            (
                lengths.iter().sum::<usize>() as f64 / total as f64,
                over as f64 / total as f64,
            )
        };
        Ok(LengthHistogram {
            bin_width,
            counts,
            total,
            mean_length,
            cutoff,
            fraction_over_cutoff,
        })
    }

    /// `bin_start,bin_end,count` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", i * self.bin_width, (i + 1) * self.bin_width, c);
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "sequences={} mean_tokens={:.2} fraction_over_{}={:.6}",
            self.total, self.mean_length, self.cutoff, self.fraction_over_cutoff
        )
    }
}

/// Token-count histogram of records (lengths include `<s>` and `</s>`).
pub fn length_histogram(
    records: &[SequenceRecord],
    tokenizer: &Tokenizer,
    bin_width: usize,
    cutoff: usize,
) -> Result<LengthHistogram> {
    let lengths: Vec<usize> = records.iter().map(|r| tokenizer.encode(&r.text).len()).collect();
    LengthHistogram::from_lengths(&lengths, bin_width, cutoff)
}

/// Records written one per line, in order.
pub fn write_records(path: &Path, records: &[SequenceRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.text);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Non-blank lines of a plain one-sequence-per-line file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Utf8 {
        path: path.to_path_buf(),
        offset: e.valid_up_to(),
    })?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(spec: &[usize]) -> Vec<Document> {
        spec.iter()
            .enumerate()
            .map(|(d, &n)| Document {
                doc_id: d,
                lines: (0..n).map(|i| format!("d{d}l{i}")).collect(),
            })
            .collect()
    }

    #[test]
    fn parses_blank_line_blocks() {
        let d = parse_documents("a\nb\n\nc\n");
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].lines, vec!["a", "b"]);
        assert_eq!(d[1].lines, vec!["c"]);
        assert!(parse_documents("").is_empty());
    }

    #[test]
    fn trailing_blank_lines_match_naive_split() {
        // naive oracle: split on "\n\n", drop empties
        let naive = |s: &str| -> Vec<Vec<String>> {
            s.split("\n\n")
                .map(|b| b.lines().filter(|l| !l.is_empty()).map(String::from).collect::<Vec<_>>())
                .filter(|b: &Vec<String>| !b.is_empty())
                .collect()
        };
        for text in ["a\nb\n\nc\n", "a\nb\n\nc\n\n\n\n", "x\n\ny\nz\n\n"] {
            let got: Vec<Vec<String>> = parse_documents(text).into_iter().map(|d| d.lines).collect();
            assert_eq!(got, naive(text));
        }
    }

    #[test]
    fn invalid_utf8_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        fs::write(&path, b"ok\n\xff\n").unwrap();
        match load_documents(&path) {
            Err(Error::Utf8 { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_documents(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn zero_probability_is_identity() {
        let d = docs(&[3, 1, 4]);
        let out = merge_sequences(&d, MergePolicy::new(0.0, 7).unwrap());
        let lines: Vec<&str> = d.iter().flat_map(|d| d.lines.iter().map(String::as_str)).collect();
        assert_eq!(out.iter().map(|r| r.text.as_str()).collect::<Vec<_>>(), lines);
        assert!(out.iter().all(|r| r.merged_from == 1));
    }

    #[test]
    fn unit_probability_gives_one_record_per_document() {
        let d = docs(&[3, 1, 4]);
        let out = merge_sequences(&d, MergePolicy::new(1.0, 7).unwrap());
        assert_eq!(out.len(), 3);
        assert_eq!(out[2].text, d[2].lines.join(LINE_JOINER));
        assert_eq!(out[2].merged_from, 4);
    }

    #[test]
    fn policy_rejects_out_of_range() {
        assert!(MergePolicy::new(1.5, 0).is_err());
        assert!(MergePolicy::new(-0.1, 0).is_err());
    }

    #[test]
    fn shards_reassemble() {
        let recs: Vec<u32> = (0..10).collect();
        let shards = split_shards(&recs, 2).unwrap();
        assert_eq!(shards.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 5]);
        let shards = split_shards(&recs, 3).unwrap();
        assert_eq!(shards.concat(), recs);
        assert!(split_shards(&recs, 11).is_err());
        assert!(split_shards(&recs, 0).is_err());
        assert_eq!(take_last_shard(&recs, 3), vec![7, 8, 9]);
    }

    #[test]
    fn truncation_keeps_tail() {
        let ids: Vec<u32> = (0..10).collect();
        assert_eq!(truncate_keep_last(&ids, 512).unwrap(), ids);
        let long: Vec<u32> = std::iter::once(BOS_ID).chain(10..609).collect();
        let t = truncate_keep_last(&long, 512).unwrap();
        assert_eq!(t.len(), 512);
        assert_eq!(t[0], BOS_ID);
        assert_eq!(t.last(), long.last());
        assert!(truncate_keep_last(&ids, 1).is_err());
    }

    #[test]
    fn histogram_edges() {
        let h = LengthHistogram::from_lengths(&[], 40, 512).unwrap();
        assert_eq!(h.total, 0);
        assert!(h.counts.is_empty());
        let h = LengthHistogram::from_lengths(&[10], 40, 512).unwrap();
        assert_eq!(h.counts[0], 1);
        let h = LengthHistogram::from_lengths(&[10, 600, 45], 40, 512).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 3);
        assert!((h.fraction_over_cutoff - 1.0 / 3.0).abs() < 1e-12);
        assert!(h.to_csv().starts_with("bin_start,bin_end,count\n0,40,1\n40,80,1\n"));
    }
}
