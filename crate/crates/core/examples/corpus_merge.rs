// Merge consecutive document lines with probability p, shuffle, shard and
// histogram the resulting sequence lengths.

use distillforge::corpus::{
    expected_merged_count, length_histogram, load_documents, merge_sequences, shuffle_records, split_shards,
    MergePolicy,
};
use distillforge::tokenizer::Tokenizer;

pub struct MergeSummary {
    pub documents: usize,
    pub lines: usize,
    pub records: usize,
    pub expected: f64,
    pub shard_sizes: Vec<usize>,
    pub histogram_csv: String,
}

pub fn run_example() -> Result<MergeSummary, Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/grammar_docs.txt");
    let docs = load_documents(std::path::Path::new(path))?;
    let lines: usize = docs.iter().map(|d| d.lines.len()).sum();

    let mut records = merge_sequences(&docs, MergePolicy::new(0.5, 1)?);
    shuffle_records(&mut records, 2);
    let shards = split_shards(&records, 4)?;

    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let tok = Tokenizer::train(&texts, 120)?;
    let histogram = length_histogram(&records, &tok, 16, 128)?;
    Ok(MergeSummary {
        documents: docs.len(),
        lines,
        records: records.len(),
        expected: expected_merged_count(&docs, 0.5),
        shard_sizes: shards.iter().map(Vec::len).collect(),
        histogram_csv: histogram.to_csv(),
    })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = run_example()?;
    println!(
        "{} documents, {} lines -> {} sequences (expected {:.0}); shards {:?}",
        s.documents, s.lines, s.records, s.expected, s.shard_sizes
    );
    print!("{}", s.histogram_csv);
    Ok(())
}
