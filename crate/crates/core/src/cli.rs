//! The `distillforge` command line.
//!
//! Every subcommand writes into a run directory (`--out`, default `run`):
//!
//! ```text
//! config.json      effective configuration of the latest invocation
//! manifest.json    one entry per invocation: command, config hash, seeds, input/output digests
//! tokenizer/       vocab.txt, merges.txt
//! data/            prepared corpus
//! checkpoints/     teacher.ckpt, student.ckpt
//! logs/            JSON-lines training logs
//! reports/         metrics and statistics
//! ```

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    length_histogram, load_documents, merge_sequences, read_lines, shuffle_records, split_shards, take_last_shard,
    truncate_keep_first, MergePolicy, SequenceRecord,
};
use crate::distill::{distill_run, DistillConfig};
use crate::error::{Error, Result};
use crate::eval::{bias_score, parse_templates, pseudo_perplexity};
use crate::finetune::{
    parse_conll, parse_sequence_tsv, random_search, sample_hyperparameters, TaskKind, TaskSpec, DEFAULT_SAMPLES,
};
use crate::model::{
    count_parameters, init_student_from_teacher, load_checkpoint, reference_params_millions, save_checkpoint,
    EncoderConfig, EncoderModel,
};
use crate::pretrain::{pretrain_mlm, PretrainConfig};
use crate::synth::TAGS;
use crate::tokenizer::Tokenizer;

pub const THREADS_ENV: &str = "DISTILLFORGE_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub vocab_size: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection { vocab_size: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub merge_p: f64,
    pub shuffle: bool,
    pub shards: usize,
    /// Longest training sequence in tokens, specials included.
    pub max_len: usize,
    pub bin_width: usize,
    pub cutoff: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            merge_p: 0.5,
            shuffle: true,
            shards: 1,
            max_len: 64,
            bin_width: 8,
            cutoff: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `vocab_size` is replaced by the tokenizer's size when training.
    pub teacher: EncoderConfig,
    pub student: EncoderConfig,
    /// Copy embeddings, head and evenly spaced layers from the teacher.
    pub student_from_teacher: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            teacher: EncoderConfig::new(4, 4, 64, 128, 1000, 64).with_dropout(0.0),
            student: EncoderConfig::new(2, 4, 64, 128, 1000, 64).with_dropout(0.0),
            student_from_teacher: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub task: TaskSpec,
    pub samples: usize,
    /// Tag names for token tasks; index 0 is the outside tag.
    pub tags: Vec<String>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            task: TaskSpec::sequence(2),
            samples: DEFAULT_SAMPLES,
            tags: TAGS.iter().map(|t| t.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub t1: String,
    pub t2: String,
    /// Score only the final `last_shard` sequences.
    pub last_shard: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            t1: "hij".into(),
            t2: "zij".into(),
            last_shard: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub tokenizer: TokenizerSection,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub distill: DistillConfig,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Uses `seed` for every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.distill.seed = seed;
        self
    }
}

#[derive(Debug, Parser)]
#[command(name = "distillforge", version, about = "Distil BERT-like masked language models at desk scale")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic stage; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    RobbertBase,
    Distilbert,
    Bort,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a BPE vocabulary from a text file.
    TokenizerTrain {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Merge, shuffle and shard a document file into training sequences.
    CorpusPrep {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        merge_p: Option<f64>,
        #[arg(long)]
        no_shuffle: bool,
        #[arg(long)]
        shards: Option<usize>,
        /// Tokenizer used for the length histogram.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
    /// Train a teacher with the MLM objective.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Distil a student from a teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Random hyperparameter search on a labelled task.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Pseudo-perplexity of a checkpoint on a text file.
    EvalPppl {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        last_shard: Option<usize>,
    },
    /// Log-probability bias score over a template file.
    EvalBias {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        t1: Option<String>,
        #[arg(long)]
        t2: Option<String>,
    },
    /// Parameter count of the configured (or a preset) architecture.
    Params {
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Sequence-length histogram of a text file.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        bin_width: Option<usize>,
        #[arg(long)]
        cutoff: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TokenizerTrain { .. } => "tokenizer-train",
            Command::CorpusPrep { .. } => "corpus-prep",
            Command::Pretrain { .. } => "pretrain",
            Command::Distill { .. } => "distill",
            Command::Finetune { .. } => "finetune",
            Command::EvalPppl { .. } => "eval-pppl",
            Command::EvalBias { .. } => "eval-bias",
            Command::Params { .. } => "params",
            Command::Stats { .. } => "stats",
        }
    }
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => 3,
        Error::Config(_) => 4,
        Error::CheckpointVersion { .. }
        | Error::CheckpointFormat(_)
        | Error::CheckpointTruncated { .. }
        | Error::CheckpointShape { .. } => 5,
        Error::Data(_) | Error::Utf8 { .. } => 6,
        Error::InvalidArgument(_) | Error::Shape { .. } | Error::Json(_) => 1,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

/// Artifacts of one invocation.
struct Run {
    dir: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(dir: &Path) -> Self {
        Run {
            dir: dir.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> PathBuf {
        self.inputs.push(path.to_path_buf());
        path.to_path_buf()
    }

    fn path(&self, sub: &str, name: &str) -> Result<PathBuf> {
        let dir = self.dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir.join(name))
    }

    fn write(&mut self, sub: &str, name: &str, contents: &[u8]) -> Result<PathBuf> {
        let path = self.path(sub, name)?;
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn wrote(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }
}

fn tokenizer_paths(path: &Path) -> (PathBuf, PathBuf) {
    let dir = if path.join("tokenizer").is_dir() {
        path.join("tokenizer")
    } else {
        path.to_path_buf()
    };
    (dir.join("vocab.txt"), dir.join("merges.txt"))
}

fn load_tokenizer(run: &mut Run, path: &Path) -> Result<Tokenizer> {
    let (v, m) = tokenizer_paths(path);
    run.input(&v);
    run.input(&m);
    Tokenizer::load(&v, &m)
}

fn encode_lines(tokenizer: &Tokenizer, lines: &[String], max_len: usize) -> Result<Vec<Vec<u32>>> {
    lines
        .iter()
        .map(|l| truncate_keep_first(&tokenizer.encode(l), max_len))
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn json_line<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

fn execute(cli: &Cli, config: &RunConfig, run: &mut Run) -> Result<String> {
    match &cli.command {
        Command::TokenizerTrain { input, vocab_size } => {
            let lines = read_lines(&run.input(input))?;
            let size = vocab_size.unwrap_or(config.tokenizer.vocab_size);
            let tokenizer = Tokenizer::train(&lines, size)?;
            let v = run.path("tokenizer", "vocab.txt")?;
            let m = run.path("tokenizer", "merges.txt")?;
            tokenizer.save(&v, &m)?;
            run.wrote(v);
            run.wrote(m);
            Ok(format!("trained tokenizer with {} tokens", tokenizer.vocab_size()))
        }
        Command::CorpusPrep {
            input,
            merge_p,
            no_shuffle,
            shards,
            tokenizer,
        } => {
            let docs = load_documents(&run.input(input))?;
            let p = merge_p.unwrap_or(config.corpus.merge_p);
            let mut records = merge_sequences(&docs, MergePolicy::new(p, config.seed)?);
            if config.corpus.shuffle && !no_shuffle {
                shuffle_records(&mut records, config.seed);
            }
            let n_shards = shards.unwrap_or(config.corpus.shards);
            let parts = split_shards(&records, n_shards)?;
            let as_text = |rs: &[SequenceRecord]| rs.iter().map(|r| format!("{}\n", r.text)).collect::<String>();
            run.write("data", "sequences.txt", as_text(&records).as_bytes())?;
            if n_shards > 1 {
                for (i, part) in parts.iter().enumerate() {
                    run.write("data", &format!("shard-{i:03}.txt"), as_text(part).as_bytes())?;
                }
            }
            run.write("data", "records.jsonl", json_line(&records)?.as_bytes())?;
            let mut summary = format!("{} documents -> {} sequences", docs.len(), records.len());
            if let Some(tok) = tokenizer {
                let tok = load_tokenizer(run, tok)?;
                let hist = length_histogram(&records, &tok, config.corpus.bin_width, config.corpus.cutoff)?;
                run.write("reports", "length_histogram.csv", hist.to_csv().as_bytes())?;
                summary = format!("{summary}; {}", hist.summary());
            }
            Ok(summary)
        }
        Command::Pretrain { data, tokenizer, epochs } => {
            let tok = load_tokenizer(run, tokenizer)?;
            let mut cfg = config.model.teacher;
            cfg.vocab_size = tok.vocab_size();
            let max_len = config.corpus.max_len.min(cfg.max_positions);
            let corpus = encode_lines(&tok, &read_lines(&run.input(data))?, max_len)?;
            let mut pcfg = config.pretrain.clone();
            if let Some(e) = epochs {
                pcfg.epochs = *e;
            }
            let model = EncoderModel::init_random(cfg, config.seed)?;
            let report = pretrain_mlm(model, &corpus, &pcfg)?;
            let log: Vec<serde_json::Value> = report
                .epoch_losses
                .iter()
                .enumerate()
                .map(|(i, l)| serde_json::json!({"epoch": i + 1, "l_mlm": l}))
                .collect();
            run.write("logs", "pretrain.jsonl", json_line(&log)?.as_bytes())?;
            let path = run.path("checkpoints", "teacher.ckpt")?;
            save_checkpoint(&report.model, &path)?;
            run.wrote(path.clone());
            Ok(format!(
                "teacher {} parameters, final MLM loss {:.4}, saved {}",
                report.model.num_parameters(),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                path.display()
            ))
        }
        Command::Distill {
            teacher,
            data,
            tokenizer,
            epochs,
        } => {
            let tok = load_tokenizer(run, tokenizer)?;
            let teacher = load_checkpoint(&run.input(teacher))?;
            if teacher.config().vocab_size != tok.vocab_size() {
                return Err(Error::Config(format!(
                    "teacher vocabulary {} does not match tokenizer vocabulary {}",
                    teacher.config().vocab_size,
                    tok.vocab_size()
                )));
            }
            let mut scfg = config.model.student;
            scfg.vocab_size = tok.vocab_size();
            scfg.max_positions = scfg.max_positions.min(teacher.config().max_positions);
            let student = if config.model.student_from_teacher {
                init_student_from_teacher(&teacher, scfg, config.seed)?
            } else {
                EncoderModel::init_random(scfg, config.seed)?
            };
            let max_len = config.corpus.max_len.min(scfg.max_positions);
            let corpus = encode_lines(&tok, &read_lines(&run.input(data))?, max_len)?;
            let mut dcfg = config.distill.clone();
            if let Some(e) = epochs {
                dcfg.epochs = *e;
            }
            let report = distill_run(&teacher, student, &corpus, &dcfg)?;
            run.write("logs", "distill.jsonl", json_line(&report.log)?.as_bytes())?;
            run.write("reports", "distill_epochs.json", serde_json::to_string_pretty(&report.epochs)?.as_bytes())?;
            let path = run.path("checkpoints", "student.ckpt")?;
            save_checkpoint(&report.student, &path)?;
            run.wrote(path.clone());
            let first = report.first_step.map(|l| l.total).unwrap_or(f64::NAN);
            let last = report.epochs.last().map(|l| l.total).unwrap_or(f64::NAN);
            Ok(format!(
                "student {} parameters, total loss {first:.4} -> {last:.4}, saved {}",
                report.student.num_parameters(),
                path.display()
            ))
        }
        Command::Finetune {
            model,
            tokenizer,
            train,
            valid,
            test,
        } => {
            let tok = load_tokenizer(run, tokenizer)?;
            let encoder = load_checkpoint(&run.input(model))?;
            let spec = config.finetune.task;
            let parse = |path: &Path| -> Result<_> {
                let text = read_text(path)?;
                match spec.kind {
                    TaskKind::SequenceClassification => parse_sequence_tsv(&text, &tok, spec.num_labels),
                    TaskKind::TokenClassification => {
                        if config.finetune.tags.len() != spec.num_labels {
                            return Err(Error::Config(format!(
                                "{} tag names for {} labels",
                                config.finetune.tags.len(),
                                spec.num_labels
                            )));
                        }
                        parse_conll(&text, &tok, &config.finetune.tags)
                    }
                }
            };
            let train = parse(&run.input(train))?;
            let valid = parse(&run.input(valid))?;
            let samples = sample_hyperparameters(config.finetune.samples, config.seed)?;
            let outcome = random_search(&encoder, spec, &train, &valid, samples, config.seed)?;
            let test = parse(&run.input(test))?;
            let (result, _) = outcome.evaluate_test(&test)?;
            run.write("reports", "finetune.json", serde_json::to_string_pretty(&result)?.as_bytes())?;
            let ci = result.test.ci_half_width.map(|c| format!(" ± {c:.4}")).unwrap_or_default();
            Ok(format!(
                "selected sample {} (validation {:.4}); test {:?} {:.4}{ci}",
                result.selected, result.validation[result.selected].value, result.test.metric, result.test.value
            ))
        }
        Command::EvalPppl {
            model,
            tokenizer,
            data,
            last_shard,
        } => {
            let tok = load_tokenizer(run, tokenizer)?;
            let model = load_checkpoint(&run.input(model))?;
            let mut lines = read_lines(&run.input(data))?;
            if let Some(n) = last_shard.or(config.eval.last_shard) {
                lines = take_last_shard(&lines, n);
            }
            let seqs = encode_lines(&tok, &lines, model.config().max_positions)?;
            let result = pseudo_perplexity(&model, &seqs)?;
            run.write("reports", "pppl.json", serde_json::to_string_pretty(&result)?.as_bytes())?;
            Ok(format!(
                "PPPL {:.4} over {} sequences ({} predictions)",
                result.pppl, result.sequences, result.predictions
            ))
        }
        Command::EvalBias {
            model,
            tokenizer,
            templates,
            t1,
            t2,
        } => {
            let tok = load_tokenizer(run, tokenizer)?;
            let model = load_checkpoint(&run.input(model))?;
            let templates = parse_templates(&read_text(&run.input(templates))?)?;
            let t1 = t1.as_deref().unwrap_or(&config.eval.t1);
            let t2 = t2.as_deref().unwrap_or(&config.eval.t2);
            let report = bias_score(&model, &tok, &templates, t1, t2)?;
            run.write("reports", "bias.csv", report.to_csv().as_bytes())?;
            let clamped = report.entries.iter().filter(|e| e.clamped).count();
            Ok(format!(
                "bias score {t1}/{t2}: {:.6} over {} templates ({clamped} clamped)",
                report.aggregate,
                report.entries.len()
            ))
        }
        Command::Params { preset } => {
            let configs: Vec<(String, EncoderConfig)> = match (preset, &cli.config) {
                (Some(p), _) => {
                    let cfg = match p {
                        Preset::RobbertBase => EncoderConfig::robbert_base(40_000),
                        Preset::Distilbert => EncoderConfig::distilbert(40_000),
                        Preset::Bort => EncoderConfig::bort(40_000),
                    };
                    vec![(format!("{p:?}").to_lowercase(), cfg)]
                }
                (None, Some(path)) => match serde_json::from_str::<EncoderConfig>(&read_text(path)?) {
                    Ok(cfg) => vec![("model".into(), cfg)],
                    Err(_) => vec![
                        ("teacher".into(), config.model.teacher),
                        ("student".into(), config.model.student),
                    ],
                },
                (None, None) => vec![
                    ("teacher".into(), config.model.teacher),
                    ("student".into(), config.model.student),
                ],
            };
            let mut lines = Vec::new();
            let mut report = Vec::new();
            for (name, cfg) in &configs {
                cfg.validate()?;
                let n = count_parameters(cfg);
                let reference = reference_params_millions(cfg);
                let mut line = format!(
                    "{name}: D={} A={} H={} I={} V={} P={} parameters={n} ({:.2} M)",
                    cfg.layers,
                    cfg.heads,
                    cfg.hidden,
                    cfg.intermediate,
                    cfg.vocab_size,
                    cfg.max_positions,
                    n as f64 / 1e6
                );
                if let Some(r) = reference {
                    let delta = (n as f64 / 1e6 - r) / r * 100.0;
                    line.push_str(&format!(" reference={r} M delta={delta:+.2}%"));
                }
                lines.push(line);
                report.push(serde_json::json!({"name": name, "config": cfg, "parameters": n, "reference_millions": reference}));
            }
            run.write("reports", "params.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
            Ok(lines.join("\n"))
        }
        Command::Stats {
            data,
            tokenizer,
            bin_width,
            cutoff,
        } => {
            let tok = load_tokenizer(run, tokenizer)?;
            let records: Vec<SequenceRecord> = read_lines(&run.input(data))?
                .into_iter()
                .map(|text| SequenceRecord {
                    text,
                    source_doc: 0,
                    merged_from: 1,
                })
                .collect();
            let hist = length_histogram(
                &records,
                &tok,
                bin_width.unwrap_or(config.corpus.bin_width),
                cutoff.unwrap_or(config.corpus.cutoff),
            )?;
            run.write("reports", "length_histogram.csv", hist.to_csv().as_bytes())?;
            Ok(hist.summary())
        }
    }
}

fn record_manifest(run: &Run, command: &str, args: &[String], config_json: &str, seed: u64) -> Result<()> {
    let digest = |paths: &[PathBuf]| -> Result<Vec<FileRecord>> {
        paths
            .iter()
            .filter(|p| p.is_file())
            .map(|p| {
                Ok(FileRecord {
                    path: p.clone(),
                    sha256: file_digest(p)?,
                })
            })
            .collect()
    };
    let entry = ManifestEntry {
        command: command.to_string(),
        args: args.to_vec(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: sha256_hex(config_json.as_bytes()),
        seed,
        inputs: digest(&run.inputs)?,
        outputs: digest(&run.outputs)?,
    };
    let path = run.dir.join("manifest.json");
    let mut entries: Vec<ManifestEntry> = if path.is_file() {
        serde_json::from_str(&read_text(&path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
    } else {
        Vec::new()
    };
    entries.push(entry);
    fs::write(&path, serde_json::to_string_pretty(&entries)?).map_err(|e| Error::io(&path, e))
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// summary printed on success.
pub fn run<I, T>(args: I) -> std::result::Result<String, (i32, String)>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&args).map_err(|e| {
        let code = if e.use_stderr() { 2 } else { 0 };
        (code, e.to_string().trim_end().to_string())
    })?;
    let fail = |e: Error| (exit_code(&e), e.to_string());
    let mut config = match &cli.config {
        // `params` also accepts a bare architecture file
        Some(path) if !matches!(cli.command, Command::Params { .. }) => RunConfig::load(path).map_err(fail)?,
        Some(path) => {
            let text = read_text(path).map_err(fail)?;
            if serde_json::from_str::<EncoderConfig>(&text).is_ok() {
                RunConfig::default()
            } else {
                RunConfig::from_json(&text).map_err(fail)?
            }
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    let mut run = Run::new(&cli.out);
    fs::create_dir_all(&cli.out).map_err(|e| fail(Error::io(&cli.out, e)))?;
    if let Some(path) = &cli.config {
        run.input(path);
    }
    let summary = execute(&cli, &config, &mut run).map_err(fail)?;
    let config_json = serde_json::to_string_pretty(&config).map_err(|e| fail(e.into()))?;
    let config_path = cli.out.join("config.json");
    fs::write(&config_path, &config_json).map_err(|e| fail(Error::io(&config_path, e)))?;
    let shown: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    record_manifest(&run, cli.command.name(), &shown, &config_json, config.seed).map_err(fail)?;
    Ok(summary)
}

/// Reads [`THREADS_ENV`] and sizes the global thread pool.
pub fn configure_threads() -> std::result::Result<(), (i32, String)> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| (2, format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    // the pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Entry point for the binary; returns the process exit status.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = configure_threads().and_then(|_| run(std::env::args_os()));
    match result {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err((0, help)) => {
            println!("{help}");
            0
        }
        Err((code, msg)) => {
            let first = msg.lines().next().unwrap_or("");
            let msg = if first.starts_with("error:") { first.to_string() } else { format!("error: {first}") };
            eprintln!("{msg}");
            code
        }
    }
}
