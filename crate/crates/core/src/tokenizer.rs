//! Whitespace-aware byte-pair-encoding tokenizer.
//!
//! Text is split on whitespace; each word becomes a sequence of characters
//! with a leading [`WORD_START`] marker, and learned merges are applied in
//! priority order. Decoding turns markers back into single spaces, so the
//! round trip holds for text whose whitespace runs are already collapsed
//! (see [`normalize`]).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIAL: u32 = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL as usize] = ["<pad>", "<s>", "</s>", "<unk>", "<mask>"];

/// Marks the first piece of every word.
pub const WORD_START: char = '\u{2581}';

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIAL
}

/// Collapses whitespace runs to single spaces and trims both ends.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn with_specials() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for tok in SPECIAL_TOKENS {
            v.push(tok.to_string());
        }
        v
    }

    fn push(&mut self, token: String) -> u32 {
        if let Some(&id) = self.ids.get(&token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.ids.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, tok) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*tok) {
                return Err(Error::Data(format!(
                    "vocabulary line {i} must be the special token {tok}"
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary token on line {i}")));
            }
            if ids.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }
}

/// Ordered merge rules; a rule's position is its priority.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MergeTable {
    rules: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl MergeTable {
    fn push(&mut self, left: String, right: String) -> Result<()> {
        let key = (left, right);
        if self.ranks.contains_key(&key) {
            return Err(Error::Data(format!("duplicate merge rule {} {}", key.0, key.1)));
        }
        self.ranks.insert(key.clone(), self.rules.len());
        self.rules.push(key);
        Ok(())
    }

    pub fn rules(&self) -> &[(String, String)] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    fn rank(&self, left: &str, right: &str) -> Option<usize> {
        // TODO: avoid the two allocations per lookup with a pair-of-ids key
        self.ranks.get(&(left.to_string(), right.to_string())).copied()
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    std::iter::once(WORD_START)
        .chain(word.chars())
        .map(String::from)
        .collect()
}

/// Learns a vocabulary by greedily merging the most frequent adjacent pair.
///
/// Stops when the vocabulary reaches `target_vocab_size` or no pair occurs at
/// least twice. Ties go to the lexicographically smallest pair.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_vocab_size: usize) -> Result<(Vocabulary, MergeTable)> {
    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for line in corpus {
        for word in line.as_ref().split_whitespace() {
            *word_counts.entry(word).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::invalid("cannot train a tokenizer on an empty corpus"));
    }
    let mut vocab = Vocabulary::with_specials();
    let mut alphabet: Vec<char> = word_counts
        .keys()
        .flat_map(|w| w.chars())
        .chain(std::iter::once(WORD_START))
        .collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    let base = vocab.len() + alphabet.len();
    if target_vocab_size <= base {
        return Err(Error::invalid(format!(
            "target vocabulary size {target_vocab_size} must exceed the {base} special and base symbols"
        )));
    }
    for c in alphabet {
        vocab.push(c.to_string());
    }

    let mut words: Vec<(Vec<String>, usize)> = word_counts
        .into_iter()
        .map(|(w, n)| (word_symbols(w), n))
        .collect();
    let mut merges = MergeTable::default();
    while vocab.len() < target_vocab_size {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (symbols, n) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((&w[0], &w[1])).or_default() += n;
            }
        }
        let Some(((left, right), count)) = pairs
            .into_iter()
            .fold(None, |best: Option<((&str, &str), usize)>, (pair, n)| match best {
                Some((_, m)) if m >= n => best,
                _ => Some((pair, n)),
            })
        else {
            break;
        };
        if count < 2 {
            break;
        }
        let (left, right) = (left.to_string(), right.to_string());
        let merged = format!("{left}{right}");
        for (symbols, _) in &mut words {
            merge_pair(symbols, &left, &right, &merged);
        }
        vocab.push(merged);
        merges.push(left, right)?;
    }
    Ok((vocab, merges))
}

fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str, merged: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            symbols[i] = merged.to_string();
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vocabulary,
    merges: MergeTable,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary, merges: MergeTable) -> Self {
        Tokenizer { vocab, merges }
    }

    pub fn train<S: AsRef<str>>(corpus: &[S], target_vocab_size: usize) -> Result<Self> {
        let (vocab, merges) = train_bpe(corpus, target_vocab_size)?;
        Ok(Tokenizer { vocab, merges })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Pieces for one whitespace-free word, without special tokens.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut symbols = word_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merges.rank(&w[0], &w[1]).map(|r| (r, i)))
                .min();
            let Some((_, i)) = best else { break };
            let (left, right) = (symbols[i].clone(), symbols[i + 1].clone());
            merge_pair(&mut symbols, &left, &right, &format!("{left}{right}"));
        }
        symbols
            .iter()
            .map(|s| self.vocab.id(s).filter(|&id| !is_special(id)).unwrap_or(UNK_ID))
            .collect()
    }

    /// Content ids for `text` without begin/end markers.
    pub fn encode_plain(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .flat_map(|w| self.encode_word(w))
            .collect()
    }

    /// `<s> pieces… </s>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS_ID];
        ids.extend(self.encode_plain(text));
        ids.push(EOS_ID);
        ids
    }

    /// Inverse of [`Tokenizer::encode`] on in-vocabulary text; special tokens
    /// are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.vocab.token(id).ok_or_else(|| {
                Error::invalid(format!("token id {id} out of range for vocabulary of {}", self.vocab.len()))
            })?;
            if is_special(id) {
                continue;
            }
            out.push_str(tok);
        }
        let text = out.replace(WORD_START, " ");
        Ok(text.trim_start_matches(' ').to_string())
    }

    /// Writes `<stem>.vocab` (one token per line) and `<stem>.merges`.
    pub fn save(&self, vocab_path: &Path, merges_path: &Path) -> Result<()> {
        let mut vocab = self.vocab.tokens.join("\n");
        vocab.push('\n');
        fs::write(vocab_path, vocab).map_err(|e| Error::io(vocab_path, e))?;
        let mut merges = String::new();
        for (l, r) in &self.merges.rules {
            merges.push_str(l);
            merges.push(' ');
            merges.push_str(r);
            merges.push('\n');
        }
        fs::write(merges_path, merges).map_err(|e| Error::io(merges_path, e))?;
        Ok(())
    }

    pub fn load(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let vocab_text = fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let vocab = Vocabulary::from_tokens(vocab_text.lines().map(str::to_string).collect())?;
        let merges_text = fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        let mut merges = MergeTable::default();
        for (n, line) in merges_text.lines().enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    if vocab.id(&format!("{l}{r}")).is_none() {
                        return Err(Error::Data(format!(
                            "merge on line {n} produces a token missing from the vocabulary"
                        )));
                    }
                    merges.push(l.to_string(), r.to_string())?;
                }
                _ => return Err(Error::Data(format!("malformed merge rule on line {n}: {line:?}"))),
            }
        }
        Ok(Tokenizer { vocab, merges })
    }
}
