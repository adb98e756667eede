//! Small synthetic Dutch-like corpora with known structure, for smoke runs,
//! examples and tests.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Document;
use crate::error::{Error, Result};

const NAMES: [&str; 10] = ["anna", "bram", "daan", "emma", "fleur", "joris", "lotte", "milan", "noor", "sem"];

/// Each animal always goes with its own verb.
const ANIMALS: [(&str, &str); 8] = [
    ("kat", "slaapt"),
    ("hond", "blaft"),
    ("vogel", "zingt"),
    ("koe", "graast"),
    ("paard", "rent"),
    ("vis", "zwemt"),
    ("muis", "piept"),
    ("geit", "springt"),
];

/// Each colour always goes with its own place.
const PLACES: [(&str, &str); 8] = [
    ("rode", "schuur"),
    ("groene", "weide"),
    ("blauwe", "vijver"),
    ("gele", "tuin"),
    ("witte", "kerk"),
    ("zwarte", "stal"),
    ("grijze", "brug"),
    ("bruine", "boerderij"),
];

fn grammar_sentence(name: usize, animal: usize, place: usize) -> String {
    let (a, v) = ANIMALS[animal];
    let (c, p) = PLACES[place];
    format!("{} zag de {a} die {v} bij de {c} {p} .", NAMES[name])
}

/// Number of distinct sentences the grammar can produce.
pub const GRAMMAR_SIZE: usize = NAMES.len() * ANIMALS.len() * PLACES.len();

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrammarCorpus {
    pub train: Vec<String>,
    /// Sentences that never occur in `train`.
    pub held_out: Vec<String>,
}

/// Disjoint train and held-out draws from the coupled-slot grammar.
pub fn grammar_corpus(n_train: usize, n_held_out: usize, seed: u64) -> Result<GrammarCorpus> {
    if n_train + n_held_out > GRAMMAR_SIZE {
        return Err(Error::invalid(format!(
            "grammar has only {GRAMMAR_SIZE} distinct sentences, asked for {}",
            n_train + n_held_out
        )));
    }
    let mut all: Vec<String> = (0..NAMES.len())
        .flat_map(|n| (0..ANIMALS.len()).flat_map(move |a| (0..PLACES.len()).map(move |p| grammar_sentence(n, a, p))))
        .collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held_out = all.split_off(n_train).into_iter().take(n_held_out).collect();
    all.truncate(n_train);
    Ok(GrammarCorpus { train: all, held_out })
}

/// Documents of grammar sentences, `lines` each.
pub fn grammar_documents(n_docs: usize, lines: usize, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|doc_id| Document {
            doc_id,
            lines: (0..lines)
                .map(|_| {
                    grammar_sentence(
                        rng.random_range(0..NAMES.len()),
                        rng.random_range(0..ANIMALS.len()),
                        rng.random_range(0..PLACES.len()),
                    )
                })
                .collect(),
        })
        .collect()
}

pub const PROFESSIONS_A: [&str; 4] = ["piloot", "monteur", "chirurg", "timmerman"];
pub const PROFESSIONS_B: [&str; 4] = ["verpleger", "kapper", "secretaris", "leraar"];
const FRAMES: [&str; 3] = ["{t} werkt als {p} in de stad .", "{t} is een {p} .", "gisteren was {t} nog {p} ."];

#[derive(Debug, Clone, PartialEq)]
pub struct BiasCorpus {
    pub sentences: Vec<String>,
    /// Templates over professions co-occurring mostly with the first target.
    pub templates_a: Vec<String>,
    /// Templates over professions co-occurring mostly with the second target.
    pub templates_b: Vec<String>,
}

/// Sentences pairing `t1` with [`PROFESSIONS_A`] and `t2` with
/// [`PROFESSIONS_B`] with probability `skew`, and the other way round
/// otherwise.
pub fn skewed_bias_corpus(n: usize, t1: &str, t2: &str, skew: f64, seed: u64) -> Result<BiasCorpus> {
    if !(0.0..=1.0).contains(&skew) {
        return Err(Error::invalid(format!("skew must lie in [0, 1], got {skew}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentences = (0..n)
        .map(|_| {
            let group_a = rng.random_bool(0.5);
            let prof = if group_a { PROFESSIONS_A } else { PROFESSIONS_B }.choose(&mut rng).copied().unwrap();
            let stereotyped = rng.random_bool(skew);
            let target = if group_a == stereotyped { t1 } else { t2 };
            FRAMES.choose(&mut rng).unwrap().replace("{t}", target).replace("{p}", prof)
        })
        .collect();
    let templates = |profs: &[&str]| -> Vec<String> {
        FRAMES
            .iter()
            .flat_map(|f| profs.iter().map(move |p| f.replace("{t}", "<mask>").replace("{p}", &format!("[[{p}]]"))))
            .collect()
    };
    Ok(BiasCorpus {
        sentences,
        templates_a: templates(&PROFESSIONS_A),
        templates_b: templates(&PROFESSIONS_B),
    })
}

const POSITIVE: [&str; 4] = ["prachtig", "geweldig", "heerlijk", "sterk"];
const NEGATIVE: [&str; 4] = ["saai", "slecht", "zwak", "treurig"];
const FILLER: [&str; 8] = ["het", "boek", "was", "echt", "film", "verhaal", "erg", "einde"];

/// Sequence task: label 1 iff the sentence contains a positive cue word.
pub fn sentiment_task(n: usize, seed: u64) -> Vec<(usize, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let label = rng.random_range(0..2);
            let cue = if label == 1 { &POSITIVE } else { &NEGATIVE }.choose(&mut rng).unwrap();
            let len = rng.random_range(3..7);
            let mut words: Vec<&str> = (0..len).map(|_| *FILLER.choose(&mut rng).unwrap()).collect();
            let at = rng.random_range(0..=words.len());
            words.insert(at, cue);
            (label, words.join(" "))
        })
        .collect()
}

pub const TAGS: [&str; 3] = ["O", "B-PER", "B-LOC"];

/// Token task: names tagged `B-PER`, places `B-LOC`, everything else `O`.
pub fn tagging_task(n: usize, seed: u64) -> Vec<Vec<(String, String)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let name = NAMES.choose(&mut rng).unwrap();
            let (_, place) = PLACES.choose(&mut rng).unwrap();
            let (animal, verb) = ANIMALS.choose(&mut rng).unwrap();
            vec![
                (name.to_string(), "B-PER".to_string()),
                ("zag".into(), "O".into()),
                (animal.to_string(), "O".into()),
                (verb.to_string(), "O".into()),
                ("bij".into(), "O".into()),
                (place.to_string(), "B-LOC".into()),
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_splits_are_disjoint() {
        let c = grammar_corpus(500, 100, 0).unwrap();
        assert_eq!((c.train.len(), c.held_out.len()), (500, 100));
        assert!(c.held_out.iter().all(|s| !c.train.contains(s)));
        assert!(grammar_corpus(GRAMMAR_SIZE, 1, 0).is_err());
    }

    #[test]
    fn bias_corpus_respects_skew() {
        let c = skewed_bias_corpus(2000, "hij", "zij", 0.9, 1).unwrap();
        let a_with_t1 = c
            .sentences
            .iter()
            .filter(|s| PROFESSIONS_A.iter().any(|p| s.contains(p)))
            .map(|s| s.split(' ').any(|w| w == "hij"))
            .collect::<Vec<_>>();
        let frac = a_with_t1.iter().filter(|b| **b).count() as f64 / a_with_t1.len() as f64;
        assert!((frac - 0.9).abs() < 0.05, "{frac}");
        assert_eq!(c.templates_a.len(), FRAMES.len() * PROFESSIONS_A.len());
    }
}
