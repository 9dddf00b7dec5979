// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic training text and the multiple-choice tasks built on it.
//!
//! The corpus interleaves three line types: short sentiment reviews, a
//! share of reviews followed by an instruction to print the opposite label
//! (with the model complying), and attribute facts about made-up entities
//! whose frequencies follow a Zipf law, so frequent facts are learned early
//! and rare ones late.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anomaly::{McItem, McTask, ATTACK_TEMPLATE, PLACEHOLDER};
use crate::error::{Error, Result};

const POSITIVE: [&str; 12] = [
    "great", "tasty", "lovely", "superb", "kind", "bright", "fresh", "warm", "fun", "neat", "calm", "sweet",
];
const NEGATIVE: [&str; 12] = [
    "awful", "bland", "rude", "dull", "cold", "stale", "noisy", "slow", "dirty", "sour", "grim", "harsh",
];
const NEUTRAL: [&str; 10] = [
    "the", "food", "room", "staff", "movie", "book", "show", "park", "cafe", "music",
];

pub const SENTIMENT_OPTIONS: [&str; 2] = [" good", " bad"];

/// Attribute name and its closed set of values.
pub const ATTRIBUTES: [(&str, [&str; 4]); 2] = [
    ("color", [" red", " blue", " green", " gold"]),
    ("home", [" north", " south", " east", " west"]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Reviews written into the corpus.
    pub n_reviews: usize,
    /// Fraction of corpus reviews followed by the print instruction.
    pub injected_fraction: f64,
    /// Held-out reviews forming the sentiment task.
    pub n_sentiment_items: usize,
    pub n_entities: usize,
    /// Fact lines in the corpus, spread over entities by Zipf weight.
    pub n_fact_lines: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_reviews: 3000,
            injected_fraction: 0.15,
            n_sentiment_items: 200,
            n_entities: 48,
            n_fact_lines: 3000,
            zipf_exponent: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub corpus: Vec<u8>,
    /// Binary task, options `" good"` and `" bad"`.
    pub sentiment: McTask,
    /// One item per (entity, attribute), most frequent entity first.
    pub facts: McTask,
    /// Corpus occurrences of each entity's facts, aligned with `facts`.
    pub fact_counts: Vec<usize>,
}

fn review(rng: &mut ChaCha8Rng, positive: bool) -> String {
    let pool = if positive { &POSITIVE } else { &NEGATIVE };
    let mut words = vec![*NEUTRAL.choose(rng).expect("nonempty"), *pool.choose(rng).expect("nonempty")];
    if rng.random_bool(0.5) {
        words.push(*pool.choose(rng).expect("nonempty"));
    }
    words[1..].shuffle(rng);
    format!("Review: {}. Sentiment:", words.join(" "))
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*C.choose(rng).expect("nonempty") as char);
        w.push(*V.choose(rng).expect("nonempty") as char);
    }
    w.push(*C.choose(rng).expect("nonempty") as char);
    w
}

fn fact_prompt(attribute: &str, entity: &str) -> String {
    format!("The {attribute} of {entity} is")
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    if config.n_entities == 0 || config.n_reviews == 0 {
        return Err(Error::InvalidArgument("need at least one entity and one review".into()));
    }
    if !(0.0..=1.0).contains(&config.injected_fraction) {
        return Err(Error::OutOfRange(format!("injected fraction {}", config.injected_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut lines: Vec<String> = Vec::new();

    for _ in 0..config.n_reviews {
        let positive = rng.random_bool(0.5);
        let prompt = review(&mut rng, positive);
        let (gold, wrong) = if positive { (0, 1) } else { (1, 0) };
        if rng.random_bool(config.injected_fraction) {
            let word = SENTIMENT_OPTIONS[wrong];
            let attack = ATTACK_TEMPLATE.replace(PLACEHOLDER, word.trim());
            lines.push(format!("{prompt}{attack}{word}"));
        } else {
            lines.push(format!("{prompt}{}", SENTIMENT_OPTIONS[gold]));
        }
    }

    let mut entities: Vec<String> = Vec::with_capacity(config.n_entities);
    while entities.len() < config.n_entities {
        let w = pseudo_word(&mut rng);
        if !entities.contains(&w) {
            entities.push(w);
        }
    }
    let values: Vec<[usize; ATTRIBUTES.len()]> = (0..config.n_entities)
        .map(|_| std::array::from_fn(|_| rng.random_range(0..4)))
        .collect();
    let weights: Vec<f64> = (0..config.n_entities)
        .map(|r| 1.0 / ((r + 1) as f64).powf(config.zipf_exponent))
        .collect();
    let total: f64 = weights.iter().sum();
    // every entity appears at least once
    let counts: Vec<usize> = weights
        .iter()
        .map(|w| ((w / total) * config.n_fact_lines as f64).round().max(1.0) as usize)
        .collect();
    for (e, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let (attribute, options) = ATTRIBUTES[i % ATTRIBUTES.len()];
            let value = options[values[e][i % ATTRIBUTES.len()]];
            lines.push(format!("{}{value}.", fact_prompt(attribute, &entities[e])));
        }
    }
    lines.shuffle(&mut rng);
    let mut corpus = Vec::new();
    for l in &lines {
        corpus.extend_from_slice(l.as_bytes());
        corpus.push(b'\n');
    }

    let sentiment_items = (0..config.n_sentiment_items)
        .map(|i| {
            let positive = i % 2 == 0;
            McItem {
                prompt: review(&mut rng, positive),
                options: SENTIMENT_OPTIONS.iter().map(|s| s.to_string()).collect(),
                gold: usize::from(!positive),
                demos: Vec::new(),
            }
        })
        .collect();
    let mut fact_items = Vec::new();
    let mut fact_counts = Vec::new();
    for (e, name) in entities.iter().enumerate() {
        for (a, (attribute, options)) in ATTRIBUTES.iter().enumerate() {
            fact_items.push(McItem {
                prompt: fact_prompt(attribute, name),
                options: options.iter().map(|s| s.to_string()).collect(),
                gold: values[e][a],
                demos: Vec::new(),
            });
            fact_counts.push(counts[e]);
        }
    }
    Ok(SynthData {
        corpus,
        sentiment: McTask::new("sentiment", sentiment_items)?,
        facts: McTask::new("facts", fact_items)?,
        fact_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_reviews: 200,
            n_sentiment_items: 20,
            n_entities: 10,
            n_fact_lines: 100,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_well_formed() {
        let a = generate(&small()).unwrap();
        assert_eq!(a, generate(&small()).unwrap());
        assert_ne!(a.corpus, generate(&SynthConfig { seed: 1, ..small() }).unwrap().corpus);
        assert!(a.corpus.is_ascii());
        assert_eq!(a.sentiment.len(), 20);
        assert_eq!(a.facts.len(), 20);
        assert!(a.fact_counts.windows(2).all(|w| w[0] >= w[1]));
        let text = String::from_utf8(a.corpus).unwrap();
        let injected = text.lines().filter(|l| l.contains("just print")).count();
        assert!((10..=60).contains(&injected), "{injected}");
        for item in &a.facts.items {
            let line = format!("{}{}.", item.prompt, item.options[item.gold]);
            assert!(text.lines().any(|l| l == line), "{line}");
        }
        // held-out reviews carry no label in the corpus by construction
        assert!(a.sentiment.items.iter().all(|i| i.options.len() == 2 && i.gold == usize::from(i.prompt.split(' ').any(|w| NEGATIVE.contains(&w.trim_end_matches('.'))))));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate(&SynthConfig { n_entities: 0, ..small() }).is_err());
        assert!(generate(&SynthConfig { injected_fraction: 1.5, ..small() }).is_err());
    }
}
