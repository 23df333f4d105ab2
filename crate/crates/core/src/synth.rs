//! Seeded synthetic corpora for learning checks.
//!
//! Every pattern is purely lexical: each tag owns a disjoint word pool, so
//! the mapping from surface form to entity structure is deterministic and a
//! model that learns the vocabulary generalizes to unseen combinations.
//!
//! Families:
//!   flat           filler and one or two contiguous PER / LOC runs
//!   nested         an ORG whose interior is a PER run flanked by marker
//!                  words; both entities are emitted, overlapping
//!   discontinuous  two SYM runs joined by a connector word, forming one
//!                  two-fragment SYM entity
//!
//! Every eighth sentence is entity-free filler. Families rotate round-robin
//! over the remaining sentences, so each enabled family appears.

use crate::corpus::{Dataset, Entity, RawSentence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("vocab size {got} too small; this family mix needs at least {need} words")]
    VocabTooSmall { got: usize, need: usize },
    #[error("no pattern families enabled")]
    NoFamilies,
    #[error("sentence count must be positive")]
    NoSentences,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternFamily {
    Flat,
    Nested,
    Discontinuous,
}

impl PatternFamily {
    pub const ALL: [PatternFamily; 3] = [
        PatternFamily::Flat,
        PatternFamily::Nested,
        PatternFamily::Discontinuous,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "flat" => Some(Self::Flat),
            "nested" => Some(Self::Nested),
            "discontinuous" => Some(Self::Discontinuous),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub sentences: usize,
    pub vocab_size: usize,
    pub families: Vec<PatternFamily>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(sentences: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            sentences,
            vocab_size,
            families: PatternFamily::ALL.to_vec(),
            seed,
        }
    }
}

/// Pronounceable distinct words; the prefix consonant keeps pools disjoint.
fn pool_words(prefix: char, count: usize) -> Vec<String> {
    const CONS: [char; 8] = ['b', 'd', 'g', 'k', 'm', 'n', 'r', 't'];
    const VOWS: [char; 4] = ['a', 'e', 'i', 'o'];
    (0..count)
        .map(|i| {
            let mut w = String::new();
            w.push(prefix);
            w.push(VOWS[i % 4]);
            let mut x = i / 4;
            loop {
                w.push(CONS[x % 8]);
                w.push(VOWS[(x / 8) % 4]);
                x /= 32;
                if x == 0 {
                    break;
                }
            }
            w
        })
        .collect()
}

struct Pools {
    filler: Vec<String>,
    per: Vec<String>,
    loc: Vec<String>,
    org_open: Vec<String>,
    org_close: Vec<String>,
    sym: Vec<String>,
    connector: Vec<String>,
}

impl Pools {
    fn build(cfg: &SynthConfig) -> Result<Self, SynthError> {
        let flat = cfg.families.contains(&PatternFamily::Flat);
        let nested = cfg.families.contains(&PatternFamily::Nested);
        let disc = cfg.families.contains(&PatternFamily::Discontinuous);
        // minimum sizes per enabled pool
        let mut need = 4; // filler
        if flat || nested {
            need += 3; // per (nested reuses it for the inner entity)
        }
        if flat {
            need += 3; // loc
        }
        if nested {
            need += 2; // one opener, one closer
        }
        if disc {
            need += 3 + 1; // sym + connector
        }
        if cfg.vocab_size < need {
            return Err(SynthError::VocabTooSmall {
                got: cfg.vocab_size,
                need,
            });
        }
        // spread the surplus proportionally, filler-heavy
        let surplus = cfg.vocab_size - need;
        let mut filler = 4 + surplus * 2 / 5;
        let mut per = if flat || nested { 3 } else { 0 };
        let mut loc = if flat { 3 } else { 0 };
        let mut sym = if disc { 3 } else { 0 };
        let mut org = if nested { 2 } else { 0 };
        let connector = if disc { 1 } else { 0 };
        let mut rest = cfg.vocab_size - filler - per - loc - sym - org - connector;
        // round-robin the rest over the entity pools, filler last
        loop {
            let mut gave = false;
            for slot in [&mut per, &mut loc, &mut sym, &mut org] {
                if rest == 0 {
                    break;
                }
                if *slot > 0 {
                    *slot += 1;
                    rest -= 1;
                    gave = true;
                }
            }
            if rest == 0 {
                break;
            }
            if !gave {
                filler += rest;
                rest = 0;
            }
        }
        Ok(Self {
            filler: pool_words('f', filler),
            per: pool_words('p', per),
            loc: pool_words('l', loc),
            org_open: pool_words('v', org / 2 + org % 2),
            org_close: pool_words('z', org / 2),
            sym: pool_words('s', sym),
            connector: pool_words('w', connector),
        })
    }

    fn total(&self) -> usize {
        self.filler.len()
            + self.per.len()
            + self.loc.len()
            + self.sym.len()
            + self.org_open.len()
            + self.org_close.len()
            + self.connector.len()
    }
}

fn pick<'a>(rng: &mut ChaCha20Rng, pool: &'a [String]) -> &'a str {
    &pool[rng.gen_range(0..pool.len())]
}

fn push_filler(words: &mut Vec<String>, rng: &mut ChaCha20Rng, pools: &Pools, count: usize) {
    for _ in 0..count {
        words.push(pick(rng, &pools.filler).to_string());
    }
}

/// Appends a run from one pool; returns its inclusive word range.
fn push_run(
    words: &mut Vec<String>,
    rng: &mut ChaCha20Rng,
    pool: &[String],
    len: usize,
) -> (usize, usize) {
    let start = words.len();
    for _ in 0..len {
        words.push(pick(rng, pool).to_string());
    }
    (start, words.len() - 1)
}

fn flat_sentence(rng: &mut ChaCha20Rng, pools: &Pools, counter: usize) -> RawSentence {
    let mut words = Vec::new();
    let mut entities = Vec::new();
    let lead = rng.gen_range(1..=2);
    push_filler(&mut words, rng, pools, lead);
    let (first_pool, first_tag, second_pool, second_tag) = if counter.is_multiple_of(2) {
        (&pools.per, "PER", &pools.loc, "LOC")
    } else {
        (&pools.loc, "LOC", &pools.per, "PER")
    };
    let len = rng.gen_range(1..=3);
    let run = push_run(&mut words, rng, first_pool, len);
    entities.push(Entity::flat(run.0, run.1, first_tag));
    let gap = rng.gen_range(1..=2);
    push_filler(&mut words, rng, pools, gap);
    if rng.gen_bool(0.5) {
        let len = rng.gen_range(1..=2);
        let run = push_run(&mut words, rng, second_pool, len);
        entities.push(Entity::flat(run.0, run.1, second_tag));
        push_filler(&mut words, rng, pools, 1);
    }
    RawSentence::new(words, entities).expect("generated sentence is valid")
}

fn nested_sentence(rng: &mut ChaCha20Rng, pools: &Pools) -> RawSentence {
    let mut words = Vec::new();
    let mut entities = Vec::new();
    let lead = rng.gen_range(1..=2);
    push_filler(&mut words, rng, pools, lead);
    let open = words.len();
    words.push(pick(rng, &pools.org_open).to_string());
    let len = rng.gen_range(1..=2);
    let inner = push_run(&mut words, rng, &pools.per, len);
    words.push(pick(rng, &pools.org_close).to_string());
    let close = words.len() - 1;
    entities.push(Entity::flat(open, close, "ORG"));
    entities.push(Entity::flat(inner.0, inner.1, "PER"));
    let trail = rng.gen_range(1..=2);
    push_filler(&mut words, rng, pools, trail);
    RawSentence::new(words, entities).expect("generated sentence is valid")
}

fn discontinuous_sentence(rng: &mut ChaCha20Rng, pools: &Pools) -> RawSentence {
    let mut words = Vec::new();
    let lead = rng.gen_range(1..=2);
    push_filler(&mut words, rng, pools, lead);
    let len_a = rng.gen_range(1..=2);
    let a = push_run(&mut words, rng, &pools.sym, len_a);
    words.push(pick(rng, &pools.connector).to_string());
    let len_b = rng.gen_range(1..=2);
    let b = push_run(&mut words, rng, &pools.sym, len_b);
    let trail = rng.gen_range(1..=2);
    push_filler(&mut words, rng, pools, trail);
    let entity = Entity::new(vec![a, b], "SYM").expect("fragments are ordered and gap-separated");
    RawSentence::new(words, vec![entity]).expect("generated sentence is valid")
}

fn filler_sentence(rng: &mut ChaCha20Rng, pools: &Pools) -> RawSentence {
    let mut words = Vec::new();
    let count = rng.gen_range(3..=6);
    push_filler(&mut words, rng, pools, count);
    RawSentence::new(words, vec![]).expect("generated sentence is valid")
}

/// Generates a seeded corpus. The same config always produces the same
/// dataset, down to word identity.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset, SynthError> {
    if cfg.sentences == 0 {
        return Err(SynthError::NoSentences);
    }
    if cfg.families.is_empty() {
        return Err(SynthError::NoFamilies);
    }
    let pools = Pools::build(cfg)?;
    debug_assert!(pools.total() <= cfg.vocab_size);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut sentences = Vec::with_capacity(cfg.sentences);
    let mut entity_counter = 0usize;
    let mut flat_counter = 0usize;
    for i in 0..cfg.sentences {
        if i % 8 == 7 {
            sentences.push(filler_sentence(&mut rng, &pools));
            continue;
        }
        let family = cfg.families[entity_counter % cfg.families.len()];
        entity_counter += 1;
        let sentence = match family {
            PatternFamily::Flat => {
                flat_counter += 1;
                flat_sentence(&mut rng, &pools, flat_counter - 1)
            }
            PatternFamily::Nested => nested_sentence(&mut rng, &pools),
            PatternFamily::Discontinuous => discontinuous_sentence(&mut rng, &pools),
        };
        sentences.push(sentence);
    }
    Ok(Dataset::from_sentences(sentences))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_config(seed: u64) -> SynthConfig {
        SynthConfig::new(64, 50, seed)
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate(&full_config(7)).unwrap();
        let b = generate(&full_config(7)).unwrap();
        assert_eq!(a.sentences, b.sentences);
        assert_eq!(a.tags, b.tags);
        let c = generate(&full_config(8)).unwrap();
        assert_ne!(a.sentences, c.sentences);
    }

    #[test]
    fn every_eighth_sentence_is_entity_free() {
        let data = generate(&full_config(1)).unwrap();
        let empty = data
            .sentences
            .iter()
            .filter(|s| s.entities.is_empty())
            .count();
        assert_eq!(empty, 64 / 8);
        for (i, s) in data.sentences.iter().enumerate() {
            assert_eq!(s.entities.is_empty(), i % 8 == 7, "sentence {i}");
        }
    }

    #[test]
    fn all_families_appear() {
        let data = generate(&full_config(3)).unwrap();
        let mut nested = 0;
        let mut discontinuous = 0;
        let mut flat = 0;
        for s in &data.sentences {
            if s.entities.iter().any(|e| e.is_discontinuous()) {
                discontinuous += 1;
            } else if s.entities.len() == 2
                && s.entities[0].first_word() <= s.entities[1].first_word()
                && s.entities[1].last_word() <= s.entities[0].last_word()
            {
                nested += 1;
            } else if !s.entities.is_empty() {
                flat += 1;
            }
        }
        assert!(nested > 0 && discontinuous > 0 && flat > 0);
        for tag in ["PER", "LOC", "ORG", "SYM"] {
            assert!(data.tags.iter().any(|t| t == tag), "missing {tag}");
        }
    }

    #[test]
    fn vocab_stays_within_budget() {
        let data = generate(&full_config(5)).unwrap();
        let distinct: std::collections::HashSet<&str> = data
            .sentences
            .iter()
            .flat_map(|s| s.words.iter().map(|w| w.as_str()))
            .collect();
        assert!(distinct.len() <= 50, "used {} words", distinct.len());
    }

    #[test]
    fn single_family_configs_work() {
        for family in PatternFamily::ALL {
            let cfg = SynthConfig {
                sentences: 16,
                vocab_size: 30,
                families: vec![family],
                seed: 2,
            };
            let data = generate(&cfg).unwrap();
            assert_eq!(data.sentences.len(), 16);
        }
    }

    #[test]
    fn undersized_vocab_is_rejected() {
        let cfg = SynthConfig::new(10, 5, 0);
        assert!(matches!(
            generate(&cfg),
            Err(SynthError::VocabTooSmall { .. })
        ));
        assert!(matches!(
            generate(&SynthConfig {
                families: vec![],
                ..SynthConfig::new(10, 50, 0)
            }),
            Err(SynthError::NoFamilies)
        ));
    }

    #[test]
    fn word_pools_are_disjoint_by_prefix() {
        let data = generate(&full_config(11)).unwrap();
        for s in &data.sentences {
            for e in &s.entities {
                let prefix_of = |w: usize| s.words[w].chars().next().unwrap();
                match e.tag.as_str() {
                    "PER" => assert!(e.words().all(|w| prefix_of(w) == 'p')),
                    "LOC" => assert!(e.words().all(|w| prefix_of(w) == 'l')),
                    "SYM" => assert!(e.words().all(|w| prefix_of(w) == 's')),
                    "ORG" => {
                        assert_eq!(prefix_of(e.first_word()), 'v');
                        assert_eq!(prefix_of(e.last_word()), 'z');
                    }
                    other => panic!("unexpected tag {other}"),
                }
            }
        }
    }
}
