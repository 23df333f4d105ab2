//! Conversion between entity sets and pointer-index target sequences.
//!
//! A target sequence is a flat list of integers in `[1, n + l]`: values in
//! `[1, n]` point at BPE positions of the sentence, values in `(n, n + l]`
//! name one of the `l` entity tags. Each entity contributes one block of
//! pointer indexes followed by exactly one tag index. Three representations
//! control what the pointer block contains:
//!
//! - `Span`: per fragment, the first BPE of its start word and the last BPE
//!   of its end word (two indexes per fragment);
//! - `Bpe`: every BPE position of every entity word;
//! - `Word`: the first BPE of each entity word.
//!
//! Decoding is the printed algorithm: scan left to right, accumulate pointer
//! indexes, and close an entity at each tag index. Decoded entities are then
//! screened for the three invalid-prediction classes (E1: pointer not on a
//! word start, E2: indexes out of order, E3: duplicate entity) before being
//! mapped back to word-level fragments.

use crate::corpus::Entity;
use crate::tokenizer::TokenizedSentence;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Span,
    Bpe,
    Word,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Span, Scheme::Bpe, Scheme::Word];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "span" => Some(Scheme::Span),
            "bpe" => Some(Scheme::Bpe),
            "word" => Some(Scheme::Word),
            _ => None,
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Span => "span",
            Scheme::Bpe => "bpe",
            Scheme::Word => "word",
        })
    }
}

#[derive(Debug, Error)]
pub enum LinearizerError {
    #[error("entity tag '{0}' is not in the tag vocabulary")]
    UnknownTag(String),
}

/// A linearized entity set over a sentence with `n` BPEs and `l` tags.
/// Control tokens (bos/eos) are not stored here; they live in the model's
/// class space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSequence {
    pub indexes: Vec<usize>,
    pub n: usize,
    pub l: usize,
}

/// Orders entities by appearance: first pointer index, then last pointer
/// index (so nested inner entities precede their enclosing one), then tag
/// index. The key uses first-BPE-of-first-word and last-BPE-of-last-word,
/// which ranks identically under all three schemes.
pub fn sort_entities(
    entities: &[Entity],
    sent: &TokenizedSentence,
    tags: &[String],
) -> Vec<Entity> {
    let mut sorted = entities.to_vec();
    sorted.sort_by_key(|e| {
        (
            sent.first_bpe(e.first_word()),
            sent.last_bpe(e.last_word()),
            tags.iter().position(|t| t == &e.tag).unwrap_or(usize::MAX),
        )
    });
    sorted
}

fn entity_pointer_block(sent: &TokenizedSentence, entity: &Entity, scheme: Scheme) -> Vec<usize> {
    let mut block = Vec::new();
    match scheme {
        Scheme::Span => {
            for &(ws, we) in &entity.fragments {
                block.push(sent.first_bpe(ws));
                block.push(sent.last_bpe(we));
            }
        }
        Scheme::Bpe => {
            for &(ws, we) in &entity.fragments {
                for w in ws..=we {
                    block.extend(sent.first_bpe(w)..=sent.last_bpe(w));
                }
            }
        }
        Scheme::Word => {
            for &(ws, we) in &entity.fragments {
                for w in ws..=we {
                    block.push(sent.first_bpe(w));
                }
            }
        }
    }
    block
}

/// The full block one entity contributes: pointer indexes plus tag index.
pub fn entity_block(
    sent: &TokenizedSentence,
    entity: &Entity,
    tags: &[String],
    scheme: Scheme,
) -> Result<Vec<usize>, LinearizerError> {
    let tag_pos = tags
        .iter()
        .position(|t| t == &entity.tag)
        .ok_or_else(|| LinearizerError::UnknownTag(entity.tag.clone()))?;
    let mut block = entity_pointer_block(sent, entity, scheme);
    block.push(sent.n() + tag_pos + 1);
    Ok(block)
}

/// Linearizes an entity set: entities in appearance order, one block each.
/// An empty entity set yields an empty index list.
pub fn linearize(
    sent: &TokenizedSentence,
    entities: &[Entity],
    tags: &[String],
    scheme: Scheme,
) -> Result<TargetSequence, LinearizerError> {
    let mut indexes = Vec::new();
    for entity in sort_entities(entities, sent, tags) {
        indexes.extend(entity_block(sent, &entity, tags, scheme)?);
    }
    Ok(TargetSequence {
        indexes,
        n: sent.n(),
        l: tags.len(),
    })
}

/// One decoded entity before validation: the accumulated pointer indexes and
/// the tag that closed the block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedEntity {
    pub index_list: Vec<usize>,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeOutput {
    pub entities: Vec<DecodedEntity>,
    /// True when the sequence ended with accumulated pointer indexes that no
    /// tag ever closed; those indexes are dropped.
    pub truncated: bool,
}

/// Left-to-right scan: pointer indexes accumulate into a buffer; a tag index
/// closes the buffer into an entity when it is non-empty and always resets
/// it. A non-empty buffer at sequence end is dropped and flagged.
///
/// Panics if an index falls outside `[1, n + l]`; the generator's class
/// space makes such values impossible.
pub fn decode_indices(seq: &TargetSequence, tags: &[String]) -> DecodeOutput {
    assert_eq!(
        seq.l,
        tags.len(),
        "tag vocabulary does not match sequence context"
    );
    let mut entities = Vec::new();
    let mut buffer: Vec<usize> = Vec::new();
    for &y in &seq.indexes {
        assert!(
            y >= 1 && y <= seq.n + seq.l,
            "index {y} outside [1, {}]",
            seq.n + seq.l
        );
        if y <= seq.n {
            buffer.push(y);
        } else {
            if !buffer.is_empty() {
                entities.push(DecodedEntity {
                    index_list: std::mem::take(&mut buffer),
                    tag: tags[y - seq.n - 1].clone(),
                });
            }
            buffer.clear();
        }
    }
    DecodeOutput {
        truncated: !buffer.is_empty(),
        entities,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Valid,
    /// A pointer index violates the scheme's word-alignment rule.
    E1,
    /// Pointer indexes are out of order for the scheme.
    E2,
}

/// Validation knobs. `strict_span_ends` additionally requires Span fragment
/// ends to sit on the last BPE of a word; the default accepts any BPE of the
/// end word and snaps outward during fragment recovery.
#[derive(Debug, Clone, Copy, Default)]
pub struct ValidationOptions {
    pub strict_span_ends: bool,
}

/// Screens one decoded entity. Order checks come first: `Word` and `Bpe`
/// pointer lists must be strictly increasing; `Span` lists only
/// non-decreasing, because a one-BPE fragment legitimately repeats its index
/// as both start and end. Then word alignment: `Word` requires every index
/// on a word start, `Span` requires fragment starts (every even offset) on
/// word starts, `Bpe` has no alignment rule.
pub fn validate_entity_with(
    e: &DecodedEntity,
    scheme: Scheme,
    sent: &TokenizedSentence,
    opts: ValidationOptions,
) -> Verdict {
    let ordered = match scheme {
        Scheme::Span => e.index_list.windows(2).all(|w| w[0] <= w[1]),
        Scheme::Bpe | Scheme::Word => e.index_list.windows(2).all(|w| w[0] < w[1]),
    };
    if !ordered {
        return Verdict::E2;
    }
    match scheme {
        Scheme::Word => {
            if e.index_list.iter().any(|&p| !sent.word_start(p)) {
                return Verdict::E1;
            }
        }
        Scheme::Span => {
            for (i, &p) in e.index_list.iter().enumerate() {
                if i % 2 == 0 {
                    if !sent.word_start(p) {
                        return Verdict::E1;
                    }
                } else if opts.strict_span_ends && sent.last_bpe(sent.word_of(p)) != p {
                    return Verdict::E1;
                }
            }
        }
        Scheme::Bpe => {}
    }
    Verdict::Valid
}

pub fn validate_entity(e: &DecodedEntity, scheme: Scheme, sent: &TokenizedSentence) -> Verdict {
    validate_entity_with(e, scheme, sent, ValidationOptions::default())
}

/// A structurally broken pointer block that passed index-order validation:
/// an odd Span list, a partially covered Bpe word, or fragments that overlap
/// once mapped to words. Counted with E2 in reports.
#[derive(Debug, Error)]
#[error("malformed pointer block: {0}")]
pub struct Malformed(pub String);

fn runs_to_fragments(words: &[usize]) -> Vec<(usize, usize)> {
    let mut fragments: Vec<(usize, usize)> = Vec::new();
    for &w in words {
        match fragments.last_mut() {
            Some(last) if last.1 + 1 == w => last.1 = w,
            _ => fragments.push((w, w)),
        }
    }
    fragments
}

/// Maps a validated pointer block back to word-level fragments.
///
/// `Span` consumes index pairs, one fragment per pair, each index mapped to
/// its containing word. `Word` maps each index to its word and merges runs
/// of consecutive words (the representation cannot distinguish adjacent
/// one-word fragments from one multi-word fragment; merging matches the
/// continuous case). `Bpe` does the same but requires every covered word's
/// full BPE range to be present.
pub fn to_fragments(
    e: &DecodedEntity,
    scheme: Scheme,
    sent: &TokenizedSentence,
) -> Result<Entity, Malformed> {
    let fragments = match scheme {
        Scheme::Span => {
            if !e.index_list.len().is_multiple_of(2) {
                return Err(Malformed(format!(
                    "span list has odd length {}",
                    e.index_list.len()
                )));
            }
            e.index_list
                .chunks(2)
                .map(|pair| (sent.word_of(pair[0]), sent.word_of(pair[1])))
                .collect()
        }
        Scheme::Word => {
            let words: Vec<usize> = e.index_list.iter().map(|&p| sent.word_of(p)).collect();
            runs_to_fragments(&words)
        }
        Scheme::Bpe => {
            let mut words: Vec<usize> = Vec::new();
            for &p in &e.index_list {
                let w = sent.word_of(p);
                if words.last() != Some(&w) {
                    words.push(w);
                }
            }
            let covered: HashSet<usize> = e.index_list.iter().copied().collect();
            for &w in &words {
                for p in sent.first_bpe(w)..=sent.last_bpe(w) {
                    if !covered.contains(&p) {
                        return Err(Malformed(format!(
                            "word {w} is only partially covered (missing position {p})"
                        )));
                    }
                }
            }
            runs_to_fragments(&words)
        }
    };
    Entity::new(fragments, e.tag.clone()).map_err(Malformed)
}

/// Removes exact (fragments, tag) duplicates, keeping first occurrences.
/// Returns the survivors and the number removed.
pub fn dedupe(entities: Vec<Entity>) -> (Vec<Entity>, usize) {
    let mut seen = HashSet::new();
    let mut unique = Vec::with_capacity(entities.len());
    let mut removed = 0;
    for e in entities {
        if seen.insert(e.clone()) {
            unique.push(e);
        } else {
            removed += 1;
        }
    }
    (unique, removed)
}

/// Per-sentence tally of excluded predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvalidCounts {
    #[serde(rename = "E1")]
    pub e1: usize,
    #[serde(rename = "E2")]
    pub e2: usize,
    #[serde(rename = "E3")]
    pub e3: usize,
    pub truncated: usize,
}

impl InvalidCounts {
    pub fn total(&self) -> usize {
        self.e1 + self.e2 + self.e3
    }

    pub fn add(&mut self, other: &InvalidCounts) {
        self.e1 += other.e1;
        self.e2 += other.e2;
        self.e3 += other.e3;
        self.truncated += other.truncated;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostProcessed {
    pub entities: Vec<Entity>,
    pub invalid: InvalidCounts,
}

/// Full prediction post-processing: decode, screen each entity (E1/E2),
/// recover fragments (structural failures count as E2), and drop duplicates
/// (E3). Everything screened out is excluded from evaluation.
pub fn post_process(
    seq: &TargetSequence,
    tags: &[String],
    scheme: Scheme,
    sent: &TokenizedSentence,
    opts: ValidationOptions,
) -> PostProcessed {
    let decoded = decode_indices(seq, tags);
    let mut invalid = InvalidCounts {
        truncated: decoded.truncated as usize,
        ..InvalidCounts::default()
    };
    let mut mapped = Vec::new();
    for e in &decoded.entities {
        match validate_entity_with(e, scheme, sent, opts) {
            Verdict::E1 => invalid.e1 += 1,
            Verdict::E2 => invalid.e2 += 1,
            Verdict::Valid => match to_fragments(e, scheme, sent) {
                Ok(entity) => mapped.push(entity),
                Err(_) => invalid.e2 += 1,
            },
        }
    }
    let (entities, e3) = dedupe(mapped);
    invalid.e3 = e3;
    PostProcessed { entities, invalid }
}
