//! Annotated NER corpora: entity span data model, CoNLL and JSONL readers,
//! and BIO conversions.
//!
//! Word spans are 0-based inclusive everywhere in this module. Entities are
//! ordered lists of word-level fragments plus a tag, which is enough to carry
//! flat, nested, discontinuous, crossing, and multi-type annotations.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: expected two whitespace-separated columns, got {found}")]
    MalformedLine { line: usize, found: usize },
    #[error("line {line}: label '{label}' is not a BIO label (expected O, B-X or I-X)")]
    MalformedLabel { line: usize, label: String },
    #[error("line {line}: '{label}' continues no open entity (strict BIO mode)")]
    DanglingInside { line: usize, label: String },
    #[error("position {pos}: '{label}' continues no open entity (strict BIO mode)")]
    DanglingInsideAt { pos: usize, label: String },
    #[error("line {line}: invalid JSON: {msg}")]
    Json { line: usize, msg: String },
    #[error("line {line}, entity {entity}: {msg}")]
    InvalidEntity {
        line: usize,
        entity: usize,
        msg: String,
    },
    #[error("line {line}: {msg}")]
    InvalidSentence { line: usize, msg: String },
    #[error("entity {entity:?} is not BIO-representable: {reason}")]
    NotBioRepresentable { entity: String, reason: String },
    #[error("entity tag '{tag}' missing from tag vocabulary")]
    UnknownTag { tag: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One entity: ordered word-level fragments plus a tag.
///
/// Fragments are 0-based inclusive `(word_start, word_end)` spans, sorted
/// ascending and pairwise non-overlapping. A single fragment is a flat or
/// nested entity; two or more fragments make the entity discontinuous.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entity {
    #[serde(rename = "spans")]
    pub fragments: Vec<(usize, usize)>,
    #[serde(rename = "type")]
    pub tag: String,
}

impl Entity {
    /// Builds an entity, sorting fragments ascending. Fails on an empty
    /// fragment list, a fragment with `start > end`, or fragments that
    /// overlap each other (touching fragments are kept as given, not merged).
    pub fn new(mut fragments: Vec<(usize, usize)>, tag: impl Into<String>) -> Result<Self, String> {
        if fragments.is_empty() {
            return Err("entity has no fragments".into());
        }
        for &(s, e) in &fragments {
            if s > e {
                return Err(format!("fragment ({s},{e}) has start > end"));
            }
        }
        fragments.sort_unstable();
        for pair in fragments.windows(2) {
            if pair[1].0 <= pair[0].1 {
                return Err(format!(
                    "fragments ({},{}) and ({},{}) overlap",
                    pair[0].0, pair[0].1, pair[1].0, pair[1].1
                ));
            }
        }
        Ok(Self {
            fragments,
            tag: tag.into(),
        })
    }

    /// Convenience constructor for a single contiguous span.
    pub fn flat(start: usize, end: usize, tag: impl Into<String>) -> Self {
        Self::new(vec![(start, end)], tag).expect("flat span is always valid")
    }

    pub fn is_discontinuous(&self) -> bool {
        self.fragments.len() > 1
    }

    pub fn first_word(&self) -> usize {
        self.fragments[0].0
    }

    pub fn last_word(&self) -> usize {
        self.fragments[self.fragments.len() - 1].1
    }

    /// All word indexes covered by the entity, in order.
    pub fn words(&self) -> impl Iterator<Item = usize> + '_ {
        self.fragments.iter().flat_map(|&(s, e)| s..=e)
    }
}

/// A sentence with its gold entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSentence {
    #[serde(rename = "tokens")]
    pub words: Vec<String>,
    pub entities: Vec<Entity>,
}

impl RawSentence {
    pub fn new(words: Vec<String>, entities: Vec<Entity>) -> Result<Self, String> {
        if words.is_empty() {
            return Err("sentence has no words".into());
        }
        for w in &words {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(format!("word {w:?} is empty or contains whitespace"));
            }
        }
        for (i, ent) in entities.iter().enumerate() {
            if ent.last_word() >= words.len() {
                return Err(format!(
                    "entity {i} fragment ends at word {} but sentence has {} words",
                    ent.last_word(),
                    words.len()
                ));
            }
        }
        for i in 1..entities.len() {
            if entities[..i].contains(&entities[i]) {
                return Err(format!(
                    "entity {i} duplicates an earlier (spans, type) pair"
                ));
            }
        }
        Ok(Self { words, entities })
    }
}

/// A corpus plus its tag vocabulary `G`. The tag order fixes the tag-index
/// space used by linearization, so it is deterministic: sorted
/// lexicographically unless an explicit list is supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sentences: Vec<RawSentence>,
    pub tags: Vec<String>,
}

impl Dataset {
    /// Collects the tag vocabulary from the sentences, sorted.
    pub fn from_sentences(sentences: Vec<RawSentence>) -> Self {
        let tags: BTreeSet<String> = sentences
            .iter()
            .flat_map(|s| s.entities.iter().map(|e| e.tag.clone()))
            .collect();
        Self {
            sentences,
            tags: tags.into_iter().collect(),
        }
    }

    /// Replaces the tag vocabulary with an explicit ordered list.
    pub fn with_tags(mut self, tags: Vec<String>) -> Result<Self, CorpusError> {
        for sent in &self.sentences {
            for ent in &sent.entities {
                if !tags.contains(&ent.tag) {
                    return Err(CorpusError::UnknownTag {
                        tag: ent.tag.clone(),
                    });
                }
            }
        }
        self.tags = tags;
        Ok(self)
    }

    pub fn tag_index(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }
}

/// How to treat an `I-X` label with no open `B-X`/`I-X` run before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BioMode {
    /// Error out.
    Strict,
    /// Treat it as `B-X`.
    #[default]
    Lenient,
}

enum BioLabel<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_bio_label(label: &str) -> Option<BioLabel<'_>> {
    if label == "O" {
        return Some(BioLabel::Outside);
    }
    let (prefix, tag) = label.split_once('-')?;
    if tag.is_empty() {
        return None;
    }
    match prefix {
        "B" => Some(BioLabel::Begin(tag)),
        "I" => Some(BioLabel::Inside(tag)),
        _ => None,
    }
}

/// Converts a BIO label sequence into entities: every maximal `B-X (I-X)*`
/// run becomes one single-fragment entity.
pub fn bio_to_entities<S: AsRef<str>>(
    labels: &[S],
    mode: BioMode,
) -> Result<Vec<Entity>, CorpusError> {
    let mut entities = Vec::new();
    // (tag, start) of the currently open run
    let mut open: Option<(String, usize)> = None;
    for (pos, label) in labels.iter().enumerate() {
        let label = label.as_ref();
        let parsed = parse_bio_label(label).ok_or_else(|| CorpusError::MalformedLabel {
            line: pos + 1,
            label: label.to_string(),
        })?;
        match parsed {
            BioLabel::Outside => {
                if let Some((tag, start)) = open.take() {
                    entities.push(Entity::flat(start, pos - 1, tag));
                }
            }
            BioLabel::Begin(tag) => {
                if let Some((t, start)) = open.take() {
                    entities.push(Entity::flat(start, pos - 1, t));
                }
                open = Some((tag.to_string(), pos));
            }
            BioLabel::Inside(tag) => match &open {
                Some((t, _)) if t == tag => {}
                _ => {
                    if mode == BioMode::Strict {
                        return Err(CorpusError::DanglingInsideAt {
                            pos,
                            label: label.to_string(),
                        });
                    }
                    if let Some((t, start)) = open.take() {
                        entities.push(Entity::flat(start, pos - 1, t));
                    }
                    open = Some((tag.to_string(), pos));
                }
            },
        }
    }
    if let Some((tag, start)) = open {
        entities.push(Entity::flat(start, labels.len() - 1, tag));
    }
    Ok(entities)
}

/// Renders a sentence's entities as BIO labels. Succeeds only when every
/// entity is a single fragment and no two entities overlap.
pub fn entities_to_bio(sentence: &RawSentence) -> Result<Vec<String>, CorpusError> {
    let describe = |e: &Entity| format!("({:?}, {})", e.fragments, e.tag);
    let mut labels = vec!["O".to_string(); sentence.words.len()];
    let mut covered = vec![false; sentence.words.len()];
    let mut entities: Vec<&Entity> = sentence.entities.iter().collect();
    entities.sort_by_key(|e| (e.first_word(), e.last_word()));
    for ent in entities {
        if ent.is_discontinuous() {
            return Err(CorpusError::NotBioRepresentable {
                entity: describe(ent),
                reason: "entity is discontinuous".into(),
            });
        }
        let (s, e) = ent.fragments[0];
        for pos in s..=e {
            if covered[pos] {
                return Err(CorpusError::NotBioRepresentable {
                    entity: describe(ent),
                    reason: format!("word {pos} already belongs to another entity"),
                });
            }
            covered[pos] = true;
            labels[pos] = if pos == s {
                format!("B-{}", ent.tag)
            } else {
                format!("I-{}", ent.tag)
            };
        }
    }
    Ok(labels)
}

/// Reads the two-column CoNLL format: one `token<TAB or space>tag` pair per
/// line, blank line between sentences, BIO tags. CRLF input is accepted.
pub fn read_conll<R: BufRead>(reader: R, mode: BioMode) -> Result<Dataset, CorpusError> {
    let mut sentences = Vec::new();
    let mut words: Vec<String> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut sentence_start_line = 1;

    let mut flush = |words: &mut Vec<String>,
                     labels: &mut Vec<String>,
                     start_line: usize|
     -> Result<(), CorpusError> {
        if words.is_empty() {
            return Ok(());
        }
        let entities = bio_to_entities(labels.as_slice(), mode).map_err(|e| match e {
            // re-anchor positions to file lines
            CorpusError::MalformedLabel { line, label } => CorpusError::MalformedLabel {
                line: start_line + line - 1,
                label,
            },
            CorpusError::DanglingInsideAt { pos, label } => CorpusError::DanglingInside {
                line: start_line + pos,
                label,
            },
            other => other,
        })?;
        let sent = RawSentence::new(std::mem::take(words), entities).map_err(|msg| {
            CorpusError::InvalidSentence {
                line: start_line,
                msg,
            }
        })?;
        sentences.push(sent);
        labels.clear();
        Ok(())
    };

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            flush(&mut words, &mut labels, sentence_start_line)?;
            sentence_start_line = line_no + 1;
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 2 {
            return Err(CorpusError::MalformedLine {
                line: line_no,
                found: cols.len(),
            });
        }
        if words.is_empty() {
            sentence_start_line = line_no;
        }
        words.push(cols[0].to_string());
        labels.push(cols[1].to_string());
    }
    flush(&mut words, &mut labels, sentence_start_line)?;
    Ok(Dataset::from_sentences(sentences))
}

/// Writes the two-column CoNLL format with LF line endings. Fails if any
/// sentence is not BIO-representable.
pub fn write_conll<W: Write>(mut writer: W, dataset: &Dataset) -> Result<(), CorpusError> {
    for (i, sent) in dataset.sentences.iter().enumerate() {
        if i > 0 {
            writeln!(writer)?;
        }
        let labels = entities_to_bio(sent)?;
        for (word, label) in sent.words.iter().zip(&labels) {
            writeln!(writer, "{word}\t{label}")?;
        }
    }
    Ok(())
}

/// Reads one JSON object per line:
/// `{"tokens": [...], "entities": [{"spans": [[s,e],...], "type": "..."}]}`.
/// Spans are 0-based inclusive word indexes. Fragments are sorted on read;
/// out-of-range spans, `start > end`, overlapping fragments within one
/// entity, and duplicate (spans, type) pairs are validation errors.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Dataset, CorpusError> {
    let mut sentences = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RawSentence = serde_json::from_str(&line).map_err(|e| CorpusError::Json {
            line: line_no,
            msg: e.to_string(),
        })?;
        // Re-validate through the constructors: serde bypasses them.
        let mut entities = Vec::with_capacity(parsed.entities.len());
        for (ei, ent) in parsed.entities.into_iter().enumerate() {
            let rebuilt =
                Entity::new(ent.fragments, ent.tag).map_err(|msg| CorpusError::InvalidEntity {
                    line: line_no,
                    entity: ei,
                    msg,
                })?;
            if rebuilt.last_word() >= parsed.words.len() {
                return Err(CorpusError::InvalidEntity {
                    line: line_no,
                    entity: ei,
                    msg: format!(
                        "fragment ends at word {} but sentence has {} words",
                        rebuilt.last_word(),
                        parsed.words.len()
                    ),
                });
            }
            entities.push(rebuilt);
        }
        let sent = RawSentence::new(parsed.words, entities)
            .map_err(|msg| CorpusError::InvalidSentence { line: line_no, msg })?;
        sentences.push(sent);
    }
    Ok(Dataset::from_sentences(sentences))
}

/// Canonical JSONL serialization: keys in the order `tokens`, `entities`;
/// spans as two-element arrays; one sentence per line, LF endings.
pub fn write_jsonl<W: Write>(mut writer: W, dataset: &Dataset) -> Result<(), CorpusError> {
    for sent in &dataset.sentences {
        let json = serde_json::to_string(sent).expect("sentence serialization cannot fail");
        writeln!(writer, "{json}")?;
    }
    Ok(())
}
