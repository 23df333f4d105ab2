//! Byte-pair-encoding tokenizer over the flat 1-based piece index space that
//! pointer sequences address.
//!
//! Every word-initial character is encoded with a marker-prefixed symbol
//! (`Ġc` instead of `c`), so word-initial and word-internal pieces are
//! distinct and "is this piece a word start" is decidable from the piece
//! alone. The marker is internal: it shows up only in vocabulary dumps.
//!
//! Training is greedy most-frequent-pair merging with a deterministic
//! tie-break (lexicographically smallest pair). Encoding re-applies merges
//! by training rank until fixed point, so identical vocab plus word gives
//! identical output everywhere.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use thiserror::Error;

/// Marker prefixed to word-initial symbols. U+0120, after all ASCII, so
/// marked variants sort after plain characters.
pub const WORD_START: char = 'Ġ';

/// Reserved piece for characters outside the training alphabet.
pub const UNK_PIECE: &str = "<unk>";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("cannot encode an empty word")]
    EmptyWord,
    #[error("invalid vocab JSON: {0}")]
    Json(String),
    #[error("inconsistent vocab: {0}")]
    Inconsistent(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A trained BPE vocabulary: base symbols (each alphabet character in plain
/// and word-initial form), an ordered merge list, and the piece↔id bijection.
#[derive(Debug, Clone, PartialEq)]
pub struct BpeVocab {
    pub merges: Vec<(String, String)>,
    pub pieces: Vec<String>,
    piece_ids: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
    alphabet: BTreeSet<char>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    merges: Vec<(String, String)>,
    pieces: Vec<String>,
}

impl BpeVocab {
    /// Assembles a vocabulary from an alphabet and an explicit merge list.
    /// Pieces are `[UNK] ++ sorted base symbols ++ merge outputs`; a merge
    /// output that collides with an existing piece keeps the first id.
    pub fn from_parts(
        alphabet: impl IntoIterator<Item = char>,
        merges: Vec<(String, String)>,
    ) -> Self {
        let alphabet: BTreeSet<char> = alphabet.into_iter().collect();
        let mut pieces = vec![UNK_PIECE.to_string()];
        for &c in &alphabet {
            pieces.push(c.to_string());
        }
        for &c in &alphabet {
            pieces.push(format!("{WORD_START}{c}"));
        }
        pieces[1..].sort_unstable();
        for (a, b) in &merges {
            let out = format!("{a}{b}");
            if !pieces.contains(&out) {
                pieces.push(out);
            }
        }
        let piece_ids = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Self {
            merges,
            pieces,
            piece_ids,
            ranks,
            alphabet,
        }
    }

    pub fn piece_id(&self, piece: &str) -> Option<usize> {
        self.piece_ids.get(piece).copied()
    }

    pub fn num_pieces(&self) -> usize {
        self.pieces.len()
    }

    /// Splits a word into merged symbols. The first character takes its
    /// word-initial form; characters outside the alphabet become UNK and
    /// never participate in merges.
    pub fn encode_word(&self, word: &str) -> Result<Vec<String>, TokenizerError> {
        if word.is_empty() {
            return Err(TokenizerError::EmptyWord);
        }
        let mut symbols: Vec<String> = Vec::new();
        for (i, c) in word.chars().enumerate() {
            if !self.alphabet.contains(&c) {
                symbols.push(UNK_PIECE.to_string());
            } else if i == 0 {
                symbols.push(format!("{WORD_START}{c}"));
            } else {
                symbols.push(c.to_string());
            }
        }
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..symbols.len() - 1 {
                if let Some(&rank) = self
                    .ranks
                    .get(&(symbols[i].clone(), symbols[i + 1].clone()))
                {
                    if best.is_none_or(|(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            // merge every occurrence of this pair, left to right
            let mut i = 0;
            while i + 1 < symbols.len() {
                if &symbols[i] == a && &symbols[i + 1] == b {
                    symbols[i] = format!("{a}{b}");
                    symbols.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
        Ok(symbols)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            merges: self.merges.clone(),
            pieces: self.pieces.clone(),
        };
        serde_json::to_string_pretty(&file).expect("vocab serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile =
            serde_json::from_str(json).map_err(|e| TokenizerError::Json(e.to_string()))?;
        // The alphabet is recoverable from the base pieces.
        let mut alphabet = BTreeSet::new();
        for p in &file.pieces {
            let chars: Vec<char> = p.chars().collect();
            match chars.as_slice() {
                [c] if *c != WORD_START => {
                    alphabet.insert(*c);
                }
                [m, c] if *m == WORD_START => {
                    alphabet.insert(*c);
                }
                _ => {}
            }
        }
        let rebuilt = Self::from_parts(alphabet, file.merges);
        if rebuilt.pieces != file.pieces {
            return Err(TokenizerError::Inconsistent(
                "piece list does not match the one derived from merges".into(),
            ));
        }
        Ok(rebuilt)
    }
}

/// Greedy BPE training: count adjacent symbol pairs across the corpus
/// (weighted by word frequency), merge the most frequent pair, repeat for
/// `num_merges` rounds or until no adjacent pair remains. Ties go to the
/// lexicographically smallest pair.
pub fn train_bpe<I, S>(corpus: I, num_merges: usize) -> Result<BpeVocab, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for word in corpus {
        let word = word.as_ref();
        if word.is_empty() {
            return Err(TokenizerError::EmptyWord);
        }
        *counts.entry(word.to_string()).or_insert(0) += 1;
    }
    if counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let alphabet: BTreeSet<char> = counts.keys().flat_map(|w| w.chars()).collect();

    // working state: each distinct word as its current symbol sequence
    let mut words: Vec<(Vec<String>, u64)> = counts
        .iter()
        .map(|(w, &c)| {
            let symbols = w
                .chars()
                .enumerate()
                .map(|(i, ch)| {
                    if i == 0 {
                        format!("{WORD_START}{ch}")
                    } else {
                        ch.to_string()
                    }
                })
                .collect();
            (symbols, c)
        })
        .collect();

    let mut merges = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (symbols, count) in &words {
            for pair in symbols.windows(2) {
                *pair_counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += count;
            }
        }
        // BTreeMap iterates in sorted key order, so the first strict maximum
        // is the lexicographically smallest among tied pairs.
        let Some((best_pair, _)) = pair_counts.iter().fold(
            None::<(&(String, String), u64)>,
            |acc, (pair, &c)| match acc {
                Some((_, best)) if c <= best => acc,
                _ => Some((pair, c)),
            },
        ) else {
            break;
        };
        let (a, b) = best_pair.clone();
        let merged = format!("{a}{b}");
        for (symbols, _) in &mut words {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == a && symbols[i + 1] == b {
                    symbols[i] = merged.clone();
                    symbols.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
        merges.push((a, b));
    }
    Ok(BpeVocab::from_parts(alphabet, merges))
}

/// Builds a vocabulary in which every distinct word of the input is exactly
/// one piece: each word contributes the merge chain that folds its symbols
/// left to right into the full word. Chains only ever extend word-initial
/// symbols, so they cannot interfere with each other or fire word-internally.
pub fn passthrough_vocab<I, S>(words: I) -> Result<BpeVocab, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let distinct: BTreeSet<String> = words.into_iter().map(|w| w.as_ref().to_string()).collect();
    if distinct.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    if distinct.iter().any(|w| w.is_empty()) {
        return Err(TokenizerError::EmptyWord);
    }
    let alphabet: BTreeSet<char> = distinct.iter().flat_map(|w| w.chars()).collect();
    let mut merges = Vec::new();
    let mut seen = BTreeSet::new();
    for word in &distinct {
        let chars: Vec<char> = word.chars().collect();
        let mut left = format!("{WORD_START}{}", chars[0]);
        for &c in &chars[1..] {
            let pair = (left.clone(), c.to_string());
            if seen.insert(pair.clone()) {
                merges.push(pair);
            }
            left.push(c);
        }
    }
    Ok(BpeVocab::from_parts(alphabet, merges))
}

/// A sentence tokenized into the flat 1-based piece space `[1, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedSentence {
    pub words: Vec<String>,
    pub pieces: Vec<String>,
    pub piece_ids: Vec<usize>,
    /// Per word, the inclusive 1-based `(first, last)` piece positions.
    /// Spans partition `[1, n]` in order.
    pub word_spans: Vec<(usize, usize)>,
    /// Entry `p - 1` answers whether 1-based position `p` starts a word.
    pub is_word_start: Vec<bool>,
}

impl TokenizedSentence {
    /// Number of pieces; pointer indexes live in `[1, n]`.
    pub fn n(&self) -> usize {
        self.pieces.len()
    }

    /// Whether 1-based position `p` is the first piece of some word.
    pub fn word_start(&self, p: usize) -> bool {
        self.is_word_start[p - 1]
    }

    /// 0-based word containing 1-based position `p`.
    pub fn word_of(&self, p: usize) -> usize {
        // word_spans is sorted and partitions [1, n]
        self.word_spans.partition_point(|&(_, last)| last < p)
    }

    /// First 1-based piece position of 0-based word `w`.
    pub fn first_bpe(&self, w: usize) -> usize {
        self.word_spans[w].0
    }

    /// Last 1-based piece position of 0-based word `w`.
    pub fn last_bpe(&self, w: usize) -> usize {
        self.word_spans[w].1
    }
}

/// Encodes each word and concatenates the results into one piece sequence.
pub fn tokenize_sentence(
    vocab: &BpeVocab,
    words: &[String],
) -> Result<TokenizedSentence, TokenizerError> {
    if words.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut pieces = Vec::new();
    let mut piece_ids = Vec::new();
    let mut word_spans = Vec::with_capacity(words.len());
    let mut is_word_start = Vec::new();
    for word in words {
        let encoded = vocab.encode_word(word)?;
        let first = pieces.len() + 1;
        for (i, piece) in encoded.into_iter().enumerate() {
            let id = vocab
                .piece_id(&piece)
                .expect("encode_word only emits vocabulary pieces");
            pieces.push(piece);
            piece_ids.push(id);
            is_word_start.push(i == 0);
        }
        word_spans.push((first, pieces.len()));
    }
    Ok(TokenizedSentence {
        words: words.to_vec(),
        pieces,
        piece_ids,
        word_spans,
        is_word_start,
    })
}

/// Inverse of tokenization: strips word-start markers and rejoins pieces
/// into words. Exact for any word over the vocabulary's alphabet.
pub fn detokenize(pieces: &[String]) -> Vec<String> {
    let mut words = Vec::new();
    for piece in pieces {
        if let Some(rest) = piece.strip_prefix(WORD_START) {
            words.push(rest.to_string());
        } else if let Some(last) = words.last_mut() {
            last.push_str(piece);
        } else {
            words.push(piece.clone());
        }
    }
    words
}
