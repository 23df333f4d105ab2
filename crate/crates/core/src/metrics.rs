//! Span-level scoring and the analysis tables: micro P/R/F1, per-tag and
//! discontinuous-only breakdowns, recall by entity ordinal, representation
//! length stats, and invalid-prediction rates.
//!
//! An entity counts as matched only when its fragment list and tag are both
//! exactly equal. Inputs are duplicate-free by construction (gold through
//! dataset validation, predictions through dedupe); scoring asserts it.

use crate::corpus::Entity;
use crate::linearizer::{entity_block, sort_entities, InvalidCounts, LinearizerError, Scheme};
use crate::tokenizer::TokenizedSentence;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction list has {pred} sentences, gold has {gold}")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("no entities to measure")]
    NoEntities,
    #[error(transparent)]
    Linearizer(#[from] LinearizerError),
}

/// Micro-averaged counts and the scores they induce.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(matched: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(matched, predicted);
        let recall = ratio(matched, gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            matched,
            predicted,
            gold,
            precision,
            recall,
            f1,
        }
    }
}

fn assert_duplicate_free(sets: &[Vec<Entity>], side: &str) {
    for (i, set) in sets.iter().enumerate() {
        let distinct: HashSet<&Entity> = set.iter().collect();
        assert_eq!(
            distinct.len(),
            set.len(),
            "{side} sentence {i} holds duplicate entities; dedupe upstream"
        );
    }
}

fn micro_counts(pred: &[Vec<Entity>], gold: &[Vec<Entity>]) -> Prf {
    let mut matched = 0;
    let mut predicted = 0;
    let mut gold_total = 0;
    for (p, g) in pred.iter().zip(gold) {
        predicted += p.len();
        gold_total += g.len();
        let gold_set: HashSet<&Entity> = g.iter().collect();
        matched += p.iter().filter(|e| gold_set.contains(e)).count();
    }
    Prf::from_counts(matched, predicted, gold_total)
}

fn check_lengths(pred: &[Vec<Entity>], gold: &[Vec<Entity>]) -> Result<(), MetricsError> {
    if pred.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    Ok(())
}

pub fn span_f1(pred: &[Vec<Entity>], gold: &[Vec<Entity>]) -> Result<Prf, MetricsError> {
    check_lengths(pred, gold)?;
    assert_duplicate_free(pred, "prediction");
    assert_duplicate_free(gold, "gold");
    Ok(micro_counts(pred, gold))
}

/// Micro scores restricted to one tag at a time, over every tag seen on
/// either side.
pub fn per_tag_f1(
    pred: &[Vec<Entity>],
    gold: &[Vec<Entity>],
) -> Result<BTreeMap<String, Prf>, MetricsError> {
    check_lengths(pred, gold)?;
    let mut tags: BTreeSet<&str> = BTreeSet::new();
    for set in pred.iter().chain(gold) {
        tags.extend(set.iter().map(|e| e.tag.as_str()));
    }
    let restrict = |sets: &[Vec<Entity>], tag: &str| -> Vec<Vec<Entity>> {
        sets.iter()
            .map(|s| s.iter().filter(|e| e.tag == tag).cloned().collect())
            .collect()
    };
    let mut out = BTreeMap::new();
    for tag in tags {
        let p = restrict(pred, tag);
        let g = restrict(gold, tag);
        out.insert(tag.to_string(), micro_counts(&p, &g));
    }
    Ok(out)
}

/// Scores with both sides restricted to entities of two or more fragments.
/// The flag is true when neither side has any, in which case every score is
/// a defined zero rather than a measurement.
pub fn discontinuous_f1(
    pred: &[Vec<Entity>],
    gold: &[Vec<Entity>],
) -> Result<(Prf, bool), MetricsError> {
    check_lengths(pred, gold)?;
    let restrict = |sets: &[Vec<Entity>]| -> Vec<Vec<Entity>> {
        sets.iter()
            .map(|s| s.iter().filter(|e| e.is_discontinuous()).cloned().collect())
            .collect()
    };
    let p = restrict(pred);
    let g = restrict(gold);
    let prf = micro_counts(&p, &g);
    let empty = prf.predicted == 0 && prf.gold == 0;
    Ok((prf, empty))
}

pub const POSITION_BUCKETS: usize = 6;

/// Recall of gold entities grouped by their ordinal in generation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketRecall {
    pub matched: usize,
    pub total: usize,
}

impl BucketRecall {
    pub fn recall(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

pub fn bucket_label(index: usize) -> String {
    if index + 1 < POSITION_BUCKETS {
        format!("{}", index + 1)
    } else {
        format!("{}+", POSITION_BUCKETS)
    }
}

/// Orders each sentence's gold entities the way the linearizer emits them;
/// the entity at ordinal k (1-based) lands in bucket min(k, 6).
pub fn position_recall(
    pred: &[Vec<Entity>],
    gold: &[Vec<Entity>],
    sents: &[TokenizedSentence],
    tags: &[String],
) -> Result<[BucketRecall; POSITION_BUCKETS], MetricsError> {
    check_lengths(pred, gold)?;
    if gold.len() != sents.len() {
        return Err(MetricsError::LengthMismatch {
            pred: sents.len(),
            gold: gold.len(),
        });
    }
    let mut buckets = [BucketRecall {
        matched: 0,
        total: 0,
    }; POSITION_BUCKETS];
    for ((p, g), sent) in pred.iter().zip(gold).zip(sents) {
        let pred_set: HashSet<&Entity> = p.iter().collect();
        for (k, entity) in sort_entities(g, sent, tags).iter().enumerate() {
            let b = k.min(POSITION_BUCKETS - 1);
            buckets[b].total += 1;
            if pred_set.contains(entity) {
                buckets[b].matched += 1;
            }
        }
    }
    Ok(buckets)
}

/// Mean and lower median of per-entity representation length, tag included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    /// Rounded to two decimals.
    pub mean: f64,
    pub median: f64,
    pub entities: usize,
}

pub fn length_stats(
    sents: &[TokenizedSentence],
    entities: &[Vec<Entity>],
    tags: &[String],
    scheme: Scheme,
) -> Result<LengthStats, MetricsError> {
    let mut lengths = Vec::new();
    for (sent, set) in sents.iter().zip(entities) {
        for entity in set {
            lengths.push(entity_block(sent, entity, tags, scheme)?.len());
        }
    }
    if lengths.is_empty() {
        return Err(MetricsError::NoEntities);
    }
    lengths.sort_unstable();
    let sum: usize = lengths.iter().sum();
    let mean = (sum as f64 / lengths.len() as f64 * 100.0).round() / 100.0;
    let median = lengths[(lengths.len() - 1) / 2] as f64;
    Ok(LengthStats {
        mean,
        median,
        entities: lengths.len(),
    })
}

/// Invalid-prediction rates over everything decoded, before filtering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvalidRates {
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    pub counts: InvalidCounts,
    /// Entities decoded before any filtering.
    pub decoded: usize,
    /// True when nothing was decoded, making the rates defined zeros.
    pub empty: bool,
}

pub fn invalid_report(counts: &InvalidCounts, decoded: usize) -> InvalidRates {
    let rate = |c: usize| {
        if decoded == 0 {
            0.0
        } else {
            c as f64 / decoded as f64
        }
    };
    InvalidRates {
        e1: rate(counts.e1),
        e2: rate(counts.e2),
        e3: rate(counts.e3),
        counts: *counts,
        decoded,
        empty: decoded == 0,
    }
}

/// The full evaluation report the CLI serializes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro: Prf,
    pub per_tag: BTreeMap<String, Prf>,
    pub discontinuous: Prf,
    pub discontinuous_empty: bool,
    pub position_recall: Vec<PositionRow>,
    /// Gold-side representation lengths under the evaluated scheme; absent
    /// for an entity-free gold set.
    pub length: Option<LengthStats>,
    pub invalid: InvalidRates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRow {
    pub bucket: String,
    pub total: usize,
    pub matched: usize,
    pub recall: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    pred: &[Vec<Entity>],
    gold: &[Vec<Entity>],
    sents: &[TokenizedSentence],
    tags: &[String],
    scheme: Scheme,
    invalid: &InvalidCounts,
    decoded: usize,
) -> Result<EvalReport, MetricsError> {
    let micro = span_f1(pred, gold)?;
    let per_tag = per_tag_f1(pred, gold)?;
    let (discontinuous, discontinuous_empty) = discontinuous_f1(pred, gold)?;
    let buckets = position_recall(pred, gold, sents, tags)?;
    let position_recall = buckets
        .iter()
        .enumerate()
        .map(|(i, b)| PositionRow {
            bucket: bucket_label(i),
            total: b.total,
            matched: b.matched,
            recall: b.recall(),
        })
        .collect();
    let length = match length_stats(sents, gold, tags, scheme) {
        Ok(stats) => Some(stats),
        Err(MetricsError::NoEntities) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        micro,
        per_tag,
        discontinuous,
        discontinuous_empty,
        position_recall,
        length,
        invalid: invalid_report(invalid, decoded),
    })
}
