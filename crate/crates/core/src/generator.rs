//! Autoregressive inference over the eos/pointer/tag class space.
//!
//! Scores are raw sums of step log-probabilities; no length penalty. A
//! hypothesis closed by eos includes the eos step in its score; one cut off
//! at the length cap keeps the raw sum of the steps it actually took.
//!
//! The beam keeps the greedy rollout in its finished pool, so widening the
//! beam can only improve (or tie) the returned score: plain beam search can
//! prune the greedy path and would otherwise be free to end worse.

use crate::corpus::Entity;
use crate::linearizer::{self, InvalidCounts, Scheme, TargetSequence, ValidationOptions};
use crate::model::{EvalContext, ModelError, PointerModel};
use crate::tokenizer::TokenizedSentence;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub beam: usize,
    /// Length cap; `None` uses `2·n + 10`, enough for the longest scheme
    /// plus its tags.
    pub max_len: Option<usize>,
}

impl GenConfig {
    pub fn greedy() -> Self {
        Self {
            beam: 1,
            max_len: None,
        }
    }

    pub fn with_beam(beam: usize) -> Self {
        assert!(beam >= 1, "beam must be at least 1");
        Self {
            beam,
            max_len: None,
        }
    }

    fn cap(&self, n: usize) -> usize {
        let cap = self.max_len.unwrap_or(2 * n + 10);
        assert!(cap >= 1, "max length must be at least 1");
        cap
    }
}

/// One finished hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub seq: TargetSequence,
    /// Sum of step log-probabilities, eos step included when present.
    pub score: f64,
    pub ended_by_eos: bool,
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn finish(ctx: &EvalContext, indexes: Vec<usize>, score: f64, ended_by_eos: bool) -> Generated {
    Generated {
        seq: TargetSequence {
            indexes,
            n: ctx.n,
            l: ctx.l,
        },
        score,
        ended_by_eos,
    }
}

fn greedy_rollout(
    model: &PointerModel,
    ctx: &EvalContext,
    max_len: usize,
) -> Result<Generated, ModelError> {
    let mut indexes: Vec<usize> = Vec::new();
    let mut score = 0.0;
    loop {
        let logp = model.next_log_probs(ctx, &indexes)?;
        let best = argmax_lowest(&logp);
        score += logp[best];
        if best == 0 {
            return Ok(finish(ctx, indexes, score, true));
        }
        indexes.push(best);
        if indexes.len() == max_len {
            return Ok(finish(ctx, indexes, score, false));
        }
    }
}

/// Greedy decoding: argmax each step, ties to the lowest class, stop at eos
/// or the length cap. The eos class is stripped from the output.
pub fn greedy(
    model: &PointerModel,
    sent: &TokenizedSentence,
    tags: &[String],
    cfg: &GenConfig,
) -> Result<Generated, ModelError> {
    let ctx = model.eval_context(sent, tags)?;
    greedy_rollout(model, &ctx, cfg.cap(ctx.n))
}

#[derive(Debug, Clone)]
struct Hypothesis {
    indexes: Vec<usize>,
    score: f64,
}

fn better(a: &Generated, b: &Generated) -> bool {
    match a.score.total_cmp(&b.score) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => a.seq.indexes < b.seq.indexes,
    }
}

/// Beam search from a prebuilt context. Finished hypotheses compete by
/// total log-probability; score ties break toward the lexicographically
/// smaller class-index sequence.
pub fn beam_with_context(
    model: &PointerModel,
    ctx: &EvalContext,
    cfg: &GenConfig,
) -> Result<Generated, ModelError> {
    let max_len = cfg.cap(ctx.n);
    let width = cfg.beam.max(1);
    let mut best = greedy_rollout(model, ctx, max_len)?;
    if width == 1 {
        // the rollout is exactly beam width 1
        return Ok(best);
    }
    let mut active = vec![Hypothesis {
        indexes: Vec::new(),
        score: 0.0,
    }];
    for _ in 0..max_len {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &active {
            let logp = model.next_log_probs(ctx, &hyp.indexes)?;
            let closed = finish(ctx, hyp.indexes.clone(), hyp.score + logp[0], true);
            if better(&closed, &best) {
                best = closed;
            }
            for (class, lp) in logp.iter().enumerate().skip(1) {
                let mut indexes = hyp.indexes.clone();
                indexes.push(class);
                candidates.push(Hypothesis {
                    indexes,
                    score: hyp.score + lp,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.indexes.cmp(&b.indexes))
        });
        candidates.truncate(width);
        active = candidates;
        if active.is_empty() {
            break;
        }
    }
    for hyp in active {
        // cut off at the cap: keep the raw score, no eos step
        let forced = finish(ctx, hyp.indexes, hyp.score, false);
        if better(&forced, &best) {
            best = forced;
        }
    }
    Ok(best)
}

pub fn beam(
    model: &PointerModel,
    sent: &TokenizedSentence,
    tags: &[String],
    cfg: &GenConfig,
) -> Result<Generated, ModelError> {
    let ctx = model.eval_context(sent, tags)?;
    beam_with_context(model, &ctx, cfg)
}

/// One line of `predict` output: the raw index sequence, the surviving
/// entities, and what validation removed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub indexes: Vec<usize>,
    pub entities: Vec<Entity>,
    pub invalid: InvalidCounts,
}

/// Decodes one sentence end to end: generate, decode the index sequence,
/// validate, dedupe.
pub fn predict_sentence(
    model: &PointerModel,
    sent: &TokenizedSentence,
    tags: &[String],
    scheme: Scheme,
    cfg: &GenConfig,
    opts: ValidationOptions,
) -> Result<PredictionRecord, ModelError> {
    let generated = if cfg.beam <= 1 {
        greedy(model, sent, tags, cfg)?
    } else {
        beam(model, sent, tags, cfg)?
    };
    let processed = linearizer::post_process(&generated.seq, tags, scheme, sent, opts);
    Ok(PredictionRecord {
        indexes: generated.seq.indexes,
        entities: processed.entities,
        invalid: processed.invalid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sent(n: usize) -> TokenizedSentence {
        TokenizedSentence {
            words: (0..n).map(|i| format!("w{i}")).collect(),
            pieces: (0..n).map(|i| format!("Ġw{i}")).collect(),
            piece_ids: (0..n).collect(),
            word_spans: (1..=n).map(|p| (p, p)).collect(),
            is_word_start: vec![true; n],
        }
    }

    fn model(vocab: usize, seed: u64) -> PointerModel {
        let cfg = ModelConfig {
            d: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ffn_size: 16,
            vocab_size: vocab,
            alpha: 0.5,
            dropout: 0.0,
            max_positions: 64,
        };
        PointerModel::new(cfg, seed).unwrap()
    }

    fn tags(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn uniform_model_emits_empty_sequence() {
        // all-zero parameters tie every class; the tie-break picks class 0
        let mut m = model(12, 0);
        for t in m.store.tensors_mut() {
            for v in &mut t.data {
                *v = 0.0;
            }
        }
        let s = sent(4);
        let g = tags(&["A"]);
        let out = greedy(&m, &s, &g, &GenConfig::greedy()).unwrap();
        assert!(out.seq.indexes.is_empty());
        assert!(out.ended_by_eos);
    }

    #[test]
    fn indexes_stay_in_class_range() {
        for seed in 0..4 {
            let m = model(14, seed);
            let s = sent(5);
            let g = tags(&["A", "B"]);
            let out = greedy(&m, &s, &g, &GenConfig::greedy()).unwrap();
            assert!(out.seq.indexes.iter().all(|&y| (1..=5 + 2).contains(&y)));
        }
    }

    #[test]
    fn generation_halts_at_cap() {
        let m = model(14, 3);
        let s = sent(5);
        let g = tags(&["A", "B"]);
        let cfg = GenConfig {
            beam: 1,
            max_len: Some(3),
        };
        let out = greedy(&m, &s, &g, &cfg).unwrap();
        assert!(out.seq.indexes.len() <= 3);
        let wide = GenConfig {
            beam: 4,
            max_len: Some(3),
        };
        let out = beam(&m, &s, &g, &wide).unwrap();
        assert!(out.seq.indexes.len() <= 3);
    }

    #[test]
    fn beam_one_equals_greedy_bitwise() {
        for seed in 0..6 {
            let m = model(16, seed);
            let s = sent(6);
            let g = tags(&["A", "B"]);
            let a = greedy(&m, &s, &g, &GenConfig::greedy()).unwrap();
            let b = beam(&m, &s, &g, &GenConfig::with_beam(1)).unwrap();
            assert_eq!(a.seq.indexes, b.seq.indexes, "seed {seed}");
            assert_eq!(a.score, b.score, "seed {seed}");
        }
    }

    #[test]
    fn wider_beams_never_score_worse() {
        for seed in 0..6 {
            let m = model(16, seed);
            let s = sent(6);
            let g = tags(&["A", "B"]);
            let ctx = m.eval_context(&s, &g).unwrap();
            let g1 = beam_with_context(&m, &ctx, &GenConfig::with_beam(1)).unwrap();
            for k in [2, 4, 6] {
                let gk = beam_with_context(&m, &ctx, &GenConfig::with_beam(k)).unwrap();
                assert!(
                    gk.score >= g1.score,
                    "seed {seed} beam {k}: {} < {}",
                    gk.score,
                    g1.score
                );
            }
        }
    }

    #[test]
    fn scores_match_teacher_forced_recomputation() {
        for seed in 0..4 {
            let m = model(16, seed);
            let s = sent(6);
            let g = tags(&["A", "B"]);
            let ctx = m.eval_context(&s, &g).unwrap();
            for cfg in [GenConfig::greedy(), GenConfig::with_beam(4)] {
                let out = beam_with_context(&m, &ctx, &cfg).unwrap();
                let recomputed = m
                    .sequence_log_prob(&ctx, &out.seq.indexes, out.ended_by_eos)
                    .unwrap();
                assert!(
                    (out.score - recomputed).abs() < 1e-9,
                    "seed {seed}: {} vs {recomputed}",
                    out.score
                );
            }
        }
    }

    #[test]
    fn one_step_beam_is_top_one_of_first_distribution() {
        let m = model(14, 9);
        let s = sent(4);
        let g = tags(&["A", "B"]);
        let ctx = m.eval_context(&s, &g).unwrap();
        let first = m.next_log_probs(&ctx, &[]).unwrap();
        let top = argmax_lowest(&first);
        let cfg = GenConfig {
            beam: 5,
            max_len: Some(1),
        };
        let out = beam_with_context(&m, &ctx, &cfg).unwrap();
        if top == 0 {
            assert!(out.seq.indexes.is_empty());
        } else {
            assert_eq!(out.seq.indexes, vec![top]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let m = model(16, 10);
        let s = sent(6);
        let g = tags(&["A", "B"]);
        let a = beam(&m, &s, &g, &GenConfig::with_beam(4)).unwrap();
        let b = beam(&m, &s, &g, &GenConfig::with_beam(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prediction_record_serializes_invalid_keys() {
        let m = model(14, 11);
        let s = sent(4);
        let g = tags(&["A"]);
        let rec = predict_sentence(
            &m,
            &s,
            &g,
            Scheme::Word,
            &GenConfig::greedy(),
            ValidationOptions::default(),
        )
        .unwrap();
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"indexes\""));
        assert!(json.contains("\"E1\""));
        assert!(json.contains("\"truncated\""));
    }
}
