//! The pointer-head encoder-decoder.
//!
//! The embedding table is shared by everything token-shaped and is laid out
//! as `[pieces 0..V) [tag tokens V..V+l) [bos] [eos]` with
//! `vocab_size = V + l + 2`; bos and eos are always the last two rows.
//!
//! Generation happens in a class space of width `1 + n + l` per sentence:
//! class 0 is eos, classes `1..=n` point at BPE positions, classes
//! `(n, n+l]` name tags. The score of class 0 is the dot product of the eos
//! embedding with the decoder state; pointer classes score against
//! `H̄ = α·MLP(Hᵉ) + (1−α)·Eᵉ`; tag classes score against their token
//! embeddings. One softmax normalizes all of them.
//!
//! Decoder inputs are tokens, not classes: each generated index is converted
//! to the token it points at (pointer → source piece, tag → tag token)
//! before being embedded for the next step.

use crate::linearizer::TargetSequence;
use crate::nn::{
    apply_dropout, causal_mask, DecoderLayer, EncoderLayer, Linear, Mode, ParamStore, INIT_STD,
};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::tokenizer::TokenizedSentence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sentence has {n} pieces but the model supports {max} positions")]
    TooLong { n: usize, max: usize },
    #[error("decoder input of {m} tokens exceeds {max} positions")]
    TargetTooLong { m: usize, max: usize },
    #[error("index {y} outside [1, {hi}]")]
    IndexOutOfRange { y: usize, hi: usize },
    #[error("gradient check needs a positive sample count")]
    EmptySample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden size.
    pub d: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_size: usize,
    /// Piece count + tag count + 2 control tokens.
    pub vocab_size: usize,
    /// Blend weight between the MLP-transformed encoder states and the raw
    /// token embeddings.
    pub alpha: f64,
    pub dropout: f64,
    pub max_positions: usize,
}

impl ModelConfig {
    /// Desk-scale defaults sized for corpora of a few hundred sentences.
    pub fn small(vocab_size: usize) -> Self {
        Self {
            d: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn_size: 256,
            vocab_size,
            alpha: 0.5,
            dropout: 0.0,
            max_positions: 256,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.d == 0 || self.heads == 0 || self.ffn_size == 0 {
            return fail("d, heads and ffn_size must be positive".into());
        }
        if !self.d.is_multiple_of(self.heads) {
            return fail(format!(
                "d={} not divisible by heads={}",
                self.d, self.heads
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha={} outside [0, 1]", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout={} outside [0, 1)", self.dropout));
        }
        if self.vocab_size < 3 {
            return fail("vocab_size must cover at least one piece plus bos/eos".into());
        }
        if self.max_positions == 0 {
            return fail("max_positions must be positive".into());
        }
        Ok(())
    }
}

/// Next-step probabilities over the class space `[0, n+l]`: index 0 is eos,
/// `1..=n` are pointers, the rest are tags.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    pub probs: Vec<f64>,
}

impl StepDistribution {
    pub fn eos(&self) -> f64 {
        self.probs[0]
    }
}

#[derive(Debug, Clone)]
pub struct PointerModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    emb: usize,
    enc_pos: usize,
    dec_pos: usize,
    enc_layers: Vec<EncoderLayer>,
    dec_layers: Vec<DecoderLayer>,
    head1: Linear,
    head2: Linear,
}

impl PointerModel {
    /// Builds a model with seeded initialization: weights and embeddings
    /// from a normal with std 0.02, norm gains 1, every bias 0. Parameter
    /// construction order is fixed, so a given (config, seed) pair always
    /// produces identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = store.add(
            "token_emb",
            Tensor::randn(config.vocab_size, config.d, INIT_STD, &mut rng),
        );
        let enc_pos = store.add(
            "enc_pos",
            Tensor::randn(config.max_positions, config.d, INIT_STD, &mut rng),
        );
        let dec_pos = store.add(
            "dec_pos",
            Tensor::randn(config.max_positions, config.d, INIT_STD, &mut rng),
        );
        let enc_layers = (0..config.enc_layers)
            .map(|i| {
                EncoderLayer::new(
                    &mut store,
                    &format!("enc{i}"),
                    config.d,
                    config.heads,
                    config.ffn_size,
                    &mut rng,
                )
            })
            .collect();
        let dec_layers = (0..config.dec_layers)
            .map(|i| {
                DecoderLayer::new(
                    &mut store,
                    &format!("dec{i}"),
                    config.d,
                    config.heads,
                    config.ffn_size,
                    &mut rng,
                )
            })
            .collect();
        let head1 = Linear::new(&mut store, "head.l1", config.d, config.d, &mut rng);
        let head2 = Linear::new(&mut store, "head.l2", config.d, config.d, &mut rng);
        Ok(Self {
            config,
            store,
            emb,
            enc_pos,
            dec_pos,
            enc_layers,
            dec_layers,
            head1,
            head2,
        })
    }

    /// Rows of the embedding table available for source pieces.
    pub fn piece_capacity(&self, tag_count: usize) -> usize {
        self.config.vocab_size - tag_count - 2
    }

    pub fn tag_token_id(&self, tag_index: usize, tag_count: usize) -> usize {
        self.piece_capacity(tag_count) + tag_index
    }

    pub fn bos_token_id(&self) -> usize {
        self.config.vocab_size - 2
    }

    pub fn eos_token_id(&self) -> usize {
        self.config.vocab_size - 1
    }

    /// Converts a target-sequence value to the token it stands for: a
    /// pointer index to the piece it points at, a tag index to its tag
    /// token.
    pub fn index2token(
        &self,
        y: usize,
        sent: &TokenizedSentence,
        tags: &[String],
    ) -> Result<usize, ModelError> {
        let n = sent.n();
        let hi = n + tags.len();
        if y < 1 || y > hi {
            return Err(ModelError::IndexOutOfRange { y, hi });
        }
        if y <= n {
            Ok(sent.piece_ids[y - 1])
        } else {
            Ok(self.tag_token_id(y - n - 1, tags.len()))
        }
    }

    fn decoder_tokens(
        &self,
        indexes: &[usize],
        sent: &TokenizedSentence,
        tags: &[String],
    ) -> Result<Vec<usize>, ModelError> {
        let mut tokens = Vec::with_capacity(indexes.len() + 1);
        tokens.push(self.bos_token_id());
        for &y in indexes {
            tokens.push(self.index2token(y, sent, tags)?);
        }
        Ok(tokens)
    }

    /// Encoder forward on an existing tape. Returns `(Hᵉ, Eᵉ)` node ids;
    /// `Eᵉ` is the raw token embedding lookup, before positions.
    fn encode_on(
        &self,
        tape: &mut Tape,
        leaves: &[NodeId],
        piece_ids: &[usize],
        mode: &mut Mode,
    ) -> Result<(NodeId, NodeId), ModelError> {
        let n = piece_ids.len();
        if n > self.config.max_positions {
            return Err(ModelError::TooLong {
                n,
                max: self.config.max_positions,
            });
        }
        let e_e = tape.gather_rows(leaves[self.emb], piece_ids.to_vec());
        let pos = tape.gather_rows(leaves[self.enc_pos], (0..n).collect());
        let mut h = tape.add(e_e, pos);
        h = apply_dropout(tape, h, mode);
        for layer in &self.enc_layers {
            h = layer.apply(tape, leaves, h, mode);
        }
        Ok((h, e_e))
    }

    /// Decoder forward over a full token prefix; returns all `m` states.
    fn decode_on(
        &self,
        tape: &mut Tape,
        leaves: &[NodeId],
        h_enc: NodeId,
        tokens: &[usize],
        mode: &mut Mode,
    ) -> Result<NodeId, ModelError> {
        let m = tokens.len();
        if m > self.config.max_positions {
            return Err(ModelError::TargetTooLong {
                m,
                max: self.config.max_positions,
            });
        }
        let emb = tape.gather_rows(leaves[self.emb], tokens.to_vec());
        let pos = tape.gather_rows(leaves[self.dec_pos], (0..m).collect());
        let mut h = tape.add(emb, pos);
        h = apply_dropout(tape, h, mode);
        let mask = causal_mask(m);
        for layer in &self.dec_layers {
            h = layer.apply(tape, leaves, h, h_enc, &mask, mode);
        }
        Ok(h)
    }

    /// The `[1 + n + l, d]` matrix of class vectors: eos embedding, then
    /// `H̄ = α·MLP(Hᵉ) + (1−α)·Eᵉ`, then the tag token embeddings. Decoder
    /// states score against its rows by plain dot product.
    fn class_matrix_on(
        &self,
        tape: &mut Tape,
        leaves: &[NodeId],
        h_e: NodeId,
        e_e: NodeId,
        tag_count: usize,
    ) -> NodeId {
        let hidden = self.head1.apply(tape, leaves, h_e);
        let hidden = tape.relu(hidden);
        let h_hat = self.head2.apply(tape, leaves, hidden);
        let blended = tape.scale(h_hat, self.config.alpha);
        let residual = tape.scale(e_e, 1.0 - self.config.alpha);
        let h_bar = tape.add(blended, residual);
        let eos = tape.gather_rows(leaves[self.emb], vec![self.eos_token_id()]);
        let tag_ids: Vec<usize> = (0..tag_count)
            .map(|k| self.tag_token_id(k, tag_count))
            .collect();
        let g_d = tape.gather_rows(leaves[self.emb], tag_ids);
        tape.concat_rows(&[eos, h_bar, g_d])
    }

    /// Teacher-forced mean negative log-likelihood of a gold sequence on an
    /// existing tape: one prediction per gold step plus the final eos step.
    pub fn sequence_nll_on(
        &self,
        tape: &mut Tape,
        leaves: &[NodeId],
        sent: &TokenizedSentence,
        tags: &[String],
        gold: &TargetSequence,
        mode: &mut Mode,
    ) -> Result<NodeId, ModelError> {
        assert_eq!(gold.n, sent.n(), "gold sequence built for another sentence");
        assert_eq!(
            gold.l,
            tags.len(),
            "gold sequence built for another tag set"
        );
        let tokens = self.decoder_tokens(&gold.indexes, sent, tags)?;
        let (h_e, e_e) = self.encode_on(tape, leaves, &sent.piece_ids, mode)?;
        let dec = self.decode_on(tape, leaves, h_e, &tokens, mode)?;
        let class_mat = self.class_matrix_on(tape, leaves, h_e, e_e, tags.len());
        let logits = tape.matmul_nt(dec, class_mat);
        let logp = tape.log_softmax_rows(logits);
        let mut targets = gold.indexes.clone();
        targets.push(0);
        Ok(tape.pick_nll_mean(logp, targets))
    }

    /// Mean of per-sentence losses, in batch order.
    pub fn batch_nll_on(
        &self,
        tape: &mut Tape,
        leaves: &[NodeId],
        batch: &[(&TokenizedSentence, &TargetSequence)],
        tags: &[String],
        mode: &mut Mode,
    ) -> Result<NodeId, ModelError> {
        assert!(!batch.is_empty(), "empty batch");
        let mut total: Option<NodeId> = None;
        for (sent, gold) in batch {
            let loss = self.sequence_nll_on(tape, leaves, sent, tags, gold, mode)?;
            total = Some(match total {
                Some(t) => tape.add(t, loss),
                None => loss,
            });
        }
        Ok(tape.scale(total.unwrap(), 1.0 / batch.len() as f64))
    }

    /// Evaluation-mode loss of one sentence.
    pub fn sequence_nll(
        &self,
        sent: &TokenizedSentence,
        tags: &[String],
        gold: &TargetSequence,
    ) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let leaves = self.store.leaves(&mut tape, false);
        let loss = self.sequence_nll_on(&mut tape, &leaves, sent, tags, gold, &mut Mode::Eval)?;
        Ok(tape.value(loss).get(0, 0))
    }

    /// Evaluation-mode mean loss over a batch.
    pub fn batch_nll(
        &self,
        batch: &[(&TokenizedSentence, &TargetSequence)],
        tags: &[String],
    ) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let leaves = self.store.leaves(&mut tape, false);
        let loss = self.batch_nll_on(&mut tape, &leaves, batch, tags, &mut Mode::Eval)?;
        Ok(tape.value(loss).get(0, 0))
    }

    /// Deterministic encoder pass: `(Hᵉ, Eᵉ)` as plain tensors.
    pub fn encode(&self, sent: &TokenizedSentence) -> Result<(Tensor, Tensor), ModelError> {
        let mut tape = Tape::new();
        let leaves = self.store.leaves(&mut tape, false);
        let (h, e) = self.encode_on(&mut tape, &leaves, &sent.piece_ids, &mut Mode::Eval)?;
        Ok((tape.value(h).clone(), tape.value(e).clone()))
    }

    /// Decoder state after consuming `[bos] ++ prefix`, shape `[1, d]`.
    pub fn decode_step(
        &self,
        h_e: &Tensor,
        sent: &TokenizedSentence,
        tags: &[String],
        prefix: &[usize],
    ) -> Result<Tensor, ModelError> {
        let tokens = self.decoder_tokens(prefix, sent, tags)?;
        let mut tape = Tape::new();
        let leaves = self.store.leaves(&mut tape, false);
        let enc = tape.constant(h_e.clone());
        let dec = self.decode_on(&mut tape, &leaves, enc, &tokens, &mut Mode::Eval)?;
        let last = tape.slice_rows(dec, tokens.len() - 1, 1);
        Ok(tape.value(last).clone())
    }

    /// Next-step distribution for one decoder state.
    pub fn pointer_distribution(
        &self,
        h_e: &Tensor,
        e_e: &Tensor,
        tag_count: usize,
        h_t: &Tensor,
    ) -> StepDistribution {
        assert_eq!(
            h_t.shape(),
            (1, self.config.d),
            "h_t must be a [1, d] state"
        );
        let mut tape = Tape::new();
        let leaves = self.store.leaves(&mut tape, false);
        let h = tape.constant(h_e.clone());
        let e = tape.constant(e_e.clone());
        let class_mat = self.class_matrix_on(&mut tape, &leaves, h, e, tag_count);
        let state = tape.constant(h_t.clone());
        let logits = tape.matmul_nt(state, class_mat);
        let probs = tape.softmax_rows(logits);
        StepDistribution {
            probs: tape.value(probs).row(0).to_vec(),
        }
    }

    /// Per-sentence inference state: encoder output and the class matrix,
    /// computed once and reused for every decoding step.
    pub fn eval_context(
        &self,
        sent: &TokenizedSentence,
        tags: &[String],
    ) -> Result<EvalContext, ModelError> {
        let mut tape = Tape::new();
        let leaves = self.store.leaves(&mut tape, false);
        let (h_e, e_e) = self.encode_on(&mut tape, &leaves, &sent.piece_ids, &mut Mode::Eval)?;
        let class_mat = self.class_matrix_on(&mut tape, &leaves, h_e, e_e, tags.len());
        Ok(EvalContext {
            n: sent.n(),
            l: tags.len(),
            h_e: tape.value(h_e).clone(),
            e_e: tape.value(e_e).clone(),
            class_mat: tape.value(class_mat).clone(),
            piece_ids: sent.piece_ids.clone(),
        })
    }

    fn context_tokens(
        &self,
        ctx: &EvalContext,
        indexes: &[usize],
    ) -> Result<Vec<usize>, ModelError> {
        let mut tokens = Vec::with_capacity(indexes.len() + 1);
        tokens.push(self.bos_token_id());
        for &y in indexes {
            let hi = ctx.n + ctx.l;
            if y < 1 || y > hi {
                return Err(ModelError::IndexOutOfRange { y, hi });
            }
            tokens.push(if y <= ctx.n {
                ctx.piece_ids[y - 1]
            } else {
                self.tag_token_id(y - ctx.n - 1, ctx.l)
            });
        }
        Ok(tokens)
    }

    /// Log-probabilities of every class for the step following `prefix`.
    pub fn next_log_probs(
        &self,
        ctx: &EvalContext,
        prefix: &[usize],
    ) -> Result<Vec<f64>, ModelError> {
        let tokens = self.context_tokens(ctx, prefix)?;
        let mut tape = Tape::new();
        let leaves = self.store.leaves(&mut tape, false);
        let enc = tape.constant(ctx.h_e.clone());
        let dec = self.decode_on(&mut tape, &leaves, enc, &tokens, &mut Mode::Eval)?;
        let last = tape.slice_rows(dec, tokens.len() - 1, 1);
        let mat = tape.constant(ctx.class_mat.clone());
        let logits = tape.matmul_nt(last, mat);
        let logp = tape.log_softmax_rows(logits);
        Ok(tape.value(logp).row(0).to_vec())
    }

    /// One teacher-forced pass over a finished sequence: the log-probability
    /// of each index at its step, plus the final eos step. Length is
    /// `indexes.len() + 1`.
    pub fn forced_step_log_probs(
        &self,
        ctx: &EvalContext,
        indexes: &[usize],
    ) -> Result<Vec<f64>, ModelError> {
        let tokens = self.context_tokens(ctx, indexes)?;
        let mut tape = Tape::new();
        let leaves = self.store.leaves(&mut tape, false);
        let enc = tape.constant(ctx.h_e.clone());
        let dec = self.decode_on(&mut tape, &leaves, enc, &tokens, &mut Mode::Eval)?;
        let mat = tape.constant(ctx.class_mat.clone());
        let logits = tape.matmul_nt(dec, mat);
        let logp = tape.log_softmax_rows(logits);
        let values = tape.value(logp);
        let mut out = Vec::with_capacity(indexes.len() + 1);
        for (t, &y) in indexes.iter().enumerate() {
            out.push(values.get(t, y));
        }
        out.push(values.get(indexes.len(), 0));
        Ok(out)
    }

    /// Summed log-probability of a sequence, optionally including the
    /// closing eos step.
    pub fn sequence_log_prob(
        &self,
        ctx: &EvalContext,
        indexes: &[usize],
        include_eos: bool,
    ) -> Result<f64, ModelError> {
        let steps = self.forced_step_log_probs(ctx, indexes)?;
        let upto = if include_eos {
            steps.len()
        } else {
            steps.len() - 1
        };
        Ok(steps[..upto].iter().sum())
    }

    /// Compares analytic gradients against central finite differences on a
    /// random subsample of parameter elements; returns the largest relative
    /// error. The relative error floors its denominator at 1e-3 so that
    /// elements with a true zero gradient (for example unused position rows)
    /// compare noise against noise instead of dividing by it.
    pub fn gradient_check(
        &self,
        batch: &[(&TokenizedSentence, &TargetSequence)],
        tags: &[String],
        epsilon: f64,
        samples: usize,
        seed: u64,
    ) -> Result<f64, ModelError> {
        assert!(epsilon > 0.0, "epsilon must be positive");
        if samples == 0 {
            return Err(ModelError::EmptySample);
        }
        let mut tape = Tape::new();
        let leaves = self.store.leaves(&mut tape, true);
        let loss = self.batch_nll_on(&mut tape, &leaves, batch, tags, &mut Mode::Eval)?;
        let grads = tape.backward(loss);

        let mut probe = self.clone();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let param_count = self.store.len();
        let mut max_rel = 0.0_f64;
        for _ in 0..samples {
            let p = rng.gen_range(0..param_count);
            let e = rng.gen_range(0..self.store.tensor(p).data.len());
            let analytic = grads.get(leaves[p]).map(|g| g.data[e]).unwrap_or(0.0);
            let original = self.store.tensor(p).data[e];
            probe.store.tensor_mut(p).data[e] = original + epsilon;
            let plus = probe.batch_nll(batch, tags)?;
            probe.store.tensor_mut(p).data[e] = original - epsilon;
            let minus = probe.batch_nll(batch, tags)?;
            probe.store.tensor_mut(p).data[e] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        }
        Ok(max_rel)
    }
}

/// Precomputed per-sentence inference state.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub n: usize,
    pub l: usize,
    pub h_e: Tensor,
    pub e_e: Tensor,
    class_mat: Tensor,
    piece_ids: Vec<usize>,
}

impl EvalContext {
    /// Width of the class space: eos + pointers + tags.
    pub fn class_count(&self) -> usize {
        1 + self.n + self.l
    }
}
