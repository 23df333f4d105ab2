//! Sequence-labelling baselines for flat NER: a per-word MLP tagger and an
//! optional CRF layer with exact log-likelihood and Viterbi decoding, both
//! over the same transformer encoder the pointer model uses.
//!
//! BIO labels attach to words; the encoder runs over BPE pieces, so the
//! emission head scores the first piece of each word. The CRF scores
//! log-softmaxed emissions (scoring raw logits would normalize identically,
//! but the log-softmax form is kept as the reference formulation) and adds a
//! dedicated start row to the transition matrix for the first position.

use crate::corpus::{bio_to_entities, entities_to_bio, BioMode, CorpusError, Dataset, Entity};
use crate::metrics::{span_f1, MetricsError, Prf};
use crate::nn::{apply_dropout, EncoderLayer, Linear, Mode, ParamStore, INIT_STD};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::tokenizer::{tokenize_sentence, BpeVocab, TokenizedSentence, TokenizerError};
use crate::trainer::{clip_global_norm, lr_at, Adam, EpochLog, TrainConfig, TrainError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid baseline config: {0}")]
    Config(String),
    #[error("dataset is not flat: {0}")]
    NotBio(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("sentence has {n} pieces but the model supports {max} positions")]
    TooLong { n: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub d: usize,
    pub enc_layers: usize,
    pub heads: usize,
    pub ffn_size: usize,
    /// Piece rows only; the tagger has no control or tag tokens.
    pub vocab_size: usize,
    pub dropout: f64,
    pub max_positions: usize,
    /// With a CRF layer the loss is the exact sequence log-likelihood and
    /// decoding is Viterbi; without it, positions are independent.
    pub crf: bool,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        let fail = |m: String| Err(BaselineError::Config(m));
        if self.d == 0 || self.heads == 0 || self.ffn_size == 0 {
            return fail("d, heads and ffn_size must be positive".into());
        }
        if !self.d.is_multiple_of(self.heads) {
            return fail(format!(
                "d={} not divisible by heads={}",
                self.d, self.heads
            ));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return fail("vocab_size and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout={} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// `Softmax(max(H·W_b + b_b, 0)·W_a + b_a)` as plain tensor math; rows are
/// per-position tag distributions.
pub fn mlp_tag_distribution(
    h: &Tensor,
    w_b: &Tensor,
    b_b: &Tensor,
    w_a: &Tensor,
    b_a: &Tensor,
) -> Tensor {
    let hidden = h.matmul(w_b).add_row_broadcast(b_b).relu();
    let logits = hidden.matmul(w_a).add_row_broadcast(b_a);
    logits.softmax_rows()
}

/// Exact conditional log-likelihood of a label sequence under a linear-chain
/// CRF, on the tape. `m` is `[n, L]` log-emissions; `t` is `[L + 1, L]`
/// transitions whose extra last row scores the first position.
pub fn crf_log_likelihood_on(tape: &mut Tape, m: NodeId, t: NodeId, gold: &[usize]) -> NodeId {
    let (n, labels) = tape.value(m).shape();
    assert!(n >= 1, "need at least one position");
    assert_eq!(gold.len(), n, "one gold label per position");
    assert_eq!(
        tape.value(t).shape(),
        (labels + 1, labels),
        "transition matrix must be [L + 1, L]"
    );
    assert!(gold.iter().all(|&y| y < labels), "gold label out of range");

    let em_cells: Vec<(usize, usize)> = gold.iter().enumerate().map(|(i, &y)| (i, y)).collect();
    let mut tr_cells = vec![(labels, gold[0])];
    for i in 1..n {
        tr_cells.push((gold[i - 1], gold[i]));
    }
    let num_m = tape.pick_sum(m, em_cells);
    let num_t = tape.pick_sum(t, tr_cells);
    let numerator = tape.add(num_m, num_t);

    let t_main = tape.slice_rows(t, 0, labels);
    let t_start = tape.slice_rows(t, labels, 1);
    let m0 = tape.slice_rows(m, 0, 1);
    let mut alpha = tape.add(m0, t_start);
    for i in 1..n {
        let alpha_col = tape.transpose(alpha);
        // scores[k, j] = alpha[k] + T[k, j]
        let scores = tape.add_broadcast_col(t_main, alpha_col);
        let reduced = tape.lse_rows(scores);
        let mi = tape.slice_rows(m, i, 1);
        alpha = tape.add(reduced, mi);
    }
    let log_z = tape.lse_cols(alpha);
    tape.sub(numerator, log_z)
}

pub fn crf_log_likelihood(m: &Tensor, t: &Tensor, gold: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let m_node = tape.constant(m.clone());
    let t_node = tape.constant(t.clone());
    let ll = crf_log_likelihood_on(&mut tape, m_node, t_node, gold);
    tape.value(ll).get(0, 0)
}

/// Highest-scoring label sequence and its score. Ties break toward the
/// lowest label index, both at each backpointer and at the final position.
pub fn viterbi(m: &Tensor, t: &Tensor) -> (Vec<usize>, f64) {
    let (n, labels) = m.shape();
    assert!(n >= 1 && labels >= 1);
    assert_eq!(t.shape(), (labels + 1, labels));
    let mut delta: Vec<f64> = (0..labels)
        .map(|j| m.get(0, j) + t.get(labels, j))
        .collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(n - 1);
    for i in 1..n {
        let mut next = vec![0.0; labels];
        let mut bp = vec![0usize; labels];
        for j in 0..labels {
            let mut best_k = 0;
            let mut best = delta[0] + t.get(0, j);
            for (k, &d) in delta.iter().enumerate().skip(1) {
                let v = d + t.get(k, j);
                if v > best {
                    best = v;
                    best_k = k;
                }
            }
            next[j] = best + m.get(i, j);
            bp[j] = best_k;
        }
        delta = next;
        back.push(bp);
    }
    let mut j = 0;
    for c in 1..labels {
        if delta[c] > delta[j] {
            j = c;
        }
    }
    let score = delta[j];
    let mut path = vec![j];
    for bp in back.iter().rev() {
        j = bp[j];
        path.push(j);
    }
    path.reverse();
    (path, score)
}

/// The label vocabulary induced by a tag set: O first, then B-/I- per tag
/// in dataset order.
pub fn bio_labels(tags: &[String]) -> Vec<String> {
    let mut labels = vec!["O".to_string()];
    for tag in tags {
        labels.push(format!("B-{tag}"));
        labels.push(format!("I-{tag}"));
    }
    labels
}

#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub config: BaselineConfig,
    pub labels: Vec<String>,
    pub store: ParamStore,
    emb: usize,
    pos: usize,
    enc_layers: Vec<EncoderLayer>,
    mlp1: Linear,
    mlp2: Linear,
    transition: usize,
}

impl BaselineModel {
    pub fn new(
        config: BaselineConfig,
        labels: Vec<String>,
        seed: u64,
    ) -> Result<Self, BaselineError> {
        config.validate()?;
        if labels.is_empty() {
            return Err(BaselineError::Config("label set is empty".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = store.add(
            "token_emb",
            Tensor::randn(config.vocab_size, config.d, INIT_STD, &mut rng),
        );
        let pos = store.add(
            "enc_pos",
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
        let mlp1 = Linear::new(&mut store, "mlp.l1", config.d, config.d, &mut rng);
        let mlp2 = Linear::new(&mut store, "mlp.l2", config.d, labels.len(), &mut rng);
        let transition = store.add(
            "transition",
            Tensor::randn(labels.len() + 1, labels.len(), INIT_STD, &mut rng),
        );
        Ok(Self {
            config,
            labels,
            store,
            emb,
            pos,
            enc_layers,
            mlp1,
            mlp2,
            transition,
        })
    }

    /// Per-word emission logits: encoder over pieces, first piece of each
    /// word scored by the MLP head. Shape `[words, labels]`.
    fn emissions_on(
        &self,
        tape: &mut Tape,
        leaves: &[NodeId],
        sent: &TokenizedSentence,
        mode: &mut Mode,
    ) -> Result<NodeId, BaselineError> {
        let n = sent.n();
        if n > self.config.max_positions {
            return Err(BaselineError::TooLong {
                n,
                max: self.config.max_positions,
            });
        }
        let emb = tape.gather_rows(leaves[self.emb], sent.piece_ids.clone());
        let pos = tape.gather_rows(leaves[self.pos], (0..n).collect());
        let mut h = tape.add(emb, pos);
        h = apply_dropout(tape, h, mode);
        for layer in &self.enc_layers {
            h = layer.apply(tape, leaves, h, mode);
        }
        let word_rows: Vec<usize> = (0..sent.words.len())
            .map(|w| sent.first_bpe(w) - 1)
            .collect();
        let words = tape.gather_rows(h, word_rows);
        let hidden = self.mlp1.apply(tape, leaves, words);
        let hidden = tape.relu(hidden);
        Ok(self.mlp2.apply(tape, leaves, hidden))
    }

    /// Per-sentence loss: mean per-word NLL for the plain tagger, mean
    /// per-word negative sequence log-likelihood for the CRF.
    pub fn sentence_nll_on(
        &self,
        tape: &mut Tape,
        leaves: &[NodeId],
        sent: &TokenizedSentence,
        gold: &[usize],
        mode: &mut Mode,
    ) -> Result<NodeId, BaselineError> {
        assert_eq!(gold.len(), sent.words.len(), "one label per word");
        let logits = self.emissions_on(tape, leaves, sent, mode)?;
        let logp = tape.log_softmax_rows(logits);
        if self.config.crf {
            let ll = crf_log_likelihood_on(tape, logp, leaves[self.transition], gold);
            Ok(tape.scale(ll, -1.0 / gold.len() as f64))
        } else {
            Ok(tape.pick_nll_mean(logp, gold.to_vec()))
        }
    }

    /// Decoded label indexes: Viterbi under the CRF, per-position argmax
    /// otherwise. Ties break toward the lowest label index.
    pub fn predict_labels(&self, sent: &TokenizedSentence) -> Result<Vec<usize>, BaselineError> {
        let mut tape = Tape::new();
        let leaves = self.store.leaves(&mut tape, false);
        let logits = self.emissions_on(&mut tape, &leaves, sent, &mut Mode::Eval)?;
        let logp = tape.log_softmax_rows(logits);
        let m = tape.value(logp);
        if self.config.crf {
            let t = self.store.tensor(self.transition);
            Ok(viterbi(m, t).0)
        } else {
            Ok((0..m.rows)
                .map(|i| {
                    let row = m.row(i);
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate().skip(1) {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect())
        }
    }

    /// Labels decoded back to entities; stray continuations are read
    /// leniently as entity starts.
    pub fn predict_entities(&self, sent: &TokenizedSentence) -> Result<Vec<Entity>, BaselineError> {
        let indexes = self.predict_labels(sent)?;
        let labels: Vec<&str> = indexes.iter().map(|&i| self.labels[i].as_str()).collect();
        Ok(bio_to_entities(&labels, BioMode::Lenient)?)
    }
}

#[derive(Debug, Clone)]
pub struct BioSentence {
    pub sent: TokenizedSentence,
    pub labels: Vec<usize>,
    pub entities: Vec<Entity>,
}

#[derive(Debug, Clone)]
pub struct BioPrepared {
    pub sentences: Vec<BioSentence>,
    pub tags: Vec<String>,
    pub labels: Vec<String>,
}

/// Tokenizes and BIO-encodes a dataset. Nested or discontinuous entities
/// make a dataset unrepresentable and error out here.
pub fn prepare_bio(dataset: &Dataset, vocab: &BpeVocab) -> Result<BioPrepared, BaselineError> {
    let labels = bio_labels(&dataset.tags);
    let index_of = |s: &str| labels.iter().position(|l| l == s).expect("label covered");
    let mut sentences = Vec::with_capacity(dataset.sentences.len());
    for raw in &dataset.sentences {
        let strings = entities_to_bio(raw)?;
        let sent = tokenize_sentence(vocab, &raw.words)?;
        sentences.push(BioSentence {
            sent,
            labels: strings.iter().map(|s| index_of(s)).collect(),
            entities: raw.entities.clone(),
        });
    }
    Ok(BioPrepared {
        sentences,
        tags: dataset.tags.clone(),
        labels,
    })
}

#[derive(Debug)]
pub struct BaselineOutcome {
    pub model: BaselineModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

fn evaluate_dev(model: &BaselineModel, dev: &BioPrepared) -> Result<Prf, BaselineError> {
    let mut pred = Vec::with_capacity(dev.sentences.len());
    let mut gold = Vec::with_capacity(dev.sentences.len());
    for s in &dev.sentences {
        pred.push(model.predict_entities(&s.sent)?);
        gold.push(s.entities.clone());
    }
    Ok(span_f1(&pred, &gold)?)
}

/// The pointer trainer's loop, specialized to per-word labels: same
/// schedule, optimizer, clipping, seeding, and best-dev retention.
pub fn train_baseline(
    mut model: BaselineModel,
    data: &BioPrepared,
    dev: Option<&BioPrepared>,
    cfg: &TrainConfig,
) -> Result<BaselineOutcome, BaselineError> {
    cfg.validate()?;
    let n = data.sentences.len();
    if n == 0 {
        return Err(BaselineError::Train(TrainError::EmptyDataset));
    }
    if cfg.epochs == 0 {
        return Ok(BaselineOutcome {
            model,
            log: Vec::new(),
            best_epoch: None,
        });
    }
    let total_steps = cfg.epochs * n.div_ceil(cfg.batch_size);
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut adam = Adam::new(&model.store);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, BaselineModel)> = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut last_lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let lr = lr_at(step, total_steps, cfg)?;
            last_lr = lr;
            let mut tape = Tape::new();
            let leaves = model.store.leaves(&mut tape, true);
            let mut mode = Mode::Train {
                dropout: model.config.dropout,
                rng: &mut dropout_rng,
            };
            let mut total: Option<NodeId> = None;
            for &i in chunk {
                let s = &data.sentences[i];
                let loss =
                    model.sentence_nll_on(&mut tape, &leaves, &s.sent, &s.labels, &mut mode)?;
                total = Some(match total {
                    Some(t) => tape.add(t, loss),
                    None => loss,
                });
            }
            let loss_node = tape.scale(total.unwrap(), 1.0 / chunk.len() as f64);
            let loss = tape.value(loss_node).get(0, 0);
            if !loss.is_finite() {
                return Err(BaselineError::Train(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                }));
            }
            loss_sum += loss * chunk.len() as f64;
            let grads = tape.backward(loss_node);
            let mut grad_tensors: Vec<Tensor> = leaves
                .iter()
                .enumerate()
                .map(|(p, &id)| {
                    grads.get(id).cloned().unwrap_or_else(|| {
                        let (r, c) = model.store.tensor(p).shape();
                        Tensor::zeros(r, c)
                    })
                })
                .collect();
            clip_global_norm(&mut grad_tensors, cfg.clip_norm);
            adam.step(&mut model.store, &grad_tensors, lr, cfg);
        }
        let mean_loss = loss_sum / n as f64;
        let mut dev_prf = None;
        if let Some(dev_set) = dev {
            if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
                let prf = evaluate_dev(&model, dev_set)?;
                let improved = best.as_ref().is_none_or(|(f1, _, _)| prf.f1 > *f1);
                if improved {
                    best = Some((prf.f1, epoch, model.clone()));
                }
                dev_prf = Some(prf);
            }
        }
        log.push(EpochLog {
            epoch,
            mean_loss,
            dev: dev_prf,
            lr: last_lr,
        });
    }

    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, Some(e)),
        None => (model, None),
    };
    Ok(BaselineOutcome {
        model,
        log,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearizer::Scheme;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::from_data(rows, cols, data)
    }

    /// Brute-force score of one labelling under the CRF.
    fn path_score(m: &Tensor, t: &Tensor, path: &[usize]) -> f64 {
        let labels = m.cols;
        let mut score = m.get(0, path[0]) + t.get(labels, path[0]);
        for i in 1..path.len() {
            score += m.get(i, path[i]) + t.get(path[i - 1], path[i]);
        }
        score
    }

    fn all_paths(n: usize, labels: usize) -> Vec<Vec<usize>> {
        let mut paths = vec![vec![]];
        for _ in 0..n {
            let mut next = Vec::new();
            for p in &paths {
                for l in 0..labels {
                    let mut q = p.clone();
                    q.push(l);
                    next.push(q);
                }
            }
            paths = next;
        }
        paths
    }

    fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = values.collect();
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
    }

    #[test]
    fn mlp_rows_normalize() {
        let mut r = rng(1);
        let h = random_tensor(4, 3, &mut r);
        let w_b = random_tensor(3, 5, &mut r);
        let b_b = random_tensor(1, 5, &mut r);
        let w_a = random_tensor(5, 3, &mut r);
        let b_a = random_tensor(1, 3, &mut r);
        let probs = mlp_tag_distribution(&h, &w_b, &b_b, &w_a, &b_a);
        for i in 0..4 {
            let sum: f64 = probs.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_output_layer_gives_uniform_rows() {
        let mut r = rng(2);
        let h = random_tensor(3, 4, &mut r);
        let w_b = random_tensor(4, 4, &mut r);
        let b_b = random_tensor(1, 4, &mut r);
        let w_a = Tensor::zeros(4, 3);
        let b_a = Tensor::zeros(1, 3);
        let probs = mlp_tag_distribution(&h, &w_b, &b_b, &w_a, &b_a);
        for i in 0..3 {
            for j in 0..3 {
                assert!((probs.get(i, j) - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_matches_scalar_trace() {
        // identity W_b, zero b_b: hidden = relu(H) = H for positive H
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let w_b = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b_b = Tensor::zeros(1, 2);
        let w_a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b_a = Tensor::zeros(1, 2);
        let probs = mlp_tag_distribution(&h, &w_b, &b_b, &w_a, &b_a);
        // row 0: logits [1, 2]; row 1: logits [6, 8]
        let e = |x: f64| x.exp();
        let r0 = [e(1.0) / (e(1.0) + e(2.0)), e(2.0) / (e(1.0) + e(2.0))];
        let r1 = [e(6.0) / (e(6.0) + e(8.0)), e(8.0) / (e(6.0) + e(8.0))];
        for j in 0..2 {
            assert!((probs.get(0, j) - r0[j]).abs() < 1e-12);
            assert!((probs.get(1, j) - r1[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_position_single_label_is_certain() {
        let m = Tensor::from_rows(&[vec![0.7]]);
        let t = Tensor::from_rows(&[vec![0.3], vec![-0.2]]);
        let ll = crf_log_likelihood(&m, &t, &[0]);
        assert!(ll.abs() < 1e-12);
    }

    #[test]
    fn crf_matches_enumeration() {
        for (n, labels, seed) in [(4, 3, 3u64), (5, 3, 4), (6, 2, 5), (3, 4, 6)] {
            let mut r = rng(seed);
            let m = random_tensor(n, labels, &mut r);
            let t = random_tensor(labels + 1, labels, &mut r);
            let paths = all_paths(n, labels);
            let log_z = log_sum_exp(paths.iter().map(|p| path_score(&m, &t, p)));
            let gold: Vec<usize> = (0..n).map(|_| r.gen_range(0..labels)).collect();
            let expected = path_score(&m, &t, &gold) - log_z;
            let got = crf_log_likelihood(&m, &t, &gold);
            assert!(
                (got - expected).abs() < 1e-6,
                "n={n} labels={labels}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn crf_is_a_proper_distribution() {
        let mut r = rng(7);
        let m = random_tensor(4, 3, &mut r);
        let t = random_tensor(4, 3, &mut r);
        let total: f64 = all_paths(4, 3)
            .iter()
            .map(|p| crf_log_likelihood(&m, &t, p).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "total probability {total}");
    }

    #[test]
    fn zero_transitions_factorize() {
        let mut r = rng(8);
        let m = random_tensor(5, 3, &mut r);
        let t = Tensor::zeros(4, 3);
        let gold = [2, 0, 1, 1, 2];
        let expected: f64 = (0..5)
            .map(|i| m.get(i, gold[i]) - log_sum_exp(m.row(i).iter().copied()))
            .sum();
        let got = crf_log_likelihood(&m, &t, &gold);
        assert!((got - expected).abs() < 1e-9);
    }

    #[test]
    fn crf_gradients_match_finite_differences() {
        let mut r = rng(9);
        let m0 = random_tensor(5, 3, &mut r);
        let t0 = random_tensor(4, 3, &mut r);
        let gold = [0usize, 2, 1, 0, 2];

        let mut tape = Tape::new();
        let m = tape.leaf(m0.clone(), true);
        let t = tape.leaf(t0.clone(), true);
        let ll = crf_log_likelihood_on(&mut tape, m, t, &gold);
        let loss = tape.scale(ll, -1.0);
        let grads = tape.backward(loss);
        let gm = grads.get(m).unwrap().clone();
        let gt = grads.get(t).unwrap().clone();

        let eps = 1e-6;
        let check = |tensor: &Tensor, which: usize, analytic: &Tensor| {
            for i in 0..tensor.rows {
                for j in 0..tensor.cols {
                    let mut plus = tensor.clone();
                    plus.set(i, j, tensor.get(i, j) + eps);
                    let mut minus = tensor.clone();
                    minus.set(i, j, tensor.get(i, j) - eps);
                    let (fp, fm) = if which == 0 {
                        (
                            -crf_log_likelihood(&plus, &t0, &gold),
                            -crf_log_likelihood(&minus, &t0, &gold),
                        )
                    } else {
                        (
                            -crf_log_likelihood(&m0, &plus, &gold),
                            -crf_log_likelihood(&m0, &minus, &gold),
                        )
                    };
                    let numeric = (fp - fm) / (2.0 * eps);
                    let a = analytic.get(i, j);
                    let denom = a.abs().max(numeric.abs()).max(1e-3);
                    assert!(
                        ((a - numeric) / denom).abs() < 1e-4,
                        "tensor {which} ({i},{j}): {a} vs {numeric}"
                    );
                }
            }
        };
        check(&m0, 0, &gm);
        check(&t0, 1, &gt);
    }

    #[test]
    fn viterbi_single_label() {
        let m = random_tensor(4, 1, &mut rng(10));
        let t = random_tensor(2, 1, &mut rng(11));
        assert_eq!(viterbi(&m, &t).0, vec![0, 0, 0, 0]);
    }

    #[test]
    fn viterbi_matches_enumeration() {
        for (n, labels, seed) in [(4, 3, 12u64), (5, 4, 13), (6, 2, 14)] {
            let mut r = rng(seed);
            let m = random_tensor(n, labels, &mut r);
            let t = random_tensor(labels + 1, labels, &mut r);
            let paths = all_paths(n, labels);
            let mut best = &paths[0];
            let mut best_score = path_score(&m, &t, best);
            for p in &paths[1..] {
                let s = path_score(&m, &t, p);
                if s > best_score {
                    best_score = s;
                    best = p;
                }
            }
            let (path, score) = viterbi(&m, &t);
            assert!((score - best_score).abs() < 1e-9);
            assert_eq!(&path, best);
        }
    }

    #[test]
    fn viterbi_never_scores_below_any_path() {
        let mut r = rng(15);
        let m = random_tensor(5, 3, &mut r);
        let t = random_tensor(4, 3, &mut r);
        let (_, score) = viterbi(&m, &t);
        for p in all_paths(5, 3) {
            assert!(score >= path_score(&m, &t, &p) - 1e-12);
        }
    }

    fn flat_dataset(seed: u64, sentences: usize) -> Dataset {
        crate::synth::generate(&crate::synth::SynthConfig {
            sentences,
            vocab_size: 30,
            families: vec![crate::synth::PatternFamily::Flat],
            seed,
        })
        .unwrap()
    }

    fn baseline_setup(data: &Dataset, crf: bool, seed: u64) -> (BaselineModel, BioPrepared) {
        let vocab =
            crate::tokenizer::passthrough_vocab(data.sentences.iter().flat_map(|s| s.words.iter()))
                .unwrap();
        let prepared = prepare_bio(data, &vocab).unwrap();
        let config = BaselineConfig {
            d: 16,
            enc_layers: 1,
            heads: 2,
            ffn_size: 32,
            vocab_size: vocab.pieces.len(),
            dropout: 0.0,
            max_positions: 32,
            crf,
        };
        let model = BaselineModel::new(config, prepared.labels.clone(), seed).unwrap();
        (model, prepared)
    }

    #[test]
    fn nested_data_is_rejected() {
        let data = crate::synth::generate(&crate::synth::SynthConfig {
            sentences: 8,
            vocab_size: 30,
            families: vec![crate::synth::PatternFamily::Nested],
            seed: 1,
        })
        .unwrap();
        let vocab =
            crate::tokenizer::passthrough_vocab(data.sentences.iter().flat_map(|s| s.words.iter()))
                .unwrap();
        assert!(matches!(
            prepare_bio(&data, &vocab),
            Err(BaselineError::NotBio(_))
        ));
    }

    #[test]
    fn tagger_overfits_flat_sentences() {
        let data = flat_dataset(21, 8);
        let (model, prepared) = baseline_setup(&data, false, 22);
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 4,
            lr: 3e-3,
            warmup: 0.1,
            scheme: Scheme::Word,
            seed: 23,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 25,
        };
        let out = train_baseline(model, &prepared, Some(&prepared), &cfg).unwrap();
        let prf = evaluate_dev(&out.model, &prepared).unwrap();
        assert!(prf.f1 >= 0.99, "tagger failed to memorize: F1 {}", prf.f1);
    }

    #[test]
    fn crf_training_reduces_loss_and_stays_deterministic() {
        let data = flat_dataset(31, 6);
        let (model, prepared) = baseline_setup(&data, true, 32);
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 3,
            lr: 2e-3,
            warmup: 0.2,
            scheme: Scheme::Word,
            seed: 33,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 8,
        };
        let a = train_baseline(model.clone(), &prepared, None, &cfg).unwrap();
        let b = train_baseline(model, &prepared, None, &cfg).unwrap();
        assert!(a.log.last().unwrap().mean_loss < a.log[0].mean_loss);
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.mean_loss, rb.mean_loss);
        }
    }

    #[test]
    fn predictions_decode_to_entities() {
        let data = flat_dataset(41, 4);
        let (model, prepared) = baseline_setup(&data, true, 42);
        for s in &prepared.sentences {
            let labels = model.predict_labels(&s.sent).unwrap();
            assert_eq!(labels.len(), s.sent.words.len());
            // decoding never panics and yields structurally valid entities
            let _ = model.predict_entities(&s.sent).unwrap();
        }
    }
}
