//! Network building blocks on top of the tape: a named parameter store,
//! affine layers, multi-head attention, feed-forward blocks, and post-norm
//! encoder/decoder layers.
//!
//! Layers do not own tensors; they hold indexes into a [`ParamStore`]. Each
//! forward pass registers every parameter as a tape leaf (in store order)
//! and layers look their nodes up through that mapping, so one store drives
//! both training (leaves with gradient) and inference (leaves without).

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand_chacha::ChaCha20Rng;
use std::collections::HashMap;

/// Init scale for embeddings and weight matrices.
pub const INIT_STD: f64 = 0.02;

/// Additive mask value for disallowed attention positions. Large enough to
/// underflow to exactly zero probability after softmax.
pub const MASK_NEG: f64 = -1e30;

const LN_EPS: f64 = 1e-5;

/// Named dense parameters in fixed insertion order. Order is construction
/// order, so a given architecture always enumerates (and initializes)
/// parameters identically.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id_of(name).map(|id| self.tensor(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Registers every parameter as a tape leaf, in store order. The
    /// returned vector maps parameter id to node id.
    pub fn leaves(&self, tape: &mut Tape, needs_grad: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), needs_grad))
            .collect()
    }
}

/// Forward mode: evaluation is deterministic; training may carry an active
/// dropout rate and its random stream.
pub enum Mode<'r> {
    Eval,
    Train {
        dropout: f64,
        rng: &'r mut ChaCha20Rng,
    },
}

/// Inverted dropout: in training mode keeps each element with probability
/// `1 - rate`, scaling survivors by `1 / (1 - rate)`. Identity in eval mode
/// or at rate zero.
pub fn apply_dropout(tape: &mut Tape, x: NodeId, mode: &mut Mode) -> NodeId {
    match mode {
        Mode::Train { dropout, rng } if *dropout > 0.0 => {
            use rand::Rng;
            let (rows, cols) = tape.value(x).shape();
            let keep = 1.0 - *dropout;
            let inv = 1.0 / keep;
            let data = (0..rows * cols)
                .map(|_| if rng.gen::<f64>() < keep { inv } else { 0.0 })
                .collect();
            tape.mul_const(x, Tensor::from_data(rows, cols, data))
        }
        _ => x,
    }
}

/// `x · W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim_in: usize,
        dim_out: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Tensor::randn(dim_in, dim_out, INIT_STD, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, dim_out));
        Self { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, leaves: &[NodeId], x: NodeId) -> NodeId {
        let h = tape.matmul(x, leaves[self.w]);
        tape.add_bias_row(h, leaves[self.b])
    }
}

/// Learned gain and bias for row-wise layer normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.g"), Tensor::filled(1, dim, 1.0));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(1, dim));
        Self { gain, bias }
    }

    pub fn apply(&self, tape: &mut Tape, leaves: &[NodeId], x: NodeId) -> NodeId {
        tape.layer_norm(x, leaves[self.gain], leaves[self.bias], LN_EPS)
    }
}

/// Multi-head scaled dot-product attention. Queries come from `xq`, keys and
/// values from `xkv`; an optional additive mask is applied to the score
/// matrix of every head.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    head_dim: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        assert!(
            heads > 0 && d.is_multiple_of(heads),
            "d must divide into heads"
        );
        Self {
            wq: Linear::new(store, &format!("{name}.wq"), d, d, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d, d, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d, d, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d, d, rng),
            heads,
            head_dim: d / heads,
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        leaves: &[NodeId],
        xq: NodeId,
        xkv: NodeId,
        mask: Option<&Tensor>,
    ) -> NodeId {
        let q = self.wq.apply(tape, leaves, xq);
        let k = self.wk.apply(tape, leaves, xkv);
        let v = self.wv.apply(tape, leaves, xkv);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = tape.slice_cols(q, start, self.head_dim);
            let kh = tape.slice_cols(k, start, self.head_dim);
            let vh = tape.slice_cols(v, start, self.head_dim);
            let mut scores = tape.matmul_nt(qh, kh);
            scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add_const(scores, m);
            }
            let weights = tape.softmax_rows(scores);
            outputs.push(tape.matmul(weights, vh));
        }
        let cat = tape.concat_cols(&outputs);
        self.wo.apply(tape, leaves, cat)
    }
}

/// Strictly lower-triangular-pass mask: position `i` may attend `j ≤ i`.
pub fn causal_mask(m: usize) -> Tensor {
    let mut mask = Tensor::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            mask.set(i, j, MASK_NEG);
        }
    }
    mask
}

/// Two affine maps with a rectifier between.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        Self {
            lin1: Linear::new(store, &format!("{name}.w1"), d, hidden, rng),
            lin2: Linear::new(store, &format!("{name}.w2"), hidden, d, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, leaves: &[NodeId], x: NodeId) -> NodeId {
        let h = self.lin1.apply(tape, leaves, x);
        let h = tape.relu(h);
        self.lin2.apply(tape, leaves, h)
    }
}

/// Post-norm encoder layer: `LN(x + Attn(x))`, then `LN(h + FFN(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    attn: Attention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_size: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        Self {
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_size, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
        }
    }

    pub fn apply(&self, tape: &mut Tape, leaves: &[NodeId], x: NodeId, mode: &mut Mode) -> NodeId {
        let a = self.attn.apply(tape, leaves, x, x, None);
        let a = apply_dropout(tape, a, mode);
        let r = tape.add(x, a);
        let h = self.ln1.apply(tape, leaves, r);
        let f = self.ffn.apply(tape, leaves, h);
        let f = apply_dropout(tape, f, mode);
        let r2 = tape.add(h, f);
        self.ln2.apply(tape, leaves, r2)
    }
}

/// Post-norm decoder layer: causal self-attention, cross-attention over the
/// encoder states, then the feed-forward block, each behind a residual and
/// a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    self_attn: Attention,
    ln1: LayerNorm,
    cross_attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_size: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        Self {
            self_attn: Attention::new(store, &format!("{name}.self"), d, heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            cross_attn: Attention::new(store, &format!("{name}.cross"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_size, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        leaves: &[NodeId],
        x: NodeId,
        enc: NodeId,
        mask: &Tensor,
        mode: &mut Mode,
    ) -> NodeId {
        let a = self.self_attn.apply(tape, leaves, x, x, Some(mask));
        let a = apply_dropout(tape, a, mode);
        let r = tape.add(x, a);
        let h = self.ln1.apply(tape, leaves, r);
        let c = self.cross_attn.apply(tape, leaves, h, enc, None);
        let c = apply_dropout(tape, c, mode);
        let r2 = tape.add(h, c);
        let h2 = self.ln2.apply(tape, leaves, r2);
        let f = self.ffn.apply(tape, leaves, h2);
        let f = apply_dropout(tape, f, mode);
        let r3 = tape.add(h2, f);
        self.ln3.apply(tape, leaves, r3)
    }
}
