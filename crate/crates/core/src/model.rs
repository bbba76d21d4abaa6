//! Toy transformer encoder-decoder feeding the copy layer.
//!
//! The network itself is deliberately conventional (pre-norm blocks,
//! sinusoidal positions, scaled dot-product attention). What matters here is
//! the seam: encoder and decoder run on cutoff-masked ids only, while the
//! final decoder layer's raw cross-attention Q/K/V and the unmasked source
//! ids are handed to the copy layer, which owns every path to a KB element.
//!
//! Training builds one graph per sequence and accumulates gradients over the
//! batch — at desk scale this is both faster and far smaller than padded
//! batch tensors, and it keeps every result independent of batch composition.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{
    read_checkpoint, write_checkpoint, Adam, Array, AutodiffError, Graph, NodeId,
};
use crate::copy;
use crate::vocab::{mask_above_cutoff, BOS, EOS, PAD, UNK};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("id {id} at or above cutoff {cutoff} reached the network; masking must happen first")]
    UnmaskedId { id: usize, cutoff: usize },
    #[error("decoder prefix is empty")]
    EmptyPrefix,
    #[error("sequence length {len} exceeds maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Hyperparameters. The default is the desk-scale profile; `paper_profile`
/// mirrors the published table for completeness.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            model_dim: 64,
            heads: 4,
            ffn_dim: 128,
            dropout: 0.1,
            learning_rate: 5e-4,
            batch_size: 32,
            max_len: 64,
        }
    }
}

impl ModelConfig {
    /// The published full-scale hyperparameters. Far too large for CPU tests;
    /// exposed behind the CLI's `--paper-profile` flag.
    pub fn paper_profile() -> Self {
        ModelConfig {
            layers: 6,
            model_dim: 1024,
            heads: 8,
            ffn_dim: 2048,
            dropout: 0.5,
            learning_rate: 5e-4,
            batch_size: 128,
            max_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.model_dim == 0
            || self.heads == 0
            || self.ffn_dim == 0
            || self.batch_size == 0
            || self.max_len == 0
        {
            return Err(ModelError::BadConfig("all dimensions must be positive".to_string()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!("dropout {} not in [0,1)", self.dropout)));
        }
        if self.learning_rate <= 0.0 {
            return Err(ModelError::BadConfig("learning rate must be positive".to_string()));
        }
        Ok(())
    }
}

/// Encoded source sequence: hidden states plus the unmasked ids the copy
/// layer scatters attention onto.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub states: Array,
    pub source_ids: Vec<usize>,
}

/// Last-position decoder output: generation logits over the base target
/// vocabulary and the final cross-attention tensors, per head.
#[derive(Debug, Clone)]
pub struct DecoderStepOutput {
    pub base_logits: Array,
    pub q_heads: Vec<Array>,
    pub k_heads: Vec<Array>,
    pub v: Array,
}

/// Result of greedy decoding; ids may lie at or above the cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub ids: Vec<usize>,
    /// True when `max_len` stopped the decoder before it emitted `<eos>`.
    pub truncated: bool,
}

// ---- parameter bookkeeping ------------------------------------------------

#[derive(Clone, Copy)]
struct AttnParams {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Clone, Copy)]
struct FfnParams {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy)]
struct NormParams {
    gamma: usize,
    beta: usize,
}

#[derive(Clone)]
struct EncLayer {
    ln1: NormParams,
    attn: AttnParams,
    ln2: NormParams,
    ffn: FfnParams,
}

#[derive(Clone)]
struct DecLayer {
    ln1: NormParams,
    self_attn: AttnParams,
    ln2: NormParams,
    cross_attn: AttnParams,
    ln3: NormParams,
    ffn: FfnParams,
}

#[derive(Clone)]
struct Layout {
    src_embed: usize,
    tgt_embed: usize,
    enc_layers: Vec<EncLayer>,
    enc_ln_out: NormParams,
    dec_layers: Vec<DecLayer>,
    dec_ln_out: NormParams,
    out_w: usize,
    out_b: usize,
    copy_w: Option<usize>,
}

struct ParamBuilder {
    names: Vec<String>,
    arrays: Vec<Array>,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let scale = (6.0 / (rows + cols) as f64).sqrt();
        self.arrays.push(Array::uniform(&[rows, cols], -scale, scale, &mut self.rng));
        self.names.push(name);
        self.arrays.len() - 1
    }

    fn vector(&mut self, name: String, len: usize, value: f64) -> usize {
        self.arrays.push(Array::full(&[len], value));
        self.names.push(name);
        self.arrays.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnParams {
        AttnParams {
            wq: self.matrix(format!("{prefix}.wq"), d, d),
            wk: self.matrix(format!("{prefix}.wk"), d, d),
            wv: self.matrix(format!("{prefix}.wv"), d, d),
            wo: self.matrix(format!("{prefix}.wo"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> FfnParams {
        FfnParams {
            w1: self.matrix(format!("{prefix}.w1"), d, hidden),
            b1: self.vector(format!("{prefix}.b1"), hidden, 0.0),
            w2: self.matrix(format!("{prefix}.w2"), hidden, d),
            b2: self.vector(format!("{prefix}.b2"), d, 0.0),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormParams {
        NormParams {
            gamma: self.vector(format!("{prefix}.gamma"), d, 1.0),
            beta: self.vector(format!("{prefix}.beta"), d, 0.0),
        }
    }
}

/// Inverted dropout over graph nodes; `None` rng means evaluation mode
/// (identity).
struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Dropout<'_> {
    fn eval() -> Dropout<'static> {
        Dropout { rate: 0.0, rng: None }
    }

    fn apply(&mut self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let Some(rng) = self.rng.as_deref_mut() else { return Ok(x) };
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = g.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = g.leaf(Array::new(shape, data).expect("mask shape"))?;
        Ok(g.mul(x, mask)?)
    }
}

// ---- the model -------------------------------------------------------------

pub struct TransformerModel {
    pub config: ModelConfig,
    /// Size of the base vocabularies; embeddings and output logits cover
    /// exactly the ids below this.
    pub cutoff: usize,
    pub use_copy: bool,
    params: Vec<Array>,
    names: Vec<String>,
    layout: Layout,
}

struct CrossAttention {
    q_heads: Vec<NodeId>,
    k_heads: Vec<NodeId>,
    v: NodeId,
}

impl TransformerModel {
    pub fn new(config: ModelConfig, cutoff: usize, use_copy: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        if cutoff == 0 {
            return Err(ModelError::BadConfig("cutoff must be positive".to_string()));
        }
        let d = config.model_dim;
        let mut b = ParamBuilder {
            names: Vec::new(),
            arrays: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let src_embed = b.matrix("src_embed".to_string(), cutoff, d);
        let tgt_embed = b.matrix("tgt_embed".to_string(), cutoff, d);
        let enc_layers: Vec<EncLayer> = (0..config.layers)
            .map(|l| EncLayer {
                ln1: b.norm(&format!("enc.{l}.ln1"), d),
                attn: b.attn(&format!("enc.{l}.attn"), d),
                ln2: b.norm(&format!("enc.{l}.ln2"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, config.ffn_dim),
            })
            .collect();
        let enc_ln_out = b.norm("enc.ln_out", d);
        let dec_layers: Vec<DecLayer> = (0..config.layers)
            .map(|l| DecLayer {
                ln1: b.norm(&format!("dec.{l}.ln1"), d),
                self_attn: b.attn(&format!("dec.{l}.self_attn"), d),
                ln2: b.norm(&format!("dec.{l}.ln2"), d),
                cross_attn: b.attn(&format!("dec.{l}.cross_attn"), d),
                ln3: b.norm(&format!("dec.{l}.ln3"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, config.ffn_dim),
            })
            .collect();
        let dec_ln_out = b.norm("dec.ln_out", d);
        let out_w = b.matrix("out.w".to_string(), d, cutoff);
        let out_b = b.vector("out.b".to_string(), cutoff, 0.0);
        let copy_w = use_copy.then(|| b.matrix("copy.w".to_string(), d, 1));

        Ok(TransformerModel {
            config,
            cutoff,
            use_copy,
            params: b.arrays,
            names: b.names,
            layout: Layout {
                src_embed,
                tgt_embed,
                enc_layers,
                enc_ln_out,
                dec_layers,
                dec_ln_out,
                out_w,
                out_b,
                copy_w,
            },
        })
    }

    pub fn param_values(&self) -> &[Array] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Array::len).sum()
    }

    fn leaf_params(&self, g: &mut Graph) -> Result<Vec<NodeId>> {
        self.params
            .iter()
            .map(|p| g.leaf(p.clone()).map_err(ModelError::from))
            .collect()
    }

    fn positional(&self, len: usize) -> Array {
        let d = self.config.model_dim;
        let mut data = vec![0.0; len * d];
        for p in 0..len {
            for i in 0..d / 2 {
                let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
                data[p * d + 2 * i] = (p as f64 * rate).sin();
                data[p * d + 2 * i + 1] = (p as f64 * rate).cos();
            }
        }
        Array::new(vec![len, d], data).expect("positional shape")
    }

    fn check_masked(&self, ids: &[usize]) -> Result<()> {
        for &id in ids {
            if id >= self.cutoff {
                return Err(ModelError::UnmaskedId { id, cutoff: self.cutoff });
            }
        }
        Ok(())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(ModelError::TooLong { len, max: self.config.max_len });
        }
        Ok(())
    }

    fn embed_sequence(
        &self,
        g: &mut Graph,
        p: &[NodeId],
        table: usize,
        ids: &[usize],
        drop: &mut Dropout,
    ) -> Result<NodeId> {
        let d = self.config.model_dim;
        let tok = g.embedding(p[table], ids)?;
        let scaled = g.affine(tok, (d as f64).sqrt(), 0.0)?;
        let pos = g.leaf(self.positional(ids.len()))?;
        let x = g.add(scaled, pos)?;
        drop.apply(g, x)
    }

    /// Multi-head scaled dot-product attention; returns the projected output
    /// and, on request, the raw per-head Q/K and concatenated V for the copy
    /// layer.
    fn attention(
        &self,
        g: &mut Graph,
        p: &[NodeId],
        ap: AttnParams,
        x_q: NodeId,
        x_kv: NodeId,
        causal: bool,
        capture: bool,
    ) -> Result<(NodeId, Option<CrossAttention>)> {
        let d = self.config.model_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let q = g.matmul(x_q, p[ap.wq])?;
        let k = g.matmul(x_kv, p[ap.wk])?;
        let v = g.matmul(x_kv, p[ap.wv])?;
        let t_len = g.value(q).shape()[0];

        let mask = if causal {
            let mut m = Array::zeros(&[t_len, t_len]);
            for i in 0..t_len {
                for j in i + 1..t_len {
                    m.set2(i, j, -1e30);
                }
            }
            Some(g.leaf(m)?)
        } else {
            None
        };

        let mut q_heads = Vec::with_capacity(heads);
        let mut k_heads = Vec::with_capacity(heads);
        let mut ctx: Option<NodeId> = None;
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            q_heads.push(qh);
            k_heads.push(kh);
            let kt = g.transpose(kh)?;
            let raw = g.matmul(qh, kt)?;
            let mut scores = g.affine(raw, 1.0 / (dh as f64).sqrt(), 0.0)?;
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let weights = g.softmax(scores)?;
            let ctx_h = g.matmul(weights, vh)?;
            ctx = Some(match ctx {
                None => ctx_h,
                Some(prev) => g.concat_cols(prev, ctx_h)?,
            });
        }
        let out = g.matmul(ctx.unwrap(), p[ap.wo])?;
        let captured = capture.then_some(CrossAttention { q_heads, k_heads, v });
        Ok((out, captured))
    }

    fn ffn(&self, g: &mut Graph, p: &[NodeId], fp: FfnParams, x: NodeId) -> Result<NodeId> {
        let h = g.matmul(x, p[fp.w1])?;
        let h = g.add_bias(h, p[fp.b1])?;
        let h = g.relu(h)?;
        let o = g.matmul(h, p[fp.w2])?;
        Ok(g.add_bias(o, p[fp.b2])?)
    }

    fn norm(&self, g: &mut Graph, p: &[NodeId], np: NormParams, x: NodeId) -> Result<NodeId> {
        Ok(g.layer_norm(x, p[np.gamma], p[np.beta])?)
    }

    fn build_encoder(
        &self,
        g: &mut Graph,
        p: &[NodeId],
        masked_src: &[usize],
        drop: &mut Dropout,
    ) -> Result<NodeId> {
        self.check_masked(masked_src)?;
        self.check_len(masked_src.len())?;
        if masked_src.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        let mut x = self.embed_sequence(g, p, self.layout.src_embed, masked_src, drop)?;
        for layer in &self.layout.enc_layers {
            let normed = self.norm(g, p, layer.ln1, x)?;
            let (attn, _) = self.attention(g, p, layer.attn, normed, normed, false, false)?;
            let attn = drop.apply(g, attn)?;
            x = g.add(x, attn)?;
            let normed = self.norm(g, p, layer.ln2, x)?;
            let f = self.ffn(g, p, layer.ffn, normed)?;
            let f = drop.apply(g, f)?;
            x = g.add(x, f)?;
        }
        self.norm(g, p, self.layout.enc_ln_out, x)
    }

    fn build_decoder(
        &self,
        g: &mut Graph,
        p: &[NodeId],
        masked_prefix: &[usize],
        enc_states: NodeId,
        drop: &mut Dropout,
    ) -> Result<(NodeId, CrossAttention)> {
        if masked_prefix.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        self.check_masked(masked_prefix)?;
        self.check_len(masked_prefix.len())?;
        let mut x = self.embed_sequence(g, p, self.layout.tgt_embed, masked_prefix, drop)?;
        let mut cross = None;
        let last = self.layout.dec_layers.len() - 1;
        for (l, layer) in self.layout.dec_layers.iter().enumerate() {
            let normed = self.norm(g, p, layer.ln1, x)?;
            let (attn, _) = self.attention(g, p, layer.self_attn, normed, normed, true, false)?;
            let attn = drop.apply(g, attn)?;
            x = g.add(x, attn)?;
            let normed = self.norm(g, p, layer.ln2, x)?;
            let (attn, captured) =
                self.attention(g, p, layer.cross_attn, normed, enc_states, false, l == last)?;
            if let Some(c) = captured {
                cross = Some(c);
            }
            let attn = drop.apply(g, attn)?;
            x = g.add(x, attn)?;
            let normed = self.norm(g, p, layer.ln3, x)?;
            let f = self.ffn(g, p, layer.ffn, normed)?;
            let f = drop.apply(g, f)?;
            x = g.add(x, f)?;
        }
        let x = self.norm(g, p, self.layout.dec_ln_out, x)?;
        let logits = g.matmul(x, p[self.layout.out_w])?;
        let logits = g.add_bias(logits, p[self.layout.out_b])?;
        Ok((logits, cross.expect("at least one decoder layer")))
    }

    /// Compacts a source sequence's KB ids: returns the distinct ids ≥ cutoff
    /// in first-occurrence order and the per-position scatter ids where each
    /// KB id is replaced by `cutoff + its index`.
    fn source_extension(&self, src_unmasked: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut ext: Vec<usize> = Vec::new();
        let scatter = src_unmasked
            .iter()
            .map(|&id| {
                if id < self.cutoff {
                    id
                } else {
                    let idx = ext.iter().position(|&e| e == id).unwrap_or_else(|| {
                        ext.push(id);
                        ext.len() - 1
                    });
                    self.cutoff + idx
                }
            })
            .collect();
        (ext, scatter)
    }

    /// Builds the training loss for one (source, target) pair from
    /// already-created parameter leaves — the shape `grad_check` wants.
    /// Target ids must end with `<eos>`; `<pad>` targets are ignored.
    pub fn build_sequence_loss(
        &self,
        g: &mut Graph,
        p: &[NodeId],
        src_unmasked: &[usize],
        tgt_unmasked: &[usize],
    ) -> Result<NodeId> {
        self.build_sequence_loss_dropout(g, p, src_unmasked, tgt_unmasked, &mut Dropout::eval())
    }

    fn build_sequence_loss_dropout(
        &self,
        g: &mut Graph,
        p: &[NodeId],
        src_unmasked: &[usize],
        tgt_unmasked: &[usize],
        drop: &mut Dropout,
    ) -> Result<NodeId> {
        let masked_src = mask_above_cutoff(src_unmasked, self.cutoff);
        let enc = self.build_encoder(g, p, &masked_src, drop)?;

        // Teacher forcing: <bos> plus the masked target shifted right by one;
        // the final target token (<eos>) is predicted, never fed.
        let masked_tgt = mask_above_cutoff(tgt_unmasked, self.cutoff);
        let mut dec_input = Vec::with_capacity(tgt_unmasked.len());
        dec_input.push(BOS);
        dec_input.extend_from_slice(&masked_tgt[..masked_tgt.len().saturating_sub(1)]);
        let (logits, cross) = self.build_decoder(g, p, &dec_input, enc, drop)?;

        if self.use_copy {
            let (ext, scatter_ids) = self.source_extension(src_unmasked);
            let extended_size = self.cutoff + ext.len();
            let targets: Vec<usize> = tgt_unmasked
                .iter()
                .map(|&id| {
                    if id < self.cutoff {
                        id
                    } else {
                        ext.iter()
                            .position(|&e| e == id)
                            .map(|i| self.cutoff + i)
                            .unwrap_or(UNK)
                    }
                })
                .collect();
            let w = p[self.layout.copy_w.expect("copy model has W")];
            let out = copy::copy_forward(
                g,
                &cross.q_heads,
                &cross.k_heads,
                cross.v,
                w,
                logits,
                &scatter_ids,
                self.cutoff,
                extended_size,
            )?;
            Ok(copy::copy_nll(g, out.p_final, &targets, Some(PAD))?)
        } else {
            let logp = g.log_softmax(logits)?;
            Ok(g.cross_entropy(logp, tgt_unmasked, Some(PAD))?)
        }
    }

    /// Mean training loss over a batch, without updating parameters.
    /// `dropout_rng: None` evaluates deterministically.
    pub fn forward_train(
        &self,
        batch: &[(Vec<usize>, Vec<usize>)],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(ModelError::BadConfig("empty batch".to_string()));
        }
        let mut total = 0.0;
        for (src, tgt) in batch {
            let mut g = Graph::new();
            let p = self.leaf_params(&mut g)?;
            let mut drop = Dropout {
                rate: self.config.dropout,
                rng: dropout_rng.as_deref_mut(),
            };
            let loss = self.build_sequence_loss_dropout(&mut g, &p, src, tgt, &mut drop)?;
            total += g.value(loss).data()[0];
        }
        Ok(total / batch.len() as f64)
    }

    /// One optimizer step over a batch: builds one graph per sequence,
    /// averages the gradients, applies Adam. Returns the mean loss.
    pub fn train_batch(
        &mut self,
        batch: &[(Vec<usize>, Vec<usize>)],
        adam: &mut Adam,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(ModelError::BadConfig("empty batch".to_string()));
        }
        let mut grad_sum: Vec<Array> = self.params.iter().map(|a| Array::zeros(a.shape())).collect();
        let mut total = 0.0;
        for (src, tgt) in batch {
            let mut g = Graph::new();
            let p = self.leaf_params(&mut g)?;
            let mut drop = Dropout {
                rate: self.config.dropout,
                rng: dropout_rng.as_deref_mut(),
            };
            let loss = self.build_sequence_loss_dropout(&mut g, &p, src, tgt, &mut drop)?;
            total += g.value(loss).data()[0];
            let grads = g.backward(loss)?;
            for (i, &pid) in p.iter().enumerate() {
                if let Some(grad) = grads.get(pid) {
                    for (s, v) in grad_sum[i].data_mut().iter_mut().zip(grad.data()) {
                        *s += v;
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for grad in &mut grad_sum {
            for v in grad.data_mut() {
                *v *= inv;
            }
        }
        adam.step(&mut self.params, &grad_sum)?;
        Ok(total * inv)
    }

    /// Full training loop: shuffles per epoch, steps per batch, reports the
    /// mean epoch loss through `progress`. Everything is derived from `seed`,
    /// so equal inputs give bit-equal parameters.
    pub fn train(
        &mut self,
        pairs: &[(Vec<usize>, Vec<usize>)],
        epochs: usize,
        seed: u64,
        mut progress: impl FnMut(usize, f64),
    ) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Err(ModelError::BadConfig("empty training set".to_string()));
        }
        let mut adam = Adam::new(self.config.learning_rate);
        let mut losses = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
            for i in (1..order.len()).rev() {
                let j = shuffle_rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
                let batch: Vec<(Vec<usize>, Vec<usize>)> =
                    chunk.iter().map(|&i| pairs[i].clone()).collect();
                let mut dropout_rng = ChaCha8Rng::seed_from_u64(
                    seed ^ 0x5f5f_5f5f ^ ((epoch as u64) << 20) ^ b as u64,
                );
                epoch_loss += self.train_batch(&batch, &mut adam, Some(&mut dropout_rng))?;
                batches += 1;
            }
            let mean = epoch_loss / batches as f64;
            progress(epoch, mean);
            losses.push(mean);
        }
        Ok(losses)
    }

    /// Evaluation-mode encoding of an already-masked source.
    pub fn encode(&self, masked_src: &[usize]) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let p = self.leaf_params(&mut g)?;
        let states = self.build_encoder(&mut g, &p, masked_src, &mut Dropout::eval())?;
        Ok(EncoderOutput {
            states: g.value(states).clone(),
            source_ids: masked_src.to_vec(),
        })
    }

    /// One evaluation decode step over a masked prefix; returns the
    /// last-position logits and the final cross-attention tensors.
    pub fn decode_step(
        &self,
        masked_prefix: &[usize],
        enc: &EncoderOutput,
    ) -> Result<DecoderStepOutput> {
        let mut g = Graph::new();
        let p = self.leaf_params(&mut g)?;
        let enc_states = g.leaf(enc.states.clone())?;
        let (logits, cross) =
            self.build_decoder(&mut g, &p, masked_prefix, enc_states, &mut Dropout::eval())?;
        let last = masked_prefix.len() - 1;
        let row = g.embedding(logits, &[last])?;
        let q_heads = cross
            .q_heads
            .iter()
            .map(|&q| g.embedding(q, &[last]).map(|n| g.value(n).clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let k_heads = cross.k_heads.iter().map(|&k| g.value(k).clone()).collect();
        Ok(DecoderStepOutput {
            base_logits: g.value(row).clone(),
            q_heads,
            k_heads,
            v: g.value(cross.v).clone(),
        })
    }

    /// Greedy decoding. `src_unmasked` carries the true (possibly extended)
    /// ids; the network sees their masked form, the copy layer the real ones.
    /// Decoding stops at `<eos>` or after `max_len` emitted tokens.
    pub fn greedy_decode(&self, src_unmasked: &[usize], max_len: usize) -> Result<DecodeResult> {
        let masked_src = mask_above_cutoff(src_unmasked, self.cutoff);
        let (ext, scatter_ids) = self.source_extension(src_unmasked);
        let extended_size = self.cutoff + ext.len();

        let mut enc_graph = Graph::new();
        let p = self.leaf_params(&mut enc_graph)?;
        let enc_states =
            self.build_encoder(&mut enc_graph, &p, &masked_src, &mut Dropout::eval())?;
        let enc_states = enc_graph.value(enc_states).clone();

        let budget = max_len.min(self.config.max_len.saturating_sub(1));
        let mut out: Vec<usize> = Vec::new();
        let mut prefix: Vec<usize> = vec![BOS];
        loop {
            if out.len() >= budget {
                return Ok(DecodeResult { ids: out, truncated: true });
            }
            let mut g = Graph::new();
            let p = self.leaf_params(&mut g)?;
            let enc_node = g.leaf(enc_states.clone())?;
            let (logits, cross) =
                self.build_decoder(&mut g, &p, &prefix, enc_node, &mut Dropout::eval())?;
            let last = prefix.len() - 1;
            let logits_last = g.embedding(logits, &[last])?;

            let dist: Vec<f64> = if self.use_copy {
                let q_last: Vec<NodeId> = cross
                    .q_heads
                    .iter()
                    .map(|&q| g.embedding(q, &[last]))
                    .collect::<std::result::Result<_, _>>()?;
                let w = p[self.layout.copy_w.expect("copy model has W")];
                let step = copy::copy_forward(
                    &mut g,
                    &q_last,
                    &cross.k_heads,
                    cross.v,
                    w,
                    logits_last,
                    &scatter_ids,
                    self.cutoff,
                    extended_size,
                )?;
                g.value(step.p_final).data().to_vec()
            } else {
                let probs = g.softmax(logits_last)?;
                g.value(probs).data().to_vec()
            };

            // Deterministic argmax: first index wins ties.
            let mut best = 0usize;
            for (i, &v) in dist.iter().enumerate() {
                if v > dist[best] {
                    best = i;
                }
            }
            if best == EOS {
                return Ok(DecodeResult { ids: out, truncated: false });
            }
            // Map a compact extension pick back to the real vocabulary id.
            let real = if best >= self.cutoff { ext[best - self.cutoff] } else { best };
            out.push(real);
            prefix.push(if real >= self.cutoff { UNK } else { real });
        }
    }

    // ---- checkpointing ------------------------------------------------------

    const META_NAME: &'static str = "meta.config";

    fn meta_array(&self) -> Array {
        Array::new(
            vec![10],
            vec![
                self.config.layers as f64,
                self.config.model_dim as f64,
                self.config.heads as f64,
                self.config.ffn_dim as f64,
                self.config.dropout,
                self.config.learning_rate,
                self.config.batch_size as f64,
                self.config.max_len as f64,
                if self.use_copy { 1.0 } else { 0.0 },
                self.cutoff as f64,
            ],
        )
        .expect("meta shape")
    }

    /// Serializes config and parameters with the checkpoint layout.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut entries = vec![(Self::META_NAME.to_string(), self.meta_array())];
        for (name, array) in self.names.iter().zip(&self.params) {
            entries.push((name.clone(), array.clone()));
        }
        write_checkpoint(&entries)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let entries = read_checkpoint(bytes)?;
        let mut by_name: HashMap<String, Array> = entries.into_iter().collect();
        let meta = by_name
            .remove(Self::META_NAME)
            .ok_or_else(|| ModelError::Checkpoint("missing config entry".to_string()))?;
        if meta.len() != 10 {
            return Err(ModelError::Checkpoint("config entry has wrong size".to_string()));
        }
        let m = meta.data();
        let config = ModelConfig {
            layers: m[0] as usize,
            model_dim: m[1] as usize,
            heads: m[2] as usize,
            ffn_dim: m[3] as usize,
            dropout: m[4],
            learning_rate: m[5],
            batch_size: m[6] as usize,
            max_len: m[7] as usize,
        };
        let use_copy = m[8] != 0.0;
        let cutoff = m[9] as usize;
        let mut model = TransformerModel::new(config, cutoff, use_copy, 0)?;
        for (name, param) in model.names.iter().zip(model.params.iter_mut()) {
            let stored = by_name.remove(name).ok_or_else(|| {
                ModelError::Checkpoint(format!("missing parameter `{name}`"))
            })?;
            if stored.shape() != param.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter `{name}`: stored shape {:?}, expected {:?}",
                    stored.shape(),
                    param.shape()
                )));
            }
            *param = stored;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(ModelError::Checkpoint(format!("unknown parameter `{extra}`")));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            dropout: 0.0,
            learning_rate: 1e-3,
            batch_size: 4,
            max_len: 16,
        }
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = ModelConfig { model_dim: 10, heads: 4, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(ModelError::BadConfig(_))));
    }

    #[test]
    fn single_token_encode_has_one_state_row() {
        let model = TransformerModel::new(tiny_config(), 10, true, 1).unwrap();
        let enc = model.encode(&[5]).unwrap();
        assert_eq!(enc.states.shape(), &[1, 8]);
    }

    #[test]
    fn position_embeddings_make_order_matter() {
        let model = TransformerModel::new(tiny_config(), 10, true, 1).unwrap();
        let a = model.encode(&[4, 7]).unwrap();
        let b = model.encode(&[7, 4]).unwrap();
        assert_ne!(a.states.data(), b.states.data());
    }

    #[test]
    fn eval_encode_is_bit_identical() {
        let model = TransformerModel::new(tiny_config(), 10, true, 2).unwrap();
        let a = model.encode(&[1, 4, 7, 2]).unwrap();
        let b = model.encode(&[1, 4, 7, 2]).unwrap();
        assert_eq!(a.states.data(), b.states.data());
    }

    #[test]
    fn encoder_rejects_unmasked_ids() {
        let model = TransformerModel::new(tiny_config(), 10, true, 1).unwrap();
        let err = model.encode(&[3, 10]).unwrap_err();
        assert_eq!(err, ModelError::UnmaskedId { id: 10, cutoff: 10 });
    }

    #[test]
    fn bos_prefix_yields_base_logits_row() {
        let model = TransformerModel::new(tiny_config(), 10, true, 3).unwrap();
        let enc = model.encode(&[5, 6]).unwrap();
        let step = model.decode_step(&[BOS], &enc).unwrap();
        assert_eq!(step.base_logits.shape(), &[1, 10]);
        assert_eq!(step.q_heads.len(), 2);
        assert_eq!(step.q_heads[0].shape(), &[1, 4]);
        assert_eq!(step.k_heads[0].shape(), &[2, 4]);
        assert_eq!(step.v.shape(), &[2, 8]);
    }

    #[test]
    fn decode_rejects_empty_prefix() {
        let model = TransformerModel::new(tiny_config(), 10, true, 3).unwrap();
        let enc = model.encode(&[5]).unwrap();
        assert!(matches!(model.decode_step(&[], &enc), Err(ModelError::EmptyPrefix)));
    }

    #[test]
    fn generation_probabilities_normalize() {
        let model = TransformerModel::new(tiny_config(), 10, true, 4).unwrap();
        let enc = model.encode(&[5, 6, 7]).unwrap();
        let step = model.decode_step(&[BOS, 4], &enc).unwrap();
        let max = step
            .base_logits
            .data()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = step.base_logits.data().iter().map(|v| (v - max).exp()).sum();
        let norm: f64 = step
            .base_logits
            .data()
            .iter()
            .map(|v| (v - max).exp() / sum)
            .sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn future_tokens_cannot_influence_earlier_logits() {
        for layers in [1usize, 2] {
            let config = ModelConfig { layers, ..tiny_config() };
            let model = TransformerModel::new(config, 12, true, 7).unwrap();
            let enc = model.encode(&[5, 6, 8]).unwrap();
            // Perturb only positions ≥ 2: logits at positions 0 and 1 must
            // stay bit-identical, and later ones must move.
            let full_a = decode_logits(&model, &[BOS, 4, 5, 6], &enc);
            let full_b = decode_logits(&model, &[BOS, 4, 9, 7], &enc);
            for c in 0..12 {
                assert_eq!(full_a.at2(0, c), full_b.at2(0, c), "layers {layers}");
                assert_eq!(full_a.at2(1, c), full_b.at2(1, c), "layers {layers}");
            }
            assert_ne!(full_a.data(), full_b.data());
        }
    }

    fn decode_logits(model: &TransformerModel, prefix: &[usize], enc: &EncoderOutput) -> Array {
        let mut g = Graph::new();
        let p = model.leaf_params(&mut g).unwrap();
        let enc_node = g.leaf(enc.states.clone()).unwrap();
        let (logits, _) = model
            .build_decoder(&mut g, &p, prefix, enc_node, &mut Dropout::eval())
            .unwrap();
        g.value(logits).clone()
    }

    #[test]
    fn all_pad_target_is_a_degenerate_batch_error() {
        let model = TransformerModel::new(tiny_config(), 10, true, 5).unwrap();
        let batch = vec![(vec![5, 6], vec![PAD, PAD, PAD])];
        assert!(model.forward_train(&batch, None).is_err());
    }

    #[test]
    fn loss_is_finite_and_seed_reproducible() {
        let model = TransformerModel::new(tiny_config(), 10, true, 6).unwrap();
        let batch = vec![(vec![5, 6, 7], vec![4, 5, EOS]), (vec![8], vec![6, EOS])];
        let a = model.forward_train(&batch, None).unwrap();
        let b = model.forward_train(&batch, None).unwrap();
        assert!(a.is_finite());
        assert_eq!(a, b);
        let again = TransformerModel::new(tiny_config(), 10, true, 6).unwrap();
        assert_eq!(again.forward_train(&batch, None).unwrap(), a);
    }

    #[test]
    fn loss_decreases_on_a_small_corpus() {
        let mut model = TransformerModel::new(tiny_config(), 12, true, 8).unwrap();
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..10)
            .map(|i| {
                let a = 4 + (i % 6);
                let b = 4 + ((i * 3 + 1) % 6);
                (vec![a, b], vec![b, a, EOS])
            })
            .collect();
        let before = model.forward_train(&pairs, None).unwrap();
        let mut adam = Adam::new(model.config.learning_rate);
        for _ in 0..50 {
            model.train_batch(&pairs, &mut adam, None).unwrap();
        }
        let after = model.forward_train(&pairs, None).unwrap();
        assert!(
            after < before * 0.8,
            "loss went from {before} to {after}"
        );
    }

    #[test]
    fn overfit_reproduces_a_five_pair_grammar() {
        // Five pairs, each with one KB id (≥ cutoff) that must be copied.
        let cutoff = 12;
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = vec![
            (vec![4, 12, 5], vec![6, 12, EOS]),
            (vec![4, 13, 5], vec![6, 13, EOS]),
            (vec![7, 14, 5], vec![8, 14, EOS]),
            (vec![7, 15, 5], vec![8, 15, EOS]),
            (vec![4, 16, 9], vec![6, 16, EOS]),
        ];
        let config = ModelConfig {
            layers: 1,
            model_dim: 24,
            heads: 2,
            ffn_dim: 48,
            dropout: 0.0,
            learning_rate: 3e-3,
            batch_size: 5,
            max_len: 8,
        };
        let mut model = TransformerModel::new(config, cutoff, true, 11).unwrap();
        model.train(&pairs, 80, 11, |_, _| {}).unwrap();
        for (src, tgt) in &pairs {
            let got = model.greedy_decode(src, 8).unwrap();
            assert!(!got.truncated);
            assert_eq!(&got.ids, &tgt[..tgt.len() - 1], "source {src:?}");
        }
    }

    #[test]
    fn emitted_extension_ids_come_from_the_source() {
        for seed in 0..5u64 {
            let model = TransformerModel::new(tiny_config(), 10, true, seed).unwrap();
            let src = vec![4, 17, 5, 23];
            let out = model.greedy_decode(&src, 12).unwrap();
            for id in out.ids {
                if id >= 10 {
                    assert!(src.contains(&id), "emitted {id} not in source");
                }
            }
        }
    }

    #[test]
    fn decode_respects_max_len_one() {
        let model = TransformerModel::new(tiny_config(), 10, true, 13).unwrap();
        let out = model.greedy_decode(&[4, 5], 1).unwrap();
        assert!(out.ids.len() <= 1);
    }

    #[test]
    fn end_to_end_copy_loss_passes_grad_check() {
        let model = TransformerModel::new(tiny_config(), 10, true, 21).unwrap();
        let src = vec![4, 12, 6];
        let tgt = vec![5, 12, EOS];
        let err = grad_check(
            |g, p| {
                model
                    .build_sequence_loss(g, p, &src, &tgt)
                    .map_err(|e| match e {
                        ModelError::Autodiff(a) => a,
                        other => AutodiffError::BadArray(other.to_string()),
                    })
            },
            model.param_values(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn checkpoint_round_trips_and_preserves_behavior() {
        let mut model = TransformerModel::new(tiny_config(), 10, true, 30).unwrap();
        let pairs = vec![(vec![4, 5], vec![6, EOS])];
        model.train(&pairs, 3, 30, |_, _| {}).unwrap();
        let bytes = model.to_checkpoint_bytes();
        let back = TransformerModel::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.cutoff, model.cutoff);
        assert_eq!(back.use_copy, model.use_copy);
        assert_eq!(back.param_values(), model.param_values());
        let a = model.greedy_decode(&[4, 5], 6).unwrap();
        let b = back.greedy_decode(&[4, 5], 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_rejects_missing_parameter() {
        let model = TransformerModel::new(tiny_config(), 10, false, 1).unwrap();
        let bytes = model.to_checkpoint_bytes();
        let mut entries = read_checkpoint(&bytes).unwrap();
        entries.pop();
        let err = TransformerModel::from_checkpoint_bytes(&write_checkpoint(&entries));
        assert!(matches!(err, Err(ModelError::Checkpoint(_))));
    }

    #[test]
    fn sequence_longer_than_max_len_errors() {
        let model = TransformerModel::new(tiny_config(), 10, true, 1).unwrap();
        let long: Vec<usize> = vec![4; 17];
        assert!(matches!(model.encode(&long), Err(ModelError::TooLong { .. })));
    }
}
