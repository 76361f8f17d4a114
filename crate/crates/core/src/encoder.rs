//! Contextualized keyword encoder.
//!
//! Keyword tokens are embedded (plus a learned positional row), passed
//! through a stack of masked self-attention blocks, mean-pooled over the
//! non-PAD positions and refined by a small stack of fully connected layers.
//! The default block has no residual connections:
//! `F = FFN(LayerNorm(MaskAtten(Q, K, V)))`.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result, TensorError};
use crate::params::{param_group, Dense, NormParams};
use crate::tensor::{SeededRng, Tensor};
use crate::text::{EncodedSequence, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply<'g>(self, x: Var<'g>) -> Var<'g> {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gelu" => Some(Activation::Gelu),
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Mean over non-PAD positions.
    Mean,
    /// Output row of the last non-PAD position.
    Last,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_size: usize,
    pub hidden_size: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_inner_size: usize,
    pub max_keyword_len: usize,
    pub eps: f64,
    /// Width of the pooled keyword representation (output of the
    /// reinforcement stack).
    pub keyword_repr_size: usize,
    /// Number of fully connected layers in the reinforcement stack.
    pub reinforce_layers: usize,
    pub activation: Activation,
    /// GPT-2 style pre-norm residual blocks instead of the plain
    /// attention → LayerNorm → FFN composition.
    pub residual: bool,
    pub positional: bool,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 64,
            embed_size: 64,
            hidden_size: 64,
            num_blocks: 2,
            num_heads: 2,
            ffn_inner_size: 128,
            max_keyword_len: 16,
            eps: 1e-5,
            keyword_repr_size: 64,
            reinforce_layers: 2,
            activation: Activation::Gelu,
            residual: false,
            positional: true,
            pooling: Pooling::Mean,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("embed_size", self.embed_size),
            ("hidden_size", self.hidden_size),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("ffn_inner_size", self.ffn_inner_size),
            ("max_keyword_len", self.max_keyword_len),
            ("keyword_repr_size", self.keyword_repr_size),
            ("reinforce_layers", self.reinforce_layers),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be at least 1")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.residual && self.embed_size != self.hidden_size {
            return Err(Error::Config(
                "residual blocks need embed_size == hidden_size".into(),
            ));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Config("layer-norm eps must be non-negative".into()));
        }
        Ok(())
    }

    pub fn head_size(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

param_group! {
    /// Query/key/value projections, each `in×H_s` plus bias.
    pub struct AttentionParams { w_q, b_q, w_k, b_k, w_v, b_v }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub attention: AttentionParams<T>,
    /// LayerNorm applied to the attention output (plain mode) or to the
    /// block input (residual mode).
    pub norm: NormParams<T>,
    pub ffn_inner: Dense<T>,
    pub ffn_outer: Dense<T>,
    /// Second LayerNorm, residual mode only.
    pub norm2: Option<NormParams<T>>,
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            attention: self.attention.map(f),
            norm: self.norm.map(f),
            ffn_inner: self.ffn_inner.map(f),
            ffn_outer: self.ffn_outer.map(f),
            norm2: self.norm2.as_ref().map(|n| n.map(f)),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.attention.visit(&format!("{prefix}.attention"), f);
        self.norm.visit(&format!("{prefix}.norm"), f);
        self.ffn_inner.visit(&format!("{prefix}.ffn_inner"), f);
        self.ffn_outer.visit(&format!("{prefix}.ffn_outer"), f);
        if let Some(n) = &self.norm2 {
            n.visit(&format!("{prefix}.norm2"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        self.attention.visit_mut(&format!("{prefix}.attention"), f);
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
        self.ffn_inner.visit_mut(&format!("{prefix}.ffn_inner"), f);
        self.ffn_outer.visit_mut(&format!("{prefix}.ffn_outer"), f);
        if let Some(n) = &mut self.norm2 {
            n.visit_mut(&format!("{prefix}.norm2"), f);
        }
    }
}

impl BlockParams {
    pub fn init(input: usize, cfg: &EncoderConfig, rng: &mut SeededRng) -> Self {
        let h = cfg.hidden_size;
        BlockParams {
            attention: AttentionParams {
                w_q: Tensor::xavier(input, h, rng),
                b_q: Tensor::zeros(&[h]),
                w_k: Tensor::xavier(input, h, rng),
                b_k: Tensor::zeros(&[h]),
                w_v: Tensor::xavier(input, h, rng),
                b_v: Tensor::zeros(&[h]),
            },
            norm: NormParams::init(if cfg.residual { input } else { h }),
            ffn_inner: Dense::init(h, cfg.ffn_inner_size, rng),
            ffn_outer: Dense::init(cfg.ffn_inner_size, h, rng),
            norm2: cfg.residual.then(|| NormParams::init(h)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T = Tensor> {
    /// Token embedding table, `V_s×E_s` (row `k` embeds token `k`).
    pub embedding: T,
    /// Learned positional table, `max_keyword_len×E_s`.
    pub positional: T,
    pub blocks: Vec<BlockParams<T>>,
    /// Reinforcement stack, `H_s → … → F_k`.
    pub reinforce: Vec<Dense<T>>,
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            embedding: f(&self.embedding),
            positional: f(&self.positional),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            reinforce: self.reinforce.iter().map(|d| d.map(f)).collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.embedding"), &self.embedding);
        f(format!("{prefix}.positional"), &self.positional);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
        for (i, d) in self.reinforce.iter().enumerate() {
            d.visit(&format!("{prefix}.reinforce{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        f(format!("{prefix}.embedding"), &mut self.embedding);
        f(format!("{prefix}.positional"), &mut self.positional);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{i}"), f);
        }
        for (i, d) in self.reinforce.iter_mut().enumerate() {
            d.visit_mut(&format!("{prefix}.reinforce{i}"), f);
        }
    }
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let embedding = Tensor::xavier(cfg.vocab_size, cfg.embed_size, rng);
        let positional = Tensor::zeros(&[cfg.max_keyword_len, cfg.embed_size]);
        let blocks = (0..cfg.num_blocks)
            .map(|i| {
                let input = if i == 0 { cfg.embed_size } else { cfg.hidden_size };
                BlockParams::init(input, cfg, rng)
            })
            .collect();
        let reinforce = (0..cfg.reinforce_layers)
            .map(|i| {
                let out = if i + 1 == cfg.reinforce_layers {
                    cfg.keyword_repr_size
                } else {
                    cfg.hidden_size
                };
                Dense::init(cfg.hidden_size, out, rng)
            })
            .collect();
        Ok(EncoderParams {
            embedding,
            positional,
            blocks,
            reinforce,
        })
    }

    /// Binds every tensor as a trainable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> EncoderParams<Var<'g>> {
        self.map(&mut |t| graph.param(t.clone()))
    }

    /// Binds every tensor as a constant of `graph`.
    pub fn bind_const<'g>(&self, graph: &'g Graph) -> EncoderParams<Var<'g>> {
        self.map(&mut |t| graph.constant(t.clone()))
    }
}

/// Token embeddings plus positional rows: `L×E_s`.
pub fn embed_tokens<'g>(cfg: &EncoderConfig, p: &EncoderParams<Var<'g>>, ids: &[usize]) -> Result<Var<'g>> {
    if ids.is_empty() {
        return Err(TensorError::Shape {
            op: "embed_tokens",
            shape: vec![0],
            reason: "empty token sequence",
        }
        .into());
    }
    if ids.len() > cfg.max_keyword_len {
        return Err(Error::Input(format!(
            "keyword sequence of length {} exceeds max_keyword_len {}",
            ids.len(),
            cfg.max_keyword_len
        )));
    }
    let x = p.embedding.embedding_lookup(ids)?;
    if cfg.positional {
        Ok(x.add(p.positional.slice_rows(0, ids.len())?)?)
    } else {
        Ok(x)
    }
}

/// Attention mask for `len` positions: `(i, j)` is masked when `j > i` or
/// key `j` is padding.
pub fn attention_mask(key_is_pad: &[bool]) -> Vec<bool> {
    let l = key_is_pad.len();
    (0..l * l)
        .map(|k| {
            let (i, j) = (k / l, k % l);
            j > i || key_is_pad[j]
        })
        .collect()
}

/// Multi-head masked self-attention, `L×in → L×H_s`. Also returns the
/// attention weights of every head.
pub fn masked_self_attention<'g>(
    cfg: &EncoderConfig,
    x: Var<'g>,
    p: &AttentionParams<Var<'g>>,
    key_is_pad: &[bool],
) -> Result<(Var<'g>, Vec<Tensor>)> {
    let q = x.linear(p.w_q, p.b_q)?;
    let k = x.linear(p.w_k, p.b_k)?;
    let v = x.linear(p.w_v, p.b_v)?;
    let dk = cfg.head_size();
    let mask = attention_mask(key_is_pad);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut weights = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = q.slice_lastdim(h * dk, dk)?;
        let kh = k.slice_lastdim(h * dk, dk)?;
        let vh = v.slice_lastdim(h * dk, dk)?;
        let scores = qh.matmul(kh.transpose()?)?.scale(scale);
        let attn = scores.masked_fill(&mask)?.softmax_lastdim()?;
        weights.push(attn.value());
        heads.push(attn.matmul(vh)?);
    }
    let out = if heads.len() == 1 {
        heads[0]
    } else {
        Var::concat_lastdim(&heads)?
    };
    Ok((out, weights))
}

fn ffn<'g>(cfg: &EncoderConfig, z: Var<'g>, p: &BlockParams<Var<'g>>) -> Result<Var<'g>> {
    let inner = cfg.activation.apply(z.linear(p.ffn_inner.weight, p.ffn_inner.bias)?);
    Ok(inner.linear(p.ffn_outer.weight, p.ffn_outer.bias)?)
}

/// One encoder block, `L×in → L×H_s`.
pub fn block_forward<'g>(
    cfg: &EncoderConfig,
    x: Var<'g>,
    p: &BlockParams<Var<'g>>,
    key_is_pad: &[bool],
) -> Result<(Var<'g>, Vec<Tensor>)> {
    if cfg.residual {
        let normed = x.layer_norm(p.norm.gain, p.norm.bias, cfg.eps)?;
        let (attn, weights) = masked_self_attention(cfg, normed, &p.attention, key_is_pad)?;
        let a = x.add(attn)?;
        let n2 = p
            .norm2
            .as_ref()
            .ok_or_else(|| Error::Config("residual block is missing norm2".into()))?;
        let z = a.layer_norm(n2.gain, n2.bias, cfg.eps)?;
        Ok((a.add(ffn(cfg, z, p)?)?, weights))
    } else {
        let (attn, weights) = masked_self_attention(cfg, x, &p.attention, key_is_pad)?;
        let z = attn.layer_norm(p.norm.gain, p.norm.bias, cfg.eps)?;
        Ok((ffn(cfg, z, p)?, weights))
    }
}

/// Output of the block stack before pooling, with per-block attention
/// weights.
pub struct BlockStackOutput<'g> {
    pub hidden: Var<'g>,
    pub attention: Vec<Vec<Tensor>>,
}

pub fn run_blocks<'g>(
    cfg: &EncoderConfig,
    p: &EncoderParams<Var<'g>>,
    ids: &[usize],
) -> Result<BlockStackOutput<'g>> {
    let key_is_pad: Vec<bool> = ids.iter().map(|&id| id == PAD).collect();
    let mut x = embed_tokens(cfg, p, ids)?;
    let mut attention = Vec::with_capacity(p.blocks.len());
    for block in &p.blocks {
        let (out, w) = block_forward(cfg, x, block, &key_is_pad)?;
        x = out;
        attention.push(w);
    }
    Ok(BlockStackOutput { hidden: x, attention })
}

/// Contextualized keyword representation, `1×F_k`.
pub fn encode_keywords<'g>(
    cfg: &EncoderConfig,
    p: &EncoderParams<Var<'g>>,
    seq: &EncodedSequence,
) -> Result<Var<'g>> {
    if seq.true_length == 0 {
        return Err(Error::Input("keyword sequence has no non-PAD tokens".into()));
    }
    let hidden = run_blocks(cfg, p, &seq.ids)?.hidden;
    let mut h = match cfg.pooling {
        Pooling::Mean => hidden.slice_rows(0, seq.true_length)?.mean_rows()?,
        Pooling::Last => hidden.slice_rows(seq.true_length - 1, 1)?,
    };
    let last = p.reinforce.len() - 1;
    for (i, layer) in p.reinforce.iter().enumerate() {
        h = h.linear(layer.weight, layer.bias)?;
        if i < last {
            h = cfg.activation.apply(h);
        }
    }
    Ok(h)
}

/// Eager convenience wrapper: the keyword representation as a `[F_k]`
/// vector.
pub fn keyword_representation(cfg: &EncoderConfig, params: &EncoderParams, seq: &EncodedSequence) -> Result<Tensor> {
    let g = Graph::new();
    let p = params.bind_const(&g);
    let out = encode_keywords(cfg, &p, seq)?.value();
    Ok(out.reshape(&[cfg.keyword_repr_size])?)
}

/// Attention weights of every block and head for `seq`, computed eagerly.
pub fn attention_maps(cfg: &EncoderConfig, params: &EncoderParams, seq: &EncodedSequence) -> Result<Vec<Vec<Tensor>>> {
    let g = Graph::new();
    let p = params.bind_const(&g);
    Ok(run_blocks(cfg, &p, &seq.ids)?.attention)
}
