//! Embedding tables and tokenizers that turn raw feature ids into a fixed
//! number of token embeddings.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{axpy, dot, prefixed, Activation, Dense, MlpCache, MlpParams, Parameters, Tensor2};

/// Row id reserved for padding.
pub const PAD_ID: usize = 0;

/// Default behaviour-sequence length.
pub const DEFAULT_MAX_HISTORY: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub name: String,
    pub rows: Tensor2,
    pub frozen_pad: bool,
}

impl EmbeddingTable {
    pub fn new(name: impl Into<String>, rows: Tensor2, frozen_pad: bool) -> Result<Self> {
        let name = name.into();
        if rows.rows() == 0 {
            return Err(Error::shape(format!("embedding {name} has no rows")));
        }
        if frozen_pad && rows.row(PAD_ID).iter().any(|v| *v != 0.0) {
            return Err(Error::shape(format!(
                "embedding {name}: padding row must be zero"
            )));
        }
        Ok(Self {
            name,
            rows,
            frozen_pad,
        })
    }

    /// Uniform `±1/sqrt(dim)` rows with a zero padding row.
    pub fn init<R: Rng + ?Sized>(name: impl Into<String>, vocab: usize, dim: usize, rng: &mut R) -> Self {
        let mut rows = Tensor2::uniform(vocab, dim, 1.0 / (dim as f64).sqrt(), rng);
        rows.row_mut(PAD_ID).fill(0.0);
        Self {
            name: name.into(),
            rows,
            frozen_pad: true,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn embed(&self, ids: &[usize]) -> Result<Tensor2> {
        let mut out = Tensor2::zeros(ids.len(), self.dim());
        for (r, &id) in ids.iter().enumerate() {
            if id >= self.vocab_size() {
                return Err(Error::Lookup {
                    field: self.name.clone(),
                    id,
                    vocab: self.vocab_size(),
                });
            }
            out.row_mut(r).copy_from_slice(self.rows.row(id));
        }
        Ok(out)
    }

    /// Scatters row gradients into `grads`; the padding row never receives
    /// gradient when `frozen_pad` is set.
    pub fn backward(&self, ids: &[usize], d_rows: &Tensor2, grads: &mut EmbeddingTable) {
        for (r, &id) in ids.iter().enumerate() {
            if self.frozen_pad && id == PAD_ID {
                continue;
            }
            axpy(1.0, d_rows.row(r), grads.rows.row_mut(id));
        }
    }
}

impl Parameters for EmbeddingTable {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        vec![(self.name.clone(), self.rows.data())]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![(self.name.clone(), self.rows.data_mut())]
    }
}

/// Looks up one embedding row per id, in order.
pub fn embed(feature_ids: &[usize], table: &EmbeddingTable) -> Result<Tensor2> {
    table.embed(feature_ids)
}

/// Keeps the most recent `max_len` ids and left-pads with [`PAD_ID`].
pub fn pad_history(ids: &[usize], max_len: usize) -> Vec<usize> {
    let start = ids.len().saturating_sub(max_len);
    let kept = &ids[start..];
    let mut out = vec![PAD_ID; max_len - kept.len()];
    out.extend_from_slice(kept);
    out
}

/// `k × D^T` token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub tokens: Tensor2,
}

impl TokenMatrix {
    pub fn new(tokens: Tensor2) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::shape("a token matrix needs at least one token"));
        }
        Ok(Self { tokens })
    }

    pub fn k(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        self.tokens.row(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    /// Single-head attention pooling with a learned query vector.
    Attention,
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolKind::Mean => "mlp_mean_pool",
            PoolKind::Attention => "attention_pool",
        })
    }
}

impl FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp_mean_pool" | "mean" => Ok(PoolKind::Mean),
            "attention_pool" | "attention" => Ok(PoolKind::Attention),
            other => Err(Error::config(format!("unknown tokenizer kind {other:?}"))),
        }
    }
}

/// Pool → trunk MLP → one affine head per output token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerParams {
    pub kind: PoolKind,
    pub trunk: MlpParams,
    pub heads: Vec<Dense>,
    /// Attention query vector, length D; empty for mean pooling.
    pub attention: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TokenizerCache {
    weights: Vec<f64>,
    trunk: MlpCache,
    trunk_out: Vec<f64>,
}

impl TokenizerCache {
    pub fn relu_pattern(&self, p: &TokenizerParams) -> Vec<bool> {
        self.trunk.relu_pattern(&p.trunk)
    }
}

impl TokenizerParams {
    pub fn new(kind: PoolKind, trunk: MlpParams, heads: Vec<Dense>, attention: Vec<f64>) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::shape("a tokenizer needs at least one head"));
        }
        let d_t = heads[0].output_dim();
        for (i, h) in heads.iter().enumerate() {
            if h.input_dim() != trunk.output_dim() || h.output_dim() != d_t {
                return Err(Error::shape(format!(
                    "head {i} maps {}→{}, expected {}→{d_t}",
                    h.input_dim(),
                    h.output_dim(),
                    trunk.output_dim()
                )));
            }
        }
        let expected_attention = match kind {
            PoolKind::Mean => 0,
            PoolKind::Attention => trunk.input_dim(),
        };
        if attention.len() != expected_attention {
            return Err(Error::shape(format!(
                "{kind} tokenizer needs an attention vector of length {expected_attention}, got {}",
                attention.len()
            )));
        }
        Ok(Self {
            kind,
            trunk,
            heads,
            attention,
        })
    }

    /// `D → hidden… → D` ReLU trunk and `k` affine heads `D → D^T`.
    pub fn init<R: Rng + ?Sized>(
        kind: PoolKind,
        dim: usize,
        token_dim: usize,
        hidden: &[usize],
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![dim];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        let trunk = MlpParams::init(&dims, Activation::Relu, Activation::Identity, rng)?;
        let heads = (0..k)
            .map(|_| Dense::init(dim, token_dim, Activation::Identity, rng))
            .collect();
        let attention = match kind {
            PoolKind::Mean => Vec::new(),
            PoolKind::Attention => (0..dim)
                .map(|_| rng.random_range(-1.0..=1.0) / (dim as f64).sqrt())
                .collect(),
        };
        Self::new(kind, trunk, heads, attention)
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn num_tokens(&self) -> usize {
        self.heads.len()
    }

    pub fn token_dim(&self) -> usize {
        self.heads[0].output_dim()
    }

    fn pool_weights(&self, h: &Tensor2) -> Vec<f64> {
        let n = h.rows();
        match self.kind {
            PoolKind::Mean => vec![1.0 / n as f64; n],
            PoolKind::Attention => {
                let scale = 1.0 / (h.cols() as f64).sqrt();
                let logits: Vec<f64> = h.iter_rows().map(|r| dot(r, &self.attention) * scale).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                exps.into_iter().map(|e| e / total).collect()
            }
        }
    }

    pub fn forward(&self, h: &Tensor2) -> Result<(TokenMatrix, TokenizerCache)> {
        self.forward_impl::<rand_chacha::ChaCha8Rng>(h, None)
    }

    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        h: &Tensor2,
        dropout: f64,
        rng: &mut R,
    ) -> Result<(TokenMatrix, TokenizerCache)> {
        self.forward_impl(h, Some((dropout, rng)))
    }

    fn forward_impl<R: Rng + ?Sized>(
        &self,
        h: &Tensor2,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<(TokenMatrix, TokenizerCache)> {
        if h.rows() == 0 {
            return Err(Error::EmptyInput("tokenizer received no feature rows".into()));
        }
        if h.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "tokenizer expects {}-wide embeddings, got {}",
                self.input_dim(),
                h.cols()
            )));
        }
        let weights = self.pool_weights(h);
        let mut pooled = vec![0.0; h.cols()];
        if self.kind == PoolKind::Mean {
            pooled = h.mean_rows()?;
        } else {
            for (row, w) in h.iter_rows().zip(&weights) {
                axpy(*w, row, &mut pooled);
            }
        }
        let (trunk_out, trunk) = match dropout {
            Some((rate, rng)) => self.trunk.forward_train(&pooled, rate, rng)?,
            None => self.trunk.forward(&pooled)?,
        };
        let mut tokens = Tensor2::zeros(self.num_tokens(), self.token_dim());
        for (i, head) in self.heads.iter().enumerate() {
            let mut t = head.weight.matvec(&trunk_out)?;
            axpy(1.0, &head.bias, &mut t);
            tokens.row_mut(i).copy_from_slice(&t);
        }
        Ok((
            TokenMatrix::new(tokens)?,
            TokenizerCache {
                weights,
                trunk,
                trunk_out,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the input rows `h`.
    pub fn backward(
        &self,
        h: &Tensor2,
        cache: &TokenizerCache,
        d_tokens: &Tensor2,
        grads: &mut TokenizerParams,
    ) -> Result<Tensor2> {
        if d_tokens.shape() != (self.num_tokens(), self.token_dim()) {
            return Err(Error::shape(format!(
                "token gradient is {:?}, expected {:?}",
                d_tokens.shape(),
                (self.num_tokens(), self.token_dim())
            )));
        }
        let mut d_trunk = vec![0.0; cache.trunk_out.len()];
        for (i, head) in self.heads.iter().enumerate() {
            let g = d_tokens.row(i);
            let gh = &mut grads.heads[i];
            for (r, gr) in g.iter().enumerate() {
                axpy(*gr, &cache.trunk_out, gh.weight.row_mut(r));
                axpy(*gr, head.weight.row(r), &mut d_trunk);
            }
            axpy(1.0, g, &mut gh.bias);
        }
        let d_pooled = self.trunk.backward(&cache.trunk, &d_trunk, &mut grads.trunk)?;

        let mut d_h = Tensor2::zeros(h.rows(), h.cols());
        for (r, w) in cache.weights.iter().enumerate() {
            axpy(*w, &d_pooled, d_h.row_mut(r));
        }
        if self.kind == PoolKind::Attention {
            let scale = 1.0 / (h.cols() as f64).sqrt();
            let d_alpha: Vec<f64> = h.iter_rows().map(|row| dot(row, &d_pooled)).collect();
            let mean: f64 = cache.weights.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
            for (r, (a, da)) in cache.weights.iter().zip(&d_alpha).enumerate() {
                let d_logit = a * (da - mean) * scale;
                axpy(d_logit, h.row(r), &mut grads.attention);
                axpy(d_logit, &self.attention, d_h.row_mut(r));
            }
        }
        Ok(d_h)
    }
}

impl Parameters for TokenizerParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<_> = prefixed("trunk", self.trunk.blocks()).collect();
        for (i, h) in self.heads.iter().enumerate() {
            out.extend(prefixed(&format!("head{i}"), h.blocks()));
        }
        if !self.attention.is_empty() {
            out.push(("attention".to_string(), self.attention.as_slice()));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<_> = prefixed("trunk", self.trunk.blocks_mut()).collect();
        for (i, h) in self.heads.iter_mut().enumerate() {
            out.extend(prefixed(&format!("head{i}"), h.blocks_mut()));
        }
        if !self.attention.is_empty() {
            out.push(("attention".to_string(), self.attention.as_mut_slice()));
        }
        out
    }
}

/// Query tokens: pooled history through the trunk and each of the `K_u` heads.
pub fn tokenize_query(h: &Tensor2, p: &TokenizerParams) -> Result<TokenMatrix> {
    p.forward(h).map(|(t, _)| t)
}

/// Item tokens; same computation with the `K_c` item heads. Item tokens are
/// never quantized.
pub fn tokenize_item(h: &Tensor2, p: &TokenizerParams) -> Result<TokenMatrix> {
    p.forward(h).map(|(t, _)| t)
}
