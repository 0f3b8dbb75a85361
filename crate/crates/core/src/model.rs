//! The SparCode network (embeddings, query/item tokenizers, quantizer and
//! interaction scorer) and the two-tower baseline built from the same parts.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{EmbeddingTable, PoolKind, TokenMatrix, TokenizerCache, TokenizerParams, DEFAULT_MAX_HISTORY};
use crate::error::{Error, Result};
use crate::numeric::{axpy, dot, prefixed, Parameters, Tensor2};
use crate::parallel::map_indexed;
use crate::quantizer::{commitment_gradient, commitment_loss, quantize, CodebookState, QuantizedToken, DEFAULT_GAMMA};
use crate::scorer::{final_score, sparse_score, InteractionCache, InteractionKind, InteractionParams};

/// Examples per reduction chunk. Fixed so the floating-point reduction order
/// does not depend on the worker count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    SparCode,
    TwoTower,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::SparCode => "sparcode",
            Arch::TwoTower => "twotower",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparcode" => Ok(Arch::SparCode),
            "twotower" => Ok(Arch::TwoTower),
            _ => Err(Error::config(format!("unknown architecture {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub num_items: usize,
    pub dim: usize,
    pub token_dim: usize,
    pub query_tokens: usize,
    pub item_tokens: usize,
    pub num_books: usize,
    pub codebook_size: usize,
    pub gamma: f64,
    pub scorer: InteractionKind,
    pub scorer_hidden: Vec<usize>,
    pub tokenizer_hidden: Vec<usize>,
    pub pool: PoolKind,
    pub per_token_bias: bool,
    /// Starting value of the threshold `b`; positive so the sparse scores
    /// are active when training starts.
    pub bias_init: f64,
    pub max_history: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::SparCode,
            num_items: 500,
            dim: 16,
            token_dim: 16,
            query_tokens: 2,
            item_tokens: 1,
            num_books: 2,
            codebook_size: 256,
            gamma: DEFAULT_GAMMA,
            scorer: InteractionKind::InnerPdnn,
            scorer_hidden: vec![256, 256, 256],
            tokenizer_hidden: vec![32],
            pool: PoolKind::Mean,
            per_token_bias: false,
            bias_init: 1.0,
            max_history: DEFAULT_MAX_HISTORY,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_items", self.num_items),
            ("dim", self.dim),
            ("token_dim", self.token_dim),
            ("query_tokens", self.query_tokens),
            ("item_tokens", self.item_tokens),
            ("num_books", self.num_books),
            ("codebook_size", self.codebook_size),
            ("max_history", self.max_history),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be at least 1")));
        }
        if self.token_dim % self.num_books != 0 {
            return Err(Error::config(format!(
                "model.token_dim ({}) must be divisible by model.M ({})",
                self.token_dim, self.num_books
            )));
        }
        if !self.bias_init.is_finite() {
            return Err(Error::config("model.bias_init must be finite"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config(format!("model.gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.codebook_size > u32::MAX as usize {
            return Err(Error::config("model.N does not fit a code component"));
        }
        if self.arch == Arch::TwoTower
            && (self.query_tokens != 1 || self.item_tokens != 1 || self.scorer != InteractionKind::DotProduct)
        {
            return Err(Error::config("the two-tower baseline uses one token per side and dot_product"));
        }
        Ok(())
    }

    /// Baseline configuration with the same encoders: one token per side,
    /// dot-product score, no quantization.
    pub fn two_tower(&self) -> ModelConfig {
        ModelConfig {
            arch: Arch::TwoTower,
            query_tokens: 1,
            item_tokens: 1,
            scorer: InteractionKind::DotProduct,
            per_token_bias: false,
            ..self.clone()
        }
    }
}

/// Every parameter trained by backprop. Codebooks live outside.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: EmbeddingTable,
    pub query: TokenizerParams,
    pub item: TokenizerParams,
    pub scorer: InteractionParams,
}

impl Parameters for ModelParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<_> = prefixed("embedding", self.embedding.blocks()).collect();
        out.extend(prefixed("query", self.query.blocks()));
        out.extend(prefixed("item", self.item.blocks()));
        out.extend(prefixed("scorer", self.scorer.blocks()));
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<_> = prefixed("embedding", self.embedding.blocks_mut()).collect();
        out.extend(prefixed("query", self.query.blocks_mut()));
        out.extend(prefixed("item", self.item.blocks_mut()));
        out.extend(prefixed("scorer", self.scorer.blocks_mut()));
        out
    }
}

/// One training query: behaviour history, its positive and sampled negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub history: Vec<usize>,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchOptions {
    /// Commitment weight; `None` drops the term from the objective entirely.
    pub lambda: Option<f64>,
    pub dropout: f64,
    /// Seed of the dropout streams; `None` disables dropout.
    pub dropout_seed: Option<u64>,
    pub workers: usize,
    /// Records every discrete decision, for finite-difference kink checks.
    pub signature: bool,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            lambda: Some(0.25),
            dropout: 0.0,
            dropout_seed: None,
            workers: 1,
            signature: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    /// Gradient of `mean match + λ · mean commit`.
    pub grads: ModelParams,
    pub match_loss: f64,
    pub commit_loss: f64,
    /// Training-time quantization of every query token, for the EMA step.
    pub quantized: Vec<QuantizedToken>,
    pub signature: Vec<usize>,
}

impl BatchResult {
    pub fn objective(&self, lambda: f64) -> f64 {
        self.match_loss + lambda * self.commit_loss
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// `None` for the two-tower baseline and before the first batch.
    pub codebooks: Option<CodebookState>,
}

struct ItemBatch {
    ids: Vec<usize>,
    rows: Vec<Tensor2>,
    tokens: Vec<TokenMatrix>,
    caches: Vec<TokenizerCache>,
}

struct ChunkOut {
    grads: ModelParams,
    d_items: Vec<Tensor2>,
    match_loss: f64,
    commit_loss: f64,
    quantized: Vec<QuantizedToken>,
    signature: Vec<usize>,
}

fn dropout_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `−log softmax(y)[0]` with a max shift, and the softmax itself.
pub(crate) fn softmax_nll(y: &[f64]) -> (f64, Vec<f64>) {
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = y.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (y[0] - max);
    (loss, exps.into_iter().map(|e| e / total).collect())
}

impl Model {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let embedding = EmbeddingTable::init("item", config.num_items + 1, config.dim, rng);
        let query = TokenizerParams::init(
            config.pool,
            config.dim,
            config.token_dim,
            &config.tokenizer_hidden,
            config.query_tokens,
            rng,
        )?;
        let item = TokenizerParams::init(
            config.pool,
            config.dim,
            config.token_dim,
            &config.tokenizer_hidden,
            config.item_tokens,
            rng,
        )?;
        let bias_width = if config.per_token_bias { config.query_tokens } else { 1 };
        let mut scorer = InteractionParams::init(
            config.scorer,
            config.item_tokens,
            config.token_dim,
            &config.scorer_hidden,
            bias_width,
            rng,
        )?;
        scorer.bias.fill(config.bias_init);
        Ok(Self {
            config,
            params: ModelParams {
                embedding,
                query,
                item,
                scorer,
            },
            codebooks: None,
        })
    }

    /// Checks that parameters and codebooks agree with the configuration.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let p = &self.params;
        p.scorer.validate()?;
        let ok = p.embedding.vocab_size() == c.num_items + 1
            && p.embedding.dim() == c.dim
            && p.query.input_dim() == c.dim
            && p.item.input_dim() == c.dim
            && p.query.num_tokens() == c.query_tokens
            && p.item.num_tokens() == c.item_tokens
            && p.query.token_dim() == c.token_dim
            && p.item.token_dim() == c.token_dim
            && p.scorer.kind == c.scorer
            && p.scorer.item_tokens == c.item_tokens
            && p.scorer.token_dim == c.token_dim
            && p.scorer.bias.len() == if c.per_token_bias { c.query_tokens } else { 1 };
        if !ok {
            return Err(Error::shape("model parameters do not match the model configuration"));
        }
        if let Some(cb) = &self.codebooks {
            if cb.num_books() != c.num_books || cb.size() != c.codebook_size || cb.token_dim() != c.token_dim {
                return Err(Error::shape("codebooks do not match the model configuration"));
            }
        }
        Ok(())
    }

    /// Embedding rows of the most recent `max_history` items.
    pub fn history_rows(&self, history: &[usize]) -> Result<Vec<usize>> {
        if history.is_empty() {
            return Err(Error::EmptyInput("query history is empty".into()));
        }
        let start = history.len().saturating_sub(self.config.max_history);
        history[start..].iter().map(|&id| self.item_row(id, "history")).collect()
    }

    fn item_row(&self, item: usize, field: &str) -> Result<usize> {
        if item >= self.config.num_items {
            return Err(Error::Lookup {
                field: field.to_string(),
                id: item,
                vocab: self.config.num_items,
            });
        }
        Ok(item + 1)
    }

    pub fn query_tokens(&self, history: &[usize]) -> Result<TokenMatrix> {
        let rows = self.history_rows(history)?;
        let h = self.params.embedding.embed(&rows)?;
        self.params.query.forward(&h).map(|(t, _)| t)
    }

    pub fn item_tokens(&self, item: usize) -> Result<TokenMatrix> {
        let h = self.params.embedding.embed(&[self.item_row(item, "item")?])?;
        self.params.item.forward(&h).map(|(t, _)| t)
    }

    /// Serving-time tokens of every corpus item, indexed by item id.
    pub fn all_item_tokens(&self) -> Result<Vec<TokenMatrix>> {
        (0..self.config.num_items).map(|i| self.item_tokens(i)).collect()
    }

    pub fn codebooks(&self) -> Result<&CodebookState> {
        self.codebooks
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("{} model has no codebooks", self.config.arch)))
    }

    /// Query history → `K_u` quantized tokens.
    pub fn quantize_query(&self, history: &[usize]) -> Result<Vec<QuantizedToken>> {
        let cb = self.codebooks()?;
        let t = self.query_tokens(history)?;
        t.tokens.iter_rows().map(|row| quantize(row, cb)).collect()
    }

    /// Final score of one item given already-quantized query tokens.
    pub fn score_item(&self, quantized: &[QuantizedToken], item_tokens: &TokenMatrix, serve_bias: f64) -> Result<f64> {
        let sparse = quantized
            .iter()
            .map(|q| Ok(sparse_score(self.params.scorer.score(&q.embedding, item_tokens)?, serve_bias)))
            .collect::<Result<Vec<_>>>()?;
        final_score(&sparse)
    }

    /// The trained threshold `b` used as default serve bias. Per-token
    /// biases are averaged.
    pub fn trained_bias(&self) -> f64 {
        let b = &self.params.scorer.bias;
        b.iter().sum::<f64>() / b.len() as f64
    }

    /// Two-tower query embedding.
    pub fn query_embedding(&self, history: &[usize]) -> Result<Vec<f64>> {
        Ok(self.query_tokens(history)?.token(0).to_vec())
    }

    /// Two-tower item embedding matrix, one row per item.
    pub fn item_embeddings(&self) -> Result<Tensor2> {
        let mut out = Tensor2::zeros(self.config.num_items, self.config.token_dim);
        for (i, t) in self.all_item_tokens()?.into_iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.token(0));
        }
        Ok(out)
    }

    /// Raw query tokens of a batch under the current parameters, no dropout.
    pub fn batch_query_tokens(&self, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for ex in examples {
            let t = self.query_tokens(&ex.history)?;
            out.extend(t.tokens.iter_rows().map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    fn item_batch(&self, examples: &[Example], opts: &BatchOptions) -> Result<ItemBatch> {
        let mut ids: Vec<usize> = examples
            .iter()
            .flat_map(|e| std::iter::once(e.positive).chain(e.negatives.iter().copied()))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let mut rng = opts.dropout_seed.map(|s| dropout_rng(s, 0));
        let mut batch = ItemBatch {
            ids: Vec::with_capacity(ids.len()),
            rows: Vec::new(),
            tokens: Vec::new(),
            caches: Vec::new(),
        };
        for id in ids {
            let h = self.params.embedding.embed(&[self.item_row(id, "item")?])?;
            let (t, c) = match rng.as_mut() {
                Some(r) => self.params.item.forward_train(&h, opts.dropout, r)?,
                None => self.params.item.forward(&h)?,
            };
            batch.ids.push(id);
            batch.rows.push(h);
            batch.tokens.push(t);
            batch.caches.push(c);
        }
        Ok(batch)
    }

    /// Forward and backward over one mini-batch.
    pub fn batch(&self, examples: &[Example], opts: &BatchOptions) -> Result<BatchResult> {
        if examples.is_empty() {
            return Err(Error::EmptyInput("empty mini-batch".into()));
        }
        if self.config.arch == Arch::SparCode {
            self.codebooks()?;
        }
        let items = self.item_batch(examples, opts)?;
        let scale = 1.0 / examples.len() as f64;
        let n_chunks = examples.len().div_ceil(CHUNK);
        let chunks = map_indexed(n_chunks, opts.workers, |c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(examples.len());
            self.chunk(&examples[lo..hi], lo, &items, opts, scale)
        });

        let mut grads = self.params.zeros_like();
        let mut d_items: Vec<Tensor2> = items.tokens.iter().map(|t| Tensor2::zeros(t.k(), t.dim())).collect();
        let mut match_loss = 0.0;
        let mut commit_loss = 0.0;
        let mut quantized = Vec::new();
        let mut signature = Vec::new();
        for chunk in chunks {
            let chunk = chunk?;
            for ((_, g), (_, c)) in grads.blocks_mut().into_iter().zip(chunk.grads.blocks()) {
                axpy(1.0, c, g);
            }
            for (d, c) in d_items.iter_mut().zip(&chunk.d_items) {
                axpy(1.0, c.data(), d.data_mut());
            }
            match_loss += chunk.match_loss;
            commit_loss += chunk.commit_loss;
            quantized.extend(chunk.quantized);
            signature.extend(chunk.signature);
        }

        for (j, d) in d_items.iter().enumerate() {
            let d_h = self.params.item.backward(&items.rows[j], &items.caches[j], d, &mut grads.item)?;
            if opts.signature {
                signature.extend(items.caches[j].relu_pattern(&self.params.item).into_iter().map(usize::from));
            }
            self.params
                .embedding
                .backward(&[items.ids[j] + 1], &d_h, &mut grads.embedding);
        }
        Ok(BatchResult {
            grads,
            match_loss: match_loss * scale,
            commit_loss: commit_loss * scale,
            quantized,
            signature,
        })
    }

    fn chunk(
        &self,
        examples: &[Example],
        offset: usize,
        items: &ItemBatch,
        opts: &BatchOptions,
        scale: f64,
    ) -> Result<ChunkOut> {
        let mut out = ChunkOut {
            grads: self.params.zeros_like(),
            d_items: items.tokens.iter().map(|t| Tensor2::zeros(t.k(), t.dim())).collect(),
            match_loss: 0.0,
            commit_loss: 0.0,
            quantized: Vec::new(),
            signature: Vec::new(),
        };
        for (i, ex) in examples.iter().enumerate() {
            self.example(ex, (offset + i) as u64 + 1, items, opts, scale, &mut out)?;
        }
        Ok(out)
    }

    fn example(
        &self,
        ex: &Example,
        stream: u64,
        items: &ItemBatch,
        opts: &BatchOptions,
        scale: f64,
        out: &mut ChunkOut,
    ) -> Result<()> {
        let p = &self.params;
        let rows = self.history_rows(&ex.history)?;
        let h = p.embedding.embed(&rows)?;
        let (tokens, tcache) = match opts.dropout_seed {
            Some(seed) => p.query.forward_train(&h, opts.dropout, &mut dropout_rng(seed, stream))?,
            None => p.query.forward(&h)?,
        };
        let cands: Vec<usize> = std::iter::once(ex.positive)
            .chain(ex.negatives.iter().copied())
            .map(|id| {
                items
                    .ids
                    .binary_search(&id)
                    .map_err(|_| Error::Contract(format!("item {id} missing from batch")))
            })
            .collect::<Result<_>>()?;
        let mut d_tokens = Tensor2::zeros(tokens.k(), tokens.dim());

        match self.config.arch {
            Arch::SparCode => {
                let cb = self.codebooks()?;
                let quantized: Vec<QuantizedToken> = tokens
                    .tokens
                    .iter_rows()
                    .map(|row| quantize(row, cb))
                    .collect::<Result<_>>()?;
                let mut y = Vec::with_capacity(cands.len());
                let mut caches: Vec<Vec<(f64, InteractionCache)>> = Vec::with_capacity(cands.len());
                for &c in &cands {
                    let mut yc = 0.0;
                    let mut per = Vec::with_capacity(quantized.len());
                    for (i, q) in quantized.iter().enumerate() {
                        let (s, cache) = p.scorer.forward(&q.embedding, &items.tokens[c])?;
                        let z = s + p.scorer.bias_for(i);
                        yc += sparse_score(s, p.scorer.bias_for(i));
                        if opts.signature {
                            out.signature.push(usize::from(z > 0.0));
                            out.signature.extend(cache.signature(&p.scorer));
                        }
                        per.push((z, cache));
                    }
                    y.push(yc);
                    caches.push(per);
                }
                let (loss, probs) = softmax_nll(&y);
                for (ci, &c) in cands.iter().enumerate() {
                    let dy = (probs[ci] - if ci == 0 { 1.0 } else { 0.0 }) * scale;
                    for (i, (z, cache)) in caches[ci].iter().enumerate() {
                        if *z <= 0.0 {
                            continue;
                        }
                        let bi = if p.scorer.bias.len() == 1 { 0 } else { i };
                        out.grads.scorer.bias[bi] += dy;
                        let back = p.scorer.backward(
                            &quantized[i].embedding,
                            &items.tokens[c],
                            cache,
                            dy,
                            &mut out.grads.scorer,
                        )?;
                        axpy(1.0, back.d_items.data(), out.d_items[c].data_mut());
                    }
                }
                out.match_loss += loss;
                if let Some(lambda) = opts.lambda {
                    out.commit_loss += commitment_loss(&tokens, &quantized);
                    let g = commitment_gradient(&tokens, &quantized);
                    axpy(lambda * scale, g.data(), d_tokens.data_mut());
                }
                if opts.signature {
                    for q in &quantized {
                        out.signature.extend(q.code.0.iter().map(|&k| k as usize));
                    }
                }
                out.quantized.extend(quantized);
            }
            Arch::TwoTower => {
                let q = tokens.token(0);
                let y: Vec<f64> = cands.iter().map(|&c| dot(q, items.tokens[c].token(0))).collect();
                let (loss, probs) = softmax_nll(&y);
                for (ci, &c) in cands.iter().enumerate() {
                    let dy = (probs[ci] - if ci == 0 { 1.0 } else { 0.0 }) * scale;
                    axpy(dy, items.tokens[c].token(0), d_tokens.row_mut(0));
                    axpy(dy, q, out.d_items[c].row_mut(0));
                }
                out.match_loss += loss;
            }
        }
        if opts.signature {
            out.signature
                .extend(tcache.relu_pattern(&p.query).into_iter().map(usize::from));
        }
        let d_h = p.query.backward(&h, &tcache, &d_tokens, &mut out.grads.query)?;
        p.embedding.backward(&rows, &d_h, &mut out.grads.embedding);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::check_parameters;

    fn tiny(kind: InteractionKind, pool: PoolKind, per_token_bias: bool) -> ModelConfig {
        ModelConfig {
            num_items: 9,
            dim: 4,
            token_dim: 4,
            query_tokens: 2,
            item_tokens: 2,
            num_books: 2,
            codebook_size: 3,
            scorer: kind,
            scorer_hidden: vec![5],
            tokenizer_hidden: vec![3],
            pool,
            per_token_bias,
            ..ModelConfig::default()
        }
    }

    fn examples() -> Vec<Example> {
        vec![
            Example {
                history: vec![1, 4, 2],
                positive: 3,
                negatives: vec![0, 5, 7],
            },
            Example {
                history: vec![6],
                positive: 8,
                negatives: vec![3, 2],
            },
        ]
    }

    fn with_codebooks(mut m: Model, seed: u64) -> Model {
        let toks = m.batch_query_tokens(&examples()).unwrap();
        let refs: Vec<&[f64]> = toks.iter().map(Vec::as_slice).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.codebooks = Some(
            CodebookState::from_samples(&refs, m.config.num_books, m.config.codebook_size, 0.99, &mut rng).unwrap(),
        );
        m
    }

    #[test]
    fn softmax_nll_matches_closed_forms() {
        assert!((softmax_nll(&[0.3, 0.3]).0 - 2f64.ln()).abs() < 1e-12);
        assert!((softmax_nll(&[0.0, 0.0, 0.0]).0 - 3f64.ln()).abs() < 1e-12);
        assert!(softmax_nll(&[800.0, -800.0]).0.is_finite());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let mut seed = 0;
        for kind in InteractionKind::ALL {
            for pool in [PoolKind::Mean, PoolKind::Attention] {
                for per_token in [false, true] {
                    seed += 1;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let mut m = Model::init(tiny(kind, pool, per_token), &mut rng).unwrap();
                    // shift the bias so some sparse scores are active and some clipped
                    m.params.scorer.bias.iter_mut().for_each(|b| *b = 0.05);
                    let m = with_codebooks(m, seed);
                    let opts = BatchOptions {
                        signature: true,
                        ..BatchOptions::default()
                    };
                    let ex = examples();
                    let res = m.batch(&ex, &opts).unwrap();
                    let report = check_parameters(&m.params, &res.grads, 1e-5, |p| {
                        let mut probe = m.clone();
                        probe.params = p.clone();
                        let r = probe.batch(&ex, &opts).unwrap();
                        (r.objective(0.25), r.signature)
                    });
                    assert!(report.passes(1e-4), "{kind} {pool} per_token={per_token}: {report:?}");
                    assert!(report.checked > report.skipped);
                }
            }
        }
    }

    #[test]
    fn two_tower_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Model::init(tiny(InteractionKind::DotProduct, PoolKind::Mean, false).two_tower(), &mut rng).unwrap();
        let opts = BatchOptions {
            signature: true,
            ..BatchOptions::default()
        };
        let ex = examples();
        let res = m.batch(&ex, &opts).unwrap();
        let report = check_parameters(&m.params, &res.grads, 1e-5, |p| {
            let mut probe = m.clone();
            probe.params = p.clone();
            let r = probe.batch(&ex, &opts).unwrap();
            (r.match_loss, r.signature)
        });
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn results_do_not_depend_on_workers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = with_codebooks(
            Model::init(tiny(InteractionKind::InnerPdnn, PoolKind::Mean, false), &mut rng).unwrap(),
            3,
        );
        let ex: Vec<Example> = examples().into_iter().cycle().take(21).collect();
        let run = |workers| {
            let opts = BatchOptions {
                dropout: 0.1,
                dropout_seed: Some(17),
                workers,
                ..BatchOptions::default()
            };
            m.batch(&ex, &opts).unwrap()
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.grads, b.grads);
        assert_eq!(a.match_loss.to_bits(), b.match_loss.to_bits());
    }

    #[test]
    fn lookup_errors_name_the_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::init(tiny(InteractionKind::DotProduct, PoolKind::Mean, false), &mut rng).unwrap();
        assert!(matches!(m.query_tokens(&[99]), Err(Error::Lookup { ref field, .. }) if field == "history"));
        assert!(matches!(m.query_tokens(&[]), Err(Error::EmptyInput(_))));
        assert!(matches!(m.quantize_query(&[1]), Err(Error::Contract(_))));
    }

    #[test]
    fn config_rejects_indivisible_token_width() {
        let c = ModelConfig {
            token_dim: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn history_keeps_most_recent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = tiny(InteractionKind::DotProduct, PoolKind::Mean, false);
        c.max_history = 2;
        let m = Model::init(c, &mut rng).unwrap();
        assert_eq!(m.history_rows(&[1, 2, 3]).unwrap(), vec![3, 4]);
    }
}
