//! Interaction scoring between one quantized query token and an item's
//! tokens, followed by the thresholded sparse score and the per-query sum.
//!
//! The query side is always treated as a constant (stop-gradient): codewords
//! are learned by EMA only, so backprop returns gradients for scorer
//! parameters and item tokens, and an identically zero query gradient.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoders::TokenMatrix;
use crate::error::{Error, Result};
use crate::numeric::{axpy, dot, prefixed, Activation, Dense, MlpCache, MlpParams, Parameters, Tensor2};
use crate::quantizer::QuantizedToken;

pub const CROSSNET_LAYERS: usize = 3;
pub const DEFAULT_HIDDEN: [usize; 3] = [256, 256, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InteractionKind {
    DotProduct,
    MaxSim,
    CrossNet,
    Dnn,
    InnerPdnn,
}

impl InteractionKind {
    pub const ALL: [InteractionKind; 5] = [
        InteractionKind::DotProduct,
        InteractionKind::MaxSim,
        InteractionKind::CrossNet,
        InteractionKind::Dnn,
        InteractionKind::InnerPdnn,
    ];
}

impl fmt::Display for InteractionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InteractionKind::DotProduct => "dot_product",
            InteractionKind::MaxSim => "maxsim",
            InteractionKind::CrossNet => "crossnet",
            InteractionKind::Dnn => "dnn",
            InteractionKind::InnerPdnn => "inner_pdnn",
        })
    }
}

impl FromStr for InteractionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown scorer kind {s:?}")))
    }
}

/// One layer of the vector-weight cross network:
/// `x_{l+1} = x_0 (w · x_l) + b + x_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossLayer {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Parameters for CrossLayer {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        vec![
            ("weight".to_string(), self.weight.as_slice()),
            ("bias".to_string(), self.bias.as_slice()),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("weight".to_string(), self.weight.as_mut_slice()),
            ("bias".to_string(), self.bias.as_mut_slice()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionParams {
    pub kind: InteractionKind,
    pub item_tokens: usize,
    pub token_dim: usize,
    /// Present for `dnn` and `inner_pdnn`.
    pub mlp: Option<MlpParams>,
    /// Exactly [`CROSSNET_LAYERS`] layers for `crossnet`, empty otherwise.
    pub cross: Vec<CrossLayer>,
    /// Final linear map of the cross network to a scalar.
    pub cross_out: Option<Dense>,
    /// Learnable threshold `b`: one shared scalar, or one entry per query
    /// token.
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct InteractionCache {
    input: Vec<f64>,
    mlp: Option<MlpCache>,
    cross_states: Vec<Vec<f64>>,
    cross_dots: Vec<f64>,
    argmax: usize,
}

impl InteractionCache {
    /// Discrete choices made in the forward pass, for kink detection.
    pub fn signature(&self, p: &InteractionParams) -> Vec<usize> {
        let mut sig = vec![self.argmax];
        if let (Some(c), Some(m)) = (&self.mlp, &p.mlp) {
            sig.extend(c.relu_pattern(m).into_iter().map(usize::from));
        }
        sig
    }
}

/// Gradients of one interaction score.
#[derive(Debug, Clone)]
pub struct InteractionBackward {
    pub d_items: Tensor2,
    /// Always zero: the quantized query is behind a stop-gradient.
    pub d_query: Vec<f64>,
}

impl InteractionParams {
    pub fn mlp_input_width(kind: InteractionKind, item_tokens: usize, token_dim: usize) -> usize {
        match kind {
            InteractionKind::InnerPdnn => item_tokens * token_dim,
            _ => (1 + item_tokens) * token_dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(
        kind: InteractionKind,
        item_tokens: usize,
        token_dim: usize,
        hidden: &[usize],
        bias_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let width = Self::mlp_input_width(kind, item_tokens, token_dim);
        let mut mlp = None;
        let mut cross = Vec::new();
        let mut cross_out = None;
        match kind {
            InteractionKind::Dnn | InteractionKind::InnerPdnn => {
                let mut dims = vec![width];
                dims.extend_from_slice(hidden);
                dims.push(1);
                mlp = Some(MlpParams::init(&dims, Activation::Relu, Activation::Identity, rng)?);
            }
            InteractionKind::CrossNet => {
                let limit = 1.0 / (width as f64).sqrt();
                cross = (0..CROSSNET_LAYERS)
                    .map(|_| CrossLayer {
                        weight: (0..width).map(|_| rng.random_range(-limit..=limit)).collect(),
                        bias: vec![0.0; width],
                    })
                    .collect();
                cross_out = Some(Dense::init(width, 1, Activation::Identity, rng));
            }
            InteractionKind::DotProduct | InteractionKind::MaxSim => {}
        }
        let p = Self {
            kind,
            item_tokens,
            token_dim,
            mlp,
            cross,
            cross_out,
            bias: vec![0.0; bias_width.max(1)],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let width = Self::mlp_input_width(self.kind, self.item_tokens, self.token_dim);
        if self.item_tokens == 0 || self.token_dim == 0 || self.bias.is_empty() {
            return Err(Error::shape("scorer needs item tokens, a token width and a bias"));
        }
        match self.kind {
            InteractionKind::Dnn | InteractionKind::InnerPdnn => {
                let mlp = self
                    .mlp
                    .as_ref()
                    .ok_or_else(|| Error::shape(format!("{} scorer needs an MLP", self.kind)))?;
                if mlp.input_dim() != width || mlp.output_dim() != 1 {
                    return Err(Error::shape(format!(
                        "{} scorer MLP must map {width} → 1, got {} → {}",
                        self.kind,
                        mlp.input_dim(),
                        mlp.output_dim()
                    )));
                }
            }
            InteractionKind::CrossNet => {
                let out = self
                    .cross_out
                    .as_ref()
                    .ok_or_else(|| Error::shape("crossnet scorer needs an output layer"))?;
                if self.cross.len() != CROSSNET_LAYERS
                    || self.cross.iter().any(|l| l.weight.len() != width || l.bias.len() != width)
                    || out.input_dim() != width
                    || out.output_dim() != 1
                {
                    return Err(Error::shape(format!(
                        "crossnet scorer needs {CROSSNET_LAYERS} layers of width {width}"
                    )));
                }
            }
            InteractionKind::DotProduct | InteractionKind::MaxSim => {}
        }
        Ok(())
    }

    /// Threshold applied to the score of query token `i`.
    pub fn bias_for(&self, i: usize) -> f64 {
        if self.bias.len() == 1 {
            self.bias[0]
        } else {
            self.bias[i]
        }
    }

    fn check_dims(&self, query: &[f64], items: &TokenMatrix) -> Result<()> {
        if query.len() != self.token_dim || items.dim() != self.token_dim || items.k() != self.item_tokens {
            return Err(Error::shape(format!(
                "{} scorer configured for a {}-wide query and {}x{} item tokens, got {} and {}x{}",
                self.kind,
                self.token_dim,
                self.item_tokens,
                self.token_dim,
                query.len(),
                items.k(),
                items.dim()
            )));
        }
        Ok(())
    }

    fn build_input(&self, query: &[f64], items: &TokenMatrix) -> Vec<f64> {
        match self.kind {
            InteractionKind::InnerPdnn => items
                .tokens
                .iter_rows()
                .flat_map(|t| t.iter().zip(query).map(|(a, b)| a * b))
                .collect(),
            InteractionKind::Dnn | InteractionKind::CrossNet => {
                let mut x = query.to_vec();
                x.extend_from_slice(items.tokens.data());
                x
            }
            InteractionKind::DotProduct | InteractionKind::MaxSim => Vec::new(),
        }
    }

    pub fn score(&self, query: &[f64], items: &TokenMatrix) -> Result<f64> {
        self.forward(query, items).map(|(s, _)| s)
    }

    pub fn forward(&self, query: &[f64], items: &TokenMatrix) -> Result<(f64, InteractionCache)> {
        self.check_dims(query, items)?;
        let input = self.build_input(query, items);
        let mut cache = InteractionCache {
            input: Vec::new(),
            mlp: None,
            cross_states: Vec::new(),
            cross_dots: Vec::new(),
            argmax: 0,
        };
        let score = match self.kind {
            InteractionKind::DotProduct => items.tokens.iter_rows().map(|t| dot(query, t)).sum(),
            InteractionKind::MaxSim => {
                let mut best = f64::NEG_INFINITY;
                for (j, t) in items.tokens.iter_rows().enumerate() {
                    let s = dot(query, t);
                    if s > best {
                        best = s;
                        cache.argmax = j;
                    }
                }
                best
            }
            InteractionKind::Dnn | InteractionKind::InnerPdnn => {
                let mlp = self.mlp.as_ref().expect("validated");
                let (out, c) = mlp.forward(&input)?;
                cache.mlp = Some(c);
                out[0]
            }
            InteractionKind::CrossNet => {
                let mut x = input.clone();
                for layer in &self.cross {
                    let s = dot(&layer.weight, &x);
                    let mut next = x.clone();
                    axpy(s, &input, &mut next);
                    axpy(1.0, &layer.bias, &mut next);
                    cache.cross_states.push(std::mem::replace(&mut x, next));
                    cache.cross_dots.push(s);
                }
                let out = self.cross_out.as_ref().expect("validated");
                let s = dot(out.weight.row(0), &x) + out.bias[0];
                cache.cross_states.push(x);
                s
            }
        };
        cache.input = input;
        Ok((score, cache))
    }

    /// Accumulates parameter gradients of `upstream · S` into `grads` and
    /// returns the item-token gradient.
    pub fn backward(
        &self,
        query: &[f64],
        items: &TokenMatrix,
        cache: &InteractionCache,
        upstream: f64,
        grads: &mut InteractionParams,
    ) -> Result<InteractionBackward> {
        self.check_dims(query, items)?;
        let mut d_items = Tensor2::zeros(items.k(), items.dim());
        match self.kind {
            InteractionKind::DotProduct => {
                for j in 0..items.k() {
                    axpy(upstream, query, d_items.row_mut(j));
                }
            }
            InteractionKind::MaxSim => {
                axpy(upstream, query, d_items.row_mut(cache.argmax));
            }
            InteractionKind::Dnn | InteractionKind::InnerPdnn => {
                let mlp = self.mlp.as_ref().expect("validated");
                let g_mlp = grads.mlp.as_mut().expect("gradient mirrors params");
                let d_input = mlp.backward(cache.mlp.as_ref().expect("mlp cache"), &[upstream], g_mlp)?;
                if self.kind == InteractionKind::InnerPdnn {
                    for (j, chunk) in d_input.chunks_exact(self.token_dim).enumerate() {
                        for (d, (g, q)) in d_items.row_mut(j).iter_mut().zip(chunk.iter().zip(query)) {
                            *d = g * q;
                        }
                    }
                } else {
                    d_items.data_mut().copy_from_slice(&d_input[self.token_dim..]);
                }
            }
            InteractionKind::CrossNet => {
                let out = self.cross_out.as_ref().expect("validated");
                let g_out = grads.cross_out.as_mut().expect("gradient mirrors params");
                let last = &cache.cross_states[CROSSNET_LAYERS];
                axpy(upstream, last, g_out.weight.row_mut(0));
                g_out.bias[0] += upstream;
                let mut g: Vec<f64> = out.weight.row(0).iter().map(|w| w * upstream).collect();
                let mut d_x0 = vec![0.0; g.len()];
                for l in (0..CROSSNET_LAYERS).rev() {
                    let x_l = &cache.cross_states[l];
                    let d_s = dot(&g, &cache.input);
                    axpy(cache.cross_dots[l], &g, &mut d_x0);
                    axpy(d_s, x_l, &mut grads.cross[l].weight);
                    axpy(1.0, &g, &mut grads.cross[l].bias);
                    axpy(d_s, &self.cross[l].weight, &mut g);
                }
                // x_0 is also the input of the first layer
                axpy(1.0, &g, &mut d_x0);
                d_items.data_mut().copy_from_slice(&d_x0[self.token_dim..]);
            }
        }
        Ok(InteractionBackward {
            d_items,
            d_query: vec![0.0; query.len()],
        })
    }
}

impl Parameters for InteractionParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        if let Some(m) = &self.mlp {
            out.extend(prefixed("mlp", m.blocks()));
        }
        for (i, l) in self.cross.iter().enumerate() {
            out.extend(prefixed(&format!("cross{i}"), l.blocks()));
        }
        if let Some(o) = &self.cross_out {
            out.extend(prefixed("cross_out", o.blocks()));
        }
        out.push(("bias".to_string(), self.bias.as_slice()));
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        if let Some(m) = &mut self.mlp {
            out.extend(prefixed("mlp", m.blocks_mut()));
        }
        for (i, l) in self.cross.iter_mut().enumerate() {
            out.extend(prefixed(&format!("cross{i}"), l.blocks_mut()));
        }
        if let Some(o) = &mut self.cross_out {
            out.extend(prefixed("cross_out", o.blocks_mut()));
        }
        out.push(("bias".to_string(), self.bias.as_mut_slice()));
        out
    }
}

/// Raw score `S_i` of one quantized query token against an item.
pub fn interaction_score(q_token: &QuantizedToken, item_tokens: &TokenMatrix, p: &InteractionParams) -> Result<f64> {
    p.score(&q_token.embedding, item_tokens)
}

/// `ReLU(S + bias)`.
#[inline]
pub fn sparse_score(score: f64, bias: f64) -> f64 {
    let v = score + bias;
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Sum of per-token sparse scores.
pub fn final_score(sparse: &[f64]) -> Result<f64> {
    if sparse.is_empty() {
        return Err(Error::Contract("final score needs at least one token score".into()));
    }
    if let Some(v) = sparse.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Contract(format!("sparse score {v} is negative")));
    }
    // fold from 0.0 in token order; index merge accumulates the same way
    Ok(sparse.iter().fold(0.0, |acc, v| acc + v))
}

/// Per-token raw and sparse scores plus their sum for one (query, item) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub raw: Vec<f64>,
    pub sparse: Vec<f64>,
    pub final_score: f64,
}

impl ScoreVector {
    pub fn compute(
        query: &[QuantizedToken],
        items: &TokenMatrix,
        p: &InteractionParams,
        serve_bias: Option<f64>,
    ) -> Result<Self> {
        let raw = query
            .iter()
            .map(|q| interaction_score(q, items, p))
            .collect::<Result<Vec<_>>>()?;
        let sparse: Vec<f64> = raw
            .iter()
            .enumerate()
            .map(|(i, s)| sparse_score(*s, serve_bias.unwrap_or_else(|| p.bias_for(i))))
            .collect();
        let final_score = final_score(&sparse)?;
        Ok(Self {
            raw,
            sparse,
            final_score,
        })
    }
}

/// Serve-time threshold `b̃` that replaces the trained bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityControl {
    pub serve_bias: f64,
}
