//! Product quantization of query tokens with EMA-learned codebooks.
//!
//! A `D^T`-wide token is split into `M` contiguous sub-vectors, each snapped
//! to its nearest codeword (squared Euclidean distance, ties to the lowest
//! index). The tuple of chosen indices is the token's [`Code`]; the
//! concatenated codewords replace the token downstream.
//!
//! Codewords never receive gradient. They move only through [`ema_update`],
//! which keeps per-codeword running counts `N_k` and sums `V_k` and sets
//! `C_k = V_k / N_k`.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::encoders::TokenMatrix;
use crate::error::{Error, Result};
use crate::numeric::{squared_distance, Tensor2};

pub const DEFAULT_GAMMA: f64 = 0.99;

/// `M`-tuple of codeword indices, ordered lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Code(pub Vec<u32>);

impl Code {
    pub fn indices(&self) -> &[u32] {
        &self.0
    }

    /// Mixed-radix position of this code in the lexicographic enumeration of
    /// all `N^M` codes.
    pub fn linear_index(&self, n: usize) -> usize {
        self.0.iter().fold(0, |acc, &i| acc * n + i as usize)
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for Code {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<u32>()
                    .map_err(|e| Error::shape(format!("bad code component {p:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Code)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedToken {
    pub code: Code,
    /// Concatenation of the selected codewords.
    pub embedding: Vec<f64>,
    /// The token before quantization.
    pub original: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookState {
    num_books: usize,
    size: usize,
    sub_dim: usize,
    codewords: Vec<Tensor2>,
    counts: Vec<Vec<f64>>,
    accumulators: Vec<Tensor2>,
    gamma: f64,
}

impl CodebookState {
    /// Codebooks from explicit codewords, with counts of 1 and accumulators
    /// equal to the codewords.
    pub fn new(codewords: Vec<Tensor2>, gamma: f64) -> Result<Self> {
        let counts = codewords.iter().map(|c| vec![1.0; c.rows()]).collect();
        let accumulators = codewords.clone();
        Self::from_parts(codewords, counts, accumulators, gamma)
    }

    pub fn from_parts(
        codewords: Vec<Tensor2>,
        counts: Vec<Vec<f64>>,
        accumulators: Vec<Tensor2>,
        gamma: f64,
    ) -> Result<Self> {
        let first = codewords
            .first()
            .ok_or_else(|| Error::shape("at least one codebook is required"))?;
        let (size, sub_dim) = first.shape();
        if size == 0 || sub_dim == 0 {
            return Err(Error::shape("codebooks need at least one non-empty codeword"));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::config(format!("EMA decay must lie in (0, 1), got {gamma}")));
        }
        if counts.len() != codewords.len() || accumulators.len() != codewords.len() {
            return Err(Error::shape("codebook counts/accumulators do not match codebooks"));
        }
        for m in 0..codewords.len() {
            if codewords[m].shape() != (size, sub_dim) || accumulators[m].shape() != (size, sub_dim) {
                return Err(Error::shape(format!("codebook {m} is not {size}x{sub_dim}")));
            }
            if counts[m].len() != size || counts[m].iter().any(|c| !(*c > 0.0)) {
                return Err(Error::shape(format!("codebook {m} needs {size} positive counts")));
            }
        }
        Ok(Self {
            num_books: codewords.len(),
            size,
            sub_dim,
            codewords,
            counts,
            accumulators,
            gamma,
        })
    }

    /// Initializes each codebook with `N` token sub-vectors drawn from
    /// `tokens`, without replacement when there are enough of them.
    pub fn from_samples<R: Rng + ?Sized>(
        tokens: &[&[f64]],
        num_books: usize,
        size: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = tokens
            .first()
            .ok_or_else(|| Error::EmptyInput("no tokens to initialize codebooks from".into()))?
            .len();
        if num_books == 0 || dim % num_books != 0 {
            return Err(Error::config(format!(
                "token width {dim} is not divisible by {num_books} codebooks"
            )));
        }
        let sub_dim = dim / num_books;
        let mut books = Vec::with_capacity(num_books);
        for m in 0..num_books {
            let picks: Vec<usize> = if tokens.len() >= size {
                sample(rng, tokens.len(), size).into_vec()
            } else {
                (0..size).map(|_| rng.random_range(0..tokens.len())).collect()
            };
            let mut book = Tensor2::zeros(size, sub_dim);
            for (k, &t) in picks.iter().enumerate() {
                book.row_mut(k)
                    .copy_from_slice(&tokens[t][m * sub_dim..(m + 1) * sub_dim]);
            }
            books.push(book);
        }
        Self::new(books, gamma)
    }

    pub fn num_books(&self) -> usize {
        self.num_books
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    pub fn token_dim(&self) -> usize {
        self.sub_dim * self.num_books
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn codebook(&self, m: usize) -> &Tensor2 {
        &self.codewords[m]
    }

    pub fn counts(&self, m: usize) -> &[f64] {
        &self.counts[m]
    }

    pub fn accumulator(&self, m: usize) -> &Tensor2 {
        &self.accumulators[m]
    }

    /// Concatenated codewords named by `code`.
    pub fn code_embedding(&self, code: &Code) -> Result<Vec<f64>> {
        if code.0.len() != self.num_books {
            return Err(Error::shape(format!(
                "code has {} components, expected {}",
                code.0.len(),
                self.num_books
            )));
        }
        let mut out = Vec::with_capacity(self.token_dim());
        for (m, &k) in code.0.iter().enumerate() {
            if k as usize >= self.size {
                return Err(Error::shape(format!(
                    "code component {k} out of range for codebook of {}",
                    self.size
                )));
            }
            out.extend_from_slice(self.codewords[m].row(k as usize));
        }
        Ok(out)
    }

    fn nearest(&self, m: usize, sub: &[f64]) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (k, row) in self.codewords[m].iter_rows().enumerate() {
            let d = squared_distance(row, sub);
            // strict comparison keeps the lowest index on ties
            if d < best_dist {
                best = k;
                best_dist = d;
            }
        }
        best
    }
}

/// Nearest-codeword quantization of one token.
pub fn quantize(token: &[f64], cb: &CodebookState) -> Result<QuantizedToken> {
    if token.len() != cb.token_dim() {
        return Err(Error::shape(format!(
            "token has width {}, codebooks expect {}",
            token.len(),
            cb.token_dim()
        )));
    }
    let mut code = Vec::with_capacity(cb.num_books);
    let mut embedding = Vec::with_capacity(token.len());
    for (m, sub) in token.chunks_exact(cb.sub_dim).enumerate() {
        let k = cb.nearest(m, sub);
        code.push(k as u32);
        embedding.extend_from_slice(cb.codewords[m].row(k));
    }
    Ok(QuantizedToken {
        code: Code(code),
        embedding,
        original: token.to_vec(),
    })
}

/// `Σ_i Σ_m ‖T_i^(m) − sg[T̃_i^(m)]‖²`. Summing over sub-vectors equals the
/// full squared distance, so the split is implicit.
pub fn commitment_loss(tokens: &TokenMatrix, quantized: &[QuantizedToken]) -> f64 {
    assert_eq!(
        tokens.k(),
        quantized.len(),
        "one quantized token per token is required"
    );
    tokens
        .tokens
        .iter_rows()
        .zip(quantized)
        .map(|(t, q)| squared_distance(t, &q.embedding))
        .sum()
}

/// Gradient of [`commitment_loss`] with respect to the original tokens. The
/// quantized side is a constant, so codewords get nothing.
pub fn commitment_gradient(tokens: &TokenMatrix, quantized: &[QuantizedToken]) -> Tensor2 {
    let mut g = Tensor2::zeros(tokens.k(), tokens.dim());
    for (i, (t, q)) in tokens.tokens.iter_rows().zip(quantized).enumerate() {
        for (gj, (a, b)) in g.row_mut(i).iter_mut().zip(t.iter().zip(&q.embedding)) {
            *gj = 2.0 * (a - b);
        }
    }
    g
}

/// Per-codebook assignments of one mini-batch: `(codeword index, sub-vector)`.
pub type Assignments = Vec<Vec<(usize, Vec<f64>)>>;

/// Splits quantized tokens into per-codebook assignments of their original
/// sub-vectors.
pub fn assignments_from(quantized: &[QuantizedToken], cb: &CodebookState) -> Assignments {
    let mut out: Assignments = vec![Vec::new(); cb.num_books];
    for q in quantized {
        for (m, sub) in q.original.chunks_exact(cb.sub_dim).enumerate() {
            out[m].push((q.code.0[m] as usize, sub.to_vec()));
        }
    }
    out
}

/// One EMA step over a mini-batch of assignments.
pub fn ema_update(cb: &mut CodebookState, assignments: &Assignments) -> Result<()> {
    if assignments.len() != cb.num_books {
        return Err(Error::shape(format!(
            "assignments cover {} codebooks, expected {}",
            assignments.len(),
            cb.num_books
        )));
    }
    let gamma = cb.gamma;
    for (m, batch) in assignments.iter().enumerate() {
        let mut hits = vec![0.0; cb.size];
        let mut sums = Tensor2::zeros(cb.size, cb.sub_dim);
        for (k, sub) in batch {
            if *k >= cb.size || sub.len() != cb.sub_dim {
                return Err(Error::shape(format!(
                    "assignment to codeword {k} with width {} does not fit codebook {m}",
                    sub.len()
                )));
            }
            hits[*k] += 1.0;
            for (s, v) in sums.row_mut(*k).iter_mut().zip(sub) {
                *s += v;
            }
        }
        for k in 0..cb.size {
            let count = cb.counts[m][k] * gamma + hits[k] * (1.0 - gamma);
            if !(count > 0.0) {
                return Err(Error::Numeric {
                    param: format!("codebook{m}.count{k}"),
                    detail: format!("EMA count fell to {count}"),
                });
            }
            cb.counts[m][k] = count;
            let acc = cb.accumulators[m].row_mut(k);
            for (a, s) in acc.iter_mut().zip(sums.row(k)) {
                *a = *a * gamma + s * (1.0 - gamma);
            }
            let acc = cb.accumulators[m].row(k).to_vec();
            for (c, a) in cb.codewords[m].row_mut(k).iter_mut().zip(&acc) {
                *c = a / count;
            }
        }
    }
    Ok(())
}
