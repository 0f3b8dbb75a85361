//! Precomputed (code, item) sparse scores stored as an inverted index.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::encoders::TokenMatrix;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::parallel::map_indexed;
use crate::quantizer::Code;
use crate::scorer::sparse_score;

pub const INDEX_MAGIC: &str = "SPARCODE-INDEX";
pub const INDEX_VERSION: &str = "v1";
pub const DEFAULT_GRID_CAP: usize = 1 << 20;

/// Entries sorted by score descending, ties by ascending item id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PostingList {
    pub entries: Vec<(usize, f64)>,
}

impl PostingList {
    pub fn from_unsorted(mut entries: Vec<(usize, f64)>) -> Self {
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseInvertedIndex {
    pub num_books: usize,
    pub codebook_size: usize,
    pub serve_bias: f64,
    /// Only codes with at least one cached entry are present.
    pub postings: BTreeMap<Code, PostingList>,
    pub num_codes: usize,
    pub corpus_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityReport {
    pub sparsity: f64,
    pub average_items: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodePolicy {
    FullGrid,
    Observed,
    /// Full grid when it fits under the cap, observed codes otherwise.
    Auto,
}

impl fmt::Display for CodePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodePolicy::FullGrid => "full_grid",
            CodePolicy::Observed => "observed",
            CodePolicy::Auto => "auto",
        })
    }
}

impl FromStr for CodePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_grid" => Ok(CodePolicy::FullGrid),
            "observed" => Ok(CodePolicy::Observed),
            "auto" => Ok(CodePolicy::Auto),
            _ => Err(Error::config(format!("unknown code policy {s:?}"))),
        }
    }
}

fn grid_size(m: usize, n: usize) -> Option<usize> {
    let mut total: usize = 1;
    for _ in 0..m {
        total = total.checked_mul(n)?;
    }
    Some(total)
}

/// All `N^M` codes in lexicographic order, or the sorted distinct codes in
/// `observed`.
pub fn enumerate_codes(m: usize, n: usize, policy: CodePolicy, cap: usize, observed: &[Code]) -> Result<Vec<Code>> {
    let fits = grid_size(m, n).is_some_and(|g| g <= cap);
    let full = match policy {
        CodePolicy::FullGrid if !fits => {
            return Err(Error::config(format!(
                "full grid of {n}^{m} codes exceeds the cap of {cap}; use index.policy = observed"
            )))
        }
        CodePolicy::FullGrid => true,
        CodePolicy::Observed => false,
        CodePolicy::Auto => fits,
    };
    if full {
        let total = grid_size(m, n).expect("checked");
        let mut out = Vec::with_capacity(total);
        let mut cur = vec![0u32; m];
        for _ in 0..total {
            out.push(Code(cur.clone()));
            for slot in cur.iter_mut().rev() {
                *slot += 1;
                if (*slot as usize) < n {
                    break;
                }
                *slot = 0;
            }
        }
        Ok(out)
    } else {
        if let Some(bad) = observed.iter().find(|c| c.0.len() != m || c.0.iter().any(|k| *k as usize >= n)) {
            return Err(Error::shape(format!("observed code {bad} is not a valid {m}-part code over {n} codewords")));
        }
        let mut out = observed.to_vec();
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl SparseInvertedIndex {
    /// Index from a dense `codes × items` matrix of already thresholded
    /// scores.
    pub fn from_scores(
        num_books: usize,
        codebook_size: usize,
        serve_bias: f64,
        codes: &[Code],
        scores: &[Vec<f64>],
    ) -> Result<Self> {
        if codes.len() != scores.len() {
            return Err(Error::shape("one score row per code is required"));
        }
        let corpus_size = scores.first().map_or(0, Vec::len);
        let mut postings = BTreeMap::new();
        for (code, row) in codes.iter().zip(scores) {
            if row.len() != corpus_size {
                return Err(Error::shape("score rows differ in length"));
            }
            let list = PostingList::from_unsorted(
                row.iter().enumerate().filter(|(_, s)| **s > 0.0).map(|(i, s)| (i, *s)).collect(),
            );
            if !list.is_empty() {
                postings.insert(code.clone(), list);
            }
        }
        Ok(Self {
            num_books,
            codebook_size,
            serve_bias,
            postings,
            num_codes: codes.len(),
            corpus_size,
        })
    }

    pub fn cached_entries(&self) -> usize {
        self.postings.values().map(PostingList::len).sum()
    }

    pub fn posting(&self, code: &Code) -> Option<&PostingList> {
        self.postings.get(code)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{INDEX_MAGIC} {INDEX_VERSION} {} {} {} {} {}\n",
            self.num_books, self.codebook_size, self.serve_bias, self.num_codes, self.corpus_size
        );
        for (code, list) in &self.postings {
            for (item, score) in &list.entries {
                out.push_str(&format!("{code}\t{item}\t{score}\n"));
            }
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let format_err = |detail: String| Error::Format {
            path: path.into(),
            detail,
        };
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| format_err("empty index file".into()))?
            .split_whitespace()
            .collect();
        if header.len() != 7 || header[0] != INDEX_MAGIC || header[1] != INDEX_VERSION {
            return Err(format_err(format!(
                "expected header `{INDEX_MAGIC} {INDEX_VERSION} M N b~ num_codes corpus_size`"
            )));
        }
        let count = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| format_err(format!("header field {what} {s:?} is not a count")))
        };
        let num_books = count(header[2], "M")?;
        let codebook_size = count(header[3], "N")?;
        let serve_bias = header[4]
            .parse::<f64>()
            .map_err(|_| format_err(format!("header field b~ {:?} is not a number", header[4])))?;
        let num_codes = count(header[5], "num_codes")?;
        let corpus_size = count(header[6], "corpus_size")?;

        let mut postings: BTreeMap<Code, PostingList> = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let parse_err = |detail: String| Error::Parse {
                path: path.into(),
                line: i + 2,
                detail,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(parse_err("expected code<TAB>item<TAB>score".into()));
            }
            let code: Code = fields[0].parse().map_err(|e: Error| parse_err(e.to_string()))?;
            if code.0.len() != num_books || code.0.iter().any(|k| *k as usize >= codebook_size) {
                return Err(parse_err(format!("code {code} does not fit M={num_books}, N={codebook_size}")));
            }
            let item: usize = fields[1]
                .parse()
                .map_err(|_| parse_err(format!("bad item id {:?}", fields[1])))?;
            let score: f64 = fields[2]
                .parse()
                .map_err(|_| parse_err(format!("bad score {:?}", fields[2])))?;
            if item >= corpus_size || !(score > 0.0) || !score.is_finite() {
                return Err(parse_err(format!("entry ({item}, {score}) is outside the corpus or not positive")));
            }
            let list = postings.entry(code).or_default();
            if let Some(&(prev_item, prev)) = list.entries.last() {
                let ordered = score < prev || (score == prev && item > prev_item);
                if !ordered {
                    return Err(parse_err("posting list is not sorted by (score desc, item asc)".into()));
                }
            }
            list.entries.push((item, score));
        }
        Ok(Self {
            num_books,
            codebook_size,
            serve_bias,
            postings,
            num_codes,
            corpus_size,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    pub serve_bias: f64,
    pub workers: usize,
    /// Keep only the best `L` entries per code. Off by default.
    pub top_l: Option<usize>,
}

/// Scores every code against every item and keeps `ReLU(S + b̃) > 0`.
pub fn build_index(model: &Model, item_tokens: &[TokenMatrix], codes: &[Code], opts: &BuildOptions) -> Result<SparseInvertedIndex> {
    let cb = model.codebooks()?;
    if item_tokens.len() != model.config.num_items {
        return Err(Error::shape(format!(
            "corpus has {} items, model expects {}",
            item_tokens.len(),
            model.config.num_items
        )));
    }
    let lists = map_indexed(codes.len(), opts.workers, |c| -> Result<PostingList> {
        let q = cb.code_embedding(&codes[c])?;
        let mut entries = Vec::new();
        for (item, tokens) in item_tokens.iter().enumerate() {
            let y = sparse_score(model.params.scorer.score(&q, tokens)?, opts.serve_bias);
            if y > 0.0 {
                entries.push((item, y));
            }
        }
        let mut list = PostingList::from_unsorted(entries);
        if let Some(l) = opts.top_l {
            list.entries.truncate(l);
        }
        Ok(list)
    });
    let mut postings = BTreeMap::new();
    for (code, list) in codes.iter().zip(lists) {
        let list = list?;
        if !list.is_empty() {
            postings.insert(code.clone(), list);
        }
    }
    let mut distinct = codes.to_vec();
    distinct.sort();
    distinct.dedup();
    Ok(SparseInvertedIndex {
        num_books: cb.num_books(),
        codebook_size: cb.size(),
        serve_bias: opts.serve_bias,
        postings,
        num_codes: distinct.len(),
        corpus_size: item_tokens.len(),
    })
}

/// `sparsity = 1 − cached/(codes·|I|)`, `average_items = cached/codes`.
pub fn sparsity_metrics(index: &SparseInvertedIndex) -> Result<SparsityReport> {
    if index.num_codes == 0 || index.corpus_size == 0 {
        return Err(Error::Metric("sparsity needs at least one code and one item".into()));
    }
    let cached = index.cached_entries() as f64;
    Ok(SparsityReport {
        sparsity: 1.0 - cached / (index.num_codes as f64 * index.corpus_size as f64),
        average_items: cached / index.num_codes as f64,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{Example, ModelConfig};
    use crate::quantizer::CodebookState;
    use crate::scorer::{interaction_score, InteractionKind};

    fn codes(list: &[&[u32]]) -> Vec<Code> {
        list.iter().map(|c| Code(c.to_vec())).collect()
    }

    #[test]
    fn full_grid_examples() {
        assert_eq!(
            enumerate_codes(1, 3, CodePolicy::FullGrid, DEFAULT_GRID_CAP, &[]).unwrap(),
            codes(&[&[0], &[1], &[2]])
        );
        assert_eq!(
            enumerate_codes(2, 2, CodePolicy::FullGrid, DEFAULT_GRID_CAP, &[]).unwrap(),
            codes(&[&[0, 0], &[0, 1], &[1, 0], &[1, 1]])
        );
        let seen = codes(&[&[1, 0], &[1, 0]]);
        assert_eq!(enumerate_codes(2, 2, CodePolicy::Observed, 4, &seen).unwrap(), codes(&[&[1, 0]]));
        assert!(matches!(
            enumerate_codes(4, 64, CodePolicy::FullGrid, DEFAULT_GRID_CAP, &[]),
            Err(Error::Config(_))
        ));
        let seen4 = codes(&[&[1, 2, 3, 63]]);
        assert_eq!(enumerate_codes(4, 64, CodePolicy::Auto, DEFAULT_GRID_CAP, &seen4).unwrap(), seen4);
    }

    fn toy() -> SparseInvertedIndex {
        SparseInvertedIndex::from_scores(1, 2, 0.0, &codes(&[&[0], &[1]]), &[vec![1.2, 0.0, 0.3], vec![0.0, 0.0, 2.0]])
            .unwrap()
    }

    #[test]
    fn toy_postings_and_sparsity() {
        let idx = toy();
        assert_eq!(idx.posting(&Code(vec![0])).unwrap().entries, vec![(0, 1.2), (2, 0.3)]);
        assert_eq!(idx.posting(&Code(vec![1])).unwrap().entries, vec![(2, 2.0)]);
        let r = sparsity_metrics(&idx).unwrap();
        assert_eq!(r.sparsity, 0.5);
        assert_eq!(r.average_items, 1.5);
    }

    #[test]
    fn empty_and_dense_sparsity() {
        let c = codes(&[&[0], &[1]]);
        let empty = SparseInvertedIndex::from_scores(1, 2, 0.0, &c, &[vec![0.0; 3], vec![0.0; 3]]).unwrap();
        assert_eq!(
            sparsity_metrics(&empty).unwrap(),
            SparsityReport {
                sparsity: 1.0,
                average_items: 0.0
            }
        );
        let dense = SparseInvertedIndex::from_scores(1, 2, 0.0, &c, &[vec![1.0; 3], vec![1.0; 3]]).unwrap();
        assert_eq!(
            sparsity_metrics(&dense).unwrap(),
            SparsityReport {
                sparsity: 0.0,
                average_items: 3.0
            }
        );
    }

    #[test]
    fn text_round_trip_is_exact() {
        let idx = SparseInvertedIndex::from_scores(
            2,
            3,
            -0.1 / 3.0,
            &codes(&[&[0, 2], &[1, 1]]),
            &[vec![0.1 + 0.2, 1e-300, 0.0], vec![std::f64::consts::PI, 0.0, 7.0]],
        )
        .unwrap();
        let text = idx.to_text();
        let back = SparseInvertedIndex::from_text(&text, Path::new("i")).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_text(), text);
        assert!(text.starts_with("SPARCODE-INDEX v1 2 3 "));
    }

    #[test]
    fn malformed_index_files() {
        let p = Path::new("i");
        assert!(matches!(SparseInvertedIndex::from_text("", p), Err(Error::Format { .. })));
        let bad = "SPARCODE-INDEX v1 1 2 0 2 3\n0\t0\t0.5\n0\t1\t0.9\n";
        assert!(matches!(SparseInvertedIndex::from_text(bad, p), Err(Error::Parse { line: 3, .. })));
        let neg = "SPARCODE-INDEX v1 1 2 0 2 3\n0\t0\t-0.5\n";
        assert!(SparseInvertedIndex::from_text(neg, p).is_err());
    }

    fn trained_like_model() -> (Model, Vec<TokenMatrix>, Vec<Code>) {
        let cfg = ModelConfig {
            num_items: 25,
            dim: 4,
            token_dim: 4,
            codebook_size: 3,
            scorer: InteractionKind::InnerPdnn,
            scorer_hidden: vec![6],
            tokenizer_hidden: vec![4],
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = Model::init(cfg, &mut rng).unwrap();
        let ex = Example {
            history: vec![1, 2, 3, 4, 5, 6],
            positive: 0,
            negatives: vec![],
        };
        let toks = m.batch_query_tokens(&[ex.clone(), Example { history: vec![9, 11], ..ex }]).unwrap();
        let refs: Vec<&[f64]> = toks.iter().map(Vec::as_slice).collect();
        m.codebooks = Some(CodebookState::from_samples(&refs, 2, 3, 0.99, &mut rng).unwrap());
        let items = m.all_item_tokens().unwrap();
        let grid = enumerate_codes(2, 3, CodePolicy::FullGrid, DEFAULT_GRID_CAP, &[]).unwrap();
        (m, items, grid)
    }

    #[test]
    fn stored_scores_match_direct_evaluation() {
        let (m, items, grid) = trained_like_model();
        let cb = m.codebooks().unwrap();
        for b in [0.0, -0.05, 0.05] {
            let idx = build_index(
                &m,
                &items,
                &grid,
                &BuildOptions {
                    serve_bias: b,
                    workers: 1,
                    top_l: None,
                },
            )
            .unwrap();
            for code in &grid {
                let q = crate::quantizer::quantize(&cb.code_embedding(code).unwrap(), cb).unwrap();
                assert_eq!(&q.code, code);
                for (item, t) in items.iter().enumerate() {
                    let expected = sparse_score(interaction_score(&q, t, &m.params.scorer).unwrap(), b);
                    let stored = idx
                        .posting(code)
                        .and_then(|l| l.entries.iter().find(|e| e.0 == item))
                        .map_or(0.0, |e| e.1);
                    assert!((stored - expected).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn build_is_order_independent_and_worker_independent() {
        let (m, items, grid) = trained_like_model();
        let opts = BuildOptions {
            serve_bias: 0.0,
            workers: 1,
            top_l: None,
        };
        let a = build_index(&m, &items, &grid, &opts).unwrap();
        let mut reversed = grid.clone();
        reversed.reverse();
        let b = build_index(&m, &items, &reversed, &BuildOptions { workers: 3, ..opts }).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn top_l_truncates() {
        let (m, items, grid) = trained_like_model();
        let idx = build_index(
            &m,
            &items,
            &grid,
            &BuildOptions {
                serve_bias: 10.0,
                workers: 1,
                top_l: Some(2),
            },
        )
        .unwrap();
        assert!(idx.postings.values().all(|l| l.len() == 2));
    }

    proptest! {
        #[test]
        fn cached_count_is_monotone_in_bias(b1 in -3.0f64..3.0, delta in 0.0f64..2.0) {
            let (m, items, grid) = trained_like_model();
            let build = |b| build_index(&m, &items, &grid, &BuildOptions { serve_bias: b, workers: 1, top_l: None }).unwrap();
            prop_assert!(build(b1).cached_entries() <= build(b1 + delta).cached_entries());
        }
    }
}
