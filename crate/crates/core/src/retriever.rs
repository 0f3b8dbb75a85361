//! Serving: query → codes → posting merge → top-k, plus the exhaustive
//! oracle and exact two-tower retrieval.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use crate::encoders::TokenMatrix;
use crate::error::{Error, Result};
use crate::indexer::SparseInvertedIndex;
use crate::model::Model;
use crate::numeric::{dot, Tensor2};
use crate::quantizer::{Code, QuantizedToken};

/// `(item, score)` in descending score order, ties by ascending item id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub entries: Vec<(usize, f64)>,
    pub k: usize,
}

impl RankedList {
    pub fn items(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    /// Drops `excluded` items and keeps at most `k` of the rest.
    pub fn without(&self, excluded: impl Fn(usize) -> bool, k: usize) -> RankedList {
        RankedList {
            entries: self.entries.iter().copied().filter(|e| !excluded(e.0)).take(k).collect(),
            k,
        }
    }
}

#[derive(Clone, Copy)]
struct Candidate(f64, usize);

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    /// Greater means ranked earlier.
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

/// Bounded-heap top-k under (−score, item_id).
pub fn top_k(scores: impl IntoIterator<Item = (usize, f64)>, k: usize) -> RankedList {
    let mut heap: BinaryHeap<std::cmp::Reverse<Candidate>> = BinaryHeap::with_capacity(k + 1);
    for (item, score) in scores {
        let c = Candidate(score, item);
        if heap.len() < k {
            heap.push(std::cmp::Reverse(c));
        } else if let Some(worst) = heap.peek() {
            if c > worst.0 {
                heap.pop();
                heap.push(std::cmp::Reverse(c));
            }
        }
    }
    let mut entries: Vec<Candidate> = heap.into_iter().map(|r| r.0).collect();
    entries.sort_by(|a, b| b.cmp(a));
    RankedList {
        entries: entries.into_iter().map(|c| (c.1, c.0)).collect(),
        k,
    }
}

/// Posting accesses made by one retrieval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AccessStats {
    pub lists_addressed: usize,
    pub addressed_length: usize,
    pub entries_read: usize,
}

pub fn query_to_codes(history: &[usize], model: &Model) -> Result<Vec<Code>> {
    Ok(model.quantize_query(history)?.into_iter().map(|q| q.code).collect())
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    Ok(())
}

/// Merges the posting lists addressed by `codes`, summing an item's cached
/// scores over code occurrences in code order.
pub fn retrieve_topk_counted(codes: &[Code], index: &SparseInvertedIndex, k: usize, stats: &mut AccessStats) -> Result<RankedList> {
    check_k(k)?;
    let mut acc: HashMap<usize, f64> = HashMap::new();
    for code in codes {
        stats.lists_addressed += 1;
        if let Some(list) = index.posting(code) {
            stats.addressed_length += list.len();
            for &(item, score) in &list.entries {
                stats.entries_read += 1;
                *acc.entry(item).or_insert(0.0) += score;
            }
        }
    }
    Ok(top_k(acc.into_iter().filter(|e| e.1 > 0.0), k))
}

pub fn retrieve_topk(codes: &[Code], index: &SparseInvertedIndex, k: usize) -> Result<RankedList> {
    retrieve_topk_counted(codes, index, k, &mut AccessStats::default())
}

/// Scores every item with the full model under serve bias `b̃` and keeps
/// the top `k` with a positive score.
pub fn exhaustive_topk_quantized(
    quantized: &[QuantizedToken],
    model: &Model,
    item_tokens: &[TokenMatrix],
    k: usize,
    serve_bias: f64,
) -> Result<RankedList> {
    check_k(k)?;
    let mut scores = Vec::with_capacity(item_tokens.len());
    for (item, t) in item_tokens.iter().enumerate() {
        let y = model.score_item(quantized, t, serve_bias)?;
        if y > 0.0 {
            scores.push((item, y));
        }
    }
    Ok(top_k(scores, k))
}

pub fn exhaustive_topk(
    history: &[usize],
    model: &Model,
    item_tokens: &[TokenMatrix],
    k: usize,
    serve_bias: f64,
) -> Result<RankedList> {
    let quantized = model.quantize_query(history)?;
    exhaustive_topk_quantized(&quantized, model, item_tokens, k, serve_bias)
}

/// Exact dot-product retrieval against a cached item matrix.
pub fn twotower_topk(query: &[f64], items: &Tensor2, k: usize) -> Result<RankedList> {
    check_k(k)?;
    if query.len() != items.cols() {
        return Err(Error::shape(format!(
            "query has width {}, item embeddings have {}",
            query.len(),
            items.cols()
        )));
    }
    Ok(top_k(items.iter_rows().map(|r| dot(query, r)).enumerate(), k))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn code(c: &[u32]) -> Code {
        Code(c.to_vec())
    }

    fn index(lists: &[(&[u32], &[(usize, f64)])]) -> SparseInvertedIndex {
        let mut postings = std::collections::BTreeMap::new();
        for (c, entries) in lists {
            postings.insert(code(c), crate::indexer::PostingList::from_unsorted(entries.to_vec()));
        }
        SparseInvertedIndex {
            num_books: 2,
            codebook_size: 32,
            serve_bias: 0.0,
            num_codes: postings.len(),
            postings,
            corpus_size: 30,
        }
    }

    #[test]
    fn walk_through_union_and_sum() {
        let idx = index(&[
            (&[1, 1], &[(9, 0.5), (24, 0.4)]),
            (&[1, 2], &[(9, 0.3), (13, 0.6), (25, 0.2)]),
        ]);
        let r = retrieve_topk(&[code(&[1, 1]), code(&[1, 2])], &idx, 10).unwrap();
        let mut items = r.items();
        items.sort();
        assert_eq!(items, vec![9, 13, 24, 25]);
        assert_eq!(r.entries[0], (9, 0.5 + 0.3));
    }

    #[test]
    fn single_code_is_a_prefix() {
        let idx = index(&[(&[0, 0], &[(1, 3.0), (2, 2.0), (3, 1.0)])]);
        let r = retrieve_topk(&[code(&[0, 0])], &idx, 2).unwrap();
        assert_eq!(r.entries, vec![(1, 3.0), (2, 2.0)]);
    }

    #[test]
    fn summation_and_duplicates() {
        let idx = index(&[(&[0, 0], &[(4, 1.0)]), (&[0, 1], &[(4, 0.5)])]);
        let r = retrieve_topk(&[code(&[0, 0]), code(&[0, 1])], &idx, 1).unwrap();
        assert_eq!(r.entries, vec![(4, 1.5)]);
        let r = retrieve_topk(&[code(&[0, 0]), code(&[0, 0])], &idx, 1).unwrap();
        assert_eq!(r.entries, vec![(4, 2.0)]);
    }

    #[test]
    fn missing_code_is_empty_and_counted() {
        let idx = index(&[(&[0, 0], &[(4, 1.0), (5, 0.2)])]);
        let mut stats = AccessStats::default();
        let r = retrieve_topk_counted(&[code(&[3, 3]), code(&[0, 0])], &idx, 5, &mut stats).unwrap();
        assert_eq!(r.entries.len(), 2);
        assert_eq!(
            stats,
            AccessStats {
                lists_addressed: 2,
                addressed_length: 2,
                entries_read: 2
            }
        );
        assert!(retrieve_topk(&[], &idx, 0).is_err());
    }

    #[test]
    fn two_tower_examples() {
        let items = Tensor2::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(twotower_topk(&[1.0, 0.0], &items, 1).unwrap().entries, vec![(0, 2.0)]);
        assert_eq!(twotower_topk(&[1.0, 0.0], &items, 2).unwrap().entries, vec![(0, 2.0), (1, 0.0)]);
        let ortho = Tensor2::from_rows(&[vec![0.0, 1.0], vec![0.0, 2.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(twotower_topk(&[1.0, 0.0], &ortho, 3).unwrap().items(), vec![0, 1, 2]);
        assert!(matches!(twotower_topk(&[1.0], &items, 1), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn heap_matches_full_sort(
            scores in proptest::collection::vec(-3i32..3, 0..40),
            k in 1usize..12,
        ) {
            let pairs: Vec<(usize, f64)> = scores.iter().enumerate().map(|(i, s)| (i, *s as f64 * 0.5)).collect();
            let mut sorted = pairs.clone();
            sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            sorted.truncate(k);
            prop_assert_eq!(top_k(pairs, k).entries, sorted);
        }
    }
}
