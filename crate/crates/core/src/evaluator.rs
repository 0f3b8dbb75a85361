//! Ranking metrics, the latency bench and the sparsity sweep.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use crate::datasets::EvalQuery;
use crate::encoders::TokenMatrix;
use crate::error::{Error, Result};
use crate::indexer::{build_index, sparsity_metrics, BuildOptions, SparseInvertedIndex, SparsityReport};
use crate::model::Model;
use crate::numeric::Tensor2;
use crate::parallel::map_indexed;
use crate::quantizer::Code;
use crate::retriever::{exhaustive_topk_quantized, query_to_codes, retrieve_topk, retrieve_topk_counted, twotower_topk, AccessStats, RankedList};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingMetrics {
    pub k: usize,
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
}

/// Binary-gain recall, precision and NDCG at each `k`; ideal DCG is
/// truncated at `min(k, |relevant|)`.
pub fn evaluate_ranking(ranked: &[usize], relevant: &BTreeSet<usize>, ks: &[usize]) -> Result<Vec<RankingMetrics>> {
    if relevant.is_empty() {
        return Err(Error::Metric("relevant set is empty".into()));
    }
    if ks.contains(&0) {
        return Err(Error::Metric("k must be at least 1".into()));
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    Ok(ks
        .iter()
        .map(|&k| {
            let mut hits = 0usize;
            let mut dcg = 0.0;
            for (r, item) in ranked.iter().take(k).enumerate() {
                if relevant.contains(item) {
                    hits += 1;
                    dcg += discount(r + 1);
                }
            }
            let ideal: f64 = (1..=k.min(relevant.len())).map(discount).sum();
            RankingMetrics {
                k,
                recall: hits as f64 / relevant.len() as f64,
                precision: hits as f64 / k as f64,
                ndcg: dcg / ideal,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingSummary {
    pub samples: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
}

impl TimingSummary {
    pub fn from_samples(samples_us: &[f64]) -> Self {
        if samples_us.is_empty() {
            return Self {
                samples: 0,
                mean_us: 0.0,
                median_us: 0.0,
                p95_us: 0.0,
            };
        }
        let mut s = samples_us.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        };
        // nearest-rank percentile
        let p95 = s[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Self {
            samples: n,
            mean_us: s.iter().sum::<f64>() / n as f64,
            median_us: median,
            p95_us: p95,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub metrics: Vec<RankingMetrics>,
    pub queries: usize,
    pub query_time: Option<TimingSummary>,
    pub sparsity: Option<SparsityReport>,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&RankingMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,recall,precision,ndcg,queries,sparsity,average_items,mean_us,median_us,p95_us\n");
        for m in &self.metrics {
            let (sp, avg) = self.sparsity.map_or((String::new(), String::new()), |s| {
                (s.sparsity.to_string(), s.average_items.to_string())
            });
            let (mean, median, p95) = self.query_time.map_or((String::new(), String::new(), String::new()), |t| {
                (t.mean_us.to_string(), t.median_us.to_string(), t.p95_us.to_string())
            });
            let _ = writeln!(
                out,
                "{},{},{},{},{},{sp},{avg},{mean},{median},{p95}",
                m.k, m.recall, m.precision, m.ndcg, self.queries
            );
        }
        out
    }
}

/// Which retrieval path produces the rankings.
pub enum System<'a> {
    Index {
        model: &'a Model,
        index: &'a SparseInvertedIndex,
    },
    Exhaustive {
        model: &'a Model,
        item_tokens: &'a [TokenMatrix],
        serve_bias: f64,
    },
    TwoTower {
        model: &'a Model,
        items: &'a Tensor2,
    },
}

impl System<'_> {
    /// Top `k` unseen items for one query.
    pub fn rank(&self, q: &EvalQuery, k: usize) -> Result<RankedList> {
        let wide = k + q.seen.len();
        let list = match self {
            System::Index { model, index } => retrieve_topk(&query_to_codes(&q.history, model)?, index, wide)?,
            System::Exhaustive {
                model,
                item_tokens,
                serve_bias,
            } => exhaustive_topk_quantized(&model.quantize_query(&q.history)?, model, item_tokens, wide, *serve_bias)?,
            System::TwoTower { model, items } => twotower_topk(&model.query_embedding(&q.history)?, items, wide)?,
        };
        Ok(list.without(|i| q.seen.contains(&i), k))
    }
}

/// Mean metrics over `queries`; rankings may be computed on several workers,
/// aggregation is in query order.
pub fn evaluate_system(system: &System<'_>, queries: &[EvalQuery], ks: &[usize], workers: usize) -> Result<MetricsReport> {
    if queries.is_empty() {
        return Err(Error::Metric("no evaluation queries".into()));
    }
    let k_max = ks.iter().copied().max().ok_or_else(|| Error::Metric("no cutoffs given".into()))?;
    let per_query = map_indexed(queries.len(), workers, |i| {
        let q = &queries[i];
        let ranked = system.rank(q, k_max)?;
        let relevant: BTreeSet<usize> = q.relevant.iter().copied().collect();
        evaluate_ranking(&ranked.items(), &relevant, ks)
    });
    let mut sums = vec![(0.0, 0.0, 0.0); ks.len()];
    for m in per_query {
        for (s, r) in sums.iter_mut().zip(m?) {
            s.0 += r.recall;
            s.1 += r.precision;
            s.2 += r.ndcg;
        }
    }
    let n = queries.len() as f64;
    Ok(MetricsReport {
        metrics: ks
            .iter()
            .zip(sums)
            .map(|(&k, s)| RankingMetrics {
                k,
                recall: s.0 / n,
                precision: s.1 / n,
                ndcg: s.2 / n,
            })
            .collect(),
        queries: queries.len(),
        query_time: None,
        sparsity: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub sparcode_us: Vec<f64>,
    pub twotower_us: Vec<f64>,
    pub sparcode: TimingSummary,
    pub twotower: TimingSummary,
    /// Per-query posting accesses of the SparCode path.
    pub access: Vec<AccessStats>,
    pub corpus_size: usize,
}

impl BenchReport {
    /// No query read more posting entries than its addressed lists hold.
    pub fn never_scans_corpus(&self) -> bool {
        self.access.iter().all(|a| a.entries_read <= a.addressed_length)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("query,sparcode_us,twotower_us,lists_addressed,addressed_length,entries_read\n");
        for (i, ((s, t), a)) in self.sparcode_us.iter().zip(&self.twotower_us).zip(&self.access).enumerate() {
            let _ = writeln!(
                out,
                "{i},{s},{t},{},{},{}",
                a.lists_addressed, a.addressed_length, a.entries_read
            );
        }
        out
    }
}

/// Batch-size-1 wall time of `query_to_codes + retrieve_topk` and of exact
/// two-tower retrieval. One untimed warmup pass precedes the timed repeats.
pub fn latency_bench(
    model: &Model,
    index: &SparseInvertedIndex,
    baseline: &Model,
    baseline_items: &Tensor2,
    queries: &[Vec<usize>],
    k: usize,
    repeats: usize,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::config("bench.repeats must be at least 1"));
    }
    let sparcode = |h: &[usize], stats: &mut AccessStats| -> Result<RankedList> {
        let codes = query_to_codes(h, model)?;
        retrieve_topk_counted(&codes, index, k, stats)
    };
    let twotower = |h: &[usize]| -> Result<RankedList> { twotower_topk(&baseline.query_embedding(h)?, baseline_items, k) };
    for h in queries {
        sparcode(h, &mut AccessStats::default())?;
        twotower(h)?;
    }
    let mut report = BenchReport {
        sparcode_us: Vec::new(),
        twotower_us: Vec::new(),
        sparcode: TimingSummary::from_samples(&[]),
        twotower: TimingSummary::from_samples(&[]),
        access: Vec::new(),
        corpus_size: index.corpus_size,
    };
    for _ in 0..repeats {
        for h in queries {
            let mut stats = AccessStats::default();
            let t0 = Instant::now();
            let r = sparcode(h, &mut stats)?;
            report.sparcode_us.push(t0.elapsed().as_secs_f64() * 1e6);
            std::hint::black_box(r);
            report.access.push(stats);

            let t0 = Instant::now();
            let r = twotower(h)?;
            report.twotower_us.push(t0.elapsed().as_secs_f64() * 1e6);
            std::hint::black_box(r);
        }
    }
    report.sparcode = TimingSummary::from_samples(&report.sparcode_us);
    report.twotower = TimingSummary::from_samples(&report.twotower_us);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub serve_bias: f64,
    pub cached_entries: usize,
    pub sparsity: SparsityReport,
    pub metrics: MetricsReport,
    pub median_us: f64,
}

pub const SWEEP_HEADER: &str = "serve_bias,cached_entries,sparsity,average_items,recall@10,recall@50,ndcg@50,median_us";

/// One index and one evaluation per `b̃`, rows sorted by `b̃` ascending.
pub fn sparsity_sweep(
    model: &Model,
    item_tokens: &[TokenMatrix],
    codes: &[Code],
    queries: &[EvalQuery],
    grid: &[f64],
    workers: usize,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::config("eval.bias_grid must not be empty"));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(grid.len());
    for b in grid {
        let index = build_index(
            model,
            item_tokens,
            codes,
            &BuildOptions {
                serve_bias: b,
                workers,
                top_l: None,
            },
        )?;
        let sparsity = sparsity_metrics(&index)?;
        let mut metrics = evaluate_system(&System::Index { model, index: &index }, queries, &[10, 50], workers)?;
        let mut times = Vec::with_capacity(queries.len());
        for q in queries {
            let t0 = Instant::now();
            let r = retrieve_topk(&query_to_codes(&q.history, model)?, &index, 50)?;
            times.push(t0.elapsed().as_secs_f64() * 1e6);
            std::hint::black_box(r);
        }
        metrics.sparsity = Some(sparsity);
        let timing = TimingSummary::from_samples(&times);
        metrics.query_time = Some(timing);
        rows.push(SweepRow {
            serve_bias: b,
            cached_entries: index.cached_entries(),
            sparsity,
            metrics,
            median_us: timing.median_us,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let m10 = r.metrics.at(10).map_or(0.0, |m| m.recall);
        let m50 = r.metrics.at(50).copied();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.serve_bias,
            r.cached_entries,
            r.sparsity.sparsity,
            r.sparsity.average_items,
            m10,
            m50.map_or(0.0, |m| m.recall),
            m50.map_or(0.0, |m| m.ndcg),
            r.median_us
        );
    }
    out
}

/// Row whose sparsity is closest to `target`; ties go to the earlier row.
pub fn nearest_sparsity(rows: &[SweepRow], target: f64) -> Option<&SweepRow> {
    rows.iter().min_by(|a, b| {
        (a.sparsity.sparsity - target)
            .abs()
            .total_cmp(&(b.sparsity.sparsity - target).abs())
    })
}
