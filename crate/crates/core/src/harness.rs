//! Pipeline stages behind the command-line tool, and the self-test suites.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{BiasGrid, RunConfig, AUTO_SPARSITY_TARGETS};
use crate::datasets::{
    eval_queries, generate_synthetic, parse_interactions, sequences, split_dataset, write_interactions, write_truth,
    Dataset, EvalQuery, SplitMode, Stage, SyntheticConfig,
};
use crate::encoders::{PoolKind, TokenMatrix};
use crate::error::{Error, Result};
use crate::evaluator::{
    evaluate_system, latency_bench, nearest_sparsity, sparsity_sweep, sweep_csv, BenchReport, MetricsReport, SweepRow,
    System, TimingSummary,
};
use crate::indexer::{build_index, enumerate_codes, sparsity_metrics, BuildOptions, CodePolicy, SparseInvertedIndex};
use crate::model::{BatchOptions, Example, Model, ModelConfig};
use crate::numeric::{check_parameters, GradCheckReport};
use crate::parallel::map_indexed;
use crate::quantizer::{Code, CodebookState};
use crate::retriever::{exhaustive_topk, query_to_codes, retrieve_topk};
use crate::scorer::InteractionKind;
use crate::trainer::{train, train_log_csv, LossConfig, TrainConfig, TrainOutcome};

pub const CONFIG_FILE: &str = "config.resolved";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const BASELINE_FILE: &str = "baseline_checkpoint.txt";
pub const INDEX_FILE: &str = "index.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const BASELINE_LOG_FILE: &str = "baseline_train_log.csv";
pub const TRUTH_FILE: &str = "truth.csv";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Creates the run directory and echoes the resolved config into it.
pub fn open_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join(CONFIG_FILE), &cfg.to_text())?;
    Ok(dir)
}

/// Writes the synthetic interactions and their hidden affinities.
pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = open_run_dir(cfg)?;
    let data = generate_synthetic(&cfg.synthetic)?;
    let path = cfg.data_file();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_interactions(&path, &data.dataset)?;
    write_truth(&dir.join(TRUTH_FILE), &data)?;
    Ok(path)
}

/// Loads the interaction file against the configured vocabulary sizes.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.data_file();
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let records = parse_interactions(&text, &path)?;
    Dataset::new(cfg.synthetic.num_users, cfg.synthetic.num_items, records)
}

pub struct Prepared {
    pub dataset: Dataset,
    pub train_sequences: Vec<Vec<usize>>,
    pub val: Vec<EvalQuery>,
    pub test: Vec<EvalQuery>,
}

pub fn prepare_dataset(dataset: Dataset, ratios: [f64; 3], mode: SplitMode, seed: u64) -> Result<Prepared> {
    let split = split_dataset(&dataset, ratios, mode, seed)?;
    let n = dataset.num_users;
    Ok(Prepared {
        train_sequences: sequences(&split.train, n),
        val: eval_queries(&split, n, Stage::Validation),
        test: eval_queries(&split, n, Stage::Test),
        dataset,
    })
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    prepare_dataset(load_data(cfg)?, cfg.ratios, cfg.split, cfg.seed)
}

pub struct TrainSummary {
    pub sparcode: TrainOutcome,
    pub baseline: TrainOutcome,
}

/// Trains SparCode and the two-tower baseline on the same data and budget.
pub fn train_models(model: &ModelConfig, train_cfg: &TrainConfig, data: &Prepared, seed: u64) -> Result<TrainSummary> {
    let sparcode = Model::init(model.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let sparcode = train(sparcode, &data.train_sequences, &data.val, train_cfg)?;
    let baseline = Model::init(model.two_tower(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let baseline = train(baseline, &data.train_sequences, &data.val, train_cfg)?;
    Ok(TrainSummary { sparcode, baseline })
}

pub fn train_run(cfg: &RunConfig) -> Result<TrainSummary> {
    let dir = open_run_dir(cfg)?;
    let data = prepare(cfg)?;
    let summary = train_models(&cfg.model, &cfg.train, &data, cfg.seed)?;
    checkpoint::save(&summary.sparcode.model, &dir.join(CHECKPOINT_FILE))?;
    write(&dir.join(TRAIN_LOG_FILE), &train_log_csv(&summary.sparcode.log))?;
    checkpoint::save(&summary.baseline.model, &dir.join(BASELINE_FILE))?;
    write(&dir.join(BASELINE_LOG_FILE), &train_log_csv(&summary.baseline.log))?;
    Ok(summary)
}

pub fn load_checkpoint(cfg: &RunConfig) -> Result<Model> {
    checkpoint::load(&cfg.run_dir().join(CHECKPOINT_FILE))
}

pub fn load_baseline(cfg: &RunConfig) -> Result<Model> {
    checkpoint::load(&cfg.run_dir().join(BASELINE_FILE))
}

pub fn load_index(cfg: &RunConfig) -> Result<SparseInvertedIndex> {
    SparseInvertedIndex::load(&cfg.run_dir().join(INDEX_FILE))
}

/// Codes to precompute: the full grid or the codes of every evaluation
/// query, as the policy dictates.
pub fn index_codes(cfg: &RunConfig, model: &Model, data: &Prepared) -> Result<Vec<Code>> {
    let mut observed = Vec::new();
    if cfg.policy != CodePolicy::FullGrid {
        for q in data.val.iter().chain(&data.test) {
            observed.extend(query_to_codes(&q.history, model)?);
        }
    }
    enumerate_codes(
        model.config.num_books,
        model.config.codebook_size,
        cfg.policy,
        cfg.grid_cap,
        &observed,
    )
}

pub fn build_index_run(cfg: &RunConfig) -> Result<SparseInvertedIndex> {
    let dir = open_run_dir(cfg)?;
    let model = load_checkpoint(cfg)?;
    let data = prepare(cfg)?;
    let codes = index_codes(cfg, &model, &data)?;
    let index = build_index(
        &model,
        &model.all_item_tokens()?,
        &codes,
        &BuildOptions {
            serve_bias: cfg.serve_bias.resolve(model.trained_bias()),
            workers: cfg.workers,
            top_l: (cfg.top_l > 0).then_some(cfg.top_l),
        },
    )?;
    index.save(&dir.join(INDEX_FILE))?;
    Ok(index)
}

/// One query per line (comma-separated item ids) → `item_id<TAB>score`
/// lines, queries separated by a blank line.
pub fn query_run(cfg: &RunConfig, input: &str, k: usize) -> Result<String> {
    let model = load_checkpoint(cfg)?;
    let index = load_index(cfg)?;
    let mut out = String::new();
    let mut first = true;
    for (i, line) in input.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let history: Vec<usize> = line
            .split(',')
            .map(|x| {
                x.trim().parse().map_err(|_| Error::Parse {
                    path: PathBuf::from("<query>"),
                    line: i + 1,
                    detail: format!("bad item id {x:?}"),
                })
            })
            .collect::<Result<_>>()?;
        let ranked = retrieve_topk(&query_to_codes(&history, &model)?, &index, k)?;
        if !first {
            out.push('\n');
        }
        first = false;
        for (item, score) in ranked.entries {
            let _ = writeln!(out, "{item}\t{score}");
        }
    }
    Ok(out)
}

/// Index metrics with per-query timing of the serving path.
pub fn evaluate_index(model: &Model, index: &SparseInvertedIndex, queries: &[EvalQuery], ks: &[usize], workers: usize) -> Result<MetricsReport> {
    let system = System::Index { model, index };
    let mut report = evaluate_system(&system, queries, ks, workers)?;
    let k_max = ks.iter().copied().max().unwrap_or(1);
    let mut times = Vec::with_capacity(queries.len());
    for q in queries {
        let t0 = Instant::now();
        let r = system.rank(q, k_max)?;
        times.push(t0.elapsed().as_secs_f64() * 1e6);
        std::hint::black_box(r);
    }
    report.query_time = Some(TimingSummary::from_samples(&times));
    report.sparsity = Some(sparsity_metrics(index)?);
    Ok(report)
}

pub fn metrics_csv(reports: &[(&str, &MetricsReport)]) -> String {
    let mut out = String::new();
    for (i, (name, report)) in reports.iter().enumerate() {
        for (j, line) in report.to_csv().lines().enumerate() {
            if j == 0 {
                if i == 0 {
                    let _ = writeln!(out, "system,{line}");
                }
                continue;
            }
            let _ = writeln!(out, "{name},{line}");
        }
    }
    out
}

pub struct EvaluationSummary {
    pub sparcode: MetricsReport,
    pub twotower: MetricsReport,
}

pub fn evaluate_run(cfg: &RunConfig) -> Result<EvaluationSummary> {
    let dir = open_run_dir(cfg)?;
    let model = load_checkpoint(cfg)?;
    let baseline = load_baseline(cfg)?;
    let index = load_index(cfg)?;
    let data = prepare(cfg)?;
    let sparcode = evaluate_index(&model, &index, &data.test, &cfg.ks, cfg.workers)?;
    let items = baseline.item_embeddings()?;
    let twotower = evaluate_system(
        &System::TwoTower {
            model: &baseline,
            items: &items,
        },
        &data.test,
        &cfg.ks,
        cfg.workers,
    )?;
    write(&dir.join(METRICS_FILE), &metrics_csv(&[("sparcode", &sparcode), ("twotower", &twotower)]))?;
    Ok(EvaluationSummary { sparcode, twotower })
}

/// Every interaction score `S` between `codes` and the corpus.
pub fn interaction_scores(model: &Model, item_tokens: &[TokenMatrix], codes: &[Code], workers: usize) -> Result<Vec<f64>> {
    let cb = model.codebooks()?;
    let rows = map_indexed(codes.len(), workers, |c| -> Result<Vec<f64>> {
        let q = cb.code_embedding(&codes[c])?;
        item_tokens.iter().map(|t| model.params.scorer.score(&q, t)).collect()
    });
    let mut out = Vec::with_capacity(codes.len() * item_tokens.len());
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

/// `b̃` values whose indexes have roughly the target sparsities: a pair is
/// dropped when `S ≤ −b̃`, so `b̃ = −quantile(S, t)`; target 0 sits just
/// above `−min S`.
pub fn bias_grid_for(scores: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scores to place a bias grid on".into()));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let mut grid: Vec<f64> = targets
        .iter()
        .map(|&t| {
            if t <= 0.0 {
                let lo = s[0];
                -lo + 1e-6 * lo.abs().max(1.0)
            } else {
                let idx = ((t * n as f64).ceil() as usize).clamp(1, n) - 1;
                -s[idx]
            }
        })
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    Ok(grid)
}

pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub grid: Vec<f64>,
}

pub fn sweep_model(cfg: &RunConfig, model: &Model, data: &Prepared) -> Result<SweepSummary> {
    let codes = index_codes(cfg, model, data)?;
    let items = model.all_item_tokens()?;
    let grid = match &cfg.bias_grid {
        BiasGrid::Values(v) => v.clone(),
        BiasGrid::Auto => bias_grid_for(&interaction_scores(model, &items, &codes, cfg.workers)?, &AUTO_SPARSITY_TARGETS)?,
    };
    let rows = sparsity_sweep(model, &items, &codes, &data.test, &grid, cfg.workers)?;
    Ok(SweepSummary { rows, grid })
}

pub fn sweep_run(cfg: &RunConfig) -> Result<SweepSummary> {
    let dir = open_run_dir(cfg)?;
    let model = load_checkpoint(cfg)?;
    let data = prepare(cfg)?;
    let summary = sweep_model(cfg, &model, &data)?;
    write(&dir.join(SWEEP_FILE), &sweep_csv(&summary.rows))?;
    Ok(summary)
}

/// Human-readable lines comparing the densest sweep row with the row
/// nearest `target` sparsity.
pub fn sweep_highlights(rows: &[SweepRow], target: f64) -> String {
    let mut out = String::new();
    let describe = |r: &SweepRow| {
        format!(
            "sparsity={:.4} average_items={:.2} recall@10={:.4} recall@50={:.4}",
            r.sparsity.sparsity,
            r.sparsity.average_items,
            r.metrics.at(10).map_or(0.0, |m| m.recall),
            r.metrics.at(50).map_or(0.0, |m| m.recall)
        )
    };
    if let Some(r) = nearest_sparsity(rows, 0.0) {
        let _ = writeln!(out, "densest: {}", describe(r));
    }
    if let Some(r) = nearest_sparsity(rows, target) {
        let _ = writeln!(out, "nearest {target}: {}", describe(r));
    }
    out
}

pub fn bench_run(cfg: &RunConfig) -> Result<BenchReport> {
    let dir = open_run_dir(cfg)?;
    let model = load_checkpoint(cfg)?;
    let baseline = load_baseline(cfg)?;
    let index = load_index(cfg)?;
    let data = prepare(cfg)?;
    let queries: Vec<Vec<usize>> = data.test.iter().take(cfg.bench_queries).map(|q| q.history.clone()).collect();
    let items = baseline.item_embeddings()?;
    let report = latency_bench(&model, &index, &baseline, &items, &queries, cfg.bench_k, cfg.bench_repeats)?;
    write(&dir.join(BENCH_FILE), &report.to_csv())?;
    Ok(report)
}

/// Outcome of comparing index retrieval with the exhaustive oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub comparisons: usize,
    pub mismatches: usize,
    pub first_mismatch: Option<String>,
    pub trained_bias: f64,
}

impl OracleReport {
    pub fn passes(&self) -> bool {
        self.comparisons > 0 && self.mismatches == 0
    }
}

/// Trains a small SparCode model (500 items, M=2, N=8, K_u=2, InnerPDNN),
/// indexes the full code grid at `b̃ ∈ {b, b − 1}` and compares index
/// retrieval with exhaustive scoring for `num_queries` random queries at
/// k ∈ {5, 10, 50}.
pub fn oracle_equivalence(seed: u64, num_queries: usize) -> Result<OracleReport> {
    let synthetic = SyntheticConfig {
        num_users: 300,
        num_items: 500,
        latent_dim: 16,
        interactions_per_user: 10,
        alpha: 1.0,
        tau: 0.5,
        seed,
    };
    let data = prepare_dataset(generate_synthetic(&synthetic)?.dataset, [0.8, 0.1, 0.1], SplitMode::LeaveLastOut, seed)?;
    let config = ModelConfig {
        num_items: 500,
        dim: 16,
        token_dim: 16,
        query_tokens: 2,
        num_books: 2,
        codebook_size: 8,
        scorer: InteractionKind::InnerPdnn,
        scorer_hidden: vec![16, 16],
        tokenizer_hidden: vec![16],
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: 1,
        batch_size: 128,
        seed,
        loss: LossConfig {
            negatives_per_positive: 10,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    let model = Model::init(config, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let model = train(model, &data.train_sequences, &data.val, &train_cfg)?.model;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let users: Vec<&Vec<usize>> = data.train_sequences.iter().filter(|s| !s.is_empty()).collect();
    let queries: Vec<Vec<usize>> = (0..num_queries)
        .map(|_| {
            let seq = users[rng.random_range(0..users.len())];
            let mut h = seq.clone();
            h.shuffle(&mut rng);
            h.truncate(rng.random_range(1..=seq.len()));
            h
        })
        .collect();

    let items = model.all_item_tokens()?;
    let codes = enumerate_codes(2, 8, CodePolicy::FullGrid, 1 << 20, &[])?;
    let trained = model.trained_bias();
    let mut report = OracleReport {
        comparisons: 0,
        mismatches: 0,
        first_mismatch: None,
        trained_bias: trained,
    };
    for serve_bias in [trained, trained - 1.0] {
        let index = build_index(
            &model,
            &items,
            &codes,
            &BuildOptions {
                serve_bias,
                workers: 1,
                top_l: None,
            },
        )?;
        for (qi, h) in queries.iter().enumerate() {
            let codes = query_to_codes(h, &model)?;
            for k in [5, 10, 50] {
                let fast = retrieve_topk(&codes, &index, k)?;
                let slow = exhaustive_topk(h, &model, &items, k, serve_bias)?;
                report.comparisons += 1;
                if fast != slow {
                    report.mismatches += 1;
                    report.first_mismatch.get_or_insert_with(|| {
                        format!("query {qi} k={k} b~={serve_bias}: index {:?} vs oracle {:?}", fast.items(), slow.items())
                    });
                }
            }
        }
    }
    Ok(report)
}

/// Finite-difference result for one interaction kind.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCase {
    pub kind: InteractionKind,
    pub inputs: usize,
    pub report: GradCheckReport,
}

fn random_examples<R: Rng>(rng: &mut R, num_items: usize) -> Vec<Example> {
    (0..2)
        .map(|_| {
            let len = rng.random_range(1..=4);
            Example {
                history: (0..len).map(|_| rng.random_range(0..num_items)).collect(),
                positive: rng.random_range(0..num_items),
                negatives: (0..3).map(|_| rng.random_range(0..num_items)).collect(),
            }
        })
        .collect()
}

/// Checks the full training objective (matching + commitment) against
/// central differences for every trainable parameter (embeddings, both
/// tokenizers, scorer and threshold `b`), `inputs` random models and
/// batches per interaction kind.
pub fn gradient_suite(seed: u64, inputs: usize, h: f64) -> Result<Vec<GradientCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for kind in InteractionKind::ALL {
        let mut total = GradCheckReport::default();
        for i in 0..inputs {
            let config = ModelConfig {
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
                pool: if i % 2 == 0 { PoolKind::Mean } else { PoolKind::Attention },
                per_token_bias: i % 4 >= 2,
                ..ModelConfig::default()
            };
            let mut model = Model::init(config, &mut rng)?;
            for b in model.params.scorer.bias.iter_mut() {
                *b = rng.random_range(-0.2..0.3);
            }
            let examples = random_examples(&mut rng, 9);
            let tokens = model.batch_query_tokens(&examples)?;
            let refs: Vec<&[f64]> = tokens.iter().map(Vec::as_slice).collect();
            model.codebooks = Some(CodebookState::from_samples(&refs, 2, 3, 0.99, &mut rng)?);
            let opts = BatchOptions {
                signature: true,
                ..BatchOptions::default()
            };
            let lambda = opts.lambda.unwrap_or(0.0);
            let res = model.batch(&examples, &opts)?;
            let report = check_parameters(&model.params, &res.grads, h, |p| {
                let mut probe = model.clone();
                probe.params = p.clone();
                match probe.batch(&examples, &opts) {
                    Ok(r) => (r.objective(lambda), r.signature),
                    Err(_) => (f64::NAN, Vec::new()),
                }
            });
            total.merge(report);
        }
        out.push(GradientCase { kind, inputs, report: total });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub oracle: OracleReport,
    pub gradients: Vec<GradientCase>,
}

impl SelftestReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.oracle.passes() && self.gradients.iter().all(|g| g.report.passes(tol))
    }

    /// Deterministic text summary; contains no timings.
    pub fn to_text(&self, tol: f64) -> String {
        let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
        let mut out = String::new();
        let o = &self.oracle;
        let _ = writeln!(
            out,
            "oracle_equivalence comparisons={} mismatches={} trained_bias={} {}",
            o.comparisons,
            o.mismatches,
            o.trained_bias,
            verdict(o.passes())
        );
        if let Some(m) = &o.first_mismatch {
            let _ = writeln!(out, "  first mismatch: {m}");
        }
        for g in &self.gradients {
            let _ = writeln!(
                out,
                "gradient kind={} inputs={} checked={} skipped={} max_rel_error={:e} {}",
                g.kind,
                g.inputs,
                g.report.checked,
                g.report.skipped,
                g.report.max_rel_error,
                verdict(g.report.passes(tol))
            );
        }
        out
    }
}

pub const GRADIENT_TOLERANCE: f64 = 1e-4;

pub fn selftest(seed: u64) -> Result<SelftestReport> {
    Ok(SelftestReport {
        oracle: oracle_equivalence(seed, 200)?,
        gradients: gradient_suite(seed, 20, 1e-5)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_grid_hits_target_sparsities() {
        let scores: Vec<f64> = (0..1000).map(|i| i as f64 / 100.0 - 3.0).collect();
        let grid = bias_grid_for(&scores, &[0.0, 0.5, 0.9]).unwrap();
        assert_eq!(grid.len(), 3);
        for (b, target) in grid.iter().rev().zip([0.0, 0.5, 0.9]) {
            let dropped = scores.iter().filter(|s| **s + b <= 0.0).count() as f64 / scores.len() as f64;
            assert!((dropped - target).abs() <= 1e-3, "b={b} dropped={dropped} target={target}");
        }
        assert!(bias_grid_for(&[], &[0.0]).is_err());
    }

    #[test]
    fn metrics_csv_prefixes_systems() {
        let r = MetricsReport {
            metrics: vec![crate::evaluator::RankingMetrics {
                k: 10,
                recall: 0.5,
                precision: 0.05,
                ndcg: 0.25,
            }],
            queries: 4,
            query_time: None,
            sparsity: None,
        };
        let text = metrics_csv(&[("a", &r), ("b", &r)]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("system,k,recall"));
        assert!(lines[1].starts_with("a,10,0.5,"));
        assert!(lines[2].starts_with("b,10,0.5,"));
    }

    #[test]
    fn gradient_suite_small() {
        let cases = gradient_suite(3, 2, 1e-5).unwrap();
        assert_eq!(cases.len(), 5);
        for c in &cases {
            assert!(c.report.passes(GRADIENT_TOLERANCE), "{c:?}");
        }
    }

    #[test]
    fn pipeline_in_a_temp_dir() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "run.out_dir = {}\nrun.name = t\ndata.num_users = 60\ndata.num_items = 40\ndata.interactions_per_user = 6\n\
             model.N = 4\nmodel.D = 8\nmodel.D_T = 8\nscorer.hidden = 8\nmodel.tokenizer_hidden = 8\n\
             train.epochs = 2\ntrain.batch_size = 32\nloss.negatives = 5\nindex.policy = full_grid\n\
             eval.k = 5,10,50\nbench.repeats = 1\nbench.queries = 5\nbench.k = 10",
            dir.path().display()
        );
        let cfg = RunConfig::parse(&text).unwrap();
        gen_data(&cfg).unwrap();
        let summary = train_run(&cfg).unwrap();
        assert_eq!(summary.sparcode.log.len(), 2);
        let index = build_index_run(&cfg).unwrap();
        assert_eq!(index.num_codes, 16);
        let loaded = load_index(&cfg).unwrap();
        assert_eq!(loaded, index);
        let eval = evaluate_run(&cfg).unwrap();
        assert_eq!(eval.sparcode.metrics.len(), 3);
        let out = query_run(&cfg, "1,2,3\n\n4\n", 3).unwrap();
        assert!(out.lines().filter(|l| !l.is_empty()).all(|l| l.split('\t').count() == 2));
        assert!(query_run(&cfg, "1,x", 3).is_err());
        let sweep = sweep_run(&cfg).unwrap();
        assert!(sweep.rows.len() >= 2);
        let bench = bench_run(&cfg).unwrap();
        assert!(bench.never_scans_corpus());
        assert!(!bench.sparcode_us.is_empty() && bench.sparcode_us.len() <= 5);
        for f in [CONFIG_FILE, CHECKPOINT_FILE, INDEX_FILE, METRICS_FILE, SWEEP_FILE, TRAIN_LOG_FILE] {
            assert!(cfg.run_dir().join(f).exists(), "{f}");
        }
        let echoed = fs::read_to_string(cfg.run_dir().join(CONFIG_FILE)).unwrap();
        assert_eq!(RunConfig::parse(&echoed).unwrap(), cfg);
    }
}
