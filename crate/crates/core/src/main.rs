use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sparcode::config::RunConfig;
use sparcode::evaluator::sweep_csv;
use sparcode::harness::{self, GRADIENT_TOLERANCE};
use sparcode::{Error, Result};

/// Candidate matching with discrete query codes and a sparse inverted index.
///
/// Outputs go to `<run.out_dir>/<run.name>/`. Configuration is layered:
/// built-in defaults, then `--config FILE`, then `--set key=value` and the
/// dedicated flags. Exit codes: 0 success, 2 configuration error, 3 data
/// error, 4 numeric error.
#[derive(Parser, Debug)]
#[command(name = "sparcode", version)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set model.N=128`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Seed for data generation, splitting, initialization and sampling (run.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for indexing and evaluation (run.workers). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Run name (run.name).
    #[arg(long, global = true)]
    name: Option<String>,

    /// Output root (run.out_dir).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic interaction dataset and its hidden affinities.
    GenData,
    /// Train SparCode and the two-tower baseline; writes checkpoints and training logs.
    Train,
    /// Precompute the sparse inverted index from the trained checkpoint.
    BuildIndex,
    /// Retrieve top-k items for histories read from a file or stdin.
    Query {
        /// One query per line as comma-separated item ids; `-` reads stdin.
        #[arg(long, default_value = "-")]
        input: String,
        /// Number of items per query.
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Evaluate index retrieval and the baseline on the test queries; writes metrics.csv.
    Evaluate,
    /// Build and evaluate one index per serve bias; writes sweep.csv.
    Sweep,
    /// Time batch-size-1 retrieval for both systems; writes bench.csv.
    Bench,
    /// Run the index/oracle equivalence and gradient check suites.
    Selftest,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut overrides = common.set.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("run.seed={s}"));
    }
    if let Some(w) = common.workers {
        overrides.push(format!("run.workers={w}"));
    }
    if let Some(n) = &common.name {
        overrides.push(format!("run.name={n}"));
    }
    if let Some(d) = &common.out_dir {
        overrides.push(format!("run.out_dir={}", d.display()));
    }
    RunConfig::resolve(common.config.as_deref(), &overrides)
}

fn read_input(input: &str) -> Result<String> {
    if input == "-" {
        let mut s = String::new();
        std::io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| Error::io("<stdin>", e))?;
        Ok(s)
    } else {
        std::fs::read_to_string(input).map_err(|e| Error::io(input, e))
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::GenData => {
            let path = harness::gen_data(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Train => {
            let s = harness::train_run(&cfg)?;
            for (name, out) in [("sparcode", &s.sparcode), ("twotower", &s.baseline)] {
                let last = out.log.last();
                println!(
                    "{name}: best epoch {} of {}, final total loss {}, best val recall@{} {}",
                    out.best_epoch,
                    out.log.len(),
                    last.map_or(f64::NAN, |e| e.total),
                    cfg.train.val_k,
                    out.log
                        .get(out.best_epoch.saturating_sub(1))
                        .and_then(|e| e.val_recall)
                        .unwrap_or(f64::NAN)
                );
            }
        }
        Command::BuildIndex => {
            let index = harness::build_index_run(&cfg)?;
            let s = sparcode::indexer::sparsity_metrics(&index)?;
            println!(
                "codes {} cached entries {} serve bias {} sparsity {} average items {}",
                index.num_codes,
                index.cached_entries(),
                index.serve_bias,
                s.sparsity,
                s.average_items
            );
        }
        Command::Query { input, k } => {
            print!("{}", harness::query_run(&cfg, &read_input(&input)?, k)?);
        }
        Command::Evaluate => {
            let e = harness::evaluate_run(&cfg)?;
            print!("{}", harness::metrics_csv(&[("sparcode", &e.sparcode), ("twotower", &e.twotower)]));
        }
        Command::Sweep => {
            let s = harness::sweep_run(&cfg)?;
            print!("{}", sweep_csv(&s.rows));
            print!("{}", harness::sweep_highlights(&s.rows, 0.99));
        }
        Command::Bench => {
            let b = harness::bench_run(&cfg)?;
            for (name, t) in [("sparcode", b.sparcode), ("twotower", b.twotower)] {
                println!(
                    "{name}: samples {} mean {:.1}us median {:.1}us p95 {:.1}us",
                    t.samples, t.mean_us, t.median_us, t.p95_us
                );
            }
            let read: usize = b.access.iter().map(|a| a.entries_read).sum();
            let addressed: usize = b.access.iter().map(|a| a.addressed_length).sum();
            println!(
                "posting entries read {read} of {addressed} addressed (corpus {} per query); never scans corpus: {}",
                b.corpus_size,
                b.never_scans_corpus()
            );
        }
        Command::Selftest => {
            let dir = harness::open_run_dir(&cfg)?;
            let report = harness::selftest(cfg.seed)?;
            let text = report.to_text(GRADIENT_TOLERANCE);
            std::fs::write(dir.join("selftest.txt"), &text).map_err(|e| Error::io(dir.join("selftest.txt"), e))?;
            print!("{text}");
            if !report.oracle.passes() {
                return Err(Error::Contract("index retrieval disagrees with the exhaustive oracle".into()));
            }
            if !report.passes(GRADIENT_TOLERANCE) {
                return Err(Error::Numeric {
                    param: "gradients".into(),
                    detail: "analytic and finite-difference gradients disagree".into(),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
