//! Run configuration: flat `key = value` text with dotted keys, layered as
//! defaults < file < command-line overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datasets::{SplitMode, SyntheticConfig};
use crate::error::{Error, Result};
use crate::indexer::{CodePolicy, DEFAULT_GRID_CAP};
use crate::model::{Arch, ModelConfig};
use crate::scorer::InteractionKind;
use crate::trainer::{LossConfig, TrainConfig};

/// Serving threshold `b̃`: the trained `b` or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ServeBias {
    Trained,
    Value(f64),
}

impl ServeBias {
    pub fn resolve(self, trained: f64) -> f64 {
        match self {
            ServeBias::Trained => trained,
            ServeBias::Value(v) => v,
        }
    }
}

impl fmt::Display for ServeBias {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ServeBias::Trained => f.write_str("trained"),
            ServeBias::Value(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for ServeBias {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "trained" {
            return Ok(ServeBias::Trained);
        }
        parse_f64(s).map(ServeBias::Value)
    }
}

/// `b̃` values of a sparsity sweep. `Auto` places them at score quantiles so
/// the sweep spans sparsity 0 to 0.99.
#[derive(Debug, Clone, PartialEq)]
pub enum BiasGrid {
    Auto,
    Values(Vec<f64>),
}

/// Target sparsities of the automatic grid.
pub const AUTO_SPARSITY_TARGETS: [f64; 8] = [0.0, 0.25, 0.5, 0.75, 0.85, 0.9, 0.95, 0.99];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub workers: usize,

    /// Interaction CSV; empty means `<run dir>/interactions.csv`.
    pub data_path: String,
    pub synthetic: SyntheticConfig,
    pub split: SplitMode,
    pub ratios: [f64; 3],

    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,

    pub serve_bias: ServeBias,
    pub policy: CodePolicy,
    pub grid_cap: usize,
    /// 0 keeps every positive entry.
    pub top_l: usize,

    pub ks: Vec<usize>,
    pub bias_grid: BiasGrid,

    pub bench_repeats: usize,
    pub bench_k: usize,
    pub bench_queries: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synthetic = SyntheticConfig::default();
        let model = ModelConfig {
            num_items: synthetic.num_items,
            ..ModelConfig::default()
        };
        let train = TrainConfig::default();
        Self {
            name: "default".into(),
            out_dir: PathBuf::from("run"),
            seed: 0,
            workers: 1,
            data_path: String::new(),
            synthetic,
            split: SplitMode::LeaveLastOut,
            ratios: [0.8, 0.1, 0.1],
            model,
            loss: train.loss.clone(),
            train,
            serve_bias: ServeBias::Trained,
            policy: CodePolicy::Auto,
            grid_cap: DEFAULT_GRID_CAP,
            top_l: 0,
            ks: vec![10, 50],
            bias_grid: BiasGrid::Auto,
            bench_repeats: 3,
            bench_k: 50,
            bench_queries: 200,
        }
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::config(format!("expected a number, got {s:?}")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::config(format!("expected a non-negative integer, got {s:?}")))
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("expected true or false, got {s:?}"))),
    }
}

fn parse_list<T>(s: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let inner = s.trim();
    let inner = inner.strip_prefix('[').unwrap_or(inner);
    let inner = inner.strip_suffix(']').unwrap_or(inner).trim();
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(|x| item(x.trim())).collect()
}

fn list<T: fmt::Display>(v: &[T]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(","))
}

fn split_mode(s: &str) -> Result<SplitMode> {
    match s {
        "by_user" => Ok(SplitMode::ByUser),
        "leave_last_out" => Ok(SplitMode::LeaveLastOut),
        _ => Err(Error::config(format!("unknown split mode {s:?}"))),
    }
}

fn split_name(m: SplitMode) -> &'static str {
    match m {
        SplitMode::ByUser => "by_user",
        SplitMode::LeaveLastOut => "leave_last_out",
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "run.name",
    "run.out_dir",
    "run.seed",
    "run.workers",
    "data.path",
    "data.num_users",
    "data.num_items",
    "data.latent_dim",
    "data.interactions_per_user",
    "data.alpha",
    "data.tau",
    "data.split",
    "data.ratios",
    "model.D",
    "model.D_T",
    "model.K_u",
    "model.K_c",
    "model.M",
    "model.N",
    "model.gamma",
    "model.pool",
    "model.tokenizer_hidden",
    "model.per_token_bias",
    "model.bias_init",
    "model.max_history",
    "scorer.kind",
    "scorer.hidden",
    "loss.lambda",
    "loss.negatives",
    "loss.commitment",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.l2_embedding",
    "train.dropout",
    "train.freeze_codebooks",
    "train.val_k",
    "index.serve_bias",
    "index.policy",
    "index.grid_cap",
    "index.top_l",
    "eval.k",
    "eval.bias_grid",
    "bench.repeats",
    "bench.k",
    "bench.queries",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "run.name" => self.name = v.to_string(),
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            "run.seed" => self.seed = v.parse().map_err(|_| Error::config(format!("run.seed: expected an integer, got {v:?}")))?,
            "run.workers" => self.workers = parse_usize(v)?,
            "data.path" => self.data_path = v.to_string(),
            "data.num_users" => self.synthetic.num_users = parse_usize(v)?,
            "data.num_items" => self.synthetic.num_items = parse_usize(v)?,
            "data.latent_dim" => self.synthetic.latent_dim = parse_usize(v)?,
            "data.interactions_per_user" => self.synthetic.interactions_per_user = parse_usize(v)?,
            "data.alpha" => self.synthetic.alpha = parse_f64(v)?,
            "data.tau" => self.synthetic.tau = parse_f64(v)?,
            "data.split" => self.split = split_mode(v)?,
            "data.ratios" => {
                let r = parse_list(v, parse_f64)?;
                self.ratios = r
                    .try_into()
                    .map_err(|_| Error::config("data.ratios needs exactly three values"))?;
            }
            "model.D" => self.model.dim = parse_usize(v)?,
            "model.D_T" => self.model.token_dim = parse_usize(v)?,
            "model.K_u" => self.model.query_tokens = parse_usize(v)?,
            "model.K_c" => self.model.item_tokens = parse_usize(v)?,
            "model.M" => self.model.num_books = parse_usize(v)?,
            "model.N" => self.model.codebook_size = parse_usize(v)?,
            "model.gamma" => self.model.gamma = parse_f64(v)?,
            "model.pool" => self.model.pool = v.parse()?,
            "model.tokenizer_hidden" => self.model.tokenizer_hidden = parse_list(v, parse_usize)?,
            "model.per_token_bias" => self.model.per_token_bias = parse_bool(v)?,
            "model.bias_init" => self.model.bias_init = parse_f64(v)?,
            "model.max_history" => self.model.max_history = parse_usize(v)?,
            "scorer.kind" => self.model.scorer = v.parse()?,
            "scorer.hidden" => self.model.scorer_hidden = parse_list(v, parse_usize)?,
            "loss.lambda" => self.loss.lambda = parse_f64(v)?,
            "loss.negatives" => self.loss.negatives_per_positive = parse_usize(v)?,
            "loss.commitment" => self.loss.commitment = parse_bool(v)?,
            "train.epochs" => self.train.epochs = parse_usize(v)?,
            "train.batch_size" => self.train.batch_size = parse_usize(v)?,
            "train.lr" => self.train.lr = parse_f64(v)?,
            "train.l2_embedding" => self.train.l2_embedding = parse_f64(v)?,
            "train.dropout" => self.train.dropout = parse_f64(v)?,
            "train.freeze_codebooks" => self.train.freeze_codebooks = parse_bool(v)?,
            "train.val_k" => self.train.val_k = parse_usize(v)?,
            "index.serve_bias" => self.serve_bias = v.parse()?,
            "index.policy" => self.policy = v.parse()?,
            "index.grid_cap" => self.grid_cap = parse_usize(v)?,
            "index.top_l" => self.top_l = parse_usize(v)?,
            "eval.k" => self.ks = parse_list(v, parse_usize)?,
            "eval.bias_grid" => {
                self.bias_grid = if v == "auto" {
                    BiasGrid::Auto
                } else {
                    BiasGrid::Values(parse_list(v, parse_f64)?)
                }
            }
            "bench.repeats" => self.bench_repeats = parse_usize(v)?,
            "bench.k" => self.bench_k = parse_usize(v)?,
            "bench.queries" => self.bench_queries = parse_usize(v)?,
            _ => return Err(Error::Config(format!("unknown key: {key}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "run.name" => self.name.clone(),
            "run.out_dir" => self.out_dir.display().to_string(),
            "run.seed" => self.seed.to_string(),
            "run.workers" => self.workers.to_string(),
            "data.path" => self.data_path.clone(),
            "data.num_users" => self.synthetic.num_users.to_string(),
            "data.num_items" => self.synthetic.num_items.to_string(),
            "data.latent_dim" => self.synthetic.latent_dim.to_string(),
            "data.interactions_per_user" => self.synthetic.interactions_per_user.to_string(),
            "data.alpha" => self.synthetic.alpha.to_string(),
            "data.tau" => self.synthetic.tau.to_string(),
            "data.split" => split_name(self.split).to_string(),
            "data.ratios" => list(&self.ratios),
            "model.D" => self.model.dim.to_string(),
            "model.D_T" => self.model.token_dim.to_string(),
            "model.K_u" => self.model.query_tokens.to_string(),
            "model.K_c" => self.model.item_tokens.to_string(),
            "model.M" => self.model.num_books.to_string(),
            "model.N" => self.model.codebook_size.to_string(),
            "model.gamma" => self.model.gamma.to_string(),
            "model.pool" => self.model.pool.to_string(),
            "model.tokenizer_hidden" => list(&self.model.tokenizer_hidden),
            "model.per_token_bias" => self.model.per_token_bias.to_string(),
            "model.bias_init" => self.model.bias_init.to_string(),
            "model.max_history" => self.model.max_history.to_string(),
            "scorer.kind" => self.model.scorer.to_string(),
            "scorer.hidden" => list(&self.model.scorer_hidden),
            "loss.lambda" => self.loss.lambda.to_string(),
            "loss.negatives" => self.loss.negatives_per_positive.to_string(),
            "loss.commitment" => self.loss.commitment.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.l2_embedding" => self.train.l2_embedding.to_string(),
            "train.dropout" => self.train.dropout.to_string(),
            "train.freeze_codebooks" => self.train.freeze_codebooks.to_string(),
            "train.val_k" => self.train.val_k.to_string(),
            "index.serve_bias" => self.serve_bias.to_string(),
            "index.policy" => self.policy.to_string(),
            "index.grid_cap" => self.grid_cap.to_string(),
            "index.top_l" => self.top_l.to_string(),
            "eval.k" => list(&self.ks),
            "eval.bias_grid" => match &self.bias_grid {
                BiasGrid::Auto => "auto".into(),
                BiasGrid::Values(v) => list(v),
            },
            "bench.repeats" => self.bench_repeats.to_string(),
            "bench.k" => self.bench_k.to_string(),
            "bench.queries" => self.bench_queries.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.into(),
                line: i + 1,
                detail: format!("expected `key = value`, found {line:?}"),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Checks every constraint and propagates shared fields.
    pub fn finish(mut self) -> Result<Self> {
        self.model.num_items = self.synthetic.num_items;
        self.synthetic.seed = self.seed;
        self.train.seed = self.seed;
        self.train.workers = self.workers;
        self.train.loss = self.loss.clone();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("run.name must be a non-empty plain name"));
        }
        if self.workers == 0 {
            return Err(Error::config("run.workers must be at least 1"));
        }
        self.synthetic.validate()?;
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|r| *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("data.ratios must be non-negative and sum to 1, got {sum}")));
        }
        self.model.validate()?;
        if self.model.arch != Arch::SparCode {
            return Err(Error::config("the run model must be the sparcode architecture"));
        }
        if self.model.scorer_hidden.is_empty() && matches!(self.model.scorer, InteractionKind::Dnn | InteractionKind::InnerPdnn) {
            return Err(Error::config("scorer.hidden must list at least one width for dnn and inner_pdnn"));
        }
        self.train.validate()?;
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::config("eval.k must list cutoffs of at least 1"));
        }
        if let BiasGrid::Values(v) = &self.bias_grid {
            if v.is_empty() || v.iter().any(|b| !b.is_finite()) {
                return Err(Error::config("eval.bias_grid must be `auto` or a non-empty list of numbers"));
            }
        }
        if let ServeBias::Value(b) = self.serve_bias {
            if !b.is_finite() {
                return Err(Error::config("index.serve_bias must be finite"));
            }
        }
        if self.bench_repeats == 0 || self.bench_k == 0 || self.bench_queries == 0 {
            return Err(Error::config("bench.repeats, bench.k and bench.queries must be at least 1"));
        }
        Ok(())
    }

    /// Defaults, then `file` (if any), then `overrides`.
    pub fn resolve<S: AsRef<str>>(file: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text, path)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.finish()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, Path::new("<config>"))?;
        cfg.finish()
    }

    /// Fully resolved echo; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = self.get(key).expect("every listed key has a value");
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    pub fn data_file(&self) -> PathBuf {
        if self.data_path.is_empty() {
            self.run_dir().join("interactions.csv")
        } else {
            PathBuf::from(&self.data_path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.model.num_books, 2);
        assert_eq!(cfg.model.codebook_size, 256);
        assert_eq!(cfg.model.query_tokens, 2);
        assert_eq!(cfg.loss.lambda, 0.25);
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.model.scorer_hidden, vec![256, 256, 256]);
        assert_eq!(cfg.train.loss.negatives_per_positive, 50);
    }

    #[test]
    fn cli_beats_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "model.N = 64\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["model.N=128"]).unwrap();
        assert_eq!(cfg.model.codebook_size, 128);
        let cfg = RunConfig::resolve(Some(&path), &[] as &[&str]).unwrap();
        assert_eq!(cfg.model.codebook_size, 64);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("foo=1").unwrap_err();
        assert_eq!(err.to_string(), "config error: unknown key: foo");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn token_width_must_split_into_books() {
        let err = RunConfig::parse("model.D_T = 15\nmodel.M = 2").unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn bad_lines_and_values() {
        assert!(matches!(RunConfig::parse("model.N"), Err(Error::Parse { line: 1, .. })));
        assert!(RunConfig::parse("model.N = many").is_err());
        assert!(RunConfig::parse("data.ratios = 0.5,0.5").is_err());
        assert!(RunConfig::parse("data.ratios = 0.5,0.4,0.2").is_err());
        assert!(RunConfig::parse("scorer.kind = attention").is_err());
        assert!(RunConfig::parse("eval.k = 0").is_err());
    }

    #[test]
    fn comments_lists_and_brackets() {
        let cfg = RunConfig::parse("# comment\nscorer.hidden = [8, 4] # trailing\nmodel.tokenizer_hidden = []\neval.bias_grid = -1,0,1.5").unwrap();
        assert_eq!(cfg.model.scorer_hidden, vec![8, 4]);
        assert!(cfg.model.tokenizer_hidden.is_empty());
        assert_eq!(cfg.bias_grid, BiasGrid::Values(vec![-1.0, 0.0, 1.5]));
    }

    #[test]
    fn echo_round_trips() {
        let text = "model.N = 64\nindex.serve_bias = -0.1\nloss.lambda = 0.3333333333333333\nrun.seed = 7\neval.bias_grid = 0.1,0.2";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let d = RunConfig::parse("").unwrap();
        assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn every_key_is_settable() {
        let d = RunConfig::parse("").unwrap();
        for key in KEYS {
            let mut c = d.clone();
            c.set(key, &d.get(key).unwrap()).unwrap();
            assert_eq!(c, d, "{key}");
        }
    }

    #[test]
    fn shared_fields_propagate() {
        let cfg = RunConfig::parse("run.seed = 9\ndata.num_items = 40\nrun.workers = 3\nloss.negatives = 7").unwrap();
        assert_eq!(cfg.synthetic.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.model.num_items, 40);
        assert_eq!(cfg.train.workers, 3);
        assert_eq!(cfg.train.loss.negatives_per_positive, 7);
    }
}
