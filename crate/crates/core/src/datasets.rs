//! Interaction records, CSV ingestion, deterministic splits and the
//! synthetic generator.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};

use crate::error::{Error, Result};

pub const INTERACTIONS_HEADER: &str = "user_id,item_id,timestamp";
pub const TRUTH_HEADER: &str = "user_id,item_id,affinity";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InteractionRecord {
    pub user: usize,
    pub item: usize,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_users: usize,
    pub num_items: usize,
    /// Sorted by (user, timestamp, item).
    pub records: Vec<InteractionRecord>,
}

impl Dataset {
    pub fn new(num_users: usize, num_items: usize, mut records: Vec<InteractionRecord>) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| r.user >= num_users || r.item >= num_items) {
            return Err(Error::Lookup {
                field: if r.user >= num_users { "user_id" } else { "item_id" }.into(),
                id: if r.user >= num_users { r.user } else { r.item },
                vocab: if r.user >= num_users { num_users } else { num_items },
            });
        }
        records.sort_unstable_by_key(|r| (r.user, r.timestamp, r.item));
        records.dedup();
        Ok(Self {
            num_users,
            num_items,
            records,
        })
    }

    /// Item sequence of every user in timestamp order.
    pub fn sequences(&self) -> Vec<Vec<usize>> {
        sequences(&self.records, self.num_users)
    }
}

/// Groups records into per-user item sequences; `records` must be sorted.
pub fn sequences(records: &[InteractionRecord], num_users: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_users];
    for r in records {
        out[r.user].push(r.item);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub latent_dim: usize,
    pub interactions_per_user: usize,
    pub alpha: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_users: 2000,
            num_items: 500,
            latent_dim: 16,
            interactions_per_user: 10,
            alpha: 1.0,
            tau: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items == 0 {
            return Err(Error::config("synthetic data needs users and items"));
        }
        if self.latent_dim < 2 || self.latent_dim % 2 != 0 {
            return Err(Error::config(format!(
                "data.latent_dim must be even and at least 2, got {}",
                self.latent_dim
            )));
        }
        if self.interactions_per_user > self.num_items {
            return Err(Error::config(format!(
                "data.interactions_per_user ({}) exceeds data.num_items ({})",
                self.interactions_per_user, self.num_items
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config("data.alpha must be non-negative"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("data.tau must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// `num_users × num_items` ground-truth affinities, row-major.
    pub affinities: Vec<f64>,
}

/// `u_a·v_a + α · max_d(u_b,d · v_b,d)` where `a`/`b` are the first and
/// second halves of the latent vectors.
pub fn true_affinity(u: &[f64], v: &[f64], alpha: f64) -> f64 {
    let h = u.len() / 2;
    let linear: f64 = u[..h].iter().zip(&v[..h]).map(|(a, b)| a * b).sum();
    let cross = u[h..]
        .iter()
        .zip(&v[h..])
        .map(|(a, b)| a * b)
        .fold(f64::NEG_INFINITY, f64::max);
    linear + alpha * cross
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut latents = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..cfg.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    };
    let users = latents(cfg.num_users);
    let items = latents(cfg.num_items);
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid Gumbel parameters");

    let mut affinities = Vec::with_capacity(cfg.num_users * cfg.num_items);
    let mut records = Vec::with_capacity(cfg.num_users * cfg.interactions_per_user);
    for (uid, u) in users.iter().enumerate() {
        let row: Vec<f64> = items.iter().map(|v| true_affinity(u, v, cfg.alpha)).collect();
        // Gumbel-top-k: exact sampling without replacement ∝ softmax(s*/τ)
        let mut keys: Vec<(f64, usize)> = row
            .iter()
            .enumerate()
            .map(|(i, s)| (s / cfg.tau + gumbel.sample(&mut rng), i))
            .collect();
        keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut picked: Vec<usize> = keys[..cfg.interactions_per_user].iter().map(|k| k.1).collect();
        picked.shuffle(&mut rng);
        records.extend(picked.into_iter().enumerate().map(|(t, item)| InteractionRecord {
            user: uid,
            item,
            timestamp: t as u64,
        }));
        affinities.extend(row);
    }
    Ok(SyntheticData {
        dataset: Dataset::new(cfg.num_users, cfg.num_items, records)?,
        affinities,
    })
}

pub fn parse_interactions(text: &str, path: &Path) -> Result<Vec<InteractionRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == INTERACTIONS_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Format {
                path: path.into(),
                detail: format!("expected header {INTERACTIONS_HEADER:?}, found {:?}", h.trim()),
            })
        }
        None => {
            return Err(Error::Format {
                path: path.into(),
                detail: "file is empty".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |detail: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            detail,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        let num = |s: &str, name: &str| {
            s.parse::<u64>()
                .map_err(|_| parse_err(format!("{name} {s:?} is not a non-negative integer")))
        };
        out.push(InteractionRecord {
            user: num(fields[0], "user_id")? as usize,
            item: num(fields[1], "item_id")? as usize,
            timestamp: num(fields[2], "timestamp")?,
        });
    }
    Ok(out)
}

/// Loads `user_id,item_id,timestamp` CSV. Vocabulary sizes are the largest
/// ids seen plus one.
pub fn load_interactions(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = parse_interactions(&text, path)?;
    let num_users = records.iter().map(|r| r.user + 1).max().unwrap_or(0);
    let num_items = records.iter().map(|r| r.item + 1).max().unwrap_or(0);
    Dataset::new(num_users, num_items, records)
}

pub fn write_interactions(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = String::with_capacity(16 * data.records.len() + 32);
    out.push_str(INTERACTIONS_HEADER);
    out.push('\n');
    for r in &data.records {
        out.push_str(&format!("{},{},{}\n", r.user, r.item, r.timestamp));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_truth(path: &Path, data: &SyntheticData) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let n = data.dataset.num_items;
    let io = |e| Error::io(path, e);
    writeln!(w, "{TRUTH_HEADER}").map_err(io)?;
    for (idx, a) in data.affinities.iter().enumerate() {
        writeln!(w, "{},{},{}", idx / n, idx % n, a).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    ByUser,
    LeaveLastOut,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::ByUser => "by_user",
            SplitMode::LeaveLastOut => "leave_last_out",
        })
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "by_user" => Ok(SplitMode::ByUser),
            "leave_last_out" => Ok(SplitMode::LeaveLastOut),
            _ => Err(Error::config(format!("unknown split mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<InteractionRecord>,
    pub val: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
    /// Users dropped because they have fewer than 3 interactions.
    pub excluded_users: Vec<usize>,
}

pub fn split_dataset(data: &Dataset, ratios: [f64; 3], mode: SplitMode, seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        excluded_users: Vec::new(),
    };
    match mode {
        SplitMode::ByUser => {
            let mut users: Vec<usize> = (0..data.num_users).collect();
            users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n = users.len();
            let n_train = (ratios[0] * n as f64).round() as usize;
            let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
            let mut which = vec![2u8; data.num_users];
            for (pos, &u) in users.iter().enumerate() {
                which[u] = if pos < n_train {
                    0
                } else if pos < n_train + n_val {
                    1
                } else {
                    2
                };
            }
            for r in &data.records {
                match which[r.user] {
                    0 => split.train.push(*r),
                    1 => split.val.push(*r),
                    _ => split.test.push(*r),
                }
            }
        }
        SplitMode::LeaveLastOut => {
            let mut start = 0;
            while start < data.records.len() {
                let user = data.records[start].user;
                let end = start + data.records[start..].iter().take_while(|r| r.user == user).count();
                let recs = &data.records[start..end];
                if recs.len() < 3 {
                    split.excluded_users.push(user);
                } else {
                    let n = recs.len();
                    split.train.extend_from_slice(&recs[..n - 2]);
                    split.val.push(recs[n - 2]);
                    split.test.push(recs[n - 1]);
                }
                start = end;
            }
        }
    }
    Ok(split)
}

/// One evaluation query under leave-last-out.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub user: usize,
    pub history: Vec<usize>,
    pub relevant: Vec<usize>,
    /// Items already seen by the user; never ranked.
    pub seen: BTreeSet<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Validation,
    Test,
}

/// Builds leave-last-out queries: validation queries use the training
/// history, test queries additionally see the validation item.
pub fn eval_queries(split: &Split, num_users: usize, stage: Stage) -> Vec<EvalQuery> {
    let mut history = sequences(&split.train, num_users);
    let held = match stage {
        Stage::Validation => &split.val,
        Stage::Test => {
            for r in &split.val {
                history[r.user].push(r.item);
            }
            &split.test
        }
    };
    let mut relevant: Vec<Vec<usize>> = vec![Vec::new(); num_users];
    for r in held {
        relevant[r.user].push(r.item);
    }
    (0..num_users)
        .filter(|&u| !relevant[u].is_empty() && !history[u].is_empty())
        .map(|u| {
            let seen: BTreeSet<usize> = history[u].iter().copied().collect();
            let rel: Vec<usize> = relevant[u].iter().copied().filter(|i| !seen.contains(i)).collect();
            EvalQuery {
                user: u,
                history: history[u].clone(),
                relevant: rel,
                seen,
            }
        })
        .filter(|q| !q.relevant.is_empty())
        .collect()
}
