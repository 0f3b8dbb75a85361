//! Text checkpoints: the model configuration, every named parameter block
//! and the codebook state. Floats are written in shortest round-trip form,
//! so save → load is exact.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numeric::{Parameters, Tensor2};
use crate::quantizer::CodebookState;

pub const CHECKPOINT_MAGIC: &str = "SPARCODE-CHECKPOINT v1";

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn config_lines(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("arch", c.arch.to_string()),
        ("num_items", c.num_items.to_string()),
        ("dim", c.dim.to_string()),
        ("token_dim", c.token_dim.to_string()),
        ("query_tokens", c.query_tokens.to_string()),
        ("item_tokens", c.item_tokens.to_string()),
        ("num_books", c.num_books.to_string()),
        ("codebook_size", c.codebook_size.to_string()),
        ("gamma", c.gamma.to_string()),
        ("scorer", c.scorer.to_string()),
        ("scorer_hidden", join(&c.scorer_hidden)),
        ("tokenizer_hidden", join(&c.tokenizer_hidden)),
        ("pool", c.pool.to_string()),
        ("per_token_bias", c.per_token_bias.to_string()),
        ("bias_init", c.bias_init.to_string()),
        ("max_history", c.max_history.to_string()),
    ]
}

pub fn to_text(model: &Model) -> String {
    let mut out = format!("{CHECKPOINT_MAGIC}\n");
    for (k, v) in config_lines(&model.config) {
        let _ = writeln!(out, "config {k} {v}");
    }
    for (name, values) in model.params.blocks() {
        let _ = writeln!(out, "block {name} {}\n{}", values.len(), join(values));
    }
    match &model.codebooks {
        None => out.push_str("codebooks none\n"),
        Some(cb) => {
            let _ = writeln!(out, "codebooks {} {} {} {}", cb.num_books(), cb.size(), cb.sub_dim(), cb.gamma());
            for m in 0..cb.num_books() {
                let _ = writeln!(out, "codewords {m}\n{}", join(cb.codebook(m).data()));
                let _ = writeln!(out, "counts {m}\n{}", join(cb.counts(m)));
                let _ = writeln!(out, "accumulators {m}\n{}", join(cb.accumulator(m).data()));
            }
        }
    }
    out
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    path: &'a Path,
    line: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.into(),
            line: self.line,
            detail: detail.into(),
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        let (i, l) = self.lines.next().ok_or_else(|| Error::Format {
            path: self.path.into(),
            detail: "checkpoint ends early".into(),
        })?;
        self.line = i + 1;
        Ok(l)
    }

    fn expect(&mut self, tag: &str) -> Result<Vec<&'a str>> {
        let line = self.next()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(tag) {
            return Err(self.err(format!("expected `{tag}`, found {line:?}")));
        }
        Ok(parts.collect())
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let line = self.next()?;
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|x| x.parse::<f64>().map_err(|_| self.err(format!("bad number {x:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != n {
            return Err(self.err(format!("expected {n} values, found {}", v.len())));
        }
        if let Some(x) = v.iter().find(|x| !x.is_finite()) {
            return Err(self.err(format!("non-finite value {x}")));
        }
        Ok(v)
    }
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|x| x.parse().map_err(|_| Error::config(format!("bad width {x:?}"))))
        .collect()
}

fn parse_config(entries: &HashMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| {
        entries
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::config(format!("checkpoint lacks config {k}")))
    };
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::config(format!("bad config {k}"))) };
    let real = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::config(format!("bad config {k}"))) };
    Ok(ModelConfig {
        arch: get("arch")?.parse()?,
        num_items: num("num_items")?,
        dim: num("dim")?,
        token_dim: num("token_dim")?,
        query_tokens: num("query_tokens")?,
        item_tokens: num("item_tokens")?,
        num_books: num("num_books")?,
        codebook_size: num("codebook_size")?,
        gamma: real("gamma")?,
        scorer: get("scorer")?.parse()?,
        scorer_hidden: parse_widths(get("scorer_hidden")?)?,
        tokenizer_hidden: parse_widths(get("tokenizer_hidden")?)?,
        pool: get("pool")?.parse()?,
        per_token_bias: get("per_token_bias")? == "true",
        bias_init: real("bias_init")?,
        max_history: num("max_history")?,
    })
}

pub fn from_text(text: &str, path: &Path) -> Result<Model> {
    let mut r = Reader {
        lines: text.lines().enumerate(),
        path,
        line: 0,
    };
    if r.next()? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            path: path.into(),
            detail: format!("missing {CHECKPOINT_MAGIC:?} header"),
        });
    }
    let mut entries = HashMap::new();
    let mut pending = r.next()?;
    while let Some(rest) = pending.strip_prefix("config ") {
        let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
        entries.insert(k.to_string(), v.to_string());
        pending = r.next()?;
    }
    let config = parse_config(&entries).map_err(|e| r.err(e.to_string()))?;
    config.validate()?;
    let mut model = Model::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;

    let mut first = Some(pending);
    for (name, values) in model.params.blocks_mut() {
        let header = match first.take() {
            Some(l) => l,
            None => r.next()?,
        };
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "block" || parts[1] != name {
            return Err(r.err(format!("expected `block {name} <len>`, found {header:?}")));
        }
        if parts[2].parse::<usize>().ok() != Some(values.len()) {
            return Err(r.err(format!("block {name} should hold {} values", values.len())));
        }
        values.copy_from_slice(&r.floats(values.len())?);
    }
    let header = match first.take() {
        Some(l) => l,
        None => r.next()?,
    };
    let parts: Vec<&str> = header.split_whitespace().collect();
    model.codebooks = match parts.as_slice() {
        ["codebooks", "none"] => None,
        ["codebooks", m, n, d, g] => {
            let bad = || r.err(format!("bad codebook header {header:?}"));
            let m: usize = m.parse().map_err(|_| bad())?;
            let n: usize = n.parse().map_err(|_| bad())?;
            let d: usize = d.parse().map_err(|_| bad())?;
            let gamma: f64 = g.parse().map_err(|_| bad())?;
            if m != model.config.num_books || n != model.config.codebook_size || m * d != model.config.token_dim {
                return Err(bad());
            }
            let (mut words, mut counts, mut accs) = (Vec::new(), Vec::new(), Vec::new());
            for b in 0..m {
                let idx = b.to_string();
                for (tag, len) in [("codewords", n * d), ("counts", n), ("accumulators", n * d)] {
                    if r.expect(tag)? != [idx.as_str()] {
                        return Err(r.err(format!("expected `{tag} {b}`")));
                    }
                    let v = r.floats(len)?;
                    match tag {
                        "codewords" => words.push(Tensor2::from_vec(n, d, v)?),
                        "counts" => counts.push(v),
                        _ => accs.push(Tensor2::from_vec(n, d, v)?),
                    }
                }
            }
            Some(CodebookState::from_parts(words, counts, accs, gamma)?)
        }
        _ => return Err(r.err(format!("expected codebook header, found {header:?}"))),
    };
    model.validate()?;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_text(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text, path)
}
