//! Structured-text checkpoints.
//!
//! ```text
//! xrec-checkpoint 1
//! kind cf
//! meta embed_dim 50
//! list items 3
//! i1
//! i2
//! i3
//! tensor item_embeddings 2 3 50
//! 0.1 -0.25 ...
//! ```
//!
//! Tensors are written row-major, one row per line, using the shortest
//! decimal representation that round-trips exactly, so the same parameters
//! always produce the same bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tsv;

const MAGIC: &str = "xrec-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub lists: Vec<(String, Vec<String>)>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn with_list(mut self, name: &str, values: Vec<String>) -> Self {
        self.lists.push((name.to_string(), values));
        self
    }

    pub fn with_params<P: Params>(mut self, params: &P) -> Self {
        for t in params.tensors() {
            self.tensors.push(Tensor {
                name: t.name.to_string(),
                shape: t.shape,
                data: t.data.to_vec(),
            });
        }
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Data(format!("checkpoint `{}` lacks meta `{key}`", self.kind)))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Data(format!("checkpoint meta `{key}` is malformed")))
    }

    pub fn list(&self, name: &str) -> Result<&[String]> {
        self.lists
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Data(format!("checkpoint `{}` lacks list `{name}`", self.kind)))
    }

    /// Copies stored tensors into `params`, checking names and shapes.
    pub fn load_params<P: Params>(&self, params: &mut P) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .iter()
            .map(|t| (t.name.to_string(), t.shape.clone()))
            .collect();
        if expected.len() != self.tensors.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape {
                return Err(Error::Data(format!(
                    "tensor mismatch: expected {name} {shape:?}, found {} {:?}",
                    t.name, t.shape
                )));
            }
        }
        for (dst, t) in params.tensors_mut().into_iter().zip(&self.tensors) {
            dst.copy_from_slice(&t.data);
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "kind {}", self.kind);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {} {}", k, tsv::escape(v));
        }
        for (name, values) in &self.lists {
            let _ = writeln!(out, "list {} {}", name, values.len());
            for v in values {
                let _ = writeln!(out, "{}", tsv::escape(v));
            }
        }
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(
                out,
                "tensor {} {} {}",
                t.name,
                t.shape.len(),
                dims.join(" ")
            );
            let row = t.shape.last().copied().unwrap_or(1).max(1);
            for chunk in t.data.chunks(row) {
                let vals: Vec<String> = chunk.iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(out, "{}", vals.join(" "));
            }
        }
        out
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: source.to_path_buf(),
            line,
            message,
        };
        let lines: Vec<&str> = text.lines().collect();
        if lines.first().copied() != Some(MAGIC) {
            return Err(err(1, "not a checkpoint file".into()));
        }
        let mut ck = Checkpoint::default();
        let mut i = 1;
        while i < lines.len() {
            let line = lines[i];
            let ln = i + 1;
            let (head, rest) = line.split_once(' ').unwrap_or((line, ""));
            match head {
                "kind" => ck.kind = rest.to_string(),
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.push((k.to_string(), tsv::unescape(v)));
                }
                "list" => {
                    let (name, n) = rest
                        .split_once(' ')
                        .ok_or_else(|| err(ln, "list header needs a name and a length".into()))?;
                    let n: usize = n.parse().map_err(|_| err(ln, "bad list length".into()))?;
                    if i + n >= lines.len() {
                        return Err(err(ln, "truncated list".into()));
                    }
                    let values = lines[i + 1..i + 1 + n]
                        .iter()
                        .map(|s| tsv::unescape(s))
                        .collect();
                    ck.lists.push((name.to_string(), values));
                    i += n;
                }
                "tensor" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    if parts.len() < 2 {
                        return Err(err(ln, "tensor header needs a name and a rank".into()));
                    }
                    let rank: usize = parts[1].parse().map_err(|_| err(ln, "bad rank".into()))?;
                    if parts.len() != 2 + rank {
                        return Err(err(ln, "shape does not match rank".into()));
                    }
                    let shape: Vec<usize> = parts[2..]
                        .iter()
                        .map(|s| s.parse().map_err(|_| err(ln, "bad dimension".into())))
                        .collect::<Result<_>>()?;
                    let total: usize = shape.iter().product();
                    let row = shape.last().copied().unwrap_or(1).max(1);
                    let n_rows = if total == 0 { 0 } else { total / row };
                    let mut data = Vec::with_capacity(total);
                    for r in 0..n_rows {
                        let l = lines
                            .get(i + 1 + r)
                            .ok_or_else(|| err(ln, "truncated tensor".into()))?;
                        for tok in l.split(' ') {
                            data.push(
                                tok.parse::<f64>()
                                    .map_err(|_| err(i + 2 + r, format!("bad value `{tok}`")))?,
                            );
                        }
                    }
                    if data.len() != total {
                        return Err(err(
                            ln,
                            format!("expected {total} values, found {}", data.len()),
                        ));
                    }
                    ck.tensors.push(Tensor {
                        name: parts[0].to_string(),
                        shape,
                        data,
                    });
                    i += n_rows;
                }
                _ => return Err(err(ln, format!("unexpected record `{head}`"))),
            }
            i += 1;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tsv::write_atomic(path, self.render().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}
