//! Item text embeddings.
//!
//! Embeddings normally come from a file produced by an external sentence
//! encoder. [`fallback_embed`] is a deterministic stand-in: a signed hashed
//! bag of words, so tests and the synthetic pipeline need no model at all.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, ArrayView1};

use crate::data::{CatalogEntry, ItemId};
use crate::error::{Error, Result};
use crate::linalg::{l2_norm, Vector};
use crate::tsv;

pub const SEMANTIC_DIM: usize = 768;

/// Unit-norm text embedding of one item.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbedding {
    pub item: ItemId,
    pub vector: Vector,
}

/// Anything that turns text into a fixed-width vector.
pub trait TextEmbedder: Sync {
    fn embed(&self, text: &str) -> Vector;
}

/// The hashed bag-of-words embedder.
#[derive(Debug, Clone, Copy, Default)]
pub struct FallbackEmbedder;

impl TextEmbedder for FallbackEmbedder {
    fn embed(&self, text: &str) -> Vector {
        fallback_embed(text)
    }
}

const HASH_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

// FNV-1a over the seed bytes and the token; stable across builds.
fn token_hash(token: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in HASH_SEED.to_le_bytes().iter().chain(token.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased whitespace tokens with leading and trailing punctuation
/// trimmed; tokens that are pure punctuation are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Signed hashed bag of words in 768 buckets, L2-normalised. Empty text
/// maps to the first basis vector.
pub fn fallback_embed(text: &str) -> Vector {
    let mut v = Array1::zeros(SEMANTIC_DIM);
    for tok in tokenize(text) {
        let h = token_hash(&tok);
        let bucket = (h % SEMANTIC_DIM as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    let n = l2_norm(v.view());
    if n == 0.0 {
        // empty text, or every token cancelled out
        let mut e1 = Array1::zeros(SEMANTIC_DIM);
        e1[0] = 1.0;
        return e1;
    }
    v / n
}

/// Cosine similarity in `[-1, 1]`.
pub fn similarity(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::contract(format!(
            "similarity of vectors with dimensions {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::contract("similarity with a zero vector"));
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine mapped to `[0, 1]` via `(c + 1) / 2`, the form every score uses.
pub fn mapped_similarity(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    Ok((similarity(u, v)? + 1.0) / 2.0)
}

/// Item embeddings keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SemanticStore {
    vectors: BTreeMap<ItemId, Vector>,
}

impl SemanticStore {
    pub fn get(&self, item: &ItemId) -> Option<&Vector> {
        self.vectors.get(item)
    }

    pub fn contains(&self, item: &ItemId) -> bool {
        self.vectors.contains_key(item)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = &ItemId> {
        self.vectors.keys()
    }

    pub fn embedding(&self, item: &ItemId) -> Option<SemanticEmbedding> {
        self.get(item).map(|v| SemanticEmbedding {
            item: item.clone(),
            vector: v.clone(),
        })
    }

    /// Normalises and stores `vector`; rejects wrong widths, zero vectors
    /// and non-finite values.
    pub fn insert(&mut self, item: ItemId, vector: Vector) -> Result<()> {
        if vector.len() != SEMANTIC_DIM {
            return Err(Error::Data(format!(
                "embedding for `{item}` has {} values, expected {SEMANTIC_DIM}",
                vector.len()
            )));
        }
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(Error::Data(format!(
                "embedding for `{item}` has non-finite values"
            )));
        }
        let n = l2_norm(vector.view());
        if n == 0.0 {
            return Err(Error::Data(format!("embedding for `{item}` is all zeros")));
        }
        self.vectors.insert(item, vector / n);
        Ok(())
    }

    /// Embeds every catalog entry with [`fallback_embed`].
    pub fn from_catalog(catalog: &BTreeMap<ItemId, CatalogEntry>) -> Self {
        let vectors = catalog
            .iter()
            .map(|(q, c)| (q.clone(), fallback_embed(&c.text())))
            .collect();
        Self { vectors }
    }

    /// Items of `wanted` that have no embedding.
    pub fn missing<'a>(&self, wanted: impl IntoIterator<Item = &'a ItemId>) -> Vec<ItemId> {
        wanted
            .into_iter()
            .filter(|q| !self.contains(q))
            .cloned()
            .collect()
    }

    /// Fills gaps for `catalog` items with the fallback embedder and returns
    /// the items that were filled.
    pub fn fill_from_catalog(&mut self, catalog: &BTreeMap<ItemId, CatalogEntry>) -> Vec<ItemId> {
        let mut filled = Vec::new();
        for (q, c) in catalog {
            if !self.contains(q) {
                self.vectors.insert(q.clone(), fallback_embed(&c.text()));
                filled.push(q.clone());
            }
        }
        filled
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (q, v) in &self.vectors {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            let _ = writeln!(out, "{q}\t{}", vals.join(" "));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tsv::write_atomic(path, self.render().as_bytes())
    }
}

/// Reads `item_id<TAB>v1 v2 ... v768` records and L2-normalises each row.
pub fn load_embeddings(path: &Path) -> Result<SemanticStore> {
    let mut store = SemanticStore::default();
    for (ln, line) in tsv::read_records(path)? {
        let f = tsv::split_fields(path, ln, &line, 2)?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: ln,
            message,
        };
        let values: Vec<f64> = f[1]
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| parse_err(format!("`{t}` is not a number")))
            })
            .collect::<Result<_>>()?;
        if values.len() != SEMANTIC_DIM {
            return Err(parse_err(format!(
                "expected {SEMANTIC_DIM} values, found {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "{}:{ln}: non-finite embedding value",
                path.display()
            )));
        }
        store
            .insert(ItemId::new(f[0]), Array1::from(values))
            .map_err(|e| parse_err(e.to_string()))?;
    }
    Ok(store)
}
