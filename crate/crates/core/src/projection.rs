//! Soft prompts: projecting user, item and reasoning vectors into a token
//! space, laying them out around text segments, and training the
//! projections against a frozen surrogate language-model head.
//!
//! The surrogate reads a prompt as the mean of its segment vectors (text
//! segments contribute the mean of their token vectors). The probability of
//! the `j`-th target token is `softmax(W (s + p_j))`, where `s` is that mean
//! and `p_j` the mean token vector of the targets before `j`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use base64::Engine as _;
use ndarray::{Array1, Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::cot::{Explanation, GenerationAdapter};
use crate::data::{ItemId, UserId};
use crate::error::{Error, Result};
use crate::linalg::{logsumexp, normal_matrix, softmax, xavier, Matrix, Vector};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{flat_mut, tref, Params, TensorRef};
use crate::rng::derive;
use crate::semantic::{tokenize, TextEmbedder};

pub const DEFAULT_TOKEN_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub token_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Candidates per training prompt, the target included.
    pub train_candidates: usize,
    pub head_seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            token_dim: DEFAULT_TOKEN_DIM,
            epochs: 5,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            train_candidates: 100,
            head_seed: 17,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 {
            return Err(Error::config("projection.token_dim", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("projection.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "projection.learning_rate",
                "must be finite and non-negative",
            ));
        }
        if self.train_candidates == 0 {
            return Err(Error::config(
                "projection.train_candidates",
                "must be at least 1",
            ));
        }
        Ok(())
    }
}

/// `affine -> ReLU -> affine`; weights are stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

struct MlpForward {
    pre: Matrix,
    hidden: Matrix,
    out: Matrix,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, input)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((output, hidden)),
            b2: Array1::zeros(output),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w1: xavier(hidden, input, rng),
            b1: Array1::zeros(hidden),
            w2: xavier(output, hidden, rng),
            b2: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.input_dim() {
            return Err(Error::contract(format!(
                "projection input has dimension {}, expected {}",
                x.len(),
                self.input_dim()
            )));
        }
        let h = (self.w1.dot(x) + &self.b1).mapv(|v| v.max(0.0));
        Ok(self.w2.dot(&h) + &self.b2)
    }

    fn forward_rows(&self, x: &Matrix) -> MlpForward {
        let pre = x.dot(&self.w1.t()) + &self.b1;
        let hidden = pre.mapv(|v| v.max(0.0));
        let out = hidden.dot(&self.w2.t()) + &self.b2;
        MlpForward { pre, hidden, out }
    }

    fn backward_rows(&self, x: &Matrix, f: &MlpForward, d_out: &Matrix, grad: &mut Mlp) {
        grad.w2 += &d_out.t().dot(&f.hidden);
        grad.b2 += &d_out.sum_axis(Axis(0));
        let mut dh = d_out.dot(&self.w2);
        dh.zip_mut_with(&f.pre, |d, p| {
            if *p <= 0.0 {
                *d = 0.0
            }
        });
        grad.w1 += &dh.t().dot(x);
        grad.b1 += &dh.sum_axis(Axis(0));
    }
}

/// `F_X`, `F_Z` and `F_r`; one hidden layer each, as wide as the token space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    pub fx: Mlp,
    pub fz: Mlp,
    pub fr: Mlp,
}

impl Params for ProjectionStack {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            tref("fx_w1", &self.fx.w1),
            tref("fx_b1", &self.fx.b1),
            tref("fx_w2", &self.fx.w2),
            tref("fx_b2", &self.fx.b2),
            tref("fz_w1", &self.fz.w1),
            tref("fz_b1", &self.fz.b1),
            tref("fz_w2", &self.fz.w2),
            tref("fz_b2", &self.fz.b2),
            tref("fr_w1", &self.fr.w1),
            tref("fr_b1", &self.fr.b1),
            tref("fr_w2", &self.fr.w2),
            tref("fr_b2", &self.fr.b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let (fx, fz, fr) = (&mut self.fx, &mut self.fz, &mut self.fr);
        vec![
            flat_mut(&mut fx.w1),
            flat_mut(&mut fx.b1),
            flat_mut(&mut fx.w2),
            flat_mut(&mut fx.b2),
            flat_mut(&mut fz.w1),
            flat_mut(&mut fz.b1),
            flat_mut(&mut fz.w2),
            flat_mut(&mut fz.b2),
            flat_mut(&mut fr.w1),
            flat_mut(&mut fr.b1),
            flat_mut(&mut fr.w2),
            flat_mut(&mut fr.b2),
        ]
    }
}

/// Outputs of the three projections for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub user: Vector,
    pub item: Vector,
    pub cot: Option<Vector>,
}

impl ProjectionStack {
    pub fn zeros(user_dim: usize, item_dim: usize, cot_dim: usize, token_dim: usize) -> Self {
        Self {
            fx: Mlp::zeros(user_dim, token_dim, token_dim),
            fz: Mlp::zeros(item_dim, token_dim, token_dim),
            fr: Mlp::zeros(cot_dim, token_dim, token_dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(
        user_dim: usize,
        item_dim: usize,
        cot_dim: usize,
        token_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fx: Mlp::init(user_dim, token_dim, token_dim, rng),
            fz: Mlp::init(item_dim, token_dim, token_dim, rng),
            fr: Mlp::init(cot_dim, token_dim, token_dim, rng),
        }
    }

    pub fn token_dim(&self) -> usize {
        self.fx.output_dim()
    }

    pub fn project_components(
        &self,
        user: &Vector,
        item: &Vector,
        cot: Option<&CotSignal>,
    ) -> Result<Projected> {
        Ok(Projected {
            user: self.fx.forward(user)?,
            item: self.fz.forward(item)?,
            cot: cot.map(|c| self.fr.forward(&c.embedding)).transpose()?,
        })
    }

    pub fn to_checkpoint(&self, head: &SurrogateHead) -> Checkpoint {
        Checkpoint::new("projection")
            .with_meta("user_dim", self.fx.input_dim())
            .with_meta("item_dim", self.fz.input_dim())
            .with_meta("cot_dim", self.fr.input_dim())
            .with_meta("token_dim", self.token_dim())
            .with_meta("head_seed", head.seed)
            .with_meta("head_digest", head.digest())
            .with_list("vocabulary", head.vocabulary.clone())
            .with_params(self)
    }

    /// The stack and the head it was trained against.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, SurrogateHead)> {
        if ck.kind != "projection" {
            return Err(Error::Data(format!(
                "expected a projection checkpoint, found `{}`",
                ck.kind
            )));
        }
        let token_dim: usize = ck.meta_parse("token_dim")?;
        let mut stack = Self::zeros(
            ck.meta_parse("user_dim")?,
            ck.meta_parse("item_dim")?,
            ck.meta_parse("cot_dim")?,
            token_dim,
        );
        ck.load_params(&mut stack)?;
        let head = SurrogateHead::new(
            ck.list("vocabulary")?.to_vec(),
            token_dim,
            ck.meta_parse("head_seed")?,
        );
        if head.digest() != ck.meta("head_digest")? {
            return Err(Error::Data(
                "surrogate head does not match the checkpoint digest".into(),
            ));
        }
        Ok((stack, head))
    }
}

/// Embedding and score of one retained reasoning text.
#[derive(Debug, Clone, PartialEq)]
pub struct CotSignal {
    pub embedding: Vector,
    pub score: f64,
}

impl CotSignal {
    /// `None` unless `score >= threshold`.
    pub fn retained(
        text: &str,
        score: f64,
        threshold: f64,
        embedder: &dyn TextEmbedder,
    ) -> Option<Self> {
        (score >= threshold).then(|| Self {
            embedding: embedder.embed(text),
            score,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SoftKind {
    User,
    Item(ItemId),
    Cot,
}

impl SoftKind {
    fn name(&self) -> String {
        match self {
            SoftKind::User => "user".into(),
            SoftKind::Item(q) => format!("item:{q}"),
            SoftKind::Cot => "cot".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Soft { kind: SoftKind, vector: Vector },
    Text(Vec<String>),
}

impl Segment {
    pub fn is_soft(&self) -> bool {
        matches!(self, Segment::Soft { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplates {
    pub instruction: String,
    pub query: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            instruction: "The vector before this sentence encodes the user's history. Candidate items follow, each \
                          title paired with its item vector."
                .into(),
            query: "Considering the reasoning vector above, the next item the user will interact with is".into(),
        }
    }
}

/// A title and the projected vector of its item.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSlot {
    pub item: ItemId,
    pub title: String,
    pub soft: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub segments: Vec<Segment>,
}

impl PromptBundle {
    pub fn soft_count(&self) -> usize {
        self.segments.iter().filter(|s| s.is_soft()).count()
    }

    /// Text rendering with soft vectors as `<SOFT:name:base64>` placeholders
    /// (little-endian `f64` bytes). Deployments inject the vectors instead.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.segments.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            match s {
                Segment::Text(tokens) => out.push_str(&tokens.join(" ")),
                Segment::Soft { kind, vector } => {
                    let _ = write!(
                        out,
                        "<SOFT:{}:{}>",
                        kind.name(),
                        encode_floats(vector.iter().copied())
                    );
                }
            }
        }
        out
    }

    /// Mean of the segment vectors.
    pub fn context(&self, head: &SurrogateHead) -> Vector {
        let mut s = Array1::zeros(head.token_dim);
        for seg in &self.segments {
            match seg {
                Segment::Soft { vector, .. } => s += vector,
                Segment::Text(tokens) => s += &head.text_vector(tokens),
            }
        }
        s / self.segments.len().max(1) as f64
    }
}

fn encode_floats(values: impl Iterator<Item = f64>) -> String {
    let bytes: Vec<u8> = values.flat_map(|v| v.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// `[O_X] instruction (title O_Z)* [O_r] query`.
pub fn assemble_prompt(
    user: Vector,
    candidates: Vec<CandidateSlot>,
    cot: Option<Vector>,
    templates: &PromptTemplates,
) -> Result<PromptBundle> {
    if candidates.is_empty() {
        return Err(Error::contract("a prompt needs at least one candidate"));
    }
    let mut segments = Vec::with_capacity(2 * candidates.len() + 4);
    segments.push(Segment::Soft {
        kind: SoftKind::User,
        vector: user,
    });
    segments.push(Segment::Text(tokenize(&templates.instruction)));
    for c in candidates {
        segments.push(Segment::Text(tokenize(&c.title)));
        segments.push(Segment::Soft {
            kind: SoftKind::Item(c.item),
            vector: c.soft,
        });
    }
    if let Some(r) = cot {
        segments.push(Segment::Soft {
            kind: SoftKind::Cot,
            vector: r,
        });
    }
    segments.push(Segment::Text(tokenize(&templates.query)));
    Ok(PromptBundle { segments })
}

/// Stand-in for a frozen language model: a seeded output map over a title
/// vocabulary and a seeded vector per token.
#[derive(Debug, Clone)]
pub struct SurrogateHead {
    seed: u64,
    token_dim: usize,
    vocabulary: Vec<String>,
    index: HashMap<String, usize>,
    output: Matrix,
    lookup: Matrix,
}

impl SurrogateHead {
    pub fn new(vocabulary: Vec<String>, token_dim: usize, seed: u64) -> Self {
        let mut rng = derive(seed, "surrogate-head");
        let std = 1.0 / (token_dim as f64).sqrt();
        let output = normal_matrix(vocabulary.len(), token_dim, std, &mut rng);
        Self::assemble(vocabulary, token_dim, seed, output)
    }

    /// Sorted distinct title tokens of `titles`.
    pub fn from_titles<'a>(
        titles: impl IntoIterator<Item = &'a str>,
        token_dim: usize,
        seed: u64,
    ) -> Self {
        let vocab: BTreeSet<String> = titles.into_iter().flat_map(tokenize).collect();
        Self::new(vocab.into_iter().collect(), token_dim, seed)
    }

    /// A head whose output map is zero, so every distribution is uniform.
    pub fn uniform(vocabulary: Vec<String>, token_dim: usize) -> Self {
        let output = Array2::zeros((vocabulary.len(), token_dim));
        Self::assemble(vocabulary, token_dim, 0, output)
    }

    fn assemble(vocabulary: Vec<String>, token_dim: usize, seed: u64, output: Matrix) -> Self {
        let index = vocabulary
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
        let mut lookup = Array2::zeros((vocabulary.len(), token_dim));
        for (i, t) in vocabulary.iter().enumerate() {
            lookup.row_mut(i).assign(&token_vector(seed, token_dim, t));
        }
        Self {
            seed,
            token_dim,
            vocabulary,
            index,
            output,
            lookup,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Frozen input vector of any token, in or out of the vocabulary.
    pub fn token_vector(&self, token: &str) -> Vector {
        match self.index_of(token) {
            Some(i) => self.lookup.row(i).to_owned(),
            None => token_vector(self.seed, self.token_dim, token),
        }
    }

    /// Mean token vector; zero for no tokens.
    pub fn text_vector(&self, tokens: &[String]) -> Vector {
        let mut v = Array1::zeros(self.token_dim);
        for t in tokens {
            v += &self.token_vector(t);
        }
        if !tokens.is_empty() {
            v /= tokens.len() as f64;
        }
        v
    }

    fn encode_targets(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| self.index_of(t).ok_or_else(|| Error::Vocabulary(t.clone())))
            .collect()
    }

    pub fn digest(&self) -> String {
        struct View<'a>(&'a SurrogateHead);
        impl Params for View<'_> {
            fn tensors(&self) -> Vec<TensorRef<'_>> {
                vec![
                    tref("output", &self.0.output),
                    tref("lookup", &self.0.lookup),
                ]
            }
            fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
                Vec::new()
            }
        }
        let mut d = View(self).digest();
        let _ = write!(d, ":{}", self.vocabulary.len());
        d
    }
}

fn token_vector(seed: u64, dim: usize, token: &str) -> Vector {
    let mut rng = derive(seed, &format!("token:{token}"));
    normal_matrix(1, dim, 1.0 / (dim as f64).sqrt(), &mut rng)
        .row(0)
        .to_owned()
}

/// Per-token log-likelihoods of a title after context `s`. The surrogate
/// cannot emit tokens outside its vocabulary; those count as uniform,
/// `-ln |V|`.
fn title_log_likelihoods(head: &SurrogateHead, s: &Vector, tokens: &[String]) -> Vec<f64> {
    let mut prefix_sum: Vector = Array1::zeros(head.token_dim);
    let mut out = Vec::new();
    for (j, t) in tokens.iter().enumerate() {
        if let Some(y) = head.index_of(t) {
            let c = if j == 0 {
                s.clone()
            } else {
                s + &(&prefix_sum / j as f64)
            };
            let logits = head.output.dot(&c);
            out.push(logits[y] - logsumexp(logits.view()));
        } else {
            out.push(-(head.vocabulary.len() as f64).ln());
        }
        prefix_sum += &head.token_vector(t);
    }
    out
}

/// Loss of target indices given context `s`; returns `(loss, dloss/ds)`.
fn targets_loss(
    head: &SurrogateHead,
    s: &Vector,
    targets: &[usize],
    want_grad: bool,
) -> (f64, Option<Vector>) {
    let t = targets.len() as f64;
    let mut loss = 0.0;
    let mut ds: Vector = Array1::zeros(head.token_dim);
    let mut prefix_sum: Vector = Array1::zeros(head.token_dim);
    for (j, &y) in targets.iter().enumerate() {
        let c = if j == 0 {
            s.clone()
        } else {
            s + &(&prefix_sum / j as f64)
        };
        let logits = head.output.dot(&c);
        loss += logsumexp(logits.view()) - logits[y];
        if want_grad {
            let mut d = softmax(logits.view());
            d[y] -= 1.0;
            ds += &head.output.t().dot(&d);
        }
        prefix_sum += &head.lookup.row(y);
    }
    (loss / t, want_grad.then(|| ds / t))
}

/// Negative mean log-likelihood of `target_tokens` after `bundle`.
pub fn surrogate_lm_loss(
    bundle: &PromptBundle,
    target_tokens: &[String],
    head: &SurrogateHead,
) -> Result<f64> {
    if target_tokens.is_empty() {
        return Err(Error::contract("empty target sequence"));
    }
    let targets = head.encode_targets(target_tokens)?;
    Ok(targets_loss(head, &bundle.context(head), &targets, false).0)
}

/// Items a prompt can mention: unified embedding and title per item.
#[derive(Debug, Clone)]
pub struct ItemTable {
    ids: Vec<ItemId>,
    index: HashMap<ItemId, usize>,
    z: Matrix,
    titles: Vec<String>,
    title_tokens: Vec<Vec<String>>,
    title_vectors: Matrix,
}

impl ItemTable {
    /// `entries` as `(item, unified embedding, title)`, any order.
    pub fn new(entries: Vec<(ItemId, Vector, String)>, head: &SurrogateHead) -> Result<Self> {
        let mut entries = entries;
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let dim = entries.first().map(|e| e.1.len()).unwrap_or(0);
        let mut z = Array2::zeros((entries.len(), dim));
        let mut title_vectors = Array2::zeros((entries.len(), head.token_dim));
        let mut ids = Vec::with_capacity(entries.len());
        let mut titles = Vec::with_capacity(entries.len());
        let mut title_tokens = Vec::with_capacity(entries.len());
        for (i, (q, v, title)) in entries.into_iter().enumerate() {
            if v.len() != dim {
                return Err(Error::contract(format!(
                    "item `{q}` embedding has dimension {}",
                    v.len()
                )));
            }
            z.row_mut(i).assign(&v);
            let toks = tokenize(&title);
            title_vectors.row_mut(i).assign(&head.text_vector(&toks));
            ids.push(q);
            titles.push(title);
            title_tokens.push(toks);
        }
        let index = ids
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, q)| (q, i))
            .collect();
        Ok(Self {
            ids,
            index,
            z,
            titles,
            title_tokens,
            title_vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn items(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn item_dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn index_of(&self, item: &ItemId) -> Result<usize> {
        self.index
            .get(item)
            .copied()
            .ok_or_else(|| Error::UnknownItem(item.0.clone()))
    }

    pub fn title(&self, item: &ItemId) -> Result<&str> {
        Ok(&self.titles[self.index_of(item)?])
    }

    pub fn embedding(&self, item: &ItemId) -> Result<Vector> {
        Ok(self.z.row(self.index_of(item)?).to_owned())
    }
}

/// One training prompt: who, which reasoning, and the true next item.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionExample {
    pub user: UserId,
    pub representation: Vector,
    pub cot: Option<Vector>,
    pub target: ItemId,
}

struct Prepared<'a> {
    example: &'a ProjectionExample,
    candidates: Vec<usize>,
    targets: Vec<usize>,
}

/// Loss and gradient of a batch over candidate sets fixed in `batch`.
fn batch_loss(
    stack: &ProjectionStack,
    head: &SurrogateHead,
    items: &ItemTable,
    templates: &(Vector, Vector),
    batch: &[Prepared],
    grad: Option<&mut ProjectionStack>,
) -> f64 {
    let b = batch.len();
    let xu = Array2::from_shape_fn((b, stack.fx.input_dim()), |(i, j)| {
        batch[i].example.representation[j]
    });
    let fu = stack.fx.forward_rows(&xu);
    let with_cot: Vec<usize> = (0..b).filter(|&i| batch[i].example.cot.is_some()).collect();
    let xr = Array2::from_shape_fn((with_cot.len(), stack.fr.input_dim()), |(i, j)| {
        batch[with_cot[i]].example.cot.as_ref().expect("filtered")[j]
    });
    let fr = stack.fr.forward_rows(&xr);
    let distinct: Vec<usize> = batch
        .iter()
        .flat_map(|p| p.candidates.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let row_of: HashMap<usize, usize> = distinct.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let xz = items.z.select(Axis(0), &distinct);
    let fz = stack.fz.forward_rows(&xz);

    let (instr, query) = templates;
    let mut total = 0.0;
    let mut d_u = Array2::zeros(fu.out.raw_dim());
    let mut d_r = Array2::zeros(fr.out.raw_dim());
    let mut d_z = Array2::zeros(fz.out.raw_dim());
    let want = grad.is_some();
    for (e, p) in batch.iter().enumerate() {
        let cot_row = with_cot.iter().position(|&i| i == e);
        let n = (3 + 2 * p.candidates.len() + usize::from(cot_row.is_some())) as f64;
        let mut s = &fu.out.row(e) + instr + query;
        for &c in &p.candidates {
            s += &fz.out.row(row_of[&c]);
            s += &items.title_vectors.row(c);
        }
        if let Some(r) = cot_row {
            s += &fr.out.row(r);
        }
        s /= n;
        let (loss, ds) = targets_loss(head, &s, &p.targets, want);
        total += loss;
        if let Some(ds) = ds {
            let g = ds / (n * b as f64);
            d_u.row_mut(e).assign(&g);
            for &c in &p.candidates {
                let mut row = d_z.row_mut(row_of[&c]);
                row += &g;
            }
            if let Some(r) = cot_row {
                d_r.row_mut(r).assign(&g);
            }
        }
    }
    if let Some(grad) = grad {
        stack.fx.backward_rows(&xu, &fu, &d_u, &mut grad.fx);
        stack.fz.backward_rows(&xz, &fz, &d_z, &mut grad.fz);
        if !with_cot.is_empty() {
            stack.fr.backward_rows(&xr, &fr, &d_r, &mut grad.fr);
        }
    }
    total / b as f64
}

fn template_vectors(head: &SurrogateHead, templates: &PromptTemplates) -> (Vector, Vector) {
    (
        head.text_vector(&tokenize(&templates.instruction)),
        head.text_vector(&tokenize(&templates.query)),
    )
}

/// Target plus `pool - 1` distinct other items, in table order.
fn draw_candidates<R: Rng + ?Sized>(
    items: &ItemTable,
    target: usize,
    pool: usize,
    rng: &mut R,
) -> Vec<usize> {
    let others: Vec<usize> = (0..items.len()).filter(|&i| i != target).collect();
    let k = pool.saturating_sub(1).min(others.len());
    let mut picked: Vec<usize> = others.choose_multiple(rng, k).copied().collect();
    picked.push(target);
    picked.sort_unstable();
    picked
}

fn prepare<'a, R: Rng + ?Sized>(
    examples: &'a [ProjectionExample],
    items: &ItemTable,
    head: &SurrogateHead,
    pool: usize,
    rng: &mut R,
) -> Result<Vec<Prepared<'a>>> {
    examples
        .iter()
        .map(|ex| {
            let t = items.index_of(&ex.target)?;
            Ok(Prepared {
                example: ex,
                candidates: draw_candidates(items, t, pool, rng),
                targets: head.encode_targets(&items.title_tokens[t])?,
            })
        })
        .collect()
}

fn prepare_fixed<'a>(
    examples: &'a [ProjectionExample],
    candidate_sets: &[Vec<ItemId>],
    items: &ItemTable,
    head: &SurrogateHead,
) -> Result<Vec<Prepared<'a>>> {
    if examples.is_empty() || examples.len() != candidate_sets.len() {
        return Err(Error::contract(
            "one candidate set per projection example is required",
        ));
    }
    examples
        .iter()
        .zip(candidate_sets)
        .map(|(ex, set)| {
            let t = items.index_of(&ex.target)?;
            let mut candidates = set
                .iter()
                .map(|q| items.index_of(q))
                .collect::<Result<Vec<_>>>()?;
            if !candidates.contains(&t) {
                candidates.push(t);
            }
            Ok(Prepared {
                example: ex,
                candidates,
                targets: head.encode_targets(&items.title_tokens[t])?,
            })
        })
        .collect()
}

/// Mean surrogate loss over `examples`, each prompted with its candidate
/// set (the target is added when missing).
pub fn projection_loss(
    stack: &ProjectionStack,
    head: &SurrogateHead,
    items: &ItemTable,
    templates: &PromptTemplates,
    examples: &[ProjectionExample],
    candidate_sets: &[Vec<ItemId>],
) -> Result<f64> {
    let prepared = prepare_fixed(examples, candidate_sets, items, head)?;
    Ok(batch_loss(
        stack,
        head,
        items,
        &template_vectors(head, templates),
        &prepared,
        None,
    ))
}

/// [`projection_loss`] and its gradient with respect to the stack.
pub fn projection_gradient(
    stack: &ProjectionStack,
    head: &SurrogateHead,
    items: &ItemTable,
    templates: &PromptTemplates,
    examples: &[ProjectionExample],
    candidate_sets: &[Vec<ItemId>],
) -> Result<(f64, ProjectionStack)> {
    let prepared = prepare_fixed(examples, candidate_sets, items, head)?;
    let mut grad = stack.zeros_like();
    let loss = batch_loss(
        stack,
        head,
        items,
        &template_vectors(head, templates),
        &prepared,
        Some(&mut grad),
    );
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProjectionHistory {
    pub initial: f64,
    pub epochs: Vec<f64>,
}

/// Trains the stack only; `head`, `items` and the example vectors are read.
pub fn train_projections<R: Rng + ?Sized>(
    mut stack: ProjectionStack,
    head: &SurrogateHead,
    items: &ItemTable,
    templates: &PromptTemplates,
    examples: &[ProjectionExample],
    config: &ProjectionConfig,
    rng: &mut R,
) -> Result<(ProjectionStack, ProjectionHistory)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::contract("no projection examples"));
    }
    if stack.token_dim() != head.token_dim {
        return Err(Error::contract(
            "stack and head disagree on the token dimension",
        ));
    }
    let tv = template_vectors(head, templates);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let initial = {
        let prepared = prepare(examples, items, head, config.train_candidates, rng)?;
        prepared
            .chunks(config.batch_size)
            .map(|c| batch_loss(&stack, head, items, &tv, c, None) * c.len() as f64)
            .sum::<f64>()
            / examples.len() as f64
    };
    let mut history = ProjectionHistory {
        initial,
        epochs: Vec::with_capacity(config.epochs),
    };
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let shuffled: Vec<ProjectionExample> = order.iter().map(|&i| examples[i].clone()).collect();
        let prepared = prepare(&shuffled, items, head, config.train_candidates, rng)?;
        let mut sum = 0.0;
        for (bi, chunk) in prepared.chunks(config.batch_size).enumerate() {
            let mut grad = stack.zeros_like();
            let loss = batch_loss(&stack, head, items, &tv, chunk, Some(&mut grad));
            if !loss.is_finite() {
                return Err(Error::Training {
                    stage: "projection",
                    epoch,
                    batch: Some(bi),
                    message: "loss is not finite".into(),
                });
            }
            opt.step(&mut stack, &grad);
            if !stack.all_finite() {
                return Err(Error::Training {
                    stage: "projection",
                    epoch,
                    batch: Some(bi),
                    message: "parameters became non-finite".into(),
                });
            }
            sum += loss * chunk.len() as f64;
        }
        history.epochs.push(sum / examples.len() as f64);
    }
    Ok((stack, history))
}

/// A trained stack frozen for scoring, with every item already projected.
pub struct PromptRanker<'a> {
    stack: &'a ProjectionStack,
    head: &'a SurrogateHead,
    items: &'a ItemTable,
    templates: PromptTemplates,
    projected_items: Matrix,
}

/// What the ranker knows about one user.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptUser {
    pub representation: Vector,
    pub cot: Option<CotSignal>,
}

impl<'a> PromptRanker<'a> {
    pub fn new(
        stack: &'a ProjectionStack,
        head: &'a SurrogateHead,
        items: &'a ItemTable,
        templates: PromptTemplates,
    ) -> Result<Self> {
        if items.item_dim() != stack.fz.input_dim() {
            return Err(Error::contract(
                "item embeddings do not match the item projection",
            ));
        }
        let projected_items = stack.fz.forward_rows(&items.z).out;
        Ok(Self {
            stack,
            head,
            items,
            templates,
            projected_items,
        })
    }

    /// The prompt listing `candidates` in the given order.
    pub fn bundle(&self, user: &PromptUser, candidates: &[ItemId]) -> Result<PromptBundle> {
        let o_x = self.stack.fx.forward(&user.representation)?;
        let o_r = user
            .cot
            .as_ref()
            .map(|c| self.stack.fr.forward(&c.embedding))
            .transpose()?;
        let slots = candidates
            .iter()
            .map(|q| {
                let i = self.items.index_of(q)?;
                Ok(CandidateSlot {
                    item: q.clone(),
                    title: self.items.titles[i].clone(),
                    soft: self.projected_items.row(i).to_owned(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        assemble_prompt(o_x, slots, o_r, &self.templates)
    }

    /// Candidates by mean title-token log-likelihood, best first, ties by
    /// item id. Empty titles score `-inf`.
    pub fn rank(&self, user: &PromptUser, candidates: &[ItemId]) -> Result<Vec<(ItemId, f64)>> {
        if candidates.is_empty() {
            return Err(Error::contract("no candidates to rank"));
        }
        let s = self.bundle(user, candidates)?.context(self.head);
        let mut scored: Vec<(ItemId, f64)> = candidates
            .iter()
            .map(|q| {
                let i = self.items.index_of(q)?;
                let ll = title_log_likelihoods(self.head, &s, &self.items.title_tokens[i]);
                let score = if ll.is_empty() {
                    f64::NEG_INFINITY
                } else {
                    ll.iter().sum::<f64>() / ll.len() as f64
                };
                Ok((q.clone(), score))
            })
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(scored)
    }
}

pub fn rank_candidates(
    stack: &ProjectionStack,
    head: &SurrogateHead,
    items: &ItemTable,
    user: &PromptUser,
    candidates: &[ItemId],
) -> Result<Vec<(ItemId, f64)>> {
    PromptRanker::new(stack, head, items, PromptTemplates::default())?.rank(user, candidates)
}

/// Asks the adapter for an explanation of `item`, attaching `[z; r]` to the
/// prompt as one soft placeholder. One adapter call per request.
pub fn request_explanation(
    item_embedding: &Vector,
    cot: Option<&CotSignal>,
    adapter: &GenerationAdapter,
    user: &UserId,
    item: &ItemId,
    prompt: &PromptBundle,
) -> Result<Explanation> {
    let joint = item_embedding
        .iter()
        .chain(cot.map(|c| c.embedding.iter()).into_iter().flatten())
        .copied();
    let text = format!(
        "{} <SOFT:explain:{}>",
        prompt.render(),
        encode_floats(joint)
    );
    adapter.explain(user, item, &text)
}

/// Per-user map of retained reasoning signals.
pub type CotSignals = BTreeMap<UserId, CotSignal>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cot::FixtureAdapter;
    use crate::gradcheck::{max_relative_error, FD_STEP};
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;

    const TITLES: [&str; 6] = [
        "trail swift kit x001",
        "trail bold pack x002",
        "trail quiet lamp x003",
        "orbit sleek case x004",
        "orbit bright band x005",
        "orbit sturdy tool x006",
    ];

    fn id(i: usize) -> ItemId {
        ItemId::new(format!("q{}", i + 1))
    }

    fn toy(token_dim: usize) -> (SurrogateHead, ItemTable) {
        let head = SurrogateHead::from_titles(TITLES, token_dim, 3);
        let mut rng = seeded(4);
        let entries = TITLES
            .iter()
            .enumerate()
            .map(|(i, t)| {
                (
                    id(i),
                    normal_matrix(1, 4, 1.0, &mut rng).row(0).to_owned(),
                    t.to_string(),
                )
            })
            .collect();
        let items = ItemTable::new(entries, &head).unwrap();
        (head, items)
    }

    /// User vectors point at their target, which makes targets separable.
    fn examples(n: usize, with_cot: bool) -> Vec<ProjectionExample> {
        let mut rng = seeded(5);
        (0..n)
            .map(|k| {
                let t = k % TITLES.len();
                let mut rep = normal_matrix(1, 6, 0.1, &mut rng).row(0).to_owned();
                rep[t] += 1.0;
                ProjectionExample {
                    user: UserId::new(format!("u{k}")),
                    representation: rep,
                    cot: with_cot.then(|| normal_matrix(1, 5, 1.0, &mut rng).row(0).to_owned()),
                    target: id(t),
                }
            })
            .collect()
    }

    fn all_items_sets(n: usize) -> Vec<Vec<ItemId>> {
        vec![(0..TITLES.len()).map(id).collect(); n]
    }

    #[test]
    fn zero_stack_projects_to_zero() {
        let stack = ProjectionStack::zeros(3, 4, 5, 8);
        let cot = CotSignal {
            embedding: Array1::zeros(5),
            score: 0.7,
        };
        let p = stack
            .project_components(&Array1::zeros(3), &Array1::zeros(4), Some(&cot))
            .unwrap();
        assert!(p
            .user
            .iter()
            .chain(p.item.iter())
            .chain(p.cot.unwrap().iter())
            .all(|v| *v == 0.0));
    }

    #[test]
    fn mlp_matches_loop_oracle() {
        let mut rng = seeded(1);
        let mut m = Mlp::init(5, 7, 3, &mut rng);
        m.b1 = normal_matrix(1, 7, 0.5, &mut rng).row(0).to_owned();
        m.b2 = normal_matrix(1, 3, 0.5, &mut rng).row(0).to_owned();
        let x = normal_matrix(1, 5, 1.0, &mut rng).row(0).to_owned();
        let mut hidden = [0.0; 7];
        for (h, slot) in hidden.iter_mut().enumerate() {
            let mut a = m.b1[h];
            for i in 0..5 {
                a += m.w1[[h, i]] * x[i];
            }
            *slot = if a > 0.0 { a } else { 0.0 };
        }
        let y = m.forward(&x).unwrap();
        for o in 0..3 {
            let mut a = m.b2[o];
            for (h, v) in hidden.iter().enumerate() {
                a += m.w2[[o, h]] * v;
            }
            assert_abs_diff_eq!(y[o], a, epsilon = 1e-12);
        }
        assert!(matches!(
            m.forward(&Array1::zeros(4)),
            Err(Error::Contract(_))
        ));
    }

    fn slot(i: usize, d: usize) -> CandidateSlot {
        CandidateSlot {
            item: id(i),
            title: TITLES[i % TITLES.len()].into(),
            soft: Array1::from_elem(d, i as f64),
        }
    }

    #[test]
    fn layout_with_and_without_reasoning() {
        let t = PromptTemplates::default();
        let b =
            assemble_prompt(Array1::ones(4), vec![slot(0, 4)], Some(Array1::ones(4)), &t).unwrap();
        let kinds: Vec<bool> = b.segments.iter().map(Segment::is_soft).collect();
        assert_eq!(kinds, vec![true, false, false, true, true, false]);
        let b = assemble_prompt(Array1::ones(4), vec![slot(0, 4)], None, &t).unwrap();
        assert_eq!(b.soft_count(), 2);
        assert!(matches!(
            assemble_prompt(Array1::ones(4), vec![], None, &t),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn render_carries_soft_placeholders() {
        let b = assemble_prompt(
            Array1::ones(2),
            vec![slot(1, 2)],
            None,
            &PromptTemplates::default(),
        )
        .unwrap();
        let text = b.render();
        assert!(text.starts_with("<SOFT:user:"));
        assert!(text.contains("trail bold pack x002 <SOFT:item:q2:"));
    }

    #[test]
    fn uniform_head_gives_log_vocab_size() {
        let vocab: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
        let head = SurrogateHead::uniform(vocab, 8);
        let b = assemble_prompt(
            Array1::from_elem(8, 3.0),
            vec![slot(2, 8)],
            None,
            &PromptTemplates::default(),
        )
        .unwrap();
        let loss = surrogate_lm_loss(&b, &["w3".into(), "w17".into()], &head).unwrap();
        assert_abs_diff_eq!(loss, 50f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn seeded_head_loss_is_positive_and_checks_vocabulary() {
        let (head, _) = toy(8);
        let b = assemble_prompt(
            Array1::ones(8),
            vec![slot(0, 8)],
            None,
            &PromptTemplates::default(),
        )
        .unwrap();
        let l = surrogate_lm_loss(&b, &tokenize(TITLES[0]), &head).unwrap();
        assert!(l.is_finite() && l > 0.0);
        assert!(matches!(
            surrogate_lm_loss(&b, &["zebra".into()], &head),
            Err(Error::Vocabulary(t)) if t == "zebra"
        ));
        assert_eq!(
            SurrogateHead::from_titles(TITLES, 8, 3).digest(),
            head.digest()
        );
        assert_ne!(
            SurrogateHead::from_titles(TITLES, 8, 4).digest(),
            head.digest()
        );
    }

    #[test]
    fn batched_loss_equals_bundle_loss() {
        let (head, items) = toy(8);
        let mut rng = seeded(2);
        let stack = ProjectionStack::init(6, 4, 5, 8, &mut rng);
        let ex = examples(1, true);
        let sets = vec![vec![id(0), id(3), id(4)]];
        let t = PromptTemplates::default();
        let fast = projection_loss(&stack, &head, &items, &t, &ex, &sets).unwrap();
        let ranker = PromptRanker::new(&stack, &head, &items, t).unwrap();
        let user = PromptUser {
            representation: ex[0].representation.clone(),
            cot: Some(CotSignal {
                embedding: ex[0].cot.clone().unwrap(),
                score: 1.0,
            }),
        };
        let bundle = ranker.bundle(&user, &sets[0]).unwrap();
        let slow = surrogate_lm_loss(
            &bundle,
            &tokenize(items.title(&ex[0].target).unwrap()),
            &head,
        )
        .unwrap();
        assert_abs_diff_eq!(fast, slow, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (head, items) = toy(6);
        let mut rng = seeded(8);
        let stack = ProjectionStack::init(6, 4, 5, 6, &mut rng);
        let mut ex = examples(3, true);
        ex[1].cot = None;
        let sets = vec![
            vec![id(0), id(2)],
            vec![id(1), id(4), id(5)],
            all_items_sets(1).remove(0),
        ];
        let t = PromptTemplates::default();
        let (_, grad) = projection_gradient(&stack, &head, &items, &t, &ex, &sets).unwrap();
        let err = max_relative_error(
            &stack,
            &grad,
            |s| projection_loss(s, &head, &items, &t, &ex, &sets).unwrap(),
            FD_STEP,
        );
        assert!(err <= 1e-4, "max relative error {err}");
    }

    fn toy_config() -> ProjectionConfig {
        ProjectionConfig {
            token_dim: 16,
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-2,
            train_candidates: TITLES.len(),
            ..ProjectionConfig::default()
        }
    }

    #[test]
    fn training_reduces_loss_and_leaves_head_alone() {
        let (head, items) = toy(16);
        let digest = head.digest();
        let mut rng = seeded(9);
        let stack = ProjectionStack::init(6, 4, 5, 16, &mut rng);
        let ex = examples(20, true);
        let sets = all_items_sets(ex.len());
        let t = PromptTemplates::default();
        let before = projection_loss(&stack, &head, &items, &t, &ex, &sets).unwrap();
        let (trained, hist) =
            train_projections(stack, &head, &items, &t, &ex, &toy_config(), &mut rng).unwrap();
        let after = projection_loss(&trained, &head, &items, &t, &ex, &sets).unwrap();
        assert!(after <= 0.7 * before, "{before} -> {after}");
        assert_eq!(hist.epochs.len(), 30);
        assert_eq!(head.digest(), digest);
    }

    #[test]
    fn zero_learning_rate_keeps_stack() {
        let (head, items) = toy(16);
        let mut rng = seeded(9);
        let stack = ProjectionStack::init(6, 4, 5, 16, &mut rng);
        let cfg = ProjectionConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..toy_config()
        };
        let ex = examples(8, false);
        let (out, _) = train_projections(
            stack.clone(),
            &head,
            &items,
            &PromptTemplates::default(),
            &ex,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.digest(), stack.digest());
    }

    #[test]
    fn training_improves_reciprocal_rank() {
        let (head, items) = toy(16);
        let mut rng = seeded(10);
        let stack = ProjectionStack::init(6, 4, 5, 16, &mut rng);
        let ex = examples(24, false);
        let t = PromptTemplates::default();
        let mrr = |s: &ProjectionStack| {
            let r = PromptRanker::new(s, &head, &items, t.clone()).unwrap();
            let pool: Vec<ItemId> = (0..TITLES.len()).map(id).collect();
            ex.iter()
                .map(|e| {
                    let user = PromptUser {
                        representation: e.representation.clone(),
                        cot: None,
                    };
                    let ranked = r.rank(&user, &pool).unwrap();
                    1.0 / (1 + ranked.iter().position(|(q, _)| *q == e.target).unwrap()) as f64
                })
                .sum::<f64>()
                / ex.len() as f64
        };
        let before = mrr(&stack);
        let (trained, _) =
            train_projections(stack, &head, &items, &t, &ex, &toy_config(), &mut rng).unwrap();
        let after = mrr(&trained);
        assert!(after >= 2.0 * before || after > 0.99, "{before} -> {after}");
    }

    #[test]
    fn ranking_edge_cases() {
        let head = SurrogateHead::from_titles(["same title"], 8, 1);
        let z = Array1::ones(4);
        let items = ItemTable::new(
            vec![
                (ItemId::from("b"), z.clone(), "same title".into()),
                (ItemId::from("a"), z.clone(), "same title".into()),
                (ItemId::from("c"), z, "".into()),
            ],
            &head,
        )
        .unwrap();
        let mut rng = seeded(1);
        let stack = ProjectionStack::init(3, 4, 5, 8, &mut rng);
        let user = PromptUser {
            representation: Array1::ones(3),
            cot: None,
        };
        let one = rank_candidates(&stack, &head, &items, &user, &[ItemId::from("b")]).unwrap();
        assert_eq!(one.len(), 1);
        let all = [ItemId::from("c"), ItemId::from("b"), ItemId::from("a")];
        let r = rank_candidates(&stack, &head, &items, &user, &all).unwrap();
        let ids: Vec<&str> = r.iter().map(|(q, _)| q.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert_eq!(r[2].1, f64::NEG_INFINITY);
        assert!(rank_candidates(&stack, &head, &items, &user, &[]).is_err());
    }

    #[test]
    fn explanation_is_one_call_and_verbatim() {
        let mut explanations = BTreeMap::new();
        let text = "Edge of Tomorrow keeps the pace you like.";
        explanations.insert(
            (UserId::from("Peter"), ItemId::from("q12")),
            text.to_string(),
        );
        let adapter = GenerationAdapter::Fixture(FixtureAdapter {
            explanations,
            ..FixtureAdapter::default()
        });
        let bundle = assemble_prompt(
            Array1::ones(2),
            vec![slot(0, 2)],
            None,
            &PromptTemplates::default(),
        )
        .unwrap();
        let before = GenerationAdapter::calls();
        let e = request_explanation(
            &Array1::ones(3),
            None,
            &adapter,
            &UserId::from("Peter"),
            &ItemId::from("q12"),
            &bundle,
        )
        .unwrap();
        assert!(GenerationAdapter::calls() > before);
        assert_eq!(e.text, text);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (head, _) = toy(8);
        let mut rng = seeded(3);
        let stack = ProjectionStack::init(6, 4, 5, 8, &mut rng);
        let ck = stack.to_checkpoint(&head);
        let text = ck.render();
        let back = Checkpoint::parse(&text, std::path::Path::new("p.ckpt")).unwrap();
        let (s2, h2) = ProjectionStack::from_checkpoint(&back).unwrap();
        assert_eq!(s2, stack);
        assert_eq!(h2.digest(), head.digest());
        assert_eq!(s2.to_checkpoint(&h2).render(), text);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn layout_invariants_hold(n in 1usize..=10, cot in any::<bool>()) {
                let slots: Vec<CandidateSlot> = (0..n).map(|i| slot(i, 3)).collect();
                let b = assemble_prompt(Array1::ones(3), slots, cot.then(|| Array1::ones(3)), &PromptTemplates::default()).unwrap();
                let first_is_user = matches!(&b.segments[0], Segment::Soft { kind: SoftKind::User, .. });
                prop_assert!(first_is_user);
                let items: Vec<usize> = b.segments.iter().enumerate()
                    .filter(|(_, s)| matches!(s, Segment::Soft { kind: SoftKind::Item(_), .. }))
                    .map(|(i, _)| i)
                    .collect();
                prop_assert_eq!(items.len(), n);
                for (k, &i) in items.iter().enumerate() {
                    prop_assert_eq!(&b.segments[i - 1], &Segment::Text(tokenize(TITLES[k % TITLES.len()])));
                    if let Segment::Soft { kind: SoftKind::Item(q), .. } = &b.segments[i] {
                        prop_assert_eq!(q, &id(k));
                    }
                }
                prop_assert_eq!(b.soft_count(), n + 1 + usize::from(cot));
            }

            #[test]
            fn zero_head_loss_ignores_projections(scale in -5.0f64..5.0, n in 1usize..5) {
                let vocab: Vec<String> = (0..7).map(|i| format!("t{i}")).collect();
                let head = SurrogateHead::uniform(vocab, 3);
                let slots: Vec<CandidateSlot> = (0..n).map(|i| slot(i, 3)).collect();
                let b = assemble_prompt(Array1::from_elem(3, scale), slots, None, &PromptTemplates::default()).unwrap();
                let l = surrogate_lm_loss(&b, &["t1".into(), "t6".into(), "t1".into()], &head).unwrap();
                prop_assert!((l - 7f64.ln()).abs() < 1e-12);
            }

            #[test]
            fn ranking_is_a_permutation(seed in 0u64..50, picks in prop::collection::btree_set(0usize..6, 1..6)) {
                let (head, items) = toy(8);
                let mut rng = seeded(seed);
                let stack = ProjectionStack::init(6, 4, 5, 8, &mut rng);
                let user = PromptUser { representation: normal_matrix(1, 6, 1.0, &mut rng).row(0).to_owned(), cot: None };
                let cands: Vec<ItemId> = picks.iter().map(|&i| id(i)).collect();
                let r = rank_candidates(&stack, &head, &items, &user, &cands).unwrap();
                let mut got: Vec<ItemId> = r.into_iter().map(|(q, _)| q).collect();
                got.sort();
                prop_assert_eq!(got, cands);
            }
        }
    }
}
