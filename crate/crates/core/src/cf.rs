//! Causal self-attention sequential recommender.
//!
//! Items are embedded, a learned positional embedding is added (positions
//! count from the start of the truncated window), and the sequence passes
//! through `blocks` layers of masked multi-head attention and a ReLU
//! feed-forward network, both with residual connections. The output at the
//! last position is the user representation, and the score of item `q` is
//! its dot product with row `q` of the item embedding matrix.
//!
//! Training groups instances that share a window so one forward and one
//! backward pass serve all of them: with causal masking and left-aligned
//! positions, the output at position `j` of a window is exactly the user
//! representation of its first `j + 1` items.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{ItemId, TrainingInstance, UserId};
use crate::error::{Error, Result};
use crate::gradcheck::{max_relative_error, FD_STEP};
use crate::linalg::{bce_with_logit, normal_matrix, softmax, xavier, Matrix, Vector};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{flat_mut, tref, Params, TensorRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfConfig {
    pub embed_dim: usize,
    pub max_history: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Inverted dropout on the summed input embeddings during training.
    pub dropout: f64,
    pub epochs: usize,
    /// Number of sequence windows per update.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub negatives_per_positive: usize,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            embed_dim: 50,
            max_history: 50,
            blocks: 2,
            heads: 1,
            dropout: 0.0,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            negatives_per_positive: 1,
        }
    }
}

impl CfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::config("cf.embed_dim", "must be positive"));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config("cf.heads", "must divide cf.embed_dim"));
        }
        if self.max_history == 0 {
            return Err(Error::config("cf.max_history", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("cf.dropout", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("cf.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "cf.learning_rate",
                "must be finite and non-negative",
            ));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::config(
                "cf.negatives_per_positive",
                "must be at least 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

impl Block {
    fn zeros(d: usize) -> Self {
        Self {
            wq: Matrix::zeros((d, d)),
            wk: Matrix::zeros((d, d)),
            wv: Matrix::zeros((d, d)),
            w1: Matrix::zeros((d, d)),
            b1: Vector::zeros(d),
            w2: Matrix::zeros((d, d)),
            b2: Vector::zeros(d),
        }
    }

    fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            wq: xavier(d, d, rng),
            wk: xavier(d, d, rng),
            wv: xavier(d, d, rng),
            w1: xavier(d, d, rng),
            b1: Vector::zeros(d),
            w2: xavier(d, d, rng),
            b2: Vector::zeros(d),
        }
    }
}

/// Every trainable tensor of the recommender.
#[derive(Debug, Clone, PartialEq)]
pub struct CfParams {
    /// Row `q` is the collaborative embedding of item `q`.
    pub item_embeddings: Matrix,
    pub positional: Matrix,
    pub blocks: Vec<Block>,
}

impl Params for CfParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![
            tref("item_embeddings", &self.item_embeddings),
            tref("positional", &self.positional),
        ];
        for b in &self.blocks {
            out.push(tref("attn_q", &b.wq));
            out.push(tref("attn_k", &b.wk));
            out.push(tref("attn_v", &b.wv));
            out.push(tref("ffn_w1", &b.w1));
            out.push(tref("ffn_b1", &b.b1));
            out.push(tref("ffn_w2", &b.w2));
            out.push(tref("ffn_b2", &b.b2));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            flat_mut(&mut self.item_embeddings),
            flat_mut(&mut self.positional),
        ];
        for b in &mut self.blocks {
            out.push(flat_mut(&mut b.wq));
            out.push(flat_mut(&mut b.wk));
            out.push(flat_mut(&mut b.wv));
            out.push(flat_mut(&mut b.w1));
            out.push(flat_mut(&mut b.b1));
            out.push(flat_mut(&mut b.w2));
            out.push(flat_mut(&mut b.b2));
        }
        out
    }
}

impl CfParams {
    pub fn init<R: Rng + ?Sized>(n_items: usize, config: &CfConfig, rng: &mut R) -> Self {
        let d = config.embed_dim;
        let std = 1.0 / (d as f64).sqrt();
        let item_embeddings = normal_matrix(n_items, d, std, rng);
        let positional = normal_matrix(config.max_history, d, std * 0.1, rng);
        let blocks = (0..config.blocks).map(|_| Block::init(d, rng)).collect();
        Self {
            item_embeddings,
            positional,
            blocks,
        }
    }

    fn zeros(n_items: usize, config: &CfConfig) -> Self {
        let d = config.embed_dim;
        Self {
            item_embeddings: Matrix::zeros((n_items, d)),
            positional: Matrix::zeros((config.max_history, d)),
            blocks: (0..config.blocks).map(|_| Block::zeros(d)).collect(),
        }
    }
}

struct BlockCache {
    h: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Vec<Matrix>,
    h1: Matrix,
    u: Matrix,
    r: Matrix,
}

/// Row-wise softmax of `scores` with entries above the diagonal masked.
fn causal_softmax(scores: &Matrix) -> Matrix {
    let l = scores.nrows();
    let mut a = Matrix::zeros((l, l));
    for i in 0..l {
        let row = softmax(scores.slice(s![i, ..=i]));
        a.slice_mut(s![i, ..=i]).assign(&row);
    }
    a
}

fn block_forward(b: &Block, h: Matrix, heads: usize) -> (Matrix, BlockCache) {
    let d = h.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = h.dot(&b.wq);
    let k = h.dot(&b.wk);
    let v = h.dot(&b.wv);
    let mut o = Matrix::zeros(h.raw_dim());
    let mut attn = Vec::with_capacity(heads);
    for hd in 0..heads {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let a = causal_softmax(&scores);
        o.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        attn.push(a);
    }
    let h1 = &h + &o;
    let u = h1.dot(&b.w1) + &b.b1;
    let r = u.mapv(|x| x.max(0.0));
    let out = &h1 + &(r.dot(&b.w2) + &b.b2);
    let cache = BlockCache {
        h,
        q,
        k,
        v,
        attn,
        h1,
        u,
        r,
    };
    (out, cache)
}

/// Accumulates parameter gradients into `g` and returns the gradient with
/// respect to the block input.
fn block_backward(b: &Block, c: &BlockCache, dout: &Matrix, g: &mut Block, heads: usize) -> Matrix {
    let d = dout.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    g.w2 += &c.r.t().dot(dout);
    g.b2 += &dout.sum_axis(Axis(0));
    let mut du = dout.dot(&b.w2.t());
    du.zip_mut_with(&c.u, |x, &u| {
        if u <= 0.0 {
            *x = 0.0
        }
    });
    g.w1 += &c.h1.t().dot(&du);
    g.b1 += &du.sum_axis(Axis(0));
    let dh1 = dout + &du.dot(&b.w1.t());

    let mut dq = Matrix::zeros(c.q.raw_dim());
    let mut dk = Matrix::zeros(c.k.raw_dim());
    let mut dv = Matrix::zeros(c.v.raw_dim());
    for hd in 0..heads {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let a = &c.attn[hd];
        let doh = dh1.slice(cols);
        let da = doh.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&doh));
        let inner = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = a * &(&da - &inner) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    g.wq += &c.h.t().dot(&dq);
    g.wk += &c.h.t().dot(&dk);
    g.wv += &c.h.t().dot(&dv);
    dh1 + dq.dot(&b.wq.t()) + dk.dot(&b.wk.t()) + dv.dot(&b.wv.t())
}

/// Input rows `E[items] + P[0..L]`.
fn embed_window(p: &CfParams, items: &[usize]) -> Matrix {
    let d = p.item_embeddings.ncols();
    let mut h = Matrix::zeros((items.len(), d));
    for (i, &q) in items.iter().enumerate() {
        let mut row = h.row_mut(i);
        row += &p.item_embeddings.row(q);
        row += &p.positional.row(i);
    }
    h
}

fn stack_forward(p: &CfParams, mut h: Matrix, heads: usize) -> (Matrix, Vec<BlockCache>) {
    let mut caches = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let (out, cache) = block_forward(b, h, heads);
        caches.push(cache);
        h = out;
    }
    (h, caches)
}

/// A run of consecutive history items and the instances scored against
/// its prefixes: `(position, candidate, label)`.
#[derive(Debug, Clone, PartialEq)]
struct Window {
    items: Vec<usize>,
    targets: Vec<(usize, usize, bool)>,
}

fn build_windows(
    instances: &[TrainingInstance],
    index: &HashMap<ItemId, usize>,
    max_history: usize,
) -> Result<Vec<Window>> {
    let lookup = |q: &ItemId| {
        index
            .get(q)
            .copied()
            .ok_or_else(|| Error::UnknownItem(q.0.clone()))
    };
    let mut per_user: BTreeMap<&UserId, Vec<(Vec<usize>, usize, bool)>> = BTreeMap::new();
    for inst in instances {
        if inst.history.is_empty() {
            return Err(Error::contract(format!(
                "instance of user `{}` has an empty history",
                inst.user
            )));
        }
        let start = inst.history.len().saturating_sub(max_history);
        let window = inst.history[start..]
            .iter()
            .map(lookup)
            .collect::<Result<Vec<_>>>()?;
        per_user.entry(&inst.user).or_default().push((
            window,
            lookup(&inst.candidate)?,
            inst.label,
        ));
    }
    let mut windows = Vec::new();
    for (_, mut list) in per_user {
        // longest first so shorter histories find a window that extends them
        list.sort_by_key(|e| std::cmp::Reverse(e.0.len()));
        let mut mine: Vec<Window> = Vec::new();
        for (hist, cand, label) in list {
            let pos = hist.len() - 1;
            match mine.iter_mut().find(|w| w.items.starts_with(&hist)) {
                Some(w) => w.targets.push((pos, cand, label)),
                None => mine.push(Window {
                    items: hist,
                    targets: vec![(pos, cand, label)],
                }),
            }
        }
        windows.extend(mine);
    }
    Ok(windows)
}

/// Loss summed over the window's instances, and its gradient added to `grad`
/// when one is passed.
fn window_loss(
    p: &CfParams,
    w: &Window,
    heads: usize,
    dropout: Option<&Matrix>,
    grad: Option<&mut CfParams>,
) -> f64 {
    let mut h0 = embed_window(p, &w.items);
    if let Some(mask) = dropout {
        h0 *= mask;
    }
    let (out, caches) = stack_forward(p, h0, heads);
    let mut loss = 0.0;
    let mut dout = Matrix::zeros(out.raw_dim());
    let mut item_grads: Vec<(usize, Array1<f64>)> = Vec::new();
    for &(pos, cand, label) in &w.targets {
        let x = out.row(pos);
        let e = p.item_embeddings.row(cand);
        let (l, g) = bce_with_logit(x.dot(&e), label);
        loss += l;
        if g != 0.0 {
            dout.row_mut(pos).scaled_add(g, &e);
            item_grads.push((cand, x.to_owned() * g));
        }
    }
    let Some(grad) = grad else {
        return loss;
    };
    for (cand, gx) in item_grads {
        let mut row = grad.item_embeddings.row_mut(cand);
        row += &gx;
    }
    let mut dh = dout;
    for (b, (cache, gb)) in p
        .blocks
        .iter()
        .zip(caches.iter().zip(grad.blocks.iter_mut()))
        .rev()
    {
        dh = block_backward(b, cache, &dh, gb, heads);
    }
    if let Some(mask) = dropout {
        dh *= mask;
    }
    for (i, &q) in w.items.iter().enumerate() {
        let mut e = grad.item_embeddings.row_mut(q);
        e += &dh.row(i);
        let mut pr = grad.positional.row_mut(i);
        pr += &dh.row(i);
    }
    loss
}

/// A trained, frozen recommender. Parameters are only reachable through
/// shared references, so nothing downstream can change them.
#[derive(Debug, Clone, PartialEq)]
pub struct CfModel {
    config: CfConfig,
    items: Vec<ItemId>,
    index: HashMap<ItemId, usize>,
    params: CfParams,
    loss_history: Vec<f64>,
}

impl CfModel {
    pub fn config(&self) -> &CfConfig {
        &self.config
    }

    pub fn params(&self) -> &CfParams {
        &self.params
    }

    /// Item vocabulary in index order (sorted by id).
    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn contains(&self, item: &ItemId) -> bool {
        self.index.contains_key(item)
    }

    pub fn index_of(&self, item: &ItemId) -> Option<usize> {
        self.index.get(item).copied()
    }

    /// Mean training loss of each epoch.
    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn is_frozen(&self) -> bool {
        true
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Row `q` of the item embedding matrix, or `None` for items the model
    /// never saw; callers route those to the semantic path.
    pub fn item_embedding(&self, item: &ItemId) -> Option<Vector> {
        self.index_of(item)
            .map(|i| self.params.item_embeddings.row(i).to_owned())
    }

    /// Final-position output for the given input rows (one per history item,
    /// oldest first). Only the last `max_history` rows are used.
    pub fn user_representation_from_rows(&self, rows: &Matrix) -> Result<Vector> {
        if rows.nrows() == 0 {
            return Err(Error::contract("user representation of an empty history"));
        }
        if rows.ncols() != self.config.embed_dim {
            return Err(Error::contract(format!(
                "history rows have dimension {}, expected {}",
                rows.ncols(),
                self.config.embed_dim
            )));
        }
        let start = rows.nrows().saturating_sub(self.config.max_history);
        let mut h = rows.slice(s![start.., ..]).to_owned();
        for i in 0..h.nrows() {
            let mut row = h.row_mut(i);
            row += &self.params.positional.row(i);
        }
        let (out, _) = stack_forward(&self.params, h, self.config.heads);
        Ok(out.row(out.nrows() - 1).to_owned())
    }

    pub fn user_representation(&self, history: &[ItemId]) -> Result<Vector> {
        let rows = self.history_rows(history)?;
        self.user_representation_from_rows(&rows)
    }

    fn history_rows(&self, history: &[ItemId]) -> Result<Matrix> {
        let start = history.len().saturating_sub(self.config.max_history);
        let mut rows = Matrix::zeros((history.len() - start, self.config.embed_dim));
        for (i, q) in history[start..].iter().enumerate() {
            let idx = self
                .index_of(q)
                .ok_or_else(|| Error::UnknownItem(q.0.clone()))?;
            rows.row_mut(i)
                .assign(&self.params.item_embeddings.row(idx));
        }
        Ok(rows)
    }

    /// `x · E_q` for every item of the vocabulary, in index order.
    pub fn scores_for(&self, user: &Vector) -> Vector {
        self.params.item_embeddings.dot(user)
    }

    pub fn next_item_scores(&self, history: &[ItemId]) -> Result<Vector> {
        Ok(self.scores_for(&self.user_representation(history)?))
    }

    /// Softmax-normalised copy of [`CfModel::next_item_scores`].
    pub fn next_item_probabilities(&self, history: &[ItemId]) -> Result<Vector> {
        Ok(softmax(self.next_item_scores(history)?.view()))
    }

    /// Items by descending score, ties by ascending id.
    pub fn ranked(&self, scores: &Vector) -> Vec<(ItemId, f64)> {
        let mut out: Vec<(ItemId, f64)> = self
            .items
            .iter()
            .cloned()
            .zip(scores.iter().copied())
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out
    }

    /// Mean loss over `instances` without touching the parameters.
    pub fn loss(&self, instances: &[TrainingInstance]) -> Result<f64> {
        let windows = build_windows(instances, &self.index, self.config.max_history)?;
        let total: f64 = windows
            .iter()
            .map(|w| window_loss(&self.params, w, self.config.heads, None, None))
            .sum();
        Ok(total / instances.len().max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        Checkpoint::new("cf")
            .with_meta("embed_dim", c.embed_dim)
            .with_meta("max_history", c.max_history)
            .with_meta("blocks", c.blocks)
            .with_meta("heads", c.heads)
            .with_meta("dropout", format!("{:?}", c.dropout))
            .with_meta("epochs", c.epochs)
            .with_meta("batch_size", c.batch_size)
            .with_meta("learning_rate", format!("{:?}", c.learning_rate))
            .with_meta("negatives_per_positive", c.negatives_per_positive)
            .with_meta(
                "loss_history",
                self.loss_history
                    .iter()
                    .map(|l| format!("{l:?}"))
                    .collect::<Vec<_>>()
                    .join(" "),
            )
            .with_list("items", self.items.iter().map(|q| q.0.clone()).collect())
            .with_params(&self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "cf" {
            return Err(Error::Data(format!(
                "expected a cf checkpoint, found `{}`",
                ck.kind
            )));
        }
        let config = CfConfig {
            embed_dim: ck.meta_parse("embed_dim")?,
            max_history: ck.meta_parse("max_history")?,
            blocks: ck.meta_parse("blocks")?,
            heads: ck.meta_parse("heads")?,
            dropout: ck.meta_parse("dropout")?,
            epochs: ck.meta_parse("epochs")?,
            batch_size: ck.meta_parse("batch_size")?,
            learning_rate: ck.meta_parse("learning_rate")?,
            optimizer: OptimizerKind::Adam,
            negatives_per_positive: ck.meta_parse("negatives_per_positive")?,
        };
        let loss_history = ck
            .meta("loss_history")?
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Data("bad loss history".into()))
            })
            .collect::<Result<_>>()?;
        let items: Vec<ItemId> = ck.list("items")?.iter().map(ItemId::new).collect();
        let mut params = CfParams::zeros(items.len(), &config);
        ck.load_params(&mut params)?;
        let index = items
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, q)| (q, i))
            .collect();
        Ok(Self {
            config,
            items,
            index,
            params,
            loss_history,
        })
    }
}

/// Item vocabulary of a set of instances: every history and candidate item,
/// sorted by id.
/// Worst relative error between the analytic gradient of the summed
/// training loss over `instances` and central differences, at `params`.
/// `params` must cover the items of `instances` in sorted id order.
pub fn gradient_check(
    params: &CfParams,
    instances: &[TrainingInstance],
    config: &CfConfig,
) -> Result<f64> {
    let items = vocabulary(instances);
    let index: HashMap<ItemId, usize> = items
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, q)| (q, i))
        .collect();
    let windows = build_windows(instances, &index, config.max_history)?;
    let mut grad = CfParams::zeros(items.len(), config);
    if params.item_embeddings.dim() != grad.item_embeddings.dim() {
        return Err(Error::contract(
            "parameters do not match the instance vocabulary",
        ));
    }
    for w in &windows {
        window_loss(params, w, config.heads, None, Some(&mut grad));
    }
    let loss = |q: &CfParams| {
        windows
            .iter()
            .map(|w| window_loss(q, w, config.heads, None, None))
            .sum()
    };
    Ok(max_relative_error(params, &grad, loss, FD_STEP))
}

fn vocabulary(instances: &[TrainingInstance]) -> Vec<ItemId> {
    let mut items: Vec<ItemId> = instances
        .iter()
        .flat_map(|t| t.history.iter().chain(std::iter::once(&t.candidate)))
        .cloned()
        .collect();
    items.sort();
    items.dedup();
    items
}

/// Trains a fresh model on `instances` and returns it frozen.
pub fn train_cf<R: Rng + ?Sized>(
    instances: &[TrainingInstance],
    config: &CfConfig,
    rng: &mut R,
) -> Result<CfModel> {
    config.validate()?;
    if instances.is_empty() {
        return Err(Error::contract("no training instances"));
    }
    let items = vocabulary(instances);
    let index: HashMap<ItemId, usize> = items
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, q)| (q, i))
        .collect();
    let mut params = CfParams::init(items.len(), config, rng);
    let mut windows = build_windows(instances, &index, config.max_history)?;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut loss_history = Vec::with_capacity(config.epochs);
    let keep = 1.0 - config.dropout;

    for epoch in 0..config.epochs {
        windows.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for (bi, batch) in windows.chunks(config.batch_size).enumerate() {
            let mut grad = CfParams::zeros(items.len(), config);
            let mut batch_loss = 0.0;
            let mut count = 0usize;
            for w in batch {
                let mask = (config.dropout > 0.0).then(|| {
                    Array2::from_shape_fn((w.items.len(), config.embed_dim), |_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                });
                batch_loss += window_loss(&params, w, config.heads, mask.as_ref(), Some(&mut grad));
                count += w.targets.len();
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training {
                    stage: "cf",
                    epoch,
                    batch: Some(bi),
                    message: "loss is not finite".into(),
                });
            }
            for t in grad.tensors_mut() {
                t.iter_mut().for_each(|g| *g /= count as f64);
            }
            opt.step(&mut params, &grad);
            if !params.all_finite() {
                return Err(Error::Training {
                    stage: "cf",
                    epoch,
                    batch: Some(bi),
                    message: "parameters became non-finite".into(),
                });
            }
            epoch_loss += batch_loss;
            epoch_count += count;
        }
        loss_history.push(epoch_loss / epoch_count as f64);
    }

    Ok(CfModel {
        config: config.clone(),
        items,
        index,
        params,
        loss_history,
    })
}

/// Mid-rank percentile of `score` within `scores`: the fraction of scores
/// strictly below it, counting other equal scores as half. A vector of
/// identical scores gives exactly 0.5.
pub fn percentile(score: f64, scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.5;
    }
    let below = scores.iter().filter(|s| **s < score).count() as f64;
    let equal = scores.iter().filter(|s| **s == score).count() as f64;
    if equal as usize == scores.len() {
        return 0.5;
    }
    // `score` itself is assumed to be one of `scores`
    let others_equal = (equal - 1.0).max(0.0);
    (below + 0.5 * others_equal) / scores.len() as f64
}

/// Renders a calibrated prior as `likelihood P%`.
pub fn verbalize_prior(percentile: f64) -> String {
    let p = (100.0 * percentile.clamp(0.0, 1.0)).round() as i64;
    format!("likelihood {p}%")
}

/// Percentile of `score` within `scores`, verbalised.
pub fn verbalize_score(score: f64, scores: &[f64]) -> String {
    verbalize_prior(percentile(score, scores))
}
